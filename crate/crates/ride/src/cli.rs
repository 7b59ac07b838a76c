//! The command-line surface: corpus generation, training, description,
//! matching and the evaluation harnesses behind one binary.
//!
//! Every command is deterministic given its flags: reruns write
//! byte-identical files and print byte-identical text, so nothing here
//! emits wall-clock time. Exit codes: 0 success, 1 validation failure
//! (bad flags, malformed inputs, failed checks), 2 I/O failure.
//! Messages go to standard error.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::equivariant::{cyclic_shift, CyclicGroup, ShiftOffsets};
use crate::losses::{dual_softmax, orientation_loss, LossError, ScoreMatrix};
use crate::matcheval::{
    estimate_relative_pose, extract, match_dual_softmax, match_mnn, pose_error, pose_error_auc,
    rotation_sweep, tracking_error, CameraIntrinsics, Extraction, MatchEvalError, MatchSet,
    RansacParams, TrackingFrame,
};
use crate::model::{
    invariant_descriptors, ForwardMode, ModelError, OrientationHistogram, RideConfig, RideModel,
};
use crate::selfsup::{
    compute_correspondences, load_corpus, synth_corpus, training_pair, warp_image,
    CorrespondenceSet, GrayImage, Homography, HomographySpec, PhotometricSpec, SelfSupError,
};
use crate::tensor::container::{self, ContainerError, NamedTensor};
use crate::tensor::{Tensor, TensorError};
use crate::trainer::{
    adam_step, gradient_integrity, parse_train_config, train, AdamState, TrainConfig, TrainError,
    ADAM_EPS,
};

#[derive(Debug, Error)]
enum CliError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    SelfSup(#[from] SelfSupError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    MatchEval(#[from] MatchEvalError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

fn io_at(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io { path: path.display().to_string(), source }
}

/// True when any cause in the chain is an I/O error; that is what
/// separates exit code 2 from exit code 1.
fn io_rooted(err: &CliError) -> bool {
    let mut cur: Option<&(dyn std::error::Error + 'static)> = Some(err);
    while let Some(e) = cur {
        if e.is::<std::io::Error>() {
            return true;
        }
        cur = e.source();
    }
    false
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| io_at(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_at(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| io_at(path, e))
}

/// Parses `argv` (program name first) and runs the selected command,
/// returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are successes; everything else
            // clap rejects is a validation failure.
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    match cli.command.execute() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            if io_rooted(&err) {
                2
            } else {
                1
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ride",
    version,
    about = "Rotation-equivariant keypoint detection and rotation-invariant description"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic grayscale texture corpus as PGM files.
    GenCorpus(GenCorpusArgs),
    /// Train on an image directory; writes checkpoints and a CSV log.
    Train(TrainArgs),
    /// Detect keypoints and describe one image into a tensor container.
    Describe(DescribeArgs),
    /// Match two descriptor dumps into a CSV of correspondences.
    Match(MatchArgs),
    /// Matching accuracy under a full in-plane rotation sweep.
    EvalRotation(EvalRotationArgs),
    /// Relative pose errors over a list of image pairs.
    EvalPose(EvalPoseArgs),
    /// Point tracking error over a labeled frame sequence.
    EvalTrack(EvalTrackArgs),
    /// Finite-difference audit of the training gradients.
    Gradcheck(GradcheckArgs),
    /// Built-in property checks, one PASS/FAIL line each.
    Selftest(SelftestArgs),
}

impl Command {
    fn execute(self) -> Result<i32, CliError> {
        match self {
            Command::GenCorpus(args) => args.run(),
            Command::Train(args) => args.run(),
            Command::Describe(args) => args.run(),
            Command::Match(args) => args.run(),
            Command::EvalRotation(args) => args.run(),
            Command::EvalPose(args) => args.run(),
            Command::EvalTrack(args) => args.run(),
            Command::Gradcheck(args) => args.run(),
            Command::Selftest(args) => args.run(),
        }
    }
}

/// Built-in architecture plans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Plan {
    /// Full-size network: |G|=8, blocks 8-8-16-16, 16 descriptor channels.
    Ride,
    /// Double-width variant of `ride`.
    RideL,
    /// Half-width plan sized for CPU runs.
    Desk,
}

impl Plan {
    fn config(self) -> RideConfig {
        match self {
            Plan::Ride => RideConfig::ride(),
            Plan::RideL => RideConfig::ride_l(),
            Plan::Desk => RideConfig::desk(),
        }
    }
}

/// Where evaluation commands get their model.
#[derive(Debug, Args)]
struct ModelArgs {
    /// Checkpoint to load.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Architecture plan for a fresh seeded model (default desk).
    #[arg(long, value_enum, conflicts_with = "checkpoint")]
    plan: Option<Plan>,
    /// Seed for fresh model weights and downstream sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn load(&self) -> Result<RideModel<f32>, CliError> {
        match &self.checkpoint {
            Some(path) => Ok(RideModel::load(path)?.0),
            None => Ok(RideModel::new(self.plan.unwrap_or(Plan::Desk).config(), self.seed)?),
        }
    }
}

/// Matching rule over descriptor sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Matcher {
    /// Mutual nearest neighbors on raw cosine scores.
    Mnn,
    /// Mutual argmax of the dual-softmax probabilities, thresholded.
    DualSoftmax,
}

#[derive(Debug, Args)]
struct MatcherArgs {
    #[arg(long, value_enum, default_value_t = Matcher::Mnn)]
    matcher: Matcher,
    /// Dual-softmax temperature.
    #[arg(long, default_value_t = 0.1)]
    temperature: f64,
    /// Dual-softmax probability threshold.
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
}

impl MatcherArgs {
    fn run(&self, a: &Extraction<f32>, b: &Extraction<f32>) -> Result<MatchSet, CliError> {
        Ok(match self.matcher {
            Matcher::Mnn => match_mnn(a, b)?,
            Matcher::DualSoftmax => match_dual_softmax(a, b, self.temperature, self.threshold)?,
        })
    }
}

#[derive(Debug, Args)]
struct GenCorpusArgs {
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of images.
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 182)]
    size: usize,
}

impl GenCorpusArgs {
    fn run(self) -> Result<i32, CliError> {
        if self.count == 0 {
            return Err(invalid("--count must be at least 1"));
        }
        if self.size < 8 {
            return Err(invalid("--size must be at least 8"));
        }
        create_dir(&self.out)?;
        // Zero-padded names keep corpus order stable under the sorted
        // directory load.
        let digits = (self.count - 1).to_string().len().max(2);
        for (i, image) in synth_corpus(self.seed, self.count, self.size).iter().enumerate() {
            image.save(self.out.join(format!("tex{i:0digits$}.pgm")))?;
        }
        println!(
            "wrote {} {}x{} images to {}",
            self.count,
            self.size,
            self.size,
            self.out.display()
        );
        Ok(0)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory of training images (.pgm/.png).
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for best.ckpt, final.ckpt and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    /// key = value configuration file; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Architecture plan to train.
    #[arg(long, value_enum, default_value_t = Plan::Desk)]
    plan: Plan,
}

impl TrainArgs {
    fn run(self) -> Result<i32, CliError> {
        let mut config = match &self.config {
            Some(path) => parse_train_config(&read_text(path)?)?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        let corpus = load_corpus(&self.corpus)?;
        if corpus.is_empty() {
            return Err(invalid(format!("no images in {}", self.corpus.display())));
        }
        let images: Vec<GrayImage> = corpus.into_iter().map(|(_, img)| img).collect();
        create_dir(&self.out)?;
        let outcome = train::<f32>(&images, &self.plan.config(), &config, Some(&self.out))?;
        println!("trained {} iterations on {} images", config.iterations, images.len());
        if !outcome.skipped_pairs.is_empty() {
            println!("skipped {} empty-correspondence draws", outcome.skipped_pairs.len());
        }
        match (outcome.best_iteration, outcome.best_val_mma) {
            (Some(iter), Some(score)) => {
                println!("best validation mma {score} at iteration {iter}");
            }
            _ => println!("no validation pass ran"),
        }
        println!("wrote best.ckpt, final.ckpt and metrics.csv to {}", self.out.display());
        Ok(0)
    }
}

#[derive(Debug, Args)]
struct DescribeArgs {
    /// Input image (.pgm/.png).
    #[arg(long)]
    image: PathBuf,
    /// Output tensor container.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Keypoint budget.
    #[arg(long, default_value_t = 10000)]
    topk: usize,
}

impl DescribeArgs {
    fn run(self) -> Result<i32, CliError> {
        if self.topk == 0 {
            return Err(invalid("--topk must be at least 1"));
        }
        let model = self.model.load()?;
        let image = GrayImage::load(&self.image)?;
        let ex = extract(&model, &image, self.topk)?;
        let n = ex.positions.len();
        let mut keypoints = Vec::with_capacity(2 * n);
        for &(row, col) in &ex.positions {
            keypoints.push(row as f32);
            keypoints.push(col as f32);
        }
        let tensors = [
            NamedTensor::new("keypoints", vec![n, 2], keypoints),
            NamedTensor::new("scores", vec![n], ex.scores.iter().map(|&s| s as f32).collect()),
            NamedTensor::new("descriptors", vec![ex.dim, n], ex.descriptors),
        ];
        container::save(&self.out, &tensors)?;
        println!(
            "wrote {n} keypoints (descriptor dim {}) to {}",
            ex.dim,
            self.out.display()
        );
        Ok(0)
    }
}

/// Reads a `describe` dump back into an extraction.
fn read_extraction(path: &Path) -> Result<Extraction<f32>, CliError> {
    let tensors = container::load(path)?;
    let get = |name: &str| {
        container::find(&tensors, name)
            .ok_or_else(|| invalid(format!("{}: missing tensor {name}", path.display())))
    };
    let keypoints = get("keypoints")?;
    let scores = get("scores")?;
    let descriptors = get("descriptors")?;
    let n = match keypoints.shape.as_slice() {
        [n, 2] => *n,
        other => {
            return Err(invalid(format!(
                "{}: keypoints shaped {other:?}, want [n, 2]",
                path.display()
            )))
        }
    };
    if scores.shape != [n] {
        return Err(invalid(format!(
            "{}: scores shaped {:?}, want [{n}]",
            path.display(),
            scores.shape
        )));
    }
    let dim = match descriptors.shape.as_slice() {
        [dim, cols] if *cols == n => *dim,
        other => {
            return Err(invalid(format!(
                "{}: descriptors shaped {other:?}, want [dim, {n}]",
                path.display()
            )))
        }
    };
    Ok(Extraction {
        positions: keypoints.data.chunks_exact(2).map(|rc| (rc[0] as f64, rc[1] as f64)).collect(),
        scores: scores.data.iter().map(|&s| s as f64).collect(),
        dim,
        descriptors: descriptors.data.clone(),
    })
}

#[derive(Debug, Args)]
struct MatchArgs {
    /// Descriptor dump for side A.
    #[arg(long)]
    desc_a: PathBuf,
    /// Descriptor dump for side B.
    #[arg(long)]
    desc_b: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    matcher: MatcherArgs,
}

impl MatchArgs {
    fn run(self) -> Result<i32, CliError> {
        let a = read_extraction(&self.desc_a)?;
        let b = read_extraction(&self.desc_b)?;
        let set = self.matcher.run(&a, &b)?;
        let mut csv = String::from("index_a,index_b,row_a,col_a,row_b,col_b,score\n");
        for &(ia, ib, score) in &set.matches {
            let (ra, ca) = set.keypoints_a[ia];
            let (rb, cb) = set.keypoints_b[ib];
            writeln!(csv, "{ia},{ib},{ra},{ca},{rb},{cb},{score}").expect("string write");
        }
        write_text(&self.out, &csv)?;
        println!("wrote {} matches to {}", set.matches.len(), self.out.display());
        Ok(0)
    }
}

#[derive(Debug, Args)]
struct EvalRotationArgs {
    /// Directory of evaluation images.
    #[arg(long)]
    images: PathBuf,
    /// Output CSV, 36 rows per image (10-degree steps).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Keypoints per image.
    #[arg(long, default_value_t = 512)]
    topk: usize,
}

impl EvalRotationArgs {
    fn run(self) -> Result<i32, CliError> {
        if self.topk == 0 {
            return Err(invalid("--topk must be at least 1"));
        }
        let model = self.model.load()?;
        let images = load_corpus(&self.images)?;
        if images.is_empty() {
            return Err(invalid(format!("no images in {}", self.images.display())));
        }
        let rows = rotation_sweep(&model, &images, self.topk)?;
        let mut csv = String::from("image,angle_degrees,mma3,mma5,mma10\n");
        for r in &rows {
            writeln!(csv, "{},{},{},{},{}", r.image, r.angle_degrees, r.mma3, r.mma5, r.mma10)
                .expect("string write");
        }
        write_text(&self.out, &csv)?;
        let mean3 = rows.iter().map(|r| r.mma3).sum::<f64>() / rows.len() as f64;
        println!("wrote {} sweep rows to {}", rows.len(), self.out.display());
        println!("mean mma3 over the sweep: {mean3}");
        Ok(0)
    }
}

/// One evaluation pair: two image names, shared pinhole intrinsics and
/// optional ground truth.
struct PairSpec {
    image_a: String,
    image_b: String,
    intrinsics: CameraIntrinsics,
    truth: Option<(Matrix3<f64>, Vector3<f64>)>,
}

/// Pair list format: `image_a image_b fx fy cx cy`, optionally followed
/// by a row-major 3x3 rotation and a 3-vector translation (18 fields
/// total). Blank lines and `#` comments are skipped.
fn parse_pairs(text: &str) -> Result<Vec<PairSpec>, CliError> {
    let mut specs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 6 && tokens.len() != 18 {
            return Err(invalid(format!(
                "pair line {}: want 6 fields (image_a image_b fx fy cx cy) or 18 with ground \
                 truth appended, got {}",
                idx + 1,
                tokens.len()
            )));
        }
        let number = |token: &str| -> Result<f64, CliError> {
            token
                .parse::<f64>()
                .map_err(|_| invalid(format!("pair line {}: bad number {token}", idx + 1)))
        };
        let intrinsics = CameraIntrinsics::new(
            number(tokens[2])?,
            number(tokens[3])?,
            number(tokens[4])?,
            number(tokens[5])?,
        )?;
        let truth = if tokens.len() == 18 {
            let mut values = [0.0f64; 12];
            for (slot, token) in values.iter_mut().zip(&tokens[6..]) {
                *slot = number(token)?;
            }
            Some((Matrix3::from_row_slice(&values[..9]), Vector3::new(values[9], values[10], values[11])))
        } else {
            None
        };
        specs.push(PairSpec {
            image_a: tokens[0].to_string(),
            image_b: tokens[1].to_string(),
            intrinsics,
            truth,
        });
    }
    if specs.is_empty() {
        return Err(invalid("pair list holds no pairs"));
    }
    Ok(specs)
}

fn ensure_extracted(
    cache: &mut HashMap<String, Extraction<f32>>,
    dir: &Path,
    name: &str,
    model: &RideModel<f32>,
    top_k: usize,
) -> Result<(), CliError> {
    if !cache.contains_key(name) {
        let image = GrayImage::load(dir.join(name))?;
        cache.insert(name.to_string(), extract(model, &image, top_k)?);
    }
    Ok(())
}

#[derive(Debug, Args)]
struct EvalPoseArgs {
    /// Pair list: image_a image_b fx fy cx cy, optionally followed by a
    /// row-major 3x3 rotation and a translation 3-vector as ground truth.
    #[arg(long)]
    pairs: PathBuf,
    /// Directory holding the listed images.
    #[arg(long)]
    images: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Keypoints per image.
    #[arg(long, default_value_t = 2048)]
    topk: usize,
    #[command(flatten)]
    matcher: MatcherArgs,
    /// RANSAC iteration budget.
    #[arg(long, default_value_t = 2000)]
    ransac_iterations: usize,
    /// Sampson inlier threshold in normalized camera units.
    #[arg(long, default_value_t = 1e-3)]
    sampson_threshold: f64,
}

impl EvalPoseArgs {
    fn run(self) -> Result<i32, CliError> {
        if self.topk == 0 {
            return Err(invalid("--topk must be at least 1"));
        }
        let model = self.model.load()?;
        let specs = parse_pairs(&read_text(&self.pairs)?)?;
        let params = RansacParams {
            iterations: self.ransac_iterations,
            threshold: self.sampson_threshold,
            seed: self.model.seed,
        };
        let mut cache = HashMap::new();
        let mut csv = String::from(
            "image_a,image_b,matches,inliers,rotation_error_deg,translation_error_deg,\
             combined_error_deg\n",
        );
        // Combined errors of ground-truth pairs; estimation failures
        // count as infinite so they weigh down the AUC.
        let mut truth_errors = Vec::new();
        for spec in &specs {
            ensure_extracted(&mut cache, &self.images, &spec.image_a, &model, self.topk)?;
            ensure_extracted(&mut cache, &self.images, &spec.image_b, &model, self.topk)?;
            let set = self.matcher.run(&cache[&spec.image_a], &cache[&spec.image_b])?;
            let pose = estimate_relative_pose(&set, &spec.intrinsics, &spec.intrinsics, &params)?;
            write!(csv, "{},{},{},", spec.image_a, spec.image_b, set.matches.len())
                .expect("string write");
            match (&pose, &spec.truth) {
                (Some(p), Some((r_gt, t_gt))) => {
                    let err = pose_error(p, r_gt, t_gt);
                    truth_errors.push(err.combined);
                    writeln!(
                        csv,
                        "{},{},{},{}",
                        p.inliers.len(),
                        err.rotation_error_deg,
                        err.translation_angle_error_deg,
                        err.combined
                    )
                    .expect("string write");
                }
                (Some(p), None) => {
                    writeln!(csv, "{},,,", p.inliers.len()).expect("string write");
                }
                (None, Some(_)) => {
                    truth_errors.push(f64::INFINITY);
                    writeln!(csv, "0,inf,inf,inf").expect("string write");
                }
                (None, None) => writeln!(csv, "0,,,").expect("string write"),
            }
        }
        write_text(&self.out, &csv)?;
        println!("wrote {} pose rows to {}", specs.len(), self.out.display());
        if !truth_errors.is_empty() {
            let auc = pose_error_auc(&truth_errors, &[5.0, 10.0, 20.0])?;
            println!(
                "pose auc over {} ground-truth pairs: 5deg {} 10deg {} 20deg {}",
                truth_errors.len(),
                auc[0],
                auc[1],
                auc[2]
            );
        }
        Ok(0)
    }
}

/// Label CSV format: `frame,point,row,col` rows, an optional header,
/// frame indices into the sorted frame order. Returns per-frame label
/// vectors sized to the largest point index.
fn parse_labels(text: &str, frames: usize) -> Result<Vec<Vec<Option<(f64, f64)>>>, CliError> {
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || (idx == 0 && line.starts_with("frame")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(invalid(format!(
                "label line {}: want frame,point,row,col, got {} fields",
                idx + 1,
                fields.len()
            )));
        }
        let bad = || invalid(format!("label line {}: bad value", idx + 1));
        let frame: usize = fields[0].parse().map_err(|_| bad())?;
        let point: usize = fields[1].parse().map_err(|_| bad())?;
        let row: f64 = fields[2].parse().map_err(|_| bad())?;
        let col: f64 = fields[3].parse().map_err(|_| bad())?;
        if frame >= frames {
            return Err(invalid(format!(
                "label line {}: frame {frame} outside the {frames}-frame sequence",
                idx + 1
            )));
        }
        rows.push((frame, point, row, col));
    }
    if rows.is_empty() {
        return Err(invalid("label file holds no rows"));
    }
    let points = rows.iter().map(|r| r.1).max().expect("non-empty") + 1;
    let mut labels = vec![vec![None; points]; frames];
    for (frame, point, row, col) in rows {
        if labels[frame][point].is_some() {
            return Err(invalid(format!("duplicate label for frame {frame} point {point}")));
        }
        labels[frame][point] = Some((row, col));
    }
    Ok(labels)
}

#[derive(Debug, Args)]
struct EvalTrackArgs {
    /// Directory of frames, tracked in file-name order.
    #[arg(long)]
    frames: PathBuf,
    /// Label CSV with frame,point,row,col rows; frame 0 must label
    /// every point.
    #[arg(long)]
    labels: PathBuf,
    /// Output CSV of per-point mean error fractions.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Keypoints per frame.
    #[arg(long, default_value_t = 512)]
    topk: usize,
}

impl EvalTrackArgs {
    fn run(self) -> Result<i32, CliError> {
        if self.topk == 0 {
            return Err(invalid("--topk must be at least 1"));
        }
        let model = self.model.load()?;
        let corpus = load_corpus(&self.frames)?;
        if corpus.len() < 2 {
            return Err(invalid(format!(
                "{} holds {} frames, tracking wants at least 2",
                self.frames.display(),
                corpus.len()
            )));
        }
        let labels = parse_labels(&read_text(&self.labels)?, corpus.len())?;
        let frames: Vec<TrackingFrame> = corpus
            .into_iter()
            .zip(labels)
            .map(|((_, image), points)| TrackingFrame { image, points })
            .collect();
        let fractions = tracking_error(&model, &frames, self.topk)?;
        let mut csv = String::from("point,mean_error_fraction\n");
        for (i, fraction) in fractions.iter().enumerate() {
            match fraction {
                Some(v) => writeln!(csv, "{i},{v}").expect("string write"),
                None => writeln!(csv, "{i},").expect("string write"),
            }
        }
        write_text(&self.out, &csv)?;
        println!("wrote {} point rows to {}", fractions.len(), self.out.display());
        let scored: Vec<f64> = fractions.iter().flatten().copied().collect();
        if scored.is_empty() {
            println!("no point had enough labels and matches to score");
        } else {
            let mean = scored.iter().sum::<f64>() / scored.len() as f64;
            println!("mean error fraction over {} scored points: {mean}", scored.len());
        }
        Ok(0)
    }
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Seed for the audited model and warp.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

impl GradcheckArgs {
    fn run(self) -> Result<i32, CliError> {
        let report = gradient_integrity(self.seed)?;
        println!("checked {} parameter elements", report.checked);
        println!("within tolerance: {} (fraction {})", report.within, report.fraction_ok());
        if let Some(worst) = &report.worst {
            println!("worst disagreement: {worst}");
        }
        if report.fraction_ok() >= 0.99 {
            println!("PASS gradient check");
            Ok(0)
        } else {
            println!("FAIL gradient check: fraction {} below 0.99", report.fraction_ok());
            Ok(1)
        }
    }
}

#[derive(Debug, Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

impl SelftestArgs {
    fn run(self) -> Result<i32, CliError> {
        let checks: [(&str, fn(u64) -> Result<(), String>); 9] = [
            ("quarter turn keypoint map", check_quarter_turn_keypoints),
            ("quarter turn aligned descriptors", check_quarter_turn_descriptors),
            ("eighth turn descriptor cosine", check_eighth_turn),
            ("orientation loss shift consistency", check_orientation_shift),
            ("dual softmax loop oracle", check_dual_softmax_oracle),
            ("mutual nearest neighbor oracle", check_mnn_oracle),
            ("correspondence bijectivity", check_correspondence_bijectivity),
            ("adam update rules", check_adam_rules),
            ("checkpoint round trip", check_checkpoint_round_trip),
        ];
        let mut failed = 0usize;
        for (name, check) in checks {
            match check(self.seed) {
                Ok(()) => println!("PASS {name}"),
                Err(detail) => {
                    failed += 1;
                    println!("FAIL {name}: {detail}");
                }
            }
        }
        println!("{} passed, {failed} failed", checks.len() - failed);
        Ok(if failed == 0 { 0 } else { 1 })
    }
}

trait ErrStr<T> {
    fn err_str(self) -> Result<T, String>;
}

impl<T, E: std::fmt::Display> ErrStr<T> for Result<T, E> {
    fn err_str(self) -> Result<T, String> {
        self.map_err(|e| e.to_string())
    }
}

/// Smooth multi-wave grayscale pattern in [0, 1]; band-limited enough
/// that bilinear rotation barely distorts it.
fn smooth_pattern(n: usize, phase: u64) -> Vec<f32> {
    let waves = [(1.0, 2.0, 0.3), (2.0, 1.0, 0.8), (3.0, 2.0, 1.7), (1.0, 4.0, 0.2)];
    let mut out = vec![0.0f32; n * n];
    for r in 0..n {
        for c in 0..n {
            let (y, x) = (r as f64 / n as f64, c as f64 / n as f64);
            let mut v = 0.0;
            for (i, &(fy, fx, ph)) in waves.iter().enumerate() {
                let amplitude = 1.0 / (i as f64 + 1.0);
                v += amplitude
                    * (std::f64::consts::TAU * (fy * y + fx * x) + ph + phase as f64).sin();
            }
            out[r * n + c] = (0.5 + 0.22 * v) as f32;
        }
    }
    out
}

/// Counterclockwise lattice quarter turn of a square plane.
fn quarter_turn(plane: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * n];
    for r in 0..n {
        for c in 0..n {
            out[r * n + c] = plane[c * n + (n - 1 - r)];
        }
    }
    out
}

/// Forward a smooth image and its lattice quarter turn through a fresh
/// desk-plan model. Train mode: batch statistics keep the untrained
/// activations centered.
fn quarter_turn_outputs(
    seed: u64,
) -> Result<(RideModel<f32>, crate::model::RideOutput<f32>, crate::model::RideOutput<f32>, usize), String>
{
    let cfg = RideConfig::desk();
    let model = RideModel::<f32>::new(cfg.clone(), seed).err_str()?;
    let n = 56usize;
    let np = n - cfg.crop_total();
    let img = smooth_pattern(n, seed);
    let rot = quarter_turn(&img, n);
    let out_a = model
        .forward(&Tensor::from_vec(&[1, 1, n, n], img).err_str()?, ForwardMode::Train)
        .err_str()?;
    let out_b = model
        .forward(&Tensor::from_vec(&[1, 1, n, n], rot).err_str()?, ForwardMode::Train)
        .err_str()?;
    Ok((model, out_a, out_b, np))
}

/// The keypoint map must rotate with the image, bit-near-exactly: a
/// quarter turn is a lattice permutation, so only parallel-sum float
/// noise separates the two paths.
fn check_quarter_turn_keypoints(seed: u64) -> Result<(), String> {
    let (_, out_a, out_b, np) = quarter_turn_outputs(seed)?;
    let (ka, kb) = (out_a.k.values().data(), out_b.k.values().data());
    let mut worst = 0.0f32;
    for r in 0..np {
        for c in 0..np {
            let expected = ka[c * np + (np - 1 - r)];
            worst = worst.max((kb[r * np + c] - expected).abs());
        }
    }
    if worst < 1e-4 {
        Ok(())
    } else {
        Err(format!("keypoint map deviates by {worst}"))
    }
}

/// Descriptors aligned with the true orientations must agree at
/// corresponding pixels of the quarter-turned pair.
fn check_quarter_turn_descriptors(seed: u64) -> Result<(), String> {
    let (model, out_a, out_b, np) = quarter_turn_outputs(seed)?;
    let quarter = model.group().order() / 4;
    let d_a = invariant_descriptors(&out_a.f_d, &vec![0; np * np]).err_str()?;
    let d_b = invariant_descriptors(&out_b.f_d, &vec![quarter; np * np]).err_str()?;
    let (va, vb) = (d_a.values().data(), d_b.values().data());
    let (dim, pp) = (d_a.dim(), np * np);
    let mut worst = 1.0f32;
    for r in 0..np {
        for c in 0..np {
            let pa = c * np + (np - 1 - r);
            let pb = r * np + c;
            let dot: f32 = (0..dim).map(|i| va[i * pp + pa] * vb[i * pp + pb]).sum();
            worst = worst.min(dot);
        }
    }
    if worst > 0.9999 {
        Ok(())
    } else {
        Err(format!("worst aligned cosine {worst}"))
    }
}

/// 45 degrees is off-lattice, so equivariance is approximate under the
/// bilinear warp: median aligned cosine above 0.98 across the central
/// correspondences of a disk-masked smooth texture.
fn check_eighth_turn(seed: u64) -> Result<(), String> {
    let cfg = RideConfig::toy(8);
    let model = RideModel::<f32>::new(cfg.clone(), seed ^ 0x0c8).err_str()?;
    let n = 64usize;
    let inset = cfg.crop_total() / 2;
    let np = n - cfg.crop_total();
    let mut img = smooth_pattern(n, seed.wrapping_add(9));
    // Mask to a centered disk so the content rotates onto itself.
    let ctr = n as f64 / 2.0;
    for r in 0..n {
        for c in 0..n {
            let d = ((r as f64 + 0.5 - ctr).powi(2) + (c as f64 + 0.5 - ctr).powi(2)).sqrt();
            if d > 28.0 {
                img[r * n + c] = 0.5;
            }
        }
    }
    let gray = GrayImage::new(n, n, img).err_str()?;
    let h = Homography::compose_about_center(45.0, 1.0, 0.0, 0.0, 0.0, 0.0, n, n).err_str()?;
    let rotated = warp_image(&gray, &h).err_str()?;
    let corr = compute_correspondences(&h, (n, n), (n, n), inset, &model.group()).err_str()?;
    if corr.gt_orientation_index != 1 {
        return Err(format!(
            "expected orientation slot 1 for 45 degrees, got {}",
            corr.gt_orientation_index
        ));
    }
    let out_a =
        model.forward(&gray.to_tensor().err_str()?, ForwardMode::Train).err_str()?;
    let out_b =
        model.forward(&rotated.to_tensor().err_str()?, ForwardMode::Train).err_str()?;
    let d_a = invariant_descriptors(&out_a.f_d, &vec![0; np * np]).err_str()?;
    let d_b = invariant_descriptors(&out_b.f_d, &vec![1; np * np]).err_str()?;
    let (va, vb) = (d_a.values().data(), d_b.values().data());
    let (dim, pp) = (d_a.dim(), np * np);
    let center = (np as f64 - 1.0) / 2.0;
    let mut cosines: Vec<f32> = corr
        .pairs
        .iter()
        .filter(|&&(pa, _)| {
            let (r, c) = ((pa / np) as f64, (pa % np) as f64);
            (r - center).abs() <= np as f64 / 4.0 && (c - center).abs() <= np as f64 / 4.0
        })
        .map(|&(pa, pb)| (0..dim).map(|i| va[i * pp + pa] * vb[i * pp + pb]).sum())
        .collect();
    if cosines.len() < 50 {
        return Err(format!("only {} central correspondences", cosines.len()));
    }
    cosines.sort_by(f32::total_cmp);
    let median = cosines[cosines.len() / 2];
    if median > 0.98 {
        Ok(())
    } else {
        Err(format!("median aligned cosine {median}"))
    }
}

/// Shifting B's raw histogram and the label together must not move the
/// loss at all: the permutations compose away before any float math.
fn check_orientation_shift(seed: u64) -> Result<(), String> {
    let (g, h, w) = (8usize, 3usize, 2usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0421);
    let mut uniform =
        |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect() };
    let v_a = OrientationHistogram::new(
        Tensor::from_vec(&[1, g, h, w], uniform(g * h * w)).err_str()?,
        false,
    )
    .err_str()?;
    let raw_b = Tensor::from_vec(&[1, g, h, w], uniform(g * h * w)).err_str()?;
    let corr_at = |orientation: usize| CorrespondenceSet {
        pairs: vec![(0, 1), (2, 4), (5, 3)],
        gt_orientation_index: orientation,
        homography: Homography::identity(),
    };
    let plain = orientation_loss(
        &v_a,
        &OrientationHistogram::new(raw_b.clone(), false).err_str()?,
        &corr_at(1),
    )
    .err_str()?
    .item();
    let shifted = cyclic_shift(&raw_b, 1, ShiftOffsets::Scalar(3)).err_str()?;
    let moved = orientation_loss(
        &v_a,
        &OrientationHistogram::new(shifted, false).err_str()?,
        &corr_at(4),
    )
    .err_str()?
    .item();
    if plain == moved {
        Ok(())
    } else {
        Err(format!("losses differ: {plain} vs {moved}"))
    }
}

/// Dual-softmax probabilities against a plain nested-loop softmax.
fn check_dual_softmax_oracle(seed: u64) -> Result<(), String> {
    let (n_a, n_b) = (5usize, 7usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0522);
    let scores: Vec<f64> = (0..n_a * n_b).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let temperature = 0.1;
    let got = dual_softmax(
        &ScoreMatrix::new(Tensor::from_vec(&[n_a, n_b], scores.clone()).err_str()?, temperature)
            .err_str()?,
    )
    .err_str()?;
    let got = got.data();
    let softmax = |values: Vec<f64>| -> Vec<f64> {
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = values.iter().map(|v| ((v - max) / temperature).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|e| e / sum).collect()
    };
    let mut worst = 0.0f64;
    for i in 0..n_a {
        let row = softmax((0..n_b).map(|j| scores[i * n_b + j]).collect());
        for j in 0..n_b {
            let col = softmax((0..n_a).map(|k| scores[k * n_b + j]).collect());
            let want = row[j] * col[i];
            worst = worst.max((got[i * n_b + j] - want).abs());
        }
    }
    if worst <= 1e-6 {
        Ok(())
    } else {
        Err(format!("max deviation {worst}"))
    }
}

/// Unit-norm random descriptor set with placeholder geometry.
fn random_extraction(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> Extraction<f32> {
    let mut columns = vec![0.0f32; dim * n];
    for j in 0..n {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
        for (d, x) in v.iter().enumerate() {
            columns[d * n + j] = x / norm;
        }
    }
    Extraction {
        positions: (0..n).map(|i| (i as f64 + 0.5, 2.0 * i as f64 + 0.5)).collect(),
        scores: vec![1.0; n],
        dim,
        descriptors: columns,
    }
}

/// Mutual nearest neighbors against nested-loop argmaxes, plus the
/// symmetry of swapping the two sides.
fn check_mnn_oracle(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0623);
    let a = random_extraction(&mut rng, 4, 6);
    let b = random_extraction(&mut rng, 4, 8);
    let got = match_mnn(&a, &b).err_str()?;

    let dot = |i: usize, j: usize| -> f64 {
        (0..4).map(|d| a.descriptors[d * 6 + i] as f64 * b.descriptors[d * 8 + j] as f64).sum()
    };
    let best_b: Vec<usize> =
        (0..6).map(|i| (0..8).max_by(|&x, &y| dot(i, x).total_cmp(&dot(i, y))).unwrap()).collect();
    let best_a: Vec<usize> =
        (0..8).map(|j| (0..6).max_by(|&x, &y| dot(x, j).total_cmp(&dot(y, j))).unwrap()).collect();
    let want: Vec<(usize, usize)> =
        (0..6).filter(|&i| best_a[best_b[i]] == i).map(|i| (i, best_b[i])).collect();

    let got_pairs: Vec<(usize, usize)> = got.matches.iter().map(|&(i, j, _)| (i, j)).collect();
    if got_pairs != want {
        return Err(format!("pairs {got_pairs:?}, oracle wants {want:?}"));
    }
    for &(i, j, score) in &got.matches {
        if (score - dot(i, j)).abs() > 1e-5 {
            return Err(format!("score at ({i}, {j}) off by {}", (score - dot(i, j)).abs()));
        }
    }

    let swapped = match_mnn(&b, &a).err_str()?;
    let mut mirrored: Vec<(usize, usize)> =
        swapped.matches.iter().map(|&(j, i, _)| (i, j)).collect();
    mirrored.sort_unstable();
    if mirrored != want {
        return Err(format!("swap asymmetry: {mirrored:?} vs {want:?}"));
    }
    Ok(())
}

/// Production correspondences must be bijective and in bounds.
fn check_correspondence_bijectivity(seed: u64) -> Result<(), String> {
    let cfg = RideConfig::toy(8);
    let group = CyclicGroup::new(8).err_str()?;
    let image = synth_corpus(seed ^ 0x0723, 1, 64).pop().expect("one image requested");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0724);
    let np = 64 - cfg.crop_total();
    for _ in 0..8 {
        let pair = training_pair(
            &image,
            &mut rng,
            &HomographySpec::full_rotation(),
            &PhotometricSpec::none(),
            &group,
            cfg.crop_total() / 2,
        )
        .err_str()?;
        if pair.correspondences.pairs.is_empty() {
            continue;
        }
        let pairs = &pair.correspondences.pairs;
        let mut seen_a = vec![false; np * np];
        let mut seen_b = vec![false; np * np];
        for &(pa, pb) in pairs {
            if pa >= np * np || pb >= np * np {
                return Err(format!("pair ({pa}, {pb}) outside the {np}x{np} grid"));
            }
            if seen_a[pa] || seen_b[pb] {
                return Err(format!("pixel repeated in pair ({pa}, {pb})"));
            }
            seen_a[pa] = true;
            seen_b[pb] = true;
        }
        return Ok(());
    }
    Err("eight straight draws produced no correspondences".to_string())
}

/// A zero gradient must not move the weights, and the first step on any
/// nonzero gradient has the learning rate's magnitude.
fn check_adam_rules(_seed: u64) -> Result<(), String> {
    let w = Tensor::<f64>::param(&[3], vec![0.4, -1.2, 7.0]).err_str()?;
    let weights = vec![w.clone()];
    let mut state = AdamState::for_parameters(&weights);
    adam_step(&weights, &[vec![0.0; 3]], &mut state, 1e-2, (0.9, 0.999), ADAM_EPS).err_str()?;
    if *w.data() != vec![0.4, -1.2, 7.0] {
        return Err("zero gradient moved the weights".to_string());
    }

    let learning_rate = 1e-3;
    for gradient in [0.7, -3.0, 1e4] {
        let w = Tensor::<f64>::param(&[1], vec![0.0]).err_str()?;
        let weights = vec![w.clone()];
        let mut state = AdamState::for_parameters(&weights);
        adam_step(&weights, &[vec![gradient]], &mut state, learning_rate, (0.9, 0.999), ADAM_EPS)
            .err_str()?;
        let moved = w.data()[0].abs();
        if (moved - learning_rate).abs() > 1e-6 {
            return Err(format!("first step on gradient {gradient} moved {moved}"));
        }
        if w.data()[0].signum() == gradient.signum() {
            return Err(format!("step on gradient {gradient} went uphill"));
        }
    }
    Ok(())
}

/// Save, reload and compare an inference forward bit for bit.
fn check_checkpoint_round_trip(seed: u64) -> Result<(), String> {
    let path = std::env::temp_dir()
        .join(format!("ride-selftest-{seed}-{}.ckpt", std::process::id()));
    let model = RideModel::<f32>::new(RideConfig::toy(4), seed).err_str()?;
    let image = Tensor::from_vec(&[1, 1, 30, 30], smooth_pattern(30, seed)).err_str()?;
    // one train-mode pass makes the running statistics non-trivial
    model.forward(&image, ForwardMode::Train).err_str()?;
    let before = model.forward(&image, ForwardMode::Eval).err_str()?;
    model.save(&path, 7).err_str()?;
    let loaded = RideModel::<f32>::load(&path);
    let _ = std::fs::remove_file(&path);
    let (loaded, iteration) = loaded.err_str()?;
    if iteration != 7 {
        return Err(format!("iteration 7 came back as {iteration}"));
    }
    let after = loaded.forward(&image, ForwardMode::Eval).err_str()?;
    if before.k.values().data().as_slice() != after.k.values().data().as_slice() {
        return Err("keypoint scores changed across the round trip".to_string());
    }
    if before.f_d.values().data().as_slice() != after.f_d.values().data().as_slice() {
        return Err("descriptor features changed across the round trip".to_string());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_cli(args: &[&str]) -> i32 {
        run(std::iter::once("ride").chain(args.iter().copied()))
    }

    #[test]
    fn help_and_version_exit_zero() {
        assert_eq!(run_cli(&["--help"]), 0);
        assert_eq!(run_cli(&["--version"]), 0);
        assert_eq!(run_cli(&["describe", "--help"]), 0);
    }

    #[test]
    fn bad_flags_exit_one() {
        assert_eq!(run_cli(&[]), 1);
        assert_eq!(run_cli(&["no-such-command"]), 1);
        assert_eq!(run_cli(&["describe", "--image"]), 1);
        assert_eq!(run_cli(&["gen-corpus", "--out", "/tmp/x", "--count", "minus"]), 1);
    }

    #[test]
    fn missing_input_file_exits_two() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("dump.rt");
        let code = run_cli(&[
            "describe",
            "--image",
            dir.path().join("absent.pgm").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn corpus_describe_match_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        assert_eq!(
            run_cli(&[
                "gen-corpus",
                "--out",
                corpus.to_str().unwrap(),
                "--count",
                "2",
                "--size",
                "72",
                "--seed",
                "5",
            ]),
            0
        );
        let names: Vec<String> = std::fs::read_dir(&corpus)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names.len(), 2);
        assert!(names.contains(&"tex00.pgm".to_string()));

        let dump_a = dir.path().join("a.rt");
        let dump_b = dir.path().join("b.rt");
        for (name, dump) in [("tex00.pgm", &dump_a), ("tex01.pgm", &dump_b)] {
            assert_eq!(
                run_cli(&[
                    "describe",
                    "--image",
                    corpus.join(name).to_str().unwrap(),
                    "--out",
                    dump.to_str().unwrap(),
                    "--topk",
                    "50",
                ]),
                0
            );
        }
        let ex = read_extraction(&dump_a).unwrap();
        assert_eq!(ex.positions.len(), 50);
        assert_eq!(ex.dim, RideConfig::desk().descriptor_dim());

        let matches = dir.path().join("matches.csv");
        assert_eq!(
            run_cli(&[
                "match",
                "--desc-a",
                dump_a.to_str().unwrap(),
                "--desc-b",
                dump_b.to_str().unwrap(),
                "--out",
                matches.to_str().unwrap(),
            ]),
            0
        );
        let text = std::fs::read_to_string(&matches).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("index_a,index_b,row_a,col_a,row_b,col_b,score"));
        for line in lines {
            assert_eq!(line.split(',').count(), 7);
        }
    }

    #[test]
    fn describe_honors_the_keypoint_budget() {
        let dir = tempfile::tempdir().unwrap();
        let image = dir.path().join("img.pgm");
        GrayImage::new(72, 72, smooth_pattern(72, 3)).unwrap().save(&image).unwrap();
        let dump = dir.path().join("dump.rt");
        assert_eq!(
            run_cli(&[
                "describe",
                "--image",
                image.to_str().unwrap(),
                "--out",
                dump.to_str().unwrap(),
                "--topk",
                "10000",
            ]),
            0
        );
        // 72 - 36 leaves a 36x36 grid: 1296 pixels, all emitted.
        let ex = read_extraction(&dump).unwrap();
        assert_eq!(ex.positions.len(), 1296);
        assert_eq!(run_cli(&["describe", "--image", image.to_str().unwrap(), "--out", dump.to_str().unwrap(), "--topk", "0"]), 1);
    }

    #[test]
    fn pair_lines_parse_and_reject() {
        let specs = parse_pairs(
            "# comment\n\na.pgm b.pgm 100 100 36 36\n\
             a.pgm c.pgm 100 100 36 36 1 0 0 0 1 0 0 0 1 0.5 0 0.2\n",
        )
        .unwrap();
        assert_eq!(specs.len(), 2);
        assert!(specs[0].truth.is_none());
        let (r, t) = specs[1].truth.as_ref().unwrap();
        assert_eq!(r[(0, 0)], 1.0);
        assert_eq!(t[0], 0.5);

        assert!(parse_pairs("a.pgm b.pgm 100 100\n").is_err());
        assert!(parse_pairs("a.pgm b.pgm 100 100 36 bad\n").is_err());
        assert!(parse_pairs("\n# nothing\n").is_err());
    }

    #[test]
    fn label_rows_parse_and_reject() {
        let labels = parse_labels("frame,point,row,col\n0,0,1.5,2\n0,1,3,4\n2,0,5,6\n", 3).unwrap();
        assert_eq!(labels.len(), 3);
        assert_eq!(labels[0], vec![Some((1.5, 2.0)), Some((3.0, 4.0))]);
        assert_eq!(labels[1], vec![None, None]);
        assert_eq!(labels[2], vec![Some((5.0, 6.0)), None]);

        assert!(parse_labels("0,0,1\n", 2).is_err());
        assert!(parse_labels("9,0,1,2\n", 2).is_err());
        assert!(parse_labels("0,0,1,2\n0,0,3,4\n", 2).is_err());
        assert!(parse_labels("frame,point,row,col\n", 2).is_err());
    }

    #[test]
    fn extraction_dump_rejections_name_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rt");
        container::save(
            &path,
            &[
                NamedTensor::new("keypoints", vec![2, 2], vec![0.0; 4]),
                NamedTensor::new("scores", vec![3], vec![0.0; 3]),
                NamedTensor::new("descriptors", vec![4, 2], vec![0.0; 8]),
            ],
        )
        .unwrap();
        let err = read_extraction(&path).unwrap_err().to_string();
        assert!(err.contains("scores"), "{err}");

        container::save(&path, &[NamedTensor::new("keypoints", vec![2, 2], vec![0.0; 4])])
            .unwrap();
        let err = read_extraction(&path).unwrap_err().to_string();
        assert!(err.contains("missing tensor"), "{err}");
    }

    #[test]
    fn selftest_checks_pass_individually() {
        check_quarter_turn_keypoints(7).unwrap();
        check_quarter_turn_descriptors(7).unwrap();
        check_orientation_shift(7).unwrap();
        check_dual_softmax_oracle(7).unwrap();
        check_mnn_oracle(7).unwrap();
        check_correspondence_bijectivity(7).unwrap();
        check_adam_rules(7).unwrap();
        check_checkpoint_round_trip(7).unwrap();
    }

    #[test]
    fn eighth_turn_check_passes() {
        check_eighth_turn(7).unwrap();
    }

    #[test]
    fn eval_rotation_writes_thirty_six_rows_per_image() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images");
        std::fs::create_dir(&images).unwrap();
        GrayImage::new(72, 72, smooth_pattern(72, 1))
            .unwrap()
            .save(images.join("one.pgm"))
            .unwrap();
        let out = dir.path().join("sweep.csv");
        assert_eq!(
            run_cli(&[
                "eval-rotation",
                "--images",
                images.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--plan",
                "desk",
                "--topk",
                "64",
            ]),
            0
        );
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().count(), 1 + 36);
        assert!(text.starts_with("image,angle_degrees,mma3,mma5,mma10\n"));
    }
}
