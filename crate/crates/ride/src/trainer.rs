//! The optimization loop.
//!
//! Plain bias-corrected ADAM over self-supervised warp pairs: each
//! iteration draws `batch_size` random crop/homography pairs, runs both
//! views through the network, backpropagates the combined objective and
//! takes one optimizer step on the accumulated gradients. Every
//! `validation_interval` iterations the current weights are scored by
//! matching accuracy on a fixed held-out set of warped synthetic
//! textures, and the best-scoring weights are the ones the run returns.
//!
//! There is no learning-rate schedule, weight decay or gradient
//! clipping. All randomness flows from one seeded generator, so a rerun
//! with the same seed reproduces the loss log bit for bit.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::losses::{total_loss, LossError};
use crate::matcheval::{extract, match_mnn, mma, MatchEvalError};
use crate::model::{ModelError, RideConfig, RideModel};
use crate::model::ForwardMode;
use crate::selfsup::{
    sample_homography, synth_corpus, training_pair, warp_image, CorrespondenceSet, GrayImage,
    Homography, HomographySpec, PhotometricSpec, SelfSupError,
};
use crate::tensor::check::{gradient_report, GradCheck, GradReport};
use crate::tensor::{Scalar, Tensor, TensorError};

pub const ADAM_EPS: f64 = 1e-8;

/// Ground-truth pairs fed to the objective per image pair; a random
/// subset keeps the dual-softmax matrix bounded at any crop size.
const PAIR_CAP: usize = 1024;

/// Validation pairs held out from training, and keypoints per image
/// when scoring them.
const VAL_PAIRS: usize = 8;
const VAL_TOP_K: usize = 512;

/// Seed salts separating the validation streams from the training one.
const VAL_IMAGE_SALT: u64 = 0x5eed_0001;
const VAL_WARP_SALT: u64 = 0x5eed_0002;

/// Empty-correspondence draws tolerated per requested pair before the
/// run gives up.
const SKIP_LIMIT: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    SelfSup(#[from] SelfSupError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    MatchEval(#[from] MatchEvalError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn contract(msg: impl Into<String>) -> TrainError {
    TrainError::Contract(msg.into())
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Image pairs accumulated into each optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    /// Weight of the orientation term in the total objective.
    pub lambda_o: f64,
    /// Dual-softmax temperature of the description term.
    pub train_temperature: f64,
    /// Side length of the square crop drawn from each corpus image.
    pub crop: usize,
    pub seed: u64,
    /// Iterations between held-out matching evaluations.
    pub validation_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 100_000,
            batch_size: 2,
            learning_rate: 1e-4,
            betas: (0.9, 0.999),
            lambda_o: 10.0,
            train_temperature: 1.0 / 20.0,
            crop: 182,
            seed: 0,
            validation_interval: 200,
        }
    }
}

impl TrainConfig {
    /// CPU-sized run: 2000 iterations on 112-pixel crops. The smaller
    /// crop keeps a full run under two hours on one core.
    pub fn desk() -> Self {
        TrainConfig { iterations: 2000, crop: 112, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.iterations == 0 {
            return Err(contract("iterations must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(contract("batch size must be at least 1"));
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("train_temperature", self.train_temperature)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(contract(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda_o >= 0.0) || !self.lambda_o.is_finite() {
            return Err(contract(format!("lambda_o must be non-negative, got {}", self.lambda_o)));
        }
        for (name, b) in [("beta1", self.betas.0), ("beta2", self.betas.1)] {
            if !(0.0..1.0).contains(&b) {
                return Err(contract(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.validation_interval == 0 {
            return Err(contract("validation interval must be at least 1"));
        }
        if self.crop == 0 {
            return Err(contract("crop must be positive"));
        }
        Ok(())
    }
}

/// Parses `key = value` lines; `#` starts a comment and blank lines are
/// skipped. Unknown and repeated keys are errors.
pub fn parse_train_config(text: &str) -> Result<TrainConfig, TrainError> {
    let mut config = TrainConfig::default();
    let mut seen: Vec<String> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(contract(format!("line {}: expected key = value, got {raw:?}", lineno + 1)));
        };
        let key = key.trim();
        let value = value.trim();
        if seen.iter().any(|k| k == key) {
            return Err(contract(format!("line {}: repeated key {key:?}", lineno + 1)));
        }
        seen.push(key.to_string());
        let bad = |what: &str| contract(format!("line {}: {key} wants {what}, got {value:?}", lineno + 1));
        match key {
            "iterations" => config.iterations = value.parse().map_err(|_| bad("an integer"))?,
            "batch_size" => config.batch_size = value.parse().map_err(|_| bad("an integer"))?,
            "learning_rate" => config.learning_rate = value.parse().map_err(|_| bad("a number"))?,
            "beta1" => config.betas.0 = value.parse().map_err(|_| bad("a number"))?,
            "beta2" => config.betas.1 = value.parse().map_err(|_| bad("a number"))?,
            "lambda_o" => config.lambda_o = value.parse().map_err(|_| bad("a number"))?,
            "train_temperature" => {
                config.train_temperature = value.parse().map_err(|_| bad("a number"))?
            }
            "crop" => config.crop = value.parse().map_err(|_| bad("an integer"))?,
            "seed" => config.seed = value.parse().map_err(|_| bad("an integer"))?,
            "validation_interval" => {
                config.validation_interval = value.parse().map_err(|_| bad("an integer"))?
            }
            _ => return Err(contract(format!("line {}: unknown key {key:?}", lineno + 1))),
        }
    }
    config.validate()?;
    Ok(config)
}

/// Inverse of [`parse_train_config`].
pub fn train_config_text(config: &TrainConfig) -> String {
    format!(
        "iterations = {}\nbatch_size = {}\nlearning_rate = {}\nbeta1 = {}\nbeta2 = {}\n\
         lambda_o = {}\ntrain_temperature = {}\ncrop = {}\nseed = {}\nvalidation_interval = {}\n",
        config.iterations,
        config.batch_size,
        config.learning_rate,
        config.betas.0,
        config.betas.1,
        config.lambda_o,
        config.train_temperature,
        config.crop,
        config.seed,
        config.validation_interval,
    )
}

/// First and second gradient moments, one pair per parameter tensor.
/// Moments are kept in f64 regardless of the weight dtype.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_parameters<F: Scalar>(params: &[Tensor<F>]) -> Self {
        Self::new(&params.iter().map(|t| t.numel()).collect::<Vec<_>>())
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected ADAM update, in place on the weight tensors.
pub fn adam_step<F: Scalar>(
    weights: &[Tensor<F>],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    learning_rate: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<(), TrainError> {
    if !(learning_rate > 0.0) || !(eps > 0.0) {
        return Err(contract(format!(
            "learning rate and eps must be positive, got {learning_rate} and {eps}"
        )));
    }
    let (b1, b2) = betas;
    if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
        return Err(contract(format!("betas must lie in [0, 1), got ({b1}, {b2})")));
    }
    if weights.len() != grads.len() || weights.len() != state.m.len() {
        return Err(contract(format!(
            "adam_step wants matching counts, got {} weights, {} grads, {} moments",
            weights.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (w, g)) in weights.iter().zip(grads).enumerate() {
        if w.numel() != g.len() || state.m[i].len() != g.len() {
            return Err(contract(format!(
                "adam_step parameter {i} wants {} values, got {} gradients and {} moments",
                w.numel(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (i, (w, g)) in weights.iter().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let mut data = w.data_mut();
        for (j, &gj) in g.iter().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let update = learning_rate * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
            data[j] = F::from_f64(data[j].to_f64() - update);
        }
    }
    Ok(())
}

/// One row of the metric log; `val_mma` is present on validation
/// iterations only.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    pub l_o: f64,
    pub l_d: f64,
    pub l_k: f64,
    pub total: f64,
    pub val_mma: Option<f64>,
}

/// Renders the log as CSV with an `iteration,l_o,l_d,l_k,total,val_mma`
/// header; the last column is empty outside validation iterations.
pub fn metrics_csv(log: &[TrainRecord]) -> String {
    let mut out = String::from("iteration,l_o,l_d,l_k,total,val_mma\n");
    for r in log {
        let val = r.val_mma.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration, r.l_o, r.l_d, r.l_k, r.total, val
        ));
    }
    out
}

/// What a run produced. `model` carries the best-validation weights
/// when any validation ran, otherwise the final ones.
pub struct TrainOutcome<F: Scalar> {
    pub model: RideModel<F>,
    pub log: Vec<TrainRecord>,
    pub best_iteration: Option<usize>,
    pub best_val_mma: Option<f64>,
    /// Iteration numbers of discarded empty-correspondence draws, one
    /// entry per draw.
    pub skipped_pairs: Vec<usize>,
}

struct ValPair {
    image_a: GrayImage,
    image_b: GrayImage,
    homography: Homography,
}

/// Held-out warped pairs, fixed for the whole run: fresh textures from
/// a salted seed, one unrestricted-rotation homography each, no
/// photometric jitter.
fn validation_set(seed: u64, size: usize) -> Result<Vec<ValPair>, TrainError> {
    let images = synth_corpus(seed ^ VAL_IMAGE_SALT, VAL_PAIRS, size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ VAL_WARP_SALT);
    let spec = HomographySpec::full_rotation();
    images
        .into_iter()
        .map(|image_a| {
            let homography = sample_homography(&mut rng, &spec, size, size)?;
            let image_b = warp_image(&image_a, &homography)?;
            Ok(ValPair { image_a, image_b, homography })
        })
        .collect()
}

/// Mean matching accuracy at 3 px over the validation pairs, using
/// mutual-nearest-neighbor matching on the current weights.
fn validation_mma<F: Scalar>(
    model: &RideModel<F>,
    set: &[ValPair],
) -> Result<f64, TrainError> {
    let mut acc = 0.0;
    for pair in set {
        let ext_a = extract(model, &pair.image_a, VAL_TOP_K)?;
        let ext_b = extract(model, &pair.image_b, VAL_TOP_K)?;
        let matches = match_mnn(&ext_a, &ext_b)?;
        acc += mma(&matches, &pair.homography, &[3.0])[0];
    }
    Ok(acc / set.len() as f64)
}

fn crop_image(
    image: &GrayImage,
    r0: usize,
    c0: usize,
    size: usize,
) -> Result<GrayImage, TrainError> {
    let mut data = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            data.push(image.get(r0 + r, c0 + c));
        }
    }
    Ok(GrayImage::new(size, size, data)?)
}

/// Uniform subset of at most [`PAIR_CAP`] ground-truth pairs, kept in
/// their original order.
fn cap_pairs(corr: &CorrespondenceSet, rng: &mut ChaCha8Rng) -> CorrespondenceSet {
    if corr.pairs.len() <= PAIR_CAP {
        return corr.clone();
    }
    let mut idx = rand::seq::index::sample(rng, corr.pairs.len(), PAIR_CAP).into_vec();
    idx.sort_unstable();
    let mut capped = corr.clone();
    capped.pairs = idx.into_iter().map(|i| corr.pairs[i]).collect();
    capped
}

/// Runs the loop and returns the log plus the selected weights. With an
/// output directory it also writes `best.ckpt` (updated whenever the
/// validation score improves), `final.ckpt` and `metrics.csv`.
pub fn train<F: Scalar>(
    corpus: &[GrayImage],
    plan: &RideConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<F>, TrainError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(contract("corpus must be non-empty"));
    }
    let model = RideModel::<F>::new(plan.clone(), config.seed)?;
    if config.crop <= plan.crop_total() {
        return Err(contract(format!(
            "crop {} leaves no output pixels after the {}-pixel convolution shrink",
            config.crop,
            plan.crop_total()
        )));
    }
    for (i, image) in corpus.iter().enumerate() {
        if image.height() < config.crop || image.width() < config.crop {
            return Err(contract(format!(
                "corpus image {i} is {}x{}, smaller than the {} crop",
                image.height(),
                image.width(),
                config.crop
            )));
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let params: Vec<Tensor<F>> = model.parameters().into_iter().map(|(_, t)| t).collect();
    let mut state = AdamState::for_parameters(&params);
    let val_set = validation_set(config.seed, config.crop)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let warp_spec = HomographySpec::full_rotation();
    let photo_spec = PhotometricSpec::default();
    let group = model.group();

    let mut log = Vec::with_capacity(config.iterations);
    let mut skipped = Vec::new();
    let mut best: Option<(usize, f64, Vec<Vec<F>>)> = None;

    for iteration in 1..=config.iterations {
        for p in &params {
            p.zero_grad();
        }
        let mut sums = [0.0f64; 4];
        let mut pairs_done = 0;
        let mut attempts = 0;
        while pairs_done < config.batch_size {
            attempts += 1;
            if attempts > config.batch_size * SKIP_LIMIT {
                return Err(contract(format!(
                    "iteration {iteration}: {attempts} draws produced only empty correspondence sets"
                )));
            }
            let image = &corpus[rng.gen_range(0..corpus.len())];
            let r0 = rng.gen_range(0..=image.height() - config.crop);
            let c0 = rng.gen_range(0..=image.width() - config.crop);
            let cropped = crop_image(image, r0, c0, config.crop)?;
            // Output grids sit half the convolution shrink inside each
            // image edge.
            let inset = plan.crop_total() / 2;
            let pair =
                training_pair(&cropped, &mut rng, &warp_spec, &photo_spec, &group, inset)?;
            if pair.correspondences.pairs.is_empty() {
                skipped.push(iteration);
                continue;
            }
            let corr = cap_pairs(&pair.correspondences, &mut rng);
            let out_a = model.forward(&pair.image_a.to_tensor()?, ForwardMode::Train)?;
            let out_b = model.forward(&pair.image_b.to_tensor()?, ForwardMode::Train)?;
            let loss =
                total_loss(&out_a, &out_b, &corr, config.lambda_o, config.train_temperature)?;
            let parts = [
                loss.l_orientation.item().to_f64(),
                loss.l_description.item().to_f64(),
                loss.l_keypoint.item().to_f64(),
                loss.total.item().to_f64(),
            ];
            if parts.iter().any(|v| !v.is_finite()) {
                return Err(contract(format!(
                    "iteration {iteration}: non-finite loss {parts:?}"
                )));
            }
            loss.total.backward()?;
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p;
            }
            pairs_done += 1;
        }

        let scale = 1.0 / config.batch_size as f64;
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|p| match p.grad() {
                Some(g) => g.iter().map(|&v| v.to_f64() * scale).collect(),
                None => vec![0.0; p.numel()],
            })
            .collect();
        adam_step(&params, &grads, &mut state, config.learning_rate, config.betas, ADAM_EPS)?;

        let val_mma = if iteration % config.validation_interval == 0
            || iteration == config.iterations
        {
            let score = validation_mma(&model, &val_set)?;
            let improved = best.as_ref().map_or(true, |(_, b, _)| score > *b);
            if improved {
                best = Some((iteration, score, model.state()));
                if let Some(dir) = out_dir {
                    model.save(&dir.join("best.ckpt"), iteration as u64)?;
                }
            }
            Some(score)
        } else {
            None
        };

        log.push(TrainRecord {
            iteration,
            l_o: sums[0] * scale,
            l_d: sums[1] * scale,
            l_k: sums[2] * scale,
            total: sums[3] * scale,
            val_mma,
        });
    }

    if let Some(dir) = out_dir {
        model.save(&dir.join("final.ckpt"), config.iterations as u64)?;
        std::fs::write(dir.join("metrics.csv"), metrics_csv(&log))?;
    }
    let (best_iteration, best_val_mma) = match &best {
        Some((iter, score, snapshot)) => {
            model.set_state(snapshot)?;
            (Some(*iter), Some(*score))
        }
        None => (None, None),
    };
    Ok(TrainOutcome { model, log, best_iteration, best_val_mma, skipped_pairs: skipped })
}

/// Finite-difference audit of the full training gradient: every
/// parameter of a fresh 64-bit |G|=4 toy model is perturbed around one
/// real warp pair and compared against the analytic backward pass.
/// Small by design (46-pixel image, capped correspondences) so an
/// exhaustive sweep stays in CPU-minutes territory.
pub fn gradient_integrity(seed: u64) -> Result<GradReport, TrainError> {
    let plan = RideConfig::toy(4);
    let model = RideModel::<f64>::new(plan.clone(), seed)?;
    let image = synth_corpus(seed, 1, 46).pop().expect("one image requested");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // The default warp range almost never empties the correspondence
    // grid at this size; retry the rare draw that does.
    let pair = loop {
        let candidate = training_pair(
            &image,
            &mut rng,
            &HomographySpec::default(),
            &PhotometricSpec::default(),
            &model.group(),
            plan.crop_total() / 2,
        )?;
        if !candidate.correspondences.pairs.is_empty() {
            break candidate;
        }
    };
    let mut corr = pair.correspondences;
    thin_pairs(&mut corr, 64);
    let t_a = pair.image_a.to_tensor::<f64>()?;
    let t_b = pair.image_b.to_tensor::<f64>()?;
    let defaults = TrainConfig::default();
    let params: Vec<Tensor<f64>> = model.parameters().into_iter().map(|(_, t)| t).collect();
    let loss_fn = || {
        let out_a = model.forward(&t_a, ForwardMode::Train).expect("forward A");
        let out_b = model.forward(&t_b, ForwardMode::Train).expect("forward B");
        total_loss(&out_a, &out_b, &corr, defaults.lambda_o, defaults.train_temperature)
            .expect("loss")
            .total
    };
    Ok(gradient_report(&params, loss_fn, GradCheck::default()))
}

/// Evenly spaced subset of at most `cap` pairs, in place.
fn thin_pairs(corr: &mut CorrespondenceSet, cap: usize) {
    if corr.pairs.len() > cap {
        let step = corr.pairs.len() as f64 / cap as f64;
        corr.pairs = (0..cap).map(|i| corr.pairs[(i as f64 * step) as usize]).collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ForwardMode;

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let w = Tensor::<f64>::param(&[3], vec![0.4, -1.2, 7.0]).unwrap();
        let weights = vec![w.clone()];
        let mut state = AdamState::for_parameters(&weights);
        adam_step(&weights, &[vec![0.0; 3]], &mut state, 1e-2, (0.9, 0.999), ADAM_EPS).unwrap();
        assert_eq!(*w.data(), vec![0.4, -1.2, 7.0]);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_the_learning_rate() {
        for &g in &[0.7, -3.0, 1e4] {
            let w = Tensor::<f64>::param(&[1], vec![0.0]).unwrap();
            let weights = vec![w.clone()];
            let mut state = AdamState::for_parameters(&weights);
            adam_step(&weights, &[vec![g]], &mut state, 1e-3, (0.9, 0.999), ADAM_EPS).unwrap();
            let step = w.data()[0].abs();
            assert!((step - 1e-3).abs() < 1e-6, "gradient {g} moved by {step}");
            assert_eq!(w.data()[0].signum(), -g.signum());
        }
    }

    #[test]
    fn adam_descends_a_quadratic_bowl() {
        let target = [1.5, -2.0, 0.75, 3.0];
        let w = Tensor::<f64>::param(&[4], vec![0.0; 4]).unwrap();
        let weights = vec![w.clone()];
        let mut state = AdamState::for_parameters(&weights);
        let loss_of = |data: &[f64]| -> f64 {
            data.iter().zip(&target).map(|(v, t)| 0.5 * (v - t) * (v - t)).sum()
        };
        let mut losses = Vec::new();
        for _ in 0..100 {
            let grad: Vec<f64> = w.data().iter().zip(&target).map(|(v, t)| v - t).collect();
            adam_step(&weights, &[grad], &mut state, 5e-3, (0.9, 0.999), ADAM_EPS).unwrap();
            losses.push(loss_of(&w.data()));
        }
        for i in 5..losses.len() {
            assert!(losses[i] < losses[i - 1], "loss rose at step {i}: {losses:?}");
        }
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let w = Tensor::<f64>::param(&[2], vec![0.0; 2]).unwrap();
        let weights = vec![w];
        let mut state = AdamState::for_parameters(&weights);
        let err = adam_step(&weights, &[vec![0.0; 3]], &mut state, 1e-3, (0.9, 0.999), ADAM_EPS);
        assert!(matches!(err, Err(TrainError::Contract(_))));
        let err = adam_step(&weights, &[], &mut state, 1e-3, (0.9, 0.999), ADAM_EPS);
        assert!(matches!(err, Err(TrainError::Contract(_))));
    }

    #[test]
    fn default_config_matches_the_contract() {
        let c = TrainConfig::default();
        assert_eq!(c.iterations, 100_000);
        assert_eq!(c.batch_size, 2);
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.betas, (0.9, 0.999));
        assert_eq!(c.lambda_o, 10.0);
        assert_eq!(c.train_temperature, 0.05);
        assert_eq!(c.crop, 182);
        assert_eq!(TrainConfig::desk().iterations, 2000);
        c.validate().unwrap();
        TrainConfig::desk().validate().unwrap();
    }

    #[test]
    fn config_text_round_trips() {
        let mut c = TrainConfig::desk();
        c.seed = 42;
        c.learning_rate = 3e-4;
        let parsed = parse_train_config(&train_config_text(&c)).unwrap();
        assert_eq!(parsed, c);
    }

    #[test]
    fn config_parser_rejects_bad_input() {
        assert!(matches!(
            parse_train_config("unknown_key = 3"),
            Err(TrainError::Contract(_))
        ));
        assert!(matches!(
            parse_train_config("iterations = ten"),
            Err(TrainError::Contract(_))
        ));
        assert!(matches!(
            parse_train_config("seed = 1\nseed = 2"),
            Err(TrainError::Contract(_))
        ));
        assert!(matches!(
            parse_train_config("learning_rate = -1e-3"),
            Err(TrainError::Contract(_))
        ));
        assert!(matches!(parse_train_config("iterations"), Err(TrainError::Contract(_))));
        // Comments and blank lines are fine.
        let c = parse_train_config("# a comment\n\niterations = 7 # tail\n").unwrap();
        assert_eq!(c.iterations, 7);
    }

    /// Small toy run shared by the loop tests: a 4-step group, 40-pixel
    /// corpus images, 30-pixel crops.
    fn toy_run(iterations: usize, validation_interval: usize) -> TrainOutcome<f64> {
        let corpus = synth_corpus(3, 4, 40);
        let plan = RideConfig::toy(4);
        let config = TrainConfig {
            iterations,
            batch_size: 2,
            crop: 30,
            seed: 9,
            validation_interval,
            ..Default::default()
        };
        train(&corpus, &plan, &config, None).unwrap()
    }

    #[test]
    fn ten_iterations_twice_are_bit_identical() {
        let a = toy_run(10, 5);
        let b = toy_run(10, 5);
        assert_eq!(a.log, b.log);
        assert_eq!(a.best_iteration, b.best_iteration);
        assert_eq!(a.skipped_pairs, b.skipped_pairs);
        let image = synth_corpus(77, 1, 30).remove(0);
        let x = image.to_tensor::<f64>().unwrap();
        let ka = a.model.forward(&x, ForwardMode::Eval).unwrap();
        let kb = b.model.forward(&x, ForwardMode::Eval).unwrap();
        assert_eq!(*ka.k.values().data(), *kb.k.values().data());
    }

    #[test]
    fn loop_logs_are_finite_and_validation_is_the_argmax() {
        let outcome = toy_run(6, 2);
        assert_eq!(outcome.log.len(), 6);
        for (i, r) in outcome.log.iter().enumerate() {
            assert_eq!(r.iteration, i + 1);
            for v in [r.l_o, r.l_d, r.l_k, r.total] {
                assert!(v.is_finite(), "non-finite loss in {r:?}");
            }
            assert_eq!(r.val_mma.is_some(), (i + 1) % 2 == 0, "row {i}");
            if let Some(v) = r.val_mma {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        let vals: Vec<(usize, f64)> =
            outcome.log.iter().filter_map(|r| r.val_mma.map(|v| (r.iteration, v))).collect();
        let best = vals
            .iter()
            .fold(None::<(usize, f64)>, |acc, &(i, v)| match acc {
                Some((_, bv)) if v <= bv => acc,
                _ => Some((i, v)),
            })
            .unwrap();
        assert_eq!(outcome.best_iteration, Some(best.0));
        assert_eq!(outcome.best_val_mma, Some(best.1));
    }

    #[test]
    fn rejects_bad_corpora() {
        let plan = RideConfig::toy(4);
        let config = TrainConfig { crop: 30, ..TrainConfig::desk() };
        assert!(matches!(
            train::<f64>(&[], &plan, &config, None),
            Err(TrainError::Contract(_))
        ));
        let small = synth_corpus(1, 1, 24);
        assert!(matches!(
            train::<f64>(&small, &plan, &config, None),
            Err(TrainError::Contract(_))
        ));
        let tight = TrainConfig { crop: plan.crop_total(), ..TrainConfig::desk() };
        let corpus = synth_corpus(1, 1, 40);
        assert!(matches!(
            train::<f64>(&corpus, &plan, &tight, None),
            Err(TrainError::Contract(_))
        ));
    }

    #[test]
    fn out_dir_checkpoints_reproduce_the_final_model() {
        let dir = std::env::temp_dir().join(format!("ride-trainer-test-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let corpus = synth_corpus(3, 2, 40);
        let plan = RideConfig::toy(4);
        let config = TrainConfig {
            iterations: 2,
            batch_size: 1,
            crop: 30,
            seed: 5,
            validation_interval: 100,
            ..Default::default()
        };
        let outcome = train::<f32>(&corpus, &plan, &config, Some(&dir)).unwrap();
        // The last iteration always validates, so the best checkpoint
        // here is the final one.
        assert_eq!(outcome.best_iteration, Some(2));

        let image = synth_corpus(8, 1, 30).remove(0);
        let x = image.to_tensor::<f32>().unwrap();
        let want = outcome.model.forward(&x, ForwardMode::Eval).unwrap();
        for name in ["final.ckpt", "best.ckpt"] {
            let (loaded, iter) = RideModel::<f32>::load(&dir.join(name)).unwrap();
            assert_eq!(iter, 2);
            let got = loaded.forward(&x, ForwardMode::Eval).unwrap();
            assert_eq!(*want.k.values().data(), *got.k.values().data(), "{name}");
            assert_eq!(*want.f_d.values().data(), *got.f_d.values().data(), "{name}");
        }

        let csv = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("iteration,l_o,l_d,l_k,total,val_mma"));
        assert_eq!(lines.count(), 2);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn metrics_csv_formats_validation_gaps() {
        let log = vec![
            TrainRecord { iteration: 1, l_o: 1.5, l_d: 2.0, l_k: 0.25, total: 17.25, val_mma: None },
            TrainRecord { iteration: 2, l_o: 1.0, l_d: 1.5, l_k: 0.5, total: 12.0, val_mma: Some(0.75) },
        ];
        assert_eq!(
            metrics_csv(&log),
            "iteration,l_o,l_d,l_k,total,val_mma\n1,1.5,2,0.25,17.25,\n2,1,1.5,0.5,12,0.75\n"
        );
    }
}
