//! Matching and evaluation harnesses.
//!
//! Turns forward passes into keypoints with aligned descriptors, matches
//! descriptor sets (mutual nearest neighbor or dual-softmax), and scores
//! the results three ways: mean matching accuracy under a known warp
//! (including a full rotation sweep), relative pose error from an
//! essential-matrix solve inside RANSAC, and tracking-point drift over a
//! labeled sequence.
//!
//! Keypoint positions are pixel centers in full-image coordinates: the
//! network output grid sits `crop_total() / 2` pixels inside the input,
//! so grid index `i` maps to coordinate `i + crop/2 + 0.5`.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{
    invariant_descriptors, top_k_keypoints, ForwardMode, ModelError, RideModel,
};
use crate::selfsup::{warp_image, GrayImage, Homography, SelfSupError};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MatchEvalError {
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    SelfSup(#[from] SelfSupError),
}

fn contract(msg: impl Into<String>) -> MatchEvalError {
    MatchEvalError::Contract(msg.into())
}

/// Keypoints with their rotation-aligned descriptors for one image.
/// `positions` are (row, col) pixel centers in full-image coordinates;
/// `descriptors` holds unit columns in `[dim, n]` row-major layout,
/// entry (d, j) at `d * n + j`. Plain storage so zero keypoints stay
/// representable.
pub struct Extraction<F: Scalar> {
    pub positions: Vec<(f64, f64)>,
    pub scores: Vec<f64>,
    pub dim: usize,
    pub descriptors: Vec<F>,
}

impl<F: Scalar> Extraction<F> {
    /// Descriptor count after shape validation.
    fn len_checked(&self) -> Result<usize, MatchEvalError> {
        let n = self.positions.len();
        if self.scores.len() != n || self.descriptors.len() != self.dim * n {
            return Err(contract(format!(
                "{} positions but {} scores and {} descriptor values for dim {}",
                n,
                self.scores.len(),
                self.descriptors.len(),
                self.dim
            )));
        }
        if n > 0 && self.dim == 0 {
            return Err(contract("descriptors need a positive dimension"));
        }
        Ok(n)
    }

    /// Tensor view of columns `[j0, j1)` as `[dim, j1 - j0]`.
    fn column_block(&self, j0: usize, j1: usize) -> Result<Tensor<F>, MatchEvalError> {
        let n = self.positions.len();
        let mut data = Vec::with_capacity(self.dim * (j1 - j0));
        for d in 0..self.dim {
            data.extend_from_slice(&self.descriptors[d * n + j0..d * n + j1]);
        }
        Ok(Tensor::from_vec(&[self.dim, j1 - j0], data)?)
    }
}

/// Runs the model on one image and gathers the top-k keypoints with
/// descriptors aligned by each pixel's orientation histogram argmax.
/// Inference path: batch statistics come from the stored running
/// estimates, never from the image itself.
pub fn extract<F: Scalar>(
    model: &RideModel<F>,
    image: &GrayImage,
    top_k: usize,
) -> Result<Extraction<F>, MatchEvalError> {
    let out = model.forward(&image.to_tensor()?, ForwardMode::Eval)?;
    let orientations = out.v.values().argmax_axis(1)?;
    let aligned = invariant_descriptors(&out.f_d, &orientations)?;
    let keypoints = top_k_keypoints(&out.k, top_k)?;
    let offset = (model.config().crop_total() / 2) as f64;
    let width = out.k.width();
    let pixels: Vec<usize> = keypoints.iter().map(|p| p.row * width + p.col).collect();
    let (dim, descriptors) = if pixels.is_empty() {
        (aligned.dim(), Vec::new())
    } else {
        let sampled = aligned.sample_pixels(&pixels)?;
        let data = sampled.data().clone();
        (sampled.shape()[0], data)
    };
    Ok(Extraction {
        positions: keypoints
            .iter()
            .map(|p| (p.row as f64 + offset + 0.5, p.col as f64 + offset + 0.5))
            .collect(),
        scores: keypoints.iter().map(|p| p.score.to_f64()).collect(),
        dim,
        descriptors,
    })
}

/// Mutual matches between two extractions. Each index appears at most
/// once per side; matches are sorted by the A-side index.
pub struct MatchSet {
    /// (index into A, index into B, matcher score).
    pub matches: Vec<(usize, usize, f64)>,
    pub keypoints_a: Vec<(f64, f64)>,
    pub keypoints_b: Vec<(f64, f64)>,
}

const MATCH_BLOCK: usize = 512;

/// Applies `visit(i, j, score)` over the full score matrix blockwise,
/// never materializing more than one block. Scores are raw descriptor
/// dot products in f64.
fn scan_scores<F: Scalar>(
    a: &Extraction<F>,
    b: &Extraction<F>,
    mut visit: impl FnMut(usize, usize, f64),
) -> Result<(), MatchEvalError> {
    let (n_a, n_b) = (a.positions.len(), b.positions.len());
    for i0 in (0..n_a).step_by(MATCH_BLOCK) {
        let i1 = (i0 + MATCH_BLOCK).min(n_a);
        let blk_a = a.column_block(i0, i1)?;
        for j0 in (0..n_b).step_by(MATCH_BLOCK) {
            let j1 = (j0 + MATCH_BLOCK).min(n_b);
            let blk_b = b.column_block(j0, j1)?;
            let s = blk_a.matmul_tn(&blk_b)?;
            let data = s.data();
            for i in i0..i1 {
                for j in j0..j1 {
                    visit(i, j, data[(i - i0) * (j1 - j0) + (j - j0)].to_f64());
                }
            }
        }
    }
    Ok(())
}

/// Per-row and per-column argmax of the visited scores, ties toward the
/// smaller index.
struct ArgmaxTracker {
    row_best: Vec<(f64, usize)>,
    col_best: Vec<(f64, usize)>,
}

impl ArgmaxTracker {
    fn new(n_a: usize, n_b: usize) -> Self {
        ArgmaxTracker {
            row_best: vec![(f64::NEG_INFINITY, usize::MAX); n_a],
            col_best: vec![(f64::NEG_INFINITY, usize::MAX); n_b],
        }
    }

    fn visit(&mut self, i: usize, j: usize, v: f64) {
        if v > self.row_best[i].0 {
            self.row_best[i] = (v, j);
        }
        if v > self.col_best[j].0 {
            self.col_best[j] = (v, i);
        }
    }

    /// Mutual pairs `(i, row_best(i))` where the column agrees.
    fn mutual(&self) -> Vec<(usize, usize, f64)> {
        self.row_best
            .iter()
            .enumerate()
            .filter_map(|(i, &(v, j))| {
                (j != usize::MAX && self.col_best[j].1 == i).then_some((i, j, v))
            })
            .collect()
    }
}

/// Mutual nearest neighbor matching on raw cosine scores (descriptors
/// are unit length, so dot products are cosines).
pub fn match_mnn<F: Scalar>(
    a: &Extraction<F>,
    b: &Extraction<F>,
) -> Result<MatchSet, MatchEvalError> {
    let n_a = a.len_checked()?;
    let n_b = b.len_checked()?;
    if n_a > 0 && n_b > 0 && a.dim != b.dim {
        return Err(contract(format!("descriptor dims differ: {} vs {}", a.dim, b.dim)));
    }
    let mut tracker = ArgmaxTracker::new(n_a, n_b);
    if n_a > 0 && n_b > 0 {
        scan_scores(a, b, |i, j, v| tracker.visit(i, j, v))?;
    }
    Ok(MatchSet {
        matches: tracker.mutual(),
        keypoints_a: a.positions.clone(),
        keypoints_b: b.positions.clone(),
    })
}

/// Dual-softmax matching: keeps mutual argmax pairs of the soft mutual
/// probability matrix whose probability clears the threshold.
pub fn match_dual_softmax<F: Scalar>(
    a: &Extraction<F>,
    b: &Extraction<F>,
    temperature: f64,
    threshold: f64,
) -> Result<MatchSet, MatchEvalError> {
    if !(temperature > 0.0) {
        return Err(contract(format!("temperature must be positive, got {temperature}")));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(contract(format!("threshold must be in [0, 1], got {threshold}")));
    }
    let n_a = a.len_checked()?;
    let n_b = b.len_checked()?;
    if n_a > 0 && n_b > 0 && a.dim != b.dim {
        return Err(contract(format!("descriptor dims differ: {} vs {}", a.dim, b.dim)));
    }
    let mut matches = Vec::new();
    if n_a > 0 && n_b > 0 {
        // Pass 1: row and column log-sum-exp of S / t.
        let mut row_lse = LogSumExp::new(n_a);
        let mut col_lse = LogSumExp::new(n_b);
        scan_scores(a, b, |i, j, v| {
            row_lse.fold(i, v / temperature);
            col_lse.fold(j, v / temperature);
        })?;
        // Pass 2: log P(i, j) = 2 s/t - lse_row(i) - lse_col(j); track
        // the mutual argmax of P.
        let mut tracker = ArgmaxTracker::new(n_a, n_b);
        scan_scores(a, b, |i, j, v| {
            let log_p = 2.0 * v / temperature - row_lse.value(i) - col_lse.value(j);
            tracker.visit(i, j, log_p);
        })?;
        matches = tracker
            .mutual()
            .into_iter()
            .filter_map(|(i, j, log_p)| {
                let p = log_p.exp();
                (p >= threshold).then_some((i, j, p))
            })
            .collect();
    }
    Ok(MatchSet {
        matches,
        keypoints_a: a.positions.clone(),
        keypoints_b: b.positions.clone(),
    })
}

/// Streaming log-sum-exp accumulators, one slot per index.
struct LogSumExp {
    max: Vec<f64>,
    acc: Vec<f64>,
}

impl LogSumExp {
    fn new(n: usize) -> Self {
        LogSumExp { max: vec![f64::NEG_INFINITY; n], acc: vec![0.0; n] }
    }

    fn fold(&mut self, slot: usize, v: f64) {
        if v > self.max[slot] {
            self.acc[slot] = self.acc[slot] * (self.max[slot] - v).exp() + 1.0;
            self.max[slot] = v;
        } else {
            self.acc[slot] += (v - self.max[slot]).exp();
        }
    }

    fn value(&self, slot: usize) -> f64 {
        self.max[slot] + self.acc[slot].ln()
    }
}

/// Mean matching accuracy: the fraction of matches whose A-side
/// keypoint, pushed through the ground-truth warp, lands within each
/// pixel threshold of its B-side keypoint. An empty match set scores 0.
pub fn mma(matches: &MatchSet, warp: &Homography, thresholds: &[f64]) -> Vec<f64> {
    if matches.matches.is_empty() {
        return vec![0.0; thresholds.len()];
    }
    let errors: Vec<f64> = matches
        .matches
        .iter()
        .map(|&(ia, ib, _)| {
            let (ra, ca) = matches.keypoints_a[ia];
            let (rb, cb) = matches.keypoints_b[ib];
            let (wr, wc) = warp.apply(ra, ca);
            ((wr - rb).powi(2) + (wc - cb).powi(2)).sqrt()
        })
        .collect();
    thresholds
        .iter()
        .map(|&eps| errors.iter().filter(|&&e| e <= eps).count() as f64 / errors.len() as f64)
        .collect()
}

/// One rotation sweep measurement.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub image: String,
    pub angle_degrees: f64,
    pub mma3: f64,
    pub mma5: f64,
    pub mma10: f64,
}

/// Rotates each image in 10-degree steps (36 angles, content scale
/// preserved, gray fill), matches the rotated image against the
/// original with MNN, and scores MMA against the exact rotation warp.
pub fn rotation_sweep<F: Scalar>(
    model: &RideModel<F>,
    images: &[(String, GrayImage)],
    top_k: usize,
) -> Result<Vec<SweepRow>, MatchEvalError> {
    let mut rows = Vec::with_capacity(images.len() * 36);
    for (name, image) in images {
        let base = extract(model, image, top_k)?;
        for step in 0..36 {
            let angle = 10.0 * step as f64;
            let warp = Homography::compose_about_center(
                angle,
                1.0,
                0.0,
                0.0,
                0.0,
                0.0,
                image.height(),
                image.width(),
            )?;
            let rotated = warp_image(image, &warp)?;
            let turned = extract(model, &rotated, top_k)?;
            let matches = match_mnn(&base, &turned)?;
            let accuracy = mma(&matches, &warp, &[3.0, 5.0, 10.0]);
            rows.push(SweepRow {
                image: name.clone(),
                angle_degrees: angle,
                mma3: accuracy[0],
                mma5: accuracy[1],
                mma10: accuracy[2],
            });
        }
    }
    Ok(rows)
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, MatchEvalError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(contract(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }

    /// Pixel-center (row, col) to a normalized homogeneous ray.
    fn normalize(&self, row: f64, col: f64) -> Vector3<f64> {
        Vector3::new((col - self.cx) / self.fx, (row - self.cy) / self.fy, 1.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RansacParams {
    pub iterations: usize,
    /// Sampson error threshold in normalized image units.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams { iterations: 2000, threshold: 1e-3, seed: 0 }
    }
}

/// Relative pose of camera B with respect to camera A: `X_b = R X_a + t`
/// with `t` unit length (the baseline scale is unobservable).
#[derive(Debug, Clone)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Indices into the match list consistent with the pose.
    pub inliers: Vec<usize>,
}

/// Singular-value gap under which the linear system has more than one
/// essential-matrix solution (zero baseline or a degenerate surface).
const DEGENERATE_GAP: f64 = 1e-9;

/// Least-squares essential matrix from normalized correspondences plus
/// the rank-deficiency ratio of the design matrix (second-smallest over
/// largest singular value). Conditioning via in-solver renormalization.
fn eight_point(points: &[(Vector3<f64>, Vector3<f64>)]) -> Option<(Matrix3<f64>, f64)> {
    let n = points.len();
    if n < 8 {
        return None;
    }
    // Isotropic conditioning: zero-mean, mean norm sqrt(2) per side.
    let condition = |pick: fn(&(Vector3<f64>, Vector3<f64>)) -> Vector3<f64>| {
        let mut mean = (0.0, 0.0);
        for p in points {
            let v = pick(p);
            mean.0 += v.x;
            mean.1 += v.y;
        }
        mean.0 /= n as f64;
        mean.1 /= n as f64;
        let mut dist = 0.0;
        for p in points {
            let v = pick(p);
            dist += ((v.x - mean.0).powi(2) + (v.y - mean.1).powi(2)).sqrt();
        }
        let scale = if dist > 0.0 { 2.0f64.sqrt() * n as f64 / dist } else { 1.0 };
        Matrix3::new(scale, 0.0, -scale * mean.0, 0.0, scale, -scale * mean.1, 0.0, 0.0, 1.0)
    };
    let t_a = condition(|p| p.0);
    let t_b = condition(|p| p.1);

    let mut design = DMatrix::zeros(n, 9);
    for (r, (xa, xb)) in points.iter().enumerate() {
        let a = t_a * xa;
        let b = t_b * xb;
        for i in 0..3 {
            for j in 0..3 {
                design[(r, 3 * i + j)] = b[i] * a[j];
            }
        }
    }
    let svd = design.svd(false, true);
    let v_t = svd.v_t?;
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    // v_t rows are ordered by nalgebra's singular values; find the row
    // for the smallest one explicitly.
    let smallest_row = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)?;
    let e = v_t.row(smallest_row);
    let e_hat = Matrix3::new(e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8]);
    let essential = t_b.transpose() * e_hat * t_a;
    // With nine columns the family dimension shows in the gap between
    // the largest and the second-smallest singular value.
    let gap = if sv.len() >= 8 && sv[0] > 0.0 { sv[7] / sv[0] } else { 0.0 };
    Some((essential, gap))
}

/// Projects onto the essential manifold: two equal singular values, the
/// third zero.
fn enforce_essential(e: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = e.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    Some(u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)) * v_t)
}

/// First-order geometric (Sampson) squared error of one correspondence.
fn sampson_sq(e: &Matrix3<f64>, xa: &Vector3<f64>, xb: &Vector3<f64>) -> f64 {
    let ea = e * xa;
    let etb = e.transpose() * xb;
    let r = xb.dot(&ea);
    let denom = ea.x * ea.x + ea.y * ea.y + etb.x * etb.x + etb.y * etb.y;
    if denom <= 0.0 {
        return f64::INFINITY;
    }
    r * r / denom
}

/// Decomposes an essential matrix into the (R, t) candidate whose
/// triangulations put the most points in front of both cameras.
fn decompose_cheiral(
    e: &Matrix3<f64>,
    points: &[(Vector3<f64>, Vector3<f64>)],
) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    let svd = e.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t = u.column(2).into_owned();
    let mut best: Option<((Matrix3<f64>, Vector3<f64>), usize)> = None;
    for r_raw in [u * w * v_t, u * w.transpose() * v_t] {
        let r = if r_raw.determinant() < 0.0 { -r_raw } else { r_raw };
        for t_signed in [t, -t] {
            let mut in_front = 0;
            for (xa, xb) in points.iter().take(64) {
                if let Some((za, zb)) = triangulate_depths(&r, &t_signed, xa, xb) {
                    if za > 0.0 && zb > 0.0 {
                        in_front += 1;
                    }
                }
            }
            if best.as_ref().is_none_or(|(_, n)| in_front > *n) {
                best = Some(((r, t_signed), in_front));
            }
        }
    }
    best.map(|(pose, _)| pose)
}

/// Depths of one correspondence under `X_b = R X_a + t`: least-squares
/// on `z_b x_b = z_a R x_a + t` (two unknowns, three equations).
fn triangulate_depths(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    xa: &Vector3<f64>,
    xb: &Vector3<f64>,
) -> Option<(f64, f64)> {
    let rxa = r * xa;
    // Columns [R x_a, -x_b] times (z_a, z_b) = -t.
    let a00 = rxa.dot(&rxa);
    let a01 = -rxa.dot(xb);
    let a11 = xb.dot(xb);
    let b0 = -rxa.dot(t);
    let b1 = xb.dot(t);
    let det = a00 * a11 - a01 * a01;
    if det.abs() < 1e-12 {
        return None;
    }
    let za = (b0 * a11 - b1 * a01) / det;
    let zb = (a00 * b1 - a01 * b0) / det;
    Some((za, zb))
}

/// Essential-matrix relative pose from pixel matches: RANSAC over
/// 8-point solves scored by Sampson error, a final all-inlier refit,
/// and cheirality-based decomposition. Returns `None` when fewer than
/// 8 matches exist or the geometry leaves the solution underdetermined
/// (for example a zero baseline).
pub fn estimate_relative_pose(
    matches: &MatchSet,
    intrinsics_a: &CameraIntrinsics,
    intrinsics_b: &CameraIntrinsics,
    params: &RansacParams,
) -> Result<Option<RelativePose>, MatchEvalError> {
    if params.iterations == 0 || !(params.threshold > 0.0) {
        return Err(contract("RANSAC wants positive iterations and threshold"));
    }
    let n = matches.matches.len();
    if n < 8 {
        return Ok(None);
    }
    let points: Vec<(Vector3<f64>, Vector3<f64>)> = matches
        .matches
        .iter()
        .map(|&(ia, ib, _)| {
            let (ra, ca) = matches.keypoints_a[ia];
            let (rb, cb) = matches.keypoints_b[ib];
            (intrinsics_a.normalize(ra, ca), intrinsics_b.normalize(rb, cb))
        })
        .collect();

    let thr_sq = params.threshold * params.threshold;
    let inliers_at = |e: &Matrix3<f64>, scale_sq: f64| -> Vec<usize> {
        points
            .iter()
            .enumerate()
            .filter_map(|(i, (xa, xb))| (sampson_sq(e, xa, xb) <= thr_sq * scale_sq).then_some(i))
            .collect()
    };
    let inliers_of = |e: &Matrix3<f64>| inliers_at(e, 1.0);

    // Local refinement with threshold annealing: a sample contaminated
    // by an outlier fits the truth only loosely, so harvest inliers at
    // relaxed thresholds first and refit downward. Every refit is
    // scored at the strict threshold and the best-scoring model wins;
    // the exploration itself may regress without harm.
    let refine = |e0: Matrix3<f64>| -> (Vec<usize>, Matrix3<f64>) {
        let mut e = e0;
        let mut best_local = (inliers_of(&e0), e0);
        for scale in [64.0f64, 32.0, 16.0, 8.0, 4.0, 2.0, 1.0] {
            let mut prev = 0usize;
            loop {
                let set = inliers_at(&e, scale * scale);
                if set.len() < 8 || set.len() <= prev {
                    break;
                }
                prev = set.len();
                let pts: Vec<_> = set.iter().map(|&i| points[i]).collect();
                let Some((raw, _)) = eight_point(&pts) else { break };
                let Some(refit) = enforce_essential(&raw) else { break };
                e = refit;
                let strict = inliers_of(&e);
                if strict.len() > best_local.0.len() {
                    best_local = (strict, e);
                }
            }
        }
        best_local
    };

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Vec<usize>, Matrix3<f64>)> = None;
    for _ in 0..params.iterations {
        let sample_idx = rand::seq::index::sample(&mut rng, n, 8).into_vec();
        let sample: Vec<_> = sample_idx.iter().map(|&i| points[i]).collect();
        let Some((e_raw, _)) = eight_point(&sample) else { continue };
        let Some(e) = enforce_essential(&e_raw) else { continue };
        let cand = refine(e);
        if best.as_ref().is_none_or(|(b, _)| cand.0.len() > b.len()) {
            best = Some(cand);
        }
    }
    let Some((inliers, _)) = best else { return Ok(None) };
    if inliers.len() < 8 {
        return Ok(None);
    }

    let inlier_points: Vec<_> = inliers.iter().map(|&i| points[i]).collect();
    let Some((refit_raw, gap)) = eight_point(&inlier_points) else { return Ok(None) };
    if gap < DEGENERATE_GAP {
        return Ok(None);
    }
    let Some(refit) = enforce_essential(&refit_raw) else { return Ok(None) };
    let final_inliers = inliers_of(&refit);
    if final_inliers.len() < 8 {
        return Ok(None);
    }
    let final_points: Vec<_> = final_inliers.iter().map(|&i| points[i]).collect();
    let Some((rotation, translation)) = decompose_cheiral(&refit, &final_points) else {
        return Ok(None);
    };
    Ok(Some(RelativePose { rotation, translation, inliers: final_inliers }))
}

/// Angular pose errors in degrees.
#[derive(Debug, Clone, Copy)]
pub struct PoseError {
    pub rotation_error_deg: f64,
    pub translation_angle_error_deg: f64,
    /// The maximum of the two angular errors.
    pub combined: f64,
}

/// Compares an estimated pose to ground truth. The translation error is
/// direction-only (scale is unobservable) and sign-agnostic.
pub fn pose_error(
    estimate: &RelativePose,
    gt_rotation: &Matrix3<f64>,
    gt_translation: &Vector3<f64>,
) -> PoseError {
    let rel = estimate.rotation * gt_rotation.transpose();
    let cos_r = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let rotation_error_deg = cos_r.acos().to_degrees();
    let denom = estimate.translation.norm() * gt_translation.norm();
    let translation_angle_error_deg = if denom > 0.0 {
        (estimate.translation.dot(gt_translation).abs() / denom).clamp(0.0, 1.0).acos().to_degrees()
    } else {
        f64::INFINITY
    };
    PoseError {
        rotation_error_deg,
        translation_angle_error_deg,
        combined: rotation_error_deg.max(translation_angle_error_deg),
    }
}

/// Area under the cumulative error curve up to each threshold, divided
/// by the threshold. Failures enter as infinite errors. Linear
/// interpolation between sorted error points, matching the usual pose
/// AUC convention.
pub fn pose_error_auc(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>, MatchEvalError> {
    if errors.is_empty() {
        return Err(contract("pose AUC of an empty error list"));
    }
    if thresholds.iter().any(|&t| !(t > 0.0)) {
        return Err(contract("pose AUC thresholds must be positive"));
    }
    let mut sorted: Vec<f64> = errors.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&tau| {
            let mut area = 0.0;
            let (mut last_e, mut last_r) = (0.0f64, 0.0f64);
            for (i, &e) in sorted.iter().enumerate() {
                if e > tau {
                    break;
                }
                let r = (i + 1) as f64 / n;
                area += (e - last_e) * (last_r + r) / 2.0;
                (last_e, last_r) = (e, r);
            }
            area += (tau - last_e) * last_r;
            area / tau
        })
        .collect())
}

/// One frame of a tracking sequence: the image plus per-point labels
/// ((row, col) pixel centers), `None` where a point is unlabeled.
pub struct TrackingFrame {
    pub image: GrayImage,
    pub points: Vec<Option<(f64, f64)>>,
}

/// Per-anchor motion estimates: the mean displacement of the 4 matched
/// A-side keypoints spatially closest to each anchor. Anchors with
/// fewer than 4 matched keypoints get `None`.
pub fn point_motions(matches: &MatchSet, anchors: &[(f64, f64)]) -> Vec<Option<(f64, f64)>> {
    anchors
        .iter()
        .map(|&(ar, ac)| {
            let mut near: Vec<(f64, usize)> = matches
                .matches
                .iter()
                .enumerate()
                .map(|(k, &(ia, _, _))| {
                    let (r, c) = matches.keypoints_a[ia];
                    (((r - ar).powi(2) + (c - ac).powi(2)).sqrt(), k)
                })
                .collect();
            if near.len() < 4 {
                return None;
            }
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut motion = (0.0, 0.0);
            for &(_, k) in near.iter().take(4) {
                let (ia, ib, _) = matches.matches[k];
                let (ra, ca) = matches.keypoints_a[ia];
                let (rb, cb) = matches.keypoints_b[ib];
                motion.0 += (rb - ra) / 4.0;
                motion.1 += (cb - ca) / 4.0;
            }
            Some(motion)
        })
        .collect()
}

/// Tracks frame-0 points through a labeled sequence: per labeled frame,
/// matches keypoints against frame 0, moves each point by its local
/// mean match displacement, and scores the pixel error against the
/// label as a fraction of image height. Returns each point's mean
/// fraction over the frames where it was labeled and had enough
/// matches; `None` if it never was.
pub fn tracking_error<F: Scalar>(
    model: &RideModel<F>,
    frames: &[TrackingFrame],
    top_k: usize,
) -> Result<Vec<Option<f64>>, MatchEvalError> {
    if frames.is_empty() {
        return Err(contract("tracking wants at least the labeled first frame"));
    }
    let anchors: Vec<(f64, f64)> = frames[0]
        .points
        .iter()
        .map(|p| p.ok_or_else(|| contract("every tracking point must be labeled in frame 0")))
        .collect::<Result<_, _>>()?;
    let height = frames[0].image.height() as f64;
    let base = extract(model, &frames[0].image, top_k)?;
    let mut sums = vec![(0.0f64, 0usize); anchors.len()];
    for frame in &frames[1..] {
        if frame.points.len() != anchors.len() {
            return Err(contract(format!(
                "frame labels {} points, frame 0 has {}",
                frame.points.len(),
                anchors.len()
            )));
        }
        if frame.points.iter().all(Option::is_none) {
            continue;
        }
        let current = extract(model, &frame.image, top_k)?;
        let matches = match_mnn(&base, &current)?;
        let motions = point_motions(&matches, &anchors);
        for (slot, (label, motion)) in frame.points.iter().zip(&motions).enumerate() {
            if let (Some((gr, gc)), Some((mr, mc))) = (label, motion) {
                let (pr, pc) = (anchors[slot].0 + mr, anchors[slot].1 + mc);
                let err = ((pr - gr).powi(2) + (pc - gc).powi(2)).sqrt() / height;
                sums[slot].0 += err;
                sums[slot].1 += 1;
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(sum, count)| (count > 0).then(|| sum / count as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RideConfig, RideModel};
    use crate::selfsup::synth_corpus;
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Extraction from raw descriptor columns; positions default to the
    /// column index on the diagonal.
    fn extraction(dim: usize, cols: Vec<Vec<f64>>) -> Extraction<f64> {
        let n = cols.len();
        let mut data = vec![0.0; dim * n];
        for (j, col) in cols.iter().enumerate() {
            assert_eq!(col.len(), dim);
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            for i in 0..dim {
                data[i * n + j] = col[i] / norm;
            }
        }
        Extraction {
            positions: (0..n).map(|j| (j as f64, j as f64)).collect(),
            scores: vec![1.0; n],
            dim,
            descriptors: data,
        }
    }

    fn random_extraction(dim: usize, n: usize, seed: u64) -> Extraction<f64> {
        let mut r = rng(seed);
        extraction(dim, (0..n).map(|_| (0..dim).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect()).collect())
    }

    fn toy_model() -> RideModel<f64> {
        let config = RideConfig {
            group_order: 4,
            block_channels: vec![2],
            descriptor_channels: 2,
            kernel_size: 3,
        };
        RideModel::new(config, 11).unwrap()
    }

    #[test]
    fn mnn_matches_identical_orthonormal_sets_identically() {
        let e = |i: usize| {
            let mut v = vec![0.0; 4];
            v[i] = 1.0;
            v
        };
        let a = extraction(4, vec![e(0), e(1), e(2), e(3)]);
        let b = extraction(4, vec![e(0), e(1), e(2), e(3)]);
        let ms = match_mnn(&a, &b).unwrap();
        let idx: Vec<(usize, usize)> = ms.matches.iter().map(|&(i, j, _)| (i, j)).collect();
        assert_eq!(idx, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn mnn_follows_a_permutation() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let a = extraction(2, vec![e1.clone(), e2.clone()]);
        let b = extraction(2, vec![e2, e1]);
        let ms = match_mnn(&a, &b).unwrap();
        let idx: Vec<(usize, usize)> = ms.matches.iter().map(|&(i, j, _)| (i, j)).collect();
        assert_eq!(idx, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn mnn_equals_the_brute_force_oracle() {
        let a = random_extraction(16, 50, 1);
        let b = random_extraction(16, 60, 2);
        let ms = match_mnn(&a, &b).unwrap();

        let score = |i: usize, j: usize| -> f64 {
            let (da, db) = (&a.descriptors, &b.descriptors);
            (0..16).map(|d| da[d * 50 + i] * db[d * 60 + j]).sum()
        };
        let mut want = Vec::new();
        for i in 0..50 {
            let bj = (0..60).fold(0, |best, j| if score(i, j) > score(i, best) { j } else { best });
            let bi = (0..50).fold(0, |best, k| if score(k, bj) > score(best, bj) { k } else { best });
            if bi == i {
                want.push((i, bj));
            }
        }
        let got: Vec<(usize, usize)> = ms.matches.iter().map(|&(i, j, _)| (i, j)).collect();
        assert_eq!(got, want);
        assert!(!got.is_empty());
        for &(i, j, s) in &ms.matches {
            assert_relative_eq!(s, score(i, j), epsilon = 1e-9);
        }
    }

    #[test]
    fn mnn_is_symmetric_under_swapping_sides() {
        let a = random_extraction(8, 40, 3);
        let b = random_extraction(8, 35, 4);
        let ab = match_mnn(&a, &b).unwrap();
        let ba = match_mnn(&b, &a).unwrap();
        let mut swapped: Vec<(usize, usize)> = ba.matches.iter().map(|&(i, j, _)| (j, i)).collect();
        swapped.sort_unstable();
        let got: Vec<(usize, usize)> = ab.matches.iter().map(|&(i, j, _)| (i, j)).collect();
        assert_eq!(got, swapped);
    }

    #[test]
    fn mnn_handles_empty_sides() {
        let a = random_extraction(4, 0, 5);
        let b = random_extraction(4, 7, 6);
        assert!(match_mnn(&a, &b).unwrap().matches.is_empty());
        assert!(match_mnn(&b, &a).unwrap().matches.is_empty());
    }

    #[test]
    fn dual_softmax_singleton_matches() {
        let a = extraction(3, vec![vec![1.0, 2.0, -1.0]]);
        let b = extraction(3, vec![vec![0.5, -0.5, 2.0]]);
        let ms = match_dual_softmax(&a, &b, 0.1, 0.9).unwrap();
        assert_eq!(ms.matches.len(), 1);
        let (i, j, p) = ms.matches[0];
        assert_eq!((i, j), (0, 0));
        assert_relative_eq!(p, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn dual_softmax_keeps_identity_on_orthonormal_sets() {
        let e = |i: usize| {
            let mut v = vec![0.0; 5];
            v[i] = 1.0;
            v
        };
        let cols: Vec<Vec<f64>> = (0..5).map(e).collect();
        let a = extraction(5, cols.clone());
        let b = extraction(5, cols);
        let ms = match_dual_softmax(&a, &b, 0.1, 0.9).unwrap();
        assert_eq!(ms.matches.len(), 5);
        for (k, &(i, j, p)) in ms.matches.iter().enumerate() {
            assert_eq!((i, j), (k, k));
            assert!(p >= 0.9, "probability {p}");
        }
    }

    #[test]
    fn dual_softmax_equals_the_brute_force_oracle() {
        let (na, nb, dim, t) = (23, 31, 8, 0.1);
        let a = random_extraction(dim, na, 7);
        let b = random_extraction(dim, nb, 8);
        for threshold in [0.0, 0.3] {
            let ms = match_dual_softmax(&a, &b, t, threshold).unwrap();

            let score = |i: usize, j: usize| -> f64 {
                let (da, db) = (&a.descriptors, &b.descriptors);
                (0..dim).map(|d| da[d * na + i] * db[d * nb + j]).sum::<f64>() / t
            };
            let mut p = vec![vec![0.0; nb]; na];
            for i in 0..na {
                for j in 0..nb {
                    let row: f64 = (0..nb).map(|k| (score(i, k) - score(i, j)).exp()).sum();
                    let col: f64 = (0..na).map(|k| (score(k, j) - score(i, j)).exp()).sum();
                    p[i][j] = (1.0 / row) * (1.0 / col);
                }
            }
            let mut want = Vec::new();
            for i in 0..na {
                let bj = (0..nb).fold(0, |best, j| if p[i][j] > p[i][best] { j } else { best });
                let bi = (0..na).fold(0, |best, k| if p[k][bj] > p[best][bj] { k } else { best });
                if bi == i && p[i][bj] >= threshold {
                    want.push((i, bj));
                }
            }
            let got: Vec<(usize, usize)> = ms.matches.iter().map(|&(i, j, _)| (i, j)).collect();
            assert_eq!(got, want, "threshold {threshold}");
            for &(i, j, prob) in &ms.matches {
                assert_relative_eq!(prob, p[i][j], max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn dual_softmax_at_zero_threshold_is_the_mutual_argmax_set() {
        let a = random_extraction(6, 30, 9);
        let b = random_extraction(6, 30, 10);
        let all = match_dual_softmax(&a, &b, 0.1, 0.0).unwrap();
        let strict = match_dual_softmax(&a, &b, 0.1, 0.9).unwrap();
        let all_idx: Vec<(usize, usize)> = all.matches.iter().map(|&(i, j, _)| (i, j)).collect();
        for &(i, j, _) in &strict.matches {
            assert!(all_idx.contains(&(i, j)));
        }
        assert!(strict.matches.len() <= all.matches.len());
    }

    #[test]
    fn mma_is_perfect_for_exact_identity_matches() {
        let mut ms = MatchSet {
            matches: vec![(0, 0, 1.0), (1, 1, 1.0)],
            keypoints_a: vec![(10.5, 20.5), (30.5, 40.5)],
            keypoints_b: vec![(10.5, 20.5), (30.5, 40.5)],
        };
        let acc = mma(&ms, &Homography::identity(), &[3.0, 5.0, 10.0]);
        assert_eq!(acc, vec![1.0, 1.0, 1.0]);
        ms.matches.clear();
        assert_eq!(mma(&ms, &Homography::identity(), &[3.0]), vec![0.0]);
    }

    #[test]
    fn mma_brackets_a_four_pixel_error() {
        let ms = MatchSet {
            matches: vec![(0, 0, 1.0)],
            keypoints_a: vec![(10.0, 10.0)],
            keypoints_b: vec![(10.0, 14.0)],
        };
        let acc = mma(&ms, &Homography::identity(), &[3.0, 5.0, 10.0]);
        assert_eq!(acc, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn mma_counts_planted_errors_and_is_monotone() {
        // 10 matches with planted radial errors 0..9 px under identity.
        let n = 10;
        let ms = MatchSet {
            matches: (0..n).map(|i| (i, i, 1.0)).collect(),
            keypoints_a: (0..n).map(|i| (50.0 + 10.0 * i as f64, 50.0)).collect(),
            keypoints_b: (0..n).map(|i| (50.0 + 10.0 * i as f64, 50.0 + i as f64)).collect(),
        };
        let thresholds = [3.0, 5.0, 10.0];
        let acc = mma(&ms, &Homography::identity(), &thresholds);
        assert_eq!(acc, vec![0.4, 0.6, 1.0]);
        for w in acc.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn rotation_sweep_is_perfect_at_angle_zero_and_emits_36_rows() {
        let model = toy_model();
        let corpus = synth_corpus(5, 1, 26);
        let images: Vec<(String, GrayImage)> =
            vec![("tex".to_string(), corpus.into_iter().next().unwrap())];
        let rows = rotation_sweep(&model, &images, 40).unwrap();
        assert_eq!(rows.len(), 36);
        for (k, row) in rows.iter().enumerate() {
            assert_relative_eq!(row.angle_degrees, 10.0 * k as f64);
        }
        let zero = &rows[0];
        assert_eq!(zero.mma3, 1.0, "self-matching at angle 0 must be exact");
        assert_eq!(zero.mma10, 1.0);
    }

    /// Synthetic two-view scene: `n` 3D points projected into both
    /// cameras under a known relative pose.
    fn synthetic_scene(
        n: usize,
        rot: &Matrix3<f64>,
        trans: &Vector3<f64>,
        k: &CameraIntrinsics,
        seed: u64,
    ) -> MatchSet {
        let mut r = rng(seed);
        let mut kp_a = Vec::new();
        let mut kp_b = Vec::new();
        while kp_a.len() < n {
            let x = Vector3::new(
                r.gen::<f64>() * 4.0 - 2.0,
                r.gen::<f64>() * 4.0 - 2.0,
                4.0 + r.gen::<f64>() * 4.0,
            );
            let xb = rot * x + trans;
            if xb.z <= 0.5 {
                continue;
            }
            kp_a.push((k.fy * x.y / x.z + k.cy, k.fx * x.x / x.z + k.cx));
            kp_b.push((k.fy * xb.y / xb.z + k.cy, k.fx * xb.x / xb.z + k.cx));
        }
        MatchSet {
            matches: (0..n).map(|i| (i, i, 1.0)).collect(),
            keypoints_a: kp_a,
            keypoints_b: kp_b,
        }
    }

    fn test_pose() -> (Matrix3<f64>, Vector3<f64>) {
        let rot = Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(Vector3::new(0.3, 1.0, 0.2)),
            8.0f64.to_radians(),
        )
        .into_inner();
        let trans = Vector3::new(0.5, -0.2, 0.1).normalize() * 0.6;
        (rot, trans)
    }

    #[test]
    fn noiseless_scene_recovers_the_pose() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let (rot, trans) = test_pose();
        let ms = synthetic_scene(100, &rot, &trans, &k, 12);
        let pose = estimate_relative_pose(&ms, &k, &k, &RansacParams::default())
            .unwrap()
            .expect("pose");
        let err = pose_error(&pose, &rot, &trans);
        assert!(err.combined < 0.5, "pose error {:?}", err);
        assert!(pose.inliers.len() >= 95);
    }

    #[test]
    fn ransac_survives_sixty_percent_outliers() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let (rot, trans) = test_pose();
        let mut ms = synthetic_scene(150, &rot, &trans, &k, 13);
        let mut r = rng(14);
        for i in 0..90 {
            ms.keypoints_b[i] = (r.gen::<f64>() * 480.0, r.gen::<f64>() * 640.0);
        }
        let pose = estimate_relative_pose(&ms, &k, &k, &RansacParams::default())
            .unwrap()
            .expect("pose despite outliers");
        let err = pose_error(&pose, &rot, &trans);
        assert!(err.combined < 2.0, "pose error {:?}", err);
    }

    #[test]
    fn zero_baseline_is_flagged_degenerate() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let rot = Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(Vector3::new(0.0, 1.0, 0.0)),
            10.0f64.to_radians(),
        )
        .into_inner();
        let ms = synthetic_scene(100, &rot, &Vector3::zeros(), &k, 15);
        let pose = estimate_relative_pose(&ms, &k, &k, &RansacParams::default()).unwrap();
        assert!(pose.is_none(), "zero baseline must not produce a pose");
    }

    #[test]
    fn too_few_matches_produce_no_pose() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let (rot, trans) = test_pose();
        let mut ms = synthetic_scene(7, &rot, &trans, &k, 16);
        assert!(estimate_relative_pose(&ms, &k, &k, &RansacParams::default()).unwrap().is_none());
        ms.matches.clear();
        assert!(estimate_relative_pose(&ms, &k, &k, &RansacParams::default()).unwrap().is_none());
    }

    #[test]
    fn match_order_barely_moves_the_pose() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let (rot, trans) = test_pose();
        let ms = synthetic_scene(100, &rot, &trans, &k, 17);
        let base = estimate_relative_pose(&ms, &k, &k, &RansacParams::default())
            .unwrap()
            .expect("pose");

        // Reverse the match list and re-estimate over fresh seeds; the
        // median deviation from the unpermuted pose stays tiny.
        let reversed = MatchSet {
            matches: ms.matches.iter().rev().copied().collect(),
            keypoints_a: ms.keypoints_a.clone(),
            keypoints_b: ms.keypoints_b.clone(),
        };
        let mut deltas = Vec::new();
        for seed in 0..10 {
            let params = RansacParams { seed, ..RansacParams::default() };
            let pose = estimate_relative_pose(&reversed, &k, &k, &params).unwrap().expect("pose");
            let delta = pose_error(&pose, &base.rotation, &base.translation);
            deltas.push(delta.combined);
        }
        deltas.sort_by(f64::total_cmp);
        assert!(deltas[5] < 0.1, "median pose shift {}", deltas[5]);
    }

    #[test]
    fn pose_auc_handles_the_extremes() {
        assert_eq!(pose_error_auc(&[0.0, 0.0, 0.0], &[5.0, 10.0]).unwrap(), vec![1.0, 1.0]);
        let all_failed = vec![f64::INFINITY; 4];
        assert_eq!(pose_error_auc(&all_failed, &[5.0, 10.0, 20.0]).unwrap(), vec![0.0, 0.0, 0.0]);
        assert!(pose_error_auc(&[], &[5.0]).is_err());
    }

    #[test]
    fn pose_auc_matches_the_hand_trapezoid() {
        let auc = pose_error_auc(&[1.0, 3.0, 30.0], &[5.0]).unwrap();
        assert_relative_eq!(auc[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn pose_auc_never_improves_when_an_error_grows() {
        let mut r = rng(18);
        for _ in 0..50 {
            let errors: Vec<f64> = (0..12).map(|_| r.gen::<f64>() * 30.0).collect();
            let base = pose_error_auc(&errors, &[5.0, 10.0, 20.0]).unwrap();
            let mut worse = errors.clone();
            let k = r.gen_range(0..worse.len());
            worse[k] += r.gen::<f64>() * 20.0;
            let bumped = pose_error_auc(&worse, &[5.0, 10.0, 20.0]).unwrap();
            for (b, w) in base.iter().zip(&bumped) {
                assert!(w <= b, "AUC rose from {b} to {w}");
            }
        }
    }

    #[test]
    fn point_motions_average_the_four_nearest_matches() {
        // Matched keypoints on a grid, all displaced by (10, 0).
        let n = 25;
        let kp_a: Vec<(f64, f64)> = (0..n).map(|i| ((i / 5) as f64 * 20.0, (i % 5) as f64 * 20.0)).collect();
        let kp_b: Vec<(f64, f64)> = kp_a.iter().map(|&(r, c)| (r + 10.0, c)).collect();
        let ms = MatchSet {
            matches: (0..n).map(|i| (i, i, 1.0)).collect(),
            keypoints_a: kp_a,
            keypoints_b: kp_b,
        };
        let motions = point_motions(&ms, &[(40.0, 40.0), (0.0, 0.0)]);
        for m in motions {
            let (mr, mc) = m.unwrap();
            assert_relative_eq!(mr, 10.0, epsilon = 1e-12);
            assert_relative_eq!(mc, 0.0, epsilon = 1e-12);
        }

        let thin = MatchSet {
            matches: vec![(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)],
            keypoints_a: ms.keypoints_a.clone(),
            keypoints_b: ms.keypoints_b.clone(),
        };
        assert!(point_motions(&thin, &[(40.0, 40.0)])[0].is_none());
    }

    #[test]
    fn averaged_noise_shrinks_by_half() {
        // Keypoint displacements (10, 0) + N(0, sigma^2): the 4-average
        // leaves noise of scale sigma/2, so the height fraction lands
        // near sigma / (2 * height) on average.
        let sigma = 2.0;
        let height = 480.0;
        let mut r = rng(19);
        let mut total = 0.0;
        let trials = 200;
        for _ in 0..trials {
            let n = 36;
            let kp_a: Vec<(f64, f64)> =
                (0..n).map(|i| ((i / 6) as f64 * 30.0, (i % 6) as f64 * 30.0)).collect();
            let kp_b: Vec<(f64, f64)> = kp_a
                .iter()
                .map(|&(row, col)| {
                    let gauss = |r: &mut ChaCha8Rng| {
                        let (u1, u2) = (r.gen::<f64>().max(1e-12), r.gen::<f64>());
                        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                    };
                    (row + 10.0 + sigma * gauss(&mut r), col + sigma * gauss(&mut r))
                })
                .collect();
            let ms = MatchSet {
                matches: (0..n).map(|i| (i, i, 1.0)).collect(),
                keypoints_a: kp_a,
                keypoints_b: kp_b,
            };
            let (mr, mc) = point_motions(&ms, &[(75.0, 75.0)])[0].unwrap();
            total += ((mr - 10.0).powi(2) + mc.powi(2)).sqrt() / height;
        }
        let mean = total / trials as f64;
        let scale = sigma / (2.0 * height);
        assert!(mean > scale / 2.0 && mean < scale * 2.0, "mean {mean} vs scale {scale}");
    }

    #[test]
    fn a_static_scene_tracks_with_zero_error() {
        let model = toy_model();
        let image = synth_corpus(21, 1, 30).remove(0);
        let points = vec![Some((15.0, 15.0)), Some((14.0, 16.0))];
        let frames = vec![
            TrackingFrame { image: image.clone(), points: points.clone() },
            TrackingFrame { image: image.clone(), points: points.clone() },
            TrackingFrame { image, points },
        ];
        let errors = tracking_error(&model, &frames, 60).unwrap();
        for e in errors {
            assert_eq!(e.unwrap(), 0.0);
        }
    }

    #[test]
    fn tracking_rejects_unlabeled_first_frames() {
        let model = toy_model();
        let image = synth_corpus(22, 1, 30).remove(0);
        let frames =
            vec![TrackingFrame { image, points: vec![Some((5.0, 5.0)), None] }];
        assert!(matches!(
            tracking_error(&model, &frames, 10),
            Err(MatchEvalError::Contract(_))
        ));
    }
}
