//! Training objectives.
//!
//! Three terms supervise the network from a warped image pair and its
//! ground-truth correspondences: an orientation loss pulling each
//! pixel's histogram toward its counterpart after undoing the known
//! relative rotation, a description loss scoring ground-truth pairs
//! under a dual-softmax over sampled descriptors, and a keypoint loss
//! whose binary targets are bootstrapped from descriptor mutual nearest
//! neighbors (labels detached, everything else differentiable). The
//! total weighs the orientation term by `lambda_o`.
//!
//! All logs are clamped at 1e-12 so saturated softmaxes cannot produce
//! infinities.

use thiserror::Error;

use crate::equivariant::{cyclic_shift, EquivariantError, ShiftOffsets};
use crate::model::{
    invariant_descriptors, DescriptorMap, KeypointScoreMap, ModelError, OrientationHistogram,
    RideOutput,
};
use crate::selfsup::CorrespondenceSet;
use crate::tensor::{Scalar, Tensor, TensorError};

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Equivariant(#[from] EquivariantError),
}

fn contract(msg: impl Into<String>) -> LossError {
    LossError::Contract(msg.into())
}

/// Dense descriptor dot products `S(i, j) = D_A(i) . D_B(j)` with the
/// softmax temperature they will be scaled by.
pub struct ScoreMatrix<F: Scalar> {
    values: Tensor<F>,
    temperature: f64,
}

impl<F: Scalar> ScoreMatrix<F> {
    pub fn new(values: Tensor<F>, temperature: f64) -> Result<Self, LossError> {
        if values.rank() != 2 {
            return Err(contract(format!("score matrix wants [n_a, n_b], got {:?}", values.shape())));
        }
        if !(temperature > 0.0) {
            return Err(contract(format!("temperature must be positive, got {temperature}")));
        }
        Ok(ScoreMatrix { values, temperature })
    }

    /// `S = D_A^T D_B` from `[dim, n_a]` and `[dim, n_b]` column sets.
    pub fn from_descriptors(
        d_a: &Tensor<F>,
        d_b: &Tensor<F>,
        temperature: f64,
    ) -> Result<Self, LossError> {
        let (sa, sb) = (d_a.shape(), d_b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(contract(format!(
                "descriptor sets want matching [dim, n] shapes, got {sa:?} and {sb:?}"
            )));
        }
        ScoreMatrix::new(d_a.matmul_tn(d_b)?, temperature)
    }

    pub fn values(&self) -> &Tensor<F> {
        &self.values
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

/// Soft mutual matching probabilities: the elementwise product of the
/// row-wise and column-wise softmaxes of `S / t`.
pub fn dual_softmax<F: Scalar>(s: &ScoreMatrix<F>) -> Result<Tensor<F>, LossError> {
    let scaled = s.values.mul_scalar(F::from_f64(1.0 / s.temperature));
    Ok(scaled.softmax(1)?.mul(&scaled.softmax(0)?)?)
}

/// Mean negative log dual-softmax probability of the given index pairs.
/// The descriptor matching objective once scores are built.
pub fn dual_softmax_nll<F: Scalar>(
    s: &ScoreMatrix<F>,
    pairs: &[(usize, usize)],
) -> Result<Tensor<F>, LossError> {
    if pairs.is_empty() {
        return Err(contract("dual-softmax NLL of an empty pair set"));
    }
    let shape = s.values.shape().to_vec();
    let (n_a, n_b) = (shape[0], shape[1]);
    let mut flat_idx = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        if i >= n_a || j >= n_b {
            return Err(contract(format!("pair ({i}, {j}) outside a {n_a}x{n_b} score matrix")));
        }
        flat_idx.push(i * n_b + j);
    }
    let p = dual_softmax(s)?;
    let picked = p.reshape(&[n_a * n_b])?.index_select(0, &flat_idx)?;
    Ok(picked.ln_clamped(F::from_f64(LOG_FLOOR)).mean_all().neg())
}

fn split_pixels(corr: &CorrespondenceSet) -> (Vec<usize>, Vec<usize>) {
    corr.pairs.iter().copied().unzip()
}

/// Histogram alignment loss: cross-entropy from A's per-pixel softmax
/// histogram to B's, after shifting B's histogram by minus the
/// ground-truth orientation. Raw histograms are shifted before their
/// softmax, which makes the shift-consistency invariant hold bit-exactly
/// (the permutations compose away before any float math).
pub fn orientation_loss<F: Scalar>(
    v_a: &OrientationHistogram<F>,
    v_b: &OrientationHistogram<F>,
    corr: &CorrespondenceSet,
) -> Result<Tensor<F>, LossError> {
    if corr.pairs.is_empty() {
        return Err(contract("orientation loss of an empty correspondence set"));
    }
    let (sa, sb) = (v_a.values().shape().to_vec(), v_b.values().shape().to_vec());
    if sa[0] != 1 || sb[0] != 1 {
        return Err(contract(format!("orientation loss wants batch 1, got {} and {}", sa[0], sb[0])));
    }
    if sa[1] != sb[1] {
        return Err(contract(format!("group orders differ: {} vs {}", sa[1], sb[1])));
    }
    let g = sa[1];
    let (pix_a, pix_b) = split_pixels(corr);
    let select = |v: &Tensor<F>, s: &[usize], pix: &[usize]| -> Result<Tensor<F>, LossError> {
        let p = s[2] * s[3];
        if let Some(&bad) = pix.iter().find(|&&i| i >= p) {
            return Err(contract(format!("pixel {bad} outside a {p}-pixel grid")));
        }
        Ok(v.reshape(&[g, p])?.index_select(1, pix)?)
    };
    let a_sel = select(v_a.values(), &sa, &pix_a)?;
    let a = if v_a.is_normalized() { a_sel } else { a_sel.softmax(0)? };
    let b_sel = select(v_b.values(), &sb, &pix_b)?;
    let b_aligned = cyclic_shift(&b_sel, 0, ShiftOffsets::Scalar(-(corr.gt_orientation_index as i64)))?;
    let b = if v_b.is_normalized() { b_aligned } else { b_aligned.softmax(0)? };
    let m = corr.pairs.len();
    let sum = a.mul(&b.ln_clamped(F::from_f64(LOG_FLOOR)))?.sum_all();
    Ok(sum.mul_scalar(F::from_f64(-1.0 / (m * g) as f64)))
}

/// Descriptor matching loss: mean NLL of the ground-truth pairs under
/// the dual softmax over descriptors sampled at correspondence pixels.
pub fn description_loss<F: Scalar>(
    d_a: &DescriptorMap<F>,
    d_b: &DescriptorMap<F>,
    corr: &CorrespondenceSet,
    temperature: f64,
) -> Result<Tensor<F>, LossError> {
    if corr.pairs.is_empty() {
        return Err(contract("description loss of an empty correspondence set"));
    }
    let (pix_a, pix_b) = split_pixels(corr);
    let a = d_a.sample_pixels(&pix_a)?;
    let b = d_b.sample_pixels(&pix_b)?;
    let s = ScoreMatrix::from_descriptors(&a, &b, temperature)?;
    let diagonal: Vec<(usize, usize)> = (0..corr.pairs.len()).map(|i| (i, i)).collect();
    dual_softmax_nll(&s, &diagonal)
}

/// Streaming no-graph equivalent of [`description_loss`] for large pixel
/// sets: log-probabilities via per-pair row and column log-sum-exp,
/// never materializing the full matrix. Matches the monolithic value
/// within float reassociation error.
pub fn description_loss_blockwise<F: Scalar>(
    d_a: &DescriptorMap<F>,
    d_b: &DescriptorMap<F>,
    corr: &CorrespondenceSet,
    temperature: f64,
    block: usize,
) -> Result<f64, LossError> {
    if corr.pairs.is_empty() {
        return Err(contract("description loss of an empty correspondence set"));
    }
    if block == 0 {
        return Err(contract("block size must be positive"));
    }
    if !(temperature > 0.0) {
        return Err(contract(format!("temperature must be positive, got {temperature}")));
    }
    let (pix_a, pix_b) = split_pixels(corr);
    let a = d_a.sample_pixels(&pix_a)?.detach();
    let b = d_b.sample_pixels(&pix_b)?.detach();
    let dim = a.shape()[0];
    let m = corr.pairs.len();
    let col = |t: &Tensor<F>, j: usize| -> Vec<f64> {
        let data = t.data();
        (0..dim).map(|d| data[d * m + j].to_f64()).collect()
    };
    let cols_a: Vec<Vec<f64>> = (0..m).map(|i| col(&a, i)).collect();
    let cols_b: Vec<Vec<f64>> = (0..m).map(|j| col(&b, j)).collect();
    let score = |i: usize, j: usize| -> f64 {
        cols_a[i].iter().zip(&cols_b[j]).map(|(x, y)| x * y).sum::<f64>() / temperature
    };

    // Streaming log-sum-exp per row and per column over score blocks.
    let mut row_max = vec![f64::NEG_INFINITY; m];
    let mut row_acc = vec![0.0f64; m];
    let mut col_max = vec![f64::NEG_INFINITY; m];
    let mut col_acc = vec![0.0f64; m];
    let fold = |mx: &mut f64, acc: &mut f64, v: f64| {
        if v > *mx {
            *acc = *acc * (*mx - v).exp() + 1.0;
            *mx = v;
        } else {
            *acc += (v - *mx).exp();
        }
    };
    for i0 in (0..m).step_by(block) {
        for j0 in (0..m).step_by(block) {
            for i in i0..(i0 + block).min(m) {
                for j in j0..(j0 + block).min(m) {
                    let v = score(i, j);
                    fold(&mut row_max[i], &mut row_acc[i], v);
                    fold(&mut col_max[j], &mut col_acc[j], v);
                }
            }
        }
    }
    let mut total = 0.0f64;
    for i in 0..m {
        let s_ii = score(i, i);
        let log_p = (s_ii - row_max[i] - row_acc[i].ln()) + (s_ii - col_max[i] - col_acc[i].ln());
        total += log_p.max(LOG_FLOOR.ln());
    }
    Ok(-total / m as f64)
}

/// Bootstrapped keypoint targets: a ground-truth pair is a keypoint in
/// both images iff its descriptors are mutual nearest neighbors within
/// the sampled sets (raw dot products, ties toward the smaller index).
/// Returns `[1, H', W']` binary maps carrying no gradient.
pub fn keypoint_labels<F: Scalar>(
    d_a: &DescriptorMap<F>,
    d_b: &DescriptorMap<F>,
    corr: &CorrespondenceSet,
) -> Result<(Tensor<F>, Tensor<F>), LossError> {
    let (pix_a, pix_b) = split_pixels(corr);
    let shape_a = [1, d_a.height(), d_a.width()];
    let shape_b = [1, d_b.height(), d_b.width()];
    let m = corr.pairs.len();
    let mut map_a = vec![F::zero(); shape_a.iter().product()];
    let mut map_b = vec![F::zero(); shape_b.iter().product()];
    if m > 0 {
        let a = d_a.sample_pixels(&pix_a)?.detach();
        let b = d_b.sample_pixels(&pix_b)?.detach();
        let s = a.matmul_tn(&b)?;
        let data = s.data();
        let row_best: Vec<usize> = (0..m)
            .map(|i| {
                (0..m).fold(0usize, |best, j| {
                    if data[i * m + j].to_f64() > data[i * m + best].to_f64() { j } else { best }
                })
            })
            .collect();
        let col_best: Vec<usize> = (0..m)
            .map(|j| {
                (0..m).fold(0usize, |best, i| {
                    if data[i * m + j].to_f64() > data[best * m + j].to_f64() { i } else { best }
                })
            })
            .collect();
        for i in 0..m {
            if row_best[i] == i && col_best[i] == i {
                map_a[pix_a[i]] = F::one();
                map_b[pix_b[i]] = F::one();
            }
        }
    }
    Ok((Tensor::from_vec(&shape_a, map_a)?, Tensor::from_vec(&shape_b, map_b)?))
}

/// Binary cross entropy against the bootstrapped labels, averaged over
/// pixels per image and summed over the two images.
pub fn keypoint_loss<F: Scalar>(
    k_a: &KeypointScoreMap<F>,
    k_b: &KeypointScoreMap<F>,
    labels_a: &Tensor<F>,
    labels_b: &Tensor<F>,
) -> Result<Tensor<F>, LossError> {
    let bce = |k: &KeypointScoreMap<F>, y: &Tensor<F>| -> Result<Tensor<F>, LossError> {
        if k.values().shape() != y.shape() {
            return Err(contract(format!(
                "score map {:?} and labels {:?} differ",
                k.values().shape(),
                y.shape()
            )));
        }
        let floor = F::from_f64(LOG_FLOOR);
        let hit = y.mul(&k.values().ln_clamped(floor))?;
        let miss = y.one_minus().mul(&k.values().one_minus().ln_clamped(floor))?;
        Ok(hit.add(&miss)?.mean_all().neg())
    };
    Ok(bce(k_a, labels_a)?.add(&bce(k_b, labels_b)?)?)
}

/// The three losses and their weighted sum, all scalar graph nodes.
pub struct LossBreakdown<F: Scalar> {
    pub l_orientation: Tensor<F>,
    pub l_description: Tensor<F>,
    pub l_keypoint: Tensor<F>,
    pub total: Tensor<F>,
    pub lambda_o: f64,
}

fn combine<F: Scalar>(
    l_orientation: Tensor<F>,
    l_description: Tensor<F>,
    l_keypoint: Tensor<F>,
    lambda_o: f64,
) -> Result<LossBreakdown<F>, LossError> {
    let total = l_orientation
        .mul_scalar(F::from_f64(lambda_o))
        .add(&l_description)?
        .add(&l_keypoint)?;
    Ok(LossBreakdown { l_orientation, l_description, l_keypoint, total, lambda_o })
}

/// Builds every term from a pair's forward outputs. Descriptors are
/// aligned with the ground-truth relative orientation (A by zero, B by
/// the correspondence label); the histogram argmax is inference-only.
pub fn total_loss<F: Scalar>(
    out_a: &RideOutput<F>,
    out_b: &RideOutput<F>,
    corr: &CorrespondenceSet,
    lambda_o: f64,
    temperature: f64,
) -> Result<LossBreakdown<F>, LossError> {
    let l_o = orientation_loss(&out_a.v, &out_b.v, corr)?;
    let p_a = out_a.f_d.height() * out_a.f_d.width();
    let p_b = out_b.f_d.height() * out_b.f_d.width();
    let d_a = invariant_descriptors(&out_a.f_d, &vec![0; p_a])?;
    let d_b = invariant_descriptors(&out_b.f_d, &vec![corr.gt_orientation_index; p_b])?;
    let l_d = description_loss(&d_a, &d_b, corr, temperature)?;
    let (labels_a, labels_b) = keypoint_labels(&d_a, &d_b, corr)?;
    let l_k = keypoint_loss(&out_a.k, &out_b.k, &labels_a, &labels_b)?;
    combine(l_o, l_d, l_k, lambda_o)
}
