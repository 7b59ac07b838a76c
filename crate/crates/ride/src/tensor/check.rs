//! Finite-difference gradient checking.
//!
//! The checker perturbs every element of every listed parameter with a
//! central difference and compares against the analytic gradient from one
//! backward pass. Run it on `f64` tensors: the default step of 1e-5 loses
//! too much to rounding in `f32`.

use super::{Scalar, Tensor};

/// Tolerances and step for [`check_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Accept when `|a - n| <= abs_tol + rel_tol * max(|a|, |n|)`.
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-5, rel_tol: 1e-4, abs_tol: 1e-7 }
    }
}

/// Worst disagreement found by [`check_gradients`].
#[derive(Debug)]
pub struct GradMismatch {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl std::fmt::Display for GradMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "param {} element {}: analytic {:.9e} vs numeric {:.9e}",
            self.param, self.index, self.analytic, self.numeric
        )
    }
}

/// Compares analytic gradients of `loss_fn` against central differences
/// for every element of `params`. `loss_fn` must rebuild the graph from
/// the current parameter values on each call.
pub fn check_gradients<F, L>(params: &[Tensor<F>], mut loss_fn: L, cfg: GradCheck) -> Result<(), GradMismatch>
where
    F: Scalar,
    L: FnMut() -> Tensor<F>,
{
    let analytic = analytic_gradients(params, &mut loss_fn);
    let h = F::from_f64(cfg.step);
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.numel() {
            let numeric = central_difference(p, i, h, cfg.step, &mut loss_fn);
            let a = analytic[pi][i];
            let tol = cfg.abs_tol + cfg.rel_tol * a.abs().max(numeric.abs());
            if (a - numeric).abs() > tol {
                return Err(GradMismatch { param: pi, index: i, analytic: a, numeric });
            }
        }
    }
    Ok(())
}

/// Outcome of [`gradient_report`]: how many elements were checked, how
/// many sat within tolerance, and the single worst disagreement.
#[derive(Debug)]
pub struct GradReport {
    pub checked: usize,
    pub within: usize,
    pub worst: Option<GradMismatch>,
}

impl GradReport {
    /// Fraction of elements within tolerance, 1.0 when nothing was
    /// checked.
    pub fn fraction_ok(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.within as f64 / self.checked as f64
        }
    }
}

/// Like [`check_gradients`] but exhaustive: visits every element and
/// tallies agreement instead of stopping at the first mismatch.
pub fn gradient_report<F, L>(params: &[Tensor<F>], mut loss_fn: L, cfg: GradCheck) -> GradReport
where
    F: Scalar,
    L: FnMut() -> Tensor<F>,
{
    let analytic = analytic_gradients(params, &mut loss_fn);
    let h = F::from_f64(cfg.step);
    let mut report = GradReport { checked: 0, within: 0, worst: None };
    let mut worst_gap = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.numel() {
            let numeric = central_difference(p, i, h, cfg.step, &mut loss_fn);
            let a = analytic[pi][i];
            let tol = cfg.abs_tol + cfg.rel_tol * a.abs().max(numeric.abs());
            let gap = (a - numeric).abs();
            report.checked += 1;
            if gap <= tol {
                report.within += 1;
            }
            // Worst is judged by overshoot beyond tolerance so a large
            // pair of agreeing gradients does not mask a real mismatch.
            if gap - tol > worst_gap {
                worst_gap = gap - tol;
                report.worst = Some(GradMismatch { param: pi, index: i, analytic: a, numeric });
            }
        }
    }
    report
}

fn analytic_gradients<F, L>(params: &[Tensor<F>], loss_fn: &mut L) -> Vec<Vec<f64>>
where
    F: Scalar,
    L: FnMut() -> Tensor<F>,
{
    for p in params {
        p.zero_grad();
    }
    let loss = loss_fn();
    loss.backward().expect("loss must be scalar");
    params
        .iter()
        .map(|p| {
            p.grad()
                .map(|g| g.iter().map(|&v| v.to_f64()).collect())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect()
}

fn central_difference<F, L>(p: &Tensor<F>, i: usize, h: F, step: f64, loss_fn: &mut L) -> f64
where
    F: Scalar,
    L: FnMut() -> Tensor<F>,
{
    let orig = p.data()[i];
    p.data_mut()[i] = orig + h;
    let up = loss_fn().item().to_f64();
    p.data_mut()[i] = orig - h;
    let down = loss_fn().item().to_f64();
    p.data_mut()[i] = orig;
    (up - down) / (2.0 * step)
}
