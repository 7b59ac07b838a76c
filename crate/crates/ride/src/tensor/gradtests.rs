//! Finite-difference checks for every differentiable op, in `f64`.
//!
//! Each test builds a small scalar loss through one op (plus whatever
//! glue it needs) and lets [`check::check_gradients`] sweep every
//! parameter element. Inputs avoid kinks: relu inputs stay away from 0,
//! max inputs are well separated, ln inputs sit above the clamp floor.

use std::rc::Rc;

use super::check::{check_gradients, GradCheck};
use super::{LinMap, Tensor};

fn p(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
    Tensor::param(shape, vals.to_vec()).unwrap()
}

/// Deterministic values in roughly [-1, 1] that avoid exact ties.
fn gen(n: usize, seed: u64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = (i as u64 + 1).wrapping_mul(6364136223846793005).wrapping_add(seed);
            ((x >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0 + 1e-3 * (i as f64)
        })
        .collect()
}

fn run(params: &[Tensor<f64>], f: impl FnMut() -> Tensor<f64>) {
    check_gradients(params, f, GradCheck::default()).unwrap();
}

#[test]
fn add_sub_mul_neg() {
    let a = p(&[2, 3], &gen(6, 1));
    let b = p(&[2, 3], &gen(6, 2));
    let (ac, bc) = (a.clone(), b.clone());
    run(&[a, b], move || {
        let s = ac.add(&bc).unwrap().mul(&ac.sub(&bc).unwrap()).unwrap();
        s.neg().mul(&ac).unwrap().sum_all()
    });
}

#[test]
fn scalar_ops_and_mean() {
    let a = p(&[5], &gen(5, 3));
    let ac = a.clone();
    run(&[a], move || ac.mul_scalar(2.5).add_scalar(-0.75).one_minus().mean_all());
}

#[test]
fn relu_away_from_kink() {
    let vals: Vec<f64> = gen(8, 4).iter().map(|v| v + v.signum() * 0.2).collect();
    let a = p(&[8], &vals);
    let ac = a.clone();
    run(&[a], move || ac.relu().mul(&ac).unwrap().sum_all());
}

#[test]
fn sigmoid_exp_ln() {
    let a = p(&[6], &gen(6, 5));
    let ac = a.clone();
    run(&[a], move || {
        let s = ac.sigmoid();
        let e = ac.mul_scalar(0.3).exp();
        // Sigmoid output is in (0, 1), safely above the ln floor.
        s.ln_clamped(1e-12).mul(&e).unwrap().sum_all()
    });
}

#[test]
fn ln_clamp_kills_gradient_below_floor() {
    let a = p(&[2], &[0.5, 1e-15]);
    let ac = a.clone();
    let loss = ac.ln_clamped(1e-12).sum_all();
    loss.backward().unwrap();
    let g = a.grad().unwrap();
    assert!((g[0] - 2.0).abs() < 1e-12);
    assert_eq!(g[1], 0.0);
}

#[test]
fn axis_reductions() {
    let a = p(&[3, 4], &gen(12, 6));
    let ac = a.clone();
    run(&[a.clone()], move || ac.sum_axis(0).unwrap().mul_scalar(0.5).sum_all());
    let ac = a.clone();
    run(&[a.clone()], move || ac.sum_axis(1).unwrap().sigmoid().sum_all());
    let ac = a.clone();
    run(&[a], move || ac.mean_axis(1).unwrap().mul_scalar(3.0).sum_all());
}

#[test]
fn max_axis_routes_to_winner() {
    // Well-separated values so the argmax is stable under the FD step.
    let a = p(&[2, 3], &[1.0, 5.0, 2.0, 7.0, 3.0, 6.0]);
    let ac = a.clone();
    run(&[a.clone()], move || ac.max_axis(1).unwrap().mul_scalar(2.0).sum_all());
    let ac = a.clone();
    run(&[a], move || ac.max_axis(0).unwrap().sigmoid().sum_all());
}

#[test]
fn softmax_last_and_middle_axis() {
    let a = p(&[2, 4], &gen(8, 7));
    let w = p(&[2, 4], &gen(8, 8));
    let (ac, wc) = (a.clone(), w.clone());
    run(&[a, w], move || ac.softmax(1).unwrap().mul(&wc).unwrap().sum_all());

    let b = p(&[2, 3, 2], &gen(12, 9));
    let u = p(&[2, 3, 2], &gen(12, 10));
    let (bc, uc) = (b.clone(), u.clone());
    run(&[b, u], move || bc.softmax(1).unwrap().mul(&uc).unwrap().sum_all());
}

#[test]
fn l2_normalize_gradient() {
    let a = p(&[3, 4], &gen(12, 11));
    let w = p(&[3, 4], &gen(12, 12));
    let (ac, wc) = (a.clone(), w.clone());
    run(&[a, w], move || ac.l2_normalize(1).unwrap().mul(&wc).unwrap().sum_all());
    let b = p(&[2, 3, 2], &gen(12, 13));
    let bc = b.clone();
    run(&[b], move || bc.l2_normalize(1).unwrap().sum_all());
}

#[test]
fn matmul_all_variants() {
    let a = p(&[3, 4], &gen(12, 14));
    let b = p(&[4, 2], &gen(8, 15));
    let (ac, bc) = (a.clone(), b.clone());
    run(&[a, b], move || ac.matmul(&bc).unwrap().sigmoid().sum_all());

    let a = p(&[3, 4], &gen(12, 16));
    let bt = p(&[2, 4], &gen(8, 17));
    let (ac, bc) = (a.clone(), bt.clone());
    run(&[a, bt], move || ac.matmul_nt(&bc).unwrap().sigmoid().sum_all());

    let at = p(&[4, 3], &gen(12, 18));
    let b = p(&[4, 2], &gen(8, 19));
    let (ac, bc) = (at.clone(), b.clone());
    run(&[at, b], move || ac.matmul_tn(&bc).unwrap().sigmoid().sum_all());
}

#[test]
fn conv2d_input_and_kernel() {
    let x = p(&[2, 2, 6, 5], &gen(120, 20));
    let k = p(&[3, 2, 3, 3], &gen(54, 21));
    let (xc, kc) = (x.clone(), k.clone());
    run(&[x, k], move || xc.conv2d_valid(&kc).unwrap().sigmoid().sum_all());
}

#[test]
fn batch_norm_all_three_inputs() {
    let x = p(&[3, 2, 4], &gen(24, 22));
    let gamma = p(&[2], &[1.3, 0.7]);
    let beta = p(&[2], &[0.1, -0.2]);
    let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
    run(&[x, gamma, beta], move || {
        let (y, _, _) = xc.batch_norm_train(&gc, &bc, 1e-5).unwrap();
        y.sigmoid().sum_all()
    });
}

#[test]
fn affine_channels_all_three_inputs() {
    let x = p(&[2, 3, 4], &gen(24, 23));
    let scale = p(&[3], &[0.9, -1.1, 0.4]);
    let shift = p(&[3], &[0.05, 0.2, -0.3]);
    let (xc, sc, hc) = (x.clone(), scale.clone(), shift.clone());
    run(&[x, scale, shift], move || xc.affine_channels(&sc, &hc).unwrap().sigmoid().sum_all());
}

#[test]
fn index_select_with_duplicates() {
    let x = p(&[4, 3], &gen(12, 24));
    let xc = x.clone();
    run(&[x], move || {
        xc.index_select(0, &[2, 0, 2, 3]).unwrap().sigmoid().sum_all()
    });
}

#[test]
fn group_shift_per_position() {
    let x = p(&[2, 4, 3], &gen(24, 25));
    let xc = x.clone();
    let w = p(&[2, 4, 3], &gen(24, 26));
    let wc = w.clone();
    run(&[x, w], move || {
        xc.group_shift(&[1, -2, 7]).unwrap().mul(&wc).unwrap().sum_all()
    });
}

#[test]
fn lin_map_apply() {
    let trip: Vec<(usize, usize, f64)> =
        (0..30).map(|i| ((i * 3) % 10, (i * 7) % 12, ((i + 1) as f64 * 0.61).sin())).collect();
    let map = Rc::new(LinMap::from_triplets(12, 10, &trip));
    let x = p(&[3, 4], &gen(12, 27));
    let xc = x.clone();
    run(&[x], move || {
        xc.apply_lin_map(&map, &[10]).unwrap().sigmoid().sum_all()
    });
}

#[test]
fn reshape_passthrough() {
    let x = p(&[2, 6], &gen(12, 28));
    let xc = x.clone();
    run(&[x], move || xc.reshape(&[3, 4]).unwrap().softmax(1).unwrap().sum_all());
}

#[test]
fn composite_network_like_chain() {
    // Conv, batch norm, relu, reshape, matmul, softmax, nll: the shape of
    // a real forward pass, end to end through every backward path.
    let x = p(&[2, 1, 6, 6], &gen(72, 29));
    let k = p(&[3, 1, 3, 3], &gen(27, 30));
    let gamma = p(&[3], &[1.0, 0.9, 1.1]);
    let beta = p(&[3], &[0.0, 0.1, -0.1]);
    let w = p(&[16, 5], &gen(80, 31));
    let params = [x.clone(), k.clone(), gamma.clone(), beta.clone(), w.clone()];
    run(&params, move || {
        let c = x.conv2d_valid(&k).unwrap();
        let (n, _, _) = c.reshape(&[2, 3, 16]).unwrap().batch_norm_train(&gamma, &beta, 1e-5).unwrap();
        let h = n.relu().mean_axis(1).unwrap();
        let logits = h.matmul(&w).unwrap();
        let lp = logits.softmax(1).unwrap().ln_clamped(1e-12);
        lp.index_select(1, &[2]).unwrap().sum_all().neg()
    });
}
