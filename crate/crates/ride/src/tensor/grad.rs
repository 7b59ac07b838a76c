//! Vector-Jacobian products for every recorded op.
//!
//! `accumulate_vjps` takes a node, the gradient flowing into it, and the
//! map of in-flight gradients keyed by tensor id. Parent contributions
//! always accumulate in parent order, so repeated runs see identical
//! floating-point operation order.

use std::collections::HashMap;

use super::gemm;
use super::{axis_split, Op, Scalar, Tensor};

fn entry<'a, F: Scalar>(flows: &'a mut HashMap<u64, Vec<F>>, p: &Tensor<F>) -> &'a mut Vec<F> {
    flows.entry(p.id()).or_insert_with(|| vec![F::zero(); p.numel()])
}

pub(crate) fn accumulate_vjps<F: Scalar>(
    node: &Tensor<F>,
    g: &[F],
    flows: &mut HashMap<u64, Vec<F>>,
) {
    let parents = node.parents();
    let op = node.op().expect("accumulate_vjps needs an op node");
    match op {
        Op::Add => {
            for p in parents {
                if p.tracked() {
                    for (d, &gv) in entry(flows, p).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
        }
        Op::Sub => {
            if parents[0].tracked() {
                for (d, &gv) in entry(flows, &parents[0]).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if parents[1].tracked() {
                for (d, &gv) in entry(flows, &parents[1]).iter_mut().zip(g) {
                    *d -= gv;
                }
            }
        }
        Op::Mul => {
            if parents[0].tracked() {
                let b = parents[1].data();
                let d = entry(flows, &parents[0]);
                for i in 0..g.len() {
                    d[i] += g[i] * b[i];
                }
            }
            if parents[1].tracked() {
                let a = parents[0].data();
                let d = entry(flows, &parents[1]);
                for i in 0..g.len() {
                    d[i] += g[i] * a[i];
                }
            }
        }
        Op::Neg => {
            if parents[0].tracked() {
                for (d, &gv) in entry(flows, &parents[0]).iter_mut().zip(g) {
                    *d -= gv;
                }
            }
        }
        Op::AddScalar => {
            if parents[0].tracked() {
                for (d, &gv) in entry(flows, &parents[0]).iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::MulScalar(v) => {
            if parents[0].tracked() {
                let v = *v;
                for (d, &gv) in entry(flows, &parents[0]).iter_mut().zip(g) {
                    *d += gv * v;
                }
            }
        }
        Op::Relu => {
            if parents[0].tracked() {
                let x = parents[0].data();
                let d = entry(flows, &parents[0]);
                for i in 0..g.len() {
                    if x[i] > F::zero() {
                        d[i] += g[i];
                    }
                }
            }
        }
        Op::Sigmoid => {
            if parents[0].tracked() {
                let y = node.data();
                let d = entry(flows, &parents[0]);
                for i in 0..g.len() {
                    d[i] += g[i] * y[i] * (F::one() - y[i]);
                }
            }
        }
        Op::Exp => {
            if parents[0].tracked() {
                let y = node.data();
                let d = entry(flows, &parents[0]);
                for i in 0..g.len() {
                    d[i] += g[i] * y[i];
                }
            }
        }
        Op::LnClamped(floor) => {
            if parents[0].tracked() {
                let floor = *floor;
                let x = parents[0].data();
                let d = entry(flows, &parents[0]);
                for i in 0..g.len() {
                    if x[i] > floor {
                        d[i] += g[i] / x[i];
                    }
                }
            }
        }
        Op::SumAll => {
            if parents[0].tracked() {
                let gv = g[0];
                for d in entry(flows, &parents[0]).iter_mut() {
                    *d += gv;
                }
            }
        }
        Op::MeanAll => {
            if parents[0].tracked() {
                let gv = g[0] / F::from_f64(parents[0].numel() as f64);
                for d in entry(flows, &parents[0]).iter_mut() {
                    *d += gv;
                }
            }
        }
        Op::SumAxis(axis) => {
            if parents[0].tracked() {
                let (outer, len, inner) = axis_split(parents[0].shape(), *axis);
                let d = entry(flows, &parents[0]);
                for o in 0..outer {
                    let gsrc = &g[o * inner..(o + 1) * inner];
                    for i in 0..len {
                        let dst = &mut d[(o * len + i) * inner..(o * len + i + 1) * inner];
                        for (dv, &gv) in dst.iter_mut().zip(gsrc) {
                            *dv += gv;
                        }
                    }
                }
            }
        }
        Op::MeanAxis(axis) => {
            if parents[0].tracked() {
                let (outer, len, inner) = axis_split(parents[0].shape(), *axis);
                let scale = F::one() / F::from_f64(len as f64);
                let d = entry(flows, &parents[0]);
                for o in 0..outer {
                    let gsrc = &g[o * inner..(o + 1) * inner];
                    for i in 0..len {
                        let dst = &mut d[(o * len + i) * inner..(o * len + i + 1) * inner];
                        for (dv, &gv) in dst.iter_mut().zip(gsrc) {
                            *dv += gv * scale;
                        }
                    }
                }
            }
        }
        Op::MaxAxis { axis, argmax } => {
            if parents[0].tracked() {
                let (outer, _len, inner) = axis_split(parents[0].shape(), *axis);
                let len = parents[0].shape()[*axis];
                let d = entry(flows, &parents[0]);
                for o in 0..outer {
                    for j in 0..inner {
                        let win = argmax[o * inner + j] as usize;
                        debug_assert!(win < len);
                        d[(o * len + win) * inner + j] += g[o * inner + j];
                    }
                }
            }
        }
        Op::Softmax { axis } => {
            if parents[0].tracked() {
                let (outer, len, inner) = axis_split(parents[0].shape(), *axis);
                let y = node.data();
                let d = entry(flows, &parents[0]);
                let mut dots = vec![F::zero(); inner];
                for o in 0..outer {
                    let base = o * len * inner;
                    dots.fill(F::zero());
                    for i in 0..len {
                        let off = base + i * inner;
                        for j in 0..inner {
                            dots[j] += g[off + j] * y[off + j];
                        }
                    }
                    for i in 0..len {
                        let off = base + i * inner;
                        for j in 0..inner {
                            d[off + j] += y[off + j] * (g[off + j] - dots[j]);
                        }
                    }
                }
            }
        }
        Op::L2Normalize { axis, norms } => {
            if parents[0].tracked() {
                let (outer, len, inner) = axis_split(parents[0].shape(), *axis);
                let floor = F::from_f64(super::ops::L2_NORM_FLOOR);
                let y = node.data();
                let d = entry(flows, &parents[0]);
                let mut dots = vec![F::zero(); inner];
                for o in 0..outer {
                    let base = o * len * inner;
                    let ns = &norms[o * inner..(o + 1) * inner];
                    dots.fill(F::zero());
                    for i in 0..len {
                        let off = base + i * inner;
                        for j in 0..inner {
                            dots[j] += g[off + j] * y[off + j];
                        }
                    }
                    for i in 0..len {
                        let off = base + i * inner;
                        for j in 0..inner {
                            if ns[j] > floor {
                                d[off + j] += (g[off + j] - y[off + j] * dots[j]) / ns[j];
                            }
                        }
                    }
                }
            }
        }
        Op::MatmulNN => {
            let (m, k) = (parents[0].shape()[0], parents[0].shape()[1]);
            let n = parents[1].shape()[1];
            if parents[0].tracked() {
                let b = parents[1].data();
                let da = entry(flows, &parents[0]);
                // da += g @ b^T
                gemm::gemm(m, n, k, F::one(), g, n as isize, 1, &b, 1, n as isize, F::one(), da, k as isize, 1);
            }
            if parents[1].tracked() {
                let a = parents[0].data();
                let db = entry(flows, &parents[1]);
                // db += a^T @ g
                gemm::gemm(k, m, n, F::one(), &a, 1, k as isize, g, n as isize, 1, F::one(), db, n as isize, 1);
            }
        }
        Op::MatmulNT => {
            // y [m, n] = a [m, k] @ b [n, k]^T
            let (m, k) = (parents[0].shape()[0], parents[0].shape()[1]);
            let n = parents[1].shape()[0];
            if parents[0].tracked() {
                let b = parents[1].data();
                let da = entry(flows, &parents[0]);
                // da += g @ b
                gemm::gemm(m, n, k, F::one(), g, n as isize, 1, &b, k as isize, 1, F::one(), da, k as isize, 1);
            }
            if parents[1].tracked() {
                let a = parents[0].data();
                let db = entry(flows, &parents[1]);
                // db += g^T @ a
                gemm::gemm(n, m, k, F::one(), g, 1, n as isize, &a, k as isize, 1, F::one(), db, k as isize, 1);
            }
        }
        Op::MatmulTN => {
            // y [m, n] = a [k, m]^T @ b [k, n]
            let (k, m) = (parents[0].shape()[0], parents[0].shape()[1]);
            let n = parents[1].shape()[1];
            if parents[0].tracked() {
                let b = parents[1].data();
                let da = entry(flows, &parents[0]);
                // da += b @ g^T
                gemm::gemm(k, n, m, F::one(), &b, n as isize, 1, g, 1, n as isize, F::one(), da, m as isize, 1);
            }
            if parents[1].tracked() {
                let a = parents[0].data();
                let db = entry(flows, &parents[1]);
                // db += a @ g
                gemm::gemm(k, m, n, F::one(), &a, m as isize, 1, g, n as isize, 1, F::one(), db, n as isize, 1);
            }
        }
        Op::Conv2dValid => {
            let xs = parents[0].shape().to_vec();
            let ks = parents[1].shape().to_vec();
            let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
            let (ho, wo) = (h - kh + 1, w - kw + 1);
            if parents[0].tracked() {
                let kernel = parents[1].data();
                let dx = entry(flows, &parents[0]);
                gemm::conv2d_dgrad(g, b, cout, ho, wo, &kernel, cin, kh, kw, dx);
            }
            if parents[1].tracked() {
                let x = parents[0].data();
                let dk = entry(flows, &parents[1]);
                gemm::conv2d_wgrad(g, &x, b, cin, h, w, cout, kh, kw, dk);
            }
        }
        Op::BatchNorm { xhat, inv_std } => {
            let s = parents[0].shape().to_vec();
            let (a, c, m) = (s[0], s[1], s[2]);
            let n = F::from_f64((a * m) as f64);
            // Channel sums of g and g * xhat feed all three gradients.
            let mut sg = vec![F::zero(); c];
            let mut sgx = vec![F::zero(); c];
            for ai in 0..a {
                for ci in 0..c {
                    let base = (ai * c + ci) * m;
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for j in 0..m {
                        s1 += g[base + j];
                        s2 += g[base + j] * xhat[base + j];
                    }
                    sg[ci] += s1;
                    sgx[ci] += s2;
                }
            }
            if parents[1].tracked() {
                let d = entry(flows, &parents[1]);
                for ci in 0..c {
                    d[ci] += sgx[ci];
                }
            }
            if parents[2].tracked() {
                let d = entry(flows, &parents[2]);
                for ci in 0..c {
                    d[ci] += sg[ci];
                }
            }
            if parents[0].tracked() {
                let gamma = parents[1].data();
                let d = entry(flows, &parents[0]);
                for ai in 0..a {
                    for ci in 0..c {
                        let base = (ai * c + ci) * m;
                        let k = gamma[ci] * inv_std[ci];
                        let mg = sg[ci] / n;
                        let mgx = sgx[ci] / n;
                        for j in 0..m {
                            d[base + j] += k * (g[base + j] - mg - xhat[base + j] * mgx);
                        }
                    }
                }
            }
        }
        Op::AffineChannels => {
            let s = parents[0].shape().to_vec();
            let (a, c, m) = (s[0], s[1], s[2]);
            if parents[0].tracked() {
                let scale = parents[1].data();
                let d = entry(flows, &parents[0]);
                for ai in 0..a {
                    for ci in 0..c {
                        let base = (ai * c + ci) * m;
                        let k = scale[ci];
                        for j in 0..m {
                            d[base + j] += g[base + j] * k;
                        }
                    }
                }
            }
            if parents[1].tracked() {
                let x = parents[0].data();
                let d = entry(flows, &parents[1]);
                for ai in 0..a {
                    for ci in 0..c {
                        let base = (ai * c + ci) * m;
                        let mut acc = F::zero();
                        for j in 0..m {
                            acc += g[base + j] * x[base + j];
                        }
                        d[ci] += acc;
                    }
                }
            }
            if parents[2].tracked() {
                let d = entry(flows, &parents[2]);
                for ai in 0..a {
                    for ci in 0..c {
                        let base = (ai * c + ci) * m;
                        let mut acc = F::zero();
                        for j in 0..m {
                            acc += g[base + j];
                        }
                        d[ci] += acc;
                    }
                }
            }
        }
        Op::IndexSelect { axis, indices } => {
            if parents[0].tracked() {
                let (outer, len, inner) = axis_split(parents[0].shape(), *axis);
                let d = entry(flows, &parents[0]);
                for o in 0..outer {
                    for (pos, &ix) in indices.iter().enumerate() {
                        let src = (o * indices.len() + pos) * inner;
                        let dst = (o * len + ix) * inner;
                        for j in 0..inner {
                            d[dst + j] += g[src + j];
                        }
                    }
                }
            }
        }
        Op::GroupShift { offsets } => {
            if parents[0].tracked() {
                let s = parents[0].shape();
                let (c, gl, p) = (s[0], s[1], s[2]);
                let gi = gl as i64;
                let d = entry(flows, &parents[0]);
                for ci in 0..c {
                    for slot in 0..gl {
                        let dst = (ci * gl + slot) * p;
                        for (j, &off) in offsets.iter().enumerate() {
                            let src_slot = (slot as i64 + off).rem_euclid(gi) as usize;
                            d[dst + j] += g[(ci * gl + src_slot) * p + j];
                        }
                    }
                }
            }
        }
        Op::LinMapApply(map) => {
            if parents[0].tracked() {
                map.apply_transpose(g, entry(flows, &parents[0]));
            }
        }
        Op::Reshape => {
            if parents[0].tracked() {
                for (d, &gv) in entry(flows, &parents[0]).iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
    }
}
