//! Forward kernels and graph construction for all tensor ops.
//!
//! Axis reductions stream row-major with one accumulator lane per inner
//! position, so no op ever strides through memory column-wise. Ties in
//! `max_axis` resolve to the lowest index along the axis.

use std::rc::Rc;

use super::gemm;
use super::linmap::LinMap;
use super::{axis_split, contract, Op, Scalar, Tensor, TensorError};

/// Lanes with an L2 norm at or below this floor normalize to zero and
/// receive zero gradient.
pub const L2_NORM_FLOOR: f64 = 1e-12;

impl<F: Scalar> Tensor<F> {
    fn check_same_shape(&self, rhs: &Self) -> Result<(), TensorError> {
        if self.shape() != rhs.shape() {
            return Err(TensorError::ShapeMismatch {
                expected: self.shape().to_vec(),
                got: rhs.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(&self, axis: usize) -> Result<(), TensorError> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange { axis, rank: self.rank() });
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Self) -> Result<Self, TensorError> {
        self.check_same_shape(rhs)?;
        let a = self.data();
        let b = rhs.data();
        let data = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
        drop(a);
        drop(b);
        Ok(Self::result(self.shape().to_vec(), data, vec![self.clone(), rhs.clone()], Op::Add))
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self, TensorError> {
        self.check_same_shape(rhs)?;
        let a = self.data();
        let b = rhs.data();
        let data = a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect();
        drop(a);
        drop(b);
        Ok(Self::result(self.shape().to_vec(), data, vec![self.clone(), rhs.clone()], Op::Sub))
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self, TensorError> {
        self.check_same_shape(rhs)?;
        let a = self.data();
        let b = rhs.data();
        let data = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect();
        drop(a);
        drop(b);
        Ok(Self::result(self.shape().to_vec(), data, vec![self.clone(), rhs.clone()], Op::Mul))
    }

    pub fn neg(&self) -> Self {
        let data = self.data().iter().map(|&x| -x).collect();
        Self::result(self.shape().to_vec(), data, vec![self.clone()], Op::Neg)
    }

    pub fn add_scalar(&self, v: F) -> Self {
        let data = self.data().iter().map(|&x| x + v).collect();
        Self::result(self.shape().to_vec(), data, vec![self.clone()], Op::AddScalar)
    }

    pub fn mul_scalar(&self, v: F) -> Self {
        let data = self.data().iter().map(|&x| x * v).collect();
        Self::result(self.shape().to_vec(), data, vec![self.clone()], Op::MulScalar(v))
    }

    /// `1 - x`, a common enough combination to warrant a name.
    pub fn one_minus(&self) -> Self {
        self.neg().add_scalar(F::one())
    }

    pub fn relu(&self) -> Self {
        let data = self.data().iter().map(|&x| if x > F::zero() { x } else { F::zero() }).collect();
        Self::result(self.shape().to_vec(), data, vec![self.clone()], Op::Relu)
    }

    pub fn sigmoid(&self) -> Self {
        let data = self.data().iter().map(|&x| sigmoid_stable(x)).collect();
        Self::result(self.shape().to_vec(), data, vec![self.clone()], Op::Sigmoid)
    }

    pub fn exp(&self) -> Self {
        let data = self.data().iter().map(|&x| x.exp()).collect();
        Self::result(self.shape().to_vec(), data, vec![self.clone()], Op::Exp)
    }

    /// `ln(max(x, floor))`; inputs at or below the floor get zero gradient.
    pub fn ln_clamped(&self, floor: F) -> Self {
        let data = self.data().iter().map(|&x| if x > floor { x.ln() } else { floor.ln() }).collect();
        Self::result(self.shape().to_vec(), data, vec![self.clone()], Op::LnClamped(floor))
    }

    pub fn sum_all(&self) -> Self {
        let mut acc = F::zero();
        for &v in self.data().iter() {
            acc += v;
        }
        Self::result(vec![1], vec![acc], vec![self.clone()], Op::SumAll)
    }

    pub fn mean_all(&self) -> Self {
        let n = F::from_f64(self.numel() as f64);
        let mut acc = F::zero();
        for &v in self.data().iter() {
            acc += v;
        }
        Self::result(vec![1], vec![acc / n], vec![self.clone()], Op::MeanAll)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Self, TensorError> {
        self.check_axis(axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for i in 0..len {
                let src = &x[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Self::result(shape, out, vec![self.clone()], Op::SumAxis(axis)))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self, TensorError> {
        self.check_axis(axis)?;
        let len = self.shape()[axis];
        let summed = self.sum_axis(axis)?;
        // Recorded as its own op so the VJP spreads g / len directly.
        let scale = F::one() / F::from_f64(len as f64);
        let data = summed.data().iter().map(|&v| v * scale).collect();
        Ok(Self::result(summed.shape().to_vec(), data, vec![self.clone()], Op::MeanAxis(axis)))
    }

    /// Maximum along `axis`; ties pick the lowest index. The winning
    /// positions alone receive gradient.
    pub fn max_axis(&self, axis: usize) -> Result<Self, TensorError> {
        self.check_axis(axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![F::zero(); outer * inner];
        let mut argmax = vec![0u32; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            let arg = &mut argmax[o * inner..(o + 1) * inner];
            dst.copy_from_slice(&x[o * len * inner..o * len * inner + inner]);
            for i in 1..len {
                let src = &x[(o * len + i) * inner..(o * len + i + 1) * inner];
                for j in 0..inner {
                    if src[j] > dst[j] {
                        dst[j] = src[j];
                        arg[j] = i as u32;
                    }
                }
            }
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Self::result(shape, out, vec![self.clone()], Op::MaxAxis { axis, argmax }))
    }

    /// Index of the maximum along `axis` (lowest index wins ties).
    /// Plain data, not differentiable.
    pub fn argmax_axis(&self, axis: usize) -> Result<Vec<usize>, TensorError> {
        self.check_axis(axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut best = vec![F::zero(); inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            best.copy_from_slice(&x[o * len * inner..o * len * inner + inner]);
            let a = &mut arg[o * inner..(o + 1) * inner];
            for i in 1..len {
                let src = &x[(o * len + i) * inner..(o * len + i + 1) * inner];
                for j in 0..inner {
                    if src[j] > best[j] {
                        best[j] = src[j];
                        a[j] = i;
                    }
                }
            }
        }
        Ok(arg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self, TensorError> {
        self.check_axis(axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![F::zero(); x.len()];
        let mut maxs = vec![F::zero(); inner];
        let mut sums = vec![F::zero(); inner];
        for o in 0..outer {
            let base = o * len * inner;
            maxs.copy_from_slice(&x[base..base + inner]);
            for i in 1..len {
                let src = &x[base + i * inner..base + (i + 1) * inner];
                for (m, &s) in maxs.iter_mut().zip(src) {
                    if s > *m {
                        *m = s;
                    }
                }
            }
            sums.fill(F::zero());
            for i in 0..len {
                let src = &x[base + i * inner..base + (i + 1) * inner];
                let dst = &mut out[base + i * inner..base + (i + 1) * inner];
                for j in 0..inner {
                    let e = (src[j] - maxs[j]).exp();
                    dst[j] = e;
                    sums[j] += e;
                }
            }
            for s in sums.iter_mut() {
                *s = F::one() / *s;
            }
            for i in 0..len {
                let dst = &mut out[base + i * inner..base + (i + 1) * inner];
                for j in 0..inner {
                    dst[j] *= sums[j];
                }
            }
        }
        drop(x);
        Ok(Self::result(self.shape().to_vec(), out, vec![self.clone()], Op::Softmax { axis }))
    }

    /// L2-normalizes each lane along `axis`. Lanes with norm at or below
    /// [`L2_NORM_FLOOR`] become zero and pass no gradient.
    pub fn l2_normalize(&self, axis: usize) -> Result<Self, TensorError> {
        self.check_axis(axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let floor = F::from_f64(L2_NORM_FLOOR);
        let x = self.data();
        let mut out = vec![F::zero(); x.len()];
        let mut norms = vec![F::zero(); outer * inner];
        for o in 0..outer {
            let base = o * len * inner;
            let ns = &mut norms[o * inner..(o + 1) * inner];
            for i in 0..len {
                let src = &x[base + i * inner..base + (i + 1) * inner];
                for (n, &s) in ns.iter_mut().zip(src) {
                    *n += s * s;
                }
            }
            for n in ns.iter_mut() {
                *n = n.sqrt();
            }
            for i in 0..len {
                let src = &x[base + i * inner..base + (i + 1) * inner];
                let dst = &mut out[base + i * inner..base + (i + 1) * inner];
                for j in 0..inner {
                    if ns[j] > floor {
                        dst[j] = src[j] / ns[j];
                    }
                }
            }
        }
        drop(x);
        Ok(Self::result(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Op::L2Normalize { axis, norms },
        ))
    }

    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self, TensorError> {
        let (m, k) = as_2d(self)?;
        let (k2, n) = as_2d(rhs)?;
        if k != k2 {
            return Err(contract(format!(
                "matmul inner dims differ: [{m}, {k}] @ [{k2}, {n}]"
            )));
        }
        let mut out = vec![F::zero(); m * n];
        gemm::gemm(
            m, k, n,
            F::one(),
            &self.data(), k as isize, 1,
            &rhs.data(), n as isize, 1,
            F::zero(),
            &mut out, n as isize, 1,
        );
        Ok(Self::result(vec![m, n], out, vec![self.clone(), rhs.clone()], Op::MatmulNN))
    }

    /// `[m, k] @ [n, k]^T -> [m, n]`; avoids materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Self) -> Result<Self, TensorError> {
        let (m, k) = as_2d(self)?;
        let (n, k2) = as_2d(rhs)?;
        if k != k2 {
            return Err(contract(format!(
                "matmul_nt inner dims differ: [{m}, {k}] @ [{n}, {k2}]^T"
            )));
        }
        let mut out = vec![F::zero(); m * n];
        gemm::gemm(
            m, k, n,
            F::one(),
            &self.data(), k as isize, 1,
            &rhs.data(), 1, k as isize,
            F::zero(),
            &mut out, n as isize, 1,
        );
        Ok(Self::result(vec![m, n], out, vec![self.clone(), rhs.clone()], Op::MatmulNT))
    }

    /// `[k, m]^T @ [k, n] -> [m, n]`.
    pub fn matmul_tn(&self, rhs: &Self) -> Result<Self, TensorError> {
        let (k, m) = as_2d(self)?;
        let (k2, n) = as_2d(rhs)?;
        if k != k2 {
            return Err(contract(format!(
                "matmul_tn inner dims differ: [{k}, {m}]^T @ [{k2}, {n}]"
            )));
        }
        let mut out = vec![F::zero(); m * n];
        gemm::gemm(
            m, k, n,
            F::one(),
            &self.data(), 1, m as isize,
            &rhs.data(), n as isize, 1,
            F::zero(),
            &mut out, n as isize, 1,
        );
        Ok(Self::result(vec![m, n], out, vec![self.clone(), rhs.clone()], Op::MatmulTN))
    }

    /// Valid 2-d cross-correlation. `self` is `[b, cin, h, w]`, `kernel`
    /// is `[cout, cin, kh, kw]`, output `[b, cout, h-kh+1, w-kw+1]`.
    pub fn conv2d_valid(&self, kernel: &Self) -> Result<Self, TensorError> {
        let s = self.shape();
        let ks = kernel.shape();
        if s.len() != 4 || ks.len() != 4 {
            return Err(contract(format!(
                "conv2d_valid wants 4-d input and kernel, got {s:?} and {ks:?}"
            )));
        }
        let (b, cin, h, w) = (s[0], s[1], s[2], s[3]);
        let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if cin != kcin {
            return Err(contract(format!(
                "conv2d_valid channel mismatch: input has {cin}, kernel expects {kcin}"
            )));
        }
        if h < kh || w < kw {
            return Err(contract(format!(
                "conv2d_valid input {h}x{w} smaller than kernel {kh}x{kw}"
            )));
        }
        let (ho, wo) = (h - kh + 1, w - kw + 1);
        let mut out = vec![F::zero(); b * cout * ho * wo];
        gemm::conv2d_forward(&self.data(), b, cin, h, w, &kernel.data(), cout, kh, kw, &mut out);
        Ok(Self::result(
            vec![b, cout, ho, wo],
            out,
            vec![self.clone(), kernel.clone()],
            Op::Conv2dValid,
        ))
    }

    /// Batch normalization in training mode over `[a, c, m]` with per-`c`
    /// statistics (biased variance). Returns the normalized tensor plus
    /// the batch mean and variance for running-average upkeep.
    pub fn batch_norm_train(
        &self,
        gamma: &Self,
        beta: &Self,
        eps: f64,
    ) -> Result<(Self, Vec<F>, Vec<F>), TensorError> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(contract(format!("batch_norm_train wants [a, c, m], got {s:?}")));
        }
        let (a, c, m) = (s[0], s[1], s[2]);
        for (name, t) in [("gamma", gamma), ("beta", beta)] {
            if t.shape() != [c] {
                return Err(contract(format!(
                    "batch_norm_train {name} must be [{c}], got {:?}",
                    t.shape()
                )));
            }
        }
        let n = F::from_f64((a * m) as f64);
        let epsf = F::from_f64(eps);
        let x = self.data();
        let ga = gamma.data();
        let be = beta.data();
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for ci in 0..c {
            let mut acc = F::zero();
            for ai in 0..a {
                let base = (ai * c + ci) * m;
                for &v in &x[base..base + m] {
                    acc += v;
                }
            }
            mean[ci] = acc / n;
            let mu = mean[ci];
            let mut acc2 = F::zero();
            for ai in 0..a {
                let base = (ai * c + ci) * m;
                for &v in &x[base..base + m] {
                    let d = v - mu;
                    acc2 += d * d;
                }
            }
            var[ci] = acc2 / n;
        }
        let mut xhat = vec![F::zero(); x.len()];
        let mut out = vec![F::zero(); x.len()];
        let mut inv_std = vec![F::zero(); c];
        for ci in 0..c {
            inv_std[ci] = F::one() / (var[ci] + epsf).sqrt();
        }
        for ai in 0..a {
            for ci in 0..c {
                let base = (ai * c + ci) * m;
                let mu = mean[ci];
                let is = inv_std[ci];
                let g = ga[ci];
                let b2 = be[ci];
                for j in 0..m {
                    let h = (x[base + j] - mu) * is;
                    xhat[base + j] = h;
                    out[base + j] = g * h + b2;
                }
            }
        }
        drop(x);
        drop(ga);
        drop(be);
        let node = Self::result(
            s.to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Op::BatchNorm { xhat, inv_std },
        );
        Ok((node, mean, var))
    }

    /// Per-channel affine `x * scale[c] + shift[c]` over `[a, c, m]`;
    /// the inference-mode counterpart of [`Tensor::batch_norm_train`].
    pub fn affine_channels(&self, scale: &Self, shift: &Self) -> Result<Self, TensorError> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(contract(format!("affine_channels wants [a, c, m], got {s:?}")));
        }
        let (a, c, m) = (s[0], s[1], s[2]);
        for (name, t) in [("scale", scale), ("shift", shift)] {
            if t.shape() != [c] {
                return Err(contract(format!(
                    "affine_channels {name} must be [{c}], got {:?}",
                    t.shape()
                )));
            }
        }
        let x = self.data();
        let sc = scale.data();
        let sh = shift.data();
        let mut out = vec![F::zero(); x.len()];
        for ai in 0..a {
            for ci in 0..c {
                let base = (ai * c + ci) * m;
                let k = sc[ci];
                let b2 = sh[ci];
                for j in 0..m {
                    out[base + j] = x[base + j] * k + b2;
                }
            }
        }
        drop(x);
        drop(sc);
        drop(sh);
        Ok(Self::result(
            s.to_vec(),
            out,
            vec![self.clone(), scale.clone(), shift.clone()],
            Op::AffineChannels,
        ))
    }

    /// Gathers `indices` along `axis`. Duplicate indices are allowed; the
    /// VJP scatter-adds back.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Self, TensorError> {
        self.check_axis(axis)?;
        if indices.is_empty() {
            return Err(contract("index_select of zero indices".to_string()));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        for &ix in indices {
            if ix >= len {
                return Err(TensorError::IndexOutOfBounds { index: ix, len });
            }
        }
        let x = self.data();
        let mut out = vec![F::zero(); outer * indices.len() * inner];
        for o in 0..outer {
            for (pos, &ix) in indices.iter().enumerate() {
                let src = (o * len + ix) * inner;
                let dst = (o * indices.len() + pos) * inner;
                out[dst..dst + inner].copy_from_slice(&x[src..src + inner]);
            }
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape[axis] = indices.len();
        let indices = Rc::new(indices.to_vec());
        Ok(Self::result(shape, out, vec![self.clone()], Op::IndexSelect { axis, indices }))
    }

    /// Cyclic shift along the middle axis of `[c, g, p]` by a per-position
    /// offset: `out[c, s, p] = in[c, (s - offsets[p]) mod g, p]`.
    pub fn group_shift(&self, offsets: &[i64]) -> Result<Self, TensorError> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(contract(format!("group_shift wants [c, g, p], got {s:?}")));
        }
        let (c, g, p) = (s[0], s[1], s[2]);
        if offsets.len() != p {
            return Err(contract(format!(
                "group_shift wants {p} offsets (one per position), got {}",
                offsets.len()
            )));
        }
        let x = self.data();
        let mut out = vec![F::zero(); x.len()];
        let gi = g as i64;
        for ci in 0..c {
            for slot in 0..g {
                let dst = (ci * g + slot) * p;
                for (j, &off) in offsets.iter().enumerate() {
                    let src_slot = (slot as i64 - off).rem_euclid(gi) as usize;
                    out[dst + j] = x[(ci * g + src_slot) * p + j];
                }
            }
        }
        drop(x);
        let offsets = Rc::new(offsets.to_vec());
        Ok(Self::result(s.to_vec(), out, vec![self.clone()], Op::GroupShift { offsets }))
    }

    /// Applies a fixed sparse linear map to the flattened tensor.
    pub fn apply_lin_map(&self, map: &Rc<LinMap>, out_shape: &[usize]) -> Result<Self, TensorError> {
        if map.in_len() != self.numel() {
            return Err(contract(format!(
                "lin map expects {} inputs, tensor has {}",
                map.in_len(),
                self.numel()
            )));
        }
        let out_numel: usize = out_shape.iter().product();
        if out_numel != map.out_len() {
            return Err(contract(format!(
                "lin map produces {} outputs, shape {out_shape:?} wants {out_numel}",
                map.out_len()
            )));
        }
        let mut out = vec![F::zero(); map.out_len()];
        map.apply(&self.data(), &mut out);
        Ok(Self::result(
            out_shape.to_vec(),
            out,
            vec![self.clone()],
            Op::LinMapApply(Rc::clone(map)),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(contract(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape()
            )));
        }
        let data = self.data().clone();
        Ok(Self::result(shape.to_vec(), data, vec![self.clone()], Op::Reshape))
    }
}

fn as_2d<F: Scalar>(t: &Tensor<F>) -> Result<(usize, usize), TensorError> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(contract(format!("expected a matrix, got shape {s:?}")));
    }
    Ok((s[0], s[1]))
}

pub(crate) fn sigmoid_stable<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
