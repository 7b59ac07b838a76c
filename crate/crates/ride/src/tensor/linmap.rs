//! Fixed sparse linear maps in compressed-row form.
//!
//! A [`LinMap`] is a constant matrix applied to a flattened tensor. The
//! crate uses it to expand base convolution kernels into their rotated
//! copies: the map is built once per layer, and its transpose routes
//! gradients back to the base weights.

use super::Scalar;

#[derive(Debug, Clone)]
pub struct LinMap {
    in_len: usize,
    out_len: usize,
    /// Row start offsets, `out_len + 1` entries.
    ptr: Vec<u32>,
    src: Vec<u32>,
    coeff: Vec<f64>,
}

impl LinMap {
    /// Builds from `(out_index, in_index, coefficient)` triplets.
    /// Duplicate `(out, in)` pairs sum. Panics on out-of-range indices;
    /// maps are constructed from code, not from external data.
    pub fn from_triplets(in_len: usize, out_len: usize, triplets: &[(usize, usize, f64)]) -> Self {
        assert!(in_len <= u32::MAX as usize && out_len <= u32::MAX as usize);
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        for &(o, i, _) in &sorted {
            assert!(o < out_len, "triplet row {o} out of range {out_len}");
            assert!(i < in_len, "triplet col {i} out of range {in_len}");
        }
        sorted.sort_by_key(|&(o, i, _)| (o, i));
        let mut ptr = Vec::with_capacity(out_len + 1);
        let mut src = Vec::with_capacity(sorted.len());
        let mut coeff: Vec<f64> = Vec::with_capacity(sorted.len());
        ptr.push(0);
        let mut row = 0usize;
        for (o, i, v) in sorted {
            while row < o {
                ptr.push(src.len() as u32);
                row += 1;
            }
            if let Some(last) = src.last() {
                if *last as usize == i && ptr[row] < src.len() as u32 {
                    *coeff.last_mut().expect("coeff tracks src") += v;
                    continue;
                }
            }
            src.push(i as u32);
            coeff.push(v);
        }
        while row < out_len {
            ptr.push(src.len() as u32);
            row += 1;
        }
        LinMap { in_len, out_len, ptr, src, coeff }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn nnz(&self) -> usize {
        self.src.len()
    }

    /// `y = M x` (overwrites `y`).
    pub fn apply<F: Scalar>(&self, x: &[F], y: &mut [F]) {
        debug_assert_eq!(x.len(), self.in_len);
        debug_assert_eq!(y.len(), self.out_len);
        for o in 0..self.out_len {
            let lo = self.ptr[o] as usize;
            let hi = self.ptr[o + 1] as usize;
            let mut acc = F::zero();
            for e in lo..hi {
                acc += F::from_f64(self.coeff[e]) * x[self.src[e] as usize];
            }
            y[o] = acc;
        }
    }

    /// `gx += M^T gy` (accumulates).
    pub fn apply_transpose<F: Scalar>(&self, gy: &[F], gx: &mut [F]) {
        debug_assert_eq!(gy.len(), self.out_len);
        debug_assert_eq!(gx.len(), self.in_len);
        for o in 0..self.out_len {
            let lo = self.ptr[o] as usize;
            let hi = self.ptr[o + 1] as usize;
            let gv = gy[o];
            for e in lo..hi {
                gx[self.src[e] as usize] += F::from_f64(self.coeff[e]) * gv;
            }
        }
    }
}
