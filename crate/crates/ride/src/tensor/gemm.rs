//! Convolution kernels: im2col over column blocks plus GEMM.
//!
//! All three passes (forward, input gradient, weight gradient) reduce to
//! the same patch-extraction loop feeding `matrixmultiply`. Blocks are
//! visited in a fixed order and partial products accumulate sequentially,
//! which keeps results identical from run to run.

use super::Scalar;

/// Column-block width for im2col buffers. 2048 output pixels at the
/// largest K used here stays well under typical L3 sizes.
const BLOCK: usize = 2048;

/// Safe wrapper over [`Scalar::gemm`] with bounds asserted from strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    rsa: isize,
    csa: isize,
    b: &[F],
    rsb: isize,
    csb: isize,
    beta: F,
    c: &mut [F],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(max_extent(m, k, rsa, csa) <= a.len());
    debug_assert!(max_extent(k, n, rsb, csb) <= b.len());
    debug_assert!(max_extent(m, n, rsc, csc) <= c.len());
    unsafe {
        F::gemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc)
    }
}

fn max_extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    let r = (rows as isize - 1) * rs;
    let c = (cols as isize - 1) * cs;
    debug_assert!(r >= 0 && c >= 0, "negative strides unsupported");
    (r + c) as usize + 1
}

/// Writes patch rows for output pixels `[p0, p0 + nb)` of one image into
/// `cols`, laid out `[cin * kh * kw, nb]` row-major. Output pixel `p`
/// means spatial position `(p / wo, p % wo)` of the valid convolution.
#[allow(clippy::too_many_arguments)]
fn fill_cols<F: Scalar>(
    x: &[F],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    wo: usize,
    p0: usize,
    nb: usize,
    cols: &mut [F],
) {
    debug_assert_eq!(x.len(), cin * h * w);
    debug_assert!(cols.len() >= cin * kh * kw * nb);
    let p1 = p0 + nb;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for dr in 0..kh {
            for dc in 0..kw {
                let row = ((ci * kh) + dr) * kw + dc;
                let dst = &mut cols[row * nb..(row + 1) * nb];
                let mut p = p0;
                while p < p1 {
                    let r = p / wo;
                    let c = p % wo;
                    let run = (p1 - p).min(wo - c);
                    let src = (r + dr) * w + c + dc;
                    dst[p - p0..p - p0 + run].copy_from_slice(&plane[src..src + run]);
                    p += run;
                }
            }
        }
    }
}

/// Valid cross-correlation: `x [b, cin, h, w] * k [cout, cin, kh, kw]`
/// into `out [b, cout, h-kh+1, w-kw+1]` (overwrites `out`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward<F: Scalar>(
    x: &[F],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[F],
    cout: usize,
    kh: usize,
    kw: usize,
    out: &mut [F],
) {
    let ho = h - kh + 1;
    let wo = w - kw + 1;
    let n = ho * wo;
    let k = cin * kh * kw;
    debug_assert_eq!(kernel.len(), cout * k);
    debug_assert_eq!(out.len(), b * cout * n);
    let mut cols = vec![F::zero(); k * BLOCK.min(n)];
    for bi in 0..b {
        let xi = &x[bi * cin * h * w..(bi + 1) * cin * h * w];
        let oi = &mut out[bi * cout * n..(bi + 1) * cout * n];
        let mut p0 = 0;
        while p0 < n {
            let nb = BLOCK.min(n - p0);
            fill_cols(xi, cin, h, w, kh, kw, wo, p0, nb, &mut cols);
            gemm(
                cout,
                k,
                nb,
                F::one(),
                kernel,
                k as isize,
                1,
                &cols,
                nb as isize,
                1,
                F::zero(),
                &mut oi[p0..],
                n as isize,
                1,
            );
            p0 += nb;
        }
    }
}

/// Input gradient of [`conv2d_forward`], accumulated into `dx`.
///
/// Implemented as a full correlation: pad `gy` by `kh-1, kw-1` on each
/// side and convolve with the kernel flipped in both spatial axes and
/// transposed in its channel axes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_dgrad<F: Scalar>(
    gy: &[F],
    b: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    kernel: &[F],
    cin: usize,
    kh: usize,
    kw: usize,
    dx: &mut [F],
) {
    let h = ho + kh - 1;
    let w = wo + kw - 1;
    let n = h * w;
    let k2 = cout * kh * kw;
    debug_assert_eq!(gy.len(), b * cout * ho * wo);
    debug_assert_eq!(dx.len(), b * cin * n);

    // w2[ci][co][dr][dc] = kernel[co][ci][kh-1-dr][kw-1-dc]
    let mut w2 = vec![F::zero(); cin * k2];
    for co in 0..cout {
        for ci in 0..cin {
            for dr in 0..kh {
                for dc in 0..kw {
                    let src = ((co * cin + ci) * kh + (kh - 1 - dr)) * kw + (kw - 1 - dc);
                    let dst = ((ci * cout + co) * kh + dr) * kw + dc;
                    w2[dst] = kernel[src];
                }
            }
        }
    }

    let hp = ho + 2 * (kh - 1);
    let wp = wo + 2 * (kw - 1);
    let mut pad = vec![F::zero(); cout * hp * wp];
    let mut cols = vec![F::zero(); k2 * BLOCK.min(n)];
    for bi in 0..b {
        let gyi = &gy[bi * cout * ho * wo..(bi + 1) * cout * ho * wo];
        pad.fill(F::zero());
        for co in 0..cout {
            for r in 0..ho {
                let src = (co * ho + r) * wo;
                let dst = (co * hp + r + kh - 1) * wp + (kw - 1);
                pad[dst..dst + wo].copy_from_slice(&gyi[src..src + wo]);
            }
        }
        let di = &mut dx[bi * cin * n..(bi + 1) * cin * n];
        let mut p0 = 0;
        while p0 < n {
            let nb = BLOCK.min(n - p0);
            fill_cols(&pad, cout, hp, wp, kh, kw, w, p0, nb, &mut cols);
            gemm(
                cin,
                k2,
                nb,
                F::one(),
                &w2,
                k2 as isize,
                1,
                &cols,
                nb as isize,
                1,
                F::one(),
                &mut di[p0..],
                n as isize,
                1,
            );
            p0 += nb;
        }
    }
}

/// Weight gradient of [`conv2d_forward`], accumulated into `dk`
/// (`[cout, cin, kh, kw]`). Batch items and column blocks accumulate in a
/// fixed order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_wgrad<F: Scalar>(
    gy: &[F],
    x: &[F],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    dk: &mut [F],
) {
    let ho = h - kh + 1;
    let wo = w - kw + 1;
    let n = ho * wo;
    let k = cin * kh * kw;
    debug_assert_eq!(gy.len(), b * cout * n);
    debug_assert_eq!(dk.len(), cout * k);
    let mut cols = vec![F::zero(); k * BLOCK.min(n)];
    for bi in 0..b {
        let xi = &x[bi * cin * h * w..(bi + 1) * cin * h * w];
        let gyi = &gy[bi * cout * n..(bi + 1) * cout * n];
        let mut p0 = 0;
        while p0 < n {
            let nb = BLOCK.min(n - p0);
            fill_cols(xi, cin, h, w, kh, kw, wo, p0, nb, &mut cols);
            // dk[cout, k] += gy_block [cout, nb] @ cols^T [nb, k]
            gemm(
                cout,
                nb,
                k,
                F::one(),
                &gyi[p0..],
                n as isize,
                1,
                &cols,
                1,
                nb as isize,
                F::one(),
                dk,
                k as isize,
                1,
            );
            p0 += nb;
        }
    }
}
