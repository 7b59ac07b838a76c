//! Cyclic-group convolution machinery.
//!
//! Features here live on a discrete rotation group C_|G|: each channel
//! carries |G| slots, one per in-plane orientation, and rotating the
//! input permutes slots instead of scrambling values. The convolutions
//! realize this with rotated copies of a learned base kernel: a lifting
//! convolution takes a plain image into the group domain, and group
//! convolutions mix slots so that the correlation pattern commutes with
//! rotation.
//!
//! Conventions, fixed once for the whole crate:
//!
//! - positive angles are counter-clockwise; group index `k` means
//!   `k * 360/|G|` degrees;
//! - `cyclic_shift(x, o)[g] = x[(g - o) mod |G|]`, so a shift by +1 moves
//!   slot content toward higher indices;
//! - rotating the input image by one group step shifts output slots by +1
//!   while rotating them spatially.
//!
//! Kernel rotation resamples bilinearly, reads 0 outside the k x k
//! support, and reduces to an exact index permutation at multiples of
//! 90 degrees. That makes C4 equivariance exact and C8 approximate,
//! which the 5x5 kernels keep tight enough for training.

use std::rc::Rc;

use thiserror::Error;

use crate::tensor::{LinMap, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EquivariantError {
    #[error("group order must be at least 2, got {0}")]
    BadOrder(usize),
    #[error("kernel size must be odd for rotation about the center, got {0}")]
    EvenKernel(usize),
    #[error("group order mismatch: {0} vs {1}")]
    OrderMismatch(usize, usize),
    #[error("{0}")]
    BadShape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn bad_shape(msg: impl Into<String>) -> EquivariantError {
    EquivariantError::BadShape(msg.into())
}

/// The cyclic rotation group C_n: n in-plane rotations in 360/n steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CyclicGroup {
    order: usize,
}

impl CyclicGroup {
    pub fn new(order: usize) -> Result<Self, EquivariantError> {
        if order < 2 {
            return Err(EquivariantError::BadOrder(order));
        }
        Ok(CyclicGroup { order })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn step_degrees(&self) -> f64 {
        360.0 / self.order as f64
    }

    pub fn step_radians(&self) -> f64 {
        std::f64::consts::TAU / self.order as f64
    }

    /// Group index for any integer, wrapped into `0..order`.
    pub fn wrap(&self, k: i64) -> usize {
        k.rem_euclid(self.order as i64) as usize
    }

    /// Rotation angle of element `k` in degrees, counter-clockwise.
    pub fn angle_degrees(&self, k: i64) -> f64 {
        self.wrap(k) as f64 * self.step_degrees()
    }

    /// Nearest group element to an arbitrary angle in degrees; exact
    /// midpoints resolve to the smaller index.
    pub fn nearest_index(&self, angle_degrees: f64) -> usize {
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for k in 0..self.order {
            let diff = (angle_degrees - self.angle_degrees(k as i64)).rem_euclid(360.0);
            let dist = diff.min(360.0 - diff);
            if dist + 1e-12 < best_dist {
                best_dist = dist;
                best = k;
            }
        }
        best
    }
}

/// Feature tensor with an explicit group axis: `[B, C, |G|, H, W]`.
/// Slot `g` of channel `c` is channel `c * |G| + g` of the equivalent
/// plain tensor, so regrouping to `[B, C*|G|, H, W]` is a reshape.
#[derive(Debug, Clone)]
pub struct GroupFeatureMap<F: Scalar> {
    values: Tensor<F>,
    group: CyclicGroup,
}

impl<F: Scalar> GroupFeatureMap<F> {
    pub fn new(values: Tensor<F>, group: CyclicGroup) -> Result<Self, EquivariantError> {
        let s = values.shape();
        if s.len() != 5 {
            return Err(bad_shape(format!("group feature map wants [b, c, g, h, w], got {s:?}")));
        }
        if s[2] != group.order() {
            return Err(EquivariantError::OrderMismatch(s[2], group.order()));
        }
        Ok(GroupFeatureMap { values, group })
    }

    /// Reinterprets `[B, C*|G|, H, W]` as a group feature map.
    pub fn from_combined(
        values: &Tensor<F>,
        channels: usize,
        group: CyclicGroup,
    ) -> Result<Self, EquivariantError> {
        let s = values.shape();
        if s.len() != 4 {
            return Err(bad_shape(format!("expected [b, c*g, h, w], got {s:?}")));
        }
        if s[1] != channels * group.order() {
            return Err(bad_shape(format!(
                "{} combined channels cannot split into {channels} x {}",
                s[1],
                group.order()
            )));
        }
        let values = values.reshape(&[s[0], channels, group.order(), s[2], s[3]])?;
        Ok(GroupFeatureMap { values, group })
    }

    pub fn values(&self) -> &Tensor<F> {
        &self.values
    }

    pub fn group(&self) -> CyclicGroup {
        self.group
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[3]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[4]
    }

    /// `[B, C*|G|, H, W]` view for plain convolution arithmetic.
    pub fn combined(&self) -> Result<Tensor<F>, EquivariantError> {
        let s = self.values.shape();
        Ok(self.values.reshape(&[s[0], s[1] * s[2], s[3], s[4]])?)
    }
}

/// Bilinear sampling weights for rotating a k x k kernel by one group
/// element: for each target cell, the source cells and weights it reads.
/// Multiples of 90 degrees use an exact integer cos/sin table, so those
/// stencils are permutations.
fn rotation_stencil(k: usize, angle_index: i64, group: &CyclicGroup) -> Vec<Vec<(usize, f64)>> {
    debug_assert!(k % 2 == 1);
    let g = group.wrap(angle_index);
    let (cos_t, sin_t) = if (4 * g) % group.order() == 0 {
        // Quarter-turn: exact so that 90-degree rotations permute cells.
        match (4 * g) / group.order() {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let theta = g as f64 * group.step_radians();
        (theta.cos(), theta.sin())
    };
    let ctr = (k / 2) as f64;
    let mut cells = Vec::with_capacity(k * k);
    for rt in 0..k {
        for ct in 0..k {
            // Inverse map: target offset rotated by -theta gives the
            // source offset, with rows growing downward.
            let dr = rt as f64 - ctr;
            let dc = ct as f64 - ctr;
            let sr = ctr + dr * cos_t + dc * sin_t;
            let sc = ctr - dr * sin_t + dc * cos_t;
            let r0 = sr.floor();
            let c0 = sc.floor();
            let fr = sr - r0;
            let fc = sc - c0;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
            for (rr, wr) in [(r0, 1.0 - fr), (r0 + 1.0, fr)] {
                for (cc, wc) in [(c0, 1.0 - fc), (c0 + 1.0, fc)] {
                    let w = wr * wc;
                    if w == 0.0 {
                        continue;
                    }
                    if rr >= 0.0 && rr < k as f64 && cc >= 0.0 && cc < k as f64 {
                        taps.push((rr as usize * k + cc as usize, w));
                    }
                }
            }
            cells.push(taps);
        }
    }
    cells
}

/// Rotates a `[k, k]` kernel by `angle_index` group steps about its
/// center (counter-clockwise, bilinear, zero outside the support).
/// Differentiable in the kernel.
pub fn rotate_kernel<F: Scalar>(
    base: &Tensor<F>,
    angle_index: i64,
    group: &CyclicGroup,
) -> Result<Tensor<F>, EquivariantError> {
    let s = base.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(bad_shape(format!("rotate_kernel wants a square [k, k] kernel, got {s:?}")));
    }
    let k = s[0];
    if k % 2 == 0 {
        return Err(EquivariantError::EvenKernel(k));
    }
    let cells = rotation_stencil(k, angle_index, group);
    let mut triplets = Vec::new();
    for (t, taps) in cells.iter().enumerate() {
        for &(src, w) in taps {
            triplets.push((t, src, w));
        }
    }
    let map = Rc::new(LinMap::from_triplets(k * k, k * k, &triplets));
    Ok(base.apply_lin_map(&map, &[k, k])?)
}

/// Sparse map expanding base kernels `[cout, cin, k, k]` into all |G|
/// rotated copies `[cout * |G|, cin, k, k]`, rotation-major within each
/// output channel: expanded channel `co * |G| + g` is the base kernel of
/// channel `co` rotated by `g` steps.
pub fn lifting_expansion(
    group: &CyclicGroup,
    cout: usize,
    cin: usize,
    k: usize,
) -> Result<Rc<LinMap>, EquivariantError> {
    if k % 2 == 0 {
        return Err(EquivariantError::EvenKernel(k));
    }
    let order = group.order();
    let kk = k * k;
    let mut triplets = Vec::new();
    for g in 0..order {
        let cells = rotation_stencil(k, g as i64, group);
        for co in 0..cout {
            for ci in 0..cin {
                let in_base = (co * cin + ci) * kk;
                let out_base = ((co * order + g) * cin + ci) * kk;
                for (t, taps) in cells.iter().enumerate() {
                    for &(src, w) in taps {
                        triplets.push((out_base + t, in_base + src, w));
                    }
                }
            }
        }
    }
    Ok(Rc::new(LinMap::from_triplets(cout * cin * kk, cout * order * cin * kk, &triplets)))
}

/// Sparse map expanding group-domain base kernels `[cout, cin, |G|, k, k]`
/// into the full correlation bank `[cout * |G|, cin * |G|, k, k]`:
///
/// ```text
/// expanded[co*|G|+g][ci*|G|+h] = rotate(base[co][ci][(h - g) mod |G|], g)
/// ```
///
/// so a plain valid convolution with the expanded bank computes the group
/// correlation.
pub fn group_expansion(
    group: &CyclicGroup,
    cout: usize,
    cin: usize,
    k: usize,
) -> Result<Rc<LinMap>, EquivariantError> {
    if k % 2 == 0 {
        return Err(EquivariantError::EvenKernel(k));
    }
    let order = group.order();
    let kk = k * k;
    let mut triplets = Vec::new();
    for g in 0..order {
        let cells = rotation_stencil(k, g as i64, group);
        for co in 0..cout {
            for ci in 0..cin {
                for h in 0..order {
                    let hh = (h + order - g) % order;
                    let in_base = ((co * cin + ci) * order + hh) * kk;
                    let out_base = ((co * order + g) * (cin * order) + (ci * order + h)) * kk;
                    for (t, taps) in cells.iter().enumerate() {
                        for &(src, w) in taps {
                            triplets.push((out_base + t, in_base + src, w));
                        }
                    }
                }
            }
        }
    }
    Ok(Rc::new(LinMap::from_triplets(
        cout * cin * order * kk,
        cout * order * cin * order * kk,
        &triplets,
    )))
}

/// Lifts a plain image into the group domain: output slot `g` of channel
/// `c` is `conv2d_valid(image, rotate_kernel(base[c], g))`.
pub fn lifting_conv<F: Scalar>(
    image: &Tensor<F>,
    base: &Tensor<F>,
    group: &CyclicGroup,
) -> Result<GroupFeatureMap<F>, EquivariantError> {
    let im = image.shape();
    let bs = base.shape();
    if im.len() != 4 {
        return Err(bad_shape(format!("lifting_conv image wants [b, cin, h, w], got {im:?}")));
    }
    if bs.len() != 4 || bs[2] != bs[3] {
        return Err(bad_shape(format!(
            "lifting_conv base wants [c, cin, k, k], got {bs:?}"
        )));
    }
    if im[1] != bs[1] {
        return Err(bad_shape(format!(
            "lifting_conv channel mismatch: image has {}, base expects {}",
            im[1], bs[1]
        )));
    }
    let (cout, cin, k) = (bs[0], bs[1], bs[2]);
    let map = lifting_expansion(group, cout, cin, k)?;
    let expanded = base.apply_lin_map(&map, &[cout * group.order(), cin, k, k])?;
    let out = image.conv2d_valid(&expanded)?;
    GroupFeatureMap::from_combined(&out, cout, *group)
}

/// Group correlation on the regular representation: output slot `g` is
/// `sum over h of conv2d_valid(input slot h, rotate(base[.., (h-g) mod |G|], g))`.
pub fn group_conv<F: Scalar>(
    input: &GroupFeatureMap<F>,
    base: &Tensor<F>,
) -> Result<GroupFeatureMap<F>, EquivariantError> {
    let bs = base.shape();
    if bs.len() != 5 || bs[3] != bs[4] {
        return Err(bad_shape(format!(
            "group_conv base wants [cout, cin, g, k, k], got {bs:?}"
        )));
    }
    let group = input.group();
    if bs[2] != group.order() {
        return Err(EquivariantError::OrderMismatch(bs[2], group.order()));
    }
    if bs[1] != input.channels() {
        return Err(bad_shape(format!(
            "group_conv channel mismatch: input has {}, base expects {}",
            input.channels(),
            bs[1]
        )));
    }
    let (cout, cin, k) = (bs[0], bs[1], bs[3]);
    let map = group_expansion(&group, cout, cin, k)?;
    let expanded = base.apply_lin_map(
        &map,
        &[cout * group.order(), cin * group.order(), k, k],
    )?;
    let out = input.combined()?.conv2d_valid(&expanded)?;
    GroupFeatureMap::from_combined(&out, cout, group)
}

/// Collapses the group axis by max, leaving `[B, C, H, W]`. Invariant to
/// cyclic shifts of its input by construction.
pub fn group_pool<F: Scalar>(input: &GroupFeatureMap<F>) -> Result<Tensor<F>, EquivariantError> {
    Ok(input.values().max_axis(2)?)
}

/// Offset argument of [`cyclic_shift`].
#[derive(Debug, Clone, Copy)]
pub enum ShiftOffsets<'a> {
    /// One offset for the whole tensor.
    Scalar(i64),
    /// One offset per trailing position; tensor must be `[C, |G|, P]`
    /// with `offsets.len() == P`.
    PerPosition(&'a [i64]),
}

/// The shift operator: moves slot content `offset` steps toward higher
/// indices, `out[g] = in[(g - offset) mod |G|]`. Scalar offsets apply to
/// `group_axis` of any tensor; per-position offsets want `[C, |G|, P]`.
pub fn cyclic_shift<F: Scalar>(
    values: &Tensor<F>,
    group_axis: usize,
    offsets: ShiftOffsets<'_>,
) -> Result<Tensor<F>, EquivariantError> {
    let s = values.shape();
    if group_axis >= s.len() {
        return Err(EquivariantError::Tensor(TensorError::AxisOutOfRange {
            axis: group_axis,
            rank: s.len(),
        }));
    }
    match offsets {
        ShiftOffsets::Scalar(o) => {
            let order = s[group_axis] as i64;
            let perm: Vec<usize> =
                (0..order).map(|g| (g - o).rem_euclid(order) as usize).collect();
            Ok(values.index_select(group_axis, &perm)?)
        }
        ShiftOffsets::PerPosition(offs) => {
            if s.len() != 3 || group_axis != 1 {
                return Err(bad_shape(format!(
                    "per-position shift wants [c, g, p] with group_axis 1, got {s:?} axis {group_axis}"
                )));
            }
            Ok(values.group_shift(offs)?)
        }
    }
}

/// Orthonormal directions in `[k, k]` kernel space along which the
/// bilinear rotation stencil tracks true image rotation.
///
/// Correlating a rotated image with a stencil-rotated kernel should
/// match rotating the original correlation. Off the pixel lattice the
/// stencil only approximates that, and how well depends on the kernel:
/// smooth low-order kernels steer almost exactly, pixel-level detail
/// does not. Random dense kernels land mostly in the bad part of the
/// space, which is why untrained rotation invariance needs the init to
/// stay inside the good part.
///
/// The good part is found numerically: correlate a bank of synthetic
/// smooth textures once upright and once rotated by one group step,
/// take per-basis-kernel error fields against the counter-rotated
/// reference, and keep the directions minimizing error energy relative
/// to the (per-texture mean-centered) response energy. Centering
/// matters because batch normalization removes channel means, so any
/// steering quality carried by the mean is lost downstream. The ratio
/// is a generalized symmetric eigenproblem; directions with relative
/// error below 2 percent form the basis.
///
/// Returns `None` when the group only contains quarter turns, where
/// every stencil is an exact permutation and all of kernel space
/// steers.
pub fn steering_basis(
    group: &CyclicGroup,
    k: usize,
) -> Result<Option<Vec<Vec<f64>>>, EquivariantError> {
    if k % 2 == 0 {
        return Err(EquivariantError::EvenKernel(k));
    }
    if 4 % group.order() == 0 {
        return Ok(None);
    }
    let kk = k * k;
    let n = STEER_SIDE;
    let m = n - k + 1;
    let step = rotation_stencil(k, 1, group);
    let (cos_t, sin_t) = (group.step_radians().cos(), group.step_radians().sin());

    // Central output pixels, away from conv borders and the disk edge.
    let ctr = n as f64 / 2.0;
    let half = (n - m) as f64 / 2.0;
    let mid = (m - 1) as f64 / 2.0;
    let reach = m as f64 / 5.0;
    let pix: Vec<(usize, usize)> = (0..m)
        .flat_map(|r| (0..m).map(move |c| (r, c)))
        .filter(|&(r, c)| (r as f64 - mid).abs() <= reach && (c as f64 - mid).abs() <= reach)
        .collect();

    let mut ee = vec![0.0f64; kk * kk];
    let mut cc = vec![0.0f64; kk * kk];
    let mut errs = vec![vec![0.0f64; pix.len()]; kk];
    let mut sigs = vec![vec![0.0f64; pix.len()]; kk];
    for img in steering_content(n) {
        let rot = rotate_texture(&img, n, group.step_degrees());
        for j in 0..kk {
            let mut base = vec![0.0f64; kk];
            base[j] = 1.0;
            let mut turned = vec![0.0f64; kk];
            for (t, taps) in step.iter().enumerate() {
                for &(src, w) in taps {
                    turned[t] += w * base[src];
                }
            }
            let y = conv_valid(&img, n, &base, k);
            let z = conv_valid(&rot, n, &turned, k);
            for (p, &(r, c)) in pix.iter().enumerate() {
                // Equivariance says z equals y at the counter-rotated
                // position; both grids share the image center.
                let dr = r as f64 + 0.5 + half - ctr;
                let dc = c as f64 + 0.5 + half - ctr;
                let sr = ctr + dr * cos_t + dc * sin_t - half - 0.5;
                let sc = ctr - dr * sin_t + dc * cos_t - half - 0.5;
                let reference = bilinear_at(&y, m, sr, sc);
                errs[j][p] = z[r * m + c] - reference;
                sigs[j][p] = reference;
            }
            let mean = sigs[j].iter().sum::<f64>() / pix.len() as f64;
            for s in sigs[j].iter_mut() {
                *s -= mean;
            }
        }
        for a in 0..kk {
            for b in a..kk {
                let de: f64 = errs[a].iter().zip(&errs[b]).map(|(x, y)| x * y).sum();
                let ds: f64 = sigs[a].iter().zip(&sigs[b]).map(|(x, y)| x * y).sum();
                ee[a * kk + b] += de;
                ee[b * kk + a] = ee[a * kk + b];
                cc[a * kk + b] += ds;
                cc[b * kk + a] = cc[a * kk + b];
            }
        }
    }

    let ee = nalgebra::DMatrix::from_fn(kk, kk, |a, b| ee[a * kk + b]);
    let mut cc = nalgebra::DMatrix::from_fn(kk, kk, |a, b| cc[a * kk + b]);
    let ridge = 1e-12 * cc.trace();
    for i in 0..kk {
        cc[(i, i)] += ridge;
    }
    // Whiten by the signal operator, then an ordinary symmetric
    // eigenproblem ranks directions by relative steering error.
    let not_pd = || bad_shape("steering basis: degenerate signal operator".to_string());
    let chol = cc.cholesky().ok_or_else(not_pd)?;
    let l = chol.l();
    let x = l.solve_lower_triangular(&ee).ok_or_else(not_pd)?;
    let b = l.solve_lower_triangular(&x.transpose()).ok_or_else(not_pd)?;
    let b = (&b + &b.transpose()) * 0.5;
    let eig = b.symmetric_eigen();
    let mut order: Vec<usize> = (0..kk).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let lt = l.transpose();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for &i in &order {
        if eig.eigenvalues[i].max(0.0).sqrt() > STEER_CUTOFF && rows.len() >= 2 {
            break;
        }
        let u = eig.eigenvectors.column(i).into_owned();
        let w = lt.solve_upper_triangular(&u).ok_or_else(not_pd)?;
        let mut w: Vec<f64> = w.iter().copied().collect();
        for prev in &rows {
            let d: f64 = w.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (wi, pi) in w.iter_mut().zip(prev) {
                *wi -= d * pi;
            }
        }
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue;
        }
        for v in &mut w {
            *v /= norm;
        }
        rows.push(w);
    }
    if rows.len() < 2 {
        return Err(bad_shape("steering basis: fewer than two usable directions".to_string()));
    }
    Ok(Some(rows))
}

const STEER_SIDE: usize = 64;
const STEER_CUTOFF: f64 = 0.02;

/// The content bank steering is measured on: band-limited textures for
/// what the first layer sees, plus one-sided kinked versions standing in
/// for post-ReLU feature maps, whose corners are where most directions
/// stop steering. Directions good on both survive a deep stack.
fn steering_content(n: usize) -> Vec<Vec<f64>> {
    let mut bank = Vec::with_capacity(8);
    for seed in 0..4 {
        bank.push(steering_texture(n, seed));
    }
    for seed in 100..104 {
        let mut img = steering_texture(n, seed);
        for v in &mut img {
            *v = 0.5 + (*v - 0.5).max(0.0) * 1.6;
        }
        bank.push(img);
    }
    bank
}

/// Band-limited random texture in [0.3, 0.7], masked to a centered disk
/// so one-step rotation maps content onto content.
fn steering_texture(n: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![0.0f64; n * n];
    let band = 4i32;
    for fr in -band..=band {
        for fc in -band..=band {
            if fr * fr + fc * fc > band * band || (fr == 0 && fc == 0) {
                continue;
            }
            let amp = (rng.gen::<f64>() * 2.0 - 1.0) / (1 + fr * fr + fc * fc) as f64;
            let phase = rng.gen::<f64>() * std::f64::consts::TAU;
            for r in 0..n {
                for c in 0..n {
                    let arg = std::f64::consts::TAU
                        * (fr as f64 * r as f64 + fc as f64 * c as f64)
                        / n as f64;
                    img[r * n + c] += amp * (arg + phase).cos();
                }
            }
        }
    }
    let peak = img.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-12);
    let ctr = n as f64 / 2.0;
    let radius = 0.45 * n as f64;
    for r in 0..n {
        for c in 0..n {
            let dr = r as f64 + 0.5 - ctr;
            let dc = c as f64 + 0.5 - ctr;
            img[r * n + c] = if dr.hypot(dc) > radius {
                0.5
            } else {
                0.5 + 0.2 * img[r * n + c] / peak
            };
        }
    }
    img
}

/// Counter-clockwise bilinear rotation about the image center; pixels
/// whose source falls outside get 0.5.
fn rotate_texture(img: &[f64], n: usize, degrees: f64) -> Vec<f64> {
    let theta = degrees.to_radians();
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let ctr = n as f64 / 2.0;
    let mut out = vec![0.5f64; n * n];
    for r in 0..n {
        for c in 0..n {
            let dr = r as f64 + 0.5 - ctr;
            let dc = c as f64 + 0.5 - ctr;
            let sr = ctr + dr * cos_t + dc * sin_t - 0.5;
            let sc = ctr - dr * sin_t + dc * cos_t - 0.5;
            let r0 = sr.floor();
            let c0 = sc.floor();
            if r0 >= 0.0 && c0 >= 0.0 && r0 + 1.0 < n as f64 && c0 + 1.0 < n as f64 {
                out[r * n + c] = bilinear_at(img, n, sr, sc);
            }
        }
    }
    out
}

/// Valid cross-correlation of an `[n, n]` image with a `[k, k]` kernel.
fn conv_valid(img: &[f64], n: usize, w: &[f64], k: usize) -> Vec<f64> {
    let m = n - k + 1;
    let mut out = vec![0.0f64; m * m];
    for (i, wi) in w.iter().enumerate() {
        if *wi == 0.0 {
            continue;
        }
        let (kr, kc) = (i / k, i % k);
        for r in 0..m {
            for c in 0..m {
                out[r * m + c] += wi * img[(r + kr) * n + c + kc];
            }
        }
    }
    out
}

/// Bilinear sample of an `[m, m]` field; all four taps must be in range.
fn bilinear_at(f: &[f64], m: usize, sr: f64, sc: f64) -> f64 {
    let r0 = sr.floor();
    let c0 = sc.floor();
    debug_assert!(r0 >= 0.0 && c0 >= 0.0 && r0 + 1.0 < m as f64 && c0 + 1.0 < m as f64);
    let (r0i, c0i) = (r0 as usize, c0 as usize);
    let (fr, fc) = (sr - r0, sc - c0);
    (1.0 - fr) * ((1.0 - fc) * f[r0i * m + c0i] + fc * f[r0i * m + c0i + 1])
        + fr * ((1.0 - fc) * f[(r0i + 1) * m + c0i] + fc * f[(r0i + 1) * m + c0i + 1])
}
