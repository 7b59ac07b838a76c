//! Self-supervised training-pair factory.
//!
//! One source image becomes a supervised pair: warp it by a random
//! known homography, photometrically jitter both views, and read the
//! ground truth straight off the warp. Correspondences are pixel-center
//! matches between the two network output grids (the network shrinks
//! its input, so both grids sit `crop` pixels inside their images), and
//! the orientation label is the homography's in-plane rotation snapped
//! to the nearest group element.
//!
//! Images are grayscale in [0, 1], row-major f32. The reference corpus
//! is synthetic (value noise, blobs, soft edges); directories of PGM or
//! PNG files load too.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::equivariant::CyclicGroup;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SelfSupError {
    #[error("{0}")]
    Contract(String),
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn contract(msg: impl Into<String>) -> SelfSupError {
    SelfSupError::Contract(msg.into())
}

/// Grayscale image, row-major, values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, SelfSupError> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(contract(format!(
                "image wants {height}x{width} = {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(GrayImage { height, width, data })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        GrayImage { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Untracked `[1, 1, H, W]` tensor, ready for the network.
    pub fn to_tensor<F: Scalar>(&self) -> Result<Tensor<F>, SelfSupError> {
        let data = self.data.iter().map(|&v| F::from_f64(v as f64)).collect();
        Ok(Tensor::from_vec(&[1, 1, self.height, self.width], data)?)
    }

    /// Loads a PGM (binary P5) or PNG file by extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SelfSupError> {
        let path = path.as_ref();
        match extension_of(path)?.as_str() {
            "pgm" => load_pgm(path),
            "png" => load_png(path),
            other => Err(contract(format!("unsupported image extension .{other}"))),
        }
    }

    /// Saves as PGM or PNG by extension, quantizing to 8 bits.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SelfSupError> {
        let path = path.as_ref();
        let bytes: Vec<u8> =
            self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        match extension_of(path)?.as_str() {
            "pgm" => {
                let mut f = std::fs::File::create(path)?;
                write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
                f.write_all(&bytes)?;
                Ok(())
            }
            "png" => {
                let buf = image::ImageBuffer::<image::Luma<u8>, _>::from_raw(
                    self.width as u32,
                    self.height as u32,
                    bytes,
                )
                .expect("buffer sized to the image");
                buf.save(path).map_err(|e| SelfSupError::Image(e.to_string()))
            }
            other => Err(contract(format!("unsupported image extension .{other}"))),
        }
    }
}

fn extension_of(path: &Path) -> Result<String, SelfSupError> {
    path.extension()
        .map(|e| e.to_string_lossy().to_lowercase())
        .ok_or_else(|| contract(format!("no file extension on {}", path.display())))
}

fn load_png(path: &Path) -> Result<GrayImage, SelfSupError> {
    let img = image::open(path).map_err(|e| SelfSupError::Image(e.to_string()))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
    GrayImage::new(h, w, data)
}

fn load_pgm(path: &Path) -> Result<GrayImage, SelfSupError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if !bytes.starts_with(b"P5") {
        return Err(SelfSupError::Image("not a binary PGM (P5)".into()));
    }
    // Header: three whitespace-separated integers after the magic, with
    // # comments running to end of line; one whitespace byte ends it.
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while pos < bytes.len() {
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(SelfSupError::Image("malformed PGM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| SelfSupError::Image("malformed PGM header".into()))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 255 {
        return Err(SelfSupError::Image(format!("unsupported PGM maxval {maxval}")));
    }
    pos += 1;
    if bytes.len() < pos + w * h {
        return Err(SelfSupError::Image("PGM pixel data truncated".into()));
    }
    let data =
        bytes[pos..pos + w * h].iter().map(|&b| b as f32 / maxval as f32).collect();
    GrayImage::new(h, w, data)
}

/// Loads every .pgm/.png in a directory, sorted by file name so corpus
/// order is deterministic.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<(String, GrayImage)>, SelfSupError> {
    let mut names: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(dir.as_ref())? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let lower = name.to_lowercase();
        if lower.ends_with(".pgm") || lower.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    names
        .into_iter()
        .map(|n| GrayImage::load(dir.as_ref().join(&n)).map(|img| (n, img)))
        .collect()
}

/// Plane projective transform on pixel-center coordinates `(row, col)`,
/// with its in-plane rotation angle kept alongside for orientation
/// labels. Matrix is row-major, bottom-right normalized to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Homography {
    m: [f64; 9],
    rotation_degrees: f64,
}

impl Homography {
    pub fn identity() -> Self {
        Homography { m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], rotation_degrees: 0.0 }
    }

    /// translate ∘ rotate ∘ scale ∘ perspective, all about the center of
    /// an `height` x `width` image. Translation is in pixels, rotation
    /// counter-clockwise degrees, scale isotropic, perspective the two
    /// bottom-row terms in centered coordinates.
    #[allow(clippy::too_many_arguments)]
    pub fn compose_about_center(
        rotation_degrees: f64,
        scale: f64,
        translate_rows: f64,
        translate_cols: f64,
        perspective_rows: f64,
        perspective_cols: f64,
        height: usize,
        width: usize,
    ) -> Result<Self, SelfSupError> {
        let (cr, cc) = (height as f64 / 2.0, width as f64 / 2.0);
        let theta = rotation_degrees.to_radians();
        let (sin_t, cos_t) = theta.sin_cos();
        let rotate_scale = [
            scale * cos_t,
            -scale * sin_t,
            0.0,
            scale * sin_t,
            scale * cos_t,
            0.0,
            0.0,
            0.0,
            1.0,
        ];
        let perspective = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, perspective_rows, perspective_cols, 1.0];
        let to_center = [1.0, 0.0, -cr, 0.0, 1.0, -cc, 0.0, 0.0, 1.0];
        let from_center =
            [1.0, 0.0, cr + translate_rows, 0.0, 1.0, cc + translate_cols, 0.0, 0.0, 1.0];
        let m = mat3_mul(&from_center, &mat3_mul(&rotate_scale, &mat3_mul(&perspective, &to_center)));
        let m = normalize_h(m)?;
        if mat3_det(&m).abs() <= 1e-8 {
            return Err(contract("degenerate homography".to_string()));
        }
        Ok(Homography { m, rotation_degrees })
    }

    pub fn matrix(&self) -> &[f64; 9] {
        &self.m
    }

    pub fn rotation_degrees(&self) -> f64 {
        self.rotation_degrees
    }

    /// Forward map of a point, `(row, col)` in, `(row, col)` out.
    pub fn apply(&self, row: f64, col: f64) -> (f64, f64) {
        let m = &self.m;
        let w = m[6] * row + m[7] * col + m[8];
        ((m[0] * row + m[1] * col + m[2]) / w, (m[3] * row + m[4] * col + m[5]) / w)
    }

    pub fn inverse(&self) -> Result<Homography, SelfSupError> {
        let inv = mat3_inv(&self.m).ok_or_else(|| contract("homography not invertible"))?;
        Ok(Homography { m: normalize_h(inv)?, rotation_degrees: -self.rotation_degrees })
    }
}

fn mat3_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = (0..3).map(|k| a[r * 3 + k] * b[k * 3 + c]).sum();
        }
    }
    out
}

fn mat3_det(m: &[f64; 9]) -> f64 {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6])
}

fn mat3_inv(m: &[f64; 9]) -> Option<[f64; 9]> {
    let det = mat3_det(m);
    if det.abs() <= 1e-12 {
        return None;
    }
    let adj = [
        m[4] * m[8] - m[5] * m[7],
        m[2] * m[7] - m[1] * m[8],
        m[1] * m[5] - m[2] * m[4],
        m[5] * m[6] - m[3] * m[8],
        m[0] * m[8] - m[2] * m[6],
        m[2] * m[3] - m[0] * m[5],
        m[3] * m[7] - m[4] * m[6],
        m[1] * m[6] - m[0] * m[7],
        m[0] * m[4] - m[1] * m[3],
    ];
    Some(std::array::from_fn(|i| adj[i] / det))
}

fn normalize_h(m: [f64; 9]) -> Result<[f64; 9], SelfSupError> {
    if m[8].abs() <= 1e-12 {
        return Err(contract("homography bottom-right vanishes"));
    }
    Ok(std::array::from_fn(|i| m[i] / m[8]))
}

/// Sampling ranges for [`sample_homography`]. Defaults follow the
/// training setup: rotations within ±22.34 degrees, mild scale,
/// translation and perspective jitter.
#[derive(Debug, Clone)]
pub struct HomographySpec {
    /// Rotation bound in degrees; draws are uniform in ±this.
    pub rotation_degrees: f64,
    pub scale: (f64, f64),
    /// Translation bound as a fraction of each image dimension.
    pub translation_frac: f64,
    /// Bound on the two perspective terms.
    pub perspective: f64,
}

impl Default for HomographySpec {
    fn default() -> Self {
        HomographySpec {
            rotation_degrees: 22.34,
            scale: (0.85, 1.15),
            translation_frac: 0.05,
            perspective: 5e-4,
        }
    }
}

impl HomographySpec {
    /// Unrestricted in-plane rotation, for rotation-robustness training.
    pub fn full_rotation() -> Self {
        HomographySpec { rotation_degrees: 180.0, ..Default::default() }
    }
}

/// Draws a random homography about the image center. Draw order is
/// rotation, scale, translation (rows then cols), perspective (rows
/// then cols); degenerate samples are redrawn.
pub fn sample_homography(
    rng: &mut ChaCha8Rng,
    spec: &HomographySpec,
    height: usize,
    width: usize,
) -> Result<Homography, SelfSupError> {
    let sym = |rng: &mut ChaCha8Rng, b: f64| (rng.gen::<f64>() * 2.0 - 1.0) * b;
    for _ in 0..16 {
        let rotation = sym(rng, spec.rotation_degrees);
        let scale = spec.scale.0 + rng.gen::<f64>() * (spec.scale.1 - spec.scale.0);
        let t_r = sym(rng, spec.translation_frac) * height as f64;
        let t_c = sym(rng, spec.translation_frac) * width as f64;
        let p_r = sym(rng, spec.perspective);
        let p_c = sym(rng, spec.perspective);
        if let Ok(h) =
            Homography::compose_about_center(rotation, scale, t_r, t_c, p_r, p_c, height, width)
        {
            return Ok(h);
        }
    }
    Err(contract("could not draw an invertible homography in 16 tries"))
}

/// Warps by inverse-map bilinear sampling: output pixel centers pull
/// from `h.inverse()` positions in the source; any pixel whose sample
/// would read outside the source is mid-gray 0.5.
pub fn warp_image(image: &GrayImage, h: &Homography) -> Result<GrayImage, SelfSupError> {
    let inv = h.inverse()?;
    let (ht, wd) = (image.height, image.width);
    let mut out = vec![0.5f32; ht * wd];
    for r in 0..ht {
        for c in 0..wd {
            let (sr, sc) = inv.apply(r as f64 + 0.5, c as f64 + 0.5);
            // To array index space: pixel (i, j) holds the sample at
            // (i + 0.5, j + 0.5). Snap near-lattice positions so exact
            // rotations do not leak hairline out-of-bounds taps.
            let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
            let (ar, ac) = (snap(sr - 0.5), snap(sc - 0.5));
            let (r0, c0) = (ar.floor(), ac.floor());
            let (fr, fc) = (ar - r0, ac - c0);
            let mut acc = 0.0f64;
            let mut ok = true;
            for (ri, wr) in [(r0, 1.0 - fr), (r0 + 1.0, fr)] {
                for (ci, wc) in [(c0, 1.0 - fc), (c0 + 1.0, fc)] {
                    let w = wr * wc;
                    if w == 0.0 {
                        continue;
                    }
                    if ri < 0.0 || ci < 0.0 || ri >= ht as f64 || ci >= wd as f64 {
                        ok = false;
                    } else {
                        acc += w * image.data[ri as usize * wd + ci as usize] as f64;
                    }
                }
            }
            if ok {
                out[r * wd + c] = acc as f32;
            }
        }
    }
    GrayImage::new(ht, wd, out)
}

/// Ground-truth matches between two network output grids.
#[derive(Debug, Clone)]
pub struct CorrespondenceSet {
    /// (pixel index in A's output grid, pixel index in B's), row-major.
    pub pairs: Vec<(usize, usize)>,
    /// The homography's rotation snapped to the nearest group element.
    pub gt_orientation_index: usize,
    pub homography: Homography,
}

/// Maps every pixel center of A's output grid through the homography,
/// rounds to B's nearest output-grid pixel, keeps in-bounds hits, and
/// drops every many-to-one collision so the set is bijective. Output
/// grids sit `crop` pixels inside their images on each side.
pub fn compute_correspondences(
    h: &Homography,
    shape_a: (usize, usize),
    shape_b: (usize, usize),
    crop: usize,
    group: &CyclicGroup,
) -> Result<CorrespondenceSet, SelfSupError> {
    let grid = |(ht, wd): (usize, usize)| -> Result<(usize, usize), SelfSupError> {
        if ht <= 2 * crop || wd <= 2 * crop {
            return Err(contract(format!("image {ht}x{wd} too small for crop {crop} per side")));
        }
        Ok((ht - 2 * crop, wd - 2 * crop))
    };
    let (ga_h, ga_w) = grid(shape_a)?;
    let (gb_h, gb_w) = grid(shape_b)?;

    let mut candidates = Vec::new();
    let mut hits = vec![0u32; gb_h * gb_w];
    for ar in 0..ga_h {
        for ac in 0..ga_w {
            let (pr, pc) = h.apply((ar + crop) as f64 + 0.5, (ac + crop) as f64 + 0.5);
            let br = (pr - crop as f64 - 0.5).round();
            let bc = (pc - crop as f64 - 0.5).round();
            if br < 0.0 || bc < 0.0 || br >= gb_h as f64 || bc >= gb_w as f64 {
                continue;
            }
            let ib = br as usize * gb_w + bc as usize;
            hits[ib] += 1;
            candidates.push((ar * ga_w + ac, ib));
        }
    }
    let pairs = candidates.into_iter().filter(|&(_, ib)| hits[ib] == 1).collect();
    Ok(CorrespondenceSet {
        pairs,
        gt_orientation_index: group.nearest_index(h.rotation_degrees()),
        homography: h.clone(),
    })
}

/// Jitter magnitudes for [`photometric_augment`]: brightness shift
/// ±`brightness`, contrast factor 1 ± `contrast` about mid-gray, gamma
/// exponent 1 ± `gamma`, additive Gaussian noise of `noise_sigma`.
/// Zero magnitudes skip their stage entirely.
#[derive(Debug, Clone)]
pub struct PhotometricSpec {
    pub brightness: f64,
    pub contrast: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
}

impl Default for PhotometricSpec {
    fn default() -> Self {
        PhotometricSpec { brightness: 0.2, contrast: 0.2, gamma: 0.2, noise_sigma: 0.02 }
    }
}

impl PhotometricSpec {
    pub fn none() -> Self {
        PhotometricSpec { brightness: 0.0, contrast: 0.0, gamma: 0.0, noise_sigma: 0.0 }
    }
}

/// Random photometric jitter, clamped to [0, 1]. Stages apply in order
/// brightness, contrast, gamma, noise; each draws only if its magnitude
/// is nonzero, so the all-zero spec is the bit-exact identity.
pub fn photometric_augment(
    image: &GrayImage,
    rng: &mut ChaCha8Rng,
    spec: &PhotometricSpec,
) -> Result<GrayImage, SelfSupError> {
    if spec.brightness < 0.0 || spec.contrast < 0.0 || spec.gamma < 0.0 || spec.noise_sigma < 0.0 {
        return Err(contract("photometric magnitudes must be nonnegative"));
    }
    let mut data: Vec<f64> = image.data.iter().map(|&v| v as f64).collect();
    let mut touched = false;
    if spec.brightness > 0.0 {
        let b = (rng.gen::<f64>() * 2.0 - 1.0) * spec.brightness;
        for v in &mut data {
            *v += b;
        }
        touched = true;
    }
    if spec.contrast > 0.0 {
        let f = 1.0 + (rng.gen::<f64>() * 2.0 - 1.0) * spec.contrast;
        for v in &mut data {
            *v = 0.5 + (*v - 0.5) * f;
        }
        touched = true;
    }
    if spec.gamma > 0.0 {
        let g = 1.0 + (rng.gen::<f64>() * 2.0 - 1.0) * spec.gamma;
        for v in &mut data {
            *v = v.clamp(0.0, 1.0).powf(g);
        }
        touched = true;
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| contract(format!("bad noise sigma: {e}")))?;
        for v in &mut data {
            *v += normal.sample(rng);
        }
        touched = true;
    }
    if !touched {
        return Ok(image.clone());
    }
    let data = data.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    GrayImage::new(image.height, image.width, data)
}

/// One supervised pair: a source view, its warped view, and the ground
/// truth connecting their output grids. Correspondences may be empty
/// for extreme warps; the trainer skips such pairs.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub image_a: GrayImage,
    pub image_b: GrayImage,
    pub correspondences: CorrespondenceSet,
}

/// Builds a training pair from one image: sample a homography, warp,
/// jitter both views independently, and compute ground truth from the
/// geometry alone.
pub fn training_pair(
    image: &GrayImage,
    rng: &mut ChaCha8Rng,
    warp: &HomographySpec,
    photo: &PhotometricSpec,
    group: &CyclicGroup,
    crop: usize,
) -> Result<TrainingPair, SelfSupError> {
    let h = sample_homography(rng, warp, image.height, image.width)?;
    let warped = warp_image(image, &h)?;
    let shape = (image.height, image.width);
    let correspondences = compute_correspondences(&h, shape, shape, crop, group)?;
    let image_a = photometric_augment(image, rng, photo)?;
    let image_b = photometric_augment(&warped, rng, photo)?;
    Ok(TrainingPair { image_a, image_b, correspondences })
}

/// Deterministic synthetic corpus: multi-octave value noise with random
/// soft blobs and edges. Enough texture for keypoint learning, no real
/// data required.
pub fn synth_corpus(seed: u64, n: usize, size: usize) -> Vec<GrayImage> {
    (0..n).map(|i| synth_image(seed, i as u64, size)).collect()
}

fn synth_image(seed: u64, index: u64, size: usize) -> GrayImage {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    let n = size;
    let mut img = vec![0.0f64; n * n];

    // Value noise: bilinear lattices at halving cell sizes.
    let mut amp = 1.0f64;
    let mut cell = (n / 6).max(2);
    while cell >= 2 {
        let lat = n / cell + 2;
        let lattice: Vec<f64> = (0..lat * lat).map(|_| rng.gen::<f64>()).collect();
        for r in 0..n {
            for c in 0..n {
                let (gr, gc) = (r as f64 / cell as f64, c as f64 / cell as f64);
                let (r0, c0) = (gr.floor() as usize, gc.floor() as usize);
                let (fr, fc) = (gr.fract(), gc.fract());
                let v00 = lattice[r0 * lat + c0];
                let v01 = lattice[r0 * lat + c0 + 1];
                let v10 = lattice[(r0 + 1) * lat + c0];
                let v11 = lattice[(r0 + 1) * lat + c0 + 1];
                img[r * n + c] +=
                    amp * ((1.0 - fr) * ((1.0 - fc) * v00 + fc * v01)
                        + fr * ((1.0 - fc) * v10 + fc * v11));
            }
        }
        amp *= 0.55;
        cell /= 2;
    }

    // Normalize the noise to a fixed interior range before decorating.
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &img {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-9);
    for v in &mut img {
        *v = 0.15 + 0.7 * (*v - lo) / span;
    }

    for _ in 0..6 {
        let (br, bc) = (rng.gen::<f64>() * n as f64, rng.gen::<f64>() * n as f64);
        let sigma = n as f64 / 40.0 + rng.gen::<f64>() * n as f64 / 10.0;
        let amp = (rng.gen::<f64>() * 2.0 - 1.0) * 0.25;
        for r in 0..n {
            for c in 0..n {
                let d2 = (r as f64 + 0.5 - br).powi(2) + (c as f64 + 0.5 - bc).powi(2);
                img[r * n + c] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }

    for _ in 0..2 {
        let phi = rng.gen::<f64>() * std::f64::consts::TAU;
        let (nr, nc) = (phi.sin(), phi.cos());
        let offset = (rng.gen::<f64>() * 2.0 - 1.0) * n as f64 / 4.0;
        let width = 1.0 + rng.gen::<f64>() * 3.0;
        let amp = (rng.gen::<f64>() * 2.0 - 1.0) * 0.15;
        let ctr = n as f64 / 2.0;
        for r in 0..n {
            for c in 0..n {
                let d = (r as f64 + 0.5 - ctr) * nr + (c as f64 + 0.5 - ctr) * nc - offset;
                img[r * n + c] += amp * (d / width).tanh();
            }
        }
    }

    let data = img.into_iter().map(|v| v.clamp(0.02, 0.98) as f32).collect();
    GrayImage { height: n, width: n, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn smooth(n: usize) -> GrayImage {
        let mut data = vec![0.0f32; n * n];
        for r in 0..n {
            for c in 0..n {
                let (y, x) = (r as f64 / n as f64, c as f64 / n as f64);
                let v = 0.5
                    + 0.2 * (std::f64::consts::TAU * (1.3 * y + 2.1 * x)).sin()
                    + 0.15 * (std::f64::consts::TAU * (3.0 * y - 1.0 * x) + 0.7).cos();
                data[r * n + c] = v.clamp(0.05, 0.95) as f32;
            }
        }
        GrayImage::new(n, n, data).unwrap()
    }

    #[test]
    fn zero_parameters_compose_to_the_identity() {
        let h = Homography::compose_about_center(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 60, 80).unwrap();
        for (i, &v) in h.matrix().iter().enumerate() {
            let want = if i % 4 == 0 { 1.0 } else { 0.0 };
            assert_relative_eq!(v, want, epsilon = 1e-12);
        }
        assert_eq!(h.rotation_degrees(), 0.0);
    }

    #[test]
    fn rotation_only_matrix_is_analytic() {
        let (n, theta) = (64usize, 45f64.to_radians());
        let h = Homography::compose_about_center(45.0, 1.0, 0.0, 0.0, 0.0, 0.0, n, n).unwrap();
        let (sin_t, cos_t) = theta.sin_cos();
        let ctr = n as f64 / 2.0;
        let want = [
            cos_t,
            -sin_t,
            ctr * (1.0 - cos_t) + ctr * sin_t,
            sin_t,
            cos_t,
            ctr * (1.0 - cos_t) - ctr * sin_t,
            0.0,
            0.0,
            1.0,
        ];
        for (got, want) in h.matrix().iter().zip(want) {
            assert_relative_eq!(got, &want, epsilon = 1e-6);
        }
        // The center is the fixed point.
        let (r, c) = h.apply(ctr, ctr);
        assert_relative_eq!(r, ctr, epsilon = 1e-9);
        assert_relative_eq!(c, ctr, epsilon = 1e-9);
    }

    #[test]
    fn composition_matches_a_matrix_product_oracle() {
        let (rot, s, tr, tc, pr, pc) = (17.0f64, 1.08, 3.5, -2.25, 3e-4, -4e-4);
        let h = Homography::compose_about_center(rot, s, tr, tc, pr, pc, 50, 70).unwrap();
        let (cr, cc) = (25.0, 35.0);
        let theta = rot.to_radians();
        let rs = [
            s * theta.cos(),
            -s * theta.sin(),
            0.0,
            s * theta.sin(),
            s * theta.cos(),
            0.0,
            0.0,
            0.0,
            1.0,
        ];
        let p = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, pr, pc, 1.0];
        let t0 = [1.0, 0.0, -cr, 0.0, 1.0, -cc, 0.0, 0.0, 1.0];
        let t1 = [1.0, 0.0, cr + tr, 0.0, 1.0, cc + tc, 0.0, 0.0, 1.0];
        let want = normalize_h(mat3_mul(&t1, &mat3_mul(&rs, &mat3_mul(&p, &t0)))).unwrap();
        for (got, want) in h.matrix().iter().zip(want) {
            assert_relative_eq!(got, &want, epsilon = 1e-6);
        }
    }

    #[test]
    fn inverse_composes_to_identity() {
        let h =
            Homography::compose_about_center(30.0, 1.1, 4.0, -3.0, 2e-4, -3e-4, 64, 64).unwrap();
        let inv = h.inverse().unwrap();
        assert_eq!(inv.rotation_degrees(), -30.0);
        let prod = mat3_mul(h.matrix(), inv.matrix());
        let prod = normalize_h(prod).unwrap();
        for (i, &v) in prod.iter().enumerate() {
            let want = if i % 4 == 0 { 1.0 } else { 0.0 };
            assert_relative_eq!(v, want, epsilon = 1e-9);
        }
    }

    #[test]
    fn sampled_rotations_respect_the_spec_range() {
        let spec = HomographySpec::default();
        let mut r = rng(11);
        for _ in 0..1000 {
            let h = sample_homography(&mut r, &spec, 100, 120).unwrap();
            assert!(h.rotation_degrees().abs() <= 22.34);
            assert!(mat3_det(h.matrix()).abs() > 1e-8);
        }
        let full = HomographySpec::full_rotation();
        let any_large = (0..100)
            .any(|_| sample_homography(&mut r, &full, 100, 100).unwrap().rotation_degrees().abs() > 90.0);
        assert!(any_large, "full-rotation mode never left the small-angle range");
    }

    #[test]
    fn warp_by_identity_is_bit_exact() {
        let img = smooth(40);
        let out = warp_image(&img, &Homography::identity()).unwrap();
        assert_eq!(img.data(), out.data());
    }

    #[test]
    fn warp_by_quarter_turn_matches_lattice_rot90() {
        let n = 40;
        let img = smooth(n);
        let h = Homography::compose_about_center(90.0, 1.0, 0.0, 0.0, 0.0, 0.0, n, n).unwrap();
        let out = warp_image(&img, &h).unwrap();
        // CCW quarter turn on the lattice: out[r][c] = in[c][n-1-r].
        for r in 0..n {
            for c in 0..n {
                let want = img.get(c, n - 1 - r);
                assert_relative_eq!(out.get(r, c), want, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn warp_round_trip_recovers_the_interior() {
        let n = 64;
        let img = smooth(n);
        let h =
            Homography::compose_about_center(15.0, 1.05, 2.0, -1.5, 2e-4, 1e-4, n, n).unwrap();
        let there = warp_image(&img, &h).unwrap();
        let back = warp_image(&there, &h.inverse().unwrap()).unwrap();
        let margin = n / 4;
        let mut worst = 0.0f32;
        for r in margin..n - margin {
            for c in margin..n - margin {
                worst = worst.max((back.get(r, c) - img.get(r, c)).abs());
            }
        }
        assert!(worst < 0.02, "round-trip max abs error {worst}");
    }

    #[test]
    fn identity_correspondences_cover_the_grid() {
        let group = CyclicGroup::new(8).unwrap();
        let set =
            compute_correspondences(&Homography::identity(), (86, 86), (86, 86), 18, &group)
                .unwrap();
        assert_eq!(set.pairs.len(), 50 * 50);
        assert!(set.pairs.iter().all(|&(a, b)| a == b));
        assert_eq!(set.gt_orientation_index, 0);
    }

    #[test]
    fn orientation_labels_snap_to_the_nearest_group_element() {
        let group = CyclicGroup::new(8).unwrap();
        let n = 80usize;
        for (deg, want) in [(45.0, 1usize), (22.0, 0), (23.0, 1), (90.0, 2), (-45.0, 7)] {
            let h =
                Homography::compose_about_center(deg, 1.0, 0.0, 0.0, 0.0, 0.0, n, n).unwrap();
            let set = compute_correspondences(&h, (n, n), (n, n), 18, &group).unwrap();
            assert_eq!(set.gt_orientation_index, want, "rotation {deg}");
        }
    }

    #[test]
    fn correspondences_reject_images_smaller_than_the_crop() {
        let group = CyclicGroup::new(8).unwrap();
        assert!(
            compute_correspondences(&Homography::identity(), (36, 50), (50, 50), 18, &group)
                .is_err()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// Bijectivity and the half-pixel geometric bound hold for any
        /// sampled homography.
        #[test]
        fn correspondences_are_bijective_and_geometrically_tight(seed in 0u64..5000) {
            let group = CyclicGroup::new(8).unwrap();
            let mut r = rng(seed);
            let spec = HomographySpec { rotation_degrees: 180.0, ..Default::default() };
            let n = 70usize;
            let crop = 12usize;
            let h = sample_homography(&mut r, &spec, n, n).unwrap();
            let set = compute_correspondences(&h, (n, n), (n, n), crop, &group).unwrap();

            let grid = n - 2 * crop;
            let mut seen_a = vec![false; grid * grid];
            let mut seen_b = vec![false; grid * grid];
            for &(ia, ib) in &set.pairs {
                prop_assert!(ia < grid * grid && ib < grid * grid);
                prop_assert!(!seen_a[ia], "i_A {ia} repeats");
                prop_assert!(!seen_b[ib], "i_B {ib} repeats");
                seen_a[ia] = true;
                seen_b[ib] = true;

                let (ar, ac) = (ia / grid, ia % grid);
                let (br, bc) = (ib / grid, ib % grid);
                let (pr, pc) = h.apply((ar + crop) as f64 + 0.5, (ac + crop) as f64 + 0.5);
                let dr = (pr - ((br + crop) as f64 + 0.5)).abs();
                let dc = (pc - ((bc + crop) as f64 + 0.5)).abs();
                prop_assert!(dr <= 0.5 + 1e-9 && dc <= 0.5 + 1e-9, "pair off by ({dr}, {dc})");
            }
        }
    }

    #[test]
    fn zero_magnitude_augmentation_is_the_identity() {
        let img = smooth(32);
        let out = photometric_augment(&img, &mut rng(3), &PhotometricSpec::none()).unwrap();
        assert_eq!(img.data(), out.data());
    }

    #[test]
    fn brightness_alone_shifts_a_constant_image() {
        let img = GrayImage::constant(8, 8, 0.5);
        // A brightness bound always shifts by its drawn value; pin the
        // draw by checking against the same RNG stream.
        let spec = PhotometricSpec { brightness: 0.1, contrast: 0.0, gamma: 0.0, noise_sigma: 0.0 };
        let mut r1 = rng(7);
        let shift = (r1.gen::<f64>() * 2.0 - 1.0) * 0.1;
        let out = photometric_augment(&img, &mut rng(7), &spec).unwrap();
        for &v in out.data() {
            assert_relative_eq!(v as f64, 0.5 + shift, epsilon = 1e-7);
        }
    }

    #[test]
    fn augmented_images_stay_inside_the_unit_interval() {
        let img = smooth(24);
        let spec = PhotometricSpec::default();
        let mut r = rng(5);
        for _ in 0..1000 {
            let out = photometric_augment(&img, &mut r, &spec).unwrap();
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn corpus_is_deterministic_sized_and_textured() {
        let a = synth_corpus(42, 6, 96);
        let b = synth_corpus(42, 6, 96);
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data());
            assert_eq!((x.height(), x.width()), (96, 96));
            let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / x.data().len() as f64;
            let var = x
                .data()
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / x.data().len() as f64;
            assert!(var.sqrt() > 0.05, "flat texture: std {}", var.sqrt());
            assert!(x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // Different seeds give different corpora.
        let c = synth_corpus(43, 1, 96);
        assert_ne!(a[0].data(), c[0].data());
    }

    #[test]
    fn pgm_and_png_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let img = synth_corpus(9, 1, 40).remove(0);
        // 8-bit quantization happens on save; saving the loaded image
        // again must be lossless.
        for name in ["img.pgm", "img.png"] {
            let path = dir.path().join(name);
            img.save(&path).unwrap();
            let once = GrayImage::load(&path).unwrap();
            once.save(&path).unwrap();
            let twice = GrayImage::load(&path).unwrap();
            assert_eq!(once.data(), twice.data());
            assert_eq!((once.height(), once.width()), (img.height(), img.width()));
            let worst = img
                .data()
                .iter()
                .zip(once.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(worst <= 0.5 / 255.0 + 1e-6, "quantization error {worst}");
        }
    }

    #[test]
    fn pgm_parser_handles_comments_and_rejects_junk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, b"P5\n# a comment\n2 2\n# another\n255\n\x00\x40\x80\xff").unwrap();
        let img = GrayImage::load(&path).unwrap();
        assert_eq!((img.height(), img.width()), (2, 2));
        assert_relative_eq!(img.get(1, 1), 1.0);

        let bad = dir.path().join("bad.pgm");
        std::fs::write(&bad, b"P6\n2 2\n255\nxxxx").unwrap();
        assert!(GrayImage::load(&bad).is_err());
        let short = dir.path().join("short.pgm");
        std::fs::write(&short, b"P5\n4 4\n255\nxx").unwrap();
        assert!(GrayImage::load(&short).is_err());
    }

    #[test]
    fn corpus_directory_loads_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = synth_corpus(1, 3, 24);
        imgs[0].save(dir.path().join("b.pgm")).unwrap();
        imgs[1].save(dir.path().join("a.png")).unwrap();
        imgs[2].save(dir.path().join("c.pgm")).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "ignore me").unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        let names: Vec<&str> = loaded.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["a.png", "b.pgm", "c.pgm"]);
    }

    #[test]
    fn training_pairs_carry_consistent_ground_truth() {
        let group = CyclicGroup::new(8).unwrap();
        let img = synth_corpus(3, 1, 80).remove(0);
        let mut r = rng(21);
        let pair = training_pair(
            &img,
            &mut r,
            &HomographySpec::default(),
            &PhotometricSpec::default(),
            &group,
            18,
        )
        .unwrap();
        assert!(!pair.correspondences.pairs.is_empty());
        assert!(pair.image_a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(pair.image_b.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // The warped view without augmentation must agree with B's
        // geometry: check one correspondence against a direct warp.
        let plain = warp_image(&img, &pair.correspondences.homography).unwrap();
        assert_eq!((plain.height(), plain.width()), (img.height(), img.width()));
    }
}
