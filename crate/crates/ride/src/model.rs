//! The network: a shared rotation-equivariant backbone feeding a keypoint
//! head and a descriptor head, with orientation estimation, descriptor
//! alignment, keypoint extraction, and checkpoint round-trips.
//!
//! All convolutions are 5x5, valid (no padding), bias-free. Backbone
//! convolutions are each followed by BatchNorm and then ReLU; the two head
//! convolutions are raw. Nothing pools spatially, so an input of H x W
//! comes out as H-36 x W-36 under the standard four-block plans (nine
//! convolutions deep on every input-to-output path).
//!
//! Invariance mechanism, independent of training: rotating the input by a
//! group step permutes the group axis of every feature map. The keypoint
//! map collapses that axis with a max, so it rotates with the image; the
//! descriptors cancel the permutation by cyclically shifting each pixel's
//! group axis by its estimated orientation before flattening.

use std::cell::RefCell;
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::equivariant::{
    cyclic_shift, group_expansion, group_pool, lifting_expansion, steering_basis, CyclicGroup,
    EquivariantError, GroupFeatureMap, ShiftOffsets,
};
use crate::tensor::container::{self, ContainerError, NamedTensor};
use crate::tensor::{LinMap, Scalar, Tensor, TensorError};

/// BatchNorm running-statistics update rate.
const BN_MOMENTUM: f64 = 0.1;
/// BatchNorm variance floor.
const BN_EPS: f64 = 1e-5;
/// Checkpoint metadata layout version.
const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("input {0}x{1} too small: the network shrinks {2} pixels per axis")]
    InputTooSmall(usize, usize, usize),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Equivariant(#[from] EquivariantError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

fn contract(msg: impl Into<String>) -> ModelError {
    ModelError::Contract(msg.into())
}

/// Architecture plan. `block_channels[i]` is the group-channel width of
/// backbone block `i`; every block is two convolutions wide. The heads
/// add one more convolution each, so any input-to-output path crosses
/// `2 * blocks + 1` kernels and the spatial crop is that times
/// `kernel_size - 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RideConfig {
    pub group_order: usize,
    pub block_channels: Vec<usize>,
    /// Descriptor head group-channels; descriptor length is this times
    /// `group_order`.
    pub descriptor_channels: usize,
    pub kernel_size: usize,
}

impl RideConfig {
    /// Standard plan: 128-length descriptors, combined widths
    /// 64/64/128/128 over the group axis.
    pub fn ride() -> Self {
        Self {
            group_order: 8,
            block_channels: vec![8, 8, 16, 16],
            descriptor_channels: 16,
            kernel_size: 5,
        }
    }

    /// Doubled plan: 256-length descriptors.
    pub fn ride_l() -> Self {
        Self {
            group_order: 8,
            block_channels: vec![16, 16, 32, 32],
            descriptor_channels: 32,
            kernel_size: 5,
        }
    }

    /// Narrow plan with the full depth (same 36-pixel crop) sized for CPU
    /// training runs; 64-length descriptors.
    pub fn desk() -> Self {
        Self {
            group_order: 8,
            block_channels: vec![4, 4, 8, 8],
            descriptor_channels: 8,
            kernel_size: 5,
        }
    }

    /// Two-block miniature for finite-difference work.
    pub fn toy(group_order: usize) -> Self {
        Self {
            group_order,
            block_channels: vec![2, 3],
            descriptor_channels: 2,
            kernel_size: 5,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        CyclicGroup::new(self.group_order).map_err(|e| ModelError::BadConfig(e.to_string()))?;
        if self.block_channels.is_empty() || self.block_channels.contains(&0) {
            return Err(ModelError::BadConfig(format!(
                "block channels must be non-empty and positive, got {:?}",
                self.block_channels
            )));
        }
        if self.descriptor_channels == 0 {
            return Err(ModelError::BadConfig("descriptor channels must be positive".into()));
        }
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 {
            return Err(ModelError::BadConfig(format!(
                "kernel size must be odd and at least 3, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Convolutions crossed by any input-to-output path.
    pub fn path_depth(&self) -> usize {
        2 * self.block_channels.len() + 1
    }

    /// Total spatial shrink per axis: `path_depth * (kernel_size - 1)`.
    pub fn crop_total(&self) -> usize {
        self.path_depth() * (self.kernel_size - 1)
    }

    /// Flattened descriptor length `descriptor_channels * group_order`.
    pub fn descriptor_dim(&self) -> usize {
        self.descriptor_channels * self.group_order
    }

    /// Backbone group-channel widths, one entry per convolution.
    fn backbone_widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(2 * self.block_channels.len());
        for &c in &self.block_channels {
            w.push(c);
            w.push(c);
        }
        w
    }
}

/// One backbone convolution with its normalization state. The kernel
/// holds base weights only; `expansion` maps them onto the full rotated
/// bank at forward time, so every parameter stays shared across the group.
struct BackboneLayer<F: Scalar> {
    /// Lifting layer: `[cout, 1, k, k]`. Group layer: `[cout, cin, |G|, k, k]`.
    kernel: Tensor<F>,
    expansion: Rc<LinMap>,
    lifting: bool,
    cin: usize,
    cout: usize,
    gamma: Tensor<F>,
    beta: Tensor<F>,
    running_mean: RefCell<Vec<F>>,
    running_var: RefCell<Vec<F>>,
}

/// Head convolution: no normalization, no activation.
struct HeadLayer<F: Scalar> {
    kernel: Tensor<F>,
    expansion: Rc<LinMap>,
    cin: usize,
    cout: usize,
}

/// Whether BatchNorm uses batch statistics (and updates the running ones)
/// or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Eval,
}

/// Per-pixel keypoint scores `[B, H', W']`, each in (0, 1).
#[derive(Debug, Clone)]
pub struct KeypointScoreMap<F: Scalar> {
    values: Tensor<F>,
}

impl<F: Scalar> KeypointScoreMap<F> {
    pub fn new(values: Tensor<F>) -> Result<Self, ModelError> {
        if values.rank() != 3 {
            return Err(contract(format!(
                "keypoint score map wants [b, h, w], got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor<F> {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Per-pixel distribution over group elements `[B, |G|, H', W']`; the raw
/// head output until `normalized` marks a softmax over the group axis.
#[derive(Debug, Clone)]
pub struct OrientationHistogram<F: Scalar> {
    values: Tensor<F>,
    normalized: bool,
}

impl<F: Scalar> OrientationHistogram<F> {
    pub fn new(values: Tensor<F>, normalized: bool) -> Result<Self, ModelError> {
        if values.rank() != 4 {
            return Err(contract(format!(
                "orientation histogram wants [b, g, h, w], got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values, normalized })
    }

    pub fn values(&self) -> &Tensor<F> {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn group_order(&self) -> usize {
        self.values.shape()[1]
    }

    /// Softmax over the group axis; a no-op if already applied.
    pub fn normalized(&self) -> Result<Self, ModelError> {
        if self.normalized {
            return Ok(self.clone());
        }
        Ok(Self { values: self.values.softmax(1)?, normalized: true })
    }
}

/// Dense unit-length descriptors `[B, C_D * |G|, H', W']`, channel-major
/// over (channel, group).
#[derive(Debug, Clone)]
pub struct DescriptorMap<F: Scalar> {
    values: Tensor<F>,
}

impl<F: Scalar> DescriptorMap<F> {
    pub fn new(values: Tensor<F>) -> Result<Self, ModelError> {
        if values.rank() != 4 {
            return Err(contract(format!(
                "descriptor map wants [b, d, h, w], got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor<F> {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[3]
    }

    /// Gathers descriptors at flat pixel indices (row-major over H' x W')
    /// into `[dim, n]`, differentiable. Batch must be 1.
    pub fn sample_pixels(&self, pixels: &[usize]) -> Result<Tensor<F>, ModelError> {
        let s = self.values.shape().to_vec();
        if s[0] != 1 {
            return Err(contract(format!("sample_pixels wants batch 1, got {}", s[0])));
        }
        let (d, p) = (s[1], s[2] * s[3]);
        if let Some(&bad) = pixels.iter().find(|&&i| i >= p) {
            return Err(contract(format!("pixel index {bad} out of range for {p} pixels")));
        }
        let flat = self.values.reshape(&[d, p])?;
        Ok(flat.index_select(1, pixels)?)
    }
}

/// Forward products: the raw head feature maps plus the derived keypoint
/// scores and orientation histogram. `v` is the first descriptor channel,
/// unnormalized.
pub struct RideOutput<F: Scalar> {
    pub f_k: GroupFeatureMap<F>,
    pub f_d: GroupFeatureMap<F>,
    pub k: KeypointScoreMap<F>,
    pub v: OrientationHistogram<F>,
}

pub struct RideModel<F: Scalar> {
    config: RideConfig,
    group: CyclicGroup,
    backbone: Vec<BackboneLayer<F>>,
    detector: HeadLayer<F>,
    descriptor: HeadLayer<F>,
}

/// Fan-in initialization with Kaiming-style magnitude `b = gain * sqrt(3 / fan_in)`,
/// fan-in taken over the expanded convolution the base kernel becomes.
///
/// Without a steering basis each weight is an independent `U(-b, b)`
/// draw. With one, each `[k, k]` slice is a random combination of the
/// basis directions scaled to the same mean square as the plain draw,
/// so untrained filters already rotate cleanly through the bilinear
/// stencils; training is free to leave the subspace.
fn init_kernel<F: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    gain_sq: f64,
    steering: Option<&[Vec<f64>]>,
) -> Result<Tensor<F>, TensorError> {
    let bound = (3.0 * gain_sq / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = match steering {
        None => (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound).collect(),
        Some(rows) => {
            let k = *shape.last().unwrap();
            let kk = k * k;
            // Orthonormal rows: coefficient bound a with a^2 * dim / kk
            // = bound^2 keeps the expected weight variance unchanged.
            let a = bound * (kk as f64 / rows.len() as f64).sqrt();
            let mut data = vec![0.0f64; n];
            for slice in data.chunks_mut(kk) {
                for row in rows {
                    let c = (rng.gen::<f64>() * 2.0 - 1.0) * a;
                    for (w, b) in slice.iter_mut().zip(row) {
                        *w += c * b;
                    }
                }
            }
            data
        }
    };
    Tensor::param(shape, data.into_iter().map(F::from_f64).collect())
}

impl<F: Scalar> RideModel<F> {
    pub fn new(config: RideConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let group = CyclicGroup::new(config.group_order)
            .map_err(|e| ModelError::BadConfig(e.to_string()))?;
        let order = group.order();
        let k = config.kernel_size;
        let kk = k * k;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steering =
            steering_basis(&group, k).map_err(|e| ModelError::BadConfig(e.to_string()))?;
        let steering = steering.as_deref();

        let widths = config.backbone_widths();
        let mut backbone = Vec::with_capacity(widths.len());
        let mut cin = 1usize;
        for (i, &cout) in widths.iter().enumerate() {
            let lifting = i == 0;
            let (kernel, expansion) = if lifting {
                let fan_in = cin * kk;
                (
                    init_kernel(&mut rng, &[cout, cin, k, k], fan_in, 2.0, steering)?,
                    lifting_expansion(&group, cout, cin, k)?,
                )
            } else {
                let fan_in = cin * order * kk;
                (
                    init_kernel(&mut rng, &[cout, cin, order, k, k], fan_in, 2.0, steering)?,
                    group_expansion(&group, cout, cin, k)?,
                )
            };
            backbone.push(BackboneLayer {
                kernel,
                expansion,
                lifting,
                cin,
                cout,
                gamma: Tensor::param(&[cout], vec![F::one(); cout])?,
                beta: Tensor::param(&[cout], vec![F::zero(); cout])?,
                running_mean: RefCell::new(vec![F::zero(); cout]),
                running_var: RefCell::new(vec![F::one(); cout]),
            });
            cin = cout;
        }

        let head = |rng: &mut ChaCha8Rng, cout: usize| -> Result<HeadLayer<F>, ModelError> {
            let fan_in = cin * order * kk;
            Ok(HeadLayer {
                kernel: init_kernel(rng, &[cout, cin, order, k, k], fan_in, 1.0, steering)?,
                expansion: group_expansion(&group, cout, cin, k)?,
                cin,
                cout,
            })
        };
        let detector = head(&mut rng, 1)?;
        let descriptor = head(&mut rng, config.descriptor_channels)?;

        Ok(Self { config, group, backbone, detector, descriptor })
    }

    pub fn config(&self) -> &RideConfig {
        &self.config
    }

    pub fn group(&self) -> CyclicGroup {
        self.group
    }

    /// Expands base weights onto the rotated bank and runs the valid
    /// convolution; `combined` is `[B, cin_combined, H, W]`.
    fn conv(
        &self,
        combined: &Tensor<F>,
        kernel: &Tensor<F>,
        expansion: &Rc<LinMap>,
        cin: usize,
        cout: usize,
        lifting: bool,
    ) -> Result<Tensor<F>, ModelError> {
        let order = self.group.order();
        let k = self.config.kernel_size;
        let bank_shape = if lifting {
            [cout * order, cin, k, k]
        } else {
            [cout * order, cin * order, k, k]
        };
        let bank = kernel.apply_lin_map(expansion, &bank_shape)?;
        Ok(combined.conv2d_valid(&bank)?)
    }

    /// BatchNorm over `[B, C*|G|, H, W]` with statistics per group-channel,
    /// pooled across batch, group and space; sharing statistics over the
    /// group axis is what keeps normalization equivariant.
    fn batch_norm(
        &self,
        layer: &BackboneLayer<F>,
        combined: &Tensor<F>,
        mode: ForwardMode,
    ) -> Result<Tensor<F>, ModelError> {
        let s = combined.shape().to_vec();
        let (b, cg, h, w) = (s[0], s[1], s[2], s[3]);
        let c = layer.cout;
        let x3 = combined.reshape(&[b, c, (cg / c) * h * w])?;
        let y3 = match mode {
            ForwardMode::Train => {
                let (y, mean, var) = x3.batch_norm_train(&layer.gamma, &layer.beta, BN_EPS)?;
                let mom = F::from_f64(BN_MOMENTUM);
                let keep = F::one() - mom;
                let mut rm = layer.running_mean.borrow_mut();
                let mut rv = layer.running_var.borrow_mut();
                for i in 0..c {
                    rm[i] = keep * rm[i] + mom * mean[i];
                    rv[i] = keep * rv[i] + mom * var[i];
                }
                y
            }
            ForwardMode::Eval => {
                let rm = layer.running_mean.borrow();
                let rv = layer.running_var.borrow();
                let ga = layer.gamma.data();
                let be = layer.beta.data();
                let eps = F::from_f64(BN_EPS);
                let mut scale = vec![F::zero(); c];
                let mut shift = vec![F::zero(); c];
                for i in 0..c {
                    scale[i] = ga[i] / (rv[i] + eps).sqrt();
                    shift[i] = be[i] - rm[i] * scale[i];
                }
                drop(ga);
                drop(be);
                let sc = Tensor::from_vec(&[c], scale)?;
                let sh = Tensor::from_vec(&[c], shift)?;
                x3.affine_channels(&sc, &sh)?
            }
        };
        Ok(y3.reshape(&[b, cg, h, w])?)
    }

    /// Runs the full network on a grayscale batch `[B, 1, H, W]` in [0, 1].
    pub fn forward(&self, image: &Tensor<F>, mode: ForwardMode) -> Result<RideOutput<F>, ModelError> {
        let s = image.shape().to_vec();
        if s.len() != 4 || s[1] != 1 {
            return Err(contract(format!("forward wants [b, 1, h, w], got {s:?}")));
        }
        let crop = self.config.crop_total();
        if s[2] <= crop || s[3] <= crop {
            return Err(ModelError::InputTooSmall(s[2], s[3], crop));
        }

        let mut x = image.clone();
        for layer in &self.backbone {
            let y = self.conv(&x, &layer.kernel, &layer.expansion, layer.cin, layer.cout, layer.lifting)?;
            x = self.batch_norm(layer, &y, mode)?.relu();
        }

        let trunk = GroupFeatureMap::from_combined(&x, self.backbone.last().unwrap().cout, self.group)?;
        let f_k_combined = self.conv(
            &x,
            &self.detector.kernel,
            &self.detector.expansion,
            self.detector.cin,
            self.detector.cout,
            false,
        )?;
        let f_d_combined = self.conv(
            &x,
            &self.descriptor.kernel,
            &self.descriptor.expansion,
            self.descriptor.cin,
            self.descriptor.cout,
            false,
        )?;
        drop(trunk);

        let f_k = GroupFeatureMap::from_combined(&f_k_combined, 1, self.group)?;
        let f_d = GroupFeatureMap::from_combined(&f_d_combined, self.config.descriptor_channels, self.group)?;

        let (b, hp, wp) = (s[0], s[2] - crop, s[3] - crop);
        let k = group_pool(&f_k)?.reshape(&[b, hp, wp])?.sigmoid();
        let order = self.group.order();
        let v = f_d
            .values()
            .index_select(1, &[0])?
            .reshape(&[b, order, hp, wp])?;

        Ok(RideOutput {
            f_k,
            f_d,
            k: KeypointScoreMap::new(k)?,
            v: OrientationHistogram::new(v, false)?,
        })
    }

    /// Learnable leaves in a stable order, named for checkpoints and logs.
    pub fn parameters(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        for (i, layer) in self.backbone.iter().enumerate() {
            out.push((format!("backbone{i}.kernel"), layer.kernel.clone()));
            out.push((format!("backbone{i}.gamma"), layer.gamma.clone()));
            out.push((format!("backbone{i}.beta"), layer.beta.clone()));
        }
        out.push(("detector.kernel".into(), self.detector.kernel.clone()));
        out.push(("descriptor.kernel".into(), self.descriptor.kernel.clone()));
        out
    }

    /// Writes weights, normalization statistics and plan metadata as one
    /// tensor container. Values are stored as f32.
    pub fn save(&self, path: &Path, iteration: u64) -> Result<(), ModelError> {
        let c = &self.config;
        let mut meta = vec![
            CHECKPOINT_FORMAT as f32,
            c.group_order as f32,
            c.kernel_size as f32,
            c.descriptor_channels as f32,
            c.block_channels.len() as f32,
        ];
        meta.extend(c.block_channels.iter().map(|&b| b as f32));
        meta.push(iteration as f32);
        let mut tensors = vec![NamedTensor::new("meta", vec![meta.len()], meta)];
        for (name, t) in self.parameters() {
            tensors.push(NamedTensor::new(name, t.shape().to_vec(), t.to_f32_vec()));
        }
        for (i, layer) in self.backbone.iter().enumerate() {
            let rm: Vec<f32> = layer.running_mean.borrow().iter().map(|&v| Scalar::to_f64(v) as f32).collect();
            let rv: Vec<f32> = layer.running_var.borrow().iter().map(|&v| Scalar::to_f64(v) as f32).collect();
            tensors.push(NamedTensor::new(format!("backbone{i}.running_mean"), vec![layer.cout], rm));
            tensors.push(NamedTensor::new(format!("backbone{i}.running_var"), vec![layer.cout], rv));
        }
        container::save(path, &tensors)?;
        Ok(())
    }

    /// Rebuilds a model from [`RideModel::save`] output; returns it with
    /// the stored iteration count.
    pub fn load(path: &Path) -> Result<(Self, u64), ModelError> {
        let tensors = container::load(path)?;
        let meta = container::find(&tensors, "meta")
            .ok_or_else(|| contract("checkpoint has no meta record".to_string()))?;
        if meta.data.len() < 6 || meta.data[0] != CHECKPOINT_FORMAT as f32 {
            return Err(contract(format!(
                "unsupported checkpoint metadata (format tag {:?})",
                meta.data.first()
            )));
        }
        let blocks = meta.data[4] as usize;
        if meta.data.len() != 6 + blocks {
            return Err(contract(format!(
                "checkpoint metadata wants {} entries, got {}",
                6 + blocks,
                meta.data.len()
            )));
        }
        let config = RideConfig {
            group_order: meta.data[1] as usize,
            kernel_size: meta.data[2] as usize,
            descriptor_channels: meta.data[3] as usize,
            block_channels: meta.data[5..5 + blocks].iter().map(|&v| v as usize).collect(),
        };
        let iteration = meta.data[5 + blocks] as u64;

        let model = Self::new(config, 0)?;
        let fill = |name: &str, target: &Tensor<F>| -> Result<(), ModelError> {
            let src = container::find(&tensors, name)
                .ok_or_else(|| contract(format!("checkpoint is missing {name}")))?;
            if src.shape != target.shape() {
                return Err(contract(format!(
                    "checkpoint {name} has shape {:?}, model wants {:?}",
                    src.shape,
                    target.shape()
                )));
            }
            let mut d = target.data_mut();
            for (dst, &v) in d.iter_mut().zip(&src.data) {
                *dst = F::from_f64(v as f64);
            }
            Ok(())
        };
        for (name, t) in model.parameters() {
            fill(&name, &t)?;
        }
        let fill_stats = |name: &str, target: &RefCell<Vec<F>>| -> Result<(), ModelError> {
            let src = container::find(&tensors, name)
                .ok_or_else(|| contract(format!("checkpoint is missing {name}")))?;
            let mut d = target.borrow_mut();
            if src.data.len() != d.len() {
                return Err(contract(format!(
                    "checkpoint {name} has {} values, model wants {}",
                    src.data.len(),
                    d.len()
                )));
            }
            for (dst, &v) in d.iter_mut().zip(&src.data) {
                *dst = F::from_f64(v as f64);
            }
            Ok(())
        };
        for (i, layer) in model.backbone.iter().enumerate() {
            fill_stats(&format!("backbone{i}.running_mean"), &layer.running_mean)?;
            fill_stats(&format!("backbone{i}.running_var"), &layer.running_var)?;
        }
        Ok((model, iteration))
    }

    /// Flat copies of every parameter followed by every normalization
    /// statistic, in a fixed order matching [`RideModel::set_state`].
    pub(crate) fn state(&self) -> Vec<Vec<F>> {
        let mut out: Vec<Vec<F>> =
            self.parameters().iter().map(|(_, t)| t.data().clone()).collect();
        for layer in &self.backbone {
            out.push(layer.running_mean.borrow().clone());
            out.push(layer.running_var.borrow().clone());
        }
        out
    }

    /// Restores a [`RideModel::state`] snapshot taken from a model with
    /// the same plan.
    pub(crate) fn set_state(&self, state: &[Vec<F>]) -> Result<(), ModelError> {
        let params = self.parameters();
        let want = params.len() + 2 * self.backbone.len();
        if state.len() != want {
            return Err(contract(format!("state wants {want} vectors, got {}", state.len())));
        }
        for ((name, t), src) in params.iter().zip(state) {
            if t.numel() != src.len() {
                return Err(contract(format!(
                    "state for {name} wants {} values, got {}",
                    t.numel(),
                    src.len()
                )));
            }
            t.data_mut().copy_from_slice(src);
        }
        for (i, layer) in self.backbone.iter().enumerate() {
            for (slot, src) in
                [(&layer.running_mean, &state[params.len() + 2 * i]), (&layer.running_var, &state[params.len() + 2 * i + 1])]
            {
                let mut d = slot.borrow_mut();
                if d.len() != src.len() {
                    return Err(contract(format!(
                        "state statistics for layer {i} want {} values, got {}",
                        d.len(),
                        src.len()
                    )));
                }
                d.copy_from_slice(src);
            }
        }
        Ok(())
    }
}

/// Per-pixel argmax over the group axis, ties to the smallest index.
/// Returns row-major `[B, H', W']` group indices.
pub fn estimate_orientation<F: Scalar>(
    v: &OrientationHistogram<F>,
) -> Result<Vec<usize>, ModelError> {
    Ok(v.values().argmax_axis(1)?)
}

/// Cancels each pixel's rotation: shifts its group axis by minus the
/// orientation index, flattens (channel, group) channel-major, and
/// normalizes to unit length. `orientations` is row-major `[B, H', W']`.
///
/// The batch-1 path is differentiable; larger batches are aligned per
/// image and returned detached.
pub fn invariant_descriptors<F: Scalar>(
    f_d: &GroupFeatureMap<F>,
    orientations: &[usize],
) -> Result<DescriptorMap<F>, ModelError> {
    let (b, c, g) = (f_d.batch(), f_d.channels(), f_d.group().order());
    let (h, w) = (f_d.height(), f_d.width());
    let p = h * w;
    if orientations.len() != b * p {
        return Err(contract(format!(
            "got {} orientations for {} pixels",
            orientations.len(),
            b * p
        )));
    }
    if let Some(&bad) = orientations.iter().find(|&&o| o >= g) {
        return Err(contract(format!("orientation {bad} out of range for group order {g}")));
    }

    if b == 1 {
        let offsets: Vec<i64> = orientations.iter().map(|&o| -(o as i64)).collect();
        let aligned = cyclic_shift(
            &f_d.values().reshape(&[c, g, p])?,
            1,
            ShiftOffsets::PerPosition(&offsets),
        )?;
        let flat = aligned.reshape(&[1, c * g, p])?.l2_normalize(1)?;
        return DescriptorMap::new(flat.reshape(&[1, c * g, h, w])?);
    }

    let values = f_d.values().detach();
    let mut out = vec![F::zero(); b * c * g * p];
    for bi in 0..b {
        let slice = values.index_select(0, &[bi])?;
        let one = GroupFeatureMap::new(slice, f_d.group())?;
        let d = invariant_descriptors(&one, &orientations[bi * p..(bi + 1) * p])?;
        out[bi * c * g * p..(bi + 1) * c * g * p].copy_from_slice(&d.values().data());
    }
    DescriptorMap::new(Tensor::from_vec(&[b, c * g, h, w], out)?)
}

/// A detected keypoint: output-grid position and score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint<F: Scalar> {
    pub row: usize,
    pub col: usize,
    pub score: F,
}

/// The `k` highest-scoring pixels, descending score, ties in row-major
/// position order; everything if fewer exist. No non-maximum suppression.
/// Batch must be 1.
pub fn top_k_keypoints<F: Scalar>(
    map: &KeypointScoreMap<F>,
    k: usize,
) -> Result<Vec<Keypoint<F>>, ModelError> {
    if map.batch() != 1 {
        return Err(contract(format!("top_k wants batch 1, got {}", map.batch())));
    }
    let w = map.width();
    let data = map.values().data();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        data[b].to_f64().total_cmp(&data[a].to_f64()).then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order
        .into_iter()
        .map(|i| Keypoint { row: i / w, col: i % w, score: data[i] })
        .collect())
}
