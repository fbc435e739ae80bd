//! Minimal 3D network engine: the fixed residual denoising topology, forward
//! and reverse passes, ADAM training and weight serialization.
//!
//! The engine computes in f64 but parameters are kept at f32 precision (every
//! mutation snaps them back to the nearest f32 value), so the f32 weight file
//! round-trips bit-exactly.

pub mod layers;
mod tensor;
mod train;
mod weights_io;

pub use layers::{conv3d_same, instance_norm, NORM_EPS};
pub use tensor::Tensor;
pub use train::{
    loss, train, AdamConfig, AdamState, EpochStats, LossKind, TrainConfig, TrainOutcome,
};
pub use weights_io::{load_weights, save_weights};

use crate::error::{Error, Result};
use layers::{
    batch_norm, batch_norm_backward, conv3d_same_backward, instance_norm_backward, relu,
    relu_backward, NormStats, KERNEL_VOLUME,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Which statistics a normalization layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// Per-sample statistics; the default.
    Instance,
    /// Whole-minibatch statistics; kept for training comparisons. With a
    /// batch of one (inference) it coincides with instance normalization.
    Batch,
}

/// One layer of the fixed topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// 3x3x3 convolution with zero "same" padding.
    Conv3d {
        in_channels: usize,
        out_channels: usize,
    },
    Norm {
        channels: usize,
        affine: bool,
        kind: NormKind,
    },
    Relu,
}

/// The denoising topology: an input convolution block, `blocks` repeated
/// normalization/convolution/ReLU blocks, and a non-affine normalization
/// followed by the output convolution.
pub fn architecture(filters: usize, blocks: usize, norm: NormKind) -> Vec<LayerSpec> {
    let mut spec = Vec::with_capacity(3 * blocks + 4);
    spec.push(LayerSpec::Conv3d {
        in_channels: 1,
        out_channels: filters,
    });
    spec.push(LayerSpec::Relu);
    for _ in 0..blocks {
        spec.push(LayerSpec::Norm {
            channels: filters,
            affine: true,
            kind: norm,
        });
        spec.push(LayerSpec::Conv3d {
            in_channels: filters,
            out_channels: filters,
        });
        spec.push(LayerSpec::Relu);
    }
    spec.push(LayerSpec::Norm {
        channels: filters,
        affine: false,
        kind: norm,
    });
    spec.push(LayerSpec::Conv3d {
        in_channels: filters,
        out_channels: 1,
    });
    spec
}

/// The full-size topology: 64 filters, 7 internal blocks, instance
/// normalization. Exactly 779,009 trainable parameters.
pub fn canonical_architecture() -> Vec<LayerSpec> {
    architecture(64, 7, NormKind::Instance)
}

/// Total trainable parameter count of a layer list.
pub fn parameter_count(spec: &[LayerSpec]) -> usize {
    spec.iter()
        .map(|l| match *l {
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
            } => out_channels * in_channels * KERNEL_VOLUME + out_channels,
            LayerSpec::Norm {
                channels,
                affine: true,
                ..
            } => 2 * channels,
            _ => 0,
        })
        .sum()
}

/// FNV-1a digest of the layer list; stored in weight files so mismatched
/// loads fail loudly.
pub fn architecture_fingerprint(spec: &[LayerSpec]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = OFFSET;
    let mut eat = |byte: u8| {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(PRIME);
    };
    let eat_u32 = |h: &mut dyn FnMut(u8), v: u32| {
        for b in v.to_le_bytes() {
            h(b);
        }
    };
    for layer in spec {
        match *layer {
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
            } => {
                eat(0);
                eat_u32(&mut eat, in_channels as u32);
                eat_u32(&mut eat, out_channels as u32);
            }
            LayerSpec::Norm {
                channels,
                affine,
                kind,
            } => {
                eat(1);
                eat_u32(&mut eat, channels as u32);
                eat(affine as u8);
                eat(match kind {
                    NormKind::Instance => 0,
                    NormKind::Batch => 1,
                });
            }
            LayerSpec::Relu => eat(2),
        }
    }
    hash
}

/// One parameter block (convolution kernel or bias, normalization scale or
/// shift), shaped as written to the weight file.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    fn zeros(dims: Vec<usize>) -> ParamTensor {
        let n = dims.iter().product();
        ParamTensor {
            dims,
            data: vec![0.0; n],
        }
    }
}

/// Rounds to the nearest f32 value; parameters always live on the f32 grid.
#[inline]
pub(crate) fn snap_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Where each layer's parameters sit in the flat parameter list.
#[derive(Debug, Clone, Copy)]
enum LayerParams {
    Conv { kernel: usize, bias: usize },
    Affine { scale: usize, shift: usize },
    None,
}

fn param_layout(spec: &[LayerSpec]) -> Vec<LayerParams> {
    let mut next = 0;
    spec.iter()
        .map(|l| match *l {
            LayerSpec::Conv3d { .. } => {
                let p = LayerParams::Conv {
                    kernel: next,
                    bias: next + 1,
                };
                next += 2;
                p
            }
            LayerSpec::Norm { affine: true, .. } => {
                let p = LayerParams::Affine {
                    scale: next,
                    shift: next + 1,
                };
                next += 2;
                p
            }
            _ => LayerParams::None,
        })
        .collect()
}

fn param_dims(spec: &[LayerSpec]) -> Vec<Vec<usize>> {
    let mut dims = Vec::new();
    for layer in spec {
        match *layer {
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
            } => {
                dims.push(vec![out_channels, in_channels, 3, 3, 3]);
                dims.push(vec![out_channels]);
            }
            LayerSpec::Norm {
                channels,
                affine: true,
                ..
            } => {
                dims.push(vec![channels]);
                dims.push(vec![channels]);
            }
            _ => {}
        }
    }
    dims
}

/// A topology together with its trainable parameters.
#[derive(Debug, Clone)]
pub struct Network {
    spec: Vec<LayerSpec>,
    params: Vec<ParamTensor>,
}

/// Per-layer state retained by a cached forward pass.
enum NormCache {
    PerSample(Vec<NormStats>),
    Joint(NormStats),
}

struct ForwardCache {
    /// `activations[l]` holds the batch of inputs to layer `l`; the final
    /// entry is the network output.
    activations: Vec<Vec<Tensor>>,
    norm_stats: Vec<Option<NormCache>>,
}

impl Network {
    /// Seeded initialization: fan-in-scaled uniform convolution kernels, zero
    /// biases, unit scale and zero shift on affine normalizations.
    pub fn init(spec: Vec<LayerSpec>, seed: u64) -> Result<Network> {
        validate_spec(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for layer in &spec {
            match *layer {
                LayerSpec::Conv3d {
                    in_channels,
                    out_channels,
                } => {
                    let fan_in = (in_channels * KERNEL_VOLUME) as f64;
                    let limit = (6.0 / fan_in).sqrt();
                    let mut kernel =
                        ParamTensor::zeros(vec![out_channels, in_channels, 3, 3, 3]);
                    for w in &mut kernel.data {
                        *w = snap_f32(rng.random_range(-limit..limit));
                    }
                    params.push(kernel);
                    params.push(ParamTensor::zeros(vec![out_channels]));
                }
                LayerSpec::Norm {
                    channels,
                    affine: true,
                    ..
                } => {
                    params.push(ParamTensor {
                        dims: vec![channels],
                        data: vec![1.0; channels],
                    });
                    params.push(ParamTensor::zeros(vec![channels]));
                }
                _ => {}
            }
        }
        Ok(Network { spec, params })
    }

    /// Builds a network from a layer list and matching parameter tensors.
    pub fn from_parts(spec: Vec<LayerSpec>, params: Vec<ParamTensor>) -> Result<Network> {
        validate_spec(&spec)?;
        let expected = param_dims(&spec);
        if params.len() != expected.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "{} parameter tensors provided, architecture needs {}",
                params.len(),
                expected.len()
            )));
        }
        for (i, (p, dims)) in params.iter().zip(&expected).enumerate() {
            if &p.dims != dims {
                return Err(Error::ArchitectureMismatch(format!(
                    "parameter tensor {i} has dims {:?}, expected {dims:?}",
                    p.dims
                )));
            }
            if p.data.len() != dims.iter().product::<usize>() {
                return Err(Error::ArchitectureMismatch(format!(
                    "parameter tensor {i} length does not match its dims"
                )));
            }
            if !p.data.iter().all(|v| v.is_finite()) {
                return Err(Error::ArchitectureMismatch(format!(
                    "parameter tensor {i} contains non-finite values"
                )));
            }
        }
        Ok(Network { spec, params })
    }

    pub fn spec(&self) -> &[LayerSpec] {
        &self.spec
    }

    pub fn params(&self) -> &[ParamTensor] {
        &self.params
    }

    /// Mutable parameter access; values are snapped to f32 precision when the
    /// borrow ends via [`Network::renormalize_params`], which callers should
    /// invoke after hand-editing.
    pub fn params_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.params
    }

    /// Snaps every parameter back onto the f32 grid.
    pub fn renormalize_params(&mut self) {
        for p in &mut self.params {
            for v in &mut p.data {
                *v = snap_f32(*v);
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(&self.spec)
    }

    pub fn fingerprint(&self) -> u64 {
        architecture_fingerprint(&self.spec)
    }

    pub fn input_channels(&self) -> usize {
        match self.spec.first() {
            Some(&LayerSpec::Conv3d { in_channels, .. }) => in_channels,
            _ => 1,
        }
    }

    fn layer_scale_shift(&self, layout: &LayerParams) -> (Option<&[f64]>, Option<&[f64]>) {
        match *layout {
            LayerParams::Affine { scale, shift } => (
                Some(self.params[scale].data.as_slice()),
                Some(self.params[shift].data.as_slice()),
            ),
            _ => (None, None),
        }
    }

    /// Inference on a single patch (batch of one).
    pub fn forward(&self, patch: &Tensor) -> Result<Tensor> {
        let mut out = self.forward_batch(std::slice::from_ref(patch))?;
        Ok(out.pop().expect("batch of one"))
    }

    /// Inference on a batch. Deterministic; safe to call concurrently on a
    /// shared network.
    pub fn forward_batch(&self, batch: &[Tensor]) -> Result<Vec<Tensor>> {
        self.check_batch(batch)?;
        let layout = param_layout(&self.spec);
        let mut current: Vec<Tensor> = batch.to_vec();
        for (layer, lp) in self.spec.iter().zip(&layout) {
            current = self.apply_layer(layer, lp, current, None)?;
        }
        Ok(current)
    }

    fn check_batch(&self, batch: &[Tensor]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let channels = self.input_channels();
        let dims = batch[0].dims;
        for t in batch {
            if t.channels != channels {
                return Err(Error::ArchitectureMismatch(format!(
                    "input has {} channels, network expects {channels}",
                    t.channels
                )));
            }
            if t.dims != dims {
                return Err(Error::ShapeMismatch(
                    "all batch tensors must share spatial dims".into(),
                ));
            }
        }
        Ok(())
    }

    /// Applies one layer to a batch; when `cache` is given, stores the state
    /// the reverse pass needs.
    fn apply_layer(
        &self,
        layer: &LayerSpec,
        lp: &LayerParams,
        batch: Vec<Tensor>,
        cache: Option<&mut Option<NormCache>>,
    ) -> Result<Vec<Tensor>> {
        match *layer {
            LayerSpec::Conv3d { out_channels, .. } => {
                let (kernel, bias) = match *lp {
                    LayerParams::Conv { kernel, bias } => {
                        (&self.params[kernel].data, &self.params[bias].data)
                    }
                    _ => unreachable!("conv layer without conv params"),
                };
                debug_assert_eq!(bias.len(), out_channels);
                batch
                    .par_iter()
                    .map(|t| conv3d_same(t, kernel, bias))
                    .collect()
            }
            LayerSpec::Relu => Ok(batch.par_iter().map(relu).collect()),
            LayerSpec::Norm { kind, .. } => {
                let (scale, shift) = self.layer_scale_shift(lp);
                match kind {
                    NormKind::Instance => {
                        let results: Vec<(Tensor, NormStats)> = batch
                            .par_iter()
                            .map(|t| instance_norm(t, scale, shift, NORM_EPS))
                            .collect();
                        let mut outs = Vec::with_capacity(results.len());
                        let mut stats = Vec::with_capacity(results.len());
                        for (o, s) in results {
                            outs.push(o);
                            stats.push(s);
                        }
                        if let Some(slot) = cache {
                            *slot = Some(NormCache::PerSample(stats));
                        }
                        Ok(outs)
                    }
                    NormKind::Batch => {
                        let (outs, stats) = batch_norm(&batch, scale, shift, NORM_EPS);
                        if let Some(slot) = cache {
                            *slot = Some(NormCache::Joint(stats));
                        }
                        Ok(outs)
                    }
                }
            }
        }
    }

    fn forward_batch_cached(&self, batch: &[Tensor]) -> Result<ForwardCache> {
        self.check_batch(batch)?;
        let layout = param_layout(&self.spec);
        let mut activations: Vec<Vec<Tensor>> = Vec::with_capacity(self.spec.len() + 1);
        let mut norm_stats: Vec<Option<NormCache>> = Vec::with_capacity(self.spec.len());
        activations.push(batch.to_vec());
        for (layer, lp) in self.spec.iter().zip(&layout) {
            let mut slot = None;
            let input = activations.last().expect("seeded").clone();
            let out = self.apply_layer(layer, lp, input, Some(&mut slot))?;
            norm_stats.push(slot);
            activations.push(out);
        }
        Ok(ForwardCache {
            activations,
            norm_stats,
        })
    }

    /// Reverse pass over a batch: gradients of the mean per-sample loss with
    /// respect to every parameter tensor, plus the batch loss itself.
    ///
    /// Per-sample contributions are reduced in batch order, so the result is
    /// deterministic regardless of thread scheduling.
    pub fn backward_batch(
        &self,
        batch: &[(Tensor, Tensor)],
        loss_kind: LossKind,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let inputs: Vec<Tensor> = batch.iter().map(|(i, _)| i.clone()).collect();
        let cache = self.forward_batch_cached(&inputs)?;
        let outputs = cache.activations.last().expect("forward output");

        let n = batch.len() as f64;
        let mut batch_loss = 0.0;
        let mut grads: Vec<Tensor> = Vec::with_capacity(batch.len());
        for (out, (_, target)) in outputs.iter().zip(batch) {
            batch_loss += loss(out, target, loss_kind)?;
            grads.push(train::loss_gradient(out, target, loss_kind, 1.0 / n)?);
        }
        batch_loss /= n;
        if !batch_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0 });
        }

        let layout = param_layout(&self.spec);
        let mut param_grads: Vec<Vec<f64>> = self
            .params
            .iter()
            .map(|p| vec![0.0; p.data.len()])
            .collect();

        for (li, layer) in self.spec.iter().enumerate().rev() {
            let lp = &layout[li];
            let inputs = &cache.activations[li];
            match *layer {
                LayerSpec::Conv3d { out_channels, .. } => {
                    let (kidx, bidx) = match *lp {
                        LayerParams::Conv { kernel, bias } => (kernel, bias),
                        _ => unreachable!(),
                    };
                    let kernel = &self.params[kidx].data;
                    let per_sample: Vec<(Tensor, layers::Conv3dGrads)> = inputs
                        .par_iter()
                        .zip(grads.par_iter())
                        .map(|(x, g)| conv3d_same_backward(x, kernel, out_channels, g))
                        .collect::<Result<_>>()?;
                    let mut gins = Vec::with_capacity(per_sample.len());
                    for (gin, g) in per_sample {
                        for (acc, v) in param_grads[kidx].iter_mut().zip(&g.kernel) {
                            *acc += v;
                        }
                        for (acc, v) in param_grads[bidx].iter_mut().zip(&g.bias) {
                            *acc += v;
                        }
                        gins.push(gin);
                    }
                    grads = gins;
                }
                LayerSpec::Relu => {
                    grads = inputs
                        .par_iter()
                        .zip(grads.par_iter())
                        .map(|(x, g)| relu_backward(x, g))
                        .collect();
                }
                LayerSpec::Norm { .. } => {
                    let (scale, _) = self.layer_scale_shift(lp);
                    let stats = cache.norm_stats[li].as_ref().expect("norm cache");
                    match stats {
                        NormCache::PerSample(per) => {
                            let results: Vec<(Tensor, layers::NormGrads)> = per
                                .par_iter()
                                .zip(grads.par_iter())
                                .map(|(s, g)| instance_norm_backward(s, scale, g))
                                .collect();
                            let mut gins = Vec::with_capacity(results.len());
                            for (gin, g) in results {
                                if let LayerParams::Affine { scale, shift } = *lp {
                                    for (acc, v) in param_grads[scale].iter_mut().zip(&g.scale) {
                                        *acc += v;
                                    }
                                    for (acc, v) in param_grads[shift].iter_mut().zip(&g.shift) {
                                        *acc += v;
                                    }
                                }
                                gins.push(gin);
                            }
                            grads = gins;
                        }
                        NormCache::Joint(stats) => {
                            let (gins, g) = batch_norm_backward(stats, scale, &grads);
                            if let LayerParams::Affine { scale, shift } = *lp {
                                for (acc, v) in param_grads[scale].iter_mut().zip(&g.scale) {
                                    *acc += v;
                                }
                                for (acc, v) in param_grads[shift].iter_mut().zip(&g.shift) {
                                    *acc += v;
                                }
                            }
                            grads = gins;
                        }
                    }
                }
            }
        }
        Ok((batch_loss, param_grads))
    }

    /// One training step: reverse pass over the batch, then a bias-corrected
    /// ADAM update. Returns the batch loss measured before the step.
    pub fn backward_and_step(
        &mut self,
        batch: &[(Tensor, Tensor)],
        adam: &mut AdamState,
        cfg: &AdamConfig,
        loss_kind: LossKind,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let (batch_loss, grads) = self.backward_batch(batch, loss_kind)?;
        adam.step(&mut self.params, &grads, cfg)?;
        Ok(batch_loss)
    }
}

fn validate_spec(spec: &[LayerSpec]) -> Result<()> {
    if spec.is_empty() {
        return Err(Error::ArchitectureMismatch("empty layer list".into()));
    }
    let mut channels = match spec[0] {
        LayerSpec::Conv3d { in_channels, .. } => in_channels,
        LayerSpec::Norm { channels, .. } => channels,
        LayerSpec::Relu => {
            return Err(Error::ArchitectureMismatch(
                "network cannot start with a bare activation".into(),
            ))
        }
    };
    for layer in spec {
        match *layer {
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
            } => {
                if in_channels != channels || out_channels == 0 {
                    return Err(Error::ArchitectureMismatch(format!(
                        "conv expects {in_channels} input channels but receives {channels}"
                    )));
                }
                channels = out_channels;
            }
            LayerSpec::Norm { channels: c, .. } => {
                if c != channels {
                    return Err(Error::ArchitectureMismatch(format!(
                        "norm over {c} channels but receives {channels}"
                    )));
                }
            }
            LayerSpec::Relu => {}
        }
    }
    Ok(())
}
