//! Convolutional CSI encoder: four 2-D convolutions with Tanh activations,
//! batch normalization after the middle convolutions, and a two-layer dense
//! projection head producing an R-dimensional embedding.
//!
//! Public parameters are stored as little-endian-friendly `f32` tensors (the
//! on-disk format), while all arithmetic runs in `f64` inside the engine, so
//! save/load round-trips are bit-exact and gradients are accurate enough for
//! finite-difference verification.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::preprocess::PreprocessedInput;

pub(crate) mod engine;
pub(crate) mod kernels;

pub use engine::ForwardMode;

/// Kernel size, stride, padding for each of the four convolution layers.
pub const CONV_SPECS: [(usize, usize, usize); 4] = [(5, 2, 1), (3, 1, 1), (3, 1, 1), (3, 1, 0)];

/// Embedding vector of dimension `feature_dim`.
pub type Embedding = Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderError {
    /// The input side length collapses below a kernel somewhere in the stack.
    InputTooSmall { input_size: usize, layer: usize },
    FeatureDimTooSmall { dim: usize },
    BadBnPlacement { layer: usize },
    InputShapeMismatch { expected: usize, found: usize },
    EmptyBatch,
    /// Non-finite activation detected, with the offending layer's name.
    NonFinite { layer: String },
    /// Parameter tensors disagree with the configuration.
    ParamMismatch { reason: String },
    VersionMismatch { expected: u32, found: u32 },
}

impl fmt::Display for EncoderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InputTooSmall { input_size, layer } => write!(
                f,
                "input size {input_size} collapses below the kernel at conv layer {layer}"
            ),
            Self::FeatureDimTooSmall { dim } => write!(f, "feature dimension must be >= 2, got {dim}"),
            Self::BadBnPlacement { layer } => {
                write!(f, "batch norm placement {layer} outside conv layers 1..=4")
            }
            Self::InputShapeMismatch { expected, found } => {
                write!(f, "input is {found}x{found}, encoder expects {expected}x{expected}")
            }
            Self::EmptyBatch => write!(f, "forward pass needs at least one input"),
            Self::NonFinite { layer } => write!(f, "non-finite activation after layer {layer}"),
            Self::ParamMismatch { reason } => write!(f, "parameter mismatch: {reason}"),
            Self::VersionMismatch { expected, found } => {
                write!(f, "parameter format version {found}, expected {expected}")
            }
        }
    }
}

impl core::error::Error for EncoderError {}

/// Architecture hyperparameters. Kernel geometry is fixed ([`CONV_SPECS`]);
/// widths and the projection head are configurable.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EncoderConfig {
    /// Side length of the square packed input (the antenna count B).
    pub input_size: usize,
    /// Output channels of the four convolution layers.
    pub channel_widths: [usize; 4],
    /// 1-indexed convolution layers followed by batch normalization.
    pub bn_after_layers: Vec<usize>,
    /// Hidden width of the projection head.
    pub projection_hidden: usize,
    /// Embedding dimension R.
    pub feature_dim: usize,
    /// L2-normalize embeddings on output.
    pub output_normalized: bool,
}

impl EncoderConfig {
    /// Defaults matching the reference architecture for large arrays.
    pub fn with_input_size(input_size: usize) -> Self {
        Self {
            input_size,
            channel_widths: [16, 32, 32, 32],
            bn_after_layers: alloc::vec![2, 3],
            projection_hidden: 512,
            feature_dim: 32,
            output_normalized: false,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.feature_dim < 2 {
            return Err(EncoderError::FeatureDimTooSmall { dim: self.feature_dim });
        }
        for &l in &self.bn_after_layers {
            if l == 0 || l > 4 {
                return Err(EncoderError::BadBnPlacement { layer: l });
            }
        }
        conv_output_shape(self.input_size, self)?;
        if self.projection_hidden == 0 || self.channel_widths.iter().any(|&w| w == 0) {
            return Err(EncoderError::ParamMismatch {
                reason: String::from("channel widths and projection hidden must be positive"),
            });
        }
        Ok(())
    }
}

/// Output shape of the convolution stack for a `b × b` input:
/// `(channels, height, width)` by standard convolution arithmetic
/// `out = ⌊(in + 2·pad − kernel)/stride⌋ + 1`, layer by layer.
pub fn conv_output_shape(
    input_size: usize,
    config: &EncoderConfig,
) -> Result<(usize, usize, usize), EncoderError> {
    let mut side = input_size;
    for (i, &(k, s, p)) in CONV_SPECS.iter().enumerate() {
        let padded = side + 2 * p;
        if padded < k {
            return Err(EncoderError::InputTooSmall { input_size, layer: i + 1 });
        }
        side = (padded - k) / s + 1;
    }
    Ok((config.channel_widths[3], side, side))
}

/// One named parameter tensor in storage precision.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorF32 {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Complete learnable state of an encoder: configuration plus all tensors
/// (convolution kernels and biases, batch-norm scale/shift and running
/// statistics, dense weights and biases) in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub version: u32,
    pub config: EncoderConfig,
    pub tensors: Vec<TensorF32>,
}

impl EncoderParams {
    pub const FORMAT_VERSION: u32 = 1;

    /// Freshly initialized parameters: uniform fan-in weight scaling (Tanh
    /// friendly), zero biases, identity batch norm. Deterministic per seed.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        let net = engine::Network::new(config)?;
        let flat = net.init_params(seed);
        Ok(net.export(&flat, config))
    }

    /// Checks version and tensor names/shapes against the configuration.
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.version != Self::FORMAT_VERSION {
            return Err(EncoderError::VersionMismatch {
                expected: Self::FORMAT_VERSION,
                found: self.version,
            });
        }
        let net = engine::Network::new(&self.config)?;
        let layout = net.layout();
        if layout.len() != self.tensors.len() {
            return Err(EncoderError::ParamMismatch {
                reason: format!("expected {} tensors, found {}", layout.len(), self.tensors.len()),
            });
        }
        for (meta, tensor) in layout.iter().zip(&self.tensors) {
            if meta.name != tensor.name || meta.shape != tensor.shape {
                return Err(EncoderError::ParamMismatch {
                    reason: format!(
                        "tensor {} has shape {:?}, expected {} {:?}",
                        tensor.name, tensor.shape, meta.name, meta.shape
                    ),
                });
            }
            if tensor.data.len() != meta.len {
                return Err(EncoderError::ParamMismatch {
                    reason: format!("tensor {} has {} values, expected {}", tensor.name, tensor.data.len(), meta.len),
                });
            }
        }
        Ok(())
    }
}

/// Embeds one preprocessed input. Train mode normalizes with the (single
/// sample) batch statistics; eval mode uses the stored running statistics
/// and is deterministic for fixed parameters. Running statistics are only
/// persisted by the training loop, which owns the mutable optimizer state.
pub fn forward(
    params: &EncoderParams,
    input: &PreprocessedInput,
    mode: ForwardMode,
) -> Result<Embedding, EncoderError> {
    Ok(forward_batch(params, core::slice::from_ref(input), mode)?.pop().expect("one output"))
}

/// Batched [`forward`]; train mode computes batch statistics over all
/// inputs. Errors on an empty batch.
pub fn forward_batch(
    params: &EncoderParams,
    inputs: &[PreprocessedInput],
    mode: ForwardMode,
) -> Result<Vec<Embedding>, EncoderError> {
    if inputs.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    params.validate()?;
    let net = engine::Network::new(&params.config)?;
    let mut flat = net.params_from(params)?;
    let side = params.config.input_size;
    let mut batch = Vec::with_capacity(inputs.len() * side * side);
    for input in inputs {
        if input.side() != side {
            return Err(EncoderError::InputShapeMismatch { expected: side, found: input.side() });
        }
        batch.extend_from_slice(input.matrix());
    }
    let mut state = engine::ForwardState::new();
    let z = net.forward(&mut flat, &batch, inputs.len(), mode, None, &mut state)?;
    let r = params.config.feature_dim;
    Ok(z.chunks_exact(r).map(|c| c.to_vec()).collect())
}
