//! Batched f64 compute engine behind the encoder: layer descriptions over a
//! flat parameter vector, forward/backward passes, deterministic threading.
//!
//! Parameters live in one flat `Vec<f64>` addressed through a layout table,
//! which keeps the optimizer, finite-difference checks and f32 export
//! trivial. Convolution stages hold activations channel-major
//! (`[channel][sample·spatial]`); the convolution itself runs over sample
//! blocks sized to stay cache-resident. Parallel work is partitioned by
//! output rows with each row computed start-to-finish by one lane, so
//! results are bit-identical for any thread count; the only machine
//! dependence is the kernel set picked by [`kernels::detect`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::marker::PhantomData;
use core::ops::Range;

use rand::Rng;

use super::kernels::{self, Ops};
use super::{EncoderConfig, EncoderError, EncoderParams, TensorF32, CONV_SPECS};
use crate::flt;
use crate::seeds;

#[cfg(feature = "std")]
use crate::pool::WorkerPool;
#[cfg(not(feature = "std"))]
pub(crate) struct WorkerPool;

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

/// Target footprint of one convolution sample block (receptive-field matrix
/// plus output stripe), sized to sit comfortably in a per-core L2.
const BLOCK_TARGET_BYTES: usize = 192 * 1024;

/// Reduction block (in samples) for dense weight gradients.
const DENSE_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub(crate) struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    in_side: usize,
    out_side: usize,
}

impl ConvGeometry {
    fn kernel_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Samples per cache block.
    fn sample_block(&self) -> usize {
        let ohw = self.out_side * self.out_side;
        let per_sample = self.kernel_rows() * ohw * 8;
        (BLOCK_TARGET_BYTES / per_sample.max(1)).max(1)
    }
}

#[derive(Debug, Clone)]
enum LayerDesc {
    Conv { w: usize, b: usize, geo: ConvGeometry },
    BatchNorm { gamma: usize, beta: usize, rmean: usize, rvar: usize, ch: usize, spatial: usize },
    Tanh,
    /// Channel-major `[c][n·hw]` to sample-major `[n][c·hw]` transpose.
    Flatten { ch: usize, spatial: usize },
    Dense { w: usize, b: usize, in_dim: usize, out_dim: usize },
    Normalize { dim: usize },
}

/// Architecture instance: layers, parameter layout, per-layer buffer sizes.
pub(crate) struct Network {
    layers: Vec<LayerDesc>,
    names: Vec<String>,
    layout: Vec<TensorMeta>,
    /// Per-sample flat length of the input to each layer, plus the output.
    stage_lens: Vec<usize>,
    param_len: usize,
    input_side: usize,
    feature_dim: usize,
}

/// Reusable activation storage: the input of every layer plus the final
/// output, along with the batch statistics the backward pass needs.
/// Persists across batches so buffers are allocated once.
pub(crate) struct ForwardState {
    stages: Vec<Vec<f64>>,
    bn_stats: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    n: usize,
}

impl ForwardState {
    pub fn new() -> Self {
        Self { stages: Vec::new(), bn_stats: Vec::new(), n: 0 }
    }

    pub fn output(&self) -> &[f64] {
        self.stages.last().expect("forward pass has run")
    }
}

/// Reusable backward buffers.
pub(crate) struct BackwardScratch {
    cur: Vec<f64>,
    next: Vec<f64>,
    x_t: Vec<f64>,
    dy_t: Vec<f64>,
    dw_t: Vec<f64>,
}

impl BackwardScratch {
    pub fn new() -> Self {
        Self { cur: Vec::new(), next: Vec::new(), x_t: Vec::new(), dy_t: Vec::new(), dw_t: Vec::new() }
    }
}

fn resize_buf(buf: &mut Vec<f64>, len: usize) {
    if buf.len() != len {
        buf.resize(len, 0.0);
    }
}

impl Network {
    pub fn new(config: &EncoderConfig) -> Result<Self, EncoderError> {
        if config.feature_dim < 2 {
            return Err(EncoderError::FeatureDimTooSmall { dim: config.feature_dim });
        }
        for &l in &config.bn_after_layers {
            if l == 0 || l > 4 {
                return Err(EncoderError::BadBnPlacement { layer: l });
            }
        }

        let mut layers = Vec::new();
        let mut names = Vec::new();
        let mut layout = Vec::new();
        let mut stage_lens = Vec::new();
        let mut offset = 0usize;

        let push_tensor = |layout: &mut Vec<TensorMeta>,
                           offset: &mut usize,
                           name: String,
                           shape: Vec<usize>,
                           trainable: bool|
         -> usize {
            let len: usize = shape.iter().product();
            let start = *offset;
            layout.push(TensorMeta { name, shape, offset: start, len, trainable });
            *offset += len;
            start
        };

        let mut side = config.input_size;
        let mut cin = 1usize;
        for (i, &(k, stride, pad)) in CONV_SPECS.iter().enumerate() {
            let padded = side + 2 * pad;
            if padded < k {
                return Err(EncoderError::InputTooSmall { input_size: config.input_size, layer: i + 1 });
            }
            let out_side = (padded - k) / stride + 1;
            let cout = config.channel_widths[i];
            let w = push_tensor(
                &mut layout,
                &mut offset,
                format!("conv{}.weight", i + 1),
                vec![cout, cin, k, k],
                true,
            );
            let b = push_tensor(&mut layout, &mut offset, format!("conv{}.bias", i + 1), vec![cout], true);
            stage_lens.push(cin * side * side);
            layers.push(LayerDesc::Conv {
                w,
                b,
                geo: ConvGeometry { cin, cout, k, stride, pad, in_side: side, out_side },
            });
            names.push(format!("conv{}", i + 1));

            if config.bn_after_layers.contains(&(i + 1)) {
                let gamma = push_tensor(&mut layout, &mut offset, format!("bn{}.gamma", i + 1), vec![cout], true);
                let beta = push_tensor(&mut layout, &mut offset, format!("bn{}.beta", i + 1), vec![cout], true);
                let rmean = push_tensor(
                    &mut layout,
                    &mut offset,
                    format!("bn{}.running_mean", i + 1),
                    vec![cout],
                    false,
                );
                let rvar = push_tensor(
                    &mut layout,
                    &mut offset,
                    format!("bn{}.running_var", i + 1),
                    vec![cout],
                    false,
                );
                stage_lens.push(cout * out_side * out_side);
                layers.push(LayerDesc::BatchNorm {
                    gamma,
                    beta,
                    rmean,
                    rvar,
                    ch: cout,
                    spatial: out_side * out_side,
                });
                names.push(format!("bn{}", i + 1));
            }

            stage_lens.push(cout * out_side * out_side);
            layers.push(LayerDesc::Tanh);
            names.push(format!("tanh{}", i + 1));
            side = out_side;
            cin = cout;
        }

        let flat = cin * side * side;
        stage_lens.push(flat);
        layers.push(LayerDesc::Flatten { ch: cin, spatial: side * side });
        names.push(String::from("flatten"));

        let hidden = config.projection_hidden;
        let w = push_tensor(&mut layout, &mut offset, String::from("fc1.weight"), vec![hidden, flat], true);
        let b = push_tensor(&mut layout, &mut offset, String::from("fc1.bias"), vec![hidden], true);
        stage_lens.push(flat);
        layers.push(LayerDesc::Dense { w, b, in_dim: flat, out_dim: hidden });
        names.push(String::from("fc1"));

        stage_lens.push(hidden);
        layers.push(LayerDesc::Tanh);
        names.push(String::from("tanh_fc"));

        let w = push_tensor(
            &mut layout,
            &mut offset,
            String::from("fc2.weight"),
            vec![config.feature_dim, hidden],
            true,
        );
        let b = push_tensor(&mut layout, &mut offset, String::from("fc2.bias"), vec![config.feature_dim], true);
        stage_lens.push(hidden);
        layers.push(LayerDesc::Dense { w, b, in_dim: hidden, out_dim: config.feature_dim });
        names.push(String::from("fc2"));

        if config.output_normalized {
            stage_lens.push(config.feature_dim);
            layers.push(LayerDesc::Normalize { dim: config.feature_dim });
            names.push(String::from("l2norm"));
        }
        stage_lens.push(config.feature_dim);

        Ok(Self {
            layers,
            names,
            layout,
            stage_lens,
            param_len: offset,
            input_side: config.input_size,
            feature_dim: config.feature_dim,
        })
    }

    pub fn layout(&self) -> &[TensorMeta] {
        &self.layout
    }

    pub fn param_len(&self) -> usize {
        self.param_len
    }

    /// Mask of trainable entries (running statistics excluded).
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.param_len];
        for meta in &self.layout {
            if meta.trainable {
                mask[meta.offset..meta.offset + meta.len].fill(true);
            }
        }
        mask
    }

    /// Fresh parameters: uniform fan-in weight scaling, zero biases,
    /// identity batch norm. Draw order follows the layout table.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut params = vec![0.0; self.param_len];
        let mut rng = seeds::rng(&[seed, seeds::TAG_INIT]);
        for layer in &self.layers {
            match layer {
                LayerDesc::Conv { w, geo, .. } => {
                    let fan_in = geo.kernel_rows();
                    let bound = flt::sqrt(3.0 / fan_in as f64);
                    for v in &mut params[*w..*w + geo.cout * fan_in] {
                        *v = rng.gen_range(-bound..bound);
                    }
                }
                LayerDesc::Dense { w, in_dim, out_dim, .. } => {
                    let bound = flt::sqrt(3.0 / *in_dim as f64);
                    for v in &mut params[*w..*w + out_dim * in_dim] {
                        *v = rng.gen_range(-bound..bound);
                    }
                }
                LayerDesc::BatchNorm { gamma, rvar, ch, .. } => {
                    params[*gamma..*gamma + ch].fill(1.0);
                    params[*rvar..*rvar + ch].fill(1.0);
                }
                _ => {}
            }
        }
        params
    }

    /// Upcasts stored f32 tensors into the flat f64 vector.
    pub fn params_from(&self, params: &EncoderParams) -> Result<Vec<f64>, EncoderError> {
        let mut flat = vec![0.0; self.param_len];
        if params.tensors.len() != self.layout.len() {
            return Err(EncoderError::ParamMismatch {
                reason: format!("expected {} tensors, found {}", self.layout.len(), params.tensors.len()),
            });
        }
        for (meta, tensor) in self.layout.iter().zip(&params.tensors) {
            if tensor.name != meta.name || tensor.data.len() != meta.len {
                return Err(EncoderError::ParamMismatch {
                    reason: format!("tensor {} does not match layout entry {}", tensor.name, meta.name),
                });
            }
            for (dst, src) in flat[meta.offset..meta.offset + meta.len].iter_mut().zip(&tensor.data) {
                *dst = *src as f64;
            }
        }
        Ok(flat)
    }

    /// Rounds the flat vector down to the f32 storage format.
    pub fn export(&self, flat: &[f64], config: &EncoderConfig) -> EncoderParams {
        let tensors = self
            .layout
            .iter()
            .map(|meta| TensorF32 {
                name: meta.name.clone(),
                shape: meta.shape.clone(),
                data: flat[meta.offset..meta.offset + meta.len].iter().map(|&v| v as f32).collect(),
            })
            .collect();
        EncoderParams { version: EncoderParams::FORMAT_VERSION, config: config.clone(), tensors }
    }

    /// Forward pass over a batch of `n` flattened inputs (sample-major,
    /// which for the single-channel input coincides with the channel-major
    /// layout the conv stack uses). Train mode uses batch statistics and
    /// updates running statistics in `params`; eval mode reads running
    /// statistics and leaves `params` untouched. Returns the embeddings
    /// (`[n × feature_dim]`); all intermediate activations stay in `state`
    /// for a subsequent [`Self::backward`].
    pub fn forward(
        &self,
        params: &mut [f64],
        batch: &[f64],
        n: usize,
        mode: ForwardMode,
        pool: Option<&WorkerPool>,
        state: &mut ForwardState,
    ) -> Result<Vec<f64>, EncoderError> {
        assert_eq!(batch.len(), n * self.input_side * self.input_side, "batch buffer size mismatch");
        if n == 0 {
            return Err(EncoderError::EmptyBatch);
        }
        let ops = kernels::detect();
        state.n = n;
        state.stages.resize_with(self.layers.len() + 1, Vec::new);
        state.bn_stats.clear();
        state.bn_stats.resize(self.layers.len(), None);
        resize_buf(&mut state.stages[0], batch.len());
        state.stages[0].copy_from_slice(batch);

        for (li, layer) in self.layers.iter().enumerate() {
            let (before, after) = state.stages.split_at_mut(li + 1);
            let input = before.last().expect("stage present");
            let output = &mut after[0];
            resize_buf(output, n * self.stage_lens[li + 1]);
            match layer {
                LayerDesc::Conv { w, b, geo } => {
                    let kk = geo.kernel_rows();
                    let weights = &params[*w..*w + geo.cout * kk];
                    let bias = &params[*b..*b + geo.cout];
                    conv_forward(input, output, geo, weights, bias, n, pool, &ops);
                }
                LayerDesc::BatchNorm { gamma, beta, rmean, rvar, ch, spatial } => {
                    let row_len = n * spatial;
                    let mut mean = vec![0.0; *ch];
                    let mut var = vec![0.0; *ch];
                    match mode {
                        ForwardMode::Train => {
                            {
                                let mean_sh = RowShards::new(&mut mean, 1);
                                let var_sh = RowShards::new(&mut var, 1);
                                parallel_lanes(pool, |lane, lanes| {
                                    let my = lane_rows(*ch, lanes, lane);
                                    if my.is_empty() {
                                        return;
                                    }
                                    let mean_rows = unsafe { mean_sh.take(my.clone()) };
                                    let var_rows = unsafe { var_sh.take(my.clone()) };
                                    for (local, c) in my.clone().enumerate() {
                                        let row = &input[c * row_len..(c + 1) * row_len];
                                        let mu = (ops.sum)(row) / row_len as f64;
                                        let sq = (ops.dot)(row, row) / row_len as f64;
                                        mean_rows[local] = mu;
                                        var_rows[local] = (sq - mu * mu).max(0.0);
                                    }
                                });
                            }
                            for c in 0..*ch {
                                params[*rmean + c] =
                                    (1.0 - BN_MOMENTUM) * params[*rmean + c] + BN_MOMENTUM * mean[c];
                                params[*rvar + c] =
                                    (1.0 - BN_MOMENTUM) * params[*rvar + c] + BN_MOMENTUM * var[c];
                            }
                        }
                        ForwardMode::Eval => {
                            mean.copy_from_slice(&params[*rmean..*rmean + *ch]);
                            var.copy_from_slice(&params[*rvar..*rvar + *ch]);
                        }
                    }
                    let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / flt::sqrt(v + BN_EPS)).collect();
                    let gamma_v = &params[*gamma..*gamma + *ch];
                    let beta_v = &params[*beta..*beta + *ch];
                    let out_sh = RowShards::new(output, row_len);
                    parallel_lanes(pool, |lane, lanes| {
                        let my = lane_rows(*ch, lanes, lane);
                        if my.is_empty() {
                            return;
                        }
                        let out_rows = unsafe { out_sh.take(my.clone()) };
                        for (local, c) in my.clone().enumerate() {
                            let x = &input[c * row_len..(c + 1) * row_len];
                            let y = &mut out_rows[local * row_len..(local + 1) * row_len];
                            let scale = gamma_v[c] * invstd[c];
                            let shift = beta_v[c] - mean[c] * scale;
                            for (yo, xi) in y.iter_mut().zip(x) {
                                *yo = xi * scale + shift;
                            }
                        }
                    });
                    state.bn_stats[li] = Some((mean, invstd));
                }
                LayerDesc::Tanh => {
                    let total = output.len();
                    let out_sh = RowShards::new(output, 1);
                    parallel_lanes(pool, |lane, lanes| {
                        let my = lane_rows(total, lanes, lane);
                        if my.is_empty() {
                            return;
                        }
                        let out_rows = unsafe { out_sh.take(my.clone()) };
                        for (yo, xi) in out_rows.iter_mut().zip(&input[my.start..my.end]) {
                            *yo = flt::tanh(*xi);
                        }
                    });
                }
                LayerDesc::Flatten { ch, spatial } => {
                    let per = ch * spatial;
                    let out_sh = RowShards::new(output, per);
                    parallel_lanes(pool, |lane, lanes| {
                        let my = lane_rows(n, lanes, lane);
                        if my.is_empty() {
                            return;
                        }
                        let out_rows = unsafe { out_sh.take(my.clone()) };
                        for (local, s) in my.clone().enumerate() {
                            let dst = &mut out_rows[local * per..(local + 1) * per];
                            for c in 0..*ch {
                                let src = &input[c * n * spatial + s * spatial..][..*spatial];
                                dst[c * spatial..(c + 1) * spatial].copy_from_slice(src);
                            }
                        }
                    });
                }
                LayerDesc::Dense { w, b, in_dim, out_dim } => {
                    let weights = &params[*w..*w + out_dim * in_dim];
                    let bias = &params[*b..*b + *out_dim];
                    let out_sh = RowShards::new(output, *out_dim);
                    parallel_lanes(pool, |lane, lanes| {
                        let my = lane_rows(n, lanes, lane);
                        if my.is_empty() {
                            return;
                        }
                        let out_rows = unsafe { out_sh.take(my.clone()) };
                        for (local, s) in my.clone().enumerate() {
                            let x = &input[s * in_dim..(s + 1) * in_dim];
                            let y = &mut out_rows[local * out_dim..(local + 1) * out_dim];
                            for (o, yo) in y.iter_mut().enumerate() {
                                *yo = bias[o] + (ops.dot)(&weights[o * in_dim..(o + 1) * in_dim], x);
                            }
                        }
                    });
                }
                LayerDesc::Normalize { dim } => {
                    for s in 0..n {
                        let x = &input[s * dim..(s + 1) * dim];
                        let nrm = flt::norm(x).max(1e-12);
                        for (y, xi) in output[s * dim..(s + 1) * dim].iter_mut().zip(x) {
                            *y = xi / nrm;
                        }
                    }
                }
            }
            if output.iter().any(|v| !v.is_finite()) {
                return Err(EncoderError::NonFinite { layer: self.names[li].clone() });
            }
        }

        Ok(state.output().to_vec())
    }

    /// Backward pass over the activations left in `state` by a train-mode
    /// forward. `dz` is the loss gradient with respect to the output,
    /// `[n × feature_dim]`; parameter gradients are written to `grads`
    /// (running-statistics entries stay zero).
    pub fn backward(
        &self,
        params: &[f64],
        state: &ForwardState,
        dz: &[f64],
        pool: Option<&WorkerPool>,
        grads: &mut [f64],
        scratch: &mut BackwardScratch,
    ) {
        let n = state.n;
        assert_eq!(dz.len(), n * self.feature_dim, "dz shape mismatch");
        assert_eq!(grads.len(), self.param_len, "grads buffer size mismatch");
        let ops = kernels::detect();
        grads.fill(0.0);
        resize_buf(&mut scratch.cur, dz.len());
        scratch.cur.copy_from_slice(dz);

        for (li, layer) in self.layers.iter().enumerate().rev() {
            let input = &state.stages[li];
            let output = &state.stages[li + 1];
            match layer {
                LayerDesc::Conv { w, b, geo } => {
                    let kk = geo.kernel_rows();
                    let ohw = geo.out_side * geo.out_side;
                    let ncols = n * ohw;
                    let weights = &params[*w..*w + geo.cout * kk];
                    let dout = &scratch.cur;
                    resize_buf(&mut scratch.next, n * self.stage_lens[li]);
                    resize_buf(&mut scratch.dw_t, kk * geo.cout);
                    let sb = geo.sample_block();
                    {
                        let din_sh = RowShards::new(&mut scratch.next, n * geo.in_side * geo.in_side);
                        let dwt_sh = RowShards::new(&mut scratch.dw_t, geo.cout);
                        parallel_lanes(pool, |lane, lanes| {
                            let my_ci = lane_rows(geo.cin, lanes, lane);
                            if my_ci.is_empty() {
                                return;
                            }
                            let ksq = geo.k * geo.k;
                            let my_k = my_ci.start * ksq..my_ci.end * ksq;
                            let din = unsafe { din_sh.take(my_ci.clone()) };
                            let dwt = unsafe { dwt_sh.take(my_k.clone()) };
                            din.fill(0.0);
                            dwt.fill(0.0);
                            let own_rows = my_k.end - my_k.start;
                            let mut cols = vec![0.0; own_rows * sb * ohw];
                            let mut dcols = vec![0.0; own_rows * sb * ohw];
                            let ihw = geo.in_side * geo.in_side;
                            for s0 in (0..n).step_by(sb) {
                                let s1 = (s0 + sb).min(n);
                                let bw = (s1 - s0) * ohw;
                                for (local_k, kidx) in my_k.clone().enumerate() {
                                    let ci = kidx / ksq;
                                    let rem = kidx % ksq;
                                    let (ky, kx) = (rem / geo.k, rem % geo.k);
                                    let crow = &mut cols[local_k * sb * ohw..][..bw];
                                    for s in s0..s1 {
                                        im2col_row(
                                            &input[(ci * n + s) * ihw..(ci * n + s + 1) * ihw],
                                            &mut crow[(s - s0) * ohw..(s - s0 + 1) * ohw],
                                            ky,
                                            kx,
                                            geo,
                                        );
                                    }
                                }
                                for (local_k, kidx) in my_k.clone().enumerate() {
                                    let crow = &cols[local_k * sb * ohw..][..bw];
                                    let drow = &mut dcols[local_k * sb * ohw..][..bw];
                                    drow.fill(0.0);
                                    let dwt_row = &mut dwt[local_k * geo.cout..(local_k + 1) * geo.cout];
                                    for m in 0..geo.cout {
                                        let dy = &dout[m * ncols + s0 * ohw..m * ncols + s1 * ohw];
                                        dwt_row[m] += (ops.dot)(dy, crow);
                                        (ops.axpy)(drow, weights[m * kk + kidx], dy);
                                    }
                                }
                                for local_ci in 0..(my_ci.end - my_ci.start) {
                                    for kyx in 0..ksq {
                                        let local_k = local_ci * ksq + kyx;
                                        let (ky, kx) = (kyx / geo.k, kyx % geo.k);
                                        let drow = &dcols[local_k * sb * ohw..][..bw];
                                        for s in s0..s1 {
                                            col2im_row(
                                                &drow[(s - s0) * ohw..(s - s0 + 1) * ohw],
                                                &mut din[(local_ci * n + s) * ihw..][..ihw],
                                                ky,
                                                kx,
                                                geo,
                                            );
                                        }
                                    }
                                }
                            }
                        });
                    }
                    for m in 0..geo.cout {
                        for kidx in 0..kk {
                            grads[*w + m * kk + kidx] = scratch.dw_t[kidx * geo.cout + m];
                        }
                        grads[*b + m] = (ops.sum)(&dout[m * ncols..(m + 1) * ncols]);
                    }
                    core::mem::swap(&mut scratch.cur, &mut scratch.next);
                }
                LayerDesc::BatchNorm { gamma, beta, ch, spatial, .. } => {
                    let (mean, invstd) = state.bn_stats[li]
                        .as_ref()
                        .expect("train-mode forward ran before backward");
                    let row_len = n * spatial;
                    let dout = &scratch.cur;
                    let m_count = row_len as f64;
                    let gamma_v = &params[*gamma..*gamma + *ch];
                    let mut t1 = vec![0.0; *ch];
                    let mut t2 = vec![0.0; *ch];
                    for c in 0..*ch {
                        let x = &input[c * row_len..(c + 1) * row_len];
                        let dy = &dout[c * row_len..(c + 1) * row_len];
                        let s1 = (ops.sum)(dy);
                        let sxy = (ops.dot)(dy, x);
                        t1[c] = s1;
                        t2[c] = invstd[c] * (sxy - mean[c] * s1);
                    }
                    grads[*beta..*beta + *ch].copy_from_slice(&t1);
                    grads[*gamma..*gamma + *ch].copy_from_slice(&t2);

                    resize_buf(&mut scratch.next, n * ch * spatial);
                    let din_sh = RowShards::new(&mut scratch.next, row_len);
                    parallel_lanes(pool, |lane, lanes| {
                        let my = lane_rows(*ch, lanes, lane);
                        if my.is_empty() {
                            return;
                        }
                        let din = unsafe { din_sh.take(my.clone()) };
                        for (local, c) in my.clone().enumerate() {
                            let x = &input[c * row_len..(c + 1) * row_len];
                            let dy = &dout[c * row_len..(c + 1) * row_len];
                            let dx = &mut din[local * row_len..(local + 1) * row_len];
                            let g = gamma_v[c] * invstd[c];
                            for i in 0..row_len {
                                let xhat = (x[i] - mean[c]) * invstd[c];
                                dx[i] = g * (dy[i] - (t1[c] + xhat * t2[c]) / m_count);
                            }
                        }
                    });
                    core::mem::swap(&mut scratch.cur, &mut scratch.next);
                }
                LayerDesc::Tanh => {
                    let dcur = &mut scratch.cur;
                    let total = dcur.len();
                    let d_sh = RowShards::new(dcur, 1);
                    parallel_lanes(pool, |lane, lanes| {
                        let my = lane_rows(total, lanes, lane);
                        if my.is_empty() {
                            return;
                        }
                        let d = unsafe { d_sh.take(my.clone()) };
                        for (dv, y) in d.iter_mut().zip(&output[my.start..my.end]) {
                            *dv *= 1.0 - y * y;
                        }
                    });
                }
                LayerDesc::Flatten { ch, spatial } => {
                    let dout = &scratch.cur;
                    resize_buf(&mut scratch.next, n * ch * spatial);
                    let din_sh = RowShards::new(&mut scratch.next, n * spatial);
                    parallel_lanes(pool, |lane, lanes| {
                        let my = lane_rows(*ch, lanes, lane);
                        if my.is_empty() {
                            return;
                        }
                        let din = unsafe { din_sh.take(my.clone()) };
                        for (local, c) in my.clone().enumerate() {
                            let dst = &mut din[local * n * spatial..(local + 1) * n * spatial];
                            for s in 0..n {
                                let src = &dout[s * ch * spatial + c * spatial..][..*spatial];
                                dst[s * spatial..(s + 1) * spatial].copy_from_slice(src);
                            }
                        }
                    });
                    core::mem::swap(&mut scratch.cur, &mut scratch.next);
                }
                LayerDesc::Dense { w, b, in_dim, out_dim } => {
                    let weights = &params[*w..*w + out_dim * in_dim];
                    let dout = &scratch.cur;

                    // Transposed copies make the weight-gradient reductions
                    // contiguous dot products.
                    resize_buf(&mut scratch.x_t, in_dim * n);
                    {
                        let xt_sh = RowShards::new(&mut scratch.x_t, n);
                        parallel_lanes(pool, |lane, lanes| {
                            let my = lane_rows(*in_dim, lanes, lane);
                            if my.is_empty() {
                                return;
                            }
                            let xt = unsafe { xt_sh.take(my.clone()) };
                            for (local, i) in my.clone().enumerate() {
                                let row = &mut xt[local * n..(local + 1) * n];
                                for (s, r) in row.iter_mut().enumerate() {
                                    *r = input[s * in_dim + i];
                                }
                            }
                        });
                    }
                    resize_buf(&mut scratch.dy_t, out_dim * n);
                    {
                        let dyt_sh = RowShards::new(&mut scratch.dy_t, n);
                        parallel_lanes(pool, |lane, lanes| {
                            let my = lane_rows(*out_dim, lanes, lane);
                            if my.is_empty() {
                                return;
                            }
                            let dyt = unsafe { dyt_sh.take(my.clone()) };
                            for (local, o) in my.clone().enumerate() {
                                let row = &mut dyt[local * n..(local + 1) * n];
                                for (s, r) in row.iter_mut().enumerate() {
                                    *r = dout[s * out_dim + o];
                                }
                            }
                        });
                    }

                    resize_buf(&mut scratch.dw_t, in_dim * out_dim);
                    {
                        let x_t = &scratch.x_t;
                        let dy_t = &scratch.dy_t;
                        let dwt_sh = RowShards::new(&mut scratch.dw_t, *out_dim);
                        parallel_lanes(pool, |lane, lanes| {
                            let my = lane_rows(*in_dim, lanes, lane);
                            if my.is_empty() {
                                return;
                            }
                            let dwt = unsafe { dwt_sh.take(my.clone()) };
                            dwt.fill(0.0);
                            for s0 in (0..n).step_by(DENSE_BLOCK) {
                                let s1 = (s0 + DENSE_BLOCK).min(n);
                                for (local, i) in my.clone().enumerate() {
                                    let xrow = &x_t[i * n + s0..i * n + s1];
                                    let dst = &mut dwt[local * out_dim..(local + 1) * out_dim];
                                    for (o, d) in dst.iter_mut().enumerate() {
                                        *d += (ops.dot)(xrow, &dy_t[o * n + s0..o * n + s1]);
                                    }
                                }
                            }
                        });
                    }
                    for o in 0..*out_dim {
                        for i in 0..*in_dim {
                            grads[*w + o * in_dim + i] = scratch.dw_t[i * out_dim + o];
                        }
                        grads[*b + o] = (ops.sum)(&scratch.dy_t[o * n..(o + 1) * n]);
                    }

                    resize_buf(&mut scratch.next, n * in_dim);
                    let din_sh = RowShards::new(&mut scratch.next, *in_dim);
                    parallel_lanes(pool, |lane, lanes| {
                        let my = lane_rows(n, lanes, lane);
                        if my.is_empty() {
                            return;
                        }
                        let din = unsafe { din_sh.take(my.clone()) };
                        for (local, s) in my.clone().enumerate() {
                            let dy = &dout[s * out_dim..(s + 1) * out_dim];
                            let dx = &mut din[local * in_dim..(local + 1) * in_dim];
                            dx.fill(0.0);
                            for (o, &dyo) in dy.iter().enumerate() {
                                (ops.axpy)(dx, dyo, &weights[o * in_dim..(o + 1) * in_dim]);
                            }
                        }
                    });
                    core::mem::swap(&mut scratch.cur, &mut scratch.next);
                }
                LayerDesc::Normalize { dim } => {
                    let dout = &scratch.cur;
                    resize_buf(&mut scratch.next, n * dim);
                    for s in 0..n {
                        let x = &input[s * dim..(s + 1) * dim];
                        let y = &output[s * dim..(s + 1) * dim];
                        let dy = &dout[s * dim..(s + 1) * dim];
                        let nrm = flt::norm(x).max(1e-12);
                        let proj = (ops.dot)(y, dy);
                        for i in 0..*dim {
                            scratch.next[s * dim + i] = (dy[i] - y[i] * proj) / nrm;
                        }
                    }
                    core::mem::swap(&mut scratch.cur, &mut scratch.next);
                }
            }
        }
    }
}

/// Convolution forward: channel-major in/out, sample blocks sized for L2.
/// Lanes own disjoint sample ranges, so the receptive-field matrix is built
/// exactly once; output writes land in disjoint column stripes.
fn conv_forward(
    input: &[f64],
    output: &mut [f64],
    geo: &ConvGeometry,
    weights: &[f64],
    bias: &[f64],
    n: usize,
    pool: Option<&WorkerPool>,
    ops: &Ops,
) {
    let kk = geo.kernel_rows();
    let ohw = geo.out_side * geo.out_side;
    let ihw = geo.in_side * geo.in_side;
    let ncols = n * ohw;
    let sb = geo.sample_block();
    let out_sh = MatShards::new(output, ncols);
    parallel_lanes(pool, |lane, lanes| {
        let my = lane_rows(n, lanes, lane);
        if my.is_empty() {
            return;
        }
        let mut cols = vec![0.0; kk * sb * ohw];
        let mut s0 = my.start;
        while s0 < my.end {
            let s1 = (s0 + sb).min(my.end);
            let bw = (s1 - s0) * ohw;
            for kidx in 0..kk {
                let ci = kidx / (geo.k * geo.k);
                let rem = kidx % (geo.k * geo.k);
                let (ky, kx) = (rem / geo.k, rem % geo.k);
                let crow = &mut cols[kidx * sb * ohw..][..bw];
                for s in s0..s1 {
                    im2col_row(
                        &input[(ci * n + s) * ihw..(ci * n + s + 1) * ihw],
                        &mut crow[(s - s0) * ohw..(s - s0 + 1) * ohw],
                        ky,
                        kx,
                        geo,
                    );
                }
            }
            for m in 0..geo.cout {
                // Disjoint by construction: lanes own distinct samples.
                let oblk = unsafe { out_sh.stripe(m, s0 * ohw..s1 * ohw) };
                oblk.fill(bias[m]);
                for (kidx, &wv) in weights[m * kk..(m + 1) * kk].iter().enumerate() {
                    (ops.axpy)(oblk, wv, &cols[kidx * sb * ohw..][..bw]);
                }
            }
            s0 = s1;
        }
    });
}

/// Output-column range whose input column `ox·stride + k - pad` is valid.
#[inline]
fn valid_out_range(k: usize, geo: &ConvGeometry) -> Range<usize> {
    let lo = if k >= geo.pad { 0 } else { (geo.pad - k).div_ceil(geo.stride) };
    let last_in = geo.in_side - 1 + geo.pad;
    if last_in < k {
        return 0..0;
    }
    let hi = (((last_in - k) / geo.stride) + 1).min(geo.out_side);
    lo.min(hi)..hi
}

/// One (channel, ky, kx) row of the receptive-field matrix for one sample.
/// Boundary handling is hoisted out of the inner loops.
fn im2col_row(plane: &[f64], dst: &mut [f64], ky: usize, kx: usize, geo: &ConvGeometry) {
    let x_range = valid_out_range(kx, geo);
    let y_range = valid_out_range(ky, geo);
    for oy in 0..geo.out_side {
        let seg = &mut dst[oy * geo.out_side..(oy + 1) * geo.out_side];
        if !y_range.contains(&oy) {
            seg.fill(0.0);
            continue;
        }
        let iy = oy * geo.stride + ky - geo.pad;
        let src_row = &plane[iy * geo.in_side..(iy + 1) * geo.in_side];
        seg[..x_range.start].fill(0.0);
        seg[x_range.end..].fill(0.0);
        let ix0 = x_range.start * geo.stride + kx - geo.pad;
        if geo.stride == 1 {
            let len = x_range.end - x_range.start;
            seg[x_range.clone()].copy_from_slice(&src_row[ix0..ix0 + len]);
        } else {
            for (i, d) in seg[x_range.clone()].iter_mut().enumerate() {
                *d = src_row[ix0 + i * geo.stride];
            }
        }
    }
}

/// Scatter-add transpose of [`im2col_row`].
fn col2im_row(src: &[f64], plane: &mut [f64], ky: usize, kx: usize, geo: &ConvGeometry) {
    let x_range = valid_out_range(kx, geo);
    let y_range = valid_out_range(ky, geo);
    for oy in y_range {
        let iy = oy * geo.stride + ky - geo.pad;
        let dst_row = &mut plane[iy * geo.in_side..(iy + 1) * geo.in_side];
        let seg = &src[oy * geo.out_side..(oy + 1) * geo.out_side];
        let ix0 = x_range.start * geo.stride + kx - geo.pad;
        if geo.stride == 1 {
            for (i, &v) in seg[x_range.clone()].iter().enumerate() {
                dst_row[ix0 + i] += v;
            }
        } else {
            for (i, &v) in seg[x_range.clone()].iter().enumerate() {
                dst_row[ix0 + i * geo.stride] += v;
            }
        }
    }
}

/// Contiguous row range owned by one lane.
fn lane_rows(rows: usize, lanes: usize, lane: usize) -> Range<usize> {
    (rows * lane / lanes)..(rows * (lane + 1) / lanes)
}

/// Runs `f(lane, lanes)` on every pool lane (or inline without a pool).
fn parallel_lanes<F: Fn(usize, usize) + Sync>(pool: Option<&WorkerPool>, f: F) {
    #[cfg(feature = "std")]
    match pool {
        Some(p) if p.threads() > 1 => {
            let lanes = p.threads();
            p.broadcast(&|lane| f(lane, lanes));
        }
        _ => f(0, 1),
    }
    #[cfg(not(feature = "std"))]
    {
        let _ = pool;
        f(0, 1);
    }
}

/// Hands disjoint row ranges of one buffer to different lanes.
struct RowShards<'a> {
    ptr: *mut f64,
    row_len: usize,
    rows: usize,
    _marker: PhantomData<&'a mut [f64]>,
}

unsafe impl Sync for RowShards<'_> {}

impl<'a> RowShards<'a> {
    fn new(buf: &'a mut [f64], row_len: usize) -> Self {
        assert_eq!(buf.len() % row_len.max(1), 0, "buffer must be a whole number of rows");
        Self { ptr: buf.as_mut_ptr(), row_len, rows: buf.len() / row_len.max(1), _marker: PhantomData }
    }

    /// Slice covering `range` rows.
    ///
    /// Safety: every row must be claimed by at most one lane at a time;
    /// callers partition rows with [`lane_rows`].
    #[allow(clippy::mut_from_ref)]
    unsafe fn take(&self, range: Range<usize>) -> &'a mut [f64] {
        debug_assert!(range.end <= self.rows);
        unsafe {
            core::slice::from_raw_parts_mut(
                self.ptr.add(range.start * self.row_len),
                (range.end - range.start) * self.row_len,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            input_size: 8,
            channel_widths: [3, 4, 4, 4],
            bn_after_layers: vec![2, 3],
            projection_hidden: 10,
            feature_dim: 4,
            output_normalized: false,
        }
    }

    fn random_batch(n: usize, side: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeds::rng(&[seed]);
        (0..n * side * side).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn layout_covers_all_parameters_without_overlap() {
        let net = Network::new(&small_config()).unwrap();
        let mut covered = vec![false; net.param_len()];
        for meta in net.layout() {
            for i in meta.offset..meta.offset + meta.len {
                assert!(!covered[i], "overlap at {i} in {}", meta.name);
                covered[i] = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
        let names: Vec<&str> = net.layout().iter().map(|m| m.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "conv1.weight",
                "conv1.bias",
                "conv2.weight",
                "conv2.bias",
                "bn2.gamma",
                "bn2.beta",
                "bn2.running_mean",
                "bn2.running_var",
                "conv3.weight",
                "conv3.bias",
                "bn3.gamma",
                "bn3.beta",
                "bn3.running_mean",
                "bn3.running_var",
                "conv4.weight",
                "conv4.bias",
                "fc1.weight",
                "fc1.bias",
                "fc2.weight",
                "fc2.bias",
            ]
        );
    }

    // Direct convolution written from the definition, used as an oracle for
    // the im2col + matrix-product path (single sample, so channel-major and
    // sample-major layouts coincide per channel).
    fn conv_reference(x: &[f64], geo: &ConvGeometry, w: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; geo.cout * geo.out_side * geo.out_side];
        for m in 0..geo.cout {
            for oy in 0..geo.out_side {
                for ox in 0..geo.out_side {
                    let mut acc = b[m];
                    for ci in 0..geo.cin {
                        for ky in 0..geo.k {
                            for kx in 0..geo.k {
                                let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                                let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= geo.in_side as isize
                                    || ix >= geo.in_side as isize
                                {
                                    continue;
                                }
                                let xv = x[ci * geo.in_side * geo.in_side
                                    + iy as usize * geo.in_side
                                    + ix as usize];
                                let wv = w[((m * geo.cin + ci) * geo.k + ky) * geo.k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[m * geo.out_side * geo.out_side + oy * geo.out_side + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_convolution_matches_direct_convolution() {
        let geo = ConvGeometry { cin: 3, cout: 5, k: 3, stride: 2, pad: 1, in_side: 7, out_side: 4 };
        let mut rng = seeds::rng(&[99]);
        let x: Vec<f64> = (0..geo.cin * 49).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..geo.cout * geo.cin * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..geo.cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut got = vec![0.0; geo.cout * 16];
        let ops = kernels::detect();
        conv_forward(&x, &mut got, &geo, &w, &b, 1, None, &ops);
        let expected = conv_reference(&x, &geo, &w, &b);
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[cfg(feature = "std")]
    #[test]
    fn forward_is_thread_count_invariant() {
        let cfg = small_config();
        let net = Network::new(&cfg).unwrap();
        let params = net.init_params(3);
        let batch = random_batch(7, 8, 5);
        let mut state = ForwardState::new();
        let z1 = net
            .forward(&mut params.clone(), &batch, 7, ForwardMode::Train, None, &mut state)
            .unwrap();
        let pool = crate::pool::WorkerPool::new(3);
        let z2 = net
            .forward(&mut params.clone(), &batch, 7, ForwardMode::Train, Some(&pool), &mut state)
            .unwrap();
        assert_eq!(z1, z2);
    }

    #[test]
    fn train_forward_updates_running_statistics() {
        let cfg = small_config();
        let net = Network::new(&cfg).unwrap();
        let mut params = net.init_params(4);
        let before: Vec<f64> = params.clone();
        let batch = random_batch(6, 8, 8);
        let mut state = ForwardState::new();
        net.forward(&mut params, &batch, 6, ForwardMode::Train, None, &mut state).unwrap();
        let rmean_meta = net.layout().iter().find(|m| m.name == "bn2.running_mean").unwrap();
        let changed = (rmean_meta.offset..rmean_meta.offset + rmean_meta.len)
            .any(|i| params[i] != before[i]);
        assert!(changed, "train mode must update running statistics");
        // Trainable parameters untouched by a forward pass.
        for meta in net.layout().iter().filter(|m| m.trainable) {
            for i in meta.offset..meta.offset + meta.len {
                assert_eq!(params[i], before[i]);
            }
        }
    }

    // Full-network gradient check: analytic parameter gradients against
    // central finite differences of a scalar readout, in train mode so the
    // batch-norm coupling is exercised.
    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = small_config();
        let net = Network::new(&cfg).unwrap();
        let params = net.init_params(17);
        let n = 4;
        let batch = random_batch(n, 8, 23);
        let mut rng = seeds::rng(&[55]);
        let readout: Vec<f64> = (0..n * cfg.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ops = kernels::detect();

        let loss_of = |p: &[f64]| -> f64 {
            let mut p = p.to_vec();
            let mut state = ForwardState::new();
            let z = net.forward(&mut p, &batch, n, ForwardMode::Train, None, &mut state).unwrap();
            (ops.dot)(&z, &readout)
        };

        let mut p = params.clone();
        let mut state = ForwardState::new();
        net.forward(&mut p, &batch, n, ForwardMode::Train, None, &mut state).unwrap();
        let mut grads = vec![0.0; net.param_len()];
        let mut scratch = BackwardScratch::new();
        net.backward(&params, &state, &readout, None, &mut grads, &mut scratch);

        let mask = net.trainable_mask();
        let h = 1e-4;
        let mut checked = 0;
        let stride = (net.param_len() / 160).max(1);
        for idx in (0..net.param_len()).step_by(stride) {
            if !mask[idx] {
                continue;
            }
            let mut plus = params.clone();
            plus[idx] += h;
            let mut minus = params.clone();
            minus[idx] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let denom = fd.abs().max(grads[idx].abs()).max(1e-6);
            assert!(
                ((grads[idx] - fd) / denom).abs() < 1e-3,
                "param {idx}: analytic {} vs fd {fd}",
                grads[idx]
            );
            checked += 1;
        }
        assert!(checked > 100, "checked only {checked} coordinates");
    }

    #[cfg(feature = "std")]
    #[test]
    fn gradients_are_thread_count_invariant() {
        let cfg = small_config();
        let net = Network::new(&cfg).unwrap();
        let params = net.init_params(29);
        let n = 6;
        let batch = random_batch(n, 8, 31);
        let mut rng = seeds::rng(&[66]);
        let readout: Vec<f64> = (0..n * cfg.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let grads_for = |pool: Option<&crate::pool::WorkerPool>| {
            let mut p = params.clone();
            let mut state = ForwardState::new();
            net.forward(&mut p, &batch, n, ForwardMode::Train, pool, &mut state).unwrap();
            let mut grads = vec![0.0; net.param_len()];
            let mut scratch = BackwardScratch::new();
            net.backward(&params, &state, &readout, pool, &mut grads, &mut scratch);
            grads
        };
        let serial = grads_for(None);
        let pool2 = crate::pool::WorkerPool::new(2);
        let pool5 = crate::pool::WorkerPool::new(5);
        assert_eq!(serial, grads_for(Some(&pool2)));
        assert_eq!(serial, grads_for(Some(&pool5)));
    }

    #[test]
    fn state_reuse_across_batches_is_bit_stable() {
        let cfg = small_config();
        let net = Network::new(&cfg).unwrap();
        let params = net.init_params(41);
        let batch_a = random_batch(5, 8, 1);
        let batch_b = random_batch(3, 8, 2);

        // Fresh state per call.
        let mut fresh = ForwardState::new();
        let za = net
            .forward(&mut params.clone(), &batch_a, 5, ForwardMode::Train, None, &mut fresh)
            .unwrap();
        let mut fresh_b = ForwardState::new();
        let zb = net
            .forward(&mut params.clone(), &batch_b, 3, ForwardMode::Train, None, &mut fresh_b)
            .unwrap();

        // Reused state across differing batch sizes.
        let mut reused = ForwardState::new();
        let za2 = net
            .forward(&mut params.clone(), &batch_a, 5, ForwardMode::Train, None, &mut reused)
            .unwrap();
        let zb2 = net
            .forward(&mut params.clone(), &batch_b, 3, ForwardMode::Train, None, &mut reused)
            .unwrap();
        let za3 = net
            .forward(&mut params.clone(), &batch_a, 5, ForwardMode::Train, None, &mut reused)
            .unwrap();
        assert_eq!(za, za2);
        assert_eq!(zb, zb2);
        assert_eq!(za, za3);
    }

    #[test]
    fn export_import_round_trip_preserves_f32_values() {
        let cfg = small_config();
        let net = Network::new(&cfg).unwrap();
        let flat = net.init_params(9);
        let exported = net.export(&flat, &cfg);
        let reimported = net.params_from(&exported).unwrap();
        let re_exported = net.export(&reimported, &cfg);
        assert_eq!(exported, re_exported);
    }
}
