//! Mini-batch gradient training of the encoder: the contrastive recipe
//! (Adam, halving learning-rate schedule, decoupled weight decay) and the
//! direct-mapping regression variant.
//!
//! Every batch embeds the union of anchors, positives and negatives in one
//! training-mode forward pass, so batch-norm statistics cover all roles and
//! no stale embeddings survive an optimizer step. Runs are deterministic
//! given the seeds; with `num_threads == 1` they are bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::dataset::{self, BatchPlan, DatasetError, FingerprintDatabase};
use crate::encoder::engine::{BackwardScratch, ForwardMode, ForwardState, Network};
use crate::encoder::{EncoderConfig, EncoderError, EncoderParams};
use crate::flt;
use crate::objective::{self, AnchorRefs, ObjectiveError};
use crate::preprocess::{self, PreprocessError, PreprocessedInput};
use crate::seeds;

#[cfg(feature = "std")]
use crate::pool::WorkerPool;

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    BadConfig(&'static str),
    Dataset(DatasetError),
    Encoder(EncoderError),
    Objective(ObjectiveError),
    Preprocess(PreprocessError),
    /// Loss became non-finite; training aborted.
    Diverged { epoch: usize, batch: usize },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadConfig(msg) => write!(f, "invalid training configuration: {msg}"),
            Self::Dataset(e) => write!(f, "{e}"),
            Self::Encoder(e) => write!(f, "{e}"),
            Self::Objective(e) => write!(f, "{e}"),
            Self::Preprocess(e) => write!(f, "{e}"),
            Self::Diverged { epoch, batch } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}")
            }
        }
    }
}

impl core::error::Error for TrainError {}

impl From<DatasetError> for TrainError {
    fn from(e: DatasetError) -> Self {
        Self::Dataset(e)
    }
}

impl From<EncoderError> for TrainError {
    fn from(e: EncoderError) -> Self {
        Self::Encoder(e)
    }
}

impl From<ObjectiveError> for TrainError {
    fn from(e: ObjectiveError) -> Self {
        Self::Objective(e)
    }
}

impl From<PreprocessError> for TrainError {
    fn from(e: PreprocessError) -> Self {
        Self::Preprocess(e)
    }
}

/// Full training recipe. Defaults reproduce the contrastive reference
/// settings; [`TrainConfig::direct_mapping`] switches to the regression
/// recipe (higher initial rate, more epochs).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default = "TrainConfig::supcon"))]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Learning rate is divided by 2 every this many epochs.
    pub lr_halving_period_epochs: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Negative sampling distance threshold d_th in meters.
    pub distance_threshold_m: f64,
    pub temperature: f64,
    pub num_positives: usize,
    pub num_negatives: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub rng_seed: u64,
    /// Worker threads for batch embedding; 1 gives bit-reproducible runs.
    pub num_threads: usize,
}

impl TrainConfig {
    /// Contrastive defaults: Adam at 5e-4 halved every 5 epochs, weight
    /// decay 1e-4, 20 epochs, batches of 32, d_th 25 m, temperature 1.5,
    /// 16 positives and 64 negatives per anchor.
    pub fn supcon() -> Self {
        Self {
            learning_rate: 5e-4,
            lr_halving_period_epochs: 5,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 32,
            distance_threshold_m: 25.0,
            temperature: 1.5,
            num_positives: 16,
            num_negatives: 64,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            rng_seed: 0,
            num_threads: 1,
        }
    }

    /// Direct-mapping recipe: initial rate 0.01 for 100 epochs, everything
    /// else as the contrastive defaults. Contrastive sampling fields are
    /// ignored by the regression loop.
    pub fn direct_mapping() -> Self {
        Self { learning_rate: 0.01, epochs: 100, ..Self::supcon() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig("learning rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("need at least one epoch"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch size must be positive"));
        }
        if self.lr_halving_period_epochs == 0 {
            return Err(TrainError::BadConfig("halving period must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(TrainError::BadConfig("temperature must be positive"));
        }
        if self.num_positives == 0 || self.num_negatives == 0 {
            return Err(TrainError::BadConfig("need at least one positive and one negative"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::BadConfig("weight decay must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate for a 1-indexed epoch under the halving schedule.
    pub fn learning_rate_for_epoch(&self, epoch: usize) -> f64 {
        let halvings = (epoch - 1) / self.lr_halving_period_epochs;
        self.learning_rate * flt::powf(0.5, halvings as f64)
    }
}

/// Loss and learning rate of one completed epoch.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
}

/// Training summary: one entry per completed epoch, the configuration that
/// produced it, and a checksum of the final parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub wall_clock_secs: Option<f64>,
    pub config: TrainConfig,
    pub params_checksum: u64,
}

/// FNV-1a over the serialized tensor contents; cheap reproducibility probe.
pub fn params_checksum(params: &EncoderParams) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for t in &params.tensors {
        eat(t.name.as_bytes());
        for &d in &t.shape {
            eat(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            eat(&v.to_le_bytes());
        }
    }
    hash
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    fn new(len: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            epsilon: cfg.adam_epsilon,
        }
    }

    /// One update with decoupled weight decay, restricted to trainable
    /// entries.
    fn step(&mut self, params: &mut [f64], grads: &[f64], mask: &[bool], lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - flt::powf(self.beta1, self.t as f64);
        let bc2 = 1.0 - flt::powf(self.beta2, self.t as f64);
        for i in 0..params.len() {
            if !mask[i] {
                continue;
            }
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (flt::sqrt(v_hat) + self.epsilon) + weight_decay * params[i]);
        }
    }
}

fn preprocess_all(db: &FingerprintDatabase) -> Result<Vec<PreprocessedInput>, TrainError> {
    db.samples()
        .iter()
        .map(|s| preprocess::preprocess(&s.csi).map_err(TrainError::from))
        .collect()
}

fn gather_batch_input(
    inputs: &[PreprocessedInput],
    indices: &[usize],
    side: usize,
) -> Vec<f64> {
    let mut buf = Vec::with_capacity(indices.len() * side * side);
    for &i in indices {
        buf.extend_from_slice(inputs[i].matrix());
    }
    buf
}

#[cfg(feature = "std")]
fn now() -> Option<std::time::Instant> {
    Some(std::time::Instant::now())
}

#[cfg(not(feature = "std"))]
fn now() -> Option<()> {
    None
}

#[cfg(feature = "std")]
fn elapsed_secs(start: &Option<std::time::Instant>) -> Option<f64> {
    start.as_ref().map(|s| s.elapsed().as_secs_f64())
}

#[cfg(not(feature = "std"))]
fn elapsed_secs(_start: &Option<()>) -> Option<f64> {
    None
}

#[cfg(feature = "std")]
fn make_pool(threads: usize) -> Option<WorkerPool> {
    (threads > 1).then(|| WorkerPool::new(threads))
}

#[cfg(not(feature = "std"))]
fn make_pool(_threads: usize) -> Option<crate::encoder::engine::WorkerPool> {
    None
}

/// Trains the contrastive encoder on a training database.
pub fn train_supcon(
    train_db: &FingerprintDatabase,
    encoder_config: &EncoderConfig,
    config: &TrainConfig,
) -> Result<(EncoderParams, TrainReport), TrainError> {
    config.validate()?;
    encoder_config.validate()?;
    if encoder_config.input_size != train_db.num_antennas() {
        return Err(TrainError::Encoder(EncoderError::InputShapeMismatch {
            expected: encoder_config.input_size,
            found: train_db.num_antennas(),
        }));
    }
    let start = now();
    let inputs = preprocess_all(train_db)?;
    let net = Network::new(encoder_config)?;
    let mut params = net.init_params(config.rng_seed);
    let mask = net.trainable_mask();
    let mut adam = Adam::new(net.param_len(), config);
    let side = encoder_config.input_size;
    let r = encoder_config.feature_dim;
    let plan = BatchPlan {
        batch_size: config.batch_size,
        num_positives: config.num_positives,
        num_negatives: config.num_negatives,
        distance_threshold: config.distance_threshold_m,
    };
    let pool = make_pool(config.num_threads);
    let mut state = ForwardState::new();
    let mut scratch = BackwardScratch::new();
    let mut grads = vec![0.0; net.param_len()];

    let mut epoch_stats = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let lr = config.learning_rate_for_epoch(epoch);
        let epoch_seed = seeds::mix(&[config.rng_seed, seeds::TAG_EPOCH, epoch as u64]);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, batch) in dataset::iterate_batches(train_db, plan, epoch_seed)?.enumerate() {
            let batch = batch?;

            // Embed each distinct sample once; anchors, positives and
            // negatives index into the deduplicated slot list.
            let mut unique: Vec<usize> = batch.anchors.clone();
            for set in batch.positives.iter().chain(batch.negatives.iter()) {
                unique.extend_from_slice(set);
            }
            unique.sort_unstable();
            unique.dedup();
            let slot_of = |sample: usize| unique.binary_search(&sample).expect("sample in batch");

            let refs: Vec<AnchorRefs> = batch
                .anchors
                .iter()
                .zip(batch.positives.iter().zip(&batch.negatives))
                .map(|(&a, (ps, ns))| AnchorRefs {
                    anchor: slot_of(a),
                    positives: ps.iter().map(|&p| slot_of(p)).collect(),
                    negatives: ns.iter().map(|&n| slot_of(n)).collect(),
                })
                .collect();

            let buf = gather_batch_input(&inputs, &unique, side);
            let z = net.forward(
                &mut params,
                &buf,
                unique.len(),
                ForwardMode::Train,
                pool.as_ref(),
                &mut state,
            )?;
            let (loss, dz) = objective::supcon_batch_grads(&z, r, &refs, config.temperature)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: bi });
            }
            net.backward(&params, &state, &dz, pool.as_ref(), &mut grads, &mut scratch);
            adam.step(&mut params, &grads, &mask, lr, config.weight_decay);
            loss_sum += loss;
            batches += 1;
        }
        epoch_stats.push(EpochStats { epoch, mean_loss: loss_sum / batches as f64, learning_rate: lr });
    }

    let exported = net.export(&params, encoder_config);
    let report = TrainReport {
        epochs: epoch_stats,
        wall_clock_secs: elapsed_secs(&start),
        config: config.clone(),
        params_checksum: params_checksum(&exported),
    };
    Ok((exported, report))
}

/// Trains the direct-mapping encoder (2-D output head, regression loss).
pub fn train_direct_mapping(
    train_db: &FingerprintDatabase,
    encoder_config: &EncoderConfig,
    config: &TrainConfig,
) -> Result<(EncoderParams, TrainReport), TrainError> {
    config.validate()?;
    encoder_config.validate()?;
    if encoder_config.feature_dim != 2 {
        return Err(TrainError::BadConfig("direct mapping needs feature_dim 2"));
    }
    if encoder_config.input_size != train_db.num_antennas() {
        return Err(TrainError::Encoder(EncoderError::InputShapeMismatch {
            expected: encoder_config.input_size,
            found: train_db.num_antennas(),
        }));
    }
    let start = now();
    let inputs = preprocess_all(train_db)?;
    let positions = train_db.positions();
    let net = Network::new(encoder_config)?;
    let mut params = net.init_params(config.rng_seed);
    let mask = net.trainable_mask();
    let mut adam = Adam::new(net.param_len(), config);
    let side = encoder_config.input_size;
    let pool = make_pool(config.num_threads);
    let mut state = ForwardState::new();
    let mut scratch = BackwardScratch::new();
    let mut grads = vec![0.0; net.param_len()];

    let mut epoch_stats = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let lr = config.learning_rate_for_epoch(epoch);
        let epoch_seed = seeds::mix(&[config.rng_seed, seeds::TAG_EPOCH, epoch as u64]);
        let mut order: Vec<usize> = (0..train_db.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut rng = seeds::rng(&[epoch_seed, seeds::TAG_EPOCH]);
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let buf = gather_batch_input(&inputs, chunk, side);
            let z = net.forward(
                &mut params,
                &buf,
                chunk.len(),
                ForwardMode::Train,
                pool.as_ref(),
                &mut state,
            )?;
            let n = chunk.len();
            let mut loss = 0.0;
            let mut dz = vec![0.0; n * 2];
            for (s, &idx) in chunk.iter().enumerate() {
                let p = positions[idx];
                let dx = z[s * 2] - p[0];
                let dy = z[s * 2 + 1] - p[1];
                let d = flt::sqrt(dx * dx + dy * dy);
                loss += d;
                if d > 1e-12 {
                    dz[s * 2] = dx / (d * n as f64);
                    dz[s * 2 + 1] = dy / (d * n as f64);
                }
            }
            loss /= n as f64;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: bi });
            }
            net.backward(&params, &state, &dz, pool.as_ref(), &mut grads, &mut scratch);
            adam.step(&mut params, &grads, &mask, lr, config.weight_decay);
            loss_sum += loss;
            batches += 1;
        }
        epoch_stats.push(EpochStats { epoch, mean_loss: loss_sum / batches as f64, learning_rate: lr });
    }

    let exported = net.export(&params, encoder_config);
    let report = TrainReport {
        epochs: epoch_stats,
        wall_clock_secs: elapsed_secs(&start),
        config: config.clone(),
        params_checksum: params_checksum(&exported),
    };
    Ok((exported, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{self, ChannelScenario};

    fn tiny_encoder(input_size: usize, feature_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_size,
            channel_widths: [4, 8, 8, 8],
            bn_after_layers: vec![2, 3],
            projection_hidden: 32,
            feature_dim,
            output_normalized: false,
        }
    }

    fn tiny_db(count: usize, seed: u64) -> FingerprintDatabase {
        let mut scenario = ChannelScenario::desk_default(seed);
        scenario.bs_array =
            sim::ArrayGeometry::planar_grid(2, 4, 0.118, [0.0, 0.0, 25.0], seed);
        scenario.num_subcarriers = 16;
        let positions = sim::random_positions(count, [-80.0, -80.0], [80.0, 80.0], seed);
        sim::generate_dataset(&scenario, &positions).unwrap()
    }

    #[test]
    fn zero_epochs_is_rejected() {
        let mut cfg = TrainConfig::supcon();
        cfg.epochs = 0;
        let db = tiny_db(12, 1);
        assert!(matches!(
            train_supcon(&db, &tiny_encoder(8, 8), &cfg),
            Err(TrainError::BadConfig(_))
        ));
    }

    #[test]
    fn learning_rate_schedule_halves_every_period() {
        let cfg = TrainConfig::supcon();
        let trace: Vec<f64> = (1..=20).map(|e| cfg.learning_rate_for_epoch(e)).collect();
        for e in 0..5 {
            assert_eq!(trace[e], 5e-4);
        }
        for e in 5..10 {
            assert_eq!(trace[e], 2.5e-4);
        }
        for e in 10..15 {
            assert_eq!(trace[e], 1.25e-4);
        }
        for e in 15..20 {
            assert_eq!(trace[e], 6.25e-5);
        }
    }

    #[test]
    fn supcon_training_reduces_loss_on_tiny_problem() {
        let db = tiny_db(48, 3);
        let mut cfg = TrainConfig::supcon().with_seed(7);
        cfg.epochs = 4;
        cfg.num_positives = 3;
        cfg.num_negatives = 8;
        cfg.batch_size = 16;
        cfg.learning_rate = 2e-3;
        let (params, report) = train_supcon(&db, &tiny_encoder(8, 8), &cfg).unwrap();
        assert_eq!(report.epochs.len(), 4);
        assert!(
            report.epochs.last().unwrap().mean_loss < report.epochs[0].mean_loss,
            "loss did not decrease: {:?}",
            report.epochs
        );
        assert_eq!(params.config.feature_dim, 8);
        params.validate().unwrap();
        assert_eq!(report.params_checksum, params_checksum(&params));
    }

    #[test]
    fn identical_seeds_give_bit_identical_parameters() {
        let db = tiny_db(24, 5);
        let mut cfg = TrainConfig::supcon().with_seed(11);
        cfg.epochs = 2;
        cfg.num_positives = 2;
        cfg.num_negatives = 4;
        cfg.batch_size = 8;
        let (a, ra) = train_supcon(&db, &tiny_encoder(8, 4), &cfg).unwrap();
        let (b, rb) = train_supcon(&db, &tiny_encoder(8, 4), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.params_checksum, rb.params_checksum);
        assert_eq!(ra.epochs, rb.epochs);

        let cfg2 = cfg.with_seed(12);
        let (c, _) = train_supcon(&db, &tiny_encoder(8, 4), &cfg2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dm_requires_planar_head_and_overfits_tiny_cluster() {
        let db = tiny_db(10, 9);
        let cfg = TrainConfig::direct_mapping().with_seed(3);
        assert!(matches!(
            train_direct_mapping(&db, &tiny_encoder(8, 3), &cfg),
            Err(TrainError::BadConfig(_))
        ));

        // Ten samples clustered within ~2 m near the origin: the network
        // must be able to memorize them to sub-meter training loss.
        let mut scenario = ChannelScenario::desk_default(13);
        scenario.bs_array = sim::ArrayGeometry::planar_grid(2, 4, 0.118, [0.0, 0.0, 25.0], 13);
        scenario.num_subcarriers = 16;
        let positions = sim::random_positions(10, [-0.5, -0.5], [1.5, 1.5], 13);
        let cluster = sim::generate_dataset(&scenario, &positions).unwrap();
        let (_, report) = train_direct_mapping(&cluster, &tiny_encoder(8, 2), &cfg).unwrap();
        let final_loss = report.epochs.last().unwrap().mean_loss;
        assert!(final_loss < 1.0, "DM training loss stayed at {final_loss}");
    }
}
