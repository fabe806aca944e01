//! Fingerprint database, train/test splitting, and contrastive batch
//! construction.
//!
//! Positives for an anchor are its geographically nearest training samples;
//! negatives are drawn uniformly from the training samples farther than a
//! distance threshold. Batch iteration permutes the training set once per
//! epoch, chunks it into mini-batches, and redraws negatives each epoch.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;

use crate::csi::CsiMatrix;
use crate::flt;
use crate::seeds;

/// 2-D position in meters.
pub type Position = [f64; 2];

pub fn position_distance(a: Position, b: Position) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    flt::sqrt(dx * dx + dy * dy)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetError {
    Empty,
    InconsistentShapes { expected: (usize, usize), found: (usize, usize), index: usize },
    BadSplitRatio { ratio: f64 },
    DegenerateSplit { total: usize, test: usize },
    PositiveCountTooLarge { requested: usize, available: usize },
    NotEnoughNegatives { anchor: usize, eligible: usize, requested: usize },
    AnchorOutOfRange { anchor: usize, len: usize },
    Generation(String),
}

impl fmt::Display for DatasetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Empty => write!(f, "database needs at least one sample"),
            Self::InconsistentShapes { expected, found, index } => write!(
                f,
                "sample {index} is {}x{}, expected {}x{}",
                found.0, found.1, expected.0, expected.1
            ),
            Self::BadSplitRatio { ratio } => {
                write!(f, "test ratio must lie strictly between 0 and 1, got {ratio}")
            }
            Self::DegenerateSplit { total, test } => write!(
                f,
                "split of {total} samples into {test} test / {} train is degenerate",
                total.saturating_sub(*test)
            ),
            Self::PositiveCountTooLarge { requested, available } => {
                write!(f, "asked for {requested} positives but only {available} other samples exist")
            }
            Self::NotEnoughNegatives { anchor, eligible, requested } => write!(
                f,
                "anchor {anchor} has only {eligible} samples beyond the distance threshold, needed {requested}"
            ),
            Self::AnchorOutOfRange { anchor, len } => {
                write!(f, "anchor index {anchor} out of range for {len} samples")
            }
            Self::Generation(msg) => write!(f, "dataset generation failed: {msg}"),
        }
    }
}

impl core::error::Error for DatasetError {}

/// One CSI measurement paired with the position it was taken at.
#[derive(Debug, Clone)]
pub struct CsiSample {
    pub csi: CsiMatrix,
    pub position: Position,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DbSource {
    Synthetic,
    Imported,
}

/// Indexed collection of CSI samples with consistent dimensions.
#[derive(Debug, Clone)]
pub struct FingerprintDatabase {
    samples: Vec<CsiSample>,
    num_antennas: usize,
    num_subcarriers: usize,
    source: DbSource,
}

impl FingerprintDatabase {
    pub fn new(samples: Vec<CsiSample>, source: DbSource) -> Result<Self, DatasetError> {
        let first = samples.first().ok_or(DatasetError::Empty)?;
        let (b, n) = (first.csi.rows(), first.csi.cols());
        for (i, s) in samples.iter().enumerate() {
            if (s.csi.rows(), s.csi.cols()) != (b, n) {
                return Err(DatasetError::InconsistentShapes {
                    expected: (b, n),
                    found: (s.csi.rows(), s.csi.cols()),
                    index: i,
                });
            }
        }
        Ok(Self { samples, num_antennas: b, num_subcarriers: n, source })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_antennas(&self) -> usize {
        self.num_antennas
    }

    pub fn num_subcarriers(&self) -> usize {
        self.num_subcarriers
    }

    pub fn source(&self) -> DbSource {
        self.source
    }

    pub fn samples(&self) -> &[CsiSample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &CsiSample {
        &self.samples[i]
    }

    pub fn positions(&self) -> Vec<Position> {
        self.samples.iter().map(|s| s.position).collect()
    }

    /// Sub-database with the given sample indices, in the order given.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, DatasetError> {
        let samples: Vec<CsiSample> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Self::new(samples, self.source)
    }
}

/// Train/test split parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SplitConfig {
    /// Fraction of samples held out for testing, strictly in (0, 1).
    pub test_ratio: f64,
    pub split_seed: u64,
}

/// Randomly partitions a database into train and test sets. The test size
/// is `round(ratio · I)`; both sides must stay non-empty. Deterministic for
/// a given seed, with each side keeping the original sample order.
pub fn split(
    db: &FingerprintDatabase,
    cfg: &SplitConfig,
) -> Result<(FingerprintDatabase, FingerprintDatabase), DatasetError> {
    if !(cfg.test_ratio > 0.0 && cfg.test_ratio < 1.0) {
        return Err(DatasetError::BadSplitRatio { ratio: cfg.test_ratio });
    }
    let total = db.len();
    let test_size = flt::round(cfg.test_ratio * total as f64) as usize;
    if test_size == 0 || test_size >= total {
        return Err(DatasetError::DegenerateSplit { total, test: test_size });
    }
    let mut indices: Vec<usize> = (0..total).collect();
    let mut rng = seeds::rng(&[cfg.split_seed, seeds::TAG_SPLIT]);
    indices.shuffle(&mut rng);
    let mut test_idx: Vec<usize> = indices[..test_size].to_vec();
    let mut train_idx: Vec<usize> = indices[test_size..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((db.subset(&train_idx)?, db.subset(&test_idx)?))
}

/// Indices of the `count` training samples nearest to the anchor position
/// (anchor excluded). Equidistant candidates resolve to the smaller index.
pub fn find_positives(
    train: &FingerprintDatabase,
    anchor_index: usize,
    count: usize,
) -> Result<Vec<usize>, DatasetError> {
    let len = train.len();
    if anchor_index >= len {
        return Err(DatasetError::AnchorOutOfRange { anchor: anchor_index, len });
    }
    if count > len - 1 {
        return Err(DatasetError::PositiveCountTooLarge { requested: count, available: len - 1 });
    }
    let anchor_pos = train.sample(anchor_index).position;
    let mut candidates: Vec<(f64, usize)> = (0..len)
        .filter(|&i| i != anchor_index)
        .map(|i| (position_distance(train.sample(i).position, anchor_pos), i))
        .collect();
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(candidates[..count].iter().map(|&(_, i)| i).collect())
}

/// Uniform random subset (without replacement) of the training samples
/// farther than `d_th` from the anchor. Deterministic for a given seed.
pub fn sample_negatives(
    train: &FingerprintDatabase,
    anchor_index: usize,
    count: usize,
    d_th: f64,
    seed: u64,
) -> Result<Vec<usize>, DatasetError> {
    sample_negatives_excluding(train, anchor_index, count, d_th, seed, &[])
}

/// As [`sample_negatives`], additionally excluding `excluded` indices
/// (sorted); batch iteration uses this to keep positives out of the
/// negative pool for the rare anchors whose positives lie beyond `d_th`.
pub fn sample_negatives_excluding(
    train: &FingerprintDatabase,
    anchor_index: usize,
    count: usize,
    d_th: f64,
    seed: u64,
    excluded: &[usize],
) -> Result<Vec<usize>, DatasetError> {
    let len = train.len();
    if anchor_index >= len {
        return Err(DatasetError::AnchorOutOfRange { anchor: anchor_index, len });
    }
    let anchor_pos = train.sample(anchor_index).position;
    let eligible: Vec<usize> = (0..len)
        .filter(|&i| {
            i != anchor_index
                && excluded.binary_search(&i).is_err()
                && position_distance(train.sample(i).position, anchor_pos) > d_th
        })
        .collect();
    if eligible.len() < count {
        return Err(DatasetError::NotEnoughNegatives {
            anchor: anchor_index,
            eligible: eligible.len(),
            requested: count,
        });
    }
    let mut rng = seeds::rng(&[seed, seeds::TAG_NEGATIVE, anchor_index as u64]);
    let picked = rand::seq::index::sample(&mut rng, eligible.len(), count);
    let mut out: Vec<usize> = picked.iter().map(|k| eligible[k]).collect();
    out.sort_unstable();
    Ok(out)
}

/// One contrastive mini-batch: anchors with their positive and negative
/// index sets, all indices into the training subset.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

/// Sampling parameters consumed by batch iteration.
#[derive(Debug, Clone, Copy)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub num_positives: usize,
    pub num_negatives: usize,
    pub distance_threshold: f64,
}

/// Yields the epoch's batches: a seeded permutation of the training set,
/// chunked into batches of `batch_size` (final partial batch kept).
pub fn iterate_batches<'a>(
    train: &'a FingerprintDatabase,
    plan: BatchPlan,
    epoch_seed: u64,
) -> Result<BatchIter<'a>, DatasetError> {
    if train.len() < 2 || plan.num_positives > train.len() - 1 {
        return Err(DatasetError::PositiveCountTooLarge {
            requested: plan.num_positives,
            available: train.len().saturating_sub(1),
        });
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = seeds::rng(&[epoch_seed, seeds::TAG_EPOCH]);
    order.shuffle(&mut rng);
    Ok(BatchIter { train, plan, epoch_seed, order, cursor: 0 })
}

pub struct BatchIter<'a> {
    train: &'a FingerprintDatabase,
    plan: BatchPlan,
    epoch_seed: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Result<ContrastiveBatch, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.plan.batch_size).min(self.order.len());
        let anchors: Vec<usize> = self.order[self.cursor..end].to_vec();
        self.cursor = end;

        let mut positives = Vec::with_capacity(anchors.len());
        let mut negatives = Vec::with_capacity(anchors.len());
        for &a in &anchors {
            let pos = match find_positives(self.train, a, self.plan.num_positives) {
                Ok(p) => p,
                Err(e) => return Some(Err(e)),
            };
            let mut sorted_pos = pos.clone();
            sorted_pos.sort_unstable();
            let neg = match sample_negatives_excluding(
                self.train,
                a,
                self.plan.num_negatives,
                self.plan.distance_threshold,
                self.epoch_seed,
                &sorted_pos,
            ) {
                Ok(n) => n,
                Err(e) => return Some(Err(e)),
            };
            positives.push(pos);
            negatives.push(neg);
        }
        Some(Ok(ContrastiveBatch { anchors, positives, negatives }))
    }
}
