//! Position prediction and evaluation: similarity-weighted k-nearest-
//! neighbor regression over a fingerprint database, the direct-mapping
//! predictor, and error statistics (mean, median, CDF, threshold coverage).

use alloc::vec::Vec;
use core::fmt;

use crate::csi::CsiMatrix;
use crate::dataset::{position_distance, FingerprintDatabase, Position};
use crate::encoder::{self, EncoderError, EncoderParams, ForwardMode};
use crate::preprocess::{self, PreprocessError};
use crate::similarity::{self, EmbeddingIndex, MetricError, MetricKind, SimilarityMetric};

#[derive(Debug, Clone, PartialEq)]
pub enum PositioningError {
    EmptyDatabase,
    BadNeighborCount { k: usize, database: usize },
    NonFiniteWeight { index: usize },
    Metric(MetricError),
    Encoder(EncoderError),
    Preprocess(PreprocessError),
    /// Direct mapping needs a 2-D output head.
    NotPlanar { feature_dim: usize },
}

impl fmt::Display for PositioningError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyDatabase => write!(f, "fingerprint database is empty"),
            Self::BadNeighborCount { k, database } => {
                write!(f, "k = {k} neighbors requested from a database of {database}")
            }
            Self::NonFiniteWeight { index } => {
                write!(f, "similarity against fingerprint {index} is not finite")
            }
            Self::Metric(e) => write!(f, "{e}"),
            Self::Encoder(e) => write!(f, "{e}"),
            Self::Preprocess(e) => write!(f, "{e}"),
            Self::NotPlanar { feature_dim } => {
                write!(f, "direct mapping needs feature_dim 2, parameters have {feature_dim}")
            }
        }
    }
}

impl core::error::Error for PositioningError {}

impl From<MetricError> for PositioningError {
    fn from(e: MetricError) -> Self {
        Self::Metric(e)
    }
}

impl From<EncoderError> for PositioningError {
    fn from(e: EncoderError) -> Self {
        Self::Encoder(e)
    }
}

impl From<PreprocessError> for PositioningError {
    fn from(e: PreprocessError) -> Self {
        Self::Preprocess(e)
    }
}

/// Selects the `k` highest-similarity indices; ties resolve to the smaller
/// index. Returns the selected indices in selection order.
pub fn select_top_k(similarities: &[f64], k: usize) -> Result<Vec<usize>, PositioningError> {
    if similarities.is_empty() {
        return Err(PositioningError::EmptyDatabase);
    }
    if k == 0 || k > similarities.len() {
        return Err(PositioningError::BadNeighborCount { k, database: similarities.len() });
    }
    if let Some(bad) = similarities.iter().position(|s| !s.is_finite()) {
        return Err(PositioningError::NonFiniteWeight { index: bad });
    }
    let mut order: Vec<usize> = (0..similarities.len()).collect();
    order.sort_by(|&a, &b| {
        similarities[b]
            .partial_cmp(&similarities[a])
            .expect("similarities are finite")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

/// Similarity-weighted mean of the selected fingerprint positions:
/// `p̄ = Σ_k S_k p_k / Σ_k S_k`.
pub fn weighted_position(
    neighbors: &[usize],
    similarities: &[f64],
    positions: &[Position],
) -> Result<Position, PositioningError> {
    let mut wsum = 0.0;
    let mut acc = [0.0, 0.0];
    for &i in neighbors {
        let w = similarities[i];
        if !w.is_finite() || w < 0.0 {
            return Err(PositioningError::NonFiniteWeight { index: i });
        }
        wsum += w;
        acc[0] += w * positions[i][0];
        acc[1] += w * positions[i][1];
    }
    if !(wsum > 0.0) || !wsum.is_finite() {
        return Err(PositioningError::NonFiniteWeight { index: neighbors[0] });
    }
    Ok([acc[0] / wsum, acc[1] / wsum])
}

/// Weighted kNN prediction for a query embedding against an embedding
/// fingerprint index (the learned-metric fast path).
pub fn predict_wknn_embedding(
    query: &[f64],
    index: &EmbeddingIndex,
    k: usize,
    epsilon: f64,
) -> Result<Position, PositioningError> {
    if index.is_empty() {
        return Err(PositioningError::EmptyDatabase);
    }
    let sims: Result<Vec<f64>, MetricError> = index
        .embeddings
        .iter()
        .map(|z| similarity::supcon_similarity(query, z, epsilon))
        .collect();
    let sims = sims?;
    let neighbors = select_top_k(&sims, k)?;
    weighted_position(&neighbors, &sims, &index.positions)
}

/// Weighted kNN prediction for a raw CSI query against a fingerprint
/// database under any metric (exhaustive linear scan).
pub fn predict_wknn(
    query: &CsiMatrix,
    db: &FingerprintDatabase,
    metric: &SimilarityMetric,
    k: usize,
) -> Result<Position, PositioningError> {
    if db.is_empty() {
        return Err(PositioningError::EmptyDatabase);
    }
    // The learned metric embeds the query once rather than per pair.
    if metric.kind == MetricKind::SupCon {
        let params = metric.encoder.as_ref().ok_or(MetricError::MissingEncoder)?;
        let index = similarity::build_fingerprint_index(db, params)?;
        let z = encoder::forward(params, &preprocess::preprocess(query)?, ForwardMode::Eval)?;
        return predict_wknn_embedding(&z, &index, k, metric.epsilon);
    }
    let sims: Result<Vec<f64>, MetricError> = db
        .samples()
        .iter()
        .map(|s| metric.evaluate(&s.csi, query))
        .collect();
    let sims = sims?;
    let neighbors = select_top_k(&sims, k)?;
    let positions = db.positions();
    weighted_position(&neighbors, &sims, &positions)
}

/// Direct-mapping prediction: the 2-D eval-mode encoder output read as
/// coordinates.
pub fn predict_dm(query: &CsiMatrix, dm_params: &EncoderParams) -> Result<Position, PositioningError> {
    if dm_params.config.feature_dim != 2 {
        return Err(PositioningError::NotPlanar { feature_dim: dm_params.config.feature_dim });
    }
    let z = encoder::forward(dm_params, &preprocess::preprocess(query)?, ForwardMode::Eval)?;
    Ok([z[0], z[1]])
}

/// Per-sample positioning errors with aggregate statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    /// Euclidean errors in meters, in test-sample order.
    pub errors: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    /// Errors sorted ascending, ready for CDF plotting.
    pub sorted_errors: Vec<f64>,
    /// `(threshold_m, fraction of samples with error <= threshold)`.
    pub coverage: Vec<(f64, f64)>,
}

impl EvaluationReport {
    pub fn from_errors(errors: Vec<f64>, thresholds: &[f64]) -> Self {
        assert!(!errors.is_empty(), "report needs at least one error");
        let mut sorted = errors.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("errors are finite"));
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };
        let coverage = thresholds
            .iter()
            .map(|&t| {
                let under = sorted.iter().filter(|&&e| e <= t).count();
                (t, under as f64 / sorted.len() as f64)
            })
            .collect();
        Self { errors, mean, median, sorted_errors: sorted, coverage }
    }
}

/// Runs a predictor over every test sample and aggregates the errors.
pub fn evaluate<F>(
    test_db: &FingerprintDatabase,
    thresholds: &[f64],
    mut predictor: F,
) -> Result<EvaluationReport, PositioningError>
where
    F: FnMut(&CsiMatrix) -> Result<Position, PositioningError>,
{
    if test_db.is_empty() {
        return Err(PositioningError::EmptyDatabase);
    }
    let mut errors = Vec::with_capacity(test_db.len());
    for sample in test_db.samples() {
        let predicted = predictor(&sample.csi)?;
        errors.push(position_distance(predicted, sample.position));
    }
    Ok(EvaluationReport::from_errors(errors, thresholds))
}

/// Mean pairwise distance between positions; scale reference for errors.
pub fn mean_pairwise_distance(positions: &[Position]) -> f64 {
    let n = positions.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            total += position_distance(positions[i], positions[j]);
            count += 1;
        }
    }
    total / count as f64
}
