//! CSI similarity metrics behind one pluggable interface: the learned
//! embedding-distance metric plus three hand-crafted baselines
//! (autocorrelation trace, dominant singular vector, magnitude difference).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_complex::Complex64;

use crate::csi::CsiMatrix;
use crate::dataset::{FingerprintDatabase, Position};
use crate::encoder::{self, Embedding, EncoderError, EncoderParams, ForwardMode};
use crate::flt;
use crate::preprocess::{self, PreprocessError};

/// Default clamp for degenerate (zero-distance) similarity values.
pub const DEFAULT_EPSILON: f64 = 1e-9;

/// Relative top-two singular value gap below which the dominant singular
/// vector is flagged as ill-conditioned.
pub const SVD_DEGENERACY_TOL: f64 = 1e-10;

const POWER_ITER_TOL: f64 = 1e-13;
const POWER_ITER_MAX: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricError {
    ShapeMismatch,
    ZeroMatrix,
    SvdFailure(String),
    Preprocess(PreprocessError),
    Encoder(EncoderError),
    MissingEncoder,
    EmptyDatabase,
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch => write!(f, "operands have different shapes"),
            Self::ZeroMatrix => write!(f, "all-zero matrix has no similarity"),
            Self::SvdFailure(msg) => write!(f, "singular vector computation failed: {msg}"),
            Self::Preprocess(e) => write!(f, "preprocessing failed: {e}"),
            Self::Encoder(e) => write!(f, "encoder failed: {e}"),
            Self::MissingEncoder => write!(f, "learned metric needs encoder parameters"),
            Self::EmptyDatabase => write!(f, "fingerprint database is empty"),
        }
    }
}

impl core::error::Error for MetricError {}

impl From<PreprocessError> for MetricError {
    fn from(e: PreprocessError) -> Self {
        Self::Preprocess(e)
    }
}

impl From<EncoderError> for MetricError {
    fn from(e: EncoderError) -> Self {
        Self::Encoder(e)
    }
}

/// Inverse embedding distance, clamped at `1/epsilon` for coincident pairs.
pub fn supcon_similarity(zi: &[f64], zj: &[f64], epsilon: f64) -> Result<f64, MetricError> {
    if zi.len() != zj.len() {
        return Err(MetricError::ShapeMismatch);
    }
    Ok(1.0 / flt::dist(zi, zj).max(epsilon))
}

/// Normalized trace inner product of the spatial autocorrelations:
/// `Tr{(H_i H_i†)(H_j H_j†)} / (‖H_i H_i†‖_F ‖H_j H_j†‖_F)`, in `[0, 1]`.
pub fn cmd_similarity(hi: &CsiMatrix, hj: &CsiMatrix) -> Result<f64, MetricError> {
    if (hi.rows(), hi.cols()) != (hj.rows(), hj.cols()) {
        return Err(MetricError::ShapeMismatch);
    }
    let ci = preprocess::autocorrelate(hi)?;
    let cj = preprocess::autocorrelate(hj)?;
    let ni = ci.fro_norm();
    let nj = cj.fro_norm();
    if ni == 0.0 || nj == 0.0 {
        return Err(MetricError::ZeroMatrix);
    }
    // Tr{C_i C_j} for Hermitian C's equals the real Frobenius inner product.
    let b = ci.rows();
    let mut trace = 0.0;
    for r in 0..b {
        for c in 0..b {
            let prod = ci.get(r, c) * cj.get(c, r);
            trace += prod.re;
        }
    }
    Ok(trace / (ni * nj))
}

/// Dominant left singular vector with its singular value and a degeneracy
/// flag for near-ties of the top two singular values.
#[derive(Debug, Clone)]
pub struct DominantSingular {
    pub vector: Vec<Complex64>,
    pub sigma: f64,
    pub degenerate: bool,
}

fn hermitian_matvec(c: &CsiMatrix, v: &[Complex64], out: &mut [Complex64]) {
    let b = c.rows();
    for r in 0..b {
        let mut acc = Complex64::new(0.0, 0.0);
        for (x, vj) in c.row(r).iter().zip(v) {
            acc += x * vj;
        }
        out[r] = acc;
    }
}

fn cnorm(v: &[Complex64]) -> f64 {
    flt::sqrt(v.iter().map(|z| z.norm_sqr()).sum::<f64>())
}

fn rayleigh(c: &CsiMatrix, v: &[Complex64], scratch: &mut [Complex64]) -> f64 {
    hermitian_matvec(c, v, scratch);
    v.iter().zip(scratch.iter()).map(|(a, b)| (a.conj() * b).re).sum()
}

fn power_iterate(c: &CsiMatrix, start: &[Complex64]) -> Result<(Vec<Complex64>, f64), MetricError> {
    let b = c.rows();
    let mut v: Vec<Complex64> = start.to_vec();
    let nv = cnorm(&v);
    if nv == 0.0 {
        return Err(MetricError::SvdFailure(String::from("zero start vector")));
    }
    for z in v.iter_mut() {
        *z /= nv;
    }
    let mut w = vec![Complex64::new(0.0, 0.0); b];
    let scale = c.fro_norm();
    for _ in 0..POWER_ITER_MAX {
        hermitian_matvec(c, &v, &mut w);
        let nw = cnorm(&w);
        if nw == 0.0 {
            // v is in the null space; any unit vector of the eigenspace will
            // do for a PSD matrix with this start only if C itself is zero.
            return Err(MetricError::SvdFailure(String::from("iterate collapsed to zero")));
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / nw;
        }
        let lambda = rayleigh(c, &v, &mut w);
        // Residual ‖Cv - λv‖ relative to the matrix scale.
        hermitian_matvec(c, &v, &mut w);
        let mut resid = 0.0;
        for (wi, vi) in w.iter().zip(&v) {
            resid += (wi - vi * lambda).norm_sqr();
        }
        if flt::sqrt(resid) <= POWER_ITER_TOL * scale.max(1e-300) {
            return Ok((v, lambda.max(0.0)));
        }
    }
    Err(MetricError::SvdFailure(String::from("power iteration did not converge")))
}

/// Dominant left singular vector of `H` via power iteration on the
/// Hermitian PSD matrix `H H†` (eigenvalues are squared singular values).
pub fn dominant_left_singular_vector(h: &CsiMatrix) -> Result<DominantSingular, MetricError> {
    if h.fro_norm_sq() == 0.0 {
        return Err(MetricError::ZeroMatrix);
    }
    let c = preprocess::autocorrelate(h)?;
    let b = c.rows();
    // Deterministic start with components along every axis.
    let start: Vec<Complex64> = (0..b)
        .map(|i| Complex64::new(1.0 + (i as f64) * 0.3, 0.7 - (i as f64) * 0.17))
        .collect();
    let (v1, lambda1) = power_iterate(&c, &start)?;

    // Deflate and look at the runner-up to detect a near-degenerate top pair.
    let degenerate = if b > 1 && lambda1 > 0.0 {
        let mut deflated = c.clone();
        for r in 0..b {
            for cc in 0..b {
                let upd = deflated.get(r, cc) - v1[r] * v1[cc].conj() * lambda1;
                deflated.set(r, cc, upd);
            }
        }
        let lambda2 = match power_iterate(&deflated, &start) {
            Ok((_, l2)) => l2,
            Err(_) => 0.0,
        };
        let sigma1 = flt::sqrt(lambda1);
        let sigma2 = flt::sqrt(lambda2.max(0.0));
        (sigma1 - sigma2) <= SVD_DEGENERACY_TOL * sigma1
    } else {
        false
    };

    Ok(DominantSingular { vector: v1, sigma: flt::sqrt(lambda1), degenerate })
}

/// Similarity value plus degeneracy flags of both operands.
#[derive(Debug, Clone)]
pub struct SvdSimilarity {
    pub value: f64,
    pub degenerate_i: bool,
    pub degenerate_j: bool,
}

/// `|v_i† v_j|` of the dominant left singular vectors, in `[0, 1]`, with
/// degeneracy flags (a near-tie of the top singular values makes the
/// dominant vector ill-defined; flagged rather than rejected since measured
/// data can legitimately hit it).
pub fn svd_similarity_detailed(hi: &CsiMatrix, hj: &CsiMatrix) -> Result<SvdSimilarity, MetricError> {
    if (hi.rows(), hi.cols()) != (hj.rows(), hj.cols()) {
        return Err(MetricError::ShapeMismatch);
    }
    let di = dominant_left_singular_vector(hi)?;
    let dj = dominant_left_singular_vector(hj)?;
    let inner: Complex64 = di
        .vector
        .iter()
        .zip(&dj.vector)
        .map(|(a, b)| a.conj() * b)
        .sum();
    Ok(SvdSimilarity {
        value: flt::sqrt(inner.norm_sqr()).min(1.0),
        degenerate_i: di.degenerate,
        degenerate_j: dj.degenerate,
    })
}

/// [`svd_similarity_detailed`] without the flags.
pub fn svd_similarity(hi: &CsiMatrix, hj: &CsiMatrix) -> Result<f64, MetricError> {
    Ok(svd_similarity_detailed(hi, hj)?.value)
}

/// Inverse squared magnitude difference
/// `[ Σ_b Σ_n (|H_i|_bn - |H_j|_bn)² ]⁻¹`, clamped at `1/epsilon`.
pub fn magnitude_similarity(hi: &CsiMatrix, hj: &CsiMatrix, epsilon: f64) -> Result<f64, MetricError> {
    if (hi.rows(), hi.cols()) != (hj.rows(), hj.cols()) {
        return Err(MetricError::ShapeMismatch);
    }
    let mut sum = 0.0;
    for (a, b) in hi.data().iter().zip(hj.data()) {
        let d = flt::sqrt(a.norm_sqr()) - flt::sqrt(b.norm_sqr());
        sum += d * d;
    }
    Ok(1.0 / sum.max(epsilon))
}

/// Metric selector for configuration and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MetricKind {
    SupCon,
    Cmd,
    Svd,
    Magnitude,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::SupCon => "supcon",
            Self::Cmd => "cmd",
            Self::Svd => "svd",
            Self::Magnitude => "magnitude",
        }
    }
}

impl core::str::FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "supcon" => Ok(Self::SupCon),
            "cmd" => Ok(Self::Cmd),
            "svd" => Ok(Self::Svd),
            "magnitude" => Ok(Self::Magnitude),
            other => Err(alloc::format!("unknown metric '{other}' (supcon|cmd|svd|magnitude)")),
        }
    }
}

/// A fully specified similarity metric; the learned kind carries its
/// encoder parameters.
#[derive(Debug, Clone)]
pub struct SimilarityMetric {
    pub kind: MetricKind,
    pub encoder: Option<EncoderParams>,
    pub epsilon: f64,
}

impl SimilarityMetric {
    pub fn hand_crafted(kind: MetricKind) -> Self {
        Self { kind, encoder: None, epsilon: DEFAULT_EPSILON }
    }

    pub fn learned(encoder: EncoderParams) -> Self {
        Self { kind: MetricKind::SupCon, encoder: Some(encoder), epsilon: DEFAULT_EPSILON }
    }

    /// Pairwise similarity straight from two raw CSI matrices.
    pub fn evaluate(&self, hi: &CsiMatrix, hj: &CsiMatrix) -> Result<f64, MetricError> {
        match self.kind {
            MetricKind::SupCon => {
                let params = self.encoder.as_ref().ok_or(MetricError::MissingEncoder)?;
                let zi = encoder::forward(params, &preprocess::preprocess(hi)?, ForwardMode::Eval)?;
                let zj = encoder::forward(params, &preprocess::preprocess(hj)?, ForwardMode::Eval)?;
                supcon_similarity(&zi, &zj, self.epsilon)
            }
            MetricKind::Cmd => cmd_similarity(hi, hj),
            MetricKind::Svd => svd_similarity(hi, hj),
            MetricKind::Magnitude => magnitude_similarity(hi, hj, self.epsilon),
        }
    }
}

/// Embedding fingerprint database `{z_i, p_i}` produced by running every
/// sample through the encoder in eval mode, order preserved.
pub fn build_fingerprint_index(
    db: &FingerprintDatabase,
    params: &EncoderParams,
) -> Result<EmbeddingIndex, MetricError> {
    if db.is_empty() {
        return Err(MetricError::EmptyDatabase);
    }
    let inputs: Result<Vec<_>, PreprocessError> =
        db.samples().iter().map(|s| preprocess::preprocess(&s.csi)).collect();
    let embeddings = encoder::forward_batch(params, &inputs?, ForwardMode::Eval)?;
    Ok(EmbeddingIndex { embeddings, positions: db.positions() })
}

/// Precomputed embeddings with their positions.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    pub embeddings: Vec<Embedding>,
    pub positions: Vec<Position>,
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}
