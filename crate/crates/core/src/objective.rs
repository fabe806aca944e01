//! Contrastive training objective and the direct-mapping regression loss.
//!
//! The contrastive loss drives positive embeddings towards their anchor and
//! negative embeddings away, averaged over a mini-batch:
//!
//! ```text
//! L = (1/A) Σ_a [ -Σ_{p∈P_a} log( exp(z_a·z_p/τ) / Σ_{j∈P_a∪N_a} exp(z_a·z_j/τ) ) ]
//! ```
//!
//! The closed-form gradient with respect to the anchor embedding is exposed
//! separately; it doubles as a cross-check oracle for the end-to-end
//! training gradients. Exponentials are evaluated with max-subtraction so
//! large logits cannot overflow.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::flt;

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveError {
    /// Temperature must be strictly positive and finite.
    BadTemperature { tau: f64 },
    /// Embeddings within one loss input must share a dimension.
    DimensionMismatch,
    /// Each anchor needs at least one positive and one negative.
    EmptySampleSet,
    /// The batch itself is empty.
    EmptyBatch,
}

impl fmt::Display for ObjectiveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadTemperature { tau } => write!(f, "temperature must be > 0, got {tau}"),
            Self::DimensionMismatch => write!(f, "embedding dimensions disagree"),
            Self::EmptySampleSet => write!(f, "anchor needs at least one positive and one negative"),
            Self::EmptyBatch => write!(f, "loss batch is empty"),
        }
    }
}

impl core::error::Error for ObjectiveError {}

/// One anchor with its positive and negative embeddings.
#[derive(Debug, Clone)]
pub struct LossInputs {
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    pub temperature: f64,
}

impl LossInputs {
    fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(ObjectiveError::BadTemperature { tau: self.temperature });
        }
        if self.positives.is_empty() || self.negatives.is_empty() {
            return Err(ObjectiveError::EmptySampleSet);
        }
        let dim = self.anchor.len();
        if self
            .positives
            .iter()
            .chain(self.negatives.iter())
            .any(|z| z.len() != dim)
        {
            return Err(ObjectiveError::DimensionMismatch);
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-anchor loss term with overflow-safe softmax. Returns the scaled
/// logits and their softmax over `P_a ∪ N_a` for reuse by the gradients.
fn anchor_term(inputs: &LossInputs) -> (f64, Vec<f64>) {
    let tau = inputs.temperature;
    let np = inputs.positives.len();
    let logits: Vec<f64> = inputs
        .positives
        .iter()
        .chain(inputs.negatives.iter())
        .map(|z| dot(&inputs.anchor, z) / tau)
        .collect();
    let max_logit = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| flt::exp(l - max_logit)).collect();
    let denom: f64 = exps.iter().sum();
    let log_denom = flt::ln(denom) + max_logit;
    let loss: f64 = logits[..np].iter().map(|&l| log_denom - l).sum();
    let weights: Vec<f64> = exps.iter().map(|&e| e / denom).collect();
    (loss, weights)
}

/// Mean contrastive loss over a batch of anchors.
pub fn supcon_loss(batch: &[LossInputs]) -> Result<f64, ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut total = 0.0;
    for inputs in batch {
        inputs.validate()?;
        total += anchor_term(inputs).0;
    }
    Ok(total / batch.len() as f64)
}

/// Closed-form gradient of the per-anchor loss with respect to the anchor
/// embedding:
///
/// ```text
/// ∂L_a/∂z_a = (|P_a|/τ) [ Σ_p -(1/|P_a| - x_ap) z_p + Σ_n x_an z_n ]
/// ```
///
/// with `x_aj = exp(z_a·z_j/τ) / Σ_k exp(z_a·z_k/τ)` the softmax over all
/// positives and negatives.
pub fn supcon_grad_anchor(inputs: &LossInputs) -> Result<Vec<f64>, ObjectiveError> {
    inputs.validate()?;
    let (_, weights) = anchor_term(inputs);
    let np = inputs.positives.len() as f64;
    let tau = inputs.temperature;
    let dim = inputs.anchor.len();
    let mut grad = vec![0.0; dim];
    for (p, z) in inputs.positives.iter().enumerate() {
        let coeff = -(np / tau) * (1.0 / np - weights[p]);
        for (g, zv) in grad.iter_mut().zip(z) {
            *g += coeff * zv;
        }
    }
    for (n, z) in inputs.negatives.iter().enumerate() {
        let coeff = (np / tau) * weights[inputs.positives.len() + n];
        for (g, zv) in grad.iter_mut().zip(z) {
            *g += coeff * zv;
        }
    }
    Ok(grad)
}

/// Direct-mapping loss: mean Euclidean distance between 2-D embeddings and
/// their true positions.
pub fn dm_loss(embeddings: &[Vec<f64>], positions: &[[f64; 2]]) -> Result<f64, ObjectiveError> {
    if embeddings.is_empty() || embeddings.len() != positions.len() {
        return Err(ObjectiveError::DimensionMismatch);
    }
    let mut total = 0.0;
    for (z, p) in embeddings.iter().zip(positions) {
        if z.len() != 2 {
            return Err(ObjectiveError::DimensionMismatch);
        }
        total += flt::dist(z, p);
    }
    Ok(total / embeddings.len() as f64)
}

/// Index-based view of one anchor inside a deduplicated embedding batch.
/// Used by the trainer, which embeds each distinct sample once.
#[derive(Debug, Clone)]
pub struct AnchorRefs {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Batch loss and its gradient with respect to *every* embedding slot.
///
/// `embeddings` is row-major `[slots × dim]`. The returned gradient has the
/// same layout. Gradients flow into anchors, positives and negatives alike,
/// matching what a reverse-mode evaluation of the loss produces.
pub fn supcon_batch_grads(
    embeddings: &[f64],
    dim: usize,
    anchors: &[AnchorRefs],
    temperature: f64,
) -> Result<(f64, Vec<f64>), ObjectiveError> {
    if anchors.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(ObjectiveError::BadTemperature { tau: temperature });
    }
    let slot = |i: usize| &embeddings[i * dim..(i + 1) * dim];
    let batch_size = anchors.len() as f64;
    let mut grads = vec![0.0; embeddings.len()];
    let mut total_loss = 0.0;

    for a in anchors {
        if a.positives.is_empty() || a.negatives.is_empty() {
            return Err(ObjectiveError::EmptySampleSet);
        }
        let za = slot(a.anchor);
        let np = a.positives.len() as f64;
        let others: Vec<usize> = a.positives.iter().chain(a.negatives.iter()).copied().collect();
        let logits: Vec<f64> = others.iter().map(|&j| dot(za, slot(j)) / temperature).collect();
        let max_logit = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| flt::exp(l - max_logit)).collect();
        let denom: f64 = exps.iter().sum();
        let log_denom = flt::ln(denom) + max_logit;
        total_loss += logits[..a.positives.len()]
            .iter()
            .map(|&l| log_denom - l)
            .sum::<f64>();

        // Anchor gradient: -(1/τ)Σ_p z_p + (|P|/τ) Σ_j x_j z_j.
        // Member gradient for j: z_a/τ · (|P|·x_j - [j is positive]).
        let scale = 1.0 / (batch_size * temperature);
        for (k, &j) in others.iter().enumerate() {
            let x = exps[k] / denom;
            let is_positive = k < a.positives.len();
            let anchor_coeff = (np * x - if is_positive { 1.0 } else { 0.0 }) * scale;
            let zj = slot(j);
            let ga = &mut grads[a.anchor * dim..(a.anchor + 1) * dim];
            for (g, zv) in ga.iter_mut().zip(zj) {
                *g += anchor_coeff * zv;
            }
            let gj = &mut grads[j * dim..(j + 1) * dim];
            let za = &embeddings[a.anchor * dim..(a.anchor + 1) * dim];
            for (g, zv) in gj.iter_mut().zip(za) {
                *g += anchor_coeff * zv;
            }
        }
    }
    Ok((total_loss / batch_size, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use rand::Rng;

    fn randvec(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn random_inputs(dim: usize, np: usize, nn: usize, tau: f64, seed: u64) -> LossInputs {
        let mut rng = seeds::rng(&[seed]);
        LossInputs {
            anchor: randvec(dim, &mut rng),
            positives: (0..np).map(|_| randvec(dim, &mut rng)).collect(),
            negatives: (0..nn).map(|_| randvec(dim, &mut rng)).collect(),
            temperature: tau,
        }
    }

    /// Straight-line evaluation of the loss definition, term by term,
    /// without max-subtraction. Independent of the implementation above.
    fn literal_loss(batch: &[LossInputs]) -> f64 {
        let mut total = 0.0;
        for inp in batch {
            let mut term = 0.0;
            for p in &inp.positives {
                let num = flt::exp(dot(&inp.anchor, p) / inp.temperature);
                let mut den = 0.0;
                for n in &inp.negatives {
                    den += flt::exp(dot(&inp.anchor, n) / inp.temperature);
                }
                for r in &inp.positives {
                    den += flt::exp(dot(&inp.anchor, r) / inp.temperature);
                }
                term -= flt::ln(num / den);
            }
            total += term;
        }
        total / batch.len() as f64
    }

    #[test]
    fn identical_embeddings_one_pair_gives_log_two() {
        let z = vec![0.3, -0.7, 0.2];
        let batch = [LossInputs {
            anchor: z.clone(),
            positives: vec![z.clone()],
            negatives: vec![z.clone()],
            temperature: 1.5,
        }];
        let loss = supcon_loss(&batch).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identical_embeddings_two_pairs_gives_two_log_four() {
        let z = vec![1.0, 2.0];
        let batch = [LossInputs {
            anchor: z.clone(),
            positives: vec![z.clone(), z.clone()],
            negatives: vec![z.clone(), z.clone()],
            temperature: 0.5,
        }];
        let loss = supcon_loss(&batch).unwrap();
        assert!((loss - 2.0 * 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_literal_oracle_on_random_batch() {
        let batch: Vec<LossInputs> = (0..4)
            .map(|i| random_inputs(4, 3, 5, 1.5, 1000 + i))
            .collect();
        let loss = supcon_loss(&batch).unwrap();
        let oracle = literal_loss(&batch);
        assert!((loss - oracle).abs() < 1e-12, "{loss} vs {oracle}");
    }

    #[test]
    fn loss_stays_finite_with_large_logits() {
        let mut inp = random_inputs(4, 2, 2, 0.5, 9);
        for z in inp.positives.iter_mut().chain(inp.negatives.iter_mut()) {
            for v in z.iter_mut() {
                *v *= 500.0;
            }
        }
        for v in inp.anchor.iter_mut() {
            *v *= 500.0;
        }
        let loss = supcon_loss(&[inp]).unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn rejects_bad_temperature_and_empty_sets() {
        let mut inp = random_inputs(3, 1, 1, 1.0, 2);
        inp.temperature = 0.0;
        assert!(matches!(
            supcon_loss(&[inp.clone()]),
            Err(ObjectiveError::BadTemperature { .. })
        ));
        inp.temperature = 1.0;
        inp.negatives.clear();
        assert_eq!(supcon_loss(&[inp]), Err(ObjectiveError::EmptySampleSet));
        assert_eq!(supcon_loss(&[]), Err(ObjectiveError::EmptyBatch));
    }

    #[test]
    fn gradient_vanishes_at_symmetric_stationary_point() {
        let z = vec![0.4, -0.2, 0.9];
        let inp = LossInputs {
            anchor: z.clone(),
            positives: vec![z.clone(); 3],
            negatives: vec![z.clone(); 3],
            temperature: 1.5,
        };
        let grad = supcon_grad_anchor(&inp).unwrap();
        for g in grad {
            assert!(g.abs() < 1e-12);
        }
    }

    // Symbolic 1 positive + 1 negative case: L = -s_p + log(e^{s_p}+e^{s_n})
    // with s_j = z_a·z_j/τ, so ∂L/∂z_a = -(1-x_p) z_p/τ + x_n z_n/τ.
    #[test]
    fn gradient_matches_symbolic_one_one_case() {
        let inp = random_inputs(5, 1, 1, 1.0, 33);
        let sp = dot(&inp.anchor, &inp.positives[0]);
        let sn = dot(&inp.anchor, &inp.negatives[0]);
        let m = sp.max(sn);
        let ep = flt::exp(sp - m);
        let en = flt::exp(sn - m);
        let xp = ep / (ep + en);
        let xn = en / (ep + en);
        let grad = supcon_grad_anchor(&inp).unwrap();
        for i in 0..5 {
            let expected = -(1.0 - xp) * inp.positives[0][i] + xn * inp.negatives[0][i];
            assert!((grad[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..8u64 {
            let inp = random_inputs(6, 3, 7, if seed % 2 == 0 { 0.5 } else { 1.5 }, 500 + seed);
            let grad = supcon_grad_anchor(&inp).unwrap();
            let h = 1e-6;
            for i in 0..6 {
                let mut plus = inp.clone();
                plus.anchor[i] += h;
                let mut minus = inp.clone();
                minus.anchor[i] -= h;
                let fd = (supcon_loss(&[plus]).unwrap() - supcon_loss(&[minus]).unwrap()) / (2.0 * h);
                let denom = grad[i].abs().max(1e-8);
                assert!(
                    ((grad[i] - fd) / denom).abs() < 1e-4,
                    "seed {seed} coord {i}: analytic {} vs fd {fd}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn high_temperature_limit_is_uniform_softmax() {
        let inp = random_inputs(8, 4, 12, 1e6, 71);
        let loss = supcon_loss(&[inp]).unwrap();
        let expected = 4.0 * 16.0f64.ln();
        assert!((loss - expected).abs() < 1e-3, "{loss} vs {expected}");
    }

    // With many negatives and small random embeddings, softmax weights sit
    // near 1/(|P|+|N|), so positives satisfy x_ap < 1/|P| and the descent
    // direction points from the anchor towards the positives' mean relative
    // to the softmax-weighted negatives.
    #[test]
    fn descent_direction_attracts_towards_positive_mean() {
        let mut favorable = 0;
        let trials = 200;
        for seed in 0..trials {
            let inp = random_inputs(16, 8, 64, 1.5, 9000 + seed);
            let (_, weights) = anchor_term(&inp);
            let np = inp.positives.len();
            let below = weights[..np].iter().filter(|&&x| x < 1.0 / np as f64).count();
            if below * 2 <= np {
                continue;
            }
            let grad = supcon_grad_anchor(&inp).unwrap();
            let mut target = vec![0.0; 16];
            for p in &inp.positives {
                for (t, v) in target.iter_mut().zip(p) {
                    *t += v / np as f64;
                }
            }
            let wsum: f64 = weights[np..].iter().sum();
            for (k, n) in inp.negatives.iter().enumerate() {
                let w = weights[np + k] / wsum;
                for (t, v) in target.iter_mut().zip(n) {
                    *t -= w * v;
                }
            }
            let inner: f64 = grad.iter().zip(&target).map(|(g, t)| -g * t).sum();
            if inner > 0.0 {
                favorable += 1;
            }
        }
        assert!(
            favorable as f64 > 0.7 * trials as f64,
            "attraction held in only {favorable}/{trials} trials"
        );
    }

    #[test]
    fn dm_loss_basics() {
        let zs = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let ps = [[1.0, 2.0], [3.0, 4.0]];
        assert!(dm_loss(&zs, &ps).unwrap() < 1e-15);

        let z = vec![vec![3.0, 4.0]];
        let p = [[0.0, 0.0]];
        assert!((dm_loss(&z, &p).unwrap() - 5.0).abs() < 1e-12);

        let bad = vec![vec![1.0, 2.0, 3.0]];
        assert_eq!(dm_loss(&bad, &p), Err(ObjectiveError::DimensionMismatch));
    }

    #[test]
    fn dm_loss_matches_mean_of_norms_oracle() {
        let mut rng = seeds::rng(&[321]);
        let zs: Vec<Vec<f64>> = (0..20).map(|_| randvec(2, &mut rng)).collect();
        let ps: Vec<[f64; 2]> = (0..20)
            .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
            .collect();
        let loss = dm_loss(&zs, &ps).unwrap();
        let mut oracle = 0.0;
        for (z, p) in zs.iter().zip(&ps) {
            oracle += ((z[0] - p[0]).powi(2) + (z[1] - p[1]).powi(2)).sqrt();
        }
        oracle /= 20.0;
        assert!((loss - oracle).abs() < 1e-12);
    }

    // The deduplicated batch gradient must agree with the closed-form anchor
    // gradient when every slot plays exactly one role.
    #[test]
    fn batch_grads_match_anchor_gradient_for_disjoint_slots() {
        let dim = 5;
        let mut rng = seeds::rng(&[777]);
        let n_anchors = 3;
        let np = 2;
        let nn = 4;
        let slots = n_anchors * (1 + np + nn);
        let embeddings: Vec<f64> = (0..slots * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut anchors = Vec::new();
        for a in 0..n_anchors {
            let base = a * (1 + np + nn);
            anchors.push(AnchorRefs {
                anchor: base,
                positives: (base + 1..base + 1 + np).collect(),
                negatives: (base + 1 + np..base + 1 + np + nn).collect(),
            });
        }
        let tau = 1.5;
        let (loss, grads) = supcon_batch_grads(&embeddings, dim, &anchors, tau).unwrap();

        let mut batch = Vec::new();
        for a in &anchors {
            batch.push(LossInputs {
                anchor: embeddings[a.anchor * dim..(a.anchor + 1) * dim].to_vec(),
                positives: a
                    .positives
                    .iter()
                    .map(|&j| embeddings[j * dim..(j + 1) * dim].to_vec())
                    .collect(),
                negatives: a
                    .negatives
                    .iter()
                    .map(|&j| embeddings[j * dim..(j + 1) * dim].to_vec())
                    .collect(),
                temperature: tau,
            });
        }
        assert!((loss - supcon_loss(&batch).unwrap()).abs() < 1e-12);
        for (a, inp) in anchors.iter().zip(&batch) {
            let expected = supcon_grad_anchor(inp).unwrap();
            for i in 0..dim {
                let got = grads[a.anchor * dim + i] * n_anchors as f64;
                assert!(
                    (got - expected[i]).abs() < 1e-10,
                    "slot {} coord {i}: {got} vs {}",
                    a.anchor,
                    expected[i]
                );
            }
        }
    }

    // Full-batch gradient against finite differences of the batch loss,
    // including shared slots (one sample used by several anchors).
    #[test]
    fn batch_grads_match_finite_differences_with_shared_slots() {
        let dim = 4;
        let slots = 10;
        let mut rng = seeds::rng(&[888]);
        let embeddings: Vec<f64> = (0..slots * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let anchors = vec![
            AnchorRefs { anchor: 0, positives: vec![1, 2], negatives: vec![3, 4, 5] },
            AnchorRefs { anchor: 1, positives: vec![0, 6], negatives: vec![4, 7, 8] },
            AnchorRefs { anchor: 9, positives: vec![2, 6], negatives: vec![3, 8, 5] },
        ];
        let tau = 0.8;
        let (_, grads) = supcon_batch_grads(&embeddings, dim, &anchors, tau).unwrap();
        let h = 1e-6;
        for idx in 0..slots * dim {
            let mut plus = embeddings.clone();
            plus[idx] += h;
            let mut minus = embeddings.clone();
            minus[idx] -= h;
            let lp = supcon_batch_grads(&plus, dim, &anchors, tau).unwrap().0;
            let lm = supcon_batch_grads(&minus, dim, &anchors, tau).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (grads[idx] - fd).abs() < 1e-6 * fd.abs().max(1.0),
                "coord {idx}: {} vs {fd}",
                grads[idx]
            );
        }
    }
}
