//! Hellinger distance between the vanilla and a modified model's next-token
//! distributions, teacher-forced on the vanilla greedy trajectory.

use serde::Serialize;

use crate::error::{CapaError, Result};
use crate::model::{generate, teacher_forced, LayerExecPlan, ModelWeights, TokenStream};
use crate::tensor::OpCounter;

const NORMALIZATION_TOL: f64 = 1e-5;

/// `H(p, q) = (1/sqrt 2) * sqrt(sum_i (sqrt p_i - sqrt q_i)^2)`, in `[0, 1]`.
pub fn hellinger(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(CapaError::InvalidArgument(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    for (name, v) in [("p", p), ("q", q)] {
        if v.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(CapaError::InvalidArgument(format!(
                "{name} has a negative entry"
            )));
        }
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > NORMALIZATION_TOL {
            return Err(CapaError::InvalidArgument(format!("{name} sums to {s}")));
        }
    }
    let s: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| (a.sqrt() - b.sqrt()).powi(2))
        .sum();
    Ok((s.sqrt() / std::f64::consts::SQRT_2).min(1.0))
}

/// Temperature-1 softmax in double precision.
pub fn distribution(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceTrace {
    pub policy: String,
    /// Generation step at which pruning takes effect (0 = prefill).
    pub prune_step: usize,
    pub values: Vec<f64>,
    /// The vanilla greedy trajectory both runs were fed.
    pub tokens: Vec<u32>,
}

impl DivergenceTrace {
    pub fn steps(&self) -> usize {
        self.values.len()
    }
}

/// Per-step Hellinger distance between `vanilla` and `variant` over `steps`
/// generated tokens. Both models see the vanilla run's prefix at every step.
pub fn trace_divergence(
    w: &ModelWeights,
    vanilla: &LayerExecPlan,
    variant: &LayerExecPlan,
    prompt: &TokenStream,
    steps: usize,
    policy: impl Into<String>,
) -> Result<DivergenceTrace> {
    let mut scratch = OpCounter::new();
    let base = generate(prompt, w, vanilla, steps, &mut scratch)?;
    let other = teacher_forced(prompt, w, variant, &base.tokens, &mut scratch)?;
    let values = base
        .step_logits
        .iter()
        .zip(&other.step_logits)
        .map(|(a, b)| hellinger(&distribution(a), &distribution(b)))
        .collect::<Result<_>>()?;
    Ok(DivergenceTrace {
        policy: policy.into(),
        prune_step: 0,
        values,
        tokens: base.tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        assert_eq!(hellinger(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((hellinger(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        // (1/sqrt2) * sqrt((sqrt .5 - 1)^2 + .5), evaluated by hand.
        let expected = ((0.5f64.sqrt() - 1.0).powi(2) + 0.5).sqrt() / 2f64.sqrt();
        let h = hellinger(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((h - expected).abs() < 1e-12);
        assert!((h - 0.5412).abs() < 1e-4);
    }

    #[test]
    fn rejects_invalid_inputs() {
        assert!(hellinger(&[1.0], &[0.5, 0.5]).is_err());
        assert!(hellinger(&[0.6, 0.6], &[0.5, 0.5]).is_err());
        assert!(hellinger(&[1.5, -0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn distribution_is_normalized() {
        let p = distribution(&[1.0, 2.0, 3.0, 1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
    }
}
