//! Analytical cost model of the decoder stack.
//!
//! Costs are kept in multiply-accumulates and reported as FLOPs at two FLOPs
//! per mul-add. Per layer with `N` tokens:
//!
//! | component        | mul-adds              |
//! |------------------|-----------------------|
//! | `attn_proj`      | `4 d^2 N` (Q, K, V, O)|
//! | `attn_quadratic` | `2 N^2 d` (scores, mix)|
//! | `ffn_dense`      | `3 d d_ff` per dense token |
//! | `ffn_hadamard`   | `d` per approximated token |
//!
//! Layers after the prune point see the reduced visual count. Softmax,
//! normalization, embedding and the LM head are not modelled.

use serde::Serialize;

use crate::contribution::keep_count;
use crate::error::{CapaError, Result};
use crate::model::{FfnMode, LayerExecPlan, Modality, ModelConfig};

/// `2 · 3 · d · d_ff` FLOPs per token for a SwiGLU FFN.
pub fn ffn_flops(d: u64, d_ff: u64) -> u64 {
    2 * 3 * d * d_ff
}

/// One multiply per dimension.
pub fn hadamard_flops(d: u64) -> u64 {
    d
}

/// `ffn_flops / hadamard_flops = 6 d_ff`.
pub fn ffn_reduction_factor(d: u64, d_ff: u64) -> u64 {
    ffn_flops(d, d_ff) / hadamard_flops(d)
}

/// `(N, N')` for a pruning rate `rho` applied to image tokens.
pub fn sequence_lengths(n_img: usize, n_txt: usize, rho: f64) -> Result<(usize, usize)> {
    if !(0.0..1.0).contains(&rho) {
        return Err(CapaError::InvalidArgument(format!(
            "pruning rate {rho} outside [0, 1)"
        )));
    }
    let kept = if n_img == 0 {
        0
    } else {
        keep_count(1.0 - rho, n_img)
    };
    Ok((n_img + n_txt, kept + n_txt))
}

pub fn linear_speedup(n: usize, n_pruned: usize) -> f64 {
    n as f64 / n_pruned as f64
}

pub fn attention_speedup(n: usize, n_pruned: usize) -> f64 {
    linear_speedup(n, n_pruned).powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    AttnProj,
    AttnQuadratic,
    FfnDense,
    FfnHadamard,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::AttnProj,
        Component::AttnQuadratic,
        Component::FfnDense,
        Component::FfnHadamard,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Component::AttnProj => "attn_proj",
            Component::AttnQuadratic => "attn_quadratic",
            Component::FfnDense => "ffn_dense",
            Component::FfnHadamard => "ffn_hadamard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostEntry {
    pub layer: usize,
    pub component: Component,
    pub mul_adds: u64,
}

/// Image/text token counts entering the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SeqShape {
    pub n_img: usize,
    pub n_txt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub seq: SeqShape,
    /// Pruning rate `1 - keep_ratio`, 0 without pruning.
    pub rho: f64,
    pub prune_after: Option<usize>,
    pub approximated: Vec<usize>,
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    pub fn total_mul_adds(&self) -> u64 {
        self.entries.iter().map(|e| e.mul_adds).sum()
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.total_mul_adds()
    }

    pub fn component_mul_adds(&self, c: Component) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.component == c)
            .map(|e| e.mul_adds)
            .sum()
    }

    pub fn share(&self, c: Component) -> f64 {
        let total = self.total_mul_adds();
        if total == 0 {
            return 0.0;
        }
        self.component_mul_adds(c) as f64 / total as f64
    }

    /// Dense plus approximated FFN share.
    pub fn ffn_share(&self) -> f64 {
        self.share(Component::FfnDense) + self.share(Component::FfnHadamard)
    }

    /// `1 - total / baseline_total`.
    pub fn reduction_vs(&self, baseline: &CostReport) -> f64 {
        1.0 - self.total_mul_adds() as f64 / baseline.total_mul_adds() as f64
    }
}

/// Analytical per-layer cost of running `plan` over a prefill of `seq`.
pub fn pipeline_report(config: &ModelConfig, plan: &LayerExecPlan, seq: SeqShape) -> CostReport {
    let d = config.d_model as u64;
    let d_ff = config.d_ff as u64;
    let pruned_img = plan.prune.map(|p| {
        if seq.n_img == 0 {
            0
        } else {
            keep_count(p.keep_ratio as f64, seq.n_img)
        }
    });
    let mut entries = Vec::with_capacity(config.n_layers * 4);
    for l in 0..config.n_layers {
        let n_img = match (plan.prune, pruned_img) {
            (Some(p), Some(k)) if l > p.after_layer => k,
            _ => seq.n_img,
        } as u64;
        let n_txt = seq.n_txt as u64;
        let n = n_img + n_txt;
        let lp = plan.layers.get(l).copied().unwrap_or_default();
        let bypassed = match lp.ffn_mode {
            FfnMode::Dense => 0,
            _ => {
                let vis = if lp.scope.covers(Modality::Visual) {
                    n_img
                } else {
                    0
                };
                let txt = if lp.scope.covers(Modality::Text) {
                    n_txt
                } else {
                    0
                };
                vis + txt
            }
        };
        let hadamard_tokens = if lp.ffn_mode == FfnMode::Hadamard {
            bypassed
        } else {
            0
        };
        let dense_tokens = n - bypassed;
        for (component, mul_adds) in [
            (Component::AttnProj, 4 * d * d * n),
            (Component::AttnQuadratic, 2 * n * n * d),
            (Component::FfnDense, 3 * d * d_ff * dense_tokens),
            (Component::FfnHadamard, d * hadamard_tokens),
        ] {
            entries.push(CostEntry {
                layer: l,
                component,
                mul_adds,
            });
        }
    }
    CostReport {
        d_model: config.d_model,
        d_ff: config.d_ff,
        n_heads: config.n_heads,
        n_layers: config.n_layers,
        seq,
        rho: plan.prune.map_or(0.0, |p| 1.0 - p.keep_ratio as f64),
        prune_after: plan.prune.map(|p| p.after_layer),
        approximated: plan.approximated_layers(),
        entries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HadamardScope, PrunePoint, PrunePolicy};
    use proptest::prelude::*;

    #[test]
    fn ffn_constants() {
        assert_eq!(ffn_flops(4096, 11008), 270_532_608);
        assert_eq!(ffn_reduction_factor(4096, 11008), 66_048);
        assert_eq!(ffn_flops(64, 256), 98_304);
        assert_eq!(hadamard_flops(64), 64);
    }

    #[test]
    fn sequence_length_examples() {
        assert_eq!(sequence_lengths(576, 64, 0.0).unwrap(), (640, 640));
        let (n, np) = sequence_lengths(576, 0, 0.75).unwrap();
        assert_eq!((n, np), (576, 144));
        assert_eq!(linear_speedup(n, np), 4.0);
        assert_eq!(attention_speedup(n, np), 16.0);
        assert!(sequence_lengths(10, 0, 1.0).is_err());
    }

    fn plan(cfg: &ModelConfig, rho: Option<f32>, approx: &[usize]) -> LayerExecPlan {
        let mut p = LayerExecPlan::dense(cfg.n_layers).with_mode(
            approx,
            FfnMode::Hadamard,
            HadamardScope::VisualOnly,
        );
        if let Some(r) = rho {
            p = p.with_prune(PrunePoint {
                after_layer: 2,
                keep_ratio: 1.0 - r,
                policy: PrunePolicy::Contribution,
            });
        }
        p
    }

    #[test]
    fn shares_sum_to_one() {
        let cfg = ModelConfig::toy();
        let r = pipeline_report(
            &cfg,
            &plan(&cfg, Some(0.5), &[3, 4]),
            SeqShape {
                n_img: 48,
                n_txt: 16,
            },
        );
        let s: f64 = Component::ALL.iter().map(|&c| r.share(c)).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn cost_is_monotone(r1 in 0.0f32..0.95, r2 in 0.0f32..0.95, extra in 3usize..7) {
            let cfg = ModelConfig::toy();
            let seq = SeqShape { n_img: 48, n_txt: 16 };
            let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
            let a = pipeline_report(&cfg, &plan(&cfg, Some(lo), &[2]), seq).total_mul_adds();
            let b = pipeline_report(&cfg, &plan(&cfg, Some(hi), &[2]), seq).total_mul_adds();
            prop_assert!(b <= a);
            let fewer = pipeline_report(&cfg, &plan(&cfg, Some(lo), &[2]), seq).total_mul_adds();
            let more = pipeline_report(&cfg, &plan(&cfg, Some(lo), &[2, extra]), seq).total_mul_adds();
            prop_assert!(more <= fewer);
        }
    }
}
