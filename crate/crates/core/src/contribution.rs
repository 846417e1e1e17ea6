//! Attention-contribution scoring and the three visual-token pruning policies.
//!
//! The contribution of key token `i` to the current query is
//!
//! ```text
//! C_i = || sum_h A[i,h] * (x_i W_V[h]) W_O[h] ||_2
//! ```
//!
//! where `W_V[h]` is head `h`'s column block of the value projection and
//! `W_O[h]` the matching row block of the output projection. Heads are summed
//! before the norm is taken.
//!
//! All policies keep every text token and `k = clamp(round(r * n_visual), 1,
//! n_visual)` visual tokens. Ties in a score are broken by the smaller token
//! index.

use std::cmp::Ordering;

use crate::error::{CapaError, Result};
use crate::model::{
    argmax, decode_step, forward, ForwardOptions, KvCache, LayerExecPlan, LayerWeights, Modality,
    ModelWeights, ProbeRequest, TokenStream,
};
use crate::tensor::{l2_norm, vecmat, OpCounter, Tensor2D};

#[derive(Debug, Clone, PartialEq)]
pub struct ContributionRecord {
    pub layer: usize,
    pub token_index: usize,
    pub modality: Modality,
    pub c_value: f32,
    pub per_head_attn: Vec<f32>,
}

impl ContributionRecord {
    pub fn mean_attn(&self) -> f32 {
        if self.per_head_attn.is_empty() {
            return 0.0;
        }
        (self.per_head_attn.iter().map(|&a| a as f64).sum::<f64>()
            / self.per_head_attn.len() as f64) as f32
    }
}

/// Token index plus modality, the minimum a policy needs to know.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenRef {
    pub index: usize,
    pub modality: Modality,
}

/// Surviving token indices (ascending) after pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct KeepSet {
    pub indices: Vec<usize>,
    pub keep_ratio: f32,
}

impl KeepSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }
}

pub fn check_keep_ratio(keep_ratio: f32) -> Result<()> {
    if keep_ratio.is_finite() && keep_ratio > 0.0 && keep_ratio <= 1.0 {
        Ok(())
    } else {
        Err(CapaError::InvalidArgument(format!(
            "keep ratio {keep_ratio} outside (0, 1]"
        )))
    }
}

/// Number of visual tokens retained: `clamp(round(r * n), 1, n)`.
pub fn keep_count(keep_ratio: f64, n_visual: usize) -> usize {
    let k = (keep_ratio * n_visual as f64).round() as usize;
    k.clamp(1, n_visual.max(1))
}

/// Contribution score of one token from its per-head attention
/// probabilities and its attention input `x` (the normalized residual).
pub fn attention_contribution(
    attn: &[f32],
    x: &[f32],
    layer: &LayerWeights,
    n_heads: usize,
) -> Result<f32> {
    if attn.len() != n_heads {
        return Err(CapaError::InvalidArgument(format!(
            "{} attention weights for {n_heads} heads",
            attn.len()
        )));
    }
    let v = vecmat(x, &layer.wv, &mut OpCounter::new())?;
    contribution_from_value(attn, &v, &layer.wo, n_heads)
}

/// Same score starting from the token's value row `v = x W_V`. The head
/// weights are folded into `v` so a single product with `W_O` yields the
/// head-summed update.
pub fn contribution_from_value(
    attn: &[f32],
    v: &[f32],
    wo: &Tensor2D,
    n_heads: usize,
) -> Result<f32> {
    if attn.len() != n_heads || v.len() % n_heads != 0 {
        return Err(CapaError::InvalidArgument(format!(
            "{} attention weights, value of length {}, {n_heads} heads",
            attn.len(),
            v.len()
        )));
    }
    let dh = v.len() / n_heads;
    let weighted: Vec<f32> = v
        .iter()
        .enumerate()
        .map(|(j, &x)| attn[j / dh] * x)
        .collect();
    let update = vecmat(&weighted, wo, &mut OpCounter::new())?;
    Ok(l2_norm(&update) as f32)
}

fn assemble(tokens: &[TokenRef], scores: &[f32], keep_ratio: f32) -> Result<KeepSet> {
    check_keep_ratio(keep_ratio)?;
    let visual: Vec<(usize, f32)> = tokens
        .iter()
        .zip(scores)
        .filter(|(t, _)| t.modality == Modality::Visual)
        .map(|(t, &s)| (t.index, s))
        .collect();
    if visual.is_empty() {
        return Err(CapaError::InvalidArgument(
            "no visual tokens to rank".into(),
        ));
    }
    let k = keep_count(keep_ratio as f64, visual.len());
    let mut ranked = visual;
    ranked.sort_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    let mut indices: Vec<usize> = ranked[..k].iter().map(|(i, _)| *i).collect();
    indices.extend(
        tokens
            .iter()
            .filter(|t| t.modality == Modality::Text)
            .map(|t| t.index),
    );
    finish(indices, keep_ratio)
}

fn finish(mut indices: Vec<usize>, keep_ratio: f32) -> Result<KeepSet> {
    indices.sort_unstable();
    if indices.windows(2).any(|w| w[0] == w[1]) {
        return Err(CapaError::InvalidArgument("duplicate token index".into()));
    }
    Ok(KeepSet {
        indices,
        keep_ratio,
    })
}

/// Top-k visual tokens by contribution score.
pub fn rank_by_contribution(records: &[ContributionRecord], keep_ratio: f32) -> Result<KeepSet> {
    let tokens: Vec<TokenRef> = records
        .iter()
        .map(|r| TokenRef {
            index: r.token_index,
            modality: r.modality,
        })
        .collect();
    let scores: Vec<f32> = records.iter().map(|r| r.c_value).collect();
    assemble(&tokens, &scores, keep_ratio)
}

/// Top-k visual tokens by head-mean attention probability.
/// `attn_rows[h][j]` is head `h`'s probability on `tokens[j]`.
pub fn rank_by_attention(
    attn_rows: &[Vec<f32>],
    tokens: &[TokenRef],
    keep_ratio: f32,
) -> Result<KeepSet> {
    if attn_rows.is_empty() {
        return Err(CapaError::InvalidArgument("no attention heads".into()));
    }
    if let Some(r) = attn_rows.iter().find(|r| r.len() != tokens.len()) {
        return Err(CapaError::InvalidArgument(format!(
            "attention row of length {} for {} tokens",
            r.len(),
            tokens.len()
        )));
    }
    let h = attn_rows.len() as f64;
    let scores: Vec<f32> = (0..tokens.len())
        .map(|j| (attn_rows.iter().map(|r| r[j] as f64).sum::<f64>() / h) as f32)
        .collect();
    assemble(tokens, &scores, keep_ratio)
}

/// Fixed-stride visual selection: the `j`-th kept visual token is visual
/// ordinal `floor(j * n / k)`.
pub fn uniform_stride(tokens: &[TokenRef], keep_ratio: f32) -> Result<KeepSet> {
    check_keep_ratio(keep_ratio)?;
    let visual: Vec<usize> = tokens
        .iter()
        .filter(|t| t.modality == Modality::Visual)
        .map(|t| t.index)
        .collect();
    if visual.is_empty() {
        return Err(CapaError::InvalidArgument(
            "no visual tokens to sample".into(),
        ));
    }
    let n = visual.len();
    let k = keep_count(keep_ratio as f64, n);
    let mut indices: Vec<usize> = (0..k).map(|j| visual[j * n / k]).collect();
    indices.extend(
        tokens
            .iter()
            .filter(|t| t.modality == Modality::Text)
            .map(|t| t.index),
    );
    finish(indices, keep_ratio)
}

/// Evicts tokens outside `keep` from every cache layer `>= from_layer`.
pub fn prune_cache(cache: KvCache, keep: &KeepSet, from_layer: usize) -> Result<KvCache> {
    cache.retain_from(&keep.indices, from_layer)
}

/// Mean contribution per layer and key modality.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerContributionMean {
    pub layer: usize,
    pub modality: Modality,
    pub mean: f64,
    pub count: u64,
}

/// Greedily generates `steps` tokens and, while feeding each generated token
/// back, averages the contribution of every key it attends to, per layer and
/// key modality. Two rows per layer (visual, then text).
pub fn contribution_trajectory(
    prompt: &TokenStream,
    w: &ModelWeights,
    plan: &LayerExecPlan,
    steps: usize,
) -> Result<Vec<LayerContributionMean>> {
    if prompt.is_empty() {
        return Err(CapaError::InvalidArgument("empty prompt".into()));
    }
    if steps == 0 {
        return Err(CapaError::InvalidArgument("need at least one step".into()));
    }
    let mut scratch = OpCounter::new();
    let trace = forward(prompt, w, plan, ForwardOptions::default(), &mut scratch)?;
    let mut cache = trace.cache;
    let mut logits = trace.logits.row(trace.logits.rows() - 1).to_vec();
    let n_layers = w.config.n_layers;
    let mut sums = vec![[0.0f64; 2]; n_layers];
    let mut counts = vec![[0u64; 2]; n_layers];
    for _ in 0..steps {
        let next = argmax(&logits);
        let out = decode_step(
            &mut cache,
            next,
            w,
            plan,
            ProbeRequest {
                hidden: false,
                attention: true,
            },
            &mut scratch,
        )?;
        for (l, c) in out.contributions.iter().enumerate() {
            for (j, &v) in c.iter().enumerate() {
                let slot = match cache.layers[l].modality[j] {
                    Modality::Visual => 0,
                    Modality::Text => 1,
                };
                sums[l][slot] += v as f64;
                counts[l][slot] += 1;
            }
        }
        logits = out.logits;
    }
    let mut rows = Vec::with_capacity(2 * n_layers);
    for l in 0..n_layers {
        for (slot, modality) in [Modality::Visual, Modality::Text].into_iter().enumerate() {
            let n = counts[l][slot];
            rows.push(LayerContributionMean {
                layer: l,
                modality,
                mean: if n == 0 {
                    0.0
                } else {
                    sums[l][slot] / n as f64
                },
                count: n,
            });
        }
    }
    Ok(rows)
}
