//! Prefill and incremental decoding.
//!
//! Each layer is pre-norm: `h += Attn(norm(h))`, then the FFN sub-block maps
//! `x = h` to `y`, which is `x + FFN(norm(x))` in dense mode, `x * alpha` in
//! hadamard mode and `x` in skip mode. Positions are additive sinusoids of
//! the original token index, so pruned streams keep their positions.
//!
//! The op counter sees the decoder stack only (Q/K/V/O projections, scores,
//! attention mixing, FFN). Embedding lookup, the LM head and contribution
//! scoring use a scratch counter.

use crate::contribution::{
    contribution_from_value, rank_by_attention, rank_by_contribution, uniform_stride,
    ContributionRecord, KeepSet, TokenRef,
};
use crate::error::{CapaError, Result};
use crate::hadamard::apply_hadamard;
use crate::tensor::{matmul, rms_norm, softmax, vecmat, OpCounter, Tensor2D};

use super::cache::{KvCache, LayerCache};
use super::plan::{FfnMode, LayerExecPlan, LayerPlan, PrunePolicy};
use super::tokens::{Modality, TokenStream};
use super::weights::{ffn_swiglu_rows, FfnBlock, LayerWeights, ModelWeights};

pub const NORM_EPS: f64 = 1e-6;
/// Amplitude of the additive sinusoidal position signal.
pub const POS_SCALE: f32 = 0.5;

/// What to capture per layer during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ProbeRequest {
    /// Residual input, attention input, FFN input `x` and output `y`.
    pub hidden: bool,
    /// Last-query attention rows and per-token contribution scores.
    pub attention: bool,
}

impl ProbeRequest {
    pub const NONE: Self = Self {
        hidden: false,
        attention: false,
    };
    pub const ALL: Self = Self {
        hidden: true,
        attention: true,
    };
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub probes: ProbeRequest,
    pub causal: bool,
    /// Use this keep set at the plan's prune point instead of scoring.
    pub keep_override: Option<&'a KeepSet>,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            probes: ProbeRequest::NONE,
            causal: true,
            keep_override: None,
        }
    }
}

impl ForwardOptions<'_> {
    pub fn probed(probes: ProbeRequest) -> Self {
        Self {
            probes,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerProbe {
    pub layer: usize,
    pub positions: Vec<usize>,
    pub modality: Vec<Modality>,
    pub resid_in: Option<Tensor2D>,
    pub attn_in: Option<Tensor2D>,
    pub ffn_in: Option<Tensor2D>,
    pub ffn_out: Option<Tensor2D>,
    /// `attn_rows[h][j]`: head `h` probability from the last query to token `j`.
    pub attn_rows: Option<Vec<Vec<f32>>>,
    pub contributions: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneEvent {
    pub after_layer: usize,
    pub keep: KeepSet,
    pub records: Vec<ContributionRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// One row per surviving token.
    pub logits: Tensor2D,
    pub positions: Vec<usize>,
    pub modality: Vec<Modality>,
    pub layers: Vec<LayerProbe>,
    pub prune: Option<PruneEvent>,
    pub cache: KvCache,
}

impl ForwardTrace {
    pub fn last_logits(&self) -> &[f32] {
        self.logits.row(self.logits.rows() - 1)
    }

    pub fn probe(&self, layer: usize) -> Result<&LayerProbe> {
        self.layers.get(layer).ok_or(CapaError::NotProbed(layer))
    }
}

/// Output of one incremental decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub position: usize,
    pub logits: Vec<f32>,
    /// Per layer: `[h][j]` over that layer's cache (new token last).
    pub attn_rows: Vec<Vec<Vec<f32>>>,
    /// Per layer contribution of each cached token; empty unless probed.
    pub contributions: Vec<Vec<f32>>,
}

pub fn position_encoding(pos: usize, d: usize) -> Vec<f32> {
    (0..d)
        .map(|i| {
            let pair = (i / 2) as f64;
            let freq = 10000f64.powf(-2.0 * pair / d as f64);
            let angle = pos as f64 * freq;
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            (v as f32) * POS_SCALE
        })
        .collect()
}

fn embed_token(w: &ModelWeights, id: u32, pos: usize) -> Result<Vec<f32>> {
    let id = id as usize;
    if id >= w.config.vocab_size {
        return Err(CapaError::InvalidArgument(format!(
            "token id {id} outside vocabulary of {}",
            w.config.vocab_size
        )));
    }
    let pe = position_encoding(pos, w.config.d_model);
    Ok(w.embed
        .row(id)
        .iter()
        .zip(&pe)
        .map(|(e, p)| e + p)
        .collect())
}

fn norm_rows(h: &Tensor2D, scale: &[f32]) -> Tensor2D {
    let mut out = Tensor2D::zeros(h.rows(), h.cols());
    for r in 0..h.rows() {
        out.row_mut(r)
            .copy_from_slice(&rms_norm(h.row(r), scale, NORM_EPS));
    }
    out
}

/// Residual FFN sub-block over the rows of `x`.
fn ffn_block(
    x: &Tensor2D,
    modality: &[Modality],
    lw: &LayerWeights,
    lp: &LayerPlan,
    plan: &LayerExecPlan,
    layer: usize,
    counter: &mut OpCounter,
) -> Result<Tensor2D> {
    let mut y = x.clone();
    let mut dense_rows = Vec::new();
    for (r, &m) in modality.iter().enumerate() {
        let bypass = lp.ffn_mode != FfnMode::Dense && lp.scope.covers(m);
        if !bypass {
            dense_rows.push(r);
            continue;
        }
        if lp.ffn_mode == FfnMode::Hadamard {
            let alpha = plan
                .alphas
                .get(&layer)
                .ok_or(CapaError::Uncalibrated(layer))?;
            let out = apply_hadamard(x.row(r), &alpha.alpha, counter)?;
            y.row_mut(r).copy_from_slice(&out);
        }
    }
    if dense_rows.is_empty() {
        return Ok(y);
    }
    match &lw.ffn {
        FfnBlock::SwiGlu { gate, up, down } => {
            let xn = norm_rows(&x.select_rows(&dense_rows), &lw.ffn_norm);
            let f = ffn_swiglu_rows(&xn, gate, up, down, counter)?;
            for (i, &r) in dense_rows.iter().enumerate() {
                for (yv, fv) in y.row_mut(r).iter_mut().zip(f.row(i)) {
                    *yv += fv;
                }
            }
        }
        FfnBlock::Diagonal(diag) => {
            for &r in &dense_rows {
                let out = apply_hadamard(x.row(r), diag, counter)?;
                y.row_mut(r).copy_from_slice(&out);
            }
        }
    }
    Ok(y)
}

fn check_model(tokens_len: usize, w: &ModelWeights, plan: &LayerExecPlan) -> Result<()> {
    if w.layers.len() != w.config.n_layers {
        return Err(CapaError::Config(
            "weights/config layer count mismatch".into(),
        ));
    }
    plan.validate(w.config.n_layers, w.config.d_model)?;
    if tokens_len > w.config.max_seq {
        return Err(CapaError::SequenceTooLong {
            len: tokens_len,
            max: w.config.max_seq,
        });
    }
    Ok(())
}

/// Full prefill over `tokens`.
pub fn forward(
    tokens: &TokenStream,
    w: &ModelWeights,
    plan: &LayerExecPlan,
    opts: ForwardOptions<'_>,
    counter: &mut OpCounter,
) -> Result<ForwardTrace> {
    if tokens.is_empty() {
        return Err(CapaError::InvalidArgument("empty token stream".into()));
    }
    check_model(tokens.len(), w, plan)?;
    let cfg = &w.config;
    let (d, n_heads, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head());
    let inv_sqrt = 1.0 / (dh as f32).sqrt();

    let mut h = Tensor2D::zeros(0, d);
    for (&id, &pos) in tokens.ids().iter().zip(tokens.positions()) {
        h.push_row(&embed_token(w, id, pos)?)?;
    }
    let mut positions = tokens.positions().to_vec();
    let mut modality = tokens.modality().to_vec();
    let mut cache_layers = Vec::with_capacity(cfg.n_layers);
    let mut probes = Vec::new();
    let mut prune_event = None;

    for (l, lw) in w.layers.iter().enumerate() {
        let n = h.rows();
        let xn = norm_rows(&h, &lw.attn_norm);
        let q = matmul(&xn, &lw.wq, counter)?;
        let k = matmul(&xn, &lw.wk, counter)?;
        let v = matmul(&xn, &lw.wv, counter)?;
        let mut mixed = Tensor2D::zeros(n, d);
        let mut last_rows = Vec::with_capacity(n_heads);
        for head in 0..n_heads {
            let qh = q.col_slice(head * dh, dh);
            let kh = k.col_slice(head * dh, dh);
            let vh = v.col_slice(head * dh, dh);
            let mut scores = matmul(&qh, &kh.transpose(), counter)?;
            for i in 0..n {
                let row = scores.row_mut(i);
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if opts.causal && positions[j] > positions[i] {
                        f32::NEG_INFINITY
                    } else {
                        *s * inv_sqrt
                    };
                }
                let p = softmax(row)?;
                row.copy_from_slice(&p);
            }
            last_rows.push(scores.row(n - 1).to_vec());
            let out = matmul(&scores, &vh, counter)?;
            for i in 0..n {
                mixed.row_mut(i)[head * dh..(head + 1) * dh].copy_from_slice(out.row(i));
            }
        }
        let o = matmul(&mixed, &lw.wo, counter)?;
        let resid_in = opts.probes.hidden.then(|| h.clone());
        for (hv, ov) in h.data_mut().iter_mut().zip(o.data()) {
            *hv += ov;
        }
        let x = h;
        h = ffn_block(&x, &modality, lw, &plan.layers[l], plan, l, counter)?;

        let prune_here = plan.prune.filter(|p| p.after_layer == l);
        let contributions = if opts.probes.attention || prune_here.is_some() {
            let mut c = Vec::with_capacity(n);
            for j in 0..n {
                let a: Vec<f32> = last_rows.iter().map(|r| r[j]).collect();
                c.push(contribution_from_value(&a, v.row(j), &lw.wo, n_heads)?);
            }
            Some(c)
        } else {
            None
        };

        cache_layers.push(LayerCache {
            keys: k,
            values: v,
            positions: positions.clone(),
            modality: modality.clone(),
        });

        if opts.probes.hidden || opts.probes.attention {
            probes.push(LayerProbe {
                layer: l,
                positions: positions.clone(),
                modality: modality.clone(),
                resid_in,
                attn_in: opts.probes.hidden.then(|| xn.clone()),
                ffn_in: opts.probes.hidden.then(|| x.clone()),
                ffn_out: opts.probes.hidden.then(|| h.clone()),
                attn_rows: opts.probes.attention.then(|| last_rows.clone()),
                contributions: if opts.probes.attention {
                    contributions.clone()
                } else {
                    None
                },
            });
        }

        if let Some(pp) = prune_here {
            let contributions = contributions.expect("computed for prune layers");
            let records: Vec<ContributionRecord> = (0..n)
                .map(|j| ContributionRecord {
                    layer: l,
                    token_index: positions[j],
                    modality: modality[j],
                    c_value: contributions[j],
                    per_head_attn: last_rows.iter().map(|r| r[j]).collect(),
                })
                .collect();
            let keep = match opts.keep_override {
                Some(k) => k.clone(),
                None => {
                    let refs: Vec<TokenRef> = positions
                        .iter()
                        .zip(&modality)
                        .map(|(&index, &modality)| TokenRef { index, modality })
                        .collect();
                    match pp.policy {
                        PrunePolicy::Contribution => rank_by_contribution(&records, pp.keep_ratio)?,
                        PrunePolicy::Attention => {
                            rank_by_attention(&last_rows, &refs, pp.keep_ratio)?
                        }
                        PrunePolicy::Uniform => uniform_stride(&refs, pp.keep_ratio)?,
                    }
                }
            };
            if !keep.contains(positions[n - 1]) {
                return Err(CapaError::InvalidArgument(
                    "pruning would evict the query token".into(),
                ));
            }
            let rows: Vec<usize> = (0..n).filter(|&j| keep.contains(positions[j])).collect();
            h = h.select_rows(&rows);
            positions = rows.iter().map(|&j| positions[j]).collect();
            modality = rows.iter().map(|&j| modality[j]).collect();
            prune_event = Some(PruneEvent {
                after_layer: l,
                keep,
                records,
            });
        }
    }

    let hn = norm_rows(&h, &w.final_norm);
    let logits = matmul(&hn, &w.unembed, &mut OpCounter::new())?;
    Ok(ForwardTrace {
        logits,
        positions,
        modality,
        layers: probes,
        prune: prune_event,
        cache: KvCache {
            layers: cache_layers,
            next_position: tokens.next_position(),
        },
    })
}

/// Appends one text token to `cache` and returns next-token logits.
pub fn decode_step(
    cache: &mut KvCache,
    token: u32,
    w: &ModelWeights,
    plan: &LayerExecPlan,
    probes: ProbeRequest,
    counter: &mut OpCounter,
) -> Result<StepOutput> {
    if cache.n_layers() != plan.layers.len() || cache.n_layers() != w.layers.len() {
        return Err(CapaError::Config(format!(
            "cache has {} layers, plan {}, model {}",
            cache.n_layers(),
            plan.layers.len(),
            w.layers.len()
        )));
    }
    check_model(cache.next_position + 1, w, plan)?;
    let cfg = &w.config;
    let (n_heads, dh) = (cfg.n_heads, cfg.d_head());
    let inv_sqrt = 1.0 / (dh as f32).sqrt();
    let pos = cache.next_position;
    let modality = [Modality::Text];

    let mut h = Tensor2D::from_vec(1, cfg.d_model, embed_token(w, token, pos)?)?;
    let mut attn_rows = Vec::with_capacity(cfg.n_layers);
    let mut contributions = Vec::new();
    for (l, lw) in w.layers.iter().enumerate() {
        let xn = norm_rows(&h, &lw.attn_norm);
        let q = matmul(&xn, &lw.wq, counter)?;
        let k = matmul(&xn, &lw.wk, counter)?;
        let v = matmul(&xn, &lw.wv, counter)?;
        let lc = &mut cache.layers[l];
        lc.push(k.row(0), v.row(0), pos, Modality::Text)?;
        let mut mixed = vec![0.0f32; cfg.d_model];
        let mut rows = Vec::with_capacity(n_heads);
        for head in 0..n_heads {
            let qh = q.col_slice(head * dh, dh);
            let kh = lc.keys.col_slice(head * dh, dh);
            let vh = lc.values.col_slice(head * dh, dh);
            let mut scores = matmul(&qh, &kh.transpose(), counter)?;
            scores.scale(inv_sqrt);
            let p = softmax(scores.row(0))?;
            let out = vecmat(&p, &vh, counter)?;
            mixed[head * dh..(head + 1) * dh].copy_from_slice(&out);
            rows.push(p);
        }
        if probes.attention {
            let mut c = Vec::with_capacity(lc.len());
            for j in 0..lc.len() {
                let a: Vec<f32> = rows.iter().map(|r| r[j]).collect();
                c.push(contribution_from_value(
                    &a,
                    lc.values.row(j),
                    &lw.wo,
                    n_heads,
                )?);
            }
            contributions.push(c);
        }
        attn_rows.push(rows);
        let o = vecmat(&mixed, &lw.wo, counter)?;
        for (hv, ov) in h.data_mut().iter_mut().zip(&o) {
            *hv += ov;
        }
        h = ffn_block(&h, &modality, lw, &plan.layers[l], plan, l, counter)?;
    }
    cache.next_position += 1;
    let hn = rms_norm(h.row(0), &w.final_norm, NORM_EPS);
    let logits = vecmat(&hn, &w.unembed, &mut OpCounter::new())?;
    Ok(StepOutput {
        position: pos,
        logits,
        attn_rows,
        contributions,
    })
}

/// Index of the largest logit; ties go to the smaller index.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// `step_logits[t]` produced `tokens[t]`.
    pub step_logits: Vec<Vec<f32>>,
    pub prune: Option<PruneEvent>,
}

/// Greedy decoding of `steps` tokens after prefilling `prompt`.
pub fn generate(
    prompt: &TokenStream,
    w: &ModelWeights,
    plan: &LayerExecPlan,
    steps: usize,
    counter: &mut OpCounter,
) -> Result<Generation> {
    run_steps(prompt, w, plan, steps, None, counter)
}

/// Like [`generate`] but feeds `forced` instead of the model's own choices;
/// returns one logit vector per entry of `forced` (the one preceding it).
pub fn teacher_forced(
    prompt: &TokenStream,
    w: &ModelWeights,
    plan: &LayerExecPlan,
    forced: &[u32],
    counter: &mut OpCounter,
) -> Result<Generation> {
    run_steps(prompt, w, plan, forced.len(), Some(forced), counter)
}

fn run_steps(
    prompt: &TokenStream,
    w: &ModelWeights,
    plan: &LayerExecPlan,
    steps: usize,
    forced: Option<&[u32]>,
    counter: &mut OpCounter,
) -> Result<Generation> {
    let trace = forward(prompt, w, plan, ForwardOptions::default(), counter)?;
    let mut cache = trace.cache;
    let mut logits = trace.logits.row(trace.logits.rows() - 1).to_vec();
    let mut tokens = Vec::with_capacity(steps);
    let mut step_logits = Vec::with_capacity(steps);
    for t in 0..steps {
        let next = forced.map_or_else(|| argmax(&logits), |f| f[t]);
        tokens.push(next);
        step_logits.push(std::mem::take(&mut logits));
        if t + 1 < steps {
            logits = decode_step(&mut cache, next, w, plan, ProbeRequest::NONE, counter)?.logits;
        }
    }
    Ok(Generation {
        tokens,
        step_logits,
        prune: trace.prune,
    })
}
