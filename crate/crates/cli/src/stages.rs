//! Stage bodies shared by the individual subcommands and `pipeline`. Each
//! returns the bytes of its output files so both routes write identical
//! artifacts.

use std::str::FromStr;

use capa_core::contribution::contribution_trajectory;
use capa_core::divergence::{trace_divergence, DivergenceTrace};
use capa_core::flops::{pipeline_report, SeqShape};
use capa_core::hadamard::{calibrate_layers, AlphaVector};
use capa_core::io::{NamedTensor, TensorFile};
use capa_core::model::{
    forward, generate, synthetic_streams, FfnMode, ForwardOptions, HadamardScope, LayerExecPlan,
    ModelConfig, PrunePoint, PrunePolicy, TokenStream,
};
use capa_core::profile::{
    build_profile, select_layers, LayerSelection, ProtectedLayers, SelectionBasis,
};
use capa_core::sinks::{sink_report, CSplit};
use capa_core::tensor::OpCounter;
use capa_core::ProbeRequest;
use rayon::prelude::*;

use crate::args::{Basis, Mode, Policy, Scope};
use crate::artifacts::{report_header, streams_to_file, LoadedModel};
use crate::error::{CliError, CliResult, StageExt};
use crate::reports;

/// A named output file.
pub type Output = (String, Vec<u8>);

pub fn scope(s: Scope) -> HadamardScope {
    match s {
        Scope::Visual => HadamardScope::VisualOnly,
        Scope::All => HadamardScope::AllTokens,
    }
}

pub fn policy(p: Policy) -> PrunePolicy {
    match p {
        Policy::Contribution => PrunePolicy::Contribution,
        Policy::Attention => PrunePolicy::Attention,
        Policy::Uniform => PrunePolicy::Uniform,
    }
}

pub fn basis(b: Basis) -> SelectionBasis {
    match b {
        Basis::Visual => SelectionBasis::Visual,
        Basis::Text => SelectionBasis::Text,
        Basis::Joint => SelectionBasis::Joint,
    }
}

fn basis_name(b: Basis) -> &'static str {
    match b {
        Basis::Visual => "visual",
        Basis::Text => "text",
        Basis::Joint => "joint",
    }
}

/// Everything needed to build an execution plan.
#[derive(Debug, Clone)]
pub struct PlanInput {
    pub mode: Mode,
    pub policy: Policy,
    pub keep_ratio: Option<f32>,
    pub prune_layer: usize,
    pub scope: Scope,
    pub skip_layers: Vec<usize>,
    pub alphas: Option<Vec<AlphaVector>>,
}

impl PlanInput {
    pub fn vanilla() -> Self {
        Self {
            mode: Mode::Vanilla,
            policy: Policy::Contribution,
            keep_ratio: None,
            prune_layer: 0,
            scope: Scope::Visual,
            skip_layers: Vec::new(),
            alphas: None,
        }
    }

    pub fn build(&self, cfg: &ModelConfig) -> CliResult<LayerExecPlan> {
        let mut plan = LayerExecPlan::dense(cfg.n_layers);
        if self.mode == Mode::Vanilla {
            if self.keep_ratio.is_some() || self.alphas.is_some() || !self.skip_layers.is_empty() {
                return Err(CliError::Config(
                    "vanilla mode takes no pruning or approximation flags".into(),
                ));
            }
            return Ok(plan);
        }
        if let Some(alphas) = &self.alphas {
            if let Some(a) = alphas.iter().find(|a| self.skip_layers.contains(&a.layer)) {
                return Err(CliError::Config(format!(
                    "layer {} is both skipped and calibrated",
                    a.layer
                )));
            }
            plan = plan.with_alphas(alphas.clone(), scope(self.scope));
        }
        if let Some(&l) = self.skip_layers.iter().find(|&&l| l >= cfg.n_layers) {
            return Err(CliError::Config(format!("skip layer {l} out of range")));
        }
        plan = plan.with_mode(&self.skip_layers, FfnMode::Skip, scope(self.scope));
        if let Some(r) = self.keep_ratio {
            plan = plan.with_prune(PrunePoint {
                after_layer: self.prune_layer,
                keep_ratio: r,
                policy: policy(self.policy),
            });
        }
        plan.validate(cfg.n_layers, cfg.d_model)
            .map_err(CliError::config)?;
        Ok(plan)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PromptSpec {
    pub seed: u64,
    pub n_img: usize,
    pub n_txt: usize,
    pub steps: usize,
}

impl PromptSpec {
    pub fn stream(&self, cfg: &ModelConfig) -> CliResult<TokenStream> {
        if self.steps == 0 {
            return Err(CliError::Config("steps must be at least 1".into()));
        }
        let mut s = synthetic_streams(1, self.seed, self.n_img, self.n_txt, cfg.vocab_size)
            .map_err(CliError::config)?;
        Ok(s.remove(0))
    }

    pub fn seq(&self) -> SeqShape {
        SeqShape {
            n_img: self.n_img,
            n_txt: self.n_txt,
        }
    }
}

pub fn gen_calib(
    samples: usize,
    seed: u64,
    n_img: usize,
    n_txt: usize,
    vocab: usize,
) -> CliResult<Vec<u8>> {
    let streams =
        synthetic_streams(samples, seed, n_img, n_txt, vocab).map_err(CliError::config)?;
    streams_to_file(&streams)?.to_bytes().stage("gen-calib")
}

pub fn profile(m: &LoadedModel, calib: &[TokenStream]) -> CliResult<String> {
    let p = build_profile(&m.weights, calib).stage("profile-ffn")?;
    Ok(reports::profile_csv(&m.header(), &p))
}

pub fn select(
    profile_text: &str,
    eta: f64,
    protect: &str,
    b: Basis,
) -> CliResult<(LayerSelection, String)> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(CliError::Config(format!("eta {eta} outside (0, 1)")));
    }
    let protected = ProtectedLayers::from_str(protect).map_err(CliError::config)?;
    let profile = reports::parse_profile_csv(profile_text)?;
    let header = reports::header_of(profile_text).unwrap_or("#").to_string();
    let set = protected.resolve(profile.layers.len());
    let sel = select_layers(&profile, eta, &set, basis(b));
    let text = reports::selection_csv(&header, &sel, protect, basis_name(b));
    Ok((sel, text))
}

pub fn calibrate(
    m: &LoadedModel,
    calib: &[TokenStream],
    selection_text: &str,
    s: Scope,
) -> CliResult<(Vec<AlphaVector>, Vec<u8>)> {
    let selected = reports::parse_selection_csv(selection_text)?;
    if let Some(&l) = selected.iter().find(|&&l| l >= m.weights.config.n_layers) {
        return Err(CliError::Config(format!("selected layer {l} out of range")));
    }
    let sel = LayerSelection {
        selected,
        eta: f64::NAN,
        protected: Vec::new(),
    };
    let alphas = calibrate_layers(&m.weights, &sel, calib, scope(s)).stage("calibrate")?;
    let bytes = crate::artifacts::alphas_bytes(&alphas)?;
    Ok((alphas, bytes))
}

fn cost_outputs(
    header: &str,
    cfg: &ModelConfig,
    plan: &LayerExecPlan,
    seq: SeqShape,
    extra: &str,
) -> Vec<Output> {
    let report = pipeline_report(cfg, plan, seq);
    let baseline = pipeline_report(cfg, &LayerExecPlan::dense(cfg.n_layers), seq);
    let mut summary = reports::cost_summary(header, &report, Some(&baseline));
    summary.push_str(extra);
    vec![
        (
            "cost.csv".into(),
            reports::cost_csv(header, &report).into_bytes(),
        ),
        ("cost_summary.txt".into(), summary.into_bytes()),
    ]
}

/// Greedy generation plus the cost report of its prefill.
pub fn run(m: &LoadedModel, plan: &LayerExecPlan, prompt: &PromptSpec) -> CliResult<Vec<Output>> {
    let w = &m.weights;
    let stream = prompt.stream(&w.config)?;
    let header = m.header();
    let mut counter = OpCounter::new();
    forward(&stream, w, plan, ForwardOptions::default(), &mut counter).stage("run")?;
    let gen = generate(&stream, w, plan, prompt.steps, &mut OpCounter::new()).stage("run")?;

    let mut logits = TensorFile::new();
    let flat: Vec<f32> = gen.step_logits.concat();
    logits.push(
        NamedTensor::new("step_logits", vec![prompt.steps, w.config.vocab_size], flat)
            .stage("run")?,
    );
    let mut out = vec![
        ("logits.capt".to_string(), logits.to_bytes().stage("run")?),
        (
            "tokens.csv".to_string(),
            reports::tokens_csv(&header, &gen.tokens).into_bytes(),
        ),
    ];
    if let Some(ev) = &gen.prune {
        out.push((
            "contributions.csv".into(),
            reports::contributions_csv(&header, &ev.records).into_bytes(),
        ));
    }
    let extra = format!("prefill_mul_adds_instrumented = {}\n", counter.mul_adds());
    out.extend(cost_outputs(&header, &w.config, plan, prompt.seq(), &extra));
    Ok(out)
}

pub fn flops(cfg: &ModelConfig, header: &str, plan: &LayerExecPlan, seq: SeqShape) -> Vec<Output> {
    cost_outputs(header, cfg, plan, seq, "")
}

/// One trace per policy, each pruning the same base plan.
pub fn diverge(
    m: &LoadedModel,
    base: &PlanInput,
    policies: &[Policy],
    keep_ratio: f32,
    prompt: &PromptSpec,
) -> CliResult<String> {
    if policies.is_empty() {
        return Err(CliError::Config("no policies given".into()));
    }
    let w = &m.weights;
    let stream = prompt.stream(&w.config)?;
    let vanilla = LayerExecPlan::dense(w.config.n_layers);
    let plans = policies
        .iter()
        .map(|&p| {
            PlanInput {
                mode: Mode::Capa,
                policy: p,
                keep_ratio: Some(keep_ratio),
                ..base.clone()
            }
            .build(&w.config)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let traces: Vec<DivergenceTrace> = policies
        .par_iter()
        .zip(&plans)
        .map(|(&p, plan)| {
            trace_divergence(w, &vanilla, plan, &stream, prompt.steps, policy(p).as_str())
        })
        .collect::<capa_core::Result<_>>()
        .stage("diverge")?;
    Ok(reports::divergence_csv(&m.header(), &traces))
}

pub fn sinks(
    m: &LoadedModel,
    layer: Option<usize>,
    tau: f64,
    c_split: &str,
    prompt: &PromptSpec,
) -> CliResult<String> {
    if !(tau > 0.0) {
        return Err(CliError::Config(format!("tau {tau} must be positive")));
    }
    let split = CSplit::from_str(c_split).map_err(CliError::config)?;
    let w = &m.weights;
    let n_layers = w.config.n_layers;
    let layers: Vec<usize> = match layer {
        Some(l) if l >= n_layers => {
            return Err(CliError::Config(format!("layer {l} out of range")));
        }
        Some(l) => vec![l],
        None => (0..n_layers).collect(),
    };
    let stream = prompt.stream(&w.config)?;
    let trace = forward(
        &stream,
        w,
        &LayerExecPlan::dense(n_layers),
        ForwardOptions::probed(ProbeRequest::ALL),
        &mut OpCounter::new(),
    )
    .stage("sink-report")?;
    let mut records = Vec::new();
    for l in layers {
        records.extend(sink_report(&trace, l, tau, split).stage("sink-report")?.1);
    }
    Ok(reports::sinks_csv(&m.header(), &records))
}

pub fn trajectory(m: &LoadedModel, plan: &LayerExecPlan, prompt: &PromptSpec) -> CliResult<String> {
    let stream = prompt.stream(&m.weights.config)?;
    let rows = contribution_trajectory(&stream, &m.weights, plan, prompt.steps)
        .stage("contribution-trace")?;
    Ok(reports::trajectory_csv(&m.header(), &rows))
}

/// Header for analytical reports that have no weights behind them.
pub fn config_header(cfg: &ModelConfig) -> String {
    report_header(cfg.seed, &cfg.to_text())
}

/// Parses `2-5,22-29,31`.
pub fn parse_layer_list(s: &str) -> CliResult<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || CliError::Config(format!("bad layer list {s:?}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (
                    a.trim().parse().map_err(|_| bad())?,
                    b.trim().parse().map_err(|_| bad())?,
                );
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}
