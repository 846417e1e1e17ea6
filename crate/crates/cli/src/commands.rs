use std::fs;
use std::path::{Path, PathBuf};

use capa_core::io::TensorFile;
use capa_core::model::{init_weights, FfnMode, LayerExecPlan, ModelConfig, PrunePoint};

use crate::args::*;
use crate::artifacts::{
    load_alphas, load_model, load_model_files, load_streams, print_hashes, save_model,
    streams_from_file, write_file, CONFIG_FILE,
};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::stages::{self, Output, PlanInput, PromptSpec};

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::GenCalib(a) => gen_calib(a),
        Command::ProfileFfn(a) => profile_ffn(a),
        Command::SelectLayers(a) => select_layers(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Run(a) => run_plan(a),
        Command::Flops(a) => flops(a),
        Command::Diverge(a) => diverge(a),
        Command::SinkReport(a) => sink_report(a),
        Command::ContributionTrace(a) => contribution_trace(a),
        Command::Pipeline(a) => pipeline(&a.manifest).map(|_| ()),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write_outputs(dir: &Path, outputs: Vec<Output>, stage: &'static str) -> CliResult<Vec<PathBuf>> {
    outputs
        .into_iter()
        .map(|(name, bytes)| write_file(&dir.join(name), &bytes, stage))
        .collect()
}

fn prompt_spec(p: &PromptArgs) -> PromptSpec {
    PromptSpec {
        seed: p.prompt_seed,
        n_img: p.n_img,
        n_txt: p.n_txt,
        steps: p.steps,
    }
}

fn plan_input(mode: Mode, p: &PlanArgs) -> CliResult<PlanInput> {
    Ok(PlanInput {
        mode,
        policy: p.policy,
        keep_ratio: p.keep_ratio,
        prune_layer: p.prune_layer,
        scope: p.scope,
        skip_layers: p.skip_layers.clone(),
        alphas: p.alphas.as_deref().map(load_alphas).transpose()?,
    })
}

fn gen(a: GenArgs) -> CliResult<()> {
    let cfg = ModelConfig {
        n_layers: a.layers,
        d_model: a.d_model,
        d_ff: a.d_ff,
        n_heads: a.heads,
        vocab_size: a.vocab,
        max_seq: a.max_seq,
        seed: a.seed,
    };
    cfg.validate().map_err(CliError::config)?;
    let w = init_weights(&cfg).map_err(CliError::config)?;
    print_hashes(&save_model(&a.out, &w)?)
}

fn gen_calib(a: GenCalibArgs) -> CliResult<()> {
    let bytes = stages::gen_calib(a.samples, a.seed, a.n_img, a.n_txt, a.vocab)?;
    print_hashes(&[write_file(&a.out, &bytes, "gen-calib")?])
}

fn profile_ffn(a: ProfileArgs) -> CliResult<()> {
    let m = load_model(&a.model)?;
    let calib = load_streams(&a.calib)?;
    let text = stages::profile(&m, &calib)?;
    print_hashes(&[write_file(&a.out, text.as_bytes(), "profile-ffn")?])
}

fn select_layers(a: SelectArgs) -> CliResult<()> {
    let (_, text) = stages::select(&read_text(&a.profile)?, a.eta, &a.protect, a.basis)?;
    print_hashes(&[write_file(&a.out, text.as_bytes(), "select-layers")?])
}

fn calibrate(a: CalibrateArgs) -> CliResult<()> {
    let m = load_model(&a.model)?;
    let calib = load_streams(&a.calib)?;
    let (_, bytes) = stages::calibrate(&m, &calib, &read_text(&a.selection)?, a.scope)?;
    print_hashes(&[write_file(&a.out, &bytes, "calibrate")?])
}

fn run_plan(a: RunArgs) -> CliResult<()> {
    let m = load_model(&a.model)?;
    let plan = plan_input(a.mode, &a.plan)?.build(&m.weights.config)?;
    let outputs = stages::run(&m, &plan, &prompt_spec(&a.prompt))?;
    print_hashes(&write_outputs(&a.out, outputs, "run")?)
}

fn flops(a: FlopsArgs) -> CliResult<()> {
    let (cfg, header, default_seq) = match (a.paper_config, &a.model) {
        (Some(PaperConfig::Llava7b), _) => {
            let cfg = ModelConfig::llava7b();
            (cfg, stages::config_header(&cfg), (576, 64))
        }
        (None, Some(dir)) => {
            let text = read_text(&dir.join(CONFIG_FILE))?;
            let cfg = ModelConfig::from_text(&text).map_err(CliError::config)?;
            (
                cfg,
                crate::artifacts::report_header(cfg.seed, &text),
                (48, 16),
            )
        }
        (None, None) => return Err(CliError::Config("need --model or --paper-config".into())),
    };
    let approx = stages::parse_layer_list(&a.approx_layers)?;
    if let Some(&l) = approx.iter().find(|&&l| l >= cfg.n_layers) {
        return Err(CliError::Config(format!("layer {l} out of range")));
    }
    let mode = match a.approx_mode {
        ApproxMode::Hadamard => FfnMode::Hadamard,
        ApproxMode::Skip => FfnMode::Skip,
    };
    let mut plan =
        LayerExecPlan::dense(cfg.n_layers).with_mode(&approx, mode, stages::scope(a.scope));
    if let Some(r) = a.keep_ratio {
        capa_core::contribution::check_keep_ratio(r).map_err(CliError::config)?;
        if a.prune_layer >= cfg.n_layers {
            return Err(CliError::Config(format!(
                "prune layer {} out of range",
                a.prune_layer
            )));
        }
        plan = plan.with_prune(PrunePoint {
            after_layer: a.prune_layer,
            keep_ratio: r,
            policy: capa_core::model::PrunePolicy::Contribution,
        });
    }
    let seq = capa_core::flops::SeqShape {
        n_img: a.n_img.unwrap_or(default_seq.0),
        n_txt: a.n_txt.unwrap_or(default_seq.1),
    };
    let outputs = stages::flops(&cfg, &header, &plan, seq);
    let summary = String::from_utf8_lossy(&outputs[1].1).into_owned();
    let paths = write_outputs(&a.out, outputs, "flops")?;
    print!("{summary}");
    print_hashes(&paths)
}

fn diverge(a: DivergeArgs) -> CliResult<()> {
    let m = load_model(&a.model)?;
    let base = PlanInput {
        mode: Mode::Capa,
        prune_layer: a.prune_layer,
        scope: a.scope,
        alphas: a.alphas.as_deref().map(load_alphas).transpose()?,
        ..PlanInput::vanilla()
    };
    let text = stages::diverge(
        &m,
        &base,
        &a.policies,
        a.keep_ratio,
        &prompt_spec(&a.prompt),
    )?;
    print_hashes(&[write_file(&a.out, text.as_bytes(), "diverge")?])
}

fn sink_report(a: SinkArgs) -> CliResult<()> {
    let m = load_model(&a.model)?;
    let text = stages::sinks(&m, a.layer, a.tau, &a.c_split, &prompt_spec(&a.prompt))?;
    print_hashes(&[write_file(&a.out, text.as_bytes(), "sink-report")?])
}

fn contribution_trace(a: TraceArgs) -> CliResult<()> {
    let m = load_model(&a.model)?;
    let mode = if a.plan.keep_ratio.is_none()
        && a.plan.alphas.is_none()
        && a.plan.skip_layers.is_empty()
    {
        Mode::Vanilla
    } else {
        Mode::Capa
    };
    let plan = plan_input(mode, &a.plan)?.build(&m.weights.config)?;
    let text = stages::trajectory(&m, &plan, &prompt_spec(&a.prompt))?;
    print_hashes(&[write_file(&a.out, text.as_bytes(), "contribution-trace")?])
}

/// Runs every stage of `manifest` and returns the files written, in order.
pub fn pipeline(manifest: &Path) -> CliResult<Vec<PathBuf>> {
    let mf = RunManifest::load(manifest)?;
    let out = &mf.output;
    let m = load_model_files(&mf.config, &mf.weights)?;
    let cfg = m.weights.config;
    let mut written = Vec::new();

    let calib = match &mf.calib {
        Some(p) => load_streams(p)?,
        None => {
            let c = &mf.calibration;
            let bytes =
                stages::gen_calib(c.samples, mf.seeds.calib, c.n_img, c.n_txt, cfg.vocab_size)?;
            written.push(write_file(&out.join("calib.capt"), &bytes, "gen-calib")?);
            streams_from_file(&TensorFile::from_bytes(&bytes).map_err(CliError::config)?)?
        }
    };

    let profile = stages::profile(&m, &calib)?;
    written.push(write_file(
        &out.join("profile.csv"),
        profile.as_bytes(),
        "profile-ffn",
    )?);
    let p = &mf.plan;
    let (_, selection) = stages::select(&profile, p.eta, &p.protect, p.basis)?;
    written.push(write_file(
        &out.join("selection.csv"),
        selection.as_bytes(),
        "select-layers",
    )?);

    let alphas = match (p.mode, &p.alphas) {
        (Mode::Vanilla, _) => None,
        (Mode::Capa, Some(path)) => Some(load_alphas(path)?),
        (Mode::Capa, None) => {
            let (alphas, bytes) = stages::calibrate(&m, &calib, &selection, p.scope)?;
            written.push(write_file(&out.join("alphas.capt"), &bytes, "calibrate")?);
            Some(alphas)
        }
    };

    let prompt = PromptSpec {
        seed: mf.seeds.prompt,
        n_img: mf.prompt.n_img,
        n_txt: mf.prompt.n_txt,
        steps: mf.prompt.steps,
    };
    let capa_base = PlanInput {
        mode: Mode::Capa,
        policy: p.policy,
        keep_ratio: None,
        prune_layer: p.prune_layer,
        scope: p.scope,
        skip_layers: Vec::new(),
        alphas: alphas.clone(),
    };
    let plan = match p.mode {
        Mode::Vanilla => PlanInput::vanilla(),
        Mode::Capa => PlanInput {
            keep_ratio: Some(p.keep_ratio),
            ..capa_base.clone()
        },
    }
    .build(&cfg)?;
    written.extend(write_outputs(
        &out.join("run"),
        stages::run(&m, &plan, &prompt)?,
        "run",
    )?);

    let r = &mf.reports;
    if r.divergence {
        let text = stages::diverge(
            &m,
            &capa_base,
            &r.divergence_policies,
            p.keep_ratio,
            &prompt,
        )?;
        written.push(write_file(
            &out.join("divergence.csv"),
            text.as_bytes(),
            "diverge",
        )?);
    }
    if r.sinks {
        let text = stages::sinks(&m, r.sink_layer, r.tau, &r.c_split, &prompt)?;
        written.push(write_file(
            &out.join("sinks.csv"),
            text.as_bytes(),
            "sink-report",
        )?);
    }
    if r.contribution_trace {
        let text = stages::trajectory(&m, &plan, &prompt)?;
        written.push(write_file(
            &out.join("contribution_trace.csv"),
            text.as_bytes(),
            "contribution-trace",
        )?);
    }
    print_hashes(&written)?;
    Ok(written)
}
