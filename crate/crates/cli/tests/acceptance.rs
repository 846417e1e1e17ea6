//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use capa_cli::artifacts::{save_model, sha256_file};
use capa_core::contribution::attention_contribution;
use capa_core::divergence::hellinger;
use capa_core::flops::{
    attention_speedup, ffn_reduction_factor, linear_speedup, pipeline_report, sequence_lengths,
    SeqShape,
};
use capa_core::hadamard::{
    calibrate_layers, reconstruction_errors, solve_alpha, AlphaVector, CalibMoments, ALPHA_EPS,
};
use capa_core::model::{
    forward, generate, init_weights, synthetic_streams, FfnMode, ForwardOptions, HadamardScope,
    LayerExecPlan, ModelConfig, ModelWeights, PrunePoint, PrunePolicy,
};
use capa_core::profile::{
    build_profile, select_layers, LayerSelection, ProtectedLayers, SelectionBasis,
};
use capa_core::tensor::OpCounter;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn toy(seed: u64) -> ModelWeights {
    init_weights(&ModelConfig {
        seed,
        ..ModelConfig::toy()
    })
    .unwrap()
}

fn within_time(start: Instant, limit: Duration, detail: String) -> Outcome {
    let t = start.elapsed();
    if t < limit {
        Ok(format!("{detail}; {:.2}s", t.as_secs_f64()))
    } else {
        Err(format!(
            "{detail}; took {:.2}s, limit {}s",
            t.as_secs_f64(),
            limit.as_secs()
        ))
    }
}

fn contribution_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, d) = (4usize, 64usize);
    let dh = d / h;
    let mut worst = 0.0f64;
    let models: Vec<ModelWeights> = (0..20).map(|s| toy(1000 + s)).collect();
    for case in 0..1000u64 {
        let lw = &models[(case / 50) as usize].layers[(case % 8) as usize];
        let x: Vec<f32> = (0..d).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let attn: Vec<f32> = (0..h).map(|_| rng.random_range(0.0f32..1.0)).collect();
        let c = attention_contribution(&attn, &x, lw, h).map_err(|e| e.to_string())? as f64;

        let mut total = vec![0.0f64; d];
        let mut bound = 0.0f64;
        for head in 0..h {
            let mut v = vec![0.0f64; dh];
            for (j, vj) in v.iter_mut().enumerate() {
                for (i, &xi) in x.iter().enumerate() {
                    *vj += xi as f64 * lw.wv.get(i, head * dh + j) as f64;
                }
            }
            let mut u = vec![0.0f64; d];
            for (k, uk) in u.iter_mut().enumerate() {
                for (j, &vj) in v.iter().enumerate() {
                    *uk += vj * lw.wo.get(head * dh + j, k) as f64;
                }
            }
            let a = attn[head] as f64;
            for (t, &uk) in total.iter_mut().zip(&u) {
                *t += a * uk;
            }
            bound += a * u.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        let oracle = total.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = (c - oracle).abs() / oracle.max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        if rel > 1e-5 {
            return Err(format!("case {case}: {c} vs oracle {oracle} (rel {rel:e})"));
        }
        if c > bound * (1.0 + 1e-6) {
            return Err(format!("case {case}: {c} exceeds triangle bound {bound}"));
        }
    }
    within_time(
        start,
        Duration::from_secs(10),
        format!("1000 cases, worst rel {worst:.2e}"),
    )
}

fn sse(x: &[f64], y: &[f64], a: f64) -> f64 {
    x.iter().zip(y).map(|(&x, &y)| (a * x - y).powi(2)).sum()
}

fn ols_optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, d) = (256usize, 64usize);
    let mut worst = 0.0f64;
    for set in 0..100 {
        let slope: Vec<f32> = (0..d).map(|_| rng.random_range(-1.5f32..1.5)).collect();
        let xs: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-3.0f32..3.0)).collect())
            .collect();
        let ys: Vec<Vec<f32>> = xs
            .iter()
            .map(|x| {
                x.iter()
                    .zip(&slope)
                    .map(|(&x, &s)| s * x + rng.random_range(-0.5f32..0.5))
                    .collect()
            })
            .collect();
        let mut m = CalibMoments::new(0, d);
        for (x, y) in xs.iter().zip(&ys) {
            m.accumulate(x, y).map_err(|e| e.to_string())?;
        }
        let alpha = solve_alpha(&m, ALPHA_EPS).map_err(|e| e.to_string())?;
        let dims: BTreeSet<usize> = (0..20).map(|_| rng.random_range(0..d)).collect();
        for k in 0..d {
            let x: Vec<f64> = xs.iter().map(|r| r[k] as f64).collect();
            let y: Vec<f64> = ys.iter().map(|r| r[k] as f64).collect();
            // projection of y onto the unit vector along x
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let proj: f64 = x.iter().zip(&y).map(|(a, b)| a / norm * b).sum();
            let expect = proj / norm;
            let got = alpha.alpha[k] as f64;
            let rel = (got - expect).abs() / expect.abs().max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
            if rel > 1e-6 {
                return Err(format!("set {set} dim {k}: {got} vs {expect}"));
            }
            if dims.contains(&k) {
                let base = sse(&x, &y, got);
                for delta in [-1e-3, 1e-3] {
                    if sse(&x, &y, got + delta) < base {
                        return Err(format!(
                            "set {set} dim {k}: perturbation {delta} lowers error"
                        ));
                    }
                }
            }
        }
    }

    let mut w = toy(9);
    let diag: Vec<f32> = (0..64).map(|k| 0.5 + (k as f32) / 64.0).collect();
    w.plant_diagonal_ffn(4, diag.clone())
        .map_err(|e| e.to_string())?;
    let calib = synthetic_streams(8, 2, 24, 8, 256).unwrap();
    let sel = LayerSelection {
        selected: vec![4],
        eta: 0.96,
        protected: vec![],
    };
    let alphas =
        calibrate_layers(&w, &sel, &calib, HadamardScope::VisualOnly).map_err(|e| e.to_string())?;
    for (k, (a, dk)) in alphas[0].alpha.iter().zip(&diag).enumerate() {
        if (a - dk).abs() > 1e-4 * dk.abs() {
            return Err(format!("planted dim {k}: alpha {a} vs {dk}"));
        }
    }
    let prompt = synthetic_streams(1, 5, 24, 8, 256).unwrap().remove(0);
    let run = |plan: &LayerExecPlan| {
        forward(
            &prompt,
            &w,
            plan,
            ForwardOptions::default(),
            &mut OpCounter::new(),
        )
        .map(|t| t.logits)
    };
    let dense = run(&LayerExecPlan::dense(8)).map_err(|e| e.to_string())?;
    let had = run(&LayerExecPlan::dense(8).with_alphas(alphas, HadamardScope::VisualOnly))
        .map_err(|e| e.to_string())?;
    let diff = dense
        .data()
        .iter()
        .zip(had.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    if diff > 1e-4 {
        return Err(format!("planted logits differ by {diff}"));
    }
    within_time(
        start,
        Duration::from_secs(30),
        format!("100 sets, worst rel {worst:.2e}, planted logit diff {diff:.1e}"),
    )
}

fn identity_plan() -> Outcome {
    let w = toy(42);
    let prompt = synthetic_streams(1, 0, 48, 16, 256).unwrap().remove(0);
    let vanilla = LayerExecPlan::dense(8);
    let identity = LayerExecPlan::dense(8).with_prune(PrunePoint {
        after_layer: 2,
        keep_ratio: 1.0,
        policy: PrunePolicy::Contribution,
    });
    let a =
        generate(&prompt, &w, &vanilla, 32, &mut OpCounter::new()).map_err(|e| e.to_string())?;
    let b =
        generate(&prompt, &w, &identity, 32, &mut OpCounter::new()).map_err(|e| e.to_string())?;
    for (t, (x, y)) in a.step_logits.iter().zip(&b.step_logits).enumerate() {
        let same = x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
        if !same {
            return Err(format!("step {t} logits differ"));
        }
    }
    if a.tokens != b.tokens {
        return Err("token sequences differ".into());
    }
    Ok("32 steps bit-identical".into())
}

fn flops_exactness() -> Outcome {
    let w = toy(42);
    let cfg = w.config;
    let prompt = synthetic_streams(1, 0, 48, 16, 256).unwrap().remove(0);
    let seq = SeqShape {
        n_img: 48,
        n_txt: 16,
    };
    let layers = [2usize, 3, 4];
    let mut combos = 0;
    for mode in [FfnMode::Dense, FfnMode::Hadamard, FfnMode::Skip] {
        for scope in [HadamardScope::VisualOnly, HadamardScope::AllTokens] {
            for prune in [false, true] {
                let mut plan = match mode {
                    FfnMode::Hadamard => LayerExecPlan::dense(8).with_alphas(
                        layers
                            .iter()
                            .map(|&layer| AlphaVector {
                                layer,
                                alpha: vec![0.9; 64],
                                fallback: vec![false; 64],
                            })
                            .collect(),
                        scope,
                    ),
                    m => LayerExecPlan::dense(8).with_mode(&layers, m, scope),
                };
                if prune {
                    plan = plan.with_prune(PrunePoint {
                        after_layer: 1,
                        keep_ratio: 0.25,
                        policy: PrunePolicy::Contribution,
                    });
                }
                let mut counter = OpCounter::new();
                forward(&prompt, &w, &plan, ForwardOptions::default(), &mut counter)
                    .map_err(|e| e.to_string())?;
                let report = pipeline_report(&cfg, &plan, seq).total_flops();
                if report != 2 * counter.mul_adds() {
                    return Err(format!(
                        "{mode:?}/{scope:?}/prune={prune}: report {report} vs 2x{}",
                        counter.mul_adds()
                    ));
                }
                combos += 1;
            }
        }
    }
    let r = ffn_reduction_factor(4096, 11008);
    if r != 66_048 {
        return Err(format!("reduction factor {r}"));
    }
    let (n, np) = sequence_lengths(576, 0, 0.75).map_err(|e| e.to_string())?;
    let (lin, att) = (linear_speedup(n, np), attention_speedup(n, np));
    if lin != 4.0 || att != 16.0 {
        return Err(format!("speedups {lin} / {att}"));
    }
    Ok(format!(
        "{combos} plans exact, R={r}, speedups {lin}x/{att}x"
    ))
}

fn llava_bands() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::llava7b();
    let seq = SeqShape {
        n_img: 576,
        n_txt: 64,
    };
    let dense = pipeline_report(&cfg, &LayerExecPlan::dense(cfg.n_layers), seq);
    let approx: Vec<usize> = (2..=5).chain(22..=29).collect();
    let capa = LayerExecPlan::dense(cfg.n_layers)
        .with_mode(&approx, FfnMode::Hadamard, HadamardScope::AllTokens)
        .with_prune(PrunePoint {
            after_layer: 0,
            keep_ratio: 0.25,
            policy: PrunePolicy::Contribution,
        });
    let reduction = pipeline_report(&cfg, &capa, seq).reduction_vs(&dense);
    let share = dense.ffn_share();
    if !(0.60..=0.70).contains(&share) {
        return Err(format!("ffn share {share:.4} outside [0.60, 0.70]"));
    }
    if !(0.70..=0.85).contains(&reduction) {
        return Err(format!("reduction {reduction:.4} outside [0.70, 0.85]"));
    }
    within_time(
        start,
        Duration::from_secs(1),
        format!("ffn share {share:.4}, reduction {reduction:.4}"),
    )
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let sparse = rng.random_bool(0.2);
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            if sparse && rng.random_bool(0.5) {
                0.0
            } else {
                rng.random_range(0.0..1.0f64).powi(3)
            }
        })
        .collect();
    let s: f64 = raw.iter().sum();
    if s == 0.0 {
        let mut v = vec![0.0; n];
        v[0] = 1.0;
        return v;
    }
    raw.into_iter().map(|v| v / s).collect()
}

fn hellinger_suite() -> Outcome {
    let start = Instant::now();
    let h = |p: &[f64], q: &[f64]| hellinger(p, q).map_err(|e| e.to_string());
    if h(&[0.3, 0.7], &[0.3, 0.7])? != 0.0 {
        return Err("identical pair not zero".into());
    }
    let disjoint = h(&[1.0, 0.0], &[0.0, 1.0])?;
    if (disjoint - 1.0).abs() > 1e-12 {
        return Err(format!("disjoint pair gave {disjoint}"));
    }
    let half = h(&[0.5, 0.5], &[1.0, 0.0])?;
    if (half - 0.5412).abs() > 5e-5 {
        return Err(format!("(0.5,0.5) vs (1,0) gave {half}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..10_000 {
        let p = random_distribution(&mut rng, 256);
        let q = random_distribution(&mut rng, 256);
        let r = random_distribution(&mut rng, 256);
        let (pq, qp) = (h(&p, &q)?, h(&q, &p)?);
        if pq != qp {
            return Err(format!("pair {i}: asymmetric {pq} vs {qp}"));
        }
        if !(-1e-9..=1.0 + 1e-9).contains(&pq) {
            return Err(format!("pair {i}: {pq} out of range"));
        }
        if h(&p, &p)? > 1e-9 {
            return Err(format!("pair {i}: H(p, p) nonzero"));
        }
        if p != q && pq <= 0.0 {
            return Err(format!("pair {i}: distinct distributions at distance 0"));
        }
        let (pr, qr) = (h(&p, &r)?, h(&q, &r)?);
        if pr > pq + qr + 1e-9 {
            return Err(format!("pair {i}: triangle violated {pr} > {pq} + {qr}"));
        }
    }
    within_time(
        start,
        Duration::from_secs(10),
        format!("10000 pairs, examples ok ({half:.4})"),
    )
}

fn hadamard_beats_skip() -> Outcome {
    let mut checked = 0;
    for seed in 0..10u64 {
        let w = toy(seed);
        let calib = synthetic_streams(8, 100 + seed, 48, 16, 256).unwrap();
        let profile = build_profile(&w, &calib).map_err(|e| e.to_string())?;
        let sel = select_layers(
            &profile,
            0.96,
            &ProtectedLayers::default().resolve(8),
            SelectionBasis::Visual,
        );
        if sel.selected.is_empty() {
            return Err(format!("seed {seed}: nothing selected"));
        }
        let alphas = calibrate_layers(&w, &sel, &calib, HadamardScope::VisualOnly)
            .map_err(|e| e.to_string())?;
        let errs = reconstruction_errors(&w, &alphas, &calib, HadamardScope::VisualOnly)
            .map_err(|e| e.to_string())?;
        for e in &errs {
            if e.hadamard_mse() > e.skip_mse() + 1e-9 {
                return Err(format!(
                    "seed {seed} layer {}: hadamard {} > skip {}",
                    e.layer,
                    e.hadamard_mse(),
                    e.skip_mse()
                ));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} selected layers over 10 seeds"))
}

fn profiler_selection() -> Outcome {
    let protected = ProtectedLayers::default().resolve(8);
    let mut w = toy(11);
    w.zero_ffn();
    let calib = synthetic_streams(4, 3, 24, 8, 256).unwrap();
    let profile = build_profile(&w, &calib).map_err(|e| e.to_string())?;
    for l in &profile.layers {
        if l.mean_sim_visual != Some(1.0) || l.mean_sim_text != Some(1.0) {
            return Err(format!("zero-FFN layer {} not all ones", l.layer));
        }
    }
    let sel = select_layers(&profile, 0.96, &protected, SelectionBasis::Visual);
    let expect: Vec<usize> = (0..8).filter(|l| !protected.contains(l)).collect();
    if sel.selected != expect {
        return Err(format!("zero-FFN selection {:?}", sel.selected));
    }

    let w = toy(42);
    let calib = synthetic_streams(8, 7, 48, 16, 256).unwrap();
    let profile = build_profile(&w, &calib).map_err(|e| e.to_string())?;
    let etas: Vec<f64> = (0..10).map(|i| 0.95 + 0.004 * i as f64).collect();
    let sets: Vec<BTreeSet<usize>> = etas
        .iter()
        .map(|&eta| {
            select_layers(&profile, eta, &protected, SelectionBasis::Visual)
                .selected
                .into_iter()
                .collect()
        })
        .collect();
    for (i, pair) in sets.windows(2).enumerate() {
        if !pair[1].is_subset(&pair[0]) {
            return Err(format!(
                "selection grows between eta {} and {}",
                etas[i],
                etas[i + 1]
            ));
        }
    }
    let sizes: Vec<usize> = sets.iter().map(BTreeSet::len).collect();
    Ok(format!("zero-FFN all ones, sweep sizes {sizes:?}"))
}

fn tree_hashes(root: &Path) -> Vec<(PathBuf, String)> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(PathBuf, String)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_path_buf();
                out.push((rel, sha256_file(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

fn determinism_audit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    save_model(&dir.path().join("model"), &toy(42)).map_err(|e| e.to_string())?;
    let manifest = dir.path().join("run.toml");
    std::fs::write(
        &manifest,
        "config = \"model/config.txt\"\nweights = \"model/weights.capt\"\noutput = \"out\"\n\n\
         [calibration]\nsamples = 16\n",
    )
    .map_err(|e| e.to_string())?;
    let out = dir.path().join("out");
    let mut trees = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(&out);
        let status = Command::new(env!("CARGO_BIN_EXE_capa"))
            .arg("pipeline")
            .arg("--manifest")
            .arg(&manifest)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!(
                "pipeline failed: {}",
                String::from_utf8_lossy(&status.stderr)
            ));
        }
        trees.push(tree_hashes(&out));
    }
    if trees[0] != trees[1] {
        return Err("output trees differ".into());
    }
    Ok(format!("{} files identical across runs", trees[0].len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("contribution oracle", contribution_oracle),
        ("OLS optimality", ols_optimality),
        ("identity plan equivalence", identity_plan),
        ("FLOPs exactness", flops_exactness),
        ("LLaVA-config cost bands", llava_bands),
        ("Hellinger metric suite", hellinger_suite),
        ("hadamard beats skip", hadamard_beats_skip),
        ("profiler/selection suite", profiler_selection),
        ("determinism audit", determinism_audit),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS {}. {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}. {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
