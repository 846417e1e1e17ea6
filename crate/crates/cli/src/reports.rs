//! CSV rendering and parsing. Every report starts with the header comment
//! line from [`crate::artifacts::report_header`]; numbers use Rust's
//! shortest round-trip formatting so output is byte-stable.

use std::fmt::Write;

use capa_core::contribution::{ContributionRecord, LayerContributionMean};
use capa_core::divergence::DivergenceTrace;
use capa_core::flops::{Component, CostReport};
use capa_core::profile::{LayerRedundancy, LayerSelection, RedundancyProfile};
use capa_core::sinks::SinkRecord;

use crate::error::{CliError, CliResult};

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn body_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
}

/// First line of a report if it is a comment.
pub fn header_of(text: &str) -> Option<&str> {
    text.lines().next().filter(|l| l.starts_with('#'))
}

pub fn profile_csv(header: &str, p: &RedundancyProfile) -> String {
    let mut s = format!("{header}\nlayer,mean_sim_visual,mean_sim_text,n_visual,n_text\n");
    for l in &p.layers {
        writeln!(
            s,
            "{},{},{},{},{}",
            l.layer,
            opt(l.mean_sim_visual),
            opt(l.mean_sim_text),
            l.n_visual,
            l.n_text
        )
        .unwrap();
    }
    s
}

pub fn parse_profile_csv(text: &str) -> CliResult<RedundancyProfile> {
    let bad = |line: &str| CliError::Config(format!("bad profile line {line:?}"));
    let mut lines = body_lines(text);
    if lines.next() != Some("layer,mean_sim_visual,mean_sim_text,n_visual,n_text") {
        return Err(CliError::Config("profile header missing".into()));
    }
    let mut layers = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(line));
        }
        let mean = |s: &str| -> CliResult<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(line))
            }
        };
        let count = |s: &str| -> CliResult<u64> { s.parse().map_err(|_| bad(line)) };
        let (v, t) = (mean(f[1])?, mean(f[2])?);
        let (nv, nt) = (count(f[3])?, count(f[4])?);
        let joint = match (v, t) {
            (Some(v), Some(t)) => Some((v * nv as f64 + t * nt as f64) / (nv + nt) as f64),
            (v, t) => v.or(t),
        };
        layers.push(LayerRedundancy {
            layer: f[0].parse().map_err(|_| bad(line))?,
            mean_sim_visual: v,
            mean_sim_text: t,
            mean_sim_joint: joint,
            n_visual: nv,
            n_text: nt,
            n_undefined: 0,
        });
    }
    Ok(RedundancyProfile { layers })
}

pub fn selection_csv(header: &str, s: &LayerSelection, protect: &str, basis: &str) -> String {
    let mut out = format!(
        "{header}\n# eta={}, protect={protect}, basis={basis}\nlayer\n",
        s.eta
    );
    for l in &s.selected {
        writeln!(out, "{l}").unwrap();
    }
    out
}

pub fn parse_selection_csv(text: &str) -> CliResult<Vec<usize>> {
    let mut lines = body_lines(text);
    if lines.next() != Some("layer") {
        return Err(CliError::Config("selection header missing".into()));
    }
    lines
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("bad selection line {l:?}")))
        })
        .collect()
}

pub fn tokens_csv(header: &str, tokens: &[u32]) -> String {
    let mut s = format!("{header}\nstep,token\n");
    for (t, tok) in tokens.iter().enumerate() {
        writeln!(s, "{t},{tok}").unwrap();
    }
    s
}

pub fn contributions_csv(header: &str, records: &[ContributionRecord]) -> String {
    let mut s = format!("{header}\nlayer,token,modality,c_value,mean_attn\n");
    for r in records {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.layer,
            r.token_index,
            r.modality,
            r.c_value,
            r.mean_attn()
        )
        .unwrap();
    }
    s
}

pub fn cost_csv(header: &str, r: &CostReport) -> String {
    let mut s = format!("{header}\nlayer,component,mul_adds\n");
    for e in &r.entries {
        writeln!(s, "{},{},{}", e.layer, e.component.as_str(), e.mul_adds).unwrap();
    }
    s
}

/// `key = value` summary of a cost report, optionally against a baseline.
pub fn cost_summary(header: &str, r: &CostReport, baseline: Option<&CostReport>) -> String {
    let approx: Vec<String> = r.approximated.iter().map(|l| l.to_string()).collect();
    let mut s = format!("{header}\n");
    writeln!(s, "d_model = {}", r.d_model).unwrap();
    writeln!(s, "d_ff = {}", r.d_ff).unwrap();
    writeln!(s, "n_heads = {}", r.n_heads).unwrap();
    writeln!(s, "n_layers = {}", r.n_layers).unwrap();
    writeln!(s, "n_img = {}", r.seq.n_img).unwrap();
    writeln!(s, "n_txt = {}", r.seq.n_txt).unwrap();
    writeln!(s, "rho = {}", r.rho).unwrap();
    writeln!(
        s,
        "prune_after = {}",
        r.prune_after
            .map(|l| l.to_string())
            .unwrap_or_else(|| "none".into())
    )
    .unwrap();
    writeln!(s, "approximated = {}", approx.join(",")).unwrap();
    writeln!(s, "total_mul_adds = {}", r.total_mul_adds()).unwrap();
    writeln!(s, "total_flops = {}", r.total_flops()).unwrap();
    for c in Component::ALL {
        writeln!(s, "share_{} = {}", c.as_str(), r.share(c)).unwrap();
    }
    writeln!(s, "ffn_share = {}", r.ffn_share()).unwrap();
    if let Some(b) = baseline {
        writeln!(s, "vanilla_total_flops = {}", b.total_flops()).unwrap();
        writeln!(s, "reduction_vs_vanilla = {}", r.reduction_vs(b)).unwrap();
    }
    s
}

pub fn divergence_csv(header: &str, traces: &[DivergenceTrace]) -> String {
    let mut s = format!("{header}\nstep,policy,hellinger\n");
    for t in traces {
        for (step, h) in t.values.iter().enumerate() {
            writeln!(s, "{step},{},{h}", t.policy).unwrap();
        }
    }
    s
}

pub fn sinks_csv(header: &str, records: &[SinkRecord]) -> String {
    let mut s = format!("{header}\nlayer,token,phi,c_value,class\n");
    for r in records {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.layer,
            r.token_index,
            r.phi,
            r.c_value,
            r.class.as_str()
        )
        .unwrap();
    }
    s
}

pub fn trajectory_csv(header: &str, rows: &[LayerContributionMean]) -> String {
    let mut s = format!("{header}\nlayer,modality,mean_c,count\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.layer, r.modality, r.mean, r.count).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_roundtrip() {
        let p = RedundancyProfile {
            layers: vec![
                LayerRedundancy {
                    layer: 0,
                    mean_sim_visual: Some(0.961_234_567_891_234_5),
                    mean_sim_text: None,
                    mean_sim_joint: Some(0.961_234_567_891_234_5),
                    n_visual: 3,
                    n_text: 0,
                    n_undefined: 0,
                },
                LayerRedundancy {
                    layer: 1,
                    mean_sim_visual: Some(0.5),
                    mean_sim_text: Some(0.25),
                    mean_sim_joint: Some(0.375),
                    n_visual: 2,
                    n_text: 2,
                    n_undefined: 0,
                },
            ],
        };
        let text = profile_csv("# h", &p);
        assert_eq!(header_of(&text), Some("# h"));
        assert_eq!(parse_profile_csv(&text).unwrap(), p);
        assert!(parse_profile_csv("layer\n1\n").is_err());
    }

    #[test]
    fn selection_roundtrip() {
        let s = LayerSelection {
            selected: vec![2, 3, 6],
            eta: 0.96,
            protected: vec![0, 1, 7],
        };
        let text = selection_csv("# h", &s, "first:2,last:1", "visual");
        assert_eq!(parse_selection_csv(&text).unwrap(), vec![2, 3, 6]);
        assert!(parse_selection_csv("layer\nx\n").is_err());
    }
}
