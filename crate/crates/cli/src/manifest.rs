//! Pipeline manifest (TOML). Relative paths resolve against the manifest's
//! own directory.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use capa_core::profile::ProtectedLayers;
use capa_core::sinks::CSplit;
use serde::{Deserialize, Serialize};

use crate::args::{Basis, Mode, Policy, Scope};
use crate::artifacts::require_file;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config: PathBuf,
    pub weights: PathBuf,
    /// Existing calibration set; generated from `[calibration]` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calib: Option<PathBuf>,
    pub output: PathBuf,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub calibration: CalibSpec,
    #[serde(default)]
    pub prompt: PromptShape,
    #[serde(default)]
    pub plan: PlanSpec,
    #[serde(default)]
    pub reports: ReportSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub calib: u64,
    pub prompt: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            calib: 7,
            prompt: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibSpec {
    pub samples: usize,
    pub n_img: usize,
    pub n_txt: usize,
}

impl Default for CalibSpec {
    fn default() -> Self {
        Self {
            samples: 64,
            n_img: 48,
            n_txt: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptShape {
    pub n_img: usize,
    pub n_txt: usize,
    pub steps: usize,
}

impl Default for PromptShape {
    fn default() -> Self {
        Self {
            n_img: 48,
            n_txt: 16,
            steps: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSpec {
    pub mode: Mode,
    pub policy: Policy,
    /// Fraction of visual tokens kept; `1.0` keeps everything.
    pub keep_ratio: f32,
    pub prune_layer: usize,
    pub eta: f64,
    pub protect: String,
    pub basis: Basis,
    pub scope: Scope,
    /// Use this alpha file instead of calibrating.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alphas: Option<PathBuf>,
}

impl Default for PlanSpec {
    fn default() -> Self {
        Self {
            mode: Mode::Capa,
            policy: Policy::Contribution,
            keep_ratio: 0.25,
            prune_layer: 2,
            eta: 0.96,
            protect: "first:2,last:1".into(),
            basis: Basis::Visual,
            scope: Scope::Visual,
            alphas: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSpec {
    pub divergence: bool,
    pub divergence_policies: Vec<Policy>,
    pub sinks: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sink_layer: Option<usize>,
    pub tau: f64,
    pub c_split: String,
    pub contribution_trace: bool,
}

impl Default for ReportSpec {
    fn default() -> Self {
        Self {
            divergence: true,
            divergence_policies: vec![Policy::Contribution, Policy::Attention],
            sinks: true,
            sink_layer: None,
            tau: capa_core::sinks::DEFAULT_TAU,
            c_split: "median".into(),
            contribution_trace: true,
        }
    }
}

impl RunManifest {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("manifest: {e}")))
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("manifest: {e}")))
    }

    /// Reads, resolves and validates a manifest file.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let m = Self::from_toml(&text)?.resolved(base);
        m.validate()?;
        Ok(m)
    }

    pub fn resolved(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.config);
        fix(&mut self.weights);
        fix(&mut self.output);
        if let Some(c) = &mut self.calib {
            fix(c);
        }
        if let Some(a) = &mut self.plan.alphas {
            fix(a);
        }
        self
    }

    pub fn validate(&self) -> CliResult<()> {
        require_file(&self.config)?;
        require_file(&self.weights)?;
        if let Some(c) = &self.calib {
            require_file(c)?;
        }
        if let Some(a) = &self.plan.alphas {
            require_file(a)?;
        }
        let p = &self.plan;
        if !(p.eta > 0.0 && p.eta < 1.0) {
            return Err(CliError::Config(format!("eta {} outside (0, 1)", p.eta)));
        }
        ProtectedLayers::from_str(&p.protect).map_err(CliError::config)?;
        CSplit::from_str(&self.reports.c_split).map_err(CliError::config)?;
        capa_core::contribution::check_keep_ratio(p.keep_ratio).map_err(CliError::config)?;
        if self.prompt.steps == 0 || self.calibration.samples == 0 {
            return Err(CliError::Config(
                "steps and samples must be positive".into(),
            ));
        }
        Ok(())
    }
}
