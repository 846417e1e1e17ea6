use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CapaError, Result};
use crate::hadamard::AlphaVector;

use super::tokens::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnMode {
    Dense,
    Hadamard,
    Skip,
}

/// Which tokens bypass the dense FFN in hadamard/skip layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HadamardScope {
    #[default]
    VisualOnly,
    AllTokens,
}

impl HadamardScope {
    pub fn covers(&self, m: Modality) -> bool {
        match self {
            HadamardScope::VisualOnly => m == Modality::Visual,
            HadamardScope::AllTokens => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrunePolicy {
    Contribution,
    Attention,
    Uniform,
}

impl PrunePolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            PrunePolicy::Contribution => "contribution",
            PrunePolicy::Attention => "attention",
            PrunePolicy::Uniform => "uniform",
        }
    }
}

impl std::str::FromStr for PrunePolicy {
    type Err = CapaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contribution" => Ok(Self::Contribution),
            "attention" => Ok(Self::Attention),
            "uniform" => Ok(Self::Uniform),
            other => Err(CapaError::InvalidArgument(format!(
                "unknown policy {other}"
            ))),
        }
    }
}

/// Visual-token pruning applied after `after_layer`: layers `> after_layer`
/// only see the surviving tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrunePoint {
    pub after_layer: usize,
    pub keep_ratio: f32,
    pub policy: PrunePolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub ffn_mode: FfnMode,
    pub scope: HadamardScope,
}

impl Default for LayerPlan {
    fn default() -> Self {
        Self {
            ffn_mode: FfnMode::Dense,
            scope: HadamardScope::VisualOnly,
        }
    }
}

/// Per-layer execution plan plus the (single) pruning point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerExecPlan {
    pub layers: Vec<LayerPlan>,
    pub prune: Option<PrunePoint>,
    pub alphas: BTreeMap<usize, AlphaVector>,
}

impl LayerExecPlan {
    pub fn dense(n_layers: usize) -> Self {
        Self {
            layers: vec![LayerPlan::default(); n_layers],
            prune: None,
            alphas: BTreeMap::new(),
        }
    }

    /// Sets `mode` on every listed layer.
    pub fn with_mode(mut self, layers: &[usize], mode: FfnMode, scope: HadamardScope) -> Self {
        for &l in layers {
            if let Some(p) = self.layers.get_mut(l) {
                *p = LayerPlan {
                    ffn_mode: mode,
                    scope,
                };
            }
        }
        self
    }

    /// Hadamard mode on each calibrated layer.
    pub fn with_alphas(mut self, alphas: Vec<AlphaVector>, scope: HadamardScope) -> Self {
        for a in alphas {
            if let Some(p) = self.layers.get_mut(a.layer) {
                *p = LayerPlan {
                    ffn_mode: FfnMode::Hadamard,
                    scope,
                };
            }
            self.alphas.insert(a.layer, a);
        }
        self
    }

    pub fn with_prune(mut self, prune: PrunePoint) -> Self {
        self.prune = Some(prune);
        self
    }

    pub fn is_vanilla(&self) -> bool {
        self.prune.is_none() && self.layers.iter().all(|l| l.ffn_mode == FfnMode::Dense)
    }

    pub fn approximated_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, p)| p.ffn_mode != FfnMode::Dense)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self, n_layers: usize, d_model: usize) -> Result<()> {
        if self.layers.len() != n_layers {
            return Err(CapaError::Config(format!(
                "plan has {} layers, model has {n_layers}",
                self.layers.len()
            )));
        }
        for (i, p) in self.layers.iter().enumerate() {
            if p.ffn_mode == FfnMode::Hadamard {
                let a = self.alphas.get(&i).ok_or(CapaError::Uncalibrated(i))?;
                if a.alpha.len() != d_model {
                    return Err(CapaError::Config(format!(
                        "alpha for layer {i} has length {}, expected {d_model}",
                        a.alpha.len()
                    )));
                }
            }
        }
        if let Some(p) = &self.prune {
            if p.after_layer >= n_layers {
                return Err(CapaError::Config(format!(
                    "prune layer {} out of range for {n_layers} layers",
                    p.after_layer
                )));
            }
            crate::contribution::check_keep_ratio(p.keep_ratio)?;
        }
        Ok(())
    }
}
