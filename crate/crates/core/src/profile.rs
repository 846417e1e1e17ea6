//! FFN linearity profiling and redundant-layer selection.
//!
//! A layer's redundancy for one token is `cos(x, y)` where `x` enters the
//! FFN sub-block and `y = x + FFN(norm(x))` leaves it. Per-layer means are
//! taken over tokens (not sequences), separately per modality.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CapaError, Result};
use crate::model::{
    forward, ForwardOptions, LayerExecPlan, Modality, ModelWeights, ProbeRequest, TokenStream,
};
use crate::tensor::{cosine_sim, OpCounter};

/// `cos(x, x + ffn_out)`; `None` when either side is (near) zero.
pub fn layer_similarity(x: &[f32], ffn_out: &[f32]) -> Result<Option<f64>> {
    if x.len() != ffn_out.len() {
        return Err(CapaError::InvalidArgument(format!(
            "lengths {} and {}",
            x.len(),
            ffn_out.len()
        )));
    }
    let y: Vec<f32> = x.iter().zip(ffn_out).map(|(a, b)| a + b).collect();
    cosine_sim(x, &y)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct SimSums {
    visual: f64,
    text: f64,
    n_visual: u64,
    n_text: u64,
    n_undefined: u64,
}

impl SimSums {
    fn add(&mut self, m: Modality, s: Option<f64>) {
        match (m, s) {
            (_, None) => self.n_undefined += 1,
            (Modality::Visual, Some(s)) => {
                self.visual += s;
                self.n_visual += 1;
            }
            (Modality::Text, Some(s)) => {
                self.text += s;
                self.n_text += 1;
            }
        }
    }

    fn merge(&mut self, o: &SimSums) {
        self.visual += o.visual;
        self.text += o.text;
        self.n_visual += o.n_visual;
        self.n_text += o.n_text;
        self.n_undefined += o.n_undefined;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRedundancy {
    pub layer: usize,
    pub mean_sim_visual: Option<f64>,
    pub mean_sim_text: Option<f64>,
    pub mean_sim_joint: Option<f64>,
    pub n_visual: u64,
    pub n_text: u64,
    pub n_undefined: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyProfile {
    pub layers: Vec<LayerRedundancy>,
}

impl RedundancyProfile {
    pub fn from_means(visual: &[f64]) -> Self {
        Self {
            layers: visual
                .iter()
                .enumerate()
                .map(|(layer, &v)| LayerRedundancy {
                    layer,
                    mean_sim_visual: Some(v),
                    mean_sim_text: None,
                    mean_sim_joint: Some(v),
                    n_visual: 1,
                    n_text: 0,
                    n_undefined: 0,
                })
                .collect(),
        }
    }
}

fn sample_sums(w: &ModelWeights, stream: &TokenStream) -> Result<Vec<SimSums>> {
    let plan = LayerExecPlan::dense(w.config.n_layers);
    let trace = forward(
        stream,
        w,
        &plan,
        ForwardOptions::probed(ProbeRequest {
            hidden: true,
            attention: false,
        }),
        &mut OpCounter::new(),
    )?;
    trace
        .layers
        .iter()
        .map(|p| {
            let (x, y) = match (&p.ffn_in, &p.ffn_out) {
                (Some(x), Some(y)) => (x, y),
                _ => return Err(CapaError::NotProbed(p.layer)),
            };
            let mut s = SimSums::default();
            for (r, &m) in p.modality.iter().enumerate() {
                s.add(m, cosine_sim(x.row(r), y.row(r))?);
            }
            Ok(s)
        })
        .collect()
}

/// Mean FFN input/output cosine per layer and modality over `calib`, with
/// every layer running dense. Samples are processed in parallel and reduced
/// in calibration-set order.
pub fn build_profile(w: &ModelWeights, calib: &[TokenStream]) -> Result<RedundancyProfile> {
    if calib.is_empty() {
        return Err(CapaError::InvalidArgument("empty calibration set".into()));
    }
    let partials: Vec<Vec<SimSums>> = calib
        .par_iter()
        .map(|s| sample_sums(w, s))
        .collect::<Result<_>>()?;
    let mut total = vec![SimSums::default(); w.config.n_layers];
    for p in &partials {
        for (t, s) in total.iter_mut().zip(p) {
            t.merge(s);
        }
    }
    let mean = |sum: f64, n: u64| (n > 0).then(|| sum / n as f64);
    Ok(RedundancyProfile {
        layers: total
            .iter()
            .enumerate()
            .map(|(layer, s)| LayerRedundancy {
                layer,
                mean_sim_visual: mean(s.visual, s.n_visual),
                mean_sim_text: mean(s.text, s.n_text),
                mean_sim_joint: mean(s.visual + s.text, s.n_visual + s.n_text),
                n_visual: s.n_visual,
                n_text: s.n_text,
                n_undefined: s.n_undefined,
            })
            .collect(),
    })
}

/// Which mean drives selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionBasis {
    #[default]
    Visual,
    Text,
    Joint,
}

/// Layers excluded from approximation: the first `first` and last `last`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtectedLayers {
    pub first: usize,
    pub last: usize,
}

impl Default for ProtectedLayers {
    fn default() -> Self {
        Self { first: 2, last: 1 }
    }
}

impl ProtectedLayers {
    pub const NONE: Self = Self { first: 0, last: 0 };

    pub fn resolve(&self, n_layers: usize) -> BTreeSet<usize> {
        let mut s: BTreeSet<usize> = (0..self.first.min(n_layers)).collect();
        s.extend(n_layers.saturating_sub(self.last)..n_layers);
        s
    }
}

impl std::str::FromStr for ProtectedLayers {
    type Err = CapaError;

    /// `first:2,last:1` (either part optional).
    fn from_str(s: &str) -> Result<Self> {
        let mut p = Self::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let bad = || CapaError::InvalidArgument(format!("bad protect spec {s:?}"));
            let (k, v) = part.split_once(':').ok_or_else(bad)?;
            let v: usize = v.trim().parse().map_err(|_| bad())?;
            match k.trim() {
                "first" => p.first = v,
                "last" => p.last = v,
                _ => return Err(bad()),
            }
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub selected: Vec<usize>,
    pub eta: f64,
    pub protected: Vec<usize>,
}

/// Layers whose mean similarity strictly exceeds `eta`, minus `protected`.
pub fn select_layers(
    profile: &RedundancyProfile,
    eta: f64,
    protected: &BTreeSet<usize>,
    basis: SelectionBasis,
) -> LayerSelection {
    let selected = profile
        .layers
        .iter()
        .filter(|l| !protected.contains(&l.layer))
        .filter(|l| {
            let m = match basis {
                SelectionBasis::Visual => l.mean_sim_visual,
                SelectionBasis::Text => l.mean_sim_text,
                SelectionBasis::Joint => l.mean_sim_joint,
            };
            m.is_some_and(|m| m > eta)
        })
        .map(|l| l.layer)
        .collect();
    LayerSelection {
        selected,
        eta,
        protected: protected.iter().copied().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn similarity_examples() {
        let x = [0.3f32, -1.2, 2.0];
        assert!((layer_similarity(&x, &[0.0; 3]).unwrap().unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f32> = x.iter().map(|v| -v).collect();
        assert_eq!(layer_similarity(&x, &neg).unwrap(), None);
        assert!((layer_similarity(&x, &x).unwrap().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_examples() {
        let none = BTreeSet::new();
        let p = RedundancyProfile::from_means(&[0.99, 0.95, 0.97]);
        assert_eq!(
            select_layers(&p, 0.96, &none, SelectionBasis::Visual).selected,
            vec![0, 2]
        );
        let ones = RedundancyProfile::from_means(&[1.0; 5]);
        let last = ProtectedLayers { first: 0, last: 1 }.resolve(5);
        assert_eq!(
            select_layers(&ones, 0.96, &last, SelectionBasis::Visual).selected,
            vec![0, 1, 2, 3]
        );
        assert!(select_layers(&ones, 1.0, &none, SelectionBasis::Visual)
            .selected
            .is_empty());
    }

    #[test]
    fn protect_spec_parsing() {
        let p: ProtectedLayers = "first:2,last:1".parse().unwrap();
        assert_eq!(p, ProtectedLayers::default());
        assert_eq!(p.resolve(8).into_iter().collect::<Vec<_>>(), vec![0, 1, 7]);
        assert!("middle:3".parse::<ProtectedLayers>().is_err());
        assert_eq!(ProtectedLayers { first: 5, last: 5 }.resolve(3).len(), 3);
    }

    proptest! {
        #[test]
        fn selection_is_monotone_in_eta(
            means in prop::collection::vec(-1.0f64..1.0, 1..16),
            a in 0.01f64..1.0,
            b in 0.01f64..1.0,
        ) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let p = RedundancyProfile::from_means(&means);
            let none = BTreeSet::new();
            let s_hi = select_layers(&p, hi, &none, SelectionBasis::Visual).selected;
            let s_lo = select_layers(&p, lo, &none, SelectionBasis::Visual).selected;
            prop_assert!(s_hi.iter().all(|l| s_lo.contains(l)));
        }
    }
}
