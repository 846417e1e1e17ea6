//! Sink taxonomy: tokens with an outlier activation (`phi > tau`) are split
//! into low-contribution probability dumps and high-contribution structural
//! anchors.
//!
//! `phi` is the largest absolute hidden-state entry divided by the RMS of the
//! hidden state. It is scale-free and bounded by `sqrt(d)`.

use serde::{Deserialize, Serialize};

use crate::error::{CapaError, Result};
use crate::model::{ForwardTrace, Modality};

pub const DEFAULT_TAU: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SinkClass {
    NotSink,
    ProbabilityDump,
    StructuralAnchor,
}

impl SinkClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            SinkClass::NotSink => "not_sink",
            SinkClass::ProbabilityDump => "probability_dump",
            SinkClass::StructuralAnchor => "structural_anchor",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkRecord {
    pub layer: usize,
    pub token_index: usize,
    pub phi: f64,
    pub c_value: f32,
    pub class: SinkClass,
}

/// How the contribution split between the two sink classes is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CSplit {
    /// Median contribution among tokens with `phi > tau`.
    Median,
    Value(f64),
}

impl std::str::FromStr for CSplit {
    type Err = CapaError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "median" {
            return Ok(Self::Median);
        }
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && *v > 0.0)
            .map(Self::Value)
            .ok_or_else(|| CapaError::InvalidArgument(format!("bad c-split {s:?}")))
    }
}

pub fn sink_value(h: &[f32]) -> f64 {
    if h.is_empty() {
        return 0.0;
    }
    let ms = h.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / h.len() as f64;
    if ms == 0.0 {
        return 0.0;
    }
    let max = h.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    max / ms.sqrt()
}

pub fn classify(phi: f64, c_value: f64, tau: f64, c_split: f64) -> SinkClass {
    if phi <= tau {
        SinkClass::NotSink
    } else if c_value < c_split {
        SinkClass::ProbabilityDump
    } else {
        SinkClass::StructuralAnchor
    }
}

/// Resolves `split` against `(phi, c)` pairs. With no sinks the median
/// split is `0`, which is irrelevant because nothing is classified by it.
pub fn resolve_split(pairs: &[(f64, f32)], tau: f64, split: CSplit) -> f64 {
    match split {
        CSplit::Value(v) => v,
        CSplit::Median => {
            let mut c: Vec<f64> = pairs
                .iter()
                .filter(|(phi, _)| *phi > tau)
                .map(|(_, c)| *c as f64)
                .collect();
            if c.is_empty() {
                return 0.0;
            }
            c.sort_by(f64::total_cmp);
            let n = c.len();
            if n % 2 == 1 {
                c[n / 2]
            } else {
                0.5 * (c[n / 2 - 1] + c[n / 2])
            }
        }
    }
}

/// One record per visual token present at `layer`, sorted by token index.
/// `phi` uses the residual stream entering the layer; `C` uses the last
/// query's attention at that layer.
pub fn sink_report(
    trace: &ForwardTrace,
    layer: usize,
    tau: f64,
    split: CSplit,
) -> Result<(f64, Vec<SinkRecord>)> {
    let probe = trace.probe(layer)?;
    let (Some(h), Some(c)) = (&probe.resid_in, &probe.contributions) else {
        return Err(CapaError::NotProbed(layer));
    };
    let pairs: Vec<(usize, f64, f32)> = (0..probe.positions.len())
        .filter(|&r| probe.modality[r] == Modality::Visual)
        .map(|r| (probe.positions[r], sink_value(h.row(r)), c[r]))
        .collect();
    let phi_c: Vec<(f64, f32)> = pairs.iter().map(|&(_, p, c)| (p, c)).collect();
    let c_split = resolve_split(&phi_c, tau, split);
    let mut records: Vec<SinkRecord> = pairs
        .into_iter()
        .map(|(token_index, phi, c_value)| SinkRecord {
            layer,
            token_index,
            phi,
            c_value,
            class: classify(phi, c_value as f64, tau, c_split),
        })
        .collect();
    records.sort_by_key(|r| r.token_index);
    Ok((c_split, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn phi_examples() {
        assert!((sink_value(&[3.5; 64]) - 1.0).abs() < 1e-12);
        let mut h = vec![0.0f32; 64];
        h[17] = 100.0;
        assert!((sink_value(&h) - 8.0).abs() < 1e-12);
        assert_eq!(sink_value(&[0.0; 64]), 0.0);
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify(25.0, 0.1, 20.0, 1.0), SinkClass::ProbabilityDump);
        assert_eq!(classify(25.0, 3.0, 20.0, 1.0), SinkClass::StructuralAnchor);
        assert_eq!(classify(5.0, 100.0, 20.0, 1.0), SinkClass::NotSink);
        assert_eq!(classify(20.0, 100.0, 20.0, 1.0), SinkClass::NotSink);
    }

    #[test]
    fn median_split() {
        let pairs = [(30.0, 1.0f32), (25.0, 5.0), (2.0, 100.0), (21.0, 3.0)];
        assert_eq!(resolve_split(&pairs, 20.0, CSplit::Median), 3.0);
        assert_eq!(resolve_split(&pairs[..2], 20.0, CSplit::Median), 3.0);
        assert_eq!(resolve_split(&[(1.0, 1.0)], 20.0, CSplit::Median), 0.0);
        assert_eq!("median".parse::<CSplit>().unwrap(), CSplit::Median);
        assert_eq!("2.5".parse::<CSplit>().unwrap(), CSplit::Value(2.5));
        assert!("-1".parse::<CSplit>().is_err());
    }

    proptest! {
        #[test]
        fn phi_is_scale_free(h in prop::collection::vec(-10.0f32..10.0, 8..64), s in 0.01f32..100.0) {
            let phi = sink_value(&h);
            prop_assume!(phi > 0.0);
            let scaled: Vec<f32> = h.iter().map(|v| v * s).collect();
            prop_assert!((sink_value(&scaled) - phi).abs() <= 1e-6 * phi);
            prop_assert!(phi <= (h.len() as f64).sqrt() + 1e-9);
        }

        #[test]
        fn thresholds_are_monotone(
            phi in 0.0f64..50.0, c in 0.0f64..10.0,
            tau in 1.0f64..40.0, dt in 0.0f64..10.0,
            split in 0.1f64..10.0, ds in 0.0f64..5.0,
        ) {
            let base = classify(phi, c, tau, split);
            if base == SinkClass::NotSink {
                prop_assert_eq!(classify(phi, c, tau + dt, split), SinkClass::NotSink);
            }
            if base == SinkClass::ProbabilityDump {
                prop_assert_ne!(classify(phi, c, tau, split + ds), SinkClass::StructuralAnchor);
            }
        }
    }
}
