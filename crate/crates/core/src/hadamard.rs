//! Closed-form Hadamard approximation of residual FFN blocks.
//!
//! For each dimension `k` the scale minimizing `sum_n (a_k x_nk - y_nk)^2` is
//! `a_k = sum_n x_nk y_nk / sum_n x_nk^2`, so calibration only needs the two
//! running moment vectors. Dimensions whose `sum x^2` is at or below the
//! guard fall back to `a_k = 1` (identity passthrough).

use rayon::prelude::*;

use crate::error::{CapaError, Result};
use crate::io::{NamedTensor, TensorFile};
use crate::model::{
    forward, ForwardOptions, HadamardScope, LayerExecPlan, ModelWeights, ProbeRequest, TokenStream,
};
use crate::profile::LayerSelection;
use crate::tensor::{OpCounter, Tensor2D};

pub const ALPHA_EPS: f64 = 1e-8;

/// Running second-order moments for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibMoments {
    pub layer: usize,
    pub sum_xy: Vec<f64>,
    pub sum_xx: Vec<f64>,
    pub n_samples: u64,
}

impl CalibMoments {
    pub fn new(layer: usize, d: usize) -> Self {
        Self {
            layer,
            sum_xy: vec![0.0; d],
            sum_xx: vec![0.0; d],
            n_samples: 0,
        }
    }

    pub fn accumulate(&mut self, x: &[f32], y: &[f32]) -> Result<()> {
        let d = self.sum_xy.len();
        if x.len() != d || y.len() != d {
            return Err(CapaError::InvalidArgument(format!(
                "sample lengths {}/{} for moments of dimension {d}",
                x.len(),
                y.len()
            )));
        }
        for k in 0..d {
            let (xv, yv) = (x[k] as f64, y[k] as f64);
            self.sum_xy[k] += xv * yv;
            self.sum_xx[k] += xv * xv;
        }
        self.n_samples += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &CalibMoments) {
        for (a, b) in self.sum_xy.iter_mut().zip(&other.sum_xy) {
            *a += b;
        }
        for (a, b) in self.sum_xx.iter_mut().zip(&other.sum_xx) {
            *a += b;
        }
        self.n_samples += other.n_samples;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaVector {
    pub layer: usize,
    pub alpha: Vec<f32>,
    /// Dimensions where the denominator guard fired.
    pub fallback: Vec<bool>,
}

pub fn solve_alpha(m: &CalibMoments, eps: f64) -> Result<AlphaVector> {
    if m.n_samples == 0 {
        return Err(CapaError::InvalidArgument(format!(
            "no calibration samples for layer {}",
            m.layer
        )));
    }
    let mut alpha = Vec::with_capacity(m.sum_xx.len());
    let mut fallback = Vec::with_capacity(m.sum_xx.len());
    for (&xy, &xx) in m.sum_xy.iter().zip(&m.sum_xx) {
        if xx > eps {
            alpha.push((xy / xx) as f32);
            fallback.push(false);
        } else {
            alpha.push(1.0);
            fallback.push(true);
        }
    }
    Ok(AlphaVector {
        layer: m.layer,
        alpha,
        fallback,
    })
}

/// `y = x * alpha` elementwise; counts `d` mul-adds.
pub fn apply_hadamard(x: &[f32], alpha: &[f32], counter: &mut OpCounter) -> Result<Vec<f32>> {
    if x.len() != alpha.len() {
        return Err(CapaError::InvalidArgument(format!(
            "hadamard of lengths {} and {}",
            x.len(),
            alpha.len()
        )));
    }
    counter.add(x.len() as u64);
    Ok(x.iter().zip(alpha).map(|(a, b)| a * b).collect())
}

/// FFN-boundary samples `(x, y)` captured by a dense probe pass.
struct LayerSamples {
    x: Tensor2D,
    y: Tensor2D,
}

fn probe_samples(
    w: &ModelWeights,
    stream: &TokenStream,
    layers: &[usize],
    scope: HadamardScope,
) -> Result<Vec<LayerSamples>> {
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
    layers
        .iter()
        .map(|&l| {
            let p = trace.probe(l)?;
            let (x, y) = match (&p.ffn_in, &p.ffn_out) {
                (Some(x), Some(y)) => (x, y),
                _ => return Err(CapaError::NotProbed(l)),
            };
            let rows: Vec<usize> = (0..p.modality.len())
                .filter(|&r| scope.covers(p.modality[r]))
                .collect();
            Ok(LayerSamples {
                x: x.select_rows(&rows),
                y: y.select_rows(&rows),
            })
        })
        .collect()
}

/// Per-layer moments over the calibration set. Samples are probed in
/// parallel and merged in calibration-set order.
pub fn calibrate_moments(
    w: &ModelWeights,
    layers: &[usize],
    calib: &[TokenStream],
    scope: HadamardScope,
) -> Result<Vec<CalibMoments>> {
    if calib.is_empty() {
        return Err(CapaError::InvalidArgument("empty calibration set".into()));
    }
    let d = w.config.d_model;
    let partials: Vec<Vec<CalibMoments>> = calib
        .par_iter()
        .map(|s| {
            let samples = probe_samples(w, s, layers, scope)?;
            layers
                .iter()
                .zip(samples)
                .map(|(&l, smp)| {
                    let mut m = CalibMoments::new(l, d);
                    for r in 0..smp.x.rows() {
                        m.accumulate(smp.x.row(r), smp.y.row(r))?;
                    }
                    Ok(m)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut total: Vec<CalibMoments> = layers.iter().map(|&l| CalibMoments::new(l, d)).collect();
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            t.merge(p);
        }
    }
    if let Some(m) = total.iter().find(|m| m.n_samples == 0) {
        return Err(CapaError::InvalidArgument(format!(
            "no calibration tokens in scope for layer {}",
            m.layer
        )));
    }
    Ok(total)
}

/// One alpha vector per selected layer.
pub fn calibrate_layers(
    w: &ModelWeights,
    selection: &LayerSelection,
    calib: &[TokenStream],
    scope: HadamardScope,
) -> Result<Vec<AlphaVector>> {
    if selection.selected.is_empty() {
        return Err(CapaError::InvalidArgument("no layers selected".into()));
    }
    calibrate_moments(w, &selection.selected, calib, scope)?
        .iter()
        .map(|m| solve_alpha(m, ALPHA_EPS))
        .collect()
}

/// Squared reconstruction error of the hadamard and skip approximations of
/// one layer's residual FFN block on a calibration set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionError {
    pub layer: usize,
    pub n_tokens: u64,
    pub hadamard_sse: f64,
    pub skip_sse: f64,
}

impl ReconstructionError {
    pub fn hadamard_mse(&self) -> f64 {
        self.hadamard_sse / self.n_tokens.max(1) as f64
    }

    pub fn skip_mse(&self) -> f64 {
        self.skip_sse / self.n_tokens.max(1) as f64
    }
}

pub fn reconstruction_errors(
    w: &ModelWeights,
    alphas: &[AlphaVector],
    calib: &[TokenStream],
    scope: HadamardScope,
) -> Result<Vec<ReconstructionError>> {
    let layers: Vec<usize> = alphas.iter().map(|a| a.layer).collect();
    let mut out: Vec<ReconstructionError> = layers
        .iter()
        .map(|&layer| ReconstructionError {
            layer,
            n_tokens: 0,
            hadamard_sse: 0.0,
            skip_sse: 0.0,
        })
        .collect();
    for s in calib {
        let samples = probe_samples(w, s, &layers, scope)?;
        for ((e, a), smp) in out.iter_mut().zip(alphas).zip(&samples) {
            for r in 0..smp.x.rows() {
                for ((&x, &y), &al) in smp.x.row(r).iter().zip(smp.y.row(r)).zip(&a.alpha) {
                    let (x, y) = (x as f64, y as f64);
                    e.hadamard_sse += (al as f64 * x - y).powi(2);
                    e.skip_sse += (x - y).powi(2);
                }
                e.n_tokens += 1;
            }
        }
    }
    Ok(out)
}

pub fn alphas_to_tensor_file(alphas: &[AlphaVector]) -> Result<TensorFile> {
    let mut f = TensorFile::new();
    for a in alphas {
        f.push(NamedTensor::new(
            format!("alpha.layer.{}", a.layer),
            vec![a.alpha.len()],
            a.alpha.clone(),
        )?);
        f.push(NamedTensor::new(
            format!("alpha.layer.{}.fallback", a.layer),
            vec![a.fallback.len()],
            a.fallback
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )?);
    }
    Ok(f)
}

pub fn alphas_from_tensor_file(f: &TensorFile) -> Result<Vec<AlphaVector>> {
    let mut out = Vec::new();
    for t in f.tensors() {
        let Some(rest) = t.name.strip_prefix("alpha.layer.") else {
            continue;
        };
        if rest.ends_with(".fallback") {
            continue;
        }
        let layer: usize = rest
            .parse()
            .map_err(|_| CapaError::Format(format!("bad alpha tensor name {}", t.name)))?;
        let fallback = match f.get(&format!("{}.fallback", t.name)) {
            Some(fb) if fb.data.len() == t.data.len() => {
                fb.data.iter().map(|&v| v != 0.0).collect()
            }
            Some(_) => {
                return Err(CapaError::Format(format!(
                    "fallback mask size for {}",
                    t.name
                )))
            }
            None => vec![false; t.data.len()],
        };
        out.push(AlphaVector {
            layer,
            alpha: t.data.clone(),
            fallback,
        });
    }
    Ok(out)
}
