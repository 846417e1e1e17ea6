use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{CapaError, Result};
use crate::io::{NamedTensor, TensorFile};
use crate::tensor::{OpCounter, Tensor2D};

/// Token embeddings are drawn from `[-EMBED_RANGE, EMBED_RANGE]` so the
/// residual stream starts at unit scale; every projection matrix uses
/// `[-1/sqrt(d), 1/sqrt(d)]`.
pub const EMBED_RANGE: f32 = 1.0;

/// Residual FFN sub-block of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum FfnBlock {
    /// `y = x + down(silu(gate(n)) * up(n))` with `n = rms_norm(x)`.
    SwiGlu {
        gate: Tensor2D,
        up: Tensor2D,
        down: Tensor2D,
    },
    /// Synthetic block whose whole residual output is `y = x * diag`.
    Diagonal(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Tensor2D,
    pub wk: Tensor2D,
    pub wv: Tensor2D,
    pub wo: Tensor2D,
    pub ffn_norm: Vec<f32>,
    pub ffn: FfnBlock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embed: Tensor2D,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub unembed: Tensor2D,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, a: f32) -> Tensor2D {
    let data = (0..rows * cols).map(|_| rng.random_range(-a..=a)).collect();
    Tensor2D::from_vec(rows, cols, data).expect("sized by construction")
}

/// Seeded weights; the same config (including seed) gives bit-identical weights.
pub fn init_weights(config: &ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let d = config.d_model;
    let a = 1.0 / (d as f32).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let embed = uniform(&mut rng, config.vocab_size, d, EMBED_RANGE);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            attn_norm: vec![1.0; d],
            wq: uniform(&mut rng, d, d, a),
            wk: uniform(&mut rng, d, d, a),
            wv: uniform(&mut rng, d, d, a),
            wo: uniform(&mut rng, d, d, a),
            ffn_norm: vec![1.0; d],
            ffn: FfnBlock::SwiGlu {
                gate: uniform(&mut rng, d, config.d_ff, a),
                up: uniform(&mut rng, d, config.d_ff, a),
                down: uniform(&mut rng, config.d_ff, d, a),
            },
        })
        .collect();
    let unembed = uniform(&mut rng, d, config.vocab_size, a);
    Ok(ModelWeights {
        config: *config,
        embed,
        layers,
        final_norm: vec![1.0; d],
        unembed,
    })
}

#[inline]
fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// SwiGLU on a single (already normalized) token: `down(silu(gate x) * up x)`.
/// Counts `3·d·d_ff` mul-adds; the gating product is an activation and is
/// not counted.
pub fn ffn_swiglu(
    x: &[f32],
    gate: &Tensor2D,
    up: &Tensor2D,
    down: &Tensor2D,
    counter: &mut OpCounter,
) -> Result<Vec<f32>> {
    let g = crate::tensor::vecmat(x, gate, counter)?;
    let u = crate::tensor::vecmat(x, up, counter)?;
    let h: Vec<f32> = g.iter().zip(&u).map(|(&g, &u)| silu(g) * u).collect();
    crate::tensor::vecmat(&h, down, counter)
}

/// Batched SwiGLU over the rows of `x`; same arithmetic as [`ffn_swiglu`].
pub(crate) fn ffn_swiglu_rows(
    x: &Tensor2D,
    gate: &Tensor2D,
    up: &Tensor2D,
    down: &Tensor2D,
    counter: &mut OpCounter,
) -> Result<Tensor2D> {
    let g = crate::tensor::matmul(x, gate, counter)?;
    let u = crate::tensor::matmul(x, up, counter)?;
    let h: Vec<f32> = g
        .data()
        .iter()
        .zip(u.data())
        .map(|(&g, &u)| silu(g) * u)
        .collect();
    let h = Tensor2D::from_vec(g.rows(), g.cols(), h)?;
    crate::tensor::matmul(&h, down, counter)
}

impl ModelWeights {
    pub fn n_heads(&self) -> usize {
        self.config.n_heads
    }

    /// Replaces layer `layer`'s FFN block by the synthetic map `y = x * diag`.
    pub fn plant_diagonal_ffn(&mut self, layer: usize, diag: Vec<f32>) -> Result<()> {
        if diag.len() != self.config.d_model {
            return Err(CapaError::InvalidArgument(format!(
                "diagonal of length {} for d_model {}",
                diag.len(),
                self.config.d_model
            )));
        }
        let l = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| CapaError::InvalidArgument(format!("no layer {layer}")))?;
        l.ffn = FfnBlock::Diagonal(diag);
        Ok(())
    }

    /// Zeroes every FFN down projection (the FFN then computes the zero map).
    pub fn zero_ffn(&mut self) {
        for l in &mut self.layers {
            if let FfnBlock::SwiGlu { down, .. } = &mut l.ffn {
                down.data_mut().fill(0.0);
            }
        }
    }

    pub fn zero_values(&mut self) {
        for l in &mut self.layers {
            l.wv.data_mut().fill(0.0);
        }
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut f = TensorFile::new();
        let mat = |name: String, t: &Tensor2D| {
            NamedTensor::new(name, vec![t.rows(), t.cols()], t.data().to_vec())
        };
        let vector = |name: String, v: &[f32]| NamedTensor::new(name, vec![v.len()], v.to_vec());
        f.push(mat("embed".into(), &self.embed)?);
        for (i, l) in self.layers.iter().enumerate() {
            f.push(vector(format!("layer.{i}.attn_norm"), &l.attn_norm)?);
            f.push(mat(format!("layer.{i}.wq"), &l.wq)?);
            f.push(mat(format!("layer.{i}.wk"), &l.wk)?);
            f.push(mat(format!("layer.{i}.wv"), &l.wv)?);
            f.push(mat(format!("layer.{i}.wo"), &l.wo)?);
            f.push(vector(format!("layer.{i}.ffn_norm"), &l.ffn_norm)?);
            match &l.ffn {
                FfnBlock::SwiGlu { gate, up, down } => {
                    f.push(mat(format!("layer.{i}.ffn.gate"), gate)?);
                    f.push(mat(format!("layer.{i}.ffn.up"), up)?);
                    f.push(mat(format!("layer.{i}.ffn.down"), down)?);
                }
                FfnBlock::Diagonal(diag) => f.push(vector(format!("layer.{i}.ffn.diag"), diag)?),
            }
        }
        f.push(vector("final_norm".into(), &self.final_norm)?);
        f.push(mat("unembed".into(), &self.unembed)?);
        Ok(f)
    }

    pub fn from_tensor_file(config: &ModelConfig, f: &TensorFile) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mat = |name: &str, rows: usize, cols: usize| -> Result<Tensor2D> {
            let t = f.require(name)?;
            if t.dims != [rows, cols] {
                return Err(CapaError::Format(format!(
                    "{name}: dims {:?}, expected [{rows}, {cols}]",
                    t.dims
                )));
            }
            Tensor2D::from_vec(rows, cols, t.data.clone())
        };
        let vector = |name: &str, n: usize| -> Result<Vec<f32>> {
            let t = f.require(name)?;
            if t.dims != [n] {
                return Err(CapaError::Format(format!(
                    "{name}: dims {:?}, expected [{n}]",
                    t.dims
                )));
            }
            Ok(t.data.clone())
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let ffn = if f.get(&format!("layer.{i}.ffn.diag")).is_some() {
                FfnBlock::Diagonal(vector(&format!("layer.{i}.ffn.diag"), d)?)
            } else {
                FfnBlock::SwiGlu {
                    gate: mat(&format!("layer.{i}.ffn.gate"), d, config.d_ff)?,
                    up: mat(&format!("layer.{i}.ffn.up"), d, config.d_ff)?,
                    down: mat(&format!("layer.{i}.ffn.down"), config.d_ff, d)?,
                }
            };
            layers.push(LayerWeights {
                attn_norm: vector(&format!("layer.{i}.attn_norm"), d)?,
                wq: mat(&format!("layer.{i}.wq"), d, d)?,
                wk: mat(&format!("layer.{i}.wk"), d, d)?,
                wv: mat(&format!("layer.{i}.wv"), d, d)?,
                wo: mat(&format!("layer.{i}.wo"), d, d)?,
                ffn_norm: vector(&format!("layer.{i}.ffn_norm"), d)?,
                ffn,
            });
        }
        if f.get(&format!("layer.{}.wq", config.n_layers)).is_some() {
            return Err(CapaError::Format(format!(
                "weight file has more than {} layers",
                config.n_layers
            )));
        }
        let w = Self {
            config: *config,
            embed: mat("embed", config.vocab_size, d)?,
            layers,
            final_norm: vector("final_norm", d)?,
            unembed: mat("unembed", d, config.vocab_size)?,
        };
        if !w.is_finite() {
            return Err(CapaError::Format("non-finite weight".into()));
        }
        Ok(w)
    }

    fn is_finite(&self) -> bool {
        self.embed.is_finite()
            && self.unembed.is_finite()
            && self.layers.iter().all(|l| {
                l.wq.is_finite()
                    && l.wk.is_finite()
                    && l.wv.is_finite()
                    && l.wo.is_finite()
                    && match &l.ffn {
                        FfnBlock::SwiGlu { gate, up, down } => {
                            gate.is_finite() && up.is_finite() && down.is_finite()
                        }
                        FfnBlock::Diagonal(v) => v.iter().all(|x| x.is_finite()),
                    }
            })
    }
}
