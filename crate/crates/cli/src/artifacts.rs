//! On-disk artifacts: model directories, calibration sets, alpha files and
//! report headers.

use std::fs;
use std::path::{Path, PathBuf};

use capa_core::hadamard::{alphas_from_tensor_file, alphas_to_tensor_file, AlphaVector};
use capa_core::io::{NamedTensor, TensorFile};
use capa_core::model::{Modality, ModelConfig, ModelWeights, TokenStream};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult, StageExt};

pub const CONFIG_FILE: &str = "config.txt";
pub const WEIGHTS_FILE: &str = "weights.capt";

/// Weights plus the config text they were built from.
pub struct LoadedModel {
    pub weights: ModelWeights,
    pub config_text: String,
}

impl LoadedModel {
    /// `# capa-version=..., seed=..., config-hash=...`
    pub fn header(&self) -> String {
        report_header(self.weights.config.seed, &self.config_text)
    }
}

pub fn report_header(seed: u64, config_text: &str) -> String {
    format!(
        "# capa-version={}, seed={seed}, config-hash={}",
        env!("CARGO_PKG_VERSION"),
        sha256_hex(config_text.as_bytes())
    )
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

pub fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("missing file {}", path.display())))
    }
}

pub fn write_file(path: &Path, bytes: &[u8], stage: &'static str) -> CliResult<PathBuf> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).stage(stage)?;
    }
    fs::write(path, bytes).stage(stage)?;
    Ok(path.to_path_buf())
}

pub fn print_hashes(paths: &[PathBuf]) -> CliResult<()> {
    for p in paths {
        println!("{}  {}", sha256_file(p)?, p.display());
    }
    Ok(())
}

pub fn save_model(dir: &Path, w: &ModelWeights) -> CliResult<Vec<PathBuf>> {
    let bytes = w.to_tensor_file().stage("gen")?.to_bytes().stage("gen")?;
    Ok(vec![
        write_file(&dir.join(CONFIG_FILE), w.config.to_text().as_bytes(), "gen")?,
        write_file(&dir.join(WEIGHTS_FILE), &bytes, "gen")?,
    ])
}

pub fn load_model_files(config: &Path, weights: &Path) -> CliResult<LoadedModel> {
    require_file(config)?;
    require_file(weights)?;
    let config_text = fs::read_to_string(config)
        .map_err(|e| CliError::Config(format!("{}: {e}", config.display())))?;
    let cfg = ModelConfig::from_text(&config_text).map_err(CliError::config)?;
    let file = TensorFile::load(weights).map_err(CliError::config)?;
    let weights = ModelWeights::from_tensor_file(&cfg, &file).map_err(CliError::config)?;
    Ok(LoadedModel {
        weights,
        config_text,
    })
}

pub fn load_model(dir: &Path) -> CliResult<LoadedModel> {
    load_model_files(&dir.join(CONFIG_FILE), &dir.join(WEIGHTS_FILE))
}

fn as_f32(v: usize) -> f32 {
    v as f32
}

/// Integer-valued tensor entries, exact below 2^24.
fn as_index(v: f32, what: &str) -> CliResult<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
        Ok(v as usize)
    } else {
        Err(CliError::Config(format!("bad {what} entry {v}")))
    }
}

pub fn streams_to_file(streams: &[TokenStream]) -> CliResult<TensorFile> {
    let mut f = TensorFile::new();
    for (i, s) in streams.iter().enumerate() {
        let n = s.len();
        let ids = s.ids().iter().map(|&v| as_f32(v as usize)).collect();
        let modality = s
            .modality()
            .iter()
            .map(|m| match m {
                Modality::Visual => 0.0,
                Modality::Text => 1.0,
            })
            .collect();
        let positions = s.positions().iter().map(|&p| as_f32(p)).collect();
        for (suffix, data) in [
            ("ids", ids),
            ("modality", modality),
            ("positions", positions),
        ] {
            f.push(
                NamedTensor::new(format!("stream.{i}.{suffix}"), vec![n], data)
                    .stage("gen-calib")?,
            );
        }
    }
    Ok(f)
}

pub fn streams_from_file(f: &TensorFile) -> CliResult<Vec<TokenStream>> {
    let mut out = Vec::new();
    for i in 0.. {
        let Some(ids) = f.get(&format!("stream.{i}.ids")) else {
            break;
        };
        let get = |s: &str| {
            f.require(&format!("stream.{i}.{s}"))
                .map_err(CliError::config)
        };
        let modality = get("modality")?;
        let positions = get("positions")?;
        let ids = ids
            .data
            .iter()
            .map(|&v| as_index(v, "token id").map(|v| v as u32))
            .collect::<CliResult<Vec<_>>>()?;
        let modality = modality
            .data
            .iter()
            .map(|&v| match v {
                0.0 => Ok(Modality::Visual),
                1.0 => Ok(Modality::Text),
                _ => Err(CliError::Config(format!("bad modality entry {v}"))),
            })
            .collect::<CliResult<Vec<_>>>()?;
        let positions = positions
            .data
            .iter()
            .map(|&v| as_index(v, "position"))
            .collect::<CliResult<Vec<_>>>()?;
        out.push(TokenStream::with_positions(ids, modality, positions).map_err(CliError::config)?);
    }
    if out.is_empty() {
        return Err(CliError::Config("calibration file holds no streams".into()));
    }
    Ok(out)
}

pub fn load_streams(path: &Path) -> CliResult<Vec<TokenStream>> {
    require_file(path)?;
    streams_from_file(&TensorFile::load(path).map_err(CliError::config)?)
}

pub fn alphas_bytes(alphas: &[AlphaVector]) -> CliResult<Vec<u8>> {
    alphas_to_tensor_file(alphas)
        .and_then(|f| f.to_bytes())
        .stage("calibrate")
}

pub fn load_alphas(path: &Path) -> CliResult<Vec<AlphaVector>> {
    require_file(path)?;
    let f = TensorFile::load(path).map_err(CliError::config)?;
    alphas_from_tensor_file(&f).map_err(CliError::config)
}
