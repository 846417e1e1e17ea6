use super::tokens::Modality;
use crate::error::{CapaError, Result};
use crate::tensor::Tensor2D;

/// Cached keys and values of one layer. Heads are column blocks of width
/// `d_head`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub keys: Tensor2D,
    pub values: Tensor2D,
    pub positions: Vec<usize>,
    pub modality: Vec<Modality>,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub(crate) fn push(&mut self, k: &[f32], v: &[f32], pos: usize, m: Modality) -> Result<()> {
        self.keys.push_row(k)?;
        self.values.push_row(v)?;
        self.positions.push(pos);
        self.modality.push(m);
        Ok(())
    }

    fn retain(&self, keep: &[usize]) -> Self {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| keep.binary_search(&self.positions[i]).is_ok())
            .collect();
        Self {
            keys: self.keys.select_rows(&idx),
            values: self.values.select_rows(&idx),
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            modality: idx.iter().map(|&i| self.modality[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
    /// Original position the next appended token receives.
    pub next_position: usize,
}

impl KvCache {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Drops cached rows whose position is not in `keep` from every layer
    /// `>= from_layer`. `keep` must be sorted ascending.
    pub fn retain_from(&self, keep: &[usize], from_layer: usize) -> Result<Self> {
        if keep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CapaError::InvalidArgument(
                "keep set must be sorted without duplicates".into(),
            ));
        }
        if let Some(&bad) = keep.iter().find(|&&p| p >= self.next_position) {
            return Err(CapaError::InvalidArgument(format!(
                "keep index {bad} is beyond the cached sequence"
            )));
        }
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                if i >= from_layer {
                    l.retain(keep)
                } else {
                    l.clone()
                }
            })
            .collect();
        Ok(Self {
            layers,
            next_position: self.next_position,
        })
    }

    pub fn check_consistent(&self) -> bool {
        self.layers.iter().all(|l| {
            l.keys.rows() == l.len() && l.values.rows() == l.len() && l.modality.len() == l.len()
        })
    }
}
