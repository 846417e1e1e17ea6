use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CapaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Text,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Text => "text",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Token ids with modality tags and original position indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    ids: Vec<u32>,
    modality: Vec<Modality>,
    positions: Vec<usize>,
}

impl TokenStream {
    /// Positions default to `0..n`.
    pub fn new(ids: Vec<u32>, modality: Vec<Modality>) -> Result<Self> {
        let positions = (0..ids.len()).collect();
        Self::with_positions(ids, modality, positions)
    }

    pub fn with_positions(
        ids: Vec<u32>,
        modality: Vec<Modality>,
        positions: Vec<usize>,
    ) -> Result<Self> {
        if ids.len() != modality.len() || ids.len() != positions.len() {
            return Err(CapaError::InvalidArgument(format!(
                "token stream lengths differ: ids {}, modality {}, positions {}",
                ids.len(),
                modality.len(),
                positions.len()
            )));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CapaError::InvalidArgument(
                "token positions must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            ids,
            modality,
            positions,
        })
    }

    /// Visual block followed by a text block.
    pub fn visual_then_text(visual: &[u32], text: &[u32]) -> Self {
        let ids: Vec<u32> = visual.iter().chain(text).copied().collect();
        let modality = std::iter::repeat_n(Modality::Visual, visual.len())
            .chain(std::iter::repeat_n(Modality::Text, text.len()))
            .collect();
        Self::new(ids, modality).expect("lengths agree by construction")
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn modality(&self) -> &[Modality] {
        &self.modality
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn n_visual(&self) -> usize {
        self.modality
            .iter()
            .filter(|m| **m == Modality::Visual)
            .count()
    }

    pub fn n_text(&self) -> usize {
        self.len() - self.n_visual()
    }

    pub fn next_position(&self) -> usize {
        self.positions.iter().max().map_or(0, |p| p + 1)
    }

    /// Reorders tokens by `order`, carrying each token's position along.
    /// The result is generally not position-sorted; it is meant for
    /// bidirectional probe passes.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        if order.len() != self.len()
            || order
                .iter()
                .any(|&i| i >= self.len() || std::mem::replace(&mut seen[i], true))
        {
            return Err(CapaError::InvalidArgument(
                "order is not a permutation of the stream".into(),
            ));
        }
        Ok(Self {
            ids: order.iter().map(|&i| self.ids[i]).collect(),
            modality: order.iter().map(|&i| self.modality[i]).collect(),
            positions: order.iter().map(|&i| self.positions[i]).collect(),
        })
    }

    /// Appends a token at the next original position.
    pub fn push(&mut self, id: u32, modality: Modality) {
        let pos = self.next_position();
        self.ids.push(id);
        self.modality.push(modality);
        self.positions.push(pos);
    }

    /// Keeps only tokens whose position is listed in `keep` (sorted ascending).
    pub fn retain_positions(&self, keep: &[usize]) -> Self {
        let mut out = Self {
            ids: Vec::new(),
            modality: Vec::new(),
            positions: Vec::new(),
        };
        for i in 0..self.len() {
            if keep.binary_search(&self.positions[i]).is_ok() {
                out.ids.push(self.ids[i]);
                out.modality.push(self.modality[i]);
                out.positions.push(self.positions[i]);
            }
        }
        out
    }
}

/// `n` seeded prompts of `n_img` visual tokens followed by `n_txt` text
/// tokens. Visual ids come from the upper half of the vocabulary and text
/// ids from the lower half, so the two modalities have disjoint embeddings.
pub fn synthetic_streams(
    n: usize,
    seed: u64,
    n_img: usize,
    n_txt: usize,
    vocab_size: usize,
) -> Result<Vec<TokenStream>> {
    if n == 0 {
        return Err(CapaError::InvalidArgument(
            "need at least one stream".into(),
        ));
    }
    if n_img + n_txt == 0 {
        return Err(CapaError::InvalidArgument("streams would be empty".into()));
    }
    if vocab_size < 2 {
        return Err(CapaError::InvalidArgument(
            "vocabulary too small to split".into(),
        ));
    }
    let half = (vocab_size / 2) as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let visual: Vec<u32> = (0..n_img)
                .map(|_| rng.random_range(half..vocab_size as u32))
                .collect();
            let text: Vec<u32> = (0..n_txt).map(|_| rng.random_range(0..half)).collect();
            TokenStream::visual_then_text(&visual, &text)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_lengths_and_order() {
        assert!(TokenStream::new(vec![1, 2], vec![Modality::Text]).is_err());
        assert!(
            TokenStream::with_positions(vec![1, 2], vec![Modality::Text; 2], vec![3, 3]).is_err()
        );
        let s = TokenStream::visual_then_text(&[5, 6, 7], &[1]);
        assert_eq!(s.n_visual(), 3);
        assert_eq!(s.n_text(), 1);
        assert_eq!(s.positions(), &[0, 1, 2, 3]);
    }

    #[test]
    fn retain_keeps_original_positions() {
        let s = TokenStream::visual_then_text(&[5, 6, 7], &[1, 2]);
        let r = s.retain_positions(&[1, 3, 4]);
        assert_eq!(r.positions(), &[1, 3, 4]);
        assert_eq!(r.ids(), &[6, 1, 2]);
        assert_eq!(r.next_position(), 5);
    }
}
