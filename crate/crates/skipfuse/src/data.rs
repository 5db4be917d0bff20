//! Procedural image-text pairs.
//!
//! Each image is a flat background with one colored rectangle whose cell
//! position and palette color are drawn from the pair's parameters; the
//! caption is the deterministic token string naming those parameters, so
//! matched pairs share all information.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::encoders::CONTENT_BASE;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

const N_COLORS: usize = 6;
const GRID: usize = 4;

const PALETTE: [[f64; 3]; N_COLORS] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.9, 0.1],
    [0.1, 0.1, 0.9],
    [0.9, 0.9, 0.1],
    [0.1, 0.9, 0.9],
    [0.9, 0.1, 0.9],
];

/// Parameters shared by an image and its caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSpec {
    pub color: usize,
    pub row: usize,
    pub col: usize,
}

impl PairSpec {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            color: rng.random_range(0..N_COLORS),
            row: rng.random_range(0..GRID),
            col: rng.random_range(0..GRID),
        }
    }

    /// Caption tokens: one token per parameter, disjoint id ranges.
    pub fn caption(&self) -> Vec<usize> {
        vec![
            CONTENT_BASE + self.color,
            CONTENT_BASE + N_COLORS + self.row,
            CONTENT_BASE + N_COLORS + GRID + self.col,
        ]
    }

    pub fn render<E: Element>(&self, cfg: &ModelConfig) -> Tensor<E> {
        let hw = cfg.image_size;
        let cell = hw / GRID;
        let mut data = vec![E::from_real(0.05); cfg.channels * hw * hw];
        for ch in 0..cfg.channels {
            let level = E::from_real(PALETTE[self.color][ch % 3]);
            for y in self.row * cell..(self.row + 1) * cell {
                for x in self.col * cell..(self.col + 1) * cell {
                    data[ch * hw * hw + y * hw + x] = level;
                }
            }
        }
        Tensor::new(vec![cfg.channels, hw, hw], data).expect("image shape")
    }
}

/// Aligned image-text pairs: image i matches caption i.
pub struct Batch<E: Element> {
    pub images: Vec<Tensor<E>>,
    pub token_ids: Vec<Vec<usize>>,
}

impl<E: Element> Batch<E> {
    pub fn from_specs(cfg: &ModelConfig, specs: &[PairSpec]) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::EmptyBatch("no pairs".into()));
        }
        Ok(Self {
            images: specs.iter().map(|s| s.render(cfg)).collect(),
            token_ids: specs.iter().map(|s| s.caption()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            token_ids: indices.iter().map(|&i| self.token_ids[i].clone()).collect(),
        }
    }
}

pub fn synthetic_pairs<E: Element>(
    cfg: &ModelConfig,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch<E>> {
    let specs: Vec<PairSpec> = (0..n).map(|_| PairSpec::sample(rng)).collect();
    Batch::from_specs(cfg, &specs)
}
