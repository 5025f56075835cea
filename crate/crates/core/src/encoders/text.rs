use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vision::l2_normalize;
use super::vocab::Report;
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::params::{Binder, ParamStore};
use crate::ssm::{BlockConfig, MambaBlock, Traversal};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub depth: usize,
    pub state: usize,
    pub max_len: usize,
    pub embed_dim: usize,
}

impl TextConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            width: 64,
            depth: 2,
            state: 16,
            max_len: 128,
            embed_dim: 64,
        }
    }
}

/// Small bidirectional Mamba text encoder.
///
/// Parameters: `text.tok_emb [V, D]`, `text.pos [max_len, D]`, `text.blocks.{i}.*`, `text.proj [D, E]`.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    cfg: TextConfig,
    blocks: Vec<MambaBlock>,
}

impl TextEncoder {
    pub fn new(cfg: TextConfig) -> Self {
        let bc = BlockConfig::new(cfg.width, cfg.state);
        let blocks = (0..cfg.depth)
            .map(|i| MambaBlock::new(format!("text.blocks.{i}"), bc))
            .collect();
        Self { cfg, blocks }
    }

    pub fn config(&self) -> &TextConfig {
        &self.cfg
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.cfg.width;
        store.insert("text.tok_emb", Tensor::randn(&[self.cfg.vocab_size, d], 0.1, rng));
        store.insert("text.pos", Tensor::randn(&[self.cfg.max_len, d], 0.02, rng));
        for b in &self.blocks {
            b.init(store, rng);
        }
        store.insert(
            "text.proj",
            Tensor::randn(&[d, self.cfg.embed_dim], 1.0 / (d as f64).sqrt(), rng),
        );
    }

    /// Token states `[L, D]` for an id sequence.
    pub fn encode_ids<'g>(&self, bind: &Binder<'g, '_>, ids: &[usize]) -> Result<Var<'g>> {
        let n = ids.len();
        if n == 0 || n > self.cfg.max_len {
            return Err(Error::contract(format!(
                "text length {n} outside 1..={}",
                self.cfg.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        let emb = bind.param("text.tok_emb")?.gather_rows(ids)?;
        let pos = bind.param("text.pos")?.slice(0, 0, n)?;
        let mut h = emb.add(pos)?;
        let trav = Traversal::bidirectional(n);
        for b in &self.blocks {
            h = b.forward(bind, h, &trav)?;
        }
        Ok(h)
    }

    /// Mean pool, projection, L2 normalization.
    pub fn encode<'g>(&self, bind: &Binder<'g, '_>, report: &Report) -> Result<Var<'g>> {
        let ids = if report.ids.len() > self.cfg.max_len {
            &report.ids[..self.cfg.max_len]
        } else {
            &report.ids[..]
        };
        let h = self.encode_ids(bind, ids)?;
        let mean = h.mean_axis(0)?.reshape(&[1, self.cfg.width])?;
        let proj = mean.matmul(bind.param("text.proj")?)?;
        l2_normalize(proj.reshape(&[self.cfg.embed_dim])?)
    }
}
