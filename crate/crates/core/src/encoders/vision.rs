use rand::Rng;
use serde::{Deserialize, Serialize};

use super::patch::{patch_grid, patchify, ImageGrid};
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::params::{Binder, ParamStore};
use crate::ssm::{BlockConfig, MambaBlock, Traversal};

/// Traversal used by every block of the vision encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderMode {
    /// Single raster-order pass; each token sees only its predecessors.
    Causal,
    /// Row/column, forward/backward passes averaged.
    MultiDir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub state: usize,
    /// Width of the pooled embedding used for contrastive alignment.
    pub embed_dim: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            width: 64,
            depth: 4,
            state: 16,
            embed_dim: 64,
        }
    }
}

impl VisionConfig {
    /// 192x192 input, 16x16 patches, 1024-wide tokens.
    pub fn reference() -> Self {
        Self {
            image_size: 192,
            patch: 16,
            width: 1024,
            depth: 24,
            state: 16,
            embed_dim: 512,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch;
        (g, g)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }
}

/// Fixed input standardization applied before the patch projection.
pub const PIXEL_MEAN: f64 = 0.25;
pub const PIXEL_STD: f64 = 0.25;

/// Patch-embedded tokens of one image with the grid they came from.
#[derive(Clone, Copy, Debug)]
pub struct VisualTokenSequence<'g> {
    pub tokens: Var<'g>,
    pub grid: (usize, usize),
}

/// Output of [`VisionEncoder::encode`].
pub struct VisionOutput<'g> {
    pub embedded: VisualTokenSequence<'g>,
    pub tokens: Var<'g>,
}

/// Patch embedding followed by a stack of Mamba blocks.
///
/// Parameters: `vision.patch_proj [P*P*3, D]`, `vision.pos [N, D]`,
/// `vision.blocks.{i}.*`, `vision.proj [D, E]`.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    cfg: VisionConfig,
    blocks: Vec<MambaBlock>,
}

impl VisionEncoder {
    pub fn new(cfg: VisionConfig) -> Self {
        let bc = BlockConfig::new(cfg.width, cfg.state);
        let blocks = (0..cfg.depth)
            .map(|i| MambaBlock::new(format!("vision.blocks.{i}"), bc))
            .collect();
        Self { cfg, blocks }
    }

    pub fn config(&self) -> &VisionConfig {
        &self.cfg
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let (pd, d, n) = (self.cfg.patch_dim(), self.cfg.width, self.cfg.num_patches());
        store.insert("vision.patch_proj", Tensor::randn(&[pd, d], 1.0 / (pd as f64).sqrt(), rng));
        store.insert("vision.pos", Tensor::randn(&[n, d], 0.02, rng));
        for b in &self.blocks {
            b.init(store, rng);
        }
        store.insert(
            "vision.proj",
            Tensor::randn(&[d, self.cfg.embed_dim], 1.0 / (d as f64).sqrt(), rng),
        );
    }

    /// `tokens = patches * proj + pos[..N]`; `embed` standardizes pixels first.
    pub fn embed_patches<'g>(
        &self,
        bind: &Binder<'g, '_>,
        patches: Var<'g>,
        grid: (usize, usize),
    ) -> Result<VisualTokenSequence<'g>> {
        let n = grid.0 * grid.1;
        if patches.shape() != [n, self.cfg.patch_dim()] {
            return Err(Error::shape(
                "embed_patches",
                format!("patches {:?} for grid {grid:?}", patches.shape()),
            ));
        }
        let pos = bind.param("vision.pos")?;
        let max = pos.shape()[0];
        if n > max {
            return Err(Error::contract(format!("{n} patches exceed {max} positions")));
        }
        let pos = if n == max { pos } else { pos.slice(0, 0, n)? };
        let tokens = patches.matmul(bind.param("vision.patch_proj")?)?.add(pos)?;
        Ok(VisualTokenSequence { tokens, grid })
    }

    pub fn embed<'g>(&self, bind: &Binder<'g, '_>, image: &ImageGrid) -> Result<VisualTokenSequence<'g>> {
        let grid = patch_grid(image.height(), image.width(), self.cfg.patch)?;
        let patches = patchify(image, self.cfg.patch)?.map(|v| (v - PIXEL_MEAN) / PIXEL_STD);
        self.embed_patches(bind, bind.constant(patches), grid)
    }

    /// Runs the block stack over already-embedded tokens.
    pub fn encode_tokens<'g>(
        &self,
        bind: &Binder<'g, '_>,
        tokens: Var<'g>,
        grid: Option<(usize, usize)>,
        mode: EncoderMode,
    ) -> Result<Var<'g>> {
        let n = tokens.shape()[0];
        let trav = match (mode, grid) {
            (EncoderMode::Causal, _) => Traversal::causal(n),
            (EncoderMode::MultiDir, Some(g)) => Traversal::four_way(g),
            (EncoderMode::MultiDir, None) => {
                return Err(Error::contract("multi-directional encoding needs the token grid"))
            }
        };
        self.encode_with(bind, tokens, &trav)
    }

    /// Runs the block stack with an explicit traversal.
    pub fn encode_with<'g>(&self, bind: &Binder<'g, '_>, tokens: Var<'g>, trav: &Traversal) -> Result<Var<'g>> {
        let mut h = tokens;
        for b in &self.blocks {
            h = b.forward(bind, h, trav)?;
        }
        Ok(h)
    }

    pub fn encode<'g>(&self, bind: &Binder<'g, '_>, image: &ImageGrid, mode: EncoderMode) -> Result<VisionOutput<'g>> {
        let embedded = self.embed(bind, image)?;
        let tokens = self.encode_tokens(bind, embedded.tokens, Some(embedded.grid), mode)?;
        Ok(VisionOutput { embedded, tokens })
    }

    /// Mean over tokens, projection, L2 normalization.
    pub fn pool<'g>(&self, bind: &Binder<'g, '_>, tokens: Var<'g>) -> Result<Var<'g>> {
        let mean = tokens.mean_axis(0)?.reshape(&[1, self.cfg.width])?;
        let proj = mean.matmul(bind.param("vision.proj")?)?;
        l2_normalize(proj.reshape(&[self.cfg.embed_dim])?)
    }
}

/// `x / ||x||` for a 1-D var.
pub fn l2_normalize(x: Var<'_>) -> Result<Var<'_>> {
    let norm = x.square().sum().sqrt()?;
    x.div(norm)
}
