use rand::seq::index::sample;
use rand::Rng;

use crate::encoders::{patchify, ImageGrid, VisionEncoder};
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var, RMS_EPS};
use crate::params::{Binder, ParamStore};
use crate::ssm::{BlockConfig, MambaBlock, Traversal};

/// Mean squared error between `pred[i]` and `target[i + 1]` over `i < N - 1` and all channels.
pub fn shifted_mse<'g>(pred: Var<'g>, target: Var<'g>) -> Result<Var<'g>> {
    let shape = pred.shape();
    if shape.len() != 2 || target.shape() != shape {
        return Err(Error::shape(
            "ar_loss",
            format!("prediction {shape:?} vs target {:?}", target.shape()),
        ));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::contract(format!("autoregressive loss needs N >= 2 tokens, got {n}")));
    }
    let diff = pred.slice(0, 0, n - 1)?.sub(target.slice(0, 1, n)?)?;
    Ok(diff.square().mean())
}

/// Next-token regression head: `silu(rms(x) W1) W2`, D -> D.
///
/// Parameters: `ar_head.gain [D]`, `ar_head.w1 [D, D]`, `ar_head.w2 [D, D]`.
#[derive(Clone, Debug)]
pub struct ArHead {
    pub width: usize,
}

impl ArHead {
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.width;
        let s = 1.0 / (d as f64).sqrt();
        store.insert("ar_head.gain", Tensor::ones(&[d]));
        store.insert("ar_head.w1", Tensor::randn(&[d, d], s, rng));
        store.insert("ar_head.w2", Tensor::randn(&[d, d], s, rng));
    }

    pub fn forward<'g>(&self, bind: &Binder<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        x.rms_norm(bind.param("ar_head.gain")?, RMS_EPS)?
            .matmul(bind.param("ar_head.w1")?)?
            .silu()
            .matmul(bind.param("ar_head.w2")?)
    }
}

/// Squared-error next visual token prediction: `mean ||head(encoded_i) - targets_{i+1}||^2`.
pub fn ar_loss<'g>(bind: &Binder<'g, '_>, encoded: Var<'g>, head: &ArHead, targets: Var<'g>) -> Result<Var<'g>> {
    shifted_mse(head.forward(bind, encoded)?, targets)
}

fn assert_unit_rows(name: &str, t: &Tensor) -> Result<()> {
    for r in 0..t.rows() {
        let norm = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!("{name} row {r} has norm {norm}, expected 1")));
        }
    }
    Ok(())
}

/// Symmetric InfoNCE over in-batch pairs, `logits = img txt^T / tau`.
pub fn contrastive_loss<'g>(img: Var<'g>, txt: Var<'g>, tau: Var<'g>) -> Result<Var<'g>> {
    let shape = img.shape();
    if shape.len() != 2 || txt.shape() != shape {
        return Err(Error::shape(
            "contrastive_loss",
            format!("image {shape:?} vs text {:?}", txt.shape()),
        ));
    }
    let b = shape[0];
    if b < 2 {
        return Err(Error::contract(format!("contrastive loss needs B >= 2, got {b}")));
    }
    if tau.value().len() != 1 || tau.value().data()[0] <= 0.0 {
        return Err(Error::contract("temperature must be a positive scalar"));
    }
    assert_unit_rows("image embedding", &img.value())?;
    assert_unit_rows("text embedding", &txt.value())?;
    let logits = img.matmul(txt.transpose()?)?.div(tau.reshape(&[])?)?;
    let eye = img.graph().constant(Tensor::eye(b));
    let rows = logits.log_softmax().mul(eye)?.sum();
    let cols = logits.transpose()?.log_softmax().mul(eye)?.sum();
    Ok(rows.add(cols)?.scale(-0.5 / b as f64))
}

/// `floor(ratio * n)` distinct patch indices, sorted.
pub fn random_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::contract(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let k = (ratio * n as f64).floor() as usize;
    if k == 0 || k == n {
        return Err(Error::contract(format!("mask of {k} out of {n} patches is degenerate")));
    }
    let mut idx = sample(rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Mean squared error over the rows listed in `masked`.
pub fn masked_mse<'g>(pred: Var<'g>, target: Var<'g>, masked: &[usize]) -> Result<Var<'g>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mae_loss",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    if masked.is_empty() {
        return Err(Error::contract("no masked patches"));
    }
    Ok(pred.gather_rows(masked)?.sub(target.gather_rows(masked)?)?.square().mean())
}

/// Light reconstruction decoder for the masked-autoencoding baseline.
///
/// Parameters: `mae.mask_token [D]`, `mae.pos [N, D]`, `mae.block.*`, `mae.out [D, P*P*3]`.
#[derive(Clone, Debug)]
pub struct MaeDecoder {
    width: usize,
    tokens: usize,
    patch_dim: usize,
    block: MambaBlock,
}

impl MaeDecoder {
    pub fn new(width: usize, state: usize, tokens: usize, patch_dim: usize) -> Self {
        Self {
            width,
            tokens,
            patch_dim,
            block: MambaBlock::new("mae.block", BlockConfig::new(width, state)),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.width;
        store.insert("mae.mask_token", Tensor::randn(&[d], 0.02, rng));
        store.insert("mae.pos", Tensor::randn(&[self.tokens, d], 0.02, rng));
        self.block.init(store, rng);
        store.insert("mae.out", Tensor::randn(&[d, self.patch_dim], 1.0 / (d as f64).sqrt(), rng));
    }

    /// Scatters encoded visible tokens back among mask tokens and predicts every patch.
    pub fn forward<'g>(&self, bind: &Binder<'g, '_>, visible: Var<'g>, keep: &[usize], n: usize) -> Result<Var<'g>> {
        let mask_tok = bind.param("mae.mask_token")?.reshape(&[1, self.width])?;
        let pool = Var::concat(&[visible, mask_tok], 0)?;
        let mut src = vec![keep.len(); n];
        for (rank, &i) in keep.iter().enumerate() {
            src[i] = rank;
        }
        let pos = bind.param("mae.pos")?.slice(0, 0, n)?;
        let full = pool.gather_rows(&src)?.add(pos)?;
        let h = self.block.forward(bind, full, &Traversal::bidirectional(n))?;
        h.matmul(bind.param("mae.out")?)
    }
}

/// Masked-patch reconstruction loss: the encoder sees only visible patches
/// (bidirectional traversal), the decoder reconstructs raw pixels of the masked ones.
pub fn mae_loss_baseline<'g, R: Rng + ?Sized>(
    bind: &Binder<'g, '_>,
    image: &ImageGrid,
    mask_ratio: f64,
    encoder: &VisionEncoder,
    decoder: &MaeDecoder,
    rng: &mut R,
) -> Result<Var<'g>> {
    let embedded = encoder.embed(bind, image)?;
    let n = embedded.tokens.shape()[0];
    let masked = random_mask(n, mask_ratio, rng)?;
    let keep: Vec<usize> = (0..n).filter(|i| masked.binary_search(i).is_err()).collect();
    let visible = embedded.tokens.gather_rows(&keep)?;
    let encoded = encoder.encode_with(bind, visible, &Traversal::bidirectional(keep.len()))?;
    let pred = decoder.forward(bind, encoded, &keep, n)?;
    let target = bind.constant(patchify(image, encoder.config().patch)?);
    masked_mse(pred, target, &masked)
}
