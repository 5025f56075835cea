use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{ar_loss, contrastive_loss, mae_loss_baseline, ArHead, MaeDecoder};
use super::optim::{adamw_step, AdamW, OptimState, Schedule};
use crate::encoders::{EncoderMode, ImageGrid, Report, TextConfig, TextEncoder, VisionConfig, VisionEncoder};
use crate::error::{Error, Result};
use crate::numerics::{rms_norm_rows, Graph, Tensor, Var, RMS_EPS};
use crate::params::{accumulate_grads, scale_grads, Binder, ParamStore, Trainable};

pub const LOG_TAU: &str = "clip.log_tau";
pub const TAU_INIT: f64 = 0.07;
pub const TAU_RANGE: (f64, f64) = (0.01, 1.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    /// learning rate at batch 256; the peak is scaled by `batch / 256`
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch: 16,
            base_lr: 0.032,
            warmup_epochs: 1,
            weight_decay: 0.05,
            seed: 0,
        }
    }
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub params: ParamStore,
    pub log: Vec<EpochRecord>,
    /// learning rate used at every optimizer step
    pub lr_trace: Vec<f64>,
    pub steps: u64,
    /// optimizer moments after the last step
    pub optim: OptimState,
}

impl StageOutput {
    pub fn epoch_losses(&self, split: &str) -> Vec<f64> {
        self.log.iter().filter(|r| r.split == split).map(|r| r.loss).collect()
    }
}

/// Mean loss and mean gradients of one minibatch.
pub(crate) type BatchResult = (f64, BTreeMap<String, Tensor>);

pub(crate) fn clamp_temperature(store: &mut ParamStore) {
    if let Ok(t) = store.get_mut(LOG_TAU) {
        let (lo, hi) = (TAU_RANGE.0.ln(), TAU_RANGE.1.ln());
        for v in t.data_mut() {
            *v = v.clamp(lo, hi);
        }
    }
}

/// When held-out evaluation runs inside an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum EvalPoint {
    Mid,
    End,
}

/// Shuffled minibatch loop shared by every stage. `eval` runs after each epoch
/// (and halfway through it when `mid_epoch_eval` is set) and may append held-out records.
pub(crate) fn train_loop(
    stage: &str,
    store: &mut ParamStore,
    n_items: usize,
    cfg: &TrainConfig,
    mid_epoch_eval: bool,
    mut batch_fn: impl FnMut(&ParamStore, &[usize]) -> Result<BatchResult>,
    mut eval: impl FnMut(&ParamStore, usize, f64, EvalPoint) -> Result<Vec<EpochRecord>>,
) -> Result<StageOutput> {
    if n_items == 0 {
        return Err(Error::contract(format!("{stage}: empty training set")));
    }
    let batch = cfg.batch.clamp(1, n_items);
    let steps_per_epoch = n_items / batch;
    let sched = Schedule {
        base_lr: cfg.base_lr,
        warmup_epochs: cfg.warmup_epochs,
        total_epochs: cfg.epochs,
        steps_per_epoch,
        batch,
    };
    let mut opt = OptimState::new(AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut log = Vec::new();
    let mut lr_trace = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut lr = 0.0;
        for b in 0..steps_per_epoch {
            let at = step;
            let ctx = move |e: Error| Error::Training {
                epoch,
                step: at,
                source: Box::new(e),
            };
            let idx = &order[b * batch..(b + 1) * batch];
            let (loss, grads) = batch_fn(store, idx).map_err(ctx)?;
            lr = sched.lr_at(step).map_err(ctx)?;
            adamw_step(store, &grads, &mut opt, lr).map_err(ctx)?;
            clamp_temperature(store);
            lr_trace.push(lr);
            total += loss;
            step += 1;
            if mid_epoch_eval && b + 1 == steps_per_epoch / 2 && b + 1 < steps_per_epoch {
                log.extend(eval(store, epoch, lr, EvalPoint::Mid).map_err(ctx)?);
            }
        }
        let mean = total / steps_per_epoch as f64;
        log.push(EpochRecord {
            stage: stage.to_string(),
            epoch,
            split: "train".into(),
            loss: mean,
            lr,
            accuracy: None,
        });
        log.extend(eval(store, epoch, lr, EvalPoint::End).map_err(|e| Error::Training {
            epoch,
            step,
            source: Box::new(e),
        })?);
    }
    Ok(StageOutput {
        params: store.clone(),
        log,
        lr_trace,
        steps: opt.step,
        optim: opt,
    })
}

/// Runs `per_item` on its own tape for each index, averaging losses and gradients.
pub(crate) fn per_sample_batch(
    store: &ParamStore,
    idx: &[usize],
    trainable: &Trainable,
    per_item: impl for<'g> Fn(&Binder<'g, '_>, usize) -> Result<Var<'g>>,
) -> Result<BatchResult> {
    let mut acc = BTreeMap::new();
    let mut total = 0.0;
    for &i in idx {
        let g = Graph::new();
        let bind = Binder::new(&g, store, trainable.clone());
        let loss = per_item(&bind, i)?;
        total += loss.value().item()?;
        if loss.requires_grad() {
            let grads = g.backward(loss)?;
            accumulate_grads(&mut acc, bind.named_grads(&grads));
        }
    }
    scale_grads(&mut acc, 1.0 / idx.len() as f64);
    Ok((total / idx.len() as f64, acc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub vision: VisionConfig,
    pub train: TrainConfig,
}

fn ar_sample_loss<'g>(
    bind: &Binder<'g, '_>,
    enc: &VisionEncoder,
    head: &ArHead,
    image: &ImageGrid,
) -> Result<Var<'g>> {
    let out = enc.encode(bind, image, EncoderMode::Causal)?;
    // regression targets: embedded tokens, RMS-normalized per token and held fixed for this step
    let targets = bind.constant({
        let t = out.embedded.tokens.value();
        rms_norm_rows(&t, &vec![1.0; t.cols()], RMS_EPS)
    });
    ar_loss(bind, out.tokens, head, targets)
}

/// Autoregressive visual pre-training of a causal vision encoder.
pub fn run_stage1(images: &[&ImageGrid], val: &[&ImageGrid], cfg: &Stage1Config) -> Result<StageOutput> {
    let enc = VisionEncoder::new(cfg.vision.clone());
    let head = ArHead { width: cfg.vision.width };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    enc.init(&mut store, &mut rng);
    head.init(&mut store, &mut rng);
    let trainable = Trainable::All;
    train_loop(
        "stage1",
        &mut store,
        images.len(),
        &cfg.train,
        false,
        |store, idx| per_sample_batch(store, idx, &trainable, |b, i| ar_sample_loss(b, &enc, &head, images[i])),
        |store, epoch, lr, _| {
            if val.is_empty() {
                return Ok(Vec::new());
            }
            let mut total = 0.0;
            for img in val {
                let g = Graph::new();
                total += ar_sample_loss(&Binder::frozen(&g, store), &enc, &head, img)?.value().item()?;
            }
            Ok(vec![EpochRecord {
                stage: "stage1".into(),
                epoch,
                split: "val".into(),
                loss: total / val.len() as f64,
                lr,
                accuracy: None,
            }])
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaeConfig {
    pub vision: VisionConfig,
    pub train: TrainConfig,
    pub mask_ratio: f64,
}

/// Masked-autoencoding pre-training of the same vision encoder (comparison baseline).
pub fn run_mae(images: &[&ImageGrid], cfg: &MaeConfig) -> Result<StageOutput> {
    let v = &cfg.vision;
    let enc = VisionEncoder::new(v.clone());
    let dec = MaeDecoder::new(v.width, v.state, v.num_patches(), v.patch_dim());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    enc.init(&mut store, &mut rng);
    dec.init(&mut store, &mut rng);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    mask_rng.set_stream(2);
    let mask_rng = std::cell::RefCell::new(mask_rng);
    let trainable = Trainable::All;
    train_loop(
        "mae",
        &mut store,
        images.len(),
        &cfg.train,
        false,
        |store, idx| {
            per_sample_batch(store, idx, &trainable, |b, i| {
                mae_loss_baseline(b, images[i], cfg.mask_ratio, &enc, &dec, &mut *mask_rng.borrow_mut())
            })
        },
        |_, _, _, _| Ok(Vec::new()),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub vision: VisionConfig,
    pub text: TextConfig,
    pub train: TrainConfig,
    /// `false` binds every parameter as a constant
    pub trainable: bool,
}

/// Image and text encoders that share one parameter store.
pub struct DualEncoder {
    pub vision: VisionEncoder,
    pub text: TextEncoder,
}

impl DualEncoder {
    pub fn new(vision: VisionConfig, text: TextConfig) -> Self {
        Self {
            vision: VisionEncoder::new(vision),
            text: TextEncoder::new(text),
        }
    }

    /// `[B, E]` image and text embeddings.
    pub fn embed_batch<'g>(
        &self,
        bind: &Binder<'g, '_>,
        pairs: &[(&ImageGrid, &Report)],
    ) -> Result<(Var<'g>, Var<'g>)> {
        let e = self.vision.config().embed_dim;
        let mut imgs = Vec::with_capacity(pairs.len());
        let mut txts = Vec::with_capacity(pairs.len());
        for (img, rep) in pairs {
            let out = self.vision.encode(bind, img, EncoderMode::MultiDir)?;
            imgs.push(self.vision.pool(bind, out.tokens)?.reshape(&[1, e])?);
            txts.push(self.text.encode(bind, rep)?.reshape(&[1, e])?);
        }
        Ok((Var::concat(&imgs, 0)?, Var::concat(&txts, 0)?))
    }

    pub fn loss<'g>(&self, bind: &Binder<'g, '_>, pairs: &[(&ImageGrid, &Report)]) -> Result<Var<'g>> {
        let (img, txt) = self.embed_batch(bind, pairs)?;
        let tau = bind.param(LOG_TAU)?.exp();
        contrastive_loss(img, txt, tau)
    }

    /// Cosine similarity matrix, images by rows.
    pub fn similarity(&self, store: &ParamStore, pairs: &[(&ImageGrid, &Report)]) -> Result<Tensor> {
        let g = Graph::new();
        let bind = Binder::frozen(&g, store);
        let (img, txt) = self.embed_batch(&bind, pairs)?;
        Ok(img.matmul(txt.transpose()?)?.value().as_ref().clone())
    }
}

/// Fraction of rows whose largest entry is on the diagonal (lowest index wins ties).
pub fn top1_accuracy(sim: &Tensor) -> f64 {
    let n = sim.rows();
    let hits = (0..n)
        .filter(|&i| {
            let row = sim.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == i
        })
        .count();
    hits as f64 / n as f64
}

/// Image-report contrastive training from a stage-1 checkpoint, multi-directional encoder.
pub fn run_stage2(
    pairs: &[(&ImageGrid, &Report)],
    heldout: &[(&ImageGrid, &Report)],
    stage1: &ParamStore,
    cfg: &Stage2Config,
) -> Result<StageOutput> {
    let model = DualEncoder::new(cfg.vision.clone(), cfg.text.clone());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    model.vision.init(&mut store, &mut rng);
    model.text.init(&mut store, &mut rng);
    store.insert(LOG_TAU, Tensor::scalar(TAU_INIT.ln()));
    store.load_prefix(stage1, "vision.")?;
    let trainable = if cfg.trainable { Trainable::All } else { Trainable::Nothing };
    train_loop(
        "stage2",
        &mut store,
        pairs.len(),
        &cfg.train,
        false,
        |store, idx| {
            let batch: Vec<_> = idx.iter().map(|&i| pairs[i]).collect();
            let g = Graph::new();
            let bind = Binder::new(&g, store, trainable.clone());
            let loss = model.loss(&bind, &batch)?;
            let grads = if loss.requires_grad() {
                bind.named_grads(&g.backward(loss)?)
            } else {
                BTreeMap::new()
            };
            Ok((loss.value().item()?, grads))
        },
        |store, epoch, lr, _| {
            if heldout.len() < 2 {
                return Ok(Vec::new());
            }
            let g = Graph::new();
            let loss = model.loss(&Binder::frozen(&g, store), heldout)?.value().item()?;
            let acc = top1_accuracy(&model.similarity(store, heldout)?);
            Ok(vec![EpochRecord {
                stage: "stage2".into(),
                epoch,
                split: "heldout".into(),
                loss,
                lr,
                accuracy: Some(acc),
            }])
        },
    )
}
