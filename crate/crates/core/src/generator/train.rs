use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decoder::{sft_loss, DecoderConfig, ReportDecoder, MAPPER_PREFIX};
use crate::encoders::{EncoderMode, ImageGrid, Report, VisionConfig, VisionEncoder};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};
use crate::params::{Binder, ParamStore, Trainable};
use crate::pretrain::{per_sample_batch, train_loop, EpochRecord, EvalPoint, StageOutput, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub vision: VisionConfig,
    pub decoder: DecoderConfig,
    /// schedule of the main phase, frozen decoder when `decoder.freeze_decoder`
    pub train: TrainConfig,
    /// epochs of the preceding phase in which the decoder also trains
    pub warm_epochs: usize,
    /// whether the vision encoder also trains during the warm phase
    pub warm_vision: bool,
    /// traversal of the visual encoder
    pub mode: EncoderMode,
}

#[derive(Clone, Debug)]
pub struct SftOutput {
    pub stage: StageOutput,
    /// training pairs dropped because the report exceeds `max_length`
    pub rejected: usize,
}

/// Visual tokens of `image`, then the teacher-forced NLL of `report`.
pub fn sft_sample_loss<'g>(
    bind: &Binder<'g, '_>,
    vision: &VisionEncoder,
    decoder: &ReportDecoder,
    mode: EncoderMode,
    prompt_ids: &[usize],
    image: &ImageGrid,
    report: &Report,
) -> Result<Var<'g>> {
    let visual = vision.encode(bind, image, mode)?.tokens;
    sft_loss(bind, decoder, visual, prompt_ids, report)
}

/// Whether the report fits the generation budget, eos included.
pub fn fits(report: &Report, max_length: usize) -> bool {
    report.ids.len().saturating_sub(1) <= max_length
}

/// Mean NLL over `pairs` with nothing trainable.
pub fn mean_nll(
    store: &ParamStore,
    vision: &VisionEncoder,
    decoder: &ReportDecoder,
    mode: EncoderMode,
    prompt_ids: &[usize],
    pairs: &[(&ImageGrid, &Report)],
) -> Result<f64> {
    let mut total = 0.0;
    for (img, rep) in pairs {
        let g = Graph::new();
        let bind = Binder::frozen(&g, store);
        total += sft_sample_loss(&bind, vision, decoder, mode, prompt_ids, img, rep)?
            .value()
            .item()?;
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Fresh decoder and vision weights, with every `vision.` tensor of `init` copied in.
pub fn init_sft_store(cfg: &SftConfig, init: Option<&ParamStore>) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    VisionEncoder::new(cfg.vision.clone()).init(&mut store, &mut rng);
    ReportDecoder::new(cfg.decoder.clone()).init(&mut store, &mut rng);
    if let Some(init) = init {
        store.load_prefix(init, "vision.")?;
    }
    Ok(store)
}

/// Supervised fine-tuning: a warm phase with everything trainable, then the main phase
/// in which only the vision encoder and the visual mapper train when the decoder is frozen.
///
/// `prompt_ids` must be the prompt tokenized with the vocabulary the reports were built with.
pub fn train_sft(
    train: &[(&ImageGrid, &Report)],
    val: &[(&ImageGrid, &Report)],
    init: Option<&ParamStore>,
    prompt_ids: &[usize],
    cfg: &SftConfig,
) -> Result<SftOutput> {
    let max_len = cfg.decoder.max_length;
    if max_len < 2 {
        return Err(Error::Config(format!("max_length {max_len} < 2")));
    }
    let kept: Vec<(&ImageGrid, &Report)> = train.iter().copied().filter(|(_, r)| fits(r, max_len)).collect();
    let rejected = train.len() - kept.len();
    let val: Vec<(&ImageGrid, &Report)> = val.iter().copied().filter(|(_, r)| fits(r, max_len)).collect();

    let vision = VisionEncoder::new(cfg.vision.clone());
    let decoder = ReportDecoder::new(cfg.decoder.clone());
    let mut store = init_sft_store(cfg, init)?;
    let mode = cfg.mode;

    let run_phase = |store: &mut ParamStore, stage: &str, tc: &TrainConfig, trainable: Trainable| {
        train_loop(
            stage,
            store,
            kept.len(),
            tc,
            true,
            |store, idx| {
                per_sample_batch(store, idx, &trainable, |b, i| {
                    sft_sample_loss(b, &vision, &decoder, mode, prompt_ids, kept[i].0, kept[i].1)
                })
            },
            |store, epoch, lr, at| {
                if val.is_empty() {
                    return Ok(Vec::new());
                }
                Ok(vec![EpochRecord {
                    stage: stage.to_string(),
                    epoch,
                    split: match at {
                        EvalPoint::Mid => "val_mid".into(),
                        EvalPoint::End => "val".into(),
                    },
                    loss: mean_nll(store, &vision, &decoder, mode, prompt_ids, &val)?,
                    lr,
                    accuracy: None,
                }])
            },
        )
    };

    let mut log = Vec::new();
    let mut lr_trace = Vec::new();
    let mut steps = 0;
    let mut optim = None;
    let main_trainable = if cfg.decoder.freeze_decoder {
        Trainable::prefixes(["vision.", MAPPER_PREFIX])
    } else {
        Trainable::All
    };
    let mut phases = Vec::new();
    if cfg.warm_epochs > 0 {
        let warm = TrainConfig {
            epochs: cfg.warm_epochs,
            ..cfg.train.clone()
        };
        let trainable = if cfg.warm_vision { Trainable::All } else { Trainable::prefixes(["dec."]) };
        phases.push(("sft_warm", warm, trainable));
    }
    if cfg.train.epochs > 0 {
        let main = TrainConfig {
            seed: cfg.train.seed.wrapping_add(1),
            ..cfg.train.clone()
        };
        phases.push(("sft", main, main_trainable));
    }
    for (stage, tc, trainable) in phases {
        let out = run_phase(&mut store, stage, &tc, trainable)?;
        log.extend(out.log);
        lr_trace.extend(out.lr_trace);
        steps += out.steps;
        optim = Some(out.optim);
    }
    Ok(SftOutput {
        stage: StageOutput {
            params: store,
            log,
            lr_trace,
            steps,
            optim: optim.ok_or_else(|| Error::Config("fine-tuning with zero epochs".into()))?,
        },
        rejected,
    })
}
