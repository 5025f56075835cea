use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{config_hash, hex, Checkpoint};
use super::config::RunConfig;
use super::leaderboard::{emit_leaderboard, LeaderboardRow};
use crate::data::{generate_corpus, load, save, Dataset, PairedSample, Split};
use crate::encoders::{EncoderMode, ImageGrid, Report, Vocab, UNK};
use crate::error::{Error, Result};
use crate::generator::{train_sft, GenerationRecord, GenerationResult, ReportGenerator, SftConfig, SftOutput};
use crate::metrics::{evaluate_corpus, MetricReport};
use crate::params::ParamStore;
use crate::pretrain::{run_mae, run_stage1, run_stage2, MaeConfig, Stage1Config, Stage2Config, StageOutput};

/// Held-out contrastive batch size.
pub const RETRIEVAL_BATCH: usize = 16;

/// Appends lines to a run's log file and echoes them to stderr.
pub struct RunLog {
    file: Option<File>,
    echo: bool,
}

impl RunLog {
    pub fn open(path: &Path, echo: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file: Some(file), echo })
    }

    pub fn discard() -> Self {
        Self { file: None, echo: false }
    }

    pub fn line(&mut self, s: &str) -> Result<()> {
        if self.echo {
            eprintln!("{s}");
        }
        if let Some(f) = &mut self.file {
            writeln!(f, "{s}")?;
        }
        Ok(())
    }

    fn stage(&mut self, out: &StageOutput) -> Result<()> {
        for r in &out.log {
            self.line(&r.to_line())?;
        }
        Ok(())
    }
}

/// Which pre-training precedes fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    /// autoregressive pre-training, contrastive alignment, fine-tuning
    Full,
    /// autoregressive pre-training, fine-tuning
    ArSft,
    /// masked-autoencoder pre-training, fine-tuning
    MaeSft,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "ARG+CTL+SFT",
            Arm::ArSft => "ARG+SFT",
            Arm::MaeSft => "MAE+SFT",
        }
    }
}

/// The corpus named by the config, or a freshly generated one.
pub fn corpus(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.path {
        Some(p) => load(p),
        None => generate_corpus(cfg.data.n, cfg.seed, cfg.data.image_size),
    }
}

/// Training-split reports plus the prompt.
pub fn build_vocab(ds: &Dataset, prompt: &str) -> Result<Vocab> {
    let mut texts: Vec<&str> = ds.subset(Split::Train).iter().map(|s| s.report.as_str()).collect();
    texts.push(prompt);
    Vocab::build(&texts)
}

fn images<'a>(samples: &[&'a PairedSample]) -> Vec<&'a ImageGrid> {
    samples.iter().map(|s| &s.image).collect()
}

fn reports(samples: &[&PairedSample], vocab: &Vocab) -> Vec<Report> {
    samples.iter().map(|s| Report::new(s.report.clone(), vocab)).collect()
}

fn pairs<'a>(samples: &[&'a PairedSample], reports: &'a [Report]) -> Vec<(&'a ImageGrid, &'a Report)> {
    samples.iter().zip(reports).map(|(s, r)| (&s.image, r)).collect()
}

/// Up to `n` validation samples whose finding sets are pairwise distinct.
pub fn retrieval_batch<'a>(val: &[&'a PairedSample], n: usize) -> Vec<&'a PairedSample> {
    let mut out: Vec<&PairedSample> = Vec::new();
    for s in val {
        if out.len() == n {
            break;
        }
        if out.iter().all(|o| o.findings.labels() != s.findings.labels()) {
            out.push(s);
        }
    }
    out
}

pub fn stage1(cfg: &RunConfig, ds: &Dataset) -> Result<StageOutput> {
    let train = ds.subset(Split::Train);
    let val = ds.subset(Split::Val);
    let c = Stage1Config {
        vision: cfg.vision(),
        train: cfg.stage1.train(cfg.seed),
    };
    run_stage1(&images(&train), &images(&val), &c)
}

pub fn mae(cfg: &RunConfig, ds: &Dataset) -> Result<StageOutput> {
    let train = ds.subset(Split::Train);
    let c = MaeConfig {
        vision: cfg.vision(),
        train: cfg.mae.stage.train(cfg.seed),
        mask_ratio: cfg.mae.mask_ratio,
    };
    run_mae(&images(&train), &c)
}

pub fn stage2(cfg: &RunConfig, ds: &Dataset, vocab: &Vocab, stage1: &ParamStore) -> Result<StageOutput> {
    let train = ds.subset(Split::Train);
    let held = retrieval_batch(&ds.subset(Split::Val), RETRIEVAL_BATCH);
    let (tr, hr) = (reports(&train, vocab), reports(&held, vocab));
    let c = Stage2Config {
        vision: cfg.vision(),
        text: cfg.text(vocab.len()),
        train: cfg.stage2.train(cfg.seed.wrapping_add(2)),
        trainable: true,
    };
    run_stage2(&pairs(&train, &tr), &pairs(&held, &hr), stage1, &c)
}

pub fn sft_config(cfg: &RunConfig, vocab: &Vocab) -> SftConfig {
    SftConfig {
        vision: cfg.vision(),
        decoder: cfg.decoder(vocab.len()),
        train: cfg.sft.stage.train(cfg.seed.wrapping_add(3)),
        warm_epochs: cfg.sft.warm_epochs,
        warm_vision: cfg.sft.warm_vision,
        mode: cfg.model.directions,
    }
}

/// Validation pairs used for the fine-tuning NLL.
pub const SFT_VAL: usize = 32;

pub fn finetune(cfg: &RunConfig, ds: &Dataset, vocab: &Vocab, init: Option<&ParamStore>) -> Result<SftOutput> {
    let c = sft_config(cfg, vocab);
    let prompt = c.decoder.validate(vocab)?;
    let train = ds.subset(Split::Train);
    let val: Vec<&PairedSample> = ds.subset(Split::Val).into_iter().take(SFT_VAL).collect();
    let (tr, vr) = (reports(&train, vocab), reports(&val, vocab));
    train_sft(&pairs(&train, &tr), &pairs(&val, &vr), init, &prompt, &c)
}

pub fn generator<'a>(cfg: &RunConfig, vocab: &'a Vocab) -> Result<ReportGenerator<'a>> {
    ReportGenerator::new(cfg.vision(), cfg.decoder(vocab.len()), cfg.model.directions, vocab)
}

pub fn generate_split(
    cfg: &RunConfig,
    ds: &Dataset,
    vocab: &Vocab,
    params: &ParamStore,
    split: Split,
) -> Result<Vec<(usize, GenerationResult)>> {
    let gen = generator(cfg, vocab)?;
    let samples = ds.subset(split);
    let out = gen.generate_batch(params, &images(&samples), cfg.strategy()?, cfg.model.max_length)?;
    Ok(samples.iter().map(|s| s.id).zip(out).collect())
}

/// Metrics of generated texts against the complete ground-truth reports.
pub fn evaluate(ds: &Dataset, generated: &[(usize, GenerationResult)]) -> Result<MetricReport> {
    let by_id: std::collections::HashMap<usize, &PairedSample> = ds.samples.iter().map(|s| (s.id, s)).collect();
    let mut pred = Vec::with_capacity(generated.len());
    let mut gt = Vec::with_capacity(generated.len());
    for (id, g) in generated {
        let s = by_id
            .get(id)
            .ok_or_else(|| Error::contract(format!("generated sample {id} is not in the corpus")))?;
        pred.push(g.text.as_str());
        gt.push(s.report.as_str());
    }
    evaluate_corpus(&pred, &gt)
}

/// Fraction of generations that contain no unknown token.
pub fn in_alphabet_rate(generated: &[(usize, GenerationResult)]) -> f64 {
    if generated.is_empty() {
        return 1.0;
    }
    let ok = generated.iter().filter(|(_, g)| !g.ids.contains(&UNK)).count();
    ok as f64 / generated.len() as f64
}

pub fn generation_records(generated: &[(usize, GenerationResult)]) -> String {
    let mut s = String::new();
    for (id, g) in generated {
        let r = GenerationRecord {
            id: id.to_string(),
            text: g.text.clone(),
            stop: g.stop,
            mean_logprob: g.mean_logprob(),
        };
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

pub fn save_stage(path: &Path, cfg: &RunConfig, out: &StageOutput) -> Result<Checkpoint> {
    let ck = Checkpoint {
        config_hash: config_hash(cfg),
        step: out.steps,
        params: out.params.clone(),
        optim: Some(out.optim.clone()),
    };
    ck.save(path)?;
    Ok(ck)
}

/// Everything a benchmark run produced.
#[derive(Clone, Debug)]
pub struct BenchmarkResult {
    pub arm: Arm,
    pub metrics: MetricReport,
    pub minutes: f64,
    pub params_millions: f64,
    /// checkpoint file name and SHA-256 of its bytes, in stage order
    pub checkpoints: Vec<(String, String)>,
    pub pretrain: StageOutput,
    pub stage2: Option<StageOutput>,
    pub sft: SftOutput,
    pub in_alphabet: f64,
    pub table: String,
    pub dir: PathBuf,
}

impl BenchmarkResult {
    pub fn row(&self) -> LeaderboardRow {
        LeaderboardRow {
            algorithm: self.arm.name().to_string(),
            metrics: self.metrics.clone(),
            minutes: self.minutes,
            params_millions: self.params_millions,
        }
    }
}

fn digest_file(path: &Path) -> Result<String> {
    use sha2::Digest;
    Ok(hex(&sha2::Sha256::digest(std::fs::read(path)?)))
}

/// Corpus, pre-training for `arm`, fine-tuning, test-split generation, evaluation, leaderboard.
/// `pretrained` reuses an earlier pre-training output of the same config.
pub fn benchmark(
    cfg: &RunConfig,
    arm: Arm,
    dir: &Path,
    pretrained: Option<&StageOutput>,
    log: &mut RunLog,
) -> Result<BenchmarkResult> {
    let started = Instant::now();
    std::fs::create_dir_all(dir)?;
    cfg.validate()?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let ds = corpus(cfg)?;
    let vocab = build_vocab(&ds, &cfg.model.prompt)?;
    vocab.save(&dir.join("vocab.txt"))?;
    log.line(&format!("{}: corpus of {} samples, vocabulary {}", arm.name(), ds.len(), vocab.len()))?;

    let mut checkpoints = Vec::new();
    let mut record = |name: &str, out: &StageOutput| -> Result<()> {
        let path = dir.join(name);
        save_stage(&path, cfg, out)?;
        checkpoints.push((name.to_string(), digest_file(&path)?));
        Ok(())
    };

    let pretrain = match (arm, pretrained) {
        (_, Some(p)) => p.clone(),
        (Arm::MaeSft, None) => mae(cfg, &ds)?,
        (_, None) => stage1(cfg, &ds)?,
    };
    log.stage(&pretrain)?;
    let pre_name = if arm == Arm::MaeSft { "mae.ckpt" } else { "stage1.ckpt" };
    record(pre_name, &pretrain)?;

    let stage2_out = if arm == Arm::Full {
        let out = stage2(cfg, &ds, &vocab, &pretrain.params)?;
        log.stage(&out)?;
        record("stage2.ckpt", &out)?;
        Some(out)
    } else {
        None
    };
    let init = stage2_out.as_ref().map_or(&pretrain.params, |o| &o.params);

    let sft = finetune(cfg, &ds, &vocab, Some(init))?;
    log.line(&format!("sft: {} training reports rejected as longer than max_length", sft.rejected))?;
    log.stage(&sft.stage)?;
    record("sft.ckpt", &sft.stage)?;

    let generated = generate_split(cfg, &ds, &vocab, &sft.stage.params, Split::Test)?;
    std::fs::write(dir.join("generations.jsonl"), generation_records(&generated))?;
    let metrics = evaluate(&ds, &generated)?;
    std::fs::write(dir.join("metrics.json"), metrics.to_record() + "\n")?;
    let in_alphabet = in_alphabet_rate(&generated);

    let minutes = started.elapsed().as_secs_f64() / 60.0;
    let params_millions = sft.stage.params.num_scalars() as f64 / 1e6;
    let mut result = BenchmarkResult {
        arm,
        metrics,
        minutes,
        params_millions,
        checkpoints,
        pretrain,
        stage2: stage2_out,
        sft,
        in_alphabet,
        table: String::new(),
        dir: dir.to_path_buf(),
    };
    let (table, records) = emit_leaderboard(&[result.row()])?;
    std::fs::write(dir.join("leaderboard.txt"), &table)?;
    std::fs::write(dir.join("leaderboard.jsonl"), &records)?;
    log.line(&table)?;
    result.table = table;
    Ok(result)
}

/// Reported `EncoderMode` name for logs.
pub fn mode_name(m: EncoderMode) -> &'static str {
    match m {
        EncoderMode::Causal => "causal",
        EncoderMode::MultiDir => "multidir",
    }
}

/// Saves the corpus of `cfg` under `dir`.
pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    let ds = generate_corpus(cfg.data.n, cfg.seed, cfg.data.image_size)?;
    save(&ds, dir)?;
    Ok(ds)
}
