use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use radgen::cli::checkpoint::{config_hash, Checkpoint};
use radgen::cli::pipeline::{self, Arm, RunLog};
use radgen::cli::suite::{gradient_suite, scan_bench, GRAD_TOL};
use radgen::cli::{emit_leaderboard, RunConfig};
use radgen::data::Split;
use radgen::encoders::{VisionEncoder, Vocab};
use radgen::generator::{GenerationRecord, ReportDecoder};
use radgen::params::ParamStore;
use radgen::pretrain::StageOutput;
use radgen::{Error, Result};

#[derive(Parser)]
#[command(name = "radgen", version, about = "Mamba vision-language report generation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// output directory (overrides the config and the RADGEN_OUT variable)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// worker threads for parallel generation
    #[arg(long)]
    threads: Option<usize>,
    /// config overrides as `--section.key value` pairs
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArmArg {
    Full,
    ArSft,
    MaeSft,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired corpus
    GenData(Common),
    /// Stage 1: autoregressive visual pre-training
    PretrainAr(Common),
    /// Masked-autoencoder pre-training (comparison baseline)
    PretrainMae(Common),
    /// Stage 2: image-report contrastive alignment
    PretrainCtl(Common),
    /// Stage 3: supervised fine-tuning of the report decoder
    Finetune(Common),
    /// Write reports for the test split
    Generate(Common),
    /// Score generated reports against the ground truth
    Evaluate(Common),
    /// Corpus, pre-training, fine-tuning, generation, evaluation and leaderboard in one run
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "full")]
        arm: ArmArg,
    },
    /// Finite-difference check of every differentiable primitive and loss
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Wall-clock of the Mamba block against plain attention over sequence length
    ScanBench {
        #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
}

fn usage(msg: String) -> Error {
    Error::Config(msg)
}

/// `--a.b v --c d` into key/value pairs.
fn parse_overrides(raw: &[String]) -> std::result::Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(k) = it.next() {
        let key = k.strip_prefix("--").ok_or_else(|| format!("unexpected argument `{k}`"))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| format!("missing value for `--{key}`"))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((key, value));
    }
    Ok(out)
}

struct Run {
    cfg: RunConfig,
    dir: PathBuf,
    log: RunLog,
}

/// Defaults, then the file, then command-line flags and overrides.
fn resolve(common: &Common, command: &str) -> std::result::Result<Run, (u8, Error)> {
    let runtime = |e: Error| (1u8, e);
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(runtime)?,
        None => RunConfig::default(),
    };
    let mut common = common.clone();
    let mut pairs = Vec::new();
    // named flags that follow the first override land in the trailing list
    for (k, v) in parse_overrides(&common.overrides).map_err(|m| (2, usage(m)))? {
        match k.as_str() {
            "out" => common.out = Some(PathBuf::from(v)),
            "config" => return Err((2, usage("--config must precede overrides".into()))),
            "seed" => common.seed = Some(v.parse().map_err(|_| (2, usage(format!("bad seed `{v}`"))))?),
            "threads" => common.threads = Some(v.parse().map_err(|_| (2, usage(format!("bad thread count `{v}`"))))?),
            _ => pairs.push((k, v)),
        }
    }
    if let Some(s) = common.seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    if let Some(t) = common.threads {
        pairs.push(("threads".into(), t.to_string()));
    }
    cfg = cfg.with_overrides(&pairs).map_err(|e| match e {
        Error::Config(ref m) if m.starts_with("unknown key") => (2, e),
        e => (1, e),
    })?;
    let dir = common.out.clone().unwrap_or_else(|| cfg.output_root());
    std::fs::create_dir_all(&dir).map_err(|e| runtime(e.into()))?;
    let log = RunLog::open(&dir.join(format!("{command}.log")), true).map_err(runtime)?;
    Ok(Run { cfg, dir, log })
}

fn warn_hash(log: &mut RunLog, path: &Path, mismatch: bool) -> Result<()> {
    if mismatch {
        log.line(&format!(
            "warning: {} was written under a different configuration",
            path.display()
        ))?;
    }
    Ok(())
}

/// Loads a checkpoint and checks it covers `expected`.
fn load_checked(run: &mut Run, path: &Path, expected: &ParamStore) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    let mismatch = ck.verify(expected, &config_hash(&run.cfg))?;
    warn_hash(&mut run.log, path, mismatch)?;
    Ok(ck)
}

fn vision_template(cfg: &RunConfig) -> ParamStore {
    let mut s = ParamStore::new();
    VisionEncoder::new(cfg.vision()).init(&mut s, &mut template_rng());
    s
}

/// Values are irrelevant for shape templates.
fn template_rng() -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(0)
}

fn required(p: &Option<PathBuf>, dir: &Path, default: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| dir.join(default))
}

fn finish(run: &mut Run, name: &str, out: &StageOutput) -> Result<()> {
    for r in &out.log {
        run.log.line(&r.to_line())?;
    }
    let path = run.dir.join(name);
    pipeline::save_stage(&path, &run.cfg, out)?;
    run.log.line(&format!("wrote {}", path.display()))
}

fn vocab_for(run: &Run, ds: &radgen::data::Dataset) -> Result<Vocab> {
    let path = run.dir.join("vocab.txt");
    if path.exists() {
        return Vocab::load(&path);
    }
    let v = pipeline::build_vocab(ds, &run.cfg.model.prompt)?;
    v.save(&path)?;
    Ok(v)
}

fn execute(command: Command) -> std::result::Result<(), (u8, Error)> {
    let rt = |e: Error| (1u8, e);
    match command {
        Command::Gradcheck { points, seed } => {
            let cases = gradient_suite(points, seed).map_err(rt)?;
            let mut worst = 0.0f64;
            for c in &cases {
                println!("{:<18} points {:>3}  max rel err {:.3e}", c.name, c.points, c.worst);
                worst = worst.max(c.worst);
            }
            println!("worst relative error {worst:.3e}");
            if worst >= GRAD_TOL {
                return Err((1, Error::Contract(format!("gradient check failed: {worst:.3e} >= {GRAD_TOL:e}"))));
            }
            Ok(())
        }
        Command::ScanBench { lengths, width, reps } => {
            if lengths.len() < 2 {
                return Err((2, usage("scan-bench needs at least two lengths".into())));
            }
            let b = scan_bench(&lengths, width, reps, 0).map_err(rt)?;
            println!("{:>6}  {:>12}  {:>12}", "L", "block(s)", "attention(s)");
            for i in 0..b.lengths.len() {
                println!("{:>6}  {:>12.6}  {:>12.6}", b.lengths[i], b.block[i], b.attention[i]);
            }
            println!("fitted exponent: block {:.3}, attention {:.3}", b.block_exponent, b.attention_exponent);
            Ok(())
        }
        Command::Benchmark { common, arm } => {
            let mut run = resolve(&common, "benchmark")?;
            configure_threads(&run.cfg).map_err(rt)?;
            let arm = match arm {
                ArmArg::Full => Arm::Full,
                ArmArg::ArSft => Arm::ArSft,
                ArmArg::MaeSft => Arm::MaeSft,
            };
            let dir = run.dir.clone();
            let r = pipeline::benchmark(&run.cfg, arm, &dir, None, &mut run.log).map_err(rt)?;
            print!("{}", r.table);
            Ok(())
        }
        Command::GenData(c) => {
            let mut run = resolve(&c, "gen-data")?;
            let dir = run.cfg.data.path.clone().unwrap_or_else(|| run.dir.join("data"));
            let ds = pipeline::gen_data(&run.cfg, &dir).map_err(rt)?;
            run.log
                .line(&format!("wrote {} samples to {}", ds.len(), dir.display()))
                .map_err(rt)
        }
        Command::PretrainAr(c) => {
            let mut run = resolve(&c, "pretrain-ar")?;
            (|| {
                let ds = pipeline::corpus(&run.cfg)?;
                let out = pipeline::stage1(&run.cfg, &ds)?;
                finish(&mut run, "stage1.ckpt", &out)
            })()
            .map_err(rt)
        }
        Command::PretrainMae(c) => {
            let mut run = resolve(&c, "pretrain-mae")?;
            (|| {
                let ds = pipeline::corpus(&run.cfg)?;
                let out = pipeline::mae(&run.cfg, &ds)?;
                finish(&mut run, "mae.ckpt", &out)
            })()
            .map_err(rt)
        }
        Command::PretrainCtl(c) => {
            let mut run = resolve(&c, "pretrain-ctl")?;
            (|| {
                let ds = pipeline::corpus(&run.cfg)?;
                let vocab = vocab_for(&run, &ds)?;
                let path = required(&run.cfg.checkpoints.stage1, &run.dir, "stage1.ckpt");
                let template = vision_template(&run.cfg);
                let s1 = load_checked(&mut run, &path, &template)?;
                let out = pipeline::stage2(&run.cfg, &ds, &vocab, &s1.params)?;
                finish(&mut run, "stage2.ckpt", &out)
            })()
            .map_err(rt)
        }
        Command::Finetune(c) => {
            let mut run = resolve(&c, "finetune")?;
            (|| {
                let ds = pipeline::corpus(&run.cfg)?;
                let vocab = vocab_for(&run, &ds)?;
                let path = run
                    .cfg
                    .checkpoints
                    .stage2
                    .clone()
                    .or_else(|| run.cfg.checkpoints.stage1.clone())
                    .unwrap_or_else(|| run.dir.join("stage2.ckpt"));
                let template = vision_template(&run.cfg);
                let init = load_checked(&mut run, &path, &template)?;
                let out = pipeline::finetune(&run.cfg, &ds, &vocab, Some(&init.params))?;
                run.log.line(&format!(
                    "{} training reports rejected as longer than max_length {}",
                    out.rejected, run.cfg.model.max_length
                ))?;
                finish(&mut run, "sft.ckpt", &out.stage)
            })()
            .map_err(rt)
        }
        Command::Generate(c) => {
            let mut run = resolve(&c, "generate")?;
            configure_threads(&run.cfg).map_err(rt)?;
            (|| {
                let ds = pipeline::corpus(&run.cfg)?;
                let vocab = Vocab::load(&run.dir.join("vocab.txt"))?;
                let path = required(&run.cfg.checkpoints.sft, &run.dir, "sft.ckpt");
                let mut template = vision_template(&run.cfg);
                ReportDecoder::new(run.cfg.decoder(vocab.len()))
                    .init(&mut template, &mut template_rng());
                let ck = load_checked(&mut run, &path, &template)?;
                let generated = pipeline::generate_split(&run.cfg, &ds, &vocab, &ck.params, Split::Test)?;
                let out = run.dir.join("generations.jsonl");
                std::fs::write(&out, pipeline::generation_records(&generated))?;
                run.log.line(&format!("wrote {} reports to {}", generated.len(), out.display()))
            })()
            .map_err(rt)
        }
        Command::Evaluate(c) => {
            let mut run = resolve(&c, "evaluate")?;
            (|| {
                let ds = pipeline::corpus(&run.cfg)?;
                let text = std::fs::read_to_string(run.dir.join("generations.jsonl"))?;
                let by_id: std::collections::HashMap<usize, &str> =
                    ds.samples.iter().map(|s| (s.id, s.report.as_str())).collect();
                let (mut pred, mut gt) = (Vec::new(), Vec::new());
                for line in text.lines().filter(|l| !l.trim().is_empty()) {
                    let r: GenerationRecord = serde_json::from_str(line)?;
                    let id: usize = r.id.parse().map_err(|_| Error::Contract(format!("bad sample id `{}`", r.id)))?;
                    let g = by_id
                        .get(&id)
                        .ok_or_else(|| Error::Contract(format!("sample {id} is not in the corpus")))?;
                    pred.push(r.text);
                    gt.push(g.to_string());
                }
                let m = radgen::metrics::evaluate_corpus(&pred, &gt)?;
                std::fs::write(run.dir.join("metrics.json"), m.to_record() + "\n")?;
                let row = radgen::cli::LeaderboardRow {
                    algorithm: "local".into(),
                    metrics: m,
                    minutes: 0.0,
                    params_millions: 0.0,
                };
                let (table, _) = emit_leaderboard(&[row])?;
                print!("{table}");
                run.log.line(&table)
            })()
            .map_err(rt)
        }
    }
}

fn configure_threads(cfg: &RunConfig) -> Result<()> {
    // a second call in one process fails harmlessly
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads.max(1)).build_global();
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, e)) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            if code == 2 {
                eprintln!("run with --help for usage");
            }
            ExitCode::from(code)
        }
    }
}
