use std::path::Path;
use std::process::Command;

use radgen::cli::checkpoint::{config_hash, Checkpoint, CHECKPOINT_MAGIC};
use radgen::cli::pipeline::{self, RunLog};
use radgen::cli::{emit_leaderboard, LeaderboardRow, RunConfig, COLUMNS};
use radgen::metrics::MetricReport;
use radgen::numerics::Tensor;
use radgen::params::ParamStore;
use radgen::pretrain::{AdamW, OptimState};
use radgen::Error;

fn sample_store() -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("vision.a", Tensor::new(vec![2, 2], vec![1.5, -2.0, 0.1, 3.0e-9]).unwrap());
    s.insert("vision.b", Tensor::from_vec(vec![f64::MIN_POSITIVE, 7.0, -0.0]));
    s
}

fn sample_checkpoint() -> Checkpoint {
    let params = sample_store();
    let mut optim = OptimState::new(AdamW::default());
    optim.step = 9;
    optim.moments.insert(
        "vision.b".into(),
        (Tensor::from_vec(vec![0.1, 0.2, 0.3]), Tensor::from_vec(vec![1.0, 2.0, 3.0])),
    );
    Checkpoint {
        config_hash: config_hash(&RunConfig::default()),
        step: 42,
        params,
        optim: Some(optim),
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let ck = sample_checkpoint();
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.step, 42);
    assert_eq!(back.config_hash, ck.config_hash);
    for (name, t) in ck.params.iter() {
        let u = back.params.get(name).unwrap();
        assert_eq!(t.shape(), u.shape());
        let a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = u.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b, "{name}");
    }
    assert_eq!(back.optim, ck.optim);
    assert_eq!(back.to_bytes(), ck.to_bytes());
}

#[test]
fn save_leaves_no_temporary_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.ckpt");
    sample_checkpoint().save(&path).unwrap();
    sample_checkpoint().save(&path).unwrap();
    let names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, vec!["b.ckpt".to_string()]);
}

#[test]
fn flipped_byte_is_a_checksum_error() {
    let mut bytes = sample_checkpoint().to_bytes();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let err = Checkpoint::from_bytes(&bytes, Path::new("x.ckpt")).unwrap_err();
    assert!(matches!(err, Error::Checksum { .. }), "{err}");
}

#[test]
fn bad_magic_and_truncation_are_format_errors() {
    let mut bytes = sample_checkpoint().to_bytes();
    bytes[0] = b'X';
    assert_ne!(bytes[..4], CHECKPOINT_MAGIC);
    let err = Checkpoint::from_bytes(&bytes, Path::new("x.ckpt")).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
    let err = Checkpoint::from_bytes(&bytes[..10], Path::new("x.ckpt")).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
}

#[test]
fn unknown_version_is_reported() {
    let mut bytes = sample_checkpoint().to_bytes();
    bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
    let err = Checkpoint::from_bytes(&bytes, Path::new("x.ckpt")).unwrap_err().to_string();
    assert!(err.contains("expected 1, found 7"), "{err}");
}

#[test]
fn shape_mismatch_names_the_tensor() {
    let ck = sample_checkpoint();
    let mut expected = sample_store();
    expected.insert("vision.b", Tensor::zeros(&[4]));
    let err = ck.verify(&expected, &ck.config_hash).unwrap_err();
    match &err {
        Error::ParamShape { name, expected, found } => {
            assert_eq!(name, "vision.b");
            assert_eq!(expected, &vec![4]);
            assert_eq!(found, &vec![3]);
        }
        other => panic!("unexpected {other}"),
    }
    assert!(err.to_string().contains("vision.b"));
}

#[test]
fn config_hash_mismatch_is_reported_not_fatal() {
    let ck = sample_checkpoint();
    let other = config_hash(&RunConfig::reference());
    assert!(ck.verify(&sample_store(), &other).unwrap());
    assert!(!ck.verify(&sample_store(), &ck.config_hash).unwrap());
}

fn tiny_config() -> RunConfig {
    let ov = [
        ("data.n", "40"),
        ("data.image_size", "16"),
        ("model.patch", "8"),
        ("model.width", "8"),
        ("model.depth", "1"),
        ("model.state", "4"),
        ("model.embed_dim", "8"),
        ("model.text_width", "8"),
        ("model.text_depth", "1"),
        ("stage1.epochs", "1"),
        ("stage1.batch", "8"),
        ("stage2.epochs", "1"),
        ("stage2.batch", "8"),
    ];
    let ov: Vec<(String, String)> = ov.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    RunConfig::default().with_overrides(&ov).unwrap()
}

#[test]
fn stage_one_checkpoint_loads_into_stage_two() {
    let cfg = tiny_config();
    let ds = pipeline::corpus(&cfg).unwrap();
    let vocab = pipeline::build_vocab(&ds, &cfg.model.prompt).unwrap();
    let s1 = pipeline::stage1(&cfg, &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stage1.ckpt");
    pipeline::save_stage(&path, &cfg, &s1).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert!(!loaded.verify(&s1.params, &config_hash(&cfg)).unwrap());
    let s2 = pipeline::stage2(&cfg, &ds, &vocab, &loaded.params).unwrap();
    assert!(s2.params.names().any(|n| n.starts_with("text.")));
    assert!(s2.params.get("vision.patch_proj").is_ok());
}

#[test]
fn overrides_follow_precedence() {
    let file = RunConfig::from_toml("seed = 5\n[data]\nn = 300\n").unwrap();
    assert_eq!(file.seed, 5);
    assert_eq!(file.data.n, 300);
    assert_eq!(file.model.width, RunConfig::default().model.width);
    let cli = file
        .with_overrides(&[("data.n".into(), "200".into()), ("generate.strategy".into(), "beam".into())])
        .unwrap();
    assert_eq!(cli.data.n, 200);
    assert_eq!(cli.seed, 5);
    assert_eq!(cli.generate.strategy, "beam");
}

#[test]
fn unknown_override_key_is_named() {
    let err = RunConfig::default()
        .with_overrides(&[("model.colour".into(), "1".into())])
        .unwrap_err()
        .to_string();
    assert!(err.contains("model.colour"), "{err}");
    assert!(RunConfig::from_toml("[model]\ncolour = 1\n").is_err());
}

#[test]
fn invalid_values_are_rejected() {
    let bad = [("data.image_size", "60"), ("model.max_length", "1"), ("mae.mask_ratio", "1.5")];
    for (k, v) in bad {
        assert!(RunConfig::default().with_overrides(&[(k.into(), v.into())]).is_err(), "{k}={v}");
    }
}

#[test]
fn reference_configuration_values() {
    let r = RunConfig::reference();
    assert_eq!(r.data.image_size, 192);
    assert_eq!(r.model.patch, 16);
    assert_eq!(r.model.width, 1024);
    assert_eq!(r.model.depth, 24);
    assert_eq!(r.model.max_length, 100);
    assert_eq!(r.stage1.base_lr, 1.5e-4);
    assert_eq!(r.stage1.weight_decay, 0.05);
    assert_eq!(r.vision().num_patches(), 144);
}

#[test]
fn config_toml_round_trips() {
    let c = RunConfig::reference();
    assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
}

fn report(x: f64) -> MetricReport {
    MetricReport {
        b1: x,
        b2: x,
        b3: x,
        b4: x / 2.0,
        rouge_l: 0.5,
        meteor: 0.25,
        cider: 1.2345,
        ce_p: 0.8,
        ce_r: 0.7,
        ce_f1: 0.746666,
        n: 10,
    }
}

fn rows() -> Vec<LeaderboardRow> {
    vec![
        LeaderboardRow {
            algorithm: "ARG+CTL+SFT".into(),
            metrics: report(0.6),
            minutes: 12.3456,
            params_millions: 0.41,
        },
        LeaderboardRow {
            algorithm: "MAE+SFT".into(),
            metrics: report(0.1),
            minutes: 3.0,
            params_millions: 0.4,
        },
    ]
}

const GOLDEN: &str = "\
Algorithm       B4      R      M      C      P      R     F1  Time(min)  Param(M)
ARG+CTL+SFT  0.300  0.500  0.250  1.234  0.800  0.700  0.747     12.346     0.410
MAE+SFT      0.050  0.500  0.250  1.234  0.800  0.700  0.747      3.000     0.400
";

#[test]
fn leaderboard_matches_golden_table() {
    let (table, records) = emit_leaderboard(&rows()).unwrap();
    assert_eq!(table, GOLDEN);
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, COLUMNS);
    assert_eq!(records.lines().count(), 2);
    let back: LeaderboardRow = serde_json::from_str(records.lines().next().unwrap()).unwrap();
    assert_eq!(back, rows()[0]);
    assert_eq!(emit_leaderboard(&rows()).unwrap(), (table, records));
    assert!(emit_leaderboard(&[]).is_err());
}

#[test]
fn run_log_appends_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.log");
    let mut log = RunLog::open(&path, false).unwrap();
    log.line("one").unwrap();
    log.line("two").unwrap();
    drop(log);
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "one\ntwo\n");
}

fn radgen() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_radgen"));
    c.env_remove("RADGEN_OUT");
    c
}

#[test]
fn usage_errors_exit_two() {
    let out = radgen().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = radgen()
        .args(["gen-data", "--out"])
        .arg(dir.path())
        .args(["--model.colour", "3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.colour"));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = radgen()
        .args(["generate", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_data_writes_corpus_and_log_under_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let out = radgen()
        .env("RADGEN_OUT", dir.path())
        .args(["gen-data", "--data.n", "30", "--data.image_size", "16"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("gen-data.log").exists());
    let n = std::fs::read_dir(dir.path()).unwrap().count();
    assert!(n >= 2, "{n} entries");
}
