//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs the full desk-scale pipeline four times (three arms plus a repeat),
//! so expect tens of minutes on one core.

use std::path::Path;
use std::time::Instant;

use radgen::cli::pipeline::{benchmark, Arm, BenchmarkResult, RunLog};
use radgen::cli::suite::{gradient_suite, scan_bench, scan_suite, GRAD_TOL};
use radgen::cli::{RunConfig, COLUMNS};
use radgen::data::split_sizes;
use radgen::encoders::normalize;
use radgen::metrics::{bleu, cider, clinical_efficacy, meteor, rouge_l, Tokens};

struct Report {
    passed: usize,
    failed: usize,
}

impl Report {
    fn record(&mut self, id: u32, title: &str, pass: bool, detail: &str) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} [{id}] {title}: {detail}");
        if pass {
            self.passed += 1;
        } else {
            self.failed += 1;
        }
    }
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn gradients(r: &mut Report) {
    let t = Instant::now();
    match gradient_suite(10, 0) {
        Ok(cases) => {
            let worst = cases.iter().map(|c| c.worst).fold(0.0, f64::max);
            let min_points = cases.iter().map(|c| c.points).min().unwrap_or(0);
            let names = ["ar_loss", "contrastive_loss", "sft_loss", "mae_loss"];
            let composites = names.iter().all(|n| cases.iter().any(|c| c.name == *n));
            let s = secs(t);
            r.record(
                1,
                "gradient suite",
                worst < GRAD_TOL && min_points >= 10 && composites && s < 60.0,
                &format!(
                    "{} cases, >= {min_points} points each, worst rel err {worst:.2e}, {s:.1}s",
                    cases.len()
                ),
            );
        }
        Err(e) => r.record(1, "gradient suite", false, &e.to_string()),
    }
}

fn scan(r: &mut Report) {
    let t = Instant::now();
    match scan_suite(100, 20, 0) {
        Ok(s) => {
            let el = secs(t);
            r.record(
                2,
                "chunked vs sequential scan",
                s.cases == 100 && s.max_diff <= 1e-10 && s.causal_instances == 20 && s.causal_violations == 0 && el < 60.0,
                &format!(
                    "{} cases max diff {:.2e}, {} causality instances with {} violations, {el:.1}s",
                    s.cases, s.max_diff, s.causal_instances, s.causal_violations
                ),
            );
        }
        Err(e) => r.record(2, "chunked vs sequential scan", false, &e.to_string()),
    }
}

fn scaling(r: &mut Report) {
    let t = Instant::now();
    match scan_bench(&[128, 256, 512, 1024], 32, 3, 0) {
        Ok(b) => {
            let el = secs(t);
            r.record(
                3,
                "runtime exponent",
                b.block_exponent < 1.3 && b.attention_exponent > 1.7 && el < 120.0,
                &format!(
                    "block {:.3}, attention {:.3}, {el:.1}s",
                    b.block_exponent, b.attention_exponent
                ),
            );
        }
        Err(e) => r.record(3, "runtime exponent", false, &e.to_string()),
    }
}

fn toks(s: &str) -> Tokens {
    normalize(s)
}

fn metric_oracles(r: &mut Report) -> radgen::Result<()> {
    let t = Instant::now();
    let b2 = bleu(&[toks("the cat sat")], &[vec![toks("the cat sat on the mat")]], 2)?;
    let rl = rouge_l(&[toks("a b c d")], &[toks("a c b d")])?;
    let m = meteor(&[toks("a b c")], &[toks("a b c")])?;
    let c = cider(&[toks("a b"), toks("c d")], &[toks("a b"), toks("c d")])?;
    let ce = clinical_efficacy(&["pleural effusion ."], &["pleural effusion . pneumothorax ."])?;
    // closed forms: BP = e^(1 - 6/3), precisions 1; fragmentation 0.5 * (1/3)^3
    let checks = [
        ("bleu2", b2, (-1.0f64).exp(), 0.367879),
        ("rouge_l", rl, 0.75, 0.75),
        ("meteor", m, 1.0 - 0.5 / 27.0, 0.981481),
        ("cider", c, 5.0, 5.0),
        ("ce_p", ce.precision, 1.0, 1.0),
        ("ce_r", ce.recall, 0.5, 0.5),
        ("ce_f1", ce.f1, 2.0 / 3.0, 0.666667),
    ];
    let ok = checks
        .iter()
        .all(|(_, got, exact, shown)| (got - exact).abs() < 1e-9 && (got - shown).abs() < 5e-7);
    let detail: Vec<String> = checks.iter().map(|(n, got, _, _)| format!("{n}={got:.6}")).collect();
    let el = secs(t);
    r.record(4, "metric oracles", ok && el < 1.0, &format!("{} in {el:.3}s", detail.join(" ")));
    Ok(())
}

fn splits(r: &mut Report) {
    let t = Instant::now();
    let s = split_sizes(57_805);
    r.record(
        5,
        "split protocol",
        s == (40_463, 5_780, 11_562) && secs(t) < 1.0,
        &format!("{} / {} / {}", s.0, s.1, s.2),
    );
}

fn run(cfg: &RunConfig, arm: Arm, root: &Path, tag: &str) -> radgen::Result<BenchmarkResult> {
    let dir = root.join(tag);
    let mut log = RunLog::open(&root.join(format!("{tag}.log")), false)?;
    let res = benchmark(cfg, arm, &dir, None, &mut log)?;
    println!("  {tag}: {:.2} min, test BLEU-4 {:.4}, CE-F1 {:.4}", res.minutes, res.metrics.b4, res.metrics.ce_f1);
    Ok(res)
}

fn end_to_end(r: &mut Report, full: &BenchmarkResult) {
    let ar = full.pretrain.epoch_losses("train");
    let (first, last) = (ar.first().copied().unwrap_or(f64::NAN), ar.last().copied().unwrap_or(f64::NAN));
    let drop = 1.0 - last / first;
    let top1 = full
        .stage2
        .as_ref()
        .and_then(|s| s.log.iter().rev().find_map(|rec| rec.accuracy))
        .unwrap_or(0.0);
    let m = &full.metrics;
    let conds = [
        ("stage-1 loss drop", drop >= 0.5),
        ("retrieval", top1 >= 0.8),
        ("bleu-4", m.b4 >= 0.30),
        ("ce-f1", m.ce_f1 >= 0.80),
        ("runtime", full.minutes <= 30.0),
    ];
    let failed: Vec<&str> = conds.iter().filter(|c| !c.1).map(|c| c.0).collect();
    r.record(
        6,
        "end-to-end pipeline",
        failed.is_empty(),
        &format!(
            "stage-1 loss {first:.4} -> {last:.4} ({:.1}% drop), retrieval top-1 {top1:.3}, \
             BLEU-4 {:.4}, CE-F1 {:.4}, no-unk rate {:.3}, {:.1} min on {} thread(s){}",
            100.0 * drop,
            m.b4,
            m.ce_f1,
            full.in_alphabet,
            full.minutes,
            rayon::current_num_threads(),
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    );
}

fn ablation(r: &mut Report, full: &BenchmarkResult, ar: &BenchmarkResult, mae: &BenchmarkResult) {
    let (f, a, m) = (full.metrics.b4, ar.metrics.b4, mae.metrics.b4);
    let total = full.minutes + ar.minutes + mae.minutes;
    r.record(
        7,
        "ablation direction",
        f >= a - 0.01 && a >= m - 0.01 && total <= 90.0,
        &format!("BLEU-4 ARG+CTL+SFT {f:.4}, ARG+SFT {a:.4}, MAE+SFT {m:.4}; {total:.1} min for three runs"),
    );
}

fn determinism(r: &mut Report, a: &BenchmarkResult, b: &BenchmarkResult) {
    let same_ckpt = a.checkpoints == b.checkpoints;
    let same_metrics = a.metrics == b.metrics;
    let names: Vec<&str> = a.checkpoints.iter().map(|c| c.0.as_str()).collect();
    r.record(
        8,
        "determinism",
        same_ckpt && same_metrics && !a.checkpoints.is_empty(),
        &format!(
            "checkpoints {} ({}), metrics {}",
            if same_ckpt { "identical" } else { "differ" },
            names.join(", "),
            if same_metrics { "identical" } else { "differ" }
        ),
    );
}

fn schema(r: &mut Report, full: &BenchmarkResult) {
    let golden = "Algorithm B4 R M C P R F1 Time(min) Param(M)";
    let on_disk = std::fs::read_to_string(full.dir.join("leaderboard.txt")).unwrap_or_default();
    let header = on_disk.lines().next().unwrap_or("");
    let cols: Vec<&str> = header.split_whitespace().collect();
    let row = on_disk.lines().nth(1).unwrap_or("");
    let three_dp = row
        .split_whitespace()
        .skip(1)
        .all(|c| c.split_once('.').is_some_and(|(_, frac)| frac.len() == 3));
    r.record(
        9,
        "leaderboard schema",
        cols.join(" ") == golden && cols == COLUMNS && three_dp && on_disk.lines().count() == 2,
        &format!("header `{header}`"),
    );
}

fn main() {
    let mut r = Report { passed: 0, failed: 0 };
    gradients(&mut r);
    scan(&mut r);
    scaling(&mut r);
    if let Err(e) = metric_oracles(&mut r) {
        r.record(4, "metric oracles", false, &e.to_string());
    }
    splits(&mut r);

    let root = tempfile::tempdir().expect("temp dir");
    let cfg = RunConfig::default();
    let runs = (|| -> radgen::Result<_> {
        let full = run(&cfg, Arm::Full, root.path(), "full")?;
        let ar = run(&cfg, Arm::ArSft, root.path(), "ar_sft")?;
        let mae = run(&cfg, Arm::MaeSft, root.path(), "mae_sft")?;
        let again = run(&cfg, Arm::Full, root.path(), "full_repeat")?;
        Ok((full, ar, mae, again))
    })();
    match runs {
        Ok((full, ar, mae, again)) => {
            end_to_end(&mut r, &full);
            ablation(&mut r, &full, &ar, &mae);
            determinism(&mut r, &full, &again);
            schema(&mut r, &full);
            print!("{}", full.table);
        }
        Err(e) => {
            for (id, title) in [(6, "end-to-end pipeline"), (7, "ablation direction"), (8, "determinism"), (9, "leaderboard schema")] {
                r.record(id, title, false, &format!("pipeline error: {e}"));
            }
        }
    }
    println!("acceptance: {} passed, {} failed", r.passed, r.failed);
}
