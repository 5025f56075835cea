//! Self-checks run by the `gradcheck` and `scan-bench` subcommands.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoders::{l2_normalize, ImageGrid, Report, VisionConfig, VisionEncoder, Vocab};
use crate::error::Result;
use crate::generator::{sft_loss, DecoderConfig, ReportDecoder};
use crate::numerics::{grad_check_many, Graph, Tensor, Var};
use crate::params::{Binder, ParamStore};
use crate::pretrain::{ar_loss, contrastive_loss, mae_loss_baseline, ArHead, MaeDecoder};
use crate::ssm::{
    discretize, reference_attention, selective_scan_chunked, selective_scan_sequential, BlockConfig, MambaBlock,
    Traversal,
};

/// Pass threshold of the gradient suite.
pub const GRAD_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct GradCase {
    pub name: String,
    pub points: usize,
    pub worst: f64,
}

type Check = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;

fn case(f: impl for<'g> Fn(&[Var<'g>]) -> Result<Var<'g>> + 'static, shapes: Vec<Vec<usize>>, lo: f64, hi: f64) -> Check {
    Box::new(move |rng| {
        let pts: Vec<Tensor> = shapes.iter().map(|s| Tensor::uniform(s, lo, hi, rng)).collect();
        grad_check_many(&f, &pts, STEP)
    })
}

/// Weighted sum so that every output element affects the scalar differently.
fn probe<'g>(y: Var<'g>) -> Result<Var<'g>> {
    let n = y.value().len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
    let w = Tensor::new(y.shape(), w)?;
    Ok(y.mul(y.graph().constant(w))?.sum())
}

fn unit_rows<'g>(x: Var<'g>) -> Result<Var<'g>> {
    let (b, e) = (x.shape()[0], x.shape()[1]);
    let parts = (0..b)
        .map(|r| l2_normalize(x.slice(0, r, r + 1)?.reshape(&[e])?)?.reshape(&[1, e]))
        .collect::<Result<Vec<_>>>()?;
    Var::concat(&parts, 0)
}

fn primitives() -> Vec<(&'static str, Check)> {
    let m = |r: usize, c: usize| vec![r, c];
    vec![
        ("add", case(|v| probe(v[0].add(v[1])?), vec![m(3, 4), vec![4]], -2.0, 2.0)),
        ("sub", case(|v| probe(v[0].sub(v[1])?), vec![m(3, 4), m(3, 4)], -2.0, 2.0)),
        ("mul", case(|v| probe(v[0].mul(v[1])?), vec![m(3, 4), vec![4]], -2.0, 2.0)),
        ("div", case(|v| probe(v[0].div(v[1])?), vec![m(3, 4), m(3, 4)], 0.5, 2.0)),
        ("matmul", case(|v| probe(v[0].matmul(v[1])?), vec![m(3, 4), m(4, 2)], -1.0, 1.0)),
        ("exp", case(|v| probe(v[0].exp()), vec![m(3, 3)], -1.0, 1.0)),
        ("log", case(|v| probe(v[0].log()?), vec![m(3, 3)], 0.5, 2.0)),
        ("sqrt", case(|v| probe(v[0].sqrt()?), vec![m(3, 3)], 0.5, 2.0)),
        ("silu", case(|v| probe(v[0].silu()), vec![m(3, 3)], -3.0, 3.0)),
        ("sigmoid", case(|v| probe(v[0].sigmoid()), vec![m(3, 3)], -3.0, 3.0)),
        ("softplus", case(|v| probe(v[0].softplus()), vec![m(3, 3)], -3.0, 3.0)),
        ("tanh", case(|v| probe(v[0].tanh()), vec![m(3, 3)], -2.0, 2.0)),
        ("scale", case(|v| probe(v[0].scale(-1.7)), vec![m(2, 3)], -2.0, 2.0)),
        ("add_scalar", case(|v| probe(v[0].add_scalar(0.3).square()), vec![m(2, 3)], -2.0, 2.0)),
        ("square", case(|v| probe(v[0].square()), vec![m(2, 3)], -2.0, 2.0)),
        ("rms_norm", case(|v| probe(v[0].rms_norm(v[1], 1e-6)?), vec![m(3, 5), vec![5]], -2.0, 2.0)),
        ("softmax", case(|v| probe(v[0].softmax()), vec![m(3, 4)], -2.0, 2.0)),
        ("log_softmax", case(|v| probe(v[0].log_softmax()), vec![m(3, 4)], -2.0, 2.0)),
        ("slice", case(|v| probe(v[0].slice(0, 1, 3)?), vec![m(4, 3)], -2.0, 2.0)),
        ("concat", case(|v| probe(Var::concat(&[v[0], v[1]], 0)?.square()), vec![m(2, 3), m(1, 3)], -2.0, 2.0)),
        ("reshape", case(|v| probe(v[0].reshape(&[3, 4])?.square()), vec![m(2, 6)], -2.0, 2.0)),
        ("transpose", case(|v| probe(v[0].transpose()?.square()), vec![m(2, 5)], -2.0, 2.0)),
        ("sum", case(|v| Ok(v[0].square().sum()), vec![m(2, 3)], -2.0, 2.0)),
        ("mean", case(|v| Ok(v[0].square().mean()), vec![m(2, 3)], -2.0, 2.0)),
        ("sum_axis", case(|v| probe(v[0].sum_axis(1)?.square()), vec![m(3, 4)], -2.0, 2.0)),
        ("mean_axis", case(|v| probe(v[0].mean_axis(0)?.square()), vec![m(3, 4)], -2.0, 2.0)),
        ("gather_rows", case(|v| probe(v[0].gather_rows(&[2, 0, 2, 1])?.square()), vec![m(3, 2)], -2.0, 2.0)),
        (
            "selective_scan",
            Box::new(|rng: &mut ChaCha8Rng| {
                let pts = vec![
                    Tensor::randn(&[6, 3], 1.0, rng),
                    Tensor::uniform(&[6, 3], 0.01, 0.5, rng),
                    Tensor::uniform(&[3, 2], -2.0, -0.1, rng),
                    Tensor::randn(&[6, 2], 1.0, rng),
                    Tensor::randn(&[6, 2], 1.0, rng),
                    Tensor::randn(&[3], 1.0, rng),
                ];
                grad_check_many(|v| probe(v[0].selective_scan(v[1], v[2], v[3], v[4], v[5])?), &pts, STEP)
            }),
        ),
    ]
}

fn tiny_vision() -> VisionConfig {
    VisionConfig {
        image_size: 8,
        patch: 4,
        width: 6,
        depth: 1,
        state: 3,
        embed_dim: 4,
    }
}

fn composites() -> Vec<(&'static str, Check)> {
    vec![
        (
            "ar_loss",
            Box::new(|rng: &mut ChaCha8Rng| {
                let cfg = tiny_vision();
                let enc = VisionEncoder::new(cfg.clone());
                let head = ArHead { width: cfg.width };
                let mut store = ParamStore::new();
                enc.init(&mut store, rng);
                head.init(&mut store, rng);
                let tokens = Tensor::randn(&[4, cfg.width], 1.0, rng);
                let targets = Tensor::randn(&[4, cfg.width], 1.0, rng);
                let w1 = Tensor::randn(&[cfg.width, cfg.width], 0.4, rng);
                grad_check_many(
                    |v| {
                        let bind = Binder::with_vars(v[0].graph(), &store, [("ar_head.w1".to_string(), v[1])]);
                        let out = enc.encode_tokens(&bind, v[0], None, crate::encoders::EncoderMode::Causal)?;
                        ar_loss(&bind, out, &head, v[0].graph().constant(targets.clone()))
                    },
                    &[tokens, w1],
                    STEP,
                )
            }),
        ),
        (
            "contrastive_loss",
            Box::new(|rng: &mut ChaCha8Rng| {
                let pts = vec![
                    Tensor::randn(&[4, 5], 1.0, rng),
                    Tensor::randn(&[4, 5], 1.0, rng),
                    Tensor::scalar(rng.random_range(0.05f64..0.5).ln()),
                ];
                grad_check_many(|v| contrastive_loss(unit_rows(v[0])?, unit_rows(v[1])?, v[2].exp()), &pts, STEP)
            }),
        ),
        (
            "sft_loss",
            Box::new(|rng: &mut ChaCha8Rng| {
                let vocab = Vocab::build(&["a b c d e f"])?;
                let cfg = DecoderConfig {
                    width: 6,
                    layers: 2,
                    state: 3,
                    ..DecoderConfig::new(vocab.len(), 5)
                };
                let dec = ReportDecoder::new(cfg);
                let mut store = ParamStore::new();
                dec.init(&mut store, rng);
                let target = Report::new("b d a f", &vocab);
                let visual = Tensor::randn(&[3, 5], 1.0, rng);
                let pts = vec![Tensor::randn(&[5, 6], 0.5, rng), Tensor::randn(&[6, 10], 0.4, rng)];
                grad_check_many(
                    |v| {
                        let bind = Binder::with_vars(
                            v[0].graph(),
                            &store,
                            [("dec.mapper".to_string(), v[0]), ("dec.head".to_string(), v[1])],
                        );
                        sft_loss(&bind, &dec, v[0].graph().constant(visual.clone()), &[4, 5], &target)
                    },
                    &pts,
                    STEP,
                )
            }),
        ),
        (
            "mae_loss",
            Box::new(|rng: &mut ChaCha8Rng| {
                let cfg = tiny_vision();
                let enc = VisionEncoder::new(cfg.clone());
                let dec = MaeDecoder::new(cfg.width, cfg.state, cfg.num_patches(), cfg.patch_dim());
                let mut store = ParamStore::new();
                enc.init(&mut store, rng);
                dec.init(&mut store, rng);
                let img = ImageGrid::new(8, 8, Tensor::uniform(&[192], 0.0, 1.0, rng).into_data())?;
                let mask_seed: u64 = rng.random();
                let pts = vec![
                    Tensor::randn(&[cfg.patch_dim(), cfg.width], 0.1, rng),
                    Tensor::randn(&[cfg.width, cfg.patch_dim()], 0.3, rng),
                ];
                grad_check_many(
                    |v| {
                        let bind = Binder::with_vars(
                            v[0].graph(),
                            &store,
                            [("vision.patch_proj".to_string(), v[0]), ("mae.out".to_string(), v[1])],
                        );
                        mae_loss_baseline(&bind, &img, 0.5, &enc, &dec, &mut ChaCha8Rng::seed_from_u64(mask_seed))
                    },
                    &pts,
                    STEP,
                )
            }),
        ),
    ]
}

/// Finite-difference checks of every differentiable primitive and composite loss,
/// `points` random points each.
pub fn gradient_suite(points: usize, seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, check) in primitives().into_iter().chain(composites()) {
        let mut worst = 0.0f64;
        for _ in 0..points {
            worst = worst.max(check(&mut rng)?);
        }
        out.push(GradCase {
            name: name.to_string(),
            points,
            worst,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanReport {
    pub cases: usize,
    /// largest |chunked - sequential| over all cases
    pub max_diff: f64,
    pub causal_instances: usize,
    pub causal_violations: usize,
}

/// Chunked against sequential scans on random shapes, and perturbation tests of causality.
pub fn scan_suite(cases: usize, causal_instances: usize, seed: u64) -> Result<ScanReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_diff = 0.0f64;
    for _ in 0..cases {
        let l = rng.random_range(1..=512);
        let chunk = rng.random_range(1..=l);
        let (d, s) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let u = Tensor::randn(&[l, d], 1.0, &mut rng);
        let a = Tensor::uniform(&[d, s], -3.0, -0.05, &mut rng);
        let delta = Tensor::uniform(&[l, d], 0.001, 0.5, &mut rng);
        let b = Tensor::randn(&[l, s], 1.0, &mut rng);
        let c = Tensor::randn(&[l, s], 1.0, &mut rng);
        let skip = Tensor::randn(&[d], 1.0, &mut rng);
        let (ab, bb) = discretize(&a, &delta, &b)?;
        let seq = selective_scan_sequential(&u, &ab, &bb, &c, &skip)?;
        let chk = selective_scan_chunked(&u, &ab, &bb, &c, &skip, chunk)?;
        max_diff = max_diff.max(seq.max_abs_diff(&chk));
    }
    let mut violations = 0;
    for _ in 0..causal_instances {
        let l = rng.random_range(4..=48);
        let block = MambaBlock::new("probe", BlockConfig::new(8, 4));
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng);
        let x = Tensor::randn(&[l, 8], 1.0, &mut rng);
        let t = rng.random_range(1..l);
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[t * 8..(t + 1) * 8] {
            *v += rng.random_range(0.5..2.0);
        }
        let run = |x: &Tensor| -> Result<Tensor> {
            let g = Graph::new();
            let y = block.forward(&Binder::frozen(&g, &store), g.constant(x.clone()), &Traversal::causal(l))?;
            Ok(y.value().as_ref().clone())
        };
        let (y1, y2) = (run(&x)?, run(&x2)?);
        let before_same = y1.data()[..t * 8] == y2.data()[..t * 8];
        let at_differs = y1.data()[t * 8..(t + 1) * 8] != y2.data()[t * 8..(t + 1) * 8];
        if !(before_same && at_differs) {
            violations += 1;
        }
    }
    Ok(ScanReport {
        cases,
        max_diff,
        causal_instances,
        causal_violations: violations,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanBench {
    pub lengths: Vec<usize>,
    /// seconds per forward pass
    pub block: Vec<f64>,
    pub attention: Vec<f64>,
    pub block_exponent: f64,
    pub attention_exponent: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn power_law_exponent(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

fn best_of(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Forward wall-clock of one causal Mamba block and of plain attention at each length.
pub fn scan_bench(lengths: &[usize], width: usize, reps: usize, seed: u64) -> Result<ScanBench> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = MambaBlock::new("bench", BlockConfig::new(width, 16));
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng);
    let (mut tb, mut ta) = (Vec::new(), Vec::new());
    for &l in lengths {
        let x = Tensor::randn(&[l, width], 1.0, &mut rng);
        let trav = Traversal::causal(l);
        tb.push(best_of(reps, || {
            let g = Graph::new();
            block.forward(&Binder::frozen(&g, &store), g.constant(x.clone()), &trav)?;
            Ok(())
        })?);
        ta.push(best_of(reps, || reference_attention(&x).map(|_| ()))?);
    }
    let lf: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
    Ok(ScanBench {
        lengths: lengths.to_vec(),
        block_exponent: power_law_exponent(&lf, &tb),
        attention_exponent: power_law_exponent(&lf, &ta),
        block: tb,
        attention: ta,
    })
}
