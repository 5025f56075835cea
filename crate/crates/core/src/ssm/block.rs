use rand::Rng;
use serde::{Deserialize, Serialize};

use super::direction::{inverse, Traversal};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, silu, softplus, vecmat, Tensor, Var, RMS_EPS};
use crate::params::{Binder, ParamStore};

/// Width of the SwiGLU hidden layer: `floor(8 * width / 3)` rounded up to a multiple of 8.
pub fn swiglu_hidden(width: usize) -> usize {
    (8 * width / 3).div_ceil(8) * 8
}

/// Shape of one Mamba block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    /// Model width `D`.
    pub width: usize,
    /// State size `S` per channel.
    pub state: usize,
}

impl BlockConfig {
    pub fn new(width: usize, state: usize) -> Self {
        Self { width, state }
    }

    pub fn hidden(&self) -> usize {
        swiglu_hidden(self.width)
    }
}

/// `W_out(silu(x W_in1) * (x W_in2))`.
pub fn swiglu<'g>(x: Var<'g>, w_in1: Var<'g>, w_in2: Var<'g>, w_out: Var<'g>) -> Result<Var<'g>> {
    let gate = x.matmul(w_in1)?.silu();
    let lin = x.matmul(w_in2)?;
    gate.mul(lin)?.matmul(w_out)
}

/// Inverse of softplus, `ln(e^y - 1)`.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// A selective state-space block whose parameters live under `prefix` in a [`ParamStore`].
///
/// ```text
/// xn    = rms_norm(x)
/// u     = xn W_x                    scan branch
/// z     = xn W_z                    gate branch
/// delta = softplus(u W_delta + bias)
/// y     = mean over directions of scan(u, delta, -exp(a_log), u W_b, u W_c, d_skip)
/// out   = x + swiglu(y * silu(z))
/// ```
#[derive(Clone, Debug)]
pub struct MambaBlock {
    prefix: String,
    cfg: BlockConfig,
}

impl MambaBlock {
    pub fn new(prefix: impl Into<String>, cfg: BlockConfig) -> Self {
        Self {
            prefix: prefix.into(),
            cfg,
        }
    }

    pub fn config(&self) -> BlockConfig {
        self.cfg
    }

    fn name(&self, field: &str) -> String {
        format!("{}.{field}", self.prefix)
    }

    /// Writes freshly initialized parameters into `store`.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let (d, s, h) = (self.cfg.width, self.cfg.state, self.cfg.hidden());
        let std_d = 1.0 / (d as f64).sqrt();
        store.insert(self.name("norm_gain"), Tensor::ones(&[d]));
        store.insert(self.name("w_x"), Tensor::randn(&[d, d], std_d, rng));
        store.insert(self.name("w_z"), Tensor::randn(&[d, d], std_d, rng));
        store.insert(self.name("w_delta"), Tensor::randn(&[d, d], 0.1 * std_d, rng));
        let bias: Vec<f64> = (0..d)
            .map(|_| {
                // log-uniform step size in [1e-3, 1e-1]
                let dt = (rng.random_range(0.001f64.ln()..0.1f64.ln())).exp();
                softplus_inv(dt)
            })
            .collect();
        store.insert(self.name("delta_bias"), Tensor::from_vec(bias));
        store.insert(self.name("w_b"), Tensor::randn(&[d, s], std_d, rng));
        store.insert(self.name("w_c"), Tensor::randn(&[d, s], std_d, rng));
        let a_log: Vec<f64> = (0..d).flat_map(|_| (1..=s).map(|k| (k as f64).ln())).collect();
        store.insert(self.name("a_log"), Tensor::new(vec![d, s], a_log).expect("a_log shape"));
        store.insert(self.name("d_skip"), Tensor::ones(&[d]));
        store.insert(self.name("w_in1"), Tensor::randn(&[d, h], std_d, rng));
        store.insert(self.name("w_in2"), Tensor::randn(&[d, h], std_d, rng));
        store.insert(self.name("w_out"), Tensor::randn(&[h, d], 0.5 / (h as f64).sqrt(), rng));
    }

    /// Runs the block over `x: [L, D]`.
    pub fn forward<'g>(&self, bind: &Binder<'g, '_>, x: Var<'g>, trav: &Traversal) -> Result<Var<'g>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.cfg.width {
            return Err(Error::shape(
                "mamba_block",
                format!("tokens {shape:?} for width {}", self.cfg.width),
            ));
        }
        if trav.len() != shape[0] {
            return Err(Error::contract(format!(
                "grid {:?} does not cover {} tokens",
                trav.grid, shape[0]
            )));
        }
        let p = |f: &str| bind.param(&self.name(f));
        let xn = x.rms_norm(p("norm_gain")?, RMS_EPS)?;
        let u = xn.matmul(p("w_x")?)?;
        let z = xn.matmul(p("w_z")?)?;
        let delta = u.matmul(p("w_delta")?)?.add(p("delta_bias")?)?.softplus();
        let b = u.matmul(p("w_b")?)?;
        let c = u.matmul(p("w_c")?)?;
        let a = p("a_log")?.exp().scale(-1.0);
        let d_skip = p("d_skip")?;

        let mut merged: Option<Var<'g>> = None;
        for dir in &trav.directions {
            let y = if dir.is_identity() {
                u.selective_scan(delta, a, b, c, d_skip)?
            } else {
                let order = dir.order(trav.grid);
                let y = u.gather_rows(&order)?.selective_scan(
                    delta.gather_rows(&order)?,
                    a,
                    b.gather_rows(&order)?,
                    c.gather_rows(&order)?,
                    d_skip,
                )?;
                y.gather_rows(&inverse(&order))?
            };
            merged = Some(match merged {
                None => y,
                Some(acc) => acc.add(y)?,
            });
        }
        let mut y = merged.expect("nonempty directions");
        if trav.directions.len() > 1 {
            y = y.scale(1.0 / trav.directions.len() as f64);
        }
        let gated = y.mul(z.silu())?;
        let ffn = swiglu(gated, p("w_in1")?, p("w_in2")?, p("w_out")?)?;
        x.add(ffn)
    }

    /// Borrowed weights for recurrent single-token inference.
    pub fn params<'a>(&self, store: &'a ParamStore) -> Result<SsmParams<'a>> {
        let g = |f: &str| store.get(&self.name(f));
        Ok(SsmParams {
            cfg: self.cfg,
            norm_gain: g("norm_gain")?,
            w_x: g("w_x")?,
            w_z: g("w_z")?,
            w_delta: g("w_delta")?,
            delta_bias: g("delta_bias")?,
            w_b: g("w_b")?,
            w_c: g("w_c")?,
            a: g("a_log")?.data().iter().map(|v| -v.exp()).collect(),
            d_skip: g("d_skip")?,
            w_in1: g("w_in1")?,
            w_in2: g("w_in2")?,
            w_out: g("w_out")?,
        })
    }
}

/// A block's weights, borrowed from the store, for token-at-a-time evaluation.
pub struct SsmParams<'a> {
    cfg: BlockConfig,
    norm_gain: &'a Tensor,
    w_x: &'a Tensor,
    w_z: &'a Tensor,
    w_delta: &'a Tensor,
    delta_bias: &'a Tensor,
    w_b: &'a Tensor,
    w_c: &'a Tensor,
    /// `-exp(a_log)`, `[D, S]`
    a: Vec<f64>,
    d_skip: &'a Tensor,
    w_in1: &'a Tensor,
    w_in2: &'a Tensor,
    w_out: &'a Tensor,
}

impl SsmParams<'_> {
    /// A zeroed recurrent state, `[D, S]`.
    pub fn zero_state(&self) -> Vec<f64> {
        vec![0.0; self.cfg.width * self.cfg.state]
    }

    /// Advances the recurrence by one token, returning the block output for it.
    pub fn step(&self, x: &[f64], h: &mut [f64]) -> Vec<f64> {
        let (d, s) = (self.cfg.width, self.cfg.state);
        let ms = x.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        let xn: Vec<f64> = x.iter().zip(self.norm_gain.data()).map(|(v, g)| v * inv * g).collect();
        let u = vecmat(&xn, self.w_x);
        let z = vecmat(&xn, self.w_z);
        let delta: Vec<f64> = vecmat(&u, self.w_delta)
            .iter()
            .zip(self.delta_bias.data())
            .map(|(v, b)| softplus(v + b))
            .collect();
        let b = vecmat(&u, self.w_b);
        let c = vecmat(&u, self.w_c);
        let mut gated = vec![0.0; d];
        for ch in 0..d {
            let dt = delta[ch];
            let du = dt * u[ch];
            let mut acc = 0.0;
            for k in 0..s {
                let i = ch * s + k;
                h[i] = (dt * self.a[i]).exp() * h[i] + du * b[k];
                acc += c[k] * h[i];
            }
            let y = acc + self.d_skip.data()[ch] * u[ch];
            gated[ch] = y * silu(z[ch]);
        }
        let g1 = vecmat(&gated, self.w_in1);
        let g2 = vecmat(&gated, self.w_in2);
        let hidden: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a * sigmoid(*a) * b).collect();
        let ffn = vecmat(&hidden, self.w_out);
        x.iter().zip(&ffn).map(|(a, b)| a + b).collect()
    }
}

/// Plain single-head attention `softmax(x xᵀ / sqrt(D)) x`, quadratic in sequence length.
pub fn reference_attention(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::shape("attention", format!("{:?} is not 2-D", x.shape())));
    }
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let xt = crate::numerics::transpose2(x)?;
    let scores = crate::numerics::matmul(x, &xt)?.map(|v| v / (d as f64).sqrt());
    let weights = crate::numerics::softmax_rows(&scores);
    let out = crate::numerics::matmul(&weights, x)?;
    debug_assert_eq!(out.shape(), [l, d]);
    Ok(out)
}
