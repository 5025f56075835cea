use rand::Rng;
use serde::{Deserialize, Serialize};

use super::search::StepModel;
use crate::encoders::{Report, Vocab, EOS, UNK};
use crate::error::{Error, Result};
use crate::numerics::{log_softmax_rows, rms_norm_rows, vecmat, Tensor, Var, RMS_EPS};
use crate::params::{Binder, ParamStore};
use crate::ssm::{BlockConfig, MambaBlock, SsmParams, Traversal};

pub const PROMPT: &str = "Generate a comprehensive and detailed diagnosis report for this chest X-ray image.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub state: usize,
    /// generated tokens per report, eos included
    pub max_length: usize,
    pub prompt: String,
    pub freeze_decoder: bool,
    /// width of the visual tokens fed to the mapper
    pub vision_width: usize,
}

impl DecoderConfig {
    pub fn new(vocab_size: usize, vision_width: usize) -> Self {
        Self {
            vocab_size,
            width: 64,
            layers: 4,
            state: 16,
            max_length: 80,
            prompt: PROMPT.to_string(),
            freeze_decoder: true,
            vision_width,
        }
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<Vec<usize>> {
        if self.max_length < 2 {
            return Err(Error::Config(format!("max_length {} < 2", self.max_length)));
        }
        if self.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "decoder vocab size {} but vocabulary has {} tokens",
                self.vocab_size,
                vocab.len()
            )));
        }
        let ids = vocab.encode(&self.prompt);
        if ids.contains(&UNK) {
            return Err(Error::Config("prompt has words outside the vocabulary".into()));
        }
        Ok(ids)
    }
}

/// Causal Mamba report decoder conditioned on mapped visual tokens and a prompt.
///
/// Parameters: `dec.mapper [Dv, D]`, `dec.mapper_bias [D]`, `dec.tok_emb [V, D]`,
/// `dec.blocks.{i}.*`, `dec.norm_gain [D]`, `dec.head [D, V]`.
#[derive(Clone, Debug)]
pub struct ReportDecoder {
    cfg: DecoderConfig,
    blocks: Vec<MambaBlock>,
}

/// Name prefixes of the mapper and of the language decoder proper.
pub const MAPPER_PREFIX: &str = "dec.mapper";
pub const DECODER_PREFIXES: [&str; 4] = ["dec.tok_emb", "dec.blocks.", "dec.norm_gain", "dec.head"];

impl ReportDecoder {
    pub fn new(cfg: DecoderConfig) -> Self {
        let bc = BlockConfig::new(cfg.width, cfg.state);
        let blocks = (0..cfg.layers)
            .map(|i| MambaBlock::new(format!("dec.blocks.{i}"), bc))
            .collect();
        Self { cfg, blocks }
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let (d, v, dv) = (self.cfg.width, self.cfg.vocab_size, self.cfg.vision_width);
        store.insert("dec.mapper", Tensor::randn(&[dv, d], 1.0 / (dv as f64).sqrt(), rng));
        store.insert("dec.mapper_bias", Tensor::zeros(&[d]));
        store.insert("dec.tok_emb", Tensor::randn(&[v, d], 1.0, rng));
        for b in &self.blocks {
            b.init(store, rng);
        }
        store.insert("dec.norm_gain", Tensor::ones(&[d]));
        store.insert("dec.head", Tensor::randn(&[d, v], 1.0 / (d as f64).sqrt(), rng));
    }

    /// `visual W + b`.
    pub fn map_visual<'g>(&self, bind: &Binder<'g, '_>, visual: Var<'g>) -> Result<Var<'g>> {
        visual.matmul(bind.param("dec.mapper")?)?.add(bind.param("dec.mapper_bias")?)
    }

    /// Log-probabilities `[T, V]` for every report position, teacher forced on `inputs`.
    pub fn report_log_probs<'g>(
        &self,
        bind: &Binder<'g, '_>,
        visual: Var<'g>,
        prompt_ids: &[usize],
        inputs: &[usize],
    ) -> Result<Var<'g>> {
        let emb = bind.param("dec.tok_emb")?;
        let mut parts = vec![self.map_visual(bind, visual)?];
        if !prompt_ids.is_empty() {
            parts.push(emb.gather_rows(prompt_ids)?);
        }
        parts.push(emb.gather_rows(inputs)?);
        let mut h = Var::concat(&parts, 0)?;
        let n = h.shape()[0];
        let trav = Traversal::causal(n);
        for b in &self.blocks {
            h = b.forward(bind, h, &trav)?;
        }
        let tail = h.slice(0, n - inputs.len(), n)?;
        let logits = tail
            .rms_norm(bind.param("dec.norm_gain")?, RMS_EPS)?
            .matmul(bind.param("dec.head")?)?;
        Ok(logits.log_softmax())
    }

    /// Decoder weights for token-at-a-time generation.
    pub fn stepper<'a>(&self, store: &'a ParamStore) -> Result<DecoderStepper<'a>> {
        Ok(DecoderStepper {
            blocks: self.blocks.iter().map(|b| b.params(store)).collect::<Result<_>>()?,
            tok_emb: store.get("dec.tok_emb")?,
            mapper: store.get("dec.mapper")?,
            mapper_bias: store.get("dec.mapper_bias")?,
            norm_gain: store.get("dec.norm_gain")?,
            head: store.get("dec.head")?,
        })
    }
}

/// `bos y_1 .. y_T eos` with anything after the first eos dropped.
fn trimmed(ids: &[usize]) -> &[usize] {
    match ids.iter().skip(1).position(|&t| t == EOS) {
        Some(p) => &ids[..p + 2],
        None => ids,
    }
}

/// Teacher-forced mean NLL over report positions only.
pub fn sft_loss<'g>(
    bind: &Binder<'g, '_>,
    decoder: &ReportDecoder,
    visual: Var<'g>,
    prompt_ids: &[usize],
    target: &Report,
) -> Result<Var<'g>> {
    let ids = trimmed(&target.ids);
    if ids.len() < 3 {
        return Err(Error::contract("target report has no tokens"));
    }
    let (inputs, outputs) = (&ids[..ids.len() - 1], &ids[1..]);
    let lp = decoder.report_log_probs(bind, visual, prompt_ids, inputs)?;
    let v = decoder.config().vocab_size;
    let mut onehot = Tensor::zeros(&[outputs.len(), v]);
    for (r, &t) in outputs.iter().enumerate() {
        onehot.data_mut()[r * v + t] = 1.0;
    }
    Ok(lp.mul(bind.constant(onehot))?.sum().scale(-1.0 / outputs.len() as f64))
}

/// Borrowed decoder weights plus the recurrent states of every block.
pub struct DecoderStepper<'a> {
    blocks: Vec<SsmParams<'a>>,
    tok_emb: &'a Tensor,
    mapper: &'a Tensor,
    mapper_bias: &'a Tensor,
    norm_gain: &'a Tensor,
    head: &'a Tensor,
}

#[derive(Clone, Debug)]
pub struct DecoderState {
    h: Vec<Vec<f64>>,
}

impl DecoderStepper<'_> {
    pub fn initial_state(&self) -> DecoderState {
        DecoderState {
            h: self.blocks.iter().map(|b| b.zero_state()).collect(),
        }
    }

    fn feed(&self, state: &mut DecoderState, x: Vec<f64>) -> Vec<f64> {
        let mut x = x;
        for (b, h) in self.blocks.iter().zip(state.h.iter_mut()) {
            x = b.step(&x, h);
        }
        x
    }

    fn log_probs(&self, x: &[f64]) -> Vec<f64> {
        let row = Tensor::new(vec![1, x.len()], x.to_vec()).expect("row");
        let xn = rms_norm_rows(&row, self.norm_gain.data(), RMS_EPS);
        let logits = vecmat(xn.data(), self.head);
        let t = Tensor::new(vec![1, logits.len()], logits).expect("row");
        log_softmax_rows(&t).into_data()
    }

    /// Consumes the visual tokens and the prompt.
    pub fn prime(&self, visual: &Tensor, prompt_ids: &[usize]) -> DecoderState {
        let mut st = self.initial_state();
        for r in 0..visual.rows() {
            let mut x = vecmat(visual.row(r), self.mapper);
            for (a, b) in x.iter_mut().zip(self.mapper_bias.data()) {
                *a += b;
            }
            self.feed(&mut st, x);
        }
        for &t in prompt_ids {
            self.feed(&mut st, self.tok_emb.row(t).to_vec());
        }
        st
    }
}

impl StepModel for DecoderStepper<'_> {
    type State = DecoderState;

    fn advance(&self, state: &mut DecoderState, token: usize) -> Result<Vec<f64>> {
        if token >= self.tok_emb.rows() {
            return Err(Error::contract(format!("token {token} outside vocabulary")));
        }
        let out = self.feed(state, self.tok_emb.row(token).to_vec());
        Ok(self.log_probs(&out))
    }
}
