//! Stage-3 report decoder, its supervised fine-tuning, and greedy/beam decoding.

mod decoder;
mod search;
mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use decoder::{
    sft_loss, DecoderConfig, DecoderState, DecoderStepper, ReportDecoder, DECODER_PREFIXES, MAPPER_PREFIX,
    PROMPT,
};
pub use search::{argmax, search, Hypothesis, StepModel, StopReason, Strategy};
pub use train::{fits, init_sft_store, mean_nll, sft_sample_loss, train_sft, SftConfig, SftOutput};

use crate::encoders::{EncoderMode, ImageGrid, Vocab, VisionConfig, VisionEncoder, BOS, EOS};
use crate::error::Result;
use crate::numerics::Graph;
use crate::params::{Binder, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult {
    pub text: String,
    /// generated ids, eos included when reached
    pub ids: Vec<usize>,
    pub logprobs: Vec<f64>,
    pub stop: StopReason,
}

impl GenerationResult {
    pub fn mean_logprob(&self) -> f64 {
        if self.logprobs.is_empty() {
            0.0
        } else {
            self.logprobs.iter().sum::<f64>() / self.logprobs.len() as f64
        }
    }
}

/// One line of batch generation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub text: String,
    pub stop: StopReason,
    pub mean_logprob: f64,
}

impl GenerationRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Vision encoder, decoder and vocabulary needed to write a report for an image.
pub struct ReportGenerator<'a> {
    pub vision: VisionEncoder,
    pub decoder: ReportDecoder,
    pub mode: EncoderMode,
    pub vocab: &'a Vocab,
    prompt_ids: Vec<usize>,
}

impl<'a> ReportGenerator<'a> {
    pub fn new(vision: VisionConfig, decoder: DecoderConfig, mode: EncoderMode, vocab: &'a Vocab) -> Result<Self> {
        let prompt_ids = decoder.validate(vocab)?;
        Ok(Self {
            vision: VisionEncoder::new(vision),
            decoder: ReportDecoder::new(decoder),
            mode,
            vocab,
            prompt_ids,
        })
    }

    pub fn prompt_ids(&self) -> &[usize] {
        &self.prompt_ids
    }

    pub fn generate(
        &self,
        store: &ParamStore,
        image: &ImageGrid,
        strategy: Strategy,
        max_length: usize,
    ) -> Result<GenerationResult> {
        let g = Graph::new();
        let visual = self.vision.encode(&Binder::frozen(&g, store), image, self.mode)?.tokens.value();
        let stepper = self.decoder.stepper(store)?;
        let state = stepper.prime(&visual, &self.prompt_ids);
        let h = search(&stepper, state, BOS, EOS, strategy, max_length)?;
        Ok(GenerationResult {
            text: self.vocab.decode(&h.ids),
            ids: h.ids,
            logprobs: h.logprobs,
            stop: h.stop,
        })
    }

    /// Independent decodes in parallel, results in input order.
    pub fn generate_batch(
        &self,
        store: &ParamStore,
        images: &[&ImageGrid],
        strategy: Strategy,
        max_length: usize,
    ) -> Result<Vec<GenerationResult>> {
        images
            .par_iter()
            .map(|img| self.generate(store, img, strategy, max_length))
            .collect()
    }
}
