//! Report-generation metrics: n-gram overlap scores and clinical efficacy.

mod labels;
mod nlg;

use serde::{Deserialize, Serialize};

pub use labels::{
    clinical_efficacy, clinical_efficacy_macro, extract_labels, label_index, label_keywords, label_names,
    LabelVector, Prf, NUM_LABELS,
};
pub use nlg::{bleu, cider, cider_length_penalty, cider_orders, meteor, meteor_sentence, rouge_l, Tokens};

use crate::encoders::normalize;
use crate::error::{Error, Result};

pub(crate) fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::contract(format!("{a} candidates for {b} references")));
    }
    Ok(())
}

/// Scores for one corpus; field order is the serialized key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider: f64,
    pub ce_p: f64,
    pub ce_r: f64,
    pub ce_f1: f64,
    pub n: usize,
}

impl MetricReport {
    /// One-line JSON record.
    pub fn to_record(&self) -> String {
        serde_json::to_string(self).expect("metric report serializes")
    }
}

fn ctx<T>(metric: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Metric {
        metric,
        source: Box::new(e),
    })
}

/// All metrics over identically normalized predictions and references.
pub fn evaluate_corpus<S: AsRef<str>>(pred: &[S], gt: &[S]) -> Result<MetricReport> {
    ctx("evaluate", check_aligned(pred.len(), gt.len()))?;
    if pred.is_empty() {
        return Err(Error::Metric {
            metric: "evaluate",
            source: Box::new(Error::contract("empty corpus")),
        });
    }
    let cands: Vec<Tokens> = pred.iter().map(|s| normalize(s.as_ref())).collect();
    let refs: Vec<Tokens> = gt.iter().map(|s| normalize(s.as_ref())).collect();
    let multi: Vec<Vec<Tokens>> = refs.iter().map(|r| vec![r.clone()]).collect();
    let ce = ctx("clinical_efficacy", clinical_efficacy(pred, gt))?;
    Ok(MetricReport {
        b1: ctx("bleu1", bleu(&cands, &multi, 1))?,
        b2: ctx("bleu2", bleu(&cands, &multi, 2))?,
        b3: ctx("bleu3", bleu(&cands, &multi, 3))?,
        b4: ctx("bleu4", bleu(&cands, &multi, 4))?,
        rouge_l: ctx("rouge_l", rouge_l(&cands, &refs))?,
        meteor: ctx("meteor", meteor(&cands, &refs))?,
        cider: ctx("cider", cider(&cands, &refs))?,
        ce_p: ce.precision,
        ce_r: ce.recall,
        ce_f1: ce.f1,
        n: pred.len(),
    })
}
