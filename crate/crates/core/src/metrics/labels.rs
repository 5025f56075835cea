use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::encoders::normalize;
use crate::error::Result;

pub const NUM_LABELS: usize = 14;

const TABLE: &str = include_str!("labels.tsv");

/// Negation cues; a keyword hit is negated when a cue starts at most this many tokens earlier.
const NEGATIONS: [&[&str]; 5] = [&["no"], &["without"], &["free", "of"], &["negative", "for"], &["clear", "of"]];
const NEGATION_WINDOW: usize = 6;

struct LabelTable {
    names: Vec<String>,
    phrases: Vec<Vec<Vec<String>>>,
}

fn table() -> &'static LabelTable {
    static T: OnceLock<LabelTable> = OnceLock::new();
    T.get_or_init(|| {
        let mut names = Vec::new();
        let mut phrases = Vec::new();
        for line in TABLE.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
            let (name, kw) = line.split_once('\t').expect("label table row");
            names.push(name.to_string());
            phrases.push(kw.split('|').map(normalize).collect());
        }
        assert_eq!(names.len(), NUM_LABELS);
        LabelTable { names, phrases }
    })
}

/// Label names in fixed order.
pub fn label_names() -> &'static [String] {
    &table().names
}

pub fn label_index(name: &str) -> Option<usize> {
    table().names.iter().position(|n| n == name)
}

/// Keyword phrases for one label, each as normalized tokens.
pub fn label_keywords(label: usize) -> &'static [Vec<String>] {
    &table().phrases[label]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelVector(pub [bool; NUM_LABELS]);

impl LabelVector {
    pub fn from_indices(idx: impl IntoIterator<Item = usize>) -> Self {
        let mut v = [false; NUM_LABELS];
        for i in idx {
            v[i] = true;
        }
        Self(v)
    }

    pub fn positives(&self) -> Vec<usize> {
        (0..NUM_LABELS).filter(|&i| self.0[i]).collect()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }
}

fn starts_with_at(tokens: &[String], at: usize, phrase: &[impl AsRef<str>]) -> bool {
    at + phrase.len() <= tokens.len() && phrase.iter().zip(&tokens[at..]).all(|(p, t)| p.as_ref() == t)
}

fn negated(sentence: &[String], hit: usize) -> bool {
    let lo = hit.saturating_sub(NEGATION_WINDOW);
    (lo..hit).any(|j| NEGATIONS.iter().any(|cue| starts_with_at(sentence, j, cue)))
}

/// Rule-based labeler: keyword hits per sentence, negated by a nearby preceding cue.
pub fn extract_labels(text: &str) -> LabelVector {
    let tokens = normalize(text);
    let t = table();
    let mut out = [false; NUM_LABELS];
    for sentence in tokens.split(|tok| tok == ".") {
        for (label, phrases) in t.phrases.iter().enumerate() {
            if out[label] {
                continue;
            }
            out[label] = phrases.iter().any(|ph| {
                (0..sentence.len()).any(|i| starts_with_at(sentence, i, ph) && !negated(sentence, i))
            });
        }
    }
    LabelVector(out)
}

/// Precision, recall and F1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn prf(tp: usize, fp: usize, fn_: usize) -> Prf {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf { precision, recall, f1 }
}

fn counts(p: &LabelVector, g: &LabelVector) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for i in 0..NUM_LABELS {
        match (p.0[i], g.0[i]) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    (tp, fp, fn_)
}

fn label_pairs<S: AsRef<str>>(pred: &[S], gt: &[S]) -> Result<Vec<(LabelVector, LabelVector)>> {
    super::check_aligned(pred.len(), gt.len())?;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (extract_labels(p.as_ref()), extract_labels(g.as_ref())))
        .collect())
}

/// Micro-averaged over every (sample, label) position.
pub fn clinical_efficacy<S: AsRef<str>>(pred: &[S], gt: &[S]) -> Result<Prf> {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in label_pairs(pred, gt)? {
        let c = counts(&p, &g);
        tp += c.0;
        fp += c.1;
        fn_ += c.2;
    }
    Ok(prf(tp, fp, fn_))
}

/// Per-sample P/R/F1 averaged over samples.
pub fn clinical_efficacy_macro<S: AsRef<str>>(pred: &[S], gt: &[S]) -> Result<Prf> {
    let pairs = label_pairs(pred, gt)?;
    let n = pairs.len() as f64;
    let mut acc = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
    for (p, g) in &pairs {
        let (tp, fp, fn_) = counts(p, g);
        let s = prf(tp, fp, fn_);
        acc.precision += s.precision / n;
        acc.recall += s.recall / n;
        acc.f1 += s.f1 / n;
    }
    Ok(acc)
}


#[cfg(test)]
mod tests {
    use super::*;

    fn on(v: &LabelVector, name: &str) -> bool {
        v.get(label_index(name).unwrap())
    }

    #[test]
    fn negation_example() {
        let v = extract_labels("no pleural effusion . small pneumothorax .");
        assert!(!on(&v, "pleural_effusion"));
        assert!(on(&v, "pneumothorax"));
        assert_eq!(v.count(), 1);
    }

    #[test]
    fn empty_and_generic_negation() {
        assert_eq!(extract_labels("").count(), 0);
        assert_eq!(extract_labels("no acute findings").count(), 0);
    }

    #[test]
    fn negation_window_is_six_tokens() {
        assert!(!on(&extract_labels("no a b c d e effusion"), "pleural_effusion"));
        assert!(on(&extract_labels("no a b c d e f effusion"), "pleural_effusion"));
        assert!(on(&extract_labels("no pneumothorax . effusion"), "pleural_effusion"));
        assert!(!on(&extract_labels("lungs are clear of consolidation"), "consolidation"));
    }

    #[test]
    fn ce_example() {
        let p = clinical_efficacy(&["small effusion ."], &["small effusion . pneumothorax ."]).unwrap();
        assert!((p.precision - 1.0).abs() < 1e-12);
        assert!((p.recall - 0.5).abs() < 1e-12);
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-12);
        let z = clinical_efficacy(&["normal ."], &["pneumothorax ."]).unwrap();
        assert_eq!((z.precision, z.recall, z.f1), (0.0, 0.0, 0.0));
    }
}
