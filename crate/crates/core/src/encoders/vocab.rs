use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases, isolates `. , : ;` as tokens, drops other punctuation, splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for ch in text.chars().flat_map(char::to_lowercase) {
        match ch {
            '.' | ',' | ':' | ';' => {
                spaced.push(' ');
                spaced.push(ch);
                spaced.push(' ');
            }
            c if c.is_ascii_punctuation() => {}
            c => spaced.push(c),
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

/// Normalized text as a single space-joined string.
pub fn normalize_text(text: &str) -> String {
    normalize(text).join(" ")
}

/// Word-level vocabulary with fixed reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Every token of the normalized corpus, most frequent first, ties lexicographic.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::contract("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for tok in normalize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(entries.into_iter().map(|(t, _)| t)))
    }

    fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(words).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Normalized ids of `text` without bos/eos.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        normalize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Space-joined tokens, skipping pad/bos/eos.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, reserved tokens first.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::contract("vocabulary must start with the reserved tokens"));
        }
        let vocab = Self::from_tokens(lines[RESERVED.len()..].iter().map(|s| s.to_string()));
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::contract("vocabulary has duplicate tokens"));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// A report as raw text plus its `bos ... eos` id sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Report {
    pub raw: String,
    pub ids: Vec<usize>,
}

impl Report {
    pub fn new(raw: impl Into<String>, vocab: &Vocab) -> Self {
        let raw = raw.into();
        let mut ids = Vec::with_capacity(raw.len() / 4 + 2);
        ids.push(BOS);
        ids.extend(vocab.encode(&raw));
        ids.push(EOS);
        Self { raw, ids }
    }

    /// Ids between bos and eos.
    pub fn body(&self) -> &[usize] {
        &self.ids[1..self.ids.len() - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sentence_vocabulary() {
        let v = Vocab::build(&["No effusion."]).unwrap();
        assert_eq!(v.len(), 7);
        for t in ["no", "effusion", "."] {
            assert!(v.contains(t));
        }
        assert_eq!(v.token(PAD), "<pad>");
        assert_eq!(v.id("<eos>"), EOS);
    }

    #[test]
    fn ordering_is_frequency_then_lexicographic() {
        let v = Vocab::build(&["b a c a", "c b a"]).unwrap();
        assert_eq!(v.token(4), "a");
        assert_eq!(v.token(5), "b");
        assert_eq!(v.token(6), "c");
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(
            normalize("Heart: Normal, lungs (clear); X-ray."),
            vec!["heart", ":", "normal", ",", "lungs", "clear", ";", "xray", "."]
        );
    }

    #[test]
    fn round_trip_and_unknowns() {
        let text = "No pleural effusion. Small pneumothorax.";
        let v = Vocab::build(&[text]).unwrap();
        let r = Report::new(text, &v);
        assert_eq!(r.ids.first(), Some(&BOS));
        assert_eq!(r.ids.last(), Some(&EOS));
        assert!(!r.body().contains(&BOS) && !r.body().contains(&EOS));
        assert_eq!(v.decode(&r.ids), normalize_text(text));
        assert_eq!(v.encode("zebra effusion"), vec![UNK, v.id("effusion")]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(Vocab::build::<&str>(&[]).is_err());
    }

    #[test]
    fn text_serialization_round_trip() {
        let v = Vocab::build(&["a b b c"]).unwrap();
        let text = v.to_text();
        assert!(text.starts_with("<pad>\n<bos>\n<eos>\n<unk>\nb\n"));
        assert_eq!(Vocab::from_text(&text).unwrap(), v);
        assert!(Vocab::from_text("a\nb\n").is_err());
    }
}
