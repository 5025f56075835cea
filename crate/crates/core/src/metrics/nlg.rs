//! Corpus-level text-overlap metrics over pre-normalized token lists.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub type Tokens = Vec<String>;

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn nonempty(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::contract("empty corpus"));
    }
    Ok(())
}

/// Corpus BLEU-n with uniform weights, no smoothing.
pub fn bleu(candidates: &[Tokens], references: &[Vec<Tokens>], n: usize) -> Result<f64> {
    super::check_aligned(candidates.len(), references.len())?;
    nonempty(candidates.len())?;
    if !(1..=4).contains(&n) {
        return Err(Error::contract(format!("bleu order {n} outside 1..=4")));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::contract("sample without references"));
        }
        c_len += cand.len();
        // closest reference length, shorter on ties
        r_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        for k in 1..=n {
            let cg = ngrams(cand, k);
            let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
            for r in refs {
                for (g, c) in ngrams(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &cg {
                matched[k - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                total[k - 1] += c;
            }
        }
    }
    if matched.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = (1.0 - r_len as f64 / c_len as f64).min(0.0).exp();
    Ok(bp * log_p.exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean per-sample LCS F-measure (beta = 1).
pub fn rouge_l(candidates: &[Tokens], references: &[Tokens]) -> Result<f64> {
    super::check_aligned(candidates.len(), references.len())?;
    nonempty(candidates.len())?;
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| {
            let l = lcs(c, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / c.len() as f64;
            let rc = l / r.len() as f64;
            2.0 * p * rc / (p + rc)
        })
        .sum();
    Ok(sum / candidates.len() as f64)
}

const METEOR_ALPHA: f64 = 0.9;
const METEOR_BETA: f64 = 3.0;
const METEOR_GAMMA: f64 = 0.5;

/// Exact-match METEOR for one pair.
pub fn meteor_sentence(cand: &[String], reference: &[String]) -> f64 {
    let mut used = vec![false; reference.len()];
    // (candidate index, reference index) in candidate order
    let mut align = Vec::new();
    for (i, w) in cand.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && &reference[j] == w) {
            used[j] = true;
            align.push((i, j));
        }
    }
    let m = align.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + align
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
    fmean * (1.0 - penalty)
}

pub fn meteor(candidates: &[Tokens], references: &[Tokens]) -> Result<f64> {
    super::check_aligned(candidates.len(), references.len())?;
    nonempty(candidates.len())?;
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| meteor_sentence(c, r))
        .sum();
    Ok(sum / candidates.len() as f64)
}

const CIDER_SIGMA: f64 = 6.0;

/// Gaussian length penalty for a candidate/reference length difference.
pub fn cider_length_penalty(delta: f64) -> f64 {
    (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp()
}

/// CIDEr-D over n-gram orders `1..=4`, scaled by 10.
pub fn cider(candidates: &[Tokens], references: &[Tokens]) -> Result<f64> {
    cider_orders(candidates, references, 4)
}

/// CIDEr-D restricted to n-gram orders `1..=max_n`.
pub fn cider_orders(candidates: &[Tokens], references: &[Tokens], max_n: usize) -> Result<f64> {
    super::check_aligned(candidates.len(), references.len())?;
    let m = candidates.len();
    if m < 2 {
        return Err(Error::contract(format!("cider needs at least 2 samples, got {m}")));
    }
    let mut total = 0.0;
    for n in 1..=max_n {
        let ref_grams: Vec<_> = references.iter().map(|r| ngrams(r, n)).collect();
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for g in &ref_grams {
            for k in g.keys() {
                *df.entry(k).or_insert(0) += 1;
            }
        }
        let idf = |g: &[String]| (m as f64 / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        let vec = |grams: &BTreeMap<&[String], usize>| -> BTreeMap<Vec<String>, f64> {
            let count: usize = grams.values().sum();
            grams
                .iter()
                .map(|(g, &c)| (g.to_vec(), c as f64 / count as f64 * idf(g)))
                .collect()
        };
        for (i, cand) in candidates.iter().enumerate() {
            let cv = vec(&ngrams(cand, n));
            let rv = vec(&ref_grams[i]);
            let norm = |v: &BTreeMap<Vec<String>, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
            let (nc, nr) = (norm(&cv), norm(&rv));
            if nc == 0.0 || nr == 0.0 {
                continue;
            }
            let dot: f64 = cv
                .iter()
                .filter_map(|(g, &c)| rv.get(g).map(|&r| c.min(r) * r))
                .sum();
            let delta = cand.len() as f64 - references[i].len() as f64;
            total += dot / (nc * nr) * cider_length_penalty(delta);
        }
    }
    Ok(10.0 * total / (max_n as f64 * m as f64))
}
