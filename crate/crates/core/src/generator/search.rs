use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A left-to-right model that returns next-token log-probabilities after consuming a token.
pub trait StepModel {
    type State: Clone;

    fn advance(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxLength,
}

/// Emitted tokens (eos included when reached) and the log-probability of each.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<usize>,
    pub logprobs: Vec<f64>,
    pub stop: StopReason,
}

impl Hypothesis {
    pub fn score(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    pub fn mean_logprob(&self) -> f64 {
        if self.ids.is_empty() {
            0.0
        } else {
            self.score() / self.ids.len() as f64
        }
    }
}

/// Highest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, j| if v[j] > v[b] { j } else { b })
}

/// Decodes from `state` after feeding `start`, emitting at most `max_length` tokens.
pub fn search<M: StepModel>(
    model: &M,
    state: M::State,
    start: usize,
    eos: usize,
    strategy: Strategy,
    max_length: usize,
) -> Result<Hypothesis> {
    if max_length == 0 {
        return Err(Error::contract("max_length must be positive"));
    }
    match strategy {
        Strategy::Greedy => greedy(model, state, start, eos, max_length),
        Strategy::Beam(0) => Err(Error::contract("beam width must be at least 1")),
        Strategy::Beam(k) => beam(model, state, start, eos, k, max_length),
    }
}

fn greedy<M: StepModel>(
    model: &M,
    mut state: M::State,
    start: usize,
    eos: usize,
    max_length: usize,
) -> Result<Hypothesis> {
    let mut dist = model.advance(&mut state, start)?;
    let (mut ids, mut logprobs) = (Vec::new(), Vec::new());
    loop {
        let t = argmax(&dist);
        ids.push(t);
        logprobs.push(dist[t]);
        if t == eos {
            return Ok(Hypothesis { ids, logprobs, stop: StopReason::Eos });
        }
        if ids.len() == max_length {
            return Ok(Hypothesis { ids, logprobs, stop: StopReason::MaxLength });
        }
        dist = model.advance(&mut state, t)?;
    }
}

struct Live<S> {
    state: S,
    dist: Vec<f64>,
    ids: Vec<usize>,
    logprobs: Vec<f64>,
    score: f64,
}

fn beam<M: StepModel>(
    model: &M,
    mut state: M::State,
    start: usize,
    eos: usize,
    k: usize,
    max_length: usize,
) -> Result<Hypothesis> {
    let dist = model.advance(&mut state, start)?;
    let mut live = vec![Live { state, dist, ids: Vec::new(), logprobs: Vec::new(), score: 0.0 }];
    let mut done: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() && done.len() < k {
        // (beam, token, summed log-prob, token log-prob): best sum first, then earlier beam,
        // then the larger step log-prob (sums can round to equal), then lower id
        let mut cands: Vec<(usize, usize, f64, f64)> = live
            .iter()
            .enumerate()
            .flat_map(|(b, l)| l.dist.iter().enumerate().map(move |(t, &lp)| (b, t, l.score + lp, lp)))
            .collect();
        let desc = |a: f64, b: f64| b.partial_cmp(&a).unwrap_or(Ordering::Equal);
        cands.sort_by(|x, y| {
            desc(x.2, y.2)
                .then(x.0.cmp(&y.0))
                .then(desc(x.3, y.3))
                .then(x.1.cmp(&y.1))
        });
        cands.truncate(k);
        let mut next = Vec::with_capacity(k);
        for (b, t, score, _) in cands {
            let parent = &live[b];
            let mut ids = parent.ids.clone();
            ids.push(t);
            let mut logprobs = parent.logprobs.clone();
            logprobs.push(parent.dist[t]);
            if t == eos {
                done.push(Hypothesis { ids, logprobs, stop: StopReason::Eos });
            } else if ids.len() == max_length {
                done.push(Hypothesis { ids, logprobs, stop: StopReason::MaxLength });
            } else {
                let mut state = parent.state.clone();
                let dist = model.advance(&mut state, t)?;
                next.push(Live { state, dist, ids, logprobs, score });
            }
        }
        live = next;
    }
    // length-normalized selection, earliest finished wins ties
    let best = done
        .into_iter()
        .reduce(|a, b| if b.mean_logprob() > a.mean_logprob() { b } else { a })
        .expect("beam search finishes at least one hypothesis");
    Ok(best)
}
