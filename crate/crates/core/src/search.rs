//! Inference procedures over a frozen policy: greedy, best-of-k sampling and
//! beam search.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tspnco_autograd::{Graph, Var};

use crate::error::{Error, Result};
use crate::model::{DecoderCache, Mode, PolicyModel, StepInput};
use crate::rng;
use crate::tsp::{Tour, TspInstance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DecodeMode {
    Greedy,
    Sample { k: usize },
    Beam { width: usize },
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Greedy => write!(f, "greedy"),
            Self::Sample { k } => write!(f, "sample:{k}"),
            Self::Beam { width } => write!(f, "beam:{width}"),
        }
    }
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    /// Parses `greedy`, `sample:K` or `beam:W`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad decode spec `{s}` (expected greedy, sample:K or beam:W)"));
        let count = |v: &str| match v.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(k),
            _ => Err(bad()),
        };
        match s.split_once(':') {
            None if s == "greedy" => Ok(Self::Greedy),
            Some(("sample", k)) => Ok(Self::Sample { k: count(k)? }),
            Some(("beam", w)) => Ok(Self::Beam { width: count(w)? }),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    /// Base seed of the sampling streams.
    pub seed: u64,
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            DecodeMode::Sample { k: 0 } | DecodeMode::Beam { width: 0 } => {
                Err(Error::Config("sample count and beam width must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Result of best-of-k sampling.
#[derive(Clone, Debug)]
pub struct SampleResult {
    pub best: Tour,
    /// Length of every rollout, in stream order.
    pub lengths: Vec<f64>,
}

/// Result of a beam search: the headline (shortest) tour and the tour the
/// model considers most likely.
#[derive(Clone, Debug)]
pub struct BeamResult {
    pub shortest: Tour,
    pub most_likely: Tour,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Inverse-CDF draw from log-probabilities with uniform `u` in `[0, 1)`.
pub fn sample_index(log_probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &lp) in log_probs.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        acc += lp.exp();
        last = j;
        if u < acc {
            return j;
        }
    }
    last
}

/// Rolls out `rows` partial tours in lockstep until complete. `choose` gets
/// `(row, step, log_probs)` and returns the next node. With `keep` the
/// chosen log-probabilities stay on the tape and their per-row sum is
/// returned as a `[rows]` variable; otherwise each step is dropped from the
/// tape once read.
pub(crate) fn rollout<F>(
    g: &mut Graph,
    model: &PolicyModel,
    cache: &DecoderCache,
    rows: Option<&[usize]>,
    keep: bool,
    mut choose: F,
) -> Result<(Vec<Vec<usize>>, Vec<f64>, Option<Var>)>
where
    F: FnMut(usize, usize, &[f64]) -> usize,
{
    let n = cache.n;
    let r = rows.map_or(cache.batch, <[usize]>::len);
    let mut orders: Vec<Vec<usize>> = vec![Vec::with_capacity(n); r];
    let mut allowed = vec![true; r * n];
    let mut sums = vec![0.0; r];
    let mut total: Option<Var> = None;
    let mut first = vec![0; r];
    let mut last = vec![0; r];
    for t in 0..n {
        let mark = g.mark();
        let input = StepInput {
            rows,
            ends: (t > 0).then_some((&first[..], &last[..])),
            allowed: &allowed,
        };
        let lp = model.step(g, cache, &input)?;
        let mut picks = Vec::with_capacity(r);
        {
            let values = g.value(lp).data();
            for row in 0..r {
                let lps = &values[row * n..(row + 1) * n];
                let j = choose(row, t, lps);
                if j >= n || !allowed[row * n + j] {
                    return Err(Error::Config(format!("step {t}: node {j} is not selectable")));
                }
                sums[row] += lps[j];
                picks.push(j);
            }
        }
        if keep {
            let chosen = g.pick_last(lp, &picks)?;
            total = Some(match total {
                Some(acc) => g.add(acc, chosen)?,
                None => chosen,
            });
        } else {
            g.truncate(mark);
        }
        for (row, &j) in picks.iter().enumerate() {
            allowed[row * n + j] = false;
            orders[row].push(j);
            if t == 0 {
                first[row] = j;
            }
            last[row] = j;
        }
    }
    Ok((orders, sums, total))
}

fn eval_cache(g: &mut Graph, model: &PolicyModel, batch: &[&TspInstance]) -> Result<DecoderCache> {
    let emb = model.encode(g, batch, Mode::Eval, &mut Vec::new())?;
    model.precompute(g, &emb)
}

fn tours(batch: &[&TspInstance], orders: Vec<Vec<usize>>, sums: &[f64], rows: Option<&[usize]>) -> Result<Vec<Tour>> {
    orders
        .into_iter()
        .enumerate()
        .map(|(r, order)| {
            let inst = batch[rows.map_or(r, |rs| rs[r])];
            Ok(Tour::new(inst, order)?.with_log_prob(sums[r]))
        })
        .collect()
}

/// Greedy decoding of a batch of same-size instances.
pub fn greedy_batch(model: &PolicyModel, batch: &[&TspInstance]) -> Result<Vec<Tour>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let cache = eval_cache(&mut g, model, batch)?;
    let (orders, sums, _) = rollout(&mut g, model, &cache, None, false, |_, _, lp| argmax(lp))?;
    tours(batch, orders, &sums, None)
}

pub fn greedy_decode(model: &PolicyModel, inst: &TspInstance) -> Result<Tour> {
    Ok(greedy_batch(model, &[inst])?.remove(0))
}

/// Seed of the sampling streams for the instance identified by `key`.
pub fn sample_seed(seed: u64, key: u64) -> u64 {
    rng::derive(seed, key)
}

/// `k` independent rollouts; rollout `j` always uses stream `j`, so the
/// first `k` rollouts are shared by every larger `k`.
pub fn sample_decode(model: &PolicyModel, inst: &TspInstance, k: usize, seed: u64) -> Result<SampleResult> {
    if k == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let mut g = Graph::new();
    let cache = eval_cache(&mut g, model, &[inst])?;
    let rows = vec![0; k];
    let mut streams: Vec<_> = (0..k as u64).map(|j| rng::stream(seed, rng::tag::SAMPLING, j)).collect();
    let (orders, sums, _) = rollout(&mut g, model, &cache, Some(&rows), false, |row, _, lp| {
        sample_index(lp, streams[row].random::<f64>())
    })?;
    let all = tours(&[inst], orders, &sums, Some(&rows))?;
    let lengths = all.iter().map(|t| t.length).collect();
    let best = all
        .into_iter()
        .reduce(|a, b| if b.length < a.length { b } else { a })
        .expect("k >= 1");
    Ok(SampleResult { best, lengths })
}

struct Beam {
    order: Vec<usize>,
    logp: f64,
}

/// Breadth-wise search keeping the `width` partial tours with the highest
/// cumulative log-probability. Ties are broken by the last step's
/// log-probability, then lexicographically.
pub fn beam_search(model: &PolicyModel, inst: &TspInstance, width: usize) -> Result<BeamResult> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let n = inst.n();
    let mut g = Graph::new();
    let cache = eval_cache(&mut g, model, &[inst])?;
    let mut beams = vec![Beam {
        order: Vec::with_capacity(n),
        logp: 0.0,
    }];
    for t in 0..n {
        let r = beams.len();
        let rows = vec![0; r];
        let mut allowed = vec![true; r * n];
        for (b, beam) in beams.iter().enumerate() {
            for &v in &beam.order {
                allowed[b * n + v] = false;
            }
        }
        let first: Vec<usize> = beams.iter().map(|b| b.order.first().copied().unwrap_or(0)).collect();
        let last: Vec<usize> = beams.iter().map(|b| b.order.last().copied().unwrap_or(0)).collect();
        let mark = g.mark();
        let lp = model.step(
            &mut g,
            &cache,
            &StepInput {
                rows: Some(&rows),
                ends: (t > 0).then_some((&first[..], &last[..])),
                allowed: &allowed,
            },
        )?;
        let values = g.value(lp).data().to_vec();
        g.truncate(mark);

        // (cumulative, step, parent, node)
        let mut cands: Vec<(f64, f64, usize, usize)> = Vec::new();
        for (b, beam) in beams.iter().enumerate() {
            for j in 0..n {
                if allowed[b * n + j] {
                    let step = values[b * n + j];
                    cands.push((beam.logp + step, step, b, j));
                }
            }
        }
        let order_of = |c: &(f64, f64, usize, usize)| (&beams[c.2].order, c.3);
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(b.1.total_cmp(&a.1))
                .then_with(|| {
                    let (pa, ja) = order_of(a);
                    let (pb, jb) = order_of(b);
                    pa.cmp(pb).then(ja.cmp(&jb))
                })
        });
        cands.truncate(width);
        beams = cands
            .into_iter()
            .map(|(logp, _, b, j)| {
                let mut order = beams[b].order.clone();
                order.push(j);
                Beam { order, logp }
            })
            .collect();
    }
    let mut shortest: Option<Tour> = None;
    let mut most_likely: Option<Tour> = None;
    for beam in beams {
        let tour = Tour::new(inst, beam.order)?.with_log_prob(beam.logp);
        if most_likely.is_none() {
            most_likely = Some(tour.clone());
        }
        if shortest.as_ref().is_none_or(|s| tour.length < s.length) {
            shortest = Some(tour);
        }
    }
    Ok(BeamResult {
        shortest: shortest.expect("at least one beam"),
        most_likely: most_likely.expect("at least one beam"),
    })
}

/// Decodes a batch of same-size instances. `keys` identify the instances
/// for seeding, so results do not depend on how a dataset is chunked.
pub fn decode_batch(
    model: &PolicyModel,
    batch: &[&TspInstance],
    keys: &[u64],
    config: &DecodeConfig,
) -> Result<Vec<Tour>> {
    config.validate()?;
    match config.mode {
        DecodeMode::Greedy => greedy_batch(model, batch),
        DecodeMode::Sample { k } => batch
            .iter()
            .zip(keys)
            .map(|(inst, &key)| Ok(sample_decode(model, inst, k, sample_seed(config.seed, key))?.best))
            .collect(),
        DecodeMode::Beam { width } => batch
            .iter()
            .map(|inst| Ok(beam_search(model, inst, width)?.shortest))
            .collect(),
    }
}

/// Step-wise re-evaluation of `log p(order)` under the model.
pub fn tour_log_prob(model: &PolicyModel, inst: &TspInstance, order: &[usize]) -> Result<f64> {
    crate::tsp::check_permutation(inst.n(), order)?;
    let mut g = Graph::new();
    let cache = eval_cache(&mut g, model, &[inst])?;
    let (_, sums, _) = rollout(&mut g, model, &cache, None, false, |_, t, _| order[t])?;
    Ok(sums[0])
}
