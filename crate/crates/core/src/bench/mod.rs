//! Evaluation protocol: fixed-size evaluation, size sweeps, run comparison
//! and plot data.

mod compare;
mod plot;

use std::io::{Read, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SolverTag};
use crate::error::{Error, Result};
use crate::model::PolicyModel;
use crate::rng;
use crate::search::{decode_batch, DecodeConfig, DecodeMode};
use crate::solvers::{solve_reference, ReferenceKind, HELD_KARP_MAX};
use crate::tsp::{mean_gap, Tour, TspInstance};

pub use compare::{compare_runs, write_comparison, Comparison, ComparisonRow, Outcome};
pub use plot::{curves_from_reports, emit_plot_data, read_curve_csv, Curve};

/// Instances decoded together. Fixed so that results never depend on the
/// number of worker threads.
pub const CHUNK: usize = 64;

/// Anything that turns instances into tours.
pub trait TourPolicy: Sync {
    /// `keys` identify instances within their dataset, for seeding.
    fn decode_chunk(&self, batch: &[&TspInstance], keys: &[u64], decode: &DecodeConfig) -> Result<Vec<Tour>>;
}

impl TourPolicy for PolicyModel {
    fn decode_chunk(&self, batch: &[&TspInstance], keys: &[u64], decode: &DecodeConfig) -> Result<Vec<Tour>> {
        decode_batch(self, batch, keys, decode)
    }
}

/// Identity of an evaluated run.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RunInfo {
    pub model: String,
    pub paradigm: String,
    pub train_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub size: usize,
    pub count: usize,
    pub mean_len: f64,
    pub mean_gap_pct: f64,
    pub reference: ReferenceKind,
    /// Wall time; informational only.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub info: RunInfo,
    pub decode: DecodeMode,
    pub rows: Vec<EvalRow>,
}

/// Reference lengths, in canonical orientation: the dataset's own, else exact up to
/// [`HELD_KARP_MAX`] nodes and 2-opt beyond.
pub fn references(ds: &Dataset, exact_only: bool) -> Result<(Vec<f64>, ReferenceKind)> {
    if let (Some(sol), Some(kind)) = (&ds.solutions, ds.reference_kind()) {
        if exact_only && kind != ReferenceKind::Exact {
            return Err(Error::ReferenceUnavailable { n: ds.size() });
        }
        let lengths = sol
            .iter()
            .zip(&ds.instances)
            .map(|(t, inst)| Ok(t.canonical(inst)?.length))
            .collect::<Result<Vec<_>>>()?;
        return Ok((lengths, kind));
    }
    if exact_only && ds.size() > HELD_KARP_MAX {
        return Err(Error::ReferenceUnavailable { n: ds.size() });
    }
    let solved = ds
        .instances
        .par_iter()
        .map(solve_reference)
        .collect::<Result<Vec<_>>>()?;
    let kind = solved.first().map_or(ReferenceKind::Exact, |s| s.1);
    Ok((solved.into_iter().map(|(t, _)| t.length).collect(), kind))
}

/// Decodes every instance, chunked and in parallel; output order matches
/// the input.
pub fn decode_all(policy: &dyn TourPolicy, instances: &[TspInstance], decode: &DecodeConfig) -> Result<Vec<Tour>> {
    let chunks: Vec<Vec<Tour>> = instances
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let refs: Vec<&TspInstance> = chunk.iter().collect();
            let keys: Vec<u64> = (0..chunk.len()).map(|i| (c * CHUNK + i) as u64).collect();
            policy.decode_chunk(&refs, &keys, decode)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Mean length and mean per-instance gap of `policy` on `ds`.
pub fn evaluate(policy: &dyn TourPolicy, ds: &Dataset, decode: &DecodeConfig, exact_only: bool) -> Result<EvalRow> {
    let (refs, kind) = references(ds, exact_only)?;
    evaluate_against(policy, ds, &refs, kind, decode)
}

fn evaluate_against(
    policy: &dyn TourPolicy,
    ds: &Dataset,
    refs: &[f64],
    reference: ReferenceKind,
    decode: &DecodeConfig,
) -> Result<EvalRow> {
    if ds.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    let start = Instant::now();
    let tours = decode_all(policy, &ds.instances, decode)?;
    let seconds = start.elapsed().as_secs_f64();
    // Both sides are measured in canonical orientation, so an optimal tour
    // sums in the same order as its reference and never shows a negative gap.
    let pairs = tours
        .iter()
        .zip(&ds.instances)
        .zip(refs)
        .map(|((t, inst), &r)| Ok((t.canonical(inst)?.length, r)))
        .collect::<Result<Vec<(f64, f64)>>>()?;
    Ok(EvalRow {
        size: ds.size(),
        count: ds.len(),
        mean_len: pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64,
        mean_gap_pct: mean_gap(&pairs)?,
        reference,
        seconds,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub sizes: Vec<usize>,
    pub count: usize,
    pub decodes: Vec<DecodeConfig>,
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("sweep sizes must be strictly increasing: {:?}", self.sizes)));
        }
        if self.sizes[0] < 2 {
            return Err(Error::Config("sweep sizes must be at least 2".into()));
        }
        if self.count == 0 || self.decodes.is_empty() {
            return Err(Error::Config("sweep needs at least one instance and one decode mode".into()));
        }
        self.decodes.iter().try_for_each(DecodeConfig::validate)
    }
}

/// The test set a sweep uses for `size`: regenerated from the seed and
/// labelled with the reference solver for that size.
pub fn sweep_dataset(size: usize, count: usize, seed: u64) -> Result<Dataset> {
    let solver = if size <= HELD_KARP_MAX {
        SolverTag::HeldKarp
    } else {
        SolverTag::TwoOpt
    };
    Dataset::generate(size, count, rng::derive(seed, rng::tag::SWEEP), solver)
}

/// One report per decode mode, each with one row per size.
pub fn generalization_sweep(
    policy: &dyn TourPolicy,
    info: &RunInfo,
    spec: &SweepSpec,
    exact_only: bool,
) -> Result<Vec<EvalReport>> {
    spec.validate()?;
    if let Some(&n) = spec.sizes.iter().find(|&&n| exact_only && n > HELD_KARP_MAX) {
        return Err(Error::ReferenceUnavailable { n });
    }
    let sets = spec
        .sizes
        .iter()
        .map(|&size| sweep_dataset(size, spec.count, spec.seed))
        .collect::<Result<Vec<_>>>()?;
    sweep_on(policy, info, &sets, &spec.decodes, exact_only)
}

/// [`generalization_sweep`] over prepared test sets, one per size, so that
/// several models can share the reference solves.
pub fn sweep_on(
    policy: &dyn TourPolicy,
    info: &RunInfo,
    sets: &[Dataset],
    decodes: &[DecodeConfig],
    exact_only: bool,
) -> Result<Vec<EvalReport>> {
    if sets.is_empty() || decodes.is_empty() {
        return Err(Error::Config("sweep needs at least one test set and one decode mode".into()));
    }
    let mut reports: Vec<EvalReport> = decodes
        .iter()
        .map(|d| EvalReport {
            info: info.clone(),
            decode: d.mode,
            rows: Vec::new(),
        })
        .collect();
    for ds in sets {
        let (refs, kind) = references(ds, exact_only)?;
        for (report, decode) in reports.iter_mut().zip(decodes) {
            log::info!("sweep {} n={} decode={}", info.model, ds.size(), decode.mode);
            report.rows.push(evaluate_against(policy, ds, &refs, kind, decode)?);
        }
    }
    Ok(reports)
}

pub const REPORT_HEADER: [&str; 10] = [
    "model",
    "paradigm",
    "train_size",
    "decode",
    "size",
    "count",
    "mean_len",
    "mean_gap_pct",
    "ref",
    "seconds",
];

pub fn write_reports(w: impl Write, reports: &[EvalReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(REPORT_HEADER)?;
    for r in reports {
        for row in &r.rows {
            out.write_record([
                r.info.model.clone(),
                r.info.paradigm.clone(),
                r.info.train_size.to_string(),
                r.decode.to_string(),
                row.size.to_string(),
                row.count.to_string(),
                row.mean_len.to_string(),
                row.mean_gap_pct.to_string(),
                row.reference.as_str().to_string(),
                format!("{:.3}", row.seconds),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a report CSV; consecutive rows of one run and decode mode form one
/// report.
pub fn read_reports(r: impl Read) -> Result<Vec<EvalReport>> {
    let mut input = csv::Reader::from_reader(r);
    let header: Vec<String> = input.headers()?.iter().map(str::to_string).collect();
    if header != REPORT_HEADER {
        return Err(Error::Config(format!("unexpected report header {header:?}")));
    }
    let mut reports: Vec<EvalReport> = Vec::new();
    for record in input.records() {
        let rec = record?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number `{}` in column {}", &rec[i], REPORT_HEADER[i])))
        };
        let int = |i: usize| -> Result<usize> {
            rec[i]
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad integer `{}` in column {}", &rec[i], REPORT_HEADER[i])))
        };
        let info = RunInfo {
            model: rec[0].to_string(),
            paradigm: rec[1].to_string(),
            train_size: int(2)?,
        };
        let decode: DecodeMode = rec[3].parse()?;
        let reference = match &rec[8] {
            "exact" => ReferenceKind::Exact,
            "heuristic-reference" => ReferenceKind::Heuristic,
            other => return Err(Error::Config(format!("unknown reference tag `{other}`"))),
        };
        let row = EvalRow {
            size: int(4)?,
            count: int(5)?,
            mean_len: num(6)?,
            mean_gap_pct: num(7)?,
            reference,
            seconds: num(9)?,
        };
        match reports.last_mut() {
            Some(last) if last.info == info && last.decode == decode => last.rows.push(row),
            _ => reports.push(EvalReport {
                info,
                decode,
                rows: vec![row],
            }),
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod stubs {
    use super::*;
    use crate::solvers::{held_karp_solve, nearest_neighbor};

    /// Returns the exact optimum.
    pub struct Optimal;

    impl TourPolicy for Optimal {
        fn decode_chunk(&self, batch: &[&TspInstance], _: &[u64], _: &DecodeConfig) -> Result<Vec<Tour>> {
            batch.iter().map(|i| held_karp_solve(i)).collect()
        }
    }

    /// The exact optimum, rotated by the key and reversed on odd keys.
    pub struct Shifted;

    impl TourPolicy for Shifted {
        fn decode_chunk(&self, batch: &[&TspInstance], keys: &[u64], _: &DecodeConfig) -> Result<Vec<Tour>> {
            batch
                .iter()
                .zip(keys)
                .map(|(i, &k)| {
                    let mut order = held_karp_solve(i)?.order;
                    order.rotate_left(k as usize % i.n());
                    if k % 2 == 1 {
                        order.reverse();
                    }
                    Tour::new(i, order)
                })
                .collect()
        }
    }

    /// Nearest neighbour from node 0.
    pub struct Nearest;

    impl TourPolicy for Nearest {
        fn decode_chunk(&self, batch: &[&TspInstance], _: &[u64], _: &DecodeConfig) -> Result<Vec<Tour>> {
            batch.iter().map(|i| nearest_neighbor(i, 0)).collect()
        }
    }

    /// Uniformly random tours seeded by instance key.
    pub struct Random;

    impl TourPolicy for Random {
        fn decode_chunk(&self, batch: &[&TspInstance], keys: &[u64], _: &DecodeConfig) -> Result<Vec<Tour>> {
            use rand::seq::SliceRandom;
            batch
                .iter()
                .zip(keys)
                .map(|(i, &k)| {
                    let mut order: Vec<usize> = (0..i.n()).collect();
                    order.shuffle(&mut rng::stream(1, 99, k));
                    Tour::new(i, order)
                })
                .collect()
        }
    }
}
