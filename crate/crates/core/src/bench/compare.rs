//! Side-by-side comparison of evaluation reports.

use std::io::Write;

use super::{EvalReport, EvalRow, RunInfo};
use crate::error::{Error, Result};
use crate::search::DecodeMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Win,
    Tie,
    Lose,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Win => "win",
            Self::Tie => "tie",
            Self::Lose => "lose",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub info: RunInfo,
    pub decode: DecodeMode,
    /// One cell per size, with the outcome against every other run of the
    /// same training size and decode mode.
    pub cells: Vec<(EvalRow, Outcome)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub sizes: Vec<usize>,
    pub rows: Vec<ComparisonRow>,
}

fn decode_key(d: DecodeMode) -> (u8, usize) {
    match d {
        DecodeMode::Greedy => (0, 0),
        DecodeMode::Sample { k } => (1, k),
        DecodeMode::Beam { width } => (2, width),
    }
}

/// Rows keyed by (paradigm, training size, decode mode), grouped by decode
/// mode. A cell wins when its gap is strictly below every competitor's.
pub fn compare_runs(reports: &[EvalReport]) -> Result<Comparison> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Misaligned("no reports to compare".into()))?;
    let sizes: Vec<usize> = first.rows.iter().map(|r| r.size).collect();
    for r in reports {
        let s: Vec<usize> = r.rows.iter().map(|r| r.size).collect();
        if s != sizes {
            return Err(Error::Misaligned(format!(
                "run {} ({}) covers sizes {s:?}, expected {sizes:?}",
                r.info.model, r.decode
            )));
        }
    }
    let modes_of = |info: &RunInfo| {
        let mut m: Vec<(u8, usize)> = reports
            .iter()
            .filter(|r| &r.info == info)
            .map(|r| decode_key(r.decode))
            .collect();
        m.sort_unstable();
        m.dedup();
        m
    };
    let modes = modes_of(&first.info);
    if let Some(r) = reports.iter().find(|r| modes_of(&r.info) != modes) {
        return Err(Error::Misaligned(format!(
            "run {} does not share the decode modes of run {}",
            r.info.model, first.info.model
        )));
    }
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by_key(|&i| {
        let r = &reports[i];
        (decode_key(r.decode), r.info.paradigm.clone(), r.info.train_size)
    });
    let rows = order
        .into_iter()
        .map(|i| {
            let r = &reports[i];
            let cells = r
                .rows
                .iter()
                .enumerate()
                .map(|(c, row)| {
                    let best_other = reports
                        .iter()
                        .enumerate()
                        .filter(|(j, o)| *j != i && o.info.train_size == r.info.train_size && o.decode == r.decode)
                        .map(|(_, o)| o.rows[c].mean_gap_pct)
                        .fold(f64::INFINITY, f64::min);
                    let outcome = if best_other.is_infinite() || row.mean_gap_pct == best_other {
                        Outcome::Tie
                    } else if row.mean_gap_pct < best_other {
                        Outcome::Win
                    } else {
                        Outcome::Lose
                    };
                    (row.clone(), outcome)
                })
                .collect();
            ComparisonRow {
                info: r.info.clone(),
                decode: r.decode,
                cells,
            }
        })
        .collect();
    Ok(Comparison { sizes, rows })
}

/// Wide CSV: one line per run and decode mode, a gap and outcome column per
/// size.
pub fn write_comparison(w: impl Write, c: &Comparison) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["paradigm", "train_size", "decode", "model"].map(String::from).to_vec();
    for s in &c.sizes {
        header.push(format!("gap_n{s}"));
        header.push(format!("result_n{s}"));
    }
    header.push("ref".into());
    out.write_record(&header)?;
    for row in &c.rows {
        let mut rec = vec![
            row.info.paradigm.clone(),
            row.info.train_size.to_string(),
            row.decode.to_string(),
            row.info.model.clone(),
        ];
        for (cell, outcome) in &row.cells {
            rec.push(cell.mean_gap_pct.to_string());
            rec.push(outcome.as_str().into());
        }
        let refs: Vec<&str> = row.cells.iter().map(|(c, _)| c.reference.as_str()).collect();
        rec.push(if refs.iter().all(|r| *r == "exact") {
            "exact".into()
        } else {
            "heuristic-reference".into()
        });
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
