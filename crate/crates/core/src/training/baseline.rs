//! Greedy-rollout baseline and its replacement test.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::Result;
use crate::model::PolicyModel;
use crate::search::greedy_batch;
use crate::tsp::TspInstance;

/// Significance level of the replacement test.
pub const ALPHA: f64 = 0.05;

/// One-sided paired t-test of `H1: mean(a - b) < 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairedTTest {
    pub mean_diff: f64,
    pub t: f64,
    pub p: f64,
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> PairedTTest {
    assert_eq!(a.len(), b.len(), "paired samples must align");
    let n = a.len();
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return PairedTTest {
            mean_diff: mean,
            t: f64::NAN,
            p: 1.0,
        };
    }
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let (t, p) = if se > 0.0 {
        let t = mean / se;
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("n >= 2 gives positive freedom");
        (t, dist.cdf(t))
    } else if mean < 0.0 {
        (f64::NEG_INFINITY, 0.0)
    } else {
        (f64::NAN, 1.0)
    };
    PairedTTest { mean_diff: mean, t, p }
}

/// Whether `current` lengths are significantly shorter than `baseline` ones.
pub fn significantly_better(current: &[f64], baseline: &[f64]) -> bool {
    let test = paired_t_test(current, baseline);
    test.mean_diff < 0.0 && test.p < ALPHA
}

/// Frozen copy of the policy used as the REINFORCE baseline. Its
/// parameters change only through [`RolloutBaseline::maybe_replace`].
#[derive(Clone, Debug)]
pub struct RolloutBaseline {
    pub model: PolicyModel,
    /// Greedy mean length of the baseline on the current validation set.
    pub val_mean: f64,
}

/// Outcome of a replacement check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReplaceCheck {
    pub current_mean: f64,
    pub baseline_mean: f64,
    pub test: PairedTTest,
    pub replaced: bool,
}

fn greedy_lengths(model: &PolicyModel, set: &[TspInstance]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(set.len());
    for chunk in set.chunks(crate::bench::CHUNK) {
        let refs: Vec<&TspInstance> = chunk.iter().collect();
        out.extend(greedy_batch(model, &refs)?.into_iter().map(|t| t.length));
    }
    Ok(out)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

impl RolloutBaseline {
    pub fn new(model: &PolicyModel, val: &[TspInstance]) -> Result<Self> {
        Ok(Self {
            model: model.clone(),
            val_mean: mean(&greedy_lengths(model, val)?),
        })
    }

    /// Greedy-decodes both policies on `val` and copies `current` into the
    /// baseline when it is significantly better.
    pub fn maybe_replace(&mut self, current: &PolicyModel, val: &[TspInstance]) -> Result<ReplaceCheck> {
        let cur = greedy_lengths(current, val)?;
        let base = greedy_lengths(&self.model, val)?;
        let test = paired_t_test(&cur, &base);
        let replaced = test.mean_diff < 0.0 && test.p < ALPHA;
        let check = ReplaceCheck {
            current_mean: mean(&cur),
            baseline_mean: mean(&base),
            test,
            replaced,
        };
        if replaced {
            self.model = current.clone();
            self.val_mean = check.current_mean;
        } else {
            self.val_mean = check.baseline_mean;
        }
        Ok(check)
    }

    /// Re-measures the baseline on a fresh validation set.
    pub fn rescore(&mut self, val: &[TspInstance]) -> Result<()> {
        self.val_mean = mean(&greedy_lengths(&self.model, val)?);
        Ok(())
    }
}
