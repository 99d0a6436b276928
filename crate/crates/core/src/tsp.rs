//! Instances, tours and tour metrics for 2D Euclidean TSP.

use rand::Rng;

use crate::error::{Error, Result};

/// `n >= 2` points in the unit square.
#[derive(Clone, Debug, PartialEq)]
pub struct TspInstance {
    coords: Vec<[f64; 2]>,
}

impl TspInstance {
    pub fn new(coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::InvalidInstance(format!(
                "need at least 2 nodes, got {}",
                coords.len()
            )));
        }
        if let Some(i) = coords
            .iter()
            .position(|c| c.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(Error::InvalidInstance(format!(
                "node {i} at {:?} is outside the unit square",
                coords[i]
            )));
        }
        Ok(Self { coords })
    }

    pub fn n(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.coords[i], self.coords[j]);
        (a[0] - b[0]).hypot(a[1] - b[1])
    }

    /// Row-major `n x n` distance matrix.
    pub fn distance_matrix(&self) -> Vec<f64> {
        let n = self.n();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                d[i * n + j] = self.dist(i, j);
            }
        }
        d
    }

    /// Same points listed in a different order: node `i` of the result is
    /// node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(self.n(), perm)?;
        Ok(Self {
            coords: perm.iter().map(|&p| self.coords[p]).collect(),
        })
    }
}

/// `n` i.i.d. uniform points in the unit square.
pub fn generate_instance<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<TspInstance> {
    if n < 2 {
        return Err(Error::InvalidInstance(format!("need at least 2 nodes, got {n}")));
    }
    let coords = (0..n)
        .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
        .collect();
    TspInstance::new(coords)
}

pub fn check_permutation(n: usize, order: &[usize]) -> Result<()> {
    let mut seen = vec![false; n];
    let ok = order.len() == n
        && order
            .iter()
            .all(|&i| i < n && !std::mem::replace(&mut seen[i], true));
    if ok {
        Ok(())
    } else {
        Err(Error::NotPermutation {
            n,
            order: order.to_vec(),
        })
    }
}

/// Closed-cycle Euclidean length of `order`.
pub fn tour_length(inst: &TspInstance, order: &[usize]) -> Result<f64> {
    check_permutation(inst.n(), order)?;
    Ok(cycle_length(inst, order))
}

pub(crate) fn cycle_length(inst: &TspInstance, order: &[usize]) -> f64 {
    let n = order.len();
    (0..n).map(|i| inst.dist(order[i], order[(i + 1) % n])).sum()
}

/// A closed tour. `length` always equals the cycle length of `order`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tour {
    pub order: Vec<usize>,
    pub length: f64,
    /// Model log-probability of producing `order`, when model-generated.
    pub log_prob: Option<f64>,
}

impl Tour {
    pub fn new(inst: &TspInstance, order: Vec<usize>) -> Result<Self> {
        let length = tour_length(inst, &order)?;
        Ok(Self {
            order,
            length,
            log_prob: None,
        })
    }

    pub fn with_log_prob(mut self, log_prob: f64) -> Self {
        self.log_prob = Some(log_prob);
        self
    }

    /// The same cycle in canonical orientation, length recomputed.
    pub fn canonical(&self, inst: &TspInstance) -> Result<Self> {
        Ok(Self {
            log_prob: self.log_prob,
            ..Self::new(inst, canonicalize(&self.order))?
        })
    }
}

/// Rotates node 0 to the front, then reverses the cycle if needed so that
/// `order[1] < order[n - 1]`.
pub fn canonicalize(order: &[usize]) -> Vec<usize> {
    let n = order.len();
    let Some(start) = order.iter().position(|&v| v == 0) else {
        return order.to_vec();
    };
    let mut out: Vec<usize> = (0..n).map(|i| order[(start + i) % n]).collect();
    if n > 2 && out[1] > out[n - 1] {
        out[1..].reverse();
    }
    out
}

/// Percent excess of `pred_len` over `opt_len`.
pub fn optimality_gap(pred_len: f64, opt_len: f64) -> Result<f64> {
    if opt_len <= 0.0 || opt_len.is_nan() {
        return Err(Error::NonPositiveOptimum(opt_len));
    }
    Ok((pred_len / opt_len - 1.0) * 100.0)
}

/// Mean of per-instance gaps: the figure reported everywhere in this crate.
pub fn mean_gap(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &(pred, opt) in pairs {
        total += optimality_gap(pred, opt)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Gap of the mean lengths. Kept for comparison with [`mean_gap`].
pub fn ratio_of_means_gap(pairs: &[(f64, f64)]) -> Result<f64> {
    let pred: f64 = pairs.iter().map(|p| p.0).sum();
    let opt: f64 = pairs.iter().map(|p| p.1).sum();
    optimality_gap(pred, opt)
}
