//! Exact and heuristic reference solvers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tsp::{canonicalize, check_permutation, cycle_length, Tour, TspInstance};

pub const BRUTE_FORCE_MAX: usize = 10;
pub const HELD_KARP_MAX: usize = 20;

/// Exhaustive search over the `(n-1)!/2` distinct cycles.
pub fn brute_force_solve(inst: &TspInstance) -> Result<Tour> {
    let n = inst.n();
    if n > BRUTE_FORCE_MAX {
        return Err(Error::SizeLimit {
            solver: "brute force",
            n,
            max: BRUTE_FORCE_MAX,
        });
    }
    if n <= 3 {
        return Tour::new(inst, (0..n).collect());
    }
    let dist = inst.distance_matrix();
    let mut search = BruteForce {
        n,
        dist: &dist,
        path: vec![0],
        used: vec![false; n],
        best_len: f64::INFINITY,
        best: Vec::new(),
    };
    search.used[0] = true;
    search.extend(0.0);
    Tour::new(inst, canonicalize(&search.best))
}

struct BruteForce<'a> {
    n: usize,
    dist: &'a [f64],
    path: Vec<usize>,
    used: Vec<bool>,
    best_len: f64,
    best: Vec<usize>,
}

impl BruteForce<'_> {
    fn extend(&mut self, len: f64) {
        let n = self.n;
        let last = *self.path.last().unwrap();
        if self.path.len() == n {
            // Each cycle is visited in both directions; keep one.
            if self.path[1] > self.path[n - 1] {
                return;
            }
            let total = len + self.dist[last * n];
            if total < self.best_len {
                self.best_len = total;
                self.best = self.path.clone();
            }
            return;
        }
        for next in 1..n {
            if self.used[next] {
                continue;
            }
            self.used[next] = true;
            self.path.push(next);
            self.extend(len + self.dist[last * n + next]);
            self.path.pop();
            self.used[next] = false;
        }
    }
}

/// Held-Karp dynamic program over (subset, last node) with node 0 fixed as
/// the start. O(n^2 2^n) time, O(n 2^n) memory.
pub fn held_karp_solve(inst: &TspInstance) -> Result<Tour> {
    let n = inst.n();
    if n > HELD_KARP_MAX {
        return Err(Error::SizeLimit {
            solver: "Held-Karp",
            n,
            max: HELD_KARP_MAX,
        });
    }
    if n <= 3 {
        return Tour::new(inst, (0..n).collect());
    }
    let dist = inst.distance_matrix();
    // Bit j of a mask stands for node j + 1.
    let m = n - 1;
    let full = (1usize << m) - 1;
    let mut cost = vec![f64::INFINITY; (full + 1) * m];
    let mut parent = vec![u8::MAX; (full + 1) * m];
    for j in 0..m {
        cost[(1 << j) * m + j] = dist[j + 1];
    }
    for mask in 1..=full {
        if mask.count_ones() < 2 {
            continue;
        }
        let mut bits = mask;
        while bits != 0 {
            let j = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            let prev = mask ^ (1 << j);
            let prev_row = &cost[prev * m..prev * m + m];
            let into_j = (j + 1) * n + 1;
            let mut best = f64::INFINITY;
            let mut arg = u8::MAX;
            let mut rest = prev;
            while rest != 0 {
                let k = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                // dist is symmetric: d(k+1, j+1) == dist[(j+1)*n + k+1]
                let c = prev_row[k] + dist[into_j + k];
                if c < best {
                    best = c;
                    arg = k as u8;
                }
            }
            cost[mask * m + j] = best;
            parent[mask * m + j] = arg;
        }
    }
    let mut best = f64::INFINITY;
    let mut last = 0;
    for j in 0..m {
        let c = cost[full * m + j] + dist[(j + 1) * n];
        if c < best {
            best = c;
            last = j;
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut mask = full;
    let mut j = last;
    loop {
        order.push(j + 1);
        let p = parent[mask * m + j];
        mask ^= 1 << j;
        if p == u8::MAX {
            break;
        }
        j = p as usize;
    }
    order.push(0);
    order.reverse();
    Tour::new(inst, canonicalize(&order))
}

/// Greedy nearest-unvisited construction from `start`; ties go to the lower
/// node index.
pub fn nearest_neighbor(inst: &TspInstance, start: usize) -> Result<Tour> {
    let n = inst.n();
    if start >= n {
        return Err(Error::InvalidInstance(format!("start node {start} out of range for n={n}")));
    }
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut current = start;
    visited[start] = true;
    order.push(start);
    for _ in 1..n {
        let mut best = f64::INFINITY;
        let mut next = usize::MAX;
        for (j, &seen) in visited.iter().enumerate() {
            if !seen {
                let d = inst.dist(current, j);
                if d < best {
                    best = d;
                    next = j;
                }
            }
        }
        visited[next] = true;
        order.push(next);
        current = next;
    }
    Tour::new(inst, order)
}

/// First-improvement 2-opt until no segment reversal shortens the tour.
pub fn two_opt(inst: &TspInstance, tour: &Tour) -> Result<Tour> {
    let n = inst.n();
    check_permutation(n, &tour.order)?;
    let mut order = tour.order.clone();
    if n < 4 {
        return Tour::new(inst, order);
    }
    let dist = inst.distance_matrix();
    let d = |a: usize, b: usize| dist[a * n + b];
    loop {
        let mut improved = false;
        for i in 0..n - 2 {
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (a, b) = (order[i], order[i + 1]);
                let (c, e) = (order[j], order[(j + 1) % n]);
                let delta = d(a, c) + d(b, e) - d(a, b) - d(c, e);
                if delta < -1e-12 {
                    order[i + 1..=j].reverse();
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    let length = cycle_length(inst, &order);
    if length > tour.length {
        // Only reachable through rounding when no move was taken.
        return Ok(tour.clone());
    }
    Tour::new(inst, order)
}

/// Whether a reference length is provably optimal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceKind {
    Exact,
    Heuristic,
}

impl ReferenceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Heuristic => "heuristic-reference",
        }
    }
}

/// Held-Karp up to [`HELD_KARP_MAX`] nodes, 2-opt over nearest-neighbour
/// beyond.
pub fn solve_reference(inst: &TspInstance) -> Result<(Tour, ReferenceKind)> {
    if inst.n() <= HELD_KARP_MAX {
        Ok((held_karp_solve(inst)?, ReferenceKind::Exact))
    } else {
        let nn = nearest_neighbor(inst, 0)?;
        Ok((two_opt(inst, &nn)?, ReferenceKind::Heuristic))
    }
}
