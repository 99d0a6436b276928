//! Instance collections and their text format.
//!
//! One instance per line: `x1 y1 x2 y2 ... output t1 t2 ... tn t1`, with a
//! 1-indexed tour that repeats its first node. Unlabelled datasets omit
//! everything from `output` on. A `<file>.meta.json` sidecar records size,
//! count, seed and the solver that produced the tours.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::solvers::{self, ReferenceKind};
use crate::tsp::{generate_instance, Tour, TspInstance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverTag {
    None,
    HeldKarp,
    BruteForce,
    TwoOpt,
}

impl SolverTag {
    pub fn reference_kind(self) -> Option<ReferenceKind> {
        match self {
            Self::None => None,
            Self::HeldKarp | Self::BruteForce => Some(ReferenceKind::Exact),
            Self::TwoOpt => Some(ReferenceKind::Heuristic),
        }
    }

    pub fn solve(self, inst: &TspInstance) -> Result<Option<Tour>> {
        Ok(match self {
            Self::None => None,
            Self::HeldKarp => Some(solvers::held_karp_solve(inst)?),
            Self::BruteForce => Some(solvers::brute_force_solve(inst)?),
            Self::TwoOpt => Some(solvers::two_opt(inst, &solvers::nearest_neighbor(inst, 0)?)?),
        })
    }

    /// Refuses solver/size combinations the solver cannot handle.
    pub fn check_size(self, n: usize) -> Result<()> {
        let limit = match self {
            Self::HeldKarp => Some(("Held-Karp", solvers::HELD_KARP_MAX)),
            Self::BruteForce => Some(("brute force", solvers::BRUTE_FORCE_MAX)),
            _ => None,
        };
        match limit {
            Some((solver, max)) if n > max => Err(Error::SizeLimit { solver, n, max }),
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for SolverTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "heldkarp" | "held-karp" => Ok(Self::HeldKarp),
            "bruteforce" | "brute-force" => Ok(Self::BruteForce),
            "twoopt" | "two-opt" => Ok(Self::TwoOpt),
            other => Err(Error::Config(format!(
                "unknown solver `{other}` (expected none, heldkarp, bruteforce or twoopt)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub size: usize,
    pub count: usize,
    pub seed: u64,
    pub solver: SolverTag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub instances: Vec<TspInstance>,
    pub solutions: Option<Vec<Tour>>,
    pub meta: DatasetMeta,
}

/// Instance `index` of the seeded stream for size `n`.
pub fn seeded_instance(n: usize, seed: u64, index: u64) -> Result<TspInstance> {
    generate_instance(n, &mut rng::stream(rng::derive(seed, n as u64), rng::tag::INSTANCES, index))
}

impl Dataset {
    /// `count` uniform instances of size `n`, optionally solved. Instance `i`
    /// depends only on `(seed, n, i)`.
    pub fn generate(n: usize, count: usize, seed: u64, solver: SolverTag) -> Result<Self> {
        Self::generate_from(n, count, seed, 0, solver)
    }

    /// As [`Dataset::generate`] but starting at stream index `offset`, which
    /// yields sets disjoint from the first `offset` instances.
    pub fn generate_from(n: usize, count: usize, seed: u64, offset: u64, solver: SolverTag) -> Result<Self> {
        solver.check_size(n)?;
        let instances = (0..count as u64)
            .into_par_iter()
            .map(|i| seeded_instance(n, seed, offset + i))
            .collect::<Result<Vec<_>>>()?;
        Self::label(instances, seed, solver)
    }

    /// Wraps given instances, solving them with `solver`.
    pub fn label(instances: Vec<TspInstance>, seed: u64, solver: SolverTag) -> Result<Self> {
        let size = instances.first().map_or(0, TspInstance::n);
        if instances.iter().any(|i| i.n() != size) {
            return Err(Error::InvalidInstance("dataset mixes instance sizes".into()));
        }
        solver.check_size(size)?;
        let solutions = match solver {
            SolverTag::None => None,
            _ => Some(
                instances
                    .par_iter()
                    .map(|inst| solver.solve(inst).map(Option::unwrap))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        let count = instances.len();
        Ok(Self {
            instances,
            solutions,
            meta: DatasetMeta {
                size,
                count,
                seed,
                solver,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn size(&self) -> usize {
        self.meta.size
    }

    pub fn reference_kind(&self) -> Option<ReferenceKind> {
        self.solutions.as_ref().and(self.meta.solver.reference_kind())
    }

    pub fn solutions(&self) -> Result<&[Tour]> {
        self.solutions.as_deref().ok_or(Error::MissingLabels)
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes the dataset and its metadata sidecar.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    if let Some(first) = ds.instances.first() {
        if ds.instances.iter().any(|i| i.n() != first.n()) {
            return Err(Error::InvalidInstance("dataset mixes instance sizes".into()));
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    let mut line = String::new();
    for (i, inst) in ds.instances.iter().enumerate() {
        line.clear();
        format_instance(&mut line, inst, ds.solutions.as_ref().map(|s| &s[i]));
        w.write_all(line.as_bytes())?;
    }
    w.flush()?;
    fs::write(meta_path(path), serde_json::to_string_pretty(&ds.meta)? + "\n")?;
    Ok(())
}

fn format_instance(out: &mut String, inst: &TspInstance, tour: Option<&Tour>) {
    use std::fmt::Write as _;
    let mut parts = Vec::with_capacity(inst.n() * 2);
    for c in inst.coords() {
        parts.push(format!("{}", c[0]));
        parts.push(format!("{}", c[1]));
    }
    out.push_str(&parts.join(" "));
    if let Some(t) = tour {
        out.push_str(" output");
        for &v in t.order.iter().chain(t.order.first()) {
            let _ = write!(out, " {}", v + 1);
        }
    }
    out.push('\n');
}

/// Reads a dataset. Lines must carry tours unless the sidecar says the set
/// is unlabelled; without a sidecar the metadata is inferred.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let meta: Option<DatasetMeta> = match fs::read_to_string(meta_path(path)) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let labelled = meta.as_ref().is_none_or(|m| m.solver != SolverTag::None);
    let reader = BufReader::new(fs::File::open(path)?);
    let mut instances = Vec::new();
    let mut tours = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (inst, tour) = parse_line(&line, labelled).map_err(err)?;
        if let Some(first) = instances.first().map(TspInstance::n) {
            if inst.n() != first {
                return Err(err(format!("instance has {} nodes, expected {first}", inst.n())));
            }
        }
        if let Some(order) = tour {
            tours.push(Tour::new(&inst, order).map_err(|e| err(e.to_string()))?);
        }
        instances.push(inst);
    }
    let size = instances.first().map_or(0, TspInstance::n);
    let meta = match meta {
        Some(m) => {
            if m.count != instances.len() || (m.size != size && !instances.is_empty()) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    msg: format!(
                        "sidecar describes {} instances of size {}, file has {} of size {size}",
                        m.count,
                        m.size,
                        instances.len()
                    ),
                });
            }
            m
        }
        None => DatasetMeta {
            size,
            count: instances.len(),
            seed: 0,
            // Files from elsewhere usually carry optimal tours.
            solver: SolverTag::HeldKarp,
        },
    };
    Ok(Dataset {
        instances,
        solutions: labelled.then_some(tours),
        meta,
    })
}

fn parse_line(line: &str, labelled: bool) -> std::result::Result<(TspInstance, Option<Vec<usize>>), String> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    let split = tokens.iter().position(|&t| t == "output");
    let coord_tokens = match (split, labelled) {
        (Some(p), true) => &tokens[..p],
        (None, true) => return Err("missing `output` keyword".into()),
        (Some(_), false) => return Err("unexpected `output` in an unlabelled dataset".into()),
        (None, false) => &tokens[..],
    };
    if coord_tokens.len() % 2 != 0 {
        return Err(format!("odd number of coordinate values ({})", coord_tokens.len()));
    }
    let values = coord_tokens
        .iter()
        .map(|t| t.parse::<f64>().map_err(|_| format!("bad coordinate `{t}`")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let coords: Vec<[f64; 2]> = values.chunks(2).map(|c| [c[0], c[1]]).collect();
    let n = coords.len();
    let inst = TspInstance::new(coords).map_err(|e| e.to_string())?;
    let Some(p) = split else {
        return Ok((inst, None));
    };
    let idx = tokens[p + 1..]
        .iter()
        .map(|t| t.parse::<usize>().map_err(|_| format!("bad tour index `{t}`")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if let Some(&bad) = idx.iter().find(|&&v| v == 0 || v > n) {
        return Err(format!("tour index {bad} out of range 1..={n}"));
    }
    if idx.len() != n + 1 || idx.first() != idx.last() {
        return Err(format!("tour must list {n} nodes and return to its first node"));
    }
    Ok((inst, Some(idx[..n].iter().map(|v| v - 1).collect())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_text(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("data.txt");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn minimal_record_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_text(dir.path(), "0.25 0.5 0.75 0.5 output 1 2 1\n");
        let ds = read_dataset(&p).unwrap();
        assert_eq!(ds.size(), 2);
        assert_eq!(ds.solutions().unwrap()[0].order, vec![0, 1]);
        assert_eq!(ds.solutions().unwrap()[0].length, 1.0);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            ("0.1 0.1 0.2 0.2 output 1 2 1\n0.1 0.1 0.2 0.2 1 2 1\n", 2, "output"),
            ("0.1 0.1 0.2 0.2 output 1 3 1\n", 1, "out of range"),
            ("0.1 0.1 0.2 0.2 output 1 2 2\n", 1, "return"),
            ("0.1 0.1 0.2 0.2 0.3 0.3 output 1 2 2 1\n", 1, "not a permutation"),
            ("0.1 x 0.2 0.2 output 1 2 1\n", 1, "bad coordinate"),
        ];
        for (text, line, needle) in cases {
            let p = write_text(dir.path(), text);
            match read_dataset(&p) {
                Err(Error::Parse { line: l, msg, .. }) => {
                    assert_eq!(l, line, "{text}");
                    assert!(msg.contains(needle), "{msg}");
                }
                other => panic!("expected parse error for {text:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("set.txt");
        let ds = Dataset::generate(8, 25, 11, SolverTag::HeldKarp).unwrap();
        write_dataset(&ds, &p).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), ds);

        let raw = Dataset::generate(6, 5, 2, SolverTag::None).unwrap();
        write_dataset(&raw, &p).unwrap();
        let back = read_dataset(&p).unwrap();
        assert_eq!(back, raw);
        assert!(back.solutions().is_err());
    }

    #[test]
    fn generation_is_order_free_and_seeded() {
        let a = Dataset::generate(7, 10, 5, SolverTag::None).unwrap();
        let b = Dataset::generate_from(7, 4, 5, 6, SolverTag::None).unwrap();
        assert_eq!(&a.instances[6..], &b.instances[..]);
        let c = Dataset::generate(7, 10, 6, SolverTag::None).unwrap();
        assert_ne!(a.instances, c.instances);
    }

    #[test]
    fn exact_labels_dominate_heuristics() {
        let ds = Dataset::generate(9, 30, 1, SolverTag::HeldKarp).unwrap();
        for (inst, opt) in ds.instances.iter().zip(ds.solutions().unwrap()) {
            let nn = solvers::nearest_neighbor(inst, 0).unwrap();
            assert!(opt.length <= solvers::two_opt(inst, &nn).unwrap().length + 1e-12);
        }
    }

    #[test]
    fn solver_guards() {
        assert!(Dataset::generate(30, 1, 0, SolverTag::BruteForce).is_err());
        assert!(Dataset::generate(21, 1, 0, SolverTag::HeldKarp).is_err());
        assert!(Dataset::generate(30, 2, 0, SolverTag::TwoOpt).is_ok());
    }
}
