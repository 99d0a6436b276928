//! Central-difference gradient checks of every trainable component on tiny
//! configurations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tspnco::model::{EncoderConfig, EncoderKind, Mode, ModelConfig, PolicyModel, StepInput};
use tspnco::training::{critic_loss, forced_log_prob, reinforce_surrogate, sl_loss, CriticModel};
use tspnco::tsp::{generate_instance, TspInstance};
use tspnco_autograd::{Graph, ParamStore, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-3;
pub const N: usize = 5;
pub const D: usize = 8;
const BATCH: usize = 3;
const COORDS_PER_TENSOR: usize = 2;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: &'static str,
    /// Largest relative error over smooth coordinates.
    pub worst: f64,
    pub checks: usize,
    /// Coordinates skipped because the loss has a kink within one step.
    pub kinks: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.worst < TOL && self.kinks * 20 <= self.checks
    }
}

/// Denominator floor. Biases feeding a batch norm have an exactly zero
/// gradient, where central differences only see roundoff near 1e-9.
pub const FLOOR: f64 = 1e-5;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

trait Holder {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

impl Holder for PolicyModel {
    fn store(&self) -> &ParamStore {
        PolicyModel::store(self)
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        PolicyModel::store_mut(self)
    }
}

impl Holder for CriticModel {
    fn store(&self) -> &ParamStore {
        CriticModel::store(self)
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        CriticModel::store_mut(self)
    }
}

/// Compares the analytic gradient of `loss` with central differences on
/// random coordinates of every trainable tensor whose name starts with
/// `prefix`. Returns (worst error, checks, kinks).
fn check<M: Holder>(
    m: &mut M,
    prefix: &str,
    rng: &mut ChaCha8Rng,
    loss: impl Fn(&M, &mut Graph) -> Var,
) -> (f64, usize, usize) {
    let value = |m: &M| {
        let mut g = Graph::new();
        let v = loss(m, &mut g);
        g.value(v).item().unwrap()
    };
    let mut g = Graph::new();
    let v = loss(m, &mut g);
    let grads = g.backward(v).unwrap();
    let base = g.value(v).item().unwrap();
    let ids: Vec<_> = m
        .store()
        .trainable_ids()
        .filter(|&id| m.store().name(id).starts_with(prefix))
        .collect();
    assert!(!ids.is_empty(), "no tensors under `{prefix}`");
    let (mut worst, mut checks, mut kinks) = (0.0f64, 0, 0);
    for id in ids {
        let analytic = grads.get_or_zeros(id, m.store());
        let numel = m.store().get(id).numel();
        for _ in 0..COORDS_PER_TENSOR {
            let j = rng.random_range(0..numel);
            let orig = m.store().get(id).data()[j];
            m.store_mut().get_mut(id).data_mut()[j] = orig + STEP;
            let up = value(m);
            m.store_mut().get_mut(id).data_mut()[j] = orig - STEP;
            let down = value(m);
            m.store_mut().get_mut(id).data_mut()[j] = orig;
            checks += 1;
            let fwd = (up - base) / STEP;
            let bwd = (base - down) / STEP;
            if rel_err(fwd, bwd) > 1e-2 && (fwd - bwd).abs() > 1e-4 {
                kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    (worst, checks, kinks)
}

fn config(kind: EncoderKind) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            kind,
            layers: 2,
            embed_dim: D,
            heads: 2,
            ff_dim: 16,
        },
        clip: 10.0,
    }
}

fn instances(rng: &mut ChaCha8Rng) -> Vec<TspInstance> {
    (0..BATCH).map(|_| generate_instance(N, rng).unwrap()).collect()
}

fn weights(g: &mut Graph, shape: &[usize], rng: &mut ChaCha8Rng) -> Var {
    g.constant(Tensor::uniform(shape.to_vec(), 1.0, rng)).unwrap()
}

fn random_order(rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut o: Vec<usize> = (0..N).collect();
    o.shuffle(rng);
    o
}

/// Runs every component check over `draws` random parameter draws.
pub fn suite(draws: u64) -> Vec<GradReport> {
    let mut reports = Vec::new();
    let mut record = |name: &'static str, f: &mut dyn FnMut(u64) -> (f64, usize, usize)| {
        let mut r = GradReport {
            name,
            worst: 0.0,
            checks: 0,
            kinks: 0,
        };
        for draw in 0..draws {
            let (w, c, k) = f(draw);
            r.worst = r.worst.max(w);
            r.checks += c;
            r.kinks += k;
        }
        reports.push(r);
    };

    for (name, kind) in [
        ("graph-transformer encoder", EncoderKind::GraphTransformer),
        ("gated-gcn encoder", EncoderKind::GatedGcn),
    ] {
        record(name, &mut |draw| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + draw);
            let mut model = PolicyModel::new(config(kind), draw).unwrap();
            let insts = instances(&mut rng);
            let wseed = rng.random::<u64>();
            check(&mut model, "enc.", &mut rng, |m, g| {
                let batch: Vec<&TspInstance> = insts.iter().collect();
                let emb = m.encode(g, &batch, Mode::Train, &mut Vec::new()).unwrap();
                let mut wr = ChaCha8Rng::seed_from_u64(wseed);
                let wn = weights(g, &[BATCH * N, D], &mut wr);
                let wg = weights(g, &[BATCH, D], &mut wr);
                let a = g.mul(emb.node, wn).unwrap();
                let b = g.mul(emb.graph, wg).unwrap();
                let a = g.sum_all(a).unwrap();
                let b = g.sum_all(b).unwrap();
                g.add(a, b).unwrap()
            })
        });
    }

    record("decoder", &mut |draw| {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + draw);
        let mut model = PolicyModel::new(config(EncoderKind::GraphTransformer), draw).unwrap();
        let insts = instances(&mut rng);
        let orders: Vec<Vec<usize>> = (0..BATCH).map(|_| random_order(&mut rng)).collect();
        let wseed = rng.random::<u64>();
        check(&mut model, "dec.", &mut rng, |m, g| {
            let batch: Vec<&TspInstance> = insts.iter().collect();
            let emb = m.encode(g, &batch, Mode::Train, &mut Vec::new()).unwrap();
            let cache = m.precompute(g, &emb).unwrap();
            let mut wr = ChaCha8Rng::seed_from_u64(wseed);
            let mut total: Option<Var> = None;
            for t in [0, 2] {
                let mut allowed = vec![true; BATCH * N];
                for (r, o) in orders.iter().enumerate() {
                    for &v in &o[..t] {
                        allowed[r * N + v] = false;
                    }
                }
                let first: Vec<usize> = orders.iter().map(|o| o[0]).collect();
                let last: Vec<usize> = orders.iter().map(|o| o[t.max(1) - 1]).collect();
                let input = StepInput {
                    rows: None,
                    ends: (t > 0).then_some((&first[..], &last[..])),
                    allowed: &allowed,
                };
                let lp = m.step(g, &cache, &input).unwrap();
                let p = g.exp(lp).unwrap();
                let w = weights(g, &[BATCH, N], &mut wr);
                let s = g.mul(p, w).unwrap();
                let s = g.sum_all(s).unwrap();
                total = Some(match total {
                    Some(acc) => g.add(acc, s).unwrap(),
                    None => s,
                });
            }
            total.unwrap()
        })
    });

    record("supervised loss", &mut |draw| {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + draw);
        let mut model = PolicyModel::new(config(EncoderKind::GraphTransformer), draw).unwrap();
        let insts = instances(&mut rng);
        let orders: Vec<Vec<usize>> = (0..BATCH).map(|_| random_order(&mut rng)).collect();
        check(&mut model, "", &mut rng, |m, g| {
            let batch: Vec<&TspInstance> = insts.iter().collect();
            sl_loss(g, m, &batch, &orders, Mode::Train, &mut Vec::new()).unwrap()
        })
    });

    record("reinforce surrogate", &mut |draw| {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + draw);
        let kind = if draw % 2 == 0 {
            EncoderKind::GraphTransformer
        } else {
            EncoderKind::GatedGcn
        };
        let mut model = PolicyModel::new(config(kind), draw).unwrap();
        let insts = instances(&mut rng);
        let orders: Vec<Vec<usize>> = (0..BATCH).map(|_| random_order(&mut rng)).collect();
        let adv: Vec<f64> = (0..BATCH).map(|_| rng.random_range(-1.0..1.0)).collect();
        check(&mut model, "", &mut rng, |m, g| {
            let batch: Vec<&TspInstance> = insts.iter().collect();
            let lp = forced_log_prob(g, m, &batch, &orders, Mode::Train, &mut Vec::new()).unwrap();
            reinforce_surrogate(g, lp, &adv).unwrap()
        })
    });

    record("critic", &mut |draw| {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + draw);
        let kind = if draw % 2 == 0 {
            EncoderKind::GraphTransformer
        } else {
            EncoderKind::GatedGcn
        };
        let mut critic = CriticModel::new(config(kind).encoder, draw).unwrap();
        let insts = instances(&mut rng);
        let lengths: Vec<f64> = (0..BATCH).map(|_| rng.random_range(2.0..4.0)).collect();
        check(&mut critic, "", &mut rng, |c, g| {
            let batch: Vec<&TspInstance> = insts.iter().collect();
            let v = c.forward(g, &batch, Mode::Train, &mut Vec::new()).unwrap();
            critic_loss(g, v, &lengths).unwrap()
        })
    });

    reports
}
