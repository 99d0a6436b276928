//! Per-batch objectives: teacher-forced cross entropy, the REINFORCE
//! surrogate and the critic regression.

use rand::Rng;
use tspnco_autograd::{Gradients, Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::{BnUpdate, Encoder, EncoderConfig, Linear, Mode, PolicyModel, Source};
use crate::rng;
use crate::search::{greedy_batch, rollout, sample_index};
use crate::tsp::{canonicalize, Tour, TspInstance};

/// Loss value, gradients and the batch-norm statistics seen on the way.
#[derive(Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: Gradients,
    pub bn: Vec<BnUpdate>,
}

/// Summed log-probability `[batch]` of each given order under teacher
/// forcing, kept on the tape.
pub fn forced_log_prob(
    g: &mut Graph,
    model: &PolicyModel,
    batch: &[&TspInstance],
    orders: &[Vec<usize>],
    mode: Mode,
    bn: &mut Vec<BnUpdate>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if orders.len() != batch.len() {
        return Err(Error::MissingLabels);
    }
    let emb = model.encode(g, batch, mode, bn)?;
    let cache = model.precompute(g, &emb)?;
    let (_, _, total) = rollout(g, model, &cache, None, true, |row, t, _| orders[row][t])?;
    Ok(total.expect("at least one step"))
}

/// Teacher-forced negative log-likelihood of `targets`, averaged over the
/// batch and summed over steps (the first step included). Targets are
/// taken as given; see [`sl_step`] for canonicalisation.
pub fn sl_loss(
    g: &mut Graph,
    model: &PolicyModel,
    batch: &[&TspInstance],
    targets: &[Vec<usize>],
    mode: Mode,
    bn: &mut Vec<BnUpdate>,
) -> Result<Var> {
    let total = forced_log_prob(g, model, batch, targets, mode, bn)?;
    let summed = g.sum_all(total)?;
    Ok(g.scale(summed, -1.0 / batch.len() as f64)?)
}

/// One supervised step against the canonical orientation of each tour.
pub fn sl_step(model: &PolicyModel, batch: &[&TspInstance], tours: &[&Tour]) -> Result<StepOutput> {
    if tours.len() != batch.len() {
        return Err(Error::MissingLabels);
    }
    let targets: Vec<Vec<usize>> = tours.iter().map(|t| canonicalize(&t.order)).collect();
    let mut g = Graph::new();
    let mut bn = Vec::new();
    let loss = sl_loss(&mut g, model, batch, &targets, Mode::Train, &mut bn)?;
    finish(&g, loss, bn)
}

fn finish(g: &Graph, loss: Var, bn: Vec<BnUpdate>) -> Result<StepOutput> {
    let value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    Ok(StepOutput {
        loss: value,
        grads,
        bn,
    })
}

/// `mean(advantage * log_prob)`, the advantage held constant.
pub fn reinforce_surrogate(g: &mut Graph, log_prob: Var, advantages: &[f64]) -> Result<Var> {
    let adv = g.constant(Tensor::vector(advantages.to_vec()))?;
    let weighted = g.mul(log_prob, adv)?;
    Ok(g.mean_all(weighted)?)
}

/// Tours sampled from the policy with their summed log-probability kept on
/// the tape. Row `i` draws from a single stream shared by the batch.
pub fn sample_on_tape(
    g: &mut Graph,
    model: &PolicyModel,
    batch: &[&TspInstance],
    stream_seed: u64,
    stream_index: u64,
    mode: Mode,
    bn: &mut Vec<BnUpdate>,
) -> Result<(Vec<Tour>, Var)> {
    let emb = model.encode(g, batch, mode, bn)?;
    let cache = model.precompute(g, &emb)?;
    let mut stream = rng::stream(stream_seed, rng::tag::SAMPLING, stream_index);
    let (orders, _, total) = rollout(g, model, &cache, None, true, |_, _, lp| {
        sample_index(lp, stream.random::<f64>())
    })?;
    let tours = orders
        .into_iter()
        .zip(batch)
        .map(|(o, inst)| Tour::new(inst, o))
        .collect::<Result<Vec<_>>>()?;
    Ok((tours, total.expect("at least one step")))
}

/// REINFORCE step with the greedy tours of a frozen `baseline` policy as
/// the baseline.
pub fn rl_step_rollout(
    model: &PolicyModel,
    baseline: &PolicyModel,
    batch: &[&TspInstance],
    stream_seed: u64,
    stream_index: u64,
) -> Result<StepOutput> {
    let mut g = Graph::new();
    let mut bn = Vec::new();
    let (tours, log_prob) = sample_on_tape(&mut g, model, batch, stream_seed, stream_index, Mode::Train, &mut bn)?;
    let base = greedy_batch(baseline, batch)?;
    let adv: Vec<f64> = tours.iter().zip(&base).map(|(t, b)| t.length - b.length).collect();
    let loss = reinforce_surrogate(&mut g, log_prob, &adv)?;
    finish(&g, loss, bn)
}

/// Hidden width of the critic head.
pub const CRITIC_HIDDEN: usize = 128;

/// Value network: an encoder of the policy's architecture, mean pooling and
/// a one-hidden-layer ReLU head predicting tour length.
#[derive(Clone, Debug)]
pub struct CriticModel {
    config: EncoderConfig,
    store: ParamStore,
    encoder: Encoder,
    hidden: Linear,
    value: Linear,
}

impl CriticModel {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, rng::tag::CRITIC_INIT, 0);
        let mut src = Source::Init {
            store: &mut store,
            rng: &mut r,
        };
        let (encoder, hidden, value) = Self::layers(&mut src, &config)?;
        Ok(Self {
            config,
            store,
            encoder,
            hidden,
            value,
        })
    }

    pub fn from_store(config: EncoderConfig, store: ParamStore) -> Result<Self> {
        let mut src = Source::Load(&store);
        let (encoder, hidden, value) = Self::layers(&mut src, &config)?;
        if store.len() != encoder.tensor_count() + 4 {
            return Err(Error::Checkpoint("critic store has unexpected tensors".into()));
        }
        Ok(Self {
            config,
            store,
            encoder,
            hidden,
            value,
        })
    }

    fn layers(src: &mut Source<'_>, config: &EncoderConfig) -> Result<(Encoder, Linear, Linear)> {
        let d = config.embed_dim;
        let encoder = Encoder::build(src, "critic.enc", config)?;
        let hidden = Linear::build(src, "critic.hidden", d, CRITIC_HIDDEN, true)?;
        let value = Linear::build(src, "critic.value", CRITIC_HIDDEN, 1, true)?;
        Ok((encoder, hidden, value))
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        crate::model::apply_bn_updates(&mut self.store, updates);
    }

    /// Predicted tour lengths `[batch]`.
    pub fn forward(&self, g: &mut Graph, batch: &[&TspInstance], mode: Mode, bn: &mut Vec<BnUpdate>) -> Result<Var> {
        let emb = self.encoder.forward(g, &self.store, batch, mode, bn)?;
        let h = self.hidden.forward(g, &self.store, emb.graph)?;
        let h = g.relu(h)?;
        let v = self.value.forward(g, &self.store, h)?;
        Ok(g.reshape(v, &[batch.len()])?)
    }
}

/// Mean squared error between predicted values and observed lengths.
pub fn critic_loss(g: &mut Graph, values: Var, lengths: &[f64]) -> Result<Var> {
    let target = g.constant(Tensor::vector(lengths.to_vec()))?;
    let diff = g.sub(values, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean_all(sq)?)
}

/// Critic forward plus regression step towards `lengths`; returns the
/// predicted values alongside.
pub fn critic_step(critic: &CriticModel, batch: &[&TspInstance], lengths: &[f64]) -> Result<(StepOutput, Vec<f64>)> {
    let mut g = Graph::new();
    let mut bn = Vec::new();
    let values = critic.forward(&mut g, batch, Mode::Train, &mut bn)?;
    let predicted = g.value(values).data().to_vec();
    let loss = critic_loss(&mut g, values, lengths)?;
    Ok((finish(&g, loss, bn)?, predicted))
}

/// REINFORCE step with a learned critic as baseline. Returns the policy and
/// critic updates; they are applied by separate optimizers.
pub fn rl_step_critic(
    model: &PolicyModel,
    critic: &CriticModel,
    batch: &[&TspInstance],
    stream_seed: u64,
    stream_index: u64,
) -> Result<(StepOutput, StepOutput)> {
    let mut g = Graph::new();
    let mut bn = Vec::new();
    let (tours, log_prob) = sample_on_tape(&mut g, model, batch, stream_seed, stream_index, Mode::Train, &mut bn)?;
    let lengths: Vec<f64> = tours.iter().map(|t| t.length).collect();
    let (critic_out, values) = critic_step(critic, batch, &lengths)?;
    let adv: Vec<f64> = lengths.iter().zip(&values).map(|(l, v)| l - v).collect();
    let loss = reinforce_surrogate(&mut g, log_prob, &adv)?;
    Ok((finish(&g, loss, bn)?, critic_out))
}
