//! Supervised and reinforcement training of the policy model.

mod baseline;
mod losses;

use std::io::{Read, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tspnco_autograd::{Adam, AdamConfig, ParamStore, Tensor, TensorError};

use crate::bench;
use crate::dataset::{seeded_instance, Dataset, SolverTag};
use crate::error::{Error, Result};
use crate::model::{read_container, write_container, Container, EncoderConfig, ModelConfig, PolicyModel, TensorGroup};
use crate::rng;
use crate::search::DecodeConfig;
use crate::solvers::HELD_KARP_MAX;
use crate::tsp::{Tour, TspInstance};

pub use baseline::{paired_t_test, significantly_better, PairedTTest, ReplaceCheck, RolloutBaseline, ALPHA};
pub use losses::{
    critic_loss, critic_step, forced_log_prob, reinforce_surrogate, rl_step_critic, rl_step_rollout, sample_on_tape, sl_loss, sl_step,
    CriticModel, StepOutput, CRITIC_HIDDEN,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Sl,
    Rl,
}

impl Paradigm {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sl => "sl",
            Self::Rl => "rl",
        }
    }
}

impl std::str::FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sl" => Ok(Self::Sl),
            "rl" => Ok(Self::Rl),
            other => Err(Error::Config(format!("unknown paradigm `{other}` (expected sl or rl)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Rollout,
    Critic,
}

impl BaselineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rollout => "rollout",
            Self::Critic => "critic",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rollout" => Ok(Self::Rollout),
            "critic" => Ok(Self::Critic),
            other => Err(Error::Config(format!("unknown baseline `{other}` (expected rollout or critic)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub paradigm: Paradigm,
    /// Ignored for supervised runs.
    pub baseline: BaselineKind,
    pub graph_size: usize,
    pub epochs: usize,
    /// Instances per epoch; the last batch of an epoch may be short.
    pub epoch_size: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub val_size: usize,
    /// Validate every this many batches; 0 validates at epoch ends only.
    pub val_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            paradigm: Paradigm::Rl,
            baseline: BaselineKind::Rollout,
            graph_size: 20,
            epochs: 100,
            epoch_size: 1_000_000,
            batch_size: 512,
            lr: 1e-4,
            seed: 0,
            model: ModelConfig::default(),
            val_size: 10_000,
            val_every: 0,
        }
    }
}

impl TrainConfig {
    /// TSP10, small encoder, 10 epochs of 20,000 instances.
    pub fn desk(paradigm: Paradigm) -> Self {
        Self {
            paradigm,
            graph_size: 10,
            epochs: 10,
            epoch_size: 20_000,
            batch_size: 128,
            model: ModelConfig {
                encoder: EncoderConfig::desk(),
                ..ModelConfig::default()
            },
            val_size: 1000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.graph_size < 3 {
            return Err(Error::Config(format!("graph_size must be at least 3, got {}", self.graph_size)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epoch_size == 0 {
            return Err(Error::Config("batch_size and epoch_size must be positive".into()));
        }
        if self.val_size < 2 {
            return Err(Error::Config("val_size must be at least 2".into()));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.epoch_size.div_ceil(self.batch_size) as u64
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    fn uses_rollout(&self) -> bool {
        self.paradigm == Paradigm::Rl && self.baseline == BaselineKind::Rollout
    }

    fn uses_critic(&self) -> bool {
        self.paradigm == Paradigm::Rl && self.baseline == BaselineKind::Critic
    }
}

/// Validation set number `generation` for size `n`; labelled exactly when
/// feasible.
pub fn validation_set(config: &TrainConfig, generation: u64) -> Result<Dataset> {
    let n = config.graph_size;
    let solver = if n <= HELD_KARP_MAX {
        SolverTag::HeldKarp
    } else {
        SolverTag::TwoOpt
    };
    Dataset::generate_from(
        n,
        config.val_size,
        rng::derive(config.seed, rng::tag::VALIDATION),
        generation * config.val_size as u64,
        solver,
    )
}

/// Mean greedy optimality gap of `model` on `val`.
pub fn validate(model: &PolicyModel, val: &Dataset) -> Result<f64> {
    if val.solutions.is_none() {
        return Err(Error::MissingLabels);
    }
    Ok(bench::evaluate(model, val, &DecodeConfig::greedy(), false)?.mean_gap_pct)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// Mini-batches completed, counting this one.
    pub batch: u64,
    pub epoch: usize,
    pub loss: f64,
    pub val_gap_pct: Option<f64>,
    /// Wall time since the start of training.
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: [&'static str; 5] = ["batch", "epoch", "loss", "val_gap_pct", "seconds"];

    /// Equality ignoring wall time.
    pub fn same_values(&self, other: &Self) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                a.batch == b.batch
                    && a.epoch == b.epoch
                    && a.loss.to_bits() == b.loss.to_bits()
                    && a.val_gap_pct.map(f64::to_bits) == b.val_gap_pct.map(f64::to_bits)
            })
    }

    pub fn last_val_gap(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.val_gap_pct)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Self::HEADER)?;
        for r in &self.rows {
            out.write_record([
                r.batch.to_string(),
                r.epoch.to_string(),
                r.loss.to_string(),
                r.val_gap_pct.map_or(String::new(), |g| g.to_string()),
                format!("{:.3}", r.seconds),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Critic network with its own optimizer.
#[derive(Clone, Debug)]
pub struct CriticState {
    pub model: CriticModel,
    pub adam: Adam,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    model: PolicyModel,
    adam: Adam,
    epoch: usize,
    batches: u64,
    rollout: Option<RolloutBaseline>,
    critic: Option<CriticState>,
    val_gen: u64,
    val: Dataset,
    log: TrainLog,
    elapsed: f64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = PolicyModel::new(config.model, config.seed)?;
        let adam = Adam::new(config.adam(), model.store());
        let val = validation_set(&config, 0)?;
        let rollout = match config.uses_rollout() {
            true => Some(RolloutBaseline::new(&model, &val.instances)?),
            false => None,
        };
        let critic = match config.uses_critic() {
            true => {
                let model = CriticModel::new(config.model.encoder, config.seed)?;
                let adam = Adam::new(config.adam(), model.store());
                Some(CriticState { model, adam })
            }
            false => None,
        };
        Ok(Self {
            config,
            model,
            adam,
            epoch: 0,
            batches: 0,
            rollout,
            critic,
            val_gen: 0,
            val,
            log: TrainLog::default(),
            elapsed: 0.0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &PolicyModel {
        &self.model
    }

    pub fn into_model(self) -> PolicyModel {
        self.model
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn batches(&self) -> u64 {
        self.batches
    }

    pub fn rollout_baseline(&self) -> Option<&RolloutBaseline> {
        self.rollout.as_ref()
    }

    pub fn critic(&self) -> Option<&CriticState> {
        self.critic.as_ref()
    }

    pub fn validation_generation(&self) -> u64 {
        self.val_gen
    }

    pub fn validation(&self) -> &Dataset {
        &self.val
    }

    /// Changes the target epoch count, e.g. to extend a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    fn check_data<'a>(&self, data: Option<&'a Dataset>) -> Result<Option<(&'a Dataset, &'a [Tour])>> {
        if self.config.paradigm == Paradigm::Rl {
            return Ok(None);
        }
        let ds = data.ok_or(Error::MissingLabels)?;
        let tours = ds.solutions()?;
        if ds.is_empty() || ds.size() != self.config.graph_size {
            return Err(Error::Config(format!(
                "training data has size {} and {} instances, config expects size {}",
                ds.size(),
                ds.len(),
                self.config.graph_size
            )));
        }
        Ok(Some((ds, tours)))
    }

    /// Trains until `config.epochs` epochs are complete, calling `on_epoch`
    /// after each one.
    pub fn run(&mut self, data: Option<&Dataset>, mut on_epoch: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        self.check_data(data)?;
        while self.epoch < self.config.epochs {
            self.run_epoch(data)?;
            on_epoch(self)?;
        }
        Ok(())
    }

    /// One pass of `epoch_size` instances.
    pub fn run_epoch(&mut self, data: Option<&Dataset>) -> Result<()> {
        let labelled = self.check_data(data)?;
        let start = Instant::now();
        let base_elapsed = self.elapsed;
        let cfg = self.config;
        let order = labelled.map(|(ds, _)| {
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            idx.shuffle(&mut rng::stream(cfg.seed, rng::tag::SHUFFLE, self.epoch as u64));
            idx
        });
        let per_epoch = cfg.batches_per_epoch();
        for b in 0..per_epoch {
            let lo = b as usize * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(cfg.epoch_size);
            let loss = match labelled {
                Some((ds, tours)) => {
                    let order = order.as_ref().expect("shuffled with the data");
                    let pick: Vec<usize> = (lo..hi).map(|p| order[p % order.len()]).collect();
                    let batch: Vec<&TspInstance> = pick.iter().map(|&i| &ds.instances[i]).collect();
                    let targets: Vec<&Tour> = pick.iter().map(|&i| &tours[i]).collect();
                    let out = sl_step(&self.model, &batch, &targets).map_err(|e| diverged(e, self.batches))?;
                    self.apply(out)?
                }
                None => {
                    let offset = (self.epoch * cfg.epoch_size) as u64;
                    let instances = (lo..hi)
                        .map(|p| {
                            seeded_instance(
                                cfg.graph_size,
                                rng::derive(cfg.seed, rng::tag::TRAIN_BATCH),
                                offset + p as u64,
                            )
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let batch: Vec<&TspInstance> = instances.iter().collect();
                    self.rl_batch(&batch).map_err(|e| diverged(e, self.batches))?
                }
            };
            self.batches += 1;
            let last = b + 1 == per_epoch;
            let val_gap_pct = if last || (cfg.val_every > 0 && self.batches % cfg.val_every == 0) {
                Some(validate(&self.model, &self.val)?)
            } else {
                None
            };
            if let Some(gap) = val_gap_pct {
                log::info!(
                    "epoch {} batch {} loss {loss:.5} val gap {gap:.3}%",
                    self.epoch,
                    self.batches
                );
            }
            self.log.rows.push(LogRow {
                batch: self.batches,
                epoch: self.epoch,
                loss,
                val_gap_pct,
                seconds: base_elapsed + start.elapsed().as_secs_f64(),
            });
        }
        if let Some(rollout) = &mut self.rollout {
            let check = rollout.maybe_replace(&self.model, &self.val.instances)?;
            log::info!(
                "baseline check: current {:.5} baseline {:.5} p={:.4} replaced={}",
                check.current_mean,
                check.baseline_mean,
                check.test.p,
                check.replaced
            );
            if check.replaced {
                self.val_gen += 1;
                self.val = validation_set(&cfg, self.val_gen)?;
                rollout.rescore(&self.val.instances)?;
            }
        }
        self.epoch += 1;
        self.elapsed = base_elapsed + start.elapsed().as_secs_f64();
        Ok(())
    }

    fn rl_batch(&mut self, batch: &[&TspInstance]) -> Result<f64> {
        let (seed, index) = (self.config.seed, self.batches);
        if let Some(rollout) = &self.rollout {
            let out = rl_step_rollout(&self.model, &rollout.model, batch, seed, index)?;
            return self.apply(out);
        }
        let critic = self.critic.as_mut().expect("rl runs carry a baseline");
        let (policy, value) = rl_step_critic(&self.model, &critic.model, batch, seed, index)?;
        guard(value.loss, &value, self.batches)?;
        critic.model.apply_bn_updates(&value.bn);
        critic.adam.step(critic.model.store_mut(), &value.grads)?;
        self.apply(policy)
    }

    fn apply(&mut self, out: StepOutput) -> Result<f64> {
        guard(out.loss, &out, self.batches)?;
        self.model.apply_bn_updates(&out.bn);
        self.adam.step(self.model.store_mut(), &out.grads)?;
        Ok(out.loss)
    }

    /// Writes the full training state.
    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        let header = StateHeader {
            kind: STATE_KIND.into(),
            model: self.config.model,
            train: Some(self.config),
            epoch: self.epoch,
            batches: self.batches,
            adam_steps: self.adam.steps(),
            critic_adam_steps: self.critic.as_ref().map(|c| c.adam.steps()),
            val_gen: self.val_gen,
            baseline_val_mean: self.rollout.as_ref().map(|r| r.val_mean),
            elapsed: self.elapsed,
            log: Some(self.log.clone()),
        };
        let store = self.model.store();
        let mut groups = vec![
            group(POLICY, store.clone()),
            group("adam.m", moments_store(store, self.adam.first_moments())?),
            group("adam.v", moments_store(store, self.adam.second_moments())?),
        ];
        if let Some(r) = &self.rollout {
            groups.push(group("baseline", r.model.store().clone()));
        }
        if let Some(c) = &self.critic {
            let cs = c.model.store();
            groups.push(group("critic", cs.clone()));
            groups.push(group("critic_adam.m", moments_store(cs, c.adam.first_moments())?));
            groups.push(group("critic_adam.v", moments_store(cs, c.adam.second_moments())?));
        }
        write_container(
            w,
            &Container {
                header: serde_json::to_value(&header)?,
                groups,
            },
        )
    }

    /// Restores a state written by [`Trainer::save`].
    pub fn load(r: impl Read) -> Result<Self> {
        let mut c = read_container(r)?;
        let h: StateHeader = serde_json::from_value(c.header.clone())?;
        let config = match (h.kind.as_str(), h.train) {
            (STATE_KIND, Some(t)) => t,
            _ => return Err(Error::Checkpoint("file holds a bare policy, not a training state".into())),
        };
        config.validate()?;
        let model = PolicyModel::from_store(config.model, c.take_group(POLICY)?)?;
        let adam = Adam::from_parts(
            config.adam(),
            h.adam_steps,
            moments_from(model.store(), c.group("adam.m")?)?,
            moments_from(model.store(), c.group("adam.v")?)?,
        )?;
        let rollout = match config.uses_rollout() {
            true => Some(RolloutBaseline {
                model: PolicyModel::from_store(config.model, c.take_group("baseline")?)?,
                val_mean: h
                    .baseline_val_mean
                    .ok_or_else(|| Error::Checkpoint("missing baseline mean".into()))?,
            }),
            false => None,
        };
        let critic = match config.uses_critic() {
            true => {
                let model = CriticModel::from_store(config.model.encoder, c.take_group("critic")?)?;
                let adam = Adam::from_parts(
                    config.adam(),
                    h.critic_adam_steps
                        .ok_or_else(|| Error::Checkpoint("missing critic optimizer step".into()))?,
                    moments_from(model.store(), c.group("critic_adam.m")?)?,
                    moments_from(model.store(), c.group("critic_adam.v")?)?,
                )?;
                Some(CriticState { model, adam })
            }
            false => None,
        };
        let val = validation_set(&config, h.val_gen)?;
        Ok(Self {
            config,
            model,
            adam,
            epoch: h.epoch,
            batches: h.batches,
            rollout,
            critic,
            val_gen: h.val_gen,
            val,
            log: h.log.unwrap_or_default(),
            elapsed: h.elapsed,
        })
    }
}

/// Non-finite values caught inside the tensor engine count as divergence.
fn diverged(e: Error, batch: u64) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::Diverged { batch: batch + 1 },
        e => e,
    }
}

fn guard(loss: f64, out: &StepOutput, batch: u64) -> Result<()> {
    if !loss.is_finite() || !out.grads.global_norm().is_finite() {
        return Err(Error::Diverged { batch: batch + 1 });
    }
    Ok(())
}

const POLICY: &str = "policy";
const STATE_KIND: &str = "train-state";
const POLICY_KIND: &str = "policy";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateHeader {
    kind: String,
    model: ModelConfig,
    train: Option<TrainConfig>,
    epoch: usize,
    batches: u64,
    adam_steps: u64,
    critic_adam_steps: Option<u64>,
    val_gen: u64,
    baseline_val_mean: Option<f64>,
    elapsed: f64,
    log: Option<TrainLog>,
}

fn group(name: &str, store: ParamStore) -> TensorGroup {
    TensorGroup {
        name: name.into(),
        store,
    }
}

fn moments_store(store: &ParamStore, moments: &[Tensor]) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for ((_, name, _, trainable), m) in store.iter().zip(moments) {
        out.insert(name, m.clone(), trainable)?;
    }
    Ok(out)
}

fn moments_from(store: &ParamStore, saved: &ParamStore) -> Result<Vec<Tensor>> {
    if saved.len() != store.len() {
        return Err(Error::Checkpoint("optimizer state does not match the model".into()));
    }
    store
        .iter()
        .map(|(_, name, t, _)| match saved.by_name(name) {
            Some(m) if m.shape() == t.shape() => Ok(m.clone()),
            _ => Err(Error::Checkpoint(format!("optimizer state for `{name}` is missing or misshapen"))),
        })
        .collect()
}

/// Writes a policy on its own, without training state.
pub fn save_policy(w: &mut impl Write, model: &PolicyModel) -> Result<()> {
    let header = StateHeader {
        kind: POLICY_KIND.into(),
        model: *model.config(),
        train: None,
        epoch: 0,
        batches: 0,
        adam_steps: 0,
        critic_adam_steps: None,
        val_gen: 0,
        baseline_val_mean: None,
        elapsed: 0.0,
        log: None,
    };
    write_container(
        w,
        &Container {
            header: serde_json::to_value(&header)?,
            groups: vec![group(POLICY, model.store().clone())],
        },
    )
}

/// Reads the policy from either a training state or a bare policy file,
/// with the training configuration when there is one.
pub fn load_policy(r: impl Read) -> Result<(PolicyModel, Option<TrainConfig>)> {
    let mut c = read_container(r)?;
    let h: StateHeader = serde_json::from_value(c.header.clone())?;
    let model = PolicyModel::from_store(h.model, c.take_group(POLICY)?)?;
    Ok((model, h.train))
}

/// Trains from scratch and returns the final model with its log.
pub fn train(config: TrainConfig, data: Option<&Dataset>) -> Result<(PolicyModel, TrainLog)> {
    let mut trainer = Trainer::new(config)?;
    trainer.run(data, |_| Ok(()))?;
    let log = trainer.log.clone();
    Ok((trainer.into_model(), log))
}

/// Tensor names and shapes of a store, in order.
pub fn shape_signature(store: &ParamStore) -> Vec<(String, Vec<usize>)> {
    store
        .iter()
        .map(|(_, name, t, _)| (name.to_string(), t.shape().to_vec()))
        .collect()
}
