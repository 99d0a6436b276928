//! Policy network: a graph encoder followed by an attention decoder.

mod checkpoint;
mod decoder;
mod encoder;
mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tspnco_autograd::{Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::rng;
use crate::tsp::TspInstance;

pub use checkpoint::{read_container, write_container, Container, TensorGroup};
pub use decoder::{Decoder, DecoderCache, StepInput};
pub use encoder::{Embeddings, Encoder};
pub(crate) use layers::apply_bn_updates;
pub use layers::{BatchNorm, BnUpdate, Linear, Mode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    #[serde(rename = "gat")]
    GraphTransformer,
    #[serde(rename = "gcn")]
    GatedGcn,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::GraphTransformer => "gat",
            Self::GatedGcn => "gcn",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gat" | "graph-transformer" => Ok(Self::GraphTransformer),
            "gcn" | "gated-gcn" => Ok(Self::GatedGcn),
            other => Err(Error::Config(format!("unknown encoder `{other}` (expected gat or gcn)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub layers: usize,
    pub embed_dim: usize,
    /// Attention heads; used by the transformer layers and the decoder glimpse.
    pub heads: usize,
    /// Hidden width of the transformer feed-forward sublayer.
    pub ff_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::GraphTransformer,
            layers: 3,
            embed_dim: 128,
            heads: 8,
            ff_dim: 512,
        }
    }
}

impl EncoderConfig {
    /// Small configuration used for the desk-scale experiments.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            embed_dim: 64,
            heads: 4,
            ff_dim: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.kind == EncoderKind::GraphTransformer && self.ff_dim == 0 {
            return Err(Error::Config("ff_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Logits are squashed to `[-clip, clip]` with `clip * tanh(.)`.
    pub clip: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            clip: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip must be positive, got {}", self.clip)));
        }
        Ok(())
    }
}

/// Number of trainable scalars of encoder plus decoder.
pub fn parameter_count(config: &ModelConfig) -> usize {
    let e = &config.encoder;
    let d = e.embed_dim;
    let bn = 2 * d;
    let encoder = match e.kind {
        EncoderKind::GraphTransformer => {
            let layer = 4 * d * d + bn + (d * e.ff_dim + e.ff_dim) + (e.ff_dim * d + d) + bn;
            (2 * d + d) + e.layers * layer
        }
        EncoderKind::GatedGcn => {
            let layer = 4 * (d * d + d) + 2 * bn;
            (2 * d + d) + (d + d) + e.layers * layer
        }
    };
    let decoder = 2 * d + 3 * d * d + d * d + 2 * d * d + d * d;
    encoder + decoder
}

/// Where layer constructors get their tensors from: freshly initialised, or
/// looked up by name in an existing store.
pub(crate) enum Source<'a> {
    Init {
        store: &'a mut ParamStore,
        rng: &'a mut dyn rand::RngCore,
    },
    Load(&'a ParamStore),
}

impl Source<'_> {
    pub(crate) fn tensor(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
    ) -> Result<tspnco_autograd::ParamId> {
        match self {
            Source::Init { store, rng } => {
                let (tensor, trainable) = match init {
                    Init::Uniform(bound) => {
                        let data = (0..shape.iter().product::<usize>())
                            .map(|_| rng.random_range(-bound..bound))
                            .collect();
                        (Tensor::new(shape.to_vec(), data)?, true)
                    }
                    Init::Const(v) => (Tensor::full(shape.to_vec(), v), true),
                    Init::Buffer(v) => (Tensor::full(shape.to_vec(), v), false),
                };
                Ok(store.insert(name, tensor, trainable)?)
            }
            Source::Load(store) => {
                let id = store.expect_id(name)?;
                if store.get(id).shape() != shape {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, expected {shape:?}",
                        store.get(id).shape()
                    )));
                }
                Ok(id)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Uniform(f64),
    Const(f64),
    Buffer(f64),
}

/// Encoder and decoder parameters together with their configuration.
#[derive(Clone, Debug)]
pub struct PolicyModel {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
}

impl PolicyModel {
    /// Fresh model; initialisation is a pure function of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, rng::tag::INIT, 0);
        let mut src = Source::Init {
            store: &mut store,
            rng: &mut r,
        };
        let encoder = Encoder::build(&mut src, "enc", &config.encoder)?;
        let decoder = Decoder::build(&mut src, "dec", &config)?;
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
        })
    }

    /// Wraps an existing store, checking every expected tensor is present.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut src = Source::Load(&store);
        let encoder = Encoder::build(&mut src, "enc", &config.encoder)?;
        let decoder = Decoder::build(&mut src, "dec", &config)?;
        if store.len() != encoder.tensor_count() + decoder.tensor_count() {
            return Err(Error::Checkpoint(format!(
                "store holds {} tensors, model expects {}",
                store.len(),
                encoder.tensor_count() + decoder.tensor_count()
            )));
        }
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Encodes a batch of same-size instances.
    pub fn encode(
        &self,
        g: &mut Graph,
        batch: &[&TspInstance],
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Embeddings> {
        self.encoder.forward(g, &self.store, batch, mode, updates)
    }

    pub fn precompute(&self, g: &mut Graph, emb: &Embeddings) -> Result<DecoderCache> {
        self.decoder.precompute(g, &self.store, emb)
    }

    /// Log-probabilities `[rows, n]` of the next node.
    pub fn step(&self, g: &mut Graph, cache: &DecoderCache, input: &StepInput<'_>) -> Result<Var> {
        self.decoder.step(g, &self.store, cache, input)
    }

    /// Eval-mode node embeddings `[n, d]` and graph embedding `[d]`.
    pub fn embed(&self, inst: &TspInstance) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let emb = self.encode(&mut g, &[inst], Mode::Eval, &mut Vec::new())?;
        let d = self.config.encoder.embed_dim;
        let graph = g.value(emb.graph).clone().reshape([d])?;
        Ok((g.value(emb.node).clone(), graph))
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        layers::apply_bn_updates(&mut self.store, updates);
    }
}

/// Packs coordinates of a same-size batch into `[b*n, 2]`.
pub(crate) fn coords_tensor(batch: &[&TspInstance]) -> Result<Tensor> {
    let n = batch[0].n();
    let mut data = Vec::with_capacity(batch.len() * n * 2);
    for inst in batch {
        if inst.n() != n {
            return Err(Error::InvalidInstance(format!(
                "batch mixes sizes {n} and {}",
                inst.n()
            )));
        }
        for c in inst.coords() {
            data.extend_from_slice(c);
        }
    }
    Ok(Tensor::new([batch.len() * n, 2], data)?)
}
