use tspnco_autograd::{Graph, ParamStore, Tensor, Var};

use super::layers::{BatchNorm, BnUpdate, Linear, Mode};
use super::{coords_tensor, EncoderConfig, EncoderKind, Source};
use crate::error::Result;
use crate::tsp::TspInstance;

/// Keeps the gate normaliser away from zero.
const GATE_EPS: f64 = 1e-20;

/// Encoder output for a batch of `batch` instances with `n` nodes each.
#[derive(Clone, Copy, Debug)]
pub struct Embeddings {
    /// `[batch * n, d]`, instance-major.
    pub node: Var,
    /// `[batch, d]`, mean of the node embeddings.
    pub graph: Var,
    pub batch: usize,
    pub n: usize,
}

#[derive(Clone, Debug)]
struct AttentionLayer {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    bn1: BatchNorm,
    ff1: Linear,
    ff2: Linear,
    bn2: BatchNorm,
}

#[derive(Clone, Debug)]
struct GatedLayer {
    un: Linear,
    vn: Linear,
    ue: Linear,
    ve: Linear,
    bn_h: BatchNorm,
    bn_e: BatchNorm,
}

#[derive(Clone, Debug)]
enum Body {
    Transformer { init: Linear, layers: Vec<AttentionLayer> },
    Gated { node: Linear, edge: Linear, layers: Vec<GatedLayer> },
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    body: Body,
}

impl Encoder {
    pub(crate) fn build(src: &mut Source<'_>, prefix: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let body = match config.kind {
            EncoderKind::GraphTransformer => {
                let init = Linear::build(src, &format!("{prefix}.init"), 2, d, true)?;
                let layers = (0..config.layers)
                    .map(|l| {
                        let p = format!("{prefix}.{l}");
                        Ok(AttentionLayer {
                            wq: Linear::build(src, &format!("{p}.wq"), d, d, false)?,
                            wk: Linear::build(src, &format!("{p}.wk"), d, d, false)?,
                            wv: Linear::build(src, &format!("{p}.wv"), d, d, false)?,
                            wo: Linear::build(src, &format!("{p}.wo"), d, d, false)?,
                            bn1: BatchNorm::build(src, &format!("{p}.bn1"), d)?,
                            ff1: Linear::build(src, &format!("{p}.ff1"), d, config.ff_dim, true)?,
                            ff2: Linear::build(src, &format!("{p}.ff2"), config.ff_dim, d, true)?,
                            bn2: BatchNorm::build(src, &format!("{p}.bn2"), d)?,
                        })
                    })
                    .collect::<Result<_>>()?;
                Body::Transformer { init, layers }
            }
            EncoderKind::GatedGcn => {
                let node = Linear::build(src, &format!("{prefix}.node"), 2, d, true)?;
                let edge = Linear::build(src, &format!("{prefix}.edge"), 1, d, true)?;
                let layers = (0..config.layers)
                    .map(|l| {
                        let p = format!("{prefix}.{l}");
                        Ok(GatedLayer {
                            un: Linear::build(src, &format!("{p}.un"), d, d, true)?,
                            vn: Linear::build(src, &format!("{p}.vn"), d, d, true)?,
                            ue: Linear::build(src, &format!("{p}.ue"), d, d, true)?,
                            ve: Linear::build(src, &format!("{p}.ve"), d, d, true)?,
                            bn_h: BatchNorm::build(src, &format!("{p}.bn_h"), d)?,
                            bn_e: BatchNorm::build(src, &format!("{p}.bn_e"), d)?,
                        })
                    })
                    .collect::<Result<_>>()?;
                Body::Gated { node, edge, layers }
            }
        };
        Ok(Self { config: *config, body })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tensor_count(&self) -> usize {
        match &self.body {
            Body::Transformer { init, layers } => {
                init.tensor_count()
                    + layers
                        .iter()
                        .map(|l| {
                            l.wq.tensor_count()
                                + l.wk.tensor_count()
                                + l.wv.tensor_count()
                                + l.wo.tensor_count()
                                + l.bn1.tensor_count()
                                + l.ff1.tensor_count()
                                + l.ff2.tensor_count()
                                + l.bn2.tensor_count()
                        })
                        .sum::<usize>()
            }
            Body::Gated { node, edge, layers } => {
                node.tensor_count()
                    + edge.tensor_count()
                    + layers
                        .iter()
                        .map(|l| {
                            l.un.tensor_count()
                                + l.vn.tensor_count()
                                + l.ue.tensor_count()
                                + l.ve.tensor_count()
                                + l.bn_h.tensor_count()
                                + l.bn_e.tensor_count()
                        })
                        .sum::<usize>()
            }
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&TspInstance],
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Embeddings> {
        let (b, n, d) = (batch.len(), batch[0].n(), self.config.embed_dim);
        let x = g.constant(coords_tensor(batch)?)?;
        let node = match &self.body {
            Body::Transformer { init, layers } => {
                let mut h = init.forward(g, store, x)?;
                for layer in layers {
                    h = self.attention_layer(g, store, layer, h, b, n, mode, updates)?;
                }
                h
            }
            Body::Gated { node, edge, layers } => {
                let mut h = node.forward(g, store, x)?;
                let dist = g.constant(distances(batch))?;
                let mut e = edge.forward(g, store, dist)?;
                for layer in layers {
                    (h, e) = gated_layer(g, store, layer, h, e, b, n, d, mode, updates)?;
                }
                h
            }
        };
        let per_graph = g.reshape(node, &[b, n, d])?;
        let summed = g.sum_axis(per_graph, 1)?;
        let graph = g.scale(summed, 1.0 / n as f64)?;
        Ok(Embeddings { node, graph, batch: b, n })
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_layer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: &AttentionLayer,
        h: Var,
        b: usize,
        n: usize,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let (d, heads) = (self.config.embed_dim, self.config.heads);
        let dk = d / heads;
        let split = |g: &mut Graph, lin: &Linear| -> Result<Var> {
            let y = lin.forward(g, store, h)?;
            let y = g.reshape(y, &[b, n, heads, dk])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            Ok(g.reshape(y, &[b * heads, n, dk])?)
        };
        let q = split(g, &layer.wq)?;
        let k = split(g, &layer.wk)?;
        let v = split(g, &layer.wv)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let att = g.softmax(scores, None)?;
        let mixed = g.bmm(att, v, false)?;
        let mixed = g.reshape(mixed, &[b, heads, n, dk])?;
        let mixed = g.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = g.reshape(mixed, &[b * n, d])?;
        let mha = layer.wo.forward(g, store, mixed)?;

        let h = g.add(h, mha)?;
        let h = layer.bn1.forward(g, store, h, mode, updates)?;
        let hidden = layer.ff1.forward(g, store, h)?;
        let hidden = g.relu(hidden)?;
        let ff = layer.ff2.forward(g, store, hidden)?;
        let h = g.add(h, ff)?;
        layer.bn2.forward(g, store, h, mode, updates)
    }
}

#[allow(clippy::too_many_arguments)]
fn gated_layer(
    g: &mut Graph,
    store: &ParamStore,
    layer: &GatedLayer,
    h: Var,
    e: Var,
    b: usize,
    n: usize,
    d: usize,
    mode: Mode,
    updates: &mut Vec<BnUpdate>,
) -> Result<(Var, Var)> {
    let full = [b, n, n, d];
    let ue = layer.ue.forward(g, store, e)?;
    let ue = g.reshape(ue, &full)?;
    let veh = layer.ve.forward(g, store, h)?;
    let from_i = g.reshape(veh, &[b, n, 1, d])?;
    let from_i = g.expand(from_i, &full)?;
    let from_j = g.reshape(veh, &[b, 1, n, d])?;
    let from_j = g.expand(from_j, &full)?;
    let e_tmp = g.add(ue, from_i)?;
    let e_tmp = g.add(e_tmp, from_j)?;

    let gate = g.sigmoid(e_tmp)?;
    let vn = layer.vn.forward(g, store, h)?;
    let vn = g.reshape(vn, &[b, 1, n, d])?;
    let vn = g.expand(vn, &full)?;
    let msg = g.mul(gate, vn)?;
    let num = g.sum_axis(msg, 2)?;
    let den = g.sum_axis(gate, 2)?;
    let den = g.add_scalar(den, GATE_EPS)?;
    let agg = g.div(num, den)?;
    let agg = g.reshape(agg, &[b * n, d])?;
    let un = layer.un.forward(g, store, h)?;
    let h_tmp = g.add(un, agg)?;

    let h_norm = layer.bn_h.forward(g, store, h_tmp, mode, updates)?;
    let h_act = g.relu(h_norm)?;
    let h_out = g.add(h, h_act)?;
    let e_flat = g.reshape(e_tmp, &[b * n * n, d])?;
    let e_norm = layer.bn_e.forward(g, store, e_flat, mode, updates)?;
    let e_act = g.relu(e_norm)?;
    let e_out = g.add(e, e_act)?;
    Ok((h_out, e_out))
}

/// Pairwise distances `[b*n*n, 1]`, self-loops included.
fn distances(batch: &[&TspInstance]) -> Tensor {
    let n = batch[0].n();
    let mut data = Vec::with_capacity(batch.len() * n * n);
    for inst in batch {
        data.extend(inst.distance_matrix());
    }
    Tensor::new([batch.len() * n * n, 1], data).expect("length matches shape")
}
