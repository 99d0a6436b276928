use tspnco_autograd::{Graph, ParamId, ParamStore, Var};

use super::encoder::Embeddings;
use super::layers::Linear;
use super::{Init, ModelConfig, Source};
use crate::error::{Error, Result};

/// Attention decoder. The query is built from the graph embedding plus the
/// first and last visited nodes (a learned placeholder before the first
/// move), refined by one multi-head glimpse, and scored against the nodes
/// with a single clipped compatibility head.
#[derive(Clone, Debug)]
pub struct Decoder {
    d: usize,
    heads: usize,
    clip: f64,
    placeholder: ParamId,
    glimpse_k: Linear,
    glimpse_v: Linear,
    logit_k: Linear,
    fixed_ctx: Linear,
    step_ctx: Linear,
    out: Linear,
}

/// Per-instance decoder inputs that do not change between steps.
#[derive(Clone, Copy, Debug)]
pub struct DecoderCache {
    /// `[batch * n, d]`
    pub node: Var,
    /// `[batch, heads, n, d / heads]`
    glimpse_k: Var,
    glimpse_v: Var,
    /// `[batch, n, d]`
    logit_k: Var,
    /// `[batch, d]`
    fixed: Var,
    pub batch: usize,
    pub n: usize,
}

/// One decoding step over `rows` partial tours.
#[derive(Clone, Copy, Debug)]
pub struct StepInput<'a> {
    /// Instance of every row; `None` means row `i` decodes instance `i`.
    pub rows: Option<&'a [usize]>,
    /// First and last visited node per row; `None` at the first step.
    pub ends: Option<(&'a [usize], &'a [usize])>,
    /// `[rows * n]`, `true` for nodes that may still be visited.
    pub allowed: &'a [bool],
}

impl Decoder {
    pub(crate) fn build(src: &mut Source<'_>, prefix: &str, config: &ModelConfig) -> Result<Self> {
        let d = config.encoder.embed_dim;
        Ok(Self {
            d,
            heads: config.encoder.heads,
            clip: config.clip,
            placeholder: src.tensor(&format!("{prefix}.placeholder"), &[2 * d], Init::Uniform(1.0))?,
            glimpse_k: Linear::build(src, &format!("{prefix}.glimpse_k"), d, d, false)?,
            glimpse_v: Linear::build(src, &format!("{prefix}.glimpse_v"), d, d, false)?,
            logit_k: Linear::build(src, &format!("{prefix}.logit_k"), d, d, false)?,
            fixed_ctx: Linear::build(src, &format!("{prefix}.fixed_ctx"), d, d, false)?,
            step_ctx: Linear::build(src, &format!("{prefix}.step_ctx"), 2 * d, d, false)?,
            out: Linear::build(src, &format!("{prefix}.out"), d, d, false)?,
        })
    }

    pub fn tensor_count(&self) -> usize {
        7
    }

    pub fn precompute(&self, g: &mut Graph, store: &ParamStore, emb: &Embeddings) -> Result<DecoderCache> {
        let (b, n, d, heads) = (emb.batch, emb.n, self.d, self.heads);
        let dk = d / heads;
        let split = |g: &mut Graph, lin: &Linear| -> Result<Var> {
            let y = lin.forward(g, store, emb.node)?;
            let y = g.reshape(y, &[b, n, heads, dk])?;
            Ok(g.permute(y, &[0, 2, 1, 3])?)
        };
        let glimpse_k = split(g, &self.glimpse_k)?;
        let glimpse_v = split(g, &self.glimpse_v)?;
        let logit_k = self.logit_k.forward(g, store, emb.node)?;
        let logit_k = g.reshape(logit_k, &[b, n, d])?;
        let fixed = self.fixed_ctx.forward(g, store, emb.graph)?;
        Ok(DecoderCache {
            node: emb.node,
            glimpse_k,
            glimpse_v,
            logit_k,
            fixed,
            batch: b,
            n,
        })
    }

    /// Log-probabilities `[rows, n]`; disallowed nodes are `-inf`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, cache: &DecoderCache, input: &StepInput<'_>) -> Result<Var> {
        let (n, d, heads) = (cache.n, self.d, self.heads);
        let dk = d / heads;
        let rows = input.rows.map_or(cache.batch, <[usize]>::len);
        if input.allowed.len() != rows * n {
            return Err(Error::Config(format!(
                "step mask has {} entries, expected {}",
                input.allowed.len(),
                rows * n
            )));
        }
        let pick = |g: &mut Graph, v: Var| -> Result<Var> {
            match input.rows {
                Some(r) => Ok(g.gather_rows(v, r)?),
                None => Ok(v),
            }
        };

        let fixed = pick(g, cache.fixed)?;
        let ctx = match input.ends {
            None => {
                let p = g.param(store, self.placeholder);
                let p = g.reshape(p, &[1, 2 * d])?;
                g.expand(p, &[rows, 2 * d])?
            }
            Some((first, last)) => {
                let inst = |r: usize| input.rows.map_or(r, |rs| rs[r]);
                let fi: Vec<usize> = first.iter().enumerate().map(|(r, &v)| inst(r) * n + v).collect();
                let li: Vec<usize> = last.iter().enumerate().map(|(r, &v)| inst(r) * n + v).collect();
                let f = g.gather_rows(cache.node, &fi)?;
                let l = g.gather_rows(cache.node, &li)?;
                g.concat_last(&[f, l])?
            }
        };
        let step = self.step_ctx.forward(g, store, ctx)?;
        let query = g.add(fixed, step)?;

        let q = g.reshape(query, &[rows * heads, 1, dk])?;
        let k = pick(g, cache.glimpse_k)?;
        let k = g.reshape(k, &[rows * heads, n, dk])?;
        let v = pick(g, cache.glimpse_v)?;
        let v = g.reshape(v, &[rows * heads, n, dk])?;
        let head_mask: Vec<bool> = input
            .allowed
            .chunks(n)
            .flat_map(|row| std::iter::repeat_n(row, heads).flatten().copied())
            .collect();
        let compat = g.bmm(q, k, true)?;
        let compat = g.scale(compat, 1.0 / (dk as f64).sqrt())?;
        let att = g.softmax(compat, Some(&head_mask))?;
        let glimpse = g.bmm(att, v, false)?;
        let glimpse = g.reshape(glimpse, &[rows, d])?;
        let glimpse = self.out.forward(g, store, glimpse)?;

        let gq = g.reshape(glimpse, &[rows, 1, d])?;
        let lk = pick(g, cache.logit_k)?;
        let logits = g.bmm(gq, lk, true)?;
        let logits = g.reshape(logits, &[rows, n])?;
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt())?;
        let logits = g.tanh(logits)?;
        let logits = g.scale(logits, self.clip)?;
        Ok(g.log_softmax(logits, Some(input.allowed))?)
    }
}
