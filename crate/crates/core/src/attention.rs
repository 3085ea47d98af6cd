//! Transformer decoder: multi-head scaled dot-product attention, the
//! self-attention / cross-attention / FFN layer and the stacked decoder.
//!
//! Multi-head attention is a reshape: head `h` reads a contiguous column
//! slice of the projected query, key and value matrices, so the number of
//! heads changes only the per-head width, never the arithmetic volume.

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};
use rand::Rng;

/// Records graph nodes for parameters in a fixed visitation order so that
/// gradients can be routed back to the owning tensors after `backward`.
#[derive(Debug)]
pub struct Binder {
    trainable: bool,
    ids: Vec<NodeId>,
}

impl Binder {
    pub fn new(trainable: bool) -> Self {
        Binder {
            trainable,
            ids: Vec::new(),
        }
    }

    pub fn bind(&mut self, g: &mut Graph, t: &Tensor) -> NodeId {
        let id = if self.trainable {
            g.leaf(t.clone())
        } else {
            g.constant(t.clone())
        };
        self.ids.push(id);
        id
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn into_ids(self) -> Vec<NodeId> {
        self.ids
    }
}

/// Visits parameter tensors in the same order their `bind` methods create
/// graph nodes.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
}

/// Projection weights of one attention block. `wq`/`wk` are `E x E`,
/// `wv`/`wo` are `Dv x Dv`; every projection has a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bq: Tensor,
    pub bk: Tensor,
    pub bv: Tensor,
    pub bo: Tensor,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BoundAttention {
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    bq: NodeId,
    bk: NodeId,
    bv: NodeId,
    bo: NodeId,
    heads: usize,
}

impl AttentionParams {
    pub fn new<R: Rng>(embed_dim: usize, value_dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let p = AttentionParams {
            wq: Tensor::xavier(embed_dim, embed_dim, rng),
            wk: Tensor::xavier(embed_dim, embed_dim, rng),
            wv: Tensor::xavier(value_dim, value_dim, rng),
            wo: Tensor::xavier(value_dim, value_dim, rng),
            bq: Tensor::zeros(&[embed_dim]),
            bk: Tensor::zeros(&[embed_dim]),
            bv: Tensor::zeros(&[value_dim]),
            bo: Tensor::zeros(&[value_dim]),
            heads,
        };
        p.validate()?;
        Ok(p)
    }

    /// All four projections set to the identity with zero biases.
    pub fn identity(embed_dim: usize, value_dim: usize, heads: usize) -> Result<Self> {
        let p = AttentionParams {
            wq: Tensor::identity(embed_dim),
            wk: Tensor::identity(embed_dim),
            wv: Tensor::identity(value_dim),
            wo: Tensor::identity(value_dim),
            bq: Tensor::zeros(&[embed_dim]),
            bk: Tensor::zeros(&[embed_dim]),
            bv: Tensor::zeros(&[value_dim]),
            bo: Tensor::zeros(&[value_dim]),
            heads,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn embed_dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn value_dim(&self) -> usize {
        self.wv.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.embed_dim();
        let dv = self.value_dim();
        let square = |t: &Tensor, n: usize| t.shape() == [n, n];
        if !(square(&self.wq, e) && square(&self.wk, e) && square(&self.wv, dv) && square(&self.wo, dv))
        {
            return Err(Error::shape("attention params", "projections must be square E x E / Dv x Dv"));
        }
        if self.bq.len() != e || self.bk.len() != e || self.bv.len() != dv || self.bo.len() != dv {
            return Err(Error::shape("attention params", "bias lengths must match projections"));
        }
        if self.heads == 0 || !e.is_multiple_of(self.heads) || !dv.is_multiple_of(self.heads) {
            return Err(Error::shape(
                "attention params",
                format!("{} heads must divide E={e} and Dv={dv}", self.heads),
            ));
        }
        Ok(())
    }

    pub(crate) fn bind(&self, g: &mut Graph, b: &mut Binder) -> BoundAttention {
        BoundAttention {
            wq: b.bind(g, &self.wq),
            wk: b.bind(g, &self.wk),
            wv: b.bind(g, &self.wv),
            wo: b.bind(g, &self.wo),
            bq: b.bind(g, &self.bq),
            bk: b.bind(g, &self.bk),
            bv: b.bind(g, &self.bv),
            bo: b.bind(g, &self.bo),
            heads: self.heads,
        }
    }
}

impl Parameters for AttentionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (name, t) in [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("bq", &self.bq),
            ("bk", &self.bk),
            ("bv", &self.bv),
            ("bo", &self.bo),
        ] {
            f(format!("{prefix}.{name}"), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (name, t) in [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("bq", &mut self.bq),
            ("bk", &mut self.bk),
            ("bv", &mut self.bv),
            ("bo", &mut self.bo),
        ] {
            f(format!("{prefix}.{name}"), t);
        }
    }
}

/// `Softmax((q Wq)(k Wk)^T / sqrt(Dv/H)) (v Wv) Wo`, evaluated per head and
/// per block of `blocks` independent samples stacked along the rows.
pub(crate) fn attention_node(
    g: &mut Graph,
    p: &BoundAttention,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    blocks: usize,
) -> Result<NodeId> {
    let qp = g.linear(q, p.wq, p.bq)?;
    let kp = g.linear(k, p.wk, p.bk)?;
    let vp = g.linear(v, p.wv, p.bv)?;
    let mixed = g.attention(qp, kp, vp, p.heads, blocks)?;
    g.linear(mixed, p.wo, p.bo)
}

/// Multi-head attention of `q [Nq x E]` over `k [Nk x E]` / `v [Nk x Dv]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    attention_with_weights(q, k, v, p).map(|(out, _)| out)
}

/// Like [`attention`], also returning the weights as `[head][query][key]`.
pub fn attention_with_weights(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    p: &AttentionParams,
) -> Result<(Tensor, Vec<f32>)> {
    p.validate()?;
    if q.cols() != p.embed_dim() || k.cols() != p.embed_dim() || v.cols() != p.value_dim() {
        return Err(Error::shape(
            "attention",
            format!(
                "q {:?}, k {:?}, v {:?} against E={} Dv={}",
                q.shape(),
                k.shape(),
                v.shape(),
                p.embed_dim(),
                p.value_dim()
            ),
        ));
    }
    let mut g = Graph::new();
    let mut binder = Binder::new(false);
    let bound = p.bind(&mut g, &mut binder);
    let (qn, kn, vn) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let qp = g.linear(qn, bound.wq, bound.bq)?;
    let kp = g.linear(kn, bound.wk, bound.bk)?;
    let vp = g.linear(vn, bound.wv, bound.bv)?;
    let mixed = g.attention(qp, kp, vp, bound.heads, 1)?;
    let out = g.linear(mixed, bound.wo, bound.bo)?;
    let weights = g.attention_weights(mixed).unwrap_or_default().to_vec();
    Ok((g.value(out).clone(), weights))
}

/// Self-attention: the queries also serve as keys and values.
pub fn self_attention(q: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    if p.embed_dim() != p.value_dim() {
        return Err(Error::shape("self_attention", "requires Dv == E"));
    }
    attention(q, q, q, p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    pub fn new(n: usize) -> Self {
        LayerNormParams {
            gain: Tensor::filled(&[n], 1.0),
            bias: Tensor::zeros(&[n]),
        }
    }
}

/// Whether the self-attention sub-block runs. Bypassing it makes every query
/// row's trajectory through the decoder independent of the other queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelfAttention {
    #[default]
    Enabled,
    Bypassed,
}

/// One post-norm decoder layer: self-attention, cross-attention and FFN,
/// each followed by a residual add and layer norm. `out_norm` normalizes the
/// layer's state on its way to the prediction heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub norm_self: LayerNormParams,
    pub norm_cross: LayerNormParams,
    pub norm_ffn: LayerNormParams,
    pub out_norm: LayerNormParams,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BoundLayer {
    self_attn: BoundAttention,
    cross_attn: BoundAttention,
    ffn_w1: NodeId,
    ffn_b1: NodeId,
    ffn_w2: NodeId,
    ffn_b2: NodeId,
    norms: [(NodeId, NodeId); 4],
}

impl DecoderLayer {
    pub fn new<R: Rng>(embed_dim: usize, heads: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let layer = DecoderLayer {
            self_attn: AttentionParams::new(embed_dim, embed_dim, heads, rng)?,
            cross_attn: AttentionParams::new(embed_dim, embed_dim, heads, rng)?,
            ffn_w1: Tensor::xavier(embed_dim, hidden, rng),
            ffn_b1: Tensor::zeros(&[hidden]),
            ffn_w2: Tensor::xavier(hidden, embed_dim, rng),
            ffn_b2: Tensor::zeros(&[embed_dim]),
            norm_self: LayerNormParams::new(embed_dim),
            norm_cross: LayerNormParams::new(embed_dim),
            norm_ffn: LayerNormParams::new(embed_dim),
            out_norm: LayerNormParams::new(embed_dim),
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn embed_dim(&self) -> usize {
        self.self_attn.embed_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.ffn_w1.cols()
    }

    pub fn validate(&self) -> Result<()> {
        self.self_attn.validate()?;
        self.cross_attn.validate()?;
        let e = self.embed_dim();
        let h = self.hidden_dim();
        if self.self_attn.value_dim() != e || self.cross_attn.embed_dim() != e || self.cross_attn.value_dim() != e {
            return Err(Error::shape("decoder layer", "attention blocks must use E == Dv"));
        }
        if h <= e {
            return Err(Error::shape(
                "decoder layer",
                format!("FFN hidden width {h} must exceed Dv={e}"),
            ));
        }
        if self.ffn_w1.shape() != [e, h] || self.ffn_w2.shape() != [h, e] || self.ffn_b1.len() != h || self.ffn_b2.len() != e {
            return Err(Error::shape("decoder layer", "FFN shapes"));
        }
        Ok(())
    }

    pub(crate) fn bind(&self, g: &mut Graph, b: &mut Binder) -> BoundLayer {
        let self_attn = self.self_attn.bind(g, b);
        let cross_attn = self.cross_attn.bind(g, b);
        let ffn_w1 = b.bind(g, &self.ffn_w1);
        let ffn_b1 = b.bind(g, &self.ffn_b1);
        let ffn_w2 = b.bind(g, &self.ffn_w2);
        let ffn_b2 = b.bind(g, &self.ffn_b2);
        let mut norm = |n: &LayerNormParams| (b.bind(g, &n.gain), b.bind(g, &n.bias));
        let norms = [
            norm(&self.norm_self),
            norm(&self.norm_cross),
            norm(&self.norm_ffn),
            norm(&self.out_norm),
        ];
        BoundLayer {
            self_attn,
            cross_attn,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            norms,
        }
    }
}

impl Parameters for DecoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        self.cross_attn.visit(&format!("{prefix}.cross_attn"), f);
        f(format!("{prefix}.ffn_w1"), &self.ffn_w1);
        f(format!("{prefix}.ffn_b1"), &self.ffn_b1);
        f(format!("{prefix}.ffn_w2"), &self.ffn_w2);
        f(format!("{prefix}.ffn_b2"), &self.ffn_b2);
        for (name, n) in [
            ("norm_self", &self.norm_self),
            ("norm_cross", &self.norm_cross),
            ("norm_ffn", &self.norm_ffn),
            ("out_norm", &self.out_norm),
        ] {
            f(format!("{prefix}.{name}.gain"), &n.gain);
            f(format!("{prefix}.{name}.bias"), &n.bias);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
        self.cross_attn.visit_mut(&format!("{prefix}.cross_attn"), f);
        f(format!("{prefix}.ffn_w1"), &mut self.ffn_w1);
        f(format!("{prefix}.ffn_b1"), &mut self.ffn_b1);
        f(format!("{prefix}.ffn_w2"), &mut self.ffn_w2);
        f(format!("{prefix}.ffn_b2"), &mut self.ffn_b2);
        for (name, n) in [
            ("norm_self", &mut self.norm_self),
            ("norm_cross", &mut self.norm_cross),
            ("norm_ffn", &mut self.norm_ffn),
            ("out_norm", &mut self.out_norm),
        ] {
            f(format!("{prefix}.{name}.gain"), &mut n.gain);
            f(format!("{prefix}.{name}.bias"), &mut n.bias);
        }
    }
}

impl BoundLayer {
    fn forward(
        &self,
        g: &mut Graph,
        q: NodeId,
        features: NodeId,
        blocks: usize,
        mode: SelfAttention,
    ) -> Result<NodeId> {
        let mut state = q;
        if mode == SelfAttention::Enabled {
            let sa = attention_node(g, &self.self_attn, state, state, state, blocks)?;
            let sum = g.add(state, sa)?;
            state = g.layer_norm(sum, self.norms[0].0, self.norms[0].1)?;
        }
        let ca = attention_node(g, &self.cross_attn, state, features, features, blocks)?;
        let sum = g.add(state, ca)?;
        state = g.layer_norm(sum, self.norms[1].0, self.norms[1].1)?;

        let hidden = g.linear(state, self.ffn_w1, self.ffn_b1)?;
        let hidden = g.relu(hidden);
        let ff = g.linear(hidden, self.ffn_w2, self.ffn_b2)?;
        let sum = g.add(state, ff)?;
        g.layer_norm(sum, self.norms[2].0, self.norms[2].1)
    }

    pub(crate) fn head_input(&self, g: &mut Graph, state: NodeId) -> Result<NodeId> {
        g.layer_norm(state, self.norms[3].0, self.norms[3].1)
    }
}

/// `N` stacked decoder layers; the output of layer `l` is the input of `l+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
}

#[derive(Debug, Clone)]
pub(crate) struct BoundDecoder {
    pub(crate) layers: Vec<BoundLayer>,
}

impl Decoder {
    pub fn new<R: Rng>(
        num_layers: usize,
        embed_dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::InvalidArgument("decoder needs at least one layer".into()));
        }
        let layers = (0..num_layers)
            .map(|_| DecoderLayer::new(embed_dim, heads, hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Decoder { layers })
    }

    pub fn embed_dim(&self) -> usize {
        self.layers[0].embed_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::InvalidArgument("decoder needs at least one layer".into()))?;
        for layer in &self.layers {
            layer.validate()?;
            if layer.embed_dim() != first.embed_dim() || layer.hidden_dim() != first.hidden_dim() {
                return Err(Error::shape("decoder", "layers must share E and h"));
            }
        }
        Ok(())
    }

    pub(crate) fn bind(&self, g: &mut Graph, b: &mut Binder) -> BoundDecoder {
        BoundDecoder {
            layers: self.layers.iter().map(|l| l.bind(g, b)).collect(),
        }
    }
}

impl Parameters for Decoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }
}

impl BoundDecoder {
    /// Runs every layer; returns the per-layer query states.
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        queries: NodeId,
        features: NodeId,
        blocks: usize,
        mode: SelfAttention,
    ) -> Result<Vec<NodeId>> {
        if g.value(queries).rows() == 0 {
            return Err(Error::EmptyQueries);
        }
        let mut states = Vec::with_capacity(self.layers.len());
        let mut state = queries;
        for layer in &self.layers {
            state = layer.forward(g, state, features, blocks, mode)?;
            states.push(state);
        }
        Ok(states)
    }
}

/// Runs the decoder on `queries [Nq x E]` against image features
/// `features [Nk x E]`, returning the `N` intermediate query states.
pub fn decoder_forward(queries: &Tensor, features: &Tensor, decoder: &Decoder) -> Result<Vec<Tensor>> {
    decoder_forward_with(queries, features, decoder, SelfAttention::Enabled)
}

pub fn decoder_forward_with(
    queries: &Tensor,
    features: &Tensor,
    decoder: &Decoder,
    mode: SelfAttention,
) -> Result<Vec<Tensor>> {
    if queries.rows() == 0 || queries.is_empty() {
        return Err(Error::EmptyQueries);
    }
    decoder.validate()?;
    let e = decoder.embed_dim();
    if queries.cols() != e || features.cols() != e {
        return Err(Error::shape(
            "decoder_forward",
            format!("queries {:?}, features {:?}, E={e}", queries.shape(), features.shape()),
        ));
    }
    let mut g = Graph::new();
    let mut binder = Binder::new(false);
    let bound = decoder.bind(&mut g, &mut binder);
    let q = g.constant(queries.clone());
    let f = g.constant(features.clone());
    let states = bound.forward(&mut g, q, f, 1, mode)?;
    Ok(states.into_iter().map(|s| g.value(s).clone()).collect())
}
