//! The query-based detector: reference-point queries, scene encoder,
//! decoder, classification/box heads and the NMS-free top-k selector.

mod scene;

pub use scene::{format_scenes, generate_dataset, generate_eval_set, generate_scene, parse_scenes, Object, Scene, SceneConfig};

use crate::attention::{Binder, BoundDecoder, Decoder, Parameters, SelfAttention};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Graph, NodeId, Tensor};
use rand::Rng;
use std::cmp::Ordering;

/// Width of the Gaussian used to splat objects onto the feature grid.
pub const SCENE_SIGMA: f32 = 0.08;
/// Reference points are kept inside `[REF_MARGIN, 1 - REF_MARGIN]`.
pub const REF_MARGIN: f32 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_queries: usize,
    pub grid: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub num_classes: usize,
    pub frequencies: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_queries: 64,
            grid: 8,
            embed_dim: 64,
            heads: 8,
            ffn_dim: 128,
            layers: 3,
            num_classes: 4,
            frequencies: 16,
        }
    }
}

impl ModelConfig {
    pub fn num_keys(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool, &str); 8] = [
            ("num_queries", self.num_queries >= 1, "must be >= 1"),
            ("grid", self.grid >= 1, "must be >= 1"),
            ("embed_dim", self.embed_dim >= 2, "must be >= 2"),
            ("heads", self.heads >= 1 && self.embed_dim.is_multiple_of(self.heads), "must divide embed_dim"),
            ("ffn_dim", self.ffn_dim > self.embed_dim, "must exceed embed_dim"),
            ("layers", self.layers >= 1, "must be >= 1"),
            ("num_classes", self.num_classes >= 2, "must be >= 2"),
            ("frequencies", self.frequencies >= 1, "must be >= 1"),
        ];
        for (field, ok, reason) in checks {
            if !ok {
                return Err(Error::config(field, reason));
            }
        }
        Ok(())
    }
}

/// Sinusoid frequencies applied to each reference-point coordinate.
pub fn frequencies(count: usize) -> Vec<f32> {
    (1..=count).map(|i| std::f32::consts::PI * i as f32).collect()
}

/// Two-layer perceptron with a ReLU between the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    pub fn new<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Mlp {
            w1: Tensor::xavier(input, hidden, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::xavier(hidden, output, rng),
            b2: Tensor::zeros(&[output]),
        }
    }

    fn bind(&self, g: &mut Graph, b: &mut Binder) -> [NodeId; 4] {
        [
            b.bind(g, &self.w1),
            b.bind(g, &self.b1),
            b.bind(g, &self.w2),
            b.bind(g, &self.b2),
        ]
    }

    fn apply(g: &mut Graph, p: [NodeId; 4], x: NodeId) -> Result<NodeId> {
        let h = g.linear(x, p[0], p[1])?;
        let h = g.relu(h);
        g.linear(h, p[2], p[3])
    }
}

impl Parameters for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }
}

/// A reference point removed by pruning, kept only for reporting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetiredQuery {
    pub index: usize,
    pub point: [f32; 2],
}

/// Learnable reference points and the MLP that turns their sinusoidal
/// encoding into decoder queries.
///
/// `ref_points` holds one row per surviving query, in the order of `alive`
/// (original indices, strictly increasing). Pruning deletes the row; the
/// last position of a removed point is kept in `retired`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBank {
    pub ref_points: Tensor,
    pub embed: Mlp,
    alive: Vec<usize>,
    initial: usize,
    retired: Vec<RetiredQuery>,
    freqs: Vec<f32>,
}

impl QueryBank {
    pub fn new<R: Rng>(num_queries: usize, embed_dim: usize, frequencies: usize, rng: &mut R) -> Self {
        let ref_points = Tensor::uniform(&[num_queries, 2], REF_MARGIN, 1.0 - REF_MARGIN, rng);
        let freqs = self::frequencies(frequencies);
        QueryBank {
            ref_points,
            embed: Mlp::new(4 * frequencies, embed_dim, embed_dim, rng),
            alive: (0..num_queries).collect(),
            initial: num_queries,
            retired: Vec::new(),
            freqs,
        }
    }

    /// Rebuilds a bank from stored parts, checking the invariants.
    pub fn from_parts(
        ref_points: Tensor,
        embed: Mlp,
        alive: Vec<usize>,
        initial: usize,
        retired: Vec<RetiredQuery>,
        frequencies: usize,
    ) -> Result<Self> {
        if ref_points.rows() != alive.len() || ref_points.cols() != 2 {
            return Err(Error::shape("query bank", "one 2-d reference point per alive query"));
        }
        if alive.windows(2).any(|w| w[0] >= w[1]) || alive.iter().any(|&i| i >= initial) {
            return Err(Error::InvalidArgument("alive indices must be strictly increasing and < initial".into()));
        }
        if alive.len() + retired.len() != initial {
            return Err(Error::InvalidArgument("alive and retired queries must cover the initial bank".into()));
        }
        Ok(QueryBank {
            ref_points,
            embed,
            alive,
            initial,
            retired,
            freqs: self::frequencies(frequencies),
        })
    }

    pub fn alive(&self) -> &[usize] {
        &self.alive
    }

    pub fn len(&self) -> usize {
        self.alive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alive.is_empty()
    }

    pub fn initial_len(&self) -> usize {
        self.initial
    }

    pub fn retired(&self) -> &[RetiredQuery] {
        &self.retired
    }

    pub fn frequencies(&self) -> usize {
        self.freqs.len()
    }

    /// Removes the queries at the given positions (indices into `alive`).
    /// Returns their original indices.
    pub fn remove_positions(&mut self, positions: &[usize]) -> Result<Vec<usize>> {
        let mut sorted = positions.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != positions.len() || sorted.iter().any(|&p| p >= self.alive.len()) {
            return Err(Error::InvalidArgument(format!("bad prune positions {positions:?}")));
        }
        if sorted.len() >= self.alive.len() {
            return Err(Error::EmptyQueries);
        }
        let removed: Vec<usize> = sorted.iter().map(|&p| self.alive[p]).collect();
        for &p in &sorted {
            let row = self.ref_points.row(p);
            self.retired.push(RetiredQuery {
                index: self.alive[p],
                point: [row[0], row[1]],
            });
        }
        self.ref_points = self.ref_points.without_rows(&sorted);
        self.alive = self
            .alive
            .iter()
            .enumerate()
            .filter(|(i, _)| sorted.binary_search(i).is_err())
            .map(|(_, &v)| v)
            .collect();
        Ok(removed)
    }

    /// Every original query with its current (or last) point and whether it
    /// is still alive, ordered by original index.
    pub fn all_points(&self) -> Vec<(usize, [f32; 2], bool)> {
        let mut out: Vec<_> = self
            .alive
            .iter()
            .enumerate()
            .map(|(pos, &idx)| {
                let r = self.ref_points.row(pos);
                (idx, [r[0], r[1]], true)
            })
            .chain(self.retired.iter().map(|q| (q.index, q.point, false)))
            .collect();
        out.sort_by_key(|e| e.0);
        out
    }

    pub fn clamp_points(&mut self) {
        for v in self.ref_points.data_mut() {
            *v = v.clamp(REF_MARGIN, 1.0 - REF_MARGIN);
        }
    }
}

impl Parameters for QueryBank {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.ref_points"), &self.ref_points);
        self.embed.visit(&format!("{prefix}.embed"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.ref_points"), &mut self.ref_points);
        self.embed.visit_mut(&format!("{prefix}.embed"), f);
    }
}

/// Learned cell embeddings plus class embeddings splatted by a Gaussian
/// kernel around every object center.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEncoder {
    pub pos_embed: Tensor,
    pub class_embed: Tensor,
    pub grid: usize,
    pub sigma: f32,
}

impl SceneEncoder {
    pub fn new<R: Rng>(grid: usize, num_classes: usize, embed_dim: usize, rng: &mut R) -> Self {
        SceneEncoder {
            pos_embed: Tensor::normal(&[grid * grid, embed_dim], 1.0, rng),
            class_embed: Tensor::normal(&[num_classes, embed_dim], 1.0, rng),
            grid,
            sigma: SCENE_SIGMA,
        }
    }

    pub fn cell_center(&self, token: usize) -> [f32; 2] {
        let g = self.grid as f32;
        let (row, col) = (token / self.grid, token % self.grid);
        [(col as f32 + 0.5) / g, (row as f32 + 0.5) / g]
    }

    /// `[Nk x C]` kernel weights: entry `(cell, c)` sums the Gaussian
    /// influence of all class-`c` objects on that cell.
    pub fn influence(&self, scene: &Scene) -> Result<Tensor> {
        let c = self.class_embed.rows();
        let nk = self.grid * self.grid;
        let mut w = vec![0.0f64; nk * c];
        let denom = 2.0 * f64::from(self.sigma) * f64::from(self.sigma);
        for o in &scene.objects {
            if o.class_id >= c {
                return Err(Error::InvalidArgument(format!(
                    "class {} outside 0..{c}",
                    o.class_id
                )));
            }
            for cell in 0..nk {
                let [cx, cy] = self.cell_center(cell);
                let dx = f64::from(cx) - f64::from(o.center[0]);
                let dy = f64::from(cy) - f64::from(o.center[1]);
                w[cell * c + o.class_id] += (-(dx * dx + dy * dy) / denom).exp();
            }
        }
        Tensor::matrix(nk, c, w.into_iter().map(|v| v as f32).collect())
    }

    /// Image-feature stand-in `F [Nk x E]` for one scene.
    pub fn encode(&self, scene: &Scene) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::new(false);
        let bound = self.bind(&mut g, &mut b);
        let f = self.encode_node(&mut g, bound, &[scene])?;
        Ok(g.value(f).clone())
    }

    fn bind(&self, g: &mut Graph, b: &mut Binder) -> [NodeId; 2] {
        [b.bind(g, &self.pos_embed), b.bind(g, &self.class_embed)]
    }

    fn encode_node(&self, g: &mut Graph, p: [NodeId; 2], scenes: &[&Scene]) -> Result<NodeId> {
        let mut weights = Vec::new();
        for s in scenes {
            weights.extend_from_slice(self.influence(s)?.data());
        }
        let nk = self.grid * self.grid;
        let infl = g.constant(Tensor::matrix(nk * scenes.len(), self.class_embed.rows(), weights)?);
        let objects = g.matmul(infl, p[1])?;
        let pos = g.repeat_rows(p[0], scenes.len())?;
        g.add(pos, objects)
    }
}

impl Parameters for SceneEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.pos_embed"), &self.pos_embed);
        f(format!("{prefix}.class_embed"), &self.class_embed);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.pos_embed"), &mut self.pos_embed);
        f(format!("{prefix}.class_embed"), &mut self.class_embed);
    }
}

/// Per-layer output for `Nq` alive queries.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `[Nq x C]` sigmoid class scores.
    pub scores: Tensor,
    /// `[Nq x 4]` boxes `(cx, cy, w, h)`.
    pub boxes: Tensor,
    pub layer_index: usize,
}

impl Prediction {
    pub fn num_queries(&self) -> usize {
        self.scores.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.scores.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    /// Row of the prediction the detection came from.
    pub query_index: usize,
    pub class_id: usize,
    pub score: f32,
    pub box_: [f32; 4],
}

/// The `k` highest-scoring (query, class) instances of the flattened score
/// matrix, best first. Ties go to the lower query index, then the lower
/// class id.
pub fn select_topk(pred: &Prediction, k: usize) -> Result<Vec<Detection>> {
    let (nq, c) = (pred.scores.rows(), pred.scores.cols());
    if k == 0 || k > nq * c {
        return Err(Error::InvalidArgument(format!("k={k} outside 1..={}", nq * c)));
    }
    let scores = pred.scores.data();
    let order = |a: &usize, b: &usize| -> Ordering { scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)) };
    let mut idx: Vec<usize> = (0..nq * c).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_by(order);
    Ok(idx
        .into_iter()
        .map(|flat| {
            let (q, cls) = (flat / c, flat % c);
            let b = pred.boxes.row(q);
            Detection {
                query_index: q,
                class_id: cls,
                score: scores[flat],
                box_: [b[0], b[1], b[2], b[3]],
            }
        })
        .collect())
}

/// Graph nodes for one decoder layer's head outputs over a batch.
#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub logits: NodeId,
    pub scores: NodeId,
    pub boxes: NodeId,
}

/// Result of building the detector graph for a batch of scenes.
#[derive(Debug)]
pub struct ForwardGraph {
    pub graph: Graph,
    pub layers: Vec<LayerNodes>,
    /// Parameter nodes in [`Detector::visit`] order.
    pub params: Vec<NodeId>,
    pub batch: usize,
    pub num_queries: usize,
}

impl ForwardGraph {
    /// Per-layer predictions of scene `b` of the batch.
    pub fn predictions(&self, b: usize) -> Vec<Prediction> {
        (0..self.layers.len()).map(|l| self.predictions_at(l, b)).collect()
    }

    /// Layer `l` prediction of scene `b` of the batch.
    pub fn predictions_at(&self, l: usize, b: usize) -> Prediction {
        let nodes = self.layers[l];
        let rows: Vec<usize> = (b * self.num_queries..(b + 1) * self.num_queries).collect();
        Prediction {
            scores: self.graph.value(nodes.scores).select_rows(&rows),
            boxes: self.graph.value(nodes.boxes).select_rows(&rows),
            layer_index: l,
        }
    }
}

/// Complete model: query bank, scene encoder, decoder and shared heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: ModelConfig,
    pub bank: QueryBank,
    pub encoder: SceneEncoder,
    pub decoder: Decoder,
    pub cls_head: Mlp,
    pub box_head: Mlp,
}

impl Detector {
    /// Fresh model with every parameter drawn from the `init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, Stream::Init);
        let e = config.embed_dim;
        let bank = QueryBank::new(config.num_queries, e, config.frequencies, &mut r);
        let encoder = SceneEncoder::new(config.grid, config.num_classes, e, &mut r);
        let decoder = Decoder::new(config.layers, e, config.heads, config.ffn_dim, &mut r)?;
        let cls_head = Mlp::new(e, e, config.num_classes, &mut r);
        let mut box_head = Mlp::new(e, e, 4, &mut r);
        // Start boxes near their reference point with a mid-sized extent.
        box_head.w2.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        let mut cls_head = cls_head;
        // Prior probability of 0.01 for every class.
        let prior = -((1.0f32 - 0.01) / 0.01).ln();
        cls_head.b2.data_mut().iter_mut().for_each(|v| *v = prior);
        Ok(Detector {
            config,
            bank,
            encoder,
            decoder,
            cls_head,
            box_head,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.bank.len()
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.bank.visit("bank", f);
        self.encoder.visit("encoder", f);
        self.decoder.visit("decoder", f);
        self.cls_head.visit("cls_head", f);
        self.box_head.visit("box_head", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.bank.visit_mut("bank", f);
        self.encoder.visit_mut("encoder", f);
        self.decoder.visit_mut("decoder", f);
        self.cls_head.visit_mut("cls_head", f);
        self.box_head.visit_mut("box_head", f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Builds the graph for a batch of scenes. With `trainable` set, every
    /// parameter is a leaf and receives gradients on `backward`.
    pub fn forward_graph(&self, scenes: &[&Scene], trainable: bool, mode: SelfAttention) -> Result<ForwardGraph> {
        if self.bank.is_empty() {
            return Err(Error::EmptyQueries);
        }
        if scenes.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut g = Graph::new();
        let mut binder = Binder::new(trainable);
        let refs = binder.bind(&mut g, &self.bank.ref_points);
        let embed = self.bank.embed.bind(&mut g, &mut binder);
        let enc = self.encoder.bind(&mut g, &mut binder);
        let decoder = self.decoder.bind(&mut g, &mut binder);
        let cls = self.cls_head.bind(&mut g, &mut binder);
        let bx = self.box_head.bind(&mut g, &mut binder);

        let features = self.encoder.encode_node(&mut g, enc, scenes)?;
        let layers = self.decode(&mut g, refs, embed, &decoder, cls, bx, features, scenes.len(), mode)?;
        Ok(ForwardGraph {
            graph: g,
            layers,
            params: binder.into_ids(),
            batch: scenes.len(),
            num_queries: self.bank.len(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        g: &mut Graph,
        refs: NodeId,
        embed: [NodeId; 4],
        decoder: &BoundDecoder,
        cls: [NodeId; 4],
        bx: [NodeId; 4],
        features: NodeId,
        batch: usize,
        mode: SelfAttention,
    ) -> Result<Vec<LayerNodes>> {
        let enc = g.sinusoid(refs, &self.bank.freqs)?;
        let q0 = Mlp::apply(g, embed, enc)?;
        let queries = g.repeat_rows(q0, batch)?;
        let states = decoder.forward(g, queries, features, batch, mode)?;
        let mut out = Vec::with_capacity(states.len());
        for (layer, state) in decoder.layers.iter().zip(states) {
            let h = layer.head_input(g, state)?;
            let logits = Mlp::apply(g, cls, h)?;
            let scores = g.sigmoid(logits);
            let raw = Mlp::apply(g, bx, h)?;
            let boxes = g.box_decode(raw, refs)?;
            out.push(LayerNodes { logits, scores, boxes });
        }
        Ok(out)
    }

    /// Per-layer predictions for one scene.
    pub fn forward(&self, scene: &Scene) -> Result<Vec<Prediction>> {
        self.forward_with(scene, SelfAttention::Enabled)
    }

    pub fn forward_with(&self, scene: &Scene, mode: SelfAttention) -> Result<Vec<Prediction>> {
        let fg = self.forward_graph(&[scene], false, mode)?;
        Ok(fg.predictions(0))
    }

    /// Forward pass from precomputed features `[Nk x E]`, skipping the scene
    /// encoder. Used for latency measurement.
    pub fn forward_features(&self, features: &Tensor) -> Result<Vec<Prediction>> {
        if self.bank.is_empty() {
            return Err(Error::EmptyQueries);
        }
        let mut g = Graph::new();
        let mut binder = Binder::new(false);
        let refs = binder.bind(&mut g, &self.bank.ref_points);
        let embed = self.bank.embed.bind(&mut g, &mut binder);
        let decoder = self.decoder.bind(&mut g, &mut binder);
        let cls = self.cls_head.bind(&mut g, &mut binder);
        let bx = self.box_head.bind(&mut g, &mut binder);
        let f = g.constant(features.clone());
        let layers = self.decode(&mut g, refs, embed, &decoder, cls, bx, f, 1, SelfAttention::Enabled)?;
        Ok(layers
            .iter()
            .enumerate()
            .map(|(l, n)| Prediction {
                scores: g.value(n.scores).clone(),
                boxes: g.value(n.boxes).clone(),
                layer_index: l,
            })
            .collect())
    }

    /// Final-layer prediction for one scene.
    pub fn predict(&self, scene: &Scene) -> Result<Prediction> {
        let mut preds = self.forward(scene)?;
        Ok(preds.pop().expect("decoder has at least one layer"))
    }
}
