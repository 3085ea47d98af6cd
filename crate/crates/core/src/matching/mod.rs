//! Bipartite matching of predictions to ground truth and the set-prediction
//! loss built on it.

mod hungarian;

pub use hungarian::hungarian;

use crate::detector::{LayerNodes, Prediction, Scene};
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId};

/// Matching costs, one row per query and one column per ground-truth object.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape("cost matrix", format!("{rows}x{cols} vs {} values", values.len())));
        }
        Ok(CostMatrix { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("cost matrix", "ragged rows"));
        }
        CostMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn num_queries(&self) -> usize {
        self.rows
    }

    pub fn num_targets(&self) -> usize {
        self.cols
    }

    pub fn get(&self, query: usize, target: usize) -> f64 {
        self.values[query * self.cols + target]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Same matrix with `delta` added to every entry.
    pub fn shifted(&self, delta: f64) -> CostMatrix {
        CostMatrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| v + delta).collect(),
        }
    }
}

/// `(query_index, gt_index)` pairs ordered by ground-truth index; every
/// ground truth appears once.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pairs: Vec<(usize, usize)>,
    total: f64,
}

impl Assignment {
    pub(crate) fn new(pairs: Vec<(usize, usize)>, total: f64) -> Self {
        Assignment { pairs, total }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// Query matched to each ground truth, in ground-truth order.
    pub fn queries(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    /// Ground truth matched to each of `num_queries` queries, if any.
    pub fn by_query(&self, num_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_queries];
        for &(q, g) in &self.pairs {
            out[q] = Some(g);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub cls_weight: f64,
    pub box_weight: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            cls_weight: 2.0,
            box_weight: 0.25,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

/// `cost(q, g) = -w_cls * score[q, class(g)] + w_box * L1(box[q], box(g))`.
pub fn build_cost(pred: &Prediction, scene: &Scene, cls_weight: f64, box_weight: f64) -> Result<CostMatrix> {
    cost_from_slices(
        pred.scores.data(),
        pred.boxes.data(),
        pred.num_queries(),
        pred.num_classes(),
        scene,
        cls_weight,
        box_weight,
    )
}

fn cost_from_slices(
    scores: &[f32],
    boxes: &[f32],
    nq: usize,
    c: usize,
    scene: &Scene,
    cls_weight: f64,
    box_weight: f64,
) -> Result<CostMatrix> {
    let m = scene.objects.len();
    if m == 0 {
        return Err(Error::InvalidArgument("scene has no objects".into()));
    }
    let mut values = Vec::with_capacity(nq * m);
    for q in 0..nq {
        let b = &boxes[q * 4..q * 4 + 4];
        for o in &scene.objects {
            if o.class_id >= c {
                return Err(Error::InvalidArgument(format!("class {} outside 0..{c}", o.class_id)));
            }
            let gt = o.as_box();
            let l1: f64 = b.iter().zip(gt).map(|(&p, t)| (f64::from(p) - f64::from(t)).abs()).sum();
            values.push(-cls_weight * f64::from(scores[q * c + o.class_id]) + box_weight * l1);
        }
    }
    CostMatrix::new(nq, m, values)
}

/// Focal term of one probability against a 0/1 target.
fn focal_prob(p: f64, target: f64, gamma: f64, alpha: f64) -> f64 {
    let (pt, at) = if target > 0.5 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    let modulation = (1.0 - pt).powf(gamma);
    if modulation == 0.0 {
        return 0.0;
    }
    -at * modulation * pt.max(f64::MIN_POSITIVE).ln()
}

/// Loss of one layer's prediction against a scene, matched by Hungarian.
fn layer_loss(pred: &Prediction, scene: &Scene, cfg: &LossConfig) -> Result<f64> {
    let cost = build_cost(pred, scene, cfg.cls_weight, cfg.box_weight)?;
    let asg = hungarian(&cost)?;
    let c = pred.num_classes();
    let nq = pred.num_queries();
    let matched = asg.by_query(nq);
    let mut cls = 0.0;
    let mut bx = 0.0;
    for q in 0..nq {
        let target_class = matched[q].map(|g| scene.objects[g].class_id);
        for k in 0..c {
            let t = if target_class == Some(k) { 1.0 } else { 0.0 };
            cls += focal_prob(f64::from(pred.scores.at(q, k)), t, cfg.focal_gamma, cfg.focal_alpha);
        }
        if let Some(g) = matched[q] {
            let gt = scene.objects[g].as_box();
            bx += pred
                .boxes
                .row(q)
                .iter()
                .zip(gt)
                .map(|(&p, t)| (f64::from(p) - f64::from(t)).abs())
                .sum::<f64>();
        }
    }
    let m = scene.objects.len() as f64;
    Ok((cfg.cls_weight * cls + cfg.box_weight * bx) / m)
}

/// Set-prediction loss averaged over decoder layers: focal classification
/// loss over all queries (unmatched ones target all-zeros) plus L1 on
/// matched boxes, both normalized by the number of ground-truth objects.
pub fn set_loss(preds: &[Prediction], scene: &Scene, cfg: &LossConfig) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    let mut total = 0.0;
    for p in preds {
        total += layer_loss(p, scene, cfg)?;
    }
    Ok(total / preds.len() as f64)
}

/// Differentiable batch loss plus the final-layer matching record.
#[derive(Debug)]
pub struct GraphLoss {
    pub loss: NodeId,
    /// For each scene, the final-layer matched cost of every query (`None`
    /// when the query was unmatched).
    pub final_costs: Vec<Vec<Option<f64>>>,
}

/// Builds the set loss for a batch on `g` from the per-layer head nodes of
/// a [`crate::detector::ForwardGraph`]. The value is the mean over scenes
/// of [`set_loss`]; the focal term is evaluated from logits.
pub fn set_loss_graph(
    g: &mut Graph,
    layers: &[LayerNodes],
    scenes: &[&Scene],
    num_queries: usize,
    cfg: &LossConfig,
) -> Result<GraphLoss> {
    if layers.is_empty() || scenes.is_empty() {
        return Err(Error::InvalidArgument("empty loss inputs".into()));
    }
    let b = scenes.len();
    let layer_scale = 1.0 / (layers.len() * b) as f64;
    let mut terms = Vec::new();
    let mut final_costs = Vec::new();
    for (li, &LayerNodes { logits, scores, boxes }) in layers.iter().enumerate() {
        let c = g.value(scores).cols();
        let mut targets = vec![0.0f32; b * num_queries * c];
        let mut row_w = vec![0.0f32; b * num_queries];
        let mut box_targets = vec![0.0f32; b * num_queries * 4];
        let mut box_w = vec![0.0f32; b * num_queries];
        for (si, scene) in scenes.iter().enumerate() {
            let rows = si * num_queries..(si + 1) * num_queries;
            let sc = &g.value(scores).data()[rows.start * c..rows.end * c];
            let bx = &g.value(boxes).data()[rows.start * 4..rows.end * 4];
            let cost = cost_from_slices(sc, bx, num_queries, c, scene, cfg.cls_weight, cfg.box_weight)?;
            let asg = hungarian(&cost)?;
            let m = scene.objects.len() as f64;
            let w = (layer_scale / m) as f32;
            for r in rows.clone() {
                row_w[r] = (cfg.cls_weight * layer_scale / m) as f32;
            }
            for &(q, gi) in asg.pairs() {
                let r = rows.start + q;
                let o = &scene.objects[gi];
                targets[r * c + o.class_id] = 1.0;
                box_targets[r * 4..r * 4 + 4].copy_from_slice(&o.as_box());
                box_w[r] = (cfg.box_weight * f64::from(w)) as f32;
            }
            if li + 1 == layers.len() {
                let mut per_query = vec![None; num_queries];
                for &(q, gi) in asg.pairs() {
                    per_query[q] = Some(cost.get(q, gi));
                }
                final_costs.push(per_query);
            }
        }
        let f = g.focal_loss(logits, targets, row_w, cfg.focal_gamma, cfg.focal_alpha)?;
        let l1 = g.l1_loss(boxes, box_targets, box_w)?;
        terms.push(f);
        terms.push(l1);
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = g.add(loss, t)?;
    }
    Ok(GraphLoss { loss, final_costs })
}

/// Exhaustive minimum over all injective ground-truth -> query maps.
#[cfg(test)]
pub(crate) fn brute_force_min(c: &CostMatrix) -> f64 {
    let mut best = f64::INFINITY;
    enumerate(c, &mut Vec::new(), &mut |qs| {
        let t: f64 = qs.iter().enumerate().map(|(g, &q)| c.get(q, g)).sum();
        if t < best {
            best = t;
        }
    });
    best
}

#[cfg(test)]
pub(crate) fn brute_force_lexmin(c: &CostMatrix) -> Vec<usize> {
    let best = brute_force_min(c);
    let mut out: Option<Vec<usize>> = None;
    enumerate(c, &mut Vec::new(), &mut |qs| {
        let t: f64 = qs.iter().enumerate().map(|(g, &q)| c.get(q, g)).sum();
        if t == best && out.as_ref().is_none_or(|o| qs < o.as_slice()) {
            out = Some(qs.to_vec());
        }
    });
    out.unwrap()
}

#[cfg(test)]
fn enumerate(c: &CostMatrix, chosen: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
    if chosen.len() == c.num_targets() {
        f(chosen);
        return;
    }
    for q in 0..c.num_queries() {
        if !chosen.contains(&q) {
            chosen.push(q);
            enumerate(c, chosen, f);
            chosen.pop();
        }
    }
}
