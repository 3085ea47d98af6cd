//! Independent `f64` reference implementations and a finite-difference
//! gradient checker shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use gpq_core::detector::{Object, Prediction, Scene};
use gpq_core::matching::{build_cost, hungarian, set_loss_graph, LossConfig};
use gpq_core::detector::LayerNodes;
use gpq_core::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL: f64 = 1e-3;
pub const FD_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| r.random_range(-1.5f32..1.5)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Values bounded away from zero, for kinked functions.
pub fn away_from_zero(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let v = r.random_range(0.05f32..1.5);
            if r.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn widen(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = gain.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let rs = 1.0 / (var + eps).sqrt();
        out.extend(row.iter().enumerate().map(|(j, v)| (v - mean) * rs * gain[j] + bias[j]));
    }
    out
}

/// Scaled dot-product attention, per block and head, scale `1/sqrt(dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    e: usize,
    dv_total: usize,
    heads: usize,
    blocks: usize,
    q_total: usize,
    k_total: usize,
) -> Vec<f64> {
    let (qr, kr) = (q_total / blocks, k_total / blocks);
    let (dk, dv) = (e / heads, dv_total / heads);
    let scale = 1.0 / (dv as f64).sqrt();
    let mut out = vec![0.0; q_total * dv_total];
    for b in 0..blocks {
        for h in 0..heads {
            for i in 0..qr {
                let qi = b * qr + i;
                let s: Vec<f64> = (0..kr)
                    .map(|j| {
                        let kj = b * kr + j;
                        (0..dk).map(|d| q[qi * e + h * dk + d] * k[kj * e + h * dk + d]).sum::<f64>() * scale
                    })
                    .collect();
                let p = softmax_rows(&s, kr);
                for c in 0..dv {
                    out[qi * dv_total + h * dv + c] =
                        (0..kr).map(|j| p[j] * v[(b * kr + j) * dv_total + h * dv + c]).sum();
                }
            }
        }
    }
    out
}

pub fn focal(z: f64, t: f64, gamma: f64, alpha: f64) -> f64 {
    let p = sigmoid(z);
    let pos = -alpha * (1.0 - p).powf(gamma) * p.ln();
    let neg = -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln();
    t * pos + (1.0 - t) * neg
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Outcome of one gradient check.
#[derive(Debug)]
pub struct GradCheck {
    pub worst_excess: f64,
    pub compared: usize,
    pub failures: Vec<String>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= (FD_REL * analytic.abs().max(numeric.abs())).max(FD_FLOOR)
}

/// Checks `build`'s analytic gradient with respect to every input against
/// central differences of `reference`, an `f64` implementation of the same
/// function. Non-scalar outputs are reduced by fixed random weights.
pub fn check_op(
    name: &str,
    inputs: &[Tensor],
    build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId,
    reference: &dyn Fn(&[Vec<f64>]) -> Vec<f64>,
    seed: u64,
) -> GradCheck {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids);
    let shape = g.value(out).shape().to_vec();
    let (m, n) = if g.value(out).len() == 1 { (1, 1) } else { (shape[0], shape[1]) };
    let mut r = rng(seed ^ 0xA5A5);
    let left = randn(&mut r, 1, m);
    let right = randn(&mut r, n, 1);
    let loss = if g.value(out).len() == 1 {
        out
    } else {
        let lc = g.constant(left.clone());
        let rc = g.constant(right.clone());
        let t = g.matmul(lc, out).unwrap();
        g.matmul(t, rc).unwrap()
    };
    g.backward(loss).unwrap();
    let (lw, rw) = (widen(&left), widen(&right));
    let weights: Vec<f64> = (0..m * n).map(|i| if m * n == 1 { 1.0 } else { lw[i / n] * rw[i % n] }).collect();
    let eval = |xs: &[Vec<f64>]| -> f64 { reference(xs).iter().zip(&weights).map(|(a, b)| a * b).sum() };

    let base: Vec<Vec<f64>> = inputs.iter().map(widen).collect();
    let mut res = GradCheck {
        worst_excess: 0.0,
        compared: 0,
        failures: Vec::new(),
    };
    for (i, id) in ids.iter().enumerate() {
        let analytic = g.grad(*id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let mut xs = base.clone();
            xs[i][j] += FD_STEP;
            let up = eval(&xs);
            xs[i][j] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = f64::from(analytic[j]);
            res.compared += 1;
            let tol = (FD_REL * a.abs().max(numeric.abs())).max(FD_FLOOR);
            res.worst_excess = res.worst_excess.max((a - numeric).abs() / tol);
            if !close(a, numeric) {
                res.failures.push(format!("{name}: input {i}[{j}] analytic {a:e} numeric {numeric:e}"));
            }
        }
    }
    res
}

/// One random instance of every differentiable graph operation.
pub fn op_cases(seed: u64) -> Vec<GradCheck> {
    let mut r = rng(seed);
    let mut d = |lo: usize, hi: usize| r.random_range(lo..=hi);
    let (m, k, n) = (d(1, 8), d(1, 8), d(2, 8));
    let heads = d(1, 2);
    let (dk, dvh, qr, kr, blocks) = (d(1, 4), d(1, 4), d(1, 4), d(1, 4), d(1, 2));
    let times = d(1, 3);
    let fcount = d(1, 3);
    let mut r = rng(seed.wrapping_add(1));
    let mut out = Vec::new();

    let (a, b) = (randn(&mut r, m, k), randn(&mut r, k, n));
    out.push(check_op(
        "matmul",
        &[a, b],
        &|g, x| g.matmul(x[0], x[1]).unwrap(),
        &|x| matmul(&x[0], &x[1], m, k, n),
        seed,
    ));

    let (a, b) = (randn(&mut r, m, n), randn(&mut r, m, n));
    out.push(check_op(
        "add",
        &[a, b],
        &|g, x| g.add(x[0], x[1]).unwrap(),
        &|x| x[0].iter().zip(&x[1]).map(|(p, q)| p + q).collect(),
        seed,
    ));

    let (a, b) = (randn(&mut r, m, n), Tensor::vector(randn(&mut r, 1, n).into_data()));
    out.push(check_op(
        "add_bias",
        &[a, b],
        &|g, x| g.add_bias(x[0], x[1]).unwrap(),
        &|x| x[0].iter().enumerate().map(|(i, v)| v + x[1][i % n]).collect(),
        seed,
    ));

    let (a, w, b) = (randn(&mut r, m, k), randn(&mut r, k, n), Tensor::vector(randn(&mut r, 1, n).into_data()));
    out.push(check_op(
        "linear",
        &[a, w, b],
        &|g, x| g.linear(x[0], x[1], x[2]).unwrap(),
        &|x| matmul(&x[0], &x[1], m, k, n).iter().enumerate().map(|(i, v)| v + x[2][i % n]).collect(),
        seed,
    ));

    out.push(check_op(
        "relu",
        &[away_from_zero(&mut r, m, n)],
        &|g, x| g.relu(x[0]),
        &|x| x[0].iter().map(|v| v.max(0.0)).collect(),
        seed,
    ));

    out.push(check_op(
        "sigmoid",
        &[randn(&mut r, m, n)],
        &|g, x| g.sigmoid(x[0]),
        &|x| x[0].iter().map(|&v| sigmoid(v)).collect(),
        seed,
    ));

    out.push(check_op(
        "softmax_rows",
        &[randn(&mut r, m, n)],
        &|g, x| g.softmax_rows(x[0]),
        &|x| softmax_rows(&x[0], n),
        seed,
    ));

    // Rows are spread out so the normalization is far from its
    // near-constant-row regime, where the step is too coarse.
    let ln = n.max(3);
    let gain = Tensor::vector(randn(&mut r, 1, ln).into_data());
    let bias = Tensor::vector(randn(&mut r, 1, ln).into_data());
    let rows: Vec<f32> = (0..m * ln).map(|i| (i % ln) as f32 * 0.7 + r.random_range(-0.3f32..0.3)).collect();
    out.push(check_op(
        "layer_norm",
        &[Tensor::matrix(m, ln, rows).unwrap(), gain, bias],
        &|g, x| g.layer_norm(x[0], x[1], x[2]).unwrap(),
        &|x| layer_norm(&x[0], &x[1], &x[2], gpq_core::tensor::LAYER_NORM_EPS),
        seed,
    ));

    let (e, dv_total) = (dk * heads, dvh * heads);
    let (q_total, k_total) = (qr * blocks, kr * blocks);
    out.push(check_op(
        "attention",
        &[randn(&mut r, q_total, e), randn(&mut r, k_total, e), randn(&mut r, k_total, dv_total)],
        &|g, x| g.attention(x[0], x[1], x[2], heads, blocks).unwrap(),
        &|x| attention(&x[0], &x[1], &x[2], e, dv_total, heads, blocks, q_total, k_total),
        seed,
    ));

    out.push(check_op(
        "repeat_rows",
        &[randn(&mut r, m, n)],
        &|g, x| g.repeat_rows(x[0], times).unwrap(),
        &|x| x[0].iter().cycle().take(x[0].len() * times).cloned().collect(),
        seed,
    ));

    let freqs: Vec<f32> = (1..=fcount).map(|i| i as f32 * 1.3).collect();
    let cols = d(1, 2);
    let fr = freqs.clone();
    out.push(check_op(
        "sinusoid",
        &[randn(&mut r, m, cols)],
        &|g, x| g.sinusoid(x[0], &fr).unwrap(),
        &|x| {
            let f = freqs.len();
            let mut o = vec![0.0; m * cols * 2 * f];
            for row in 0..m {
                for c in 0..cols {
                    for (i, &w) in freqs.iter().enumerate() {
                        let a = f64::from(w) * x[0][row * cols + c];
                        o[row * cols * 2 * f + c * 2 * f + i] = a.sin();
                        o[row * cols * 2 * f + c * 2 * f + f + i] = a.cos();
                    }
                }
            }
            o
        },
        seed,
    ));

    let nref = m;
    let refs: Vec<f32> = (0..nref * 2).map(|_| r.random_range(0.1f32..0.9)).collect();
    out.push(check_op(
        "box_decode",
        &[randn(&mut r, nref * times, 4), Tensor::matrix(nref, 2, refs).unwrap()],
        &|g, x| g.box_decode(x[0], x[1]).unwrap(),
        &|x| {
            (0..nref * times * 4)
                .map(|i| {
                    let (row, j) = (i / 4, i % 4);
                    let z = x[0][i] + if j < 2 { logit(x[1][(row % nref) * 2 + j]) } else { 0.0 };
                    sigmoid(z)
                })
                .collect()
        },
        seed,
    ));

    let targets: Vec<f32> = (0..m * n).map(|_| f32::from(u8::from(r.random_bool(0.3)))).collect();
    let row_w: Vec<f32> = (0..m).map(|_| r.random_range(0.1f32..2.0)).collect();
    let (t2, w2) = (targets.clone(), row_w.clone());
    out.push(check_op(
        "focal_loss",
        &[randn(&mut r, m, n)],
        &move |g, x| g.focal_loss(x[0], t2.clone(), w2.clone(), 2.0, 0.25).unwrap(),
        &|x| {
            vec![x[0]
                .iter()
                .enumerate()
                .map(|(i, &z)| f64::from(row_w[i / n]) * focal(z, f64::from(targets[i]), 2.0, 0.25))
                .sum()]
        },
        seed,
    ));

    let xs = randn(&mut r, m, 4);
    let offs = away_from_zero(&mut r, m, 4);
    let targets: Vec<f32> = xs.data().iter().zip(offs.data()).map(|(a, b)| a + b).collect();
    let row_w: Vec<f32> = (0..m).map(|_| r.random_range(0.1f32..2.0)).collect();
    let (t2, w2) = (targets.clone(), row_w.clone());
    out.push(check_op(
        "l1_loss",
        &[xs],
        &move |g, x| g.l1_loss(x[0], t2.clone(), w2.clone()).unwrap(),
        &|x| {
            vec![x[0]
                .iter()
                .enumerate()
                .map(|(i, &v)| f64::from(row_w[i / 4]) * (v - f64::from(targets[i])).abs())
                .sum()]
        },
        seed,
    ));

    out.push(check_op(
        "sum",
        &[randn(&mut r, m, n)],
        &|g, x| g.sum(x[0]),
        &|x| vec![x[0].iter().sum()],
        seed,
    ));

    let factor = r.random_range(-2.0f32..2.0);
    out.push(check_op(
        "scale",
        &[randn(&mut r, m, n)],
        &|g, x| g.scale(x[0], factor),
        &|x| x[0].iter().map(|v| v * f64::from(factor)).collect(),
        seed,
    ));
    out
}

/// A random set-loss instance: per-layer logits and raw boxes for a batch
/// of scenes, sharing one set of reference points.
pub struct SetLossCase {
    pub layers: usize,
    pub nq: usize,
    pub classes: usize,
    pub scenes: Vec<Scene>,
    /// `2 * layers` tensors: logits then raw boxes for each layer, followed
    /// by the reference points.
    pub inputs: Vec<Tensor>,
}

pub fn set_loss_case(seed: u64) -> SetLossCase {
    let mut r = rng(seed);
    let layers = r.random_range(1..=2);
    let batch = r.random_range(1..=2);
    let nq = r.random_range(2..=6);
    let classes = r.random_range(2..=4);
    let scenes = (0..batch)
        .map(|s| Scene {
            id: s as u64,
            objects: (0..r.random_range(1..=nq.min(4)))
                .map(|_| Object {
                    class_id: r.random_range(0..classes),
                    center: [r.random_range(0.1..0.9), r.random_range(0.1..0.9)],
                    size: [r.random_range(0.05..0.3), r.random_range(0.05..0.3)],
                })
                .collect(),
        })
        .collect();
    let mut inputs = Vec::new();
    for _ in 0..layers {
        inputs.push(randn(&mut r, batch * nq, classes));
        inputs.push(randn(&mut r, batch * nq, 4));
    }
    let refs: Vec<f32> = (0..nq * 2).map(|_| r.random_range(0.1f32..0.9)).collect();
    inputs.push(Tensor::matrix(nq, 2, refs).unwrap());
    SetLossCase {
        layers,
        nq,
        classes,
        scenes,
        inputs,
    }
}

fn decode(raw: &[f64], refs: &[f64], nq: usize) -> Vec<f64> {
    raw.iter()
        .enumerate()
        .map(|(i, &z)| {
            let (row, j) = (i / 4, i % 4);
            sigmoid(z + if j < 2 { logit(refs[(row % nq) * 2 + j]) } else { 0.0 })
        })
        .collect()
}

/// Hungarian assignment of every (layer, scene) at the given inputs.
fn assignments(case: &SetLossCase, x: &[Vec<f64>], cfg: &LossConfig) -> Vec<Vec<(usize, usize)>> {
    let (nq, c) = (case.nq, case.classes);
    let refs = &x[2 * case.layers];
    let mut out = Vec::new();
    for l in 0..case.layers {
        let scores: Vec<f64> = x[2 * l].iter().map(|&z| sigmoid(z)).collect();
        let boxes = decode(&x[2 * l + 1], refs, nq);
        for (s, scene) in case.scenes.iter().enumerate() {
            let pred = Prediction {
                scores: Tensor::matrix(nq, c, scores[s * nq * c..(s + 1) * nq * c].iter().map(|&v| v as f32).collect())
                    .unwrap(),
                boxes: Tensor::matrix(nq, 4, boxes[s * nq * 4..(s + 1) * nq * 4].iter().map(|&v| v as f32).collect())
                    .unwrap(),
                layer_index: l,
            };
            let cost = build_cost(&pred, scene, cfg.cls_weight, cfg.box_weight).unwrap();
            out.push(hungarian(&cost).unwrap().pairs().to_vec());
        }
    }
    out
}

/// The set loss under fixed assignments: focal over every query and class,
/// L1 over matched boxes, each scene normalized by its object count, then
/// averaged over layers and scenes.
fn set_loss_reference(case: &SetLossCase, x: &[Vec<f64>], asg: &[Vec<(usize, usize)>], cfg: &LossConfig) -> f64 {
    let (nq, c, b) = (case.nq, case.classes, case.scenes.len());
    let refs = &x[2 * case.layers];
    let mut total = 0.0;
    for l in 0..case.layers {
        let boxes = decode(&x[2 * l + 1], refs, nq);
        for (s, scene) in case.scenes.iter().enumerate() {
            let pairs = &asg[l * b + s];
            let m = scene.objects.len() as f64;
            let mut cls = 0.0;
            for q in 0..nq {
                for k in 0..c {
                    let t = pairs.iter().any(|&(pq, g)| pq == q && scene.objects[g].class_id == k);
                    cls += focal(x[2 * l][(s * nq + q) * c + k], f64::from(u8::from(t)), cfg.focal_gamma, cfg.focal_alpha);
                }
            }
            let mut l1 = 0.0;
            for &(q, g) in pairs {
                let gt = scene.objects[g].as_box();
                for j in 0..4 {
                    l1 += (boxes[(s * nq + q) * 4 + j] - f64::from(gt[j])).abs();
                }
            }
            total += (cfg.cls_weight * cls + cfg.box_weight * l1) / m;
        }
    }
    total / (case.layers * b) as f64
}

/// Gradient check of the full set loss. Returns `None` when some
/// perturbation changes the matching (the point is not matching-stable).
pub fn set_loss_check(seed: u64) -> Option<GradCheck> {
    let case = set_loss_case(seed);
    let cfg = LossConfig::default();
    let base: Vec<Vec<f64>> = case.inputs.iter().map(widen).collect();
    let asg = assignments(&case, &base, &cfg);
    // The L1 term has a kink wherever a matched box coordinate equals its
    // target; such points are not differentiable.
    let refs = &base[2 * case.layers];
    let b = case.scenes.len();
    for l in 0..case.layers {
        let boxes = decode(&base[2 * l + 1], refs, case.nq);
        for (s, scene) in case.scenes.iter().enumerate() {
            for &(q, gi) in &asg[l * b + s] {
                let gt = scene.objects[gi].as_box();
                if (0..4).any(|j| (boxes[(s * case.nq + q) * 4 + j] - f64::from(gt[j])).abs() < 1e-2) {
                    return None;
                }
            }
        }
    }

    let mut g = Graph::new();
    let ids: Vec<NodeId> = case.inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let refs = ids[2 * case.layers];
    let mut layers = Vec::new();
    for l in 0..case.layers {
        let scores = g.sigmoid(ids[2 * l]);
        let boxes = g.box_decode(ids[2 * l + 1], refs).unwrap();
        layers.push(LayerNodes {
            logits: ids[2 * l],
            scores,
            boxes,
        });
    }
    let scenes: Vec<&Scene> = case.scenes.iter().collect();
    let loss = set_loss_graph(&mut g, &layers, &scenes, case.nq, &cfg).unwrap();
    g.backward(loss.loss).unwrap();

    let mut res = GradCheck {
        worst_excess: 0.0,
        compared: 0,
        failures: Vec::new(),
    };
    for (i, id) in ids.iter().enumerate() {
        let analytic = g.grad(*id).unwrap().to_vec();
        for j in 0..base[i].len() {
            let mut xs = base.clone();
            xs[i][j] += FD_STEP;
            if assignments(&case, &xs, &cfg) != asg {
                return None;
            }
            let up = set_loss_reference(&case, &xs, &asg, &cfg);
            xs[i][j] -= 2.0 * FD_STEP;
            if assignments(&case, &xs, &cfg) != asg {
                return None;
            }
            let down = set_loss_reference(&case, &xs, &asg, &cfg);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = f64::from(analytic[j]);
            res.compared += 1;
            let tol = (FD_REL * a.abs().max(numeric.abs())).max(FD_FLOOR);
            res.worst_excess = res.worst_excess.max((a - numeric).abs() / tol);
            if !close(a, numeric) {
                res.failures.push(format!("set_loss: input {i}[{j}] analytic {a:e} numeric {numeric:e}"));
            }
        }
    }
    Some(res)
}

/// First `count` matching-stable set-loss checks starting at `seed`.
pub fn stable_set_loss_checks(seed: u64, count: usize) -> Vec<GradCheck> {
    let mut out = Vec::new();
    let mut s = seed;
    while out.len() < count {
        if let Some(c) = set_loss_check(s) {
            out.push(c);
        }
        s += 1;
        assert!(s < seed + 50 * count as u64, "too few matching-stable instances");
    }
    out
}
