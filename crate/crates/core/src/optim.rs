//! AdamW, the learning-rate schedule and the shared training step.

use crate::attention::SelfAttention;
use crate::detector::{Detector, Prediction, Scene};
use crate::error::{Error, Result};
use crate::matching::{set_loss_graph, LossConfig};
use crate::rng::{self, Stream};
use rand::seq::SliceRandom;

/// Name of the parameter holding the reference points; it is the first
/// parameter in visitation order and the only one that loses rows on pruning.
pub const REF_POINTS: &str = "bank.ref_points";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch_size: 8,
            lr: 2e-3,
            weight_decay: 1e-2,
            warmup: 50,
            grad_clip: Some(1.0),
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        if self.warmup >= self.iterations {
            return Err(Error::config("warmup", "must be below iterations"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("grad_clip", "must be positive"));
        }
        Ok(())
    }

    /// The same run at half the learning rate, as used for fine-tuning.
    pub fn halved(self) -> Self {
        TrainConfig { lr: self.lr * 0.5, ..self }
    }

    /// Linear warmup followed by cosine decay; `t` counts from 1.
    pub fn lr_at(&self, t: usize) -> f64 {
        if t <= self.warmup {
            return self.lr * t as f64 / self.warmup as f64;
        }
        let span = (self.iterations - self.warmup).max(1) as f64;
        let progress = ((t - 1 - self.warmup) as f64 / span).min(1.0);
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Decoupled-weight-decay Adam. Moments are kept per parameter tensor in
/// [`Detector::visit`] order.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` belongs to the i-th visited tensor.
    pub fn step(&mut self, model: &mut Detector, grads: &[Vec<f32>], lr: f64) -> Result<()> {
        if self.m.is_empty() {
            model.visit(&mut |_, t| {
                self.m.push(vec![0.0; t.len()]);
                self.v.push(vec![0.0; t.len()]);
            });
        }
        if grads.len() != self.m.len() {
            return Err(Error::shape("adamw", format!("{} grads for {} tensors", grads.len(), self.m.len())));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let mut i = 0;
        let mut err = None;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut(&mut |name, t| {
            let g = &grads[i];
            if g.len() != t.len() || ms[i].len() != t.len() {
                err.get_or_insert(Error::shape("adamw", format!("{name}: gradient length {}", g.len())));
                i += 1;
                return;
            }
            let decay = if t.shape().len() == 2 && name != REF_POINTS { wd } else { 0.0 };
            let (m, v) = (&mut ms[i], &mut vs[i]);
            for (((p, &gj), mj), vj) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gj = f64::from(gj);
                let m1 = b1 * f64::from(*mj) + (1.0 - b1) * gj;
                let v1 = b2 * f64::from(*vj) + (1.0 - b2) * gj * gj;
                *mj = m1 as f32;
                *vj = v1 as f32;
                let update = (m1 / bc1) / ((v1 / bc2).sqrt() + eps) + decay * f64::from(*p);
                *p = (f64::from(*p) - lr * update) as f32;
            }
            i += 1;
        });
        err.map_or(Ok(()), Err)
    }

    /// Drops the moment rows of pruned reference points.
    pub fn remove_ref_rows(&mut self, positions: &[usize]) {
        if self.m.is_empty() {
            return;
        }
        for buf in [&mut self.m[0], &mut self.v[0]] {
            let kept: Vec<f32> = buf
                .chunks(2)
                .enumerate()
                .filter(|(r, _)| !positions.contains(r))
                .flat_map(|(_, c)| c.iter().copied())
                .collect();
            *buf = kept;
        }
    }
}

/// Endless shuffled pass over dataset indices, one permutation per epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    seed: u64,
    len: usize,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let mut s = BatchSampler {
            seed,
            len,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut rng::item(self.seed, Stream::Shuffle, self.epoch));
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.len {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    /// Final-layer prediction of each scene in the batch.
    pub final_predictions: Vec<Prediction>,
    /// Final-layer matched cost per query for each scene.
    pub final_costs: Vec<Vec<Option<f64>>>,
}

/// Optimizer state plus the batch stream of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: AdamW,
    sampler: BatchSampler,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset_len: usize) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            config,
            optimizer: AdamW::new(config.weight_decay),
            sampler: BatchSampler::new(config.seed, dataset_len)?,
        })
    }

    /// Forward, set loss over all layers, backward and one AdamW update at
    /// iteration `t` (from 1).
    pub fn step(&mut self, model: &mut Detector, dataset: &[Scene], t: usize) -> Result<StepOutput> {
        let idx = self.sampler.next_batch(self.config.batch_size);
        let batch: Vec<&Scene> = idx.iter().map(|&i| &dataset[i]).collect();
        let mut fg = model.forward_graph(&batch, true, SelfAttention::Enabled)?;
        let layers = fg.layers.clone();
        let gl = set_loss_graph(&mut fg.graph, &layers, &batch, fg.num_queries, &self.config.loss)?;
        fg.graph.backward(gl.loss)?;
        let mut grads: Vec<Vec<f32>> = fg
            .params
            .iter()
            .map(|&id| fg.graph.grad(id).map_or_else(|| vec![0.0; fg.graph.value(id).len()], <[f32]>::to_vec))
            .collect();
        if let Some(clip) = self.config.grad_clip {
            clip_global_norm(&mut grads, clip);
        }
        self.optimizer.step(model, &grads, self.config.lr_at(t))?;
        model.bank.clamp_points();
        let loss = f64::from(fg.graph.value(gl.loss).data()[0]);
        if !loss.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite loss at iteration {t}")));
        }
        let final_predictions = (0..batch.len())
            .map(|b| fg.predictions_at(fg.layers.len() - 1, b))
            .collect();
        Ok(StepOutput {
            loss,
            final_predictions,
            final_costs: gl.final_costs,
        })
    }
}

/// Scales all gradients so that their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|&g| f64::from(g) * f64::from(g))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Trains `model` on `dataset` for `config.iterations` steps and returns
/// the per-iteration losses.
pub fn train(model: &mut Detector, dataset: &[Scene], config: TrainConfig) -> Result<Vec<f64>> {
    let mut trainer = Trainer::new(config, dataset.len())?;
    let mut losses = Vec::with_capacity(config.iterations);
    for t in 1..=config.iterations {
        losses.push(trainer.step(model, dataset, t)?.loss);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{generate_dataset, ModelConfig, SceneConfig};

    #[test]
    fn cosine_schedule_shape() {
        let cfg = TrainConfig {
            iterations: 100,
            warmup: 10,
            lr: 1.0,
            ..TrainConfig::default()
        };
        assert!((cfg.lr_at(5) - 0.5).abs() < 1e-12);
        assert!((cfg.lr_at(11) - 1.0).abs() < 1e-12);
        assert!(cfg.lr_at(60) < cfg.lr_at(30));
        assert!(cfg.lr_at(100) < 1e-3);
        assert_eq!(cfg.halved().lr, 0.5);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(3, 10).unwrap();
        let mut first: Vec<usize> = s.next_batch(10);
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        let a = BatchSampler::new(3, 10).unwrap().next_batch(25);
        let b = BatchSampler::new(3, 10).unwrap().next_batch(25);
        assert_eq!(a, b);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![vec![3.0f32], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-6 && (g[1][0] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn training_reduces_loss() {
        let config = ModelConfig {
            num_queries: 8,
            grid: 4,
            embed_dim: 16,
            heads: 2,
            ffn_dim: 32,
            layers: 2,
            num_classes: 3,
            frequencies: 4,
        };
        let scenes = generate_dataset(
            1,
            4,
            &SceneConfig {
                num_classes: 3,
                max_objects: 3,
                ..SceneConfig::default()
            },
        )
        .unwrap();
        let mut model = Detector::new(config, 2).unwrap();
        let losses = train(
            &mut model,
            &scenes,
            TrainConfig {
                iterations: 120,
                batch_size: 4,
                warmup: 5,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[115..].iter().sum::<f64>() / 5.0;
        assert!(tail < 0.7 * head, "{head} -> {tail}");
        assert!(model.bank.ref_points.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn removing_ref_rows_keeps_other_moments() {
        let mut opt = AdamW::new(0.0);
        opt.m = vec![vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]];
        opt.v = opt.m.clone();
        opt.remove_ref_rows(&[1]);
        assert_eq!(opt.m[0], vec![1.0, 2.0, 5.0, 6.0]);
    }
}
