//! Mean-squared-error training with Adam, linear warm-up and step decay.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::degradation::{make_mask, DegradationSpec, TaskKind, TaskParams};
use crate::error::{Error, Result};
use crate::network::{LpwtNet, ModelConfig};
use crate::scf::Dataset;
use crate::seed;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub warmup_iters: usize,
    pub warmup_start: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub seed: u64,
    pub task: TaskKind,
    pub task_params: TaskParams,
    /// Each epoch walks the training split this many times.
    pub repeat: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 150_000,
            batch: 64,
            base_lr: 1e-3,
            warmup_iters: 5_000,
            warmup_start: 2e-5,
            decay_factor: 0.5,
            decay_interval: 50_000,
            seed: 0,
            task: TaskKind::Region,
            task_params: TaskParams::default(),
            repeat: 10,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.iterations == 0 || self.batch == 0 || self.repeat == 0 || self.decay_interval == 0 {
            return bad("iterations, batch, repeat and decay_interval must be positive");
        }
        if self.warmup_iters > self.iterations {
            return bad("warmup_iters exceeds iterations");
        }
        if !(self.base_lr > 0.0 && self.warmup_start > 0.0 && self.decay_factor > 0.0) {
            return bad("learning rates and decay factor must be positive");
        }
        Ok(())
    }

    pub fn task_spec(&self) -> DegradationSpec {
        self.task_params.spec(self.task, seed::derive(self.seed, "task", 0))
    }
}

/// Linear ramp over the warm-up, then `base · factor^⌊it/interval⌋`.
pub fn lr_at(iteration: usize, cfg: &TrainConfig) -> f64 {
    if iteration < cfg.warmup_iters {
        let t = iteration as f64 / cfg.warmup_iters as f64;
        cfg.warmup_start + (cfg.base_lr - cfg.warmup_start) * t
    } else {
        cfg.base_lr * cfg.decay_factor.powi((iteration / cfg.decay_interval) as i32)
    }
}

/// Per-element mean of squared differences and its gradient w.r.t. `pred`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    pred.check_same_shape(target, "loss")?;
    let n = pred.len() as f64;
    let diff = pred.sub(target);
    let loss = diff.data().iter().map(|v| v.to_f64c().powi(2)).sum::<f64>() / n;
    Ok((loss, diff.scale(T::lit(2.0 / n))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f64, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for i in 0..params.len() {
            let g = grads[i] as f64;
            let m = b1 * self.m[i] as f64 + (1.0 - b1) * g;
            let v = b2 * self.v[i] as f64 + (1.0 - b2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            params[i] -= (lr * (m / c1) / ((v / c2).sqrt() + cfg.eps)) as f32;
        }
    }
}

/// Sample index drawn at stream position `pos` of a shuffled, repeated training split.
pub fn sample_at(pos: usize, train: &[usize], repeat: usize, seed: u64) -> usize {
    let epoch_len = train.len() * repeat;
    let (epoch, within) = (pos / epoch_len, pos % epoch_len);
    let mut order: Vec<usize> = (0..epoch_len).collect();
    order.shuffle(&mut seed::rng(seed, "epoch", epoch as u64));
    train[order[within] % train.len()]
}

/// Batch of sample indices for a 0-based iteration.
pub fn batch_indices(iteration: usize, train: &[usize], cfg: &TrainConfig) -> Vec<usize> {
    let epoch_len = train.len() * cfg.repeat;
    let start = iteration * cfg.batch;
    let mut out = Vec::with_capacity(cfg.batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for pos in start..start + cfg.batch {
        let epoch = pos / epoch_len;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..epoch_len).collect();
            order.shuffle(&mut seed::rng(cfg.seed, "epoch", epoch as u64));
            cached = Some((epoch, order));
        }
        let order = &cached.as_ref().expect("epoch order").1;
        out.push(train[order[pos % epoch_len] % train.len()]);
    }
    out
}

/// Normalized (degraded input, target) pair for a sample under a task.
pub fn training_pair(dataset: &Dataset, index: usize, spec: &DegradationSpec) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let target = dataset.normalized(index)?.data;
    let mask = make_mask(&spec.for_sample(index), target.shape())?;
    Ok((mask.apply(&target)?, target))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// 1-based count of completed optimizer steps.
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct Trainer<'a> {
    pub net: LpwtNet,
    pub params: Vec<f32>,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    pub iteration: usize,
    dataset: &'a Dataset,
    spec: DegradationSpec,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, model: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let m = &dataset.manifest;
        let model = ModelConfig { channels: m.n, ..model };
        model.check_input(m.sigma, m.sigma, m.n)?;
        if m.train_indices.is_empty() {
            return Err(Error::Config("dataset has an empty training split".into()));
        }
        let net = LpwtNet::new(model)?;
        let params = net.init_params(seed::derive(cfg.seed, "model", 0));
        let adam = AdamState::new(params.len());
        let spec = cfg.task_spec();
        Ok(Trainer { net, params, adam, cfg, iteration: 0, dataset, spec })
    }

    pub fn resume(dataset: &'a Dataset, ck: Checkpoint) -> Result<Self> {
        let net = ck.network()?;
        let m = &dataset.manifest;
        net.cfg.check_input(m.sigma, m.sigma, m.n)?;
        if ck.norm != m.norm_stats()? {
            return Err(Error::Config("checkpoint normalization differs from the dataset".into()));
        }
        let spec = ck.train.task_spec();
        Ok(Trainer { net, params: ck.params, adam: ck.adam, cfg: ck.train, iteration: ck.iteration, dataset, spec })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            model: self.net.cfg,
            train: self.cfg.clone(),
            iteration: self.iteration,
            norm: self.dataset.manifest.norm_stats()?,
            params: self.params.clone(),
            adam: self.adam.clone(),
        })
    }

    /// Mean loss and parameter gradient over one batch.
    pub fn batch_gradient(&self, indices: &[usize]) -> Result<(f64, Vec<f32>)> {
        let n = self.params.len();
        let scale = 1.0 / indices.len() as f32;
        let per_sample = |&idx: &usize| -> Result<(f64, Vec<f32>)> {
            let (x, target) = training_pair(self.dataset, idx, &self.spec)?;
            let (y, cache) = self.net.forward(&self.params, &x)?;
            let (loss, gy) = mse_loss(&y, &target)?;
            let mut g = vec![0.0f32; n];
            self.net.backward(&self.params, &cache, &gy.scale(scale), &mut g)?;
            Ok((loss, g))
        };
        let parts: Vec<(f64, Vec<f32>)> = indices.par_iter().map(per_sample).collect::<Result<_>>()?;
        let mut grad = vec![0.0f32; n];
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        Ok((loss / indices.len() as f64, grad))
    }

    pub fn step(&mut self) -> Result<LossRecord> {
        let batch = batch_indices(self.iteration, &self.dataset.manifest.train_indices, &self.cfg);
        let (loss, grad) = self.batch_gradient(&batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { iteration: self.iteration + 1, loss });
        }
        let lr = lr_at(self.iteration, &self.cfg);
        self.adam.update(&mut self.params, &grad, lr, &self.cfg.adam);
        self.iteration += 1;
        Ok(LossRecord { iteration: self.iteration, lr, loss })
    }

    /// Steps until `cfg.iterations`, reporting each record to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        let mut trace = Vec::with_capacity(self.cfg.iterations.saturating_sub(self.iteration));
        while self.iteration < self.cfg.iterations {
            let r = self.step()?;
            on_step(&r);
            trace.push(r);
        }
        Ok(trace)
    }
}

pub fn write_trace_csv(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "iteration,lr,loss").expect("write to memory");
    for r in trace {
        writeln!(out, "{},{:e},{:e}", r.iteration, r.lr, r.loss).expect("write to memory");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
