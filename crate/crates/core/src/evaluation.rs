//! Error metrics, the analytic complexity model, and the test-split harness.
//!
//! Operation counts follow the multiply-accumulate convention: one MAC is one FLOP.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::degradation::{make_mask, TaskKind, TaskParams};
use crate::error::{Error, Result};
use crate::network::{LpwtNet, ModelConfig};
use crate::scf::Dataset;
use crate::seed;
use crate::tensor::{Scalar, Tensor};
use crate::wavelet;

/// Running sums for NMSE/MSE over a set of samples.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorAccumulator {
    pub err_energy: f64,
    pub target_energy: f64,
    pub elements: u64,
    pub ratio_sum: f64,
    pub samples: u64,
}

impl ErrorAccumulator {
    pub fn add<T: Scalar>(&mut self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
        pred.check_same_shape(target, "metric")?;
        let e: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (p.to_f64c() - t.to_f64c()).powi(2)).sum();
        let t: f64 = target.data().iter().map(|v| v.to_f64c().powi(2)).sum();
        self.err_energy += e;
        self.target_energy += t;
        self.elements += pred.len() as u64;
        self.ratio_sum += if t > 0.0 { e / t } else { f64::NAN };
        self.samples += 1;
        Ok(())
    }

    pub fn merge(&mut self, o: &ErrorAccumulator) {
        self.err_energy += o.err_energy;
        self.target_energy += o.target_energy;
        self.elements += o.elements;
        self.ratio_sum += o.ratio_sum;
        self.samples += o.samples;
    }

    /// Ratio of summed error energy to summed target energy.
    pub fn nmse(&self) -> Result<f64> {
        if self.target_energy <= 0.0 {
            return Err(Error::ZeroEnergy);
        }
        Ok(self.err_energy / self.target_energy)
    }

    /// Mean of per-sample energy ratios.
    pub fn nmse_mean_of_ratios(&self) -> Result<f64> {
        if self.samples == 0 || !self.ratio_sum.is_finite() {
            return Err(Error::ZeroEnergy);
        }
        Ok(self.ratio_sum / self.samples as f64)
    }

    pub fn mse(&self) -> f64 {
        if self.elements == 0 {
            0.0
        } else {
            self.err_energy / self.elements as f64
        }
    }
}

pub fn nmse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let mut a = ErrorAccumulator::default();
    a.add(pred, target)?;
    a.nmse()
}

pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let mut a = ErrorAccumulator::default();
    a.add(pred, target)?;
    Ok(a.mse())
}

/// `C·H_out·W_out·k²` with `H_out = (H + 2P − k)/S + 1`.
pub fn flops_dwconv(c: usize, h: usize, w: usize, k: usize, padding: usize, stride: usize) -> Result<u64> {
    let out = |n: usize| -> Result<u64> {
        let span = (n + 2 * padding).checked_sub(k).ok_or_else(|| Error::Config(format!("kernel {k} larger than padded input {n}")))?;
        if stride == 0 || span % stride != 0 {
            return Err(Error::Config(format!("({n} + 2·{padding} − {k}) is not divisible by stride {stride}")));
        }
        Ok((span / stride + 1) as u64)
    };
    Ok(c as u64 * out(h)? * out(w)? * (k * k) as u64)
}

/// (depthwise convolution FLOPs, WT + IWT FLOPs) of an ℓ-level WTConv.
pub fn flops_wtconv(c: usize, h: usize, w: usize, k: usize, levels: usize) -> (u64, u64) {
    wavelet::wtconv_macs(c, h, w, k, levels)
}

/// Side length of the receptive field of an ℓ-level WTConv with k×k kernels.
pub fn receptive_field(k: usize, levels: usize) -> usize {
    (1 << levels) * k
}

pub fn param_count(model: &LpwtNet) -> usize {
    model.param_count()
}

/// Forward FLOPs of the model on an H×W input.
pub fn model_flops(model: &LpwtNet, h: usize, w: usize) -> u64 {
    model.forward_macs(h, w)
}

/// One line of the complexity example table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsLine {
    pub label: String,
    pub flops: u64,
    /// One-decimal figure in millions commonly quoted for this case.
    pub quoted_m: f64,
}

/// The five worked single-channel 256×256 cases: large-kernel depthwise convs
/// versus a 3-level WTConv with 5×5 kernels.
pub fn worked_example() -> Vec<FlopsLine> {
    let dw11 = flops_dwconv(1, 256, 256, 11, 5, 1).expect("valid geometry");
    let dw31 = flops_dwconv(1, 256, 256, 31, 15, 1).expect("valid geometry");
    let (conv, tr) = flops_wtconv(1, 256, 256, 5, 3);
    let line = |label: &str, flops: u64, quoted_m: f64| FlopsLine { label: label.into(), flops, quoted_m };
    vec![
        line("depthwise 11x11", dw11, 7.9),
        line("depthwise 31x31", dw31, 63.0),
        line("WTConv 5x5, 3 levels: convolutions", conv, 3.8),
        line("WTConv 5x5, 3 levels: WT + IWT", tr, 0.7),
        line("WTConv 5x5, 3 levels: total", conv + tr, 4.4),
    ]
}

/// True when `quoted_m` is `count` in millions rounded or truncated to one decimal.
pub fn matches_one_decimal(count: u64, quoted_m: f64) -> bool {
    let tenths = count as f64 / 1e5;
    let q = (quoted_m * 10.0).round();
    q == tenths.round() || q == tenths.floor()
}

pub fn millions(count: u64) -> String {
    format!("{:.2} M", count as f64 / 1e6)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Report metrics in physical units instead of the normalized domain.
    pub denormalized: bool,
    /// Also report the mean of per-sample NMSE ratios.
    pub mean_of_ratios: bool,
    /// Cap on evaluated test samples (0 = whole split).
    pub max_samples: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { denormalized: false, mean_of_ratios: false, max_samples: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: TaskKind,
    pub gamma: i8,
    /// True when the task differs from the one the model was trained on.
    pub zero_shot: bool,
    pub samples: usize,
    pub nmse: f64,
    pub mse: f64,
    pub nmse_mean_of_ratios: Option<f64>,
    pub baseline_nmse: f64,
    pub baseline_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub trained_task: Option<TaskKind>,
    pub params: usize,
    pub flops: u64,
    pub normalized: bool,
    pub tasks: Vec<TaskMetrics>,
}

impl MetricsReport {
    pub fn task(&self, t: TaskKind) -> Option<&TaskMetrics> {
        self.tasks.iter().find(|m| m.task == t)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "params: {}   forward FLOPs: {} ({})", self.params, self.flops, millions(self.flops));
        let _ = writeln!(
            s,
            "{:<11} {:>3} {:>9} {:>8} {:>12} {:>12} {:>14} {:>14}",
            "task", "γ", "zero-shot", "samples", "NMSE", "MSE", "baseline NMSE", "baseline MSE"
        );
        for t in &self.tasks {
            let _ = writeln!(
                s,
                "{:<11} {:>3} {:>9} {:>8} {:>12.4e} {:>12.4e} {:>14.4e} {:>14.4e}",
                t.task.name(),
                t.gamma,
                if t.zero_shot { "yes" } else { "no" },
                t.samples,
                t.nmse,
                t.mse,
                t.baseline_nmse,
                t.baseline_mse
            );
        }
        s
    }
}

/// Evaluates `params` on the test split for each task, alongside the
/// degraded-input-as-prediction baseline.
///
/// Masks come from `seed` through the same per-sample derivation used in training,
/// under a separate stream so test masks differ from training masks.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    net: &LpwtNet,
    params: &[f32],
    dataset: &Dataset,
    tasks: &[TaskKind],
    task_params: &TaskParams,
    trained_task: Option<TaskKind>,
    seed: u64,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let m = &dataset.manifest;
    if m.test_indices.is_empty() {
        return Err(Error::Config("dataset has no test split".into()));
    }
    let stats = m.norm_stats()?;
    let span = (stats.max - stats.min) as f32;
    let mut idx = m.test_indices.clone();
    if opts.max_samples > 0 {
        idx.truncate(opts.max_samples);
    }
    let mut out = Vec::with_capacity(tasks.len());
    for &task in tasks {
        let spec = task_params.spec(task, seed::derive(seed, "eval-task", 0));
        let per_sample = |&i: &usize| -> Result<(ErrorAccumulator, ErrorAccumulator)> {
            let target = dataset.normalized(i)?.data;
            let mask = make_mask(&spec.for_sample(i), target.shape())?;
            let observed = mask.apply(&target)?;
            let pred = net.infer(params, &observed)?;
            let (mut model_acc, mut base_acc) = (ErrorAccumulator::default(), ErrorAccumulator::default());
            if opts.denormalized {
                let d = |t: &Tensor<f32>| t.map(|v| v * span + stats.min as f32);
                let tgt = d(&target);
                model_acc.add(&d(&pred), &tgt)?;
                base_acc.add(&d(&observed), &tgt)?;
            } else {
                model_acc.add(&pred, &target)?;
                base_acc.add(&observed, &target)?;
            }
            Ok((model_acc, base_acc))
        };
        let parts: Vec<_> = idx.par_iter().map(per_sample).collect::<Result<_>>()?;
        let (mut acc, mut base) = (ErrorAccumulator::default(), ErrorAccumulator::default());
        for (a, b) in &parts {
            acc.merge(a);
            base.merge(b);
        }
        out.push(TaskMetrics {
            task,
            gamma: task.gamma(),
            zero_shot: trained_task.is_some_and(|t| t != task),
            samples: idx.len(),
            nmse: acc.nmse()?,
            mse: acc.mse(),
            nmse_mean_of_ratios: if opts.mean_of_ratios { Some(acc.nmse_mean_of_ratios()?) } else { None },
            baseline_nmse: base.nmse()?,
            baseline_mse: base.mse(),
        });
    }
    Ok(MetricsReport {
        trained_task,
        params: net.param_count(),
        flops: net.forward_macs(m.sigma, m.sigma),
        normalized: !opts.denormalized,
        tasks: out,
    })
}

/// Parameter and FLOP totals for a model configuration at σ×σ.
pub fn complexity(cfg: ModelConfig, sigma: usize) -> Result<(usize, u64)> {
    let net = LpwtNet::new(cfg)?;
    cfg.check_input(sigma, sigma, cfg.channels)?;
    Ok((net.param_count(), net.forward_macs(sigma, sigma)))
}
