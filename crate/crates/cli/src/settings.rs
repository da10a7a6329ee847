//! Flat run configuration. Layers, lowest first: preset defaults, `--config` file,
//! `--set key=value` overrides, dedicated flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use lpwtnet::degradation::{TaskKind, TaskParams};
use lpwtnet::evaluation::EvalOptions;
use lpwtnet::network::{BlockKind, ModelConfig};
use lpwtnet::scf::DatasetConfig;
use lpwtnet::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Settings {
    /// `full` (published setup) or `smoke` (desk-scale run).
    pub preset: String,
    pub seed: u64,
    pub task: String,

    pub area_size: f64,
    pub sigma: usize,
    pub ny: usize,
    pub nz: usize,
    pub spacing: f64,
    pub slots: usize,
    pub samples: usize,
    pub train_fraction: f64,

    pub pm: f64,
    pub region_size: usize,
    pub stride: usize,
    pub channel_shared: bool,

    pub levels_lp: usize,
    pub levels_wt: usize,
    pub kernel: usize,
    pub n1: usize,
    pub n2: usize,
    pub c_low: usize,
    pub c_mask: usize,
    pub block: BlockKind,
    pub per_subband_scales: bool,
    pub wt_init_noise: f64,

    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_iters: usize,
    pub warmup_lr: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub repeat: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,

    pub eval_samples: usize,
    pub denormalized_metrics: bool,
    pub mean_of_ratios: bool,
    pub zero_shot: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Settings::preset("full").expect("known preset")
    }
}

impl Settings {
    pub fn preset(name: &str) -> Result<Self> {
        let d = DatasetConfig::default();
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let full = Settings {
            preset: "full".into(),
            seed: 0,
            task: t.task.name().into(),
            area_size: d.area_size,
            sigma: d.sigma,
            ny: d.n_y,
            nz: d.n_z,
            spacing: d.spacing_wavelengths,
            slots: d.slots,
            samples: d.samples,
            train_fraction: d.train_fraction,
            pm: t.task_params.p_m,
            region_size: t.task_params.region_size,
            stride: t.task_params.stride,
            channel_shared: t.task_params.channel_shared,
            levels_lp: m.levels_lp,
            levels_wt: m.levels_wt,
            kernel: m.kernel,
            n1: m.n1,
            n2: m.n2,
            c_low: m.c_low,
            c_mask: m.c_mask,
            block: m.block,
            per_subband_scales: m.per_subband_scales,
            wt_init_noise: m.wt_init_noise,
            iters: t.iterations,
            batch: t.batch,
            lr: t.base_lr,
            warmup_iters: t.warmup_iters,
            warmup_lr: t.warmup_start,
            decay_factor: t.decay_factor,
            decay_interval: t.decay_interval,
            repeat: t.repeat,
            checkpoint_every: 10_000,
            log_every: 100,
            eval_samples: 0,
            denormalized_metrics: false,
            mean_of_ratios: false,
            zero_shot: false,
        };
        match name {
            "full" => Ok(full),
            "smoke" => Ok(Settings {
                preset: "smoke".into(),
                area_size: 16.0,
                sigma: 16,
                ny: 4,
                nz: 4,
                samples: 200,
                levels_lp: 2,
                n1: 2,
                n2: 1,
                c_low: 32,
                c_mask: 32,
                iters: 2000,
                batch: 16,
                warmup_iters: 100,
                decay_interval: 1000,
                checkpoint_every: 500,
                ..full
            }),
            other => bail!("unknown preset '{other}' (full|smoke)"),
        }
    }

    /// Resolves the layers into one validated configuration.
    pub fn resolve(file: Option<&Path>, sets: &[String], flags: Table) -> Result<Self> {
        let mut merged = Table::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let table: Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            merged.extend(table);
        }
        for kv in sets {
            let (k, v) = parse_set(kv)?;
            merged.insert(k, v);
        }
        merged.extend(flags);

        let preset = match merged.get("preset") {
            Some(Value::String(s)) => s.clone(),
            Some(other) => bail!("preset must be a string, got {other}"),
            None => "full".into(),
        };
        let mut table = Table::try_from(Settings::preset(&preset)?).context("serializing defaults")?;
        table.extend(merged);
        let settings: Settings = Value::Table(table).try_into().context("invalid configuration")?;
        settings.validate()?;
        Ok(settings)
    }

    pub fn validate(&self) -> Result<()> {
        self.tasks()?;
        self.dataset().validate()?;
        self.model().validate()?;
        Ok(())
    }

    /// `task = "all"` expands to all three tasks.
    pub fn tasks(&self) -> Result<Vec<TaskKind>> {
        if self.task == "all" {
            return Ok(TaskKind::ALL.to_vec());
        }
        Ok(vec![self.task.parse()?])
    }

    pub fn single_task(&self) -> Result<TaskKind> {
        match self.tasks()?.as_slice() {
            [t] => Ok(*t),
            _ => bail!("this subcommand needs a single task, not '{}'", self.task),
        }
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            area_size: self.area_size,
            sigma: self.sigma,
            n_y: self.ny,
            n_z: self.nz,
            spacing_wavelengths: self.spacing,
            slots: self.slots,
            samples: self.samples,
            seed: self.seed,
            train_fraction: self.train_fraction,
            ..Default::default()
        }
    }

    pub fn task_params(&self) -> TaskParams {
        TaskParams { p_m: self.pm, region_size: self.region_size, stride: self.stride, channel_shared: self.channel_shared }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            levels_lp: self.levels_lp,
            levels_wt: self.levels_wt,
            kernel: self.kernel,
            n1: self.n1,
            n2: self.n2,
            channels: self.ny * self.nz,
            c_low: self.c_low,
            c_mask: self.c_mask,
            block: self.block,
            per_subband_scales: self.per_subband_scales,
            wt_init_noise: self.wt_init_noise,
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            iterations: self.iters,
            batch: self.batch,
            base_lr: self.lr,
            warmup_iters: self.warmup_iters,
            warmup_start: self.warmup_lr,
            decay_factor: self.decay_factor,
            decay_interval: self.decay_interval,
            seed: self.seed,
            task: self.single_task()?,
            task_params: self.task_params(),
            repeat: self.repeat,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions { denormalized: self.denormalized_metrics, mean_of_ratios: self.mean_of_ratios, max_samples: self.eval_samples }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialize")
    }
}

/// `key=value` with the value read as a TOML literal, falling back to a bare string.
fn parse_set(kv: &str) -> Result<(String, Value)> {
    let (k, v) = kv.split_once('=').with_context(|| format!("override '{kv}' is not key=value"))?;
    let k = k.trim().replace('-', "_");
    let v = v.trim();
    let value = toml::from_str::<Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.to_string()));
    Ok((k, value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flags_then_sets_then_file_then_preset() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        std::fs::write(&file, "preset = \"smoke\"\nbatch = 8\niters = 50\nseed = 4\n").unwrap();
        let mut flags = Table::new();
        flags.insert("seed".into(), Value::Integer(9));
        let s = Settings::resolve(Some(&file), &["iters=70".into(), "seed=5".into()], flags).unwrap();
        assert_eq!((s.sigma, s.batch, s.iters, s.seed), (16, 8, 70, 9));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(Settings::resolve(None, &["bogus=1".into()], Table::new()).is_err());
        assert!(Settings::resolve(None, &["task=sideways".into()], Table::new()).is_err());
        assert!(Settings::resolve(None, &["kernel=4".into()], Table::new()).is_err());
        assert!(Settings::resolve(None, &["preset=huge".into()], Table::new()).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let s = Settings::resolve(None, &["preset=smoke".into(), "block=plain-conv".into(), "task=all".into()], Table::new()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("snap.toml");
        std::fs::write(&file, s.to_toml()).unwrap();
        assert_eq!(Settings::resolve(Some(&file), &[], Table::new()).unwrap(), s);
    }
}
