use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use lpwtnet::checkpoint::{Checkpoint, META_FILE};
use lpwtnet::degradation::{degrade as apply_degradation, DegradationSpec, TaskKind};
use lpwtnet::evaluation::{complexity, evaluate, matches_one_decimal, millions, receptive_field, worked_example};
use lpwtnet::network::{BlockKind, LpwtNet, ModelConfig};
use lpwtnet::scf::{generate_dataset, write_record, Dataset};
use lpwtnet::seed;
use lpwtnet::training::{write_trace_csv, LossRecord, TrainConfig, Trainer};

use crate::plot;
use crate::settings::Settings;

pub const CONFIG_SNAPSHOT: &str = "config.toml";
const CHECKPOINT_DIR: &str = "checkpoint";
const LOSS_FILE: &str = "loss.csv";

pub fn partial(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

/// Writes `<path>.partial` and renames it over `path`.
fn write_atomic(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    let tmp = partial(path);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming {}", tmp.display()))
}

fn open_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::open(dir).with_context(|| format!("opening dataset {}", dir.display()))
}

fn ensure_absent(path: &Path) -> Result<()> {
    if path.exists() {
        bail!("{} already exists", path.display());
    }
    Ok(())
}

pub fn gen(s: &Settings, out: &Path) -> Result<()> {
    let cfg = s.dataset();
    let manifest = generate_dataset(&cfg, out)?;
    write_atomic(&out.join(CONFIG_SNAPSHOT), s.to_toml())?;
    println!(
        "wrote {} samples of {}x{}x{} to {} (train {}, test {})",
        manifest.sample_count,
        manifest.sigma,
        manifest.sigma,
        manifest.n,
        out.display(),
        manifest.train_indices.len(),
        manifest.test_indices.len()
    );
    Ok(())
}

/// The per-sample masks the trainer would draw for `task` under this seed.
fn training_spec(s: &Settings, task: TaskKind) -> DegradationSpec {
    TrainConfig { task, task_params: s.task_params(), seed: s.seed, ..Default::default() }.task_spec()
}

#[derive(Serialize)]
struct DegradeIndex {
    dataset: PathBuf,
    sigma: usize,
    n: usize,
    normalized: bool,
    indices: Vec<usize>,
    tasks: Vec<DegradedTask>,
}

#[derive(Serialize)]
struct DegradedTask {
    task: TaskKind,
    gamma: i8,
    spec: DegradationSpec,
    zeros_per_sample: Vec<usize>,
}

pub fn degrade(s: &Settings, data: &Path, out: &Path, count: usize) -> Result<()> {
    ensure_absent(out)?;
    let ds = open_dataset(data)?;
    let indices: Vec<usize> = ds.manifest.test_indices.iter().copied().take(count).collect();
    let staging = partial(out);
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    let mut tasks = Vec::new();
    for task in s.tasks()? {
        let spec = training_spec(s, task);
        spec.validate(ds.manifest.sigma, ds.manifest.sigma)?;
        let tdir = staging.join(task.name());
        fs::create_dir_all(&tdir)?;
        let mut observed = BufWriter::new(fs::File::create(tdir.join("observed.bin"))?);
        let mut masks = BufWriter::new(fs::File::create(tdir.join("masks.bin"))?);
        let mut zeros = Vec::with_capacity(indices.len());
        for &i in &indices {
            let (y, mask) = apply_degradation(&ds.normalized(i)?, &spec.for_sample(i))?;
            write_record(&mut observed, &y.data)?;
            write_record(&mut masks, &mask.data)?;
            zeros.push(mask.zeros_count());
        }
        drop((observed, masks));
        tasks.push(DegradedTask { task, gamma: task.gamma(), spec, zeros_per_sample: zeros });
    }
    let index = DegradeIndex {
        dataset: data.to_path_buf(),
        sigma: ds.manifest.sigma,
        n: ds.manifest.n,
        normalized: true,
        indices,
        tasks,
    };
    fs::write(staging.join("degraded.json"), serde_json::to_string_pretty(&index)? + "\n")?;
    fs::write(staging.join(CONFIG_SNAPSHOT), s.to_toml())?;
    fs::rename(&staging, out)?;
    println!("wrote {} degraded samples per task to {}", index.indices.len(), out.display());
    Ok(())
}

fn read_trace(path: &Path, upto: usize) -> Result<Vec<LossRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            bail!("{}: malformed line '{line}'", path.display());
        }
        let r = LossRecord { iteration: f[0].parse()?, lr: f[1].parse()?, loss: f[2].parse()? };
        if r.iteration <= upto {
            out.push(r);
        }
    }
    Ok(out)
}

fn save_progress(trainer: &Trainer, dir: &Path, trace: &[LossRecord]) -> Result<()> {
    trainer.checkpoint()?.save(&dir.join(CHECKPOINT_DIR))?;
    let tmp = partial(&dir.join(LOSS_FILE));
    write_trace_csv(&tmp, trace)?;
    fs::rename(&tmp, dir.join(LOSS_FILE))?;
    Ok(())
}

pub fn train(s: &Settings, data: &Path, out: &Path, resume: bool) -> Result<()> {
    let ds = open_dataset(data)?;
    let staging = partial(out);
    let (mut trainer, mut trace) = if resume {
        // A finished run can be extended; it moves back to staging while it trains.
        if !staging.exists() && out.exists() {
            fs::rename(out, &staging)?;
        }
        let ck = Checkpoint::load(&staging.join(CHECKPOINT_DIR)).context("no checkpoint to resume from")?;
        let done = ck.iteration;
        let mut trainer = Trainer::resume(&ds, ck)?;
        trainer.cfg.iterations = s.iters;
        trainer.cfg.validate()?;
        eprintln!("resuming at iteration {done}");
        (trainer, read_trace(&staging.join(LOSS_FILE), done)?)
    } else {
        ensure_absent(out)?;
        if staging.exists() {
            bail!("{} holds an unfinished run; pass --resume or remove it", staging.display());
        }
        fs::create_dir_all(&staging)?;
        (Trainer::new(&ds, s.model(), s.train()?)?, Vec::new())
    };
    fs::write(staging.join(CONFIG_SNAPSHOT), s.to_toml())?;
    eprintln!("model: {} parameters, {} forward FLOPs", trainer.net.param_count(), millions(trainer.net.forward_macs(ds.manifest.sigma, ds.manifest.sigma)));

    while trainer.iteration < trainer.cfg.iterations {
        let r = trainer.step()?;
        trace.push(r);
        if s.log_every > 0 && r.iteration % s.log_every == 0 {
            eprintln!("iter {:>7}  lr {:.3e}  loss {:.5e}", r.iteration, r.lr, r.loss);
        }
        if s.checkpoint_every > 0 && r.iteration % s.checkpoint_every == 0 {
            save_progress(&trainer, &staging, &trace)?;
        }
    }
    save_progress(&trainer, &staging, &trace)?;
    if out.exists() {
        fs::remove_dir_all(out)?;
    }
    fs::rename(&staging, out)?;
    println!("trained {} iterations; run written to {}", trainer.iteration, out.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let dir = if path.join(META_FILE).exists() { path.to_path_buf() } else { path.join(CHECKPOINT_DIR) };
    Checkpoint::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

pub fn eval(s: &Settings, data: &Path, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let ds = open_dataset(data)?;
    let (net, params, trained) = match checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.norm != ds.manifest.norm_stats()? {
                bail!("checkpoint was trained with different normalization statistics than {}", data.display());
            }
            (ck.network()?, ck.params, Some(ck.train.task))
        }
        None => {
            let cfg = ModelConfig { channels: ds.manifest.n, ..s.model() };
            let net = LpwtNet::new(cfg)?;
            let params = net.init_params(seed::derive(s.seed, "model", 0));
            (net, params, None)
        }
    };
    let tasks = if s.zero_shot { TaskKind::ALL.to_vec() } else { s.tasks()? };
    let report = evaluate(&net, &params, &ds, &tasks, &s.task_params(), trained, s.seed, &s.eval_options())?;
    print!("{}", report.table());
    if let Some(out) = out {
        write_atomic(out, serde_json::to_string_pretty(&report)? + "\n")?;
        write_atomic(&out.with_extension("config.toml"), s.to_toml())?;
    }
    Ok(())
}

pub fn flops_example() -> Result<()> {
    println!("{:<38} {:>12} {:>10} {:>8}", "case (1 channel, 256x256)", "FLOPs", "millions", "quoted");
    for line in worked_example() {
        let ok = if matches_one_decimal(line.flops, line.quoted_m) { "" } else { "  (mismatch)" };
        println!("{:<38} {:>12} {:>10} {:>6.1} M{ok}", line.label, line.flops, millions(line.flops), line.quoted_m);
    }
    Ok(())
}

pub fn flops_model(s: &Settings) -> Result<()> {
    let base = s.model();
    println!("input {0}x{0}x{1}, L={2}, l={3}, k={4}, n1={5}, n2={6}", s.sigma, base.channels, base.levels_lp, base.levels_wt, base.kernel, base.n1, base.n2);
    println!("WTConv receptive field: {0}x{0}", receptive_field(base.kernel, base.levels_wt));
    println!("{:<12} {:>12} {:>16}", "block", "params", "forward FLOPs");
    for block in [BlockKind::Dswt, BlockKind::PlainConv] {
        let (params, flops) = complexity(ModelConfig { block, ..base }, s.sigma)?;
        let name = match block {
            BlockKind::Dswt => "dswt",
            BlockKind::PlainConv => "plain-conv",
        };
        println!("{name:<12} {params:>12} {flops:>16} ({})", millions(flops));
    }
    Ok(())
}

pub fn plot_slice(s: &Settings, data: &Path, index: usize, channel: usize, degraded: bool, out: &Path) -> Result<()> {
    let ds = open_dataset(data)?;
    if channel >= ds.manifest.n {
        bail!("channel {channel} out of range ({} channels)", ds.manifest.n);
    }
    let target = ds.normalized(index)?;
    let mut panels = vec![target.data.channel(channel)];
    if degraded {
        let task = s.single_task()?;
        let (y, _) = apply_degradation(&target, &training_spec(s, task).for_sample(index))?;
        panels.push(y.data.channel(channel));
    }
    let img = plot::heatmaps(&panels);
    plot::save_png(&img, out)
}

pub fn plot_loss(csv: &Path, out: &Path) -> Result<()> {
    let trace = read_trace(csv, usize::MAX)?;
    if trace.is_empty() {
        bail!("{} holds no loss records", csv.display());
    }
    let img = plot::loss_curve(&trace);
    plot::save_png(&img, out)
}
