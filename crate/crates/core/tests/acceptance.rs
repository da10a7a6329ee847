//! Acceptance suite. Runs every criterion in order, prints one line per check and
//! exits nonzero if an enforced check fails.

use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lpwtnet::channel::{
    build_angle_grid, cscm_from_pas, extract_cpas, sample_channels, sample_covariance, steering_basis, ArrayGeometry,
    BasisMode, PowerAngularSpectrum,
};
use lpwtnet::degradation::{make_mask, TaskKind, TaskParams};
use lpwtnet::evaluation::{evaluate, flops_dwconv, flops_wtconv, matches_one_decimal, EvalOptions, MetricsReport};
use lpwtnet::network::{BlockKind, LpwtNet, ModelConfig};
use lpwtnet::nn::ParamLayout;
use lpwtnet::pyramid::{lp_decompose, lp_reconstruct};
use lpwtnet::scf::{generate_dataset, Dataset, DatasetConfig};
use lpwtnet::tensor::Tensor;
use lpwtnet::training::{mse_loss, LossRecord, TrainConfig, Trainer};
use lpwtnet::wavelet::{iwt_stacked, wt_stacked, FilterBank, WtConv, WtConvConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

#[derive(Default)]
struct Suite {
    enforced_failures: Vec<String>,
}

impl Suite {
    fn line(&mut self, id: &str, name: &str, enforced: bool, secs: f64, o: Outcome) {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let note = if enforced { "" } else { " [reported only]" };
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "criterion {id:<3} {tag}  {name}: {} ({secs:.1}s){note}", o.detail);
        if enforced && !o.pass {
            self.enforced_failures.push(id.to_string());
        }
    }

    fn run(&mut self, id: &str, name: &str, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let o = f();
        self.line(id, name, true, t.elapsed().as_secs_f64(), o);
    }
}

fn random_tensor<T: lpwtnet::tensor::Scalar>(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::random_uniform(h, w, c, -1.0, 1.0, rng)
}

fn wavelet_round_trip() -> Outcome {
    let bank = FilterBank::haar();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let h = 2 * rng.random_range(1..=32);
        let w = 2 * rng.random_range(1..=32);
        let c = rng.random_range(1..=64);
        let x: Tensor<f64> = random_tensor(h, w, c, &mut rng);
        let back = iwt_stacked(&wt_stacked(&x, &bank).unwrap(), &bank).unwrap();
        worst64 = worst64.max(back.max_abs_diff(&x));
        let x32 = x.cast::<f32>();
        let back32 = iwt_stacked(&wt_stacked(&x32, &bank).unwrap(), &bank).unwrap();
        worst32 = worst32.max(back32.max_abs_diff(&x32) as f64);
    }
    Outcome::new(
        worst32 <= 1e-5 && worst64 <= 1e-12,
        format!("max err f32 {worst32:.2e} (<= 1e-5), f64 {worst64:.2e} (<= 1e-12) over 100 tensors"),
    )
}

fn pyramid_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f32;
    let mut worst_const = 0.0f32;
    for levels in 1..=3 {
        let x: Tensor<f32> = random_tensor(32, 32, 64, &mut rng);
        let d = lp_decompose(&x, levels).unwrap();
        worst = worst.max(lp_reconstruct(&d).unwrap().max_abs_diff(&x));
        let k = Tensor::<f32>::filled(32, 32, 64, 0.37);
        let dc = lp_decompose(&k, levels).unwrap();
        for r in &dc.residuals {
            worst_const = worst_const.max(r.max_abs());
        }
    }
    Outcome::new(
        worst <= 1e-5 && worst_const <= 1e-6,
        format!("round-trip err {worst:.2e} (<= 1e-5), constant-input residual {worst_const:.2e} (<= 1e-6), L=1..3"),
    )
}

fn complexity_example() -> Outcome {
    let (conv, tr) = flops_wtconv(1, 256, 256, 5, 3);
    let got = [
        flops_dwconv(1, 256, 256, 11, 5, 1).unwrap(),
        flops_dwconv(1, 256, 256, 31, 15, 1).unwrap(),
        conv,
        tr,
        conv + tr,
    ];
    let want = [7_929_856u64, 62_980_096, 3_788_800, 688_128, 4_476_928];
    let quoted = [7.9, 63.0, 3.8, 0.7, 4.4];
    let exact = got == want;
    let figures = got.iter().zip(quoted).all(|(&n, q)| matches_one_decimal(n, q));
    Outcome::new(exact && figures, format!("counts {got:?}, quoted 7.9/63.0/3.8/0.7/4.4 M"))
}

/// Bounding box and count of the nonzero input-gradient entries for one output tap.
fn gradient_support(k: usize, levels: usize) -> (usize, usize, usize) {
    let size = 96;
    let mut layout = ParamLayout::default();
    let op = WtConv::new(&mut layout, "rf", WtConvConfig { channels: 1, kernel: k, levels, per_subband_scales: false });
    let mut p = vec![0.0f64; layout.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for v in p.iter_mut() {
        *v = rng.random_range(0.5..1.5);
    }
    let x: Tensor<f64> = random_tensor(size, size, 1, &mut rng);
    let (_, cache) = op.forward(&p, &x).unwrap();
    let mut gy = Tensor::<f64>::zeros(size, size, 1);
    *gy.at_mut(45, 50, 0) = 1.0;
    let mut g = vec![0.0; p.len()];
    let gx = op.backward(&p, &cache, &gy, &mut g).unwrap();
    let (mut y0, mut y1, mut x0, mut x1, mut count) = (usize::MAX, 0, usize::MAX, 0, 0);
    for y in 0..size {
        for xx in 0..size {
            if gx.at(y, xx, 0) != 0.0 {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(xx);
                x1 = x1.max(xx);
                count += 1;
            }
        }
    }
    (y1 + 1 - y0, x1 + 1 - x0, count)
}

fn receptive_field() -> Outcome {
    let a = gradient_support(5, 3);
    let b = gradient_support(3, 2);
    Outcome::new(
        a == (40, 40, 1600) && b == (12, 12, 144),
        format!("k=5 l=3 support {}x{} ({} nonzero), k=3 l=2 support {}x{} ({} nonzero)", a.0, a.1, a.2, b.0, b.1, b.2),
    )
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn wtconv_gradients() -> f64 {
    let mut layout = ParamLayout::default();
    let op = WtConv::new(&mut layout, "g", WtConvConfig { channels: 2, kernel: 3, levels: 2, per_subband_scales: true });
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p: Vec<f64> = (0..layout.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut x: Tensor<f64> = random_tensor(8, 8, 2, &mut rng);
    let gy: Tensor<f64> = random_tensor(8, 8, 2, &mut rng);
    let loss = |p: &[f64], x: &Tensor<f64>| op.forward(p, x).unwrap().0.dot(&gy);
    let (_, cache) = op.forward(&p, &x).unwrap();
    let mut g = vec![0.0; p.len()];
    let gx = op.backward(&p, &cache, &gy, &mut g).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss(&p, &x);
        p[i] = orig - h;
        let down = loss(&p, &x);
        p[i] = orig;
        worst = worst.max(rel_err(g[i], (up - down) / (2.0 * h)));
    }
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let up = loss(&p, &x);
        x.data_mut()[i] = orig - h;
        let down = loss(&p, &x);
        x.data_mut()[i] = orig;
        worst = worst.max(rel_err(gx.data()[i], (up - down) / (2.0 * h)));
    }
    worst
}

fn model_gradients() -> f64 {
    let cfg = ModelConfig { levels_lp: 1, levels_wt: 1, kernel: 3, n1: 1, n2: 1, channels: 4, c_low: 8, c_mask: 8, ..Default::default() };
    let net = LpwtNet::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Perturb the init so zero-initialized output layers do not hide paths.
    let mut p: Vec<f64> = net.init_params::<f64>(6).into_iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
    let x: Tensor<f64> = Tensor::random_uniform(8, 8, 4, 0.0, 1.0, &mut rng);
    let target: Tensor<f64> = Tensor::random_uniform(8, 8, 4, 0.0, 1.0, &mut rng);
    let loss = |p: &[f64]| mse_loss(&net.forward(p, &x).unwrap().0, &target).unwrap().0;
    let (pred, cache) = net.forward(&p, &x).unwrap();
    let (_, gy) = mse_loss(&pred, &target).unwrap();
    let mut g = vec![0.0; p.len()];
    net.backward(&p, &cache, &gy, &mut g).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let i = rng.random_range(0..p.len());
        let orig = p[i];
        p[i] = orig + h;
        let up = loss(&p);
        p[i] = orig - h;
        let down = loss(&p);
        p[i] = orig;
        worst = worst.max(rel_err(g[i], (up - down) / (2.0 * h)));
    }
    worst
}

fn gradients() -> Outcome {
    let a = wtconv_gradients();
    let b = model_gradients();
    Outcome::new(
        a < 1e-4 && b < 1e-3,
        format!("WTConv max rel err {a:.2e} (< 1e-4, f64), model max rel err {b:.2e} over 100 params (< 1e-3)"),
    )
}

fn frob_rel(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> f64 {
    (a - b).norm() / b.norm()
}

fn channel_algebra() -> Outcome {
    let array = ArrayGeometry::half_wavelength(8, 8).unwrap();
    let basis = steering_basis(&array, &build_angle_grid(&array), BasisMode::DftKronecker).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let powers: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
    let pas = PowerAngularSpectrum::new(0.8, powers).unwrap();
    let cov = cscm_from_pas(&basis, &pas).unwrap();
    let back = extract_cpas(&basis, &cov).unwrap();
    let identity = back.iter().zip(pas.scaled()).map(|(a, b)| (a - b).abs() / b.abs().max(1e-300)).fold(0.0, f64::max);
    let set = sample_channels(&basis, &pas, 100_000, 7).unwrap();
    let sample = sample_covariance(&set).unwrap();
    let frob = frob_rel(&sample.matrix, &cov.matrix);
    Outcome::new(
        identity <= 1e-8 && frob <= 0.05,
        format!("CPAS identity rel err {identity:.2e} (<= 1e-8, N=64), sample CSCM Frobenius rel err {frob:.4} at T=1e5 (<= 0.05)"),
    )
}

fn degradation_counts() -> Outcome {
    let params = TaskParams { p_m: 0.2, region_size: 4, stride: 2, channel_shared: false };
    let uniform = make_mask(&params.spec(TaskKind::Uniform, 0), (32, 32, 64)).unwrap();
    let kept = uniform.retained_locations();
    let region = make_mask(&params.spec(TaskKind::Region, 0), (32, 32, 64)).unwrap();
    let zeros = region.zeros_count();
    let nu = make_mask(&params.spec(TaskKind::NonUniform, 0), (32, 32, 64)).unwrap();
    let n = (32 * 32 * 64) as f64;
    let frac = nu.zeros_count() as f64 / n;
    let bound = 3.0 * (0.2f64 * 0.8 / n).sqrt();
    Outcome::new(
        kept == 256 && zeros == 1024 && (frac - 0.2).abs() <= bound,
        format!("uniform s=2 keeps {kept} (256), 4x4 region zeros {zeros} (1024), Bernoulli zero fraction {frac:.4} (0.2 +- {bound:.4})"),
    )
}

/// Fixed desk-scale protocol shared by the training criteria.
fn smoke_dataset(dir: &std::path::Path) -> Dataset {
    let cfg = DatasetConfig { area_size: 16.0, sigma: 16, n_y: 4, n_z: 4, samples: 200, seed: 1, ..Default::default() };
    generate_dataset(&cfg, dir).unwrap();
    Dataset::open(dir).unwrap()
}

fn smoke_model(block: BlockKind) -> ModelConfig {
    ModelConfig { levels_lp: 2, levels_wt: 2, kernel: 3, n1: 2, n2: 1, c_low: 32, c_mask: 32, block, ..Default::default() }
}

fn smoke_train(ds: &Dataset, task: TaskKind, block: BlockKind) -> (Trainer<'_>, Vec<LossRecord>) {
    let iterations = 2000;
    let cfg = TrainConfig {
        iterations,
        batch: 16,
        warmup_iters: iterations / 20,
        decay_interval: iterations / 2,
        task,
        seed: 3,
        ..Default::default()
    };
    let mut trainer = Trainer::new(ds, smoke_model(block), cfg).unwrap();
    let trace = trainer.run(|_| {}).unwrap();
    (trainer, trace)
}

fn window_means(trace: &[LossRecord]) -> (f64, f64) {
    let mean = |w: &[LossRecord]| w.iter().map(|r| r.loss).sum::<f64>() / w.len() as f64;
    (mean(&trace[..100]), mean(&trace[trace.len() - 100..]))
}

fn eval_all(trainer: &Trainer, ds: &Dataset, trained: TaskKind) -> MetricsReport {
    evaluate(&trainer.net, &trainer.params, ds, &TaskKind::ALL, &TaskParams::default(), Some(trained), 9, &EvalOptions::default())
        .unwrap()
}

fn main() -> ExitCode {
    let mut suite = Suite::default();
    suite.run("1", "wavelet perfect reconstruction", wavelet_round_trip);
    suite.run("2", "Laplacian pyramid identity", pyramid_identity);
    suite.run("3", "complexity worked example", complexity_example);
    suite.run("4", "WTConv receptive field", receptive_field);
    suite.run("5", "gradient correctness", gradients);
    suite.run("6", "channel-model algebra", channel_algebra);
    suite.run("7", "degradation exactness", degradation_counts);

    let tmp = tempfile::tempdir().unwrap();
    let ds = smoke_dataset(&tmp.path().join("smoke"));
    let mut region_report = None;
    let mut region_dswt = None;
    for task in TaskKind::ALL {
        let t = Instant::now();
        let (trainer, trace) = smoke_train(&ds, task, BlockKind::Dswt);
        let (first, last) = window_means(&trace);
        let report = eval_all(&trainer, &ds, task);
        let m = report.task(task).unwrap();
        let o = Outcome::new(
            m.nmse < m.baseline_nmse && last < first && trace.iter().all(|r| r.loss.is_finite()),
            format!(
                "{task} (gamma {:+}): test NMSE {:.4e} < baseline {:.4e}; loss window first {first:.3e} > last {last:.3e}",
                task.gamma(),
                m.nmse,
                m.baseline_nmse
            ),
        );
        suite.line(&format!("8{}", task.name().chars().next().unwrap()), "smoke training", true, t.elapsed().as_secs_f64(), o);
        if task == TaskKind::Region {
            region_dswt = Some(m.nmse);
            region_report = Some(report);
        }
    }

    let t = Instant::now();
    let dswt = LpwtNet::new(ModelConfig { channels: 16, ..smoke_model(BlockKind::Dswt) }).unwrap().forward_macs(16, 16);
    let plain = LpwtNet::new(ModelConfig { channels: 16, ..smoke_model(BlockKind::PlainConv) }).unwrap().forward_macs(16, 16);
    suite.line(
        "9a",
        "ablation FLOP ordering",
        true,
        t.elapsed().as_secs_f64(),
        Outcome::new(dswt < plain, format!("DSWT {dswt} < plain conv {plain} FLOPs at equal depth")),
    );
    let t = Instant::now();
    let (plain_trainer, _) = smoke_train(&ds, TaskKind::Region, BlockKind::PlainConv);
    let plain_nmse = eval_all(&plain_trainer, &ds, TaskKind::Region).task(TaskKind::Region).unwrap().nmse;
    let dswt_nmse = region_dswt.unwrap();
    suite.line(
        "9b",
        "ablation NMSE ordering",
        false,
        t.elapsed().as_secs_f64(),
        Outcome::new(dswt_nmse <= plain_nmse, format!("region NMSE DSWT {dswt_nmse:.4e} vs plain conv {plain_nmse:.4e} (pass if DSWT <= plain)")),
    );

    let t = Instant::now();
    let report = region_report.unwrap();
    let complete = report.tasks.len() == 3
        && report.tasks.iter().filter(|m| m.zero_shot).count() == 2
        && report.tasks.iter().all(|m| m.nmse.is_finite() && m.mse.is_finite());
    eprintln!("{}", report.table());
    suite.line(
        "10",
        "zero-shot report",
        true,
        t.elapsed().as_secs_f64(),
        Outcome::new(complete, "trained on region, evaluated on all three tasks; absolute values not compared"),
    );

    if suite.enforced_failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("failed: {}", suite.enforced_failures.join(", "));
        ExitCode::FAILURE
    }
}
