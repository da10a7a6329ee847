//! Binary masking operators for the three measurement scenarios.
//!
//! Task factor γ selects the operator: −1 drops entries independently
//! (non-uniform sparse measurement), 0 blanks a rectangular inaccessible region,
//! +1 keeps a regular stride grid (uniform sparse sampling).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scf::ScfTensor;
use crate::seed;
use crate::tensor::{Scalar, Tensor};

/// Inclusive rectangle in grid indices; rows `x_l..=x_r`, columns `y_b..=y_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x_l: usize,
    pub x_r: usize,
    pub y_b: usize,
    pub y_t: usize,
}

impl Rect {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.x_l..=self.x_r).contains(&i) && (self.y_b..=self.y_t).contains(&j)
    }

    pub fn area(&self) -> usize {
        (self.x_r - self.x_l + 1) * (self.y_t - self.y_b + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionPlacement {
    Fixed(Rect),
    /// `size × size` cells at a uniformly drawn position, redrawn per sample.
    Random { size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Degradation {
    NonUniform { p_m: f64, channel_shared: bool },
    Region { placement: RegionPlacement },
    Uniform { stride: usize },
}

/// The three task names as used on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    NonUniform,
    Region,
    Uniform,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::NonUniform, TaskKind::Region, TaskKind::Uniform];

    pub fn gamma(self) -> i8 {
        match self {
            TaskKind::NonUniform => -1,
            TaskKind::Region => 0,
            TaskKind::Uniform => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::NonUniform => "nonuniform",
            TaskKind::Region => "region",
            TaskKind::Uniform => "uniform",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonuniform" | "non-uniform" | "-1" => Ok(TaskKind::NonUniform),
            "region" | "0" => Ok(TaskKind::Region),
            "uniform" | "1" | "+1" => Ok(TaskKind::Uniform),
            other => Err(Error::Config(format!("unknown task '{other}' (nonuniform|region|uniform)"))),
        }
    }
}

/// Parameters shared by the three tasks; `spec` picks the relevant ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub p_m: f64,
    pub region_size: usize,
    pub stride: usize,
    pub channel_shared: bool,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams { p_m: 0.2, region_size: 4, stride: 2, channel_shared: false }
    }
}

impl TaskParams {
    pub fn spec(&self, task: TaskKind, seed: u64) -> DegradationSpec {
        let degradation = match task {
            TaskKind::NonUniform => Degradation::NonUniform { p_m: self.p_m, channel_shared: self.channel_shared },
            TaskKind::Region => Degradation::Region { placement: RegionPlacement::Random { size: self.region_size } },
            TaskKind::Uniform => Degradation::Uniform { stride: self.stride },
        };
        DegradationSpec { degradation, seed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub degradation: Degradation,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(degradation: Degradation, seed: u64) -> Self {
        DegradationSpec { degradation, seed }
    }

    pub fn task(&self) -> TaskKind {
        match self.degradation {
            Degradation::NonUniform { .. } => TaskKind::NonUniform,
            Degradation::Region { .. } => TaskKind::Region,
            Degradation::Uniform { .. } => TaskKind::Uniform,
        }
    }

    pub fn gamma(&self) -> i8 {
        self.task().gamma()
    }

    /// Spec whose seed is derived from this one and the sample index.
    pub fn for_sample(&self, index: usize) -> DegradationSpec {
        let stream = format!("mask-{}", self.task().name());
        DegradationSpec { degradation: self.degradation, seed: seed::derive(self.seed, &stream, index as u64) }
    }

    pub fn validate(&self, sigma_h: usize, sigma_w: usize) -> Result<()> {
        match self.degradation {
            Degradation::NonUniform { p_m, .. } => {
                if !(0.0..1.0).contains(&p_m) {
                    return Err(Error::Config(format!("p_m = {p_m} outside [0, 1)")));
                }
            }
            Degradation::Region { placement: RegionPlacement::Fixed(r) } => {
                if r.x_l > r.x_r || r.y_b > r.y_t {
                    return Err(Error::Config(format!("inverted region {r:?}")));
                }
                if r.x_r >= sigma_h || r.y_t >= sigma_w {
                    return Err(Error::Config(format!("region {r:?} outside {sigma_h}x{sigma_w} grid")));
                }
            }
            Degradation::Region { placement: RegionPlacement::Random { size } } => {
                if size == 0 || size > sigma_h || size > sigma_w {
                    return Err(Error::Config(format!("region size {size} does not fit a {sigma_h}x{sigma_w} grid")));
                }
            }
            Degradation::Uniform { stride } => {
                if stride == 0 || stride > sigma_h.min(sigma_w) {
                    return Err(Error::Config(format!("stride {stride} must lie in 1..={}", sigma_h.min(sigma_w))));
                }
            }
        }
        Ok(())
    }

    /// Rectangle actually blanked for this spec's seed (region task only).
    pub fn region_rect(&self, sigma_h: usize, sigma_w: usize) -> Option<Rect> {
        match self.degradation {
            Degradation::Region { placement: RegionPlacement::Fixed(r) } => Some(r),
            Degradation::Region { placement: RegionPlacement::Random { size } } => {
                let mut rng = seed::rng(self.seed, "region", 0);
                let x_l = rng.random_range(0..=sigma_h - size);
                let y_b = rng.random_range(0..=sigma_w - size);
                Some(Rect { x_l, x_r: x_l + size - 1, y_b, y_t: y_b + size - 1 })
            }
            _ => None,
        }
    }
}

/// Binary σ×σ×N mask; 1 keeps an entry, 0 erases it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    pub data: Tensor<f32>,
}

impl MaskTensor {
    pub fn zeros_count(&self) -> usize {
        self.data.data().iter().filter(|&&v| v == 0.0).count()
    }

    /// Locations (i, j) whose whole fiber is retained.
    pub fn retained_locations(&self) -> usize {
        let (h, w, _) = self.data.shape();
        (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).filter(|&(i, j)| self.data.fiber(i, j).iter().all(|&v| v == 1.0)).count()
    }

    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != self.data.shape() {
            return Err(Error::Shape(format!("mask {:?} vs tensor {:?}", self.data.shape(), x.shape())));
        }
        let data = x.data().iter().zip(self.data.data()).map(|(&v, &m)| if m == 0.0 { T::zero() } else { v }).collect();
        Tensor::from_vec(x.height(), x.width(), x.channels(), data)
    }
}

pub fn make_mask(spec: &DegradationSpec, shape: (usize, usize, usize)) -> Result<MaskTensor> {
    let (h, w, c) = shape;
    spec.validate(h, w)?;
    let data = match spec.degradation {
        Degradation::NonUniform { p_m, channel_shared } => {
            let mut rng = seed::rng(spec.seed, "bernoulli", 0);
            let keep = 1.0 - p_m;
            if channel_shared {
                let mut t = Tensor::zeros(h, w, c);
                for i in 0..h {
                    for j in 0..w {
                        let bit = if rng.random_bool(keep) { 1.0 } else { 0.0 };
                        t.fiber_mut(i, j).fill(bit);
                    }
                }
                t
            } else {
                Tensor::from_fn(h, w, c, |_, _, _| if rng.random_bool(keep) { 1.0 } else { 0.0 })
            }
        }
        Degradation::Region { .. } => {
            let r = spec.region_rect(h, w).expect("region task has a rectangle");
            Tensor::from_fn(h, w, c, |i, j, _| if r.contains(i, j) { 0.0 } else { 1.0 })
        }
        Degradation::Uniform { stride } => {
            Tensor::from_fn(h, w, c, |i, j, _| if i % stride == 0 && j % stride == 0 { 1.0 } else { 0.0 })
        }
    };
    Ok(MaskTensor { data })
}

/// `observed = mask ∘ tensor`; the mask is returned for evaluation.
pub fn degrade(tensor: &ScfTensor, spec: &DegradationSpec) -> Result<(ScfTensor, MaskTensor)> {
    let mask = make_mask(spec, tensor.data.shape())?;
    let data = mask.apply(&tensor.data)?;
    Ok((ScfTensor { data, normalization: tensor.normalization }, mask))
}
