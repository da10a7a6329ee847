//! Statistical channel fingerprint (sCF) construction and dataset persistence.
//!
//! An sCF is a σ×σ×N tensor whose fiber at cell (i, j) is that cell's channel
//! power angular spectrum. Datasets are stored as a directory with
//! `manifest.json` and `samples.bin`, the latter holding M raw little-endian
//! f32 records of shape `[σ, σ, N]` in row-major order with no headers.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ArrayGeometry, ClusterConfig, PowerAngularSpectrum};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.bin";
pub const DATASET_VERSION: u32 = 1;

/// Square area of side `area_size` metres split into σ×σ cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub area_size: f64,
    pub resolution: usize,
}

/// 0-based cell index; `i` runs along x, `j` along y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellIndex {
    pub i: usize,
    pub j: usize,
}

impl CellIndex {
    pub fn one_based(self) -> (usize, usize) {
        (self.i + 1, self.j + 1)
    }
}

impl GridSpec {
    pub fn new(area_size: f64, resolution: usize) -> Result<Self> {
        let g = GridSpec { area_size, resolution };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(Error::Config("grid resolution must be at least 1".into()));
        }
        if !(self.area_size > 0.0 && self.area_size.is_finite()) {
            return Err(Error::Config("area size must be positive".into()));
        }
        Ok(())
    }

    pub fn cell_size(&self) -> f64 {
        self.area_size / self.resolution as f64
    }

    /// Centre of cell (i, j) in metres.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        let d = self.cell_size();
        ((i as f64 + 0.5) * d, (j as f64 + 0.5) * d)
    }

    /// Nearest cell centre; equidistant candidates resolve to the lowest (i, then j).
    pub fn assign_cell(&self, x: f64, y: f64) -> Result<CellIndex> {
        let w = self.area_size;
        if !(0.0..=w).contains(&x) || !(0.0..=w).contains(&y) {
            return Err(Error::OutOfArea(x, y));
        }
        // Distance to a row of centres is separable per axis; the nearest centre along
        // one axis is ⌈x/Δ⌉ − 1, which picks the lower index on a boundary.
        let axis = |v: f64| -> usize {
            let k = (v / self.cell_size()).ceil() as isize - 1;
            k.clamp(0, self.resolution as isize - 1) as usize
        };
        Ok(CellIndex { i: axis(x), j: axis(y) })
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { area_size: 32.0, resolution: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: f64,
    pub max: f64,
}

impl NormStats {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(max > min) || !min.is_finite() || !max.is_finite() {
            return Err(Error::Config(format!("degenerate normalization stats min={min} max={max}")));
        }
        Ok(NormStats { min, max })
    }
}

/// σ×σ×N real tensor of channel knowledge vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ScfTensor {
    pub data: Tensor<f32>,
    /// Set when `data` holds min-max normalized values.
    pub normalization: Option<NormStats>,
}

impl ScfTensor {
    pub fn raw(data: Tensor<f32>) -> Self {
        ScfTensor { data, normalization: None }
    }

    pub fn resolution(&self) -> usize {
        self.data.height()
    }

    pub fn channels(&self) -> usize {
        self.data.channels()
    }

    /// `x ↦ (x − min)/(max − min)`.
    pub fn normalize(&self, stats: NormStats) -> Result<ScfTensor> {
        let stats = NormStats::new(stats.min, stats.max)?;
        if self.normalization.is_some() {
            return Err(Error::Config("tensor is already normalized".into()));
        }
        let span = stats.max - stats.min;
        let data = self.data.map(|v| ((v as f64 - stats.min) / span) as f32);
        Ok(ScfTensor { data, normalization: Some(stats) })
    }

    pub fn denormalize(&self) -> Result<ScfTensor> {
        let stats = self.normalization.ok_or_else(|| Error::Config("tensor is not normalized".into()))?;
        let span = stats.max - stats.min;
        let data = self.data.map(|v| (v as f64 * span + stats.min) as f32);
        Ok(ScfTensor { data, normalization: None })
    }
}

/// Stacks per-cell CPAS vectors (row-major in (i, j)) into a σ×σ×N tensor.
pub fn build_scf(grid: &GridSpec, cpas_field: &[Vec<f64>]) -> Result<ScfTensor> {
    grid.validate()?;
    let sigma = grid.resolution;
    if cpas_field.len() != sigma * sigma {
        return Err(Error::Shape(format!("{} cell vectors for a {}x{} grid", cpas_field.len(), sigma, sigma)));
    }
    let n = cpas_field[0].len();
    if n == 0 || cpas_field.iter().any(|v| v.len() != n) {
        return Err(Error::Shape("cell vectors must share one non-zero length".into()));
    }
    let data: Vec<f32> = cpas_field.iter().flat_map(|v| v.iter().map(|&x| x as f32)).collect();
    Ok(ScfTensor::raw(Tensor::from_vec(sigma, sigma, n, data)?))
}

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub area_size: f64,
    pub sigma: usize,
    pub n_y: usize,
    pub n_z: usize,
    pub spacing_wavelengths: f64,
    /// Channel snapshots per cell for the sampled CPAS; 0 stores the exact `ξS`.
    pub slots: usize,
    pub samples: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub clusters: ClusterConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            area_size: 32.0,
            sigma: 32,
            n_y: 8,
            n_z: 8,
            spacing_wavelengths: 0.5,
            slots: 64,
            samples: 10_000,
            seed: 0,
            train_fraction: 0.8,
            clusters: ClusterConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn grid(&self) -> GridSpec {
        GridSpec { area_size: self.area_size, resolution: self.sigma }
    }

    pub fn array(&self) -> ArrayGeometry {
        ArrayGeometry { n_y: self.n_y, n_z: self.n_z, spacing_wavelengths: self.spacing_wavelengths }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid().validate()?;
        self.array().validate()?;
        self.clusters.validate()?;
        if self.samples == 0 {
            return Err(Error::Config("dataset needs at least one sample".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub sigma: usize,
    pub n: usize,
    pub sample_count: usize,
    pub norm_min: f64,
    pub norm_max: f64,
    pub seed: u64,
    pub split_ratio: String,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub generator: DatasetConfig,
}

impl DatasetManifest {
    pub fn norm_stats(&self) -> Result<NormStats> {
        NormStats::new(self.norm_min, self.norm_max)
    }

    pub fn record_len(&self) -> usize {
        self.sigma * self.sigma * self.n
    }
}

/// Seeded permutation split into train/test index lists.
pub fn split_indices(samples: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..samples).collect();
    idx.shuffle(&mut seed::rng(seed, "split", 0));
    let n_train = ((samples as f64 * train_fraction).round() as usize).clamp(1, samples);
    let test = idx.split_off(n_train);
    (idx, test)
}

/// Ground-truth sCF for sample `index`; each sample draws a fresh base-station drop.
pub fn synth_sample(cfg: &DatasetConfig, index: usize) -> Result<ScfTensor> {
    let grid = cfg.grid();
    let array = cfg.array();
    let sample_seed = seed::derive(cfg.seed, "sample", index as u64);
    let field = channel::synth_pas_field(&grid, &array, &cfg.clusters, sample_seed)?;
    let vectors: Vec<Vec<f64>> = if cfg.slots == 0 {
        field.cells.iter().map(PowerAngularSpectrum::scaled).collect()
    } else {
        // Sampled CPAS; identical to extract_cpas(sample_covariance(..)) on the
        // orthogonal basis, computed from the per-bin gains directly.
        field
            .cells
            .iter()
            .enumerate()
            .map(|(cell, pas)| {
                let slot_seed = seed::derive(sample_seed, "cell", cell as u64);
                let gains = channel::sample_gains(pas, cfg.slots, slot_seed)?;
                let set = channel::ChannelSampleSet { samples: Vec::new(), gains: Some(gains) };
                channel::cpas_from_gains(&set)
            })
            .collect::<Result<_>>()?
    };
    build_scf(&grid, &vectors)
}

fn partial_path(dir: &Path) -> PathBuf {
    let mut s = dir.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

/// Generates `cfg.samples` ground-truth sCFs into `dir` (which must not exist).
///
/// Output is staged in `<dir>.partial` and renamed once complete.
pub fn generate_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    if dir.exists() {
        return Err(Error::Config(format!("{} already exists", dir.display())));
    }
    let staging = partial_path(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;

    let samples_path = staging.join(SAMPLES_FILE);
    let file = File::create(&samples_path).map_err(|e| Error::io(&samples_path, e))?;
    let mut out = BufWriter::new(file);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    const CHUNK: usize = 32;
    for start in (0..cfg.samples).step_by(CHUNK) {
        let end = (start + CHUNK).min(cfg.samples);
        let chunk: Vec<ScfTensor> = (start..end).into_par_iter().map(|m| synth_sample(cfg, m)).collect::<Result<_>>()?;
        for t in &chunk {
            if !t.data.all_finite() {
                return Err(Error::Config("generator produced non-finite values".into()));
            }
            lo = lo.min(t.data.min_value() as f64);
            hi = hi.max(t.data.max_value() as f64);
            write_record(&mut out, &t.data).map_err(|e| Error::io(&samples_path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(&samples_path, e))?;
    drop(out);

    if !(hi > lo) {
        return Err(Error::Config("generated dataset is constant; cannot normalize".into()));
    }
    let (train_indices, test_indices) = split_indices(cfg.samples, cfg.train_fraction, cfg.seed);
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        sigma: cfg.sigma,
        n: cfg.array().n(),
        sample_count: cfg.samples,
        norm_min: lo,
        norm_max: hi,
        seed: cfg.seed,
        split_ratio: "4:1".to_string(),
        train_indices,
        test_indices,
        generator: cfg.clone(),
    };
    write_manifest(&staging.join(MANIFEST_FILE), &manifest)?;
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
    Ok(manifest)
}

pub fn write_record<W: Write>(out: &mut W, t: &Tensor<f32>) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn read_record<R: Read>(input: &mut R, sigma: usize, n: usize) -> std::io::Result<Tensor<f32>> {
    let mut buf = vec![0u8; sigma * sigma * n * 4];
    input.read_exact(&mut buf)?;
    let data = buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok(Tensor::from_vec(sigma, sigma, n, data).expect("record length matches shape"))
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes an already-built set of raw tensors as a dataset (used for imports and tests).
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, samples: &[Tensor<f32>]) -> Result<()> {
    if samples.len() != manifest.sample_count {
        return Err(Error::Shape("sample count disagrees with manifest".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(SAMPLES_FILE);
    let mut out = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    for t in samples {
        if t.shape() != (manifest.sigma, manifest.sigma, manifest.n) {
            return Err(Error::Shape(format!("record shape {:?}", t.shape())));
        }
        write_record(&mut out, t).map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    write_manifest(&dir.join(MANIFEST_FILE), manifest)
}

/// Read access to a persisted dataset.
#[derive(Debug)]
pub struct Dataset {
    dir: PathBuf,
    pub manifest: DatasetManifest,
    preloaded: Option<Vec<Tensor<f32>>>,
}

impl Dataset {
    const PRELOAD_LIMIT_BYTES: u64 = 256 << 20;

    pub fn open(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(&mpath, e))?;
        let spath = dir.join(SAMPLES_FILE);
        let size = fs::metadata(&spath).map_err(|e| Error::io(&spath, e))?.len();
        let expected = (manifest.sample_count * manifest.record_len() * 4) as u64;
        if size != expected {
            return Err(Error::Corrupt { path: spath, reason: format!("{size} bytes, expected {expected}") });
        }
        let mut ds = Dataset { dir: dir.to_path_buf(), manifest, preloaded: None };
        if size <= Self::PRELOAD_LIMIT_BYTES {
            let mut r = BufReader::new(File::open(&spath).map_err(|e| Error::io(&spath, e))?);
            let all = (0..ds.manifest.sample_count)
                .map(|_| read_record(&mut r, ds.manifest.sigma, ds.manifest.n))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(|e| Error::io(&spath, e))?;
            ds.preloaded = Some(all);
        }
        Ok(ds)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.manifest.sample_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Raw (unnormalized) ground truth for sample `m`.
    pub fn raw(&self, m: usize) -> Result<ScfTensor> {
        if m >= self.len() {
            return Err(Error::Config(format!("sample {m} out of range ({} samples)", self.len())));
        }
        if let Some(all) = &self.preloaded {
            return Ok(ScfTensor::raw(all[m].clone()));
        }
        let path = self.dir.join(SAMPLES_FILE);
        let mut f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let bytes = (self.manifest.record_len() * 4) as u64;
        f.seek(SeekFrom::Start(bytes * m as u64)).map_err(|e| Error::io(&path, e))?;
        let t = read_record(&mut f, self.manifest.sigma, self.manifest.n).map_err(|e| Error::io(&path, e))?;
        Ok(ScfTensor::raw(t))
    }

    /// Ground truth normalized with the dataset-wide statistics.
    pub fn normalized(&self, m: usize) -> Result<ScfTensor> {
        self.raw(m)?.normalize(self.manifest.norm_stats()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assign_cell_examples() {
        let g = GridSpec::new(32.0, 32).unwrap();
        assert_eq!(g.assign_cell(0.5, 0.5).unwrap().one_based(), (1, 1));
        assert_eq!(g.assign_cell(31.9, 0.1).unwrap().one_based(), (32, 1));
        // (1.0, 0.5) is equidistant from the centres of cells 1 and 2 along x.
        assert_eq!(g.assign_cell(1.0, 0.5).unwrap().one_based(), (1, 1));
        assert_eq!(g.assign_cell(0.0, 32.0).unwrap().one_based(), (1, 32));
        assert!(matches!(g.assign_cell(-0.1, 3.0), Err(Error::OutOfArea(..))));
        assert!(g.assign_cell(3.0, 32.5).is_err());
    }

    #[test]
    fn build_scf_cases() {
        let g = GridSpec::new(4.0, 2).unwrap();
        let v = vec![1.0, 2.0, 3.0];
        let t = build_scf(&g, &vec![v.clone(); 4]).unwrap();
        assert_eq!(t.data.shape(), (2, 2, 3));
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(t.data.fiber(i, j), &[1.0, 2.0, 3.0]);
            }
        }
        let one = build_scf(&GridSpec::new(1.0, 1).unwrap(), &[v.clone()]).unwrap();
        assert_eq!(one.data.data(), &[1.0, 2.0, 3.0]);
        assert!(build_scf(&g, &vec![v; 3]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let t = ScfTensor::raw(Tensor::from_vec(1, 1, 3, vec![0.0, 5.0, 10.0]).unwrap());
        let n = t.normalize(NormStats::new(0.0, 10.0).unwrap()).unwrap();
        assert_eq!(n.data.data(), &[0.0, 0.5, 1.0]);
        assert!(NormStats::new(1.0, 1.0).is_err());
        assert!(n.normalize(NormStats { min: 0.0, max: 1.0 }).is_err());
        assert!(t.denormalize().is_err());
    }

    #[test]
    fn split_is_four_to_one() {
        let (tr, te) = split_indices(10, 0.8, 3);
        assert_eq!((tr.len(), te.len()), (8, 2));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn default_config_shape() {
        let cfg = DatasetConfig::default();
        assert_eq!((cfg.sigma, cfg.array().n()), (32, 64));
        assert_eq!(cfg.grid().cell_size(), 1.0);
    }
}
