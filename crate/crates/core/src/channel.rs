//! Narrowband massive-MIMO statistical channel model for a uniform planar array.
//!
//! Channels are `h = A g` with `A` the steering basis and `g` uncorrelated
//! per-angle gains whose powers form the power angular spectrum (PAS). The
//! covariance is `Ω = A diag(ξS) Aᴴ`.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scf::GridSpec;
use crate::seed;

/// Uniform planar array with `n_y × n_z` elements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub n_y: usize,
    pub n_z: usize,
    /// Element spacing in wavelengths (υ = d/λ).
    pub spacing_wavelengths: f64,
}

impl ArrayGeometry {
    pub fn new(n_y: usize, n_z: usize, spacing_wavelengths: f64) -> Result<Self> {
        let g = ArrayGeometry { n_y, n_z, spacing_wavelengths };
        g.validate()?;
        Ok(g)
    }

    /// Half-wavelength spaced `n_y × n_z` array.
    pub fn half_wavelength(n_y: usize, n_z: usize) -> Result<Self> {
        Self::new(n_y, n_z, 0.5)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_y == 0 || self.n_z == 0 {
            return Err(Error::Config("array needs at least one element per axis".into()));
        }
        if !(self.spacing_wavelengths > 0.0 && self.spacing_wavelengths.is_finite()) {
            return Err(Error::Config("antenna spacing must be positive".into()));
        }
        Ok(())
    }

    /// Total element count N.
    pub fn n(&self) -> usize {
        self.n_y * self.n_z
    }
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        ArrayGeometry { n_y: 8, n_z: 8, spacing_wavelengths: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleBounds {
    pub elevation_min: f64,
    pub elevation_max: f64,
    pub azimuth_min: f64,
    pub azimuth_max: f64,
}

/// Discretized (elevation, azimuth) pairs, one per angular bin.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleGrid {
    pub entries: Vec<(f64, f64)>,
    pub bounds: AngleBounds,
}

impl AngleGrid {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Uniform-sine angle grid: `sin θ(n) = 2n/N − 1`, with the same mapping for φ(n).
pub fn build_angle_grid(array: &ArrayGeometry) -> AngleGrid {
    let n = array.n();
    let entries = (0..n)
        .map(|i| {
            let s = (2.0 * i as f64 / n as f64 - 1.0).clamp(-1.0, 1.0);
            (s.asin(), s.asin())
        })
        .collect();
    AngleGrid {
        entries,
        bounds: AngleBounds {
            elevation_min: -PI / 2.0,
            elevation_max: PI / 2.0,
            azimuth_min: -PI / 2.0,
            azimuth_max: PI / 2.0,
        },
    }
}

fn phase_ramp(len: usize, phase_step: f64) -> impl Iterator<Item = Complex64> {
    (0..len).map(move |m| Complex64::from_polar(1.0, -TAU * m as f64 * phase_step))
}

/// Array response `a(θ, φ) = a_z(θ) ⊗ a_y(θ, φ)`; element `(m_z, m_y)` sits at row `m_z·n_y + m_y`.
pub fn steering_vector(array: &ArrayGeometry, elevation: f64, azimuth: f64) -> DVector<Complex64> {
    let v = array.spacing_wavelengths;
    let a_z: Vec<Complex64> = phase_ramp(array.n_z, v * elevation.sin()).collect();
    let a_y: Vec<Complex64> = phase_ramp(array.n_y, v * elevation.cos() * azimuth.sin()).collect();
    DVector::from_iterator(array.n(), a_z.iter().flat_map(|&z| a_y.iter().map(move |&y| z * y)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisMode {
    /// Columns are literal steering vectors on the angle grid.
    SteeringLiteral,
    /// `F_{N_z} ⊗ F_{N_y}` with unnormalized DFT factors; columns are orthogonal with norm² N.
    DftKronecker,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringBasis {
    pub matrix: DMatrix<Complex64>,
    pub mode: BasisMode,
}

impl SteeringBasis {
    pub fn n(&self) -> usize {
        self.matrix.ncols()
    }

    /// ‖AᴴA − N·I‖_max
    pub fn orthogonality_error(&self) -> f64 {
        let n = self.n();
        let gram = self.matrix.adjoint() * &self.matrix;
        let target = DMatrix::<Complex64>::identity(n, n) * Complex64::new(n as f64, 0.0);
        (gram - target).iter().fold(0.0, |m, z| m.max(z.norm()))
    }
}

fn dft_matrix(n: usize) -> DMatrix<Complex64> {
    DMatrix::from_fn(n, n, |p, q| Complex64::from_polar(1.0, -TAU * ((p * q) % n) as f64 / n as f64))
}

pub fn steering_basis(array: &ArrayGeometry, grid: &AngleGrid, mode: BasisMode) -> Result<SteeringBasis> {
    let n = array.n();
    if grid.len() != n {
        return Err(Error::Shape(format!("angle grid has {} entries for {} antennas", grid.len(), n)));
    }
    let matrix = match mode {
        BasisMode::SteeringLiteral => {
            let mut a = DMatrix::zeros(n, n);
            for (col, &(theta, phi)) in grid.entries.iter().enumerate() {
                a.set_column(col, &steering_vector(array, theta, phi));
            }
            a
        }
        BasisMode::DftKronecker => dft_matrix(array.n_z).kronecker(&dft_matrix(array.n_y)),
    };
    Ok(SteeringBasis { matrix, mode })
}

/// The single-index DFT form of the UPA basis,
/// `A_{m,n} = exp(−j2π[(m′−1)(n−1−N/2) + (m″−1)(n−1−N/2)]/N)` with 1-based `m, n`,
/// `m′ = ⌈m/N_y⌉`, `m″ = m mod N_y`.
///
/// Rows depend on `m` only through `m′ + m″`, so distinct antennas can share a row;
/// the covariance algebra uses [`BasisMode::DftKronecker`] instead.
pub fn single_index_basis(array: &ArrayGeometry) -> DMatrix<Complex64> {
    let n = array.n();
    let nf = n as f64;
    DMatrix::from_fn(n, n, |row, col| {
        let m = row + 1;
        let m1 = m.div_ceil(array.n_y) as f64;
        let m2 = (m % array.n_y) as f64;
        let centered = col as f64 - nf / 2.0; // (n − 1 − N/2) with 1-based n
        Complex64::from_polar(1.0, -TAU * ((m1 - 1.0) * centered + (m2 - 1.0) * centered) / nf)
    })
}

/// Per-angle channel powers `ξ·S(n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerAngularSpectrum {
    pub large_scale_gain: f64,
    pub powers: Vec<f64>,
}

impl PowerAngularSpectrum {
    pub fn new(large_scale_gain: f64, powers: Vec<f64>) -> Result<Self> {
        let pas = PowerAngularSpectrum { large_scale_gain, powers };
        pas.validate()?;
        Ok(pas)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.large_scale_gain >= 0.0 && self.large_scale_gain.is_finite()) {
            return Err(Error::Config(format!("invalid large-scale gain {}", self.large_scale_gain)));
        }
        for (index, &value) in self.powers.iter().enumerate() {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(Error::NegativePower { index, value });
            }
        }
        Ok(())
    }

    /// The channel knowledge vector `[ξS(1), …, ξS(N)]`.
    pub fn scaled(&self) -> Vec<f64> {
        self.powers.iter().map(|&s| self.large_scale_gain * s).collect()
    }
}

/// Channel spatial covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    pub matrix: DMatrix<Complex64>,
}

impl CovarianceMatrix {
    pub fn trace(&self) -> f64 {
        self.matrix.diagonal().iter().map(|z| z.re).sum()
    }

    /// max |Ω − Ωᴴ| on the unit-trace normalized copy.
    pub fn hermitian_error(&self) -> f64 {
        let tr = self.trace();
        let scale = if tr.abs() > 0.0 { 1.0 / tr } else { 1.0 };
        (&self.matrix - self.matrix.adjoint()).iter().fold(0.0, |m, z| m.max(z.norm() * scale))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        // Symmetrize before the Hermitian solver to drop rounding asymmetry.
        let herm = (&self.matrix + self.matrix.adjoint()) * Complex64::new(0.5, 0.0);
        herm.symmetric_eigenvalues().iter().fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn is_valid(&self) -> bool {
        let tr = self.trace();
        self.hermitian_error() <= 1e-10 && self.min_eigenvalue() >= -1e-8 * tr.abs().max(f64::MIN_POSITIVE)
    }
}

/// `Ω = A diag(ξS) Aᴴ`.
pub fn cscm_from_pas(basis: &SteeringBasis, pas: &PowerAngularSpectrum) -> Result<CovarianceMatrix> {
    pas.validate()?;
    let n = basis.n();
    if pas.powers.len() != n {
        return Err(Error::Shape(format!("PAS length {} vs basis size {}", pas.powers.len(), n)));
    }
    let mut scaled = basis.matrix.clone();
    for (col, s) in pas.scaled().into_iter().enumerate() {
        scaled.column_mut(col).scale_mut(s);
    }
    Ok(CovarianceMatrix { matrix: scaled * basis.matrix.adjoint() })
}

/// T channel snapshots `h_t = A g_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSampleSet {
    pub samples: Vec<DVector<Complex64>>,
    pub gains: Option<Vec<DVector<Complex64>>>,
}

fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Draws `g_t(n) = √(ξS(n))·ε_t(n)` with ε circularly-symmetric standard normal, `h_t = A g_t`.
pub fn sample_channels(
    basis: &SteeringBasis,
    pas: &PowerAngularSpectrum,
    slots: usize,
    seed: u64,
) -> Result<ChannelSampleSet> {
    let n = basis.n();
    if pas.powers.len() != n {
        return Err(Error::Shape(format!("PAS length {} vs basis size {}", pas.powers.len(), n)));
    }
    let gains = sample_gains(pas, slots, seed)?;
    let samples = gains.iter().map(|g| &basis.matrix * g).collect();
    Ok(ChannelSampleSet { samples, gains: Some(gains) })
}

/// Beam-domain gains `g_t(n) = √(ξS(n))·ε_t(n)` for `slots` snapshots.
pub fn sample_gains(pas: &PowerAngularSpectrum, slots: usize, seed: u64) -> Result<Vec<DVector<Complex64>>> {
    pas.validate()?;
    if slots == 0 {
        return Err(Error::Config("need at least one time slot".into()));
    }
    let amp: Vec<f64> = pas.scaled().into_iter().map(f64::sqrt).collect();
    let mut rng = seed::rng(seed, "channel-slots", 0);
    Ok((0..slots)
        .map(|_| DVector::from_iterator(amp.len(), amp.iter().map(|&a| complex_normal(&mut rng) * a)))
        .collect())
}

/// `(1/T) Σ h_t h_tᴴ`
pub fn sample_covariance(set: &ChannelSampleSet) -> Result<CovarianceMatrix> {
    let first = set.samples.first().ok_or_else(|| Error::Config("empty channel sample set".into()))?;
    let n = first.len();
    let mut acc = DMatrix::<Complex64>::zeros(n, n);
    for h in &set.samples {
        if h.len() != n {
            return Err(Error::Shape("channel samples differ in length".into()));
        }
        acc.gerc(Complex64::new(1.0, 0.0), h, h, Complex64::new(1.0, 0.0));
    }
    Ok(CovarianceMatrix { matrix: acc / Complex64::new(set.samples.len() as f64, 0.0) })
}

/// Beam-domain CPAS `Ŝ(n) = a_nᴴ Ω a_n / N²`. Exact inverse of [`cscm_from_pas`] on the
/// orthogonal basis.
pub fn extract_cpas(basis: &SteeringBasis, cov: &CovarianceMatrix) -> Result<Vec<f64>> {
    if basis.mode != BasisMode::DftKronecker {
        return Err(Error::NonOrthogonalBasis);
    }
    let n = basis.n();
    if cov.matrix.nrows() != n || cov.matrix.ncols() != n {
        return Err(Error::Shape(format!("covariance {}x{} vs basis {}", cov.matrix.nrows(), cov.matrix.ncols(), n)));
    }
    let projected = &cov.matrix * &basis.matrix;
    let n2 = (n * n) as f64;
    Ok((0..n)
        .map(|col| {
            let q = basis.matrix.column(col).dotc(&projected.column(col));
            (q.re / n2).max(0.0)
        })
        .collect())
}

/// Per-bin mean gain power `(1/T) Σ |g_t(n)|²`.
///
/// On the dft-kronecker basis this equals `extract_cpas(A, sample_covariance(A g_t))`
/// without forming the N×N covariance.
pub fn cpas_from_gains(set: &ChannelSampleSet) -> Result<Vec<f64>> {
    let gains = set.gains.as_ref().ok_or_else(|| Error::Config("sample set carries no gains".into()))?;
    let t = gains.len() as f64;
    let n = gains.first().map(|g| g.len()).unwrap_or(0);
    let mut out = vec![0.0; n];
    for g in gains {
        for (o, z) in out.iter_mut().zip(g.iter()) {
            *o += z.norm_sqr();
        }
    }
    out.iter_mut().for_each(|v| *v /= t);
    Ok(out)
}

/// Parameters of the synthetic cluster-based PAS field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub num_clusters: usize,
    /// Laplacian decay length of a cluster, in angular bins.
    pub angular_spread: f64,
    /// Cluster c has nominal relative power `exp(−power_decay · c)`.
    pub power_decay: f64,
    /// Correlation length of the cluster-parameter random fields.
    pub spatial_correlation_length: f64,
    pub bs_height: f64,
    pub ut_height: f64,
    /// Distance at which the large-scale gain drops to 1/2.
    pub reference_distance: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            num_clusters: 4,
            angular_spread: 1.0,
            power_decay: 0.7,
            spatial_correlation_length: 8.0,
            bs_height: 10.0,
            ut_height: 1.5,
            reference_distance: 10.0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("angular_spread", self.angular_spread),
            ("spatial_correlation_length", self.spatial_correlation_length),
            ("reference_distance", self.reference_distance),
        ];
        if self.num_clusters == 0 {
            return Err(Error::Config("num_clusters must be at least 1".into()));
        }
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.power_decay >= 0.0 && self.power_decay.is_finite()) {
            return Err(Error::Config("power_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Isotropic Gaussian-correlated random field built from random Fourier features.
struct SmoothField {
    freqs: Vec<(f64, f64)>,
    phases: Vec<f64>,
}

impl SmoothField {
    const FEATURES: usize = 16;

    fn new<R: Rng + ?Sized>(rng: &mut R, corr_len: f64) -> Self {
        let mut freqs = Vec::with_capacity(Self::FEATURES);
        let mut phases = Vec::with_capacity(Self::FEATURES);
        for _ in 0..Self::FEATURES {
            let wx: f64 = StandardNormal.sample(rng);
            let wy: f64 = StandardNormal.sample(rng);
            freqs.push((wx / corr_len, wy / corr_len));
            phases.push(rng.random_range(0.0..TAU));
        }
        SmoothField { freqs, phases }
    }

    /// Unit-variance sample at (x, y).
    fn at(&self, x: f64, y: f64) -> f64 {
        let norm = (2.0 / Self::FEATURES as f64).sqrt();
        norm * self.freqs.iter().zip(&self.phases).map(|(&(wx, wy), &p)| (wx * x + wy * y + p).cos()).sum::<f64>()
    }
}

fn circular_distance(a: f64, b: f64, period: f64) -> f64 {
    let d = (a - b).rem_euclid(period);
    d.min(period - d)
}

/// PAS for every cell of a σ×σ grid, row-major in (i, j).
#[derive(Debug, Clone, PartialEq)]
pub struct PasField {
    pub resolution: usize,
    pub cells: Vec<PowerAngularSpectrum>,
}

impl PasField {
    pub fn cell(&self, i: usize, j: usize) -> &PowerAngularSpectrum {
        &self.cells[i * self.resolution + j]
    }
}

/// Angular-bin coordinates (along y, along z) of the line-of-sight direction from a
/// base station at `bs` to a user at `ut` in the DFT beam domain.
fn los_bin(array: &ArrayGeometry, cfg: &ClusterConfig, bs: (f64, f64), ut: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (ut.0 - bs.0, ut.1 - bs.1);
    let ground = dx.hypot(dy);
    let elevation = (cfg.ut_height - cfg.bs_height).atan2(ground);
    let azimuth = dy.atan2(dx);
    let v = array.spacing_wavelengths;
    let u_y = v * elevation.cos() * azimuth.sin();
    let u_z = v * elevation.sin();
    (
        (u_y * array.n_y as f64).rem_euclid(array.n_y as f64),
        (u_z * array.n_z as f64).rem_euclid(array.n_z as f64),
    )
}

/// Synthetic spatially smooth PAS field over the grid.
///
/// A base station is dropped uniformly in the area. The dominant cluster points along
/// the geometric BS→cell direction; further clusters sit at seeded angular offsets that
/// drift across the area with smooth random fields, as do their powers. The large-scale
/// gain falls off as `1/(1 + (d/d_ref)²)` with 3D BS distance `d`.
pub fn synth_pas_field(
    grid: &GridSpec,
    array: &ArrayGeometry,
    cfg: &ClusterConfig,
    seed: u64,
) -> Result<PasField> {
    grid.validate()?;
    array.validate()?;
    cfg.validate()?;
    let mut rng = seed::rng(seed, "pas-field", 0);
    let area = grid.area_size;
    let bs = (rng.random_range(0.0..area), rng.random_range(0.0..area));
    let (ny, nz) = (array.n_y as f64, array.n_z as f64);

    struct Cluster {
        offset: (f64, f64),
        drift: [SmoothField; 3],
        log_power: f64,
    }
    let clusters: Vec<Cluster> = (0..cfg.num_clusters)
        .map(|c| {
            let offset = if c == 0 {
                (0.0, 0.0)
            } else {
                (rng.random_range(-ny / 2.0..ny / 2.0), rng.random_range(-nz / 2.0..nz / 2.0))
            };
            let drift = [
                SmoothField::new(&mut rng, cfg.spatial_correlation_length),
                SmoothField::new(&mut rng, cfg.spatial_correlation_length),
                SmoothField::new(&mut rng, cfg.spatial_correlation_length),
            ];
            Cluster { offset, drift, log_power: -cfg.power_decay * c as f64 }
        })
        .collect();

    const DRIFT_BINS: f64 = 1.0;
    const LOG_POWER_STD: f64 = 0.5;

    let sigma = grid.resolution;
    let mut cells = Vec::with_capacity(sigma * sigma);
    for i in 0..sigma {
        for j in 0..sigma {
            let (px, py) = grid.cell_center(i, j);
            let (by, bz) = los_bin(array, cfg, bs, (px, py));
            let mut powers = vec![0.0; array.n()];
            for (c, cl) in clusters.iter().enumerate() {
                let (cy, cz) = if c == 0 {
                    (by, bz)
                } else {
                    (
                        by + cl.offset.0 + DRIFT_BINS * cl.drift[0].at(px, py),
                        bz + cl.offset.1 + DRIFT_BINS * cl.drift[1].at(px, py),
                    )
                };
                let p = (cl.log_power + LOG_POWER_STD * cl.drift[2].at(px, py)).exp();
                for iz in 0..array.n_z {
                    let wz = (-circular_distance(iz as f64, cz, nz) / cfg.angular_spread).exp();
                    for iy in 0..array.n_y {
                        let wy = (-circular_distance(iy as f64, cy, ny) / cfg.angular_spread).exp();
                        powers[iz * array.n_y + iy] += p * wz * wy;
                    }
                }
            }
            let total: f64 = powers.iter().sum();
            powers.iter_mut().for_each(|v| *v /= total);
            let d = (px - bs.0).hypot(py - bs.1).hypot(cfg.bs_height - cfg.ut_height);
            let xi = 1.0 / (1.0 + (d / cfg.reference_distance).powi(2));
            cells.push(PowerAngularSpectrum { large_scale_gain: xi, powers });
        }
    }
    Ok(PasField { resolution: sigma, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upa(ny: usize, nz: usize) -> ArrayGeometry {
        ArrayGeometry::half_wavelength(ny, nz).unwrap()
    }

    #[test]
    fn angle_grid_mapping() {
        let g = build_angle_grid(&upa(2, 1));
        assert_eq!(g.len(), 2);
        assert!((g.entries[0].0.sin() + 1.0).abs() < 1e-15);
        assert!(g.entries[1].0.sin().abs() < 1e-15);
        let g4 = build_angle_grid(&upa(2, 2));
        assert!(g4.entries[2].0.sin().abs() < 1e-15);
        assert_eq!(build_angle_grid(&upa(8, 8)).len(), 64);
        for &(t, p) in &build_angle_grid(&upa(8, 8)).entries {
            assert!(t >= g4.bounds.elevation_min && t <= g4.bounds.elevation_max);
            assert!(p >= g4.bounds.azimuth_min && p <= g4.bounds.azimuth_max);
        }
    }

    #[test]
    fn steering_vector_cases() {
        let a = steering_vector(&upa(4, 3), 0.0, 0.0);
        assert!(a.iter().all(|z| (z - Complex64::new(1.0, 0.0)).norm() < 1e-15));
        // n_y = 1 isolates a_z: θ = π/2 gives phase e^{-jπ m}.
        let az = steering_vector(&upa(1, 2), PI / 2.0, 0.3);
        assert!((az[0] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        assert!((az[1] - Complex64::new(-1.0, 0.0)).norm() < 1e-12);
        let a = steering_vector(&upa(8, 8), 0.7, -1.2);
        assert!(a.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn single_index_first_row_is_ones_and_rows_repeat() {
        let a = single_index_basis(&upa(2, 2));
        assert!(a.row(0).iter().all(|z| (z - Complex64::new(1.0, 0.0)).norm() < 1e-12));
        // m = 1 → (m′, m″) = (1, 1) and m = 4 → (2, 0): equal m′ + m″ gives identical rows.
        assert!((a.row(0) - a.row(3)).iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn dft_kronecker_is_orthogonal() {
        let arr = upa(8, 8);
        let b = steering_basis(&arr, &build_angle_grid(&arr), BasisMode::DftKronecker).unwrap();
        assert!(b.orthogonality_error() < 1e-9);
        assert!(b.matrix.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
        let lit = steering_basis(&arr, &build_angle_grid(&arr), BasisMode::SteeringLiteral).unwrap();
        assert!(lit.matrix.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn basis_rejects_grid_mismatch() {
        let grid = build_angle_grid(&upa(2, 2));
        assert!(steering_basis(&upa(4, 4), &grid, BasisMode::DftKronecker).is_err());
    }

    #[test]
    fn cscm_cases() {
        let arr = upa(8, 8);
        let basis = steering_basis(&arr, &build_angle_grid(&arr), BasisMode::DftKronecker).unwrap();
        let mut s = vec![0.0; 64];
        s[5] = 2.0;
        let omega = cscm_from_pas(&basis, &PowerAngularSpectrum::new(1.0, s.clone()).unwrap()).unwrap();
        assert!((omega.trace() - 128.0).abs() < 1e-9 * 128.0);
        let a5 = basis.matrix.column(5);
        let outer = &a5 * a5.adjoint() * Complex64::new(2.0, 0.0);
        assert!((omega.matrix.clone() - outer).iter().all(|z| z.norm() < 1e-9));
        let zero = cscm_from_pas(&basis, &PowerAngularSpectrum::new(1.0, vec![0.0; 64]).unwrap()).unwrap();
        assert!(zero.matrix.iter().all(|z| z.norm() == 0.0));
        assert!(matches!(
            cscm_from_pas(&basis, &PowerAngularSpectrum { large_scale_gain: 1.0, powers: vec![-1.0; 64] }),
            Err(Error::NegativePower { .. })
        ));
    }

    #[test]
    fn extract_cpas_cases() {
        let arr = upa(4, 4);
        let grid = build_angle_grid(&arr);
        let basis = steering_basis(&arr, &grid, BasisMode::DftKronecker).unwrap();
        let eye = CovarianceMatrix { matrix: DMatrix::identity(16, 16) };
        let s = extract_cpas(&basis, &eye).unwrap();
        assert!(s.iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-12));
        let zero = CovarianceMatrix { matrix: DMatrix::zeros(16, 16) };
        assert!(extract_cpas(&basis, &zero).unwrap().iter().all(|&v| v == 0.0));
        let lit = steering_basis(&arr, &grid, BasisMode::SteeringLiteral).unwrap();
        assert!(matches!(extract_cpas(&lit, &eye), Err(Error::NonOrthogonalBasis)));
    }

    #[test]
    fn single_sample_covariance_is_rank_one_outer_product() {
        let h = DVector::from_vec(vec![Complex64::new(1.0, 2.0), Complex64::new(-0.5, 0.25)]);
        let set = ChannelSampleSet { samples: vec![h.clone()], gains: None };
        let cov = sample_covariance(&set).unwrap();
        let want = &h * h.adjoint();
        assert!((cov.matrix - want).iter().all(|z| z.norm() < 1e-15));
        assert!(sample_covariance(&ChannelSampleSet { samples: vec![], gains: None }).is_err());
    }

    #[test]
    fn zero_pas_gives_zero_channels() {
        let arr = upa(2, 2);
        let basis = steering_basis(&arr, &build_angle_grid(&arr), BasisMode::DftKronecker).unwrap();
        let set = sample_channels(&basis, &PowerAngularSpectrum::new(1.0, vec![0.0; 4]).unwrap(), 5, 3).unwrap();
        assert!(set.samples.iter().all(|h| h.iter().all(|z| z.norm() == 0.0)));
    }

    #[test]
    fn cluster_config_validation() {
        let bad = ClusterConfig { num_clusters: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ClusterConfig { angular_spread: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
