//! Haar wavelet transform as a stride-2 depthwise filter bank, and WTConv.
//!
//! Subbands are kept stacked in one tensor with `4C` channels, band-major:
//! channel `b·C + c` holds band `b ∈ {LL, LH, HL, HH}` of input channel `c`.
//! Filtering is cross-correlation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{depthwise_backward, depthwise_forward, normal_fill, ParamLayout, ParamRange};
use crate::profile;
use crate::tensor::{Scalar, Tensor};

pub const LL: usize = 0;
pub const LH: usize = 1;
pub const HL: usize = 2;
pub const HH: usize = 3;

/// Four 2×2 analysis filters indexed `[band][dy][dx]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    pub filters: [[[f64; 2]; 2]; 4],
}

impl FilterBank {
    pub fn haar() -> Self {
        FilterBank {
            filters: [
                [[0.5, 0.5], [0.5, 0.5]],
                [[0.5, -0.5], [0.5, -0.5]],
                [[0.5, 0.5], [-0.5, -0.5]],
                [[0.5, -0.5], [-0.5, 0.5]],
            ],
        }
    }

    /// Largest deviation of the filters' Gram matrix from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                let ip: f64 = (0..4).map(|t| self.filters[a][t / 2][t % 2] * self.filters[b][t / 2][t % 2]).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((ip - target).abs());
            }
        }
        worst
    }

    pub fn validate(&self) -> Result<()> {
        if self.orthonormality_error() > 1e-12 {
            return Err(Error::Config("wavelet filter bank is not orthonormal".into()));
        }
        Ok(())
    }
}

impl Default for FilterBank {
    fn default() -> Self {
        FilterBank::haar()
    }
}

/// One decomposition level: low band plus the three detail bands.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletComponents<T: Scalar> {
    pub level: usize,
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
}

impl<T: Scalar> WaveletComponents<T> {
    pub fn from_stacked(level: usize, s: &Tensor<T>) -> Self {
        let c = s.channels() / 4;
        let mut parts = s.split_channels(&[c, c, c, c]).into_iter();
        let mut next = || parts.next().expect("four bands");
        WaveletComponents { level, ll: next(), lh: next(), hl: next(), hh: next() }
    }

    pub fn stacked(&self) -> Result<Tensor<T>> {
        Tensor::concat_channels(&[&self.ll, &self.lh, &self.hl, &self.hh])
    }
}

/// MACs of one analysis or synthesis pass over an H×W×C signal.
pub fn transform_macs(h: usize, w: usize, c: usize) -> u64 {
    4 * (h * w * c) as u64
}

/// H×W×C → (H/2)×(W/2)×4C stacked subbands.
pub fn wt_stacked<T: Scalar>(x: &Tensor<T>, bank: &FilterBank) -> Result<Tensor<T>> {
    let (h, w, c) = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("wavelet transform needs even sizes, got {h}x{w}")));
    }
    profile::add_macs(transform_macs(h, w, c));
    let f: Vec<[T; 4]> = bank
        .filters
        .iter()
        .map(|b| [T::lit(b[0][0]), T::lit(b[0][1]), T::lit(b[1][0]), T::lit(b[1][1])])
        .collect();
    let mut out = Tensor::zeros(h / 2, w / 2, 4 * c);
    for i in 0..h / 2 {
        for j in 0..w / 2 {
            let (p00, p01) = (x.fiber(2 * i, 2 * j), x.fiber(2 * i, 2 * j + 1));
            let (p10, p11) = (x.fiber(2 * i + 1, 2 * j), x.fiber(2 * i + 1, 2 * j + 1));
            let dst = out.fiber_mut(i, j);
            for (b, fb) in f.iter().enumerate() {
                for ch in 0..c {
                    dst[b * c + ch] = fb[0] * p00[ch] + fb[1] * p01[ch] + fb[2] * p10[ch] + fb[3] * p11[ch];
                }
            }
        }
    }
    Ok(out)
}

/// Transposed filter bank: (H/2)×(W/2)×4C → H×W×C.
pub fn iwt_stacked<T: Scalar>(s: &Tensor<T>, bank: &FilterBank) -> Result<Tensor<T>> {
    let (h2, w2, c4) = s.shape();
    if c4 % 4 != 0 {
        return Err(Error::Shape(format!("stacked subbands need 4C channels, got {c4}")));
    }
    let c = c4 / 4;
    profile::add_macs(transform_macs(2 * h2, 2 * w2, c));
    let mut out = Tensor::zeros(2 * h2, 2 * w2, c);
    for i in 0..h2 {
        for j in 0..w2 {
            let src = s.fiber(i, j);
            for dy in 0..2 {
                for dx in 0..2 {
                    let taps: [T; 4] = std::array::from_fn(|b| T::lit(bank.filters[b][dy][dx]));
                    let dst = out.fiber_mut(2 * i + dy, 2 * j + dx);
                    for ch in 0..c {
                        dst[ch] = taps[0] * src[ch]
                            + taps[1] * src[c + ch]
                            + taps[2] * src[2 * c + ch]
                            + taps[3] * src[3 * c + ch];
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn wt<T: Scalar>(x: &Tensor<T>, bank: &FilterBank) -> Result<WaveletComponents<T>> {
    Ok(WaveletComponents::from_stacked(1, &wt_stacked(x, bank)?))
}

pub fn iwt<T: Scalar>(comp: &WaveletComponents<T>, bank: &FilterBank) -> Result<Tensor<T>> {
    let shape = comp.ll.shape();
    for t in [&comp.lh, &comp.hl, &comp.hh] {
        if t.shape() != shape {
            return Err(Error::Shape(format!("subband shapes {:?} vs {:?}", shape, t.shape())));
        }
    }
    iwt_stacked(&comp.stacked()?, bank)
}

/// Recursive decomposition of the low band; entry `i − 1` holds level `i`.
pub fn wt_cascade<T: Scalar>(x: &Tensor<T>, levels: usize, bank: &FilterBank) -> Result<Vec<WaveletComponents<T>>> {
    check_levels(x.height(), x.width(), levels)?;
    let mut out = Vec::with_capacity(levels);
    let mut cur = x.clone();
    for level in 1..=levels {
        let mut comp = wt(&cur, bank)?;
        comp.level = level;
        cur = comp.ll.clone();
        out.push(comp);
    }
    Ok(out)
}

fn check_levels(h: usize, w: usize, levels: usize) -> Result<()> {
    let f = 1usize << levels;
    if h % f != 0 || w % f != 0 {
        return Err(Error::Shape(format!("{h}x{w} is not divisible by 2^{levels}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WtConvConfig {
    pub channels: usize,
    pub kernel: usize,
    pub levels: usize,
    /// One scale per subband per level instead of one per level.
    pub per_subband_scales: bool,
}

/// Depthwise convolution in the wavelet domain.
///
/// The output is `ζ₀·(W₀ ⋆ x)` plus the inverse-transformed sum of the scaled,
/// convolved subbands of every cascade level, merged from the coarsest level up.
#[derive(Debug, Clone, PartialEq)]
pub struct WtConv {
    pub cfg: WtConvConfig,
    pub bank: FilterBank,
    pub base: ParamRange,
    pub level_kernels: Vec<ParamRange>,
    pub scales: ParamRange,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct WtConvCache<T: Scalar> {
    x: Tensor<T>,
    base_conv: Tensor<T>,
    /// Per level: stacked subbands fed to the level convolution, and its raw output.
    subbands: Vec<Tensor<T>>,
    convolved: Vec<Tensor<T>>,
}

impl WtConv {
    pub fn new(layout: &mut ParamLayout, name: &str, cfg: WtConvConfig) -> Self {
        assert!(cfg.kernel % 2 == 1, "kernel size must be odd");
        let (c, k) = (cfg.channels, cfg.kernel);
        let base = layout.add(format!("{name}.base"), &[k, k, c]);
        let level_kernels = (1..=cfg.levels).map(|i| layout.add(format!("{name}.level{i}"), &[k, k, 4 * c])).collect();
        let n_scales = if cfg.per_subband_scales { 1 + 4 * cfg.levels } else { 1 + cfg.levels };
        let scales = layout.add(format!("{name}.scales"), &[n_scales]);
        WtConv { cfg, bank: FilterBank::haar(), base, level_kernels, scales }
    }

    pub fn param_count(&self) -> usize {
        self.base.len + self.level_kernels.iter().map(|r| r.len).sum::<usize>() + self.scales.len
    }

    /// Identity tap at the kernel centre plus N(0, noise²), unit scales.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, p: &mut [T], noise: f64, rng: &mut R) {
        let (k, c) = (self.cfg.kernel, self.cfg.channels);
        let centre = (k / 2) * k + k / 2;
        for (range, width) in std::iter::once((self.base, c)).chain(self.level_kernels.iter().map(|&r| (r, 4 * c))) {
            let w = range.of_mut(p);
            if noise > 0.0 {
                normal_fill(w, noise, rng);
            } else {
                w.fill(T::zero());
            }
            for v in &mut w[centre * width..(centre + 1) * width] {
                *v += T::one();
            }
        }
        self.scales.of_mut(p).fill(T::one());
    }

    /// Scale for channel `ch` of level `level` (0 = base path).
    fn scale_of<T: Scalar>(&self, p: &[T], level: usize, ch: usize) -> T {
        let s = self.scales.of(p);
        if level == 0 || !self.cfg.per_subband_scales {
            s[level]
        } else {
            s[1 + 4 * (level - 1) + ch / self.cfg.channels]
        }
    }

    fn scaled<T: Scalar>(&self, p: &[T], level: usize, z: &Tensor<T>) -> Tensor<T> {
        profile::add_macs(z.len() as u64);
        let c = z.channels();
        let mut out = z.clone();
        for px in out.data_mut().chunks_exact_mut(c) {
            for (ch, v) in px.iter_mut().enumerate() {
                *v *= self.scale_of(p, level, ch);
            }
        }
        out
    }

    pub fn check_input(&self, h: usize, w: usize, c: usize) -> Result<()> {
        if c != self.cfg.channels {
            return Err(Error::Shape(format!("WTConv expects {} channels, got {c}", self.cfg.channels)));
        }
        check_levels(h, w, self.cfg.levels)
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &Tensor<T>) -> Result<(Tensor<T>, WtConvCache<T>)> {
        let (h, w, c) = x.shape();
        self.check_input(h, w, c)?;
        let k = self.cfg.kernel;
        let base_conv = depthwise_forward(x, self.base.of(p), k);
        let mut out = self.scaled(p, 0, &base_conv);

        let mut subbands = Vec::with_capacity(self.cfg.levels);
        let mut convolved = Vec::with_capacity(self.cfg.levels);
        let mut low = x.clone();
        for (i, kr) in self.level_kernels.iter().enumerate() {
            let s = wt_stacked(&low, &self.bank)?;
            low = s.split_channels(&[c, 3 * c]).swap_remove(0);
            convolved.push(depthwise_forward(&s, kr.of(p), k));
            subbands.push(s);
            debug_assert_eq!(subbands.len(), i + 1);
        }

        // Merge from the coarsest level: the running sum joins the LL band.
        let mut merged: Option<Tensor<T>> = None;
        for level in (1..=self.cfg.levels).rev() {
            let mut zt = self.scaled(p, level, &convolved[level - 1]);
            if let Some(m) = merged.take() {
                add_into_band(&mut zt, &m, LL);
            }
            merged = Some(iwt_stacked(&zt, &self.bank)?);
        }
        if let Some(m) = merged {
            out.add_assign(&m);
        }
        Ok((out, WtConvCache { x: x.clone(), base_conv, subbands, convolved }))
    }

    /// Accumulates parameter gradients into `g`; returns the input gradient.
    pub fn backward<T: Scalar>(&self, p: &[T], cache: &WtConvCache<T>, gy: &Tensor<T>, g: &mut [T]) -> Result<Tensor<T>> {
        let k = self.cfg.kernel;
        let c = self.cfg.channels;

        self.scales.of_mut(g)[0] += cache.base_conv.dot(gy);
        let g_base = gy.scale(self.scale_of(p, 0, 0));
        let mut gx = depthwise_backward(&cache.x, self.base.of(p), k, &g_base, self.base.of_mut(g));

        // Gradient w.r.t. each level's scaled conv output: analysis of the merged gradient.
        let mut d_subbands = Vec::with_capacity(self.cfg.levels);
        let mut carry = gy.clone();
        for level in 1..=self.cfg.levels {
            let dzt = wt_stacked(&carry, &self.bank)?;
            carry = dzt.split_channels(&[c, 3 * c]).swap_remove(0);
            let zc = &cache.convolved[level - 1];
            let mut dzc = dzt.clone();
            {
                let scales = self.scales.of_mut(g);
                for ((px_g, px_z), px_d) in
                    dzt.data().chunks_exact(4 * c).zip(zc.data().chunks_exact(4 * c)).zip(dzc.data_mut().chunks_exact_mut(4 * c))
                {
                    for ch in 0..4 * c {
                        let slot = if self.cfg.per_subband_scales { 1 + 4 * (level - 1) + ch / c } else { level };
                        scales[slot] += px_g[ch] * px_z[ch];
                        px_d[ch] *= self.scale_of(p, level, ch);
                    }
                }
            }
            let kr = self.level_kernels[level - 1];
            d_subbands.push(depthwise_backward(&cache.subbands[level - 1], kr.of(p), k, &dzc, kr.of_mut(g)));
        }

        // Back through the analysis cascade, coarsest first.
        let mut d_low: Option<Tensor<T>> = None;
        for level in (1..=self.cfg.levels).rev() {
            let mut ds = d_subbands[level - 1].clone();
            if let Some(dl) = d_low.take() {
                add_into_band(&mut ds, &dl, LL);
            }
            d_low = Some(iwt_stacked(&ds, &self.bank)?);
        }
        if let Some(dl) = d_low {
            gx.add_assign(&dl);
        }
        Ok(gx)
    }

    /// MACs of one forward pass at H×W: convolutions, transforms, and scalings.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (c, k, l) = (self.cfg.channels, self.cfg.kernel, self.cfg.levels);
        let (conv, transforms) = wtconv_macs(c, h, w, k, l);
        let scaling: u64 = (h * w * c) as u64 + (1..=l).map(|i| (4 * c * (h >> i) * (w >> i)) as u64).sum::<u64>();
        conv + transforms + scaling
    }
}

/// Adds `src` (C channels) into band `band` of stacked subbands `dst` (4C channels).
fn add_into_band<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, band: usize) {
    let c = src.channels();
    for (d, s) in dst.data_mut().chunks_exact_mut(4 * c).zip(src.data().chunks_exact(c)) {
        for ch in 0..c {
            d[band * c + ch] += s[ch];
        }
    }
}

/// (convolution MACs, WT + IWT MACs) of WTConv with `levels` levels on H×W×C.
pub fn wtconv_macs(c: usize, h: usize, w: usize, k: usize, levels: usize) -> (u64, u64) {
    let hw = (h * w) as u64;
    let (c, k2) = (c as u64, (k * k) as u64);
    let conv = c * k2 * (hw + (1..=levels).map(|i| 4 * hw / (1u64 << (2 * i))).sum::<u64>());
    let transforms = 2 * 4 * c * (0..levels).map(|i| hw / (1u64 << (2 * i))).sum::<u64>();
    (conv, transforms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn layer(c: usize, k: usize, levels: usize, per_subband: bool) -> (WtConv, usize) {
        let mut layout = ParamLayout::default();
        let conv = WtConv::new(&mut layout, "wt", WtConvConfig { channels: c, kernel: k, levels, per_subband_scales: per_subband });
        (conv, layout.len())
    }

    #[test]
    fn haar_block_example() {
        let x = Tensor::<f64>::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = wt(&x, &FilterBank::haar()).unwrap();
        assert_eq!((c.ll.data()[0], c.lh.data()[0], c.hl.data()[0], c.hh.data()[0]), (5.0, -1.0, -2.0, 0.0));
        assert_eq!(FilterBank::haar().orthonormality_error(), 0.0);
    }

    #[test]
    fn constant_maps_to_scaled_low_band() {
        let x = Tensor::<f64>::filled(8, 8, 2, 1.5);
        let levels = wt_cascade(&x, 3, &FilterBank::haar()).unwrap();
        for comp in &levels {
            let expect = 1.5 * 2f64.powi(comp.level as i32);
            assert!(comp.ll.data().iter().all(|&v| (v - expect).abs() < 1e-12));
            assert_eq!(comp.lh.max_abs() + comp.hl.max_abs() + comp.hh.max_abs(), 0.0);
        }
        assert_eq!(levels.iter().map(|c| c.ll.height()).collect::<Vec<_>>(), vec![4, 2, 1]);
        let back = iwt(&levels[0], &FilterBank::haar()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
        assert!(wt(&Tensor::<f64>::zeros(3, 4, 1), &FilterBank::haar()).is_err());
    }

    #[test]
    fn identity_kernels_one_level_double_input() {
        let (conv, n) = layer(2, 3, 1, false);
        let mut p = vec![0.0f64; n];
        conv.init(&mut p, 0.0, &mut rng(0));
        let x = Tensor::random_uniform(8, 8, 2, -1.0, 1.0, &mut rng(1));
        let (y, _) = conv.forward(&p, &x).unwrap();
        assert!(y.max_abs_diff(&x.scale(2.0)) < 1e-12);
    }

    #[test]
    fn identity_kernels_two_levels_add_block_mean() {
        let (conv, n) = layer(1, 3, 2, false);
        let mut p = vec![0.0f64; n];
        conv.init(&mut p, 0.0, &mut rng(0));
        let x = Tensor::random_uniform(8, 8, 1, -1.0, 1.0, &mut rng(2));
        let (y, _) = conv.forward(&p, &x).unwrap();
        let expect = Tensor::from_fn(8, 8, 1, |i, j, _| {
            let (bi, bj) = (i / 2 * 2, j / 2 * 2);
            let mean = (x.at(bi, bj, 0) + x.at(bi + 1, bj, 0) + x.at(bi, bj + 1, 0) + x.at(bi + 1, bj + 1, 0)) / 4.0;
            2.0 * x.at(i, j, 0) + mean
        });
        assert!(y.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn zero_kernels_give_zero() {
        let (conv, n) = layer(3, 5, 2, true);
        let p = vec![0.0f64; n];
        let x = Tensor::random_uniform(8, 8, 3, -1.0, 1.0, &mut rng(3));
        assert_eq!(conv.forward(&p, &x).unwrap().0.max_abs(), 0.0);
    }

    #[test]
    fn parameter_count_grows_linearly_in_levels() {
        for l in 1..=4 {
            let (conv, n) = layer(1, 5, l, false);
            assert_eq!(n, 25 + 100 * l + l + 1);
            assert_eq!(conv.param_count(), n);
        }
        assert_eq!(layer(1, 5, 3, false).1 - 25 - 4, 300);
    }

    #[test]
    fn backward_is_adjoint_in_input() {
        let (conv, n) = layer(2, 3, 2, true);
        let mut p = vec![0.0f64; n];
        conv.init(&mut p, 0.3, &mut rng(4));
        for (i, v) in conv.scales.of_mut(&mut p).iter_mut().enumerate() {
            *v = 0.5 + 0.1 * i as f64;
        }
        let x = Tensor::random_uniform(8, 8, 2, -1.0, 1.0, &mut rng(5));
        let gy = Tensor::random_uniform(8, 8, 2, -1.0, 1.0, &mut rng(6));
        let (y, cache) = conv.forward(&p, &x).unwrap();
        let mut g = vec![0.0; n];
        let gx = conv.backward(&p, &cache, &gy, &mut g).unwrap();
        assert!((y.dot(&gy) - x.dot(&gx)).abs() < 1e-10);
    }

    #[test]
    fn counted_macs_match_formula() {
        let (conv, n) = layer(3, 3, 2, false);
        let mut p = vec![0.0f32; n];
        conv.init(&mut p, 0.01, &mut rng(7));
        let x = Tensor::random_uniform(16, 8, 3, -1.0, 1.0, &mut rng(8));
        let (_, macs) = profile::count_macs(|| conv.forward(&p, &x).unwrap());
        assert_eq!(macs, conv.macs(16, 8));
    }
}
