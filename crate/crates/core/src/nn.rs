//! Differentiable building blocks with explicit backward passes.
//!
//! Parameters live in one flat slice described by a [`ParamLayout`]; layers
//! read their weights from that slice and accumulate gradients into a slice of
//! the same length. All spatial ops use stride 1 and zero "same" padding.
//! Convolution weights are stored `[ky][kx][cin][cout]`, depthwise weights
//! `[ky][kx][c]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile;
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

/// Slice of the flat parameter vector owned by one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRange {
    pub offset: usize,
    pub len: usize,
}

impl ParamRange {
    pub fn of<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.offset..self.offset + self.len]
    }

    pub fn of_mut<'a, T>(&self, p: &'a mut [T]) -> &'a mut [T] {
        &mut p[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
}

impl ParamLayout {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamRange {
        let offset = self.len();
        let len = shape.iter().product();
        self.entries.push(ParamEntry { name: name.into(), shape: shape.to_vec(), offset, len });
        ParamRange { offset, len }
    }

    pub fn len(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn find(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = T::lit(LEAKY_SLOPE);
    x.map(|v| if v > T::zero() { v } else { s * v })
}

/// Gradient through leaky ReLU given the forward input.
pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let s = T::lit(LEAKY_SLOPE);
    x.zip_map(gy, |v, g| if v > T::zero() { g } else { s * g })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    x.zip_map(gy, |v, g| if v > T::zero() { g } else { T::zero() })
}

/// Row-major `(H·W) × (k²·C)` patch matrix for zero same-padding.
fn im2col<T: Scalar>(x: &Tensor<T>, k: usize) -> Vec<T> {
    let (h, w, c) = x.shape();
    let p = (k / 2) as isize;
    let kk = k * k * c;
    let mut cols = vec![T::zero(); h * w * kk];
    for y in 0..h {
        for xi in 0..w {
            let row = &mut cols[(y * w + xi) * kk..(y * w + xi + 1) * kk];
            for ky in 0..k {
                let sy = y as isize + ky as isize - p;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xi as isize + kx as isize - p;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (ky * k + kx) * c;
                    row[dst..dst + c].copy_from_slice(x.fiber(sy as usize, sx as usize));
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], h: usize, w: usize, c: usize, k: usize) -> Tensor<T> {
    let p = (k / 2) as isize;
    let kk = k * k * c;
    let mut x = Tensor::zeros(h, w, c);
    for y in 0..h {
        for xi in 0..w {
            let row = &cols[(y * w + xi) * kk..(y * w + xi + 1) * kk];
            for ky in 0..k {
                let sy = y as isize + ky as isize - p;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xi as isize + kx as isize - p;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (ky * k + kx) * c;
                    for (d, &v) in x.fiber_mut(sy as usize, sx as usize).iter_mut().zip(&row[src..src + c]) {
                        *d += v;
                    }
                }
            }
        }
    }
    x
}

/// Dense k×k convolution (odd k) producing `cout` channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub weight: ParamRange,
    pub bias: ParamRange,
}

impl Conv2d {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let weight = layout.add(format!("{name}.weight"), &[k, k, cin, cout]);
        let bias = layout.add(format!("{name}.bias"), &[cout]);
        Conv2d { cin, cout, k, weight, bias }
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (h * w * self.k * self.k * self.cin * self.cout) as u64
    }

    /// Uniform(±1/√fan_in) for weights and bias.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, p: &mut [T], rng: &mut R) {
        let bound = 1.0 / ((self.k * self.k * self.cin) as f64).sqrt();
        for r in [self.weight, self.bias] {
            for v in r.of_mut(p) {
                *v = T::lit(rng.random_range(-bound..bound));
            }
        }
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w, c) = x.shape();
        if c != self.cin {
            return Err(Error::Shape(format!("conv expects {} channels, got {c}", self.cin)));
        }
        profile::add_macs(self.macs(h, w));
        let b = self.bias.of(p);
        let mut out = Vec::with_capacity(h * w * self.cout);
        for _ in 0..h * w {
            out.extend_from_slice(b);
        }
        let kk = self.k * self.k * c;
        if self.k == 1 {
            T::gemm(h * w, kk, self.cout, x.data(), false, self.weight.of(p), false, T::one(), &mut out);
        } else {
            let cols = im2col(x, self.k);
            T::gemm(h * w, kk, self.cout, &cols, false, self.weight.of(p), false, T::one(), &mut out);
        }
        Tensor::from_vec(h, w, self.cout, out)
    }

    /// Accumulates weight/bias gradients into `g` and returns the input gradient.
    pub fn backward<T: Scalar>(&self, p: &[T], x: &Tensor<T>, gy: &Tensor<T>, g: &mut [T]) -> Tensor<T> {
        let (h, w, c) = x.shape();
        let kk = self.k * self.k * c;
        let hw = h * w;
        {
            let gb = self.bias.of_mut(g);
            for px in gy.data().chunks_exact(self.cout) {
                for (b, &v) in gb.iter_mut().zip(px) {
                    *b += v;
                }
            }
        }
        let mut gcols = vec![T::zero(); hw * kk];
        T::gemm(hw, self.cout, kk, gy.data(), false, self.weight.of(p), true, T::zero(), &mut gcols);
        if self.k == 1 {
            T::gemm(kk, hw, self.cout, x.data(), true, gy.data(), false, T::one(), self.weight.of_mut(g));
            Tensor::from_vec(h, w, c, gcols).expect("1x1 gradient shape")
        } else {
            let cols = im2col(x, self.k);
            T::gemm(kk, hw, self.cout, &cols, true, gy.data(), false, T::one(), self.weight.of_mut(g));
            col2im(&gcols, h, w, c, self.k)
        }
    }
}

/// Depthwise k×k convolution without bias; one kernel per channel.
pub fn depthwise_forward<T: Scalar>(x: &Tensor<T>, w: &[T], k: usize) -> Tensor<T> {
    let (h, wd, c) = x.shape();
    assert_eq!(w.len(), k * k * c, "depthwise weight length");
    profile::add_macs((h * wd * c * k * k) as u64);
    let p = (k / 2) as isize;
    let mut out = Tensor::zeros(h, wd, c);
    for y in 0..h {
        for xi in 0..wd {
            let o = out.index(y, xi, 0);
            for ky in 0..k {
                let sy = y as isize + ky as isize - p;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xi as isize + kx as isize - p;
                    if sx < 0 || sx >= wd as isize {
                        continue;
                    }
                    let src = x.fiber(sy as usize, sx as usize);
                    let wk = &w[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                    let dst = &mut out.data_mut()[o..o + c];
                    for ((d, &v), &kw) in dst.iter_mut().zip(src).zip(wk) {
                        *d += v * kw;
                    }
                }
            }
        }
    }
    out
}

/// Returns the input gradient and accumulates the kernel gradient into `gw`.
pub fn depthwise_backward<T: Scalar>(x: &Tensor<T>, w: &[T], k: usize, gy: &Tensor<T>, gw: &mut [T]) -> Tensor<T> {
    let (h, wd, c) = x.shape();
    let p = (k / 2) as isize;
    let mut gx = Tensor::zeros(h, wd, c);
    for y in 0..h {
        for xi in 0..wd {
            let go = gy.fiber(y, xi);
            for ky in 0..k {
                let sy = y as isize + ky as isize - p;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xi as isize + kx as isize - p;
                    if sx < 0 || sx >= wd as isize {
                        continue;
                    }
                    let base = (ky * k + kx) * c;
                    let src = x.fiber(sy as usize, sx as usize);
                    for ch in 0..c {
                        gw[base + ch] += go[ch] * src[ch];
                    }
                    let dst = gx.fiber_mut(sy as usize, sx as usize);
                    for ch in 0..c {
                        dst[ch] += go[ch] * w[base + ch];
                    }
                }
            }
        }
    }
    gx
}

/// Per-channel normalization over the spatial axes with affine scale/shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceNorm {
    pub c: usize,
    pub gamma: ParamRange,
    pub beta: ParamRange,
}

/// Per-channel mean and inverse standard deviation saved for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T: Scalar> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

impl InstanceNorm {
    pub fn new(layout: &mut ParamLayout, name: &str, c: usize) -> Self {
        let gamma = layout.add(format!("{name}.gamma"), &[c]);
        let beta = layout.add(format!("{name}.beta"), &[c]);
        InstanceNorm { c, gamma, beta }
    }

    pub fn init<T: Scalar>(&self, p: &mut [T]) {
        self.gamma.of_mut(p).fill(T::one());
        self.beta.of_mut(p).fill(T::zero());
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        let (h, w, c) = x.shape();
        let n = T::lit((h * w) as f64);
        let mut mean = vec![T::zero(); c];
        for px in x.data().chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(px) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); c];
        for px in x.data().chunks_exact(c) {
            for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let eps = T::lit(NORM_EPS);
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s / n + eps).sqrt()).collect();
        let mut xhat = x.clone();
        for px in xhat.data_mut().chunks_exact_mut(c) {
            for ch in 0..c {
                px[ch] = (px[ch] - mean[ch]) * inv_std[ch];
            }
        }
        let (g, b) = (self.gamma.of(p), self.beta.of(p));
        let mut y = xhat.clone();
        for px in y.data_mut().chunks_exact_mut(c) {
            for ch in 0..c {
                px[ch] = px[ch] * g[ch] + b[ch];
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward<T: Scalar>(&self, p: &[T], cache: &NormCache<T>, gy: &Tensor<T>, grads: &mut [T]) -> Tensor<T> {
        let (h, w, c) = gy.shape();
        let n = T::lit((h * w) as f64);
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for (g, xh) in gy.data().chunks_exact(c).zip(cache.xhat.data().chunks_exact(c)) {
            for ch in 0..c {
                sum_g[ch] += g[ch];
                sum_gx[ch] += g[ch] * xh[ch];
            }
        }
        for ch in 0..c {
            self.gamma.of_mut(grads)[ch] += sum_gx[ch];
            self.beta.of_mut(grads)[ch] += sum_g[ch];
        }
        let gamma = self.gamma.of(p);
        let mut gx = Tensor::zeros(h, w, c);
        for ((o, g), xh) in gx.data_mut().chunks_exact_mut(c).zip(gy.data().chunks_exact(c)).zip(cache.xhat.data().chunks_exact(c)) {
            for ch in 0..c {
                let k = gamma[ch] * cache.inv_std[ch] / n;
                o[ch] = k * (n * g[ch] - sum_g[ch] - xh[ch] * sum_gx[ch]);
            }
        }
        gx
    }
}

/// Linear-interpolation taps for doubling a length-`n` axis (half-pixel centres).
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// MACs charged for one ×2 bilinear upsampling of an H×W×C input.
pub fn bilinear_macs(h: usize, w: usize, c: usize) -> u64 {
    12 * (h * w * c) as u64
}

/// ×2 bilinear upsampling, separable, edge-clamped.
pub fn bilinear_up2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = x.shape();
    profile::add_macs(bilinear_macs(h, w, c));
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    let mut rows = Tensor::zeros(2 * h, w, c);
    for (o, &(i0, i1, f)) in ty.iter().enumerate() {
        let (a, b) = (T::lit(1.0 - f), T::lit(f));
        for xi in 0..w {
            let (s0, s1) = (x.fiber(i0, xi), x.fiber(i1, xi));
            let d = rows.fiber_mut(o, xi);
            for ch in 0..c {
                d[ch] = a * s0[ch] + b * s1[ch];
            }
        }
    }
    let mut out = Tensor::zeros(2 * h, 2 * w, c);
    for y in 0..2 * h {
        for (o, &(j0, j1, f)) in tx.iter().enumerate() {
            let (a, b) = (T::lit(1.0 - f), T::lit(f));
            let (s0, s1) = (rows.fiber(y, j0).to_vec(), rows.fiber(y, j1));
            let d = out.fiber_mut(y, o);
            for ch in 0..c {
                d[ch] = a * s0[ch] + b * s1[ch];
            }
        }
    }
    out
}

pub fn bilinear_up2_backward<T: Scalar>(gy: &Tensor<T>) -> Tensor<T> {
    let (h2, w2, c) = gy.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    let mut rows = Tensor::zeros(h2, w, c);
    for y in 0..h2 {
        for (o, &(j0, j1, f)) in tx.iter().enumerate() {
            let (a, b) = (T::lit(1.0 - f), T::lit(f));
            let g = gy.fiber(y, o).to_vec();
            for ch in 0..c {
                *rows.at_mut(y, j0, ch) += a * g[ch];
                *rows.at_mut(y, j1, ch) += b * g[ch];
            }
        }
    }
    let mut gx = Tensor::zeros(h, w, c);
    for (o, &(i0, i1, f)) in ty.iter().enumerate() {
        let (a, b) = (T::lit(1.0 - f), T::lit(f));
        for xi in 0..w {
            for ch in 0..c {
                let g = rows.at(o, xi, ch);
                *gx.at_mut(i0, xi, ch) += a * g;
                *gx.at_mut(i1, xi, ch) += b * g;
            }
        }
    }
    gx
}

/// Element-wise product, charged one MAC per element.
pub fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    profile::add_macs(a.len() as u64);
    a.hadamard(b)
}

/// Samples of N(0, std²) as the crate's scalar type.
pub fn normal_fill<T: Scalar, R: Rng + ?Sized>(dst: &mut [T], std: f64, rng: &mut R) {
    let d = Normal::new(0.0, std).expect("finite std");
    for v in dst {
        *v = T::lit(d.sample(rng));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    /// Direct nested-loop convolution used as an oracle.
    fn conv_naive(x: &Tensor<f64>, w: &[f64], b: &[f64], k: usize, cout: usize) -> Tensor<f64> {
        let (h, wd, cin) = x.shape();
        let p = (k / 2) as isize;
        Tensor::from_fn(h, wd, cout, |y, xi, co| {
            let mut s = b[co];
            for ky in 0..k {
                for kx in 0..k {
                    let (sy, sx) = (y as isize + ky as isize - p, xi as isize + kx as isize - p);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                        continue;
                    }
                    for ci in 0..cin {
                        s += x.at(sy as usize, sx as usize, ci) * w[((ky * k + kx) * cin + ci) * cout + co];
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv_matches_naive_and_adjoint() {
        let mut r = rng();
        for k in [1, 3] {
            let mut layout = ParamLayout::default();
            let conv = Conv2d::new(&mut layout, "c", 3, 5, k);
            let mut p = vec![0.0f64; layout.len()];
            conv.init(&mut p, &mut r);
            let x = Tensor::random_uniform(6, 5, 3, -1.0, 1.0, &mut r);
            let y = conv.forward(&p, &x).unwrap();
            let oracle = conv_naive(&x, conv.weight.of(&p), conv.bias.of(&p), k, 5);
            assert!(y.max_abs_diff(&oracle) < 1e-12);
            // <conv(x) - b, gy> = <x, conv^T gy>
            let gy = Tensor::random_uniform(6, 5, 5, -1.0, 1.0, &mut r);
            let mut g = vec![0.0; layout.len()];
            let gx = conv.backward(&p, &x, &gy, &mut g);
            let mut nobias = p.clone();
            conv.bias.of_mut(&mut nobias).fill(0.0);
            let lhs = conv.forward(&nobias, &x).unwrap().dot(&gy);
            assert!((lhs - x.dot(&gx)).abs() < 1e-10);
            // weight gradient of <conv(x), gy> is linear in w: <w, gw> = lhs.
            let gw_dot: f64 = conv.weight.of(&p).iter().zip(conv.weight.of(&g)).map(|(a, b)| a * b).sum();
            assert!((gw_dot - lhs).abs() < 1e-10);
        }
    }

    #[test]
    fn depthwise_adjoint() {
        let mut r = rng();
        let x = Tensor::<f64>::random_uniform(5, 7, 2, -1.0, 1.0, &mut r);
        let mut w = vec![0.0; 18];
        normal_fill(&mut w, 1.0, &mut r);
        let y = depthwise_forward(&x, &w, 3);
        let gy = Tensor::random_uniform(5, 7, 2, -1.0, 1.0, &mut r);
        let mut gw = vec![0.0; 18];
        let gx = depthwise_backward(&x, &w, 3, &gy, &mut gw);
        assert!((y.dot(&gy) - x.dot(&gx)).abs() < 1e-10);
        let gw_dot: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        assert!((gw_dot - y.dot(&gy)).abs() < 1e-10);
        let mut ident = vec![0.0; 18];
        ident[8..10].fill(1.0);
        assert_eq!(depthwise_forward(&x, &ident, 3), x);
    }

    #[test]
    fn bilinear_cases() {
        let c = Tensor::<f64>::filled(3, 2, 2, 4.0);
        assert!(bilinear_up2(&c).max_abs_diff(&Tensor::filled(6, 4, 2, 4.0)) < 1e-14);
        let ramp = Tensor::<f64>::from_fn(1, 2, 1, |_, x, _| x as f64);
        // Half-pixel centres: outputs at source positions -0.25, 0.25, 0.75, 1.25 clamped.
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (o, e) in expect.iter().enumerate() {
            assert!((bilinear_up2(&ramp).at(0, o, 0) - e).abs() < 1e-15);
        }
        let mut r = rng();
        let x = Tensor::<f64>::random_uniform(3, 4, 2, -1.0, 1.0, &mut r);
        let gy = Tensor::random_uniform(6, 8, 2, -1.0, 1.0, &mut r);
        assert!((bilinear_up2(&x).dot(&gy) - x.dot(&bilinear_up2_backward(&gy))).abs() < 1e-12);
    }

    #[test]
    fn instance_norm_output_statistics() {
        let mut layout = ParamLayout::default();
        let n = InstanceNorm::new(&mut layout, "n", 3);
        let mut p = vec![0.0f64; layout.len()];
        n.init(&mut p);
        let x = Tensor::random_uniform(4, 4, 3, -2.0, 5.0, &mut rng());
        let (y, _) = n.forward(&p, &x);
        for ch in 0..3 {
            let c = y.channel(ch);
            assert!(c.sum().abs() < 1e-10);
            assert!((c.sum_sq() / 16.0 - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn layout_offsets_are_contiguous() {
        let mut l = ParamLayout::default();
        let a = l.add("a", &[2, 3]);
        let b = l.add("b", &[4]);
        assert_eq!((a.offset, a.len, b.offset, b.len), (0, 6, 6, 4));
        assert_eq!(l.len(), 10);
        assert_eq!(l.find("b").unwrap().shape, vec![4]);
    }
}
