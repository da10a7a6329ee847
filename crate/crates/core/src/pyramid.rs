//! Parameter-free Laplacian pyramid with exact reconstruction.
//!
//! Smoothing uses the separable binomial kernel `[1,4,6,4,1]/16` per axis
//! (G = pᵀp/256) with reflect padding. Expansion is zero insertion followed by
//! smoothing with 4·G so constants stay constant.

use crate::error::{Error, Result};
use crate::profile;
use crate::tensor::{Scalar, Tensor};

/// 1D binomial taps; their outer product is the 5×5 Gaussian kernel.
pub const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// MACs charged per output element of one separable 5×5 smoothing.
pub const SMOOTH_MACS_PER_ELEMENT: u64 = 10;

/// 5×5 kernel `pᵀp/256`.
pub fn gaussian_kernel_2d() -> [[f64; 5]; 5] {
    let mut k = [[0.0; 5]; 5];
    for (r, row) in k.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = BINOMIAL[r] * BINOMIAL[c];
        }
    }
    k
}

/// Mirror index without repeating the edge sample.
#[inline]
fn reflect(q: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = q.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

#[derive(Clone, Copy, PartialEq)]
enum Axis {
    Rows,
    Cols,
}

/// One 5-tap pass along `axis`; `adjoint` applies the transposed operator.
fn pass<T: Scalar>(x: &Tensor<T>, axis: Axis, gain: f64, adjoint: bool) -> Tensor<T> {
    let (h, w, c) = x.shape();
    let taps: Vec<T> = BINOMIAL.iter().map(|&v| T::lit(v * gain)).collect();
    let mut out = Tensor::zeros(h, w, c);
    let src = x.data();
    let dst = out.data_mut();
    match axis {
        Axis::Rows => {
            let row = w * c;
            for y in 0..h {
                for (t, &k) in taps.iter().enumerate() {
                    let r = reflect(y as isize + t as isize - 2, h);
                    let (from, to) = if adjoint { (y, r) } else { (r, y) };
                    let s = &src[from * row..(from + 1) * row];
                    for (d, &v) in dst[to * row..(to + 1) * row].iter_mut().zip(s) {
                        *d += k * v;
                    }
                }
            }
        }
        Axis::Cols => {
            for y in 0..h {
                let base = y * w * c;
                for xi in 0..w {
                    for (t, &k) in taps.iter().enumerate() {
                        let r = reflect(xi as isize + t as isize - 2, w);
                        let (from, to) = if adjoint { (xi, r) } else { (r, xi) };
                        let s = &src[base + from * c..base + (from + 1) * c];
                        for (d, &v) in dst[base + to * c..base + (to + 1) * c].iter_mut().zip(s) {
                            *d += k * v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn smooth_with_gain<T: Scalar>(x: &Tensor<T>, gain_per_axis: f64) -> Tensor<T> {
    profile::add_macs(SMOOTH_MACS_PER_ELEMENT * x.len() as u64);
    pass(&pass(x, Axis::Rows, gain_per_axis, false), Axis::Cols, gain_per_axis, false)
}

fn smooth_adjoint<T: Scalar>(g: &Tensor<T>, gain_per_axis: f64) -> Tensor<T> {
    pass(&pass(g, Axis::Cols, gain_per_axis, true), Axis::Rows, gain_per_axis, true)
}

/// Channel-wise convolution with G, reflect padding, same output shape.
pub fn gaussian_smooth<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    smooth_with_gain(x, 1.0)
}

/// Keeps even indices on both spatial axes.
pub fn downsample<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = x.shape();
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(ho, wo, c);
    for i in 0..ho {
        for j in 0..wo {
            out.fiber_mut(i, j).copy_from_slice(x.fiber(2 * i, 2 * j));
        }
    }
    out
}

fn zero_insert<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = x.shape();
    let mut z = Tensor::zeros(2 * h, 2 * w, c);
    for i in 0..h {
        for j in 0..w {
            z.fiber_mut(2 * i, 2 * j).copy_from_slice(x.fiber(i, j));
        }
    }
    z
}

/// H×W → 2H×2W: zero insertion then smoothing with 4·G.
pub fn upsample_smooth<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    smooth_with_gain(&zero_insert(x), 2.0)
}

/// Transpose of [`upsample_smooth`]: 2H×2W → H×W.
pub fn upsample_smooth_adjoint<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    if g.height() % 2 != 0 || g.width() % 2 != 0 {
        return Err(Error::Shape(format!("upsample gradient {:?} has odd spatial size", g.shape())));
    }
    Ok(downsample(&smooth_adjoint(g, 2.0)))
}

/// Residuals `R^(0..L)` (finest first) and the low-pass `I^(L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidDecomposition<T: Scalar> {
    pub residuals: Vec<Tensor<T>>,
    pub low: Tensor<T>,
}

impl<T: Scalar> PyramidDecomposition<T> {
    pub fn levels(&self) -> usize {
        self.residuals.len()
    }
}

pub fn check_divisible(h: usize, w: usize, levels: usize) -> Result<()> {
    let f = 1usize << levels;
    if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("{h}x{w} is not divisible by 2^{levels}")));
    }
    Ok(())
}

pub fn lp_decompose<T: Scalar>(x: &Tensor<T>, levels: usize) -> Result<PyramidDecomposition<T>> {
    check_divisible(x.height(), x.width(), levels)?;
    let mut residuals = Vec::with_capacity(levels);
    let mut cur = x.clone();
    for _ in 0..levels {
        let next = downsample(&gaussian_smooth(&cur));
        residuals.push(cur.sub(&upsample_smooth(&next)));
        cur = next;
    }
    Ok(PyramidDecomposition { residuals, low: cur })
}

/// `x̂^(l) = up(x̂^(l+1)) + R^(l)` from the coarsest level down.
pub fn lp_reconstruct<T: Scalar>(d: &PyramidDecomposition<T>) -> Result<Tensor<T>> {
    let mut cur = d.low.clone();
    for r in d.residuals.iter().rev() {
        let up = upsample_smooth(&cur);
        up.check_same_shape(r, "pyramid level")?;
        cur = up.add(r);
    }
    Ok(cur)
}

/// Gradients of [`lp_reconstruct`] w.r.t. each residual and the low-pass.
pub fn lp_reconstruct_backward<T: Scalar>(grad: &Tensor<T>, levels: usize) -> Result<PyramidDecomposition<T>> {
    check_divisible(grad.height(), grad.width(), levels)?;
    let mut residuals = Vec::with_capacity(levels);
    let mut g = grad.clone();
    for _ in 0..levels {
        let next = upsample_smooth_adjoint(&g)?;
        residuals.push(g);
        g = next;
    }
    Ok(PyramidDecomposition { residuals, low: g })
}

/// MACs of one decomposition (smoothing + expansion per level).
pub fn decompose_macs(h: usize, w: usize, c: usize, levels: usize) -> u64 {
    (0..levels).map(|l| 2 * SMOOTH_MACS_PER_ELEMENT * ((h >> l) * (w >> l) * c) as u64).sum()
}

/// MACs of one reconstruction (one expansion per level).
pub fn reconstruct_macs(h: usize, w: usize, c: usize, levels: usize) -> u64 {
    (0..levels).map(|l| SMOOTH_MACS_PER_ELEMENT * ((h >> l) * (w >> l) * c) as u64).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(h: usize, w: usize, c: usize, seed: u64) -> Tensor<f64> {
        Tensor::random_uniform(h, w, c, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn kernel_sums_to_one_and_is_symmetric() {
        let k = gaussian_kernel_2d();
        let s: f64 = k.iter().flatten().sum();
        assert_eq!(s, 1.0);
        for r in 0..5 {
            for c in 0..5 {
                assert_eq!(k[r][c], k[c][r]);
                assert_eq!(k[r][c] * 256.0, [1.0, 4.0, 6.0, 4.0, 1.0][r] * [1.0, 4.0, 6.0, 4.0, 1.0][c]);
            }
        }
    }

    #[test]
    fn reflect_indices() {
        assert_eq!((-2..7).map(|q| reflect(q, 5)).collect::<Vec<_>>(), vec![2, 1, 0, 1, 2, 3, 4, 3, 2]);
        assert_eq!(reflect(-2, 2), 0);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn smoothing_cases() {
        let c = Tensor::<f64>::filled(7, 6, 2, 3.5);
        assert!(gaussian_smooth(&c).max_abs_diff(&c) < 1e-14);
        let mut imp = Tensor::<f64>::zeros(9, 9, 1);
        *imp.at_mut(4, 4, 0) = 1.0;
        let s = gaussian_smooth(&imp);
        let k = gaussian_kernel_2d();
        for y in 0..9 {
            for x in 0..9 {
                let (dy, dx) = (y as isize - 4, x as isize - 4);
                let expect = if dy.abs() <= 2 && dx.abs() <= 2 { k[(dy + 2) as usize][(dx + 2) as usize] } else { 0.0 };
                assert!((s.at(y, x, 0) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn downsample_picks_even_indices() {
        let x = Tensor::<f64>::from_fn(4, 4, 1, |i, j, _| (10 * i + j) as f64);
        assert_eq!(downsample(&x).data(), &[0.0, 2.0, 20.0, 22.0]);
        let one = Tensor::<f64>::filled(1, 1, 3, 2.0);
        assert_eq!(downsample(&one), one);
    }

    #[test]
    fn upsample_preserves_constants() {
        let c = Tensor::<f64>::filled(4, 4, 2, -1.25);
        let u = upsample_smooth(&c);
        assert_eq!(u.shape(), (8, 8, 2));
        assert!(u.max_abs_diff(&Tensor::filled(8, 8, 2, -1.25)) < 1e-14);
    }

    #[test]
    fn upsample_adjoint_matches_inner_products() {
        let x = rand_t(4, 6, 3, 1);
        let g = rand_t(8, 12, 3, 2);
        let lhs = upsample_smooth(&x).dot(&g);
        let rhs = x.dot(&upsample_smooth_adjoint(&g).unwrap());
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn decompose_shapes_and_round_trip() {
        let x = rand_t(32, 32, 4, 3);
        let d = lp_decompose(&x, 3).unwrap();
        let sizes: Vec<usize> = d.residuals.iter().map(|r| r.height()).collect();
        assert_eq!(sizes, vec![32, 16, 8]);
        assert_eq!(d.low.shape(), (4, 4, 4));
        assert!(lp_reconstruct(&d).unwrap().max_abs_diff(&x) < 1e-12);
        let d0 = lp_decompose(&x, 0).unwrap();
        assert!(d0.residuals.is_empty());
        assert_eq!(lp_reconstruct(&d0).unwrap(), x);
        assert!(lp_decompose(&rand_t(12, 12, 1, 0), 3).is_err());
    }

    #[test]
    fn zero_residuals_give_iterated_expansion() {
        let x = rand_t(16, 16, 2, 4);
        let mut d = lp_decompose(&x, 2).unwrap();
        d.residuals.iter_mut().for_each(|r| r.fill(0.0));
        let expect = upsample_smooth(&upsample_smooth(&d.low));
        assert!(lp_reconstruct(&d).unwrap().max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn reconstruct_backward_is_adjoint() {
        let d = lp_decompose(&rand_t(16, 8, 2, 5), 2).unwrap();
        let g = rand_t(16, 8, 2, 6);
        let gd = lp_reconstruct_backward(&g, 2).unwrap();
        let lhs = lp_reconstruct(&d).unwrap().dot(&g);
        let rhs = d.low.dot(&gd.low) + d.residuals.iter().zip(&gd.residuals).map(|(a, b)| a.dot(b)).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-11);
    }

    #[test]
    fn counted_macs_match_formula() {
        let x = rand_t(16, 16, 3, 7);
        let (d, dec) = profile::count_macs(|| lp_decompose(&x, 2).unwrap());
        assert_eq!(dec, decompose_macs(16, 16, 3, 2));
        let (_, rec) = profile::count_macs(|| lp_reconstruct(&d).unwrap());
        assert_eq!(rec, reconstruct_macs(16, 16, 3, 2));
    }
}
