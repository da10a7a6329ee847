//! LPWTNet: pyramid split, deep low-frequency branch, shared-mask refinement of
//! the high-frequency residuals, and closed-form reconstruction.
//!
//! The model is a static description (layer shapes and parameter offsets);
//! parameters are a separate flat vector so the same model runs in f32 for
//! training and f64 for gradient checks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    bilinear_macs, bilinear_up2, bilinear_up2_backward, hadamard, leaky_relu, leaky_relu_backward, relu,
    relu_backward, Conv2d, InstanceNorm, NormCache, ParamLayout,
};
use crate::pyramid::{self, PyramidDecomposition};
use crate::seed;
use crate::tensor::{Scalar, Tensor};
use crate::wavelet::{WtConv, WtConvCache, WtConvConfig};

/// Spatial mixer used inside the residual blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// WTConv followed by a pointwise convolution.
    Dswt,
    /// A standard dense 3×3 convolution in its place.
    PlainConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub levels_lp: usize,
    pub levels_wt: usize,
    pub kernel: usize,
    pub n1: usize,
    pub n2: usize,
    pub channels: usize,
    pub c_low: usize,
    pub c_mask: usize,
    pub block: BlockKind,
    pub per_subband_scales: bool,
    /// Std of the noise added to the identity WTConv kernels at init.
    pub wt_init_noise: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels_lp: 3,
            levels_wt: 2,
            kernel: 3,
            n1: 5,
            n2: 3,
            channels: 64,
            c_low: 128,
            c_mask: 128,
            block: BlockKind::Dswt,
            per_subband_scales: false,
            wt_init_noise: 1e-2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.levels_lp == 0 {
            return bad("levels_lp must be at least 1");
        }
        if self.levels_wt == 0 {
            return bad("levels_wt must be at least 1");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel size must be odd");
        }
        if self.n1 == 0 || self.n2 == 0 {
            return bad("n1 and n2 must be at least 1");
        }
        if self.channels == 0 || self.c_low < self.channels || self.c_mask < self.channels {
            return bad("hidden widths must be at least the input channel count");
        }
        Ok(())
    }

    /// Input σ×σ must split into L pyramid levels whose coarsest grid still holds ℓ wavelet levels.
    pub fn check_input(&self, h: usize, w: usize, c: usize) -> Result<()> {
        if c != self.channels {
            return Err(Error::Shape(format!("model expects {} channels, got {c}", self.channels)));
        }
        let f = 1usize << (self.levels_lp + self.levels_wt);
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!(
                "{h}x{w} must be divisible by 2^(levels_lp + levels_wt) = {f}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Mixer {
    Dswt { wt: WtConv, pw: Conv2d },
    Plain(Conv2d),
}

/// `x + Conv3×3(LReLU(mix(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    mixer: Mixer,
    out: Conv2d,
}

#[derive(Debug, Clone)]
pub struct ResBlockCache<T: Scalar> {
    x: Tensor<T>,
    wt: Option<WtConvCache<T>>,
    mixed_in: Tensor<T>,
    pre_act: Tensor<T>,
    act: Tensor<T>,
}

impl ResBlock {
    fn new(layout: &mut ParamLayout, name: &str, width: usize, cfg: &ModelConfig) -> Self {
        let mixer = match cfg.block {
            BlockKind::Dswt => Mixer::Dswt {
                wt: WtConv::new(
                    layout,
                    &format!("{name}.wtconv"),
                    WtConvConfig {
                        channels: width,
                        kernel: cfg.kernel,
                        levels: cfg.levels_wt,
                        per_subband_scales: cfg.per_subband_scales,
                    },
                ),
                pw: Conv2d::new(layout, &format!("{name}.pointwise"), width, width, 1),
            },
            BlockKind::PlainConv => Mixer::Plain(Conv2d::new(layout, &format!("{name}.conv"), width, width, 3)),
        };
        let out = Conv2d::new(layout, &format!("{name}.out"), width, width, 3);
        ResBlock { mixer, out }
    }

    fn init<T: Scalar, R: Rng + ?Sized>(&self, p: &mut [T], wt_noise: f64, rng: &mut R) {
        match &self.mixer {
            Mixer::Dswt { wt, pw } => {
                wt.init(p, wt_noise, rng);
                pw.init(p, rng);
            }
            Mixer::Plain(c) => c.init(p, rng),
        }
        self.out.init(p, rng);
    }

    /// Zeroes the final convolution so the block is the identity map.
    pub fn zero_output<T: Scalar>(&self, p: &mut [T]) {
        self.out.weight.of_mut(p).fill(T::zero());
        self.out.bias.of_mut(p).fill(T::zero());
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &Tensor<T>) -> Result<(Tensor<T>, ResBlockCache<T>)> {
        let (wt_cache, mixed_in, pre_act) = match &self.mixer {
            Mixer::Dswt { wt, pw } => {
                let (z, cache) = wt.forward(p, x)?;
                let y = pw.forward(p, &z)?;
                (Some(cache), z, y)
            }
            Mixer::Plain(c) => (None, x.clone(), c.forward(p, x)?),
        };
        let act = leaky_relu(&pre_act);
        let mut y = self.out.forward(p, &act)?;
        y.add_assign(x);
        Ok((y, ResBlockCache { x: x.clone(), wt: wt_cache, mixed_in, pre_act, act }))
    }

    pub fn backward<T: Scalar>(&self, p: &[T], c: &ResBlockCache<T>, gy: &Tensor<T>, g: &mut [T]) -> Result<Tensor<T>> {
        let g_act = self.out.backward(p, &c.act, gy, g);
        let g_pre = leaky_relu_backward(&c.pre_act, &g_act);
        let mut gx = match &self.mixer {
            Mixer::Dswt { wt, pw } => {
                let gz = pw.backward(p, &c.mixed_in, &g_pre, g);
                wt.backward(p, c.wt.as_ref().expect("wtconv cache"), &gz, g)?
            }
            Mixer::Plain(conv) => conv.backward(p, &c.x, &g_pre, g),
        };
        gx.add_assign(gy);
        Ok(gx)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let mix = match &self.mixer {
            Mixer::Dswt { wt, pw } => wt.macs(h, w) + pw.macs(h, w),
            Mixer::Plain(c) => c.macs(h, w),
        };
        mix + self.out.macs(h, w)
    }
}

fn blocks_forward<T: Scalar>(
    blocks: &[ResBlock],
    p: &[T],
    x: Tensor<T>,
) -> Result<(Tensor<T>, Vec<ResBlockCache<T>>)> {
    let mut caches = Vec::with_capacity(blocks.len());
    let mut cur = x;
    for b in blocks {
        let (y, c) = b.forward(p, &cur)?;
        caches.push(c);
        cur = y;
    }
    Ok((cur, caches))
}

fn blocks_backward<T: Scalar>(
    blocks: &[ResBlock],
    p: &[T],
    caches: &[ResBlockCache<T>],
    gy: Tensor<T>,
    g: &mut [T],
) -> Result<Tensor<T>> {
    let mut cur = gy;
    for (b, c) in blocks.iter().zip(caches).rev() {
        cur = b.backward(p, c, &cur, g)?;
    }
    Ok(cur)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowBranch {
    expand1: Conv2d,
    norm: InstanceNorm,
    expand2: Conv2d,
    pub blocks: Vec<ResBlock>,
    reduce1: Conv2d,
    reduce2: Conv2d,
}

#[derive(Debug, Clone)]
pub struct LowCache<T: Scalar> {
    input: Tensor<T>,
    norm: NormCache<T>,
    n1: Tensor<T>,
    a1: Tensor<T>,
    e2: Tensor<T>,
    blocks: Vec<ResBlockCache<T>>,
    b_out: Tensor<T>,
    r1: Tensor<T>,
    a3: Tensor<T>,
    sum: Tensor<T>,
}

impl LowBranch {
    /// Zeroes the last reduction so the branch returns `ReLU(low)`.
    pub fn zero_reduction<T: Scalar>(&self, p: &mut [T]) {
        self.reduce2.weight.of_mut(p).fill(T::zero());
        self.reduce2.bias.of_mut(p).fill(T::zero());
    }

    pub fn forward<T: Scalar>(&self, p: &[T], low: &Tensor<T>) -> Result<(Tensor<T>, LowCache<T>)> {
        let e1 = self.expand1.forward(p, low)?;
        let (n1, norm) = self.norm.forward(p, &e1);
        let a1 = leaky_relu(&n1);
        let e2 = self.expand2.forward(p, &a1)?;
        let a2 = leaky_relu(&e2);
        let (b_out, blocks) = blocks_forward(&self.blocks, p, a2)?;
        let r1 = self.reduce1.forward(p, &b_out)?;
        let a3 = leaky_relu(&r1);
        let mut sum = self.reduce2.forward(p, &a3)?;
        sum.add_assign(low);
        let out = relu(&sum);
        Ok((out, LowCache { input: low.clone(), norm, n1, a1, e2, blocks, b_out, r1, a3, sum }))
    }

    /// Parameter gradients only; the branch input is the fixed pyramid low-pass.
    pub fn backward<T: Scalar>(&self, p: &[T], c: &LowCache<T>, gy: &Tensor<T>, g: &mut [T]) -> Result<()> {
        let g_sum = relu_backward(&c.sum, gy);
        let g_a3 = self.reduce2.backward(p, &c.a3, &g_sum, g);
        let g_r1 = leaky_relu_backward(&c.r1, &g_a3);
        let g_b = self.reduce1.backward(p, &c.b_out, &g_r1, g);
        let g_a2 = blocks_backward(&self.blocks, p, &c.blocks, g_b, g)?;
        let g_e2 = leaky_relu_backward(&c.e2, &g_a2);
        let g_a1 = self.expand2.backward(p, &c.a1, &g_e2, g);
        let g_n1 = leaky_relu_backward(&c.n1, &g_a1);
        let g_e1 = self.norm.backward(p, &c.norm, &g_n1, g);
        self.expand1.backward(p, &c.input, &g_e1, g);
        Ok(())
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.expand1.macs(h, w)
            + self.expand2.macs(h, w)
            + self.blocks.iter().map(|b| b.macs(h, w)).sum::<u64>()
            + self.reduce1.macs(h, w)
            + self.reduce2.macs(h, w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskBranch {
    expand: Conv2d,
    pub blocks: Vec<ResBlock>,
    reduce: Conv2d,
}

#[derive(Debug, Clone)]
pub struct MaskCache<T: Scalar> {
    concat: Tensor<T>,
    blocks: Vec<ResBlockCache<T>>,
    b_out: Tensor<T>,
}

impl MaskBranch {
    pub fn zero_output<T: Scalar>(&self, p: &mut [T]) {
        self.reduce.weight.of_mut(p).fill(T::zero());
        self.reduce.bias.of_mut(p).fill(T::zero());
    }

    /// Top mask from `[up(Î), up(I), R]` stacked along channels.
    pub fn forward<T: Scalar>(
        &self,
        p: &[T],
        low_hat: &Tensor<T>,
        low: &Tensor<T>,
        residual_top: &Tensor<T>,
    ) -> Result<(Tensor<T>, MaskCache<T>)> {
        let up_hat = bilinear_up2(low_hat);
        let up_low = bilinear_up2(low);
        let concat = Tensor::concat_channels(&[&up_hat, &up_low, residual_top])?;
        let e = self.expand.forward(p, &concat)?;
        let (b_out, blocks) = blocks_forward(&self.blocks, p, e)?;
        let mask = self.reduce.forward(p, &b_out)?;
        Ok((mask, MaskCache { concat, blocks, b_out }))
    }

    /// Returns the gradient w.r.t. `low_hat`.
    pub fn backward<T: Scalar>(&self, p: &[T], c: &MaskCache<T>, gy: &Tensor<T>, g: &mut [T]) -> Result<Tensor<T>> {
        let g_b = self.reduce.backward(p, &c.b_out, gy, g);
        let g_e = blocks_backward(&self.blocks, p, &c.blocks, g_b, g)?;
        let g_cat = self.expand.backward(p, &c.concat, &g_e, g);
        let ch = g_cat.channels() / 3;
        let g_up_hat = g_cat.split_channels(&[ch, 2 * ch]).swap_remove(0);
        Ok(bilinear_up2_backward(&g_up_hat))
    }

    fn macs(&self, h: usize, w: usize, c: usize) -> u64 {
        // h, w: resolution of the top residual.
        2 * bilinear_macs(h / 2, w / 2, c)
            + self.expand.macs(h, w)
            + self.blocks.iter().map(|b| b.macs(h, w)).sum::<u64>()
            + self.reduce.macs(h, w)
    }
}

/// Per-level `Conv1×1 → LReLU → Conv1×1` applied to `R∘M + R`.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTune {
    first: Conv2d,
    second: Conv2d,
}

#[derive(Debug, Clone)]
pub struct RefineCache<T: Scalar> {
    residual: Tensor<T>,
    pre: Tensor<T>,
    h1: Tensor<T>,
    a: Tensor<T>,
}

impl FineTune {
    /// Sets both convolutions to identity maps (LReLU is the identity on the
    /// positive half only, so this is exact for nonnegative inputs).
    pub fn set_identity<T: Scalar>(&self, p: &mut [T]) {
        for conv in [&self.first, &self.second] {
            let w = conv.weight.of_mut(p);
            w.fill(T::zero());
            for i in 0..conv.cin {
                w[i * conv.cout + i] = T::one();
            }
            conv.bias.of_mut(p).fill(T::zero());
        }
    }

    pub fn forward<T: Scalar>(&self, p: &[T], residual: &Tensor<T>, mask: &Tensor<T>) -> Result<(Tensor<T>, RefineCache<T>)> {
        residual.check_same_shape(mask, "residual and mask")?;
        let mut pre = hadamard(residual, mask);
        pre.add_assign(residual);
        let h1 = self.first.forward(p, &pre)?;
        let a = leaky_relu(&h1);
        let out = self.second.forward(p, &a)?;
        Ok((out, RefineCache { residual: residual.clone(), pre, h1, a }))
    }

    /// Returns the gradient w.r.t. the mask.
    pub fn backward<T: Scalar>(&self, p: &[T], c: &RefineCache<T>, gy: &Tensor<T>, g: &mut [T]) -> Tensor<T> {
        let g_a = self.second.backward(p, &c.a, gy, g);
        let g_h1 = leaky_relu_backward(&c.h1, &g_a);
        let g_pre = self.first.backward(p, &c.pre, &g_h1, g);
        g_pre.hadamard(&c.residual)
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        (h * w * self.first.cin) as u64 + self.first.macs(h, w) + self.second.macs(h, w)
    }
}

/// `M^(l) = Conv3×3(LReLU(up(M^(l+1))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskAdjust {
    conv: Conv2d,
}

#[derive(Debug, Clone)]
pub struct AdjustCache<T: Scalar> {
    up: Tensor<T>,
    act: Tensor<T>,
}

impl MaskAdjust {
    pub fn zero<T: Scalar>(&self, p: &mut [T]) {
        self.conv.weight.of_mut(p).fill(T::zero());
        self.conv.bias.of_mut(p).fill(T::zero());
    }

    pub fn forward<T: Scalar>(&self, p: &[T], coarse: &Tensor<T>) -> Result<(Tensor<T>, AdjustCache<T>)> {
        let up = bilinear_up2(coarse);
        let act = leaky_relu(&up);
        let m = self.conv.forward(p, &act)?;
        Ok((m, AdjustCache { up, act }))
    }

    pub fn backward<T: Scalar>(&self, p: &[T], c: &AdjustCache<T>, gy: &Tensor<T>, g: &mut [T]) -> Tensor<T> {
        let g_act = self.conv.backward(p, &c.act, gy, g);
        bilinear_up2_backward(&leaky_relu_backward(&c.up, &g_act))
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        bilinear_macs(h / 2, w / 2, self.conv.cin) + self.conv.macs(h, w)
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Scalar> {
    pub decomposition: PyramidDecomposition<T>,
    pub low_hat: Tensor<T>,
    /// Masks indexed by pyramid level (0 = finest).
    pub masks: Vec<Tensor<T>>,
    low: LowCache<T>,
    mask: MaskCache<T>,
    adjust: Vec<Option<AdjustCache<T>>>,
    refine: Vec<RefineCache<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpwtNet {
    pub cfg: ModelConfig,
    pub layout: ParamLayout,
    pub low: LowBranch,
    pub mask: MaskBranch,
    /// Indexed by target level l = 0..L−1 (the top level has none).
    pub adjust: Vec<MaskAdjust>,
    /// Indexed by level l = 0..L.
    pub fine_tune: Vec<FineTune>,
}

impl LpwtNet {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layout = ParamLayout::default();
        let (c, l) = (cfg.channels, cfg.levels_lp);
        let low = LowBranch {
            expand1: Conv2d::new(&mut layout, "low.expand1", c, cfg.c_low, 3),
            norm: InstanceNorm::new(&mut layout, "low.norm", cfg.c_low),
            expand2: Conv2d::new(&mut layout, "low.expand2", cfg.c_low, cfg.c_low, 3),
            blocks: (0..cfg.n1).map(|i| ResBlock::new(&mut layout, &format!("low.block{i}"), cfg.c_low, &cfg)).collect(),
            reduce1: Conv2d::new(&mut layout, "low.reduce1", cfg.c_low, cfg.c_low, 3),
            reduce2: Conv2d::new(&mut layout, "low.reduce2", cfg.c_low, c, 3),
        };
        let mask = MaskBranch {
            expand: Conv2d::new(&mut layout, "mask.expand", 3 * c, cfg.c_mask, 3),
            blocks: (0..cfg.n2).map(|i| ResBlock::new(&mut layout, &format!("mask.block{i}"), cfg.c_mask, &cfg)).collect(),
            reduce: Conv2d::new(&mut layout, "mask.reduce", cfg.c_mask, c, 3),
        };
        let adjust = (0..l - 1)
            .map(|lv| MaskAdjust { conv: Conv2d::new(&mut layout, &format!("adjust{lv}"), c, c, 3) })
            .collect();
        let fine_tune = (0..l)
            .map(|lv| FineTune {
                first: Conv2d::new(&mut layout, &format!("refine{lv}.first"), c, c, 1),
                second: Conv2d::new(&mut layout, &format!("refine{lv}.second"), c, c, 1),
            })
            .collect();
        Ok(LpwtNet { cfg, layout, low, mask, adjust, fine_tune })
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    /// Fresh parameters: fan-in uniform convolutions, unit/zero norm affine,
    /// near-identity WTConv kernels with unit scales.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Vec<T> {
        let mut rng = seed::rng(seed, "init", 0);
        let mut p = vec![T::zero(); self.param_count()];
        let noise = self.cfg.wt_init_noise;
        let lb = &self.low;
        lb.expand1.init(&mut p, &mut rng);
        lb.norm.init(&mut p);
        lb.expand2.init(&mut p, &mut rng);
        lb.blocks.iter().for_each(|b| b.init(&mut p, noise, &mut rng));
        lb.reduce1.init(&mut p, &mut rng);
        lb.reduce2.init(&mut p, &mut rng);
        self.mask.expand.init(&mut p, &mut rng);
        self.mask.blocks.iter().for_each(|b| b.init(&mut p, noise, &mut rng));
        self.mask.reduce.init(&mut p, &mut rng);
        for a in &self.adjust {
            a.conv.init(&mut p, &mut rng);
        }
        for f in &self.fine_tune {
            f.first.init(&mut p, &mut rng);
            f.second.init(&mut p, &mut rng);
        }
        p
    }

    fn check_params<T>(&self, p: &[T]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::Shape(format!("{} parameters for a model with {}", p.len(), self.param_count())));
        }
        Ok(())
    }

    /// Masks for every level from the top mask, finest first.
    pub fn propagate_masks<T: Scalar>(&self, p: &[T], top: Tensor<T>) -> Result<(Vec<Tensor<T>>, Vec<Option<AdjustCache<T>>>)> {
        let l = self.cfg.levels_lp;
        let mut masks: Vec<Option<Tensor<T>>> = vec![None; l];
        let mut caches: Vec<Option<AdjustCache<T>>> = vec![None; l];
        masks[l - 1] = Some(top);
        for lv in (0..l - 1).rev() {
            let (m, c) = self.adjust[lv].forward(p, masks[lv + 1].as_ref().expect("coarser mask"))?;
            masks[lv] = Some(m);
            caches[lv] = Some(c);
        }
        Ok((masks.into_iter().map(|m| m.expect("all levels filled")).collect(), caches))
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_params(p)?;
        let (h, w, c) = x.shape();
        self.cfg.check_input(h, w, c)?;
        let l = self.cfg.levels_lp;
        let decomposition = pyramid::lp_decompose(x, l)?;
        let (low_hat, low_cache) = self.low.forward(p, &decomposition.low)?;
        let (top, mask_cache) = self.mask.forward(p, &low_hat, &decomposition.low, &decomposition.residuals[l - 1])?;
        let (masks, adjust) = self.propagate_masks(p, top)?;
        let mut refined = Vec::with_capacity(l);
        let mut refine = Vec::with_capacity(l);
        for lv in 0..l {
            let (r, cache) = self.fine_tune[lv].forward(p, &decomposition.residuals[lv], &masks[lv])?;
            refined.push(r);
            refine.push(cache);
        }
        let out = pyramid::lp_reconstruct(&PyramidDecomposition { residuals: refined, low: low_hat.clone() })?;
        let cache = ForwardCache { decomposition, low_hat, masks, low: low_cache, mask: mask_cache, adjust, refine };
        Ok((out, cache))
    }

    pub fn infer<T: Scalar>(&self, p: &[T], x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(p, x)?.0)
    }

    /// Accumulates `∂loss/∂θ` into `g` given `gy = ∂loss/∂output`.
    pub fn backward<T: Scalar>(&self, p: &[T], c: &ForwardCache<T>, gy: &Tensor<T>, g: &mut [T]) -> Result<()> {
        self.check_params(p)?;
        self.check_params(g)?;
        let l = self.cfg.levels_lp;
        let gd = pyramid::lp_reconstruct_backward(gy, l)?;
        let mut g_masks: Vec<Tensor<T>> = (0..l).map(|lv| self.fine_tune[lv].backward(p, &c.refine[lv], &gd.residuals[lv], g)).collect();
        for lv in 0..l - 1 {
            let cache = c.adjust[lv].as_ref().expect("adjust cache");
            let g_coarse = self.adjust[lv].backward(p, cache, &g_masks[lv], g);
            g_masks[lv + 1].add_assign(&g_coarse);
        }
        let mut g_low_hat = self.mask.backward(p, &c.mask, &g_masks[l - 1], g)?;
        g_low_hat.add_assign(&gd.low);
        self.low.backward(p, &c.low, &g_low_hat, g)
    }

    /// Analytic multiply-accumulate count of one forward pass on an H×W input.
    pub fn forward_macs(&self, h: usize, w: usize) -> u64 {
        let (c, l) = (self.cfg.channels, self.cfg.levels_lp);
        let (hl, wl) = (h >> l, w >> l);
        let (ht, wt) = (h >> (l - 1), w >> (l - 1));
        pyramid::decompose_macs(h, w, c, l)
            + self.low.macs(hl, wl)
            + self.mask.macs(ht, wt, c)
            + (0..l - 1).map(|lv| self.adjust[lv].macs(h >> lv, w >> lv)).sum::<u64>()
            + (0..l).map(|lv| self.fine_tune[lv].macs(h >> lv, w >> lv)).sum::<u64>()
            + pyramid::reconstruct_macs(h, w, c, l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> ModelConfig {
        ModelConfig { levels_lp: 2, levels_wt: 1, kernel: 3, n1: 1, n2: 1, channels: 2, c_low: 4, c_mask: 4, ..Default::default() }
    }

    fn input(h: usize, c: usize, seed: u64) -> Tensor<f64> {
        Tensor::random_uniform(h, h, c, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn shapes_and_determinism() {
        let net = LpwtNet::new(toy()).unwrap();
        let p = net.init_params::<f64>(1);
        let x = input(8, 2, 2);
        let (y, cache) = net.forward(&p, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(cache.masks.iter().map(|m| m.height()).collect::<Vec<_>>(), vec![8, 4]);
        assert_eq!(net.infer(&p, &x).unwrap(), y);
        assert!(net.forward(&p, &input(12, 2, 0)).is_err());
    }

    #[test]
    fn zeroed_output_conv_makes_block_identity() {
        let net = LpwtNet::new(toy()).unwrap();
        let mut p = net.init_params::<f64>(3);
        let b = &net.low.blocks[0];
        b.zero_output(&mut p);
        let x = input(4, 4, 4);
        assert_eq!(b.forward(&p, &x).unwrap().0, x);
    }

    #[test]
    fn zeroed_reduction_returns_relu_of_low() {
        let net = LpwtNet::new(toy()).unwrap();
        let mut p = net.init_params::<f64>(5);
        net.low.zero_reduction(&mut p);
        let low = input(2, 2, 6).map(|v| v - 0.5);
        assert_eq!(net.low.forward(&p, &low).unwrap().0, relu(&low));
    }

    #[test]
    fn mask_identities() {
        let net = LpwtNet::new(toy()).unwrap();
        let mut p = net.init_params::<f64>(7);
        net.mask.zero_output(&mut p);
        net.adjust[0].zero(&mut p);
        let (low, r) = (input(2, 2, 8), input(4, 2, 9));
        let (m, _) = net.mask.forward(&p, &low, &low, &r).unwrap();
        assert_eq!(m.max_abs(), 0.0);
        let (masks, _) = net.propagate_masks(&p, input(4, 2, 10)).unwrap();
        assert_eq!(masks[0].max_abs(), 0.0);

        let ft = &net.fine_tune[0];
        ft.set_identity(&mut p);
        let zero = Tensor::zeros(8, 8, 2);
        let res = input(8, 2, 11);
        assert!(ft.forward(&p, &res, &zero).unwrap().0.max_abs_diff(&res) < 1e-15);
        let one = Tensor::filled(8, 8, 2, 1.0);
        assert!(ft.forward(&p, &res, &one).unwrap().0.max_abs_diff(&res.scale(2.0)) < 1e-15);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let net = LpwtNet::new(toy()).unwrap();
        let p = net.init_params::<f64>(12);
        let x = input(8, 2, 13);
        let (y, cache) = net.forward(&p, &x).unwrap();
        let gy = y.sub(&input(8, 2, 14));
        let mut g = vec![0.0; p.len()];
        net.backward(&p, &cache, &gy, &mut g).unwrap();
        for e in &net.layout.entries {
            let s = &g[e.offset..e.offset + e.len];
            assert!(s.iter().any(|&v| v != 0.0), "{} has zero gradient", e.name);
        }
    }

    #[test]
    fn counted_macs_match_analytic() {
        for block in [BlockKind::Dswt, BlockKind::PlainConv] {
            let net = LpwtNet::new(ModelConfig { block, ..toy() }).unwrap();
            let p = net.init_params::<f32>(0);
            let x = input(8, 2, 15).cast::<f32>();
            let (_, macs) = profile::count_macs(|| net.forward(&p, &x).unwrap());
            assert_eq!(macs, net.forward_macs(8, 8));
        }
    }
}
