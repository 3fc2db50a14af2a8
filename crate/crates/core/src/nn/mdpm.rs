//! Multi-scale detail preservation.
//!
//! Each pyramid level is sharpened with an edge map computed from the raw
//! image (Gaussian blur followed by a Laplacian), gated back into the
//! feature through a learned mask and scalar gain, recalibrated with CBAM,
//! then refined by two dense blocks and a bank of dilated convolutions.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::backbone::{FeaturePyramid, LEVEL_CHANNELS};
use crate::nn::doconv::{ConvGeometry, DoConv, VisitConvs, WeightInit};
use crate::params::{Ctx, Init, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_SIGMA: f64 = 1.0;
pub const CBAM_REDUCTION: usize = 16;
pub const DILATIONS: [usize; 3] = [1, 3, 5];

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn conv(init: &mut Init<'_, impl Scalar>, name: &str, k: usize, dil: usize, c_in: usize, c_out: usize, wi: WeightInit) -> DoConv {
    let pad = dil * (k / 2);
    DoConv::new(init, name, ConvGeometry::new(k, 1, pad, c_in, c_out).with_dilation(dil), true, wi)
}

/// Replicate-border 2-D correlation of each `[1, 1, H, W]` plane with a
/// separable or small dense stencil given as `(dy, dx, weight)` triples.
fn stencil<T: Scalar>(x: &Tensor<T>, taps: &[(isize, isize, f64)]) -> Tensor<T> {
    let [_, _, h, w] = x.shape();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    Tensor::from_fn(x.shape(), |[n, c, y, xx]| {
        taps.iter()
            .map(|&(dy, dx, wt)| T::c(wt) * x.at(n, c, clamp(y as isize + dy, h), clamp(xx as isize + dx, w)))
            .sum()
    })
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Edge-strength map `[B, 1, target_h, target_w]` in `[0, 1]` from an RGB
/// image in `[0, 1]`: grayscale, bilinear resize, Gaussian blur of radius
/// `ceil(3 sigma)`, 4-neighbour Laplacian, per-sample min-max scaling. A
/// flat response maps to all zeros.
pub fn highfreq_map<T: Scalar>(source: &Tensor<T>, target_h: usize, target_w: usize, sigma: f64) -> Result<Tensor<T>> {
    let [b, c, _, _] = source.shape();
    if c != 3 {
        return Err(Error::Shape { op: "highfreq_map", dim: "image channels", expected: 3, got: c });
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("highfreq_map", format!("sigma must be positive, got {sigma}")));
    }
    if target_h < 3 || target_w < 3 {
        return Err(Error::invalid(
            "highfreq_map",
            format!("target {target_h}x{target_w} is smaller than the 3x3 Laplacian"),
        ));
    }
    let [_, _, h0, w0] = source.shape();
    let gray = Tensor::from_fn([b, 1, h0, w0], |[n, _, y, x]| {
        (0..3).map(|ch| T::c(LUMA[ch]) * source.at(n, ch, y, x)).sum()
    });
    let resized = kernels::resize_bilinear(&gray, target_h, target_w);
    let g = gaussian_taps(sigma);
    let r = (g.len() / 2) as isize;
    let horiz: Vec<_> = g.iter().enumerate().map(|(i, &wt)| (0, i as isize - r, wt)).collect();
    let vert: Vec<_> = g.iter().enumerate().map(|(i, &wt)| (i as isize - r, 0, wt)).collect();
    let blurred = stencil(&stencil(&resized, &horiz), &vert);
    let lap = stencil(
        &blurred,
        &[(0, 0, -4.0), (-1, 0, 1.0), (1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0)],
    );

    let plane = target_h * target_w;
    let mut out = lap;
    for n in 0..b {
        let s = &mut out.data_mut()[n * plane..(n + 1) * plane];
        let lo = s.iter().copied().fold(T::infinity(), T::min);
        let hi = s.iter().copied().fold(T::neg_infinity(), T::max);
        let scale = T::one().max(hi.abs()).max(lo.abs());
        if hi - lo <= T::epsilon() * T::c(64.0) * scale {
            s.iter_mut().for_each(|v| *v = T::zero());
        } else {
            s.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
        }
    }
    Ok(out)
}

fn check_spatial(op: &'static str, a: [usize; 4], b: [usize; 4]) -> Result<()> {
    for (i, dim) in [(0, "batch"), (2, "height"), (3, "width")] {
        if a[i] != b[i] {
            return Err(Error::Shape { op, dim, expected: a[i], got: b[i] });
        }
    }
    Ok(())
}

/// `f_h` broadcast over the channels of `f`.
pub fn edge_enhance<'g, T: Scalar>(f: &Var<'g, T>, f_h: &Var<'g, T>) -> Result<Var<'g, T>> {
    check_spatial("edge_enhance", f.shape(), f_h.shape())?;
    if f_h.shape()[1] != 1 {
        return Err(Error::Shape { op: "edge_enhance", dim: "edge map channels", expected: 1, got: f_h.shape()[1] });
    }
    Ok(f.mul(f_h))
}

/// `g * (f_fuse * a_m) + f`, with `a_m` broadcast over channels.
pub fn gated_residual<'g, T: Scalar>(f_fuse: &Var<'g, T>, a_m: &Var<'g, T>, f: &Var<'g, T>, g: &Var<'g, T>) -> Var<'g, T> {
    f_fuse.mul(a_m).mul(g).add(f)
}

/// Channel then spatial attention.
#[derive(Debug, Clone)]
pub struct Cbam {
    fc1: DoConv,
    fc2: DoConv,
    spatial: DoConv,
}

impl Cbam {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, channels: usize) -> Self {
        let hidden = (channels / CBAM_REDUCTION).max(1);
        init.scope("cbam", |init| Cbam {
            fc1: conv(init, "fc1", 1, 1, channels, hidden, WeightInit::Relu),
            fc2: conv(init, "fc2", 1, 1, hidden, channels, WeightInit::Linear),
            spatial: conv(init, "spatial", 7, 1, 2, 1, WeightInit::Linear),
        })
    }

    pub fn spatial_conv(&self) -> &DoConv {
        &self.spatial
    }

    /// `(channel map [B,C,1,1], spatial map [B,1,H,W], output)`.
    pub fn forward_maps<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> (Var<'g, T>, Var<'g, T>, Var<'g, T>) {
        let mlp = |v: &Var<'g, T>| self.fc2.forward(ctx, &self.fc1.forward(ctx, v).relu());
        let ca = mlp(&x.mean_hw()).add(&mlp(&x.max_hw())).sigmoid();
        let xc = x.mul(&ca);
        let pooled = Var::cat_channels(&[&xc.mean_c(), &xc.max_c()]);
        let sa = self.spatial.forward(ctx, &pooled).sigmoid();
        let out = xc.mul(&sa);
        (ca, sa, out)
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Var<'g, T> {
        self.forward_maps(ctx, x).2
    }
}

impl VisitConvs for Cbam {
    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut DoConv)) {
        f(&mut self.fc1);
        f(&mut self.fc2);
        f(&mut self.spatial);
    }
}

/// Two 3x3 layers of growth `C/2` over the running concatenation, a 1x1
/// projection back to `C`, and a residual connection.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    layers: Vec<DoConv>,
    proj: DoConv,
}

impl DenseBlock {
    fn new<T: Scalar>(init: &mut Init<'_, T>, channels: usize) -> Self {
        let growth = (channels / 2).max(1);
        let layers = (0..2)
            .map(|i| conv(init, &format!("conv{}", i + 1), 3, 1, channels + i * growth, growth, WeightInit::Relu))
            .collect();
        let proj = conv(init, "proj", 1, 1, channels + 2 * growth, channels, WeightInit::Linear);
        DenseBlock { layers, proj }
    }

    fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Var<'g, T> {
        let mut feats = vec![x.clone()];
        for layer in &self.layers {
            let input = Var::cat_channels(&feats.iter().collect::<Vec<_>>());
            feats.push(layer.forward(ctx, &input).relu());
        }
        let all = Var::cat_channels(&feats.iter().collect::<Vec<_>>());
        x.add(&self.proj.forward(ctx, &all))
    }
}

impl VisitConvs for DenseBlock {
    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut DoConv)) {
        self.layers.iter_mut().for_each(|c| f(c));
        f(&mut self.proj);
    }
}

/// Parameters of one pyramid level.
#[derive(Debug, Clone)]
pub struct MdpmLevel {
    channels: usize,
    g: ParamId,
    fuse: DoConv,
    mask: DoConv,
    cbam: Cbam,
    dense: Vec<DenseBlock>,
    dilated: Vec<DoConv>,
    rf_proj: DoConv,
}

impl MdpmLevel {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, channels: usize) -> Self {
        MdpmLevel {
            channels,
            g: init.zeros("g", [1, 1, 1, 1]),
            fuse: conv(init, "fuse", 3, 1, 2 * channels, channels, WeightInit::Linear),
            mask: conv(init, "mask", 1, 1, channels, 1, WeightInit::Linear),
            cbam: Cbam::new(init, channels),
            dense: (0..2)
                .map(|i| init.scope(format!("dense{}", i + 1), |init| DenseBlock::new(init, channels)))
                .collect(),
            dilated: DILATIONS
                .iter()
                .map(|&d| conv(init, &format!("rf_d{d}"), 3, d, channels, channels, WeightInit::Linear))
                .collect(),
            rf_proj: conv(init, "rf_proj", 1, 1, channels, channels, WeightInit::Linear),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn gain_id(&self) -> ParamId {
        self.g
    }

    pub fn fuse_conv(&self) -> &DoConv {
        &self.fuse
    }

    pub fn mask_conv(&self) -> &DoConv {
        &self.mask
    }

    pub fn cbam(&self) -> &Cbam {
        &self.cbam
    }

    /// Convolutions of the dense blocks, dilated branches and projection.
    pub fn refinement_convs(&self) -> Vec<&DoConv> {
        let mut v: Vec<&DoConv> = Vec::new();
        for b in &self.dense {
            v.extend(b.layers.iter());
            v.push(&b.proj);
        }
        v.extend(self.dilated.iter());
        v.push(&self.rf_proj);
        v
    }

    /// `(f_fuse, A_m)`: 3x3 conv over `[f_e, f]`, then a sigmoid 1x1 mask.
    pub fn fuse_and_mask<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, f: &Var<'g, T>, f_e: &Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        if f.shape() != f_e.shape() {
            return Err(Error::invalid(
                "fuse_and_mask",
                format!("operand shapes differ: {:?} vs {:?}", f.shape(), f_e.shape()),
            ));
        }
        let f_fuse = self.fuse.forward(ctx, &Var::cat_channels(&[f_e, f]));
        let a_m = self.mask.forward(ctx, &f_fuse).sigmoid();
        Ok((f_fuse, a_m))
    }

    pub fn cbam_forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Var<'g, T> {
        self.cbam.forward(ctx, x)
    }

    pub fn dense_refine<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Var<'g, T> {
        self.dense.iter().fold(x.clone(), |h, b| b.forward(ctx, &h))
    }

    /// `ReLU(proj(sum_r conv_r(x')) + x')` over dilations 1, 3, 5.
    pub fn multiscale_rf<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x_prime: &Var<'g, T>) -> Var<'g, T> {
        let mut branches = self.dilated.iter().map(|c| c.forward(ctx, x_prime));
        let first = branches.next().expect("three dilations");
        let sum = branches.fold(first, |acc, b| acc.add(&b));
        self.rf_proj.forward(ctx, &sum).add(x_prime).relu()
    }

    /// Full level pipeline given the level's edge map.
    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, f: &Var<'g, T>, f_h: &Var<'g, T>) -> Result<Var<'g, T>> {
        if f.shape()[1] != self.channels {
            return Err(Error::Shape { op: "mdpm", dim: "channels", expected: self.channels, got: f.shape()[1] });
        }
        let f_e = edge_enhance(f, f_h)?;
        let (f_fuse, a_m) = self.fuse_and_mask(ctx, f, &f_e)?;
        let f_hat = gated_residual(&f_fuse, &a_m, f, &ctx.param(self.g));
        let x = self.cbam_forward(ctx, &f_hat);
        let x_prime = self.dense_refine(ctx, &x);
        Ok(self.multiscale_rf(ctx, &x_prime))
    }
}

impl VisitConvs for MdpmLevel {
    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut DoConv)) {
        f(&mut self.fuse);
        f(&mut self.mask);
        self.cbam.visit_convs(f);
        for b in &mut self.dense {
            b.visit_convs(f);
        }
        self.dilated.iter_mut().for_each(|c| f(c));
        f(&mut self.rf_proj);
    }
}

/// One [`MdpmLevel`] per pyramid level, shared by both dates.
#[derive(Debug, Clone)]
pub struct Mdpm {
    pub levels: Vec<MdpmLevel>,
    pub sigma: f64,
}

impl Mdpm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, sigma: f64) -> Self {
        init.scope("mdpm", |init| Mdpm {
            levels: LEVEL_CHANNELS
                .iter()
                .enumerate()
                .map(|(i, &c)| init.scope(format!("level{i}"), |init| MdpmLevel::new(init, c)))
                .collect(),
            sigma,
        })
    }

    /// Refines every level of `pyramid`; `source` is the raw `[B,3,H,W]`
    /// image the pyramid was computed from.
    pub fn forward<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        pyramid: &FeaturePyramid<Var<'g, T>>,
        source: &Tensor<T>,
    ) -> Result<FeaturePyramid<Var<'g, T>>> {
        pyramid.try_map(|i, f| {
            let [b, _, h, w] = f.shape();
            if source.batch() != b {
                return Err(Error::Shape { op: "mdpm", dim: "batch", expected: b, got: source.batch() });
            }
            let f_h = ctx.constant(highfreq_map(source, h, w, self.sigma)?);
            self.levels[i].forward(ctx, f, &f_h)
        })
    }
}

impl VisitConvs for Mdpm {
    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut DoConv)) {
        self.levels.iter_mut().for_each(|l| l.visit_convs(f));
    }
}
