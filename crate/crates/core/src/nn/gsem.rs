//! Global semantic enhancement at the bottleneck.
//!
//! Squeeze-excitation style channel attention followed by four parallel
//! semantic context modules. Each context module convolves inside a `k x k`
//! grid of patches (patches are moved into the batch axis so the 3x3 kernel
//! never reads across a patch border), gates the result with a non-local
//! block evaluated on the `k x k` pooled grid, and scales by a learned `γ`.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::doconv::{ConvGeometry, DoConv, VisitConvs, WeightInit};
use crate::params::{Ctx, Init, ParamId};
use crate::scalar::Scalar;

pub const DEFAULT_KS: [usize; 4] = [1, 2, 4, 8];
pub const DEFAULT_REDUCTION: usize = 16;

fn pointwise(init: &mut Init<'_, impl Scalar>, name: &str, c_in: usize, c_out: usize, wi: WeightInit) -> DoConv {
    DoConv::new(init, name, ConvGeometry::new(1, 1, 0, c_in, c_out), true, wi)
}

#[derive(Debug, Clone)]
pub struct ChannelAttention {
    squeeze: DoConv,
    excite: DoConv,
}

impl ChannelAttention {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::invalid(
                "channel_attention",
                format!("{channels} channels are not divisible by reduction {reduction}"),
            ));
        }
        Ok(init.scope("ca", |init| ChannelAttention {
            squeeze: pointwise(init, "squeeze", channels, channels / reduction, WeightInit::Relu),
            excite: pointwise(init, "excite", channels / reduction, channels, WeightInit::Linear),
        }))
    }

    /// Per-channel weights `[B, C, 1, 1]` in `(0, 1)`.
    pub fn weights<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Var<'g, T> {
        let z = x.mean_hw();
        self.excite.forward(ctx, &self.squeeze.forward(ctx, &z).relu()).sigmoid()
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Var<'g, T> {
        x.mul(&self.weights(ctx, x))
    }
}

impl VisitConvs for ChannelAttention {
    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut DoConv)) {
        f(&mut self.squeeze);
        f(&mut self.excite);
    }
}

/// Embedded-Gaussian non-local block with residual output projection.
#[derive(Debug, Clone)]
pub struct NonLocal {
    theta: DoConv,
    phi: DoConv,
    g: DoConv,
    proj: DoConv,
}

impl NonLocal {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, channels: usize) -> Self {
        let inner = (channels / 2).max(1);
        init.scope("nonlocal", |init| NonLocal {
            theta: pointwise(init, "theta", channels, inner, WeightInit::Linear),
            phi: pointwise(init, "phi", channels, inner, WeightInit::Linear),
            g: pointwise(init, "g", channels, inner, WeightInit::Linear),
            proj: pointwise(init, "proj", inner, channels, WeightInit::Linear),
        })
    }

    pub fn theta(&self) -> &DoConv {
        &self.theta
    }

    pub fn phi(&self) -> &DoConv {
        &self.phi
    }

    pub fn g(&self) -> &DoConv {
        &self.g
    }

    pub fn proj(&self) -> &DoConv {
        &self.proj
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, w: &Var<'g, T>) -> Var<'g, T> {
        let th = self.theta.forward(ctx, w);
        let ph = self.phi.forward(ctx, w);
        let gv = self.g.forward(ctx, w);
        let y = Var::non_local_attention(&th, &ph, &gv);
        w.add(&self.proj.forward(ctx, &y))
    }
}

impl VisitConvs for NonLocal {
    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut DoConv)) {
        f(&mut self.theta);
        f(&mut self.phi);
        f(&mut self.g);
        f(&mut self.proj);
    }
}

/// Semantic context module for one grid size `k`.
#[derive(Debug, Clone)]
pub struct Scm {
    k: usize,
    patch_conv: DoConv,
    non_local: NonLocal,
    gamma: ParamId,
}

impl Scm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, channels: usize, k: usize) -> Self {
        init.scope(format!("scm{k}"), |init| Scm {
            k,
            patch_conv: DoConv::new(init, "patch", ConvGeometry::new(3, 1, 1, channels, channels), true, WeightInit::Linear),
            non_local: NonLocal::new(init, channels),
            gamma: init.zeros("gamma", [1, 1, 1, 1]),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn gamma_id(&self) -> ParamId {
        self.gamma
    }

    pub fn non_local(&self) -> &NonLocal {
        &self.non_local
    }

    pub fn patch_conv(&self) -> &DoConv {
        &self.patch_conv
    }

    pub fn check(&self, shape: [usize; 4]) -> Result<()> {
        let [_, _, h, w] = shape;
        if h % self.k != 0 || w % self.k != 0 {
            return Err(Error::invalid(
                "scm",
                format!("grid size {} does not divide {h}x{w}", self.k),
            ));
        }
        Ok(())
    }

    /// `γ · (upsample(nonlocal(pool_k(x))) ⊗ patchconv_k(x))`.
    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.check(x.shape())?;
        let [b, _, h, w] = x.shape();
        let local = self
            .patch_conv
            .forward(ctx, &x.patches_to_batch(self.k))
            .batch_to_patches(self.k, b);
        let context = self.non_local.forward(ctx, &x.block_avg_pool(self.k)).resize_bilinear(h, w);
        Ok(context.mul(&local).mul(&ctx.param(self.gamma)))
    }
}

impl VisitConvs for Scm {
    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut DoConv)) {
        f(&mut self.patch_conv);
        self.non_local.visit_convs(f);
    }
}

#[derive(Debug, Clone)]
pub struct Gsem {
    channel_attention: ChannelAttention,
    scms: Vec<Scm>,
    fuse: DoConv,
}

impl Gsem {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, channels: usize, reduction: usize, ks: &[usize]) -> Result<Self> {
        if ks.is_empty() || ks.contains(&0) {
            return Err(Error::invalid("gsem", format!("invalid grid sizes {ks:?}")));
        }
        init.scope("gsem", |init| {
            Ok(Gsem {
                channel_attention: ChannelAttention::new(init, channels, reduction)?,
                scms: ks.iter().map(|&k| Scm::new(init, channels, k)).collect(),
                fuse: pointwise(init, "fuse", ks.len() * channels, channels, WeightInit::Linear),
            })
        })
    }

    pub fn channel_attention(&self) -> &ChannelAttention {
        &self.channel_attention
    }

    pub fn scms(&self) -> &[Scm] {
        &self.scms
    }

    pub fn fuse_conv(&self) -> &DoConv {
        &self.fuse
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        for s in &self.scms {
            s.check(x.shape())?;
        }
        let xa = self.channel_attention.forward(ctx, x);
        let outs = self.scms.iter().map(|s| s.forward(ctx, &xa)).collect::<Result<Vec<_>>>()?;
        Ok(self.fuse.forward(ctx, &Var::cat_channels(&outs.iter().collect::<Vec<_>>())))
    }
}

impl VisitConvs for Gsem {
    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut DoConv)) {
        self.channel_attention.visit_convs(f);
        self.scms.iter_mut().for_each(|s| s.visit_convs(f));
        f(&mut self.fuse);
    }
}
