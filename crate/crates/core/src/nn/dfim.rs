//! Differential feature integration and the prediction end layer.
//!
//! Stage one blends the two dates' shallow features with attentional
//! feature fusion. Stage two crosses the blended shallow feature with the
//! upsampled deep feature through pixel (`f_L`) and channel (`f_C`)
//! attention, then normalizes.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::doconv::{ConvGeometry, DoConv, VisitConvs, WeightInit};
use crate::nn::norm::BatchNorm;
use crate::params::{Ctx, Init};
use crate::scalar::Scalar;

pub const DEFAULT_REDUCTION: usize = 4;

/// How the second-stage attention outputs are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AddMode {
    /// Each attention map gates its own conv feature before the sum.
    #[default]
    Modulated,
    /// Raw attention logits are summed directly.
    Literal,
}

fn pointwise(init: &mut Init<'_, impl Scalar>, name: &str, c_in: usize, c_out: usize, bias: bool, wi: WeightInit) -> DoConv {
    DoConv::new(init, name, ConvGeometry::new(1, 1, 0, c_in, c_out), bias, wi)
}

/// Per-pixel bottleneck producing attention logits of the input's shape.
#[derive(Debug, Clone)]
pub struct LocalAttention {
    reduce: DoConv,
    bn: BatchNorm,
    expand: DoConv,
}

impl LocalAttention {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        init.scope(name, |init| LocalAttention {
            reduce: pointwise(init, "reduce", channels, hidden, false, WeightInit::Relu),
            bn: BatchNorm::new(init, "bn", hidden),
            expand: pointwise(init, "expand", hidden, channels, true, WeightInit::Linear),
        })
    }

    pub fn reduce_conv(&self) -> &DoConv {
        &self.reduce
    }

    pub fn expand_conv(&self) -> &DoConv {
        &self.expand
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Var<'g, T> {
        let h = self.bn.forward(ctx, &self.reduce.forward(ctx, x)).relu();
        self.expand.forward(ctx, &h)
    }
}

impl VisitConvs for LocalAttention {
    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut DoConv)) {
        f(&mut self.reduce);
        f(&mut self.expand);
    }
}

/// Global-average-pooled bottleneck producing `[B, C, 1, 1]` logits.
#[derive(Debug, Clone)]
pub struct ChannelLogits {
    reduce: DoConv,
    expand: DoConv,
}

impl ChannelLogits {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        init.scope(name, |init| ChannelLogits {
            reduce: pointwise(init, "reduce", channels, hidden, true, WeightInit::Relu),
            expand: pointwise(init, "expand", hidden, channels, true, WeightInit::Linear),
        })
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Var<'g, T> {
        self.expand.forward(ctx, &self.reduce.forward(ctx, &x.mean_hw()).relu())
    }
}

impl VisitConvs for ChannelLogits {
    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut DoConv)) {
        f(&mut self.reduce);
        f(&mut self.expand);
    }
}

#[derive(Debug, Clone)]
pub struct Dfim {
    channels: usize,
    aff_local: LocalAttention,
    aff_channel: ChannelLogits,
    local: LocalAttention,
    channel: ChannelLogits,
    conv_shallow: DoConv,
    conv_deep: DoConv,
    bn: BatchNorm,
    pub add_mode: AddMode,
}

impl Dfim {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize, reduction: usize) -> Self {
        init.scope(name, |init| Dfim {
            channels,
            aff_local: LocalAttention::new(init, "aff_local", channels, reduction),
            aff_channel: ChannelLogits::new(init, "aff_channel", channels, reduction),
            local: LocalAttention::new(init, "local", channels, reduction),
            channel: ChannelLogits::new(init, "channel", channels, reduction),
            conv_shallow: DoConv::new(init, "conv_shallow", ConvGeometry::new(3, 1, 1, channels, channels), true, WeightInit::Linear),
            conv_deep: DoConv::new(init, "conv_deep", ConvGeometry::new(3, 1, 1, channels, channels), true, WeightInit::Linear),
            bn: BatchNorm::new(init, "bn", channels),
            add_mode: AddMode::default(),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn aff_local(&self) -> &LocalAttention {
        &self.aff_local
    }

    pub fn local(&self) -> &LocalAttention {
        &self.local
    }

    /// Fusion weights `sigmoid(f_C(i_r + i_p) + f_L(i_r + i_p))`.
    pub fn aff_weights<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, i_r: &Var<'g, T>, i_p: &Var<'g, T>) -> Var<'g, T> {
        let i_f = i_r.add(i_p);
        self.aff_channel.forward(ctx, &i_f).add(&self.aff_local.forward(ctx, &i_f)).sigmoid()
    }

    /// `Wt ⊗ i_p + (1 − Wt) ⊗ i_r`.
    pub fn aff_fuse<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, i_r: &Var<'g, T>, i_p: &Var<'g, T>) -> Result<Var<'g, T>> {
        if i_r.shape() != i_p.shape() {
            return Err(Error::invalid(
                "aff_fuse",
                format!("shapes differ: {:?} vs {:?}", i_r.shape(), i_p.shape()),
            ));
        }
        let wt = self.aff_weights(ctx, i_r, i_p);
        Ok(i_r.lerp(i_p, &wt))
    }

    /// `sigmoid(f_L(i_l)) ⊗ sigmoid(f_C(i_d))`.
    pub fn multiplicative_gate<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, i_l: &Var<'g, T>, i_d: &Var<'g, T>) -> Var<'g, T> {
        self.local
            .forward(ctx, i_l)
            .sigmoid()
            .mul(&self.channel.forward(ctx, i_d).sigmoid())
    }

    pub fn additive_branch<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, i_l: &Var<'g, T>, i_d: &Var<'g, T>) -> Var<'g, T> {
        let c_l = self.conv_shallow.forward(ctx, i_l);
        let c_d = self.conv_deep.forward(ctx, i_d);
        let a_l = self.local.forward(ctx, &c_l);
        let a_d = self.channel.forward(ctx, &c_d);
        match self.add_mode {
            AddMode::Modulated => c_l.mul(&a_l.sigmoid()).add(&c_d.mul(&a_d.sigmoid())),
            AddMode::Literal => a_l.add(&a_d),
        }
    }

    /// `ReLU(BN(I_add)) ⊗ I_mul` for deep feature `i_d` (already resized and
    /// projected to this level) and the two dates' shallow features.
    pub fn forward<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        i_d: &Var<'g, T>,
        i_r: &Var<'g, T>,
        i_p: &Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        if i_d.shape() != i_r.shape() {
            return Err(Error::invalid(
                "dfim",
                format!("deep feature {:?} does not match shallow {:?}", i_d.shape(), i_r.shape()),
            ));
        }
        if i_r.shape()[1] != self.channels {
            return Err(Error::Shape { op: "dfim", dim: "channels", expected: self.channels, got: i_r.shape()[1] });
        }
        let i_l = self.aff_fuse(ctx, i_r, i_p)?;
        let i_mul = self.multiplicative_gate(ctx, &i_l, i_d);
        let i_add = self.additive_branch(ctx, &i_l, i_d);
        Ok(self.bn.forward(ctx, &i_add).relu().mul(&i_mul))
    }
}

impl VisitConvs for Dfim {
    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut DoConv)) {
        self.aff_local.visit_convs(f);
        self.aff_channel.visit_convs(f);
        self.local.visit_convs(f);
        self.channel.visit_convs(f);
        f(&mut self.conv_shallow);
        f(&mut self.conv_deep);
    }
}

/// 3x3 conv, normalization, ReLU, 1x1 to one logit channel, bilinear x2.
#[derive(Debug, Clone)]
pub struct EndLayer {
    conv: DoConv,
    bn: BatchNorm,
    head: DoConv,
}

impl EndLayer {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, channels: usize) -> Self {
        init.scope("endlayer", |init| EndLayer {
            conv: DoConv::new(init, "conv", ConvGeometry::new(3, 1, 1, channels, channels), false, WeightInit::Relu),
            bn: BatchNorm::new(init, "bn", channels),
            head: pointwise(init, "head", channels, 1, true, WeightInit::Linear),
        })
    }

    pub fn conv(&self) -> &DoConv {
        &self.conv
    }

    pub fn head(&self) -> &DoConv {
        &self.head
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Var<'g, T> {
        let [_, _, h, w] = x.shape();
        let y = self.bn.forward(ctx, &self.conv.forward(ctx, x)).relu();
        self.head.forward(ctx, &y).resize_bilinear(2 * h, 2 * w)
    }
}

impl VisitConvs for EndLayer {
    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut DoConv)) {
        f(&mut self.conv);
        f(&mut self.head);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::gradcheck::{check_param, loss_fn};
    use crate::params::{Mode, ParamStore};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand<T: Scalar>(shape: [usize; 4], seed: u64, amp: f64) -> Tensor<T> {
        Tensor::rand_uniform(shape, -amp, amp, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn dfim<T: Scalar>(c: usize) -> (Dfim, ParamStore<T>) {
        let mut store = ParamStore::new();
        let d = Dfim::new(&mut Init::new(&mut store, 8), "dfim", c, DEFAULT_REDUCTION);
        (d, store)
    }

    fn zero<T: Scalar>(store: &mut ParamStore<T>, c: &DoConv) {
        store.get_mut(c.weight_id()).data_mut().fill(T::zero());
        if let Some(b) = c.bias_id() {
            store.get_mut(b).data_mut().fill(T::zero());
        }
    }

    #[test]
    fn local_attention_shape_zero_and_locality() {
        let (d, mut store) = dfim::<f64>(8);
        let x = rand::<f64>([1, 8, 5, 5], 1, 1.0);
        let f = |store: &ParamStore<f64>, t: &Tensor<f64>| {
            let g = Graph::inference();
            let ctx = Ctx::new(&g, store, Mode::Eval);
            d.local().forward(&ctx, &g.constant(t.clone())).value().clone()
        };
        let a = f(&store, &x);
        assert_eq!(a.shape(), x.shape());
        let mut x2 = x.clone();
        for c in 0..8 {
            x2.set(0, c, 2, 3, 4.0);
        }
        let b = f(&store, &x2);
        for y in 0..5 {
            for xx in 0..5 {
                let same = (0..8).all(|c| a.at(0, c, y, xx) == b.at(0, c, y, xx));
                assert_eq!(same, (y, xx) != (2, 3), "pixel ({y},{xx})");
            }
        }
        let l = d.local().clone();
        zero(&mut store, l.reduce_conv());
        zero(&mut store, l.expand_conv());
        assert!(f(&store, &x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_logits_constant_zero_and_permutation() {
        let (d, mut store) = dfim::<f64>(8);
        let x = rand::<f64>([2, 8, 4, 4], 2, 1.0);
        let mut perm = x.clone();
        // reverse pixel order within every plane
        for p in perm.data_mut().chunks_mut(16) {
            p.reverse();
        }
        let run = |store: &ParamStore<f64>, t: &Tensor<f64>| {
            let g = Graph::inference();
            let ctx = Ctx::new(&g, store, Mode::Eval);
            d.channel.forward(&ctx, &g.constant(t.clone())).value().clone()
        };
        let (a, b) = (run(&store, &x), run(&store, &perm));
        assert_eq!(a.shape(), [2, 8, 1, 1]);
        assert!(a.max_abs_diff(&b) < 1e-14);
        let c = d.channel.clone();
        zero(&mut store, &c.reduce);
        zero(&mut store, &c.expand);
        assert!(run(&store, &x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aff_equal_operands_and_zero_attention() {
        let (d, mut store) = dfim::<f64>(8);
        let a = rand::<f64>([1, 8, 4, 4], 3, 1.0);
        let b = rand::<f64>([1, 8, 4, 4], 4, 1.0);
        {
            let g = Graph::inference();
            let ctx = Ctx::new(&g, &store, Mode::Eval);
            let av = g.constant(a.clone());
            assert_eq!(d.aff_fuse(&ctx, &av, &av).unwrap().value(), &a);
            assert!(d.aff_fuse(&ctx, &av, &g.constant(Tensor::zeros([1, 8, 4, 2]))).is_err());
        }
        let (al, ac) = (d.aff_local.clone(), d.aff_channel.clone());
        for c in [al.reduce_conv(), al.expand_conv(), &ac.reduce, &ac.expand] {
            zero(&mut store, c);
        }
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, Mode::Eval);
        let out = d.aff_fuse(&ctx, &g.constant(a.clone()), &g.constant(b.clone())).unwrap();
        assert!(out.value().max_abs_diff(&a.zip_map(&b, |x, y| (x + y) / 2.0)) < 1e-15);
    }

    #[test]
    fn aff_weights_are_swap_invariant() {
        let (d, store) = dfim::<f32>(16);
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, Mode::Eval);
        let a = g.constant(rand([2, 16, 4, 4], 5, 2.0));
        let b = g.constant(rand([2, 16, 4, 4], 6, 2.0));
        assert_eq!(d.aff_weights(&ctx, &a, &b).value(), d.aff_weights(&ctx, &b, &a).value());
    }

    #[test]
    fn dfim_ranges_and_zeroed_gate() {
        let (d, mut store) = dfim::<f64>(8);
        let (id, ir, ip) = (rand::<f64>([2, 8, 6, 6], 7, 2.0), rand([2, 8, 6, 6], 8, 2.0), rand([2, 8, 6, 6], 9, 2.0));
        {
            let g = Graph::inference();
            let ctx = Ctx::new(&g, &store, Mode::Eval);
            let (vd, vr, vp) = (g.constant(id.clone()), g.constant(ir.clone()), g.constant(ip.clone()));
            let il = d.aff_fuse(&ctx, &vr, &vp).unwrap();
            let mul = d.multiplicative_gate(&ctx, &il, &vd);
            assert!(mul.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
            let out = d.forward(&ctx, &vd, &vr, &vp).unwrap();
            assert!(out.value().data().iter().all(|&v| v >= 0.0));
            let pre = d.bn.forward(&ctx, &d.additive_branch(&ctx, &il, &vd)).relu();
            for (o, p) in out.value().data().iter().zip(pre.value().data()) {
                if *p == 0.0 {
                    assert_eq!(*o, 0.0);
                }
            }
            assert!(d.forward(&ctx, &vd, &vr, &g.constant(Tensor::zeros([2, 8, 6, 4]))).is_err());
            assert!(d.forward(&ctx, &g.constant(Tensor::zeros([2, 8, 3, 3])), &vr, &vp).is_err());
        }
        let l = d.local().clone();
        zero(&mut store, l.expand_conv());
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, Mode::Eval);
        let vd = g.constant(id);
        let il = d.aff_fuse(&ctx, &g.constant(ir), &g.constant(ip)).unwrap();
        let mul = d.multiplicative_gate(&ctx, &il, &vd);
        let expected = d.channel.forward(&ctx, &vd).sigmoid().scale(0.5);
        assert!(mul.value().max_abs_diff(&Tensor::from_fn(mul.shape(), |[n, c, _, _]| expected.value().at(n, c, 0, 0))) < 1e-15);
    }

    #[test]
    fn literal_mode_broadcasts_logits() {
        let (mut d, store) = dfim::<f64>(8);
        d.add_mode = AddMode::Literal;
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, Mode::Eval);
        let x = g.constant(rand([1, 8, 4, 4], 10, 1.0));
        let out = d.forward(&ctx, &x, &x, &x).unwrap();
        assert_eq!(out.shape(), [1, 8, 4, 4]);
    }

    #[test]
    fn endlayer_shape_and_signs() {
        let mut store = ParamStore::<f32>::new();
        let e = EndLayer::new(&mut Init::new(&mut store, 3), 64);
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, Mode::Eval);
        let (mut pos, mut neg) = (false, false);
        for s in 0..20 {
            let out = e.forward(&ctx, &g.constant(rand([1, 64, 16, 16], 20 + s, 1.0)));
            assert_eq!(out.shape(), [1, 1, 32, 32]);
            pos |= out.value().data().iter().any(|&v| v > 0.0);
            neg |= out.value().data().iter().any(|&v| v < 0.0);
        }
        assert!(pos && neg);
        let mut store = ParamStore::<f32>::new();
        let e8 = EndLayer::new(&mut Init::new(&mut store, 4), 8);
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, Mode::Eval);
        assert_eq!(e8.forward(&ctx, &g.constant(Tensor::zeros([2, 8, 128, 128]))).shape(), [2, 1, 256, 256]);
    }

    #[test]
    fn gradients_of_all_stages() {
        let mut store = ParamStore::new();
        let d = Dfim::new(&mut Init::new(&mut store, 8), "dfim", 4, 2);
        let e = EndLayer::new(&mut Init::new(&mut store, 5), 4);
        let (id, ir, ip) = (rand::<f64>([2, 4, 8, 8], 21, 1.0), rand([2, 4, 8, 8], 22, 1.0), rand([2, 4, 8, 8], 23, 1.0));
        let t = rand::<f64>([2, 1, 16, 16], 14, 1.0);
        let loss = loss_fn(|ctx| {
            let g = ctx.graph();
            let out = d.forward(ctx, &g.constant(id.clone()), &g.constant(ir.clone()), &g.constant(ip.clone()))?;
            Ok(e.forward(ctx, &out).mul(&g.constant(t.clone())).sum())
        });
        let mut ids = Vec::new();
        let mut dd = d.clone();
        dd.visit_convs(&mut |c| ids.extend([Some(c.weight_id()), c.depthwise_id()].into_iter().flatten()));
        let mut ee = e.clone();
        ee.visit_convs(&mut |c| ids.extend([Some(c.weight_id()), c.depthwise_id()].into_iter().flatten()));
        for mode in [Mode::Eval, Mode::Train] {
            for &id in &ids {
                let r = check_param(&store, id, mode, 1e-4, 16, &loss).unwrap();
                assert!(r.passes(1e-3), "{mode:?} {}: {r:?}", store.name(id));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn aff_is_convex_elementwise(seed in any::<u64>(), amp in 0.01f64..100.0) {
            let (d, store) = dfim::<f32>(8);
            let g = Graph::inference();
            let ctx = Ctx::new(&g, &store, Mode::Eval);
            let a = rand::<f32>([1, 8, 4, 4], seed, amp);
            let b = rand::<f32>([1, 8, 4, 4], seed ^ 0x9e37_79b9, amp);
            let out = d.aff_fuse(&ctx, &g.constant(a.clone()), &g.constant(b.clone())).unwrap();
            for ((&o, &x), &y) in out.value().data().iter().zip(a.data()).zip(b.data()) {
                prop_assert!(x.min(y) <= o && o <= x.max(y));
            }
        }
    }
}
