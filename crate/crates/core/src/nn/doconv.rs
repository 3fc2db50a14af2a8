//! Depthwise over-parameterized convolution.
//!
//! A layer carries a depthwise operator `D: [taps, d_mul, c_in]` and a
//! conventional operator `W: [c_out, d_mul, c_in]`. Contracting them over
//! `d_mul` gives an ordinary `[c_out, taps, c_in]` kernel, so training sees
//! the over-parameterized pair while inference can run on the single folded
//! kernel with identical outputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{expect_dim, Error, Result};
use crate::kernels::{self, ConvSpec};
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    #[serde(default = "one")]
    pub dilation: usize,
    pub c_in: usize,
    pub c_out: usize,
}

fn one() -> usize {
    1
}

impl ConvGeometry {
    /// Square kernel, unit dilation.
    pub fn new(kernel: usize, stride: usize, padding: usize, c_in: usize, c_out: usize) -> Self {
        ConvGeometry {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            dilation: 1,
            c_in,
            c_out,
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn taps(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    pub fn spec(&self) -> ConvSpec {
        ConvSpec::new(self.stride, self.padding, self.dilation)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.kernel_h, "kernel_h"),
            (self.kernel_w, "kernel_w"),
            (self.stride, "stride"),
            (self.dilation, "dilation"),
            (self.c_in, "c_in"),
            (self.c_out, "c_out"),
        ];
        for (v, name) in checks {
            if v == 0 {
                return Err(Error::invalid("ConvGeometry", format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Output `(H_out, W_out)` for an input of `(h, w)`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let spec = self.spec();
        let ho = spec.out_extent(h, self.kernel_h).ok_or_else(|| {
            Error::invalid("conv", format!("height {h} smaller than kernel extent after padding"))
        })?;
        let wo = spec.out_extent(w, self.kernel_w).ok_or_else(|| {
            Error::invalid("conv", format!("width {w} smaller than kernel extent after padding"))
        })?;
        Ok((ho, wo))
    }

    fn check_input<T: Scalar>(&self, op: &'static str, input: &Tensor<T>) -> Result<()> {
        self.validate()?;
        expect_dim(op, "input channels", self.c_in, input.channels())?;
        self.output_hw(input.height(), input.width()).map(|_| ())
    }
}

/// Trainable pair `(D, W)` of one over-parameterized convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DOConvParams<T> {
    pub geometry: ConvGeometry,
    pub d_mul: usize,
    /// `[taps, d_mul, c_in, 1]`
    pub depthwise: Tensor<T>,
    /// `[c_out, d_mul, c_in, 1]`
    pub conventional: Tensor<T>,
    /// `[c_out, 1, 1, 1]`
    pub bias: Option<Tensor<T>>,
}

/// A single conventional kernel, `[c_out, kernel_h, kernel_w, c_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedConvParams<T> {
    pub geometry: ConvGeometry,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> DOConvParams<T> {
    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        g.validate()?;
        if self.d_mul < g.taps() {
            return Err(Error::invalid(
                "DOConvParams",
                format!("d_mul {} below kernel taps {}", self.d_mul, g.taps()),
            ));
        }
        let op = "DOConvParams";
        let [t, m, c, one] = self.depthwise.shape();
        expect_dim(op, "depthwise taps", g.taps(), t)?;
        expect_dim(op, "depthwise d_mul", self.d_mul, m)?;
        expect_dim(op, "depthwise c_in", g.c_in, c)?;
        expect_dim(op, "depthwise trailing", 1, one)?;
        let [o, m, c, one] = self.conventional.shape();
        expect_dim(op, "conventional c_out", g.c_out, o)?;
        expect_dim(op, "conventional d_mul", self.d_mul, m)?;
        expect_dim(op, "conventional c_in", g.c_in, c)?;
        expect_dim(op, "conventional trailing", 1, one)?;
        if let Some(b) = &self.bias {
            expect_dim(op, "bias length", g.c_out, b.numel())?;
        }
        Ok(())
    }
}

impl<T: Scalar> FoldedConvParams<T> {
    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        g.validate()?;
        let op = "FoldedConvParams";
        let [o, kh, kw, c] = self.weight.shape();
        expect_dim(op, "c_out", g.c_out, o)?;
        expect_dim(op, "kernel_h", g.kernel_h, kh)?;
        expect_dim(op, "kernel_w", g.kernel_w, kw)?;
        expect_dim(op, "c_in", g.c_in, c)?;
        if let Some(b) = &self.bias {
            expect_dim(op, "bias length", g.c_out, b.numel())?;
        }
        Ok(())
    }
}

/// Plain sliding-window convolution with a folded kernel.
pub fn conventional_conv<T: Scalar>(kernel: &FoldedConvParams<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    kernel.validate()?;
    kernel.geometry.check_input("conventional_conv", input)?;
    Ok(kernels::conv2d(
        input,
        &kernel.weight,
        kernel.bias.as_ref(),
        kernel.geometry.spec(),
    ))
}

/// Per-channel convolution with `d_mul` kernels per input channel; output
/// channel `c * d_mul + m` holds input channel `c` filtered by slice `m`.
pub fn depthwise_conv<T: Scalar>(
    depthwise: &Tensor<T>,
    d_mul: usize,
    geometry: &ConvGeometry,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    if d_mul < 1 {
        return Err(Error::invalid("depthwise_conv", "d_mul must be >= 1"));
    }
    geometry.check_input("depthwise_conv", input)?;
    let [t, m, c, _] = depthwise.shape();
    expect_dim("depthwise_conv", "depthwise taps", geometry.taps(), t)?;
    expect_dim("depthwise_conv", "depthwise d_mul", d_mul, m)?;
    expect_dim("depthwise_conv", "depthwise c_in", geometry.c_in, c)?;
    let (ho, wo) = geometry.output_hw(input.height(), input.width())?;
    let (h, w) = (input.height() as isize, input.width() as isize);
    let g = geometry;
    let cin = g.c_in;
    Ok(Tensor::from_fn([input.batch(), cin * d_mul, ho, wo], |[n, oc, oy, ox]| {
        let (ci, mi) = (oc / d_mul, oc % d_mul);
        let mut acc = T::zero();
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                if iy < 0 || ix < 0 || iy >= h || ix >= w {
                    continue;
                }
                let tap = ky * g.kernel_w + kx;
                acc += depthwise.at(tap, mi, ci, 0) * input.at(n, ci, iy as usize, ix as usize);
            }
        }
        acc
    }))
}

/// `W'[o, t, c] = sum_m D[t, m, c] * W[o, m, c]`; bias passes through.
pub fn compose_kernel<T: Scalar>(params: &DOConvParams<T>) -> Result<FoldedConvParams<T>> {
    params.validate()?;
    let g = params.geometry;
    Ok(FoldedConvParams {
        geometry: g,
        weight: kernels::compose(&params.depthwise, &params.conventional, g.kernel_h, g.kernel_w),
        bias: params.bias.clone(),
    })
}

pub fn doconv_forward<T: Scalar>(params: &DOConvParams<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let folded = compose_kernel(params)?;
    conventional_conv(&folded, input)
}

/// Identity-embedded depthwise operator: `D[t, m, c] = 1` iff `m == t`.
pub fn identity_depthwise<T: Scalar>(taps: usize, d_mul: usize, c_in: usize) -> Tensor<T> {
    Tensor::from_fn([taps, d_mul, c_in, 1], |[t, m, _, _]| {
        if t == m {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Fan-in scaled uniform bound for a kernel feeding a ReLU.
pub(crate) fn relu_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub fn init_doconv<T: Scalar>(geometry: ConvGeometry, d_mul: usize, seed: u64) -> Result<DOConvParams<T>> {
    geometry.validate()?;
    if d_mul < geometry.taps() {
        return Err(Error::invalid(
            "init_doconv",
            format!("d_mul {d_mul} below kernel taps {}", geometry.taps()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = relu_bound(geometry.taps() * geometry.c_in);
    let conventional =
        Tensor::rand_uniform([geometry.c_out, d_mul, geometry.c_in, 1], -bound, bound, &mut rng);
    Ok(DOConvParams {
        geometry,
        d_mul,
        depthwise: identity_depthwise(geometry.taps(), d_mul, geometry.c_in),
        conventional,
        bias: Some(Tensor::zeros([geometry.c_out, 1, 1, 1])),
    })
}

/// Weight initialization family for a network convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    /// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, for layers followed by ReLU.
    Relu,
    /// `U(-1 / sqrt(fan_in), 1 / sqrt(fan_in))`.
    Linear,
}

/// Network convolution layer backed by parameter-store slots.
#[derive(Debug, Clone)]
pub struct DoConv {
    name: String,
    geometry: ConvGeometry,
    d_mul: usize,
    depthwise: Option<ParamId>,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl DoConv {
    /// Registers `<name>.dw`, `<name>.w` and optionally `<name>.bias`, with
    /// `d_mul = kernel_h * kernel_w` and identity-initialized `D`.
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        geometry: ConvGeometry,
        bias: bool,
        w_init: WeightInit,
    ) -> Self {
        let d_mul = geometry.taps();
        let fan_in = geometry.taps() * geometry.c_in;
        let bound = match w_init {
            WeightInit::Relu => relu_bound(fan_in),
            WeightInit::Linear => 1.0 / (fan_in as f64).sqrt(),
        };
        init.scope(name, |init| {
            let depthwise = init.tensor("dw", identity_depthwise(geometry.taps(), d_mul, geometry.c_in));
            let weight = init.uniform("w", [geometry.c_out, d_mul, geometry.c_in, 1], bound);
            let bias = bias.then(|| init.zeros("bias", [geometry.c_out, 1, 1, 1]));
            DoConv {
                name: name.to_string(),
                geometry,
                d_mul,
                depthwise: Some(depthwise),
                weight,
                bias,
            }
        })
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geometry
    }

    pub fn d_mul(&self) -> usize {
        self.d_mul
    }

    pub fn is_folded(&self) -> bool {
        self.depthwise.is_none()
    }

    pub fn depthwise_id(&self) -> Option<ParamId> {
        self.depthwise
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> Option<ParamId> {
        self.bias
    }

    /// Effective `[c_out, kh, kw, c_in]` kernel on the tape.
    pub fn kernel<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>) -> Var<'g, T> {
        let g = self.geometry;
        match self.depthwise {
            Some(d) => ctx
                .param(d)
                .compose_kernel(&ctx.param(self.weight), g.kernel_h, g.kernel_w),
            None => ctx.param(self.weight),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Var<'g, T> {
        let kernel = self.kernel(ctx);
        let bias = self.bias.map(|b| ctx.param(b));
        x.conv2d(&kernel, bias.as_ref(), self.geometry.spec())
    }

    /// Snapshot of the trainable pair, if not yet folded.
    pub fn params<T: Scalar>(&self, store: &ParamStore<T>) -> Option<DOConvParams<T>> {
        let d = self.depthwise?;
        Some(DOConvParams {
            geometry: self.geometry,
            d_mul: self.d_mul,
            depthwise: store.get(d).clone(),
            conventional: store.get(self.weight).clone(),
            bias: self.bias.map(|b| store.get(b).clone()),
        })
    }

    pub fn folded_params<T: Scalar>(&self, store: &ParamStore<T>) -> FoldedConvParams<T> {
        let g = self.geometry;
        let weight = match self.depthwise {
            Some(d) => kernels::compose(store.get(d), store.get(self.weight), g.kernel_h, g.kernel_w),
            None => store.get(self.weight).clone(),
        };
        FoldedConvParams {
            geometry: g,
            weight,
            bias: self.bias.map(|b| store.get(b).clone()),
        }
    }

    /// Replaces `(D, W)` by the composed kernel stored as `<name>.weight`.
    /// No-op when already folded.
    pub fn fold<T: Scalar>(&mut self, store: &mut ParamStore<T>) {
        let Some(d) = self.depthwise else {
            return;
        };
        let folded = self.folded_params(store).weight;
        let prefix = store
            .name(d)
            .strip_suffix(".dw")
            .expect("depthwise parameter name")
            .to_string();
        store.remove(d);
        store.remove(self.weight);
        self.weight = store.insert(format!("{prefix}.weight"), crate::params::Kind::Param, folded);
        self.depthwise = None;
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Anything that owns convolution layers.
pub trait VisitConvs {
    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut DoConv));
}

impl VisitConvs for DoConv {
    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut DoConv)) {
        f(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::params::Mode;
    use rand::Rng;

    fn rand_t(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
    }

    /// Literal patch loop: each output is the inner product of the kernel
    /// with its receptive patch.
    fn conv_patch_oracle(k: &FoldedConvParams<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let g = k.geometry;
        let (ho, wo) = g.output_hw(x.height(), x.width()).unwrap();
        Tensor::from_fn([x.batch(), g.c_out, ho, wo], |[n, o, oy, ox]| {
            let mut patch = Vec::new();
            let mut kern = Vec::new();
            for ky in 0..g.kernel_h {
                for kx in 0..g.kernel_w {
                    for c in 0..g.c_in {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        let inside = iy >= 0 && ix >= 0 && iy < x.height() as isize && ix < x.width() as isize;
                        patch.push(if inside { x.at(n, c, iy as usize, ix as usize) } else { 0.0 });
                        kern.push(k.weight.at(o, ky, kx, c));
                    }
                }
            }
            let b = k.bias.as_ref().map_or(0.0, |b| b.data()[o]);
            patch.iter().zip(&kern).map(|(p, w)| p * w).sum::<f64>() + b
        })
    }

    #[test]
    fn conventional_conv_of_ones_is_nine() {
        let g = ConvGeometry::new(3, 1, 0, 1, 1);
        let k = FoldedConvParams { geometry: g, weight: Tensor::<f64>::ones([1, 3, 3, 1]), bias: None };
        let y = conventional_conv(&k, &Tensor::ones([1, 1, 3, 3])).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn conventional_conv_zero_kernel() {
        let g = ConvGeometry::new(3, 1, 1, 2, 3);
        let k = FoldedConvParams { geometry: g, weight: Tensor::<f64>::zeros([3, 3, 3, 2]), bias: None };
        let y = conventional_conv(&k, &rand_t([1, 2, 5, 5], 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conventional_conv_matches_patch_loop() {
        let g = ConvGeometry::new(3, 1, 0, 2, 3);
        let k = FoldedConvParams {
            geometry: g,
            weight: rand_t([3, 3, 3, 2], 2),
            bias: Some(rand_t([3, 1, 1, 1], 3)),
        };
        let x = rand_t([1, 2, 4, 4], 4);
        let y = conventional_conv(&k, &x).unwrap();
        assert!(y.max_abs_diff(&conv_patch_oracle(&k, &x)) < 1e-6);
    }

    #[test]
    fn conventional_conv_rejects_channel_mismatch() {
        let g = ConvGeometry::new(3, 1, 0, 2, 3);
        let k = FoldedConvParams { geometry: g, weight: Tensor::<f64>::zeros([3, 3, 3, 2]), bias: None };
        let err = conventional_conv(&k, &Tensor::zeros([1, 3, 4, 4])).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
        let err = conventional_conv(&k, &Tensor::zeros([1, 2, 2, 2])).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }

    #[test]
    fn depthwise_center_tap_is_crop() {
        let g = ConvGeometry::new(3, 1, 0, 2, 2);
        let d = Tensor::<f64>::from_fn([9, 1, 2, 1], |[t, _, _, _]| if t == 4 { 1.0 } else { 0.0 });
        let x = rand_t([1, 2, 5, 5], 5);
        let y = depthwise_conv(&d, 1, &g, &x).unwrap();
        assert_eq!(y.shape(), [1, 2, 3, 3]);
        for c in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(y.at(0, c, i, j), x.at(0, c, i + 1, j + 1));
                }
            }
        }
    }

    #[test]
    fn depthwise_zero_and_invalid() {
        let g = ConvGeometry::new(3, 1, 1, 3, 3);
        let y = depthwise_conv(&Tensor::<f64>::zeros([9, 9, 3, 1]), 9, &g, &rand_t([1, 3, 5, 5], 6)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(depthwise_conv(&Tensor::<f64>::zeros([9, 0, 3, 1]), 0, &g, &rand_t([1, 3, 5, 5], 6)).is_err());
    }

    #[test]
    fn depthwise_matches_per_channel_loop() {
        let g = ConvGeometry::new(3, 1, 0, 3, 3);
        let d = rand_t([9, 9, 3, 1], 7);
        let x = rand_t([1, 3, 5, 5], 8);
        let y = depthwise_conv(&d, 9, &g, &x).unwrap();
        for c in 0..3 {
            for m in 0..9 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut want = 0.0;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                want += d.at(ky * 3 + kx, m, c, 0) * x.at(0, c, oy + ky, ox + kx);
                            }
                        }
                        assert!((y.at(0, c * 9 + m, oy, ox) - want).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn compose_identity_and_zero() {
        let g = ConvGeometry::new(3, 1, 1, 2, 4);
        let w = rand_t([4, 9, 2, 1], 9);
        let p = DOConvParams {
            geometry: g,
            d_mul: 9,
            depthwise: identity_depthwise(9, 9, 2),
            conventional: w.clone(),
            bias: None,
        };
        let f = compose_kernel(&p).unwrap();
        assert_eq!(f.weight.data(), w.data());
        let z = DOConvParams { conventional: Tensor::zeros([4, 9, 2, 1]), ..p };
        assert!(compose_kernel(&z).unwrap().weight.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compose_matches_explicit_contraction() {
        let g = ConvGeometry::new(3, 1, 1, 2, 4);
        let p = DOConvParams {
            geometry: g,
            d_mul: 9,
            depthwise: rand_t([9, 9, 2, 1], 10),
            conventional: rand_t([4, 9, 2, 1], 11),
            bias: Some(rand_t([4, 1, 1, 1], 12)),
        };
        let f = compose_kernel(&p).unwrap();
        for o in 0..4 {
            for t in 0..9 {
                for c in 0..2 {
                    let mut want = 0.0;
                    for m in 0..9 {
                        want += p.depthwise.at(t, m, c, 0) * p.conventional.at(o, m, c, 0);
                    }
                    assert!((f.weight.at(o, t / 3, t % 3, c) - want).abs() < 1e-6);
                }
            }
        }
        assert_eq!(f.bias, p.bias);
    }

    #[test]
    fn compose_rejects_small_d_mul() {
        let g = ConvGeometry::new(3, 1, 1, 2, 4);
        let p = DOConvParams::<f64> {
            geometry: g,
            d_mul: 4,
            depthwise: Tensor::zeros([9, 4, 2, 1]),
            conventional: Tensor::zeros([4, 4, 2, 1]),
            bias: None,
        };
        assert!(compose_kernel(&p).is_err());
    }

    #[test]
    fn doconv_identity_and_zero_input() {
        let p = init_doconv::<f64>(ConvGeometry::new(3, 1, 1, 2, 3), 9, 1).unwrap();
        let x = rand_t([1, 2, 6, 6], 13);
        let direct = FoldedConvParams {
            geometry: p.geometry,
            weight: p.conventional.clone().reshape([3, 3, 3, 2]).unwrap(),
            bias: p.bias.clone(),
        };
        assert_eq!(doconv_forward(&p, &x).unwrap(), conventional_conv(&direct, &x).unwrap());
        let y0 = doconv_forward(&p, &Tensor::zeros([1, 2, 6, 6])).unwrap();
        assert!(y0.data().iter().all(|&v| v == 0.0));
    }

    /// Feature-composition route: depthwise first, then contract the
    /// `d_mul * c_in` features with `W` per pixel.
    #[test]
    fn doconv_equals_depthwise_then_pointwise() {
        let g = ConvGeometry::new(3, 2, 1, 2, 3);
        let mut p = init_doconv::<f64>(g, 11, 4).unwrap();
        p.depthwise = rand_t([9, 11, 2, 1], 14);
        let x = rand_t([2, 2, 7, 7], 15);
        let feats = depthwise_conv(&p.depthwise, 11, &g, &x).unwrap();
        let [b, _, ho, wo] = feats.shape();
        let want = Tensor::from_fn([b, 3, ho, wo], |[n, o, y, xx]| {
            let mut acc = 0.0;
            for c in 0..2 {
                for m in 0..11 {
                    acc += p.conventional.at(o, m, c, 0) * feats.at(n, c * 11 + m, y, xx);
                }
            }
            acc
        });
        assert!(doconv_forward(&p, &x).unwrap().max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn init_doconv_properties() {
        let g = ConvGeometry::new(3, 1, 1, 3, 5);
        let a = init_doconv::<f32>(g, 9, 42).unwrap();
        let b = init_doconv::<f32>(g, 9, 42).unwrap();
        assert_eq!(a, b);
        let c = init_doconv::<f32>(g, 9, 43).unwrap();
        assert!(a.conventional.data().iter().zip(c.conventional.data()).any(|(x, y)| x != y));
        let f = compose_kernel(&a).unwrap();
        assert_eq!(f.weight.data(), a.conventional.data());
        assert!(init_doconv::<f32>(g, 8, 1).is_err());
    }

    #[test]
    fn doconv_linearity_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = ConvGeometry::new(3, 1, 1, 2, 2);
        let mut p = init_doconv::<f64>(g, 10, 2).unwrap();
        p.bias = None;
        p.depthwise = rand_t([9, 10, 2, 1], 16);
        let x = rand_t([1, 2, 5, 5], 17);
        let y = rand_t([1, 2, 5, 5], 18);
        let (a, b): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mix = x.zip_map(&y, |u, v| a * u + b * v);
        let lhs = doconv_forward(&p, &mix).unwrap();
        let rhs = doconv_forward(&p, &x)
            .unwrap()
            .zip_map(&doconv_forward(&p, &y).unwrap(), |u, v| a * u + b * v);
        assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn layer_fold_preserves_output_and_drops_depthwise() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(&mut store, 3);
        let mut conv = DoConv::new(&mut init, "c", ConvGeometry::new(3, 1, 1, 2, 3), true, WeightInit::Relu);
        // perturb D away from identity so folding is non-trivial
        let d = conv.depthwise_id().unwrap();
        *store.get_mut(d) = rand_t([9, 9, 2, 1], 19);
        let x = rand_t([1, 2, 6, 6], 20);
        let run = |conv: &DoConv, store: &ParamStore<f64>| {
            let g = Graph::inference();
            let ctx = Ctx::new(&g, store, Mode::Eval);
            conv.forward(&ctx, &g.constant(x.clone())).value().clone()
        };
        let before = run(&conv, &store);
        let n_before = store.param_count();
        conv.fold(&mut store);
        assert!(conv.is_folded());
        assert!(store.find("c.weight").is_some() && store.find("c.dw").is_none());
        assert!(store.param_count() < n_before);
        let after = run(&conv, &store);
        assert!(before.max_abs_diff(&after) < 1e-12);
        conv.fold(&mut store);
        assert_eq!(run(&conv, &store), after);
    }
}
