//! The full bi-temporal network and its forward pass.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::backbone::{Backbone, LEVEL_CHANNELS};
use crate::nn::dfim::{self, AddMode, Dfim, EndLayer};
use crate::nn::doconv::{ConvGeometry, DoConv, VisitConvs, WeightInit};
use crate::nn::gsem::{self, Gsem};
use crate::nn::mdpm::{self, Mdpm};
use crate::params::{Ctx, Init, Mode, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AddModeConfig {
    #[default]
    Modulated,
    Literal,
}

impl From<AddModeConfig> for AddMode {
    fn from(m: AddModeConfig) -> Self {
        match m {
            AddModeConfig::Modulated => AddMode::Modulated,
            AddModeConfig::Literal => AddMode::Literal,
        }
    }
}

/// Architecture hyperparameters. Everything needed to rebuild the same
/// parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Gaussian sigma of the edge map.
    pub sigma: f64,
    /// Grid sizes of the semantic context modules.
    pub ks: Vec<usize>,
    pub gsem_reduction: usize,
    pub dfim_reduction: usize,
    pub add_mode: AddModeConfig,
    /// Per-channel mean and std applied to `[0, 1]` RGB input.
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            sigma: mdpm::DEFAULT_SIGMA,
            ks: gsem::DEFAULT_KS.to_vec(),
            gsem_reduction: gsem::DEFAULT_REDUCTION,
            dfim_reduction: dfim::DEFAULT_REDUCTION,
            add_mode: AddModeConfig::Modulated,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            init_seed: 0,
        }
    }
}

/// One auxiliary prediction: a 1x1 conv to a single logit channel,
/// bilinearly resized to the label resolution.
#[derive(Debug, Clone)]
pub struct AuxHead {
    conv: DoConv,
}

impl AuxHead {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Self {
        AuxHead {
            conv: DoConv::new(init, name, ConvGeometry::new(1, 1, 0, channels, 1), true, WeightInit::Linear),
        }
    }

    pub fn conv(&self) -> &DoConv {
        &self.conv
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, feature: &Var<'g, T>, h: usize, w: usize) -> Var<'g, T> {
        self.conv.forward(ctx, feature).resize_bilinear(h, w)
    }
}

/// A logit map and the resolution of the feature it came from.
#[derive(Debug, Clone)]
pub struct AuxOutput<V> {
    pub logits: V,
    pub native: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct ForwardOutputs<V> {
    pub final_logits: V,
    /// out1, out2, out1 + out2, first fusion stage, second fusion stage.
    pub aux: Vec<AuxOutput<V>>,
}

impl<'g, T: Scalar> ForwardOutputs<Var<'g, T>> {
    pub fn values(&self) -> ForwardOutputs<Tensor<T>> {
        ForwardOutputs {
            final_logits: self.final_logits.value().clone(),
            aux: self
                .aux
                .iter()
                .map(|a| AuxOutput { logits: a.logits.value().clone(), native: a.native })
                .collect(),
        }
    }
}

pub const AUX_COUNT: usize = 5;

#[derive(Debug, Clone)]
pub struct MfdsNet {
    config: ModelConfig,
    backbone: Backbone,
    mdpm: Mdpm,
    gsem: Gsem,
    proj1: DoConv,
    dfim1: Dfim,
    proj2: DoConv,
    dfim2: Dfim,
    endlayer: EndLayer,
    heads: Vec<AuxHead>,
}

impl MfdsNet {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, config: ModelConfig) -> Result<Self> {
        let [c0, c1, c2] = LEVEL_CHANNELS;
        let mut dfim1 = Dfim::new(init, "dfim1", c1, config.dfim_reduction);
        let mut dfim2 = Dfim::new(init, "dfim2", c0, config.dfim_reduction);
        dfim1.add_mode = config.add_mode.into();
        dfim2.add_mode = config.add_mode.into();
        Ok(MfdsNet {
            backbone: Backbone::new(init),
            mdpm: Mdpm::new(init, config.sigma),
            gsem: Gsem::new(init, c2, config.gsem_reduction, &config.ks)?,
            proj1: DoConv::new(init, "proj1", ConvGeometry::new(1, 1, 0, c2, c1), true, WeightInit::Linear),
            dfim1,
            proj2: DoConv::new(init, "proj2", ConvGeometry::new(1, 1, 0, c1, c0), true, WeightInit::Linear),
            dfim2,
            endlayer: EndLayer::new(init, c0),
            heads: init.scope("aux", |init| {
                [c2, c2, c2, c1, c0]
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| AuxHead::new(init, &format!("head{}", i + 1), c))
                    .collect()
            }),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn mdpm(&self) -> &Mdpm {
        &self.mdpm
    }

    pub fn gsem(&self) -> &Gsem {
        &self.gsem
    }

    pub fn dfims(&self) -> [&Dfim; 2] {
        [&self.dfim1, &self.dfim2]
    }

    pub fn endlayer(&self) -> &EndLayer {
        &self.endlayer
    }

    pub fn heads(&self) -> &[AuxHead] {
        &self.heads
    }

    /// Smallest admissible input side: stride 8 times the largest grid size.
    pub fn size_multiple(&self) -> usize {
        8 * self.config.ks.iter().copied().max().unwrap_or(1)
    }

    pub fn check_inputs<T: Scalar>(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::invalid(
                "forward_full",
                format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        Backbone::check_input(a.shape())?;
        let m = self.size_multiple();
        let [_, _, h, w] = a.shape();
        if h % m != 0 || w % m != 0 {
            return Err(Error::invalid(
                "forward_full",
                format!("spatial dims {h}x{w} must be multiples of {m}"),
            ));
        }
        Ok(())
    }

    fn normalize<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        Tensor::from_fn(x.shape(), |[n, c, h, w]| {
            (x.at(n, c, h, w) - T::c(self.config.mean[c])) / T::c(self.config.std[c])
        })
    }

    /// Both images `[B, 3, H, W]` with values in `[0, 1]`.
    pub fn forward_full<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        image_a: &Tensor<T>,
        image_b: &Tensor<T>,
    ) -> Result<ForwardOutputs<Var<'g, T>>> {
        self.check_inputs(image_a, image_b)?;
        let [_, _, h, w] = image_a.shape();
        let xa = ctx.constant(self.normalize(image_a));
        let xb = ctx.constant(self.normalize(image_b));
        let (pa, pb) = self.backbone.twin_extract(ctx, &xa, &xb)?;
        let ma = self.mdpm.forward(ctx, &pa, image_a)?;
        let mb = self.mdpm.forward(ctx, &pb, image_b)?;

        let out1 = self.gsem.forward(ctx, &ma.level2)?;
        let out2 = self.gsem.forward(ctx, &mb.level2)?;
        let out = out1.add(&out2);

        let up = |v: &Var<'g, T>, proj: &DoConv| {
            let [_, _, vh, vw] = v.shape();
            proj.forward(ctx, &v.resize_bilinear(2 * vh, 2 * vw))
        };
        let stage4 = self.dfim1.forward(ctx, &up(&out, &self.proj1), &ma.level1, &mb.level1)?;
        let stage5 = self.dfim2.forward(ctx, &up(&stage4, &self.proj2), &ma.level0, &mb.level0)?;
        let final_logits = self.endlayer.forward(ctx, &stage5);

        let aux = [&out1, &out2, &out, &stage4, &stage5]
            .iter()
            .zip(&self.heads)
            .map(|(f, head)| {
                let [_, _, fh, fw] = f.shape();
                AuxOutput { logits: head.forward(ctx, f, h, w), native: (fh, fw) }
            })
            .collect();
        Ok(ForwardOutputs { final_logits, aux })
    }
}

impl VisitConvs for MfdsNet {
    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut DoConv)) {
        self.backbone.visit_convs(f);
        self.mdpm.visit_convs(f);
        self.gsem.visit_convs(f);
        f(&mut self.proj1);
        self.dfim1.visit_convs(f);
        f(&mut self.proj2);
        self.dfim2.visit_convs(f);
        self.endlayer.visit_convs(f);
        for h in &mut self.heads {
            f(&mut h.conv);
        }
    }
}

/// Network structure plus its parameters.
#[derive(Clone)]
pub struct Model<T> {
    pub net: MfdsNet,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let seed = config.init_seed;
        let net = MfdsNet::new(&mut Init::new(&mut store, seed), config)?;
        Ok(Model { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn is_folded(&self) -> bool {
        let mut folded = true;
        self.net.clone().visit_convs(&mut |c| folded &= c.is_folded());
        folded
    }

    /// Replaces every over-parameterized convolution by its composed
    /// kernel. Idempotent.
    pub fn fold(&mut self) {
        let store = &mut self.store;
        self.net.visit_convs(&mut |c| c.fold(store));
    }

    pub fn folded(&self) -> Self {
        let mut m = self.clone();
        m.fold();
        m
    }

    /// Eval-mode forward with no tape.
    pub fn infer(&self, image_a: &Tensor<T>, image_b: &Tensor<T>) -> Result<ForwardOutputs<Tensor<T>>> {
        crate::scalar::flush_denormals();
        let graph = Graph::inference();
        let ctx = Ctx::new(&graph, &self.store, Mode::Eval);
        Ok(self.net.forward_full(&ctx, image_a, image_b)?.values())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { net: self.net.clone(), store: self.store.cast() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image<T: Scalar>(b: usize, size: usize, seed: u64) -> Tensor<T> {
        Tensor::rand_uniform([b, 3, size, size], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn shape_trace_at_64() {
        let m = Model::<f32>::new(ModelConfig::default()).unwrap();
        let out = m.infer(&image(2, 64, 1), &image(2, 64, 2)).unwrap();
        assert_eq!(out.final_logits.shape(), [2, 1, 64, 64]);
        let natives: Vec<_> = out.aux.iter().map(|a| a.native).collect();
        assert_eq!(natives, vec![(8, 8), (8, 8), (8, 8), (16, 16), (32, 32)]);
        assert!(out.aux.iter().all(|a| a.logits.shape() == [2, 1, 64, 64]));
        assert!(out.final_logits.all_finite());
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Model::<f32>::new(ModelConfig::default()).unwrap();
        assert!(m.infer(&image(1, 64, 1), &image(2, 64, 2)).is_err());
        assert!(m.infer(&image(1, 40, 1), &image(1, 40, 2)).is_err());
    }

    #[test]
    fn identical_images_and_repeat_calls() {
        let m = Model::<f32>::new(ModelConfig::default()).unwrap();
        let a = image(1, 64, 3);
        let o1 = m.infer(&a, &a).unwrap();
        let o2 = m.infer(&a, &a).unwrap();
        assert!(o1.final_logits.all_finite());
        assert_eq!(o1.final_logits, o2.final_logits);
    }

    #[test]
    fn batch_independence() {
        let m = Model::<f32>::new(ModelConfig::default()).unwrap();
        let (a, b) = (image(2, 64, 4), image(2, 64, 5));
        let joint = m.infer(&a, &b).unwrap().final_logits;
        let s0 = m.infer(&a.narrow_batch(0, 1), &b.narrow_batch(0, 1)).unwrap().final_logits;
        let s1 = m.infer(&a.narrow_batch(1, 1), &b.narrow_batch(1, 1)).unwrap().final_logits;
        let split = Tensor::cat_batch(&[&s0, &s1]).unwrap();
        assert!(joint.max_abs_diff(&split) < 1e-5);
    }

    #[test]
    fn fold_preserves_outputs_and_is_idempotent() {
        let mut m = Model::<f32>::new(ModelConfig::default()).unwrap();
        let n_before = m.store.len();
        let (a, b) = (image(1, 64, 6), image(1, 64, 7));
        let before = m.infer(&a, &b).unwrap().final_logits;
        m.fold();
        assert!(m.is_folded());
        let after = m.infer(&a, &b).unwrap().final_logits;
        assert!(before.max_abs_diff(&after) < 1e-4);
        let n_after = m.store.len();
        assert!(n_after < n_before);
        let snapshot: Vec<_> = m.store.iter().map(|(_, e)| (e.name.clone(), (*e.value).clone())).collect();
        m.fold();
        let again: Vec<_> = m.store.iter().map(|(_, e)| (e.name.clone(), (*e.value).clone())).collect();
        assert_eq!(snapshot, again);
    }
}
