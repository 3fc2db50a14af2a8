//! Residual encoder shared by both acquisition dates.
//!
//! ResNet-34 layout with the stem max-pool removed and the fourth stage
//! dropped: a 7x7/2 stem followed by three stages of basic blocks
//! (3, 4, 6 blocks at 64, 128, 256 channels). Downsampling happens only in
//! stride-2 convolutions, giving features at strides 2, 4 and 8.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::doconv::{ConvGeometry, DoConv, VisitConvs, WeightInit};
use crate::nn::norm::BatchNorm;
use crate::params::{Ctx, Init};
use crate::scalar::Scalar;

pub const LEVEL_CHANNELS: [usize; 3] = [64, 128, 256];
pub const STAGE_BLOCKS: [usize; 3] = [3, 4, 6];

/// Three feature scales of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<V> {
    /// stride 2, 64 channels
    pub level0: V,
    /// stride 4, 128 channels
    pub level1: V,
    /// stride 8, 256 channels
    pub level2: V,
}

impl<V> FeaturePyramid<V> {
    pub fn levels(&self) -> [&V; 3] {
        [&self.level0, &self.level1, &self.level2]
    }

    pub fn map<U>(&self, mut f: impl FnMut(usize, &V) -> U) -> FeaturePyramid<U> {
        FeaturePyramid {
            level0: f(0, &self.level0),
            level1: f(1, &self.level1),
            level2: f(2, &self.level2),
        }
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(usize, &V) -> Result<U, E>) -> Result<FeaturePyramid<U>, E> {
        Ok(FeaturePyramid {
            level0: f(0, &self.level0)?,
            level1: f(1, &self.level1)?,
            level2: f(2, &self.level2)?,
        })
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: DoConv,
    bn1: BatchNorm,
    conv2: DoConv,
    bn2: BatchNorm,
    shortcut: Option<(DoConv, BatchNorm)>,
}

impl BasicBlock {
    fn new<T: Scalar>(init: &mut Init<'_, T>, c_in: usize, c_out: usize, stride: usize) -> Self {
        BasicBlock {
            conv1: DoConv::new(init, "conv1", ConvGeometry::new(3, stride, 1, c_in, c_out), false, WeightInit::Relu),
            bn1: BatchNorm::new(init, "bn1", c_out),
            conv2: DoConv::new(init, "conv2", ConvGeometry::new(3, 1, 1, c_out, c_out), false, WeightInit::Relu),
            bn2: BatchNorm::new(init, "bn2", c_out),
            shortcut: (stride != 1 || c_in != c_out).then(|| {
                init.scope("down", |init| {
                    (
                        DoConv::new(init, "conv", ConvGeometry::new(1, stride, 0, c_in, c_out), false, WeightInit::Linear),
                        BatchNorm::new(init, "bn", c_out),
                    )
                })
            }),
        }
    }

    fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Var<'g, T> {
        let h = self.bn1.forward(ctx, &self.conv1.forward(ctx, x)).relu();
        let h = self.bn2.forward(ctx, &self.conv2.forward(ctx, &h));
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(ctx, &conv.forward(ctx, x)),
            None => x.clone(),
        };
        h.add(&skip).relu()
    }

    fn describe(&self, prefix: &str, out: &mut Vec<String>) {
        for (name, c) in [("conv1", &self.conv1), ("conv2", &self.conv2)] {
            out.push(describe_conv(&format!("{prefix}.{name}"), c));
        }
        out.push(format!("{prefix}.bn1"));
        out.push(format!("{prefix}.bn2"));
        if let Some((c, _)) = &self.shortcut {
            out.push(describe_conv(&format!("{prefix}.down.conv"), c));
            out.push(format!("{prefix}.down.bn"));
        }
        out.push(format!("{prefix}.add+relu"));
    }
}

fn describe_conv(name: &str, c: &DoConv) -> String {
    let g = c.geometry();
    format!("{name} conv {}x{}/{} {}->{}", g.kernel_h, g.kernel_w, g.stride, g.c_in, g.c_out)
}

impl VisitConvs for BasicBlock {
    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut DoConv)) {
        f(&mut self.conv1);
        f(&mut self.conv2);
        if let Some((c, _)) = &mut self.shortcut {
            f(c);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    stem: DoConv,
    stem_bn: BatchNorm,
    stages: Vec<Vec<BasicBlock>>,
}

impl Backbone {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>) -> Self {
        init.scope("backbone", |init| {
            let stem = DoConv::new(init, "stem", ConvGeometry::new(7, 2, 3, 3, 64), false, WeightInit::Relu);
            let stem_bn = BatchNorm::new(init, "stem_bn", 64);
            let mut c_in = 64;
            let mut stages = Vec::new();
            for (s, (&c_out, &blocks)) in LEVEL_CHANNELS.iter().zip(&STAGE_BLOCKS).enumerate() {
                let stride = if s == 0 { 1 } else { 2 };
                let stage = init.scope(format!("stage{}", s + 1), |init| {
                    (0..blocks)
                        .map(|i| {
                            let st = if i == 0 { stride } else { 1 };
                            let cin = if i == 0 { c_in } else { c_out };
                            init.scope(i.to_string(), |init| BasicBlock::new(init, cin, c_out, st))
                        })
                        .collect::<Vec<_>>()
                });
                stages.push(stage);
                c_in = c_out;
            }
            Backbone { stem, stem_bn, stages }
        })
    }

    pub fn check_input(shape: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = shape;
        if c != 3 {
            return Err(Error::Shape { op: "extract_features", dim: "image channels", expected: 3, got: c });
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(
                "extract_features",
                format!("spatial dims {h}x{w} must be non-zero multiples of 8"),
            ));
        }
        Ok(())
    }

    /// Features of one (normalized) image batch.
    pub fn extract_features<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        image: &Var<'g, T>,
    ) -> Result<FeaturePyramid<Var<'g, T>>> {
        Self::check_input(image.shape())?;
        let mut x = self.stem_bn.forward(ctx, &self.stem.forward(ctx, image)).relu();
        let mut levels = Vec::with_capacity(3);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(ctx, &x);
            }
            levels.push(x.clone());
        }
        let level2 = levels.pop().expect("three stages");
        let level1 = levels.pop().expect("three stages");
        let level0 = levels.pop().expect("three stages");
        Ok(FeaturePyramid { level0, level1, level2 })
    }

    /// Shared-weight features for both dates.
    pub fn twin_extract<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        image_a: &Var<'g, T>,
        image_b: &Var<'g, T>,
    ) -> Result<(FeaturePyramid<Var<'g, T>>, FeaturePyramid<Var<'g, T>>)> {
        if image_a.shape() != image_b.shape() {
            return Err(Error::invalid(
                "twin_extract",
                format!("image shapes differ: {:?} vs {:?}", image_a.shape(), image_b.shape()),
            ));
        }
        Ok((self.extract_features(ctx, image_a)?, self.extract_features(ctx, image_b)?))
    }

    /// One line per layer in execution order.
    pub fn describe(&self) -> Vec<String> {
        let mut out = vec![describe_conv("stem", &self.stem), "stem_bn".into(), "stem_relu".into()];
        for (s, stage) in self.stages.iter().enumerate() {
            for (i, b) in stage.iter().enumerate() {
                b.describe(&format!("stage{}.{i}", s + 1), &mut out);
            }
        }
        out
    }

    pub fn stage_blocks(&self) -> Vec<usize> {
        self.stages.iter().map(Vec::len).collect()
    }
}

impl VisitConvs for Backbone {
    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut DoConv)) {
        f(&mut self.stem);
        for stage in &mut self.stages {
            for b in stage {
                b.visit_convs(f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::params::{Mode, ParamStore};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build() -> (Backbone, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut Init::new(&mut store, 1));
        (bb, store)
    }

    #[test]
    fn layout_has_no_pooling_and_resnet34_stage_counts() {
        let (bb, _) = build();
        assert_eq!(bb.stage_blocks(), vec![3, 4, 6]);
        let layers = bb.describe();
        assert!(layers.iter().all(|l| !l.to_lowercase().contains("pool")));
        let stride2 = layers.iter().filter(|l| l.contains("/2 ")).count();
        // stem + first conv and shortcut of stages 2 and 3
        assert_eq!(stride2, 5);
    }

    #[test]
    fn pyramid_shapes_and_batch() {
        let (bb, store) = build();
        for b in [1, 2] {
            let g = Graph::inference();
            let ctx = Ctx::new(&g, &store, Mode::Eval);
            let x = g.constant(Tensor::zeros([b, 3, 32, 40]));
            let p = bb.extract_features(&ctx, &x).unwrap();
            assert_eq!(p.level0.shape(), [b, 64, 16, 20]);
            assert_eq!(p.level1.shape(), [b, 128, 8, 10]);
            assert_eq!(p.level2.shape(), [b, 256, 4, 5]);
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let (bb, store) = build();
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, Mode::Eval);
        let x = g.constant(Tensor::zeros([1, 3, 30, 32]));
        assert!(bb.extract_features(&ctx, &x).is_err());
        let x = g.constant(Tensor::zeros([1, 4, 32, 32]));
        assert!(bb.extract_features(&ctx, &x).is_err());
    }

    #[test]
    fn twin_shares_weights_and_swaps() {
        let (bb, store) = build();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f32>::rand_uniform([1, 3, 16, 16], -1.0, 1.0, &mut rng);
        let b = Tensor::<f32>::rand_uniform([1, 3, 16, 16], -1.0, 1.0, &mut rng);
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, Mode::Eval);
        let (va, vb) = (g.constant(a.clone()), g.constant(b));
        let (pa, pb) = bb.twin_extract(&ctx, &va, &vb).unwrap();
        let (qb, qa) = bb.twin_extract(&ctx, &vb, &va).unwrap();
        assert_eq!(pa.level2.value(), qa.level2.value());
        assert_eq!(pb.level0.value(), qb.level0.value());
        assert_ne!(pa.level2.value(), pb.level2.value());
        let (s1, s2) = bb.twin_extract(&ctx, &va, &va).unwrap();
        assert_eq!(s1.level1.value(), s2.level1.value());
        assert!(bb.twin_extract(&ctx, &va, &g.constant(Tensor::zeros([1, 3, 8, 16]))).is_err());
    }
}
