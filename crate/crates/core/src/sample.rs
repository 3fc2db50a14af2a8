//! Bi-temporal training samples.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Two co-registered RGB images in `[0, 1]` (`[1, 3, H, W]`) and their binary
/// change mask (`[1, 1, H, W]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub image_a: Tensor<f32>,
    pub image_b: Tensor<f32>,
    pub gt: Tensor<f32>,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, image_a: Tensor<f32>, image_b: Tensor<f32>, gt: Tensor<f32>) -> Result<Self> {
        let s = SamplePair { id: id.into(), image_a, image_b, gt };
        s.validate()?;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.gt.height()
    }

    pub fn width(&self) -> usize {
        self.gt.width()
    }

    pub fn validate(&self) -> Result<()> {
        let [b, c, h, w] = self.image_a.shape();
        let err = |msg: String| Err(Error::invalid("sample", format!("{}: {msg}", self.id)));
        if b != 1 || c != 3 {
            return err(format!("image_a has shape {:?}", self.image_a.shape()));
        }
        if self.image_b.shape() != [1, 3, h, w] {
            return err(format!("image_b has shape {:?}, expected [1, 3, {h}, {w}]", self.image_b.shape()));
        }
        if self.gt.shape() != [1, 1, h, w] {
            return err(format!("gt has shape {:?}, expected [1, 1, {h}, {w}]", self.gt.shape()));
        }
        crate::loss::check_binary("sample", &self.gt)
    }

    pub fn changed_pixels(&self) -> usize {
        self.gt.data().iter().filter(|&&v| v == 1.0).count()
    }
}

/// A mini-batch in the model's scalar type.
pub struct Batch<T> {
    pub image_a: Tensor<T>,
    pub image_b: Tensor<T>,
    pub gt: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_samples(samples: &[&SamplePair]) -> Result<Self> {
        let cat = |f: fn(&SamplePair) -> &Tensor<f32>| -> Result<Tensor<T>> {
            let parts: Vec<Tensor<T>> = samples.iter().map(|s| f(s).cast()).collect();
            Tensor::cat_batch(&parts.iter().collect::<Vec<_>>())
        };
        Ok(Batch { image_a: cat(|s| &s.image_a)?, image_b: cat(|s| &s.image_b)?, gt: cat(|s| &s.gt)? })
    }
}
