//! Confusion counts, the five change-detection metrics and mask overlays.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `1` where `sigmoid(logit) >= threshold`, else `0`.
pub fn binarize<T: Scalar>(logits: &Tensor<T>, threshold: f64) -> Tensor<T> {
    logits.map(|z| {
        let p = 1.0 / (1.0 + (-z.f64()).exp());
        if p >= threshold {
            T::one()
        } else {
            T::zero()
        }
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(self, other: Self) -> Self {
        self + other
    }

    /// Adds the per-pixel tally of `pred` against `gt`. Both must hold only
    /// zeros and ones and share a shape.
    pub fn accumulate<T: Scalar>(&mut self, pred: &Tensor<T>, gt: &Tensor<T>) -> Result<()> {
        *self += tally(pred, gt)?;
        Ok(())
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

fn bit<T: Scalar>(v: T, what: &str) -> Result<bool> {
    if v == T::one() {
        Ok(true)
    } else if v == T::zero() {
        Ok(false)
    } else {
        Err(Error::invalid("accumulate", format!("{what} mask must be binary, found {v}")))
    }
}

/// Confusion counts of one prediction/label pair.
pub fn tally<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::invalid(
            "accumulate",
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (bit(p, "prediction")?, bit(g, "ground truth")?) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub oa: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics of pooled counts. Ratios with a zero denominator are 0; only
/// empty counts are an error.
pub fn compute_metrics(c: &ConfusionCounts) -> Result<MetricsReport> {
    if c.total() == 0 {
        return Err(Error::invalid("compute_metrics", "no pixels counted"));
    }
    Ok(MetricsReport {
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        oa: ratio(c.tp + c.tn, c.total()),
    })
}

/// Metrics of a single image: a prediction and label that are both empty
/// score 1 everywhere.
pub fn image_metrics(c: &ConfusionCounts) -> Result<MetricsReport> {
    let mut m = compute_metrics(c)?;
    if c.tp + c.fp + c.fn_ == 0 {
        m = MetricsReport { f1: 1.0, iou: 1.0, precision: 1.0, recall: 1.0, oa: 1.0 };
    }
    Ok(m)
}

pub const TP_COLOR: [u8; 3] = [255, 255, 255];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 255, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];

/// Row-major 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Overlay {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Overlay {
    pub fn to_raw(&self) -> Vec<u8> {
        self.pixels.iter().flatten().copied().collect()
    }

    /// Counts recovered from the colors.
    pub fn histogram(&self) -> ConfusionCounts {
        let mut c = ConfusionCounts::default();
        for p in &self.pixels {
            match *p {
                TP_COLOR => c.tp += 1,
                FP_COLOR => c.fp += 1,
                FN_COLOR => c.fn_ += 1,
                TN_COLOR => c.tn += 1,
                _ => unreachable!("overlay holds four colors"),
            }
        }
        c
    }
}

/// One overlay per batch element of `[B, 1, H, W]` masks.
pub fn render_overlay<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Vec<Overlay>> {
    if pred.shape() != gt.shape() || pred.channels() != 1 {
        return Err(Error::invalid(
            "render_overlay",
            format!("need matching single-channel masks, got {:?} and {:?}", pred.shape(), gt.shape()),
        ));
    }
    let [b, _, h, w] = pred.shape();
    (0..b)
        .map(|n| {
            let mut pixels = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let color = match (bit(pred.at(n, 0, y, x), "prediction")?, bit(gt.at(n, 0, y, x), "ground truth")?) {
                        (true, true) => TP_COLOR,
                        (true, false) => FP_COLOR,
                        (false, true) => FN_COLOR,
                        (false, false) => TN_COLOR,
                    };
                    pixels.push(color);
                }
            }
            Ok(Overlay { width: w, height: h, pixels })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut ChaCha8Rng, p: f64) -> Tensor<f32> {
        Tensor::from_fn([1, 1, 32, 32], |_| if rng.random_bool(p) { 1.0 } else { 0.0 })
    }

    #[test]
    fn binarize_boundary_inclusive_and_saturated() {
        let t = Tensor::<f32>::from_vec([1, 1, 1, 3], vec![0.0, -1e-3, 1e30]).unwrap();
        assert_eq!(binarize(&t, 0.5).data(), &[1.0, 0.0, 1.0]);
        assert_eq!(binarize(&Tensor::<f32>::full([1, 1, 2, 2], f32::INFINITY), 0.5).data(), &[1.0; 4]);
    }

    #[test]
    fn threshold_sweep_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::<f64>::from_fn([1, 1, 16, 16], |_| rng.random_range(-5.0..5.0));
        let mut prev = f64::INFINITY;
        for i in 1..100 {
            let n = binarize(&t, i as f64 / 100.0).sum();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn simple_tallies() {
        let ones = Tensor::<f32>::ones([1, 1, 4, 4]);
        let c = tally(&ones, &ones).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 16, ..Default::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_mask(&mut rng, 0.5);
        let c = tally(&gt.map(|v| 1.0 - v), &gt).unwrap();
        assert_eq!(c.tp + c.tn, 0);
        assert_eq!(c.fp + c.fn_, 1024);
    }

    #[test]
    fn rejects_non_binary_and_shape() {
        let mut a = Tensor::<f32>::zeros([1, 1, 4, 4]);
        let b = a.clone();
        a.data_mut()[0] = 0.3;
        assert!(tally(&a, &b).is_err());
        assert!(tally(&b, &Tensor::zeros([1, 1, 4, 5])).is_err());
    }

    #[test]
    fn matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, g) = (random_mask(&mut rng, 0.3), random_mask(&mut rng, 0.6));
        let mut expect = ConfusionCounts::default();
        for y in 0..32 {
            for x in 0..32 {
                let (a, b) = (p.at(0, 0, y, x) > 0.5, g.at(0, 0, y, x) > 0.5);
                match (a, b) {
                    (true, true) => expect.tp += 1,
                    (true, false) => expect.fp += 1,
                    (false, true) => expect.fn_ += 1,
                    (false, false) => expect.tn += 1,
                }
            }
        }
        assert_eq!(tally(&p, &g).unwrap(), expect);
    }

    #[test]
    fn worked_case() {
        let m = compute_metrics(&ConfusionCounts { tp: 3, fp: 1, fn_: 1, tn: 11 }).unwrap();
        assert_eq!((m.f1, m.iou, m.precision, m.recall, m.oa), (0.75, 0.6, 0.75, 0.75, 0.875));
    }

    #[test]
    fn conventions() {
        let perfect = compute_metrics(&ConfusionCounts { tp: 7, fp: 0, fn_: 0, tn: 7 }).unwrap();
        assert_eq!((perfect.f1, perfect.iou, perfect.precision, perfect.recall, perfect.oa), (1.0, 1.0, 1.0, 1.0, 1.0));
        let empty = ConfusionCounts { tn: 9, ..Default::default() };
        let m = compute_metrics(&empty).unwrap();
        assert_eq!((m.f1, m.iou, m.precision, m.recall, m.oa), (0.0, 0.0, 0.0, 0.0, 1.0));
        let per_image = image_metrics(&empty).unwrap();
        assert_eq!((per_image.f1, per_image.iou), (1.0, 1.0));
        assert!(compute_metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn overlay_colors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_mask(&mut rng, 0.5);
        let same = render_overlay(&gt, &gt).unwrap();
        assert!(same[0].pixels.iter().all(|&p| p == TP_COLOR || p == TN_COLOR));
        let green = render_overlay(&Tensor::<f32>::zeros([1, 1, 4, 4]), &Tensor::ones([1, 1, 4, 4])).unwrap();
        assert!(green[0].pixels.iter().all(|&p| p == [0, 255, 0]));
        let pred = random_mask(&mut rng, 0.5);
        assert_eq!(render_overlay(&pred, &gt).unwrap()[0].histogram(), tally(&pred, &gt).unwrap());
    }

    fn counts() -> impl Strategy<Value = ConfusionCounts> {
        (0u64..1000, 0u64..1000, 0u64..1000, 0u64..1000)
            .prop_map(|(tp, fp, fn_, tn)| ConfusionCounts { tp, fp, fn_, tn })
    }

    proptest! {
        #[test]
        fn metric_identities(c in counts()) {
            prop_assume!(c.total() > 0);
            let m = compute_metrics(&c).unwrap();
            for v in [m.f1, m.iou, m.precision, m.recall, m.oa] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(m.iou <= m.f1);
            if c.tp + c.fp + c.fn_ > 0 {
                prop_assert!((m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
            }
            if m.precision + m.recall > 0.0 {
                prop_assert!((m.f1 - 2.0 * m.precision * m.recall / (m.precision + m.recall)).abs() < 1e-12);
            }
        }

        #[test]
        fn merge_is_associative_and_commutative(a in counts(), b in counts(), c in counts()) {
            prop_assert_eq!((a + b) + c, a + (b + c));
            prop_assert_eq!(a + b, b + a);
        }

        #[test]
        fn invariant_under_joint_permutation(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, g) = (random_mask(&mut rng, 0.4), random_mask(&mut rng, 0.4));
            let mut perm: Vec<usize> = (0..1024).collect();
            perm.shuffle(&mut rng);
            let pp = Tensor::from_vec(p.shape(), perm.iter().map(|&i| p.data()[i]).collect()).unwrap();
            let gp = Tensor::from_vec(g.shape(), perm.iter().map(|&i| g.data()[i]).collect()).unwrap();
            prop_assert_eq!(tally(&p, &g).unwrap(), tally(&pp, &gp).unwrap());
        }
    }
}
