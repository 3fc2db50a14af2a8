//! Deep-supervision loss.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::model::{ForwardOutputs, AUX_COUNT};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisionConfig {
    /// Weight of the two bottleneck-branch losses.
    pub theta: f64,
    /// Weight of the three decoder-stage losses.
    pub phi: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// Momentum of the normalization running statistics.
    pub bn_momentum: f64,
    /// Fraction of the data held out for best-model selection. Zero means
    /// select on the training set itself.
    pub val_fraction: f64,
    /// Decision threshold on the change probability.
    pub threshold: f64,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        SupervisionConfig {
            theta: 0.2,
            phi: 0.5,
            learning_rate: 1e-3,
            epochs: 200,
            seed: 0,
            batch_size: 4,
            bn_momentum: 0.1,
            val_fraction: 0.0,
            threshold: 0.5,
        }
    }
}

impl SupervisionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid("supervision config", msg));
        if !(self.theta >= 0.0) || !(self.phi >= 0.0) {
            return bad("theta and phi must be non-negative");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Names of the loss terms in the order of [`LossBreakdown::terms`].
pub const TERM_NAMES: [&str; 6] = ["aux1", "aux2", "aux3", "aux4", "aux5", "final"];

/// The six component losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub terms: [f64; 6],
}

impl LossBreakdown {
    pub fn total(&self, theta: f64, phi: f64) -> f64 {
        combine(&self.terms, theta, phi)
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.terms.iter().position(|v| !v.is_finite()).map(|i| TERM_NAMES[i])
    }
}

/// `theta * (l1 + l2) + phi * (l3 + l4 + l5) + l_final`.
pub fn combine(terms: &[f64; 6], theta: f64, phi: f64) -> f64 {
    theta * (terms[0] + terms[1]) + phi * (terms[2] + terms[3] + terms[4]) + terms[5]
}

pub fn check_binary<T: Scalar>(op: &'static str, gt: &Tensor<T>) -> Result<()> {
    match gt.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        Some(v) => Err(Error::invalid(op, format!("ground truth must be binary, found {v}"))),
        None => Ok(()),
    }
}

/// Mean binary cross-entropy of `logits` against a binary `gt` of the same
/// shape, in the fused log-sigmoid form.
pub fn bce_loss<'g, T: Scalar>(logits: &Var<'g, T>, gt: &Tensor<T>) -> Result<Var<'g, T>> {
    if logits.shape() != gt.shape() {
        return Err(Error::invalid(
            "bce_loss",
            format!("logits {:?} vs ground truth {:?}", logits.shape(), gt.shape()),
        ));
    }
    check_binary("bce_loss", gt)?;
    Ok(logits.bce_with_logits(gt))
}

/// Weighted sum of the auxiliary and final losses.
pub fn total_loss<'g, T: Scalar>(
    outputs: &ForwardOutputs<Var<'g, T>>,
    gt: &Tensor<T>,
    cfg: &SupervisionConfig,
) -> Result<(Var<'g, T>, LossBreakdown)> {
    if outputs.aux.len() != AUX_COUNT {
        return Err(Error::Shape {
            op: "total_loss",
            dim: "auxiliary outputs",
            expected: AUX_COUNT,
            got: outputs.aux.len(),
        });
    }
    let mut terms = Vec::with_capacity(6);
    for a in &outputs.aux {
        terms.push(bce_loss(&a.logits, gt)?);
    }
    terms.push(bce_loss(&outputs.final_logits, gt)?);
    let weights = [cfg.theta, cfg.theta, cfg.phi, cfg.phi, cfg.phi, 1.0];
    let total = terms
        .iter()
        .zip(weights)
        .map(|(t, w)| t.scale(w))
        .reduce(|a, b| a.add(&b))
        .expect("six terms");
    let mut values = [0.0; 6];
    for (v, t) in values.iter_mut().zip(&terms) {
        *v = t.value().data()[0].f64();
    }
    Ok((total, LossBreakdown { terms: values }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::model::AuxOutput;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn outputs_from<'g>(g: &'g Graph<f64>, maps: [Tensor<f64>; 6]) -> ForwardOutputs<Var<'g, f64>> {
        let [a1, a2, a3, a4, a5, f] = maps;
        ForwardOutputs {
            final_logits: g.leaf(f),
            aux: [a1, a2, a3, a4, a5]
                .into_iter()
                .map(|t| AuxOutput { logits: g.leaf(t), native: (4, 4) })
                .collect(),
        }
    }

    fn mask(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([2, 1, 8, 8], |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
    }

    #[test]
    fn zero_logits_give_ln2() {
        let g = Graph::new();
        let l = bce_loss(&g.leaf(Tensor::zeros([2, 1, 8, 8])), &mask(1)).unwrap();
        assert!((l.value().data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_correct_logits_are_nearly_free() {
        let gt = mask(2);
        let logits = gt.map(|v| if v == 1.0 { 20.0 } else { -20.0 });
        let g = Graph::new();
        assert!(bce_loss(&g.leaf(logits), &gt).unwrap().value().data()[0] < 1e-8);
    }

    #[test]
    fn matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::<f64>::from_fn([2, 1, 8, 8], |_| rng.random_range(-6.0..6.0));
        let gt = mask(4);
        let mut acc = 0.0;
        for (&z, &p) in logits.data().iter().zip(gt.data()) {
            let q = 1.0 / (1.0 + (-z).exp());
            acc += -(p * q.ln() + (1.0 - p) * (1.0 - q).ln());
        }
        let expect = acc / 128.0;
        let g = Graph::new();
        let got = bce_loss(&g.leaf(logits), &gt).unwrap().value().data()[0];
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
    }

    #[test]
    fn rejects_non_binary_and_mismatched() {
        let g = Graph::new();
        let mut gt = mask(5);
        gt.data_mut()[3] = 0.5;
        assert!(bce_loss(&g.leaf(Tensor::zeros([2, 1, 8, 8])), &gt).is_err());
        assert!(bce_loss(&g.leaf(Tensor::zeros([1, 1, 8, 8])), &mask(5)).is_err());
    }

    #[test]
    fn all_ln2_components_sum_to_2_9_ln2() {
        let g = Graph::new();
        let outs = outputs_from(&g, std::array::from_fn(|_| Tensor::zeros([2, 1, 8, 8])));
        let (total, parts) = total_loss(&outs, &mask(6), &SupervisionConfig::default()).unwrap();
        let ln2 = std::f64::consts::LN_2;
        // 0.2 * 2 + 0.5 * 3 + 1
        let expect = (0.4 + 1.5 + 1.0) * ln2;
        assert!((total.value().data()[0] - expect).abs() < 1e-9);
        assert!((expect - 2.010126).abs() < 1e-6);
        assert!(parts.terms.iter().all(|&t| (t - ln2).abs() < 1e-15));
    }

    #[test]
    fn zero_weights_leave_the_final_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let maps: [Tensor<f64>; 6] =
            std::array::from_fn(|_| Tensor::from_fn([2, 1, 8, 8], |_| rng.random_range(-3.0..3.0)));
        let g = Graph::new();
        let outs = outputs_from(&g, maps);
        let cfg = SupervisionConfig { theta: 0.0, phi: 0.0, ..Default::default() };
        let (total, parts) = total_loss(&outs, &mask(8), &cfg).unwrap();
        assert_eq!(total.value().data()[0], parts.terms[5]);
    }

    #[test]
    fn linear_in_theta_and_phi() {
        let terms = [0.3, 0.7, 1.1, 0.2, 0.9, 0.4];
        let base = combine(&terms, 0.0, 0.0);
        for (t, p) in [(0.2, 0.5), (1.0, 0.0), (0.0, 2.0), (3.5, 1.25)] {
            let expect = base + t * (terms[0] + terms[1]) + p * (terms[2] + terms[3] + terms[4]);
            assert!((combine(&terms, t, p) - expect).abs() < 1e-12);
        }
        let d = combine(&terms, 2.0, 0.5) - combine(&terms, 1.0, 0.5);
        assert!((d - (combine(&terms, 1.0, 0.5) - combine(&terms, 0.0, 0.5))).abs() < 1e-12);
    }

    #[test]
    fn missing_aux_map_rejected() {
        let g = Graph::new();
        let mut outs = outputs_from(&g, std::array::from_fn(|_| Tensor::zeros([2, 1, 8, 8])));
        outs.aux.pop();
        assert!(total_loss(&outs, &mask(9), &SupervisionConfig::default()).is_err());
    }

    #[test]
    fn gradient_reaches_every_term() {
        let g = Graph::new();
        let outs = outputs_from(&g, std::array::from_fn(|_| Tensor::zeros([2, 1, 8, 8])));
        let (total, _) = total_loss(&outs, &mask(10), &SupervisionConfig::default()).unwrap();
        let grads = g.backward(&total);
        for a in &outs.aux {
            assert!(grads.get(&a.logits).unwrap().max_abs() > 0.0);
        }
        assert!(grads.get(&outs.final_logits).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn non_finite_names_first_term() {
        let b = LossBreakdown { terms: [0.1, 0.2, f64::NAN, f64::INFINITY, 0.1, 0.1] };
        assert_eq!(b.first_non_finite(), Some("aux3"));
        assert_eq!(LossBreakdown { terms: [0.0; 6] }.first_non_finite(), None);
    }

    #[test]
    fn defaults_and_validation() {
        let c = SupervisionConfig::default();
        assert_eq!((c.theta, c.phi, c.learning_rate, c.epochs), (0.2, 0.5, 0.001, 200));
        assert!(c.validate().is_ok());
        assert!(SupervisionConfig { theta: -1.0, ..c.clone() }.validate().is_err());
        assert!(SupervisionConfig { epochs: 0, ..c.clone() }.validate().is_err());
        assert!(SupervisionConfig { learning_rate: 0.0, ..c }.validate().is_err());
    }
}
