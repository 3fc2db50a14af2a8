use crate::autograd::Var;
use crate::params::{Ctx, Init, ParamId, StatUpdate};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const EPS: f64 = 1e-5;

/// Per-channel batch normalization with learned affine. Training mode
/// standardizes with batch statistics and reports them for the running
/// averages; eval mode uses the running averages.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    channels: usize,
}

impl BatchNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Self {
        init.scope(name, |init| BatchNorm {
            gamma: init.tensor("gamma", Tensor::ones([1, channels, 1, 1])),
            beta: init.zeros("beta", [1, channels, 1, 1]),
            running_mean: init.buffer("running_mean", Tensor::zeros([1, channels, 1, 1])),
            running_var: init.buffer("running_var", Tensor::ones([1, channels, 1, 1])),
            channels,
        })
    }

    pub fn gamma_id(&self) -> ParamId {
        self.gamma
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Var<'g, T> {
        let [b, c, h, w] = x.shape();
        assert_eq!(c, self.channels, "batch norm channels");
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let plane = h * w;
        let count = b * plane;
        let xv = x.value();

        let (mean, var) = if ctx.is_train() {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let inv = T::one() / T::c(count as f64);
            for ci in 0..c {
                let mut s = T::zero();
                for n in 0..b {
                    let off = (n * c + ci) * plane;
                    s += xv.data()[off..off + plane].iter().copied().sum::<T>();
                }
                let m = s * inv;
                let mut v = T::zero();
                for n in 0..b {
                    let off = (n * c + ci) * plane;
                    v += xv.data()[off..off + plane].iter().map(|&x| (x - m) * (x - m)).sum::<T>();
                }
                mean[ci] = m;
                var[ci] = v * inv;
            }
            let unbiased = if count > 1 {
                T::c(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            ctx.record_stats(StatUpdate {
                mean_id: self.running_mean,
                var_id: self.running_var,
                mean: mean.clone(),
                var: var.iter().map(|&v| v * unbiased).collect(),
            });
            (mean, var)
        } else {
            (
                ctx.buffer(self.running_mean).data().to_vec(),
                ctx.buffer(self.running_var).data().to_vec(),
            )
        };
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + T::c(EPS)).sqrt()).collect();

        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for n in 0..b {
            for ci in 0..c {
                let off = (n * c + ci) * plane;
                let (g, be) = (gamma.value().data()[ci], beta.value().data()[ci]);
                for i in off..off + plane {
                    let xh = (xv.data()[i] - mean[ci]) * invstd[ci];
                    xhat.data_mut()[i] = xh;
                    out.data_mut()[i] = g * xh + be;
                }
            }
        }
        let train = ctx.is_train();
        let gv = gamma.value_rc();
        ctx.graph().op(out, &[x, &gamma, &beta], move |dy, need| {
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for n in 0..b {
                for ci in 0..c {
                    let off = (n * c + ci) * plane;
                    for i in off..off + plane {
                        dgamma[ci] += dy.data()[i] * xhat.data()[i];
                        dbeta[ci] += dy.data()[i];
                    }
                }
            }
            let dx = need[0].then(|| {
                let mut dx = Tensor::zeros(dy.shape());
                let m = T::c(count as f64);
                for n in 0..b {
                    for ci in 0..c {
                        let off = (n * c + ci) * plane;
                        let g = gv.data()[ci];
                        for i in off..off + plane {
                            dx.data_mut()[i] = if train {
                                // standardization depends on the batch itself
                                g * invstd[ci] / m
                                    * (m * dy.data()[i] - dbeta[ci] - xhat.data()[i] * dgamma[ci])
                            } else {
                                g * invstd[ci] * dy.data()[i]
                            };
                        }
                    }
                }
                dx
            });
            vec![
                dx,
                need[1].then(|| Tensor::from_vec([1, c, 1, 1], dgamma.clone()).expect("dgamma")),
                need[2].then(|| Tensor::from_vec([1, c, 1, 1], dbeta.clone()).expect("dbeta")),
            ]
        })
    }
}
