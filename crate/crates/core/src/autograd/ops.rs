use std::rc::Rc;

use super::Var;
use crate::kernels::{self, ConvSpec};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

fn broadcast_shape(a: Shape, b: Shape) -> Shape {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("cannot broadcast {a:?} with {b:?}"),
        };
    }
    out
}

fn broadcast_strides(s: Shape, out: Shape) -> [usize; 4] {
    let contiguous = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
    let mut st = [0; 4];
    for i in 0..4 {
        st[i] = if s[i] == 1 && out[i] != 1 { 0 } else { contiguous[i] };
    }
    st
}

fn broadcast_apply<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for n in 0..out_shape[0] {
        for c in 0..out_shape[1] {
            for h in 0..out_shape[2] {
                let ia = n * sa[0] + c * sa[1] + h * sa[2];
                let ib = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..out_shape[3] {
                    out.push(f(ad[ia + w * sa[3]], bd[ib + w * sb[3]]));
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out).expect("broadcast size")
}

/// Sums `g` over the axes along which `target` was broadcast.
fn reduce_to<T: Scalar>(g: &Tensor<T>, target: Shape) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let gs = g.shape();
    let st = broadcast_strides(target, gs);
    let mut out = Tensor::zeros(target);
    let od = out.data_mut();
    let gd = g.data();
    let mut i = 0;
    for n in 0..gs[0] {
        for c in 0..gs[1] {
            for h in 0..gs[2] {
                let base = n * st[0] + c * st[1] + h * st[2];
                for w in 0..gs[3] {
                    od[base + w * st[3]] += gd[i];
                    i += 1;
                }
            }
        }
    }
    out
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-stochastic attention matrices `softmax(theta^T phi / sqrt(d))` for
/// `theta, phi: [B, d, h, w]`, returned as `[B, 1, N, N]` with `N = h * w`.
pub fn attention_weights<T: Scalar>(theta: &Tensor<T>, phi: &Tensor<T>) -> Tensor<T> {
    let [b, d, h, w] = theta.shape();
    assert_eq!(theta.shape(), phi.shape(), "attention operands");
    let n = h * w;
    let inv = T::one() / T::c(d as f64).sqrt();
    let mut out = Tensor::zeros([b, 1, n, n]);
    for bi in 0..b {
        let th = &theta.data()[bi * d * n..(bi + 1) * d * n];
        let ph = &phi.data()[bi * d * n..(bi + 1) * d * n];
        let a = &mut out.data_mut()[bi * n * n..(bi + 1) * n * n];
        for i in 0..n {
            let row = &mut a[i * n..(i + 1) * n];
            for (j, r) in row.iter_mut().enumerate() {
                let mut s = T::zero();
                for c in 0..d {
                    s += th[c * n + i] * ph[c * n + j];
                }
                *r = s * inv;
            }
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for r in row.iter_mut() {
                *r = (*r - m).exp();
                z += *r;
            }
            for r in row.iter_mut() {
                *r /= z;
            }
        }
    }
    out
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn add(&self, other: &Var<'g, T>) -> Var<'g, T> {
        let out = broadcast_apply(self.value(), other.value(), |a, b| a + b);
        let (sa, sb) = (self.shape(), other.shape());
        self.graph.op(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| reduce_to(g, sa)),
                need[1].then(|| reduce_to(g, sb)),
            ]
        })
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Var<'g, T> {
        let out = broadcast_apply(self.value(), other.value(), |a, b| a - b);
        let (sa, sb) = (self.shape(), other.shape());
        self.graph.op(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| reduce_to(g, sa)),
                need[1].then(|| reduce_to(&g.map(|v| -v), sb)),
            ]
        })
    }

    /// Broadcasting elementwise product.
    pub fn mul(&self, other: &Var<'g, T>) -> Var<'g, T> {
        let out = broadcast_apply(self.value(), other.value(), |a, b| a * b);
        let (a, b) = (self.value_rc(), other.value_rc());
        self.graph.op(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| reduce_to(&broadcast_apply(g, &b, |x, y| x * y), a.shape())),
                need[1].then(|| reduce_to(&broadcast_apply(g, &a, |x, y| x * y), b.shape())),
            ]
        })
    }

    pub fn scale(&self, s: f64) -> Var<'g, T> {
        let s = T::c(s);
        let out = self.value().scale(s);
        self.graph
            .op(out, &[self], move |g, _| vec![Some(g.scale(s))])
    }

    pub fn relu(&self) -> Var<'g, T> {
        let out = self.value().map(|x| if x < T::zero() { T::zero() } else { x });
        let x = self.value_rc();
        self.graph.op(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| if xv > T::zero() { gv } else { T::zero() }))]
        })
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        let y = Rc::new(self.value().map(sigmoid));
        let yb = Rc::clone(&y);
        self.graph.op_rc(y, &[self], move |g, _| {
            vec![Some(g.zip_map(&yb, |gv, yv| gv * yv * (T::one() - yv)))]
        })
    }

    /// Convolution with an `[c_out, kh, kw, c_in]` kernel and optional
    /// `[c_out, 1, 1, 1]` bias.
    pub fn conv2d(&self, weight: &Var<'g, T>, bias: Option<&Var<'g, T>>, spec: ConvSpec) -> Var<'g, T> {
        let out = kernels::conv2d(self.value(), weight.value(), bias.map(|b| b.value()), spec);
        let (x, w) = (self.value_rc(), weight.value_rc());
        match bias {
            Some(b) => self.graph.op(out, &[self, weight, b], move |g, need| {
                let r = kernels::conv2d_backward(&x, &w, g, spec, [need[0], need[1], need[2]]);
                vec![r.dx, r.dw, r.db]
            }),
            None => self.graph.op(out, &[self, weight], move |g, need| {
                let r = kernels::conv2d_backward(&x, &w, g, spec, [need[0], need[1], false]);
                vec![r.dx, r.dw]
            }),
        }
    }

    /// Over-parameterized kernel composition; `self` is the depthwise
    /// operator `[taps, d_mul, c_in, 1]`, `w` the `[c_out, d_mul, c_in, 1]`
    /// conventional operator.
    pub fn compose_kernel(&self, w: &Var<'g, T>, kh: usize, kw: usize) -> Var<'g, T> {
        let out = kernels::compose(self.value(), w.value(), kh, kw);
        let (d, wv) = (self.value_rc(), w.value_rc());
        self.graph.op(out, &[self, w], move |g, need| {
            let (gd, gw) = kernels::compose_backward(&d, &wv, g, [need[0], need[1]]);
            vec![gd, gw]
        })
    }

    pub fn cat_channels(parts: &[&Var<'g, T>]) -> Var<'g, T> {
        let first = parts[0];
        let [b, _, h, w] = first.shape();
        let chans: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = p.shape();
                assert!(s[0] == b && s[2] == h && s[3] == w, "cat_channels: {s:?} vs {:?}", first.shape());
                s[1]
            })
            .collect();
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for (p, &c) in parts.iter().zip(&chans) {
                data.extend_from_slice(&p.value().data()[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let out = Tensor::from_vec([b, total, h, w], data).expect("cat size");
        first.graph.op(out, parts, move |g, need| {
            let mut grads: Vec<Vec<T>> = chans
                .iter()
                .zip(need)
                .map(|(&c, &n)| if n { Vec::with_capacity(b * c * plane) } else { Vec::new() })
                .collect();
            let mut off = 0;
            for _ in 0..b {
                for (i, &c) in chans.iter().enumerate() {
                    if need[i] {
                        grads[i].extend_from_slice(&g.data()[off..off + c * plane]);
                    }
                    off += c * plane;
                }
            }
            grads
                .into_iter()
                .zip(&chans)
                .zip(need)
                .map(|((v, &c), &n)| n.then(|| Tensor::from_vec([b, c, h, w], v).expect("cat grad")))
                .collect()
        })
    }

    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Var<'g, T> {
        let out = kernels::resize_bilinear(self.value(), oh, ow);
        let s = self.shape();
        self.graph.op(out, &[self], move |g, _| {
            vec![Some(kernels::resize_bilinear_backward(g, s))]
        })
    }

    /// Spatial mean per channel: `[B, C, 1, 1]`.
    pub fn mean_hw(&self) -> Var<'g, T> {
        let [b, c, h, w] = self.shape();
        let inv = T::one() / T::c((h * w) as f64);
        let data = self
            .value()
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec([b, c, 1, 1], data).expect("mean_hw");
        self.graph.op(out, &[self], move |g, _| {
            let mut dx = Vec::with_capacity(b * c * h * w);
            for &gv in g.data() {
                dx.extend(std::iter::repeat(gv * inv).take(h * w));
            }
            vec![Some(Tensor::from_vec([b, c, h, w], dx).expect("mean_hw grad"))]
        })
    }

    /// Spatial max per channel: `[B, C, 1, 1]`.
    pub fn max_hw(&self) -> Var<'g, T> {
        let [b, c, h, w] = self.shape();
        let mut idx = Vec::with_capacity(b * c);
        let mut data = Vec::with_capacity(b * c);
        for (p, plane) in self.value().data().chunks(h * w).enumerate() {
            let (mut bi, mut bv) = (0, plane[0]);
            for (i, &v) in plane.iter().enumerate() {
                if v > bv {
                    bi = i;
                    bv = v;
                }
            }
            idx.push(p * h * w + bi);
            data.push(bv);
        }
        let out = Tensor::from_vec([b, c, 1, 1], data).expect("max_hw");
        self.graph.op(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros([b, c, h, w]);
            for (&i, &gv) in idx.iter().zip(g.data()) {
                dx.data_mut()[i] += gv;
            }
            vec![Some(dx)]
        })
    }

    /// Channel mean per pixel: `[B, 1, H, W]`.
    pub fn mean_c(&self) -> Var<'g, T> {
        let [b, c, h, w] = self.shape();
        let plane = h * w;
        let inv = T::one() / T::c(c as f64);
        let x = self.value().data();
        let mut out = Tensor::zeros([b, 1, h, w]);
        for bi in 0..b {
            let dst = &mut out.data_mut()[bi * plane..(bi + 1) * plane];
            for ci in 0..c {
                let src = &x[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        self.graph.op(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros([b, c, h, w]);
            for bi in 0..b {
                let src = &g.data()[bi * plane..(bi + 1) * plane];
                for ci in 0..c {
                    let dst = &mut dx.data_mut()[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s * inv);
                }
            }
            vec![Some(dx)]
        })
    }

    /// Channel max per pixel: `[B, 1, H, W]`.
    pub fn max_c(&self) -> Var<'g, T> {
        let [b, c, h, w] = self.shape();
        let plane = h * w;
        let x = self.value().data();
        let mut out = Tensor::zeros([b, 1, h, w]);
        let mut arg = vec![0usize; b * plane];
        for bi in 0..b {
            for p in 0..plane {
                let (mut best, mut bv) = (0, x[bi * c * plane + p]);
                for ci in 1..c {
                    let v = x[(bi * c + ci) * plane + p];
                    if v > bv {
                        best = ci;
                        bv = v;
                    }
                }
                out.data_mut()[bi * plane + p] = bv;
                arg[bi * plane + p] = best;
            }
        }
        self.graph.op(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros([b, c, h, w]);
            for bi in 0..b {
                for p in 0..plane {
                    let ci = arg[bi * plane + p];
                    dx.data_mut()[(bi * c + ci) * plane + p] += g.data()[bi * plane + p];
                }
            }
            vec![Some(dx)]
        })
    }

    /// Adaptive average pooling to a `k x k` grid; `k` must divide `H` and `W`.
    pub fn block_avg_pool(&self, k: usize) -> Var<'g, T> {
        let [b, c, h, w] = self.shape();
        assert!(h % k == 0 && w % k == 0, "block_avg_pool: {k} does not divide {h}x{w}");
        let (ph, pw) = (h / k, w / k);
        let inv = T::one() / T::c((ph * pw) as f64);
        let x = self.value();
        let out = Tensor::from_fn([b, c, k, k], |[n, ci, gy, gx]| {
            let mut s = T::zero();
            for y in gy * ph..(gy + 1) * ph {
                for xx in gx * pw..(gx + 1) * pw {
                    s += x.at(n, ci, y, xx);
                }
            }
            s * inv
        });
        self.graph.op(out, &[self], move |g, _| {
            let dx = Tensor::from_fn([b, c, h, w], |[n, ci, y, xx]| g.at(n, ci, y / ph, xx / pw) * inv);
            vec![Some(dx)]
        })
    }

    /// Moves the `k x k` spatial patches into the batch axis:
    /// `[B, C, H, W] -> [B * k * k, C, H / k, W / k]`, patch `(py, px)` of
    /// sample `n` landing at batch index `(n * k + py) * k + px`.
    pub fn patches_to_batch(&self, k: usize) -> Var<'g, T> {
        let s = self.shape();
        let out = patches_to_batch(self.value(), k);
        self.graph
            .op(out, &[self], move |g, _| vec![Some(batch_to_patches(g, k, s[0]))])
    }

    /// Inverse of [`Var::patches_to_batch`].
    pub fn batch_to_patches(&self, k: usize, batch: usize) -> Var<'g, T> {
        let out = batch_to_patches(self.value(), k, batch);
        self.graph
            .op(out, &[self], move |g, _| vec![Some(patches_to_batch(g, k))])
    }

    /// Embedded-Gaussian attention: for each sample,
    /// `y[:, i] = sum_j softmax_j(theta[:, i] . phi[:, j] / sqrt(d)) * g[:, j]`.
    pub fn non_local_attention(theta: &Var<'g, T>, phi: &Var<'g, T>, g: &Var<'g, T>) -> Var<'g, T> {
        let [b, d, h, w] = theta.shape();
        assert_eq!(theta.shape(), phi.shape(), "non_local_attention: phi");
        assert_eq!(theta.shape(), g.shape(), "non_local_attention: g");
        let n = h * w;
        let att = Rc::new(attention_weights(theta.value(), phi.value()));
        let mut out = Tensor::zeros([b, d, h, w]);
        for bi in 0..b {
            let a = &att.data()[bi * n * n..(bi + 1) * n * n];
            let gv = &g.value().data()[bi * d * n..(bi + 1) * d * n];
            let y = &mut out.data_mut()[bi * d * n..(bi + 1) * d * n];
            for c in 0..d {
                for i in 0..n {
                    let mut s = T::zero();
                    for j in 0..n {
                        s += a[i * n + j] * gv[c * n + j];
                    }
                    y[c * n + i] = s;
                }
            }
        }
        let (th, ph, gg) = (theta.value_rc(), phi.value_rc(), g.value_rc());
        let inv = T::one() / T::c(d as f64).sqrt();
        theta.graph.op(out, &[theta, phi, g], move |dy, need| {
            let mut dth = Tensor::zeros(th.shape());
            let mut dph = Tensor::zeros(ph.shape());
            let mut dg = Tensor::zeros(gg.shape());
            for bi in 0..b {
                let off = bi * d * n;
                let a = &att.data()[bi * n * n..(bi + 1) * n * n];
                let dyb = &dy.data()[off..off + d * n];
                let gb = &gg.data()[off..off + d * n];
                // dA[i, j] = sum_c dy[c, i] g[c, j]
                let mut da = vec![T::zero(); n * n];
                for i in 0..n {
                    for j in 0..n {
                        let mut s = T::zero();
                        for c in 0..d {
                            s += dyb[c * n + i] * gb[c * n + j];
                        }
                        da[i * n + j] = s;
                    }
                }
                if need[2] {
                    let dgb = &mut dg.data_mut()[off..off + d * n];
                    for c in 0..d {
                        for j in 0..n {
                            let mut s = T::zero();
                            for i in 0..n {
                                s += a[i * n + j] * dyb[c * n + i];
                            }
                            dgb[c * n + j] = s;
                        }
                    }
                }
                // softmax backward, then the 1/sqrt(d) scale
                let mut ds = vec![T::zero(); n * n];
                for i in 0..n {
                    let dot: T = (0..n).map(|j| a[i * n + j] * da[i * n + j]).sum();
                    for j in 0..n {
                        ds[i * n + j] = a[i * n + j] * (da[i * n + j] - dot) * inv;
                    }
                }
                let thb = &th.data()[off..off + d * n];
                let phb = &ph.data()[off..off + d * n];
                if need[0] {
                    let dst = &mut dth.data_mut()[off..off + d * n];
                    for c in 0..d {
                        for i in 0..n {
                            let mut s = T::zero();
                            for j in 0..n {
                                s += ds[i * n + j] * phb[c * n + j];
                            }
                            dst[c * n + i] = s;
                        }
                    }
                }
                if need[1] {
                    let dst = &mut dph.data_mut()[off..off + d * n];
                    for c in 0..d {
                        for j in 0..n {
                            let mut s = T::zero();
                            for i in 0..n {
                                s += ds[i * n + j] * thb[c * n + i];
                            }
                            dst[c * n + j] = s;
                        }
                    }
                }
            }
            vec![need[0].then_some(dth), need[1].then_some(dph), need[2].then_some(dg)]
        })
    }

    /// Mean binary cross-entropy of `sigmoid(self)` against a `{0, 1}`
    /// target of the same shape, in the fused log-sigmoid form. Returns a
    /// `[1, 1, 1, 1]` scalar.
    pub fn bce_with_logits(&self, target: &Tensor<T>) -> Var<'g, T> {
        assert_eq!(self.shape(), target.shape(), "bce_with_logits: target shape");
        let x = self.value();
        let n = T::c(x.numel() as f64);
        let total: T = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        let out = Tensor::scalar(total / n);
        let (xv, tv) = (self.value_rc(), Rc::new(target.clone()));
        self.graph.op(out, &[self], move |g, _| {
            let s = g.data()[0] / n;
            vec![Some(xv.zip_map(&tv, |z, y| (sigmoid(z) - y) * s))]
        })
    }

    /// `self + w * (other - self)` for `w` in `[0, 1]`, all three of one
    /// shape. The result is clamped to the operands' elementwise range so
    /// rounding cannot leave the segment; the gradient is the unclamped one.
    pub fn lerp(&self, other: &Var<'g, T>, w: &Var<'g, T>) -> Var<'g, T> {
        assert_eq!(self.shape(), other.shape(), "lerp: operands");
        assert_eq!(self.shape(), w.shape(), "lerp: weights");
        let (a, b, wt) = (self.value_rc(), other.value_rc(), w.value_rc());
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .zip(wt.data())
            .map(|((&x, &y), &t)| (x + t * (y - x)).max(x.min(y)).min(x.max(y)))
            .collect();
        let out = Tensor::from_vec(a.shape(), data).expect("lerp shape");
        self.graph.op(out, &[self, other, w], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&wt, |g, t| g * (T::one() - t))),
                need[1].then(|| g.zip_map(&wt, |g, t| g * t)),
                need[2].then(|| g.zip_map(&b.zip_map(&a, |y, x| y - x), |g, d| g * d)),
            ]
        })
    }

    pub fn sum(&self) -> Var<'g, T> {
        let out = Tensor::scalar(self.value().sum());
        let s = self.shape();
        self.graph
            .op(out, &[self], move |g, _| vec![Some(Tensor::full(s, g.data()[0]))])
    }

    pub fn mean(&self) -> Var<'g, T> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }
}

pub(crate) fn patches_to_batch<T: Scalar>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    assert!(h % k == 0 && w % k == 0, "patches_to_batch: {k} does not divide {h}x{w}");
    let (ph, pw) = (h / k, w / k);
    Tensor::from_fn([b * k * k, c, ph, pw], |[nb, ci, y, xx]| {
        let (n, py, px) = (nb / (k * k), (nb / k) % k, nb % k);
        x.at(n, ci, py * ph + y, px * pw + xx)
    })
}

pub(crate) fn batch_to_patches<T: Scalar>(x: &Tensor<T>, k: usize, batch: usize) -> Tensor<T> {
    let [bk, c, ph, pw] = x.shape();
    assert_eq!(bk, batch * k * k, "batch_to_patches: batch");
    Tensor::from_fn([batch, c, ph * k, pw * k], |[n, ci, y, xx]| {
        let (py, px) = (y / ph, xx / pw);
        x.at((n * k + py) * k + px, ci, y % ph, xx % pw)
    })
}
