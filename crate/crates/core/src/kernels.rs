//! Graph-free numeric kernels shared by the autograd ops and the public
//! tensor-level operations.
//!
//! Convolution weights are stored output-major with the input channel
//! innermost: `[c_out, kernel_h, kernel_w, c_in]`. Flattened, a row of the
//! weight is indexed by `(tap, c_in)` with `tap = ky * kernel_w + kx`, which
//! is the layout of a folded over-parameterized kernel and of the im2col
//! matrix rows below.

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            dilation,
        }
    }

    /// Output extent along one axis, or `None` when the kernel does not fit.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            None
        } else {
            Some((padded - span) / self.stride + 1)
        }
    }
}

struct Geom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl Geom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.spec.stride == 1
            && self.spec.padding == 0
    }
}

fn geom(x: Shape, w: Shape, spec: ConvSpec) -> Geom {
    let [_, cin, h, wd] = x;
    let [_, kh, kw, wcin] = w;
    assert_eq!(cin, wcin, "conv2d: input channels");
    let ho = spec.out_extent(h, kh).expect("conv2d: kernel larger than padded input");
    let wo = spec.out_extent(wd, kw).expect("conv2d: kernel larger than padded input");
    Geom {
        cin,
        h,
        w: wd,
        kh,
        kw,
        ho,
        wo,
        spec,
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geom, cols: &mut [T]) {
    let n = g.ho * g.wo;
    let (s, p, d) = (g.spec.stride, g.spec.padding as isize, g.spec.dilation);
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            for c in 0..g.cin {
                let row = ((ky * g.kw + kx) * g.cin + c) * n;
                let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
                for oy in 0..g.ho {
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let iy = (oy * s + ky * d) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx * d) as isize - p;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geom, dx: &mut [T]) {
    let n = g.ho * g.wo;
    let (s, p, d) = (g.spec.stride, g.spec.padding as isize, g.spec.dilation);
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            for c in 0..g.cin {
                let row = ((ky * g.kw + kx) * g.cin + c) * n;
                let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky * d) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * s + kx * d) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [B, c_in, H, W]` with `w: [c_out, kh, kw, c_in]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, spec: ConvSpec) -> Tensor<T> {
    let g = geom(x.shape(), w.shape(), spec);
    let (b, cout) = (x.batch(), w.batch());
    let k = g.kh * g.kw * g.cin;
    let n = g.ho * g.wo;
    let mut out = Tensor::zeros([b, cout, g.ho, g.wo]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * n] };
    let in_per = g.cin * g.h * g.w;
    for bi in 0..b {
        let xs = &x.data()[bi * in_per..(bi + 1) * in_per];
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[bi * cout * n..(bi + 1) * cout * n];
        T::gemm(
            cout,
            k,
            n,
            T::one(),
            w.data(),
            k as isize,
            1,
            src,
            n as isize,
            1,
            T::zero(),
            dst,
            n as isize,
            1,
        );
        if let Some(bias) = bias {
            for (o, row) in dst.chunks_mut(n).enumerate() {
                let bv = bias.data()[o];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    spec: ConvSpec,
    need: [bool; 3],
) -> ConvGrads<T> {
    let g = geom(x.shape(), w.shape(), spec);
    let (b, cout) = (x.batch(), w.batch());
    let k = g.kh * g.kw * g.cin;
    let n = g.ho * g.wo;
    let in_per = g.cin * g.h * g.w;
    let mut dx = need[0].then(|| Tensor::zeros(x.shape()));
    let mut dw = need[1].then(|| Tensor::zeros(w.shape()));
    let db = need[2].then(|| {
        let mut db = Tensor::zeros([cout, 1, 1, 1]);
        for bi in 0..b {
            for o in 0..cout {
                let row = &dy.data()[(bi * cout + o) * n..(bi * cout + o + 1) * n];
                db.data_mut()[o] += row.iter().copied().sum::<T>();
            }
        }
        db
    });
    let pointwise = g.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { k * n }];
    for bi in 0..b {
        let dys = &dy.data()[bi * cout * n..(bi + 1) * cout * n];
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[bi * in_per..(bi + 1) * in_per];
            let src: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            // dw[o, k] += sum_n dy[o, n] * cols[k, n]
            T::gemm(
                cout,
                n,
                k,
                T::one(),
                dys,
                n as isize,
                1,
                src,
                1,
                n as isize,
                T::one(),
                dw.data_mut(),
                k as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[bi * in_per..(bi + 1) * in_per];
            if pointwise {
                T::gemm(
                    k, cout, n, T::one(), w.data(), 1, k as isize, dys, n as isize, 1, T::zero(), dxs,
                    n as isize, 1,
                );
            } else {
                T::gemm(
                    k,
                    cout,
                    n,
                    T::one(),
                    w.data(),
                    1,
                    k as isize,
                    dys,
                    n as isize,
                    1,
                    T::zero(),
                    &mut cols,
                    n as isize,
                    1,
                );
                col2im(&cols, &g, dxs);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Folds a depthwise operator `d: [taps, d_mul, c_in, 1]` into a
/// conventional kernel `w: [c_out, d_mul, c_in, 1]`, producing
/// `[c_out, kh, kw, c_in]` with
/// `out[o, t, c] = sum_m d[t, m, c] * w[o, m, c]`.
pub fn compose<T: Scalar>(d: &Tensor<T>, w: &Tensor<T>, kh: usize, kw: usize) -> Tensor<T> {
    let [taps, dmul, cin, _] = d.shape();
    let [cout, wmul, wcin, _] = w.shape();
    assert_eq!(taps, kh * kw, "compose: taps");
    assert_eq!((dmul, cin), (wmul, wcin), "compose: d_mul / c_in");
    let mut out = Tensor::zeros([cout, kh, kw, cin]);
    let (dd, wd) = (d.data(), w.data());
    let od = out.data_mut();
    for o in 0..cout {
        for t in 0..taps {
            let dst = &mut od[(o * taps + t) * cin..(o * taps + t + 1) * cin];
            for m in 0..dmul {
                let drow = &dd[(t * dmul + m) * cin..(t * dmul + m + 1) * cin];
                let wrow = &wd[(o * dmul + m) * cin..(o * dmul + m + 1) * cin];
                for ((v, &a), &b) in dst.iter_mut().zip(drow).zip(wrow) {
                    *v += a * b;
                }
            }
        }
    }
    out
}

pub fn compose_backward<T: Scalar>(
    d: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    need: [bool; 2],
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let [taps, dmul, cin, _] = d.shape();
    let cout = w.batch();
    let (dd, wd, gd) = (d.data(), w.data(), dout.data());
    let gd_d = need[0].then(|| {
        let mut g = Tensor::zeros(d.shape());
        let gdat = g.data_mut();
        for o in 0..cout {
            for t in 0..taps {
                let grow = &gd[(o * taps + t) * cin..(o * taps + t + 1) * cin];
                for m in 0..dmul {
                    let wrow = &wd[(o * dmul + m) * cin..(o * dmul + m + 1) * cin];
                    let dst = &mut gdat[(t * dmul + m) * cin..(t * dmul + m + 1) * cin];
                    for ((v, &a), &b) in dst.iter_mut().zip(grow).zip(wrow) {
                        *v += a * b;
                    }
                }
            }
        }
        g
    });
    let gd_w = need[1].then(|| {
        let mut g = Tensor::zeros(w.shape());
        let gdat = g.data_mut();
        for o in 0..cout {
            for t in 0..taps {
                let grow = &gd[(o * taps + t) * cin..(o * taps + t + 1) * cin];
                for m in 0..dmul {
                    let drow = &dd[(t * dmul + m) * cin..(t * dmul + m + 1) * cin];
                    let dst = &mut gdat[(o * dmul + m) * cin..(o * dmul + m + 1) * cin];
                    for ((v, &a), &b) in dst.iter_mut().zip(grow).zip(drow) {
                        *v += a * b;
                    }
                }
            }
        }
        g
    });
    (gd_d, gd_w)
}

/// Source taps for one output coordinate of a half-pixel-centred bilinear
/// resize: `(i0, i1, weight_of_i1)`.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            // a clamped pair reads one pixel; keep it exact
            let l = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, l)
        })
        .collect()
}

/// Bilinear resize with half-pixel centres (no corner alignment).
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let ry = bilinear_taps(h, oh);
    let rx = bilinear_taps(w, ow);
    let mut out = Tensor::zeros([b, c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..b * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ry.iter().enumerate() {
            let (wy0, wy1) = (T::c(1.0 - ly), T::c(ly));
            for (ox, &(x0, x1, lx)) in rx.iter().enumerate() {
                let (wx0, wx1) = (T::c(1.0 - lx), T::c(lx));
                d[oy * ow + ox] = wy0 * (wx0 * s[y0 * w + x0] + wx1 * s[y0 * w + x1])
                    + wy1 * (wx0 * s[y1 * w + x0] + wx1 * s[y1 * w + x1]);
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<T: Scalar>(dy: &Tensor<T>, in_shape: Shape) -> Tensor<T> {
    let [b, c, h, w] = in_shape;
    let [_, _, oh, ow] = dy.shape();
    if (h, w) == (oh, ow) {
        return dy.clone();
    }
    let ry = bilinear_taps(h, oh);
    let rx = bilinear_taps(w, ow);
    let mut dx = Tensor::zeros(in_shape);
    let src = dy.data();
    let dst = dx.data_mut();
    for plane in 0..b * c {
        let g = &src[plane * oh * ow..(plane + 1) * oh * ow];
        let d = &mut dst[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ry.iter().enumerate() {
            let (wy0, wy1) = (T::c(1.0 - ly), T::c(ly));
            for (ox, &(x0, x1, lx)) in rx.iter().enumerate() {
                let (wx0, wx1) = (T::c(1.0 - lx), T::c(lx));
                let v = g[oy * ow + ox];
                d[y0 * w + x0] += wy0 * wx0 * v;
                d[y0 * w + x1] += wy0 * wx1 * v;
                d[y1 * w + x0] += wy1 * wx0 * v;
                d[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
    dx
}
