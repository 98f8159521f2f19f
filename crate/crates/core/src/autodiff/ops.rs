//! Differentiable tensor operations.
//!
//! Every function records one node on the [`Graph`]. Backward closures read
//! parent values from the tape instead of capturing tensors, so the only
//! captured state is small op configuration. Convolution uses im2col plus
//! matrix multiplication and recomputes the column matrix in the backward
//! pass rather than storing it.

use ndarray::{concatenate, Array1, Array2, Array4, ArrayD, ArrayView3, ArrayViewMut3, Axis, Ix1, Ix2, Ix4, IxDyn};

use super::graph::{Graph, T};
use crate::image::quantize_value;
use crate::scalar::Scalar;

fn same_shape<S: Scalar>(g: &Graph<S>, a: T, b: T, op: &str) {
    assert_eq!(g.value(a).shape(), g.value(b).shape(), "{op}: shape mismatch");
}

/// Copies an array into a freshly allocated one with the given shape.
fn reshaped<S: Scalar>(a: &ArrayD<S>, shape: &[usize]) -> ArrayD<S> {
    let len: usize = shape.iter().product();
    assert_eq!(a.len(), len, "reshape: {:?} has {} elements, target {:?}", a.shape(), a.len(), shape);
    ArrayD::from_shape_vec(IxDyn(shape), a.iter().cloned().collect()).expect("checked length")
}

fn as4<'a, S: Scalar>(a: &'a ArrayD<S>, op: &str) -> ndarray::ArrayView4<'a, S> {
    a.view().into_dimensionality::<Ix4>().unwrap_or_else(|_| panic!("{op}: tensor must be 4-d, got {:?}", a.shape()))
}

fn as2<'a, S: Scalar>(a: &'a ArrayD<S>, op: &str) -> ndarray::ArrayView2<'a, S> {
    a.view().into_dimensionality::<Ix2>().unwrap_or_else(|_| panic!("{op}: tensor must be 2-d, got {:?}", a.shape()))
}

fn to_mat<S: Scalar>(a: &ArrayD<S>, rows: usize, cols: usize) -> Array2<S> {
    assert_eq!(a.len(), rows * cols);
    Array2::from_shape_vec((rows, cols), a.iter().cloned().collect()).expect("checked length")
}

pub fn add<S: Scalar>(g: &mut Graph<S>, a: T, b: T) -> T {
    same_shape(g, a, b, "add");
    let out = g.value(a) + g.value(b);
    g.push(out, vec![a.0, b.0], Box::new(|args| {
        vec![(0, args.grad.clone()), (1, args.grad.clone())]
    }))
}

pub fn sub<S: Scalar>(g: &mut Graph<S>, a: T, b: T) -> T {
    same_shape(g, a, b, "sub");
    let out = g.value(a) - g.value(b);
    g.push(out, vec![a.0, b.0], Box::new(|args| {
        vec![(0, args.grad.clone()), (1, args.grad.mapv(|v| -v))]
    }))
}

pub fn mul<S: Scalar>(g: &mut Graph<S>, a: T, b: T) -> T {
    same_shape(g, a, b, "mul");
    let out = g.value(a) * g.value(b);
    g.push(out, vec![a.0, b.0], Box::new(|args| {
        vec![(0, args.grad * args.parents[1]), (1, args.grad * args.parents[0])]
    }))
}

pub fn div<S: Scalar>(g: &mut Graph<S>, a: T, b: T) -> T {
    same_shape(g, a, b, "div");
    let out = g.value(a) / g.value(b);
    g.push(out, vec![a.0, b.0], Box::new(|args| {
        let da = args.grad / args.parents[1];
        let db = -(args.grad * args.value) / args.parents[1];
        vec![(0, da), (1, db)]
    }))
}

pub fn neg<S: Scalar>(g: &mut Graph<S>, a: T) -> T {
    let out = g.value(a).mapv(|v| -v);
    g.push(out, vec![a.0], Box::new(|args| vec![(0, args.grad.mapv(|v| -v))]))
}

pub fn abs<S: Scalar>(g: &mut Graph<S>, a: T) -> T {
    let out = g.value(a).mapv(|v| v.abs());
    g.push(out, vec![a.0], Box::new(|args| {
        let sign = args.parents[0].mapv(|v| {
            if v > S::zero() {
                S::one()
            } else if v < S::zero() {
                -S::one()
            } else {
                S::zero()
            }
        });
        vec![(0, args.grad * &sign)]
    }))
}

pub fn exp<S: Scalar>(g: &mut Graph<S>, a: T) -> T {
    let out = g.value(a).mapv(|v| v.exp());
    g.push(out, vec![a.0], Box::new(|args| vec![(0, args.grad * args.value)]))
}

pub fn tanh<S: Scalar>(g: &mut Graph<S>, a: T) -> T {
    let out = g.value(a).mapv(|v| v.tanh());
    g.push(out, vec![a.0], Box::new(|args| {
        let d = args.value.mapv(|y| S::one() - y * y);
        vec![(0, args.grad * &d)]
    }))
}

pub fn logistic<S: Scalar>(g: &mut Graph<S>, a: T) -> T {
    let out = g.value(a).mapv(|v| S::one() / (S::one() + (-v).exp()));
    g.push(out, vec![a.0], Box::new(|args| {
        let d = args.value.mapv(|y| y * (S::one() - y));
        vec![(0, args.grad * &d)]
    }))
}

pub fn leaky_relu<S: Scalar>(g: &mut Graph<S>, a: T, slope: f64) -> T {
    let k = S::of(slope);
    let out = g.value(a).mapv(|v| if v >= S::zero() { v } else { v * k });
    g.push(out, vec![a.0], Box::new(move |args| {
        let mut d = args.grad.clone();
        ndarray::Zip::from(&mut d).and(args.parents[0]).for_each(|dv, &x| {
            if x < S::zero() {
                *dv = *dv * k;
            }
        });
        vec![(0, d)]
    }))
}

/// `sqrt(x + eps)` with `eps > 0` keeping the gradient finite at zero.
pub fn sqrt_eps<S: Scalar>(g: &mut Graph<S>, a: T, eps: f64) -> T {
    assert!(eps > 0.0, "sqrt_eps needs a positive eps");
    let e = S::of(eps);
    let out = g.value(a).mapv(|v| (v + e).sqrt());
    g.push(out, vec![a.0], Box::new(|args| {
        let half = S::of(0.5);
        let d = args.value.mapv(|y| half / y);
        vec![(0, args.grad * &d)]
    }))
}

pub fn square<S: Scalar>(g: &mut Graph<S>, a: T) -> T {
    let out = g.value(a).mapv(|v| v * v);
    g.push(out, vec![a.0], Box::new(|args| {
        let two = S::of(2.0);
        vec![(0, (args.grad * args.parents[0]).mapv(|v| v * two))]
    }))
}

pub fn scale<S: Scalar>(g: &mut Graph<S>, a: T, c: f64) -> T {
    let k = S::of(c);
    let out = g.value(a).mapv(|v| v * k);
    g.push(out, vec![a.0], Box::new(move |args| vec![(0, args.grad.mapv(|v| v * k))]))
}

pub fn add_scalar<S: Scalar>(g: &mut Graph<S>, a: T, c: f64) -> T {
    let k = S::of(c);
    let out = g.value(a).mapv(|v| v + k);
    g.push(out, vec![a.0], Box::new(|args| vec![(0, args.grad.clone())]))
}

pub fn sum_all<S: Scalar>(g: &mut Graph<S>, a: T) -> T {
    let s: S = g.value(a).iter().cloned().sum();
    let out = ArrayD::from_elem(IxDyn(&[]), s);
    g.push(out, vec![a.0], Box::new(|args| {
        let gv = *args.grad.iter().next().unwrap();
        vec![(0, ArrayD::from_elem(args.parents[0].raw_dim(), gv))]
    }))
}

pub fn mean_all<S: Scalar>(g: &mut Graph<S>, a: T) -> T {
    let n = g.value(a).len();
    assert!(n > 0, "mean of empty tensor");
    let s: S = g.value(a).iter().cloned().sum();
    let out = ArrayD::from_elem(IxDyn(&[]), s / S::of(n as f64));
    g.push(out, vec![a.0], Box::new(move |args| {
        let gv = *args.grad.iter().next().unwrap() / S::of(n as f64);
        vec![(0, ArrayD::from_elem(args.parents[0].raw_dim(), gv))]
    }))
}

pub fn reshape<S: Scalar>(g: &mut Graph<S>, a: T, shape: &[usize]) -> T {
    let out = reshaped(g.value(a), shape);
    g.push(out, vec![a.0], Box::new(|args| {
        vec![(0, reshaped(args.grad, args.parents[0].shape()))]
    }))
}

/// Stops gradient flow; the value continues as a constant.
pub fn detach<S: Scalar>(g: &mut Graph<S>, a: T) -> T {
    let v = g.value(a).clone();
    g.constant(v)
}

/// Concatenates `[n, c_i, h, w]` tensors along the channel axis.
pub fn concat_c<S: Scalar>(g: &mut Graph<S>, parts: &[T]) -> T {
    assert!(!parts.is_empty(), "concat_c of nothing");
    let views: Vec<_> = parts.iter().map(|t| g.value(*t).view()).collect();
    let out = concatenate(Axis(1), &views).expect("concat_c: incompatible shapes");
    let sizes: Vec<usize> = parts.iter().map(|t| g.value(*t).shape()[1]).collect();
    let parents: Vec<usize> = parts.iter().map(|t| t.0).collect();
    g.push(out, parents, Box::new(move |args| {
        let mut offs = 0usize;
        let mut out = Vec::with_capacity(sizes.len());
        for (slot, &sz) in sizes.iter().enumerate() {
            let piece = args
                .grad
                .slice_axis(Axis(1), ndarray::Slice::from(offs..offs + sz))
                .to_owned();
            out.push((slot, piece));
            offs += sz;
        }
        out
    }))
}

fn slice_axis_op<S: Scalar>(g: &mut Graph<S>, a: T, axis: usize, lo: usize, hi: usize) -> T {
    let v = g.value(a);
    assert!(axis < v.ndim() && lo < hi && hi <= v.shape()[axis], "slice out of bounds");
    let out = v.slice_axis(Axis(axis), ndarray::Slice::from(lo..hi)).to_owned();
    g.push(out, vec![a.0], Box::new(move |args| {
        let mut dx = ArrayD::<S>::zeros(args.parents[0].raw_dim());
        dx.slice_axis_mut(Axis(axis), ndarray::Slice::from(lo..hi)).assign(args.grad);
        vec![(0, dx)]
    }))
}

pub fn slice_c<S: Scalar>(g: &mut Graph<S>, a: T, c0: usize, c1: usize) -> T {
    slice_axis_op(g, a, 1, c0, c1)
}

pub fn slice_h<S: Scalar>(g: &mut Graph<S>, a: T, h0: usize, h1: usize) -> T {
    slice_axis_op(g, a, 2, h0, h1)
}

pub fn slice_w<S: Scalar>(g: &mut Graph<S>, a: T, w0: usize, w1: usize) -> T {
    slice_axis_op(g, a, 3, w0, w1)
}

/// Per-channel affine modulation: `out[n,c,h,w] = x * scale[n,c] + shift[n,c]`.
pub fn film<S: Scalar>(g: &mut Graph<S>, x: T, scl: T, shift: T) -> T {
    let xv = as4(g.value(x), "film").to_owned();
    let sv = as2(g.value(scl), "film").to_owned();
    let bv = as2(g.value(shift), "film").to_owned();
    assert_eq!(xv.dim().0, sv.dim().0, "film: batch mismatch");
    assert_eq!(xv.dim().1, sv.dim().1, "film: channel mismatch");
    assert_eq!(sv.dim(), bv.dim(), "film: scale/shift mismatch");
    let s4 = sv.insert_axis(Axis(2)).insert_axis(Axis(3));
    let b4 = bv.insert_axis(Axis(2)).insert_axis(Axis(3));
    let out = (&xv * &s4 + &b4).into_dyn();
    g.push(out, vec![x.0, scl.0, shift.0], Box::new(|args| {
        let g4 = as4(args.grad, "film");
        let x4 = as4(args.parents[0], "film");
        let s2 = as2(args.parents[1], "film");
        let s4 = s2.insert_axis(Axis(2)).insert_axis(Axis(3));
        let dx = (&g4 * &s4).into_dyn();
        let gx = (&g4 * &x4).sum_axis(Axis(3)).sum_axis(Axis(2)).into_dyn();
        let db = g4.sum_axis(Axis(3)).sum_axis(Axis(2)).into_dyn();
        vec![(0, dx), (1, gx), (2, db)]
    }))
}

/// Adds a `[c]` bias across a `[n, c, h, w]` tensor.
pub fn bias_add_c<S: Scalar>(g: &mut Graph<S>, x: T, b: T) -> T {
    let xv = as4(g.value(x), "bias_add_c").to_owned();
    let bv = g.value(b).view().into_dimensionality::<Ix1>().expect("bias must be 1-d").to_owned();
    assert_eq!(xv.dim().1, bv.len(), "bias_add_c: channel mismatch");
    let b4 = bv.insert_axis(Axis(0)).insert_axis(Axis(2)).insert_axis(Axis(3));
    let out = (&xv + &b4).into_dyn();
    g.push(out, vec![x.0, b.0], Box::new(|args| {
        let g4 = as4(args.grad, "bias_add_c");
        let db = g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn();
        vec![(0, args.grad.clone()), (1, db)]
    }))
}

/// `x[n,f] . w[o,f]^T (+ b[o])`.
pub fn linear<S: Scalar>(g: &mut Graph<S>, x: T, w: T, b: Option<T>) -> T {
    let xv = as2(g.value(x), "linear").to_owned();
    let wv = as2(g.value(w), "linear").to_owned();
    assert_eq!(xv.dim().1, wv.dim().1, "linear: feature mismatch");
    let mut out = xv.dot(&wv.t());
    let mut parents = vec![x.0, w.0];
    if let Some(bt) = b {
        let bv = g.value(bt).view().into_dimensionality::<Ix1>().expect("bias must be 1-d");
        assert_eq!(bv.len(), out.dim().1, "linear: bias mismatch");
        out += &bv.view().insert_axis(Axis(0));
        parents.push(bt.0);
    }
    let has_bias = b.is_some();
    let x_needs = g.needs_grad(x);
    let w_needs = g.needs_grad(w);
    g.push(out.into_dyn(), parents, Box::new(move |args| {
        let g2 = as2(args.grad, "linear");
        let x2 = as2(args.parents[0], "linear");
        let w2 = as2(args.parents[1], "linear");
        let mut out = Vec::new();
        if x_needs {
            out.push((0, g2.dot(&w2).into_dyn()));
        }
        if w_needs {
            out.push((1, g2.t().dot(&x2).into_dyn()));
        }
        if has_bias {
            out.push((2, g2.sum_axis(Axis(0)).into_dyn()));
        }
        out
    }))
}

/// Plain 2-d matrix product `a[m,k] . b[k,n]`.
pub fn matmul<S: Scalar>(g: &mut Graph<S>, a: T, b: T) -> T {
    let av = as2(g.value(a), "matmul").to_owned();
    let bv = as2(g.value(b), "matmul").to_owned();
    assert_eq!(av.dim().1, bv.dim().0, "matmul: inner dim mismatch");
    let out = av.dot(&bv).into_dyn();
    let a_needs = g.needs_grad(a);
    let b_needs = g.needs_grad(b);
    g.push(out, vec![a.0, b.0], Box::new(move |args| {
        let g2 = as2(args.grad, "matmul");
        let a2 = as2(args.parents[0], "matmul");
        let b2 = as2(args.parents[1], "matmul");
        let mut out = Vec::new();
        if a_needs {
            out.push((0, g2.dot(&b2.t()).into_dyn()));
        }
        if b_needs {
            out.push((1, a2.t().dot(&g2).into_dyn()));
        }
        out
    }))
}

fn im2col<S: Scalar>(
    x: &ArrayView3<'_, S>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<S> {
    let (ci, h, w) = x.dim();
    let mut col = Array2::<S>::zeros((ci * kh * kw, ho * wo));
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * wo + ox]] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im_add<S: Scalar>(
    dst: &mut ArrayViewMut3<'_, S>,
    dcol: &Array2<S>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let (ci, h, w) = dst.dim();
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[[c, iy as usize, ix as usize]] += dcol[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
}

/// 2-d convolution over `[n, ci, h, w]` with weight `[co, ci, kh, kw]`,
/// zero padding and floor output sizing.
pub fn conv2d<S: Scalar>(
    g: &mut Graph<S>,
    x: T,
    w: T,
    b: Option<T>,
    stride: usize,
    pad: usize,
) -> T {
    assert!(stride >= 1, "conv2d: stride must be >= 1");
    let x4 = as4(g.value(x), "conv2d").to_owned();
    let w4 = as4(g.value(w), "conv2d").to_owned();
    let (n, ci, h, wdt) = x4.dim();
    let (co, ciw, kh, kw) = w4.dim();
    assert_eq!(ci, ciw, "conv2d: channel mismatch");
    assert!(h + 2 * pad >= kh && wdt + 2 * pad >= kw, "conv2d: kernel exceeds padded input");
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wdt + 2 * pad - kw) / stride + 1;

    let w2 = to_mat(g.value(w), co, ci * kh * kw);
    let mut out = Array4::<S>::zeros((n, co, ho, wo));
    for i in 0..n {
        let col = im2col(&x4.index_axis(Axis(0), i), kh, kw, stride, pad, ho, wo);
        let o = w2.dot(&col);
        out.index_axis_mut(Axis(0), i)
            .assign(&o.into_shape_with_order((co, ho, wo)).expect("conv2d output reshape"));
    }
    let mut parents = vec![x.0, w.0];
    if let Some(bt) = b {
        let bv = g.value(bt).view().into_dimensionality::<Ix1>().expect("conv bias must be 1-d");
        assert_eq!(bv.len(), co, "conv2d: bias mismatch");
        let b4 = bv.to_owned().insert_axis(Axis(0)).insert_axis(Axis(2)).insert_axis(Axis(3));
        out += &b4;
        parents.push(bt.0);
    }
    let has_bias = b.is_some();
    let x_needs = g.needs_grad(x);
    let w_needs = g.needs_grad(w);
    g.push(out.into_dyn(), parents, Box::new(move |args| {
        let g4 = as4(args.grad, "conv2d");
        let x4 = as4(args.parents[0], "conv2d");
        let w2 = to_mat(args.parents[1], co, ci * kh * kw);
        let mut dw2 = Array2::<S>::zeros((co, ci * kh * kw));
        let mut dx = Array4::<S>::zeros((n, ci, h, wdt));
        for i in 0..n {
            let gmat = to_mat(&g4.index_axis(Axis(0), i).to_owned().into_dyn(), co, ho * wo);
            if w_needs || x_needs {
                if w_needs {
                    let col = im2col(&x4.index_axis(Axis(0), i), kh, kw, stride, pad, ho, wo);
                    dw2 = dw2 + gmat.dot(&col.t());
                }
                if x_needs {
                    let dcol = w2.t().dot(&gmat);
                    col2im_add(
                        &mut dx.index_axis_mut(Axis(0), i),
                        &dcol,
                        kh,
                        kw,
                        stride,
                        pad,
                        ho,
                        wo,
                    );
                }
            }
        }
        let mut out = Vec::new();
        if x_needs {
            out.push((0, dx.into_dyn()));
        }
        if w_needs {
            out.push((1, reshaped(&dw2.into_dyn(), &[co, ci, kh, kw])));
        }
        if has_bias {
            let db = g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn();
            out.push((2, db));
        }
        out
    }))
}

/// 2x2 average pooling with stride 2; spatial dims must be even.
pub fn avg_pool2<S: Scalar>(g: &mut Graph<S>, x: T) -> T {
    let x4 = as4(g.value(x), "avg_pool2").to_owned();
    let (n, c, h, w) = x4.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims, got {h}x{w}");
    let quarter = S::of(0.25);
    let mut out = Array4::<S>::zeros((n, c, h / 2, w / 2));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    let s = x4[[ni, ci, 2 * y, 2 * xx]]
                        + x4[[ni, ci, 2 * y + 1, 2 * xx]]
                        + x4[[ni, ci, 2 * y, 2 * xx + 1]]
                        + x4[[ni, ci, 2 * y + 1, 2 * xx + 1]];
                    out[[ni, ci, y, xx]] = s * quarter;
                }
            }
        }
    }
    g.push(out.into_dyn(), vec![x.0], Box::new(move |args| {
        let g4 = as4(args.grad, "avg_pool2");
        let mut dx = Array4::<S>::zeros((n, c, h, w));
        let quarter = S::of(0.25);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h / 2 {
                    for xx in 0..w / 2 {
                        let gv = g4[[ni, ci, y, xx]] * quarter;
                        dx[[ni, ci, 2 * y, 2 * xx]] += gv;
                        dx[[ni, ci, 2 * y + 1, 2 * xx]] += gv;
                        dx[[ni, ci, 2 * y, 2 * xx + 1]] += gv;
                        dx[[ni, ci, 2 * y + 1, 2 * xx + 1]] += gv;
                    }
                }
            }
        }
        vec![(0, dx.into_dyn())]
    }))
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2<S: Scalar>(g: &mut Graph<S>, x: T) -> T {
    let x4 = as4(g.value(x), "upsample_nearest2").to_owned();
    let (n, c, h, w) = x4.dim();
    let mut out = Array4::<S>::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[[ni, ci, y, xx]] = x4[[ni, ci, y / 2, xx / 2]];
                }
            }
        }
    }
    g.push(out.into_dyn(), vec![x.0], Box::new(move |args| {
        let g4 = as4(args.grad, "upsample_nearest2");
        let mut dx = Array4::<S>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dx[[ni, ci, y / 2, xx / 2]] += g4[[ni, ci, y, xx]];
                    }
                }
            }
        }
        vec![(0, dx.into_dyn())]
    }))
}

/// Spatial mean: `[n, c, h, w] -> [n, c]`.
pub fn global_avg_pool<S: Scalar>(g: &mut Graph<S>, x: T) -> T {
    let x4 = as4(g.value(x), "global_avg_pool");
    let (_, _, h, w) = x4.dim();
    let inv = S::of(1.0 / (h * w) as f64);
    let out = x4.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|v| v * inv).into_dyn();
    g.push(out, vec![x.0], Box::new(move |args| {
        let g2 = as2(args.grad, "global_avg_pool");
        let (n, c) = g2.dim();
        let mut dx = Array4::<S>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let gv = g2[[ni, ci]] * inv;
                dx.index_axis_mut(Axis(0), ni).index_axis_mut(Axis(0), ci).fill(gv);
            }
        }
        vec![(0, dx.into_dyn())]
    }))
}

/// Mean over k-by-k windows, valid placement only:
/// `[n, c, h, w] -> [n, c, h-k+1, w-k+1]`.
pub fn box_mean_valid<S: Scalar>(g: &mut Graph<S>, x: T, k: usize) -> T {
    let x4 = as4(g.value(x), "box_mean_valid").to_owned();
    let (n, c, h, w) = x4.dim();
    assert!(k >= 1 && k <= h && k <= w, "box_mean_valid: window {k} exceeds {h}x{w}");
    let (oh, ow) = (h - k + 1, w - k + 1);
    let inv = S::of(1.0 / (k * k) as f64);
    let mut out = Array4::<S>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = S::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            s += x4[[ni, ci, y + dy, xx + dx]];
                        }
                    }
                    out[[ni, ci, y, xx]] = s * inv;
                }
            }
        }
    }
    g.push(out.into_dyn(), vec![x.0], Box::new(move |args| {
        let g4 = as4(args.grad, "box_mean_valid");
        let mut dx = Array4::<S>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let gv = g4[[ni, ci, y, xx]] * inv;
                        for dy in 0..k {
                            for dxx in 0..k {
                                dx[[ni, ci, y + dy, xx + dxx]] += gv;
                            }
                        }
                    }
                }
            }
        }
        vec![(0, dx.into_dyn())]
    }))
}

/// Snaps `[-1, 1]` values to the 8-bit grid in the forward pass and passes
/// gradients through unchanged (straight-through estimator).
pub fn quantize_ste<S: Scalar>(g: &mut Graph<S>, x: T) -> T {
    let out = g.value(x).mapv(|v| S::of(quantize_value(v.as_f64()) / 255.0 * 2.0 - 1.0));
    g.push(out, vec![x.0], Box::new(|args| vec![(0, args.grad.clone())]))
}

fn sin_cos_row(i: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut row = Vec::with_capacity(dim);
    for j in 0..half {
        let omega = (10000f64).powf(-(j as f64) / half as f64);
        row.push((i * omega).sin());
        row.push((i * omega).cos());
    }
    row
}

/// Sinusoidal embedding of a continuous time step `t[n] -> [n, dim]`.
///
/// Integer grid embeddings are linearly interpolated so the op stays
/// differentiable in `t`; inputs clamp to `[0, t_max - 1]`.
pub fn time_embed<S: Scalar>(g: &mut Graph<S>, t: T, dim: usize, t_max: usize) -> T {
    assert!(dim >= 2 && dim % 2 == 0, "time_embed dim must be even and >= 2");
    assert!(t_max >= 2, "time_embed needs t_max >= 2");
    let tv = g.value(t).view().into_dimensionality::<Ix1>().expect("time input must be 1-d").to_owned();
    let n = tv.len();
    let mut out = Array2::<S>::zeros((n, dim));
    for s in 0..n {
        let tf = tv[s].as_f64().clamp(0.0, (t_max - 1) as f64);
        let i0 = (tf.floor() as usize).min(t_max - 2);
        let f = (tf - i0 as f64).clamp(0.0, 1.0);
        let e0 = sin_cos_row(i0 as f64, dim);
        let e1 = sin_cos_row((i0 + 1) as f64, dim);
        for d in 0..dim {
            out[[s, d]] = S::of((1.0 - f) * e0[d] + f * e1[d]);
        }
    }
    g.push(out.into_dyn(), vec![t.0], Box::new(move |args| {
        let g2 = as2(args.grad, "time_embed");
        let t1 = args.parents[0].view().into_dimensionality::<Ix1>().expect("time input must be 1-d");
        let mut dt = Array1::<S>::zeros(t1.len());
        for s in 0..t1.len() {
            let tf = t1[s].as_f64().clamp(0.0, (t_max - 1) as f64);
            let i0 = (tf.floor() as usize).min(t_max - 2);
            let e0 = sin_cos_row(i0 as f64, dim);
            let e1 = sin_cos_row((i0 + 1) as f64, dim);
            let mut acc = 0.0;
            for d in 0..dim {
                acc += g2[[s, d]].as_f64() * (e1[d] - e0[d]);
            }
            dt[s] = S::of(acc);
        }
        vec![(0, dt.into_dyn())]
    }))
}

/// Mean absolute difference, the workhorse reconstruction loss.
pub fn l1_mean<S: Scalar>(g: &mut Graph<S>, a: T, b: T) -> T {
    let d = sub(g, a, b);
    let m = abs(g, d);
    mean_all(g, m)
}

/// Mean squared difference.
pub fn mse_mean<S: Scalar>(g: &mut Graph<S>, a: T, b: T) -> T {
    let d = sub(g, a, b);
    let m = square(g, d);
    mean_all(g, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::graph::Graph;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences against the tape for every input element.
    fn grad_check(
        build: &dyn Fn(&mut Graph<f64>, &[T]) -> T,
        inputs: &[ArrayD<f64>],
        tol: f64,
    ) {
        let eval = |inputs: &[ArrayD<f64>]| -> f64 {
            let mut g = Graph::<f64>::new();
            let vars: Vec<T> = inputs.iter().map(|v| g.var(v.clone())).collect();
            let out = build(&mut g, &vars);
            g.scalar_value(out)
        };
        let mut g = Graph::<f64>::new();
        let vars: Vec<T> = inputs.iter().map(|v| g.var(v.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let analytic =
                grads.of(vars[k]).cloned().unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
            for idx in 0..input.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[k].as_slice_mut().unwrap()[idx] += h;
                minus[k].as_slice_mut().unwrap()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let got = analytic.as_slice().unwrap()[idx];
                let denom = numeric.abs().max(got.abs()).max(1e-6);
                assert!(
                    ((numeric - got) / denom).abs() < tol,
                    "input {k} elem {idx}: numeric {numeric} vs tape {got}"
                );
            }
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = randn(&mut rng, &[2, 3]);
        let b = randn(&mut rng, &[2, 3]).mapv(|v| v + 3.0);
        grad_check(&|g, v| { let x = add(g, v[0], v[1]); mean_all(g, x) }, &[a.clone(), b.clone()], 1e-6);
        grad_check(&|g, v| { let x = sub(g, v[0], v[1]); mean_all(g, x) }, &[a.clone(), b.clone()], 1e-6);
        grad_check(&|g, v| { let x = mul(g, v[0], v[1]); mean_all(g, x) }, &[a.clone(), b.clone()], 1e-6);
        grad_check(&|g, v| { let x = div(g, v[0], v[1]); mean_all(g, x) }, &[a.clone(), b.clone()], 1e-5);
        grad_check(&|g, v| { let x = neg(g, v[0]); sum_all(g, x) }, &[a.clone()], 1e-6);
        grad_check(&|g, v| { let x = exp(g, v[0]); mean_all(g, x) }, &[a.clone()], 1e-6);
        grad_check(&|g, v| { let x = tanh(g, v[0]); mean_all(g, x) }, &[a.clone()], 1e-6);
        grad_check(&|g, v| { let x = logistic(g, v[0]); mean_all(g, x) }, &[a.clone()], 1e-6);
        grad_check(&|g, v| { let x = square(g, v[0]); mean_all(g, x) }, &[a.clone()], 1e-6);
        grad_check(&|g, v| { let x = scale(g, v[0], -2.5); mean_all(g, x) }, &[a.clone()], 1e-6);
        grad_check(&|g, v| { let x = add_scalar(g, v[0], 0.7); mean_all(g, x) }, &[a.clone()], 1e-6);
        grad_check(&|g, v| { let x = sqrt_eps(g, v[0], 4.0); mean_all(g, x) }, &[a.clone()], 1e-6);
    }

    #[test]
    fn nonsmooth_ops_away_from_kinks() {
        let a = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.5, -0.75, 1.25, -2.0]).unwrap();
        grad_check(&|g, v| { let x = abs(g, v[0]); mean_all(g, x) }, &[a.clone()], 1e-6);
        grad_check(&|g, v| { let x = leaky_relu(g, v[0], 0.1); mean_all(g, x) }, &[a], 1e-6);
    }

    #[test]
    fn shape_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = randn(&mut rng, &[1, 2, 3, 4]);
        let b = randn(&mut rng, &[1, 3, 3, 4]);
        grad_check(
            &|g, v| { let x = concat_c(g, &[v[0], v[1]]); let y = square(g, x); mean_all(g, y) },
            &[a.clone(), b.clone()],
            1e-6,
        );
        grad_check(
            &|g, v| { let x = slice_c(g, v[0], 1, 2); let y = exp(g, x); mean_all(g, y) },
            &[a.clone()],
            1e-6,
        );
        grad_check(
            &|g, v| { let x = slice_h(g, v[0], 0, 2); let y = square(g, x); mean_all(g, y) },
            &[a.clone()],
            1e-6,
        );
        grad_check(
            &|g, v| { let x = slice_w(g, v[0], 1, 4); let y = square(g, x); mean_all(g, y) },
            &[a.clone()],
            1e-6,
        );
        grad_check(
            &|g, v| { let x = reshape(g, v[0], &[6, 4]); let y = square(g, x); mean_all(g, y) },
            &[a],
            1e-6,
        );
    }

    #[test]
    fn linear_algebra_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = randn(&mut rng, &[3, 4]);
        let w = randn(&mut rng, &[2, 4]);
        let b = randn(&mut rng, &[2]);
        grad_check(
            &|g, v| { let y = linear(g, v[0], v[1], Some(v[2])); let z = square(g, y); mean_all(g, z) },
            &[x.clone(), w.clone(), b],
            1e-6,
        );
        let a = randn(&mut rng, &[3, 2]);
        let m = randn(&mut rng, &[2, 5]);
        grad_check(
            &|g, v| { let y = matmul(g, v[0], v[1]); let z = square(g, y); mean_all(g, z) },
            &[a, m],
            1e-6,
        );
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = randn(&mut rng, &[2, 3, 5, 6]);
        let w = randn(&mut rng, &[4, 3, 3, 3]);
        let b = randn(&mut rng, &[4]);
        grad_check(
            &|g, v| {
                let y = conv2d(g, v[0], v[1], Some(v[2]), 1, 1);
                let z = square(g, y);
                mean_all(g, z)
            },
            &[x.clone(), w.clone(), b.clone()],
            1e-5,
        );
        grad_check(
            &|g, v| {
                let y = conv2d(g, v[0], v[1], Some(v[2]), 2, 1);
                let z = square(g, y);
                mean_all(g, z)
            },
            &[x, w, b],
            1e-5,
        );
    }

    #[test]
    fn conv2d_output_shape_uses_floor() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(ArrayD::zeros(IxDyn(&[1, 2, 16, 17])));
        let w = g.constant(ArrayD::zeros(IxDyn(&[3, 2, 3, 3])));
        let y = conv2d(&mut g, x, w, None, 2, 1);
        assert_eq!(g.value(y).shape(), &[1, 3, 8, 9]);
    }

    #[test]
    fn pooling_and_resampling_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = randn(&mut rng, &[2, 2, 4, 6]);
        grad_check(
            &|g, v| { let y = avg_pool2(g, v[0]); let z = square(g, y); mean_all(g, z) },
            &[x.clone()],
            1e-6,
        );
        grad_check(
            &|g, v| { let y = upsample_nearest2(g, v[0]); let z = square(g, y); mean_all(g, z) },
            &[x.clone()],
            1e-6,
        );
        grad_check(
            &|g, v| { let y = global_avg_pool(g, v[0]); let z = square(g, y); mean_all(g, z) },
            &[x.clone()],
            1e-6,
        );
        grad_check(
            &|g, v| { let y = box_mean_valid(g, v[0], 3); let z = square(g, y); mean_all(g, z) },
            &[x],
            1e-6,
        );
    }

    #[test]
    fn film_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = randn(&mut rng, &[2, 3, 4, 4]);
        let s = randn(&mut rng, &[2, 3]);
        let b = randn(&mut rng, &[2, 3]);
        grad_check(
            &|g, v| { let y = film(g, v[0], v[1], v[2]); let z = square(g, y); mean_all(g, z) },
            &[x.clone(), s, b.clone()],
            1e-6,
        );
        let bias = randn(&mut rng, &[3]);
        grad_check(
            &|g, v| { let y = bias_add_c(g, v[0], v[1]); let z = square(g, y); mean_all(g, z) },
            &[x, bias],
            1e-6,
        );
    }

    #[test]
    fn time_embed_matches_finite_differences_between_integers() {
        let t = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.4, 500.5, 998.2]).unwrap();
        grad_check(
            &|g, v| { let e = time_embed(g, v[0], 16, 1000); let z = square(g, e); mean_all(g, z) },
            &[t],
            1e-4,
        );
    }

    #[test]
    fn quantize_ste_snaps_forward_and_passes_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.var(ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.0, 0.4999, -0.731]).unwrap());
        let q = quantize_ste(&mut g, x);
        for (&v, &orig) in g.value(q).iter().zip(g.value(x).iter()) {
            let snapped = quantize_value(orig) / 255.0 * 2.0 - 1.0;
            assert_eq!(v, snapped);
            assert!((v - orig).abs() <= 1.0 / 255.0 + 1e-12);
        }
        let loss = sum_all(&mut g, q);
        let grads = g.backward(loss);
        for &gv in grads.of(x).unwrap().iter() {
            assert_eq!(gv, 1.0);
        }
    }

    #[test]
    fn detach_blocks_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.var(ArrayD::from_elem(IxDyn(&[2]), 2.0));
        let d = detach(&mut g, x);
        let y = sum_all(&mut g, d);
        let grads = g.backward(y);
        assert!(grads.of(x).is_none());
    }
}
