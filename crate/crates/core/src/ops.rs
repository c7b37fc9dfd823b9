//! Forward and backward kernels for the graph ops.
//!
//! Every function here is a pure map from input tensors to output tensors;
//! the graph layer owns dispatch and gradient accumulation.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_shape, broadcast_strides, TensorBase};

fn shape_err(node: &str, detail: String) -> CoreError {
    CoreError::ShapeMismatch {
        node: node.to_string(),
        detail,
    }
}

// ---------------------------------------------------------------------------
// broadcast elementwise
// ---------------------------------------------------------------------------

pub fn binary<S: Scalar>(
    node: &str,
    a: &TensorBase<S>,
    b: &TensorBase<S>,
    f: impl Fn(S, S) -> S,
) -> Result<TensorBase<S>> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return TensorBase::new(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| shape_err(node, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())))?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let numel: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let ad = a.data();
    let bd = b.data();
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    for _ in 0..numel {
        data.push(f(ad[off_a], bd[off_b]));
        // odometer increment over the output index space
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off_a += sa[d];
            off_b += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            off_a -= sa[d] * out_shape[d];
            off_b -= sb[d] * out_shape[d];
        }
    }
    TensorBase::new(out_shape, data)
}

/// Sum `grad` down to `shape` (reverse of broadcasting).
pub fn reduce_to_shape<S: Scalar>(grad: &TensorBase<S>, shape: &[usize]) -> TensorBase<S> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let gshape = grad.shape();
    let mut out = TensorBase::zeros(shape);
    // target offset uses the source strides with 0 on reduced axes
    let tstrides = broadcast_strides(shape, gshape);
    let od = out.data_mut();
    let mut idx = vec![0usize; gshape.len()];
    let mut ooff = 0usize;
    for &gv in grad.data() {
        od[ooff] += gv;
        for d in (0..gshape.len()).rev() {
            idx[d] += 1;
            ooff += tstrides[d];
            if idx[d] < gshape[d] {
                break;
            }
            idx[d] = 0;
            ooff -= tstrides[d] * gshape[d];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// matmul / transpose
// ---------------------------------------------------------------------------

pub fn matmul<S: Scalar>(node: &str, a: &TensorBase<S>, b: &TensorBase<S>) -> Result<TensorBase<S>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(shape_err(
            node,
            format!("matmul needs [m,k]x[k,n], got {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![S::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for l in 0..k {
            let aval = ad[i * k + l];
            if aval == S::zero() {
                continue;
            }
            let brow = &bd[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aval * brow[j];
            }
        }
    }
    TensorBase::new(vec![m, n], out)
}

pub fn transpose2<S: Scalar>(node: &str, a: &TensorBase<S>) -> Result<TensorBase<S>> {
    if a.rank() != 2 {
        return Err(shape_err(node, format!("transpose needs rank 2, got {:?}", a.shape())));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let ad = a.data();
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    TensorBase::new(vec![n, m], out)
}

// ---------------------------------------------------------------------------
// 1-D convolution, layout (time, channels)
// ---------------------------------------------------------------------------

pub fn conv1d_out_len(t: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    (t + 2 * padding).checked_sub(k).map(|d| d / stride + 1)
}

pub fn conv1d<S: Scalar>(
    node: &str,
    x: &TensorBase<S>,
    w: &TensorBase<S>,
    bias: Option<&TensorBase<S>>,
    stride: usize,
    padding: usize,
) -> Result<TensorBase<S>> {
    if x.rank() != 2 || w.rank() != 3 {
        return Err(shape_err(node, format!("conv1d needs x [T,Cin], w [k,Cin,Cout], got {:?}, {:?}", x.shape(), w.shape())));
    }
    let (t, cin) = (x.shape()[0], x.shape()[1]);
    let (k, wcin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if cin != wcin {
        return Err(shape_err(node, format!("conv1d channel mismatch: x has {cin}, w has {wcin}")));
    }
    let t_out = conv1d_out_len(t, k, stride, padding)
        .ok_or_else(|| shape_err(node, format!("kernel {k} longer than padded input {}", t + 2 * padding)))?;
    let mut out = vec![S::zero(); t_out * cout];
    let xd = x.data();
    let wd = w.data();
    for to in 0..t_out {
        let orow = &mut out[to * cout..(to + 1) * cout];
        for i in 0..k {
            let j = (to * stride + i) as isize - padding as isize;
            if j < 0 || j as usize >= t {
                continue;
            }
            let xrow = &xd[j as usize * cin..(j as usize + 1) * cin];
            for ci in 0..cin {
                let xv = xrow[ci];
                if xv == S::zero() {
                    continue;
                }
                let wrow = &wd[(i * cin + ci) * cout..(i * cin + ci + 1) * cout];
                for co in 0..cout {
                    orow[co] += xv * wrow[co];
                }
            }
        }
        if let Some(b) = bias {
            for co in 0..cout {
                orow[co] += b.data()[co];
            }
        }
    }
    TensorBase::new(vec![t_out, cout], out)
}

/// Returns (dx, dw, db).
pub fn conv1d_backward<S: Scalar>(
    x: &TensorBase<S>,
    w: &TensorBase<S>,
    has_bias: bool,
    stride: usize,
    padding: usize,
    dout: &TensorBase<S>,
) -> (TensorBase<S>, TensorBase<S>, Option<TensorBase<S>>) {
    let (t, cin) = (x.shape()[0], x.shape()[1]);
    let (k, _, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let t_out = dout.shape()[0];
    let mut dx = TensorBase::zeros(x.shape());
    let mut dw = TensorBase::zeros(w.shape());
    let mut db = if has_bias { Some(vec![S::zero(); cout]) } else { None };
    let xd = x.data();
    let wd = w.data();
    let dd = dout.data();
    {
        let dxd = dx.data_mut();
        for to in 0..t_out {
            let drow = &dd[to * cout..(to + 1) * cout];
            for i in 0..k {
                let j = (to * stride + i) as isize - padding as isize;
                if j < 0 || j as usize >= t {
                    continue;
                }
                let j = j as usize;
                for ci in 0..cin {
                    let wrow = &wd[(i * cin + ci) * cout..(i * cin + ci + 1) * cout];
                    let mut acc = S::zero();
                    for co in 0..cout {
                        acc += drow[co] * wrow[co];
                    }
                    dxd[j * cin + ci] += acc;
                }
            }
            if let Some(db) = db.as_mut() {
                for co in 0..cout {
                    db[co] += drow[co];
                }
            }
        }
    }
    {
        let dwd = dw.data_mut();
        for to in 0..t_out {
            let drow = &dd[to * cout..(to + 1) * cout];
            for i in 0..k {
                let j = (to * stride + i) as isize - padding as isize;
                if j < 0 || j as usize >= t {
                    continue;
                }
                let xrow = &xd[j as usize * cin..(j as usize + 1) * cin];
                for ci in 0..cin {
                    let xv = xrow[ci];
                    if xv == S::zero() {
                        continue;
                    }
                    let dwrow = &mut dwd[(i * cin + ci) * cout..(i * cin + ci + 1) * cout];
                    for co in 0..cout {
                        dwrow[co] += xv * drow[co];
                    }
                }
            }
        }
    }
    let db = db.map(|v| TensorBase::new(vec![cout], v).expect("bias grad shape"));
    (dx, dw, db)
}

pub fn conv_transpose1d_out_len(t: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    ((t - 1) * stride + k).checked_sub(2 * padding)
}

pub fn conv_transpose1d<S: Scalar>(
    node: &str,
    x: &TensorBase<S>,
    w: &TensorBase<S>,
    bias: Option<&TensorBase<S>>,
    stride: usize,
    padding: usize,
) -> Result<TensorBase<S>> {
    if x.rank() != 2 || w.rank() != 3 {
        return Err(shape_err(node, format!("conv_transpose1d needs x [T,Cin], w [k,Cin,Cout], got {:?}, {:?}", x.shape(), w.shape())));
    }
    let (t, cin) = (x.shape()[0], x.shape()[1]);
    let (k, wcin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if cin != wcin {
        return Err(shape_err(node, format!("conv_transpose1d channel mismatch: x has {cin}, w has {wcin}")));
    }
    if t == 0 {
        return Err(shape_err(node, "empty time axis".to_string()));
    }
    let t_out = conv_transpose1d_out_len(t, k, stride, padding)
        .ok_or_else(|| shape_err(node, format!("padding {padding} too large for kernel {k}")))?;
    let mut out = vec![S::zero(); t_out * cout];
    let xd = x.data();
    let wd = w.data();
    for ti in 0..t {
        let xrow = &xd[ti * cin..(ti + 1) * cin];
        for i in 0..k {
            let u = (ti * stride + i) as isize - padding as isize;
            if u < 0 || u as usize >= t_out {
                continue;
            }
            let orow_base = u as usize * cout;
            for ci in 0..cin {
                let xv = xrow[ci];
                if xv == S::zero() {
                    continue;
                }
                let wrow = &wd[(i * cin + ci) * cout..(i * cin + ci + 1) * cout];
                for co in 0..cout {
                    out[orow_base + co] += xv * wrow[co];
                }
            }
        }
    }
    if let Some(b) = bias {
        for u in 0..t_out {
            for co in 0..cout {
                out[u * cout + co] += b.data()[co];
            }
        }
    }
    TensorBase::new(vec![t_out, cout], out)
}

pub fn conv_transpose1d_backward<S: Scalar>(
    x: &TensorBase<S>,
    w: &TensorBase<S>,
    has_bias: bool,
    stride: usize,
    padding: usize,
    dout: &TensorBase<S>,
) -> (TensorBase<S>, TensorBase<S>, Option<TensorBase<S>>) {
    let (t, cin) = (x.shape()[0], x.shape()[1]);
    let (k, _, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let t_out = dout.shape()[0];
    let mut dx = TensorBase::zeros(x.shape());
    let mut dw = TensorBase::zeros(w.shape());
    let xd = x.data();
    let wd = w.data();
    let dd = dout.data();
    {
        let dxd = dx.data_mut();
        let dwd = dw.data_mut();
        for ti in 0..t {
            let xrow = &xd[ti * cin..(ti + 1) * cin];
            for i in 0..k {
                let u = (ti * stride + i) as isize - padding as isize;
                if u < 0 || u as usize >= t_out {
                    continue;
                }
                let drow = &dd[u as usize * cout..(u as usize + 1) * cout];
                for ci in 0..cin {
                    let wrow = &wd[(i * cin + ci) * cout..(i * cin + ci + 1) * cout];
                    let dwrow = &mut dwd[(i * cin + ci) * cout..(i * cin + ci + 1) * cout];
                    let xv = xrow[ci];
                    let mut acc = S::zero();
                    for co in 0..cout {
                        acc += drow[co] * wrow[co];
                        dwrow[co] += xv * drow[co];
                    }
                    dxd[ti * cin + ci] += acc;
                }
            }
        }
    }
    let db = if has_bias {
        let mut b = vec![S::zero(); cout];
        for u in 0..t_out {
            for co in 0..cout {
                b[co] += dd[u * cout + co];
            }
        }
        Some(TensorBase::new(vec![cout], b).expect("bias grad shape"))
    } else {
        None
    };
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// unary activations
// ---------------------------------------------------------------------------

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_value<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let u = c * (x + a * x * x * x);
    S::of(0.5) * x * (S::one() + u.tanh())
}

pub fn gelu_derivative<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let sech2 = S::one() - th * th;
    S::of(0.5) * (S::one() + th) + S::of(0.5) * x * sech2 * c * (S::one() + S::of(3.0) * a * x * x)
}

pub fn sigmoid_value<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

// ---------------------------------------------------------------------------
// softmax / layer norm
// ---------------------------------------------------------------------------

/// Split a shape into (outer, lane, inner) around `axis`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

pub fn softmax<S: Scalar>(node: &str, x: &TensorBase<S>, axis: usize) -> Result<TensorBase<S>> {
    if axis >= x.rank() {
        return Err(shape_err(node, format!("softmax axis {axis} out of range for {:?}", x.shape())));
    }
    let (outer, lane, inner) = lanes(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![S::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut maxv = S::neg_infinity();
            for j in 0..lane {
                maxv = maxv.max(xd[base + j * inner]);
            }
            let mut sum = S::zero();
            for j in 0..lane {
                let e = (xd[base + j * inner] - maxv).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..lane {
                out[base + j * inner] = out[base + j * inner] / sum;
            }
        }
    }
    TensorBase::new(x.shape().to_vec(), out)
}

pub fn softmax_backward<S: Scalar>(y: &TensorBase<S>, dy: &TensorBase<S>, axis: usize) -> TensorBase<S> {
    let (outer, lane, inner) = lanes(y.shape(), axis);
    let yd = y.data();
    let dd = dy.data();
    let mut dx = vec![S::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut dot = S::zero();
            for j in 0..lane {
                let off = base + j * inner;
                dot += dd[off] * yd[off];
            }
            for j in 0..lane {
                let off = base + j * inner;
                dx[off] = yd[off] * (dd[off] - dot);
            }
        }
    }
    TensorBase::new(y.shape().to_vec(), dx).expect("softmax backward shape")
}

/// Layer norm over the last axis; returns (y, mean, inv_std) with the
/// statistics kept for the backward pass.
pub fn layer_norm<S: Scalar>(
    node: &str,
    x: &TensorBase<S>,
    gain: &TensorBase<S>,
    bias: &TensorBase<S>,
    eps: S,
) -> Result<(TensorBase<S>, Vec<S>, Vec<S>)> {
    if x.rank() == 0 {
        return Err(shape_err(node, "layer_norm needs rank >= 1".into()));
    }
    let d = *x.shape().last().unwrap();
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(shape_err(
            node,
            format!("gain/bias must be [{d}], got {:?}/{:?}", gain.shape(), bias.shape()),
        ));
    }
    let lanes_n = x.numel() / d;
    let xd = x.data();
    let gd = gain.data();
    let bd = bias.data();
    let mut out = vec![S::zero(); xd.len()];
    let mut means = Vec::with_capacity(lanes_n);
    let mut inv_stds = Vec::with_capacity(lanes_n);
    let dn = S::of(d as f64);
    for l in 0..lanes_n {
        let row = &xd[l * d..(l + 1) * d];
        let mut mu = S::zero();
        for &v in row {
            mu += v;
        }
        mu = mu / dn;
        let mut var = S::zero();
        for &v in row {
            let c = v - mu;
            var += c * c;
        }
        var = var / dn;
        let inv = S::one() / (var + eps).sqrt();
        let orow = &mut out[l * d..(l + 1) * d];
        for i in 0..d {
            orow[i] = (row[i] - mu) * inv * gd[i] + bd[i];
        }
        means.push(mu);
        inv_stds.push(inv);
    }
    Ok((TensorBase::new(x.shape().to_vec(), out)?, means, inv_stds))
}

/// Returns (dx, dgain, dbias).
pub fn layer_norm_backward<S: Scalar>(
    x: &TensorBase<S>,
    gain: &TensorBase<S>,
    means: &[S],
    inv_stds: &[S],
    dy: &TensorBase<S>,
) -> (TensorBase<S>, TensorBase<S>, TensorBase<S>) {
    let d = *x.shape().last().unwrap();
    let lanes_n = x.numel() / d;
    let xd = x.data();
    let gd = gain.data();
    let dd = dy.data();
    let mut dx = vec![S::zero(); xd.len()];
    let mut dg = vec![S::zero(); d];
    let mut db = vec![S::zero(); d];
    let dn = S::of(d as f64);
    for l in 0..lanes_n {
        let mu = means[l];
        let inv = inv_stds[l];
        let row = &xd[l * d..(l + 1) * d];
        let drow = &dd[l * d..(l + 1) * d];
        let mut sum_dxhat = S::zero();
        let mut sum_dxhat_xhat = S::zero();
        for i in 0..d {
            let xhat = (row[i] - mu) * inv;
            let dxhat = drow[i] * gd[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dg[i] += drow[i] * xhat;
            db[i] += drow[i];
        }
        let dxrow = &mut dx[l * d..(l + 1) * d];
        for i in 0..d {
            let xhat = (row[i] - mu) * inv;
            let dxhat = drow[i] * gd[i];
            dxrow[i] = (dxhat - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn) * inv;
        }
    }
    (
        TensorBase::new(x.shape().to_vec(), dx).expect("ln dx shape"),
        TensorBase::new(vec![d], dg).expect("ln dgain shape"),
        TensorBase::new(vec![d], db).expect("ln dbias shape"),
    )
}

// ---------------------------------------------------------------------------
// gather / nearest index
// ---------------------------------------------------------------------------

pub fn gather<S: Scalar>(node: &str, table: &TensorBase<S>, indices: &TensorBase<S>) -> Result<TensorBase<S>> {
    if table.rank() != 2 || indices.rank() != 1 {
        return Err(shape_err(node, format!("gather needs table [K,C], indices [n], got {:?}, {:?}", table.shape(), indices.shape())));
    }
    let (k, c) = (table.shape()[0], table.shape()[1]);
    let n = indices.shape()[0];
    let mut out = Vec::with_capacity(n * c);
    for &iv in indices.data() {
        let f = iv.as_f64();
        if f.fract() != 0.0 || f < 0.0 || f as usize >= k {
            return Err(shape_err(node, format!("index {f} out of range for table with {k} rows")));
        }
        let row = f as usize;
        out.extend_from_slice(&table.data()[row * c..(row + 1) * c]);
    }
    TensorBase::new(vec![n, c], out)
}

pub fn gather_backward<S: Scalar>(
    table_shape: &[usize],
    indices: &TensorBase<S>,
    dout: &TensorBase<S>,
) -> TensorBase<S> {
    let c = table_shape[1];
    let mut dt = TensorBase::zeros(table_shape);
    let dtd = dt.data_mut();
    for (i, &iv) in indices.data().iter().enumerate() {
        let row = iv.as_f64() as usize;
        let src = &dout.data()[i * c..(i + 1) * c];
        let dst = &mut dtd[row * c..(row + 1) * c];
        for j in 0..c {
            dst[j] += src[j];
        }
    }
    dt
}

/// Argmin over squared Euclidean distance to each codebook row.
/// Ties break toward the lowest index.
pub fn nearest_index<S: Scalar>(node: &str, x: &TensorBase<S>, codebook: &TensorBase<S>) -> Result<TensorBase<S>> {
    if x.rank() != 2 || codebook.rank() != 2 || x.shape()[1] != codebook.shape()[1] {
        return Err(shape_err(node, format!("nearest_index needs x [n,C], codebook [K,C], got {:?}, {:?}", x.shape(), codebook.shape())));
    }
    let (k, c) = (codebook.shape()[0], codebook.shape()[1]);
    if k == 0 {
        return Err(CoreError::InvalidArgument("empty codebook".into()));
    }
    let n = x.shape()[0];
    let xd = x.data();
    let cd = codebook.data();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let xrow = &xd[i * c..(i + 1) * c];
        let mut best = 0usize;
        let mut best_d = S::infinity();
        for kk in 0..k {
            let crow = &cd[kk * c..(kk + 1) * c];
            let mut d = S::zero();
            for j in 0..c {
                let diff = xrow[j] - crow[j];
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = kk;
            }
        }
        out.push(S::of(best as f64));
    }
    TensorBase::new(vec![n], out)
}

// ---------------------------------------------------------------------------
// reductions / structure
// ---------------------------------------------------------------------------

pub fn sum_axis<S: Scalar>(node: &str, x: &TensorBase<S>, axis: usize) -> Result<TensorBase<S>> {
    if axis >= x.rank() {
        return Err(shape_err(node, format!("axis {axis} out of range for {:?}", x.shape())));
    }
    let (outer, lane, inner) = lanes(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![S::zero(); outer * inner];
    for o in 0..outer {
        for j in 0..lane {
            let base = (o * lane + j) * inner;
            for i in 0..inner {
                out[o * inner + i] += xd[base + i];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    TensorBase::new(shape, out)
}

pub fn sum_axis_backward<S: Scalar>(x_shape: &[usize], axis: usize, dout: &TensorBase<S>, scale: S) -> TensorBase<S> {
    let (outer, lane, inner) = lanes(x_shape, axis);
    let dd = dout.data();
    let mut dx = vec![S::zero(); outer * lane * inner];
    for o in 0..outer {
        for j in 0..lane {
            let base = (o * lane + j) * inner;
            for i in 0..inner {
                dx[base + i] = dd[o * inner + i] * scale;
            }
        }
    }
    TensorBase::new(x_shape.to_vec(), dx).expect("sum_axis backward shape")
}

pub fn concat<S: Scalar>(node: &str, parts: &[&TensorBase<S>], axis: usize) -> Result<TensorBase<S>> {
    if parts.is_empty() {
        return Err(CoreError::InvalidArgument("concat of zero tensors".into()));
    }
    let rank = parts[0].rank();
    if axis >= rank {
        return Err(shape_err(node, format!("axis {axis} out of range for rank {rank}")));
    }
    for p in parts {
        if p.rank() != rank {
            return Err(shape_err(node, "concat rank mismatch".into()));
        }
        for d in 0..rank {
            if d != axis && p.shape()[d] != parts[0].shape()[d] {
                return Err(shape_err(node, format!("concat shape mismatch on axis {d}: {:?} vs {:?}", p.shape(), parts[0].shape())));
            }
        }
    }
    let mut shape = parts[0].shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let (outer, _, inner) = lanes(&shape, axis);
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    for o in 0..outer {
        for p in parts {
            let lane = p.shape()[axis];
            let base = o * lane * inner;
            out.extend_from_slice(&p.data()[base..base + lane * inner]);
        }
    }
    TensorBase::new(shape, out)
}

pub fn slice<S: Scalar>(node: &str, x: &TensorBase<S>, axis: usize, start: usize, end: usize) -> Result<TensorBase<S>> {
    if axis >= x.rank() || end > x.shape()[axis] || start >= end {
        return Err(shape_err(
            node,
            format!("slice {start}..{end} on axis {axis} invalid for {:?}", x.shape()),
        ));
    }
    let (outer, lane, inner) = lanes(x.shape(), axis);
    let xd = x.data();
    let mut shape = x.shape().to_vec();
    shape[axis] = end - start;
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = (o * lane + start) * inner;
        out.extend_from_slice(&xd[base..base + (end - start) * inner]);
    }
    TensorBase::new(shape, out)
}

pub fn slice_backward<S: Scalar>(
    x_shape: &[usize],
    axis: usize,
    start: usize,
    dout: &TensorBase<S>,
) -> TensorBase<S> {
    let (outer, lane, inner) = lanes(x_shape, axis);
    let width = dout.shape()[axis];
    let dd = dout.data();
    let mut dx = TensorBase::zeros(x_shape);
    let dxd = dx.data_mut();
    for o in 0..outer {
        let src = o * width * inner;
        let dst = (o * lane + start) * inner;
        dxd[dst..dst + width * inner].copy_from_slice(&dd[src..src + width * inner]);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = TensorBase<f64>;

    #[test]
    fn broadcast_add_suffix() {
        let a = T::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = T::vector(&[10., 20., 30.]);
        let y = binary("n", &a, &b, |x, y| x + y).unwrap();
        assert_eq!(y.data(), &[11., 22., 33., 14., 25., 36.]);
        let g = reduce_to_shape(&y, &[3]);
        assert_eq!(g.data(), &[25., 47., 69.]);
    }

    #[test]
    fn matmul_small() {
        let a = T::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap();
        let b = T::matrix(2, 2, vec![5., 6., 7., 8.]).unwrap();
        let y = matmul("n", &a, &b).unwrap();
        assert_eq!(y.data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn conv1d_identity_kernel() {
        let x = T::matrix(3, 1, vec![1., 0., 0.]).unwrap();
        let w = T::new(vec![1, 1, 1], vec![1.]).unwrap();
        let y = conv1d("n", &x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[3, 1]);
        assert_eq!(y.data(), &[1., 0., 0.]);
    }

    #[test]
    fn conv_transpose_length() {
        // k=4, s=2, p=1 doubles the time axis
        let x = T::zeros(&[5, 2]);
        let w = T::zeros(&[4, 2, 3]);
        let y = conv_transpose1d("n", &x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[10, 3]);
    }

    #[test]
    fn softmax_symmetry() {
        let x = T::vector(&[0.0, 0.0]);
        let y = softmax("n", &x, 0).unwrap();
        assertueq(y.data(), &[0.5, 0.5]);
    }

    fn assertueq(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn nearest_breaks_ties_low() {
        let cb = T::matrix(3, 1, vec![0.0, 1.0, 1.0]).unwrap();
        let x = T::matrix(1, 1, vec![1.0]).unwrap();
        let idx = nearest_index("n", &x, &cb).unwrap();
        assert_eq!(idx.data(), &[1.0]);
    }

    #[test]
    fn slice_concat_roundtrip() {
        let x = T::matrix(2, 4, vec![0., 1., 2., 3., 4., 5., 6., 7.]).unwrap();
        let a = slice("n", &x, 1, 0, 2).unwrap();
        let b = slice("n", &x, 1, 2, 4).unwrap();
        let y = concat("n", &[&a, &b], 1).unwrap();
        assert_eq!(y.data(), x.data());
    }
}
