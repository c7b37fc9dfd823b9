//! Layer builders on top of the graph: linear, conv stacks, attention.
//!
//! Builders create parameters in the store on first use (names are
//! `prefix.w`, `prefix.b`, ...) and only add nodes afterwards, so the same
//! prefix can be wired into several graphs sharing one store.

use rand_chacha::ChaCha12Rng;

use crate::graph::{GraphBase, NodeId, ParamStoreBase};
use crate::rng::normal_tensor;
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// y = x W + b with x [T, c_in], W [c_in, c_out].
pub fn linear<S: Scalar>(
    g: &mut GraphBase<S>,
    params: &mut ParamStoreBase<S>,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    x: NodeId,
    c_in: usize,
    c_out: usize,
) -> NodeId {
    let wname = format!("{prefix}.w");
    let bname = format!("{prefix}.b");
    let std = (2.0 / (c_in + c_out) as f64).sqrt();
    params.init(&wname, || normal_tensor(rng, &[c_in, c_out], std));
    params.init(&bname, || TensorBase::zeros(&[c_out]));
    let w = g.param(&wname);
    let b = g.param(&bname);
    let xw = g.matmul(x, w);
    g.add(xw, b)
}

/// y = x W without a bias term.
pub fn linear_no_bias<S: Scalar>(
    g: &mut GraphBase<S>,
    params: &mut ParamStoreBase<S>,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    x: NodeId,
    c_in: usize,
    c_out: usize,
) -> NodeId {
    let wname = format!("{prefix}.w");
    let std = (2.0 / (c_in + c_out) as f64).sqrt();
    params.init(&wname, || normal_tensor(rng, &[c_in, c_out], std));
    let w = g.param(&wname);
    g.matmul(x, w)
}

/// Strided 1-D convolution layer over layout (time, channels).
pub fn conv1d<S: Scalar>(
    g: &mut GraphBase<S>,
    params: &mut ParamStoreBase<S>,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    x: NodeId,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> NodeId {
    let wname = format!("{prefix}.w");
    let bname = format!("{prefix}.b");
    let std = (2.0 / (kernel * c_in) as f64).sqrt();
    params.init(&wname, || normal_tensor(rng, &[kernel, c_in, c_out], std));
    params.init(&bname, || TensorBase::zeros(&[c_out]));
    let w = g.param(&wname);
    let b = g.param(&bname);
    g.conv1d(x, w, Some(b), stride, padding)
}

/// Strided 1-D transposed convolution layer.
pub fn conv_transpose1d<S: Scalar>(
    g: &mut GraphBase<S>,
    params: &mut ParamStoreBase<S>,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    x: NodeId,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> NodeId {
    let wname = format!("{prefix}.w");
    let bname = format!("{prefix}.b");
    let std = (2.0 / (kernel * c_in) as f64).sqrt();
    params.init(&wname, || normal_tensor(rng, &[kernel, c_in, c_out], std));
    params.init(&bname, || TensorBase::zeros(&[c_out]));
    let w = g.param(&wname);
    let b = g.param(&bname);
    g.conv_transpose1d(x, w, Some(b), stride, padding)
}

/// Layer norm over the last axis with learned gain/bias of width `dim`.
pub fn layer_norm<S: Scalar>(
    g: &mut GraphBase<S>,
    params: &mut ParamStoreBase<S>,
    prefix: &str,
    x: NodeId,
    dim: usize,
) -> NodeId {
    let gname = format!("{prefix}.g");
    let bname = format!("{prefix}.b");
    params.init(&gname, || TensorBase::full(&[dim], S::one()));
    params.init(&bname, || TensorBase::zeros(&[dim]));
    let gain = g.param(&gname);
    let bias = g.param(&bname);
    g.layer_norm(x, gain, bias, S::of(LAYER_NORM_EPS))
}

/// Self-attention block over x [T, d_model], split into `heads` heads.
pub fn multi_head_attention<S: Scalar>(
    g: &mut GraphBase<S>,
    params: &mut ParamStoreBase<S>,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    x: NodeId,
    d_model: usize,
    heads: usize,
) -> NodeId {
    assert!(d_model % heads == 0, "d_model {d_model} not divisible by {heads} heads");
    let dh = d_model / heads;
    // q/k/v projections carry no bias: a key bias shifts every score in a
    // softmax row by the same amount, a direction the loss cannot see
    let q = linear_no_bias(g, params, rng, &format!("{prefix}.q"), x, d_model, d_model);
    let k = linear_no_bias(g, params, rng, &format!("{prefix}.k"), x, d_model, d_model);
    let v = linear_no_bias(g, params, rng, &format!("{prefix}.v"), x, d_model, d_model);
    let inv_sqrt = S::of(1.0 / (dh as f64).sqrt());
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice(q, 1, lo, hi);
        let kh = g.slice(k, 1, lo, hi);
        let vh = g.slice(v, 1, lo, hi);
        let kt = g.transpose2(kh);
        let scores = g.matmul(qh, kt);
        let scaled = g.scale(scores, inv_sqrt);
        let attn = g.softmax(scaled, 1);
        head_outs.push(g.matmul(attn, vh));
    }
    let merged = g.concat(head_outs, 1);
    linear(g, params, rng, &format!("{prefix}.o"), merged, d_model, d_model)
}

/// Pre-norm transformer block: x + MHA(LN(x)), then + FFN(LN(.)).
pub fn transformer_block<S: Scalar>(
    g: &mut GraphBase<S>,
    params: &mut ParamStoreBase<S>,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    x: NodeId,
    d_model: usize,
    heads: usize,
    ffn_mult: usize,
) -> NodeId {
    let n1 = layer_norm(g, params, &format!("{prefix}.ln1"), x, d_model);
    let attn = multi_head_attention(g, params, rng, &format!("{prefix}.attn"), n1, d_model, heads);
    let mid = g.add(x, attn);
    let n2 = layer_norm(g, params, &format!("{prefix}.ln2"), mid, d_model);
    let h1 = linear(g, params, rng, &format!("{prefix}.ffn1"), n2, d_model, d_model * ffn_mult);
    let act = g.gelu(h1);
    let h2 = linear(g, params, rng, &format!("{prefix}.ffn2"), act, d_model * ffn_mult, d_model);
    g.add(mid, h2)
}

/// Standard sinusoidal positional encoding table [t_len, dim].
pub fn sinusoidal_encoding<S: Scalar>(t_len: usize, dim: usize) -> TensorBase<S> {
    let mut data = Vec::with_capacity(t_len * dim);
    for pos in 0..t_len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let angle = pos as f64 * freq;
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(S::of(v));
        }
    }
    TensorBase::new(vec![t_len, dim], data).expect("encoding shape")
}

/// Sinusoidal embedding of a diffusion timestep, tiled to [t_len, dim].
pub fn timestep_embedding<S: Scalar>(t: usize, t_len: usize, dim: usize) -> TensorBase<S> {
    let row = sinusoidal_encoding::<S>(t + 1, dim);
    let row = &row.data()[t * dim..(t + 1) * dim];
    let mut data = Vec::with_capacity(t_len * dim);
    for _ in 0..t_len {
        data.extend_from_slice(row);
    }
    TensorBase::new(vec![t_len, dim], data).expect("embedding shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Feeds;
    use crate::rng::substream;

    #[test]
    fn attention_output_shape_matches_input() {
        let mut g = GraphBase::<f64>::new();
        let mut params = ParamStoreBase::new();
        let mut rng = substream(0, "test");
        let x = g.input("x");
        let y = multi_head_attention(&mut g, &mut params, &mut rng, "mha", x, 8, 2);
        let mut feeds = Feeds::new();
        feeds.insert("x".into(), normal_tensor(&mut rng, &[5, 8], 1.0));
        let out = g.evaluate(&params, &feeds, &[y]).unwrap();
        assert_eq!(out[0].shape(), &[5, 8]);
    }

    #[test]
    fn builders_reuse_params_across_graphs() {
        let mut params = ParamStoreBase::new();
        let mut rng = substream(1, "init");
        let mut g1 = GraphBase::<f64>::new();
        let x1 = g1.input("x");
        linear(&mut g1, &mut params, &mut rng, "lin", x1, 3, 2);
        let before = params.get("lin.w").unwrap().clone();
        let mut g2 = GraphBase::<f64>::new();
        let x2 = g2.input("x");
        linear(&mut g2, &mut params, &mut rng, "lin", x2, 3, 2);
        assert_eq!(params.get("lin.w").unwrap(), &before);
        assert_eq!(params.len(), 2);
    }

    #[test]
    fn positional_encoding_first_row_alternates() {
        let pe = sinusoidal_encoding::<f64>(3, 4);
        // position 0: sin(0)=0, cos(0)=1
        assert_eq!(&pe.data()[0..4], &[0.0, 1.0, 0.0, 1.0]);
    }
}
