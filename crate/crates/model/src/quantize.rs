//! Codebook quantization: nearest-entry lookup with a straight-through
//! gradient path when wired into a graph.

use duet_core::{Graph, NodeId, Tensor};

use crate::error::{ModelError, Result};

/// Quantization of one latent sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    /// Encoder output before quantization, [T', C].
    pub pre_quant: Tensor,
    /// Selected codebook rows per timestep.
    pub indices: Vec<usize>,
    /// Codebook entries at those rows, [T', C].
    pub quantized: Tensor,
}

/// Nearest codebook entry per row of `z` (squared Euclidean distance,
/// ties to the lowest index).
pub fn quantize(z: &Tensor, codebook: &Tensor) -> Result<LatentCode> {
    if codebook.rank() != 2 || codebook.shape()[0] == 0 {
        return Err(ModelError::EmptyCodebook);
    }
    if z.rank() != 2 || z.shape()[1] != codebook.shape()[1] {
        return Err(ModelError::Invalid(format!(
            "latent {:?} does not match codebook {:?}",
            z.shape(),
            codebook.shape()
        )));
    }
    let (k, c) = (codebook.shape()[0], codebook.shape()[1]);
    let n = z.shape()[0];
    let zd = z.data();
    let cd = codebook.data();
    let mut indices = Vec::with_capacity(n);
    let mut quantized = Vec::with_capacity(n * c);
    for i in 0..n {
        let row = &zd[i * c..(i + 1) * c];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for kk in 0..k {
            let entry = &cd[kk * c..(kk + 1) * c];
            let mut d = 0.0;
            for j in 0..c {
                let diff = row[j] - entry[j];
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = kk;
            }
        }
        indices.push(best);
        quantized.extend_from_slice(&cd[best * c..(best + 1) * c]);
    }
    Ok(LatentCode {
        pre_quant: z.clone(),
        indices,
        quantized: Tensor::new(vec![n, c], quantized)?,
    })
}

/// Graph nodes produced by a wired quantizer.
pub struct QuantNodes {
    pub indices: NodeId,
    /// Gathered codebook rows (gradient reaches the codebook).
    pub z_q: NodeId,
    /// Straight-through output: forward is z_q, backward is the identity
    /// into the encoder output.
    pub z_st: NodeId,
}

/// Wire nearest-neighbor quantization of `z_e` against the codebook param.
pub fn wire_quantizer(g: &mut Graph, z_e: NodeId, codebook: NodeId) -> QuantNodes {
    let indices = g.nearest_index(z_e, codebook);
    let z_q = g.gather(codebook, indices);
    let residual = g.sub(z_q, z_e);
    let blocked = g.stop_gradient(residual);
    let z_st = g.add(z_e, blocked);
    QuantNodes { indices, z_q, z_st }
}

/// Embedding + commitment loss terms:
/// mean((sg(z_e) - z_q)^2) and mean((z_e - sg(z_q))^2).
pub fn wire_vq_terms(g: &mut Graph, z_e: NodeId, z_q: NodeId) -> (NodeId, NodeId) {
    let sg_ze = g.stop_gradient(z_e);
    let d_embed = g.sub(sg_ze, z_q);
    let sq_embed = g.square(d_embed);
    let embed = g.mean_all(sq_embed);
    let sg_zq = g.stop_gradient(z_q);
    let d_commit = g.sub(z_e, sg_zq);
    let sq_commit = g.square(d_commit);
    let commit = g.mean_all(sq_commit);
    (embed, commit)
}

/// Count how many codebook rows appear in `indices`, as a fraction of `k`.
pub fn utilization(indices: &[usize], k: usize) -> f64 {
    let mut used = vec![false; k];
    for &i in indices {
        used[i] = true;
    }
    used.iter().filter(|&&u| u).count() as f64 / k.max(1) as f64
}
