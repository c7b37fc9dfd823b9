//! Loss builders shared by the VQ stages: smooth reconstruction (value +
//! first/second temporal differences, all L1) and focal loss for the
//! sparse contact targets. Each has a plain-function twin used as an
//! independent recomputation path.

use duet_core::{Graph, NodeId, Tensor};

use crate::error::{ModelError, Result};

/// L1 of values plus L1 of first and second forward time differences.
/// Sequences shorter than 3 frames drop the terms they cannot form.
pub fn wire_reconstruction_loss(g: &mut Graph, pred: NodeId, target: NodeId, t_len: usize) -> NodeId {
    assert!(t_len >= 1, "reconstruction loss needs at least one frame");
    let diff = g.sub(pred, target);
    let abs = g.abs(diff);
    let mut loss = g.mean_all(abs);
    if t_len >= 2 {
        let vp = wire_time_diff(g, pred, t_len);
        let vt = wire_time_diff(g, target, t_len);
        let dv = g.sub(vp, vt);
        let absv = g.abs(dv);
        let lv = g.mean_all(absv);
        loss = g.add(loss, lv);
        if t_len >= 3 {
            let ap = wire_time_diff(g, vp, t_len - 1);
            let at = wire_time_diff(g, vt, t_len - 1);
            let da = g.sub(ap, at);
            let absa = g.abs(da);
            let la = g.mean_all(absa);
            loss = g.add(loss, la);
        }
    }
    loss
}

/// Forward difference along the time axis: x[1..] - x[..-1].
pub fn wire_time_diff(g: &mut Graph, x: NodeId, t_len: usize) -> NodeId {
    let head = g.slice(x, 0, 1, t_len);
    let tail = g.slice(x, 0, 0, t_len - 1);
    g.sub(head, tail)
}

/// Plain-function form of the reconstruction loss.
pub fn reconstruction_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(ModelError::Invalid(format!(
            "shape mismatch {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.rank() < 1 || pred.shape()[0] == 0 {
        return Err(ModelError::Invalid("reconstruction loss needs at least one frame".into()));
    }
    let t = pred.shape()[0];
    let width = pred.numel() / t;
    let mean_abs = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    };
    let time_diff = |v: &[f64], frames: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity((frames - 1) * width);
        for i in 0..(frames - 1) * width {
            out.push(v[i + width] - v[i]);
        }
        out
    };
    let mut loss = mean_abs(pred.data(), target.data());
    if t >= 2 {
        let vp = time_diff(pred.data(), t);
        let vt = time_diff(target.data(), t);
        loss += mean_abs(&vp, &vt);
        if t >= 3 {
            let ap = time_diff(&vp, t - 1);
            let at = time_diff(&vt, t - 1);
            loss += mean_abs(&ap, &at);
        }
    }
    Ok(loss)
}

/// Focal loss over logits vs binary targets, mean over all entries.
/// Probabilities are clamped to [1e-7, 1 - 1e-7] before the log.
pub fn wire_focal_loss(g: &mut Graph, logits: NodeId, targets: NodeId, alpha: f64, gamma: f64) -> NodeId {
    let p = g.sigmoid(logits);
    let neg_t = g.scale(targets, -1.0);
    let one_minus_t = g.add_scalar(neg_t, 1.0);
    let neg_p = g.scale(p, -1.0);
    let one_minus_p = g.add_scalar(neg_p, 1.0);
    let pt_pos = g.mul(targets, p);
    let pt_neg = g.mul(one_minus_t, one_minus_p);
    let p_t = g.add(pt_pos, pt_neg);
    let p_t = g.clamp(p_t, 1e-7, 1.0 - 1e-7);
    let at_pos = g.scale(targets, alpha);
    let at_neg = g.scale(one_minus_t, 1.0 - alpha);
    let alpha_t = g.add(at_pos, at_neg);
    let neg_pt = g.scale(p_t, -1.0);
    let one_minus_pt = g.add_scalar(neg_pt, 1.0);
    let weight = g.pow_scalar(one_minus_pt, gamma);
    let logp = g.log(p_t);
    let aw = g.mul(alpha_t, weight);
    let awl = g.mul(aw, logp);
    let neg = g.scale(awl, -1.0);
    g.mean_all(neg)
}

/// Plain-function focal loss.
pub fn focal_loss(logits: &Tensor, targets: &Tensor, alpha: f64, gamma: f64) -> Result<f64> {
    if logits.shape() != targets.shape() {
        return Err(ModelError::Invalid(format!(
            "shape mismatch {:?} vs {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    if !(0.0 < alpha && alpha <= 1.0) || gamma < 0.0 {
        return Err(ModelError::Invalid(format!("invalid focal parameters alpha={alpha}, gamma={gamma}")));
    }
    let mut acc = 0.0;
    for (&z, &t) in logits.data().iter().zip(targets.data()) {
        let p = if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { let e = z.exp(); e / (1.0 + e) };
        let p_t = (t * p + (1.0 - t) * (1.0 - p)).clamp(1e-7, 1.0 - 1e-7);
        let alpha_t = t * alpha + (1.0 - t) * (1.0 - alpha);
        acc += -alpha_t * (1.0 - p_t).powf(gamma) * p_t.ln();
    }
    Ok(acc / logits.numel() as f64)
}

/// Binary cross-entropy used as the gamma = 0 oracle.
pub fn binary_cross_entropy(logits: &Tensor, targets: &Tensor) -> f64 {
    let mut acc = 0.0;
    for (&z, &t) in logits.data().iter().zip(targets.data()) {
        let p = if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { let e = z.exp(); e / (1.0 + e) };
        let p_t = (t * p + (1.0 - t) * (1.0 - p)).clamp(1e-7, 1.0 - 1e-7);
        acc += -p_t.ln();
    }
    acc / logits.numel() as f64
}
