//! Finite-difference verification of every differentiable op.
//!
//! The oracle is central differences over `evaluate` only, so it stays
//! independent of the reverse sweep it checks. Shared by the test suites
//! and the selftest command.

use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::graph::{Feeds, GraphBase, NodeId, ParamStoreBase, Wrt};
use crate::nn;
use crate::rng::{normal_tensor, substream};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Ops covered by the finite-difference sweep.
pub const OP_NAMES: &[&str] = &[
    "add",
    "subtract",
    "multiply",
    "divide",
    "matmul",
    "conv1d",
    "conv1d_strided",
    "conv_transpose1d",
    "relu",
    "gelu",
    "sigmoid",
    "softmax",
    "layer_norm",
    "embedding_gather",
    "sum",
    "mean",
    "sum_axis",
    "mean_axis",
    "square",
    "sqrt",
    "log",
    "exp",
    "abs",
    "pow",
    "clamp",
    "concat",
    "slice",
    "attention",
];

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

enum Domain {
    /// Samples shifted away from zero (kinked ops).
    AwayFromZero,
    /// Strictly positive samples (sqrt/log/pow).
    Positive,
    Any,
}

fn sample_param<S: Scalar>(rng: &mut ChaCha12Rng, shape: &[usize], domain: &Domain) -> TensorBase<S> {
    let t: TensorBase<S> = normal_tensor(rng, shape, 1.0);
    match domain {
        Domain::Any => t,
        Domain::AwayFromZero => t.map(|v| {
            if v.abs() < S::of(0.1) {
                v + S::of(0.25) * v.signum() + S::of(0.25)
            } else {
                v
            }
        }),
        Domain::Positive => t.map(|v| v.abs() + S::of(0.5)),
    }
}

struct Case<S: Scalar> {
    graph: GraphBase<S>,
    loss: NodeId,
    /// (param name, shape, sampling domain)
    leaves: Vec<(String, Vec<usize>, Domain)>,
}

/// Attach a random linear readout so the loss exercises every output element.
fn readout<S: Scalar>(g: &mut GraphBase<S>, rng: &mut ChaCha12Rng, out: NodeId, out_numel_hint: &[usize]) -> NodeId {
    let w: TensorBase<S> = normal_tensor(rng, out_numel_hint, 1.0);
    let wc = g.constant(w);
    let prod = g.mul(out, wc);
    g.sum_all(prod)
}

fn build_case<S: Scalar>(op: &str, rng: &mut ChaCha12Rng) -> Case<S> {
    let mut g = GraphBase::<S>::new();
    let mut leaves = Vec::new();
    let leaf = |g: &mut GraphBase<S>, leaves: &mut Vec<(String, Vec<usize>, Domain)>, name: &str, shape: &[usize], d: Domain| {
        leaves.push((name.to_string(), shape.to_vec(), d));
        g.param(name)
    };
    let (out, out_shape): (NodeId, Vec<usize>) = match op {
        "add" => {
            let a = leaf(&mut g, &mut leaves, "a", &[4, 3], Domain::Any);
            let b = leaf(&mut g, &mut leaves, "b", &[3], Domain::Any);
            (g.add(a, b), vec![4, 3])
        }
        "subtract" => {
            let a = leaf(&mut g, &mut leaves, "a", &[4, 3], Domain::Any);
            let b = leaf(&mut g, &mut leaves, "b", &[4, 3], Domain::Any);
            (g.sub(a, b), vec![4, 3])
        }
        "multiply" => {
            let a = leaf(&mut g, &mut leaves, "a", &[4, 3], Domain::Any);
            let b = leaf(&mut g, &mut leaves, "b", &[4, 1], Domain::Any);
            (g.mul(a, b), vec![4, 3])
        }
        "divide" => {
            let a = leaf(&mut g, &mut leaves, "a", &[4, 3], Domain::Any);
            let b = leaf(&mut g, &mut leaves, "b", &[4, 3], Domain::Positive);
            (g.div(a, b), vec![4, 3])
        }
        "matmul" => {
            let a = leaf(&mut g, &mut leaves, "a", &[3, 4], Domain::Any);
            let b = leaf(&mut g, &mut leaves, "b", &[4, 2], Domain::Any);
            (g.matmul(a, b), vec![3, 2])
        }
        "conv1d" => {
            let x = leaf(&mut g, &mut leaves, "x", &[7, 2], Domain::Any);
            let w = leaf(&mut g, &mut leaves, "w", &[3, 2, 4], Domain::Any);
            let b = leaf(&mut g, &mut leaves, "b", &[4], Domain::Any);
            (g.conv1d(x, w, Some(b), 1, 0), vec![5, 4])
        }
        "conv1d_strided" => {
            let x = leaf(&mut g, &mut leaves, "x", &[8, 3], Domain::Any);
            let w = leaf(&mut g, &mut leaves, "w", &[4, 3, 2], Domain::Any);
            let b = leaf(&mut g, &mut leaves, "b", &[2], Domain::Any);
            (g.conv1d(x, w, Some(b), 2, 1), vec![4, 2])
        }
        "conv_transpose1d" => {
            let x = leaf(&mut g, &mut leaves, "x", &[4, 3], Domain::Any);
            let w = leaf(&mut g, &mut leaves, "w", &[4, 3, 2], Domain::Any);
            let b = leaf(&mut g, &mut leaves, "b", &[2], Domain::Any);
            (g.conv_transpose1d(x, w, Some(b), 2, 1), vec![8, 2])
        }
        "relu" => {
            let x = leaf(&mut g, &mut leaves, "x", &[4, 5], Domain::AwayFromZero);
            (g.relu(x), vec![4, 5])
        }
        "gelu" => {
            let x = leaf(&mut g, &mut leaves, "x", &[4, 5], Domain::Any);
            (g.gelu(x), vec![4, 5])
        }
        "sigmoid" => {
            let x = leaf(&mut g, &mut leaves, "x", &[4, 5], Domain::Any);
            (g.sigmoid(x), vec![4, 5])
        }
        "softmax" => {
            let x = leaf(&mut g, &mut leaves, "x", &[4, 5], Domain::Any);
            (g.softmax(x, 1), vec![4, 5])
        }
        "layer_norm" => {
            let x = leaf(&mut g, &mut leaves, "x", &[4, 6], Domain::Any);
            let gain = leaf(&mut g, &mut leaves, "gain", &[6], Domain::Any);
            let bias = leaf(&mut g, &mut leaves, "bias", &[6], Domain::Any);
            (g.layer_norm(x, gain, bias, S::of(nn::LAYER_NORM_EPS)), vec![4, 6])
        }
        "embedding_gather" => {
            let table = leaf(&mut g, &mut leaves, "table", &[6, 3], Domain::Any);
            let idx = g.constant(TensorBase::vector(&[
                S::of(0.0),
                S::of(5.0),
                S::of(2.0),
                S::of(2.0),
            ]));
            (g.gather(table, idx), vec![4, 3])
        }
        "sum" => {
            let x = leaf(&mut g, &mut leaves, "x", &[4, 3], Domain::Any);
            (g.sum_all(x), vec![])
        }
        "mean" => {
            let x = leaf(&mut g, &mut leaves, "x", &[4, 3], Domain::Any);
            (g.mean_all(x), vec![])
        }
        "sum_axis" => {
            let x = leaf(&mut g, &mut leaves, "x", &[4, 3, 2], Domain::Any);
            (g.sum_axis(x, 1), vec![4, 2])
        }
        "mean_axis" => {
            let x = leaf(&mut g, &mut leaves, "x", &[4, 3, 2], Domain::Any);
            (g.mean_axis(x, 0), vec![3, 2])
        }
        "square" => {
            let x = leaf(&mut g, &mut leaves, "x", &[4, 5], Domain::Any);
            (g.square(x), vec![4, 5])
        }
        "sqrt" => {
            let x = leaf(&mut g, &mut leaves, "x", &[4, 5], Domain::Positive);
            (g.sqrt(x), vec![4, 5])
        }
        "log" => {
            let x = leaf(&mut g, &mut leaves, "x", &[4, 5], Domain::Positive);
            (g.log(x), vec![4, 5])
        }
        "exp" => {
            let x = leaf(&mut g, &mut leaves, "x", &[4, 5], Domain::Any);
            (g.exp(x), vec![4, 5])
        }
        "abs" => {
            let x = leaf(&mut g, &mut leaves, "x", &[4, 5], Domain::AwayFromZero);
            (g.abs(x), vec![4, 5])
        }
        "pow" => {
            let x = leaf(&mut g, &mut leaves, "x", &[4, 5], Domain::Positive);
            (g.pow_scalar(x, S::of(2.0)), vec![4, 5])
        }
        "clamp" => {
            // sampled away from zero keeps values off the clamp boundaries
            let x = leaf(&mut g, &mut leaves, "x", &[4, 5], Domain::AwayFromZero);
            (g.clamp(x, S::of(-3.0), S::of(3.0)), vec![4, 5])
        }
        "concat" => {
            let a = leaf(&mut g, &mut leaves, "a", &[4, 2], Domain::Any);
            let b = leaf(&mut g, &mut leaves, "b", &[4, 3], Domain::Any);
            let c = leaf(&mut g, &mut leaves, "c", &[4, 1], Domain::Any);
            (g.concat(vec![a, b, c], 1), vec![4, 6])
        }
        "slice" => {
            let x = leaf(&mut g, &mut leaves, "x", &[5, 6], Domain::Any);
            (g.slice(x, 1, 2, 5), vec![5, 3])
        }
        "attention" => {
            let x = leaf(&mut g, &mut leaves, "x", &[5, 8], Domain::Any);
            let mut params = ParamStoreBase::<S>::new();
            let out = nn::multi_head_attention(&mut g, &mut params, rng, "mha", x, 8, 2);
            for name in params.names() {
                let shape = params.get(&name).unwrap().shape().to_vec();
                leaves.push((name, shape, Domain::Any));
            }
            (out, vec![5, 8])
        }
        other => panic!("unknown gradcheck op '{other}'"),
    };
    let loss = readout(&mut g, rng, out, &out_shape);
    Case { graph: g, loss, leaves }
}

/// Max relative error for one op over `points` random parameter draws.
pub fn check_op<S: Scalar>(op: &str, seed: u64, points: usize, h: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for point in 0..points {
        let mut rng = substream(seed, &format!("gradcheck.{op}.{point}"));
        let case = build_case::<S>(op, &mut rng);
        let mut params = ParamStoreBase::new();
        let mut wrt = Vec::new();
        for (name, shape, domain) in &case.leaves {
            params.set(name, sample_param(&mut rng, shape, domain));
            wrt.push(Wrt::Param(name.clone()));
        }
        let feeds = Feeds::new();
        let report = case
            .graph
            .finite_diff_check(&mut params, &feeds, case.loss, &wrt, h)?;
        for err in report.values() {
            worst = worst.max(*err);
        }
    }
    Ok(worst)
}

/// Run the whole sweep. `fault` artificially corrupts the named op's
/// result so harnesses can verify that failures are reported by op name.
pub fn check_all<S: Scalar>(seed: u64, points: usize, fault: Option<&str>) -> Result<Vec<OpCheck>> {
    let mut out = Vec::with_capacity(OP_NAMES.len());
    for &op in OP_NAMES {
        let mut err = check_op::<S>(op, seed, points, DEFAULT_STEP)?;
        if fault == Some(op) {
            err += 1.0;
        }
        out.push(OpCheck {
            op: op.to_string(),
            max_rel_err: err,
            tolerance: DEFAULT_TOLERANCE,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for check in check_all::<f64>(11, 3, None).unwrap() {
            assert!(
                check.passed(),
                "{} rel err {} > {}",
                check.op,
                check.max_rel_err,
                check.tolerance
            );
        }
    }

    #[test]
    fn fault_injection_is_reported_for_the_named_op() {
        let checks = check_all::<f64>(11, 1, Some("gelu")).unwrap();
        let failed: Vec<&OpCheck> = checks.iter().filter(|c| !c.passed()).collect();
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].op, "gelu");
    }
}
