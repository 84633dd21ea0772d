//! Finite-difference gradient validation.
//!
//! Every check rebuilds its loss from current parameter values, runs one
//! analytic backward pass, then perturbs each coordinate by `+-h` (64-bit,
//! central differences) and compares. The checks cover every differentiable
//! op and a full TwistBlock, including the gate, twist kernels, per-channel
//! scales, AIS weights, and the projection.

use crate::arch::ParamKind;
use crate::error::Result;
use crate::ops::{self, BatchNorm2d, Conv2d, GroupNorm, Linear};
use crate::stci::{ais_forward, MhStci, StciConfig, StciHead};
use crate::tensor::rng::{ParamInit, Rng};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Step size of the central differences.
pub const FD_STEP: f64 = 1e-4;
/// Maximum relative error tolerated per check.
pub const FD_TOL: f64 = 1e-4;

/// Which checks to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    /// Individual tensor ops.
    Ops,
    /// Interaction head, AIS, and the multi-head module.
    Stci,
    /// A full TwistBlock including the gate.
    Block,
    All,
}

impl Scope {
    pub fn parse(name: &str) -> Option<Scope> {
        match name {
            "ops" => Some(Scope::Ops),
            "stci" => Some(Scope::Stci),
            "block" => Some(Scope::Block),
            "all" => Some(Scope::All),
            _ => None,
        }
    }
}

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Relative error with a small floor so near-zero gradient pairs compare
/// sanely.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Checks `d loss / d checked[i]` against central differences.
///
/// `loss` must rebuild the computation from current tensor values on the
/// given tape; checked tensors are mutated in place during probing and
/// restored afterwards.
pub fn finite_diff_check(
    name: &str,
    checked: &[(&str, &Tensor<f64>)],
    loss: impl Fn(&Tape<f64>) -> Result<Tensor<f64>>,
) -> Result<CheckOutcome> {
    for (_, t) in checked {
        t.zero_grad();
    }
    let tape = Tape::new();
    let loss_tensor = loss(&tape)?;
    tape.backward(&loss_tensor)?;
    let analytic: Vec<Vec<f64>> = checked
        .iter()
        .map(|(label, t)| {
            t.grad()
                .unwrap_or_else(|| panic!("{name}: no gradient reached '{label}'"))
        })
        .collect();
    for (_, t) in checked {
        t.zero_grad();
    }

    let mut max_err = 0.0f64;
    for ((_, tensor), grads) in checked.iter().zip(&analytic) {
        for i in 0..tensor.len() {
            let original = tensor.data()[i];
            tensor.data_mut()[i] = original + FD_STEP;
            let plus = loss(&Tape::new())?.data()[0];
            tensor.data_mut()[i] = original - FD_STEP;
            let minus = loss(&Tape::new())?.data()[0];
            tensor.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = rel_err(grads[i], numeric);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(CheckOutcome {
        name: name.to_string(),
        max_rel_err: max_err,
        pass: max_err < FD_TOL,
    })
}

/// Fixed random projection so the loss exercises every output coordinate.
fn projection(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape, 0.0, 1.0)
}

/// Re-draws a soft-start projection weight at a generic scale.
///
/// The production init (std 0.01) feeds a train-mode batch norm whose
/// per-channel sigma then sits near 1e-3; central differences at `h = 1e-4`
/// leave the linear regime there (truncation error grows as `(h/sigma)^2`),
/// which would flag correct backward rules. Gradients are checked at
/// well-conditioned parameter values instead.
fn redraw_projection(weight: &Tensor<f64>, rng: &mut Rng) {
    let fresh: Tensor<f64> = rng.normal_tensor(weight.shape(), 0.0, 0.5);
    weight.data_mut().copy_from_slice(&fresh.data());
}

fn weighted_sum(tape: &Tape<f64>, out: &Tensor<f64>, weights: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(ops::sum(tape, &ops::mul(tape, out, weights)?))
}

fn ops_checks() -> Result<Vec<CheckOutcome>> {
    let mut results = Vec::new();
    let mut rng = Rng::new(1001);

    // matmul: random 3x4 . 4x2.
    {
        let a: Tensor<f64> = rng.normal_tensor(&[3, 4], 0.0, 1.0).requires_grad();
        let b: Tensor<f64> = rng.normal_tensor(&[4, 2], 0.0, 1.0).requires_grad();
        let r = projection(&mut rng, &[3, 2]);
        results.push(finite_diff_check("matmul", &[("a", &a), ("b", &b)], |tape| {
            weighted_sum(tape, &ops::matmul(tape, &a, &b)?, &r)
        })?);
    }

    // elementwise add/sub/mul with a broadcast operand.
    {
        let a: Tensor<f64> = rng.normal_tensor(&[2, 3, 4, 4], 0.0, 1.0).requires_grad();
        let b: Tensor<f64> = rng.normal_tensor(&[3], 0.0, 1.0).requires_grad();
        let r = projection(&mut rng, &[2, 3, 4, 4]);
        results.push(finite_diff_check("add-broadcast", &[("a", &a), ("b", &b)], |tape| {
            weighted_sum(tape, &ops::add(tape, &a, &b)?, &r)
        })?);
        results.push(finite_diff_check("sub-broadcast", &[("a", &a), ("b", &b)], |tape| {
            weighted_sum(tape, &ops::sub(tape, &a, &b)?, &r)
        })?);
        results.push(finite_diff_check("mul-broadcast", &[("a", &a), ("b", &b)], |tape| {
            weighted_sum(tape, &ops::mul(tape, &a, &b)?, &r)
        })?);
    }

    // relu away from the kink; sigmoid; scale-by-constant.
    {
        let x = Tensor::from_fn(&[24], |_| {
            let u = rng.normal();
            u.signum() * (0.1 + u.abs())
        })
        .requires_grad();
        let r = projection(&mut rng, &[24]);
        results.push(finite_diff_check("relu", &[("x", &x)], |tape| {
            weighted_sum(tape, &ops::relu(tape, &x), &r)
        })?);
        results.push(finite_diff_check("sigmoid", &[("x", &x)], |tape| {
            weighted_sum(tape, &ops::sigmoid(tape, &x), &r)
        })?);
        results.push(finite_diff_check("scale", &[("x", &x)], |tape| {
            weighted_sum(tape, &ops::scale(tape, &x, -1.7), &r)
        })?);
    }

    // conv2d with bias, stride 1 and stride 2.
    for (name, stride) in [("conv2d-s1", 1), ("conv2d-s2", 2)] {
        let x: Tensor<f64> = rng.normal_tensor(&[2, 3, 5, 5], 0.0, 1.0).requires_grad();
        let w: Tensor<f64> = rng.normal_tensor(&[4, 3, 3, 3], 0.0, 0.5).requires_grad();
        let b: Tensor<f64> = rng.normal_tensor(&[4], 0.0, 0.5).requires_grad();
        let out_hw = (5 + 2 - 3) / stride + 1;
        let r = projection(&mut rng, &[2, 4, out_hw, out_hw]);
        let conv = Conv2d::new(w.clone(), Some(b.clone()), stride, 1);
        results.push(finite_diff_check(
            name,
            &[("x", &x), ("w", &w), ("b", &b)],
            |tape| weighted_sum(tape, &ops::conv2d(tape, &x, &conv)?, &r),
        )?);
    }

    // depthwise 3x3.
    {
        let x: Tensor<f64> = rng.normal_tensor(&[1, 3, 6, 6], 0.0, 1.0).requires_grad();
        let w: Tensor<f64> = rng.normal_tensor(&[3, 1, 3, 3], 0.0, 0.5).requires_grad();
        let r = projection(&mut rng, &[1, 3, 6, 6]);
        let conv = Conv2d::depthwise3x3(w.clone());
        results.push(finite_diff_check("depthwise3x3", &[("x", &x), ("w", &w)], |tape| {
            weighted_sum(tape, &ops::depthwise_conv3x3(tape, &x, &conv)?, &r)
        })?);
    }

    // batch norm (train mode) and group norm.
    {
        let x: Tensor<f64> = rng.normal_tensor(&[2, 3, 4, 4], 0.5, 1.5).requires_grad();
        let bn = BatchNorm2d::identity(3);
        let r = projection(&mut rng, &[2, 3, 4, 4]);
        results.push(finite_diff_check(
            "batchnorm-train",
            &[("x", &x), ("gamma", &bn.gamma), ("beta", &bn.beta)],
            |tape| weighted_sum(tape, &ops::batchnorm2d(tape, &x, &bn, true)?, &r),
        )?);
    }
    {
        let x: Tensor<f64> = rng.normal_tensor(&[2, 4, 3, 3], -0.2, 1.0).requires_grad();
        let gn = GroupNorm::identity(4, 2);
        let r = projection(&mut rng, &[2, 4, 3, 3]);
        results.push(finite_diff_check(
            "groupnorm",
            &[("x", &x), ("gamma", &gn.gamma), ("beta", &gn.beta)],
            |tape| weighted_sum(tape, &ops::groupnorm(tape, &x, &gn)?, &r),
        )?);
    }

    // channel-wise l2 normalization.
    {
        let x: Tensor<f64> = rng.normal_tensor(&[1, 4, 3, 3], 0.0, 1.0).requires_grad();
        let r = projection(&mut rng, &[1, 4, 3, 3]);
        results.push(finite_diff_check("l2norm-channels", &[("x", &x)], |tape| {
            weighted_sum(tape, &ops::l2_normalize_channels(tape, &x, 1e-6)?, &r)
        })?);
    }

    // pooling.
    {
        let x: Tensor<f64> = rng.normal_tensor(&[1, 2, 5, 5], 0.0, 1.0).requires_grad();
        let r = projection(&mut rng, &[1, 2, 3, 3]);
        results.push(finite_diff_check("maxpool3x3s2", &[("x", &x)], |tape| {
            weighted_sum(tape, &ops::maxpool3x3s2(tape, &x)?, &r)
        })?);
        let r2 = projection(&mut rng, &[1, 2]);
        results.push(finite_diff_check("global-avg-pool", &[("x", &x)], |tape| {
            weighted_sum(tape, &ops::global_avg_pool(tape, &x)?, &r2)
        })?);
    }

    // pairwise products.
    {
        let a: Tensor<f64> = rng.normal_tensor(&[1, 3, 3, 3], 0.0, 1.0).requires_grad();
        let b: Tensor<f64> = rng.normal_tensor(&[1, 3, 3, 3], 0.0, 1.0).requires_grad();
        let (idx_i, idx_j) = ops::upper_tri_indices(3);
        let r = projection(&mut rng, &[1, idx_i.len(), 3, 3]);
        results.push(finite_diff_check("pair-product", &[("a", &a), ("b", &b)], |tape| {
            weighted_sum(tape, &ops::pair_product(tape, &a, &b, &idx_i, &idx_j)?, &r)
        })?);
    }

    // linear with bias.
    {
        let x: Tensor<f64> = rng.normal_tensor(&[3, 5], 0.0, 1.0).requires_grad();
        let layer = Linear {
            weight: rng.normal_tensor(&[4, 5], 0.0, 0.5).requires_grad(),
            bias: Some(rng.normal_tensor(&[4], 0.0, 0.5).requires_grad()),
        };
        let r = projection(&mut rng, &[3, 4]);
        results.push(finite_diff_check(
            "linear",
            &[
                ("x", &x),
                ("w", &layer.weight),
                ("b", layer.bias.as_ref().expect("bias")),
            ],
            |tape| weighted_sum(tape, &ops::linear(tape, &x, &layer)?, &r),
        )?);
    }

    // smoothed cross entropy.
    {
        let logits: Tensor<f64> = rng.normal_tensor(&[4, 5], 0.0, 2.0).requires_grad();
        let labels = vec![0usize, 2, 4, 1];
        results.push(finite_diff_check("cross-entropy-smoothed", &[("logits", &logits)], |tape| {
            ops::cross_entropy_smoothed(tape, &logits, &labels, 0.1)
        })?);
    }

    Ok(results)
}

fn stci_checks() -> Result<Vec<CheckOutcome>> {
    let mut results = Vec::new();
    let mut rng = Rng::new(2002);
    let init = ParamInit::new(2003);

    // One directional head: reduction, BN, twist, scale.
    {
        let head: StciHead<f64> = StciHead::init(&init, "gc.head", 6, 4, 0.0)?;
        let x: Tensor<f64> = rng.normal_tensor(&[1, 6, 5, 5], 0.0, 1.0).requires_grad();
        let r = projection(&mut rng, &[1, 4 + 10, 5, 5]);
        results.push(finite_diff_check(
            "stci-head",
            &[
                ("x", &x),
                ("reduce", &head.reduce.weight),
                ("bn.gamma", &head.bn.gamma),
                ("bn.beta", &head.bn.beta),
                ("twist", &head.twist.weight),
                ("scale", &head.scale),
            ],
            |tape| {
                let (out, _) = head.forward(tape, &x, true)?;
                weighted_sum(tape, &out, &r)
            },
        )?);
    }

    // AIS gating.
    {
        let d = 12;
        let w1 = Linear {
            weight: init.kaiming("gc.ais.w1", &[16, d], d),
            bias: Some(Tensor::<f64>::zeros(&[16]).requires_grad()),
        };
        let w2 = Linear {
            weight: init.kaiming("gc.ais.w2", &[d, 16], 16),
            bias: Some(Tensor::<f64>::zeros(&[d]).requires_grad()),
        };
        let f: Tensor<f64> = rng.normal_tensor(&[2, d, 3, 3], 0.0, 1.0).requires_grad();
        let r = projection(&mut rng, &[2, d, 3, 3]);
        results.push(finite_diff_check(
            "ais",
            &[
                ("f", &f),
                ("w1", &w1.weight),
                ("b1", w1.bias.as_ref().expect("bias")),
                ("w2", &w2.weight),
                ("b2", w2.bias.as_ref().expect("bias")),
            ],
            |tape| weighted_sum(tape, &ais_forward(tape, &f, &w1, &w2)?, &r),
        )?);
    }

    // Full multi-head module on a small configuration.
    {
        let cfg = StciConfig {
            in_channels: 8,
            reduced: 2,
            heads: 4,
            out_channels: 6,
            gn_groups: 4,
        };
        let mh: MhStci<f64> = MhStci::init(&init, "gc.mh", cfg)?;
        redraw_projection(&mh.proj.weight, &mut rng);
        let x: Tensor<f64> = rng.normal_tensor(&[1, 8, 4, 4], 0.0, 1.0).requires_grad();
        let r = projection(&mut rng, &[1, 6, 4, 4]);
        let mut checked: Vec<(String, Tensor<f64>)> = vec![("x".into(), x.clone())];
        for (k, head) in mh.heads.iter().enumerate() {
            checked.push((format!("head{k}.reduce"), head.reduce.weight.clone()));
            checked.push((format!("head{k}.twist"), head.twist.weight.clone()));
            checked.push((format!("head{k}.scale"), head.scale.clone()));
        }
        checked.push(("ais.w1".into(), mh.ais_w1.weight.clone()));
        checked.push(("ais.w2".into(), mh.ais_w2.weight.clone()));
        checked.push(("gn.gamma".into(), mh.gn.gamma.clone()));
        checked.push(("proj".into(), mh.proj.weight.clone()));
        let refs: Vec<(&str, &Tensor<f64>)> =
            checked.iter().map(|(n, t)| (n.as_str(), t)).collect();
        results.push(finite_diff_check("mh-stci", &refs, |tape| {
            weighted_sum(tape, &mh.forward(tape, &x, true, None)?, &r)
        })?);
    }

    Ok(results)
}

/// Builds a TwistBlock-shaped parameter set directly (the arch builder wires
/// the same pieces; here the check needs `f64` and full parameter access).
fn block_checks() -> Result<Vec<CheckOutcome>> {
    use crate::arch::{build_network, preset, ForwardOpts, NetworkSpec, StciSettings};

    let mut results = Vec::new();
    let mut rng = Rng::new(3004);

    // A miniature twist network: stride-1 and stride-2 TwistBlocks, gates,
    // and the classifier, checked end to end through the real builder.
    let spec = NetworkSpec {
        widths: [4, 4, 6, 8],
        blocks_per_stage: [1, 1, 1, 1],
        stage_strides: [1, 2, 2, 2],
        block_kinds: [
            crate::arch::BlockKind::Basic,
            crate::arch::BlockKind::Basic,
            crate::arch::BlockKind::Twist,
            crate::arch::BlockKind::Twist,
        ],
        num_classes: 3,
        input_size: 24,
        stci: StciSettings {
            reduced: 2,
            heads: 4,
            gn_groups: 4,
        },
    };
    let net = build_network::<f64>(&spec, 3005)?;
    net.visit_params(&mut |name, tensor, _| {
        if name.ends_with("proj.weight") {
            redraw_projection(tensor, &mut rng);
        }
    });
    let x: Tensor<f64> = rng.normal_tensor(&[1, 3, 24, 24], 0.0, 1.0).requires_grad();
    let labels = vec![1usize];

    // Check every parameter the spec calls out, plus a conv and the input.
    let params = net.parameters();
    let mut checked: Vec<(String, Tensor<f64>)> = vec![("input".into(), x.clone())];
    for entry in &params {
        let include = matches!(
            entry.kind,
            ParamKind::Gate | ParamKind::TwistKernel | ParamKind::TwistScale
        ) || entry.name.contains("ais")
            || entry.name.contains("proj.weight")
            || entry.name == "stage3.block0.conv1.weight"
            || entry.name == "fc.weight";
        if include {
            checked.push((entry.name.clone(), entry.tensor.clone()));
        }
    }
    let refs: Vec<(&str, &Tensor<f64>)> = checked.iter().map(|(n, t)| (n.as_str(), t)).collect();
    results.push(finite_diff_check("twist-network-loss", &refs, |tape| {
        let logits = net.forward(
            tape,
            &x,
            ForwardOpts {
                training: true,
                zero_interactions: false,
            },
        )?;
        ops::cross_entropy_smoothed(tape, &logits, &labels, 0.1)
    })?);

    // The spec's reference configuration: one full TwistBlock over a
    // 1 x 8 x 6 x 6 input, every parameter checked.
    let block_spec = NetworkSpec {
        widths: [8, 8, 8, 8],
        blocks_per_stage: [1, 1, 1, 1],
        stage_strides: [1, 2, 2, 2],
        block_kinds: [
            crate::arch::BlockKind::Twist,
            crate::arch::BlockKind::Basic,
            crate::arch::BlockKind::Basic,
            crate::arch::BlockKind::Basic,
        ],
        num_classes: 2,
        input_size: 24,
        stci: StciSettings {
            reduced: 4,
            heads: 4,
            gn_groups: 4,
        },
    };
    let net2 = build_network::<f64>(&block_spec, 3006)?;
    let block = match &net2.stages[0][0] {
        crate::arch::Block::Twist(t) => t.clone(),
        _ => unreachable!("stage 1 is a twist block"),
    };
    redraw_projection(&block.mh.proj.weight, &mut rng);
    let xb: Tensor<f64> = rng.normal_tensor(&[1, 8, 6, 6], 0.0, 1.0).requires_grad();
    let r = projection(&mut rng, &[1, 8, 6, 6]);
    let mut checked: Vec<(String, Tensor<f64>)> = vec![("input".into(), xb.clone())];
    let mut collect = |name: &str, t: &Tensor<f64>, _k: ParamKind| {
        if name.starts_with("stage1.block0") {
            checked.push((name.to_string(), t.clone()));
        }
    };
    net2.visit_params(&mut collect);
    let refs: Vec<(&str, &Tensor<f64>)> = checked.iter().map(|(n, t)| (n.as_str(), t)).collect();
    results.push(finite_diff_check("twist-block-full", &refs, |tape| {
        let out = block.forward(tape, &xb, true, false, None)?;
        weighted_sum(tape, &out, &r)
    })?);

    let _ = preset("twistnet-micro", 8); // keep the import obviously alive
    Ok(results)
}

/// Runs the selected scope and returns per-check outcomes.
pub fn run_scope(scope: Scope) -> Result<Vec<CheckOutcome>> {
    let mut results = Vec::new();
    if matches!(scope, Scope::Ops | Scope::All) {
        results.extend(ops_checks()?);
    }
    if matches!(scope, Scope::Stci | Scope::All) {
        results.extend(stci_checks()?);
    }
    if matches!(scope, Scope::Block | Scope::All) {
        results.extend(block_checks()?);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::{InputSlot, TapeOp};

    #[test]
    fn ops_scope_passes() {
        for outcome in run_scope(Scope::Ops).unwrap() {
            assert!(
                outcome.pass,
                "{}: max rel err {}",
                outcome.name, outcome.max_rel_err
            );
        }
    }

    #[test]
    fn stci_scope_passes() {
        for outcome in run_scope(Scope::Stci).unwrap() {
            assert!(
                outcome.pass,
                "{}: max rel err {}",
                outcome.name, outcome.max_rel_err
            );
        }
    }

    /// An op with a deliberately wrong backward rule must be flagged; this
    /// guards the harness itself.
    struct CorruptScale {
        x: InputSlot<f64>,
    }

    impl TapeOp<f64> for CorruptScale {
        fn backward(&self, g: &[f64]) {
            // True derivative of 2x is 2; report 2.2.
            let dx: Vec<f64> = g.iter().map(|&v| v * 2.2).collect();
            self.x.add(&dx);
        }
    }

    #[test]
    fn corrupted_backward_is_reported_as_failure() {
        let x = Tensor::<f64>::from_vec(&[3], vec![0.5, -1.0, 2.0])
            .unwrap()
            .requires_grad();
        let outcome = finite_diff_check("corrupt", &[("x", &x)], |tape| {
            let data: Vec<f64> = x.data().iter().map(|&v| 2.0 * v).collect();
            let mut out = Tensor::from_vec(&[3], data)?;
            tape.record(
                &mut out,
                Box::new(CorruptScale {
                    x: InputSlot::of(&x),
                }),
            );
            Ok(ops::sum(tape, &out))
        })
        .unwrap();
        assert!(!outcome.pass, "corrupted backward must fail the check");
        assert!(outcome.max_rel_err > 0.05);
    }
}
