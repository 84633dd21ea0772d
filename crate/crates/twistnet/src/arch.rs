//! Residual blocks, network builders, and exact parameter/FLOP accounting.
//!
//! Builders derive every parameter from a named PRNG stream, so two
//! architectures sharing a layer name get identical weights for it under the
//! same seed; adding interaction branches never perturbs backbone draws.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, BatchNorm2d, Conv2d, Linear};
use crate::stci::{MhStci, StciConfig};
use crate::tensor::rng::ParamInit;
use crate::tensor::tape::Tape;
use crate::tensor::{Element, Tensor};

/// Block flavor of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Basic,
    Twist,
}

/// Interaction hyperparameters shared by every TwistBlock of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StciSettings {
    /// Reduced channels `C_r` per head.
    pub reduced: usize,
    /// Directional head count (4 canonical, 8 for the direction ablation).
    pub heads: usize,
    /// GroupNorm group count over the concatenated interaction channels.
    pub gn_groups: usize,
}

impl Default for StciSettings {
    fn default() -> Self {
        StciSettings {
            reduced: 8,
            heads: 4,
            gn_groups: 4,
        }
    }
}

/// Declarative network description: a ResNet-style stem (7x7/2 conv, BN,
/// ReLU, 3x3/2 max pool), four stages, global average pooling, and a linear
/// classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub widths: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub stage_strides: [usize; 4],
    pub block_kinds: [BlockKind; 4],
    pub num_classes: usize,
    /// Square input resolution the spec is intended for.
    pub input_size: usize,
    pub stci: StciSettings,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Spec("stage widths must be positive".into()));
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(Error::Spec("each stage needs at least one block".into()));
        }
        if self.stage_strides[0] != 1 {
            return Err(Error::Spec("stage 1 must have stride 1".into()));
        }
        if self.stage_strides.iter().any(|&s| s == 0 || s > 2) {
            return Err(Error::Spec("stage strides must be 1 or 2".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Spec("need at least two classes".into()));
        }
        if self.input_size < 8 {
            return Err(Error::Spec("input size too small for the stem".into()));
        }
        for (stage, kind) in self.block_kinds.iter().enumerate() {
            if *kind == BlockKind::Twist {
                self.stci_config(self.widths[stage]).validate()?;
            }
        }
        Ok(())
    }

    fn stci_config(&self, width: usize) -> StciConfig {
        StciConfig {
            in_channels: width,
            reduced: self.stci.reduced,
            heads: self.stci.heads,
            out_channels: width,
            gn_groups: self.stci.gn_groups,
        }
    }

    /// The same architecture with every interaction branch removed.
    pub fn first_order_twin(&self) -> NetworkSpec {
        NetworkSpec {
            block_kinds: [BlockKind::Basic; 4],
            ..self.clone()
        }
    }

    /// Number of TwistBlocks the spec builds.
    pub fn twist_block_count(&self) -> usize {
        self.block_kinds
            .iter()
            .zip(self.blocks_per_stage)
            .filter(|(kind, _)| **kind == BlockKind::Twist)
            .map(|(_, blocks)| blocks)
            .sum()
    }

    /// Spatial resolution after the stem and after each stage.
    pub fn resolutions(&self, input: usize) -> Result<[usize; 5]> {
        let conv_out = ops::conv_out_extent(input, 7, 2, 3)?;
        let mut r = ops::conv_out_extent(conv_out, 3, 2, 1)?;
        let mut out = [r; 5];
        for stage in 0..4 {
            r = ops::conv_out_extent(r, 3, self.stage_strides[stage], 1)?;
            out[stage + 1] = r;
        }
        Ok(out)
    }
}

/// Named presets of the artifact.
pub fn preset(name: &str, num_classes: usize) -> Result<NetworkSpec> {
    let spec = match name {
        "resnet18" | "twistnet18" => NetworkSpec {
            widths: [64, 128, 256, 512],
            blocks_per_stage: [2, 2, 2, 2],
            stage_strides: [1, 2, 2, 2],
            block_kinds: if name == "twistnet18" {
                [
                    BlockKind::Basic,
                    BlockKind::Basic,
                    BlockKind::Twist,
                    BlockKind::Twist,
                ]
            } else {
                [BlockKind::Basic; 4]
            },
            num_classes,
            input_size: 224,
            stci: StciSettings::default(),
        },
        "resnet-micro" | "twistnet-micro" => NetworkSpec {
            widths: [16, 32, 64, 128],
            blocks_per_stage: [2, 2, 2, 2],
            stage_strides: [1, 2, 2, 2],
            block_kinds: if name == "twistnet-micro" {
                [
                    BlockKind::Basic,
                    BlockKind::Basic,
                    BlockKind::Twist,
                    BlockKind::Twist,
                ]
            } else {
                [BlockKind::Basic; 4]
            },
            num_classes,
            input_size: 64,
            stci: StciSettings {
                reduced: 4,
                heads: 4,
                gn_groups: 4,
            },
        },
        other => return Err(Error::Spec(format!("unknown preset '{other}'"))),
    };
    spec.validate()?;
    Ok(spec)
}

pub const PRESET_NAMES: [&str; 4] = ["resnet18", "twistnet18", "twistnet-micro", "resnet-micro"];

// ── blocks ───────────────────────────────────────────────────────────

/// Standard two-conv residual block.
#[derive(Clone, Debug)]
pub struct BasicBlock<E: Element> {
    pub conv1: Conv2d<E>,
    pub bn1: BatchNorm2d<E>,
    pub conv2: Conv2d<E>,
    pub bn2: BatchNorm2d<E>,
    pub down: Option<(Conv2d<E>, BatchNorm2d<E>)>,
}

impl<E: Element> BasicBlock<E> {
    fn init(init: &ParamInit, name: &str, c_in: usize, c_out: usize, stride: usize) -> Self {
        let conv1 = Conv2d::new(
            init.kaiming(&format!("{name}.conv1.weight"), &[c_out, c_in, 3, 3], c_in * 9),
            None,
            stride,
            1,
        );
        let conv2 = Conv2d::new(
            init.kaiming(&format!("{name}.conv2.weight"), &[c_out, c_out, 3, 3], c_out * 9),
            None,
            1,
            1,
        );
        let down = (stride != 1 || c_in != c_out).then(|| {
            (
                Conv2d::new(
                    init.kaiming(&format!("{name}.down.conv.weight"), &[c_out, c_in, 1, 1], c_in),
                    None,
                    stride,
                    0,
                ),
                BatchNorm2d::identity(c_out),
            )
        });
        BasicBlock {
            conv1,
            bn1: BatchNorm2d::identity(c_out),
            conv2,
            bn2: BatchNorm2d::identity(c_out),
            down,
        }
    }

    /// `(H, M)`: the post-ReLU intermediate and the pre-residual main path.
    fn main_path(
        &self,
        tape: &Tape<E>,
        x: &Tensor<E>,
        training: bool,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let h = ops::relu(
            tape,
            &ops::batchnorm2d(tape, &ops::conv2d(tape, x, &self.conv1)?, &self.bn1, training)?,
        );
        let m = ops::batchnorm2d(tape, &ops::conv2d(tape, &h, &self.conv2)?, &self.bn2, training)?;
        Ok((h, m))
    }

    fn shortcut(&self, tape: &Tape<E>, x: &Tensor<E>, training: bool) -> Result<Tensor<E>> {
        match &self.down {
            Some((conv, bn)) => ops::batchnorm2d(tape, &ops::conv2d(tape, x, conv)?, bn, training),
            None => Ok(x.clone()),
        }
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, training: bool) -> Result<Tensor<E>> {
        let (_, m) = self.main_path(tape, x, training)?;
        let s = self.shortcut(tape, x, training)?;
        if m.shape() != s.shape() {
            return Err(Error::Residual(format!(
                "main path {:?} vs shortcut {:?}",
                m.shape(),
                s.shape()
            )));
        }
        Ok(ops::relu(tape, &ops::add(tape, &m, &s)?))
    }
}

/// Residual block with a sigmoid-gated interaction branch computed from the
/// intermediate activation.
#[derive(Clone, Debug)]
pub struct TwistBlock<E: Element> {
    pub body: BasicBlock<E>,
    pub mh: MhStci<E>,
    /// Gate pre-activation; the effective gate is `sigmoid(gamma)`,
    /// initialized to -2 for a soft start.
    pub gate: Tensor<E>,
}

impl<E: Element> TwistBlock<E> {
    fn init(
        init: &ParamInit,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        cfg: StciConfig,
    ) -> Result<Self> {
        Ok(TwistBlock {
            body: BasicBlock::init(init, name, c_in, c_out, stride),
            mh: MhStci::init(init, &format!("{name}.stci"), cfg)?,
            gate: Tensor::from_vec(&[1], vec![E::from_f64(-2.0)])?.requires_grad(),
        })
    }

    pub fn gate_value(&self) -> f64 {
        let g = Element::as_f64(self.gate.data()[0]);
        1.0 / (1.0 + (-g).exp())
    }

    pub fn forward(
        &self,
        tape: &Tape<E>,
        x: &Tensor<E>,
        training: bool,
        zero_interactions: bool,
        capture: Option<&mut Vec<Tensor<E>>>,
    ) -> Result<Tensor<E>> {
        let (h, m) = self.body.main_path(tape, x, training)?;
        let s = self.body.shortcut(tape, x, training)?;
        if m.shape() != s.shape() {
            return Err(Error::Residual(format!(
                "main path {:?} vs shortcut {:?}",
                m.shape(),
                s.shape()
            )));
        }
        if zero_interactions {
            // Identical op sequence to BasicBlock::forward, so the gate-off
            // network matches the first-order twin bit-for-bit.
            return Ok(ops::relu(tape, &ops::add(tape, &m, &s)?));
        }
        let branch = self.mh.forward(tape, &h, training, capture)?;
        let g = ops::sigmoid(tape, &self.gate);
        let gated = ops::mul(tape, &branch, &g)?;
        let pre = ops::add(tape, &ops::add(tape, &m, &gated)?, &s)?;
        Ok(ops::relu(tape, &pre))
    }
}

#[derive(Clone, Debug)]
pub enum Block<E: Element> {
    Basic(BasicBlock<E>),
    Twist(TwistBlock<E>),
}

// ── network ──────────────────────────────────────────────────────────

/// Forward-pass switches.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOpts {
    pub training: bool,
    /// Multiplies every interaction branch by zero (drops it), leaving the
    /// first-order computation untouched.
    pub zero_interactions: bool,
}

/// Interaction channels captured from one TwistBlock during a forward pass.
pub struct BlockInteractions<E: Element> {
    pub stage: usize,
    pub block: usize,
    pub gate: f64,
    /// Raw `phi` maps per head, in head order.
    pub phis: Vec<Tensor<E>>,
}

/// Parameter roles; they drive the weight-decay policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    Bias,
    NormAffine,
    TwistKernel,
    TwistScale,
    Gate,
}

impl ParamKind {
    /// Weight decay applies to everything except normalization affines and
    /// the block gates (decaying the gate drags it toward 0.5).
    pub fn decays(self) -> bool {
        !matches!(self, ParamKind::NormAffine | ParamKind::Gate)
    }
}

/// One named parameter of a built network. The tensor shares storage with
/// the network, so optimizer updates through it are visible to the model.
pub struct ParamEntry<E: Element> {
    pub name: String,
    pub tensor: Tensor<E>,
    pub kind: ParamKind,
}

/// A fully built, parameterized network.
pub struct Network<E: Element> {
    pub spec: NetworkSpec,
    pub stem_conv: Conv2d<E>,
    pub stem_bn: BatchNorm2d<E>,
    pub stages: Vec<Vec<Block<E>>>,
    pub classifier: Linear<E>,
}

/// Allocates and initializes all parameters of `spec` deterministically.
pub fn build_network<E: Element>(spec: &NetworkSpec, seed: u64) -> Result<Network<E>> {
    spec.validate()?;
    let init = ParamInit::new(seed);
    let stem_conv = Conv2d::new(
        init.kaiming("stem.conv.weight", &[spec.widths[0], 3, 7, 7], 3 * 49),
        None,
        2,
        3,
    );
    let stem_bn = BatchNorm2d::identity(spec.widths[0]);

    let mut stages = Vec::with_capacity(4);
    let mut c_in = spec.widths[0];
    for stage in 0..4 {
        let c_out = spec.widths[stage];
        let mut blocks = Vec::with_capacity(spec.blocks_per_stage[stage]);
        for block in 0..spec.blocks_per_stage[stage] {
            let stride = if block == 0 { spec.stage_strides[stage] } else { 1 };
            let name = format!("stage{}.block{}", stage + 1, block);
            let built = match spec.block_kinds[stage] {
                BlockKind::Basic => {
                    Block::Basic(BasicBlock::init(&init, &name, c_in, c_out, stride))
                }
                BlockKind::Twist => Block::Twist(TwistBlock::init(
                    &init,
                    &name,
                    c_in,
                    c_out,
                    stride,
                    spec.stci_config(c_out),
                )?),
            };
            blocks.push(built);
            c_in = c_out;
        }
        stages.push(blocks);
    }

    let classifier = Linear {
        weight: init.normal("fc.weight", &[spec.num_classes, spec.widths[3]], 0.0, 0.01),
        bias: Some(Tensor::zeros(&[spec.num_classes]).requires_grad()),
    };

    Ok(Network {
        spec: spec.clone(),
        stem_conv,
        stem_bn,
        stages,
        classifier,
    })
}

impl<E: Element> Network<E> {
    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, opts: ForwardOpts) -> Result<Tensor<E>> {
        self.forward_with_capture(tape, x, opts, None)
    }

    /// Forward pass returning logits; optionally captures each TwistBlock's
    /// interaction channels.
    pub fn forward_with_capture(
        &self,
        tape: &Tape<E>,
        x: &Tensor<E>,
        opts: ForwardOpts,
        mut capture: Option<&mut Vec<BlockInteractions<E>>>,
    ) -> Result<Tensor<E>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!(
                "expected [n, 3, h, w] input, got {:?}",
                s
            )));
        }
        let stem = ops::relu(
            tape,
            &ops::batchnorm2d(
                tape,
                &ops::conv2d(tape, x, &self.stem_conv)?,
                &self.stem_bn,
                opts.training,
            )?,
        );
        let mut feat = ops::maxpool3x3s2(tape, &stem)?;
        for (stage_idx, blocks) in self.stages.iter().enumerate() {
            for (block_idx, block) in blocks.iter().enumerate() {
                feat = match block {
                    Block::Basic(b) => b.forward(tape, &feat, opts.training)?,
                    Block::Twist(t) => {
                        let mut phis = capture.is_some().then(Vec::new);
                        let out = t.forward(
                            tape,
                            &feat,
                            opts.training,
                            opts.zero_interactions,
                            phis.as_mut(),
                        )?;
                        if let (Some(cap), Some(phis)) = (capture.as_deref_mut(), phis) {
                            cap.push(BlockInteractions {
                                stage: stage_idx + 1,
                                block: block_idx,
                                gate: t.gate_value(),
                                phis,
                            });
                        }
                        out
                    }
                };
            }
        }
        let pooled = ops::global_avg_pool(tape, &feat)?;
        ops::linear(tape, &pooled, &self.classifier)
    }

    /// Visits every trainable parameter in a fixed, deterministic order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<E>, ParamKind)) {
        fn visit_bn<E: Element>(
            f: &mut dyn FnMut(&str, &Tensor<E>, ParamKind),
            name: &str,
            bn: &BatchNorm2d<E>,
        ) {
            f(&format!("{name}.gamma"), &bn.gamma, ParamKind::NormAffine);
            f(&format!("{name}.beta"), &bn.beta, ParamKind::NormAffine);
        }
        fn visit_basic<E: Element>(
            f: &mut dyn FnMut(&str, &Tensor<E>, ParamKind),
            name: &str,
            b: &BasicBlock<E>,
        ) {
            f(
                &format!("{name}.conv1.weight"),
                &b.conv1.weight,
                ParamKind::ConvWeight,
            );
            visit_bn(f, &format!("{name}.bn1"), &b.bn1);
            f(
                &format!("{name}.conv2.weight"),
                &b.conv2.weight,
                ParamKind::ConvWeight,
            );
            visit_bn(f, &format!("{name}.bn2"), &b.bn2);
            if let Some((conv, bn)) = &b.down {
                f(
                    &format!("{name}.down.conv.weight"),
                    &conv.weight,
                    ParamKind::ConvWeight,
                );
                visit_bn(f, &format!("{name}.down.bn"), bn);
            }
        }

        f(
            "stem.conv.weight",
            &self.stem_conv.weight,
            ParamKind::ConvWeight,
        );
        visit_bn(f, "stem.bn", &self.stem_bn);
        for (stage_idx, blocks) in self.stages.iter().enumerate() {
            for (block_idx, block) in blocks.iter().enumerate() {
                let name = format!("stage{}.block{}", stage_idx + 1, block_idx);
                match block {
                    Block::Basic(b) => visit_basic(f, &name, b),
                    Block::Twist(t) => {
                        visit_basic(f, &name, &t.body);
                        let mh = &t.mh;
                        for (k, head) in mh.heads.iter().enumerate() {
                            let hname = format!("{name}.stci.head{k}");
                            f(
                                &format!("{hname}.reduce.weight"),
                                &head.reduce.weight,
                                ParamKind::ConvWeight,
                            );
                            visit_bn(f, &format!("{hname}.bn"), &head.bn);
                            f(
                                &format!("{hname}.twist.weight"),
                                &head.twist.weight,
                                ParamKind::TwistKernel,
                            );
                            f(&format!("{hname}.scale"), &head.scale, ParamKind::TwistScale);
                        }
                        let sname = format!("{name}.stci");
                        f(
                            &format!("{sname}.ais.w1.weight"),
                            &mh.ais_w1.weight,
                            ParamKind::LinearWeight,
                        );
                        f(
                            &format!("{sname}.ais.w1.bias"),
                            mh.ais_w1.bias.as_ref().expect("ais bias"),
                            ParamKind::Bias,
                        );
                        f(
                            &format!("{sname}.ais.w2.weight"),
                            &mh.ais_w2.weight,
                            ParamKind::LinearWeight,
                        );
                        f(
                            &format!("{sname}.ais.w2.bias"),
                            mh.ais_w2.bias.as_ref().expect("ais bias"),
                            ParamKind::Bias,
                        );
                        f(&format!("{sname}.gn.gamma"), &mh.gn.gamma, ParamKind::NormAffine);
                        f(&format!("{sname}.gn.beta"), &mh.gn.beta, ParamKind::NormAffine);
                        f(
                            &format!("{sname}.proj.weight"),
                            &mh.proj.weight,
                            ParamKind::ConvWeight,
                        );
                        visit_bn(f, &format!("{sname}.proj.bn"), &mh.proj_bn);
                        f(&format!("{name}.gate"), &t.gate, ParamKind::Gate);
                    }
                }
            }
        }
        f(
            "fc.weight",
            &self.classifier.weight,
            ParamKind::LinearWeight,
        );
        f(
            "fc.bias",
            self.classifier.bias.as_ref().expect("fc bias"),
            ParamKind::Bias,
        );
    }

    pub fn parameters(&self) -> Vec<ParamEntry<E>> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, tensor, kind| {
            out.push(ParamEntry {
                name: name.to_string(),
                tensor: tensor.clone(),
                kind,
            });
        });
        out
    }

    /// Non-trainable state (batch-norm running statistics), named.
    pub fn buffers(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        let mut push_bn = |name: &str, bn: &BatchNorm2d<E>| {
            out.push((format!("{name}.running_mean"), bn.running_mean.clone()));
            out.push((format!("{name}.running_var"), bn.running_var.clone()));
        };
        push_bn("stem.bn", &self.stem_bn);
        for (stage_idx, blocks) in self.stages.iter().enumerate() {
            for (block_idx, block) in blocks.iter().enumerate() {
                let name = format!("stage{}.block{}", stage_idx + 1, block_idx);
                let body = match block {
                    Block::Basic(b) => b,
                    Block::Twist(t) => &t.body,
                };
                push_bn(&format!("{name}.bn1"), &body.bn1);
                push_bn(&format!("{name}.bn2"), &body.bn2);
                if let Some((_, bn)) = &body.down {
                    push_bn(&format!("{name}.down.bn"), bn);
                }
                if let Block::Twist(t) = block {
                    for (k, head) in t.mh.heads.iter().enumerate() {
                        push_bn(&format!("{name}.stci.head{k}.bn"), &head.bn);
                    }
                    push_bn(&format!("{name}.stci.proj.bn"), &t.mh.proj_bn);
                }
            }
        }
        out
    }

    /// Current sigmoid gate per TwistBlock, in network order.
    pub fn gates(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for blocks in &self.stages {
            for block in blocks {
                if let Block::Twist(t) = block {
                    out.push(t.gate_value());
                }
            }
        }
        out
    }

    /// Total trainable scalar count of the built network.
    pub fn param_count(&self) -> u64 {
        let mut total = 0u64;
        self.visit_params(&mut |_, tensor, _| total += tensor.len() as u64);
        total
    }
}

// ── analytic cost accounting ─────────────────────────────────────────

fn mh_stci_params(width: usize, s: &StciSettings) -> u64 {
    let cfg = StciConfig {
        in_channels: width,
        reduced: s.reduced,
        heads: s.heads,
        out_channels: width,
        gn_groups: s.gn_groups,
    };
    let (c_r, d, d_mid) = (
        cfg.reduced as u64,
        cfg.concat_width() as u64,
        cfg.ais_mid() as u64,
    );
    let per_head = c_r * width as u64 // reduce 1x1
        + 2 * c_r                     // reduce BN affine
        + 9 * c_r                     // twist kernels
        + c_r; // per-channel scale
    cfg.heads as u64 * per_head
        + (d_mid * d + d_mid)         // AIS W1 + bias
        + (d * d_mid + d)             // AIS W2 + bias
        + 2 * d                       // GroupNorm affine
        + d * width as u64            // projection 1x1 (no bias)
        + 2 * width as u64 // projection BN affine
}

/// Trainable parameters added by one TwistBlock's interaction module
/// (excluding the gate scalar).
pub fn mh_stci_param_count(width: usize, settings: &StciSettings) -> u64 {
    mh_stci_params(width, settings)
}

fn basic_block_params(c_in: u64, c_out: u64, downsample: bool) -> u64 {
    let mut p = c_out * c_in * 9 + 2 * c_out + c_out * c_out * 9 + 2 * c_out;
    if downsample {
        p += c_out * c_in + 2 * c_out;
    }
    p
}

/// Analytic trainable-parameter count; matches built bundles exactly.
pub fn count_params(spec: &NetworkSpec) -> u64 {
    let w0 = spec.widths[0] as u64;
    let mut total = w0 * 3 * 49 + 2 * w0; // stem conv + BN
    let mut c_in = spec.widths[0] as u64;
    for stage in 0..4 {
        let c_out = spec.widths[stage] as u64;
        for block in 0..spec.blocks_per_stage[stage] {
            let stride = if block == 0 { spec.stage_strides[stage] } else { 1 };
            let down = stride != 1 || c_in != c_out;
            total += basic_block_params(c_in, c_out, down);
            if spec.block_kinds[stage] == BlockKind::Twist {
                total += mh_stci_params(spec.widths[stage], &spec.stci) + 1; // + gate
            }
            c_in = c_out;
        }
    }
    total += spec.num_classes as u64 * spec.widths[3] as u64 + spec.num_classes as u64;
    total
}

/// Analytic forward cost for one image in multiply-accumulates.
///
/// Counts convolutions, linear layers, and the `P * H * W` interaction
/// products per head; normalizations, activations, and pooling are excluded.
pub fn count_flops(spec: &NetworkSpec, input_hw: usize) -> Result<u64> {
    let stem_out = ops::conv_out_extent(input_hw, 7, 2, 3)? as u64;
    let mut flops = spec.widths[0] as u64 * 3 * 49 * stem_out * stem_out;
    let mut res = ops::conv_out_extent(stem_out as usize, 3, 2, 1)? as u64;

    let mut c_in = spec.widths[0] as u64;
    for stage in 0..4 {
        let c_out = spec.widths[stage] as u64;
        for block in 0..spec.blocks_per_stage[stage] {
            let stride = if block == 0 { spec.stage_strides[stage] } else { 1 };
            let out_res = ops::conv_out_extent(res as usize, 3, stride, 1)? as u64;
            let hw = out_res * out_res;
            flops += c_out * c_in * 9 * hw; // conv1
            flops += c_out * c_out * 9 * hw; // conv2
            if stride != 1 || c_in != c_out {
                flops += c_out * c_in * hw; // 1x1 downsample
            }
            if spec.block_kinds[stage] == BlockKind::Twist {
                let cfg = spec.stci_config(spec.widths[stage]);
                let (c_r, d, d_mid, p) = (
                    cfg.reduced as u64,
                    cfg.concat_width() as u64,
                    cfg.ais_mid() as u64,
                    cfg.pair_count() as u64,
                );
                let per_head = c_r * c_out * hw // reduce 1x1
                    + 9 * c_r * hw              // depthwise twist
                    + p * hw; // pairwise products
                flops += cfg.heads as u64 * per_head;
                flops += d_mid * d + d * d_mid; // AIS linears
                flops += c_out * d * hw; // projection 1x1
            }
            res = out_res;
            c_in = c_out;
        }
    }
    flops += spec.num_classes as u64 * spec.widths[3] as u64; // classifier
    Ok(flops)
}

/// Cost summary of an architecture next to its first-order twin.
#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub arch: String,
    pub params: u64,
    pub flops: u64,
    pub twin_params: u64,
    pub twin_flops: u64,
    pub param_overhead_pct: f64,
    pub flop_overhead_pct: f64,
}

/// Computes parameters and FLOPs for a preset and its first-order twin.
pub fn cost_report(name: &str, num_classes: usize, input_hw: usize) -> Result<CostReport> {
    let spec = preset(name, num_classes)?;
    let twin = spec.first_order_twin();
    let params = count_params(&spec);
    let flops = count_flops(&spec, input_hw)?;
    let twin_params = count_params(&twin);
    let twin_flops = count_flops(&twin, input_hw)?;
    Ok(CostReport {
        arch: name.to_string(),
        params,
        flops,
        twin_params,
        twin_flops,
        param_overhead_pct: 100.0 * (params as f64 / twin_params as f64 - 1.0),
        flop_overhead_pct: 100.0 * (flops as f64 / twin_flops as f64 - 1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::Rng;

    #[test]
    fn twistnet18_has_four_twist_blocks_and_gates() {
        let spec = preset("twistnet18", 47).unwrap();
        assert_eq!(spec.twist_block_count(), 4);
        let net: Network<f32> = build_network(&spec, 1).unwrap();
        assert_eq!(net.gates().len(), 4);
        for g in net.gates() {
            assert!((g - 0.119203).abs() < 1e-6, "soft-start gate, got {g}");
        }
    }

    #[test]
    fn resnet18_has_no_interaction_params() {
        let spec = preset("resnet18", 47).unwrap();
        let net: Network<f32> = build_network(&spec, 1).unwrap();
        assert_eq!(net.gates().len(), 0);
        let mut stci_params = 0;
        net.visit_params(&mut |name, _, _| {
            if name.contains("stci") || name.contains("gate") {
                stci_params += 1;
            }
        });
        assert_eq!(stci_params, 0);
    }

    #[test]
    fn same_seed_builds_bit_identical_bundles() {
        let spec = preset("twistnet-micro", 8).unwrap();
        let a: Network<f32> = build_network(&spec, 7).unwrap();
        let b: Network<f32> = build_network(&spec, 7).unwrap();
        let pa = a.parameters();
        let pb = b.parameters();
        assert_eq!(pa.len(), pb.len());
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(x.name, y.name);
            assert_eq!(*x.tensor.data(), *y.tensor.data(), "{}", x.name);
        }
    }

    #[test]
    fn analytic_param_count_matches_built_networks() {
        for name in ["resnet18", "twistnet18", "resnet-micro", "twistnet-micro"] {
            let spec = preset(name, 47).unwrap();
            let net: Network<f32> = build_network(&spec, 3).unwrap();
            assert_eq!(count_params(&spec), net.param_count(), "{name}");
        }
    }

    #[test]
    fn paper_scale_cost_figures() {
        let report = cost_report("twistnet18", 47, 224).unwrap();
        assert!(
            (report.params as f64 / 11.59e6 - 1.0).abs() < 0.01,
            "{}",
            report.params
        );
        assert!(
            (report.twin_params as f64 / 11.20e6 - 1.0).abs() < 0.01,
            "{}",
            report.twin_params
        );
        assert!(
            (report.flops as f64 / 1.85e9 - 1.0).abs() < 0.03,
            "{}",
            report.flops
        );
        assert!(
            (report.twin_flops as f64 / 1.82e9 - 1.0).abs() < 0.03,
            "{}",
            report.twin_flops
        );
        assert!(report.param_overhead_pct >= 3.0 && report.param_overhead_pct <= 4.0);
        assert!(report.flop_overhead_pct >= 1.0 && report.flop_overhead_pct <= 3.0);
    }

    #[test]
    fn stage3_interaction_module_adds_about_70k_params() {
        let added = mh_stci_param_count(256, &StciSettings::default());
        assert!((added as f64 / 70_000.0 - 1.0).abs() < 0.10, "{added}");
    }

    #[test]
    fn stage_resolutions_follow_strides() {
        let spec = preset("resnet18", 47).unwrap();
        assert_eq!(spec.resolutions(224).unwrap(), [56, 56, 28, 14, 7]);
        let micro = preset("twistnet-micro", 8).unwrap();
        assert_eq!(micro.resolutions(64).unwrap(), [16, 16, 8, 4, 2]);
    }

    #[test]
    fn stride_two_floors_odd_sizes() {
        let spec = preset("twistnet-micro", 8).unwrap();
        let net: Network<f32> = build_network(&spec, 1).unwrap();
        let tape = Tape::new();
        let mut rng = Rng::new(2);
        let x: Tensor<f32> = rng.normal_tensor(&[1, 3, 65, 65], 0.0, 1.0);
        let logits = net.forward(&tape, &x, ForwardOpts::default()).unwrap();
        assert_eq!(logits.shape(), &[1, 8]);
    }

    #[test]
    fn zero_weight_basic_block_is_relu_of_input() {
        let init = ParamInit::new(5);
        let block: BasicBlock<f64> = BasicBlock::init(&init, "b", 4, 4, 1);
        {
            let mut w = block.conv1.weight.data_mut();
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        {
            let mut w = block.conv2.weight.data_mut();
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        let tape = Tape::new();
        let mut rng = Rng::new(6);
        let x: Tensor<f64> = rng.normal_tensor(&[1, 4, 5, 5], 0.0, 1.0);
        // Eval mode: BN of an all-zero map stays zero, so out = relu(x).
        let y = block.forward(&tape, &x, false).unwrap();
        for (&yi, &xi) in y.data().iter().zip(x.data().iter()) {
            assert_eq!(yi, if xi > 0.0 { xi } else { 0.0 });
        }
    }

    #[test]
    fn unknown_preset_is_spec_error() {
        assert!(matches!(preset("resnet34", 10), Err(Error::Spec(_))));
    }

    #[test]
    fn basic_block_matches_hand_wired_composition() {
        let init = ParamInit::new(9);
        let block: BasicBlock<f64> = BasicBlock::init(&init, "b", 3, 5, 2);
        let tape = Tape::new();
        let mut rng = Rng::new(10);
        let x: Tensor<f64> = rng.normal_tensor(&[2, 3, 6, 6], 0.0, 1.0);
        let got = block.forward(&tape, &x, true).unwrap();

        // Rewire the same parameters by hand; train-mode BN stats must agree,
        // so reset the running buffers the first pass touched.
        for bn in [&block.bn1, &block.bn2, &block.down.as_ref().unwrap().1] {
            bn.running_mean.data_mut().iter_mut().for_each(|v| *v = 0.0);
            bn.running_var.data_mut().iter_mut().for_each(|v| *v = 1.0);
        }
        let tape2 = Tape::new();
        let c1 = ops::conv2d(&tape2, &x, &block.conv1).unwrap();
        let b1 = ops::batchnorm2d(&tape2, &c1, &block.bn1, true).unwrap();
        let h = ops::relu(&tape2, &b1);
        let c2 = ops::conv2d(&tape2, &h, &block.conv2).unwrap();
        let m = ops::batchnorm2d(&tape2, &c2, &block.bn2, true).unwrap();
        let (dconv, dbn) = block.down.as_ref().unwrap();
        let s =
            ops::batchnorm2d(&tape2, &ops::conv2d(&tape2, &x, dconv).unwrap(), dbn, true).unwrap();
        let want = ops::relu(&tape2, &ops::add(&tape2, &m, &s).unwrap());
        assert_eq!(*got.data(), *want.data());
    }
}
