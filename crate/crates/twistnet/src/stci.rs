//! Spiral-twisted channel interaction (STCI).
//!
//! A single head compresses channels with a 1x1 convolution, displaces the
//! reduced map along one direction through a learnable depthwise 3x3 ("the
//! twist"), l2-normalizes both maps per position, and emits the
//! upper-triangular pairwise products next to the normalized first-order
//! features. Four directional heads are concatenated, reweighted by adaptive
//! interaction selection (AIS), group-normalized, and projected.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::ops::{self, BatchNorm2d, Conv2d, GroupNorm, Linear};
use crate::tensor::rng::ParamInit;
use crate::tensor::tape::Tape;
use crate::tensor::{Element, Tensor};

/// Normalization epsilon of the pre-product l2 step; the denominator is
/// `(||.||_2 + eps)`, not `sqrt(||.||^2 + eps)`.
pub const L2_EPS: f64 = 1e-6;

/// Hyperparameters of one multi-head interaction module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StciConfig {
    pub in_channels: usize,
    /// Reduced channel count `C_r` ahead of the pairwise products.
    pub reduced: usize,
    /// Number of directional heads (4 canonical; 8 available for the
    /// direction-count comparison).
    pub heads: usize,
    pub out_channels: usize,
    pub gn_groups: usize,
}

impl StciConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        StciConfig {
            in_channels,
            reduced: 8,
            heads: 4,
            out_channels,
            gn_groups: 4,
        }
    }

    /// `P = C_r (C_r + 1) / 2` products per head.
    pub fn pair_count(&self) -> usize {
        self.reduced * (self.reduced + 1) / 2
    }

    /// Channels emitted by one head: `C_r + P`.
    pub fn head_width(&self) -> usize {
        self.reduced + self.pair_count()
    }

    /// Concatenation width `D = K (C_r + P)`.
    pub fn concat_width(&self) -> usize {
        self.heads * self.head_width()
    }

    /// AIS bottleneck `D_mid = max(D / 4, 16)`.
    pub fn ais_mid(&self) -> usize {
        (self.concat_width() / 4).max(16)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduced == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Spec("stci channel counts must be positive".into()));
        }
        if self.heads != 4 && self.heads != 8 {
            return Err(Error::Spec(format!(
                "stci supports 4 or 8 heads, got {}",
                self.heads
            )));
        }
        let d = self.concat_width();
        if self.gn_groups == 0 || d % self.gn_groups != 0 {
            return Err(Error::Groups {
                groups: self.gn_groups,
                channels: d,
            });
        }
        Ok(())
    }
}

/// Twist direction of head `k`: `k * pi/4`.
pub fn head_theta(k: usize) -> f64 {
    k as f64 * PI / 4.0
}

/// A 3x3 directional kernel: half weight on the center, half on the
/// neighbor offset by `(round(cos theta), round(sin theta))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirectionalKernel {
    pub theta: f64,
    /// `(dx, dy)` neighbor offset.
    pub offset: (i32, i32),
    /// Row-major 3x3 values; `values[1][1]` is the center.
    pub values: [[f64; 3]; 3],
}

/// Builds the initialization kernel for a canonical direction (a multiple of
/// pi/4). Any other angle is rejected.
pub fn init_directional_kernel(theta: f64) -> Result<DirectionalKernel> {
    let steps = theta / (PI / 4.0);
    let rounded = steps.round();
    if (steps - rounded).abs() > 1e-9 || !(0.0..8.0).contains(&rounded) {
        return Err(Error::Direction(theta));
    }
    let dx = theta.cos().round() as i32;
    let dy = theta.sin().round() as i32;
    let mut values = [[0.0; 3]; 3];
    values[1][1] = 0.5;
    values[(1 + dy) as usize][(1 + dx) as usize] = 0.5;
    Ok(DirectionalKernel {
        theta,
        offset: (dx, dy),
        values,
    })
}

/// One directional interaction head.
#[derive(Clone, Debug)]
pub struct StciHead<E: Element> {
    pub theta: f64,
    pub reduce: Conv2d<E>,
    pub bn: BatchNorm2d<E>,
    pub twist: Conv2d<E>,
    /// Learnable per-channel scale applied after the twist, initialized to ones.
    pub scale: Tensor<E>,
    idx_i: Vec<usize>,
    idx_j: Vec<usize>,
}

impl<E: Element> StciHead<E> {
    pub fn init(init: &ParamInit, name: &str, c_in: usize, c_r: usize, theta: f64) -> Result<Self> {
        let kernel = init_directional_kernel(theta)?;
        let reduce_w = init.kaiming(&format!("{name}.reduce.weight"), &[c_r, c_in, 1, 1], c_in);
        let mut twist_data = Vec::with_capacity(c_r * 9);
        for _ in 0..c_r {
            for row in kernel.values {
                twist_data.extend(row.iter().map(|&v| E::from_f64(v)));
            }
        }
        let twist_w = Tensor::from_vec(&[c_r, 1, 3, 3], twist_data)?.requires_grad();
        let (idx_i, idx_j) = ops::upper_tri_indices(c_r);
        Ok(StciHead {
            theta,
            reduce: Conv2d::new(reduce_w, None, 1, 0),
            bn: BatchNorm2d::identity(c_r),
            twist: Conv2d::depthwise3x3(twist_w),
            scale: Tensor::full(&[c_r], E::one()).requires_grad(),
            idx_i,
            idx_j,
        })
    }

    /// Forward pass; returns the `(C_r + P)`-channel output together with the
    /// raw interaction channels for analysis capture.
    pub fn forward(
        &self,
        tape: &Tape<E>,
        x: &Tensor<E>,
        training: bool,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let reduced = ops::conv2d(tape, x, &self.reduce)?;
        let z = ops::relu(tape, &ops::batchnorm2d(tape, &reduced, &self.bn, training)?);
        let twisted = ops::depthwise_conv3x3(tape, &z, &self.twist)?;
        let scaled = ops::mul(tape, &twisted, &self.scale)?;
        let z_bar = ops::l2_normalize_channels(tape, &z, L2_EPS)?;
        let zt_bar = ops::l2_normalize_channels(tape, &scaled, L2_EPS)?;
        let phi = ops::pair_product(tape, &z_bar, &zt_bar, &self.idx_i, &self.idx_j)?;
        let out = ops::concat_channels(tape, &[&z_bar, &phi])?;
        Ok((out, phi))
    }
}

/// Squeeze-excite style gating over interaction channels:
/// `f * sigmoid(w2 . relu(w1 . gap(f)))`, gate broadcast over H x W.
pub fn ais_forward<E: Element>(
    tape: &Tape<E>,
    f: &Tensor<E>,
    w1: &Linear<E>,
    w2: &Linear<E>,
) -> Result<Tensor<E>> {
    let squeezed = ops::global_avg_pool(tape, f)?;
    let hidden = ops::relu(tape, &ops::linear(tape, &squeezed, w1)?);
    let gate = ops::sigmoid(tape, &ops::linear(tape, &hidden, w2)?);
    ops::mul(tape, f, &gate)
}

/// Multi-head STCI: directional heads, AIS, group norm, 1x1 projection.
#[derive(Clone, Debug)]
pub struct MhStci<E: Element> {
    pub cfg: StciConfig,
    pub heads: Vec<StciHead<E>>,
    pub ais_w1: Linear<E>,
    pub ais_w2: Linear<E>,
    pub gn: GroupNorm<E>,
    pub proj: Conv2d<E>,
    pub proj_bn: BatchNorm2d<E>,
}

impl<E: Element> MhStci<E> {
    pub fn init(init: &ParamInit, name: &str, cfg: StciConfig) -> Result<Self> {
        cfg.validate()?;
        let heads = (0..cfg.heads)
            .map(|k| {
                StciHead::init(
                    init,
                    &format!("{name}.head{k}"),
                    cfg.in_channels,
                    cfg.reduced,
                    head_theta(k),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let d = cfg.concat_width();
        let d_mid = cfg.ais_mid();
        let ais_w1 = Linear {
            weight: init.kaiming(&format!("{name}.ais.w1.weight"), &[d_mid, d], d),
            bias: Some(Tensor::zeros(&[d_mid]).requires_grad()),
        };
        let ais_w2 = Linear {
            weight: init.kaiming(&format!("{name}.ais.w2.weight"), &[d, d_mid], d_mid),
            bias: Some(Tensor::zeros(&[d]).requires_grad()),
        };
        let proj_w = init.normal(
            &format!("{name}.proj.weight"),
            &[cfg.out_channels, d, 1, 1],
            0.0,
            0.01,
        );
        Ok(MhStci {
            cfg,
            heads,
            ais_w1,
            ais_w2,
            gn: GroupNorm::identity(d, cfg.gn_groups),
            proj: Conv2d::new(proj_w, None, 1, 0),
            proj_bn: BatchNorm2d::identity(cfg.out_channels),
        })
    }

    /// Forward pass. When `capture` is given it receives each head's raw
    /// interaction channels (in head order).
    pub fn forward(
        &self,
        tape: &Tape<E>,
        x: &Tensor<E>,
        training: bool,
        mut capture: Option<&mut Vec<Tensor<E>>>,
    ) -> Result<Tensor<E>> {
        if x.shape().len() != 4 || x.shape()[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "mh-stci expects {} input channels, got {:?}",
                self.cfg.in_channels,
                x.shape()
            )));
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (out, phi) = head.forward(tape, x, training)?;
            if let Some(cap) = capture.as_deref_mut() {
                cap.push(phi);
            }
            outs.push(out);
        }
        let refs: Vec<&Tensor<E>> = outs.iter().collect();
        let concat = ops::concat_channels(tape, &refs)?;
        let gated = ais_forward(tape, &concat, &self.ais_w1, &self.ais_w2)?;
        let normed = ops::groupnorm(tape, &gated, &self.gn)?;
        let projected = ops::conv2d(tape, &normed, &self.proj)?;
        ops::batchnorm2d(tape, &projected, &self.proj_bn, training)
    }
}

/// Gaussian mutual information implied by a correlation coefficient:
/// `-0.5 ln(1 - rho^2)`. Analysis utility, not on the training path.
pub fn mi_from_correlation(rho: f64) -> Result<f64> {
    if rho.abs() >= 1.0 {
        return Err(Error::DegenerateCorrelation(rho.abs()));
    }
    Ok(-0.5 * (1.0 - rho * rho).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kernel_rows(theta: f64) -> [[f64; 3]; 3] {
        init_directional_kernel(theta).unwrap().values
    }

    #[test]
    fn four_canonical_kernels_match_reference() {
        assert_eq!(
            kernel_rows(0.0),
            [[0.0, 0.0, 0.0], [0.0, 0.5, 0.5], [0.0, 0.0, 0.0]]
        );
        assert_eq!(
            kernel_rows(PI / 4.0),
            [[0.0, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]]
        );
        assert_eq!(
            kernel_rows(PI / 2.0),
            [[0.0, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.5, 0.0]]
        );
        assert_eq!(
            kernel_rows(3.0 * PI / 4.0),
            [[0.0, 0.0, 0.0], [0.0, 0.5, 0.0], [0.5, 0.0, 0.0]]
        );
    }

    #[test]
    fn kernel_offsets_cover_four_directions() {
        let offsets: Vec<(i32, i32)> = (0..4)
            .map(|k| init_directional_kernel(head_theta(k)).unwrap().offset)
            .collect();
        assert_eq!(offsets, vec![(1, 0), (1, 1), (0, 1), (-1, 1)]);
    }

    #[test]
    fn kernels_sum_to_one_with_two_nonzeros() {
        for k in 0..4 {
            let kernel = init_directional_kernel(head_theta(k)).unwrap();
            let flat: Vec<f64> = kernel.values.iter().flatten().copied().collect();
            assert_eq!(flat.iter().sum::<f64>(), 1.0);
            assert_eq!(flat.iter().filter(|&&v| v != 0.0).count(), 2);
        }
    }

    #[test]
    fn off_grid_direction_is_rejected() {
        assert!(matches!(
            init_directional_kernel(0.3),
            Err(Error::Direction(_))
        ));
    }

    #[test]
    fn dimension_arithmetic() {
        let cfg = StciConfig::new(256, 256);
        assert_eq!(cfg.pair_count(), 36);
        assert_eq!(cfg.head_width(), 44);
        assert_eq!(cfg.concat_width(), 176);
        assert_eq!(cfg.ais_mid(), 44);

        let mut small = StciConfig::new(64, 64);
        small.reduced = 4;
        assert_eq!(small.pair_count(), 10);
        assert_eq!(small.concat_width(), 4 * 14);
        // D = 56 -> D/4 = 14 < 16 -> clamped.
        assert_eq!(small.ais_mid(), 16);

        // D = 32 -> max(8, 16) = 16.
        let tiny = StciConfig {
            in_channels: 8,
            reduced: 2,
            heads: 8,
            out_channels: 8,
            gn_groups: 4,
        };
        assert_eq!(tiny.concat_width(), 8 * (2 + 3));
        assert_eq!((32usize / 4).max(16), 16);
    }

    #[test]
    fn head_output_width_is_cr_plus_p() {
        let init = ParamInit::new(1);
        let head: StciHead<f32> = StciHead::init(&init, "h", 16, 8, 0.0).unwrap();
        let tape = Tape::new();
        let mut rng = crate::tensor::rng::Rng::new(2);
        let x: Tensor<f32> = rng.normal_tensor(&[2, 16, 5, 5], 0.0, 1.0);
        let (out, phi) = head.forward(&tape, &x, true).unwrap();
        assert_eq!(out.shape(), &[2, 44, 5, 5]);
        assert_eq!(phi.shape(), &[2, 36, 5, 5]);
    }

    #[test]
    fn identity_twist_reduces_to_same_position_products() {
        let init = ParamInit::new(3);
        let head: StciHead<f64> = StciHead::init(&init, "h", 8, 4, 0.0).unwrap();
        // Force the twist to a center one-hot; s stays at ones.
        {
            let mut w = head.twist.weight.data_mut();
            for v in w.iter_mut() {
                *v = 0.0;
            }
            for c in 0..4 {
                w[c * 9 + 4] = 1.0;
            }
        }
        let tape = Tape::new();
        let mut rng = crate::tensor::rng::Rng::new(4);
        let x: Tensor<f64> = rng.normal_tensor(&[1, 8, 4, 4], 0.0, 1.0);
        let (out, phi) = head.forward(&tape, &x, true).unwrap();
        // phi[p] must equal the same-position product of normalized rows.
        let (idx_i, idx_j) = ops::upper_tri_indices(4);
        let z_bar_part = out.data();
        let hw = 16;
        for (p, (&i, &j)) in idx_i.iter().zip(&idx_j).enumerate() {
            for q in 0..hw {
                let zi = z_bar_part[i * hw + q];
                let zj = z_bar_part[j * hw + q];
                let product = phi.data()[p * hw + q];
                assert_eq!(product, zi * zj, "pair ({i},{j}) at {q}");
            }
        }
    }

    #[test]
    fn ais_zero_input_zero_bias_gives_zero_output() {
        let tape = Tape::<f64>::new();
        let init = ParamInit::new(5);
        let d = 8;
        let w1 = Linear {
            weight: init.kaiming("w1", &[4, d], d),
            bias: Some(Tensor::zeros(&[4])),
        };
        let w2 = Linear {
            weight: init.kaiming("w2", &[d, 4], 4),
            bias: Some(Tensor::zeros(&[d])),
        };
        let f = Tensor::<f64>::zeros(&[2, d, 3, 3]);
        let out = ais_forward(&tape, &f, &w1, &w2).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mh_stci_shapes_and_zero_input() {
        let init = ParamInit::new(6);
        let mut cfg = StciConfig::new(16, 32);
        cfg.reduced = 4;
        let mh: MhStci<f32> = MhStci::init(&init, "mh", cfg).unwrap();
        let tape = Tape::new();
        let x = Tensor::<f32>::zeros(&[2, 16, 6, 6]);
        let out = mh.forward(&tape, &x, true, None).unwrap();
        assert_eq!(out.shape(), &[2, 32, 6, 6]);
        // Zero input propagates to zero output under train-mode BN (beta = 0).
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mi_values_and_monotonicity() {
        assert_eq!(mi_from_correlation(0.0).unwrap(), 0.0);
        assert!((mi_from_correlation(0.5).unwrap() - 0.143841).abs() < 1e-6);
        assert!(matches!(
            mi_from_correlation(1.0),
            Err(Error::DegenerateCorrelation(_))
        ));
        let mut last = -1.0;
        for step in 0..100 {
            let rho = step as f64 / 101.0;
            let mi = mi_from_correlation(rho).unwrap();
            assert!(mi > last, "mi must increase in |rho|");
            last = mi;
        }
    }

    #[test]
    fn twisted_head_beats_identity_twist_on_period_two_stripes() {
        // Two channels carrying anti-phase period-2 vertical stripes: the
        // same-position product of the pair is zero, the one-pixel twist
        // aligns the peaks.
        let size = 8;
        let mut data = vec![0.0f64; 2 * size * size];
        for y in 0..size {
            for x in 0..size {
                let even = x % 2 == 0;
                data[y * size + x] = if even { 1.0 } else { 0.0 };
                data[size * size + y * size + x] = if even { 0.0 } else { 1.0 };
            }
        }
        let x = Tensor::from_vec(&[1, 2, size, size], data).unwrap();

        let init = ParamInit::new(7);
        let head: StciHead<f64> = StciHead::init(&init, "h", 2, 2, 0.0).unwrap();
        // Pass-through reduction; eval-mode BN with fresh stats is identity.
        {
            let mut w = head.reduce.weight.data_mut();
            w.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        let tape = Tape::new();
        let (_, phi_twisted) = head.forward(&tape, &x, false).unwrap();
        let mean_twisted: f64 =
            phi_twisted.data().iter().map(|v| v.abs()).sum::<f64>() / phi_twisted.len() as f64;

        {
            let mut w = head.twist.weight.data_mut();
            for v in w.iter_mut() {
                *v = 0.0;
            }
            w[4] = 1.0;
            w[13] = 1.0;
        }
        let (_, phi_identity) = head.forward(&tape, &x, false).unwrap();
        let mean_identity: f64 =
            phi_identity.data().iter().map(|v| v.abs()).sum::<f64>() / phi_identity.len() as f64;

        assert!(
            mean_twisted > mean_identity,
            "twisted {mean_twisted} vs identity {mean_identity}"
        );
    }
}
