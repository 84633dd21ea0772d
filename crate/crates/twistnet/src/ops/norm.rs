//! Batch/group normalization and channel-wise l2 normalization.

use crate::error::{Error, Result};
use crate::tensor::tape::{InputSlot, Tape, TapeOp};
use crate::tensor::{DataCell, Dims4, Element, Tensor};

/// Batch normalization state: affine parameters plus running statistics.
///
/// Running stats are plain (non-gradient) tensors updated in train mode with
/// momentum 0.1 (unbiased variance); eval mode is a pure affine map of the
/// stored statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
    pub eps: f64,
    pub momentum: f64,
}

impl<E: Element> BatchNorm2d<E> {
    /// Fresh statistics (mean 0, var 1), gamma 1, beta 0.
    pub fn identity(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::full(&[channels], E::one()).requires_grad(),
            beta: Tensor::zeros(&[channels]).requires_grad(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], E::one()),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

struct NormBackward<E: Element> {
    xhat: Vec<E>,
    /// One inv-std per normalization group (channel for BN, n*group for GN).
    inv_std: Vec<E>,
    gamma_data: DataCell<E>,
    x: InputSlot<E>,
    gamma: InputSlot<E>,
    beta: InputSlot<E>,
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    /// Train-mode BN/GN gradients carry the mean/variance correction terms;
    /// eval-mode BN treats the statistics as constants.
    stats_depend_on_x: bool,
    /// True for BN (stats per channel across the batch); false for GN
    /// (stats per sample per group).
    per_channel_stats: bool,
}

impl<E: Element> TapeOp<E> for NormBackward<E> {
    fn backward(&self, g: &[E]) {
        let (n, c, hw) = (self.n, self.c, self.hw);
        let gd = self.gamma_data.borrow();

        if self.gamma.wants_grad() {
            self.gamma.add_with(|buf| {
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * hw;
                        let mut acc = E::zero();
                        for p in 0..hw {
                            acc = acc + g[base + p] * self.xhat[base + p];
                        }
                        buf[ch] = buf[ch] + acc;
                    }
                }
            });
        }
        if self.beta.wants_grad() {
            self.beta.add_with(|buf| {
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * hw;
                        let mut acc = E::zero();
                        for p in 0..hw {
                            acc = acc + g[base + p];
                        }
                        buf[ch] = buf[ch] + acc;
                    }
                }
            });
        }
        if !self.x.wants_grad() {
            return;
        }

        if !self.stats_depend_on_x {
            // Affine map: dx = g * gamma * inv_std (inv_std per channel).
            let mut dx = vec![E::zero(); g.len()];
            for img in 0..n {
                for ch in 0..c {
                    let base = (img * c + ch) * hw;
                    let f = gd[ch] * self.inv_std[ch];
                    for p in 0..hw {
                        dx[base + p] = g[base + p] * f;
                    }
                }
            }
            self.x.add(&dx);
            return;
        }

        // Train mode: dx = inv_std/m * (m*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
        // where sums run over each normalization group.
        let mut dx = vec![E::zero(); g.len()];
        if self.per_channel_stats {
            let m = E::from_f64((n * hw) as f64);
            for ch in 0..c {
                let mut s1 = E::zero();
                let mut s2 = E::zero();
                for img in 0..n {
                    let base = (img * c + ch) * hw;
                    for p in 0..hw {
                        let dxh = g[base + p] * gd[ch];
                        s1 = s1 + dxh;
                        s2 = s2 + dxh * self.xhat[base + p];
                    }
                }
                let inv = self.inv_std[ch];
                for img in 0..n {
                    let base = (img * c + ch) * hw;
                    for p in 0..hw {
                        let dxh = g[base + p] * gd[ch];
                        dx[base + p] =
                            inv / m * (m * dxh - s1 - self.xhat[base + p] * s2);
                    }
                }
            }
        } else {
            let cg = c / self.groups;
            let m = E::from_f64((cg * hw) as f64);
            for img in 0..n {
                for grp in 0..self.groups {
                    let mut s1 = E::zero();
                    let mut s2 = E::zero();
                    for ch in grp * cg..(grp + 1) * cg {
                        let base = (img * c + ch) * hw;
                        for p in 0..hw {
                            let dxh = g[base + p] * gd[ch];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * self.xhat[base + p];
                        }
                    }
                    let inv = self.inv_std[img * self.groups + grp];
                    for ch in grp * cg..(grp + 1) * cg {
                        let base = (img * c + ch) * hw;
                        for p in 0..hw {
                            let dxh = g[base + p] * gd[ch];
                            dx[base + p] =
                                inv / m * (m * dxh - s1 - self.xhat[base + p] * s2);
                        }
                    }
                }
            }
        }
        self.x.add(&dx);
    }
}

/// Batch normalization over `N x H x W` per channel (train mode) or the
/// running statistics (eval mode).
pub fn batchnorm2d<E: Element>(
    tape: &Tape<E>,
    x: &Tensor<E>,
    bn: &BatchNorm2d<E>,
    training: bool,
) -> Result<Tensor<E>> {
    let d = Dims4::of(x)?;
    if d.c != bn.channels() {
        return Err(Error::Shape(format!(
            "batchnorm over {} channels applied to {}",
            bn.channels(),
            d.c
        )));
    }
    let hw = d.h * d.w;
    let m = d.n * hw;
    let eps = E::from_f64(bn.eps);

    let (mean, var): (Vec<E>, Vec<E>) = if training {
        let xd = x.data();
        let mut mean = vec![E::zero(); d.c];
        let mut var = vec![E::zero(); d.c];
        for ch in 0..d.c {
            let mut acc = E::zero();
            for img in 0..d.n {
                let base = (img * d.c + ch) * hw;
                for p in 0..hw {
                    acc = acc + xd[base + p];
                }
            }
            let mu = acc / E::from_f64(m as f64);
            let mut vacc = E::zero();
            for img in 0..d.n {
                let base = (img * d.c + ch) * hw;
                for p in 0..hw {
                    let dv = xd[base + p] - mu;
                    vacc = vacc + dv * dv;
                }
            }
            mean[ch] = mu;
            var[ch] = vacc / E::from_f64(m as f64);
        }
        // Update running stats (unbiased variance, matching common practice).
        let mom = E::from_f64(bn.momentum);
        let keep = E::one() - mom;
        let unbias = if m > 1 {
            E::from_f64(m as f64 / (m as f64 - 1.0))
        } else {
            E::one()
        };
        let mut rm = bn.running_mean.data_mut();
        let mut rv = bn.running_var.data_mut();
        for ch in 0..d.c {
            rm[ch] = keep * rm[ch] + mom * mean[ch];
            rv[ch] = keep * rv[ch] + mom * var[ch] * unbias;
        }
        (mean, var)
    } else {
        (
            bn.running_mean.data().clone(),
            bn.running_var.data().clone(),
        )
    };

    let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![E::zero(); d.numel()];
    let mut out_data = vec![E::zero(); d.numel()];
    {
        let xd = x.data();
        let gd = bn.gamma.data();
        let bd = bn.beta.data();
        for img in 0..d.n {
            for ch in 0..d.c {
                let base = (img * d.c + ch) * hw;
                let (mu, inv, ga, be) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for p in 0..hw {
                    let h = (xd[base + p] - mu) * inv;
                    xhat[base + p] = h;
                    out_data[base + p] = ga * h + be;
                }
            }
        }
    }

    let mut out = Tensor::from_vec(x.shape(), out_data)?;
    if x.needs_grad() || bn.gamma.needs_grad() || bn.beta.needs_grad() {
        let op = NormBackward {
            xhat,
            inv_std,
            gamma_data: bn.gamma.data_cell(),
            x: InputSlot::of(x),
            gamma: InputSlot::of(&bn.gamma),
            beta: InputSlot::of(&bn.beta),
            n: d.n,
            c: d.c,
            hw,
            groups: d.c,
            stats_depend_on_x: training,
            per_channel_stats: true,
        };
        tape.record(&mut out, Box::new(op));
    }
    Ok(out)
}

/// Group normalization parameters.
#[derive(Clone, Debug)]
pub struct GroupNorm<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub groups: usize,
    pub eps: f64,
}

impl<E: Element> GroupNorm<E> {
    pub fn identity(channels: usize, groups: usize) -> Self {
        GroupNorm {
            gamma: Tensor::full(&[channels], E::one()).requires_grad(),
            beta: Tensor::zeros(&[channels]).requires_grad(),
            groups,
            eps: 1e-5,
        }
    }
}

/// Group normalization: statistics over `(C/G) x H x W` per sample per group.
pub fn groupnorm<E: Element>(tape: &Tape<E>, x: &Tensor<E>, gn: &GroupNorm<E>) -> Result<Tensor<E>> {
    let d = Dims4::of(x)?;
    if gn.groups == 0 || d.c % gn.groups != 0 {
        return Err(Error::Groups {
            groups: gn.groups,
            channels: d.c,
        });
    }
    if gn.gamma.len() != d.c {
        return Err(Error::Shape(format!(
            "groupnorm affine over {} channels applied to {}",
            gn.gamma.len(),
            d.c
        )));
    }
    let hw = d.h * d.w;
    let cg = d.c / gn.groups;
    let m = cg * hw;
    let eps = E::from_f64(gn.eps);

    let mut inv_std = vec![E::zero(); d.n * gn.groups];
    let mut xhat = vec![E::zero(); d.numel()];
    let mut out_data = vec![E::zero(); d.numel()];
    {
        let xd = x.data();
        let gd = gn.gamma.data();
        let bd = gn.beta.data();
        for img in 0..d.n {
            for grp in 0..gn.groups {
                let mut acc = E::zero();
                for ch in grp * cg..(grp + 1) * cg {
                    let base = (img * d.c + ch) * hw;
                    for p in 0..hw {
                        acc = acc + xd[base + p];
                    }
                }
                let mu = acc / E::from_f64(m as f64);
                let mut vacc = E::zero();
                for ch in grp * cg..(grp + 1) * cg {
                    let base = (img * d.c + ch) * hw;
                    for p in 0..hw {
                        let dv = xd[base + p] - mu;
                        vacc = vacc + dv * dv;
                    }
                }
                let var = vacc / E::from_f64(m as f64);
                let inv = E::one() / (var + eps).sqrt();
                inv_std[img * gn.groups + grp] = inv;
                for ch in grp * cg..(grp + 1) * cg {
                    let base = (img * d.c + ch) * hw;
                    for p in 0..hw {
                        let h = (xd[base + p] - mu) * inv;
                        xhat[base + p] = h;
                        out_data[base + p] = gd[ch] * h + bd[ch];
                    }
                }
            }
        }
    }

    let mut out = Tensor::from_vec(x.shape(), out_data)?;
    if x.needs_grad() || gn.gamma.needs_grad() || gn.beta.needs_grad() {
        let op = NormBackward {
            xhat,
            inv_std,
            gamma_data: gn.gamma.data_cell(),
            x: InputSlot::of(x),
            gamma: InputSlot::of(&gn.gamma),
            beta: InputSlot::of(&gn.beta),
            n: d.n,
            c: d.c,
            hw,
            groups: gn.groups,
            stats_depend_on_x: true,
            per_channel_stats: false,
        };
        tape.record(&mut out, Box::new(op));
    }
    Ok(out)
}

// ── channel-wise l2 normalization ────────────────────────────────────

struct L2NormOp<E: Element> {
    x_data: DataCell<E>,
    norms: Vec<E>,
    x: InputSlot<E>,
    n: usize,
    c: usize,
    hw: usize,
    eps: E,
}

impl<E: Element> TapeOp<E> for L2NormOp<E> {
    fn backward(&self, g: &[E]) {
        let xd = self.x_data.borrow();
        let (n, c, hw) = (self.n, self.c, self.hw);
        let mut dx = vec![E::zero(); g.len()];
        for img in 0..n {
            for p in 0..hw {
                let r = self.norms[img * hw + p];
                let denom = r + self.eps;
                let mut dot = E::zero();
                for ch in 0..c {
                    let i = (img * c + ch) * hw + p;
                    dot = dot + g[i] * xd[i];
                }
                let corr = if r > E::zero() {
                    dot / (r * denom * denom)
                } else {
                    E::zero()
                };
                for ch in 0..c {
                    let i = (img * c + ch) * hw + p;
                    dx[i] = g[i] / denom - xd[i] * corr;
                }
            }
        }
        self.x.add(&dx);
    }
}

/// Channel-wise l2 normalization at each spatial location:
/// `out(n,.,h,w) = x(n,.,h,w) / (||x(n,.,h,w)||_2 + eps)`.
pub fn l2_normalize_channels<E: Element>(tape: &Tape<E>, x: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
    let d = Dims4::of(x)?;
    let hw = d.h * d.w;
    let e = E::from_f64(eps);
    let mut norms = vec![E::zero(); d.n * hw];
    let mut out_data = vec![E::zero(); d.numel()];
    {
        let xd = x.data();
        for img in 0..d.n {
            for p in 0..hw {
                let mut acc = E::zero();
                for ch in 0..d.c {
                    let v = xd[(img * d.c + ch) * hw + p];
                    acc = acc + v * v;
                }
                let r = acc.sqrt();
                norms[img * hw + p] = r;
                let denom = r + e;
                for ch in 0..d.c {
                    let i = (img * d.c + ch) * hw + p;
                    out_data[i] = xd[i] / denom;
                }
            }
        }
    }
    let mut out = Tensor::from_vec(x.shape(), out_data)?;
    if x.needs_grad() {
        let op = L2NormOp {
            x_data: x.data_cell(),
            norms,
            x: InputSlot::of(x),
            n: d.n,
            c: d.c,
            hw,
            eps: e,
        };
        tape.record(&mut out, Box::new(op));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_bn_standardizes_per_channel() {
        let tape = Tape::<f64>::new();
        let mut rng = crate::tensor::rng::Rng::new(5);
        let x: Tensor<f64> = rng.normal_tensor(&[4, 3, 6, 6], 2.0, 3.0);
        let bn = BatchNorm2d::identity(3);
        let y = batchnorm2d(&tape, &x, &bn, true).unwrap();
        let yd = y.data();
        let hw = 36;
        for ch in 0..3 {
            let mut mean = 0.0;
            let mut count = 0.0;
            for img in 0..4 {
                for p in 0..hw {
                    mean += yd[(img * 3 + ch) * hw + p];
                    count += 1.0;
                }
            }
            mean /= count;
            let mut var = 0.0;
            for img in 0..4 {
                for p in 0..hw {
                    let v = yd[(img * 3 + ch) * hw + p] - mean;
                    var += v * v;
                }
            }
            var /= count;
            assert!(mean.abs() < 1e-4, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ch} var {var}");
        }
    }

    #[test]
    fn eval_bn_is_affine_in_running_stats() {
        let tape = Tape::<f64>::new();
        let bn = BatchNorm2d::<f64>::identity(2);
        bn.running_mean.data_mut().copy_from_slice(&[1.0, -1.0]);
        bn.running_var.data_mut().copy_from_slice(&[4.0, 0.25]);
        let x = Tensor::from_vec(&[1, 2, 1, 2], vec![3.0, 5.0, 0.0, -2.0]).unwrap();
        let y = batchnorm2d(&tape, &x, &bn, false).unwrap();
        let inv0 = 1.0 / (4.0f64 + 1e-5).sqrt();
        let inv1 = 1.0 / (0.25f64 + 1e-5).sqrt();
        let expect = [
            (3.0 - 1.0) * inv0,
            (5.0 - 1.0) * inv0,
            (0.0 + 1.0) * inv1,
            (-2.0 + 1.0) * inv1,
        ];
        for (a, b) in y.data().iter().zip(expect) {
            assert_eq!(*a, b, "eval BN must equal the closed-form affine map");
        }
    }

    #[test]
    fn groupnorm_with_g_equals_c_is_instance_norm() {
        let tape = Tape::<f64>::new();
        let mut rng = crate::tensor::rng::Rng::new(6);
        let x: Tensor<f64> = rng.normal_tensor(&[2, 4, 5, 5], 1.0, 2.0);
        let gn = GroupNorm::identity(4, 4);
        let y = groupnorm(&tape, &x, &gn).unwrap();
        let yd = y.data();
        for img in 0..2 {
            for ch in 0..4 {
                let base = (img * 4 + ch) * 25;
                let mean: f64 = yd[base..base + 25].iter().sum::<f64>() / 25.0;
                let var: f64 =
                    yd[base..base + 25].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 25.0;
                assert!(mean.abs() < 1e-6);
                assert!((var - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn groups_must_divide_channels() {
        let tape = Tape::<f64>::new();
        let x = Tensor::<f64>::zeros(&[1, 6, 2, 2]);
        let gn = GroupNorm::identity(6, 4);
        assert!(matches!(
            groupnorm(&tape, &x, &gn),
            Err(Error::Groups { groups: 4, channels: 6 })
        ));
    }

    #[test]
    fn l2norm_constant_vector_hits_inverse_sqrt_c() {
        let tape = Tape::<f64>::new();
        let x = Tensor::full(&[1, 8, 1, 1], 0.7);
        let y = l2_normalize_channels(&tape, &x, 1e-6).unwrap();
        let expect = 1.0 / 8.0f64.sqrt();
        for &v in y.data().iter() {
            assert!((v - expect).abs() < 1e-5, "{v} vs {expect}");
        }
    }

    #[test]
    fn l2norm_zero_vector_stays_zero() {
        let tape = Tape::<f64>::new();
        let x = Tensor::<f64>::zeros(&[1, 4, 2, 2]);
        let y = l2_normalize_channels(&tape, &x, 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn l2norm_output_norm_is_one_for_large_inputs() {
        let tape = Tape::<f64>::new();
        let mut rng = crate::tensor::rng::Rng::new(7);
        let x: Tensor<f64> = rng.normal_tensor(&[2, 8, 4, 4], 0.0, 1.0);
        let y = l2_normalize_channels(&tape, &x, 1e-6).unwrap();
        let yd = y.data();
        for img in 0..2 {
            for p in 0..16 {
                let mut acc = 0.0;
                for ch in 0..8 {
                    let v = yd[(img * 8 + ch) * 16 + p];
                    acc += v * v;
                }
                let norm = acc.sqrt();
                assert!(norm <= 1.0 + 1e-9 && norm >= 1.0 - 1e-4, "norm {norm}");
            }
        }
    }
}
