//! Max pooling (3x3, stride 2, padding 1) and global average pooling.

use crate::error::Result;
use crate::tensor::tape::{InputSlot, Tape, TapeOp};
use crate::tensor::{Dims4, Element, Tensor};

struct MaxPoolOp<E: Element> {
    x: InputSlot<E>,
    /// Flat input index of each output's winner; ties break to the first
    /// window position in scan order.
    argmax: Vec<u32>,
}

impl<E: Element> TapeOp<E> for MaxPoolOp<E> {
    fn backward(&self, g: &[E]) {
        self.x.add_with(|dx| {
            for (out_i, &src) in self.argmax.iter().enumerate() {
                dx[src as usize] = dx[src as usize] + g[out_i];
            }
        });
    }
}

/// 3x3 max pooling, stride 2, zero-free padding 1 (padded cells never win).
pub fn maxpool3x3s2<E: Element>(tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    let d = Dims4::of(x)?;
    let out_h = super::conv::conv_out_extent(d.h, 3, 2, 1)?;
    let out_w = super::conv::conv_out_extent(d.w, 3, 2, 1)?;
    let hw = d.h * d.w;
    let out_hw = out_h * out_w;
    let mut out_data = vec![E::zero(); d.n * d.c * out_hw];
    let mut argmax = vec![0u32; d.n * d.c * out_hw];
    {
        let xd = x.data();
        for img in 0..d.n {
            for ch in 0..d.c {
                let base = (img * d.c + ch) * hw;
                let obase = (img * d.c + ch) * out_hw;
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut best: Option<(E, usize)> = None;
                        for ky in 0..3usize {
                            let iy = (oy * 2 + ky) as isize - 1;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let ix = (ox * 2 + kx) as isize - 1;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let idx = base + iy as usize * d.w + ix as usize;
                                let v = xd[idx];
                                // Strict > keeps the first maximum in scan order.
                                if best.map_or(true, |(bv, _)| v > bv) {
                                    best = Some((v, idx));
                                }
                            }
                        }
                        let (v, idx) = best.expect("window always overlaps the input");
                        out_data[obase + oy * out_w + ox] = v;
                        argmax[obase + oy * out_w + ox] = idx as u32;
                    }
                }
            }
        }
    }
    let mut out = Tensor::from_vec(&[d.n, d.c, out_h, out_w], out_data)?;
    if x.needs_grad() {
        tape.record(
            &mut out,
            Box::new(MaxPoolOp {
                x: InputSlot::of(x),
                argmax,
            }),
        );
    }
    Ok(out)
}

struct GapOp<E: Element> {
    x: InputSlot<E>,
    n: usize,
    c: usize,
    hw: usize,
}

impl<E: Element> TapeOp<E> for GapOp<E> {
    fn backward(&self, g: &[E]) {
        let scale = E::one() / E::from_f64(self.hw as f64);
        self.x.add_with(|dx| {
            for img in 0..self.n {
                for ch in 0..self.c {
                    let gv = g[img * self.c + ch] * scale;
                    let base = (img * self.c + ch) * self.hw;
                    for p in 0..self.hw {
                        dx[base + p] = dx[base + p] + gv;
                    }
                }
            }
        });
    }
}

/// Global average pooling: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<E: Element>(tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    let d = Dims4::of(x)?;
    let hw = d.h * d.w;
    let mut out_data = vec![E::zero(); d.n * d.c];
    {
        let xd = x.data();
        for img in 0..d.n {
            for ch in 0..d.c {
                let base = (img * d.c + ch) * hw;
                let mut acc = E::zero();
                for p in 0..hw {
                    acc = acc + xd[base + p];
                }
                out_data[img * d.c + ch] = acc / E::from_f64(hw as f64);
            }
        }
    }
    let mut out = Tensor::from_vec(&[d.n, d.c], out_data)?;
    if x.needs_grad() {
        tape.record(
            &mut out,
            Box::new(GapOp {
                x: InputSlot::of(x),
                n: d.n,
                c: d.c,
                hw,
            }),
        );
    }
    Ok(out)
}
