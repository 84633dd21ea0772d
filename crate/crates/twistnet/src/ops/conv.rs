//! 2-d convolutions: dense cross-correlation via im2col + GEMM, and the
//! direct depthwise 3x3 used by the twist.
//!
//! Convolution here means cross-correlation (no kernel flip) with zero
//! padding. The im2col row order is `(channel, ky, kx)`, matching the
//! flattened weight layout, and the GEMM accumulates the inner index as a
//! single ascending chain, so the `f64` path reproduces the naive six-loop
//! reference exactly.

use crate::error::{Error, Result};
use crate::tensor::tape::{InputSlot, Tape, TapeOp};
use crate::tensor::{DataCell, Dims4, Element, Tensor};

/// Convolution parameters: weight `[C_out, C_in, k, k]` (depthwise:
/// `[C, 1, 3, 3]`), optional bias `[C_out]`, stride, and zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
}

impl<E: Element> Conv2d<E> {
    pub fn new(weight: Tensor<E>, bias: Option<Tensor<E>>, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight,
            bias,
            stride,
            padding,
            depthwise: false,
        }
    }

    pub fn depthwise3x3(weight: Tensor<E>) -> Self {
        Conv2d {
            weight,
            bias: None,
            stride: 1,
            padding: 1,
            depthwise: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// `floor((extent + 2 pad - k) / stride) + 1`, the zero-padded output extent.
pub fn conv_out_extent(extent: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = extent + 2 * padding;
    if padded < k {
        return Err(Error::Geometry(format!(
            "kernel {k} larger than padded extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn resolve_geometry<E: Element>(x: &Tensor<E>, conv: &Conv2d<E>) -> Result<ConvGeometry> {
    let d = Dims4::of(x)?;
    let ws = conv.weight.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::Shape(format!(
            "conv weight must be [c_out, c_in, k, k], got {:?}",
            ws
        )));
    }
    let (c_out, wc_in, k) = (ws[0], ws[1], ws[2]);
    if conv.depthwise {
        if wc_in != 1 || c_out != d.c {
            return Err(Error::Shape(format!(
                "depthwise weight {:?} incompatible with {} channels",
                ws, d.c
            )));
        }
    } else if wc_in != d.c {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {}",
            wc_in, d.c
        )));
    }
    if conv.stride == 0 {
        return Err(Error::Geometry("stride must be positive".into()));
    }
    if let Some(b) = &conv.bias {
        if b.shape() != [c_out] {
            return Err(Error::Shape(format!(
                "conv bias {:?} vs {} output channels",
                b.shape(),
                c_out
            )));
        }
    }
    let out_h = conv_out_extent(d.h, k, conv.stride, conv.padding)?;
    let out_w = conv_out_extent(d.w, k, conv.stride, conv.padding)?;
    Ok(ConvGeometry {
        n: d.n,
        c_in: d.c,
        c_out,
        h: d.h,
        w: d.w,
        k,
        stride: conv.stride,
        padding: conv.padding,
        out_h,
        out_w,
    })
}

/// Unfolds the input into a `[c_in k^2, n out_h out_w]` matrix.
fn im2col<E: Element>(x: &[E], g: &ConvGeometry) -> Vec<E> {
    let k_rows = g.c_in * g.k * g.k;
    let n_cols = g.n * g.out_h * g.out_w;
    let mut cols = vec![E::zero(); k_rows * n_cols];
    let in_hw = g.h * g.w;
    let out_hw = g.out_h * g.out_w;
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst_row = &mut cols[row * n_cols..(row + 1) * n_cols];
                for img in 0..g.n {
                    let src_img = &x[(img * g.c_in + c) * in_hw..(img * g.c_in + c + 1) * in_hw];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue; // stays zero
                        }
                        let src_y = &src_img[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst = img * out_hw + oy * g.out_w;
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[dst + ox] = src_y[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Accumulates a `[c_in k^2, n out_h out_w]` gradient matrix back into
/// input-image layout. Scatter order is fixed, so replays are bit-identical.
fn col2im<E: Element>(dcols: &[E], g: &ConvGeometry, dx: &mut [E]) {
    let n_cols = g.n * g.out_h * g.out_w;
    let in_hw = g.h * g.w;
    let out_hw = g.out_h * g.out_w;
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src_row = &dcols[row * n_cols..(row + 1) * n_cols];
                for img in 0..g.n {
                    let dst_img =
                        &mut dx[(img * g.c_in + c) * in_hw..(img * g.c_in + c + 1) * in_hw];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = img * out_hw + oy * g.out_w;
                        let dst_y = &mut dst_img[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_y[ix as usize] = dst_y[ix as usize] + src_row[src + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct ConvOp<E: Element> {
    x_data: DataCell<E>,
    w_data: DataCell<E>,
    x: InputSlot<E>,
    w: InputSlot<E>,
    b: Option<InputSlot<E>>,
    geom: ConvGeometry,
}

impl<E: Element> TapeOp<E> for ConvOp<E> {
    fn backward(&self, grad: &[E]) {
        let g = &self.geom;
        let out_hw = g.out_h * g.out_w;
        let n_cols = g.n * out_hw;
        let k_rows = g.c_in * g.k * g.k;

        // Regroup upstream grad from [n, c_out, oh, ow] to [c_out, n oh ow].
        let mut gmat = vec![E::zero(); g.c_out * n_cols];
        for img in 0..g.n {
            for co in 0..g.c_out {
                let src = (img * g.c_out + co) * out_hw;
                let dst = co * n_cols + img * out_hw;
                gmat[dst..dst + out_hw].copy_from_slice(&grad[src..src + out_hw]);
            }
        }

        if self.w.wants_grad() || self.x.wants_grad() {
            // The unfolded input is recomputed here rather than kept alive
            // from the forward pass; it is the largest buffer involved.
            let cols = {
                let xd = self.x_data.borrow();
                im2col(&xd, g)
            };
            if self.w.wants_grad() {
                let mut dw = vec![E::zero(); g.c_out * k_rows];
                E::gemm_nt(g.c_out, n_cols, k_rows, &gmat, &cols, &mut dw);
                self.w.add(&dw);
            }
            if self.x.wants_grad() {
                let wt = {
                    let wd = self.w_data.borrow();
                    let mut wt = vec![E::zero(); k_rows * g.c_out];
                    for co in 0..g.c_out {
                        for r in 0..k_rows {
                            wt[r * g.c_out + co] = wd[co * k_rows + r];
                        }
                    }
                    wt
                };
                let mut dcols = vec![E::zero(); k_rows * n_cols];
                E::gemm_nn(k_rows, g.c_out, n_cols, &wt, &gmat, &mut dcols);
                self.x.add_with(|dx| col2im(&dcols, g, dx));
            }
        }
        if let Some(b) = &self.b {
            b.add_with(|buf| {
                for co in 0..g.c_out {
                    let row = &gmat[co * n_cols..(co + 1) * n_cols];
                    let mut acc = E::zero();
                    for &v in row {
                        acc = acc + v;
                    }
                    buf[co] = buf[co] + acc;
                }
            });
        }
    }
}

/// Dense 2-d cross-correlation with zero padding, forward and backward.
pub fn conv2d<E: Element>(tape: &Tape<E>, x: &Tensor<E>, conv: &Conv2d<E>) -> Result<Tensor<E>> {
    if conv.depthwise {
        return depthwise_conv3x3(tape, x, conv);
    }
    let g = resolve_geometry(x, conv)?;
    let out_hw = g.out_h * g.out_w;
    let n_cols = g.n * out_hw;
    let k_rows = g.c_in * g.k * g.k;

    let cols = {
        let xd = x.data();
        im2col(&xd, &g)
    };
    let mut out_mat = vec![E::zero(); g.c_out * n_cols];
    {
        let wd = conv.weight.data();
        E::gemm_nn(g.c_out, k_rows, n_cols, &wd, &cols, &mut out_mat);
    }

    let mut out_data = vec![E::zero(); g.n * g.c_out * out_hw];
    let bias = conv.bias.as_ref().map(|b| b.data().clone());
    for img in 0..g.n {
        for co in 0..g.c_out {
            let src = co * n_cols + img * out_hw;
            let dst = (img * g.c_out + co) * out_hw;
            match &bias {
                Some(b) => {
                    let bv = b[co];
                    for (d, &s) in out_data[dst..dst + out_hw]
                        .iter_mut()
                        .zip(&out_mat[src..src + out_hw])
                    {
                        *d = s + bv;
                    }
                }
                None => out_data[dst..dst + out_hw].copy_from_slice(&out_mat[src..src + out_hw]),
            }
        }
    }

    let mut out = Tensor::from_vec(&[g.n, g.c_out, g.out_h, g.out_w], out_data)?;
    let needs = x.needs_grad()
        || conv.weight.needs_grad()
        || conv.bias.as_ref().is_some_and(|b| b.needs_grad());
    if needs {
        let op = ConvOp {
            x_data: x.data_cell(),
            w_data: conv.weight.data_cell(),
            x: InputSlot::of(x),
            w: InputSlot::of(&conv.weight),
            b: conv.bias.as_ref().map(InputSlot::of),
            geom: g,
        };
        tape.record(&mut out, Box::new(op));
    }
    Ok(out)
}

// ── depthwise 3x3 ────────────────────────────────────────────────────

struct DepthwiseOp<E: Element> {
    x_data: DataCell<E>,
    w_data: DataCell<E>,
    x: InputSlot<E>,
    w: InputSlot<E>,
    n: usize,
    c: usize,
    h: usize,
    w_ext: usize,
}

impl<E: Element> TapeOp<E> for DepthwiseOp<E> {
    fn backward(&self, grad: &[E]) {
        let (n, c, h, w) = (self.n, self.c, self.h, self.w_ext);
        let hw = h * w;
        if self.w.wants_grad() {
            let xd = self.x_data.borrow();
            self.w.add_with(|dw| {
                for img in 0..n {
                    for ch in 0..c {
                        let x_map = &xd[(img * c + ch) * hw..(img * c + ch + 1) * hw];
                        let g_map = &grad[(img * c + ch) * hw..(img * c + ch + 1) * hw];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let mut acc = E::zero();
                                for y in 0..h {
                                    let iy = y as isize + ky as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for x in 0..w {
                                        let ix = x as isize + kx as isize - 1;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        acc = acc
                                            + g_map[y * w + x] * x_map[iy as usize * w + ix as usize];
                                    }
                                }
                                let wi = (ch * 3 + ky) * 3 + kx;
                                dw[wi] = dw[wi] + acc;
                            }
                        }
                    }
                }
            });
        }
        if self.x.wants_grad() {
            let wd = self.w_data.borrow();
            self.x.add_with(|dx| {
                for img in 0..n {
                    for ch in 0..c {
                        let dx_map = &mut dx[(img * c + ch) * hw..(img * c + ch + 1) * hw];
                        let g_map = &grad[(img * c + ch) * hw..(img * c + ch + 1) * hw];
                        for y in 0..h {
                            for x in 0..w {
                                let gv = g_map[y * w + x];
                                for ky in 0..3 {
                                    let iy = y as isize + ky as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3 {
                                        let ix = x as isize + kx as isize - 1;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let wi = (ch * 3 + ky) * 3 + kx;
                                        let di = iy as usize * w + ix as usize;
                                        dx_map[di] = dx_map[di] + wd[wi] * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
    }
}

/// Depthwise 3x3, stride 1, padding 1, no bias: each channel is convolved
/// with its own kernel and the spatial shape is preserved.
pub fn depthwise_conv3x3<E: Element>(
    tape: &Tape<E>,
    x: &Tensor<E>,
    conv: &Conv2d<E>,
) -> Result<Tensor<E>> {
    let d = Dims4::of(x)?;
    let ws = conv.weight.shape();
    if ws != [d.c, 1, 3, 3] {
        return Err(Error::Shape(format!(
            "depthwise weight must be [{}, 1, 3, 3], got {:?}",
            d.c, ws
        )));
    }
    if conv.stride != 1 || conv.padding != 1 || conv.bias.is_some() {
        return Err(Error::Geometry(
            "depthwise twist requires stride 1, padding 1, no bias".into(),
        ));
    }
    let hw = d.h * d.w;
    let mut out_data = vec![E::zero(); d.numel()];
    {
        let xd = x.data();
        let wd = conv.weight.data();
        for img in 0..d.n {
            for ch in 0..d.c {
                let x_map = &xd[(img * d.c + ch) * hw..(img * d.c + ch + 1) * hw];
                let o_map = &mut out_data[(img * d.c + ch) * hw..(img * d.c + ch + 1) * hw];
                let kernel = &wd[ch * 9..ch * 9 + 9];
                for y in 0..d.h {
                    for x_pos in 0..d.w {
                        let mut acc = E::zero();
                        for ky in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = x_pos as isize + kx as isize - 1;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                acc = acc
                                    + kernel[ky * 3 + kx]
                                        * x_map[iy as usize * d.w + ix as usize];
                            }
                        }
                        o_map[y * d.w + x_pos] = acc;
                    }
                }
            }
        }
    }
    let mut out = Tensor::from_vec(x.shape(), out_data)?;
    if x.needs_grad() || conv.weight.needs_grad() {
        let op = DepthwiseOp {
            x_data: x.data_cell(),
            w_data: conv.weight.data_cell(),
            x: InputSlot::of(x),
            w: InputSlot::of(&conv.weight),
            n: d.n,
            c: d.c,
            h: d.h,
            w_ext: d.w,
        };
        tape.record(&mut out, Box::new(op));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_identity_permutes_channels() {
        // weight rows pick channel 1 then channel 0.
        let tape = Tape::<f64>::new();
        let x = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2, 1, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let conv = Conv2d::new(w, None, 1, 0);
        let y = conv2d(&tape, &x, &conv).unwrap();
        assert_eq!(*y.data(), vec![3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_fn(&[2, 3, 5, 5], |i| i as f64);
        let w = Tensor::<f64>::zeros(&[4, 3, 3, 3]);
        let conv = Conv2d::new(w, None, 1, 1);
        let y = conv2d(&tape, &x, &conv).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_larger_than_padded_input_is_geometry_error() {
        let tape = Tape::<f64>::new();
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::<f64>::zeros(&[1, 1, 7, 7]);
        let conv = Conv2d::new(w, None, 1, 1);
        assert!(matches!(conv2d(&tape, &x, &conv), Err(Error::Geometry(_))));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let tape = Tape::<f64>::new();
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(&[2, 4, 1, 1]);
        let conv = Conv2d::new(w, None, 1, 0);
        assert!(matches!(conv2d(&tape, &x, &conv), Err(Error::Shape(_))));
    }

    #[test]
    fn depthwise_center_one_hot_is_identity() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64) * 0.3 - 2.0);
        let mut w = vec![0.0; 2 * 9];
        w[4] = 1.0; // channel 0 center
        w[9 + 4] = 1.0; // channel 1 center
        let conv = Conv2d::depthwise3x3(Tensor::from_vec(&[2, 1, 3, 3], w).unwrap());
        let y = conv2d(&tape, &x, &conv).unwrap();
        assert_eq!(*y.data(), *x.data());
    }

    #[test]
    fn depthwise_right_neighbor_shifts_left() {
        // kernel one-hot at (1, 2): out(y, x) = in(y, x + 1), zero at right edge.
        let tape = Tape::<f64>::new();
        let x = Tensor::from_fn(&[1, 1, 2, 3], |i| i as f64 + 1.0);
        let mut w = vec![0.0; 9];
        w[5] = 1.0;
        let conv = Conv2d::depthwise3x3(Tensor::from_vec(&[1, 1, 3, 3], w).unwrap());
        let y = conv2d(&tape, &x, &conv).unwrap();
        assert_eq!(*y.data(), vec![2.0, 3.0, 0.0, 5.0, 6.0, 0.0]);
    }

    #[test]
    fn twist_kernel_on_constant_map_halves_right_edge() {
        // Center+right 0.5/0.5 kernel on a constant map: interior c, right edge 0.5 c.
        let tape = Tape::<f64>::new();
        let c = 3.0;
        let x = Tensor::full(&[1, 1, 3, 4], c);
        let mut w = vec![0.0; 9];
        w[4] = 0.5;
        w[5] = 0.5;
        let conv = Conv2d::depthwise3x3(Tensor::from_vec(&[1, 1, 3, 3], w).unwrap());
        let y = conv2d(&tape, &x, &conv).unwrap();
        for row in 0..3 {
            for col in 0..4 {
                let expect = if col == 3 { 0.5 * c } else { c };
                assert_eq!(y.at(&[0, 0, row, col]), expect);
            }
        }
    }
}
