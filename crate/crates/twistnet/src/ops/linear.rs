//! Matrix multiplication and fully connected layers.

use crate::error::{Error, Result};
use crate::tensor::tape::{InputSlot, Tape, TapeOp};
use crate::tensor::{DataCell, Element, Tensor};

fn transpose<E: Element>(rows: usize, cols: usize, src: &[E]) -> Vec<E> {
    let mut out = vec![E::zero(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

// ── matmul ───────────────────────────────────────────────────────────

struct MatmulOp<E: Element> {
    a_data: DataCell<E>,
    b_data: DataCell<E>,
    a: InputSlot<E>,
    b: InputSlot<E>,
    m: usize,
    k: usize,
    n: usize,
}

impl<E: Element> TapeOp<E> for MatmulOp<E> {
    fn backward(&self, g: &[E]) {
        // da = g . b^T
        if self.a.wants_grad() {
            let bd = self.b_data.borrow();
            let mut da = vec![E::zero(); self.m * self.k];
            E::gemm_nt(self.m, self.n, self.k, g, &bd, &mut da);
            self.a.add(&da);
        }
        // db = a^T . g
        if self.b.wants_grad() {
            let ad = self.a_data.borrow();
            let at = transpose(self.m, self.k, &ad);
            let mut db = vec![E::zero(); self.k * self.n];
            E::gemm_nn(self.k, self.m, self.n, &at, g, &mut db);
            self.b.add(&db);
        }
    }
}

/// `a[m x k] . b[k x n] -> [m x n]`.
pub fn matmul<E: Element>(tape: &Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::Shape(format!(
            "matmul needs [m x k] . [k x n], got {:?} . {:?}",
            sa, sb
        )));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out_data = vec![E::zero(); m * n];
    {
        let (ad, bd) = (a.data(), b.data());
        E::gemm_nn(m, k, n, &ad, &bd, &mut out_data);
    }
    let mut out = Tensor::from_vec(&[m, n], out_data)?;
    if a.needs_grad() || b.needs_grad() {
        let op = MatmulOp {
            a_data: a.data_cell(),
            b_data: b.data_cell(),
            a: InputSlot::of(a),
            b: InputSlot::of(b),
            m,
            k,
            n,
        };
        tape.record(&mut out, Box::new(op));
    }
    Ok(out)
}

// ── linear ───────────────────────────────────────────────────────────

/// Fully connected layer: weight `[out x in]`, optional bias `[out]`.
#[derive(Clone, Debug)]
pub struct Linear<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
}

struct LinearOp<E: Element> {
    x_data: DataCell<E>,
    w_data: DataCell<E>,
    x: InputSlot<E>,
    w: InputSlot<E>,
    b: Option<InputSlot<E>>,
    n: usize,
    in_f: usize,
    out_f: usize,
}

impl<E: Element> TapeOp<E> for LinearOp<E> {
    fn backward(&self, g: &[E]) {
        // dx = g . w
        if self.x.wants_grad() {
            let wd = self.w_data.borrow();
            let mut dx = vec![E::zero(); self.n * self.in_f];
            E::gemm_nn(self.n, self.out_f, self.in_f, g, &wd, &mut dx);
            self.x.add(&dx);
        }
        // dw = g^T . x
        if self.w.wants_grad() {
            let xd = self.x_data.borrow();
            let gt = transpose(self.n, self.out_f, g);
            let mut dw = vec![E::zero(); self.out_f * self.in_f];
            E::gemm_nn(self.out_f, self.n, self.in_f, &gt, &xd, &mut dw);
            self.w.add(&dw);
        }
        if let Some(b) = &self.b {
            b.add_with(|buf| {
                for row in 0..self.n {
                    for o in 0..self.out_f {
                        buf[o] = buf[o] + g[row * self.out_f + o];
                    }
                }
            });
        }
    }
}

/// `x[n x in] -> x . w^T + bias`, recorded for backward.
pub fn linear<E: Element>(tape: &Tape<E>, x: &Tensor<E>, layer: &Linear<E>) -> Result<Tensor<E>> {
    let sx = x.shape();
    let sw = layer.weight.shape();
    if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
        return Err(Error::Shape(format!(
            "linear needs x[n x in], w[out x in]; got {:?}, {:?}",
            sx, sw
        )));
    }
    let (n, in_f, out_f) = (sx[0], sx[1], sw[0]);
    if let Some(b) = &layer.bias {
        if b.shape() != [out_f] {
            return Err(Error::Shape(format!(
                "linear bias {:?} vs out features {}",
                b.shape(),
                out_f
            )));
        }
    }
    let mut out_data = vec![E::zero(); n * out_f];
    {
        let (xd, wd) = (x.data(), layer.weight.data());
        E::gemm_nt(n, in_f, out_f, &xd, &wd, &mut out_data);
    }
    if let Some(b) = &layer.bias {
        let bd = b.data();
        for row in 0..n {
            for o in 0..out_f {
                out_data[row * out_f + o] = out_data[row * out_f + o] + bd[o];
            }
        }
    }
    let mut out = Tensor::from_vec(&[n, out_f], out_data)?;
    let needs = x.needs_grad()
        || layer.weight.needs_grad()
        || layer.bias.as_ref().is_some_and(|b| b.needs_grad());
    if needs {
        let op = LinearOp {
            x_data: x.data_cell(),
            w_data: layer.weight.data_cell(),
            x: InputSlot::of(x),
            w: InputSlot::of(&layer.weight),
            b: layer.bias.as_ref().map(InputSlot::of),
            n,
            in_f,
            out_f,
        };
        tape.record(&mut out, Box::new(op));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{mul, sum};

    #[test]
    fn identity_times_vector_is_vector() {
        let tape = Tape::<f64>::new();
        let id = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::from_vec(&[2, 1], vec![3.0, -4.0]).unwrap();
        let out = matmul(&tape, &id, &v).unwrap();
        assert_eq!(*out.data(), vec![3.0, -4.0]);
    }

    #[test]
    fn one_by_one_reduces_to_scalar_mul() {
        let tape = Tape::<f64>::new();
        let a = Tensor::from_vec(&[1, 1], vec![3.0]).unwrap();
        let b = Tensor::from_vec(&[1, 1], vec![-2.5]).unwrap();
        let out = matmul(&tape, &a, &b).unwrap();
        assert_eq!(out.data()[0], -7.5);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let tape = Tape::<f64>::new();
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(matmul(&tape, &a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_gradients_match_manual_rule() {
        // loss = sum(R . (a . b)); da = R_sum-ish via product rule.
        let tape = Tape::<f64>::new();
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap()
            .requires_grad();
        let b = Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0])
            .unwrap()
            .requires_grad();
        let y = matmul(&tape, &a, &b).unwrap();
        let r = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = sum(&tape, &mul(&tape, &y, &r).unwrap());
        tape.backward(&s).unwrap();
        // g = r; da = g . b^T ; db = a^T . g
        assert_eq!(a.grad().unwrap(), vec![5.0, 7.0, 6.0, 8.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn linear_bias_gradient_sums_batch() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 2.0, -1.0, 1.0, 0.5]).unwrap();
        let w = Tensor::from_vec(&[2, 3], vec![0.5, 1.0, -1.0, 2.0, 0.0, 1.0])
            .unwrap()
            .requires_grad();
        let b = Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap().requires_grad();
        let layer = Linear {
            weight: w,
            bias: Some(b.clone()),
        };
        let y = linear(&tape, &x, &layer).unwrap();
        let s = sum(&tape, &y);
        tape.backward(&s).unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]);
    }
}
