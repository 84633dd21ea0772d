//! Pairwise channel products over precomputed index lists.

use crate::error::{Error, Result};
use crate::tensor::tape::{InputSlot, Tape, TapeOp};
use crate::tensor::{DataCell, Dims4, Element, Tensor};

/// Row-major upper-triangular index pairs `(i, j)` with `i <= j` over
/// `c` channels: `(0,0), (0,1), ..., (0,c-1), (1,1), ...` (0-based).
pub fn upper_tri_indices(c: usize) -> (Vec<usize>, Vec<usize>) {
    let p = c * (c + 1) / 2;
    let mut idx_i = Vec::with_capacity(p);
    let mut idx_j = Vec::with_capacity(p);
    for i in 0..c {
        for j in i..c {
            idx_i.push(i);
            idx_j.push(j);
        }
    }
    (idx_i, idx_j)
}

struct PairProductOp<E: Element> {
    a_data: DataCell<E>,
    b_data: DataCell<E>,
    a: InputSlot<E>,
    b: InputSlot<E>,
    idx_i: Vec<usize>,
    idx_j: Vec<usize>,
    n: usize,
    c: usize,
    hw: usize,
}

impl<E: Element> TapeOp<E> for PairProductOp<E> {
    fn backward(&self, g: &[E]) {
        let p_count = self.idx_i.len();
        if self.a.wants_grad() {
            let bd = self.b_data.borrow();
            self.a.add_with(|da| {
                for img in 0..self.n {
                    for (p, (&i, &j)) in self.idx_i.iter().zip(&self.idx_j).enumerate() {
                        let gb = (img * p_count + p) * self.hw;
                        let ab = (img * self.c + i) * self.hw;
                        let bb = (img * self.c + j) * self.hw;
                        for q in 0..self.hw {
                            da[ab + q] = da[ab + q] + g[gb + q] * bd[bb + q];
                        }
                    }
                }
            });
        }
        if self.b.wants_grad() {
            let ad = self.a_data.borrow();
            self.b.add_with(|db| {
                for img in 0..self.n {
                    for (p, (&i, &j)) in self.idx_i.iter().zip(&self.idx_j).enumerate() {
                        let gb = (img * p_count + p) * self.hw;
                        let ab = (img * self.c + i) * self.hw;
                        let bb = (img * self.c + j) * self.hw;
                        for q in 0..self.hw {
                            db[bb + q] = db[bb + q] + g[gb + q] * ad[ab + q];
                        }
                    }
                }
            });
        }
    }
}

/// `out[p] = a[idx_i[p]] * b[idx_j[p]]` per position: the P interaction
/// channels between two same-shape `[N, C_r, H, W]` maps.
pub fn pair_product<E: Element>(
    tape: &Tape<E>,
    a: &Tensor<E>,
    b: &Tensor<E>,
    idx_i: &[usize],
    idx_j: &[usize],
) -> Result<Tensor<E>> {
    let d = Dims4::of(a)?;
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "pair_product operands {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if idx_i.len() != idx_j.len() {
        return Err(Error::Shape(format!(
            "index lists of lengths {} and {}",
            idx_i.len(),
            idx_j.len()
        )));
    }
    for &ix in idx_i.iter().chain(idx_j) {
        if ix >= d.c {
            return Err(Error::Index {
                index: ix,
                channels: d.c,
            });
        }
    }
    let p_count = idx_i.len();
    let hw = d.h * d.w;
    let mut out_data = vec![E::zero(); d.n * p_count * hw];
    {
        let ad = a.data();
        let bd = b.data();
        for img in 0..d.n {
            for (p, (&i, &j)) in idx_i.iter().zip(idx_j).enumerate() {
                let ob = (img * p_count + p) * hw;
                let ab = (img * d.c + i) * hw;
                let bb = (img * d.c + j) * hw;
                for q in 0..hw {
                    out_data[ob + q] = ad[ab + q] * bd[bb + q];
                }
            }
        }
    }
    let mut out = Tensor::from_vec(&[d.n, p_count, d.h, d.w], out_data)?;
    if a.needs_grad() || b.needs_grad() {
        let op = PairProductOp {
            a_data: a.data_cell(),
            b_data: b.data_cell(),
            a: InputSlot::of(a),
            b: InputSlot::of(b),
            idx_i: idx_i.to_vec(),
            idx_j: idx_j.to_vec(),
            n: d.n,
            c: d.c,
            hw,
        };
        tape.record(&mut out, Box::new(op));
    }
    Ok(out)
}
