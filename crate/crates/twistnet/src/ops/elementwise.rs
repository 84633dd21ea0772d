//! Elementwise ops: add/sub/mul (with the broadcasts the blocks need),
//! relu, sigmoid, scale-by-constant, sum, and channel concatenation.

use crate::error::{Error, Result};
use crate::tensor::tape::{InputSlot, Tape, TapeOp};
use crate::tensor::{DataCell, Element, Tensor};

/// Supported right-operand broadcasts for binary ops.
///
/// Beyond equal shapes, a per-channel vector may broadcast over the batch and
/// spatial axes: `[C]` or `[N, C]` against an `[N, C, H, W]` left operand,
/// plus plain scalars.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    Scalar,
    Channel { n: usize, c: usize, hw: usize },
    SampleChannel { n: usize, c: usize, hw: usize },
}

impl Broadcast {
    fn resolve(a: &[usize], b: &[usize]) -> Result<Broadcast> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        let b_len: usize = b.iter().product();
        if b_len == 1 {
            return Ok(Broadcast::Scalar);
        }
        if a.len() == 4 {
            let (n, c, hw) = (a[0], a[1], a[2] * a[3]);
            if b == [c] {
                return Ok(Broadcast::Channel { n, c, hw });
            }
            if b == [n, c] {
                return Ok(Broadcast::SampleChannel { n, c, hw });
            }
        }
        Err(Error::Shape(format!(
            "cannot broadcast {:?} against {:?}",
            b, a
        )))
    }

    /// Applies `f(a_i, b_broadcast_i)` over the left operand.
    fn map<E: Element>(self, a: &[E], b: &[E], mut f: impl FnMut(E, E) -> E) -> Vec<E> {
        match self {
            Broadcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => {
                let y = b[0];
                a.iter().map(|&x| f(x, y)).collect()
            }
            Broadcast::Channel { n, c, hw } => {
                let mut out = Vec::with_capacity(a.len());
                for i in 0..n {
                    for j in 0..c {
                        let y = b[j];
                        let base = (i * c + j) * hw;
                        out.extend(a[base..base + hw].iter().map(|&x| f(x, y)));
                    }
                }
                out
            }
            Broadcast::SampleChannel { n, c, hw } => {
                let mut out = Vec::with_capacity(a.len());
                for i in 0..n {
                    for j in 0..c {
                        let y = b[i * c + j];
                        let base = (i * c + j) * hw;
                        out.extend(a[base..base + hw].iter().map(|&x| f(x, y)));
                    }
                }
                out
            }
        }
    }

    /// Reduces `f(i)` over the broadcast fibers into a right-operand-shaped
    /// buffer, in scan order.
    fn reduce_into<E: Element>(self, a_len: usize, out: &mut [E], mut f: impl FnMut(usize) -> E) {
        match self {
            Broadcast::Same => {
                for (i, slot) in out.iter_mut().enumerate() {
                    *slot = *slot + f(i);
                }
            }
            Broadcast::Scalar => {
                let mut acc = E::zero();
                for i in 0..a_len {
                    acc = acc + f(i);
                }
                out[0] = out[0] + acc;
            }
            Broadcast::Channel { n, c, hw } => {
                for i in 0..n {
                    for j in 0..c {
                        let base = (i * c + j) * hw;
                        let mut acc = E::zero();
                        for p in 0..hw {
                            acc = acc + f(base + p);
                        }
                        out[j] = out[j] + acc;
                    }
                }
            }
            Broadcast::SampleChannel { n, c, hw } => {
                for i in 0..n {
                    for j in 0..c {
                        let base = (i * c + j) * hw;
                        let mut acc = E::zero();
                        for p in 0..hw {
                            acc = acc + f(base + p);
                        }
                        out[i * c + j] = out[i * c + j] + acc;
                    }
                }
            }
        }
    }
}

fn record_if_needed<E: Element>(
    tape: &Tape<E>,
    inputs: &[&Tensor<E>],
    out: &mut Tensor<E>,
    op: impl FnOnce() -> Box<dyn TapeOp<E>>,
) {
    if inputs.iter().any(|t| t.needs_grad()) {
        tape.record(out, op());
    }
}

// ── add / sub ────────────────────────────────────────────────────────

struct AddOp<E: Element> {
    a: InputSlot<E>,
    b: InputSlot<E>,
    bc: Broadcast,
    a_len: usize,
    negate_b: bool,
}

impl<E: Element> TapeOp<E> for AddOp<E> {
    fn backward(&self, g: &[E]) {
        self.a.add(g);
        if self.b.wants_grad() {
            let sign = if self.negate_b { -E::one() } else { E::one() };
            self.b
                .add_with(|buf| self.bc.reduce_into(self.a_len, buf, |i| sign * g[i]));
        }
    }
}

fn add_like<E: Element>(
    tape: &Tape<E>,
    a: &Tensor<E>,
    b: &Tensor<E>,
    negate_b: bool,
) -> Result<Tensor<E>> {
    let bc = Broadcast::resolve(a.shape(), b.shape())?;
    let out_data = {
        let (ad, bd) = (a.data(), b.data());
        if negate_b {
            bc.map(&ad, &bd, |x, y| x - y)
        } else {
            bc.map(&ad, &bd, |x, y| x + y)
        }
    };
    let mut out = Tensor::from_vec(a.shape(), out_data)?;
    record_if_needed(tape, &[a, b], &mut out, || {
        Box::new(AddOp {
            a: InputSlot::of(a),
            b: InputSlot::of(b),
            bc,
            a_len: a.len(),
            negate_b,
        })
    });
    Ok(out)
}

pub fn add<E: Element>(tape: &Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    add_like(tape, a, b, false)
}

pub fn sub<E: Element>(tape: &Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    add_like(tape, a, b, true)
}

// ── mul ──────────────────────────────────────────────────────────────

struct MulOp<E: Element> {
    a_data: DataCell<E>,
    b_data: DataCell<E>,
    a: InputSlot<E>,
    b: InputSlot<E>,
    bc: Broadcast,
    a_len: usize,
}

impl<E: Element> TapeOp<E> for MulOp<E> {
    fn backward(&self, g: &[E]) {
        if self.a.wants_grad() {
            let bd = self.b_data.borrow();
            let da = self.bc.map(g, &bd, |gi, bi| gi * bi);
            self.a.add(&da);
        }
        if self.b.wants_grad() {
            let ad = self.a_data.borrow();
            self.b
                .add_with(|buf| self.bc.reduce_into(self.a_len, buf, |i| g[i] * ad[i]));
        }
    }
}

pub fn mul<E: Element>(tape: &Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let bc = Broadcast::resolve(a.shape(), b.shape())?;
    let out_data = {
        let (ad, bd) = (a.data(), b.data());
        bc.map(&ad, &bd, |x, y| x * y)
    };
    let mut out = Tensor::from_vec(a.shape(), out_data)?;
    record_if_needed(tape, &[a, b], &mut out, || {
        Box::new(MulOp {
            a_data: a.data_cell(),
            b_data: b.data_cell(),
            a: InputSlot::of(a),
            b: InputSlot::of(b),
            bc,
            a_len: a.len(),
        })
    });
    Ok(out)
}

// ── relu / sigmoid / scale ───────────────────────────────────────────

struct ReluOp<E: Element> {
    out_data: DataCell<E>,
    x: InputSlot<E>,
}

impl<E: Element> TapeOp<E> for ReluOp<E> {
    fn backward(&self, g: &[E]) {
        let out = self.out_data.borrow();
        let dx: Vec<E> = g
            .iter()
            .zip(out.iter())
            .map(|(&gi, &oi)| if oi > E::zero() { gi } else { E::zero() })
            .collect();
        self.x.add(&dx);
    }
}

pub fn relu<E: Element>(tape: &Tape<E>, x: &Tensor<E>) -> Tensor<E> {
    let out_data: Vec<E> = x
        .data()
        .iter()
        .map(|&v| if v > E::zero() { v } else { E::zero() })
        .collect();
    let mut out = Tensor::from_vec(x.shape(), out_data).expect("same shape");
    let out_cell = out.data_cell();
    record_if_needed(tape, &[x], &mut out, move || {
        Box::new(ReluOp {
            out_data: out_cell,
            x: InputSlot::of(x),
        })
    });
    out
}

struct SigmoidOp<E: Element> {
    out_data: DataCell<E>,
    x: InputSlot<E>,
}

impl<E: Element> TapeOp<E> for SigmoidOp<E> {
    fn backward(&self, g: &[E]) {
        let out = self.out_data.borrow();
        let dx: Vec<E> = g
            .iter()
            .zip(out.iter())
            .map(|(&gi, &oi)| gi * oi * (E::one() - oi))
            .collect();
        self.x.add(&dx);
    }
}

/// `sigmoid(x) = 1 / (1 + exp(-x))`.
pub fn sigmoid<E: Element>(tape: &Tape<E>, x: &Tensor<E>) -> Tensor<E> {
    let out_data: Vec<E> = x
        .data()
        .iter()
        .map(|&v| E::one() / (E::one() + (-v).exp()))
        .collect();
    let mut out = Tensor::from_vec(x.shape(), out_data).expect("same shape");
    let out_cell = out.data_cell();
    record_if_needed(tape, &[x], &mut out, move || {
        Box::new(SigmoidOp {
            out_data: out_cell,
            x: InputSlot::of(x),
        })
    });
    out
}

struct ScaleOp<E: Element> {
    factor: E,
    x: InputSlot<E>,
}

impl<E: Element> TapeOp<E> for ScaleOp<E> {
    fn backward(&self, g: &[E]) {
        let dx: Vec<E> = g.iter().map(|&gi| gi * self.factor).collect();
        self.x.add(&dx);
    }
}

/// Multiplication by a compile-time constant (not a tensor).
pub fn scale<E: Element>(tape: &Tape<E>, x: &Tensor<E>, factor: f64) -> Tensor<E> {
    let f = E::from_f64(factor);
    let out_data: Vec<E> = x.data().iter().map(|&v| v * f).collect();
    let mut out = Tensor::from_vec(x.shape(), out_data).expect("same shape");
    record_if_needed(tape, &[x], &mut out, || {
        Box::new(ScaleOp {
            factor: f,
            x: InputSlot::of(x),
        })
    });
    out
}

// ── sum ──────────────────────────────────────────────────────────────

struct SumOp<E: Element> {
    x: InputSlot<E>,
    len: usize,
}

impl<E: Element> TapeOp<E> for SumOp<E> {
    fn backward(&self, g: &[E]) {
        self.x.add(&vec![g[0]; self.len]);
    }
}

/// Sum of all elements, as a scalar tensor.
pub fn sum<E: Element>(tape: &Tape<E>, x: &Tensor<E>) -> Tensor<E> {
    let total = x.data().iter().fold(E::zero(), |acc, &v| acc + v);
    let mut out = Tensor::scalar(total);
    record_if_needed(tape, &[x], &mut out, || {
        Box::new(SumOp {
            x: InputSlot::of(x),
            len: x.len(),
        })
    });
    out
}

// ── channel concat ───────────────────────────────────────────────────

struct ConcatOp<E: Element> {
    parts: Vec<(InputSlot<E>, usize)>, // slot, channel count
    n: usize,
    hw: usize,
    total_c: usize,
}

impl<E: Element> TapeOp<E> for ConcatOp<E> {
    fn backward(&self, g: &[E]) {
        let mut c_off = 0;
        for (slot, c) in &self.parts {
            if slot.wants_grad() {
                let mut dg = Vec::with_capacity(self.n * c * self.hw);
                for i in 0..self.n {
                    let base = (i * self.total_c + c_off) * self.hw;
                    dg.extend_from_slice(&g[base..base + c * self.hw]);
                }
                slot.add(&dg);
            }
            c_off += c;
        }
    }
}

/// Concatenates `N x C_i x H x W` tensors along the channel axis.
pub fn concat_channels<E: Element>(tape: &Tape<E>, parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
    if parts.is_empty() {
        return Err(Error::Shape("concat of zero tensors".into()));
    }
    let first = parts[0].shape();
    if first.len() != 4 {
        return Err(Error::Shape(format!("concat expects 4-d, got {:?}", first)));
    }
    let (n, h, w) = (first[0], first[2], first[3]);
    let hw = h * w;
    let mut total_c = 0;
    for p in parts {
        let s = p.shape();
        if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
            return Err(Error::Shape(format!(
                "concat operand {:?} incompatible with {:?}",
                s, first
            )));
        }
        total_c += s[1];
    }
    let mut out_data = vec![E::zero(); n * total_c * hw];
    let mut c_off = 0;
    for p in parts {
        let c = p.shape()[1];
        let pd = p.data();
        for i in 0..n {
            let src = i * c * hw;
            let dst = (i * total_c + c_off) * hw;
            out_data[dst..dst + c * hw].copy_from_slice(&pd[src..src + c * hw]);
        }
        c_off += c;
    }
    let mut out = Tensor::from_vec(&[n, total_c, h, w], out_data)?;
    if parts.iter().any(|t| t.needs_grad()) {
        let op = ConcatOp {
            parts: parts
                .iter()
                .map(|p| (InputSlot::of(p), p.shape()[1]))
                .collect(),
            n,
            hw,
            total_c,
        };
        tape.record(&mut out, Box::new(op));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_matches_reference_values() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_vec(&[1], vec![-2.0]).unwrap();
        let y = sigmoid(&tape, &x);
        assert!((y.data()[0] - 0.11920292).abs() < 1e-7);
    }

    #[test]
    fn relu_clamps_negatives() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_vec(&[2], vec![-3.0, 3.0]).unwrap();
        let y = relu(&tape, &x);
        assert_eq!(*y.data(), vec![0.0, 3.0]);
    }

    #[test]
    fn mul_backward_is_product_rule() {
        let tape = Tape::<f64>::new();
        let a = Tensor::from_vec(&[1], vec![2.0]).unwrap().requires_grad();
        let b = Tensor::from_vec(&[1], vec![5.0]).unwrap().requires_grad();
        let y = mul(&tape, &a, &b).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(a.grad().unwrap(), vec![5.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let tape = Tape::<f32>::new();
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4]);
        assert!(matches!(mul(&tape, &a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn channel_broadcast_mul_backward() {
        // a: [1, 2, 1, 2], b: [2]; db_c = sum over positions of g * a.
        let tape = Tape::<f64>::new();
        let a = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap()
            .requires_grad();
        let b = Tensor::from_vec(&[2], vec![10.0, 20.0]).unwrap().requires_grad();
        let y = mul(&tape, &a, &b).unwrap();
        assert_eq!(*y.data(), vec![10.0, 20.0, 60.0, 80.0]);
        let s = sum(&tape, &y);
        tape.backward(&s).unwrap();
        assert_eq!(a.grad().unwrap(), vec![10.0, 10.0, 20.0, 20.0]);
        assert_eq!(b.grad().unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn concat_roundtrips_gradients() {
        let tape = Tape::<f64>::new();
        let a = Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap().requires_grad();
        let b = Tensor::from_vec(&[1, 2, 1, 2], vec![3.0, 4.0, 5.0, 6.0])
            .unwrap()
            .requires_grad();
        let y = concat_channels(&tape, &[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[1, 3, 1, 2]);
        let w = Tensor::from_vec(&[1, 3, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let weighted = mul(&tape, &y, &w).unwrap();
        let s = sum(&tape, &weighted);
        tape.backward(&s).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 2.0]);
        assert_eq!(b.grad().unwrap(), vec![3.0, 4.0, 5.0, 6.0]);
    }
}
