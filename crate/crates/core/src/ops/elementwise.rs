use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
        }
    }
}

/// Sums `g` down to a one-element gradient when the operand was broadcast.
fn reduce_to(g: Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        g
    } else {
        Tensor::full(shape, g.data().iter().sum())
    }
}

impl Tape {
    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = if ta.shape() == tb.shape() || tb.numel() == 1 {
            ta.shape().to_vec()
        } else if ta.numel() == 1 {
            tb.shape().to_vec()
        } else {
            return Err(Error::shape(
                kind.name(),
                format!("operands {:?} and {:?} differ", ta.shape(), tb.shape()),
            ));
        };
        let n: usize = out_shape.iter().product();
        let (sa, sb) = (ta.numel() == 1, tb.numel() == 1);
        let da = ta.data();
        let db = tb.data();
        let data: Vec<f64> = (0..n)
            .map(|i| kind.apply(da[if sa { 0 } else { i }], db[if sb { 0 } else { i }]))
            .collect();
        let value = Tensor::new(out_shape, data)?;
        self.record(
            kind.name(),
            &[a, b],
            value,
            Box::new(move |ctx| {
                let (ta, tb) = (ctx.inputs[0], ctx.inputs[1]);
                let g = ctx.grad;
                let n = g.numel();
                let pick = |t: &Tensor, i: usize| t.data()[if t.numel() == 1 { 0 } else { i }];
                let ga = ctx.needs[0].then(|| {
                    let data = (0..n)
                        .map(|i| match kind {
                            Binary::Add | Binary::Sub => g.data()[i],
                            Binary::Mul => g.data()[i] * pick(tb, i),
                        })
                        .collect();
                    reduce_to(Tensor::new(g.shape().to_vec(), data).unwrap(), ta.shape())
                });
                let gb = ctx.needs[1].then(|| {
                    let data = (0..n)
                        .map(|i| match kind {
                            Binary::Add => g.data()[i],
                            Binary::Sub => -g.data()[i],
                            Binary::Mul => g.data()[i] * pick(ta, i),
                        })
                        .collect();
                    reduce_to(Tensor::new(g.shape().to_vec(), data).unwrap(), tb.shape())
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.record(
            "scale",
            &[x],
            value,
            Box::new(move |ctx| vec![Some(ctx.grad.map(|g| g * s))]),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let value = input.map(|v| v.max(0.0));
        let signs: Vec<bool> = input.data().iter().map(|&v| v > 0.0).collect();
        for &s in &signs {
            self.note_branch(s);
        }
        self.record(
            "relu",
            &[x],
            value,
            Box::new(move |ctx| {
                let data = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(&signs)
                    .map(|(&g, &on)| if on { g } else { 0.0 })
                    .collect();
                vec![Some(Tensor::new(ctx.grad.shape().to_vec(), data).unwrap())]
            }),
        )
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(math::exp);
        self.record(
            "exp",
            &[x],
            value,
            Box::new(|ctx| {
                let data = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(ctx.output.data())
                    .map(|(g, y)| g * y)
                    .collect();
                vec![Some(Tensor::new(ctx.grad.shape().to_vec(), data).unwrap())]
            }),
        )
    }

    /// Natural logarithm. Non-positive inputs yield a non-finite error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(math::ln);
        self.record(
            "log",
            &[x],
            value,
            Box::new(|ctx| {
                let data = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .map(|(g, x)| g / x)
                    .collect();
                vec![Some(Tensor::new(ctx.grad.shape().to_vec(), data).unwrap())]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn scalar_broadcast_reduces_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let s = tape.leaf(Tensor::scalar(2.0));
        let y = tape.mul(x, s).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(s).unwrap().data(), &[6.0]);
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2]));
        let b = tape.leaf(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn log_of_zero_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.log(a), Err(Error::NonFinite { op: "log" })));
    }
}
