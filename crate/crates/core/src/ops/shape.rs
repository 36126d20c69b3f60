use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape).map_err(|_| {
            Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.value(x).shape()),
            )
        })?;
        self.record(
            "reshape",
            &[x],
            value,
            Box::new(|ctx| vec![Some(ctx.grad.reshape(ctx.inputs[0].shape()).unwrap())]),
        )
    }

    /// Copies the current value of `x` into a constant node.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        if input.rank() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("expected a matrix, got {:?}", input.shape()),
            ));
        }
        let value = transpose(input);
        self.record(
            "transpose",
            &[x],
            value,
            Box::new(|ctx| vec![Some(transpose(ctx.grad))]),
        )
    }

    /// Concatenates two tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let rank = ta.rank();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        let compatible = tb.rank() == rank
            && (0..rank).all(|d| d == axis || ta.shape()[d] == tb.shape()[d]);
        if !compatible {
            return Err(Error::shape(
                "concat",
                format!(
                    "{:?} and {:?} differ outside axis {axis}",
                    ta.shape(),
                    tb.shape()
                ),
            ));
        }
        let outer: usize = ta.shape()[..axis].iter().product();
        let inner: usize = ta.shape()[axis + 1..].iter().product();
        let block_a = ta.shape()[axis] * inner;
        let block_b = tb.shape()[axis] * inner;
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for o in 0..outer {
            data.extend_from_slice(&ta.data()[o * block_a..(o + 1) * block_a]);
            data.extend_from_slice(&tb.data()[o * block_b..(o + 1) * block_b]);
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] += tb.shape()[axis];
        let value = Tensor::new(shape, data)?;
        let (shape_a, shape_b) = (ta.shape().to_vec(), tb.shape().to_vec());
        self.record(
            "concat",
            &[a, b],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut ga = Vec::with_capacity(outer * block_a);
                let mut gb = Vec::with_capacity(outer * block_b);
                for o in 0..outer {
                    let base = o * (block_a + block_b);
                    ga.extend_from_slice(&g[base..base + block_a]);
                    gb.extend_from_slice(&g[base + block_a..base + block_a + block_b]);
                }
                vec![
                    Some(Tensor::new(shape_a.clone(), ga).unwrap()),
                    Some(Tensor::new(shape_b.clone(), gb).unwrap()),
                ]
            }),
        )
    }

    /// Gathers rows of a matrix; rows may repeat.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let input = self.value(x);
        if input.rank() != 2 {
            return Err(Error::shape(
                "select_rows",
                format!("expected a matrix, got {:?}", input.shape()),
            ));
        }
        let (n, cols) = (input.shape()[0], input.shape()[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape(
                "select_rows",
                format!("row {bad} out of range for {n} rows"),
            ));
        }
        let data = rows.iter().flat_map(|&r| input.row(r).iter().copied()).collect();
        let value = Tensor::new(vec![rows.len(), cols], data)?;
        let rows = rows.to_vec();
        self.record(
            "select_rows",
            &[x],
            value,
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(ctx.inputs[0].shape());
                let dst = g.data_mut();
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        dst[r * cols + c] += ctx.grad.data()[i * cols + c];
                    }
                }
                vec![Some(g)]
            }),
        )
    }
}

pub(crate) fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let src = t.data();
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new(vec![c, r], data).unwrap()
}
