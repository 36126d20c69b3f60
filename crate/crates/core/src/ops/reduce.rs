use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{strides_of, Tensor};

/// For every input offset, the offset of the reduced output element.
fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let mut out_shape: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let rank = shape.len();
    if kept.iter().enumerate().all(|(i, &a)| i == a) {
        // Reduced axes are trailing: each output owns one contiguous block.
        let block: usize = shape[kept.len()..rank].iter().product();
        let numel: usize = shape.iter().product();
        return (out_shape, (0..numel).map(|offset| offset / block).collect());
    }
    let out_strides = strides_of(&out_shape);
    let in_strides = strides_of(shape);
    let numel: usize = shape.iter().product();
    let map = (0..numel)
        .map(|offset| {
            kept.iter()
                .enumerate()
                .map(|(k, &axis)| (offset / in_strides[axis]) % shape[axis] * out_strides[k])
                .sum()
        })
        .collect();
    (out_shape, map)
}

impl Tape {
    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.record(
            "sum",
            &[x],
            value,
            Box::new(|ctx| vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.item()))]),
        )
    }

    /// Sum over `axes`, which are removed from the shape.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, false)
    }

    /// Mean over `axes`, which are removed from the shape.
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, true)
    }

    fn reduce(&mut self, x: Var, axes: &[usize], average: bool) -> Result<Var> {
        let input = self.value(x);
        let rank = input.rank();
        if let Some(&axis) = axes.iter().find(|&&a| a >= rank) {
            return Err(Error::Axis { axis, rank });
        }
        let (out_shape, map) = reduction_map(input.shape(), axes);
        let count: usize = axes.iter().map(|&a| input.shape()[a]).product();
        let factor = if average { 1.0 / count as f64 } else { 1.0 };
        let mut out = Tensor::zeros(&out_shape);
        {
            let dst = out.data_mut();
            for (v, &o) in input.data().iter().zip(&map) {
                dst[o] += v;
            }
            for v in dst.iter_mut() {
                *v *= factor;
            }
        }
        self.record(
            if average { "mean" } else { "sum_axes" },
            &[x],
            out,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let data = map.iter().map(|&o| g[o] * factor).collect();
                vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), data).unwrap())]
            }),
        )
    }
}
