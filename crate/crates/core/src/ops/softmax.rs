use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Splits a shape around `axis` into (outer, axis length, inner).
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax of a slice into `out`.
pub(crate) fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = math::exp(v - max);
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + math::ln(values.map(|v| math::exp(v - max)).sum::<f64>())
}

impl Tape {
    /// Softmax along `axis`; every slice along the axis sums to one.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let input = self.value(x);
        let rank = input.rank();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        let (outer, len, inner) = around(input.shape(), axis);
        let mut out = Tensor::zeros(input.shape());
        let mut slice = vec![0.0; len];
        let mut soft = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (k, s) in slice.iter_mut().enumerate() {
                    *s = input.data()[(o * len + k) * inner + i];
                }
                softmax_slice(&slice, &mut soft);
                for (k, &s) in soft.iter().enumerate() {
                    out.data_mut()[(o * len + k) * inner + i] = s;
                }
            }
        }
        self.record(
            "softmax",
            &[x],
            out,
            Box::new(move |ctx| {
                let (y, g) = (ctx.output.data(), ctx.grad.data());
                let mut gin = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| y[idx(k)] * g[idx(k)]).sum();
                        for k in 0..len {
                            gin[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::new(ctx.output.shape().to_vec(), gin).unwrap())]
            }),
        )
    }

    /// `−log softmax(logits)[label]` for a vector of class scores.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let input = self.value(logits);
        if input.rank() != 1 || input.numel() < 2 {
            return Err(Error::shape(
                "cross_entropy",
                format!("expected at least two class scores, got {:?}", input.shape()),
            ));
        }
        let classes = input.numel();
        if label >= classes {
            return Err(Error::Label { label, classes });
        }
        let z = input.data();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let loss = if z[label] == max {
            // log1p keeps precision when the labelled class dominates
            let rest: f64 = z
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != label)
                .map(|(_, &v)| math::exp(v - max))
                .sum();
            math::ln_1p(rest)
        } else {
            log_sum_exp(z.iter().copied()) - z[label]
        };
        let mut probs: Vec<f64> = vec![0.0; classes];
        softmax_slice(z, &mut probs);
        self.record(
            "cross_entropy",
            &[logits],
            Tensor::scalar(loss),
            Box::new(move |ctx| {
                let g = ctx.grad.item();
                let data = probs
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| g * (p - if k == label { 1.0 } else { 0.0 }))
                    .collect();
                vec![Some(Tensor::from_vec(data))]
            }),
        )
    }
}
