use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::ops::softmax::log_sum_exp;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// Per-row log ratio whose denominator leaves one column out:
    ///
    /// `out[r] = positive[r] − log Σ_{i ≠ exclude[r]} exp(logits[r, i])`.
    pub fn exclusive_log_ratio(&mut self, positive: Var, logits: Var, exclude: &[usize]) -> Result<Var> {
        let (m, n) = match self.value(logits).shape() {
            &[m, n] => (m, n),
            s => return Err(Error::shape("exclusive_log_ratio", format!("logits must be a matrix, got {s:?}"))),
        };
        if n < 2 {
            return Err(Error::Invalid(format!(
                "exclusive_log_ratio: need at least two columns to leave one out, got {n}"
            )));
        }
        if self.value(positive).shape() != [m] || exclude.len() != m {
            return Err(Error::shape(
                "exclusive_log_ratio",
                format!(
                    "expected {m} positives and exclusions, got {:?} and {}",
                    self.value(positive).shape(),
                    exclude.len()
                ),
            ));
        }
        if let Some(&bad) = exclude.iter().find(|&&e| e >= n) {
            return Err(Error::shape("exclusive_log_ratio", format!("excluded column {bad} out of range for {n}")));
        }
        let z = self.value(logits).data();
        let pos = self.value(positive).data();
        let mut weights = vec![0.0; m * n];
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            let row = &z[r * n..(r + 1) * n];
            let others = row.iter().enumerate().filter(|(i, _)| *i != exclude[r]).map(|(_, &v)| v);
            let lse = log_sum_exp(others);
            for i in 0..n {
                if i != exclude[r] {
                    weights[r * n + i] = math::exp(row[i] - lse);
                }
            }
            out.push(pos[r] - lse);
        }
        let value = Tensor::from_vec(out);
        self.record(
            "exclusive_log_ratio",
            &[positive, logits],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gp = ctx.needs[0].then(|| ctx.grad.clone());
                let gl = ctx.needs[1].then(|| {
                    let data = weights.iter().enumerate().map(|(idx, &w)| -g[idx / n] * w).collect();
                    Tensor::new(vec![m, n], data).unwrap()
                });
                vec![gp, gl]
            }),
        )
    }
}
