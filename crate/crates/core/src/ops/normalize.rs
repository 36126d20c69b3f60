use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// Symmetric GCN normalization `D̂^{-1/2} (A + I) D̂^{-1/2}` where
    /// `D̂_ii = Σ_j (A + I)_ij`. Every degree must be positive.
    pub fn sym_normalize(&mut self, a: Var) -> Result<Var> {
        let input = self.value(a);
        let n = match input.shape() {
            &[r, c] if r == c => r,
            s => return Err(Error::shape("sym_normalize", format!("expected a square matrix, got {s:?}"))),
        };
        let mut hat = input.data().to_vec();
        for i in 0..n {
            hat[i * n + i] += 1.0;
        }
        let mut r = Vec::with_capacity(n);
        for i in 0..n {
            let degree: f64 = hat[i * n..(i + 1) * n].iter().sum();
            if !(degree > 0.0) {
                return Err(Error::Invalid(format!(
                    "sym_normalize: node {i} has non-positive degree {degree}"
                )));
            }
            r.push(1.0 / math::sqrt(degree));
        }
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = hat[i * n + j] * r[i] * r[j];
            }
        }
        let value = Tensor::new(vec![n, n], out)?;
        self.record(
            "sym_normalize",
            &[a],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut d_r = vec![0.0; n];
                for i in 0..n {
                    for j in 0..n {
                        let gh = g[i * n + j] * hat[i * n + j];
                        d_r[i] += gh * r[j];
                        d_r[j] += gh * r[i];
                    }
                }
                let mut ga = vec![0.0; n * n];
                for k in 0..n {
                    let through_degree = -0.5 * d_r[k] * r[k] * r[k] * r[k];
                    for l in 0..n {
                        ga[k * n + l] = g[k * n + l] * r[k] * r[l] + through_degree;
                    }
                }
                vec![Some(Tensor::new(vec![n, n], ga).unwrap())]
            }),
        )
    }

    /// Scales each row of a matrix to unit Euclidean norm. Rows whose norm is
    /// below `floor` become zero and pass no gradient; the returned mask marks
    /// the rows that were normalized.
    pub fn l2_normalize_rows(&mut self, x: Var, floor: f64) -> Result<(Var, Vec<bool>)> {
        let input = self.value(x);
        let (m, k) = match input.shape() {
            &[m, k] => (m, k),
            s => return Err(Error::shape("l2_normalize_rows", format!("expected a matrix, got {s:?}"))),
        };
        let norms: Vec<f64> = (0..m)
            .map(|i| math::sqrt(input.row(i).iter().map(|v| v * v).sum()))
            .collect();
        let live: Vec<bool> = norms.iter().map(|&n| n >= floor).collect();
        let mut out = vec![0.0; m * k];
        for i in 0..m {
            if live[i] {
                for j in 0..k {
                    out[i * k + j] = input.data()[i * k + j] / norms[i];
                }
            }
        }
        for &l in &live {
            self.note_branch(l);
        }
        let value = Tensor::new(vec![m, k], out)?;
        let mask = live.clone();
        let var = self.record(
            "l2_normalize_rows",
            &[x],
            value,
            Box::new(move |ctx| {
                let (y, g) = (ctx.output.data(), ctx.grad.data());
                let mut gx = vec![0.0; m * k];
                for i in 0..m {
                    if !live[i] {
                        continue;
                    }
                    let row = i * k..(i + 1) * k;
                    let dot: f64 = y[row.clone()].iter().zip(&g[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        gx[j] = (g[j] - y[j] * dot) / norms[i];
                    }
                }
                vec![Some(Tensor::new(vec![m, k], gx).unwrap())]
            }),
        )?;
        Ok((var, mask))
    }
}
