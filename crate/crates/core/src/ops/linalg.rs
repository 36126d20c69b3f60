use alloc::boxed::Box;
use alloc::format;
use alloc::vec;

use crate::error::{Error, Result};
use crate::ops::shape::transpose;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `a[m,k] · b[k,n]`, i-k-j order.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> alloc::vec::Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {m}x{k} times {k2}x{n}"),
            ));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        self.record(
            "matmul",
            &[a, b],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let ga = ctx.needs[0].then(|| {
                    let bt = transpose(ctx.inputs[1]);
                    Tensor::new(vec![m, k], matmul_raw(g, bt.data(), m, n, k)).unwrap()
                });
                let gb = ctx.needs[1].then(|| {
                    let at = transpose(ctx.inputs[0]);
                    Tensor::new(vec![k, n], matmul_raw(at.data(), g, k, m, n)).unwrap()
                });
                vec![ga, gb]
            }),
        )
    }

    /// Row-batched affine map `x · Wᵀ + b` with `x[m,k]`, `W[n,k]`, `b[n]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (m, k) = dims2("linear", self.value(x))?;
        let (n, k2) = dims2("linear", self.value(weight))?;
        if k != k2 {
            return Err(Error::shape(
                "linear",
                format!("input has {k} features but weight expects {k2}"),
            ));
        }
        if self.value(bias).shape() != [n] {
            return Err(Error::shape(
                "linear",
                format!("bias shape {:?} does not match {n} outputs", self.value(bias).shape()),
            ));
        }
        let wt = transpose(self.value(weight));
        let mut data = matmul_raw(self.value(x).data(), wt.data(), m, k, n);
        let bv = self.value(bias).data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bv[j];
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        self.record(
            "linear",
            &[x, weight, bias],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gx = ctx.needs[0]
                    .then(|| Tensor::new(vec![m, k], matmul_raw(g, ctx.inputs[1].data(), m, n, k)).unwrap());
                let gw = ctx.needs[1].then(|| {
                    let gt = transpose(ctx.grad);
                    Tensor::new(vec![n, k], matmul_raw(gt.data(), ctx.inputs[0].data(), n, m, k)).unwrap()
                });
                let gb = ctx.needs[2].then(|| {
                    let mut acc = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            acc[j] += g[i * n + j];
                        }
                    }
                    Tensor::from_vec(acc)
                });
                vec![gx, gw, gb]
            }),
        )
    }

    /// Fully connected layer on a vector: `W · x + b` with `x[n_in]`, `W[n_out,n_in]`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let n_in = match self.value(x).shape() {
            [n] => *n,
            s => return Err(Error::shape("dense", format!("expected a vector input, got {s:?}"))),
        };
        let (n_out, k) = dims2("dense", self.value(weight))?;
        if k != n_in {
            return Err(Error::shape(
                "dense",
                format!("input has {n_in} features but weight expects {k}"),
            ));
        }
        let row = self.reshape(x, &[1, n_in])?;
        let y = self.linear(row, weight, bias)?;
        self.reshape(y, &[n_out])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity_and_hand_example() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let w = tape.leaf(Tensor::eye(2));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let w2 = tape.leaf(Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap());
        let b2 = tape.leaf(Tensor::from_vec(vec![0.0, 1.0]));
        let y2 = tape.dense(x, w2, b2).unwrap();
        assert_eq!(tape.value(y2).data(), &[3.0, 3.0]);
    }

    #[test]
    fn dense_dimension_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let w = tape.leaf(Tensor::eye(2));
        let b = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.dense(x, w, b), Err(Error::Shape { op: "dense", .. })));
    }

    #[test]
    fn matmul_small() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.leaf(Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[4.0, 6.0]);
    }
}
