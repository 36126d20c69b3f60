//! Grouped 3-D cross-correlation.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

/// `floor((len + 2·padding − kernel) / stride) + 1`, or `None` when the kernel
/// does not fit the padded input.
pub fn conv3d_output_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    c_in: usize,
    c_out: usize,
    cin_g: usize,
    cout_g: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    stride: usize,
    padding: usize,
}

impl Geometry {
    /// Output positions along `axis` whose tap `k` lands inside the input.
    fn valid(&self, axis: usize, k: usize) -> Range<usize> {
        let (s, p) = (self.stride as i64, self.padding as i64);
        let (len, out) = (self.input[axis] as i64, self.output[axis] as i64);
        let k = k as i64;
        // 0 <= o*s + k - p < len
        let lo = if p > k { (p - k + s - 1) / s } else { 0 };
        let hi = if len - 1 + p - k < 0 {
            0
        } else {
            ((len - 1 + p - k) / s + 1).min(out)
        };
        (lo.max(0) as usize)..(hi.max(lo) as usize)
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == 1 && self.padding == 0
    }

    fn depthwise_unit_stride(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1 && self.stride == 1
    }

    /// Visits every (tap, output row, input row, valid output columns) of one
    /// input channel. Offsets are relative to the channel.
    fn for_each_tap_row(&self, mut f: impl FnMut(usize, usize, usize, Range<usize>)) {
        let [_, ih_len, iw_len] = self.input;
        let [_, oh_len, ow_len] = self.output;
        let [kd_len, kh_len, kw_len] = self.kernel;
        let (s, p) = (self.stride, self.padding);
        for kd in 0..kd_len {
            let rd = self.valid(0, kd);
            for kh in 0..kh_len {
                let rh = self.valid(1, kh);
                for kw in 0..kw_len {
                    let rw = self.valid(2, kw);
                    if rw.is_empty() {
                        continue;
                    }
                    let tap = (kd * kh_len + kh) * kw_len + kw;
                    for od in rd.clone() {
                        let id = od * s + kd - p;
                        for oh in rh.clone() {
                            let ih = oh * s + kh - p;
                            let first = (id * ih_len + ih) * iw_len + rw.start * s + kw - p;
                            f(tap, (od * oh_len + oh) * ow_len, first, rw.clone());
                        }
                    }
                }
            }
        }
    }

    /// Unfolds the input channels of group `g` into a `[cin_g·k³, out_volume]`
    /// matrix whose row `icl·k³ + tap` holds the input value each output
    /// position sees through that tap (zero where it falls in the padding).
    fn im2col(&self, x: &[f64], g: usize) -> Vec<f64> {
        let (in_vol, out_vol, kvol, s) = (self.in_volume(), self.out_volume(), self.kernel_volume(), self.stride);
        let mut cols = vec![0.0; self.cin_g * kvol * out_vol];
        for icl in 0..self.cin_g {
            let channel = &x[(g * self.cin_g + icl) * in_vol..][..in_vol];
            let block = &mut cols[icl * kvol * out_vol..][..kvol * out_vol];
            self.for_each_tap_row(|tap, out_row, first, range| {
                let dst = &mut block[tap * out_vol + out_row + range.start..tap * out_vol + out_row + range.end];
                for (d, &v) in dst.iter_mut().zip(channel[first..].iter().step_by(s)) {
                    *d = v;
                }
            });
        }
        cols
    }

    /// Adjoint of [`Geometry::im2col`]: scatters column gradients back into `gx`.
    fn col2im(&self, cols: &[f64], g: usize, gx: &mut [f64]) {
        let (in_vol, out_vol, kvol, s) = (self.in_volume(), self.out_volume(), self.kernel_volume(), self.stride);
        for icl in 0..self.cin_g {
            let channel = &mut gx[(g * self.cin_g + icl) * in_vol..][..in_vol];
            let block = &cols[icl * kvol * out_vol..][..kvol * out_vol];
            self.for_each_tap_row(|tap, out_row, first, range| {
                let src = &block[tap * out_vol + out_row + range.start..tap * out_vol + out_row + range.end];
                for (d, &v) in channel[first..].iter_mut().step_by(s).zip(src) {
                    *d += v;
                }
            });
        }
    }

    /// Row-major extents of the zero-padded input grid.
    fn padded(&self) -> [usize; 3] {
        self.input.map(|l| l + 2 * self.padding)
    }

    /// On the padded grid an output position `o` reads input `o + offset(tap)`,
    /// so each tap is one long contiguous sweep of length `grid_len`.
    fn grid_len(&self) -> usize {
        let [_, hp, wp] = self.padded();
        let [od, oh, ow] = self.output;
        (od - 1) * hp * wp + (oh - 1) * wp + ow
    }

    fn tap_offsets(&self) -> Vec<usize> {
        let [_, hp, wp] = self.padded();
        let [kd, kh, kw] = self.kernel;
        let mut out = Vec::with_capacity(kd * kh * kw);
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    out.push((a * hp + b) * wp + c);
                }
            }
        }
        out
    }

    fn pad_channel(&self, channel: &[f64]) -> Vec<f64> {
        let [dp, hp, wp] = self.padded();
        let [d, h, w] = self.input;
        let p = self.padding;
        let mut out = vec![0.0; dp * hp * wp];
        for z in 0..d {
            for y in 0..h {
                let src = &channel[(z * h + y) * w..][..w];
                out[((z + p) * hp + y + p) * wp + p..][..w].copy_from_slice(src);
            }
        }
        out
    }

    /// Grid position of every output voxel, in output row-major order.
    fn grid_positions(&self) -> impl Iterator<Item = usize> + '_ {
        let [_, hp, wp] = self.padded();
        let [od, oh, ow] = self.output;
        (0..od).flat_map(move |z| (0..oh).flat_map(move |y| (0..ow).map(move |x| (z * hp + y) * wp + x)))
    }

    fn forward(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (in_vol, out_vol, kvol) = (self.in_volume(), self.out_volume(), self.kernel_volume());
        let mut out = vec![0.0; self.c_out * out_vol];
        if self.pointwise() {
            for oc in 0..self.c_out {
                let g = oc / self.cout_g;
                let dst = &mut out[oc * out_vol..][..out_vol];
                for icl in 0..self.cin_g {
                    let wv = w[oc * self.cin_g + icl];
                    let src = &x[(g * self.cin_g + icl) * in_vol..][..in_vol];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += wv * v;
                    }
                }
            }
        } else if self.depthwise_unit_stride() {
            let (len, offsets) = (self.grid_len(), self.tap_offsets());
            let mut acc = vec![0.0; len];
            for c in 0..self.c_out {
                let padded = self.pad_channel(&x[c * in_vol..][..in_vol]);
                acc.iter_mut().for_each(|v| *v = 0.0);
                for (tap, &off) in offsets.iter().enumerate() {
                    let wv = w[c * kvol + tap];
                    for (a, &v) in acc.iter_mut().zip(&padded[off..off + len]) {
                        *a += wv * v;
                    }
                }
                for (o, pos) in out[c * out_vol..][..out_vol].iter_mut().zip(self.grid_positions()) {
                    *o = acc[pos];
                }
            }
        } else {
            let rows = self.cin_g * kvol;
            for g in 0..self.c_out / self.cout_g {
                let cols = self.im2col(x, g);
                let wg = &w[g * self.cout_g * rows..][..self.cout_g * rows];
                let y = crate::ops::linalg_matmul(wg, &cols, self.cout_g, rows, out_vol);
                out[g * self.cout_g * out_vol..][..self.cout_g * out_vol].copy_from_slice(&y);
            }
        }
        out
    }

    fn backward_input(&self, w: &[f64], gy: &[f64]) -> Vec<f64> {
        let (in_vol, out_vol, kvol) = (self.in_volume(), self.out_volume(), self.kernel_volume());
        let mut gx = vec![0.0; self.c_in * in_vol];
        if self.pointwise() {
            for oc in 0..self.c_out {
                let g = oc / self.cout_g;
                let src = &gy[oc * out_vol..][..out_vol];
                for icl in 0..self.cin_g {
                    let wv = w[oc * self.cin_g + icl];
                    let dst = &mut gx[(g * self.cin_g + icl) * in_vol..][..in_vol];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += wv * v;
                    }
                }
            }
        } else if self.depthwise_unit_stride() {
            let (len, offsets) = (self.grid_len(), self.tap_offsets());
            let [dp, hp, wp] = self.padded();
            let [d, h, wl] = self.input;
            let p = self.padding;
            let mut spread = vec![0.0; len];
            for c in 0..self.c_out {
                spread.iter_mut().for_each(|v| *v = 0.0);
                for (&v, pos) in gy[c * out_vol..][..out_vol].iter().zip(self.grid_positions()) {
                    spread[pos] = v;
                }
                let mut gpad = vec![0.0; dp * hp * wp];
                for (tap, &off) in offsets.iter().enumerate() {
                    let wv = w[c * kvol + tap];
                    for (a, &v) in gpad[off..off + len].iter_mut().zip(&spread) {
                        *a += wv * v;
                    }
                }
                let dst = &mut gx[c * in_vol..][..in_vol];
                for z in 0..d {
                    for y in 0..h {
                        dst[(z * h + y) * wl..][..wl].copy_from_slice(&gpad[((z + p) * hp + y + p) * wp + p..][..wl]);
                    }
                }
            }
        } else {
            let rows = self.cin_g * kvol;
            for g in 0..self.c_out / self.cout_g {
                let wg = &w[g * self.cout_g * rows..][..self.cout_g * rows];
                let wg_t = transpose_raw(wg, self.cout_g, rows);
                let gyg = &gy[g * self.cout_g * out_vol..][..self.cout_g * out_vol];
                let gcols = crate::ops::linalg_matmul(&wg_t, gyg, rows, self.cout_g, out_vol);
                self.col2im(&gcols, g, &mut gx);
            }
        }
        gx
    }

    fn backward_weight(&self, x: &[f64], gy: &[f64]) -> Vec<f64> {
        let (in_vol, out_vol, kvol) = (self.in_volume(), self.out_volume(), self.kernel_volume());
        let mut gw = vec![0.0; self.c_out * self.cin_g * kvol];
        if self.pointwise() {
            for oc in 0..self.c_out {
                let g = oc / self.cout_g;
                let go = &gy[oc * out_vol..][..out_vol];
                for icl in 0..self.cin_g {
                    gw[oc * self.cin_g + icl] = dot(go, &x[(g * self.cin_g + icl) * in_vol..][..in_vol]);
                }
            }
        } else if self.depthwise_unit_stride() {
            let (len, offsets) = (self.grid_len(), self.tap_offsets());
            let mut spread = vec![0.0; len];
            for c in 0..self.c_out {
                let padded = self.pad_channel(&x[c * in_vol..][..in_vol]);
                spread.iter_mut().for_each(|v| *v = 0.0);
                for (&v, pos) in gy[c * out_vol..][..out_vol].iter().zip(self.grid_positions()) {
                    spread[pos] = v;
                }
                for (tap, &off) in offsets.iter().enumerate() {
                    gw[c * kvol + tap] = dot(&spread, &padded[off..off + len]);
                }
            }
        } else {
            let rows = self.cin_g * kvol;
            for g in 0..self.c_out / self.cout_g {
                let cols = self.im2col(x, g);
                for ocl in 0..self.cout_g {
                    let oc = g * self.cout_g + ocl;
                    let go = &gy[oc * out_vol..][..out_vol];
                    for r in 0..rows {
                        gw[oc * rows + r] = dot(go, &cols[r * out_vol..][..out_vol]);
                    }
                }
            }
        }
        gw
    }
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Dot product with four interleaved partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl Tape {
    /// 3-D cross-correlation of `input[C_in,D,H,W]` with `weight[C_out,C_in/groups,kd,kh,kw]`
    /// plus `bias[C_out]`.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, spec: Conv3dSpec) -> Result<Var> {
        let geo = conv_geometry(self.value(input), self.value(weight), self.value(bias), spec)?;
        let mut out = geo.forward(self.value(input).data(), self.value(weight).data());
        let b = self.value(bias).data();
        let vol = geo.out_volume();
        for (oc, chunk) in out.chunks_mut(vol).enumerate() {
            for v in chunk {
                *v += b[oc];
            }
        }
        let value = Tensor::new(vec![geo.c_out, geo.output[0], geo.output[1], geo.output[2]], out)?;
        self.record(
            "conv3d",
            &[input, weight, bias],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gx = ctx.needs[0].then(|| {
                    let gx = geo.backward_input(ctx.inputs[1].data(), g);
                    Tensor::new(ctx.inputs[0].shape().to_vec(), gx).unwrap()
                });
                let gw = ctx.needs[1].then(|| {
                    let gw = geo.backward_weight(ctx.inputs[0].data(), g);
                    Tensor::new(ctx.inputs[1].shape().to_vec(), gw).unwrap()
                });
                let gb = ctx.needs[2].then(|| {
                    let vol = geo.out_volume();
                    Tensor::from_vec(g.chunks(vol).map(|c| c.iter().sum()).collect())
                });
                vec![gx, gw, gb]
            }),
        )
    }
}

fn conv_geometry(input: &Tensor, weight: &Tensor, bias: &Tensor, spec: Conv3dSpec) -> Result<Geometry> {
    let [c_in, d, h, w] = match input.shape() {
        &[c, d, h, w] => [c, d, h, w],
        s => return Err(Error::shape("conv3d", format!("input must be [C,D,H,W], got {s:?}"))),
    };
    let [c_out, cin_g, kd, kh, kw] = match weight.shape() {
        &[a, b, c, d, e] => [a, b, c, d, e],
        s => {
            return Err(Error::shape(
                "conv3d",
                format!("weight must be [C_out,C_in/groups,k,k,k], got {s:?}"),
            ))
        }
    };
    if spec.groups == 0 || spec.stride == 0 {
        return Err(Error::Invalid(format!("conv3d: groups and stride must be positive, got {spec:?}")));
    }
    if c_in % spec.groups != 0 {
        return Err(Error::shape(
            "conv3d",
            format!("input channels {c_in} not divisible by groups {}", spec.groups),
        ));
    }
    if c_out % spec.groups != 0 {
        return Err(Error::shape(
            "conv3d",
            format!("output channels {c_out} not divisible by groups {}", spec.groups),
        ));
    }
    if cin_g != c_in / spec.groups {
        return Err(Error::shape(
            "conv3d",
            format!(
                "weight dimension 1 is {cin_g} but input channels / groups = {}",
                c_in / spec.groups
            ),
        ));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape(
            "conv3d",
            format!("bias shape {:?} does not match {c_out} output channels", bias.shape()),
        ));
    }
    let names = ["depth", "height", "width"];
    let mut output = [0; 3];
    for (axis, (&len, &k)) in [d, h, w].iter().zip(&[kd, kh, kw]).enumerate() {
        output[axis] = conv3d_output_len(len, k, spec.stride, spec.padding).ok_or_else(|| {
            Error::shape(
                "conv3d",
                format!(
                    "kernel {k} does not fit {} {len} with padding {}",
                    names[axis], spec.padding
                ),
            )
        })?;
    }
    Ok(Geometry {
        c_in,
        c_out,
        cin_g,
        cout_g: c_out / spec.groups,
        input: [d, h, w],
        kernel: [kd, kh, kw],
        output,
        stride: spec.stride,
        padding: spec.padding,
    })
}

/// Output shape without running the convolution.
pub fn conv3d_shape(input: &[usize], weight: &[usize], spec: Conv3dSpec) -> Option<Vec<usize>> {
    let mut out = vec![weight[0]];
    for axis in 0..3 {
        out.push(conv3d_output_len(input[axis + 1], weight[axis + 2], spec.stride, spec.padding)?);
    }
    Some(out)
}
