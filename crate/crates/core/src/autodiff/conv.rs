//! Strided 2-D convolution (cross-correlation) and its non-overlapping
//! transpose.

use serde::{Deserialize, Serialize};

use super::{axpy, dot, Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output extent `ceil(input / stride)`, zero padding split with the
    /// smaller half on the leading side.
    Same,
    /// No padding; only fully covered windows.
    Valid,
}

/// Output extent along one axis, or `None` when the window does not fit.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<usize> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    match padding {
        Padding::Same => Some(input.div_ceil(stride)),
        Padding::Valid => (input >= kernel).then(|| (input - kernel) / stride + 1),
    }
}

fn leading_pad(input: usize, output: usize, kernel: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => 0,
        Padding::Same => ((output - 1) * stride + kernel).saturating_sub(input) / 2,
    }
}

/// Range of output positions whose tap at `offset` lands inside the input.
#[inline]
fn tap_range(out_len: usize, in_len: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    let lo = if offset >= pad {
        0
    } else {
        (pad - offset).div_ceil(stride)
    };
    let reach = in_len - 1 + pad;
    if reach < offset {
        return (0, 0);
    }
    let hi = ((reach - offset) / stride + 1).min(out_len);
    (lo, hi.max(lo))
}

#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    fn kernel_index(&self, f: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((f * self.in_c + c) * self.kh + ky) * self.kw + kx
    }
}

fn conv_forward<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.batch * g.out_c * out_plane];
    for b in 0..g.batch {
        for f in 0..g.out_c {
            let dst = &mut out[(b * g.out_c + f) * out_plane..][..out_plane];
            if let Some(bias) = bias {
                dst.fill(bias[f]);
            }
            for c in 0..g.in_c {
                let src = &input[(b * g.in_c + c) * in_plane..][..in_plane];
                if g.is_pointwise() {
                    axpy(kernel[g.kernel_index(f, c, 0, 0)], src, dst);
                    continue;
                }
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = tap_range(g.oh, g.h, g.stride, ky, g.pad_top);
                    for kx in 0..g.kw {
                        let (ox_lo, ox_hi) = tap_range(g.ow, g.w, g.stride, kx, g.pad_left);
                        let n = ox_hi - ox_lo;
                        if n == 0 {
                            continue;
                        }
                        let wv = kernel[g.kernel_index(f, c, ky, kx)];
                        let ix0 = ox_lo * g.stride + kx - g.pad_left;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad_top;
                            let row = &src[iy * g.w..][..g.w];
                            let out_row = &mut dst[oy * g.ow + ox_lo..][..n];
                            if g.stride == 1 {
                                axpy(wv, &row[ix0..ix0 + n], out_row);
                            } else {
                                for (j, o) in out_row.iter_mut().enumerate() {
                                    *o += wv * row[ix0 + j * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_input<T: Scalar>(g: &ConvGeom, kernel: &[T], grad: &[T]) -> Vec<T> {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let mut gin = vec![T::zero(); g.batch * g.in_c * in_plane];
    for b in 0..g.batch {
        for c in 0..g.in_c {
            let dst = &mut gin[(b * g.in_c + c) * in_plane..][..in_plane];
            for f in 0..g.out_c {
                let gout = &grad[(b * g.out_c + f) * out_plane..][..out_plane];
                if g.is_pointwise() {
                    axpy(kernel[g.kernel_index(f, c, 0, 0)], gout, dst);
                    continue;
                }
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = tap_range(g.oh, g.h, g.stride, ky, g.pad_top);
                    for kx in 0..g.kw {
                        let (ox_lo, ox_hi) = tap_range(g.ow, g.w, g.stride, kx, g.pad_left);
                        let n = ox_hi - ox_lo;
                        if n == 0 {
                            continue;
                        }
                        let wv = kernel[g.kernel_index(f, c, ky, kx)];
                        let ix0 = ox_lo * g.stride + kx - g.pad_left;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad_top;
                            let grow = &gout[oy * g.ow + ox_lo..][..n];
                            let row = &mut dst[iy * g.w..][..g.w];
                            if g.stride == 1 {
                                axpy(wv, grow, &mut row[ix0..ix0 + n]);
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    row[ix0 + j * g.stride] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

fn conv_backward_kernel<T: Scalar>(g: &ConvGeom, input: &[T], grad: &[T]) -> Vec<T> {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let mut gk = vec![T::zero(); g.out_c * g.in_c * g.kh * g.kw];
    for f in 0..g.out_c {
        for c in 0..g.in_c {
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = tap_range(g.oh, g.h, g.stride, ky, g.pad_top);
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) = tap_range(g.ow, g.w, g.stride, kx, g.pad_left);
                    let n = ox_hi - ox_lo;
                    let mut acc = T::zero();
                    for b in 0..g.batch {
                        let gout = &grad[(b * g.out_c + f) * out_plane..][..out_plane];
                        let src = &input[(b * g.in_c + c) * in_plane..][..in_plane];
                        if g.is_pointwise() {
                            acc += dot(gout, src);
                            continue;
                        }
                        if n == 0 {
                            continue;
                        }
                        let ix0 = ox_lo * g.stride + kx - g.pad_left;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad_top;
                            let grow = &gout[oy * g.ow + ox_lo..][..n];
                            let row = &src[iy * g.w..][..g.w];
                            if g.stride == 1 {
                                acc += dot(grow, &row[ix0..ix0 + n]);
                            } else {
                                let mut s = T::zero();
                                for (j, &gv) in grow.iter().enumerate() {
                                    s += gv * row[ix0 + j * g.stride];
                                }
                                acc += s;
                            }
                        }
                    }
                    gk[g.kernel_index(f, c, ky, kx)] = acc;
                }
            }
        }
    }
    gk
}

fn channel_sums<T: Scalar>(grad: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); channels];
    for b in 0..batch {
        for (f, s) in sums.iter_mut().enumerate() {
            let p = &grad[(b * channels + f) * plane..][..plane];
            *s += p.iter().copied().sum::<T>();
        }
    }
    sums
}

struct Conv2d {
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    geom: ConvGeom,
}

impl<T: Scalar> Function<T> for Conv2d {
    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.input, self.kernel];
        v.extend(self.bias);
        v
    }

    fn backward(&self, graph: &Graph<T>, _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let g = &self.geom;
        let gin = graph
            .requires_grad(self.input)
            .then(|| conv_backward_input(g, graph.value(self.kernel).data(), grad));
        let gk = graph
            .requires_grad(self.kernel)
            .then(|| conv_backward_kernel(g, graph.value(self.input).data(), grad));
        let mut out = vec![gin, gk];
        if let Some(bias) = self.bias {
            out.push(
                graph
                    .requires_grad(bias)
                    .then(|| channel_sums(grad, g.batch, g.out_c, g.oh * g.ow)),
            );
        }
        out
    }
}

#[derive(Clone, Copy)]
struct UpGeom {
    batch: usize,
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    stride: usize,
}

impl UpGeom {
    fn kernel_index(&self, c: usize, f: usize, ky: usize, kx: usize) -> usize {
        ((c * self.out_c + f) * self.stride + ky) * self.stride + kx
    }
}

fn up_forward<T: Scalar>(g: &UpGeom, input: &[T], kernel: &[T]) -> Vec<T> {
    let s = g.stride;
    let (oh, ow) = (g.h * s, g.w * s);
    let in_plane = g.h * g.w;
    let mut out = vec![T::zero(); g.batch * g.out_c * oh * ow];
    for b in 0..g.batch {
        for f in 0..g.out_c {
            let dst = &mut out[(b * g.out_c + f) * oh * ow..][..oh * ow];
            for c in 0..g.in_c {
                let src = &input[(b * g.in_c + c) * in_plane..][..in_plane];
                for ky in 0..s {
                    for kx in 0..s {
                        let wv = kernel[g.kernel_index(c, f, ky, kx)];
                        for y in 0..g.h {
                            let row = &src[y * g.w..][..g.w];
                            let orow = &mut dst[(y * s + ky) * ow..][..ow];
                            for (x, &v) in row.iter().enumerate() {
                                orow[x * s + kx] += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

struct TransposeConv2d {
    input: Var,
    kernel: Var,
    geom: UpGeom,
}

impl<T: Scalar> Function<T> for TransposeConv2d {
    fn inputs(&self) -> Vec<Var> {
        vec![self.input, self.kernel]
    }

    fn backward(&self, graph: &Graph<T>, _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let g = &self.geom;
        let s = g.stride;
        let ow = g.w * s;
        let (in_plane, out_plane) = (g.h * g.w, g.h * g.w * s * s);
        let input = graph.value(self.input).data();
        let kernel = graph.value(self.kernel).data();

        let gin = graph.requires_grad(self.input).then(|| {
            let mut gin = vec![T::zero(); input.len()];
            for b in 0..g.batch {
                for c in 0..g.in_c {
                    let dst = &mut gin[(b * g.in_c + c) * in_plane..][..in_plane];
                    for f in 0..g.out_c {
                        let gout = &grad[(b * g.out_c + f) * out_plane..][..out_plane];
                        for ky in 0..s {
                            for kx in 0..s {
                                let wv = kernel[g.kernel_index(c, f, ky, kx)];
                                for y in 0..g.h {
                                    let grow = &gout[(y * s + ky) * ow..][..ow];
                                    let row = &mut dst[y * g.w..][..g.w];
                                    for (x, r) in row.iter_mut().enumerate() {
                                        *r += wv * grow[x * s + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            gin
        });

        let gk = graph.requires_grad(self.kernel).then(|| {
            let mut gk = vec![T::zero(); kernel.len()];
            for c in 0..g.in_c {
                for f in 0..g.out_c {
                    for ky in 0..s {
                        for kx in 0..s {
                            let mut acc = T::zero();
                            for b in 0..g.batch {
                                let src = &input[(b * g.in_c + c) * in_plane..][..in_plane];
                                let gout = &grad[(b * g.out_c + f) * out_plane..][..out_plane];
                                for y in 0..g.h {
                                    let row = &src[y * g.w..][..g.w];
                                    let grow = &gout[(y * s + ky) * ow..][..ow];
                                    let mut part = T::zero();
                                    for (x, &v) in row.iter().enumerate() {
                                        part += v * grow[x * s + kx];
                                    }
                                    acc += part;
                                }
                            }
                            gk[g.kernel_index(c, f, ky, kx)] = acc;
                        }
                    }
                }
            }
            gk
        });
        vec![gin, gk]
    }
}

impl<T: Scalar> Graph<T> {
    /// Cross-correlation of `[B,C,H,W]` input with a `[F,C,kH,kW]` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let [batch, in_c, h, w] = self.value(input).dims4("conv2d")?;
        let kshape = self.value(kernel).shape().to_vec();
        let [out_c, kc, kh, kw] = self.value(kernel).dims4("conv2d")?;
        if kc != in_c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.value(input).shape().to_vec(),
                rhs: kshape,
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if padding == Padding::Same && (kh % 2 == 0 || kw % 2 == 0) {
            return Err(Error::invalid(
                "conv2d",
                format!("same padding needs odd kernel extents, got {kh}x{kw}"),
            ));
        }
        if let Some(bias) = bias {
            if self.value(bias).shape() != [out_c] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![out_c],
                    rhs: self.value(bias).shape().to_vec(),
                });
            }
        }
        let (Some(oh), Some(ow)) = (
            conv_output_extent(h, kh, stride, padding),
            conv_output_extent(w, kw, stride, padding),
        ) else {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.value(input).shape().to_vec(),
                rhs: kshape,
            });
        };
        let geom = ConvGeom {
            batch,
            in_c,
            h,
            w,
            out_c,
            kh,
            kw,
            stride,
            oh,
            ow,
            pad_top: leading_pad(h, oh, kh, stride, padding),
            pad_left: leading_pad(w, ow, kw, stride, padding),
        };
        let data = conv_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![batch, out_c, oh, ow], data)?;
        Ok(self.push(
            value,
            Box::new(Conv2d {
                input,
                kernel,
                bias,
                geom,
            }),
        ))
    }

    /// Transpose convolution with a `[C,F,s,s]` kernel and stride `s`, so
    /// output windows never overlap.
    pub fn transpose_conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let [batch, in_c, h, w] = self.value(input).dims4("transpose_conv2d")?;
        let [kc, out_c, kh, kw] = self.value(kernel).dims4("transpose_conv2d")?;
        if kc != in_c {
            return Err(Error::ShapeMismatch {
                op: "transpose_conv2d",
                lhs: self.value(input).shape().to_vec(),
                rhs: self.value(kernel).shape().to_vec(),
            });
        }
        if stride == 0 || kh != stride || kw != stride {
            return Err(Error::invalid(
                "transpose_conv2d",
                format!("kernel {kh}x{kw} must equal the stride {stride} in both axes"),
            ));
        }
        let geom = UpGeom {
            batch,
            in_c,
            h,
            w,
            out_c,
            stride,
        };
        let data = up_forward(&geom, self.value(input).data(), self.value(kernel).data());
        let value = Tensor::new(vec![batch, out_c, h * stride, w * stride], data)?;
        Ok(self.push(
            value,
            Box::new(TransposeConv2d {
                input,
                kernel,
                geom,
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop cross-correlation with explicit zero padding.
    fn naive_conv(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        stride: usize,
        pad_top: usize,
        pad_left: usize,
        oh: usize,
        ow: usize,
    ) -> Vec<f64> {
        let [b, c, h, w] = x.dims4("t").unwrap();
        let [f, _, kh, kw] = k.dims4("t").unwrap();
        let mut out = vec![0.0; b * f * oh * ow];
        for bi in 0..b {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad_top as isize;
                                    let ix = (ox * stride + kx) as isize - pad_left as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((bi * c + ci) * h + iy as usize) * w + ix as usize;
                                    let ki = ((fi * c + ci) * kh + ky) * kw + kx;
                                    s += x.data()[xi] * k.data()[ki];
                                }
                            }
                        }
                        out[((bi * f + fi) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn all_ones_kernel_center_is_45() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap());
        let k = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k, None, 1, Padding::Same).unwrap();
        assert_eq!(g.value(y).data()[4], 45.0);
        // Corner: 1+2+4+5
        assert_eq!(g.value(y).data()[0], 12.0);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut g = Graph::<f64>::new();
        let xt = pseudo(vec![2, 1, 5, 7], 3);
        let x = g.constant(xt.clone());
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = g.constant(Tensor::new(vec![1, 1, 3, 3], kd).unwrap());
        let y = g.conv2d(x, k, None, 1, Padding::Same).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn strided_same_shape() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 8, 8]));
        let k = g.constant(Tensor::zeros(vec![3, 2, 5, 5]));
        let y = g.conv2d(x, k, None, 2, Padding::Same).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 4, 4]);
    }

    #[test]
    fn output_extent_contract() {
        for stride in 1..=2 {
            for h in 1..=16 {
                for k in [1, 3, 5] {
                    let mut g = Graph::<f64>::new();
                    let x = g.constant(Tensor::zeros(vec![1, 1, h, h + 1]));
                    let kk = g.constant(Tensor::zeros(vec![1, 1, k, k]));
                    let y = g.conv2d(x, kk, None, stride, Padding::Same).unwrap();
                    assert_eq!(g.value(y).shape()[2], h.div_ceil(stride));
                    assert_eq!(g.value(y).shape()[3], (h + 1).div_ceil(stride));
                }
            }
        }
    }

    #[test]
    fn matches_naive_loops() {
        for (stride, k, h, w) in [(1, 3, 6, 5), (2, 5, 8, 8), (2, 5, 7, 9), (1, 1, 4, 4), (2, 3, 5, 6)] {
            let xt = pseudo(vec![2, 3, h, w], (k * 31 + h) as u64);
            let kt = pseudo(vec![4, 3, k, k], (w * 7 + stride) as u64);
            let mut g = Graph::<f64>::new();
            let x = g.constant(xt.clone());
            let kv = g.constant(kt.clone());
            let y = g.conv2d(x, kv, None, stride, Padding::Same).unwrap();
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let pt = leading_pad(h, oh, k, stride, Padding::Same);
            let pl = leading_pad(w, ow, k, stride, Padding::Same);
            let expect = naive_conv(&xt, &kt, stride, pt, pl, oh, ow);
            for (a, b) in g.value(y).data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "stride {stride} k {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let k = g.constant(Tensor::zeros(vec![1, 3, 3, 3]));
        let err = g.conv2d(x, k, None, 1, Padding::Same).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn transpose_places_scaled_blocks() {
        let mut g = Graph::<f64>::new();
        let mut xd = vec![0.0; 4];
        xd[3] = 2.0; // pixel (1,1)
        let x = g.constant(Tensor::new(vec![1, 1, 2, 2], xd).unwrap());
        let k = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.transpose_conv2d(x, k, 2).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 1, 4, 4]);
        let expect = [
            0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 2.0, 4.0, //
            0.0, 0.0, 6.0, 8.0,
        ];
        assert_eq!(out.data(), &expect);
    }

    #[test]
    fn transpose_zero_input_and_shape() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![2, 3, 4, 4]));
        let k = g.constant(pseudo(vec![3, 5, 2, 2], 9));
        let y = g.transpose_conv2d(x, k, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 5, 8, 8]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transpose_rejects_overlap() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 1, 4, 4]));
        let k = g.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        assert!(g.transpose_conv2d(x, k, 2).is_err());
    }
}
