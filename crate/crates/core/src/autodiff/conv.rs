//! 3-D convolutions over `[N, C, T, H, W]` volumes with zero padding.

use super::gemm::{gemm, Mat};
use super::{GradSink, Op, Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Debug)]
pub(crate) struct Conv3dCtx {
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: Geometry,
}

#[derive(Debug)]
pub(crate) struct DepthwiseCtx {
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: Geometry,
}

/// Shapes and hyper-parameters shared by forward and backward passes.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    k: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn patch(&self) -> usize {
        self.c * self.kernel.iter().product::<usize>()
    }
}

/// Output extent of a strided, zero-padded window along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (stride >= 1 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

fn geometry(
    xs: &[usize],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    k: usize,
) -> Result<Geometry> {
    ensure!(xs.len() == 5, Dimension, "conv3d input must be [N,C,T,H,W], got {:?}", xs);
    let mut output = [0; 3];
    for a in 0..3 {
        output[a] = conv_out_extent(xs[2 + a], kernel[a], stride[a], pad[a]).ok_or_else(|| {
            crate::Error::Dimension(format!(
                "kernel {:?} with stride {:?} does not fit padded input {:?} (padding {:?})",
                kernel,
                stride,
                &xs[2..],
                pad
            ))
        })?;
    }
    Ok(Geometry {
        n: xs[0],
        c: xs[1],
        k,
        input: [xs[2], xs[3], xs[4]],
        kernel,
        stride,
        pad,
        output,
    })
}

/// Unfolds one sample `[C, T, H, W]` into a `[C·kT·kH·kW, T'·H'·W']` matrix.
fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let [it, ih, iw] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [ot, oh, ow] = g.output;
    let p = g.out_volume();
    let mut row = 0;
    for c in 0..g.c {
        let xc = &x[c * it * ih * iw..(c + 1) * it * ih * iw];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for t in 0..ot {
                        let ti = (t * st + dt) as isize - pt as isize;
                        for h in 0..oh {
                            let hi = (h * sh + dh) as isize - ph as isize;
                            let valid_th = ti >= 0 && ti < it as isize && hi >= 0 && hi < ih as isize;
                            let base = if valid_th {
                                (ti as usize * ih + hi as usize) * iw
                            } else {
                                0
                            };
                            for w in 0..ow {
                                let wi = (w * sw + dw) as isize - pw as isize;
                                dst[o] = if valid_th && wi >= 0 && wi < iw as isize {
                                    xc[base + wi as usize]
                                } else {
                                    0.0
                                };
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into `dx`.
fn col2im(cols: &[f64], g: &Geometry, dx: &mut [f64]) {
    let [it, ih, iw] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [ot, oh, ow] = g.output;
    let p = g.out_volume();
    let mut row = 0;
    for c in 0..g.c {
        let dxc = &mut dx[c * it * ih * iw..(c + 1) * it * ih * iw];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for t in 0..ot {
                        let ti = (t * st + dt) as isize - pt as isize;
                        for h in 0..oh {
                            let hi = (h * sh + dh) as isize - ph as isize;
                            if ti < 0 || ti >= it as isize || hi < 0 || hi >= ih as isize {
                                o += ow;
                                continue;
                            }
                            let base = (ti as usize * ih + hi as usize) * iw;
                            for w in 0..ow {
                                let wi = (w * sw + dw) as isize - pw as isize;
                                if wi >= 0 && wi < iw as isize {
                                    dxc[base + wi as usize] += src[o];
                                }
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

impl Tape {
    /// Dense 3-D convolution.
    ///
    /// `x: [N, C, T, H, W]`, `w: [K, C, kT, kH, kW]`, `b: [K]`. Output extents
    /// follow `floor((T + 2p - k) / s) + 1` per axis.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        ensure!(ws.len() == 5, Dimension, "conv3d weight must be 5-D, got {:?}", ws);
        ensure!(
            xs.len() == 5 && ws[1] == xs[1],
            Dimension,
            "conv3d channel mismatch: input {:?}, weight {:?}",
            xs,
            ws
        );
        if let Some(b) = b {
            ensure!(self.shape(b) == [ws[0]], Dimension, "conv3d bias must be [{}]", ws[0]);
        }
        let geom = geometry(&xs, [ws[2], ws[3], ws[4]], stride, pad, ws[0])?;
        let (p, r, k) = (geom.out_volume(), geom.patch(), geom.k);
        let xin = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; geom.n * k * p];
        let mut cols = vec![0.0; r * p];
        for (ni, y) in out.chunks_mut(k * p).enumerate() {
            im2col(&xin[ni * geom.c * geom.in_volume()..], &geom, &mut cols);
            if let Some(b) = b {
                for (row, &bias) in y.chunks_mut(p).zip(self.value(b).data()) {
                    row.fill(bias);
                }
            }
            let beta = if b.is_some() { 1.0 } else { 0.0 };
            gemm(1.0, Mat::new(wv, k, r), Mat::new(&cols, r, p), beta, y);
        }
        let [ot, oh, ow] = geom.output;
        let value = Tensor::new(&[geom.n, k, ot, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv3d(Conv3dCtx { x, w, b, geom }), &inputs))
    }

    /// Per-channel 3-D convolution: `w: [C, kT, kH, kW]`, stride 1.
    pub fn depthwise_conv3d(&mut self, x: Var, w: Var, b: Option<Var>, pad: [usize; 3]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        ensure!(
            ws.len() == 4 && xs.len() == 5 && ws[0] == xs[1],
            Dimension,
            "depthwise conv expects w [C,kT,kH,kW] matching input channels; got input {:?}, weight {:?}",
            xs,
            ws
        );
        let geom = geometry(&xs, [ws[1], ws[2], ws[3]], [1, 1, 1], pad, xs[1])?;
        let xin = self.value(x).data();
        let wv = self.value(w).data();
        let bias = b.map(|b| self.value(b).data().to_vec());
        let mut out = vec![0.0; geom.n * geom.c * geom.out_volume()];
        depthwise_apply(&geom, |ni, c, xo, xi, tap| {
            out[(ni * geom.c + c) * geom.out_volume() + xo] += wv[c * tap.1 + tap.0] * xin[(ni * geom.c + c) * geom.in_volume() + xi];
        });
        if let Some(bias) = bias {
            for (i, chunk) in out.chunks_mut(geom.out_volume()).enumerate() {
                let bc = bias[i % geom.c];
                chunk.iter_mut().for_each(|v| *v += bc);
            }
        }
        let [ot, oh, ow] = geom.output;
        let value = Tensor::new(&[geom.n, geom.c, ot, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::DepthwiseConv3d(DepthwiseCtx { x, w, b, geom }), &inputs))
    }
}

/// Visits every (sample, channel, output index, input index, (tap, taps)) term
/// of a stride-1 depthwise convolution that touches the unpadded input.
fn depthwise_apply(g: &Geometry, mut f: impl FnMut(usize, usize, usize, usize, (usize, usize))) {
    let [it, ih, iw] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [pt, ph, pw] = g.pad;
    let [ot, oh, ow] = g.output;
    let taps = kt * kh * kw;
    for ni in 0..g.n {
        for c in 0..g.c {
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let tap = (dt * kh + dh) * kw + dw;
                        for t in 0..ot {
                            let ti = (t + dt) as isize - pt as isize;
                            if ti < 0 || ti >= it as isize {
                                continue;
                            }
                            for h in 0..oh {
                                let hi = (h + dh) as isize - ph as isize;
                                if hi < 0 || hi >= ih as isize {
                                    continue;
                                }
                                for w in 0..ow {
                                    let wi = (w + dw) as isize - pw as isize;
                                    if wi < 0 || wi >= iw as isize {
                                        continue;
                                    }
                                    let xo = (t * oh + h) * ow + w;
                                    let xi = (ti as usize * ih + hi as usize) * iw + wi as usize;
                                    f(ni, c, xo, xi, (tap, taps));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn conv3d_backward(tape: &Tape, ctx: &Conv3dCtx, g: &[f64], sink: &mut GradSink<'_>) {
    let geom = ctx.geom;
    let (p, r, k) = (geom.out_volume(), geom.patch(), geom.k);
    let xin = tape.value(ctx.x).data();
    let wv = tape.value(ctx.w).data();
    let in_len = geom.c * geom.in_volume();
    let mut cols = vec![0.0; r * p];
    if tape.requires_grad(ctx.w) {
        let dw = sink.slot(ctx.w).unwrap();
        for ni in 0..geom.n {
            im2col(&xin[ni * in_len..], &geom, &mut cols);
            let gy = &g[ni * k * p..(ni + 1) * k * p];
            gemm(1.0, Mat::new(gy, k, p), Mat::new(&cols, r, p).t(), 1.0, dw);
        }
    }
    if let Some(b) = ctx.b {
        if let Some(db) = sink.slot(b) {
            for ni in 0..geom.n {
                for (kk, d) in db.iter_mut().enumerate() {
                    *d += g[(ni * k + kk) * p..(ni * k + kk + 1) * p].iter().sum::<f64>();
                }
            }
        }
    }
    if let Some(dx) = sink.slot(ctx.x) {
        for ni in 0..geom.n {
            let gy = &g[ni * k * p..(ni + 1) * k * p];
            gemm(1.0, Mat::new(wv, k, r).t(), Mat::new(gy, k, p), 0.0, &mut cols);
            col2im(&cols, &geom, &mut dx[ni * in_len..(ni + 1) * in_len]);
        }
    }
}

pub(super) fn depthwise_backward(tape: &Tape, ctx: &DepthwiseCtx, g: &[f64], sink: &mut GradSink<'_>) {
    let geom = ctx.geom;
    let (vin, vout) = (geom.in_volume(), geom.out_volume());
    let xin = tape.value(ctx.x).data();
    let wv = tape.value(ctx.w).data();
    if let Some(dw) = sink.slot(ctx.w) {
        depthwise_apply(&geom, |ni, c, xo, xi, (tap, taps)| {
            dw[c * taps + tap] += g[(ni * geom.c + c) * vout + xo] * xin[(ni * geom.c + c) * vin + xi];
        });
    }
    if let Some(dx) = sink.slot(ctx.x) {
        depthwise_apply(&geom, |ni, c, xo, xi, (tap, taps)| {
            dx[(ni * geom.c + c) * vin + xi] += g[(ni * geom.c + c) * vout + xo] * wv[c * taps + tap];
        });
    }
    if let Some(b) = ctx.b {
        if let Some(db) = sink.slot(b) {
            for (i, chunk) in g.chunks(vout).enumerate() {
                db[i % geom.c] += chunk.iter().sum::<f64>();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop convolution used as an independent oracle.
    fn naive_conv3d(x: &Tensor, w: &Tensor, b: &[f64], stride: [usize; 3], pad: [usize; 3]) -> Tensor {
        let (xs, ws) = (x.shape(), w.shape());
        let out: Vec<usize> = (0..3)
            .map(|a| (xs[2 + a] + 2 * pad[a] - ws[2 + a]) / stride[a] + 1)
            .collect();
        let mut y = Tensor::zeros(&[xs[0], ws[0], out[0], out[1], out[2]]);
        let ys = y.strides();
        let xst = x.strides();
        let wst = w.strides();
        for n in 0..xs[0] {
            for k in 0..ws[0] {
                for t in 0..out[0] {
                    for h in 0..out[1] {
                        for ww in 0..out[2] {
                            let mut acc = b[k];
                            for c in 0..xs[1] {
                                for dt in 0..ws[2] {
                                    for dh in 0..ws[3] {
                                        for dw in 0..ws[4] {
                                            let ti = (t * stride[0] + dt) as isize - pad[0] as isize;
                                            let hi = (h * stride[1] + dh) as isize - pad[1] as isize;
                                            let wi = (ww * stride[2] + dw) as isize - pad[2] as isize;
                                            if ti < 0 || hi < 0 || wi < 0 || ti >= xs[2] as isize || hi >= xs[3] as isize || wi >= xs[4] as isize {
                                                continue;
                                            }
                                            let xv = x.data()[n * xst[0] + c * xst[1] + ti as usize * xst[2] + hi as usize * xst[3] + wi as usize];
                                            let wv = w.data()[k * wst[0] + c * wst[1] + dt * wst[2] + dh * wst[3] + dw];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            y.data_mut()[n * ys[0] + k * ys[1] + t * ys[2] + h * ys[3] + ww] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv_out_extent(120, 3, 2, 1), Some(60));
        assert_eq!(conv_out_extent(64, 7, 4, 3), Some(16));
        assert_eq!(conv_out_extent(2, 7, 1, 0), None);
    }

    #[test]
    fn stem_geometry_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 120, 64, 64]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 7, 7]));
        let y = tape.conv3d(x, w, None, [2, 4, 4], [1, 3, 3]).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 60, 16, 16]);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xt = Tensor::randn(&[2, 1, 3, 4, 5], 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone());
        let w = tape.constant(Tensor::ones(&[1, 1, 1, 1, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv3d(x, w, Some(b), [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(tape.value(y), &xt);
    }

    #[test]
    fn kernel_larger_than_padded_input_fails() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3, 3]));
        assert!(matches!(
            tape.conv3d(x, w, None, [1, 1, 1], [0, 0, 0]),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (stride, pad) in [([1, 1, 1], [1, 1, 1]), ([2, 1, 2], [0, 1, 1]), ([1, 2, 1], [1, 0, 2])] {
            let xt = Tensor::randn(&[1, 2, 4, 4, 4], 1.0, &mut rng);
            let wt = Tensor::randn(&[3, 2, 3, 3, 3], 1.0, &mut rng);
            let bt = Tensor::randn(&[3], 1.0, &mut rng);
            let want = naive_conv3d(&xt, &wt, bt.data(), stride, pad);
            let mut tape = Tape::new();
            let x = tape.constant(xt);
            let w = tape.constant(wt);
            let b = tape.constant(bt);
            let y = tape.conv3d(x, w, Some(b), stride, pad).unwrap();
            assert_eq!(tape.shape(y), want.shape());
            assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn depthwise_matches_grouped_dense_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xt = Tensor::randn(&[2, 3, 3, 4, 4], 1.0, &mut rng);
        let wt = Tensor::randn(&[3, 3, 3, 3], 1.0, &mut rng);
        // Embed the depthwise kernel into a block-diagonal dense kernel.
        let dense = Tensor::from_fn(&[3, 3, 3, 3, 3], |i| {
            let (k, c, tap) = (i / 81, (i / 27) % 3, i % 27);
            if k == c {
                wt.data()[c * 27 + tap]
            } else {
                0.0
            }
        });
        let want = naive_conv3d(&xt, &dense, &[0.0; 3], [1, 1, 1], [1, 1, 1]);
        let mut tape = Tape::new();
        let x = tape.constant(xt);
        let w = tape.constant(wt);
        let y = tape.depthwise_conv3d(x, w, None, [1, 1, 1]).unwrap();
        assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
    }
}
