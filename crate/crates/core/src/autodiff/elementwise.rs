//! Shape manipulation, activations, reductions and the MSE loss.

use super::{GradSink, Op, Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::{strides_of, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let th = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Maps a flat index of `shape` to the flat index after reducing `axes` away.
fn reduced_index_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &e)| e)
        .collect();
    let out_strides = strides_of(&out_shape);
    let mut contrib = vec![0; shape.len()];
    let mut k = 0;
    for (i, c) in contrib.iter_mut().enumerate() {
        if !axes.contains(&i) {
            *c = out_strides[k];
            k += 1;
        }
    }
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for a in (0..shape.len()).rev() {
            idx[a] += 1;
            flat += contrib[a];
            if idx[a] < shape[a] {
                break;
            }
            flat -= contrib[a] * shape[a];
            idx[a] = 0;
        }
    }
    let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
    (out_shape, map)
}

/// For each output index of a permutation, the source flat index.
fn permute_sources(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n: usize = shape.iter().product();
    let mut src = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut flat = 0usize;
    for _ in 0..n {
        src.push(flat);
        for a in (0..out_shape.len()).rev() {
            idx[a] += 1;
            flat += in_strides[perm[a]];
            if idx[a] < out_shape[a] {
                break;
            }
            flat -= in_strides[perm[a]] * out_shape[a];
            idx[a] = 0;
        }
    }
    src
}

impl Tape {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.shape(a) == self.shape(b),
            Dimension,
            "add needs equal shapes, got {:?} and {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        ensure!(
            perm.len() == shape.len() && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true)),
            Dimension,
            "invalid permutation {:?} for shape {:?}",
            perm,
            shape
        );
        let src = permute_sources(&shape, perm);
        let xv = self.value(x).data();
        let data = src.iter().map(|&s| xv[s]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    /// Stacks `n` copies of `x` along a new leading axis.
    pub fn tile_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(xv.shape());
        let data = xv.data().repeat(n);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::TileBatch(x), &[x]))
    }

    /// Nearest-neighbour upsampling of `[N, C, T, H, W]` by integer factors.
    pub fn upsample_nearest3d(&mut self, x: Var, factor: [usize; 3]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(xs.len() == 5, Dimension, "upsample expects [N,C,T,H,W], got {:?}", xs);
        ensure!(factor.iter().all(|&f| f >= 1), Config, "upsample factors must be ≥ 1");
        let [ft, fh, fw] = factor;
        let (t, h, w) = (xs[2], xs[3], xs[4]);
        let out_shape = [xs[0], xs[1], t * ft, h * fh, w * fw];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for plane in xv.chunks(t * h * w) {
            for ot in 0..t * ft {
                for oh in 0..h * fh {
                    let row = &plane[((ot / ft) * h + oh / fh) * w..][..w];
                    for ow in 0..w * fw {
                        out.push(row[ow / fw]);
                    }
                }
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::Upsample { x, factor }, &[x]))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(elu);
        self.push(value, Op::Elu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(axis < shape.len(), Dimension, "softmax axis {axis} out of range for {:?}", shape);
        let stride: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let mut out = self.value(x).data().to_vec();
        for block in out.chunks_mut(len * stride) {
            for inner in 0..stride {
                let max = (0..len).map(|i| block[i * stride + inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (block[i * stride + inner] - max).exp();
                    block[i * stride + inner] = e;
                    total += e;
                }
                for i in 0..len {
                    block[i * stride + inner] /= total;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Arithmetic mean over `axes`; reduced axes are removed from the shape.
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(
            axes.iter().all(|&a| a < shape.len()),
            Dimension,
            "mean axes {:?} out of range for {:?}",
            axes,
            shape
        );
        let (out_shape, map) = reduced_index_map(&shape, axes);
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let mut out = vec![0.0; out_shape.iter().product()];
        for (&o, &v) in map.iter().zip(self.value(x).data()) {
            out[o] += v;
        }
        out.iter_mut().for_each(|v| *v /= count as f64);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            Op::Mean {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Mean of squared differences.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        ensure!(
            self.shape(pred) == self.shape(target),
            Dimension,
            "mse needs equal shapes, got {:?} and {:?}",
            self.shape(pred),
            self.shape(target)
        );
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let mse = p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64;
        Ok(self.push(Tensor::scalar(mse), Op::Mse { pred, target }, &[pred, target]))
    }
}

pub(super) fn permute_backward(tape: &Tape, x: Var, perm: &[usize], g: &[f64], sink: &mut GradSink<'_>) {
    let shape = tape.shape(x).to_vec();
    if let Some(dx) = sink.slot(x) {
        for (&s, &gi) in permute_sources(&shape, perm).iter().zip(g) {
            dx[s] += gi;
        }
    }
}

pub(super) fn upsample_backward(tape: &Tape, x: Var, factor: [usize; 3], g: &[f64], sink: &mut GradSink<'_>) {
    let xs = tape.shape(x).to_vec();
    let [ft, fh, fw] = factor;
    let (t, h, w) = (xs[2], xs[3], xs[4]);
    if let Some(dx) = sink.slot(x) {
        let out_plane = t * ft * h * fh * w * fw;
        for (plane, gp) in dx.chunks_mut(t * h * w).zip(g.chunks(out_plane)) {
            let mut o = 0;
            for ot in 0..t * ft {
                for oh in 0..h * fh {
                    let base = ((ot / ft) * h + oh / fh) * w;
                    for ow in 0..w * fw {
                        plane[base + ow / fw] += gp[o];
                        o += 1;
                    }
                }
            }
        }
    }
}

pub(super) fn elu_backward(tape: &Tape, x: Var, y: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
    let xv = tape.value(x).data();
    if let Some(dx) = sink.slot(x) {
        for i in 0..dx.len() {
            let d = if xv[i] > 0.0 { 1.0 } else { y.data()[i] + 1.0 };
            dx[i] += g[i] * d;
        }
    }
}

pub(super) fn gelu_backward(tape: &Tape, x: Var, g: &[f64], sink: &mut GradSink<'_>) {
    let xv = tape.value(x).data();
    if let Some(dx) = sink.slot(x) {
        for i in 0..dx.len() {
            dx[i] += g[i] * gelu_grad(xv[i]);
        }
    }
}

pub(super) fn softmax_backward(x: Var, axis: usize, y: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
    let shape = y.shape();
    let stride: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let yv = y.data();
    if let Some(dx) = sink.slot(x) {
        for b in 0..yv.len() / (len * stride) {
            let off = b * len * stride;
            for inner in 0..stride {
                let dot: f64 = (0..len)
                    .map(|i| yv[off + i * stride + inner] * g[off + i * stride + inner])
                    .sum();
                for i in 0..len {
                    let k = off + i * stride + inner;
                    dx[k] += yv[k] * (g[k] - dot);
                }
            }
        }
    }
}

pub(super) fn mean_backward(tape: &Tape, x: Var, axes: &[usize], g: &[f64], sink: &mut GradSink<'_>) {
    let shape = tape.shape(x).to_vec();
    let count: usize = axes.iter().map(|&a| shape[a]).product();
    if let Some(dx) = sink.slot(x) {
        let (_, map) = reduced_index_map(&shape, axes);
        for (d, &o) in dx.iter_mut().zip(&map) {
            *d += g[o] / count as f64;
        }
    }
}

pub(super) fn mse_backward(tape: &Tape, pred: Var, target: Var, g: &[f64], sink: &mut GradSink<'_>) {
    let p = tape.value(pred).data();
    let t = tape.value(target).data();
    let scale = 2.0 * g[0] / p.len() as f64;
    if let Some(dp) = sink.slot(pred) {
        for i in 0..dp.len() {
            dp[i] += scale * (p[i] - t[i]);
        }
    }
    if let Some(dt) = sink.slot(target) {
        for i in 0..dt.len() {
            dt[i] -= scale * (p[i] - t[i]);
        }
    }
}
