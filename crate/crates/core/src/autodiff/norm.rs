//! Layer and batch normalization. Both use population (divide-by-n) variance.

use super::{GradSink, Op, Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Debug)]
pub(crate) struct LayerNormCtx {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

#[derive(Debug)]
pub(crate) struct BatchNormCtx {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
    train: bool,
}

/// Whether batch normalization uses batch statistics or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

impl Tape {
    /// Normalizes over the last axis, then applies `gamma`/`beta` of shape `[D]`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        ensure!(
            self.shape(gamma) == [d] && self.shape(beta) == [d],
            Dimension,
            "layernorm affine must be [{d}]"
        );
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let ctx = LayerNormCtx {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(value, Op::LayerNorm(ctx), &[x, gamma, beta]))
    }

    /// Per-channel normalization of `[N, C, ...]`, followed by the affine `gamma`/`beta`.
    ///
    /// In [`NormMode::Train`] the batch statistics normalize the input and are
    /// folded into `state` with its momentum; in [`NormMode::Eval`] the running
    /// statistics are used unchanged.
    pub fn batchnorm3d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: NormMode,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(xs.len() >= 2, Dimension, "batchnorm input must be [N,C,...], got {:?}", xs);
        let (n, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        ensure!(
            self.shape(gamma) == [c] && self.shape(beta) == [c] && state.running_mean.len() == c,
            Dimension,
            "batchnorm parameters must have {c} channels"
        );
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let count = (n * s) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        match mode {
            NormMode::Train => {
                for ni in 0..n {
                    for ci in 0..c {
                        mean[ci] += xv[(ni * c + ci) * s..(ni * c + ci + 1) * s].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for ni in 0..n {
                    for ci in 0..c {
                        var[ci] += xv[(ni * c + ci) * s..(ni * c + ci + 1) * s]
                            .iter()
                            .map(|v| (v - mean[ci]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                let m = state.momentum;
                for ci in 0..c {
                    state.running_mean[ci] = (1.0 - m) * state.running_mean[ci] + m * mean[ci];
                    state.running_var[ci] = (1.0 - m) * state.running_var[ci] + m * var[ci];
                }
            }
            NormMode::Eval => {
                mean.copy_from_slice(&state.running_mean);
                var.copy_from_slice(&state.running_var);
            }
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * s;
                for i in off..off + s {
                    let h = (xv[i] - mean[ci]) * rstd[ci];
                    xhat[i] = h;
                    out[i] = h * gv[ci] + bv[ci];
                }
            }
        }
        let value = Tensor::new(&xs, out)?;
        let ctx = BatchNormCtx {
            x,
            gamma,
            beta,
            xhat,
            rstd,
            train: mode == NormMode::Train,
        };
        Ok(self.push(value, Op::BatchNorm(ctx), &[x, gamma, beta]))
    }
}

pub(super) fn layernorm_backward(tape: &Tape, ctx: &LayerNormCtx, g: &[f64], sink: &mut GradSink<'_>) {
    let gv = tape.value(ctx.gamma).data();
    let d = gv.len();
    if let Some(dg) = sink.slot(ctx.gamma) {
        for (gr, hr) in g.chunks(d).zip(ctx.xhat.chunks(d)) {
            for j in 0..d {
                dg[j] += gr[j] * hr[j];
            }
        }
    }
    if let Some(db) = sink.slot(ctx.beta) {
        for gr in g.chunks(d) {
            db.iter_mut().zip(gr).for_each(|(b, &gi)| *b += gi);
        }
    }
    if let Some(dx) = sink.slot(ctx.x) {
        for (r, (gr, hr)) in g.chunks(d).zip(ctx.xhat.chunks(d)).enumerate() {
            let mut mean_dh = 0.0;
            let mut mean_dh_h = 0.0;
            for j in 0..d {
                let dh = gr[j] * gv[j];
                mean_dh += dh;
                mean_dh_h += dh * hr[j];
            }
            mean_dh /= d as f64;
            mean_dh_h /= d as f64;
            for j in 0..d {
                let dh = gr[j] * gv[j];
                dx[r * d + j] += ctx.rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
            }
        }
    }
}

pub(super) fn batchnorm_backward(tape: &Tape, ctx: &BatchNormCtx, g: &[f64], sink: &mut GradSink<'_>) {
    let xs = tape.shape(ctx.x);
    let (n, c) = (xs[0], xs[1]);
    let s: usize = xs[2..].iter().product();
    let gv = tape.value(ctx.gamma).data();
    let mut sum_g = vec![0.0; c];
    let mut sum_gh = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * s;
            for i in off..off + s {
                sum_g[ci] += g[i];
                sum_gh[ci] += g[i] * ctx.xhat[i];
            }
        }
    }
    if let Some(dg) = sink.slot(ctx.gamma) {
        dg.iter_mut().zip(&sum_gh).for_each(|(d, v)| *d += v);
    }
    if let Some(db) = sink.slot(ctx.beta) {
        db.iter_mut().zip(&sum_g).for_each(|(d, v)| *d += v);
    }
    if let Some(dx) = sink.slot(ctx.x) {
        let count = (n * s) as f64;
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * s;
                let scale = gv[ci] * ctx.rstd[ci];
                for i in off..off + s {
                    dx[i] += if ctx.train {
                        scale * (g[i] - sum_g[ci] / count - ctx.xhat[i] * sum_gh[ci] / count)
                    } else {
                        scale * g[i]
                    };
                }
            }
        }
    }
}
