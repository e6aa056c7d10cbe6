//! Multi-head scaled dot-product attention with an optional decomposed
//! relative-position bias over a `(t, h, w)` token grid.
//!
//! The core op is fused: scores are produced one block of query rows at a
//! time and only the per-row log-sum-exp is kept for the backward pass, which
//! recomputes the probabilities. Memory stays `O(block · L)` instead of
//! `O(L²)`, which matters for the first stage where `L` runs into the tens of
//! thousands.

use super::gemm::{gemm, Mat};
use super::kernels::{add_bias, bias_grad, exp_shifted_sum, row_max, softmax_grad};
use super::{GradSink, Op, Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

const QUERY_BLOCK: usize = 64;

/// Decomposed relative-position bias: `B[i, j] = T[ti - tj] + H[hi - hj] + W[wi - wj]`.
///
/// Tables have shape `[heads, 2·extent − 1]`; entry `extent − 1` is offset zero.
#[derive(Clone, Copy, Debug)]
pub struct RelBias {
    pub grid: [usize; 3],
    pub t_table: Var,
    pub h_table: Var,
    pub w_table: Var,
}

/// Projection weights of one attention layer, each `[D, D]` with `[D]` biases.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Debug)]
pub(crate) struct AttentionCtx {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    rel: Option<RelBias>,
    /// Log-sum-exp of every score row, indexed `[n][head][row]`.
    lse: Vec<f64>,
}

struct Dims {
    l: usize,
    d: usize,
    heads: usize,
    dh: usize,
}

/// Copies the `[L, dh]` slice of one head out of an `[L, D]` matrix, scaled.
fn gather_head(src: &[f64], dims: &Dims, head: usize, scale: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(dims.l * dims.dh);
    for row in src.chunks(dims.d) {
        out.extend(row[head * dims.dh..(head + 1) * dims.dh].iter().map(|v| v * scale));
    }
    out
}

fn scatter_head(dst: &mut [f64], src: &[f64], dims: &Dims, head: usize, scale: f64) {
    for (row, s) in dst.chunks_mut(dims.d).zip(src.chunks(dims.dh)) {
        for (d, v) in row[head * dims.dh..(head + 1) * dims.dh].iter_mut().zip(s) {
            *d += v * scale;
        }
    }
}

struct BiasTables<'a> {
    grid: [usize; 3],
    t: &'a [f64],
    h: &'a [f64],
    w: &'a [f64],
}

impl BiasTables<'_> {
    fn coords(&self, i: usize) -> [usize; 3] {
        let [_, gh, gw] = self.grid;
        [i / (gh * gw), (i / gw) % gh, i % gw]
    }

    /// Splits the bias row of query `i` into a per-`tj` term and an `(hj, wj)` plane.
    fn row_parts(&self, i: usize, t_part: &mut [f64], plane: &mut [f64]) {
        let [gt, gh, gw] = self.grid;
        let [ti, hi, wi] = self.coords(i);
        for (tj, b) in t_part.iter_mut().enumerate() {
            *b = self.t[ti + gt - 1 - tj];
        }
        for (hj, prow) in plane.chunks_exact_mut(gw).enumerate() {
            let bh = self.h[hi + gh - 1 - hj];
            for (wj, b) in prow.iter_mut().enumerate() {
                *b = bh + self.w[wi + gw - 1 - wj];
            }
        }
    }
}

/// Scratch space and gradient accumulators for the relative bias of one head.
struct BiasGrad {
    grid: [usize; 3],
    t_sums: Vec<f64>,
    plane_sums: Vec<f64>,
}

impl BiasGrad {
    fn new(grid: [usize; 3]) -> Self {
        Self {
            grid,
            t_sums: vec![0.0; grid[0]],
            plane_sums: vec![0.0; grid[1] * grid[2]],
        }
    }

    fn accumulate(&mut self, i: usize, ds: &[f64], dt: &mut [f64], dh: &mut [f64], dw: &mut [f64]) {
        let [gt, gh, gw] = self.grid;
        let [ti, hi, wi] = [i / (gh * gw), (i / gw) % gh, i % gw];
        self.plane_sums.iter_mut().for_each(|v| *v = 0.0);
        bias_grad(ds, &mut self.t_sums, &mut self.plane_sums);
        for (tj, &s) in self.t_sums.iter().enumerate() {
            dt[ti + gt - 1 - tj] += s;
        }
        for (hj, prow) in self.plane_sums.chunks_exact(gw).enumerate() {
            dh[hi + gh - 1 - hj] += prow.iter().sum::<f64>();
            for (wj, &s) in prow.iter().enumerate() {
                dw[wi + gw - 1 - wj] += s;
            }
        }
    }
}

impl Tape {
    /// Fused `softmax(q·kᵀ/√dh + B)·v` over `[N, L, D]` inputs split into `heads`.
    pub fn attention_core(&mut self, q: Var, k: Var, v: Var, heads: usize, rel: Option<RelBias>) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        ensure!(shape.len() == 3, Dimension, "attention expects [N,L,D], got {:?}", shape);
        ensure!(
            self.shape(k) == shape.as_slice() && self.shape(v) == shape.as_slice(),
            Dimension,
            "q, k, v shapes differ"
        );
        let (n, l, d) = (shape[0], shape[1], shape[2]);
        ensure!(heads >= 1 && d % heads == 0, Config, "width {d} not divisible by {heads} heads");
        let dims = Dims {
            l,
            d,
            heads,
            dh: d / heads,
        };
        if let Some(rel) = &rel {
            let [gt, gh, gw] = rel.grid;
            ensure!(gt * gh * gw == l, Dimension, "grid {:?} does not cover {l} tokens", rel.grid);
            for (table, ext) in [(rel.t_table, gt), (rel.h_table, gh), (rel.w_table, gw)] {
                ensure!(
                    self.shape(table) == [heads, 2 * ext - 1],
                    Dimension,
                    "relative table must be [{heads}, {}], got {:?}",
                    2 * ext - 1,
                    self.shape(table)
                );
            }
        }
        let scale = 1.0 / (dims.dh as f64).sqrt();
        let mut out = vec![0.0; n * l * d];
        let mut lse = vec![0.0; n * heads * l];
        let mut scores = vec![0.0; QUERY_BLOCK.min(l) * l];
        let mut ob = vec![0.0; QUERY_BLOCK.min(l) * dims.dh];
        let mut totals = vec![0.0; QUERY_BLOCK.min(l)];
        let (mut t_part, mut plane) = match &rel {
            Some(r) => (vec![0.0; r.grid[0]], vec![0.0; r.grid[1] * r.grid[2]]),
            None => (Vec::new(), Vec::new()),
        };
        for ni in 0..n {
            let span = ni * l * d..(ni + 1) * l * d;
            for head in 0..heads {
                let qh = gather_head(&self.value(q).data()[span.clone()], &dims, head, scale);
                let kh = gather_head(&self.value(k).data()[span.clone()], &dims, head, 1.0);
                let vh = gather_head(&self.value(v).data()[span.clone()], &dims, head, 1.0);
                let tables = rel.map(|r| self.head_tables(&r, head, &dims));
                for b0 in (0..l).step_by(QUERY_BLOCK) {
                    let rows = QUERY_BLOCK.min(l - b0);
                    let s = &mut scores[..rows * l];
                    gemm(
                        1.0,
                        Mat::new(&qh[b0 * dims.dh..(b0 + rows) * dims.dh], rows, dims.dh),
                        Mat::new(&kh, l, dims.dh).t(),
                        0.0,
                        s,
                    );
                    for (r, row) in s.chunks_mut(l).enumerate() {
                        if let Some(t) = &tables {
                            t.row_parts(b0 + r, &mut t_part, &mut plane);
                            add_bias(row, &t_part, &plane);
                        }
                        let max = row_max(row);
                        let total = exp_shifted_sum(row, max);
                        totals[r] = total;
                        lse[(ni * heads + head) * l + b0 + r] = max + total.ln();
                    }
                    let o = &mut ob[..rows * dims.dh];
                    gemm(1.0, Mat::new(s, rows, l), Mat::new(&vh, l, dims.dh), 0.0, o);
                    let dst = &mut out[span.start + b0 * d..span.start + (b0 + rows) * d];
                    for ((drow, orow), total) in dst.chunks_mut(d).zip(o.chunks(dims.dh)).zip(&totals) {
                        for (dv, ov) in drow[head * dims.dh..(head + 1) * dims.dh].iter_mut().zip(orow) {
                            *dv = ov / total;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let mut inputs = vec![q, k, v];
        if let Some(r) = &rel {
            inputs.extend([r.t_table, r.h_table, r.w_table]);
        }
        let ctx = AttentionCtx {
            q,
            k,
            v,
            heads,
            rel,
            lse,
        };
        Ok(self.push(value, Op::Attention(Box::new(ctx)), &inputs))
    }

    fn head_tables(&self, rel: &RelBias, head: usize, _dims: &Dims) -> BiasTables<'_> {
        let [gt, gh, gw] = rel.grid;
        BiasTables {
            grid: rel.grid,
            t: &self.value(rel.t_table).data()[head * (2 * gt - 1)..(head + 1) * (2 * gt - 1)],
            h: &self.value(rel.h_table).data()[head * (2 * gh - 1)..(head + 1) * (2 * gh - 1)],
            w: &self.value(rel.w_table).data()[head * (2 * gw - 1)..(head + 1) * (2 * gw - 1)],
        }
    }

    /// Multi-head self-attention with input and output projections.
    pub fn attention(&mut self, x: Var, w: &AttentionWeights, heads: usize, rel: Option<RelBias>) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        ensure!(heads >= 1 && d.is_multiple_of(heads), Config, "width {d} not divisible by {heads} heads");
        let q = self.linear(x, w.wq, Some(w.bq))?;
        let k = self.linear(x, w.wk, Some(w.bk))?;
        let v = self.linear(x, w.wv, Some(w.bv))?;
        let a = self.attention_core(q, k, v, heads, rel)?;
        self.linear(a, w.wo, Some(w.bo))
    }
}

pub(super) fn attention_backward(tape: &Tape, ctx: &AttentionCtx, y: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
    let shape = tape.shape(ctx.q);
    let (n, l, d) = (shape[0], shape[1], shape[2]);
    let dims = Dims {
        l,
        d,
        heads: ctx.heads,
        dh: d / ctx.heads,
    };
    let scale = 1.0 / (dims.dh as f64).sqrt();
    let mut dq = vec![0.0; n * l * d];
    let mut dk = vec![0.0; n * l * d];
    let mut dv = vec![0.0; n * l * d];
    let rel_grads = ctx.rel.map(|r| {
        let [gt, gh, gw] = r.grid;
        (
            vec![0.0; dims.heads * (2 * gt - 1)],
            vec![0.0; dims.heads * (2 * gh - 1)],
            vec![0.0; dims.heads * (2 * gw - 1)],
        )
    });
    let mut rel_grads = rel_grads;
    let mut bias_scratch = ctx.rel.map(|r| BiasGrad::new(r.grid));
    let (mut t_part, mut plane) = match &ctx.rel {
        Some(r) => (vec![0.0; r.grid[0]], vec![0.0; r.grid[1] * r.grid[2]]),
        None => (Vec::new(), Vec::new()),
    };
    let block = QUERY_BLOCK.min(l);
    let mut p = vec![0.0; block * l];
    let mut dp = vec![0.0; block * l];
    let mut dqb = vec![0.0; block * dims.dh];
    for ni in 0..n {
        let span = ni * l * d..(ni + 1) * l * d;
        for head in 0..dims.heads {
            let qh = gather_head(&tape.value(ctx.q).data()[span.clone()], &dims, head, scale);
            let kh = gather_head(&tape.value(ctx.k).data()[span.clone()], &dims, head, 1.0);
            let vh = gather_head(&tape.value(ctx.v).data()[span.clone()], &dims, head, 1.0);
            let doh = gather_head(&g[span.clone()], &dims, head, 1.0);
            let oh = gather_head(&y.data()[span.clone()], &dims, head, 1.0);
            let delta: Vec<f64> = doh
                .chunks(dims.dh)
                .zip(oh.chunks(dims.dh))
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum())
                .collect();
            let tables = ctx.rel.map(|r| tape.head_tables(&r, head, &dims));
            let mut dkh = vec![0.0; l * dims.dh];
            let mut dvh = vec![0.0; l * dims.dh];
            for b0 in (0..l).step_by(QUERY_BLOCK) {
                let rows = QUERY_BLOCK.min(l - b0);
                let qb = &qh[b0 * dims.dh..(b0 + rows) * dims.dh];
                let dob = &doh[b0 * dims.dh..(b0 + rows) * dims.dh];
                let pb = &mut p[..rows * l];
                gemm(1.0, Mat::new(qb, rows, dims.dh), Mat::new(&kh, l, dims.dh).t(), 0.0, pb);
                for (r, row) in pb.chunks_mut(l).enumerate() {
                    if let Some(t) = &tables {
                        t.row_parts(b0 + r, &mut t_part, &mut plane);
                        add_bias(row, &t_part, &plane);
                    }
                    let m = ctx.lse[(ni * dims.heads + head) * l + b0 + r];
                    exp_shifted_sum(row, m);
                }
                let dpb = &mut dp[..rows * l];
                gemm(1.0, Mat::new(dob, rows, dims.dh), Mat::new(&vh, l, dims.dh).t(), 0.0, dpb);
                gemm(1.0, Mat::new(pb, rows, l).t(), Mat::new(dob, rows, dims.dh), 1.0, &mut dvh);
                // dpb <- dS = P ∘ (dP − δ)
                for (r, (dsrow, prow)) in dpb.chunks_mut(l).zip(pb.chunks(l)).enumerate() {
                    let dl = delta[b0 + r];
                    softmax_grad(dsrow, prow, dl);
                    if let (Some((dt, dhh, dw)), Some(bg)) = (rel_grads.as_mut(), bias_scratch.as_mut()) {
                        let [gt, gh, gw] = bg.grid;
                        bg.accumulate(
                            b0 + r,
                            dsrow,
                            &mut dt[head * (2 * gt - 1)..(head + 1) * (2 * gt - 1)],
                            &mut dhh[head * (2 * gh - 1)..(head + 1) * (2 * gh - 1)],
                            &mut dw[head * (2 * gw - 1)..(head + 1) * (2 * gw - 1)],
                        );
                    }
                }
                let dsb = &dp[..rows * l];
                let dq_block = &mut dqb[..rows * dims.dh];
                gemm(1.0, Mat::new(dsb, rows, l), Mat::new(&kh, l, dims.dh), 0.0, dq_block);
                scatter_head(
                    &mut dq[span.start + b0 * d..span.start + (b0 + rows) * d],
                    dq_block,
                    &dims,
                    head,
                    scale,
                );
                gemm(1.0, Mat::new(dsb, rows, l).t(), Mat::new(qb, rows, dims.dh), 1.0, &mut dkh);
            }
            scatter_head(&mut dk[span.clone()], &dkh, &dims, head, 1.0);
            scatter_head(&mut dv[span.clone()], &dvh, &dims, head, 1.0);
        }
    }
    sink.accumulate(ctx.q, &dq);
    sink.accumulate(ctx.k, &dk);
    sink.accumulate(ctx.v, &dv);
    if let (Some(rel), Some((dt, dh, dw))) = (ctx.rel, rel_grads) {
        sink.accumulate(rel.t_table, &dt);
        sink.accumulate(rel.h_table, &dh);
        sink.accumulate(rel.w_table, &dw);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct per-pair softmax attention, used as the reference.
    fn naive(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, bias: Option<&dyn Fn(usize, usize, usize) -> f64>) -> Vec<f64> {
        let s = q.shape();
        let (n, l, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let mut out = vec![0.0; n * l * d];
        for ni in 0..n {
            for h in 0..heads {
                for i in 0..l {
                    let logits: Vec<f64> = (0..l)
                        .map(|j| {
                            let dot: f64 = (0..dh)
                                .map(|c| q.data()[(ni * l + i) * d + h * dh + c] * k.data()[(ni * l + j) * d + h * dh + c])
                                .sum();
                            dot / (dh as f64).sqrt() + bias.map_or(0.0, |b| b(h, i, j))
                        })
                        .collect();
                    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in 0..dh {
                        out[(ni * l + i) * d + h * dh + c] =
                            (0..l).map(|j| e[j] / z * v.data()[(ni * l + j) * d + h * dh + c]).sum();
                    }
                }
            }
        }
        out
    }

    #[test]
    fn core_matches_naive_oracle_with_and_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // L = 2*3*2 = 12 tokens, more than one query block is not needed here
        let (n, l, d, heads) = (2, 12, 4, 2);
        let q = Tensor::randn(&[n, l, d], 1.0, &mut rng);
        let k = Tensor::randn(&[n, l, d], 1.0, &mut rng);
        let v = Tensor::randn(&[n, l, d], 1.0, &mut rng);
        let bt = Tensor::randn(&[heads, 3], 1.0, &mut rng);
        let bh = Tensor::randn(&[heads, 5], 1.0, &mut rng);
        let bw = Tensor::randn(&[heads, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let plain = tape.attention_core(qv, kv, vv, heads, None).unwrap();
        let want = naive(&q, &k, &v, heads, None);
        assert!(tape.value(plain).data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));

        let rel = RelBias {
            grid: [2, 3, 2],
            t_table: tape.constant(bt.clone()),
            h_table: tape.constant(bh.clone()),
            w_table: tape.constant(bw.clone()),
        };
        let biased = tape.attention_core(qv, kv, vv, heads, Some(rel)).unwrap();
        let coords = |i: usize| (i / 6, (i / 2) % 3, i % 2);
        let bias = |h: usize, i: usize, j: usize| {
            let (ti, hi, wi) = coords(i);
            let (tj, hj, wj) = coords(j);
            bt.data()[h * 3 + ti + 1 - tj] + bh.data()[h * 5 + hi + 2 - hj] + bw.data()[h * 3 + wi + 1 - wj]
        };
        let want = naive(&q, &k, &v, heads, Some(&bias));
        assert!(tape.value(biased).data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn spans_multiple_query_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = QUERY_BLOCK + 37;
        let q = Tensor::randn(&[1, l, 2], 1.0, &mut rng);
        let k = Tensor::randn(&[1, l, 2], 1.0, &mut rng);
        let v = Tensor::randn(&[1, l, 2], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let y = tape.attention_core(qv, kv, vv, 1, None).unwrap();
        let want = naive(&q, &k, &v, 1, None);
        assert!(tape.value(y).data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 6]));
        assert!(matches!(tape.attention_core(x, x, x, 4, None), Err(crate::Error::Config(_))));
    }
}
