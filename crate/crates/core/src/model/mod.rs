//! The four-stage multiscale video transformer.
//!
//! ```text
//! stem → positional encoding → stage 1 → T1 → stage 2 → T2 → stage 3 → T3 → stage 4 → head
//! ```
//!
//! The stem is a `(3,7,7)` convolution with stride `(2,4,4)`. Stages are
//! stacks of pre-norm transformer blocks that preserve the token grid; all
//! resolution changes happen in the transitions, strided `3×3×3`
//! convolutions that halve space, double channels and, when the scaling
//! strategy says so, halve time.

mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use params::{ParamId, ParamStore};

use crate::autodiff::{AttentionWeights, BatchNormState, NormMode, RelBias, Tape, Var};
use crate::config::{ModelConfig, OutputFormat, PosEncoding, TRANSITIONS};
use crate::error::{ensure, Result};
use crate::preprocess::VideoClip;
use crate::tensor::Tensor;

pub const STEM_KERNEL: [usize; 3] = [3, 7, 7];
pub const STEM_STRIDE: [usize; 3] = [2, 4, 4];
pub const STEM_PAD: [usize; 3] = [1, 3, 3];
pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

/// Parameter handles of one transformer block.
#[derive(Clone, Debug)]
struct BlockParams {
    ln1: (ParamId, ParamId),
    attn: [ParamId; 8],
    ln2: (ParamId, ParamId),
    mlp: [ParamId; 4],
}

#[derive(Clone, Debug)]
struct StageParams {
    blocks: Vec<BlockParams>,
    rel: Option<[ParamId; 3]>,
}

#[derive(Clone, Debug)]
struct UpsampleParams {
    conv: (ParamId, ParamId),
    bn: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Layout {
    stem: (ParamId, ParamId),
    abs: Option<ParamId>,
    cpe: Option<(ParamId, ParamId)>,
    stages: Vec<StageParams>,
    transitions: Vec<(ParamId, ParamId)>,
    upsample: Vec<UpsampleParams>,
    proj: (ParamId, ParamId),
}

/// A configured model with its parameters and batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    bn_states: Vec<BatchNormState>,
    layout: Layout,
}

/// Result of a forward pass.
pub struct Forward {
    pub output: Var,
    /// Tape handle of every parameter, indexed like the [`ParamStore`].
    pub param_vars: Vec<Var>,
    /// Output grid `[N, C, t, h, w]` of each of the four stages.
    pub stage_outputs: Vec<Var>,
}

impl Model {
    /// Builds a model; identical `(cfg, seed)` give bit-identical parameters.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let grids = cfg.stage_grids()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::default();
        let d = cfg.base_width;
        let proj = |p: &mut ParamStore, name: String, shape: &[usize], rng: &mut ChaCha8Rng| {
            p.insert(name, Tensor::trunc_normal(shape, INIT_STD, rng))
        };

        let [kt, kh, kw] = STEM_KERNEL;
        let stem = (
            proj(&mut p, "stem.w".into(), &[d, 3, kt, kh, kw], &mut rng),
            p.insert("stem.b", Tensor::zeros(&[d])),
        );
        let [t0, h0, w0, _] = grids[0];
        let abs = (cfg.pos_encoding == PosEncoding::Abs).then(|| p.insert("pos.abs", Tensor::zeros(&[d, t0, h0, w0])));
        let cpe = (cfg.pos_encoding == PosEncoding::Cpe).then(|| {
            (
                p.insert("pos.cpe.w", Tensor::zeros(&[d, 3, 3, 3])),
                p.insert("pos.cpe.b", Tensor::zeros(&[d])),
            )
        });

        let mut stages = Vec::new();
        let mut transitions = Vec::new();
        for (s, grid) in grids.iter().enumerate() {
            let [gt, gh, gw, c] = *grid;
            let heads = cfg.heads_per_stage[s];
            let hidden = ((c as f64) * cfg.mlp_ratio).round().max(1.0) as usize;
            let rel = (cfg.pos_encoding == PosEncoding::Rel).then(|| {
                [
                    p.insert(format!("stage{s}.rel.t"), Tensor::zeros(&[heads, 2 * gt - 1])),
                    p.insert(format!("stage{s}.rel.h"), Tensor::zeros(&[heads, 2 * gh - 1])),
                    p.insert(format!("stage{s}.rel.w"), Tensor::zeros(&[heads, 2 * gw - 1])),
                ]
            });
            let mut blocks = Vec::new();
            for b in 0..cfg.stage_depths[s] {
                let pre = format!("stage{s}.block{b}");
                let ln1 = (
                    p.insert(format!("{pre}.ln1.g"), Tensor::ones(&[c])),
                    p.insert(format!("{pre}.ln1.b"), Tensor::zeros(&[c])),
                );
                let mut attn = Vec::new();
                for name in ["q", "k", "v", "o"] {
                    attn.push(proj(&mut p, format!("{pre}.attn.w{name}"), &[c, c], &mut rng));
                    attn.push(p.insert(format!("{pre}.attn.b{name}"), Tensor::zeros(&[c])));
                }
                let ln2 = (
                    p.insert(format!("{pre}.ln2.g"), Tensor::ones(&[c])),
                    p.insert(format!("{pre}.ln2.b"), Tensor::zeros(&[c])),
                );
                let mlp = [
                    proj(&mut p, format!("{pre}.mlp.w1"), &[hidden, c], &mut rng),
                    p.insert(format!("{pre}.mlp.b1"), Tensor::zeros(&[hidden])),
                    proj(&mut p, format!("{pre}.mlp.w2"), &[c, hidden], &mut rng),
                    p.insert(format!("{pre}.mlp.b2"), Tensor::zeros(&[c])),
                ];
                blocks.push(BlockParams {
                    ln1,
                    attn: attn.try_into().expect("eight attention tensors"),
                    ln2,
                    mlp,
                });
            }
            stages.push(StageParams { blocks, rel });
            if s < TRANSITIONS {
                transitions.push((
                    proj(&mut p, format!("transition{s}.w"), &[2 * c, c, 3, 3, 3], &mut rng),
                    p.insert(format!("transition{s}.b"), Tensor::zeros(&[2 * c])),
                ));
            }
        }

        let c_last = grids[3][3];
        let mut upsample = Vec::new();
        let mut bn_states = Vec::new();
        if cfg.output_format == OutputFormat::Signal {
            for k in 0..cfg.head_upsampling_blocks() as usize {
                upsample.push(UpsampleParams {
                    conv: (
                        proj(&mut p, format!("head.up{k}.conv.w"), &[c_last, c_last, 3, 1, 1], &mut rng),
                        p.insert(format!("head.up{k}.conv.b"), Tensor::zeros(&[c_last])),
                    ),
                    bn: (
                        p.insert(format!("head.up{k}.bn.g"), Tensor::ones(&[c_last])),
                        p.insert(format!("head.up{k}.bn.b"), Tensor::zeros(&[c_last])),
                    ),
                });
                bn_states.push(BatchNormState::new(c_last));
            }
        }
        let proj_head = (
            proj(&mut p, "head.proj.w".into(), &[1, c_last], &mut rng),
            p.insert("head.proj.b", Tensor::zeros(&[1])),
        );

        Ok(Self {
            cfg: cfg.clone(),
            params: p,
            bn_states,
            layout: Layout {
                stem,
                abs,
                cpe,
                stages,
                transitions,
                upsample,
                proj: proj_head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[BatchNormState] {
        &self.bn_states
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState] {
        &mut self.bn_states
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Runs the network on `x: [N, 3, T, H, W]`.
    ///
    /// In [`NormMode::Train`] parameters are gradient leaves and the head's
    /// batch-norm running statistics in `bn_states` are updated.
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: NormMode, bn_states: &mut [BatchNormState]) -> Result<Forward> {
        let train = mode == NormMode::Train;
        let pv: Vec<Var> = self.params.tensors().iter().map(|t| tape.leaf(t.clone(), train)).collect();
        self.forward_with_params(tape, x, pv, mode, bn_states)
    }

    /// Like [`Model::forward`] but with caller-supplied parameter handles,
    /// one per [`ParamStore`] entry in order.
    pub fn forward_with_params(
        &self,
        tape: &mut Tape,
        x: Var,
        pv: Vec<Var>,
        mode: NormMode,
        bn_states: &mut [BatchNormState],
    ) -> Result<Forward> {
        let cfg = &self.cfg;
        ensure!(
            pv.len() == self.params.len(),
            Contract,
            "expected {} parameter handles, got {}",
            self.params.len(),
            pv.len()
        );
        for (&v, t) in pv.iter().zip(self.params.tensors()) {
            ensure!(tape.shape(v) == t.shape(), Contract, "parameter handle shape mismatch");
        }
        let xs = tape.shape(x).to_vec();
        ensure!(
            xs.len() == 5 && xs[1] == 3 && xs[2..] == cfg.input_dims,
            Dimension,
            "model expects [N, 3, {}, {}, {}], got {:?}",
            cfg.input_dims[0],
            cfg.input_dims[1],
            cfg.input_dims[2],
            xs
        );
        let n = xs[0];
        let v = |id: ParamId| pv[id.0];
        let l = &self.layout;

        let mut g = patchify_stem(tape, x, v(l.stem.0), v(l.stem.1)).map_err(|e| e.in_component("patchify stem"))?;
        let pos = PositionalParams {
            abs: l.abs.map(v),
            cpe: l.cpe.map(|(w, b)| (v(w), v(b))),
        };
        g = apply_positional_encoding(tape, g, &pos).map_err(|e| e.in_component("positional encoding"))?;

        let flags = cfg.scaling.temporal_flags();
        let mut stage_outputs = Vec::with_capacity(4);
        for (s, stage_params) in l.stages.iter().enumerate() {
            let rel = stage_params.rel.map(|[t, h, w]| (v(t), v(h), v(w)));
            let blocks: Vec<BlockVars> = stage_params
                .blocks
                .iter()
                .map(|b| BlockVars {
                    ln1: (v(b.ln1.0), v(b.ln1.1)),
                    attn: AttentionWeights {
                        wq: v(b.attn[0]),
                        bq: v(b.attn[1]),
                        wk: v(b.attn[2]),
                        bk: v(b.attn[3]),
                        wv: v(b.attn[4]),
                        bv: v(b.attn[5]),
                        wo: v(b.attn[6]),
                        bo: v(b.attn[7]),
                    },
                    ln2: (v(b.ln2.0), v(b.ln2.1)),
                    mlp: b.mlp.map(v),
                })
                .collect();
            g = stage(tape, g, &blocks, cfg.heads_per_stage[s], rel).map_err(|e| e.in_component(STAGE_NAMES[s]))?;
            stage_outputs.push(g);
            if s < TRANSITIONS {
                let (w, b) = l.transitions[s];
                g = stage_transition(tape, g, v(w), v(b), flags[s]).map_err(|e| e.in_component(TRANSITION_NAMES[s]))?;
            }
        }

        let output = match cfg.output_format {
            OutputFormat::Signal => {
                let blocks: Vec<UpsampleVars> = l
                    .upsample
                    .iter()
                    .map(|u| UpsampleVars {
                        conv: (v(u.conv.0), v(u.conv.1)),
                        bn: (v(u.bn.0), v(u.bn.1)),
                    })
                    .collect();
                upsample_head(tape, g, cfg.input_dims[0], &blocks, (v(l.proj.0), v(l.proj.1)), bn_states, mode)
                    .map_err(|e| e.in_component("upsampling head"))?
            }
            OutputFormat::Hr => hr_head(tape, g, v(l.proj.0), v(l.proj.1)).map_err(|e| e.in_component("HR head"))?,
        };
        debug_assert_eq!(tape.shape(output)[0], n);
        Ok(Forward {
            output,
            param_vars: pv,
            stage_outputs,
        })
    }

    /// Inference on a batch of preprocessed clips; one output row per clip.
    pub fn predict(&self, clips: &[&VideoClip]) -> Result<Vec<Vec<f64>>> {
        let x = batch_tensor(clips)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut states = self.bn_states.clone();
        let out = self.forward(&mut tape, xv, NormMode::Eval, &mut states)?;
        let y = tape.value(out.output);
        let per = y.len() / clips.len();
        Ok(y.data().chunks(per).map(<[f64]>::to_vec).collect())
    }
}

const STAGE_NAMES: [&str; 4] = ["stage 1", "stage 2", "stage 3", "stage 4"];
const TRANSITION_NAMES: [&str; 3] = ["transition 1→2", "transition 2→3", "transition 3→4"];

/// Stacks preprocessed `T×H×W×C` clips into `[N, C, T, H, W]`.
pub fn batch_tensor(clips: &[&VideoClip]) -> Result<Tensor> {
    ensure!(!clips.is_empty(), Input, "empty batch");
    let dims = clips[0].dims;
    ensure!(
        clips.iter().all(|c| c.dims == dims),
        Dimension,
        "clips in a batch must share dimensions"
    );
    let mut data = Vec::with_capacity(clips.len() * clips[0].data.len());
    for c in clips {
        data.extend_from_slice(c.to_channels_first().data());
    }
    Tensor::new(&[clips.len(), dims[3], dims[0], dims[1], dims[2]], data)
}

/// Projects `[N, 3, T, H, W]` into a `(T/2, H/4, W/4)` grid of `D` channels.
pub fn patchify_stem(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    ensure!(
        xs.len() == 5 && xs[2] >= 3 && xs[3] >= 7 && xs[4] >= 7,
        Config,
        "stem needs T ≥ 3 and H, W ≥ 7, got {:?}",
        xs
    );
    ensure!(
        xs[2].is_multiple_of(2) && xs[3].is_multiple_of(4) && xs[4].is_multiple_of(4),
        Config,
        "stem needs T even and H, W divisible by 4, got {:?}",
        &xs[2..]
    );
    tape.conv3d(x, w, Some(b), STEM_STRIDE, STEM_PAD)
}

/// Parameter handles of the additive positional encodings.
#[derive(Clone, Copy, Debug, Default)]
pub struct PositionalParams {
    /// `[C, t, h, w]` learned table.
    pub abs: Option<Var>,
    /// Depthwise `3×3×3` kernel `[C, 3, 3, 3]` and bias `[C]`.
    pub cpe: Option<(Var, Var)>,
}

/// Adds ABS or CPE encodings to a token grid; REL acts inside attention.
pub fn apply_positional_encoding(tape: &mut Tape, g: Var, pos: &PositionalParams) -> Result<Var> {
    let n = tape.shape(g)[0];
    let mut out = g;
    if let Some(table) = pos.abs {
        ensure!(
            tape.shape(table) == &tape.shape(g)[1..],
            Config,
            "absolute table {:?} does not match grid {:?}",
            tape.shape(table),
            &tape.shape(g)[1..]
        );
        let tiled = tape.tile_batch(table, n)?;
        out = tape.add(out, tiled)?;
    }
    if let Some((w, b)) = pos.cpe {
        let conv = tape.depthwise_conv3d(out, w, Some(b), [1, 1, 1])?;
        out = tape.add(out, conv)?;
    }
    Ok(out)
}

/// `[N, C, t, h, w]` → `[N, t·h·w, C]`.
pub fn grid_to_tokens(tape: &mut Tape, g: Var) -> Result<Var> {
    let s = tape.shape(g).to_vec();
    let p = tape.permute(g, &[0, 2, 3, 4, 1])?;
    tape.reshape(p, &[s[0], s[2] * s[3] * s[4], s[1]])
}

/// `[N, t·h·w, C]` → `[N, C, t, h, w]`.
pub fn tokens_to_grid(tape: &mut Tape, x: Var, grid: [usize; 3]) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let r = tape.reshape(x, &[s[0], grid[0], grid[1], grid[2], s[2]])?;
    tape.permute(r, &[0, 4, 1, 2, 3])
}

/// Tape handles of one transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1: (Var, Var),
    pub attn: AttentionWeights,
    pub ln2: (Var, Var),
    /// `w1 [hidden, C]`, `b1`, `w2 [C, hidden]`, `b2`.
    pub mlp: [Var; 4],
}

/// Pre-norm block on tokens: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
pub fn transformer_block(tape: &mut Tape, x: Var, p: &BlockVars, heads: usize, rel: Option<RelBias>) -> Result<Var> {
    let y = tape.layernorm(x, p.ln1.0, p.ln1.1, LN_EPS)?;
    let a = tape.attention(y, &p.attn, heads, rel)?;
    let x = tape.add(x, a)?;
    let y = tape.layernorm(x, p.ln2.0, p.ln2.1, LN_EPS)?;
    let h = tape.linear(y, p.mlp[0], Some(p.mlp[1]))?;
    let h = tape.gelu(h);
    let m = tape.linear(h, p.mlp[2], Some(p.mlp[3]))?;
    tape.add(x, m)
}

/// Runs `blocks` over the grid; the grid shape is unchanged.
pub fn stage(tape: &mut Tape, g: Var, blocks: &[BlockVars], heads: usize, rel: Option<(Var, Var, Var)>) -> Result<Var> {
    if blocks.is_empty() {
        return Ok(g);
    }
    let s = tape.shape(g).to_vec();
    ensure!(s[1].is_multiple_of(heads), Config, "width {} not divisible by {heads} heads", s[1]);
    let grid = [s[2], s[3], s[4]];
    let rel = rel.map(|(t, h, w)| RelBias {
        grid,
        t_table: t,
        h_table: h,
        w_table: w,
    });
    let mut x = grid_to_tokens(tape, g)?;
    for b in blocks {
        x = transformer_block(tape, x, b, heads, rel)?;
    }
    tokens_to_grid(tape, x, grid)
}

/// Strided `3×3×3` convolution `C → 2C` halving space and optionally time.
pub fn stage_transition(tape: &mut Tape, g: Var, w: Var, b: Var, temporal: bool) -> Result<Var> {
    let s = tape.shape(g).to_vec();
    ensure!(!temporal || s[2].is_multiple_of(2), Config, "temporal extent {} cannot be halved", s[2]);
    for e in [s[3], s[4]] {
        ensure!(e == 1 || e % 2 == 0, Config, "spatial extent {e} cannot be halved");
    }
    let stride = [if temporal { 2 } else { 1 }, 2, 2];
    tape.conv3d(g, w, Some(b), stride, [1, 1, 1])
}

/// Tape handles of one upsampling block.
#[derive(Clone, Copy, Debug)]
pub struct UpsampleVars {
    pub conv: (Var, Var),
    pub bn: (Var, Var),
}

/// Maps a `[N, C, t, h, w]` grid to an `[N, target_t]` waveform through
/// `log2(target_t / t)` blocks of nearest ×2 temporal upsampling, a `(3,1,1)`
/// convolution, batch normalization and ELU, followed by a spatial mean and a
/// pointwise `C → 1` projection.
pub fn upsample_head(
    tape: &mut Tape,
    g: Var,
    target_t: usize,
    blocks: &[UpsampleVars],
    proj: (Var, Var),
    bn_states: &mut [BatchNormState],
    mode: NormMode,
) -> Result<Var> {
    let s = tape.shape(g).to_vec();
    let t = s[2];
    ensure!(
        target_t.is_multiple_of(t) && (target_t / t).is_power_of_two(),
        Config,
        "target length {target_t} is not a power-of-two multiple of {t}"
    );
    let k = (target_t / t).trailing_zeros() as usize;
    ensure!(
        blocks.len() == k && bn_states.len() == k,
        Config,
        "head needs {k} upsampling blocks, has {}",
        blocks.len()
    );
    let mut x = g;
    for (b, state) in blocks.iter().zip(bn_states.iter_mut()) {
        x = tape.upsample_nearest3d(x, [2, 1, 1])?;
        x = tape.conv3d(x, b.conv.0, Some(b.conv.1), [1, 1, 1], [1, 0, 0])?;
        x = tape.batchnorm3d(x, b.bn.0, b.bn.1, state, mode)?;
        x = tape.elu(x);
    }
    let pooled = tape.mean(x, &[3, 4])?; // [N, C, T]
    let seq = tape.permute(pooled, &[0, 2, 1])?;
    let y = tape.linear(seq, proj.0, Some(proj.1))?;
    tape.reshape(y, &[s[0], target_t])
}

/// Global token average followed by a `C → 1` projection: one HR per clip.
pub fn hr_head(tape: &mut Tape, g: Var, w: Var, b: Var) -> Result<Var> {
    let n = tape.shape(g)[0];
    let pooled = tape.mean(g, &[2, 3, 4])?;
    let y = tape.linear(pooled, w, Some(b))?;
    tape.reshape(y, &[n])
}
