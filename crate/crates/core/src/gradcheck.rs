//! Central finite-difference checks of the autodiff engine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Pass threshold for single ops.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Pass threshold for the end-to-end tiny model.
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Parameter coordinates probed per end-to-end check.
pub const MODEL_PROBES: usize = 20;

/// Relative error with an absolute floor of one: `|a − f| / max(1, |f|)`.
pub fn relative_error(autodiff: f64, finite: f64) -> f64 {
    (autodiff - finite).abs() / finite.abs().max(1.0)
}

/// Builds a scalar loss on a fresh tape from the given leaves.
pub trait LossFn: Fn(&mut Tape, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape, &[Var]) -> Result<Var>> LossFn for F {}

fn eval(inputs: &[Tensor], f: &impl LossFn) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Compares autodiff gradients of every input against central differences.
///
/// When `probes` is `Some(k)`, only `k` randomly chosen coordinates (across
/// all inputs) are perturbed; otherwise every coordinate is.
pub fn check_inputs(inputs: &[Tensor], f: impl LossFn, probes: Option<(usize, u64)>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let coords: Vec<(usize, usize)> = match probes {
        None => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
            .collect(),
        Some((k, seed)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let total: usize = inputs.iter().map(Tensor::len).sum();
            (0..k)
                .map(|_| {
                    let mut flat = rng.gen_range(0..total);
                    let mut i = 0;
                    while flat >= inputs[i].len() {
                        flat -= inputs[i].len();
                        i += 1;
                    }
                    (i, flat)
                })
                .collect()
        }
    };

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + FD_STEP;
        let plus = eval(&work, &f)?;
        work[i].data_mut()[j] = orig - FD_STEP;
        let minus = eval(&work, &f)?;
        work[i].data_mut()[j] = orig;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic[i].data()[j], fd));
    }
    Ok(worst)
}

/// Draws `shape`-sized normal samples, resampling entries within `1e-3` of zero
/// so that kinked activations are differentiable at the test point.
pub fn sample_away_from_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, rng);
    for v in t.data_mut() {
        while v.abs() < 1e-3 {
            *v = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
        }
    }
    t
}

/// One named finite-difference check.
pub struct OpCheck {
    pub name: &'static str,
    pub run: fn(u64) -> Result<f64>,
}

/// Weighted sum loss `Σ c_i y_i` with fixed pseudo-random weights, so that
/// every output element contributes a distinct sensitivity.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let c = Tensor::randn(tape.shape(y), 1.0, &mut rng);
    let shape = tape.shape(y).to_vec();
    let n = shape.iter().product::<usize>();
    let flat = tape.reshape(y, &[1, n])?;
    let cw = tape.constant(c.reshape(&[1, n])?);
    let prod = tape.linear(flat, cw, None)?;
    Ok(tape.sum(prod))
}

/// Probes `probes` random parameter coordinates of a freshly seeded model
/// on a random batch of two clips, with batch norm in training mode.
pub fn model_check(cfg: &crate::config::ModelConfig, seed: u64, probes: usize) -> Result<f64> {
    use crate::autodiff::NormMode;
    use crate::model::Model;
    let model = Model::new(cfg, seed)?;
    let mut r = rng(seed);
    let [t, h, w] = cfg.input_dims;
    let x = Tensor::randn(&[2, 3, t, h, w], 1.0, &mut r);
    let states = model.bn_states().to_vec();
    check_inputs(
        model.params().tensors(),
        |tape: &mut Tape, v: &[Var]| {
            let xv = tape.constant(x.clone());
            let mut st = states.clone();
            let out = model.forward_with_params(tape, xv, v.to_vec(), NormMode::Train, &mut st)?;
            weighted_sum(tape, out.output, seed)
        },
        Some((probes, seed)),
    )
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The per-op suite used by tests and the `gradcheck` command.
pub fn op_suite() -> Vec<OpCheck> {
    use crate::autodiff::RelBias;
    vec![
        OpCheck {
            name: "linear",
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [
                    Tensor::randn(&[2, 3], 1.0, &mut r),
                    Tensor::randn(&[2, 3], 1.0, &mut r),
                    Tensor::randn(&[2], 1.0, &mut r),
                ];
                check_inputs(&inputs, |t: &mut Tape, v: &[Var]| {
                    let y = t.linear(v[0], v[1], Some(v[2]))?;
                    weighted_sum(t, y, seed)
                }, None)
            },
        },
        OpCheck {
            name: "conv3d",
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [
                    Tensor::randn(&[1, 2, 4, 4, 4], 1.0, &mut r),
                    Tensor::randn(&[2, 2, 3, 3, 3], 1.0, &mut r),
                    Tensor::randn(&[2], 1.0, &mut r),
                ];
                check_inputs(&inputs, |t: &mut Tape, v: &[Var]| {
                    let y = t.conv3d(v[0], v[1], Some(v[2]), [2, 1, 2], [1, 1, 0])?;
                    weighted_sum(t, y, seed)
                }, None)
            },
        },
        OpCheck {
            name: "depthwise_conv3d",
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [
                    Tensor::randn(&[2, 2, 3, 3, 3], 1.0, &mut r),
                    Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r),
                    Tensor::randn(&[2], 1.0, &mut r),
                ];
                check_inputs(&inputs, |t: &mut Tape, v: &[Var]| {
                    let y = t.depthwise_conv3d(v[0], v[1], Some(v[2]), [1, 1, 1])?;
                    weighted_sum(t, y, seed)
                }, None)
            },
        },
        OpCheck {
            name: "batchnorm3d",
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [
                    Tensor::randn(&[2, 3, 2, 2, 1], 1.0, &mut r),
                    Tensor::randn(&[3], 1.0, &mut r),
                    Tensor::randn(&[3], 1.0, &mut r),
                ];
                check_inputs(&inputs, |t: &mut Tape, v: &[Var]| {
                    let mut state = crate::autodiff::BatchNormState::new(3);
                    let y = t.batchnorm3d(v[0], v[1], v[2], &mut state, crate::autodiff::NormMode::Train)?;
                    weighted_sum(t, y, seed)
                }, None)
            },
        },
        OpCheck {
            name: "layernorm",
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [
                    Tensor::randn(&[3, 4], 1.0, &mut r),
                    Tensor::randn(&[4], 1.0, &mut r),
                    Tensor::randn(&[4], 1.0, &mut r),
                ];
                check_inputs(&inputs, |t: &mut Tape, v: &[Var]| {
                    let y = t.layernorm(v[0], v[1], v[2], 1e-5)?;
                    weighted_sum(t, y, seed)
                }, None)
            },
        },
        OpCheck {
            name: "attention+rel",
            run: |seed| {
                let mut r = rng(seed);
                let d = 4;
                let mut inputs = vec![Tensor::randn(&[1, 8, d], 1.0, &mut r)];
                for _ in 0..4 {
                    inputs.push(Tensor::randn(&[d, d], 0.5, &mut r));
                    inputs.push(Tensor::randn(&[d], 0.5, &mut r));
                }
                inputs.push(Tensor::randn(&[2, 3], 0.5, &mut r));
                inputs.push(Tensor::randn(&[2, 3], 0.5, &mut r));
                inputs.push(Tensor::randn(&[2, 3], 0.5, &mut r));
                check_inputs(&inputs, |t: &mut Tape, v: &[Var]| {
                    let w = crate::autodiff::AttentionWeights {
                        wq: v[1],
                        bq: v[2],
                        wk: v[3],
                        bk: v[4],
                        wv: v[5],
                        bv: v[6],
                        wo: v[7],
                        bo: v[8],
                    };
                    let rel = RelBias {
                        grid: [2, 2, 2],
                        t_table: v[9],
                        h_table: v[10],
                        w_table: v[11],
                    };
                    let y = t.attention(v[0], &w, 2, Some(rel))?;
                    weighted_sum(t, y, seed)
                }, None)
            },
        },
        OpCheck {
            name: "upsample_nearest3d",
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [Tensor::randn(&[1, 2, 3, 2, 2], 1.0, &mut r)];
                check_inputs(&inputs, |t: &mut Tape, v: &[Var]| {
                    let y = t.upsample_nearest3d(v[0], [2, 1, 1])?;
                    weighted_sum(t, y, seed)
                }, None)
            },
        },
        OpCheck {
            name: "elu",
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [sample_away_from_kink(&[3, 4], &mut r)];
                check_inputs(&inputs, |t: &mut Tape, v: &[Var]| {
                    let y = t.elu(v[0]);
                    weighted_sum(t, y, seed)
                }, None)
            },
        },
        OpCheck {
            name: "gelu",
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [Tensor::randn(&[3, 4], 1.5, &mut r)];
                check_inputs(&inputs, |t: &mut Tape, v: &[Var]| {
                    let y = t.gelu(v[0]);
                    weighted_sum(t, y, seed)
                }, None)
            },
        },
        OpCheck {
            name: "softmax",
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [Tensor::randn(&[2, 3, 4], 1.0, &mut r)];
                check_inputs(&inputs, |t: &mut Tape, v: &[Var]| {
                    let y = t.softmax(v[0], 1)?;
                    weighted_sum(t, y, seed)
                }, None)
            },
        },
        OpCheck {
            name: "mean",
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [Tensor::randn(&[2, 3, 4], 1.0, &mut r)];
                check_inputs(&inputs, |t: &mut Tape, v: &[Var]| {
                    let y = t.mean(v[0], &[0, 2])?;
                    weighted_sum(t, y, seed)
                }, None)
            },
        },
        OpCheck {
            name: "permute+tile",
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [Tensor::randn(&[2, 3, 4], 1.0, &mut r)];
                check_inputs(&inputs, |t: &mut Tape, v: &[Var]| {
                    let p = t.permute(v[0], &[2, 0, 1])?;
                    let y = t.tile_batch(p, 2)?;
                    weighted_sum(t, y, seed)
                }, None)
            },
        },
        OpCheck {
            name: "mse_loss",
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [Tensor::randn(&[5], 1.0, &mut r), Tensor::randn(&[5], 1.0, &mut r)];
                check_inputs(&inputs, |t: &mut Tape, v: &[Var]| t.mse_loss(v[0], v[1]), None)
            },
        },
    ]
}

/// Worst relative error of one check across seeds.
#[derive(Clone, Debug)]
pub struct SuiteRow {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

/// Every op check and the tiny end-to-end model over seeds `0..seeds`.
pub fn full_suite(seeds: u64) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();
    for check in op_suite() {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            worst = worst.max((check.run)(seed)?);
        }
        rows.push(SuiteRow {
            name: check.name,
            max_error: worst,
            tolerance: OP_TOLERANCE,
        });
    }
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        worst = worst.max(model_check(&crate::config::ModelConfig::tiny(), seed, MODEL_PROBES)?);
    }
    rows.push(SuiteRow {
        name: "model (tiny, end-to-end)",
        max_error: worst,
        tolerance: MODEL_TOLERANCE,
    });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_on_three_seeds() {
        for check in op_suite() {
            for seed in 0..3 {
                let err = (check.run)(seed).unwrap();
                assert!(err <= OP_TOLERANCE, "{} seed {seed}: relative error {err:e}", check.name);
            }
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.5, 0.25), 0.25);
        assert_eq!(relative_error(20.0, 10.0), 1.0);
    }
}
