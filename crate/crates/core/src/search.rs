//! Greedy phase-by-phase adaptation of a model configuration.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::{FrameFormat, ModelConfig, OutputFormat, PosEncoding, ScalingStrategy};
use crate::error::{ensure, Result};

/// Clip length held fixed while the spatial extent is searched.
pub const SPATIAL_PHASE_FRAMES: usize = 120;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Spatial,
    Temporal,
    Output,
    FrameNorm,
    PosEncoding,
    Scaling,
}

impl Phase {
    pub const ORDER: [Phase; 6] = [
        Phase::Spatial,
        Phase::Temporal,
        Phase::Output,
        Phase::FrameNorm,
        Phase::PosEncoding,
        Phase::Scaling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Spatial => "spatial",
            Phase::Temporal => "temporal",
            Phase::Output => "output",
            Phase::FrameNorm => "frame_norm",
            Phase::PosEncoding => "pos_encoding",
            Phase::Scaling => "scaling",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Candidate values for every phase, each in evaluation order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSpace {
    /// Square spatial extents `H = W`.
    pub spatial: Vec<usize>,
    pub temporal: Vec<usize>,
    pub outputs: Vec<OutputFormat>,
    /// `(frame format, signal normalization)` pairs.
    pub frame_norm: Vec<(FrameFormat, bool)>,
    pub pos_encodings: Vec<PosEncoding>,
    pub scalings: Vec<ScalingStrategy>,
}

impl Default for DesignSpace {
    fn default() -> Self {
        Self {
            spatial: vec![256, 128, 64, 32],
            temporal: vec![240, 120, 60, 30],
            outputs: vec![OutputFormat::Hr, OutputFormat::Signal],
            frame_norm: vec![
                (FrameFormat::Raw, false),
                (FrameFormat::Raw, true),
                (FrameFormat::DiffNorm, false),
                (FrameFormat::DiffNorm, true),
            ],
            pos_encodings: vec![PosEncoding::Abs, PosEncoding::Rel, PosEncoding::Cpe],
            scalings: ScalingStrategy::ALL.to_vec(),
        }
    }
}

impl DesignSpace {
    fn phase_len(&self, phase: Phase) -> usize {
        match phase {
            Phase::Spatial => self.spatial.len(),
            Phase::Temporal => self.temporal.len(),
            Phase::Output => self.outputs.len(),
            Phase::FrameNorm => self.frame_norm.len(),
            Phase::PosEncoding => self.pos_encodings.len(),
            Phase::Scaling => self.scalings.len(),
        }
    }

    /// `base` with the `i`-th candidate of `phase` applied.
    pub fn candidate(&self, phase: Phase, i: usize, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match phase {
            Phase::Spatial => {
                let s = self.spatial[i];
                c.input_dims = [SPATIAL_PHASE_FRAMES, s, s];
            }
            Phase::Temporal => c.input_dims[0] = self.temporal[i],
            Phase::Output => c.output_format = self.outputs[i],
            Phase::FrameNorm => (c.frame_format, c.signal_norm) = self.frame_norm[i],
            Phase::PosEncoding => c.pos_encoding = self.pos_encodings[i],
            Phase::Scaling => c.scaling = self.scalings[i],
        }
        c
    }
}

/// Short text for the value a phase varies, e.g. `120x64x64` or `DiffNorm+norm`.
pub fn candidate_label(phase: Phase, cfg: &ModelConfig) -> String {
    match phase {
        Phase::Spatial | Phase::Temporal => {
            let [t, h, w] = cfg.input_dims;
            format!("{t}x{h}x{w}")
        }
        Phase::Output => match cfg.output_format {
            OutputFormat::Hr => "HR".into(),
            OutputFormat::Signal => "Signal".into(),
        },
        Phase::FrameNorm => {
            let f = match cfg.frame_format {
                FrameFormat::Raw => "Raw",
                FrameFormat::DiffNorm => "DiffNorm",
            };
            if cfg.signal_norm {
                format!("{f}+norm")
            } else {
                f.into()
            }
        }
        Phase::PosEncoding => match cfg.pos_encoding {
            PosEncoding::Abs => "ABS".into(),
            PosEncoding::Rel => "REL".into(),
            PosEncoding::Cpe => "CPE".into(),
        },
        Phase::Scaling => cfg.scaling.to_string(),
    }
}

/// Starting point of the search: HR output, raw unnormalized frames, REL,
/// Scale-0, otherwise the general configuration.
pub fn baseline_config() -> ModelConfig {
    ModelConfig {
        output_format: OutputFormat::Hr,
        frame_format: FrameFormat::Raw,
        signal_norm: false,
        pos_encoding: PosEncoding::Rel,
        scaling: ScalingStrategy::ALL[0],
        ..ModelConfig::general(true)
    }
}

/// The majority-vote configuration; output signals are normalized only in
/// simple recording conditions.
pub fn general_config(simple: bool) -> ModelConfig {
    ModelConfig::general(simple)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchStep {
    pub phase: Phase,
    pub candidate: ModelConfig,
    /// `+∞` for a failed candidate.
    pub mae: f64,
    pub selected: bool,
    /// Served from the memo rather than a fresh evaluation.
    pub cached: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub steps: Vec<SearchStep>,
    pub final_config: ModelConfig,
    pub evaluator_calls: usize,
}

impl SearchTrace {
    /// The carried-forward best MAE after each phase.
    pub fn phase_best(&self) -> Vec<(Phase, f64)> {
        self.steps.iter().filter(|s| s.selected).map(|s| (s.phase, s.mae)).collect()
    }

    /// CSV with header `phase,candidate,mae,selected`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "phase,candidate,mae,selected")?;
        for s in &self.steps {
            writeln!(
                w,
                "{},{},{},{}",
                s.phase,
                candidate_label(s.phase, &s.candidate),
                s.mae,
                s.selected
            )?;
        }
        Ok(())
    }
}

fn memo_key(cfg: &ModelConfig) -> String {
    serde_json::to_string(cfg).expect("config serializes")
}

/// Runs the six phases in order, keeping the lowest-MAE candidate of each
/// (ties go to the earlier candidate).
///
/// Every distinct configuration is evaluated at most once. An evaluator error
/// or a non-finite MAE marks the candidate failed with `+∞` and the search
/// continues.
pub fn greedy_adapt<F>(mut evaluator: F, space: &DesignSpace, start: &ModelConfig) -> Result<SearchTrace>
where
    F: FnMut(&ModelConfig) -> Result<f64>,
{
    for phase in Phase::ORDER {
        ensure!(space.phase_len(phase) > 0, Config, "design space has no {phase} candidates");
    }
    let mut memo: HashMap<String, (f64, Option<String>)> = HashMap::new();
    let mut steps = Vec::new();
    let mut calls = 0;
    let mut current = start.clone();
    for phase in Phase::ORDER {
        let first = steps.len();
        let mut best: Option<(usize, f64)> = None;
        for i in 0..space.phase_len(phase) {
            let cand = space.candidate(phase, i, &current);
            let key = memo_key(&cand);
            let cached = memo.contains_key(&key);
            let (mae, failure) = memo
                .entry(key)
                .or_insert_with(|| {
                    calls += 1;
                    match evaluator(&cand) {
                        Ok(m) if m.is_finite() => (m, None),
                        Ok(m) => (f64::INFINITY, Some(format!("non-finite MAE {m}"))),
                        Err(e) => (f64::INFINITY, Some(e.to_string())),
                    }
                })
                .clone();
            if best.is_none_or(|(_, b)| mae < b) {
                best = Some((steps.len(), mae));
            }
            steps.push(SearchStep {
                phase,
                candidate: cand,
                mae,
                selected: false,
                cached,
                failure,
            });
        }
        let (winner, _) = best.unwrap_or((first, f64::INFINITY));
        steps[winner].selected = true;
        current = steps[winner].candidate.clone();
    }
    Ok(SearchTrace {
        steps,
        final_config: current,
        evaluator_calls: calls,
    })
}
