//! Turning decoded clips and PPG traces into model inputs and targets.

use crate::config::{FrameFormat, ModelConfig, OutputFormat};
use crate::error::{ensure, Result};
use crate::metrics::{hr_from_signal, DEFAULT_BAND};
use crate::tensor::Tensor;

/// Guard used by DiffNorm and standardization.
pub const EPS: f64 = 1e-7;

/// A dense `T×H×W×C` clip with its frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    /// `[T, H, W, C]`.
    pub dims: [usize; 4],
    pub fps: f64,
    pub data: Vec<f64>,
}

impl VideoClip {
    pub fn new(dims: [usize; 4], fps: f64, data: Vec<f64>) -> Result<Self> {
        ensure!(
            dims.iter().product::<usize>() == data.len(),
            Dimension,
            "clip {:?} needs {} samples, got {}",
            dims,
            dims.iter().product::<usize>(),
            data.len()
        );
        ensure!(fps > 0.0, Input, "frame rate must be positive");
        Ok(Self { dims, fps, data })
    }

    pub fn frames(&self) -> usize {
        self.dims[0]
    }

    pub fn frame_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Frames `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> VideoClip {
        let n = self.frame_len();
        VideoClip {
            dims: [len, self.dims[1], self.dims[2], self.dims[3]],
            fps: self.fps,
            data: self.data[start * n..(start + len) * n].to_vec(),
        }
    }

    /// Channels-first tensor `[C, T, H, W]`.
    pub fn to_channels_first(&self) -> Tensor {
        let [t, h, w, c] = self.dims;
        let mut out = vec![0.0; self.data.len()];
        for (i, px) in self.data.chunks(c).enumerate() {
            for (ci, &v) in px.iter().enumerate() {
                out[ci * t * h * w + i] = v;
            }
        }
        Tensor::new(&[c, t, h, w], out).expect("clip dims are consistent")
    }
}

/// A 1-D physiological waveform sampled at the clip frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalTrace {
    pub samples: Vec<f64>,
    pub fps: f64,
}

impl SignalTrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let rough = x.iter().sum::<f64>() / n;
    // second pass removes the rounding error of the first
    let mean = rough + x.iter().map(|v| v - rough).sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(x − mean) / max(std, eps)` with population standard deviation.
pub fn standardize(x: &[f64], eps: f64) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let (mean, std) = mean_std(x);
    let denom = std.max(eps);
    x.iter().map(|v| (v - mean) / denom).collect()
}

/// Normalized frame differences `(c[t+1] − c[t]) / (c[t+1] + c[t] + eps)`,
/// divided by their global standard deviation, with a zero frame appended.
pub fn diffnorm_frames(clip: &VideoClip, eps: f64) -> Result<VideoClip> {
    let t = clip.frames();
    ensure!(t >= 2, Input, "DiffNorm needs at least two frames, got {t}");
    let n = clip.frame_len();
    let mut out = Vec::with_capacity(clip.data.len());
    for i in 0..t - 1 {
        let (a, b) = (clip.frame(i), clip.frame(i + 1));
        out.extend(a.iter().zip(b).map(|(&x0, &x1)| {
            let d = (x1 - x0) / (x1 + x0 + eps);
            if d.is_finite() {
                d
            } else {
                0.0
            }
        }));
    }
    let (_, std) = mean_std(&out);
    let denom = std.max(eps);
    for v in &mut out {
        *v /= denom;
        if !v.is_finite() {
            *v = 0.0;
        }
    }
    out.resize(out.len() + n, 0.0);
    VideoClip::new(clip.dims, clip.fps, out)
}

/// First differences, standardized, with a zero appended to keep length `T`.
pub fn diff_labels(trace: &SignalTrace) -> Result<SignalTrace> {
    ensure!(trace.len() >= 2, Input, "differenced labels need at least two samples, got {}", trace.len());
    let diffs: Vec<f64> = trace.samples.windows(2).map(|w| w[1] - w[0]).collect();
    let mut samples = standardize(&diffs, EPS);
    // a ramp gives constant differences that standardize to rounding noise
    let (_, std) = mean_std(&diffs);
    if std <= EPS {
        samples.iter_mut().for_each(|v| *v = 0.0);
    }
    samples.push(0.0);
    Ok(SignalTrace {
        samples,
        fps: trace.fps,
    })
}

/// Bilinear resize of every frame, sampling at half-pixel centers with edge clamping.
pub fn resize_bilinear(clip: &VideoClip, out_h: usize, out_w: usize) -> Result<VideoClip> {
    ensure!(out_h >= 1 && out_w >= 1, Input, "resize target must be at least 1x1");
    let [t, h, w, c] = clip.dims;
    if (h, w) == (out_h, out_w) {
        return Ok(clip.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(out_h, h), taps(out_w, w));
    let mut out = Vec::with_capacity(t * out_h * out_w * c);
    for f in 0..t {
        let frame = clip.frame(f);
        let at = |y: usize, x: usize, ch: usize| frame[(y * w + x) * c + ch];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                for ch in 0..c {
                    let top = at(y0, x0, ch) * (1.0 - fx) + at(y0, x1, ch) * fx;
                    let bottom = at(y1, x0, ch) * (1.0 - fx) + at(y1, x1, ch) * fx;
                    out.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
    }
    VideoClip::new([t, out_h, out_w, c], clip.fps, out)
}

/// Training target of one window.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Signal(Vec<f64>),
    Hr(f64),
}

impl Target {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Target::Signal(s) => s.clone(),
            Target::Hr(h) => vec![*h],
        }
    }
}

/// One model-ready window with its ground truth.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub input: VideoClip,
    pub target: Target,
    /// The unprocessed ground-truth trace of the window, used for label HR.
    pub label_trace: SignalTrace,
}

/// Cuts an aligned clip/trace pair into consecutive non-overlapping windows
/// of `cfg.input_dims[0]` frames and applies the configured preprocessing.
pub fn make_examples(id: &str, clip: &VideoClip, trace: &SignalTrace, cfg: &ModelConfig) -> Result<Vec<Example>> {
    ensure!(
        trace.len() >= clip.frames(),
        Input,
        "trace of {} samples is shorter than its clip of {} frames",
        trace.len(),
        clip.frames()
    );
    let [wt, wh, ww] = cfg.input_dims;
    ensure!(wt >= 2, Input, "window length must be at least 2");
    let windows = clip.frames() / wt;
    ensure!(
        windows >= 1,
        Input,
        "clip {id} has {} frames, fewer than the window length {wt}",
        clip.frames()
    );
    (0..windows)
        .map(|k| {
            let raw = resize_bilinear(&clip.slice_frames(k * wt, wt), wh, ww)?;
            let input = match cfg.frame_format {
                FrameFormat::Raw => {
                    let data = standardize(&raw.data, EPS);
                    VideoClip::new(raw.dims, raw.fps, data)?
                }
                FrameFormat::DiffNorm => diffnorm_frames(&raw, EPS)?,
            };
            let window = SignalTrace {
                samples: trace.samples[k * wt..(k + 1) * wt].to_vec(),
                fps: trace.fps,
            };
            let target = match cfg.output_format {
                OutputFormat::Signal => {
                    let mut s = match cfg.frame_format {
                        FrameFormat::DiffNorm => diff_labels(&window)?.samples,
                        FrameFormat::Raw => window.samples.clone(),
                    };
                    if cfg.signal_norm {
                        s = standardize(&s, EPS);
                    }
                    Target::Signal(s)
                }
                OutputFormat::Hr => Target::Hr(hr_from_signal(&window.samples, window.fps, DEFAULT_BAND)?.bpm),
            };
            Ok(Example {
                id: format!("{id}#{k}"),
                input,
                target,
                label_trace: window,
            })
        })
        .collect()
}
