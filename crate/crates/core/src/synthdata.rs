//! Synthetic face-free videos with a planted blood-volume pulse.
//!
//! Every pixel follows `base(x)·(1 + α·g(t))·L(t) + ε`, clipped to `[0, 1]`,
//! where `g(t) = sin(2πft) + 0.5·sin(4πft + φ)` and `L` is an illumination
//! random walk. Clip and trace samples are rounded to `f32` so that they
//! survive the on-disk formats unchanged.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::io::{GeneratorMeta, Manifest, ManifestEntry};
use crate::metrics::{power_fraction_at, DEFAULT_BAND};
use crate::preprocess::{diffnorm_frames, standardize, SignalTrace, VideoClip, EPS};

const CHANNELS: usize = 3;
const BLOTCHES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetName {
    Simple,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthPreset {
    pub name: PresetName,
    /// Pulse amplitude as a fraction of the base intensity.
    pub pulse_amplitude: f64,
    pub noise_std: f64,
    /// Per-frame step of the illumination random walk.
    pub drift_std: f64,
    /// The walk stays within `1 ± drift_clamp`.
    pub drift_clamp: f64,
    /// Largest per-clip translation in pixels.
    pub motion_px: usize,
    pub hr_range: (f64, f64),
}

impl SynthPreset {
    /// Stationary subject under constant light.
    pub fn simple() -> Self {
        Self {
            name: PresetName::Simple,
            pulse_amplitude: 0.01,
            noise_std: 0.005,
            drift_std: 0.0,
            drift_clamp: 0.2,
            motion_px: 0,
            hr_range: (45.0, 150.0),
        }
    }

    /// Drifting illumination, heavier noise and slow head translation.
    pub fn hard() -> Self {
        Self {
            name: PresetName::Hard,
            noise_std: 0.02,
            drift_std: 0.002,
            motion_px: 2,
            ..Self::simple()
        }
    }

    pub fn from_name(name: PresetName) -> Self {
        match name {
            PresetName::Simple => Self::simple(),
            PresetName::Hard => Self::hard(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.pulse_amplitude > 0.0, Config, "pulse amplitude must be positive");
        ensure!(self.noise_std >= 0.0 && self.drift_std >= 0.0, Config, "noise and drift must be non-negative");
        ensure!(
            (0.0..1.0).contains(&self.drift_clamp),
            Config,
            "drift clamp must lie in [0, 1), got {}",
            self.drift_clamp
        );
        ensure!(
            self.hr_range.0 > 0.0 && self.hr_range.0 <= self.hr_range.1,
            Config,
            "invalid heart-rate range {:?}",
            self.hr_range
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    pub clip: VideoClip,
    pub trace: SignalTrace,
    pub planted_hr: f64,
    pub subject_id: String,
}

/// Appearance and heart rate shared by every clip of one subject.
#[derive(Clone, Debug)]
struct Subject {
    base: Vec<f64>,
    hr: f64,
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Sum of Gaussian blotches per channel, rescaled to `[0.3, 0.7]`.
fn blotch_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = vec![0.0; h * w * CHANNELS];
    for c in 0..CHANNELS {
        let blobs: Vec<(f64, f64, f64, f64)> = (0..BLOTCHES)
            .map(|_| {
                let cy = rng.gen_range(0.0..h as f64);
                let cx = rng.gen_range(0.0..w as f64);
                let radius = rng.gen_range(0.15..0.45) * h.max(w) as f64;
                let weight = rng.gen_range(-1.0..1.0);
                (cy, cx, radius, weight)
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                img[(y * w + x) * CHANNELS + c] = blobs
                    .iter()
                    .map(|&(cy, cx, r, a)| {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        a * (-d2 / (2.0 * r * r)).exp()
                    })
                    .sum();
            }
        }
        let vals = img.iter().skip(c).step_by(CHANNELS);
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = (hi - lo).max(1e-12);
        for v in img.iter_mut().skip(c).step_by(CHANNELS) {
            *v = 0.3 + 0.4 * (*v - lo) / span;
        }
    }
    img
}

fn sample_subject(preset: &SynthPreset, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Subject {
    let base = blotch_image(h, w, rng);
    let (lo, hi) = preset.hr_range;
    let hr = if lo == hi { lo } else { rng.gen_range(lo..hi) };
    Subject { base, hr }
}

/// Pulse waveform `g` sampled at `t` frames, starting `offset` seconds in.
pub fn pulse_waveform(hr_bpm: f64, frames: usize, fps: f64, offset: f64, phi: f64) -> Vec<f64> {
    let f = hr_bpm / 60.0;
    (0..frames)
        .map(|i| {
            let t = offset + i as f64 / fps;
            (2.0 * PI * f * t).sin() + 0.5 * (4.0 * PI * f * t + phi).sin()
        })
        .collect()
}

fn render(
    preset: &SynthPreset,
    subject: &Subject,
    subject_id: &str,
    dims: [usize; 3],
    fps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledClip> {
    let [t, h, w] = dims;
    ensure!(fps > 0.0, Input, "frame rate must be positive");
    ensure!(
        t as f64 >= 2.0 * fps,
        Input,
        "a clip needs at least two seconds of frames ({} at {fps} fps), got {t}",
        (2.0 * fps).ceil()
    );
    ensure!(h >= 1 && w >= 1, Input, "frame size must be at least 1x1");

    let offset = rng.gen_range(0.0..60.0 / subject.hr);
    let phi = rng.gen_range(0.0..2.0 * PI);
    let g = pulse_waveform(subject.hr, t, fps, offset, phi);

    let mut light = Vec::with_capacity(t);
    let mut level = 1.0f64;
    let step = Normal::new(0.0, preset.drift_std.max(f64::MIN_POSITIVE)).expect("finite std");
    for _ in 0..t {
        light.push(level);
        if preset.drift_std > 0.0 {
            level = (level + step.sample(rng)).clamp(1.0 - preset.drift_clamp, 1.0 + preset.drift_clamp);
        }
    }

    let m = preset.motion_px as i64;
    let (end_dy, end_dx) = if m > 0 {
        (rng.gen_range(-m..=m), rng.gen_range(-m..=m))
    } else {
        (0, 0)
    };

    let noise = Normal::new(0.0, preset.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut data = Vec::with_capacity(t * h * w * CHANNELS);
    for (i, (&gi, &li)) in g.iter().zip(&light).enumerate() {
        let frac = if t > 1 { i as f64 / (t - 1) as f64 } else { 0.0 };
        let dy = (end_dy as f64 * frac).round() as i64;
        let dx = (end_dx as f64 * frac).round() as i64;
        let gain = (1.0 + preset.pulse_amplitude * gi) * li;
        for y in 0..h {
            let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
            for x in 0..w {
                let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
                for c in 0..CHANNELS {
                    let eps = if preset.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                    let v = subject.base[(sy * w + sx) * CHANNELS + c] * gain + eps;
                    data.push(round_f32(v.clamp(0.0, 1.0)));
                }
            }
        }
    }
    Ok(LabeledClip {
        clip: VideoClip::new([t, h, w, CHANNELS], round_f32(fps), data)?,
        trace: SignalTrace {
            samples: g.into_iter().map(round_f32).collect(),
            fps: round_f32(fps),
        },
        planted_hr: subject.hr,
        subject_id: subject_id.to_string(),
    })
}

/// One clip of a fresh subject; identical arguments give identical clips.
pub fn generate_clip(preset: &SynthPreset, t: usize, h: usize, w: usize, fps: f64, seed: u64) -> Result<LabeledClip> {
    preset.validate()?;
    let subject = sample_subject(preset, h, w, &mut sub_rng(seed, 0));
    render(preset, &subject, "s000", [t, h, w], fps, &mut sub_rng(seed, 1))
}

/// Like [`generate_clip`] with an explicit heart rate.
pub fn generate_clip_at(
    preset: &SynthPreset,
    hr_bpm: f64,
    dims: [usize; 3],
    fps: f64,
    seed: u64,
) -> Result<LabeledClip> {
    let fixed = SynthPreset {
        hr_range: (hr_bpm, hr_bpm),
        ..preset.clone()
    };
    let [t, h, w] = dims;
    generate_clip(&fixed, t, h, w, fps, seed)
}

pub struct SynthDataset {
    pub clips: Vec<LabeledClip>,
    pub manifest: Manifest,
}

/// Stable identifier of clip `c` of subject `s`.
pub fn clip_id(subject: usize, clip: usize) -> String {
    format!("s{subject:03}_c{clip:03}")
}

/// `n_subjects × clips_per_subject` clips. Each subject draws its appearance
/// and heart rate once; phase, drift, motion and noise vary per clip.
pub fn generate_dataset(
    preset: &SynthPreset,
    n_subjects: usize,
    clips_per_subject: usize,
    dims: [usize; 3],
    fps: f64,
    seed: u64,
) -> Result<SynthDataset> {
    preset.validate()?;
    ensure!(n_subjects >= 1, Input, "need at least one subject");
    ensure!(clips_per_subject >= 1, Input, "need at least one clip per subject");
    let mut clips = Vec::with_capacity(n_subjects * clips_per_subject);
    let mut entries = Vec::with_capacity(n_subjects * clips_per_subject);
    for s in 0..n_subjects {
        let subject = sample_subject(preset, dims[1], dims[2], &mut sub_rng(seed, (s as u64) << 32));
        let sid = format!("s{s:03}");
        for c in 0..clips_per_subject {
            let mut rng = sub_rng(seed, ((s as u64) << 32) | (c as u64 + 1));
            let lc = render(preset, &subject, &sid, dims, fps, &mut rng)?;
            let id = clip_id(s, c);
            entries.push(ManifestEntry {
                clip_path: format!("clips/{id}.gvtc"),
                trace_path: format!("traces/{id}.gvts"),
                subject_id: sid.clone(),
                planted_hr: Some(lc.planted_hr),
            });
            clips.push(lc);
        }
    }
    Ok(SynthDataset {
        clips,
        manifest: Manifest {
            entries,
            generator: Some(GeneratorMeta {
                preset: preset.name,
                seed,
                subjects: n_subjects,
                clips_per_subject,
                dims,
                fps,
            }),
        },
    })
}

/// Per-frame mean over all pixels and channels.
pub fn spatial_mean(clip: &VideoClip) -> Vec<f64> {
    (0..clip.frames())
        .map(|t| {
            let f = clip.frame(t);
            f.iter().sum::<f64>() / f.len() as f64
        })
        .collect()
}

/// Planted-rate in-band power fraction of the spatial-mean signal of the
/// standardized raw frames and of the DiffNorm frames, in that order.
pub fn planted_power_fractions(lc: &LabeledClip) -> Result<(f64, f64)> {
    let fps = lc.clip.fps;
    let f = lc.planted_hr / 60.0;
    let raw = VideoClip::new(lc.clip.dims, fps, standardize(&lc.clip.data, EPS))?;
    let raw_fraction = power_fraction_at(&spatial_mean(&raw), fps, f, DEFAULT_BAND)?;
    let diff = diffnorm_frames(&lc.clip, EPS)?;
    let diff_fraction = power_fraction_at(&spatial_mean(&diff), fps, f, DEFAULT_BAND)?;
    Ok((raw_fraction, diff_fraction))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{hr_from_signal, DEFAULT_BAND};

    #[test]
    fn planted_rate_is_recovered_from_the_trace() {
        let lc = generate_clip_at(&SynthPreset::simple(), 90.0, [600, 8, 8], 30.0, 0).unwrap();
        let hr = hr_from_signal(&lc.trace.samples, 30.0, DEFAULT_BAND).unwrap();
        assert!((hr.bpm - 90.0).abs() <= 0.5, "{}", hr.bpm);
    }

    #[test]
    fn same_seed_same_clip() {
        let a = generate_clip(&SynthPreset::hard(), 60, 8, 8, 30.0, 4).unwrap();
        let b = generate_clip(&SynthPreset::hard(), 60, 8, 8, 30.0, 4).unwrap();
        let c = generate_clip(&SynthPreset::hard(), 60, 8, 8, 30.0, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.clip, c.clip);
    }

    #[test]
    fn too_short_clip_is_rejected() {
        assert!(generate_clip(&SynthPreset::simple(), 59, 8, 8, 30.0, 0).is_err());
    }

    #[test]
    fn values_are_clipped_and_f32_exact() {
        let lc = generate_clip(&SynthPreset::hard(), 60, 6, 6, 30.0, 1).unwrap();
        assert!(lc.clip.data.iter().all(|&v| (0.0..=1.0).contains(&v) && v == v as f32 as f64));
    }

    #[test]
    fn base_image_lies_in_the_documented_range() {
        let mut rng = sub_rng(3, 0);
        let img = blotch_image(10, 12, &mut rng);
        assert!(img.iter().all(|&v| (0.3 - 1e-12..=0.7 + 1e-12).contains(&v)));
        for c in 0..CHANNELS {
            let ch: Vec<f64> = img.iter().skip(c).step_by(CHANNELS).copied().collect();
            assert!(ch.iter().any(|&v| (v - 0.3).abs() < 1e-12));
            assert!(ch.iter().any(|&v| (v - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn dataset_shares_subjects_and_counts_clips() {
        let ds = generate_dataset(&SynthPreset::simple(), 4, 4, [60, 6, 6], 30.0, 0).unwrap();
        assert_eq!(ds.clips.len(), 16);
        let mut bases: Vec<Vec<u64>> = Vec::new();
        for s in 0..4 {
            let group: Vec<&LabeledClip> = ds.clips.iter().filter(|c| c.subject_id == format!("s{s:03}")).collect();
            assert_eq!(group.len(), 4);
            assert!(group.iter().all(|c| c.planted_hr == group[0].planted_hr));
            // frame 0 has no drift or motion yet; only the pulse and noise differ
            let first = &group[0].clip;
            bases.push(first.frame(0).iter().map(|v| v.to_bits()).collect());
        }
        bases.sort();
        bases.dedup();
        assert_eq!(bases.len(), 4);
        assert!(ds.clips.iter().all(|c| (45.0..=150.0).contains(&c.planted_hr)));
        assert_eq!(ds.manifest.entries.len(), 16);
    }

    #[test]
    fn clip_mean_carries_the_pulse_without_noise() {
        let preset = SynthPreset {
            noise_std: 0.0,
            ..SynthPreset::simple()
        };
        let lc = generate_clip_at(&preset, 72.0, [300, 8, 8], 30.0, 2).unwrap();
        let hr = hr_from_signal(&spatial_mean(&lc.clip), 30.0, DEFAULT_BAND).unwrap();
        assert!((hr.bpm - 72.0).abs() <= 0.5, "{}", hr.bpm);
    }
}
