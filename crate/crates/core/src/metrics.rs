//! Heart-rate estimation from waveforms and the evaluation metrics.

use std::fmt;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::preprocess::SignalTrace;

/// Default search band in Hz (36–198 bpm).
pub const DEFAULT_BAND: (f64, f64) = (0.6, 3.3);

/// Minimum FFT length; 4096 points give ≤ 0.44 bpm bins at 30 fps.
pub const MIN_FFT_LEN: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HrEstimate {
    pub bpm: f64,
    /// Power of the peak bin over the total in-band power.
    pub peak_power_fraction: f64,
}

/// Subtracts the least-squares line through `(i, x_i)`.
pub fn detrend(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return vec![0.0; x.len()];
    }
    let tm = (n - 1.0) / 2.0;
    let xm = x.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, &v) in x.iter().enumerate() {
        let dt = i as f64 - tm;
        sxy += dt * (v - xm);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    x.iter()
        .enumerate()
        .map(|(i, &v)| v - xm - slope * (i as f64 - tm))
        .collect()
}

pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// FFT length used for a signal of `len` samples.
pub fn fft_len(len: usize) -> usize {
    len.next_power_of_two().max(MIN_FFT_LEN)
}

/// In-band power spectrum: `(first bin, powers, FFT length)`.
///
/// The signal is detrended, Hamming-windowed and zero-padded to
/// [`fft_len`] before taking the squared magnitude spectrum.
fn band_spectrum(samples: &[f64], fps: f64, band: (f64, f64)) -> Result<(usize, Vec<f64>, usize)> {
    ensure!(fps > 0.0, Estimation, "frame rate must be positive");
    ensure!(
        samples.len() as f64 >= 2.0 * fps,
        Estimation,
        "need at least two seconds of signal ({} samples at {fps} fps), got {}",
        (2.0 * fps).ceil(),
        samples.len()
    );
    ensure!(samples.iter().all(|v| v.is_finite()), Estimation, "signal contains non-finite values");
    let detrended = detrend(samples);
    let scale = samples.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    ensure!(
        detrended.iter().any(|v| v.abs() > 1e-12 * scale.max(1.0)),
        Estimation,
        "signal is constant after detrending"
    );
    let n = fft_len(samples.len());
    let mut buf: Vec<Complex<f64>> = detrended
        .iter()
        .zip(hamming(samples.len()))
        .map(|(v, w)| Complex::new(v * w, 0.0))
        .collect();
    buf.resize(n, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);

    let lo = (band.0 * n as f64 / fps).ceil() as usize;
    let hi = ((band.1 * n as f64 / fps).floor() as usize).min(n / 2);
    ensure!(lo <= hi, Estimation, "band {:?} Hz is empty at {fps} fps", band);
    let power: Vec<f64> = buf[lo..=hi].iter().map(|c| c.norm_sqr()).collect();
    ensure!(power.iter().sum::<f64>() > 0.0, Estimation, "no power inside the band {:?} Hz", band);
    Ok((lo, power, n))
}

/// Dominant in-band frequency of a waveform, in beats per minute.
///
/// The signal is detrended, Hamming-windowed and zero-padded to
/// [`fft_len`] before taking the magnitude spectrum; ties go to the lower bin.
pub fn hr_from_signal(samples: &[f64], fps: f64, band: (f64, f64)) -> Result<HrEstimate> {
    let (lo, power, n) = band_spectrum(samples, fps, band)?;
    let mut best = 0;
    for (k, &p) in power.iter().enumerate() {
        if p > power[best] {
            best = k;
        }
    }
    let total: f64 = power.iter().sum();
    Ok(HrEstimate {
        bpm: 60.0 * (lo + best) as f64 * fps / n as f64,
        peak_power_fraction: power[best] / total,
    })
}

/// Share of in-band power inside the Hamming main lobe around `freq_hz`,
/// i.e. within `±2·fps/len` Hz of it.
pub fn power_fraction_at(samples: &[f64], fps: f64, freq_hz: f64, band: (f64, f64)) -> Result<f64> {
    let (lo, power, n) = band_spectrum(samples, fps, band)?;
    let half = 2.0 * fps / samples.len() as f64;
    let total: f64 = power.iter().sum();
    let near: f64 = power
        .iter()
        .enumerate()
        .filter(|(k, _)| ((lo + k) as f64 * fps / n as f64 - freq_hz).abs() <= half)
        .map(|(_, p)| p)
        .sum();
    Ok(near / total)
}

/// Inverse of differenced labels: cumulative sum, then linear detrend.
///
/// The sum is exclusive (`out[0] = 0`), matching the trailing zero that
/// [`diff_labels`](crate::preprocess::diff_labels) appends, so integrating
/// differenced labels reproduces the trace up to offset, scale and trend.
pub fn integrate_diff(pred: &SignalTrace) -> SignalTrace {
    let mut acc = 0.0;
    let cum: Vec<f64> = pred
        .samples
        .iter()
        .map(|v| {
            let before = acc;
            acc += v;
            before
        })
        .collect();
    SignalTrace {
        samples: detrend(&cum),
        fps: pred.fps,
    }
}

/// One evaluated window: predicted and reference heart rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HrPair {
    pub clip_id: String,
    pub pred_bpm: f64,
    pub label_bpm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub mae: f64,
    pub rmse: f64,
    /// Absent when the labels (or predictions) have zero variance.
    pub pearson: Option<f64>,
    pub excluded_windows: usize,
    #[serde(skip)]
    pub pairs: Vec<HrPair>,
}

impl fmt::Display for ExperimentResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MAE {:.3} bpm, RMSE {:.3} bpm, ", self.mae, self.rmse)?;
        match self.pearson {
            Some(r) => write!(f, "rho {r:.3}")?,
            None => write!(f, "rho n/a")?,
        }
        write!(f, " over {} windows", self.pairs.len())
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 || x.len() != y.len() {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// MAE, RMSE and Pearson correlation over paired heart rates.
pub fn compute_metrics(pairs: Vec<HrPair>, excluded_windows: usize) -> Result<ExperimentResult> {
    if pairs.is_empty() {
        return Err(Error::Input("no evaluated windows to score".into()));
    }
    let n = pairs.len() as f64;
    let mae = pairs.iter().map(|p| (p.pred_bpm - p.label_bpm).abs()).sum::<f64>() / n;
    let rmse = (pairs.iter().map(|p| (p.pred_bpm - p.label_bpm).powi(2)).sum::<f64>() / n).sqrt();
    let preds: Vec<f64> = pairs.iter().map(|p| p.pred_bpm).collect();
    let labels: Vec<f64> = pairs.iter().map(|p| p.label_bpm).collect();
    Ok(ExperimentResult {
        mae,
        rmse,
        pearson: pearson(&preds, &labels),
        excluded_windows,
        pairs,
    })
}

/// Writes `clip_id,pred_bpm,label_bpm` rows.
pub fn write_pairs_csv<W: std::io::Write>(mut w: W, pairs: &[HrPair]) -> std::io::Result<()> {
    writeln!(w, "clip_id,pred_bpm,label_bpm")?;
    for p in pairs {
        writeln!(w, "{},{},{}", p.clip_id, p.pred_bpm, p.label_bpm)?;
    }
    Ok(())
}
