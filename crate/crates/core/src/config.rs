//! Points of the design space: model and preprocessing configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutputFormat {
    #[serde(rename = "HR")]
    Hr,
    Signal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameFormat {
    Raw,
    DiffNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PosEncoding {
    #[serde(rename = "ABS")]
    Abs,
    #[serde(rename = "REL")]
    Rel,
    #[serde(rename = "CPE")]
    Cpe,
}

/// The three stage transitions, stage 1→2, 2→3 and 3→4.
pub const TRANSITIONS: usize = 3;

/// Which stage transitions additionally halve the temporal extent.
///
/// Scale-0 keeps time intact, Scale-1..3 downsample once when leaving stage
/// 1, 2 or 3, and Scale-4..6 downsample twice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScalingStrategy(u8);

impl ScalingStrategy {
    pub const ALL: [ScalingStrategy; 7] = [
        ScalingStrategy(0),
        ScalingStrategy(1),
        ScalingStrategy(2),
        ScalingStrategy(3),
        ScalingStrategy(4),
        ScalingStrategy(5),
        ScalingStrategy(6),
    ];

    pub fn new(id: u8) -> Result<Self> {
        ensure!(id <= 6, Config, "scaling strategy must be Scale-0..Scale-6, got Scale-{id}");
        Ok(Self(id))
    }

    pub fn id(self) -> u8 {
        self.0
    }

    /// Temporal downsampling flag for each of the three transitions.
    pub fn temporal_flags(self) -> [bool; TRANSITIONS] {
        match self.0 {
            0 => [false, false, false],
            1 => [true, false, false],
            2 => [false, true, false],
            3 => [false, false, true],
            4 => [true, true, false],
            5 => [true, false, true],
            6 => [false, true, true],
            _ => unreachable!(),
        }
    }

    pub fn temporal_downsamples(self) -> u32 {
        self.temporal_flags().iter().filter(|&&f| f).count() as u32
    }
}

impl fmt::Display for ScalingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Scale-{}", self.0)
    }
}

impl FromStr for ScalingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let id = s
            .strip_prefix("Scale-")
            .and_then(|d| d.parse::<u8>().ok())
            .ok_or_else(|| Error::Config(format!("unknown scaling strategy {s:?}")))?;
        Self::new(id)
    }
}

impl Serialize for ScalingStrategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ScalingStrategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One point in the model design space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Clip extents `(T, H, W)`.
    pub input_dims: [usize; 3],
    pub output_format: OutputFormat,
    pub frame_format: FrameFormat,
    pub signal_norm: bool,
    pub pos_encoding: PosEncoding,
    pub scaling: ScalingStrategy,
    pub base_width: usize,
    pub stage_depths: [usize; 4],
    pub heads_per_stage: [usize; 4],
    pub mlp_ratio: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::general(true)
    }
}

impl ModelConfig {
    /// The majority-vote configuration: 120×64×64 clips, signal output,
    /// DiffNorm frames, REL encoding and Scale-2. Output signals are
    /// normalized only for simple recording conditions.
    pub fn general(simple: bool) -> Self {
        Self {
            input_dims: [120, 64, 64],
            output_format: OutputFormat::Signal,
            frame_format: FrameFormat::DiffNorm,
            signal_norm: simple,
            pos_encoding: PosEncoding::Rel,
            scaling: ScalingStrategy(2),
            base_width: 32,
            stage_depths: [1, 1, 2, 1],
            heads_per_stage: [1, 2, 4, 8],
            mlp_ratio: 4.0,
        }
    }

    /// An 8×8×8 model small enough for exhaustive numerical checks.
    pub fn tiny() -> Self {
        Self {
            input_dims: [8, 8, 8],
            scaling: ScalingStrategy(0),
            base_width: 4,
            stage_depths: [1, 1, 1, 1],
            mlp_ratio: 2.0,
            ..Self::general(true)
        }
    }

    /// Token-grid extents `(t, h, w)` and channel count of stages 1 to 4.
    /// Stage 1 runs on the stem output.
    pub fn stage_grids(&self) -> Result<[[usize; 4]; 4]> {
        self.validate()?;
        Ok(self.schedule())
    }

    fn schedule(&self) -> [[usize; 4]; 4] {
        let [t, h, w] = self.input_dims;
        let mut g = [t / 2, h / 4, w / 4, self.base_width];
        let mut out = [[0; 4]; 4];
        out[0] = g;
        for (i, temporal) in self.scaling.temporal_flags().into_iter().enumerate() {
            g = [
                if temporal { g[0] / 2 } else { g[0] },
                halve_spatial(g[1]),
                halve_spatial(g[2]),
                g[3] * 2,
            ];
            out[i + 1] = g;
        }
        out
    }

    /// Number of ×2 temporal upsampling blocks the signal head needs.
    pub fn head_upsampling_blocks(&self) -> u32 {
        1 + self.scaling.temporal_downsamples()
    }

    /// Checks that every stage extent is integral and widths split into heads.
    ///
    /// Time must be divisible by `2·2^k` for `k` temporal downsamples. Space
    /// must be divisible by 4 at the stem; at each transition a spatial
    /// extent must be even, or already 1 (in which case it stays 1).
    pub fn validate(&self) -> Result<()> {
        let [t, h, w] = self.input_dims;
        ensure!(t >= 3 && h >= 7 && w >= 7, Config, "input dims {:?} too small for the patchify stem", self.input_dims);
        let tdiv = 2usize << self.scaling.temporal_downsamples();
        ensure!(
            t % tdiv == 0,
            Config,
            "T={t} must be divisible by {tdiv} for {} (stem halves T once)",
            self.scaling
        );
        ensure!(h % 4 == 0 && w % 4 == 0, Config, "H, W must be divisible by 4, got {h}x{w}");
        let (mut gh, mut gw) = (h / 4, w / 4);
        for i in 0..TRANSITIONS {
            for (name, e) in [("height", gh), ("width", gw)] {
                ensure!(
                    e == 1 || e % 2 == 0,
                    Config,
                    "{name} extent {e} entering transition {} cannot be halved (input {h}x{w})",
                    i + 1
                );
            }
            gh = halve_spatial(gh);
            gw = halve_spatial(gw);
        }
        ensure!(self.base_width >= 1, Config, "base_width must be positive");
        ensure!(self.mlp_ratio > 0.0, Config, "mlp_ratio must be positive");
        for (i, &heads) in self.heads_per_stage.iter().enumerate() {
            let width = self.base_width << i;
            ensure!(heads >= 1, Config, "stage {} needs at least one head", i + 1);
            ensure!(
                width.is_multiple_of(heads),
                Config,
                "stage {} width {width} not divisible by {heads} heads",
                i + 1
            );
        }
        Ok(())
    }
}

fn halve_spatial(e: usize) -> usize {
    if e == 1 {
        1
    } else {
        e / 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_flags() {
        let flags: Vec<_> = ScalingStrategy::ALL.iter().map(|s| s.temporal_flags()).collect();
        assert_eq!(flags[0], [false, false, false]);
        assert_eq!(flags[2], [false, true, false]);
        assert_eq!(flags[5], [true, false, true]);
        assert!(ScalingStrategy::ALL[1..4].iter().all(|s| s.temporal_downsamples() == 1));
        assert!(ScalingStrategy::ALL[4..].iter().all(|s| s.temporal_downsamples() == 2));
        assert!(ScalingStrategy::new(7).is_err());
    }

    #[test]
    fn strategy_text_round_trip() {
        for s in ScalingStrategy::ALL {
            assert_eq!(s.to_string().parse::<ScalingStrategy>().unwrap(), s);
        }
        assert!("Scale-9".parse::<ScalingStrategy>().is_err());
        assert!("scale2".parse::<ScalingStrategy>().is_err());
    }

    #[test]
    fn general_config_flags() {
        let simple = ModelConfig::general(true);
        assert_eq!(simple.input_dims, [120, 64, 64]);
        assert_eq!(simple.output_format, OutputFormat::Signal);
        assert_eq!(simple.frame_format, FrameFormat::DiffNorm);
        assert!(simple.signal_norm);
        assert_eq!(simple.pos_encoding, PosEncoding::Rel);
        assert_eq!(simple.scaling.to_string(), "Scale-2");
        assert!(simple.validate().is_ok());
        let hard = ModelConfig::general(false);
        assert!(!hard.signal_norm);
        assert_eq!(ModelConfig { signal_norm: true, ..hard }, simple);
    }

    #[test]
    fn schedule_for_scale_two() {
        let g = ModelConfig::general(true).stage_grids().unwrap();
        assert_eq!(g[0][..3], [60, 16, 16]);
        assert_eq!(g[1][..3], [60, 8, 8]);
        assert_eq!(g[2][..3], [30, 4, 4]);
        assert_eq!(g[3][..3], [30, 2, 2]);
        assert_eq!([g[0][3], g[1][3], g[2][3], g[3][3]], [32, 64, 128, 256]);
    }

    #[test]
    fn indivisible_time_is_rejected() {
        let mut cfg = ModelConfig::general(true);
        cfg.input_dims = [30, 64, 64];
        cfg.scaling = ScalingStrategy::new(4).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.scaling = ScalingStrategy::new(1).unwrap();
        assert!(cfg.validate().is_err(), "15 frames cannot be halved");
        cfg.scaling = ScalingStrategy::new(0).unwrap();
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn serde_names() {
        let json = serde_json::to_string(&ModelConfig::general(true)).unwrap();
        assert!(json.contains("\"scaling\":\"Scale-2\""));
        assert!(json.contains("\"input_dims\":[120,64,64]"));
        assert!(json.contains("\"pos_encoding\":\"REL\""));
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ModelConfig::general(true));
    }
}
