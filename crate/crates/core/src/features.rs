//! Network input matrices built from stream states.
//!
//! Rows are, top to bottom: throughput `C`, buffer `B`, previous bitrate `Y`,
//! then the selected lower-layer quantities in the fixed order MAC, PRB, MCS.
//! Each row holds `k` values, most recent first.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{StreamState, VideoLadder};
use crate::error::{AbrError, Result};
use crate::trace::{Trace, MAX_MCS_INDEX};

/// Rows that are always present.
pub const BASE_ROWS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowerLayer {
    Mac,
    Prb,
    Mcs,
}

impl LowerLayer {
    pub const ALL: [LowerLayer; 3] = [LowerLayer::Mac, LowerLayer::Prb, LowerLayer::Mcs];

    /// Position in `StreamState::recent_lower_layers`.
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for LowerLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LowerLayer::Mac => "mac",
            LowerLayer::Prb => "prb",
            LowerLayer::Mcs => "mcs",
        })
    }
}

impl FromStr for LowerLayer {
    type Err = AbrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mac" => Ok(LowerLayer::Mac),
            "prb" => Ok(LowerLayer::Prb),
            "mcs" => Ok(LowerLayer::Mcs),
            other => Err(AbrError::Config(format!("unknown lower layer {other:?} (expected mac, prb or mcs)"))),
        }
    }
}

/// Which lower-layer rows feed the network. Stored sorted and deduplicated.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<LowerLayer>", into = "Vec<LowerLayer>")]
pub struct InputConfig {
    layers: Vec<LowerLayer>,
}

impl From<Vec<LowerLayer>> for InputConfig {
    fn from(v: Vec<LowerLayer>) -> Self {
        InputConfig::new(v)
    }
}

impl From<InputConfig> for Vec<LowerLayer> {
    fn from(c: InputConfig) -> Self {
        c.layers
    }
}

impl InputConfig {
    pub fn new(mut layers: Vec<LowerLayer>) -> Self {
        layers.sort();
        layers.dedup();
        Self { layers }
    }

    /// APP-layer information only (`M = 0`).
    pub fn app_only() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self::new(LowerLayer::ALL.to_vec())
    }

    /// Parses a comma-separated list such as `mac,prb`; `none` or an empty
    /// string selects no lower layer.
    pub fn parse_list(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(Self::app_only());
        }
        Ok(Self::new(s.split(',').map(str::parse).collect::<Result<_>>()?))
    }

    pub fn layers(&self) -> &[LowerLayer] {
        &self.layers
    }

    /// `M`, the number of lower-layer rows.
    pub fn num_lower(&self) -> usize {
        self.layers.len()
    }

    /// `M + 3`.
    pub fn rows(&self) -> usize {
        BASE_ROWS + self.layers.len()
    }
}

impl fmt::Display for InputConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.layers.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<String> = self.layers.iter().map(|l| l.to_string()).collect();
        f.write_str(&names.join(","))
    }
}

/// Divisors applied to every input row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub throughput_scale: f64,
    pub buffer_scale: f64,
    pub bitrate_scale: f64,
    pub mac_scale: f64,
    pub prb_scale: f64,
    pub mcs_scale: f64,
}

impl Normalization {
    /// Throughput, MAC rate and bitrates over the top ladder rate, buffer over
    /// its capacity, PRB over the largest count seen in `train`, MCS over 31.
    pub fn from_training(train: &[Trace], ladder: &VideoLadder, buffer_cap_s: f64) -> Self {
        let max_prb = train
            .iter()
            .flat_map(|t| t.samples.iter().map(|s| s.prb_count))
            .max()
            .unwrap_or(1)
            .max(1);
        let r_max = ladder.max_bitrate();
        Self {
            throughput_scale: r_max,
            buffer_scale: buffer_cap_s,
            bitrate_scale: r_max,
            mac_scale: r_max,
            prb_scale: max_prb as f64,
            mcs_scale: MAX_MCS_INDEX as f64,
        }
    }

    fn lower_scale(&self, layer: LowerLayer) -> f64 {
        match layer {
            LowerLayer::Mac => self.mac_scale,
            LowerLayer::Prb => self.prb_scale,
            LowerLayer::Mcs => self.mcs_scale,
        }
    }
}

/// Row-major `(M+3) x k` input matrix for `state`.
pub fn build_input(state: &StreamState, inputs: &InputConfig, norm: &Normalization) -> Vec<f64> {
    let k = state.history_len();
    let mut x = Vec::with_capacity(inputs.rows() * k);
    x.extend(state.recent_throughputs.iter().map(|v| v / norm.throughput_scale));
    x.extend(state.recent_buffers.iter().map(|v| v / norm.buffer_scale));
    x.extend(state.recent_bitrates.iter().map(|v| v / norm.bitrate_scale));
    for &layer in inputs.layers() {
        let scale = norm.lower_scale(layer);
        x.extend(state.recent_lower_layers[layer.index()].iter().map(|v| v / scale));
    }
    x
}
