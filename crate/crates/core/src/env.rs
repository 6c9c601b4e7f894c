//! Chunk-level streaming simulator.
//!
//! The simulator advances one video chunk per decision. At stage `n` the
//! state carries the throughput `C_n` that chunk `n` will be downloaded at,
//! the buffer level `B_n` when the download starts, the lower-layer readings
//! `X_n` and the previously chosen bitrate `Y_n = R_{n-1}`. Stepping with an
//! action `R_n` downloads the chunk, updates the buffer and then observes the
//! next trace sample to form `S_{n+1}`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{AbrError, Result};
use crate::trace::{Trace, TraceSample};

/// Encoding ladder used throughout the experiments (Mbit/s).
pub const DEFAULT_BITRATES_MBPS: [f64; 6] = [0.3, 0.75, 1.2, 1.85, 2.85, 4.3];

/// Number of lower-layer quantities carried by every trace sample.
pub const LOWER_LAYER_COUNT: usize = 3;

/// Per-chunk quality utility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Utility {
    /// `U(R) = ln(R / r_1)`.
    Log,
    /// Explicit utility per ladder level, nondecreasing and concave in bitrate.
    Table(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct LadderSpec {
    chunk_duration_s: f64,
    num_chunks: usize,
    bitrates_mbps: Vec<f64>,
    utility: Utility,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LadderSpec", into = "LadderSpec")]
pub struct VideoLadder {
    pub chunk_duration_s: f64,
    pub num_chunks: usize,
    bitrates_mbps: Vec<f64>,
    utility: Utility,
    utilities: Vec<f64>,
}

impl Default for LadderSpec {
    fn default() -> Self {
        VideoLadder::standard().into()
    }
}

impl TryFrom<LadderSpec> for VideoLadder {
    type Error = AbrError;

    fn try_from(s: LadderSpec) -> Result<Self> {
        VideoLadder::new(s.chunk_duration_s, s.num_chunks, s.bitrates_mbps, s.utility)
    }
}

impl From<VideoLadder> for LadderSpec {
    fn from(l: VideoLadder) -> Self {
        LadderSpec {
            chunk_duration_s: l.chunk_duration_s,
            num_chunks: l.num_chunks,
            bitrates_mbps: l.bitrates_mbps,
            utility: l.utility,
        }
    }
}

impl VideoLadder {
    pub fn new(
        chunk_duration_s: f64,
        num_chunks: usize,
        bitrates_mbps: Vec<f64>,
        utility: Utility,
    ) -> Result<Self> {
        if !(chunk_duration_s > 0.0 && chunk_duration_s.is_finite()) {
            return Err(AbrError::Config(format!(
                "chunk duration must be positive, got {chunk_duration_s}"
            )));
        }
        if num_chunks == 0 {
            return Err(AbrError::Config("video needs at least one chunk".into()));
        }
        if bitrates_mbps.len() < 2 {
            return Err(AbrError::Config("bitrate ladder needs at least two levels".into()));
        }
        if bitrates_mbps[0] <= 0.0 || bitrates_mbps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(AbrError::Config(
                "bitrates must be positive and strictly increasing".into(),
            ));
        }
        let utilities = match &utility {
            Utility::Log => {
                let base = bitrates_mbps[0];
                bitrates_mbps.iter().map(|r| (r / base).ln()).collect()
            }
            Utility::Table(values) => {
                if values.len() != bitrates_mbps.len() {
                    return Err(AbrError::Config(format!(
                        "utility table has {} entries for {} ladder levels",
                        values.len(),
                        bitrates_mbps.len()
                    )));
                }
                if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(AbrError::Config("utility values must be finite and >= 0".into()));
                }
                let slopes: Vec<f64> = values
                    .windows(2)
                    .zip(bitrates_mbps.windows(2))
                    .map(|(u, r)| (u[1] - u[0]) / (r[1] - r[0]))
                    .collect();
                if slopes.iter().any(|s| *s < 0.0) {
                    return Err(AbrError::Config("utility table must be nondecreasing".into()));
                }
                if slopes.windows(2).any(|s| s[1] > s[0] + 1e-12) {
                    return Err(AbrError::Config("utility table must be concave".into()));
                }
                values.clone()
            }
        };
        Ok(Self {
            chunk_duration_s,
            num_chunks,
            bitrates_mbps,
            utility,
            utilities,
        })
    }

    /// Six-level ladder, 4 s chunks, 48 chunks, log utility.
    pub fn standard() -> Self {
        Self::new(4.0, 48, DEFAULT_BITRATES_MBPS.to_vec(), Utility::Log)
            .expect("standard ladder is valid")
    }

    pub fn levels(&self) -> usize {
        self.bitrates_mbps.len()
    }

    pub fn bitrates_mbps(&self) -> &[f64] {
        &self.bitrates_mbps
    }

    pub fn bitrate(&self, index: usize) -> f64 {
        self.bitrates_mbps[index]
    }

    pub fn max_bitrate(&self) -> f64 {
        *self.bitrates_mbps.last().expect("ladder is non-empty")
    }

    pub fn utility_kind(&self) -> &Utility {
        &self.utility
    }

    pub fn utility(&self, index: usize) -> f64 {
        self.utilities[index]
    }

    pub fn with_num_chunks(&self, num_chunks: usize) -> Result<Self> {
        Self::new(
            self.chunk_duration_s,
            num_chunks,
            self.bitrates_mbps.clone(),
            self.utility.clone(),
        )
    }
}

/// Weights on quality variation and rebuffering in the per-stage QoE.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QoeWeights {
    pub alpha: f64,
    pub beta_rebuf: f64,
}

impl Default for QoeWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta_rebuf: 4.3,
        }
    }
}

impl QoeWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite())
            || !(self.beta_rebuf >= 0.0 && self.beta_rebuf.is_finite())
        {
            return Err(AbrError::Config(format!(
                "QoE weights must be finite and non-negative, got alpha={} beta_rebuf={}",
                self.alpha, self.beta_rebuf
            )));
        }
        Ok(())
    }
}

/// What happens when the video outlasts the trace.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEnd {
    #[default]
    Wrap,
    Truncate,
}

/// Which throughput sample the state exposes when chunk `n` is requested.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationTiming {
    /// `S_n` holds `C_n`, the throughput chunk `n` will be fetched at.
    #[default]
    Concurrent,
    /// `S_n` holds `C_{n-1}`: throughput is only known after a download,
    /// lower-layer readings are available when the request is made.
    Causal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub ladder: VideoLadder,
    pub weights: QoeWeights,
    pub buffer_cap_s: f64,
    /// History length `k` of every state component.
    pub history_len: usize,
    pub trace_end: TraceEnd,
    /// Drop the variation term on the very first chunk of an episode.
    pub zero_first_variation: bool,
    pub observation: ObservationTiming,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            ladder: VideoLadder::standard(),
            weights: QoeWeights::default(),
            buffer_cap_s: 60.0,
            history_len: 8,
            trace_end: TraceEnd::Wrap,
            zero_first_variation: false,
            observation: ObservationTiming::Concurrent,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.buffer_cap_s > 0.0 && self.buffer_cap_s.is_finite()) {
            return Err(AbrError::Config("buffer capacity must be positive".into()));
        }
        if self.history_len == 0 {
            return Err(AbrError::Config("history length k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Augmented MDP state. Histories are most-recent-first and exactly `k` long.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState {
    pub buffer_s: f64,
    pub recent_throughputs: Vec<f64>,
    pub recent_buffers: Vec<f64>,
    pub recent_bitrates: Vec<f64>,
    /// MAC rate (Mbit/s), PRB count and MCS index histories.
    pub recent_lower_layers: [Vec<f64>; LOWER_LAYER_COUNT],
    /// Ladder index of `Y_n`.
    pub prev_action: usize,
    pub chunk_index: usize,
    /// Absolute (unwrapped) trace position of the sample observed at this stage.
    pub trace_pos: usize,
}

impl StreamState {
    /// Most recent throughput in the state (the download rate of the current
    /// chunk under concurrent observation).
    pub fn throughput(&self) -> f64 {
        self.recent_throughputs[0]
    }

    pub fn history_len(&self) -> usize {
        self.recent_throughputs.len()
    }
}

fn shift_in(history: &[f64], value: f64) -> Vec<f64> {
    let mut next = Vec::with_capacity(history.len());
    next.push(value);
    next.extend_from_slice(&history[..history.len() - 1]);
    next
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionSample {
    pub state: StreamState,
    pub action_index: usize,
    pub reward: f64,
    pub next_state: StreamState,
    pub rebuffer_s: f64,
    pub quality: f64,
    pub variation: f64,
}

/// Result of downloading one chunk.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BufferOutcome {
    pub next_buffer_s: f64,
    pub rebuffer_s: f64,
    pub download_time_s: f64,
}

/// Buffer evolution over one chunk download.
///
/// The outer positive part is read as a clamp to `[0, buffer_cap_s]`: a full
/// buffer makes the client wait before requesting the next chunk.
pub fn buffer_update(
    buffer_s: f64,
    bitrate_mbps: f64,
    throughput_mbps: f64,
    chunk_duration_s: f64,
    buffer_cap_s: f64,
) -> Result<BufferOutcome> {
    if !(throughput_mbps > 0.0 && throughput_mbps.is_finite()) {
        return Err(AbrError::InvalidTrace(format!(
            "throughput must be positive, got {throughput_mbps}"
        )));
    }
    let download_time_s = bitrate_mbps * chunk_duration_s / throughput_mbps;
    let rebuffer_s = (download_time_s - buffer_s).max(0.0);
    let drained = (buffer_s - download_time_s).max(0.0);
    let next_buffer_s = (drained + chunk_duration_s).min(buffer_cap_s).max(0.0);
    Ok(BufferOutcome {
        next_buffer_s,
        rebuffer_s,
        download_time_s,
    })
}

/// Per-stage QoE decomposition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageReward {
    pub quality: f64,
    pub variation: f64,
    pub rebuffer_s: f64,
    pub reward: f64,
    pub next_buffer_s: f64,
}

/// Outcome of [`Simulator::step`].
#[derive(Clone, Debug, PartialEq)]
pub enum Step {
    Transition(Box<TransitionSample>),
    /// The trace has no further sample and the end policy is `Truncate`.
    TraceExhausted,
}

/// Deterministic simulator bound to one environment configuration.
#[derive(Clone, Debug)]
pub struct Simulator {
    cfg: EnvConfig,
}

impl Simulator {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn ladder(&self) -> &VideoLadder {
        &self.cfg.ladder
    }

    /// Stage-1 state: empty buffer, lowest previous bitrate, histories padded
    /// with the first observed sample.
    pub fn initial_state(&self, trace: &Trace, start: usize) -> Result<StreamState> {
        if trace.is_empty() {
            return Err(AbrError::InvalidTrace(format!("trace {} is empty", trace.id)));
        }
        let k = self.cfg.history_len;
        let first = self.sample_at(trace, start).ok_or_else(|| {
            AbrError::InvalidTrace(format!(
                "start offset {start} beyond trace {} of length {}",
                trace.id,
                trace.len()
            ))
        })?;
        let lower = first.lower_layers();
        Ok(StreamState {
            buffer_s: 0.0,
            recent_throughputs: vec![first.app_throughput_mbps; k],
            recent_buffers: vec![0.0; k],
            recent_bitrates: vec![self.cfg.ladder.bitrate(0); k],
            recent_lower_layers: lower.map(|v| vec![v; k]),
            prev_action: 0,
            chunk_index: 0,
            trace_pos: start,
        })
    }

    /// Throughput the chunk requested in `state` is fetched at.
    pub fn download_throughput(&self, state: &StreamState, trace: &Trace) -> Result<f64> {
        match self.cfg.observation {
            ObservationTiming::Concurrent => Ok(state.throughput()),
            ObservationTiming::Causal => self
                .sample_at(trace, state.trace_pos)
                .map(|s| s.app_throughput_mbps)
                .ok_or_else(|| {
                    AbrError::InvalidTrace(format!("trace {} has no sample {}", trace.id, state.trace_pos))
                }),
        }
    }

    /// Trace sample at absolute position `pos` under the end-of-trace policy.
    pub fn trace_sample<'t>(&self, trace: &'t Trace, pos: usize) -> Option<&'t TraceSample> {
        self.sample_at(trace, pos)
    }

    fn sample_at<'t>(&self, trace: &'t Trace, pos: usize) -> Option<&'t TraceSample> {
        match self.cfg.trace_end {
            TraceEnd::Wrap if !trace.is_empty() => trace.samples.get(pos % trace.len()),
            _ => trace.samples.get(pos),
        }
    }

    /// QoE of choosing `action_index` in `state` when the chunk is fetched at
    /// `throughput_mbps`.
    pub fn reward(
        &self,
        state: &StreamState,
        action_index: usize,
        throughput_mbps: f64,
    ) -> Result<StageReward> {
        let ladder = &self.cfg.ladder;
        if action_index >= ladder.levels() {
            return Err(AbrError::Config(format!(
                "action {action_index} outside ladder of {} levels",
                ladder.levels()
            )));
        }
        let outcome = buffer_update(
            state.buffer_s,
            ladder.bitrate(action_index),
            throughput_mbps,
            ladder.chunk_duration_s,
            self.cfg.buffer_cap_s,
        )?;
        let quality = ladder.utility(action_index);
        let variation = if self.cfg.zero_first_variation && state.chunk_index == 0 {
            0.0
        } else {
            (quality - ladder.utility(state.prev_action)).abs()
        };
        let w = self.cfg.weights;
        Ok(StageReward {
            quality,
            variation,
            rebuffer_s: outcome.rebuffer_s,
            reward: quality - w.alpha * variation - w.beta_rebuf * outcome.rebuffer_s,
            next_buffer_s: outcome.next_buffer_s,
        })
    }

    /// Downloads the current chunk at the chosen bitrate and observes the next
    /// trace sample.
    pub fn step(&self, state: &StreamState, action_index: usize, trace: &Trace) -> Result<Step> {
        let Some(next_obs) = self.sample_at(trace, state.trace_pos + 1) else {
            return Ok(Step::TraceExhausted);
        };
        let next_obs = *next_obs;
        let current = self.download_throughput(state, trace)?;
        let stage = self.reward(state, action_index, current)?;
        let bitrate = self.cfg.ladder.bitrate(action_index);
        let lower = next_obs.lower_layers();
        let observed = match self.cfg.observation {
            ObservationTiming::Concurrent => next_obs.app_throughput_mbps,
            ObservationTiming::Causal => current,
        };
        let next_state = StreamState {
            buffer_s: stage.next_buffer_s,
            recent_throughputs: shift_in(&state.recent_throughputs, observed),
            recent_buffers: shift_in(&state.recent_buffers, stage.next_buffer_s),
            recent_bitrates: shift_in(&state.recent_bitrates, bitrate),
            recent_lower_layers: std::array::from_fn(|m| {
                shift_in(&state.recent_lower_layers[m], lower[m])
            }),
            prev_action: action_index,
            chunk_index: state.chunk_index + 1,
            trace_pos: state.trace_pos + 1,
        };
        Ok(Step::Transition(Box::new(TransitionSample {
            state: state.clone(),
            action_index,
            reward: stage.reward,
            next_state,
            rebuffer_s: stage.rebuffer_s,
            quality: stage.quality,
            variation: stage.variation,
        })))
    }

    /// Plays one video (up to `num_chunks` stages) with the given policy.
    pub fn rollout<P>(&self, trace: &Trace, episode: &EpisodeConfig, mut policy: P) -> Result<Episode>
    where
        P: FnMut(&StreamState) -> Result<usize>,
    {
        let mut state = self.initial_state(trace, episode.start_offset)?;
        let mut samples = Vec::with_capacity(self.cfg.ladder.num_chunks);
        for _ in 0..self.cfg.ladder.num_chunks {
            let action = policy(&state)?;
            match self.step(&state, action, trace)? {
                Step::Transition(sample) => {
                    state = sample.next_state.clone();
                    samples.push(*sample);
                }
                Step::TraceExhausted => break,
            }
        }
        let report = EpisodeReport::from_samples(&trace.id, &samples, &self.cfg.ladder, episode.gamma);
        Ok(Episode { samples, report })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeConfig {
    pub start_offset: usize,
    /// Discount used for the report's discounted return.
    pub gamma: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            start_offset: 0,
            gamma: 0.99,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub samples: Vec<TransitionSample>,
    pub report: EpisodeReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChunkRecord {
    pub chunk: usize,
    pub bitrate_mbps: f64,
    pub quality: f64,
    pub variation: f64,
    pub rebuffer_s: f64,
    pub reward: f64,
}

/// Per-episode summary with the QoE decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeReport {
    pub trace_id: String,
    pub chunks: Vec<ChunkRecord>,
    pub total_quality: f64,
    pub total_variation: f64,
    pub total_rebuffer_s: f64,
    pub total_reward: f64,
    pub discounted_return: f64,
}

impl EpisodeReport {
    pub fn from_samples(
        trace_id: &str,
        samples: &[TransitionSample],
        ladder: &VideoLadder,
        gamma: f64,
    ) -> Self {
        let chunks: Vec<ChunkRecord> = samples
            .iter()
            .map(|s| ChunkRecord {
                chunk: s.state.chunk_index,
                bitrate_mbps: ladder.bitrate(s.action_index),
                quality: s.quality,
                variation: s.variation,
                rebuffer_s: s.rebuffer_s,
                reward: s.reward,
            })
            .collect();
        let rewards: Vec<f64> = chunks.iter().map(|c| c.reward).collect();
        Self {
            trace_id: trace_id.to_string(),
            total_quality: chunks.iter().map(|c| c.quality).sum(),
            total_variation: chunks.iter().map(|c| c.variation).sum(),
            total_rebuffer_s: chunks.iter().map(|c| c.rebuffer_s).sum(),
            total_reward: rewards.iter().sum(),
            discounted_return: discounted_return(&rewards, gamma),
            chunks,
        }
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    fn per_chunk(&self, total: f64) -> f64 {
        if self.chunks.is_empty() {
            0.0
        } else {
            total / self.chunks.len() as f64
        }
    }

    /// Undiscounted mean QoE per chunk.
    pub fn mean_qoe(&self) -> f64 {
        self.per_chunk(self.total_reward)
    }

    pub fn mean_quality(&self) -> f64 {
        self.per_chunk(self.total_quality)
    }

    pub fn mean_variation(&self) -> f64 {
        self.per_chunk(self.total_variation)
    }

    pub fn mean_rebuffer_s(&self) -> f64 {
        self.per_chunk(self.total_rebuffer_s)
    }
}

/// `sum_n gamma^n r_n` accumulated front to back.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for r in rewards {
        total += discount * r;
        discount *= gamma;
    }
    total
}

/// Writes per-chunk rows `trace_id,chunk,bitrate_mbps,quality,variation,rebuffer_s,reward`.
pub fn write_episode_csv<W: Write>(reports: &[EpisodeReport], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record([
        "trace_id",
        "chunk",
        "bitrate_mbps",
        "quality",
        "variation",
        "rebuffer_s",
        "reward",
    ])?;
    for report in reports {
        for c in &report.chunks {
            writer.write_record(&[
                report.trace_id.clone(),
                c.chunk.to_string(),
                c.bitrate_mbps.to_string(),
                c.quality.to_string(),
                c.variation.to_string(),
                c.rebuffer_s.to_string(),
                c.reward.to_string(),
            ])?;
        }
    }
    writer.flush().map_err(|e| AbrError::io("<episode csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TraceSample;

    fn constant_trace(len: usize, c: f64) -> Trace {
        Trace::new(
            "const",
            (0..len).map(|_| TraceSample::new(c, c, 10, 20)).collect(),
        )
    }

    #[test]
    fn buffer_update_hand_cases() {
        let o = buffer_update(10.0, 1.2, 1.2, 4.0, 60.0).unwrap();
        assert_eq!((o.next_buffer_s, o.rebuffer_s), (10.0, 0.0));
        let o = buffer_update(2.0, 1.2, 0.6, 4.0, 60.0).unwrap();
        assert_eq!((o.next_buffer_s, o.rebuffer_s), (4.0, 6.0));
        let o = buffer_update(60.0, 0.3, 30.0, 4.0, 60.0).unwrap();
        assert_eq!((o.next_buffer_s, o.rebuffer_s), (60.0, 0.0));
    }

    #[test]
    fn buffer_update_rejects_bad_throughput() {
        assert!(matches!(
            buffer_update(1.0, 1.2, 0.0, 4.0, 60.0),
            Err(AbrError::InvalidTrace(_))
        ));
        assert!(buffer_update(1.0, 1.2, -1.0, 4.0, 60.0).is_err());
    }

    fn state_with(sim: &Simulator, buffer: f64, prev: usize) -> StreamState {
        let mut s = sim.initial_state(&constant_trace(20, 1.2), 0).unwrap();
        s.buffer_s = buffer;
        s.prev_action = prev;
        s.chunk_index = 3;
        s
    }

    #[test]
    fn reward_hand_cases() {
        let sim = Simulator::new(EnvConfig::default()).unwrap();
        let s = state_with(&sim, 20.0, 0);
        let r = sim.reward(&s, 0, 5.0).unwrap();
        assert_eq!(r.reward, 0.0);

        // 1.2 after 0.3 with alpha = 1: ln 4 - ln 4.
        let r = sim.reward(&s, 2, 5.0).unwrap();
        assert!((r.quality - 4f64.ln()).abs() < 1e-15);
        assert!(r.reward.abs() < 1e-15);

        // 6 s stall at the lowest rate.
        let s = state_with(&sim, 2.0, 0);
        let r = sim.reward(&s, 0, 0.3 * 4.0 / 8.0).unwrap();
        assert!((r.rebuffer_s - 6.0).abs() < 1e-12);
        assert!((r.reward + 25.8).abs() < 1e-9);
    }

    #[test]
    fn first_chunk_variation_flag() {
        let mut cfg = EnvConfig::default();
        cfg.zero_first_variation = true;
        let sim = Simulator::new(cfg).unwrap();
        let trace = constant_trace(20, 10.0);
        let s0 = sim.initial_state(&trace, 0).unwrap();
        assert_eq!(sim.reward(&s0, 5, 10.0).unwrap().variation, 0.0);
        let mut s1 = s0.clone();
        s1.chunk_index = 1;
        assert!(sim.reward(&s1, 5, 10.0).unwrap().variation > 0.0);
    }

    #[test]
    fn step_shifts_histories() {
        let sim = Simulator::new(EnvConfig::default()).unwrap();
        let mut trace = constant_trace(20, 2.0);
        trace.samples[1] = TraceSample::new(3.5, 4.0, 7, 11);
        let s0 = sim.initial_state(&trace, 0).unwrap();
        let Step::Transition(t) = sim.step(&s0, 3, &trace).unwrap() else {
            panic!("expected transition")
        };
        let s1 = &t.next_state;
        assert_eq!(s1.recent_bitrates[0], 1.85);
        assert_eq!(s1.recent_bitrates[1..], s0.recent_bitrates[..7]);
        assert_eq!(s1.recent_throughputs[0], 3.5);
        assert_eq!(s1.recent_lower_layers[1][0], 7.0);
        assert_eq!(s1.recent_lower_layers[2][0], 11.0);
        assert_eq!(s1.recent_buffers[0], s1.buffer_s);
        assert_eq!(s1.prev_action, 3);
        assert_eq!(s1.chunk_index, 1);
        assert_eq!(t.reward, t.quality - t.variation - 4.3 * t.rebuffer_s);
    }

    #[test]
    fn constant_trace_reaches_fixed_point_within_k_steps() {
        let sim = Simulator::new(EnvConfig::default()).unwrap();
        let trace = constant_trace(100, 1.2);
        let mut s = sim.initial_state(&trace, 0).unwrap();
        for _ in 0..8 {
            let Step::Transition(t) = sim.step(&s, 2, &trace).unwrap() else { panic!() };
            s = t.next_state;
        }
        let Step::Transition(t) = sim.step(&s, 2, &trace).unwrap() else { panic!() };
        let mut a = t.next_state.clone();
        let mut b = s.clone();
        a.chunk_index = 0;
        a.trace_pos = 0;
        b.chunk_index = 0;
        b.trace_pos = 0;
        assert_eq!(a, b);
    }

    #[test]
    fn truncate_signals_episode_end() {
        let mut cfg = EnvConfig::default();
        cfg.trace_end = TraceEnd::Truncate;
        let sim = Simulator::new(cfg).unwrap();
        let trace = constant_trace(10, 2.0);
        let ep = sim
            .rollout(&trace, &EpisodeConfig::default(), |_| Ok(1))
            .unwrap();
        assert_eq!(ep.samples.len(), 9);

        let sim = Simulator::new(EnvConfig::default()).unwrap();
        let ep = sim
            .rollout(&trace, &EpisodeConfig::default(), |_| Ok(1))
            .unwrap();
        assert_eq!(ep.samples.len(), 48);
    }

    #[test]
    fn discounted_return_geometric() {
        let rewards = vec![1.0; 48];
        let expected = (1.0 - 0.9f64.powi(48)) / 0.1;
        assert!((discounted_return(&rewards, 0.9) - expected).abs() < 1e-12);
        let long = vec![1.0; 5000];
        assert!((discounted_return(&long, 0.9) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn ladder_validation() {
        assert!(VideoLadder::new(4.0, 48, vec![1.0], Utility::Log).is_err());
        assert!(VideoLadder::new(4.0, 48, vec![1.0, 1.0], Utility::Log).is_err());
        assert!(VideoLadder::new(0.0, 48, vec![1.0, 2.0], Utility::Log).is_err());
        assert!(VideoLadder::new(4.0, 48, vec![1.0, 2.0, 3.0], Utility::Table(vec![0.0, 2.0, 3.0])).is_ok());
        // convex table
        assert!(VideoLadder::new(4.0, 48, vec![1.0, 2.0, 3.0], Utility::Table(vec![0.0, 1.0, 3.0])).is_err());
        let l = VideoLadder::standard();
        assert_eq!(l.utility(0), 0.0);
        assert_eq!(l.levels(), 6);
    }

    #[test]
    fn episode_csv_has_header_and_rows() {
        let sim = Simulator::new(EnvConfig::default()).unwrap();
        let trace = constant_trace(60, 2.0);
        let ep = sim
            .rollout(&trace, &EpisodeConfig::default(), |_| Ok(2))
            .unwrap();
        let mut buf = Vec::new();
        write_episode_csv(&[ep.report], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "trace_id,chunk,bitrate_mbps,quality,variation,rebuffer_s,reward"
        );
        assert_eq!(lines.count(), 48);
    }
}
