//! Model predictive control baseline with exhaustive lookahead.

use serde::{Deserialize, Serialize};

use crate::env::{buffer_update, EpisodeConfig, EpisodeReport, Simulator, StreamState};
use crate::error::{AbrError, Result};
use crate::trace::Trace;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    /// The true future throughputs read from the trace.
    Oracle,
    /// Harmonic mean of the throughputs held in the state, repeated.
    #[default]
    HarmonicMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub horizon: usize,
    pub predictor: Predictor,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            predictor: Predictor::HarmonicMean,
        }
    }
}

pub fn harmonic_mean(values: &[f64]) -> f64 {
    values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>()
}

/// First action of the best bitrate sequence over `predicted.len()` chunks.
///
/// Sequences are enumerated in lexicographic order of ladder indices and only
/// a strictly better total replaces the incumbent, so ties resolve to the
/// lowest sequence. The lookahead objective is the undiscounted QoE sum.
pub fn mpc_select(sim: &Simulator, state: &StreamState, predicted: &[f64]) -> Result<usize> {
    if predicted.is_empty() {
        return Err(AbrError::Config("MPC horizon must be at least 1".into()));
    }
    if predicted.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
        return Err(AbrError::InvalidTrace("predicted throughput must be positive".into()));
    }
    let cfg = sim.config();
    let ladder = &cfg.ladder;
    let d = ladder.levels();
    let h = predicted.len();
    let w = cfg.weights;
    let first_variation_free = cfg.zero_first_variation && state.chunk_index == 0;

    let mut seq = vec![0usize; h];
    let mut best_total = f64::NEG_INFINITY;
    let mut best_first = 0;
    loop {
        let mut buffer = state.buffer_s;
        let mut prev = state.prev_action;
        let mut total = 0.0;
        for (i, (&a, &c)) in seq.iter().zip(predicted).enumerate() {
            let out = buffer_update(buffer, ladder.bitrate(a), c, ladder.chunk_duration_s, cfg.buffer_cap_s)?;
            let quality = ladder.utility(a);
            let variation = if i == 0 && first_variation_free {
                0.0
            } else {
                (quality - ladder.utility(prev)).abs()
            };
            total += quality - w.alpha * variation - w.beta_rebuf * out.rebuffer_s;
            buffer = out.next_buffer_s;
            prev = a;
        }
        if total > best_total {
            best_total = total;
            best_first = seq[0];
        }
        // Odometer increment, last position fastest.
        let mut pos = h;
        loop {
            if pos == 0 {
                return Ok(best_first);
            }
            pos -= 1;
            seq[pos] += 1;
            if seq[pos] < d {
                break;
            }
            seq[pos] = 0;
        }
    }
}

/// Throughput predictions for the next `horizon` chunks, truncated at the
/// end of the episode.
pub fn predict(sim: &Simulator, state: &StreamState, trace: &Trace, cfg: &MpcConfig) -> Result<Vec<f64>> {
    let remaining = sim.ladder().num_chunks.saturating_sub(state.chunk_index);
    let h = cfg.horizon.min(remaining).max(1);
    match cfg.predictor {
        Predictor::HarmonicMean => Ok(vec![harmonic_mean(&state.recent_throughputs); h]),
        Predictor::Oracle => {
            let first = sim.download_throughput(state, trace)?;
            let mut out = vec![first];
            for i in 1..h {
                match sim.trace_sample(trace, state.trace_pos + i) {
                    Some(s) => out.push(s.app_throughput_mbps),
                    None => break,
                }
            }
            Ok(out)
        }
    }
}

pub fn mpc_rollout(sim: &Simulator, trace: &Trace, cfg: &MpcConfig, episode: &EpisodeConfig) -> Result<EpisodeReport> {
    if cfg.horizon == 0 {
        return Err(AbrError::Config("MPC horizon must be at least 1".into()));
    }
    let ep = sim.rollout(trace, episode, |state| {
        let predicted = predict(sim, state, trace, cfg)?;
        mpc_select(sim, state, &predicted)
    })?;
    Ok(ep.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvConfig;
    use crate::trace::TraceSample;

    fn state_with(sim: &Simulator, throughput: f64, buffer: f64, prev: usize) -> StreamState {
        let trace = Trace::new("c", vec![TraceSample::new(throughput, throughput, 10, 10); 10]);
        let mut s = sim.initial_state(&trace, 0).unwrap();
        s.buffer_s = buffer;
        s.prev_action = prev;
        s.chunk_index = 1;
        s
    }

    #[test]
    fn full_buffer_high_throughput_picks_top() {
        let sim = Simulator::new(EnvConfig::default()).unwrap();
        let s = state_with(&sim, 4.3, 60.0, 5);
        assert_eq!(mpc_select(&sim, &s, &[4.3; 5]).unwrap(), 5);
    }

    #[test]
    fn starved_picks_bottom() {
        let sim = Simulator::new(EnvConfig::default()).unwrap();
        let s = state_with(&sim, 0.3, 0.0, 0);
        assert_eq!(mpc_select(&sim, &s, &[0.3; 5]).unwrap(), 0);
    }

    #[test]
    fn horizon_one_is_greedy() {
        let sim = Simulator::new(EnvConfig::default()).unwrap();
        for (c, b, prev) in [(1.0, 3.0, 2), (2.5, 10.0, 0), (0.7, 0.0, 4)] {
            let s = state_with(&sim, c, b, prev);
            let greedy = (0..6)
                .map(|a| (a, sim.reward(&s, a, c).unwrap().reward))
                .fold((0, f64::NEG_INFINITY), |best, (a, r)| if r > best.1 { (a, r) } else { best })
                .0;
            assert_eq!(mpc_select(&sim, &s, &[c]).unwrap(), greedy);
        }
    }

    #[test]
    fn harmonic_mean_on_constant_matches_oracle() {
        let sim = Simulator::new(EnvConfig::default()).unwrap();
        let trace = Trace::new("c", vec![TraceSample::new(1.7, 2.0, 10, 10); 60]);
        let ep = EpisodeConfig::default();
        let hm = mpc_rollout(&sim, &trace, &MpcConfig { horizon: 3, predictor: Predictor::HarmonicMean }, &ep).unwrap();
        let or = mpc_rollout(&sim, &trace, &MpcConfig { horizon: 3, predictor: Predictor::Oracle }, &ep).unwrap();
        assert_eq!(hm, or);
    }

    #[test]
    fn harmonic_mean_value() {
        assert!((harmonic_mean(&[1.0, 2.0, 4.0]) - 3.0 / 1.75).abs() < 1e-15);
    }
}
