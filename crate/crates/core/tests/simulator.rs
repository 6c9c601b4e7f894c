use abr_core::env::{
    buffer_update, EnvConfig, EpisodeConfig, ObservationTiming, Simulator, Step, TraceEnd,
};
use abr_core::trace::{Trace, TraceSample};
use proptest::prelude::*;

const LADDER: [f64; 6] = [0.3, 0.75, 1.2, 1.85, 2.85, 4.3];

fn scripted_trace(len: usize) -> Trace {
    // Deterministic but irregular throughputs between 0.2 and 5.8 Mbit/s.
    let samples = (0..len)
        .map(|i| {
            let c = 0.2 + 5.6 * (((i * 37 + 11) % 53) as f64 / 52.0);
            TraceSample::new(c, 1.1 * c, (i % 100) as u32, (i % 29) as u32)
        })
        .collect();
    Trace::new("scripted", samples)
}

fn scripted_action(n: usize) -> usize {
    [0, 3, 5, 5, 2, 1, 4, 0, 5, 3][n % 10]
}

/// Plain re-derivation of one episode under concurrent observation and
/// default weights.
fn hand_episode(trace: &Trace, chunks: usize) -> Vec<(f64, f64, f64)> {
    let mut buffer = 0.0f64;
    let mut prev = 0usize;
    let mut out = Vec::new();
    for n in 0..chunks {
        let a = scripted_action(n);
        let c = trace.samples[n].app_throughput_mbps;
        let download = LADDER[a] * 4.0 / c;
        let rebuf = if download > buffer { download - buffer } else { 0.0 };
        let left = if buffer > download { buffer - download } else { 0.0 };
        buffer = (left + 4.0).min(60.0);
        let q = (LADDER[a] / 0.3).ln();
        let qp = (LADDER[prev] / 0.3).ln();
        let reward = q - (q - qp).abs() - 4.3 * rebuf;
        out.push((reward, rebuf, buffer));
        prev = a;
    }
    out
}

#[test]
fn scripted_episode_matches_hand_recomputation() {
    let trace = scripted_trace(60);
    let sim = Simulator::new(EnvConfig::default()).unwrap();
    let mut n = 0usize;
    let ep = sim
        .rollout(&trace, &EpisodeConfig::default(), |_| {
            let a = scripted_action(n);
            n += 1;
            Ok(a)
        })
        .unwrap();
    let hand = hand_episode(&trace, 48);
    assert_eq!(ep.samples.len(), 48);
    for (s, (r, rebuf, buf)) in ep.samples.iter().zip(&hand) {
        assert!((s.reward - r).abs() < 1e-9);
        assert!((s.rebuffer_s - rebuf).abs() < 1e-9);
        assert!((s.next_state.buffer_s - buf).abs() < 1e-9);
    }
    let total: f64 = hand.iter().map(|h| h.0).sum();
    assert!((ep.report.total_reward - total).abs() < 1e-9);
}

#[test]
fn causal_timing_downloads_at_the_previous_sample() {
    let trace = scripted_trace(20);
    let sim = Simulator::new(EnvConfig {
        observation: ObservationTiming::Causal,
        ..Default::default()
    })
    .unwrap();
    let s0 = sim.initial_state(&trace, 3).unwrap();
    let Step::Transition(t) = sim.step(&s0, 2, &trace).unwrap() else { panic!() };
    let c = trace.samples[3].app_throughput_mbps;
    assert_eq!(t.next_state.recent_throughputs[0], c);
    let expected = buffer_update(0.0, 1.2, c, 4.0, 60.0).unwrap();
    assert_eq!(t.rebuffer_s, expected.rebuffer_s);
    // Lower layers are read at request time.
    assert_eq!(t.next_state.recent_lower_layers[0][0], trace.samples[4].mac_rate_mbps);
}

#[test]
fn truncated_trace_ends_the_episode() {
    let trace = scripted_trace(10);
    let sim = Simulator::new(EnvConfig {
        trace_end: TraceEnd::Truncate,
        ..Default::default()
    })
    .unwrap();
    let ep = sim.rollout(&trace, &EpisodeConfig::default(), |_| Ok(1)).unwrap();
    assert_eq!(ep.samples.len(), 9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn buffer_stays_in_range(b in 0.0f64..=60.0, a in 0usize..6, c in 0.01f64..50.0) {
        let out = buffer_update(b, LADDER[a], c, 4.0, 60.0).unwrap();
        prop_assert!((0.0..=60.0).contains(&out.next_buffer_s));
        prop_assert!(out.rebuffer_s >= 0.0);
    }

    #[test]
    fn steps_keep_state_consistent(
        cs in proptest::collection::vec(0.05f64..20.0, 12..40),
        actions in proptest::collection::vec(0usize..6, 48),
    ) {
        let samples = cs.iter().map(|&c| TraceSample::new(c, c, 1, 1)).collect();
        let trace = Trace::new("p", samples);
        let sim = Simulator::new(EnvConfig::default()).unwrap();
        let mut state = sim.initial_state(&trace, 0).unwrap();
        for &a in &actions {
            let Step::Transition(t) = sim.step(&state, a, &trace).unwrap() else { unreachable!() };
            prop_assert!((0.0..=60.0).contains(&t.next_state.buffer_s));
            prop_assert_eq!(t.next_state.recent_throughputs.len(), 8);
            prop_assert_eq!(t.next_state.recent_buffers[0], t.next_state.buffer_s);
            state = t.next_state.clone();
        }
    }
}
