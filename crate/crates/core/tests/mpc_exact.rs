use std::collections::HashMap;

use abr_core::env::{EnvConfig, EpisodeConfig, Simulator, VideoLadder};
use abr_core::mpc::{mpc_rollout, MpcConfig, Predictor};
use abr_core::synth::LaggedChain;

const LADDER: [f64; 6] = [0.3, 0.75, 1.2, 1.85, 2.85, 4.3];

/// Best achievable total QoE from chunk `n` with buffer `b` after `prev`.
fn dp(cs: &[f64], n: usize, b: f64, prev: usize, memo: &mut HashMap<(usize, usize, u64), f64>) -> f64 {
    if n == cs.len() {
        return 0.0;
    }
    if let Some(v) = memo.get(&(n, prev, b.to_bits())) {
        return *v;
    }
    let mut best = f64::NEG_INFINITY;
    for a in 0..6 {
        let d = LADDER[a] * 4.0 / cs[n];
        let rebuf = (d - b).max(0.0);
        let next = ((b - d).max(0.0) + 4.0).min(60.0);
        let q = (LADDER[a] / 0.3).ln();
        let r = q - (q - (LADDER[prev] / 0.3).ln()).abs() - 4.3 * rebuf;
        best = best.max(r + dp(cs, n + 1, next, a, memo));
    }
    memo.insert((n, prev, b.to_bits()), best);
    best
}

#[test]
fn full_horizon_oracle_mpc_equals_dynamic_programming() {
    let chunks = 6;
    let ladder = VideoLadder::standard().with_num_chunks(chunks).unwrap();
    let sim = Simulator::new(EnvConfig { ladder, ..Default::default() }).unwrap();
    let traces = LaggedChain { seed: 5, ..Default::default() }.build().unwrap().synthesize_many(10, 40).unwrap();
    for (i, trace) in traces.iter().enumerate() {
        let ep = EpisodeConfig { start_offset: 3 * i, ..Default::default() };
        let cs: Vec<f64> = (0..chunks).map(|n| trace.samples[3 * i + n].app_throughput_mbps).collect();
        let optimum = dp(&cs, 0, 0.0, 0, &mut HashMap::new());
        let full = mpc_rollout(&sim, trace, &MpcConfig { horizon: chunks, predictor: Predictor::Oracle }, &ep).unwrap();
        assert!((full.total_reward - optimum).abs() < 1e-9, "trace {i}: {} vs {optimum}", full.total_reward);
        let short = mpc_rollout(&sim, trace, &MpcConfig { horizon: 3, predictor: Predictor::Oracle }, &ep).unwrap();
        assert!(short.total_reward <= full.total_reward + 1e-12);
    }
}
