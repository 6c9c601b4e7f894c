//! Synthetic cross-layer traces drawn from explicit order-k Markov chains.
//!
//! The lower-layer state `X_n` evolves on its own chain
//! `Pr[X_n | X_{n-1..n-k}]`; throughput is drawn afterwards from
//! `Pr[C_n | C_{n-1..n-k}, X_n..X_{n-k}]`.
//!
//! Context rows are addressed in mixed radix, most recent value in the lowest
//! digit. For the throughput table the `C` digits come first, then the `X`
//! digits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AbrError, Result};
use crate::trace::{Trace, TraceSample, MAX_MCS_INDEX};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowerState {
    pub mac_rate_mbps: f64,
    pub prb_count: u32,
    pub mcs_index: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub order: usize,
    pub lower_states: Vec<LowerState>,
    pub throughput_levels_mbps: Vec<f64>,
    /// `lower_states.len()^order` rows over the next lower-layer state.
    pub lower_transition: Vec<Vec<f64>>,
    /// `levels^order * lower_states^(order+1)` rows over the next level.
    pub throughput_transition: Vec<Vec<f64>>,
    pub seed: u64,
    /// Steps discarded before recording so traces start near stationarity.
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
}

fn default_burn_in() -> usize {
    200
}

fn check_rows(name: &str, rows: &[Vec<f64>], expected_rows: usize, width: usize) -> Result<()> {
    if rows.len() != expected_rows {
        return Err(AbrError::Spec(format!(
            "{name} has {} rows, expected {expected_rows}",
            rows.len()
        )));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(AbrError::Spec(format!("{name} row {i} has {} entries, expected {width}", row.len())));
        }
        if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(AbrError::Spec(format!("{name} row {i} has a negative or non-finite entry")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(AbrError::Spec(format!("{name} row {i} sums to {sum}, not 1")));
        }
    }
    Ok(())
}

fn draw(row: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the cumulative sum; take the last positive entry.
    row.iter().rposition(|p| *p > 0.0).unwrap_or(row.len() - 1)
}

impl ChainSpec {
    pub fn num_lower_states(&self) -> usize {
        self.lower_states.len()
    }

    pub fn num_levels(&self) -> usize {
        self.throughput_levels_mbps.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(AbrError::Spec("chain order must be >= 1".into()));
        }
        let (sx, sc) = (self.num_lower_states(), self.num_levels());
        if sx == 0 || sc == 0 {
            return Err(AbrError::Spec("chain needs at least one lower-layer state and level".into()));
        }
        if self.throughput_levels_mbps.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(AbrError::Spec("throughput levels must be positive".into()));
        }
        for s in &self.lower_states {
            if !(s.mac_rate_mbps.is_finite() && s.mac_rate_mbps >= 0.0) || s.mcs_index > MAX_MCS_INDEX {
                return Err(AbrError::Spec(format!("invalid lower-layer state {s:?}")));
            }
        }
        let k = self.order as u32;
        check_rows("lower_transition", &self.lower_transition, sx.pow(k), sx)?;
        check_rows(
            "throughput_transition",
            &self.throughput_transition,
            sc.pow(k) * sx.pow(k + 1),
            sc,
        )
    }

    /// Row of `lower_transition` for previous states `prev[0] = X_{n-1}`, ...
    pub fn lower_context(&self, prev: &[usize]) -> usize {
        mixed_radix(prev, self.num_lower_states())
    }

    /// Row of `throughput_transition` for `prev_c[0] = C_{n-1}, ...` and
    /// `x[0] = X_n, x[1] = X_{n-1}, ...`.
    pub fn throughput_context(&self, prev_c: &[usize], x: &[usize]) -> usize {
        let sc_k = self.num_levels().pow(self.order as u32);
        mixed_radix(prev_c, self.num_levels()) + sc_k * mixed_radix(x, self.num_lower_states())
    }

    /// Same chain with every throughput level and MAC rate multiplied by
    /// `factor`.
    pub fn scaled(&self, factor: f64, seed: u64) -> Self {
        let mut out = self.clone();
        out.seed = seed;
        for c in &mut out.throughput_levels_mbps {
            *c *= factor;
        }
        for s in &mut out.lower_states {
            s.mac_rate_mbps *= factor;
        }
        out
    }

    /// One trace of `length` samples from stream `index` of the chain's seed.
    pub fn synthesize_indexed(&self, length: usize, index: u64) -> Result<Trace> {
        self.validate()?;
        let k = self.order;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        // Most recent first, k + 1 lower-layer states and k levels.
        let mut xs = vec![0usize; k + 1];
        let mut cs = vec![0usize; k];
        let mut samples = Vec::with_capacity(length);
        for n in 0..self.burn_in + length {
            let x = draw(&self.lower_transition[self.lower_context(&xs[..k])], &mut rng);
            xs.rotate_right(1);
            xs[0] = x;
            let c = draw(&self.throughput_transition[self.throughput_context(&cs, &xs)], &mut rng);
            cs.rotate_right(1);
            cs[0] = c;
            if n >= self.burn_in {
                let s = self.lower_states[x];
                samples.push(TraceSample::new(
                    self.throughput_levels_mbps[c],
                    s.mac_rate_mbps,
                    s.prb_count,
                    s.mcs_index,
                ));
            }
        }
        let mut trace = Trace::new(format!("synth-{}-{index}", self.seed), samples);
        trace.metadata.insert("seed".into(), self.seed.to_string());
        trace.metadata.insert("stream".into(), index.to_string());
        Ok(trace)
    }

    pub fn synthesize(&self, length: usize) -> Result<Trace> {
        self.synthesize_indexed(length, 0)
    }

    pub fn synthesize_many(&self, count: usize, length: usize) -> Result<Vec<Trace>> {
        (0..count as u64).map(|i| self.synthesize_indexed(length, i)).collect()
    }
}

fn mixed_radix(digits: &[usize], radix: usize) -> usize {
    digits.iter().rev().fold(0, |acc, d| acc * radix + d)
}

/// Generator family in which throughput follows the lower-layer state with a
/// delay of `lag` chunks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LaggedChain {
    pub lag: usize,
    pub num_lower_states: usize,
    pub num_levels: usize,
    pub min_mbps: f64,
    pub max_mbps: f64,
    /// Probability the lower-layer state repeats.
    pub stay_prob: f64,
    /// Probability mass moved to each neighbouring level of the target.
    pub neighbor_prob: f64,
    pub seed: u64,
}

impl Default for LaggedChain {
    fn default() -> Self {
        Self {
            lag: 1,
            num_lower_states: 4,
            num_levels: 8,
            min_mbps: 0.2,
            max_mbps: 5.0,
            stay_prob: 0.7,
            neighbor_prob: 0.05,
            seed: 0,
        }
    }
}

impl LaggedChain {
    /// Geometrically spaced levels between the bounds.
    pub fn levels(&self) -> Vec<f64> {
        let n = self.num_levels;
        if n == 1 {
            return vec![self.min_mbps];
        }
        let ratio = (self.max_mbps / self.min_mbps).powf(1.0 / (n - 1) as f64);
        (0..n).map(|i| self.min_mbps * ratio.powi(i as i32)).collect()
    }

    /// Level targeted by lower-layer state `x`.
    pub fn target_level(&self, x: usize) -> usize {
        if self.num_lower_states == 1 {
            return self.num_levels / 2;
        }
        (x * (self.num_levels - 1) + (self.num_lower_states - 1) / 2) / (self.num_lower_states - 1)
    }

    pub fn build(&self) -> Result<ChainSpec> {
        let (sx, sc) = (self.num_lower_states, self.num_levels);
        if sx == 0 || sc == 0 || self.lag == 0 {
            return Err(AbrError::Config("lagged chain needs states, levels and lag >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.stay_prob) || !(0.0..=0.5).contains(&self.neighbor_prob) {
            return Err(AbrError::Config("lagged chain probabilities out of range".into()));
        }
        if !(self.min_mbps > 0.0 && self.max_mbps >= self.min_mbps) {
            return Err(AbrError::Config("lagged chain needs 0 < min_mbps <= max_mbps".into()));
        }
        let k = self.lag;
        let levels = self.levels();
        let span = (sx - 1).max(1);
        let lower_states: Vec<LowerState> = (0..sx)
            .map(|x| LowerState {
                mac_rate_mbps: 1.25 * levels[self.target_level(x)],
                prb_count: (10 + 90 * x / span) as u32,
                mcs_index: (4 + 24 * x / span) as u32,
            })
            .collect();

        let switch = if sx > 1 { (1.0 - self.stay_prob) / (sx - 1) as f64 } else { 0.0 };
        let mut lower_transition = Vec::with_capacity(sx.pow(k as u32));
        for ctx in 0..sx.pow(k as u32) {
            let prev = ctx % sx;
            lower_transition.push(
                (0..sx)
                    .map(|x| match (sx, x == prev) {
                        (1, _) => 1.0,
                        (_, true) => self.stay_prob,
                        _ => switch,
                    })
                    .collect(),
            );
        }

        let sc_k = sc.pow(k as u32);
        let mut throughput_transition = Vec::with_capacity(sc_k * sx.pow(k as u32 + 1));
        for ctx in 0..sc_k * sx.pow(k as u32 + 1) {
            let x_digits = ctx / sc_k;
            // Digit `lag` of the X context is X_{n-lag}.
            let lagged = (x_digits / sx.pow(k as u32)) % sx;
            let target = self.target_level(lagged);
            let mut row = vec![0.0; sc];
            let mut center = 1.0;
            for nb in [target.checked_sub(1), Some(target + 1).filter(|l| *l < sc)].into_iter().flatten() {
                row[nb] += self.neighbor_prob;
                center -= self.neighbor_prob;
            }
            row[target] += center;
            throughput_transition.push(row);
        }

        Ok(ChainSpec {
            order: k,
            lower_states,
            throughput_levels_mbps: levels,
            lower_transition,
            throughput_transition,
            seed: self.seed,
            burn_in: default_burn_in(),
        })
    }
}

/// File form accepted by trace generation: an explicit chain or a preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChainSource {
    Explicit(ChainSpec),
    Lagged(LaggedChain),
}

impl ChainSource {
    pub fn build(&self) -> Result<ChainSpec> {
        let spec = match self {
            ChainSource::Explicit(spec) => spec.clone(),
            ChainSource::Lagged(preset) => preset.build()?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> ChainSpec {
        ChainSpec {
            order: 1,
            lower_states: vec![
                LowerState { mac_rate_mbps: 1.0, prb_count: 10, mcs_index: 5 },
                LowerState { mac_rate_mbps: 3.0, prb_count: 40, mcs_index: 20 },
            ],
            throughput_levels_mbps: vec![0.8, 2.4],
            lower_transition: vec![vec![0.9, 0.1], vec![0.3, 0.7]],
            throughput_transition: vec![vec![0.5, 0.5]; 8],
            seed: 11,
            burn_in: 50,
        }
    }

    #[test]
    fn degenerate_chain_is_constant() {
        let spec = ChainSpec {
            order: 1,
            lower_states: vec![LowerState { mac_rate_mbps: 2.0, prb_count: 7, mcs_index: 9 }],
            throughput_levels_mbps: vec![1.5],
            lower_transition: vec![vec![1.0]],
            throughput_transition: vec![vec![1.0]],
            seed: 3,
            burn_in: 10,
        };
        let t = spec.synthesize(50).unwrap();
        assert!(t.samples.iter().all(|s| *s == TraceSample::new(1.5, 2.0, 7, 9)));
    }

    #[test]
    fn order_one_transition_frequencies() {
        let spec = two_state();
        let t = spec.synthesize(100_000).unwrap();
        let state = |s: &TraceSample| usize::from(s.mac_rate_mbps > 2.0);
        let mut counts = [[0usize; 2]; 2];
        for w in t.samples.windows(2) {
            counts[state(&w[0])][state(&w[1])] += 1;
        }
        for (from, row) in counts.iter().enumerate() {
            let n: usize = row.iter().sum();
            let p = spec.lower_transition[from][1];
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            let freq = row[1] as f64 / n as f64;
            assert!((freq - p).abs() < 3.0 * sigma, "row {from}: {freq} vs {p}");
        }
    }

    #[test]
    fn seeded_generation_is_bit_exact() {
        let spec = LaggedChain { seed: 5, ..Default::default() }.build().unwrap();
        assert_eq!(spec.synthesize_many(3, 100).unwrap(), spec.synthesize_many(3, 100).unwrap());
        let other = LaggedChain { seed: 6, ..Default::default() }.build().unwrap();
        assert_ne!(spec.synthesize(100).unwrap(), other.synthesize(100).unwrap());
    }

    #[test]
    fn lagged_throughput_follows_previous_lower_state() {
        let preset = LaggedChain { neighbor_prob: 0.0, ..Default::default() };
        let spec = preset.build().unwrap();
        let t = spec.synthesize(500).unwrap();
        let levels = preset.levels();
        for w in t.samples.windows(2) {
            let x_prev = spec
                .lower_states
                .iter()
                .position(|s| s.mac_rate_mbps == w[0].mac_rate_mbps)
                .unwrap();
            assert_eq!(w[1].app_throughput_mbps, levels[preset.target_level(x_prev)]);
        }
    }

    #[test]
    fn validation_catches_bad_rows() {
        let mut spec = two_state();
        spec.lower_transition[1] = vec![0.5, 0.4];
        assert!(matches!(spec.validate(), Err(AbrError::Spec(_))));
        let mut spec = two_state();
        spec.throughput_transition.pop();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn chain_source_parses_presets() {
        let src: ChainSource = serde_json::from_str(r#"{"kind":"lagged","lag":2,"seed":9}"#).unwrap();
        let spec = src.build().unwrap();
        assert_eq!(spec.order, 2);
        assert!(serde_json::from_str::<ChainSource>(r#"{"kind":"lagged","lagg":2}"#).is_err());
    }
}
