//! Joint actor-critic training over latest-q sample batches, and the
//! alternating variant that optimizes the policy and value objectives in turn.
//!
//! Per sample `i` with return estimate `G_i = g_i + gamma V(S_{i+1})` the
//! batch objective is
//!
//! ```text
//! J = mean_i [ log pi(S_i, R_i) A_i - xi (G_i - V(S_i))^2 + beta_ent sum_r pi log pi ]
//! ```
//!
//! where `A_i = G_i`, or `G_i - V(S_i)` with the advantage baseline enabled.
//! `J` is maximized, and gradients reach both `V(S_{i+1})` and `V(S_i)`.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{EpisodeConfig, EpisodeReport, Simulator, Step, StreamState, TransitionSample};
use crate::error::{AbrError, Result};
use crate::features::{build_input, InputConfig, Normalization};
use crate::nn::{log_softmax, softmax, Head, Net, NetSpec, RmspConfig, Rmsprop};
use crate::trace::Trace;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Joint,
    Alternating,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Sample,
    Argmax,
}

/// Weights of the per-sample objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
    pub xi: f64,
    pub entropy_weight: f64,
    pub advantage_baseline: bool,
    pub stop_gradient_target: bool,
}

/// Objective pieces of one sample and their cotangents.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTerms {
    /// `lp[a] A - beta_ent sum p lp`: the entropy enters as a bonus.
    pub policy: f64,
    /// `(G - V(S))^2`.
    pub td_sq: f64,
    pub d_logits: Vec<f64>,
    /// Derivative of the full sample objective with respect to `V(S)`.
    pub d_value: f64,
    pub d_value_next: f64,
    /// Policy-part derivatives only (alternating policy step).
    pub d_value_policy: f64,
    pub d_value_next_policy: f64,
}

impl SampleTerms {
    pub fn objective(&self, xi: f64) -> f64 {
        self.policy - xi * self.td_sq
    }
}

/// Evaluates one sample given the actor logits at `S`, the action, reward and
/// both critic values.
pub fn sample_terms(logits: &[f64], action: usize, reward: f64, value: f64, value_next: f64, cfg: &LossConfig) -> SampleTerms {
    let p = softmax(logits);
    let (lp, floored) = log_softmax(logits);
    let g = reward + cfg.gamma * value_next;
    let advantage = if cfg.advantage_baseline { g - value } else { g };
    let neg_entropy: f64 = p.iter().zip(&lp).map(|(a, b)| a * b).sum();
    let td = g - value;

    let mut d_logits = vec![0.0; logits.len()];
    if !floored[action] {
        for (j, d) in d_logits.iter_mut().enumerate() {
            *d = advantage * (f64::from(u8::from(j == action)) - p[j]);
        }
    }
    if cfg.entropy_weight != 0.0 {
        let unfloored_mass: f64 = p.iter().zip(&floored).filter(|(_, f)| !**f).map(|(v, _)| v).sum();
        for j in 0..logits.len() {
            let own = if floored[j] { 0.0 } else { p[j] };
            d_logits[j] -= cfg.entropy_weight * (p[j] * (lp[j] - neg_entropy) + own - p[j] * unfloored_mass);
        }
    }

    let lp_a = lp[action];
    let d_value_policy = if cfg.advantage_baseline { -lp_a } else { 0.0 };
    let d_value_next_policy = if cfg.stop_gradient_target { 0.0 } else { cfg.gamma * lp_a };
    let d_value_next_td = if cfg.stop_gradient_target { 0.0 } else { -2.0 * cfg.xi * td * cfg.gamma };
    SampleTerms {
        policy: lp_a * advantage - cfg.entropy_weight * neg_entropy,
        td_sq: td * td,
        d_logits,
        d_value: 2.0 * cfg.xi * td + d_value_policy,
        d_value_next: d_value_next_td + d_value_next_policy,
        d_value_policy,
        d_value_next_policy,
    }
}

/// Actor and critic sizes plus the input selection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentSpec {
    pub inputs: InputConfig,
    pub history_len: usize,
    pub conv_filter_len: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub actions: usize,
}

impl Default for AgentSpec {
    fn default() -> Self {
        Self {
            inputs: InputConfig::all(),
            history_len: 8,
            conv_filter_len: 4,
            actor_hidden: vec![128],
            critic_hidden: vec![128],
            actions: 6,
        }
    }
}

impl AgentSpec {
    pub fn actor_spec(&self) -> NetSpec {
        NetSpec {
            input_rows: self.inputs.rows(),
            window: self.history_len,
            conv_filter_len: self.conv_filter_len,
            hidden_sizes: self.actor_hidden.clone(),
            head: Head::Softmax { actions: self.actions },
        }
    }

    pub fn critic_spec(&self) -> NetSpec {
        NetSpec {
            head: Head::Scalar,
            hidden_sizes: self.critic_hidden.clone(),
            ..self.actor_spec()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentPair {
    pub actor: Net,
    pub critic: Net,
    pub inputs: InputConfig,
    pub norm: Normalization,
}

impl AgentPair {
    /// Seeded Glorot initialization of both networks.
    pub fn init(spec: &AgentSpec, norm: Normalization, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            actor: Net::glorot(spec.actor_spec(), &mut rng)?,
            critic: Net::glorot(spec.critic_spec(), &mut rng)?,
            inputs: spec.inputs.clone(),
            norm,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.actor.spec().head, Head::Softmax { .. }) || self.critic.spec().head != Head::Scalar {
            return Err(AbrError::Spec("actor needs a softmax head and critic a scalar head".into()));
        }
        for net in [&self.actor, &self.critic] {
            if net.spec().input_rows != self.inputs.rows() {
                return Err(AbrError::Spec(format!(
                    "network expects {} input rows, input config gives {}",
                    net.spec().input_rows,
                    self.inputs.rows()
                )));
            }
        }
        Ok(())
    }

    pub fn input(&self, state: &StreamState) -> Vec<f64> {
        build_input(state, &self.inputs, &self.norm)
    }

    pub fn probs(&self, state: &StreamState) -> Result<Vec<f64>> {
        self.actor.output(&self.input(state))
    }

    pub fn value(&self, state: &StreamState) -> Result<f64> {
        self.critic.value(&self.input(state))
    }

    pub fn history_len(&self) -> usize {
        self.actor.spec().window
    }
}

/// Draws from `probs`, or takes the first maximizer in argmax mode.
pub fn select_action(probs: &[f64], mode: ActionMode, rng: &mut impl Rng) -> usize {
    match mode {
        ActionMode::Argmax => probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, p)| if *p > best.1 { (i, *p) } else { best })
            .0,
        ActionMode::Sample => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
        }
    }
}

pub fn sample_action(actor: &AgentPair, state: &StreamState, rng: &mut impl Rng, mode: ActionMode) -> Result<usize> {
    Ok(select_action(&actor.probs(state)?, mode, rng))
}

/// Batch objective value and gradients (ascent directions).
#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub objective: f64,
    pub policy_objective: f64,
    /// `mean (G - V)^2`.
    pub value_loss: f64,
    pub actor_grad: Vec<f64>,
    pub critic_grad: Vec<f64>,
}

fn check_batch(batch: &[TransitionSample]) -> Result<()> {
    if batch.is_empty() {
        return Err(AbrError::Config("loss needs at least one sample".into()));
    }
    Ok(())
}

/// Shared evaluation; `value_weights` picks which terms feed the critic
/// gradient.
fn evaluate_batch(agent: &AgentPair, batch: &[TransitionSample], cfg: &LossConfig, value_weights: ValueGrad) -> Result<LossEval> {
    check_batch(batch)?;
    let mut actor_grad = vec![0.0; agent.actor.params().len()];
    let mut critic_grad = vec![0.0; agent.critic.params().len()];
    let (mut objective, mut policy_objective, mut value_loss) = (0.0, 0.0, 0.0);
    let inv_q = 1.0 / batch.len() as f64;
    for s in batch {
        let x = agent.input(&s.state);
        let x_next = agent.input(&s.next_state);
        let fa = agent.actor.forward(&x)?;
        let fv = agent.critic.forward(&x)?;
        let fv_next = agent.critic.forward(&x_next)?;
        let t = sample_terms(&fa.out, s.action_index, s.reward, fv.out[0], fv_next.out[0], cfg);
        objective += inv_q * t.objective(cfg.xi);
        policy_objective += inv_q * t.policy;
        value_loss += inv_q * t.td_sq;

        let d_logits: Vec<f64> = t.d_logits.iter().map(|d| d * inv_q).collect();
        agent.actor.backward_into(&x, &fa, &d_logits, &mut actor_grad);
        let (dv, dv_next) = match value_weights {
            ValueGrad::Joint => (t.d_value, t.d_value_next),
            // Gradient of -xi (G - V)^2 only.
            ValueGrad::TdOnly => (t.d_value - t.d_value_policy, t.d_value_next - t.d_value_next_policy),
        };
        agent.critic.backward_into(&x, &fv, &[dv * inv_q], &mut critic_grad);
        agent.critic.backward_into(&x_next, &fv_next, &[dv_next * inv_q], &mut critic_grad);
    }
    Ok(LossEval {
        objective,
        policy_objective,
        value_loss,
        actor_grad,
        critic_grad,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ValueGrad {
    Joint,
    TdOnly,
}

/// Joint objective with gradients into both networks through every
/// occurrence of `V`.
pub fn ea3c_loss(agent: &AgentPair, batch: &[TransitionSample], cfg: &LossConfig) -> Result<LossEval> {
    evaluate_batch(agent, batch, cfg, ValueGrad::Joint)
}

/// The two alternating objectives. `actor_grad` ascends the policy objective
/// with `V` held fixed; `critic_grad` ascends `-xi * value_loss`.
pub fn alternating_loss(agent: &AgentPair, batch: &[TransitionSample], cfg: &LossConfig) -> Result<LossEval> {
    evaluate_batch(agent, batch, cfg, ValueGrad::TdOnly)
}

/// Linear decay of the entropy weight over the epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropySchedule {
    pub start: f64,
    pub end: f64,
}

impl EntropySchedule {
    pub fn constant(w: f64) -> Self {
        Self { start: w, end: w }
    }

    pub fn at(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs <= 1 {
            return self.start;
        }
        self.start + (self.end - self.start) * epoch as f64 / (epochs - 1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub xi: f64,
    pub entropy: EntropySchedule,
    pub rmsp: RmspConfig,
    pub batch_q: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub early_stop_patience: usize,
    pub advantage_baseline: bool,
    pub stop_gradient_target: bool,
    /// Record wall-clock milliseconds in the log (otherwise written as 0).
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            xi: 1.0,
            entropy: EntropySchedule { start: 3.0, end: 0.1 },
            rmsp: RmspConfig::default(),
            batch_q: 8,
            epochs: 100,
            seed: 0,
            mode: TrainMode::Joint,
            early_stop_patience: 5,
            advantage_baseline: false,
            stop_gradient_target: false,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(AbrError::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.xi > 0.0) {
            return Err(AbrError::Config(format!("xi must be positive, got {}", self.xi)));
        }
        if self.batch_q == 0 || self.epochs == 0 {
            return Err(AbrError::Config("batch_q and epochs must be >= 1".into()));
        }
        if self.entropy.end > self.entropy.start || self.entropy.end < 0.0 {
            return Err(AbrError::Config("entropy schedule must be nonincreasing and non-negative".into()));
        }
        if !(self.rmsp.learning_rate > 0.0) || !(0.0..1.0).contains(&self.rmsp.rho) || self.rmsp.epsilon < 0.0 {
            return Err(AbrError::Config("invalid RMSProp settings".into()));
        }
        Ok(())
    }

    pub fn loss(&self, entropy_weight: f64) -> LossConfig {
        LossConfig {
            gamma: self.gamma,
            xi: self.xi,
            entropy_weight,
            advantage_baseline: self.advantage_baseline,
            stop_gradient_target: self.stop_gradient_target,
        }
    }
}

/// Owns the agent and optimizer state of one training run.
#[derive(Clone, Debug)]
pub struct OfflineLearner {
    pub agent: AgentPair,
    pub mode: TrainMode,
    actor_opt: Rmsprop,
    critic_opt: Rmsprop,
    steps: u64,
}

impl OfflineLearner {
    pub fn new(agent: AgentPair, rmsp: RmspConfig, mode: TrainMode) -> Self {
        let actor_opt = Rmsprop::new(rmsp, agent.actor.params().len());
        let critic_opt = Rmsprop::new(rmsp, agent.critic.params().len());
        Self {
            agent,
            mode,
            actor_opt,
            critic_opt,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One optimizer step on `batch`; returns the joint objective before it.
    /// Alternating mode updates the actor on even steps and the critic on odd
    /// steps.
    pub fn update(&mut self, batch: &[TransitionSample], cfg: &LossConfig) -> Result<f64> {
        let eval = match self.mode {
            TrainMode::Joint => ea3c_loss(&self.agent, batch, cfg)?,
            TrainMode::Alternating => alternating_loss(&self.agent, batch, cfg)?,
        };
        if !eval.objective.is_finite() {
            return Err(AbrError::Divergence(format!(
                "objective {} at step {} (policy {}, value loss {})",
                eval.objective, self.steps, eval.policy_objective, eval.value_loss
            )));
        }
        let update_actor = self.mode == TrainMode::Joint || self.steps % 2 == 0;
        let update_critic = self.mode == TrainMode::Joint || self.steps % 2 == 1;
        if update_actor {
            self.actor_opt.ascend(self.agent.actor.params_mut(), &eval.actor_grad);
        }
        if update_critic {
            self.critic_opt.ascend(self.agent.critic.params_mut(), &eval.critic_grad);
        }
        self.steps += 1;
        Ok(eval.objective)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_objective: f64,
    pub val_qoe: f64,
    pub entropy_weight: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (0-based) whose weights were returned.
    pub best_epoch: usize,
    pub best_val_qoe: f64,
    pub steps: u64,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_objective", "val_qoe", "entropy_weight", "wall_ms"])?;
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                r.train_objective.to_string(),
                r.val_qoe.to_string(),
                r.entropy_weight.to_string(),
                r.wall_ms.to_string(),
            ])?;
        }
        w.flush().map_err(|e| AbrError::io("<training log>", e))?;
        Ok(())
    }
}

/// Plays every trace once from offset 0 and returns the per-trace reports.
/// Sampling mode draws each trace's actions from its own seeded stream.
pub fn evaluate_agent(
    agent: &AgentPair,
    sim: &Simulator,
    traces: &[Trace],
    mode: ActionMode,
    seed: u64,
) -> Result<Vec<EpisodeReport>> {
    let episode = EpisodeConfig::default();
    traces
        .par_iter()
        .enumerate()
        .map(|(i, trace)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let ep = sim.rollout(trace, &episode, |s| sample_action(agent, s, &mut rng, mode))?;
            Ok(ep.report)
        })
        .collect()
}

pub fn mean_qoe(reports: &[EpisodeReport]) -> f64 {
    if reports.is_empty() {
        return f64::NAN;
    }
    reports.iter().map(EpisodeReport::mean_qoe).sum::<f64>() / reports.len() as f64
}

/// Trains on `train`, validating on `val` after each epoch with argmax actions,
/// and returns the best-validation weights.
pub fn train_offline(
    agent: AgentPair,
    sim: &Simulator,
    train: &[Trace],
    val: &[Trace],
    cfg: &TrainConfig,
) -> Result<(AgentPair, TrainingLog)> {
    cfg.validate()?;
    agent.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(AbrError::Config("training and validation sets must be non-empty".into()));
    }
    if agent.history_len() != sim.config().history_len {
        return Err(AbrError::Spec(format!(
            "network window {} differs from environment history length {}",
            agent.history_len(),
            sim.config().history_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut learner = OfflineLearner::new(agent, cfg.rmsp, cfg.mode);
    let mut log = TrainingLog {
        best_val_qoe: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut best_agent = learner.agent.clone();
    let mut since_best = 0;
    let started = Instant::now();
    let q = cfg.batch_q;

    for epoch in 0..cfg.epochs {
        let beta = cfg.entropy.at(epoch, cfg.epochs);
        let loss_cfg = cfg.loss(beta);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut obj_sum, mut obj_count) = (0.0, 0usize);
        for &ti in &order {
            let trace = &train[ti];
            let start = rng.random_range(0..trace.len());
            let mut state = sim.initial_state(trace, start)?;
            let mut samples: Vec<TransitionSample> = Vec::with_capacity(sim.ladder().num_chunks);
            for _ in 0..sim.ladder().num_chunks {
                let action = sample_action(&learner.agent, &state, &mut rng, ActionMode::Sample)?;
                let sample = match sim.step(&state, action, trace)? {
                    Step::Transition(s) => *s,
                    Step::TraceExhausted => break,
                };
                state = sample.next_state.clone();
                samples.push(sample);
                if samples.len() >= q {
                    let objective = learner
                        .update(&samples[samples.len() - q..], &loss_cfg)
                        .map_err(|e| match e {
                            AbrError::Divergence(msg) => {
                                AbrError::Divergence(format!("epoch {epoch}, trace {}: {msg}", trace.id))
                            }
                            other => other,
                        })?;
                    obj_sum += objective;
                    obj_count += 1;
                }
            }
        }
        let val_qoe = mean_qoe(&evaluate_agent(&learner.agent, sim, val, ActionMode::Argmax, cfg.seed)?);
        let wall_ms = if cfg.record_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        let train_objective = if obj_count == 0 { f64::NAN } else { obj_sum / obj_count as f64 };
        log::info!("epoch {epoch}: objective {train_objective:.5} val QoE {val_qoe:.5} entropy {beta:.3}");
        log.epochs.push(EpochRecord {
            epoch,
            train_objective,
            val_qoe,
            entropy_weight: beta,
            wall_ms,
        });
        if val_qoe > log.best_val_qoe + 1e-6 {
            log.best_val_qoe = val_qoe;
            log.best_epoch = epoch;
            best_agent = learner.agent.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    log.steps = learner.steps();
    Ok((best_agent, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvConfig, VideoLadder};
    use crate::trace::TraceSample;

    fn tiny_spec() -> AgentSpec {
        AgentSpec {
            inputs: InputConfig::all(),
            history_len: 4,
            conv_filter_len: 2,
            actor_hidden: vec![5],
            critic_hidden: vec![4],
            actions: 6,
        }
    }

    fn norm() -> Normalization {
        Normalization::from_training(&[], &VideoLadder::standard(), 60.0)
    }

    fn batch(sim: &Simulator, n: usize, seed: u64) -> Vec<TransitionSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<TraceSample> = (0..40)
            .map(|_| TraceSample::new(rng.random_range(0.2..5.0), rng.random_range(0.2..6.0), rng.random_range(0..100), rng.random_range(0..32)))
            .collect();
        let trace = Trace::new("r", samples);
        let mut state = sim.initial_state(&trace, 0).unwrap();
        let mut out = Vec::new();
        for _ in 0..n {
            let a = rng.random_range(0..6);
            let Step::Transition(s) = sim.step(&state, a, &trace).unwrap() else { unreachable!() };
            state = s.next_state.clone();
            out.push(*s);
        }
        out
    }

    fn sim4() -> Simulator {
        Simulator::new(EnvConfig { history_len: 4, ..Default::default() }).unwrap()
    }

    #[test]
    fn uniform_zero_critic_hand_value() {
        let sim = sim4();
        let spec = tiny_spec();
        let agent = AgentPair {
            actor: Net::zeros(spec.actor_spec()).unwrap(),
            critic: Net::zeros(spec.critic_spec()).unwrap(),
            inputs: spec.inputs.clone(),
            norm: norm(),
        };
        let b = batch(&sim, 1, 3);
        let cfg = LossConfig { gamma: 0.99, xi: 1.0, entropy_weight: 0.7, advantage_baseline: false, stop_gradient_target: false };
        let g = b[0].reward;
        let l = (1.0f64 / 6.0).ln();
        let expected = g * l - g * g - 0.7 * l;
        let eval = ea3c_loss(&agent, &b, &cfg).unwrap();
        assert!((eval.objective - expected).abs() < 1e-12);
    }

    #[test]
    fn reward_scaling_is_linear_without_penalty() {
        let sim = sim4();
        let agent = AgentPair::init(&tiny_spec(), norm(), 1).unwrap();
        let zero_critic = AgentPair { critic: Net::zeros(tiny_spec().critic_spec()).unwrap(), ..agent };
        let b = batch(&sim, 8, 4);
        let cfg = LossConfig { gamma: 0.9, xi: 1e-300, entropy_weight: 0.0, advantage_baseline: false, stop_gradient_target: false };
        let base = ea3c_loss(&zero_critic, &b, &cfg).unwrap().policy_objective;
        let scaled: Vec<TransitionSample> = b.iter().cloned().map(|mut s| { s.reward *= 3.0; s }).collect();
        let tripled = ea3c_loss(&zero_critic, &scaled, &cfg).unwrap().policy_objective;
        assert!((tripled - 3.0 * base).abs() < 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn joint_minus_alternating_is_penalty() {
        let sim = sim4();
        let agent = AgentPair::init(&tiny_spec(), norm(), 2).unwrap();
        let b = batch(&sim, 1, 5);
        let cfg = LossConfig { gamma: 0.99, xi: 2.5, entropy_weight: 0.3, advantage_baseline: false, stop_gradient_target: false };
        let joint = ea3c_loss(&agent, &b, &cfg).unwrap();
        let alt = alternating_loss(&agent, &b, &cfg).unwrap();
        assert!((joint.objective - alt.policy_objective + 2.5 * alt.value_loss).abs() < 1e-12);
        assert!(alt.value_loss >= 0.0);
        assert_eq!(joint.actor_grad, alt.actor_grad);
        assert_ne!(joint.critic_grad, alt.critic_grad);
    }

    #[test]
    fn logit_shift_invariance() {
        let cfg = LossConfig { gamma: 0.9, xi: 1.0, entropy_weight: 0.5, advantage_baseline: true, stop_gradient_target: false };
        let z = [0.3, -1.2, 2.0, 0.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 17.0).collect();
        let a = sample_terms(&z, 2, 0.7, 1.1, 0.4, &cfg);
        let b = sample_terms(&shifted, 2, 0.7, 1.1, 0.4, &cfg);
        assert!((a.objective(1.0) - b.objective(1.0)).abs() < 1e-9);
    }

    #[test]
    fn entropy_bounds() {
        for z in [vec![0.0; 6], vec![30.0, 0.0, 0.0, 0.0, 0.0, 0.0]] {
            let p = softmax(&z);
            let (lp, _) = log_softmax(&z);
            let h: f64 = p.iter().zip(&lp).map(|(a, b)| a * b).sum();
            assert!(h <= 1e-12 && h >= -(6f64.ln()) - 1e-12);
        }
    }

    #[test]
    fn sample_frequencies_and_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probs = vec![1.0 / 6.0; 6];
        let n = 100_000;
        let mut counts = [0usize; 6];
        for _ in 0..n {
            counts[select_action(&probs, ActionMode::Sample, &mut rng)] += 1;
        }
        let sigma = (n as f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 6.0).abs() < 3.0 * sigma);
        }
        let peaked = softmax(&[20.0, 0.0, 0.0]);
        let hits = (0..n).filter(|_| select_action(&peaked, ActionMode::Sample, &mut rng) == 0).count();
        assert!(hits as f64 / n as f64 > 0.999);
        let mut other = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(select_action(&[0.2, 0.4, 0.4], ActionMode::Argmax, &mut other), 1);
    }

    #[test]
    fn joint_step_moves_both_alternating_moves_one() {
        let sim = sim4();
        let agent = AgentPair::init(&tiny_spec(), norm(), 6).unwrap();
        let b = batch(&sim, 8, 6);
        let cfg = TrainConfig::default().loss(0.5);
        let mut joint = OfflineLearner::new(agent.clone(), RmspConfig::default(), TrainMode::Joint);
        joint.update(&b, &cfg).unwrap();
        assert_ne!(joint.agent.actor, agent.actor);
        assert_ne!(joint.agent.critic, agent.critic);
        let mut alt = OfflineLearner::new(agent.clone(), RmspConfig::default(), TrainMode::Alternating);
        alt.update(&b, &cfg).unwrap();
        assert_ne!(alt.agent.actor, agent.actor);
        assert_eq!(alt.agent.critic, agent.critic);
        let after_first = alt.agent.clone();
        alt.update(&b, &cfg).unwrap();
        assert_eq!(alt.agent.actor, after_first.actor);
        assert_ne!(alt.agent.critic, after_first.critic);
    }

    #[test]
    fn entropy_schedule_is_linear() {
        let s = EntropySchedule { start: 3.0, end: 0.1 };
        assert_eq!(s.at(0, 100), 3.0);
        assert!((s.at(99, 100) - 0.1).abs() < 1e-15);
        assert!((s.at(33, 100) - (3.0 - 2.9 * 33.0 / 99.0)).abs() < 1e-15);
    }

    #[test]
    fn training_log_csv_header() {
        let log = TrainingLog {
            epochs: vec![EpochRecord { epoch: 0, train_objective: -1.5, val_qoe: 0.25, entropy_weight: 3.0, wall_ms: 0 }],
            ..Default::default()
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_objective,val_qoe,entropy_weight,wall_ms\n0,-1.5,0.25,3,0\n");
    }

    #[test]
    fn degenerate_critic_learns_discounted_return() {
        let sim = sim4();
        let spec = AgentSpec { actions: 1, ..tiny_spec() };
        let agent = AgentPair::init(&spec, norm(), 21).unwrap();
        let mut s = batch(&sim, 1, 22).remove(0);
        s.action_index = 0;
        s.reward = 1.0;
        s.next_state = s.state.clone();
        let cfg = LossConfig { gamma: 0.5, xi: 1.0, entropy_weight: 0.0, advantage_baseline: false, stop_gradient_target: false };
        let rmsp = RmspConfig { learning_rate: 3e-3, ..Default::default() };
        let mut learner = OfflineLearner::new(agent, rmsp, TrainMode::Joint);
        let batch = vec![s.clone(); 8];
        for _ in 0..2000 {
            learner.update(&batch, &cfg).unwrap();
        }
        let v = learner.agent.value(&s.state).unwrap();
        assert!((v - 2.0).abs() < 0.02, "value {v}");
    }
}
