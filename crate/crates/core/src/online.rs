//! Online tuning with progressive columns on top of a frozen offline agent.
//!
//! A progressive network runs the frozen base network unchanged and adds a
//! new column: `M+3` fresh filters plus new dense layers. New layer `l` reads
//! the frozen activation `h_{l-1}` (while the base has one) concatenated with
//! the new activation `ĥ_{l-1}`; the first new layer reads both convolution
//! outputs. The output layer is entirely new. Frozen neurons never read new
//! ones, so the zero blocks of the layer matrices are simply not stored.
//!
//! Tunable layout: new filters row by row, then each new matrix row-major
//! with the frozen-input columns first.
//!
//! When the new column is as deep as the base, the new output layer reads the
//! last frozen hidden layer; that lateral block starts as a copy of the frozen
//! output weights so the tuned network initially reproduces the base.
//!
//! OTP tunes a progressive actor against the frozen base critic; OTPV also
//! tunes a progressive critic.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ea3c::{sample_terms, select_action, ActionMode, AgentPair, LossConfig, LossEval};
use crate::env::{EpisodeConfig, EpisodeReport, Simulator, Step, StreamState, TransitionSample};
use crate::error::{AbrError, Result};
use crate::nn::{
    conv_rows, conv_rows_backward, dense, dense_backward, glorot_fill, relu, relu_backward, softmax, Head, Net,
    RmspConfig, Rmsprop, Trunk,
};
use crate::trace::Trace;

/// Scale applied to the Glorot bound of every new column.
pub const NEW_COLUMN_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Otp,
    #[default]
    Otpv,
}

impl std::str::FromStr for Variant {
    type Err = AbrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "otp" => Ok(Variant::Otp),
            "otpv" => Ok(Variant::Otpv),
            other => Err(AbrError::Config(format!("unknown variant {other:?} (expected otp or otpv)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Otp => "otp",
            Variant::Otpv => "otpv",
        })
    }
}

/// Sizes of the new column of one network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub conv_filter_len: usize,
    /// `n̂_1 .. n̂_{L̂-1}`; at least as many layers as the base network.
    pub hidden_sizes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProgressiveSpec {
    pub variant: Variant,
    pub conv_filter_len: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
}

impl Default for ProgressiveSpec {
    fn default() -> Self {
        Self {
            variant: Variant::Otpv,
            conv_filter_len: 4,
            actor_hidden: vec![32],
            critic_hidden: vec![32],
        }
    }
}

impl ProgressiveSpec {
    pub fn actor_column(&self) -> ColumnSpec {
        ColumnSpec {
            conv_filter_len: self.conv_filter_len,
            hidden_sizes: self.actor_hidden.clone(),
        }
    }

    pub fn critic_column(&self) -> ColumnSpec {
        ColumnSpec {
            conv_filter_len: self.conv_filter_len,
            hidden_sizes: self.critic_hidden.clone(),
        }
    }
}

/// Frozen base network plus a tunable column.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgressiveNet {
    base: Net,
    column: ColumnSpec,
    params: Vec<f64>,
    offsets: Vec<usize>,
    shapes: Vec<(usize, usize)>,
}

/// Activations of one progressive forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgressiveForward {
    pub frozen: Trunk,
    pub new_conv: Vec<f64>,
    pub new_hidden: Vec<Vec<f64>>,
    pub out: Vec<f64>,
}

impl ProgressiveNet {
    fn shapes_for(base: &Net, column: &ColumnSpec) -> Result<Vec<(usize, usize)>> {
        let bs = base.spec();
        if column.conv_filter_len == 0 || column.conv_filter_len > bs.window {
            return Err(AbrError::Spec(format!(
                "new filter length {} must lie in 1..={}",
                column.conv_filter_len, bs.window
            )));
        }
        if column.hidden_sizes.len() < bs.hidden_sizes.len() || column.hidden_sizes.contains(&0) {
            return Err(AbrError::Spec(format!(
                "new column needs >= {} positive hidden layers, got {:?}",
                bs.hidden_sizes.len(),
                column.hidden_sizes
            )));
        }
        let new_conv_dim = bs.input_rows * (bs.window - column.conv_filter_len + 1);
        let mut sizes = column.hidden_sizes.clone();
        sizes.push(bs.head.outputs());
        let mut shapes = Vec::with_capacity(sizes.len());
        let mut prev_new = new_conv_dim;
        for (l, &out) in sizes.iter().enumerate() {
            // Frozen input of new layer l + 1 is h_l.
            let frozen_in = match l {
                0 => bs.conv_dim(),
                _ => bs.hidden_sizes.get(l - 1).copied().unwrap_or(0),
            };
            shapes.push((out, frozen_in + prev_new));
            prev_new = out;
        }
        Ok(shapes)
    }

    /// New column with every tunable weight at zero.
    pub fn zeros(base: Net, column: ColumnSpec) -> Result<Self> {
        let shapes = Self::shapes_for(&base, &column)?;
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut at = base.spec().input_rows * column.conv_filter_len;
        for (o, i) in &shapes {
            offsets.push(at);
            at += o * i;
        }
        Ok(Self {
            base,
            column,
            params: vec![0.0; at],
            offsets,
            shapes,
        })
    }

    /// Glorot-uniform new column scaled by [`NEW_COLUMN_INIT_SCALE`].
    pub fn init(base: Net, column: ColumnSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(base, column)?;
        let n0 = net.column.conv_filter_len;
        let nf = net.base.spec().input_rows * n0;
        glorot_fill(&mut net.params[..nf], n0, 1, NEW_COLUMN_INIT_SCALE, rng);
        for l in 0..net.shapes.len() {
            let (o, i) = net.shapes[l];
            let at = net.offsets[l];
            glorot_fill(&mut net.params[at..at + o * i], i, o, NEW_COLUMN_INIT_SCALE, rng);
        }
        net.copy_base_head();
        Ok(net)
    }

    /// Overwrites the lateral block of the new output layer with the frozen
    /// output weights. Returns false when the depths differ and there is no
    /// such block.
    pub fn copy_base_head(&mut self) -> bool {
        if self.column.hidden_sizes.len() != self.base.spec().hidden_sizes.len() {
            return false;
        }
        let head = self.shapes.len() - 1;
        let (o, i) = self.shapes[head];
        let base_l = self.base.num_layers() - 1;
        let (bo, bi) = self.base.layer_shape(base_l);
        debug_assert_eq!(bo, o);
        let at = self.offsets[head];
        for r in 0..o {
            let src = &self.base.layer(base_l)[r * bi..(r + 1) * bi];
            self.params[at + r * i..at + r * i + bi].copy_from_slice(src);
        }
        true
    }

    pub fn from_tunable(base: Net, column: ColumnSpec, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(base, column)?;
        if params.len() != net.params.len() {
            return Err(AbrError::Spec(format!(
                "tunable vector has {} entries, column needs {}",
                params.len(),
                net.params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn base(&self) -> &Net {
        &self.base
    }

    pub fn column(&self) -> &ColumnSpec {
        &self.column
    }

    pub fn tunable(&self) -> &[f64] {
        &self.params
    }

    pub fn tunable_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }

    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        self.shapes[l]
    }

    pub fn layer_offset(&self, l: usize) -> usize {
        self.offsets[l]
    }

    fn layer(&self, l: usize) -> &[f64] {
        let (o, i) = self.shapes[l];
        &self.params[self.offsets[l]..self.offsets[l] + o * i]
    }

    fn new_filters(&self) -> &[f64] {
        &self.params[..self.base.spec().input_rows * self.column.conv_filter_len]
    }

    fn layer_input(&self, frozen: &Trunk, new_conv: &[f64], new_hidden: &[Vec<f64>], l: usize) -> Vec<f64> {
        let frozen_part: &[f64] = match l {
            0 => &frozen.conv,
            _ => frozen.hidden.get(l - 1).map(Vec::as_slice).unwrap_or(&[]),
        };
        let new_part: &[f64] = if l == 0 { new_conv } else { &new_hidden[l - 1] };
        let mut v = Vec::with_capacity(frozen_part.len() + new_part.len());
        v.extend_from_slice(frozen_part);
        v.extend_from_slice(new_part);
        v
    }

    pub fn forward(&self, x: &[f64]) -> Result<ProgressiveForward> {
        let frozen = self.base.trunk(x)?;
        let s = self.base.spec();
        let new_conv = conv_rows(x, s.input_rows, s.window, self.new_filters(), self.column.conv_filter_len);
        let mut new_hidden: Vec<Vec<f64>> = Vec::with_capacity(self.column.hidden_sizes.len());
        for l in 0..self.column.hidden_sizes.len() {
            let input = self.layer_input(&frozen, &new_conv, &new_hidden, l);
            new_hidden.push(relu(dense(self.layer(l), self.shapes[l].0, &input)));
        }
        let head = self.shapes.len() - 1;
        let input = self.layer_input(&frozen, &new_conv, &new_hidden, head);
        let out = dense(self.layer(head), self.shapes[head].0, &input);
        Ok(ProgressiveForward {
            frozen,
            new_conv,
            new_hidden,
            out,
        })
    }

    pub fn output(&self, x: &[f64]) -> Result<Vec<f64>> {
        let f = self.forward(x)?;
        Ok(match self.base.spec().head {
            Head::Softmax { .. } => softmax(&f.out),
            Head::Scalar => f.out,
        })
    }

    /// Accumulates the tunable gradient for cotangent `d_out` on the raw
    /// output. Nothing flows into the frozen column.
    pub fn backward_into(&self, x: &[f64], cache: &ProgressiveForward, d_out: &[f64], grad: &mut [f64]) {
        let s = self.base.spec();
        let mut d = d_out.to_vec();
        for l in (0..self.shapes.len()).rev() {
            let input = self.layer_input(&cache.frozen, &cache.new_conv, &cache.new_hidden, l);
            let (o, i) = self.shapes[l];
            let at = self.offsets[l];
            let mut d_in = vec![0.0; i];
            dense_backward(self.layer(l), &input, &d, &mut grad[at..at + o * i], Some(&mut d_in));
            let new_len = if l == 0 { cache.new_conv.len() } else { cache.new_hidden[l - 1].len() };
            let mut d_new = d_in.split_off(i - new_len);
            if l > 0 {
                relu_backward(&cache.new_hidden[l - 1], &mut d_new);
            }
            d = d_new;
        }
        let nf = s.input_rows * self.column.conv_filter_len;
        conv_rows_backward(x, s.input_rows, s.window, self.column.conv_filter_len, &d, &mut grad[..nf]);
    }
}

/// Tuned agent: frozen offline pair plus the progressive networks.
#[derive(Clone, Debug, PartialEq)]
pub struct OnlineAgent {
    pub base: AgentPair,
    pub variant: Variant,
    pub actor: ProgressiveNet,
    /// Progressive critic (OTPV only); OTP evaluates the frozen base critic.
    pub critic: Option<ProgressiveNet>,
}

impl OnlineAgent {
    pub fn build(base: AgentPair, spec: &ProgressiveSpec, seed: u64) -> Result<Self> {
        base.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actor = ProgressiveNet::init(base.actor.clone(), spec.actor_column(), &mut rng)?;
        let critic = match spec.variant {
            Variant::Otp => None,
            Variant::Otpv => Some(ProgressiveNet::init(base.critic.clone(), spec.critic_column(), &mut rng)?),
        };
        Ok(Self {
            base,
            variant: spec.variant,
            actor,
            critic,
        })
    }

    pub fn probs(&self, state: &StreamState) -> Result<Vec<f64>> {
        self.actor.output(&self.base.input(state))
    }

    pub fn value(&self, state: &StreamState) -> Result<f64> {
        let x = self.base.input(state);
        match &self.critic {
            Some(c) => Ok(c.forward(&x)?.out[0]),
            None => self.base.critic.value(&x),
        }
    }

    pub fn num_tunable(&self) -> usize {
        self.actor.tunable().len() + self.critic.as_ref().map_or(0, |c| c.tunable().len())
    }
}

/// Objective of a progressive agent over a batch. `critic_grad` is empty for
/// OTP: the frozen critic's squared term is reported but carries no gradient.
pub fn online_loss(agent: &OnlineAgent, batch: &[TransitionSample], cfg: &LossConfig) -> Result<LossEval> {
    if batch.is_empty() {
        return Err(AbrError::Config("loss needs at least one sample".into()));
    }
    let mut actor_grad = vec![0.0; agent.actor.tunable().len()];
    let mut critic_grad = vec![0.0; agent.critic.as_ref().map_or(0, |c| c.tunable().len())];
    let (mut objective, mut policy_objective, mut value_loss) = (0.0, 0.0, 0.0);
    let inv_q = 1.0 / batch.len() as f64;
    for s in batch {
        let x = agent.base.input(&s.state);
        let x_next = agent.base.input(&s.next_state);
        let fa = agent.actor.forward(&x)?;
        let (v, v_next, caches) = match &agent.critic {
            Some(c) => {
                let fv = c.forward(&x)?;
                let fv_next = c.forward(&x_next)?;
                (fv.out[0], fv_next.out[0], Some((fv, fv_next)))
            }
            None => (agent.base.critic.value(&x)?, agent.base.critic.value(&x_next)?, None),
        };
        let t = sample_terms(&fa.out, s.action_index, s.reward, v, v_next, cfg);
        objective += inv_q * t.objective(cfg.xi);
        policy_objective += inv_q * t.policy;
        value_loss += inv_q * t.td_sq;
        let d_logits: Vec<f64> = t.d_logits.iter().map(|d| d * inv_q).collect();
        agent.actor.backward_into(&x, &fa, &d_logits, &mut actor_grad);
        if let (Some(c), Some((fv, fv_next))) = (&agent.critic, caches) {
            c.backward_into(&x, &fv, &[t.d_value * inv_q], &mut critic_grad);
            c.backward_into(&x_next, &fv_next, &[t.d_value_next * inv_q], &mut critic_grad);
        }
    }
    Ok(LossEval {
        objective,
        policy_objective,
        value_loss,
        actor_grad,
        critic_grad,
    })
}

pub fn otp_loss(agent: &OnlineAgent, batch: &[TransitionSample], cfg: &LossConfig) -> Result<LossEval> {
    if agent.variant != Variant::Otp {
        return Err(AbrError::Spec("otp_loss needs an OTP agent".into()));
    }
    online_loss(agent, batch, cfg)
}

pub fn otpv_loss(agent: &OnlineAgent, batch: &[TransitionSample], cfg: &LossConfig) -> Result<LossEval> {
    if agent.variant != Variant::Otpv {
        return Err(AbrError::Spec("otpv_loss needs an OTPV agent".into()));
    }
    online_loss(agent, batch, cfg)
}

/// Deployment staging. Stages are numbered from 1 over the whole user stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineSchedule {
    /// Batch size; tuning starts at stage `q`.
    pub q: usize,
    /// First stage at which the tuned policy selects actions.
    pub q_prime: usize,
    /// Passes over the user's traces.
    pub epochs: usize,
    /// Stages between optimizer steps once tuning runs.
    pub cadence: usize,
}

impl Default for OnlineSchedule {
    fn default() -> Self {
        Self {
            q: 8,
            q_prime: 48,
            epochs: 20,
            cadence: 1,
        }
    }
}

impl OnlineSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || self.q_prime <= self.q {
            return Err(AbrError::Config(format!(
                "schedule needs q' > q >= 1, got q={} q'={}",
                self.q, self.q_prime
            )));
        }
        if self.epochs == 0 || self.cadence == 0 {
            return Err(AbrError::Config("online epochs and cadence must be >= 1".into()));
        }
        Ok(())
    }

    pub fn online_acts(&self, stage: usize) -> bool {
        stage >= self.q_prime
    }

    pub fn trains(&self, stage: usize) -> bool {
        stage >= self.q && (stage - self.q) % self.cadence == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    pub gamma: f64,
    pub xi: f64,
    pub entropy_weight: f64,
    pub rmsp: RmspConfig,
    pub schedule: OnlineSchedule,
    pub progressive: ProgressiveSpec,
    pub seed: u64,
    pub advantage_baseline: bool,
    pub stop_gradient_target: bool,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            xi: 1.0,
            entropy_weight: 0.5,
            rmsp: RmspConfig {
                learning_rate: 1e-3,
                ..RmspConfig::default()
            },
            schedule: OnlineSchedule::default(),
            progressive: ProgressiveSpec::default(),
            seed: 0,
            advantage_baseline: false,
            stop_gradient_target: false,
        }
    }
}

impl OnlineConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            gamma: self.gamma,
            xi: self.xi,
            entropy_weight: self.entropy_weight,
            advantage_baseline: self.advantage_baseline,
            stop_gradient_target: self.stop_gradient_target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.gamma > 0.0 && self.gamma < 1.0) || !(self.xi > 0.0) || self.entropy_weight < 0.0 {
            return Err(AbrError::Config("online gamma, xi or entropy weight out of range".into()));
        }
        if !(self.rmsp.learning_rate > 0.0) {
            return Err(AbrError::Config("online learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActingPolicy {
    Offline,
    Online,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub stage: usize,
    pub acting_policy: ActingPolicy,
    pub action: usize,
    pub reward: f64,
    /// Objective before the step taken at this stage, if any.
    pub objective: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OnlineLog {
    pub stages: Vec<StageRecord>,
}

impl OnlineLog {
    pub fn offline_actions_before_takeover(&self) -> usize {
        self.stages
            .iter()
            .take_while(|r| r.acting_policy == ActingPolicy::Offline)
            .count()
    }

    pub fn took_over(&self) -> bool {
        self.stages.iter().any(|r| r.acting_policy == ActingPolicy::Online)
    }

    pub fn mean_reward(&self) -> f64 {
        self.stages.iter().map(|r| r.reward).sum::<f64>() / self.stages.len().max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["stage", "acting_policy", "action", "reward", "objective"])?;
        for r in &self.stages {
            let policy = match r.acting_policy {
                ActingPolicy::Offline => "offline",
                ActingPolicy::Online => "online",
            };
            w.write_record([
                r.stage.to_string(),
                policy.to_string(),
                r.action.to_string(),
                r.reward.to_string(),
                r.objective.map(|o| o.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| AbrError::io("<online log>", e))?;
        Ok(())
    }
}

/// Deploys the base policy on the user's traces and tunes the progressive
/// column along the way. Actions are sampled from whichever policy acts.
pub fn tune_online(base: AgentPair, sim: &Simulator, user: &[Trace], cfg: &OnlineConfig) -> Result<(OnlineAgent, OnlineLog)> {
    cfg.validate()?;
    if user.is_empty() {
        return Err(AbrError::Config("online tuning needs at least one user trace".into()));
    }
    let mut agent = OnlineAgent::build(base, &cfg.progressive, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut actor_opt = Rmsprop::new(cfg.rmsp, agent.actor.tunable().len());
    let mut critic_opt = Rmsprop::new(cfg.rmsp, agent.critic.as_ref().map_or(0, |c| c.tunable().len()));
    let loss_cfg = cfg.loss();
    let schedule = cfg.schedule;
    let q = schedule.q;

    let mut log = OnlineLog::default();
    let mut recent: Vec<TransitionSample> = Vec::with_capacity(q);
    let mut stage = 0usize;
    for _ in 0..schedule.epochs {
        for trace in user {
            let mut state = sim.initial_state(trace, 0)?;
            for _ in 0..sim.ladder().num_chunks {
                let acting = if schedule.online_acts(stage + 1) {
                    ActingPolicy::Online
                } else {
                    ActingPolicy::Offline
                };
                let probs = match acting {
                    ActingPolicy::Online => agent.probs(&state)?,
                    ActingPolicy::Offline => agent.base.probs(&state)?,
                };
                let action = select_action(&probs, ActionMode::Sample, &mut rng);
                let sample = match sim.step(&state, action, trace)? {
                    Step::Transition(s) => *s,
                    Step::TraceExhausted => break,
                };
                stage += 1;
                state = sample.next_state.clone();
                let reward = sample.reward;
                if recent.len() == q {
                    recent.remove(0);
                }
                recent.push(sample);

                let mut objective = None;
                if recent.len() == q && schedule.trains(stage) {
                    let eval = online_loss(&agent, &recent, &loss_cfg)?;
                    if !eval.objective.is_finite() {
                        return Err(AbrError::Divergence(format!(
                            "online objective {} at stage {stage}",
                            eval.objective
                        )));
                    }
                    actor_opt.ascend(agent.actor.tunable_mut(), &eval.actor_grad);
                    if let Some(c) = agent.critic.as_mut() {
                        critic_opt.ascend(c.tunable_mut(), &eval.critic_grad);
                    }
                    objective = Some(eval.objective);
                }
                log.stages.push(StageRecord {
                    stage,
                    acting_policy: acting,
                    action,
                    reward,
                    objective,
                });
            }
        }
    }
    if !log.took_over() {
        log::warn!(
            "user stream ended after {stage} stages, before the takeover stage {}",
            schedule.q_prime
        );
    }
    Ok((agent, log))
}

/// Plays every trace from offset 0 with the tuned actor.
pub fn evaluate_online(
    agent: &OnlineAgent,
    sim: &Simulator,
    traces: &[Trace],
    mode: ActionMode,
    seed: u64,
) -> Result<Vec<EpisodeReport>> {
    let episode = EpisodeConfig::default();
    traces
        .iter()
        .enumerate()
        .map(|(i, trace)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let ep = sim.rollout(trace, &episode, |s| Ok(select_action(&agent.probs(s)?, mode, &mut rng)))?;
            Ok(ep.report)
        })
        .collect()
}
