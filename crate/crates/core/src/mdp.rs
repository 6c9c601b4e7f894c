//! Explicit finite MDPs: value iteration, exact policy evaluation and
//! gradient ascent on the penalized joint policy/value objective.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{AbrError, Result};
use crate::nn::softmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularMdp {
    /// `transitions[s][a][s']`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[s][a]`.
    pub rewards: Vec<Vec<f64>>,
}

impl TabularMdp {
    pub fn new(transitions: Vec<Vec<Vec<f64>>>, rewards: Vec<Vec<f64>>) -> Result<Self> {
        let mdp = Self { transitions, rewards };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn num_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn num_actions(&self) -> usize {
        self.rewards.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.num_states(), self.num_actions());
        if ns == 0 || na == 0 {
            return Err(AbrError::Spec("MDP needs at least one state and action".into()));
        }
        if self.rewards.len() != ns || self.rewards.iter().any(|r| r.len() != na) {
            return Err(AbrError::Spec("reward table must be states x actions".into()));
        }
        for (s, per_action) in self.transitions.iter().enumerate() {
            if per_action.len() != na {
                return Err(AbrError::Spec(format!("state {s} has {} action rows", per_action.len())));
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != ns || row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    return Err(AbrError::Spec(format!("transition row ({s}, {a}) is malformed")));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(AbrError::Spec(format!("transition row ({s}, {a}) sums to {sum}")));
                }
            }
        }
        Ok(())
    }

    /// `g(s, a) + gamma * sum_{s'} p(s'|s, a) V(s')`.
    pub fn q_values(&self, values: &[f64], gamma: f64) -> Vec<Vec<f64>> {
        self.transitions
            .iter()
            .zip(&self.rewards)
            .map(|(rows, rewards)| {
                rows.iter()
                    .zip(rewards)
                    .map(|(p, g)| g + gamma * p.iter().zip(values).map(|(a, b)| a * b).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    /// `max_s |max_a Q(s, a) - V(s)|`.
    pub fn optimality_residual(&self, values: &[f64], gamma: f64) -> f64 {
        self.q_values(values, gamma)
            .iter()
            .zip(values)
            .map(|(q, v)| (q.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v).abs())
            .fold(0.0, f64::max)
    }

    /// `max_s |sum_a pi(s, a) Q(s, a) - V(s)|`.
    pub fn policy_residual(&self, policy: &[Vec<f64>], values: &[f64], gamma: f64) -> f64 {
        self.q_values(values, gamma)
            .iter()
            .zip(policy)
            .zip(values)
            .map(|((q, pi), v)| (q.iter().zip(pi).map(|(a, b)| a * b).sum::<f64>() - v).abs())
            .fold(0.0, f64::max)
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(AbrError::Config(format!("discount must lie in (0, 1), got {gamma}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueIteration {
    pub values: Vec<f64>,
    /// Greedy policy, uniform over each state's argmax set.
    pub policy: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Sup-norm change of the last sweep.
    pub last_change: f64,
}

/// Runs `V <- max_a Q(V)` from zero until the sup-norm change is at most
/// `tol`.
pub fn value_iteration(mdp: &TabularMdp, gamma: f64, tol: f64) -> Result<ValueIteration> {
    mdp.validate()?;
    check_gamma(gamma)?;
    let mut values = vec![0.0; mdp.num_states()];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let next: Vec<f64> = mdp
            .q_values(&values, gamma)
            .iter()
            .map(|q| q.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let change = next.iter().zip(&values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        values = next;
        if change <= tol || iterations >= 1_000_000 {
            let policy = greedy_policy(mdp, &values, gamma);
            return Ok(ValueIteration {
                values,
                policy,
                iterations,
                last_change: change,
            });
        }
    }
}

pub fn greedy_policy(mdp: &TabularMdp, values: &[f64], gamma: f64) -> Vec<Vec<f64>> {
    mdp.q_values(values, gamma)
        .into_iter()
        .map(|q| {
            let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ties: Vec<bool> = q.iter().map(|v| best - v <= 1e-10 * (1.0 + best.abs())).collect();
            let n = ties.iter().filter(|t| **t).count() as f64;
            ties.into_iter().map(|t| if t { 1.0 / n } else { 0.0 }).collect()
        })
        .collect()
}

/// Solves `(I - gamma P_pi) V = g_pi` exactly.
pub fn policy_evaluation(mdp: &TabularMdp, policy: &[Vec<f64>], gamma: f64) -> Result<Vec<f64>> {
    mdp.validate()?;
    check_gamma(gamma)?;
    let ns = mdp.num_states();
    if policy.len() != ns || policy.iter().any(|p| p.len() != mdp.num_actions()) {
        return Err(AbrError::Spec("policy table must be states x actions".into()));
    }
    let mut a = DMatrix::<f64>::identity(ns, ns);
    let mut b = DVector::<f64>::zeros(ns);
    for s in 0..ns {
        for (act, pi) in policy[s].iter().enumerate() {
            b[s] += pi * mdp.rewards[s][act];
            for (u, p) in mdp.transitions[s][act].iter().enumerate() {
                a[(s, u)] -= gamma * pi * p;
            }
        }
    }
    let v = a
        .lu()
        .solve(&b)
        .ok_or_else(|| AbrError::Spec("policy evaluation system is singular".into()))?;
    Ok(v.iter().copied().collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PenaltySolution {
    pub logits: Vec<Vec<f64>>,
    pub policy: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    /// Penalized objective at the returned tables.
    pub objective: f64,
    /// `max_s |E(s) - V(s)|`, the constraint violation the penalty targets.
    pub residual: f64,
}

/// Gradient ascent on `mean_s [E(s) - xi * (E(s) - V(s))^2]` with
/// `E(s) = sum_a pi(s, a) (g(s, a) + gamma sum_{s'} p V(s'))`, over per-state
/// logits and a value table. `init` gives starting logits (zero if `None`).
pub fn penalty_solver(
    mdp: &TabularMdp,
    gamma: f64,
    xi: f64,
    steps: usize,
    init: Option<&[Vec<f64>]>,
) -> Result<PenaltySolution> {
    mdp.validate()?;
    check_gamma(gamma)?;
    if !(xi > 0.0) {
        return Err(AbrError::Config(format!("penalty weight must be positive, got {xi}")));
    }
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut logits: Vec<Vec<f64>> = match init {
        Some(l) => l.to_vec(),
        None => vec![vec![0.0; na]; ns],
    };
    let mut values = vec![0.0; ns];
    let w = 1.0 / ns as f64;
    let g_max = mdp.rewards.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    // Inverse of a curvature bound: the penalty's Hessian in V plus the
    // softmax curvature scaled by the largest reachable Q.
    let step = 1.0 / (2.0 * xi * (1.0 + gamma).powi(2) * w + 1.0 + g_max / (1.0 - gamma));

    let mut objective = f64::NAN;
    let mut residual = f64::NAN;
    for it in 0..=steps {
        let policy: Vec<Vec<f64>> = logits.iter().map(|z| softmax(z)).collect();
        let q = mdp.q_values(&values, gamma);
        let e: Vec<f64> = q
            .iter()
            .zip(&policy)
            .map(|(qs, pi)| qs.iter().zip(pi).map(|(a, b)| a * b).sum())
            .collect();
        let delta: Vec<f64> = e.iter().zip(&values).map(|(a, b)| a - b).collect();
        objective = w * e.iter().zip(&delta).map(|(ev, d)| ev - xi * d * d).sum::<f64>();
        residual = delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if !objective.is_finite() {
            return Err(AbrError::Divergence(format!("penalty objective non-finite at step {it}")));
        }
        if it == steps {
            break;
        }
        let mut d_values = vec![0.0; ns];
        for s in 0..ns {
            let c = w * (1.0 - 2.0 * xi * delta[s]);
            for a in 0..na {
                logits[s][a] += step * c * policy[s][a] * (q[s][a] - e[s]);
                for (u, p) in mdp.transitions[s][a].iter().enumerate() {
                    d_values[u] += c * policy[s][a] * gamma * p;
                }
            }
            d_values[s] += w * 2.0 * xi * delta[s];
        }
        for (v, d) in values.iter_mut().zip(&d_values) {
            *v += step * d;
        }
    }
    let policy = logits.iter().map(|z| softmax(z)).collect();
    Ok(PenaltySolution {
        logits,
        policy,
        values,
        objective,
        residual,
    })
}
