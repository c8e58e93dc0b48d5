//! Natural-policy-gradient inner loop: SGD on
//! `f(omega) = 1/2 omega' F omega - omega' grad J` with MLMC-combined
//! single-sample gradients `score (score' omega) - A_hat score`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cmdp::{CmdpModel, PolicyParams, Signal, Transition};
use crate::critic::{CriticParams, NeuralCritic};
use crate::oracle::ExactEvaluation;
use crate::sampler::{MlmcBatch, TrajectoryCursor};
use crate::{Error, Result};

/// How the critic is turned into a per-transition advantage estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvantageEstimator {
    /// `g - eta + Q(s', a') - Q(s, a)`.
    #[default]
    TdQ,
    /// `g - eta + V(s') - V(s)` with `V(s) = sum_b pi(b|s) Q(s, b)`.
    ///
    /// With `Q` exact up to a constant this has conditional mean
    /// `A(s, a)` given `(s, a)`, whereas the `TdQ` form has conditional mean
    /// zero.
    TdV,
}

impl FromStr for AdvantageEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "td-q" => Ok(AdvantageEstimator::TdQ),
            "td-v" => Ok(AdvantageEstimator::TdV),
            other => Err(Error::Parse(format!("unknown advantage estimator `{other}`"))),
        }
    }
}

/// Per-transition advantage estimates fed to the NPG loop.
pub trait AdvantageSource {
    fn advantage(&self, z: &Transition) -> Result<f64>;
}

/// `g(s,a) - eta + Q(phi(s',a'); zeta) - Q(phi(s,a); zeta)`, evaluated
/// directly through the network.
pub fn advantage_td(critic: &NeuralCritic, params: &CriticParams, z: &Transition, g_val: f64) -> Result<f64> {
    let a_next = z.next_action()?;
    let net = critic.net();
    let q_sa = net.forward(&params.zeta, critic.features().phi(z.s, z.a))?;
    let q_next = net.forward(&params.zeta, critic.features().phi(z.s_next, a_next))?;
    Ok(g_val - params.eta + q_next - q_sa)
}

/// A trained critic frozen for one NPG loop. Network values are tabulated
/// once per pair.
#[derive(Debug, Clone)]
pub struct CriticAdvantage {
    signal: Signal,
    eta: f64,
    n_actions: usize,
    q: Vec<f64>,
    /// `V(s)` when the state-value form is selected.
    v: Option<Vec<f64>>,
}

impl CriticAdvantage {
    pub fn new(
        critic: &NeuralCritic,
        params: &CriticParams,
        signal: Signal,
        policy: &PolicyParams,
        estimator: AdvantageEstimator,
    ) -> Self {
        let q = critic.value_table(&params.zeta);
        Self::from_values(q, params.eta, signal, policy, estimator)
    }

    /// Uses an explicit Q table `[s * A + a]` in place of the network.
    pub fn from_values(
        q: Vec<f64>,
        eta: f64,
        signal: Signal,
        policy: &PolicyParams,
        estimator: AdvantageEstimator,
    ) -> Self {
        let na = policy.n_actions();
        let v = match estimator {
            AdvantageEstimator::TdQ => None,
            AdvantageEstimator::TdV => Some(
                (0..policy.n_states())
                    .map(|s| {
                        policy
                            .probs_unchecked(s)
                            .iter()
                            .enumerate()
                            .map(|(a, p)| p * q[s * na + a])
                            .sum()
                    })
                    .collect(),
            ),
        };
        Self {
            signal,
            eta,
            n_actions: na,
            q,
            v,
        }
    }
}

impl AdvantageSource for CriticAdvantage {
    fn advantage(&self, z: &Transition) -> Result<f64> {
        let base = z.signal(self.signal) - self.eta;
        match &self.v {
            None => {
                let a_next = z.next_action()?;
                let na = self.n_actions;
                Ok(base + self.q[z.s_next * na + a_next] - self.q[z.s * na + z.a])
            }
            Some(v) => Ok(base + v[z.s_next] - v[z.s]),
        }
    }
}

/// Oracle advantages `A_g^pi(s, a)`, independent of the sampled next pair.
#[derive(Debug, Clone)]
pub struct ExactAdvantage {
    table: Vec<Vec<f64>>,
}

impl ExactAdvantage {
    pub fn new(eval: &ExactEvaluation, g: Signal) -> Self {
        Self {
            table: eval.signal(g).advantage.clone(),
        }
    }
}

impl AdvantageSource for ExactAdvantage {
    fn advantage(&self, z: &Transition) -> Result<f64> {
        Ok(self.table[z.s][z.a])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `score (score' omega) - A_hat score` at one transition.
pub fn npg_grad_sample(
    policy: &PolicyParams,
    omega: &[f64],
    source: &dyn AdvantageSource,
    z: &Transition,
) -> Result<Vec<f64>> {
    if omega.len() != policy.dim() {
        return Err(Error::Dimension {
            what: "NPG direction",
            expected: policy.dim(),
            got: omega.len(),
        });
    }
    let score = policy.score(z.s, z.a)?;
    let adv = source.advantage(z)?;
    let coef = dot(&score, omega) - adv;
    Ok(score.into_iter().map(|v| coef * v).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NpgSchedule {
    pub iterations: usize,
    pub gamma_omega: f64,
    pub t_max: u64,
}

/// Runs `H` MLMC SGD steps from `omega = 0` for every source, all sources
/// consuming the same rollouts.
///
/// The combined gradient is `sum_t w_t (score_t' omega - A_hat_t) score_t`
/// with the MLMC weights `w_t`; scores depend only on `(s, a)` and are
/// tabulated once.
pub fn npg_inner_loop_shared(
    policy: &PolicyParams,
    sources: &[&dyn AdvantageSource],
    model: &CmdpModel,
    schedule: &NpgSchedule,
    cursor: &mut TrajectoryCursor,
) -> Result<Vec<Vec<f64>>> {
    if policy.n_states() != model.n_states() || policy.n_actions() != model.n_actions() {
        return Err(Error::Dimension {
            what: "policy pairs",
            expected: model.n_pairs(),
            got: policy.n_states() * policy.n_actions(),
        });
    }
    let d = policy.dim();
    let na = model.n_actions();
    let scores = policy.score_table();
    let table = policy.table();
    let mut omegas = vec![vec![0.0; d]; sources.len()];
    let mut coef = vec![0.0; model.n_pairs()];
    let mut touched = Vec::new();
    for _ in 0..schedule.iterations {
        let batch = MlmcBatch::draw_with_table(cursor, model, &table, schedule.t_max);
        let weights = batch.weights();
        for (source, omega) in sources.iter().zip(omegas.iter_mut()) {
            touched.clear();
            for (w, z) in weights.iter().zip(&batch.transitions) {
                if *w == 0.0 {
                    continue;
                }
                let k = z.s * na + z.a;
                if !touched.contains(&k) {
                    touched.push(k);
                    coef[k] = 0.0;
                }
                coef[k] += w * (dot(&scores[k], omega) - source.advantage(z)?);
            }
            let step = schedule.gamma_omega;
            for &k in &touched {
                let c = step * coef[k];
                if c == 0.0 {
                    continue;
                }
                for (o, s) in omega.iter_mut().zip(&scores[k]) {
                    *o -= c * s;
                }
            }
        }
    }
    Ok(omegas)
}

pub fn npg_inner_loop(
    policy: &PolicyParams,
    source: &dyn AdvantageSource,
    model: &CmdpModel,
    schedule: &NpgSchedule,
    cursor: &mut TrajectoryCursor,
) -> Result<Vec<f64>> {
    let mut out = npg_inner_loop_shared(policy, &[source], model, schedule, cursor)?;
    Ok(out.pop().unwrap_or_default())
}
