//! Tabular constrained MDPs, the garnet generator and softmax policies.

use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::rng::{sample_categorical, Rng};
use crate::{Error, Result};

/// Tolerance used for every "sums to one" check on model data.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Weight of the uniform kernel blended into every garnet row.
pub const GARNET_MIX: f64 = 1e-3;

/// Which per-step signal of the CMDP a quantity refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    Reward,
    Cost,
}

impl Signal {
    pub const BOTH: [Signal; 2] = [Signal::Reward, Signal::Cost];

    pub fn index(self) -> usize {
        match self {
            Signal::Reward => 0,
            Signal::Cost => 1,
        }
    }
}

impl std::fmt::Display for Signal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Signal::Reward => "r",
            Signal::Cost => "c",
        })
    }
}

/// A tabular CMDP `(S, A, r, c, P, rho)`.
///
/// Dense storage: `transition` is `[s][a][s']` row-major, `reward` and `cost`
/// are `[s][a]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CmdpModel {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    cost: Vec<f64>,
    initial_dist: Vec<f64>,
}

/// On-disk schema of a model (`--env-file`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Vec<f64>,
    pub reward: Vec<f64>,
    pub cost: Vec<f64>,
    pub initial_dist: Vec<f64>,
}

impl CmdpModel {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        cost: Vec<f64>,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        let model = Self {
            n_states,
            n_actions,
            transition,
            reward,
            cost,
            initial_dist,
        };
        model.validate()?;
        Ok(model)
    }

    /// Checks every structural invariant, naming the first one that fails.
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 {
            return Err(Error::Invariant("n_states must be positive".into()));
        }
        if na == 0 {
            return Err(Error::Invariant("n_actions must be positive".into()));
        }
        let check_len = |name: &str, got: usize, want: usize| {
            if got != want {
                Err(Error::Invariant(format!(
                    "{name} has {got} entries, expected {want}"
                )))
            } else {
                Ok(())
            }
        };
        check_len("transition", self.transition.len(), ns * na * ns)?;
        check_len("reward", self.reward.len(), ns * na)?;
        check_len("cost", self.cost.len(), ns * na)?;
        check_len("initial_dist", self.initial_dist.len(), ns)?;

        for s in 0..ns {
            for a in 0..na {
                let row = self.row(s, a);
                if let Some(p) = row.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
                    return Err(Error::Invariant(format!(
                        "transition row (s={s}, a={a}) has invalid entry {p}"
                    )));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > SIMPLEX_TOL {
                    return Err(Error::Invariant(format!(
                        "transition row (s={s}, a={a}) sums to {total}, expected 1 within {SIMPLEX_TOL:e}"
                    )));
                }
                let r = self.reward[s * na + a];
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::Invariant(format!(
                        "reward (s={s}, a={a}) = {r} outside [0, 1]"
                    )));
                }
                let c = self.cost[s * na + a];
                if !(-1.0..=1.0).contains(&c) {
                    return Err(Error::Invariant(format!(
                        "cost (s={s}, a={a}) = {c} outside [-1, 1]"
                    )));
                }
            }
        }
        if let Some(p) = self.initial_dist.iter().find(|p| !(**p >= 0.0)) {
            return Err(Error::Invariant(format!(
                "initial_dist has negative entry {p}"
            )));
        }
        let total: f64 = self.initial_dist.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Invariant(format!(
                "initial_dist sums to {total}, expected 1 within {SIMPLEX_TOL:e}"
            )));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    /// `P(.|s, a)`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn prob(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s_next]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn cost(&self, s: usize, a: usize) -> f64 {
        self.cost[s * self.n_actions + a]
    }

    pub fn signal(&self, g: Signal, s: usize, a: usize) -> f64 {
        match g {
            Signal::Reward => self.reward(s, a),
            Signal::Cost => self.cost(s, a),
        }
    }

    pub fn signal_table(&self, g: Signal) -> &[f64] {
        match g {
            Signal::Reward => &self.reward,
            Signal::Cost => &self.cost,
        }
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn check_state(&self, s: usize) -> Result<()> {
        if s < self.n_states {
            Ok(())
        } else {
            Err(Error::InvalidState(s, self.n_states))
        }
    }

    pub fn check_action(&self, a: usize) -> Result<()> {
        if a < self.n_actions {
            Ok(())
        } else {
            Err(Error::InvalidAction(a, self.n_actions))
        }
    }

    /// Returns a copy with the cost table replaced. Used to build
    /// constraint variants of one environment.
    pub fn with_cost(&self, cost: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.reward.clone(),
            cost,
            self.initial_dist.clone(),
        )
    }

    pub fn to_env_file(&self) -> EnvFile {
        EnvFile {
            n_states: self.n_states,
            n_actions: self.n_actions,
            transition: self.transition.clone(),
            reward: self.reward.clone(),
            cost: self.cost.clone(),
            initial_dist: self.initial_dist.clone(),
        }
    }

    pub fn from_env_file(file: EnvFile) -> Result<Self> {
        Self::new(
            file.n_states,
            file.n_actions,
            file.transition,
            file.reward,
            file.cost,
            file.initial_dist,
        )
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: EnvFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_env_file(file)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.to_env_file()).expect("env file always serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }
}

/// One observed step `(s, a, s', a')` with the signals of `(s, a)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
    /// Drawn from the policy at `s_next`; only present on rollouts.
    pub a_next: Option<usize>,
    pub r_val: f64,
    pub c_val: f64,
}

impl Transition {
    pub fn signal(&self, g: Signal) -> f64 {
        match g {
            Signal::Reward => self.r_val,
            Signal::Cost => self.c_val,
        }
    }

    pub fn next_action(&self) -> Result<usize> {
        self.a_next.ok_or(Error::MissingNextAction)
    }
}

/// Draws `s' ~ P(.|s, a)`. `a_next` is left empty; rollouts fill it.
pub fn step(model: &CmdpModel, s: usize, a: usize, rng: &mut Rng) -> Result<Transition> {
    model.check_state(s)?;
    model.check_action(a)?;
    Ok(step_unchecked(model, s, a, rng))
}

pub(crate) fn step_unchecked(model: &CmdpModel, s: usize, a: usize, rng: &mut Rng) -> Transition {
    let s_next = sample_categorical(model.row(s, a), rng);
    Transition {
        s,
        a,
        s_next,
        a_next: None,
        r_val: model.reward(s, a),
        c_val: model.cost(s, a),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum ConstraintMode {
    /// Costs i.i.d. uniform in `[-1, 1]`.
    Uniform,
    /// Uniform costs, except that in every state the lowest-reward action
    /// gets a cost of at least `margin`. The policy always taking that
    /// action has `J_c >= margin`, so Slater's condition holds with
    /// `delta_s = margin`.
    Slater { margin: f64 },
}

impl ConstraintMode {
    pub const DEFAULT_MARGIN: f64 = 0.25;

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "uniform" => Ok(ConstraintMode::Uniform),
            "slater" => Ok(ConstraintMode::Slater {
                margin: Self::DEFAULT_MARGIN,
            }),
            other => Err(Error::InvalidArgument(format!(
                "unknown constraint mode `{other}` (expected `uniform` or `slater`)"
            ))),
        }
    }
}

/// Random garnet CMDP.
///
/// Each `(s, a)` row puts Dirichlet(1, .., 1) mass on `branching` distinct
/// next states and is then blended with the uniform kernel at weight
/// [`GARNET_MIX`], which makes every entry positive: the chain induced by any
/// policy is irreducible and aperiodic.
pub fn garnet(
    n_states: usize,
    n_actions: usize,
    branching: usize,
    constraint_mode: ConstraintMode,
    seed: u64,
) -> Result<CmdpModel> {
    if n_states == 0 || n_actions == 0 {
        return Err(Error::InvalidArgument(
            "garnet needs at least one state and one action".into(),
        ));
    }
    if branching == 0 || branching > n_states {
        return Err(Error::InvalidArgument(format!(
            "branching {branching} out of range 1..={n_states}"
        )));
    }
    if let ConstraintMode::Slater { margin } = constraint_mode {
        if !(0.0..1.0).contains(&margin) || margin <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "slater margin {margin} must lie in (0, 1)"
            )));
        }
    }
    let mut rng = crate::rng::split(seed, crate::rng::Stream::Environment);
    let uniform = 1.0 / n_states as f64;

    let mut transition = vec![0.0; n_states * n_actions * n_states];
    for sa in 0..n_states * n_actions {
        let row = &mut transition[sa * n_states..(sa + 1) * n_states];
        let support = rand::seq::index::sample(&mut rng, n_states, branching);
        let weights: Vec<f64> = (0..branching).map(|_| Exp1.sample(&mut rng)).collect();
        let total: f64 = weights.iter().sum();
        for (idx, w) in support.iter().zip(&weights) {
            row[idx] = w / total;
        }
        for p in row.iter_mut() {
            *p = (1.0 - GARNET_MIX) * *p + GARNET_MIX * uniform;
        }
        let total: f64 = row.iter().sum();
        for p in row.iter_mut() {
            *p /= total;
        }
    }

    let reward: Vec<f64> = (0..n_states * n_actions)
        .map(|_| rng.random::<f64>())
        .collect();
    let mut cost: Vec<f64> = (0..n_states * n_actions)
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();
    if let ConstraintMode::Slater { margin } = constraint_mode {
        for s in 0..n_states {
            let rewards = &reward[s * n_actions..(s + 1) * n_actions];
            let safe = rewards
                .iter()
                .enumerate()
                .min_by(|x, y| x.1.total_cmp(y.1))
                .map(|(a, _)| a)
                .unwrap_or(0);
            cost[s * n_actions + safe] = margin + (1.0 - margin) * rng.random::<f64>();
        }
    }

    CmdpModel::new(
        n_states,
        n_actions,
        transition,
        reward,
        cost,
        vec![uniform; n_states],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    TabularSoftmax,
    LinearSoftmax,
}

/// Feature map `psi(s, a)` of a softmax policy.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyFeatures {
    /// One-hot `psi(s, a) = e_{s*A + a}`; `d = S * A`.
    Tabular { n_states: usize, n_actions: usize },
    /// Arbitrary dense features, `[s][a][d]` row-major.
    Linear {
        n_states: usize,
        n_actions: usize,
        dim: usize,
        table: Vec<f64>,
    },
}

impl PolicyFeatures {
    pub fn linear(n_states: usize, n_actions: usize, dim: usize, table: Vec<f64>) -> Result<Self> {
        if table.len() != n_states * n_actions * dim {
            return Err(Error::Dimension {
                what: "policy feature table",
                expected: n_states * n_actions * dim,
                got: table.len(),
            });
        }
        if table.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invariant("policy features must be finite".into()));
        }
        Ok(PolicyFeatures::Linear {
            n_states,
            n_actions,
            dim,
            table,
        })
    }

    pub fn n_states(&self) -> usize {
        match self {
            PolicyFeatures::Tabular { n_states, .. } | PolicyFeatures::Linear { n_states, .. } => {
                *n_states
            }
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            PolicyFeatures::Tabular { n_actions, .. }
            | PolicyFeatures::Linear { n_actions, .. } => *n_actions,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PolicyFeatures::Tabular {
                n_states,
                n_actions,
            } => n_states * n_actions,
            PolicyFeatures::Linear { dim, .. } => *dim,
        }
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            PolicyFeatures::Tabular { .. } => PolicyKind::TabularSoftmax,
            PolicyFeatures::Linear { .. } => PolicyKind::LinearSoftmax,
        }
    }

    /// Adds `scale * psi(s, a)` into `out`.
    fn add_feature(&self, s: usize, a: usize, scale: f64, out: &mut [f64]) {
        match self {
            PolicyFeatures::Tabular { n_actions, .. } => out[s * n_actions + a] += scale,
            PolicyFeatures::Linear {
                n_actions,
                dim,
                table,
                ..
            } => {
                let start = (s * n_actions + a) * dim;
                for (o, f) in out.iter_mut().zip(&table[start..start + dim]) {
                    *o += scale * f;
                }
            }
        }
    }

    pub fn feature(&self, s: usize, a: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.add_feature(s, a, 1.0, &mut out);
        out
    }

    fn logit(&self, theta: &[f64], s: usize, a: usize) -> f64 {
        match self {
            PolicyFeatures::Tabular { n_actions, .. } => theta[s * n_actions + a],
            PolicyFeatures::Linear {
                n_actions,
                dim,
                table,
                ..
            } => {
                let start = (s * n_actions + a) * dim;
                table[start..start + dim]
                    .iter()
                    .zip(theta)
                    .map(|(f, t)| f * t)
                    .sum()
            }
        }
    }

    pub fn max_norm(&self) -> f64 {
        match self {
            PolicyFeatures::Tabular { .. } => 1.0,
            PolicyFeatures::Linear { dim, table, .. } => table
                .chunks(*dim)
                .map(|f| f.iter().map(|x| x * x).sum::<f64>().sqrt())
                .fold(0.0, f64::max),
        }
    }
}

/// Softmax policy `pi_theta(a|s) ∝ exp(theta . psi(s, a))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    theta: Vec<f64>,
    features: Arc<PolicyFeatures>,
}

impl PolicyParams {
    pub fn new(features: Arc<PolicyFeatures>, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != features.dim() {
            return Err(Error::Dimension {
                what: "policy parameter",
                expected: features.dim(),
                got: theta.len(),
            });
        }
        Ok(Self { theta, features })
    }

    /// Tabular softmax at `theta = 0` (the uniform policy).
    pub fn tabular(n_states: usize, n_actions: usize) -> Self {
        let features = Arc::new(PolicyFeatures::Tabular {
            n_states,
            n_actions,
        });
        Self {
            theta: vec![0.0; n_states * n_actions],
            features,
        }
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new(self.features.clone(), theta)
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn features(&self) -> &Arc<PolicyFeatures> {
        &self.features
    }

    pub fn kind(&self) -> PolicyKind {
        self.features.kind()
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn n_states(&self) -> usize {
        self.features.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.features.n_actions()
    }

    fn check_state(&self, s: usize) -> Result<()> {
        if s < self.n_states() {
            Ok(())
        } else {
            Err(Error::InvalidState(s, self.n_states()))
        }
    }

    /// `pi_theta(.|s)`, computed with max-subtraction.
    pub fn action_probs(&self, s: usize) -> Result<Vec<f64>> {
        self.check_state(s)?;
        Ok(self.probs_unchecked(s))
    }

    pub(crate) fn probs_unchecked(&self, s: usize) -> Vec<f64> {
        let na = self.n_actions();
        let logits: Vec<f64> = (0..na)
            .map(|a| self.features.logit(&self.theta, s, a))
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= total;
        }
        probs
    }

    /// `grad_theta log pi_theta(a|s) = psi(s, a) - sum_b pi(b|s) psi(s, b)`.
    pub fn score(&self, s: usize, a: usize) -> Result<Vec<f64>> {
        self.check_state(s)?;
        if a >= self.n_actions() {
            return Err(Error::InvalidAction(a, self.n_actions()));
        }
        let probs = self.probs_unchecked(s);
        Ok(self.score_with_probs(s, a, &probs))
    }

    fn score_with_probs(&self, s: usize, a: usize, probs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.features.add_feature(s, a, 1.0, &mut out);
        for (b, &p) in probs.iter().enumerate() {
            self.features.add_feature(s, b, -p, &mut out);
        }
        out
    }

    /// Scores for every pair, `[s * A + a]`.
    pub fn score_table(&self) -> Vec<Vec<f64>> {
        let na = self.n_actions();
        let mut out = Vec::with_capacity(self.n_states() * na);
        for s in 0..self.n_states() {
            let probs = self.probs_unchecked(s);
            for a in 0..na {
                out.push(self.score_with_probs(s, a, &probs));
            }
        }
        out
    }

    pub fn table(&self) -> PolicyTable {
        let probs = (0..self.n_states())
            .flat_map(|s| self.probs_unchecked(s))
            .collect();
        PolicyTable {
            n_states: self.n_states(),
            n_actions: self.n_actions(),
            probs,
        }
    }

    pub fn sample_action(&self, s: usize, rng: &mut Rng) -> Result<usize> {
        self.check_state(s)?;
        Ok(sample_categorical(&self.probs_unchecked(s), rng))
    }
}

/// Explicit `pi(a|s)` table, `[s * A + a]`. The oracle evaluates these, which
/// lets it score policies that are not softmax (e.g. deterministic ones).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

impl PolicyTable {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::Dimension {
                what: "policy table",
                expected: n_states * n_actions,
                got: probs.len(),
            });
        }
        for s in 0..n_states {
            let row = &probs[s * n_actions..(s + 1) * n_actions];
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Invariant(format!(
                    "policy row for state {s} is not a probability vector"
                )));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn deterministic(n_states: usize, n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::InvalidAction(a, n_actions));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Self::new(n_states, n_actions, probs)
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }
}
