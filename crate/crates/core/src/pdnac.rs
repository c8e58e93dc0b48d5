//! The outer primal-dual loop: per epoch, fit reward and cost critics on
//! shared rollouts, estimate both natural gradients, take a primal step on
//! `theta` and a projected dual step on `lambda`.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cmdp::{CmdpModel, PolicyParams, Signal};
use crate::critic::{
    build_feature_map, critic_inner_loop_shared, init_network, Activation, CriticParams, CriticSchedule,
    CriticTask, FeatureMode, NeuralCritic,
};
use crate::npg::{npg_inner_loop_shared, AdvantageEstimator, AdvantageSource, CriticAdvantage, NpgSchedule};
use crate::oracle::{
    evaluate_table, exact_fisher, fisher_from_eval, fisher_spectrum, gradient_from_eval,
    solve_constrained_optimum, solve_fisher,
};
use crate::rng::{split, Stream};
use crate::sampler::TrajectoryCursor;
use crate::{Error, Result};

/// Header of the per-epoch metrics CSV.
pub const CSV_HEADER: &str =
    "k,J_r,J_c,lambda,gap,violation,eta_r,eta_c,critic_mse_r,critic_mse_c,npg_err_r,npg_err_c,wall_ms";

/// Fallback for `mu_hat` when the Fisher matrix at `theta_0` has no
/// positive eigenvalue.
pub const DEFAULT_MU_HAT: f64 = 0.1;

/// User-facing configuration. Every unset knob is derived from `t` when
/// the run starts:
///
/// | knob          | default                                      |
/// |---------------|----------------------------------------------|
/// | `k`, `h`      | `ceil(sqrt(t))`                              |
/// | `alpha`, `beta` | `t^(-1/4)`                                 |
/// | `t_max`       | `t`                                          |
/// | `radius`      | `c_r ln t`                                   |
/// | `gamma_xi`    | `8 ln t / (lambda_hat h)`                    |
/// | `c_gamma`     | `min(1, 4 / (gamma_xi h))`                   |
/// | `gamma_omega` | `min(2 ln t / (mu_hat h), omega_cap / l_hat)` |
/// | `mu_hat`      | smallest positive Fisher eigenvalue at `theta_0` |
/// | `l_hat`       | largest Fisher eigenvalue at `theta_0`       |
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdnacConfig {
    #[serde(alias = "T")]
    pub t: u64,
    #[serde(alias = "K")]
    pub k: Option<usize>,
    #[serde(alias = "H")]
    pub h: Option<usize>,
    #[serde(alias = "T_max")]
    pub t_max: Option<u64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma_xi: Option<f64>,
    pub lambda_hat: f64,
    pub c_gamma: Option<f64>,
    pub gamma_omega: Option<f64>,
    pub mu_hat: Option<f64>,
    pub l_hat: Option<f64>,
    /// Stability cap on the derived `gamma_omega`, as a fraction of
    /// `1 / l_hat`. Ignored when `gamma_omega` is set.
    pub omega_cap: f64,
    pub radius: Option<f64>,
    pub c_r: f64,
    pub delta: f64,
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub feature_mode: FeatureMode,
    /// Critic input dimension; defaults to `S A`.
    pub feature_dim: Option<usize>,
    pub advantage: AdvantageEstimator,
    /// Start each epoch's critic from the previous epoch's output instead of
    /// `[0, zeta_0]`.
    pub warm_start: bool,
    /// Record wall-clock milliseconds per epoch. Off by default so the CSV
    /// is a pure function of the seed.
    pub timing: bool,
    pub seed: u64,
}

impl Default for PdnacConfig {
    fn default() -> Self {
        Self {
            t: 1024,
            k: None,
            h: None,
            t_max: None,
            alpha: None,
            beta: None,
            gamma_xi: None,
            lambda_hat: 0.1,
            c_gamma: None,
            gamma_omega: None,
            mu_hat: None,
            l_hat: None,
            omega_cap: 0.125,
            radius: None,
            c_r: 1.0,
            delta: 0.25,
            depth: 2,
            width: 64,
            activation: Activation::Gelu,
            feature_mode: FeatureMode::OneHot,
            feature_dim: None,
            advantage: AdvantageEstimator::TdQ,
            warm_start: false,
            timing: false,
            seed: 0,
        }
    }
}

/// Every knob with its derived value filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub t: u64,
    pub k: usize,
    pub h: usize,
    pub t_max: u64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_xi: f64,
    pub c_gamma: f64,
    pub gamma_omega: f64,
    pub mu_hat: f64,
    pub l_hat: f64,
    pub radius: f64,
    pub delta: f64,
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub feature_mode: FeatureMode,
    pub feature_dim: usize,
    pub advantage: AdvantageEstimator,
    pub warm_start: bool,
    pub timing: bool,
    pub seed: u64,
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::InvalidArgument(format!("{name} must be positive and finite, got {v}")))
    }
}

impl PdnacConfig {
    pub fn with_t(t: u64) -> Self {
        Self {
            t,
            ..Self::default()
        }
    }

    /// Fills derived defaults. `mu_hat` may need the oracle Fisher matrix at
    /// `theta_0`, hence the model and initial policy.
    pub fn resolve(&self, model: &CmdpModel, policy: &PolicyParams) -> Result<ResolvedConfig> {
        if self.t < 4 {
            return Err(Error::InvalidArgument(format!("T must be >= 4, got {}", self.t)));
        }
        let tf = self.t as f64;
        let ln_t = tf.ln();
        let root = (tf.sqrt().ceil() as usize).max(1);
        let k = self.k.unwrap_or(root);
        let h = self.h.unwrap_or(root);
        if k == 0 || h == 0 {
            return Err(Error::InvalidArgument("K and H must be >= 1".into()));
        }
        let t_max = self.t_max.unwrap_or(self.t);
        if t_max < 2 {
            return Err(Error::InvalidArgument(format!("T_max must be >= 2, got {t_max}")));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        let alpha = positive("alpha", self.alpha.unwrap_or(tf.powf(-0.25)))?;
        let beta = self.beta.unwrap_or(tf.powf(-0.25));
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
        }
        let lambda_hat = positive("lambda_hat", self.lambda_hat)?;
        let gamma_xi = positive("gamma_xi", self.gamma_xi.unwrap_or(8.0 * ln_t / (lambda_hat * h as f64)))?;
        let c_gamma = positive("c_gamma", self.c_gamma.unwrap_or((4.0 / (gamma_xi * h as f64)).min(1.0)))?;
        let spectrum = if self.mu_hat.is_none() || self.l_hat.is_none() {
            fisher_spectrum(&exact_fisher(model, policy)?)
        } else {
            None
        };
        let mu_hat = match self.mu_hat {
            Some(v) => positive("mu_hat", v)?,
            None => spectrum.map_or(DEFAULT_MU_HAT, |(lo, _)| lo),
        };
        let l_hat = match self.l_hat {
            Some(v) => positive("l_hat", v)?,
            None => spectrum.map_or(1.0, |(_, hi)| hi),
        };
        let omega_cap = positive("omega_cap", self.omega_cap)?;
        let gamma_omega = positive(
            "gamma_omega",
            self.gamma_omega
                .unwrap_or((2.0 * ln_t / (mu_hat * h as f64)).min(omega_cap / l_hat)),
        )?;
        let radius = positive("radius", self.radius.unwrap_or(self.c_r * ln_t))?;
        if self.depth == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("critic depth and width must be >= 1".into()));
        }
        let feature_dim = self.feature_dim.unwrap_or(model.n_pairs());
        Ok(ResolvedConfig {
            t: self.t,
            k,
            h,
            t_max,
            alpha,
            beta,
            gamma_xi,
            c_gamma,
            gamma_omega,
            mu_hat,
            l_hat,
            radius,
            delta: self.delta,
            depth: self.depth,
            width: self.width,
            activation: self.activation,
            feature_mode: self.feature_mode,
            feature_dim,
            advantage: self.advantage,
            warm_start: self.warm_start,
            timing: self.timing,
            seed: self.seed,
        })
    }
}

impl ResolvedConfig {
    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn dual_cap(&self) -> f64 {
        2.0 / self.delta
    }
}

/// `clamp(lambda - beta eta_c, 0, 2 / delta)`
pub fn dual_update(lambda: f64, beta: f64, eta_c: f64, delta: f64) -> f64 {
    (lambda - beta * eta_c).clamp(0.0, 2.0 / delta)
}

/// `theta + alpha (omega_r + lambda omega_c)`
pub fn primal_update(theta: &[f64], alpha: f64, omega_r: &[f64], omega_c: &[f64], lambda: f64) -> Result<Vec<f64>> {
    for (what, v) in [("reward direction", omega_r), ("cost direction", omega_c)] {
        if v.len() != theta.len() {
            return Err(Error::Dimension {
                what,
                expected: theta.len(),
                got: v.len(),
            });
        }
    }
    Ok(theta
        .iter()
        .zip(omega_r.iter().zip(omega_c))
        .map(|(t, (r, c))| t + alpha * (r + lambda * c))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub k: usize,
    pub j_r: f64,
    pub j_c: f64,
    /// `lambda_{k+1}`, the multiplier after this epoch's dual step.
    pub lambda: f64,
    /// `J_r^* - J_r(theta_k)`
    pub gap: f64,
    /// `-J_c(theta_k)`
    pub violation: f64,
    pub eta_r: f64,
    pub eta_c: f64,
    pub critic_mse_r: f64,
    pub critic_mse_c: f64,
    pub npg_err_r: f64,
    pub npg_err_c: f64,
    pub wall_ms: u64,
    /// `||zeta_g - zeta_0||` for both critics at the end of the epoch.
    #[serde(skip)]
    pub critic_dist: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub config: ResolvedConfig,
    pub config_hash: String,
    pub seed: u64,
    pub mean_gap: f64,
    pub mean_violation: f64,
    /// Mean of `max(0, -J_c(theta_k))`: violation without credit for slack.
    pub mean_positive_violation: f64,
    pub total_env_steps: u64,
    pub inner_iterations: u64,
    pub j_r_star: Option<f64>,
    pub final_theta: Vec<f64>,
    pub warnings: Vec<String>,
}

impl RunSummary {
    /// Environment steps per inner iteration (each iteration draws one
    /// MLMC batch).
    pub fn mean_batch_length(&self) -> f64 {
        self.total_env_steps as f64 / self.inner_iterations.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<EpochRow>,
    pub summary: RunSummary,
}

fn fmt_f64(out: &mut String, v: f64) {
    // Display gives the shortest representation that round-trips
    let _ = write!(out, "{v}");
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{}", r.k);
            for v in [
                r.j_r,
                r.j_c,
                r.lambda,
                r.gap,
                r.violation,
                r.eta_r,
                r.eta_c,
                r.critic_mse_r,
                r.critic_mse_c,
                r.npg_err_r,
                r.npg_err_c,
            ] {
                out.push(',');
                fmt_f64(&mut out, v);
            }
            let _ = writeln!(out, ",{}", r.wall_ms);
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Checks what must hold after every run: one row per epoch, `lambda`
    /// inside `[0, 2 / delta]`, both critics inside their projection ball,
    /// and at most `2 log2(T_max) + 2` environment steps per inner iteration
    /// on average.
    pub fn check_invariants(&self) -> Result<()> {
        let cfg = &self.summary.config;
        if self.rows.len() != cfg.k {
            return Err(Error::Invariant(format!("{} rows for K = {}", self.rows.len(), cfg.k)));
        }
        let cap = cfg.dual_cap();
        for r in &self.rows {
            if !(0.0..=cap).contains(&r.lambda) {
                return Err(Error::Invariant(format!("epoch {}: lambda {} outside [0, {cap}]", r.k, r.lambda)));
            }
            for d in r.critic_dist {
                if !(d <= cfg.radius * (1.0 + 1e-12)) {
                    return Err(Error::Invariant(format!(
                        "epoch {}: critic at distance {d} from its anchor, radius {}",
                        r.k, cfg.radius
                    )));
                }
            }
        }
        let bound = 2.0 * (cfg.t_max as f64).log2() + 2.0;
        let per_iter = self.summary.mean_batch_length();
        if per_iter > bound {
            return Err(Error::Invariant(format!(
                "{per_iter:.3} steps per inner iteration exceeds {bound:.3}"
            )));
        }
        Ok(())
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Runs the algorithm from `theta_0 = 0` (tabular softmax) and
/// `lambda_0 = 0`.
pub fn run(config: &PdnacConfig, model: &CmdpModel) -> Result<RunMetrics> {
    let policy = PolicyParams::tabular(model.n_states(), model.n_actions());
    run_from(config, model, policy)
}

/// Same as [`run`] but from a caller-supplied initial policy.
pub fn run_from(config: &PdnacConfig, model: &CmdpModel, mut policy: PolicyParams) -> Result<RunMetrics> {
    let cfg = config.resolve(model, &policy)?;
    let seed = cfg.seed;
    let mut warnings = Vec::new();

    let optimum = match solve_constrained_optimum(model) {
        Ok(opt) => Some(opt),
        Err(e @ Error::Infeasible { .. }) => {
            let msg = format!("no constrained optimum, gap reported as NaN: {e}");
            log::warn!("{msg}");
            warnings.push(msg);
            None
        }
        Err(e) => return Err(e),
    };

    let mut feat_rng = split(seed, Stream::Features);
    let features = build_feature_map(model.n_states(), model.n_actions(), cfg.feature_mode, cfg.feature_dim, &mut feat_rng)?;
    let mut net_rng = split(seed, Stream::NetInit);
    let critics = [
        NeuralCritic::new(
            init_network(cfg.depth, cfg.width, cfg.feature_dim, cfg.activation, &mut net_rng)?,
            features.clone(),
        )?,
        NeuralCritic::new(
            init_network(cfg.depth, cfg.width, cfg.feature_dim, cfg.activation, &mut net_rng)?,
            features,
        )?,
    ];
    let mut cursor = TrajectoryCursor::new(model, split(seed, Stream::Trajectory));
    let critic_schedule = CriticSchedule {
        iterations: cfg.h,
        gamma_xi: cfg.gamma_xi,
        c_gamma: cfg.c_gamma,
        t_max: cfg.t_max,
    };
    let npg_schedule = NpgSchedule {
        iterations: cfg.h,
        gamma_omega: cfg.gamma_omega,
        t_max: cfg.t_max,
    };

    let mut lambda = 0.0;
    let mut carried: Option<[CriticParams; 2]> = None;
    let mut rows = Vec::with_capacity(cfg.k);
    for k in 0..cfg.k {
        let started = Instant::now();
        let table = policy.table();
        let eval = evaluate_table(model, &table)?;

        let start_params = match (&carried, cfg.warm_start) {
            (Some(prev), true) => prev.clone(),
            _ => [
                CriticParams::initial(critics[0].net(), cfg.radius)?,
                CriticParams::initial(critics[1].net(), cfg.radius)?,
            ],
        };
        let [p_r, p_c] = start_params;
        let mut tasks = [
            CriticTask {
                critic: &critics[0],
                signal: Signal::Reward,
                params: p_r,
            },
            CriticTask {
                critic: &critics[1],
                signal: Signal::Cost,
                params: p_c,
            },
        ];
        critic_inner_loop_shared(&mut tasks, model, &policy, &critic_schedule, &mut cursor)?;
        let [t_r, t_c] = tasks;
        let params = [t_r.params, t_c.params];

        let adv_r = CriticAdvantage::new(&critics[0], &params[0], Signal::Reward, &policy, cfg.advantage);
        let adv_c = CriticAdvantage::new(&critics[1], &params[1], Signal::Cost, &policy, cfg.advantage);
        let sources: [&dyn AdvantageSource; 2] = [&adv_r, &adv_c];
        let omegas = npg_inner_loop_shared(&policy, &sources, model, &npg_schedule, &mut cursor)?;

        let fisher = fisher_from_eval(&eval, &policy);
        let mut npg_err = [f64::NAN; 2];
        let mut critic_mse = [0.0; 2];
        for g in Signal::BOTH {
            let i = g.index();
            critic_mse[i] = critics[i].weighted_mse(&params[i].zeta, &eval.nu_pi, &eval.signal(g).q);
            match solve_fisher(&fisher, &gradient_from_eval(&eval, &policy, g)) {
                Ok(star) => npg_err[i] = distance(&omegas[i], &star),
                Err(e) => log::debug!("epoch {k}: exact NPG for {g} unavailable: {e}"),
            }
        }

        let j_r = eval.reward.j;
        let j_c = eval.cost.j;
        let eta_c = params[1].eta;
        let theta = primal_update(policy.theta(), cfg.alpha, &omegas[0], &omegas[1], lambda)?;
        policy = policy.with_theta(theta)?;
        lambda = dual_update(lambda, cfg.beta, eta_c, cfg.delta);

        rows.push(EpochRow {
            k,
            j_r,
            j_c,
            lambda,
            gap: optimum.as_ref().map_or(f64::NAN, |o| o.j_r_star - j_r),
            violation: -j_c,
            eta_r: params[0].eta,
            eta_c,
            critic_mse_r: critic_mse[0],
            critic_mse_c: critic_mse[1],
            npg_err_r: npg_err[0],
            npg_err_c: npg_err[1],
            wall_ms: if cfg.timing {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
            critic_dist: [params[0].distance_from_anchor(), params[1].distance_from_anchor()],
        });
        log::debug!("epoch {k}: J_r={j_r:.4} J_c={j_c:.4} lambda={lambda:.4}");
        carried = Some(params);
    }

    let summary = RunSummary {
        config_hash: cfg.hash(),
        seed,
        mean_gap: mean(rows.iter().map(|r| r.gap)),
        mean_violation: mean(rows.iter().map(|r| r.violation)),
        mean_positive_violation: mean(rows.iter().map(|r| r.violation.max(0.0))),
        total_env_steps: cursor.total_steps(),
        inner_iterations: 2 * (cfg.k * cfg.h) as u64,
        j_r_star: optimum.map(|o| o.j_r_star),
        final_theta: policy.theta().to_vec(),
        warnings,
        config: cfg,
    };
    Ok(RunMetrics { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_examples() {
        assert!((dual_update(1.0, 0.1, 0.2, 0.5) - 0.98).abs() < 1e-15);
        assert_eq!(dual_update(0.01, 1.0, 1.0, 0.5), 0.0);
        assert_eq!(dual_update(4.0, 1.0, -10.0, 0.5), 4.0);
    }

    #[test]
    fn primal_examples() {
        let th = primal_update(&[0.0, 0.0], 0.5, &[1.0, 0.0], &[0.0, 2.0], 2.0).unwrap();
        assert_eq!(th, vec![0.5, 2.0]);
        let th = primal_update(&[1.0, -1.0], 0.3, &[0.0, 0.0], &[0.0, 0.0], 1.5).unwrap();
        assert_eq!(th, vec![1.0, -1.0]);
        let th = primal_update(&[0.0], 0.5, &[2.0], &[7.0], 0.0).unwrap();
        assert_eq!(th, vec![1.0]);
        assert!(primal_update(&[0.0], 0.5, &[2.0, 1.0], &[7.0], 0.0).is_err());
    }

    #[test]
    fn csv_header_is_exact() {
        assert_eq!(
            CSV_HEADER,
            "k,J_r,J_c,lambda,gap,violation,eta_r,eta_c,critic_mse_r,critic_mse_c,npg_err_r,npg_err_c,wall_ms"
        );
    }

    #[test]
    fn defaults_follow_t() {
        let model = crate::cmdp::garnet(3, 2, 2, crate::cmdp::ConstraintMode::Uniform, 0).unwrap();
        let pol = PolicyParams::tabular(3, 2);
        let cfg = PdnacConfig::with_t(256).resolve(&model, &pol).unwrap();
        assert_eq!((cfg.k, cfg.h, cfg.t_max), (16, 16, 256));
        assert!((cfg.alpha - 0.25).abs() < 1e-15);
        assert!((cfg.radius - 256f64.ln()).abs() < 1e-12);
        assert!(PdnacConfig::with_t(2).resolve(&model, &pol).is_err());
        let bad = PdnacConfig {
            delta: 1.0,
            ..PdnacConfig::with_t(16)
        };
        assert!(bad.resolve(&model, &pol).is_err());
    }
}
