//! Exact ground truth on tabular CMDPs.
//!
//! Everything here is computed by dense linear algebra on the model, never by
//! sampling. Q-functions use the bias normalization `sum_s d(s) V(s) = 0`.

pub mod chain;
pub mod simplex;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::cmdp::{CmdpModel, PolicyParams, PolicyTable, Signal};
use crate::{Error, Result};

/// Mixing-time search stops here.
pub const MIXING_CAP: u64 = 1_000_000;

/// Relative eigenvalue cutoff for the Fisher pseudo-inverse.
pub const PINV_CUTOFF: f64 = 1e-10;

/// `P^pi(s, s') = sum_a pi(a|s) P(s'|s, a)`.
pub fn policy_matrix(model: &CmdpModel, table: &PolicyTable) -> DMatrix<f64> {
    let n = model.n_states();
    let mut p = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..model.n_actions() {
            let w = table.prob(s, a);
            if w == 0.0 {
                continue;
            }
            for (s2, q) in model.row(s, a).iter().enumerate() {
                p[(s, s2)] += w * q;
            }
        }
    }
    p
}

/// Checks that the chain has a single, aperiodic recurrent class.
pub fn check_ergodic(p: &DMatrix<f64>) -> Result<()> {
    let classes = chain::recurrent_classes(p);
    if classes.len() != 1 {
        return Err(Error::NotIrreducible { classes });
    }
    let period = chain::period(p, &classes[0]);
    if period > 1 {
        return Err(Error::Periodic {
            period,
            class: classes.into_iter().next().unwrap_or_default(),
        });
    }
    Ok(())
}

/// Solves `d P = d`, `sum d = 1` for an explicit transition matrix.
pub fn stationary_from_matrix(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_ergodic(p)?;
    let n = p.nrows();
    let mut a = DMatrix::identity(n, n) - p.transpose();
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let lu = a.clone().lu();
    let mut d = lu.solve(&rhs).ok_or(Error::Singular("stationary distribution"))?;
    // one round of iterative refinement
    let resid = &rhs - &a * &d;
    if let Some(corr) = lu.solve(&resid) {
        d += corr;
    }
    Ok(d)
}

pub fn stationary_distribution(model: &CmdpModel, policy: &PolicyParams) -> Result<Vec<f64>> {
    let p = policy_matrix(model, &policy.table());
    Ok(stationary_from_matrix(&p)?.iter().copied().collect())
}

/// Exact values of one signal under one policy.
#[derive(Debug, Clone, Serialize)]
pub struct SignalValues {
    pub j: f64,
    /// `[s][a]`
    pub q: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    /// `[s][a]`
    pub advantage: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExactEvaluation {
    pub d_pi: Vec<f64>,
    /// Occupancy measure `nu(s, a) = d(s) pi(a|s)`, `[s][a]`.
    pub nu_pi: Vec<Vec<f64>>,
    pub reward: SignalValues,
    pub cost: SignalValues,
}

impl ExactEvaluation {
    pub fn signal(&self, g: Signal) -> &SignalValues {
        match g {
            Signal::Reward => &self.reward,
            Signal::Cost => &self.cost,
        }
    }

    /// Verifies stationarity, occupancy, Bellman, normalization and
    /// zero-mean advantage identities at tolerance `tol`.
    pub fn check_invariants(&self, model: &CmdpModel, table: &PolicyTable, tol: f64) -> Result<()> {
        let (ns, na) = (model.n_states(), model.n_actions());
        let p = policy_matrix(model, table);
        let fail = |what: String| Err(Error::Invariant(what));

        let total: f64 = self.d_pi.iter().sum();
        if (total - 1.0).abs() > tol {
            return fail(format!("d_pi sums to {total}"));
        }
        for s2 in 0..ns {
            let flow: f64 = (0..ns).map(|s| self.d_pi[s] * p[(s, s2)]).sum();
            if (flow - self.d_pi[s2]).abs() > tol {
                return fail(format!("d_pi not stationary at state {s2}"));
            }
        }
        let mut nu_total = 0.0;
        for s in 0..ns {
            for a in 0..na {
                let want = self.d_pi[s] * table.prob(s, a);
                if (self.nu_pi[s][a] - want).abs() > tol {
                    return fail(format!("nu_pi({s},{a}) != d(s) pi(a|s)"));
                }
                nu_total += self.nu_pi[s][a];
            }
        }
        if (nu_total - 1.0).abs() > tol {
            return fail(format!("nu_pi sums to {nu_total}"));
        }
        for g in Signal::BOTH {
            let vals = self.signal(g);
            for s in 0..ns {
                for a in 0..na {
                    let next: f64 = model
                        .row(s, a)
                        .iter()
                        .zip(&vals.v)
                        .map(|(q, v)| q * v)
                        .sum();
                    let rhs = model.signal(g, s, a) - vals.j + next;
                    if (vals.q[s][a] - rhs).abs() > tol {
                        return fail(format!("Bellman residual for {g} at ({s},{a})"));
                    }
                }
                let adv_mean: f64 = (0..na).map(|a| table.prob(s, a) * vals.advantage[s][a]).sum();
                if adv_mean.abs() > tol {
                    return fail(format!("advantage of {g} has nonzero policy mean at state {s}"));
                }
            }
            let bias: f64 = self.d_pi.iter().zip(&vals.v).map(|(d, v)| d * v).sum();
            if bias.abs() > tol {
                return fail(format!("bias normalization sum d V = {bias} for {g}"));
            }
        }
        Ok(())
    }
}

fn evaluate_signal(
    model: &CmdpModel,
    table: &PolicyTable,
    fundamental: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    z: &DMatrix<f64>,
    nu: &[Vec<f64>],
    g: Signal,
) -> Result<SignalValues> {
    let (ns, na) = (model.n_states(), model.n_actions());
    let j: f64 = (0..ns)
        .flat_map(|s| (0..na).map(move |a| (s, a)))
        .map(|(s, a)| nu[s][a] * model.signal(g, s, a))
        .sum();
    let g_pi = DVector::from_iterator(
        ns,
        (0..ns).map(|s| (0..na).map(|a| table.prob(s, a) * model.signal(g, s, a)).sum::<f64>()),
    );
    let rhs = g_pi.add_scalar(-j);
    let mut v = fundamental.solve(&rhs).ok_or(Error::Singular("bias equation"))?;
    let resid = &rhs - z * &v;
    if let Some(corr) = fundamental.solve(&resid) {
        v += corr;
    }
    let mut q = vec![vec![0.0; na]; ns];
    let mut adv = vec![vec![0.0; na]; ns];
    for s in 0..ns {
        for a in 0..na {
            let next: f64 = model.row(s, a).iter().zip(v.iter()).map(|(p, v)| p * v).sum();
            q[s][a] = model.signal(g, s, a) - j + next;
        }
        for a in 0..na {
            adv[s][a] = q[s][a] - v[s];
        }
    }
    Ok(SignalValues {
        j,
        q,
        v: v.iter().copied().collect(),
        advantage: adv,
    })
}

/// Exact average values, bias-normalized Q/V and advantages for both signals.
pub fn evaluate_table(model: &CmdpModel, table: &PolicyTable) -> Result<ExactEvaluation> {
    let (ns, na) = (model.n_states(), model.n_actions());
    let p = policy_matrix(model, table);
    let d = stationary_from_matrix(&p)?;
    let nu: Vec<Vec<f64>> = (0..ns)
        .map(|s| (0..na).map(|a| d[s] * table.prob(s, a)).collect())
        .collect();
    // (I - P + 1 d^T) V = g^pi - J  <=>  (I - P) V = g^pi - J and d.V = 0
    let mut z = DMatrix::identity(ns, ns) - &p;
    for i in 0..ns {
        for j in 0..ns {
            z[(i, j)] += d[j];
        }
    }
    let lu = z.clone().lu();
    let reward = evaluate_signal(model, table, &lu, &z, &nu, Signal::Reward)?;
    let cost = evaluate_signal(model, table, &lu, &z, &nu, Signal::Cost)?;
    Ok(ExactEvaluation {
        d_pi: d.iter().copied().collect(),
        nu_pi: nu,
        reward,
        cost,
    })
}

pub fn evaluate_exact(model: &CmdpModel, policy: &PolicyParams) -> Result<ExactEvaluation> {
    evaluate_table(model, &policy.table())
}

/// Policy gradient theorem: `sum nu(s,a) A_g(s,a) score(s,a)`.
pub fn exact_policy_gradient(model: &CmdpModel, policy: &PolicyParams, g: Signal) -> Result<Vec<f64>> {
    let eval = evaluate_exact(model, policy)?;
    Ok(gradient_from(&eval, policy, g))
}

fn gradient_from(eval: &ExactEvaluation, policy: &PolicyParams, g: Signal) -> Vec<f64> {
    let na = policy.n_actions();
    let scores = policy.score_table();
    let adv = &eval.signal(g).advantage;
    let mut grad = vec![0.0; policy.dim()];
    for (sa, score) in scores.iter().enumerate() {
        let (s, a) = (sa / na, sa % na);
        let w = eval.nu_pi[s][a] * adv[s][a];
        for (o, x) in grad.iter_mut().zip(score) {
            *o += w * x;
        }
    }
    grad
}

fn fisher_from(eval: &ExactEvaluation, policy: &PolicyParams) -> DMatrix<f64> {
    let na = policy.n_actions();
    let d = policy.dim();
    let mut f = DMatrix::zeros(d, d);
    for (sa, score) in policy.score_table().iter().enumerate() {
        let w = eval.nu_pi[sa / na][sa % na];
        if w == 0.0 {
            continue;
        }
        let v = DVector::from_column_slice(score);
        f.ger(w, &v, &v, 1.0);
    }
    f
}

/// `F(theta) = sum nu(s,a) score score^T`.
pub fn exact_fisher(model: &CmdpModel, policy: &PolicyParams) -> Result<DMatrix<f64>> {
    let eval = evaluate_exact(model, policy)?;
    Ok(fisher_from(&eval, policy))
}

/// Minimum-norm solution of `F w = grad` by eigen-decomposition, discarding
/// eigenvalues below `PINV_CUTOFF * lambda_max`.
pub fn solve_fisher(fisher: &DMatrix<f64>, grad: &[f64]) -> Result<Vec<f64>> {
    let d = fisher.nrows();
    if grad.len() != d {
        return Err(Error::Dimension {
            what: "gradient",
            expected: d,
            got: grad.len(),
        });
    }
    let rhs = DVector::from_column_slice(grad);
    let eig = SymmetricEigen::new(fisher.clone());
    let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let mut omega = DVector::zeros(d);
    if lmax > 0.0 {
        for (k, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam > PINV_CUTOFF * lmax {
                let u = eig.eigenvectors.column(k);
                omega += u * (u.dot(&rhs) / lam);
            }
        }
    }
    let residual = (fisher * &omega - &rhs).norm();
    if residual > 1e-8 {
        return Err(Error::OutsideFisherRange { residual });
    }
    Ok(omega.iter().copied().collect())
}

/// Exact natural gradient direction `F^+ grad J_g`.
pub fn exact_npg(model: &CmdpModel, policy: &PolicyParams, g: Signal) -> Result<Vec<f64>> {
    let eval = evaluate_exact(model, policy)?;
    npg_from(&eval, policy, g)
}

pub fn npg_from(eval: &ExactEvaluation, policy: &PolicyParams, g: Signal) -> Result<Vec<f64>> {
    let fisher = fisher_from(eval, policy);
    solve_fisher(&fisher, &gradient_from(eval, policy, g))
}

pub fn gradient_from_eval(eval: &ExactEvaluation, policy: &PolicyParams, g: Signal) -> Vec<f64> {
    gradient_from(eval, policy, g)
}

pub fn fisher_from_eval(eval: &ExactEvaluation, policy: &PolicyParams) -> DMatrix<f64> {
    fisher_from(eval, policy)
}

/// Smallest eigenvalue above the pseudo-inverse cutoff; a proxy for the
/// Fisher lower bound `mu`.
pub fn fisher_min_positive_eigenvalue(fisher: &DMatrix<f64>) -> Option<f64> {
    fisher_spectrum(fisher).map(|(lo, _)| lo)
}

/// `(smallest positive, largest)` eigenvalue; `None` for a zero matrix.
pub fn fisher_spectrum(fisher: &DMatrix<f64>) -> Option<(f64, f64)> {
    let eig = SymmetricEigen::new(fisher.clone());
    let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let lo = eig
        .eigenvalues
        .iter()
        .copied()
        .filter(|&l| l > PINV_CUTOFF * lmax && lmax > 0.0)
        .fold(None, |acc: Option<f64>, l| Some(acc.map_or(l, |a| a.min(l))))?;
    Some((lo, lmax))
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstrainedOptimum {
    pub j_r_star: f64,
    pub j_c: f64,
    /// `[s][a]`
    pub nu_star: Vec<Vec<f64>>,
}

fn occupancy_lp(model: &CmdpModel, objective: Signal, with_cost_constraint: Option<f64>) -> simplex::StandardLp {
    let (ns, na) = (model.n_states(), model.n_actions());
    let n_nu = ns * na;
    let n_vars = n_nu + usize::from(with_cost_constraint.is_some());
    let mut a_eq = Vec::new();
    let mut b_eq = Vec::new();
    let mut names = Vec::new();
    for s2 in 0..ns {
        let mut row = vec![0.0; n_vars];
        for a in 0..na {
            row[s2 * na + a] += 1.0;
        }
        for s in 0..ns {
            for a in 0..na {
                row[s * na + a] -= model.prob(s, a, s2);
            }
        }
        a_eq.push(row);
        b_eq.push(0.0);
        names.push(format!("flow balance at state {s2}"));
    }
    let mut row = vec![0.0; n_vars];
    for v in row.iter_mut().take(n_nu) {
        *v = 1.0;
    }
    a_eq.push(row);
    b_eq.push(1.0);
    names.push("normalization sum nu = 1".into());
    if let Some(threshold) = with_cost_constraint {
        // sum nu c - slack = threshold
        let mut row = vec![0.0; n_vars];
        for s in 0..ns {
            for a in 0..na {
                row[s * na + a] = model.cost(s, a);
            }
        }
        row[n_nu] = -1.0;
        a_eq.push(row);
        b_eq.push(threshold);
        names.push("average cost J_c >= 0".into());
    }
    let mut c = vec![0.0; n_vars];
    for s in 0..ns {
        for a in 0..na {
            c[s * na + a] = -model.signal(objective, s, a);
        }
    }
    simplex::StandardLp {
        objective: c,
        a_eq,
        b_eq,
        row_names: names,
    }
}

/// Largest achievable average cost over all stationary policies.
pub fn max_average_cost(model: &CmdpModel) -> Result<f64> {
    let sol = simplex::solve(&occupancy_lp(model, Signal::Cost, None))?;
    Ok(-sol.objective)
}

/// Solves `max sum nu r` over occupancy measures with `sum nu c >= 0`.
pub fn solve_constrained_optimum(model: &CmdpModel) -> Result<ConstrainedOptimum> {
    let best_cost = max_average_cost(model)?;
    if best_cost < -1e-10 {
        return Err(Error::Infeasible {
            constraint: format!(
                "average cost J_c >= 0 cannot hold: best achievable J_c = {best_cost:.6}"
            ),
        });
    }
    let threshold = best_cost.min(0.0);
    let sol = simplex::solve(&occupancy_lp(model, Signal::Reward, Some(threshold)))?;
    let na = model.n_actions();
    let nu_star: Vec<Vec<f64>> = (0..model.n_states())
        .map(|s| sol.x[s * na..(s + 1) * na].to_vec())
        .collect();
    let j_c = (0..model.n_states())
        .flat_map(|s| (0..na).map(move |a| (s, a)))
        .map(|(s, a)| nu_star[s][a] * model.cost(s, a))
        .sum();
    Ok(ConstrainedOptimum {
        j_r_star: -sol.objective,
        j_c,
        nu_star,
    })
}

/// `pi(a|s) = nu(s,a) / sum_b nu(s,b)`, uniform where the state has no mass.
pub fn policy_from_occupancy(nu: &[Vec<f64>]) -> PolicyTable {
    let ns = nu.len();
    let na = nu.first().map_or(0, Vec::len);
    let mut probs = Vec::with_capacity(ns * na);
    for row in nu {
        let total: f64 = row.iter().sum();
        if total > 1e-14 {
            probs.extend(row.iter().map(|x| x / total));
        } else {
            probs.extend(std::iter::repeat_n(1.0 / na as f64, na));
        }
    }
    PolicyTable {
        n_states: ns,
        n_actions: na,
        probs,
    }
}

/// Unconstrained optimum of signal `g` by average-reward policy iteration.
/// Returns the optimal value and a deterministic optimal policy.
pub fn optimal_unconstrained(model: &CmdpModel, g: Signal) -> Result<(f64, Vec<usize>)> {
    let (ns, na) = (model.n_states(), model.n_actions());
    let mut actions = vec![0usize; ns];
    for _ in 0..10_000 {
        let table = PolicyTable::deterministic(ns, na, &actions)?;
        let eval = evaluate_table(model, &table)?;
        let vals = eval.signal(g);
        let mut changed = false;
        for s in 0..ns {
            let current = vals.q[s][actions[s]];
            let (best, best_q) = (0..na)
                .map(|a| (a, vals.q[s][a]))
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .unwrap_or((0, current));
            if best_q > current + 1e-12 {
                actions[s] = best;
                changed = true;
            }
        }
        if !changed {
            return Ok((vals.j, actions));
        }
    }
    Err(Error::InvalidArgument("policy iteration did not terminate".into()))
}

fn tv_to_stationary(pt: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    (0..pt.nrows())
        .map(|s| 0.5 * (0..pt.ncols()).map(|j| (pt[(s, j)] - d[j]).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Smallest `t >= 1` with `max_s TV(P^t(s, .), d) <= 1/4`.
///
/// Doubles `t` by squaring until the bound holds, then binary-searches the
/// last doubling interval using the stored dyadic powers. Relies on the TV
/// distance being nonincreasing in `t`.
pub fn mixing_time_from_matrix(p: &DMatrix<f64>, cap: u64) -> Result<u64> {
    let d = stationary_from_matrix(p)?;
    let ok = |m: &DMatrix<f64>| tv_to_stationary(m, &d) <= 0.25;
    if ok(p) {
        return Ok(1);
    }
    let mut powers = vec![p.clone()];
    loop {
        let last = powers.last().expect("nonempty");
        let t = 1u64 << (powers.len() - 1);
        if t >= cap {
            return Err(Error::MixingCapExceeded { cap });
        }
        let next = last * last;
        if ok(&next) {
            // answer lies in (t, 2t]
            let mut lo = t;
            let mut m_lo = last.clone();
            for j in (0..powers.len() - 1).rev() {
                let cand = &m_lo * &powers[j];
                if !ok(&cand) {
                    lo += 1u64 << j;
                    m_lo = cand;
                }
            }
            let answer = lo + 1;
            return if answer > cap {
                Err(Error::MixingCapExceeded { cap })
            } else {
                Ok(answer)
            };
        }
        powers.push(next);
    }
}

pub fn mixing_time(model: &CmdpModel, policy: &PolicyParams) -> Result<u64> {
    mixing_time_from_matrix(&policy_matrix(model, &policy.table()), MIXING_CAP)
}

/// Init-anchored critic quantities per state-action pair, `[s * A + a]`:
/// the gradients `grad_zeta Q(phi(s,a); zeta_0)` and values `Q(phi(s,a); zeta_0)`.
#[derive(Debug, Clone)]
pub struct CriticLinearization {
    pub grads: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

/// Population matrix `A`, vector `b` of the linearized critic update and
/// the minimum-norm least-squares solution of `A xi = b`.
#[derive(Debug, Clone)]
pub struct LinearizedCriticSystem {
    pub a_mat: DMatrix<f64>,
    pub b_vec: DVector<f64>,
    pub xi_star: DVector<f64>,
    pub c_gamma: f64,
}

impl LinearizedCriticSystem {
    /// `||A^T (A xi* - b)||`, zero at a least-squares solution.
    pub fn normal_residual(&self) -> f64 {
        (self.a_mat.transpose() * (&self.a_mat * &self.xi_star - &self.b_vec)).norm()
    }
}

/// Exact expectation of the single-transition critic matrices over
/// `(s,a) ~ nu`, `s' ~ P(.|s,a)`, `a' ~ pi(.|s')`.
///
/// The parameter vector is `xi = [eta, zeta - zeta_0]`.
pub fn linearized_critic_system(
    model: &CmdpModel,
    policy: &PolicyParams,
    g: Signal,
    lin: &CriticLinearization,
    c_gamma: f64,
) -> Result<LinearizedCriticSystem> {
    let (ns, na) = (model.n_states(), model.n_actions());
    if lin.grads.len() != ns * na || lin.values.len() != ns * na {
        return Err(Error::Dimension {
            what: "critic linearization",
            expected: ns * na,
            got: lin.grads.len().min(lin.values.len()),
        });
    }
    let p = lin.grads.first().map_or(0, Vec::len);
    let table = policy.table();
    let eval = evaluate_table(model, &table)?;
    let dim = 1 + p;
    let mut a_mat = DMatrix::zeros(dim, dim);
    let mut b_vec = DVector::zeros(dim);
    a_mat[(0, 0)] = c_gamma;
    b_vec[0] = c_gamma * eval.signal(g).j;

    for s in 0..ns {
        for a in 0..na {
            let w = eval.nu_pi[s][a];
            if w == 0.0 {
                continue;
            }
            let psi = DVector::from_column_slice(&lin.grads[s * na + a]);
            let mut psi_next = DVector::zeros(p);
            let mut q_next = 0.0;
            for (s2, &ps) in model.row(s, a).iter().enumerate() {
                for a2 in 0..na {
                    let wn = ps * table.prob(s2, a2);
                    if wn == 0.0 {
                        continue;
                    }
                    psi_next.axpy(wn, &DVector::from_column_slice(&lin.grads[s2 * na + a2]), 1.0);
                    q_next += wn * lin.values[s2 * na + a2];
                }
            }
            let diff = &psi - &psi_next;
            let mut block = a_mat.view_mut((1, 1), (p, p));
            block.ger(w, &psi, &diff, 1.0);
            let mut col = a_mat.view_mut((1, 0), (p, 1));
            col.column_mut(0).axpy(w, &psi, 1.0);
            let coeff = model.signal(g, s, a) - lin.values[s * na + a] + q_next;
            let mut tail = b_vec.rows_mut(1, p);
            tail.axpy(w * coeff, &psi, 1.0);
        }
    }
    let svd = a_mat.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let xi_star = svd
        .solve(&b_vec, 1e-12 * smax.max(f64::MIN_POSITIVE))
        .map_err(|_| Error::Singular("linearized critic system"))?;
    Ok(LinearizedCriticSystem {
        a_mat,
        b_vec,
        xi_star,
        c_gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{garnet, ConstraintMode};

    fn chain_model(p: &[f64], n: usize) -> CmdpModel {
        CmdpModel::new(
            n,
            1,
            p.to_vec(),
            vec![0.5; n],
            vec![0.0; n],
            vec![1.0 / n as f64; n],
        )
        .unwrap()
    }

    #[test]
    fn stationary_two_state() {
        let m = chain_model(&[0.9, 0.1, 0.5, 0.5], 2);
        let d = stationary_distribution(&m, &PolicyParams::tabular(2, 1)).unwrap();
        assert!((d[0] - 5.0 / 6.0).abs() < 1e-14);
        assert!((d[1] - 1.0 / 6.0).abs() < 1e-14);
    }

    #[test]
    fn doubly_stochastic_is_uniform() {
        let m = chain_model(&[0.2, 0.5, 0.3, 0.3, 0.2, 0.5, 0.5, 0.3, 0.2], 3);
        let d = stationary_distribution(&m, &PolicyParams::tabular(3, 1)).unwrap();
        for x in d {
            assert!((x - 1.0 / 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn periodic_chain_is_rejected() {
        let m = chain_model(&[0.0, 1.0, 1.0, 0.0], 2);
        let err = stationary_distribution(&m, &PolicyParams::tabular(2, 1)).unwrap_err();
        assert!(matches!(err, Error::Periodic { period: 2, .. }));
    }

    #[test]
    fn reducible_chain_names_classes() {
        let m = chain_model(&[1.0, 0.0, 0.0, 1.0], 2);
        match stationary_distribution(&m, &PolicyParams::tabular(2, 1)) {
            Err(Error::NotIrreducible { classes }) => assert_eq!(classes, vec![vec![0], vec![1]]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_state_bellman_by_hand() {
        let m = CmdpModel::new(1, 2, vec![1.0, 1.0], vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0]).unwrap();
        let eval = evaluate_exact(&m, &PolicyParams::tabular(1, 2)).unwrap();
        assert!((eval.reward.j - 0.5).abs() < 1e-15);
        assert!((eval.reward.q[0][0] - 0.5).abs() < 1e-15);
        assert!((eval.reward.q[0][1] + 0.5).abs() < 1e-15);
        assert!(eval.reward.v[0].abs() < 1e-15);
    }

    #[test]
    fn constant_signal_has_zero_q() {
        let m = garnet(4, 3, 2, ConstraintMode::Uniform, 3).unwrap();
        let m = CmdpModel::new(4, 3, (0..4 * 3).flat_map(|sa| m.row(sa / 3, sa % 3).to_vec()).collect(), vec![0.7; 12], vec![-0.2; 12], vec![0.25; 4]).unwrap();
        let eval = evaluate_exact(&m, &PolicyParams::tabular(4, 3)).unwrap();
        assert!((eval.reward.j - 0.7).abs() < 1e-14);
        assert!((eval.cost.j + 0.2).abs() < 1e-14);
        for row in eval.reward.q.iter().chain(&eval.cost.q) {
            for q in row {
                assert!(q.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_state_gradient_closed_form() {
        let m = CmdpModel::new(1, 2, vec![1.0, 1.0], vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0]).unwrap();
        let g = exact_policy_gradient(&m, &PolicyParams::tabular(1, 2), Signal::Reward).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-15);
        assert!((g[1] + 0.25).abs() < 1e-15);
        let f = exact_fisher(&m, &PolicyParams::tabular(1, 2)).unwrap();
        let want = [[0.25, -0.25], [-0.25, 0.25]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((f[(i, j)] - want[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_reward_has_zero_gradient() {
        let m = CmdpModel::new(2, 2, vec![0.5; 8], vec![0.3; 4], vec![0.0; 4], vec![0.5, 0.5]).unwrap();
        let pol = PolicyParams::tabular(2, 2).with_theta(vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let g = exact_policy_gradient(&m, &pol, Signal::Reward).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-14));
        let w = exact_npg(&m, &pol, Signal::Reward).unwrap();
        assert!(w.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn tabular_fisher_kills_per_state_constants() {
        let m = garnet(3, 3, 2, ConstraintMode::Uniform, 8).unwrap();
        let pol = PolicyParams::tabular(3, 3).with_theta(vec![0.1, 0.5, -0.3, 1.0, 0.0, 0.2, -0.4, 0.9, 0.3]).unwrap();
        let f = exact_fisher(&m, &pol).unwrap();
        for s in 0..3 {
            let mut ones = DVector::zeros(9);
            for a in 0..3 {
                ones[s * 3 + a] = 1.0;
            }
            assert!((&f * ones).norm() < 1e-14);
        }
        let eig = SymmetricEigen::new(f);
        assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-12));
    }

    #[test]
    fn identity_fisher_returns_gradient() {
        let f = DMatrix::identity(3, 3);
        let w = solve_fisher(&f, &[0.1, -2.0, 3.5]).unwrap();
        assert!((w[0] - 0.1).abs() < 1e-15 && (w[1] + 2.0).abs() < 1e-15 && (w[2] - 3.5).abs() < 1e-15);
        assert!(solve_fisher(&f, &[0.0; 3]).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn gradient_outside_range_is_an_error() {
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(solve_fisher(&f, &[1.0, 1.0]), Err(Error::OutsideFisherRange { .. })));
    }

    #[test]
    fn lp_single_state_by_hand() {
        let m = CmdpModel::new(1, 2, vec![1.0, 1.0], vec![1.0, 0.0], vec![-1.0, 1.0], vec![1.0]).unwrap();
        let opt = solve_constrained_optimum(&m).unwrap();
        assert!((opt.j_r_star - 0.5).abs() < 1e-12);
        assert!((opt.nu_star[0][0] - 0.5).abs() < 1e-12);
        assert!((opt.nu_star[0][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lp_reports_unsatisfiable_constraint() {
        let m = CmdpModel::new(1, 2, vec![1.0, 1.0], vec![1.0, 0.0], vec![-1.0, -1.0], vec![1.0]).unwrap();
        match solve_constrained_optimum(&m) {
            Err(Error::Infeasible { constraint }) => assert!(constraint.contains("J_c")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lp_matches_policy_iteration_when_slack() {
        for seed in 0..10 {
            let m = garnet(5, 3, 3, ConstraintMode::Uniform, seed).unwrap();
            let m = m.with_cost(vec![1.0; 15]).unwrap();
            let (j_pi, _) = optimal_unconstrained(&m, Signal::Reward).unwrap();
            let opt = solve_constrained_optimum(&m).unwrap();
            assert!((j_pi - opt.j_r_star).abs() < 1e-9, "seed {seed}: {j_pi} vs {}", opt.j_r_star);
        }
    }

    #[test]
    fn mixing_time_of_single_state_is_one() {
        let m = chain_model(&[1.0], 1);
        assert_eq!(mixing_time(&m, &PolicyParams::tabular(1, 1)).unwrap(), 1);
    }

    #[test]
    fn mixing_time_near_reducible_exceeds_cap() {
        let eps = 1e-7;
        let m = chain_model(&[1.0 - eps, eps, eps, 1.0 - eps], 2);
        assert!(matches!(
            mixing_time(&m, &PolicyParams::tabular(2, 1)),
            Err(Error::MixingCapExceeded { .. })
        ));
    }
}
