use nalgebra::{DMatrix, DVector};
use pdnac_core::cmdp::{garnet, CmdpModel, ConstraintMode, PolicyParams, PolicyTable, Signal};
use pdnac_core::oracle::{
    evaluate_exact, evaluate_table, exact_fisher, exact_npg, exact_policy_gradient, linearized_critic_system,
    mixing_time, policy_matrix, solve_constrained_optimum, stationary_distribution, CriticLinearization,
};
use pdnac_core::rng::seeded;
use pdnac_core::Error;
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::StandardNormal;

fn random_policy(ns: usize, na: usize, seed: u64) -> PolicyParams {
    let mut rng = seeded(seed);
    let theta = (0..ns * na).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
    PolicyParams::tabular(ns, na).with_theta(theta).unwrap()
}

fn j_of(model: &CmdpModel, pol: &PolicyParams, g: Signal) -> f64 {
    evaluate_exact(model, pol).unwrap().signal(g).j
}

/// Best `J_r` over deterministic policies with `J_c >= 0`.
fn enumerate_deterministic(model: &CmdpModel) -> Option<f64> {
    let (ns, na) = (model.n_states(), model.n_actions());
    let mut best: Option<f64> = None;
    for code in 0..na.pow(ns as u32) {
        let actions: Vec<usize> = (0..ns).map(|s| (code / na.pow(s as u32)) % na).collect();
        let eval = evaluate_table(model, &PolicyTable::deterministic(ns, na, &actions).unwrap()).unwrap();
        if eval.cost.j >= 0.0 {
            best = Some(best.map_or(eval.reward.j, |b| b.max(eval.reward.j)));
        }
    }
    best
}

fn tv_after(p: &DMatrix<f64>, d: &[f64], t: u64) -> f64 {
    let mut m = DMatrix::identity(p.nrows(), p.ncols());
    for _ in 0..t {
        m = &m * p;
    }
    (0..m.nrows())
        .map(|s| 0.5 * (0..m.ncols()).map(|j| (m[(s, j)] - d[j]).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn evaluation_invariants_hold(ns in 1usize..8, na in 1usize..4, seed in any::<u64>()) {
        let model = garnet(ns, na, 1 + seed as usize % ns, ConstraintMode::Uniform, seed).unwrap();
        let pol = random_policy(ns, na, seed ^ 0x55);
        let eval = evaluate_exact(&model, &pol).unwrap();
        prop_assert!(eval.check_invariants(&model, &pol.table(), 1e-10).is_ok());
    }

    #[test]
    fn gradient_matches_central_differences(ns in 1usize..5, na in 2usize..4, seed in any::<u64>()) {
        let model = garnet(ns, na, 1 + seed as usize % ns, ConstraintMode::Uniform, seed).unwrap();
        let pol = random_policy(ns, na, seed.wrapping_add(1));
        let h = 1e-5;
        for g in [Signal::Reward, Signal::Cost] {
            let grad = exact_policy_gradient(&model, &pol, g).unwrap();
            for (i, gi) in grad.iter().enumerate() {
                let mut up = pol.theta().to_vec();
                let mut dn = up.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (j_of(&model, &pol.with_theta(up).unwrap(), g)
                    - j_of(&model, &pol.with_theta(dn).unwrap(), g)) / (2.0 * h);
                prop_assert!((fd - gi).abs() < 1e-6, "coord {i}: {gi} vs {fd}");
            }
        }
    }

    #[test]
    fn fisher_is_psd_and_npg_solves_it(ns in 1usize..6, na in 2usize..4, seed in any::<u64>()) {
        let model = garnet(ns, na, 1 + seed as usize % ns, ConstraintMode::Uniform, seed).unwrap();
        let pol = random_policy(ns, na, seed.wrapping_mul(3));
        let fisher = exact_fisher(&model, &pol).unwrap();
        let eig = fisher.clone().symmetric_eigen();
        prop_assert!(eig.eigenvalues.iter().all(|l| *l >= -1e-12));
        // per-state constants are in the kernel
        for s in 0..ns {
            let mut v = DVector::zeros(ns * na);
            for a in 0..na {
                v[s * na + a] = 1.0;
            }
            prop_assert!((&fisher * v).norm() < 1e-12);
        }
        for g in [Signal::Reward, Signal::Cost] {
            let grad = DVector::from_vec(exact_policy_gradient(&model, &pol, g).unwrap());
            let omega = DVector::from_vec(exact_npg(&model, &pol, g).unwrap());
            prop_assert!((&fisher * omega - grad).norm() <= 1e-8);
        }
    }

    #[test]
    fn lp_dominates_feasible_deterministic_policies(
        shape in prop::sample::select(vec![(1usize, 2usize), (2, 2), (2, 3), (2, 4), (4, 2), (1, 8)]),
        seed in any::<u64>(),
    ) {
        let (ns, na) = shape;
        let model = garnet(ns, na, 1 + seed as usize % ns, ConstraintMode::Slater { margin: 0.2 }, seed).unwrap();
        let opt = solve_constrained_optimum(&model).unwrap();
        prop_assert!(opt.j_c >= -1e-9);
        if let Some(best) = enumerate_deterministic(&model) {
            prop_assert!(opt.j_r_star >= best - 1e-9, "{} < {best}", opt.j_r_star);
        }
    }

    #[test]
    fn mixing_time_is_certified(ns in 2usize..6, seed in any::<u64>()) {
        let model = garnet(ns, 2, 1, ConstraintMode::Uniform, seed).unwrap();
        let pol = random_policy(ns, 2, seed);
        let t = mixing_time(&model, &pol).unwrap();
        let p = policy_matrix(&model, &pol.table());
        let d = stationary_distribution(&model, &pol).unwrap();
        prop_assert!(tv_after(&p, &d, t) <= 0.25);
        if t > 1 {
            prop_assert!(tv_after(&p, &d, t - 1) > 0.25);
        }
    }
}

#[test]
fn mixing_time_of_two_state_chain_matches_power_iteration() {
    let model = CmdpModel::new(2, 1, vec![0.9, 0.1, 0.5, 0.5], vec![0.0; 2], vec![0.0; 2], vec![0.5, 0.5]).unwrap();
    let pol = PolicyParams::tabular(2, 1);
    let p = policy_matrix(&model, &pol.table());
    let d = [5.0 / 6.0, 1.0 / 6.0];
    let first = (1..100).find(|&t| tv_after(&p, &d, t) <= 0.25).unwrap();
    assert_eq!(mixing_time(&model, &pol).unwrap(), first);
}

#[test]
fn unsatisfiable_constraint_is_reported() {
    let model = CmdpModel::new(1, 2, vec![1.0, 1.0], vec![1.0, 0.0], vec![-1.0, -1.0], vec![1.0]).unwrap();
    assert!(matches!(solve_constrained_optimum(&model), Err(Error::Infeasible { .. })));
}

fn random_linearization(ns: usize, na: usize, p: usize, seed: u64) -> CriticLinearization {
    let mut rng = seeded(seed);
    CriticLinearization {
        grads: (0..ns * na)
            .map(|_| (0..p).map(|_| rng.sample(StandardNormal)).collect())
            .collect(),
        values: (0..ns * na).map(|_| rng.sample(StandardNormal)).collect(),
    }
}

#[test]
fn linearized_system_first_row_fixes_eta_at_j() {
    let model = garnet(4, 2, 2, ConstraintMode::Uniform, 21).unwrap();
    let pol = random_policy(4, 2, 3);
    let lin = random_linearization(4, 2, 5, 8);
    for g in [Signal::Reward, Signal::Cost] {
        let sys = linearized_critic_system(&model, &pol, g, &lin, 0.7).unwrap();
        assert_eq!(sys.a_mat[(0, 0)], 0.7);
        assert!((1..sys.a_mat.ncols()).all(|j| sys.a_mat[(0, j)] == 0.0));
        let j = j_of(&model, &pol, g);
        assert!((sys.b_vec[0] - 0.7 * j).abs() < 1e-12);
        assert!((sys.xi_star[0] - j).abs() < 1e-9);
        assert!(sys.normal_residual() < 1e-9);
    }
}

#[test]
fn constant_feature_direction_is_in_the_kernel() {
    let (ns, na) = (5, 2);
    let model = garnet(ns, na, 3, ConstraintMode::Uniform, 2).unwrap();
    let pol = random_policy(ns, na, 4);
    let mut lin = random_linearization(ns, na, 4, 6);
    // extra coordinate equal to 1 for every pair, so psi' e = 1 everywhere
    for g in lin.grads.iter_mut() {
        g.push(1.0);
    }
    let sys = linearized_critic_system(&model, &pol, Signal::Reward, &lin, 1.0).unwrap();
    let p = lin.grads[0].len();
    let block = sys.a_mat.view((1, 1), (p, p));
    let mut e = DVector::zeros(p);
    e[p - 1] = 1.0;
    assert!((block * e).norm() < 1e-12);
}

#[test]
fn quadratic_form_is_positive_off_the_kernel() {
    let (ns, na) = (4, 2);
    let model = garnet(ns, na, 2, ConstraintMode::Uniform, 13).unwrap();
    let pol = random_policy(ns, na, 5);
    let mut lin = random_linearization(ns, na, 6, 1);
    for g in lin.grads.iter_mut() {
        g.push(1.0);
    }
    let sys = linearized_critic_system(&model, &pol, Signal::Cost, &lin, 1e3).unwrap();
    let a = &sys.a_mat;
    let n = a.ncols();
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.unwrap();
    let smax = svd.singular_values.max();
    let kernel: Vec<DVector<f64>> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, s)| **s <= 1e-10 * smax)
        .map(|(i, _)| v_t.row(i).transpose())
        .collect();
    assert!(!kernel.is_empty());
    let mut rng = seeded(77);
    for _ in 0..200 {
        let mut xi = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        for k in &kernel {
            let c = k.dot(&xi);
            xi.axpy(-c, k, 1.0);
        }
        let form = xi.dot(&(a * &xi));
        assert!(form > 1e-10 * xi.norm_squared(), "{form}");
    }
}
