use std::sync::Arc;

use nalgebra::DVector;
use pdnac_core::cmdp::{garnet, CmdpModel, ConstraintMode, PolicyFeatures, PolicyParams, Signal, Transition};
use pdnac_core::npg::{
    npg_grad_sample, npg_inner_loop, AdvantageEstimator, AdvantageSource, CriticAdvantage, ExactAdvantage,
    NpgSchedule,
};
use pdnac_core::oracle::{evaluate_exact, exact_fisher, exact_npg, exact_policy_gradient};
use pdnac_core::rng::{sample_categorical, seeded};
use pdnac_core::sampler::TrajectoryCursor;
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::StandardNormal;

fn pair(s: usize, a: usize) -> Transition {
    Transition {
        s,
        a,
        s_next: 0,
        a_next: Some(0),
        r_val: 0.0,
        c_val: 0.0,
    }
}

fn policy(ns: usize, na: usize, seed: u64) -> PolicyParams {
    let mut rng = seeded(seed);
    PolicyParams::tabular(ns, na)
        .with_theta((0..ns * na).map(|_| rng.sample(StandardNormal)).collect())
        .unwrap()
}

struct Fixed(f64);

impl AdvantageSource for Fixed {
    fn advantage(&self, _: &Transition) -> pdnac_core::Result<f64> {
        Ok(self.0)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sample_gradient_is_affine_in_omega(
        seed in any::<u64>(), alpha in -5.0f64..5.0, adv in -3.0f64..3.0, s in 0usize..3, a in 0usize..2,
    ) {
        let pol = policy(3, 2, seed);
        let mut rng = seeded(seed ^ 1);
        let omega: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
        let scaled: Vec<f64> = omega.iter().map(|w| alpha * w).collect();
        let src = Fixed(adv);
        let z = pair(s, a);
        let g0 = npg_grad_sample(&pol, &[0.0; 6], &src, &z).unwrap();
        let g1 = npg_grad_sample(&pol, &omega, &src, &z).unwrap();
        let ga = npg_grad_sample(&pol, &scaled, &src, &z).unwrap();
        for i in 0..6 {
            let want = alpha * (g1[i] - g0[i]);
            prop_assert!((ga[i] - g0[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
        // rank-one Fisher term: omega' (score score') omega >= 0
        let quad: f64 = omega.iter().zip(g1.iter().zip(&g0)).map(|(w, (x, y))| w * (x - y)).sum();
        prop_assert!(quad >= 0.0);
    }
}

#[test]
fn population_mean_is_the_npg_objective_gradient() {
    let (ns, na) = (3, 2);
    let model = garnet(ns, na, 2, ConstraintMode::Uniform, 5).unwrap();
    let pol = policy(ns, na, 2);
    let eval = evaluate_exact(&model, &pol).unwrap();
    let fisher = exact_fisher(&model, &pol).unwrap();
    let omega = DVector::from_vec(vec![0.3, -1.0, 0.5, 0.2, 0.0, 1.5]);
    for g in [Signal::Reward, Signal::Cost] {
        let src = ExactAdvantage::new(&eval, g);
        let mut mean = DVector::zeros(ns * na);
        for s in 0..ns {
            for a in 0..na {
                let sample = npg_grad_sample(&pol, omega.as_slice(), &src, &pair(s, a)).unwrap();
                mean.axpy(eval.nu_pi[s][a], &DVector::from_vec(sample), 1.0);
            }
        }
        let grad = DVector::from_vec(exact_policy_gradient(&model, &pol, g).unwrap());
        let want = &fisher * &omega - grad;
        assert!((mean - want).norm() < 1e-8);
    }
}

#[test]
fn perfect_td_critic_has_zero_mean_advantage() {
    let model = CmdpModel::new(1, 2, vec![1.0, 1.0], vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0]).unwrap();
    let pol = PolicyParams::tabular(1, 2);
    let eval = evaluate_exact(&model, &pol).unwrap();
    let q: Vec<f64> = eval.reward.q[0].clone();
    assert!((eval.reward.j - 0.5).abs() < 1e-12);
    for est in [AdvantageEstimator::TdQ, AdvantageEstimator::TdV] {
        let src = CriticAdvantage::from_values(q.clone(), eval.reward.j, Signal::Reward, &pol, est);
        let mut mean = 0.0;
        for a in 0..2 {
            for a2 in 0..2 {
                let z = Transition {
                    s: 0,
                    a,
                    s_next: 0,
                    a_next: Some(a2),
                    r_val: model.reward(0, a),
                    c_val: 0.0,
                };
                mean += 0.25 * src.advantage(&z).unwrap();
            }
        }
        assert!(mean.abs() < 1e-12, "{est:?}: {mean}");
    }
}

#[test]
fn state_value_form_recovers_the_advantage_in_expectation() {
    let (ns, na) = (3, 2);
    let model = garnet(ns, na, 3, ConstraintMode::Uniform, 8).unwrap();
    let pol = policy(ns, na, 4);
    let eval = evaluate_exact(&model, &pol).unwrap();
    let q: Vec<f64> = eval.cost.q.iter().flatten().map(|v| v + 2.5).collect();
    let src = CriticAdvantage::from_values(q, eval.cost.j, Signal::Cost, &pol, AdvantageEstimator::TdV);
    for s in 0..ns {
        for a in 0..na {
            let mut mean = 0.0;
            for s2 in 0..ns {
                let z = Transition {
                    s,
                    a,
                    s_next: s2,
                    a_next: Some(0),
                    r_val: model.reward(s, a),
                    c_val: model.cost(s, a),
                };
                mean += model.prob(s, a, s2) * src.advantage(&z).unwrap();
            }
            assert!((mean - eval.cost.advantage[s][a]).abs() < 1e-10);
        }
    }
}

#[test]
fn stationary_sampling_is_unbiased_at_the_solution() {
    // fewer features than pairs, so samples at the solution stay noisy
    let (ns, na, d) = (3, 3, 4);
    let model = garnet(ns, na, 2, ConstraintMode::Uniform, 11).unwrap();
    let mut rng = seeded(6);
    let table = (0..ns * na * d).map(|_| rng.sample(StandardNormal)).collect();
    let features = PolicyFeatures::linear(ns, na, d, table).unwrap();
    let pol = PolicyParams::new(Arc::new(features), vec![0.5, -0.2, 0.1, 0.3]).unwrap();
    let eval = evaluate_exact(&model, &pol).unwrap();
    let src = ExactAdvantage::new(&eval, Signal::Reward);
    let omega_star = exact_npg(&model, &pol, Signal::Reward).unwrap();
    let nu: Vec<f64> = eval.nu_pi.iter().flatten().copied().collect();
    let n = 200_000;
    let mut rng = seeded(31);
    let mut check = |omega: &[f64]| {
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for _ in 0..n {
            let k = sample_categorical(&nu, &mut rng);
            let g = npg_grad_sample(&pol, omega, &src, &pair(k / na, k % na)).unwrap();
            for i in 0..d {
                sum[i] += g[i];
                sq[i] += g[i] * g[i];
            }
        }
        let mean: Vec<f64> = sum.iter().map(|v| v / n as f64).collect();
        let var: f64 = (0..d).map(|i| sq[i] / n as f64 - mean[i] * mean[i]).sum();
        let se = (var / n as f64).sqrt();
        (mean.iter().map(|v| v * v).sum::<f64>().sqrt(), se)
    };
    let (at_star, se) = check(&omega_star);
    assert!(at_star <= 3.0 * se, "{at_star} > 3 * {se}");
    let (at_zero, se0) = check(&vec![0.0; d]);
    assert!(at_zero > 3.0 * se0, "zero direction should be detectably off");
}

#[test]
fn zero_iterations_give_zero_direction() {
    let model = garnet(3, 2, 2, ConstraintMode::Uniform, 1).unwrap();
    let pol = PolicyParams::tabular(3, 2);
    let schedule = NpgSchedule {
        iterations: 0,
        gamma_omega: 0.1,
        t_max: 8,
    };
    let mut cursor = TrajectoryCursor::new(&model, seeded(0));
    let omega = npg_inner_loop(&pol, &Fixed(1.0), &model, &schedule, &mut cursor).unwrap();
    assert_eq!(omega, vec![0.0; 6]);
}

#[test]
fn inner_loop_approaches_the_exact_direction() {
    let (ns, na) = (3, 2);
    let model = garnet(ns, na, 3, ConstraintMode::Uniform, 3).unwrap();
    let pol = policy(ns, na, 9);
    let eval = evaluate_exact(&model, &pol).unwrap();
    let src = ExactAdvantage::new(&eval, Signal::Reward);
    let target = exact_npg(&model, &pol, Signal::Reward).unwrap();
    let err = |h: usize, seed: u64| {
        let schedule = NpgSchedule {
            iterations: h,
            gamma_omega: 0.05,
            t_max: 64,
        };
        let mut cursor = TrajectoryCursor::new(&model, seeded(seed));
        let omega = npg_inner_loop(&pol, &src, &model, &schedule, &mut cursor).unwrap();
        omega.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let mut short: Vec<f64> = (0..5).map(|s| err(50, s)).collect();
    let mut long: Vec<f64> = (0..5).map(|s| err(5000, s)).collect();
    short.sort_by(f64::total_cmp);
    long.sort_by(f64::total_cmp);
    assert!(long[2] < 0.5 * short[2], "{short:?} vs {long:?}");
    // tabular steps move along score directions only, so the iterate stays
    // orthogonal to per-state constants
    let schedule = NpgSchedule {
        iterations: 200,
        gamma_omega: 0.05,
        t_max: 64,
    };
    let mut cursor = TrajectoryCursor::new(&model, seeded(0));
    let omega = npg_inner_loop(&pol, &src, &model, &schedule, &mut cursor).unwrap();
    for s in 0..ns {
        assert!(omega[s * na..(s + 1) * na].iter().sum::<f64>().abs() < 1e-10);
    }
}
