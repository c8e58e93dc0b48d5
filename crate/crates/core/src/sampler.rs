//! Markovian trajectory sampling and the MLMC telescoping estimator.
//!
//! A single [`TrajectoryCursor`] is threaded through every inner loop of a
//! run; the chain is never reset between batches.

use rand::RngCore;

use crate::cmdp::{step_unchecked, CmdpModel, PolicyParams, PolicyTable, Transition};
use crate::rng::{sample_categorical, split, Rng, Stream};
use crate::{Error, Result};

/// Current position of the sampled chain plus its private generator.
#[derive(Debug, Clone)]
pub struct TrajectoryCursor {
    state: usize,
    rng: Rng,
    total_steps: u64,
}

impl TrajectoryCursor {
    /// Starts the chain at `s_0 ~ rho`.
    pub fn new(model: &CmdpModel, mut rng: Rng) -> Self {
        let state = sample_categorical(model.initial_dist(), &mut rng);
        Self {
            state,
            rng,
            total_steps: 0,
        }
    }

    pub fn at_state(model: &CmdpModel, state: usize, rng: Rng) -> Result<Self> {
        model.check_state(state)?;
        Ok(Self {
            state,
            rng,
            total_steps: 0,
        })
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn rng_mut(&mut self) -> &mut Rng {
        &mut self.rng
    }
}

/// `P ~ Geom(1/2)` on `{1, 2, ...}` with `P(p) = 2^-p`: one plus the number
/// of trailing zero bits of a uniform word.
pub fn draw_level(rng: &mut Rng) -> u32 {
    let word = rng.next_u64();
    if word != 0 {
        return 1 + word.trailing_zeros();
    }
    // 2^-64 event: keep counting through the next word
    64 + draw_level(rng)
}

/// Batch length `(2^p - 1) 1{2^p <= T_max} + 1`.
pub fn batch_length(level: u32, t_max: u64) -> usize {
    match 1u64.checked_shl(level) {
        Some(len) if level < 63 && len <= t_max => len as usize,
        _ => 1,
    }
}

/// `sum_p 2^-p * batch_length(p, T_max)`, computed exactly.
pub fn expected_batch_length(t_max: u64) -> f64 {
    let mut total = 0.0;
    let mut tail = 1.0;
    for p in 1..64u32 {
        let w = 0.5f64.powi(p as i32);
        let len = batch_length(p, t_max);
        total += w * len as f64;
        tail -= w;
        if len == 1 && p > 1 {
            break;
        }
    }
    total + tail.max(0.0)
}

/// Rolls `length` transitions forward from the cursor. Each transition
/// carries a fresh `a' ~ pi(.|s')`.
pub fn rollout(
    cursor: &mut TrajectoryCursor,
    model: &CmdpModel,
    policy: &PolicyParams,
    length: usize,
) -> Vec<Transition> {
    if length == 0 {
        return Vec::new();
    }
    rollout_table(cursor, model, &policy.table(), length)
}

pub(crate) fn rollout_table(
    cursor: &mut TrajectoryCursor,
    model: &CmdpModel,
    table: &PolicyTable,
    length: usize,
) -> Vec<Transition> {
    let mut out = Vec::with_capacity(length);
    for _ in 0..length {
        let s = cursor.state;
        let a = sample_categorical(table.row(s), &mut cursor.rng);
        let mut z = step_unchecked(model, s, a, &mut cursor.rng);
        z.a_next = Some(sample_categorical(table.row(z.s_next), &mut cursor.rng));
        cursor.state = z.s_next;
        out.push(z);
    }
    cursor.total_steps += length as u64;
    out
}

/// One geometric-level trajectory segment.
#[derive(Debug, Clone)]
pub struct MlmcBatch {
    pub level: u32,
    pub truncated: bool,
    pub transitions: Vec<Transition>,
}

impl MlmcBatch {
    /// Draws a level from the cursor's generator and rolls out the matching
    /// number of transitions.
    pub fn draw(
        cursor: &mut TrajectoryCursor,
        model: &CmdpModel,
        policy: &PolicyParams,
        t_max: u64,
    ) -> Self {
        Self::draw_with_table(cursor, model, &policy.table(), t_max)
    }

    pub(crate) fn draw_with_table(
        cursor: &mut TrajectoryCursor,
        model: &CmdpModel,
        table: &PolicyTable,
        t_max: u64,
    ) -> Self {
        let level = draw_level(&mut cursor.rng);
        let length = batch_length(level, t_max);
        let transitions = rollout_table(cursor, model, table, length);
        Self {
            level,
            truncated: length == 1,
            transitions,
        }
    }

    /// Assembles a batch from given transitions, checking the length rule.
    pub fn from_transitions(level: u32, t_max: u64, transitions: Vec<Transition>) -> Result<Self> {
        if level == 0 {
            return Err(Error::InvalidArgument("MLMC level must be >= 1".into()));
        }
        let want = batch_length(level, t_max);
        if transitions.len() != want {
            return Err(Error::Dimension {
                what: "MLMC batch length",
                expected: want,
                got: transitions.len(),
            });
        }
        Ok(Self {
            level,
            truncated: want == 1,
            transitions,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Per-transition coefficients `w_t` with
    /// `mlmc_combine(f) = sum_t w_t f(z_t)`.
    ///
    /// Untruncated: `v^0 + sum_{t<2^p} f - 2 sum_{t<2^(p-1)} f`, so the first
    /// half gets `-1`, the second half `+1`, and `t = 0` nets to zero.
    pub fn weights(&self) -> Vec<f64> {
        if self.truncated {
            return vec![1.0];
        }
        let half = self.transitions.len() / 2;
        let mut w: Vec<f64> = (0..self.transitions.len())
            .map(|t| if t < half { -1.0 } else { 1.0 })
            .collect();
        w[0] += 1.0;
        w
    }
}

/// `v^0 + 2^p (v^p - v^(p-1))` if the batch is untruncated, else `v^0`, where
/// `v^j` averages `stat` over the first `2^j` transitions.
pub fn mlmc_combine<F>(mut stat: F, batch: &MlmcBatch) -> Result<Vec<f64>>
where
    F: FnMut(&Transition) -> Vec<f64>,
{
    let first = batch
        .transitions
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty MLMC batch".into()))?;
    let v0 = stat(first);
    if batch.truncated {
        return Ok(v0);
    }
    let dim = v0.len();
    let n = batch.transitions.len();
    let half = n / 2;
    let mut sum_half = v0.clone();
    let mut sum_full = v0.clone();
    for (t, z) in batch.transitions.iter().enumerate().skip(1) {
        let v = stat(z);
        if v.len() != dim {
            return Err(Error::Dimension {
                what: "MLMC statistic",
                expected: dim,
                got: v.len(),
            });
        }
        for (acc, x) in sum_full.iter_mut().zip(&v) {
            *acc += x;
        }
        if t < half {
            for (acc, x) in sum_half.iter_mut().zip(&v) {
                *acc += x;
            }
        }
    }
    let scale = n as f64;
    Ok((0..dim)
        .map(|i| {
            let fine = sum_full[i] / scale;
            let coarse = sum_half[i] / half as f64;
            v0[i] + scale * (fine - coarse)
        })
        .collect())
}

/// Both sides of `E[g^MLMC] = E[g^floor(log2 T_max)]`, estimated by Monte
/// Carlo.
#[derive(Debug, Clone)]
pub struct MlmcIdentityReport {
    pub mlmc_mean: Vec<f64>,
    pub fixed_level_mean: Vec<f64>,
    /// Combined standard error of the difference of the two means.
    pub std_err: Vec<f64>,
    pub mean_batch_length: f64,
    pub n_trials: usize,
}

impl MlmcIdentityReport {
    /// Largest `|mlmc - fixed| / std_err` across coordinates (0 when both
    /// agree exactly).
    pub fn max_z_score(&self) -> f64 {
        self.mlmc_mean
            .iter()
            .zip(&self.fixed_level_mean)
            .zip(&self.std_err)
            .map(|((m, f), se)| {
                let diff = (m - f).abs();
                if diff == 0.0 {
                    0.0
                } else if *se == 0.0 {
                    f64::INFINITY
                } else {
                    diff / se
                }
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Default)]
struct Moments {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Moments {
    fn push(&mut self, x: &[f64]) {
        if self.sum.is_empty() {
            self.sum = vec![0.0; x.len()];
            self.sum_sq = vec![0.0; x.len()];
        }
        for i in 0..x.len() {
            self.sum[i] += x[i];
            self.sum_sq[i] += x[i] * x[i];
        }
    }

    fn mean_and_var_of_mean(&self, n: usize) -> (Vec<f64>, Vec<f64>) {
        let nf = n as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / nf).collect();
        let var: Vec<f64> = self
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq / nf - m * m).max(0.0) * nf / (nf - 1.0)) / nf)
            .collect();
        (mean, var)
    }
}

/// Runs `n_trials` independent pairs. Each trial starts two fresh cursors
/// from `s_0 ~ rho`: one produces an MLMC estimate, the other the plain
/// average over the first `2^floor(log2 T_max)` transitions.
pub fn mlmc_mean_identity_check<F>(
    mut stat: F,
    model: &CmdpModel,
    policy: &PolicyParams,
    t_max: u64,
    n_trials: usize,
    seed: u64,
) -> Result<MlmcIdentityReport>
where
    F: FnMut(&Transition) -> Vec<f64>,
{
    if n_trials < 1000 {
        return Err(Error::InvalidArgument(format!(
            "identity check needs at least 1000 trials, got {n_trials}"
        )));
    }
    if t_max < 2 {
        return Err(Error::InvalidArgument("T_max must be >= 2".into()));
    }
    let table = policy.table();
    let fixed_len = 1usize << (63 - t_max.leading_zeros());
    let mut mlmc = Moments::default();
    let mut fixed = Moments::default();
    let mut total_len = 0usize;
    let mut rng_mlmc = split(seed, Stream::Aux(0));
    let mut rng_fixed = split(seed, Stream::Aux(1));
    for _ in 0..n_trials {
        let s0 = sample_categorical(model.initial_dist(), &mut rng_mlmc);
        let mut cursor = TrajectoryCursor {
            state: s0,
            rng: rng_mlmc.clone(),
            total_steps: 0,
        };
        let batch = MlmcBatch::draw_with_table(&mut cursor, model, &table, t_max);
        rng_mlmc = cursor.rng;
        total_len += batch.len();
        mlmc.push(&mlmc_combine(&mut stat, &batch)?);

        let s0 = sample_categorical(model.initial_dist(), &mut rng_fixed);
        let mut cursor = TrajectoryCursor {
            state: s0,
            rng: rng_fixed.clone(),
            total_steps: 0,
        };
        let zs = rollout_table(&mut cursor, model, &table, fixed_len);
        rng_fixed = cursor.rng;
        let mut acc: Option<Vec<f64>> = None;
        for z in &zs {
            let v = stat(z);
            match acc.as_mut() {
                None => acc = Some(v),
                Some(a) => {
                    if a.len() != v.len() {
                        return Err(Error::Dimension {
                            what: "MLMC statistic",
                            expected: a.len(),
                            got: v.len(),
                        });
                    }
                    for (x, y) in a.iter_mut().zip(&v) {
                        *x += y;
                    }
                }
            }
        }
        let avg: Vec<f64> = acc
            .unwrap_or_default()
            .into_iter()
            .map(|x| x / fixed_len as f64)
            .collect();
        fixed.push(&avg);
    }
    let (mlmc_mean, var_m) = mlmc.mean_and_var_of_mean(n_trials);
    let (fixed_level_mean, var_f) = fixed.mean_and_var_of_mean(n_trials);
    let std_err = var_m.iter().zip(&var_f).map(|(a, b)| (a + b).sqrt()).collect();
    Ok(MlmcIdentityReport {
        mlmc_mean,
        fixed_level_mean,
        std_err,
        mean_batch_length: total_len as f64 / n_trials as f64,
        n_trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{garnet, ConstraintMode};
    use crate::rng::seeded;

    fn dummy(s: usize) -> Transition {
        Transition {
            s,
            a: 0,
            s_next: s,
            a_next: Some(0),
            r_val: s as f64,
            c_val: 0.0,
        }
    }

    #[test]
    fn level_pmf_matches_geometric() {
        let mut rng = seeded(42);
        let n = 1_000_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let p = draw_level(&mut rng);
            assert!(p >= 1);
            if p <= 3 {
                counts[p as usize] += 1;
            }
        }
        for (p, want) in [(1, 0.5), (2, 0.25)] {
            let freq = counts[p] as f64 / n as f64;
            let sigma = (want * (1.0 - want) / n as f64).sqrt();
            assert!((freq - want).abs() < 3.0 * sigma, "p={p}: {freq}");
        }
    }

    #[test]
    fn level_sequence_is_seeded() {
        let a: Vec<u32> = {
            let mut r = seeded(5);
            (0..50).map(|_| draw_level(&mut r)).collect()
        };
        let b: Vec<u32> = {
            let mut r = seeded(5);
            (0..50).map(|_| draw_level(&mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn batch_lengths() {
        assert_eq!(batch_length(1, 16), 2);
        assert_eq!(batch_length(4, 16), 16);
        assert_eq!(batch_length(5, 16), 1);
        assert_eq!(batch_length(200, 16), 1);
        // 1/2*2 + 1/4*4 + 1/8*8 + 1/16*16 + 1/16*1
        assert!((expected_batch_length(16) - 4.0625).abs() < 1e-15);
    }

    #[test]
    fn zero_length_rollout_is_a_no_op() {
        let m = garnet(3, 2, 2, ConstraintMode::Uniform, 1).unwrap();
        let mut cur = TrajectoryCursor::new(&m, seeded(1));
        let before = cur.state();
        assert!(rollout(&mut cur, &m, &PolicyParams::tabular(3, 2), 0).is_empty());
        assert_eq!(cur.state(), before);
        assert_eq!(cur.total_steps(), 0);
    }

    #[test]
    fn deterministic_cycle_is_replayed() {
        // 0 -> 1 -> 2 -> 0 regardless of action
        let m = CmdpModel::new(
            3,
            1,
            vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.5, 1.0],
            vec![0.0; 3],
            vec![1.0, 0.0, 0.0],
        )
        .unwrap();
        let mut cur = TrajectoryCursor::new(&m, seeded(0));
        let zs = rollout(&mut cur, &m, &PolicyParams::tabular(3, 1), 7);
        let states: Vec<usize> = zs.iter().map(|z| z.s).collect();
        assert_eq!(states, vec![0, 1, 2, 0, 1, 2, 0]);
        assert_eq!(cur.state(), 1);
        assert_eq!(cur.total_steps(), 7);
        for w in zs.windows(2) {
            assert_eq!(w[0].s_next, w[1].s);
        }
    }

    #[test]
    fn split_rollouts_equal_one_long_rollout() {
        let m = garnet(4, 2, 3, ConstraintMode::Uniform, 9).unwrap();
        let pol = PolicyParams::tabular(4, 2);
        let mut one = TrajectoryCursor::new(&m, seeded(77));
        let mut two = TrajectoryCursor::new(&m, seeded(77));
        let long = rollout(&mut one, &m, &pol, 30);
        let mut parts = rollout(&mut two, &m, &pol, 12);
        parts.extend(rollout(&mut two, &m, &pol, 18));
        assert_eq!(long, parts);
        assert_eq!(one.total_steps(), two.total_steps());
    }

    #[test]
    fn constant_statistic_telescopes() {
        let batch = MlmcBatch::from_transitions(3, 16, (0..8).map(dummy).collect()).unwrap();
        let v = mlmc_combine(|_| vec![2.5, -1.0], &batch).unwrap();
        assert_eq!(v, vec![2.5, -1.0]);
    }

    #[test]
    fn truncated_batch_returns_first_sample() {
        let batch = MlmcBatch::from_transitions(5, 16, vec![dummy(3)]).unwrap();
        assert!(batch.truncated);
        let v = mlmc_combine(|z| vec![z.r_val], &batch).unwrap();
        assert_eq!(v, vec![3.0]);
    }

    #[test]
    fn weights_reproduce_combine() {
        for level in 1..=4 {
            let zs: Vec<Transition> = (0..(1usize << level)).map(dummy).collect();
            let batch = MlmcBatch::from_transitions(level, 16, zs).unwrap();
            let direct = mlmc_combine(|z| vec![(z.s * z.s) as f64 + 0.5], &batch).unwrap()[0];
            let via_w: f64 = batch
                .weights()
                .iter()
                .zip(&batch.transitions)
                .map(|(w, z)| w * ((z.s * z.s) as f64 + 0.5))
                .sum();
            assert!((direct - via_w).abs() < 1e-12);
            assert!((batch.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn inconsistent_statistic_dimension_is_an_error() {
        let batch = MlmcBatch::from_transitions(2, 16, (0..4).map(dummy).collect()).unwrap();
        let err = mlmc_combine(|z| vec![0.0; 1 + z.s % 2], &batch).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn malformed_batches_are_rejected() {
        assert!(MlmcBatch::from_transitions(0, 16, vec![dummy(0)]).is_err());
        assert!(MlmcBatch::from_transitions(2, 16, vec![dummy(0)]).is_err());
    }

    #[test]
    fn identity_check_with_constant_is_exact() {
        let m = garnet(3, 2, 2, ConstraintMode::Uniform, 2).unwrap();
        let rep =
            mlmc_mean_identity_check(|_| vec![0.75], &m, &PolicyParams::tabular(3, 2), 16, 1000, 3)
                .unwrap();
        assert_eq!(rep.mlmc_mean, vec![0.75]);
        assert_eq!(rep.fixed_level_mean, vec![0.75]);
        assert_eq!(rep.std_err, vec![0.0]);
        assert!(mlmc_mean_identity_check(|_| vec![0.0], &m, &PolicyParams::tabular(3, 2), 16, 10, 3).is_err());
    }
}
