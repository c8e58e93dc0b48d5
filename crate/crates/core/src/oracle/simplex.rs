//! Dense two-phase primal simplex with Bland's rule.
//!
//! Solves `min c.x  s.t.  A x = b, x >= 0`. Sized for desk-scale occupancy
//! LPs (a few hundred columns); every pivot touches the whole tableau.

use crate::{Error, Result};

const PIVOT_TOL: f64 = 1e-11;
const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct StandardLp {
    pub objective: Vec<f64>,
    pub a_eq: Vec<Vec<f64>>,
    pub b_eq: Vec<f64>,
    /// Row labels used in infeasibility reports.
    pub row_names: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub pivots: usize,
}

struct Tableau {
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    basis: Vec<usize>,
    /// Reduced costs and `-z`.
    cost: Vec<f64>,
    cost_rhs: f64,
    allowed: Vec<bool>,
    pivots: usize,
}

impl Tableau {
    fn pivot(&mut self, r: usize, c: usize) {
        let piv = self.rows[r][c];
        for v in self.rows[r].iter_mut() {
            *v /= piv;
        }
        self.rhs[r] /= piv;
        let pivot_row = self.rows[r].clone();
        let pivot_rhs = self.rhs[r];
        for i in 0..self.rows.len() {
            if i == r {
                continue;
            }
            let f = self.rows[i][c];
            if f != 0.0 {
                for (v, p) in self.rows[i].iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
                self.rhs[i] -= f * pivot_rhs;
                self.rows[i][c] = 0.0;
            }
        }
        let f = self.cost[c];
        if f != 0.0 {
            for (v, p) in self.cost.iter_mut().zip(&pivot_row) {
                *v -= f * p;
            }
            self.cost_rhs -= f * pivot_rhs;
            self.cost[c] = 0.0;
        }
        self.basis[r] = c;
        self.pivots += 1;
    }

    fn set_objective(&mut self, c: &[f64]) {
        self.cost = c.to_vec();
        self.cost_rhs = 0.0;
        for i in 0..self.rows.len() {
            let cb = c[self.basis[i]];
            if cb != 0.0 {
                for (v, a) in self.cost.iter_mut().zip(&self.rows[i]) {
                    *v -= cb * a;
                }
                self.cost_rhs -= cb * self.rhs[i];
            }
        }
    }

    /// Runs Bland-rule pivots to optimality.
    fn optimize(&mut self) -> Result<()> {
        loop {
            let entering = (0..self.cost.len()).find(|&j| self.allowed[j] && self.cost[j] < -PIVOT_TOL);
            let Some(c) = entering else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows.len() {
                let a = self.rows[i][c];
                if a > PIVOT_TOL {
                    let ratio = self.rhs[i] / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((r, best)) => {
                            if ratio < best - 1e-14
                                || (ratio <= best + 1e-14 && self.basis[i] < self.basis[r])
                            {
                                Some((i, ratio))
                            } else {
                                Some((r, best))
                            }
                        }
                    };
                }
            }
            match leave {
                Some((r, _)) => self.pivot(r, c),
                None => return Err(Error::Unbounded),
            }
        }
    }
}

pub fn solve(lp: &StandardLp) -> Result<LpSolution> {
    let m = lp.a_eq.len();
    let n = lp.objective.len();
    if lp.b_eq.len() != m {
        return Err(Error::Dimension {
            what: "LP right-hand side",
            expected: m,
            got: lp.b_eq.len(),
        });
    }
    let mut rows = Vec::with_capacity(m);
    let mut rhs = Vec::with_capacity(m);
    for (i, (row, &b)) in lp.a_eq.iter().zip(&lp.b_eq).enumerate() {
        if row.len() != n {
            return Err(Error::Dimension {
                what: "LP constraint row",
                expected: n,
                got: row.len(),
            });
        }
        let sign = if b < 0.0 { -1.0 } else { 1.0 };
        let mut full: Vec<f64> = row.iter().map(|v| sign * v).collect();
        full.extend((0..m).map(|k| if k == i { 1.0 } else { 0.0 }));
        rows.push(full);
        rhs.push(sign * b);
    }
    let total = n + m;
    let mut t = Tableau {
        rows,
        rhs,
        basis: (n..total).collect(),
        cost: vec![0.0; total],
        cost_rhs: 0.0,
        allowed: vec![true; total],
        pivots: 0,
    };

    // phase one: minimize the sum of artificials
    let mut phase_one = vec![0.0; total];
    for v in phase_one.iter_mut().skip(n) {
        *v = 1.0;
    }
    t.set_objective(&phase_one);
    t.optimize()?;
    let infeasibility = -t.cost_rhs;
    if infeasibility > FEAS_TOL {
        // name the row carrying the largest artificial residual
        let worst = (0..t.rows.len())
            .filter(|&i| t.basis[i] >= n)
            .max_by(|&a, &b| t.rhs[a].total_cmp(&t.rhs[b]))
            .map(|i| t.basis[i] - n)
            .unwrap_or(0);
        let name = lp
            .row_names
            .get(worst)
            .cloned()
            .unwrap_or_else(|| format!("row {worst}"));
        return Err(Error::Infeasible {
            constraint: format!("{name} (phase-one residual {infeasibility:.3e})"),
        });
    }

    // drive artificials out of the basis, dropping redundant rows
    let mut i = 0;
    while i < t.rows.len() {
        if t.basis[i] >= n {
            match (0..n).find(|&j| t.rows[i][j].abs() > PIVOT_TOL) {
                Some(j) => {
                    t.pivot(i, j);
                    i += 1;
                }
                None => {
                    t.rows.remove(i);
                    t.rhs.remove(i);
                    t.basis.remove(i);
                }
            }
        } else {
            i += 1;
        }
    }
    for j in n..total {
        t.allowed[j] = false;
    }

    let mut phase_two = lp.objective.clone();
    phase_two.extend(std::iter::repeat_n(0.0, m));
    t.set_objective(&phase_two);
    t.optimize()?;

    let mut x = vec![0.0; n];
    for (r, &b) in t.basis.iter().enumerate() {
        if b < n {
            x[b] = t.rhs[r].max(0.0);
        }
    }
    let objective = lp.objective.iter().zip(&x).map(|(c, x)| c * x).sum();
    Ok(LpSolution {
        x,
        objective,
        pivots: t.pivots,
    })
}
