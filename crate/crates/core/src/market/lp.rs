//! Dense bounded-variable primal simplex.
//!
//! Maximizes `c·x` subject to linear rows and `0 <= x <= u`. Two phases with
//! artificials; Dantzig pricing with lowest-index ties, switching to Bland's
//! rule after a run of degenerate pivots. The final basis is refactorized so
//! the primal point and row duals are exact vertex quantities rather than
//! accumulated tableau values.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

const PIVOT_TOL: f64 = 1e-9;
const OPT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-8;
const DEGENERATE_RUN: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("linear program is infeasible")]
    Infeasible,
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("simplex iteration limit reached")]
    IterationLimit,
    #[error("basis matrix is singular")]
    SingularBasis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
pub struct Row {
    pub coeffs: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct LinearProgram {
    objective: Vec<f64>,
    upper: Vec<f64>,
    rows: Vec<Row>,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    /// Sensitivity of the optimal objective to each row's right-hand side.
    pub row_duals: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Some basic variable sits at one of its bounds.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Status {
    Basic,
    Lower,
    Upper,
}

impl LinearProgram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a variable `0 <= x <= upper` (upper may be infinite) and returns
    /// its index.
    pub fn add_var(&mut self, objective: f64, upper: f64) -> usize {
        assert!(upper >= 0.0, "variable upper bound must be nonnegative");
        self.objective.push(objective);
        self.upper.push(upper);
        self.objective.len() - 1
    }

    pub fn add_row(&mut self, coeffs: Vec<(usize, f64)>, sense: Sense, rhs: f64) -> usize {
        debug_assert!(coeffs.iter().all(|&(j, _)| j < self.objective.len()));
        self.rows.push(Row { coeffs, sense, rhs });
        self.rows.len() - 1
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn solve(&self) -> Result<LpSolution, LpError> {
        Tableau::build(self).run()
    }
}

struct Tableau {
    m: usize,
    n_struct: usize,
    /// Original equality-form columns, row-major m × n.
    a: Vec<f64>,
    b: Vec<f64>,
    upper: Vec<f64>,
    cost: Vec<f64>,
    /// Current B⁻¹A, row-major m × n.
    t: Vec<f64>,
    beta: Vec<f64>,
    basis: Vec<usize>,
    status: Vec<Status>,
    artificial: Vec<bool>,
    n: usize,
    iterations: usize,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Self {
        let m = lp.rows.len();
        let n_struct = lp.objective.len();

        // One slack per inequality, one artificial per row lacking a feasible
        // starting slack.
        let mut extra = Vec::new(); // (row, coefficient, upper, is_artificial)
        let mut basis = vec![usize::MAX; m];
        for (i, row) in lp.rows.iter().enumerate() {
            match row.sense {
                Sense::Le => {
                    extra.push((i, 1.0, f64::INFINITY, false));
                    if row.rhs >= 0.0 {
                        basis[i] = n_struct + extra.len() - 1;
                    }
                }
                Sense::Ge => {
                    extra.push((i, -1.0, f64::INFINITY, false));
                    if row.rhs <= 0.0 {
                        basis[i] = n_struct + extra.len() - 1;
                    }
                }
                Sense::Eq => {}
            }
        }
        for (i, row) in lp.rows.iter().enumerate() {
            if basis[i] == usize::MAX {
                let sign = if row.rhs >= 0.0 { 1.0 } else { -1.0 };
                extra.push((i, sign, f64::INFINITY, true));
                basis[i] = n_struct + extra.len() - 1;
            }
        }

        let n = n_struct + extra.len();
        let mut a = vec![0.0; m * n];
        for (i, row) in lp.rows.iter().enumerate() {
            for &(j, v) in &row.coeffs {
                a[i * n + j] += v;
            }
        }
        let mut upper = lp.upper.clone();
        let mut artificial = vec![false; n_struct];
        for (k, &(i, coef, ub, art)) in extra.iter().enumerate() {
            a[i * n + n_struct + k] = coef;
            upper.push(ub);
            artificial.push(art);
        }
        let b: Vec<f64> = lp.rows.iter().map(|r| r.rhs).collect();

        // The starting basis is diagonal ±1, so B⁻¹A is a row scaling.
        let mut t = a.clone();
        let mut beta = vec![0.0; m];
        for i in 0..m {
            let piv = a[i * n + basis[i]];
            for j in 0..n {
                t[i * n + j] /= piv;
            }
            beta[i] = b[i] / piv;
        }
        let mut status = vec![Status::Lower; n];
        for &k in &basis {
            status[k] = Status::Basic;
        }
        let mut cost = lp.objective.clone();
        cost.resize(n, 0.0);

        Tableau { m, n_struct, a, b, upper, cost, t, beta, basis, status, artificial, n, iterations: 0 }
    }

    fn run(mut self) -> Result<LpSolution, LpError> {
        let limit = 200 * (self.m + self.n).max(10);
        if self.artificial.iter().any(|&a| a) {
            let phase_one: Vec<f64> = self.artificial.iter().map(|&a| if a { -1.0 } else { 0.0 }).collect();
            self.optimize(&phase_one, limit)?;
            let infeasibility: f64 = self
                .basis
                .iter()
                .zip(&self.beta)
                .filter(|(k, _)| self.artificial[**k])
                .map(|(_, v)| v.abs())
                .sum();
            let scale = self.b.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            if infeasibility > FEAS_TOL * scale {
                return Err(LpError::Infeasible);
            }
            for k in 0..self.n {
                if self.artificial[k] {
                    self.upper[k] = 0.0;
                }
            }
        }
        let cost = self.cost.clone();
        self.optimize(&cost, limit)?;
        self.refine()
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut d = cost.to_vec();
        for (i, &k) in self.basis.iter().enumerate() {
            let cb = cost[k];
            if cb != 0.0 {
                let row = &self.t[i * self.n..(i + 1) * self.n];
                for (dj, tij) in d.iter_mut().zip(row) {
                    *dj -= cb * tij;
                }
            }
        }
        d
    }

    fn optimize(&mut self, cost: &[f64], limit: usize) -> Result<(), LpError> {
        let mut d = self.reduced_costs(cost);
        let mut degenerate = 0usize;
        loop {
            if self.iterations >= limit {
                return Err(LpError::IterationLimit);
            }
            let bland = degenerate >= DEGENERATE_RUN;

            // Pricing.
            let mut entering: Option<(usize, f64)> = None;
            for j in 0..self.n {
                let gain = match self.status[j] {
                    Status::Basic => continue,
                    _ if self.upper[j] == 0.0 => continue,
                    Status::Lower => d[j],
                    Status::Upper => -d[j],
                };
                if gain > OPT_TOL {
                    match entering {
                        None => entering = Some((j, gain)),
                        Some((_, best)) if !bland && gain > best => entering = Some((j, gain)),
                        _ => {}
                    }
                    if bland {
                        break;
                    }
                }
            }
            let Some((j, _)) = entering else {
                return Ok(());
            };
            self.iterations += 1;
            let dir = if self.status[j] == Status::Lower { 1.0 } else { -1.0 };

            // Ratio test.
            let mut theta = self.upper[j];
            let mut leave: Option<(usize, Status)> = None;
            let mut leave_pivot = 0.0;
            for i in 0..self.m {
                let alpha = dir * self.t[i * self.n + j];
                let k = self.basis[i];
                let (limit_i, goes_to) = if alpha > PIVOT_TOL {
                    (self.beta[i].max(0.0) / alpha, Status::Lower)
                } else if alpha < -PIVOT_TOL && self.upper[k].is_finite() {
                    ((self.upper[k] - self.beta[i]).max(0.0) / -alpha, Status::Upper)
                } else {
                    continue;
                };
                if limit_i < theta - 1e-12 {
                    theta = limit_i;
                    leave = Some((i, goes_to));
                    leave_pivot = alpha.abs();
                } else if limit_i <= theta + 1e-12 {
                    // Ties with a bound flip keep the flip.
                    if let Some((r, _)) = leave {
                        let take = if bland { k < self.basis[r] } else { alpha.abs() > leave_pivot };
                        if take {
                            theta = theta.min(limit_i);
                            leave = Some((i, goes_to));
                            leave_pivot = alpha.abs();
                        }
                    }
                }
            }
            if !theta.is_finite() {
                return Err(LpError::Unbounded);
            }
            if theta <= 1e-12 {
                degenerate += 1;
            } else {
                degenerate = 0;
            }

            for i in 0..self.m {
                self.beta[i] -= dir * theta * self.t[i * self.n + j];
            }
            match leave {
                None => {
                    // Bound flip.
                    self.status[j] = if dir > 0.0 { Status::Upper } else { Status::Lower };
                }
                Some((r, goes_to)) => {
                    let leaving = self.basis[r];
                    let entering_value = if dir > 0.0 { theta } else { self.upper[j] - theta };
                    self.pivot(r, j, &mut d);
                    self.beta[r] = entering_value;
                    self.status[leaving] = goes_to;
                    self.status[j] = Status::Basic;
                    self.basis[r] = j;
                }
            }
        }
    }

    fn pivot(&mut self, r: usize, j: usize, d: &mut [f64]) {
        let n = self.n;
        let piv = self.t[r * n + j];
        for v in &mut self.t[r * n..(r + 1) * n] {
            *v /= piv;
        }
        let pivot_row: Vec<f64> = self.t[r * n..(r + 1) * n].to_vec();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.t[i * n + j];
            if f != 0.0 {
                for (v, p) in self.t[i * n..(i + 1) * n].iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
            }
        }
        let f = d[j];
        if f != 0.0 {
            for (v, p) in d.iter_mut().zip(&pivot_row) {
                *v -= f * p;
            }
        }
    }

    /// Recomputes primal values and duals from the final basis.
    fn refine(self) -> Result<LpSolution, LpError> {
        let (m, n) = (self.m, self.n);
        let mut x = vec![0.0; n];
        for k in 0..n {
            if self.status[k] == Status::Upper {
                x[k] = self.upper[k];
            }
        }
        let mut y = vec![0.0; m];
        let mut degenerate = false;
        if m > 0 {
            let bmat = DMatrix::from_fn(m, m, |i, r| self.a[i * n + self.basis[r]]);
            let mut rhs = DVector::from_column_slice(&self.b);
            for k in (0..n).filter(|&k| self.status[k] == Status::Upper) {
                for i in 0..m {
                    rhs[i] -= self.a[i * n + k] * self.upper[k];
                }
            }
            let lu = bmat.clone().lu();
            let xb = lu.solve(&rhs).ok_or(LpError::SingularBasis)?;
            let cb = DVector::from_iterator(m, self.basis.iter().map(|&k| self.cost[k]));
            let yv = bmat.transpose().lu().solve(&cb).ok_or(LpError::SingularBasis)?;
            for (r, &k) in self.basis.iter().enumerate() {
                let ub = self.upper[k];
                let mut v = xb[r];
                if v.abs() < 1e-11 {
                    v = 0.0;
                } else if ub.is_finite() && (v - ub).abs() < 1e-11 {
                    v = ub;
                }
                if v.abs() < 1e-9 || (ub.is_finite() && (v - ub).abs() < 1e-9) {
                    degenerate = true;
                }
                x[k] = v;
            }
            y.copy_from_slice(yv.as_slice());
        }
        let x: Vec<f64> = x[..self.n_struct].to_vec();
        let objective = x.iter().zip(&self.cost).map(|(v, c)| v * c).sum();
        Ok(LpSolution { x, row_duals: y, objective, iterations: self.iterations, degenerate })
    }
}
