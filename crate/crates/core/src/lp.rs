//! Linear programming for layer-activity verification.
//!
//! The central problem: given constraint rows `W x + b <= s 1`, minimize the
//! margin `s`. Its optimum `p*` is the smallest achievable maximum
//! pre-activation, so `p* > 0` proves every input leaves at least one
//! component positive, and the dual optimum hands back a simplex vector
//! `lambda >= 0, lambda' 1 = 1, W' lambda = 0` with `lambda' b = p*` that
//! certifies the fact independently of the solver.
//!
//! The solver is a dense two-phase tableau simplex with Bland's anti-cycling
//! pivot rule. Instances here are tiny (tens of rows), so clarity wins over
//! sparsity.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Absolute feasibility/optimality tolerance used throughout.
pub const FEAS_TOL: f64 = 1e-8;

/// Constraint system `W x + b` with `W` of shape `[m, n]`.
#[derive(Debug, Clone)]
pub struct LpProblem {
    pub w: Tensor,
    pub b: Vec<f64>,
}

impl LpProblem {
    pub fn new(w: Tensor, b: Vec<f64>) -> Result<Self> {
        if w.rank() != 2 || w.shape()[0] == 0 || w.shape()[1] == 0 {
            return Err(Error::dim(format!(
                "constraint matrix must be [m>=1, n>=1], got {:?}",
                w.shape()
            )));
        }
        if b.len() != w.shape()[0] {
            return Err(Error::dim(format!(
                "{} bias entries for {} constraint rows",
                b.len(),
                w.shape()[0]
            )));
        }
        if !w.is_finite() || !b.iter().all(|v| v.is_finite()) {
            return Err(Error::input("non-finite constraint data".to_string()));
        }
        Ok(LpProblem { w, b })
    }

    pub fn m(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.w.shape()[1]
    }

    /// Value of the row maximum at a point.
    pub fn max_at(&self, x: &[f64]) -> f64 {
        (0..self.m())
            .map(|i| {
                self.w.row(i).iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b[i]
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Result of the margin minimization.
#[derive(Debug, Clone)]
pub enum Margin {
    Finite { p_star: f64, x_star: Vec<f64> },
    /// A direction `d` with `W d < 0` strictly exists, so the margin has no
    /// lower bound.
    UnboundedBelow,
}

#[derive(Debug, Clone)]
pub struct MarginOutcome {
    pub margin: Margin,
    /// Dual optimum when the margin is finite: on the simplex, in the left
    /// null space of `W`, with `lambda' b = p*`.
    pub certificate: Option<Vec<f64>>,
}

impl MarginOutcome {
    pub fn p_star(&self) -> Option<f64> {
        match &self.margin {
            Margin::Finite { p_star, .. } => Some(*p_star),
            Margin::UnboundedBelow => None,
        }
    }
}

/// Minimizes `s` subject to `W x + b <= s 1` over free `x`.
pub fn min_max_margin(p: &LpProblem) -> Result<MarginOutcome> {
    let (m, n) = (p.m(), p.n());
    // Standard-form variables: x+ (n), x- (n), s+ , s-, slack t (m).
    let ncols = 2 * n + 2 + m;
    let mut a = vec![vec![0.0; ncols]; m];
    let mut rhs = vec![0.0; m];
    for i in 0..m {
        for j in 0..n {
            a[i][j] = p.w.at(i, j);
            a[i][n + j] = -p.w.at(i, j);
        }
        a[i][2 * n] = -1.0;
        a[i][2 * n + 1] = 1.0;
        a[i][2 * n + 2 + i] = 1.0;
        rhs[i] = -p.b[i];
    }
    let mut cost = vec![0.0; ncols];
    cost[2 * n] = 1.0;
    cost[2 * n + 1] = -1.0;

    match solve_standard(&a, &rhs, &cost)? {
        StdOutcome::Optimal { x, dual, .. } => {
            let p_star = x[2 * n] - x[2 * n + 1];
            let x_star: Vec<f64> = (0..n).map(|j| x[j] - x[n + j]).collect();
            let mut lambda: Vec<f64> = dual.iter().map(|&y| (-y).max(0.0)).collect();
            let s: f64 = lambda.iter().sum();
            let certificate = if (s - 1.0).abs() <= 1e-6 {
                for l in &mut lambda {
                    *l /= s;
                }
                Some(lambda)
            } else {
                None
            };
            Ok(MarginOutcome {
                margin: Margin::Finite { p_star, x_star },
                certificate,
            })
        }
        StdOutcome::Unbounded => Ok(MarginOutcome {
            margin: Margin::UnboundedBelow,
            certificate: None,
        }),
        // x = 0 with s = max_i b_i always satisfies the constraints.
        StdOutcome::Infeasible => Err(Error::usage(
            "margin LP reported infeasible; constraint data is degenerate".to_string(),
        )),
    }
}

/// Weak-duality bound: `lambda' b` when `lambda` is simplex-feasible and in
/// the left null space of `W`, negative infinity otherwise.
pub fn dual_value(lambda: &[f64], p: &LpProblem) -> f64 {
    if lambda.len() != p.m() {
        return f64::NEG_INFINITY;
    }
    let nonneg = lambda.iter().all(|&l| l >= -1e-12);
    let sum: f64 = lambda.iter().sum();
    if !nonneg || (sum - 1.0).abs() > 1e-9 || wt_lambda_inf(lambda, p) > FEAS_TOL {
        return f64::NEG_INFINITY;
    }
    lambda.iter().zip(&p.b).map(|(l, b)| l * b).sum()
}

/// Largest entry of `|W' lambda|`.
pub fn wt_lambda_inf(lambda: &[f64], p: &LpProblem) -> f64 {
    let (m, n) = (p.m(), p.n());
    let mut worst: f64 = 0.0;
    for j in 0..n {
        let mut s = 0.0;
        for i in 0..m {
            s += p.w.at(i, j) * lambda[i];
        }
        worst = worst.max(s.abs());
    }
    worst
}

/// True iff `lambda` proves `{x : W x + b <= 0}` empty: nonnegative, in the
/// left null space of `W`, and with strictly positive weight on `b`.
pub fn check_certificate(lambda: &[f64], p: &LpProblem) -> bool {
    lambda.len() == p.m()
        && lambda.iter().all(|&l| l.is_finite() && l >= -1e-12)
        && wt_lambda_inf(lambda, p) <= FEAS_TOL
        && lambda.iter().zip(&p.b).map(|(l, b)| l * b).sum::<f64>() > 0.0
}

/// Brute-force margin oracle: evaluates the row maximum on a regular grid
/// over `[-halfwidth, halfwidth]^n` and returns the smallest value seen.
/// Only for cross-checking the simplex on tiny problems; `n <= 3`.
pub fn brute_force_margin(p: &LpProblem, halfwidth: f64, points_per_axis: usize) -> Result<f64> {
    let n = p.n();
    if n > 3 {
        return Err(Error::usage(format!(
            "grid oracle supports n <= 3, got n = {n}"
        )));
    }
    if points_per_axis < 2 || !halfwidth.is_finite() || halfwidth <= 0.0 {
        return Err(Error::usage(
            "grid oracle needs halfwidth > 0 and at least 2 points per axis".to_string(),
        ));
    }
    let step = 2.0 * halfwidth / (points_per_axis - 1) as f64;
    let total = points_per_axis.pow(n as u32);
    let mut x = vec![0.0; n];
    let mut best = f64::INFINITY;
    for idx in 0..total {
        let mut rem = idx;
        for xd in x.iter_mut() {
            let k = rem % points_per_axis;
            rem /= points_per_axis;
            *xd = -halfwidth + step * k as f64;
        }
        best = best.min(p.max_at(&x));
    }
    Ok(best)
}

/// Grid spacing used by [`brute_force_margin`], for tolerance bookkeeping.
pub fn grid_spacing(halfwidth: f64, points_per_axis: usize) -> f64 {
    2.0 * halfwidth / (points_per_axis - 1) as f64
}

/// Max row sum of absolute values (the operator norm induced by the
/// max-entry vector norm). Rank-1 tensors count as one row.
pub fn inf_norm(a: &Tensor) -> f64 {
    (0..a.rows())
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Rewrites half-space feasibility `{x : W x + b <= 0}` as nonnegative
/// standard form: the set is nonempty iff `{xbar >= 0 : Wbar xbar + b = 0}`
/// is, with `Wbar = [W | -W | I]` splitting `x` into positive and negative
/// parts and absorbing the slack.
pub fn feasibility_reduction(p: &LpProblem) -> (Tensor, Vec<f64>) {
    let (m, n) = (p.m(), p.n());
    let wbar = Tensor::from_fn(m, 2 * n + m, |i, j| {
        if j < n {
            p.w.at(i, j)
        } else if j < 2 * n {
            -p.w.at(i, j - n)
        } else if j - 2 * n == i {
            1.0
        } else {
            0.0
        }
    });
    (wbar, p.b.clone())
}

/// Phase-1 feasibility of `{xbar >= 0 : A xbar = rhs}`.
pub fn standard_form_feasible(a: &Tensor, rhs: &[f64]) -> Result<bool> {
    if a.rank() != 2 || a.shape()[0] != rhs.len() {
        return Err(Error::dim("standard form shape mismatch".to_string()));
    }
    let rows: Vec<Vec<f64>> = (0..a.rows()).map(|i| a.row(i).to_vec()).collect();
    let cost = vec![0.0; a.cols()];
    Ok(!matches!(
        solve_standard(&rows, rhs, &cost)?,
        StdOutcome::Infeasible
    ))
}

/// Feasibility of the reduced system for `p` (equivalent to the original
/// half-space system having a point).
pub fn reduced_system_feasible(p: &LpProblem) -> Result<bool> {
    let (wbar, b) = feasibility_reduction(p);
    let neg_b: Vec<f64> = b.iter().map(|v| -v).collect();
    standard_form_feasible(&wbar, &neg_b)
}

enum StdOutcome {
    Optimal {
        x: Vec<f64>,
        #[allow(dead_code)]
        obj: f64,
        dual: Vec<f64>,
    },
    Unbounded,
    Infeasible,
}

/// Two-phase simplex for `min c' v` subject to `A v = rhs`, `v >= 0`.
/// Artificial columns are kept through phase 2 (barred from entering) so the
/// duals can be read off their reduced costs.
fn solve_standard(a: &[Vec<f64>], rhs: &[f64], cost: &[f64]) -> Result<StdOutcome> {
    let m = a.len();
    let n = cost.len();
    let ncols = n + m;

    // Sign-flip rows to make the right side nonnegative; remember the flips
    // to restore dual signs at the end.
    let mut t: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut sign = vec![1.0; m];
    for i in 0..m {
        let s = if rhs[i] < 0.0 { -1.0 } else { 1.0 };
        sign[i] = s;
        let mut row = vec![0.0; ncols + 1];
        for j in 0..n {
            row[j] = s * a[i][j];
        }
        row[n + i] = 1.0;
        row[ncols] = s * rhs[i];
        t.push(row);
    }
    let mut basis: Vec<usize> = (0..m).map(|i| n + i).collect();
    // Which original row each tableau row came from; redundant rows drop out.
    let mut origin: Vec<usize> = (0..m).collect();

    // Reduced-cost rows (last cell is minus the objective).
    let mut z1 = vec![0.0; ncols + 1];
    for j in 0..=ncols {
        let colsum: f64 = t.iter().map(|r| r[j]).sum();
        z1[j] = if (n..ncols).contains(&j) { 1.0 } else { 0.0 } - colsum;
    }
    let mut z2 = vec![0.0; ncols + 1];
    z2[..n].copy_from_slice(cost);

    let mut iters_left = 200 * (ncols + m) + 2000;

    fn pivot(
        t: &mut [Vec<f64>],
        z1: &mut [f64],
        z2: &mut [f64],
        basis: &mut [usize],
        prow: usize,
        pcol: usize,
    ) {
        let piv = t[prow][pcol];
        for v in t[prow].iter_mut() {
            *v /= piv;
        }
        let prow_vals = t[prow].clone();
        for (r, row) in t.iter_mut().enumerate() {
            if r != prow && row[pcol] != 0.0 {
                let f = row[pcol];
                for (v, pv) in row.iter_mut().zip(&prow_vals) {
                    *v -= f * pv;
                }
            }
        }
        for z in [z1, z2] {
            if z[pcol] != 0.0 {
                let f = z[pcol];
                for (v, pv) in z.iter_mut().zip(&prow_vals) {
                    *v -= f * pv;
                }
            }
        }
        basis[prow] = pcol;
    }

    // Bland entering: lowest eligible column index. Leaving: best ratio,
    // ties broken by lowest basic variable index.
    fn choose_leaving(t: &[Vec<f64>], basis: &[usize], pcol: usize) -> Option<usize> {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, row) in t.iter().enumerate() {
            if row[pcol] > FEAS_TOL {
                let ratio = row[row.len() - 1] / row[pcol];
                let cand = (ratio, basis[i], i);
                best = match best {
                    None => Some(cand),
                    Some(cur) => {
                        if ratio < cur.0 - 1e-12
                            || ((ratio - cur.0).abs() <= 1e-12 && basis[i] < cur.1)
                        {
                            Some(cand)
                        } else {
                            Some(cur)
                        }
                    }
                };
            }
        }
        best.map(|(_, _, i)| i)
    }

    // Phase 1: drive the artificial objective to zero.
    loop {
        let enter = (0..ncols).find(|&j| z1[j] < -FEAS_TOL);
        let Some(pcol) = enter else { break };
        let Some(prow) = choose_leaving(&t, &basis, pcol) else {
            return Err(Error::usage(
                "phase-1 objective unbounded; numerical breakdown".to_string(),
            ));
        };
        pivot(&mut t, &mut z1, &mut z2, &mut basis, prow, pcol);
        iters_left -= 1;
        if iters_left == 0 {
            return Err(Error::usage("simplex iteration limit exceeded".to_string()));
        }
    }
    if -z1[ncols] > FEAS_TOL {
        return Ok(StdOutcome::Infeasible);
    }

    // Remove artificials from the basis: pivot them out on any real column,
    // or drop the row entirely when it has become redundant.
    let mut r = 0;
    while r < t.len() {
        if basis[r] >= n {
            if let Some(pcol) = (0..n).find(|&j| t[r][j].abs() > FEAS_TOL) {
                pivot(&mut t, &mut z1, &mut z2, &mut basis, r, pcol);
            } else {
                t.remove(r);
                basis.remove(r);
                origin.remove(r);
                continue;
            }
        }
        r += 1;
    }

    // Phase 2 on the real objective; artificial columns may not re-enter.
    loop {
        let enter = (0..n).find(|&j| z2[j] < -FEAS_TOL);
        let Some(pcol) = enter else { break };
        let Some(prow) = choose_leaving(&t, &basis, pcol) else {
            return Ok(StdOutcome::Unbounded);
        };
        pivot(&mut t, &mut z1, &mut z2, &mut basis, prow, pcol);
        iters_left -= 1;
        if iters_left == 0 {
            return Err(Error::usage("simplex iteration limit exceeded".to_string()));
        }
    }

    let mut x = vec![0.0; n];
    for (i, &bv) in basis.iter().enumerate() {
        if bv < n {
            x[bv] = t[i][ncols];
        }
    }
    let obj: f64 = cost.iter().zip(&x).map(|(c, v)| c * v).sum();
    // Dual of kept row i sits in the reduced cost of its artificial column;
    // dropped (redundant) rows get dual zero.
    let mut dual = vec![0.0; m];
    for &orig_i in &origin {
        dual[orig_i] = -z2[n + orig_i] * sign[orig_i];
    }
    Ok(StdOutcome::Optimal { x, obj, dual })
}
