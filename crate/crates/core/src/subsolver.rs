//! Maximin subproblem solver: maximize the minimum of concave pieces over a
//! convex feasible set (linear constraints plus box bounds), with an optional
//! smooth concave term outside the min.
//!
//! The nonsmooth min is handled exactly through an epigraph variable t
//! (maximize t subject to t <= f_k(x)), and the resulting smooth convex
//! program is solved with a primal log-barrier interior-point method using
//! equality-constrained Newton steps. The returned point is never worse than
//! the warm start.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("infeasible start: {0}")]
    InfeasibleStart(String),
    #[error("problem has no concave pieces")]
    NoPieces,
    #[error("inconsistent fixed constraint after presolve: {0}")]
    InconsistentFixed(String),
    #[error("could not find a strictly interior start")]
    NoInteriorStart,
}

/// Concave piece evaluators. Value, gradient, and Hessian are analytic.
#[derive(Debug, Clone)]
pub enum Piece {
    /// sum_i q_i x_i^2 + l' x + c with q_i <= 0 (diagonal concave quadratic).
    Quad { quad: Vec<f64>, lin: Vec<f64>, constant: f64 },
    /// sum_t a_t log2(b_t + w_t' x) + l' x + c with a_t >= 0, sparse terms.
    LogSum { terms: Vec<LogTerm>, lin: Vec<(usize, f64)>, constant: f64 },
}

#[derive(Debug, Clone)]
pub struct LogTerm {
    pub coef: f64,
    pub bias: f64,
    pub weights: Vec<(usize, f64)>,
}

const LN2: f64 = std::f64::consts::LN_2;

impl Piece {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Piece::Quad { quad, lin, constant } => {
                let mut v = *constant;
                for i in 0..quad.len() {
                    v += quad[i] * x[i] * x[i] + lin[i] * x[i];
                }
                v
            }
            Piece::LogSum { terms, lin, constant } => {
                let mut v = *constant;
                for t in terms {
                    let arg = t.bias + t.weights.iter().map(|&(i, w)| w * x[i]).sum::<f64>();
                    v += t.coef * arg.log2();
                }
                for &(i, w) in lin {
                    v += w * x[i];
                }
                v
            }
        }
    }

    pub fn gradient(&self, x: &[f64], out: &mut DVector<f64>) {
        out.fill(0.0);
        match self {
            Piece::Quad { quad, lin, .. } => {
                for i in 0..quad.len() {
                    out[i] = 2.0 * quad[i] * x[i] + lin[i];
                }
            }
            Piece::LogSum { terms, lin, .. } => {
                for t in terms {
                    let arg = t.bias + t.weights.iter().map(|&(i, w)| w * x[i]).sum::<f64>();
                    let scale = t.coef / (LN2 * arg);
                    for &(i, w) in &t.weights {
                        out[i] += scale * w;
                    }
                }
                for &(i, w) in lin {
                    out[i] += w;
                }
            }
        }
    }

    /// Adds `scale * hessian` into `out` (the x-block only).
    pub fn add_scaled_hessian(&self, x: &[f64], scale: f64, out: &mut DMatrix<f64>) {
        match self {
            Piece::Quad { quad, .. } => {
                for i in 0..quad.len() {
                    out[(i, i)] += scale * 2.0 * quad[i];
                }
            }
            Piece::LogSum { terms, .. } => {
                for t in terms {
                    let arg = t.bias + t.weights.iter().map(|&(i, w)| w * x[i]).sum::<f64>();
                    let s = -scale * t.coef / (LN2 * arg * arg);
                    for &(i, wi) in &t.weights {
                        for &(j, wj) in &t.weights {
                            out[(i, j)] += s * wi * wj;
                        }
                    }
                }
            }
        }
    }

    fn substitute(&self, keep: &[usize], fixed: &[Option<f64>]) -> Piece {
        let pos: std::collections::HashMap<usize, usize> =
            keep.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        match self {
            Piece::Quad { quad, lin, constant } => {
                let mut c = *constant;
                let mut q = vec![0.0; keep.len()];
                let mut l = vec![0.0; keep.len()];
                for i in 0..quad.len() {
                    match fixed[i] {
                        Some(v) => c += quad[i] * v * v + lin[i] * v,
                        None => {
                            let ni = pos[&i];
                            q[ni] = quad[i];
                            l[ni] = lin[i];
                        }
                    }
                }
                Piece::Quad { quad: q, lin: l, constant: c }
            }
            Piece::LogSum { terms, lin, constant } => {
                let mut c = *constant;
                let mut new_terms = Vec::with_capacity(terms.len());
                for t in terms {
                    let mut bias = t.bias;
                    let mut weights = Vec::new();
                    for &(i, w) in &t.weights {
                        match fixed[i] {
                            Some(v) => bias += w * v,
                            None => weights.push((pos[&i], w)),
                        }
                    }
                    if weights.is_empty() {
                        c += t.coef * bias.log2();
                    } else {
                        new_terms.push(LogTerm { coef: t.coef, bias, weights });
                    }
                }
                let mut new_lin = Vec::new();
                for &(i, w) in lin {
                    match fixed[i] {
                        Some(v) => c += w * v,
                        None => new_lin.push((pos[&i], w)),
                    }
                }
                Piece::LogSum { terms: new_terms, lin: new_lin, constant: c }
            }
        }
    }
}

/// Sparse linear constraint coeffs' x (<=|=) rhs.
#[derive(Debug, Clone)]
pub struct LinearConstraint {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl LinearConstraint {
    fn lhs(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(i, w)| w * x[i]).sum()
    }
}

/// Maximize min_k pieces_k(x) + extra(x) subject to lin_ineq (a'x <= b),
/// lin_eq (a'x = b), and box bounds.
pub struct MaximinProblem {
    pub dim: usize,
    pub pieces: Vec<Piece>,
    pub extra: Option<Piece>,
    pub lin_ineq: Vec<LinearConstraint>,
    pub lin_eq: Vec<LinearConstraint>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Feasible warm start.
    pub start: Vec<f64>,
    /// Strictly interior feasible point used to nudge a boundary start.
    pub interior_hint: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    IterationLimit,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub solution: Vec<f64>,
    /// Achieved min_k f_k + extra at the returned point.
    pub value: f64,
    pub max_violation: f64,
    pub stationarity_residual: f64,
    pub iterations: usize,
    pub status: SolveStatus,
}

impl MaximinProblem {
    /// True maximin objective (min of pieces plus extra) at a point.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let min = self.pieces.iter().map(|p| p.value(x)).fold(f64::INFINITY, f64::min);
        min + self.extra.as_ref().map_or(0.0, |e| e.value(x))
    }

    /// Worst constraint violation at a point (0 when feasible).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let mut v = 0.0f64;
        for c in &self.lin_ineq {
            v = v.max(c.lhs(x) - c.rhs);
        }
        for c in &self.lin_eq {
            v = v.max((c.lhs(x) - c.rhs).abs());
        }
        for i in 0..self.dim {
            v = v.max(self.lower[i] - x[i]).max(x[i] - self.upper[i]);
        }
        v
    }
}

/// Default tolerances used by the outer algorithm.
pub const DEFAULT_TOL_KKT: f64 = 1e-6;
pub const DEFAULT_TOL_FEAS: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 200;

pub fn solve_maximin(
    problem: &MaximinProblem,
    tol_kkt: f64,
    tol_feas: f64,
    max_iter: usize,
) -> Result<SolveReport, SolveError> {
    if problem.pieces.is_empty() {
        return Err(SolveError::NoPieces);
    }
    // Equality dust up to 1e-7 is tolerated: the Newton system carries the
    // equality residual on its right-hand side and re-centers the iterates.
    let start_violation = problem.violation(&problem.start);
    if start_violation > 1e-7 {
        return Err(SolveError::InfeasibleStart(format!("start violates constraints by {start_violation:.3e}")));
    }
    let start_value = problem.objective(&problem.start);
    if !start_value.is_finite() {
        return Err(SolveError::InfeasibleStart("non-finite objective at start".into()));
    }

    let reduced = presolve(problem)?;
    if reduced.keep.is_empty() {
        // Everything pinned by equalities: the start is the only point.
        return Ok(SolveReport {
            solution: problem.start.clone(),
            value: start_value,
            max_violation: start_violation,
            stationarity_residual: 0.0,
            iterations: 0,
            status: SolveStatus::Converged,
        });
    }

    let mut report = barrier_solve(problem, &reduced, tol_kkt, max_iter);

    // Warm-start dominance: never return worse than the feasible start.
    if !(report.value >= start_value - 1e-12) || report.value.is_nan() {
        report.solution = problem.start.clone();
        report.value = start_value;
        report.max_violation = start_violation;
    }
    if report.max_violation > tol_feas && report.status == SolveStatus::Converged {
        report.status = SolveStatus::NumericalFailure;
    }
    Ok(report)
}

struct Reduced {
    /// Old indices of the free variables, in order.
    keep: Vec<usize>,
    /// Fixed value per old index, `None` for free variables.
    fixed: Vec<Option<f64>>,
    pieces: Vec<Piece>,
    extra: Option<Piece>,
    lin_ineq: Vec<LinearConstraint>,
    lin_eq: Vec<LinearConstraint>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    start: Vec<f64>,
    hint: Option<Vec<f64>>,
}

/// Pin variables determined by single-variable equality rows or degenerate
/// bounds, then drop constraints that became variable-free. The feasible use
/// case is equality structures like "a single association entry must be 1",
/// which would otherwise leave zero-slack inequalities the barrier cannot
/// handle.
fn presolve(problem: &MaximinProblem) -> Result<Reduced, SolveError> {
    let n = problem.dim;
    let mut fixed: Vec<Option<f64>> = vec![None; n];
    for i in 0..n {
        if problem.lower[i] == problem.upper[i] {
            fixed[i] = Some(problem.lower[i]);
        }
    }
    let eq_rows: Vec<LinearConstraint> = problem.lin_eq.clone();
    loop {
        let mut changed = false;
        for row in &eq_rows {
            let mut free = Vec::new();
            let mut partial = row.rhs;
            for &(i, w) in &row.coeffs {
                match fixed[i] {
                    Some(v) => partial -= w * v,
                    None => free.push((i, w)),
                }
            }
            if free.len() == 1 {
                let (i, w) = free[0];
                fixed[i] = Some(partial / w);
                changed = true;
            } else if free.is_empty() && partial.abs() > 1e-7 {
                return Err(SolveError::InconsistentFixed(format!("equality residual {partial:.3e}")));
            }
        }
        if !changed {
            break;
        }
    }

    let keep: Vec<usize> = (0..n).filter(|&i| fixed[i].is_none()).collect();
    let pos: std::collections::HashMap<usize, usize> =
        keep.iter().enumerate().map(|(new, &old)| (old, new)).collect();

    let map_row = |row: &LinearConstraint| -> Option<LinearConstraint> {
        let mut rhs = row.rhs;
        let mut coeffs = Vec::new();
        for &(i, w) in &row.coeffs {
            match fixed[i] {
                Some(v) => rhs -= w * v,
                None => coeffs.push((pos[&i], w)),
            }
        }
        if coeffs.is_empty() {
            None
        } else {
            Some(LinearConstraint { coeffs, rhs })
        }
    };

    let mut lin_ineq = Vec::new();
    for row in &problem.lin_ineq {
        match map_row(row) {
            Some(r) => lin_ineq.push(r),
            None => {
                let residual: f64 = row
                    .coeffs
                    .iter()
                    .map(|&(i, w)| w * fixed[i].unwrap())
                    .sum::<f64>()
                    - row.rhs;
                if residual > 1e-7 {
                    return Err(SolveError::InconsistentFixed(format!("inequality residual {residual:.3e}")));
                }
            }
        }
    }
    let lin_eq: Vec<LinearConstraint> = eq_rows.iter().filter_map(map_row).collect();

    let project = |x: &[f64]| keep.iter().map(|&i| x[i]).collect::<Vec<f64>>();
    Ok(Reduced {
        pieces: problem.pieces.iter().map(|p| p.substitute(&keep, &fixed)).collect(),
        extra: problem.extra.as_ref().map(|p| p.substitute(&keep, &fixed)),
        lin_ineq,
        lin_eq,
        lower: keep.iter().map(|&i| problem.lower[i]).collect(),
        upper: keep.iter().map(|&i| problem.upper[i]).collect(),
        start: project(&problem.start),
        hint: problem.interior_hint.as_ref().map(|h| project(h)),
        keep,
        fixed,
    })
}

/// Minimum slack over linear inequalities and finite bounds.
fn min_slack(r: &Reduced, x: &[f64]) -> f64 {
    let mut s = f64::INFINITY;
    for c in &r.lin_ineq {
        s = s.min(c.rhs - c.lhs(x));
    }
    for i in 0..x.len() {
        if r.lower[i].is_finite() {
            s = s.min(x[i] - r.lower[i]);
        }
        if r.upper[i].is_finite() {
            s = s.min(r.upper[i] - x[i]);
        }
    }
    s
}

fn barrier_solve(
    problem: &MaximinProblem,
    r: &Reduced,
    tol_kkt: f64,
    max_iter: usize,
) -> SolveReport {
    let n = r.keep.len();
    let fail = |iterations: usize| SolveReport {
        solution: problem.start.clone(),
        value: f64::NEG_INFINITY,
        max_violation: f64::INFINITY,
        stationarity_residual: f64::INFINITY,
        iterations,
        status: SolveStatus::NumericalFailure,
    };

    // Strictly interior start: nudge toward the hint if the warm start sits
    // on the boundary of the linear constraints.
    let mut x = r.start.clone();
    if min_slack(r, &x) <= 1e-10 {
        let Some(hint) = &r.hint else { return fail(0) };
        let mut theta = 1e-6;
        let mut ok = false;
        while theta <= 0.5 + 1e-12 {
            let cand: Vec<f64> =
                x.iter().zip(hint.iter()).map(|(&a, &b)| (1.0 - theta) * a + theta * b).collect();
            if min_slack(r, &cand) > 1e-12 {
                x = cand;
                ok = true;
                break;
            }
            theta *= 10.0;
        }
        if !ok {
            return fail(0);
        }
    }

    // Epigraph variable starts strictly below the minimum piece value.
    let min_piece = r.pieces.iter().map(|p| p.value(&x)).fold(f64::INFINITY, f64::min);
    if !min_piece.is_finite() {
        return fail(0);
    }
    let mut t = min_piece - 0.1 * min_piece.abs().max(1.0);

    let n_ineq = r.lin_ineq.len()
        + r.pieces.len()
        + (0..n).filter(|&i| r.lower[i].is_finite()).count()
        + (0..n).filter(|&i| r.upper[i].is_finite()).count();

    // Equality matrix over (x, t); t has no equality involvement.
    let n_eq = r.lin_eq.len();
    let mut a_eq = DMatrix::zeros(n_eq, n + 1);
    for (row, c) in r.lin_eq.iter().enumerate() {
        for &(i, w) in &c.coeffs {
            a_eq[(row, i)] = w;
        }
    }

    let mut t_barrier = 1.0f64;
    let mu = 20.0f64;
    let mut iterations = 0usize;
    let mut grad = DVector::zeros(n + 1);
    let mut piece_grad = DVector::zeros(n);

    // Barrier objective F(z) = t_barrier * (-t - extra) - sum log(slacks).
    let eval_f = |x: &[f64], t: f64, tb: f64| -> f64 {
        let mut f = -tb * t;
        if let Some(e) = &r.extra {
            f -= tb * e.value(x);
        }
        for p in &r.pieces {
            let w = p.value(x) - t;
            if w <= 0.0 {
                return f64::INFINITY;
            }
            f -= w.ln();
        }
        for c in &r.lin_ineq {
            let s = c.rhs - c.lhs(x);
            if s <= 0.0 {
                return f64::INFINITY;
            }
            f -= s.ln();
        }
        for i in 0..x.len() {
            if r.lower[i].is_finite() {
                let s = x[i] - r.lower[i];
                if s <= 0.0 {
                    return f64::INFINITY;
                }
                f -= s.ln();
            }
            if r.upper[i].is_finite() {
                let s = r.upper[i] - x[i];
                if s <= 0.0 {
                    return f64::INFINITY;
                }
                f -= s.ln();
            }
        }
        f
    };

    while n_ineq as f64 / t_barrier > tol_kkt {
        // Newton minimization at the current barrier weight.
        for _ in 0..60 {
            if iterations >= max_iter.max(60) * 60 {
                break;
            }
            iterations += 1;

            grad.fill(0.0);
            let mut hess = DMatrix::zeros(n + 1, n + 1);
            grad[n] = -t_barrier;
            if let Some(e) = &r.extra {
                e.gradient(&x, &mut piece_grad);
                for i in 0..n {
                    grad[i] -= t_barrier * piece_grad[i];
                }
                let mut eh = DMatrix::zeros(n, n);
                e.add_scaled_hessian(&x, -t_barrier, &mut eh);
                for i in 0..n {
                    for j in 0..n {
                        hess[(i, j)] += eh[(i, j)];
                    }
                }
            }
            // Piece epigraph constraints: w = f_k(x) - t > 0.
            for p in &r.pieces {
                let w = p.value(&x) - t;
                p.gradient(&x, &mut piece_grad);
                // grad of -log w: -(grad f, -1)/w
                let inv_w = 1.0 / w;
                for i in 0..n {
                    grad[i] -= piece_grad[i] * inv_w;
                }
                grad[n] += inv_w;
                // Hessian: (dw dw')/w^2 - (d2w)/w with d2w = diag(hess f, 0).
                let inv_w2 = inv_w * inv_w;
                for i in 0..n {
                    for j in 0..n {
                        hess[(i, j)] += piece_grad[i] * piece_grad[j] * inv_w2;
                    }
                    hess[(i, n)] -= piece_grad[i] * inv_w2;
                    hess[(n, i)] -= piece_grad[i] * inv_w2;
                }
                hess[(n, n)] += inv_w2;
                p.add_scaled_hessian(&x, -inv_w, &mut hess);
            }
            for c in &r.lin_ineq {
                let s = c.rhs - c.lhs(&x);
                let inv_s = 1.0 / s;
                for &(i, w) in &c.coeffs {
                    grad[i] += w * inv_s;
                }
                let inv_s2 = inv_s * inv_s;
                for &(i, wi) in &c.coeffs {
                    for &(j, wj) in &c.coeffs {
                        hess[(i, j)] += wi * wj * inv_s2;
                    }
                }
            }
            for i in 0..n {
                if r.lower[i].is_finite() {
                    let s = x[i] - r.lower[i];
                    grad[i] -= 1.0 / s;
                    hess[(i, i)] += 1.0 / (s * s);
                }
                if r.upper[i].is_finite() {
                    let s = r.upper[i] - x[i];
                    grad[i] += 1.0 / s;
                    hess[(i, i)] += 1.0 / (s * s);
                }
            }
            for i in 0..=n {
                hess[(i, i)] += 1e-10; // ridge against exact singularity
            }

            // KKT system for the equality-constrained Newton step.
            let total = n + 1 + n_eq;
            let mut kkt = DMatrix::zeros(total, total);
            kkt.view_mut((0, 0), (n + 1, n + 1)).copy_from(&hess);
            if n_eq > 0 {
                kkt.view_mut((0, n + 1), (n + 1, n_eq)).copy_from(&a_eq.transpose());
                kkt.view_mut((n + 1, 0), (n_eq, n + 1)).copy_from(&a_eq);
            }
            let mut rhs = DVector::zeros(total);
            for i in 0..=n {
                rhs[i] = -grad[i];
            }
            // Residual correction keeps the iterates on the equality
            // manifold despite accumulated roundoff in the block solves.
            for (row, c) in r.lin_eq.iter().enumerate() {
                rhs[n + 1 + row] = c.rhs - c.lhs(&x);
            }
            let Some(sol) = kkt.lu().solve(&rhs) else {
                return fail(iterations);
            };
            let step: DVector<f64> = sol.rows(0, n + 1).into_owned();
            let decrement = -grad.dot(&step);
            if !decrement.is_finite() {
                return fail(iterations);
            }
            if decrement <= 2e-9 {
                break;
            }

            // Backtracking with strict feasibility via the barrier's +inf.
            let f0 = eval_f(&x, t, t_barrier);
            let mut alpha = 1.0f64;
            let mut accepted = false;
            for _ in 0..60 {
                let cand_x: Vec<f64> = (0..n).map(|i| x[i] + alpha * step[i]).collect();
                let cand_t = t + alpha * step[n];
                let f1 = eval_f(&cand_x, cand_t, t_barrier);
                if f1 <= f0 - 0.1 * alpha * decrement {
                    x = cand_x;
                    t = cand_t;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        t_barrier *= mu;
    }

    // Lift back to the full coordinate space.
    let mut full = vec![0.0; problem.dim];
    for (new, &old) in r.keep.iter().enumerate() {
        full[old] = x[new];
    }
    for i in 0..problem.dim {
        if let Some(v) = r.fixed[i] {
            full[i] = v;
        }
    }
    let value = problem.objective(&full);
    let max_violation = problem.violation(&full);
    SolveReport {
        solution: full,
        value,
        max_violation,
        stationarity_residual: n_ineq as f64 / t_barrier,
        iterations,
        status: SolveStatus::Converged,
    }
}
