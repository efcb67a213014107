//! Dense convex quadratic programming.
//!
//! ```text
//! minimize    0.5 * x' H x + g' x
//! subject to  A_eq x  = b_eq
//!             A_in x <= b_in
//! ```
//!
//! `solve` runs a dual active-set method: it starts from the unconstrained
//! minimizer and adds violated constraints one at a time, updating a
//! factorization of the active set by Givens rotations. Strict convexity is
//! guaranteed by a tiny diagonal ridge, every pivot is chosen by a fixed
//! deterministic rule, and the returned solution carries the KKT residuals
//! as a certificate. Single-coefficient equality rows (variable pins, the
//! bulk of the rows in rollout problems) are eliminated exactly before the
//! iteration starts.
//!
//! [`enumerate_solve`] is an independent reference solver for tests: it
//! brute-forces every active subset of the inequalities, which is exact for
//! small problems and shares no code with the main path.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::fmt::{format_g, schema_line, SIG_EXACT};
use crate::scalar::{real, Real};

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("H is not symmetric: max asymmetry {max_asym:e} exceeds 1e-12 * scale")]
    Asymmetric { max_asym: f64 },
    #[error("H is not positive semidefinite (Cholesky failed after ridge)")]
    NotPsd,
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
}

/// Termination status of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

/// Solver knobs; the defaults are what every caller in this crate uses.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig<T: Real> {
    /// Residual tolerance the certificate is checked against.
    pub tol: T,
    /// Cap on active-set changes (adds plus drops).
    pub max_iter: usize,
    /// Diagonal regularization added to H before factorization.
    pub ridge: T,
}

impl<T: Real> Default for SolverConfig<T> {
    fn default() -> Self {
        Self {
            tol: real(1e-6),
            max_iter: 4000,
            ridge: real(1e-9),
        }
    }
}

/// A dense QP instance.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem<T: Real> {
    pub h: DMatrix<T>,
    pub g: DVector<T>,
    pub a_eq: DMatrix<T>,
    pub b_eq: DVector<T>,
    pub a_in: DMatrix<T>,
    pub b_in: DVector<T>,
}

impl<T: Real> QpProblem<T> {
    /// Unconstrained problem with empty constraint blocks.
    pub fn unconstrained(h: DMatrix<T>, g: DVector<T>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.g.len()
    }

    /// Checks shapes, finiteness and symmetry of `H`.
    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.num_vars();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(QpError::Dimensions(format!(
                "H is {}x{}, expected {n}x{n}",
                self.h.nrows(),
                self.h.ncols()
            )));
        }
        if self.a_eq.nrows() != self.b_eq.len() || (self.a_eq.nrows() > 0 && self.a_eq.ncols() != n)
        {
            return Err(QpError::Dimensions(format!(
                "equality block is {}x{} with rhs {}",
                self.a_eq.nrows(),
                self.a_eq.ncols(),
                self.b_eq.len()
            )));
        }
        if self.a_in.nrows() != self.b_in.len() || (self.a_in.nrows() > 0 && self.a_in.ncols() != n)
        {
            return Err(QpError::Dimensions(format!(
                "inequality block is {}x{} with rhs {}",
                self.a_in.nrows(),
                self.a_in.ncols(),
                self.b_in.len()
            )));
        }
        for (name, ok) in [
            ("H", self.h.iter().all(|c| c.is_finite())),
            ("g", self.g.iter().all(|c| c.is_finite())),
            ("A_eq", self.a_eq.iter().all(|c| c.is_finite())),
            ("b_eq", self.b_eq.iter().all(|c| c.is_finite())),
            ("A_in", self.a_in.iter().all(|c| c.is_finite())),
            ("b_in", self.b_in.iter().all(|c| c.is_finite())),
        ] {
            if !ok {
                return Err(QpError::NonFinite(name));
            }
        }
        let mut max_asym = T::zero();
        let mut scale = T::one();
        for i in 0..n {
            for j in (i + 1)..n {
                max_asym = max_asym.max((self.h[(i, j)] - self.h[(j, i)]).abs());
            }
            scale = scale.max(self.h[(i, i)].abs());
        }
        if max_asym > real::<T>(1e-12) * scale {
            return Err(QpError::Asymmetric {
                max_asym: max_asym.to_f64(),
            });
        }
        Ok(())
    }

    /// `0.5 x' H x + g' x`.
    pub fn objective(&self, x: &DVector<T>) -> T {
        (&self.h * x).dot(x) * real(0.5) + self.g.dot(x)
    }

    /// Text dump: schema line, then each block as `NAME rows cols` followed
    /// by row-major entries at 17 significant digits.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        out.push_str(&schema_line("qp-problem"));
        out.push('\n');
        let mut block = |name: &str, rows: usize, cols: usize, data: &mut dyn Iterator<Item = T>| {
            out.push_str(&format!("{name} {rows} {cols}\n"));
            for _ in 0..rows {
                let row: Vec<String> = (0..cols)
                    .map(|_| format_g(data.next().expect("block size").to_f64(), SIG_EXACT))
                    .collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        };
        let n = self.num_vars();
        block("H", self.h.nrows(), n, &mut self.h.row_iter().flat_map(|r| {
            r.iter().copied().collect::<Vec<_>>()
        }));
        block("g", 1, n, &mut self.g.iter().copied());
        block(
            "A_eq",
            self.a_eq.nrows(),
            n,
            &mut self.a_eq.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()),
        );
        block("b_eq", 1, self.b_eq.len(), &mut self.b_eq.iter().copied());
        block(
            "A_in",
            self.a_in.nrows(),
            n,
            &mut self.a_in.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()),
        );
        block("b_in", 1, self.b_in.len(), &mut self.b_in.iter().copied());
        out
    }
}

/// KKT residuals of a candidate primal/dual pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResidual<T: Real> {
    /// Infinity norm of `H x + g + A_eq' nu + A_in' lambda`.
    pub stationarity: T,
    /// Infinity norm of the equality residual.
    pub primal_eq: T,
    /// Largest positive inequality violation.
    pub primal_in: T,
    /// Largest `|lambda_i * (A_in x - b_in)_i|`.
    pub complementarity: T,
}

impl<T: Real> KktResidual<T> {
    pub fn max(&self) -> T {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_in)
            .max(self.complementarity)
    }
}

/// Computes the KKT residuals of `(x, nu, lambda)` for `problem`.
pub fn kkt_residual<T: Real>(
    problem: &QpProblem<T>,
    x: &DVector<T>,
    eq_duals: &DVector<T>,
    in_duals: &DVector<T>,
) -> KktResidual<T> {
    let mut grad = &problem.h * x + &problem.g;
    if problem.a_eq.nrows() > 0 {
        grad += problem.a_eq.transpose() * eq_duals;
    }
    if problem.a_in.nrows() > 0 {
        grad += problem.a_in.transpose() * in_duals;
    }
    let stationarity = grad.amax();

    let primal_eq = if problem.a_eq.nrows() > 0 {
        (problem.a_eq.clone() * x - &problem.b_eq).amax()
    } else {
        T::zero()
    };

    let mut primal_in = T::zero();
    let mut complementarity = T::zero();
    if problem.a_in.nrows() > 0 {
        let slack = problem.a_in.clone() * x - &problem.b_in;
        for i in 0..slack.len() {
            primal_in = primal_in.max(slack[i]);
            complementarity = complementarity.max((in_duals[i] * slack[i]).abs());
        }
        primal_in = primal_in.max(T::zero());
    }

    KktResidual {
        stationarity,
        primal_eq,
        primal_in,
        complementarity,
    }
}

/// Solution bundle; duals follow the convention
/// `H x + g + A_eq' nu + A_in' lambda = 0`, `lambda >= 0`.
#[derive(Debug, Clone)]
pub struct QpSolution<T: Real> {
    pub x: DVector<T>,
    pub objective: T,
    pub status: QpStatus,
    pub residuals: KktResidual<T>,
    pub iterations: usize,
    pub eq_duals: DVector<T>,
    pub in_duals: DVector<T>,
}

/// Active inequality rows from a previous solve of a related problem.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub active_inequalities: Vec<usize>,
}

impl WarmStart {
    /// Extracts the active set (positive duals) from a solution.
    pub fn from_solution<T: Real>(solution: &QpSolution<T>, tol: T) -> Self {
        let active = (0..solution.in_duals.len())
            .filter(|&i| solution.in_duals[i] > tol)
            .collect();
        Self {
            active_inequalities: active,
        }
    }
}

/// Solves `problem` with default warm-start behavior (none).
pub fn solve<T: Real>(
    problem: &QpProblem<T>,
    cfg: &SolverConfig<T>,
) -> Result<QpSolution<T>, QpError> {
    solve_warm(problem, cfg, None)
}

/// Solves `problem`, preferring `warm` active rows as the first candidates.
///
/// Re-solving an unchanged problem warm-started from its own solution takes
/// no more iterations than the cold solve.
pub fn solve_warm<T: Real>(
    problem: &QpProblem<T>,
    cfg: &SolverConfig<T>,
    warm: Option<&WarmStart>,
) -> Result<QpSolution<T>, QpError> {
    problem.validate()?;
    let n = problem.num_vars();

    // Symmetrize and regularize.
    let mut h = DMatrix::<T>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            h[(i, j)] = (problem.h[(i, j)] + problem.h[(j, i)]) * real(0.5);
        }
        h[(i, i)] += cfg.ridge;
    }

    let presolve = eliminate_pins(problem, &h, cfg)?;
    let finish = |x: DVector<T>,
                  eq_duals: DVector<T>,
                  in_duals: DVector<T>,
                  status: QpStatus,
                  iterations: usize| {
        let residuals = kkt_residual(problem, &x, &eq_duals, &in_duals);
        QpSolution {
            objective: problem.objective(&x),
            x,
            status,
            residuals,
            iterations,
            eq_duals,
            in_duals,
        }
    };

    let pre = match presolve {
        Presolved::Infeasible { x } => {
            return Ok(finish(
                x,
                DVector::zeros(problem.a_eq.nrows()),
                DVector::zeros(problem.a_in.nrows()),
                QpStatus::Infeasible,
                0,
            ))
        }
        Presolved::Ready(p) => p,
    };

    let inner = dual_active_set(&pre, cfg, warm)?;

    // Scatter the reduced solution and duals back to original indexing.
    let mut x = DVector::<T>::zeros(n);
    for (&var, &val) in pre.free_vars.iter().zip(inner.x.iter()) {
        x[var] = val;
    }
    for &(var, val) in &pre.pinned {
        x[var] = val;
    }

    let mut eq_duals = DVector::<T>::zeros(problem.a_eq.nrows());
    for (slot, &row) in pre.general_eq_rows.iter().enumerate() {
        eq_duals[row] = inner.eq_duals[slot];
    }
    let mut in_duals = DVector::<T>::zeros(problem.a_in.nrows());
    for (slot, &row) in pre.kept_in_rows.iter().enumerate() {
        in_duals[row] = inner.in_duals[slot];
    }

    // Duals of the pin rows come from the stationarity condition on the
    // pinned coordinates; each pinned variable charges its first pin row.
    if !pre.pinned.is_empty() {
        let mut grad = &h * &x + &problem.g;
        grad -= DVector::from_element(n, cfg.ridge).component_mul(&x); // undo ridge
        if problem.a_eq.nrows() > 0 {
            grad += problem.a_eq.transpose() * &eq_duals;
        }
        if problem.a_in.nrows() > 0 {
            grad += problem.a_in.transpose() * &in_duals;
        }
        for &(var, _) in &pre.pinned {
            let row = pre.pin_row_for_var[var].expect("pinned var has a pin row");
            let coeff = problem.a_eq[(row, var)];
            eq_duals[row] = -grad[var] / coeff;
        }
    }

    if inner.status == QpStatus::Optimal {
        polish(problem, cfg, &mut x, &mut eq_duals, &mut in_duals);
    }

    Ok(finish(x, eq_duals, in_duals, inner.status, inner.iterations))
}

/// One Newton/KKT refinement on the original (unridged) problem using the
/// discovered active set. Removes the ridge bias from the iterate; rejected
/// (leaving the inputs untouched) if the refit is singular, pushes a dual
/// negative, or violates an inactive row.
fn polish<T: Real>(
    problem: &QpProblem<T>,
    cfg: &SolverConfig<T>,
    x: &mut DVector<T>,
    eq_duals: &mut DVector<T>,
    in_duals: &mut DVector<T>,
) {
    let n = problem.num_vars();
    let p = problem.a_eq.nrows();
    let active: Vec<usize> = (0..in_duals.len())
        .filter(|&i| in_duals[i] > T::zero())
        .collect();
    let m = p + active.len();
    let dim = n + m;

    let mut kkt = DMatrix::<T>::zeros(dim, dim);
    let mut rhs = DVector::<T>::zeros(dim);
    for i in 0..n {
        for jj in 0..n {
            kkt[(i, jj)] = (problem.h[(i, jj)] + problem.h[(jj, i)]) * real(0.5);
        }
        rhs[i] = -problem.g[i];
    }
    for row in 0..p {
        for col in 0..n {
            kkt[(n + row, col)] = problem.a_eq[(row, col)];
            kkt[(col, n + row)] = problem.a_eq[(row, col)];
        }
        rhs[n + row] = problem.b_eq[row];
    }
    for (slot, &row) in active.iter().enumerate() {
        let at = n + p + slot;
        for col in 0..n {
            kkt[(at, col)] = problem.a_in[(row, col)];
            kkt[(col, at)] = problem.a_in[(row, col)];
        }
        rhs[at] = problem.b_in[row];
    }

    let Some(sol) = kkt.clone().lu().solve(&rhs) else {
        return;
    };
    let scale = rhs.amax().max(T::one());
    if (&kkt * &sol - &rhs).amax() > real::<T>(1e-10) * scale {
        return;
    }
    for (slot, _) in active.iter().enumerate() {
        if sol[n + p + slot] < -cfg.tol {
            return;
        }
    }
    let x_new = sol.rows(0, n).into_owned();
    for row in 0..problem.a_in.nrows() {
        if active.contains(&row) {
            continue;
        }
        let slack = problem.a_in.row(row).transpose().dot(&x_new) - problem.b_in[row];
        if slack > cfg.tol {
            return;
        }
    }

    *x = x_new;
    for row in 0..p {
        eq_duals[row] = sol[n + row];
    }
    in_duals.fill(T::zero());
    for (slot, &row) in active.iter().enumerate() {
        in_duals[row] = sol[n + p + slot].max(T::zero());
    }
}

/// Reduced problem after pin elimination, in original ordering maps.
struct PreparedQp<T: Real> {
    h: DMatrix<T>,
    g: DVector<T>,
    /// General equality rows (normals, levels) in reduced coordinates.
    eq_rows: DMatrix<T>,
    eq_rhs: DVector<T>,
    in_rows: DMatrix<T>,
    in_rhs: DVector<T>,
    free_vars: Vec<usize>,
    pinned: Vec<(usize, T)>,
    pin_row_for_var: Vec<Option<usize>>,
    general_eq_rows: Vec<usize>,
    kept_in_rows: Vec<usize>,
}

enum Presolved<T: Real> {
    Ready(PreparedQp<T>),
    Infeasible { x: DVector<T> },
}

/// Detects single-coefficient equality rows and substitutes the pinned
/// variables out of the problem, iterating until no new pins appear.
fn eliminate_pins<T: Real>(
    problem: &QpProblem<T>,
    h: &DMatrix<T>,
    cfg: &SolverConfig<T>,
) -> Result<Presolved<T>, QpError> {
    let n = problem.num_vars();
    let p = problem.a_eq.nrows();
    let feas_tol = cfg.tol;

    let mut pinned_value: Vec<Option<T>> = vec![None; n];
    let mut pin_row_for_var: Vec<Option<usize>> = vec![None; n];
    let mut row_done = vec![false; p];
    let mut general_eq_rows = Vec::new();

    // Iterate: substituting pins can turn other rows into pins.
    loop {
        let mut changed = false;
        for row in 0..p {
            if row_done[row] {
                continue;
            }
            let mut nonzero = Vec::new();
            let mut rhs = problem.b_eq[row];
            for col in 0..n {
                let coeff = problem.a_eq[(row, col)];
                if coeff == T::zero() {
                    continue;
                }
                match pinned_value[col] {
                    Some(v) => rhs -= coeff * v,
                    None => nonzero.push(col),
                }
            }
            match nonzero.len() {
                0 => {
                    row_done[row] = true;
                    changed = true;
                    if rhs.abs() > feas_tol {
                        return Ok(Presolved::Infeasible {
                            x: best_effort_x(&pinned_value),
                        });
                    }
                }
                1 => {
                    let var = nonzero[0];
                    let value = rhs / problem.a_eq[(row, var)];
                    pinned_value[var] = Some(value);
                    pin_row_for_var[var] = Some(row);
                    row_done[row] = true;
                    changed = true;
                }
                _ => {}
            }
        }
        if !changed {
            break;
        }
    }
    for row in 0..p {
        if !row_done[row] {
            general_eq_rows.push(row);
        }
    }

    let free_vars: Vec<usize> = (0..n).filter(|&i| pinned_value[i].is_none()).collect();
    let var_slot: Vec<Option<usize>> = {
        let mut slots = vec![None; n];
        for (s, &v) in free_vars.iter().enumerate() {
            slots[v] = Some(s);
        }
        slots
    };
    let nf = free_vars.len();
    let pinned: Vec<(usize, T)> = (0..n)
        .filter_map(|i| pinned_value[i].map(|v| (i, v)))
        .collect();

    // Reduced quadratic: H'[s,t] = H[vs,vt]; g'[s] = g[vs] + sum_j H[vs,j] xj.
    let mut h_red = DMatrix::<T>::zeros(nf, nf);
    let mut g_red = DVector::<T>::zeros(nf);
    for (s, &vs) in free_vars.iter().enumerate() {
        for (t, &vt) in free_vars.iter().enumerate() {
            h_red[(s, t)] = h[(vs, vt)];
        }
        let mut gv = problem.g[vs];
        for &(var, val) in &pinned {
            gv += h[(vs, var)] * val;
        }
        g_red[s] = gv;
    }

    // Reduced general equalities.
    let mut eq_rows = DMatrix::<T>::zeros(general_eq_rows.len(), nf);
    let mut eq_rhs = DVector::<T>::zeros(general_eq_rows.len());
    for (slot, &row) in general_eq_rows.iter().enumerate() {
        let mut rhs = problem.b_eq[row];
        for col in 0..n {
            let coeff = problem.a_eq[(row, col)];
            if coeff == T::zero() {
                continue;
            }
            match var_slot[col] {
                Some(s) => eq_rows[(slot, s)] = coeff,
                None => rhs -= coeff * pinned_value[col].unwrap(),
            }
        }
        eq_rhs[slot] = rhs;
    }

    // Reduced inequalities; rows with no free support are checked directly.
    let q = problem.a_in.nrows();
    let mut kept_in_rows = Vec::new();
    let mut in_data = Vec::new();
    let mut in_rhs_data = Vec::new();
    for row in 0..q {
        let mut rhs = problem.b_in[row];
        let mut reduced = vec![T::zero(); nf];
        let mut support = false;
        for col in 0..n {
            let coeff = problem.a_in[(row, col)];
            if coeff == T::zero() {
                continue;
            }
            match var_slot[col] {
                Some(s) => {
                    reduced[s] = coeff;
                    support = true;
                }
                None => rhs -= coeff * pinned_value[col].unwrap(),
            }
        }
        if support {
            kept_in_rows.push(row);
            in_data.extend_from_slice(&reduced);
            in_rhs_data.push(rhs);
        } else if rhs < -feas_tol {
            return Ok(Presolved::Infeasible {
                x: best_effort_x(&pinned_value),
            });
        }
    }
    let in_rows = DMatrix::from_row_slice(kept_in_rows.len(), nf, &in_data);
    let in_rhs = DVector::from_vec(in_rhs_data);

    Ok(Presolved::Ready(PreparedQp {
        h: h_red,
        g: g_red,
        eq_rows,
        eq_rhs,
        in_rows,
        in_rhs,
        free_vars,
        pinned,
        pin_row_for_var,
        general_eq_rows,
        kept_in_rows,
    }))
}

fn best_effort_x<T: Real>(pinned: &[Option<T>]) -> DVector<T> {
    DVector::from_iterator(pinned.len(), pinned.iter().map(|p| p.unwrap_or(T::zero())))
}

struct InnerSolution<T: Real> {
    x: DVector<T>,
    eq_duals: DVector<T>,
    in_duals: DVector<T>,
    status: QpStatus,
    iterations: usize,
}

/// Dual active-set iteration on the reduced problem.
///
/// Equality rows are forced into the active set first and never leave it;
/// inequality rows enter by most-normalized-violation order (warm-start rows
/// first) and can be dropped when they block a dual step.
fn dual_active_set<T: Real>(
    pre: &PreparedQp<T>,
    cfg: &SolverConfig<T>,
    warm: Option<&WarmStart>,
) -> Result<InnerSolution<T>, QpError> {
    let n = pre.h.nrows();
    let m_eq = pre.eq_rows.nrows();
    let m_in = pre.in_rows.nrows();

    let make = |x: DVector<T>,
                active: &[usize],
                duals: &[T],
                eq_flip: &[bool],
                status: QpStatus,
                iters: usize| {
        let mut eq_duals = DVector::<T>::zeros(m_eq);
        let mut in_duals = DVector::<T>::zeros(m_in);
        for (&id, &u) in active.iter().zip(duals.iter()) {
            if id < m_eq {
                eq_duals[id] = if eq_flip[id] { u } else { -u };
            } else {
                in_duals[id - m_eq] = u;
            }
        }
        InnerSolution {
            x,
            eq_duals,
            in_duals,
            status,
            iterations: iters,
        }
    };

    if n == 0 {
        // Everything was pinned; feasibility was already checked.
        return Ok(make(
            DVector::zeros(0),
            &[],
            &[],
            &vec![false; m_eq],
            QpStatus::Optimal,
            0,
        ));
    }

    let chol = pre.h.clone().cholesky().ok_or(QpError::NotPsd)?;
    let l = chol.l();
    let mut x = chol.solve(&(-&pre.g));

    // J = L^-T; J J' = H^-1. Columns beyond the active count span the free
    // directions.
    let mut j = l
        .transpose()
        .solve_upper_triangular(&DMatrix::<T>::identity(n, n))
        .ok_or(QpError::NotPsd)?;
    let mut r = DMatrix::<T>::zeros(n, n);
    let mut active: Vec<usize> = Vec::new();
    let mut duals: Vec<T> = Vec::new();
    let mut eq_flip = vec![false; m_eq];
    let mut iterations = 0usize;

    // Constraint accessors in the ">=" working convention: equalities keep
    // their sign (flipped on demand), inequalities are negated.
    let normal = |id: usize, flip: &[bool]| -> DVector<T> {
        if id < m_eq {
            let row = pre.eq_rows.row(id).transpose();
            if flip[id] {
                -row
            } else {
                row.into_owned()
            }
        } else {
            -pre.in_rows.row(id - m_eq).transpose()
        }
    };
    let level = |id: usize, flip: &[bool]| -> T {
        if id < m_eq {
            if flip[id] {
                -pre.eq_rhs[id]
            } else {
                pre.eq_rhs[id]
            }
        } else {
            -pre.in_rhs[id - m_eq]
        }
    };

    let row_scale = |id: usize| -> T {
        let norm = if id < m_eq {
            pre.eq_rows.row(id).amax()
        } else {
            pre.in_rows.row(id - m_eq).amax()
        };
        norm.max(T::one())
    };

    let pick_tol = cfg.tol * real(1e-3);
    let mut next_eq = 0usize;
    let warm_rows: Vec<usize> = warm
        .map(|w| {
            w.active_inequalities
                .iter()
                .filter(|&&row| row < m_in)
                .map(|&row| m_eq + row)
                .collect()
        })
        .unwrap_or_default();

    'outer: loop {
        // Candidate selection.
        let cand = if next_eq < m_eq {
            let id = next_eq;
            next_eq += 1;
            // Orient the equality so its violation is negative.
            let s = pre.eq_rows.row(id).transpose().dot(&x) - pre.eq_rhs[id];
            eq_flip[id] = s > T::zero();
            Some(id)
        } else {
            // Most-violated normalized slack wins; ties go to the lowest
            // index. Warm-start rows are screened first and, if any of them
            // is violated, preferred outright.
            let most_violated = |ids: &mut dyn Iterator<Item = usize>| -> Option<usize> {
                let mut best: Option<(T, usize)> = None;
                for id in ids {
                    if active.contains(&id) {
                        continue;
                    }
                    let s = (normal(id, &eq_flip).dot(&x) - level(id, &eq_flip)) / row_scale(id);
                    if s < -pick_tol && best.map(|(sb, ib)| s < sb || (s == sb && id < ib)).unwrap_or(true) {
                        best = Some((s, id));
                    }
                }
                best.map(|(_, id)| id)
            };
            most_violated(&mut warm_rows.iter().copied())
                .or_else(|| most_violated(&mut (m_eq..m_eq + m_in)))
        };
        let Some(cand_id) = cand else {
            return Ok(make(x, &active, &duals, &eq_flip, QpStatus::Optimal, iterations));
        };

        let n_plus = normal(cand_id, &eq_flip);
        let beta_plus = level(cand_id, &eq_flip);
        let mut u_plus = T::zero();

        // Inner loop: take steps (dropping blockers) until the candidate is
        // satisfied and added, skipped, or infeasibility is proven.
        loop {
            if iterations >= cfg.max_iter {
                return Ok(make(
                    x,
                    &active,
                    &duals,
                    &eq_flip,
                    QpStatus::MaxIterations,
                    iterations,
                ));
            }
            let k = active.len();
            let u = j.transpose() * &n_plus;
            let u_inf = u.amax().max(T::one());
            let z_zero = (k..n)
                .map(|i| u[i].abs())
                .fold(T::zero(), |a, b| a.max(b))
                <= real::<T>(1e-12) * u_inf;

            // Dual step direction for the active duals.
            let rvec = if k > 0 {
                let u1 = u.rows(0, k).into_owned();
                r.view((0, 0), (k, k))
                    .solve_upper_triangular(&u1)
                    .ok_or(QpError::NotPsd)?
            } else {
                DVector::zeros(0)
            };

            // Blocking dual step among active inequalities.
            let mut t1 = None;
            let mut block = None;
            for (pos, &id) in active.iter().enumerate() {
                if id < m_eq {
                    continue;
                }
                if rvec[pos] > real::<T>(1e-14) {
                    let ratio = duals[pos] / rvec[pos];
                    if t1.map(|t| ratio < t).unwrap_or(true) {
                        t1 = Some(ratio);
                        block = Some(pos);
                    }
                }
            }

            let s = n_plus.dot(&x) - beta_plus;
            if z_zero {
                match t1 {
                    None => {
                        if cand_id < m_eq && s.abs() <= cfg.tol * row_scale(cand_id) {
                            // Redundant but consistent equality.
                            continue 'outer;
                        }
                        return Ok(make(
                            x,
                            &active,
                            &duals,
                            &eq_flip,
                            QpStatus::Infeasible,
                            iterations,
                        ));
                    }
                    Some(t) => {
                        for (pos, d) in duals.iter_mut().enumerate() {
                            *d -= t * rvec[pos];
                        }
                        u_plus += t;
                        drop_active(
                            &mut j,
                            &mut r,
                            &mut active,
                            &mut duals,
                            block.expect("blocking index exists"),
                        );
                        iterations += 1;
                        continue;
                    }
                }
            }

            let zn: T = (k..n).map(|i| u[i] * u[i]).fold(T::zero(), |a, b| a + b);
            let t2 = -s / zn;
            let (t, full) = match t1 {
                Some(t1v) if t1v < t2 => (t1v, false),
                _ => (t2, true),
            };

            // Primal move along z = J2 * u2.
            if t != T::zero() {
                for row in 0..n {
                    let mut zi = T::zero();
                    for col in k..n {
                        zi += j[(row, col)] * u[col];
                    }
                    x[row] += t * zi;
                }
            }
            for (pos, d) in duals.iter_mut().enumerate() {
                *d -= t * rvec[pos];
            }
            u_plus += t;
            iterations += 1;

            if full {
                add_active(&mut j, &mut r, &mut active, &mut duals, cand_id, u_plus, u);
                continue 'outer;
            } else {
                drop_active(
                    &mut j,
                    &mut r,
                    &mut active,
                    &mut duals,
                    block.expect("blocking index exists"),
                );
            }
        }
    }
}

/// Appends the candidate to the active set, restoring the triangular
/// factorization with Givens rotations applied to `u` and the columns of `J`.
fn add_active<T: Real>(
    j: &mut DMatrix<T>,
    r: &mut DMatrix<T>,
    active: &mut Vec<usize>,
    duals: &mut Vec<T>,
    id: usize,
    u_plus: T,
    mut u: DVector<T>,
) {
    let n = j.nrows();
    let k = active.len();
    for i in ((k + 1)..n).rev() {
        let (a, b) = (u[i - 1], u[i]);
        if b == T::zero() {
            continue;
        }
        let rho = a.hypot(b);
        let (c, s) = (a / rho, b / rho);
        u[i - 1] = rho;
        u[i] = T::zero();
        for row in 0..n {
            let (ja, jb) = (j[(row, i - 1)], j[(row, i)]);
            j[(row, i - 1)] = c * ja + s * jb;
            j[(row, i)] = -s * ja + c * jb;
        }
    }
    for row in 0..=k {
        r[(row, k)] = u[row];
    }
    active.push(id);
    duals.push(u_plus);
}

/// Removes the active constraint at `pos`, re-triangularizing `R` and
/// rotating the matching columns of `J`.
fn drop_active<T: Real>(
    j: &mut DMatrix<T>,
    r: &mut DMatrix<T>,
    active: &mut Vec<usize>,
    duals: &mut Vec<T>,
    pos: usize,
) {
    let n = j.nrows();
    let k = active.len();
    active.remove(pos);
    duals.remove(pos);
    // Shift columns of R left over the removed one.
    for col in pos..(k - 1) {
        for row in 0..k {
            r[(row, col)] = r[(row, col + 1)];
        }
    }
    for row in 0..k {
        r[(row, k - 1)] = T::zero();
    }
    // Zero the subdiagonal that the shift exposed.
    for i in pos..(k - 1) {
        let (a, b) = (r[(i, i)], r[(i + 1, i)]);
        if b == T::zero() {
            continue;
        }
        let rho = a.hypot(b);
        let (c, s) = (a / rho, b / rho);
        for col in i..(k - 1) {
            let (ra, rb) = (r[(i, col)], r[(i + 1, col)]);
            r[(i, col)] = c * ra + s * rb;
            r[(i + 1, col)] = -s * ra + c * rb;
        }
        for row in 0..n {
            let (ja, jb) = (j[(row, i)], j[(row, i + 1)]);
            j[(row, i)] = c * ja + s * jb;
            j[(row, i + 1)] = -s * ja + c * jb;
        }
    }
}

/// Exhaustive reference solver: tries every subset of the inequality rows as
/// the active set, solves the resulting equality-constrained KKT system, and
/// keeps the best feasible candidate with nonnegative duals.
///
/// Exact for small problems; guards against blowup above 20 inequality rows.
pub fn enumerate_solve<T: Real>(
    problem: &QpProblem<T>,
    tol: T,
) -> Result<Option<(DVector<T>, T)>, QpError> {
    problem.validate()?;
    let n = problem.num_vars();
    let p = problem.a_eq.nrows();
    let q = problem.a_in.nrows();
    assert!(q <= 20, "enumeration oracle is limited to 20 inequality rows");

    let mut h = DMatrix::<T>::zeros(n, n);
    for i in 0..n {
        for jj in 0..n {
            h[(i, jj)] = (problem.h[(i, jj)] + problem.h[(jj, i)]) * real(0.5);
        }
    }

    let mut best: Option<(DVector<T>, T)> = None;
    for mask in 0..(1u32 << q) {
        let rows: Vec<usize> = (0..q).filter(|&i| mask >> i & 1 == 1).collect();
        let m = p + rows.len();
        if m > n {
            continue;
        }
        let dim = n + m;
        let mut kkt = DMatrix::<T>::zeros(dim, dim);
        let mut rhs = DVector::<T>::zeros(dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(&h);
        for (r_idx, row) in (0..p).enumerate() {
            for col in 0..n {
                kkt[(n + r_idx, col)] = problem.a_eq[(row, col)];
                kkt[(col, n + r_idx)] = problem.a_eq[(row, col)];
            }
            rhs[n + r_idx] = problem.b_eq[row];
        }
        for (r_idx, &row) in rows.iter().enumerate() {
            let at = n + p + r_idx;
            for col in 0..n {
                kkt[(at, col)] = problem.a_in[(row, col)];
                kkt[(col, at)] = problem.a_in[(row, col)];
            }
            rhs[at] = problem.b_in[row];
        }
        for i in 0..n {
            rhs[i] = -problem.g[i];
        }

        let lu = kkt.clone().lu();
        let Some(sol) = lu.solve(&rhs) else { continue };
        // Reject garbage from singular systems.
        let resid = (&kkt * &sol - &rhs).amax();
        let scale = rhs.amax().max(T::one());
        if resid > real::<T>(1e-8) * scale {
            continue;
        }
        let x = sol.rows(0, n).into_owned();

        // Dual feasibility of the chosen actives.
        let mut ok = true;
        for r_idx in 0..rows.len() {
            if sol[n + p + r_idx] < -tol {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }
        // Primal feasibility of everything.
        for row in 0..p {
            let resid = problem.a_eq.row(row).transpose().dot(&x) - problem.b_eq[row];
            if resid.abs() > tol {
                ok = false;
                break;
            }
        }
        if ok {
            for row in 0..q {
                let slack = problem.a_in.row(row).transpose().dot(&x) - problem.b_in[row];
                if slack > tol {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let obj = problem.objective(&x);
        if best.as_ref().map(|(_, b)| obj < *b).unwrap_or(true) {
            best = Some((x, obj));
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn cfg() -> SolverConfig<f64> {
        SolverConfig::default()
    }

    fn identity_problem() -> QpProblem<f64> {
        QpProblem::unconstrained(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-1.0, -2.0]),
        )
    }

    /// Unconstrained: x* = -g, objective -2.5.
    #[test]
    fn unconstrained_identity_hessian() {
        let sol = solve(&identity_problem(), &cfg()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.x[1], 2.0, epsilon = 1e-9);
        assert_relative_eq!(sol.objective, -2.5, epsilon = 1e-9);
        assert!(sol.residuals.max() <= 1e-9);
    }

    /// min (x-2)^2 s.t. x <= 1 lands on the bound with dual 2.
    #[test]
    fn scalar_bound_becomes_active() {
        let mut problem = QpProblem::unconstrained(
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_element(1, -4.0),
        );
        problem.a_in = DMatrix::from_element(1, 1, 1.0);
        problem.b_in = DVector::from_element(1, 1.0);
        let sol = solve(&problem, &cfg()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.in_duals[0], 2.0, epsilon = 1e-9);
        assert!(sol.residuals.complementarity <= 1e-9);
    }

    /// Pure equality: projection onto x1 + x2 = 1.
    #[test]
    fn general_equality_row() {
        let mut problem =
            QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::zeros(2));
        problem.a_eq = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        problem.b_eq = DVector::from_element(1, 1.0);
        let sol = solve(&problem, &cfg()).unwrap();
        assert_relative_eq!(sol.x[0], 0.5, epsilon = 1e-9);
        assert_relative_eq!(sol.x[1], 0.5, epsilon = 1e-9);
        assert!(sol.residuals.max() <= 1e-8);
    }

    /// Variable pins are eliminated exactly and their duals recovered.
    #[test]
    fn pinned_variables_keep_kkt_certificate() {
        let mut problem = QpProblem::unconstrained(
            DMatrix::identity(3, 3),
            DVector::from_vec(vec![-1.0, -2.0, -3.0]),
        );
        problem.a_eq = DMatrix::from_row_slice(2, 3, &[0.0, 2.0, 0.0, 0.0, 0.0, 1.0]);
        problem.b_eq = DVector::from_vec(vec![1.0, 0.0]);
        let sol = solve(&problem, &cfg()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.x[1], 0.5, epsilon = 1e-9);
        assert_relative_eq!(sol.x[2], 0.0, epsilon = 1e-9);
        assert!(sol.residuals.max() <= 1e-8, "residuals {:?}", sol.residuals);
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let mut problem =
            QpProblem::unconstrained(DMatrix::identity(1, 1), DVector::zeros(1));
        problem.a_in = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        problem.b_in = DVector::from_vec(vec![0.0, -1.0]); // x <= 0 and x >= 1
        let sol = solve(&problem, &cfg()).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn inconsistent_pins_are_infeasible() {
        let mut problem =
            QpProblem::unconstrained(DMatrix::identity(1, 1), DVector::zeros(1));
        problem.a_eq = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        problem.b_eq = DVector::from_vec(vec![0.0, 1.0]);
        let sol = solve(&problem, &cfg()).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn validation_rejects_bad_shapes_and_asymmetry() {
        let mut problem = identity_problem();
        problem.g = DVector::zeros(3);
        assert!(matches!(solve(&problem, &cfg()), Err(QpError::Dimensions(_))));

        let mut problem = identity_problem();
        problem.h[(0, 1)] = 1e-6;
        assert!(matches!(
            solve(&problem, &cfg()),
            Err(QpError::Asymmetric { .. })
        ));
    }

    fn random_problem(rng: &mut impl Rng, force_feasible: bool) -> QpProblem<f64> {
        let n = rng.gen_range(1..=6);
        let q = rng.gen_range(0..=8);
        let p = rng.gen_range(0..=2.min(n - 1));
        let m = DMatrix::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let h = &m * m.transpose() + DMatrix::identity(n, n) * 0.3;
        let g = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let a_in = DMatrix::from_fn(q, n, |_, _| rng.gen_range(-1.0..1.0));
        let a_eq = DMatrix::from_fn(p, n, |_, _| rng.gen_range(-1.0..1.0));
        let (b_in, b_eq) = if force_feasible {
            let x_f = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let slack = DVector::from_fn(q, |_, _| rng.gen_range(0.0..1.5));
            (&a_in * &x_f + slack, &a_eq * &x_f)
        } else {
            (
                DVector::from_fn(q, |_, _| rng.gen_range(-1.0..1.0)),
                DVector::from_fn(p, |_, _| rng.gen_range(-0.5..0.5)),
            )
        };
        QpProblem {
            h,
            g,
            a_eq,
            b_eq,
            a_in,
            b_in,
        }
    }

    /// Random suite against the exhaustive active-set enumeration oracle.
    #[test]
    fn matches_enumeration_oracle_on_random_problems() {
        let mut rng = crate::seed::rng_from(11);
        let mut checked = 0;
        for case in 0..100 {
            let problem = random_problem(&mut rng, true);
            let sol = solve(&problem, &cfg()).unwrap();
            let oracle = enumerate_solve(&problem, 1e-9).unwrap();
            let (x_ref, obj_ref) = oracle.expect("feasible by construction");
            assert_eq!(sol.status, QpStatus::Optimal, "case {case}");
            let dx = (&sol.x - &x_ref).amax();
            assert!(
                dx <= 1e-6,
                "case {case}: |x - x_ref| = {dx:e}\nx = {:?}\nref = {:?}",
                sol.x,
                x_ref
            );
            assert!((sol.objective - obj_ref).abs() <= 1e-6 * obj_ref.abs().max(1.0));
            assert!(sol.residuals.max() <= 1e-6, "case {case}: {:?}", sol.residuals);
            checked += 1;
        }
        assert_eq!(checked, 100);
    }

    /// Mixed suite where infeasible instances must be flagged, not mis-solved.
    #[test]
    fn agrees_with_oracle_on_feasibility_calls() {
        let mut rng = crate::seed::rng_from(12);
        for case in 0..60 {
            let problem = random_problem(&mut rng, false);
            let sol = solve(&problem, &cfg()).unwrap();
            let oracle = enumerate_solve(&problem, 1e-9).unwrap();
            match (&oracle, sol.status) {
                (Some((x_ref, _)), QpStatus::Optimal) => {
                    assert!(
                        (&sol.x - x_ref).amax() <= 1e-6,
                        "case {case} solution mismatch"
                    );
                }
                (None, QpStatus::Infeasible) => {}
                (Some(_), QpStatus::Infeasible) => {
                    panic!("case {case}: solver called a feasible problem infeasible")
                }
                (None, QpStatus::Optimal) => {
                    // The oracle can only miss feasible points, never invent
                    // them, so an optimal status here must carry a certificate.
                    assert!(sol.residuals.max() <= 1e-6, "case {case}");
                }
                (_, QpStatus::MaxIterations) => panic!("case {case}: hit iteration cap"),
            }
        }
    }

    /// Permuting inequality rows leaves the solution unchanged.
    #[test]
    fn row_permutation_invariance() {
        let mut rng = crate::seed::rng_from(13);
        for _ in 0..30 {
            let problem = random_problem(&mut rng, true);
            let sol = solve(&problem, &cfg()).unwrap();
            let q = problem.a_in.nrows();
            if q < 2 {
                continue;
            }
            let mut permuted = problem.clone();
            let perm: Vec<usize> = (0..q).rev().collect();
            for (new_row, &old_row) in perm.iter().enumerate() {
                for col in 0..problem.num_vars() {
                    permuted.a_in[(new_row, col)] = problem.a_in[(old_row, col)];
                }
                permuted.b_in[new_row] = problem.b_in[old_row];
            }
            let sol_p = solve(&permuted, &cfg()).unwrap();
            assert!((&sol.x - &sol_p.x).amax() <= 1e-8);
            assert!((sol.objective - sol_p.objective).abs() <= 1e-8 * sol.objective.abs().max(1.0));
        }
    }

    /// Scaling H and g by s > 0 scales the objective by s, x* unchanged.
    #[test]
    fn objective_scaling_invariance() {
        let mut rng = crate::seed::rng_from(14);
        for _ in 0..30 {
            let problem = random_problem(&mut rng, true);
            let s = rng.gen_range(0.1..10.0);
            let mut scaled = problem.clone();
            scaled.h *= s;
            scaled.g *= s;
            let sol = solve(&problem, &cfg()).unwrap();
            let sol_s = solve(&scaled, &cfg()).unwrap();
            assert!((&sol.x - &sol_s.x).amax() <= 1e-6);
            assert_relative_eq!(sol_s.objective, s * sol.objective, max_relative = 1e-6);
        }
    }

    /// Warm-started re-solve of the same problem: same x*, no extra work.
    #[test]
    fn warm_start_does_not_cost_iterations() {
        let mut rng = crate::seed::rng_from(15);
        for _ in 0..40 {
            let problem = random_problem(&mut rng, true);
            let cold = solve(&problem, &cfg()).unwrap();
            let warm = WarmStart::from_solution(&cold, 1e-9);
            let re = solve_warm(&problem, &cfg(), Some(&warm)).unwrap();
            assert!((&re.x - &cold.x).amax() <= 1e-9);
            assert!(
                re.iterations <= cold.iterations,
                "warm {} > cold {}",
                re.iterations,
                cold.iterations
            );
        }
    }

    /// Identical calls give bitwise identical output.
    #[test]
    fn solve_is_deterministic() {
        let mut rng = crate::seed::rng_from(16);
        let problem = random_problem(&mut rng, true);
        let a = solve(&problem, &cfg()).unwrap();
        let b = solve(&problem, &cfg()).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn dump_is_exact_and_versioned() {
        let mut problem = identity_problem();
        problem.a_in = DMatrix::from_row_slice(1, 2, &[0.1, -1.0]);
        problem.b_in = DVector::from_element(1, 0.25);
        let text = problem.dump();
        assert!(text.starts_with("# schema: qp-problem v1\n"));
        assert!(text.contains("H 2 2\n1 0\n0 1\n"));
        assert!(text.contains("g 1 2\n-1 -2\n"));
        assert!(text.contains("A_in 1 2\n0.10000000000000001 -1\n"));
    }
}
