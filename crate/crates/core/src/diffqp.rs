//! Small dense convex QP
//!
//! ```text
//! minimise ½ uᵀ H u + Fᵀ u   subject to   G u ≤ h,  lb ≤ u ≤ ub
//! ```
//!
//! solved by a primal-dual interior point method (Mehrotra predictor-corrector)
//! and differentiated through its KKT conditions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, dot, lu_solve, norm_inf, Matrix};
use crate::scalar::Scalar;

/// Smallest eigenvalue accepted for `H`.
pub const MIN_EIGENVALUE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem<T> {
    /// `H`, q×q symmetric positive definite
    pub h_mat: Matrix<T>,
    /// `F`
    pub f: Vec<T>,
    /// `G`, n_c×q
    pub g: Matrix<T>,
    /// `h`
    pub h: Vec<T>,
    pub lb: Option<Vec<T>>,
    pub ub: Option<Vec<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Residuals<T> {
    /// `max(G u - h)` over violated rows
    pub primal: T,
    /// `‖H u + F + Gᵀλ‖∞`
    pub dual: T,
    /// `max |λᵢ (Gᵢ u - hᵢ)|`
    pub gap: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution<T> {
    pub u_star: Vec<T>,
    /// multipliers of the rows of `G` (bound rows are reported in `bound_duals`)
    pub duals: Vec<T>,
    /// multipliers of `u ≤ ub` then `-u ≤ -lb` rows, for the bounds present
    pub bound_duals: Vec<T>,
    pub status: QpStatus,
    pub iterations: usize,
    pub residuals: Residuals<T>,
    /// Normalised Farkas certificate `λ ≥ 0, Σλ = 1, Gᵀλ ≈ 0, hᵀλ < 0`
    /// over all rows when the problem was found infeasible.
    pub certificate: Option<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpGradients<T> {
    pub d_h_mat: Matrix<T>,
    pub d_f: Vec<T>,
    pub d_g: Matrix<T>,
    pub d_h: Vec<T>,
    /// the KKT system was singular and was solved with diagonal damping
    pub damped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// diagonal damping used when the backward KKT system is singular
    pub damping: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 50, damping: 1e-8 }
    }
}

impl<T: Scalar> QpProblem<T> {
    pub fn new(h_mat: Matrix<T>, f: Vec<T>, g: Matrix<T>, h: Vec<T>) -> Self {
        Self { h_mat, f, g, h, lb: None, ub: None }
    }

    pub fn with_bounds(mut self, lb: Vec<T>, ub: Vec<T>) -> Self {
        self.lb = Some(lb);
        self.ub = Some(ub);
        self
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.h.len()
    }

    pub fn objective(&self, u: &[T]) -> T {
        let hu = self.h_mat.mul_vec(u);
        T::lit(0.5) * dot(u, &hu) + dot(&self.f, u)
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.dim();
        if q == 0 {
            return Err(Error::QpInput("empty decision vector".into()));
        }
        if self.h_mat.rows() != q || self.h_mat.cols() != q {
            return Err(Error::QpInput(format!("H is {}x{}, expected {q}x{q}", self.h_mat.rows(), self.h_mat.cols())));
        }
        if self.g.rows() != self.h.len() || (self.g.rows() > 0 && self.g.cols() != q) {
            return Err(Error::QpInput(format!(
                "G is {}x{} with {} right-hand sides, expected n_c x {q}",
                self.g.rows(),
                self.g.cols(),
                self.h.len()
            )));
        }
        for b in [&self.lb, &self.ub].into_iter().flatten() {
            if b.len() != q {
                return Err(Error::QpInput("bound length mismatch".into()));
            }
        }
        if let (Some(lb), Some(ub)) = (&self.lb, &self.ub) {
            if lb.iter().zip(ub).any(|(l, u)| l > u) {
                return Err(Error::QpInput("lb > ub".into()));
            }
        }
        let finite = |v: &[T]| v.iter().all(|x| x.is_finite());
        if !(finite(self.h_mat.as_slice()) && finite(&self.f) && finite(self.g.as_slice()) && finite(&self.h)) {
            return Err(Error::QpInput("non-finite QP data".into()));
        }
        let scale = norm_inf(self.h_mat.as_slice()).max(T::one());
        if !self.h_mat.is_symmetric(T::lit(1e-8) * scale) {
            return Err(Error::QpInput("H is not symmetric".into()));
        }
        let mut shifted = self.h_mat.symmetric_part();
        for i in 0..q {
            shifted[(i, i)] = shifted[(i, i)] - T::lit(MIN_EIGENVALUE);
        }
        if cholesky(&shifted).is_none() {
            return Err(Error::QpInput(format!("H is not positive definite (min eigenvalue < {MIN_EIGENVALUE})")));
        }
        Ok(())
    }

    /// `G` and `h` with the bound rows appended (`u ≤ ub`, then `-u ≤ -lb`).
    pub fn folded(&self) -> (Matrix<T>, Vec<T>) {
        let q = self.dim();
        let mut rows: Vec<Vec<T>> = (0..self.g.rows()).map(|i| self.g.row(i).to_vec()).collect();
        let mut rhs = self.h.clone();
        if let Some(ub) = &self.ub {
            for (i, b) in ub.iter().enumerate() {
                let mut r = vec![T::zero(); q];
                r[i] = T::one();
                rows.push(r);
                rhs.push(*b);
            }
        }
        if let Some(lb) = &self.lb {
            for (i, b) in lb.iter().enumerate() {
                let mut r = vec![T::zero(); q];
                r[i] = -T::one();
                rows.push(r);
                rhs.push(-*b);
            }
        }
        let g = if rows.is_empty() { Matrix::zeros(0, q) } else { Matrix::from_rows(&rows) };
        (g, rhs)
    }
}

struct Kkt<'a, T> {
    h_mat: &'a Matrix<T>,
    f: &'a [T],
    g: &'a Matrix<T>,
    h: &'a [T],
}

impl<T: Scalar> Kkt<'_, T> {
    fn residuals(&self, u: &[T], lam: &[T]) -> Residuals<T> {
        let gu = self.g.mul_vec(u);
        let primal = gu.iter().zip(self.h).fold(T::zero(), |m, (a, b)| m.max(*a - *b));
        let mut rd = self.h_mat.mul_vec(u);
        for (r, (f, gl)) in rd.iter_mut().zip(self.f.iter().zip(self.g.tr_mul_vec(lam))) {
            *r = *r + *f + gl;
        }
        let gap = gu
            .iter()
            .zip(self.h)
            .zip(lam)
            .fold(T::zero(), |m, ((a, b), l)| m.max((*l * (*a - *b)).abs()));
        Residuals { primal, dual: norm_inf(&rd), gap }
    }
}

/// Solves the QP. Input errors are reported as `Err`; infeasibility and
/// non-convergence are reported through `status`.
pub fn qp_solve<T: Scalar>(problem: &QpProblem<T>, settings: &QpSettings) -> Result<QpSolution<T>> {
    if !(settings.tol > 0.0) {
        return Err(Error::QpInput("tol must be positive".into()));
    }
    problem.validate()?;
    let tol = T::lit(settings.tol).max(T::default_tol());
    let h_mat = problem.h_mat.symmetric_part();
    let (g, h) = problem.folded();
    let kkt = Kkt { h_mat: &h_mat, f: &problem.f, g: &g, h: &h };
    let q = problem.dim();
    let m = h.len();
    let n_g = problem.n_constraints();

    let finish = |u: Vec<T>, lam: Vec<T>, status, iterations, certificate| {
        let residuals = kkt.residuals(&u, &lam);
        QpSolution {
            u_star: u,
            duals: lam[..n_g].to_vec(),
            bound_duals: lam[n_g..].to_vec(),
            status,
            iterations,
            residuals,
            certificate,
        }
    };

    let chol_h = cholesky(&h_mat).ok_or_else(|| Error::QpInput("H is not positive definite".into()))?;
    let neg_f: Vec<T> = problem.f.iter().map(|x| -*x).collect();
    let u_free = cholesky_solve(&chol_h, &neg_f);
    if m == 0 {
        return Ok(finish(u_free, vec![], QpStatus::Optimal, 0, None));
    }

    let f_scale = norm_inf(&problem.f).max(T::one());
    let h_scale = norm_inf(&h).max(T::one());
    let mut u = u_free;
    let mut s: Vec<T> = g.mul_vec(&u).iter().zip(&h).map(|(gu, hi)| (*hi - *gu).max(T::one())).collect();
    let mut lam = vec![T::one(); m];
    let frac = T::lit(0.995);
    let mut status = QpStatus::MaxIter;
    let mut certificate = None;
    let mut iterations = 0;

    for it in 0..settings.max_iter {
        iterations = it + 1;
        let gu = g.mul_vec(&u);
        let rp: Vec<T> = (0..m).map(|i| gu[i] + s[i] - h[i]).collect();
        let mut rd = h_mat.mul_vec(&u);
        let gl = g.tr_mul_vec(&lam);
        for j in 0..q {
            rd[j] = rd[j] + problem.f[j] + gl[j];
        }
        let mu = dot(&s, &lam) / T::lit(m as f64);
        if norm_inf(&rp) <= tol * h_scale && norm_inf(&rd) <= tol * f_scale && mu <= tol * T::lit(0.01) {
            status = QpStatus::Optimal;
            iterations = it;
            break;
        }
        if let Some(c) = farkas(&g, &h, &lam, tol) {
            status = QpStatus::Infeasible;
            certificate = Some(c);
            break;
        }

        // reduced system (H + Gᵀ W G) Δu = -rd - Gᵀ S⁻¹ (Λ rp - rc), W = Λ S⁻¹
        let mut reduced = h_mat.clone();
        for i in 0..m {
            let w = lam[i] / s[i];
            let gi = g.row(i);
            for a in 0..q {
                for b in 0..q {
                    reduced[(a, b)] = reduced[(a, b)] + w * gi[a] * gi[b];
                }
            }
        }
        let Some(chol) = cholesky(&reduced) else {
            break;
        };
        let direction = |rc: &[T]| -> (Vec<T>, Vec<T>, Vec<T>) {
            let tmp: Vec<T> = (0..m).map(|i| (lam[i] * rp[i] - rc[i]) / s[i]).collect();
            let gt = g.tr_mul_vec(&tmp);
            let rhs: Vec<T> = (0..q).map(|j| -rd[j] - gt[j]).collect();
            let du = cholesky_solve(&chol, &rhs);
            let gdu = g.mul_vec(&du);
            let ds: Vec<T> = (0..m).map(|i| -rp[i] - gdu[i]).collect();
            let dl: Vec<T> = (0..m).map(|i| (-rc[i] - lam[i] * ds[i]) / s[i]).collect();
            (du, ds, dl)
        };
        let max_step = |v: &[T], dv: &[T]| {
            v.iter().zip(dv).fold(T::one(), |a, (x, dx)| if *dx < T::zero() { a.min(-*x / *dx) } else { a })
        };

        let rc_aff: Vec<T> = (0..m).map(|i| s[i] * lam[i]).collect();
        let (_, ds_a, dl_a) = direction(&rc_aff);
        let alpha_aff = max_step(&s, &ds_a).min(max_step(&lam, &dl_a));
        let mu_aff = (0..m)
            .map(|i| (s[i] + alpha_aff * ds_a[i]) * (lam[i] + alpha_aff * dl_a[i]))
            .fold(T::zero(), |a, b| a + b)
            / T::lit(m as f64);
        let sigma = (mu_aff / mu).powi(3).min(T::one());
        let rc: Vec<T> = (0..m).map(|i| s[i] * lam[i] + ds_a[i] * dl_a[i] - sigma * mu).collect();
        let (du, ds, dl) = direction(&rc);
        let alpha = (frac * max_step(&s, &ds).min(max_step(&lam, &dl))).min(T::one());
        for j in 0..q {
            u[j] = u[j] + alpha * du[j];
        }
        for i in 0..m {
            s[i] = (s[i] + alpha * ds[i]).max(T::min_positive_value());
            lam[i] = (lam[i] + alpha * dl[i]).max(T::min_positive_value());
        }
    }

    if status == QpStatus::MaxIter {
        if let Some(c) = farkas(&g, &h, &lam, tol) {
            status = QpStatus::Infeasible;
            certificate = Some(c);
        }
    }
    if status == QpStatus::Infeasible {
        return Ok(finish(u, lam, status, iterations, certificate));
    }

    // Polish: solve the equality KKT system on the identified active set.
    // Accept it only if it is primal and dual feasible and at least as accurate.
    let active: Vec<usize> = (0..m).filter(|&i| lam[i] > s[i]).collect();
    if let Some((pu, pl)) = solve_active(&h_mat, &problem.f, &g, &h, &active) {
        let res = kkt.residuals(&pu, &pl);
        let ok_dual = pl.iter().all(|l| *l >= T::zero());
        let ok = ok_dual
            && res.primal <= tol * h_scale
            && res.dual <= tol * f_scale
            && res.gap <= tol * h_scale;
        if ok {
            return Ok(finish(pu, pl, QpStatus::Optimal, iterations, None));
        }
    }
    Ok(finish(u, lam, status, iterations, None))
}

/// Checks whether the current multipliers point at a Farkas certificate of
/// infeasibility of `G u ≤ h`.
fn farkas<T: Scalar>(g: &Matrix<T>, h: &[T], lam: &[T], tol: T) -> Option<Vec<T>> {
    let total = lam.iter().fold(T::zero(), |a, b| a + *b);
    if !(total > T::lit(1e6)) {
        return None;
    }
    let y: Vec<T> = lam.iter().map(|l| *l / total).collect();
    let gty = g.tr_mul_vec(&y);
    let g_scale = norm_inf(g.as_slice()).max(T::one());
    let hy = dot(h, &y);
    (norm_inf(&gty) <= T::lit(1e-6) * g_scale && hy < -tol).then_some(y)
}

/// Equality-constrained KKT solve treating `active` rows as equalities.
/// Returns `(u, λ)` with zero multipliers off the active set.
pub(crate) fn solve_active<T: Scalar>(
    h_mat: &Matrix<T>,
    f: &[T],
    g: &Matrix<T>,
    h: &[T],
    active: &[usize],
) -> Option<(Vec<T>, Vec<T>)> {
    let q = f.len();
    let k = active.len();
    let n = q + k;
    let mut a = Matrix::zeros(n, n);
    let mut rhs = vec![T::zero(); n];
    for i in 0..q {
        for j in 0..q {
            a[(i, j)] = h_mat[(i, j)];
        }
        rhs[i] = -f[i];
    }
    for (r, &row) in active.iter().enumerate() {
        for j in 0..q {
            a[(j, q + r)] = g[(row, j)];
            a[(q + r, j)] = g[(row, j)];
        }
        rhs[q + r] = h[row];
    }
    let x = lu_solve(&a, &rhs, T::epsilon() * T::lit(64.0))?;
    let mut lam = vec![T::zero(); h.len()];
    for (r, &row) in active.iter().enumerate() {
        lam[row] = x[q + r];
    }
    Some((x[..q].to_vec(), lam))
}

/// Gradients of `grad_u · u*` with respect to `H, F, G, h` by implicit
/// differentiation of the KKT conditions
///
/// ```text
/// H u + F + Gᵀ λ = 0,     D(λ) (G u - h) = 0.
/// ```
///
/// Solving `Kᵀ [a; b] = [grad_u; 0]` with
/// `K = [[H, Gᵀ], [D(λ) G, D(G u - h)]]` gives
/// `dF = -a`, `dH = -½(a uᵀ + u aᵀ)`, `dh = D(λ) b`, `dG = -λ aᵀ - D(λ) b uᵀ`.
/// Bound rows take part in the system; their gradients are not returned.
pub fn qp_backward<T: Scalar>(
    problem: &QpProblem<T>,
    solution: &QpSolution<T>,
    grad_u: &[T],
    settings: &QpSettings,
) -> Result<QpGradients<T>> {
    if solution.status != QpStatus::Optimal {
        return Err(Error::QpInput(format!("backward needs an optimal solution, got {:?}", solution.status)));
    }
    let q = problem.dim();
    if grad_u.len() != q || solution.u_star.len() != q {
        return Err(Error::QpInput("gradient dimension mismatch".into()));
    }
    let h_mat = problem.h_mat.symmetric_part();
    let (g, h) = problem.folded();
    let m = h.len();
    let n_g = problem.n_constraints();
    let u = &solution.u_star;
    let lam: Vec<T> = solution.duals.iter().chain(&solution.bound_duals).copied().collect();
    if lam.len() != m {
        return Err(Error::QpInput("dual dimension mismatch".into()));
    }
    let slack: Vec<T> = g.mul_vec(u).iter().zip(&h).map(|(a, b)| *a - *b).collect();

    let n = q + m;
    let mut kt = Matrix::zeros(n, n);
    for i in 0..q {
        for j in 0..q {
            kt[(i, j)] = h_mat[(i, j)];
        }
    }
    for r in 0..m {
        for j in 0..q {
            kt[(j, q + r)] = g[(r, j)] * lam[r];
            kt[(q + r, j)] = g[(r, j)];
        }
        kt[(q + r, q + r)] = slack[r];
    }
    let mut rhs = vec![T::zero(); n];
    rhs[..q].copy_from_slice(grad_u);

    let pivot_tol = T::epsilon() * T::lit(64.0);
    let (x, damped) = match lu_solve(&kt, &rhs, pivot_tol) {
        Some(x) => (x, false),
        None => {
            let mut damped = kt.clone();
            let eps = T::lit(settings.damping);
            for i in 0..n {
                // push the diagonal away from zero in its own direction
                let d = damped[(i, i)];
                damped[(i, i)] = d + if d < T::zero() { -eps } else { eps };
            }
            log::warn!("singular QP KKT system in backward pass; using {} damping", settings.damping);
            let x = lu_solve(&damped, &rhs, T::zero())
                .ok_or(Error::SingularKkt)?;
            (x, true)
        }
    };
    let a = &x[..q];
    let b = &x[q..];

    let half = T::lit(0.5);
    let mut d_h_mat = Matrix::zeros(q, q);
    for i in 0..q {
        for j in 0..q {
            d_h_mat[(i, j)] = -half * (a[i] * u[j] + u[i] * a[j]);
        }
    }
    let d_f: Vec<T> = a.iter().map(|v| -*v).collect();
    let mut d_g = Matrix::zeros(n_g, q);
    let mut d_h = vec![T::zero(); n_g];
    for r in 0..n_g {
        let lb = lam[r] * b[r];
        d_h[r] = lb;
        for j in 0..q {
            d_g[(r, j)] = -lam[r] * a[j] - lb * u[j];
        }
    }
    let finite = |v: &[T]| v.iter().all(|x| x.is_finite());
    if !(finite(d_h_mat.as_slice()) && finite(&d_f) && finite(d_g.as_slice()) && finite(&d_h)) {
        return Err(Error::SingularKkt);
    }
    Ok(QpGradients { d_h_mat, d_f, d_g, d_h, damped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn settings() -> QpSettings {
        QpSettings::default()
    }

    /// Exact oracle: enumerate every candidate active set of size ≤ q, keep the
    /// primal/dual feasible KKT points and return the best objective.
    fn enumerate_oracle(p: &QpProblem<f64>) -> Option<(Vec<f64>, f64)> {
        let (g, h) = p.folded();
        let (q, m) = (p.dim(), h.len());
        let mut best: Option<(Vec<f64>, f64)> = None;
        for mask in 0u32..(1 << m) {
            let active: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
            if active.len() > q {
                continue;
            }
            let Some((u, lam)) = solve_active(&p.h_mat, &p.f, &g, &h, &active) else { continue };
            let gu = g.mul_vec(&u);
            if gu.iter().zip(&h).all(|(a, b)| *a <= b + 1e-9) && lam.iter().all(|l| *l >= -1e-9) {
                let obj = p.objective(&u);
                if best.as_ref().is_none_or(|(_, o)| obj < *o) {
                    best = Some((u, obj));
                }
            }
        }
        best
    }

    fn random_spd(rng: &mut ChaCha8Rng, q: usize) -> Matrix<f64> {
        let a = Matrix::from_row_major(q, q, (0..q * q).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut h = Matrix::identity(q);
        for i in 0..q {
            for j in 0..q {
                h[(i, j)] = 0.5 * h[(i, j)] + (0..q).map(|k| a[(k, i)] * a[(k, j)]).sum::<f64>();
            }
        }
        h
    }

    /// Feasible by construction: h is chosen so a random interior point satisfies every row.
    fn random_qp(rng: &mut ChaCha8Rng, q: usize, m: usize) -> QpProblem<f64> {
        let h_mat = random_spd(rng, q);
        let f = (0..q).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x0: Vec<f64> = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = Matrix::from_row_major(m, q, (0..m * q).map(|_| rng.random_range(-2.0..2.0)).collect());
        let gx = g.mul_vec(&x0);
        let h = gx.iter().map(|v| v + rng.random_range(0.1..1.5)).collect();
        QpProblem::<f64>::new(h_mat, f, g, h)
    }

    #[test]
    fn unconstrained_example() {
        let p = QpProblem::<f64>::new(Matrix::identity(2), vec![1.0, -2.0], Matrix::zeros(0, 2), vec![]);
        let s = qp_solve(&p, &settings()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.u_star[0] + 1.0).abs() < 1e-12 && (s.u_star[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_active_constraint_example() {
        let p = QpProblem::<f64>::new(Matrix::identity(1), vec![0.0], Matrix::from_rows(&[vec![-1.0]]), vec![-1.0]);
        let s = qp_solve(&p, &settings()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.u_star[0] - 1.0).abs() < 1e-12);
        assert!((s.duals[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bounds_are_folded_in() {
        let p = QpProblem::<f64>::new(Matrix::identity(2), vec![-10.0, 10.0], Matrix::zeros(0, 2), vec![])
            .with_bounds(vec![-1.0, -2.0], vec![3.0, 4.0]);
        let s = qp_solve(&p, &settings()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.u_star[0] - 3.0).abs() < 1e-12 && (s.u_star[1] + 2.0).abs() < 1e-12);
        assert_eq!(s.bound_duals.len(), 4);
    }

    #[test]
    fn detects_infeasibility() {
        // u ≤ -1 and -u ≤ -1
        let p = QpProblem::<f64>::new(Matrix::identity(1), vec![0.0], Matrix::from_rows(&[vec![1.0], vec![-1.0]]), vec![-1.0, -1.0]);
        let s = qp_solve(&p, &settings()).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
        let c = s.certificate.unwrap();
        assert!(c.iter().all(|v| *v >= 0.0));
        assert!((c[0] - c[1]).abs() < 1e-6);
        // a 2-d version with three rows
        let p = QpProblem::<f64>::new(
            Matrix::identity(2),
            vec![0.3, -0.1],
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]]),
            vec![0.0, 0.0, -1.0],
        );
        assert_eq!(qp_solve(&p, &settings()).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn rejects_bad_inputs() {
        let nsym = QpProblem::<f64>::new(Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]), vec![0.0; 2], Matrix::zeros(0, 2), vec![]);
        assert!(matches!(qp_solve(&nsym, &settings()), Err(Error::QpInput(_))));
        let indef = QpProblem::<f64>::new(Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]), vec![0.0; 2], Matrix::zeros(0, 2), vec![]);
        assert!(qp_solve(&indef, &settings()).is_err());
        let tiny = QpProblem::<f64>::new(Matrix::diagonal(&[1.0, 1e-10]), vec![0.0; 2], Matrix::zeros(0, 2), vec![]);
        assert!(qp_solve(&tiny, &settings()).is_err());
        let dims = QpProblem::<f64>::new(Matrix::identity(2), vec![0.0; 2], Matrix::zeros(1, 3), vec![0.0]);
        assert!(qp_solve(&dims, &settings()).is_err());
        let p = QpProblem::<f64>::new(Matrix::identity(1), vec![0.0], Matrix::zeros(0, 1), vec![]);
        assert!(qp_solve(&p, &QpSettings { tol: 0.0, ..settings() }).is_err());
    }

    #[test]
    fn matches_enumeration_oracle_on_random_qps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..400 {
            let q = 1 + trial % 4;
            let m = rng.random_range(0..=8);
            let p = random_qp(&mut rng, q, m);
            let s = qp_solve(&p, &settings()).unwrap();
            assert_eq!(s.status, QpStatus::Optimal, "trial {trial}");
            let (_, best) = enumerate_oracle(&p).unwrap();
            assert!((p.objective(&s.u_star) - best).abs() <= 1e-6 * (1.0 + best.abs()), "trial {trial}");
            assert!(s.residuals.primal <= 1e-8 && s.residuals.dual <= 1e-8 && s.residuals.gap <= 1e-8);
            assert!(s.duals.iter().all(|l| *l >= 0.0));
        }
    }

    #[test]
    fn matches_grid_oracle_in_two_dimensions() {
        // dense grid, then coordinate bisection refinement on the feasible region
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let p = random_qp(&mut rng, 2, 4).with_bounds(vec![-3.0, -3.0], vec![3.0, 3.0]);
            let (g, h) = p.folded();
            let feasible = |u: &[f64]| g.mul_vec(u).iter().zip(&h).all(|(a, b)| *a <= *b);
            let mut best = (f64::INFINITY, [0.0, 0.0]);
            let n = 600;
            for i in 0..=n {
                for j in 0..=n {
                    let u = [-3.0 + 6.0 * i as f64 / n as f64, -3.0 + 6.0 * j as f64 / n as f64];
                    if feasible(&u) && p.objective(&u) < best.0 {
                        best = (p.objective(&u), u);
                    }
                }
            }
            let mut width = 0.02;
            let mut u = best.1;
            for _ in 0..60 {
                for k in 0..2 {
                    for dir in [-1.0, 1.0] {
                        let mut t = u;
                        t[k] += dir * width;
                        if feasible(&t) && p.objective(&t) < p.objective(&u) {
                            u = t;
                        }
                    }
                }
                // also slide along each active edge
                for r in 0..h.len() {
                    let gr = g.row(r);
                    let mut t = [u[0] + gr[1] * width, u[1] - gr[0] * width];
                    for _ in 0..2 {
                        if feasible(&t) && p.objective(&t) < p.objective(&u) {
                            u = t;
                        }
                        t = [u[0] - gr[1] * width, u[1] + gr[0] * width];
                    }
                }
                width *= 0.7;
            }
            let s = qp_solve(&p, &settings()).unwrap();
            let grid_obj = p.objective(&u);
            assert!(p.objective(&s.u_star) <= grid_obj + 1e-6, "{} vs {}", p.objective(&s.u_star), grid_obj);
            assert!(grid_obj - p.objective(&s.u_star) < 1e-2);
        }
    }

    fn perturbed_solve(p: &QpProblem<f64>, edit: impl Fn(&mut QpProblem<f64>)) -> Vec<f64> {
        let mut p = p.clone();
        edit(&mut p);
        let s = qp_solve(&p, &settings()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        s.u_star
    }

    fn fd_check(p: &QpProblem<f64>, grad_u: &[f64]) -> usize {
        let s = qp_solve(p, &settings()).unwrap();
        let gr = qp_backward(p, &s, grad_u, &settings()).unwrap();
        assert!(!gr.damped);
        let eps = 1e-5;
        let loss = |u: Vec<f64>| dot(grad_u, &u);
        let close = |analytic: f64, fd: f64| (analytic - fd).abs() <= 1e-4 * fd.abs().max(analytic.abs()) || (analytic - fd).abs() <= 1e-7;
        let (q, m) = (p.dim(), p.n_constraints());
        let mut checked = 0;
        for j in 0..q {
            let fd = (loss(perturbed_solve(p, |x| x.f[j] += eps)) - loss(perturbed_solve(p, |x| x.f[j] -= eps))) / (2.0 * eps);
            assert!(close(gr.d_f[j], fd), "dF[{j}] {} vs {fd}", gr.d_f[j]);
            checked += 1;
            for k in 0..q {
                // symmetric perturbation of H(j,k) and H(k,j) measures dH(j,k) + dH(k,j)
                let sym = |x: &mut QpProblem<f64>, e: f64| {
                    x.h_mat[(j, k)] += e;
                    if j != k {
                        x.h_mat[(k, j)] += e;
                    }
                };
                let fd = (loss(perturbed_solve(p, |x| sym(x, eps))) - loss(perturbed_solve(p, |x| sym(x, -eps)))) / (2.0 * eps);
                let an = if j == k { gr.d_h_mat[(j, j)] } else { gr.d_h_mat[(j, k)] + gr.d_h_mat[(k, j)] };
                assert!(close(an, fd), "dH[{j},{k}] {an} vs {fd}");
                checked += 1;
            }
        }
        for r in 0..m {
            let fd = (loss(perturbed_solve(p, |x| x.h[r] += eps)) - loss(perturbed_solve(p, |x| x.h[r] -= eps))) / (2.0 * eps);
            assert!(close(gr.d_h[r], fd), "dh[{r}] {} vs {fd}", gr.d_h[r]);
            for j in 0..q {
                let fd = (loss(perturbed_solve(p, |x| x.g[(r, j)] += eps)) - loss(perturbed_solve(p, |x| x.g[(r, j)] -= eps))) / (2.0 * eps);
                assert!(close(gr.d_g[(r, j)], fd), "dG[{r},{j}] {} vs {fd}", gr.d_g[(r, j)]);
            }
            checked += 1 + q;
        }
        checked
    }

    fn non_degenerate(p: &QpProblem<f64>) -> bool {
        let s = qp_solve(p, &settings()).unwrap();
        let (g, h) = p.folded();
        let gu = g.mul_vec(&s.u_star);
        let lam: Vec<f64> = s.duals.iter().chain(&s.bound_duals).copied().collect();
        // strict complementarity with margin, so the active set is stable under eps perturbations
        (0..h.len()).all(|i| (lam[i] > 1e-3) != (h[i] - gu[i] > 1e-3) && (lam[i] > 1e-3 || h[i] - gu[i] > 1e-3))
    }

    #[test]
    fn backward_unconstrained_closed_form() {
        let h_mat = Matrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]);
        let p = QpProblem::<f64>::new(h_mat.clone(), vec![0.3, -0.7], Matrix::zeros(0, 2), vec![]);
        let s = qp_solve(&p, &settings()).unwrap();
        let g = [1.0, -2.0];
        let gr = qp_backward(&p, &s, &g, &settings()).unwrap();
        let hinv_g = cholesky_solve(&cholesky(&h_mat).unwrap(), &g);
        for j in 0..2 {
            assert!((gr.d_f[j] + hinv_g[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_inactive_rows_are_zero() {
        let p = QpProblem::<f64>::new(Matrix::identity(2), vec![-1.0, 0.0], Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]), vec![0.5, 10.0]);
        let s = qp_solve(&p, &settings()).unwrap();
        assert_eq!(s.duals[1], 0.0);
        let gr = qp_backward(&p, &s, &[0.4, 0.9], &settings()).unwrap();
        assert_eq!(gr.d_h[1], 0.0);
        assert_eq!(gr.d_g.row(1), &[0.0, 0.0]);
        assert!(gr.d_h[0] != 0.0);
    }

    #[test]
    fn backward_matches_finite_differences_on_random_qps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tested = 0;
        let mut active_cases = 0;
        while tested < 100 {
            let q = 1 + tested % 3;
            let m = rng.random_range(1..=6);
            let p = random_qp(&mut rng, q, m);
            if !non_degenerate(&p) {
                continue;
            }
            let grad_u: Vec<f64> = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
            fd_check(&p, &grad_u);
            let s = qp_solve(&p, &settings()).unwrap();
            if s.duals.iter().any(|l| *l > 0.0) {
                active_cases += 1;
            }
            tested += 1;
        }
        assert!(active_cases > 30, "only {active_cases} cases with active constraints");
    }

    #[test]
    fn degenerate_active_set_uses_damping() {
        // duplicate active rows make the KKT system singular
        let p = QpProblem::<f64>::new(Matrix::identity(1), vec![0.0], Matrix::from_rows(&[vec![-1.0], vec![-1.0]]), vec![-1.0, -1.0]);
        let s = qp_solve(&p, &settings()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.u_star[0] - 1.0).abs() < 1e-7);
        let gr = qp_backward(&p, &s, &[1.0], &settings()).unwrap();
        assert!(gr.d_h.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn d_h_is_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let p = random_qp(&mut rng, 3, 5);
            let s = qp_solve(&p, &settings()).unwrap();
            let gr = qp_backward(&p, &s, &[0.2, -1.0, 0.5], &settings()).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(gr.d_h_mat[(i, j)].to_bits(), gr.d_h_mat[(j, i)].to_bits());
                }
            }
        }
    }

    #[test]
    fn deterministic_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_qp(&mut rng, 2, 6);
        let a = qp_solve(&p, &settings()).unwrap();
        let b = qp_solve(&p, &settings()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn works_in_f32() {
        let p = QpProblem::<f32>::new(Matrix::identity(1), vec![0.0], Matrix::from_rows(&[vec![-1.0]]), vec![-1.0]);
        let s = qp_solve(&p, &settings()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.u_star[0] - 1.0).abs() < 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn accepted_solutions_satisfy_kkt(seed in 0u64..10_000, q in 1usize..5, m in 0usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_qp(&mut rng, q, m);
            let s = qp_solve(&p, &settings()).unwrap();
            prop_assert_eq!(s.status, QpStatus::Optimal);
            let (g, h) = p.folded();
            let gu = g.mul_vec(&s.u_star);
            for i in 0..h.len() {
                prop_assert!(gu[i] <= h[i] + 1e-8);
                prop_assert!(s.duals[i] >= 0.0);
                prop_assert!((s.duals[i] * (gu[i] - h[i])).abs() <= 1e-8);
            }
        }
    }
}
