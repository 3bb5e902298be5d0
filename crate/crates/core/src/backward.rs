//! Regression-based backward solvers.
//!
//! Conditional expectations are least-squares projections on a polynomial
//! basis of the state (degree 2 by default, which represents
//! linear-quadratic value functions exactly up to Monte Carlo noise). The
//! recursion for the scalar BSDE with driver `g` and terminal `Phi` is
//!
//! ```text
//! Y_L = Phi(X_L)
//! Z_i = P[ (Y_{i+1} - P[Y_{i+1} | X_i]) dW_i^T | X_i ] / dt
//! Y_i = P[Y_{i+1} | X_i] + g(t_i, X_i, P[Y_{i+1}|X_i], Z_i, u_i) dt
//! ```
//!
//! where `P[.|X_i]` is the projection. Subtracting the projected
//! continuation before the `dW` regression removes the `O(1/dt)` variance
//! of the naive `Z` estimator. The first-order adjoint runs the same
//! machinery on vectors, with the semigroup factor of the mild form
//! applied exactly after each projection.
//!
//! Solutions store per-step regression coefficients, not path arrays: any
//! path value can be reconstructed exactly from the bundle states, so
//! memory stays `O(L * basis)` rather than `O(M * L)`.

use crate::error::{Error, Result};
use crate::forward::PathBundle;
use crate::problem::SpectralProblem;
use crate::spectral::SpectralOperator;
use crate::stats;
use nalgebra::{Cholesky, DMatrix};
use std::sync::Arc;

/// Scalar basis functions of the state used for conditional-expectation
/// projections. Always contains the constant function.
#[derive(Debug, Clone)]
pub enum RegressionBasis {
    /// Monomials up to the given total degree (0, 1 or 2).
    Poly { degree: u8 },
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis::Poly { degree: 2 }
    }
}

impl RegressionBasis {
    pub fn len(&self, dim: usize) -> usize {
        match self {
            RegressionBasis::Poly { degree: 0 } => 1,
            RegressionBasis::Poly { degree: 1 } => 1 + dim,
            RegressionBasis::Poly { .. } => 1 + dim + dim * (dim + 1) / 2,
        }
    }

    pub fn is_empty(&self, dim: usize) -> bool {
        self.len(dim) == 0
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        let dim = x.len();
        out[0] = 1.0;
        let degree = match self {
            RegressionBasis::Poly { degree } => *degree,
        };
        if degree >= 1 {
            out[1..1 + dim].copy_from_slice(x);
        }
        if degree >= 2 {
            let mut idx = 1 + dim;
            for alpha in 0..dim {
                for beta in alpha..dim {
                    out[idx] = x[alpha] * x[beta];
                    idx += 1;
                }
            }
        }
    }
}

/// Per-step diagnostics of one backward solve.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub t: f64,
    /// ensemble mean of the primary quantity (Y, |p|, |P|)
    pub mean: f64,
    /// standard error of that mean
    pub stderr: f64,
    /// condition number of the normal (Gram) matrix
    pub condition: f64,
    /// coefficient of determination of the continuation fit
    pub r_squared: f64,
    /// residual scatter of the continuation fit (per-path sd)
    pub residual_sd: f64,
    /// pointwise standard error of the fitted function,
    /// `residual_sd * sqrt(basis / paths)`
    pub fit_stderr: f64,
}

/// One factored Gram system per time step, reused for every target family.
///
/// When the state sample at the step is a single point (every bundle that
/// starts from a deterministic state has this at its first step), the
/// conditional expectation given the state is the plain mean and the
/// projection collapses to the constant term. A rank-deficient Gram on a
/// non-degenerate sample is a genuine basis collinearity and errors out.
pub(crate) struct StepRegression {
    pub basis_len: usize,
    chol: Option<Cholesky<f64, nalgebra::Dyn>>,
    pub condition: f64,
    /// basis matrix rows, `paths x basis_len` (kept for target projections)
    pub phi: Vec<f64>,
    pub paths: usize,
    /// per-column RMS used to equilibrate the Gram matrix
    col_scale: Vec<f64>,
}

impl StepRegression {
    /// Build and factor the Gram matrix of the basis on the states of
    /// `bundle` at `step`.
    pub fn build(
        basis: &RegressionBasis,
        bundle: &PathBundle,
        step: usize,
        t: f64,
    ) -> Result<Self> {
        let n = bundle.dim;
        let b = basis.len(n);
        let mpaths = bundle.paths;

        // degenerate sample: all paths at one point
        let x0 = bundle.state(0, step);
        let mut spread = 0.0f64;
        let mut scale = 1.0f64;
        for path in 0..mpaths {
            let x = bundle.state(path, step);
            for j in 0..n {
                spread = spread.max((x[j] - x0[j]).abs());
                scale = scale.max(x[j].abs());
            }
        }
        if spread <= 1e-12 * scale {
            let mut phi = vec![0.0; mpaths * b];
            for path in 0..mpaths {
                basis.eval(x0, &mut phi[path * b..(path + 1) * b]);
            }
            return Ok(StepRegression {
                basis_len: b,
                chol: None,
                condition: 1.0,
                phi,
                paths: mpaths,
                col_scale: vec![1.0; b],
            });
        }

        let mut phi = vec![0.0; mpaths * b];
        for path in 0..mpaths {
            let row = &mut phi[path * b..(path + 1) * b];
            basis.eval(bundle.state(path, step), row);
        }
        // equilibrate: scale each basis column to unit RMS so anisotropic
        // state clouds do not masquerade as collinearity
        let mut col_scale = vec![0.0; b];
        for path in 0..mpaths {
            let row = &phi[path * b..(path + 1) * b];
            for (s, v) in col_scale.iter_mut().zip(row) {
                *s += v * v;
            }
        }
        for s in col_scale.iter_mut() {
            *s = (*s / mpaths as f64).sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        let mut gram = DMatrix::<f64>::zeros(b, b);
        for path in 0..mpaths {
            let row = &phi[path * b..(path + 1) * b];
            for i in 0..b {
                for j in i..b {
                    gram[(i, j)] += (row[i] / col_scale[i]) * (row[j] / col_scale[j]);
                }
            }
        }
        for i in 0..b {
            for j in 0..i {
                gram[(i, j)] = gram[(j, i)];
            }
        }
        let sym = gram.clone().symmetric_eigen();
        let max_ev = sym.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
        let min_ev = sym.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
        let condition = if min_ev > 0.0 {
            max_ev / min_ev
        } else {
            f64::INFINITY
        };
        if !(min_ev > max_ev * 1e-10) {
            return Err(Error::RankDeficientRegression { step, t });
        }
        let chol = Cholesky::new(gram).ok_or(Error::RankDeficientRegression { step, t })?;
        Ok(StepRegression {
            basis_len: b,
            chol: Some(chol),
            condition,
            phi,
            paths: mpaths,
            col_scale,
        })
    }

    /// Project `targets` (`paths x k`, row-major) onto the basis; returns
    /// coefficients (`basis_len x k`, row-major: `coeffs[r*k + c]`).
    pub fn project(&self, targets: &[f64], k: usize) -> Vec<f64> {
        let b = self.basis_len;
        let mut out = vec![0.0; b * k];
        let Some(chol) = &self.chol else {
            // single-point sample: the projection is the plain mean
            for c in 0..k {
                let col: Vec<f64> = (0..self.paths).map(|p| targets[p * k + c]).collect();
                out[c] = stats::mean(&col);
            }
            return out;
        };
        let mut rhs = DMatrix::<f64>::zeros(b, k);
        for path in 0..self.paths {
            let row = &self.phi[path * b..(path + 1) * b];
            for c in 0..k {
                let tv = targets[path * k + c];
                for r in 0..b {
                    rhs[(r, c)] += row[r] / self.col_scale[r] * tv;
                }
            }
        }
        let sol = chol.solve(&rhs);
        for r in 0..b {
            for c in 0..k {
                out[r * k + c] = sol[(r, c)] / self.col_scale[r];
            }
        }
        out
    }

    /// Fitted values for one coefficient block: `out[path*k + c]`.
    pub fn fitted(&self, coeffs: &[f64], k: usize, out: &mut [f64]) {
        let b = self.basis_len;
        for path in 0..self.paths {
            let row = &self.phi[path * b..(path + 1) * b];
            for c in 0..k {
                let mut acc = 0.0;
                for r in 0..b {
                    acc += row[r] * coeffs[r * k + c];
                }
                out[path * k + c] = acc;
            }
        }
    }

    /// Mean R^2 over target columns.
    pub fn r_squared(&self, targets: &[f64], fitted: &[f64], k: usize) -> f64 {
        let mut total = 0.0;
        for c in 0..k {
            let col: Vec<f64> = (0..self.paths).map(|p| targets[p * k + c]).collect();
            let m = stats::mean(&col);
            let mut ss_tot = 0.0;
            let mut ss_res = 0.0;
            for p in 0..self.paths {
                let t = targets[p * k + c];
                let f = fitted[p * k + c];
                ss_tot += (t - m) * (t - m);
                ss_res += (t - f) * (t - f);
            }
            total += if ss_tot > 0.0 {
                1.0 - ss_res / ss_tot
            } else {
                1.0
            };
        }
        total / k as f64
    }

    /// Root-mean-square residual of a fit, pooled over target columns.
    pub fn residual_sd(&self, targets: &[f64], fitted: &[f64], k: usize) -> f64 {
        let mut acc = 0.0;
        for (t, f) in targets.iter().zip(fitted) {
            acc += (t - f) * (t - f);
        }
        (acc / (self.paths * k) as f64).sqrt()
    }

    /// Pointwise standard error scale of a fitted function.
    pub fn fit_stderr(&self, residual_sd: f64) -> f64 {
        residual_sd * (self.basis_len as f64 / self.paths as f64).sqrt()
    }
}

/// Evaluate a stored coefficient block at a state.
pub(crate) fn eval_coeffs(
    basis: &RegressionBasis,
    coeffs: &[f64],
    k: usize,
    x: &[f64],
    scratch: &mut [f64],
    out: &mut [f64],
) {
    basis.eval(x, scratch);
    let b = scratch.len();
    for c in 0..k {
        let mut acc = 0.0;
        for r in 0..b {
            acc += scratch[r] * coeffs[r * k + c];
        }
        out[c] = acc;
    }
}

// ---------------------------------------------------------------------------
// Cost functional
// ---------------------------------------------------------------------------

/// Monte Carlo cost: left-endpoint quadrature of the running cost plus the
/// terminal cost, with its standard error.
pub fn cost_functional(problem: &SpectralProblem, bundle: &PathBundle) -> (f64, f64) {
    let l = bundle.steps();
    let dt = bundle.grid.dt();
    let costs: Vec<f64> = (0..bundle.paths)
        .map(|path| {
            let mut acc = 0.0;
            for i in 0..l {
                let t = bundle.grid.node(i);
                acc += problem.coefficients.running_cost(
                    t,
                    bundle.state(path, i),
                    bundle.control_value(path, i),
                ) * dt;
            }
            acc + problem.coefficients.terminal_cost(bundle.state(path, l))
        })
        .collect();
    stats::mean_and_stderr(&costs)
}

// ---------------------------------------------------------------------------
// Scalar BSDE
// ---------------------------------------------------------------------------

type DriverArc = Arc<dyn Fn(f64, &[f64], f64, &[f64], f64) -> f64 + Send + Sync>;
type TerminalArc = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Regression representation of one backward pair `(Y, Z)`.
///
/// `Y` at the terminal step is `Phi(X_L)` exactly; at interior steps it is
/// reconstructed from the stored continuation/`Z` coefficients and the
/// driver. `Z` is defined on steps `0..L`.
pub struct BsdeSolution {
    pub basis: RegressionBasis,
    /// continuation coefficients per step, `basis_len` each
    cont_coeffs: Vec<Vec<f64>>,
    /// `Z` coefficients per step, `basis_len x m` each
    z_coeffs: Vec<Vec<f64>>,
    pub diagnostics: Vec<StepDiagnostics>,
    driver: DriverArc,
    terminal: TerminalArc,
    /// `(mean, stderr)` of `Y` at the first step of the window
    pub y0: (f64, f64),
    /// first step of the solved window (bundle-local)
    pub window_start: usize,
    /// last step of the solved window; `Y` there equals the terminal data
    pub window_end: usize,
    /// per-path terminal data used at `window_end` (needed to evaluate `Y`
    /// when the terminal data is not `Phi(X)`)
    terminal_values: Option<Vec<f64>>,
}

impl BsdeSolution {
    /// `Y` per path at a step of the solved window.
    pub fn y_values(&self, bundle: &PathBundle, step: usize) -> Vec<f64> {
        assert!(step >= self.window_start && step <= self.window_end);
        let mpaths = bundle.paths;
        if step == self.window_end {
            return match &self.terminal_values {
                Some(v) => v.clone(),
                None => (0..mpaths)
                    .map(|p| (self.terminal)(bundle.state(p, step)))
                    .collect(),
            };
        }
        let n = bundle.dim;
        let m = bundle.noise_dim;
        let b = self.basis.len(n);
        let mut scratch = vec![0.0; b];
        let mut z = vec![0.0; m];
        let mut cont = [0.0];
        let dt = bundle.grid.dt();
        let t = bundle.grid.node(step);
        let local = step - self.window_start;
        (0..mpaths)
            .map(|path| {
                let x = bundle.state(path, step);
                eval_coeffs(&self.basis, &self.cont_coeffs[local], 1, x, &mut scratch, &mut cont);
                eval_coeffs(&self.basis, &self.z_coeffs[local], m, x, &mut scratch, &mut z);
                let u = bundle.control_value(path, step);
                cont[0] + (self.driver)(t, x, cont[0], &z, u) * dt
            })
            .collect()
    }

    /// `Z` per path at a step (rows `paths x m`).
    pub fn z_values(&self, bundle: &PathBundle, step: usize) -> Vec<f64> {
        assert!(step >= self.window_start && step < self.window_end);
        let n = bundle.dim;
        let m = bundle.noise_dim;
        let b = self.basis.len(n);
        let mut scratch = vec![0.0; b];
        let local = step - self.window_start;
        let mut out = vec![0.0; bundle.paths * m];
        for path in 0..bundle.paths {
            let x = bundle.state(path, step);
            let (head, tail) = out.split_at_mut((path + 1) * m);
            let _ = tail;
            eval_coeffs(
                &self.basis,
                &self.z_coeffs[local],
                m,
                x,
                &mut scratch,
                &mut head[path * m..],
            );
        }
        out
    }
}

/// Solve the recursive BSDE of the problem (driver `g`, terminal `Phi`,
/// defaulting to `f` and `h`) along the bundle.
pub fn solve_bsde(
    problem: &SpectralProblem,
    bundle: &PathBundle,
    basis: &RegressionBasis,
) -> Result<BsdeSolution> {
    let coeffs = problem.coefficients.clone();
    let coeffs2 = problem.coefficients.clone();
    let driver: DriverArc = Arc::new(move |t, x, y, z, u| coeffs.driver(t, x, y, z, u));
    let terminal: TerminalArc = Arc::new(move |x| coeffs2.recursive_terminal(x));
    solve_bsde_window(problem, bundle, basis, driver, terminal, 0, bundle.steps(), None)
}

/// Solve a BSDE with explicit driver/terminal on the full window.
pub fn solve_bsde_with(
    problem: &SpectralProblem,
    bundle: &PathBundle,
    basis: &RegressionBasis,
    driver: DriverArc,
    terminal: TerminalArc,
) -> Result<BsdeSolution> {
    solve_bsde_window(problem, bundle, basis, driver, terminal, 0, bundle.steps(), None)
}

/// The backward evaluator on a sub-window `[start, end]` with per-path
/// terminal data `zeta` (measurable at the window end). With `start ==
/// end` the evaluator is the identity on `zeta`.
pub fn backward_evaluator(
    problem: &SpectralProblem,
    bundle: &PathBundle,
    basis: &RegressionBasis,
    start: usize,
    end: usize,
    zeta: Vec<f64>,
) -> Result<BsdeSolution> {
    if end > bundle.steps() || start > end {
        return Err(Error::invalid(format!(
            "invalid backward window [{start}, {end}] on {} steps",
            bundle.steps()
        )));
    }
    if zeta.len() != bundle.paths {
        return Err(Error::DimensionMismatch {
            expected: bundle.paths,
            got: zeta.len(),
            context: "terminal data".into(),
        });
    }
    let coeffs = problem.coefficients.clone();
    let driver: DriverArc = Arc::new(move |t, x, y, z, u| coeffs.driver(t, x, y, z, u));
    let terminal: TerminalArc = Arc::new(|_x| f64::NAN); // never used: zeta provided
    solve_bsde_window(problem, bundle, basis, driver, terminal, start, end, Some(zeta))
}

#[allow(clippy::too_many_arguments)]
fn solve_bsde_window(
    _problem: &SpectralProblem,
    bundle: &PathBundle,
    basis: &RegressionBasis,
    driver: DriverArc,
    terminal: TerminalArc,
    start: usize,
    end: usize,
    zeta: Option<Vec<f64>>,
) -> Result<BsdeSolution> {
    let mpaths = bundle.paths;
    let m = bundle.noise_dim;
    let dt = bundle.grid.dt();
    let steps = end - start;

    let mut y: Vec<f64> = match &zeta {
        Some(z) => z.clone(),
        None => (0..mpaths)
            .map(|p| terminal(bundle.state(p, end)))
            .collect(),
    };

    let mut cont_coeffs = vec![Vec::new(); steps];
    let mut z_coeffs = vec![Vec::new(); steps];
    let mut diagnostics = Vec::with_capacity(steps);
    let mut dw = vec![0.0; m];
    let mut cont = vec![0.0; mpaths];
    let mut z_fit = vec![0.0; mpaths * m];
    let mut z_target = vec![0.0; mpaths * m];

    for local in (0..steps).rev() {
        let step = start + local;
        let t = bundle.grid.node(step);
        let reg = StepRegression::build(basis, bundle, step, t)?;

        let c_cont = reg.project(&y, 1);
        reg.fitted(&c_cont, 1, &mut cont);
        let r2 = reg.r_squared(&y, &cont, 1);
        let resid_sd = reg.residual_sd(&y, &cont, 1);

        // Z from the martingale residual: (Y_{i+1} - cont) dW / dt
        for path in 0..mpaths {
            bundle.increment_into(path, step, &mut dw);
            let resid = y[path] - cont[path];
            for k in 0..m {
                z_target[path * m + k] = resid * dw[k] / dt;
            }
        }
        let c_z = reg.project(&z_target, m);
        reg.fitted(&c_z, m, &mut z_fit);

        for path in 0..mpaths {
            let x = bundle.state(path, step);
            let u = bundle.control_value(path, step);
            let z_row = &z_fit[path * m..(path + 1) * m];
            y[path] = cont[path] + driver(t, x, cont[path], z_row, u) * dt;
        }

        let (mean, stderr) = stats::mean_and_stderr(&y);
        diagnostics.push(StepDiagnostics {
            step,
            t,
            mean,
            stderr,
            condition: reg.condition,
            r_squared: r2,
            residual_sd: resid_sd,
            fit_stderr: reg.fit_stderr(resid_sd),
        });
        cont_coeffs[local] = c_cont;
        z_coeffs[local] = c_z;
    }
    diagnostics.reverse();

    // The dW regression at the final interior step reuses the penultimate
    // representation (the terminal-step estimate is reported, not trusted).
    if steps >= 2 {
        z_coeffs[steps - 1] = z_coeffs[steps - 2].clone();
    }

    let y0 = stats::mean_and_stderr(&y);
    Ok(BsdeSolution {
        basis: basis.clone(),
        cont_coeffs,
        z_coeffs,
        diagnostics,
        driver,
        terminal,
        y0,
        window_start: start,
        window_end: end,
        terminal_values: zeta,
    })
}

// ---------------------------------------------------------------------------
// First-order adjoint
// ---------------------------------------------------------------------------

/// Regression representation of the first-order adjoint pair `(p, q)`.
///
/// `p(T) = -h_x(X(T))` is evaluated exactly; interior steps store
/// projected coefficients with the semigroup factor folded in. `q` is the
/// `N x m` martingale density of `p`.
pub struct AdjointFirst {
    pub basis: RegressionBasis,
    /// per step: `basis_len x N`
    p_coeffs: Vec<Vec<f64>>,
    /// per step: `basis_len x (N*m)`
    q_coeffs: Vec<Vec<f64>>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub p_r_squared: Vec<f64>,
    /// pointwise fit error of `q` per step
    pub q_fit_se: Vec<f64>,
    /// regression noise of `p` values accumulated from `T` down to each
    /// step (root sum of squares of the per-step fit errors)
    pub p_accumulated_se: Vec<f64>,
}

impl AdjointFirst {
    pub fn p_at(
        &self,
        problem: &SpectralProblem,
        bundle: &PathBundle,
        path: usize,
        step: usize,
    ) -> Vec<f64> {
        let n = bundle.dim;
        let mut out = vec![0.0; n];
        if step == bundle.steps() {
            problem
                .coefficients
                .terminal_cost_gradient(bundle.state(path, step), &mut out);
            for o in out.iter_mut() {
                *o = -*o;
            }
            return out;
        }
        let b = self.basis.len(n);
        let mut scratch = vec![0.0; b];
        eval_coeffs(
            &self.basis,
            &self.p_coeffs[step],
            n,
            bundle.state(path, step),
            &mut scratch,
            &mut out,
        );
        out
    }

    /// `q` (an `N x m` matrix, row-major) at `(path, step)`.
    pub fn q_at(&self, bundle: &PathBundle, path: usize, step: usize) -> Vec<f64> {
        let n = bundle.dim;
        let m = bundle.noise_dim;
        let b = self.basis.len(n);
        let mut scratch = vec![0.0; b];
        let mut out = vec![0.0; n * m];
        let s = step.min(self.q_coeffs.len() - 1);
        eval_coeffs(
            &self.basis,
            &self.q_coeffs[s],
            n * m,
            bundle.state(path, step),
            &mut scratch,
            &mut out,
        );
        out
    }

    /// All paths' `p` at one step (`paths x N`).
    pub fn p_slab(&self, problem: &SpectralProblem, bundle: &PathBundle, step: usize) -> Vec<f64> {
        let n = bundle.dim;
        let mut out = vec![0.0; bundle.paths * n];
        for path in 0..bundle.paths {
            let v = self.p_at(problem, bundle, path, step);
            out[path * n..(path + 1) * n].copy_from_slice(&v);
        }
        out
    }

    /// Propagated pointwise noise of `p` at a step.
    pub fn p_value_se(&self, step: usize) -> f64 {
        self.p_accumulated_se
            .get(step)
            .copied()
            .unwrap_or(0.0)
    }

    /// Pointwise fit noise of `q` at a step.
    pub fn q_value_se(&self, step: usize) -> f64 {
        let s = step.min(self.q_fit_se.len().saturating_sub(1));
        self.q_fit_se.get(s).copied().unwrap_or(0.0)
    }
}

/// Apply `S(dt)^*` to every basis-row of a `basis_len x N` coefficient
/// block (the projection of `S(dt)^* v` equals `S(dt)^*` applied to the
/// projection of `v`, since the factor is state-independent).
fn semigroup_adjoint_on_rows(
    op: &SpectralOperator,
    dt: f64,
    coeffs: &mut [f64],
    n: usize,
) -> Result<()> {
    for row in coeffs.chunks_mut(n) {
        op.semigroup_adjoint_apply_in_place(dt, row)?;
    }
    Ok(())
}

/// Solve the first-order adjoint equation along the bundle:
///
/// ```text
/// p_i = S(dt)^* P[ p_{i+1} + (a_x^* p_{i+1} + b_x^* q_i - f_x) dt | X_i ]
/// p_L = -h_x(X_L)
/// ```
pub fn solve_first_adjoint(
    problem: &SpectralProblem,
    bundle: &PathBundle,
    basis: &RegressionBasis,
) -> Result<AdjointFirst> {
    let n = bundle.dim;
    let m = bundle.noise_dim;
    let l = bundle.steps();
    let dt = bundle.grid.dt();
    let mpaths = bundle.paths;
    let coeffs = &problem.coefficients;

    // terminal values
    let mut p_vals = vec![0.0; mpaths * n];
    for path in 0..mpaths {
        let row = &mut p_vals[path * n..(path + 1) * n];
        coeffs.terminal_cost_gradient(bundle.state(path, l), row);
        for v in row.iter_mut() {
            *v = -*v;
        }
    }

    let mut p_coeffs = vec![Vec::new(); l];
    let mut q_coeffs = vec![Vec::new(); l];
    let mut diagnostics = Vec::with_capacity(l);
    let mut p_r_squared = vec![0.0; l];
    let mut q_fit_se = vec![0.0; l];

    let mut dw = vec![0.0; m];
    let mut cont = vec![0.0; mpaths * n];
    let mut q_target = vec![0.0; mpaths * n * m];
    let mut q_fit = vec![0.0; mpaths * n * m];
    let mut target = vec![0.0; mpaths * n];
    let mut jac_a = vec![0.0; n * n];
    let mut jac_b = vec![0.0; n * m * n];
    let mut grad_f = vec![0.0; n];

    for step in (0..l).rev() {
        let t = bundle.grid.node(step);
        let reg = StepRegression::build(basis, bundle, step, t)?;

        // continuation of p
        let c_cont = reg.project(&p_vals, n);
        reg.fitted(&c_cont, n, &mut cont);
        let resid_sd = reg.residual_sd(&p_vals, &cont, n);

        // q from the martingale residual
        for path in 0..mpaths {
            bundle.increment_into(path, step, &mut dw);
            for j in 0..n {
                let resid = p_vals[path * n + j] - cont[path * n + j];
                for k in 0..m {
                    q_target[(path * n + j) * m + k] = resid * dw[k] / dt;
                }
            }
        }
        let c_q = reg.project(&q_target, n * m);
        reg.fitted(&c_q, n * m, &mut q_fit);
        q_fit_se[step] = reg.fit_stderr(reg.residual_sd(&q_target, &q_fit, n * m));

        // drift target: p_{i+1} + (a_x^* p_{i+1} + b_x^* q_i - f_x) dt
        for path in 0..mpaths {
            let x = bundle.state(path, step);
            let u = bundle.control_value(path, step);
            coeffs.drift_jacobian(t, x, u, &mut jac_a);
            coeffs.diffusion_jacobian(t, x, u, &mut jac_b);
            coeffs.running_cost_gradient(t, x, u, &mut grad_f);
            let pv = &p_vals[path * n..(path + 1) * n];
            let qv = &q_fit[path * n * m..(path + 1) * n * m];
            for lcomp in 0..n {
                let mut drift = -grad_f[lcomp];
                for j in 0..n {
                    drift += jac_a[j * n + lcomp] * pv[j];
                }
                for j in 0..n {
                    for k in 0..m {
                        drift += jac_b[(j * m + k) * n + lcomp] * qv[j * m + k];
                    }
                }
                target[path * n + lcomp] = pv[lcomp] + drift * dt;
            }
        }
        let mut c_p = reg.project(&target, n);
        let r2 = {
            let mut fit = vec![0.0; mpaths * n];
            reg.fitted(&c_p, n, &mut fit);
            reg.r_squared(&target, &fit, n)
        };
        semigroup_adjoint_on_rows(&problem.operator, dt, &mut c_p, n)?;
        reg.fitted(&c_p, n, &mut p_vals);

        let norms: Vec<f64> = (0..mpaths)
            .map(|path| stats::norm(&p_vals[path * n..(path + 1) * n]))
            .collect();
        let (mean, stderr) = stats::mean_and_stderr(&norms);
        diagnostics.push(StepDiagnostics {
            step,
            t,
            mean,
            stderr,
            condition: reg.condition,
            r_squared: r2,
            residual_sd: resid_sd,
            fit_stderr: reg.fit_stderr(resid_sd),
        });
        p_r_squared[step] = r2;
        p_coeffs[step] = c_p;
        q_coeffs[step] = c_q;
    }
    diagnostics.reverse();

    // reported q at the final interior step: reuse the penultimate fit
    if l >= 2 {
        q_coeffs[l - 1] = q_coeffs[l - 2].clone();
        q_fit_se[l - 1] = q_fit_se[l - 2];
    }

    // per-step fit errors accumulate backward like a random walk
    let mut p_accumulated_se = vec![0.0; l + 1];
    let mut acc = 0.0f64;
    for step in (0..l).rev() {
        let fit = diagnostics
            .iter()
            .find(|d| d.step == step)
            .map(|d| d.fit_stderr)
            .unwrap_or(0.0);
        acc = (acc * acc + fit * fit).sqrt();
        p_accumulated_se[step] = acc;
    }

    Ok(AdjointFirst {
        basis: basis.clone(),
        p_coeffs,
        q_coeffs,
        diagnostics,
        p_r_squared,
        q_fit_se,
        p_accumulated_se,
    })
}

// ---------------------------------------------------------------------------
// Comparison check
// ---------------------------------------------------------------------------

/// Outcome of the BSDE comparison check for an ordered pair of data.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ComparisonReport {
    pub ordered: bool,
    /// worst signed violation `max(Y1 - Y2 - tol)` over (path, step)
    pub worst_violation: f64,
    pub witness_path: Option<usize>,
    pub witness_step: Option<usize>,
    pub tolerance: f64,
}

/// Monotonicity of the BSDE in its data: with `g1 <= g2` and
/// `Phi1 <= Phi2` pointwise, `Y1 <= Y2` path-wise up to three regression
/// standard errors (pointwise fit scale of both solves).
#[allow(clippy::too_many_arguments)]
pub fn comparison_check(
    problem: &SpectralProblem,
    bundle: &PathBundle,
    basis: &RegressionBasis,
    g1: DriverArc,
    g2: DriverArc,
    phi1: TerminalArc,
    phi2: TerminalArc,
) -> Result<ComparisonReport> {
    let s1 = solve_bsde_with(problem, bundle, basis, g1, phi1)?;
    let s2 = solve_bsde_with(problem, bundle, basis, g2, phi2)?;
    let mut worst = f64::MIN;
    let mut witness = None;
    let mut tol_used: f64 = 0.0;
    for step in 0..=bundle.steps() {
        let y1 = s1.y_values(bundle, step);
        let y2 = s2.y_values(bundle, step);
        let fit_se = |s: &BsdeSolution| {
            s.diagnostics
                .iter()
                .find(|d| d.step == step)
                .map(|d| d.fit_stderr)
                .unwrap_or(0.0)
        };
        let tol = 3.0 * (fit_se(&s1) + fit_se(&s2)) + 1e-12;
        tol_used = tol_used.max(tol);
        for path in 0..bundle.paths {
            let v = y1[path] - y2[path] - tol;
            if v > worst {
                worst = v;
                witness = Some((path, step));
            }
        }
    }
    Ok(ComparisonReport {
        ordered: worst <= 0.0,
        worst_violation: worst,
        witness_path: witness.map(|w| w.0),
        witness_step: witness.map(|w| w.1),
        tolerance: tol_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{simulate_state, ControlPolicy};
    use crate::problem::{lq1, CoefficientSet, ControlSet};
    use crate::spectral::{NoiseModel, SpectralOperator, TimeGrid};

    fn driftless_problem(sigma: f64, steps: usize) -> SpectralProblem {
        let coeffs = CoefficientSet::new(
            1,
            1,
            Arc::new(|_t, _x, _u, out: &mut [f64]| out[0] = 0.0),
            Arc::new(move |_t, _x, _u, out: &mut [f64]| out[0] = sigma),
            Arc::new(|_t, _x, _u| 0.0),
            Arc::new(|x: &[f64]| x[0]),
        );
        SpectralProblem::new(
            "driftless",
            SpectralOperator::zero(1),
            coeffs,
            ControlSet::from_points(vec![0.0]).unwrap(),
            TimeGrid::new(0.0, 1.0, steps).unwrap(),
            NoiseModel::new(1, 21).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn constant_terminal_cost_is_exact() {
        let coeffs = CoefficientSet::new(
            1,
            1,
            Arc::new(|_t, _x, u, out: &mut [f64]| out[0] = u),
            Arc::new(|_t, _x, _u, out: &mut [f64]| out[0] = 0.5),
            Arc::new(|_t, _x, _u| 0.0),
            Arc::new(|_x| 1.0),
        );
        let p = SpectralProblem::new(
            "unit-terminal",
            SpectralOperator::zero(1),
            coeffs,
            ControlSet::from_points(vec![0.0]).unwrap(),
            TimeGrid::new(0.0, 1.0, 20).unwrap(),
            NoiseModel::new(1, 22).unwrap(),
        )
        .unwrap();
        let bundle = simulate_state(&p, 0, &[1.0], &ControlPolicy::Constant(0), 100).unwrap();
        let (cost, se) = cost_functional(&p, &bundle);
        assert_eq!(cost, 1.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn lq1_cost_under_optimal_and_null_policy() {
        let p = lq1().with_steps(200).unwrap();
        let m = 20_000;
        // optimal feedback u = -x: J = V(0,1) = 1.25
        let opt = ControlPolicy::feedback_value(&p, |_t, x| -x[0]);
        let b_opt = simulate_state(&p, 0, &[1.0], &opt, m).unwrap();
        let (j_opt, se_opt) = cost_functional(&p, &b_opt);
        assert!(
            (j_opt - 1.25).abs() < 0.02 * 1.25 + 3.0 * se_opt,
            "optimal cost {j_opt} +- {se_opt}"
        );
        // null control: int_0^1 (1 + sigma^2 t) dt + E X(1)^2 = 1.125 + 1.25
        let null = ControlPolicy::Constant(p.controls.nearest_index(0.0));
        let b0 = simulate_state(&p, 0, &[1.0], &null, m).unwrap();
        let (j0, se0) = cost_functional(&p, &b0);
        assert!(
            (j0 - 2.375).abs() < 0.02 * 2.375 + 3.0 * se0,
            "null cost {j0} +- {se0}"
        );
        // and the optimal cost is lower
        assert!(j_opt < j0);
    }

    #[test]
    fn martingale_identity_for_zero_driver() {
        // g = 0, Phi(x) = x1, driftless state: Y_i = X_i (martingale) and
        // Z = diffusion row.
        let sigma = 0.4;
        let p = driftless_problem(sigma, 40);
        let bundle = simulate_state(&p, 0, &[0.3], &ControlPolicy::Constant(0), 20_000).unwrap();
        let sol = solve_bsde(&p, &bundle, &RegressionBasis::default()).unwrap();
        for step in [0, 10, 25] {
            let y = sol.y_values(&bundle, step);
            let mut worst = 0.0f64;
            for path in 0..bundle.paths {
                worst = worst.max((y[path] - bundle.state(path, step)[0]).abs());
            }
            assert!(worst < 0.05, "martingale deviation {worst} at step {step}");
            if step < bundle.steps() {
                let z = sol.z_values(&bundle, step);
                let zbar = stats::mean(&z);
                assert!((zbar - sigma).abs() < 0.02, "Z mean {zbar} vs {sigma}");
            }
        }
    }

    #[test]
    fn constant_driver_integrates_exactly() {
        let c = 0.7;
        let p = driftless_problem(0.3, 25);
        let bundle = simulate_state(&p, 0, &[0.0], &ControlPolicy::Constant(0), 500).unwrap();
        let sol = solve_bsde_with(
            &p,
            &bundle,
            &RegressionBasis::default(),
            Arc::new(move |_t, _x, _y, _z, _u| c),
            Arc::new(|_x| 0.0),
        )
        .unwrap();
        for step in [0, 7, 25] {
            let y = sol.y_values(&bundle, step);
            let expect = c * (1.0 - bundle.grid.node(step));
            for path in 0..bundle.paths {
                assert!(
                    (y[path] - expect).abs() < 1e-9,
                    "Y at step {step}: {} vs {expect}",
                    y[path]
                );
            }
        }
    }

    #[test]
    fn recursive_cost_reduces_to_standard_cost_on_lq1() {
        let p = lq1().with_steps(100).unwrap();
        let policy = ControlPolicy::feedback_value(&p, |_t, x| -x[0]);
        let bundle = simulate_state(&p, 0, &[1.0], &policy, 20_000).unwrap();
        let sol = solve_bsde(&p, &bundle, &RegressionBasis::default()).unwrap();
        let (y0, se) = sol.y0;
        assert!(
            (y0 - 1.25).abs() < 0.02 * 1.25 + 3.0 * se,
            "recursive cost Y(0) = {y0} +- {se}"
        );
        // and it agrees with the quadrature cost on the same bundle
        let (j, _) = cost_functional(&p, &bundle);
        assert!((y0 - j).abs() < 0.02 * 1.25);
    }

    #[test]
    fn evaluator_identity_and_projection() {
        let p = driftless_problem(0.5, 20);
        let bundle = simulate_state(&p, 0, &[0.0], &ControlPolicy::Constant(0), 5000).unwrap();
        // delta = 0: the evaluator returns zeta itself
        let zeta: Vec<f64> = (0..bundle.paths).map(|i| i as f64 * 0.01).collect();
        let sol = backward_evaluator(
            &p,
            &bundle,
            &RegressionBasis::default(),
            5,
            5,
            zeta.clone(),
        )
        .unwrap();
        assert_eq!(sol.y_values(&bundle, 5), zeta);

        // g = 0: the evaluator is the conditional-expectation projection;
        // with zeta = X(10)^2, E[zeta | X_5] at X_5 = x is x^2 + sigma^2 * (t10 - t5).
        let zeta2: Vec<f64> = (0..bundle.paths)
            .map(|path| {
                let x = bundle.state(path, 10)[0];
                x * x
            })
            .collect();
        let sol2 =
            backward_evaluator(&p, &bundle, &RegressionBasis::default(), 5, 10, zeta2).unwrap();
        let y5 = sol2.y_values(&bundle, 5);
        let gap = bundle.grid.node(10) - bundle.grid.node(5);
        let mut worst = 0.0f64;
        for path in 0..bundle.paths {
            let x = bundle.state(path, 5)[0];
            let expect = x * x + 0.25 * gap;
            worst = worst.max((y5[path] - expect).abs());
        }
        assert!(worst < 0.05, "projection deviation {worst}");
    }

    #[test]
    fn evaluator_splices_across_the_midpoint() {
        // Two-stage solve through T/2 agrees with the one-stage solve on
        // shared noise within two regression standard errors.
        let p = lq1().with_steps(100).unwrap();
        let policy = ControlPolicy::feedback_value(&p, |_t, x| -x[0]);
        let bundle = simulate_state(&p, 0, &[1.0], &policy, 20_000).unwrap();
        let basis = RegressionBasis::default();
        let full = solve_bsde(&p, &bundle, &basis).unwrap();
        let y_mid = full.y_values(&bundle, 50);
        let spliced = backward_evaluator(&p, &bundle, &basis, 0, 50, y_mid).unwrap();
        let gap = (full.y0.0 - spliced.y0.0).abs();
        let tol = 2.0 * (full.y0.1 + spliced.y0.1);
        assert!(gap <= tol.max(1e-4), "splicing gap {gap}, tol {tol}");
    }

    #[test]
    fn zero_cost_gives_zero_adjoint() {
        let coeffs = CoefficientSet::new(
            1,
            1,
            Arc::new(|_t, x: &[f64], u, out: &mut [f64]| out[0] = -0.3 * x[0] + u),
            Arc::new(|_t, _x, _u, out: &mut [f64]| out[0] = 0.4),
            Arc::new(|_t, _x, _u| 0.0),
            Arc::new(|_x| 0.0),
        );
        let p = SpectralProblem::new(
            "zero-cost",
            SpectralOperator::zero(1),
            coeffs,
            ControlSet::from_points(vec![0.0]).unwrap(),
            TimeGrid::new(0.0, 1.0, 30).unwrap(),
            NoiseModel::new(1, 23).unwrap(),
        )
        .unwrap();
        let bundle = simulate_state(&p, 0, &[1.0], &ControlPolicy::Constant(0), 1000).unwrap();
        let adj = solve_first_adjoint(&p, &bundle, &RegressionBasis::default()).unwrap();
        for step in [0, 15, 30] {
            for path in [0, 500, 999] {
                let pv = adj.p_at(&p, &bundle, path, step);
                assert!(pv[0].abs() < 1e-12, "p({step}) = {}", pv[0]);
            }
        }
    }

    #[test]
    fn lq1_first_adjoint_matches_riccati_values() {
        // p(t) = -2 X(t) path-wise, q(t) = -2 sigma = -1.
        let p = lq1().with_steps(100).unwrap();
        let policy = ControlPolicy::feedback_value(&p, |_t, x| -x[0]);
        let bundle = simulate_state(&p, 0, &[1.0], &policy, 20_000).unwrap();
        let adj = solve_first_adjoint(&p, &bundle, &RegressionBasis::default()).unwrap();
        for step in [0, 33, 66, 99] {
            let slab = adj.p_slab(&p, &bundle, step);
            // p against -2x: relative L2 error over the ensemble
            let mut num = 0.0;
            let mut den = 0.0;
            for path in 0..bundle.paths {
                let want = -2.0 * bundle.state(path, step)[0];
                let got = slab[path];
                num += (got - want) * (got - want);
                den += want * want;
            }
            let rel = (num / den.max(1e-12)).sqrt();
            assert!(rel < 0.05, "p relative error {rel} at step {step}");
            if step > 0 {
                // R^2 of the feedback relation p ~ -2x across the ensemble
                // (at step 0 the ensemble sits at a single point)
                let wants: Vec<f64> = (0..bundle.paths)
                    .map(|path| -2.0 * bundle.state(path, step)[0])
                    .collect();
                let wbar = stats::mean(&wants);
                let mut ss_tot = 0.0;
                for w in &wants {
                    ss_tot += (w - wbar) * (w - wbar);
                }
                let r2 = 1.0 - num / ss_tot;
                assert!(r2 > 0.98, "feedback R^2 {r2} at step {step}");
            }
            let q = adj.q_at(&bundle, 0, step);
            assert!((q[0] + 1.0).abs() < 0.05, "q = {} at step {step}", q[0]);
        }
    }

    #[test]
    fn first_adjoint_error_shrinks_under_refinement() {
        // Self-convergence on coupled noise: solve on grids L, 2L against a
        // 8L reference; a drift with alpha != 0 puts genuine
        // time-discretisation bias into the scheme.
        let p = crate::problem::make_lq(1.0, 1.0, 0.5, 1.0, 1.0, 1.0, 1.0).unwrap();
        let policy = ControlPolicy::feedback_value(&p, |_t, x| -1.5 * x[0]);
        let m = 4000;
        let base = 256;
        let basis = RegressionBasis::default();
        let solve_at = |factor: usize| {
            let bundle = crate::forward::simulate_state_refined(
                &p,
                &[1.0],
                &policy,
                m,
                base / factor,
                factor,
            )
            .unwrap();
            let adj = solve_first_adjoint(&p, &bundle, &basis).unwrap();
            let mid = bundle.steps() / 2;
            (adj.p_slab(&p, &bundle, mid), bundle)
        };
        let (p_ref, _b_ref) = solve_at(1);
        let mut errs = vec![];
        for factor in [8usize, 4] {
            let (p_coarse, _b) = solve_at(factor);
            let sq: Vec<f64> = (0..m)
                .map(|path| {
                    let d = p_coarse[path] - p_ref[path];
                    d * d
                })
                .collect();
            errs.push(stats::mean(&sq).sqrt());
        }
        assert!(
            errs[1] < errs[0] / 1.3,
            "refinement did not help: {errs:?}"
        );
    }

    #[test]
    fn comparison_constant_shift_integrates() {
        let p = lq1().with_steps(50).unwrap();
        let policy = ControlPolicy::feedback_value(&p, |_t, x| -x[0]);
        let bundle = simulate_state(&p, 0, &[1.0], &policy, 5000).unwrap();
        let basis = RegressionBasis::default();
        let cs = p.coefficients.clone();
        let g1: DriverArc = Arc::new(move |t, x, _y, _z, u| cs.running_cost(t, x, u));
        let cs2 = p.coefficients.clone();
        let g2: DriverArc = Arc::new(move |t, x, _y, _z, u| cs2.running_cost(t, x, u) + 1.0);
        let phi: TerminalArc = Arc::new(|x| x[0] * x[0]);
        let report = comparison_check(&p, &bundle, &basis, g1.clone(), g2.clone(), phi.clone(), phi.clone()).unwrap();
        assert!(report.ordered, "{report:?}");
        // Y2(0) - Y1(0) = T = 1 exactly (constant shift integrates)
        let s1 = solve_bsde_with(&p, &bundle, &basis, g1, phi.clone()).unwrap();
        let s2 = solve_bsde_with(&p, &bundle, &basis, g2, phi).unwrap();
        assert!((s2.y0.0 - s1.y0.0 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn comparison_random_monotone_pair_holds() {
        let p = lq1().with_steps(50).unwrap();
        let policy = ControlPolicy::feedback_value(&p, |_t, x| -x[0]);
        let bundle = simulate_state(&p, 0, &[1.0], &policy, 10_000).unwrap();
        let basis = RegressionBasis::default();
        // ordered pair with a random nonnegative quadratic gap
        let mut stream = p.noise.path_stream(crate::spectral::StreamKind::Sampling, 7);
        for trial in 0..3 {
            let al = stream.uniform();
            let be = stream.uniform() - 0.5;
            let ga = 0.2 * stream.uniform();
            let cs = p.coefficients.clone();
            let g1: DriverArc = Arc::new(move |t, x, _y, _z, u| cs.running_cost(t, x, u));
            let cs2 = p.coefficients.clone();
            let g2: DriverArc = Arc::new(move |t, x, _y, _z, u| {
                let s = al * x[0] + be;
                cs2.running_cost(t, x, u) + s * s + ga
            });
            let phi1: TerminalArc = Arc::new(|x| x[0] * x[0]);
            let phi2: TerminalArc = Arc::new(move |x| x[0] * x[0] + ga);
            let report =
                comparison_check(&p, &bundle, &basis, g1, g2, phi1, phi2).unwrap();
            assert!(report.ordered, "trial {trial}: {report:?}");
        }
    }

    #[test]
    fn degenerate_ensemble_reports_rank_deficiency() {
        // b = 0 with two deterministic control branches: every step has
        // exactly two distinct states, on which the quadratic basis (three
        // functions) is collinear.
        let p = crate::problem::make_bang_bang(1.0)
            .unwrap()
            .with_steps(10)
            .unwrap();
        let mixed = ControlPolicy::OpenLoop(Arc::new(|path, _| (path % 2) as usize));
        let bundle = simulate_state(&p, 0, &[1.0], &mixed, 50).unwrap();
        match solve_bsde(&p, &bundle, &RegressionBasis::default()) {
            Err(Error::RankDeficientRegression { step, .. }) => {
                assert_eq!(step, 9, "backward sweep hits the last step first");
            }
            other => panic!("expected rank-deficiency, got ok={:?}", other.is_ok()),
        }
    }

    #[test]
    fn single_point_sample_projects_to_the_mean() {
        // All paths at one state: the conditional expectation given the
        // state is the plain mean, not an error.
        let p = driftless_problem(0.5, 10);
        let bundle = simulate_state(&p, 0, &[1.0], &ControlPolicy::Constant(0), 3000).unwrap();
        let sol = solve_bsde(&p, &bundle, &RegressionBasis::default()).unwrap();
        // Y(0) = E X(1) = 1 (martingale, Phi(x) = x)
        assert!((sol.y0.0 - 1.0).abs() < 0.05, "Y(0) = {}", sol.y0.0);
        assert_eq!(sol.y0.1 * 0.0, 0.0);
    }

    #[test]
    fn deterministic_value_scatter_shrinks_like_sqrt_m() {
        // The estimate of Y(t; t, eta, u) for deterministic eta is itself
        // deterministic; its across-replicate scatter decays like M^{-1/2}.
        let sizes = [500usize, 2000, 8000];
        let mut sds = vec![];
        for &m in &sizes {
            let mut y0s = vec![];
            for rep in 0..8u64 {
                let p = lq1().with_steps(25).unwrap().with_seed(1000 + rep);
                let policy = ControlPolicy::feedback_value(&p, |_t, x| -x[0]);
                let bundle = simulate_state(&p, 0, &[1.0], &policy, m).unwrap();
                let sol = solve_bsde(&p, &bundle, &RegressionBasis::default()).unwrap();
                y0s.push(sol.y0.0);
            }
            sds.push(stats::variance(&y0s).sqrt());
        }
        let ms: Vec<f64> = sizes.iter().map(|&m| m as f64).collect();
        let slope = stats::slope(
            &ms.iter().map(|v| v.ln()).collect::<Vec<_>>(),
            &sds.iter().map(|v| v.max(1e-12).ln()).collect::<Vec<_>>(),
        );
        assert!(
            (slope + 0.5).abs() < 0.25,
            "scatter slope {slope}, sds {sds:?}"
        );
    }
}

