//! Value functions, dynamic programming and nonsmooth differentials.
//!
//! Two complementary value representations:
//!
//! * [`ValueField`] - backward induction over a tensor anchor grid
//!   (dimension <= 2), minimising over the finite control set with the
//!   one-step expectation estimated from a shared pool of branch draws
//!   (common random numbers across anchors and controls, so
//!   policy-enrichment monotonicity holds exactly on a fixed seed);
//! * [`TrajectoryValueProbe`] - pointwise policy evaluation by branching,
//!   used along optimal trajectories where a grid is unaffordable. Under
//!   an optimal policy this equals the value function.
//!
//! On top of either representation ([`ValueEval`]) sit the
//! finite-difference derivative estimators, the HJB residual and the
//! super/subdifferential membership tests. The spatial superdifferential
//! test freezes time; the right time-superdifferential test probes
//! `s > t` only, matching the forward-in-time irreversibility of the
//! flow.

use crate::backward::{backward_evaluator, RegressionBasis};
use crate::error::{Error, Result};
use crate::forward::{simulate_branches, simulate_state, ControlPolicy};
use crate::problem::{CoefficientSet, SpectralProblem};
use crate::spectral::{StreamKind, TimeGrid};
use crate::stats;
use std::sync::Arc;

/// Tensor grid of anchor states (dimension 1 or 2).
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    axes: Vec<Vec<f64>>,
}

impl AnchorGrid {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(Error::invalid(
                "anchor grids are supported in dimension 1 and 2 only",
            ));
        }
        for axis in &axes {
            if axis.len() < 2 || axis.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::invalid("anchor axes must be strictly increasing"));
            }
        }
        Ok(AnchorGrid { axes })
    }

    pub fn uniform(dim: usize, lo: f64, hi: f64, step: f64) -> Result<Self> {
        let n = ((hi - lo) / step).round() as usize;
        let axis: Vec<f64> = (0..=n).map(|i| lo + i as f64 * step).collect();
        AnchorGrid::new(vec![axis; dim])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    /// Length of the last (fastest-varying) axis.
    pub fn last_axis_len(&self) -> usize {
        self.axes.last().map(|a| a.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, idx: usize, out: &mut [f64]) {
        match self.axes.len() {
            1 => out[0] = self.axes[0][idx],
            _ => {
                let n1 = self.axes[1].len();
                out[0] = self.axes[0][idx / n1];
                out[1] = self.axes[1][idx % n1];
            }
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.axes).all(|(&xi, axis)| {
            xi >= *axis.first().unwrap() - 1e-12 && xi <= *axis.last().unwrap() + 1e-12
        })
    }

    fn bracket(axis: &[f64], x: f64) -> (usize, f64) {
        if x <= axis[0] {
            return (0, 0.0);
        }
        let last = axis.len() - 1;
        if x >= axis[last] {
            return (last - 1, 1.0);
        }
        // axes are small; binary search keeps this O(log n)
        let mut lo = 0;
        let mut hi = last;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if axis[mid] <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        ((lo), (x - axis[lo]) / (axis[lo + 1] - axis[lo]))
    }

    /// Multilinear interpolation of a value slice (clamped outside the
    /// hull).
    pub fn interp(&self, values: &[f64], x: &[f64]) -> f64 {
        match self.axes.len() {
            1 => {
                let (i, w) = Self::bracket(&self.axes[0], x[0]);
                (1.0 - w) * values[i] + w * values[i + 1]
            }
            _ => {
                let n1 = self.axes[1].len();
                let (i, wi) = Self::bracket(&self.axes[0], x[0]);
                let (j, wj) = Self::bracket(&self.axes[1], x[1]);
                let v00 = values[i * n1 + j];
                let v01 = values[i * n1 + j + 1];
                let v10 = values[(i + 1) * n1 + j];
                let v11 = values[(i + 1) * n1 + j + 1];
                (1.0 - wi) * ((1.0 - wj) * v00 + wj * v01) + wi * ((1.0 - wj) * v10 + wj * v11)
            }
        }
    }
}

/// Uniform interface of the two value representations.
pub trait ValueEval {
    /// `(value, standard error)` at grid node `step` and state `x`.
    fn value(&self, step: usize, x: &[f64]) -> (f64, f64);
    fn time_grid(&self) -> &TimeGrid;
    fn state_dim(&self) -> usize;
    /// Noise scale relevant for *differences* of nearby evaluations. With
    /// common random numbers the accumulated error is a smooth common
    /// component that cancels in differences, leaving the per-slice
    /// scatter; representations without that structure fall back to the
    /// absolute standard error.
    fn local_se(&self, step: usize, x: &[f64]) -> f64 {
        self.value(step, x).1
    }
}

/// Value samples on a `(time, anchor)` grid with the minimising control
/// indices and Monte Carlo standard errors.
#[derive(Debug, Clone)]
pub struct ValueField {
    pub grid: TimeGrid,
    pub anchors: AnchorGrid,
    pub dim: usize,
    /// `(steps+1) x anchors`
    pub values: Vec<f64>,
    /// accumulated standard errors, `(steps+1) x anchors`
    pub stderr: Vec<f64>,
    /// per-slice branch scatter (the difference-relevant noise)
    pub local_stderr: Vec<f64>,
    /// `steps x anchors` minimising control indices
    pub policy: Vec<u16>,
    /// fraction of branch landings outside the anchor hull (clamped)
    pub extrapolation_fraction: f64,
}

impl ValueField {
    pub fn value_slice(&self, step: usize) -> &[f64] {
        let a = self.anchors.len();
        &self.values[step * a..(step + 1) * a]
    }

    pub fn stderr_slice(&self, step: usize) -> &[f64] {
        let a = self.anchors.len();
        &self.stderr[step * a..(step + 1) * a]
    }

    pub fn local_stderr_slice(&self, step: usize) -> &[f64] {
        let a = self.anchors.len();
        &self.local_stderr[step * a..(step + 1) * a]
    }

    pub fn policy_index(&self, step: usize, anchor: usize) -> usize {
        self.policy[step * self.anchors.len() + anchor] as usize
    }

    /// The induced Markov feedback policy: nearest anchor, minimising
    /// control there (piecewise constant, deterministic ties).
    pub fn feedback_policy(&self) -> ControlPolicy {
        let field = self.clone();
        ControlPolicy::Feedback(Arc::new(move |t, x| {
            let steps = field.grid.steps();
            let raw = (t - field.grid.t0()) / field.grid.dt();
            let step = (raw.floor().max(0.0) as usize).min(steps.saturating_sub(1));
            // nearest anchor (first minimum wins)
            let a = field.anchors.len();
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            let mut pt = vec![0.0; field.dim];
            for idx in 0..a {
                field.anchors.point(idx, &mut pt);
                let d = stats::dist(&pt, x);
                if d < best_d {
                    best_d = d;
                    best = idx;
                }
            }
            field.policy_index(step, best)
        }))
    }

    /// Tabulate a closed-form function as a field (tests and oracles).
    pub fn tabulate(
        grid: TimeGrid,
        anchors: AnchorGrid,
        f: impl Fn(f64, &[f64]) -> f64,
    ) -> ValueField {
        let a = anchors.len();
        let dim = anchors.dim();
        let mut values = vec![0.0; (grid.steps() + 1) * a];
        let mut pt = vec![0.0; dim];
        for step in 0..=grid.steps() {
            for idx in 0..a {
                anchors.point(idx, &mut pt);
                values[step * a + idx] = f(grid.node(step), &pt);
            }
        }
        ValueField {
            grid,
            anchors,
            dim,
            stderr: vec![0.0; values.len()],
            local_stderr: vec![0.0; values.len()],
            policy: vec![0; grid.steps() * a],
            values,
            extrapolation_fraction: 0.0,
        }
    }
}

impl ValueEval for ValueField {
    fn value(&self, step: usize, x: &[f64]) -> (f64, f64) {
        (
            self.anchors.interp(self.value_slice(step), x),
            self.anchors.interp(self.stderr_slice(step), x),
        )
    }

    fn time_grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn state_dim(&self) -> usize {
        self.dim
    }

    fn local_se(&self, step: usize, x: &[f64]) -> f64 {
        self.anchors.interp(self.local_stderr_slice(step), x)
    }
}

/// Knobs of the backward induction.
#[derive(Debug, Clone, Copy)]
pub struct DpConfig {
    /// branch draws per time step (shared across anchors and controls)
    pub branches: usize,
    /// substream separating this induction's draws from other consumers
    pub substream: u32,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            branches: 256,
            substream: 0xD0,
        }
    }
}

/// Backward induction over Markov feedback policies on the anchor grid:
///
/// ```text
/// V_L = h,   V_i(x) = min_u [ f(t_i, x, u) dt + mean_k V_{i+1}(X_next(x, u, xi_k)) ]
/// ```
///
/// with `X_next` one exponential-Euler step and `xi_k` a branch pool
/// shared across `(anchor, control)` pairs.
pub fn compute_value(
    problem: &SpectralProblem,
    anchors: AnchorGrid,
    config: &DpConfig,
) -> Result<ValueField> {
    let n = problem.state_dim();
    if anchors.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: anchors.dim(),
            context: "anchor grid dimension".into(),
        });
    }
    let m = problem.noise_dim();
    let grid = problem.horizon;
    let l = grid.steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let a_count = anchors.len();
    let k_branches = config.branches.max(1);
    let coeffs = &problem.coefficients;
    let n_controls = problem.controls.len();

    let mut values = vec![0.0; (l + 1) * a_count];
    let mut stderrs = vec![0.0; (l + 1) * a_count];
    let mut local_stderrs = vec![0.0; (l + 1) * a_count];
    let mut policy = vec![0u16; l * a_count];

    let mut pt = vec![0.0; n];
    for idx in 0..a_count {
        anchors.point(idx, &mut pt);
        values[l * a_count + idx] = coeffs.terminal_cost(&pt);
    }

    // round the pool to two equal halves of antithetic pairs
    let k_branches = (k_branches / 4).max(1) * 4;
    let mut drift = vec![0.0; n];
    let mut bmat = vec![0.0; n * m];
    let mut y_det = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut landings = 0usize;
    let mut total_landings = 0usize;
    let mut branch_vals = vec![0.0; k_branches];
    let mut xi = vec![0.0; k_branches * m];
    for step in (0..l).rev() {
        let t = grid.node(step);
        // Branch pool of the step: two independent halves, each antithetic
        // and moment-matched per coordinate (sample mean 0, variance 1).
        // Matching makes quadratic continuation values integrate exactly;
        // the half-pool disagreement provides an honest empirical error.
        {
            let mut s = problem
                .noise
                .path_stream(StreamKind::Branch(config.substream), step as u64);
            let half = k_branches / 2;
            let quarter = half / 2;
            for h in 0..2 {
                let base = h * half;
                for k in 0..quarter {
                    for kk in 0..m {
                        let v = s.standard_normal();
                        xi[(base + k) * m + kk] = v;
                        xi[(base + quarter + k) * m + kk] = -v;
                    }
                }
                for kk in 0..m {
                    let col: Vec<f64> =
                        (0..half).map(|k| xi[(base + k) * m + kk]).collect();
                    let sd = (stats::dot(&col, &col) / half as f64).sqrt();
                    if sd > 0.0 {
                        for k in 0..half {
                            xi[(base + k) * m + kk] /= sd;
                        }
                    }
                }
            }
        }
        let next_slice = values[(step + 1) * a_count..(step + 2) * a_count].to_vec();
        let next_slice = next_slice.as_slice();
        let next_se = stderrs[(step + 1) * a_count..(step + 2) * a_count].to_vec();

        for idx in 0..a_count {
            anchors.point(idx, &mut pt);
            let mut best = f64::INFINITY;
            let mut best_j = 0usize;
            let mut best_se_sq = 0.0;
            let mut b_ready = false;
            for j in 0..n_controls {
                let u = problem.controls.point(j);
                coeffs.drift(t, &pt, u, &mut drift);
                if !b_ready || !coeffs.diffusion_control_independent {
                    coeffs.diffusion(t, &pt, u, &mut bmat);
                    b_ready = true;
                }
                for c in 0..n {
                    y_det[c] = pt[c] + drift[c] * dt;
                }
                let b_is_zero = bmat.iter().all(|v| v.abs() < 1e-300);
                let (continuation, var_k) = if b_is_zero {
                    z.copy_from_slice(&y_det);
                    problem.operator.semigroup_apply_in_place(dt, &mut z)?;
                    if !anchors.contains(&z) {
                        landings += 1;
                    }
                    total_landings += 1;
                    (anchors.interp(next_slice, &z), 0.0)
                } else {
                    for (k, bv) in branch_vals.iter_mut().enumerate() {
                        for c in 0..n {
                            let mut acc = y_det[c];
                            for kk in 0..m {
                                acc += bmat[c * m + kk] * sqrt_dt * xi[k * m + kk];
                            }
                            z[c] = acc;
                        }
                        problem.operator.semigroup_apply_in_place(dt, &mut z)?;
                        if !anchors.contains(&z) {
                            landings += 1;
                        }
                        total_landings += 1;
                        *bv = anchors.interp(next_slice, &z);
                    }
                    // half-pool disagreement is the realised error scale
                    let half = k_branches / 2;
                    let mean_a = stats::mean(&branch_vals[..half]);
                    let mean_b = stats::mean(&branch_vals[half..]);
                    let se = 0.5 * (mean_a - mean_b).abs();
                    (0.5 * (mean_a + mean_b), se * se)
                };
                let candidate = coeffs.running_cost(t, &pt, u) * dt + continuation;
                if candidate < best {
                    best = candidate;
                    best_j = j;
                    best_se_sq = var_k;
                }
            }
            // propagate: branch scatter at the winner plus the (interpolated)
            // error of the next slice at the deterministic landing
            z.copy_from_slice(&y_det);
            problem.operator.semigroup_apply_in_place(dt, &mut z)?;
            let se_next = anchors.interp(&next_se, &z);
            values[step * a_count + idx] = best;
            stderrs[step * a_count + idx] = (best_se_sq + se_next * se_next).sqrt();
            local_stderrs[step * a_count + idx] = best_se_sq.sqrt();
            policy[step * a_count + idx] = best_j as u16;
        }
    }

    Ok(ValueField {
        grid,
        anchors,
        dim: n,
        values,
        stderr: stderrs,
        local_stderr: local_stderrs,
        policy,
        extrapolation_fraction: if total_landings > 0 {
            landings as f64 / total_landings as f64
        } else {
            0.0
        },
    })
}

/// Pointwise value estimates by policy evaluation: branch an ensemble from
/// `(t, x)` under a fixed policy and average the realised cost. Equal to
/// the value function when the policy is optimal. All probes at one time
/// step share branch noise, which makes finite differences across nearby
/// probes essentially noise-free.
pub struct TrajectoryValueProbe<'a> {
    pub problem: &'a SpectralProblem,
    pub policy: &'a ControlPolicy,
    pub branches: usize,
    pub substream: u32,
}

impl ValueEval for TrajectoryValueProbe<'_> {
    fn value(&self, step: usize, x: &[f64]) -> (f64, f64) {
        let bundle = simulate_branches(
            self.problem,
            step,
            x,
            self.policy,
            self.branches,
            self.substream,
        )
        .expect("branch simulation failed");
        crate::backward::cost_functional(self.problem, &bundle)
    }

    fn time_grid(&self) -> &TimeGrid {
        &self.problem.horizon
    }

    fn state_dim(&self) -> usize {
        self.problem.state_dim()
    }
}

// ---------------------------------------------------------------------------
// DPP consistency
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct DppReport {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub combined_stderr: f64,
}

/// Two-stage dynamic programming consistency: re-run the induction on
/// `[t, that]` from the field's own slice at `that` with a fresh branch
/// substream, and compare at `eta`.
pub fn dpp_consistency(
    problem: &SpectralProblem,
    field: &ValueField,
    step_t: usize,
    step_that: usize,
    eta: &[f64],
    config: &DpConfig,
) -> Result<DppReport> {
    if step_that < step_t || step_that > field.grid.steps() {
        return Err(Error::invalid("need t <= that within the field grid"));
    }
    let (lhs, se_l) = field.value(step_t, eta);
    if step_that == step_t {
        return Ok(DppReport {
            lhs,
            rhs: lhs,
            gap: 0.0,
            combined_stderr: se_l,
        });
    }
    // induction on the sub-window from the stored slice
    let sub_problem = {
        let mut p = problem.clone();
        p.horizon = TimeGrid::new(
            field.grid.node(step_t),
            field.grid.node(step_that),
            step_that - step_t,
        )?;
        p
    };
    let mut sub = compute_value_with_terminal(
        &sub_problem,
        field.anchors.clone(),
        config,
        field.value_slice(step_that),
    )?;
    // seed the terminal stderr with the parent's, for honest propagation
    let a = field.anchors.len();
    sub.stderr[(step_that - step_t) * a..].copy_from_slice(field.stderr_slice(step_that));
    let (rhs, se_r) = sub.value(0, eta);
    Ok(DppReport {
        gap: (lhs - rhs).abs(),
        lhs,
        rhs,
        combined_stderr: (se_l * se_l + se_r * se_r).sqrt().max(1e-12),
    })
}

/// Backward induction with explicit terminal data on the anchors (the
/// recursion engine of [`compute_value`], exposed for windowed use).
pub fn compute_value_with_terminal(
    problem: &SpectralProblem,
    anchors: AnchorGrid,
    config: &DpConfig,
    terminal: &[f64],
) -> Result<ValueField> {
    if terminal.len() != anchors.len() {
        return Err(Error::DimensionMismatch {
            expected: anchors.len(),
            got: terminal.len(),
            context: "terminal slice".into(),
        });
    }
    // wrap: replace h by interpolation of the given slice
    let mut p = problem.clone();
    let anchors_t = anchors.clone();
    let data = terminal.to_vec();
    p.coefficients = replace_terminal(
        &problem.coefficients,
        Arc::new(move |x: &[f64]| anchors_t.interp(&data, x)),
    );
    compute_value(&p, anchors, config)
}

fn replace_terminal(
    coeffs: &CoefficientSet,
    h: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
) -> CoefficientSet {
    let mut c = coeffs.clone();
    c.set_terminal_cost(h);
    c
}

/// Recursive-problem consistency: evaluate the backward evaluator
/// `G_{t,that}[ V(that, X(that)) ]` along simulated paths under `policy`
/// and compare with the field at `eta`.
pub fn dpp_consistency_recursive(
    problem: &SpectralProblem,
    field: &ValueField,
    step_t: usize,
    step_that: usize,
    eta: &[f64],
    policy: &ControlPolicy,
    paths: usize,
) -> Result<DppReport> {
    let (lhs, se_l) = field.value(step_t, eta);
    if step_that == step_t {
        return Ok(DppReport {
            lhs,
            rhs: lhs,
            gap: 0.0,
            combined_stderr: se_l,
        });
    }
    let bundle = simulate_state(problem, step_t, eta, policy, paths)?;
    let local_end = step_that - step_t;
    let zeta: Vec<f64> = (0..paths)
        .map(|path| field.value(step_that, bundle.state(path, local_end)).0)
        .collect();
    let sol = backward_evaluator(
        problem,
        &bundle,
        &RegressionBasis::default(),
        0,
        local_end,
        zeta,
    )?;
    let (rhs, se_r) = sol.y0;
    Ok(DppReport {
        gap: (lhs - rhs).abs(),
        lhs,
        rhs,
        combined_stderr: (se_l * se_l + se_r * se_r).sqrt().max(1e-12),
    })
}

// ---------------------------------------------------------------------------
// HJB generator and residual
// ---------------------------------------------------------------------------

/// `G(t, x, rho, p, P) = 1/2 <P b, b> + <p, a> - f` (the duality-side
/// generator; the minimisation form of the HJB uses it at `(-V_x, -V_xx)`).
pub fn hamiltonian_g(
    coeffs: &CoefficientSet,
    t: f64,
    x: &[f64],
    rho: f64,
    p: &[f64],
    pmat: &[f64],
) -> f64 {
    let n = coeffs.state_dim;
    let m = coeffs.noise_dim;
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n * m];
    coeffs.drift(t, x, rho, &mut a);
    coeffs.diffusion(t, x, rho, &mut b);
    let mut quad = 0.0;
    for k in 0..m {
        for i in 0..n {
            let mut pb = 0.0;
            for j in 0..n {
                pb += pmat[i * n + j] * b[j * m + k];
            }
            quad += pb * b[i * m + k];
        }
    }
    0.5 * quad + stats::dot(p, &a) - coeffs.running_cost(t, x, rho)
}

/// Finite-difference derivative estimates of a value representation at a
/// `(step, x)` point: central differences in space, right quotient in
/// time, with Richardson-style error bars from a two-rung ladder.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DifferentialEstimate {
    pub value: f64,
    pub v_t_plus: f64,
    pub v_t_err: f64,
    pub v_x: Vec<f64>,
    pub v_x_err: f64,
    /// `N x N`, symmetric by construction
    pub v_xx: Vec<f64>,
    pub v_xx_err: f64,
    /// set when the Monte Carlo error bars dominate the estimates
    pub noise_dominated: bool,
}

pub fn numeric_differentials(
    eval: &dyn ValueEval,
    step: usize,
    x: &[f64],
    h: f64,
) -> DifferentialEstimate {
    let n = x.len();
    let (v0, _) = eval.value(step, x);
    // derivatives are differences: the difference-relevant noise applies
    let se0 = eval.local_se(step, x);
    let mut xq = x.to_vec();

    let d_at = |h: f64, xq: &mut Vec<f64>| {
        let mut v_x = vec![0.0; n];
        let mut v_xx = vec![0.0; n * n];
        for c in 0..n {
            xq[c] = x[c] + h;
            let vp = eval.value(step, xq).0;
            xq[c] = x[c] - h;
            let vm = eval.value(step, xq).0;
            xq[c] = x[c];
            v_x[c] = (vp - vm) / (2.0 * h);
            v_xx[c * n + c] = (vp - 2.0 * v0 + vm) / (h * h);
        }
        for c in 0..n {
            for d in 0..c {
                xq[c] = x[c] + h;
                xq[d] = x[d] + h;
                let vpp = eval.value(step, xq).0;
                xq[d] = x[d] - h;
                let vpm = eval.value(step, xq).0;
                xq[c] = x[c] - h;
                xq[d] = x[d] + h;
                let vmp = eval.value(step, xq).0;
                xq[d] = x[d] - h;
                let vmm = eval.value(step, xq).0;
                xq[c] = x[c];
                xq[d] = x[d];
                let v = (vpp - vpm - vmp + vmm) / (4.0 * h * h);
                v_xx[c * n + d] = v;
                v_xx[d * n + c] = v;
            }
        }
        (v_x, v_xx)
    };

    let (vx_h, vxx_h) = d_at(h, &mut xq);
    let (vx_2h, vxx_2h) = d_at(2.0 * h, &mut xq);
    let v_x_err = vx_h
        .iter()
        .zip(&vx_2h)
        .map(|(a, b)| (a - b).abs() / 3.0)
        .fold(0.0f64, f64::max)
        + se0 / h;
    let v_xx_err = vxx_h
        .iter()
        .zip(&vxx_2h)
        .map(|(a, b)| (a - b).abs() / 3.0)
        .fold(0.0f64, f64::max)
        + se0 / (h * h);

    // right time quotient on one and two grid steps
    let grid = eval.time_grid();
    let steps = grid.steps();
    let dt = grid.dt();
    let s1 = (step + 1).min(steps);
    let s2 = (step + 2).min(steps);
    let (v1, _) = eval.value(s1, x);
    let v_t_1 = (v1 - v0) / (dt * (s1 - step).max(1) as f64);
    let v_t_2 = if s2 > s1 {
        let (v2, _) = eval.value(s2, x);
        (v2 - v0) / (dt * (s2 - step) as f64)
    } else {
        v_t_1
    };
    let v_t_err = (v_t_1 - v_t_2).abs() + se0 / dt;

    let scale = vx_h.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
    let noise_dominated = v_x_err > scale.max(1e-9);
    DifferentialEstimate {
        value: v0,
        v_t_plus: v_t_1,
        v_t_err,
        v_x: vx_h,
        v_x_err,
        v_xx: vxx_h,
        v_xx_err,
        noise_dominated,
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct HjbReport {
    pub residual: f64,
    /// combined finite-difference and Monte Carlo error bar
    pub error_bar: f64,
    /// residual smaller than its own error bar cannot be judged
    pub inconclusive: bool,
    pub minimising_control: f64,
}

/// HJB residual at `(t, x)`:
///
/// ```text
/// r = V_t + <A^* V_x, x> - max_rho G(t, x, rho, -V_x, -V_xx)
/// ```
///
/// which vanishes on smooth value functions (the maximisation at negated
/// derivative arguments is the minimisation form of the generator).
pub fn hjb_residual(
    problem: &SpectralProblem,
    eval: &dyn ValueEval,
    step: usize,
    x: &[f64],
    h: f64,
) -> HjbReport {
    let n = problem.state_dim();
    let d = numeric_differentials(eval, step, x, h);
    let t = eval.time_grid().node(step);
    let mut astar_vx = vec![0.0; n];
    problem
        .operator
        .apply_generator_adjoint(&d.v_x, &mut astar_vx);
    let transport = stats::dot(&astar_vx, x);

    let neg_vx: Vec<f64> = d.v_x.iter().map(|v| -v).collect();
    let neg_vxx: Vec<f64> = d.v_xx.iter().map(|v| -v).collect();
    let mut best = f64::NEG_INFINITY;
    let mut best_u = problem.controls.point(0);
    for j in 0..problem.controls.len() {
        let rho = problem.controls.point(j);
        let g = hamiltonian_g(&problem.coefficients, t, x, rho, &neg_vx, &neg_vxx);
        if g > best {
            best = g;
            best_u = rho;
        }
    }
    let residual = d.v_t_plus + transport - best;
    let error_bar = d.v_t_err + d.v_x_err * stats::norm(x) + d.v_xx_err + d.v_x_err;
    HjbReport {
        residual,
        error_bar,
        inconclusive: residual.abs() <= error_bar,
        minimising_control: best_u,
    }
}

// ---------------------------------------------------------------------------
// Super/subdifferential membership
// ---------------------------------------------------------------------------

/// Which differential set is probed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum DiffKind {
    /// spatial second-order superdifferential (time frozen)
    SpaceSuper,
    /// spatial second-order subdifferential
    SpaceSub,
    /// right time superdifferential (one-sided in `s > t`)
    TimeRightSuper,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MembershipReport {
    pub kind: DiffKind,
    /// normalised expansion margins per ladder rung (worst probe of each)
    pub margins: Vec<f64>,
    /// tolerances per rung (3 x propagated noise at that rung)
    pub tolerances: Vec<f64>,
    pub accepted: bool,
}

/// Noise of a membership candidate itself (regression errors of the
/// adjoint values it was built from); folded into the rung tolerances.
#[derive(Debug, Clone, Copy, Default)]
pub struct CandidateNoise {
    /// error of the linear data (`p` for space, `r` for time)
    pub linear: f64,
    /// error of the quadratic data `P`
    pub quad: f64,
}

/// Test `(r, p, P)` for membership in a super/subdifferential at
/// `(step, x)` by probing a shrinking ladder of offsets.
///
/// The expansion residual is normalised by the squared probe radius
/// (space) or the time offset (time); the lim-sup condition is
/// operationalised as: the margin at the finest rung must not exceed
/// its noise tolerance, and positive margins above noise must shrink
/// along the ladder.
#[allow(clippy::too_many_arguments)]
pub fn superdiff_membership(
    eval: &dyn ValueEval,
    step: usize,
    x: &[f64],
    r_cand: f64,
    p_cand: &[f64],
    pmat_cand: &[f64],
    ladder: &[f64],
    kind: DiffKind,
) -> MembershipReport {
    superdiff_membership_noisy(
        eval,
        step,
        x,
        r_cand,
        p_cand,
        pmat_cand,
        ladder,
        kind,
        CandidateNoise::default(),
    )
}

/// [`superdiff_membership`] with explicit candidate noise.
#[allow(clippy::too_many_arguments)]
pub fn superdiff_membership_noisy(
    eval: &dyn ValueEval,
    step: usize,
    x: &[f64],
    r_cand: f64,
    p_cand: &[f64],
    pmat_cand: &[f64],
    ladder: &[f64],
    kind: DiffKind,
    noise: CandidateNoise,
) -> MembershipReport {
    let n = x.len();
    let (v0, _) = eval.value(step, x);
    let se0 = eval.local_se(step, x);
    let mut margins = Vec::with_capacity(ladder.len());
    let mut tolerances = Vec::with_capacity(ladder.len());

    for &rad in ladder {
        match kind {
            DiffKind::SpaceSuper | DiffKind::SpaceSub => {
                let mut worst = f64::NEG_INFINITY;
                let mut tol: f64 = 0.0;
                let mut probe = |y: &[f64]| {
                    let (vy, _) = eval.value(step, y);
                    let sey = eval.local_se(step, y);
                    let mut lin = 0.0;
                    let mut quad = 0.0;
                    for i in 0..n {
                        let d = y[i] - x[i];
                        lin += p_cand[i] * d;
                        let mut pd = 0.0;
                        for j in 0..n {
                            pd += pmat_cand[i * n + j] * (y[j] - x[j]);
                        }
                        quad += 0.5 * pd * d;
                    }
                    let dist = stats::dist(y, x);
                    let dist_sq = dist * dist;
                    let resid = (vy - v0 - lin - quad) / dist_sq;
                    let resid = if kind == DiffKind::SpaceSub { -resid } else { resid };
                    if resid > worst {
                        worst = resid;
                    }
                    let float_floor = 1e-12 * v0.abs().max(1.0);
                    let cand = 3.0 * (noise.linear / dist + 0.5 * noise.quad);
                    let probe_tol = (3.0 * (sey + se0) + float_floor) / dist_sq + cand;
                    if probe_tol > tol {
                        tol = probe_tol;
                    }
                };
                let mut y = x.to_vec();
                for c in 0..n {
                    y[c] = x[c] + rad;
                    probe(&y);
                    y[c] = x[c] - rad;
                    probe(&y);
                    y[c] = x[c];
                }
                if n == 2 {
                    let s = rad / (2.0f64).sqrt();
                    for (d0, d1) in [(s, s), (s, -s), (-s, s), (-s, -s)] {
                        y[0] = x[0] + d0;
                        y[1] = x[1] + d1;
                        probe(&y);
                    }
                    y.copy_from_slice(x);
                }
                margins.push(worst);
                tolerances.push(tol);
            }
            DiffKind::TimeRightSuper => {
                // probe s = t + rad (rounded up to a grid node)
                let grid = eval.time_grid();
                let dt = grid.dt();
                let ds = ((rad / dt).round().max(1.0)) as usize;
                let s_step = (step + ds).min(grid.steps());
                let delta = (s_step - step) as f64 * dt;
                if delta == 0.0 {
                    margins.push(0.0);
                    tolerances.push(0.0);
                    continue;
                }
                let (vs, _) = eval.value(s_step, x);
                let ses = eval.local_se(s_step, x);
                let resid = (vs - v0 - r_cand * delta) / delta;
                margins.push(resid);
                let float_floor = 1e-12 * v0.abs().max(1.0);
                tolerances
                    .push((3.0 * (ses + se0) + float_floor) / delta + 3.0 * noise.linear);
            }
        }
    }

    // acceptance: the finest rung within tolerance, and any clearly
    // positive margin must shrink towards fine rungs (the o(.) trend)
    let last = margins.len() - 1;
    let fine_ok = margins[last] <= tolerances[last];
    let trend_ok = {
        let mut ok = true;
        for w in 0..margins.len().saturating_sub(1) {
            let coarse = margins[w];
            let fine = margins[w + 1];
            if coarse > tolerances[w] && fine > tolerances[w + 1] && fine > 0.75 * coarse {
                ok = false;
            }
        }
        ok
    };
    MembershipReport {
        kind,
        margins,
        tolerances,
        accepted: fine_ok && trend_ok,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{lq1, make_bang_bang};

    fn lq1_field(
        steps: usize,
        ctrl_step: f64,
        anchor_step: f64,
        branches: usize,
    ) -> (SpectralProblem, ValueField) {
        let p = lq1()
            .with_steps(steps)
            .unwrap()
            .with_controls(
                crate::problem::ControlSet::uniform_grid(-3.0, 3.0, ctrl_step).unwrap(),
            );
        let anchors = AnchorGrid::uniform(1, -3.0, 3.0, anchor_step).unwrap();
        let field = compute_value(
            &p,
            anchors,
            &DpConfig {
                branches,
                substream: 0xD0,
            },
        )
        .unwrap();
        (p, field)
    }

    #[test]
    fn terminal_slice_is_exact() {
        let (_p, field) = lq1_field(20, 0.25, 0.25, 64);
        let a = field.anchors.len();
        let mut pt = [0.0];
        for idx in 0..a {
            field.anchors.point(idx, &mut pt);
            assert_eq!(field.value_slice(20)[idx], pt[0] * pt[0]);
        }
    }

    #[test]
    fn lq1_value_at_origin_matches_riccati() {
        let (_p, field) = lq1_field(100, 0.05, 0.025, 128);
        let (v, se) = field.value(0, &[1.0]);
        assert!(
            (v - 1.25).abs() < 0.03 * 1.25,
            "V(0,1) = {v} +- {se}, expected 1.25"
        );
        // time-linear closed form: V(t, x) = x^2 + 0.25 (1 - t)
        let (v_mid, _) = field.value(50, &[0.5]);
        let expect = 0.25 + 0.25 * 0.5;
        assert!((v_mid - expect).abs() < 0.03 * expect, "V(0.5, 0.5) = {v_mid}");
    }

    #[test]
    fn policy_enrichment_is_monotone_on_shared_draws() {
        let (_p1, coarse) = lq1_field(40, 0.2, 0.1, 128);
        let (_p2, fine) = lq1_field(40, 0.1, 0.1, 128);
        // nested control grids and identical branch draws: enrichment can
        // only lower the value, anchor by anchor
        for step in [0, 20, 39] {
            for idx in 0..coarse.anchors.len() {
                let vc = coarse.value_slice(step)[idx];
                let vf = fine.value_slice(step)[idx];
                assert!(
                    vf <= vc + 1e-12,
                    "enrichment raised V at step {step}, anchor {idx}: {vf} > {vc}"
                );
            }
        }
    }

    /// Exhaustive enumeration oracle for the deterministic bang-bang
    /// problem on a coarse grid: minimise `x_T^2` over all control
    /// sequences.
    fn bang_bang_enumeration(x0: f64, t_end: f64, steps: usize) -> f64 {
        let dt = t_end / steps as f64;
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << steps) {
            let mut x = x0;
            for i in 0..steps {
                let u = if mask >> i & 1 == 1 { 1.0 } else { -1.0 };
                x += u * dt;
            }
            best = best.min(x * x);
        }
        best
    }

    #[test]
    fn bang_bang_value_matches_enumeration_oracle() {
        // analytic value (max(0, |x| - T))^2 agrees with the enumeration
        // at probes reachable on the coarse grid
        for &x0 in &[1.5f64, -2.0, 0.4, 2.5] {
            let oracle = bang_bang_enumeration(x0, 1.0, 10);
            let analytic = (x0.abs() - 1.0).max(0.0).powi(2);
            assert!(
                (oracle - analytic).abs() < 1e-12,
                "enumeration {oracle} vs analytic {analytic} at {x0}"
            );
        }
        // dynamic programming at a finer grid hits the analytic values
        let p = make_bang_bang(1.0).unwrap().with_steps(100).unwrap();
        let anchors = AnchorGrid::uniform(1, -3.5, 3.5, 0.01).unwrap();
        let field = compute_value(&p, anchors, &DpConfig::default()).unwrap();
        for &x0 in &[1.1f64, -1.5, 2.0, -2.5, 3.0] {
            let (v, _) = field.value(0, &[x0]);
            let want = (x0.abs() - 1.0).max(0.0).powi(2);
            assert!(
                (v - want).abs() <= 0.01 * want,
                "V(0,{x0}) = {v}, oracle {want}"
            );
        }
        // the spec-level spot value
        let (v, _) = field.value(0, &[1.5]);
        assert!((v - 0.25).abs() < 0.0025);
    }

    #[test]
    fn dpp_gap_within_combined_error() {
        let (p, field) = lq1_field(50, 0.1, 0.1, 256);
        let rep = dpp_consistency(
            &p,
            &field,
            0,
            25,
            &[1.0],
            &DpConfig {
                branches: 256,
                substream: 0xD1,
            },
        )
        .unwrap();
        assert!(
            rep.gap <= 3.0 * rep.combined_stderr.max(0.01),
            "gap {} vs se {}",
            rep.gap,
            rep.combined_stderr
        );
        // empty window
        let rep0 = dpp_consistency(&p, &field, 10, 10, &[0.5], &DpConfig::default()).unwrap();
        assert_eq!(rep0.gap, 0.0);
    }

    #[test]
    fn dpp_recursive_route_agrees() {
        let (p, field) = lq1_field(50, 0.1, 0.1, 256);
        let policy = field.feedback_policy();
        let rep =
            dpp_consistency_recursive(&p, &field, 0, 25, &[1.0], &policy, 4000).unwrap();
        assert!(
            rep.gap <= 3.0 * rep.combined_stderr.max(0.02),
            "recursive gap {} vs se {}",
            rep.gap,
            rep.combined_stderr
        );
    }

    #[test]
    fn hamiltonian_g_spot_values() {
        // scalar: P = 2, b = 3, p = 1, a = 4, f = 5 -> 9 + 4 - 5 = 8
        let coeffs = crate::problem::CoefficientSet::new(
            1,
            1,
            Arc::new(|_t, _x, _u, out: &mut [f64]| out[0] = 4.0),
            Arc::new(|_t, _x, _u, out: &mut [f64]| out[0] = 3.0),
            Arc::new(|_t, _x, _u| 5.0),
            Arc::new(|_x| 0.0),
        );
        let g = hamiltonian_g(&coeffs, 0.0, &[0.0], 0.0, &[1.0], &[2.0]);
        assert_eq!(g, 8.0);

        // LQ1 at x=1, rho=-1, p=-2, P=-2:
        // 0.5(-2)(0.25) + (-2)(-1) - 2 = -0.25
        let p = lq1();
        let g1 = hamiltonian_g(&p.coefficients, 0.0, &[1.0], -1.0, &[-2.0], &[-2.0]);
        assert!((g1 + 0.25).abs() < 1e-14);

        // b = 0 reduces to <p, a> - f
        let coeffs0 = crate::problem::CoefficientSet::new(
            1,
            1,
            Arc::new(|_t, _x, _u, out: &mut [f64]| out[0] = 4.0),
            Arc::new(|_t, _x, _u, out: &mut [f64]| out[0] = 0.0),
            Arc::new(|_t, _x, _u| 5.0),
            Arc::new(|_x| 0.0),
        );
        let g0 = hamiltonian_g(&coeffs0, 0.0, &[0.0], 0.0, &[1.0], &[2.0]);
        assert_eq!(g0, -1.0);
    }

    #[test]
    fn differentials_exact_on_quadratic_field() {
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let anchors = AnchorGrid::uniform(1, -3.0, 3.0, 0.05).unwrap();
        let field = ValueField::tabulate(grid, anchors, |_t, x| x[0] * x[0]);
        let d = numeric_differentials(&field, 5, &[1.0], 0.1);
        // probes land on anchor nodes, so the interpolation is exact there
        assert!((d.v_x[0] - 2.0).abs() < 1e-10, "V_x = {}", d.v_x[0]);
        assert!((d.v_xx[0] - 2.0).abs() < 1e-8, "V_xx = {}", d.v_xx[0]);
        assert!(d.v_t_plus.abs() < 1e-12);

        // odd derivative vanishes at the symmetry point
        let d0 = numeric_differentials(&field, 5, &[0.0], 0.1);
        assert!(d0.v_x[0].abs() < 1e-12);
    }

    #[test]
    fn differentials_on_lq1_field() {
        let (_p, field) = lq1_field(100, 0.05, 0.05, 512);
        let d = numeric_differentials(&field, 50, &[1.0], 0.1);
        assert!((d.v_x[0] - 2.0).abs() < 0.05 + d.v_x_err, "V_x = {}", d.v_x[0]);
        assert!(
            (d.v_xx[0] - 2.0).abs() < 0.15 + d.v_xx_err,
            "V_xx = {}",
            d.v_xx[0]
        );
        assert!(
            (d.v_t_plus + 0.25).abs() < 0.05 + d.v_t_err,
            "V_t+ = {} +- {}",
            d.v_t_plus,
            d.v_t_err
        );
    }

    #[test]
    fn hjb_residual_vanishes_on_lq1() {
        // The dominant systematic part of the residual is the per-step
        // interpolation bias of the induction (O(h^2/dt)); it must shrink
        // under anchor refinement, and at the finer grid the residual is
        // small in absolute terms.
        let (p_coarse, coarse) = lq1_field(100, 0.05, 0.05, 128);
        let (p_fine, fine) = lq1_field(100, 0.05, 0.02, 128);
        for &(step, x) in &[(30usize, 0.8f64), (50, 1.0), (70, -1.2)] {
            let rep_c = hjb_residual(&p_coarse, &coarse, step, &[x], 0.1);
            let rep_f = hjb_residual(&p_fine, &fine, step, &[x], 0.1);
            // absolute gate at the h^2/dt + dt bias scale of the fine grid
            assert!(
                rep_f.residual.abs() <= rep_f.error_bar.max(0.03),
                "fine residual {} +- {} at ({step}, {x})",
                rep_f.residual,
                rep_f.error_bar
            );
            assert!(
                rep_f.residual.abs() < rep_c.residual.abs().max(0.03),
                "refinement did not shrink the residual: {} -> {}",
                rep_c.residual,
                rep_f.residual
            );
            // the minimising control tracks the feedback law u = -x
            assert!(
                (rep_f.minimising_control + x).abs() <= 0.15,
                "argmin {} at x = {x}",
                rep_f.minimising_control
            );
        }
    }

    #[test]
    fn hjb_residual_exact_on_tabulated_closed_form() {
        // with the exact value function tabulated, the residual at interior
        // anchor points reduces to interpolation error
        let p = lq1().with_steps(100).unwrap();
        let anchors = AnchorGrid::uniform(1, -3.0, 3.0, 0.02).unwrap();
        let field = ValueField::tabulate(p.horizon, anchors, |t, x| {
            x[0] * x[0] + 0.25 * (1.0 - t)
        });
        let rep = hjb_residual(&p, &field, 40, &[1.0], 0.1);
        assert!(
            rep.residual.abs() < 0.02,
            "residual {} on the closed form",
            rep.residual
        );
    }

    #[test]
    fn superdifferential_membership_on_lq1() {
        let p = lq1().with_steps(100).unwrap();
        let anchors = AnchorGrid::uniform(1, -3.0, 3.0, 0.02).unwrap();
        let field = ValueField::tabulate(p.horizon, anchors, |t, x| {
            x[0] * x[0] + 0.25 * (1.0 - t)
        });
        let ladder = [0.4, 0.2, 0.1];
        let x = [1.0];
        // (V_x, V_xx) itself: zero margin
        let rep = superdiff_membership(
            &field,
            50,
            &x,
            0.0,
            &[2.0],
            &[2.0],
            &ladder,
            DiffKind::SpaceSuper,
        );
        assert!(rep.accepted, "{rep:?}");
        // upward closure in P
        let rep_up = superdiff_membership(
            &field,
            50,
            &x,
            0.0,
            &[2.0],
            &[3.0],
            &ladder,
            DiffKind::SpaceSuper,
        );
        assert!(rep_up.accepted, "{rep_up:?}");
        // wrong linear term: rejected (margin grows along the ladder)
        let rep_bad = superdiff_membership(
            &field,
            50,
            &x,
            0.0,
            &[2.5],
            &[2.0],
            &ladder,
            DiffKind::SpaceSuper,
        );
        assert!(!rep_bad.accepted, "{rep_bad:?}");
        // subdifferential with too large P: rejected
        let rep_sub = superdiff_membership(
            &field,
            50,
            &x,
            0.0,
            &[2.0],
            &[2.5],
            &ladder,
            DiffKind::SpaceSub,
        );
        assert!(!rep_sub.accepted, "{rep_sub:?}");
        // subdifferential with P = V_xx: accepted
        let rep_sub_ok = superdiff_membership(
            &field,
            50,
            &x,
            0.0,
            &[2.0],
            &[2.0],
            &ladder,
            DiffKind::SpaceSub,
        );
        assert!(rep_sub_ok.accepted, "{rep_sub_ok:?}");
    }

    #[test]
    fn time_membership_is_one_sided() {
        let p = lq1().with_steps(100).unwrap();
        let anchors = AnchorGrid::uniform(1, -3.0, 3.0, 0.05).unwrap();
        let field = ValueField::tabulate(p.horizon, anchors, |t, x| {
            x[0] * x[0] + 0.25 * (1.0 - t)
        });
        let ladder = [0.2, 0.1, 0.05];
        // r = V_t = -0.25: in the right superdifferential with zero margin
        let rep = superdiff_membership(
            &field,
            30,
            &[1.0],
            -0.25,
            &[0.0],
            &[0.0],
            &ladder,
            DiffKind::TimeRightSuper,
        );
        assert!(rep.accepted, "{rep:?}");
        // anything above V_t stays in the (upward closed) set
        let rep_up = superdiff_membership(
            &field,
            30,
            &[1.0],
            -0.1,
            &[0.0],
            &[0.0],
            &ladder,
            DiffKind::TimeRightSuper,
        );
        assert!(rep_up.accepted);
        // r below V_t is rejected
        let rep_lo = superdiff_membership(
            &field,
            30,
            &[1.0],
            -0.35,
            &[0.0],
            &[0.0],
            &ladder,
            DiffKind::TimeRightSuper,
        );
        assert!(!rep_lo.accepted, "{rep_lo:?}");
    }

    #[test]
    fn trajectory_probe_matches_field_on_lq1() {
        let (p, field) = lq1_field(50, 0.05, 0.05, 512);
        let policy = ControlPolicy::feedback_value(&p, |_t, x| -x[0]);
        let probe = TrajectoryValueProbe {
            problem: &p,
            policy: &policy,
            branches: 4000,
            substream: 0xBEEF,
        };
        for &(step, x) in &[(0usize, 1.0f64), (25, 0.5)] {
            let (vf, _) = field.value(step, &[x]);
            let (vp, sep) = probe.value(step, &[x]);
            assert!(
                (vf - vp).abs() < 0.04 * vf.abs().max(0.25) + 3.0 * sep,
                "field {vf} vs probe {vp} +- {sep} at ({step}, {x})"
            );
        }
    }
}
