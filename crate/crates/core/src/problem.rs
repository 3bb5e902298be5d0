//! Declarative control-problem definitions.
//!
//! A [`SpectralProblem`] bundles the truncated generator, the coefficient
//! callbacks `a, b, f, h` (plus recursive driver `g` and terminal `Phi`),
//! a finite control set and the time grid. Derivatives can be supplied in
//! closed form; anything missing falls back to central finite differences.
//!
//! Built-in scenarios: the scalar linear-quadratic benchmark ([`make_lq`]),
//! a spectral stochastic heat equation ([`make_heat`]), its hyperbolic
//! counterpart ([`make_wave`]) and a deterministic bang-bang problem
//! ([`make_bang_bang`]). Scenario quadratics satisfy the global
//! Lipschitz/boundedness assumptions only on a bounded box, so validation
//! always runs in bounded-box mode with the box stored on the problem.

use crate::error::{Error, Result};
use crate::spectral::{NoiseModel, SpectralOperator, StreamKind, TimeGrid};
use std::fmt;
use std::sync::Arc;

type VecFn = Arc<dyn Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync>;
type ScalarFn = Arc<dyn Fn(f64, &[f64], f64) -> f64 + Send + Sync>;
type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type DriverFn = Arc<dyn Fn(f64, &[f64], f64, &[f64], f64) -> f64 + Send + Sync>;
type JacFn = Arc<dyn Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync>;
type GradFn = Arc<dyn Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync>;
type TerminalGradFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type HessContractFn = Arc<dyn Fn(f64, &[f64], f64, &[f64], &mut [f64]) + Send + Sync>;
type HessFn = Arc<dyn Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync>;
type TerminalHessFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Coefficients of one control problem on an `N`-dimensional truncation
/// with `m` noise coordinates.
///
/// Layouts: drift writes `N` entries; diffusion writes `N*m` row-major
/// (`b[j*m + k]`); the drift Jacobian writes `N*N` (`a_x[j*N + l] =
/// da_j/dx_l`); the diffusion Jacobian writes `N*m*N`
/// (`b_x[(j*m + k)*N + l] = db_jk/dx_l`).
#[derive(Clone)]
pub struct CoefficientSet {
    pub state_dim: usize,
    pub noise_dim: usize,
    drift: VecFn,
    diffusion: VecFn,
    running_cost: ScalarFn,
    terminal_cost: TerminalFn,
    driver: Option<DriverFn>,
    recursive_terminal: Option<TerminalFn>,
    jac_a: Option<JacFn>,
    jac_b: Option<JacFn>,
    grad_f: Option<GradFn>,
    grad_h: Option<TerminalGradFn>,
    hess_contract_a: Option<HessContractFn>,
    hess_contract_b: Option<HessContractFn>,
    hess_f: Option<HessFn>,
    hess_h: Option<TerminalHessFn>,
    hess_bilinear_a: Option<HessContractFn>,
    hess_bilinear_b: Option<HessContractFn>,
    /// Step for the central-difference fallback.
    pub fd_step: f64,
    /// Set when `b` does not depend on the control; enables the shared
    /// continuation fast path in dynamic programming.
    pub diffusion_control_independent: bool,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("state_dim", &self.state_dim)
            .field("noise_dim", &self.noise_dim)
            .field("fd_step", &self.fd_step)
            .finish_non_exhaustive()
    }
}

impl CoefficientSet {
    pub fn new(
        state_dim: usize,
        noise_dim: usize,
        drift: VecFn,
        diffusion: VecFn,
        running_cost: ScalarFn,
        terminal_cost: TerminalFn,
    ) -> Self {
        CoefficientSet {
            state_dim,
            noise_dim,
            drift,
            diffusion,
            running_cost,
            terminal_cost,
            driver: None,
            recursive_terminal: None,
            jac_a: None,
            jac_b: None,
            grad_f: None,
            grad_h: None,
            hess_contract_a: None,
            hess_contract_b: None,
            hess_f: None,
            hess_h: None,
            hess_bilinear_a: None,
            hess_bilinear_b: None,
            fd_step: 1e-4,
            diffusion_control_independent: false,
        }
    }

    pub fn with_driver(mut self, g: DriverFn, phi: TerminalFn) -> Self {
        self.driver = Some(g);
        self.recursive_terminal = Some(phi);
        self
    }

    pub fn with_drift_jacobian(mut self, j: JacFn) -> Self {
        self.jac_a = Some(j);
        self
    }

    pub fn with_diffusion_jacobian(mut self, j: JacFn) -> Self {
        self.jac_b = Some(j);
        self
    }

    pub fn with_cost_gradients(mut self, f_x: GradFn, h_x: TerminalGradFn) -> Self {
        self.grad_f = Some(f_x);
        self.grad_h = Some(h_x);
        self
    }

    pub fn with_hessians(
        mut self,
        a_contract: HessContractFn,
        b_contract: HessContractFn,
        f_xx: HessFn,
        h_xx: TerminalHessFn,
    ) -> Self {
        self.hess_contract_a = Some(a_contract);
        self.hess_contract_b = Some(b_contract);
        self.hess_f = Some(f_xx);
        self.hess_h = Some(h_xx);
        self
    }

    /// Closed-form bilinear Hessian actions `xi -> [xi^T (d^2 phi_j) xi]_j`
    /// for the drift and diffusion (the input-side contraction, as opposed
    /// to the output-side one of [`Self::with_hessians`]).
    pub fn with_bilinear_hessians(
        mut self,
        a_bilinear: HessContractFn,
        b_bilinear: HessContractFn,
    ) -> Self {
        self.hess_bilinear_a = Some(a_bilinear);
        self.hess_bilinear_b = Some(b_bilinear);
        self
    }

    pub fn with_fd_step(mut self, h: f64) -> Self {
        self.fd_step = h;
        self
    }

    pub fn with_control_independent_diffusion(mut self) -> Self {
        self.diffusion_control_independent = true;
        self
    }

    pub fn has_closed_form_jacobians(&self) -> bool {
        self.jac_a.is_some() && self.jac_b.is_some() && self.grad_f.is_some()
    }

    /// Swap the terminal cost (used by windowed dynamic programming, where
    /// the terminal data is an interpolated slice). Stale derivative
    /// callbacks of the old terminal are dropped.
    pub fn set_terminal_cost(&mut self, h: TerminalFn) {
        self.terminal_cost = h;
        self.grad_h = None;
        self.hess_h = None;
        self.recursive_terminal = None;
    }

    /// Add a constant to the running cost. Derivative callbacks stay valid.
    pub fn with_shifted_running_cost(mut self, shift: f64) -> Self {
        let inner = self.running_cost.clone();
        self.running_cost = Arc::new(move |t, x, u| inner(t, x, u) + shift);
        self
    }

    // -- evaluation -------------------------------------------------------

    pub fn drift(&self, t: f64, x: &[f64], u: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.state_dim);
        (self.drift)(t, x, u, out);
    }

    pub fn diffusion(&self, t: f64, x: &[f64], u: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.state_dim * self.noise_dim);
        (self.diffusion)(t, x, u, out);
    }

    pub fn running_cost(&self, t: f64, x: &[f64], u: f64) -> f64 {
        (self.running_cost)(t, x, u)
    }

    pub fn terminal_cost(&self, x: &[f64]) -> f64 {
        (self.terminal_cost)(x)
    }

    /// Recursive driver `g(t, x, y, z, u)`; defaults to `f(t, x, u)`, which
    /// reduces the recursive cost to the standard one.
    pub fn driver(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: f64) -> f64 {
        match &self.driver {
            Some(g) => g(t, x, y, z, u),
            None => (self.running_cost)(t, x, u),
        }
    }

    /// Recursive terminal `Phi(x)`; defaults to `h(x)`.
    pub fn recursive_terminal(&self, x: &[f64]) -> f64 {
        match &self.recursive_terminal {
            Some(phi) => phi(x),
            None => (self.terminal_cost)(x),
        }
    }

    pub fn has_custom_driver(&self) -> bool {
        self.driver.is_some()
    }

    // -- first derivatives (closed form or central differences) -----------

    pub fn drift_jacobian(&self, t: f64, x: &[f64], u: f64, out: &mut [f64]) {
        let n = self.state_dim;
        debug_assert_eq!(out.len(), n * n);
        if let Some(j) = &self.jac_a {
            j(t, x, u, out);
            return;
        }
        let h = self.fd_step;
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for l in 0..n {
            xp[l] = x[l] + h;
            (self.drift)(t, &xp, u, &mut fp);
            xp[l] = x[l] - h;
            (self.drift)(t, &xp, u, &mut fm);
            xp[l] = x[l];
            for j in 0..n {
                out[j * n + l] = (fp[j] - fm[j]) / (2.0 * h);
            }
        }
    }

    pub fn diffusion_jacobian(&self, t: f64, x: &[f64], u: f64, out: &mut [f64]) {
        let n = self.state_dim;
        let m = self.noise_dim;
        debug_assert_eq!(out.len(), n * m * n);
        if let Some(j) = &self.jac_b {
            j(t, x, u, out);
            return;
        }
        let h = self.fd_step;
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; n * m];
        let mut fm = vec![0.0; n * m];
        for l in 0..n {
            xp[l] = x[l] + h;
            (self.diffusion)(t, &xp, u, &mut fp);
            xp[l] = x[l] - h;
            (self.diffusion)(t, &xp, u, &mut fm);
            xp[l] = x[l];
            for jk in 0..n * m {
                out[jk * n + l] = (fp[jk] - fm[jk]) / (2.0 * h);
            }
        }
    }

    pub fn running_cost_gradient(&self, t: f64, x: &[f64], u: f64, out: &mut [f64]) {
        let n = self.state_dim;
        if let Some(g) = &self.grad_f {
            g(t, x, u, out);
            return;
        }
        let h = self.fd_step;
        let mut xp = x.to_vec();
        for l in 0..n {
            xp[l] = x[l] + h;
            let fp = (self.running_cost)(t, &xp, u);
            xp[l] = x[l] - h;
            let fm = (self.running_cost)(t, &xp, u);
            xp[l] = x[l];
            out[l] = (fp - fm) / (2.0 * h);
        }
    }

    pub fn terminal_cost_gradient(&self, x: &[f64], out: &mut [f64]) {
        let n = self.state_dim;
        if let Some(g) = &self.grad_h {
            g(x, out);
            return;
        }
        let h = self.fd_step;
        let mut xp = x.to_vec();
        for l in 0..n {
            xp[l] = x[l] + h;
            let fp = (self.terminal_cost)(&xp);
            xp[l] = x[l] - h;
            let fm = (self.terminal_cost)(&xp);
            xp[l] = x[l];
            out[l] = (fp - fm) / (2.0 * h);
        }
    }

    // -- second derivatives ------------------------------------------------

    /// `sum_j p_j d^2 a_j / dx dx` as an `N x N` matrix.
    pub fn drift_hessian_contract(&self, t: f64, x: &[f64], u: f64, p: &[f64], out: &mut [f64]) {
        if let Some(hp) = &self.hess_contract_a {
            hp(t, x, u, p, out);
            return;
        }
        let drift = self.drift.clone();
        let n = self.state_dim;
        let mut buf = vec![0.0; n];
        self.fd_hessian_scalar(
            |xq| {
                drift(t, xq, u, &mut buf);
                crate::stats::dot(&buf, p)
            },
            x,
            out,
        );
    }

    /// `sum_jk q_jk d^2 b_jk / dx dx` as an `N x N` matrix (`q` is `N x m`).
    pub fn diffusion_hessian_contract(
        &self,
        t: f64,
        x: &[f64],
        u: f64,
        q: &[f64],
        out: &mut [f64],
    ) {
        if let Some(hq) = &self.hess_contract_b {
            hq(t, x, u, q, out);
            return;
        }
        let diffusion = self.diffusion.clone();
        let n = self.state_dim;
        let m = self.noise_dim;
        let mut buf = vec![0.0; n * m];
        self.fd_hessian_scalar(
            |xq| {
                diffusion(t, xq, u, &mut buf);
                crate::stats::dot(&buf, q)
            },
            x,
            out,
        );
    }

    pub fn running_cost_hessian(&self, t: f64, x: &[f64], u: f64, out: &mut [f64]) {
        if let Some(hf) = &self.hess_f {
            hf(t, x, u, out);
            return;
        }
        let f = self.running_cost.clone();
        self.fd_hessian_scalar(|xq| f(t, xq, u), x, out);
    }

    pub fn terminal_cost_hessian(&self, x: &[f64], out: &mut [f64]) {
        if let Some(hh) = &self.hess_h {
            hh(x, out);
            return;
        }
        let h = self.terminal_cost.clone();
        self.fd_hessian_scalar(|xq| h(xq), x, out);
    }

    /// `[xi^T (d^2 a_j / dx dx) xi]_j` (length `N`). Fallback: directional
    /// second difference along `xi`, exact for affine drifts.
    pub fn drift_hessian_bilinear(&self, t: f64, x: &[f64], u: f64, xi: &[f64], out: &mut [f64]) {
        if let Some(hb) = &self.hess_bilinear_a {
            hb(t, x, u, xi, out);
            return;
        }
        let drift = self.drift.clone();
        self.fd_bilinear(|xq, buf| drift(t, xq, u, buf), x, xi, out);
    }

    /// `[xi^T (d^2 b_jk / dx dx) xi]_jk` (length `N*m`).
    pub fn diffusion_hessian_bilinear(
        &self,
        t: f64,
        x: &[f64],
        u: f64,
        xi: &[f64],
        out: &mut [f64],
    ) {
        if let Some(hb) = &self.hess_bilinear_b {
            hb(t, x, u, xi, out);
            return;
        }
        let diffusion = self.diffusion.clone();
        self.fd_bilinear(|xq, buf| diffusion(t, xq, u, buf), x, xi, out);
    }

    fn fd_bilinear(
        &self,
        mut eval: impl FnMut(&[f64], &mut [f64]),
        x: &[f64],
        xi: &[f64],
        out: &mut [f64],
    ) {
        let norm = crate::stats::norm(xi);
        if norm == 0.0 {
            out.fill(0.0);
            return;
        }
        let n = self.state_dim;
        let h = self.fd_step.sqrt().max(self.fd_step);
        let mut xq = vec![0.0; n];
        let mut fp = vec![0.0; out.len()];
        let mut f0 = vec![0.0; out.len()];
        let mut fm = vec![0.0; out.len()];
        for j in 0..n {
            xq[j] = x[j] + h * xi[j] / norm;
        }
        eval(&xq, &mut fp);
        eval(x, &mut f0);
        for j in 0..n {
            xq[j] = x[j] - h * xi[j] / norm;
        }
        eval(&xq, &mut fm);
        let scale = norm * norm / (h * h);
        for (o, ((p, z), m)) in out.iter_mut().zip(fp.iter().zip(&f0).zip(&fm)) {
            *o = (p - 2.0 * z + m) * scale;
        }
    }

    fn fd_hessian_scalar(&self, mut g: impl FnMut(&[f64]) -> f64, x: &[f64], out: &mut [f64]) {
        let n = self.state_dim;
        let h = self.fd_step.sqrt().max(self.fd_step); // larger step: second differences lose more digits
        let mut xq = x.to_vec();
        let g0 = g(&xq);
        for alpha in 0..n {
            // diagonal: (g(x+h) - 2 g(x) + g(x-h)) / h^2
            xq[alpha] = x[alpha] + h;
            let gp = g(&xq);
            xq[alpha] = x[alpha] - h;
            let gm = g(&xq);
            xq[alpha] = x[alpha];
            out[alpha * n + alpha] = (gp - 2.0 * g0 + gm) / (h * h);
            for beta in 0..alpha {
                xq[alpha] = x[alpha] + h;
                xq[beta] = x[beta] + h;
                let gpp = g(&xq);
                xq[beta] = x[beta] - h;
                let gpm = g(&xq);
                xq[alpha] = x[alpha] - h;
                xq[beta] = x[beta] + h;
                let gmp = g(&xq);
                xq[beta] = x[beta] - h;
                let gmm = g(&xq);
                xq[alpha] = x[alpha];
                xq[beta] = x[beta];
                let v = (gpp - gpm - gmp + gmm) / (4.0 * h * h);
                out[alpha * n + beta] = v;
                out[beta * n + alpha] = v;
            }
        }
    }
}

/// Finite control set with a metric; the argmin convention everywhere is
/// the lowest index among ties.
#[derive(Clone)]
pub struct ControlSet {
    points: Vec<f64>,
    metric: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for ControlSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlSet")
            .field("points", &self.points)
            .finish_non_exhaustive()
    }
}

impl ControlSet {
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("control set needs at least one point"));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("control points must be finite"));
        }
        Ok(ControlSet {
            points,
            metric: Arc::new(|a, b| (a - b).abs()),
        })
    }

    /// Uniform grid `lo, lo+step, ..., <= hi` (always contains `lo`).
    pub fn uniform_grid(lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || hi < lo {
            return Err(Error::invalid("control grid needs lo <= hi and step > 0"));
        }
        let n = ((hi - lo) / step).round() as usize;
        let points = (0..=n).map(|i| lo + i as f64 * step).collect();
        ControlSet::from_points(points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, idx: usize) -> f64 {
        self.points[idx]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn metric(&self, a: f64, b: f64) -> f64 {
        (self.metric)(a, b)
    }

    /// Index of the grid point closest to `u` (lowest index on ties).
    pub fn nearest_index(&self, u: f64) -> usize {
        let mut best = 0;
        let mut best_d = (self.metric)(self.points[0], u);
        for (i, &p) in self.points.iter().enumerate().skip(1) {
            let d = (self.metric)(p, u);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }
}

/// A complete control problem on the truncation.
#[derive(Debug, Clone)]
pub struct SpectralProblem {
    pub name: String,
    pub operator: SpectralOperator,
    pub coefficients: CoefficientSet,
    pub controls: ControlSet,
    pub horizon: TimeGrid,
    pub noise: NoiseModel,
    /// Half-width of the coordinate box on which assumption validation and
    /// value-field grids live.
    pub validation_box: f64,
}

impl SpectralProblem {
    pub fn new(
        name: impl Into<String>,
        operator: SpectralOperator,
        coefficients: CoefficientSet,
        controls: ControlSet,
        horizon: TimeGrid,
        noise: NoiseModel,
    ) -> Result<Self> {
        if operator.dim() != coefficients.state_dim {
            return Err(Error::DimensionMismatch {
                expected: operator.dim(),
                got: coefficients.state_dim,
                context: "operator dim vs coefficient state dim".into(),
            });
        }
        if noise.noise_dim != coefficients.noise_dim {
            return Err(Error::DimensionMismatch {
                expected: noise.noise_dim,
                got: coefficients.noise_dim,
                context: "noise dim vs coefficient noise dim".into(),
            });
        }
        Ok(SpectralProblem {
            name: name.into(),
            operator,
            coefficients,
            controls,
            horizon,
            noise,
            validation_box: 3.0,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.coefficients.state_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.coefficients.noise_dim
    }

    pub fn with_steps(mut self, steps: usize) -> Result<Self> {
        self.horizon = TimeGrid::new(self.horizon.t0(), self.horizon.t_end(), steps)?;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.noise.seed = seed;
        self
    }

    pub fn with_controls(mut self, controls: ControlSet) -> Self {
        self.controls = controls;
        self
    }

    pub fn with_validation_box(mut self, half_width: f64) -> Self {
        self.validation_box = half_width;
        self
    }
}

// ---------------------------------------------------------------------------
// Assumption validation
// ---------------------------------------------------------------------------

/// One validated assumption with the worst sampled constant and a witness.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    pub worst_constant: f64,
    /// `(t, x, x', u)` realising the worst constant.
    pub witness: (f64, Vec<f64>, Vec<f64>, f64),
    pub note: String,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
    pub samples: usize,
    pub box_half_width: f64,
}

impl AssumptionReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// How the sampled Lipschitz/growth constants are judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationMode {
    /// Constants need only be finite on the problem's declared box. This is
    /// the working mode: scenario quadratics satisfy the assumptions there.
    BoundedBox,
    /// Additionally probe a ladder of growing boxes and flag any constant
    /// that keeps growing with the box, i.e. an unbounded derivative.
    GlobalProbe,
}

struct RatioTracker {
    name: &'static str,
    /// worst constant per sampling tier (tier 0 = declared box)
    worst: Vec<f64>,
    witness: (f64, Vec<f64>, Vec<f64>, f64),
}

impl RatioTracker {
    fn new(name: &'static str, dim: usize, tiers: usize) -> Self {
        RatioTracker {
            name,
            worst: vec![0.0; tiers],
            witness: (0.0, vec![0.0; dim], vec![0.0; dim], 0.0),
        }
    }

    fn observe(&mut self, ratio: f64, tier: usize, t: f64, x: &[f64], x2: &[f64], u: f64) {
        if ratio > self.worst[0.min(tier)] && tier == 0 {
            self.witness = (t, x.to_vec(), x2.to_vec(), u);
        }
        if ratio > self.worst[tier] {
            self.worst[tier] = ratio;
        }
    }

    fn into_check(self) -> AssumptionCheck {
        let base = self.worst[0];
        let finite = self.worst.iter().all(|w| w.is_finite());
        // In GlobalProbe mode later tiers sample boxes 8x and 64x wider; a
        // bounded derivative keeps the constant flat across tiers.
        let growing = self
            .worst
            .windows(2)
            .any(|w| w[1] > 2.0 * w[0].max(1e-9));
        let (passed, note) = if !finite {
            (false, "non-finite ratio".to_string())
        } else if self.worst.len() > 1 && growing {
            (
                false,
                format!(
                    "constant grows with the sampling box ({:?}); derivative looks unbounded",
                    self.worst
                ),
            )
        } else if self.worst.len() > 1 {
            (true, "stable across probe boxes".to_string())
        } else {
            (true, "finite on the declared box (bounded-box mode)".to_string())
        };
        AssumptionCheck {
            name: self.name.to_string(),
            passed,
            worst_constant: base,
            witness: self.witness,
            note,
        }
    }
}

/// Sample-based validation of the Lipschitz/growth/second-derivative
/// assumptions on the problem's validation box (bounded-box mode), plus a
/// cross-check of the closed-form derivatives against central differences.
///
/// Errors out (naming the point) as soon as any coefficient returns a
/// non-finite value.
pub fn validate_assumptions(p: &SpectralProblem, samples: usize) -> Result<AssumptionReport> {
    validate_assumptions_with_mode(p, samples, ValidationMode::BoundedBox)
}

/// [`validate_assumptions`] with an explicit [`ValidationMode`].
pub fn validate_assumptions_with_mode(
    p: &SpectralProblem,
    samples: usize,
    mode: ValidationMode,
) -> Result<AssumptionReport> {
    if samples < 100 {
        return Err(Error::invalid("validation needs at least 100 samples"));
    }
    let n = p.state_dim();
    let m = p.noise_dim();
    let coeffs = &p.coefficients;
    let bx = p.validation_box;
    let t0 = p.horizon.t0();
    let t_end = p.horizon.t_end();

    let mut stream = p.noise.path_stream(StreamKind::Sampling, 0);
    let draw_point = |scale: f64, stream: &mut crate::spectral::PathStream| -> Vec<f64> {
        (0..n)
            .map(|_| (2.0 * stream.uniform() - 1.0) * scale)
            .collect()
    };

    let tiers = match mode {
        ValidationMode::BoundedBox => 1,
        ValidationMode::GlobalProbe => 3,
    };
    let mut lip_a = RatioTracker::new("S1: drift Lipschitz", n, tiers);
    let mut lip_b = RatioTracker::new("S1: diffusion Lipschitz", n, tiers);
    let mut grow_ab = RatioTracker::new("S1: drift/diffusion growth at 0", n, 1);
    let mut lip_f = RatioTracker::new("S2: running cost Lipschitz", n, tiers);
    let mut lip_h = RatioTracker::new("S2: terminal cost Lipschitz", n, tiers);
    let mut grow_fh = RatioTracker::new("S2: cost growth at 0", n, 1);
    let mut hess_bound = RatioTracker::new("S3: second derivatives bounded", n, 1);
    let mut lip_g = RatioTracker::new("S4: driver Lipschitz in (x, y, z)", n, tiers);

    let mut a1 = vec![0.0; n];
    let mut a2 = vec![0.0; n];
    let mut b1 = vec![0.0; n * m];
    let mut b2 = vec![0.0; n * m];
    let mut hmat = vec![0.0; n * n];

    let check_finite = |v: f64, what: &str, t: f64, x: &[f64], u: f64| -> Result<()> {
        if !v.is_finite() {
            return Err(Error::NonFiniteCoefficient {
                coefficient: what.to_string(),
                t,
                x: x.to_vec(),
                u,
            });
        }
        Ok(())
    };

    for s in 0..samples {
        let t = t0 + stream.uniform() * (t_end - t0);
        // tier 0 samples the declared box; in probe mode tiers 1 and 2
        // sample boxes 8x and 64x wider
        let tier = s % tiers;
        let scale = bx * 8f64.powi(tier as i32);
        let x = draw_point(scale, &mut stream);
        let x2 = draw_point(scale, &mut stream);
        let u_idx = (stream.uniform() * p.controls.len() as f64) as usize;
        let u = p.controls.point(u_idx.min(p.controls.len() - 1));
        let dx = crate::stats::dist(&x, &x2).max(1e-12);

        coeffs.drift(t, &x, u, &mut a1);
        coeffs.drift(t, &x2, u, &mut a2);
        for &v in a1.iter() {
            check_finite(v, "a", t, &x, u)?;
        }
        lip_a.observe(crate::stats::dist(&a1, &a2) / dx, tier, t, &x, &x2, u);

        coeffs.diffusion(t, &x, u, &mut b1);
        coeffs.diffusion(t, &x2, u, &mut b2);
        for &v in b1.iter() {
            check_finite(v, "b", t, &x, u)?;
        }
        lip_b.observe(crate::stats::dist(&b1, &b2) / dx, tier, t, &x, &x2, u);

        let zero = vec![0.0; n];
        coeffs.drift(t, &zero, u, &mut a2);
        coeffs.diffusion(t, &zero, u, &mut b2);
        let g0 = crate::stats::norm(&a2) + crate::stats::norm(&b2);
        grow_ab.observe(g0, 0, t, &zero, &zero, u);

        let f1 = coeffs.running_cost(t, &x, u);
        let f2 = coeffs.running_cost(t, &x2, u);
        check_finite(f1, "f", t, &x, u)?;
        lip_f.observe((f1 - f2).abs() / dx, tier, t, &x, &x2, u);

        let h1 = coeffs.terminal_cost(&x);
        let h2 = coeffs.terminal_cost(&x2);
        check_finite(h1, "h", t, &x, u)?;
        lip_h.observe((h1 - h2).abs() / dx, tier, t, &x, &x2, u);

        let f0 = coeffs.running_cost(t, &zero, u).abs() + coeffs.terminal_cost(&zero).abs();
        grow_fh.observe(f0, 0, t, &zero, &zero, u);

        // S4: the driver must be Lipschitz in (x, y, z).
        let y1 = 2.0 * stream.uniform() - 1.0;
        let y2 = 2.0 * stream.uniform() - 1.0;
        let z1: Vec<f64> = (0..m).map(|_| 2.0 * stream.uniform() - 1.0).collect();
        let z2: Vec<f64> = (0..m).map(|_| 2.0 * stream.uniform() - 1.0).collect();
        let g1 = coeffs.driver(t, &x, y1, &z1, u);
        let g2 = coeffs.driver(t, &x2, y2, &z2, u);
        check_finite(g1, "g", t, &x, u)?;
        let darg = (dx * dx + (y1 - y2) * (y1 - y2) + crate::stats::dist(&z1, &z2).powi(2))
            .sqrt()
            .max(1e-12);
        lip_g.observe((g1 - g2).abs() / darg, tier, t, &x, &x2, u);

        // S3: spot-check Hessian magnitudes on a thinner subsample of the
        // declared box.
        if s % 8 == 0 && tier == 0 {
            let p_dir: Vec<f64> = (0..n).map(|_| 2.0 * stream.uniform() - 1.0).collect();
            coeffs.drift_hessian_contract(t, &x, u, &p_dir, &mut hmat);
            let mut mag = hmat.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
            coeffs.running_cost_hessian(t, &x, u, &mut hmat);
            mag = mag.max(hmat.iter().map(|v| v.abs()).fold(0.0f64, f64::max));
            coeffs.terminal_cost_hessian(&x, &mut hmat);
            mag = mag.max(hmat.iter().map(|v| v.abs()).fold(0.0f64, f64::max));
            check_finite(mag, "second derivatives", t, &x, u)?;
            hess_bound.observe(mag, 0, t, &x, &x2, u);
        }
    }

    let mut checks = vec![
        lip_a.into_check(),
        lip_b.into_check(),
        grow_ab.into_check(),
        lip_f.into_check(),
        lip_h.into_check(),
        grow_fh.into_check(),
        hess_bound.into_check(),
        lip_g.into_check(),
    ];
    checks.push(derivative_cross_check(p)?);

    Ok(AssumptionReport {
        checks,
        samples,
        box_half_width: bx,
    })
}

/// Compare the supplied (closed-form) first derivatives against central
/// finite differences at a handful of points.
fn derivative_cross_check(p: &SpectralProblem) -> Result<AssumptionCheck> {
    let n = p.state_dim();
    let m = p.noise_dim();
    let coeffs = &p.coefficients;
    if !coeffs.has_closed_form_jacobians() {
        return Ok(AssumptionCheck {
            name: "derivative cross-check".into(),
            passed: true,
            worst_constant: 0.0,
            witness: (0.0, vec![0.0; n], vec![0.0; n], 0.0),
            note: "no closed-form derivatives supplied; finite differences are authoritative"
                .into(),
        });
    }
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut witness = (0.0, vec![0.0; n], vec![0.0; n], 0.0);
    let mut stream = p.noise.path_stream(StreamKind::Sampling, 1);
    let mut jac = vec![0.0; n * n];
    let mut jac_b = vec![0.0; n * m * n];
    let mut grad = vec![0.0; n];
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    let mut bp = vec![0.0; n * m];
    let mut bm = vec![0.0; n * m];
    for _ in 0..16 {
        let t = p.horizon.t0() + stream.uniform() * (p.horizon.t_end() - p.horizon.t0());
        let x: Vec<f64> = (0..n)
            .map(|_| (2.0 * stream.uniform() - 1.0) * 0.8 * p.validation_box)
            .collect();
        let u = p.controls.point(0);
        coeffs.drift_jacobian(t, &x, u, &mut jac);
        coeffs.diffusion_jacobian(t, &x, u, &mut jac_b);
        coeffs.running_cost_gradient(t, &x, u, &mut grad);
        let mut xq = x.clone();
        for l in 0..n {
            xq[l] = x[l] + h;
            coeffs.drift(t, &xq, u, &mut fp);
            coeffs.diffusion(t, &xq, u, &mut bp);
            let f_p = coeffs.running_cost(t, &xq, u);
            xq[l] = x[l] - h;
            coeffs.drift(t, &xq, u, &mut fm);
            coeffs.diffusion(t, &xq, u, &mut bm);
            let f_m = coeffs.running_cost(t, &xq, u);
            xq[l] = x[l];
            for j in 0..n {
                let fd = (fp[j] - fm[j]) / (2.0 * h);
                let d = (jac[j * n + l] - fd).abs();
                if d > worst {
                    worst = d;
                    witness = (t, x.clone(), x.clone(), u);
                }
            }
            for jk in 0..n * m {
                let fd = (bp[jk] - bm[jk]) / (2.0 * h);
                let d = (jac_b[jk * n + l] - fd).abs();
                if d > worst {
                    worst = d;
                    witness = (t, x.clone(), x.clone(), u);
                }
            }
            let fd = (f_p - f_m) / (2.0 * h);
            let d = (grad[l] - fd).abs();
            if d > worst {
                worst = d;
                witness = (t, x.clone(), x.clone(), u);
            }
        }
    }
    Ok(AssumptionCheck {
        name: "derivative cross-check".into(),
        passed: worst < 1e-6,
        worst_constant: worst,
        witness,
        note: format!("max |closed form - central difference| at step {h:.0e}"),
    })
}

// ---------------------------------------------------------------------------
// Built-in scenarios
// ---------------------------------------------------------------------------

const DEFAULT_SEED: u64 = 0x5EE1AB;

/// Scalar linear-quadratic benchmark: `dX = (alpha X + beta u) dt +
/// sigma dW`, cost `int (m X^2 + n u^2) + gamma X(T)^2`, `A = 0`.
///
/// All derivatives are closed-form, so the adjoint solvers carry no
/// finite-difference error on this family.
pub fn make_lq(
    alpha: f64,
    beta: f64,
    sigma: f64,
    m_cost: f64,
    n_cost: f64,
    gamma: f64,
    t_end: f64,
) -> Result<SpectralProblem> {
    if n_cost <= 0.0 {
        return Err(Error::invalid(
            "LQ control weight n_cost must be positive (Hamiltonian argmin degenerate otherwise)",
        ));
    }
    let coeffs = CoefficientSet::new(
        1,
        1,
        Arc::new(move |_t, x, u, out| out[0] = alpha * x[0] + beta * u),
        Arc::new(move |_t, _x, _u, out| out[0] = sigma),
        Arc::new(move |_t, x, u| m_cost * x[0] * x[0] + n_cost * u * u),
        Arc::new(move |x| gamma * x[0] * x[0]),
    )
    .with_drift_jacobian(Arc::new(move |_t, _x, _u, out| out[0] = alpha))
    .with_diffusion_jacobian(Arc::new(move |_t, _x, _u, out| out[0] = 0.0))
    .with_cost_gradients(
        Arc::new(move |_t, x, _u, out| out[0] = 2.0 * m_cost * x[0]),
        Arc::new(move |x, out| out[0] = 2.0 * gamma * x[0]),
    )
    .with_hessians(
        Arc::new(|_t, _x, _u, _p, out| out[0] = 0.0),
        Arc::new(|_t, _x, _u, _q, out| out[0] = 0.0),
        Arc::new(move |_t, _x, _u, out| out[0] = 2.0 * m_cost),
        Arc::new(move |_x, out| out[0] = 2.0 * gamma),
    )
    .with_bilinear_hessians(
        Arc::new(|_t, _x, _u, _xi, out| out[0] = 0.0),
        Arc::new(|_t, _x, _u, _xi, out| out[0] = 0.0),
    )
    .with_control_independent_diffusion();

    SpectralProblem::new(
        format!("lq(alpha={alpha},beta={beta},sigma={sigma},m={m_cost},n={n_cost},gamma={gamma})"),
        SpectralOperator::zero(1),
        coeffs,
        ControlSet::uniform_grid(-3.0, 3.0, 0.05)?,
        TimeGrid::new(0.0, t_end, 100)?,
        NoiseModel::new(1, DEFAULT_SEED)?,
    )
}

/// The canonical LQ benchmark (`alpha=0, beta=1, sigma=0.5, m=n=gamma=1,
/// T=1`), whose Riccati solution is `pi == 1`.
pub fn lq1() -> SpectralProblem {
    let mut p = make_lq(0.0, 1.0, 0.5, 1.0, 1.0, 1.0, 1.0).expect("lq1 parameters are valid");
    p.name = "lq1".into();
    p
}

/// Deterministic bang-bang benchmark: `dX = u dt`, `U = {-1, 1}`, `f = 0`,
/// `h = x^2`. Value: `(max(0, |x| - (T - t)))^2`.
pub fn make_bang_bang(t_end: f64) -> Result<SpectralProblem> {
    let coeffs = CoefficientSet::new(
        1,
        1,
        Arc::new(|_t, _x, u, out| out[0] = u),
        Arc::new(|_t, _x, _u, out| out[0] = 0.0),
        Arc::new(|_t, _x, _u| 0.0),
        Arc::new(|x| x[0] * x[0]),
    )
    .with_drift_jacobian(Arc::new(|_t, _x, _u, out| out[0] = 0.0))
    .with_diffusion_jacobian(Arc::new(|_t, _x, _u, out| out[0] = 0.0))
    .with_cost_gradients(
        Arc::new(|_t, _x, _u, out| out[0] = 0.0),
        Arc::new(|x, out| out[0] = 2.0 * x[0]),
    )
    .with_hessians(
        Arc::new(|_t, _x, _u, _p, out| out[0] = 0.0),
        Arc::new(|_t, _x, _u, _q, out| out[0] = 0.0),
        Arc::new(|_t, _x, _u, out| out[0] = 0.0),
        Arc::new(|_x, out| out[0] = 2.0),
    )
    .with_bilinear_hessians(
        Arc::new(|_t, _x, _u, _xi, out| out[0] = 0.0),
        Arc::new(|_t, _x, _u, _xi, out| out[0] = 0.0),
    )
    .with_control_independent_diffusion();
    let mut p = SpectralProblem::new(
        "bang-bang",
        SpectralOperator::zero(1),
        coeffs,
        ControlSet::from_points(vec![-1.0, 1.0])?,
        TimeGrid::new(0.0, t_end, 100)?,
        NoiseModel::new(1, DEFAULT_SEED)?,
    )?;
    p.validation_box = 3.5;
    Ok(p)
}

/// Bounded-C2 scalar profile for the heat/wave nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Profile {
    Zero,
    /// `amp * tanh(r)`
    Tanh { amp: f64 },
    /// `amp * cos(freq * r)`
    Cos { amp: f64, freq: f64 },
    /// Pseudo-Huber `delta^2 (sqrt(1 + (r/delta)^2) - 1)`: quadratic near 0,
    /// linear growth, second derivative bounded by 1.
    ClippedQuadratic { delta: f64 },
    /// `slope * r` (bounded derivative, zero curvature)
    Linear { slope: f64 },
    /// `r^2` - violates the bounded-derivative assumption; kept so that the
    /// rejection path is exercised.
    Quadratic,
}

impl Profile {
    pub fn val(&self, r: f64) -> f64 {
        match *self {
            Profile::Zero => 0.0,
            Profile::Tanh { amp } => amp * r.tanh(),
            Profile::Cos { amp, freq } => amp * (freq * r).cos(),
            Profile::ClippedQuadratic { delta } => {
                let s = r / delta;
                delta * delta * ((1.0 + s * s).sqrt() - 1.0)
            }
            Profile::Linear { slope } => slope * r,
            Profile::Quadratic => r * r,
        }
    }

    pub fn dr(&self, r: f64) -> f64 {
        match *self {
            Profile::Zero => 0.0,
            Profile::Tanh { amp } => {
                let c = r.cosh();
                amp / (c * c)
            }
            Profile::Cos { amp, freq } => -amp * freq * (freq * r).sin(),
            Profile::ClippedQuadratic { delta } => {
                let s = r / delta;
                delta * s / (1.0 + s * s).sqrt()
            }
            Profile::Linear { slope } => slope,
            Profile::Quadratic => 2.0 * r,
        }
    }

    pub fn drr(&self, r: f64) -> f64 {
        match *self {
            Profile::Zero => 0.0,
            Profile::Tanh { amp } => {
                let t = r.tanh();
                let c = r.cosh();
                -2.0 * amp * t / (c * c)
            }
            Profile::Cos { amp, freq } => -amp * freq * freq * (freq * r).cos(),
            Profile::ClippedQuadratic { delta } => {
                let s = r / delta;
                (1.0 + s * s).powf(-1.5)
            }
            Profile::Linear { .. } => 0.0,
            Profile::Quadratic => 2.0,
        }
    }

    /// Bounded first and second derivatives, probed on a wide sample grid.
    fn satisfies_bounds(&self) -> bool {
        let max_on = |lo: f64, hi: f64| {
            let mut m = 0.0f64;
            let steps = 200;
            for i in 0..=steps {
                let r = lo + (hi - lo) * i as f64 / steps as f64;
                m = m.max(self.dr(r).abs() + self.drr(r).abs());
            }
            m
        };
        let inner = max_on(-5.0, 5.0);
        let outer = max_on(-50.0, 50.0);
        outer.is_finite() && outer <= 3.0 * inner.max(1e-9)
    }
}

/// Profiles of the heat/wave scenarios: `a~ = drift(r) + gain * u`,
/// `b~ = diffusion(r)`, `f~ = cost(r) + 0.5 u^2`, `h~ = terminal(r)`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ProfileSet {
    pub drift: Profile,
    pub diffusion: Profile,
    pub cost: Profile,
    pub terminal: Profile,
    pub control_gain: f64,
}

impl Default for ProfileSet {
    fn default() -> Self {
        ProfileSet {
            drift: Profile::Tanh { amp: 1.0 },
            diffusion: Profile::Cos {
                amp: 0.1,
                freq: 1.0,
            },
            cost: Profile::ClippedQuadratic { delta: 1.0 },
            terminal: Profile::ClippedQuadratic { delta: 1.0 },
            control_gain: 1.0,
        }
    }
}

impl ProfileSet {
    pub fn zero() -> Self {
        ProfileSet {
            drift: Profile::Zero,
            diffusion: Profile::Zero,
            cost: Profile::Zero,
            terminal: Profile::ClippedQuadratic { delta: 1.0 },
            control_gain: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("drift", self.drift),
            ("diffusion", self.diffusion),
            ("cost", self.cost),
            ("terminal", self.terminal),
        ] {
            if !p.satisfies_bounds() {
                return Err(Error::Scenario(format!(
                    "profile `{name}` = {p:?} violates the bounded-derivative requirement at sampled points"
                )));
            }
        }
        Ok(())
    }
}

/// Gauss-Legendre nodes/weights on `(0, 1)`, via Newton iteration on the
/// Legendre recurrence.
fn gauss_legendre_unit(q: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; q];
    let mut weights = vec![0.0; q];
    for i in 0..q {
        // Chebyshev initial guess on [-1, 1]
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (q as f64 + 0.5)).cos();
        for _ in 0..100 {
            // Legendre P_q(x) and derivative by recurrence
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=q {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = q as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let mut p0 = 1.0;
        let mut p1 = x;
        for k in 2..=q {
            let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
            p0 = p1;
            p1 = p2;
        }
        let dp = q as f64 * (x * p1 - p0) / (x * x - 1.0);
        // map [-1,1] -> [0,1]
        nodes[i] = 0.5 * (x + 1.0);
        weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    // sort ascending for reproducibility
    let mut idx: Vec<usize> = (0..q).collect();
    idx.sort_by(|&a, &b| nodes[a].partial_cmp(&nodes[b]).unwrap());
    (
        idx.iter().map(|&i| nodes[i]).collect(),
        idx.iter().map(|&i| weights[i]).collect(),
    )
}

/// Shared quadrature data for the Dirichlet spectral scenarios.
struct DirichletBasis {
    /// `e_k(xi_q) = sqrt(2) sin(k pi xi_q)`, layout `[k][q]`
    basis: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl DirichletBasis {
    fn new(modes: usize, quad_points: usize) -> Self {
        let (nodes, weights) = gauss_legendre_unit(quad_points);
        let basis = (1..=modes)
            .map(|k| {
                nodes
                    .iter()
                    .map(|&xi| (2.0f64).sqrt() * (k as f64 * std::f64::consts::PI * xi).sin())
                    .collect()
            })
            .collect();
        DirichletBasis { basis, weights }
    }

    fn quad_len(&self) -> usize {
        self.weights.len()
    }

    /// Field values `y(xi_q) = sum_j x_j e_j(xi_q)`.
    fn field(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                for (o, e) in out.iter_mut().zip(&self.basis[j]) {
                    *o += xj * e;
                }
            }
        }
    }
}

/// Stochastic heat equation on `(0, 1)` with Dirichlet spectrum
/// `lambda_k = (k pi)^2`, nonlinearities applied pointwise and projected
/// back by Gauss-Legendre quadrature. Noise is truncated to the same
/// `modes` leading coordinates.
pub fn make_heat(modes: usize, profiles: ProfileSet) -> Result<SpectralProblem> {
    if modes == 0 {
        return Err(Error::invalid("heat scenario needs at least one mode"));
    }
    profiles.validate()?;
    let n = modes;
    let m = modes;
    let quad = Arc::new(DirichletBasis::new(modes, 64));
    let lambdas: Vec<f64> = (1..=modes)
        .map(|k| (k as f64 * std::f64::consts::PI).powi(2))
        .collect();

    let pr = profiles;
    let q1 = quad.clone();
    let drift: VecFn = Arc::new(move |_t, x, u, out| {
        let mut y = vec![0.0; q1.quad_len()];
        q1.field(x, &mut y);
        for k in 0..out.len() {
            let mut acc = 0.0;
            for (qi, &w) in q1.weights.iter().enumerate() {
                acc += w * (pr.drift.val(y[qi]) + pr.control_gain * u) * q1.basis[k][qi];
            }
            out[k] = acc;
        }
    });
    let q2 = quad.clone();
    let diffusion: VecFn = Arc::new(move |_t, x, _u, out| {
        let mut y = vec![0.0; q2.quad_len()];
        q2.field(x, &mut y);
        let bvals: Vec<f64> = y.iter().map(|&r| pr.diffusion.val(r)).collect();
        for j in 0..n {
            for k in 0..m {
                let mut acc = 0.0;
                for (qi, &w) in q2.weights.iter().enumerate() {
                    acc += w * bvals[qi] * q2.basis[j][qi] * q2.basis[k][qi];
                }
                out[j * m + k] = acc;
            }
        }
    });
    let q3 = quad.clone();
    let running: ScalarFn = Arc::new(move |_t, x, u| {
        let mut y = vec![0.0; q3.quad_len()];
        q3.field(x, &mut y);
        let mut acc = 0.0;
        for (qi, &w) in q3.weights.iter().enumerate() {
            acc += w * pr.cost.val(y[qi]);
        }
        acc + 0.5 * u * u
    });
    let q4 = quad.clone();
    let terminal: TerminalFn = Arc::new(move |x| {
        let mut y = vec![0.0; q4.quad_len()];
        q4.field(x, &mut y);
        let mut acc = 0.0;
        for (qi, &w) in q4.weights.iter().enumerate() {
            acc += w * pr.terminal.val(y[qi]);
        }
        acc
    });

    let q5 = quad.clone();
    let jac_a: JacFn = Arc::new(move |_t, x, _u, out| {
        let mut y = vec![0.0; q5.quad_len()];
        q5.field(x, &mut y);
        let dv: Vec<f64> = y.iter().map(|&r| pr.drift.dr(r)).collect();
        for k in 0..n {
            for l in 0..n {
                let mut acc = 0.0;
                for (qi, &w) in q5.weights.iter().enumerate() {
                    acc += w * dv[qi] * q5.basis[k][qi] * q5.basis[l][qi];
                }
                out[k * n + l] = acc;
            }
        }
    });
    let q6 = quad.clone();
    let jac_b: JacFn = Arc::new(move |_t, x, _u, out| {
        let mut y = vec![0.0; q6.quad_len()];
        q6.field(x, &mut y);
        let dv: Vec<f64> = y.iter().map(|&r| pr.diffusion.dr(r)).collect();
        for j in 0..n {
            for k in 0..m {
                for l in 0..n {
                    let mut acc = 0.0;
                    for (qi, &w) in q6.weights.iter().enumerate() {
                        acc += w * dv[qi] * q6.basis[j][qi] * q6.basis[k][qi] * q6.basis[l][qi];
                    }
                    out[(j * m + k) * n + l] = acc;
                }
            }
        }
    });
    let q7 = quad.clone();
    let grad_f: GradFn = Arc::new(move |_t, x, _u, out| {
        let mut y = vec![0.0; q7.quad_len()];
        q7.field(x, &mut y);
        for l in 0..n {
            let mut acc = 0.0;
            for (qi, &w) in q7.weights.iter().enumerate() {
                acc += w * pr.cost.dr(y[qi]) * q7.basis[l][qi];
            }
            out[l] = acc;
        }
    });
    let q8 = quad.clone();
    let grad_h: TerminalGradFn = Arc::new(move |x, out| {
        let mut y = vec![0.0; q8.quad_len()];
        q8.field(x, &mut y);
        for l in 0..n {
            let mut acc = 0.0;
            for (qi, &w) in q8.weights.iter().enumerate() {
                acc += w * pr.terminal.dr(y[qi]) * q8.basis[l][qi];
            }
            out[l] = acc;
        }
    });
    let q9 = quad.clone();
    let hess_a: HessContractFn = Arc::new(move |_t, x, _u, p, out| {
        let mut y = vec![0.0; q9.quad_len()];
        q9.field(x, &mut y);
        // sum_g p_g d2 a_g = int a~''(y) (sum_g p_g e_g) e_al e_be
        let mut pfield = vec![0.0; q9.quad_len()];
        q9.field(p, &mut pfield);
        for al in 0..n {
            for be in 0..n {
                let mut acc = 0.0;
                for (qi, &w) in q9.weights.iter().enumerate() {
                    acc += w * pr.drift.drr(y[qi]) * pfield[qi] * q9.basis[al][qi] * q9.basis[be][qi];
                }
                out[al * n + be] = acc;
            }
        }
    });
    let q10 = quad.clone();
    let hess_b: HessContractFn = Arc::new(move |_t, x, _u, qmat, out| {
        let mut y = vec![0.0; q10.quad_len()];
        q10.field(x, &mut y);
        // contraction field: sum_{j,k} q_jk e_j e_k at each node
        let mut qfield = vec![0.0; q10.quad_len()];
        for j in 0..n {
            for k in 0..m {
                let qjk = qmat[j * m + k];
                if qjk != 0.0 {
                    for (qi, qf) in qfield.iter_mut().enumerate() {
                        *qf += qjk * q10.basis[j][qi] * q10.basis[k][qi];
                    }
                }
            }
        }
        for al in 0..n {
            for be in 0..n {
                let mut acc = 0.0;
                for (qi, &w) in q10.weights.iter().enumerate() {
                    acc += w
                        * pr.diffusion.drr(y[qi])
                        * qfield[qi]
                        * q10.basis[al][qi]
                        * q10.basis[be][qi];
                }
                out[al * n + be] = acc;
            }
        }
    });
    let q11 = quad.clone();
    let hess_f: HessFn = Arc::new(move |_t, x, _u, out| {
        let mut y = vec![0.0; q11.quad_len()];
        q11.field(x, &mut y);
        for al in 0..n {
            for be in 0..n {
                let mut acc = 0.0;
                for (qi, &w) in q11.weights.iter().enumerate() {
                    acc += w * pr.cost.drr(y[qi]) * q11.basis[al][qi] * q11.basis[be][qi];
                }
                out[al * n + be] = acc;
            }
        }
    });
    let q12 = quad.clone();
    let hess_h: TerminalHessFn = Arc::new(move |x, out| {
        let mut y = vec![0.0; q12.quad_len()];
        q12.field(x, &mut y);
        for al in 0..n {
            for be in 0..n {
                let mut acc = 0.0;
                for (qi, &w) in q12.weights.iter().enumerate() {
                    acc += w * pr.terminal.drr(y[qi]) * q12.basis[al][qi] * q12.basis[be][qi];
                }
                out[al * n + be] = acc;
            }
        }
    });

    let coeffs = CoefficientSet::new(n, m, drift, diffusion, running, terminal)
        .with_drift_jacobian(jac_a)
        .with_diffusion_jacobian(jac_b)
        .with_cost_gradients(grad_f, grad_h)
        .with_hessians(hess_a, hess_b, hess_f, hess_h)
        .with_control_independent_diffusion();

    let mut p = SpectralProblem::new(
        format!("heat-{modes}"),
        SpectralOperator::Diagonal {
            eigenvalues: lambdas,
        },
        coeffs,
        ControlSet::uniform_grid(-1.0, 1.0, 0.1)?,
        TimeGrid::new(0.0, 1.0, 100)?,
        NoiseModel::new(m, DEFAULT_SEED)?,
    )?;
    p.validation_box = 2.0;
    Ok(p)
}

/// Stochastic wave equation in energy coordinates `(omega_k y_k, v_k)`,
/// `omega_k = k pi`: the free flow is a rotation per mode, the
/// nonlinearities act on the displacement field and force the velocity
/// components.
pub fn make_wave(modes: usize, profiles: ProfileSet) -> Result<SpectralProblem> {
    if modes == 0 {
        return Err(Error::invalid("wave scenario needs at least one mode"));
    }
    profiles.validate()?;
    let quad = Arc::new(DirichletBasis::new(modes, 64));
    let omegas: Vec<f64> = (1..=modes).map(|k| k as f64 * std::f64::consts::PI).collect();
    let n = 2 * modes;
    let m = modes;
    let pr = profiles;

    // displacement coefficients from energy coordinates
    let oms = omegas.clone();
    let displacement = move |x: &[f64], y_coords: &mut [f64]| {
        for (k, om) in oms.iter().enumerate() {
            y_coords[k] = x[2 * k] / om;
        }
    };

    let q1 = quad.clone();
    let disp1 = displacement.clone();
    let drift: VecFn = Arc::new(move |_t, x, u, out| {
        let mut yc = vec![0.0; out.len() / 2];
        disp1(x, &mut yc);
        let mut y = vec![0.0; q1.quad_len()];
        q1.field(&yc, &mut y);
        for k in 0..out.len() / 2 {
            let mut acc = 0.0;
            for (qi, &w) in q1.weights.iter().enumerate() {
                acc += w * (pr.drift.val(y[qi]) + pr.control_gain * u) * q1.basis[k][qi];
            }
            out[2 * k] = 0.0;
            out[2 * k + 1] = acc;
        }
    });
    let q2 = quad.clone();
    let disp2 = displacement.clone();
    let diffusion: VecFn = Arc::new(move |_t, x, _u, out| {
        let nm = out.len() / m; // = n
        let modes_n = nm / 2;
        let mut yc = vec![0.0; modes_n];
        disp2(x, &mut yc);
        let mut y = vec![0.0; q2.quad_len()];
        q2.field(&yc, &mut y);
        out.fill(0.0);
        for j in 0..modes_n {
            for k in 0..m {
                let mut acc = 0.0;
                for (qi, &w) in q2.weights.iter().enumerate() {
                    acc += w * pr.diffusion.val(y[qi]) * q2.basis[j][qi] * q2.basis[k][qi];
                }
                out[(2 * j + 1) * m + k] = acc;
            }
        }
    });
    let q3 = quad.clone();
    let disp3 = displacement.clone();
    let running: ScalarFn = Arc::new(move |_t, x, u| {
        let mut yc = vec![0.0; x.len() / 2];
        disp3(x, &mut yc);
        let mut y = vec![0.0; q3.quad_len()];
        q3.field(&yc, &mut y);
        let mut acc = 0.0;
        for (qi, &w) in q3.weights.iter().enumerate() {
            acc += w * pr.cost.val(y[qi]);
        }
        acc + 0.5 * u * u
    });
    let q4 = quad.clone();
    let disp4 = displacement.clone();
    let terminal: TerminalFn = Arc::new(move |x| {
        let mut yc = vec![0.0; x.len() / 2];
        disp4(x, &mut yc);
        let mut y = vec![0.0; q4.quad_len()];
        q4.field(&yc, &mut y);
        let mut acc = 0.0;
        for (qi, &w) in q4.weights.iter().enumerate() {
            acc += w * pr.terminal.val(y[qi]);
        }
        acc
    });

    let coeffs = CoefficientSet::new(n, m, drift, diffusion, running, terminal)
        .with_control_independent_diffusion();

    let mut p = SpectralProblem::new(
        format!("wave-{modes}"),
        SpectralOperator::WaveBlocks { omegas },
        coeffs,
        ControlSet::uniform_grid(-1.0, 1.0, 0.1)?,
        TimeGrid::new(0.0, 1.0, 100)?,
        NoiseModel::new(m, DEFAULT_SEED)?,
    )?;
    p.validation_box = 2.0;
    Ok(p)
}

/// Built-in scenario names understood by [`build_scenario`].
pub fn scenario_names() -> Vec<&'static str> {
    vec!["lq1", "lq", "heat", "wave", "bang-bang"]
}

/// Construct a named scenario from a key-value parameter map. Unknown
/// scenarios and parameters are rejected.
pub fn build_scenario(
    name: &str,
    params: &std::collections::BTreeMap<String, f64>,
) -> Result<SpectralProblem> {
    let get = |key: &str, default: f64| params.get(key).copied().unwrap_or(default);
    let known = |allowed: &[&str]| -> Result<()> {
        for k in params.keys() {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Scenario(format!(
                    "unknown parameter `{k}` for scenario `{name}`"
                )));
            }
        }
        Ok(())
    };
    match name {
        "lq1" => {
            known(&[])?;
            Ok(lq1())
        }
        "lq" => {
            known(&["alpha", "beta", "sigma", "m_cost", "n_cost", "gamma", "t_end"])?;
            make_lq(
                get("alpha", 0.0),
                get("beta", 1.0),
                get("sigma", 0.5),
                get("m_cost", 1.0),
                get("n_cost", 1.0),
                get("gamma", 1.0),
                get("t_end", 1.0),
            )
        }
        "heat" => {
            known(&["modes"])?;
            make_heat(get("modes", 4.0) as usize, ProfileSet::default())
        }
        "wave" => {
            known(&["modes"])?;
            make_wave(get("modes", 4.0) as usize, ProfileSet::default())
        }
        "bang-bang" => {
            known(&["t_end"])?;
            make_bang_bang(get("t_end", 1.0))
        }
        other => Err(Error::Scenario(format!("unknown scenario `{other}`"))),
    }
}
