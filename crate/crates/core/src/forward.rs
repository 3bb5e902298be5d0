//! Forward Monte Carlo: exponential-Euler mild simulation of the
//! controlled state, of linearised test processes, and of the variational
//! processes with their Taylor-expansion remainders.
//!
//! One step of the scheme is
//!
//! ```text
//! X_{i+1} = S(dt) [ X_i + a(t_i, X_i, u_i) dt + b(t_i, X_i, u_i) dW_i ]
//! ```
//!
//! with the semigroup applied exactly, so the unbounded part of the drift
//! carries no stiffness into the time step. Increments are regenerated
//! from the counter-based noise streams instead of being stored; a
//! [`PathBundle`] therefore holds only states and control indices and a
//! window of a bundle shares noise with its parent through a global step
//! offset.

use crate::error::{Error, Result};
use crate::problem::SpectralProblem;
use crate::spectral::{StreamKind, TimeGrid};
use crate::stats;
use std::sync::Arc;

/// Adapted control policy: either state feedback or a per-path open-loop
/// sequence. Policies return an index into the problem's control set.
#[derive(Clone)]
pub enum ControlPolicy {
    Constant(usize),
    /// `(t, x) -> control index`
    Feedback(Arc<dyn Fn(f64, &[f64]) -> usize + Send + Sync>),
    /// `(path, step) -> control index`; the sequence may depend on the
    /// path's own past only (it is fixed before the increments are seen).
    OpenLoop(Arc<dyn Fn(u64, usize) -> usize + Send + Sync>),
}

impl std::fmt::Debug for ControlPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControlPolicy::Constant(i) => write!(f, "Constant({i})"),
            ControlPolicy::Feedback(_) => write!(f, "Feedback(..)"),
            ControlPolicy::OpenLoop(_) => write!(f, "OpenLoop(..)"),
        }
    }
}

impl ControlPolicy {
    pub fn index(&self, path: u64, step: usize, t: f64, x: &[f64]) -> usize {
        match self {
            ControlPolicy::Constant(i) => *i,
            ControlPolicy::Feedback(f) => f(t, x),
            ControlPolicy::OpenLoop(f) => f(path, step),
        }
    }

    /// Feedback policy from a real-valued law, snapped to the nearest
    /// control grid point (lowest index on ties).
    pub fn feedback_value(
        problem: &SpectralProblem,
        law: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> ControlPolicy {
        let controls = problem.controls.clone();
        ControlPolicy::Feedback(Arc::new(move |t, x| controls.nearest_index(law(t, x))))
    }
}

/// Initial condition of an ensemble.
#[derive(Debug, Clone)]
pub enum Initial {
    /// Every path starts from the same point.
    Broadcast(Vec<f64>),
    /// Path `p` starts from `rows[p*dim .. (p+1)*dim]`.
    PerPath(Vec<f64>),
}

/// Seeded ensemble of simulated trajectories.
///
/// Layout: `states[(path * (steps+1) + step) * dim + coord]`. Controls are
/// stored as indices into the problem's control set. Brownian increments
/// are not stored; [`PathBundle::increment_into`] regenerates them
/// bit-exactly from the noise model.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub dim: usize,
    pub noise_dim: usize,
    pub paths: usize,
    pub states: Vec<f64>,
    pub controls: Vec<u16>,
    pub control_points: Vec<f64>,
    pub noise: crate::spectral::NoiseModel,
    pub stream: StreamKind,
    /// Global step offset of this bundle's first step inside the noise
    /// stream (windows of a trajectory share noise with their parent).
    pub noise_step_offset: usize,
    /// When simulating on a refined stream, each bundle step consumes this
    /// many consecutive fine increments (summed).
    pub refinement: usize,
}

impl PathBundle {
    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let base = (path * (self.steps() + 1) + step) * self.dim;
        &self.states[base..base + self.dim]
    }

    pub fn control_index(&self, path: usize, step: usize) -> usize {
        self.controls[path * self.steps() + step] as usize
    }

    pub fn control_value(&self, path: usize, step: usize) -> f64 {
        self.control_points[self.control_index(path, step)]
    }

    /// Regenerate the Brownian increment of `(path, step)` into `out`.
    pub fn increment_into(&self, path: usize, step: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.noise_dim);
        let fine_dt = self.grid.dt() / self.refinement as f64;
        if self.refinement == 1 {
            self.noise.increments_for(
                self.stream,
                path as u64,
                self.noise_step_offset + step,
                fine_dt,
                out,
            );
        } else {
            let mut stream = self.noise.path_stream(self.stream, path as u64);
            stream.seek_to_step(self.noise_step_offset + step * self.refinement);
            out.fill(0.0);
            let mut buf = vec![0.0; self.noise_dim];
            for _ in 0..self.refinement {
                stream.fill_increments(fine_dt, &mut buf);
                for (o, b) in out.iter_mut().zip(&buf) {
                    *o += b;
                }
            }
        }
    }

    /// Terminal state of one path.
    pub fn terminal_state(&self, path: usize) -> &[f64] {
        self.state(path, self.steps())
    }
}

struct SimSpec<'a> {
    problem: &'a SpectralProblem,
    grid: TimeGrid,
    initial: &'a Initial,
    policy: &'a ControlPolicy,
    paths: usize,
    stream: StreamKind,
    noise_step_offset: usize,
    refinement: usize,
}

fn simulate_core(spec: SimSpec<'_>) -> Result<PathBundle> {
    let n = spec.problem.state_dim();
    let m = spec.problem.noise_dim();
    let l = spec.grid.steps();
    let dt = spec.grid.dt();
    let fine_dt = dt / spec.refinement as f64;
    let coeffs = &spec.problem.coefficients;
    let op = &spec.problem.operator;
    let mpaths = spec.paths;
    if mpaths == 0 {
        return Err(Error::invalid("need at least one path"));
    }

    let mut states = vec![0.0; mpaths * (l + 1) * n];
    let mut controls = vec![0u16; mpaths * l];

    let mut x = vec![0.0; n];
    let mut drift = vec![0.0; n];
    let mut diff = vec![0.0; n * m];
    let mut dw = vec![0.0; m];
    let mut dw_fine = vec![0.0; m];

    for path in 0..mpaths {
        match spec.initial {
            Initial::Broadcast(v) => x.copy_from_slice(v),
            Initial::PerPath(rows) => x.copy_from_slice(&rows[path * n..(path + 1) * n]),
        }
        states[(path * (l + 1)) * n..(path * (l + 1) + 1) * n].copy_from_slice(&x);

        let mut stream = spec.problem.noise.path_stream(spec.stream, path as u64);
        stream.seek_to_step(spec.noise_step_offset);

        for i in 0..l {
            let t = spec.grid.node(i);
            let u_idx = spec.policy.index(path as u64, i, t, &x);
            controls[path * l + i] = u_idx as u16;
            let u = spec.problem.controls.point(u_idx);

            coeffs.drift(t, &x, u, &mut drift);
            coeffs.diffusion(t, &x, u, &mut diff);
            if spec.refinement == 1 {
                stream.fill_increments(fine_dt, &mut dw);
            } else {
                dw.fill(0.0);
                for _ in 0..spec.refinement {
                    stream.fill_increments(fine_dt, &mut dw_fine);
                    for (o, b) in dw.iter_mut().zip(&dw_fine) {
                        *o += b;
                    }
                }
            }

            for j in 0..n {
                let mut acc = x[j] + drift[j] * dt;
                for k in 0..m {
                    acc += diff[j * m + k] * dw[k];
                }
                x[j] = acc;
            }
            op.semigroup_apply_in_place(dt, &mut x)?;

            for &v in x.iter() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        what: "state".into(),
                        path,
                        step: i,
                    });
                }
            }
            let base = (path * (l + 1) + i + 1) * n;
            states[base..base + n].copy_from_slice(&x);
        }
    }

    Ok(PathBundle {
        grid: spec.grid,
        dim: n,
        noise_dim: m,
        paths: mpaths,
        states,
        controls,
        control_points: spec.problem.controls.points().to_vec(),
        noise: spec.problem.noise,
        stream: spec.stream,
        noise_step_offset: spec.noise_step_offset,
        refinement: spec.refinement,
    })
}

/// Simulate the controlled state from grid node `start_index` (must be a
/// node of the problem's horizon) to the terminal time.
pub fn simulate_state(
    problem: &SpectralProblem,
    start_index: usize,
    eta: &[f64],
    policy: &ControlPolicy,
    paths: usize,
) -> Result<PathBundle> {
    if eta.len() != problem.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: problem.state_dim(),
            got: eta.len(),
            context: "initial state".into(),
        });
    }
    let grid = problem.horizon.window(start_index, problem.horizon.steps())?;
    simulate_core(SimSpec {
        problem,
        grid,
        initial: &Initial::Broadcast(eta.to_vec()),
        policy,
        paths,
        stream: StreamKind::Increments,
        noise_step_offset: start_index,
        refinement: 1,
    })
}

/// Simulate on a grid with `steps` coarse steps whose increments are sums
/// of `refinement` fine increments each (the fine grid has
/// `steps * refinement` steps). Runs with equal `steps * refinement` share
/// one Brownian path per path id, which couples refinement studies.
pub fn simulate_state_refined(
    problem: &SpectralProblem,
    eta: &[f64],
    policy: &ControlPolicy,
    paths: usize,
    steps: usize,
    refinement: usize,
) -> Result<PathBundle> {
    let grid = TimeGrid::new(problem.horizon.t0(), problem.horizon.t_end(), steps)?;
    simulate_core(SimSpec {
        problem,
        grid,
        initial: &Initial::Broadcast(eta.to_vec()),
        policy,
        paths,
        stream: StreamKind::Increments,
        noise_step_offset: 0,
        refinement,
    })
}

/// Branch an ensemble of fresh sub-paths from the frozen point
/// `(t_index, x0)`, realising a conditional expectation given the state.
/// Branch noise lives on its own stream, disjoint from the driving one.
pub fn simulate_branches(
    problem: &SpectralProblem,
    start_index: usize,
    x0: &[f64],
    policy: &ControlPolicy,
    branches: usize,
    substream: u32,
) -> Result<PathBundle> {
    let grid = problem.horizon.window(start_index, problem.horizon.steps())?;
    simulate_core(SimSpec {
        problem,
        grid,
        initial: &Initial::Broadcast(x0.to_vec()),
        policy,
        paths: branches,
        stream: StreamKind::Branch(substream),
        noise_step_offset: start_index,
        refinement: 1,
    })
}

// ---------------------------------------------------------------------------
// Linearised test processes
// ---------------------------------------------------------------------------

/// Data `(xi, u, v)` of one linearised test process: initial value at the
/// window start, drift forcing and diffusion forcing.
pub trait TestData {
    /// Initial value for `path` (length `dim`).
    fn xi(&self, path: usize, out: &mut [f64]);
    /// Drift forcing `u(t_i)` for `(path, step)` (length `dim`).
    fn u(&self, path: usize, step: usize, out: &mut [f64]);
    /// Diffusion forcing `v(t_i)` for `(path, step)` (`dim x noise_dim`).
    fn v(&self, path: usize, step: usize, out: &mut [f64]);
}

/// Zero data (useful to isolate single terms of the duality pairing).
pub struct ZeroData;

impl TestData for ZeroData {
    fn xi(&self, _path: usize, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn u(&self, _path: usize, _step: usize, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn v(&self, _path: usize, _step: usize, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Deterministic-per-path random data from a dedicated stream: piecewise
/// constant in time over `block` steps, bounded amplitudes. Independent of
/// the driving noise, hence adapted to the joint filtration.
pub struct RandomTestData {
    pub noise: crate::spectral::NoiseModel,
    pub tag: u32,
    pub dim: usize,
    pub noise_dim: usize,
    pub block: usize,
    pub xi_scale: f64,
    pub u_scale: f64,
    pub v_scale: f64,
}

impl RandomTestData {
    fn draw(&self, path: usize, slot: u64, k: usize, out: &mut [f64]) {
        let mut s = self
            .noise
            .path_stream(StreamKind::Branch(0x7E57_0000 + self.tag), path as u64);
        s.seek_to_step((slot as usize) * 8 + k);
        for o in out.iter_mut() {
            *o = 2.0 * s.uniform() - 1.0;
        }
    }
}

impl TestData for RandomTestData {
    fn xi(&self, path: usize, out: &mut [f64]) {
        self.draw(path, 0, 0, out);
        for o in out.iter_mut() {
            *o *= self.xi_scale;
        }
    }
    fn u(&self, path: usize, step: usize, out: &mut [f64]) {
        self.draw(path, 1 + (step / self.block) as u64, 1, out);
        for o in out.iter_mut() {
            *o *= self.u_scale;
        }
    }
    fn v(&self, path: usize, step: usize, out: &mut [f64]) {
        self.draw(path, 1 + (step / self.block) as u64, 2, out);
        for o in out.iter_mut() {
            *o *= self.v_scale;
        }
    }
}

/// Streaming simulator of the linearised test equation
///
/// ```text
/// d phi = (A phi + J(s) phi + u(s)) ds + (K(s) phi + v(s)) dW(s)
/// ```
///
/// with `J = a_x`, `K = b_x` frozen along the stored optimal trajectory of
/// `bundle` and the increments shared with it. Holds only the current
/// state slab, so it can run at full ensemble size.
pub struct TestProcessStepper<'a> {
    problem: &'a SpectralProblem,
    bundle: &'a PathBundle,
    data: &'a dyn TestData,
    /// current states, `paths x dim`
    pub phi: Vec<f64>,
    pub step: usize,
    jac_a: Vec<f64>,
    jac_b: Vec<f64>,
    forcing_u: Vec<f64>,
    forcing_v: Vec<f64>,
    dw: Vec<f64>,
    /// set to freeze J = K = 0 (pure forced flow)
    pub zero_linearisation: bool,
}

impl<'a> TestProcessStepper<'a> {
    pub fn new(
        problem: &'a SpectralProblem,
        bundle: &'a PathBundle,
        data: &'a dyn TestData,
    ) -> Result<Self> {
        let n = bundle.dim;
        if n != problem.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: problem.state_dim(),
                got: n,
                context: "test process bundle".into(),
            });
        }
        let mut phi = vec![0.0; bundle.paths * n];
        for p in 0..bundle.paths {
            data.xi(p, &mut phi[p * n..(p + 1) * n]);
        }
        Ok(TestProcessStepper {
            problem,
            bundle,
            data,
            phi,
            step: 0,
            jac_a: vec![0.0; n * n],
            jac_b: vec![0.0; n * problem.noise_dim() * n],
            forcing_u: vec![0.0; n],
            forcing_v: vec![0.0; n * problem.noise_dim()],
            dw: vec![0.0; problem.noise_dim()],
            zero_linearisation: false,
        })
    }

    pub fn paths(&self) -> usize {
        self.bundle.paths
    }

    pub fn phi_of(&self, path: usize) -> &[f64] {
        let n = self.bundle.dim;
        &self.phi[path * n..(path + 1) * n]
    }

    /// Advance all paths by one step of the shared grid.
    pub fn advance(&mut self) -> Result<()> {
        let n = self.bundle.dim;
        let m = self.bundle.noise_dim;
        let i = self.step;
        let dt = self.bundle.grid.dt();
        let t = self.bundle.grid.node(i);
        let mut next = vec![0.0; n];
        for path in 0..self.bundle.paths {
            let xbar = self.bundle.state(path, i);
            let ubar = self.bundle.control_value(path, i);
            if self.zero_linearisation {
                self.jac_a.fill(0.0);
                self.jac_b.fill(0.0);
            } else {
                self.problem
                    .coefficients
                    .drift_jacobian(t, xbar, ubar, &mut self.jac_a);
                self.problem
                    .coefficients
                    .diffusion_jacobian(t, xbar, ubar, &mut self.jac_b);
            }
            self.data.u(path, i, &mut self.forcing_u);
            self.data.v(path, i, &mut self.forcing_v);
            self.bundle.increment_into(path, i, &mut self.dw);

            let phi = &mut self.phi[path * n..(path + 1) * n];
            for j in 0..n {
                let mut acc = phi[j] + self.forcing_u[j] * dt;
                for l in 0..n {
                    acc += self.jac_a[j * n + l] * phi[l] * dt;
                }
                for k in 0..m {
                    let mut diffusion_jk = self.forcing_v[j * m + k];
                    for l in 0..n {
                        diffusion_jk += self.jac_b[(j * m + k) * n + l] * phi[l];
                    }
                    acc += diffusion_jk * self.dw[k];
                }
                next[j] = acc;
            }
            self.problem
                .operator
                .semigroup_apply_in_place(dt, &mut next)?;
            for (j, &v) in next.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("test process coordinate {j}"),
                        path,
                        step: i,
                    });
                }
            }
            phi.copy_from_slice(&next);
        }
        self.step += 1;
        Ok(())
    }
}

/// Materialised test-process simulation (states stored); used by the small
/// structural tests. Shares noise with `bundle`.
pub fn simulate_test_process(
    problem: &SpectralProblem,
    bundle: &PathBundle,
    data: &dyn TestData,
) -> Result<PathBundle> {
    let n = bundle.dim;
    let l = bundle.steps();
    let mut stepper = TestProcessStepper::new(problem, bundle, data)?;
    let mut states = vec![0.0; bundle.paths * (l + 1) * n];
    for p in 0..bundle.paths {
        states[(p * (l + 1)) * n..(p * (l + 1) + 1) * n].copy_from_slice(stepper.phi_of(p));
    }
    for i in 0..l {
        stepper.advance()?;
        for p in 0..bundle.paths {
            let base = (p * (l + 1) + i + 1) * n;
            states[base..base + n].copy_from_slice(stepper.phi_of(p));
        }
    }
    Ok(PathBundle {
        grid: bundle.grid,
        dim: n,
        noise_dim: bundle.noise_dim,
        paths: bundle.paths,
        states,
        controls: bundle.controls.clone(),
        control_points: bundle.control_points.clone(),
        noise: bundle.noise,
        stream: bundle.stream,
        noise_step_offset: bundle.noise_step_offset,
        refinement: bundle.refinement,
    })
}

// ---------------------------------------------------------------------------
// Variational processes and expansion remainders
// ---------------------------------------------------------------------------

/// Where the perturbed trajectory starts.
#[derive(Debug, Clone)]
pub enum VariationStart {
    /// A fixed point `z` (the same for every path).
    Absolute(Vec<f64>),
    /// `z = X(t, omega) + offset` per path, which keeps `|z - X(t)|`
    /// constant across the ensemble (convenient for remainder ladders).
    Offset(Vec<f64>),
}

/// Per-path summaries of one variational simulation: the perturbed path
/// `x^z` runs on the same noise as the base trajectory, `xi = x^z - X`,
/// and the first/second-order expansion remainders are integrated along
/// the way.
#[derive(Debug, Clone)]
pub struct VariationBundle {
    pub start_step: usize,
    /// `|z - X(t)|_H` per path
    pub initial_gap: Vec<f64>,
    /// `sup_s |xi(s)|^2` per path
    pub sup_sq: Vec<f64>,
    /// `int |eps_a|^2 ds` per path (first-order drift remainder)
    pub int_eps_a_sq: Vec<f64>,
    /// `int |eps_b|^2 ds` per path
    pub int_eps_b_sq: Vec<f64>,
    /// `int |teps_a| ds` per path (second-order drift remainder)
    pub int_teps_a: Vec<f64>,
    /// `int |teps_b| ds` per path
    pub int_teps_b: Vec<f64>,
    /// terminal `xi(T)` per path, `paths x dim`
    pub xi_terminal: Vec<f64>,
    /// flagged when a start point leaves the validation box
    pub outside_box: bool,
}

const THETA_NODES: [f64; 4] = [
    0.069_431_844_202_973_71,
    0.330_009_478_207_571_9,
    0.669_990_521_792_428_1,
    0.930_568_155_797_026_3,
];
const THETA_WEIGHTS: [f64; 4] = [
    0.173_927_422_568_726_9,
    0.326_072_577_431_273_1,
    0.326_072_577_431_273_1,
    0.173_927_422_568_726_9,
];

/// Simulate the perturbed state from `(t, z)` on the noise of `bundle` and
/// integrate the expansion remainders.
pub fn simulate_variation(
    problem: &SpectralProblem,
    bundle: &PathBundle,
    start_step: usize,
    start: &VariationStart,
) -> Result<VariationBundle> {
    let n = bundle.dim;
    let m = bundle.noise_dim;
    let l = bundle.steps();
    if start_step >= l {
        return Err(Error::invalid(
            "variation start must leave at least one step",
        ));
    }
    let dt = bundle.grid.dt();
    let coeffs = &problem.coefficients;

    let mut outside_box = false;
    let mut initial_gap = vec![0.0; bundle.paths];
    let mut sup_sq = vec![0.0; bundle.paths];
    let mut int_eps_a_sq = vec![0.0; bundle.paths];
    let mut int_eps_b_sq = vec![0.0; bundle.paths];
    let mut int_teps_a = vec![0.0; bundle.paths];
    let mut int_teps_b = vec![0.0; bundle.paths];
    let mut xi_terminal = vec![0.0; bundle.paths * n];

    let mut x = vec![0.0; n];
    let mut xi = vec![0.0; n];
    let mut drift = vec![0.0; n];
    let mut diff = vec![0.0; n * m];
    let mut dw = vec![0.0; m];
    let mut jac_ref = vec![0.0; n * n];
    let mut jac_th = vec![0.0; n * n];
    let mut jacb_ref = vec![0.0; n * m * n];
    let mut jacb_th = vec![0.0; n * m * n];
    let mut xmid = vec![0.0; n];
    let mut eps_a = vec![0.0; n];
    let mut eps_b = vec![0.0; n * m];
    let mut hv_ref = vec![0.0; n];
    let mut hv_th = vec![0.0; n];
    let mut hvb_ref = vec![0.0; n * m];
    let mut hvb_th = vec![0.0; n * m];

    for path in 0..bundle.paths {
        let xbar0 = bundle.state(path, start_step).to_vec();
        match start {
            VariationStart::Absolute(z) => x.copy_from_slice(z),
            VariationStart::Offset(d) => {
                for j in 0..n {
                    x[j] = xbar0[j] + d[j];
                }
            }
        }
        if x.iter().any(|v| v.abs() > problem.validation_box) {
            outside_box = true;
        }
        initial_gap[path] = stats::dist(&x, &xbar0);

        for i in start_step..l {
            let t = bundle.grid.node(i);
            let xbar = bundle.state(path, i).to_vec();
            let ubar = bundle.control_value(path, i);
            for j in 0..n {
                xi[j] = x[j] - xbar[j];
            }
            let xi_sq = stats::dot(&xi, &xi);
            if xi_sq > sup_sq[path] {
                sup_sq[path] = xi_sq;
            }

            // remainders at t_i
            coeffs.drift_jacobian(t, &xbar, ubar, &mut jac_ref);
            coeffs.diffusion_jacobian(t, &xbar, ubar, &mut jacb_ref);
            eps_a.fill(0.0);
            eps_b.fill(0.0);
            let mut teps_a = 0.0;
            let mut teps_b = 0.0;
            for (&th, &w) in THETA_NODES.iter().zip(&THETA_WEIGHTS) {
                for j in 0..n {
                    xmid[j] = xbar[j] + th * xi[j];
                }
                coeffs.drift_jacobian(t, &xmid, ubar, &mut jac_th);
                coeffs.diffusion_jacobian(t, &xmid, ubar, &mut jacb_th);
                for j in 0..n {
                    let mut acc = 0.0;
                    for lcol in 0..n {
                        acc += (jac_th[j * n + lcol] - jac_ref[j * n + lcol]) * xi[lcol];
                    }
                    eps_a[j] += w * acc;
                }
                for jk in 0..n * m {
                    let mut acc = 0.0;
                    for lcol in 0..n {
                        acc += (jacb_th[jk * n + lcol] - jacb_ref[jk * n + lcol]) * xi[lcol];
                    }
                    eps_b[jk] += w * acc;
                }
                // second-order remainder: (1-theta) (phi_xx(theta) - phi_xx)(xi, xi)
                coeffs.drift_hessian_bilinear(t, &xmid, ubar, &xi, &mut hv_th);
                coeffs.drift_hessian_bilinear(t, &xbar, ubar, &xi, &mut hv_ref);
                coeffs.diffusion_hessian_bilinear(t, &xmid, ubar, &xi, &mut hvb_th);
                coeffs.diffusion_hessian_bilinear(t, &xbar, ubar, &xi, &mut hvb_ref);
                let mut da = 0.0;
                for j in 0..n {
                    let d = hv_th[j] - hv_ref[j];
                    da += d * d;
                }
                let mut db = 0.0;
                for jk in 0..n * m {
                    let d = hvb_th[jk] - hvb_ref[jk];
                    db += d * d;
                }
                teps_a += w * (1.0 - th) * da.sqrt();
                teps_b += w * (1.0 - th) * db.sqrt();
            }
            int_eps_a_sq[path] += stats::dot(&eps_a, &eps_a) * dt;
            int_eps_b_sq[path] += stats::dot(&eps_b, &eps_b) * dt;
            int_teps_a[path] += teps_a * dt;
            int_teps_b[path] += teps_b * dt;

            // advance the perturbed path on the shared increment
            coeffs.drift(t, &x, ubar, &mut drift);
            coeffs.diffusion(t, &x, ubar, &mut diff);
            bundle.increment_into(path, i, &mut dw);
            for j in 0..n {
                let mut acc = x[j] + drift[j] * dt;
                for k in 0..m {
                    acc += diff[j * m + k] * dw[k];
                }
                x[j] = acc;
            }
            problem.operator.semigroup_apply_in_place(dt, &mut x)?;
            for &v in x.iter() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        what: "variation state".into(),
                        path,
                        step: i,
                    });
                }
            }
        }
        let xbar_t = bundle.state(path, l);
        for j in 0..n {
            xi_terminal[path * n + j] = x[j] - xbar_t[j];
        }
        let xi_sq = stats::dist(&x, xbar_t).powi(2);
        if xi_sq > sup_sq[path] {
            sup_sq[path] = xi_sq;
        }
    }

    Ok(VariationBundle {
        start_step,
        initial_gap,
        sup_sq,
        int_eps_a_sq,
        int_eps_b_sq,
        int_teps_a,
        int_teps_b,
        xi_terminal,
        outside_box,
    })
}
