//! Python bindings: the main problem/simulation/solver types and the
//! verification checks, exposed with plain Python containers (lists,
//! tuples, dicts) so the module has no numpy dependency.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use seelab_core::adjoint2::{solve_second_adjoint, transposition_residual, AdjointSecond};
use seelab_core::backward::{
    cost_functional, solve_bsde, solve_first_adjoint, AdjointFirst, RegressionBasis,
};
use seelab_core::forward::{simulate_state, ControlPolicy, PathBundle, RandomTestData};
use seelab_core::problem::{self, validate_assumptions, ControlSet, SpectralProblem};
use seelab_core::riccati::{solve_riccati, LqParams};
use seelab_core::value::{compute_value, AnchorGrid, DpConfig, ValueEval, ValueField};
use seelab_core::verify::{check_pmp, CheckStatus, OptimalSeptuple, SampleBudget};
use std::collections::HashMap;

fn py_err(e: seelab_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A control problem on a finite spectral truncation.
#[pyclass(frozen)]
struct Problem {
    inner: SpectralProblem,
}

#[pymethods]
impl Problem {
    /// The canonical scalar linear-quadratic benchmark.
    #[staticmethod]
    fn lq1() -> Problem {
        Problem {
            inner: problem::lq1(),
        }
    }

    /// Scalar linear-quadratic family.
    #[staticmethod]
    #[pyo3(signature = (alpha, beta, sigma, m_cost, n_cost, gamma, t_end))]
    fn lq(
        alpha: f64,
        beta: f64,
        sigma: f64,
        m_cost: f64,
        n_cost: f64,
        gamma: f64,
        t_end: f64,
    ) -> PyResult<Problem> {
        Ok(Problem {
            inner: problem::make_lq(alpha, beta, sigma, m_cost, n_cost, gamma, t_end)
                .map_err(py_err)?,
        })
    }

    /// Spectral stochastic heat equation with the default bounded profiles.
    #[staticmethod]
    fn heat(modes: usize) -> PyResult<Problem> {
        Ok(Problem {
            inner: problem::make_heat(modes, problem::ProfileSet::default()).map_err(py_err)?,
        })
    }

    /// Spectral stochastic wave equation (energy coordinates).
    #[staticmethod]
    fn wave(modes: usize) -> PyResult<Problem> {
        Ok(Problem {
            inner: problem::make_wave(modes, problem::ProfileSet::default()).map_err(py_err)?,
        })
    }

    /// Deterministic bang-bang benchmark.
    #[staticmethod]
    fn bang_bang(t_end: f64) -> PyResult<Problem> {
        Ok(Problem {
            inner: problem::make_bang_bang(t_end).map_err(py_err)?,
        })
    }

    fn with_steps(&self, steps: usize) -> PyResult<Problem> {
        Ok(Problem {
            inner: self.inner.clone().with_steps(steps).map_err(py_err)?,
        })
    }

    fn with_seed(&self, seed: u64) -> Problem {
        Problem {
            inner: self.inner.clone().with_seed(seed),
        }
    }

    fn with_control_grid(&self, lo: f64, hi: f64, step: f64) -> PyResult<Problem> {
        Ok(Problem {
            inner: self
                .inner
                .clone()
                .with_controls(ControlSet::uniform_grid(lo, hi, step).map_err(py_err)?),
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn noise_dim(&self) -> usize {
        self.inner.noise_dim()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.horizon.steps()
    }

    /// Apply the exact semigroup `S(t)` to a coordinate vector.
    fn semigroup_apply(&self, t: f64, v: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.operator.semigroup_apply(t, &v).map_err(py_err)
    }

    /// Sample-based validation of the standing assumptions; returns
    /// `(all_passed, {check_name: worst_constant})`.
    fn validate_assumptions(&self, samples: usize) -> PyResult<(bool, HashMap<String, f64>)> {
        let rep = validate_assumptions(&self.inner, samples).map_err(py_err)?;
        let mut out = HashMap::new();
        for c in &rep.checks {
            out.insert(c.name.clone(), c.worst_constant);
        }
        Ok((rep.all_passed(), out))
    }

    /// Simulate an ensemble under the linear feedback `u = -gain * x_0`.
    fn simulate_feedback(
        &self,
        eta: Vec<f64>,
        paths: usize,
        gain: f64,
    ) -> PyResult<Bundle> {
        let policy = ControlPolicy::feedback_value(&self.inner, move |_t, x| -gain * x[0]);
        let bundle = simulate_state(&self.inner, 0, &eta, &policy, paths).map_err(py_err)?;
        Ok(Bundle {
            problem: self.inner.clone(),
            inner: bundle,
        })
    }

    /// Simulate an ensemble under a constant control value.
    fn simulate_constant(&self, eta: Vec<f64>, paths: usize, u: f64) -> PyResult<Bundle> {
        let policy = ControlPolicy::Constant(self.inner.controls.nearest_index(u));
        let bundle = simulate_state(&self.inner, 0, &eta, &policy, paths).map_err(py_err)?;
        Ok(Bundle {
            problem: self.inner.clone(),
            inner: bundle,
        })
    }

    /// Backward induction over a uniform anchor grid (dimension <= 2).
    #[pyo3(signature = (lo, hi, step, branches = 256))]
    fn compute_value(&self, lo: f64, hi: f64, step: f64, branches: usize) -> PyResult<Field> {
        let anchors =
            AnchorGrid::uniform(self.inner.state_dim(), lo, hi, step).map_err(py_err)?;
        let field = compute_value(
            &self.inner,
            anchors,
            &DpConfig {
                branches,
                substream: 0xD0,
            },
        )
        .map_err(py_err)?;
        Ok(Field { inner: field })
    }

    /// Closed-form linear-quadratic oracle (LQ problems only):
    /// `{value, v_x, v_xx, p, q, feedback_gain}` at `(step, x)`.
    #[pyo3(signature = (alpha, beta, sigma, m_cost, n_cost, gamma, step, x))]
    #[allow(clippy::too_many_arguments)]
    fn riccati_oracle(
        &self,
        alpha: f64,
        beta: f64,
        sigma: f64,
        m_cost: f64,
        n_cost: f64,
        gamma: f64,
        step: usize,
        x: f64,
    ) -> PyResult<HashMap<String, f64>> {
        let params = LqParams {
            alpha,
            beta,
            sigma,
            m_cost,
            n_cost,
            gamma,
        };
        let sol = solve_riccati(params, &self.inner.horizon).map_err(py_err)?;
        let mut out = HashMap::new();
        out.insert("value".into(), sol.value(step, x));
        out.insert("v_x".into(), sol.v_x(step, x));
        out.insert("v_xx".into(), sol.v_xx(step));
        out.insert("v_t".into(), sol.v_t(step, x));
        out.insert("p".into(), sol.p(step, x));
        out.insert("q".into(), sol.q(step));
        out.insert("p_second".into(), sol.p_second_at(step));
        out.insert("feedback_gain".into(), sol.feedback_gain(step));
        Ok(out)
    }
}

/// A simulated ensemble of controlled trajectories.
#[pyclass(frozen)]
struct Bundle {
    problem: SpectralProblem,
    inner: PathBundle,
}

#[pymethods]
impl Bundle {
    #[getter]
    fn paths(&self) -> usize {
        self.inner.paths
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn state(&self, path: usize, step: usize) -> PyResult<Vec<f64>> {
        if path >= self.inner.paths || step > self.inner.steps() {
            return Err(PyValueError::new_err("path or step out of range"));
        }
        Ok(self.inner.state(path, step).to_vec())
    }

    fn control(&self, path: usize, step: usize) -> PyResult<f64> {
        if path >= self.inner.paths || step >= self.inner.steps() {
            return Err(PyValueError::new_err("path or step out of range"));
        }
        Ok(self.inner.control_value(path, step))
    }

    /// Monte Carlo cost `(mean, stderr)` of the realised ensemble.
    fn cost(&self) -> (f64, f64) {
        cost_functional(&self.problem, &self.inner)
    }

    /// Solve the recursive backward equation; returns `(y0, y0_stderr)`.
    fn solve_bsde(&self) -> PyResult<(f64, f64)> {
        let sol = solve_bsde(&self.problem, &self.inner, &RegressionBasis::default())
            .map_err(py_err)?;
        Ok(sol.y0)
    }

    /// Solve both adjoint equations along this ensemble.
    fn solve_adjoints(&self) -> PyResult<Adjoints> {
        let basis = RegressionBasis::default();
        let a1 = solve_first_adjoint(&self.problem, &self.inner, &basis).map_err(py_err)?;
        let a2 = solve_second_adjoint(&self.problem, &self.inner, &a1, &basis).map_err(py_err)?;
        Ok(Adjoints {
            problem: self.problem.clone(),
            bundle: self.inner.clone(),
            first: a1,
            second: a2,
        })
    }
}

/// First- and second-order adjoint solutions along a fixed ensemble.
#[pyclass(frozen)]
struct Adjoints {
    problem: SpectralProblem,
    bundle: PathBundle,
    first: AdjointFirst,
    second: AdjointSecond,
}

#[pymethods]
impl Adjoints {
    fn p(&self, path: usize, step: usize) -> Vec<f64> {
        self.first.p_at(&self.problem, &self.bundle, path, step)
    }

    fn q(&self, path: usize, step: usize) -> Vec<f64> {
        self.first.q_at(&self.bundle, path, step)
    }

    /// Second-order adjoint matrix, row-major.
    fn p_matrix(&self, path: usize, step: usize) -> Vec<f64> {
        self.second.p_mat_at(&self.problem, &self.bundle, path, step)
    }

    /// Pointwise maximum-principle check; returns
    /// `{margin, tolerance, passed}`.
    #[pyo3(signature = (times = 20, sample_paths = 64))]
    fn check_pmp(&self, times: usize, sample_paths: usize) -> PyResult<HashMap<String, f64>> {
        let sep = OptimalSeptuple {
            problem: &self.problem,
            bundle: &self.bundle,
            adjoint1: &self.first,
            adjoint2: &self.second,
        };
        let rep = check_pmp(
            &sep,
            &SampleBudget {
                times,
                paths: sample_paths,
            },
        )
        .map_err(py_err)?;
        let mut out = HashMap::new();
        out.insert("margin".into(), rep.margin);
        out.insert("tolerance".into(), rep.tolerance);
        out.insert(
            "passed".into(),
            if rep.status == CheckStatus::Pass {
                1.0
            } else {
                0.0
            },
        );
        Ok(out)
    }

    /// Duality-identity residual with piecewise-constant random test data;
    /// returns `{lhs, rhs, residual, stderr}`.
    fn transposition_residual(&self) -> PyResult<HashMap<String, f64>> {
        let mk = |tag: u32, xi: f64, us: f64, vs: f64| RandomTestData {
            noise: self.problem.noise,
            tag,
            dim: self.problem.state_dim(),
            noise_dim: self.problem.noise_dim(),
            block: (self.bundle.steps() / 25).max(1),
            xi_scale: xi,
            u_scale: us,
            v_scale: vs,
        };
        let d1 = mk(21, 0.5, 0.5, 0.5);
        let d2 = mk(22, 0.4, 0.6, 0.3);
        let rep = transposition_residual(
            &self.problem,
            &self.bundle,
            &self.first,
            &self.second,
            &d1,
            &d2,
        )
        .map_err(py_err)?;
        let mut out = HashMap::new();
        out.insert("lhs".into(), rep.lhs);
        out.insert("rhs".into(), rep.rhs);
        out.insert("residual".into(), rep.residual);
        out.insert("stderr".into(), rep.stderr);
        Ok(out)
    }
}

/// Value field over a `(time, anchor)` grid.
#[pyclass(frozen)]
struct Field {
    inner: ValueField,
}

#[pymethods]
impl Field {
    /// `(value, stderr)` at grid node `step` and state `x`.
    fn value(&self, step: usize, x: Vec<f64>) -> PyResult<(f64, f64)> {
        if step > self.inner.grid.steps() {
            return Err(PyValueError::new_err("step out of range"));
        }
        Ok(self.inner.value(step, &x))
    }

    /// Minimising control value at the anchor nearest to `x`.
    fn policy(&self, step: usize, x: Vec<f64>) -> PyResult<usize> {
        if step >= self.inner.grid.steps() {
            return Err(PyValueError::new_err("step out of range"));
        }
        let pol = self.inner.feedback_policy();
        Ok(pol.index(0, step, self.inner.grid.node(step), &x))
    }

    #[getter]
    fn extrapolation_fraction(&self) -> f64 {
        self.inner.extrapolation_fraction
    }
}

#[pymodule]
fn seelab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Problem>()?;
    m.add_class::<Bundle>()?;
    m.add_class::<Adjoints>()?;
    m.add_class::<Field>()?;
    Ok(())
}
