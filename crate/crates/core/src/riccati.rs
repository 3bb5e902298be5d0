//! Closed-form linear-quadratic oracle.
//!
//! For the scalar problem `dX = (alpha X + beta u) dt + sigma dW` with
//! cost `int (m X^2 + n u^2) + gamma X(T)^2` the value function is
//! `V(t, x) = pi(t) x^2 + c(t)` with
//!
//! ```text
//! pi' = beta^2 pi^2 / n - 2 alpha pi - m,   pi(T) = gamma
//! c'  = -sigma^2 pi,                        c(T)  = 0
//! ```
//!
//! and the optimal feedback `u* = -beta pi x / n`. The associated adjoint
//! processes are `p = -2 pi X`, `q = -2 pi sigma`; the second-order
//! adjoint of the maximum principle is deterministic and solves the
//! linear equation `P' = -2 alpha P + 2 m`, `P(T) = -2 gamma` (note: it
//! majorises `-V_xx = -2 pi` but equals it only where the Riccati
//! quadratic term vanishes). Everything is integrated by RK4 to well
//! below the verification tolerances and exposed on the problem grid.

use crate::error::{Error, Result};
use crate::spectral::TimeGrid;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LqParams {
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
    pub m_cost: f64,
    pub n_cost: f64,
    pub gamma: f64,
}

impl LqParams {
    pub fn lq1() -> Self {
        LqParams {
            alpha: 0.0,
            beta: 1.0,
            sigma: 0.5,
            m_cost: 1.0,
            n_cost: 1.0,
            gamma: 1.0,
        }
    }
}

/// Riccati path, value offset and the derived closed-form evaluators on a
/// time grid.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub params: LqParams,
    pub grid: TimeGrid,
    /// `pi` at the grid nodes
    pub pi: Vec<f64>,
    /// `c` at the grid nodes
    pub offset: Vec<f64>,
    /// deterministic second-order adjoint at the grid nodes
    pub p_second: Vec<f64>,
}

const SUBSTEPS: usize = 64;

/// Integrate the Riccati system backward from `T` with RK4 (`SUBSTEPS`
/// stages per grid step). Finite-time escape is reported with the escape
/// time.
pub fn solve_riccati(params: LqParams, grid: &TimeGrid) -> Result<RiccatiSolution> {
    if params.n_cost <= 0.0 {
        return Err(Error::invalid(
            "Riccati oracle needs n_cost > 0 (degenerate Hamiltonian argmin otherwise)",
        ));
    }
    let l = grid.steps();
    let mut pi = vec![0.0; l + 1];
    let mut offset = vec![0.0; l + 1];
    let mut p_second = vec![0.0; l + 1];
    pi[l] = params.gamma;
    offset[l] = 0.0;
    p_second[l] = -2.0 * params.gamma;

    let pi_rhs = |pi: f64| {
        params.beta * params.beta * pi * pi / params.n_cost - 2.0 * params.alpha * pi
            - params.m_cost
    };
    let c_rhs = |pi: f64| -params.sigma * params.sigma * pi;
    let p2_rhs = |p: f64| -2.0 * params.alpha * p + 2.0 * params.m_cost;

    let mut pi_cur = params.gamma;
    let mut c_cur = 0.0;
    let mut p2_cur = -2.0 * params.gamma;
    let h = grid.dt() / SUBSTEPS as f64;
    for step in (0..l).rev() {
        for sub in 0..SUBSTEPS {
            // backward integration: t decreases, so flip the sign of h
            let k1 = pi_rhs(pi_cur);
            let k2 = pi_rhs(pi_cur - 0.5 * h * k1);
            let k3 = pi_rhs(pi_cur - 0.5 * h * k2);
            let k4 = pi_rhs(pi_cur - h * k3);
            let pi_next = pi_cur - h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);

            let c1 = c_rhs(pi_cur);
            let c2 = c_rhs(0.5 * (pi_cur + pi_next));
            let c4 = c_rhs(pi_next);
            c_cur -= h / 6.0 * (c1 + 4.0 * c2 + c4);

            let q1 = p2_rhs(p2_cur);
            let q2 = p2_rhs(p2_cur - 0.5 * h * q1);
            let q3 = p2_rhs(p2_cur - 0.5 * h * q2);
            let q4 = p2_rhs(p2_cur - h * q3);
            p2_cur -= h / 6.0 * (q1 + 2.0 * q2 + 2.0 * q3 + q4);

            pi_cur = pi_next;
            if !pi_cur.is_finite() || pi_cur.abs() > 1e12 {
                let t_escape = grid.node(step + 1) - (sub + 1) as f64 * h;
                return Err(Error::RiccatiBlowUp {
                    escape_time: t_escape,
                });
            }
        }
        pi[step] = pi_cur;
        offset[step] = c_cur;
        p_second[step] = p2_cur;
    }

    Ok(RiccatiSolution {
        params,
        grid: *grid,
        pi,
        offset,
        p_second,
    })
}

impl RiccatiSolution {
    pub fn pi_at(&self, step: usize) -> f64 {
        self.pi[step]
    }

    pub fn value(&self, step: usize, x: f64) -> f64 {
        self.pi[step] * x * x + self.offset[step]
    }

    pub fn v_x(&self, step: usize, x: f64) -> f64 {
        2.0 * self.pi[step] * x
    }

    pub fn v_xx(&self, step: usize) -> f64 {
        2.0 * self.pi[step]
    }

    pub fn v_t(&self, step: usize, x: f64) -> f64 {
        let pi = self.pi[step];
        let pi_dot = self.params.beta * self.params.beta * pi * pi / self.params.n_cost
            - 2.0 * self.params.alpha * pi
            - self.params.m_cost;
        pi_dot * x * x - self.params.sigma * self.params.sigma * pi
    }

    /// first-order adjoint `p(t) = -V_x(t, X(t))`
    pub fn p(&self, step: usize, x: f64) -> f64 {
        -2.0 * self.pi[step] * x
    }

    /// martingale density `q(t) = -V_xx b = -2 pi sigma`
    pub fn q(&self, step: usize) -> f64 {
        -2.0 * self.pi[step] * self.params.sigma
    }

    /// the deterministic second-order adjoint of the maximum principle
    pub fn p_second_at(&self, step: usize) -> f64 {
        self.p_second[step]
    }

    /// optimal feedback gain: `u*(t, x) = -gain(t) x`
    pub fn feedback_gain(&self, step: usize) -> f64 {
        self.params.beta * self.pi[step] / self.params.n_cost
    }

    /// worst ODE residual of the stored `pi` path (central differences on
    /// the grid); a self-consistency certificate for the oracle
    pub fn ode_residual(&self) -> f64 {
        let dt = self.grid.dt();
        let mut worst = 0.0f64;
        for i in 1..self.grid.steps() {
            let dpi = (self.pi[i + 1] - self.pi[i - 1]) / (2.0 * dt);
            let rhs = self.params.beta * self.params.beta * self.pi[i] * self.pi[i]
                / self.params.n_cost
                - 2.0 * self.params.alpha * self.pi[i]
                - self.params.m_cost;
            // central difference itself is O(dt^2); normalise by that scale
            worst = worst.max((dpi - rhs).abs() / (1.0 + rhs.abs()));
        }
        worst
    }
}
