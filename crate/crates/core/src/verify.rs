//! Theorem-level verification checks.
//!
//! Each check samples the quantifiers of one statement relating the
//! maximum principle to dynamic programming (inequalities hold "for a.e.
//! `(t, omega)`", memberships hold along the optimal trajectory), measures
//! the worst margin, and compares it against a tolerance assembled from
//! the propagated Monte Carlo, regression and finite-difference errors -
//! the statements themselves are exact, so only estimator noise is
//! excused. Every report carries its seed; re-running a seed reproduces
//! the margins bit for bit.

use crate::adjoint2::{hamiltonian_h, AdjointSecond};
use crate::backward::AdjointFirst;
use crate::error::Result;
use crate::forward::PathBundle;
use crate::problem::SpectralProblem;
use crate::riccati::RiccatiSolution;
use crate::stats;
use crate::value::{
    hamiltonian_g, numeric_differentials, DiffKind, ValueEval,
};

/// Status of one verification check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CheckStatus {
    Pass,
    Fail,
    /// the estimator noise exceeds the quantity under test
    Inconclusive,
}

/// Outcome of one check: worst measured margin against its tolerance,
/// with a reproduction seed and a human-readable witness for failures.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub status: CheckStatus,
    /// signed margin; negative is a violation for inequality checks
    pub margin: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub runtime_ms: u128,
    pub witness: Option<String>,
    /// named scalar diagnostics (fitted constants, errors per relation)
    pub metrics: std::collections::BTreeMap<String, f64>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.status == CheckStatus::Pass
    }
}

/// The full record of an optimal candidate: trajectory and control in the
/// bundle, `(p, q)` and `(P, Q)` as regression representations. The
/// operator pair of the weak formulation is realised by `Q` and its
/// transpose, so this is the complete seven-component tuple.
pub struct OptimalSeptuple<'a> {
    pub problem: &'a SpectralProblem,
    pub bundle: &'a PathBundle,
    pub adjoint1: &'a AdjointFirst,
    pub adjoint2: &'a AdjointSecond,
}

/// Sampling budget of the pointwise quantifiers.
#[derive(Debug, Clone, Copy)]
pub struct SampleBudget {
    pub times: usize,
    pub paths: usize,
}

impl Default for SampleBudget {
    fn default() -> Self {
        SampleBudget {
            times: 20,
            paths: 64,
        }
    }
}

fn sampled_steps(l: usize, count: usize) -> Vec<usize> {
    // interior nodes, evenly spaced (terminal step excluded: several
    // quantities are defined on [0, T) only)
    let count = count.min(l);
    (0..count)
        .map(|i| 1 + i * (l - 1) / count.max(1))
        .map(|s| s.min(l - 1))
        .collect()
}

fn sampled_paths(m: usize, count: usize) -> Vec<usize> {
    let count = count.min(m);
    (0..count).map(|i| i * m / count).collect()
}

// ---------------------------------------------------------------------------
// Maximum-principle inequality
// ---------------------------------------------------------------------------

/// The pointwise maximum-principle inequality: for sampled `(t, omega)`
/// and every control point `rho`,
///
/// ```text
/// H(t, X, u*, p, q) - H(t, X, rho, p, q)
///   - 1/2 < P [b(u*) - b(rho)], b(u*) - b(rho) >  >=  -tolerance
/// ```
///
/// with the tolerance propagated from the adjoint regression errors.
pub fn check_pmp(sep: &OptimalSeptuple<'_>, budget: &SampleBudget) -> Result<CheckReport> {
    let start = std::time::Instant::now();
    let problem = sep.problem;
    let bundle = sep.bundle;
    let n = bundle.dim;
    let m = bundle.noise_dim;
    let l = bundle.steps();
    let coeffs = &problem.coefficients;

    let mut worst = f64::INFINITY;
    let mut witness = None;
    let mut tolerance = 0.0f64;
    let mut b_bar = vec![0.0; n * m];
    let mut b_rho = vec![0.0; n * m];
    let mut db = vec![0.0; n * m];

    for &step in &sampled_steps(l, budget.times) {
        let t = bundle.grid.node(step);
        let se_p = sep.adjoint1.p_value_se(step);
        let se_q = sep.adjoint1.q_value_se(step);
        let se_pp = sep.adjoint2.p_value_se(step);
        for &path in &sampled_paths(bundle.paths, budget.paths) {
            let x = bundle.state(path, step);
            let ubar = bundle.control_value(path, step);
            let p = sep.adjoint1.p_at(problem, bundle, path, step);
            let q = sep.adjoint1.q_at(bundle, path, step);
            let pmat = sep.adjoint2.p_mat_at(problem, bundle, path, step);
            let h_bar = hamiltonian_h(coeffs, t, x, ubar, &p, &q);
            coeffs.diffusion(t, x, ubar, &mut b_bar);
            // control-quantisation allowance: the feedback is snapped to
            // the grid, so the exact inequality holds up to half a grid
            // cell of Hamiltonian curvature
            let quant_tol = {
                let j_bar = problem.controls.nearest_index(ubar);
                let lo = j_bar.saturating_sub(1);
                let hi = (j_bar + 1).min(problem.controls.len() - 1);
                if hi > lo + 1 {
                    let h_lo = hamiltonian_h(coeffs, t, x, problem.controls.point(lo), &p, &q);
                    let h_hi = hamiltonian_h(coeffs, t, x, problem.controls.point(hi), &p, &q);
                    (h_lo - 2.0 * h_bar + h_hi).abs() / 8.0
                } else {
                    0.0
                }
            };
            for j in 0..problem.controls.len() {
                let rho = problem.controls.point(j);
                let h_rho = hamiltonian_h(coeffs, t, x, rho, &p, &q);
                coeffs.diffusion(t, x, rho, &mut b_rho);
                for (d, (bb, br)) in db.iter_mut().zip(b_bar.iter().zip(&b_rho)) {
                    *d = bb - br;
                }
                let mut quad = 0.0;
                for k in 0..m {
                    for i in 0..n {
                        let mut pd = 0.0;
                        for jj in 0..n {
                            pd += pmat[i * n + jj] * db[jj * m + k];
                        }
                        quad += pd * db[i * m + k];
                    }
                }
                let margin = h_bar - h_rho - 0.5 * quad;
                // propagated noise of the margin at this sample
                let (da_scale, db_norm) = {
                    let mut a1 = vec![0.0; n];
                    let mut a2 = vec![0.0; n];
                    coeffs.drift(t, x, ubar, &mut a1);
                    coeffs.drift(t, x, rho, &mut a2);
                    (stats::dist(&a1, &a2), stats::norm(&db))
                };
                let tol = 3.0
                    * (se_p * da_scale + se_q * db_norm + 0.5 * se_pp * db_norm * db_norm)
                    + quant_tol;
                if margin < worst {
                    worst = margin;
                    tolerance = tol;
                    witness = Some(format!(
                        "t={t:.4}, path={path}, rho={rho:.4}, ubar={ubar:.4}, margin={margin:.3e}"
                    ));
                }
            }
        }
    }

    let status = if worst >= -tolerance {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    let mut metrics = std::collections::BTreeMap::new();
    metrics.insert("min_margin".into(), worst);
    Ok(CheckReport {
        name: "pmp-inequality".into(),
        status,
        margin: worst,
        tolerance,
        seed: problem.noise.seed,
        runtime_ms: start.elapsed().as_millis(),
        witness: if status == CheckStatus::Fail {
            witness
        } else {
            None
        },
        metrics,
    })
}

// ---------------------------------------------------------------------------
// Smooth-case relations
// ---------------------------------------------------------------------------

/// Smooth-case identities along the optimal trajectory:
/// `V_x(t, X) = -p(t)`, `V_xx b = -q(t)`, and optimality of `u*` for the
/// dual generator `G(t, X, ., -V_x, -V_xx)`. Errors are aggregated in L2
/// over the sampled paths per time, and the worst time is reported.
pub fn check_smooth_relations(
    sep: &OptimalSeptuple<'_>,
    eval: &dyn ValueEval,
    budget: &SampleBudget,
    fd_step: f64,
) -> Result<CheckReport> {
    let start = std::time::Instant::now();
    let problem = sep.problem;
    let bundle = sep.bundle;
    let n = bundle.dim;
    let m = bundle.noise_dim;
    let l = bundle.steps();
    let coeffs = &problem.coefficients;

    let mut worst_grad = 0.0f64;
    let mut worst_q = 0.0f64;
    let mut worst_g_gap = 0.0f64;
    let mut fd_err = 0.0f64;
    let mut witness = None;
    let mut bmat = vec![0.0; n * m];

    for &step in &sampled_steps(l, budget.times) {
        let t = bundle.grid.node(step);
        let mut num_grad = 0.0;
        let mut den_grad = 0.0;
        let mut num_q = 0.0;
        let mut den_q = 0.0;
        for &path in &sampled_paths(bundle.paths, budget.paths.min(8)) {
            let x = bundle.state(path, step);
            let d = numeric_differentials(eval, step, x, fd_step);
            fd_err = fd_err.max(d.v_x_err).max(d.v_xx_err);
            let p = sep.adjoint1.p_at(problem, bundle, path, step);
            let q = sep.adjoint1.q_at(bundle, path, step);
            let ubar = bundle.control_value(path, step);
            coeffs.diffusion(t, x, ubar, &mut bmat);

            for c in 0..n {
                let diff = d.v_x[c] + p[c];
                num_grad += diff * diff;
                den_grad += p[c] * p[c];
            }
            // V_xx b (N x m) against -q
            for k in 0..m {
                for i in 0..n {
                    let mut vb = 0.0;
                    for j in 0..n {
                        vb += d.v_xx[i * n + j] * bmat[j * m + k];
                    }
                    let diff = vb + q[i * m + k];
                    num_q += diff * diff;
                    den_q += q[i * m + k] * q[i * m + k];
                }
            }
            // optimality of ubar for G(., -V_x, -V_xx)
            let neg_vx: Vec<f64> = d.v_x.iter().map(|v| -v).collect();
            let neg_vxx: Vec<f64> = d.v_xx.iter().map(|v| -v).collect();
            let g_bar = hamiltonian_g(coeffs, t, x, ubar, &neg_vx, &neg_vxx);
            let mut g_max = f64::NEG_INFINITY;
            for j in 0..problem.controls.len() {
                let g = hamiltonian_g(
                    coeffs,
                    t,
                    x,
                    problem.controls.point(j),
                    &neg_vx,
                    &neg_vxx,
                );
                g_max = g_max.max(g);
            }
            worst_g_gap = worst_g_gap.max(g_max - g_bar);
        }
        let rel_grad = (num_grad / den_grad.max(1e-12)).sqrt();
        let rel_q = (num_q / den_q.max(1e-12)).sqrt();
        if rel_grad > worst_grad {
            worst_grad = rel_grad;
            witness = Some(format!("t={t:.4}: |V_x + p| / |p| = {rel_grad:.4}"));
        }
        worst_q = worst_q.max(rel_q);
    }

    let worst = worst_grad.max(worst_q);
    // the relation tolerance is pinned at 5% relative; the generator gap is
    // judged against the control-quantisation scale
    let grid_step = control_grid_step(problem);
    let g_tol = 3.0 * grid_step * grid_step + 3.0 * fd_err;
    let status = if worst <= 0.05 && worst_g_gap <= g_tol {
        CheckStatus::Pass
    } else if fd_err > 0.05 {
        CheckStatus::Inconclusive
    } else {
        CheckStatus::Fail
    };
    let mut metrics = std::collections::BTreeMap::new();
    metrics.insert("rel_error_v_x_plus_p".into(), worst_grad);
    metrics.insert("rel_error_v_xx_b_plus_q".into(), worst_q);
    metrics.insert("generator_gap".into(), worst_g_gap);
    metrics.insert("fd_error".into(), fd_err);
    Ok(CheckReport {
        name: "smooth-relations".into(),
        status,
        margin: worst,
        tolerance: 0.05,
        seed: problem.noise.seed,
        runtime_ms: start.elapsed().as_millis(),
        witness: if status != CheckStatus::Pass {
            witness
        } else {
            None
        },
        metrics,
    })
}

fn control_grid_step(problem: &SpectralProblem) -> f64 {
    let pts = problem.controls.points();
    let mut step = f64::INFINITY;
    for w in pts.windows(2) {
        step = step.min((w[1] - w[0]).abs());
    }
    if step.is_finite() {
        step
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Superdifferential inclusions
// ---------------------------------------------------------------------------

/// Spatial inclusions of the nonsmooth case: `(-p, -P)` and its upward
/// `P`-shifts belong to the spatial second-order superdifferential along
/// the trajectory; shifted first-order terms are rejected; any candidate
/// accepted by the subdifferential probe must satisfy `ptilde = -p` and
/// `Ptilde <= -P` (up to tolerance).
pub fn check_superdiff_inclusions(
    sep: &OptimalSeptuple<'_>,
    eval: &dyn ValueEval,
    budget: &SampleBudget,
    ladder: &[f64],
) -> Result<CheckReport> {
    let start = std::time::Instant::now();
    let problem = sep.problem;
    let bundle = sep.bundle;
    let n = bundle.dim;
    let l = bundle.steps();

    let mut failures = Vec::new();
    let mut accept_margin = f64::NEG_INFINITY;
    let kappa_shifts = [0.0, 0.5, 1.0];

    for &step in &sampled_steps(l, budget.times.min(10)) {
        let cand_noise = crate::value::CandidateNoise {
            linear: sep.adjoint1.p_value_se(step),
            quad: sep.adjoint2.p_value_se(step),
        };
        for &path in &sampled_paths(bundle.paths, 2) {
            let x = bundle.state(path, step).to_vec();
            let p = sep.adjoint1.p_at(problem, bundle, path, step);
            let pmat = sep.adjoint2.p_mat_at(problem, bundle, path, step);
            let neg_p: Vec<f64> = p.iter().map(|v| -v).collect();

            for &kappa in &kappa_shifts {
                let mut cand = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        cand[i * n + j] = -pmat[i * n + j] + if i == j { kappa } else { 0.0 };
                    }
                }
                let rep = crate::value::superdiff_membership_noisy(
                    eval,
                    step,
                    &x,
                    0.0,
                    &neg_p,
                    &cand,
                    ladder,
                    DiffKind::SpaceSuper,
                    cand_noise,
                );
                let fine = *rep.margins.last().unwrap();
                accept_margin = accept_margin.max(fine - rep.tolerances.last().unwrap());
                if !rep.accepted {
                    failures.push(format!(
                        "(-p, -P + {kappa} I) rejected at step {step}, path {path}: {:?}",
                        rep.margins
                    ));
                }
            }

            // shifted first-order term must be rejected
            let mut p_shift = neg_p.clone();
            p_shift[0] += 0.5;
            let neg_pmat: Vec<f64> = pmat.iter().map(|v| -v).collect();
            let rep_bad = crate::value::superdiff_membership_noisy(
                eval,
                step,
                &x,
                0.0,
                &p_shift,
                &neg_pmat,
                ladder,
                DiffKind::SpaceSuper,
                cand_noise,
            );
            if rep_bad.accepted {
                failures.push(format!(
                    "(-p + 0.5 e1, -P) wrongly accepted at step {step}, path {path}"
                ));
            }

            // subdifferential scan: candidates accepted by the probe must
            // satisfy ptilde = -p and Ptilde <= -P + tol
            for &kappa in &[-1.0f64, 0.0, 2.5] {
                let mut cand = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        cand[i * n + j] = -pmat[i * n + j] + if i == j { kappa } else { 0.0 };
                    }
                }
                let rep_sub = crate::value::superdiff_membership_noisy(
                    eval,
                    step,
                    &x,
                    0.0,
                    &neg_p,
                    &cand,
                    ladder,
                    DiffKind::SpaceSub,
                    cand_noise,
                );
                if rep_sub.accepted && kappa > 3.0 * rep_sub.tolerances.last().unwrap() {
                    failures.push(format!(
                        "subdifferential element with Ptilde = -P + {kappa} I accepted at \
                         step {step}, but {kappa} > 0 contradicts Ptilde <= -P"
                    ));
                }
            }
        }
    }

    let status = if failures.is_empty() {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    let mut metrics = std::collections::BTreeMap::new();
    metrics.insert("worst_acceptance_margin".into(), accept_margin);
    metrics.insert("failures".into(), failures.len() as f64);
    Ok(CheckReport {
        name: "superdifferential-inclusions".into(),
        status,
        margin: -(failures.len() as f64),
        tolerance: 0.0,
        seed: problem.noise.seed,
        runtime_ms: start.elapsed().as_millis(),
        witness: failures.first().cloned(),
        metrics,
    })
}

// ---------------------------------------------------------------------------
// Time inclusion
// ---------------------------------------------------------------------------

/// Right time-superdifferential inclusion: the candidate
///
/// ```text
/// r*(t) = <<A X, p>> + G(t, X, u*, p, P) + <b, q - P b>
/// ```
///
/// belongs to the one-sided time superdifferential of `V` at
/// `(t, X(t))`. Both readings of `<<A X, p>>` (through `A` and through
/// `A^*`) are formed and must agree exactly on the truncation. When a
/// linear-quadratic oracle is supplied, the same candidate built from the
/// closed-form `(p, q, -V_xx)` is additionally compared against the
/// measured right time-derivative (the tight version of the candidate).
pub fn check_time_inclusion(
    sep: &OptimalSeptuple<'_>,
    eval: &dyn ValueEval,
    budget: &SampleBudget,
    ladder: &[f64],
    oracle: Option<&RiccatiSolution>,
) -> Result<CheckReport> {
    let start = std::time::Instant::now();
    let problem = sep.problem;
    let bundle = sep.bundle;
    let n = bundle.dim;
    let m = bundle.noise_dim;
    let l = bundle.steps();
    let coeffs = &problem.coefficients;

    let mut failures = Vec::new();
    let mut worst_pairing_gap = 0.0f64;
    let mut worst_tight_rel = 0.0f64;
    let mut ax = vec![0.0; n];
    let mut astar_p = vec![0.0; n];
    let mut bmat = vec![0.0; n * m];

    for &step in &sampled_steps(l, budget.times.min(10)) {
        let t = bundle.grid.node(step);
        for &path in &sampled_paths(bundle.paths, 2) {
            let x = bundle.state(path, step).to_vec();
            let ubar = bundle.control_value(path, step);
            let p = sep.adjoint1.p_at(problem, bundle, path, step);
            let q = sep.adjoint1.q_at(bundle, path, step);
            let pmat = sep.adjoint2.p_mat_at(problem, bundle, path, step);

            // <<A X, p>> both ways; they agree exactly on the truncation
            problem.operator.apply_generator(&x, &mut ax);
            problem.operator.apply_generator_adjoint(&p, &mut astar_p);
            let via_a = stats::dot(&ax, &p);
            let via_astar = stats::dot(&x, &astar_p);
            worst_pairing_gap = worst_pairing_gap.max((via_a - via_astar).abs());

            // script-H = G(t, X, u, p, P) + <b, q - P b>
            let g = hamiltonian_g(coeffs, t, &x, ubar, &p, &pmat);
            coeffs.diffusion(t, &x, ubar, &mut bmat);
            let mut cross = 0.0;
            for k in 0..m {
                for i in 0..n {
                    let mut pb = 0.0;
                    for j in 0..n {
                        pb += pmat[i * n + j] * bmat[j * m + k];
                    }
                    cross += bmat[i * m + k] * (q[i * m + k] - pb);
                }
            }
            let r_cand = via_a + g + cross;

            // the candidate inherits the regression noise of (p, q, P)
            let b_norm = stats::norm(&bmat);
            let a_scale = {
                let mut a = vec![0.0; n];
                coeffs.drift(t, &x, ubar, &mut a);
                stats::norm(&ax) + stats::norm(&a)
            };
            let cand_noise = crate::value::CandidateNoise {
                linear: sep.adjoint1.p_value_se(step) * a_scale
                    + sep.adjoint1.q_value_se(step) * b_norm
                    + 1.5 * sep.adjoint2.p_value_se(step) * b_norm * b_norm,
                quad: 0.0,
            };
            let rep = crate::value::superdiff_membership_noisy(
                eval,
                step,
                &x,
                r_cand,
                &vec![0.0; n],
                &vec![0.0; n * n],
                ladder,
                DiffKind::TimeRightSuper,
                cand_noise,
            );
            if !rep.accepted {
                failures.push(format!(
                    "time candidate {r_cand:.4} rejected at step {step}, path {path}: \
                     margins {:?}",
                    rep.margins
                ));
            }

            // tight candidate from the closed-form oracle, against the
            // measured right time-derivative
            if let Some(rs) = oracle {
                let xp = x[0];
                let p_o = [rs.p(step, xp)];
                let q_o = [rs.q(step)];
                let pmat_o = [-rs.v_xx(step)];
                let g_o = hamiltonian_g(coeffs, t, &x, ubar, &p_o, &pmat_o);
                let mut cross_o = 0.0;
                for k in 0..m {
                    cross_o += bmat[k] * (q_o[k] - pmat_o[0] * bmat[k]);
                }
                let r_tight = via_a + g_o + cross_o;
                let d = numeric_differentials(eval, step, &x, 0.1);
                let rel = (r_tight - d.v_t_plus).abs() / d.v_t_plus.abs().max(1e-6);
                if rel > worst_tight_rel {
                    worst_tight_rel = rel;
                }
            }
        }
    }

    let tight_ok = oracle.is_none() || worst_tight_rel <= 0.05;
    let status = if failures.is_empty() && tight_ok && worst_pairing_gap < 1e-12 {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    let mut metrics = std::collections::BTreeMap::new();
    metrics.insert("pairing_gap".into(), worst_pairing_gap);
    metrics.insert("rejections".into(), failures.len() as f64);
    if oracle.is_some() {
        metrics.insert("tight_candidate_rel_error".into(), worst_tight_rel);
    }
    Ok(CheckReport {
        name: "time-inclusion".into(),
        status,
        margin: -(failures.len() as f64) - if tight_ok { 0.0 } else { worst_tight_rel },
        tolerance: 0.05,
        seed: problem.noise.seed,
        runtime_ms: start.elapsed().as_millis(),
        witness: failures.first().cloned(),
        metrics,
    })
}

// ---------------------------------------------------------------------------
// Value regularity
// ---------------------------------------------------------------------------

/// Fitted regularity constants of a value field: linear growth, spatial
/// Lipschitz (stable under halving the probe scale), Hoelder-1/2 in time,
/// and the supermartingale drift of `V(r, X(r)) + int f` along the
/// optimal pair.
pub fn check_value_regularity(
    problem: &SpectralProblem,
    field: &crate::value::ValueField,
    bundle: Option<&PathBundle>,
) -> Result<CheckReport> {
    let start = std::time::Instant::now();
    let a_count = field.anchors.len();
    let l = field.grid.steps();
    let mut pt_i = vec![0.0; field.dim];
    let mut pt_j = vec![0.0; field.dim];

    // spatial Lipschitz at two probe scales (adjacent and next-adjacent)
    let mut lip_h = 0.0f64;
    let mut lip_2h = 0.0f64;
    let mut growth = 0.0f64;
    for step in (0..=l).step_by((l / 10).max(1)) {
        let vals = field.value_slice(step);
        let stride = field.anchors.last_axis_len();
        for idx in 0..a_count {
            field.anchors.point(idx, &mut pt_i);
            growth = growth.max(vals[idx].abs() / (1.0 + stats::norm(&pt_i)));
            for &gap in &[1usize, 2] {
                // stay on one row of the last axis
                if idx + gap < a_count && (idx % stride) + gap < stride {
                    field.anchors.point(idx + gap, &mut pt_j);
                    let d = stats::dist(&pt_i, &pt_j);
                    if d > 0.0 {
                        let ratio = (vals[idx + gap] - vals[idx]).abs() / d;
                        if gap == 1 {
                            lip_h = lip_h.max(ratio);
                        } else {
                            lip_2h = lip_2h.max(ratio);
                        }
                    }
                }
            }
        }
    }

    // Hoelder-1/2 in time at two probe scales
    let mut hoelder_dt = 0.0f64;
    let mut hoelder_2dt = 0.0f64;
    let dt = field.grid.dt();
    for step in 0..l {
        let v0 = field.value_slice(step);
        let v1 = field.value_slice(step + 1);
        for idx in 0..a_count {
            hoelder_dt = hoelder_dt.max((v1[idx] - v0[idx]).abs() / dt.sqrt());
        }
        if step + 2 <= l {
            let v2 = field.value_slice(step + 2);
            for idx in 0..a_count {
                hoelder_2dt = hoelder_2dt.max((v2[idx] - v0[idx]).abs() / (2.0 * dt).sqrt());
            }
        }
    }

    // supermartingale drift of m(r) = V(r, X(r)) + int_0^r f along the
    // optimal pair: conditional-mean increments within 3 standard errors
    let mut martingale_ratio = 0.0f64;
    if let Some(bundle) = bundle {
        let lb = bundle.steps();
        let sample = sampled_steps(lb, 10);
        for &step in &sample {
            if step + 1 > lb {
                continue;
            }
            let increments: Vec<f64> = (0..bundle.paths)
                .map(|path| {
                    let x0 = bundle.state(path, step);
                    let x1 = bundle.state(path, step + 1);
                    let (v0, _) = field.value(step, x0);
                    let (v1, _) = field.value(step + 1, x1);
                    let f = problem.coefficients.running_cost(
                        bundle.grid.node(step),
                        x0,
                        bundle.control_value(path, step),
                    );
                    v1 - v0 + f * bundle.grid.dt()
                })
                .collect();
            let (mean, se) = stats::mean_and_stderr(&increments);
            martingale_ratio = martingale_ratio.max(mean.abs() / (3.0 * se).max(1e-12));
        }
    }

    let lip_stable = lip_h <= 1.25 * lip_2h.max(1e-12) || lip_2h == 0.0;
    let hoelder_stable = hoelder_dt <= 1.6 * hoelder_2dt.max(1e-12) || hoelder_2dt == 0.0;
    let mart_ok = bundle.is_none() || martingale_ratio <= 1.0;
    let status = if growth.is_finite() && lip_stable && hoelder_stable && mart_ok {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    let mut metrics = std::collections::BTreeMap::new();
    metrics.insert("growth_constant".into(), growth);
    metrics.insert("lipschitz_constant".into(), lip_h);
    metrics.insert("lipschitz_constant_2h".into(), lip_2h);
    metrics.insert("hoelder_half_constant".into(), hoelder_dt);
    metrics.insert("hoelder_half_constant_2dt".into(), hoelder_2dt);
    metrics.insert("martingale_increment_ratio".into(), martingale_ratio);
    Ok(CheckReport {
        name: "value-regularity".into(),
        status,
        margin: martingale_ratio,
        tolerance: 1.0,
        seed: problem.noise.seed,
        runtime_ms: start.elapsed().as_millis(),
        witness: None,
        metrics,
    })
}
