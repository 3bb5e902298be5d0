//! Experiment pipeline: scenario construction, simulate -> adjoints ->
//! value -> checks, artifact emission.

use crate::config::{ExperimentConfig, ALL_CHECKS};
use anyhow::{bail, Context, Result};
use seelab_core::adjoint2::{
    solve_second_adjoint, transposition_residual, wellposedness_bound, AdjointSecond,
};
use seelab_core::backward::{
    backward_evaluator, solve_bsde, solve_first_adjoint, AdjointFirst, RegressionBasis,
};
use seelab_core::forward::{simulate_state, ControlPolicy, PathBundle, RandomTestData};
use seelab_core::problem::{build_scenario, validate_assumptions, ControlSet, SpectralProblem};
use seelab_core::report::{
    write_adjoint_csv, write_backward_csv, write_trajectory_csv, write_value_field_csv, RunReport,
};
use seelab_core::riccati::{solve_riccati, LqParams, RiccatiSolution};
use seelab_core::value::{
    compute_value, dpp_consistency, AnchorGrid, DpConfig, TrajectoryValueProbe,
    ValueField,
};
use seelab_core::verify::{
    check_pmp, check_smooth_relations, check_superdiff_inclusions, check_time_inclusion,
    check_value_regularity, CheckReport, CheckStatus, OptimalSeptuple, SampleBudget,
};
use sha2::Digest;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub struct RunOutcome {
    pub report: RunReport,
    pub out_dir: PathBuf,
}

struct Artifacts {
    problem: SpectralProblem,
    dp_problem: SpectralProblem,
    field: Option<ValueField>,
    policy: ControlPolicy,
    bundle: PathBundle,
    adjoint1: AdjointFirst,
    adjoint2: AdjointSecond,
    riccati: Option<RiccatiSolution>,
}

fn build_problem(config: &ExperimentConfig) -> Result<SpectralProblem> {
    let mut problem = build_scenario(&config.scenario.name, &config.scenario.params)
        .context("scenario construction failed")?;
    if !config.controls.use_scenario_default {
        problem = problem.with_controls(
            ControlSet::uniform_grid(config.controls.lo, config.controls.hi, config.controls.step)
                .context("invalid control grid")?,
        );
    }
    problem = problem
        .with_steps(config.grid.steps)
        .context("invalid step count")?
        .with_seed(config.monte_carlo.seed);
    Ok(problem)
}

fn initial_state(config: &ExperimentConfig, dim: usize) -> Result<Vec<f64>> {
    let given = &config.scenario.initial;
    if given.len() > dim {
        bail!(
            "initial state has {} coordinates but the problem dimension is {dim}",
            given.len()
        );
    }
    let mut eta = vec![0.0; dim];
    eta[..given.len()].copy_from_slice(given);
    Ok(eta)
}

fn build_artifacts(config: &ExperimentConfig) -> Result<Artifacts> {
    let problem = build_problem(config)?;
    let dim = problem.state_dim();
    let eta = initial_state(config, dim)?;
    let dp_problem = problem.clone().with_steps(config.grid.dp_steps)?;

    let field = if dim <= 2 {
        let anchors = AnchorGrid::uniform(
            dim,
            config.anchors.lo,
            config.anchors.hi,
            config.anchors.step,
        )?;
        Some(compute_value(
            &dp_problem,
            anchors,
            &DpConfig {
                branches: config.monte_carlo.branches,
                substream: 0xD0,
            },
        )?)
    } else {
        None
    };

    let policy = match &field {
        Some(f) => f.feedback_policy(),
        None => ControlPolicy::Constant(problem.controls.nearest_index(0.0)),
    };
    let bundle = simulate_state(&problem, 0, &eta, &policy, config.monte_carlo.paths)?;
    let basis = RegressionBasis::default();
    let adjoint1 = solve_first_adjoint(&problem, &bundle, &basis)?;
    let adjoint2 = solve_second_adjoint(&problem, &bundle, &adjoint1, &basis)?;

    let riccati = if config.scenario.name.starts_with("lq") {
        let g = |k: &str, d: f64| config.scenario.params.get(k).copied().unwrap_or(d);
        let params = LqParams {
            alpha: g("alpha", 0.0),
            beta: g("beta", 1.0),
            sigma: g("sigma", 0.5),
            m_cost: g("m_cost", 1.0),
            n_cost: g("n_cost", 1.0),
            gamma: g("gamma", 1.0),
        };
        Some(solve_riccati(params, &problem.horizon)?)
    } else {
        None
    };

    Ok(Artifacts {
        problem,
        dp_problem,
        field,
        policy,
        bundle,
        adjoint1,
        adjoint2,
        riccati,
    })
}

fn simple_report(
    name: &str,
    status: CheckStatus,
    margin: f64,
    tolerance: f64,
    seed: u64,
    started: std::time::Instant,
    witness: Option<String>,
    metrics: BTreeMap<String, f64>,
) -> CheckReport {
    CheckReport {
        name: name.into(),
        status,
        margin,
        tolerance,
        seed,
        runtime_ms: started.elapsed().as_millis(),
        witness,
        metrics,
    }
}

fn run_checks(config: &ExperimentConfig, art: &Artifacts) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    let seed = config.monte_carlo.seed;
    let budget = SampleBudget {
        times: config.checks.times,
        paths: config.checks.sample_paths,
    };
    let septuple = OptimalSeptuple {
        problem: &art.problem,
        bundle: &art.bundle,
        adjoint1: &art.adjoint1,
        adjoint2: &art.adjoint2,
    };
    let needs_field = ["superdiff", "time-inclusion", "dpp", "value-regularity"];

    for name in &config.checks.run {
        if !ALL_CHECKS.contains(&name.as_str()) {
            bail!("unknown check `{name}`; known checks: {ALL_CHECKS:?}");
        }
        let started = std::time::Instant::now();
        if needs_field.contains(&name.as_str()) && art.field.is_none() {
            reports.push(simple_report(
                name,
                CheckStatus::Inconclusive,
                0.0,
                0.0,
                seed,
                started,
                Some("value grids are limited to state dimension <= 2".into()),
                BTreeMap::new(),
            ));
            continue;
        }
        let report = match name.as_str() {
            "assumptions" => {
                let rep = validate_assumptions(&art.problem, 400)?;
                let mut metrics = BTreeMap::new();
                for c in &rep.checks {
                    metrics.insert(c.name.clone(), c.worst_constant);
                }
                let witness = rep
                    .checks
                    .iter()
                    .find(|c| !c.passed)
                    .map(|c| format!("{}: {}", c.name, c.note));
                simple_report(
                    name,
                    if rep.all_passed() {
                        CheckStatus::Pass
                    } else {
                        CheckStatus::Fail
                    },
                    0.0,
                    0.0,
                    seed,
                    started,
                    witness,
                    metrics,
                )
            }
            "pmp" => check_pmp(&septuple, &budget)?,
            "smooth-relations" => {
                let probe = TrajectoryValueProbe {
                    problem: &art.problem,
                    policy: &art.policy,
                    branches: config.monte_carlo.branches,
                    substream: 0xCAFE,
                };
                check_smooth_relations(&septuple, &probe, &budget, config.tolerances.fd_step)?
            }
            "superdiff" => check_superdiff_inclusions(
                &septuple,
                art.field.as_ref().unwrap(),
                &budget,
                &config.tolerances.ladder,
            )?,
            "time-inclusion" => check_time_inclusion(
                &septuple,
                art.field.as_ref().unwrap(),
                &budget,
                &config.tolerances.ladder,
                art.riccati.as_ref(),
            )?,
            "dpp" => {
                let field = art.field.as_ref().unwrap();
                let eta = initial_state(config, art.problem.state_dim())?;
                let rep = dpp_consistency(
                    &art.dp_problem,
                    field,
                    0,
                    config.grid.dp_steps / 2,
                    &eta,
                    &DpConfig {
                        branches: config.monte_carlo.branches,
                        substream: 0xD7,
                    },
                )?;
                // splicing identity on the driving bundle
                let basis = RegressionBasis::default();
                let full = solve_bsde(&art.problem, &art.bundle, &basis)?;
                let mid = config.grid.steps / 2;
                let y_mid = full.y_values(&art.bundle, mid);
                let spliced =
                    backward_evaluator(&art.problem, &art.bundle, &basis, 0, mid, y_mid)?;
                let splice_gap = (full.y0.0 - spliced.y0.0).abs();
                let splice_tol = 2.0 * (full.y0.1 + spliced.y0.1);
                let mut metrics = BTreeMap::new();
                metrics.insert("gap".into(), rep.gap);
                metrics.insert("combined_stderr".into(), rep.combined_stderr);
                metrics.insert("splice_gap".into(), splice_gap);
                metrics.insert("splice_tolerance".into(), splice_tol);
                let tol = 3.0 * rep.combined_stderr.max(0.004);
                let ok = rep.gap <= tol && splice_gap <= splice_tol.max(1e-4);
                simple_report(
                    name,
                    if ok { CheckStatus::Pass } else { CheckStatus::Fail },
                    rep.gap,
                    tol,
                    seed,
                    started,
                    None,
                    metrics,
                )
            }
            "transposition" => {
                let d1 = RandomTestData {
                    noise: art.problem.noise,
                    tag: 21,
                    dim: art.problem.state_dim(),
                    noise_dim: art.problem.noise_dim(),
                    block: (config.grid.steps / 25).max(1),
                    xi_scale: 0.5,
                    u_scale: 0.5,
                    v_scale: 0.5,
                };
                let d2 = RandomTestData {
                    noise: art.problem.noise,
                    tag: 22,
                    dim: art.problem.state_dim(),
                    noise_dim: art.problem.noise_dim(),
                    block: (config.grid.steps / 25).max(1),
                    xi_scale: 0.4,
                    u_scale: 0.6,
                    v_scale: 0.3,
                };
                let rep = transposition_residual(
                    &art.problem,
                    &art.bundle,
                    &art.adjoint1,
                    &art.adjoint2,
                    &d1,
                    &d2,
                )?;
                let mut metrics = BTreeMap::new();
                metrics.insert("lhs".into(), rep.lhs);
                metrics.insert("rhs".into(), rep.rhs);
                metrics.insert("residual".into(), rep.residual);
                metrics.insert("stderr".into(), rep.stderr);
                let tol = 3.0 * rep.stderr;
                simple_report(
                    name,
                    if rep.residual <= tol {
                        CheckStatus::Pass
                    } else {
                        CheckStatus::Fail
                    },
                    rep.residual,
                    tol,
                    seed,
                    started,
                    None,
                    metrics,
                )
            }
            "wellposedness" => {
                let rep = wellposedness_bound(
                    &art.problem,
                    &art.bundle,
                    &art.adjoint1,
                    &art.adjoint2,
                );
                let mut metrics = BTreeMap::new();
                metrics.insert("solution_norm".into(), rep.solution_norm);
                metrics.insert("data_norm".into(), rep.data_norm);
                metrics.insert("ratio".into(), rep.ratio);
                simple_report(
                    name,
                    if rep.ratio.is_finite() {
                        CheckStatus::Pass
                    } else {
                        CheckStatus::Fail
                    },
                    rep.ratio,
                    f64::INFINITY,
                    seed,
                    started,
                    None,
                    metrics,
                )
            }
            "value-regularity" => check_value_regularity(
                &art.dp_problem,
                art.field.as_ref().unwrap(),
                Some(&art.bundle),
            )?,
            other => bail!("unhandled check `{other}`"),
        };
        reports.push(report);
    }
    Ok(reports)
}

pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    let art = build_artifacts(config)?;
    let checks = run_checks(config, &art)?;

    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output dir {}", out_dir.display()))?;
    let mut artifact_names: Vec<String> = Vec::new();

    // effective configuration echo
    let effective = toml::to_string_pretty(config)?;
    std::fs::write(out_dir.join("effective-config.toml"), &effective)?;
    artifact_names.push("effective-config.toml".into());

    if let Some(field) = &art.field {
        let mut buf = Vec::new();
        write_value_field_csv(&mut buf, field)?;
        std::fs::write(out_dir.join("value_field.csv"), &buf)?;
        artifact_names.push("value_field.csv".into());
    }
    {
        let basis = RegressionBasis::default();
        let sol = solve_bsde(&art.problem, &art.bundle, &basis)?;
        let mut buf = Vec::new();
        write_backward_csv(&mut buf, &art.problem, &art.bundle, &sol)?;
        std::fs::write(out_dir.join("backward.csv"), &buf)?;
        artifact_names.push("backward.csv".into());
    }
    {
        let mut buf = Vec::new();
        write_adjoint_csv(&mut buf, &art.adjoint2.diagnostics)?;
        std::fs::write(out_dir.join("adjoint2.csv"), &buf)?;
        artifact_names.push("adjoint2.csv".into());
    }
    if config.output.trajectories > 0 {
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &art.bundle, config.output.trajectories)?;
        std::fs::write(out_dir.join("trajectories.csv"), &buf)?;
        artifact_names.push("trajectories.csv".into());
    }

    let mut report = RunReport {
        scenario: config.scenario.name.clone(),
        seed: config.monte_carlo.seed,
        checks,
        assumptions_passed: None,
        artifacts: artifact_names.clone(),
    };
    report.sort();

    std::fs::write(out_dir.join("report.json"), report.to_json())?;
    artifact_names.push("report.json".into());
    std::fs::write(out_dir.join("summary.txt"), report.summary_table())?;
    artifact_names.push("summary.txt".into());

    // manifest with content hashes, written last
    artifact_names.sort();
    let mut manifest = serde_json::Map::new();
    let mut files = Vec::new();
    for name in &artifact_names {
        let bytes = std::fs::read(out_dir.join(name))?;
        let mut hasher = sha2::Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        let mut entry = serde_json::Map::new();
        entry.insert("name".into(), serde_json::Value::String(name.clone()));
        entry.insert(
            "sha256".into(),
            serde_json::Value::String(hex_string(&digest)),
        );
        entry.insert("bytes".into(), serde_json::Value::from(bytes.len()));
        files.push(serde_json::Value::Object(entry));
    }
    manifest.insert("files".into(), serde_json::Value::Array(files));
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(manifest))?,
    )?;

    report.artifacts = artifact_names;
    Ok(RunOutcome {
        report,
        out_dir: out_dir.to_path_buf(),
    })
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Scenario registry text for `list-scenarios`.
pub fn scenario_listing() -> String {
    let mut out = String::new();
    out.push_str("built-in scenarios:\n");
    out.push_str("  lq1         canonical scalar linear-quadratic benchmark (no parameters)\n");
    out.push_str(
        "  lq          scalar linear-quadratic family; params: alpha, beta, sigma, m_cost, n_cost, gamma, t_end\n",
    );
    out.push_str("  heat        spectral stochastic heat equation; params: modes\n");
    out.push_str("  wave        spectral stochastic wave equation; params: modes\n");
    out.push_str("  bang-bang   deterministic two-control benchmark; params: t_end\n");
    out.push_str("\nbuilt-in configurations (usable as `seelab run <name>`):\n");
    for name in crate::config::builtin_config_names() {
        out.push_str(&format!("  {name}\n"));
    }
    out.push_str("\nchecks:\n");
    for c in ALL_CHECKS {
        out.push_str(&format!("  {c}\n"));
    }
    out
}

