//! Artifact writers: plot-ready CSV dumps and the machine-readable run
//! report. Floating-point fields are written with Rust's shortest
//! round-trip formatting, so identical runs produce byte-identical files.

use crate::backward::BsdeSolution;
use crate::forward::PathBundle;
use crate::problem::SpectralProblem;
use crate::value::ValueField;
use crate::verify::{CheckReport, CheckStatus};
use std::io::{self, Write};
use std::path::Path;

/// Trajectory dump: `path, step, time, x_0..x_{N-1}, control_index`.
pub fn write_trajectory_csv(
    out: &mut dyn Write,
    bundle: &PathBundle,
    max_paths: usize,
) -> io::Result<()> {
    write!(out, "path,step,time")?;
    for c in 0..bundle.dim {
        write!(out, ",x{c}")?;
    }
    writeln!(out, ",control_index")?;
    let l = bundle.steps();
    for path in 0..bundle.paths.min(max_paths) {
        for step in 0..=l {
            write!(out, "{path},{step},{}", bundle.grid.node(step))?;
            for &v in bundle.state(path, step) {
                write!(out, ",{v}")?;
            }
            let u = if step < l {
                bundle.control_index(path, step) as i64
            } else {
                -1
            };
            writeln!(out, ",{u}")?;
        }
    }
    Ok(())
}

/// Backward-solve diagnostics: `time, mean_y, mean_abs_z, condition,
/// r_squared, fit_stderr`.
pub fn write_backward_csv(
    out: &mut dyn Write,
    problem: &SpectralProblem,
    bundle: &PathBundle,
    solution: &BsdeSolution,
) -> io::Result<()> {
    let _ = problem;
    writeln!(out, "time,mean_y,mean_abs_z,condition,r_squared,fit_stderr")?;
    for d in &solution.diagnostics {
        let mean_abs_z = if d.step < solution.window_end {
            let z = solution.z_values(bundle, d.step);
            let abs: Vec<f64> = z.iter().map(|v| v.abs()).collect();
            crate::stats::mean(&abs)
        } else {
            0.0
        };
        writeln!(
            out,
            "{},{},{},{},{},{}",
            d.t, d.mean, mean_abs_z, d.condition, d.r_squared, d.fit_stderr
        )?;
    }
    Ok(())
}

/// Second-adjoint diagnostics: `time, mean_p_norm, fit_stderr, condition`.
pub fn write_adjoint_csv(
    out: &mut dyn Write,
    diagnostics: &[crate::backward::StepDiagnostics],
) -> io::Result<()> {
    writeln!(out, "time,mean_norm,fit_stderr,condition")?;
    for d in diagnostics {
        writeln!(out, "{},{},{},{}", d.t, d.mean, d.fit_stderr, d.condition)?;
    }
    Ok(())
}

/// Value-field export: `time, x_0..x_{d-1}, value, stderr, control_index`.
pub fn write_value_field_csv(out: &mut dyn Write, field: &ValueField) -> io::Result<()> {
    write!(out, "time")?;
    for c in 0..field.dim {
        write!(out, ",x{c}")?;
    }
    writeln!(out, ",value,stderr,control_index")?;
    let a = field.anchors.len();
    let mut pt = vec![0.0; field.dim];
    for step in 0..=field.grid.steps() {
        let vals = field.value_slice(step);
        let ses = field.stderr_slice(step);
        for idx in 0..a {
            field.anchors.point(idx, &mut pt);
            write!(out, "{}", field.grid.node(step))?;
            for &v in &pt {
                write!(out, ",{v}")?;
            }
            let u = if step < field.grid.steps() {
                field.policy_index(step, idx) as i64
            } else {
                -1
            };
            writeln!(out, ",{},{},{u}", vals[idx], ses[idx])?;
        }
    }
    Ok(())
}

/// Machine-readable outcome of one experiment run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub checks: Vec<CheckReport>,
    pub assumptions_passed: Option<bool>,
    pub artifacts: Vec<String>,
}

impl RunReport {
    pub fn any_failed(&self) -> bool {
        self.checks.iter().any(|c| c.status == CheckStatus::Fail)
            || self.assumptions_passed == Some(false)
    }

    /// Deterministic ordering: merge and sort by check name.
    pub fn sort(&mut self) {
        self.checks.sort_by(|a, b| a.name.cmp(&b.name));
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Human summary, one line per check.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "scenario: {}  seed: {}\n\n{:<34} {:>12} {:>14} {:>12} {:>9}\n",
            self.scenario, self.seed, "check", "status", "margin", "tolerance", "ms"
        ));
        for c in &self.checks {
            let status = match c.status {
                CheckStatus::Pass => "pass",
                CheckStatus::Fail => "FAIL",
                CheckStatus::Inconclusive => "inconclusive",
            };
            out.push_str(&format!(
                "{:<34} {:>12} {:>14.6e} {:>12.4e} {:>9}\n",
                c.name, status, c.margin, c.tolerance, c.runtime_ms
            ));
            if let Some(w) = &c.witness {
                out.push_str(&format!("    witness: {w}\n"));
            }
        }
        if let Some(ap) = self.assumptions_passed {
            out.push_str(&format!(
                "\nassumption validation: {}\n",
                if ap { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Write a file and return its name for the manifest.
pub fn write_artifact(dir: &Path, name: &str, contents: &[u8]) -> io::Result<String> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), contents)?;
    Ok(name.to_string())
}
