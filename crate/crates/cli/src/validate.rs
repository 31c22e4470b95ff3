use anyhow::Result;
use bubblebloch::capacity::{effective_tensor_with, symmetric_eigenvalues};
use bubblebloch::lattice_green::BlochVector;
use bubblebloch::oracle::{fd_capacity_extrapolated, PweSolver};
use serde::Serialize;

use crate::config::SweepConfig;
use crate::run::Run;
use crate::tensor::hessian_check;

#[derive(Debug, Serialize)]
pub struct Check {
    pub name: String,
    /// Measured discrepancy (NaN when the check errored).
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn measured(name: &str, value: f64, tolerance: f64, detail: String) -> Check {
        Check { name: name.into(), value, tolerance, passed: value <= tolerance, detail }
    }

    fn errored(name: &str, e: anyhow::Error) -> Check {
        Check { name: name.into(), value: f64::NAN, tolerance: f64::NAN, passed: false, detail: format!("error: {e:#}") }
    }
}

#[derive(Debug, Serialize)]
struct ValidateReport {
    checks: Vec<Check>,
    passed: bool,
}

/// Borrows a result computed once and used by several checks.
fn shared<T, E: std::fmt::Display>(r: &std::result::Result<T, E>) -> Result<&T> {
    r.as_ref().map_err(|e| anyhow::anyhow!("{e}"))
}

const GENERIC_ALPHA: [f64; 3] = [1.1, -0.7, 2.3];

fn run_checks(run: &Run) -> Vec<Check> {
    let v = &run.cfg.validate;
    let tol = &run.cfg.tolerances;
    let m = &run.material;
    let mut checks = Vec::new();
    let mut push = |name: &str, r: Result<Check>| {
        let c = r.unwrap_or_else(|e| Check::errored(name, e));
        log::info!("{}: {}", c.name, if c.passed { "pass" } else { "FAIL" });
        checks.push(c);
    };
    let (cap, solver) = match (run.capacity_solver(), run.solver()) {
        (Ok(c), Ok(s)) => (c, s),
        (Err(e), _) | (_, Err(e)) => {
            push("setup", Err(e));
            return checks;
        }
    };
    let star = BlochVector::star();
    let cap_star = cap.capacity(star);

    let model = effective_tensor_with(&cap, m);
    push(
        "tensor_psd",
        shared(&model).and_then(|model| {
            let sign = if v.negate_lambda { -1.0 } else { 1.0 };
            let l = model.lambda_matrix.map(|r| r.map(|x| sign * x));
            let ev = symmetric_eigenvalues(&l)?;
            let scale = ev.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(f64::MIN_POSITIVE);
            Ok(Check::measured("tensor_psd", (-ev[0] / scale).max(0.0), 1e-8, format!("eigenvalues {ev:?}")))
        }),
    );
    push(
        "hessian_fd",
        shared(&model).and_then(|model| {
            let h = hessian_check(&cap, model, tol.hessian_step, tol.hessian_rel)?;
            Ok(Check::measured("hessian_fd", h.relative_error, h.tolerance, format!("step {}", h.step)))
        }),
    );
    push("corner_maximum", (|| {
        let c0 = shared(&cap_star)?;
        let grid = SweepConfig { grid: v.grid, ..SweepConfig::default() }.unit_cell_alphas()?;
        let caps = cap.capacities(&grid);
        let mut worst = f64::NEG_INFINITY;
        for c in caps {
            worst = worst.max(c?);
        }
        let excess = ((worst - c0) / c0).max(0.0);
        Ok(Check::measured("corner_maximum", excess, 1e-12, format!("Cap* = {c0:.9e}, grid max = {worst:.9e}")))
    })());
    push("time_reversal", (|| {
        let a = BlochVector::new(GENERIC_ALPHA);
        let (p, q) = (solver.solve(a, m, None)?.omega, solver.solve(a.neg(), m, None)?.omega);
        Ok(Check::measured("time_reversal", (p - q).abs() / p, tol.symmetry, format!("omega = {p:.12e}")))
    })());
    let full_star = solver.solve(star, m, None);
    push("asymptotic_corner", (|| {
        let full = shared(&full_star)?;
        let dev = (full.omega - full.omega_minnaert).abs() / full.omega;
        let budget = tol.asymptotic_factor * m.delta();
        Ok(Check::measured("asymptotic_corner", dev, budget, format!("full {:.9e}, asymptotic {:.9e}", full.omega, full.omega_minnaert)))
    })());
    let shape = run.cfg.geometry.shape();
    push("fd_capacity", (|| {
        let c0 = shared(&cap_star)?;
        let [m1, m2] = v.fd_resolutions;
        let fd = fd_capacity_extrapolated(*shared(&shape)?, star, m1, m2)?;
        Ok(Check::measured("fd_capacity", (fd - c0).abs() / c0, tol.fd_rel, format!("fd {fd:.6e} (m = {m1}, {m2}), bie {c0:.6e}")))
    })());
    push("pwe_band", (|| {
        let full = shared(&full_star)?;
        let pwe = PweSolver::new(*shared(&shape)?, m, v.pwe_cutoff)?.band(star)?;
        Ok(Check::measured(
            "pwe_band",
            (pwe - full.omega).abs() / full.omega,
            tol.pwe_rel,
            format!("pwe {pwe:.6e} (cutoff {}), bie {:.6e}", v.pwe_cutoff, full.omega),
        ))
    })());
    checks
}

/// Oracle cross-checks; returns false when any check fails.
pub fn cmd_validate(run: &Run) -> Result<bool> {
    let checks = run_checks(run);
    let passed = checks.iter().all(|c| c.passed);
    for c in &checks {
        println!(
            "{} {:<18} value {:>10.3e}  tolerance {:>9.2e}  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.tolerance,
            c.detail
        );
    }
    run.sink.json("validate.json", &ValidateReport { checks, passed })?;
    Ok(passed)
}
