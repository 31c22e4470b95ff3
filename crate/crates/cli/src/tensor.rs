use anyhow::Result;
use bubblebloch::capacity::{effective_tensor_with, CapacitySolver, EffectiveModel};
use bubblebloch::homogenize::HomogenizedModel;
use bubblebloch::vec3::Vec3;
use bubblebloch::Error;
use serde::Serialize;

use crate::run::Run;

/// Finite-difference Hessian of the capacity against `-2 |D| lambda / v_b^2`.
#[derive(Debug, Serialize)]
pub struct HessianCheck {
    pub step: f64,
    pub gradient: Vec3,
    pub hessian_fd: [[f64; 3]; 3],
    pub hessian_model: [[f64; 3]; 3],
    pub relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Serialize)]
pub struct TensorReport {
    pub model: HomogenizedModel,
    pub hessian_check: HessianCheck,
}

pub fn hessian_check(solver: &CapacitySolver, model: &EffectiveModel, step: f64, tol: f64) -> Result<HessianCheck> {
    let (gradient, h) = solver.hessian_fd(step)?;
    let c = -2.0 * model.cell_volume_bubble / (model.vb * model.vb);
    let hm: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| c * model.lambda_matrix[i][j]));
    let scale = hm.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    let err = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).fold(0.0f64, |m, (i, j)| m.max((h[i][j] - hm[i][j]).abs()));
    let relative_error = err / scale;
    Ok(HessianCheck {
        step,
        gradient,
        hessian_fd: h,
        hessian_model: hm,
        relative_error,
        tolerance: tol,
        passed: relative_error <= tol,
    })
}

/// Writes `model.json`; returns false (nonzero exit) when the tensor is not PSD.
pub fn cmd_tensor(run: &Run) -> Result<bool> {
    let solver = run.capacity_solver()?;
    let model = match effective_tensor_with(&solver, &run.material) {
        Ok(m) => m,
        Err(e @ Error::NotPositiveSemiDefinite { .. }) => {
            eprintln!("{e}");
            return Ok(false);
        }
        Err(e) => return Err(e.into()),
    };
    let tol = &run.cfg.tolerances;
    let check = hessian_check(&solver, &model, tol.hessian_step, tol.hessian_rel)?;
    if !check.passed {
        log::warn!("FD Hessian differs from the model by {:.3e} (tolerance {:.1e})", check.relative_error, check.tolerance);
    }
    let report = TensorReport { model: HomogenizedModel::new(&model, run.material.mu, run.scale), hessian_check: check };
    let path = run.sink.json("model.json", &report)?;
    let l = &report.model.lambda;
    println!("wrote {}", path.display());
    for row in l {
        println!("lambda  {:>14.6e} {:>14.6e} {:>14.6e}", row[0], row[1], row[2]);
    }
    println!("omega* = {:.9e}, eigenvalues = {:?}", report.model.omega_star, model.diagnostics.eigenvalues);
    println!(
        "hessian check: relative error {:.3e} ({})",
        report.hessian_check.relative_error,
        if report.hessian_check.passed { "ok" } else { "exceeds tolerance" }
    );
    Ok(true)
}
