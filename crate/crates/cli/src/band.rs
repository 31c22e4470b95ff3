use anyhow::Result;
use bubblebloch::bloch::{write_band_csv, BandPoint, BlochSolver, Method};
use bubblebloch::lattice_green::BlochVector;
use bubblebloch::vec3::Vec3;
use serde::Serialize;

use crate::run::Run;

#[derive(Debug, Serialize)]
pub struct Failure {
    pub index: usize,
    pub alpha: Vec3,
    pub error: String,
}

/// Full against asymptotic frequency at one sweep point.
#[derive(Debug, Serialize)]
pub struct AsymptoticCheck {
    pub alpha: Vec3,
    pub omega_full: f64,
    pub omega_asymptotic: f64,
    pub relative_deviation: f64,
    pub budget: f64,
    pub within_budget: bool,
}

#[derive(Debug, Serialize)]
pub struct BandSummary {
    pub mode: Method,
    pub points: usize,
    pub argmax_alpha: Option<Vec3>,
    pub argmax_omega: Option<f64>,
    pub argmax_is_corner: bool,
    /// Frequency at `alpha*/s` from the sweep's method.
    pub omega_star: Option<f64>,
    pub failures: Vec<Failure>,
    pub asymptotic_check: Vec<AsymptoticCheck>,
}

const CHECK_POINTS: usize = 5;

fn to_scaled(p: BandPoint, s: f64) -> BandPoint {
    BandPoint { alpha: p.alpha.scaled(1.0 / s), omega: p.omega / s, omega_minnaert: p.omega_minnaert / s, ..p }
}

fn is_corner(a: BlochVector) -> bool {
    let pi = std::f64::consts::PI;
    a.components().iter().all(|x| (x.abs() - pi).abs() <= 1e-12)
}

fn check_point(solver: &BlochSolver, run: &Run, p: &BandPoint) -> Result<AsymptoticCheck> {
    let m = &run.material;
    let (full, asym) = match p.method {
        Method::Full => (p.omega, p.omega_minnaert),
        Method::Asymptotic => (solver.solve(p.alpha, m, None)?.omega, p.omega),
    };
    let dev = (full - asym).abs() / full;
    let budget = run.cfg.tolerances.asymptotic_factor * m.delta();
    let s = run.scale;
    Ok(AsymptoticCheck {
        alpha: p.alpha.scaled(1.0 / s).components(),
        omega_full: full / s,
        omega_asymptotic: asym / s,
        relative_deviation: dev,
        budget,
        within_budget: dev <= budget,
    })
}

/// Sweeps the first band; returns false when any point failed.
pub fn cmd_band(run: &Run) -> Result<bool> {
    let alphas = run.cfg.sweep.unit_cell_alphas()?;
    let method: Method = run.cfg.sweep.mode.into();
    let solver = run.solver()?;
    let s = run.scale;
    log::info!("band sweep: {} points, {method} mode", alphas.len());
    let results = solver.sweep(&alphas, &run.material, method);

    let mut points = Vec::new();
    let mut failures = Vec::new();
    for (i, (a, r)) in alphas.iter().zip(results).enumerate() {
        match r {
            Ok(p) => points.push(p),
            Err(e) => failures.push(Failure { index: i, alpha: a.scaled(1.0 / s).components(), error: e.to_string() }),
        }
    }
    let best = points.iter().max_by(|a, b| a.omega.total_cmp(&b.omega)).copied();
    let omega_star = match points.iter().find(|p| is_corner(p.alpha)) {
        Some(p) => Some(p.omega),
        None => {
            let r = match method {
                Method::Full => solver.solve(BlochVector::star(), &run.material, None),
                Method::Asymptotic => solver.minnaert(BlochVector::star(), &run.material),
            };
            r.map_err(|e| log::warn!("corner frequency failed: {e}")).ok().map(|p| p.omega)
        }
    };
    let picks: Vec<&BandPoint> = if points.is_empty() {
        Vec::new()
    } else {
        let n = CHECK_POINTS.min(points.len());
        let mut idx: Vec<usize> = (0..n).map(|k| if n == 1 { 0 } else { k * (points.len() - 1) / (n - 1) }).collect();
        idx.dedup();
        idx.into_iter().map(|k| &points[k]).collect()
    };
    let mut asymptotic_check = Vec::new();
    for p in picks {
        match check_point(&solver, run, p) {
            Ok(c) => asymptotic_check.push(c),
            Err(e) => log::warn!("asymptotic check at {:?} failed: {e}", p.alpha.0),
        }
    }

    let scaled: Vec<BandPoint> = points.iter().map(|p| to_scaled(*p, s)).collect();
    let csv = run.sink.csv("band.csv", |buf| Ok(write_band_csv(buf, &scaled)?))?;
    let summary = BandSummary {
        mode: method,
        points: alphas.len(),
        argmax_alpha: best.map(|p| p.alpha.scaled(1.0 / s).components()),
        argmax_omega: best.map(|p| p.omega / s),
        argmax_is_corner: best.is_some_and(|p| is_corner(p.alpha)),
        omega_star: omega_star.map(|w| w / s),
        failures,
        asymptotic_check,
    };
    run.sink.json("summary.json", &summary)?;
    println!("wrote {} ({} points)", csv.display(), scaled.len());
    if let (Some(a), Some(w)) = (summary.argmax_alpha, summary.argmax_omega) {
        println!("argmax alpha = [{:.6}, {:.6}, {:.6}], omega = {w:.9e}, corner = {}", a[0], a[1], a[2], summary.argmax_is_corner);
    }
    for f in &summary.failures {
        eprintln!("failed at alpha = {:?}: {}", f.alpha, f.error);
    }
    Ok(summary.failures.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_detection_handles_both_signs() {
        let pi = std::f64::consts::PI;
        assert!(is_corner(BlochVector::new([pi, -pi, pi])));
        assert!(!is_corner(BlochVector::new([pi, 0.5, pi])));
    }
}
