use std::path::Path;

use anyhow::{bail, Result};
use bubblebloch::capacity::effective_tensor_with;
use bubblebloch::homogenize::{
    classify, ellipsoid_samples, gap_certificate, write_ellipsoid_csv, HomogenizedModel, Magnitude, Regime,
};
use bubblebloch::vec3::Vec3;
use serde::{Deserialize, Serialize};

use crate::config::UsageError;
use crate::output::read_json;
use crate::run::Run;

const DEFAULT_ELLIPSOID_SAMPLES: usize = 400;

#[derive(Debug, Serialize)]
pub struct DirectionReport {
    pub direction: Vec3,
    pub magnitude: Magnitude,
}

#[derive(Debug, Serialize)]
pub struct GapReport {
    pub omega: f64,
    pub omega_star: f64,
    pub delta: f64,
    pub beta: f64,
    pub regime: Regime,
    pub lambda: [[f64; 3]; 3],
    /// Bloch-vector length (real) or decay rate (imaginary) along 26 directions.
    pub directions: Vec<DirectionReport>,
    pub ellipsoid_residual: f64,
}

#[derive(Deserialize)]
struct ModelFile {
    model: HomogenizedModel,
}

pub fn load_model(run: &Run, model: Option<&Path>) -> Result<HomogenizedModel> {
    match model {
        Some(p) => Ok(read_json::<ModelFile>(p)?.model),
        None => {
            let m = effective_tensor_with(&run.capacity_solver()?, &run.material)?;
            Ok(HomogenizedModel::new(&m, run.material.mu, run.scale))
        }
    }
}

pub fn cmd_gap(run: &Run, omega: Option<f64>, ratio: Option<f64>, model: Option<&Path>) -> Result<bool> {
    let g = &run.cfg.gap;
    let (omega, ratio) = match (omega.or(g.omega), ratio.or(g.ratio)) {
        (Some(_), Some(_)) => bail!(UsageError("give either omega or ratio, not both".into())),
        (None, None) => bail!(UsageError("gap needs --omega or --ratio".into())),
        x => x,
    };
    let hm = load_model(run, model)?;
    let omega = omega.unwrap_or_else(|| ratio.unwrap() * hm.omega_star);
    let q = hm.query(omega)?;
    let regime = classify(&q);
    let (directions, residual) = if regime == Regime::Critical {
        (Vec::new(), 0.0)
    } else {
        let cert = gap_certificate(&q.lambda, q.beta)?;
        let d = cert.directions.iter().zip(&cert.magnitudes).map(|(d, m)| DirectionReport { direction: *d, magnitude: *m });
        (d.collect(), cert.ellipsoid_residual)
    };
    let report = GapReport {
        omega,
        omega_star: hm.omega_star,
        delta: hm.delta,
        beta: q.beta,
        regime,
        lambda: q.lambda,
        directions,
        ellipsoid_residual: residual,
    };
    let path = run.sink.json("gap.json", &report)?;
    println!("wrote {}", path.display());
    println!("omega = {omega:.9e}, omega* = {:.9e}, beta = {:.6e}: {regime}", hm.omega_star, q.beta);
    if regime == Regime::Propagating {
        let n = g.samples.unwrap_or(DEFAULT_ELLIPSOID_SAMPLES);
        let pts = ellipsoid_samples(&q.lambda, q.beta, n)?;
        let p = run.sink.csv("ellipsoid.csv", |buf| Ok(write_ellipsoid_csv(buf, &q.lambda, q.beta, &pts)?))?;
        println!("wrote {} ({} points)", p.display(), pts.len());
    } else if regime == Regime::Gap {
        let (lo, hi) = report
            .directions
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d.magnitude.value()), hi.max(d.magnitude.value())));
        println!("band gap: decay rates between {lo:.6e} and {hi:.6e}");
    }
    Ok(true)
}
