//! Dispersion relation near the corner frequency, band-gap classification
//! and two-scale reconstruction of the first Bloch mode.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bloch::{BlochSolver, MaterialParams, Side};
use crate::capacity::EffectiveModel;
use crate::error::{Error, Result};
use crate::lattice_green::BlochVector;
use crate::vec3::{self, Vec3};
use crate::C64;

/// Relative tolerance of the critical band `|beta| <= tol omega*^2 / delta`.
pub const CRITICAL_TOL: f64 = 1e-10;

/// A frequency near the corner frequency of an `s`-scaled crystal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersionQuery {
    pub omega: f64,
    pub omega_star: f64,
    pub delta: f64,
    /// `(omega*^2 - omega^2) / delta`.
    pub beta: f64,
    pub lambda: [[f64; 3]; 3],
    pub scale: f64,
}

impl DispersionQuery {
    pub fn new(omega: f64, omega_star: f64, delta: f64, lambda: [[f64; 3]; 3], scale: f64) -> Result<DispersionQuery> {
        for (name, x) in [("omega_star", omega_star), ("delta", delta), ("scale", scale)] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {x}")));
            }
        }
        if !(omega >= 0.0 && omega.is_finite()) {
            return Err(Error::InvalidParameter(format!("frequency must be nonnegative, got {omega}")));
        }
        let beta = (omega_star * omega_star - omega * omega) / delta;
        Ok(DispersionQuery { omega, omega_star, delta, beta, lambda, scale })
    }

    /// Query in the unit cell of `model`.
    pub fn from_model(model: &EffectiveModel, omega: f64) -> Result<DispersionQuery> {
        DispersionQuery::new(omega, model.omega_star, model.delta, model.lambda_matrix, 1.0)
    }

    pub fn tolerance(&self) -> f64 {
        CRITICAL_TOL * self.omega_star * self.omega_star / self.delta
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Propagating,
    Gap,
    Critical,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Propagating => "propagating",
            Regime::Gap => "gap",
            Regime::Critical => "critical",
        })
    }
}

pub fn classify(query: &DispersionQuery) -> Regime {
    let tol = query.tolerance();
    if query.beta > tol {
        Regime::Propagating
    } else if query.beta < -tol {
        Regime::Gap
    } else {
        Regime::Critical
    }
}

/// Length of `alpha~` along a direction on `{sum lambda_ij a_i a_j = beta}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Magnitude {
    Real(f64),
    /// Decay rate of an evanescent wave.
    Imaginary(f64),
}

impl Magnitude {
    pub fn is_real(&self) -> bool {
        matches!(self, Magnitude::Real(_))
    }

    pub fn value(&self) -> f64 {
        match *self {
            Magnitude::Real(t) | Magnitude::Imaginary(t) => t,
        }
    }
}

pub fn quadratic_form(lambda: &[[f64; 3]; 3], a: Vec3) -> f64 {
    (0..3).map(|i| (0..3).map(|j| lambda[i][j] * a[i] * a[j]).sum::<f64>()).sum()
}

fn lambda_scale(lambda: &[[f64; 3]; 3]) -> f64 {
    lambda.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// `t` with `t d` on the ellipsoid, or the decay rate when `beta < 0`.
pub fn solve_bloch_vector(lambda: &[[f64; 3]; 3], beta: f64, direction: Vec3) -> Result<Magnitude> {
    let n = vec3::norm(direction);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::InvalidParameter("direction must be a nonzero vector".into()));
    }
    let d = vec3::scale(direction, 1.0 / n);
    let q = quadratic_form(lambda, d);
    if !(q > 1e-12 * lambda_scale(lambda)) || q <= 0.0 {
        return Err(Error::DegenerateDirection { value: q });
    }
    Ok(if beta >= 0.0 { Magnitude::Real((beta / q).sqrt()) } else { Magnitude::Imaginary((-beta / q).sqrt()) })
}

/// The 26 directions of the cube neighbours, normalized.
pub fn probe_directions_26() -> Vec<Vec3> {
    let mut out = Vec::with_capacity(26);
    for i in -1..=1 {
        for j in -1..=1 {
            for k in -1..=1 {
                if (i, j, k) != (0, 0, 0) {
                    let d = [i as f64, j as f64, k as f64];
                    out.push(vec3::scale(d, 1.0 / vec3::norm(d)));
                }
            }
        }
    }
    out
}

/// Result of probing every direction at one `beta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapCertificate {
    pub beta: f64,
    pub directions: Vec<Vec3>,
    pub magnitudes: Vec<Magnitude>,
    /// `max |sum lambda a a - beta|` over the real solutions.
    pub ellipsoid_residual: f64,
}

impl GapCertificate {
    /// No direction carries a real Bloch vector.
    pub fn is_gap(&self) -> bool {
        self.magnitudes.iter().all(|m| !m.is_real())
    }
}

pub fn gap_certificate(lambda: &[[f64; 3]; 3], beta: f64) -> Result<GapCertificate> {
    let directions = probe_directions_26();
    let magnitudes = directions.iter().map(|d| solve_bloch_vector(lambda, beta, *d)).collect::<Result<Vec<_>>>()?;
    let ellipsoid_residual = directions
        .iter()
        .zip(&magnitudes)
        .filter_map(|(d, m)| match m {
            Magnitude::Real(t) => Some((quadratic_form(lambda, vec3::scale(*d, *t)) - beta).abs()),
            Magnitude::Imaginary(_) => None,
        })
        .fold(0.0, f64::max);
    Ok(GapCertificate { beta, directions, magnitudes, ellipsoid_residual })
}

/// `sum lambda_ij d_i d_j u + beta u` for the plane wave `u = e^{i a.x}`.
pub fn homogenized_residual(lambda: &[[f64; 3]; 3], beta: f64, alpha_tilde: Vec3, x: Vec3) -> C64 {
    let u = C64::from_polar(1.0, vec3::dot(alpha_tilde, x));
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..3 {
        for j in 0..3 {
            // d_i d_j e^{i a.x} = -a_i a_j e^{i a.x}
            acc += u * (-lambda[i][j] * alpha_tilde[i] * alpha_tilde[j]);
        }
    }
    acc + u * beta
}

/// Points on `{sum lambda_ij a_i a_j = beta}` along `n` quasi-uniform directions
/// (empty for `beta < 0`).
pub fn ellipsoid_samples(lambda: &[[f64; 3]; 3], beta: f64, n: usize) -> Result<Vec<Vec3>> {
    if beta < 0.0 {
        return Ok(Vec::new());
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            let r = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            let d = [r * t.cos(), r * t.sin(), z];
            Ok(vec3::scale(d, solve_bloch_vector(lambda, beta, d)?.value()))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct EllipsoidRow {
    a1: f64,
    a2: f64,
    a3: f64,
    residual: f64,
}

/// CSV with header `a1,a2,a3,residual`.
pub fn write_ellipsoid_csv<W: std::io::Write>(out: W, lambda: &[[f64; 3]; 3], beta: f64, points: &[Vec3]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        let row = EllipsoidRow { a1: p[0], a2: p[1], a3: p[2], residual: quadratic_form(lambda, *p) - beta };
        w.serialize(row).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Exported homogenized model: `beta(omega) = (omega_star^2 - omega^2) / delta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomogenizedModel {
    pub lambda: [[f64; 3]; 3],
    pub omega_star: f64,
    pub delta: f64,
    #[serde(default)]
    pub mu: Option<f64>,
    pub scale: f64,
    pub model: EffectiveModel,
}

impl HomogenizedModel {
    /// Model of the `s`-scaled crystal with `delta = mu s^2` (or the model's delta if `mu` is absent).
    pub fn new(model: &EffectiveModel, mu: Option<f64>, scale: f64) -> HomogenizedModel {
        let delta = mu.map_or(model.delta, |m| m * scale * scale);
        HomogenizedModel {
            lambda: model.lambda_matrix,
            omega_star: (delta * model.critical_omega_sq_over_delta).sqrt() / scale,
            delta,
            mu,
            scale,
            model: model.clone(),
        }
    }

    pub fn beta(&self, omega: f64) -> f64 {
        (self.omega_star * self.omega_star - omega * omega) / self.delta
    }

    pub fn query(&self, omega: f64) -> Result<DispersionQuery> {
        DispersionQuery::new(omega, self.omega_star, self.delta, self.lambda, self.scale)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<HomogenizedModel> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Full and predicted dispersion at one scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersionSample {
    pub scale: f64,
    pub delta: f64,
    /// `omega*` of the scaled crystal.
    pub omega_star: f64,
    /// `omega_{1,s}^{alpha*/s + alpha~}`.
    pub omega: f64,
    /// `delta sum lambda_ij a_i a_j`.
    pub predicted: f64,
    /// `|omega*^2 - omega^2 - predicted|`.
    pub residual: f64,
}

/// Dispersion residual of the `s`-scaled crystal with `delta = mu s^2`.
///
/// `solver` holds the unit-cell bubble; the scaled eigenvalues come from
/// `omega_{1,s}^{alpha/s} = omega_1^alpha / s`.
pub fn dispersion_residual(
    solver: &BlochSolver,
    model: &EffectiveModel,
    material: &MaterialParams,
    mu: f64,
    alpha_tilde: Vec3,
    s: f64,
) -> Result<DispersionSample> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::InvalidParameter(format!("scale must lie in (0, 1], got {s}")));
    }
    let delta = mu * s * s;
    let m = material.with_delta(delta);
    let star = solver.solve(BlochVector::star(), &m, None)?.omega;
    let omega = if alpha_tilde == [0.0; 3] {
        star
    } else {
        solver.solve(BlochVector::star().add(vec3::scale(alpha_tilde, s)), &m, Some(star))?.omega
    };
    let (ws, w) = (star / s, omega / s);
    let predicted = delta * quadratic_form(&model.lambda_matrix, alpha_tilde);
    Ok(DispersionSample { scale: s, delta, omega_star: ws, omega: w, predicted, residual: (ws * ws - w * w - predicted).abs() })
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    num / den
}

/// Fit of `(omega^2 - delta omega_M^2) / delta^2 = lambda0 + c delta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambda0Fit {
    pub lambda0: f64,
    pub slope: f64,
    /// RMS fit residual relative to `|lambda0|`.
    pub fit_residual: f64,
    /// `(delta, (omega^2 - delta omega_M^2) / delta^2)`.
    pub samples: Vec<(f64, f64)>,
    pub reliable: bool,
}

/// Fit residual above which the estimate is flagged.
pub const LAMBDA0_FIT_TOL: f64 = 1e-2;

/// Fits from `(delta, omega^2, delta omega_M^2)` triples.
pub fn fit_lambda0_samples(samples: &[(f64, f64, f64)]) -> Result<Lambda0Fit> {
    if samples.len() < 3 {
        return Err(Error::InvalidParameter("at least three contrast samples are needed".into()));
    }
    let pts: Vec<(f64, f64)> = samples.iter().map(|&(d, w2, wm2)| (d, (w2 - wm2) / (d * d))).collect();
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (sx / n, sy / n);
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let lambda0 = my - slope * mx;
    let rms = (pts.iter().map(|p| (p.1 - lambda0 - slope * p.0).powi(2)).sum::<f64>() / n).sqrt();
    let fit_residual = rms / lambda0.abs().max(f64::MIN_POSITIVE);
    let reliable = fit_residual <= LAMBDA0_FIT_TOL;
    if !reliable {
        log::warn!("lambda0 fit residual {fit_residual:e} exceeds {LAMBDA0_FIT_TOL:e}; estimate unreliable");
    }
    Ok(Lambda0Fit { lambda0, slope, fit_residual, samples: pts, reliable })
}

/// `lambda_0(alpha*)` from full solves at the given contrasts.
pub fn fit_lambda0(solver: &BlochSolver, material: &MaterialParams, deltas: &[f64]) -> Result<Lambda0Fit> {
    let samples = deltas
        .iter()
        .map(|&d| {
            let p = solver.solve(BlochVector::star(), &material.with_delta(d), None)?;
            Ok((d, p.omega * p.omega, p.omega_minnaert * p.omega_minnaert))
        })
        .collect::<Result<Vec<_>>>()?;
    fit_lambda0_samples(&samples)
}

/// `e^{i a~.x} S(x/s)`, with `S` from the unit-cell bubble of `solver`.
pub fn two_scale_field(solver: &BlochSolver, alpha_tilde: Vec3, s: f64, points: &[Vec3]) -> Result<Vec<C64>> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::InvalidParameter(format!("scale must lie in (0, 1], got {s}")));
    }
    let local: Vec<Vec3> = points.iter().map(|x| vec3::scale(*x, 1.0 / s)).collect();
    let sf = solver.s_field(&local)?;
    Ok(points.iter().zip(sf).map(|(x, v)| C64::from_polar(1.0, vec3::dot(alpha_tilde, *x)) * v).collect())
}

/// First Bloch mode of the `s`-scaled crystal at `alpha*/s + alpha~`, `delta = mu s^2`,
/// evaluated as `u_1^{alpha* + s alpha~}(x/s)` on the unit cell.
pub fn scaled_mode_field(
    solver: &BlochSolver,
    material: &MaterialParams,
    mu: f64,
    alpha_tilde: Vec3,
    s: f64,
    points: &[Vec3],
) -> Result<Vec<C64>> {
    let m = material.with_delta(mu * s * s);
    let alpha = BlochVector::star().add(vec3::scale(alpha_tilde, s));
    let mode = solver.mode(alpha, &m, None)?;
    let mesh = solver.mesh();
    points.par_iter().map(|x| Ok(mode.field_grad(mesh, vec3::scale(*x, 1.0 / s), Side::Auto)?.0)).collect()
}
