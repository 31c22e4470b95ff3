//! Run configuration: a TOML file with `[geometry]`, `[material]`, `[sweep]`,
//! `[tolerances]` and per-command sections. Every key has a default, so an
//! empty file describes the reference sphere.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bubblebloch::bloch::{MaterialParams, Method};
use bubblebloch::geometry::{make_mesh, QuadratureMesh, Shape};
use bubblebloch::lattice_green::BlochVector;
use bubblebloch::vec3::Vec3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub material: MaterialConfig,
    pub sweep: SweepConfig,
    /// Cell period `s`; the crystal is `s` times the unit lattice.
    pub scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub tolerances: Tolerances,
    pub gap: GapConfig,
    pub field: FieldConfig,
    pub validate: ValidateConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Ellipsoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub shape: ShapeKind,
    pub radius: Option<f64>,
    pub semi_axes: Option<Vec3>,
    /// Degree of the spherical quadrature rule.
    pub order: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig { shape: ShapeKind::Sphere, radius: None, semi_axes: None, order: 8 }
    }
}

pub const DEFAULT_RADIUS: f64 = 0.25;

impl GeometryConfig {
    pub fn shape(&self) -> Result<Shape> {
        let shape = match self.shape {
            ShapeKind::Sphere => {
                if self.semi_axes.is_some() {
                    bail!("a sphere takes `radius`, not `semi_axes`");
                }
                Shape::Sphere { radius: self.radius.unwrap_or(DEFAULT_RADIUS) }
            }
            ShapeKind::Ellipsoid => {
                if self.radius.is_some() {
                    bail!("an ellipsoid takes `semi_axes`, not `radius`");
                }
                let a = self.semi_axes.context("an ellipsoid needs `semi_axes`")?;
                Shape::Ellipsoid { semi_axes: a }
            }
        };
        for a in shape.semi_axes() {
            if !(a > 0.0 && a.is_finite()) {
                bail!("bubble dimensions must be positive, got {:?}", shape.semi_axes());
            }
        }
        Ok(shape)
    }

    pub fn mesh(&self) -> Result<QuadratureMesh> {
        Ok(make_mesh(self.shape()?, self.order)?)
    }

    pub fn describe(&self) -> Result<String> {
        Ok(match self.shape()? {
            Shape::Sphere { radius } => format!("sphere radius={radius} order={}", self.order),
            Shape::Ellipsoid { semi_axes: a } => {
                format!("ellipsoid semi_axes={},{},{} order={}", a[0], a[1], a[2], self.order)
            }
        })
    }
}

/// Either four moduli, or a contrast `delta` (or `mu` with `delta = mu s^2`)
/// with wave speeds `v`, `v_b`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialConfig {
    pub delta: Option<f64>,
    pub mu: Option<f64>,
    pub v: Option<f64>,
    pub v_b: Option<f64>,
    pub rho: Option<f64>,
    pub rho_b: Option<f64>,
    pub kappa: Option<f64>,
    pub kappa_b: Option<f64>,
}

pub const DEFAULT_DELTA: f64 = 1e-3;

impl MaterialConfig {
    pub fn params(&self, scale: f64) -> Result<MaterialParams> {
        let moduli = [self.rho, self.rho_b, self.kappa, self.kappa_b];
        let given = moduli.iter().filter(|x| x.is_some()).count();
        let m = if given > 0 {
            if given < 4 {
                bail!("give all of rho, rho_b, kappa, kappa_b or none of them");
            }
            if self.delta.is_some() || self.mu.is_some() || self.v.is_some() || self.v_b.is_some() {
                bail!("moduli exclude delta, mu, v and v_b");
            }
            let [rho, rho_b, kappa, kappa_b] = moduli.map(|x| x.unwrap());
            MaterialParams { rho, rho_b, kappa, kappa_b, mu: None }
        } else {
            let v = self.v.unwrap_or(1.0);
            let vb = self.v_b.unwrap_or(v);
            match (self.delta, self.mu) {
                (Some(_), Some(_)) => bail!("give exactly one of delta and mu"),
                (None, Some(mu)) => MaterialParams { mu: Some(mu), ..MaterialParams::from_contrast(mu * scale * scale, v, vb) },
                (d, None) => MaterialParams::from_contrast(d.unwrap_or(DEFAULT_DELTA), v, vb),
            }
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Full,
    Asymptotic,
}

impl From<ModeArg> for Method {
    fn from(m: ModeArg) -> Method {
        match m {
            ModeArg::Full => Method::Full,
            ModeArg::Asymptotic => Method::Asymptotic,
        }
    }
}

/// A uniform `n^3` grid of the Brillouin zone, or a piecewise linear path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub mode: ModeArg,
    pub grid: usize,
    /// Path vertices in units of `pi / s`; replaces the grid when present.
    pub path: Option<Vec<Vec3>>,
    /// Points per path segment, excluding the segment end.
    pub samples: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { mode: ModeArg::Full, grid: 7, path: None, samples: 8 }
    }
}

impl SweepConfig {
    /// Bloch vectors of the unit-cell problem, in sweep order.
    pub fn unit_cell_alphas(&self) -> Result<Vec<BlochVector>> {
        use std::f64::consts::PI;
        match &self.path {
            Some(v) => {
                if v.is_empty() {
                    bail!(UsageError("sweep path is empty".into()));
                }
                if self.samples == 0 {
                    bail!(UsageError("sweep.samples must be positive".into()));
                }
                let mut out = Vec::new();
                for w in v.windows(2) {
                    for i in 0..self.samples {
                        let t = i as f64 / self.samples as f64;
                        out.push(BlochVector::new(std::array::from_fn(|j| PI * (w[0][j] + t * (w[1][j] - w[0][j])))));
                    }
                }
                let last = v[v.len() - 1];
                out.push(BlochVector::new(std::array::from_fn(|j| PI * last[j])));
                Ok(out)
            }
            None => {
                let n = self.grid;
                if n == 0 {
                    bail!(UsageError("sweep.grid must be positive".into()));
                }
                // Cell centres of an n-point periodic grid, ending at pi.
                let axis: Vec<f64> = (0..n).map(|i| -PI + 2.0 * PI * (i + 1) as f64 / n as f64).collect();
                let mut out = Vec::with_capacity(n * n * n);
                for &a in &axis {
                    for &b in &axis {
                        for &c in &axis {
                            out.push(BlochVector::new([a, b, c]));
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Step of the finite-difference Hessian of the capacity.
    pub hessian_step: f64,
    /// Relative agreement of the FD Hessian with `-2 |D| lambda / v_b^2`.
    pub hessian_rel: f64,
    /// `|omega_full - omega_asym| / omega <= asymptotic_factor * delta`.
    pub asymptotic_factor: f64,
    pub fd_rel: f64,
    pub pwe_rel: f64,
    pub symmetry: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { hessian_step: 1e-2, hessian_rel: 1e-3, asymptotic_factor: 5.0, fd_rel: 0.02, pwe_rel: 0.03, symmetry: 1e-8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapConfig {
    pub omega: Option<f64>,
    /// `omega = ratio * omega*`.
    pub ratio: Option<f64>,
    /// Directions sampled on the isofrequency ellipsoid.
    pub samples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub alpha_tilde: Vec3,
    /// Probe line, in physical coordinates.
    pub start: Vec3,
    pub end: Vec3,
    pub points: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig { alpha_tilde: [0.0; 3], start: [0.0; 3], end: [2.0, 0.0, 0.0], points: 101 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateConfig {
    /// Voxel resolutions of the finite-difference capacity, extrapolated linearly in `1/m`.
    pub fd_resolutions: [usize; 2],
    pub pwe_cutoff: usize,
    /// Capacities on this `n^3` grid must not exceed the corner value.
    pub grid: usize,
    /// Fault injection: flips the sign of the effective tensor before checking it.
    pub negate_lambda: bool,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        ValidateConfig { fd_resolutions: [48, 96], pwe_cutoff: 8, grid: 3, negate_lambda: false }
    }
}

/// Bad invocation rather than a failed computation (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        Ok(toml::from_str(text).map_err(|e| UsageError(e.to_string()))?)
    }

    pub fn scale(&self) -> Result<f64> {
        let s = self.scale.unwrap_or(1.0);
        if !(s > 0.0 && s <= 1.0) {
            bail!(UsageError(format!("scale must lie in (0, 1], got {s}")));
        }
        Ok(s)
    }

    pub fn material(&self) -> Result<MaterialParams> {
        self.material.params(self.scale()?)
    }

    /// SHA-256 of the canonical TOML form, excluding the output directory.
    pub fn hash(&self) -> String {
        let canon = RunConfig { out: None, ..self.clone() };
        let text = toml::to_string(&canon).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Provenance lines shared by every output file.
    pub fn header(&self) -> Result<Vec<(String, String)>> {
        let m = self.material()?;
        let mut mat = format!(
            "rho={} rho_b={} kappa={} kappa_b={} delta={}",
            m.rho,
            m.rho_b,
            m.kappa,
            m.kappa_b,
            m.delta()
        );
        if let Some(mu) = m.mu {
            mat.push_str(&format!(" mu={mu}"));
        }
        Ok(vec![
            ("tool".into(), format!("bubblebloch {VERSION}")),
            ("config_sha256".into(), self.hash()),
            ("geometry".into(), format!("{} scale={}", self.geometry.describe()?, self.scale()?)),
            ("material".into(), mat),
        ])
    }
}
