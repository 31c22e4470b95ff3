//! Full Bloch eigenvalue problem, Minnaert asymptotics and band sweeps.

use faer::prelude::*;
use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capacity::CapacitySolver;
use crate::error::{Error, Result};
use crate::geometry::{volume, QuadratureMesh};
use crate::lattice_green::{BlochVector, KernelSpec};
use crate::layer_ops::{assemble_family, eval_offsurface_grad, fold_to_bubble, BoundaryOperator, FieldKernel, Wanted};
use crate::vec3::Vec3;
use crate::C64;

/// Densities and bulk moduli of the background and the bubbles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    pub rho: f64,
    pub rho_b: f64,
    pub kappa: f64,
    pub kappa_b: f64,
    /// Constant in `delta = mu s^2` when the cell is scaled.
    #[serde(default)]
    pub mu: Option<f64>,
}

impl MaterialParams {
    /// Background density 1 and the given contrast and wave speeds.
    pub fn from_contrast(delta: f64, v: f64, v_b: f64) -> MaterialParams {
        MaterialParams { rho: 1.0, rho_b: delta, kappa: v * v, kappa_b: delta * v_b * v_b, mu: None }
    }

    /// `delta = mu s^2` with equal wave speeds.
    pub fn scaled(mu: f64, s: f64, v: f64) -> MaterialParams {
        MaterialParams { mu: Some(mu), ..MaterialParams::from_contrast(mu * s * s, v, v) }
    }

    pub fn delta(&self) -> f64 {
        self.rho_b / self.rho
    }

    pub fn v(&self) -> f64 {
        (self.kappa / self.rho).sqrt()
    }

    pub fn v_b(&self) -> f64 {
        (self.kappa_b / self.rho_b).sqrt()
    }

    pub fn k(&self, omega: f64) -> f64 {
        omega / self.v()
    }

    pub fn k_b(&self, omega: f64) -> f64 {
        omega / self.v_b()
    }

    /// Same material with contrast `delta` (bubble modulus adjusted to keep `v_b`).
    pub fn with_delta(&self, delta: f64) -> MaterialParams {
        let vb = self.v_b();
        MaterialParams { rho_b: delta * self.rho, kappa_b: delta * self.rho * vb * vb, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, x) in [("rho", self.rho), ("rho_b", self.rho_b), ("kappa", self.kappa), ("kappa_b", self.kappa_b)] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {x}")));
            }
        }
        let d = self.delta();
        if !(d < 1.0) {
            return Err(Error::InvalidParameter(format!("contrast delta = {d} must lie in (0, 1)")));
        }
        if let Some(mu) = self.mu {
            if !(mu > 0.0) {
                return Err(Error::InvalidParameter(format!("mu must be positive, got {mu}")));
            }
        }
        Ok(())
    }

    /// True when `v = v_b` to relative precision `tol`.
    pub fn equal_speeds(&self, tol: f64) -> bool {
        (self.v() - self.v_b()).abs() <= tol * self.v()
    }
}

/// How a [`BandPoint`] was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Full,
    Asymptotic,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Full => "full",
            Method::Asymptotic => "asymptotic",
        })
    }
}

/// First Bloch eigenvalue at one quasi-momentum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub alpha: BlochVector,
    pub omega: f64,
    /// `sqrt(delta) omega_{M,alpha}`.
    pub omega_minnaert: f64,
    pub method: Method,
    /// `sigma_min / sigma_max` of the transmission system at `omega` (0 for the asymptotic method).
    pub residual: f64,
    pub iterations: usize,
}

/// Largest relative singular-value ratio accepted as an eigenvalue.
pub const EIGEN_THRESHOLD: f64 = 1e-8;
const MAX_ITERATIONS: usize = 50;
const STEP_TOL: f64 = 1e-10;

/// Boundary-integral blocks of the transmission problem at one frequency.
///
/// Densities `phi` (interior, free kernel at `k_b`) and `psi` (exterior,
/// quasi-periodic kernel at `k`) solve
/// `[[S^{k_b}, -S^{alpha,k}], [-1/2 + (K^{k_b})*, -delta (1/2 + (K^{-alpha,k})*)]]`.
pub struct TransmissionSystem {
    pub single_inner: BoundaryOperator,
    pub single_outer: BoundaryOperator,
    pub dipole_inner: BoundaryOperator,
    pub dipole_outer: BoundaryOperator,
    pub delta: f64,
}

impl TransmissionSystem {
    /// `2n x 2n` nodal block matrix.
    pub fn nodal(&self) -> Mat<C64> {
        let n = self.single_inner.len();
        let d = self.delta;
        Mat::from_fn(2 * n, 2 * n, |p, q| {
            let (bp, bq) = (p / n, q / n);
            let (i, j) = (p % n, q % n);
            let eye = if i == j { 0.5 } else { 0.0 };
            match (bp, bq) {
                (0, 0) => self.single_inner.matrix[(i, j)],
                (0, _) => -self.single_outer.matrix[(i, j)],
                (_, 0) => self.dipole_inner.matrix[(i, j)] - eye,
                _ => -(self.dipole_outer.matrix[(i, j)] + eye) * d,
            }
        })
    }

    /// The same system on interpolation coefficients, `2m x 2m`.
    pub fn reduced(&self) -> Mat<C64> {
        let blocks = [&self.single_inner, &self.single_outer, &self.dipole_inner, &self.dipole_outer].map(|b| b.reduced());
        let m = blocks[0].nrows();
        let d = self.delta;
        Mat::from_fn(2 * m, 2 * m, |p, q| {
            let (bp, bq) = (p / m, q / m);
            let (i, j) = (p % m, q % m);
            let eye = if i == j { 0.5 } else { 0.0 };
            match (bp, bq) {
                (0, 0) => blocks[0][(i, j)],
                (0, _) => -blocks[1][(i, j)],
                (_, 0) => blocks[2][(i, j)] - eye,
                _ => -(blocks[3][(i, j)] + eye) * d,
            }
        })
    }
}

fn svd_ratio(a: &Mat<C64>) -> Result<f64> {
    let sv = a.singular_values().map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
    Ok(sv.last().copied().unwrap_or(0.0) / sv[0])
}

/// Fixed probe vectors for the scalar eigenvalue function.
fn probe(m: usize, seed: f64) -> Vec<C64> {
    (0..m).map(|j| C64::from_polar(1.0 + 0.25 * (seed * j as f64).sin(), 0.37 * j as f64 + seed)).collect()
}

/// Assembles and solves the full transmission problem on one bubble.
#[derive(Clone)]
pub struct BlochSolver {
    pub cap: CapacitySolver,
}

impl BlochSolver {
    pub fn new(mesh: &QuadratureMesh) -> Result<BlochSolver> {
        Ok(BlochSolver { cap: CapacitySolver::new(mesh)? })
    }

    /// Solver for a bubble in the cell of period `s` (the mesh must already be scaled).
    pub fn with_period(self, s: f64) -> BlochSolver {
        BlochSolver { cap: self.cap.with_period(s) }
    }

    /// Caches the `k = 0` single-layer operators under `dir`.
    pub fn with_cache(self, dir: Option<std::path::PathBuf>) -> BlochSolver {
        BlochSolver { cap: self.cap.with_cache(dir) }
    }

    pub fn period(&self) -> f64 {
        self.cap.period
    }

    pub fn mesh(&self) -> &QuadratureMesh {
        self.cap.mesh()
    }

    /// Leading-order Minnaert frequency `sqrt(delta v_b^2 Cap_{D,alpha}/|D|)`.
    pub fn minnaert(&self, alpha: BlochVector, material: &MaterialParams) -> Result<BandPoint> {
        material.validate()?;
        let cap = self.cap.capacity(alpha)?;
        let vb = material.v_b();
        let omega = (material.delta() * vb * vb * cap / volume(self.mesh())).sqrt();
        Ok(BandPoint { alpha, omega, omega_minnaert: omega, method: Method::Asymptotic, residual: 0.0, iterations: 0 })
    }

    pub fn transmission(&self, alpha: BlochVector, omega: f64, material: &MaterialParams) -> Result<TransmissionSystem> {
        if !(omega >= 0.0 && omega.is_finite()) {
            return Err(Error::InvalidParameter(format!("frequency must be nonnegative, got {omega}")));
        }
        let disc = &self.cap.disc;
        let (k, kb) = (material.k(omega), material.k_b(omega));
        let outer_spec = KernelSpec::ewald(alpha, k).with_period(self.period());
        let outer = Wanted { single_quasi: true, dipole_quasi: true, ..Default::default() };
        let inner = Wanted { single_free: true, dipole_free: true, ..Default::default() };
        let (fo, fi) = if k == kb {
            let all = assemble_family(disc, &outer_spec, Wanted { single_free: true, dipole_free: true, ..outer })?;
            (all.clone(), all)
        } else {
            let fo = assemble_family(disc, &outer_spec, outer)?;
            let fi = assemble_family(disc, &KernelSpec::ewald(BlochVector::new([0.0; 3]), kb), inner)?;
            (fo, fi)
        };
        Ok(TransmissionSystem {
            single_inner: fi.single_free.expect("requested"),
            single_outer: fo.single_quasi.expect("requested"),
            dipole_inner: fi.dipole_free.expect("requested"),
            dipole_outer: fo.dipole_quasi.expect("requested"),
            delta: material.delta(),
        })
    }

    /// `sigma_min / sigma_max` of the reduced transmission matrix.
    pub fn singular_ratio(&self, alpha: BlochVector, omega: f64, material: &MaterialParams) -> Result<f64> {
        svd_ratio(&self.transmission(alpha, omega, material)?.reduced())
    }

    /// `1 / (v^H A(omega)^{-1} u)`: analytic in `omega` with simple zeros at
    /// the eigenvalues.
    fn eigen_function(&self, alpha: BlochVector, omega: f64, material: &MaterialParams) -> Result<C64> {
        let a = self.transmission(alpha, omega, material)?.reduced();
        let m = a.nrows();
        let (u, v) = (probe(m, 0.71), probe(m, 1.93));
        let lu = a.partial_piv_lu();
        let x = lu.solve(Mat::from_fn(m, 1, |i, _| u[i]));
        let t: C64 = (0..m).map(|i| v[i].conj() * x[(i, 0)]).sum();
        Ok(if t.norm() == 0.0 { C64::new(f64::INFINITY, 0.0) } else { t.inv() })
    }

    /// Secant iteration on the real axis from `w0`, `w1`.
    fn secant(&self, alpha: BlochVector, material: &MaterialParams, mut w0: f64, mut w1: f64) -> Result<(f64, usize)> {
        let mut h0 = self.eigen_function(alpha, w0, material)?;
        let mut h1 = self.eigen_function(alpha, w1, material)?;
        for it in 1..=MAX_ITERATIONS {
            let dh = h1 - h0;
            if dh.norm() == 0.0 || h1.norm() == 0.0 {
                return Ok((w1, it));
            }
            let w2 = (C64::from(w1) - h1 * (w1 - w0) / dh).re;
            if !(w2 > 0.0 && w2.is_finite()) {
                return Err(Error::NoConvergence { iterations: it, omega: w1, residual: h1.norm() });
            }
            if (w2 - w1).abs() <= STEP_TOL * w2 {
                return Ok((w2, it));
            }
            w0 = w1;
            h0 = h1;
            w1 = w2;
            h1 = self.eigen_function(alpha, w1, material)?;
        }
        Err(Error::NoConvergence { iterations: MAX_ITERATIONS, omega: w1, residual: h1.norm() })
    }

    /// First Bloch eigenvalue from the full system.
    ///
    /// Starts from `guess` (default: the Minnaert frequency). If the local
    /// iteration fails, the smallest singular value is scanned over
    /// `[0.5, 1.5] guess` and the iteration restarted at its minimum.
    pub fn solve(&self, alpha: BlochVector, material: &MaterialParams, guess: Option<f64>) -> Result<BandPoint> {
        material.validate()?;
        let asym = self.minnaert(alpha, material)?;
        let g = guess.unwrap_or(asym.omega);
        if !(g > 0.0) {
            return Err(Error::InvalidParameter(format!("frequency guess must be positive, got {g}")));
        }
        let attempt = self.secant(alpha, material, g, g * (1.0 - 1e-3));
        let (omega, iterations) = match attempt {
            Ok(r) => r,
            Err(first) => {
                log::warn!("secant iteration failed at alpha = {:?}: {first}; scanning", alpha.0);
                let grid: Vec<f64> = (0..21).map(|i| g * (0.5 + i as f64 / 20.0)).collect();
                let ratios: Vec<f64> = grid
                    .iter()
                    .map(|w| self.singular_ratio(alpha, *w, material))
                    .collect::<Result<Vec<_>>>()?;
                let best = (0..grid.len()).min_by(|&i, &j| ratios[i].total_cmp(&ratios[j])).unwrap();
                let w = grid[best];
                self.secant(alpha, material, w, w * (1.0 + 1e-3))?
            }
        };
        let residual = self.singular_ratio(alpha, omega, material)?;
        if !(residual <= EIGEN_THRESHOLD) {
            return Err(Error::NoConvergence { iterations, omega, residual });
        }
        Ok(BandPoint { alpha, omega, omega_minnaert: asym.omega, method: Method::Full, residual, iterations })
    }

    /// Eigenvalue and densities of the first Bloch mode.
    pub fn mode(&self, alpha: BlochVector, material: &MaterialParams, guess: Option<f64>) -> Result<BlochMode> {
        let point = self.solve(alpha, material, guess)?;
        let sys = self.transmission(alpha, point.omega, material)?;
        let a = sys.reduced();
        let m = a.nrows() / 2;
        let svd = a.svd().map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
        let v = svd.V();
        let last = 2 * m - 1;
        let basis = &sys.single_inner.basis;
        let phi = basis.values(&(0..m).map(|i| v[(i, last)]).collect::<Vec<_>>());
        let psi = basis.values(&(0..m).map(|i| v[(m + i, last)]).collect::<Vec<_>>());
        // Normalize so that the mean of u over the bubble boundary is 1.
        let trace = sys.single_inner.apply(&phi);
        let w = &self.mesh().weights;
        let mean: C64 = trace.iter().zip(w).map(|(u, w)| u * *w).sum::<C64>() / self.mesh().area();
        if mean.norm() == 0.0 {
            return Err(Error::LinearAlgebra("eigenfunction has zero boundary mean".into()));
        }
        let s = mean.inv();
        Ok(BlochMode {
            point,
            material: *material,
            period: self.period(),
            phi: phi.iter().map(|z| z * s).collect(),
            psi: psi.iter().map(|z| z * s).collect(),
        })
    }

    /// `S_D^{alpha,omega/v}[(S_D^{alpha,0})^{-1}[1]]` at the given points.
    pub fn approximate_eigenfunction(
        &self,
        alpha: BlochVector,
        omega: f64,
        material: &MaterialParams,
        points: &[Vec3],
    ) -> Result<Vec<C64>> {
        let psi = self.cap.equilibrium_density(alpha)?;
        let spec = KernelSpec::ewald(alpha, material.k(omega)).with_period(self.period());
        let fk = FieldKernel::quasi(&spec)?;
        points
            .par_iter()
            .map(|x| match eval_offsurface_grad(self.mesh(), &psi, &fk, *x) {
                Ok((v, _)) => Ok(v),
                // The single layer is continuous and equals the boundary data there.
                Err(Error::OnSurface) => Ok(fold_to_bubble(self.mesh(), alpha.0, self.period(), *x).1),
                Err(e) => Err(e),
            })
            .collect()
    }

    /// `S(x) = S_D^{alpha*,0}[(S_D^{alpha*,0})^{-1}[1]](x)`, with `alpha*` the
    /// zone corner of this cell.
    pub fn s_field(&self, points: &[Vec3]) -> Result<Vec<C64>> {
        let alpha = BlochVector::star().scaled(1.0 / self.period());
        let psi = self.cap.equilibrium_density(alpha)?;
        let spec = KernelSpec::ewald(alpha, 0.0).with_period(self.period());
        let fk = FieldKernel::quasi(&spec)?;
        points
            .par_iter()
            .map(|x| match eval_offsurface_grad(self.mesh(), &psi, &fk, *x) {
                Ok((v, _)) => Ok(v),
                // The single layer is continuous and equals the boundary data there.
                Err(Error::OnSurface) => Ok(fold_to_bubble(self.mesh(), alpha.0, self.period(), *x).1),
                Err(e) => Err(e),
            })
            .collect()
    }

    /// Band points along a path, in path order. Failures are kept per point.
    pub fn sweep(&self, path: &[BlochVector], material: &MaterialParams, method: Method) -> Vec<Result<BandPoint>> {
        path.par_iter()
            .map(|a| match method {
                Method::Asymptotic => self.minnaert(*a, material),
                Method::Full => self.solve(*a, material, None),
            })
            .collect()
    }
}

/// Which side of the bubble boundary a field is evaluated on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Inside,
    Outside,
    Auto,
}

/// First Bloch mode: `u = S^{k_b}[phi]` in the bubble, `u = S^{alpha,k}[psi]` outside.
#[derive(Clone, Debug)]
pub struct BlochMode {
    pub point: BandPoint,
    pub material: MaterialParams,
    pub period: f64,
    pub phi: Vec<C64>,
    pub psi: Vec<C64>,
}

impl BlochMode {
    /// Field value and gradient at `x`.
    pub fn field_grad(&self, mesh: &QuadratureMesh, x: Vec3, side: Side) -> Result<(C64, [C64; 3])> {
        let alpha = self.point.alpha;
        let omega = self.point.omega;
        let (x0, phase) = fold_to_bubble(mesh, alpha.0, self.period, x);
        let inside = match side {
            Side::Inside => true,
            Side::Outside => false,
            Side::Auto => mesh.contains(x0)?,
        };
        if inside {
            let fk = FieldKernel::Free { k: self.material.k_b(omega) };
            let (v, g) = eval_offsurface_grad(mesh, &self.phi, &fk, x0)?;
            Ok((v * phase, g.map(|c| c * phase)))
        } else {
            let spec = KernelSpec::ewald(alpha, self.material.k(omega)).with_period(self.period);
            eval_offsurface_grad(mesh, &self.psi, &FieldKernel::quasi(&spec)?, x)
        }
    }

    pub fn eval(&self, mesh: &QuadratureMesh, points: &[Vec3]) -> Result<Vec<C64>> {
        points.par_iter().map(|x| Ok(self.field_grad(mesh, *x, Side::Auto)?.0)).collect()
    }
}

/// One row of the band CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub omega: f64,
    pub omega_minnaert: f64,
    pub method: Method,
    pub residual: f64,
}

impl From<&BandPoint> for BandRow {
    fn from(p: &BandPoint) -> BandRow {
        BandRow {
            alpha1: p.alpha.0[0],
            alpha2: p.alpha.0[1],
            alpha3: p.alpha.0[2],
            omega: p.omega,
            omega_minnaert: p.omega_minnaert,
            method: p.method,
            residual: p.residual,
        }
    }
}

/// Writes band points as CSV with header
/// `alpha1,alpha2,alpha3,omega,omega_minnaert,method,residual`.
pub fn write_band_csv<W: std::io::Write>(out: W, points: &[BandPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(BandRow::from(p)).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads band rows; lines starting with `#` are skipped.
pub fn read_band_csv<R: std::io::Read>(input: R) -> Result<Vec<BandRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    r.deserialize().map(|row| row.map_err(|e| Error::Parse(e.to_string()))).collect()
}

/// `minnaert_omega`: the asymptotic first band at `alpha`.
pub fn minnaert_omega(mesh: &QuadratureMesh, alpha: BlochVector, material: &MaterialParams) -> Result<BandPoint> {
    BlochSolver::new(mesh)?.minnaert(alpha, material)
}

pub fn assemble_transmission(
    mesh: &QuadratureMesh,
    alpha: BlochVector,
    omega: f64,
    material: &MaterialParams,
) -> Result<TransmissionSystem> {
    BlochSolver::new(mesh)?.transmission(alpha, omega, material)
}

pub fn solve_bloch_eig(
    mesh: &QuadratureMesh,
    alpha: BlochVector,
    material: &MaterialParams,
    guess: Option<f64>,
) -> Result<BandPoint> {
    BlochSolver::new(mesh)?.solve(alpha, material, guess)
}

pub fn band_sweep(
    mesh: &QuadratureMesh,
    path: &[BlochVector],
    material: &MaterialParams,
    method: Method,
) -> Result<Vec<Result<BandPoint>>> {
    Ok(BlochSolver::new(mesh)?.sweep(path, material, method))
}

pub fn eval_s_field(mesh: &QuadratureMesh, points: &[Vec3]) -> Result<Vec<C64>> {
    BlochSolver::new(mesh)?.s_field(points)
}

/// Approximate first Bloch mode at the full eigenvalue `omega_1^alpha`.
pub fn eval_bloch_eigenfunction(
    mesh: &QuadratureMesh,
    alpha: BlochVector,
    material: &MaterialParams,
    points: &[Vec3],
) -> Result<Vec<C64>> {
    let solver = BlochSolver::new(mesh)?;
    let omega = solver.solve(alpha, material, None)?.omega;
    solver.approximate_eigenfunction(alpha, omega, material, points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_sphere_mesh;
    use crate::vec3;
    use std::sync::OnceLock;

    fn solver() -> &'static BlochSolver {
        static S: OnceLock<BlochSolver> = OnceLock::new();
        S.get_or_init(|| BlochSolver::new(&make_sphere_mesh(0.25, 6).unwrap()).unwrap())
    }

    fn generic() -> BlochVector {
        BlochVector::new([1.1, -0.7, 2.3])
    }

    #[test]
    fn minnaert_square_root_law() {
        let s = solver();
        let m = MaterialParams::from_contrast(1e-3, 1.0, 1.0);
        let a = s.minnaert(generic(), &m).unwrap().omega;
        let b = s.minnaert(generic(), &m.with_delta(4e-3)).unwrap().omega;
        assert!((b / a - 2.0).abs() < 1e-12);
        let star = s.minnaert(BlochVector::star(), &m).unwrap().omega;
        let ratio = (s.cap.capacity(generic()).unwrap() / s.cap.capacity(BlochVector::star()).unwrap()).sqrt();
        assert!((a / star - ratio).abs() < 1e-12);
    }

    #[test]
    fn minnaert_regression_anchor() {
        let mesh = make_sphere_mesh(0.25, 8).unwrap();
        let m = MaterialParams::from_contrast(1e-3, 1.0, 1.0);
        let w = minnaert_omega(&mesh, BlochVector::star(), &m).unwrap().omega;
        assert!((w - 0.2919661706747365).abs() < 1e-9, "{w}");
    }

    #[test]
    fn material_validation() {
        assert!(MaterialParams::from_contrast(1.5, 1.0, 1.0).validate().is_err());
        assert!(MaterialParams::from_contrast(-1e-3, 1.0, 1.0).validate().is_err());
        let m = MaterialParams::scaled(2.0, 0.5, 1.0);
        assert!((m.delta() - 0.5).abs() < 1e-15 && m.equal_speeds(1e-14));
    }

    #[test]
    fn full_solve_satisfies_transmission_conditions() {
        let s = &BlochSolver::new(&make_sphere_mesh(0.25, 8).unwrap()).unwrap();
        let m = MaterialParams::from_contrast(1e-3, 1.0, 1.0);
        let mode = s.mode(BlochVector::star(), &m, None).unwrap();
        assert!(mode.point.residual <= EIGEN_THRESHOLD);
        assert!(mode.point.omega > 0.0);
        let mesh = s.mesh();
        let t = 1e-6;
        for p in [0, 7, 23, 40, 61, 100] {
            let (x, nu) = (mesh.nodes[p], mesh.normals[p]);
            let (ui, gi) = mode.field_grad(mesh, vec3::add(x, vec3::scale(nu, -t)), Side::Inside).unwrap();
            let (uo, go) = mode.field_grad(mesh, vec3::add(x, vec3::scale(nu, t)), Side::Outside).unwrap();
            assert!((ui - uo).norm() <= 1e-4 * ui.norm(), "continuity at {p}: {ui} vs {uo}");
            let dn = |g: [C64; 3]| g[0] * nu[0] + g[1] * nu[1] + g[2] * nu[2];
            let flux_o = dn(go) / m.rho;
            let flux_i = dn(gi) / m.rho_b;
            assert!((flux_o - flux_i).norm() <= 1e-4 * flux_o.norm(), "flux at {p}: {flux_o} vs {flux_i}");
        }
    }

    #[test]
    fn system_is_regular_away_from_the_band() {
        let s = solver();
        let m = MaterialParams::from_contrast(1e-3, 1.0, 1.0);
        let w = s.solve(BlochVector::star(), &m, None).unwrap().omega;
        let r = s.singular_ratio(BlochVector::star(), w / 10.0, &m).unwrap();
        assert!(r > 1e-4, "{r}");
    }

    #[test]
    fn time_reversal_and_periodicity() {
        let s = solver();
        let m = MaterialParams::from_contrast(1e-3, 1.0, 1.0);
        let a = s.solve(generic(), &m, None).unwrap().omega;
        let b = s.solve(generic().neg(), &m, None).unwrap().omega;
        let c = s.solve(generic().add([2.0 * std::f64::consts::PI; 3]), &m, None).unwrap().omega;
        assert!((a - b).abs() <= 1e-8 * a, "{a} {b}");
        assert!((a - c).abs() <= 1e-8 * a, "{a} {c}");
    }

    #[test]
    fn second_order_consistency_in_contrast() {
        let s = solver();
        let base = MaterialParams::from_contrast(1e-2, 1.0, 1.0);
        let c: Vec<f64> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&d| {
                let p = s.solve(BlochVector::star(), &base.with_delta(d), None).unwrap();
                (p.omega.powi(2) - p.omega_minnaert.powi(2)).abs() / (d * d)
            })
            .collect();
        for w in c.windows(2) {
            let r = w[0] / w[1];
            assert!(r > 0.5 && r < 2.0, "{c:?}");
        }
    }

    #[test]
    fn rescaled_cell_scales_the_band_exactly() {
        let mesh = make_sphere_mesh(0.25, 6).unwrap();
        let m = MaterialParams::from_contrast(1e-3, 1.0, 1.0);
        let w1 = solver().solve(generic(), &m, None).unwrap().omega;
        let s = 0.5;
        let scaled = BlochSolver::new(&mesh.scaled(s)).unwrap().with_period(s);
        let ws = scaled.solve(generic().scaled(1.0 / s), &m, None).unwrap().omega;
        assert!((ws * s - w1).abs() <= 1e-10 * w1, "{} {w1}", ws * s);
    }

    #[test]
    fn sweep_toward_corner_increases() {
        let s = solver();
        let m = MaterialParams::from_contrast(1e-3, 1.0, 1.0);
        let path: Vec<BlochVector> =
            (0..6).map(|i| BlochVector::new([1e-3 + (std::f64::consts::PI - 1e-3) * i as f64 / 5.0; 3])).collect();
        let pts: Vec<BandPoint> = s.sweep(&path, &m, Method::Asymptotic).into_iter().map(|p| p.unwrap()).collect();
        for w in pts.windows(2) {
            assert!(w[1].omega > w[0].omega);
        }
        assert!(s.sweep(&[BlochVector::new([0.0; 3])], &m, Method::Asymptotic)[0].is_err());
    }

    #[test]
    fn s_field_boundary_values() {
        let s = solver();
        let mesh = s.mesh();
        // The normal derivative jumps across the boundary, so S - 1 is linear in the offset.
        let off = |t: f64| -> Vec<C64> {
            let near: Vec<Vec3> =
                [0, 11, 35, 50].iter().map(|&p| vec3::add(mesh.nodes[p], vec3::scale(mesh.normals[p], t))).collect();
            s.s_field(&near).unwrap()
        };
        let (a, b) = (off(1e-3), off(1e-4));
        for (va, vb) in a.iter().zip(&b) {
            assert!((va - 1.0).norm() < 1e-2, "{va}");
            assert!((vb - 1.0).norm() < 1e-3, "{vb}");
        }
        // On the surface of this bubble and of its neighbour across x1 = 1/2.
        let on: Vec<Vec3> = [3, 17].iter().flat_map(|&p| [mesh.nodes[p], vec3::add(mesh.nodes[p], [1.0, 0.0, 0.0])]).collect();
        let v = s.s_field(&on).unwrap();
        for (k, z) in v.iter().enumerate() {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            assert!((z - sign).norm() < 1e-3, "{z}");
        }
        let faces = [[0.5, 0.0, 0.0], [0.0, -0.5, 0.0], [0.0, 0.0, 0.5], [-0.5, 0.0, 0.0]];
        for v in s.s_field(&faces).unwrap() {
            assert!(v.norm() <= 1e-3, "{v}");
        }
    }

    #[test]
    fn s_field_is_harmonic_off_the_bubble() {
        let s = solver();
        let x = [0.36, 0.12, -0.05];
        let h = 1e-2;
        let mut pts = vec![x];
        for j in 0..3 {
            for sg in [1.0, -1.0] {
                let mut y = x;
                y[j] += sg * h;
                pts.push(y);
            }
        }
        let v = s.s_field(&pts).unwrap();
        let lap = (v[1..].iter().sum::<C64>() - v[0] * 6.0) / (h * h);
        // O(h^2) stencil error against second derivatives of size |S| / dist^2.
        assert!(lap.norm() < 1e-2, "{lap}");
    }

    #[test]
    fn approximate_mode_is_quasi_periodic() {
        let s = solver();
        let m = MaterialParams::from_contrast(1e-3, 1.0, 1.0);
        let a = generic();
        let w = s.minnaert(a, &m).unwrap().omega;
        let x = [0.31, -0.2, 0.1];
        let v = s.approximate_eigenfunction(a, w, &m, &[x, vec3::add(x, [1.0, 0.0, 0.0])]).unwrap();
        let want = v[0] * C64::from_polar(1.0, a.0[0]);
        assert!((v[1] - want).norm() < 1e-10 * v[0].norm());
    }

    #[test]
    fn approximate_mode_tends_to_static_field() {
        let s = solver();
        let a = BlochVector::star();
        let pts = [[0.4, 0.1, 0.0], [0.05, 0.05, 0.0], [0.3, 0.3, 0.3]];
        let base = s.approximate_eigenfunction(a, 0.0, &MaterialParams::from_contrast(1e-3, 1.0, 1.0), &pts).unwrap();
        let errs: Vec<f64> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&d| {
                let m = MaterialParams::from_contrast(d, 1.0, 1.0);
                let w = s.minnaert(a, &m).unwrap().omega;
                let v = s.approximate_eigenfunction(a, w, &m, &pts).unwrap();
                v.iter().zip(&base).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
            })
            .collect();
        for e in errs.windows(2) {
            let slope = (e[0] / e[1]).log10();
            assert!(slope >= 0.5, "{errs:?}");
        }
        // Inside the bubble the static field is 1.
        assert!((base[1] - 1.0).norm() < 1e-6);
    }

    #[test]
    fn mode_is_nearly_constant_in_the_bubble() {
        let s = solver();
        let m = MaterialParams::from_contrast(1e-3, 1.0, 1.0);
        let mode = s.mode(BlochVector::star(), &m, None).unwrap();
        let pts = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.05], [-0.12, 0.08, 0.0], [0.0, -0.1, -0.1]];
        let v = mode.eval(s.mesh(), &pts).unwrap();
        let spread = v.iter().map(|z| (z - 1.0).norm()).fold(0.0, f64::max);
        assert!(spread <= m.delta().sqrt(), "{spread}");
    }

    #[test]
    fn band_csv_round_trip() {
        let pts = vec![
            BandPoint { alpha: generic(), omega: 0.25, omega_minnaert: 0.26, method: Method::Full, residual: 1e-12, iterations: 4 },
            BandPoint {
                alpha: BlochVector::star(),
                omega: 0.2919661706747365,
                omega_minnaert: 0.2919661706747365,
                method: Method::Asymptotic,
                residual: 0.0,
                iterations: 0,
            },
        ];
        let mut buf = Vec::new();
        write_band_csv(&mut buf, &pts).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("alpha1,alpha2,alpha3,omega,omega_minnaert,method,residual\n"));
        let rows = read_band_csv(&buf[..]).unwrap();
        assert_eq!(rows, pts.iter().map(BandRow::from).collect::<Vec<_>>());
        let mut commented = b"# tool: test\n".to_vec();
        commented.extend_from_slice(&buf);
        assert_eq!(read_band_csv(&commented[..]).unwrap(), rows);
    }
}
