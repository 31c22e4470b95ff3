//! Quasi-periodic capacity, its expansion at the Brillouin corner, and the
//! effective tensor.

use std::path::PathBuf;

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bloch::MaterialParams;
use crate::error::{Error, Result};
use crate::geometry::{check_symmetry, volume, QuadratureMesh};
use crate::lattice_green::{BlochVector, KernelSpec};
use crate::layer_ops::{
    assemble_corner_terms, assemble_family, solve_density, BoundaryOperator, Discretization, OperatorKind, Wanted,
};
use crate::vec3::{self, Vec3};
use crate::C64;

/// Relative size of an imaginary residue tolerated on a real quantity.
pub const REALNESS_TOL: f64 = 1e-8;

/// Probe directions used for curvature checks.
pub fn probe_directions() -> [Vec3; 5] {
    let r2 = std::f64::consts::FRAC_1_SQRT_2;
    let r3 = 1.0 / 3f64.sqrt();
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [r2, r2, 0.0], [r3, r3, r3]]
}

pub(crate) fn real_part(z: C64, tol: f64) -> Result<f64> {
    if z.im.abs() > tol * z.re.abs().max(f64::MIN_POSITIVE) {
        return Err(Error::NotReal { real: z.re, imag: z.im });
    }
    Ok(z.re)
}

/// `sum_q w_q u_q v_q`, the bilinear surface pairing.
fn pair(w: &[f64], u: &[C64], v: &[C64]) -> C64 {
    w.iter().zip(u).zip(v).map(|((w, a), b)| a * b * *w).sum()
}

/// Single-layer solves on one bubble at `k = 0`.
#[derive(Clone)]
pub struct CapacitySolver {
    pub disc: Discretization,
    /// Lattice period of the cell holding the mesh.
    pub period: f64,
    /// Directory of dumped single-layer operators, keyed by (mesh hash, alpha, k).
    pub cache: Option<PathBuf>,
}

impl CapacitySolver {
    pub fn new(mesh: &QuadratureMesh) -> Result<CapacitySolver> {
        Ok(CapacitySolver { disc: Discretization::new(mesh)?, period: 1.0, cache: None })
    }

    pub fn with_period(mut self, period: f64) -> CapacitySolver {
        self.period = period;
        self
    }

    pub fn with_cache(mut self, dir: Option<PathBuf>) -> CapacitySolver {
        self.cache = dir;
        self
    }

    pub fn mesh(&self) -> &QuadratureMesh {
        &self.disc.mesh
    }

    fn cache_path(&self, spec: &KernelSpec) -> Option<PathBuf> {
        let dir = self.cache.as_ref()?;
        let a = spec.alpha.0;
        let name = format!(
            "S-{:016x}-{:016x}{:016x}{:016x}-{:016x}-{:016x}.op",
            self.disc.mesh.fingerprint(),
            a[0].to_bits(),
            a[1].to_bits(),
            a[2].to_bits(),
            spec.k.to_bits(),
            self.period.to_bits()
        );
        Some(dir.join(name))
    }

    /// `S_D^{alpha,0}`.
    pub fn single_layer(&self, alpha: BlochVector) -> Result<BoundaryOperator> {
        if alpha.scaled(self.period).wrapped().is_zero() {
            return Err(Error::UndefinedAtZeroAlpha);
        }
        let spec = KernelSpec::ewald(alpha, 0.0).with_period(self.period);
        let path = self.cache_path(&spec);
        if let Some(p) = path.as_deref().filter(|p| p.exists()) {
            match BoundaryOperator::read_dump(p) {
                Ok(matrix) if matrix.nrows() == self.disc.mesh.len() => {
                    return Ok(BoundaryOperator {
                        matrix,
                        kind: OperatorKind::SingleLayerQuasi,
                        spec: Some(spec),
                        basis: self.disc.basis.clone(),
                    });
                }
                Ok(_) => log::warn!("ignoring cached operator of wrong size at {}", p.display()),
                Err(e) => log::warn!("ignoring unreadable cached operator {}: {e}", p.display()),
            }
        }
        let fam = assemble_family(&self.disc, &spec, Wanted { single_quasi: true, ..Default::default() })?;
        let op = fam.single_quasi.expect("requested");
        if let Some(p) = path {
            // Write to a temporary name first so concurrent readers never see a partial file.
            let tmp = p.with_extension(format!("tmp{}", std::process::id()));
            if let Err(e) = op.write_dump(&tmp).and_then(|_| std::fs::rename(&tmp, &p).map_err(Error::from)) {
                log::warn!("could not cache operator at {}: {e}", p.display());
            }
        }
        Ok(op)
    }

    /// `(S_D^{alpha,0})^{-1}[1]`.
    pub fn equilibrium_density(&self, alpha: BlochVector) -> Result<Vec<C64>> {
        let s = self.single_layer(alpha)?;
        solve_density(&s, &vec![C64::new(1.0, 0.0); s.len()])
    }

    /// `Cap_{D,alpha} = -int (S_D^{alpha,0})^{-1}[1]`.
    pub fn capacity(&self, alpha: BlochVector) -> Result<f64> {
        self.capacity_from_operator(&self.single_layer(alpha)?)
    }

    /// Capacity from an already assembled `S_D^{alpha,0}` (e.g. read from a dump).
    pub fn capacity_from_operator(&self, single_layer: &BoundaryOperator) -> Result<f64> {
        if single_layer.len() != self.disc.mesh.len() {
            return Err(Error::InvalidParameter("operator does not match the mesh".into()));
        }
        let psi = solve_density(single_layer, &vec![C64::new(1.0, 0.0); single_layer.len()])?;
        let w = &self.disc.mesh.weights;
        let total: C64 = w.iter().zip(&psi).map(|(w, p)| p * *w).sum();
        real_part(-total, REALNESS_TOL)
    }

    /// Capacities at many Bloch vectors, in order.
    pub fn capacities(&self, alphas: &[BlochVector]) -> Vec<Result<f64>> {
        alphas.par_iter().map(|a| self.capacity(*a)).collect()
    }

    /// Terms of the corner expansion of the capacity in direction `alpha_tilde`.
    pub fn curvature_terms(&self, alpha_tilde: Vec3) -> Result<CurvatureTerms> {
        if self.period != 1.0 {
            return Err(Error::InvalidParameter("corner expansion is implemented for the unit cell".into()));
        }
        let mesh = &self.disc.mesh;
        if !check_symmetry(mesh, 1e-10) {
            log::warn!("mesh is not reflection symmetric; the corner expansion assumes it is");
        }
        let a = self.single_layer(BlochVector::star())?;
        let n = a.len();
        let w = &mesh.weights;
        let (odd, second) = assemble_corner_terms(&self.disc, alpha_tilde);
        let psi0 = solve_density(&a, &vec![C64::new(1.0, 0.0); n])?;
        let f: Vec<C64> = mesh.nodes.iter().map(|x| C64::from(vec3::dot(alpha_tilde, *x))).collect();
        let f2: Vec<C64> = f.iter().map(|v| v * v).collect();
        let bpsi = odd.apply(&psi0);
        let g: Vec<C64> = f.iter().zip(&bpsi).map(|(f, b)| f - C64::new(0.0, 1.0) * b).collect();
        let ag = solve_density(&a, &g)?;
        let cpsi = second.apply(&psi0);
        Ok(CurvatureTerms {
            quadratic: real_part(pair(w, &f2, &psi0), 1e-6)?,
            second_order: real_part(pair(w, &psi0, &cpsi), 1e-6)?,
            first_order: real_part(pair(w, &g, &ag), 1e-6)?,
        })
    }

    /// `Lambda_D^{alpha~}`, the coefficient of `eps^2` in `Cap_{D, alpha* + eps alpha~}`.
    pub fn curvature(&self, alpha_tilde: Vec3) -> Result<f64> {
        Ok(self.curvature_terms(alpha_tilde)?.lambda())
    }

    /// `[Cap(alpha* + eps a) + Cap(alpha* - eps a) - 2 Cap(alpha*)] / eps^2`.
    pub fn second_difference(&self, alpha_tilde: Vec3, eps: f64, cap_star: f64) -> Result<f64> {
        let star = BlochVector::star();
        let cp = self.capacity(star.add(vec3::scale(alpha_tilde, eps)))?;
        let cm = self.capacity(star.add(vec3::scale(alpha_tilde, -eps)))?;
        Ok((cp + cm - 2.0 * cap_star) / (eps * eps))
    }

    /// `Lambda` from second differences at `eps` and `eps/2`, combined to
    /// cancel the `eps^2` error. The second difference tends to `2 Lambda`.
    pub fn richardson_curvature(&self, alpha_tilde: Vec3, eps: f64) -> Result<f64> {
        let c0 = self.capacity(BlochVector::star())?;
        let (d1, d2) = rayon::join(
            || self.second_difference(alpha_tilde, eps, c0),
            || self.second_difference(alpha_tilde, 0.5 * eps, c0),
        );
        Ok((4.0 * d2? - d1?) / 6.0)
    }

    /// Central-difference gradient and Hessian of `alpha -> Cap` at the corner.
    pub fn hessian_fd(&self, h: f64) -> Result<(Vec3, [[f64; 3]; 3])> {
        if !(h > 0.0 && h <= 0.05) {
            return Err(Error::InvalidParameter(format!("Hessian step must lie in (0, 0.05], got {h}")));
        }
        let star = BlochVector::star();
        let mut shifts: Vec<Vec3> = vec![[0.0; 3]];
        for i in 0..3 {
            let mut e = [0.0; 3];
            e[i] = h;
            shifts.push(e);
            shifts.push(vec3::scale(e, -1.0));
            for j in i + 1..3 {
                for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    let mut d = [0.0; 3];
                    d[i] = si * h;
                    d[j] = sj * h;
                    shifts.push(d);
                }
            }
        }
        let caps: Vec<f64> = shifts
            .par_iter()
            .map(|d| self.capacity(star.add(*d)))
            .collect::<Result<Vec<_>>>()?;
        let at = |d: Vec3| -> f64 {
            let k = shifts.iter().position(|s| *s == d).expect("shift evaluated");
            caps[k]
        };
        let c0 = caps[0];
        let mut grad = [0.0; 3];
        let mut hess = [[0.0; 3]; 3];
        for i in 0..3 {
            let mut e = [0.0; 3];
            e[i] = h;
            let (p, m) = (at(e), at(vec3::scale(e, -1.0)));
            grad[i] = (p - m) / (2.0 * h);
            hess[i][i] = (p + m - 2.0 * c0) / (h * h);
            for j in i + 1..3 {
                let mut d = [0.0; 3];
                let mut v = 0.0;
                for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    d[i] = si * h;
                    d[j] = sj * h;
                    v += si * sj * at(d);
                }
                hess[i][j] = v / (4.0 * h * h);
                hess[j][i] = hess[i][j];
            }
        }
        Ok((grad, hess))
    }
}

/// The three pairings in the corner expansion of the capacity.
///
/// With `A = S_D^{alpha*,0}`, `psi0 = A^{-1}[1]`, `f = alpha~.x` and
/// `g = f - i S_odd[psi0]`:
/// `Lambda = <f^2, psi0> + <psi0, S_1 psi0> - <g, A^{-1} g>`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureTerms {
    /// `<f^2, psi0>`
    pub quadratic: f64,
    /// `<psi0, S_1 psi0>`
    pub second_order: f64,
    /// `<g, A^{-1} g>`
    pub first_order: f64,
}

impl CurvatureTerms {
    pub fn lambda(&self) -> f64 {
        self.quadratic + self.second_order - self.first_order
    }

    /// The expression obtained when the first-order kernel term is dropped
    /// and the `S_1` term enters with a minus sign: `<f^2, psi0> - <psi0, S_1 psi0>`.
    pub fn without_first_order(&self) -> f64 {
        self.quadratic - self.second_order
    }
}

/// `Cap_{D,alpha}` for a bubble in the unit cell.
pub fn quasi_capacity(mesh: &QuadratureMesh, alpha: BlochVector) -> Result<f64> {
    CapacitySolver::new(mesh)?.capacity(alpha)
}

/// `Lambda_D^{alpha~}`.
pub fn capacity_curvature(mesh: &QuadratureMesh, alpha_tilde: Vec3) -> Result<f64> {
    CapacitySolver::new(mesh)?.curvature(alpha_tilde)
}

/// Finite-difference Hessian of the capacity at the corner.
pub fn capacity_hessian_fd(mesh: &QuadratureMesh, h: f64) -> Result<[[f64; 3]; 3]> {
    Ok(CapacitySolver::new(mesh)?.hessian_fd(h)?.1)
}

/// Diagnostics attached to an [`EffectiveModel`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelDiagnostics {
    pub mesh_order: usize,
    pub nodes: usize,
    /// `Lambda` along each coordinate axis and each pair sum `e_i + e_j`.
    pub lambda_axes: Vec3,
    pub lambda_pairs: Vec3,
    /// Eigenvalues of `lambda_matrix`, ascending.
    pub eigenvalues: Vec3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda0_residual: Option<f64>,
}

/// Homogenized description of the crystal near the corner frequency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveModel {
    pub cap_at_corner: f64,
    /// `{lambda_ij}`, with `(v_b^2/|D|) Lambda(a) = -sum lambda_ij a_i a_j`.
    pub lambda_matrix: [[f64; 3]; 3],
    pub vb: f64,
    pub cell_volume_bubble: f64,
    /// `v_b^2 Cap_{D,alpha*} / |D|`.
    pub critical_omega_sq_over_delta: f64,
    /// Critical frequency `omega* = sqrt(delta) omega_{M,alpha*}` for the material's delta.
    pub omega_star: f64,
    pub delta: f64,
    #[serde(default)]
    pub lambda0_estimate: Option<f64>,
    pub diagnostics: ModelDiagnostics,
}

impl EffectiveModel {
    /// `sum lambda_ij a_i a_j`.
    pub fn quadratic_form(&self, a: Vec3) -> f64 {
        let l = &self.lambda_matrix;
        (0..3).map(|i| (0..3).map(|j| l[i][j] * a[i] * a[j]).sum::<f64>()).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<EffectiveModel> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Ascending eigenvalues of a real symmetric 3x3 matrix.
pub fn symmetric_eigenvalues(m: &[[f64; 3]; 3]) -> Result<Vec3> {
    let a = Mat::from_fn(3, 3, |i, j| m[i][j]);
    let mut ev = a
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
    ev.sort_by(|a, b| a.total_cmp(b));
    Ok([ev[0], ev[1], ev[2]])
}

/// Builds `{lambda_ij}` by polarization of `Lambda`.
pub fn effective_tensor(mesh: &QuadratureMesh, material: &MaterialParams) -> Result<EffectiveModel> {
    material.validate()?;
    let solver = CapacitySolver::new(mesh)?;
    effective_tensor_with(&solver, material)
}

pub fn effective_tensor_with(solver: &CapacitySolver, material: &MaterialParams) -> Result<EffectiveModel> {
    let mesh = solver.mesh();
    let vb = material.v_b();
    let vol = volume(mesh);
    let cap = solver.capacity(BlochVector::star())?;
    let e = |i: usize| {
        let mut v = [0.0; 3];
        v[i] = 1.0;
        v
    };
    let dirs: Vec<Vec3> = (0..3)
        .map(e)
        .chain([(0, 1), (0, 2), (1, 2)].iter().map(|&(i, j)| vec3::add(e(i), e(j))))
        .collect();
    let lams: Vec<f64> = dirs.par_iter().map(|d| solver.curvature(*d)).collect::<Result<Vec<_>>>()?;
    let c = -vb * vb / vol;
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        l[i][i] = c * lams[i];
    }
    for (k, &(i, j)) in [(0, 1), (0, 2), (1, 2)].iter().enumerate() {
        let v = c * (lams[3 + k] - lams[i] - lams[j]) / 2.0;
        l[i][j] = v;
        l[j][i] = v;
    }
    let ev = symmetric_eigenvalues(&l)?;
    let scale = ev.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    if ev[0] < -1e-8 * scale {
        return Err(Error::NotPositiveSemiDefinite { min_eig: ev[0] });
    }
    let omega_sq = vb * vb * cap / vol;
    let delta = material.delta();
    Ok(EffectiveModel {
        cap_at_corner: cap,
        lambda_matrix: l,
        vb,
        cell_volume_bubble: vol,
        critical_omega_sq_over_delta: omega_sq,
        omega_star: (delta * omega_sq).sqrt(),
        delta,
        lambda0_estimate: None,
        diagnostics: ModelDiagnostics {
            mesh_order: mesh.param().map(|p| p.order).unwrap_or(0),
            nodes: mesh.len(),
            lambda_axes: [lams[0], lams[1], lams[2]],
            lambda_pairs: [lams[3], lams[4], lams[5]],
            eigenvalues: ev,
            lambda0_residual: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_ellipsoid_mesh, make_sphere_mesh};

    #[test]
    fn corner_capacity_is_real_and_positive() {
        let mesh = make_sphere_mesh(0.25, 8).unwrap();
        let s = CapacitySolver::new(&mesh).unwrap();
        let c = s.capacity(BlochVector::star()).unwrap();
        assert!(c > 0.0 && c.is_finite());
        // Free-space capacity of the sphere is 4 pi R; the lattice raises it.
        assert!(c > 4.0 * std::f64::consts::PI * 0.25, "{c}");
    }

    #[test]
    fn cached_operator_reproduces_capacity() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = make_sphere_mesh(0.25, 4).unwrap();
        let a = BlochVector::new([1.3, -0.4, 2.2]);
        let plain = CapacitySolver::new(&mesh).unwrap().capacity(a).unwrap();
        let s = CapacitySolver::new(&mesh).unwrap().with_cache(Some(dir.path().to_path_buf()));
        let first = s.capacity(a).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        let second = s.capacity(a).unwrap();
        assert_eq!(first.to_bits(), plain.to_bits());
        assert_eq!(second.to_bits(), plain.to_bits());
    }

    #[test]
    fn capacity_undefined_at_zero() {
        let mesh = make_sphere_mesh(0.25, 4).unwrap();
        let s = CapacitySolver::new(&mesh).unwrap();
        assert!(matches!(s.capacity(BlochVector::new([0.0; 3])), Err(Error::UndefinedAtZeroAlpha)));
        assert!(matches!(
            s.capacity(BlochVector::new([2.0 * std::f64::consts::PI, 0.0, 0.0])),
            Err(Error::UndefinedAtZeroAlpha)
        ));
    }

    #[test]
    fn conjugate_bloch_vectors_share_capacity() {
        let mesh = make_ellipsoid_mesh([0.3, 0.2, 0.1], 6).unwrap();
        let s = CapacitySolver::new(&mesh).unwrap();
        let a = BlochVector::new([0.9, -2.1, 1.7]);
        let (p, m) = (s.capacity(a).unwrap(), s.capacity(a.neg()).unwrap());
        assert!((p - m).abs() <= 1e-10 * p, "{p} {m}");
    }

    #[test]
    fn capacity_grows_with_bubble() {
        let small = quasi_capacity(&make_sphere_mesh(0.2, 6).unwrap(), BlochVector::star()).unwrap();
        let large = quasi_capacity(&make_sphere_mesh(0.3, 6).unwrap(), BlochVector::star()).unwrap();
        assert!(large > small);
    }

    #[test]
    fn corner_is_critical_and_curvature_matches_differences() {
        let mesh = make_sphere_mesh(0.25, 8).unwrap();
        let s = CapacitySolver::new(&mesh).unwrap();
        let (grad, hess) = s.hessian_fd(0.02).unwrap();
        assert!(grad.iter().all(|g| g.abs() < 1e-9), "{grad:?}");
        let ev = symmetric_eigenvalues(&hess).unwrap();
        assert!(ev[2] <= 1e-8, "{ev:?}");
        for d in probe_directions() {
            let t = s.curvature_terms(d).unwrap();
            let lam = t.lambda();
            let fd = s.richardson_curvature(d, 0.02).unwrap();
            assert!(lam <= 1e-8);
            assert!((lam - fd).abs() <= 1e-3 * fd.abs(), "{d:?}: {lam} vs {fd} ({t:?})");
            let quad: f64 = (0..3).map(|i| (0..3).map(|j| 0.5 * hess[i][j] * d[i] * d[j]).sum::<f64>()).sum();
            assert!((lam - quad).abs() <= 1e-3 * quad.abs(), "{lam} vs {quad}");
        }
    }

    #[test]
    fn curvature_is_quadratic() {
        let mesh = make_sphere_mesh(0.25, 6).unwrap();
        let s = CapacitySolver::new(&mesh).unwrap();
        assert_eq!(s.curvature([0.0; 3]).unwrap(), 0.0);
        let a = [0.3, -0.2, 0.5];
        let l1 = s.curvature(a).unwrap();
        let l3 = s.curvature(vec3::scale(a, 3.0)).unwrap();
        assert!((l3 - 9.0 * l1).abs() < 1e-10 * l3.abs());
    }

    #[test]
    fn sphere_tensor_is_isotropic() {
        let mesh = make_sphere_mesh(0.25, 8).unwrap();
        let m = effective_tensor(&mesh, &MaterialParams::from_contrast(1e-3, 1.0, 1.0)).unwrap();
        let l = m.lambda_matrix;
        assert!(l[0][0] > 0.0);
        for i in 0..3 {
            assert!((l[i][i] - l[0][0]).abs() < 1e-6 * l[0][0]);
            for j in 0..3 {
                if i != j {
                    assert!(l[i][j].abs() < 1e-6 * l[0][0]);
                }
            }
        }
        let back = EffectiveModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }
}
