//! Rotated polar quadrature for weakly singular and nearly singular surface integrals.
//!
//! For a target on (or near) the surface, a product rule in local polar
//! angles is placed with its pole at the target's unit-sphere preimage. The
//! `sin(theta')` factor of the polar measure cancels the `1/r` singularity.
//! Densities known at the mesh nodes are carried to the rotated nodes by
//! spherical-harmonic hyperinterpolation of degree `order - 1`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use faer::Mat;
use rayon::prelude::*;

use crate::error::Result;
use crate::geometry::{Parameterization, QuadratureMesh};
use crate::quadrature::gauss_legendre_on;
use crate::vec3::{self, Vec3};

/// Kernels whose surface integrals receive the corrected rule.
///
/// With `d = x - y`, `r = |d|` and `nu` the normal at the target:
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Correction {
    /// `1/r`
    InvR,
    /// `r`
    R,
    /// `r^3`
    R3,
    /// `(nu.d)/r^3`
    DipoleM3,
    /// `(nu.d)/r`
    DipoleM1,
    /// `(nu.d) r`
    Dipole1,
    /// `d_i/r`
    Dir(usize),
    /// `d_i d_j/r`, `i <= j`
    DirDir(usize, usize),
}

impl Correction {
    pub const COUNT: usize = 15;

    fn index(self) -> usize {
        match self {
            Correction::InvR => 0,
            Correction::R => 1,
            Correction::R3 => 2,
            Correction::DipoleM3 => 3,
            Correction::DipoleM1 => 4,
            Correction::Dipole1 => 5,
            Correction::Dir(i) => 6 + i,
            Correction::DirDir(i, j) => {
                let (i, j) = if i <= j { (i, j) } else { (j, i) };
                9 + match (i, j) {
                    (0, 0) => 0,
                    (0, 1) => 1,
                    (0, 2) => 2,
                    (1, 1) => 3,
                    (1, 2) => 4,
                    _ => 5,
                }
            }
        }
    }

    /// All fifteen kernels evaluated at one source point.
    #[inline]
    fn evaluate_all(d: Vec3, nu: Vec3, out: &mut [f64; 15]) {
        let r = vec3::norm(d);
        let ir = 1.0 / r;
        let nd = vec3::dot(nu, d);
        out[0] = ir;
        out[1] = r;
        out[2] = r * r * r;
        out[3] = nd * ir * ir * ir;
        out[4] = nd * ir;
        out[5] = nd * r;
        out[6] = d[0] * ir;
        out[7] = d[1] * ir;
        out[8] = d[2] * ir;
        out[9] = d[0] * d[0] * ir;
        out[10] = d[0] * d[1] * ir;
        out[11] = d[0] * d[2] * ir;
        out[12] = d[1] * d[1] * ir;
        out[13] = d[1] * d[2] * ir;
        out[14] = d[2] * d[2] * ir;
    }
}

/// Size of the rotated product rule relative to the mesh order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LocalRule {
    pub n_theta: usize,
    pub n_phi: usize,
}

impl LocalRule {
    pub fn for_order(order: usize) -> LocalRule {
        LocalRule { n_theta: order + 4, n_phi: 2 * order + 4 }
    }
}

/// `sum_{l<=N} (2l+1)/(4 pi) P_l(u)`.
#[inline]
pub(crate) fn reproducing_kernel(degree: usize, u: f64) -> f64 {
    let mut p0 = 1.0;
    let mut p1 = u;
    let mut acc = 1.0 + if degree >= 1 { 3.0 * u } else { 0.0 };
    for l in 2..=degree {
        let lf = l as f64;
        let p2 = ((2.0 * lf - 1.0) * u * p1 - (lf - 1.0) * p0) / lf;
        acc += (2.0 * lf + 1.0) * p2;
        p0 = p1;
        p1 = p2;
    }
    acc / (4.0 * PI)
}

/// Rows of the hyperinterpolation operator at the given unit vectors.
fn interpolation_rows(param: &Parameterization, points: &[Vec3]) -> Mat<f64> {
    let n = param.unit_nodes.len();
    let deg = param.degree();
    Mat::from_fn(points.len(), n, |i, q| {
        param.unit_weights[q] * reproducing_kernel(deg, vec3::dot(points[i], param.unit_nodes[q]))
    })
}

/// Interpolates nodal values to arbitrary unit-sphere points.
pub fn interpolate(param: &Parameterization, values: &[f64], points: &[Vec3]) -> Vec<f64> {
    let rows = interpolation_rows(param, points);
    (0..points.len()).map(|i| (0..values.len()).map(|q| rows[(i, q)] * values[q]).sum()).collect()
}

/// Frame whose third column is `pole`; stable for either hemisphere.
fn polar_frame(pole: Vec3) -> [[f64; 3]; 3] {
    if pole[2] >= 0.0 {
        vec3::rotation_between([0.0, 0.0, 1.0], pole)
    } else {
        // Rotate the south pole instead and flip the local z axis.
        let m = vec3::rotation_between([0.0, 0.0, -1.0], pole);
        [[m[0][0], m[0][1], -m[0][2]], [m[1][0], m[1][1], -m[1][2]], [m[2][0], m[2][1], -m[2][2]]]
    }
}

/// Quadrature nodes on the surface, clustered around one parameter point.
#[derive(Clone, Debug)]
pub struct PolarRule {
    /// Physical source points.
    pub points: Vec<Vec3>,
    /// Unit-sphere preimages.
    pub unit_points: Vec<Vec3>,
    /// Surface-measure weights (Jacobian included).
    pub weights: Vec<f64>,
    /// Outward normals at the source points.
    pub normals: Vec<Vec3>,
}

impl PolarRule {
    /// Product rule from local colatitude nodes/weights (measure `sin` included
    /// by the caller) and `n_phi` equispaced longitudes.
    fn build(param: &Parameterization, pole: Vec3, theta: &[f64], theta_w: &[f64], n_phi: usize) -> PolarRule {
        let frame = polar_frame(pole);
        let dphi = 2.0 * PI / n_phi as f64;
        let cap = theta.len() * n_phi;
        let mut rule = PolarRule {
            points: Vec::with_capacity(cap),
            unit_points: Vec::with_capacity(cap),
            weights: Vec::with_capacity(cap),
            normals: Vec::with_capacity(cap),
        };
        for (th, tw) in theta.iter().zip(theta_w) {
            let (st, ct) = th.sin_cos();
            for j in 0..n_phi {
                let ph = (j as f64 + 0.5) * dphi;
                let local = [st * ph.cos(), st * ph.sin(), ct];
                let t = vec3::normalize(vec3::mat_vec(&frame, local));
                rule.points.push(param.map.point(t));
                rule.normals.push(param.map.normal(t));
                rule.weights.push(tw * st * dphi * param.map.jacobian(t));
                rule.unit_points.push(t);
            }
        }
        rule
    }

    /// Singular rule with the pole at the node's own preimage.
    pub fn on_surface(param: &Parameterization, pole: Vec3, local: LocalRule) -> PolarRule {
        let (t, w) = gauss_legendre_on(local.n_theta, 0.0, PI);
        PolarRule::build(param, pole, &t, &w, local.n_phi)
    }

    /// Rule graded geometrically toward the pole, for targets at parameter
    /// distance `gap` (radians) from the surface.
    pub fn graded(param: &Parameterization, pole: Vec3, gap: f64, local: LocalRule) -> PolarRule {
        let per_panel = 10;
        let mut breaks = vec![0.0];
        let mut b = (gap / 8.0).max(1e-12);
        while b < PI / 2.0 {
            breaks.push(b);
            b *= 2.0;
        }
        breaks.push(PI);
        let mut t = Vec::new();
        let mut w = Vec::new();
        for win in breaks.windows(2) {
            let nodes = if win[1] == PI { local.n_theta.max(per_panel) } else { per_panel };
            let (pt, pw) = gauss_legendre_on(nodes, win[0], win[1]);
            t.extend(pt);
            w.extend(pw);
        }
        PolarRule::build(param, pole, &t, &w, local.n_phi + 8)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Hyperinterpolation rows mapping mesh values to this rule's points.
    pub fn interpolation(&self, param: &Parameterization) -> Mat<f64> {
        interpolation_rows(param, &self.unit_points)
    }
}

/// Corrected quadrature matrices for the fifteen model kernels on one mesh.
#[derive(Debug)]
pub struct SingularCorrections {
    n: usize,
    mats: Vec<Mat<f64>>,
}

impl SingularCorrections {
    pub fn build(mesh: &QuadratureMesh, local: LocalRule) -> Result<SingularCorrections> {
        let param = mesh.param()?;
        let n = mesh.len();
        let rows: Vec<Vec<Vec<f64>>> = (0..n)
            .into_par_iter()
            .map(|p| {
                let rule = PolarRule::on_surface(param, param.unit_nodes[p], local);
                let interp = rule.interpolation(param);
                let m = rule.len();
                let x = mesh.nodes[p];
                let nu = mesh.normals[p];
                let mut kern = Mat::<f64>::zeros(Correction::COUNT, m);
                let mut buf = [0.0; 15];
                for i in 0..m {
                    Correction::evaluate_all(vec3::sub(x, rule.points[i]), nu, &mut buf);
                    for (c, v) in buf.iter().enumerate() {
                        kern[(c, i)] = v * rule.weights[i];
                    }
                }
                let prod = &kern * &interp;
                (0..Correction::COUNT).map(|c| (0..n).map(|q| prod[(c, q)]).collect()).collect()
            })
            .collect();
        let mats = (0..Correction::COUNT).map(|c| Mat::from_fn(n, n, |p, q| rows[p][c][q])).collect();
        Ok(SingularCorrections { n, mats })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, c: Correction) -> &Mat<f64> {
        &self.mats[c.index()]
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.mats.len() * self.n * self.n * 8);
        out.extend((self.n as u64).to_le_bytes());
        for m in &self.mats {
            for q in 0..self.n {
                for p in 0..self.n {
                    out.extend(m[(p, q)].to_le_bytes());
                }
            }
        }
        out
    }

    fn from_bytes(bytes: &[u8]) -> Option<SingularCorrections> {
        let n = u64::from_le_bytes(bytes.get(..8)?.try_into().ok()?) as usize;
        if bytes.len() != 8 + Correction::COUNT * n * n * 8 {
            return None;
        }
        let mut it = bytes[8..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut mats = Vec::with_capacity(Correction::COUNT);
        for _ in 0..Correction::COUNT {
            let mut m = Mat::<f64>::zeros(n, n);
            for q in 0..n {
                for p in 0..n {
                    m[(p, q)] = it.next()?;
                }
            }
            mats.push(m);
        }
        Some(SingularCorrections { n, mats })
    }
}

type CacheKey = (u64, LocalRule);

fn cache() -> &'static Mutex<HashMap<CacheKey, Arc<SingularCorrections>>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<SingularCorrections>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Corrections for `mesh`, memoized in process and optionally on disk under
/// the directory named by `BUBBLEBLOCH_CACHE`.
pub fn corrections(mesh: &QuadratureMesh) -> Result<Arc<SingularCorrections>> {
    let local = LocalRule::for_order(mesh.param()?.order);
    let key = (mesh.fingerprint(), local);
    if let Some(c) = cache().lock().unwrap().get(&key) {
        return Ok(c.clone());
    }
    let disk = std::env::var_os("BUBBLEBLOCH_CACHE").map(|dir| {
        std::path::PathBuf::from(dir).join(format!("corr-{:016x}-{}-{}.bin", key.0, local.n_theta, local.n_phi))
    });
    let loaded = disk
        .as_ref()
        .and_then(|path| std::fs::read(path).ok())
        .and_then(|b| SingularCorrections::from_bytes(&b))
        .filter(|c| c.n == mesh.len());
    let corr = match loaded {
        Some(c) => c,
        None => {
            let c = SingularCorrections::build(mesh, local)?;
            if let Some(path) = &disk {
                if let Err(e) = std::fs::write(path, c.to_bytes()) {
                    log::warn!("could not write correction cache {}: {e}", path.display());
                }
            }
            c
        }
    };
    let corr = Arc::new(corr);
    cache().lock().unwrap().insert(key, corr.clone());
    Ok(corr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_ellipsoid_mesh, make_sphere_mesh};

    #[test]
    fn hyperinterpolation_reproduces_low_degree() {
        let mesh = make_sphere_mesh(0.25, 8).unwrap();
        let param = mesh.param().unwrap();
        // Degree-3 polynomial restricted to the sphere.
        let f = |s: Vec3| 1.0 + s[0] - 2.0 * s[1] * s[2] + s[0] * s[0] * s[2];
        let vals: Vec<f64> = param.unit_nodes.iter().map(|s| f(*s)).collect();
        let pts = [vec3::normalize([0.3, -0.4, 0.2]), [0.0, 0.0, 1.0], vec3::normalize([-1.0, 2.0, -0.5])];
        for (p, v) in pts.iter().zip(interpolate(param, &vals, &pts)) {
            assert!((v - f(*p)).abs() < 1e-12, "{v} vs {}", f(*p));
        }
    }

    #[test]
    fn polar_rule_integrates_area() {
        let mesh = make_ellipsoid_mesh([0.3, 0.2, 0.1], 12).unwrap();
        let param = mesh.param().unwrap();
        let area = make_ellipsoid_mesh([0.3, 0.2, 0.1], 64).unwrap().area();
        for pole in [[0.0, 0.0, 1.0], [0.0, 0.0, -1.0], vec3::normalize([0.2, -0.5, -0.7])] {
            let rule = PolarRule::on_surface(param, pole, LocalRule::for_order(24));
            let a: f64 = rule.weights.iter().sum();
            assert!((a - area).abs() < 1e-8 * area, "{a} vs {area}");
            let g = PolarRule::graded(param, pole, 1e-3, LocalRule::for_order(24));
            let a: f64 = g.weights.iter().sum();
            assert!((a - area).abs() < 1e-8 * area, "{a} vs {area}");
        }
    }

    #[test]
    fn inverse_distance_on_sphere() {
        // int 1/|x-y| over a sphere of radius R is 4 pi R for x on the sphere.
        let r = 0.25;
        let mesh = make_sphere_mesh(r, 10).unwrap();
        let corr = SingularCorrections::build(&mesh, LocalRule::for_order(10)).unwrap();
        let c = corr.get(Correction::InvR);
        for p in [0, 17, mesh.len() - 1] {
            let s: f64 = (0..mesh.len()).map(|q| c[(p, q)]).sum();
            assert!((s - 4.0 * PI * r).abs() < 1e-12, "{s}");
        }
        // Double-layer adjoint of a constant: (nu.d)/r^3 integrates to 2 pi.
        let c = corr.get(Correction::DipoleM3);
        let s: f64 = (0..mesh.len()).map(|q| c[(3, q)]).sum();
        assert!((s - 2.0 * PI).abs() < 1e-12, "{s}");
    }

    #[test]
    fn correction_index_is_symmetric() {
        assert_eq!(Correction::DirDir(2, 0).index(), Correction::DirDir(0, 2).index());
        let mut seen: Vec<usize> = (0..3).map(|i| Correction::Dir(i).index()).collect();
        for i in 0..3 {
            for j in i..3 {
                seen.push(Correction::DirDir(i, j).index());
            }
        }
        seen.extend([0, 1, 2, 3, 4, 5]);
        seen.sort();
        assert_eq!(seen, (0..15).collect::<Vec<_>>());
    }

    #[test]
    fn cache_round_trip() {
        let mesh = make_sphere_mesh(0.2, 4).unwrap();
        let c = SingularCorrections::build(&mesh, LocalRule::for_order(4)).unwrap();
        let back = SingularCorrections::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.get(Correction::R3), c.get(Correction::R3));
    }
}
