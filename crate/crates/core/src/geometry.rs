//! Unit cell, bubble surface and its Nyström quadrature.
//!
//! Surfaces are star-shaped images of the unit sphere under an axis-aligned
//! affine map `y(s) = c + diag(a) s`. The unit-sphere coordinates of every
//! node are kept alongside the physical nodes so that singular integrals can
//! be evaluated with rotated polar rules and spherical-harmonic
//! interpolation of densities.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre;
use crate::vec3::{self, Vec3};

/// Half width of the reference cell `Y = [-1/2, 1/2]^3`.
pub const CELL_HALF_WIDTH: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    Ellipsoid { semi_axes: Vec3 },
}

impl Shape {
    pub fn semi_axes(&self) -> Vec3 {
        match *self {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Ellipsoid { semi_axes } => semi_axes,
        }
    }
}

/// Affine image of the unit sphere, `y(s) = center + diag(axes) s`.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceMap {
    pub axes: Vec3,
    pub center: Vec3,
}

impl SurfaceMap {
    #[inline]
    pub fn point(&self, s: Vec3) -> Vec3 {
        [
            self.center[0] + self.axes[0] * s[0],
            self.center[1] + self.axes[1] * s[1],
            self.center[2] + self.axes[2] * s[2],
        ]
    }

    /// Outward unit normal at `y(s)`.
    #[inline]
    pub fn normal(&self, s: Vec3) -> Vec3 {
        vec3::normalize([s[0] / self.axes[0], s[1] / self.axes[1], s[2] / self.axes[2]])
    }

    /// Ratio of physical to unit-sphere surface measure at `s`.
    #[inline]
    pub fn jacobian(&self, s: Vec3) -> f64 {
        let det = self.axes[0] * self.axes[1] * self.axes[2];
        det * vec3::norm([s[0] / self.axes[0], s[1] / self.axes[1], s[2] / self.axes[2]])
    }

    /// Unit-sphere preimage of the radial projection of `x` onto the surface.
    pub fn preimage_direction(&self, x: Vec3) -> Vec3 {
        let q = vec3::sub(x, self.center);
        vec3::normalize([q[0] / self.axes[0], q[1] / self.axes[1], q[2] / self.axes[2]])
    }

    /// Unit-sphere coordinates of the surface point closest to `x`.
    pub fn closest_preimage(&self, x: Vec3) -> Vec3 {
        let mut s = self.preimage_direction(x);
        // Fixed point on x = y(s) + t nu(s); converges for points near the surface.
        for _ in 0..50 {
            let y = self.point(s);
            let nu = self.normal(s);
            let t = vec3::dot(vec3::sub(x, y), nu);
            let foot = vec3::sub(x, vec3::scale(nu, t));
            let next = self.preimage_direction(foot);
            let step = vec3::norm(vec3::sub(next, s));
            s = next;
            if step < 1e-15 {
                break;
            }
        }
        s
    }

    /// Level-set value `sum ((x - c)_i / a_i)^2`; below 1 inside.
    #[inline]
    pub fn level(&self, x: Vec3) -> f64 {
        let q = vec3::sub(x, self.center);
        (q[0] / self.axes[0]).powi(2) + (q[1] / self.axes[1]).powi(2) + (q[2] / self.axes[2]).powi(2)
    }
}

/// Product-rule parameterization data attached to a mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameterization {
    pub map: SurfaceMap,
    /// Unit-sphere coordinates of each node.
    pub unit_nodes: Vec<Vec3>,
    /// Unit-sphere quadrature weights (sum to `4 pi`).
    pub unit_weights: Vec<f64>,
    /// Number of Gauss–Legendre latitudes; there are twice as many longitudes.
    pub order: usize,
}

impl Parameterization {
    /// Degree of the spherical-harmonic interpolant the product rule supports.
    pub fn degree(&self) -> usize {
        self.order - 1
    }
}

/// Nyström quadrature on the bubble surface.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureMesh {
    pub nodes: Vec<Vec3>,
    pub weights: Vec<f64>,
    pub normals: Vec<Vec3>,
    pub param: Option<Parameterization>,
}

/// Sphere of the given radius centered at the origin.
pub fn make_sphere_mesh(radius: f64, order: usize) -> Result<QuadratureMesh> {
    if !(radius > 0.0) {
        return Err(Error::InvalidParameter(format!("radius must be positive, got {radius}")));
    }
    make_mesh(Shape::Sphere { radius }, order)
}

/// Axis-aligned ellipsoid centered at the origin.
pub fn make_ellipsoid_mesh(semi_axes: Vec3, order: usize) -> Result<QuadratureMesh> {
    if semi_axes.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::InvalidParameter(format!("semi-axes must be positive, got {semi_axes:?}")));
    }
    make_mesh(Shape::Ellipsoid { semi_axes }, order)
}

/// Gauss–Legendre in `cos(theta)` times trapezoidal in longitude.
pub fn make_mesh(shape: Shape, order: usize) -> Result<QuadratureMesh> {
    if order < 2 {
        return Err(Error::InvalidParameter(format!("quadrature order must be at least 2, got {order}")));
    }
    let axes = shape.semi_axes();
    let extent = axes.iter().cloned().fold(0.0, f64::max);
    if extent >= CELL_HALF_WIDTH {
        return Err(Error::BubbleNotContained { extent, limit: CELL_HALF_WIDTH });
    }
    let map = SurfaceMap { axes, center: [0.0; 3] };
    let (ct, wt) = gauss_legendre(order);
    let nphi = 2 * order;
    let dphi = 2.0 * PI / nphi as f64;
    let n = order * nphi;
    let mut unit_nodes = Vec::with_capacity(n);
    let mut unit_weights = Vec::with_capacity(n);
    for (c, w) in ct.iter().zip(&wt) {
        let st = (1.0 - c * c).sqrt();
        for j in 0..nphi {
            let phi = (j as f64 + 0.5) * dphi;
            unit_nodes.push([st * phi.cos(), st * phi.sin(), *c]);
            unit_weights.push(w * dphi);
        }
    }
    let nodes = unit_nodes.iter().map(|s| map.point(*s)).collect();
    let normals = unit_nodes.iter().map(|s| map.normal(*s)).collect();
    let weights = unit_nodes.iter().zip(&unit_weights).map(|(s, w)| w * map.jacobian(*s)).collect();
    Ok(QuadratureMesh {
        nodes,
        weights,
        normals,
        param: Some(Parameterization { map, unit_nodes, unit_weights, order }),
    })
}

impl QuadratureMesh {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn area(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Enclosed volume by the divergence theorem.
    pub fn volume(&self) -> f64 {
        volume(self)
    }

    pub fn param(&self) -> Result<&Parameterization> {
        self.param.as_ref().ok_or(Error::MissingParameterization)
    }

    /// Largest coordinate magnitude over all nodes.
    pub fn extent(&self) -> f64 {
        self.nodes.iter().flat_map(|x| x.iter()).fold(0.0_f64, |m, c| m.max(c.abs()))
    }

    /// Typical node spacing, `sqrt(area / n)`.
    pub fn spacing(&self) -> f64 {
        (self.area() / self.len() as f64).sqrt()
    }

    pub fn translate(&self, t: Vec3) -> QuadratureMesh {
        let mut out = self.clone();
        for x in &mut out.nodes {
            *x = vec3::add(*x, t);
        }
        if let Some(p) = &mut out.param {
            p.map.center = vec3::add(p.map.center, t);
        }
        out
    }

    /// Mirror image under `x_axis -> -x_axis`.
    pub fn reflect(&self, axis: usize) -> QuadratureMesh {
        let mut out = self.clone();
        for x in &mut out.nodes {
            *x = vec3::reflect(*x, axis);
        }
        for nu in &mut out.normals {
            *nu = vec3::reflect(*nu, axis);
        }
        if let Some(p) = &mut out.param {
            p.map.center = vec3::reflect(p.map.center, axis);
            for s in &mut p.unit_nodes {
                *s = vec3::reflect(*s, axis);
            }
        }
        out
    }

    /// Scaled copy `s D`: nodes by `s`, weights by `s^2`, normals unchanged.
    pub fn scaled(&self, s: f64) -> QuadratureMesh {
        let mut out = self.clone();
        for x in &mut out.nodes {
            *x = vec3::scale(*x, s);
        }
        for w in &mut out.weights {
            *w *= s * s;
        }
        if let Some(p) = &mut out.param {
            p.map.center = vec3::scale(p.map.center, s);
            p.map.axes = vec3::scale(p.map.axes, s);
        }
        out
    }

    /// True when `x` lies inside the bubble (requires a parameterization).
    pub fn contains(&self, x: Vec3) -> Result<bool> {
        Ok(self.param()?.map.level(x) < 1.0)
    }

    /// Stable content hash of the discretization, used as a cache key.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over the raw bits.
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for ((x, w), nu) in self.nodes.iter().zip(&self.weights).zip(&self.normals) {
            x.iter().chain(nu.iter()).for_each(|c| feed(*c));
            feed(*w);
        }
        h
    }

    /// Structured text record: a header followed by one
    /// `x y z weight nx ny nz` line per node.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# bubblebloch quadrature mesh");
        let _ = writeln!(out, "# nodes {}", self.len());
        if let Some(p) = &self.param {
            let _ = writeln!(
                out,
                "# map order {} axes {:.17e} {:.17e} {:.17e} center {:.17e} {:.17e} {:.17e}",
                p.order, p.map.axes[0], p.map.axes[1], p.map.axes[2], p.map.center[0], p.map.center[1], p.map.center[2]
            );
        }
        for ((x, w), nu) in self.nodes.iter().zip(&self.weights).zip(&self.normals) {
            let _ = writeln!(
                out,
                "{:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
                x[0], x[1], x[2], w, nu[0], nu[1], nu[2]
            );
        }
        out
    }

    /// Parses [`QuadratureMesh::to_text`] output. When the header names a
    /// surface map, the parameterization is rebuilt and checked against the
    /// listed nodes.
    pub fn from_text(text: &str) -> Result<QuadratureMesh> {
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut normals = Vec::new();
        let mut map_header: Option<(usize, Vec3, Vec3)> = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let toks: Vec<&str> = rest.split_whitespace().collect();
                if toks.first() == Some(&"map") {
                    let num = |i: usize| -> Result<f64> {
                        toks.get(i)
                            .ok_or_else(|| Error::Parse(format!("line {}: truncated map header", lineno + 1)))?
                            .parse::<f64>()
                            .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))
                    };
                    let order = num(2)? as usize;
                    map_header = Some((order, [num(4)?, num(5)?, num(6)?], [num(8)?, num(9)?, num(10)?]));
                }
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1))))
                .collect::<Result<_>>()?;
            if vals.len() != 7 {
                return Err(Error::Parse(format!("line {}: expected 7 fields, found {}", lineno + 1, vals.len())));
            }
            nodes.push([vals[0], vals[1], vals[2]]);
            weights.push(vals[3]);
            normals.push([vals[4], vals[5], vals[6]]);
        }
        let mut mesh = QuadratureMesh { nodes, weights, normals, param: None };
        if let Some((order, axes, center)) = map_header {
            let rebuilt = make_mesh(Shape::Ellipsoid { semi_axes: axes }, order)
                .or_else(|_| {
                    // Scaled meshes may exceed the unit cell; rebuild at unit scale.
                    let m = axes.iter().cloned().fold(0.0, f64::max) / 0.25;
                    make_mesh(Shape::Ellipsoid { semi_axes: vec3::scale(axes, 1.0 / m) }, order).map(|g| g.scaled(m))
                })?
                .translate(center);
            if rebuilt.len() == mesh.len()
                && rebuilt.nodes.iter().zip(&mesh.nodes).all(|(a, b)| vec3::norm(vec3::sub(*a, *b)) < 1e-12)
            {
                mesh.param = rebuilt.param;
            } else {
                return Err(Error::Parse("map header does not reproduce the listed nodes".into()));
            }
        }
        Ok(mesh)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<QuadratureMesh> {
        QuadratureMesh::from_text(&std::fs::read_to_string(path)?)
    }
}

/// `(1/3) sum_q w_q (x_q . nu_q)`.
pub fn volume(mesh: &QuadratureMesh) -> f64 {
    mesh.nodes
        .iter()
        .zip(&mesh.weights)
        .zip(&mesh.normals)
        .map(|((x, w), nu)| w * vec3::dot(*x, *nu))
        .sum::<f64>()
        / 3.0
}

/// True iff the node set is invariant under each coordinate reflection.
pub fn check_symmetry(mesh: &QuadratureMesh, tol: f64) -> bool {
    (0..3).all(|axis| {
        mesh.nodes.iter().all(|x| {
            let r = vec3::reflect(*x, axis);
            mesh.nodes.iter().any(|y| vec3::norm(vec3::sub(r, *y)) <= tol)
        })
    })
}

/// Unit cell `Y_s = s Y` holding the bubble `D_s = s D`.
#[derive(Clone, Debug)]
pub struct CellGeometry {
    pub scale: f64,
    pub surface: QuadratureMesh,
}

impl CellGeometry {
    /// Cell of period `scale` around a bubble already expressed at that scale.
    pub fn new(surface: QuadratureMesh, scale: f64) -> Result<CellGeometry> {
        if !(scale > 0.0) {
            return Err(Error::InvalidParameter(format!("scale must be positive, got {scale}")));
        }
        let extent = surface.extent();
        let limit = CELL_HALF_WIDTH * scale;
        if extent >= limit {
            return Err(Error::BubbleNotContained { extent, limit });
        }
        Ok(CellGeometry { scale, surface })
    }

    pub fn cell_half_width(&self) -> f64 {
        CELL_HALF_WIDTH * self.scale
    }

    /// Brillouin zone half width `pi / s`.
    pub fn brillouin_half_width(&self) -> f64 {
        PI / self.scale
    }
}

/// Geometry rescaled by `s` relative to its current scale.
pub fn rescale(geom: &CellGeometry, s: f64) -> Result<CellGeometry> {
    if !(s > 0.0) {
        return Err(Error::InvalidParameter(format!("scale factor must be positive, got {s}")));
    }
    Ok(CellGeometry { scale: geom.scale * s, surface: geom.surface.scaled(s) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_area_and_volume() {
        let m = make_sphere_mesh(0.25, 16).unwrap();
        let area = 4.0 * PI * 0.0625;
        assert!((m.area() - area).abs() / area < 1e-10);
        let vol = 4.0 * PI * 0.25f64.powi(3) / 3.0;
        assert!((volume(&m) - vol).abs() / vol < 1e-12);
        for nu in &m.normals {
            assert!((vec3::norm(*nu) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn volume_is_analytic_for_coarse_and_fine_rules() {
        let vol = 4.0 * PI * 0.25f64.powi(3) / 3.0;
        for order in [8, 24] {
            let m = make_sphere_mesh(0.25, order).unwrap();
            assert!((volume(&m) - vol).abs() / vol < 1e-12);
        }
        let m = make_sphere_mesh(0.1, 8).unwrap();
        assert!((volume(&m) - 0.0041887902047863905).abs() < 1e-15);
    }

    #[test]
    fn containment_boundary() {
        assert!(make_sphere_mesh(0.49999, 6).is_ok());
        assert!(matches!(make_sphere_mesh(0.5, 6), Err(Error::BubbleNotContained { .. })));
        assert!(make_sphere_mesh(0.0, 6).is_err());
        assert!(make_ellipsoid_mesh([0.3, 0.2, 0.6], 6).is_err());
    }

    #[test]
    fn reflected_mesh_keeps_volume() {
        let m = make_ellipsoid_mesh([0.3, 0.2, 0.1], 10).unwrap().translate([0.05, 0.0, 0.0]);
        for axis in 0..3 {
            assert!((volume(&m.reflect(axis)) - volume(&m)).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetry_detection() {
        let s = make_sphere_mesh(0.25, 8).unwrap();
        assert!(check_symmetry(&s, 1e-12));
        assert!(!check_symmetry(&s.translate([0.1, 0.0, 0.0]), 1e-12));
        let e = make_ellipsoid_mesh([0.3, 0.2, 0.1], 8).unwrap();
        assert!(check_symmetry(&e, 1e-12));
    }

    #[test]
    fn ellipsoid_area_converges() {
        // Reference from a fine rule; checks spectral self-convergence.
        let fine = make_ellipsoid_mesh([0.3, 0.2, 0.1], 48).unwrap().area();
        let coarse = make_ellipsoid_mesh([0.3, 0.2, 0.1], 16).unwrap().area();
        let mid = make_ellipsoid_mesh([0.3, 0.2, 0.1], 24).unwrap().area();
        assert!((mid - fine).abs() < (coarse - fine).abs() || (coarse - fine).abs() < 1e-12);
        assert!((mid - fine).abs() / fine < 1e-6);
    }

    #[test]
    fn rescale_laws() {
        let g = CellGeometry::new(make_sphere_mesh(0.25, 10).unwrap(), 1.0).unwrap();
        let same = rescale(&g, 1.0).unwrap();
        assert_eq!(same.surface, g.surface);
        let h = rescale(&g, 0.5).unwrap();
        assert_eq!(h.scale, 0.5);
        let area = 4.0 * PI * 0.125f64.powi(2);
        assert!((h.surface.area() - area).abs() / area < 1e-10);
        assert!((volume(&h.surface) - 0.125 * volume(&g.surface)).abs() < 1e-12 * volume(&g.surface));
        assert_eq!(h.surface.normals, g.surface.normals);
    }

    #[test]
    fn text_round_trip_restores_parameterization() {
        let m = make_ellipsoid_mesh([0.3, 0.2, 0.1], 6).unwrap();
        let back = QuadratureMesh::from_text(&m.to_text()).unwrap();
        assert_eq!(back.len(), m.len());
        assert!(back.param.is_some());
        for (a, b) in back.nodes.iter().zip(&m.nodes) {
            assert!(vec3::norm(vec3::sub(*a, *b)) < 1e-15);
        }
        assert!(QuadratureMesh::from_text("0 0 0 1 0 0").is_err());
    }
}
