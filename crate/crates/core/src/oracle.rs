//! Independent cross-check solvers: a finite-difference cell problem for the
//! quasi-periodic capacity and a plane-wave expansion for the first band.

use faer::prelude::*;
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::bloch::MaterialParams;
use crate::error::{Error, Result};
use crate::geometry::{Shape, SurfaceMap};
use crate::lattice_green::BlochVector;
use crate::vec3::{self, Vec3};
use crate::C64;

/// Cell-centred voxelization of `Y = [-1/2, 1/2]^3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub resolution: usize,
    /// Voxel centre inside the bubble; index `i + m (j + m k)`.
    pub inside_mask: Vec<bool>,
}

impl VoxelGrid {
    pub fn new(shape: Shape, resolution: usize) -> Result<VoxelGrid> {
        VoxelGrid::from_map(&SurfaceMap { axes: shape.semi_axes(), center: [0.0; 3] }, resolution)
    }

    pub fn from_map(map: &SurfaceMap, resolution: usize) -> Result<VoxelGrid> {
        let m = resolution;
        if m < 16 {
            return Err(Error::InvalidParameter(format!("voxel resolution must be at least 16, got {m}")));
        }
        let mut inside_mask = Vec::with_capacity(m * m * m);
        for k in 0..m {
            for j in 0..m {
                for i in 0..m {
                    inside_mask.push(map.level(VoxelGrid::center_of(m, [i, j, k])) < 1.0);
                }
            }
        }
        Ok(VoxelGrid { resolution: m, inside_mask })
    }

    fn center_of(m: usize, idx: [usize; 3]) -> Vec3 {
        let h = 1.0 / m as f64;
        idx.map(|i| -0.5 + (i as f64 + 0.5) * h)
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.resolution as f64
    }

    pub fn inside_count(&self) -> usize {
        self.inside_mask.iter().filter(|b| **b).count()
    }
}

/// Forward neighbour along `axis` with the quasi-periodic phase picked up on wrapping.
#[inline]
fn forward(m: usize, idx: usize, axis: usize, phase: &[C64; 3]) -> (usize, C64) {
    let stride = [1, m, m * m][axis];
    let coord = (idx / stride) % m;
    if coord + 1 == m {
        (idx + stride - m * stride, phase[axis])
    } else {
        (idx + stride, C64::new(1.0, 0.0))
    }
}

/// Quasi-periodic Dirichlet energy `min int_{Y \ D} |grad v|^2`, `v = 1` on the voxelized bubble.
///
/// Standard 7-point stencil, conjugate gradients on the Hermitian system.
pub fn fd_capacity(grid: &VoxelGrid, alpha: BlochVector) -> Result<f64> {
    let a = alpha.wrapped();
    if a.is_zero() {
        return Err(Error::UndefinedAtZeroAlpha);
    }
    let m = grid.resolution;
    let n = m * m * m;
    let inside = &grid.inside_mask;
    if inside.len() != n {
        return Err(Error::InvalidParameter("voxel mask does not match the resolution".into()));
    }
    let phase = [0, 1, 2].map(|j| C64::from_polar(1.0, a.0[j]));
    let zero = C64::new(0.0, 0.0);

    // A v = sum over the 6 neighbours of (v_a - ph v_b); bubble voxels are fixed at 1.
    let apply = |v: &[C64], out: &mut [C64]| {
        for (a, o) in out.iter_mut().enumerate() {
            *o = if inside[a] { zero } else { v[a] * 6.0 };
        }
        for a in 0..n {
            for axis in 0..3 {
                let (b, ph) = forward(m, a, axis, &phase);
                if !inside[a] && !inside[b] {
                    out[a] -= ph * v[b];
                    out[b] -= ph.conj() * v[a];
                }
            }
        }
    };
    let mut rhs = vec![zero; n];
    for a in 0..n {
        for axis in 0..3 {
            let (b, ph) = forward(m, a, axis, &phase);
            if !inside[a] && inside[b] {
                rhs[a] += ph;
            } else if inside[a] && !inside[b] {
                rhs[b] += ph.conj();
            }
        }
    }

    let dot = |x: &[C64], y: &[C64]| -> C64 { x.iter().zip(y).map(|(a, b)| a.conj() * b).sum() };
    let mut x = vec![zero; n];
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut ap = vec![zero; n];
    let mut rs = dot(&r, &r).re;
    let target = 1e-20 * rs;
    let max_it = 40 * m;
    let mut it = 0;
    while rs > target {
        if it == max_it {
            return Err(Error::NoConvergence { iterations: it, omega: 0.0, residual: rs.sqrt() });
        }
        apply(&p, &mut ap);
        let step = rs / dot(&p, &ap).re;
        for i in 0..n {
            x[i] += p[i] * step;
            r[i] -= ap[i] * step;
        }
        let next = dot(&r, &r).re;
        let beta = next / rs;
        for i in 0..n {
            p[i] = r[i] + p[i] * beta;
        }
        rs = next;
        it += 1;
    }
    log::debug!("fd capacity: {it} conjugate-gradient iterations at m = {m}");

    let value = |i: usize| if inside[i] { C64::new(1.0, 0.0) } else { x[i] };
    let mut energy = 0.0;
    for a in 0..n {
        for axis in 0..3 {
            let (b, ph) = forward(m, a, axis, &phase);
            energy += (value(a) - ph * value(b)).norm_sqr();
        }
    }
    Ok(energy * grid.spacing())
}

/// First-order extrapolation from two resolutions, `C(m2) + (C(m2) - C(m1)) m1 / (m2 - m1)`.
pub fn fd_capacity_extrapolated(shape: Shape, alpha: BlochVector, m1: usize, m2: usize) -> Result<f64> {
    if m2 <= m1 {
        return Err(Error::InvalidParameter("extrapolation needs m2 > m1".into()));
    }
    let c1 = fd_capacity(&VoxelGrid::new(shape, m1)?, alpha)?;
    let c2 = fd_capacity(&VoxelGrid::new(shape, m2)?, alpha)?;
    Ok(c2 + (c2 - c1) * m1 as f64 / (m2 - m1) as f64)
}

/// `int_D e^{-i q.x} dx` for a centred ellipsoid (real by symmetry).
fn indicator_transform(axes: Vec3, q: Vec3) -> f64 {
    let vol = 4.0 / 3.0 * std::f64::consts::PI * axes[0] * axes[1] * axes[2];
    let t = vec3::norm([axes[0] * q[0], axes[1] * q[1], axes[2] * q[2]]);
    if t < 0.5 {
        // 3 (sin t - t cos t)/t^3 = sum_{k>=1} (-1)^{k+1} 6k t^{2k-2} / (2k+1)!
        let t2 = t * t;
        let (mut acc, mut pw, mut fact) = (0.0, 1.0, 6.0);
        for k in 1..10 {
            if k > 1 {
                pw *= -t2;
                fact *= (2 * k) as f64 * (2 * k + 1) as f64;
            }
            acc += 6.0 * k as f64 * pw / fact;
        }
        return vol * acc;
    }
    vol * 3.0 * (t.sin() - t * t.cos()) / (t * t * t)
}

/// Plane-wave discretization of `div (1/rho) grad u + omega^2/kappa u = 0` for one
/// centred bubble, reusable across Bloch vectors.
///
/// The `1/rho` coefficient uses the inverse of the Toeplitz matrix of `rho`,
/// which converges far better than the Fourier coefficients of `1/rho`
/// at high contrast.
pub struct PweSolver {
    pub cutoff: usize,
    indices: Vec<[i64; 3]>,
    inv_rho: Mat<f64>,
    mass: Mat<f64>,
}

impl PweSolver {
    pub fn new(shape: Shape, material: &MaterialParams, cutoff: usize) -> Result<PweSolver> {
        if cutoff < 4 {
            return Err(Error::InvalidParameter(format!("plane-wave cutoff must be at least 4, got {cutoff}")));
        }
        material.validate()?;
        let c = cutoff as i64;
        let mut indices = Vec::new();
        for i in -c..=c {
            for j in -c..=c {
                for k in -c..=c {
                    indices.push([i, j, k]);
                }
            }
        }
        let axes = shape.semi_axes();
        let two_pi = 2.0 * std::f64::consts::PI;
        let n = indices.len();
        let toeplitz = |outside: f64, inside: f64| {
            Mat::<f64>::from_fn(n, n, |a, b| {
                let d = [0, 1, 2].map(|j| (indices[a][j] - indices[b][j]) as f64 * two_pi);
                let base = if a == b { outside } else { 0.0 };
                base + (inside - outside) * indicator_transform(axes, d)
            })
        };
        let rho = toeplitz(material.rho, material.rho_b);
        let mass = toeplitz(1.0 / material.kappa, 1.0 / material.kappa_b);
        let not_pd = |what: &str| Error::LinearAlgebra(format!("{what} matrix is not positive definite"));
        if mass.llt(Side::Lower).is_err() {
            return Err(not_pd("mass"));
        }
        let llt = rho.llt(Side::Lower).map_err(|_| not_pd("density"))?;
        let inv_rho = llt.solve(Mat::<f64>::identity(n, n));
        Ok(PweSolver { cutoff, indices, inv_rho, mass })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Smallest `omega` at `alpha`.
    pub fn band(&self, alpha: BlochVector) -> Result<f64> {
        let a = alpha.wrapped();
        if a.is_zero() {
            // The constant mode gives omega = 0.
            return Ok(0.0);
        }
        let two_pi = 2.0 * std::f64::consts::PI;
        let beta: Vec<Vec3> = self.indices.iter().map(|ix| [0, 1, 2].map(|j| two_pi * ix[j] as f64 + a.0[j])).collect();
        let n = self.len();
        let stiff = Mat::<f64>::from_fn(n, n, |p, q| vec3::dot(beta[p], beta[q]) * self.inv_rho[(p, q)]);
        let llt = stiff
            .llt(Side::Lower)
            .map_err(|_| Error::LinearAlgebra("plane-wave stiffness matrix is not positive definite".into()))?;
        // Inverse iteration on K x = lambda M x; the first band is separated by O(1/delta).
        let mut x = Mat::<f64>::from_fn(n, 1, |p, _| 1.0 / (1.0 + vec3::dot(beta[p], beta[p])));
        let mut lambda = f64::INFINITY;
        for it in 0..200 {
            let y = llt.solve(&self.mass * &x);
            let ky = &stiff * &y;
            let my = &self.mass * &y;
            let num: f64 = (0..n).map(|p| y[(p, 0)] * ky[(p, 0)]).sum();
            let den: f64 = (0..n).map(|p| y[(p, 0)] * my[(p, 0)]).sum();
            let next = num / den;
            let norm = den.sqrt();
            x = Mat::from_fn(n, 1, |p, _| y[(p, 0)] / norm);
            if (next - lambda).abs() <= 1e-14 * next {
                log::debug!("plane-wave inverse iteration converged in {it} steps");
                return Ok(next.max(0.0).sqrt());
            }
            lambda = next;
        }
        Err(Error::NoConvergence { iterations: 200, omega: lambda.sqrt(), residual: f64::NAN })
    }
}

/// First band from plane waves `e^{i(2 pi n + alpha).x}`, `|n|_inf <= cutoff`.
pub fn pwe_band(shape: Shape, alpha: BlochVector, material: &MaterialParams, cutoff: usize) -> Result<f64> {
    PweSolver::new(shape, material, cutoff)?.band(alpha)
}
