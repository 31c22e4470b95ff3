//! Nyström discretizations of single-layer and Neumann–Poincaré operators.
//!
//! Every kernel is split as `-cos(kr)/(4 pi r) + smooth` (single layer) or
//! `(nu.d)(cos(kr) + kr sin(kr))/(4 pi r^3) + smooth` (normal derivative).
//! The first three terms of the Taylor expansion in `k` of the nonsmooth part
//! are integrated with the corrected rule of [`crate::singular`]; the rest,
//! including the lattice remainder, uses the plain node rule with the
//! diagonal set to the kernel's limit.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{Read as _, Write as _};
use std::path::Path;
use std::sync::Arc;

use faer::prelude::*;
use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::QuadratureMesh;
use crate::lattice_green::{BlochVector, CornerKernel, KernelSpec, LatticeKernel, SeriesKernel};
use crate::singular::{corrections, reproducing_kernel, Correction, LocalRule, PolarRule, SingularCorrections};
use crate::vec3::{self, Vec3};
use crate::C64;

const FOUR_PI: f64 = 4.0 * PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    SingleLayerFree,
    SingleLayerQuasi,
    NeumannPoincareFree,
    NeumannPoincareQuasi,
    /// `S_1~`: kernel `G_1~`.
    S1Correction,
    /// First-order corner term with kernel `G_odd`.
    OddCorrection,
    /// Coefficient of `k^{2l}` in the quasi-periodic single layer.
    SeriesTerm(usize),
}

/// Dense operator on nodal densities.
#[derive(Clone, Debug)]
pub struct BoundaryOperator {
    /// Nodal matrix; its corrected part acts through the hyperinterpolant.
    pub matrix: Mat<C64>,
    pub kind: OperatorKind,
    pub spec: Option<KernelSpec>,
    pub basis: Arc<NodalBasis>,
}

/// Orthonormal basis (for the unit-sphere rule) of spherical polynomials of
/// degree `order - 1`, sampled at the nodes.
///
/// The node count is twice the dimension of that space, so nodal matrices
/// with corrected parts are rank deficient; systems are solved for the
/// coefficients in this basis instead.
#[derive(Clone, Debug)]
pub struct NodalBasis {
    /// `n x m` basis values.
    pub phi: Mat<f64>,
    /// `m x n` coefficient map, a left inverse of `phi`.
    pub phi_plus: Mat<f64>,
    /// Lower Cholesky factor of the surface-weighted Gram matrix `phi^T W phi`.
    gram_chol: Mat<f64>,
}

impl NodalBasis {
    pub fn new(mesh: &QuadratureMesh) -> Result<NodalBasis> {
        let param = mesh.param()?;
        let n = mesh.len();
        let deg = param.degree();
        let sw: Vec<f64> = param.unit_weights.iter().map(|w| w.sqrt()).collect();
        let p = Mat::from_fn(n, n, |i, j| {
            sw[i] * sw[j] * reproducing_kernel(deg, vec3::dot(param.unit_nodes[i], param.unit_nodes[j]))
        });
        let eig = p
            .self_adjoint_eigen(faer::Side::Lower)
            .map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
        let vals = eig.S();
        let keep: Vec<usize> = (0..n).filter(|&i| vals[i] > 0.5).collect();
        let m = keep.len();
        if m != (deg + 1) * (deg + 1) {
            return Err(Error::LinearAlgebra(format!("hyperinterpolation rank {m}, expected {}", (deg + 1) * (deg + 1))));
        }
        let u = eig.U();
        let phi = Mat::from_fn(n, m, |i, j| u[(i, keep[j])] / sw[i]);
        let phi_plus = Mat::from_fn(m, n, |j, i| u[(i, keep[j])] * sw[i]);
        let gram = Mat::from_fn(m, m, |a, b| (0..n).map(|i| phi[(i, a)] * mesh.weights[i] * phi[(i, b)]).sum::<f64>());
        let llt = gram.llt(faer::Side::Lower).map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
        Ok(NodalBasis { phi, phi_plus, gram_chol: llt.L().to_owned() })
    }

    pub fn nodes(&self) -> usize {
        self.phi.nrows()
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    /// Coefficients of the hyperinterpolant of nodal values.
    pub fn coefficients(&self, x: &[C64]) -> Vec<C64> {
        (0..self.dim()).map(|j| (0..x.len()).map(|i| x[i] * self.phi_plus[(j, i)]).sum()).collect()
    }

    /// Nodal values from coefficients.
    pub fn values(&self, c: &[C64]) -> Vec<C64> {
        (0..self.nodes()).map(|i| (0..c.len()).map(|j| c[j] * self.phi[(i, j)]).sum()).collect()
    }

    /// Projection of nodal values onto the interpolation space.
    pub fn project(&self, x: &[C64]) -> Vec<C64> {
        self.values(&self.coefficients(x))
    }

    /// `phi^+ A phi`.
    pub fn reduce(&self, a: &Mat<C64>) -> Mat<C64> {
        let n = self.nodes();
        let m = self.dim();
        let phic = Mat::from_fn(n, m, |i, j| C64::from(self.phi[(i, j)]));
        let ppc = Mat::from_fn(m, n, |j, i| C64::from(self.phi_plus[(j, i)]));
        &ppc * &(a * &phic)
    }

    /// Similarity transform of a reduced matrix to coordinates that are
    /// orthonormal in `L^2(dsigma)`: `L^T A L^{-T}`.
    pub fn to_orthonormal(&self, a: &Mat<C64>) -> Mat<C64> {
        let m = self.dim();
        let l = Mat::from_fn(m, m, |i, j| C64::from(self.gram_chol[(i, j)]));
        let lt = l.transpose().to_owned();
        // X = A L^{-T}  <=>  X L^T = A  <=>  L X^T = A^T
        let lu = l.partial_piv_lu();
        let xt = lu.solve(a.transpose().to_owned());
        &lt * &xt.transpose().to_owned()
    }
}

pub type BoundaryDensity = Vec<C64>;

impl BoundaryOperator {
    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn apply(&self, x: &[C64]) -> BoundaryDensity {
        mat_vec(&self.matrix, &self.basis.project(x))
    }

    /// Matrix on interpolation coefficients.
    pub fn reduced(&self) -> Mat<C64> {
        self.basis.reduce(&self.matrix)
    }

    pub fn is_finite(&self) -> bool {
        let n = self.len();
        (0..n).all(|q| (0..n).all(|p| self.matrix[(p, q)].is_finite()))
    }

    /// Singular values in `L^2(dsigma)` on the interpolation space, nonincreasing.
    pub fn singular_values(&self) -> Result<Vec<f64>> {
        self.basis
            .to_orthonormal(&self.reduced())
            .singular_values()
            .map_err(|e| Error::LinearAlgebra(format!("{e:?}")))
    }

    /// Eigenvalues on the interpolation space.
    pub fn eigenvalues(&self) -> Result<Vec<C64>> {
        self.reduced().eigenvalues().map_err(|e| Error::LinearAlgebra(format!("{e:?}")))
    }

    /// `L^2(dsigma)` operator norm.
    pub fn norm(&self) -> Result<f64> {
        Ok(self.singular_values()?[0])
    }

    /// Entrywise `a A + b B`.
    pub fn combine(a: C64, x: &BoundaryOperator, b: C64, y: &BoundaryOperator) -> Mat<C64> {
        let n = x.len();
        Mat::from_fn(n, n, |p, q| a * x.matrix[(p, q)] + b * y.matrix[(p, q)])
    }

    /// Writes a text header (`n`, kind, alpha, k) followed by row-major
    /// little-endian `(re, im)` pairs.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let n = self.len();
        let mut head = String::new();
        let _ = writeln!(head, "bubblebloch-operator");
        let _ = writeln!(head, "n {n}");
        let _ = writeln!(head, "kind {}", serde_json::to_string(&self.kind).unwrap_or_default());
        match &self.spec {
            Some(s) => {
                let _ = writeln!(head, "alpha {:.17e} {:.17e} {:.17e}", s.alpha.0[0], s.alpha.0[1], s.alpha.0[2]);
                let _ = writeln!(head, "k {:.17e}", s.k);
            }
            None => {
                let _ = writeln!(head, "alpha none");
                let _ = writeln!(head, "k none");
            }
        }
        let _ = writeln!(head, "end");
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(head.as_bytes())?;
        for p in 0..n {
            for q in 0..n {
                let z = self.matrix[(p, q)];
                f.write_all(&z.re.to_le_bytes())?;
                f.write_all(&z.im.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    /// Reads the matrix back from [`BoundaryOperator::write_dump`] output.
    pub fn read_dump(path: &Path) -> Result<Mat<C64>> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let marker = b"\nend\n";
        let pos = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| Error::Parse("operator dump has no header terminator".into()))?;
        let head = std::str::from_utf8(&bytes[..pos]).map_err(|e| Error::Parse(e.to_string()))?;
        let n: usize = head
            .lines()
            .find_map(|l| l.strip_prefix("n "))
            .ok_or_else(|| Error::Parse("operator dump header lacks n".into()))?
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("{e}")))?;
        let body = &bytes[pos + marker.len()..];
        if body.len() != n * n * 16 {
            return Err(Error::Parse(format!("expected {} payload bytes, found {}", n * n * 16, body.len())));
        }
        let val = |i: usize| f64::from_le_bytes(body[8 * i..8 * i + 8].try_into().unwrap());
        Ok(Mat::from_fn(n, n, |p, q| {
            let i = 2 * (p * n + q);
            C64::new(val(i), val(i + 1))
        }))
    }
}

pub(crate) fn mat_vec(m: &Mat<C64>, x: &[C64]) -> Vec<C64> {
    let n = m.nrows();
    let mut y = vec![C64::new(0.0, 0.0); n];
    for (q, xq) in x.iter().enumerate() {
        let col = m.col(q);
        for (p, yp) in y.iter_mut().enumerate() {
            *yp += col[p] * xq;
        }
    }
    y
}

/// `-(1/4pi) sum_{j>=3} (-1)^j k^{2j} r^{2j-1}/(2j)!`.
fn single_rest(k: f64, r: f64) -> f64 {
    let x = k * r;
    if r == 0.0 || k == 0.0 {
        return 0.0;
    }
    let s = if x < 1.0 {
        let mut term = -x.powi(6) / 720.0;
        let mut acc = 0.0f64;
        let mut j = 3;
        while term.abs() > 1e-18 * acc.abs().max(1e-300) {
            acc += term;
            term *= -x * x / ((2 * j + 1) as f64 * (2 * j + 2) as f64);
            j += 1;
            if j > 40 {
                break;
            }
        }
        acc
    } else {
        x.cos() - 1.0 + x * x / 2.0 - x.powi(4) / 24.0
    };
    -s / (FOUR_PI * r)
}

/// Radial factor `f` with `(nu.d) f(r)` the part of the normal-derivative kernel
/// `(nu.d)(cos(kr) + kr sin(kr))/(4 pi r^3)` beyond the corrected terms.
fn dipole_rest(k: f64, r: f64) -> f64 {
    let x = k * r;
    if r == 0.0 || k == 0.0 {
        return 0.0;
    }
    if x < 1.0 {
        // sum_{j>=3} (-1)^j (1-2j)/(2j)! x^{2j} / r^3
        let mut acc = 0.0;
        let mut fact = 720.0;
        let mut xp = x.powi(6);
        for j in 3..40 {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            let t = sign * (1.0 - 2.0 * j as f64) / fact * xp;
            acc += t;
            if t.abs() < 1e-18 * acc.abs() {
                break;
            }
            fact *= (2 * j + 1) as f64 * (2 * j + 2) as f64;
            xp *= x * x;
        }
        acc / (FOUR_PI * r * r * r)
    } else {
        (x.cos() + x * x.sin() - 1.0 - x * x / 2.0 + x.powi(4) / 8.0) / (FOUR_PI * r * r * r)
    }
}

/// `-sin(kr)/(4 pi r)`, the imaginary part of the free single-layer kernel.
fn single_imag(k: f64, r: f64) -> f64 {
    if r == 0.0 {
        -k / FOUR_PI
    } else {
        -(k * r).sin() / (FOUR_PI * r)
    }
}

/// Radial factor of the imaginary normal-derivative kernel
/// `(nu.d)(sin(kr) - kr cos(kr))/(4 pi r^3)`.
fn dipole_imag(k: f64, r: f64) -> f64 {
    let x = k * r;
    if x < 0.1 {
        // k^3 sum_{j>=1} (-1)^{j+1} 2j x^{2j-2}/(2j+1)!
        let x2 = x * x;
        k.powi(3) * (1.0 / 3.0 - x2 / 30.0 + x2 * x2 / 840.0 - x2 * x2 * x2 / 45360.0) / FOUR_PI
    } else {
        (x.sin() - x * x.cos()) / (FOUR_PI * r * r * r)
    }
}

/// Corrected singular part of the single layer through `k^4`.
fn corrected_single(corr: &SingularCorrections, k: f64, p: usize, q: usize) -> f64 {
    let k2 = k * k;
    -(corr.get(Correction::InvR)[(p, q)] - 0.5 * k2 * corr.get(Correction::R)[(p, q)]
        + k2 * k2 / 24.0 * corr.get(Correction::R3)[(p, q)])
        / FOUR_PI
}

/// Corrected singular part of the normal-derivative kernel through `k^4`.
fn corrected_dipole(corr: &SingularCorrections, k: f64, p: usize, q: usize) -> f64 {
    let k2 = k * k;
    (corr.get(Correction::DipoleM3)[(p, q)] + 0.5 * k2 * corr.get(Correction::DipoleM1)[(p, q)]
        - k2 * k2 / 8.0 * corr.get(Correction::Dipole1)[(p, q)])
        / FOUR_PI
}

/// Mesh plus its singular corrections.
#[derive(Clone)]
pub struct Discretization {
    pub mesh: QuadratureMesh,
    pub corr: Arc<SingularCorrections>,
    pub basis: Arc<NodalBasis>,
}

impl Discretization {
    pub fn new(mesh: &QuadratureMesh) -> Result<Discretization> {
        let corr = corrections(mesh)?;
        let basis = Arc::new(NodalBasis::new(mesh)?);
        Ok(Discretization { mesh: mesh.clone(), corr, basis })
    }

    pub fn len(&self) -> usize {
        self.mesh.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mesh.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.mesh.weights
    }
}

/// Fills an `n x n` matrix from a kernel satisfying `f(q, p) = conj(f(p, q))`
/// for the smooth part; `f(p, q)` returns `(entry(p,q), entry(q,p))` for `p < q`
/// and the diagonal for `p == q`.
fn fill_pairs(n: usize, f: impl Fn(usize, usize) -> (C64, C64) + Sync) -> Mat<C64> {
    let rows: Vec<Vec<(C64, C64)>> = (0..n).into_par_iter().map(|p| (p..n).map(|q| f(p, q)).collect()).collect();
    let mut m = Mat::<C64>::zeros(n, n);
    for (p, row) in rows.into_iter().enumerate() {
        for (off, (a, b)) in row.into_iter().enumerate() {
            let q = p + off;
            m[(p, q)] = a;
            if q != p {
                m[(q, p)] = b;
            }
        }
    }
    m
}

/// Which operators [`assemble_family`] produces.
#[derive(Clone, Copy, Debug, Default)]
pub struct Wanted {
    pub single_quasi: bool,
    pub dipole_quasi: bool,
    pub single_free: bool,
    pub dipole_free: bool,
}

/// Quasi-periodic and free-space operators at one wavenumber from a single pass.
#[derive(Clone, Debug, Default)]
pub struct OperatorFamily {
    pub single_quasi: Option<BoundaryOperator>,
    pub dipole_quasi: Option<BoundaryOperator>,
    pub single_free: Option<BoundaryOperator>,
    pub dipole_free: Option<BoundaryOperator>,
}

/// Assembles any subset of `S^{alpha,k}`, `(K^{-alpha,k})*`, `S^k`, `(K^k)*`.
///
/// `spec` fixes `k` for all four; `alpha` is ignored by the free operators.
pub fn assemble_family(disc: &Discretization, spec: &KernelSpec, want: Wanted) -> Result<OperatorFamily> {
    let mesh = &disc.mesh;
    let corr = &*disc.corr;
    let n = mesh.len();
    let k = spec.k;
    let quasi = want.single_quasi || want.dipole_quasi;
    let ker = if quasi { Some(LatticeKernel::new(spec)?) } else { None };
    let zero = C64::new(0.0, 0.0);

    // Per-pair smooth data: (R, grad R) at d = x_p - x_q.
    let entries = |p: usize, q: usize| -> [(C64, C64); 4] {
        let d = vec3::sub(mesh.nodes[p], mesh.nodes[q]);
        let r = vec3::norm(d);
        let (wp, wq) = (mesh.weights[p], mesh.weights[q]);
        let (np, nq) = (mesh.normals[p], mesh.normals[q]);
        let (rv, rg) = match &ker {
            Some(kk) => kk.remainder_grad_local(d),
            None => (zero, [zero; 3]),
        };
        let ndp = vec3::dot(np, d);
        let ndq = -vec3::dot(nq, d);
        let gp = np[0] * rg[0] + np[1] * rg[1] + np[2] * rg[2];
        // grad R(-d) = -conj(grad R(d)).
        let gq = -(nq[0] * rg[0].conj() + nq[1] * rg[1].conj() + nq[2] * rg[2].conj());
        let srest = single_rest(k, r);
        let drest = dipole_rest(k, r);
        let mut out = [(zero, zero); 4];
        if want.single_quasi {
            out[0] = (
                C64::from(corrected_single(corr, k, p, q)) + (rv + srest) * wq,
                C64::from(corrected_single(corr, k, q, p)) + (rv.conj() + srest) * wp,
            );
        }
        if want.dipole_quasi {
            out[1] = (
                C64::from(corrected_dipole(corr, k, p, q)) + (gp + ndp * drest) * wq,
                C64::from(corrected_dipole(corr, k, q, p)) + (gq + ndq * drest) * wp,
            );
        }
        if want.single_free {
            let si = C64::new(srest, single_imag(k, r));
            out[2] = (
                C64::from(corrected_single(corr, k, p, q)) + si * wq,
                C64::from(corrected_single(corr, k, q, p)) + si * wp,
            );
        }
        if want.dipole_free {
            let di = C64::new(drest, dipole_imag(k, r));
            out[3] = (
                C64::from(corrected_dipole(corr, k, p, q)) + di * (ndp * wq),
                C64::from(corrected_dipole(corr, k, q, p)) + di * (ndq * wp),
            );
        }
        out
    };

    let rows: Vec<Vec<[(C64, C64); 4]>> =
        (0..n).into_par_iter().map(|p| (p..n).map(|q| entries(p, q)).collect()).collect();
    let (spec_single, spec_dipole) = match &ker {
        Some(kk) => spectral_blocks(mesh, kk, spec.period, want.single_quasi, want.dipole_quasi),
        None => (None, None),
    };
    let build = |slot: usize, kind: OperatorKind, spec: Option<KernelSpec>| {
        let mut m = match (slot, &spec_single, &spec_dipole) {
            (0, Some(b), _) | (1, _, Some(b)) => b.clone(),
            _ => Mat::<C64>::zeros(n, n),
        };
        for (p, row) in rows.iter().enumerate() {
            for (off, e) in row.iter().enumerate() {
                let q = p + off;
                m[(p, q)] += e[slot].0;
                if q != p {
                    m[(q, p)] += e[slot].1;
                }
            }
        }
        BoundaryOperator { matrix: m, kind, spec, basis: disc.basis.clone() }
    };
    let free_spec = Some(KernelSpec { alpha: BlochVector([0.0; 3]), ..*spec });
    Ok(OperatorFamily {
        single_quasi: want.single_quasi.then(|| build(0, OperatorKind::SingleLayerQuasi, Some(*spec))),
        dipole_quasi: want.dipole_quasi.then(|| build(1, OperatorKind::NeumannPoincareQuasi, Some(*spec))),
        single_free: want.single_free.then(|| build(2, OperatorKind::SingleLayerFree, free_spec)),
        dipole_free: want.dipole_free.then(|| build(3, OperatorKind::NeumannPoincareFree, free_spec)),
    })
}

/// Reciprocal-lattice parts of the quasi-periodic matrices, `w_q sum_b c_b e^{i b (x_p - x_q)/s} / s`
/// and its normal derivative at `x_p`, as two rank-`B` products.
fn spectral_blocks(
    mesh: &QuadratureMesh,
    ker: &LatticeKernel,
    s: f64,
    single: bool,
    dipole: bool,
) -> (Option<Mat<C64>>, Option<Mat<C64>>) {
    let terms = ker.spectral_terms();
    let n = mesh.len();
    let nb = terms.len();
    let phase = Mat::<C64>::from_fn(n, nb, |p, b| {
        let (sn, cs) = (vec3::dot(terms[b].0, mesh.nodes[p]) / s).sin_cos();
        C64::new(cs, sn)
    });
    let weighted = Mat::<C64>::from_fn(n, nb, |q, b| phase[(q, b)] * mesh.weights[q]);
    let single = single.then(|| {
        let left = Mat::<C64>::from_fn(n, nb, |p, b| phase[(p, b)] * (terms[b].1 / s));
        &left * weighted.adjoint()
    });
    let dipole = dipole.then(|| {
        let left = Mat::<C64>::from_fn(n, nb, |p, b| {
            let nb_dot = vec3::dot(mesh.normals[p], terms[b].0);
            phase[(p, b)] * C64::new(0.0, terms[b].1 * nb_dot / (s * s))
        });
        &left * weighted.adjoint()
    });
    (single, dipole)
}

/// `S_D^{alpha,k}`.
pub fn assemble_single_layer(mesh: &QuadratureMesh, spec: &KernelSpec) -> Result<BoundaryOperator> {
    let disc = Discretization::new(mesh)?;
    Ok(assemble_family(&disc, spec, Wanted { single_quasi: true, ..Default::default() })?.single_quasi.unwrap())
}

/// `(K_D^{-alpha,k})*`, kernel `d/dnu_x G^{alpha,k}(x - y)`.
pub fn assemble_neumann_poincare(mesh: &QuadratureMesh, spec: &KernelSpec) -> Result<BoundaryOperator> {
    let disc = Discretization::new(mesh)?;
    Ok(assemble_family(&disc, spec, Wanted { dipole_quasi: true, ..Default::default() })?.dipole_quasi.unwrap())
}

/// Free-space `S_D^k`.
pub fn assemble_single_layer_free(mesh: &QuadratureMesh, k: f64) -> Result<BoundaryOperator> {
    let disc = Discretization::new(mesh)?;
    let spec = KernelSpec::ewald(BlochVector([0.0; 3]), k);
    Ok(assemble_family(&disc, &spec, Wanted { single_free: true, ..Default::default() })?.single_free.unwrap())
}

/// Free-space `(K_D^k)*`.
pub fn assemble_neumann_poincare_free(mesh: &QuadratureMesh, k: f64) -> Result<BoundaryOperator> {
    let disc = Discretization::new(mesh)?;
    let spec = KernelSpec::ewald(BlochVector([0.0; 3]), k);
    Ok(assemble_family(&disc, &spec, Wanted { dipole_free: true, ..Default::default() })?.dipole_free.unwrap())
}

/// Operators with the corner-perturbation kernels, `(S_odd, S_1~)`.
pub fn assemble_corner_terms(disc: &Discretization, alpha_tilde: Vec3) -> (BoundaryOperator, BoundaryOperator) {
    let mesh = &disc.mesh;
    let corr = &*disc.corr;
    let ck = CornerKernel::new(alpha_tilde);
    let a = alpha_tilde;
    let n = mesh.len();
    let i = C64::new(0.0, 1.0);
    let sing = |p: usize, q: usize| -> (C64, C64) {
        let mut odd = 0.0;
        let mut second = 0.0;
        for j in 0..3 {
            odd += a[j] * corr.get(Correction::Dir(j))[(p, q)];
            for l in j..3 {
                let c = if j == l { 1.0 } else { 2.0 };
                second += c * a[j] * a[l] * corr.get(Correction::DirDir(j, l))[(p, q)];
            }
        }
        (i * (odd / FOUR_PI), C64::from(second / (2.0 * FOUR_PI)))
    };
    let pairs: Vec<Vec<[(C64, C64); 2]>> = (0..n)
        .into_par_iter()
        .map(|p| {
            (p..n)
                .map(|q| {
                    let d = vec3::sub(mesh.nodes[p], mesh.nodes[q]);
                    let (so, s2) = ck.smooth_parts(d);
                    let (wp, wq) = (mesh.weights[p], mesh.weights[q]);
                    let (ap, bp) = sing(p, q);
                    let (aq, bq) = sing(q, p);
                    [(ap + so * wq, aq + so.conj() * wp), (bp + s2 * wq, bq + s2.conj() * wp)]
                })
                .collect()
        })
        .collect();
    let build = |slot: usize, kind| {
        let mut m = Mat::<C64>::zeros(n, n);
        for (p, row) in pairs.iter().enumerate() {
            for (off, e) in row.iter().enumerate() {
                let q = p + off;
                m[(p, q)] = e[slot].0;
                if q != p {
                    m[(q, p)] = e[slot].1;
                }
            }
        }
        BoundaryOperator { matrix: m, kind, spec: None, basis: disc.basis.clone() }
    };
    (build(0, OperatorKind::OddCorrection), build(1, OperatorKind::S1Correction))
}

/// `S_1^{alpha~}` with kernel `G_1~` at `k = 0`.
pub fn assemble_s1(mesh: &QuadratureMesh, alpha_tilde: Vec3) -> Result<BoundaryOperator> {
    let disc = Discretization::new(mesh)?;
    Ok(assemble_corner_terms(&disc, alpha_tilde).1)
}

/// `S_l^{alpha}`, the coefficient of `k^{2l}` in `S_D^{alpha,k}` (period `s`).
pub fn assemble_series_term(disc: &Discretization, alpha: BlochVector, l: usize, period: f64) -> Result<BoundaryOperator> {
    if l == 0 {
        return Err(Error::InvalidParameter("series order must be positive".into()));
    }
    let mesh = &disc.mesh;
    let corr = &*disc.corr;
    let ser = SeriesKernel::new(alpha, l, period)?;
    let n = mesh.len();
    let sign = if l.is_multiple_of(2) { 1.0 } else { -1.0 };
    let fact: f64 = (1..=2 * l).map(|i| i as f64).product();
    let cmat = match l {
        1 => Some(corr.get(Correction::R)),
        2 => Some(corr.get(Correction::R3)),
        _ => None,
    };
    let m = fill_pairs(n, |p, q| {
        let d = vec3::sub(mesh.nodes[p], mesh.nodes[q]);
        let r = vec3::norm(d);
        let rv = ser.remainder_coeff(l, d);
        let (wp, wq) = (mesh.weights[p], mesh.weights[q]);
        match cmat {
            Some(c) => {
                let f = -sign / (fact * FOUR_PI);
                (f * c[(p, q)] + rv * wq, f * c[(q, p)] + rv.conj() * wp)
            }
            None => {
                let cosp = -sign * r.powi(2 * l as i32 - 1) / (fact * FOUR_PI);
                ((rv + cosp) * wq, (rv.conj() + cosp) * wp)
            }
        }
    });
    let spec = KernelSpec::ewald(alpha, 0.0).with_period(period);
    Ok(BoundaryOperator { matrix: m, kind: OperatorKind::SeriesTerm(l), spec: Some(spec), basis: disc.basis.clone() })
}

/// Dense LU solve with the conditioning and residual contract.
///
/// The system is solved for interpolation coefficients; the returned nodal
/// density is the interpolant's values.
pub fn solve_density(op: &BoundaryOperator, rhs: &[C64]) -> Result<BoundaryDensity> {
    if rhs.len() != op.len() {
        return Err(Error::InvalidParameter(format!("rhs length {} does not match operator size {}", rhs.len(), op.len())));
    }
    let b = &op.basis;
    let c = solve_matrix(&op.reduced(), &b.coefficients(rhs))?;
    Ok(b.values(&c))
}

pub(crate) fn solve_matrix(a: &Mat<C64>, rhs: &[C64]) -> Result<Vec<C64>> {
    let n = a.nrows();
    if rhs.len() != n {
        return Err(Error::InvalidParameter(format!("rhs length {} does not match operator size {n}", rhs.len())));
    }
    let bnorm = rhs.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if bnorm == 0.0 {
        return Ok(vec![C64::new(0.0, 0.0); n]);
    }
    let sv = a.singular_values().map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
    let (smax, smin) = (sv[0], *sv.last().unwrap());
    if !(smin > 1e-12 * smax) {
        return Err(Error::IllConditioned { sigma_min: smin, norm: smax });
    }
    let lu = a.partial_piv_lu();
    let b = Mat::from_fn(n, 1, |p, _| rhs[p]);
    let mut x = lu.solve(&b);
    // One step of refinement keeps the residual contract at larger n.
    for _ in 0..2 {
        let xv: Vec<C64> = (0..n).map(|p| x[(p, 0)]).collect();
        let ax = mat_vec(a, &xv);
        let r = Mat::from_fn(n, 1, |p, _| rhs[p] - ax[p]);
        let rn = (0..n).map(|p| r[(p, 0)].norm_sqr()).sum::<f64>().sqrt();
        if rn <= 1e-13 * bnorm {
            break;
        }
        let dx = lu.solve(&r);
        x = Mat::from_fn(n, 1, |p, _| x[(p, 0)] + dx[(p, 0)]);
    }
    let xv: Vec<C64> = (0..n).map(|p| x[(p, 0)]).collect();
    let ax = mat_vec(a, &xv);
    let res = ax.iter().zip(rhs).map(|(u, v)| (u - v).norm_sqr()).sum::<f64>().sqrt();
    if !(res <= 1e-10 * bnorm) {
        return Err(Error::IllConditioned { sigma_min: smin, norm: smax });
    }
    Ok(xv)
}

/// Kernel for field evaluation away from the surface.
#[derive(Clone, Debug)]
pub enum FieldKernel {
    Free { k: f64 },
    Quasi(Box<LatticeKernel>),
}

impl FieldKernel {
    pub fn quasi(spec: &KernelSpec) -> Result<FieldKernel> {
        Ok(FieldKernel::Quasi(Box::new(LatticeKernel::new(spec)?)))
    }

    fn value_grad(&self, d: Vec3) -> Result<(C64, [C64; 3])> {
        match self {
            FieldKernel::Free { k } => {
                let r = vec3::norm(d);
                if r == 0.0 {
                    return Err(Error::SingularEvaluation);
                }
                let e = C64::new((k * r).cos(), (k * r).sin());
                let g = -e / (FOUR_PI * r);
                // d/dr(-e^{ikr}/(4 pi r)) = -e^{ikr}(ikr - 1)/(4 pi r^2)
                let dr = -e * C64::new(-1.0, k * r) / (FOUR_PI * r * r);
                Ok((g, d.map(|c| dr * (c / r))))
            }
            FieldKernel::Quasi(ker) => ker.value_grad(d),
        }
    }
}

/// Single-layer field `S[phi](x)` and its gradient at a point off the surface.
///
/// Quasi-periodic fields are evaluated at the representative of `x` nearest
/// to the bubble and carried back by the Bloch phase. Targets closer than
/// three node spacings to the surface use a graded polar rule with
/// hyperinterpolated density.
pub fn eval_offsurface_grad(
    mesh: &QuadratureMesh,
    density: &[C64],
    kernel: &FieldKernel,
    x: Vec3,
) -> Result<(C64, [C64; 3])> {
    let zero = C64::new(0.0, 0.0);
    if density.iter().all(|z| *z == zero) {
        return Ok((zero, [zero; 3]));
    }
    let param = mesh.param()?;
    let (x0, phase) = match kernel {
        FieldKernel::Free { .. } => (x, C64::new(1.0, 0.0)),
        FieldKernel::Quasi(ker) => {
            let spec = ker.spec();
            fold_to_bubble(mesh, spec.alpha.0, spec.period, x)
        }
    };
    let pole = param.map.closest_preimage(x0);
    let foot = param.map.point(pole);
    let dist = vec3::norm(vec3::sub(x0, foot));
    if dist == 0.0 {
        return Err(Error::OnSurface);
    }
    let mut v = zero;
    let mut g = [zero; 3];
    if dist < 3.0 * mesh.spacing() {
        let scale = param.map.axes.iter().cloned().fold(0.0, f64::max);
        let rule = PolarRule::graded(param, pole, dist / scale, LocalRule::for_order(param.order));
        let interp = rule.interpolation(param);
        let n = mesh.len();
        for i in 0..rule.len() {
            let mut phi = zero;
            for q in 0..n {
                phi += density[q] * interp[(i, q)];
            }
            let (gv, gg) = kernel.value_grad(vec3::sub(x0, rule.points[i]))?;
            let w = phi * rule.weights[i];
            v += gv * w;
            for j in 0..3 {
                g[j] += gg[j] * w;
            }
        }
    } else {
        for ((y, wq), d) in mesh.nodes.iter().zip(&mesh.weights).zip(density) {
            let (gv, gg) = kernel.value_grad(vec3::sub(x0, *y))?;
            let w = d * wq;
            v += gv * w;
            for j in 0..3 {
                g[j] += gg[j] * w;
            }
        }
    }
    Ok((v * phase, g.map(|c| c * phase)))
}

/// Lattice translate `x - s m` of `x` nearest to the bubble, with the Bloch
/// phase `e^{i alpha . s m}` that carries quasi-periodic fields back to `x`.
pub fn fold_to_bubble(mesh: &QuadratureMesh, alpha: Vec3, period: f64, x: Vec3) -> (Vec3, C64) {
    let s = period;
    let base = x.map(|c| (c / s).round());
    let mut best = (f64::INFINITY, x, [0.0; 3]);
    for e1 in -1..=1 {
        for e2 in -1..=1 {
            for e3 in -1..=1 {
                let m = [base[0] + e1 as f64, base[1] + e2 as f64, base[2] + e3 as f64];
                let y = vec3::sub(x, vec3::scale(m, s));
                let dist = surface_distance(mesh, y);
                if dist < best.0 {
                    best = (dist, y, m);
                }
            }
        }
    }
    let t = s * vec3::dot(alpha, best.2);
    (best.1, C64::new(t.cos(), t.sin()))
}

/// Single-layer field value off the surface.
pub fn eval_offsurface(mesh: &QuadratureMesh, density: &[C64], spec: &KernelSpec, x: Vec3) -> Result<C64> {
    Ok(eval_offsurface_grad(mesh, density, &FieldKernel::quasi(spec)?, x)?.0)
}

/// Distance from `x` to the (parameterized) surface.
pub fn surface_distance(mesh: &QuadratureMesh, x: Vec3) -> f64 {
    match mesh.param() {
        Ok(param) => {
            let s = param.map.closest_preimage(x);
            vec3::norm(vec3::sub(x, param.map.point(s)))
        }
        Err(_) => mesh.nodes.iter().map(|y| vec3::norm(vec3::sub(x, *y))).fold(f64::INFINITY, f64::min),
    }
}
