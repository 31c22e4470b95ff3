//! Free-space and quasi-periodic Helmholtz Green functions on the cubic lattice.
//!
//! The quasi-periodic kernel for period `s` is
//! `G(x) = s^-3 sum_n e^{i beta_n x} / (k^2 - |beta_n|^2)`, `beta_n = 2 pi n / s + alpha`.
//! Everything is evaluated in the reduced frame of period one through
//! `G_s^{alpha,k}(x) = G_1^{s alpha, s k}(x / s) / s`.
//!
//! Besides the kernel itself this module provides
//! * the smooth remainder `R(x) = G(x) + cos(k|x|) / (4 pi |x|)`, which is analytic
//!   in `k^2` and is what the boundary operators add to the free-space part;
//! * the Taylor coefficients of `R` in `k^2` (and hence `G_l^{alpha,#}`);
//! * the first two corner-perturbation kernels `G_odd` and `G_1~` defined by
//!   `e^{-i eps a.x} G^{alpha*+eps a,0}(x) = G^{alpha*,0}(x) + eps G_odd(x) + eps^2 G_1~(x) + O(eps^3)`.

use std::f64::consts::PI;

use errorfunctions::{ComplexErrorFunctions, RealErrorFunctions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vec3::{self, Vec3};
use crate::C64;

const SQRT_PI: f64 = 1.772_453_850_905_516;
const FOUR_PI: f64 = 4.0 * PI;

/// Default Ewald splitting parameter, in reduced (unit-period) coordinates.
pub const DEFAULT_EWALD_SPLIT: f64 = 4.0;
/// Default box bound on spectral indices for the Ewald sum.
pub const DEFAULT_EWALD_TRUNCATION: usize = 8;
/// Default truncation of the plain spectral series.
pub const DEFAULT_SPECTRAL_TRUNCATION: usize = 60;
/// Largest neglected Gaussian factor in either half of the Ewald sum.
const EWALD_TAIL: f64 = 38.0;
/// Below `|x| eta = ORIGIN_SWITCH` the origin term of the remainder uses its Taylor series.
const ORIGIN_SWITCH: f64 = 0.5;
const ORIGIN_TERMS: usize = 12;

/// Quasi-momentum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlochVector(pub Vec3);

impl BlochVector {
    pub fn new(a: Vec3) -> BlochVector {
        BlochVector(a)
    }

    /// The Brillouin-zone corner `(pi, pi, pi)`.
    pub fn star() -> BlochVector {
        BlochVector([PI; 3])
    }

    pub fn components(&self) -> Vec3 {
        self.0
    }

    /// Canonical representative in `(-pi, pi]^3` for the unit lattice.
    pub fn wrapped(&self) -> BlochVector {
        BlochVector(self.0.map(wrap_angle))
    }

    pub fn neg(&self) -> BlochVector {
        BlochVector(self.0.map(|c| -c))
    }

    pub fn add(&self, d: Vec3) -> BlochVector {
        BlochVector(vec3::add(self.0, d))
    }

    pub fn scaled(&self, s: f64) -> BlochVector {
        BlochVector(vec3::scale(self.0, s))
    }

    /// True when the vector is a reciprocal-lattice point of the unit lattice.
    pub fn is_zero(&self) -> bool {
        self.wrapped().0.iter().all(|c| c.abs() < 1e-14)
    }
}

/// Maps an angle to `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    let y = x - 2.0 * PI * ((x + PI) / (2.0 * PI)).floor();
    if y <= -PI {
        y + 2.0 * PI
    } else {
        y
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SumMode {
    Spectral,
    Ewald,
}

/// Parameters of a quasi-periodic kernel evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub alpha: BlochVector,
    pub k: f64,
    /// Box bound `N` on spectral indices `|n|_inf <= N`.
    pub truncation: usize,
    /// Ewald parameter in reduced coordinates.
    pub ewald_split: f64,
    pub mode: SumMode,
    /// Lattice period `s`.
    pub period: f64,
}

impl KernelSpec {
    pub fn ewald(alpha: BlochVector, k: f64) -> KernelSpec {
        KernelSpec {
            alpha,
            k,
            truncation: DEFAULT_EWALD_TRUNCATION,
            ewald_split: DEFAULT_EWALD_SPLIT,
            mode: SumMode::Ewald,
            period: 1.0,
        }
    }

    pub fn spectral(alpha: BlochVector, k: f64, truncation: usize) -> KernelSpec {
        KernelSpec { truncation, mode: SumMode::Spectral, ..KernelSpec::ewald(alpha, k) }
    }

    pub fn with_period(self, period: f64) -> KernelSpec {
        KernelSpec { period, ..self }
    }

    pub fn with_split(self, eta: f64) -> KernelSpec {
        KernelSpec { ewald_split: eta, ..self }
    }

    /// Bloch vector and wavenumber in the unit-period frame.
    pub fn reduced(&self) -> (Vec3, f64) {
        (self.alpha.scaled(self.period).wrapped().0, self.k * self.period)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 0.0) || !self.k.is_finite() {
            return Err(Error::InvalidParameter(format!("wavenumber must be finite and nonnegative, got {}", self.k)));
        }
        if !(self.period > 0.0) {
            return Err(Error::InvalidParameter(format!("period must be positive, got {}", self.period)));
        }
        if !(self.ewald_split > 0.0) {
            return Err(Error::InvalidParameter(format!("Ewald split must be positive, got {}", self.ewald_split)));
        }
        if self.truncation == 0 {
            return Err(Error::InvalidParameter("truncation must be positive".into()));
        }
        let (alpha, k) = self.reduced();
        if k == 0.0 && BlochVector(alpha).is_zero() {
            return Err(Error::UndefinedAtZeroAlpha);
        }
        check_resonance(alpha, k, self.truncation as i64)
    }
}

/// Rejects `k` within the relative guard of some `|2 pi n + alpha|`, `|n|_inf <= N`.
fn check_resonance(alpha: Vec3, k: f64, nmax: i64) -> Result<()> {
    let guard = 1e-10 * f64::max(1.0, k * k);
    // Only indices near the sphere |beta| = k can trigger the guard.
    let reach = ((k + 1.0) / (2.0 * PI)).ceil() as i64 + 1;
    let lim = reach.min(nmax);
    for n1 in -lim..=lim {
        for n2 in -lim..=lim {
            for n3 in -lim..=lim {
                let b = beta([n1, n2, n3], alpha);
                let gap = k * k - vec3::dot(b, b);
                if gap.abs() <= guard {
                    return Err(Error::ResonantDenominator { n: [n1, n2, n3], gap });
                }
            }
        }
    }
    Ok(())
}

#[inline]
fn beta(n: [i64; 3], alpha: Vec3) -> Vec3 {
    [
        2.0 * PI * n[0] as f64 + alpha[0],
        2.0 * PI * n[1] as f64 + alpha[1],
        2.0 * PI * n[2] as f64 + alpha[2],
    ]
}

#[inline]
fn erf(x: f64) -> f64 {
    libm::erf(x)
}

#[inline]
fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// `erfc(x + ia)` for small `a` by Taylor expansion in `a` about the real axis.
fn erfc_shifted(x: f64, a: f64) -> C64 {
    // d^j/dx^j erfc = (2/sqrt(pi)) (-1)^j H_{j-1}(x) e^{-x^2}
    let e = 2.0 / SQRT_PI * (-x * x).exp();
    let (mut h0, mut h1) = (0.0, 1.0); // H_{j-2}, H_{j-1}
    let mut pw = C64::new(1.0, 0.0); // (-ia)^j / j!
    let mut acc = C64::new(0.0, 0.0);
    let mut quiet = 0;
    for j in 1..80 {
        pw *= C64::new(0.0, -a / j as f64);
        if j > 1 {
            let h = 2.0 * x * h1 - 2.0 * (j - 2) as f64 * h0;
            h0 = h1;
            h1 = h;
        }
        let t = pw * h1;
        acc += t;
        // Hermite values vanish in alternation at x = 0; require two small terms.
        if t.norm_sqr() <= 1e-34 * acc.norm_sqr() {
            quiet += 1;
            if quiet == 2 {
                break;
            }
        } else {
            quiet = 0;
        }
    }
    C64::new(erfc(x), 0.0) + acc * e
}

/// Below this `a * max(1, x)` the Taylor path of `erfc(x + ia)` is used.
const SHIFTED_ERFC_LIMIT: f64 = 1.0;

#[inline]
fn cis(t: f64) -> C64 {
    let (s, c) = t.sin_cos();
    C64::new(c, s)
}

/// `-e^{ik|x|} / (4 pi |x|)`.
pub fn eval_free_green(x: Vec3, k: f64) -> Result<C64> {
    let r = vec3::norm(x);
    if r == 0.0 {
        return Err(Error::SingularEvaluation);
    }
    Ok(-cis(k * r) / (FOUR_PI * r))
}

/// Quasi-periodic Green function at `x`.
pub fn eval_quasi_green(x: Vec3, spec: &KernelSpec) -> Result<C64> {
    LatticeKernel::new(spec)?.value(x)
}

/// Spectral sum `sum_n w(beta_n) e^{i beta_n x}` over a ball of indices.
#[derive(Clone, Debug)]
struct SpectralSum {
    alpha: Vec3,
    nmax: i64,
    rows: Vec<SpectralRow>,
}

#[derive(Clone, Debug)]
struct SpectralRow {
    n1: usize,
    n2: usize,
    n3_lo: usize,
    coef: Vec<f64>,
}

impl SpectralSum {
    /// Collects `w(beta)` for `|n|_inf <= nmax` and `|beta| <= radius`.
    fn new(alpha: Vec3, nmax: i64, radius: f64, mut w: impl FnMut(Vec3) -> f64) -> SpectralSum {
        let mut rows = Vec::new();
        for n1 in -nmax..=nmax {
            for n2 in -nmax..=nmax {
                let mut lo = None;
                let mut coef = Vec::new();
                for n3 in -nmax..=nmax {
                    let b = beta([n1, n2, n3], alpha);
                    if vec3::norm(b) <= radius {
                        if lo.is_none() {
                            lo = Some(n3);
                        }
                        // Gaps inside a row cannot occur for a ball.
                        coef.push(w(b));
                    }
                }
                if let Some(lo) = lo {
                    rows.push(SpectralRow {
                        n1: (n1 + nmax) as usize,
                        n2: (n2 + nmax) as usize,
                        n3_lo: (lo + nmax) as usize,
                        coef,
                    });
                }
            }
        }
        SpectralSum { alpha, nmax, rows }
    }

    fn axis_phases(&self, x: Vec3) -> [Vec<C64>; 3] {
        let m = 2 * self.nmax as usize + 1;
        let mk = |t: f64| -> Vec<C64> { (0..m).map(|i| cis(2.0 * PI * (i as f64 - self.nmax as f64) * t)).collect() };
        [mk(x[0]), mk(x[1]), mk(x[2])]
    }

    /// Flattened `(beta_n, w(beta_n))`.
    fn terms(&self) -> Vec<(Vec3, f64)> {
        let nm = self.nmax as f64;
        let b = |i: usize, a: f64| 2.0 * PI * (i as f64 - nm) + a;
        let mut out = Vec::new();
        for row in &self.rows {
            for (j, c) in row.coef.iter().enumerate() {
                let beta = [b(row.n1, self.alpha[0]), b(row.n2, self.alpha[1]), b(row.n3_lo + j, self.alpha[2])];
                out.push((beta, *c));
            }
        }
        out
    }

    fn value(&self, x: Vec3) -> C64 {
        let [z1, z2, z3] = self.axis_phases(x);
        let mut acc = C64::new(0.0, 0.0);
        for row in &self.rows {
            let mut inner = C64::new(0.0, 0.0);
            for (c, z) in row.coef.iter().zip(&z3[row.n3_lo..]) {
                inner += z * *c;
            }
            acc += z1[row.n1] * z2[row.n2] * inner;
        }
        acc * cis(vec3::dot(self.alpha, x))
    }

    fn value_grad(&self, x: Vec3) -> (C64, [C64; 3]) {
        let [z1, z2, z3] = self.axis_phases(x);
        let nm = self.nmax as f64;
        let zero = C64::new(0.0, 0.0);
        let (mut v, mut g) = (zero, [zero; 3]);
        for row in &self.rows {
            let (mut i0, mut i3) = (zero, zero);
            for (j, (c, z)) in row.coef.iter().zip(&z3[row.n3_lo..]).enumerate() {
                let b3 = 2.0 * PI * ((row.n3_lo + j) as f64 - nm) + self.alpha[2];
                let t = z * *c;
                i0 += t;
                i3 += t * b3;
            }
            let p = z1[row.n1] * z2[row.n2];
            let b1 = 2.0 * PI * (row.n1 as f64 - nm) + self.alpha[0];
            let b2 = 2.0 * PI * (row.n2 as f64 - nm) + self.alpha[1];
            let pi0 = p * i0;
            v += pi0;
            g[0] += pi0 * b1;
            g[1] += pi0 * b2;
            g[2] += p * i3;
        }
        let e = cis(vec3::dot(self.alpha, x));
        let ie = C64::new(0.0, 1.0) * e;
        (v * e, [g[0] * ie, g[1] * ie, g[2] * ie])
    }
}

/// Lattice points `m` with `|x - m| < radius`.
fn lattice_ball(x: Vec3, radius: f64, mut f: impl FnMut([i64; 3], Vec3, f64)) {
    let lo = x.map(|c| (c - radius).floor() as i64);
    let hi = x.map(|c| (c + radius).ceil() as i64);
    for m1 in lo[0]..=hi[0] {
        for m2 in lo[1]..=hi[1] {
            for m3 in lo[2]..=hi[2] {
                let d = [x[0] - m1 as f64, x[1] - m2 as f64, x[2] - m3 as f64];
                let rho = vec3::norm(d);
                if rho < radius {
                    f([m1, m2, m3], d, rho);
                }
            }
        }
    }
}

#[inline]
fn lattice_phase(alpha: Vec3, m: [i64; 3]) -> C64 {
    cis(alpha[0] * m[0] as f64 + alpha[1] * m[1] as f64 + alpha[2] * m[2] as f64)
}

/// Radial Ewald profile `M(rho) = 2 Re(e^{ik rho} erfc(rho eta + i k/(2 eta)))` and its derivative.
#[inline]
fn ewald_profile(rho: f64, k: f64, eta: f64) -> (f64, f64) {
    if k == 0.0 {
        let m = 2.0 * erfc(rho * eta);
        let dm = -4.0 * eta / SQRT_PI * (-(rho * eta).powi(2)).exp();
        (m, dm)
    } else {
        let a = k / (2.0 * eta);
        let x = rho * eta;
        let g = (a * a - x * x).exp();
        let w = if a * x.max(1.0) < SHIFTED_ERFC_LIMIT {
            cis(k * rho) * erfc_shifted(x, a)
        } else {
            C64::new(x, a).erfcx() * g
        };
        (2.0 * w.re, -2.0 * k * w.im - 4.0 * eta / SQRT_PI * g)
    }
}

/// Quasi-periodic Helmholtz kernel ready for repeated evaluation.
#[derive(Clone, Debug)]
pub struct LatticeKernel {
    spec: KernelSpec,
    alpha: Vec3,
    k: f64,
    eta: f64,
    spectral: SpectralSum,
    spatial_radius: f64,
    /// Coefficients of the small-|x| expansion of the origin part of `R`.
    origin_series: [f64; ORIGIN_TERMS],
}

impl LatticeKernel {
    pub fn new(spec: &KernelSpec) -> Result<LatticeKernel> {
        spec.validate()?;
        let (alpha, k) = spec.reduced();
        let eta = spec.ewald_split;
        let nmax = spec.truncation as i64;
        let spectral = match spec.mode {
            SumMode::Ewald => {
                let c = 1.0 / (4.0 * eta * eta);
                let radius = ((EWALD_TAIL + k * k * c) / c).sqrt();
                SpectralSum::new(alpha, nmax, radius, |b| {
                    let bb = vec3::dot(b, b);
                    ((k * k - bb) * c).exp() / (k * k - bb)
                })
            }
            SumMode::Spectral => SpectralSum::new(alpha, nmax, f64::INFINITY, |b| 1.0 / (k * k - vec3::dot(b, b))),
        };
        let a = k / (2.0 * eta);
        let spatial_radius = (EWALD_TAIL + a * a).sqrt() / eta;
        Ok(LatticeKernel { spec: *spec, alpha, k, eta, spectral, spatial_radius, origin_series: origin_series(k, eta) })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    #[inline]
    fn s(&self) -> f64 {
        self.spec.period
    }

    /// `G(x)`; singular on the lattice.
    pub fn value(&self, x: Vec3) -> Result<C64> {
        let xr = vec3::scale(x, 1.0 / self.s());
        let v = match self.spec.mode {
            SumMode::Spectral => self.spectral.value(xr),
            SumMode::Ewald => {
                let mut v = self.spectral.value(xr);
                let mut hit = false;
                lattice_ball(xr, self.spatial_radius, |m, _, rho| {
                    if rho == 0.0 {
                        hit = true;
                        return;
                    }
                    let (mm, _) = ewald_profile(rho, self.k, self.eta);
                    v -= lattice_phase(self.alpha, m) * (mm / (8.0 * PI * rho));
                });
                if hit {
                    return Err(Error::SingularEvaluation);
                }
                v
            }
        };
        Ok(v / self.s())
    }

    /// `G(x)` and its gradient.
    pub fn value_grad(&self, x: Vec3) -> Result<(C64, [C64; 3])> {
        let s = self.s();
        let xr = vec3::scale(x, 1.0 / s);
        let (mut v, mut g) = self.spectral.value_grad(xr);
        if self.spec.mode == SumMode::Ewald {
            let mut hit = false;
            lattice_ball(xr, self.spatial_radius, |m, d, rho| {
                if rho == 0.0 {
                    hit = true;
                    return;
                }
                let (mm, dm) = ewald_profile(rho, self.k, self.eta);
                let ph = lattice_phase(self.alpha, m);
                v -= ph * (mm / (8.0 * PI * rho));
                let radial = -(dm * rho - mm) / (8.0 * PI * rho * rho * rho);
                for j in 0..3 {
                    g[j] += ph * (radial * d[j]);
                }
            });
            if hit {
                return Err(Error::SingularEvaluation);
            }
        }
        Ok((v / s, g.map(|c| c / (s * s))))
    }

    /// Smooth remainder `R(x) = G(x) + cos(k|x|)/(4 pi |x|)` and its gradient (Ewald mode).
    pub fn remainder_grad(&self, x: Vec3) -> (C64, [C64; 3]) {
        let s = self.s();
        let (v, g) = self.spectral.value_grad(vec3::scale(x, 1.0 / s));
        let (lv, lg) = self.remainder_grad_local(x);
        (v / s + lv, [0, 1, 2].map(|j| g[j] / (s * s) + lg[j]))
    }

    /// Reciprocal-lattice terms of `R` as `(beta, c)`, so that the spectral part is
    /// `sum c e^{i beta x / s} / s` at period `s`.
    pub fn spectral_terms(&self) -> Vec<(Vec3, f64)> {
        self.spectral.terms()
    }

    /// `R` minus its spectral part: the short-range lattice sum and origin term.
    pub fn remainder_grad_local(&self, x: Vec3) -> (C64, [C64; 3]) {
        let s = self.s();
        let xr = vec3::scale(x, 1.0 / s);
        let zero = C64::new(0.0, 0.0);
        let (mut v, mut g) = (zero, [zero; 3]);
        lattice_ball(xr, self.spatial_radius.max(vec3::norm(xr) + 1e-300), |m, d, rho| {
            if m == [0, 0, 0] {
                let (f, df) = self.origin_part(rho);
                v += f;
                for j in 0..3 {
                    g[j] += df * d[j];
                }
                return;
            }
            if rho >= self.spatial_radius {
                return;
            }
            let (mm, dm) = ewald_profile(rho, self.k, self.eta);
            let ph = lattice_phase(self.alpha, m);
            v -= ph * (mm / (8.0 * PI * rho));
            let radial = -(dm * rho - mm) / (8.0 * PI * rho * rho * rho);
            for j in 0..3 {
                g[j] += ph * (radial * d[j]);
            }
        });
        (v / s, g.map(|c| c / (s * s)))
    }

    /// Smooth remainder value only.
    pub fn remainder(&self, x: Vec3) -> C64 {
        let s = self.s();
        let xr = vec3::scale(x, 1.0 / s);
        let mut v = self.spectral.value(xr);
        lattice_ball(xr, self.spatial_radius.max(vec3::norm(xr) + 1e-300), |m, _, rho| {
            if m == [0, 0, 0] {
                v += self.origin_part(rho).0;
            } else if rho < self.spatial_radius {
                let (mm, _) = ewald_profile(rho, self.k, self.eta);
                v -= lattice_phase(self.alpha, m) * (mm / (8.0 * PI * rho));
            }
        });
        v / s
    }

    /// `N(r)/(8 pi r)` with `N = 2 cos(kr) - M(r)`, and `f'(r)/r`.
    fn origin_part(&self, r: f64) -> (f64, f64) {
        if r * self.eta < ORIGIN_SWITCH {
            let c = &self.origin_series;
            let r2 = r * r;
            let mut f = 0.0;
            let mut df = 0.0;
            for j in (0..ORIGIN_TERMS).rev() {
                f = f * r2 + c[j];
            }
            for j in (1..ORIGIN_TERMS).rev() {
                df = df * r2 + 2.0 * j as f64 * c[j];
            }
            (f / (8.0 * PI), df / (8.0 * PI))
        } else {
            let (mm, dm) = ewald_profile(r, self.k, self.eta);
            let (sk, ck) = (self.k * r).sin_cos();
            let n = 2.0 * ck - mm;
            let dn = -2.0 * self.k * sk - dm;
            (n / (8.0 * PI * r), (dn * r - n) / (8.0 * PI * r * r * r))
        }
    }
}

/// Taylor coefficients `c_1, c_3, ...` of `N(r) = sum c_{2j+1} r^{2j+1}`.
fn origin_series(k: f64, eta: f64) -> [f64; ORIGIN_TERMS] {
    let a = k / (2.0 * eta);
    let ea = (a * a).exp() / SQRT_PI;
    let erfi = RealErrorFunctions::erfi(a);
    let mut out = [0.0; ORIGIN_TERMS];
    let mut fact = 1.0; // (2j+1)!
    for (j, slot) in out.iter_mut().enumerate() {
        if j > 0 {
            fact *= (2 * j) as f64 * (2 * j + 1) as f64;
        }
        // Q_j = sum_i 2^{i+1} (2i-1)!! eta^{2i+1} k^{2(j-i)}
        let mut q = 0.0;
        let mut dfact = 1.0;
        for i in 0..=j {
            if i > 0 {
                dfact *= (2 * i - 1) as f64;
            }
            q += 2f64.powi(i as i32 + 1) * dfact * eta.powi(2 * i as i32 + 1) * k.powi(2 * (j - i) as i32);
        }
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        *slot = 2.0 * sign * (ea * q - k.powi(2 * j as i32 + 1) * erfi) / fact;
    }
    out
}

/// Upper incomplete gamma `Gamma(1/2 - l, x)` for `x > 0` by downward recurrence.
fn upper_gamma_half(l: usize, x: f64) -> f64 {
    let mut g = SQRT_PI * erfc(x.sqrt());
    let mut s = 0.5;
    for _ in 0..l {
        s -= 1.0;
        g = (g - x.powf(s) * (-x).exp()) / s;
    }
    g
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Coefficients of `k^{2l}`, `l = 1..=L`, of the smooth remainder at fixed `alpha`.
#[derive(Clone, Debug)]
pub struct SeriesKernel {
    alpha: Vec3,
    eta: f64,
    period: f64,
    spatial_radius: f64,
    spectral: Vec<SpectralSum>,
}

impl SeriesKernel {
    pub fn new(alpha: BlochVector, max_order: usize, period: f64) -> Result<SeriesKernel> {
        let alpha = alpha.scaled(period).wrapped().0;
        if BlochVector(alpha).is_zero() {
            return Err(Error::UndefinedAtZeroAlpha);
        }
        let eta = DEFAULT_EWALD_SPLIT;
        let c = 1.0 / (4.0 * eta * eta);
        let radius = ((EWALD_TAIL + 10.0) / c).sqrt();
        let nmax = DEFAULT_EWALD_TRUNCATION as i64 + 1;
        let spectral = (1..=max_order)
            .map(|l| {
                SpectralSum::new(alpha, nmax, radius, |b| {
                    let bb = vec3::dot(b, b);
                    let mut acc = 0.0;
                    for i in 0..=l {
                        acc += c.powi(i as i32) / factorial(i) * bb.powi(-((l - i) as i32));
                    }
                    -(-c * bb).exp() / bb * acc
                })
            })
            .collect();
        let spatial_radius = (EWALD_TAIL + 10.0).sqrt() / eta;
        Ok(SeriesKernel { alpha, eta, period, spatial_radius, spectral })
    }

    pub fn max_order(&self) -> usize {
        self.spectral.len()
    }

    /// Coefficient of `k^{2l}` in `R(x)`.
    pub fn remainder_coeff(&self, l: usize, x: Vec3) -> C64 {
        assert!(l >= 1 && l <= self.max_order(), "series order out of range");
        let s = self.period;
        let xr = vec3::scale(x, 1.0 / s);
        let mut v = self.spectral[l - 1].value(xr);
        let pref = (FOUR_PI).powf(-1.5) / factorial(l);
        let eta = self.eta;
        lattice_ball(xr, self.spatial_radius.max(vec3::norm(xr) + 1e-300), |m, _, rho| {
            if m == [0, 0, 0] {
                let x2 = (rho * eta).powi(2);
                if x2 < 1.0 {
                    // Gamma(s) part cancels against the cosine term exactly.
                    let sh = 0.5 - l as f64;
                    let mut term = 1.0;
                    let mut acc = 0.0;
                    for j in 0..60 {
                        if j > 0 {
                            term *= -x2 / j as f64;
                        }
                        acc += term / (sh + j as f64);
                        if term.abs() < 1e-18 {
                            break;
                        }
                    }
                    v += pref * (2.0 * eta).powi(1 - 2 * l as i32) * acc;
                } else {
                    let sp = -pref * (rho / 2.0).powi(2 * l as i32 - 1) * upper_gamma_half(l, x2);
                    let sign = if l.is_multiple_of(2) { 1.0 } else { -1.0 };
                    v += sp + sign * rho.powi(2 * l as i32 - 1) / (factorial(2 * l) * FOUR_PI);
                }
            } else if rho < self.spatial_radius {
                let sp = -pref * (rho / 2.0).powi(2 * l as i32 - 1) * upper_gamma_half(l, (rho * eta).powi(2));
                v += lattice_phase(self.alpha, m) * sp;
            }
        });
        v * s.powi(2 * l as i32 - 1)
    }

    /// `G_l^{alpha,#}(x)`: coefficient of `k^{2l}` in the full kernel.
    pub fn green_coeff(&self, l: usize, x: Vec3) -> C64 {
        let r = vec3::norm(x);
        let sign = if l.is_multiple_of(2) { 1.0 } else { -1.0 };
        self.remainder_coeff(l, x) - sign * r.powi(2 * l as i32 - 1) / (factorial(2 * l) * FOUR_PI)
    }
}

/// `G_l^{alpha,#}(x) = -sum_{|n|_inf <= N} e^{i beta x} / |beta|^{2(l+1)}`.
///
/// The truncation error is `O(N^{-(2l-1)})`.
pub fn eval_g_ell_sharp(x: Vec3, alpha: BlochVector, l: usize, truncation: usize) -> Result<C64> {
    if l == 0 {
        return Err(Error::InvalidParameter("series order must be positive".into()));
    }
    let a = alpha.wrapped().0;
    if BlochVector(a).is_zero() {
        return Err(Error::UndefinedAtZeroAlpha);
    }
    let sum = SpectralSum::new(a, truncation as i64, f64::INFINITY, |b| -vec3::dot(b, b).powi(-(l as i32 + 1)));
    Ok(sum.value(x))
}

/// Perturbation kernels around the zone corner at `k = 0`.
#[derive(Clone, Debug)]
pub struct CornerKernel {
    alpha_tilde: Vec3,
    eta: f64,
    spatial_radius: f64,
    odd: SpectralSum,
    second: SpectralSum,
}

impl CornerKernel {
    pub fn new(alpha_tilde: Vec3) -> CornerKernel {
        let eta = DEFAULT_EWALD_SPLIT;
        let c = 1.0 / (4.0 * eta * eta);
        let radius = ((EWALD_TAIL + 5.0) / c).sqrt();
        let nmax = DEFAULT_EWALD_TRUNCATION as i64 + 1;
        let star = [PI; 3];
        let dfs = |bb: f64| (-c * bb).exp() * (c / bb + 1.0 / (bb * bb));
        let d2fs = |bb: f64| -(-c * bb).exp() * (c * c / bb + 2.0 * c / (bb * bb) + 2.0 / (bb * bb * bb));
        let at2 = vec3::dot(alpha_tilde, alpha_tilde);
        let odd = SpectralSum::new(star, nmax, radius, |b| 2.0 * dfs(vec3::dot(b, b)) * vec3::dot(b, alpha_tilde));
        let second = SpectralSum::new(star, nmax, radius, |b| {
            let bb = vec3::dot(b, b);
            let ba = vec3::dot(b, alpha_tilde);
            dfs(bb) * at2 + 2.0 * d2fs(bb) * ba * ba
        });
        CornerKernel { alpha_tilde, eta, spatial_radius: (EWALD_TAIL + 5.0).sqrt() / eta, odd, second }
    }

    pub fn alpha_tilde(&self) -> Vec3 {
        self.alpha_tilde
    }

    /// `(G_odd - i a.x/(4 pi |x|), G_1~ - (a.x)^2/(8 pi |x|))`: the kernels with
    /// their nonsmooth origin terms removed.
    pub fn smooth_parts(&self, x: Vec3) -> (C64, C64) {
        let mut odd = self.odd.value(x);
        let mut second = self.second.value(x);
        let i = C64::new(0.0, 1.0);
        let eta = self.eta;
        let star = [PI; 3];
        lattice_ball(x, self.spatial_radius.max(vec3::norm(x) + 1e-300), |m, d, rho| {
            let ad = vec3::dot(self.alpha_tilde, d);
            if m == [0, 0, 0] {
                // erf(eta r)/r -> 2 eta / sqrt(pi) at the origin.
                let e = if rho * eta < 1e-8 { 2.0 * eta / SQRT_PI } else { erf(rho * eta) / rho };
                odd -= i * (ad * e / FOUR_PI);
                second -= C64::from(ad * ad * e / (2.0 * FOUR_PI));
            } else if rho < self.spatial_radius {
                let ph = lattice_phase(star, m);
                let e = erfc(rho * eta) / rho;
                // d = x - m, so a.(m - x) = -ad.
                odd += ph * i * (ad * e / FOUR_PI);
                second += ph * (ad * ad * e / (2.0 * FOUR_PI));
            }
        });
        (odd, second)
    }

    /// `G_odd(x)`; undefined at the origin.
    pub fn odd(&self, x: Vec3) -> C64 {
        let r = vec3::norm(x);
        self.smooth_parts(x).0 + C64::new(0.0, vec3::dot(self.alpha_tilde, x) / (FOUR_PI * r))
    }

    /// `G_1~(x)`; continuous but not smooth at the origin.
    pub fn second(&self, x: Vec3) -> C64 {
        let r = vec3::norm(x);
        let ad = vec3::dot(self.alpha_tilde, x);
        let sing = if r == 0.0 { 0.0 } else { ad * ad / (2.0 * FOUR_PI * r) };
        self.smooth_parts(x).1 + sing
    }
}

/// `G_1~(x)` by the plain spectral sum at `k = 0`:
/// `sum_n e^{i beta x} (|a|^2/|beta|^4 - 4 (beta.a)^2/|beta|^6)`, `beta = 2 pi n + alpha*`.
pub fn eval_g1_tilde(x: Vec3, alpha_tilde: Vec3, truncation: usize) -> C64 {
    let at2 = vec3::dot(alpha_tilde, alpha_tilde);
    let sum = SpectralSum::new([PI; 3], truncation as i64, f64::INFINITY, |b| {
        let bb = vec3::dot(b, b);
        let ba = vec3::dot(b, alpha_tilde);
        at2 / (bb * bb) - 4.0 * ba * ba / (bb * bb * bb)
    });
    sum.value(x)
}

/// `G_1~(x)` by the Ewald split.
pub fn eval_g1_tilde_ewald(x: Vec3, alpha_tilde: Vec3) -> C64 {
    CornerKernel::new(alpha_tilde).second(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: C64, b: C64, tol: f64) -> bool {
        (a - b).norm() <= tol * b.norm().max(1e-300)
    }

    #[test]
    fn shifted_erfc_matches_faddeeva() {
        for &x in &[0.0, 0.3, 1.0, 2.5, 4.0, 6.5] {
            for &a in &[1e-6, 0.01, 0.1, 0.2, 0.15] {
                let z = C64::new(x, a);
                let want = z.erfcx() * (-(z * z)).exp();
                let got = erfc_shifted(x, a);
                let scale = (-(x * x) + a * a).exp();
                assert!((got - want).norm() <= 1e-14 * scale, "x={x} a={a}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn free_green_values() {
        let g = eval_free_green([1.0, 0.0, 0.0], 0.0).unwrap();
        assert!((g.re + 1.0 / (4.0 * PI)).abs() < 1e-15 && g.im == 0.0);
        let g = eval_free_green([0.5, 0.0, 0.0], 2.0 * PI).unwrap();
        assert!((g.re - 1.0 / (2.0 * PI)).abs() < 1e-14 && g.im.abs() < 1e-14);
        let g = eval_free_green([0.3, -0.2, 0.1], 7.3).unwrap();
        assert!((g.norm() - 1.0 / (4.0 * PI * vec3::norm([0.3, -0.2, 0.1]))).abs() < 1e-14);
        assert!(matches!(eval_free_green([0.0; 3], 1.0), Err(Error::SingularEvaluation)));
    }

    #[test]
    fn wrapping() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(0.5 + 2.0 * PI) - 0.5).abs() < 1e-14);
        assert!(BlochVector([2.0 * PI, 0.0, -4.0 * PI]).is_zero());
    }

    #[test]
    fn zero_alpha_static_is_rejected() {
        let spec = KernelSpec::ewald(BlochVector([0.0; 3]), 0.0);
        assert!(matches!(LatticeKernel::new(&spec), Err(Error::UndefinedAtZeroAlpha)));
    }

    #[test]
    fn resonance_guard_reports_index() {
        let alpha = BlochVector([0.5, 0.0, 0.0]);
        let spec = KernelSpec::ewald(alpha, 2.0 * PI + 0.5);
        match LatticeKernel::new(&spec) {
            Err(Error::ResonantDenominator { n, .. }) => assert_eq!(n, [1, 0, 0]),
            other => panic!("expected resonance, got {other:?}"),
        }
    }

    #[test]
    fn ewald_is_quasi_periodic() {
        let alpha = BlochVector([PI / 2.0, PI / 3.0, PI / 5.0]);
        for k in [0.0, 0.7] {
            let ker = LatticeKernel::new(&KernelSpec::ewald(alpha, k)).unwrap();
            let x = [0.3, 0.1, -0.2];
            let g0 = ker.value(x).unwrap();
            for (j, e) in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]].iter().enumerate() {
                let g1 = ker.value(vec3::add(x, *e)).unwrap();
                let ph = cis(alpha.0[j] * e[j]);
                assert!(close(g1, ph * g0, 1e-12), "{g1} vs {}", ph * g0);
            }
        }
    }

    #[test]
    fn split_parameter_does_not_matter() {
        let alpha = BlochVector([PI / 2.0, PI / 3.0, PI / 5.0]);
        let x = [0.3, 0.1, 0.2];
        for k in [0.0, 0.5, 1.0] {
            let a = LatticeKernel::new(&KernelSpec::ewald(alpha, k).with_split(2.0)).unwrap().value(x).unwrap();
            let b = LatticeKernel::new(&KernelSpec::ewald(alpha, k).with_split(4.0)).unwrap().value(x).unwrap();
            let c = LatticeKernel::new(&KernelSpec::ewald(alpha, k).with_split(SQRT_PI).with_period(1.0))
                .unwrap()
                .value(x)
                .unwrap();
            assert!(close(a, b, 1e-13), "{a} {b}");
            assert!(close(c, b, 1e-13), "{c} {b}");
        }
    }

    #[test]
    fn conjugation_at_zero_wavenumber() {
        let alpha = BlochVector([PI / 2.0, PI / 3.0, PI / 5.0]);
        let x = [0.3, -0.1, 0.2];
        let a = LatticeKernel::new(&KernelSpec::ewald(alpha, 0.0)).unwrap().value(x).unwrap();
        let b = LatticeKernel::new(&KernelSpec::ewald(alpha.neg(), 0.0)).unwrap().value(x).unwrap();
        assert!(close(a, b.conj(), 1e-13));
    }

    #[test]
    fn gradient_matches_differences() {
        let alpha = BlochVector([PI, PI / 3.0, -PI / 5.0]);
        let ker = LatticeKernel::new(&KernelSpec::ewald(alpha, 0.9)).unwrap();
        let x = [0.21, -0.13, 0.34];
        let (v, g) = ker.value_grad(x).unwrap();
        assert!(close(v, ker.value(x).unwrap(), 1e-14));
        let (_, gr) = ker.remainder_grad(x);
        let h = 1e-5;
        for j in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fd = (ker.value(xp).unwrap() - ker.value(xm).unwrap()) / (2.0 * h);
            assert!(close(g[j], fd, 1e-7), "{} {}", g[j], fd);
            let fdr = (ker.remainder(xp) - ker.remainder(xm)) / (2.0 * h);
            assert!(close(gr[j], fdr, 1e-7), "{} {}", gr[j], fdr);
        }
    }

    #[test]
    fn remainder_is_continuous_through_series_switch() {
        let alpha = BlochVector::star();
        let ker = LatticeKernel::new(&KernelSpec::ewald(alpha, 1.3)).unwrap();
        let dir = vec3::normalize([0.3, 0.5, -0.2]);
        let r0 = ORIGIN_SWITCH / DEFAULT_EWALD_SPLIT;
        let (a, ga) = ker.remainder_grad(vec3::scale(dir, r0 * (1.0 - 1e-13)));
        let (b, gb) = ker.remainder_grad(vec3::scale(dir, r0 * (1.0 + 1e-13)));
        assert!(close(a, b, 1e-12), "{a} {b}");
        for j in 0..3 {
            assert!((ga[j] - gb[j]).norm() < 1e-10 * gb[j].norm().max(1e-3));
        }
        // Agrees with the definition away from the origin.
        let x = vec3::scale(dir, 0.2);
        let r = 0.2;
        let direct = ker.value(x).unwrap() + (1.3f64 * r).cos() / (4.0 * PI * r);
        assert!(close(ker.remainder(x), direct, 1e-12));
        // Bounded approach to zero.
        let r_small = ker.remainder(vec3::scale(dir, 1e-9));
        assert!(close(ker.remainder([0.0; 3]), r_small, 1e-12));
    }

    #[test]
    fn static_remainder_origin_limit() {
        // Free-space part of the static lattice sum at the origin equals
        // eta/(2 pi^{3/2}) from the m = 0 term plus the rest of the lattice.
        let c = origin_series(0.0, 2.5);
        assert!((c[0] / (8.0 * PI) - 2.5 / (2.0 * PI.powf(1.5))).abs() < 1e-15);
    }

    #[test]
    fn extrapolated_spectral_sum_matches_ewald() {
        // Box truncations at N, 2N, 4N leave errors a/N^2 + b/N^3 for
        // probe points with coordinates in (1/10)Z; two Richardson steps remove them.
        let x = [0.3, 0.1, 0.2];
        for alpha in [BlochVector::star(), BlochVector([PI / 2.0, PI / 3.0, PI / 5.0])] {
            for k in [0.0, 0.5, 1.0] {
                let ew = eval_quasi_green(x, &KernelSpec::ewald(alpha, k)).unwrap();
                let v: Vec<C64> =
                    [40, 80, 160].iter().map(|&n| eval_quasi_green(x, &KernelSpec::spectral(alpha, k, n)).unwrap()).collect();
                let r1 = (v[1] * 4.0 - v[0]) / 3.0;
                let r2 = (v[2] * 4.0 - v[1]) / 3.0;
                let r = (r2 * 8.0 - r1) / 7.0;
                assert!((v[2] - ew).norm() < (v[0] - ew).norm());
                assert!(close(r, ew, 1e-8), "alpha={alpha:?} k={k}: {r} vs {ew}");
            }
        }
    }

    #[test]
    fn corner_kernel_is_real_at_zero_wavenumber() {
        let g = eval_quasi_green([0.3, -0.1, 0.2], &KernelSpec::ewald(BlochVector::star(), 0.0)).unwrap();
        assert!(g.im.abs() < 1e-15);
    }

    #[test]
    fn g_ell_sharp_ewald_matches_spectral() {
        let alpha = BlochVector([PI / 2.0, PI / 3.0, PI / 5.0]);
        let ser = SeriesKernel::new(alpha, 3, 1.0).unwrap();
        let x = [0.3, 0.1, 0.2];
        for l in [2, 3] {
            let sp = eval_g_ell_sharp(x, alpha, l, 40).unwrap();
            let ew = ser.green_coeff(l, x);
            assert!(close(ew, sp, 1e-8), "l={l}: {ew} {sp}");
        }
        let sp = eval_g_ell_sharp(x, alpha, 1, 60).unwrap();
        assert!(close(ser.green_coeff(1, x), sp, 1e-4));
    }

    #[test]
    fn g_ell_sharp_real_at_corner_origin() {
        let ser = SeriesKernel::new(BlochVector::star(), 2, 1.0).unwrap();
        let v = ser.green_coeff(1, [0.0; 3]);
        assert!(v.im.abs() < 1e-14 * v.re.abs());
        let sp = eval_g_ell_sharp([0.0; 3], BlochVector::star(), 1, 20).unwrap();
        assert!(sp.im.abs() < 1e-12 * sp.re.abs());
    }

    #[test]
    fn partial_sums_have_sixth_order_residual() {
        let alpha = BlochVector([PI / 2.0, PI / 3.0, PI / 5.0]);
        let ser = SeriesKernel::new(alpha, 2, 1.0).unwrap();
        let x = [0.3, 0.1, 0.2];
        let g0 = eval_quasi_green(x, &KernelSpec::ewald(alpha, 0.0)).unwrap();
        let res: Vec<f64> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&k| {
                let gk = eval_quasi_green(x, &KernelSpec::ewald(alpha, k)).unwrap();
                let approx = g0 + ser.green_coeff(1, x) * (k * k) + ser.green_coeff(2, x) * k.powi(4);
                (gk - approx).norm()
            })
            .collect();
        let slope = (res[0] / res[2]).ln() / 4f64.ln();
        assert!(slope >= 5.5, "slope {slope}, residuals {res:?}");
    }

    #[test]
    fn period_scaling_is_exact_for_powers_of_two() {
        let alpha = BlochVector([PI / 2.0, PI / 3.0, PI / 5.0]);
        let x = [0.3, 0.1, 0.2];
        let g1 = eval_quasi_green(x, &KernelSpec::ewald(alpha, 0.4)).unwrap();
        let s = 0.25;
        let gs = eval_quasi_green(vec3::scale(x, s), &KernelSpec::ewald(alpha.scaled(1.0 / s), 0.4 / s).with_period(s))
            .unwrap();
        assert_eq!(gs * s, g1);
    }

    #[test]
    fn g1_tilde_zero_and_homogeneous() {
        let x = [0.2, -0.1, 0.15];
        assert_eq!(eval_g1_tilde(x, [0.0; 3], 10), C64::new(0.0, 0.0));
        let a = [0.3, -0.7, 0.2];
        let g = eval_g1_tilde(x, a, 12);
        let g3 = eval_g1_tilde(x, vec3::scale(a, 3.0), 12);
        assert!(close(g3, g * 9.0, 1e-13));
        let e = eval_g1_tilde_ewald(x, a);
        let e3 = eval_g1_tilde_ewald(x, vec3::scale(a, 3.0));
        assert!(close(e3, e * 9.0, 1e-12));
    }

    #[test]
    fn g1_tilde_ewald_matches_spectral() {
        let x = [0.2, -0.1, 0.15];
        let a = [0.3, -0.7, 0.2];
        let ew = eval_g1_tilde_ewald(x, a);
        let sp40 = eval_g1_tilde(x, a, 40);
        assert!(close(ew, sp40, 1e-3), "{ew} {sp40}");
    }

    #[test]
    fn corner_expansion_terms() {
        let a = [0.3, -0.7, 0.2];
        let x = [0.2, -0.1, 0.15];
        let ck = CornerKernel::new(a);
        let g0 = eval_quasi_green(x, &KernelSpec::ewald(BlochVector::star(), 0.0)).unwrap();
        let shifted = |eps: f64| {
            let ge = eval_quasi_green(x, &KernelSpec::ewald(BlochVector::star().add(vec3::scale(a, eps)), 0.0)).unwrap();
            ge * cis(-eps * vec3::dot(a, x))
        };
        // The first-order term does not vanish away from the origin.
        let (ep, em) = (shifted(1e-3), shifted(-1e-3));
        let d1 = (ep - em) / 2e-3;
        assert!(close(ck.odd(x), d1, 1e-5), "{} {}", ck.odd(x), d1);
        assert!(ck.odd(x).norm() > 1e-2);
        let d2 = (ep + em - g0 * 2.0) / 2e-6;
        assert!(close(ck.second(x), d2, 1e-4), "{} {}", ck.second(x), d2);
        // With the odd term included the remainder is cubic.
        let r: Vec<f64> =
            [1e-2, 5e-3].iter().map(|&e| (shifted(e) - g0 - ck.odd(x) * e - ck.second(x) * (e * e)).norm()).collect();
        let slope = (r[0] / r[1]).log2();
        assert!(slope > 2.7, "slope {slope}");
    }
}
