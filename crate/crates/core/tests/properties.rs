use std::f64::consts::PI;
use std::sync::OnceLock;

use bubblebloch::bloch::MaterialParams;
use bubblebloch::capacity::CapacitySolver;
use bubblebloch::geometry::make_sphere_mesh;
use bubblebloch::homogenize::{classify, quadratic_form, solve_bloch_vector, DispersionQuery, Magnitude, Regime};
use bubblebloch::lattice_green::{eval_quasi_green, wrap_angle, BlochVector, KernelSpec};
use proptest::prelude::*;

fn coord() -> impl Strategy<Value = f64> {
    -0.45..0.45f64
}

fn point() -> impl Strategy<Value = [f64; 3]> {
    [coord(), coord(), coord()].prop_filter("away from the lattice points", |x| x.iter().map(|c| c * c).sum::<f64>() > 0.01)
}

fn alpha() -> impl Strategy<Value = [f64; 3]> {
    [-PI..PI, -PI..PI, -PI..PI].prop_filter("nonzero", |a| a.iter().map(|c| c * c).sum::<f64>() > 0.05)
}

fn spd() -> impl Strategy<Value = [[f64; 3]; 3]> {
    proptest::array::uniform3(proptest::array::uniform3(-1.0..1.0f64)).prop_map(|a| {
        let mut l = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                l[i][j] = (0..3).map(|k| a[i][k] * a[j][k]).sum::<f64>() + if i == j { 0.1 } else { 0.0 };
            }
        }
        l
    })
}

fn small_capacity() -> &'static CapacitySolver {
    static S: OnceLock<CapacitySolver> = OnceLock::new();
    S.get_or_init(|| CapacitySolver::new(&make_sphere_mesh(0.25, 4).unwrap()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn green_is_quasi_periodic(x in point(), a in alpha(), n in proptest::array::uniform3(-2i32..=2), k in 0.0..2.0f64) {
        let spec = KernelSpec::ewald(BlochVector::new(a), k);
        let shift = n.map(f64::from);
        let y = [x[0] + shift[0], x[1] + shift[1], x[2] + shift[2]];
        let g0 = eval_quasi_green(x, &spec).unwrap();
        let g1 = eval_quasi_green(y, &spec).unwrap();
        let phase = bubblebloch::C64::from_polar(1.0, a[0] * shift[0] + a[1] * shift[1] + a[2] * shift[2]);
        prop_assert!((g1 - g0 * phase).norm() <= 1e-9 * g0.norm().max(1.0), "{g1} vs {}", g0 * phase);
    }

    #[test]
    fn static_green_is_conjugate_in_alpha(x in point(), a in alpha()) {
        let g = eval_quasi_green(x, &KernelSpec::ewald(BlochVector::new(a), 0.0)).unwrap();
        let h = eval_quasi_green(x, &KernelSpec::ewald(BlochVector::new(a).neg(), 0.0)).unwrap();
        prop_assert!((g - h.conj()).norm() <= 1e-10 * g.norm().max(1.0));
    }

    #[test]
    fn ewald_split_does_not_change_green(x in point(), a in alpha(), k in 0.0..1.5f64, eta in 2.5..6.0f64) {
        let base = KernelSpec::ewald(BlochVector::new(a), k);
        let g = eval_quasi_green(x, &base).unwrap();
        let h = eval_quasi_green(x, &base.with_split(eta)).unwrap();
        prop_assert!((g - h).norm() <= 1e-9 * g.norm().max(1.0), "{g} vs {h}");
    }

    #[test]
    fn wrapped_angle_is_equivalent_and_in_range(x in -50.0..50.0f64) {
        let y = wrap_angle(x);
        prop_assert!(y > -PI && y <= PI);
        let turns = (x - y) / (2.0 * PI);
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }

    #[test]
    fn bloch_vector_lies_on_level_set(l in spd(), beta in -5.0..5.0f64, d in proptest::array::uniform3(-1.0..1.0f64)) {
        prop_assume!(d.iter().map(|c| c * c).sum::<f64>() > 1e-3);
        let n = d.iter().map(|c| c * c).sum::<f64>().sqrt();
        let u = d.map(|c| c / n);
        match solve_bloch_vector(&l, beta, d).unwrap() {
            Magnitude::Real(t) => {
                prop_assert!(beta >= 0.0);
                let q = quadratic_form(&l, u.map(|c| c * t));
                prop_assert!((q - beta).abs() <= 1e-10 * beta.abs().max(1.0));
            }
            Magnitude::Imaginary(t) => {
                prop_assert!(beta < 0.0);
                let q = quadratic_form(&l, u.map(|c| c * t));
                prop_assert!((q + beta).abs() <= 1e-10 * beta.abs().max(1.0));
            }
        }
    }

    #[test]
    fn regime_follows_frequency(l in spd(), ws in 0.05..1.0f64, delta in 1e-4..1e-1f64, r in 0.0..2.0f64) {
        let q = DispersionQuery::new(r * ws, ws, delta, l, 1.0).unwrap();
        let regime = classify(&q);
        if (r - 1.0).abs() > 1e-6 {
            prop_assert_eq!(regime, if r < 1.0 { Regime::Propagating } else { Regime::Gap });
        }
        prop_assert!((q.beta * delta - ws * ws * (1.0 - r * r)).abs() <= 1e-12 * ws * ws);
    }

    #[test]
    fn contrast_round_trips(delta in 1e-6..0.9f64, v in 0.1..10.0f64, vb in 0.1..10.0f64, d2 in 1e-6..0.9f64) {
        let m = MaterialParams::from_contrast(delta, v, vb);
        prop_assert!(m.validate().is_ok());
        prop_assert!((m.delta() - delta).abs() <= 1e-15 * delta);
        prop_assert!((m.v() - v).abs() <= 1e-12 * v && (m.v_b() - vb).abs() <= 1e-12 * vb);
        let n = m.with_delta(d2);
        prop_assert!((n.delta() - d2).abs() <= 1e-15 && (n.v_b() - vb).abs() <= 1e-12 * vb);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn capacity_is_even_periodic_and_bounded_by_corner(a in alpha(), n in proptest::array::uniform3(-1i32..=1)) {
        let s = small_capacity();
        let b = BlochVector::new(a);
        let c = s.capacity(b).unwrap();
        let shifted = s.capacity(b.add(n.map(|k| 2.0 * PI * f64::from(k)))).unwrap();
        let reflected = s.capacity(b.neg()).unwrap();
        let star = s.capacity(BlochVector::star()).unwrap();
        prop_assert!(c > 0.0);
        prop_assert!((shifted - c).abs() <= 1e-8 * c, "{shifted} vs {c}");
        prop_assert!((reflected - c).abs() <= 1e-8 * c, "{reflected} vs {c}");
        prop_assert!(c <= star * (1.0 + 1e-10), "{c} > {star}");
    }
}
