use std::f64::consts::{PI, TAU};

use mksd::criticism::{self, FeatureData, TestLocations};
use mksd::manifold::{self, euler_to_matrix, matrix_to_euler, volume_element};
use mksd::model::wind_bvm;
use mksd::sampling::{self, RngStream};
use mksd::stein::SteinKernel;
use mksd::{ChartPoint, Density, Manifold, ManifoldKernel, MultiIndexDeriv, RotationMatrix, SteinOrder};
use proptest::prelude::*;

fn regular_so3() -> impl Strategy<Value = ChartPoint> {
    (0.0..TAU, 1e-3..PI - 1e-3, 0.0..TAU).prop_map(|(a, b, c)| ChartPoint::so3(a, b, c))
}

fn angle_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

proptest! {
    #[test]
    fn volume_element_is_two_root_two_sine(x in regular_so3()) {
        let want = 2.0 * 2f64.sqrt() * x.coords()[1].sin();
        prop_assert!((volume_element(Manifold::So3, &x).unwrap() - want).abs() < 1e-8);
    }

    #[test]
    fn euler_round_trip(x in regular_so3()) {
        let r = euler_to_matrix(&x);
        prop_assert!(RotationMatrix::new(*r.matrix()).is_ok());
        let back = matrix_to_euler(&r).unwrap();
        for (a, b) in x.coords().iter().zip(back.coords()) {
            prop_assert!(angle_dist(*a, *b) < 1e-8, "{x:?} -> {back:?}");
        }
    }

    #[test]
    fn euler_to_matrix_is_always_a_rotation(a in -20.0..20.0f64, b in -20.0..20.0f64, c in -20.0..20.0f64) {
        let x = manifold::wrap(Manifold::So3, &[a, b, c]).unwrap();
        prop_assert!(RotationMatrix::new(*euler_to_matrix(&x).matrix()).is_ok());
    }

    #[test]
    fn kernel_derivative_symmetry(x in regular_so3(), y in regular_so3(), i in 0usize..3, j in 0usize..3, l in 0usize..3) {
        let k = ManifoldKernel::exp_trace(0.7).unwrap();
        for (a, b) in [(vec![i], vec![j, l]), (vec![i, j], vec![l]), (vec![], vec![i]), (vec![i, l], vec![j, l])] {
            let d = MultiIndexDeriv::new(&a, &b).unwrap();
            prop_assert_eq!(k.deriv(&d, &x, &y).unwrap(), k.deriv(&d.swapped(), &y, &x).unwrap());
        }
    }

    #[test]
    fn stein_kernel_symmetry(x in regular_so3(), y in regular_so3(), order in 1u8..3) {
        let sk = SteinKernel::new(
            SteinOrder::from_u8(order).unwrap(),
            Density::exp_trace(0.35).unwrap(),
            ManifoldKernel::exp_trace(1.2).unwrap(),
        ).unwrap();
        prop_assert_eq!(sk.eval(&x, &y).unwrap(), sk.eval(&y, &x).unwrap());
    }

    #[test]
    fn stein_kernel_symmetry_on_the_torus(a in 0.0..TAU, b in 0.0..TAU, c in 0.0..TAU, d in 0.0..TAU, order in 0u8..3) {
        let q = Density::bivariate_von_mises(wind_bvm());
        let k = ManifoldKernel::product_von_mises(0.8, 1.4).unwrap();
        let reference = vec![ChartPoint::torus(0.1, 0.2), ChartPoint::torus(3.0, 5.0), ChartPoint::torus(1.0, 4.0)];
        let sk = SteinKernel::with_order(SteinOrder::from_u8(order).unwrap(), q, k, reference).unwrap();
        let (x, y) = (ChartPoint::torus(a, b), ChartPoint::torus(c, d));
        prop_assert_eq!(sk.eval(&x, &y).unwrap(), sk.eval(&y, &x).unwrap());
    }

    #[test]
    fn haar_samples_avoid_the_singular_set(seed in any::<u64>()) {
        for p in sampling::sample_uniform_so3(&mut RngStream::new(seed).rng(), 50) {
            prop_assert!(p.coords()[1].cos().abs() < 1.0 - 1e-12);
        }
    }

    #[test]
    fn mfssd_matches_the_direct_formula(seed in 0u64..1000, j in 1usize..4) {
        let mut rng = RngStream::new(seed).rng();
        let q = Density::bivariate_von_mises(wind_bvm().factorized());
        let k = ManifoldKernel::product_von_mises(1.0, 0.5).unwrap();
        let data = sampling::sample_density(&mut rng, &Density::bivariate_von_mises(wind_bvm()), 30).unwrap();
        let locs = sampling::sample_density(&mut rng, &Density::uniform(Manifold::Torus2), j).unwrap();
        let got = criticism::mfssd(&data, &q, &k, &TestLocations::new(locs.clone()).unwrap()).unwrap();
        // mean over data of A k(x, v), per location and coordinate
        let mut sq = 0.0;
        for v in &locs {
            let w = mksd::stein::witness_at(&q, &k, &data, v).unwrap();
            sq += w.iter().map(|x| x * x).sum::<f64>();
        }
        let want = sq / (2 * j) as f64;
        prop_assert!((got - want).abs() < 1e-12 * (1.0 + want));
    }

    #[test]
    fn objective_ignores_location_order(seed in 0u64..1000) {
        let mut rng = RngStream::new(seed).rng();
        let q = Density::bivariate_von_mises(wind_bvm());
        let k = ManifoldKernel::product_von_mises(1.0, 1.0).unwrap();
        let data = sampling::sample_density(&mut rng, &Density::uniform(Manifold::Torus2), 40).unwrap();
        let mut locs = sampling::sample_density(&mut rng, &Density::uniform(Manifold::Torus2), 3).unwrap();
        let fd = FeatureData::new(&data, &q, &k).unwrap();
        let a = fd.objective(&locs).unwrap();
        locs.rotate_left(1);
        let b = fd.objective(&locs).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

#[test]
fn stein_kernel_is_degenerate_under_the_null() {
    let q = Density::von_mises(1.7, 0.4).unwrap();
    let k = ManifoldKernel::von_mises(0.9).unwrap();
    let nodes = 2048;
    let h = TAU / nodes as f64;
    for order in [SteinOrder::First, SteinOrder::Second] {
        let sk = SteinKernel::new(order, q.clone(), k).unwrap();
        for x in [0.0, 1.3, 4.0] {
            let x = ChartPoint::circle(x);
            let (mut z, mut s) = (0.0, 0.0);
            for i in 0..nodes {
                let y = ChartPoint::circle(i as f64 * h);
                let w = q.log_unnorm(&y).unwrap().exp();
                z += w;
                s += w * sk.eval(&x, &y).unwrap();
            }
            assert!((s / z).abs() < 1e-8, "{order:?} {x:?}: {}", s / z);
        }
    }
}

// Midpoint rule in (φ, θ, ψ) with weight q̃ J.
fn fisher_null_mean(sk: &SteinKernel, q: &Density, x: &ChartPoint, m: usize) -> f64 {
    let h = TAU / m as f64;
    let ht = PI / m as f64;
    let (mut z, mut s) = (0.0, 0.0);
    for a in 0..m {
        for b in 0..m {
            for c in 0..m {
                let y = ChartPoint::so3((a as f64 + 0.5) * h, (b as f64 + 0.5) * ht, (c as f64 + 0.5) * h);
                let w = q.log_unnorm(&y).unwrap().exp() * volume_element(Manifold::So3, &y).unwrap();
                z += w;
                s += w * sk.eval(x, &y).unwrap();
            }
        }
    }
    s / z
}

#[test]
fn stein_kernel_is_degenerate_under_a_fisher_null_on_so3() {
    let q = Density::fisher(mksd::model::fisher_b_matrix(0.2)).unwrap();
    let k = ManifoldKernel::exp_trace(0.6).unwrap();
    let x = ChartPoint::so3(0.3, 1.1, 2.0);
    let first = SteinKernel::new(SteinOrder::First, q.clone(), k).unwrap();
    let r = fisher_null_mean(&first, &q, &x, 24);
    assert!(r.abs() < 1e-12, "{r}");
    // the second-order integrand has g⁻¹ near the poles, so the rule is only
    // O(h²) there; extrapolate two resolutions
    let second = SteinKernel::new(SteinOrder::Second, q.clone(), k).unwrap();
    let (coarse, fine) = (fisher_null_mean(&second, &q, &x, 24), fisher_null_mean(&second, &q, &x, 48));
    assert!(fine.abs() < coarse.abs() / 3.0, "{coarse} {fine}");
    assert!(((4.0 * fine - coarse) / 3.0).abs() < 1e-5, "{coarse} {fine}");
}
