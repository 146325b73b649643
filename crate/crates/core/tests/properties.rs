//! Property tests for the documented invariants of every module.

use std::sync::Arc;

use proptest::prelude::*;

use heavytail::coverings::{covering_radius_certificate, locate_parallelepiped, GridOperator};
use heavytail::distributions::{levy_concentration, EntryDistribution};
use heavytail::geometry::{
    classify, integer_point_net, lcd, lattice_distance, spread_set, LcdParams, SphereClass, SphereParams,
};
use heavytail::invertibility::{binomial_se, random_in_ball, SmallBallFit};
use heavytail::norms::{inf2_exact, inf2_lower, inf2_upper, norm, permute_rows_independently, smin, spectral_norm, Matrix};
use heavytail::regularizer::{grid_code, heart_contraction, RegularizerParams};
use heavytail::rng::{derive_seed, rng_from_seed};

fn analytic_family() -> impl Strategy<Value = EntryDistribution> {
    prop_oneof![
        Just(EntryDistribution::gaussian()),
        Just(EntryDistribution::uniform_symmetric()),
        (2.2f64..8.0).prop_map(|df| EntryDistribution::student_t(df).unwrap()),
        (2.2f64..6.0).prop_map(|a| EntryDistribution::pareto(a).unwrap()),
        (0.2f64..1.5).prop_map(|s| EntryDistribution::lognormal(s).unwrap()),
    ]
}

fn any_family() -> impl Strategy<Value = EntryDistribution> {
    prop_oneof![
        4 => analytic_family(),
        1 => Just(EntryDistribution::rademacher()),
        1 => (0.01f64..0.5).prop_map(|p| EntryDistribution::two_point(p).unwrap()),
    ]
}

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Matrix> {
    (rows, cols).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
    })
}

fn unit_vector(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    n.prop_flat_map(|n| proptest::collection::vec(-1.0f64..1.0, n)).prop_filter_map("zero vector", |v| {
        let r = norm(&v);
        (r > 1e-3).then(|| v.iter().map(|x| x / r).collect())
    })
}

fn rel_eq(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // distributions

    #[test]
    fn analytic_levels_hit_dyadic_tails(dist in analytic_family(), k_max in 1usize..16) {
        let lv = dist.levels(2.0, k_max).unwrap();
        prop_assert!(lv.values().windows(2).all(|w| w[0] <= w[1]));
        for k in 1..=k_max {
            let p = dist.moment_survival(lv.tau(k), 2.0);
            prop_assert!(rel_eq(p, (-(k as f64)).exp2(), 1e-9), "k={} p={}", k, p);
        }
        // E xi^2 = 1 bounds the truncated level sum.
        prop_assert!(lv.expectation_lower_bound() <= 1.0 + 1e-12);
    }

    #[test]
    fn normalized_moments(dist in analytic_family()) {
        let (mean, var) = dist.normalized_moments();
        prop_assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic(dist in any_family(), seed in any::<u64>()) {
        let a = dist.sample(&mut rng_from_seed(seed), 64).unwrap();
        let b = dist.sample(&mut rng_from_seed(seed), 64).unwrap();
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn levy_concentration_is_monotone(samples in proptest::collection::vec(-5.0f64..5.0, 1..200), z1 in 0.0f64..3.0, dz in 0.0f64..3.0) {
        let (a, _) = levy_concentration(&samples, z1).unwrap();
        let (b, _) = levy_concentration(&samples, z1 + dz).unwrap();
        prop_assert!(a <= b);
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(levy_concentration(&samples, (hi - lo) / 2.0).unwrap().0, 1.0);
    }

    // regularizer

    #[test]
    fn heart_fit_and_majorant(dist in analytic_family(), n in 2usize..80, delta in 0.05f64..1.0, seed in any::<u64>()) {
        let params = RegularizerParams::new(delta).unwrap();
        let levels = dist.levels(2.0, params.default_levels(n)).unwrap();
        let y: Vec<f64> = dist.sample(&mut rng_from_seed(seed), n).unwrap().iter().map(|v| v * v).collect();
        let out = heart_contraction(&y, &levels, &params).unwrap();
        let d = out.contraction.diagonal();
        prop_assert!(d.iter().all(|&v| v > 0.0 && v <= 1.0));
        let logdet: f64 = out.contraction.log_diagonal().iter().sum();
        prop_assert!(rel_eq(logdet, out.contraction.log_det(), 1e-12) || logdet == 0.0);
        out.contraction.verify().unwrap();
        if out.uncovered.is_empty() {
            prop_assert!(out.bound_holds(), "{} > {}", out.l1_value, out.l1_bound);
        }
        let k_max = levels.k_max();
        for (i, &v) in y.iter().enumerate() {
            let z: f64 = (0..k_max).filter(|&k| v >= levels.tau(k)).map(|k| levels.tau(k + 1)).sum();
            prop_assert_eq!(z < v, out.uncovered.contains(&i));
            if v <= levels.tau(k_max) {
                prop_assert!(z >= v);
            }
        }
    }

    #[test]
    fn budget_below_2e_rejected(l in 0.0f64..5.43) {
        let mut p = RegularizerParams::new(0.5).unwrap();
        p.budget = l;
        prop_assert!(p.validate().is_err());
    }

    #[test]
    fn discretization_sandwich(t in 1e-300f64..=1.0) {
        let (e, capped) = grid_code(t.ln());
        prop_assert!(e == 0 || (e.is_power_of_two() && e <= 512));
        let tt = (-(e as f64)).exp2();
        if !capped {
            prop_assert!(t * t <= tt * (1.0 + 1e-12));
            prop_assert!(tt <= std::f64::consts::SQRT_2 * t * (1.0 + 1e-12));
        }
    }

    // norms

    #[test]
    fn inf2_sandwich_and_spectral_bounds(b in matrix(1..=8, 1..=10), seed in any::<u64>()) {
        let exact = inf2_exact(&b).unwrap().0;
        let lower = inf2_lower(&b, 3, &mut rng_from_seed(seed)).unwrap().0;
        let upper = inf2_upper(&b).unwrap();
        let tol = 1e-12 * exact.max(1.0);
        prop_assert!(lower <= exact + tol && exact <= upper + tol);
        let s = spectral_norm(&b).unwrap();
        prop_assert!(s <= exact + 1e-9 * s.max(1.0));
        prop_assert!(exact <= (b.cols() as f64).sqrt() * s * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn norms_are_homogeneous(b in matrix(2..=6, 2..=6), c in -5.0f64..5.0) {
        let cb = b.scaled(c);
        let pairs = [
            (inf2_exact(&cb).unwrap().0, inf2_exact(&b).unwrap().0),
            (inf2_upper(&cb).unwrap(), inf2_upper(&b).unwrap()),
            (spectral_norm(&cb).unwrap(), spectral_norm(&b).unwrap()),
        ];
        for (scaled, base) in pairs {
            prop_assert!((scaled - c.abs() * base).abs() <= 1e-10 * (c.abs() * base).max(1e-12));
        }
        if b.is_square() {
            let (s1, s0) = (smin(&cb).unwrap(), smin(&b).unwrap());
            prop_assert!((s1 - c.abs() * s0).abs() <= 1e-10 * spectral_norm(&b).unwrap().max(1.0) * c.abs().max(1.0));
        }
    }

    #[test]
    fn smin_lower_bounds_images(n in 2usize..10, seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let b = Matrix::random(n, n, &EntryDistribution::gaussian(), &mut rng);
        let s = smin(&b).unwrap();
        for k in 0..100u64 {
            let y = heavytail::geometry::random_unit(n, &mut rng_from_seed(derive_seed(seed, k)));
            prop_assert!(s <= norm(&b.mul_vec(&y).unwrap()) * (1.0 + 1e-10) + 1e-12);
        }
    }

    #[test]
    fn permutation_preserves_row_multisets(b in matrix(1..=6, 1..=8), seed in any::<u64>()) {
        let p = permute_rows_independently(&b, &mut rng_from_seed(seed));
        for i in 0..b.rows() {
            let mut x: Vec<u64> = b.row(i).iter().map(|v| v.to_bits()).collect();
            let mut y: Vec<u64> = p.row(i).iter().map(|v| v.to_bits()).collect();
            x.sort_unstable();
            y.sort_unstable();
            prop_assert_eq!(x, y);
        }
    }

    // coverings

    #[test]
    fn grid_operator_log_det(codes in proptest::collection::vec(prop_oneof![Just(0u16), (0u32..10).prop_map(|k| 1u16 << k)], 1..20)) {
        let g = GridOperator::new(codes.clone()).unwrap();
        let expect = -(codes.iter().map(|&c| c as f64).sum::<f64>()) * std::f64::consts::LN_2;
        prop_assert!(rel_eq(g.log_det(), expect, 1e-12) || expect == 0.0 && g.log_det() == 0.0);
        prop_assert!(GridOperator::new(vec![3]).is_err());
    }

    #[test]
    fn located_parallelepipeds_contain_the_point(
        n in 4usize..24,
        delta in 0.05f64..=0.25,
        codes_seed in any::<u64>(),
        seed in any::<u64>(),
    ) {
        prop_assume!(n as f64 >= 1.0 / (4.0 * delta));
        let mut rng = rng_from_seed(codes_seed);
        let codes: Vec<u16> = (0..n).map(|_| {
            use rand::Rng;
            let k: u32 = rng.random_range(0..11);
            if k == 10 { 0 } else { 1u16 << k }
        }).collect();
        let g = Arc::new(GridOperator::new(codes).unwrap());
        let mut rng = rng_from_seed(seed);
        for _ in 0..20 {
            let x = random_in_ball(n, &mut rng);
            let id = locate_parallelepiped(&x, &g, delta).unwrap();
            prop_assert!(id.contains(&x));
            prop_assert_eq!(&id, &locate_parallelepiped(&x, &g, delta).unwrap());
            let c = id.center();
            for ((v, c), h) in x.iter().zip(&c).zip(id.half_widths()) {
                prop_assert!((v - c).abs() <= h * (1.0 + 1e-12) + 4.0 * f64::EPSILON * v.abs().max(c.abs()));
            }
        }
    }

    #[test]
    fn certificate_bounds_corner_diameter(n in 4usize..=9, seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let a = Matrix::random(n, n, &EntryDistribution::student_t(3.0).unwrap(), &mut rng);
        let codes: Vec<u16> = (0..n).map(|i| if i % 3 == 0 { 2 } else { 0 }).collect();
        let g = GridOperator::new(codes).unwrap();
        let delta = 0.25;
        let cert = covering_radius_certificate(&a, &g, delta).unwrap();
        let ad = a.scale_columns(&g.diagonal()).unwrap();
        let diameter = 2.0 * inf2_exact(&ad).unwrap().0 / (n as f64 * delta).sqrt();
        prop_assert!(diameter <= 2.0 * cert * (1.0 + 1e-12));
    }

    // geometry

    #[test]
    fn non_unit_input_rejected(x in unit_vector(2..=10), c in 1.01f64..3.0) {
        let p = SphereParams::new(0.3, 0.3).unwrap();
        let y: Vec<f64> = x.iter().map(|v| v * c).collect();
        prop_assert!(classify(&y, &p).is_err());
    }

    #[test]
    fn spread_set_within_support(x in unit_vector(10..=60), theta in 0.1f64..0.9, rho in 0.1f64..0.9) {
        let p = SphereParams::new(theta, rho).unwrap();
        let set = spread_set(&x, &p).unwrap();
        prop_assert!(set.iter().all(|&i| x[i] != 0.0));
        if classify(&x, &p).unwrap() == SphereClass::Incomp {
            prop_assert!(set.len() as f64 >= 0.5 * rho * rho * theta * x.len() as f64);
        }
    }

    #[test]
    fn lcd_bracket_and_monotone_in_r(x in unit_vector(1..=3), r1 in 0.05f64..0.5, dr in 0.0f64..0.4) {
        let h = 5.0;
        let p1 = LcdParams::new(h, r1, 30.0).unwrap();
        let p2 = LcdParams::new(h, r1 + dr, 30.0).unwrap();
        let a = lcd(&x, &p1).unwrap();
        let b = lcd(&x, &p2).unwrap();
        for (res, r) in [(a, r1), (b, r1 + dr)] {
            if let Some(t) = res.t_star {
                prop_assert!(res.lower_bound <= t);
                prop_assert!(lattice_distance(&x, t) < (r * t).min(h));
            }
        }
        prop_assert!(b.upper() <= a.upper() + 1e-6);
    }

    #[test]
    fn integer_net_symmetry(n in 1usize..=3, k in 0.3f64..1.5, flips in any::<u8>()) {
        let net = integer_point_net(n, k, 1_000_000).unwrap();
        let key = |p: &[f64]| p.iter().map(|v| (v * 1e9).round() as i64).collect::<Vec<_>>();
        let mut base: Vec<Vec<i64>> = net.points.iter().map(|p| key(p)).collect();
        base.sort();
        // Sign flips and a cyclic shift of the coordinates.
        let mut moved: Vec<Vec<i64>> = net
            .points
            .iter()
            .map(|p| {
                let q: Vec<f64> = (0..n).map(|i| {
                    let v = p[(i + 1) % n];
                    if flips >> i & 1 == 1 { -v } else { v }
                }).collect();
                key(&q)
            })
            .collect();
        moved.sort();
        prop_assert_eq!(base, moved);
    }

    // invertibility

    #[test]
    fn small_ball_fit_invariants(values in proptest::collection::vec(0.0f64..2.0, 1..300)) {
        let eps = [0.05, 0.1, 0.2, 0.4, 0.8, 1.6];
        let fit = SmallBallFit::from_scaled(&values, &eps, 0.5);
        prop_assert!(fit.is_monotone());
        for (p, se) in fit.probabilities.iter().zip(&fit.std_errors) {
            prop_assert_eq!(*se, binomial_se(*p, values.len()));
            prop_assert!((se - (p * (1.0 - p) / values.len() as f64).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn seed_derivation_is_stable(master in any::<u64>(), i in any::<u64>()) {
        prop_assert_eq!(derive_seed(master, i), derive_seed(master, i));
        prop_assert_ne!(derive_seed(master, i), derive_seed(master, i.wrapping_add(1)));
    }
}
