use fixdiff_core::deriv_det::{aid_fp_vjp, itd_vjp};
use fixdiff_core::deriv_stoch::{epochs, nsid, NsidConfig, SampleStreams, Sampling, StepSchedule};
use fixdiff_core::linalg::vecops;
use fixdiff_core::maps::{adjoint_defect, soft_threshold, AffineMixture, IdentityMap, MapSelection};
use fixdiff_core::reference::{implicit_jacobian_oracle, random_smooth_instance};
use fixdiff_core::setvalued::properties::check_excess_properties;
use fixdiff_core::setvalued::{op_norm, sup_norm, MatrixSet};
use fixdiff_core::solver::fixed_point_solve;
use fixdiff_core::{Mat, Rng};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn excess_properties_hold(seed in any::<u64>()) {
        for r in check_excess_properties(&mut Rng::new(seed), 10, 1e-9) {
            prop_assert!(r.passed(), "{} failed: worst {:e}", r.name, r.worst_excess);
        }
    }

    // ‖(I − A)⁻¹‖ ≤ 1/(1 − q) whenever ‖A‖ ≤ q < 1.
    #[test]
    fn resolvent_bound(entries in prop::collection::vec(-1.0f64..1.0, 9), q in 0.0f64..0.95) {
        let raw = Mat::from_vec(3, 3, entries).unwrap();
        let n = op_norm(&raw);
        prop_assume!(n > 1e-6);
        let a = raw.scale(q / n);
        let inv = MatrixSet::singleton(Mat::identity(3).sub(&a).unwrap()).inverse().unwrap();
        prop_assert!(sup_norm(&inv) <= 1.0 / (1.0 - q) + 1e-9);
    }

    #[test]
    fn soft_threshold_is_nonexpansive(
        a in prop::collection::vec(-5.0f64..5.0, 6),
        b in prop::collection::vec(-5.0f64..5.0, 6),
        theta in 0.0f64..2.0,
    ) {
        let (sa, sb) = (soft_threshold(&a, theta).unwrap(), soft_threshold(&b, theta).unwrap());
        prop_assert!(vecops::dist(&sa, &sb) <= vecops::dist(&a, &b) + 1e-12);
        for (x, s) in a.iter().zip(&sa) {
            prop_assert!(s.abs() <= x.abs() && s * x >= 0.0);
        }
    }

    #[test]
    fn adjoint_identity_smooth(seed in any::<u64>(), d in 1usize..8, m in 1usize..5) {
        let mut rng = Rng::new(seed);
        let map = random_smooth_instance(&mut rng, d, m, 0.8).unwrap();
        let lam = rng.gaussian(m);
        let (u, v, du, dl) = (rng.gaussian(d), rng.gaussian(d), rng.gaussian(d), rng.gaussian(m));
        let (a, b) = adjoint_defect(&map, &u, &lam, &v, &du, &dl);
        prop_assert!(a <= 1e-12 && b <= 1e-12);
    }

    #[test]
    fn itd_aid_oracle_agree(seed in any::<u64>(), d in 1usize..8, m in 1usize..4, q in 0.05f64..0.8) {
        let mut rng = Rng::new(seed);
        let map = random_smooth_instance(&mut rng, d, m, q).unwrap();
        let lam = rng.gaussian(m);
        let traj = fixed_point_solve(&map, &lam, &vec![0.0; d], 200, true).unwrap();
        let y = rng.gaussian(d);
        let or = implicit_jacobian_oracle(&map, &lam, 200).unwrap().matvec_t(&y);
        let itd = itd_vjp(&map, &traj, &lam, &y).unwrap().value;
        let aid = aid_fp_vjp(&map, traj.last(), &lam, &y, 200).unwrap().value;
        let scale = 1.0 + vecops::norm(&or);
        prop_assert!(vecops::dist(&itd, &or) <= 1e-8 * scale);
        prop_assert!(vecops::dist(&aid, &or) <= 1e-8 * scale);
    }

    #[test]
    fn itd_is_linear_in_cotangent(seed in any::<u64>(), alpha in -3.0f64..3.0) {
        let mut rng = Rng::new(seed);
        let map = random_smooth_instance(&mut rng, 4, 2, 0.7).unwrap();
        let lam = rng.gaussian(2);
        let traj = fixed_point_solve(&map, &lam, &[0.0; 4], 30, true).unwrap();
        let (y1, y2) = (rng.gaussian(4), rng.gaussian(4));
        let mut y = y1.clone();
        vecops::axpy(&mut y, alpha, &y2);
        let g = itd_vjp(&map, &traj, &lam, &y).unwrap().value;
        let mut h = itd_vjp(&map, &traj, &lam, &y1).unwrap().value;
        vecops::axpy(&mut h, alpha, &itd_vjp(&map, &traj, &lam, &y2).unwrap().value);
        prop_assert!(vecops::dist(&g, &h) <= 1e-10 * (1.0 + vecops::norm(&g)));
    }

    #[test]
    fn nsid_is_seed_deterministic(seed in any::<u64>(), k in 1usize..200) {
        let that = AffineMixture::scalar(&[0.2, 0.5, 0.7]);
        let id = IdentityMap { dim: 1, params: 1 };
        let cfg = NsidConfig {
            k,
            j: k,
            sched: StepSchedule::harmonic(2.0, 2.0).unwrap(),
            streams: SampleStreams::new(seed, 1, Sampling::Reshuffle),
            q_hat: Some(0.7),
        };
        let a = nsid(&that, &id, &[1.0], &[1.0], &[1.0], &cfg).unwrap();
        let b = nsid(&that, &id, &[1.0], &[1.0], &[1.0], &cfg).unwrap();
        prop_assert_eq!(a.value, b.value);
    }

    #[test]
    fn epoch_accounting(k in 0usize..10_000, j in 0usize..10_000, b in 1usize..500, n in 1usize..5000) {
        let e = epochs(k, j, b, n);
        prop_assert!((e * n as f64 - ((k + j) * b) as f64).abs() <= 1e-6 * (1.0 + e * n as f64));
    }

    #[test]
    fn contraction_solve_converges(seed in any::<u64>(), q in 0.0f64..0.9) {
        let mut rng = Rng::new(seed);
        let map = random_smooth_instance(&mut rng, 5, 2, q).unwrap();
        let lam = rng.gaussian(2);
        let t = fixed_point_solve(&map, &lam, &[0.0; 5], 400, false).unwrap();
        let w = t.last();
        prop_assert!(vecops::dist(&map.eval(w, &lam), w) <= 1e-10 * (1.0 + vecops::norm(w)));
    }
}
