use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rrsgd_core::chains::{run_coupled_rr, run_tail_averaged};
use rrsgd_core::diagnostics::{cost_function_c, decomposition_audit};
use rrsgd_core::rng::{fill_normals, NoiseStream, StreamKey};
use rrsgd_core::theory::lyapunov_solve;
use rrsgd_core::ProblemSpec;

fn spd(d: usize, entries: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |i, j| entries[i * d + j]);
    &a * a.transpose() + DMatrix::identity(d, d) * 0.1
}

fn matrix(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, d * d).prop_map(move |v| spd(d, &v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lyapunov_residual_vanishes((h, c) in (1usize..8).prop_flat_map(|d| (matrix(d), matrix(d)))) {
        let x = lyapunov_solve(&h, &c).unwrap();
        prop_assert!((&h * &x + &x * &h - &c).norm() <= 1e-10 * c.norm());
        prop_assert!((&x - x.transpose()).norm() <= 1e-12 * x.norm());
    }

    #[test]
    fn streams_replay_from_any_counter(seed in any::<u64>(), index in any::<u32>(), skip in 0u64..50, m in 1usize..6) {
        let key = StreamKey::new(seed, index);
        let mut s = NoiseStream::from_key(key);
        let mut z = vec![0.0; m];
        for _ in 0..skip {
            s.next_normals(&mut z);
        }
        s.next_normals(&mut z);
        let mut direct = vec![0.0; m];
        fill_normals(key, skip, &mut direct);
        prop_assert_eq!(z, direct);
    }

    #[test]
    fn coupled_runs_are_reproducible(seed in any::<u64>(), gamma in 0.01f64..0.2, n in 1u64..60) {
        let p = ProblemSpec::quadratic(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.8]),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
        ).unwrap();
        let theta0 = DVector::from_vec(vec![1.0, -1.0]);
        let key = StreamKey::new(seed, 0);
        let a = run_coupled_rr(&p, &theta0, gamma, n, key).unwrap();
        let b = run_coupled_rr(&p, &theta0, gamma, n, key).unwrap();
        prop_assert_eq!(&a.rr_estimate, &b.rr_estimate);
        // the γ chain of the coupled pair is the plain tail-averaged run
        let mut s = NoiseStream::from_key(key);
        let single = run_tail_averaged(&p, &theta0, gamma, n, &mut s, None).unwrap();
        prop_assert_eq!(&single.tail_average, &a.run_gamma.tail_average);
        prop_assert_eq!(&a.rr_estimate, &(&a.run_gamma.tail_average * 2.0 - &a.run_2gamma.tail_average));
    }

    #[test]
    fn audit_identity_on_quadratics(seed in any::<u64>(), gamma in 0.01f64..0.4, n in 1u64..300) {
        let p = ProblemSpec::quadratic(
            DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.3, 0.9]),
            DVector::from_vec(vec![0.5, 0.5]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]),
        ).unwrap();
        let mut s = NoiseStream::new(seed, 1);
        let run = run_tail_averaged(&p, &DVector::from_vec(vec![-1.0, 2.0]), gamma, n, &mut s, Some(1)).unwrap();
        let audit = decomposition_audit(&p, &run).unwrap();
        prop_assert!(audit.relative() <= 1e-10, "{:?}", audit);
    }

    #[test]
    fn cost_is_symmetric_and_vanishes_on_diagonal(a in prop::collection::vec(-3.0f64..3.0, 3), b in prop::collection::vec(-3.0f64..3.0, 3)) {
        let a = DVector::from_vec(a);
        let b = DVector::from_vec(b);
        let star = DVector::from_vec(vec![0.1, 0.0, -0.2]);
        let c = |x: &DVector<f64>, y: &DVector<f64>| cost_function_c(x, y, &star, 0.1, 0.5, 1.3);
        prop_assert_eq!(c(&a, &b), c(&b, &a));
        prop_assert_eq!(c(&a, &a), 0.0);
        prop_assert!(c(&a, &b) >= 0.0);
    }
}
