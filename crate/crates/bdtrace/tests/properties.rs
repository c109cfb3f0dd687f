use bdtrace::approx::{c_transform, excursion_times, rho};
use bdtrace::bd_core::{
    allocate_jump_measure, chain_from_feller, compute_scale_speed, level_split, state_embedding, AtomicMeasure,
    BirthDeathMatrix, ChainImage, FellerParams, MassKind, StateEmbedding,
};
use bdtrace::config::ExperimentConfig;
use bdtrace::pathsim::{simulate_feller_bm, simulate_subordinator, SimConfig};
use bdtrace::resolvent::Tridiag;
use bdtrace::rng::{par_map, stream, tag};
use bdtrace::verify::{mc_stats, ReportRow};
use proptest::prelude::*;
use rand::Rng;

fn emb() -> StateEmbedding {
    state_embedding(&compute_scale_speed(&BirthDeathMatrix::q_geo(200))).unwrap()
}

fn measure() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((1e-6f64..3.0, 1e-3f64..5.0), 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn allocation_conserves_mass(atoms in measure()) {
        let e = emb();
        let p4 = AtomicMeasure::new(atoms, MassKind::Finite).unwrap();
        let nu = allocate_jump_measure(&p4, &e).unwrap();
        let total: f64 = nu.iter().sum();
        prop_assert!((total - p4.total_mass()).abs() < 1e-12 * p4.total_mass().max(1.0));
        prop_assert!(nu.iter().all(|w| *w >= 0.0));
    }

    #[test]
    fn split_interpolates_the_point(x in 1e-9f64..1.0) {
        let e = emb();
        let (n, up, down) = level_split(x, &e).unwrap();
        prop_assert!((up + down - 1.0).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&up));
        if down > 0.0 {
            let back = up * e.c_hat(n) + down * e.c_hat(n + 1);
            prop_assert!((back - x).abs() < 1e-14);
        }
    }

    #[test]
    fn chain_image_scales_with_params(p1 in 0.0f64..2.0, p2 in 0.01f64..2.0, x in 0.01f64..2.0, w in 0.0f64..2.0, s in 0.1f64..10.0) {
        let e = emb();
        let p4 = if w > 0.0 { AtomicMeasure::point(x, w).unwrap() } else { AtomicMeasure::empty() };
        let fp = FellerParams::new(p1, p2, 0.0, p4).unwrap();
        let (ChainImage::Chain(a), ChainImage::Chain(b)) =
            (chain_from_feller(&fp, &e).unwrap(), chain_from_feller(&fp.scaled(s), &e).unwrap()) else {
            unreachable!()
        };
        prop_assert!((b.beta - s * a.beta).abs() < 1e-12 * b.beta.max(1.0));
        prop_assert!((b.gamma - s * a.gamma).abs() < 1e-12);
        prop_assert!((b.nu_total() - s * a.nu_total()).abs() < 1e-12 * b.nu_total().max(1.0));
        prop_assert_eq!(a.beta, 2.0 * p2);
    }

    #[test]
    fn tridiagonal_solve_has_small_residual(n in 2usize..40, seed in any::<u64>()) {
        let mut rng = stream(seed, 0, 0);
        let sub: Vec<f64> = (0..n).map(|k| if k == 0 { 0.0 } else { -rng.random::<f64>() }).collect();
        let sup: Vec<f64> = (0..n).map(|k| if k + 1 == n { 0.0 } else { -rng.random::<f64>() }).collect();
        let diag: Vec<f64> = (0..n).map(|k| 2.5 + rng.random::<f64>() - sub[k] - sup[k]).collect();
        let rhs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let x = Tridiag::factor(&sub, &diag, &sup).unwrap().solve(&rhs);
        for k in 0..n {
            let mut r = diag[k] * x[k] - rhs[k];
            if k > 0 { r += sub[k] * x[k - 1]; }
            if k + 1 < n { r += sup[k] * x[k + 1]; }
            prop_assert!(r.abs() < 1e-12);
        }
    }

    #[test]
    fn ci_width_is_two_z_se(xs in prop::collection::vec(-10.0f64..10.0, 2..50)) {
        let s = mc_stats(&xs).unwrap();
        prop_assert!(((s.ci95.1 - s.ci95.0) - 2.0 * 1.96 * s.se).abs() < 1e-12);
        prop_assert!(s.se >= 0.0);
    }

    #[test]
    fn subordinator_is_increasing(p2 in 0.0f64..2.0, x in 0.01f64..1.0, w in 0.1f64..5.0, seed in any::<u64>()) {
        let cfg = SimConfig::new(1e-3, 1.0, seed);
        let p4 = AtomicMeasure::point(x, w).unwrap();
        let z = simulate_subordinator(p2, &p4, &cfg, 2.0, &mut stream(seed, tag::SUBORDINATOR, 0));
        let mut last = 0.0;
        for k in 0..=40 {
            let v = z.value(k as f64 * 0.05);
            prop_assert!(v >= last);
            last = v;
        }
        for s in [0.1, 0.5, 1.0] {
            prop_assert!(z.overshoot(s) >= 0.0);
        }
    }

    #[test]
    fn surgery_keeps_time_and_rho_is_monotone(seed in 0u64..1000, n in 1usize..5) {
        let e = emb();
        let fp = FellerParams::new(0.0, 1.0, 0.0, AtomicMeasure::point(0.4, 1.0).unwrap()).unwrap();
        let cfg = SimConfig::new(1e-3, 1.0, seed);
        let path = simulate_feller_bm(&fp, &cfg, 0.0, &[], 0).unwrap().path;
        let sched = excursion_times(&path, &e, n);
        sched.validate().unwrap();
        let (cut, gone) = c_transform(&path, &sched).unwrap();
        let kept = cut.times.last().copied().unwrap_or(0.0);
        let total = path.times.last().copied().unwrap();
        prop_assert!((kept + gone - total).abs() < 1e-9);
        let mut last = 0.0;
        for k in 0..20 {
            let r = rho(&sched, k as f64 * kept / 20.0);
            prop_assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn parallel_map_ignores_thread_count(n in 1usize..200, seed in any::<u64>(), threads in 1usize..6) {
        let f = |p: usize| stream(seed, tag::PATH, p as u64).random::<f64>();
        prop_assert_eq!(par_map(n, 1, f), par_map(n, threads, f));
    }

    #[test]
    fn report_row_round_trips(alpha in 0.01f64..5.0, i in 0usize..10, j in 0usize..10, a in -1e3f64..1e3, mc in -1e3f64..1e3, se in 1e-9f64..10.0) {
        let z = bdtrace::verify::z_score(mc, a, se);
        let row = ReportRow { case: "c".into(), alpha, i, j, analytic: a, mc, se, z, pass: z.abs() < 3.0 };
        let back: ReportRow = serde_json::from_str(&serde_json::to_string(&row).unwrap()).unwrap();
        prop_assert_eq!(row, back);
    }

    #[test]
    fn config_round_trips(seed in any::<u64>(), dt in 1e-6f64..1e-2, paths in 2usize..100_000, p1 in 0.0f64..1.0, p2 in 0.01f64..1.0) {
        let doc = format!("seed = {seed}\n[sim]\ndt = {dt:e}\npaths = {paths}\n[feller]\np1 = {p1:e}\np2 = {p2:e}\n");
        let c = ExperimentConfig::from_toml_str(&doc).unwrap();
        prop_assert_eq!(c.sim.dt, dt);
        let back = ExperimentConfig::from_toml_str(&c.to_toml()).unwrap();
        prop_assert_eq!(c, back);
    }
}
