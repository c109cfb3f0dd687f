use bdtrace::approx::{
    chain_approximant, convergence_diagnostic, estimate_instant_dist, reconstruct_lambda, recover_params,
    recursion_check, simulate_approaches, LambdaMeasure,
};
use bdtrace::bd_core::{compute_scale_speed, state_embedding, AtomicMeasure, BirthDeathMatrix, FellerParams};
use bdtrace::timechange::KernelConfig;
use bdtrace::Error;

fn setup() -> (bdtrace::bd_core::ScaleSpeed, bdtrace::bd_core::StateEmbedding, KernelConfig) {
    let ss = compute_scale_speed(&BirthDeathMatrix::q_geo(200));
    let emb = state_embedding(&ss).unwrap();
    let mut kc = KernelConfig::new(1e-4, 13);
    kc.threads = 1;
    (ss, emb, kc)
}

#[test]
fn reflecting_instant_laws_are_point_masses() {
    let (ss, emb, kc) = setup();
    let fp = FellerParams::simple(0.0, 1.0, 0.0).unwrap();
    let ap = simulate_approaches(&fp, &ss, &emb, 5, 300, &kc, 0).unwrap();
    for n in 0..=5 {
        let e = estimate_instant_dist(&ap, n).unwrap();
        assert_eq!(e.cells.len(), 1);
        assert_eq!(e.cells[0].location, emb.c_hat(n));
        assert_eq!(e.cells[0].freq, 1.0);
        assert_eq!(e.cemetery.freq, 0.0);
    }
}

// Normalized: p2~ = 1/3, lambda(cemetery) = 2/9, lambda = (10/9) delta_0.4.
#[test]
fn lambda_of_the_point_mass_case() {
    let (_, emb, _) = setup();
    let fp = FellerParams::new(0.2, 0.3, 0.0, AtomicMeasure::point(0.4, 1.0).unwrap()).unwrap();
    let lam = LambdaMeasure::from_params(&fp, &emb);
    assert!((lam.p2_tilde - 1.0 / 3.0).abs() < 1e-15);
    assert!((lam.cemetery - 2.0 / 9.0).abs() < 1e-15);
    assert!((lam.atoms[0].1 - 10.0 / 9.0).abs() < 1e-15);
    let (hat, dead) = lam.hat_lambda(&emb, 3);
    let want = [0.0, 1.0 / 6.0, 1.0 / 9.0, 2.0 / 3.0];
    for k in 0..4 {
        assert!((hat[k] - want[k]).abs() < 1e-14, "{hat:?}");
    }
    assert!((dead - 1.0 / 18.0).abs() < 1e-14);
}

#[test]
fn recursion_and_recovery_on_the_point_mass_case() {
    let (ss, emb, kc) = setup();
    let fp = FellerParams::new(0.2, 0.3, 0.0, AtomicMeasure::point(0.4, 1.0).unwrap()).unwrap();
    let a = simulate_approaches(&fp, &ss, &emb, 4, 3000, &kc, 1).unwrap();
    let b = simulate_approaches(&fp, &ss, &emb, 4, 3000, &kc, 2).unwrap();
    let ea: Vec<_> = (0..=4).map(|n| estimate_instant_dist(&a, n).unwrap()).collect();
    let eb: Vec<_> = (0..=4).map(|n| estimate_instant_dist(&b, n).unwrap()).collect();
    for (n, m) in [(0, 1), (1, 3), (2, 4)] {
        let r = recursion_check(&ea[n], &eb[m], &emb).unwrap();
        assert!(r.max_z < 4.0, "({n},{m}): {r:?}");
    }
    let rec = recover_params(&reconstruct_lambda(&ea, &emb).unwrap()).unwrap();
    let truth = fp.normalized();
    assert!((rec.params.p1 - truth.p1).abs() < 0.15 * truth.p1);
    assert!((rec.params.p2 - truth.p2).abs() < 0.15 * truth.p2);
    let traces: Vec<_> = a.iter().map(|x| x.trace.clone()).collect();
    let c = chain_approximant(&traces, 3).unwrap();
    let total: f64 = c.freq.iter().sum::<f64>() + c.cemetery;
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn killed_bm_has_no_instant_law() {
    let (ss, emb, kc) = setup();
    let fp = FellerParams::simple(1.0, 0.0, 0.0).unwrap();
    assert!(matches!(
        simulate_approaches(&fp, &ss, &emb, 3, 10, &kc, 0),
        Err(Error::RegimeMismatch(_))
    ));
}

#[test]
fn discarded_time_shrinks_with_n() {
    let (_, emb, _) = setup();
    let rows = convergence_diagnostic(&emb, 1.0, &[2, 4, 6, 8], 60, 1e-4, 4, 1).unwrap();
    assert!(rows.windows(2).all(|w| w[1].median < w[0].median), "{rows:?}");
    assert!(rows.iter().all(|r| r.p95 >= r.median));
}
