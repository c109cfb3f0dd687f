use bdtrace::bd_core::{compute_scale_speed, state_embedding, AtomicMeasure, BirthDeathMatrix, FellerParams};
use bdtrace::pathsim::{simulate_feller_bm, SimConfig};
use bdtrace::timechange::{
    accumulate_pcaf, inverse_clock, kernel_cap, mc_trace_resolvent, trace_path, write_trace_csv, KernelConfig,
    TraceChainPath,
};
use bdtrace::verify::{analytic_psi, compare};

#[test]
fn walker_estimate_of_the_reflecting_chain() {
    let q = BirthDeathMatrix::q_geo(200);
    let ss = compute_scale_speed(&q);
    let emb = state_embedding(&ss).unwrap();
    let fp = FellerParams::simple(0.0, 1.0, 0.0).unwrap();
    let mut kc = KernelConfig::new(1e-4, 21);
    kc.threads = 1;
    let est = mc_trace_resolvent(&fp, &ss, &emb, &[1.0], 1, 2, 1500, &kc).unwrap();
    let image = bdtrace::bd_core::chain_from_feller(&fp, &emb).unwrap();
    let psi = analytic_psi(&q, &ss, &image, &[1.0], 200).unwrap();
    for r in compare("reflecting", &est, |_, i, j| psi[0].psi(i, j)) {
        assert!(r.z.abs() < 4.0, "{r:?}");
    }
    // both estimators see the same paths
    let e = &est[0];
    for j in 0..=2 {
        assert!((e.values[j] - e.secondary[j]).abs() < 4.0 * e.se[j].max(e.secondary_se[j]));
    }
    assert!(kernel_cap(&ss, &emb, &kc) >= 2);
}

#[test]
fn grid_clock_inverts() {
    let q = BirthDeathMatrix::q_geo(200);
    let ss = compute_scale_speed(&q);
    let emb = state_embedding(&ss).unwrap();
    let fp = FellerParams::new(0.0, 1.0, 0.0, AtomicMeasure::point(0.4, 1.0).unwrap()).unwrap();
    let cfg = SimConfig::new(1e-4, 1.0, 2);
    let levels: Vec<f64> = (0..=10).map(|n| emb.c_hat(n)).collect();
    let f = simulate_feller_bm(&fp, &cfg, 0.0, &levels, 0).unwrap();
    let clock = accumulate_pcaf(&f, &ss, &emb, 10).unwrap();
    assert!(clock.a.windows(2).all(|w| w[1] >= w[0]));
    let end = clock.end();
    assert!(end > 0.0);
    for k in 1..10 {
        let t = end * k as f64 / 10.0;
        let s = inverse_clock(&clock, t).unwrap();
        let j = clock.times.partition_point(|&u| u <= s).min(clock.times.len() - 1);
        assert!(clock.a[j] >= t - 1e-12);
    }
    assert_eq!(inverse_clock(&clock, end * 2.0), None);
    let tr = trace_path(&f, &clock, &emb, 8.0 * cfg.dt.sqrt()).unwrap();
    assert!(tr.events.windows(2).all(|w| w[1].chain_time >= w[0].chain_time));
    assert!(tr.events.iter().all(|e| e.level <= 11));
}

#[test]
fn trace_dump_schema() {
    let mut t = TraceChainPath::default();
    t.record(0.0, 2, true);
    t.record(0.5, 1, false);
    t.record(0.7, 1, false);
    t.end = 1.0;
    assert_eq!(t.events.len(), 2);
    assert_eq!(t.level_at(0.6), Some(1));
    assert_eq!(t.level_at(1.5), None);
    let mut buf = Vec::new();
    write_trace_csv(&mut buf, &[(3, &t)]).unwrap();
    let s = String::from_utf8(buf).unwrap();
    assert!(s.starts_with("path_id,chain_time,level\n3,0,2\n3,0.5,1\n"), "{s}");
    let occ = t.occupation(1.0, 1);
    assert!((occ - ((-0.5f64).exp() - (-1.0f64).exp())).abs() < 1e-15);
}
