use bdtrace::bd_core::{AtomicMeasure, FellerParams};
use bdtrace::pathsim::{discounted_integral, simulate_feller_bm, write_path_csv, SimConfig, CEMETERY};
use bdtrace::resolvent::{feller_resolvent_at_zero, KilledKernel};
use bdtrace::rng::par_map;
use bdtrace::verify::mc_stats;

fn within(mean: f64, se: f64, target: f64, k: f64) -> bool {
    (mean - target).abs() <= k * se
}

// E L^0_1 = E|B_1| = sqrt(2/pi); E L^a_1(|B|) = 2 (E|B_1 - a| - a).
#[test]
fn reflecting_local_times_have_the_right_means() {
    let fp = FellerParams::simple(0.0, 1.0, 0.0).unwrap();
    let cfg = SimConfig::new(1e-3, 1.0, 3);
    let runs = par_map(4000, 1, |p| {
        let f = simulate_feller_bm(&fp, &cfg, 0.0, &[0.5], p as u64).unwrap();
        (*f.ledger.ell.last().unwrap(), *f.ledger.local[0].last().unwrap())
    });
    let l0 = mc_stats(&runs.iter().map(|r| r.0).collect::<Vec<_>>()).unwrap();
    let la = mc_stats(&runs.iter().map(|r| r.1).collect::<Vec<_>>()).unwrap();
    assert!(within(l0.mean, l0.se, (2.0 / std::f64::consts::PI).sqrt(), 4.0), "{l0:?}");
    assert!(within(la.mean, la.se, 0.791_186, 4.0), "{la:?}");
}

fn resolvent_check(fp: &FellerParams, seed: u64) {
    let alpha = 2.0;
    let h = |x: f64| (-x).exp();
    let cfg = SimConfig::new(1e-3, 5.0, seed);
    let v = par_map(3000, 1, |p| {
        let f = simulate_feller_bm(fp, &cfg, 0.0, &[], p as u64).unwrap();
        discounted_integral(&f.path, alpha, &h, cfg.dt)
    });
    let s = mc_stats(&v).unwrap();
    let exact = feller_resolvent_at_zero(fp, &KilledKernel::new(alpha), &h).unwrap().value;
    assert!(within(s.mean, s.se, exact, 4.0), "{fp:?}: {} vs {exact} (se {})", s.mean, s.se);
}

#[test]
fn discounted_occupation_matches_the_resolvent() {
    resolvent_check(&FellerParams::simple(0.0, 1.0, 0.0).unwrap(), 1);
    resolvent_check(&FellerParams::simple(0.5, 1.0, 0.0).unwrap(), 2);
    resolvent_check(&FellerParams::simple(0.5, 1.0, 0.5).unwrap(), 3);
    resolvent_check(
        &FellerParams::new(0.2, 0.3, 0.1, AtomicMeasure::point(0.4, 1.0).unwrap()).unwrap(),
        4,
    );
}

#[test]
fn same_index_same_path() {
    let fp = FellerParams::new(0.2, 0.3, 0.1, AtomicMeasure::point(0.4, 1.0).unwrap()).unwrap();
    let cfg = SimConfig::new(1e-3, 1.0, 9);
    let a = simulate_feller_bm(&fp, &cfg, 0.0, &[0.5], 4).unwrap();
    let b = simulate_feller_bm(&fp, &cfg, 0.0, &[0.5], 4).unwrap();
    let c = simulate_feller_bm(&fp, &cfg, 0.0, &[0.5], 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.path.values, c.path.values);
}

#[test]
fn killed_paths_end_in_the_cemetery() {
    let fp = FellerParams::simple(50.0, 1.0, 0.0).unwrap();
    let cfg = SimConfig::new(1e-3, 2.0, 1);
    let f = simulate_feller_bm(&fp, &cfg, 0.0, &[], 0).unwrap();
    assert!(f.path.killed);
    assert_eq!(*f.path.values.last().unwrap(), CEMETERY);
    let mut buf = Vec::new();
    write_path_csv(&mut buf, &[(0, &f.path)]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("path_id,t,value,flags\n"));
    assert!(text.lines().last().unwrap().contains(",-1,"));
}

#[test]
fn empty_dump_is_header_only() {
    let mut buf = Vec::new();
    write_path_csv(&mut buf, &[]).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "path_id,t,value,flags\n");
}
