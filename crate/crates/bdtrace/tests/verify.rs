use bdtrace::bd_core::{compute_scale_speed, state_embedding, AtomicMeasure, BirthDeathMatrix, FellerParams};
use bdtrace::verify::{
    doob_hold_mc, hitting_distribution_mc, hitting_formula, killed_laplace_mc, mc_stats, subordinator_laplace_mc,
};

fn emb() -> bdtrace::bd_core::StateEmbedding {
    state_embedding(&compute_scale_speed(&BirthDeathMatrix::q_geo(200))).unwrap()
}

#[test]
fn interpolation_formula_spot_values() {
    let e = emb();
    let f = hitting_formula(&e, 0.4);
    assert_eq!(f.len(), 2);
    assert!((f[0].1 - 0.6).abs() < 1e-15 && f[0].0 == 1);
    assert!((f[1].1 - 0.4).abs() < 1e-15 && f[1].0 == 2);
    let f = hitting_formula(&e, 0.25);
    assert!(f.iter().any(|&(n, w)| n == 2 && w == 1.0));
}

#[test]
fn hitting_from_point_four() {
    let r = hitting_distribution_mc(&emb(), 0.4, 4000, 1e-4, 1_000_000, 5, 1).unwrap();
    for row in &r.rows {
        assert!(row.z.abs() < 4.0, "{row:?}");
    }
    assert_eq!(r.unresolved, 0.0);
}

#[test]
fn small_pathwise_laws() {
    let k = killed_laplace_mc(0.5, 2.0, 4000, 1e-3, 5.0, 1, 1).unwrap();
    assert!(k.z.abs() < 4.0, "{k:?}");
    let p4 = AtomicMeasure::new(vec![(0.3, 2.0), (1.0, 0.5)], bdtrace::bd_core::MassKind::Finite).unwrap();
    for c in subordinator_laplace_mc(0.4, &p4, &[0.5, 1.0, 3.0], 4000, 2, 1).unwrap() {
        assert!(c.z.abs() < 4.0, "{c:?}");
    }
    let fp = FellerParams::new(0.5, 0.0, 0.3, AtomicMeasure::point(0.4, 1.0).unwrap()).unwrap();
    let d = doob_hold_mc(&fp, 4000, 3, 1).unwrap();
    assert!((d.target - 0.2).abs() < 1e-15);
    assert!(d.z.abs() < 4.0, "{d:?}");
}

#[test]
fn stats_errors() {
    assert!(mc_stats(&[1.0]).is_err());
    let s = mc_stats(&[2.0; 10]).unwrap();
    assert_eq!((s.mean, s.se), (2.0, 0.0));
}
