//! One PASS/FAIL line per acceptance criterion. Exits nonzero if any fails.

use std::path::PathBuf;
use std::time::Instant;

use bdtrace::approx::{
    chain_approximant, convergence_diagnostic, estimate_instant_dist, reconstruct_lambda, recover_params,
    recursion_check, simulate_approaches, LambdaMeasure,
};
use bdtrace::bd_core::{
    allocate_jump_measure, chain_from_feller, compute_scale_speed, state_embedding, AtomicMeasure, BirthDeathMatrix,
    BoundaryClass, ChainImage, ChainParams, FellerParams, MassKind, ScaleSpeed, StateEmbedding,
};
use bdtrace::cli::{run, Experiment};
use bdtrace::config::ExperimentConfig;
use bdtrace::pathsim::{wrong_order_demo, SimConfig};
use bdtrace::resolvent::{
    phi_minimal, psi_chain, residual_chain_bc, residual_feller_bc, resolvent_identity_residual, symmetry_residual,
    KilledKernel,
};
use bdtrace::rng::{default_threads, stream};
use bdtrace::timechange::KernelConfig;
use bdtrace::verify::{
    analytic_psi, compare, cross_validate, doob_hold_mc, hitting_distribution_mc, killed_laplace_mc,
    subordinator_laplace_mc,
};
use rand::Rng;

type Outcome = Result<String, String>;

fn setup() -> (BirthDeathMatrix, ScaleSpeed, StateEmbedding) {
    let q = BirthDeathMatrix::q_geo(200);
    let ss = compute_scale_speed(&q);
    let emb = state_embedding(&ss).unwrap();
    (q, ss, emb)
}

fn fail_if(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Err(msg)
    } else {
        Ok(())
    }
}

fn mixed() -> FellerParams {
    FellerParams::new(0.2, 0.3, 0.1, AtomicMeasure::point(0.4, 1.0).unwrap()).unwrap()
}

fn c1() -> Outcome {
    let t = Instant::now();
    let ss = compute_scale_speed(&BirthDeathMatrix::q_geo(200));
    let mut worst: f64 = 0.0;
    for k in 0..=50 {
        worst = worst.max((ss.c[k] - (1.0 - 2f64.powi(-(k as i32)))).abs());
        worst = worst.max((ss.mu[k] - 2f64.powi(-(k as i32))).abs());
    }
    let el = t.elapsed().as_secs_f64();
    fail_if(worst >= 1e-12, format!("max error {worst:e}"))?;
    fail_if(ss.class != BoundaryClass::Regular, format!("class {:?}", ss.class))?;
    fail_if(el >= 1.0, format!("took {el:.2} s"))?;
    Ok(format!("max error {worst:e}, Regular, {el:.3} s"))
}

fn c2() -> Outcome {
    let t = Instant::now();
    let (_, _, emb) = setup();
    let nu = allocate_jump_measure(&AtomicMeasure::point(0.4, 1.0).unwrap(), &emb).unwrap();
    let err = (nu[1] - 0.6).abs().max((nu[2] - 0.4).abs());
    fail_if(err >= 1e-15, format!("delta_0.4 split ({}, {})", nu[1], nu[2]))?;
    let mut rng = stream(2024, 0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..20);
        let atoms: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(1e-6..3.0), rng.random_range(1e-3..5.0)))
            .collect();
        let p4 = AtomicMeasure::new(atoms, MassKind::Finite).unwrap();
        let nu = allocate_jump_measure(&p4, &emb).unwrap();
        worst = worst.max((nu.iter().sum::<f64>() - p4.total_mass()).abs());
    }
    let el = t.elapsed().as_secs_f64();
    fail_if(worst >= 1e-12, format!("conservation error {worst:e}"))?;
    fail_if(el >= 1.0, format!("took {el:.2} s"))?;
    Ok(format!("split ({}, {}), conservation {worst:e}, {el:.3} s", nu[1], nu[2]))
}

fn c3() -> Outcome {
    let t = Instant::now();
    let (q, ss, _) = setup();
    let chains = [
        ("reflecting", ChainParams::with_atoms(0.0, 2.0, &[]).unwrap()),
        ("killing", ChainParams::with_atoms(1.0, 1.0, &[]).unwrap()),
        ("mixed", ChainParams::with_atoms(0.2, 0.6, &[(1, 0.6), (2, 0.4)]).unwrap()),
        ("restart", ChainParams::with_atoms(0.0, 0.0, &[(1, 1.0)]).unwrap()),
    ];
    let (mut hon, mut sym, mut res, mut bc, mut uid): (f64, f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (_, cp) in &chains {
        let mut psis = Vec::new();
        for al in [0.5, 1.0, 2.0] {
            let mr = phi_minimal(&q, &ss, al, 200).map_err(|e| e.to_string())?;
            uid = uid.max(mr.u_identity_residual(11));
            let psi = psi_chain(&mr, &ss, cp).map_err(|e| e.to_string())?;
            if cp.gamma == 0.0 {
                for i in 0..=10 {
                    hon = hon.max((al * psi.row(i).iter().sum::<f64>() - 1.0).abs());
                }
            }
            if cp.nu_total() == 0.0 {
                for i in 0..=10 {
                    for j in 0..=10 {
                        let (a, b) = (ss.mu[i] * psi.psi(i, j), ss.mu[j] * psi.psi(j, i));
                        sym = sym.max((a - b).abs() / a.abs().max(b.abs()));
                    }
                }
            }
            let h: Vec<f64> = (0..200).map(|k| if k <= 10 { 1.0 } else { 0.0 }).collect();
            bc = bc.max(residual_chain_bc(&psi, &ss, cp, &h).map_err(|e| e.to_string())?.residual);
            psis.push(psi);
        }
        for k in 1..psis.len() {
            res = res.max(resolvent_identity_residual(&psis[k - 1], &psis[k]).map_err(|e| e.to_string())?);
        }
    }
    let el = t.elapsed().as_secs_f64();
    let msg = format!("honesty {hon:e}, symmetry {sym:e}, resolvent eq {res:e}, boundary {bc:e}, u {uid:e}, {el:.2} s");
    fail_if(hon >= 1e-8 || sym >= 1e-8 || res >= 1e-6 || bc >= 1e-4 || uid >= 1e-10 || el >= 10.0, msg.clone())?;
    Ok(msg)
}

fn c4() -> Outcome {
    let t = Instant::now();
    let h = |x: f64| (-x).exp() * (1.0 + x * x);
    let h2 = |x: f64| (-2.0 * x).exp() * (1.0 + x);
    let regimes = [
        FellerParams::simple(0.0, 1.0, 0.0).unwrap(),
        FellerParams::simple(0.5, 1.0, 0.0).unwrap(),
        FellerParams::simple(0.5, 1.0, 0.3).unwrap(),
        FellerParams::new(0.2, 0.3, 0.1, AtomicMeasure::point(0.4, 1.0).unwrap()).unwrap(),
    ];
    let mut bc: f64 = 0.0;
    let mut sym_ok: f64 = 0.0;
    let mut sym_jump = f64::INFINITY;
    for al in [0.5, 1.0, 2.0] {
        let k = KilledKernel::new(al);
        for fp in &regimes {
            bc = bc.max(residual_feller_bc(fp, &k, &h).map_err(|e| e.to_string())?.residual_analytic);
            let s = symmetry_residual(fp, &k, &h, &h2).map_err(|e| e.to_string())?;
            if fp.p4.is_empty() {
                sym_ok = sym_ok.max(s);
            } else {
                sym_jump = sym_jump.min(s);
            }
        }
    }
    let g = KilledKernel::new(0.5).density(1.0, 1.0);
    let gerr = (g - (1.0 - (-2.0f64).exp())).abs();
    let el = t.elapsed().as_secs_f64();
    let msg = format!(
        "boundary {bc:e}, symmetry {sym_ok:e} without jumps / {sym_jump:.3e} with, g0 error {gerr:e}, {el:.2} s"
    );
    fail_if(bc >= 1e-5 || sym_ok >= 1e-8 || sym_jump <= 1e-3 || gerr >= 1e-9 || el >= 10.0, msg.clone())?;
    Ok(msg)
}

fn c5(threads: usize) -> Outcome {
    let t = Instant::now();
    let n = 100_000;
    let k = killed_laplace_mc(0.5, 2.0, n, 1e-3, 5.0, 51, threads).map_err(|e| e.to_string())?;
    let p4 = AtomicMeasure::new(vec![(0.3, 2.0), (1.0, 0.5)], MassKind::Finite).unwrap();
    let subs = subordinator_laplace_mc(0.4, &p4, &[0.5, 1.0, 3.0], n, 52, threads).map_err(|e| e.to_string())?;
    let doob = FellerParams::new(0.5, 0.0, 0.3, AtomicMeasure::point(0.4, 1.0).unwrap()).unwrap();
    let d = doob_hold_mc(&doob, n, 53, threads).map_err(|e| e.to_string())?;
    let mut zs = vec![("killed", k.z), ("hold", d.z)];
    zs.extend(subs.iter().map(|s| ("laplace", s.z)));
    let msg = format!(
        "z: killed {:.2}, subordinator {:?}, hold {:.2}, {:.0} s",
        k.z,
        subs.iter().map(|s| (s.z * 100.0).round() / 100.0).collect::<Vec<_>>(),
        d.z,
        t.elapsed().as_secs_f64()
    );
    fail_if(zs.iter().any(|z| z.1.abs() >= 3.0), msg.clone())?;
    Ok(msg)
}

fn pure_jump(emb: &StateEmbedding) -> FellerParams {
    let atoms: Vec<(f64, f64)> = (0..8)
        .map(|k| (emb.c_hat(k), 2f64.powi(k as i32) / ((k + 1) as f64).powi(2)))
        .collect();
    let tail: f64 = (8..2000).map(|k| 1.0 / ((k + 1) as f64).powi(2)).sum();
    let p4 = AtomicMeasure::new(atoms, MassKind::TruncatedInfinite { index: 8, tail_bound: tail }).unwrap();
    FellerParams::new(0.0, 0.0, 0.0, p4).unwrap()
}

fn c6(threads: usize) -> Outcome {
    let t = Instant::now();
    let (q, ss, emb) = setup();
    let mut kc = KernelConfig::new(1e-4, 7);
    kc.threads = threads;
    let cases = [
        ("killed", FellerParams::simple(1.0, 0.0, 0.0).unwrap()),
        ("reflecting", FellerParams::simple(0.0, 1.0, 0.0).unwrap()),
        ("mixed", mixed()),
        ("pure_jump", pure_jump(&emb)),
    ];
    let alphas = [0.5, 1.0];
    let mut parts = Vec::new();
    let mut ok = true;
    let mut neg_z = 0.0;
    for (name, fp) in &cases {
        let cv = cross_validate(name, &q, &ss, &emb, fp, &alphas, &[0, 1, 2, 3], 3, 20_000, &kc, 200)
            .map_err(|e| e.to_string())?;
        ok &= cv.all_pass();
        parts.push(format!("{name} {:.2}", cv.max_abs_z()));
        if *name == "mixed" {
            let ChainImage::Chain(mut cp) = chain_from_feller(fp, &emb).unwrap() else {
                unreachable!()
            };
            cp.beta = fp.p2;
            let psi = analytic_psi(&q, &ss, &ChainImage::Chain(cp), &alphas, 200).map_err(|e| e.to_string())?;
            let rows = compare("mixed_beta_p2", &cv.estimates, |al, i, j| {
                psi[alphas.iter().position(|&a| a == al).unwrap()].psi(i, j)
            });
            neg_z = rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
        }
    }
    let msg = format!(
        "max |z|: {}; negative control max |z| {neg_z:.1}; {:.0} s",
        parts.join(", "),
        t.elapsed().as_secs_f64()
    );
    fail_if(!ok || neg_z <= 5.0, msg.clone())?;
    Ok(msg)
}

fn c7(threads: usize) -> Outcome {
    let (_, _, emb) = setup();
    let r = hitting_distribution_mc(&emb, 0.4, 100_000, 1e-4, 1_000_000, 71, threads).map_err(|e| e.to_string())?;
    let msg = r
        .rows
        .iter()
        .map(|row| format!("level {}: {:.4} (z {:.2})", row.level, row.freq, row.z))
        .collect::<Vec<_>>()
        .join(", ");
    fail_if(r.rows.iter().any(|row| row.z.abs() >= 3.0) || r.unresolved > 0.0, msg.clone())?;
    Ok(msg)
}

fn c8(threads: usize) -> Outcome {
    let t = Instant::now();
    let (_, ss, emb) = setup();
    let mut kc = KernelConfig::new(1e-4, 81);
    kc.threads = threads;
    // reflecting: lambda^(n) = delta at c_hat[n]
    let refl = FellerParams::simple(0.0, 1.0, 0.0).unwrap();
    let ap = simulate_approaches(&refl, &ss, &emb, 6, 2000, &kc, 0).map_err(|e| e.to_string())?;
    for n in 0..=6 {
        let e = estimate_instant_dist(&ap, n).map_err(|e| e.to_string())?;
        let point = e.cells.len() == 1 && e.cells[0].location == emb.c_hat(n) && e.cells[0].freq == 1.0;
        fail_if(!point, format!("reflecting lambda^({n}) is not a point mass at c_hat: {:?}", e.cells))?;
    }
    let fp = FellerParams::new(0.2, 0.3, 0.0, AtomicMeasure::point(0.4, 1.0).unwrap()).unwrap();
    let a = simulate_approaches(&fp, &ss, &emb, 5, 20_000, &kc, 1).map_err(|e| e.to_string())?;
    let b = simulate_approaches(&fp, &ss, &emb, 5, 20_000, &kc, 2).map_err(|e| e.to_string())?;
    let ea: Vec<_> = (0..=5).map(|n| estimate_instant_dist(&a, n).unwrap()).collect();
    let eb: Vec<_> = (0..=5).map(|n| estimate_instant_dist(&b, n).unwrap()).collect();
    let mut rec_z: f64 = 0.0;
    for (n, m) in [(0, 1), (1, 2), (1, 3), (2, 4), (3, 5), (0, 5)] {
        rec_z = rec_z.max(recursion_check(&ea[n], &eb[m], &emb).map_err(|e| e.to_string())?.max_z);
    }
    let rec = recover_params(&reconstruct_lambda(&ea, &emb).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let truth = fp.normalized();
    let atom = rec.params.p4.atoms().iter().find(|x| x.0 == 0.4).map_or(0.0, |x| x.1);
    let rel = [
        (rec.params.p1 - truth.p1).abs() / truth.p1,
        (rec.params.p2 - truth.p2).abs() / truth.p2,
        (atom - truth.p4.atoms()[0].1).abs() / truth.p4.atoms()[0].1,
    ];
    let rel_max = rel.iter().copied().fold(0.0, f64::max);
    let lam = LambdaMeasure::from_params(&fp, &emb);
    let traces: Vec<_> = a.iter().map(|x| x.trace.clone()).collect();
    let mut hat_z: f64 = 0.0;
    for n in 0..=5 {
        let c = chain_approximant(&traces, n).map_err(|e| e.to_string())?;
        let (hat, dead) = lam.hat_lambda(&emb, n);
        let mut cells: Vec<(f64, f64, f64)> = (0..=n).map(|k| (c.freq[k], c.se[k], hat[k])).collect();
        cells.push((c.cemetery, c.cemetery_se, dead));
        for (mc, se, p) in cells {
            let se = se.max((p * (1.0 - p) / c.n_paths as f64).sqrt());
            hat_z = hat_z.max(bdtrace::verify::z_score(mc, p, se).abs());
        }
    }
    let levels: Vec<usize> = (2..=12).collect();
    let rho = convergence_diagnostic(&emb, 1.0, &levels, 200, 1e-4, 82, threads).map_err(|e| e.to_string())?;
    let decreasing = rho.windows(2).all(|w| w[1].median < w[0].median);
    let msg = format!(
        "point masses ok, recursion max |z| {rec_z:.2}, recovery max rel err {rel_max:.3}, \
         hat-lambda max |z| {hat_z:.2}, rho medians {} ({:.4} to {:.2e}), {:.0} s",
        if decreasing { "decreasing" } else { "NOT decreasing" },
        rho[0].median,
        rho[rho.len() - 1].median,
        t.elapsed().as_secs_f64()
    );
    fail_if(rec_z >= 3.0 || rel_max > 0.1 || hat_z >= 3.0 || !decreasing, msg.clone())?;
    Ok(msg)
}

fn c9(threads: usize) -> Outcome {
    let (_, ss, emb) = setup();
    let fp = FellerParams::new(0.0, 1.0, 0.0, AtomicMeasure::point(0.4, 1.0).unwrap()).unwrap();
    let cfg = SimConfig::new(1e-4, 2.0, 5);
    let r = wrong_order_demo(&ss, &emb, &fp, &cfg, 12, 200, 1e-3, threads).map_err(|e| e.to_string())?;
    let msg = format!(
        "wrong order off-level fraction {:.4} (z {:.1}), correct order {}",
        r.wrong_fraction.mean, r.z, r.correct_fraction
    );
    fail_if(r.z <= 5.0 || r.correct_fraction != 0.0, msg.clone())?;
    Ok(msg)
}

fn snapshot(dir: &PathBuf) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn c10() -> Outcome {
    let doc = |t: usize| {
        format!(
            "seed = 10\nthreads = {t}\n[feller]\np1 = 0.0\np2 = 1.0\np4 = [{{ at = 0.4, mass = 1.0 }}]\n\
             [sim]\npaths = 400\nhorizon = 0.5\n[cross_validate]\nalphas = [0.5, 1.0]\nstarts = [0, 1]\njmax = 2\n\
             [approx]\nlevels = 3\npairs = [[0, 2]]\nrho_levels = [2, 3, 4]\nrho_paths = 40\n"
        )
    };
    let root = std::env::temp_dir().join(format!("bdtrace-acceptance-{}", std::process::id()));
    let exps = [
        Experiment::Simulate,
        Experiment::Trace,
        Experiment::CrossValidate,
        Experiment::Approx,
        Experiment::Recover,
        Experiment::DemoWrongOrder,
    ];
    let mut bytes = 0;
    for exp in exps {
        let mut snaps = Vec::new();
        for t in [1, 4] {
            let dir = root.join(format!("{}-{t}", exp.name()));
            let _ = std::fs::remove_dir_all(&dir);
            let cfg = ExperimentConfig::from_toml_str(&doc(t)).unwrap();
            run(exp, &cfg, &dir).map_err(|e| format!("{}: {e}", exp.name()))?;
            snaps.push(snapshot(&dir));
        }
        fail_if(snaps[0] != snaps[1], format!("{} differs between 1 and 4 threads", exp.name()))?;
        bytes += snaps[0].iter().map(|f| f.1.len()).sum::<usize>();
    }
    let _ = std::fs::remove_dir_all(&root);
    Ok(format!("{} experiments byte-identical at 1 and 4 threads ({bytes} bytes)", exps.len()))
}

fn main() {
    let threads = default_threads();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("closed forms", Box::new(c1)),
        ("allocation", Box::new(c2)),
        ("chain resolvent suite", Box::new(c3)),
        ("Feller resolvent suite", Box::new(c4)),
        ("pathwise laws", Box::new(move || c5(threads))),
        ("trace resolvent cross-validation", Box::new(move || c6(threads))),
        ("hitting interpolation", Box::new(move || c7(threads))),
        ("approximation machinery", Box::new(move || c8(threads))),
        ("wrong-order demonstration", Box::new(move || c9(threads))),
        ("determinism", Box::new(c10)),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match r {
            Ok(msg) => println!("criterion {}: PASS {name}: {msg}", k + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {msg}", k + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
