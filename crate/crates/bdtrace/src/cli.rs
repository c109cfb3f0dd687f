//! Experiment runner behind the `bdtrace` binary. Each experiment writes its
//! artifacts into one directory and returns the checks it declared.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::approx::{
    chain_approximant, convergence_diagnostic, estimate_instant_dist, reconstruct_lambda, recover_params,
    recursion_check, simulate_approaches, InstantDistEstimate, LambdaMeasure, RhoRow,
};
use crate::bd_core::{
    chain_from_feller, classify_boundary, compute_scale_speed, state_embedding, BirthDeathMatrix, BoundaryClass,
    ChainImage, ChainParams, FellerParams, ScaleSpeed, StateEmbedding,
};
use crate::config::{EstimatorSpec, ExperimentConfig};
use crate::error::{Error, Result};
use crate::pathsim::{simulate_feller_bm, wrong_order_demo, write_path_csv, LocalTimeEstimator, SimConfig, CEMETERY};
use crate::resolvent::{
    doob_resolvent, feller_resolvent, phi_minimal, psi_from_image, resolvent_identity_residual, residual_chain_bc,
    residual_feller_bc, symmetry_residual, KilledKernel,
};
use crate::timechange::{accumulate_pcaf, trace_path, write_trace_csv, KernelConfig};
use crate::verify::{analytic_psi, compare, cross_validate, mc_stats, z_score, ReportRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Classify,
    Resolvent,
    Simulate,
    Trace,
    CrossValidate,
    Approx,
    Recover,
    DemoWrongOrder,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Classify => "classify",
            Experiment::Resolvent => "resolvent",
            Experiment::Simulate => "simulate",
            Experiment::Trace => "trace",
            Experiment::CrossValidate => "cross-validate",
            Experiment::Approx => "approx",
            Experiment::Recover => "recover",
            Experiment::DemoWrongOrder => "demo-wrong-order",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            pass,
            detail,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    /// Text for standard output.
    pub stdout: String,
    pub files: Vec<PathBuf>,
    pub checks: Vec<Check>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.paths {
            cfg.sim.paths = p;
        }
    }
}

/// Errors caused by the input rather than by the computation.
pub fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_)
            | Error::InvalidMeasure(_)
            | Error::InvalidFellerParams(_)
            | Error::InvalidChainParams(_)
            | Error::InvalidSimConfig(_)
            | Error::BandwidthTooSmall { .. }
            | Error::RegimeMismatch(_)
            | Error::NonPositiveRate(_)
            | Error::CapTooSmall(_)
            | Error::SequenceTooShort { .. }
            | Error::AtomBelowTruncation { .. }
            | Error::LevelMismatch(_)
    )
}

/// 0 on success, 1 when a check fails (or the computation does), 2 for
/// configuration errors.
pub fn exit_code(result: &Result<Outcome>, enforce: bool) -> i32 {
    match result {
        Ok(o) if o.passed() || !enforce => 0,
        Ok(_) => 1,
        Err(e) if is_config_error(e) => 2,
        Err(_) => 1,
    }
}

/// FNV-1a over the canonical config text, thread count and output
/// directory excluded.
pub fn fingerprint(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.threads = None;
    c.output.dir = None;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in c.to_toml().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl Writer<'_> {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
        self.files.push(p);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
        s.push('\n');
        self.put(name, s.as_bytes())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        self.put(name, &csv_bytes(header, rows)?)
    }
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Io(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

pub const REPORT_HEADER: [&str; 7] = ["alpha", "i", "j", "analytic", "mc", "se", "z"];

/// The comparison table, `alpha,i,j,analytic,mc,se,z`.
pub fn report_csv(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.alpha.to_string(),
                r.i.to_string(),
                r.j.to_string(),
                r.analytic.to_string(),
                r.mc.to_string(),
                r.se.to_string(),
                r.z.to_string(),
            ]
        })
        .collect();
    csv_bytes(&REPORT_HEADER, &body)
}

/// Plot data `n,rho_median,rho_p95`.
pub fn rho_csv(rows: &[RhoRow]) -> Result<Vec<u8>> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.n.to_string(), r.median.to_string(), r.p95.to_string()])
        .collect();
    csv_bytes(&["n", "rho_median", "rho_p95"], &body)
}

struct Setup {
    q: BirthDeathMatrix,
    ss: ScaleSpeed,
    threads: usize,
    fp_text: String,
}

impl Setup {
    fn embedding(&self) -> Result<StateEmbedding> {
        match self.ss.class {
            BoundaryClass::Regular => state_embedding(&self.ss),
            c => Err(Error::Config(format!("the matrix has a {c:?} boundary; this experiment needs Regular"))),
        }
    }
}

fn sim_config(cfg: &ExperimentConfig) -> SimConfig {
    let s = &cfg.sim;
    let mut sc = SimConfig::new(s.dt, s.horizon, cfg.seed);
    if let Some(e) = s.eps {
        sc.eps = e;
    }
    sc.estimator = match s.estimator {
        EstimatorSpec::Band => LocalTimeEstimator::Band,
        EstimatorSpec::Bridge => LocalTimeEstimator::Bridge,
    };
    sc
}

fn kernel_config(cfg: &ExperimentConfig, threads: usize) -> KernelConfig {
    let mut kc = KernelConfig::new(cfg.sim.dt, cfg.seed);
    kc.discount_cutoff = cfg.sim.discount_cutoff;
    kc.exact_depth = cfg.sim.exact_depth;
    kc.threads = threads;
    kc
}

/// Validate the config fully, then run the experiment and write its
/// artifacts into `out_dir`.
pub fn run(exp: Experiment, cfg: &ExperimentConfig, out_dir: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let q = cfg.matrix()?;
    // build every declared section before any computation
    let feller = cfg.feller.as_ref().map(|_| cfg.feller()).transpose()?;
    let chain = cfg.chain()?;
    let doob = cfg.doob()?;
    sim_config(cfg).validate()?;
    let ss = compute_scale_speed(&q);
    let setup = Setup {
        q,
        ss,
        threads: cfg.threads.unwrap_or_else(crate::rng::default_threads),
        fp_text: fingerprint(cfg),
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::Io(format!("{}: {e}", out_dir.display())))?;
    let mut w = Writer {
        dir: out_dir,
        files: Vec::new(),
    };
    let need_fp = || feller.clone().ok_or_else(|| Error::Config("missing [feller] section".into()));
    let mut out = match exp {
        Experiment::Classify => classify(&setup, &mut w)?,
        Experiment::Resolvent => resolvent(cfg, &setup, feller.as_ref(), chain, doob, &mut w)?,
        Experiment::Simulate => simulate(cfg, &setup, &need_fp()?, &mut w)?,
        Experiment::Trace => trace(cfg, &setup, &need_fp()?, &mut w)?,
        Experiment::CrossValidate => cross(cfg, &setup, &need_fp()?, &mut w)?,
        Experiment::Approx => approx(cfg, &setup, &need_fp()?, &mut w)?,
        Experiment::Recover => recover(cfg, &setup, &need_fp()?, &mut w)?,
        Experiment::DemoWrongOrder => demo(cfg, &setup, &need_fp()?, &mut w)?,
    };
    w.json("checks.json", &out.checks)?;
    out.files = w.files;
    Ok(out)
}

/// Timestamped sidecar, kept apart from the deterministic artifacts.
pub fn write_metadata(exp: Experiment, cfg: &ExperimentConfig, out_dir: &Path, threads: usize) -> Result<()> {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = serde_json::json!({
        "experiment": exp.name(),
        "fingerprint": fingerprint(cfg),
        "threads": threads,
        "unix_time": now,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let p = out_dir.join("meta.json");
    fs::write(&p, format!("{meta:#}\n")).map_err(|e| Error::Io(format!("{}: {e}", p.display())))
}

fn classify(s: &Setup, w: &mut Writer) -> Result<Outcome> {
    let ss = &s.ss;
    let class = classify_boundary(ss);
    let rows: Vec<Vec<String>> = (0..ss.mu.len())
        .map(|k| vec![k.to_string(), ss.c[k].to_string(), ss.mu[k].to_string()])
        .collect();
    w.csv("scale_speed.csv", &["k", "c", "mu"], &rows)?;
    w.json(
        "classify.json",
        &serde_json::json!({
            "fingerprint": s.fp_text,
            "class": format!("{class:?}"),
            "c_inf": ss.c_inf,
            "c_inf_bound": ss.c_inf_bound,
            "r_partial": ss.r_partial,
            "s_partial": ss.s_partial,
            "cap": ss.cap(),
        }),
    )?;
    Ok(Outcome {
        stdout: format!("{class:?}\n"),
        ..Default::default()
    })
}

#[derive(Serialize)]
struct ChainSuite {
    alpha: f64,
    u_identity: f64,
    honesty: Option<f64>,
    symmetry: Option<f64>,
    boundary: Option<f64>,
    boundary_uncertainty: Option<f64>,
}

#[derive(Serialize)]
struct BmValue {
    alpha: f64,
    x: f64,
    value: f64,
    err: f64,
}

fn resolvent(
    cfg: &ExperimentConfig,
    s: &Setup,
    feller: Option<&FellerParams>,
    chain: Option<ChainParams>,
    doob: Option<crate::bd_core::InstantLaw>,
    w: &mut Writer,
) -> Result<Outcome> {
    let rc = &cfg.resolvent;
    let mut checks = Vec::new();
    let emb = s.embedding()?;
    let image = match (chain, feller) {
        (Some(cp), _) => {
            cp.validate(&s.ss)?;
            Some(ChainImage::Chain(cp))
        }
        (None, Some(fp)) => Some(chain_from_feller(fp, &emb)?),
        (None, None) => None,
    };
    let rows = rc.rows.min(rc.n - 1);
    let mut table = Vec::new();
    let mut suite = Vec::new();
    let mut psis = Vec::new();
    if let Some(image) = &image {
        for &al in &rc.alphas {
            let mr = phi_minimal(&s.q, &s.ss, al, rc.n)?;
            let psi = psi_from_image(&mr, &s.ss, image)?;
            for i in 0..=rows {
                for j in 0..=rows {
                    table.push(vec![al.to_string(), i.to_string(), j.to_string(), psi.psi(i, j).to_string()]);
                }
            }
            let mut row = ChainSuite {
                alpha: al,
                u_identity: mr.u_identity_residual(rows + 1),
                honesty: None,
                symmetry: None,
                boundary: None,
                boundary_uncertainty: None,
            };
            if let ChainImage::Chain(cp) = image {
                if cp.gamma == 0.0 && cp.nu_kind.is_finite() {
                    let worst = (0..=rows)
                        .map(|i| (al * psi.row(i).iter().sum::<f64>() - 1.0).abs())
                        .fold(0.0, f64::max);
                    row.honesty = Some(worst);
                }
                if cp.nu_total() == 0.0 {
                    let mut worst: f64 = 0.0;
                    for i in 0..=rows {
                        for j in 0..=rows {
                            let a = s.ss.mu[i] * psi.psi(i, j);
                            let b = s.ss.mu[j] * psi.psi(j, i);
                            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-300));
                        }
                    }
                    row.symmetry = Some(worst);
                }
                let h: Vec<f64> = (0..rc.n).map(|k| if k <= rows { 1.0 } else { 0.0 }).collect();
                let bc = residual_chain_bc(&psi, &s.ss, cp, &h)?;
                row.boundary = Some(bc.residual);
                row.boundary_uncertainty = Some(bc.uncertainty);
            }
            checks.push(Check::new(
                "u_identity",
                row.u_identity < 1e-10,
                format!("alpha={al} residual={:e}", row.u_identity),
            ));
            if let Some(v) = row.honesty {
                checks.push(Check::new("honesty", v < 1e-8, format!("alpha={al} residual={v:e}")));
            }
            if let Some(v) = row.symmetry {
                checks.push(Check::new("mu_symmetry", v < 1e-8, format!("alpha={al} residual={v:e}")));
            }
            if let Some(v) = row.boundary {
                checks.push(Check::new("chain_boundary", v < 1e-4, format!("alpha={al} residual={v:e}")));
            }
            suite.push(row);
            psis.push(psi);
        }
        for k in 1..psis.len() {
            let r = resolvent_identity_residual(&psis[k - 1], &psis[k])?;
            checks.push(Check::new(
                "resolvent_equation",
                r < 1e-6,
                format!("alpha={},{} residual={r:e}", rc.alphas[k - 1], rc.alphas[k]),
            ));
        }
    }
    w.csv("resolvent.csv", &["alpha", "i", "j", "psi"], &table)?;

    let h = |x: f64| (-x).exp();
    let mut bm = Vec::new();
    let mut bm_bc = Vec::new();
    if let Some(fp) = feller {
        for &al in &rc.alphas {
            let kernel = KilledKernel::new(al);
            for &x in &rc.x {
                let v = feller_resolvent(fp, &kernel, &h, x)?;
                bm.push(BmValue {
                    alpha: al,
                    x,
                    value: v.value,
                    err: v.err,
                });
            }
            let bc = residual_feller_bc(fp, &kernel, &h)?;
            checks.push(Check::new(
                "feller_boundary",
                bc.residual_analytic < 1e-5,
                format!("alpha={al} residual={:e}", bc.residual_analytic),
            ));
            let sym = if fp.p2 > 0.0 {
                let h2 = |x: f64| (-2.0 * x).exp() * (1.0 + x);
                Some(symmetry_residual(fp, &kernel, &h, &h2)?)
            } else {
                None
            };
            bm_bc.push(serde_json::json!({
                "alpha": al,
                "boundary_residual": bc.residual,
                "boundary_residual_analytic": bc.residual_analytic,
                "symmetry_residual": sym,
            }));
        }
    }
    let mut doob_values = Vec::new();
    if let Some(law) = &doob {
        for &al in &rc.alphas {
            let kernel = KilledKernel::new(al);
            for &x in &rc.x {
                let v = doob_resolvent(law, &kernel, &h, x)?;
                doob_values.push(BmValue {
                    alpha: al,
                    x,
                    value: v.value,
                    err: v.err,
                });
            }
        }
    }
    if image.is_none() && feller.is_none() && doob.is_none() {
        return Err(Error::Config("resolvent needs a [chain], [feller] or [doob] section".into()));
    }
    w.json(
        "resolvent.json",
        &serde_json::json!({
            "fingerprint": s.fp_text,
            "n": rc.n,
            "chain": suite,
            "feller": bm,
            "feller_checks": bm_bc,
            "doob": doob_values,
        }),
    )?;
    Ok(Outcome {
        checks,
        ..Default::default()
    })
}

fn grid_levels(cfg: &ExperimentConfig, emb: &StateEmbedding) -> Vec<f64> {
    let cap = cfg.sim.level_cap.min(emb.len() - 1);
    (0..=cap).map(|n| emb.c_hat(n)).collect()
}

fn simulate(cfg: &ExperimentConfig, s: &Setup, fp: &FellerParams, w: &mut Writer) -> Result<Outcome> {
    let emb = s.embedding()?;
    let sc = sim_config(cfg);
    let levels = grid_levels(cfg, &emb);
    let n = cfg.sim.paths;
    let runs = crate::rng::par_map(n, s.threads, |p| simulate_feller_bm(fp, &sc, cfg.sim.x0, &levels, p as u64));
    let runs: Vec<_> = runs.into_iter().collect::<Result<_>>()?;
    let dump: Vec<(u64, &crate::pathsim::SamplePath)> =
        runs.iter().take(cfg.sim.dump).enumerate().map(|(p, r)| (p as u64, &r.path)).collect();
    let mut buf = Vec::new();
    write_path_csv(&mut buf, &dump)?;
    w.put("paths.csv", &buf)?;
    let killed: Vec<f64> = runs.iter().map(|r| r.path.killed as u8 as f64).collect();
    let last: Vec<f64> = runs
        .iter()
        .map(|r| if r.path.killed { 0.0 } else { *r.path.values.last().unwrap_or(&0.0) })
        .collect();
    let ell: Vec<f64> = runs.iter().map(|r| r.ledger.ell_y.last().copied().unwrap_or(0.0)).collect();
    w.json(
        "simulate.json",
        &serde_json::json!({
            "fingerprint": s.fp_text,
            "n_paths": n,
            "killed_fraction": mc_stats(&killed)?,
            "value_at_horizon": mc_stats(&last)?,
            "boundary_local_time": mc_stats(&ell)?,
            "cemetery": CEMETERY,
        }),
    )?;
    Ok(Outcome::default())
}

fn trace(cfg: &ExperimentConfig, s: &Setup, fp: &FellerParams, w: &mut Writer) -> Result<Outcome> {
    let emb = s.embedding()?;
    let sc = sim_config(cfg);
    let levels = grid_levels(cfg, &emb);
    let cap = levels.len() - 1;
    let snap = 8.0 * cfg.sim.dt.sqrt();
    let runs = crate::rng::par_map(cfg.sim.paths, s.threads, |p| {
        let fpath = simulate_feller_bm(fp, &sc, cfg.sim.x0, &levels, p as u64)?;
        let clock = accumulate_pcaf(&fpath, &s.ss, &emb, cap)?;
        trace_path(&fpath, &clock, &emb, snap)
    });
    let traces: Vec<_> = runs.into_iter().collect::<Result<_>>()?;
    let dump: Vec<(u64, &crate::timechange::TraceChainPath)> =
        traces.iter().take(cfg.sim.dump).enumerate().map(|(p, t)| (p as u64, t)).collect();
    let mut buf = Vec::new();
    write_trace_csv(&mut buf, &dump)?;
    w.put("trace.csv", &buf)?;
    let skips: usize = traces.iter().map(|t| t.skip_violations()).sum();
    let ends: Vec<f64> = traces.iter().map(|t| t.end).collect();
    w.json(
        "trace.json",
        &serde_json::json!({
            "fingerprint": s.fp_text,
            "n_paths": traces.len(),
            "level_cap": cap,
            "chain_time": mc_stats(&ends)?,
            // levels closer than the grid step can be crossed within one step
            "skip_violations": skips,
        }),
    )?;
    Ok(Outcome::default())
}

fn cross(cfg: &ExperimentConfig, s: &Setup, fp: &FellerParams, w: &mut Writer) -> Result<Outcome> {
    let emb = s.embedding()?;
    let cv_cfg = &cfg.cross_validate;
    let kc = kernel_config(cfg, s.threads);
    let cv = cross_validate(
        &cv_cfg.case,
        &s.q,
        &s.ss,
        &emb,
        fp,
        &cv_cfg.alphas,
        &cv_cfg.starts,
        cv_cfg.jmax,
        cfg.sim.paths,
        &kc,
        cv_cfg.n_levels,
    )?;
    w.put("report.csv", &report_csv(&cv.rows)?)?;
    w.json("report.json", &cv.rows)?;
    let mut checks = vec![Check::new(
        "trace_resolvent",
        cv.all_pass(),
        format!("max |z| = {:.3} over {} cells", cv.max_abs_z(), cv.rows.len()),
    )];
    let mut summary = serde_json::json!({
        "fingerprint": s.fp_text,
        "case": cv_cfg.case,
        "n_paths": cfg.sim.paths,
        "max_abs_z": cv.max_abs_z(),
        "advisory_ok": cv.rows.iter().all(|r| r.advisory_ok()),
        "truncated_paths": cv.estimates.iter().map(|e| e.truncated).max().unwrap_or(0),
        "estimator": cv.estimates.first().map(|e| e.fingerprint.clone()),
    });
    if cv_cfg.negative_control {
        let neg = negative_control(s, &emb, fp, &cv)?;
        let worst = neg.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
        checks.push(Check::new(
            "negative_control",
            worst > 5.0,
            format!("beta = p2 gives max |z| = {worst:.2}"),
        ));
        w.put("negative_control.csv", &report_csv(&neg)?)?;
        summary["negative_control_max_abs_z"] = serde_json::json!(worst);
    }
    w.json("summary.json", &summary)?;
    Ok(Outcome {
        checks,
        ..Default::default()
    })
}

/// The same estimates against `Psi` of the mapping with `beta = p2`.
fn negative_control(
    s: &Setup,
    emb: &StateEmbedding,
    fp: &FellerParams,
    cv: &crate::verify::CrossValidation,
) -> Result<Vec<ReportRow>> {
    let ChainImage::Chain(mut cp) = chain_from_feller(fp, emb)? else {
        return Err(Error::RegimeMismatch("no chain image to perturb".into()));
    };
    cp.beta = fp.p2;
    let mut alphas: Vec<f64> = cv.estimates.iter().map(|e| e.alpha).collect();
    alphas.dedup();
    alphas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    alphas.dedup();
    let n = s.ss.cap().min(200);
    let psi = analytic_psi(&s.q, &s.ss, &ChainImage::Chain(cp), &alphas, n)?;
    let case = format!("{}_beta_p2", cv.rows.first().map_or("", |r| r.case.as_str()));
    Ok(compare(&case, &cv.estimates, |al, i, j| {
        let k = alphas.iter().position(|&a| a == al).unwrap();
        psi[k].psi(i, j)
    }))
}

#[derive(Serialize)]
struct InstantRow {
    n: usize,
    location: f64,
    mc: f64,
    se: f64,
    exact: f64,
    z: f64,
}

#[derive(Serialize)]
struct ChainRow {
    n: usize,
    k: i64,
    mc: f64,
    se: f64,
    exact: f64,
    z: f64,
}

/// `z` against a known probability, with the binomial SE of the null as a
/// floor so that empty cells are not infinitely significant.
fn cell_z(mc: f64, se: f64, p: f64, n: usize) -> (f64, f64) {
    let se = se.max((p * (1.0 - p) / n as f64).sqrt());
    (se, z_score(mc, p, se))
}

fn instant_rows(est: &InstantDistEstimate, lam: &LambdaMeasure, emb: &StateEmbedding) -> Vec<InstantRow> {
    let n = est.level;
    let (atoms, dead) = lam.instant_dist(emb, n);
    let mut locs: Vec<f64> = atoms.iter().map(|a| a.0).chain(est.cells.iter().map(|c| c.location)).collect();
    locs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    locs.dedup();
    let mut rows: Vec<InstantRow> = locs
        .into_iter()
        .map(|x| {
            let exact = atoms.iter().find(|a| a.0 == x).map_or(0.0, |a| a.1);
            let cell = est.cells.iter().find(|c| c.location == x);
            let (mc, se) = cell.map_or((0.0, 0.0), |c| (c.freq, c.se));
            let (se, z) = cell_z(mc, se, exact, est.n_paths);
            InstantRow {
                n,
                location: x,
                mc,
                se,
                exact,
                z,
            }
        })
        .collect();
    let (se, z) = cell_z(est.cemetery.freq, est.cemetery.se, dead, est.n_paths);
    rows.push(InstantRow {
        n,
        location: CEMETERY,
        mc: est.cemetery.freq,
        se,
        exact: dead,
        z,
    });
    rows
}

fn max_abs(zs: impl Iterator<Item = f64>) -> f64 {
    zs.map(f64::abs).fold(0.0, f64::max)
}

fn approx(cfg: &ExperimentConfig, s: &Setup, fp: &FellerParams, w: &mut Writer) -> Result<Outcome> {
    let emb = s.embedding()?;
    let a = &cfg.approx;
    let kc = kernel_config(cfg, s.threads);
    let n_paths = cfg.sim.paths;
    let first = simulate_approaches(fp, &s.ss, &emb, a.levels, n_paths, &kc, 1)?;
    let second = simulate_approaches(fp, &s.ss, &emb, a.levels, n_paths, &kc, 2)?;
    let est1: Vec<_> = (0..=a.levels).map(|n| estimate_instant_dist(&first, n)).collect::<Result<_>>()?;
    let est2: Vec<_> = (0..=a.levels).map(|n| estimate_instant_dist(&second, n)).collect::<Result<_>>()?;
    let mut checks = Vec::new();
    let mut notes = Vec::new();

    // independent batches for the two sides of each pair
    let recursion: Vec<_> = a
        .pairs
        .iter()
        .map(|&(n, m)| recursion_check(&est1[n], &est2[m], &emb))
        .collect::<Result<_>>()?;
    let rec_z = max_abs(recursion.iter().map(|r| r.max_z));
    checks.push(Check::new("recursion", rec_z < 3.0, format!("max |z| = {rec_z:.3}")));

    let exact_ok = fp.p3 == 0.0;
    let mut instant = Vec::new();
    let mut chain = Vec::new();
    if exact_ok {
        let lam = LambdaMeasure::from_params(fp, &emb);
        for e in &est1 {
            instant.extend(instant_rows(e, &lam, &emb));
        }
        let iz = max_abs(instant.iter().map(|r| r.z));
        checks.push(Check::new("instant_distribution", iz < 3.0, format!("max |z| = {iz:.3}")));
        let traces: Vec<_> = first.iter().map(|ap| ap.trace.clone()).collect();
        for n in 0..=a.levels {
            let c = chain_approximant(&traces, n)?;
            let (hat, dead) = lam.hat_lambda(&emb, n);
            for k in 0..=n {
                let (se, z) = cell_z(c.freq[k], c.se[k], hat[k], c.n_paths);
                chain.push(ChainRow {
                    n,
                    k: k as i64,
                    mc: c.freq[k],
                    se,
                    exact: hat[k],
                    z,
                });
            }
            let (se, z) = cell_z(c.cemetery, c.cemetery_se, dead, c.n_paths);
            chain.push(ChainRow {
                n,
                k: -1,
                mc: c.cemetery,
                se,
                exact: dead,
                z,
            });
        }
        let cz = max_abs(chain.iter().map(|r| r.z));
        checks.push(Check::new("chain_approximant", cz < 3.0, format!("max |z| = {cz:.3}")));
    } else {
        notes.push("p3 > 0: closed forms for the instantaneous laws are not available; only the recursion is checked");
    }

    let rho = convergence_diagnostic(&emb, a.rho_t, &a.rho_levels, a.rho_paths, cfg.sim.dt, cfg.seed, s.threads)?;
    let decreasing = rho.windows(2).all(|p| p[1].median < p[0].median);
    checks.push(Check::new(
        "rho_medians_decreasing",
        decreasing,
        format!("medians {:?}", rho.iter().map(|r| r.median).collect::<Vec<_>>()),
    ));
    w.put("rho.csv", &rho_csv(&rho)?)?;
    w.json(
        "approx.json",
        &serde_json::json!({
            "fingerprint": s.fp_text,
            "n_paths": n_paths,
            "estimates": est1,
            "instant": instant,
            "recursion": recursion,
            "chain": chain,
            "rho": rho,
            "notes": notes,
        }),
    )?;
    Ok(Outcome {
        checks,
        ..Default::default()
    })
}

#[derive(Serialize)]
struct RelErr {
    name: String,
    truth: f64,
    recovered: f64,
    se: f64,
    rel: f64,
}

fn recover(cfg: &ExperimentConfig, s: &Setup, fp: &FellerParams, w: &mut Writer) -> Result<Outcome> {
    let emb = s.embedding()?;
    let a = &cfg.approx;
    let kc = kernel_config(cfg, s.threads);
    let ap = simulate_approaches(fp, &s.ss, &emb, a.levels, cfg.sim.paths, &kc, 1)?;
    let est: Vec<_> = (0..=a.levels).map(|n| estimate_instant_dist(&ap, n)).collect::<Result<_>>()?;
    let lambda = reconstruct_lambda(&est, &emb)?;
    let rec = recover_params(&lambda)?;
    let truth = fp.normalized();
    let mut errs = vec![
        RelErr {
            name: "p1".into(),
            truth: truth.p1,
            recovered: rec.params.p1,
            se: rec.p1_se,
            rel: 0.0,
        },
        RelErr {
            name: "p2".into(),
            truth: truth.p2,
            recovered: rec.params.p2,
            se: rec.p2_se,
            rel: 0.0,
        },
    ];
    let mut locs: Vec<f64> = truth.p4.atoms().iter().map(|a| a.0).collect();
    locs.extend(rec.p4_se.iter().map(|a| a.0));
    locs.sort_by(|x, y| y.partial_cmp(x).unwrap());
    locs.dedup();
    for x in locs {
        let t = truth.p4.atoms().iter().find(|a| a.0 == x).map_or(0.0, |a| a.1);
        let (r, se) = rec.p4_se.iter().find(|a| a.0 == x).map_or((0.0, 0.0), |a| (a.1, a.2));
        errs.push(RelErr {
            name: format!("p4@{x}"),
            truth: t,
            recovered: r,
            se,
            rel: 0.0,
        });
    }
    // relative error against the truth, or against the total mass 1 for
    // components that vanish
    for e in &mut errs {
        e.rel = (e.recovered - e.truth).abs() / if e.truth > 0.0 { e.truth } else { 1.0 };
    }
    let worst = errs.iter().map(|e| e.rel).fold(0.0, f64::max);
    let mut notes = Vec::new();
    if fp.p3 > 0.0 {
        notes.push("p3 > 0 cannot be recovered from the instantaneous laws; the truth is compared with p3 dropped");
    }
    w.json(
        "recovery.json",
        &serde_json::json!({
            "fingerprint": s.fp_text,
            "n_paths": cfg.sim.paths,
            "truth": truth,
            "recovered": rec,
            "lambda": lambda,
            "errors": errs,
            "notes": notes,
        }),
    )?;
    Ok(Outcome {
        checks: vec![Check::new(
            "recovery",
            worst <= a.recovery_tol,
            format!("max relative error {worst:.4}"),
        )],
        ..Default::default()
    })
}

fn demo(cfg: &ExperimentConfig, s: &Setup, fp: &FellerParams, w: &mut Writer) -> Result<Outcome> {
    let emb = s.embedding()?;
    let sc = sim_config(cfg);
    let cap = cfg.sim.level_cap.min(emb.len() - 1);
    let r = wrong_order_demo(&s.ss, &emb, fp, &sc, cap, cfg.sim.paths, cfg.sim.chain_dt, s.threads)?;
    w.json(
        "wrong_order.json",
        &serde_json::json!({ "fingerprint": s.fp_text, "report": r }),
    )?;
    Ok(Outcome {
        checks: vec![
            Check::new(
                "wrong_order_off_levels",
                r.z > 5.0,
                format!("off fraction {:.4} (z = {:.2})", r.wrong_fraction.mean, r.z),
            ),
            Check::new(
                "correct_order_on_levels",
                r.correct_fraction == 0.0,
                format!("off fraction {}", r.correct_fraction),
            ),
        ],
        ..Default::default()
    })
}
