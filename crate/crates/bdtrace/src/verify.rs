//! Monte Carlo statistics, hitting distributions and the end-to-end
//! comparison of simulated trace resolvents with the chain resolvent.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bd_core::{
    chain_from_feller, BirthDeathMatrix, Bracket, ChainImage, FellerParams, ScaleSpeed, StateEmbedding,
};
use crate::error::{Error, Result};
use crate::resolvent::{phi_minimal, psi_from_image, ChainResolvent};
use crate::rng::{par_map, stream, tag};
use crate::timechange::{mc_trace_resolvent, KernelConfig};

/// Compensated (Neumaier) sum in slice order.
pub fn neumaier_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McStats {
    pub mean: f64,
    pub se: f64,
    pub ci95: (f64, f64),
    pub n: usize,
}

pub fn mc_stats(samples: &[f64]) -> Result<McStats> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let mean = neumaier_sum(samples) / n as f64;
    let sq: Vec<f64> = samples.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = neumaier_sum(&sq) / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    Ok(McStats {
        mean,
        se,
        ci95: (mean - 1.96 * se, mean + 1.96 * se),
        n,
    })
}

/// Simulated row `i` of the resolvent at one `alpha`, columns `0..=jmax`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolventEstimate {
    pub alpha: f64,
    pub i: usize,
    /// Clock-integral estimator.
    pub values: Vec<f64>,
    pub se: Vec<f64>,
    /// Trace-occupation estimator.
    pub secondary: Vec<f64>,
    pub secondary_se: Vec<f64>,
    pub n_paths: usize,
    /// Paths stopped by the move budget rather than the discount cutoff.
    pub truncated: usize,
    pub fingerprint: String,
}

/// One line of the comparison report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub case: String,
    pub alpha: f64,
    pub i: usize,
    pub j: usize,
    pub analytic: f64,
    pub mc: f64,
    pub se: f64,
    pub z: f64,
    pub pass: bool,
}

impl ReportRow {
    /// Relative deviation inside the 5% advisory band.
    pub fn advisory_ok(&self) -> bool {
        (self.mc - self.analytic).abs() <= 0.05 * self.analytic.abs()
    }
}

pub fn z_score(mc: f64, analytic: f64, se: f64) -> f64 {
    let d = mc - analytic;
    if se > 0.0 {
        d / se
    } else if d == 0.0 {
        0.0
    } else {
        d.signum() * f64::INFINITY
    }
}

/// Compare estimates with `analytic(alpha, i, j)` at 3 SE.
pub fn compare(case: &str, estimates: &[ResolventEstimate], analytic: impl Fn(f64, usize, usize) -> f64) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for e in estimates {
        for j in 0..e.values.len() {
            let a = analytic(e.alpha, e.i, j);
            let z = z_score(e.values[j], a, e.se[j]);
            rows.push(ReportRow {
                case: case.to_string(),
                alpha: e.alpha,
                i: e.i,
                j,
                analytic: a,
                mc: e.values[j],
                se: e.se[j],
                z,
                pass: z.abs() < 3.0,
            });
        }
    }
    rows
}

/// Chain resolvents of `image` on `n` levels, one per `alpha`.
pub fn analytic_psi(
    q: &BirthDeathMatrix,
    ss: &ScaleSpeed,
    image: &ChainImage,
    alphas: &[f64],
    n: usize,
) -> Result<Vec<ChainResolvent>> {
    alphas
        .iter()
        .map(|&al| psi_from_image(&phi_minimal(q, ss, al, n)?, ss, image))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub rows: Vec<ReportRow>,
    pub estimates: Vec<ResolventEstimate>,
}

impl CrossValidation {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn max_abs_z(&self) -> f64 {
        self.rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max)
    }
}

/// Simulate the trace resolvent of `fp` from each start in `starts` and
/// compare it with `Psi` of the chain image `gamma = p1`, `beta = 2 p2`,
/// `nu = allocated p4`.
#[allow(clippy::too_many_arguments)]
pub fn cross_validate(
    case: &str,
    q: &BirthDeathMatrix,
    ss: &ScaleSpeed,
    emb: &StateEmbedding,
    fp: &FellerParams,
    alphas: &[f64],
    starts: &[usize],
    jmax: usize,
    n_paths: usize,
    kc: &KernelConfig,
    n_levels: usize,
) -> Result<CrossValidation> {
    let image = chain_from_feller(fp, emb)?;
    let psi = analytic_psi(q, ss, &image, alphas, n_levels)?;
    let mut estimates = Vec::new();
    for &i in starts {
        estimates.extend(mc_trace_resolvent(fp, ss, emb, alphas, i, jmax, n_paths, kc)?);
    }
    let rows = compare(case, &estimates, |al, i, j| {
        let k = alphas.iter().position(|&a| a == al).unwrap();
        psi[k].psi(i, j)
    });
    Ok(CrossValidation { rows, estimates })
}

/// First-entry frequencies of one level from a start point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HittingRow {
    pub level: usize,
    pub freq: f64,
    pub se: f64,
    /// Linear interpolation in scale.
    pub formula: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HittingReport {
    pub start: f64,
    pub rows: Vec<HittingRow>,
    /// Paths that neither hit a level nor 0 within the step budget.
    pub unresolved: f64,
    pub n_paths: usize,
}

/// Outcome of one Brownian path from `x` run until it touches a level or 0.
fn first_entry<R: Rng + ?Sized>(emb: &StateEmbedding, x: f64, dt: f64, max_steps: usize, rng: &mut R) -> Option<usize> {
    if let Some(n) = emb.xi(x) {
        return Some(n);
    }
    let (lower, upper) = match emb.bracket(x) {
        Bracket::Above => (Some(0), None),
        Bracket::Between(n) => (Some(n + 1).filter(|&m| m < emb.len()), Some(n)),
        Bracket::Below => (None, Some(emb.len() - 1)),
    };
    let lo = lower.map_or(0.0, |n| emb.c_hat(n));
    let hi = upper.map(|n| emb.c_hat(n));
    let sd = dt.sqrt();
    let mut y = x;
    for _ in 0..max_steps {
        let y1 = y + sd * rng.sample::<f64, _>(StandardNormal);
        if let Some(h) = hi {
            if y1 >= h || rng.random::<f64>() < (-2.0 * (h - y) * (h - y1) / dt).exp() {
                return upper;
            }
        }
        if y1 <= lo || rng.random::<f64>() < (-2.0 * (y - lo) * (y1 - lo) / dt).exp() {
            // lower == None means the path reached 0 first; report it as
            // the level past the end
            return Some(lower.unwrap_or(emb.len()));
        }
        y = y1;
    }
    None
}

/// Interpolation weights of the first level hit from `x`, with
/// `inf/inf := 1` above the top level.
pub fn hitting_formula(emb: &StateEmbedding, x: f64) -> Vec<(usize, f64)> {
    if let Some(n) = emb.xi(x) {
        return vec![(n, 1.0)];
    }
    match emb.bracket(x) {
        Bracket::Above => vec![(0, 1.0)],
        Bracket::Between(n) => {
            let (hi, lo) = (emb.c_hat(n), emb.c_hat(n + 1));
            let up = (x - lo) / (hi - lo);
            vec![(n, up), (n + 1, 1.0 - up)]
        }
        Bracket::Below => {
            let c = emb.c_hat(emb.len() - 1);
            vec![(emb.len() - 1, x / c)]
        }
    }
}

/// Simulated first `E`-entry level from `x` against the interpolation formula.
pub fn hitting_distribution_mc(
    emb: &StateEmbedding,
    x: f64,
    n_paths: usize,
    dt: f64,
    max_steps: usize,
    seed: u64,
    threads: usize,
) -> Result<HittingReport> {
    if !(x > 0.0) {
        return Err(Error::InvalidSimConfig("start must be positive".into()));
    }
    let hits = par_map(n_paths, threads, |p| {
        let mut rng = stream(seed, tag::HITTING, p as u64);
        first_entry(emb, x, dt, max_steps, &mut rng)
    });
    let formula = hitting_formula(emb, x);
    let mut rows = Vec::new();
    for &(n, f) in &formula {
        let ind: Vec<f64> = hits.iter().map(|h| if *h == Some(n) { 1.0 } else { 0.0 }).collect();
        let s = mc_stats(&ind)?;
        rows.push(HittingRow {
            level: n,
            freq: s.mean,
            se: s.se,
            formula: f,
            z: z_score(s.mean, f, s.se),
        });
    }
    let unresolved = hits.iter().filter(|h| h.is_none()).count() as f64 / n_paths as f64;
    Ok(HittingReport {
        start: x,
        rows,
        unresolved,
        n_paths,
    })
}

/// One Monte Carlo estimate against its target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawCheck {
    pub name: String,
    pub target: f64,
    pub stats: McStats,
    pub z: f64,
}

impl LawCheck {
    fn new(name: impl Into<String>, target: f64, samples: &[f64]) -> Result<Self> {
        let stats = mc_stats(samples)?;
        Ok(Self {
            name: name.into(),
            target,
            z: z_score(stats.mean, target, stats.se),
            stats,
        })
    }

    pub fn pass(&self) -> bool {
        self.z.abs() < 3.0
    }
}

/// `E_x exp(-alpha tau_0)` for Brownian motion killed at 0, on a `dt` grid
/// with bridge-corrected crossing. A crossing inside a step is dated at its
/// midpoint; paths alive at `horizon` contribute 0.
#[allow(clippy::too_many_arguments)]
pub fn killed_laplace_mc(
    x: f64,
    alpha: f64,
    n_paths: usize,
    dt: f64,
    horizon: f64,
    seed: u64,
    threads: usize,
) -> Result<LawCheck> {
    if !(x > 0.0 && alpha > 0.0 && dt > 0.0) {
        return Err(Error::InvalidSimConfig("need x, alpha, dt > 0".into()));
    }
    let sd = dt.sqrt();
    let steps = (horizon / dt).ceil() as usize;
    let samples = par_map(n_paths, threads, |p| {
        let mut rng = stream(seed, tag::PATH, p as u64);
        let mut y = x;
        for k in 1..=steps {
            let y1 = y + sd * rng.sample::<f64, _>(StandardNormal);
            if y1 <= 0.0 || rng.random::<f64>() < (-2.0 * y * y1 / dt).exp() {
                return (-alpha * (k as f64 - 0.5) * dt).exp();
            }
            y = y1;
        }
        0.0
    });
    LawCheck::new(format!("E_{x} exp(-{alpha} tau_0)"), (-(2.0 * alpha).sqrt() * x).exp(), &samples)
}

/// `E exp(-x Z_1)` against `exp(-(p2 x + sum w (1 - e^{-x s})))`.
pub fn subordinator_laplace_mc(
    p2: f64,
    p4: &crate::bd_core::AtomicMeasure,
    xs: &[f64],
    n_paths: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<LawCheck>> {
    let cfg = crate::pathsim::SimConfig::new(1e-3, 1.0, seed);
    let z1 = par_map(n_paths, threads, |p| {
        let mut rng = stream(seed, tag::SUBORDINATOR, p as u64);
        crate::pathsim::simulate_subordinator(p2, p4, &cfg, 1.0, &mut rng).value(1.0)
    });
    xs.iter()
        .map(|&x| {
            let target = (-(p2 * x + p4.integrate(|s| 1.0 - (-x * s).exp()))).exp();
            let v: Vec<f64> = z1.iter().map(|z| (-x * z).exp()).collect();
            LawCheck::new(format!("E exp(-{x} Z_1)"), target, &v)
        })
        .collect()
}

/// First holding time at 0 of Doob's BM started at 0.
pub fn doob_hold_mc(fp: &FellerParams, n_paths: usize, seed: u64, threads: usize) -> Result<LawCheck> {
    let mut cfg = crate::pathsim::SimConfig::new(1e-4, 1e-9, seed);
    cfg.path_storage = crate::pathsim::PathStorage::Events;
    let holds = par_map(n_paths, threads, |p| {
        let mut rng = stream(seed, tag::DOOB, p as u64);
        crate::pathsim::simulate_doob_bm(fp, &cfg, 0.0, &mut rng).map(|(_, h)| h[0])
    });
    let holds = holds.into_iter().collect::<Result<Vec<_>>>()?;
    LawCheck::new("mean hold at 0", fp.p3 / (fp.p1 + fp.p4.total_mass()), &holds)
}
