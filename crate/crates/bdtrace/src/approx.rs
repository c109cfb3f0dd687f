//! Approximation by Doob processes: excursion surgery on paths, the
//! instantaneous distributions `lambda^(n)` and their chain analogues,
//! reconstruction of `lambda` and recovery of `(p1, p2, p4)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bd_core::{AtomicMeasure, FellerParams, MassKind, ScaleSpeed, StateEmbedding};
use crate::error::{Error, Result};
use crate::pathsim::{flag, SamplePath, CEMETERY};
use crate::rng::{par_map, stream, tag};
use crate::timechange::{kernel_cap, KernelConfig, Move, Pos, TraceChainPath, Walker};
use crate::verify::{mc_stats, neumaier_sum, z_score};

/// Discarded intervals `[starts[m], ends[m])` for one level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SurgerySchedule {
    pub level: usize,
    pub starts: Vec<f64>,
    pub ends: Vec<f64>,
}

impl SurgerySchedule {
    pub fn validate(&self) -> Result<()> {
        if self.starts.len() != self.ends.len() {
            return Err(Error::DimensionMismatch(self.starts.len(), self.ends.len()));
        }
        for m in 0..self.starts.len() {
            if !(self.starts[m] <= self.ends[m]) {
                return Err(Error::ScheduleOrderViolation(m));
            }
            if m + 1 < self.starts.len() && !(self.ends[m] < self.starts[m + 1]) {
                return Err(Error::ScheduleOrderViolation(m + 1));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn discarded(&self) -> f64 {
        let d: Vec<f64> = self.starts.iter().zip(&self.ends).map(|(a, b)| b - a).collect();
        neumaier_sum(&d)
    }
}

fn touches_zero(path: &SamplePath, k: usize) -> bool {
    path.values[k] == 0.0 || path.flags[k] & (flag::BOUNDARY | flag::JUMP) != 0
}

/// Alternating boundary touches and first passages above `c_hat[n]`.
/// A boundary touch is a knot at 0 or a step during which the boundary
/// local time grew (a jump from 0 always follows one). An interval still
/// open at death or at the end of the path is closed there.
pub fn excursion_times(path: &SamplePath, emb: &StateEmbedding, n: usize) -> SurgerySchedule {
    let c = emb.c_hat(n);
    let mut s = SurgerySchedule {
        level: n,
        ..Default::default()
    };
    let mut open: Option<f64> = None;
    for k in 0..path.len() {
        let y = path.values[k];
        let t = path.times[k];
        if y < 0.0 {
            if let Some(a) = open.take() {
                s.starts.push(a);
                s.ends.push(t);
            }
            break;
        }
        if open.is_none() && touches_zero(path, k) && s.ends.last().is_none_or(|&e| t > e) {
            open = Some(t);
        }
        if let Some(a) = open {
            if y >= c {
                s.starts.push(a);
                s.ends.push(t);
                open = None;
            }
        }
    }
    if let Some(a) = open {
        s.starts.push(a);
        s.ends.push(*path.times.last().unwrap());
    }
    s
}

/// Drop the knots inside the scheduled intervals and shift the rest left.
/// Returns the new path and the discarded duration.
pub fn c_transform(path: &SamplePath, schedule: &SurgerySchedule) -> Result<(SamplePath, f64)> {
    schedule.validate()?;
    let mut out = SamplePath {
        times: Vec::with_capacity(path.len()),
        values: Vec::with_capacity(path.len()),
        flags: Vec::with_capacity(path.len()),
        lifetime: path.lifetime,
        killed: path.killed,
    };
    let mut m = 0;
    let mut shift = 0.0;
    for k in 0..path.len() {
        let t = path.times[k];
        while m < schedule.starts.len() && t >= schedule.ends[m] && schedule.starts[m] <= t {
            shift += schedule.ends[m] - schedule.starts[m];
            m += 1;
        }
        if m < schedule.starts.len() && t >= schedule.starts[m] && t < schedule.ends[m] {
            continue;
        }
        out.times.push(t - shift);
        out.values.push(path.values[k]);
        out.flags.push(path.flags[k]);
    }
    let discarded = schedule.discarded();
    if out.lifetime.is_finite() {
        out.lifetime -= discarded;
    }
    Ok((out, discarded))
}

/// Discarded duration needed to produce `t` units of output.
pub fn rho(schedule: &SurgerySchedule, t: f64) -> f64 {
    let mut kept = 0.0;
    let mut prev = 0.0;
    let mut gone = 0.0;
    for (&a, &b) in schedule.starts.iter().zip(&schedule.ends) {
        if kept + (a - prev) >= t {
            return gone;
        }
        kept += a - prev;
        gone += b - a;
        prev = b;
    }
    gone
}

/// One frequency with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// Location; `-1` is the cemetery.
    pub location: f64,
    pub freq: f64,
    pub se: f64,
}

/// Empirical law of the first position at or above `c_hat[level]` after a
/// boundary visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstantDistEstimate {
    pub level: usize,
    /// Decreasing locations; the cemetery is kept apart.
    pub cells: Vec<Cell>,
    pub cemetery: Cell,
    pub n_paths: usize,
    /// Paths that ran out of moves before resolving.
    pub unresolved: usize,
    #[serde(skip)]
    pub samples: Vec<f64>,
}

impl InstantDistEstimate {
    pub fn freq_at(&self, x: f64) -> f64 {
        self.cells.iter().find(|c| c.location == x).map_or(0.0, |c| c.freq)
    }

    pub fn below(&self, x: f64) -> f64 {
        self.cells.iter().filter(|c| c.location < x).map(|c| c.freq).sum()
    }
}

/// Empirical law of the chain's first entry into `{0, ..., level}` after a
/// boundary visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDistEstimate {
    pub level: usize,
    /// `freq[k]` for `k = 0..=level`.
    pub freq: Vec<f64>,
    pub se: Vec<f64>,
    pub cemetery: f64,
    pub cemetery_se: f64,
    pub n_paths: usize,
}

/// Outcome of one path started at 0 and run until it first reaches
/// `c_hat[0]` (or dies).
#[derive(Debug, Clone, PartialEq)]
pub struct Approach {
    /// Position at the first passage above `c_hat[n]`, `n = 0..=levels`;
    /// `-1` for death, NaN if unresolved.
    pub landing: Vec<f64>,
    pub trace: TraceChainPath,
}

fn stats_of(ind: &[f64]) -> Result<(f64, f64)> {
    let s = mc_stats(ind)?;
    Ok((s.mean, s.se))
}

/// Run `n_paths` walkers from 0 and record first passages for levels
/// `0..=top`. `salt` selects an independent batch.
pub fn simulate_approaches(
    fp: &FellerParams,
    ss: &ScaleSpeed,
    emb: &StateEmbedding,
    top: usize,
    n_paths: usize,
    kc: &KernelConfig,
    salt: u64,
) -> Result<Vec<Approach>> {
    if fp.is_killed_bm() {
        return Err(Error::RegimeMismatch("killed BM never leaves 0".into()));
    }
    let cap = kernel_cap(ss, emb, kc).max(top).min(emb.len() - 1);
    if top > cap {
        return Err(Error::LevelMismatch(format!("level {top} beyond {} stored levels", emb.len())));
    }
    let proto = Walker::new(fp, emb, cap, kc.dt)?;
    let levels: Vec<f64> = (0..=top).map(|n| emb.c_hat(n)).collect();
    Ok(par_map(n_paths, kc.threads, |p| {
        let mut rng = stream(kc.seed, tag::APPROX, (salt << 40) | p as u64);
        let mut w = proto.clone();
        approach(&mut w, &levels, kc.max_moves, &mut rng)
    }))
}

fn approach<R: Rng + ?Sized>(w: &mut Walker, levels: &[f64], max_moves: u64, rng: &mut R) -> Approach {
    w.reset(0.0, rng);
    let top = levels.len() - 1;
    let mut landing = vec![f64::NAN; top + 1];
    // levels above `pending` are still unresolved
    let mut pending = top as isize;
    let mut trace = TraceChainPath::default();
    let mut a = 0.0;
    let mut via = true;
    let mut entered = false;
    let mut moves = 0u64;
    let fill = |landing: &mut Vec<f64>, pending: &mut isize, x: f64| {
        while *pending >= 0 && (x < 0.0 || x >= levels[*pending as usize]) {
            landing[*pending as usize] = x;
            *pending -= 1;
        }
    };
    loop {
        let mv = w.advance(rng);
        moves += 1;
        for &(n, dl) in w.accrued() {
            if dl > 0.0 {
                trace.record(a, n, via);
                via = false;
                // chain time is not needed here, only the order of visits
                a += dl;
                if n == 0 {
                    entered = true;
                }
            }
        }
        match mv {
            Move::Killed | Move::Stuck => {
                fill(&mut landing, &mut pending, CEMETERY);
                trace.lifetime = Some(a);
                break;
            }
            Move::Jumped(x) => {
                via = true;
                fill(&mut landing, &mut pending, x);
            }
            Move::Reflected => via = true,
            Move::Diffused => {}
        }
        match w.pos {
            Pos::Level(k) if k <= top => fill(&mut landing, &mut pending, levels[k]),
            Pos::Zero => via = true,
            _ => {}
        }
        if w.pos == Pos::Level(0) {
            // the trace enters level 0 at once
            trace.record(a, 0, via);
            entered = true;
        }
        if (pending < 0 && entered) || moves >= max_moves {
            break;
        }
    }
    trace.end = a;
    Approach { landing, trace }
}

/// Frequencies of `landing[n]` over the batch.
pub fn estimate_instant_dist(approaches: &[Approach], n: usize) -> Result<InstantDistEstimate> {
    let samples: Vec<f64> = approaches.iter().map(|a| a.landing[n]).collect();
    let unresolved = samples.iter().filter(|x| x.is_nan()).count();
    let mut locs: Vec<f64> = samples.iter().copied().filter(|&x| x > 0.0).collect();
    locs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    locs.dedup();
    let cells = locs
        .iter()
        .map(|&x| {
            let ind: Vec<f64> = samples.iter().map(|&s| f64::from(u8::from(s == x))).collect();
            let (freq, se) = stats_of(&ind)?;
            Ok(Cell { location: x, freq, se })
        })
        .collect::<Result<Vec<_>>>()?;
    let ind: Vec<f64> = samples.iter().map(|&s| f64::from(u8::from(s == CEMETERY))).collect();
    let (freq, se) = stats_of(&ind)?;
    Ok(InstantDistEstimate {
        level: n,
        cells,
        cemetery: Cell {
            location: CEMETERY,
            freq,
            se,
        },
        n_paths: samples.len(),
        unresolved,
        samples,
    })
}

/// First entry of each trace into `{0, ..., n}`; traces that die first
/// count for the cemetery.
pub fn chain_approximant(traces: &[TraceChainPath], n: usize) -> Result<ChainDistEstimate> {
    let firsts: Vec<Option<usize>> = traces
        .iter()
        .map(|tr| tr.events.iter().find(|e| e.level <= n).map(|e| e.level))
        .collect();
    let mut freq = Vec::with_capacity(n + 1);
    let mut se = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let ind: Vec<f64> = firsts.iter().map(|f| f64::from(u8::from(*f == Some(k)))).collect();
        let (m, s) = stats_of(&ind)?;
        freq.push(m);
        se.push(s);
    }
    let ind: Vec<f64> = firsts
        .iter()
        .zip(traces)
        .map(|(f, tr)| f64::from(u8::from(f.is_none() && tr.lifetime.is_some())))
        .collect();
    let (cemetery, cemetery_se) = stats_of(&ind)?;
    Ok(ChainDistEstimate {
        level: n,
        freq,
        se,
        cemetery,
        cemetery_se,
        n_paths: traces.len(),
    })
}

/// Ratio of means `sum a / sum b` with its delta-method standard error.
fn ratio_stats(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let n = a.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let ma = neumaier_sum(a) / n as f64;
    let mb = neumaier_sum(b) / n as f64;
    let r = ma / mb;
    let resid: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - r * y).collect();
    let s = mc_stats(&resid)?;
    Ok((r, s.se / mb))
}

/// One cell of the recursion comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecursionCell {
    pub location: f64,
    pub direct: f64,
    pub transformed: f64,
    pub se: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecursionResidual {
    pub n: usize,
    pub m: usize,
    pub cells: Vec<RecursionCell>,
    /// Largest `|z|` over the cells.
    pub max_z: f64,
}

/// Map samples of `lambda^(m)` to `lambda^(n)`, `m > n`: mass below
/// `c_hat[n]` moves to `c_hat[n]` with weight `x / c_hat[n]` and the rest is
/// renormalized away. Compared cell by cell with a direct estimate.
pub fn recursion_check(
    est_n: &InstantDistEstimate,
    est_m: &InstantDistEstimate,
    emb: &StateEmbedding,
) -> Result<RecursionResidual> {
    let (n, m) = (est_n.level, est_m.level);
    if m < n {
        return Err(Error::DimensionMismatch(n, m));
    }
    let cn = emb.c_hat(n);
    let xs = &est_m.samples;
    let denom: Vec<f64> = xs
        .iter()
        .map(|&x| if x >= 0.0 && x < cn { x / cn } else { 1.0 })
        .collect();
    let mut locs: Vec<f64> = est_n.cells.iter().map(|c| c.location).collect();
    locs.extend(est_m.cells.iter().map(|c| c.location).filter(|&x| x > cn));
    locs.push(cn);
    locs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    locs.dedup();
    locs.push(CEMETERY);
    let mut cells = Vec::with_capacity(locs.len());
    for &loc in &locs {
        let num: Vec<f64> = xs
            .iter()
            .map(|&x| {
                if loc == cn && x >= 0.0 && x < cn {
                    x / cn
                } else {
                    f64::from(u8::from(x == loc))
                }
            })
            .collect();
        let (t, tse) = ratio_stats(&num, &denom)?;
        let (d, dse) = if loc == CEMETERY {
            (est_n.cemetery.freq, est_n.cemetery.se)
        } else {
            est_n
                .cells
                .iter()
                .find(|c| c.location == loc)
                .map_or((0.0, 0.0), |c| (c.freq, c.se))
        };
        let se = (tse * tse + dse * dse).sqrt();
        cells.push(RecursionCell {
            location: loc,
            direct: d,
            transformed: t,
            se,
            z: z_score(d, t, se),
        });
    }
    let max_z = cells.iter().map(|c| c.z.abs()).fold(0.0, f64::max);
    Ok(RecursionResidual { n, m, cells, max_z })
}

/// A measure on `(0, inf) ∪ {cemetery}` with the reflecting weight that
/// completes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaMeasure {
    /// `(location, mass)` in decreasing location order.
    pub atoms: Vec<(f64, f64)>,
    pub cemetery: f64,
    pub p2_tilde: f64,
}

impl LambdaMeasure {
    /// `lambda` implied by boundary parameters, scaled so that
    /// `p2_tilde = c_hat[0] (1 - lambda(cemetery)) - ∫ (x ∧ c_hat[0]) lambda(dx)`.
    pub fn from_params(fp: &FellerParams, emb: &StateEmbedding) -> Self {
        let c0 = emb.c_hat(0);
        let s = c0 / (fp.p2 + c0 * fp.p1 + fp.p4.integrate(|x| x.min(c0)));
        Self {
            atoms: fp.p4.atoms().iter().map(|&(x, w)| (x, w * s)).collect(),
            cemetery: fp.p1 * s,
            p2_tilde: fp.p2 * s,
        }
    }

    fn mass(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.atoms.iter().map(|&(x, w)| w * f(x)).sum()
    }

    /// `p2_tilde + ∫_{(0, c_hat[n]]} x lambda(dx)`.
    pub fn p2_tilde_n(&self, emb: &StateEmbedding, n: usize) -> f64 {
        let c = emb.c_hat(n);
        self.p2_tilde + self.mass(|x| if x <= c { x } else { 0.0 })
    }

    /// `Lambda_n` from `1/Lambda_n = lambda((c_n, inf) ∪ cemetery) + p2_tilde^n / c_n`.
    pub fn big_lambda(&self, emb: &StateEmbedding, n: usize) -> f64 {
        let c = emb.c_hat(n);
        let above = self.mass(|x| f64::from(u8::from(x > c)));
        1.0 / (above + self.cemetery + self.p2_tilde_n(emb, n) / c)
    }

    /// Exact `lambda^(n)` as `(cells, cemetery)`.
    pub fn instant_dist(&self, emb: &StateEmbedding, n: usize) -> (Vec<(f64, f64)>, f64) {
        let c = emb.c_hat(n);
        let l = self.big_lambda(emb, n);
        let mut cells: Vec<(f64, f64)> = self.atoms.iter().filter(|a| a.0 > c).map(|&(x, w)| (x, l * w)).collect();
        cells.push((c, l * self.p2_tilde_n(emb, n) / c));
        (cells, l * self.cemetery)
    }

    /// Chain first-entry law into `{0..=n}`: interpolation of `lambda` onto
    /// neighbouring levels, with the mass that reaches `c_hat[n]` from below
    /// carried by `p2_tilde^n`.
    pub fn hat_lambda(&self, emb: &StateEmbedding, n: usize) -> (Vec<f64>, f64) {
        let l = self.big_lambda(emb, n);
        let c = |k: usize| emb.c_hat(k);
        let lower = |k: usize| {
            // ∫_{(c_{k+1}, c_k]} (x - c_{k+1}) / (c_k - c_{k+1})
            let (hi, lo) = (c(k), c(k + 1));
            self.mass(|x| if x > lo && x <= hi { (x - lo) / (hi - lo) } else { 0.0 })
        };
        let upper = |k: usize| {
            // ∫_{(c_k, c_{k-1})} (c_{k-1} - x) / (c_{k-1} - c_k), with c_{-1} = inf
            if k == 0 {
                return self.mass(|x| f64::from(u8::from(x > c(0))));
            }
            let (hi, lo) = (c(k - 1), c(k));
            self.mass(|x| if x > lo && x < hi { (hi - x) / (hi - lo) } else { 0.0 })
        };
        let mut out = vec![0.0; n + 1];
        for (k, o) in out.iter_mut().enumerate().take(n) {
            *o = l * (lower(k) + upper(k));
        }
        out[n] = l * (self.p2_tilde_n(emb, n) / c(n) + upper(n));
        (out, l * self.cemetery)
    }
}

/// `lambda` from estimates at several levels, with the per-level pieces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaEstimate {
    /// `(location, mass, se)`.
    pub atoms: Vec<(f64, f64, f64)>,
    pub cemetery: (f64, f64),
    /// `(n, Lambda_n, se)`.
    pub big_lambda: Vec<(usize, f64, f64)>,
    /// `(n, h_n, se)` with `h_n = c_n lambda^(n)({c_n}) / Lambda_n`.
    pub h: Vec<(usize, f64, f64)>,
    pub p2_tilde: (f64, f64),
    /// Largest disagreement between a level's value and the combined one,
    /// in standard errors.
    pub max_consistency_z: f64,
}

impl LambdaEstimate {
    pub fn measure(&self) -> LambdaMeasure {
        LambdaMeasure {
            atoms: self.atoms.iter().map(|a| (a.0, a.1)).collect(),
            cemetery: self.cemetery.0,
            p2_tilde: self.p2_tilde.0,
        }
    }
}

/// Inverse-variance combination; `se` is floored so that empty cells still
/// carry weight.
fn combine(parts: &[(f64, f64)], floor: f64) -> (f64, f64, f64) {
    let w: Vec<f64> = parts.iter().map(|p| 1.0 / p.1.max(floor).powi(2)).collect();
    let sw: f64 = w.iter().sum();
    let v = parts.iter().zip(&w).map(|(p, w)| p.0 * w).sum::<f64>() / sw;
    let z = parts
        .iter()
        .map(|p| ((p.0 - v) / p.1.max(floor)).abs())
        .fold(0.0, f64::max);
    (v, 1.0 / sw.sqrt(), z)
}

/// Rebuild `lambda` on `(c_hat[N], inf) ∪ {cemetery}` from `lambda^(n)`
/// estimates: each level contributes `lambda^(n) / Lambda_n` above
/// `c_hat[n]`; overlapping contributions are averaged.
pub fn reconstruct_lambda(estimates: &[InstantDistEstimate], emb: &StateEmbedding) -> Result<LambdaEstimate> {
    if estimates.is_empty() {
        return Err(Error::TooFewSamples(0));
    }
    let c0 = emb.c_hat(0);
    let mut locs: Vec<f64> = Vec::new();
    let mut big_lambda = Vec::new();
    let mut h = Vec::new();
    // per estimate: (n, denominators)
    let mut denoms = Vec::new();
    for e in estimates {
        let cn = emb.c_hat(e.level);
        let b: Vec<f64> = e
            .samples
            .iter()
            .map(|&x| if x >= cn && x < c0 { x / c0 } else { 1.0 })
            .collect();
        let (l, lse) = stats_of(&b)?;
        big_lambda.push((e.level, l, lse));
        let a: Vec<f64> = e.samples.iter().map(|&x| if x == cn { cn } else { 0.0 }).collect();
        let (hv, hse) = ratio_stats(&a, &b)?;
        h.push((e.level, hv, hse));
        locs.extend(e.cells.iter().map(|c| c.location).filter(|&x| x > cn));
        denoms.push(b);
    }
    locs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    locs.dedup();
    let mut max_z: f64 = 0.0;
    let mut piece = |loc: f64| -> Result<(f64, f64)> {
        let mut parts = Vec::new();
        let mut floor = f64::INFINITY;
        for (e, b) in estimates.iter().zip(&denoms) {
            if loc != CEMETERY && loc <= emb.c_hat(e.level) {
                continue;
            }
            let a: Vec<f64> = e.samples.iter().map(|&x| f64::from(u8::from(x == loc))).collect();
            parts.push(ratio_stats(&a, b)?);
            floor = floor.min(1.0 / e.n_paths as f64);
        }
        let (v, se, z) = combine(&parts, floor);
        max_z = max_z.max(z);
        Ok((v, se))
    };
    let mut atoms = Vec::with_capacity(locs.len());
    for &x in &locs {
        let (v, se) = piece(x)?;
        atoms.push((x, v, se));
    }
    let cemetery = piece(CEMETERY)?;
    if max_z > 5.0 {
        return Err(Error::InconsistentEstimates(format!("levels disagree by {max_z:.1} SE")));
    }
    let mut p2 = c0 * (1.0 - cemetery.0);
    let mut var = (c0 * cemetery.1).powi(2);
    for &(x, v, se) in &atoms {
        p2 -= x.min(c0) * v;
        var += (x.min(c0) * se).powi(2);
    }
    Ok(LambdaEstimate {
        atoms,
        cemetery,
        big_lambda,
        h,
        p2_tilde: (p2, var.sqrt()),
        max_consistency_z: max_z,
    })
}

/// Recovered parameters with `p3 = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    /// Normalized so that `p1 + p2 + ∫ (x ∧ 1) p4 = 1`.
    pub params: FellerParams,
    pub p1_se: f64,
    pub p2_se: f64,
    /// `(location, mass, se)` after normalization.
    pub p4_se: Vec<(f64, f64, f64)>,
}

/// `p1 = lambda(cemetery)`, `p2 = p2_tilde`, `p4 = lambda` on `(0, inf)`,
/// then normalized. A slightly negative `p2_tilde` is clipped to 0.
pub fn recover_params(lambda: &LambdaEstimate) -> Result<Recovery> {
    let p4 = AtomicMeasure::new(lambda.atoms.iter().map(|a| (a.0, a.1)).collect(), MassKind::Finite)?;
    let raw = FellerParams {
        p1: lambda.cemetery.0,
        p2: lambda.p2_tilde.0.max(0.0),
        p3: 0.0,
        p4,
    };
    let total = raw.total();
    if !(total > 0.0) {
        return Err(Error::DegenerateMeasure("recovered parameters vanish".into()));
    }
    let s = 1.0 / total;
    Ok(Recovery {
        params: raw.scaled(s),
        p1_se: lambda.cemetery.1 * s,
        p2_se: lambda.p2_tilde.1 * s,
        p4_se: lambda.atoms.iter().map(|a| (a.0, a.1 * s, a.2 * s)).collect(),
    })
}

/// Discarded duration statistics for one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoRow {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let k = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[k]
}

/// `rho^(n)_t` for every level in `levels` along one reflecting Brownian
/// path from 0. Steps shrink near 0 (`h = (y/4)^2`, floored at
/// `(c_min/8)^2`, capped at `dt`) so that small levels are resolved; a touch
/// of 0 within a step is detected by sign change or the bridge minimum.
pub fn reflecting_rho<R: Rng + ?Sized>(levels: &[f64], t: f64, dt: f64, rng: &mut R) -> Vec<f64> {
    let c_min = levels.iter().copied().fold(f64::INFINITY, f64::min);
    let h_min = (c_min / 8.0).powi(2).min(dt);
    let k = levels.len();
    let mut kept = vec![0.0; k];
    // starting at 0 every level begins by discarding
    let mut discarding = vec![true; k];
    let mut gone = vec![0.0; k];
    let mut done = 0;
    let mut b: f64 = 0.0;
    while done < k {
        let y0 = b.abs();
        let h = (y0 / 4.0).powi(2).clamp(h_min, dt);
        b += h.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let y1 = b.abs();
        let touched = y0 == 0.0 || y1 == 0.0 || rng.random::<f64>() < (-2.0 * y0 * y1 / h).exp();
        // one uniform for all levels keeps the discarded intervals nested
        let u: f64 = rng.random();
        done = 0;
        for i in 0..k {
            if kept[i] >= t {
                done += 1;
                continue;
            }
            let c = levels[i];
            if discarding[i] {
                gone[i] += h;
                let up = y1 >= c || u < (-2.0 * (c - y0) * (c - y1) / h).exp();
                if up {
                    discarding[i] = false;
                }
            } else {
                kept[i] += h;
                if touched {
                    discarding[i] = true;
                }
            }
        }
    }
    gone
}

/// Median, mean and 95th percentile of `rho^(n)_t` on reflecting BM.
pub fn convergence_diagnostic(
    emb: &StateEmbedding,
    t: f64,
    n_list: &[usize],
    n_paths: usize,
    dt: f64,
    seed: u64,
    threads: usize,
) -> Result<Vec<RhoRow>> {
    if n_paths < 2 {
        return Err(Error::TooFewSamples(n_paths));
    }
    let levels: Vec<f64> = n_list.iter().map(|&n| emb.c_hat(n)).collect();
    let runs = par_map(n_paths, threads, |p| {
        let mut rng = stream(seed, tag::DIAG, p as u64);
        reflecting_rho(&levels, t, dt, &mut rng)
    });
    let mut out = Vec::with_capacity(n_list.len());
    for (i, &n) in n_list.iter().enumerate() {
        let mut v: Vec<f64> = runs.iter().map(|r| r[i]).collect();
        let mean = neumaier_sum(&v) / v.len() as f64;
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.push(RhoRow {
            n,
            mean,
            median: quantile(&v, 0.5),
            p95: quantile(&v, 0.95),
        });
    }
    Ok(out)
}
