//! The clock `A = sum mu_n L^{c_hat[n]}`, its inverse, and the trace chain.
//!
//! Two routes are provided. The grid route works on paths from `pathsim`.
//! The walker route advances a Feller Brownian motion from feature to
//! feature and is what the resolvent estimator uses.

use std::io::Write;

use rand::Rng;
use rand_distr::{weighted::WeightedIndex, Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bd_core::{FellerParams, ScaleSpeed, StateEmbedding};
use crate::error::{Error, Result};
use crate::pathsim::{flag, FellerPath};
use crate::rng::{par_map, stream, tag};
use crate::verify::{mc_stats, ResolventEstimate};

/// `sum_{n > cap} mu_n`, including the extrapolated tail.
pub fn mu_tail_beyond(ss: &ScaleSpeed, cap: usize) -> f64 {
    let stored: f64 = ss.mu.iter().skip(cap + 1).sum();
    stored + ss.mu_tail.tail()
}

/// Smallest level cap with `sum_{n > cap} mu_n < tol`.
pub fn level_cap_for(ss: &ScaleSpeed, tol: f64) -> usize {
    let n = ss.mu.len();
    let mut tail = ss.mu_tail.tail();
    for cap in (0..n).rev() {
        // tail currently holds sum_{k > cap}
        if tail >= tol {
            return (cap + 1).min(n - 1);
        }
        tail += ss.mu[cap];
    }
    0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClockPath {
    pub times: Vec<f64>,
    /// `A` at each knot.
    pub a: Vec<f64>,
    /// Per-step increment of each tracked level and of the lumped bucket
    /// (`contrib[k][n]` for the step ending at knot `k`).
    contrib: Vec<Vec<f64>>,
    pub level_cap: usize,
    /// Clock mass charged to levels beyond the cap through `2 M l`.
    pub lumped_mass: f64,
    /// Bound on the part of `A` carried by the lumped levels.
    pub tail_bound: f64,
    pub killed: bool,
}

impl ClockPath {
    /// `A_{zeta-}`: the chain lifetime if killed, else `A` at the horizon.
    pub fn end(&self) -> f64 {
        self.a.last().copied().unwrap_or(0.0)
    }
}

/// `A_t = sum_{n <= cap} mu_n L^{c_hat[n]}_t + 2 M_cap l^Y_t`, where the last
/// term stands in for the levels the grid cannot resolve.
pub fn accumulate_pcaf(
    fpath: &FellerPath,
    ss: &ScaleSpeed,
    emb: &StateEmbedding,
    level_cap: usize,
) -> Result<ClockPath> {
    let ledger = &fpath.ledger;
    if ledger.levels.len() < level_cap + 1 || emb.len() < level_cap + 1 {
        return Err(Error::LevelMismatch(format!(
            "need {} levels, ledger has {}",
            level_cap + 1,
            ledger.levels.len()
        )));
    }
    for n in 0..=level_cap {
        if ledger.levels[n] != emb.c_hat(n) {
            return Err(Error::LevelMismatch(format!(
                "level {n}: ledger {} vs embedding {}",
                ledger.levels[n],
                emb.c_hat(n)
            )));
        }
    }
    let path = &fpath.path;
    let m = mu_tail_beyond(ss, level_cap);
    let n_knots = path.len();
    let mut a = Vec::with_capacity(n_knots);
    let mut contrib = Vec::with_capacity(n_knots);
    let mut total = 0.0;
    a.push(0.0);
    contrib.push(vec![0.0; level_cap + 2]);
    for k in 1..n_knots {
        let mut c = vec![0.0; level_cap + 2];
        for n in 0..=level_cap {
            let dl = ledger.local[n][k] - ledger.local[n][k - 1];
            c[n] = ss.mu[n] * dl.max(0.0);
        }
        c[level_cap + 1] = 2.0 * m * (ledger.ell_y[k] - ledger.ell_y[k - 1]).max(0.0);
        if path.values[k] < 0.0 {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        total += c.iter().sum::<f64>();
        a.push(total);
        contrib.push(c);
    }
    let ell_end = ledger.ell_y.last().copied().unwrap_or(0.0);
    Ok(ClockPath {
        times: path.times.clone(),
        a,
        contrib,
        level_cap,
        lumped_mass: m,
        tail_bound: 2.0 * m * ell_end,
        killed: path.killed,
    })
}

/// `gamma_t = inf { s : A_s > t }` with `A` linear between knots; `None`
/// (infinity) once `t >= A` at the end of the path.
pub fn inverse_clock(clock: &ClockPath, t: f64) -> Option<f64> {
    let k = clock.a.partition_point(|&x| x <= t);
    if k >= clock.a.len() {
        return None;
    }
    if k == 0 {
        return Some(clock.times[0]);
    }
    let (a0, a1) = (clock.a[k - 1], clock.a[k]);
    let (t0, t1) = (clock.times[k - 1], clock.times[k]);
    Some(t0 + (t - a0) / (a1 - a0) * (t1 - t0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub chain_time: f64,
    pub level: usize,
    /// The underlying path visited the boundary since the previous event.
    pub via_boundary: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceChainPath {
    pub events: Vec<TraceEvent>,
    /// Chain time at death, if the path died.
    pub lifetime: Option<f64>,
    /// Chain time covered by the simulation.
    pub end: f64,
}

impl TraceChainPath {
    pub fn record(&mut self, t: f64, level: usize, via_boundary: bool) {
        if self.events.last().map(|e| e.level) != Some(level) {
            self.events.push(TraceEvent {
                chain_time: t,
                level,
                via_boundary,
            });
        }
    }

    /// Level at chain time `t`, or `None` after death or past the end.
    pub fn level_at(&self, t: f64) -> Option<usize> {
        if t >= self.end || self.lifetime.is_some_and(|z| t >= z) {
            return None;
        }
        let k = self.events.partition_point(|e| e.chain_time <= t);
        (k > 0).then(|| self.events[k - 1].level)
    }

    /// `∫_0^end e^{-alpha t} 1{X_t = j} dt` from the event list.
    pub fn occupation(&self, alpha: f64, j: usize) -> f64 {
        let stop = self.lifetime.map_or(self.end, |z| z.min(self.end));
        let mut acc = 0.0;
        for (k, e) in self.events.iter().enumerate() {
            if e.level != j || e.chain_time >= stop {
                continue;
            }
            let next = self.events.get(k + 1).map_or(stop, |f| f.chain_time.min(stop));
            acc += (-alpha * e.chain_time).exp() * -(-alpha * (next - e.chain_time)).exp_m1() / alpha;
        }
        acc
    }

    /// Moves between consecutive events that skip a level without a
    /// boundary visit in between.
    pub fn skip_violations(&self) -> usize {
        self.events
            .windows(2)
            .filter(|w| !w[1].via_boundary && w[0].level.abs_diff(w[1].level) > 1)
            .count()
    }
}

/// Trace of a grid path: each step's clock increment goes to the level
/// that carried most of it; the lumped bucket is reported as level `cap + 1`.
pub fn trace_path(fpath: &FellerPath, clock: &ClockPath, emb: &StateEmbedding, tol: f64) -> Result<TraceChainPath> {
    let path = &fpath.path;
    let cap = clock.level_cap;
    let mut out = TraceChainPath::default();
    let mut via = false;
    for k in 1..path.len() {
        if path.flags[k] & (flag::BOUNDARY | flag::JUMP) != 0 {
            via = true;
        }
        let c = &clock.contrib[k];
        let d = clock.a[k] - clock.a[k - 1];
        if d <= 0.0 {
            continue;
        }
        let (lvl, _) = c
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |b, (n, &x)| if x > b.1 { (n, x) } else { b });
        let target = if lvl <= cap { emb.c_hat(lvl) } else { 0.0 };
        let near = |y: f64| y >= 0.0 && (y - target).abs() <= tol.max(if lvl > cap { emb.c_hat(cap) } else { 0.0 });
        if !near(path.values[k - 1]) && !near(path.values[k]) {
            return Err(Error::SnapFailure {
                step: k,
                value: path.values[k],
            });
        }
        out.record(clock.a[k - 1], lvl, via);
        via = false;
    }
    out.end = clock.end();
    if clock.killed {
        out.lifetime = Some(clock.end());
    }
    Ok(out)
}

/// Rows `path_id,chain_time,level`; a final `-1` row marks death.
pub fn write_trace_csv<W: Write>(out: W, traces: &[(u64, &TraceChainPath)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["path_id", "chain_time", "level"]).map_err(io)?;
    for &(id, tr) in traces {
        for e in &tr.events {
            w.write_record([id.to_string(), e.chain_time.to_string(), e.level.to_string()])
                .map_err(io)?;
        }
        if let Some(z) = tr.lifetime {
            w.write_record([id.to_string(), z.to_string(), "-1".to_string()])
                .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Where the walker is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pos {
    Level(usize),
    Free(f64),
    Zero,
    Dead,
}

/// What the last call to [`Walker::advance`] did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Move {
    /// Diffused; local time may have accrued.
    Diffused,
    /// Left 0 by reflection and reached the deepest level.
    Reflected,
    /// Jumped from 0 to the given point.
    Jumped(f64),
    Killed,
    /// Stuck at 0 forever (no reflection, jumps or killing).
    Stuck,
}

/// Feature-to-feature simulation of a Feller Brownian motion `(p1, p2, ., p4)`
/// on the levels `c_hat[0..=cap]` and 0. Real time is not tracked, so `p3`
/// plays no role.
///
/// * Levels `0..=grid_top` (those at least `6 sqrt(dt)` above 0) take
///   Brownian steps of length `dt`; local time at every level near the step
///   is drawn exactly from the bridge law given the endpoints.
/// * A point between levels reached by diffusion exits its interval by the
///   scale function. A point reached by a jump (or a free start) instead
///   takes grid steps with bridge-corrected crossing checks until it hits a
///   level or 0, so the split of jump mass over levels is simulated.
/// * Deeper levels use the exact law at a level: local time `Exp(2lr/(l+r))`
///   before reaching a neighbour, up with probability `l/(l+r)`.
/// * At 0, boundary local time to reach `c_hat[cap]` is `Exp(c_hat[cap])`;
///   it advances the subordinator clock at rate `1/p2`, which competes with
///   the jump and killing thresholds.
#[derive(Debug, Clone)]
pub struct Walker {
    levels: Vec<f64>,
    grid_top: Option<usize>,
    dt: f64,
    p1: f64,
    p2: f64,
    jump_rate: f64,
    sizes: Vec<f64>,
    pick: Option<WeightedIndex<f64>>,
    pub pos: Pos,
    /// Subordinator (Z) time.
    s: f64,
    next_jump: f64,
    kill_at: f64,
    /// `(level, local time)` accrued by the last move; `cap + 1` is the
    /// lumped bucket, charged with `2 l`.
    accrued: Vec<(usize, f64)>,
    /// The walker is at a jump landing point and has not yet reached a
    /// feature; such paths are stepped on the grid.
    landed: bool,
}

impl Walker {
    pub fn new(fp: &FellerParams, emb: &StateEmbedding, cap: usize, dt: f64) -> Result<Self> {
        if cap >= emb.len() {
            return Err(Error::LevelMismatch(format!("cap {cap} beyond {} stored levels", emb.len())));
        }
        if fp.p2 == 0.0 && fp.p3 == 0.0 && !fp.p4.is_empty() && fp.p4.kind().is_finite() {
            return Err(Error::RegimeMismatch("p2 = p3 = 0 with finite p4".into()));
        }
        let levels = emb.levels()[..=cap].to_vec();
        let floor = 6.0 * dt.sqrt();
        let grid_top = levels.iter().rposition(|&c| c >= floor);
        let atoms = fp.p4.atoms();
        let pick = if atoms.is_empty() {
            None
        } else {
            WeightedIndex::new(atoms.iter().map(|a| a.1)).ok()
        };
        Ok(Self {
            levels,
            grid_top,
            dt,
            p1: fp.p1,
            p2: fp.p2,
            jump_rate: fp.p4.total_mass(),
            sizes: atoms.iter().map(|a| a.0).collect(),
            pick,
            pos: Pos::Zero,
            s: 0.0,
            next_jump: f64::INFINITY,
            kill_at: f64::INFINITY,
            accrued: Vec::with_capacity(8),
            landed: false,
        })
    }

    pub fn cap(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn grid_top(&self) -> Option<usize> {
        self.grid_top
    }

    pub fn accrued(&self) -> &[(usize, f64)] {
        &self.accrued
    }

    /// Place the walker at `x` (0, a level, or a free point) and draw fresh
    /// jump and killing thresholds.
    pub fn reset<R: Rng + ?Sized>(&mut self, x: f64, rng: &mut R) {
        self.s = 0.0;
        self.next_jump = self.draw_jump_gap(rng);
        let e: f64 = rng.sample(Exp1);
        self.kill_at = if self.p1 > 0.0 { e / self.p1 } else { f64::INFINITY };
        self.pos = self.locate(x);
        self.landed = matches!(self.pos, Pos::Free(_));
        self.accrued.clear();
    }

    fn draw_jump_gap<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.jump_rate > 0.0 {
            let e: f64 = rng.sample(Exp1);
            e / self.jump_rate
        } else {
            f64::INFINITY
        }
    }

    fn locate(&self, x: f64) -> Pos {
        if x <= 0.0 {
            return Pos::Zero;
        }
        match self.levels.binary_search_by(|c| x.partial_cmp(c).unwrap()) {
            Ok(n) => Pos::Level(n),
            Err(_) => Pos::Free(x),
        }
    }

    /// Neighbouring features of a free point: `(lower, upper)` where a
    /// `None` upper means above the top level; `(level or zero)` below.
    fn bracket(&self, y: f64) -> (Option<usize>, Option<usize>) {
        // first index with level < y
        let idx = self.levels.partition_point(|&c| c >= y);
        let upper = idx.checked_sub(1);
        let lower = (idx < self.levels.len()).then_some(idx);
        (lower, upper)
    }

    fn level_or_zero(&self, n: Option<usize>) -> f64 {
        n.map_or(0.0, |n| self.levels[n])
    }

    fn pos_of(&self, n: Option<usize>) -> Pos {
        n.map_or(Pos::Zero, Pos::Level)
    }

    pub fn advance<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Move {
        self.accrued.clear();
        match self.pos {
            Pos::Dead => Move::Killed,
            Pos::Zero => self.at_zero(rng),
            Pos::Free(y) => {
                self.free_step(y, rng);
                Move::Diffused
            }
            Pos::Level(n) => {
                if self.grid_top.is_some_and(|k| n <= k) {
                    self.grid_step(n, rng);
                } else {
                    self.deep_step(n, rng);
                }
                Move::Diffused
            }
        }
    }

    fn grid_step<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) {
        let y = self.levels[n];
        let h = self.dt;
        let y1 = y + h.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let reach = 9.0 * h.sqrt();
        let (lo, hi) = (y.min(y1) - reach, y.max(y1) + reach);
        // levels are decreasing: indices with lo <= level <= hi
        let first = self.levels.partition_point(|&c| c > hi);
        let last = self.levels.partition_point(|&c| c >= lo);
        let d = y1 - y;
        for m in first..last {
            let a = self.levels[m];
            let u = (y - a).abs() + (y1 - a).abs();
            if (u * u - d * d) > 80.0 * h {
                continue;
            }
            let v: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            let l = crate::pathsim::bridge_local_time_sample(u, d, h, v);
            if l > 0.0 {
                self.accrued.push((m, l));
            }
        }
        if self.accrued.len() > 1 {
            let lv = &self.levels;
            self.accrued
                .sort_by(|p, q| (lv[p.0] - y).abs().partial_cmp(&(lv[q.0] - y).abs()).unwrap());
        }
        self.pos = if y1 <= 0.0 { Pos::Zero } else { self.locate(y1) };
        self.landed = false;
    }

    fn deep_step<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) {
        let a = self.levels[n];
        let down = if n + 1 < self.levels.len() { self.levels[n + 1] } else { 0.0 };
        let l = a - down;
        let e: f64 = rng.sample(Exp1);
        if n == 0 {
            // nothing above: the path comes back down surely
            self.accrued.push((0, e * 2.0 * l));
            self.pos = if self.levels.len() > 1 { Pos::Level(1) } else { Pos::Zero };
            return;
        }
        let r = self.levels[n - 1] - a;
        self.accrued.push((n, e * 2.0 * l * r / (l + r)));
        self.pos = if rng.random::<f64>() * (l + r) < l {
            Pos::Level(n - 1)
        } else if n + 1 < self.levels.len() {
            Pos::Level(n + 1)
        } else {
            Pos::Zero
        };
    }

    fn free_step<R: Rng + ?Sized>(&mut self, y: f64, rng: &mut R) {
        let (lower, upper) = self.bracket(y);
        let Some(up) = upper else {
            // above the top level: recurrence brings it down to c_hat[0]
            self.pos = Pos::Level(0);
            return;
        };
        let hi = self.levels[up];
        let lo = self.level_or_zero(lower);
        if !self.landed {
            // exit of (lo, hi) by the scale function; no local time accrues
            // at either end before the exit
            self.pos = if rng.random::<f64>() * (hi - lo) < y - lo {
                Pos::Level(up)
            } else {
                self.pos_of(lower)
            };
            return;
        }
        let h = self.dt.min(((hi - lo) / 6.0).powi(2));
        let y1 = y + h.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let crossed = |b: f64, rng: &mut R| {
            (y1 - b) * (y - b) <= 0.0 || rng.random::<f64>() < (-2.0 * (y - b) * (y1 - b) / h).exp()
        };
        self.pos = if crossed(hi, rng) {
            Pos::Level(up)
        } else if crossed(lo, rng) {
            self.pos_of(lower)
        } else {
            Pos::Free(y1)
        };
        if !matches!(self.pos, Pos::Free(_)) {
            self.landed = false;
        }
    }

    fn at_zero<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Move {
        let cap = self.cap();
        let event = self.next_jump.min(self.kill_at);
        if self.p2 == 0.0 {
            if !event.is_finite() {
                self.pos = Pos::Dead;
                return Move::Stuck;
            }
            self.s = event;
            return self.fire(rng);
        }
        let e: f64 = rng.sample(Exp1);
        let need = e * self.levels[cap];
        let s_end = self.s + need / self.p2;
        if event <= s_end {
            let used = self.p2 * (event - self.s);
            self.accrued.push((cap + 1, 2.0 * used));
            self.s = event;
            return self.fire(rng);
        }
        self.s = s_end;
        self.accrued.push((cap + 1, 2.0 * need));
        self.pos = Pos::Level(cap);
        Move::Reflected
    }

    fn fire<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Move {
        if self.kill_at <= self.next_jump {
            self.pos = Pos::Dead;
            return Move::Killed;
        }
        let x = self.sizes[self.pick.as_ref().expect("jump without atoms").sample(rng)];
        self.next_jump = self.s + self.draw_jump_gap(rng);
        self.pos = self.locate(x);
        self.landed = matches!(self.pos, Pos::Free(_));
        Move::Jumped(x)
    }
}

/// Level cap used by the walker for these settings.
pub fn kernel_cap(ss: &ScaleSpeed, emb: &StateEmbedding, kc: &KernelConfig) -> usize {
    let floor = 6.0 * kc.dt.sqrt();
    let grid = emb.levels().iter().rposition(|&c| c >= floor).unwrap_or(0);
    level_cap_for(ss, kc.mu_tail_tol)
        .min(grid + kc.exact_depth)
        .min(emb.len() - 1)
}

/// Settings of the walker-based resolvent estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub dt: f64,
    /// Stop once `exp(-alpha_min A)` falls below this.
    pub discount_cutoff: f64,
    /// Level cap: the smallest with `mu`-tail below this...
    pub mu_tail_tol: f64,
    /// ...but at most this many levels below the grid-resolved ones. Each
    /// extra level doubles the boundary returns needed to climb back.
    pub exact_depth: usize,
    pub max_moves: u64,
    pub seed: u64,
    pub threads: usize,
}

impl KernelConfig {
    pub fn new(dt: f64, seed: u64) -> Self {
        Self {
            dt,
            discount_cutoff: 1e-4,
            mu_tail_tol: 1e-9,
            exact_depth: 2,
            max_moves: 50_000_000,
            seed,
            threads: crate::rng::default_threads(),
        }
    }
}

/// One path of the estimator: `mu_j ∫ e^{-alpha A} dL^j` per `(alpha, j)`,
/// plus the trace.
#[derive(Debug, Clone)]
pub struct KernelPath {
    pub primary: Vec<Vec<f64>>,
    pub trace: TraceChainPath,
    pub truncated: bool,
}

/// Run the walker from `x` until the discount cutoff, death, or the move
/// budget. `mu_ext[cap + 1]` is the lumped mass.
pub fn kernel_path<R: Rng + ?Sized>(
    walker: &mut Walker,
    mu_ext: &[f64],
    x: f64,
    alphas: &[f64],
    jmax: usize,
    a_stop: f64,
    max_moves: u64,
    rng: &mut R,
) -> KernelPath {
    walker.reset(x, rng);
    let mut primary = vec![vec![0.0; jmax + 1]; alphas.len()];
    let mut trace = TraceChainPath::default();
    let mut a = 0.0;
    let mut via = matches!(walker.pos, Pos::Zero);
    let mut moves = 0u64;
    let mut truncated = false;
    loop {
        let mv = walker.advance(rng);
        moves += 1;
        for &(n, dl) in walker.accrued() {
            let da = mu_ext[n] * dl;
            if da <= 0.0 {
                continue;
            }
            if n <= jmax {
                for (k, &al) in alphas.iter().enumerate() {
                    primary[k][n] += (-al * a).exp() * -(-al * da).exp_m1() / al;
                }
            }
            trace.record(a, n, via);
            via = false;
            a += da;
        }
        match mv {
            Move::Killed => {
                trace.lifetime = Some(a);
                break;
            }
            Move::Stuck => {
                trace.lifetime = Some(a);
                break;
            }
            Move::Jumped(_) | Move::Reflected => via = true,
            Move::Diffused => {
                if walker.pos == Pos::Zero {
                    via = true;
                }
            }
        }
        if a >= a_stop {
            break;
        }
        if moves >= max_moves {
            truncated = true;
            break;
        }
    }
    trace.end = a;
    KernelPath {
        primary,
        trace,
        truncated,
    }
}

/// Estimates of `Psi_ij(alpha)` for `j <= jmax` from paths started at
/// `c_hat[i]`. Both the clock-integral estimator and the trace-occupation
/// estimator are returned.
pub fn mc_trace_resolvent(
    fp: &FellerParams,
    ss: &ScaleSpeed,
    emb: &StateEmbedding,
    alphas: &[f64],
    i: usize,
    jmax: usize,
    n_paths: usize,
    kc: &KernelConfig,
) -> Result<Vec<ResolventEstimate>> {
    let cap = kernel_cap(ss, emb, kc);
    if jmax > cap || i > cap {
        return Err(Error::LevelMismatch(format!("i = {i}, jmax = {jmax} beyond cap {cap}")));
    }
    let alpha_min = alphas.iter().copied().fold(f64::INFINITY, f64::min);
    if !(alpha_min > 0.0) {
        return Err(Error::InvalidSimConfig("alphas must be positive".into()));
    }
    let a_stop = -kc.discount_cutoff.ln() / alpha_min;
    let mut mu_ext = ss.mu[..=cap].to_vec();
    mu_ext.push(mu_tail_beyond(ss, cap));
    let proto = Walker::new(fp, emb, cap, kc.dt)?;
    let x = emb.c_hat(i);
    let paths = par_map(n_paths, kc.threads, |p| {
        let mut rng = stream(kc.seed, tag::KERNEL, ((i as u64) << 40) | p as u64);
        let mut w = proto.clone();
        let kp = kernel_path(&mut w, &mu_ext, x, alphas, jmax, a_stop, kc.max_moves, &mut rng);
        let secondary: Vec<Vec<f64>> = alphas
            .iter()
            .map(|&al| (0..=jmax).map(|j| kp.trace.occupation(al, j)).collect())
            .collect();
        (kp.primary, secondary, kp.truncated)
    });
    let truncated = paths.iter().filter(|p| p.2).count();
    let mut out = Vec::with_capacity(alphas.len());
    for (k, &al) in alphas.iter().enumerate() {
        let mut values = Vec::with_capacity(jmax + 1);
        let mut se = Vec::with_capacity(jmax + 1);
        let mut sec = Vec::with_capacity(jmax + 1);
        let mut sec_se = Vec::with_capacity(jmax + 1);
        for j in 0..=jmax {
            let s1 = mc_stats(&paths.iter().map(|p| p.0[k][j]).collect::<Vec<_>>())?;
            let s2 = mc_stats(&paths.iter().map(|p| p.1[k][j]).collect::<Vec<_>>())?;
            values.push(s1.mean);
            se.push(s1.se);
            sec.push(s2.mean);
            sec_se.push(s2.se);
        }
        out.push(ResolventEstimate {
            alpha: al,
            i,
            values,
            se,
            secondary: sec,
            secondary_se: sec_se,
            n_paths,
            truncated,
            fingerprint: format!(
                "seed={} dt={:e} cap={} cutoff={:e} paths={}",
                kc.seed, kc.dt, cap, kc.discount_cutoff, n_paths
            ),
        });
    }
    Ok(out)
}
