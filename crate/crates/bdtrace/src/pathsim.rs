//! Grid simulation of Feller Brownian motions: reflecting BM, local times,
//! the subordinator, Itô–McKean composition, sojourn, killing and Doob's BM.
//!
//! Local time is in Tanaka normalization: for `W = |B|` the boundary local
//! time is `L^0(B)`, so `E l_1 = sqrt(2/pi)` from 0.

use std::io::Write;

use rand::Rng;
use rand_distr::{weighted::WeightedIndex, Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bd_core::{AtomicMeasure, FellerParams, MassKind};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};

/// Coordinate of the cemetery in paths and CSV output.
pub const CEMETERY: f64 = -1.0;

/// Per-knot flags.
pub mod flag {
    /// The step touched 0 (boundary local time grew).
    pub const BOUNDARY: u8 = 1;
    /// The path jumped from the boundary into `(0, inf)`.
    pub const JUMP: u8 = 2;
    /// Time at 0 was inserted before this knot.
    pub const SOJOURN: u8 = 4;
    pub const KILLED: u8 = 8;
}

pub fn flag_string(f: u8) -> String {
    let mut s = String::new();
    for (bit, c) in [
        (flag::BOUNDARY, 'B'),
        (flag::JUMP, 'J'),
        (flag::SOJOURN, 'S'),
        (flag::KILLED, 'K'),
    ] {
        if f & bit != 0 {
            s.push(c);
        }
    }
    if s.is_empty() {
        s.push('-');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathStorage {
    Grid,
    Events,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalTimeEstimator {
    /// Occupation band of half-width `eps`.
    Band,
    /// Conditional expectation given the step endpoints.
    Bridge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub eps: f64,
    pub subordinator_trunc: usize,
    pub seed: u64,
    pub path_storage: PathStorage,
    pub estimator: LocalTimeEstimator,
}

impl SimConfig {
    pub fn new(dt: f64, horizon: f64, seed: u64) -> Self {
        Self {
            dt,
            horizon,
            eps: dt.sqrt(),
            subordinator_trunc: 64,
            seed,
            path_storage: PathStorage::Grid,
            estimator: LocalTimeEstimator::Bridge,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidSimConfig(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidSimConfig(format!(
                "horizon = {} must be positive",
                self.horizon
            )));
        }
        let min = self.dt.sqrt();
        // tolerate the rounding of eps = sqrt(dt) itself
        if !(self.eps >= min * (1.0 - 1e-12)) {
            return Err(Error::BandwidthTooSmall { eps: self.eps, min });
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        (self.horizon / self.dt).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub flags: Vec<u8>,
    pub lifetime: f64,
    pub killed: bool,
}

impl SamplePath {
    fn with_capacity(n: usize) -> Self {
        Self {
            times: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            flags: Vec::with_capacity(n),
            lifetime: f64::INFINITY,
            killed: false,
        }
    }

    fn push(&mut self, t: f64, v: f64, f: u8) {
        self.times.push(t);
        self.values.push(v);
        self.flags.push(f);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn jump_marks(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.flags[k] & flag::JUMP != 0).collect()
    }

    /// Right-continuous step interpolation; the last value persists.
    pub fn value_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        self.values[k.saturating_sub(1)]
    }

    /// First knot time with value exactly 0 or a boundary flag.
    pub fn first_boundary_time(&self) -> Option<f64> {
        (0..self.len())
            .find(|&k| self.values[k] == 0.0 || self.flags[k] & flag::BOUNDARY != 0)
            .map(|k| self.times[k])
    }
}

/// Rows `path_id,t,value,flags`.
pub fn write_path_csv<W: Write>(out: W, paths: &[(u64, &SamplePath)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["path_id", "t", "value", "flags"])
        .map_err(|e| Error::Io(e.to_string()))?;
    for &(id, p) in paths {
        for k in 0..p.len() {
            w.write_record([
                id.to_string(),
                p.times[k].to_string(),
                p.values[k].to_string(),
                flag_string(p.flags[k]),
            ])
            .map_err(|e| Error::Io(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `exp(x^2) erfc(x)` without overflow.
pub fn erfcx(x: f64) -> f64 {
    if x < 25.0 {
        (x * x).exp() * statrs::function::erf::erfc(x)
    } else {
        let y = 1.0 / (x * x);
        (1.0 - 0.5 * y + 0.75 * y * y - 1.875 * y * y * y) / (x * std::f64::consts::PI.sqrt())
    }
}

/// `E[L^a]` over a step of length `h` for a Brownian bridge with
/// `u = |y0 - a| + |y1 - a|` and `d = y1 - y0`.
pub fn bridge_local_time_mean(u: f64, d: f64, h: f64) -> f64 {
    let s = (2.0 * h).sqrt();
    let e = (d * d - u * u) / (2.0 * h);
    if e < -745.0 {
        return 0.0;
    }
    e.exp() * erfcx(u / s) * (std::f64::consts::PI * h / 2.0).sqrt()
}

/// Exact draw of `L^a` given the bridge endpoints, from a uniform `v`.
pub fn bridge_local_time_sample(u: f64, d: f64, h: f64, v: f64) -> f64 {
    let log_p = -(u * u - d * d) / (2.0 * h);
    if v.ln() >= log_p {
        return 0.0;
    }
    (d * d - 2.0 * h * v.ln()).sqrt() - u
}

/// `E[L^0(B)]` over a step given `|B|` at both ends.
pub fn reflected_local_time_mean(w0: f64, w1: f64, h: f64) -> f64 {
    // the crossing and same-side branches share erfc((w0 + w1) / sqrt(2h))
    let x = (w0 + w1) / (2.0 * h).sqrt();
    erfcx(x) * (2.0 * std::f64::consts::PI * h).sqrt() / ((2.0 * w0 * w1 / h).exp() + 1.0)
}

/// Exact draw of `L^0(B)` over a step given `|B|` at both ends.
pub fn reflected_local_time_sample<R: Rng + ?Sized>(w0: f64, w1: f64, h: f64, rng: &mut R) -> f64 {
    let u = w0 + w1;
    // probability that B changed sign over the step
    let p_cross = 1.0 / (1.0 + (2.0 * w0 * w1 / h).exp());
    let v: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    if rng.random::<f64>() < p_cross {
        bridge_local_time_sample(u, u, h, v)
    } else {
        bridge_local_time_sample(u, w1 - w0, h, v)
    }
}

/// `W+ = |B|` from `x0` on the `dt` grid up to the horizon.
pub fn simulate_reflecting_bm<R: Rng + ?Sized>(cfg: &SimConfig, x0: f64, rng: &mut R) -> SamplePath {
    let n = cfg.steps();
    let sd = cfg.dt.sqrt();
    let mut p = SamplePath::with_capacity(n + 1);
    let mut b = x0;
    p.push(0.0, x0.abs(), 0);
    for k in 1..=n {
        let z: f64 = rng.sample(StandardNormal);
        b += sd * z;
        p.push(k as f64 * cfg.dt, b.abs(), 0);
    }
    p
}

fn check_level(a: f64) -> Result<()> {
    if !(a >= 0.0 && a.is_finite()) {
        return Err(Error::InvalidSimConfig(format!("local-time level {a} must be >= 0")));
    }
    Ok(())
}

/// Cumulative local time at `a` on the knots of `path`. Steps flagged as
/// jumps or killed carry no local time; so do steps with a sojourn inserted
/// (the time spent at 0 is not a diffusive step).
pub fn estimate_local_time(path: &SamplePath, a: f64, cfg: &SimConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_level(a)?;
    let n = path.len();
    let mut acc = Vec::with_capacity(n);
    let mut total = 0.0;
    if n > 0 {
        acc.push(0.0);
    }
    for k in 1..n {
        let f = path.flags[k];
        let (y0, y1) = (path.values[k - 1], path.values[k]);
        let skip = f & (flag::JUMP | flag::KILLED) != 0 || y0 < 0.0 || y1 < 0.0;
        if !skip {
            let h = if f & flag::SOJOURN != 0 { cfg.dt } else { path.times[k] - path.times[k - 1] };
            total += match cfg.estimator {
                LocalTimeEstimator::Band => {
                    let inside = if a == 0.0 { y0 < cfg.eps } else { (y0 - a).abs() < cfg.eps };
                    if inside {
                        h / (2.0 * cfg.eps)
                    } else {
                        0.0
                    }
                }
                LocalTimeEstimator::Bridge => {
                    if a == 0.0 {
                        reflected_local_time_mean(y0, y1, h)
                    } else {
                        bridge_local_time_mean((y0 - a).abs() + (y1 - a).abs(), y1 - y0, h)
                    }
                }
            };
        }
        acc.push(total);
    }
    Ok(acc)
}

/// Boundary local time used to drive the composition. With the bridge
/// estimator this is an exact draw given the grid (zero on steps that stay
/// away from 0), so jumps and killing only happen at boundary visits.
pub fn sample_boundary_local_time<R: Rng + ?Sized>(
    wplus: &SamplePath,
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if cfg.estimator == LocalTimeEstimator::Band {
        return estimate_local_time(wplus, 0.0, cfg);
    }
    cfg.validate()?;
    let n = wplus.len();
    let mut acc = Vec::with_capacity(n);
    let mut total = 0.0;
    if n > 0 {
        acc.push(0.0);
    }
    for k in 1..n {
        let h = wplus.times[k] - wplus.times[k - 1];
        total += reflected_local_time_sample(wplus.values[k - 1], wplus.values[k], h, rng);
        acc.push(total);
    }
    Ok(acc)
}

/// `Z(t) = p2 t + sum of jumps`, generated in `Z`-time.
#[derive(Debug, Clone, PartialEq)]
pub struct SubordinatorPath {
    pub drift: f64,
    pub jump_times: Vec<f64>,
    pub jump_sizes: Vec<f64>,
    /// `Z(T_j)` after each jump.
    post: Vec<f64>,
    /// Jumps are generated on `[0, horizon]`.
    pub horizon: f64,
    /// `sum x w` over atoms dropped by the truncation.
    pub dropped_drift: f64,
}

impl SubordinatorPath {
    pub fn value(&self, t: f64) -> f64 {
        let j = self.jump_times.partition_point(|&s| s <= t);
        let jumps = if j == 0 { 0.0 } else { self.post[j - 1] - self.drift * self.jump_times[j - 1] };
        self.drift * t + jumps
    }

    /// `(Z^{-1}(s), number of jumps at or before it)` with
    /// `Z^{-1}(s) = inf { t : Z(t) > s }`.
    fn locate(&self, s: f64) -> (f64, usize) {
        let j = self.post.partition_point(|&p| p <= s);
        let (t_prev, z_prev) = if j == 0 { (0.0, 0.0) } else { (self.jump_times[j - 1], self.post[j - 1]) };
        let drift_hit = if self.drift > 0.0 {
            t_prev + (s - z_prev) / self.drift
        } else {
            f64::INFINITY
        };
        if j < self.post.len() && drift_hit >= self.jump_times[j] {
            (self.jump_times[j], j + 1)
        } else {
            (drift_hit, j)
        }
    }

    pub fn inverse(&self, s: f64) -> f64 {
        self.locate(s).0
    }

    /// `Z(Z^{-1}(s)) - s`, with the convention 0 at `s = 0`.
    pub fn overshoot(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        let (t, j) = self.locate(s);
        if !t.is_finite() {
            return 0.0;
        }
        if j > 0 && t == self.jump_times[j - 1] {
            self.post[j - 1] - s
        } else {
            0.0
        }
    }

    /// Jumps at or before `Z^{-1}(s)`.
    pub fn jumps_before(&self, s: f64) -> usize {
        if s <= 0.0 {
            0
        } else {
            self.locate(s).1
        }
    }
}

struct JumpLaw {
    rate: f64,
    sizes: Vec<f64>,
    pick: Option<WeightedIndex<f64>>,
    dropped_drift: f64,
}

fn jump_law(p4: &AtomicMeasure, trunc: usize) -> JumpLaw {
    let atoms = p4.atoms();
    let keep = &atoms[..atoms.len().min(trunc)];
    let dropped_drift = atoms[keep.len()..].iter().map(|&(x, w)| x * w).sum();
    let rate: f64 = keep.iter().map(|a| a.1).sum();
    let pick = if keep.is_empty() {
        None
    } else {
        WeightedIndex::new(keep.iter().map(|a| a.1)).ok()
    };
    JumpLaw {
        rate,
        sizes: keep.iter().map(|a| a.0).collect(),
        pick,
        dropped_drift,
    }
}

fn generate<R: Rng + ?Sized>(
    p2: f64,
    p4: &AtomicMeasure,
    cfg: &SimConfig,
    rng: &mut R,
    stop: impl Fn(f64, f64) -> Option<f64>,
) -> SubordinatorPath {
    let law = jump_law(p4, cfg.subordinator_trunc);
    let mut z = SubordinatorPath {
        drift: p2,
        jump_times: Vec::new(),
        jump_sizes: Vec::new(),
        post: Vec::new(),
        horizon: 0.0,
        dropped_drift: law.dropped_drift,
    };
    let (pick, rate) = match &law.pick {
        Some(p) if law.rate > 0.0 => (p, law.rate),
        _ => {
            z.horizon = stop(f64::INFINITY, 0.0).unwrap_or(f64::INFINITY);
            return z;
        }
    };
    let mut t = 0.0;
    let mut zt = 0.0;
    loop {
        let e: f64 = rng.sample(Exp1);
        let next = t + e / rate;
        // stop() sees the next jump time and the level just before it
        if let Some(h) = stop(next, zt + p2 * (next - t)) {
            z.horizon = h;
            return z;
        }
        let x = law.sizes[pick.sample(rng)];
        zt += p2 * (next - t) + x;
        t = next;
        z.jump_times.push(t);
        z.jump_sizes.push(x);
        z.post.push(zt);
    }
}

/// Subordinator on `Z`-time `[0, t_max]`.
pub fn simulate_subordinator<R: Rng + ?Sized>(
    p2: f64,
    p4: &AtomicMeasure,
    cfg: &SimConfig,
    t_max: f64,
    rng: &mut R,
) -> SubordinatorPath {
    generate(p2, p4, cfg, rng, |next, _| (next > t_max).then_some(t_max))
}

/// Subordinator generated until it exceeds `level`, so `Z^{-1}` is exact on
/// `[0, level]`.
pub fn simulate_subordinator_until<R: Rng + ?Sized>(
    p2: f64,
    p4: &AtomicMeasure,
    cfg: &SimConfig,
    level: f64,
    rng: &mut R,
) -> SubordinatorPath {
    generate(p2, p4, cfg, rng, |next, before| (before > level).then_some(next))
}

/// `Y1 = Z(Z^{-1}(l)) - l + W+` on the grid of `wplus`.
pub fn ito_mckean_compose(wplus: &SamplePath, ell: &[f64], z: &SubordinatorPath) -> SamplePath {
    let mut out = SamplePath::with_capacity(wplus.len());
    let mut prev_jumps = 0;
    for k in 0..wplus.len() {
        let jumps = z.jumps_before(ell[k]);
        let mut f = 0u8;
        if k > 0 && ell[k] > ell[k - 1] {
            f |= flag::BOUNDARY;
        }
        if jumps > prev_jumps {
            f |= flag::JUMP;
        }
        prev_jumps = jumps;
        out.push(wplus.times[k], z.overshoot(ell[k]) + wplus.values[k], f);
    }
    out
}

/// `l^{Y1} = Z^{-1}(l)`, zero while `l = 0`.
pub fn inverse_local_time(ell: &[f64], z: &SubordinatorPath) -> Vec<f64> {
    ell.iter()
        .map(|&s| if s <= 0.0 { 0.0 } else { z.inverse(s) })
        .collect()
}

/// Time change by `f(t) = t + p3 l^{Y1}_t`. An infinite `l^{Y1}` means the
/// path sticks at 0 forever; the path ends there.
pub fn apply_sojourn(y1: &SamplePath, ell_y1: &[f64], p3: f64) -> SamplePath {
    if p3 == 0.0 {
        return y1.clone();
    }
    let mut out = SamplePath::with_capacity(y1.len());
    for k in 0..y1.len() {
        let mut f = y1.flags[k];
        if k > 0 && ell_y1[k] > ell_y1[k - 1] {
            f |= flag::SOJOURN;
        }
        if !ell_y1[k].is_finite() {
            out.push(y1.times[k] + p3 * ell_y1[k - 1], 0.0, f | flag::BOUNDARY);
            break;
        }
        out.push(y1.times[k] + p3 * ell_y1[k], y1.values[k], f);
    }
    out
}

/// Kill at the first knot where `p1 l^{Y1} > E`, `E ~ Exp(1)`.
pub fn kill_by_local_time<R: Rng + ?Sized>(y2: &SamplePath, ell_y1: &[f64], p1: f64, rng: &mut R) -> SamplePath {
    let e: f64 = rng.sample(Exp1);
    if p1 == 0.0 {
        return y2.clone();
    }
    match (0..y2.len()).find(|&k| p1 * ell_y1[k] > e) {
        None => y2.clone(),
        Some(k) => {
            let mut out = SamplePath::with_capacity(k + 1);
            for i in 0..k {
                out.push(y2.times[i], y2.values[i], y2.flags[i]);
            }
            let t = y2.times[k];
            out.push(t, CEMETERY, y2.flags[k] | flag::KILLED);
            out.lifetime = t;
            out.killed = true;
            out
        }
    }
}

/// Doob's BM: free BM until 0, hold `Exp(mean p3 / (p1 + |p4|))`, then jump
/// by `p4` or die. Returns the path and the realized holding times.
pub fn simulate_doob_bm<R: Rng + ?Sized>(
    fp: &FellerParams,
    cfg: &SimConfig,
    x0: f64,
    rng: &mut R,
) -> Result<(SamplePath, Vec<f64>)> {
    if !(fp.is_doob_regime()) {
        return Err(Error::RegimeMismatch("Doob's BM needs p2 = 0, p3 > 0, |p4| < inf".into()));
    }
    cfg.validate()?;
    let grid = cfg.path_storage == PathStorage::Grid;
    let total = fp.p1 + fp.p4.total_mass();
    let law = jump_law(&fp.p4, usize::MAX);
    let sd = cfg.dt.sqrt();
    let mut p = SamplePath::with_capacity(cfg.steps() + 1);
    let mut holds = Vec::new();
    let mut t = 0.0;
    let mut y = x0;
    p.push(0.0, y, if y == 0.0 { flag::BOUNDARY } else { 0 });
    while t < cfg.horizon {
        if y > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            let y1 = y + sd * z;
            let hit = y1 <= 0.0 || rng.random::<f64>() < (-2.0 * y * y1 / cfg.dt).exp();
            t += cfg.dt;
            if hit {
                y = 0.0;
                p.push(t, 0.0, flag::BOUNDARY);
            } else {
                y = y1;
                if grid {
                    p.push(t, y, 0);
                }
            }
            continue;
        }
        if !grid && p.times.last() != Some(&t) {
            p.push(t, 0.0, flag::BOUNDARY);
        }
        if total == 0.0 {
            // nothing to leave with: stuck at 0
            if grid {
                while t + cfg.dt <= cfg.horizon {
                    t += cfg.dt;
                    p.push(t, 0.0, flag::SOJOURN);
                }
            }
            break;
        }
        let e: f64 = rng.sample(Exp1);
        let hold = e * fp.p3 / total;
        holds.push(hold);
        let end = t + hold;
        if grid {
            let mut s = t + cfg.dt;
            while s < end && s <= cfg.horizon {
                p.push(s, 0.0, flag::SOJOURN);
                s += cfg.dt;
            }
        }
        t = end;
        if t > cfg.horizon {
            break;
        }
        let u: f64 = rng.random::<f64>() * total;
        if u < fp.p1 || law.pick.is_none() {
            p.push(t, CEMETERY, flag::KILLED | flag::SOJOURN);
            p.lifetime = t;
            p.killed = true;
            break;
        }
        y = law.sizes[law.pick.as_ref().unwrap().sample(rng)];
        p.push(t, y, flag::JUMP | flag::SOJOURN);
    }
    Ok((p, holds))
}

/// Local times of a simulated path at a set of levels.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTimeLedger {
    pub levels: Vec<f64>,
    /// `local[n][k]`: cumulative local time at `levels[n]` up to knot `k`.
    pub local: Vec<Vec<f64>>,
    /// Boundary local time `l` of the driving reflecting BM.
    pub ell: Vec<f64>,
    /// `l^{Y1}`; equal to `ell` for paths without composition.
    pub ell_y1: Vec<f64>,
    /// Boundary local time of the path itself, `p2 l^{Y1}`: `ell` stops
    /// counting while the path rides a jump overshoot.
    pub ell_y: Vec<f64>,
}

impl LocalTimeLedger {
    fn truncate(&mut self, n: usize) {
        for v in &mut self.local {
            v.truncate(n);
        }
        self.ell.truncate(n);
        self.ell_y1.truncate(n);
        self.ell_y.truncate(n);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FellerPath {
    pub path: SamplePath,
    pub ledger: LocalTimeLedger,
}

fn level_ledger(path: &SamplePath, levels: &[f64], cfg: &SimConfig) -> Result<Vec<Vec<f64>>> {
    levels.iter().map(|&a| estimate_local_time(path, a, cfg)).collect()
}

/// Regime dispatch. Path `index` selects independent streams for the
/// Brownian path, the subordinator and the killing threshold.
pub fn simulate_feller_bm(
    fp: &FellerParams,
    cfg: &SimConfig,
    x0: f64,
    levels: &[f64],
    index: u64,
) -> Result<FellerPath> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, tag::PATH, index);
    if fp.is_doob_regime() {
        let mut grid_cfg = cfg.clone();
        grid_cfg.path_storage = PathStorage::Grid;
        let mut drng = stream(cfg.seed, tag::DOOB, index);
        let (path, _) = simulate_doob_bm(fp, &grid_cfg, x0, &mut drng)?;
        let local = level_ledger(&path, levels, cfg)?;
        let ell = estimate_local_time(&path, 0.0, cfg)?;
        return Ok(FellerPath {
            path,
            ledger: LocalTimeLedger {
                levels: levels.to_vec(),
                local,
                ell_y1: ell.clone(),
                ell_y: ell.clone(),
                ell,
            },
        });
    }
    if fp.p2 == 0.0 && fp.p3 == 0.0 && !fp.p4.is_empty() && fp.p4.kind() == MassKind::Finite {
        return Err(Error::RegimeMismatch(
            "p2 = p3 = 0 with finite p4 is not a Feller process".into(),
        ));
    }
    let w = simulate_reflecting_bm(cfg, x0, &mut rng);
    let ell = sample_boundary_local_time(&w, cfg, &mut rng)?;
    let top = ell.last().copied().unwrap_or(0.0);
    let mut zrng = stream(cfg.seed, tag::SUBORDINATOR, index);
    let z = simulate_subordinator_until(fp.p2, &fp.p4, cfg, top, &mut zrng);
    let y1 = ito_mckean_compose(&w, &ell, &z);
    let ell_y1 = inverse_local_time(&ell, &z);
    let mut local = level_ledger(&y1, levels, cfg)?;
    let y2 = apply_sojourn(&y1, &ell_y1, fp.p3);
    let mut krng = stream(cfg.seed, tag::KILL, index);
    let path = kill_by_local_time(&y2, &ell_y1, fp.p1, &mut krng);
    let n = path.len();
    for v in &mut local {
        v.truncate(n);
    }
    let ell_y = ell_y1.iter().map(|l| fp.p2 * l).collect();
    let mut ledger = LocalTimeLedger {
        levels: levels.to_vec(),
        local,
        ell,
        ell_y1,
        ell_y,
    };
    ledger.truncate(n);
    if path.killed {
        // nothing accrues at the death knot
        for v in &mut ledger.local {
            if n >= 2 {
                v[n - 1] = v[n - 2];
            }
        }
    }
    Ok(FellerPath { path, ledger })
}

/// `∫_0^T e^{-alpha t} h(Y_t) dt` along a path, trapezoidal on diffusive
/// steps and exact on inserted holding time at 0.
pub fn discounted_integral(path: &SamplePath, alpha: f64, h: &dyn Fn(f64) -> f64, dt: f64) -> f64 {
    let mut acc = 0.0;
    for k in 1..path.len() {
        let (t0, t1) = (path.times[k - 1], path.times[k]);
        let (y0, y1) = (path.values[k - 1], path.values[k]);
        if y0 < 0.0 {
            break;
        }
        let f = path.flags[k];
        if y1 < 0.0 {
            // killed inside the step
            acc += (-alpha * t0).exp() * h(y0) * (t1 - t0).min(dt) * 0.5;
            break;
        }
        let hold = if f & flag::SOJOURN != 0 { (t1 - t0 - dt).max(0.0) } else { 0.0 };
        let diff = t1 - t0 - hold;
        if f & flag::JUMP != 0 {
            acc += (-alpha * t0).exp() * h(y0) * diff;
        } else {
            acc += 0.5 * diff * ((-alpha * t0).exp() * h(y0) + (-alpha * (t0 + diff)).exp() * h(y1));
        }
        if hold > 0.0 {
            let s = t0 + diff;
            acc += h(0.0) * (-alpha * s).exp() * (-(-alpha * hold).exp_m1()) / alpha;
        }
    }
    acc
}

/// Off-`E` occupation of the construction that time-changes first and
/// composes afterwards, next to the trace of the correctly built path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WrongOrderReport {
    /// Per-path fraction of chain time spent outside the closed level set.
    pub wrong_fraction: crate::verify::McStats,
    /// Same fraction for the trace of the Feller path, pooled over paths.
    pub correct_fraction: f64,
    /// `wrong_fraction.mean / wrong_fraction.se`.
    pub z: f64,
    pub n_paths: usize,
    pub grid_points: usize,
}

/// Linear interpolation of knot values at time `t`.
fn interp(times: &[f64], values: &[f64], t: f64) -> f64 {
    let k = times.partition_point(|&s| s <= t);
    if k == 0 {
        return values[0];
    }
    if k >= times.len() {
        return values[times.len() - 1];
    }
    let w = (t - times[k - 1]) / (times[k] - times[k - 1]);
    values[k - 1] + w * (values[k] - values[k - 1])
}

/// Compose after the time change: `Z(Z^{-1}(l^)) - l^ + W^` where `W^` is the
/// trace of the reflecting path and `l^` its boundary local time read on the
/// inverse clock. The correct order (compose, then time-change) is traced on
/// the same Brownian path and subordinator. Both are sampled on a chain-time
/// grid of spacing `chain_dt`; a point counts as off the level set when it is
/// farther than `eps / 2` from every `c_hat[n]` and from 0.
#[allow(clippy::too_many_arguments)]
pub fn wrong_order_demo(
    ss: &crate::bd_core::ScaleSpeed,
    emb: &crate::bd_core::StateEmbedding,
    fp: &FellerParams,
    cfg: &SimConfig,
    level_cap: usize,
    n_paths: usize,
    chain_dt: f64,
    threads: usize,
) -> Result<WrongOrderReport> {
    use crate::timechange::{accumulate_pcaf, inverse_clock, trace_path};
    cfg.validate()?;
    if !(fp.p2 > 0.0) || fp.p1 != 0.0 || fp.p3 != 0.0 {
        return Err(Error::RegimeMismatch("the demonstration needs (0, p2 > 0, 0, p4)".into()));
    }
    let levels: Vec<f64> = (0..=level_cap).map(|n| emb.c_hat(n)).collect();
    let reflecting = FellerParams::simple(0.0, 1.0, 0.0)?;
    let snap = 8.0 * cfg.dt.sqrt();
    let off = |x: f64| emb.nearest(x).1 > cfg.eps / 2.0;
    let runs = crate::rng::par_map(n_paths, threads, |p| -> Result<(usize, usize, usize)> {
        let w = simulate_feller_bm(&reflecting, cfg, 0.0, &levels, p as u64)?;
        let y = simulate_feller_bm(fp, cfg, 0.0, &levels, p as u64)?;
        let w_clock = accumulate_pcaf(&w, ss, emb, level_cap)?;
        let w_trace = trace_path(&w, &w_clock, emb, snap)?;
        let y_clock = accumulate_pcaf(&y, ss, emb, level_cap)?;
        let y_trace = trace_path(&y, &y_clock, emb, snap)?;
        let top = y.ledger.ell.last().copied().unwrap_or(0.0);
        // the subordinator stream of path p, as used inside `y`
        let mut zrng = stream(cfg.seed, tag::SUBORDINATOR, p as u64);
        let z = simulate_subordinator_until(fp.p2, &fp.p4, cfg, top, &mut zrng);
        let value = |n: usize| if n <= level_cap { emb.c_hat(n) } else { 0.0 };
        let (mut wrong, mut correct, mut total) = (0, 0, 0);
        let mut k = 0usize;
        loop {
            let t = k as f64 * chain_dt;
            k += 1;
            let (Some(s), Some(n)) = (inverse_clock(&w_clock, t), w_trace.level_at(t)) else {
                break;
            };
            let ell_hat = interp(&w.path.times, &w.ledger.ell, s);
            total += 1;
            if off(z.overshoot(ell_hat) + value(n)) {
                wrong += 1;
            }
            if let Some(m) = y_trace.level_at(t) {
                if off(value(m)) {
                    correct += 1;
                }
            }
        }
        Ok((wrong, correct, total))
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let fractions: Vec<f64> = runs
        .iter()
        .map(|r| if r.2 > 0 { r.0 as f64 / r.2 as f64 } else { 0.0 })
        .collect();
    let stats = crate::verify::mc_stats(&fractions)?;
    let grid_points: usize = runs.iter().map(|r| r.2).sum();
    let correct: usize = runs.iter().map(|r| r.1).sum();
    Ok(WrongOrderReport {
        z: crate::verify::z_score(stats.mean, 0.0, stats.se),
        wrong_fraction: stats,
        correct_fraction: if grid_points > 0 { correct as f64 / grid_points as f64 } else { 0.0 },
        n_paths,
        grid_points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SimConfig {
        SimConfig::new(1e-3, 1.0, 11)
    }

    #[test]
    fn config_guards() {
        let mut c = cfg();
        c.eps = 0.01;
        assert!(matches!(c.validate(), Err(Error::BandwidthTooSmall { .. })));
        c.eps = 0.1;
        c.dt = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn erfcx_is_continuous_at_switch() {
        let a = erfcx(25.0 - 1e-9);
        let b = erfcx(25.0 + 1e-9);
        assert!((a - b).abs() / a < 1e-6);
        assert!((erfcx(0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bridge_mean_matches_sampler() {
        let (u, d, h) = (0.03, 0.01, 1e-3);
        let m = bridge_local_time_mean(u, d, h);
        let n = 200_000;
        let mut r = stream(1, 99, 0);
        let s: f64 = (0..n)
            .map(|_| bridge_local_time_sample(u, d, h, r.random::<f64>().max(f64::MIN_POSITIVE)))
            .sum::<f64>()
            / n as f64;
        assert!((s - m).abs() < 0.02 * m, "{s} vs {m}");
    }

    #[test]
    fn reflected_mean_matches_sampler() {
        let (w0, w1, h) = (0.01, 0.02, 1e-3);
        let m = reflected_local_time_mean(w0, w1, h);
        let n = 200_000;
        let mut r = stream(2, 99, 0);
        let s: f64 = (0..n).map(|_| reflected_local_time_sample(w0, w1, h, &mut r)).sum::<f64>() / n as f64;
        assert!((s - m).abs() < 0.02 * m, "{s} vs {m}");
    }

    #[test]
    fn subordinator_inverse_round_trip() {
        let p4 = AtomicMeasure::new(vec![(0.4, 1.0), (1.5, 0.5)], MassKind::Finite).unwrap();
        let mut r = stream(3, tag::SUBORDINATOR, 0);
        let z = simulate_subordinator_until(0.3, &p4, &cfg(), 5.0, &mut r);
        let mut last = 0.0;
        for i in 0..500 {
            let s = i as f64 * 0.01;
            let t = z.inverse(s);
            assert!(z.value(t) >= s - 1e-12);
            assert!(z.overshoot(s) >= 0.0);
            assert!(t >= last);
            last = t;
        }
        assert_eq!(z.value(0.0), 0.0);
    }

    #[test]
    fn drift_only_subordinator_is_linear() {
        let mut r = stream(4, tag::SUBORDINATOR, 0);
        let z = simulate_subordinator(0.7, &AtomicMeasure::empty(), &cfg(), 3.0, &mut r);
        assert_eq!(z.value(2.0), 0.7 * 2.0);
        assert_eq!(z.overshoot(1.3), 0.0);
    }

    #[test]
    fn composition_without_jumps_is_identity() {
        let c = cfg();
        let mut r = stream(5, tag::PATH, 0);
        let w = simulate_reflecting_bm(&c, 0.0, &mut r);
        let ell = sample_boundary_local_time(&w, &c, &mut r).unwrap();
        let z = simulate_subordinator_until(1.0, &AtomicMeasure::empty(), &c, 10.0, &mut r);
        let y = ito_mckean_compose(&w, &ell, &z);
        assert_eq!(y.values, w.values);
    }

    #[test]
    fn huge_killing_rate_kills_at_first_touch() {
        let c = SimConfig::new(1e-3, 2.0, 6);
        let fp = FellerParams::new(1e6, 1.0, 0.0, AtomicMeasure::empty()).unwrap();
        let fpath = simulate_feller_bm(&fp, &c, 0.2, &[], 0).unwrap();
        let touch = fpath.ledger.ell.iter().position(|&l| l > 0.0);
        if let Some(k) = touch {
            assert!(fpath.path.killed);
            assert!((fpath.path.lifetime - fpath.path.times[k]).abs() <= c.dt + 1e-12);
        }
    }

    #[test]
    fn sojourn_dilation_is_exact() {
        let c = cfg();
        let fp = FellerParams::new(0.0, 0.5, 0.3, AtomicMeasure::empty()).unwrap();
        let f = simulate_feller_bm(&fp, &c, 0.0, &[], 1).unwrap();
        let k = f.path.len() - 1;
        let dilation = f.path.times[k] - k as f64 * c.dt;
        assert!((dilation - 0.3 * f.ledger.ell_y1[k]).abs() < 1e-9);
    }

    #[test]
    fn doob_regime_guard() {
        let fp = FellerParams::simple(0.0, 1.0, 0.0).unwrap();
        let mut r = stream(7, tag::DOOB, 0);
        assert!(matches!(
            simulate_doob_bm(&fp, &cfg(), 0.0, &mut r),
            Err(Error::RegimeMismatch(_))
        ));
    }
}
