//! Birth-death rate data, scale/speed quantities, the embedding of the
//! state space into `[0, c_inf]`, parameter containers and the allocation
//! of a jump measure onto levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of trailing increment ratios inspected by the tail test.
const TAIL_RATIOS: usize = 5;
/// Ratios at or above this value count as non-summable.
const TAIL_RATIO_MAX: f64 = 0.999;

/// Tridiagonal rates: death `a[k]` (with `a[0] = 0`) and birth `b[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BirthDeathMatrix {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl BirthDeathMatrix {
    pub fn new(a: &[f64], b: &[f64], cap: usize) -> Result<Self> {
        if cap < 3 {
            return Err(Error::CapTooSmall(cap));
        }
        let len = a.len().min(b.len());
        if len < cap {
            return Err(Error::SequenceTooShort { len, cap });
        }
        if a[0] != 0.0 {
            return Err(Error::NonzeroA0(a[0]));
        }
        for k in 0..cap {
            if k > 0 && !(a[k] > 0.0 && a[k].is_finite()) {
                return Err(Error::NonPositiveRate(k));
            }
            if !(b[k] > 0.0 && b[k].is_finite()) {
                return Err(Error::NonPositiveRate(k));
            }
            if !(a[k] + b[k]).is_finite() {
                return Err(Error::NonPositiveRate(k));
            }
        }
        Ok(Self {
            a: a[..cap].to_vec(),
            b: b[..cap].to_vec(),
        })
    }

    /// `b_0 = b_scale`, `b_k = b_scale * b_ratio^k`, `a_k = a_scale * a_ratio^(k-1)`.
    pub fn geometric(a_scale: f64, a_ratio: f64, b_scale: f64, b_ratio: f64, cap: usize) -> Result<Self> {
        let mut a = vec![0.0; cap];
        let mut b = vec![0.0; cap];
        for k in 0..cap {
            b[k] = b_scale * b_ratio.powi(k as i32);
            if k > 0 {
                a[k] = a_scale * a_ratio.powi(k as i32 - 1);
            }
        }
        Self::new(&a, &b, cap)
    }

    /// The reference matrix: `b_0 = 1`, `a_k = 2*4^(k-1)`, `b_k = 4^k`.
    /// Here `c_k = 1 - 2^-k` and `mu_k = 2^-k`.
    pub fn q_geo(cap: usize) -> Self {
        Self::geometric(2.0, 4.0, 1.0, 4.0, cap).expect("reference rates are valid")
    }

    pub fn cap(&self) -> usize {
        self.a.len()
    }

    pub fn a(&self, k: usize) -> f64 {
        self.a[k]
    }

    pub fn b(&self, k: usize) -> f64 {
        self.b[k]
    }

    pub fn q(&self, k: usize) -> f64 {
        self.a[k] + self.b[k]
    }

    pub fn rates(&self) -> (&[f64], &[f64]) {
        (&self.a, &self.b)
    }
}

pub fn build_matrix(a: &[f64], b: &[f64], cap: usize) -> Result<BirthDeathMatrix> {
    BirthDeathMatrix::new(a, b, cap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryClass {
    Regular,
    Exit,
    Other,
}

impl std::fmt::Display for BoundaryClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BoundaryClass::Regular => "Regular",
            BoundaryClass::Exit => "Exit",
            BoundaryClass::Other => "Other",
        };
        f.write_str(s)
    }
}

/// Outcome of the geometric tail test on a positive series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SeriesTail {
    /// Sum of the terms beyond the cap, extrapolated geometrically.
    Converged { tail: f64, ratio: f64 },
    Divergent,
}

impl SeriesTail {
    pub fn converged(&self) -> bool {
        matches!(self, SeriesTail::Converged { .. })
    }

    pub fn tail(&self) -> f64 {
        match self {
            SeriesTail::Converged { tail, .. } => *tail,
            SeriesTail::Divergent => f64::INFINITY,
        }
    }
}

/// Geometric extrapolation from the last few term ratios.
pub fn geometric_tail(terms: &[f64]) -> SeriesTail {
    if terms.len() < TAIL_RATIOS + 1 {
        return SeriesTail::Divergent;
    }
    let last = &terms[terms.len() - TAIL_RATIOS - 1..];
    let mut rmax: f64 = 0.0;
    for w in last.windows(2) {
        if !(w[0] > 0.0) || !w[1].is_finite() {
            return SeriesTail::Divergent;
        }
        let r = w[1] / w[0];
        if !(r < TAIL_RATIO_MAX) {
            return SeriesTail::Divergent;
        }
        rmax = rmax.max(r);
    }
    let t = *terms.last().unwrap();
    SeriesTail::Converged {
        tail: t * rmax / (1.0 - rmax),
        ratio: rmax,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleSpeed {
    /// `c[k]` for `k = 0..=cap`.
    pub c: Vec<f64>,
    /// Increments `c[k+1] - c[k]` for `k < cap`.
    pub dc: Vec<f64>,
    /// Speed measure `mu[k]` for `k < cap`.
    pub mu: Vec<f64>,
    /// `lim c_k`; `+inf` when the increments fail the tail test.
    pub c_inf: f64,
    /// Bound on `|c_inf - true limit|` (twice the extrapolated tail).
    pub c_inf_bound: f64,
    /// `c_hat[n] = c_inf - c[n]` for `n = 0..=cap`, accumulated from the top.
    pub c_hat: Vec<f64>,
    pub scale_tail: SeriesTail,
    pub r_partial: f64,
    pub r_tail: SeriesTail,
    pub s_partial: f64,
    pub s_tail: SeriesTail,
    /// Speed mass beyond the cap, when summable.
    pub mu_tail: SeriesTail,
    pub class: BoundaryClass,
}

impl ScaleSpeed {
    pub fn cap(&self) -> usize {
        self.mu.len()
    }

    pub fn tail_divergent(&self) -> bool {
        !self.scale_tail.converged()
    }

    /// `sum_{j >= k} dc_j sum_{i <= j} mu_i`, the weight of level `k` in the
    /// integrability condition on `nu`.
    pub fn nu_weight(&self, k: usize) -> f64 {
        let mut acc = 0.0;
        let mut mass: f64 = self.mu[..k].iter().sum();
        for j in k..self.cap() {
            mass += self.mu[j];
            acc += self.dc[j] * mass;
        }
        acc + self.r_tail.tail()
    }
}

pub fn compute_scale_speed(q: &BirthDeathMatrix) -> ScaleSpeed {
    let cap = q.cap();
    let mut dc = Vec::with_capacity(cap);
    let mut mu = Vec::with_capacity(cap);
    // Running products of the ratios b_{k-1}/a_k and a_k/b_k never form the
    // raw rate products, and stay exact on dyadic rates. The log sums take
    // over if a product leaves the normal range.
    let mut log_mu = 0.0;
    let mut log_dc = -std::f64::consts::LN_2 - q.b(0).ln();
    mu.push(1.0);
    dc.push(0.5 / q.b(0));
    for k in 1..cap {
        log_mu += q.b(k - 1).ln() - q.a(k).ln();
        log_dc += q.a(k).ln() - q.b(k).ln();
        let m = mu[k - 1] * (q.b(k - 1) / q.a(k));
        let d = dc[k - 1] * (q.a(k) / q.b(k));
        mu.push(if m.is_normal() { m } else { log_mu.exp() });
        dc.push(if d.is_normal() { d } else { log_dc.exp() });
    }
    let mut c = Vec::with_capacity(cap + 1);
    c.push(0.0);
    for k in 0..cap {
        c.push(c[k] + dc[k]);
    }
    let scale_tail = geometric_tail(&dc);
    let (c_inf, c_inf_bound, c_hat) = match scale_tail {
        SeriesTail::Converged { tail, .. } => {
            let mut c_hat = vec![0.0; cap + 1];
            c_hat[cap] = tail;
            for k in (0..cap).rev() {
                c_hat[k] = c_hat[k + 1] + dc[k];
            }
            (c_hat[0], 2.0 * tail, c_hat)
        }
        SeriesTail::Divergent => (f64::INFINITY, f64::INFINITY, vec![f64::INFINITY; cap + 1]),
    };

    let mut r_terms = Vec::with_capacity(cap);
    let mut mass = 0.0;
    for k in 0..cap {
        mass += mu[k];
        r_terms.push(dc[k] * mass);
    }
    let s_terms: Vec<f64> = (0..cap).map(|k| c[k] * mu[k]).collect();
    let r_tail = geometric_tail(&r_terms);
    // S has a zero first term; the test only looks at the end.
    let s_tail = geometric_tail(&s_terms);
    let mu_tail = geometric_tail(&mu);
    let class = match (r_tail.converged(), s_tail.converged()) {
        (true, true) => BoundaryClass::Regular,
        (true, false) => BoundaryClass::Exit,
        _ => BoundaryClass::Other,
    };
    ScaleSpeed {
        c,
        dc,
        mu,
        c_inf,
        c_inf_bound,
        c_hat,
        scale_tail,
        r_partial: r_terms.iter().sum(),
        r_tail,
        s_partial: s_terms.iter().sum(),
        s_tail,
        mu_tail,
        class,
    }
}

pub fn classify_boundary(ss: &ScaleSpeed) -> BoundaryClass {
    ss.class
}

/// Where a point sits relative to the embedded levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bracket {
    /// `x > c_hat[0]`.
    Above,
    /// `c_hat[n+1] < x <= c_hat[n]`.
    Between(usize),
    /// `x` is at or below the lowest stored level.
    Below,
}

/// `c_hat[n]` for the stored levels `n < cap`; strictly decreasing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateEmbedding {
    c_hat: Vec<f64>,
    /// `c_hat[cap]`, the scale left beyond the last stored level.
    floor: f64,
}

impl StateEmbedding {
    pub fn from_levels(c_hat: Vec<f64>, floor: f64) -> Result<Self> {
        for w in c_hat.windows(2) {
            if !(w[0] > w[1]) {
                return Err(Error::InvalidMeasure("levels must strictly decrease".into()));
            }
        }
        Ok(Self { c_hat, floor })
    }

    pub fn len(&self) -> usize {
        self.c_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c_hat.is_empty()
    }

    pub fn c_hat(&self, n: usize) -> f64 {
        self.c_hat[n]
    }

    pub fn levels(&self) -> &[f64] {
        &self.c_hat
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// Xi: the level index of an exact embedded point.
    pub fn xi(&self, x: f64) -> Option<usize> {
        self.c_hat
            .binary_search_by(|c| x.partial_cmp(c).unwrap())
            .ok()
    }

    /// Inverse of Xi.
    pub fn xi_inv(&self, n: usize) -> f64 {
        self.c_hat[n]
    }

    pub fn bracket(&self, x: f64) -> Bracket {
        if x > self.c_hat[0] {
            return Bracket::Above;
        }
        // first index with c_hat < x
        let idx = self.c_hat.partition_point(|&c| c >= x);
        if idx >= self.c_hat.len() {
            Bracket::Below
        } else {
            Bracket::Between(idx - 1)
        }
    }

    /// Nearest point of `{c_hat[n]} ∪ {0}` and its distance.
    pub fn nearest(&self, x: f64) -> (Option<usize>, f64) {
        let idx = self.c_hat.partition_point(|&c| c >= x);
        let mut best = (None, x.abs());
        if idx > 0 {
            let d = (self.c_hat[idx - 1] - x).abs();
            if d < best.1 {
                best = (Some(idx - 1), d);
            }
        }
        if idx < self.c_hat.len() {
            let d = (self.c_hat[idx] - x).abs();
            if d < best.1 {
                best = (Some(idx), d);
            }
        }
        best
    }
}

pub fn state_embedding(ss: &ScaleSpeed) -> Result<StateEmbedding> {
    if ss.tail_divergent() || !ss.c_inf.is_finite() {
        return Err(Error::InfiniteScale);
    }
    let cap = ss.cap();
    StateEmbedding::from_levels(ss.c_hat[..cap].to_vec(), ss.c_hat[cap])
}

/// Whether a measure is genuinely finite or a truncation of an infinite one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MassKind {
    Finite,
    /// Atoms below `index` were cut; their `(1 ∧ x)`-mass is at most `tail_bound`.
    TruncatedInfinite { index: usize, tail_bound: f64 },
}

impl MassKind {
    pub fn tail_bound(&self) -> f64 {
        match self {
            MassKind::Finite => 0.0,
            MassKind::TruncatedInfinite { tail_bound, .. } => *tail_bound,
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, MassKind::Finite)
    }
}

/// Finitely many weighted atoms on `(0, inf)`, stored with decreasing locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicMeasure {
    atoms: Vec<(f64, f64)>,
    kind: MassKind,
}

impl Default for AtomicMeasure {
    fn default() -> Self {
        Self::empty()
    }
}

impl AtomicMeasure {
    pub fn empty() -> Self {
        Self {
            atoms: Vec::new(),
            kind: MassKind::Finite,
        }
    }

    pub fn new(atoms: Vec<(f64, f64)>, kind: MassKind) -> Result<Self> {
        for &(x, w) in &atoms {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::InvalidMeasure(format!("location {x} must be positive")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidMeasure(format!("weight {w} must be positive")));
            }
        }
        if let MassKind::TruncatedInfinite { tail_bound, .. } = kind {
            if !(tail_bound >= 0.0 && tail_bound.is_finite()) {
                return Err(Error::InvalidMeasure("tail bound must be finite".into()));
            }
        }
        let mut atoms = atoms;
        atoms.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
        for (x, w) in atoms {
            match merged.last_mut() {
                Some(last) if last.0 == x => last.1 += w,
                _ => merged.push((x, w)),
            }
        }
        Ok(Self { atoms: merged, kind })
    }

    pub fn point(x: f64, w: f64) -> Result<Self> {
        Self::new(vec![(x, w)], MassKind::Finite)
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn kind(&self) -> MassKind {
        self.kind
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.1).sum()
    }

    /// `∫ (1 ∧ x)` over the stored atoms.
    pub fn min1_mass(&self) -> f64 {
        self.atoms.iter().map(|&(x, w)| x.min(1.0) * w).sum()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.atoms.iter().map(|&(x, w)| w * f(x)).sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        let kind = match self.kind {
            MassKind::Finite => MassKind::Finite,
            MassKind::TruncatedInfinite { index, tail_bound } => MassKind::TruncatedInfinite {
                index,
                tail_bound: tail_bound * s,
            },
        };
        Self {
            atoms: self.atoms.iter().map(|&(x, w)| (x, w * s)).collect(),
            kind,
        }
    }
}

/// A distribution on `(0, inf) ∪ {cemetery}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstantLaw {
    pub atoms: AtomicMeasure,
    pub cemetery: f64,
}

impl InstantLaw {
    pub fn total(&self) -> f64 {
        self.atoms.total_mass() + self.cemetery
    }
}

/// Boundary parameters of a Feller Brownian motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FellerParams {
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: AtomicMeasure,
}

impl FellerParams {
    pub fn new(p1: f64, p2: f64, p3: f64, p4: AtomicMeasure) -> Result<Self> {
        for (name, v) in [("p1", p1), ("p2", p2), ("p3", p3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidFellerParams(format!("{name} = {v} must be nonnegative")));
            }
        }
        let fp = Self { p1, p2, p3, p4 };
        if fp.total() <= 0.0 {
            return Err(Error::InvalidFellerParams("all parameters vanish".into()));
        }
        if p2 == 0.0 && p3 == 0.0 && !fp.p4.is_empty() && fp.p4.kind().is_finite() {
            return Err(Error::InvalidFellerParams(
                "p2 = p3 = 0 needs an infinite (truncated) p4".into(),
            ));
        }
        Ok(fp)
    }

    pub fn simple(p1: f64, p2: f64, p3: f64) -> Result<Self> {
        Self::new(p1, p2, p3, AtomicMeasure::empty())
    }

    /// `p1 + p2 + p3 + ∫ (x ∧ 1) p4(dx)`.
    pub fn total(&self) -> f64 {
        self.p1 + self.p2 + self.p3 + self.p4.min1_mass()
    }

    pub fn normalized(&self) -> Self {
        let s = 1.0 / self.total();
        Self {
            p1: self.p1 * s,
            p2: self.p2 * s,
            p3: self.p3 * s,
            p4: self.p4.scaled(s),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            p1: self.p1 * s,
            p2: self.p2 * s,
            p3: self.p3 * s,
            p4: self.p4.scaled(s),
        }
    }

    pub fn is_killed_bm(&self) -> bool {
        self.p2 == 0.0 && self.p3 == 0.0 && self.p4.is_empty()
    }

    /// `p2 = 0`, `p3 > 0`, `|p4| = 0`: the trace is the minimal chain.
    pub fn is_minimal_case(&self) -> bool {
        self.p2 == 0.0 && self.p3 > 0.0 && self.p4.is_empty()
    }

    /// `p2 = 0`, `p3 > 0`, `|p4| < inf`: reflect, hold, then jump or die.
    pub fn is_doob_regime(&self) -> bool {
        self.p2 == 0.0 && self.p3 > 0.0 && self.p4.kind().is_finite()
    }
}

/// Boundary parameters of a birth-death chain at infinity. `nu[k]` is the
/// weight of level `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainParams {
    pub gamma: f64,
    pub beta: f64,
    pub nu: Vec<f64>,
    pub nu_kind: MassKind,
}

impl ChainParams {
    pub fn new(gamma: f64, beta: f64, nu: Vec<f64>, nu_kind: MassKind) -> Result<Self> {
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidChainParams(format!("{name} = {v} must be nonnegative")));
            }
        }
        if nu.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidChainParams("nu weights must be nonnegative".into()));
        }
        let cp = Self { gamma, beta, nu, nu_kind };
        if cp.gamma == 0.0 && cp.beta == 0.0 && cp.nu_total() == 0.0 {
            return Err(Error::InvalidChainParams("gamma, beta and nu all vanish".into()));
        }
        Ok(cp)
    }

    /// Sparse constructor: `(level, weight)` pairs.
    pub fn with_atoms(gamma: f64, beta: f64, atoms: &[(usize, f64)]) -> Result<Self> {
        let len = atoms.iter().map(|a| a.0 + 1).max().unwrap_or(0);
        let mut nu = vec![0.0; len];
        for &(k, w) in atoms {
            nu[k] += w;
        }
        Self::new(gamma, beta, nu, MassKind::Finite)
    }

    pub fn nu_total(&self) -> f64 {
        self.nu.iter().sum()
    }

    /// `beta = 0` and `nu = 0`: the chain killed at its first approach to infinity.
    pub fn is_minimal(&self) -> bool {
        self.beta == 0.0 && self.nu_total() == 0.0
    }

    /// `beta = 0` and `0 < |nu| < inf`.
    pub fn is_doob(&self) -> bool {
        self.beta == 0.0 && self.nu_total() > 0.0 && self.nu_kind.is_finite()
    }

    pub fn validate(&self, ss: &ScaleSpeed) -> Result<()> {
        if self.nu_total() > 0.0 {
            if !ss.r_tail.converged() {
                return Err(Error::InvalidChainParams("R diverges, nu must vanish".into()));
            }
            let series: f64 = self
                .nu
                .iter()
                .enumerate()
                .filter(|(k, w)| **w > 0.0 && *k < ss.cap())
                .map(|(k, w)| w * ss.nu_weight(k))
                .sum();
            if !series.is_finite() {
                return Err(Error::InvalidChainParams("integrability series diverges".into()));
            }
        }
        if self.beta > 0.0 && ss.class == BoundaryClass::Exit {
            return Err(Error::InvalidChainParams("beta must vanish at an exit boundary".into()));
        }
        Ok(())
    }

    /// `gamma + beta + sum min(c_hat_k, 1) nu_k`.
    pub fn total(&self, emb: &StateEmbedding) -> f64 {
        let jump: f64 = self
            .nu
            .iter()
            .enumerate()
            .map(|(k, w)| w * emb.c_hat(k.min(emb.len() - 1)).min(1.0))
            .sum();
        self.gamma + self.beta + jump
    }

    pub fn normalized(&self, emb: &StateEmbedding) -> Self {
        self.scaled(1.0 / self.total(emb))
    }

    pub fn scaled(&self, s: f64) -> Self {
        let nu_kind = match self.nu_kind {
            MassKind::Finite => MassKind::Finite,
            MassKind::TruncatedInfinite { index, tail_bound } => MassKind::TruncatedInfinite {
                index,
                tail_bound: tail_bound * s,
            },
        };
        Self {
            gamma: self.gamma * s,
            beta: self.beta * s,
            nu: self.nu.iter().map(|w| w * s).collect(),
            nu_kind,
        }
    }

    /// Instantaneous distribution of a Doob chain over levels, with the
    /// killing probability last.
    pub fn doob_distribution(&self) -> Option<(Vec<f64>, f64)> {
        if !self.is_doob() {
            return None;
        }
        let z = self.gamma + self.nu_total();
        Some((self.nu.iter().map(|w| w / z).collect(), self.gamma / z))
    }
}

/// Interpolation weights of a point `x` on its two neighbouring levels:
/// `(upper level n, weight on n, weight on n + 1)`, or everything on level 0
/// above the top.
pub fn level_split(x: f64, emb: &StateEmbedding) -> Result<(usize, f64, f64)> {
    match emb.bracket(x) {
        Bracket::Above => Ok((0, 1.0, 0.0)),
        Bracket::Between(n) => {
            if n + 1 >= emb.len() {
                return Err(Error::AtomBelowTruncation {
                    location: x,
                    lowest: emb.c_hat(emb.len() - 1),
                });
            }
            let hi = emb.c_hat(n);
            let lo = emb.c_hat(n + 1);
            let up = (x - lo) / (hi - lo);
            Ok((n, up, 1.0 - up))
        }
        Bracket::Below => {
            // exactly on the lowest level still allocates fully
            let last = emb.len() - 1;
            if x == emb.c_hat(last) {
                Ok((last, 1.0, 0.0))
            } else {
                Err(Error::AtomBelowTruncation {
                    location: x,
                    lowest: emb.c_hat(last),
                })
            }
        }
    }
}

/// Level weights: mass above the top level goes to level 0, an atom in
/// `(c_hat[n+1], c_hat[n]]` is split linearly between `n` and `n + 1`.
pub fn allocate_jump_measure(p4: &AtomicMeasure, emb: &StateEmbedding) -> Result<Vec<f64>> {
    let mut out = vec![0.0; emb.len()];
    for &(x, w) in p4.atoms() {
        let (n, up, _) = level_split(x, emb)?;
        let hi = w * up;
        out[n] += hi;
        if up < 1.0 {
            out[n + 1] += w - hi;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChainImage {
    Chain(ChainParams),
    /// `p2 = 0, p3 > 0, |p4| = 0`.
    Minimal,
}

pub fn chain_from_feller(fp: &FellerParams, emb: &StateEmbedding) -> Result<ChainImage> {
    if fp.is_minimal_case() {
        return Ok(ChainImage::Minimal);
    }
    let mut nu = allocate_jump_measure(&fp.p4, emb)?;
    while nu.last() == Some(&0.0) {
        nu.pop();
    }
    let nu_kind = match fp.p4.kind() {
        MassKind::Finite => MassKind::Finite,
        MassKind::TruncatedInfinite { tail_bound, .. } => MassKind::TruncatedInfinite {
            index: nu.len(),
            tail_bound,
        },
    };
    Ok(ChainImage::Chain(ChainParams::new(
        fp.p1,
        2.0 * fp.p2,
        nu,
        nu_kind,
    )?))
}

pub fn feller_from_chain(image: &ChainImage, emb: &StateEmbedding) -> Result<FellerParams> {
    let cp = match image {
        ChainImage::Minimal => return FellerParams::simple(0.0, 0.0, 1.0),
        ChainImage::Chain(cp) => cp,
    };
    if cp.nu.len() > emb.len() {
        return Err(Error::InvalidChainParams("nu extends beyond the stored levels".into()));
    }
    let atoms: Vec<(f64, f64)> = cp
        .nu
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(k, w)| (emb.c_hat(k), *w))
        .collect();
    let p4_kind = match cp.nu_kind {
        MassKind::Finite => MassKind::Finite,
        MassKind::TruncatedInfinite { tail_bound, .. } => MassKind::TruncatedInfinite {
            index: cp.nu.len(),
            tail_bound,
        },
    };
    let p4 = AtomicMeasure::new(atoms, p4_kind)?;
    if cp.is_minimal() {
        // gamma only: the chain killed at infinity is the trace of killed BM
        return FellerParams::simple(1.0, 0.0, 0.0);
    }
    if cp.is_doob() {
        let t = cp.gamma + p4.min1_mass();
        let s = 0.5 / t;
        return FellerParams::new(cp.gamma * s, 0.0, 0.5, p4.scaled(s));
    }
    Ok(FellerParams::new(cp.gamma, cp.beta / 2.0, 0.0, p4)?.normalized())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn q_geo_closed_forms() {
        let ss = compute_scale_speed(&BirthDeathMatrix::q_geo(60));
        assert!((ss.c[3] - 0.875).abs() < 1e-15);
        assert!((ss.mu[3] - 0.125).abs() < 1e-15);
        assert!((ss.c_inf - 1.0).abs() <= 2f64.powi(-59));
        assert_eq!(ss.class, BoundaryClass::Regular);
    }

    #[test]
    fn rejects_bad_rates() {
        let mut a = vec![0.0, 0.0, 1.0, 1.0];
        let b = vec![1.0; 4];
        assert_eq!(build_matrix(&a, &b, 4), Err(Error::NonPositiveRate(1)));
        a = vec![0.5, 1.0, 1.0, 1.0];
        assert_eq!(build_matrix(&a, &b, 4), Err(Error::NonzeroA0(0.5)));
        assert_eq!(build_matrix(&[0.0, 1.0], &[1.0, 1.0], 2), Err(Error::CapTooSmall(2)));
    }

    #[test]
    fn random_walk_has_infinite_scale() {
        let q = BirthDeathMatrix::geometric(1.0, 1.0, 1.0, 1.0, 200).unwrap();
        let ss = compute_scale_speed(&q);
        assert!(ss.tail_divergent());
        assert_eq!(ss.c_inf, f64::INFINITY);
        assert_eq!(ss.class, BoundaryClass::Other);
        assert_eq!(state_embedding(&ss).unwrap_err(), Error::InfiniteScale);
    }

    #[test]
    fn bracket_and_xi() {
        let emb = state_embedding(&compute_scale_speed(&BirthDeathMatrix::q_geo(20))).unwrap();
        assert_eq!(emb.bracket(2.0), Bracket::Above);
        assert_eq!(emb.bracket(1.0), Bracket::Between(0));
        assert_eq!(emb.bracket(0.4), Bracket::Between(1));
        assert_eq!(emb.bracket(0.25), Bracket::Between(2));
        assert_eq!(emb.xi(0.25), Some(2));
        assert_eq!(emb.xi(0.3), None);
        assert_eq!(emb.nearest(0.26), (Some(2), 0.010000000000000009));
    }

    #[test]
    fn allocation_spot_values() {
        let emb = state_embedding(&compute_scale_speed(&BirthDeathMatrix::q_geo(60))).unwrap();
        let p = allocate_jump_measure(&AtomicMeasure::point(0.4, 1.0).unwrap(), &emb).unwrap();
        assert!((p[1] - 0.6).abs() < 1e-15 && (p[2] - 0.4).abs() < 1e-15);
        let p = allocate_jump_measure(&AtomicMeasure::point(2.0, 1.0).unwrap(), &emb).unwrap();
        assert_eq!(p[0], 1.0);
        let p = allocate_jump_measure(&AtomicMeasure::point(0.125, 0.7).unwrap(), &emb).unwrap();
        assert_eq!(p[3], 0.7);
        assert_eq!(p.iter().sum::<f64>(), 0.7);
    }

    #[test]
    fn feller_params_guard_the_non_feller_corner() {
        let p4 = AtomicMeasure::point(0.4, 1.0).unwrap();
        assert!(FellerParams::new(0.0, 0.0, 0.0, p4.clone()).is_err());
        let trunc = AtomicMeasure::new(
            vec![(0.4, 1.0)],
            MassKind::TruncatedInfinite { index: 2, tail_bound: 0.1 },
        )
        .unwrap();
        assert!(FellerParams::new(0.0, 0.0, 0.0, trunc).is_ok());
        assert!(FellerParams::simple(1.0, 0.0, 0.0).unwrap().is_killed_bm());
    }
}
