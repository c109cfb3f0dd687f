//! Experiment configuration: one TOML document per experiment. Unknown keys
//! are rejected everywhere.

use serde::{Deserialize, Serialize};

use crate::bd_core::{AtomicMeasure, BirthDeathMatrix, ChainParams, FellerParams, InstantLaw, MassKind};
use crate::error::{Error, Result};

fn default_seed() -> u64 {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Worker threads; results do not depend on it.
    pub threads: Option<usize>,
    /// Exit with a failure code when a declared check fails.
    #[serde(default = "yes")]
    pub enforce_checks: bool,
    #[serde(default)]
    pub matrix: MatrixSpec,
    pub feller: Option<FellerSpec>,
    pub chain: Option<ChainSpec>,
    pub doob: Option<DoobSpec>,
    #[serde(default)]
    pub sim: SimSpec,
    #[serde(default)]
    pub resolvent: ResolventSpec,
    #[serde(default)]
    pub cross_validate: CrossValidateSpec,
    #[serde(default)]
    pub approx: ApproxSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum MatrixSpec {
    /// `b_0 = 1`, `a_k = 2*4^(k-1)`, `b_k = 4^k`.
    QGeo { cap: usize },
    Geometric {
        a_scale: f64,
        a_ratio: f64,
        b_scale: f64,
        b_ratio: f64,
        cap: usize,
    },
    /// Rates listed from `k = 0`; `a[0]` must be 0.
    Explicit { a: Vec<f64>, b: Vec<f64> },
}

impl Default for MatrixSpec {
    fn default() -> Self {
        MatrixSpec::QGeo { cap: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    pub at: f64,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailSpec {
    /// Index of the first dropped atom.
    pub index: usize,
    /// Bound on the dropped `∫ (x ∧ 1)` mass.
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FellerSpec {
    pub p1: f64,
    pub p2: f64,
    #[serde(default)]
    pub p3: f64,
    #[serde(default)]
    pub p4: Vec<Atom>,
    /// Marks `p4` as a truncation of an infinite measure.
    pub p4_tail: Option<TailSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelAtom {
    pub level: usize,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub gamma: f64,
    pub beta: f64,
    #[serde(default)]
    pub nu: Vec<LevelAtom>,
}

/// A point of `(0, inf)` or the string `"cemetery"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Location {
    At(f64),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawPoint {
    pub at: Location,
    pub mass: f64,
}

/// Instantaneous distribution of a Doob Brownian motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoobSpec {
    pub lambda: Vec<LawPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorSpec {
    Band,
    Bridge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSpec {
    pub dt: f64,
    pub horizon: f64,
    /// Local-time bandwidth; `sqrt(dt)` when absent.
    pub eps: Option<f64>,
    pub paths: usize,
    pub x0: f64,
    pub estimator: EstimatorSpec,
    /// Levels tracked on grid paths.
    pub level_cap: usize,
    /// Chain-time spacing for sampled traces.
    pub chain_dt: f64,
    pub exact_depth: usize,
    pub discount_cutoff: f64,
    /// Paths written to the path and trace dumps.
    pub dump: usize,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            dt: 1e-4,
            horizon: 1.0,
            eps: None,
            paths: 1000,
            x0: 0.0,
            estimator: EstimatorSpec::Bridge,
            level_cap: 12,
            chain_dt: 1e-3,
            exact_depth: 2,
            discount_cutoff: 1e-4,
            dump: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResolventSpec {
    pub alphas: Vec<f64>,
    /// Truncation size of the chain resolvent.
    pub n: usize,
    /// Rows and columns reported: `i, j <= rows`.
    pub rows: usize,
    /// Start points for the Brownian resolvents, `h(x) = e^{-x}`.
    pub x: Vec<f64>,
}

impl Default for ResolventSpec {
    fn default() -> Self {
        Self {
            alphas: vec![0.5, 1.0, 2.0],
            n: 200,
            rows: 10,
            x: vec![0.0, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossValidateSpec {
    pub case: String,
    pub alphas: Vec<f64>,
    pub starts: Vec<usize>,
    pub jmax: usize,
    pub n_levels: usize,
    /// Also compare against `beta = p2` and expect a visible failure.
    pub negative_control: bool,
}

impl Default for CrossValidateSpec {
    fn default() -> Self {
        Self {
            case: "custom".into(),
            alphas: vec![0.5, 1.0],
            starts: vec![0, 1, 2, 3],
            jmax: 3,
            n_levels: 200,
            negative_control: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApproxSpec {
    /// `lambda^(n)` for `n = 0..=levels`.
    pub levels: usize,
    /// `(n, m)` pairs for the recursion check, `n < m <= levels`.
    pub pairs: Vec<(usize, usize)>,
    pub rho_levels: Vec<usize>,
    pub rho_t: f64,
    pub rho_paths: usize,
    /// Relative tolerance of the recovery check.
    pub recovery_tol: f64,
}

impl Default for ApproxSpec {
    fn default() -> Self {
        Self {
            levels: 5,
            pairs: vec![(0, 1), (1, 2), (1, 3), (2, 4), (3, 5)],
            rho_levels: (2..=12).collect(),
            rho_t: 1.0,
            rho_paths: 200,
            recovery_tol: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Range checks that the schema cannot express.
    pub fn validate(&self) -> Result<()> {
        let s = &self.sim;
        if !(s.dt > 0.0) || !(s.horizon > 0.0) || !(s.chain_dt > 0.0) {
            return Err(bad("sim.dt, sim.horizon and sim.chain_dt must be positive"));
        }
        if s.eps.is_some_and(|e| !(e > 0.0)) {
            return Err(bad("sim.eps must be positive"));
        }
        if s.paths < 2 {
            return Err(bad("sim.paths must be at least 2"));
        }
        if !(s.x0 >= 0.0) {
            return Err(bad("sim.x0 must be >= 0"));
        }
        if !(s.discount_cutoff > 0.0 && s.discount_cutoff < 1.0) {
            return Err(bad("sim.discount_cutoff must lie in (0, 1)"));
        }
        let positive = |name: &str, v: &[f64]| {
            if v.is_empty() || v.iter().any(|a| !(*a > 0.0)) {
                Err(bad(format!("{name} must be a nonempty list of positive numbers")))
            } else {
                Ok(())
            }
        };
        positive("resolvent.alphas", &self.resolvent.alphas)?;
        positive("cross_validate.alphas", &self.cross_validate.alphas)?;
        if self.resolvent.x.iter().any(|x| !(*x >= 0.0)) {
            return Err(bad("resolvent.x must be >= 0"));
        }
        let a = &self.approx;
        for &(n, m) in &a.pairs {
            if !(n <= m && m <= a.levels) {
                return Err(bad(format!("approx.pairs: need n <= m <= levels, got ({n}, {m})")));
            }
        }
        if !(a.rho_t > 0.0) || a.rho_paths < 2 {
            return Err(bad("approx.rho_t must be positive and approx.rho_paths >= 2"));
        }
        if self.threads == Some(0) {
            return Err(bad("threads must be at least 1"));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Result<BirthDeathMatrix> {
        match &self.matrix {
            MatrixSpec::QGeo { cap } => BirthDeathMatrix::geometric(2.0, 4.0, 1.0, 4.0, *cap),
            MatrixSpec::Geometric {
                a_scale,
                a_ratio,
                b_scale,
                b_ratio,
                cap,
            } => BirthDeathMatrix::geometric(*a_scale, *a_ratio, *b_scale, *b_ratio, *cap),
            MatrixSpec::Explicit { a, b } => BirthDeathMatrix::new(a, b, a.len().min(b.len())),
        }
        .map_err(|e| bad(format!("matrix: {e}")))
    }

    pub fn feller(&self) -> Result<FellerParams> {
        let f = self.feller.as_ref().ok_or_else(|| bad("missing [feller] section"))?;
        let kind = match &f.p4_tail {
            None => MassKind::Finite,
            Some(t) => MassKind::TruncatedInfinite {
                index: t.index,
                tail_bound: t.bound,
            },
        };
        let p4 = AtomicMeasure::new(f.p4.iter().map(|a| (a.at, a.mass)).collect(), kind)
            .map_err(|e| bad(format!("feller.p4: {e}")))?;
        FellerParams::new(f.p1, f.p2, f.p3, p4).map_err(|e| bad(format!("feller: {e}")))
    }

    pub fn chain(&self) -> Result<Option<ChainParams>> {
        let Some(c) = &self.chain else {
            return Ok(None);
        };
        let atoms: Vec<(usize, f64)> = c.nu.iter().map(|a| (a.level, a.mass)).collect();
        ChainParams::with_atoms(c.gamma, c.beta, &atoms)
            .map(Some)
            .map_err(|e| bad(format!("chain: {e}")))
    }

    pub fn doob(&self) -> Result<Option<InstantLaw>> {
        let Some(d) = &self.doob else {
            return Ok(None);
        };
        let mut atoms = Vec::new();
        let mut cemetery = 0.0;
        for p in &d.lambda {
            match &p.at {
                Location::At(x) => atoms.push((*x, p.mass)),
                Location::Named(s) if s == "cemetery" => cemetery += p.mass,
                Location::Named(s) => return Err(bad(format!("doob.lambda: unknown location {s:?}"))),
            }
        }
        let atoms = AtomicMeasure::new(atoms, MassKind::Finite).map_err(|e| bad(format!("doob.lambda: {e}")))?;
        let law = InstantLaw { atoms, cemetery };
        if (law.total() - 1.0).abs() > 1e-9 {
            return Err(bad(format!("doob.lambda must have total mass 1, got {}", law.total())));
        }
        Ok(Some(law))
    }
}
