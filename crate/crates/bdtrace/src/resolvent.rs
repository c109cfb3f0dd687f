//! Analytic resolvents: the minimal chain resolvent, the chain resolvent
//! with boundary parameters, the killed Brownian kernel and the Feller and
//! Doob Brownian resolvents, plus residual checks.

use crate::bd_core::{
    BirthDeathMatrix, ChainImage, ChainParams, FellerParams, InstantLaw, ScaleSpeed,
};
use crate::error::{Error, Result};
use crate::quad::{integrate, integrate_to_inf};

/// Factored tridiagonal matrix (Thomas algorithm).
#[derive(Debug, Clone)]
pub struct Tridiag {
    sub: Vec<f64>,
    cp: Vec<f64>,
    denom: Vec<f64>,
}

impl Tridiag {
    /// `sub[i]` multiplies `x[i-1]` in row `i`, `sup[i]` multiplies `x[i+1]`.
    pub fn factor(sub: &[f64], diag: &[f64], sup: &[f64]) -> Result<Self> {
        let n = diag.len();
        if sub.len() != n || sup.len() != n {
            return Err(Error::DimensionMismatch(sub.len().min(sup.len()), n));
        }
        let mut cp = vec![0.0; n];
        let mut denom = vec![0.0; n];
        for i in 0..n {
            let d = if i == 0 { diag[0] } else { diag[i] - sub[i] * cp[i - 1] };
            if d == 0.0 || !d.is_finite() {
                return Err(Error::SingularSystem(i));
            }
            denom[i] = d;
            cp[i] = sup[i] / d;
        }
        Ok(Self {
            sub: sub.to_vec(),
            cp,
            denom,
        })
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.denom.len();
        let mut x = vec![0.0; n];
        for i in 0..n {
            let prev = if i == 0 { 0.0 } else { self.sub[i] * x[i - 1] };
            x[i] = (rhs[i] - prev) / self.denom[i];
        }
        for i in (0..n.saturating_sub(1)).rev() {
            x[i] -= self.cp[i] * x[i + 1];
        }
        x
    }
}

/// `(alpha I - Q_N)^{-1}` with level `N` absorbing, plus `alpha * row sums`.
fn minimal_block(q: &BirthDeathMatrix, alpha: f64, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let sub: Vec<f64> = (0..n).map(|i| -q.a(i)).collect();
    let diag: Vec<f64> = (0..n).map(|i| alpha + q.q(i)).collect();
    let sup: Vec<f64> = (0..n).map(|i| -q.b(i)).collect();
    let t = Tridiag::factor(&sub, &diag, &sup)?;
    let mut phi = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = t.solve(&e);
        e[j] = 0.0;
        for i in 0..n {
            phi[i * n + j] = col[i];
        }
    }
    let s = t.solve(&vec![alpha; n]);
    Ok((phi, s))
}

#[derive(Debug, Clone)]
pub struct MinimalResolvent {
    pub alpha: f64,
    pub n: usize,
    phi: Vec<f64>,
    u: Vec<f64>,
    one_minus_u: Vec<f64>,
    /// Largest entrywise change against a second truncation level.
    pub trunc_err: f64,
}

impl MinimalResolvent {
    pub fn phi(&self, i: usize, j: usize) -> f64 {
        self.phi[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.phi[i * self.n..(i + 1) * self.n]
    }

    pub fn u(&self, i: usize) -> f64 {
        self.u[i]
    }

    pub fn one_minus_u(&self, i: usize) -> f64 {
        self.one_minus_u[i]
    }

    /// `max_i |u(i) - (1 - alpha sum_j phi_ij)|` over `i < rows`.
    pub fn u_identity_residual(&self, rows: usize) -> f64 {
        (0..rows.min(self.n))
            .map(|i| {
                let s: f64 = self.row(i).iter().sum();
                (self.u[i] - (1.0 - self.alpha * s)).abs()
            })
            .fold(0.0, f64::max)
    }
}

pub fn phi_minimal(q: &BirthDeathMatrix, _ss: &ScaleSpeed, alpha: f64, n: usize) -> Result<MinimalResolvent> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidChainParams(format!("alpha = {alpha} must be positive")));
    }
    if n < 2 || n > q.cap() {
        return Err(Error::DimensionMismatch(n, q.cap()));
    }
    let (phi, s) = minimal_block(q, alpha, n)?;
    // Compare against a second truncation; entries only grow with the level.
    let other = if 2 * n <= q.cap() {
        2 * n
    } else if n < q.cap() {
        q.cap()
    } else {
        n / 2
    };
    let (phi2, s2) = minimal_block(q, alpha, other)?;
    let m = n.min(other);
    let mut trunc_err: f64 = 0.0;
    for i in 0..m {
        for j in 0..m {
            trunc_err = trunc_err.max((phi[i * n + j] - phi2[i * other + j]).abs());
        }
        trunc_err = trunc_err.max((s[i] - s2[i]).abs());
    }
    Ok(MinimalResolvent {
        alpha,
        n,
        phi,
        u: s.iter().map(|v| 1.0 - v).collect(),
        one_minus_u: s,
        trunc_err,
    })
}

/// Dense `N x N` chain resolvent.
#[derive(Debug, Clone)]
pub struct ChainResolvent {
    pub alpha: f64,
    pub n: usize,
    psi: Vec<f64>,
    /// Truncation error of the minimal part plus dropped tails of `nu` and `mu`.
    pub err: f64,
}

impl ChainResolvent {
    pub fn psi(&self, i: usize, j: usize) -> f64 {
        self.psi[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.psi[i * self.n..(i + 1) * self.n]
    }

    /// `F(k) = sum_j psi_kj h_j`.
    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|k| {
                self.row(k)
                    .iter()
                    .zip(h)
                    .map(|(p, v)| p * v)
                    .sum()
            })
            .collect()
    }

    pub fn from_minimal(mr: &MinimalResolvent) -> Self {
        Self {
            alpha: mr.alpha,
            n: mr.n,
            psi: mr.phi.clone(),
            err: mr.trunc_err,
        }
    }
}

pub fn psi_chain(mr: &MinimalResolvent, ss: &ScaleSpeed, cp: &ChainParams) -> Result<ChainResolvent> {
    let n = mr.n;
    let alpha = mr.alpha;
    let kmax = cp.nu.len().min(n);
    let mut num = vec![0.0; n];
    for (k, &w) in cp.nu[..kmax].iter().enumerate() {
        if w > 0.0 {
            for (j, v) in num.iter_mut().enumerate() {
                *v += w * mr.phi(k, j);
            }
        }
    }
    let mut mu_u = 0.0;
    for j in 0..n {
        num[j] += cp.beta * ss.mu[j] * mr.u(j);
        mu_u += ss.mu[j] * mr.u(j);
    }
    let den = cp.gamma
        + cp.nu[..kmax]
            .iter()
            .enumerate()
            .map(|(k, w)| w * mr.one_minus_u(k))
            .sum::<f64>()
        + cp.beta * alpha * mu_u;
    if den <= 0.0 {
        return Err(Error::ZeroDenominator);
    }
    let mut psi = mr.phi.clone();
    for i in 0..n {
        let ui = mr.u(i);
        for j in 0..n {
            psi[i * n + j] += ui * num[j] / den;
        }
    }
    let mu_tail = if ss.mu.len() > n {
        ss.mu[n..].iter().sum::<f64>() + ss.mu_tail.tail()
    } else {
        ss.mu_tail.tail()
    };
    let nu_dropped: f64 = cp.nu.iter().skip(n).sum::<f64>() + cp.nu_kind.tail_bound();
    let scale = num.iter().fold(0.0_f64, |m, v| m.max(*v)) / den;
    let err = mr.trunc_err * (1.0 + scale)
        + scale * (cp.beta * alpha * mu_tail + nu_dropped) / den
        + cp.beta * mu_tail / den;
    Ok(ChainResolvent { alpha, n, psi, err })
}

/// Chain resolvent for either image of the parameter map.
pub fn psi_from_image(mr: &MinimalResolvent, ss: &ScaleSpeed, image: &ChainImage) -> Result<ChainResolvent> {
    match image {
        ChainImage::Minimal => Ok(ChainResolvent::from_minimal(mr)),
        ChainImage::Chain(cp) if cp.is_minimal() => Ok(ChainResolvent::from_minimal(mr)),
        ChainImage::Chain(cp) => psi_chain(mr, ss, cp),
    }
}

/// `max |A - B + (alpha - beta) A B|` over two resolvent matrices.
pub fn resolvent_identity_residual(a: &ChainResolvent, b: &ChainResolvent) -> Result<f64> {
    if a.n != b.n {
        return Err(Error::DimensionMismatch(a.n, b.n));
    }
    let n = a.n;
    let d = a.alpha - b.alpha;
    if d == 0.0 {
        return Ok((0..n * n).map(|k| (a.psi[k] - b.psi[k]).abs()).fold(0.0, f64::max));
    }
    let mut worst: f64 = 0.0;
    let mut prod = vec![0.0; n];
    for i in 0..n {
        prod.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..n {
            let aik = a.psi(i, k);
            if aik == 0.0 {
                continue;
            }
            for (j, p) in prod.iter_mut().enumerate() {
                *p += aik * b.psi(k, j);
            }
        }
        for j in 0..n {
            worst = worst.max((a.psi(i, j) - b.psi(i, j) + d * prod[j]).abs());
        }
    }
    Ok(worst)
}

/// Polynomial extrapolation to 0 through `(xs, ys)` (Neville).
pub fn neville_at_zero(xs: &[f64], ys: &[f64]) -> f64 {
    let mut p = ys.to_vec();
    let n = xs.len();
    for m in 1..n {
        for i in 0..n - m {
            p[i] = (xs[i + m] * p[i] - xs[i] * p[i + 1]) / (xs[i + m] - xs[i]);
        }
    }
    p[0]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainBcResidual {
    pub residual: f64,
    pub f_inf: f64,
    pub f_plus_inf: f64,
    /// Extrapolation uncertainty propagated through the boundary condition.
    pub uncertainty: f64,
}

const EXTRAP_POINTS: usize = 8;

/// Value at `c_hat = 0` from `EXTRAP_POINTS` samples, with the change
/// against one fewer point as error.
fn extrapolate(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let full = neville_at_zero(xs, ys);
    let fewer = neville_at_zero(&xs[1..], &ys[1..]);
    (full, (full - fewer).abs())
}

pub fn residual_chain_bc(
    psi: &ChainResolvent,
    ss: &ScaleSpeed,
    cp: &ChainParams,
    h: &[f64],
) -> Result<ChainBcResidual> {
    let f = psi.apply(h);
    let c_hat = &ss.c_hat;
    let k0 = (0..psi.n)
        .find(|&k| c_hat[k] <= 1e-2 * c_hat[0])
        .ok_or_else(|| Error::TailNotConverged("no level below 1% of c_hat_0".into()))?;
    if k0 + EXTRAP_POINTS + 1 > psi.n {
        return Err(Error::TailNotConverged(format!(
            "need {} levels from {k0}, have {}",
            EXTRAP_POINTS + 1,
            psi.n
        )));
    }
    let ks = k0..k0 + EXTRAP_POINTS;
    let xs: Vec<f64> = ks.clone().map(|k| c_hat[k]).collect();
    let ys: Vec<f64> = ks.clone().map(|k| f[k]).collect();
    let (f_inf, f_err) = extrapolate(&xs, &ys);
    let xp: Vec<f64> = ks.clone().map(|k| 0.5 * (c_hat[k] + c_hat[k + 1])).collect();
    let yp: Vec<f64> = ks.map(|k| (f[k + 1] - f[k]) / ss.dc[k]).collect();
    let (fp_inf, fp_err) = extrapolate(&xp, &yp);
    if !f_inf.is_finite() || !fp_inf.is_finite() {
        return Err(Error::TailNotConverged("non-finite extrapolation".into()));
    }
    let jump: f64 = cp
        .nu
        .iter()
        .take(psi.n)
        .enumerate()
        .map(|(k, w)| (f_inf - f[k]) * w)
        .sum();
    let residual = (0.5 * cp.beta * fp_inf + jump + cp.gamma * f_inf).abs();
    let uncertainty =
        0.5 * cp.beta * fp_err + (cp.nu_total() + cp.gamma) * f_err + cp.nu_kind.tail_bound() * 2.0 * f_inf.abs();
    Ok(ChainBcResidual {
        residual,
        f_inf,
        f_plus_inf: fp_inf,
        uncertainty,
    })
}

/// Green function of Brownian motion killed at 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KilledKernel {
    pub alpha: f64,
    /// `sqrt(2 alpha)`.
    pub k: f64,
    /// Absolute quadrature tolerance.
    pub tol: f64,
    /// Integration cutoff for the unbounded direction.
    pub x_max: f64,
}

pub type Func<'a> = &'a dyn Fn(f64) -> f64;

impl KilledKernel {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            k: (2.0 * alpha).sqrt(),
            tol: 1e-12,
            x_max: 60.0,
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    /// `u_-(x) = sinh(kx)`, `u_+(x) = e^{-kx}`.
    pub fn u_minus(&self, x: f64) -> f64 {
        (self.k * x).sinh()
    }

    pub fn u_plus(&self, x: f64) -> f64 {
        (-self.k * x).exp()
    }

    pub fn wronskian(&self) -> f64 {
        self.k / 2.0
    }

    /// `E_x e^{-alpha tau_0}`.
    pub fn e_tau0(&self, x: f64) -> f64 {
        (-self.k * x).exp()
    }

    pub fn density(&self, x: f64, y: f64) -> f64 {
        if self.alpha == 0.0 {
            return 2.0 * x.min(y);
        }
        let lo = x.min(y);
        (-self.k * (x - y).abs()).exp() * -(-2.0 * self.k * lo).exp_m1() / self.k
    }

    /// `G^0_alpha h(x)`; quadrature error in the second slot.
    pub fn apply(&self, h: Func, x: f64) -> Result<(f64, f64)> {
        if x <= 0.0 {
            return Ok((0.0, 0.0));
        }
        if self.alpha == 0.0 {
            return g0_potential(h, x, self.tol, self.x_max);
        }
        let g = |y: f64| self.density(x, y) * h(y);
        let left = integrate(&g, 0.0, x.min(self.x_max), &[], 0.5 * self.tol)?;
        let right = integrate_to_inf(&g, x, &[], 0.5 * self.tol, self.x_max.max(x + 1.0))?;
        Ok((left.value + right.value, left.err + right.err))
    }

    /// `∫ e^{-ky} h(y) dy`.
    pub fn laplace(&self, h: Func) -> Result<(f64, f64)> {
        let q = integrate_to_inf(&|y: f64| (-self.k * y).exp() * h(y), 0.0, &[], self.tol, self.x_max)?;
        Ok((q.value, q.err))
    }
}

/// `G^0 h(x) = 2 ∫ (x ∧ y) h(y) dy`.
pub fn g0_potential(h: Func, x: f64, tol: f64, x_max: f64) -> Result<(f64, f64)> {
    let left = integrate(&|y: f64| 2.0 * y * h(y), 0.0, x, &[], 0.5 * tol)?;
    let right = integrate_to_inf(&|y: f64| 2.0 * x * h(y), x, &[], 0.5 * tol, x_max.max(x + 1.0))?;
    Ok((left.value + right.value, left.err + right.err))
}

pub fn g0_apply(kernel: &KilledKernel, h: Func, x: f64) -> Result<f64> {
    kernel.apply(h, x).map(|r| r.0)
}

/// Sup of `|h|` over a coarse grid, for tail-bound propagation.
fn sup_estimate(h: Func, x_max: f64) -> f64 {
    (0..=400)
        .map(|i| h(x_max * i as f64 / 400.0).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolventValue {
    pub value: f64,
    /// Quadrature error plus any truncated-measure tail contribution.
    pub err: f64,
}

/// `G_alpha h(0)`.
pub fn feller_resolvent_at_zero(fp: &FellerParams, kernel: &KilledKernel, h: Func) -> Result<ResolventValue> {
    let k = kernel.k;
    let alpha = kernel.alpha;
    let (lap, lap_err) = kernel.laplace(h)?;
    let mut num = 2.0 * fp.p2 * lap + fp.p3 * h(0.0);
    let mut num_err = 2.0 * fp.p2 * lap_err;
    let mut den = fp.p1 + k * fp.p2 + alpha * fp.p3;
    for &(x, w) in fp.p4.atoms() {
        let (g, e) = kernel.apply(h, x)?;
        num += w * g;
        num_err += w * e;
        den += w * -(-k * x).exp_m1();
    }
    if den <= 0.0 {
        return Err(Error::ZeroDenominator);
    }
    let tail = fp.p4.kind().tail_bound();
    let value = num / den;
    let mut err = num_err / den;
    if tail > 0.0 {
        // dropped atoms x < 1 contribute at most x*k*tail to the denominator
        // and x*sup|h|*k/alpha to the numerator
        let s = sup_estimate(h, kernel.x_max);
        err += tail * k * (s / alpha + value.abs()) / den;
    }
    Ok(ResolventValue { value, err })
}

/// `G_alpha h(x) = G^0_alpha h(x) + G_alpha h(0) e^{-kx}`.
pub fn feller_resolvent(fp: &FellerParams, kernel: &KilledKernel, h: Func, x: f64) -> Result<ResolventValue> {
    let g0 = feller_resolvent_at_zero(fp, kernel, h)?;
    let (gx, e) = kernel.apply(h, x)?;
    Ok(ResolventValue {
        value: gx + g0.value * kernel.e_tau0(x),
        err: e + g0.err,
    })
}

/// Resolvent of Doob's Brownian motion with instantaneous law `lambda`.
pub fn doob_resolvent(lambda: &InstantLaw, kernel: &KilledKernel, h: Func, x: f64) -> Result<ResolventValue> {
    let total = lambda.total();
    if !(total > 0.0) {
        return Err(Error::InvalidMeasure("instantaneous law has no mass".into()));
    }
    let mut num = 0.0;
    let mut num_err = 0.0;
    let mut ret = 0.0;
    for &(y, w) in lambda.atoms.atoms() {
        let (g, e) = kernel.apply(h, y)?;
        num += w / total * g;
        num_err += w / total * e;
        ret += w / total * kernel.e_tau0(y);
    }
    let (gx, e) = kernel.apply(h, x)?;
    if num == 0.0 {
        return Ok(ResolventValue { value: gx, err: e });
    }
    let c = num / (1.0 - ret);
    Ok(ResolventValue {
        value: gx + kernel.e_tau0(x) * c,
        err: e + num_err / (1.0 - ret),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FellerBcResidual {
    /// Residual with finite-difference derivatives at the boundary.
    pub residual: f64,
    /// Residual with the closed-form derivatives.
    pub residual_analytic: f64,
    pub f0: f64,
    pub f1_fd: f64,
    pub f2_fd: f64,
    pub f1_exact: f64,
    pub f2_exact: f64,
}

/// Boundary generator residual of `f = G_alpha h`.
pub fn residual_feller_bc(fp: &FellerParams, kernel: &KilledKernel, h: Func) -> Result<FellerBcResidual> {
    let g0 = feller_resolvent_at_zero(fp, kernel, h)?.value;
    let f = |x: f64| -> Result<f64> {
        if x == 0.0 {
            return Ok(g0);
        }
        Ok(kernel.apply(h, x)?.0 + g0 * kernel.e_tau0(x))
    };
    // one-sided three-point first derivative
    let s1 = 1e-3;
    let f1_fd = (-3.0 * g0 + 4.0 * f(s1)? - f(2.0 * s1)?) / (2.0 * s1);
    // one-sided second difference, Richardson on two steps
    let d2 = |s: f64| -> Result<f64> {
        Ok((2.0 * g0 - 5.0 * f(s)? + 4.0 * f(2.0 * s)? - f(3.0 * s)?) / (s * s))
    };
    let s2 = 1e-2;
    let f2_fd = (4.0 * d2(0.5 * s2)? - d2(s2)?) / 3.0;
    let (lap, _) = kernel.laplace(h)?;
    let f1_exact = 2.0 * lap - kernel.k * g0;
    let f2_exact = 2.0 * (kernel.alpha * g0 - h(0.0));
    let mut jump = 0.0;
    for &(x, w) in fp.p4.atoms() {
        jump += w * (g0 - f(x)?);
    }
    let lhs = |f1: f64, f2: f64| (fp.p1 * g0 - fp.p2 * f1 + 0.5 * fp.p3 * f2 + jump).abs();
    Ok(FellerBcResidual {
        residual: lhs(f1_fd, f2_fd),
        residual_analytic: lhs(f1_exact, f2_exact),
        f0: g0,
        f1_fd,
        f2_fd,
        f1_exact,
        f2_exact,
    })
}

/// `m = (p3 / 2 p2) delta_0 + Lebesgue`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymmetricMeasure {
    pub atom_at_zero: f64,
}

impl SymmetricMeasure {
    pub fn from_params(fp: &FellerParams) -> Result<Self> {
        if fp.p2 <= 0.0 {
            return Err(Error::DegenerateMeasure("symmetric measure needs p2 > 0".into()));
        }
        Ok(Self {
            atom_at_zero: fp.p3 / (2.0 * fp.p2),
        })
    }
}

/// `|∫ G h1 h2 dm - ∫ h1 G h2 dm|`.
pub fn symmetry_residual(fp: &FellerParams, kernel: &KilledKernel, h1: Func, h2: Func) -> Result<f64> {
    let m = SymmetricMeasure::from_params(fp)?;
    let inner = kernel.with_tol(kernel.tol * 0.1);
    let pair = |a: Func, b: Func| -> Result<f64> {
        let ga0 = feller_resolvent_at_zero(fp, &inner, a)?.value;
        let cell = std::cell::RefCell::new(None);
        let integrand = |x: f64| -> f64 {
            match inner.apply(a, x) {
                Ok((g, _)) => (g + ga0 * inner.e_tau0(x)) * b(x),
                Err(e) => {
                    cell.borrow_mut().get_or_insert(e);
                    0.0
                }
            }
        };
        let q = integrate_to_inf(&integrand, 0.0, &[], kernel.tol, kernel.x_max)?;
        if let Some(e) = cell.into_inner() {
            return Err(e);
        }
        Ok(m.atom_at_zero * ga0 * b(0.0) + q.value)
    };
    Ok((pair(h1, h2)? - pair(h2, h1)?).abs())
}
