//! Domain types for the disordered zero-range process: site rates, jump
//! kernels, service-rate functions and particle configurations.
//!
//! A zero-range process on `Z` moves particles between lattice sites. A
//! particle leaves site `x` at rate `alpha(x) * g(n)` where `n` is the
//! occupancy of `x`: the environment `alpha` carries the quenched disorder,
//! the rate function `g` the interaction. Displacements are drawn from a
//! jump kernel `p(z)`.

use crate::error::{Error, Result};
use crate::numerics::mix_seed_site;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Inclusive lattice interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub lo: i64,
    pub hi: i64,
}

impl Window {
    pub fn new(lo: i64, hi: i64) -> Self {
        assert!(lo <= hi, "window bounds out of order: [{lo}, {hi}]");
        Self { lo, hi }
    }

    pub fn len(&self) -> usize {
        (self.hi - self.lo + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, site: i64) -> bool {
        site >= self.lo && site <= self.hi
    }

    pub fn index(&self, site: i64) -> usize {
        debug_assert!(self.contains(site));
        (site - self.lo) as usize
    }

    pub fn sites(&self) -> impl Iterator<Item = i64> {
        self.lo..=self.hi
    }
}

/// Occupancy of one site: a particle count or an infinite reservoir.
///
/// Reservoir sites absorb and emit particles without changing; they realize
/// source/sink boundary conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Occupancy {
    Finite(u64),
    Infinite,
}

impl Occupancy {
    pub fn is_infinite(&self) -> bool {
        matches!(self, Occupancy::Infinite)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Occupancy::Finite(0))
    }

    pub fn finite(&self) -> Option<u64> {
        match self {
            Occupancy::Finite(n) => Some(*n),
            Occupancy::Infinite => None,
        }
    }

    /// One particle leaves. An infinite reservoir is unchanged.
    pub fn depart(self) -> Self {
        match self {
            Occupancy::Finite(n) => {
                debug_assert!(n > 0, "departure from empty site");
                Occupancy::Finite(n - 1)
            }
            Occupancy::Infinite => Occupancy::Infinite,
        }
    }

    /// One particle arrives. An infinite reservoir is unchanged.
    pub fn arrive(self) -> Self {
        match self {
            Occupancy::Finite(n) => Occupancy::Finite(n + 1),
            Occupancy::Infinite => Occupancy::Infinite,
        }
    }
}

impl PartialOrd for Occupancy {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp_occ(other))
    }
}

impl Occupancy {
    fn cmp_occ(&self, other: &Self) -> std::cmp::Ordering {
        use std::cmp::Ordering::*;
        match (self, other) {
            (Occupancy::Infinite, Occupancy::Infinite) => Equal,
            (Occupancy::Infinite, _) => Greater,
            (_, Occupancy::Infinite) => Less,
            (Occupancy::Finite(a), Occupancy::Finite(b)) => a.cmp(b),
        }
    }
}

/// Nondecreasing service-rate table with `g(0) = 0 < g(1)` and limit 1.
///
/// The table stores `g(0..=N)`; beyond the truncation index the rate equals
/// the limit value exactly, so one-site partition sums have exactly
/// geometric tails. The gap `1 - g(N)` is recorded as the truncation
/// tolerance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFunction {
    values: Vec<f64>,
    tail_gap: f64,
    nonincreasing_increments: bool,
}

impl RateFunction {
    /// Normalize a raw nondecreasing table so that the limit value is 1.
    ///
    /// `limit` is the value of `g` at infinity; when absent it is inferred
    /// as the last table entry.
    pub fn normalize(raw: &[f64], limit: Option<f64>) -> Result<Self> {
        if raw.len() < 2 {
            return Err(Error::InvalidRateFunction(
                "table needs at least g(0) and g(1)".into(),
            ));
        }
        if raw[0] != 0.0 {
            return Err(Error::InvalidRateFunction(format!(
                "g(0) must be 0, got {}",
                raw[0]
            )));
        }
        if raw[1] <= 0.0 {
            return Err(Error::InvalidRateFunction("g(1) must be positive".into()));
        }
        for w in raw.windows(2) {
            if w[1] < w[0] {
                return Err(Error::InvalidRateFunction(format!(
                    "table decreases: {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        let g_inf = limit.unwrap_or(*raw.last().unwrap());
        if g_inf <= 0.0 || !g_inf.is_finite() {
            return Err(Error::InvalidRateFunction(format!(
                "limit value must be finite positive, got {g_inf}"
            )));
        }
        if *raw.last().unwrap() > g_inf * (1.0 + 1e-12) {
            return Err(Error::InvalidRateFunction(
                "table exceeds declared limit".into(),
            ));
        }
        let values: Vec<f64> = raw.iter().map(|v| v / g_inf).collect();
        let mut nonincr = true;
        let mut prev = values[1] - values[0];
        for w in values[1..].windows(2) {
            let d = w[1] - w[0];
            if d > prev + 1e-12 {
                nonincr = false;
            }
            prev = d;
        }
        // the increment from g(N) to the constant tail must not grow either
        let last = *values.last().unwrap();
        if 1.0 - last > prev + 1e-12 {
            nonincr = false;
        }
        let tail_gap = 1.0 - last;
        Ok(Self {
            values,
            tail_gap,
            nonincreasing_increments: nonincr,
        })
    }

    /// `g(n) = 1{n >= 1}`: the constant-rate process.
    pub fn constant_rate() -> Self {
        Self::normalize(&[0.0, 1.0], Some(1.0)).unwrap()
    }

    /// `g(n) = min(n, cap) / cap`.
    pub fn capped_linear(cap: u32) -> Self {
        assert!(cap >= 1);
        let raw: Vec<f64> = (0..=cap as u64).map(|n| n as f64).collect();
        Self::normalize(&raw, Some(cap as f64)).unwrap()
    }

    /// `g(n) = 1 - 2^{-n}`, truncated where the gap drops below `tol`.
    pub fn geometric_saturation(tol: f64) -> Self {
        let mut raw = vec![0.0];
        let mut n = 1u32;
        loop {
            let v = 2.0 - (2.0f64).powi(1 - n as i32);
            raw.push(v);
            if 2.0 - v < 2.0 * tol || n > 60 {
                break;
            }
            n += 1;
        }
        Self::normalize(&raw, Some(2.0)).unwrap()
    }

    pub fn eval(&self, occ: Occupancy) -> f64 {
        match occ {
            Occupancy::Infinite => 1.0,
            Occupancy::Finite(n) => self.eval_n(n),
        }
    }

    pub fn eval_n(&self, n: u64) -> f64 {
        if (n as usize) < self.values.len() {
            self.values[n as usize]
        } else {
            1.0
        }
    }

    /// Index `N` past which `g` is exactly 1.
    pub fn truncation_index(&self) -> usize {
        self.values.len() - 1
    }

    /// Gap `1 - g(N)` accepted at truncation.
    pub fn tail_gap(&self) -> f64 {
        self.tail_gap
    }

    /// True when `n -> g(n+1) - g(n)` is nonincreasing, a sufficient
    /// condition for the one-site mean to be strictly convex in the
    /// fugacity.
    pub fn has_nonincreasing_increments(&self) -> bool {
        self.nonincreasing_increments
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Jump displacement distribution `p(z)` on the integers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpKernel {
    support: Vec<(i64, f64)>,
    drift: f64,
    nearest_neighbour: bool,
    totally_asymmetric: bool,
}

impl JumpKernel {
    pub fn new(mut support: Vec<(i64, f64)>) -> Result<Self> {
        support.retain(|&(_, p)| p != 0.0);
        if support.is_empty() {
            return Err(Error::InvalidKernel("empty support".into()));
        }
        support.sort_by_key(|&(z, _)| z);
        for w in support.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::InvalidKernel(format!(
                    "duplicate displacement {}",
                    w[0].0
                )));
            }
        }
        let total: f64 = support.iter().map(|&(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidKernel(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        for &(z, p) in &support {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidKernel(format!("p({z}) = {p} outside [0,1]")));
            }
            if z == 0 {
                return Err(Error::InvalidKernel("displacement 0 not allowed".into()));
            }
        }
        let drift = support.iter().map(|&(z, p)| z as f64 * p).sum();
        let nn = support.iter().all(|&(z, _)| z == 1 || z == -1)
            && support
                .iter()
                .find(|&&(z, _)| z == 1)
                .map(|&(_, p)| p > 0.5)
                .unwrap_or(false);
        let ta = support.iter().all(|&(z, _)| z >= 1);
        Ok(Self {
            support,
            drift,
            nearest_neighbour: nn,
            totally_asymmetric: ta,
        })
    }

    /// Nearest-neighbour kernel with `p(1) = p in (1/2, 1]`, `p(-1) = 1-p`.
    pub fn nearest_neighbour(p: f64) -> Result<Self> {
        if !(p > 0.5 && p <= 1.0) {
            return Err(Error::InvalidKernel(format!(
                "nearest-neighbour drift parameter must lie in (1/2, 1], got {p}"
            )));
        }
        let mut support = vec![(1, p)];
        if p < 1.0 {
            support.push((-1, 1.0 - p));
        }
        Self::new(support)
    }

    /// Totally asymmetric two-step kernel `p(1) = w1`, `p(2) = 1 - w1`.
    pub fn two_step(w1: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&w1) {
            return Err(Error::InvalidKernel(format!(
                "p(1) must lie in [0,1), got {w1}"
            )));
        }
        Self::new(vec![(1, w1), (2, 1.0 - w1)])
    }

    pub fn drift(&self) -> f64 {
        self.drift
    }

    pub fn is_nearest_neighbour(&self) -> bool {
        self.nearest_neighbour
    }

    pub fn is_totally_asymmetric(&self) -> bool {
        self.totally_asymmetric
    }

    /// `p(1)` for nearest-neighbour kernels.
    pub fn p_right(&self) -> f64 {
        self.support
            .iter()
            .find(|&&(z, _)| z == 1)
            .map(|&(_, p)| p)
            .unwrap_or(0.0)
    }

    /// `p - q` for nearest-neighbour kernels, general drift otherwise.
    pub fn effective_drift(&self) -> f64 {
        self.drift
    }

    pub fn support(&self) -> &[(i64, f64)] {
        &self.support
    }

    pub fn max_abs_displacement(&self) -> i64 {
        self.support.iter().map(|&(z, _)| z.abs()).max().unwrap()
    }

    /// Inverse-CDF draw of a displacement from a uniform in `[0,1)`.
    pub fn sample(&self, u: f64) -> i64 {
        let mut acc = 0.0;
        for &(z, p) in &self.support {
            acc += p;
            if u < acc {
                return z;
            }
        }
        self.support.last().unwrap().0
    }
}

/// Law of one disorder variable on `(c, 1]`.
///
/// Two families are supported: finite point mixtures, and densities
/// proportional to `(alpha - c)^k` for `k` in `{0, 1, 2}`. These admit
/// closed-form critical densities for the constant-rate process, which the
/// test suite pins as golden values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisorderLaw {
    pub c: f64,
    pub kind: DisorderKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DisorderKind {
    /// Atoms `(alpha_i, w_i)` with weights summing to 1.
    Points(Vec<(f64, f64)>),
    /// Density proportional to `(alpha - c)^exponent` on `(c, 1]`.
    Polynomial { exponent: u8 },
}

impl DisorderLaw {
    pub fn point_mass(c: f64, alpha: f64) -> Result<Self> {
        Self::points(c, vec![(alpha, 1.0)])
    }

    pub fn points(c: f64, atoms: Vec<(f64, f64)>) -> Result<Self> {
        let law = Self {
            c,
            kind: DisorderKind::Points(atoms),
        };
        law.validate()?;
        Ok(law)
    }

    pub fn polynomial(c: f64, exponent: u8) -> Result<Self> {
        let law = Self {
            c,
            kind: DisorderKind::Polynomial { exponent },
        };
        law.validate()?;
        Ok(law)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c < 1.0) {
            return Err(Error::InvalidEnvironment(format!(
                "rate infimum c must lie in (0,1), got {}",
                self.c
            )));
        }
        match &self.kind {
            DisorderKind::Points(atoms) => {
                if atoms.is_empty() {
                    return Err(Error::InvalidEnvironment("no atoms".into()));
                }
                let total: f64 = atoms.iter().map(|&(_, w)| w).sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidEnvironment(format!(
                        "atom weights sum to {total}"
                    )));
                }
                for &(a, w) in atoms {
                    if w < 0.0 {
                        return Err(Error::InvalidEnvironment("negative weight".into()));
                    }
                    if !(a > self.c && a <= 1.0) {
                        return Err(Error::InvalidEnvironment(format!(
                            "atom {a} carries mass outside ({}, 1]",
                            self.c
                        )));
                    }
                }
            }
            DisorderKind::Polynomial { exponent } => {
                if *exponent > 2 {
                    return Err(Error::InvalidEnvironment(
                        "polynomial exponent must be 0, 1 or 2".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Inverse-CDF sample from a uniform in `[0,1)`.
    pub fn sample(&self, u: f64) -> f64 {
        match &self.kind {
            DisorderKind::Points(atoms) => {
                let mut acc = 0.0;
                for &(a, w) in atoms {
                    acc += w;
                    if u < acc {
                        return a;
                    }
                }
                atoms.last().unwrap().0
            }
            DisorderKind::Polynomial { exponent } => {
                // CDF ((a-c)/(1-c))^(k+1) inverts in closed form
                let k = *exponent as f64;
                self.c + (1.0 - self.c) * u.powf(1.0 / (k + 1.0))
            }
        }
    }

    /// Integral of `f` against the law, to absolute tolerance `tol`.
    pub fn expect(&self, mut f: impl FnMut(f64) -> f64, tol: f64) -> f64 {
        match &self.kind {
            DisorderKind::Points(atoms) => atoms.iter().map(|&(a, w)| w * f(a)).sum(),
            DisorderKind::Polynomial { exponent } => {
                let k = *exponent as f64;
                let c = self.c;
                let norm = (k + 1.0) / (1.0 - c).powf(k + 1.0);
                crate::numerics::integrate(
                    |a| f(a) * norm * (a - c).powf(k),
                    c,
                    1.0,
                    tol,
                )
            }
        }
    }

    /// Whether the law places mass arbitrarily close to `c`.
    pub fn touches_infimum(&self) -> bool {
        match &self.kind {
            DisorderKind::Points(atoms) => {
                atoms.iter().any(|&(a, _)| a <= self.c + 1e-12)
            }
            DisorderKind::Polynomial { .. } => true,
        }
    }
}

/// Warnings emitted by environment builders for conditions that are
/// asymptotic (hence not certifiable on a finite window) or merely suspect.
#[derive(Clone, Debug, PartialEq)]
pub enum EnvWarning {
    /// No site in the window witnesses rates approaching the infimum `c`.
    LiminfWitnessAbsent,
    /// The recorded slow-site sequence has position ratios drifting away
    /// from 1 (observed limit given).
    SlowSiteRatioOffTarget { observed: f64 },
}

/// Quenched disorder on a finite window: site rates in `(c, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    window: Window,
    alpha: Vec<f64>,
    c: f64,
    slow_sites: Option<Vec<i64>>,
}

impl Environment {
    pub fn from_fn(window: Window, c: f64, f: impl FnMut(i64) -> f64) -> Result<Self> {
        let alpha: Vec<f64> = window.sites().map(f).collect();
        let env = Self {
            window,
            alpha,
            c,
            slow_sites: None,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn uniform(window: Window, c: f64, value: f64) -> Result<Self> {
        Self::from_fn(window, c, |_| value)
    }

    pub fn from_parts(
        window: Window,
        c: f64,
        alpha: Vec<f64>,
        slow_sites: Option<Vec<i64>>,
    ) -> Result<Self> {
        if alpha.len() != window.len() {
            return Err(Error::InvalidEnvironment(format!(
                "{} rates for a window of {} sites",
                alpha.len(),
                window.len()
            )));
        }
        let env = Self {
            window,
            alpha,
            c,
            slow_sites,
        };
        env.validate()?;
        Ok(env)
    }

    fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c < 1.0) {
            return Err(Error::InvalidEnvironment(format!(
                "c must lie in (0,1), got {}",
                self.c
            )));
        }
        for (x, &a) in self.window.sites().zip(&self.alpha) {
            if !(a > self.c && a <= 1.0) {
                return Err(Error::InvalidEnvironment(format!(
                    "alpha({x}) = {a} outside ({}, 1]",
                    self.c
                )));
            }
        }
        Ok(())
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn alpha(&self, site: i64) -> f64 {
        self.alpha[self.window.index(site)]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn slow_sites(&self) -> Option<&[i64]> {
        self.slow_sites.as_deref()
    }

    /// Point override of one site's rate; the result must stay in `(c, 1]`.
    pub fn with_rate(&self, site: i64, rate: f64) -> Result<Self> {
        let mut alpha = self.alpha.clone();
        alpha[self.window.index(site)] = rate;
        Self::from_parts(self.window, self.c, alpha, self.slow_sites.clone())
    }
}

/// I.i.d. environment draw from a disorder law.
///
/// Deterministic given the seed: site `x` consumes one uniform from its own
/// derived stream, so the draw at a site does not depend on the window.
pub fn build_environment_iid(
    law: &DisorderLaw,
    window: Window,
    seed: u64,
) -> Result<(Environment, Vec<EnvWarning>)> {
    law.validate()?;
    let alpha: Vec<f64> = window
        .sites()
        .map(|x| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed_site(seed, x));
            law.sample(rng.gen::<f64>())
        })
        .collect();
    let env = Environment::from_parts(window, law.c, alpha, None)?;
    let mut warnings = Vec::new();
    if !law.touches_infimum() {
        warnings.push(EnvWarning::LiminfWitnessAbsent);
    }
    Ok((env, warnings))
}

/// Overlay of explicit slow sites witnessing `liminf alpha = c`.
///
/// `schedule` lists `(site, rate)` pairs with strictly decreasing negative
/// sites and rates in `(c, 1]`. The sequence is recorded in the result; a
/// warning is emitted when the recorded position ratios do not approach 1.
pub fn build_environment_with_slow_sites(
    base: &Environment,
    schedule: &[(i64, f64)],
) -> Result<(Environment, Vec<EnvWarning>)> {
    if schedule.is_empty() {
        return Ok((base.clone(), Vec::new()));
    }
    let mut prev: Option<i64> = None;
    for &(site, rate) in schedule {
        if site >= 0 {
            return Err(Error::InvalidEnvironment(format!(
                "slow site {site} must be negative"
            )));
        }
        if let Some(p) = prev {
            if site >= p {
                return Err(Error::InvalidEnvironment(format!(
                    "slow sites must strictly decrease: {p} then {site}"
                )));
            }
        }
        prev = Some(site);
        if !(rate > base.c() && rate <= 1.0) {
            return Err(Error::InvalidEnvironment(format!(
                "scheduled rate {rate} at {site} outside ({}, 1]",
                base.c()
            )));
        }
        if !base.window().contains(site) {
            return Err(Error::InvalidEnvironment(format!(
                "slow site {site} outside window [{}, {}]",
                base.window().lo,
                base.window().hi
            )));
        }
    }
    let mut alpha = base.alphas().to_vec();
    for &(site, rate) in schedule {
        alpha[base.window().index(site)] = rate;
    }
    let sites: Vec<i64> = schedule.iter().map(|&(s, _)| s).collect();
    let mut warnings = Vec::new();
    if sites.len() >= 4 {
        // position ratios x_{n+1}/x_n should approach 1; only a trend is
        // observable on a finite prefix, so warn when the recorded tail is
        // neither close to 1 nor still decreasing toward it
        let ratios: Vec<f64> = sites
            .windows(2)
            .map(|w| w[1] as f64 / w[0] as f64)
            .collect();
        let last = *ratios.last().unwrap();
        let tail = &ratios[ratios.len().saturating_sub(4)..];
        let decreasing = tail.windows(2).all(|w| w[1] < w[0] - 1e-12);
        if last > 1.05 && !decreasing {
            warnings.push(EnvWarning::SlowSiteRatioOffTarget { observed: last });
        }
    }
    let env = Environment::from_parts(base.window(), base.c(), alpha, Some(sites))?;
    Ok((env, warnings))
}

/// Particle configuration on a window.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Configuration {
    window: Window,
    occ: Vec<Occupancy>,
}

impl Configuration {
    pub fn empty(window: Window) -> Self {
        Self {
            window,
            occ: vec![Occupancy::Finite(0); window.len()],
        }
    }

    pub fn from_fn(window: Window, f: impl FnMut(i64) -> Occupancy) -> Self {
        Self {
            window,
            occ: window.sites().map(f).collect(),
        }
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn get(&self, site: i64) -> Occupancy {
        self.occ[self.window.index(site)]
    }

    pub fn set(&mut self, site: i64, occ: Occupancy) {
        let i = self.window.index(site);
        self.occ[i] = occ;
    }

    /// Move one particle from `from` to `to`, following the reservoir
    /// conventions: departures leave an infinite site infinite, arrivals at
    /// an infinite site are absorbed.
    ///
    /// Caller guarantees `from` is occupied and both sites are in-window.
    pub fn apply_jump(&mut self, from: i64, to: i64) {
        let fi = self.window.index(from);
        debug_assert!(!self.occ[fi].is_zero(), "jump from empty site {from}");
        self.occ[fi] = self.occ[fi].depart();
        let ti = self.window.index(to);
        self.occ[ti] = self.occ[ti].arrive();
    }

    /// Remove one particle from `from` without an arrival (used when the
    /// target lies outside the window).
    pub fn remove_particle(&mut self, from: i64) {
        let fi = self.window.index(from);
        debug_assert!(!self.occ[fi].is_zero());
        self.occ[fi] = self.occ[fi].depart();
    }

    /// Total particle number on `[lo, hi]`; errors on reservoir sites.
    pub fn total_mass(&self, lo: i64, hi: i64) -> Result<u64> {
        let mut total = 0u64;
        for x in lo.max(self.window.lo)..=hi.min(self.window.hi) {
            match self.get(x) {
                Occupancy::Finite(n) => total += n,
                Occupancy::Infinite => {
                    return Err(Error::InfiniteOccupancy(format!(
                        "site {x} in mass query [{lo}, {hi}]"
                    )))
                }
            }
        }
        Ok(total)
    }

    /// Coordinatewise order `self <= other` over the window.
    pub fn dominated_by(&self, other: &Configuration) -> bool {
        debug_assert_eq!(self.window, other.window);
        self.occ
            .iter()
            .zip(&other.occ)
            .all(|(a, b)| a.partial_cmp(b) != Some(std::cmp::Ordering::Greater))
    }

    pub fn occupancies(&self) -> &[Occupancy] {
        &self.occ
    }

    /// Source block: infinite reservoirs on `[window.lo, edge]`, empty to
    /// the right.
    pub fn source_block(window: Window, edge: i64) -> Self {
        Self::from_fn(window, |x| {
            if x <= edge {
                Occupancy::Infinite
            } else {
                Occupancy::Finite(0)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rate_function_normalizes_and_flags_convexity() {
        let g = RateFunction::normalize(&[0.0, 1.0, 2.0, 3.0], Some(3.0)).unwrap();
        assert_eq!(g.eval_n(2), 2.0 / 3.0);
        assert_eq!(g.eval_n(10), 1.0);
        assert_eq!(g.eval(Occupancy::Infinite), 1.0);

        // increments of 1 - 2^{-n} are halving: sufficient convexity holds
        let geo = RateFunction::geometric_saturation(1e-9);
        assert!(geo.has_nonincreasing_increments());
        assert!((geo.eval_n(1) - 0.5).abs() < 1e-15);
        assert!((geo.eval_n(3) - 0.875).abs() < 1e-15);

        // min(n,3)/3 has constant increments then a drop to the tail: fine
        let capped = RateFunction::capped_linear(3);
        assert!(capped.has_nonincreasing_increments());

        // constant rate stays untouched
        let c = RateFunction::constant_rate();
        assert_eq!(c.eval_n(1), 1.0);
        assert_eq!(c.eval_n(0), 0.0);
    }

    #[test]
    fn rate_function_rejects_bad_tables() {
        assert!(RateFunction::normalize(&[0.0, 2.0, 1.0], None).is_err());
        assert!(RateFunction::normalize(&[0.0, 0.0], None).is_err());
        assert!(RateFunction::normalize(&[0.5, 1.0], None).is_err());
    }

    #[test]
    fn kernel_flags_and_drift() {
        let nn = JumpKernel::nearest_neighbour(0.75).unwrap();
        assert!(nn.is_nearest_neighbour());
        assert!(!nn.is_totally_asymmetric());
        assert!((nn.drift() - 0.5).abs() < 1e-15);

        let ta = JumpKernel::two_step(0.5).unwrap();
        assert!(ta.is_totally_asymmetric());
        assert!(!ta.is_nearest_neighbour());
        assert!((ta.drift() - 1.5).abs() < 1e-15);

        assert!(JumpKernel::nearest_neighbour(0.5).is_err());
        assert!(JumpKernel::new(vec![(1, 0.6), (2, 0.6)]).is_err());
    }

    #[test]
    fn iid_environment_is_deterministic_and_warns_on_point_mass() {
        let law = DisorderLaw::point_mass(0.5, 0.8).unwrap();
        let w = Window::new(-100, 0);
        let (a, warn_a) = build_environment_iid(&law, w, 7).unwrap();
        let (b, _) = build_environment_iid(&law, w, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.alphas().iter().all(|&v| v == 0.8));
        assert_eq!(warn_a, vec![EnvWarning::LiminfWitnessAbsent]);

        let poly = DisorderLaw::polynomial(0.5, 1).unwrap();
        let (_, warn_b) = build_environment_iid(&poly, w, 7).unwrap();
        assert!(warn_b.is_empty());
    }

    #[test]
    fn iid_draw_matches_moment_oracle() {
        // E alpha under density 2(a-c)/(1-c)^2 on (0.5, 1] is 5/6; the mean
        // over 10^6 sites must land within 3 sigma of it.
        let law = DisorderLaw::polynomial(0.5, 1).unwrap();
        let quad_mean = law.expect(|a| a, 1e-12);
        assert!((quad_mean - 5.0 / 6.0).abs() < 1e-9);

        let n = 1_000_000i64;
        let w = Window::new(-n + 1, 0);
        let (env, _) = build_environment_iid(&law, w, 20260809).unwrap();
        let mean: f64 = env.alphas().iter().sum::<f64>() / n as f64;
        let var = law.expect(|a| (a - quad_mean) * (a - quad_mean), 1e-12);
        let sigma = (var / n as f64).sqrt();
        assert!(
            (mean - 5.0 / 6.0).abs() < 3.0 * sigma,
            "mean {mean} vs 5/6 (sigma {sigma})"
        );
    }

    #[test]
    fn slow_site_overlay_validates_and_warns() {
        let w = Window::new(-200, 10);
        let base = Environment::uniform(w, 0.5, 1.0).unwrap();

        // consecutive integers: ratio (k+1)/k -> 1, no warning
        let schedule: Vec<(i64, f64)> =
            (1..=60).map(|k| (-k, 0.5 + 1.0 / (k as f64 + 2.0))).collect();
        let (env, warnings) = build_environment_with_slow_sites(&base, &schedule).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(env.slow_sites().unwrap().len(), 60);
        assert!((env.alpha(-3) - (0.5 + 0.2)).abs() < 1e-15);

        // geometric positions: ratio -> 1.1, warning expected
        let wide = Window::new(-1500, 10);
        let wide_base = Environment::uniform(wide, 0.5, 1.0).unwrap();
        let geo: Vec<(i64, f64)> = (25..=70)
            .map(|k| (-((1.1f64).powi(k).floor() as i64), 0.51))
            .collect();
        let (_, warnings) = build_environment_with_slow_sites(&wide_base, &geo).unwrap();
        assert!(matches!(
            warnings.as_slice(),
            [EnvWarning::SlowSiteRatioOffTarget { .. }]
        ));

        // quadratically spread positions: ratio decreasing toward 1, no warning
        let quad: Vec<(i64, f64)> = (1..=12).map(|n| (-(n * n), 0.51)).collect();
        let (_, warnings) = build_environment_with_slow_sites(&wide_base, &quad).unwrap();
        assert!(warnings.is_empty(), "{warnings:?}");

        // empty schedule is the identity
        let (same, warnings) = build_environment_with_slow_sites(&base, &[]).unwrap();
        assert_eq!(same, base);
        assert!(warnings.is_empty());
        assert!(same.slow_sites().is_none());

        // rejected schedules
        assert!(build_environment_with_slow_sites(&base, &[(-2, 0.6), (-1, 0.6)]).is_err());
        assert!(build_environment_with_slow_sites(&base, &[(-1, 0.5)]).is_err());
    }

    #[test]
    fn objects_roundtrip_through_serde() {
        let law = DisorderLaw::polynomial(0.5, 2).unwrap();
        let (env, _) = build_environment_iid(&law, Window::new(-20, 20), 3).unwrap();
        let text = toml::to_string(&env).unwrap();
        let back: Environment = toml::from_str(&text).unwrap();
        assert_eq!(env, back);

        let kernel = JumpKernel::two_step(0.5).unwrap();
        let back: JumpKernel = toml::from_str(&toml::to_string(&kernel).unwrap()).unwrap();
        assert_eq!(kernel, back);

        let g = RateFunction::geometric_saturation(1e-9);
        let back: RateFunction = toml::from_str(&toml::to_string(&g).unwrap()).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn reservoir_conventions() {
        let w = Window::new(0, 3);
        let mut cfg = Configuration::empty(w);
        cfg.set(0, Occupancy::Infinite);
        cfg.set(1, Occupancy::Finite(2));

        // departure from a reservoir leaves it infinite and delivers a particle
        cfg.apply_jump(0, 1);
        assert_eq!(cfg.get(0), Occupancy::Infinite);
        assert_eq!(cfg.get(1), Occupancy::Finite(3));

        // arrival into a reservoir absorbs the particle
        cfg.apply_jump(1, 0);
        assert_eq!(cfg.get(0), Occupancy::Infinite);
        assert_eq!(cfg.get(1), Occupancy::Finite(2));

        assert!(cfg.total_mass(1, 3).is_ok());
        assert!(cfg.total_mass(0, 3).is_err());
    }

    proptest! {
        #[test]
        fn jump_then_reverse_restores(occ_x in 1u64..5, occ_y in 0u64..5) {
            let w = Window::new(0, 1);
            let mut cfg = Configuration::from_fn(w, |x| {
                Occupancy::Finite(if x == 0 { occ_x } else { occ_y })
            });
            let before = cfg.clone();
            cfg.apply_jump(0, 1);
            cfg.apply_jump(1, 0);
            prop_assert_eq!(before, cfg);
        }

        #[test]
        fn nearest_neighbour_drift_identity(p in 0.5001f64..=1.0) {
            let k = JumpKernel::nearest_neighbour(p).unwrap();
            prop_assert!((k.drift() - (2.0 * p - 1.0)).abs() < 1e-12);
        }
    }
}
