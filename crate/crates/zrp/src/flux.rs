//! Disorder-averaged density and flux analysis.
//!
//! The central object is the annealed mean density
//! `Rbar(lambda) = E_Q R(lambda / alpha)`, the large-window average of
//! one-site means against the disorder. Everything else is convex analysis
//! on top of it:
//!
//! - the critical density `rho_c = lim_{lambda -> c} Rbar(lambda)`, which
//!   may be infinite;
//! - the flux `f(rho) = (p - q) Rbar^{-1}(rho)` on `[0, rho_c]`;
//! - its Legendre transform `f*(v) = sup_lambda [(p-q) lambda - v Rbar(lambda)]`,
//!   the asymptotic current seen by an observer receding at speed `v` from an
//!   infinite source;
//! - the smallest maximizer `lambda_minus(v)` and the density
//!   `script_r(v) = Rbar(lambda_minus(v))` carried at that speed;
//! - the concave envelope `fhat(rho) = inf_{v >= 0} [rho v + f*(v)]`;
//! - the front speed `v0 = (p-q) inf_{lambda < c} (c - lambda) / (rho_c - Rbar(lambda))`
//!   with its smallest minimizer `lambda0`;
//! - the weak convexity condition: `Rbar(lambda) - rho_c - (lambda - c) D > 0`
//!   for all `lambda < c`, where `D` is the limsup of backward difference
//!   quotients of `Rbar` at `c`.
//!
//! All transforms run on explicit grids with local refinement. The Legendre
//! transform is evaluated as a pointwise maximum over one fixed candidate
//! family for every `v`, which makes its convexity in `v` exact by
//! construction rather than approximate.

use crate::equilibria::mean_occupancy;
use crate::error::{Error, Result};
use crate::model::{DisorderLaw, Environment, RateFunction};
use crate::numerics::{golden_max, golden_min, interp_sorted};

/// Critical density: finite value or divergence (a first-class result).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CriticalDensity {
    Finite(f64),
    Infinite,
}

impl CriticalDensity {
    pub fn finite(&self) -> Option<f64> {
        match self {
            CriticalDensity::Finite(v) => Some(*v),
            CriticalDensity::Infinite => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, CriticalDensity::Infinite)
    }
}

/// Where the disorder average comes from: a law (quadrature path) or a
/// concrete environment (window-average path).
#[derive(Clone, Debug)]
pub enum DensitySource {
    Law(DisorderLaw),
    Empirical { env: Environment, depth: usize },
}

impl DensitySource {
    pub fn law(law: DisorderLaw) -> Self {
        DensitySource::Law(law)
    }

    pub fn empirical(env: Environment, depth: usize) -> Self {
        DensitySource::Empirical { env, depth }
    }

    pub fn c(&self) -> f64 {
        match self {
            DensitySource::Law(law) => law.c,
            DensitySource::Empirical { env, .. } => env.c(),
        }
    }

    fn average(&self, mut f: impl FnMut(f64) -> f64, tol: f64) -> Result<f64> {
        match self {
            DensitySource::Law(law) => Ok(law.expect(f, tol)),
            DensitySource::Empirical { env, depth } => {
                let w = env.window();
                let hi = 0i64.min(w.hi);
                let lo = w.lo.max(hi - (*depth as i64 - 1));
                if hi - lo + 1 < 8 {
                    return Err(Error::WindowTooSmall(
                        "empirical average needs at least 8 sites left of the origin".into(),
                    ));
                }
                let n = (hi - lo + 1) as f64;
                Ok((lo..=hi).map(|x| f(env.alpha(x))).sum::<f64>() / n)
            }
        }
    }

    /// Annealed mean density `Rbar(lambda)` for `lambda` in `[0, c)`.
    pub fn rbar(&self, lambda: f64, g: &RateFunction) -> Result<f64> {
        let c = self.c();
        if !(0.0..).contains(&lambda) || lambda >= c {
            return Err(Error::FugacityOutOfRange {
                lambda,
                reason: format!("annealed density needs lambda in [0, {c})"),
            });
        }
        self.average(|a| mean_occupancy(lambda / a, g).unwrap(), 1e-11)
    }

    /// `Rbar(b) - Rbar(a)` computed as a single average of differences, so
    /// small increments near `c` are not destroyed by cancellation between
    /// two separately computed integrals.
    ///
    /// The tolerance floor respects the rounding noise of one-site means
    /// close to parameter 1; pushing below it makes adaptive quadrature
    /// recurse to its depth cap without converging.
    fn rbar_increment(&self, a: f64, b: f64, g: &RateFunction, tol_floor: f64) -> Result<f64> {
        let tol = ((b - a) * 5e-5).clamp(tol_floor, 1e-9);
        self.average(
            |al| mean_occupancy(b / al, g).unwrap() - mean_occupancy(a / al, g).unwrap(),
            tol,
        )
    }

    /// Critical density `rho_c`, the increasing limit of `Rbar(lambda)` as
    /// `lambda` approaches the rate infimum `c`.
    ///
    /// Point mixtures and concrete environments keep every one-site
    /// parameter strictly below 1 at `lambda = c`, so the limit is evaluated
    /// directly. Continuous laws use a dyadic sequence `lambda_j` increasing
    /// to `c` with a one-step extrapolation; divergence is reported when the
    /// increments stop contracting or the running value passes `cap`.
    pub fn critical_density(&self, g: &RateFunction, cap: f64) -> Result<CriticalDensity> {
        let c = self.c();
        let direct = match self {
            DensitySource::Law(law) => {
                matches!(law.kind, crate::model::DisorderKind::Points(_))
            }
            DensitySource::Empirical { .. } => true,
        };
        if direct {
            let v = self.average(|a| mean_occupancy(c / a, g).unwrap(), 1e-11)?;
            return Ok(if v > cap {
                CriticalDensity::Infinite
            } else {
                CriticalDensity::Finite(v)
            });
        }
        let mut prev = self.rbar(c * (1.0 - 0.5f64.powi(6)), g)?;
        let mut prev_inc = f64::INFINITY;
        let mut flat_steps = 0u32;
        for j in 7..=42 {
            let lambda = c * (1.0 - 0.5f64.powi(j));
            let value = prev + self.rbar_increment(c * (1.0 - 0.5f64.powi(j - 1)), lambda, g, 1e-12)?;
            let inc = value - prev;
            if value > cap {
                return Ok(CriticalDensity::Infinite);
            }
            if inc < 5e-8 {
                return Ok(CriticalDensity::Finite(value + inc.max(0.0)));
            }
            if inc > 0.85 * prev_inc {
                flat_steps += 1;
                if flat_steps >= 4 {
                    // increments not contracting: logarithmic (or worse) divergence
                    return Ok(CriticalDensity::Infinite);
                }
            } else {
                flat_steps = 0;
            }
            prev = value;
            prev_inc = inc;
        }
        // increments still contracting geometrically: sum the remaining tail
        Ok(CriticalDensity::Finite(prev + prev_inc))
    }

    /// Limsup of backward difference quotients of `Rbar` at `c`, evaluated
    /// on consecutive dyadic pairs `lambda_j < lambda_{j+1}` approaching `c`.
    ///
    /// Returns `None` when the quotients grow without stabilizing (infinite
    /// one-sided derivative).
    pub fn derivative_limit_at_c(&self, g: &RateFunction) -> Result<Option<f64>> {
        let c = self.c();
        let mut sup: f64 = 0.0;
        let mut prev_q: Option<f64> = None;
        let mut prev_inc: Option<f64> = None;
        let mut non_contracting = 0u32;
        for j in 8..=34 {
            let a = c * (1.0 - 0.5f64.powi(j));
            let b = c * (1.0 - 0.5f64.powi(j + 1));
            let q = self.rbar_increment(a, b, g, 1e-13)? / (b - a);
            sup = sup.max(q);
            if q > 1e8 {
                return Ok(None);
            }
            if let Some(p) = prev_q {
                let inc = q - p;
                if inc.abs() < (1e-7_f64).max(1e-6 * q.abs()) {
                    return Ok(Some(sup + inc.max(0.0)));
                }
                // a convergent quotient sequence has geometrically
                // contracting increments; sustained non-contraction means
                // the one-sided derivative diverges
                if let Some(pi) = prev_inc {
                    if inc > (1e-7_f64).max(1e-6 * q.abs()) && inc >= 0.75 * pi {
                        non_contracting += 1;
                    } else {
                        non_contracting = 0;
                    }
                    if non_contracting >= 4 && j >= 14 {
                        return Ok(None);
                    }
                }
                prev_inc = Some(inc);
            }
            prev_q = Some(q);
        }
        // did not stabilize within the dyadic range
        Ok(None)
    }
}

/// Grid sizes and tolerances for table construction.
#[derive(Clone, Copy, Debug)]
pub struct FluxConfig {
    pub grid: usize,
    pub refine_iters: u32,
    pub divergence_cap: f64,
    /// value tolerance for smallest-maximizer tie resolution
    pub tie_tol: f64,
}

impl Default for FluxConfig {
    fn default() -> Self {
        Self {
            grid: 4096,
            refine_iters: 48,
            divergence_cap: 1e6,
            tie_tol: 1e-10,
        }
    }
}

/// Precomputed flux machinery for one disorder source and drift `p - q`.
#[derive(Clone, Debug)]
pub struct FluxTables {
    c: f64,
    drift: f64,
    lambda_grid: Vec<f64>,
    rbar: Vec<f64>,
    rho_c: CriticalDensity,
    rbar_prime_plus: Option<f64>,
    v0: Option<f64>,
    lambda0: Option<f64>,
    h_holds: Option<bool>,
    v_zero: f64,
    v_grid: Vec<f64>,
    f_star: Vec<f64>,
    lambda_minus: Vec<f64>,
    script_r: Vec<f64>,
    rho_grid: Vec<f64>,
    f: Vec<f64>,
    f_hat: Vec<f64>,
    /// candidate fugacities shared by every Legendre evaluation
    candidates: Vec<(f64, f64)>,
    cfg: FluxConfig,
}

impl FluxTables {
    /// Build tables from a disorder source, rate function and drift
    /// parameter `p` of a nearest-neighbour kernel.
    pub fn build(source: &DensitySource, g: &RateFunction, p: f64, cfg: FluxConfig) -> Result<Self> {
        if !(p > 0.5 && p <= 1.0) {
            return Err(Error::InvalidKernel(format!(
                "flux analysis needs nearest-neighbour drift p in (1/2, 1], got {p}"
            )));
        }
        let c = source.c();
        let n = cfg.grid.max(64);
        let mut lambda_grid = Vec::with_capacity(n);
        for i in 0..n {
            lambda_grid.push(c * i as f64 / (n - 1) as f64);
        }
        let rho_c = source.critical_density(g, cfg.divergence_cap)?;
        let mut rbar = Vec::with_capacity(n);
        for &l in &lambda_grid[..n - 1] {
            rbar.push(source.rbar(l, g)?);
        }
        rbar.push(match rho_c {
            CriticalDensity::Finite(v) => v,
            CriticalDensity::Infinite => f64::INFINITY,
        });
        let rbar_prime_plus = source.derivative_limit_at_c(g)?;
        Self::assemble(c, 2.0 * p - 1.0, lambda_grid, rbar, rho_c, rbar_prime_plus, cfg)
    }

    /// Build tables from an explicit `Rbar` table (synthetic inputs and the
    /// empirical path share this route). The last grid point must be `c` and
    /// its value is taken as `rho_c` by continuity.
    pub fn from_rbar_table(
        lambda_grid: Vec<f64>,
        rbar: Vec<f64>,
        c: f64,
        p: f64,
        cfg: FluxConfig,
    ) -> Result<Self> {
        if lambda_grid.len() != rbar.len() || lambda_grid.len() < 8 {
            return Err(Error::InvalidScenario(
                "density table needs matching grids of at least 8 points".into(),
            ));
        }
        for w in rbar.windows(2) {
            if w[1] < w[0] - 1e-12 {
                return Err(Error::InvalidScenario(
                    "density table must be nondecreasing".into(),
                ));
            }
        }
        let n = rbar.len();
        let rho_c = CriticalDensity::Finite(rbar[n - 1]);
        // limsup of backward difference quotients, from the table itself
        let mut sup: f64 = 0.0;
        for k in (n - 8.min(n - 1)..n.saturating_sub(1)).rev() {
            let q = (rbar[n - 1] - rbar[k]) / (lambda_grid[n - 1] - lambda_grid[k]);
            sup = sup.max(q);
        }
        Self::assemble(c, 2.0 * p - 1.0, lambda_grid, rbar, rho_c, Some(sup), cfg)
    }

    fn assemble(
        c: f64,
        drift: f64,
        lambda_grid: Vec<f64>,
        rbar: Vec<f64>,
        rho_c: CriticalDensity,
        rbar_prime_plus: Option<f64>,
        cfg: FluxConfig,
    ) -> Result<Self> {
        let n = lambda_grid.len();
        let finite_n = if rho_c.is_infinite() { n - 1 } else { n };

        // front speed and smallest minimizer, when rho_c is finite
        let (v0, lambda0, h_holds) = if let CriticalDensity::Finite(rc) = rho_c {
            let limit_phi = match rbar_prime_plus {
                Some(d) if d > 0.0 => 1.0 / d,
                Some(_) => f64::INFINITY,
                None => 0.0,
            };
            let mut inf_phi = limit_phi;
            let phi = |i: usize| (c - lambda_grid[i]) / (rc - rbar[i]).max(1e-300);
            for (i, &r) in rbar.iter().enumerate().take(n - 1) {
                if rc - r > 1e-12 {
                    inf_phi = inf_phi.min(phi(i));
                }
            }
            // smallest argument achieving the infimum within the tie tolerance
            let near_exclusion = n.saturating_sub(33);
            let mut l0 = c;
            for i in 0..n - 1 {
                if rc - rbar[i] > 1e-12 && phi(i) <= inf_phi + cfg.tie_tol {
                    if i < near_exclusion {
                        // refine inside the bracketing cell
                        let lg = &lambda_grid;
                        let rb = &rbar;
                        let lo = lg[i.saturating_sub(1)];
                        let hi = lg[(i + 1).min(n - 2)];
                        let (arg, _) = golden_min(
                            |l| (c - l) / (rc - interp_sorted(lg, rb, l)).max(1e-300),
                            lo,
                            hi,
                            cfg.refine_iters,
                        );
                        l0 = arg.min(lg[i].max(lo));
                        // keep the grid point when refinement does not improve
                        let phi_arg =
                            (c - arg) / (rc - interp_sorted(lg, rb, arg)).max(1e-300);
                        if phi(i) <= phi_arg {
                            l0 = lg[i];
                        }
                    }
                    break;
                }
            }
            let v0 = drift * inf_phi;
            // weak convexity: the chord gap against the one-sided derivative
            // stays positive away from c and only closes at c
            let holds = match rbar_prime_plus {
                None => true,
                Some(d) => {
                    let near_width = (c * 0.01).max(lambda_grid[1] * 8.0);
                    let mut ok = true;
                    for i in 0..n - 1 {
                        let gap = rbar[i] - rc - (lambda_grid[i] - c) * d;
                        if lambda_grid[i] <= c - near_width {
                            if gap <= 1e-9 {
                                ok = false;
                                break;
                            }
                        } else if gap < -1e-9 {
                            ok = false;
                            break;
                        }
                    }
                    ok
                }
            };
            (Some(v0), Some(l0), Some(holds))
        } else {
            (None, None, None)
        };

        // speed beyond which the Legendre transform vanishes
        let mut v_zero = 0.0f64;
        for i in 1..finite_n {
            if rbar[i] > 0.0 {
                v_zero = v_zero.max(drift * lambda_grid[i] / rbar[i]);
            }
        }
        if v_zero == 0.0 {
            v_zero = drift / c;
        }

        let mut tables = Self {
            c,
            drift,
            lambda_grid,
            rbar,
            rho_c,
            rbar_prime_plus,
            v0,
            lambda0,
            h_holds,
            v_zero,
            v_grid: Vec::new(),
            f_star: Vec::new(),
            lambda_minus: Vec::new(),
            script_r: Vec::new(),
            rho_grid: Vec::new(),
            f: Vec::new(),
            f_hat: Vec::new(),
            candidates: Vec::new(),
            cfg,
        };

        // v-grid and the shared candidate family for Legendre maxima
        let v_top = 1.25 * v_zero;
        tables.v_grid = (0..n).map(|j| v_top * j as f64 / (n - 1) as f64).collect();
        tables.build_candidates();

        let v_grid = tables.v_grid.clone();
        tables.f_star = v_grid.iter().map(|&v| tables.legendre_over_candidates(v).0).collect();
        tables.lambda_minus = v_grid.iter().map(|&v| tables.legendre_over_candidates(v).1).collect();
        tables.script_r = tables
            .lambda_minus
            .iter()
            .map(|&l| tables.rbar_at(l))
            .collect();

        // density grid, flux, and concave envelope
        let rho_top = match rho_c {
            CriticalDensity::Finite(rc) => rc,
            CriticalDensity::Infinite => tables.rbar[n - 2],
        };
        tables.rho_grid = (0..n).map(|i| rho_top * i as f64 / (n - 1) as f64).collect();
        tables.f = tables
            .rho_grid
            .iter()
            .map(|&rho| tables.invert_rbar(rho) * drift)
            .collect();
        let rho_grid = tables.rho_grid.clone();
        tables.f_hat = rho_grid.iter().map(|&rho| tables.envelope_at(rho)).collect();

        Ok(tables)
    }

    /// Grid maximizer plus golden refinement per v; the union of refined
    /// arguments over all v forms one fixed candidate family.
    fn build_candidates(&mut self) {
        let n = self.lambda_grid.len();
        let finite_n = if self.rho_c.is_infinite() { n - 1 } else { n };
        let mut cands: Vec<f64> = self.lambda_grid[..finite_n].to_vec();
        for &v in &self.v_grid.clone() {
            if v <= 0.0 {
                continue;
            }
            let mut best = 0usize;
            let mut best_val = f64::NEG_INFINITY;
            for i in 0..finite_n {
                let s = self.drift * self.lambda_grid[i] - v * self.rbar[i];
                if s > best_val {
                    best_val = s;
                    best = i;
                }
            }
            let lo = self.lambda_grid[best.saturating_sub(1)];
            let hi = self.lambda_grid[(best + 1).min(finite_n - 1)];
            if hi > lo {
                let lg = &self.lambda_grid;
                let rb = &self.rbar;
                let drift = self.drift;
                let (arg, _) = golden_max(
                    |l| drift * l - v * interp_sorted(lg, rb, l),
                    lo,
                    hi,
                    self.cfg.refine_iters,
                );
                // snap refined arguments onto coincident grid nodes so tie
                // resolution cannot prefer a jittered copy of a node
                let j = self
                    .lambda_grid
                    .partition_point(|&x| x < arg)
                    .min(n - 1);
                let near = if j > 0 && (arg - self.lambda_grid[j - 1]).abs()
                    <= (self.lambda_grid[j] - arg).abs()
                {
                    self.lambda_grid[j - 1]
                } else {
                    self.lambda_grid[j]
                };
                if (arg - near).abs() > 1e-9 {
                    cands.push(arg);
                }
            }
        }
        cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cands.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        self.candidates = cands
            .into_iter()
            .map(|l| (l, interp_sorted(&self.lambda_grid, &self.rbar, l)))
            .collect();
        // pin exact table values at the nodes
        for (l, r) in self.candidates.iter_mut() {
            if let Ok(i) = self
                .lambda_grid
                .binary_search_by(|x| x.partial_cmp(l).unwrap())
            {
                *r = self.rbar[i];
            }
        }
        if self.rho_c.is_infinite() {
            self.candidates.retain(|&(_, r)| r.is_finite());
        }
    }

    /// `(f*(v), lambda_minus(v))` as a max over the fixed candidate family,
    /// ties resolved to the smallest fugacity.
    fn legendre_over_candidates(&self, v: f64) -> (f64, f64) {
        if v == 0.0 {
            return (self.drift * self.c, self.c);
        }
        let mut max_val = f64::NEG_INFINITY;
        for &(l, r) in &self.candidates {
            let s = self.drift * l - v * r;
            if s > max_val {
                max_val = s;
            }
        }
        let max_val = max_val.max(0.0); // lambda = 0 always yields 0
        for &(l, r) in &self.candidates {
            let s = self.drift * l - v * r;
            if s >= max_val - self.cfg.tie_tol {
                return (max_val, l);
            }
        }
        (max_val, 0.0)
    }

    fn invert_rbar(&self, rho: f64) -> f64 {
        let n = self.lambda_grid.len();
        let finite_n = if self.rho_c.is_infinite() { n - 1 } else { n };
        let rbar = &self.rbar[..finite_n];
        if rho <= rbar[0] {
            return self.lambda_grid[0];
        }
        if rho >= rbar[finite_n - 1] {
            return self.lambda_grid[finite_n - 1];
        }
        let j = rbar.partition_point(|&r| r < rho);
        let (r0, r1) = (rbar[j - 1], rbar[j]);
        let (l0, l1) = (self.lambda_grid[j - 1], self.lambda_grid[j]);
        if r1 > r0 {
            l0 + (rho - r0) / (r1 - r0) * (l1 - l0)
        } else {
            l0
        }
    }

    fn envelope_at(&self, rho: f64) -> f64 {
        let n = self.v_grid.len();
        let mut best = f64::INFINITY;
        let mut best_j = 0usize;
        for j in 0..n {
            let val = rho * self.v_grid[j] + self.f_star[j];
            if val < best {
                best = val;
                best_j = j;
            }
        }
        // golden refinement against the piecewise-linear transform, which
        // lies above the true convex transform so the result stays an upper
        // envelope bound
        let lo = self.v_grid[best_j.saturating_sub(1)];
        let hi = self.v_grid[(best_j + 1).min(n - 1)];
        if hi > lo {
            let vg = &self.v_grid;
            let fs = &self.f_star;
            let (_, refined) =
                golden_min(|v| rho * v + interp_sorted(vg, fs, v), lo, hi, self.cfg.refine_iters);
            best = best.min(refined);
        }
        best
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn drift(&self) -> f64 {
        self.drift
    }

    pub fn rho_c(&self) -> CriticalDensity {
        self.rho_c
    }

    /// Limsup of backward difference quotients of `Rbar` at `c`; `None`
    /// means the quotients diverge.
    pub fn rbar_derivative_at_c(&self) -> Option<f64> {
        self.rbar_prime_plus
    }

    pub fn lambda_grid(&self) -> &[f64] {
        &self.lambda_grid
    }

    pub fn rbar_table(&self) -> &[f64] {
        &self.rbar
    }

    pub fn v_grid(&self) -> &[f64] {
        &self.v_grid
    }

    pub fn f_star_table(&self) -> &[f64] {
        &self.f_star
    }

    pub fn lambda_minus_table(&self) -> &[f64] {
        &self.lambda_minus
    }

    pub fn script_r_table(&self) -> &[f64] {
        &self.script_r
    }

    pub fn rho_grid(&self) -> &[f64] {
        &self.rho_grid
    }

    pub fn f_table(&self) -> &[f64] {
        &self.f
    }

    pub fn f_hat_table(&self) -> &[f64] {
        &self.f_hat
    }

    /// Speed beyond which the Legendre transform is exactly zero.
    pub fn v_zero(&self) -> f64 {
        self.v_zero
    }

    /// Interpolated annealed density.
    pub fn rbar_at(&self, lambda: f64) -> f64 {
        interp_sorted(&self.lambda_grid, &self.rbar, lambda)
    }

    /// Flux `f(rho) = (p - q) Rbar^{-1}(rho)`.
    pub fn flux_f(&self, rho: f64) -> Result<f64> {
        let max = match self.rho_c {
            CriticalDensity::Finite(rc) => rc,
            CriticalDensity::Infinite => self.rbar[self.rbar.len() - 2],
        };
        if !(0.0..=max * (1.0 + 1e-12) + 1e-12).contains(&rho) {
            return Err(Error::DensityOutOfRange { rho, max });
        }
        Ok(self.drift * self.invert_rbar(rho))
    }

    /// Legendre transform `f*(v)`; exact affine branch for `v <= 0`.
    pub fn f_star(&self, v: f64) -> Result<f64> {
        if v <= 0.0 {
            return match self.rho_c {
                CriticalDensity::Finite(rc) => Ok(self.drift * self.c - v * rc),
                CriticalDensity::Infinite => {
                    if v == 0.0 {
                        Ok(self.drift * self.c)
                    } else {
                        Ok(f64::INFINITY)
                    }
                }
            };
        }
        Ok(self.legendre_over_candidates(v).0)
    }

    /// Smallest maximizer of `lambda -> (p-q) lambda - v Rbar(lambda)`.
    pub fn lambda_minus(&self, v: f64) -> Result<f64> {
        if v < 0.0 {
            return Err(Error::FugacityOutOfRange {
                lambda: v,
                reason: "lambda_minus is defined for v >= 0".into(),
            });
        }
        Ok(self.legendre_over_candidates(v).1)
    }

    /// Density profile seen at speed `v`: `Rbar(lambda_minus(v))`.
    pub fn script_r(&self, v: f64) -> Result<f64> {
        Ok(self.rbar_at(self.lambda_minus(v)?))
    }

    /// Concave envelope `fhat(rho) = inf_{v >= 0} [rho v + f*(v)]`.
    pub fn f_hat(&self, rho: f64) -> Result<f64> {
        if self.rho_c.is_infinite() {
            return Err(Error::CriticalDensityInfinite);
        }
        let rc = self.rho_c.finite().unwrap();
        if !(0.0..=rc * (1.0 + 1e-12) + 1e-12).contains(&rho) {
            return Err(Error::DensityOutOfRange { rho, max: rc });
        }
        Ok(self.envelope_at(rho))
    }

    /// Front speed `v0` and its smallest minimizer `lambda0`.
    pub fn front_speed(&self) -> Result<(f64, f64)> {
        match (self.v0, self.lambda0) {
            (Some(v), Some(l)) => Ok((v, l)),
            _ => Err(Error::CriticalDensityInfinite),
        }
    }

    /// Weak convexity verdict for the annealed density at `c`.
    pub fn condition_h(&self) -> Result<bool> {
        self.h_holds.ok_or(Error::CriticalDensityInfinite)
    }

    /// CSV export: one row per grid index.
    pub fn to_csv(&self) -> String {
        use crate::numerics::fmt_f64 as f;
        let mut out = String::from("lambda,Rbar,v,f_star,rho,f,f_hat,lambda_minus\n");
        for i in 0..self.lambda_grid.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                f(self.lambda_grid[i]),
                f(self.rbar[i]),
                f(self.v_grid[i]),
                f(self.f_star[i]),
                f(self.rho_grid[i]),
                f(self.f[i]),
                f(self.f_hat[i]),
                f(self.lambda_minus[i]),
            ));
        }
        out
    }
}

/// Annealed mean density (free-standing convenience wrapper).
pub fn annealed_density(source: &DensitySource, lambda: f64, g: &RateFunction) -> Result<f64> {
    source.rbar(lambda, g)
}

/// Critical density with the default divergence cap.
pub fn critical_density(source: &DensitySource, g: &RateFunction) -> Result<CriticalDensity> {
    source.critical_density(g, FluxConfig::default().divergence_cap)
}

/// Empirical-path diagnostics: the window average, the half-depth average,
/// and a two-point extrapolation in `1/n`.
#[derive(Clone, Copy, Debug)]
pub struct EmpiricalDiagnostics {
    pub depth: usize,
    pub value: f64,
    pub half_depth_value: f64,
    pub extrapolated: f64,
}

pub fn empirical_diagnostics(
    env: &Environment,
    lambda: f64,
    g: &RateFunction,
    depth: usize,
) -> Result<EmpiricalDiagnostics> {
    let full = DensitySource::empirical(env.clone(), depth);
    let half = DensitySource::empirical(env.clone(), depth / 2);
    let value = full.rbar(lambda, g)?;
    let half_depth_value = half.rbar(lambda, g)?;
    Ok(EmpiricalDiagnostics {
        depth,
        value,
        half_depth_value,
        extrapolated: 2.0 * value - half_depth_value,
    })
}

/// Window average of one-site means at fugacity exactly `c` (diagnostic
/// only: the continuity extension, not this literal average, defines the
/// critical density).
pub fn literal_average_at_c(env: &Environment, g: &RateFunction, depth: usize) -> Result<f64> {
    let source = DensitySource::empirical(env.clone(), depth);
    source.average(|a| mean_occupancy(env.c() / a, g).unwrap(), 1e-11)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Window;

    fn constant_g() -> RateFunction {
        RateFunction::constant_rate()
    }

    /// Closed-form annealed density for the constant-rate process under the
    /// density proportional to (alpha - c)^1.
    fn rbar_linear_law(lambda: f64, c: f64) -> f64 {
        let k = 2.0 / ((1.0 - c) * (1.0 - c));
        k * lambda * ((1.0 - c) + (lambda - c) * ((1.0 - lambda) / (c - lambda)).ln())
    }

    /// Same for exponent 2.
    fn rbar_quadratic_law(lambda: f64, c: f64) -> f64 {
        let k = 3.0 / (1.0 - c).powi(3);
        let a = ((1.0 - lambda).powi(2) - (c - lambda).powi(2)) / 2.0;
        let b = 2.0 * (lambda - c) * (1.0 - c);
        let d = (lambda - c).powi(2) * ((1.0 - lambda) / (c - lambda)).ln();
        k * lambda * (a + b + d)
    }

    #[test]
    fn annealed_density_matches_riemann_oracle() {
        let law = DisorderLaw::polynomial(0.5, 1).unwrap();
        let source = DensitySource::law(law);
        let g = constant_g();
        let got = source.rbar(0.25, &g).unwrap();

        // brute-force midpoint quadrature on 10^6 points
        let n = 1_000_000;
        let c = 0.5;
        let mut acc = 0.0;
        for i in 0..n {
            let a = c + (1.0 - c) * (i as f64 + 0.5) / n as f64;
            acc += (0.25 / (a - 0.25)) * 2.0 * (a - c) / ((1.0 - c) * (1.0 - c));
        }
        let oracle = acc * (1.0 - c) / n as f64;
        assert!((got - oracle).abs() < 1e-6, "got {got}, oracle {oracle}");
        assert!((got - rbar_linear_law(0.25, 0.5)).abs() < 1e-9);

        assert_eq!(source.rbar(0.0, &g).unwrap(), 0.0);
        assert!(source.rbar(0.5, &g).is_err());
    }

    #[test]
    fn point_mass_reduces_to_one_site_mean() {
        let law = DisorderLaw::point_mass(0.5, 1.0).unwrap();
        let source = DensitySource::law(law);
        let g = constant_g();
        for l in [0.1, 0.3, 0.45] {
            let want = crate::equilibria::mean_occupancy(l, &g).unwrap();
            assert!((source.rbar(l, &g).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn critical_density_golden_values() {
        let g = constant_g();
        // density ~ (alpha - c): rho_c = 2c/(1-c) = 2
        let lin = DensitySource::law(DisorderLaw::polynomial(0.5, 1).unwrap());
        match lin.critical_density(&g, 1e6).unwrap() {
            CriticalDensity::Finite(v) => assert!((v - 2.0).abs() < 1e-6, "rho_c {v}"),
            CriticalDensity::Infinite => panic!("expected finite"),
        }
        // density ~ (alpha - c)^2: rho_c = 3c/(2(1-c)) = 1.5
        let quad = DensitySource::law(DisorderLaw::polynomial(0.5, 2).unwrap());
        match quad.critical_density(&g, 1e6).unwrap() {
            CriticalDensity::Finite(v) => assert!((v - 1.5).abs() < 1e-6, "rho_c {v}"),
            CriticalDensity::Infinite => panic!("expected finite"),
        }
        // uniform law: logarithmic divergence
        let uni = DensitySource::law(DisorderLaw::polynomial(0.5, 0).unwrap());
        assert!(uni.critical_density(&g, 1e6).unwrap().is_infinite());
    }

    #[test]
    fn derivative_limit_and_front_speed() {
        let g = constant_g();
        // exponent 2: Rbar'(c) = 3(1+c)/(2(1-c)^2) = 9 at c = 1/2, so the
        // front speed for p = 1 is 1/9
        let quad = DensitySource::law(DisorderLaw::polynomial(0.5, 2).unwrap());
        let d = quad.derivative_limit_at_c(&g).unwrap().expect("finite");
        assert!((d - 9.0).abs() < 1e-4, "derivative {d}");

        let tables = FluxTables::build(&quad, &g, 1.0, FluxConfig::default()).unwrap();
        let (v0, l0) = tables.front_speed().unwrap();
        assert!((v0 - 1.0 / 9.0).abs() < 1e-6, "v0 {v0}");
        assert!((l0 - 0.5).abs() < 1e-9, "lambda0 {l0}");
        assert!(tables.condition_h().unwrap());

        // exponent 1: quotients diverge, front speed collapses to zero
        let lin = DensitySource::law(DisorderLaw::polynomial(0.5, 1).unwrap());
        assert!(lin.derivative_limit_at_c(&g).unwrap().is_none());
        let t2 = FluxTables::build(&lin, &g, 1.0, FluxConfig::default()).unwrap();
        let (v0, l0) = t2.front_speed().unwrap();
        assert!(v0.abs() < 1e-9, "v0 {v0}");
        assert!((l0 - 0.5).abs() < 1e-12);
        assert!(t2.condition_h().unwrap());

        // the drift factor multiplies the front speed linearly
        let cfg = FluxConfig {
            grid: 512,
            ..FluxConfig::default()
        };
        let half = FluxTables::build(&quad, &g, 0.75, cfg).unwrap();
        let (v0_half, _) = half.front_speed().unwrap();
        assert!((v0_half - 0.5 / 9.0).abs() < 1e-6, "v0 at half drift {v0_half}");
    }

    #[test]
    fn flux_round_trip_and_endpoints() {
        let g = constant_g();
        let lin = DensitySource::law(DisorderLaw::polynomial(0.5, 1).unwrap());
        let tables = FluxTables::build(&lin, &g, 1.0, FluxConfig::default()).unwrap();
        assert_eq!(tables.flux_f(0.0).unwrap(), 0.0);
        let rc = tables.rho_c().finite().unwrap();
        assert!((tables.flux_f(rc).unwrap() - 0.5).abs() < 1e-9);

        // f(Rbar(0.25)) = 0.25 for p = 1
        let rho = lin.rbar(0.25, &g).unwrap();
        assert!((tables.flux_f(rho).unwrap() - 0.25).abs() < 1e-6);
        assert!(tables.flux_f(rc + 0.5).is_err());

        // round trip on the whole density grid
        for &rho in tables.rho_grid() {
            let back = tables.rbar_at(tables.flux_f(rho).unwrap());
            assert!((back - rho).abs() < 1e-8, "round trip {rho} -> {back}");
        }
    }

    #[test]
    fn legendre_affine_branch_and_decay() {
        let g = constant_g();
        let quad = DensitySource::law(DisorderLaw::polynomial(0.5, 2).unwrap());
        let tables = FluxTables::build(&quad, &g, 1.0, FluxConfig::default()).unwrap();
        // v <= 0: f*(v) = (p-q) c - v rho_c exactly
        assert!((tables.f_star(-1.0).unwrap() - 2.0).abs() < 1e-6);
        assert!((tables.f_star(0.0).unwrap() - 0.5).abs() < 1e-12);
        // beyond the zero speed the transform vanishes exactly
        assert_eq!(tables.f_star(tables.v_zero() * 1.2).unwrap(), 0.0);
    }

    #[test]
    fn legendre_matches_dense_grid_oracle() {
        let g = constant_g();
        let quad = DensitySource::law(DisorderLaw::polynomial(0.5, 2).unwrap());
        let tables = FluxTables::build(&quad, &g, 1.0, FluxConfig::default()).unwrap();
        let v = 0.05;
        // dense scan over 10^6 fugacities using the closed-form density
        let mut best = 0.0f64;
        for i in 0..1_000_000 {
            let l = 0.5 * i as f64 / 1_000_000.0;
            best = best.max(l - v * rbar_quadratic_law(l, 0.5));
        }
        // the supremum is attained at c for v below the front speed
        best = best.max(0.5 - v * 1.5);
        let got = tables.f_star(v).unwrap();
        assert!((got - best).abs() < 1e-8, "got {got}, oracle {best}");
    }

    #[test]
    fn smallest_maximizer_behaviour_around_front_speed() {
        let g = constant_g();
        let quad = DensitySource::law(DisorderLaw::polynomial(0.5, 2).unwrap());
        let tables = FluxTables::build(&quad, &g, 1.0, FluxConfig::default()).unwrap();
        let (v0, l0) = tables.front_speed().unwrap();

        assert_eq!(tables.lambda_minus(0.0).unwrap(), 0.5);
        // below the front speed the maximizer sits exactly at c
        for v in [0.02, 0.05, 0.08, v0 * 0.9] {
            assert_eq!(tables.lambda_minus(v).unwrap(), 0.5, "v = {v}");
        }
        // above it the maximizer drops strictly below lambda0 and returns to
        // lambda0 as v decreases to v0
        let mut prev = 0.0;
        for v in [v0 + 0.08, v0 + 0.04, v0 + 0.02, v0 + 0.01, v0 + 0.005] {
            let l = tables.lambda_minus(v).unwrap();
            assert!(l < l0, "lambda_minus({v}) = {l} not below lambda0 {l0}");
            assert!(l >= prev, "lambda_minus must grow as v decreases to v0");
            prev = l;
        }
        assert!(l0 - prev < 0.02, "limit from above should approach lambda0");
        assert!(tables.lambda_minus(-0.1).is_err());
    }

    #[test]
    fn envelope_properties() {
        let g = constant_g();
        let quad = DensitySource::law(DisorderLaw::polynomial(0.5, 2).unwrap());
        let tables = FluxTables::build(&quad, &g, 1.0, FluxConfig::default()).unwrap();
        let rc = tables.rho_c().finite().unwrap();

        assert!((tables.f_hat(rc).unwrap() - 0.5).abs() < 1e-8);
        assert!(tables.f_hat(0.0).unwrap().abs() < 1e-12);

        // strictly convex density: the flux is concave, so envelope == flux
        for (i, &rho) in tables.rho_grid().iter().enumerate() {
            let f = tables.f_table()[i];
            let fh = tables.f_hat_table()[i];
            assert!(fh >= f - 1e-12, "envelope below flux at {rho}");
            assert!(fh - f < 5e-4, "envelope detached from concave flux at {rho}: {fh} vs {f}");
        }
    }

    #[test]
    fn fenchel_inequality_and_convexity_on_grids() {
        let g = constant_g();
        let quad = DensitySource::law(DisorderLaw::polynomial(0.5, 2).unwrap());
        let tables = FluxTables::build(&quad, &g, 1.0, FluxConfig::default()).unwrap();

        let n = tables.v_grid().len();
        for i in (0..n).step_by(16) {
            let rho = tables.rho_grid()[i];
            let f = tables.f_table()[i];
            for j in (0..n).step_by(16) {
                let rhs = rho * tables.v_grid()[j] + tables.f_star_table()[j];
                assert!(f <= rhs + 1e-12, "Fenchel violated at rho {rho} v {}", tables.v_grid()[j]);
            }
        }

        // exact convexity of the Legendre table (pointwise max of a fixed
        // affine family)
        let vs = tables.v_grid();
        let fs = tables.f_star_table();
        for j in 1..n - 1 {
            let left = (fs[j] - fs[j - 1]) / (vs[j] - vs[j - 1]);
            let right = (fs[j + 1] - fs[j]) / (vs[j + 1] - vs[j]);
            assert!(right >= left - 1e-9, "transform slope decreases at {}", vs[j]);
        }

        // smallest maximizer and carried density: nonincreasing, the latter
        // consistent with one-sided slopes
        let lm = tables.lambda_minus_table();
        for j in 0..n - 1 {
            assert!(lm[j + 1] <= lm[j] + 1e-12, "lambda_minus increases at index {j}");
        }
        let sr = tables.script_r_table();
        for j in 0..n - 1 {
            assert!(sr[j + 1] <= sr[j] + 1e-9, "script_r increases at index {j}");
        }
        for j in 1..n - 2 {
            let dq = (fs[j] - fs[j + 1]) / (vs[j + 1] - vs[j]);
            let hi = sr[j - 1] + 1e-9;
            let lo = sr[(j + 2).min(n - 1)] - 1e-9;
            assert!(dq <= hi && dq >= lo, "slope {dq} outside [{lo}, {hi}] at {j}");
        }
    }

    #[test]
    fn synthetic_tables_detect_affine_and_kinked_density() {
        let n = 512;
        let c = 0.5;
        let grid: Vec<f64> = (0..n).map(|i| c * i as f64 / (n - 1) as f64).collect();

        // affine density: the convexity gap is identically zero
        let affine: Vec<f64> = grid.iter().map(|&l| 2.0 * l).collect();
        let t = FluxTables::from_rbar_table(grid.clone(), affine, c, 0.75, FluxConfig::default())
            .unwrap();
        assert!(!t.condition_h().unwrap());

        // piecewise density with a kink: smallest front-speed minimizer sits
        // at the kink, strictly inside (0, c)
        let kinked: Vec<f64> = grid
            .iter()
            .map(|&l| if l <= 0.3 { l } else { 0.3 + 4.0 * (l - 0.3) })
            .collect();
        let t =
            FluxTables::from_rbar_table(grid, kinked, c, 1.0, FluxConfig::default()).unwrap();
        assert!(!t.condition_h().unwrap());
        let (v0, l0) = t.front_speed().unwrap();
        assert!((v0 - 0.25).abs() < 1e-6, "v0 {v0}");
        assert!((l0 - 0.3).abs() < 2e-3, "lambda0 {l0}");
    }

    #[test]
    fn empirical_path_agrees_with_law_on_large_windows() {
        let g = constant_g();
        let law = DisorderLaw::polynomial(0.5, 2).unwrap();
        let (env, _) =
            crate::model::build_environment_iid(&law, Window::new(-200_000, 0), 11).unwrap();
        let emp = DensitySource::empirical(env.clone(), 200_000);
        let annealed = DensitySource::law(law);
        let a = emp.rbar(0.3, &g).unwrap();
        let b = annealed.rbar(0.3, &g).unwrap();
        assert!((a - b).abs() < 5e-3, "empirical {a} vs annealed {b}");

        let diag = empirical_diagnostics(&env, 0.3, &g, 200_000).unwrap();
        assert!((diag.value - a).abs() < 1e-12);

        // literal average at c is finite on a finite window
        let lit = literal_average_at_c(&env, &g, 1000).unwrap();
        assert!(lit.is_finite() && lit > 0.0);
    }
}
