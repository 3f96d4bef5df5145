//! Currents across moving observers, cumulative height functions, and
//! statistical comparison of replica ensembles against product measures.
//!
//! The signed current `Gamma` across a piecewise-constant path counts
//! particle jumps over the observer, with a correction when the observer
//! itself steps: moving right removes the swept site's occupancy from the
//! tail, moving left adds it. Whenever the mass right of the path is
//! finite,
//!
//! ```text
//! Gamma(t) = sum_{x > pos(t)} eta_t(x) - sum_{x > pos(0)} eta_0(x)
//! ```
//!
//! holds exactly after every event, and the crate's audits check that
//! identity verbatim.
//!
//! The height function `F_ref(x, zeta)` is the signed cumulative occupancy
//! seen from a reference site; differences of heights bound differences of
//! currents between replicas coupled through one event stream, and those
//! inequalities are audited pathwise as exact integer comparisons.

use crate::equilibria::{Observable, ProductMeasure};
use crate::error::{Error, Result};
use crate::harris::ReplicaSet;
use crate::model::{Configuration, Environment, JumpKernel, Occupancy, RateFunction};
use crate::numerics::fmt_f64;

/// Deterministic piecewise-constant observer path with unit steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ObserverPath {
    start: i64,
    steps: Vec<(f64, i8)>,
}

impl ObserverPath {
    /// Path fixed at one site.
    pub fn fixed(site: i64) -> Self {
        Self {
            start: site,
            steps: Vec::new(),
        }
    }

    pub fn new(start: i64, steps: Vec<(f64, i8)>) -> Result<Self> {
        let mut prev = 0.0;
        for &(t, d) in &steps {
            if t <= prev {
                return Err(Error::InvalidConfiguration(
                    "path step times must strictly increase and be positive".into(),
                ));
            }
            if d != 1 && d != -1 {
                return Err(Error::InvalidConfiguration(
                    "path steps must be unit moves".into(),
                ));
            }
            prev = t;
        }
        Ok(Self { start, steps })
    }

    pub fn start(&self) -> i64 {
        self.start
    }

    pub fn position(&self, t: f64) -> i64 {
        self.start
            + self
                .steps
                .iter()
                .take_while(|&&(s, _)| s <= t)
                .map(|&(_, d)| d as i64)
                .sum::<i64>()
    }
}

/// Signed current across an observer path, updated by the event loop.
#[derive(Clone, Debug)]
pub struct CurrentTracker {
    path: ObserverPath,
    next_step: usize,
    pos: i64,
    current: i64,
}

impl CurrentTracker {
    pub fn new(path: ObserverPath) -> Self {
        let pos = path.start;
        Self {
            path,
            next_step: 0,
            pos,
            current: 0,
        }
    }

    pub fn current(&self) -> i64 {
        self.current
    }

    pub fn position(&self) -> i64 {
        self.pos
    }

    /// Process observer steps with time `<= to`; steps are processed before
    /// any simulation event carrying the same timestamp.
    pub(crate) fn advance_path(&mut self, to: f64, config: &Configuration) {
        while self.next_step < self.path.steps.len() && self.path.steps[self.next_step].0 <= to {
            let (_, dir) = self.path.steps[self.next_step];
            if dir > 0 {
                // moving right sweeps past the occupants of pos + 1
                let swept = self.pos + 1;
                self.current -= occupancy_count(config, swept);
                self.pos += 1;
            } else {
                // moving left adds the occupants of the vacated site
                self.current += occupancy_count(config, self.pos);
                self.pos -= 1;
            }
            self.next_step += 1;
        }
    }

    pub(crate) fn on_particle_jump(&mut self, from: i64, to: i64) {
        if from <= self.pos && self.pos < to {
            self.current += 1;
        } else if to <= self.pos && self.pos < from {
            self.current -= 1;
        }
    }
}

fn occupancy_count(config: &Configuration, site: i64) -> i64 {
    if !config.window().contains(site) {
        return 0;
    }
    match config.get(site) {
        Occupancy::Finite(n) => n as i64,
        // paths must not sweep reservoir sites; the audits keep them apart
        Occupancy::Infinite => {
            debug_assert!(false, "observer path swept a reservoir site {site}");
            0
        }
    }
}

/// Integer extended with signed infinities, for height values over
/// configurations containing reservoirs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtInt {
    MinusInfinity,
    Finite(i64),
    PlusInfinity,
}

/// Cumulative height `F_ref(x)`: occupancy summed over `(ref, x]` for
/// `x > ref`, negated occupancy over `[x, ref]` for `x <= ref`. Sites
/// outside the window count as empty.
pub fn height(reference: i64, config: &Configuration, x: i64) -> ExtInt {
    let w = config.window();
    let sum_range = |lo: i64, hi: i64| -> Option<i64> {
        let mut acc = 0i64;
        for s in lo.max(w.lo)..=hi.min(w.hi) {
            match config.get(s) {
                Occupancy::Finite(n) => acc += n as i64,
                Occupancy::Infinite => return None,
            }
        }
        Some(acc)
    };
    if x > reference {
        match sum_range(reference + 1, x) {
            Some(v) => ExtInt::Finite(v),
            None => ExtInt::PlusInfinity,
        }
    } else {
        match sum_range(x, reference) {
            Some(v) => ExtInt::Finite(-v),
            None => ExtInt::MinusInfinity,
        }
    }
}

/// `sup_y [F_ref(y, a) - F_ref(y, b)]` over the window; requires finite
/// occupancies on both configurations.
pub fn height_sup_difference(reference: i64, a: &Configuration, b: &Configuration) -> Result<i64> {
    let w = a.window();
    if b.window() != w {
        return Err(Error::InvalidConfiguration(
            "height comparison needs matching windows".into(),
        ));
    }
    let mut sup = i64::MIN;
    for y in w.sites() {
        let fa = match height(reference, a, y) {
            ExtInt::Finite(v) => v,
            _ => {
                return Err(Error::InfiniteOccupancy(
                    "height difference over a reservoir".into(),
                ))
            }
        };
        let fb = match height(reference, b, y) {
            ExtInt::Finite(v) => v,
            _ => {
                return Err(Error::InfiniteOccupancy(
                    "height difference over a reservoir".into(),
                ))
            }
        };
        sup = sup.max(fa - fb);
    }
    Ok(sup)
}

/// Outcome of the coupled current comparison: the two currents, the height
/// bound, and the verdict `gamma_a - gamma_b >= -max(0, bound)`.
#[derive(Clone, Copy, Debug)]
pub struct CurrentComparison {
    pub gamma_a: i64,
    pub gamma_b: i64,
    pub bound: i64,
    pub ok: bool,
}

/// Couple two initial conditions through one stream and compare their
/// currents across a common observer path against the initial height bound.
#[allow(clippy::too_many_arguments)]
pub fn audit_current_comparison(
    env: &Environment,
    kernel: &JumpKernel,
    g: &RateFunction,
    a0: &Configuration,
    b0: &Configuration,
    path: &ObserverPath,
    t: f64,
    seed: u64,
) -> Result<CurrentComparison> {
    let bound = height_sup_difference(path.start(), a0, b0)?.max(0);
    let mut set = ReplicaSet::new(seed, env.window(), kernel.clone(), g.clone());
    let a = set.add_replica(env.clone(), a0.clone());
    let b = set.add_replica(env.clone(), b0.clone());
    set.attach_tracker(a, path.clone());
    set.attach_tracker(b, path.clone());
    set.advance(t);
    let gamma_a = set.current(a, 0);
    let gamma_b = set.current(b, 0);
    Ok(CurrentComparison {
        gamma_a,
        gamma_b,
        bound,
        ok: gamma_a - gamma_b >= -bound,
    })
}

/// Outcome of the reservoir-block domination audit: current from `zeta`
/// across `z` versus current from the full block at `y` plus the mass of
/// `zeta` on `(y, z]`.
#[derive(Clone, Copy, Debug)]
pub struct BlockDomination {
    pub lhs: i64,
    pub rhs: i64,
    pub ok: bool,
}

/// Audit `Gamma_z(t, zeta) <= Gamma_z(t, block_y) + sum_{x=y+1}^z zeta(x)`
/// for `y <= z`, with `block_y` the configuration that is an infinite
/// reservoir on every site up to `y` and empty to its right.
#[allow(clippy::too_many_arguments)]
pub fn audit_block_domination(
    env: &Environment,
    kernel: &JumpKernel,
    g: &RateFunction,
    zeta: &Configuration,
    y: i64,
    z: i64,
    t: f64,
    seed: u64,
) -> Result<BlockDomination> {
    if y > z {
        return Err(Error::InvalidConfiguration(format!(
            "block site {y} must not exceed observer site {z}"
        )));
    }
    let window = env.window();
    let block = Configuration::source_block(window, y);
    let mut set = ReplicaSet::new(seed, window, kernel.clone(), g.clone());
    let a = set.add_replica(env.clone(), zeta.clone());
    let b = set.add_replica(env.clone(), block);
    set.attach_tracker(a, ObserverPath::fixed(z));
    set.attach_tracker(b, ObserverPath::fixed(z));
    set.advance(t);
    let lhs = set.current(a, 0);
    let mass = if y < z {
        zeta.total_mass(y + 1, z)? as i64
    } else {
        0
    };
    let rhs = set.current(b, 0) + mass;
    Ok(BlockDomination {
        lhs,
        rhs,
        ok: lhs <= rhs,
    })
}

/// Per-observable comparison of a replica ensemble against a product
/// measure: Monte Carlo mean, standard error, exact expectation and the
/// one-sided z statistic.
#[derive(Clone, Debug)]
pub struct ObsReport {
    pub label: String,
    pub mc_mean: f64,
    pub stderr: f64,
    pub exact: f64,
    pub z: f64,
}

impl ObsReport {
    pub fn csv_header() -> &'static str {
        "observable,mc_mean,stderr,exact,z"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.label,
            fmt_f64(self.mc_mean),
            fmt_f64(self.stderr),
            fmt_f64(self.exact),
            fmt_f64(self.z)
        )
    }
}

/// Evaluate observables across an ensemble of final configurations and
/// compare with their exact expectations under `mu`.
pub fn compare_to_product_measure(
    ensemble: &[Configuration],
    mu: &ProductMeasure,
    observables: &[Observable],
) -> Result<Vec<ObsReport>> {
    let n = ensemble.len();
    if n < 2 {
        return Err(Error::InvalidScenario(
            "ensemble comparison needs at least two replicas".into(),
        ));
    }
    let mut out = Vec::with_capacity(observables.len());
    for obs in observables {
        let exact = mu.expect(obs)?;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for cfg in ensemble {
            let v = obs.eval(cfg);
            acc += v;
            acc2 += v * v;
        }
        let mean = acc / n as f64;
        let var = (acc2 / n as f64 - mean * mean).max(0.0) * n as f64 / (n as f64 - 1.0);
        let stderr = (var / n as f64).sqrt();
        let z = if stderr > 0.0 {
            (mean - exact) / stderr
        } else {
            0.0
        };
        out.push(ObsReport {
            label: obs.label(),
            mc_mean: mean,
            stderr,
            exact,
            z,
        });
    }
    Ok(out)
}
