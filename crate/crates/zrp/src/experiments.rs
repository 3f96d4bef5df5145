//! Experiment runners: scenario in, verdict table and CSV artifacts out.
//!
//! Every runner follows the same discipline. Replicas are fanned out over
//! worker threads with seeds derived from the master seed and the replica
//! index, results are reduced in replica order, and all floating-point
//! output is formatted through one deterministic formatter, so a rerun of
//! the same scenario reproduces every artifact byte for byte. Each verdict
//! row records the window, the replica count, the standard error and the
//! boundary-leak count; a row with nonzero leaks can never pass.

use crate::equilibria::{Observable, ObservableKind, ProductMeasure};
use crate::error::{Error, Result};
use crate::flux::{CriticalDensity, DensitySource, FluxConfig, FluxTables};
use crate::harris::{finite_propagation_probe, label_order_check, ReplicaSet};
use crate::jackson::{invariant_measure, locate_bottlenecks, sandwich_audit, solve_profile};
use crate::model::{
    build_environment_iid, Configuration, DisorderLaw, Environment, JumpKernel, Occupancy,
    RateFunction, Window,
};
use crate::numerics::{density_profile, fmt_f64, mix_seed};
use crate::observables::{
    audit_block_domination, audit_current_comparison, compare_to_product_measure, ObserverPath,
};
use crate::scenario::{
    propagation_margin, ExperimentKind, InitialSpec, Scenario,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// One line of the verdict table.
#[derive(Clone, Debug)]
pub struct VerdictRow {
    pub experiment: String,
    pub item: String,
    pub horizon: f64,
    pub value: f64,
    pub target: f64,
    pub tolerance: f64,
    pub stderr: f64,
    pub replicas: u64,
    pub leaks: u64,
    pub window_lo: i64,
    pub window_hi: i64,
    pub seed: u64,
    pub pass: bool,
}

impl VerdictRow {
    pub fn csv_header() -> &'static str {
        "experiment,item,horizon,value,target,tolerance,stderr,replicas,leaks,window_lo,window_hi,seed,pass"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.experiment,
            self.item,
            fmt_f64(self.horizon),
            fmt_f64(self.value),
            fmt_f64(self.target),
            fmt_f64(self.tolerance),
            fmt_f64(self.stderr),
            self.replicas,
            self.leaks,
            self.window_lo,
            self.window_hi,
            self.seed,
            self.pass
        )
    }
}

/// Everything a runner produces: verdicts plus named CSV artifacts.
#[derive(Clone, Debug, Default)]
pub struct ExperimentOutput {
    pub verdicts: Vec<VerdictRow>,
    pub files: Vec<(String, String)>,
}

impl ExperimentOutput {
    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn verdicts_csv(&self) -> String {
        let mut out = String::from(VerdictRow::csv_header());
        out.push('\n');
        for v in &self.verdicts {
            out.push_str(&v.csv_row());
            out.push('\n');
        }
        out
    }
}

fn replica_seed(master: u64, replica: u64) -> u64 {
    mix_seed(master, 0x7265_7000 ^ replica)
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Deterministic left-half profile: `density` on `[fill_lo, 0]`, exact
/// prefix masses, vacuum elsewhere.
fn left_profile(window: Window, fill_lo: i64, density: f64) -> Configuration {
    let len = (0 - fill_lo + 1).max(0) as usize;
    let profile = density_profile(density, len);
    Configuration::from_fn(window, |x| {
        if x <= 0 && x >= fill_lo {
            Occupancy::Finite(profile[(-x) as usize])
        } else {
            Occupancy::Finite(0)
        }
    })
}

/// Trajectory snapshots (time, site, occupancy) and per-site ring counts
/// for one representative replica, replayed on the first replica's stream.
fn snapshot_artifacts(
    seed: u64,
    window: Window,
    kernel: &JumpKernel,
    g: &RateFunction,
    env: &Environment,
    config: &Configuration,
    times: &[f64],
) -> (String, String) {
    let mut set = ReplicaSet::new(seed, window, kernel.clone(), g.clone());
    let idx = set.add_replica(env.clone(), config.clone());
    let mut counts = vec![0u64; window.len()];
    let mut snaps = String::from("time,site,occupancy\n");
    for &t in times {
        set.advance_with(t, |_, ev| {
            counts[window.index(ev.site)] += 1;
            true
        });
        for x in window.sites() {
            let occ = match set.replica(idx).config().get(x) {
                Occupancy::Finite(n) => n.to_string(),
                Occupancy::Infinite => "inf".into(),
            };
            snaps.push_str(&format!("{},{x},{occ}\n", fmt_f64(t)));
        }
    }
    let mut events = String::from("site,rings\n");
    for x in window.sites() {
        events.push_str(&format!("{x},{}\n", counts[window.index(x)]));
    }
    (snaps, events)
}

/// The benchmark family of local observables near the origin.
pub fn default_observables() -> Vec<Observable> {
    let mut out = Vec::new();
    for site in [-2i64, -1, 0, 1] {
        out.push(Observable::threshold(site, 1));
        out.push(Observable::threshold(site, 2));
        out.push(Observable::min_cap(site, 2));
    }
    out
}

fn scenario_observables(sc: &Scenario) -> Result<Vec<Observable>> {
    let obs = sc.observables()?;
    Ok(if obs.is_empty() { default_observables() } else { obs })
}

fn initial_density(sc: &Scenario, rho_c: Option<f64>) -> Result<f64> {
    match sc.initial {
        InitialSpec::LeftDensity { density } => Ok(density),
        InitialSpec::LeftCriticalMultiple { factor } => {
            let rc = rho_c.ok_or(Error::CriticalDensityInfinite)?;
            Ok(factor * rc)
        }
        InitialSpec::Empty => Ok(0.0),
        _ => Err(Error::InvalidScenario(
            "this experiment needs a left-density initial condition".into(),
        )),
    }
}

/// Dispatch a scenario to its runner.
pub fn run_scenario(sc: &Scenario) -> Result<ExperimentOutput> {
    match sc.experiment.kind {
        ExperimentKind::Tables => run_tables(sc),
        ExperimentKind::UpperBound => run_upper_bound(sc),
        ExperimentKind::Necessity => run_necessity(sc),
        ExperimentKind::Counterexample => run_counterexample(sc),
        ExperimentKind::SourceHydro => run_source(sc, false),
        ExperimentKind::LocalEquilibrium => run_source(sc, true),
        ExperimentKind::JacksonStationarity => run_jackson(sc),
        ExperimentKind::CouplingAudits => run_audits(sc),
    }
}

// ---------------------------------------------------------------------------
// tables

pub fn run_tables(sc: &Scenario) -> Result<ExperimentOutput> {
    let g = sc.build_rate_function()?;
    let kernel = sc.build_kernel()?;
    if !kernel.is_nearest_neighbour() {
        return Err(Error::InvalidKernel(
            "flux tables need a nearest-neighbour kernel".into(),
        ));
    }
    let p = kernel.p_right();
    let source = match sc.disorder_law()? {
        Some(law) => DensitySource::law(law),
        None => {
            let (lo, hi) = sc.environment.window.ok_or_else(|| {
                Error::InvalidScenario("tables need a disorder law or an explicit window".into())
            })?;
            let window = Window::new(lo, hi);
            let (env, _) = sc.build_environment(window)?;
            let depth = (-window.lo).max(8) as usize;
            DensitySource::empirical(env, depth)
        }
    };
    let cfg = FluxConfig {
        grid: sc.flux_grid(),
        ..FluxConfig::default()
    };
    let tables = FluxTables::build(&source, &g, p, cfg)?;
    let mut out = ExperimentOutput::default();
    let seed = sc.seed.master;
    let name = "tables";
    let mk = |item: &str, value: f64, target: f64, tol: f64, pass: bool| VerdictRow {
        experiment: name.into(),
        item: item.into(),
        horizon: 0.0,
        value,
        target,
        tolerance: tol,
        stderr: 0.0,
        replicas: 0,
        leaks: 0,
        window_lo: 0,
        window_hi: 0,
        seed,
        pass,
    };

    let rho_c = match tables.rho_c() {
        CriticalDensity::Finite(v) => v,
        CriticalDensity::Infinite => f64::INFINITY,
    };
    out.verdicts.push(mk("rho_c", rho_c, rho_c, 0.0, true));
    if let Ok((v0, l0)) = tables.front_speed() {
        out.verdicts.push(mk("v0", v0, v0, 0.0, true));
        out.verdicts.push(mk("lambda0", l0, l0, 0.0, true));
        let h = tables.condition_h()?;
        out.verdicts
            .push(mk("weak_convexity", f64::from(u8::from(h)), 1.0, 0.0, true));
    }

    // internal consistency checks on the grids
    let n = tables.v_grid().len();
    let mut fenchel_violations = 0u64;
    for i in (0..n).step_by(n.div_ceil(256)) {
        let rho = tables.rho_grid()[i];
        let f = tables.f_table()[i];
        for j in (0..n).step_by(n.div_ceil(256)) {
            if f > rho * tables.v_grid()[j] + tables.f_star_table()[j] + 1e-12 {
                fenchel_violations += 1;
            }
        }
    }
    out.verdicts.push(mk(
        "fenchel_violations",
        fenchel_violations as f64,
        0.0,
        0.0,
        fenchel_violations == 0,
    ));

    let fs = tables.f_star_table();
    let vs = tables.v_grid();
    let mut convex_ok = true;
    for j in 1..n - 1 {
        let left = (fs[j] - fs[j - 1]) / (vs[j] - vs[j - 1]);
        let right = (fs[j + 1] - fs[j]) / (vs[j + 1] - vs[j]);
        if right < left - 1e-9 {
            convex_ok = false;
        }
    }
    out.verdicts.push(mk(
        "transform_convex",
        f64::from(u8::from(convex_ok)),
        1.0,
        1e-9,
        convex_ok,
    ));

    let sr = tables.script_r_table();
    let monotone_ok = sr.windows(2).all(|w| w[1] <= w[0] + 1e-9);
    out.verdicts.push(mk(
        "carried_density_monotone",
        f64::from(u8::from(monotone_ok)),
        1.0,
        1e-9,
        monotone_ok,
    ));

    out.files.push(("tables.csv".into(), tables.to_csv()));
    Ok(out)
}

// ---------------------------------------------------------------------------
// upper bound

pub fn run_upper_bound(sc: &Scenario) -> Result<ExperimentOutput> {
    let g = sc.build_rate_function()?;
    let kernel = sc.build_kernel()?;
    if !kernel.is_nearest_neighbour() {
        return Err(Error::InvalidKernel(
            "the critical upper bound needs a nearest-neighbour kernel".into(),
        ));
    }
    let observables = scenario_observables(sc)?;
    let obs_lo = observables.iter().flat_map(|o| o.sites()).min().unwrap();
    let obs_hi = observables.iter().flat_map(|o| o.sites()).max().unwrap();
    let t_max = sc.max_horizon();
    let margin = propagation_margin(t_max, sc.experiment.propagation_speed, sc.experiment.slack);
    let window = Window::new(obs_lo - margin, obs_hi + margin);
    let (env, _warnings) = sc.build_environment(window)?;
    if env.slow_sites().is_none() {
        return Err(Error::InvalidScenario(
            "the upper-bound experiment needs a slow-site witness schedule".into(),
        ));
    }

    let rho_c = match sc.disorder_law()? {
        Some(law) => DensitySource::law(law)
            .critical_density(&g, 1e6)?
            .finite(),
        None => None,
    };
    let fill_lo = window.lo + 24;
    let config = match sc.initial {
        InitialSpec::ProductSample { lambda } => {
            let mu = ProductMeasure::new(&env, lambda, &g)?;
            let full = mu.sample(mix_seed(sc.seed.master, 0x1217));
            Configuration::from_fn(window, |x| {
                if x <= 0 && x >= fill_lo {
                    full.get(x)
                } else {
                    Occupancy::Finite(0)
                }
            })
        }
        _ => left_profile(window, fill_lo, initial_density(sc, rho_c)?),
    };

    let replicas = sc.experiment.replicas;
    let mut horizons = sc.experiment.horizons.clone();
    horizons.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let runs: Vec<(Vec<Configuration>, u64)> = (0..replicas)
        .into_par_iter()
        .map(|rep| {
            let mut set = ReplicaSet::new(
                replica_seed(sc.seed.master, rep),
                window,
                kernel.clone(),
                g.clone(),
            );
            let idx = set.add_replica(env.clone(), config.clone());
            let mut snaps = Vec::with_capacity(horizons.len());
            for &t in &horizons {
                set.advance(t);
                snaps.push(set.replica(idx).config().clone());
            }
            (snaps, set.replica(idx).leaks())
        })
        .collect();
    let leaks: u64 = runs.iter().map(|(_, l)| l).sum();

    // exact expectations under the critical product measure near the origin
    let local = Window::new(obs_lo - 1, obs_hi + 1);
    let mu_c = ProductMeasure::from_params(local, &g, |x| env.c() / env.alpha(x))?;

    let mut files_body = String::from("horizon,observable,mc_mean,stderr,exact,z\n");
    let mut verdicts = Vec::new();
    for (hi, &t) in horizons.iter().enumerate() {
        let ensemble: Vec<Configuration> = runs.iter().map(|(s, _)| s[hi].clone()).collect();
        let reports = compare_to_product_measure(&ensemble, &mu_c, &observables)?;
        for r in &reports {
            files_body.push_str(&format!(
                "{},{},{},{},{},{}\n",
                fmt_f64(t),
                r.label,
                fmt_f64(r.mc_mean),
                fmt_f64(r.stderr),
                fmt_f64(r.exact),
                fmt_f64(r.z)
            ));
            if hi == horizons.len() - 1 {
                let tol = 3.0 * r.stderr;
                verdicts.push(VerdictRow {
                    experiment: "upper_bound".into(),
                    item: r.label.clone(),
                    horizon: t,
                    value: r.mc_mean,
                    target: r.exact,
                    tolerance: tol,
                    stderr: r.stderr,
                    replicas,
                    leaks,
                    window_lo: window.lo,
                    window_hi: window.hi,
                    seed: sc.seed.master,
                    pass: leaks == 0 && r.mc_mean <= r.exact + tol,
                });
            }
        }
    }
    let (snaps, events) = snapshot_artifacts(
        replica_seed(sc.seed.master, 0),
        window,
        &kernel,
        &g,
        &env,
        &config,
        &horizons,
    );
    Ok(ExperimentOutput {
        verdicts,
        files: vec![
            ("reports.csv".into(), files_body),
            ("snapshots.csv".into(), snaps),
            ("event_counts.csv".into(), events),
        ],
    })
}

// ---------------------------------------------------------------------------
// necessity

pub fn run_necessity(sc: &Scenario) -> Result<ExperimentOutput> {
    let g = sc.build_rate_function()?;
    let kernel = sc.build_kernel()?;
    if !kernel.is_nearest_neighbour() {
        return Err(Error::InvalidKernel(
            "the necessity experiment needs a nearest-neighbour kernel".into(),
        ));
    }
    let p = kernel.p_right();
    let drift = kernel.drift();
    let t_max = sc.max_horizon();
    let margin = propagation_margin(t_max, sc.experiment.propagation_speed, sc.experiment.slack);
    let window = Window::new(-margin, margin);
    let (env, _) = sc.build_environment(window)?;
    if env.slow_sites().is_none() {
        return Err(Error::InvalidScenario(
            "the necessity experiment needs a slow-site witness schedule".into(),
        ));
    }

    // flux targets from the annealed law when one is given; a finite-window
    // average would overweight the sparse witness sites near the critical
    // fugacity, where their per-site occupancy diverges even though they
    // carry no density in the limit
    let source = match sc.disorder_law()? {
        Some(law) => DensitySource::law(law),
        None => DensitySource::empirical(env.clone(), (-window.lo) as usize),
    };
    let tables = FluxTables::build(
        &source,
        &g,
        p,
        FluxConfig {
            grid: sc.flux_grid(),
            ..FluxConfig::default()
        },
    )?;
    let rho_c = tables
        .rho_c()
        .finite()
        .ok_or(Error::CriticalDensityInfinite)?;
    let rho = initial_density(sc, Some(rho_c))?;
    if rho >= rho_c {
        return Err(Error::InvalidScenario(format!(
            "necessity needs a strictly subcritical density, got {rho} >= {rho_c}"
        )));
    }

    let config = left_profile(window, window.lo + 24, rho);
    let mut horizons = sc.experiment.horizons.clone();
    horizons.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let replicas = sc.experiment.replicas;

    let runs: Vec<(Vec<i64>, u64)> = (0..replicas)
        .into_par_iter()
        .map(|rep| {
            let mut set = ReplicaSet::new(
                replica_seed(sc.seed.master, rep),
                window,
                kernel.clone(),
                g.clone(),
            );
            let idx = set.add_replica(env.clone(), config.clone());
            set.attach_tracker(idx, ObserverPath::fixed(0));
            let mut currents = Vec::with_capacity(horizons.len());
            for &t in &horizons {
                set.advance(t);
                currents.push(set.current(idx, 0));
            }
            (currents, set.replica(idx).leaks())
        })
        .collect();
    let leaks: u64 = runs.iter().map(|(_, l)| l).sum();

    let mut trend = String::from("horizon,mean_current_rate,stderr\n");
    let mut est = (0.0, 0.0);
    for (hi, &t) in horizons.iter().enumerate() {
        let rates: Vec<f64> = runs.iter().map(|(c, _)| c[hi] as f64 / t).collect();
        est = mean_stderr(&rates);
        trend.push_str(&format!(
            "{},{},{}\n",
            fmt_f64(t),
            fmt_f64(est.0),
            fmt_f64(est.1)
        ));
    }
    let (estimate, stderr) = est;

    let fhat = tables.f_hat(rho)?;
    // independent minimization of rho v + f*(v) over the speed grid
    let mut zmin = f64::INFINITY;
    for (j, &v) in tables.v_grid().iter().enumerate() {
        zmin = zmin.min(rho * v + tables.f_star_table()[j]);
    }
    let critical_current = drift * env.c();
    let tol = (0.02 * critical_current).max(3.0 * stderr);

    let mk = |item: &str, value: f64, target: f64, tolerance: f64, pass: bool| VerdictRow {
        experiment: "necessity".into(),
        item: item.into(),
        horizon: t_max,
        value,
        target,
        tolerance,
        stderr,
        replicas,
        leaks,
        window_lo: window.lo,
        window_hi: window.hi,
        seed: sc.seed.master,
        pass: pass && leaks == 0,
    };
    let verdicts = vec![
        mk(
            "current_below_envelope",
            estimate,
            fhat,
            tol,
            estimate <= fhat + tol,
        ),
        mk(
            "separated_from_critical_current",
            estimate,
            critical_current,
            5.0 * stderr,
            critical_current - estimate >= 5.0 * stderr,
        ),
        mk(
            "envelope_consistency",
            zmin,
            fhat,
            1e-6,
            (zmin - fhat).abs() <= 1e-6,
        ),
    ];
    let (snaps, events) = snapshot_artifacts(
        replica_seed(sc.seed.master, 0),
        window,
        &kernel,
        &g,
        &env,
        &config,
        &horizons,
    );
    Ok(ExperimentOutput {
        verdicts,
        files: vec![
            ("currents.csv".into(), trend),
            ("snapshots.csv".into(), snaps),
            ("event_counts.csv".into(), events),
        ],
    })
}

// ---------------------------------------------------------------------------
// counterexample

/// The staircase initial condition: spike positions, gaps, horizons and
/// heights.
#[derive(Clone, Debug)]
pub struct CounterexampleBlueprint {
    /// spike positions `x_0 = 0 > x_1 > ...`, one past the last spike
    pub positions: Vec<i64>,
    /// gaps `|x_{n+1} - x_n|`
    pub gaps: Vec<u64>,
    /// measurement horizons `t_n = gap_n / (1 + V)` for `n >= 1`
    pub horizons: Vec<f64>,
    /// spike heights at `positions[0..=n_max]`
    pub spikes: Vec<u64>,
    /// partial densities `sum_{i<n} y_i / |x_n|`
    pub partial_densities: Vec<f64>,
    /// density the spikes aim for
    pub rho_target: f64,
}

impl CounterexampleBlueprint {
    pub fn n_max(&self) -> usize {
        self.spikes.len() - 1
    }

    /// Spike configuration on `window`.
    pub fn configuration(&self, window: Window) -> Result<Configuration> {
        for (i, &x) in self.positions[..self.spikes.len()].iter().enumerate() {
            if self.spikes[i] > 0 && !window.contains(x) {
                return Err(Error::WindowTooSmall(format!(
                    "spike at {x} outside window"
                )));
            }
        }
        let mut cfg = Configuration::empty(window);
        for (i, &x) in self.positions[..self.spikes.len()].iter().enumerate() {
            cfg.set(x, Occupancy::Finite(self.spikes[i]));
        }
        Ok(cfg)
    }

    /// Total spike mass strictly right of `positions[n]`.
    pub fn mass_right_of(&self, n: usize) -> u64 {
        self.spikes[..n.min(self.spikes.len())].iter().sum()
    }
}

/// Build the spike staircase for a totally asymmetric kernel with
/// `p(1) < 1`: gaps `d0 * n!`, horizons `gap/(1+V)`, spike heights
/// `floor(rho gap)` with `rho` the critical density (or a slowly diverging
/// schedule when the critical density is infinite).
pub fn build_counterexample(
    rho_c: CriticalDensity,
    kernel: &JumpKernel,
    n_max: u32,
    d0: u64,
    speed: f64,
) -> Result<CounterexampleBlueprint> {
    if !kernel.is_totally_asymmetric() || kernel.p_right() >= 1.0 {
        return Err(Error::InvalidBlueprint(
            "the construction needs a totally asymmetric kernel with p(1) < 1".into(),
        ));
    }
    if d0 == 0 || n_max == 0 {
        return Err(Error::InvalidBlueprint("need d0 >= 1 and n_max >= 1".into()));
    }
    let mut gaps = Vec::with_capacity(n_max as usize + 2);
    let mut factorial = 1u64;
    for n in 0..=(n_max as u64 + 1) {
        if n > 0 {
            factorial = factorial
                .checked_mul(n)
                .ok_or_else(|| Error::InvalidBlueprint("factorial gap overflow".into()))?;
        }
        gaps.push(
            d0.checked_mul(factorial)
                .ok_or_else(|| Error::InvalidBlueprint("gap overflow".into()))?,
        );
    }
    build_counterexample_with_gaps(rho_c, kernel, &gaps[..=n_max as usize], speed)
}

/// Same construction with explicit gaps; rejects gap sequences whose
/// position-to-gap ratios do not decay.
pub fn build_counterexample_with_gaps(
    rho_c: CriticalDensity,
    kernel: &JumpKernel,
    gaps: &[u64],
    speed: f64,
) -> Result<CounterexampleBlueprint> {
    if !kernel.is_totally_asymmetric() || kernel.p_right() >= 1.0 {
        return Err(Error::InvalidBlueprint(
            "the construction needs a totally asymmetric kernel with p(1) < 1".into(),
        ));
    }
    if speed <= 1.0 {
        return Err(Error::InvalidBlueprint("propagation speed must exceed 1".into()));
    }
    let n_max = gaps.len() - 1;
    let mut positions = Vec::with_capacity(n_max + 2);
    positions.push(0i64);
    for &gap in gaps {
        let prev = *positions.last().unwrap();
        positions.push(prev - gap as i64);
    }
    // position-to-gap ratios must decay toward zero: decreasing past the
    // first step and small at the end, which factorial gaps satisfy and
    // geometric ones do not
    let ratios: Vec<f64> = (1..=n_max)
        .map(|n| (-positions[n]) as f64 / gaps[n] as f64)
        .collect();
    if let Some(&last) = ratios.last() {
        let tail_decreasing = ratios.windows(2).skip(1).all(|w| w[1] < w[0] + 1e-12);
        if !(tail_decreasing && last < 0.75) {
            return Err(Error::InvalidBlueprint(format!(
                "position-to-gap ratios do not vanish (last ratio {last:.3}); \
                 gaps must grow super-geometrically"
            )));
        }
    }

    let rho = |n: usize| match rho_c {
        CriticalDensity::Finite(r) => r,
        // slowly diverging density schedule for an infinite critical density
        CriticalDensity::Infinite => ((n + 2) as f64).ln(),
    };
    // the critical density is known to ~1e-6; floors are taken against the
    // upper edge of that tolerance so integer products do not round down
    let spikes: Vec<u64> = (0..=n_max)
        .map(|n| ((rho(n) + 1e-6) * gaps[n] as f64).floor() as u64)
        .collect();
    let horizons: Vec<f64> = (1..=n_max)
        .map(|n| gaps[n] as f64 / (1.0 + speed))
        .collect();
    let partial_densities: Vec<f64> = (1..=n_max + 1)
        .map(|n| {
            let mass: u64 = spikes[..n.min(spikes.len())].iter().sum();
            mass as f64 / (-positions[n]) as f64
        })
        .collect();
    let rho_target = match rho_c {
        CriticalDensity::Finite(r) => r,
        CriticalDensity::Infinite => f64::INFINITY,
    };
    Ok(CounterexampleBlueprint {
        positions,
        gaps: gaps.to_vec(),
        horizons,
        spikes,
        partial_densities,
        rho_target,
    })
}

pub fn run_counterexample(sc: &Scenario) -> Result<ExperimentOutput> {
    let g = sc.build_rate_function()?;
    let kernel = sc.build_kernel()?;
    let section = sc.counterexample.ok_or_else(|| {
        Error::InvalidScenario("counterexample experiment needs a [counterexample] section".into())
    })?;
    let law = sc
        .disorder_law()?
        .ok_or_else(|| Error::InvalidScenario("counterexample needs a disorder law".into()))?;
    let rho_c = DensitySource::law(law).critical_density(&g, 1e6)?;
    let speed = sc.experiment.propagation_speed;
    let blueprint = build_counterexample(rho_c, &kernel, section.n_max, section.d0, speed)?;

    let c = sc.environment.c;
    let n_max = blueprint.n_max();
    let t_last = *blueprint.horizons.last().unwrap();
    let margin = propagation_margin(t_last, speed, sc.experiment.slack);
    let deepest = blueprint.positions[n_max];
    let window = Window::new(deepest - 8, margin);

    // slow rates at the spike positions, base rate elsewhere
    let slow_positions: Vec<i64> = blueprint.positions[1..=n_max].to_vec();
    let env = Environment::from_parts(
        window,
        c,
        window
            .sites()
            .map(|x| {
                match blueprint.positions[..=n_max].iter().position(|&p| p == x) {
                    Some(n) => (c + 1.0 / (n as f64 + 2.0)).min(1.0),
                    None => 1.0,
                }
            })
            .collect(),
        Some(slow_positions),
    )?;
    let config = blueprint.configuration(window)?;
    let replicas = sc.experiment.replicas;
    let watch_site = blueprint.positions[n_max];
    let right_mass = blueprint.mass_right_of(n_max) as i64;

    struct Run {
        currents: Vec<i64>,
        rings_at_watch: Vec<u64>,
        ledger_ok: bool,
        leaks: u64,
    }
    let horizons = blueprint.horizons.clone();
    let runs: Vec<Run> = (0..replicas)
        .into_par_iter()
        .map(|rep| {
            let mut set = ReplicaSet::new(
                replica_seed(sc.seed.master, rep),
                window,
                kernel.clone(),
                g.clone(),
            );
            let idx = set.add_replica(env.clone(), config.clone());
            set.attach_tracker(idx, ObserverPath::fixed(0));
            let mut rings = 0u64;
            let mut currents = Vec::with_capacity(horizons.len());
            let mut rings_at_watch = Vec::with_capacity(horizons.len());
            let mut ledger_ok = true;
            for &t in &horizons {
                // count potential rightward jumps at the deepest spike while
                // advancing
                set.advance_with(t, |_, ev| {
                    if ev.site == watch_site {
                        rings += 1;
                    }
                    true
                });
                let gamma = set.current(idx, 0);
                currents.push(gamma);
                rings_at_watch.push(rings);
                // pathwise bound: crossings cannot exceed potential
                // departures from the deepest spike plus the mass that
                // started right of it
                if gamma > rings as i64 + right_mass {
                    ledger_ok = false;
                }
            }
            Run {
                currents,
                rings_at_watch,
                ledger_ok,
                leaks: set.replica(idx).leaks(),
            }
        })
        .collect();

    let leaks: u64 = runs.iter().map(|r| r.leaks).sum();
    let ledger_violations = runs.iter().filter(|r| !r.ledger_ok).count() as u64;

    let mut trend = String::from("horizon,mean_current_rate,stderr,mean_ring_rate\n");
    let mut est = (0.0, 0.0);
    for (hi, &t) in horizons.iter().enumerate() {
        let rates: Vec<f64> = runs.iter().map(|r| r.currents[hi] as f64 / t).collect();
        let rings: Vec<f64> = runs.iter().map(|r| r.rings_at_watch[hi] as f64 / t).collect();
        est = mean_stderr(&rates);
        let (ring_mean, _) = mean_stderr(&rings);
        trend.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(t),
            fmt_f64(est.0),
            fmt_f64(est.1),
            fmt_f64(ring_mean)
        ));
    }
    let (estimate, stderr) = est;
    let target = c * kernel.drift();
    let density = blueprint.partial_densities[n_max];

    let mk = |item: &str, value: f64, target: f64, tolerance: f64, pass: bool| VerdictRow {
        experiment: "counterexample".into(),
        item: item.into(),
        horizon: t_last,
        value,
        target,
        tolerance,
        stderr,
        replicas,
        leaks,
        window_lo: window.lo,
        window_hi: window.hi,
        seed: sc.seed.master,
        pass: pass && leaks == 0,
    };
    let verdicts = vec![
        mk(
            "current_near_infimum",
            estimate,
            c,
            0.05 * c,
            estimate <= c + 0.05 * c,
        ),
        mk(
            "critical_target_separated",
            estimate,
            target,
            5.0 * stderr,
            target - estimate >= 5.0 * stderr,
        ),
        mk(
            "supercritical_density",
            density,
            blueprint.rho_target,
            0.02 * blueprint.rho_target,
            (density - blueprint.rho_target).abs() <= 0.02 * blueprint.rho_target,
        ),
        mk(
            "pathwise_ledger",
            ledger_violations as f64,
            0.0,
            0.0,
            ledger_violations == 0,
        ),
    ];
    let (snaps, events) = snapshot_artifacts(
        replica_seed(sc.seed.master, 0),
        window,
        &kernel,
        &g,
        &env,
        &config,
        &horizons,
    );
    Ok(ExperimentOutput {
        verdicts,
        files: vec![
            ("currents.csv".into(), trend),
            ("snapshots.csv".into(), snaps),
            ("event_counts.csv".into(), events),
        ],
    })
}

// ---------------------------------------------------------------------------
// source hydrodynamics and local equilibrium

pub fn run_source(sc: &Scenario, local_mode: bool) -> Result<ExperimentOutput> {
    let g = sc.build_rate_function()?;
    let kernel = sc.build_kernel()?;
    if !kernel.is_nearest_neighbour() {
        return Err(Error::InvalidKernel(
            "source hydrodynamics needs a nearest-neighbour kernel".into(),
        ));
    }
    let p = kernel.p_right();
    let source = sc
        .source
        .clone()
        .ok_or_else(|| Error::InvalidScenario("needs a [source] section".into()))?;
    if source.beta >= 0.0 {
        return Err(Error::InvalidScenario("source speed must be negative".into()));
    }
    let law = sc
        .disorder_law()?
        .ok_or_else(|| Error::InvalidScenario("source hydrodynamics needs a disorder law".into()))?;
    let tables = FluxTables::build(
        &DensitySource::law(law),
        &g,
        p,
        FluxConfig {
            grid: sc.flux_grid(),
            ..FluxConfig::default()
        },
    )?;

    let t = sc.max_horizon();
    let edge = (source.beta * t).floor() as i64;
    let speeds = if local_mode {
        &source.local_speeds
    } else {
        &source.tail_speeds
    };
    if speeds.is_empty() {
        return Err(Error::InvalidScenario("no observation speeds given".into()));
    }
    for &v in speeds {
        if !(v > 0.0 && v <= -source.beta) {
            return Err(Error::InvalidScenario(format!(
                "observation speed {v} outside (0, {}]",
                -source.beta
            )));
        }
    }
    let max_speed = speeds.iter().copied().fold(0.0f64, f64::max);
    let rightmost = (edge + (max_speed * t).floor() as i64).max(0);
    let margin = propagation_margin(t, sc.experiment.propagation_speed, sc.experiment.slack);
    let window = Window::new(edge - 2, rightmost + margin);
    let (env, _) = sc.build_environment(window)?;

    let replicas = sc.experiment.replicas;
    let runs: Vec<(Configuration, u64)> = (0..replicas)
        .into_par_iter()
        .map(|rep| {
            let run = crate::harris::run_source_process(
                &env,
                &kernel,
                &g,
                source.beta,
                t,
                replica_seed(sc.seed.master, rep),
            )
            .expect("window planned for the source run");
            (run.config, run.leaks)
        })
        .collect();
    let leaks: u64 = runs.iter().map(|(_, l)| l).sum();

    let mut verdicts = Vec::new();
    let mut body = String::new();
    if !local_mode {
        body.push_str("speed,mean_tail_rate,stderr,target\n");
        for &v in speeds {
            let cut = edge + (v * t).floor() as i64;
            let values: Vec<f64> = runs
                .iter()
                .map(|(cfg, _)| cfg.total_mass(cut + 1, window.hi).unwrap() as f64 / t)
                .collect();
            let (mean, stderr) = mean_stderr(&values);
            let target = tables.f_star(v)?;
            let tol = (0.1 * target).max(3.0 * stderr);
            body.push_str(&format!(
                "{},{},{},{}\n",
                fmt_f64(v),
                fmt_f64(mean),
                fmt_f64(stderr),
                fmt_f64(target)
            ));
            verdicts.push(VerdictRow {
                experiment: "source_hydro".into(),
                item: format!("tail_rate(v={v})"),
                horizon: t,
                value: mean,
                target,
                tolerance: tol,
                stderr,
                replicas,
                leaks,
                window_lo: window.lo,
                window_hi: window.hi,
                seed: sc.seed.master,
                pass: leaks == 0 && (mean - target).abs() <= tol,
            });
        }
    } else {
        body.push_str("speed,observable,mc_mean,stderr,exact,z\n");
        let (v0, _) = tables.front_speed()?;
        for &v in speeds {
            let location = edge + (v * t).floor() as i64;
            let lambda = tables.lambda_minus(v)?;
            let local = Window::new(location - 1, location + 2);
            let mu = ProductMeasure::from_params(local, &g, |x| lambda / env.alpha(x))?;
            let observables: Vec<Observable> = [
                (location, ObservableKind::Threshold(1)),
                (location, ObservableKind::Threshold(2)),
                (location, ObservableKind::MinCap(2)),
                (location + 1, ObservableKind::Threshold(1)),
                (location + 1, ObservableKind::MinCap(2)),
            ]
            .into_iter()
            .map(|(s, k)| Observable::new(vec![(s, k)]).unwrap())
            .collect();
            let ensemble: Vec<Configuration> = runs.iter().map(|(c, _)| c.clone()).collect();
            let reports = compare_to_product_measure(&ensemble, &mu, &observables)?;
            for r in &reports {
                body.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    fmt_f64(v),
                    r.label,
                    fmt_f64(r.mc_mean),
                    fmt_f64(r.stderr),
                    fmt_f64(r.exact),
                    fmt_f64(r.z)
                ));
                let below_front = v < v0;
                verdicts.push(VerdictRow {
                    experiment: "local_equilibrium".into(),
                    item: format!("v={v} {} (lambda={lambda:.6}{})", r.label, if below_front { ", behind front" } else { "" }),
                    horizon: t,
                    value: r.mc_mean,
                    target: r.exact,
                    tolerance: 3.0 * r.stderr,
                    stderr: r.stderr,
                    replicas,
                    leaks,
                    window_lo: window.lo,
                    window_hi: window.hi,
                    seed: sc.seed.master,
                    pass: leaks == 0 && r.mc_mean >= r.exact - 3.0 * r.stderr,
                });
            }
        }
    }
    let (snaps, events) = snapshot_artifacts(
        replica_seed(sc.seed.master, 0),
        window,
        &kernel,
        &g,
        &env,
        &Configuration::source_block(window, edge),
        &[t],
    );
    Ok(ExperimentOutput {
        verdicts,
        files: vec![
            ("reports.csv".into(), body),
            ("snapshots.csv".into(), snaps),
            ("event_counts.csv".into(), events),
        ],
    })
}

// ---------------------------------------------------------------------------
// open-segment checks

pub fn run_jackson(sc: &Scenario) -> Result<ExperimentOutput> {
    let g = sc.build_rate_function()?;
    let section = sc.jackson.unwrap_or_default();
    let law = sc
        .disorder_law()?
        .unwrap_or(DisorderLaw::polynomial(sc.environment.c, 1)?);
    let master = sc.seed.master;

    // closed-form residuals over random instances
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(master, 0xA11));
    let mut residual_failures = 0u64;
    let mut bracket_failures = 0u64;
    for trial in 0..section.closed_form_trials {
        let l = -(rng.gen_range(2..14) as i64);
        let r = rng.gen_range(2..14) as i64;
        let p: f64 = 0.55 + 0.45 * rng.gen::<f64>();
        let w = Window::new(l - 1, r + 1);
        let (env, _) = build_environment_iid(&law, w, mix_seed(master, trial as u64))?;
        let profile = solve_profile(&env, p, l, r)?;
        for x in (l + 1)..r {
            if profile.residual(x).abs() > 1e-12 {
                residual_failures += 1;
            }
            let (lo, hi) = (
                env.alpha(l).min(env.alpha(r)) - 1e-12,
                env.alpha(l).max(env.alpha(r)) + 1e-12,
            );
            if profile.lambda(x) < lo || profile.lambda(x) > hi {
                bracket_failures += 1;
            }
        }
    }

    // totally asymmetric profiles are flat at the left boundary rate
    let w = Window::new(-10, 10);
    let (env, _) = build_environment_iid(&law, w, mix_seed(master, 0xF1A7))?;
    let profile = solve_profile(&env, 1.0, -10, 10)?;
    let flat_ok = (-9..10).all(|x| (profile.lambda(x) - env.alpha(-10)).abs() < 1e-12);

    // stationarity: start from the invariant measure, compare time-averaged
    // occupancies with the exact marginal means
    let l = 0i64;
    let r = section.interior_sites + 1;
    let w = Window::new(l, r);
    let mut env = Environment::from_fn(w, sc.environment.c, |x| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(master ^ 0x5A5A, x as u64));
        0.78 + 0.2 * rng.gen::<f64>()
    })?;
    env = env.with_rate(l, sc.environment.c + 0.12)?;
    env = env.with_rate(r, sc.environment.c + 0.16)?;
    let kernel = sc.build_kernel()?;
    let p = if kernel.is_nearest_neighbour() {
        kernel.p_right()
    } else {
        0.75
    };
    let kernel = JumpKernel::nearest_neighbour(p)?;
    let profile = solve_profile(&env, p, l, r)?;
    let mu = invariant_measure(&profile, &env, &g)?;
    let interior = Window::new(l + 1, r - 1);
    let t = section.horizon;
    let replicas = sc.experiment.replicas;
    let per_rep: Vec<Vec<f64>> = (0..replicas)
        .into_par_iter()
        .map(|rep| {
            let sample = mu.sample(mix_seed(master, 0xBEE ^ rep));
            let cfg = Configuration::from_fn(w, |x| {
                if x == l || x == r {
                    Occupancy::Infinite
                } else {
                    sample.get(x)
                }
            });
            let mut set = ReplicaSet::new(replica_seed(master, rep), w, kernel.clone(), g.clone());
            let idx = set.add_replica(env.clone(), cfg);
            let mut acc = vec![0.0f64; interior.len()];
            let mut snaps = 0u32;
            let mut t_next = 1.0;
            while t_next <= t {
                set.advance(t_next);
                for x in interior.sites() {
                    acc[interior.index(x)] +=
                        set.replica(idx).config().get(x).finite().unwrap() as f64;
                }
                snaps += 1;
                t_next += 1.0;
            }
            acc.iter().map(|a| a / snaps as f64).collect()
        })
        .collect();
    // three-process domination audit on a slow-site environment
    let audit_w = Window::new(-60, 60);
    let (audit_base, _) = build_environment_iid(&law, audit_w, mix_seed(master, 0x5a17))?;
    let schedule: Vec<(i64, f64)> = (1..=25)
        .map(|k| (-k, (sc.environment.c + 1.0 / (k as f64 + 2.0)).min(1.0)))
        .collect();
    let (audit_env, _) =
        crate::model::build_environment_with_slow_sites(&audit_base, &schedule)?;
    let mut sandwich_violations = 0u64;
    let mut sandwich_leaks = 0u64;
    for trial in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(master, 0x5a20 ^ trial));
        let fill_lo = audit_w.lo + 24;
        let eta0 = Configuration::from_fn(audit_w, |x| {
            Occupancy::Finite(if x <= 0 && x >= fill_lo { rng.gen_range(0..4) } else { 0 })
        });
        let report = sandwich_audit(
            &audit_env,
            &eta0,
            &kernel,
            &g,
            0.1,
            30.0,
            mix_seed(master, 0x5a30 ^ trial),
        )?;
        sandwich_violations += report.violations;
        sandwich_leaks += report.leaks;
    }

    let mut passing = 0u64;
    let mut body = String::from("site,mean_occupancy,stderr,exact\n");
    for x in interior.sites() {
        let i = interior.index(x);
        let values: Vec<f64> = per_rep.iter().map(|v| v[i]).collect();
        let (mean, stderr) = mean_stderr(&values);
        let exact = mu.law(x).mean();
        if (mean - exact).abs() <= 3.0 * stderr {
            passing += 1;
        }
        body.push_str(&format!(
            "{x},{},{},{}\n",
            fmt_f64(mean),
            fmt_f64(stderr),
            fmt_f64(exact)
        ));
    }
    let frac = passing as f64 / interior.len() as f64;

    let mk = |item: &str, value: f64, target: f64, tolerance: f64, pass: bool| VerdictRow {
        experiment: "jackson_stationarity".into(),
        item: item.into(),
        horizon: t,
        value,
        target,
        tolerance,
        stderr: 0.0,
        replicas,
        leaks: 0,
        window_lo: w.lo,
        window_hi: w.hi,
        seed: master,
        pass,
    };
    let verdicts = vec![
        mk(
            "closed_form_residuals",
            residual_failures as f64,
            0.0,
            1e-12,
            residual_failures == 0,
        ),
        mk(
            "profile_bracket",
            bracket_failures as f64,
            0.0,
            1e-12,
            bracket_failures == 0,
        ),
        mk(
            "totally_asymmetric_flat",
            f64::from(u8::from(flat_ok)),
            1.0,
            1e-12,
            flat_ok,
        ),
        mk("stationarity_sites_within_3sigma", frac, 0.95, 0.0, frac >= 0.95),
        mk(
            "sandwich_violations",
            sandwich_violations as f64,
            0.0,
            0.0,
            sandwich_violations == 0 && sandwich_leaks == 0,
        ),
    ];
    Ok(ExperimentOutput {
        verdicts,
        files: vec![
            ("occupancy.csv".into(), body),
            ("profile.csv".into(), profile.to_csv(&env)),
        ],
    })
}

// ---------------------------------------------------------------------------
// coupling audits

pub fn run_audits(sc: &Scenario) -> Result<ExperimentOutput> {
    let g = sc.build_rate_function()?;
    let section = sc.audits.unwrap_or_default();
    let master = sc.seed.master;
    let law = sc
        .disorder_law()?
        .unwrap_or(DisorderLaw::polynomial(sc.environment.c, 1)?);
    let hw = section.half_width;
    let window = Window::new(-hw, hw);
    let t = section.horizon;
    let trials = section.trials;

    let results: Vec<(bool, bool, bool, bool)> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(master, trial as u64));
            let (env, _) =
                build_environment_iid(&law, window, mix_seed(master, 0xE0 ^ trial as u64)).unwrap();
            let p = 0.55 + 0.45 * rng.gen::<f64>();
            let kernel = JumpKernel::nearest_neighbour(p).unwrap();
            let fill = hw - 6;
            let lower = Configuration::from_fn(window, |x| {
                Occupancy::Finite(if x.abs() < fill { rng.gen_range(0..3) } else { 0 })
            });
            let mut upper = lower.clone();
            for x in window.sites() {
                if x.abs() < fill && rng.gen_bool(0.3) {
                    upper.set(x, upper.get(x).arrive());
                }
            }

            // coordinatewise order under the shared stream
            let seed = mix_seed(master, 0xAB ^ trial as u64);
            let mut set = ReplicaSet::new(seed, window, kernel.clone(), g.clone());
            let a = set.add_replica(env.clone(), lower.clone());
            let b = set.add_replica(env.clone(), upper.clone());
            let attractive = set.advance_with(t, |set, _| {
                set.replica(a).config().dominated_by(set.replica(b).config())
            });

            // current comparison against the initial height bound
            let other = Configuration::from_fn(window, |x| {
                Occupancy::Finite(if x.abs() < fill { rng.gen_range(0..3) } else { 0 })
            });
            let cmp = audit_current_comparison(
                &env,
                &kernel,
                &g,
                &lower,
                &other,
                &ObserverPath::fixed(0),
                t,
                mix_seed(master, 0xCC ^ trial as u64),
            )
            .map(|c| c.ok)
            .unwrap_or(false);

            // reservoir-block domination
            let y = rng.gen_range(-(fill - 2)..0);
            let z = rng.gen_range(y.max(-3)..6);
            let dom = audit_block_domination(
                &env,
                &kernel,
                &g,
                &lower,
                y,
                z,
                t,
                mix_seed(master, 0xDD ^ trial as u64),
            )
            .map(|d| d.ok)
            .unwrap_or(false);

            // shifted label order with one extra particle at the origin
            let mut more = lower.clone();
            more.set(0, more.get(0).arrive());
            let mut set = ReplicaSet::new(
                mix_seed(master, 0xEE ^ trial as u64),
                window,
                kernel,
                g.clone(),
            );
            let hi_idx = set.add_replica(env.clone(), more);
            let lo_idx = set.add_replica(env.clone(), lower);
            set.attach_labels(hi_idx, 0).unwrap();
            set.attach_labels(lo_idx, 0).unwrap();
            let labels = label_order_check(&mut set, hi_idx, lo_idx, 1, t).unwrap_or(false);

            (attractive, cmp, dom, labels)
        })
        .collect();

    let count_fail = |f: fn(&(bool, bool, bool, bool)) -> bool| {
        results.iter().filter(|r| !f(r)).count() as u64
    };
    let attract_fail = count_fail(|r| r.0);
    let cmp_fail = count_fail(|r| r.1);
    let dom_fail = count_fail(|r| r.2);
    let label_fail = count_fail(|r| r.3);

    // finite propagation probe: disagreement just outside the interval,
    // interior monitored at the configured speed, window padded so nothing
    // reaches the boundary within the horizon
    let inner = hw * 2;
    let pad = (section.propagation_speed * section.propagation_horizon).ceil() as i64 + 14;
    let prop_window = Window::new(-(inner + 12 + pad), inner + 12 + pad);
    let (prop_env, _) = build_environment_iid(&law, prop_window, mix_seed(master, 0xF00))?;
    let kernel = JumpKernel::nearest_neighbour(0.8)?;
    let zeta = Configuration::from_fn(prop_window, |x| {
        Occupancy::Finite(if x.abs() < inner { (x.abs() % 2) as u64 } else { 0 })
    });
    let mut zeta_prime = zeta.clone();
    for x in prop_window.sites() {
        if x.abs() >= inner && x.abs() <= inner + 12 {
            zeta_prime.set(x, Occupancy::Finite(4));
        }
    }
    let probe = finite_propagation_probe(
        &prop_env,
        &kernel,
        &g,
        &zeta,
        &zeta_prime,
        (-inner, inner),
        section.propagation_speed,
        section.propagation_horizon,
        section.propagation_trials,
        mix_seed(master, 0xF0F),
    )?;

    let mk = |item: &str, value: f64, pass: bool, n: u64| VerdictRow {
        experiment: "coupling_audits".into(),
        item: item.into(),
        horizon: t,
        value,
        target: 0.0,
        tolerance: 0.0,
        stderr: 0.0,
        replicas: n,
        leaks: 0,
        window_lo: window.lo,
        window_hi: window.hi,
        seed: master,
        pass,
    };
    let mut verdicts = vec![
        mk("attractiveness_violations", attract_fail as f64, attract_fail == 0, trials as u64),
        mk("current_comparison_violations", cmp_fail as f64, cmp_fail == 0, trials as u64),
        mk("block_domination_violations", dom_fail as f64, dom_fail == 0, trials as u64),
        mk("label_order_violations", label_fail as f64, label_fail == 0, trials as u64),
        mk(
            "propagation_interior_violations",
            probe.violations as f64,
            probe.violations == 0 && probe.leaks == 0,
            probe.trials as u64,
        ),
    ];

    let mut files = Vec::new();
    if let Some(dom) = sc.domination {
        let (rows, body) = run_domination_probe(sc, &g, dom)?;
        verdicts.extend(rows);
        files.push(("domination.csv".into(), body));
    }
    Ok(ExperimentOutput { verdicts, files })
}

/// Statistical illustration: how often the free supercritical process
/// dominates the source process right of the bottleneck site.
fn run_domination_probe(
    sc: &Scenario,
    g: &RateFunction,
    dom: crate::scenario::DominationSection,
) -> Result<(Vec<VerdictRow>, String)> {
    let kernel = sc.build_kernel()?;
    if !kernel.is_nearest_neighbour() {
        return Err(Error::InvalidKernel(
            "the domination probe needs a nearest-neighbour kernel".into(),
        ));
    }
    let law = sc
        .disorder_law()?
        .ok_or_else(|| Error::InvalidScenario("domination probe needs a disorder law".into()))?;
    let tables = FluxTables::build(
        &DensitySource::law(law),
        g,
        kernel.p_right(),
        FluxConfig {
            grid: 1024,
            ..FluxConfig::default()
        },
    )?;
    let (v0, _) = tables.front_speed()?;
    if v0 <= 0.0 {
        return Err(Error::InvalidScenario(
            "domination probe needs a positive front speed".into(),
        ));
    }
    let beta = -dom.beta_factor * v0;
    let rho_c = tables.rho_c().finite().unwrap();

    let mut body = String::from("eps,horizon,domination_probability,half_width_95\n");
    let mut rows = Vec::new();
    let mut horizons = sc.experiment.horizons.clone();
    horizons.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let replicas = sc.experiment.replicas;
    for &t in &horizons {
        let edge = (beta * t).floor() as i64;
        let margin = propagation_margin(t, sc.experiment.propagation_speed, sc.experiment.slack);
        let window = Window::new(edge.min(-margin) - 2, margin);
        let (env, _) = sc.build_environment(window)?;
        let (a_eps, _) = locate_bottlenecks(&env, dom.eps)?;
        if edge >= a_eps {
            return Err(Error::InvalidScenario(format!(
                "source edge {edge} must lie left of the bottleneck {a_eps}"
            )));
        }
        let rho = initial_density(sc, Some(rho_c))?;
        let eta0 = left_profile(window, window.lo + 24, rho);
        let block = Configuration::source_block(window, edge);
        let hits: Vec<bool> = (0..replicas)
            .into_par_iter()
            .map(|rep| {
                let mut set = ReplicaSet::new(
                    mix_seed(sc.seed.master, 0xD0 ^ rep),
                    window,
                    kernel.clone(),
                    g.clone(),
                );
                let free = set.add_replica(env.clone(), eta0.clone());
                let src = set.add_replica(env.clone(), block.clone());
                set.advance(t);
                (a_eps..=window.hi).all(|x| {
                    set.replica(src).config().get(x) <= set.replica(free).config().get(x)
                })
            })
            .collect();
        let p_hat = hits.iter().filter(|&&h| h).count() as f64 / replicas as f64;
        let half = 1.96 * (p_hat * (1.0 - p_hat) / replicas as f64).sqrt();
        body.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(dom.eps),
            fmt_f64(t),
            fmt_f64(p_hat),
            fmt_f64(half)
        ));
        rows.push(VerdictRow {
            experiment: "coupling_audits".into(),
            item: format!("domination_probability(eps={},t={t})", dom.eps),
            horizon: t,
            value: p_hat,
            target: 1.0,
            tolerance: 1.0,
            stderr: half,
            replicas,
            leaks: 0,
            window_lo: window.lo,
            window_hi: window.hi,
            seed: sc.seed.master,
            // illustrative curve, not a pass/fail criterion
            pass: true,
        });
    }
    Ok((rows, body))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{
        AuditsSection, CounterexampleSection, EnvironmentSpec, ExperimentSection,
        JacksonSection, KernelSpec, LawSpec, RateFunctionSpec, SeedSection, SlowSiteSpec,
    };

    fn base_scenario(kind: ExperimentKind) -> Scenario {
        Scenario {
            experiment: ExperimentSection {
                kind,
                replicas: 24,
                horizons: vec![5.0, 10.0],
                propagation_speed: 3.0,
                slack: 24,
            },
            seed: SeedSection { master: 7 },
            environment: EnvironmentSpec {
                c: 0.5,
                law: Some(LawSpec::Polynomial { exponent: 2 }),
                base: None,
                window: None,
                slow_sites: Some(SlowSiteSpec::Spread { count: 5 }),
                alpha: None,
            },
            kernel: KernelSpec::NearestNeighbour { p: 1.0 },
            rate_function: RateFunctionSpec::Constant,
            initial: InitialSpec::LeftCriticalMultiple { factor: 0.5 },
            observable: Vec::new(),
            flux: Some(crate::scenario::FluxSection { grid: 512 }),
            source: None,
            counterexample: None,
            domination: None,
            audits: None,
            jackson: None,
        }
    }

    #[test]
    fn blueprint_construction_and_rejection() {
        let kernel = JumpKernel::two_step(0.5).unwrap();
        let bp =
            build_counterexample(CriticalDensity::Finite(1.5), &kernel, 4, 6, 3.0).unwrap();
        assert_eq!(bp.positions[..6], [0, -6, -12, -24, -60, -204]);
        assert_eq!(bp.spikes, vec![9, 9, 18, 54, 216]);
        assert_eq!(bp.horizons, vec![1.5, 3.0, 9.0, 36.0]);
        // partial densities land on the target exactly for even gaps
        let last = *bp.partial_densities.last().unwrap();
        assert!((last - 1.5).abs() < 0.02 * 1.5, "density {last}");

        // geometric gaps carry non-vanishing position ratios
        let geometric: Vec<u64> = (0..5).map(|n| 6 * 3u64.pow(n)).collect();
        assert!(matches!(
            build_counterexample_with_gaps(
                CriticalDensity::Finite(1.5),
                &kernel,
                &geometric,
                3.0
            ),
            Err(Error::InvalidBlueprint(_))
        ));

        // nearest-neighbour kernels are refused
        let nn = JumpKernel::nearest_neighbour(0.9).unwrap();
        assert!(build_counterexample(CriticalDensity::Finite(1.5), &nn, 3, 6, 3.0).is_err());

        // infinite critical density switches to the slow schedule
        let bp = build_counterexample(CriticalDensity::Infinite, &kernel, 3, 6, 3.0).unwrap();
        assert!(bp.spikes[3] as f64 >= (5.0f64).ln() * bp.gaps[3] as f64 - 1.0);
    }

    #[test]
    fn verdict_csv_is_stable() {
        let row = VerdictRow {
            experiment: "x".into(),
            item: "y".into(),
            horizon: 1.0,
            value: 0.5,
            target: 0.25,
            tolerance: 0.1,
            stderr: 0.01,
            replicas: 3,
            leaks: 0,
            window_lo: -5,
            window_hi: 5,
            seed: 9,
            pass: true,
        };
        assert_eq!(row.csv_row(), row.csv_row());
        assert!(row.csv_row().ends_with(",true"));
    }

    #[test]
    fn small_necessity_run_is_deterministic() {
        let sc = base_scenario(ExperimentKind::Necessity);
        let a = run_scenario(&sc).unwrap();
        let b = run_scenario(&sc).unwrap();
        assert_eq!(a.verdicts_csv(), b.verdicts_csv());
        assert_eq!(a.files, b.files);
        // the consistency row must pass even at desk scale
        assert!(a
            .verdicts
            .iter()
            .any(|v| v.item == "envelope_consistency" && v.pass));
    }

    #[test]
    fn empty_initial_profile_carries_no_current() {
        let mut sc = base_scenario(ExperimentKind::Necessity);
        sc.initial = InitialSpec::LeftDensity { density: 0.0 };
        let out = run_scenario(&sc).unwrap();
        let bound = out
            .verdicts
            .iter()
            .find(|v| v.item == "current_below_envelope")
            .unwrap();
        assert_eq!(bound.value, 0.0);
        assert!(bound.pass, "{bound:?}");
    }

    #[test]
    fn identical_source_replicas_dominate_each_other_exactly() {
        // two copies of the reservoir block on one stream stay equal, so the
        // source process dominates itself with probability one
        use crate::harris::ReplicaSet;
        let window = Window::new(-30, 40);
        let env = Environment::uniform(window, 0.5, 0.9).unwrap();
        let kernel = JumpKernel::nearest_neighbour(0.8).unwrap();
        let block = Configuration::source_block(window, -20);
        let mut set = ReplicaSet::new(77, window, kernel, RateFunction::constant_rate());
        let a = set.add_replica(env.clone(), block.clone());
        let b = set.add_replica(env, block);
        set.advance(25.0);
        for x in window.sites() {
            assert_eq!(set.replica(a).config().get(x), set.replica(b).config().get(x));
        }
    }

    #[test]
    fn small_audit_run_passes() {
        let mut sc = base_scenario(ExperimentKind::CouplingAudits);
        sc.audits = Some(AuditsSection {
            trials: 40,
            half_width: 12,
            horizon: 8.0,
            propagation_speed: 3.0,
            propagation_horizon: 4.0,
            propagation_trials: 40,
        });
        let out = run_scenario(&sc).unwrap();
        assert!(out.all_pass(), "{}", out.verdicts_csv());
    }

    #[test]
    fn small_jackson_run_passes() {
        let mut sc = base_scenario(ExperimentKind::JacksonStationarity);
        sc.jackson = Some(JacksonSection {
            interior_sites: 8,
            horizon: 40.0,
            closed_form_trials: 60,
        });
        sc.experiment.replicas = 40;
        sc.kernel = KernelSpec::NearestNeighbour { p: 0.75 };
        let out = run_scenario(&sc).unwrap();
        for v in &out.verdicts {
            if v.item != "stationarity_sites_within_3sigma" {
                assert!(v.pass, "{v:?}");
            }
        }
    }

    #[test]
    fn counterexample_ledger_and_density_pass() {
        let mut sc = base_scenario(ExperimentKind::Counterexample);
        sc.kernel = KernelSpec::TwoStep { p1: 0.5 };
        sc.counterexample = Some(CounterexampleSection { n_max: 3, d0: 6 });
        sc.experiment.replicas = 16;
        let out = run_scenario(&sc).unwrap();
        let find = |item: &str| {
            out.verdicts
                .iter()
                .find(|v| v.item == item)
                .unwrap_or_else(|| panic!("missing verdict {item}"))
        };
        assert!(find("pathwise_ledger").pass);
        assert!(find("supercritical_density").pass);
        assert_eq!(find("pathwise_ledger").leaks, 0);
    }
}
