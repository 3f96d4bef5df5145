//! Scenario files: the text format describing environments, kernels, rate
//! functions, initial conditions and experiment parameters.
//!
//! A scenario is a TOML document with one section per ingredient:
//!
//! ```toml
//! [experiment]
//! kind = "necessity"
//! replicas = 500
//! horizons = [50.0, 100.0, 200.0]
//!
//! [seed]
//! master = 20260809
//!
//! [environment]
//! c = 0.5
//! law = { kind = "polynomial", exponent = 2 }
//!
//! [environment.slow_sites]
//! kind = "spread"
//! count = 22
//!
//! [kernel]
//! kind = "nearest_neighbour"
//! p = 1.0
//!
//! [rate_function]
//! kind = "constant"
//!
//! [initial]
//! kind = "left_density"
//! density = 0.75
//!
//! [[observable]]
//! site = 0
//! kind = "threshold"
//! parameter = 1
//! ```
//!
//! Field names are part of the crate's public interface; the book chapter
//! on experiments documents every section.

use crate::equilibria::{Observable, ObservableKind};
use crate::error::{Error, Result};
use crate::model::{
    build_environment_iid, build_environment_with_slow_sites, DisorderLaw, Environment,
    EnvWarning, JumpKernel, RateFunction, Window,
};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Tables,
    UpperBound,
    Necessity,
    Counterexample,
    SourceHydro,
    LocalEquilibrium,
    JacksonStationarity,
    CouplingAudits,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Tables => "tables",
            ExperimentKind::UpperBound => "upper_bound",
            ExperimentKind::Necessity => "necessity",
            ExperimentKind::Counterexample => "counterexample",
            ExperimentKind::SourceHydro => "source_hydro",
            ExperimentKind::LocalEquilibrium => "local_equilibrium",
            ExperimentKind::JacksonStationarity => "jackson_stationarity",
            ExperimentKind::CouplingAudits => "coupling_audits",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    #[serde(default = "default_replicas")]
    pub replicas: u64,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<f64>,
    /// propagation-speed constant used for window margins
    #[serde(default = "default_speed")]
    pub propagation_speed: f64,
    /// extra window sites beyond the propagation margin
    #[serde(default = "default_slack")]
    pub slack: i64,
}

fn default_replicas() -> u64 {
    200
}

fn default_horizons() -> Vec<f64> {
    vec![25.0, 50.0, 100.0, 200.0]
}

fn default_speed() -> f64 {
    3.0
}

fn default_slack() -> i64 {
    48
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SeedSection {
    pub master: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LawSpec {
    Points { atoms: Vec<(f64, f64)> },
    Polynomial { exponent: u8 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlowSiteSpec {
    /// Sites `-1, -2, ...` with rates `c + 1/(k+2)`; `count` absent means
    /// every negative window site.
    Consecutive { count: Option<u32> },
    /// Sites `-n^2` with rates `c + 1/(n+2)` for `n = 1..=count`; sparse,
    /// so the disorder average is unchanged.
    Spread { count: u32 },
    Explicit { entries: Vec<(i64, f64)> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub c: f64,
    #[serde(default)]
    pub law: Option<LawSpec>,
    /// uniform base rate used when no law is given
    #[serde(default)]
    pub base: Option<f64>,
    /// explicit window override
    #[serde(default)]
    pub window: Option<(i64, i64)>,
    #[serde(default)]
    pub slow_sites: Option<SlowSiteSpec>,
    /// explicit rate table (takes precedence over law/base; paired with
    /// `window`)
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    NearestNeighbour { p: f64 },
    TwoStep { p1: f64 },
    General { support: Vec<(i64, f64)> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateFunctionSpec {
    Constant,
    CappedLinear { cap: u32 },
    GeometricSaturation,
    Table { values: Vec<f64>, limit: Option<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialSpec {
    Empty,
    /// deterministic profile of the given mean density on the nonpositive
    /// half of the window
    LeftDensity { density: f64 },
    /// density expressed as a multiple of the critical density
    LeftCriticalMultiple { factor: f64 },
    /// sample of the product invariant measure at this fugacity
    ProductSample { lambda: f64 },
    /// reservoirs up to the source edge (edge set by the source section)
    SourceBlock,
    /// spike configuration from the counterexample section
    Spikes,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsKindSpec {
    Threshold,
    MinCap,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ObservableSpec {
    pub site: i64,
    pub kind: ObsKindSpec,
    pub parameter: u64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FluxSection {
    #[serde(default = "default_grid")]
    pub grid: usize,
}

fn default_grid() -> usize {
    4096
}

impl Default for FluxSection {
    fn default() -> Self {
        Self { grid: default_grid() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SourceSection {
    pub beta: f64,
    #[serde(default)]
    pub tail_speeds: Vec<f64>,
    #[serde(default)]
    pub local_speeds: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CounterexampleSection {
    pub n_max: u32,
    #[serde(default = "default_d0")]
    pub d0: u64,
}

fn default_d0() -> u64 {
    6
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DominationSection {
    /// source speed as a multiple of the front speed: beta = -factor * v0
    pub beta_factor: f64,
    pub eps: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AuditsSection {
    #[serde(default = "default_audit_trials")]
    pub trials: u32,
    #[serde(default = "default_audit_halfwidth")]
    pub half_width: i64,
    #[serde(default = "default_audit_horizon")]
    pub horizon: f64,
    #[serde(default = "default_prop_speed")]
    pub propagation_speed: f64,
    #[serde(default = "default_prop_horizon")]
    pub propagation_horizon: f64,
    #[serde(default = "default_audit_trials")]
    pub propagation_trials: u32,
}

fn default_audit_trials() -> u32 {
    1000
}

fn default_audit_halfwidth() -> i64 {
    20
}

fn default_audit_horizon() -> f64 {
    20.0
}

fn default_prop_speed() -> f64 {
    3.0
}

fn default_prop_horizon() -> f64 {
    10.0
}

impl Default for AuditsSection {
    fn default() -> Self {
        Self {
            trials: default_audit_trials(),
            half_width: default_audit_halfwidth(),
            horizon: default_audit_horizon(),
            propagation_speed: default_prop_speed(),
            propagation_horizon: default_prop_horizon(),
            propagation_trials: default_audit_trials(),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct JacksonSection {
    #[serde(default = "default_segment")]
    pub interior_sites: i64,
    #[serde(default = "default_jackson_t")]
    pub horizon: f64,
    #[serde(default = "default_closed_form_trials")]
    pub closed_form_trials: u32,
}

fn default_segment() -> i64 {
    20
}

fn default_jackson_t() -> f64 {
    200.0
}

fn default_closed_form_trials() -> u32 {
    1000
}

impl Default for JacksonSection {
    fn default() -> Self {
        Self {
            interior_sites: default_segment(),
            horizon: default_jackson_t(),
            closed_form_trials: default_closed_form_trials(),
        }
    }
}

/// Complete experiment description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scenario {
    pub experiment: ExperimentSection,
    pub seed: SeedSection,
    pub environment: EnvironmentSpec,
    pub kernel: KernelSpec,
    pub rate_function: RateFunctionSpec,
    pub initial: InitialSpec,
    #[serde(default)]
    pub observable: Vec<ObservableSpec>,
    #[serde(default)]
    pub flux: Option<FluxSection>,
    #[serde(default)]
    pub source: Option<SourceSection>,
    #[serde(default)]
    pub counterexample: Option<CounterexampleSection>,
    #[serde(default)]
    pub domination: Option<DominationSection>,
    #[serde(default)]
    pub audits: Option<AuditsSection>,
    #[serde(default)]
    pub jackson: Option<JacksonSection>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ScenarioParse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serialization cannot fail")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn build_rate_function(&self) -> Result<RateFunction> {
        match &self.rate_function {
            RateFunctionSpec::Constant => Ok(RateFunction::constant_rate()),
            RateFunctionSpec::CappedLinear { cap } => {
                if *cap == 0 {
                    return Err(Error::InvalidScenario("cap must be positive".into()));
                }
                Ok(RateFunction::capped_linear(*cap))
            }
            RateFunctionSpec::GeometricSaturation => Ok(RateFunction::geometric_saturation(1e-9)),
            RateFunctionSpec::Table { values, limit } => RateFunction::normalize(values, *limit),
        }
    }

    pub fn build_kernel(&self) -> Result<JumpKernel> {
        match &self.kernel {
            KernelSpec::NearestNeighbour { p } => JumpKernel::nearest_neighbour(*p),
            KernelSpec::TwoStep { p1 } => JumpKernel::two_step(*p1),
            KernelSpec::General { support } => JumpKernel::new(support.clone()),
        }
    }

    pub fn disorder_law(&self) -> Result<Option<DisorderLaw>> {
        match &self.environment.law {
            None => Ok(None),
            Some(LawSpec::Points { atoms }) => {
                Ok(Some(DisorderLaw::points(self.environment.c, atoms.clone())?))
            }
            Some(LawSpec::Polynomial { exponent }) => Ok(Some(DisorderLaw::polynomial(
                self.environment.c,
                *exponent,
            )?)),
        }
    }

    /// Realize the environment on `window` (explicit tables must match the
    /// window they were saved with).
    pub fn build_environment(&self, window: Window) -> Result<(Environment, Vec<EnvWarning>)> {
        let c = self.environment.c;
        let base = if let Some(alpha) = &self.environment.alpha {
            (Environment::from_parts(window, c, alpha.clone(), None)?, Vec::new())
        } else if let Some(law) = self.disorder_law()? {
            build_environment_iid(&law, window, self.seed.master)?
        } else {
            let value = self.environment.base.unwrap_or(1.0);
            (Environment::uniform(window, c, value)?, Vec::new())
        };
        let (env, mut warnings) = base;
        let schedule: Vec<(i64, f64)> = match &self.environment.slow_sites {
            None => Vec::new(),
            Some(SlowSiteSpec::Consecutive { count }) => {
                let deepest = count.map(|k| k as i64).unwrap_or(-window.lo).min(-window.lo);
                (1..=deepest)
                    .map(|k| (-k, (c + 1.0 / (k as f64 + 2.0)).min(1.0)))
                    .collect()
            }
            Some(SlowSiteSpec::Spread { count }) => (1..=*count as i64)
                .map(|n| (-(n * n), (c + 1.0 / (n as f64 + 2.0)).min(1.0)))
                .filter(|&(s, _)| window.contains(s))
                .collect(),
            Some(SlowSiteSpec::Explicit { entries }) => entries.clone(),
        };
        if schedule.is_empty() {
            return Ok((env, warnings));
        }
        let (env, more) = build_environment_with_slow_sites(&env, &schedule)?;
        warnings.extend(more);
        Ok((env, warnings))
    }

    pub fn observables(&self) -> Result<Vec<Observable>> {
        self.observable
            .iter()
            .map(|spec| {
                let kind = match spec.kind {
                    ObsKindSpec::Threshold => ObservableKind::Threshold(spec.parameter),
                    ObsKindSpec::MinCap => ObservableKind::MinCap(spec.parameter),
                };
                Observable::new(vec![(spec.site, kind)])
            })
            .collect()
    }

    pub fn flux_grid(&self) -> usize {
        self.flux.unwrap_or_default().grid
    }

    pub fn max_horizon(&self) -> f64 {
        self.experiment
            .horizons
            .iter()
            .copied()
            .fold(0.0, f64::max)
    }
}

/// Propagation margin: sites beyond the zone of interest that a horizon-`t`
/// run needs so that boundary effects cannot reach it.
pub fn propagation_margin(t: f64, speed: f64, slack: i64) -> i64 {
    (speed * t).ceil() as i64 + slack
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[experiment]
kind = "necessity"
replicas = 16
horizons = [10.0, 20.0]

[seed]
master = 42

[environment]
c = 0.5
law = { kind = "polynomial", exponent = 2 }
slow_sites = { kind = "spread", count = 8 }

[kernel]
kind = "nearest_neighbour"
p = 1.0

[rate_function]
kind = "constant"

[initial]
kind = "left_density"
density = 0.75

[[observable]]
site = 0
kind = "threshold"
parameter = 1

[[observable]]
site = -1
kind = "min_cap"
parameter = 2
"#;

    #[test]
    fn parses_and_roundtrips() {
        let sc = Scenario::parse(SAMPLE).unwrap();
        assert_eq!(sc.experiment.kind, ExperimentKind::Necessity);
        assert_eq!(sc.experiment.replicas, 16);
        assert_eq!(sc.seed.master, 42);
        assert_eq!(sc.observable.len(), 2);
        // defaults fill in
        assert_eq!(sc.experiment.slack, 48);
        assert_eq!(sc.flux_grid(), 4096);

        let text = sc.to_toml();
        let back = Scenario::parse(&text).unwrap();
        assert_eq!(text, back.to_toml());
    }

    #[test]
    fn builds_ingredients() {
        let sc = Scenario::parse(SAMPLE).unwrap();
        let g = sc.build_rate_function().unwrap();
        assert_eq!(g.eval_n(1), 1.0);
        let kernel = sc.build_kernel().unwrap();
        assert!(kernel.is_nearest_neighbour());
        let w = Window::new(-100, 20);
        let (env, warnings) = sc.build_environment(w).unwrap();
        // sparse slow sites at -1, -4, ..., -64 within the window
        assert_eq!(env.slow_sites().unwrap().len(), 8);
        assert!((env.alpha(-9) - (0.5 + 0.2)).abs() < 1e-15);
        // quadratically spread sites have ratio -> 1; no warning expected
        assert!(warnings.is_empty(), "{warnings:?}");
        let obs = sc.observables().unwrap();
        assert_eq!(obs.len(), 2);

        // identical master seed, identical environment
        let (env2, _) = sc.build_environment(w).unwrap();
        assert_eq!(env, env2);
    }

    #[test]
    fn environment_table_roundtrip_is_exact() {
        let sc = Scenario::parse(SAMPLE).unwrap();
        let w = Window::new(-40, 10);
        let (env, _) = sc.build_environment(w).unwrap();

        let mut explicit = sc.clone();
        explicit.environment.alpha = Some(env.alphas().to_vec());
        explicit.environment.law = None;
        explicit.environment.slow_sites = None;
        let text = explicit.to_toml();
        let back = Scenario::parse(&text).unwrap();
        let (env2, _) = back.build_environment(w).unwrap();
        assert_eq!(env.alphas(), env2.alphas());
    }

    #[test]
    fn rejects_malformed_scenarios() {
        assert!(Scenario::parse("this is not toml at all [").is_err());
        let missing = SAMPLE.replace("[seed]\nmaster = 42\n", "");
        assert!(Scenario::parse(&missing).is_err());
    }
}
