//! One-site equilibrium laws and product invariant measures.
//!
//! For a fugacity `lambda < 1` the one-site law puts mass proportional to
//! `lambda^n / g(n)!` on occupancy `n`, where `g(n)! = g(1) g(2) ... g(n)`.
//! Because the rate table is exactly 1 beyond its truncation index, every
//! partition sum has an exactly geometric tail with ratio `lambda`, so
//! normalizations, means and tail probabilities are evaluated in closed
//! form rather than by open-ended summation.
//!
//! The product measure with marginal parameter `lambda / alpha(x)` at site
//! `x` is invariant for the disordered dynamics whenever every parameter
//! stays below 1; its mean jump rate per site equals `lambda`, an identity
//! the test suite uses as a self-check.

use crate::error::{Error, Result};
use crate::model::{Configuration, Environment, Occupancy, RateFunction, Window};
use crate::numerics::mix_seed_site;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check_param(lambda: f64) -> Result<()> {
    if !(0.0..1.0).contains(&lambda) {
        if lambda >= 1.0 {
            return Err(Error::SeriesDiverges { lambda });
        }
        return Err(Error::FugacityOutOfRange {
            lambda,
            reason: "must lie in [0, 1)".into(),
        });
    }
    Ok(())
}

/// Triple of partition sums: `Z`, `sum n w(n)`, `sum g(n) w(n)` with
/// `w(n) = lambda^n / g(n)!`, each including its exact geometric tail.
fn partition_sums(lambda: f64, g: &RateFunction) -> (f64, f64, f64) {
    let n_tr = g.truncation_index();
    let mut w = 1.0; // w(0)
    let mut z = 1.0;
    let mut s_mean = 0.0;
    let mut s_rate = 0.0;
    for n in 1..=n_tr {
        w *= lambda / g.eval_n(n as u64);
        z += w;
        s_mean += n as f64 * w;
        s_rate += g.eval_n(n as u64) * w;
    }
    // beyond n_tr the ratio w(n+1)/w(n) is exactly lambda
    if lambda > 0.0 {
        let head = w * lambda; // w(n_tr + 1)
        let geo = head / (1.0 - lambda);
        z += geo;
        s_mean += head * ((n_tr as f64 + 1.0) - n_tr as f64 * lambda)
            / ((1.0 - lambda) * (1.0 - lambda));
        s_rate += geo; // g = 1 on the tail
    }
    (z, s_mean, s_rate)
}

/// Normalizing factor `Z(lambda) = sum_n lambda^n / g(n)!`.
pub fn partition_function(lambda: f64, g: &RateFunction) -> Result<f64> {
    check_param(lambda)?;
    Ok(partition_sums(lambda, g).0)
}

/// Mean occupancy `R(lambda)` of the one-site law.
pub fn mean_occupancy(lambda: f64, g: &RateFunction) -> Result<f64> {
    check_param(lambda)?;
    let (z, s_mean, _) = partition_sums(lambda, g);
    Ok(s_mean / z)
}

/// Mean service rate `E g(n)` under the one-site law.
///
/// Algebraically this equals `lambda`; it is computed from the series so the
/// identity doubles as a consistency check on the summation.
pub fn mean_jump_rate(lambda: f64, g: &RateFunction) -> Result<f64> {
    check_param(lambda)?;
    let (z, _, s_rate) = partition_sums(lambda, g);
    Ok(s_rate / z)
}

/// One-site equilibrium law at parameter `u = lambda / alpha`.
///
/// The pmf table covers occupancies up to the rate truncation index; all
/// probabilities beyond it follow the exact geometric tail with ratio `u`,
/// so CDF queries and sampling carry no truncation error.
#[derive(Clone, Debug)]
pub struct OneSiteLaw {
    param: f64,
    pmf: Vec<f64>,
    tail_mass: f64,
    mean: f64,
}

impl OneSiteLaw {
    pub fn new(param: f64, g: &RateFunction) -> Result<Self> {
        check_param(param)?;
        let (z, s_mean, _) = partition_sums(param, g);
        let n_tr = g.truncation_index();
        let mut pmf = Vec::with_capacity(n_tr + 1);
        let mut w = 1.0;
        pmf.push(1.0 / z);
        for n in 1..=n_tr {
            w *= param / g.eval_n(n as u64);
            pmf.push(w / z);
        }
        let tail_mass = if param > 0.0 {
            w * param / ((1.0 - param) * z)
        } else {
            0.0
        };
        Ok(Self {
            param,
            pmf,
            tail_mass,
            mean: s_mean / z,
        })
    }

    pub fn param(&self) -> f64 {
        self.param
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    /// Mass beyond the stored table (exact).
    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    /// `P(occupancy >= k)`, exact for every `k`.
    pub fn prob_ge(&self, k: u64) -> f64 {
        let k = k as usize;
        if k == 0 {
            return 1.0;
        }
        if k <= self.pmf.len() {
            let head: f64 = self.pmf[..k].iter().sum();
            (1.0 - head).max(0.0)
        } else {
            // geometric continuation from the end of the table
            self.tail_mass * self.param.powi((k - self.pmf.len()) as i32)
        }
    }

    /// `E min(occupancy, cap) = sum_{j=1..cap} P(occ >= j)`.
    pub fn mean_capped(&self, cap: u64) -> f64 {
        (1..=cap).map(|j| self.prob_ge(j)).sum()
    }

    pub fn variance(&self) -> f64 {
        // E n^2 from the table plus the exact geometric tail
        let u = self.param;
        let n_tr = self.pmf.len() - 1;
        let mut s2: f64 = self
            .pmf
            .iter()
            .enumerate()
            .map(|(n, p)| (n * n) as f64 * p)
            .sum();
        if u > 0.0 {
            let head = self.pmf[n_tr] * u; // P(n_tr + 1)
            let m = n_tr as f64 + 1.0;
            let r = 1.0 - u;
            // sum_{j>=0} (m+j)^2 u^j = m^2/r + (2m+1) u/r^2 + 2u^2/r^3
            s2 += head * (m * m / r + (2.0 * m + 1.0) * u / (r * r) + 2.0 * u * u / (r * r * r));
        }
        s2 - self.mean * self.mean
    }

    /// Inverse-CDF sample; the geometric tail is inverted analytically.
    pub fn sample(&self, uniform: f64) -> u64 {
        let mut acc = 0.0;
        for (n, p) in self.pmf.iter().enumerate() {
            acc += p;
            if uniform < acc {
                return n as u64;
            }
        }
        // remaining mass is geometric with ratio `param`
        let rest = ((uniform - acc) / self.tail_mass).clamp(0.0, 1.0 - 1e-16);
        let extra = ((1.0 - rest).ln() / self.param.ln()).floor();
        self.pmf.len() as u64 + extra.max(0.0) as u64
    }
}

/// Local observable: a product over pairwise distinct sites of bounded
/// nondecreasing factors of the occupancy.
#[derive(Clone, Debug, PartialEq)]
pub struct Observable {
    factors: Vec<(i64, ObservableKind)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObservableKind {
    /// `min(occupancy, cap)`
    MinCap(u64),
    /// `1 { occupancy >= threshold }`
    Threshold(u64),
}

impl ObservableKind {
    fn eval(self, occ: Occupancy) -> f64 {
        match self {
            ObservableKind::MinCap(cap) => match occ {
                Occupancy::Infinite => cap as f64,
                Occupancy::Finite(n) => n.min(cap) as f64,
            },
            ObservableKind::Threshold(k) => match occ {
                Occupancy::Infinite => 1.0,
                Occupancy::Finite(n) => {
                    if n >= k {
                        1.0
                    } else {
                        0.0
                    }
                }
            },
        }
    }

    fn expect(self, law: &OneSiteLaw) -> f64 {
        match self {
            ObservableKind::MinCap(cap) => law.mean_capped(cap),
            ObservableKind::Threshold(k) => law.prob_ge(k),
        }
    }
}

impl Observable {
    pub fn new(mut factors: Vec<(i64, ObservableKind)>) -> Result<Self> {
        factors.sort_by_key(|&(s, _)| s);
        for w in factors.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::InvalidConfiguration(format!(
                    "observable touches site {} twice",
                    w[0].0
                )));
            }
        }
        Ok(Self { factors })
    }

    pub fn threshold(site: i64, k: u64) -> Self {
        Self::new(vec![(site, ObservableKind::Threshold(k))]).unwrap()
    }

    pub fn min_cap(site: i64, cap: u64) -> Self {
        Self::new(vec![(site, ObservableKind::MinCap(cap))]).unwrap()
    }

    pub fn factors(&self) -> &[(i64, ObservableKind)] {
        &self.factors
    }

    pub fn sites(&self) -> impl Iterator<Item = i64> + '_ {
        self.factors.iter().map(|&(s, _)| s)
    }

    /// Identical observable with all sites shifted by `offset`.
    pub fn shifted(&self, offset: i64) -> Self {
        Self {
            factors: self
                .factors
                .iter()
                .map(|&(s, k)| (s + offset, k))
                .collect(),
        }
    }

    pub fn eval(&self, cfg: &Configuration) -> f64 {
        self.factors
            .iter()
            .map(|&(s, k)| k.eval(cfg.get(s)))
            .product()
    }

    pub fn label(&self) -> String {
        self.factors
            .iter()
            .map(|&(s, k)| match k {
                ObservableKind::MinCap(c) => format!("min_cap({s},{c})"),
                ObservableKind::Threshold(t) => format!("threshold({s},{t})"),
            })
            .collect::<Vec<_>>()
            .join("*")
    }
}

/// Product measure with marginal parameter `lambda / alpha(x)` at site `x`.
#[derive(Clone, Debug)]
pub struct ProductMeasure {
    window: Window,
    laws: Vec<OneSiteLaw>,
}

impl ProductMeasure {
    /// Invariant measure at fugacity `lambda` in environment `env`.
    pub fn new(env: &Environment, lambda: f64, g: &RateFunction) -> Result<Self> {
        let laws = env
            .window()
            .sites()
            .map(|x| OneSiteLaw::new(lambda / env.alpha(x), g))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            window: env.window(),
            laws,
        })
    }

    /// Product measure with an explicit per-site parameter function.
    pub fn from_params(
        window: Window,
        g: &RateFunction,
        param: impl Fn(i64) -> f64,
    ) -> Result<Self> {
        let laws = window
            .sites()
            .map(|x| OneSiteLaw::new(param(x), g))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { window, laws })
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn law(&self, site: i64) -> &OneSiteLaw {
        &self.laws[self.window.index(site)]
    }

    /// Independent per-site draws; deterministic given the seed and
    /// window-independent per site.
    pub fn sample(&self, seed: u64) -> Configuration {
        Configuration::from_fn(self.window, |x| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed_site(seed, x));
            Occupancy::Finite(self.law(x).sample(rng.gen::<f64>()))
        })
    }

    /// Exact expectation of a product observable (independence factorizes).
    pub fn expect(&self, obs: &Observable) -> Result<f64> {
        let mut out = 1.0;
        for &(site, kind) in obs.factors() {
            if !self.window.contains(site) {
                return Err(Error::ObservableOutsideWindow { site });
            }
            out *= kind.expect(self.law(site));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DisorderLaw;

    fn grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect()
    }

    #[test]
    fn constant_rate_closed_forms() {
        let g = RateFunction::constant_rate();
        // Z = 1/(1-l), R = l/(1-l)
        assert!((partition_function(0.5, &g).unwrap() - 2.0).abs() < 1e-14);
        assert!((mean_occupancy(0.5, &g).unwrap() - 1.0).abs() < 1e-14);
        assert_eq!(partition_function(0.0, &g).unwrap(), 1.0);
        assert_eq!(mean_occupancy(0.0, &g).unwrap(), 0.0);
        assert!(partition_function(1.0, &g).is_err());
    }

    #[test]
    fn partition_matches_brute_force_series() {
        let g = RateFunction::capped_linear(2);
        let lambda = 0.3f64;
        // direct summation of lambda^n / g(n)! over 10^4 terms
        let mut z = 1.0;
        let mut w = 1.0;
        let mut mean = 0.0;
        for n in 1..10_000u64 {
            w *= lambda / g.eval_n(n);
            z += w;
            mean += n as f64 * w;
        }
        assert!((partition_function(lambda, &g).unwrap() - z).abs() < 1e-12);
        assert!((mean_occupancy(lambda, &g).unwrap() - mean / z).abs() < 1e-12);
    }

    #[test]
    fn jump_rate_identity_across_rate_functions() {
        let gs = [
            RateFunction::constant_rate(),
            RateFunction::capped_linear(2),
            RateFunction::capped_linear(3),
            RateFunction::geometric_saturation(1e-9),
        ];
        for g in &gs {
            for &l in &grid(101, 0.0, 0.95) {
                let r = mean_jump_rate(l, g).unwrap();
                assert!((r - l).abs() < 1e-10, "rate {r} vs fugacity {l}");
            }
            assert!((mean_jump_rate(0.25, g).unwrap() - 0.25).abs() < 1e-10);
        }
        let g = RateFunction::constant_rate();
        assert!((mean_jump_rate(0.7, &g).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn per_site_mean_under_product_measure() {
        // constant-rate marginal mean at parameter l/a is l/(a-l)
        let g = RateFunction::constant_rate();
        let law = OneSiteLaw::new(0.4 / 0.8, &g).unwrap();
        assert!((law.mean() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_occupancy_strictly_increases() {
        let g = RateFunction::geometric_saturation(1e-9);
        let mut prev = -1.0;
        for &l in &grid(1000, 0.0, 0.999) {
            let r = mean_occupancy(l, &g).unwrap();
            assert!(r > prev, "R must strictly increase: {prev} then {r} at {l}");
            prev = r;
        }
    }

    #[test]
    fn one_site_law_normalizes_and_tail_is_exact() {
        let g = RateFunction::capped_linear(3);
        let law = OneSiteLaw::new(0.85, &g).unwrap();
        let total: f64 = law.pmf().iter().sum::<f64>() + law.tail_mass();
        assert!((total - 1.0).abs() < 1e-12);
        // P(>= k) via direct series for a few k
        for k in [0u64, 1, 2, 5, 9] {
            let mut direct = 0.0;
            let mut w = 1.0;
            let z = partition_function(0.85, &g).unwrap();
            for n in 0..400u64 {
                if n > 0 {
                    w *= 0.85 / g.eval_n(n);
                }
                if n >= k {
                    direct += w / z;
                }
            }
            assert!(
                (law.prob_ge(k) - direct).abs() < 1e-12,
                "k={k}: {} vs {direct}",
                law.prob_ge(k)
            );
        }
    }

    #[test]
    fn cdf_ordering_in_fugacity() {
        // stochastic monotonicity of the exponential family: the CDF at
        // smaller fugacity dominates pointwise
        let g = RateFunction::capped_linear(3);
        let a = OneSiteLaw::new(0.3, &g).unwrap();
        let b = OneSiteLaw::new(0.6, &g).unwrap();
        for k in 1..60u64 {
            assert!(a.prob_ge(k) <= b.prob_ge(k) + 1e-15);
        }
    }

    #[test]
    fn sampling_matches_pmf_variance_oracle() {
        let g = RateFunction::constant_rate();
        let env = Environment::uniform(Window::new(0, 999_999), 0.4, 0.9).unwrap();
        let mu = ProductMeasure::new(&env, 0.45, &g).unwrap();
        // parameter 0.5 at every site: mean 1, variance u/(1-u)^2 = 2
        let law = mu.law(0);
        assert!((law.mean() - 1.0).abs() < 1e-12);
        assert!((law.variance() - 2.0).abs() < 1e-10);

        let cfg = mu.sample(99);
        let n = env.window().len() as f64;
        let mean = cfg.total_mass(0, 999_999).unwrap() as f64 / n;
        let sigma = (law.variance() / n).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}, sigma {sigma}");

        // determinism and the all-zero degenerate case
        assert_eq!(mu.sample(123), mu.sample(123));
        let zero = ProductMeasure::new(&env, 0.0, &g).unwrap().sample(5);
        assert_eq!(zero.total_mass(0, 999_999).unwrap(), 0);
    }

    #[test]
    fn exact_expectation_factorizes_and_matches_mc() {
        let g = RateFunction::constant_rate();
        let env = Environment::uniform(Window::new(-2, 2), 0.4, 0.8).unwrap();
        let mu = ProductMeasure::new(&env, 0.4, &g).unwrap();

        // threshold marginal: P(occ >= 1) = u = 0.5 for constant rate
        let h = Observable::threshold(0, 1);
        assert!((mu.expect(&h).unwrap() - 0.5).abs() < 1e-12);

        // constant observable
        let one = Observable::new(vec![]).unwrap();
        assert_eq!(mu.expect(&one).unwrap(), 1.0);

        // product observable vs Monte Carlo
        let h2 = Observable::new(vec![
            (0, ObservableKind::MinCap(2)),
            (1, ObservableKind::Threshold(1)),
        ])
        .unwrap();
        let exact = mu.expect(&h2).unwrap();
        let trials = 1_000_000u64;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for t in 0..trials {
            let cfg = mu.sample(1000 + t);
            let v = h2.eval(&cfg);
            acc += v;
            acc2 += v * v;
        }
        let mc = acc / trials as f64;
        let var = (acc2 / trials as f64 - mc * mc).max(0.0);
        let sigma = (var / trials as f64).sqrt();
        assert!(
            (mc - exact).abs() < 3.0 * sigma + 1e-9,
            "mc {mc} exact {exact} sigma {sigma}"
        );

        // out-of-window site is a typed error
        let far = Observable::threshold(100, 1);
        assert!(matches!(
            mu.expect(&far),
            Err(Error::ObservableOutsideWindow { site: 100 })
        ));
    }

    #[test]
    fn product_measure_respects_disorder() {
        let g = RateFunction::constant_rate();
        let law = DisorderLaw::polynomial(0.5, 2).unwrap();
        let (env, _) = crate::model::build_environment_iid(&law, Window::new(-10, 10), 1).unwrap();
        let mu = ProductMeasure::new(&env, 0.45, &g).unwrap();
        for x in [-10i64, -3, 0, 7] {
            assert!((mu.law(x).param() - 0.45 / env.alpha(x)).abs() < 1e-15);
        }
    }
}
