//! Event-driven realization of the dynamics from a shared space-time event
//! stream.
//!
//! Every site carries a unit-rate Poisson clock. A clock ring at `(t, x)`
//! comes with a uniform mark `u` and a displacement `z` drawn from the jump
//! kernel; a replica with environment `alpha` and occupancies `eta` accepts
//! the event iff `u <= alpha(x) g(eta(x))`, in which case one particle jumps
//! from `x` to `x + z`. Replicas attached to the same stream consume the
//! same events in the same order, which realizes the basic coupling: since
//! `g` is nondecreasing, coordinatewise order between replicas is preserved
//! pathwise, and this is what every comparison argument in the crate rests
//! on.
//!
//! Per site, the event sequence is a deterministic function of the master
//! seed alone, so any run can be replayed bit for bit.

use crate::error::{Error, Result};
use crate::model::{Configuration, Environment, JumpKernel, Occupancy, RateFunction, Window};
use crate::numerics::{mix_seed, mix_seed_site};
use crate::observables::{CurrentTracker, ObserverPath};
use ordered_float::NotNan;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cmp::Reverse;
use std::collections::BinaryHeap;

const STREAM_SALT: u64 = 0x6861_7272_6973_2e31;

/// One potential jump: ring time, site, uniform mark, displacement.
#[derive(Clone, Copy, Debug)]
pub struct Event {
    pub time: f64,
    pub site: i64,
    pub mark: f64,
    pub displacement: i64,
}

struct SiteClock {
    rng: ChaCha8Rng,
    next_time: f64,
}

impl SiteClock {
    fn new(seed: u64, site: i64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed_site(seed ^ STREAM_SALT, site));
        let gap = exp_gap(&mut rng);
        Self {
            rng,
            next_time: gap,
        }
    }
}

fn exp_gap(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen();
    -(1.0 - u).ln()
}

/// Seeded stream of marked Poisson events on a window, shared by all
/// replicas of a [`ReplicaSet`].
pub struct HarrisEventStream {
    seed: u64,
    window: Window,
    kernel: JumpKernel,
    clocks: Vec<SiteClock>,
    heap: BinaryHeap<Reverse<(NotNan<f64>, i64)>>,
}

impl HarrisEventStream {
    pub fn new(seed: u64, window: Window, kernel: JumpKernel) -> Self {
        let mut clocks = Vec::with_capacity(window.len());
        let mut heap = BinaryHeap::with_capacity(window.len());
        for site in window.sites() {
            let clock = SiteClock::new(seed, site);
            heap.push(Reverse((NotNan::new(clock.next_time).unwrap(), site)));
            clocks.push(clock);
        }
        Self {
            seed,
            window,
            kernel,
            clocks,
            heap,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn kernel(&self) -> &JumpKernel {
        &self.kernel
    }

    /// Time of the next event without consuming it.
    pub fn peek_time(&self) -> f64 {
        self.heap.peek().map(|Reverse((t, _))| **t).unwrap()
    }

    /// Pop the next event (global time order, ties by site index) and
    /// schedule the popped site's following ring.
    pub fn next_event(&mut self) -> Event {
        let Reverse((t, site)) = self.heap.pop().unwrap();
        let idx = self.window.index(site);
        let clock = &mut self.clocks[idx];
        let mark: f64 = clock.rng.gen();
        let disp_u: f64 = clock.rng.gen();
        let displacement = self.kernel.sample(disp_u);
        clock.next_time = *t + exp_gap(&mut clock.rng);
        self.heap
            .push(Reverse((NotNan::new(clock.next_time).unwrap(), site)));
        Event {
            time: *t,
            site,
            mark,
            displacement,
        }
    }
}

/// Ordered particle labels of one replica.
///
/// Particles are labelled increasingly from left to right, with label -1 on
/// the rightmost particle at or left of the reference site and label 0 on
/// the first particle right of it. A rightward jump moves the highest label
/// at the departure site, a leftward jump the lowest; this keeps labels
/// ordered and makes label displacement comparisons between coupled
/// replicas meaningful.
#[derive(Clone, Debug)]
pub struct LabelTracker {
    positions: Vec<i64>,
    offset: i64,
}

/// Position of a label, with sentinels for labels outside the finite range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelPosition {
    MinusInfinity,
    Finite(i64),
    PlusInfinity,
}

impl LabelTracker {
    pub fn new(config: &Configuration, reference: i64) -> Result<Self> {
        let mut positions = Vec::new();
        let mut left_count = 0i64;
        for x in config.window().sites() {
            match config.get(x) {
                Occupancy::Finite(n) => {
                    for _ in 0..n {
                        positions.push(x);
                    }
                    if x <= reference {
                        left_count += n as i64;
                    }
                }
                Occupancy::Infinite => {
                    return Err(Error::InfiniteOccupancy(format!(
                        "labels need finite occupancies, site {x} is a reservoir"
                    )))
                }
            }
        }
        Ok(Self {
            positions,
            offset: -left_count,
        })
    }

    fn apply_jump(&mut self, from: i64, to: i64) {
        debug_assert!((to - from).abs() == 1, "labels need nearest-neighbour jumps");
        if to > from {
            // highest label at the site moves right
            let end = self.positions.partition_point(|&p| p <= from);
            debug_assert!(end > 0 && self.positions[end - 1] == from);
            self.positions[end - 1] = to;
        } else {
            // lowest label at the site moves left
            let start = self.positions.partition_point(|&p| p < from);
            debug_assert!(start < self.positions.len() && self.positions[start] == from);
            self.positions[start] = to;
        }
    }

    pub fn position(&self, label: i64) -> LabelPosition {
        let idx = label - self.offset;
        if idx < 0 {
            LabelPosition::MinusInfinity
        } else if (idx as usize) < self.positions.len() {
            LabelPosition::Finite(self.positions[idx as usize])
        } else {
            LabelPosition::PlusInfinity
        }
    }

    fn label_range(&self) -> (i64, i64) {
        (self.offset, self.offset + self.positions.len() as i64)
    }

    /// Whether `sigma_n >= other.sigma_{n-k}` for every label `n`.
    pub fn dominates_shifted(&self, other: &LabelTracker, k: i64) -> bool {
        let (lo_a, hi_a) = self.label_range();
        let (lo_b, hi_b) = other.label_range();
        let lo = lo_a.min(lo_b + k) - 1;
        let hi = hi_a.max(hi_b + k) + 1;
        for n in lo..=hi {
            let a = self.position(n);
            let b = other.position(n - k);
            let ok = match (a, b) {
                (_, LabelPosition::MinusInfinity) => true,
                (LabelPosition::PlusInfinity, _) => true,
                (LabelPosition::MinusInfinity, _) => false,
                (_, LabelPosition::PlusInfinity) => false,
                (LabelPosition::Finite(pa), LabelPosition::Finite(pb)) => pa >= pb,
            };
            if !ok {
                return false;
            }
        }
        true
    }
}

/// One coupled copy of the process: environment, configuration, optional
/// labels and current trackers, and a count of particles discarded at the
/// window boundary (must stay zero for a run to be admissible).
pub struct Replica {
    env: Environment,
    config: Configuration,
    labels: Option<LabelTracker>,
    trackers: Vec<CurrentTracker>,
    leaks: u64,
}

impl Replica {
    pub fn env(&self) -> &Environment {
        &self.env
    }

    pub fn config(&self) -> &Configuration {
        &self.config
    }

    pub fn labels(&self) -> Option<&LabelTracker> {
        self.labels.as_ref()
    }

    pub fn tracker(&self, idx: usize) -> &CurrentTracker {
        &self.trackers[idx]
    }

    pub fn leaks(&self) -> u64 {
        self.leaks
    }
}

/// A set of replicas driven by one shared event stream.
pub struct ReplicaSet {
    stream: HarrisEventStream,
    g: RateFunction,
    replicas: Vec<Replica>,
    time: f64,
}

impl ReplicaSet {
    pub fn new(seed: u64, window: Window, kernel: JumpKernel, g: RateFunction) -> Self {
        Self {
            stream: HarrisEventStream::new(seed, window, kernel),
            g,
            replicas: Vec::new(),
            time: 0.0,
        }
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn window(&self) -> Window {
        self.stream.window()
    }

    pub fn stream_seed(&self) -> u64 {
        self.stream.seed()
    }

    pub fn kernel(&self) -> &JumpKernel {
        self.stream.kernel()
    }

    pub fn rate_function(&self) -> &RateFunction {
        &self.g
    }

    pub fn add_replica(&mut self, env: Environment, config: Configuration) -> usize {
        assert_eq!(
            env.window(),
            self.stream.window(),
            "replica environment must live on the stream window"
        );
        assert_eq!(config.window(), self.stream.window());
        self.replicas.push(Replica {
            env,
            config,
            labels: None,
            trackers: Vec::new(),
            leaks: 0,
        });
        self.replicas.len() - 1
    }

    pub fn replica(&self, idx: usize) -> &Replica {
        &self.replicas[idx]
    }

    pub fn replicas(&self) -> &[Replica] {
        &self.replicas
    }

    /// Attach ordered particle labels to a replica (nearest-neighbour
    /// kernels only; label motion is defined by unit jumps).
    pub fn attach_labels(&mut self, idx: usize, reference: i64) -> Result<()> {
        if self.stream.kernel().max_abs_displacement() != 1 {
            return Err(Error::InvalidKernel(
                "label tracking needs a nearest-neighbour kernel".into(),
            ));
        }
        let tracker = LabelTracker::new(&self.replicas[idx].config, reference)?;
        self.replicas[idx].labels = Some(tracker);
        Ok(())
    }

    /// Attach a current tracker along `path` to a replica; returns its
    /// index within the replica.
    pub fn attach_tracker(&mut self, idx: usize, path: ObserverPath) -> usize {
        let r = &mut self.replicas[idx];
        r.trackers.push(CurrentTracker::new(path));
        r.trackers.len() - 1
    }

    pub fn current(&self, replica: usize, tracker: usize) -> i64 {
        self.replicas[replica].trackers[tracker].current()
    }

    fn apply_event(&mut self, ev: &Event) {
        let window = self.stream.window();
        for r in &mut self.replicas {
            // observer paths move with time regardless of acceptance;
            // path steps at the event time are processed first
            for tr in &mut r.trackers {
                tr.advance_path(ev.time, &r.config);
            }
            let occ = r.config.get(ev.site);
            if occ.is_zero() {
                continue;
            }
            let rate = r.env.alpha(ev.site) * self.g.eval(occ);
            if ev.mark > rate {
                continue;
            }
            let target = ev.site + ev.displacement;
            if window.contains(target) {
                r.config.apply_jump(ev.site, target);
            } else {
                // a finite particle pushed past the boundary is lost; from a
                // reservoir nothing is lost
                if !occ.is_infinite() {
                    r.config.remove_particle(ev.site);
                    r.leaks += 1;
                }
            }
            if let Some(labels) = &mut r.labels {
                labels.apply_jump(ev.site, target);
            }
            for tr in &mut r.trackers {
                tr.on_particle_jump(ev.site, target);
            }
        }
    }

    fn finalize_paths(&mut self, until: f64) {
        for r in &mut self.replicas {
            for tr in &mut r.trackers {
                tr.advance_path(until, &r.config);
            }
        }
        self.time = until;
    }

    /// Apply all events up to `until` in global time order.
    pub fn advance(&mut self, until: f64) {
        while self.stream.peek_time() <= until {
            let ev = self.stream.next_event();
            self.apply_event(&ev);
        }
        self.finalize_paths(until);
    }

    /// Like [`advance`](Self::advance), invoking `audit` after every applied
    /// event. Returns `true` when the audit held throughout; an audit
    /// returning `false` stops the run early.
    pub fn advance_with(
        &mut self,
        until: f64,
        mut audit: impl FnMut(&ReplicaSet, &Event) -> bool,
    ) -> bool {
        while self.stream.peek_time() <= until {
            let ev = self.stream.next_event();
            self.apply_event(&ev);
            if !audit(self, &ev) {
                self.finalize_paths(ev.time);
                return false;
            }
        }
        self.finalize_paths(until);
        true
    }

    pub fn total_leaks(&self) -> u64 {
        self.replicas.iter().map(|r| r.leaks).sum()
    }
}

/// Result of a source-process run: the final configuration together with
/// the source edge used and the leak count.
pub struct SourceRun {
    pub config: Configuration,
    pub edge: i64,
    pub leaks: u64,
}

/// Evolve the semi-infinite source initial condition (reservoirs on every
/// site up to `floor(beta t)`, vacuum to the right) for time `t`.
pub fn run_source_process(
    env: &Environment,
    kernel: &JumpKernel,
    g: &RateFunction,
    beta: f64,
    t: f64,
    seed: u64,
) -> Result<SourceRun> {
    if beta >= 0.0 {
        return Err(Error::InvalidScenario(format!(
            "source speed must be negative, got {beta}"
        )));
    }
    let edge = (beta * t).floor() as i64;
    let window = env.window();
    if edge - window.lo < 2 {
        return Err(Error::WindowTooSmall(format!(
            "source edge {edge} too close to window start {}",
            window.lo
        )));
    }
    if window.hi <= edge {
        return Err(Error::WindowTooSmall("no room right of the source".into()));
    }
    let mut set = ReplicaSet::new(seed, window, kernel.clone(), g.clone());
    let idx = set.add_replica(env.clone(), Configuration::source_block(window, edge));
    set.advance(t);
    Ok(SourceRun {
        config: set.replica(idx).config().clone(),
        edge,
        leaks: set.replica(idx).leaks(),
    })
}

/// Report of a finite-propagation probe.
#[derive(Clone, Copy, Debug)]
pub struct PropagationProbe {
    pub trials: u32,
    pub violations: u32,
    /// interior interval that was monitored
    pub interior: (i64, i64),
    /// boundary leaks across all trials (must be zero for admissibility)
    pub leaks: u64,
}

impl PropagationProbe {
    pub fn rate(&self) -> f64 {
        self.violations as f64 / self.trials as f64
    }
}

/// Couple two initial conditions that agree on the open interval
/// `(x, y)` and count trials in which they disagree somewhere in
/// `(x + W t, y - W t)` before time `t`.
#[allow(clippy::too_many_arguments)]
pub fn finite_propagation_probe(
    env: &Environment,
    kernel: &JumpKernel,
    g: &RateFunction,
    zeta: &Configuration,
    zeta_prime: &Configuration,
    agree: (i64, i64),
    speed: f64,
    t: f64,
    trials: u32,
    seed: u64,
) -> Result<PropagationProbe> {
    if speed <= 1.0 {
        return Err(Error::InvalidScenario(
            "propagation probe speed must exceed 1".into(),
        ));
    }
    let (x, y) = agree;
    let lo = x + (speed * t).ceil() as i64;
    let hi = y - (speed * t).ceil() as i64;
    if lo >= hi {
        return Err(Error::WindowTooSmall(format!(
            "agreement interval ({x}, {y}) shorter than twice the horizon reach; interior empty"
        )));
    }
    for s in (x + 1)..y {
        if zeta.get(s) != zeta_prime.get(s) {
            return Err(Error::InvalidConfiguration(format!(
                "configurations must agree on ({x}, {y}); differ at {s}"
            )));
        }
    }
    let mut violations = 0u32;
    let mut leaks = 0u64;
    for trial in 0..trials {
        let mut set = ReplicaSet::new(
            mix_seed(seed, trial as u64),
            env.window(),
            kernel.clone(),
            g.clone(),
        );
        let a = set.add_replica(env.clone(), zeta.clone());
        let b = set.add_replica(env.clone(), zeta_prime.clone());
        let clean = set.advance_with(t, |set, ev| {
            for s in [ev.site, ev.site + ev.displacement] {
                if s > lo && s < hi && set.replica(a).config().get(s) != set.replica(b).config().get(s)
                {
                    return false;
                }
            }
            true
        });
        if !clean {
            violations += 1;
        }
        leaks += set.total_leaks();
    }
    Ok(PropagationProbe {
        trials,
        violations,
        interior: (lo, hi),
        leaks,
    })
}

/// Couple two labelled replicas on one stream and check that the shifted
/// label order `sigma_n(t) >= sigma'_{n-k}(t)` holds at every event time.
pub fn label_order_check(set: &mut ReplicaSet, a: usize, b: usize, k: i64, until: f64) -> Result<bool> {
    if set.replica(a).labels().is_none() || set.replica(b).labels().is_none() {
        return Err(Error::InvalidConfiguration(
            "label order check needs labels attached to both replicas".into(),
        ));
    }
    if !set.replica(a).labels().unwrap().dominates_shifted(set.replica(b).labels().unwrap(), k) {
        return Ok(false);
    }
    Ok(set.advance_with(until, |set, _| {
        set.replica(a)
            .labels()
            .unwrap()
            .dominates_shifted(set.replica(b).labels().unwrap(), k)
    }))
}
