//! Competition between the benchmark and ESWM over repeated epochs.
//!
//! A replication draws one global pool of participants and splits it evenly
//! between the two mechanisms. Each epoch, every mechanism selects winners
//! among its own members and realizes the round. In reselection mode every
//! participant then picks a mechanism for the next epoch with probability
//! proportional to a power of the average utility its role obtained there.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mechanism::{
    compute_weights, realize_round, select_winners_greedy, MechanismError, MechanismOutcome,
    Objective, PaymentPolicy, RoundMetrics, WeightTable,
};
use crate::model::{generate_population, Market, ModelError, PopulationSpec};

/// Normal quantile for two-sided 95% intervals.
pub const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanismKind {
    Benchmark,
    Eswm,
}

impl MechanismKind {
    pub const BOTH: [MechanismKind; 2] = [MechanismKind::Benchmark, MechanismKind::Eswm];

    pub fn objective(&self) -> Objective {
        match self {
            MechanismKind::Benchmark => Objective::Platform,
            MechanismKind::Eswm => Objective::Esw,
        }
    }

    pub fn other(&self) -> Self {
        match self {
            MechanismKind::Benchmark => MechanismKind::Eswm,
            MechanismKind::Eswm => MechanismKind::Benchmark,
        }
    }

    fn stream(&self) -> u64 {
        match self {
            MechanismKind::Benchmark => 0,
            MechanismKind::Eswm => 1,
        }
    }
}

impl fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MechanismKind::Benchmark => "benchmark",
            MechanismKind::Eswm => "eswm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Fixed even split for every epoch.
    Static,
    /// Participants migrate between epochs.
    Reselection,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Static => "static",
            Mode::Reselection => "reselection",
        })
    }
}

/// Which per-role average a participant compares when reselecting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtilitySignal {
    /// Average utility in expectation over completion times, given the
    /// epoch's matches.
    #[default]
    Expected,
    /// Average utility actually realized in the epoch.
    Realized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReselectionRule {
    pub exponent: f64,
    /// Averages below this are clamped up to it before exponentiation.
    pub floor: f64,
    pub signal: UtilitySignal,
}

impl Default for ReselectionRule {
    fn default() -> Self {
        Self {
            exponent: 0.5,
            floor: 1e-6,
            signal: UtilitySignal::Expected,
        }
    }
}

impl ReselectionRule {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.exponent.is_finite() && self.exponent > 0.0) {
            return Err(ModelError::config(
                "reselection.exponent",
                format!("must be finite and > 0, got {}", self.exponent),
            ));
        }
        if !(self.floor.is_finite() && self.floor > 0.0) {
            return Err(ModelError::config(
                "reselection.floor",
                format!("must be finite and > 0, got {}", self.floor),
            ));
        }
        Ok(())
    }

    /// Attraction score of an average utility.
    pub fn score(&self, average_utility: f64) -> f64 {
        average_utility.max(self.floor).powf(self.exponent)
    }

    /// Probability of joining the mechanism with average utility `target`
    /// rather than the one with `alternative`.
    pub fn join_probability(&self, target: f64, alternative: f64) -> f64 {
        let a = self.score(target);
        let b = self.score(alternative);
        a / (a + b)
    }
}

/// Mechanism membership of every participant in the global pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    requesters: Vec<MechanismKind>,
    providers: Vec<MechanismKind>,
}

impl Split {
    pub fn new(requesters: Vec<MechanismKind>, providers: Vec<MechanismKind>) -> Self {
        Self {
            requesters,
            providers,
        }
    }

    /// Uniformly random half/half partition of each side. With an odd count
    /// the benchmark receives the smaller half.
    pub fn even<R: Rng + ?Sized>(pool: &Market, rng: &mut R) -> Self {
        fn side<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<MechanismKind> {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            let mut kinds = vec![MechanismKind::Eswm; n];
            for &k in &order[..n / 2] {
                kinds[k] = MechanismKind::Benchmark;
            }
            kinds
        }
        let requesters = side(pool.requesters().len(), rng);
        let providers = side(pool.providers().len(), rng);
        Self {
            requesters,
            providers,
        }
    }

    pub fn requester_kinds(&self) -> &[MechanismKind] {
        &self.requesters
    }

    pub fn provider_kinds(&self) -> &[MechanismKind] {
        &self.providers
    }

    /// Global ids of `kind`'s requesters, ascending.
    pub fn requesters_of(&self, kind: MechanismKind) -> Vec<usize> {
        members(&self.requesters, kind)
    }

    /// Global ids of `kind`'s providers, ascending.
    pub fn providers_of(&self, kind: MechanismKind) -> Vec<usize> {
        members(&self.providers, kind)
    }

    pub fn swapped(&self) -> Self {
        Self {
            requesters: self.requesters.iter().map(MechanismKind::other).collect(),
            providers: self.providers.iter().map(MechanismKind::other).collect(),
        }
    }
}

fn members(kinds: &[MechanismKind], kind: MechanismKind) -> Vec<usize> {
    kinds
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == kind)
        .map(|(id, _)| id)
        .collect()
}

/// One mechanism's share of the pool, renumbered into its own market.
#[derive(Debug, Clone, PartialEq)]
pub struct Arena {
    pub kind: MechanismKind,
    pub market: Market,
    /// Global id of each local requester.
    pub requester_ids: Vec<usize>,
    /// Global id of each local provider.
    pub provider_ids: Vec<usize>,
    pub weights: WeightTable,
}

impl Arena {
    /// Carves `kind`'s members out of the pool. `pool_weights` must cover
    /// the whole pool.
    pub fn carve(
        kind: MechanismKind,
        pool: &Market,
        pool_weights: &WeightTable,
        split: &Split,
        capacity: usize,
    ) -> Result<Self, SimError> {
        let requester_ids = split.requesters_of(kind);
        let provider_ids = split.providers_of(kind);
        let market = Market::renumbered(
            requester_ids.iter().map(|&g| pool.requesters()[g].clone()),
            provider_ids.iter().map(|&g| pool.providers()[g].clone()),
            capacity,
        );
        let weights = pool_weights.restrict(&requester_ids, &provider_ids)?;
        Ok(Self {
            kind,
            market,
            requester_ids,
            provider_ids,
            weights,
        })
    }
}

/// Metrics of one mechanism in one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismRecord {
    pub mechanism: MechanismKind,
    pub requesters: usize,
    pub providers: usize,
    pub nsw: f64,
    pub esw: f64,
    pub realized_sw: f64,
    pub platform_utility: f64,
    pub avg_requester_utility: f64,
    pub avg_provider_utility: f64,
    pub avg_expected_requester_utility: f64,
    pub avg_expected_provider_utility: f64,
    pub tasks_served: usize,
}

impl MechanismRecord {
    fn from_metrics(mechanism: MechanismKind, m: &RoundMetrics) -> Self {
        Self {
            mechanism,
            requesters: m.requesters,
            providers: m.providers,
            nsw: m.nsw,
            esw: m.esw,
            realized_sw: m.realized_sw,
            platform_utility: m.platform_utility,
            avg_requester_utility: m.avg_requester_utility,
            avg_provider_utility: m.avg_provider_utility,
            avg_expected_requester_utility: m.avg_expected_requester_utility,
            avg_expected_provider_utility: m.avg_expected_provider_utility,
            tasks_served: m.winners,
        }
    }

    pub fn participants(&self) -> usize {
        self.requesters + self.providers
    }

    pub fn metric(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Requesters => self.requesters as f64,
            Metric::Providers => self.providers as f64,
            Metric::Nsw => self.nsw,
            Metric::Esw => self.esw,
            Metric::RealizedSw => self.realized_sw,
            Metric::PlatformUtility => self.platform_utility,
            Metric::AvgRequesterUtility => self.avg_requester_utility,
            Metric::AvgProviderUtility => self.avg_provider_utility,
            Metric::AvgExpectedRequesterUtility => self.avg_expected_requester_utility,
            Metric::AvgExpectedProviderUtility => self.avg_expected_provider_utility,
            Metric::TasksServed => self.tasks_served as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Requesters,
    Providers,
    Nsw,
    Esw,
    RealizedSw,
    PlatformUtility,
    AvgRequesterUtility,
    AvgProviderUtility,
    AvgExpectedRequesterUtility,
    AvgExpectedProviderUtility,
    TasksServed,
}

impl Metric {
    pub const ALL: [Metric; 11] = [
        Metric::Requesters,
        Metric::Providers,
        Metric::Nsw,
        Metric::Esw,
        Metric::RealizedSw,
        Metric::PlatformUtility,
        Metric::AvgRequesterUtility,
        Metric::AvgProviderUtility,
        Metric::AvgExpectedRequesterUtility,
        Metric::AvgExpectedProviderUtility,
        Metric::TasksServed,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Requesters => "requesters",
            Metric::Providers => "providers",
            Metric::Nsw => "nsw",
            Metric::Esw => "esw",
            Metric::RealizedSw => "realized_sw",
            Metric::PlatformUtility => "platform_utility",
            Metric::AvgRequesterUtility => "avg_requester_utility",
            Metric::AvgProviderUtility => "avg_provider_utility",
            Metric::AvgExpectedRequesterUtility => "avg_expected_requester_utility",
            Metric::AvgExpectedProviderUtility => "avg_expected_provider_utility",
            Metric::TasksServed => "tasks_served",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub records: Vec<MechanismRecord>,
}

impl EpochTrace {
    pub fn record(&self, kind: MechanismKind) -> Option<&MechanismRecord> {
        self.records.iter().find(|r| r.mechanism == kind)
    }
}

/// One mechanism's round within an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Round {
    pub arena: Arena,
    pub outcome: MechanismOutcome,
}

/// Runs one epoch on the given arenas.
///
/// Each arena realizes its round on its own random stream, keyed by
/// `epoch_seed` and the arena's mechanism kind, so results do not depend on
/// the order arenas are passed in.
pub fn run_epoch(
    epoch: usize,
    arenas: Vec<Arena>,
    policy: &PaymentPolicy,
    epoch_seed: u64,
) -> Result<(EpochTrace, Vec<Round>), SimError> {
    let mut records = Vec::with_capacity(arenas.len());
    let mut rounds = Vec::with_capacity(arenas.len());
    for arena in arenas {
        let matches = select_winners_greedy(&arena.market, &arena.weights, arena.kind.objective());
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        rng.set_stream(arena.kind.stream());
        let outcome = realize_round(&arena.market, &arena.weights, &matches, policy, &mut rng)?;
        records.push(MechanismRecord::from_metrics(arena.kind, &outcome.metrics));
        rounds.push(Round { arena, outcome });
    }
    Ok((EpochTrace { epoch, records }, rounds))
}

/// Draws the next epoch's membership from the previous epoch's averages.
///
/// Requesters compare requester averages and providers compare provider
/// averages, using the rule's utility signal. Each participant decides
/// independently.
pub fn reselect<R: Rng + ?Sized>(
    previous: &EpochTrace,
    pool: &Market,
    rule: &ReselectionRule,
    rng: &mut R,
) -> Split {
    let (requester_metric, provider_metric) = match rule.signal {
        UtilitySignal::Expected => (
            Metric::AvgExpectedRequesterUtility,
            Metric::AvgExpectedProviderUtility,
        ),
        UtilitySignal::Realized => (Metric::AvgRequesterUtility, Metric::AvgProviderUtility),
    };
    let avg = |kind, metric| previous.record(kind).map_or(0.0, |r| r.metric(metric));
    let requester_p = rule.join_probability(
        avg(MechanismKind::Eswm, requester_metric),
        avg(MechanismKind::Benchmark, requester_metric),
    );
    let provider_p = rule.join_probability(
        avg(MechanismKind::Eswm, provider_metric),
        avg(MechanismKind::Benchmark, provider_metric),
    );
    let mut pick = |p: f64| {
        if rng.gen_bool(p) {
            MechanismKind::Eswm
        } else {
            MechanismKind::Benchmark
        }
    };
    let requesters = (0..pool.requesters().len())
        .map(|_| pick(requester_p))
        .collect();
    let providers = (0..pool.providers().len())
        .map(|_| pick(provider_p))
        .collect();
    Split::new(requesters, providers)
}

/// Everything a replication needs besides its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub replications: usize,
    pub population: PopulationSpec,
    pub payment: PaymentPolicy,
    pub reselection: ReselectionRule,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Reselection,
            epochs: 30,
            replications: 200,
            population: PopulationSpec::default(),
            payment: PaymentPolicy::default(),
            reselection: ReselectionRule::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs < 1 {
            return Err(ModelError::config("epochs", "must be >= 1"));
        }
        if self.replications < 1 {
            return Err(ModelError::config("replications", "must be >= 1"));
        }
        self.population.validate()?;
        self.payment.validate()?;
        self.reselection.validate()
    }
}

/// What an observer sees after each epoch.
pub struct EpochView<'a> {
    pub replication: usize,
    pub epoch: usize,
    pub pool: &'a Market,
    pub split: &'a Split,
    pub rounds: &'a [Round],
    pub trace: &'a EpochTrace,
}

/// Hook for inspecting every epoch of an experiment, e.g. to check
/// feasibility or cross-check selections against the exact oracle.
/// Called from worker threads.
pub trait EpochObserver: Sync {
    fn on_epoch(&self, view: &EpochView<'_>);
}

impl EpochObserver for () {
    fn on_epoch(&self, _view: &EpochView<'_>) {}
}

/// Seed stream for replication `replication` of a run with `master_seed`.
pub fn replication_rng(master_seed: u64, replication: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(replication as u64);
    rng
}

/// Runs a single replication and returns its per-epoch traces.
pub fn run_replication(
    config: &SimConfig,
    master_seed: u64,
    replication: usize,
    observer: &dyn EpochObserver,
) -> Result<Vec<EpochTrace>, SimError> {
    let mut rng = replication_rng(master_seed, replication);
    let pool = generate_population(&config.population, rng.next_u64())?;
    let pool_weights = compute_weights(&pool, &config.payment);
    let capacity = config.population.capacity;

    let mut split = Split::even(&pool, &mut rng);
    let mut traces = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let epoch_seed = rng.next_u64();
        let arenas = MechanismKind::BOTH
            .iter()
            .map(|&kind| Arena::carve(kind, &pool, &pool_weights, &split, capacity))
            .collect::<Result<Vec<_>, _>>()?;
        let (trace, rounds) = run_epoch(epoch, arenas, &config.payment, epoch_seed)?;
        observer.on_epoch(&EpochView {
            replication,
            epoch,
            pool: &pool,
            split: &split,
            rounds: &rounds,
            trace: &trace,
        });
        if config.mode == Mode::Reselection && epoch + 1 < config.epochs {
            split = reselect(&trace, &pool, &config.reselection, &mut rng);
        }
        traces.push(trace);
    }
    Ok(traces)
}

/// Cross-replication mean and 95% half-width of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub epoch: usize,
    pub mechanism: MechanismKind,
    pub metric: Metric,
    pub mean: f64,
    pub half_width: f64,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    /// Indexed by replication, then epoch.
    pub traces: Vec<Vec<EpochTrace>>,
    pub summary: Vec<SummaryRow>,
}

impl Experiment {
    pub fn summary_row(
        &self,
        epoch: usize,
        mechanism: MechanismKind,
        metric: Metric,
    ) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.epoch == epoch && r.mechanism == mechanism && r.metric == metric)
    }

    /// Values of a metric across replications at one epoch.
    pub fn samples(&self, epoch: usize, mechanism: MechanismKind, metric: Metric) -> Vec<f64> {
        self.traces
            .iter()
            .filter_map(|rep| rep.get(epoch)?.record(mechanism))
            .map(|r| r.metric(metric))
            .collect()
    }
}

/// Runs all replications in parallel and summarizes them.
///
/// Replication `r` uses stream `r` of a generator seeded with `master_seed`,
/// so results do not depend on scheduling.
pub fn run_experiment(
    config: &SimConfig,
    master_seed: u64,
    observer: &dyn EpochObserver,
) -> Result<Experiment, SimError> {
    config.validate()?;
    let traces = (0..config.replications)
        .into_par_iter()
        .map(|rep| run_replication(config, master_seed, rep, observer))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = summarize(&traces, config.epochs);
    Ok(Experiment { traces, summary })
}

/// Per-epoch, per-mechanism, per-metric mean and normal-approximation 95%
/// half-width across replications.
pub fn summarize(traces: &[Vec<EpochTrace>], epochs: usize) -> Vec<SummaryRow> {
    let mut rows = Vec::with_capacity(epochs * 2 * Metric::ALL.len());
    for epoch in 0..epochs {
        for mechanism in MechanismKind::BOTH {
            for metric in Metric::ALL {
                let xs: Vec<f64> = traces
                    .iter()
                    .filter_map(|rep| rep.get(epoch)?.record(mechanism))
                    .map(|r| r.metric(metric))
                    .collect();
                let (mean, half_width) = mean_and_half_width(&xs);
                rows.push(SummaryRow {
                    epoch,
                    mechanism,
                    metric,
                    mean,
                    half_width,
                    replications: xs.len(),
                });
            }
        }
    }
    rows
}

/// Sample mean and `Z_95` times the standard error; the half-width is zero
/// for fewer than two samples.
pub fn mean_and_half_width(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Z_95 * (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_match_set;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn small_config(mode: Mode, epochs: usize, replications: usize) -> SimConfig {
        SimConfig {
            mode,
            epochs,
            replications,
            population: PopulationSpec {
                requesters: 20,
                providers: 20,
                capacity: 6,
                ..PopulationSpec::default()
            },
            ..SimConfig::default()
        }
    }

    fn arenas_for(pool: &Market, split: &Split, capacity: usize) -> Vec<Arena> {
        let w = compute_weights(pool, &PaymentPolicy::default());
        MechanismKind::BOTH
            .iter()
            .map(|&k| Arena::carve(k, pool, &w, split, capacity).unwrap())
            .collect()
    }

    #[test]
    fn empty_populations_give_zero_records() {
        let pool = Market::empty(4);
        let split = Split::new(vec![], vec![]);
        let (trace, rounds) = run_epoch(
            0,
            arenas_for(&pool, &split, 4),
            &PaymentPolicy::default(),
            1,
        )
        .unwrap();
        assert_eq!(rounds.len(), 2);
        for r in &trace.records {
            assert_eq!(r.participants(), 0);
            for m in Metric::ALL {
                assert_eq!(r.metric(m), 0.0);
            }
        }
    }

    #[test]
    fn swapping_labels_swaps_records() {
        let pool = generate_population(&small_config(Mode::Static, 1, 1).population, 9).unwrap();
        let split = Split::even(&pool, &mut ChaCha8Rng::seed_from_u64(2));
        let arenas = arenas_for(&pool, &split, 6);
        let mut reversed = arenas.clone();
        reversed.reverse();
        let (a, _) = run_epoch(0, arenas, &PaymentPolicy::default(), 77).unwrap();
        let (b, _) = run_epoch(0, reversed, &PaymentPolicy::default(), 77).unwrap();
        assert_eq!(a.records[0], b.records[1]);
        assert_eq!(a.records[1], b.records[0]);
    }

    #[test]
    fn identical_populations_differ_only_by_objective() {
        // Both mechanisms see the whole pool.
        let pool = generate_population(&small_config(Mode::Static, 1, 1).population, 4).unwrap();
        let w = compute_weights(&pool, &PaymentPolicy::default());
        let all = Split::new(
            vec![MechanismKind::Eswm; pool.requesters().len()],
            vec![MechanismKind::Eswm; pool.providers().len()],
        );
        let eswm = Arena::carve(MechanismKind::Eswm, &pool, &w, &all, 6).unwrap();
        let bench = Arena::carve(MechanismKind::Benchmark, &pool, &w, &all.swapped(), 6).unwrap();
        assert_eq!(eswm.market, bench.market);
        let (t, _) = run_epoch(0, vec![bench, eswm], &PaymentPolicy::default(), 3).unwrap();
        let e = t.record(MechanismKind::Eswm).unwrap();
        let b = t.record(MechanismKind::Benchmark).unwrap();
        // Greedy is within half of the optimum, and the benchmark's match set
        // is one candidate for that optimum.
        assert!(e.esw >= 0.5 * b.esw - 1e-9);
        assert!(b.platform_utility >= 0.0);
    }

    #[test]
    fn even_split_halves_each_side() {
        let pool = generate_population(
            &PopulationSpec {
                requesters: 9,
                providers: 10,
                ..PopulationSpec::default()
            },
            1,
        )
        .unwrap();
        let split = Split::even(&pool, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(split.requesters_of(MechanismKind::Benchmark).len(), 4);
        assert_eq!(split.requesters_of(MechanismKind::Eswm).len(), 5);
        assert_eq!(split.providers_of(MechanismKind::Benchmark).len(), 5);
        assert_eq!(split.providers_of(MechanismKind::Eswm).len(), 5);
    }

    #[test]
    fn join_probability_cases() {
        let rule = ReselectionRule::default();
        assert_eq!(rule.join_probability(3.0, 3.0), 0.5);
        let eps = rule.floor;
        assert!((rule.join_probability(4.0 * eps, eps) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rule.join_probability(-2.0, 0.0), 0.5);
        assert_eq!(rule.join_probability(0.0, -7.0), 0.5);
        let linear = ReselectionRule {
            exponent: 1.0,
            ..rule
        };
        assert!((linear.join_probability(3.0, 1.0) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn reselection_rule_validation() {
        let d = ReselectionRule::default();
        assert!(ReselectionRule { exponent: 0.0, ..d }.validate().is_err());
        assert!(ReselectionRule { floor: 0.0, ..d }.validate().is_err());
        assert!(ReselectionRule::default().validate().is_ok());
    }

    fn trace_with(req: (f64, f64), prov: (f64, f64)) -> EpochTrace {
        let rec = |mechanism, r, p| MechanismRecord {
            mechanism,
            requesters: 0,
            providers: 0,
            nsw: 0.0,
            esw: 0.0,
            realized_sw: 0.0,
            platform_utility: 0.0,
            avg_requester_utility: r,
            avg_provider_utility: p,
            avg_expected_requester_utility: r,
            avg_expected_provider_utility: p,
            tasks_served: 0,
        };
        EpochTrace {
            epoch: 0,
            records: vec![
                rec(MechanismKind::Benchmark, req.0, prov.0),
                rec(MechanismKind::Eswm, req.1, prov.1),
            ],
        }
    }

    #[test]
    fn reselect_frequencies_follow_rule() {
        let pool = generate_population(
            &PopulationSpec {
                requesters: 20_000,
                providers: 20_000,
                ..PopulationSpec::default()
            },
            1,
        )
        .unwrap();
        let rule = ReselectionRule::default();
        // Equal requester averages, provider averages 1 vs 4.
        let trace = trace_with((2.0, 2.0), (1.0, 4.0));
        let split = reselect(&trace, &pool, &rule, &mut ChaCha8Rng::seed_from_u64(3));
        let n = 20_000.0;
        let req = split.requesters_of(MechanismKind::Eswm).len() as f64 / n;
        let prov = split.providers_of(MechanismKind::Eswm).len() as f64 / n;
        let se = |p: f64| (p * (1.0 - p) / n).sqrt();
        assert!((req - 0.5).abs() < 4.0 * se(0.5), "{req}");
        assert!((prov - 2.0 / 3.0).abs() < 4.0 * se(2.0 / 3.0), "{prov}");
    }

    #[test]
    fn reselect_reads_configured_signal() {
        let pool = generate_population(
            &PopulationSpec {
                requesters: 2000,
                providers: 0,
                ..PopulationSpec::default()
            },
            1,
        )
        .unwrap();
        // Realized averages favour the benchmark, expected ones are equal.
        let mut trace = trace_with((1.0, 1.0), (1.0, 1.0));
        trace.records[1].avg_requester_utility = -5.0;
        let count = |signal| {
            let rule = ReselectionRule {
                signal,
                ..ReselectionRule::default()
            };
            reselect(&trace, &pool, &rule, &mut ChaCha8Rng::seed_from_u64(3))
                .requesters_of(MechanismKind::Eswm)
                .len()
        };
        assert!(count(UtilitySignal::Realized) < 10);
        assert!((900..1100).contains(&count(UtilitySignal::Expected)));
    }

    #[test]
    fn reselect_partitions_pool() {
        let pool =
            generate_population(&small_config(Mode::Reselection, 1, 1).population, 2).unwrap();
        let split = reselect(
            &trace_with((1.0, 3.0), (0.5, 0.1)),
            &pool,
            &ReselectionRule::default(),
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let mut req: Vec<usize> = split.requesters_of(MechanismKind::Benchmark);
        req.extend(split.requesters_of(MechanismKind::Eswm));
        req.sort_unstable();
        assert_eq!(req, (0..pool.requesters().len()).collect::<Vec<_>>());
    }

    #[test]
    fn single_epoch_single_replication() {
        let exp = run_experiment(&small_config(Mode::Static, 1, 1), 5, &()).unwrap();
        assert_eq!(exp.traces.len(), 1);
        assert_eq!(exp.traces[0].len(), 1);
        assert_eq!(exp.traces[0][0].records.len(), 2);
        assert!(exp.summary.iter().all(|r| r.half_width == 0.0));
        assert_eq!(exp.summary.len(), 2 * Metric::ALL.len());
    }

    #[test]
    fn experiments_are_deterministic() {
        let cfg = small_config(Mode::Reselection, 6, 8);
        let a = run_experiment(&cfg, 42, &()).unwrap();
        let b = run_experiment(&cfg, 42, &()).unwrap();
        assert_eq!(a, b);
        let c = run_experiment(&cfg, 43, &()).unwrap();
        assert_ne!(a.traces, c.traces);
    }

    #[test]
    fn static_mode_keeps_membership() {
        let cfg = small_config(Mode::Static, 5, 3);
        let exp = run_experiment(&cfg, 1, &()).unwrap();
        for rep in &exp.traces {
            for t in rep {
                for r in &t.records {
                    assert_eq!(r.requesters, 10);
                    assert_eq!(r.providers, 10);
                }
            }
        }
    }

    struct Checks {
        epochs: AtomicUsize,
        bad: AtomicUsize,
    }

    impl EpochObserver for Checks {
        fn on_epoch(&self, view: &EpochView<'_>) {
            self.epochs.fetch_add(1, Ordering::Relaxed);
            let n: usize = view
                .rounds
                .iter()
                .map(|r| r.arena.market.requesters().len())
                .sum();
            let m: usize = view
                .rounds
                .iter()
                .map(|r| r.arena.market.providers().len())
                .sum();
            let mut ids: Vec<usize> = view
                .rounds
                .iter()
                .flat_map(|r| r.arena.requester_ids.iter().copied())
                .collect();
            ids.sort_unstable();
            let partition = n == view.pool.requesters().len()
                && m == view.pool.providers().len()
                && ids == (0..n).collect::<Vec<_>>();
            let feasible = view.rounds.iter().all(|r| {
                validate_match_set(&r.arena.market, &r.outcome.matches)
                    .unwrap()
                    .is_feasible()
            });
            if !(partition && feasible) {
                self.bad.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    #[test]
    fn observer_sees_every_epoch() {
        let cfg = small_config(Mode::Reselection, 4, 5);
        let checks = Checks {
            epochs: AtomicUsize::new(0),
            bad: AtomicUsize::new(0),
        };
        run_experiment(&cfg, 3, &checks).unwrap();
        assert_eq!(checks.epochs.load(Ordering::Relaxed), 20);
        assert_eq!(checks.bad.load(Ordering::Relaxed), 0);
    }

    #[test]
    fn summary_matches_traces() {
        let cfg = small_config(Mode::Reselection, 3, 7);
        let exp = run_experiment(&cfg, 11, &()).unwrap();
        for epoch in 0..3 {
            let xs = exp.samples(epoch, MechanismKind::Eswm, Metric::Esw);
            let row = exp
                .summary_row(epoch, MechanismKind::Eswm, Metric::Esw)
                .unwrap();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            assert_eq!(row.mean, mean);
            assert_eq!(row.replications, 7);
        }
    }

    #[test]
    fn half_width_formula() {
        let (m, h) = mean_and_half_width(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((h - Z_95 * sd / 2.0).abs() < 1e-12);
        assert_eq!(mean_and_half_width(&[]), (0.0, 0.0));
        assert_eq!(mean_and_half_width(&[3.0]), (3.0, 0.0));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = small_config(Mode::Static, 0, 1);
        assert!(run_experiment(&cfg, 0, &()).is_err());
        cfg.epochs = 1;
        cfg.replications = 0;
        assert!(run_experiment(&cfg, 0, &()).is_err());
    }
}
