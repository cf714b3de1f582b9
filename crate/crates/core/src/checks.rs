//! Runtime audits and the small-instance verification suite behind the
//! `verify` subcommand.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::mechanism::{compute_weights, realize_round, select_winners_greedy, Objective};
use crate::model::{
    generate_population, validate_match_set, Feasibility, Market, MatchSet, PopulationSpec,
};
use crate::oracle::{assignment_count, solve_exact, MAX_SIDE};
use crate::sim::{run_experiment, EpochObserver, EpochView, MechanismKind, SimConfig};
use crate::valuation::{expected_value, expected_value_monte_carlo};

/// Slack for comparing sums of floating-point weights.
pub const TOLERANCE: f64 = 1e-9;

const KEPT_FAILURES: usize = 20;

#[derive(Debug, Default)]
struct Failures {
    count: AtomicU64,
    kept: Mutex<Vec<String>>,
}

impl Failures {
    fn push(&self, message: String) {
        self.count.fetch_add(1, Ordering::Relaxed);
        let mut kept = self.kept.lock().unwrap_or_else(|e| e.into_inner());
        if kept.len() < KEPT_FAILURES {
            kept.push(message);
        }
    }

    fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }

    fn messages(&self) -> Vec<String> {
        self.kept.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

/// Validates every match set it is shown and, as an observer, checks that
/// each epoch partitions the pool between the mechanisms.
#[derive(Debug, Default)]
pub struct Audit {
    match_sets: AtomicU64,
    epochs: AtomicU64,
    failures: Failures,
}

impl Audit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn check_match_set(
        &self,
        market: &Market,
        matches: &MatchSet,
        context: &dyn Fn() -> String,
    ) -> bool {
        self.match_sets.fetch_add(1, Ordering::Relaxed);
        match validate_match_set(market, matches) {
            Ok(Feasibility::Feasible) => true,
            Ok(Feasibility::Violates(c)) => {
                self.failures.push(format!("{}: violates {c}", context()));
                false
            }
            Err(e) => {
                self.failures.push(format!("{}: {e}", context()));
                false
            }
        }
    }

    pub fn match_sets(&self) -> u64 {
        self.match_sets.load(Ordering::Relaxed)
    }

    pub fn epochs(&self) -> u64 {
        self.epochs.load(Ordering::Relaxed)
    }

    pub fn failure_count(&self) -> u64 {
        self.failures.count()
    }

    /// The first few failure messages.
    pub fn failures(&self) -> Vec<String> {
        self.failures.messages()
    }

    fn check_partition(&self, view: &EpochView<'_>) {
        let where_ = || format!("replication {} epoch {}", view.replication, view.epoch);
        let n = view.pool.requesters().len();
        let m = view.pool.providers().len();
        if view.split.requester_kinds().len() != n || view.split.provider_kinds().len() != m {
            self.failures
                .push(format!("{}: split does not cover the pool", where_()));
        }
        let mut requesters: Vec<usize> = Vec::with_capacity(n);
        let mut providers: Vec<usize> = Vec::with_capacity(m);
        for round in view.rounds {
            let a = &round.arena;
            if a.market.requesters().len() != a.requester_ids.len()
                || a.market.providers().len() != a.provider_ids.len()
            {
                self.failures
                    .push(format!("{}: {} arena size mismatch", where_(), a.kind));
            }
            requesters.extend(&a.requester_ids);
            providers.extend(&a.provider_ids);
        }
        requesters.sort_unstable();
        providers.sort_unstable();
        if !requesters.iter().copied().eq(0..n) || !providers.iter().copied().eq(0..m) {
            self.failures
                .push(format!("{}: arenas do not partition the pool", where_()));
        }
        let (r, p) = view.trace.records.iter().fold((0, 0), |(r, p), rec| {
            (r + rec.requesters, p + rec.providers)
        });
        if r != n || p != m {
            self.failures.push(format!(
                "{}: recorded {r}+{p} participants, pool has {n}+{m}",
                where_()
            ));
        }
    }
}

impl EpochObserver for Audit {
    fn on_epoch(&self, view: &EpochView<'_>) {
        self.epochs.fetch_add(1, Ordering::Relaxed);
        self.check_partition(view);
        for round in view.rounds {
            self.check_match_set(&round.arena.market, &round.outcome.matches, &|| {
                format!(
                    "replication {} epoch {} {}",
                    view.replication, view.epoch, round.arena.kind
                )
            });
        }
    }
}

/// Compares each epoch's selections with the exact optimum when the arena
/// is small enough to enumerate. Every selection must stay at or below the
/// optimum; the welfare-greedy selection must also reach half of it.
///
/// Arenas beyond the oracle's size guard, or with more than `budget`
/// candidate assignments, are skipped.
#[derive(Debug)]
pub struct OracleAudit {
    budget: f64,
    checked: AtomicU64,
    skipped: AtomicU64,
    failures: Failures,
}

impl Default for OracleAudit {
    fn default() -> Self {
        Self::with_budget(Self::DEFAULT_BUDGET)
    }
}

impl OracleAudit {
    pub const DEFAULT_BUDGET: f64 = 2e6;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_budget(budget: f64) -> Self {
        Self {
            budget,
            checked: AtomicU64::new(0),
            skipped: AtomicU64::new(0),
            failures: Failures::default(),
        }
    }

    pub fn checked(&self) -> u64 {
        self.checked.load(Ordering::Relaxed)
    }

    pub fn skipped(&self) -> u64 {
        self.skipped.load(Ordering::Relaxed)
    }

    pub fn failure_count(&self) -> u64 {
        self.failures.count()
    }

    pub fn failures(&self) -> Vec<String> {
        self.failures.messages()
    }
}

impl EpochObserver for OracleAudit {
    fn on_epoch(&self, view: &EpochView<'_>) {
        for round in view.rounds {
            let a = &round.arena;
            let (n, m) = (a.market.requesters().len(), a.market.providers().len());
            let exact = if assignment_count(n, m, a.market.capacity()) <= self.budget {
                solve_exact(&a.market, &a.weights).ok()
            } else {
                None
            };
            let Some(exact) = exact else {
                self.skipped.fetch_add(1, Ordering::Relaxed);
                continue;
            };
            self.checked.fetch_add(1, Ordering::Relaxed);
            let esw = a.weights.total(&round.outcome.matches, Objective::Esw);
            let opt = exact.objective;
            let too_high = esw > opt + TOLERANCE;
            let too_low = a.kind == MechanismKind::Eswm && esw < 0.5 * opt - TOLERANCE;
            if too_high || too_low {
                self.failures.push(format!(
                    "replication {} epoch {} {}: esw {esw} vs optimum {opt}",
                    view.replication, view.epoch, a.kind
                ));
            }
        }
    }
}

impl<A: EpochObserver, B: EpochObserver> EpochObserver for (A, B) {
    fn on_epoch(&self, view: &EpochView<'_>) {
        self.0.on_epoch(view);
        self.1.on_epoch(view);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Random market of at most `max_side` per side and capacity in `1..=4`,
/// with attributes drawn from `spec`'s ranges.
pub fn random_small_market(spec: &PopulationSpec, max_side: usize, seed: u64) -> Market {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = PopulationSpec {
        requesters: rng.gen_range(1..=max_side),
        providers: rng.gen_range(1..=max_side),
        capacity: rng.gen_range(1..=4),
        ..spec.clone()
    };
    generate_population(&spec, rng.gen()).expect("spec was validated with the config")
}

fn greedy_vs_oracle(config: &ExperimentConfig, markets: u64) -> CheckOutcome {
    let audit = Audit::new();
    let mut worst_ratio = f64::INFINITY;
    let mut bad = Vec::new();
    for k in 0..markets {
        let seed = config.seed.wrapping_add(k);
        let market = random_small_market(&config.sim.population, 6, seed);
        let weights = compute_weights(&market, &config.sim.payment);
        for objective in [Objective::Esw, Objective::Platform] {
            let chosen = select_winners_greedy(&market, &weights, objective);
            audit.check_match_set(&market, &chosen, &|| {
                format!("market seed {seed} {objective:?}")
            });
        }
        let greedy = weights.total(
            &select_winners_greedy(&market, &weights, Objective::Esw),
            Objective::Esw,
        );
        let opt = solve_exact(&market, &weights)
            .expect("small market")
            .objective;
        if opt > 0.0 {
            worst_ratio = worst_ratio.min(greedy / opt);
        }
        if greedy > opt + TOLERANCE || greedy < 0.5 * opt - TOLERANCE {
            bad.push(seed);
        }
    }
    let passed = bad.is_empty() && audit.failure_count() == 0;
    CheckOutcome {
        name: "greedy-vs-oracle",
        passed,
        detail: format!(
            "{markets} markets up to 6x6, worst greedy/optimum {worst_ratio:.4}, \
             bound violations {}, infeasible sets {}",
            bad.len(),
            audit.failure_count()
        ),
    }
}

fn valuation_vs_monte_carlo(
    config: &ExperimentConfig,
    draws: usize,
    samples: usize,
) -> CheckOutcome {
    const K: f64 = 4.0;
    let spec = &config.sim.population;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut worst = 0.0f64;
    let mut outside = 0;
    for i in 0..draws {
        let requester = spec.sample_requester(i, &mut rng);
        let provider = spec.sample_provider(i, &mut rng);
        let exact = expected_value(&requester, &provider);
        let est = expected_value_monte_carlo(&requester, &provider, samples, &mut rng)
            .expect("samples > 0");
        if est.std_err > 0.0 {
            worst = worst.max((est.mean - exact).abs() / est.std_err);
        }
        if !est.agrees_with(exact, K) {
            outside += 1;
        }
    }
    CheckOutcome {
        name: "valuation-vs-monte-carlo",
        passed: outside == 0,
        detail: format!(
            "{draws} draws x {samples} samples, worst deviation {worst:.2} SE, \
             {outside} beyond {K} SE"
        ),
    }
}

fn budget_identity(config: &ExperimentConfig, markets: u64) -> CheckOutcome {
    let mut worst = 0.0f64;
    for k in 0..markets {
        let seed = config.seed.wrapping_add(k);
        let market = random_small_market(&config.sim.population, 8, seed);
        let weights = compute_weights(&market, &config.sim.payment);
        let matches = select_winners_greedy(&market, &weights, Objective::Esw);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = realize_round(&market, &weights, &matches, &config.sim.payment, &mut rng)
            .expect("greedy selections are feasible");
        let gap = out.metrics.platform_utility - (out.total_charges() - out.total_payments());
        worst = worst.max(gap.abs());
    }
    CheckOutcome {
        name: "budget-identity",
        passed: worst <= TOLERANCE,
        detail: format!("{markets} rounds, worst |platform - (charges - payments)| {worst:.2e}"),
    }
}

fn small_simulation(config: &ExperimentConfig) -> Vec<CheckOutcome> {
    let cap = |x: usize| x.clamp(1, MAX_SIDE);
    let sim = SimConfig {
        epochs: config.sim.epochs.min(5),
        replications: config.sim.replications.min(16),
        population: PopulationSpec {
            requesters: cap(config.sim.population.requesters),
            providers: cap(config.sim.population.providers),
            capacity: config.sim.population.capacity.min(4),
            ..config.sim.population.clone()
        },
        ..config.sim.clone()
    };
    let observers = (Audit::new(), OracleAudit::new());
    let first = run_experiment(&sim, config.seed, &observers);
    let second = run_experiment(&sim, config.seed, &());
    let (audit, oracle) = &observers;
    let ran = first.is_ok();
    let mut out = vec![
        CheckOutcome {
            name: "simulation-feasibility",
            passed: ran && audit.failure_count() == 0,
            detail: match &first {
                Ok(_) => format!(
                    "{} epochs, {} match sets, {} failures {:?}",
                    audit.epochs(),
                    audit.match_sets(),
                    audit.failure_count(),
                    audit.failures()
                ),
                Err(e) => format!("run failed: {e}"),
            },
        },
        CheckOutcome {
            name: "simulation-oracle",
            passed: ran && oracle.failure_count() == 0,
            detail: format!(
                "{} rounds checked, {} too large, {} failures {:?}",
                oracle.checked(),
                oracle.skipped(),
                oracle.failure_count(),
                oracle.failures()
            ),
        },
    ];
    out.push(CheckOutcome {
        name: "determinism",
        passed: ran && first.ok() == second.ok(),
        detail: format!(
            "{} replications x {} epochs run twice with seed {}",
            sim.replications, sim.epochs, config.seed
        ),
    });
    out
}

/// Runs the invariant and oracle checks on small instances drawn from the
/// config's attribute ranges.
pub fn verify_suite(config: &ExperimentConfig) -> Vec<CheckOutcome> {
    let mut out = vec![
        greedy_vs_oracle(config, 500),
        valuation_vs_monte_carlo(config, 30, 100_000),
        budget_identity(config, 200),
    ];
    out.extend(small_simulation(config));
    out
}
