//! Participants, markets and match sets.
//!
//! A [`Market`] holds one platform's requesters and providers together with
//! the platform capacity `K`. Ids are dense ordinals `0..n` per side, which
//! makes them usable as indices and gives a total order for tie-breaking.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{field}: {constraint}")]
    Config {
        field: &'static str,
        constraint: String,
    },
    #[error("unknown requester id {0}")]
    UnknownRequester(usize),
    #[error("unknown provider id {0}")]
    UnknownProvider(usize),
    #[error("{side} ids must be dense ordinals 0..n, found {found} at position {position}")]
    NonDenseIds {
        side: &'static str,
        position: usize,
        found: usize,
    },
}

impl ModelError {
    pub(crate) fn config(field: &'static str, constraint: impl Into<String>) -> Self {
        ModelError::Config {
            field,
            constraint: constraint.into(),
        }
    }
}

/// Shape of the value-loss curve applied once a task misses its deadline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    /// Full value on time, worthless afterwards.
    Step,
    /// `max(0, 1 - rate * delay)`.
    Linear,
    /// `exp(-rate * delay)`.
    Exponential,
}

impl CurveKind {
    pub const ALL: [CurveKind; 3] = [CurveKind::Step, CurveKind::Linear, CurveKind::Exponential];
}

impl fmt::Display for CurveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurveKind::Step => "step",
            CurveKind::Linear => "linear",
            CurveKind::Exponential => "exponential",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepreciationCurve {
    pub kind: CurveKind,
    /// Per unit of time past the deadline. Ignored by [`CurveKind::Step`].
    pub rate: f64,
}

impl DepreciationCurve {
    pub fn new(kind: CurveKind, rate: f64) -> Result<Self, ModelError> {
        if !(rate.is_finite() && rate >= 0.0) {
            return Err(ModelError::config(
                "depreciation.rate",
                format!("must be finite and >= 0, got {rate}"),
            ));
        }
        Ok(Self { kind, rate })
    }

    pub fn step() -> Self {
        Self {
            kind: CurveKind::Step,
            rate: 0.0,
        }
    }

    /// Fraction of the full value kept when the task finishes `delay` time
    /// units after the deadline. In `[0, 1]`, equal to 1 at zero delay and
    /// non-increasing in `delay`.
    pub fn factor(&self, delay: f64) -> f64 {
        if delay <= 0.0 {
            return 1.0;
        }
        match self.kind {
            CurveKind::Step => 0.0,
            CurveKind::Linear => (1.0 - self.rate * delay).max(0.0),
            CurveKind::Exponential => (-self.rate * delay).exp(),
        }
    }
}

/// On-time/late mixture: on time with probability `on_time_prob`, otherwise
/// late by an exponentially distributed delay with rate `late_rate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PunctualityModel {
    pub on_time_prob: f64,
    pub late_rate: f64,
}

impl PunctualityModel {
    pub fn new(on_time_prob: f64, late_rate: f64) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&on_time_prob) {
            return Err(ModelError::config(
                "punctuality.on_time_prob",
                format!("must lie in [0, 1], got {on_time_prob}"),
            ));
        }
        if !(late_rate.is_finite() && late_rate > 0.0) {
            return Err(ModelError::config(
                "punctuality.late_rate",
                format!("must be finite and > 0, got {late_rate}"),
            ));
        }
        Ok(Self {
            on_time_prob,
            late_rate,
        })
    }

    pub fn mean_delay_if_late(&self) -> f64 {
        1.0 / self.late_rate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Requester {
    pub id: usize,
    /// Full task valuation when completed by the deadline.
    pub value: f64,
    pub deadline: f64,
    pub depreciation: DepreciationCurve,
}

impl Requester {
    pub fn new(
        id: usize,
        value: f64,
        deadline: f64,
        depreciation: DepreciationCurve,
    ) -> Result<Self, ModelError> {
        if !(value.is_finite() && value > 0.0) {
            return Err(ModelError::config(
                "requester.value",
                format!("must be finite and > 0, got {value}"),
            ));
        }
        if !(deadline.is_finite() && deadline > 0.0) {
            return Err(ModelError::config(
                "requester.deadline",
                format!("must be finite and > 0, got {deadline}"),
            ));
        }
        let depreciation = DepreciationCurve::new(depreciation.kind, depreciation.rate)?;
        Ok(Self {
            id,
            value,
            deadline,
            depreciation,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provider {
    pub id: usize,
    /// True cost of performing a task.
    pub cost: f64,
    pub punctuality: PunctualityModel,
}

impl Provider {
    pub fn new(id: usize, cost: f64, punctuality: PunctualityModel) -> Result<Self, ModelError> {
        if !(cost.is_finite() && cost >= 0.0) {
            return Err(ModelError::config(
                "provider.cost",
                format!("must be finite and >= 0, got {cost}"),
            ));
        }
        let punctuality = PunctualityModel::new(punctuality.on_time_prob, punctuality.late_rate)?;
        Ok(Self {
            id,
            cost,
            punctuality,
        })
    }
}

/// One platform instance: its participants and the number of task requests
/// it can serve in a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Market {
    requesters: Vec<Requester>,
    providers: Vec<Provider>,
    capacity: usize,
}

impl Market {
    /// Builds a market, checking that ids on each side are `0..n` in order.
    pub fn new(
        requesters: Vec<Requester>,
        providers: Vec<Provider>,
        capacity: usize,
    ) -> Result<Self, ModelError> {
        if let Some((position, r)) = requesters.iter().enumerate().find(|(i, r)| r.id != *i) {
            return Err(ModelError::NonDenseIds {
                side: "requester",
                position,
                found: r.id,
            });
        }
        if let Some((position, p)) = providers.iter().enumerate().find(|(i, p)| p.id != *i) {
            return Err(ModelError::NonDenseIds {
                side: "provider",
                position,
                found: p.id,
            });
        }
        Ok(Self {
            requesters,
            providers,
            capacity,
        })
    }

    /// Builds a market from participants carrying arbitrary ids, renumbering
    /// them densely in the given order.
    pub fn renumbered(
        requesters: impl IntoIterator<Item = Requester>,
        providers: impl IntoIterator<Item = Provider>,
        capacity: usize,
    ) -> Self {
        let requesters = requesters
            .into_iter()
            .enumerate()
            .map(|(id, r)| Requester { id, ..r })
            .collect();
        let providers = providers
            .into_iter()
            .enumerate()
            .map(|(id, p)| Provider { id, ..p })
            .collect();
        Self {
            requesters,
            providers,
            capacity,
        }
    }

    pub fn empty(capacity: usize) -> Self {
        Self {
            requesters: Vec::new(),
            providers: Vec::new(),
            capacity,
        }
    }

    pub fn requesters(&self) -> &[Requester] {
        &self.requesters
    }

    pub fn providers(&self) -> &[Provider] {
        &self.providers
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn requester(&self, id: usize) -> Result<&Requester, ModelError> {
        self.requesters
            .get(id)
            .ok_or(ModelError::UnknownRequester(id))
    }

    pub fn provider(&self, id: usize) -> Result<&Provider, ModelError> {
        self.providers
            .get(id)
            .ok_or(ModelError::UnknownProvider(id))
    }

    pub fn is_empty(&self) -> bool {
        self.requesters.is_empty() && self.providers.is_empty()
    }
}

/// A (requester id, provider id) assignment, i.e. one `l_ji = 1` entry.
pub type Pair = (usize, usize);

/// The set of matched pairs chosen for one round.
///
/// Pairs are kept in the order they were selected. The selection flags for
/// requesters and providers are derived from the pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchSet {
    pairs: Vec<Pair>,
}

impl MatchSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = Pair>) -> Self {
        Self {
            pairs: pairs.into_iter().collect(),
        }
    }

    pub fn push(&mut self, requester: usize, provider: usize) {
        self.pairs.push((requester, provider));
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs in ascending (requester, provider) order.
    pub fn sorted_pairs(&self) -> Vec<Pair> {
        let mut pairs = self.pairs.clone();
        pairs.sort_unstable();
        pairs
    }

    /// Number of times each requester is selected (`x_j` when feasible).
    pub fn requester_selection(&self, requesters: usize) -> Vec<usize> {
        let mut x = vec![0; requesters];
        for &(j, _) in &self.pairs {
            if let Some(slot) = x.get_mut(j) {
                *slot += 1;
            }
        }
        x
    }

    /// Number of times each provider is selected (`y_i` when feasible).
    pub fn provider_selection(&self, providers: usize) -> Vec<usize> {
        let mut y = vec![0; providers];
        for &(_, i) in &self.pairs {
            if let Some(slot) = y.get_mut(i) {
                *slot += 1;
            }
        }
        y
    }

    pub fn provider_of(&self, requester: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|(j, _)| *j == requester)
            .map(|&(_, i)| i)
    }
}

/// The feasibility constraints on a [`MatchSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Constraint {
    /// At most `K` requesters served.
    Capacity,
    /// Selected requesters, matched pairs and selected providers agree in count.
    Balance,
    /// Each requester selected at most once.
    RequesterBinary,
    /// Each provider selected at most once.
    ProviderBinary,
    /// Each (requester, provider) pair used at most once.
    PairBinary,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Constraint::Capacity => "capacity: at most K matches",
            Constraint::Balance => "balance: selected requesters = matches = selected providers",
            Constraint::RequesterBinary => {
                "requester selection: each requester matched at most once"
            }
            Constraint::ProviderBinary => "provider selection: each provider matched at most once",
            Constraint::PairBinary => "pair selection: each pair used at most once",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feasibility {
    Feasible,
    Violates(Constraint),
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible)
    }
}

/// Checks a match set against the market's constraints.
///
/// Ids that do not exist in the market are a structural error rather than a
/// constraint violation. The binary constraints are checked first since the
/// counting constraints are only meaningful once they hold.
pub fn validate_match_set(market: &Market, matches: &MatchSet) -> Result<Feasibility, ModelError> {
    for &(j, i) in matches.pairs() {
        market.requester(j)?;
        market.provider(i)?;
    }

    let mut seen = HashSet::with_capacity(matches.len());
    if !matches.pairs().iter().all(|pair| seen.insert(*pair)) {
        return Ok(Feasibility::Violates(Constraint::PairBinary));
    }

    let x = matches.requester_selection(market.requesters().len());
    if x.iter().any(|&n| n > 1) {
        return Ok(Feasibility::Violates(Constraint::RequesterBinary));
    }
    let y = matches.provider_selection(market.providers().len());
    if y.iter().any(|&n| n > 1) {
        return Ok(Feasibility::Violates(Constraint::ProviderBinary));
    }

    let selected_requesters: usize = x.iter().sum();
    if selected_requesters > market.capacity() {
        return Ok(Feasibility::Violates(Constraint::Capacity));
    }
    let selected_providers: usize = y.iter().sum();
    if selected_requesters != matches.len() || selected_providers != matches.len() {
        return Ok(Feasibility::Violates(Constraint::Balance));
    }
    Ok(Feasibility::Feasible)
}

/// Closed interval for uniformly sampled attributes. Serialized as
/// `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64)", into = "(f64, f64)")]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl From<(f64, f64)> for Range {
    fn from((lo, hi): (f64, f64)) -> Self {
        Self { lo, hi }
    }
}

impl From<Range> for (f64, f64) {
    fn from(r: Range) -> Self {
        (r.lo, r.hi)
    }
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }

    fn check(
        &self,
        field: &'static str,
        admissible: impl Fn(f64) -> bool,
        rule: &str,
    ) -> Result<(), ModelError> {
        if !(self.lo.is_finite() && self.hi.is_finite()) {
            return Err(ModelError::config(field, "bounds must be finite"));
        }
        if self.lo > self.hi {
            return Err(ModelError::config(
                field,
                format!("lower bound {} exceeds upper bound {}", self.lo, self.hi),
            ));
        }
        if !(admissible(self.lo) && admissible(self.hi)) {
            return Err(ModelError::config(
                field,
                format!("bounds [{}, {}] must satisfy {rule}", self.lo, self.hi),
            ));
        }
        Ok(())
    }
}

/// Participant counts and attribute ranges for a randomly generated market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub requesters: usize,
    pub providers: usize,
    pub capacity: usize,
    pub value: Range,
    pub deadline: Range,
    pub depreciation_rate: Range,
    /// Curve kinds requesters draw from, uniformly.
    pub curves: Vec<CurveKind>,
    pub cost: Range,
    pub on_time_prob: Range,
    pub late_rate: Range,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self {
            requesters: 60,
            providers: 60,
            capacity: 20,
            value: Range::new(5.0, 15.0),
            deadline: Range::new(1.0, 10.0),
            depreciation_rate: Range::new(0.2, 2.0),
            curves: CurveKind::ALL.to_vec(),
            cost: Range::new(1.0, 7.0),
            on_time_prob: Range::new(0.5, 1.0),
            late_rate: Range::new(0.25, 2.0),
        }
    }
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.value
            .check("population.value", |x| x > 0.0, "value > 0")?;
        self.deadline
            .check("population.deadline", |x| x > 0.0, "deadline > 0")?;
        self.depreciation_rate
            .check("population.depreciation_rate", |x| x >= 0.0, "rate >= 0")?;
        self.cost
            .check("population.cost", |x| x >= 0.0, "cost >= 0")?;
        self.on_time_prob.check(
            "population.on_time_prob",
            |x| (0.0..=1.0).contains(&x),
            "0 <= p <= 1",
        )?;
        self.late_rate
            .check("population.late_rate", |x| x > 0.0, "rate > 0")?;
        if self.curves.is_empty() {
            return Err(ModelError::config(
                "population.curves",
                "at least one curve kind is required",
            ));
        }
        Ok(())
    }

    /// Samples one requester with the given id.
    pub fn sample_requester<R: Rng + ?Sized>(&self, id: usize, rng: &mut R) -> Requester {
        let value = self.value.sample(rng);
        let deadline = self.deadline.sample(rng);
        let kind = *self.curves.choose(rng).expect("curves validated non-empty");
        let rate = self.depreciation_rate.sample(rng);
        Requester {
            id,
            value,
            deadline,
            depreciation: DepreciationCurve { kind, rate },
        }
    }

    /// Samples one provider with the given id.
    pub fn sample_provider<R: Rng + ?Sized>(&self, id: usize, rng: &mut R) -> Provider {
        let cost = self.cost.sample(rng);
        let on_time_prob = self.on_time_prob.sample(rng);
        let late_rate = self.late_rate.sample(rng);
        Provider {
            id,
            cost,
            punctuality: PunctualityModel {
                on_time_prob,
                late_rate,
            },
        }
    }
}

/// Generates a market with i.i.d. uniformly sampled participants.
///
/// The result depends only on `(spec, seed)`.
pub fn generate_population(spec: &PopulationSpec, seed: u64) -> Result<Market, ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let requesters = (0..spec.requesters)
        .map(|id| spec.sample_requester(id, &mut rng))
        .collect();
    let providers = (0..spec.providers)
        .map(|id| spec.sample_provider(id, &mut rng))
        .collect();
    Market::new(requesters, providers, spec.capacity)
}
