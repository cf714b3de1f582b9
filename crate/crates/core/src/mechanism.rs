//! Winner selection, payments and round realization.
//!
//! Both mechanisms share the same greedy selection over requester/provider
//! pairs and differ only in the weight they rank by: ESWM ranks by expected
//! surplus `E_i(v_j(t)) - c_i`, the benchmark by the platform's expected take
//! on the pair.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{validate_match_set, Constraint, Feasibility, Market, MatchSet, ModelError};
use crate::valuation::{depreciated_value, expected_value, sample_completion, CompletionTime};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanismError {
    #[error(transparent)]
    Structure(#[from] ModelError),
    #[error("infeasible match set: violates {0}")]
    Infeasible(Constraint),
    #[error("no weight for pair ({0}, {1})")]
    MissingWeight(usize, usize),
}

/// Which averaging base is used for per-participant utilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AverageOver {
    /// Every participant of the mechanism, losers counting as zero.
    #[default]
    All,
    /// Matched participants only.
    Winners,
}

/// Share/margin payment rule.
///
/// A matched provider is paid `c_i (1 + provider_margin)`; its requester is
/// charged `requester_share` times the expected task value, or times the
/// realized value when `charge_on_realized` is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaymentPolicy {
    pub requester_share: f64,
    pub provider_margin: f64,
    pub charge_on_realized: bool,
    pub average_over: AverageOver,
}

impl Default for PaymentPolicy {
    fn default() -> Self {
        Self {
            requester_share: 0.8,
            provider_margin: 0.2,
            charge_on_realized: false,
            average_over: AverageOver::All,
        }
    }
}

impl PaymentPolicy {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.requester_share > 0.0 && self.requester_share <= 1.0) {
            return Err(ModelError::config(
                "payment.requester_share",
                format!("must lie in (0, 1], got {}", self.requester_share),
            ));
        }
        if !(self.provider_margin.is_finite() && self.provider_margin >= 0.0) {
            return Err(ModelError::config(
                "payment.provider_margin",
                format!("must be finite and >= 0, got {}", self.provider_margin),
            ));
        }
        Ok(())
    }

    pub fn provider_payment(&self, cost: f64) -> f64 {
        cost * (1.0 + self.provider_margin)
    }

    pub fn requester_charge(&self, expected: f64, realized: f64) -> f64 {
        let base = if self.charge_on_realized {
            realized
        } else {
            expected
        };
        self.requester_share * base
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairWeight {
    pub requester: usize,
    pub provider: usize,
    /// `E_i(v_j(t))`.
    pub expected_value: f64,
    /// `E_i(v_j(t)) - c_i`.
    pub esw_weight: f64,
    /// Expected charge minus payment.
    pub platform_weight: f64,
}

/// Per-pair weights, laid out requester-major so `(j, i)` sits at
/// `j * providers + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    providers: usize,
    weights: Vec<PairWeight>,
}

impl WeightTable {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn as_slice(&self) -> &[PairWeight] {
        &self.weights
    }

    pub fn get(&self, requester: usize, provider: usize) -> Option<&PairWeight> {
        if provider >= self.providers {
            return None;
        }
        self.weights.get(requester * self.providers + provider)
    }

    /// Builds a table from explicit weights. Every `(j, i)` of an
    /// `requesters x providers` grid must be present exactly once.
    pub fn from_weights(
        requesters: usize,
        providers: usize,
        weights: impl IntoIterator<Item = PairWeight>,
    ) -> Result<Self, MechanismError> {
        let mut slots: Vec<Option<PairWeight>> = vec![None; requesters * providers];
        for w in weights {
            if w.requester >= requesters {
                return Err(ModelError::UnknownRequester(w.requester).into());
            }
            if w.provider >= providers {
                return Err(ModelError::UnknownProvider(w.provider).into());
            }
            slots[w.requester * providers + w.provider] = Some(w);
        }
        let weights = slots
            .into_iter()
            .enumerate()
            .map(|(k, w)| w.ok_or(MechanismError::MissingWeight(k / providers, k % providers)))
            .collect::<Result<_, _>>()?;
        Ok(Self { providers, weights })
    }

    /// Sub-table for the given requesters and providers, renumbered densely
    /// in the order given.
    pub fn restrict(
        &self,
        requesters: &[usize],
        providers: &[usize],
    ) -> Result<Self, MechanismError> {
        let mut weights = Vec::with_capacity(requesters.len() * providers.len());
        for (j, &gj) in requesters.iter().enumerate() {
            for (i, &gi) in providers.iter().enumerate() {
                let w = self
                    .get(gj, gi)
                    .ok_or(MechanismError::MissingWeight(gj, gi))?;
                weights.push(PairWeight {
                    requester: j,
                    provider: i,
                    ..*w
                });
            }
        }
        Ok(Self {
            providers: providers.len(),
            weights,
        })
    }

    /// Sum of the chosen objective's weights over a match set.
    pub fn total(&self, matches: &MatchSet, objective: Objective) -> f64 {
        matches
            .pairs()
            .iter()
            .filter_map(|&(j, i)| self.get(j, i))
            .map(|w| objective.weight(w))
            .sum()
    }
}

/// Expected value and both objective weights for every pair in the market.
pub fn compute_weights(market: &Market, policy: &PaymentPolicy) -> WeightTable {
    let weights = market
        .requesters()
        .iter()
        .flat_map(|r| {
            market.providers().iter().map(move |w| {
                let e = expected_value(r, w);
                PairWeight {
                    requester: r.id,
                    provider: w.id,
                    expected_value: e,
                    esw_weight: e - w.cost,
                    platform_weight: policy.requester_share * e - policy.provider_payment(w.cost),
                }
            })
        })
        .collect();
    WeightTable {
        providers: market.providers().len(),
        weights,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Expected social welfare (ESWM).
    Esw,
    /// Platform utility only (benchmark).
    Platform,
}

impl Objective {
    pub fn weight(&self, w: &PairWeight) -> f64 {
        match self {
            Objective::Esw => w.esw_weight,
            Objective::Platform => w.platform_weight,
        }
    }
}

/// Greedy winner selection.
///
/// Takes pairs in decreasing order of the objective weight, skipping pairs
/// whose requester or provider is already matched, until `K` matches exist
/// or no pair with strictly positive weight remains. Equal weights go to the
/// lower requester id, then the lower provider id.
pub fn select_winners_greedy(
    market: &Market,
    weights: &WeightTable,
    objective: Objective,
) -> MatchSet {
    let mut candidates: Vec<&PairWeight> = weights
        .as_slice()
        .iter()
        .filter(|w| objective.weight(w) > 0.0)
        .collect();
    candidates.sort_by(|a, b| {
        objective
            .weight(b)
            .partial_cmp(&objective.weight(a))
            .unwrap_or(Ordering::Equal)
            .then(a.requester.cmp(&b.requester))
            .then(a.provider.cmp(&b.provider))
    });

    let mut requester_taken = vec![false; market.requesters().len()];
    let mut provider_taken = vec![false; market.providers().len()];
    let mut matches = MatchSet::new();
    for w in candidates {
        if matches.len() >= market.capacity() {
            break;
        }
        if requester_taken[w.requester] || provider_taken[w.provider] {
            continue;
        }
        requester_taken[w.requester] = true;
        provider_taken[w.provider] = true;
        matches.push(w.requester, w.provider);
    }
    matches
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRecord {
    pub requester: usize,
    pub provider: usize,
    pub expected_value: f64,
    pub completion: CompletionTime,
    pub realized_value: f64,
    pub requester_charge: f64,
    pub provider_payment: f64,
    pub requester_utility: f64,
    pub provider_utility: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// Sum of full valuations over served requesters.
    pub nsw: f64,
    /// Sum of expected surplus over matches.
    pub esw: f64,
    /// Sum of realized value minus cost over matches.
    pub realized_sw: f64,
    pub platform_utility: f64,
    pub avg_requester_utility: f64,
    pub avg_provider_utility: f64,
    /// Average requester utility in expectation over completion times,
    /// given the matches.
    pub avg_expected_requester_utility: f64,
    /// Average provider utility in expectation (equal to the realized one,
    /// since provider payments do not depend on completion).
    pub avg_expected_provider_utility: f64,
    pub requesters: usize,
    pub providers: usize,
    pub winners: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MechanismOutcome {
    pub matches: MatchSet,
    pub records: Vec<MatchRecord>,
    pub metrics: RoundMetrics,
}

impl MechanismOutcome {
    pub fn total_charges(&self) -> f64 {
        self.records.iter().map(|r| r.requester_charge).sum()
    }

    pub fn total_payments(&self) -> f64 {
        self.records.iter().map(|r| r.provider_payment).sum()
    }
}

/// Realizes completions for a feasible match set and settles payments.
///
/// One completion time is drawn per match, in match order.
pub fn realize_round<R: Rng + ?Sized>(
    market: &Market,
    weights: &WeightTable,
    matches: &MatchSet,
    policy: &PaymentPolicy,
    rng: &mut R,
) -> Result<MechanismOutcome, MechanismError> {
    if let Feasibility::Violates(c) = validate_match_set(market, matches)? {
        return Err(MechanismError::Infeasible(c));
    }

    let mut records = Vec::with_capacity(matches.len());
    let mut metrics = RoundMetrics {
        requesters: market.requesters().len(),
        providers: market.providers().len(),
        winners: matches.len(),
        ..RoundMetrics::default()
    };
    let mut requester_total = 0.0;
    let mut provider_total = 0.0;
    let mut expected_requester_total = 0.0;
    for &(j, i) in matches.pairs() {
        let requester = market.requester(j)?;
        let provider = market.provider(i)?;
        let w = weights
            .get(j, i)
            .ok_or(MechanismError::MissingWeight(j, i))?;
        let completion = sample_completion(provider, rng);
        let realized_value = depreciated_value(requester, completion);
        let requester_charge = policy.requester_charge(w.expected_value, realized_value);
        let provider_payment = policy.provider_payment(provider.cost);
        let record = MatchRecord {
            requester: j,
            provider: i,
            expected_value: w.expected_value,
            completion,
            realized_value,
            requester_charge,
            provider_payment,
            requester_utility: realized_value - requester_charge,
            provider_utility: provider_payment - provider.cost,
        };
        metrics.nsw += requester.value;
        metrics.esw += w.esw_weight;
        metrics.realized_sw += realized_value - provider.cost;
        metrics.platform_utility += requester_charge - provider_payment;
        requester_total += record.requester_utility;
        // Both charge rules bill requester_share of the expected value on average.
        expected_requester_total += w.expected_value * (1.0 - policy.requester_share);
        provider_total += record.provider_utility;
        records.push(record);
    }

    let (requester_base, provider_base) = match policy.average_over {
        AverageOver::All => (metrics.requesters, metrics.providers),
        AverageOver::Winners => (metrics.winners, metrics.winners),
    };
    metrics.avg_requester_utility = mean(requester_total, requester_base);
    metrics.avg_provider_utility = mean(provider_total, provider_base);
    metrics.avg_expected_requester_utility = mean(expected_requester_total, requester_base);
    metrics.avg_expected_provider_utility = metrics.avg_provider_utility;

    Ok(MechanismOutcome {
        matches: matches.clone(),
        records,
        metrics,
    })
}

fn mean(total: f64, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
