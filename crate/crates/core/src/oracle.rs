//! Exact maximizer of expected social welfare on small markets.
//!
//! Enumerates every one-to-one assignment of at most `K` pairs drawn from
//! the positive-weight pairs. This is deliberately a brute force: it serves
//! as ground truth for the greedy selection and has to be checkable by
//! reading it.

use thiserror::Error;

use crate::mechanism::WeightTable;
use crate::model::{Market, MatchSet, Pair};

/// Largest number of participants per side the enumeration accepts.
pub const MAX_SIDE: usize = 12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error(
        "market is {requesters}x{providers}, exact enumeration is limited to \
         {MAX_SIDE}x{MAX_SIDE}; use the greedy selection for larger markets"
    )]
    TooLarge { requesters: usize, providers: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub best: MatchSet,
    /// Sum of expected surplus over `best`.
    pub objective: f64,
    /// Number of complete candidate assignments visited.
    pub explored: u64,
}

/// Number of one-to-one assignments of at most `k` pairs in an `n`x`m`
/// market, an upper bound on the candidates [`solve_exact`] visits.
pub fn assignment_count(n: usize, m: usize, k: usize) -> f64 {
    // Sum over j of C(n, j) * C(m, j) * j!, built up term by term.
    let mut term = 1.0;
    let mut total = 1.0;
    for j in 1..=k.min(n).min(m) {
        term *= ((n - j + 1) * (m - j + 1)) as f64 / j as f64;
        total += term;
    }
    total
}

/// Finds the welfare-maximizing match set by exhaustive enumeration.
///
/// Ties in objective value go to the lexicographically smallest sorted pair
/// list.
pub fn solve_exact(market: &Market, weights: &WeightTable) -> Result<OracleResult, OracleError> {
    let n = market.requesters().len();
    let m = market.providers().len();
    if n > MAX_SIDE || m > MAX_SIDE {
        return Err(OracleError::TooLarge {
            requesters: n,
            providers: m,
        });
    }

    // Positive-weight options per requester, in provider order.
    let options: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|j| {
            (0..m)
                .filter_map(|i| {
                    let w = weights.get(j, i)?.esw_weight;
                    (w > 0.0).then_some((i, w))
                })
                .collect()
        })
        .collect();

    let mut search = Search {
        options: &options,
        limit: market.capacity().min(n).min(m),
        used: vec![false; m],
        current: Vec::new(),
        best: Vec::new(),
        best_objective: 0.0,
        explored: 0,
    };
    search.visit(0);

    Ok(OracleResult {
        objective: objective_of(&search.best, weights),
        best: MatchSet::from_pairs(search.best),
        explored: search.explored,
    })
}

struct Search<'a> {
    options: &'a [Vec<(usize, f64)>],
    limit: usize,
    used: Vec<bool>,
    current: Vec<(Pair, f64)>,
    best: Vec<Pair>,
    best_objective: f64,
    explored: u64,
}

impl Search<'_> {
    fn visit(&mut self, requester: usize) {
        if requester == self.options.len() || self.current.len() == self.limit {
            self.record();
            return;
        }
        // Leave this requester unmatched.
        self.visit(requester + 1);
        for &(provider, w) in &self.options[requester] {
            if self.used[provider] {
                continue;
            }
            self.used[provider] = true;
            self.current.push(((requester, provider), w));
            self.visit(requester + 1);
            self.current.pop();
            self.used[provider] = false;
        }
    }

    fn record(&mut self) {
        self.explored += 1;
        // Pairs are generated in increasing requester order, hence sorted.
        let objective: f64 = self.current.iter().map(|(_, w)| w).sum();
        let pairs = self.current.iter().map(|(p, _)| p);
        let better = objective > self.best_objective
            || (objective == self.best_objective && pairs.clone().lt(self.best.iter()));
        if better {
            self.best_objective = objective;
            self.best = pairs.copied().collect();
        }
    }
}

fn objective_of(pairs: &[Pair], weights: &WeightTable) -> f64 {
    pairs
        .iter()
        .filter_map(|&(j, i)| weights.get(j, i))
        .map(|w| w.esw_weight)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanism::{
        compute_weights, select_winners_greedy, Objective, PairWeight, PaymentPolicy,
    };
    use crate::model::{generate_population, validate_match_set, PopulationSpec};

    fn market(n: usize, m: usize, k: usize, seed: u64) -> Market {
        generate_population(
            &PopulationSpec {
                requesters: n,
                providers: m,
                capacity: k,
                ..PopulationSpec::default()
            },
            seed,
        )
        .unwrap()
    }

    fn table(n: usize, m: usize, f: impl Fn(usize, usize) -> f64) -> WeightTable {
        WeightTable::from_weights(
            n,
            m,
            (0..n)
                .flat_map(|j| (0..m).map(move |i| (j, i)))
                .map(|(j, i)| PairWeight {
                    requester: j,
                    provider: i,
                    expected_value: f(j, i),
                    esw_weight: f(j, i),
                    platform_weight: f(j, i),
                }),
        )
        .unwrap()
    }

    /// Second enumeration: walk providers instead of requesters and keep
    /// every pair regardless of sign.
    fn by_providers(weights: &WeightTable, n: usize, m: usize, k: usize) -> f64 {
        fn go(
            i: usize,
            n: usize,
            m: usize,
            left: usize,
            used: &mut Vec<bool>,
            acc: f64,
            weights: &WeightTable,
        ) -> f64 {
            if i == m || left == 0 {
                return acc;
            }
            let mut best = go(i + 1, n, m, left, used, acc, weights);
            for j in (0..n).rev() {
                if !used[j] {
                    used[j] = true;
                    let w = weights.get(j, i).unwrap().esw_weight;
                    best = best.max(go(i + 1, n, m, left - 1, used, acc + w, weights));
                    used[j] = false;
                }
            }
            best
        }
        go(0, n, m, k, &mut vec![false; n], 0.0, weights)
    }

    #[test]
    fn empty_market() {
        let m = Market::empty(3);
        let res = solve_exact(&m, &compute_weights(&m, &PaymentPolicy::default())).unwrap();
        assert!(res.best.is_empty());
        assert_eq!(res.objective, 0.0);
        assert_eq!(res.explored, 1);
    }

    #[test]
    fn two_by_two_cross_assignment() {
        let m = market(2, 2, 2, 0);
        let w = table(2, 2, |j, i| [[3.0, 4.0], [5.0, 1.0]][j][i]);
        let res = solve_exact(&m, &w).unwrap();
        assert_eq!(res.best.sorted_pairs(), vec![(0, 1), (1, 0)]);
        assert_eq!(res.objective, 9.0);
        // Empty, four singletons and two perfect matchings.
        assert_eq!(res.explored, 7);
    }

    #[test]
    fn ties_prefer_smallest_pair_list() {
        let m = market(2, 2, 1, 0);
        let w = table(2, 2, |_, _| 2.0);
        assert_eq!(solve_exact(&m, &w).unwrap().best.pairs(), &[(0, 0)]);
        let m = market(2, 2, 2, 0);
        let w = table(2, 2, |_, _| 1.0);
        assert_eq!(solve_exact(&m, &w).unwrap().best.pairs(), &[(0, 0), (1, 1)]);
    }

    #[test]
    fn beats_greedy_where_greedy_is_myopic() {
        // Greedy grabs (0,0)=5 and is left with 0; optimum is 4+4.
        let m = market(2, 2, 2, 0);
        let w = table(2, 2, |j, i| [[5.0, 4.0], [4.0, -1.0]][j][i]);
        let greedy = select_winners_greedy(&m, &w, Objective::Esw);
        assert_eq!(w.total(&greedy, Objective::Esw), 5.0);
        assert_eq!(solve_exact(&m, &w).unwrap().objective, 8.0);
    }

    #[test]
    fn assignment_counts() {
        assert_eq!(assignment_count(2, 2, 2), 7.0);
        assert_eq!(assignment_count(3, 3, 0), 1.0);
        // 1 + 9 + 18 + 6 partial matchings of K3,3.
        assert_eq!(assignment_count(3, 3, 5), 34.0);
        // All weights positive: the enumeration visits exactly this many.
        let m = market(3, 4, 2, 0);
        let w = table(3, 4, |_, _| 1.0);
        assert_eq!(
            solve_exact(&m, &w).unwrap().explored as f64,
            assignment_count(3, 4, 2)
        );
    }

    #[test]
    fn zero_capacity() {
        let m = market(3, 3, 0, 1);
        let res = solve_exact(&m, &compute_weights(&m, &PaymentPolicy::default())).unwrap();
        assert!(res.best.is_empty());
    }

    #[test]
    fn guard_rejects_large_markets() {
        let m = market(13, 2, 2, 0);
        let w = compute_weights(&m, &PaymentPolicy::default());
        assert_eq!(
            solve_exact(&m, &w),
            Err(OracleError::TooLarge {
                requesters: 13,
                providers: 2
            })
        );
    }

    #[test]
    fn agrees_with_second_enumeration() {
        let policy = PaymentPolicy::default();
        for seed in 0..300u64 {
            let n = 1 + (seed % 5) as usize;
            let mm = 1 + (seed / 5 % 5) as usize;
            let k = (seed / 25 % 6) as usize;
            let mk = market(n, mm, k, seed);
            let w = compute_weights(&mk, &policy);
            let res = solve_exact(&mk, &w).unwrap();
            assert!(validate_match_set(&mk, &res.best).unwrap().is_feasible());
            assert_eq!(res.objective, w.total(&res.best, Objective::Esw));
            // The alternate walk includes non-positive pairs, so it also checks
            // that restricting to positive pairs never loses the optimum.
            let alt = by_providers(&w, n, mm, k);
            assert!(
                (res.objective - alt).abs() <= 1e-9 * alt.abs().max(1.0),
                "seed {seed}: {} vs {alt}",
                res.objective
            );
        }
    }

    #[test]
    fn dominates_greedy_within_factor_two() {
        let policy = PaymentPolicy::default();
        for seed in 0..500u64 {
            let n = 1 + (seed % 6) as usize;
            let mm = 1 + (seed / 6 % 6) as usize;
            let k = 1 + (seed % 4) as usize;
            let mk = market(n, mm, k, seed);
            let w = compute_weights(&mk, &policy);
            let greedy = w.total(
                &select_winners_greedy(&mk, &w, Objective::Esw),
                Objective::Esw,
            );
            let exact = solve_exact(&mk, &w).unwrap().objective;
            assert!(greedy <= exact + 1e-9);
            assert!(greedy >= 0.5 * exact - 1e-9);
        }
    }
}
