//! Expected social welfare maximizing (ESWM) incentive mechanism for
//! deadline-sensitive crowdsourcing tasks.
//!
//! Providers finish tasks late with some probability, and a late task loses
//! value according to its requester's depreciation curve. The platform
//! matches requesters to providers greedily by expected surplus and is
//! compared against a benchmark that greedily maximizes its own take.
//!
//! - [`model`]: participants, markets, match sets and population sampling.
//! - [`valuation`]: depreciated value and its expectation.
//! - [`mechanism`]: weights, greedy winner selection, payments and rounds.
//! - [`oracle`]: exact solver for small markets.
//! - [`sim`]: multi-epoch competition with reselection.
//! - [`config`] and [`output`]: experiment configuration and CSV/JSON output.
//! - [`checks`]: feasibility and oracle audits, and the `verify` suite.

pub mod checks;
pub mod config;
pub mod mechanism;
pub mod model;
pub mod oracle;
pub mod output;
pub mod quadrature;
pub mod sim;
pub mod valuation;
