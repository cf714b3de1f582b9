//! Experiment configuration: a TOML file merged over defaults, then CLI
//! overrides merged over the file.
//!
//! ```toml
//! seed = 7
//! mode = "reselection"        # or "static"
//! epochs = 30
//! replications = 200
//! out = "results"
//!
//! [population]
//! requesters = 60
//! providers = 60
//! capacity = 20               # K, winners per mechanism per epoch
//! value = [5.0, 15.0]
//! curves = ["step", "linear", "exponential"]
//!
//! [payment]
//! requester_share = 0.8
//! provider_margin = 0.2
//! charge_on_realized = false
//! average_over = "all"        # or "winners"
//!
//! [reselection]
//! exponent = 0.5
//! floor = 1e-6
//! signal = "expected"         # or "realized"
//! ```
//!
//! Every key is optional. Unknown keys are rejected so typos do not silently
//! fall back to defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mechanism::{AverageOver, PaymentPolicy};
use crate::model::{CurveKind, ModelError, PopulationSpec, Range};
use crate::sim::{Mode, ReselectionRule, SimConfig, UtilitySignal};

pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_OUT_DIR: &str = "results";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(#[from] ModelError),
}

/// Fully resolved and validated configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            sim: SimConfig::default(),
            out: PathBuf::from(DEFAULT_OUT_DIR),
        }
    }
}

/// Values given on the command line; `None` leaves the file value in place.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub epochs: Option<i64>,
    pub replications: Option<i64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<Mode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    replications: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[serde(default)]
    population: RawPopulation,
    #[serde(default)]
    payment: RawPayment,
    #[serde(default)]
    reselection: RawReselection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPopulation {
    requesters: Option<i64>,
    providers: Option<i64>,
    capacity: Option<i64>,
    value: Option<Range>,
    deadline: Option<Range>,
    depreciation_rate: Option<Range>,
    curves: Option<Vec<CurveKind>>,
    cost: Option<Range>,
    on_time_prob: Option<Range>,
    late_rate: Option<Range>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPayment {
    requester_share: Option<f64>,
    provider_margin: Option<f64>,
    charge_on_realized: Option<bool>,
    average_over: Option<AverageOver>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReselection {
    exponent: Option<f64>,
    floor: Option<f64>,
    signal: Option<UtilitySignal>,
}

fn count(field: &'static str, value: Option<i64>, default: usize) -> Result<usize, ModelError> {
    match value {
        None => Ok(default),
        Some(v) => usize::try_from(v).map_err(|_| ModelError::Config {
            field,
            constraint: format!("must be a nonnegative integer, got {v}"),
        }),
    }
}

impl RawConfig {
    fn apply(self, overrides: &Overrides) -> Result<ExperimentConfig, ModelError> {
        let d = ExperimentConfig::default();
        let dp = &d.sim.population;
        let p = self.population;
        let population = PopulationSpec {
            requesters: count("population.requesters", p.requesters, dp.requesters)?,
            providers: count("population.providers", p.providers, dp.providers)?,
            capacity: count("population.capacity", p.capacity, dp.capacity)?,
            value: p.value.unwrap_or(dp.value),
            deadline: p.deadline.unwrap_or(dp.deadline),
            depreciation_rate: p.depreciation_rate.unwrap_or(dp.depreciation_rate),
            curves: p.curves.unwrap_or_else(|| dp.curves.clone()),
            cost: p.cost.unwrap_or(dp.cost),
            on_time_prob: p.on_time_prob.unwrap_or(dp.on_time_prob),
            late_rate: p.late_rate.unwrap_or(dp.late_rate),
        };
        let dpay = d.sim.payment;
        let payment = PaymentPolicy {
            requester_share: self.payment.requester_share.unwrap_or(dpay.requester_share),
            provider_margin: self.payment.provider_margin.unwrap_or(dpay.provider_margin),
            charge_on_realized: self
                .payment
                .charge_on_realized
                .unwrap_or(dpay.charge_on_realized),
            average_over: self.payment.average_over.unwrap_or(dpay.average_over),
        };
        let dr = d.sim.reselection;
        let reselection = ReselectionRule {
            exponent: self.reselection.exponent.unwrap_or(dr.exponent),
            floor: self.reselection.floor.unwrap_or(dr.floor),
            signal: self.reselection.signal.unwrap_or(dr.signal),
        };
        let sim = SimConfig {
            mode: overrides.mode.or(self.mode).unwrap_or(d.sim.mode),
            epochs: count("epochs", overrides.epochs.or(self.epochs), d.sim.epochs)?,
            replications: count(
                "replications",
                overrides.replications.or(self.replications),
                d.sim.replications,
            )?,
            population,
            payment,
            reselection,
        };
        sim.validate()?;
        let seed = match overrides.seed {
            Some(s) => s,
            None => count("seed", self.seed, d.seed as usize)? as u64,
        };
        if seed > i64::MAX as u64 {
            return Err(ModelError::Config {
                field: "seed",
                constraint: format!(
                    "must be at most {} to fit a TOML integer, got {seed}",
                    i64::MAX
                ),
            });
        }
        Ok(ExperimentConfig {
            seed,
            sim,
            out: overrides.out.clone().or(self.out).unwrap_or(d.out),
        })
    }
}

impl From<&ExperimentConfig> for RawConfig {
    fn from(c: &ExperimentConfig) -> Self {
        let p = &c.sim.population;
        let signed = |x: usize| i64::try_from(x).unwrap_or(i64::MAX);
        RawConfig {
            seed: Some(signed(c.seed as usize)),
            mode: Some(c.sim.mode),
            epochs: Some(signed(c.sim.epochs)),
            replications: Some(signed(c.sim.replications)),
            out: Some(c.out.clone()),
            population: RawPopulation {
                requesters: Some(signed(p.requesters)),
                providers: Some(signed(p.providers)),
                capacity: Some(signed(p.capacity)),
                value: Some(p.value),
                deadline: Some(p.deadline),
                depreciation_rate: Some(p.depreciation_rate),
                curves: Some(p.curves.clone()),
                cost: Some(p.cost),
                on_time_prob: Some(p.on_time_prob),
                late_rate: Some(p.late_rate),
            },
            payment: RawPayment {
                requester_share: Some(c.sim.payment.requester_share),
                provider_margin: Some(c.sim.payment.provider_margin),
                charge_on_realized: Some(c.sim.payment.charge_on_realized),
                average_over: Some(c.sim.payment.average_over),
            },
            reselection: RawReselection {
                exponent: Some(c.sim.reselection.exponent),
                floor: Some(c.sim.reselection.floor),
                signal: Some(c.sim.reselection.signal),
            },
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text, then applies `overrides`. `origin` is only used in
    /// error messages.
    pub fn from_toml_str(
        text: &str,
        origin: &Path,
        overrides: &Overrides,
    ) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.message().to_string(),
        })?;
        Ok(raw.apply(overrides)?)
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path, overrides)
    }

    /// Renders every field explicitly, in the same layout the loader reads.
    pub fn to_toml(&self) -> String {
        toml::to_string(&RawConfig::from(self)).expect("config fields are TOML-representable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, o: &Overrides) -> Result<ExperimentConfig, ConfigError> {
        ExperimentConfig::from_toml_str(text, Path::new("test.toml"), o)
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse("", &Overrides::default()).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.sim.population.requesters, 60);
        assert_eq!(c.sim.population.capacity, 20);
        assert_eq!(c.sim.epochs, 30);
        assert_eq!(c.sim.replications, 200);
    }

    #[test]
    fn negative_capacity_is_rejected_by_name() {
        let err = parse("[population]\ncapacity = -1\n", &Overrides::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("population.capacity"), "{msg}");
        assert!(msg.contains("nonnegative"), "{msg}");
        assert!(matches!(err, ConfigError::Invalid(_)));
    }

    #[test]
    fn flag_seed_beats_file_seed() {
        let o = Overrides {
            seed: Some(42),
            ..Overrides::default()
        };
        assert_eq!(parse("seed = 7\n", &o).unwrap().seed, 42);
        assert_eq!(parse("seed = 7\n", &Overrides::default()).unwrap().seed, 7);
    }

    #[test]
    fn flags_override_mode_epochs_and_out() {
        let o = Overrides {
            mode: Some(Mode::Static),
            epochs: Some(3),
            replications: Some(4),
            out: Some(PathBuf::from("elsewhere")),
            ..Overrides::default()
        };
        let c = parse("mode = \"reselection\"\nepochs = 9\nout = \"here\"\n", &o).unwrap();
        assert_eq!(c.sim.mode, Mode::Static);
        assert_eq!(c.sim.epochs, 3);
        assert_eq!(c.sim.replications, 4);
        assert_eq!(c.out, PathBuf::from("elsewhere"));
    }

    #[test]
    fn seeds_must_fit_toml_integers() {
        let o = Overrides {
            seed: Some(u64::MAX),
            ..Overrides::default()
        };
        assert!(parse("", &o).unwrap_err().to_string().contains("seed"));
        assert!(parse("seed = -1\n", &Overrides::default()).is_err());
    }

    #[test]
    fn zero_epochs_rejected() {
        let err = parse("epochs = 0\n", &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("epochs"));
        let o = Overrides {
            replications: Some(-3),
            ..Overrides::default()
        };
        assert!(parse("", &o)
            .unwrap_err()
            .to_string()
            .contains("replications"));
    }

    #[test]
    fn unknown_keys_and_bad_syntax() {
        assert!(matches!(
            parse("[population]\ncapacty = 3\n", &Overrides::default()),
            Err(ConfigError::Parse { .. })
        ));
        assert!(matches!(
            parse("seed = \n", &Overrides::default()),
            Err(ConfigError::Parse { .. })
        ));
        assert!(matches!(
            parse("mode = \"dynamic\"\n", &Overrides::default()),
            Err(ConfigError::Parse { .. })
        ));
    }

    #[test]
    fn missing_file_names_path() {
        let err = ExperimentConfig::load(Path::new("/nonexistent/x.toml"), &Overrides::default())
            .unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.toml"));
    }

    #[test]
    fn invalid_ranges_name_field() {
        let err = parse("[population]\nvalue = [15.0, 5.0]\n", &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("population.value"));
        let err = parse("[payment]\nrequester_share = 1.5\n", &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("payment.requester_share"));
    }

    #[test]
    fn emitted_config_round_trips() {
        let mut c = ExperimentConfig::default();
        assert_eq!(parse(&c.to_toml(), &Overrides::default()).unwrap(), c);

        c.seed = i64::MAX as u64;
        c.sim.mode = Mode::Static;
        c.sim.population.value = Range::new(0.1, 1.0 / 3.0);
        c.sim.population.curves = vec![CurveKind::Linear];
        c.sim.payment.average_over = AverageOver::Winners;
        c.sim.payment.charge_on_realized = true;
        c.sim.reselection.floor = 1e-300;
        c.sim.reselection.signal = UtilitySignal::Realized;
        c.out = PathBuf::from("a dir/with \"quotes\"");
        assert_eq!(parse(&c.to_toml(), &Overrides::default()).unwrap(), c);
    }
}
