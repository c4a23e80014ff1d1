//! Experiment configuration and its flat text format.
//!
//! One `key = value` pair per line; `#` starts a comment; keys not listed
//! fall back to their defaults. The full key set, in canonical order:
//!
//! | key                  | type          | default  |
//! |----------------------|---------------|----------|
//! | `strategy`           | strategy name | `dapfl`  |
//! | `n_clients`          | integer       | 20       |
//! | `participation_rate` | real in (0,1] | 0.4      |
//! | `rounds`             | integer       | 150      |
//! | `eval_every`         | integer       | 1        |
//! | `seed`               | integer       | 0        |
//! | `n_classes`          | integer       | 10       |
//! | `feature_dim`        | integer       | 20       |
//! | `samples_per_class`  | integer       | 200      |
//! | `cluster_spread`     | real          | 2.0      |
//! | `dirichlet_alpha`    | real          | 0.5      |
//! | `hidden_width`       | integer       | 32       |
//! | `lambda`             | real          | 1.0      |
//! | `learning_rate`      | real          | 0.01     |
//! | `local_epochs`       | integer       | 2        |
//! | `batch_size`         | integer       | 10       |
//! | `sigma`              | real          | 1.0      |
//! | `epsilon`            | real          | 1e-8     |
//! | `scale_distance`     | bool          | false    |
//! | `targets`            | comma list    | 0.4      |

use std::fmt::Write as _;
use std::str::FromStr;

use crate::aggregation::Strategy;
use crate::data::SyntheticTaskSpec;
use crate::model::{HyperParams, Layout};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub n_clients: usize,
    pub participation_rate: f64,
    pub rounds: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub n_classes: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    pub dirichlet_alpha: f64,
    pub hidden_width: usize,
    pub hyper: HyperParams,
    /// Accuracy thresholds reported as rounds-to-target.
    pub targets: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Dapfl,
            n_clients: 20,
            participation_rate: 0.4,
            rounds: 150,
            eval_every: 1,
            seed: 0,
            n_classes: 10,
            feature_dim: 20,
            samples_per_class: 200,
            cluster_spread: 2.0,
            dirichlet_alpha: 0.5,
            hidden_width: 32,
            hyper: HyperParams::default(),
            targets: vec![0.4],
        }
    }
}

pub const KEYS: [&str; 20] = [
    "strategy",
    "n_clients",
    "participation_rate",
    "rounds",
    "eval_every",
    "seed",
    "n_classes",
    "feature_dim",
    "samples_per_class",
    "cluster_spread",
    "dirichlet_alpha",
    "hidden_width",
    "lambda",
    "learning_rate",
    "local_epochs",
    "batch_size",
    "sigma",
    "epsilon",
    "scale_distance",
    "targets",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

impl ExperimentConfig {
    /// Parses a config file, starting from the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text form. Does not validate cross-key
    /// constraints; call [`ExperimentConfig::validate`] afterwards.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let hp = &mut self.hyper;
        match key {
            "strategy" => self.strategy = value.parse()?,
            "n_clients" => self.n_clients = parse(key, value)?,
            "participation_rate" => self.participation_rate = parse(key, value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "n_classes" => self.n_classes = parse(key, value)?,
            "feature_dim" => self.feature_dim = parse(key, value)?,
            "samples_per_class" => self.samples_per_class = parse(key, value)?,
            "cluster_spread" => self.cluster_spread = parse(key, value)?,
            "dirichlet_alpha" => self.dirichlet_alpha = parse(key, value)?,
            "hidden_width" => self.hidden_width = parse(key, value)?,
            "lambda" => hp.lambda = parse(key, value)?,
            "learning_rate" => hp.learning_rate = parse(key, value)?,
            "local_epochs" => hp.local_epochs = parse(key, value)?,
            "batch_size" => hp.batch_size = parse(key, value)?,
            "sigma" => hp.sigma = parse(key, value)?,
            "epsilon" => hp.epsilon = parse(key, value)?,
            "scale_distance" => hp.scale_distance = parse(key, value)?,
            "targets" => {
                self.targets = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            _ => return Err(Error::config(key, "unknown configuration key")),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order, then validates.
    pub fn apply_overrides<'a>(
        &mut self,
        overrides: impl IntoIterator<Item = &'a str>,
    ) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like key=value"))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    /// Canonical text form: every key, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let hp = &self.hyper;
        let targets: Vec<String> = self.targets.iter().map(f64::to_string).collect();
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        put("strategy", self.strategy.to_string());
        put("n_clients", self.n_clients.to_string());
        put("participation_rate", self.participation_rate.to_string());
        put("rounds", self.rounds.to_string());
        put("eval_every", self.eval_every.to_string());
        put("seed", self.seed.to_string());
        put("n_classes", self.n_classes.to_string());
        put("feature_dim", self.feature_dim.to_string());
        put("samples_per_class", self.samples_per_class.to_string());
        put("cluster_spread", self.cluster_spread.to_string());
        put("dirichlet_alpha", self.dirichlet_alpha.to_string());
        put("hidden_width", self.hidden_width.to_string());
        put("lambda", hp.lambda.to_string());
        put("learning_rate", hp.learning_rate.to_string());
        put("local_epochs", hp.local_epochs.to_string());
        put("batch_size", hp.batch_size.to_string());
        put("sigma", hp.sigma.to_string());
        put("epsilon", hp.epsilon.to_string());
        put("scale_distance", hp.scale_distance.to_string());
        put("targets", targets.join(","));
        out
    }

    /// Participants per round: `round(N * rate)`.
    pub fn n_participants(&self) -> usize {
        (self.n_clients as f64 * self.participation_rate).round() as usize
    }

    pub fn task(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            n_classes: self.n_classes,
            feature_dim: self.feature_dim,
            samples_per_class: self.samples_per_class,
            cluster_spread: self.cluster_spread,
            seed: self.seed,
        }
    }

    pub fn layout(&self) -> Result<Layout> {
        Layout::mlp(self.feature_dim, self.hidden_width, self.n_classes)
            .map_err(|_| Error::config("hidden_width", "layer widths must be positive"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients < 2 {
            return Err(Error::config("n_clients", "need at least 2 clients"));
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return Err(Error::config("participation_rate", "must lie in (0, 1]"));
        }
        let m = self.n_participants();
        if m < 2 || m > self.n_clients {
            return Err(Error::config(
                "participation_rate",
                format!("yields {m} participants; need 2 <= m <= n_clients"),
            ));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be positive"));
        }
        if self.hidden_width == 0 {
            return Err(Error::config("hidden_width", "must be positive"));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::config("dirichlet_alpha", "must be positive"));
        }
        if self.targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::config(
                "targets",
                "accuracy targets must lie in [0, 1]",
            ));
        }
        self.task().validate()?;
        self.hyper.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig {
            strategy: Strategy::Similarity,
            targets: vec![0.4, 0.55],
            ..ExperimentConfig::default()
        };
        cfg.hyper.scale_distance = true;
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.to_text().lines().count(), KEYS.len());
        for (line, key) in cfg.to_text().lines().zip(KEYS) {
            assert!(line.starts_with(key));
        }
    }

    #[test]
    fn comments_and_defaults() {
        let cfg = ExperimentConfig::from_text("# run\nrounds = 3 # short\n\nseed=9\n").unwrap();
        assert_eq!(cfg.rounds, 3);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.n_clients, 20);
    }

    #[test]
    fn errors_name_the_key() {
        let key_of = |r: Result<ExperimentConfig>| match r {
            Err(Error::Config { key, .. }) => key,
            other => panic!("{other:?}"),
        };
        assert_eq!(
            key_of(ExperimentConfig::from_text("strategy = fedprox")),
            "strategy"
        );
        assert_eq!(
            key_of(ExperimentConfig::from_text("rounds = many")),
            "rounds"
        );
        assert_eq!(
            key_of(ExperimentConfig::from_text("colour = red")),
            "colour"
        );
        assert_eq!(
            key_of(ExperimentConfig::from_text("participation_rate = 0.05")),
            "participation_rate"
        );
        assert!(matches!(
            ExperimentConfig::from_text("rounds 3"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn participants_rounding() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.n_participants(), 8);
        cfg.participation_rate = 0.2;
        assert_eq!(cfg.n_participants(), 4);
        cfg.apply_overrides(["participation_rate=1.0"]).unwrap();
        assert_eq!(cfg.n_participants(), 20);
    }
}
