//! Experiment configuration.
//!
//! A TOML file with five optional sections. Every key has a default, so an
//! empty file is a valid configuration; unknown keys are rejected.
//!
//! ```toml
//! [model]
//! hidden = [32, 32, 32]   # MLP hidden widths (fedp3)
//! arch = "cifar10_cnn"    # accounting preset (account)
//! quad_clients = 4        # random quadratic instance (ist, dgd)
//! quad_dim = 8
//! quad_mu = 0.1           # added to every client Hessian's diagonal
//! quad_linear = true      # draw nonzero b_i
//! # instance = "path/to/instance.txt"   # load a quadratic instead
//!
//! [data]
//! samples = 3000
//! features = 16
//! classes = 10
//! separation = 3.0
//! clients = 10
//! split = "dirichlet"     # or "classwise"
//! alpha = 0.5
//! classes_per_client = 5
//! train_fraction = 0.7
//!
//! [plans]
//! scheme = "full"         # full | lowerb | opu2 | opu3 | opu_range
//! opu_min = 1             # bounds for opu_range
//! opu_max = 3
//! keep_ratio = 1.0        # global pruning keep ratio
//! strategy = "fixed"      # fixed | uniform | ordered_dropout
//! q_lo = 0.5
//! aggregation = "simple"  # simple | weighted | attention
//! tau = 4.0
//!
//! [train]
//! rounds = 200            # communication rounds / iterations
//! local_steps = 10
//! lr = 0.05
//! batch_size = 48
//! participation = 1.0
//! seed = 0
//! # gamma = 0.01          # ist/dgd step size; defaults to the largest admissible
//! cert_seeds = 200
//!
//! [privacy]
//! epsilon = 1.0
//! delta = 0.01
//! m = 200                 # samples per client
//! batch = 10
//! # clip = 1.0            # defaults to the 99th percentile gradient norm at w0
//! c = 1.0
//! c_prime = 1.0
//! clients = 2
//! dim = 16
//! center = 0.25
//! spread = 0.1
//! seeds = 50
//! placement = "gradient"  # or "model"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub plans: PlansSection,
    pub train: TrainSection,
    pub privacy: PrivacySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub arch: String,
    pub quad_clients: usize,
    pub quad_dim: usize,
    pub quad_mu: f64,
    pub quad_linear: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32, 32],
            arch: "cifar10_cnn".into(),
            quad_clients: 4,
            quad_dim: 8,
            quad_mu: 0.1,
            quad_linear: true,
            instance: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Dirichlet,
    Classwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    pub separation: f64,
    pub clients: usize,
    pub split: Split,
    pub alpha: f64,
    pub classes_per_client: usize,
    pub train_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            samples: 3000,
            features: 16,
            classes: 10,
            separation: 3.0,
            clients: 10,
            split: Split::Dirichlet,
            alpha: 0.5,
            classes_per_client: 5,
            train_fraction: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Full,
    Lowerb,
    Opu2,
    Opu3,
    OpuRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Fixed,
    Uniform,
    OrderedDropout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationName {
    Simple,
    Weighted,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlansSection {
    pub scheme: SchemeName,
    pub opu_min: usize,
    pub opu_max: usize,
    pub keep_ratio: f64,
    pub strategy: StrategyName,
    pub q_lo: f64,
    pub aggregation: AggregationName,
    pub tau: f64,
}

impl Default for PlansSection {
    fn default() -> Self {
        Self {
            scheme: SchemeName::Full,
            opu_min: 1,
            opu_max: 3,
            keep_ratio: 1.0,
            strategy: StrategyName::Fixed,
            q_lo: 0.5,
            aggregation: AggregationName::Simple,
            tau: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub rounds: usize,
    pub local_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub participation: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub cert_seeds: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            rounds: 200,
            local_steps: 10,
            lr: 0.05,
            batch_size: 48,
            participation: 1.0,
            seed: 0,
            gamma: None,
            cert_seeds: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementName {
    Model,
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySection {
    pub epsilon: f64,
    pub delta: f64,
    pub m: usize,
    pub batch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
    pub c: f64,
    pub c_prime: f64,
    pub clients: usize,
    pub dim: usize,
    pub center: f64,
    pub spread: f64,
    pub seeds: usize,
    pub placement: PlacementName,
}

impl Default for PrivacySection {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            delta: 0.01,
            m: 200,
            batch: 10,
            clip: None,
            c: 1.0,
            c_prime: 1.0,
            clients: 2,
            dim: 16,
            center: 0.25,
            spread: 0.1,
            seeds: 50,
            placement: PlacementName::Gradient,
        }
    }
}

fn check(ok: bool, key: &str, msg: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(format!("{key}: {msg}")))
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

fn unit_interval(v: f64) -> bool {
    v > 0.0 && v <= 1.0
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Range checks that do not depend on the subcommand.
    pub fn validate(&self) -> Result<(), CliError> {
        let m = &self.model;
        check(
            m.hidden.iter().all(|&h| h > 0),
            "model.hidden",
            "widths must be positive",
        )?;
        check(
            m.quad_clients > 0 && m.quad_dim > 0,
            "model.quad_clients/quad_dim",
            "must be positive",
        )?;
        check(
            m.quad_mu >= 0.0 && m.quad_mu.is_finite(),
            "model.quad_mu",
            "must be nonnegative",
        )?;

        let d = &self.data;
        check(d.samples > 0, "data.samples", "must be positive")?;
        check(d.features > 0, "data.features", "must be positive")?;
        check(d.classes >= 2, "data.classes", "need at least two classes")?;
        check(
            d.separation >= 0.0 && d.separation.is_finite(),
            "data.separation",
            "must be nonnegative",
        )?;
        check(d.clients > 0, "data.clients", "must be positive")?;
        check(positive(d.alpha), "data.alpha", "must be positive")?;
        check(
            d.classes_per_client > 0 && d.classes_per_client <= d.classes,
            "data.classes_per_client",
            "must lie in 1..=classes",
        )?;
        check(
            unit_interval(d.train_fraction),
            "data.train_fraction",
            "must lie in (0, 1]",
        )?;

        let p = &self.plans;
        check(p.opu_min <= p.opu_max, "plans.opu_min", "must not exceed plans.opu_max")?;
        check(unit_interval(p.keep_ratio), "plans.keep_ratio", "must lie in (0, 1]")?;
        check(unit_interval(p.q_lo), "plans.q_lo", "must lie in (0, 1]")?;
        check(p.tau.is_finite(), "plans.tau", "must be finite")?;

        let t = &self.train;
        check(t.rounds > 0, "train.rounds", "must be positive")?;
        check(t.local_steps > 0, "train.local_steps", "must be positive")?;
        check(positive(t.lr), "train.lr", "must be positive")?;
        check(t.batch_size > 0, "train.batch_size", "must be positive")?;
        check(
            unit_interval(t.participation),
            "train.participation",
            "must lie in (0, 1]",
        )?;
        check(t.gamma.is_none_or(positive), "train.gamma", "must be positive")?;
        check(t.cert_seeds >= 2, "train.cert_seeds", "need at least two seeds")?;

        let q = &self.privacy;
        check(positive(q.epsilon), "privacy.epsilon", "must be positive")?;
        check(q.delta > 0.0 && q.delta < 1.0, "privacy.delta", "must lie in (0, 1)")?;
        check(
            q.m > 0 && q.batch > 0 && q.batch <= q.m,
            "privacy.batch",
            "need 1 <= batch <= m",
        )?;
        check(q.clip.is_none_or(positive), "privacy.clip", "must be positive")?;
        check(
            positive(q.c) && positive(q.c_prime),
            "privacy.c/c_prime",
            "must be positive",
        )?;
        check(q.clients > 0 && q.dim > 0, "privacy.clients/dim", "must be positive")?;
        check(
            q.dim.is_multiple_of(q.clients),
            "privacy.dim",
            "must be divisible by privacy.clients",
        )?;
        check(
            q.spread >= 0.0 && q.center.is_finite(),
            "privacy.spread/center",
            "must be finite, spread nonnegative",
        )?;
        check(q.seeds >= 2, "privacy.seeds", "need at least two seeds")?;
        Ok(())
    }
}
