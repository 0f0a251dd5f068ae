//! Scenario configuration.
//!
//! Scenarios are TOML files. Every key is optional and falls back to the
//! default scenario, so an empty file is a valid config. `configs/default.toml`
//! at the repository root lists every key with its default value.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::{client_behavior_registry, ClientBehavior};
use crate::model::{scorer_registry, PartitionSpec, RetentionSchedule, TokenScorer, ToyEncoderConfig, TrainHyper};
use crate::rsu::{rsu_behavior_registry, RsuBehavior, MAX_RSUS};
use crate::timing::TimingParams;

/// How client updates reach the RSU committee.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delivery {
    /// Every client sends its update to every RSU.
    #[default]
    Broadcast,
    /// Each update goes to one RSU, which relays it to its peers.
    Associated,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub k_start: f64,
    pub k_end: f64,
    /// Decay horizon; defaults to the number of federation rounds.
    pub rounds: Option<u32>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let d = RetentionSchedule::default();
        Self {
            k_start: d.k_start,
            k_end: d.k_end,
            rounds: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    /// Per-class counts of the five-client reference split, scaled down.
    #[default]
    Skewed,
    /// IID split with `per_class` samples of every class at every client.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub kind: PartitionKind,
    /// `skewed`: each reference count is divided by this, rounding up.
    pub scale_divisor: usize,
    /// `uniform`: samples per class per client.
    pub per_class: usize,
    pub test_per_class: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            kind: PartitionKind::Skewed,
            scale_divisor: 50,
            per_class: 20,
            test_per_class: 50,
        }
    }
}

/// Behaviour overrides keyed by client or RSU index, e.g.
/// `[attacks.client]` `2 = "duplicate:3"`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub client: BTreeMap<String, String>,
    pub rsu: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Train every client alone for the same number of rounds and epochs.
    pub local_only: bool,
    /// Train one model on the pooled client data.
    pub centralized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub num_clients: usize,
    pub num_rsus: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub delivery: Delivery,
    pub scorer: String,
    pub schedule: ScheduleConfig,
    pub partition: PartitionConfig,
    pub encoder: ToyEncoderConfig,
    pub train: TrainHyper,
    pub timing: TimingParams,
    pub attacks: AttackConfig,
    pub baselines: BaselineConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            num_clients: 5,
            num_rsus: 3,
            rounds: 15,
            local_epochs: 10,
            delivery: Delivery::Broadcast,
            scorer: "l2-norm".into(),
            schedule: ScheduleConfig::default(),
            partition: PartitionConfig::default(),
            encoder: ToyEncoderConfig::default(),
            train: TrainHyper::default(),
            timing: TimingParams::default(),
            attacks: AttackConfig::default(),
            baselines: BaselineConfig::default(),
        }
    }
}

/// A validated config with its strategies resolved.
#[derive(Clone, Debug)]
pub struct ResolvedScenario {
    pub config: ScenarioConfig,
    pub schedule: RetentionSchedule,
    pub partition: PartitionSpec,
    pub scorer: Arc<dyn TokenScorer>,
    pub client_behaviors: Vec<Arc<dyn ClientBehavior>>,
    pub rsu_behaviors: Vec<Arc<dyn RsuBehavior>>,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config is always representable")
    }

    pub fn schedule(&self) -> RetentionSchedule {
        RetentionSchedule {
            k_start: self.schedule.k_start,
            k_end: self.schedule.k_end,
            rounds: self.schedule.rounds.unwrap_or(self.rounds as u32),
        }
    }

    pub fn partition_spec(&self) -> Result<PartitionSpec> {
        let p = &self.partition;
        let mut spec = match p.kind {
            PartitionKind::Skewed => PartitionSpec::skewed_cycled(self.num_clients, p.scale_divisor)?,
            PartitionKind::Uniform => PartitionSpec::uniform(self.num_clients, self.encoder.num_classes, p.per_class),
        };
        spec.test_per_class = p.test_per_class;
        Ok(spec)
    }

    /// Checks ranges and resolves every named strategy. All failures are
    /// reported as [`Error::Config`].
    pub fn resolve(&self) -> Result<ResolvedScenario> {
        self.resolve_inner().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })
    }

    fn resolve_inner(&self) -> Result<ResolvedScenario> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_clients == 0 {
            return bad("num_clients must be at least 1".into());
        }
        if self.num_rsus == 0 || self.num_rsus > MAX_RSUS {
            return bad(format!("num_rsus must be in 1..={MAX_RSUS}"));
        }
        if self.rounds == 0 || self.rounds > u32::MAX as usize {
            return bad("rounds must be at least 1".into());
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !(self.train.learning_rate.is_finite() && self.train.learning_rate > 0.0) {
            return bad("train.learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.train.val_fraction) {
            return bad("train.val_fraction must be in [0, 1)".into());
        }
        if self.partition.test_per_class == 0 {
            return bad("partition.test_per_class must be at least 1".into());
        }
        self.timing.validate()?;
        self.encoder.validate()?;
        let schedule = self.schedule();
        schedule.validate()?;
        let partition = self.partition_spec()?;
        partition.validate()?;
        if partition.num_classes() != self.encoder.num_classes {
            return bad(format!(
                "partition has {} classes but encoder.num_classes is {}",
                partition.num_classes(),
                self.encoder.num_classes
            ));
        }
        let scorer = scorer_registry().build(&self.scorer)?;

        let client_registry = client_behavior_registry();
        let mut client_behaviors = vec![client_registry.build("honest")?; self.num_clients];
        for (key, spec) in &self.attacks.client {
            client_behaviors[index(key, self.num_clients, "attacks.client")?] = client_registry.build(spec)?;
        }
        let rsu_registry = rsu_behavior_registry();
        let mut rsu_behaviors = vec![rsu_registry.build("honest")?; self.num_rsus];
        for (key, spec) in &self.attacks.rsu {
            rsu_behaviors[index(key, self.num_rsus, "attacks.rsu")?] = rsu_registry.build(spec)?;
        }
        Ok(ResolvedScenario {
            config: self.clone(),
            schedule,
            partition,
            scorer,
            client_behaviors,
            rsu_behaviors,
        })
    }
}

fn index(key: &str, bound: usize, table: &str) -> Result<usize> {
    match key.parse::<usize>() {
        Ok(i) if i < bound => Ok(i),
        _ => Err(Error::Config(format!(
            "{table}: key {key:?} is not an index below {bound}"
        ))),
    }
}
