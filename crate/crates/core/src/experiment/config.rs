use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{build_schedule, generate_dataset, load_labelmap_dataset, Dataset, SceneSpec, TaskSchedule};
use crate::error::{Error, Result};
use crate::model::{ConnectionPoint, ModelConfig};
use crate::routing::{Arbitration, RoutingConfig};
use crate::trainer::TrainConfig;

/// Environment variable naming the directory that holds run directories.
pub const OUTPUT_ROOT_ENV: &str = "INCSEG_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub id: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSection {
    /// Procedurally generated scenes; the held-out split uses scene indices
    /// disjoint from the training split.
    Synthetic {
        height: usize,
        width: usize,
        train_count: usize,
        test_count: usize,
        seed: u64,
    },
    /// `images/` + `labels/` directories for each split.
    Directory {
        train_dir: PathBuf,
        test_dir: PathBuf,
        num_classes: usize,
    },
}

/// First scene index of the synthetic held-out split.
pub const HELD_OUT_OFFSET: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub protocol: String,
}

/// Optimiser settings without a seed; seeds are derived from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub poly_power: f64,
}

impl TrainSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            poly_power: self.poly_power,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSections {
    pub base: TrainSection,
    pub incremental: TrainSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// Held-out images whose routed masks are exported by `report`.
    pub sample_masks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub schedule: ScheduleSection,
    pub model: ModelConfig,
    pub train: TrainSections,
    pub routing: RoutingConfig,
    pub report: ReportSection,
}

/// Values given on the command line win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub run_id: Option<String>,
    pub seed: Option<u64>,
    pub protocol: Option<String>,
    pub connection_point: Option<ConnectionPoint>,
    pub base_epochs: Option<usize>,
    pub incremental_epochs: Option<usize>,
    pub tau: Option<f64>,
    pub arbitration: Option<Arbitration>,
}

impl ExperimentConfig {
    /// The 6-base + 2-step synthetic benchmark.
    pub fn benchmark() -> Self {
        let train = |epochs| TrainSection {
            learning_rate: 0.03,
            momentum: 0.9,
            epochs,
            batch_size: 4,
            poly_power: 0.9,
        };
        Self {
            run: RunSection {
                id: "benchmark".into(),
                seed: 1,
            },
            data: DataSection::Synthetic {
                height: 64,
                width: 64,
                train_count: 200,
                test_count: 40,
                seed: 7,
            },
            schedule: ScheduleSection {
                protocol: "6-1".into(),
            },
            model: ModelConfig::default(),
            train: TrainSections {
                base: train(40),
                incremental: train(40),
            },
            routing: RoutingConfig::default(),
            report: ReportSection { sample_masks: 4 },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(v) = &o.run_id {
            self.run.id = v.clone();
        }
        if let Some(v) = o.seed {
            self.run.seed = v;
        }
        if let Some(v) = &o.protocol {
            self.schedule.protocol = v.clone();
        }
        if let Some(v) = o.connection_point {
            self.model.connection_point = v;
        }
        if let Some(v) = o.base_epochs {
            self.train.base.epochs = v;
        }
        if let Some(v) = o.incremental_epochs {
            self.train.incremental.epochs = v;
        }
        if let Some(v) = o.tau {
            self.routing.tau = v;
        }
        if let Some(v) = o.arbitration {
            self.routing.arbitration = v;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        validate_run_id(&self.run.id)?;
        self.model.validate()?;
        self.routing.validate()?;
        self.train.base.with_seed(0).validate()?;
        self.train.incremental.with_seed(0).validate()?;
        let schedule = self.schedule()?;
        if schedule.base_classes.len() != self.model.num_base_classes {
            return Err(Error::Config(format!(
                "protocol `{}` has {} base classes but the model is configured for {}",
                self.schedule.protocol,
                schedule.base_classes.len(),
                self.model.num_base_classes
            )));
        }
        match &self.data {
            DataSection::Synthetic {
                train_count,
                test_count,
                height,
                width,
                ..
            } => {
                if *train_count == 0 || *test_count == 0 {
                    return Err(Error::Config("synthetic splits need at least one image".into()));
                }
                if *height == 0 || *width == 0 {
                    return Err(Error::Config("synthetic images need a non-zero size".into()));
                }
            }
            DataSection::Directory { num_classes, .. } => {
                if *num_classes < 2 || *num_classes > 254 {
                    return Err(Error::Config(format!("num_classes must be in 2..=254, got {num_classes}")));
                }
            }
        }
        Ok(())
    }

    pub fn universe(&self) -> Vec<u8> {
        match &self.data {
            DataSection::Synthetic { height, width, seed, .. } => SceneSpec::benchmark(*height, *width, *seed).universe(),
            DataSection::Directory { num_classes, .. } => (0..*num_classes as u8).collect(),
        }
    }

    pub fn schedule(&self) -> Result<TaskSchedule> {
        build_schedule(&self.universe(), &self.schedule.protocol)
    }

    /// `(train, held_out)` with every pixel labelled by its true class.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataSection::Synthetic {
                height,
                width,
                train_count,
                test_count,
                seed,
            } => {
                let spec = SceneSpec::benchmark(*height, *width, *seed);
                Ok((
                    generate_dataset(&spec, 0, *train_count)?,
                    generate_dataset(&spec, HELD_OUT_OFFSET, *test_count)?,
                ))
            }
            DataSection::Directory {
                train_dir, test_dir, ..
            } => {
                let universe = self.universe();
                for dir in [train_dir, test_dir] {
                    if !dir.is_dir() {
                        return Err(Error::Data(format!("dataset directory {} does not exist", dir.display())));
                    }
                }
                Ok((
                    load_labelmap_dataset(train_dir, &universe)?,
                    load_labelmap_dataset(test_dir, &universe)?,
                ))
            }
        }
    }

    pub fn base_train(&self) -> TrainConfig {
        self.train.base.with_seed(self.run.seed)
    }

    /// Optimiser settings for incremental step `t`.
    pub fn step_train(&self, t: usize) -> TrainConfig {
        self.train.incremental.with_seed(self.run.seed.wrapping_add(t as u64))
    }

    /// Joint retraining up to step `t` uses the base schedule.
    pub fn joint_train(&self, t: usize) -> TrainConfig {
        self.train.base.with_seed(self.run.seed.wrapping_add(100 + t as u64))
    }

    pub fn unit_seed(&self, t: usize) -> u64 {
        self.run.seed.wrapping_add(1000 * t as u64)
    }
}

pub fn validate_run_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 64
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        && !id.starts_with('-');
    if !ok {
        return Err(Error::Config(format!(
            "run id `{id}` must be 1-64 characters of [A-Za-z0-9_-] not starting with '-'"
        )));
    }
    Ok(())
}

/// `$INCSEG_OUTPUT_ROOT`, or `./runs` when unset.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_round_trips_through_toml() {
        let c = ExperimentConfig::benchmark();
        c.validate().unwrap();
        let text = c.to_toml().unwrap();
        assert!(text.contains("[train.base]"));
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn overrides_win() {
        let mut c = ExperimentConfig::benchmark();
        c.apply(&Overrides {
            tau: Some(0.5),
            seed: Some(9),
            connection_point: Some(ConnectionPoint::P),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(c.routing.tau, 0.5);
        assert_eq!(c.run.seed, 9);
        assert_eq!(c.model.connection_point, ConnectionPoint::P);
        assert!(c
            .apply(&Overrides {
                tau: Some(2.0),
                ..Default::default()
            })
            .is_err());
    }

    #[test]
    fn inconsistent_base_count_is_rejected() {
        let mut c = ExperimentConfig::benchmark();
        c.schedule.protocol = "5-1".into();
        c.model.num_base_classes = 6;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_and_bad_ids_are_rejected() {
        let text = ExperimentConfig::benchmark().to_toml().unwrap().replace("[run]", "[run]\nbogus = 1");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        assert!(validate_run_id("../escape").is_err());
        assert!(validate_run_id("ok-run_1").is_ok());
    }

    #[test]
    fn missing_directory_is_a_data_error() {
        let mut c = ExperimentConfig::benchmark();
        c.data = DataSection::Directory {
            train_dir: "/nonexistent/train".into(),
            test_dir: "/nonexistent/test".into(),
            num_classes: 8,
        };
        assert!(matches!(c.load_data(), Err(Error::Data(_))));
    }
}
