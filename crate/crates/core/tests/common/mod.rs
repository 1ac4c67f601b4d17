//! Shared fixtures: a small synthetic benchmark that trains in seconds.

#![allow(dead_code)]

use incseg::data::{build_schedule, filter_for_base, filter_for_step, generate_dataset, Dataset, SceneSpec, TaskSchedule};
use incseg::experiment::{DataSection, ExperimentConfig};
use incseg::model::ModelConfig;
use incseg::trainer::TrainConfig;

pub const SIZE: usize = 32;

pub fn tiny_config(id: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::benchmark();
    c.run.id = id.into();
    c.data = DataSection::Synthetic {
        height: SIZE,
        width: SIZE,
        train_count: 24,
        test_count: 8,
        seed: 7,
    };
    c.train.base.epochs = 3;
    c.train.incremental.epochs = 3;
    c.report.sample_masks = 2;
    c
}

pub fn small_model() -> ModelConfig {
    ModelConfig::default()
}

pub fn train_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.03,
        epochs,
        seed,
        ..TrainConfig::default()
    }
}

pub struct Fixture {
    pub schedule: TaskSchedule,
    pub train: Dataset,
    pub test: Dataset,
}

impl Fixture {
    pub fn new(train_count: usize) -> Self {
        let spec = SceneSpec::benchmark(SIZE, SIZE, 7);
        let schedule = build_schedule(&spec.universe(), "6-1").unwrap();
        Self {
            schedule,
            train: generate_dataset(&spec, 0, train_count).unwrap(),
            test: generate_dataset(&spec, 1_000_000, 8).unwrap(),
        }
    }

    pub fn base(&self) -> Dataset {
        filter_for_base(&self.train, &self.schedule)
    }

    pub fn step(&self, t: usize) -> Dataset {
        filter_for_step(&self.train, &self.schedule, t).unwrap()
    }
}
