//! Scenes, label maps, class-incremental schedules and the per-step views of
//! a dataset.

mod io;
mod schedule;
mod synth;

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};

pub use io::{export_dataset, image_to_rgb8, labels_to_gray8, load_labelmap_dataset};
pub use schedule::{
    build_schedule, eval_labels, filter_for_base, filter_for_step, joint_dataset, ScheduleStep, TaskSchedule,
};
pub use synth::{generate_dataset, ClassKind, SceneClass, SceneSpec, ShapeKind, Texture};

/// Pixels excluded from every loss and metric.
pub const IGNORE_INDEX: u8 = 255;
/// Target for pixels of a step's images that do not belong to the step's
/// novel classes.
pub const NOT_NOVEL: u8 = 254;

/// Per-pixel class ids, `(H, W)`.
pub type LabelMap = Array2<u8>;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// RGB in `[0, 1]`, `(3, H, W)`.
    pub image: Array3<f32>,
    pub labels: LabelMap,
}

/// Which slice of the curriculum a dataset represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetTag {
    /// Fully labelled scenes.
    Full,
    /// `D_0`: base classes only, everything else ignored.
    Base,
    /// `D_t`: images containing step `t`'s classes, with everything else
    /// marked [`NOT_NOVEL`].
    Step(usize),
    /// Union of `D_0 ..= D_t` with the labels each step provides.
    Joint(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tag: DatasetTag,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(tag: DatasetTag, samples: Vec<Sample>) -> Self {
        Self { tag, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Pixel counts per label id (reserved ids included).
    pub fn class_histogram(&self) -> BTreeMap<u8, u64> {
        let mut hist = BTreeMap::new();
        for s in &self.samples {
            for &id in s.labels.iter() {
                *hist.entry(id).or_insert(0) += 1;
            }
        }
        hist
    }

    /// Number of samples in which each label id appears at least once.
    pub fn scene_presence(&self) -> BTreeMap<u8, usize> {
        let mut out = BTreeMap::new();
        for s in &self.samples {
            let mut seen = [false; 256];
            for &id in s.labels.iter() {
                seen[id as usize] = true;
            }
            for (id, _) in seen.iter().enumerate().filter(|(_, &v)| v) {
                *out.entry(id as u8).or_insert(0) += 1;
            }
        }
        out
    }
}
