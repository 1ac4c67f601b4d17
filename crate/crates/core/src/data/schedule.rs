use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetTag, LabelMap, Sample, IGNORE_INDEX, NOT_NOVEL};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub index: usize,
    pub novel: Vec<u8>,
}

/// Base classes followed by disjoint groups of classes added one step at a time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub protocol_name: String,
    pub base_classes: Vec<u8>,
    pub steps: Vec<ScheduleStep>,
}

impl TaskSchedule {
    /// Base task plus one task per incremental step.
    pub fn num_tasks(&self) -> usize {
        1 + self.steps.len()
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn step(&self, t: usize) -> Result<&ScheduleStep> {
        if t == 0 || t > self.steps.len() {
            return Err(Error::Schedule(format!(
                "step {t} outside 1..={} of protocol {}",
                self.steps.len(),
                self.protocol_name
            )));
        }
        Ok(&self.steps[t - 1])
    }

    /// `C_{0:t}`, ascending.
    pub fn known_through(&self, t: usize) -> Vec<u8> {
        let mut ids = self.base_classes.clone();
        for step in self.steps.iter().take(t) {
            ids.extend_from_slice(&step.novel);
        }
        ids.sort_unstable();
        ids
    }

    /// Classes added in steps `1..=t`.
    pub fn novel_through(&self, t: usize) -> Vec<u8> {
        let mut ids: Vec<u8> = self.steps.iter().take(t).flat_map(|s| s.novel.iter().copied()).collect();
        ids.sort_unstable();
        ids
    }

    pub fn universe(&self) -> Vec<u8> {
        self.known_through(self.steps.len())
    }
}

fn parse_count(s: &str, protocol: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("`{protocol}`: `{s}` is not a class count")))
}

/// Parse `B-N` (add `N` classes per step until the universe is covered) or
/// `B-NxS` (exactly `S` steps). Base classes are the lowest ids; additions
/// follow in ascending id order.
pub fn build_schedule(universe: &[u8], protocol: &str) -> Result<TaskSchedule> {
    let mut ids: Vec<u8> = universe.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != universe.len() {
        return Err(Error::Schedule("class universe has duplicate ids".into()));
    }
    let (base, rest) = protocol
        .split_once('-')
        .ok_or_else(|| Error::Parse(format!("`{protocol}`: expected B-N or B-NxS")))?;
    let base = parse_count(base, protocol)?;
    let (per_step, explicit_steps) = match rest.split_once(['x', 'X']) {
        Some((n, s)) => (parse_count(n, protocol)?, Some(parse_count(s, protocol)?)),
        None => (parse_count(rest, protocol)?, None),
    };
    if base < 2 {
        return Err(Error::Schedule(format!("`{protocol}`: at least 2 base classes are needed")));
    }
    if base > ids.len() {
        return Err(Error::Schedule(format!(
            "`{protocol}`: {base} base classes exceed the {}-class universe",
            ids.len()
        )));
    }
    let remaining = ids.len() - base;
    let steps = match (per_step, explicit_steps) {
        (0, Some(s)) if s > 0 => {
            return Err(Error::Schedule(format!("`{protocol}`: steps must add at least one class")))
        }
        (0, _) if remaining > 0 => {
            return Err(Error::Schedule(format!(
                "`{protocol}`: {remaining} classes would never be learned"
            )))
        }
        (0, _) => 0,
        (n, None) if remaining % n == 0 => remaining / n,
        (n, None) => {
            return Err(Error::Schedule(format!(
                "`{protocol}`: {remaining} remaining classes do not split into steps of {n}"
            )))
        }
        (n, Some(s)) if n * s == remaining => s,
        (n, Some(s)) => {
            return Err(Error::Schedule(format!(
                "`{protocol}`: {base} + {n}x{s} does not cover the {}-class universe",
                ids.len()
            )))
        }
    };
    Ok(TaskSchedule {
        protocol_name: protocol.to_string(),
        base_classes: ids[..base].to_vec(),
        steps: (0..steps)
            .map(|k| ScheduleStep {
                index: k + 1,
                novel: ids[base + k * per_step..base + (k + 1) * per_step].to_vec(),
            })
            .collect(),
    })
}

/// `D_0`: every image, with non-base pixels ignored.
pub fn filter_for_base(dataset: &Dataset, schedule: &TaskSchedule) -> Dataset {
    let keep: BTreeSet<u8> = schedule.base_classes.iter().copied().collect();
    let samples = dataset
        .samples
        .iter()
        .map(|s| Sample {
            id: s.id.clone(),
            image: s.image.clone(),
            labels: s.labels.mapv(|l| if keep.contains(&l) { l } else { IGNORE_INDEX }),
        })
        .collect();
    Dataset::new(DatasetTag::Base, samples)
}

/// `D_t`: images showing at least one pixel of `C_t`; every other labelled
/// pixel becomes [`NOT_NOVEL`], ignored pixels stay ignored.
pub fn filter_for_step(dataset: &Dataset, schedule: &TaskSchedule, t: usize) -> Result<Dataset> {
    let novel: BTreeSet<u8> = schedule.step(t)?.novel.iter().copied().collect();
    let samples: Vec<Sample> = dataset
        .samples
        .iter()
        .filter(|s| s.labels.iter().any(|l| novel.contains(l)))
        .map(|s| Sample {
            id: s.id.clone(),
            image: s.image.clone(),
            labels: s.labels.mapv(|l| {
                if l == IGNORE_INDEX || novel.contains(&l) {
                    l
                } else {
                    NOT_NOVEL
                }
            }),
        })
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptyStep { step: t });
    }
    Ok(Dataset::new(DatasetTag::Step(t), samples))
}

/// Ground truth for evaluation after step `t`: classes not yet introduced
/// are ignored.
pub fn eval_labels(labels: &LabelMap, known: &[u8]) -> LabelMap {
    let known: BTreeSet<u8> = known.iter().copied().collect();
    labels.mapv(|l| if known.contains(&l) { l } else { IGNORE_INDEX })
}

/// Union of per-step datasets up to step `t`, matched by sample id. A pixel
/// takes the first concrete class any of the datasets gives it.
pub fn joint_dataset(datasets: &[&Dataset], t: usize) -> Result<Dataset> {
    let mut merged: Vec<Sample> = Vec::new();
    for ds in datasets {
        match ds.tag {
            DatasetTag::Base => {}
            DatasetTag::Step(s) if s <= t => {}
            other => {
                return Err(Error::Data(format!(
                    "joint training up to step {t} cannot use a {other:?} dataset"
                )))
            }
        }
        for s in &ds.samples {
            match merged.iter_mut().find(|m| m.id == s.id) {
                Some(m) => {
                    if m.image != s.image {
                        return Err(Error::Data(format!("sample `{}` has two different images", s.id)));
                    }
                    m.labels.zip_mut_with(&s.labels, |dst, &src| {
                        let concrete = |l: u8| l != IGNORE_INDEX && l != NOT_NOVEL;
                        if !concrete(*dst) && concrete(src) {
                            *dst = src;
                        }
                    });
                }
                None => merged.push(s.clone()),
            }
        }
    }
    for m in &mut merged {
        m.labels.mapv_inplace(|l| if l == NOT_NOVEL { IGNORE_INDEX } else { l });
    }
    Ok(Dataset::new(DatasetTag::Joint(t), merged))
}
