//! Freeze discipline for incremental training: which parameters may move,
//! and bitwise evidence that the rest did not.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{IncrementalUnit, SegmentationModel};
use crate::nn::ParamStore;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParameterPartition {
    pub frozen_names: BTreeSet<String>,
    pub trainable_names: BTreeSet<String>,
}

/// Freeze the backbone, its head and every unit but the last; the last unit
/// (the step currently being trained) is the only trainable set.
pub fn freeze_base(model: &SegmentationModel, units: &[IncrementalUnit]) -> ParameterPartition {
    let mut partition = ParameterPartition::default();
    partition.frozen_names.extend(model.params.names().cloned());
    if let Some((current, earlier)) = units.split_last() {
        for unit in earlier {
            partition.frozen_names.extend(unit.params.names().cloned());
        }
        partition.trainable_names.extend(current.params.names().cloned());
    }
    partition
}

impl ParameterPartition {
    /// Disjointness plus coverage of every parameter of the composite model.
    pub fn check_complete(&self, model: &SegmentationModel, units: &[IncrementalUnit]) -> Result<()> {
        if let Some(name) = self.frozen_names.intersection(&self.trainable_names).next() {
            return Err(Error::Verification(format!("`{name}` is both frozen and trainable")));
        }
        let all: BTreeSet<&String> = stores(model, units).flat_map(|s| s.names()).collect();
        for name in &all {
            if !self.frozen_names.contains(*name) && !self.trainable_names.contains(*name) {
                return Err(Error::Verification(format!("`{name}` is not classified")));
            }
        }
        for name in self.frozen_names.iter().chain(&self.trainable_names) {
            if !all.contains(name) {
                return Err(Error::Verification(format!("`{name}` is not a model parameter")));
            }
        }
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable_names.contains(name)
    }
}

fn stores<'a>(model: &'a SegmentationModel, units: &'a [IncrementalUnit]) -> impl Iterator<Item = &'a ParamStore> {
    std::iter::once(&model.params).chain(units.iter().map(|u| &u.params))
}

fn lookup<'a>(model: &'a SegmentationModel, units: &'a [IncrementalUnit], name: &str) -> Option<&'a ArrayD<f32>> {
    stores(model, units).find_map(|s| s.get(name).ok())
}

/// SHA-256 over the shape and little-endian bytes of one tensor.
pub fn tensor_hash(tensor: &ArrayD<f32>) -> String {
    let mut hasher = Sha256::new();
    hasher.update((tensor.ndim() as u64).to_le_bytes());
    for &d in tensor.shape() {
        hasher.update((d as u64).to_le_bytes());
    }
    for v in tensor.iter() {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Digest of a whole parameter store, for determinism checks.
pub fn store_digest(store: &ParamStore) -> String {
    let entries: BTreeMap<String, String> = store.iter().map(|(n, t)| (n.clone(), tensor_hash(t))).collect();
    FrozenDigest::from_entries(entries).global
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrozenDigest {
    pub entries: BTreeMap<String, String>,
    pub global: String,
}

impl FrozenDigest {
    fn from_entries(entries: BTreeMap<String, String>) -> Self {
        let global = global_hash(&entries);
        Self { entries, global }
    }

    /// `<parameter-path> <hex-hash>` lines in path order, then `global <hex-hash>`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, hash) in &self.entries {
            let _ = writeln!(out, "{name} {hash}");
        }
        let _ = writeln!(out, "global {}", self.global);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let last = lines
            .pop()
            .ok_or_else(|| Error::Verification("empty digest manifest".into()))?;
        let global = match last.split_once(' ') {
            Some(("global", hash)) => hash.trim().to_string(),
            _ => return Err(Error::Verification("digest manifest lacks a final global line".into())),
        };
        let mut entries = BTreeMap::new();
        for line in lines {
            let (name, hash) = line
                .split_once(' ')
                .ok_or_else(|| Error::Verification(format!("malformed digest line `{line}`")))?;
            entries.insert(name.to_string(), hash.trim().to_string());
        }
        let digest = Self::from_entries(entries);
        if digest.global != global {
            return Err(Error::Integrity("digest manifest global hash does not match its entries".into()));
        }
        Ok(digest)
    }
}

fn global_hash(entries: &BTreeMap<String, String>) -> String {
    let mut hasher = Sha256::new();
    for (name, hash) in entries {
        hasher.update(name.as_bytes());
        hasher.update(b" ");
        hasher.update(hash.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

pub fn snapshot_frozen(
    model: &SegmentationModel,
    units: &[IncrementalUnit],
    partition: &ParameterPartition,
) -> Result<FrozenDigest> {
    let mut entries = BTreeMap::new();
    for name in &partition.frozen_names {
        let tensor = lookup(model, units, name)
            .ok_or_else(|| Error::Verification(format!("frozen parameter `{name}` not found")))?;
        entries.insert(name.clone(), tensor_hash(tensor));
    }
    Ok(FrozenDigest::from_entries(entries))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifyReport {
    pub unchanged: bool,
    pub mismatched: Vec<String>,
}

impl VerifyReport {
    pub fn first_mismatch(&self) -> Option<&str> {
        self.mismatched.first().map(String::as_str)
    }
}

pub fn verify_frozen(
    model: &SegmentationModel,
    units: &[IncrementalUnit],
    partition: &ParameterPartition,
    digest: &FrozenDigest,
) -> Result<VerifyReport> {
    let names: BTreeSet<&String> = digest.entries.keys().collect();
    let frozen: BTreeSet<&String> = partition.frozen_names.iter().collect();
    if names != frozen {
        let diff = names.symmetric_difference(&frozen).next().expect("sets differ");
        return Err(Error::Verification(format!(
            "digest and partition disagree on parameter `{diff}`"
        )));
    }
    let current = snapshot_frozen(model, units, partition)?;
    let mismatched: Vec<String> = digest
        .entries
        .iter()
        .filter(|(name, hash)| current.entries.get(*name) != Some(*hash))
        .map(|(name, _)| name.clone())
        .collect();
    Ok(VerifyReport {
        unchanged: mismatched.is_empty(),
        mismatched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_incremental_unit, build_model, BranchWidths, ConnectionPoint, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            input_channels: 3,
            stem_width: 4,
            branch_widths: BranchWidths { p: 4, i: 4, d: 2 },
            num_blocks_per_branch: 1,
            num_base_classes: 3,
            connection_point: ConnectionPoint::D,
        }
    }

    fn setup() -> (SegmentationModel, Vec<IncrementalUnit>) {
        let model = build_model(&cfg(), 1).unwrap();
        let u1 = build_incremental_unit(&cfg(), &[3], &[0, 1, 2], 1, 2).unwrap();
        let u2 = build_incremental_unit(&cfg(), &[4], &[0, 1, 2, 3], 2, 3).unwrap();
        (model, vec![u1, u2])
    }

    #[test]
    fn fresh_unit_is_the_only_trainable_set() {
        let (model, units) = setup();
        let p = freeze_base(&model, &units[..1]);
        let expected: BTreeSet<String> = units[0].params.names().cloned().collect();
        assert_eq!(p.trainable_names, expected);
        p.check_complete(&model, &units[..1]).unwrap();
    }

    #[test]
    fn no_units_means_nothing_trainable() {
        let (model, _) = setup();
        let p = freeze_base(&model, &[]);
        assert!(p.trainable_names.is_empty());
        assert_eq!(p.frozen_names.len(), model.params.len());
    }

    #[test]
    fn earlier_units_are_frozen() {
        let (model, units) = setup();
        let p = freeze_base(&model, &units);
        assert!(units[0].params.names().all(|n| p.frozen_names.contains(n)));
        assert!(units[1].params.names().all(|n| p.trainable_names.contains(n)));
        p.check_complete(&model, &units).unwrap();
    }

    #[test]
    fn incomplete_partition_is_reported() {
        let (model, units) = setup();
        let mut p = freeze_base(&model, &units);
        let name = p.frozen_names.iter().next().unwrap().clone();
        p.frozen_names.remove(&name);
        assert!(p.check_complete(&model, &units).is_err());
        let mut p = freeze_base(&model, &units);
        p.trainable_names.insert(name);
        assert!(p.check_complete(&model, &units).is_err());
    }

    #[test]
    fn snapshot_is_deterministic_and_sensitive() {
        let (mut model, units) = setup();
        let p = freeze_base(&model, &units);
        let a = snapshot_frozen(&model, &units, &p).unwrap();
        let b = snapshot_frozen(&model, &units, &p).unwrap();
        assert_eq!(a, b);
        assert!(verify_frozen(&model, &units, &p, &a).unwrap().unchanged);

        model.params.get_mut("d_branch.entry.weight").unwrap()[[0, 0, 0, 0]] += 1e-6;
        let c = snapshot_frozen(&model, &units, &p).unwrap();
        assert_ne!(a.global, c.global);
        let report = verify_frozen(&model, &units, &p, &a).unwrap();
        assert!(!report.unchanged);
        assert_eq!(report.first_mismatch(), Some("d_branch.entry.weight"));
    }

    #[test]
    fn trainable_changes_do_not_affect_digest() {
        let (model, mut units) = setup();
        let p = freeze_base(&model, &units);
        let d = snapshot_frozen(&model, &units, &p).unwrap();
        units[1].params.get_mut("unit2.head.classifier.bias").unwrap()[[0]] = 5.0;
        assert!(verify_frozen(&model, &units, &p, &d).unwrap().unchanged);
    }

    #[test]
    fn text_round_trip() {
        let (model, units) = setup();
        let p = freeze_base(&model, &units);
        let d = snapshot_frozen(&model, &units, &p).unwrap();
        let text = d.to_text();
        assert!(text.lines().last().unwrap().starts_with("global "));
        assert_eq!(FrozenDigest::from_text(&text).unwrap(), d);

        let tampered = text.replacen("stem.conv1.bias ", "stem.conv1.bias 00", 1);
        assert!(FrozenDigest::from_text(&tampered).is_err());
    }

    #[test]
    fn mismatched_names_are_a_verification_error() {
        let (model, units) = setup();
        let p = freeze_base(&model, &units);
        let d = snapshot_frozen(&model, &units, &p).unwrap();
        let other = freeze_base(&model, &units[..1]);
        assert!(matches!(verify_frozen(&model, &units, &other, &d), Err(Error::Verification(_))));
    }
}
