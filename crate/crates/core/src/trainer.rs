//! Base training, per-step incremental optimisation and the two reference
//! baselines (sequential fine-tuning and joint retraining).
//!
//! Everything runs on one thread in a fixed order, so a fixed seed gives
//! bit-identical parameters.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use ndarray::{Array3, ArrayView2, ArrayView3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{joint_dataset, Dataset, DatasetTag, IGNORE_INDEX, NOT_NOVEL};
use crate::error::{Error, Result};
use crate::model::{build_model_for_classes, IncrementalUnit, ModelConfig, SegmentationModel};
use crate::nn::{Grads, ParamStore};
use crate::partition::{freeze_base, snapshot_frozen, verify_frozen, FrozenDigest, ParameterPartition};

/// Floor and ceiling applied to probabilities before taking logs.
pub const PROB_EPSILON: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub poly_power: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 20,
            batch_size: 4,
            poly_power: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.poly_power.is_finite() && self.poly_power >= 0.0) {
            return Err(Error::Config(format!("poly power must be non-negative, got {}", self.poly_power)));
        }
        Ok(())
    }

    /// `α · (1 − iter/total)^power`.
    pub fn lr_at(&self, iter: usize, total: usize) -> f64 {
        let frac = if total == 0 { 0.0 } else { iter as f64 / total as f64 };
        self.learning_rate * (1.0 - frac).max(0.0).powf(self.poly_power)
    }
}

/// One line of a run log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Passed to the per-batch hook after gradients are computed and before the
/// update is applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchStats {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    /// Largest absolute gradient entry over frozen parameters.
    pub frozen_grad_max_abs: f32,
    pub trainable_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    pub final_loss: f64,
    pub batches: usize,
}

/// Completed step of a continual run, as stored in the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    pub classes_added: Vec<u8>,
    pub final_loss: f64,
    pub checkpoint: Option<String>,
    pub checkpoint_sha256: Option<String>,
    pub wall_time_secs: f64,
}

impl StepRecord {
    pub fn new(step_index: usize, classes_added: Vec<u8>, outcome: &TrainOutcome, started: Instant) -> Result<Self> {
        if !outcome.final_loss.is_finite() {
            return Err(Error::Divergence {
                epoch: outcome.epochs.len(),
                loss: outcome.final_loss,
            });
        }
        Ok(Self {
            step_index,
            classes_added,
            final_loss: outcome.final_loss,
            checkpoint: None,
            checkpoint_sha256: None,
            wall_time_secs: started.elapsed().as_secs_f64(),
        })
    }
}

// ----------------------------------------------------------------------------
// losses

fn bce(p: f64, target: bool) -> f64 {
    let p = p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
    if target {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn bce_grad(p: f64, target: bool) -> f64 {
    if p <= PROB_EPSILON || p >= 1.0 - PROB_EPSILON {
        return 0.0;
    }
    if target {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

fn check_maps(probs: &ArrayView3<f32>, labels: &ArrayView2<u8>, novel: &[u8]) -> Result<()> {
    let (c, h, w) = probs.dim();
    if c != novel.len() {
        return Err(Error::Dimension(format!(
            "{c} probability channels for {} novel classes",
            novel.len()
        )));
    }
    if labels.dim() != (h, w) {
        return Err(Error::Dimension(format!(
            "probabilities are {h}x{w}, labels {:?}",
            labels.dim()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy between novel-class membership and the
/// predicted probabilities, over every non-ignored pixel.
///
/// Labelled pixels outside `novel_class_ids` (including [`NOT_NOVEL`]) are
/// negatives for every channel.
pub fn incremental_loss(probs: ArrayView3<f32>, labels: ArrayView2<u8>, novel_class_ids: &[u8]) -> Result<f64> {
    incremental_loss_and_grad(probs, labels, novel_class_ids).map(|(l, _)| l)
}

/// Loss plus its gradient with respect to each probability entry.
pub fn incremental_loss_and_grad(
    probs: ArrayView3<f32>,
    labels: ArrayView2<u8>,
    novel_class_ids: &[u8],
) -> Result<(f64, Array3<f64>)> {
    check_maps(&probs, &labels, novel_class_ids)?;
    let n = labels.iter().filter(|&&l| l != IGNORE_INDEX).count();
    if n == 0 {
        return Err(Error::EmptySupervision);
    }
    let mut grad = Array3::<f64>::zeros(probs.dim());
    let mut total = 0.0;
    for ((y, x), &l) in labels.indexed_iter() {
        if l == IGNORE_INDEX {
            continue;
        }
        for (c, &id) in novel_class_ids.iter().enumerate() {
            let p = probs[[c, y, x]] as f64;
            total += bce(p, l == id);
            grad[[c, y, x]] = bce_grad(p, l == id) / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Summed logit-form BCE of a unit's pre-sigmoid output (the unclamped
/// equivalent of [`incremental_loss`]) with the gradient w.r.t. the logits.
fn unit_loss_sum(logits: &Array3<f32>, labels: &ArrayView2<u8>, novel: &[u8]) -> (f64, usize, Array3<f32>) {
    let mut grad = Array3::<f32>::zeros(logits.dim());
    let mut total = 0.0;
    let mut n = 0;
    for ((y, x), &l) in labels.indexed_iter() {
        if l == IGNORE_INDEX {
            continue;
        }
        n += 1;
        for (c, &id) in novel.iter().enumerate() {
            let z = logits[[c, y, x]] as f64;
            let t = if l == id { 1.0 } else { 0.0 };
            total += softplus(z) - t * z;
            let s = 1.0 / (1.0 + (-z).exp());
            grad[[c, y, x]] = (s - t) as f32;
        }
    }
    (total, n, grad)
}

/// Summed softmax cross-entropy over pixels whose label is a head class;
/// every other label is skipped.
fn softmax_ce_sum(logits: &Array3<f32>, labels: &ArrayView2<u8>, class_ids: &[u8]) -> (f64, usize, Array3<f32>) {
    let mut channel = [None; 256];
    for (k, &id) in class_ids.iter().enumerate() {
        channel[id as usize] = Some(k);
    }
    let (c, _, _) = logits.dim();
    let mut grad = Array3::<f32>::zeros(logits.dim());
    let mut total = 0.0;
    let mut n = 0;
    let mut e = vec![0.0f64; c];
    for ((y, x), &l) in labels.indexed_iter() {
        let Some(target) = channel[l as usize] else { continue };
        n += 1;
        let m = (0..c).map(|k| logits[[k, y, x]] as f64).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in 0..c {
            e[k] = (logits[[k, y, x]] as f64 - m).exp();
            z += e[k];
        }
        total += z.ln() + m - logits[[target, y, x]] as f64;
        for k in 0..c {
            let p = e[k] / z;
            grad[[k, y, x]] = (p - if k == target { 1.0 } else { 0.0 }) as f32;
        }
    }
    (total, n, grad)
}

/// Mean softmax cross-entropy of `model` on `dataset` over pixels labelled
/// with one of the head's classes.
pub fn dataset_ce(model: &SegmentationModel, dataset: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for s in &dataset.samples {
        let out = model.forward_base(&s.image)?;
        let (l, k, _) = softmax_ce_sum(&out.logits, &s.labels.view(), &model.class_ids);
        total += l;
        n += k;
    }
    if n == 0 {
        return Err(Error::EmptySupervision);
    }
    Ok(total / n as f64)
}

// ----------------------------------------------------------------------------
// optimisation loop

struct Sgd {
    momentum: f32,
    velocity: BTreeMap<String, ndarray::ArrayD<f32>>,
}

impl Sgd {
    fn new(momentum: f64) -> Self {
        Self {
            momentum: momentum as f32,
            velocity: BTreeMap::new(),
        }
    }

    /// `v ← μv + g; θ ← θ − lr·v` for every parameter that has a gradient.
    fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
        let lr = lr as f32;
        for (name, g) in grads.iter() {
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ndarray::ArrayD::zeros(g.raw_dim()));
            let mu = self.momentum;
            v.zip_mut_with(g, |v, &g| *v = mu * *v + g);
            let p = params.get_mut(name)?;
            p.zip_mut_with(v, |p, &v| *p -= lr * v);
        }
        Ok(())
    }
}

/// What the optimisation loop trains.
trait Objective {
    /// Forward/backward of sample `i`: returns the summed loss and the number
    /// of supervised pixels, accumulating unnormalised gradients.
    fn sample(&self, i: usize, grads: &mut Grads) -> Result<(f64, usize)>;

    fn params_mut(&mut self) -> &mut ParamStore;

    fn after_epoch(&mut self, _epoch: usize) -> Result<()> {
        Ok(())
    }
}

fn run_loop(
    objective: &mut dyn Objective,
    num_samples: usize,
    config: &TrainConfig,
    frozen: &BTreeSet<String>,
    hook: &mut dyn FnMut(&BatchStats),
) -> Result<TrainOutcome> {
    config.validate()?;
    if num_samples == 0 {
        return Err(Error::EmptySupervision);
    }
    let per_epoch = num_samples.div_ceil(config.batch_size);
    let total = per_epoch * config.epochs;
    let mut sgd = Sgd::new(config.momentum);
    let mut order: Vec<usize> = (0..num_samples).collect();
    let mut logs = Vec::with_capacity(config.epochs);
    let mut iter = 0;
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let epoch_lr = config.lr_at(iter, total);
        let (mut epoch_loss, mut epoch_n) = (0.0, 0usize);
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut grads = Grads::new();
            let (mut loss, mut n) = (0.0, 0);
            for &i in chunk {
                let (l, k) = objective.sample(i, &mut grads)?;
                loss += l;
                n += k;
            }
            let lr = config.lr_at(iter, total);
            iter += 1;
            if n == 0 {
                continue;
            }
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            grads.scale(1.0 / n as f32);
            hook(&BatchStats {
                epoch,
                batch,
                loss: loss / n as f64,
                frozen_grad_max_abs: grads.max_abs_over(frozen),
                trainable_grad_norm: grads.l2_norm(),
            });
            sgd.step(objective.params_mut(), &grads, lr)?;
            epoch_loss += loss;
            epoch_n += n;
        }
        if epoch_n == 0 {
            return Err(Error::EmptySupervision);
        }
        let mean = epoch_loss / epoch_n as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        log::debug!("epoch {epoch}: loss {mean:.6} lr {epoch_lr:.6}");
        logs.push(EpochLog {
            epoch,
            loss: mean,
            lr: epoch_lr,
        });
        objective.after_epoch(epoch)?;
    }
    Ok(TrainOutcome {
        final_loss: logs.last().map(|l| l.loss).unwrap_or(f64::NAN),
        epochs: logs,
        batches: total,
    })
}

struct FullObjective<'a> {
    model: &'a mut SegmentationModel,
    dataset: &'a Dataset,
}

impl Objective for FullObjective<'_> {
    fn sample(&self, i: usize, grads: &mut Grads) -> Result<(f64, usize)> {
        let s = &self.dataset.samples[i];
        let (logits, trace) = self.model.forward_train(&s.image)?;
        let (loss, n, dlogits) = softmax_ce_sum(&logits, &s.labels.view(), &self.model.class_ids);
        if n > 0 {
            self.model.backward(&trace, &dlogits, grads)?;
        }
        Ok((loss, n))
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }
}

struct UnitObjective<'a> {
    model: &'a SegmentationModel,
    unit: &'a mut IncrementalUnit,
    dataset: &'a Dataset,
    stems: Vec<Array3<f32>>,
    /// Prior units followed by a copy of the unit being trained.
    all: Vec<IncrementalUnit>,
    partition: ParameterPartition,
    digest: FrozenDigest,
}

impl UnitObjective<'_> {
    fn verify(&self) -> Result<()> {
        let report = verify_frozen(self.model, &self.all, &self.partition, &self.digest)?;
        match report.first_mismatch() {
            None => Ok(()),
            Some(name) => Err(Error::Integrity(format!("frozen parameter `{name}` changed"))),
        }
    }
}

impl Objective for UnitObjective<'_> {
    fn sample(&self, i: usize, grads: &mut Grads) -> Result<(f64, usize)> {
        let s = &self.dataset.samples[i];
        let (_, h, w) = s.image.dim();
        let (logits, trace) = self.unit.forward_train(&self.stems[i], h, w)?;
        let (loss, n, dlogits) = unit_loss_sum(&logits, &s.labels.view(), &self.unit.novel_class_ids);
        if n > 0 {
            self.unit.backward(&trace, &dlogits, grads)?;
        }
        Ok((loss, n))
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.unit.params
    }

    fn after_epoch(&mut self, _epoch: usize) -> Result<()> {
        self.all.last_mut().expect("current unit").params = self.unit.params.clone();
        self.verify()
    }
}

fn check_labels(dataset: &Dataset, allowed: &BTreeSet<u8>, what: &str) -> Result<()> {
    for s in &dataset.samples {
        if let Some(((y, x), l)) = s.labels.indexed_iter().find(|(_, l)| !allowed.contains(l)) {
            return Err(Error::Data(format!(
                "`{}` pixel ({y},{x}) has label {l}, not allowed in {what}",
                s.id
            )));
        }
    }
    Ok(())
}

/// Softmax training of every parameter of `model` on pixels labelled with a
/// head class; `skip` lists extra labels that carry no supervision.
fn train_full(
    model: &mut SegmentationModel,
    dataset: &Dataset,
    config: &TrainConfig,
    skip: &[u8],
    what: &str,
    hook: &mut dyn FnMut(&BatchStats),
) -> Result<TrainOutcome> {
    let allowed: BTreeSet<u8> = model
        .class_ids
        .iter()
        .chain(skip)
        .copied()
        .chain([IGNORE_INDEX])
        .collect();
    check_labels(dataset, &allowed, what)?;
    let num_samples = dataset.len();
    let mut objective = FullObjective { model, dataset };
    run_loop(&mut objective, num_samples, config, &BTreeSet::new(), hook)
}

/// Train a base model on `D_0`.
pub fn train_base(
    model: &mut SegmentationModel,
    dataset: &Dataset,
    config: &TrainConfig,
    hook: &mut dyn FnMut(&BatchStats),
) -> Result<TrainOutcome> {
    if dataset.tag != DatasetTag::Base && dataset.tag != DatasetTag::Full {
        return Err(Error::Data(format!("base training needs D_0, got {:?}", dataset.tag)));
    }
    train_full(model, dataset, config, &[], "base training", hook)
}

/// Train the newest unit on `D_t` with the backbone and earlier units frozen.
///
/// The frozen parameters are checked against `expected` (or a snapshot taken
/// on entry) before training and after every epoch; any difference aborts
/// with an integrity error naming the first mismatched parameter.
pub fn train_incremental(
    model: &SegmentationModel,
    prior_units: &[IncrementalUnit],
    unit: &mut IncrementalUnit,
    dataset: &Dataset,
    config: &TrainConfig,
    expected: Option<&FrozenDigest>,
    hook: &mut dyn FnMut(&BatchStats),
) -> Result<TrainOutcome> {
    if dataset.tag != DatasetTag::Step(unit.step_index) {
        return Err(Error::Data(format!(
            "unit {} can only train on its own step's data, got {:?}",
            unit.step_index, dataset.tag
        )));
    }
    let allowed: BTreeSet<u8> = unit
        .novel_class_ids
        .iter()
        .copied()
        .chain([NOT_NOVEL, IGNORE_INDEX])
        .collect();
    check_labels(dataset, &allowed, "an incremental step")?;

    let mut all: Vec<IncrementalUnit> = prior_units.to_vec();
    all.push(unit.clone());
    let partition = freeze_base(model, &all);
    partition.check_complete(model, &all)?;
    let digest = match expected {
        Some(d) => d.clone(),
        None => snapshot_frozen(model, &all, &partition)?,
    };
    // the stem is frozen, so its features are computed once per image
    let stems = dataset
        .samples
        .iter()
        .map(|s| model.stem_features(&s.image))
        .collect::<Result<Vec<_>>>()?;
    let frozen = partition.frozen_names.clone();
    let mut objective = UnitObjective {
        model,
        unit,
        dataset,
        stems,
        all,
        partition,
        digest,
    };
    objective.verify()?;
    run_loop(&mut objective, dataset.len(), config, &frozen, hook)
}

/// Sequential fine-tuning baseline for step `t`: the head is widened with
/// the step's classes if needed and every parameter is trained with softmax
/// cross-entropy on the pixels labelled with those classes.
pub fn train_finetune_baseline(
    model: &mut SegmentationModel,
    dataset: &Dataset,
    novel_class_ids: &[u8],
    config: &TrainConfig,
    hook: &mut dyn FnMut(&BatchStats),
) -> Result<TrainOutcome> {
    let DatasetTag::Step(t) = dataset.tag else {
        return Err(Error::Data(format!("fine-tuning needs a step dataset, got {:?}", dataset.tag)));
    };
    let missing: Vec<u8> = novel_class_ids
        .iter()
        .copied()
        .filter(|id| !model.class_ids.contains(id))
        .collect();
    if !missing.is_empty() {
        model.widen_head(&missing, config.seed.wrapping_add(t as u64))?;
    }
    // only the step's own classes supervise; earlier ids are absent from D_t
    let step_ids: BTreeSet<u8> = novel_class_ids.iter().copied().collect();
    let allowed: BTreeSet<u8> = step_ids.iter().copied().chain([NOT_NOVEL, IGNORE_INDEX]).collect();
    check_labels(dataset, &allowed, "a fine-tuning step")?;
    train_full(model, dataset, config, &[NOT_NOVEL], "a fine-tuning step", hook)
}

/// Joint-training reference: a fresh model over `C_{0:t}` trained on the
/// union of `D_0 ..= D_t`.
pub fn train_joint_baseline(
    model_config: &ModelConfig,
    class_ids: &[u8],
    datasets: &[&Dataset],
    t: usize,
    config: &TrainConfig,
    hook: &mut dyn FnMut(&BatchStats),
) -> Result<(SegmentationModel, TrainOutcome)> {
    let merged = joint_dataset(datasets, t)?;
    let mut model = build_model_for_classes(model_config, class_ids, config.seed)?;
    let outcome = train_full(&mut model, &merged, config, &[], "joint training", hook)?;
    Ok((model, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn config_guards() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { epochs: 0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { momentum: 1.0, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn poly_schedule() {
        let c = TrainConfig {
            learning_rate: 0.1,
            poly_power: 0.9,
            ..Default::default()
        };
        assert_eq!(c.lr_at(0, 10), 0.1);
        assert!((c.lr_at(5, 10) - 0.1 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert_eq!(c.lr_at(10, 10), 0.0);
    }

    #[test]
    fn loss_single_pixel() {
        let probs = Array3::from_elem((1, 1, 1), 0.5f32);
        let labels = array![[7u8]];
        let l = incremental_loss(probs.view(), labels.view(), &[7]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_empty_supervision() {
        let probs = Array3::from_elem((1, 2, 2), 0.5f32);
        let labels = Array2::from_elem((2, 2), IGNORE_INDEX);
        assert!(matches!(
            incremental_loss(probs.view(), labels.view(), &[7]),
            Err(Error::EmptySupervision)
        ));
    }

    #[test]
    fn logit_form_matches_probability_form() {
        let logits = Array3::from_shape_vec((1, 2, 2), vec![2.0f32, -1.0, 0.3, 4.0]).unwrap();
        let labels = array![[7u8, NOT_NOVEL], [IGNORE_INDEX, 7]];
        let probs = logits.mapv(crate::nn::sigmoid);
        let (sum, n, _) = unit_loss_sum(&logits, &labels.view(), &[7]);
        let mean = incremental_loss(probs.view(), labels.view(), &[7]).unwrap();
        assert_eq!(n, 3);
        assert!((sum / 3.0 - mean).abs() < 1e-6);
    }

    #[test]
    fn softmax_ce_skips_foreign_labels() {
        let logits = Array3::<f32>::zeros((3, 1, 2));
        let labels = array![[1u8, NOT_NOVEL]];
        let (l, n, g) = softmax_ce_sum(&logits, &labels.view(), &[0, 1, 2]);
        assert_eq!(n, 1);
        assert!((l - 3f64.ln()).abs() < 1e-9);
        assert!(g.slice(ndarray::s![.., 0, 1]).iter().all(|&v| v == 0.0));
        assert!((g[[1, 0, 0]] + 2.0 / 3.0).abs() < 1e-6);
    }
}
