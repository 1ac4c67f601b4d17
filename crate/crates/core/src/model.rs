//! Desk-scale three-branch segmentation backbone and the parallel branch
//! units that learn novel classes on top of it.
//!
//! Layout (factor 4 stem, I branch one octave lower):
//!
//! ```text
//! image ─ stem(2 strided convs) ─┬─ P branch ────────────────┐
//!                                ├─ I branch (↓2 … ↑2) ──────┼─ concat ─ head ─ ↑4 ─ base logits
//!                                ├─ D branch (narrow) ───────┘
//!                                └─ unit t: clone of tapped branch ─ new head ─ ↑4 ─ σ ─ novel probs
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, kaiming_normal, relu, relu_backward, sigmoid, split_channels, zeros, Bilinear, Conv2d,
    ConvCache, Grads, ParamStore,
};

/// Spatial reduction between the input image and the coarsest feature map.
pub const DOWNSAMPLE_FACTOR: usize = 8;

/// Backbone branch that a parallel unit mirrors and sits beside.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConnectionPoint {
    P,
    I,
    #[default]
    D,
}

impl ConnectionPoint {
    pub const ALL: [ConnectionPoint; 3] = [ConnectionPoint::P, ConnectionPoint::I, ConnectionPoint::D];

    fn prefix(self) -> &'static str {
        match self {
            ConnectionPoint::P => "p_branch",
            ConnectionPoint::I => "i_branch",
            ConnectionPoint::D => "d_branch",
        }
    }
}

impl fmt::Display for ConnectionPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConnectionPoint::P => "P",
            ConnectionPoint::I => "I",
            ConnectionPoint::D => "D",
        };
        f.write_str(s)
    }
}

impl FromStr for ConnectionPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "P" => Ok(ConnectionPoint::P),
            "I" => Ok(ConnectionPoint::I),
            "D" => Ok(ConnectionPoint::D),
            other => Err(Error::Config(format!("unknown connection point `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchWidths {
    pub p: usize,
    pub i: usize,
    pub d: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub stem_width: usize,
    pub branch_widths: BranchWidths,
    pub num_blocks_per_branch: usize,
    pub num_base_classes: usize,
    #[serde(default)]
    pub connection_point: ConnectionPoint,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            stem_width: 16,
            branch_widths: BranchWidths { p: 24, i: 32, d: 12 },
            num_blocks_per_branch: 1,
            num_base_classes: 6,
            connection_point: ConnectionPoint::D,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.branch_widths;
        let counts = [
            ("input_channels", self.input_channels),
            ("stem_width", self.stem_width),
            ("branch_widths.p", w.p),
            ("branch_widths.i", w.i),
            ("branch_widths.d", w.d),
            ("num_blocks_per_branch", self.num_blocks_per_branch),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.num_base_classes < 2 {
            return Err(Error::Config(format!(
                "num_base_classes must be at least 2, got {}",
                self.num_base_classes
            )));
        }
        if self.num_base_classes > 254 {
            return Err(Error::Config("num_base_classes must fit below the reserved ids".into()));
        }
        Ok(())
    }

    pub fn branch_width(&self, point: ConnectionPoint) -> usize {
        match point {
            ConnectionPoint::P => self.branch_widths.p,
            ConnectionPoint::I => self.branch_widths.i,
            ConnectionPoint::D => self.branch_widths.d,
        }
    }

    fn fused_width(&self) -> usize {
        self.branch_widths.p + self.branch_widths.i + self.branch_widths.d
    }

    /// Number of scalar parameters of a backbone built from this config.
    pub fn parameter_count(&self) -> usize {
        Backbone::new(self, self.num_base_classes).parameter_count()
    }
}

// ----------------------------------------------------------------------------
// building blocks

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

struct ResBlockCache {
    c1: ConvCache,
    hidden: Array3<f32>,
    c2: ConvCache,
    out: Array3<f32>,
}

impl ResBlock {
    fn new(prefix: &str, width: usize) -> Self {
        Self {
            conv1: Conv2d::new(format!("{prefix}.conv1"), width, width, 3, 1),
            conv2: Conv2d::new(format!("{prefix}.conv2"), width, width, 3, 1),
        }
    }

    fn convs(&self) -> [&Conv2d; 2] {
        [&self.conv1, &self.conv2]
    }

    fn forward(&self, store: &ParamStore, x: &Array3<f32>) -> Result<(Array3<f32>, ResBlockCache)> {
        let (h, c1) = self.conv1.forward(store, x)?;
        let hidden = relu(&h);
        let (z, c2) = self.conv2.forward(store, &hidden)?;
        let out = relu(&(z + x));
        Ok((out.clone(), ResBlockCache { c1, hidden, c2, out }))
    }

    fn backward(
        &self,
        store: &ParamStore,
        cache: &ResBlockCache,
        dy: &Array3<f32>,
        grads: &mut Grads,
    ) -> Result<Array3<f32>> {
        let dsum = relu_backward(&cache.out, dy);
        let dhidden = self
            .conv2
            .backward(store, &cache.c2, &dsum, grads, true)?
            .expect("input grad requested");
        let dh = relu_backward(&cache.hidden, &dhidden);
        let dx = self
            .conv1
            .backward(store, &cache.c1, &dh, grads, true)?
            .expect("input grad requested");
        Ok(dx + dsum)
    }
}

/// One backbone pathway: entry conv then residual blocks. The I pathway
/// enters with stride 2 and is resized back to stem resolution.
#[derive(Clone, Debug)]
pub(crate) struct Branch {
    entry: Conv2d,
    blocks: Vec<ResBlock>,
    coarse: bool,
}

pub(crate) struct BranchCache {
    entry: ConvCache,
    entry_out: Array3<f32>,
    blocks: Vec<ResBlockCache>,
    resize: Option<Bilinear>,
}

impl Branch {
    fn new(prefix: &str, point: ConnectionPoint, in_channels: usize, width: usize, blocks: usize) -> Self {
        let coarse = point == ConnectionPoint::I;
        Self {
            entry: Conv2d::new(format!("{prefix}.entry"), in_channels, width, 3, if coarse { 2 } else { 1 }),
            blocks: (0..blocks).map(|b| ResBlock::new(&format!("{prefix}.block{b}"), width)).collect(),
            coarse,
        }
    }

    fn convs(&self) -> Vec<&Conv2d> {
        let mut v = vec![&self.entry];
        v.extend(self.blocks.iter().flat_map(|b| b.convs()));
        v
    }

    fn forward(&self, store: &ParamStore, x: &Array3<f32>) -> Result<(Array3<f32>, BranchCache)> {
        let (e, entry) = self.entry.forward(store, x)?;
        let entry_out = relu(&e);
        let mut h = entry_out.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(store, &h)?;
            blocks.push(cache);
            h = next;
        }
        let resize = if self.coarse {
            let (_, in_h, in_w) = x.dim();
            let (_, ch, cw) = h.dim();
            let up = Bilinear::new(ch, cw, in_h, in_w);
            h = up.forward(&h);
            Some(up)
        } else {
            None
        };
        Ok((h, BranchCache { entry, entry_out, blocks, resize }))
    }

    fn backward(
        &self,
        store: &ParamStore,
        cache: &BranchCache,
        dy: &Array3<f32>,
        grads: &mut Grads,
        want_input_grad: bool,
    ) -> Result<Option<Array3<f32>>> {
        let mut g = match &cache.resize {
            Some(up) => up.backward(dy),
            None => dy.clone(),
        };
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            g = block.backward(store, bc, &g, grads)?;
        }
        let g = relu_backward(&cache.entry_out, &g);
        self.entry.backward(store, &cache.entry, &g, grads, want_input_grad)
    }
}

#[derive(Clone, Debug)]
struct Stem {
    conv1: Conv2d,
    conv2: Conv2d,
}

struct StemCache {
    c1: ConvCache,
    h1: Array3<f32>,
    c2: ConvCache,
    out: Array3<f32>,
}

impl Stem {
    fn new(in_channels: usize, width: usize) -> Self {
        Self {
            conv1: Conv2d::new("stem.conv1", in_channels, width, 3, 2),
            conv2: Conv2d::new("stem.conv2", width, width, 3, 2),
        }
    }

    fn forward(&self, store: &ParamStore, x: &Array3<f32>) -> Result<(Array3<f32>, StemCache)> {
        let (a, c1) = self.conv1.forward(store, x)?;
        let h1 = relu(&a);
        let (b, c2) = self.conv2.forward(store, &h1)?;
        let out = relu(&b);
        Ok((out.clone(), StemCache { c1, h1, c2, out }))
    }

    fn backward(&self, store: &ParamStore, cache: &StemCache, dy: &Array3<f32>, grads: &mut Grads) -> Result<()> {
        let g = relu_backward(&cache.out, dy);
        let g = self.conv2.backward(store, &cache.c2, &g, grads, true)?.expect("requested");
        let g = relu_backward(&cache.h1, &g);
        self.conv1.backward(store, &cache.c1, &g, grads, false)?;
        Ok(())
    }
}

/// Segmentation head: optional 1×1 fusion, 3×3 refinement, 1×1 classifier,
/// then bilinear resize to the input resolution.
#[derive(Clone, Debug)]
pub(crate) struct Head {
    fuse: Option<Conv2d>,
    conv: Conv2d,
    classifier: Conv2d,
}

pub(crate) struct HeadCache {
    fuse: Option<(ConvCache, Array3<f32>)>,
    conv: ConvCache,
    hidden: Array3<f32>,
    classifier: ConvCache,
    resize: Bilinear,
}

impl Head {
    fn convs(&self) -> Vec<&Conv2d> {
        let mut v: Vec<&Conv2d> = self.fuse.iter().collect();
        v.push(&self.conv);
        v.push(&self.classifier);
        v
    }

    fn forward(
        &self,
        store: &ParamStore,
        x: &Array3<f32>,
        out_h: usize,
        out_w: usize,
    ) -> Result<(Array3<f32>, HeadCache)> {
        let (x, fuse) = match &self.fuse {
            Some(conv) => {
                let (f, c) = conv.forward(store, x)?;
                let f = relu(&f);
                (f.clone(), Some((c, f)))
            }
            None => (x.clone(), None),
        };
        let (h, conv) = self.conv.forward(store, &x)?;
        let hidden = relu(&h);
        let (logits, classifier) = self.classifier.forward(store, &hidden)?;
        let (_, lh, lw) = logits.dim();
        let resize = Bilinear::new(lh, lw, out_h, out_w);
        let out = resize.forward(&logits);
        Ok((out, HeadCache { fuse, conv, hidden, classifier, resize }))
    }

    fn backward(
        &self,
        store: &ParamStore,
        cache: &HeadCache,
        dy: &Array3<f32>,
        grads: &mut Grads,
    ) -> Result<Array3<f32>> {
        let g = cache.resize.backward(dy);
        let g = self
            .classifier
            .backward(store, &cache.classifier, &g, grads, true)?
            .expect("requested");
        let g = relu_backward(&cache.hidden, &g);
        let g = self.conv.backward(store, &cache.conv, &g, grads, true)?.expect("requested");
        match (&self.fuse, &cache.fuse) {
            (Some(conv), Some((c, out))) => {
                let g = relu_backward(out, &g);
                Ok(conv.backward(store, c, &g, grads, true)?.expect("requested"))
            }
            _ => Ok(g),
        }
    }
}

/// Full base architecture for a given output channel count.
#[derive(Clone, Debug)]
struct Backbone {
    stem: Stem,
    p: Branch,
    i: Branch,
    d: Branch,
    head: Head,
}

impl Backbone {
    fn new(config: &ModelConfig, num_classes: usize) -> Self {
        let w = config.branch_widths;
        let n = config.num_blocks_per_branch;
        let s = config.stem_width;
        Self {
            stem: Stem::new(config.input_channels, s),
            p: Branch::new("p_branch", ConnectionPoint::P, s, w.p, n),
            i: Branch::new("i_branch", ConnectionPoint::I, s, w.i, n),
            d: Branch::new("d_branch", ConnectionPoint::D, s, w.d, n),
            head: Head {
                fuse: Some(Conv2d::new("head.fuse", config.fused_width(), w.p, 1, 1)),
                conv: Conv2d::new("head.conv", w.p, w.p, 3, 1),
                classifier: Conv2d::new("head.classifier", w.p, num_classes, 1, 1),
            },
        }
    }

    fn convs(&self) -> Vec<&Conv2d> {
        let mut v = vec![&self.stem.conv1, &self.stem.conv2];
        v.extend(self.p.convs());
        v.extend(self.i.convs());
        v.extend(self.d.convs());
        v.extend(self.head.convs());
        v
    }

    fn parameter_count(&self) -> usize {
        self.convs()
            .iter()
            .map(|c| c.weight_shape().iter().product::<usize>() + c.out_channels)
            .sum()
    }
}

// ----------------------------------------------------------------------------
// public model types

/// Output of a base forward pass.
#[derive(Clone, Debug)]
pub struct BaseOutput {
    /// Pre-softmax scores, one channel per entry of `class_ids`.
    pub logits: Array3<f32>,
    /// Output of the backbone branch named by the connection point.
    pub tapped: Array3<f32>,
}

/// Per-novel-class confidences in `[0, 1]`, shape `(|C_t|, H, W)`.
pub type ProbabilityMap = Array3<f32>;

/// The three-branch backbone plus its segmentation head.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationModel {
    pub config: ModelConfig,
    /// Global class id for each output channel.
    pub class_ids: Vec<u8>,
    pub seed: u64,
    pub params: ParamStore,
}

pub struct ModelTrace {
    stem: StemCache,
    p: BranchCache,
    i: BranchCache,
    d: BranchCache,
    head: HeadCache,
}

/// Build a base model predicting classes `0..num_base_classes`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<SegmentationModel> {
    let ids: Vec<u8> = (0..config.num_base_classes).map(|c| c as u8).collect();
    build_model_for_classes(config, &ids, seed)
}

/// Build a model whose head emits one channel per listed class id.
pub fn build_model_for_classes(config: &ModelConfig, class_ids: &[u8], seed: u64) -> Result<SegmentationModel> {
    config.validate()?;
    if class_ids.len() < 2 {
        return Err(Error::Config("a segmentation head needs at least 2 classes".into()));
    }
    let unique: BTreeSet<_> = class_ids.iter().collect();
    if unique.len() != class_ids.len() {
        return Err(Error::Config("duplicate class ids in head".into()));
    }
    let arch = Backbone::new(config, class_ids.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    for conv in arch.convs() {
        conv.init(&mut rng, &mut params);
    }
    Ok(SegmentationModel {
        config: config.clone(),
        class_ids: class_ids.to_vec(),
        seed,
        params,
    })
}

pub(crate) fn check_image(config: &ModelConfig, image: &Array3<f32>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != config.input_channels {
        return Err(Error::Dimension(format!(
            "image has {c} channels, model expects {}",
            config.input_channels
        )));
    }
    if h == 0 || w == 0 || h % DOWNSAMPLE_FACTOR != 0 || w % DOWNSAMPLE_FACTOR != 0 {
        return Err(Error::Dimension(format!(
            "image size {h}x{w} must be a non-zero multiple of {DOWNSAMPLE_FACTOR}"
        )));
    }
    Ok(())
}

impl SegmentationModel {
    fn arch(&self) -> Backbone {
        Backbone::new(&self.config, self.class_ids.len())
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Frozen shared features every incremental unit consumes.
    pub fn stem_features(&self, image: &Array3<f32>) -> Result<Array3<f32>> {
        check_image(&self.config, image)?;
        Ok(self.arch().stem.forward(&self.params, image)?.0)
    }

    pub fn forward_base(&self, image: &Array3<f32>) -> Result<BaseOutput> {
        let (logits, trace) = self.forward_train(image)?;
        let tapped = match self.config.connection_point {
            ConnectionPoint::P => trace.p_out(),
            ConnectionPoint::I => trace.i_out(),
            ConnectionPoint::D => trace.d_out(),
        };
        Ok(BaseOutput { logits, tapped })
    }

    /// Base logits and every unit's probabilities, sharing one stem pass.
    pub fn forward_with_units(
        &self,
        image: &Array3<f32>,
        units: &[IncrementalUnit],
    ) -> Result<(Array3<f32>, Vec<ProbabilityMap>)> {
        let (logits, trace) = self.forward_train(image)?;
        let (_, h, w) = image.dim();
        let probs = units
            .iter()
            .map(|u| u.probabilities_from_stem(&trace.stem.out, h, w))
            .collect::<Result<Vec<_>>>()?;
        Ok((logits, probs))
    }

    pub fn forward_train(&self, image: &Array3<f32>) -> Result<(Array3<f32>, ModelTrace)> {
        check_image(&self.config, image)?;
        let arch = self.arch();
        let (_, h, w) = image.dim();
        let (s, stem) = arch.stem.forward(&self.params, image)?;
        let (p_out, p) = arch.p.forward(&self.params, &s)?;
        let (i_out, i) = arch.i.forward(&self.params, &s)?;
        let (d_out, d) = arch.d.forward(&self.params, &s)?;
        let fused = concat_channels(&[&p_out, &i_out, &d_out]);
        let (logits, head) = arch.head.forward(&self.params, &fused, h, w)?;
        Ok((logits, ModelTrace { stem, p, i, d, head }))
    }

    /// Backpropagate `dlogits` through every backbone and head parameter.
    pub fn backward(&self, trace: &ModelTrace, dlogits: &Array3<f32>, grads: &mut Grads) -> Result<()> {
        let arch = self.arch();
        let w = self.config.branch_widths;
        let dfused = arch.head.backward(&self.params, &trace.head, dlogits, grads)?;
        let parts = split_channels(&dfused, &[w.p, w.i, w.d]);
        let mut ds = arch.p.backward(&self.params, &trace.p, &parts[0], grads, true)?.expect("requested");
        ds += &arch.i.backward(&self.params, &trace.i, &parts[1], grads, true)?.expect("requested");
        ds += &arch.d.backward(&self.params, &trace.d, &parts[2], grads, true)?.expect("requested");
        arch.stem.backward(&self.params, &trace.stem, &ds, grads)
    }

    /// Parameter shapes of one backbone branch, keyed by path within the branch.
    pub fn branch_shapes(&self, point: ConnectionPoint) -> Vec<Vec<usize>> {
        let prefix = format!("{}.", point.prefix());
        let mut shapes: Vec<Vec<usize>> = self
            .params
            .iter()
            .filter(|(n, _)| n.starts_with(&prefix))
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        shapes.sort();
        shapes
    }

    /// Append output channels for `new_ids`, keeping the existing classifier
    /// rows and initialising the new ones like `build_model` does.
    pub fn widen_head(&mut self, new_ids: &[u8], seed: u64) -> Result<()> {
        for id in new_ids {
            if self.class_ids.contains(id) {
                return Err(Error::Schedule(format!("class {id} already has a head channel")));
            }
        }
        let old = self.class_ids.len();
        let total = old + new_ids.len();
        let width = self.config.branch_widths.p;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fresh = kaiming_normal(&mut rng, &[new_ids.len(), width, 1, 1], width);

        let w_old = self.params.get("head.classifier.weight")?.clone();
        let mut w_new = zeros(&[total, width, 1, 1]);
        for o in 0..total {
            for c in 0..width {
                w_new[[o, c, 0, 0]] = if o < old {
                    w_old[[o, c, 0, 0]]
                } else {
                    fresh[[o - old, c, 0, 0]]
                };
            }
        }
        let b_old = self.params.get("head.classifier.bias")?.clone();
        let mut b_new = zeros(&[total]);
        for o in 0..old {
            b_new[[o]] = b_old[[o]];
        }
        self.params.insert("head.classifier.weight", w_new);
        self.params.insert("head.classifier.bias", b_new);
        self.class_ids.extend_from_slice(new_ids);
        Ok(())
    }

    /// Per-pixel argmax over the head, mapped to global class ids; ties go to
    /// the lowest channel.
    pub fn predict(&self, image: &Array3<f32>) -> Result<Array2<u8>> {
        let out = self.forward_base(image)?;
        Ok(argmax_labels(&out.logits, &self.class_ids))
    }
}

impl ModelTrace {
    fn p_out(&self) -> Array3<f32> {
        last_block_out(&self.p)
    }
    fn i_out(&self) -> Array3<f32> {
        let coarse = last_block_out(&self.i);
        match &self.i.resize {
            Some(up) => up.forward(&coarse),
            None => coarse,
        }
    }
    fn d_out(&self) -> Array3<f32> {
        last_block_out(&self.d)
    }
}

fn last_block_out(cache: &BranchCache) -> Array3<f32> {
    cache
        .blocks
        .last()
        .map(|b| b.out.clone())
        .unwrap_or_else(|| cache.entry_out.clone())
}

pub(crate) fn argmax_labels(logits: &Array3<f32>, class_ids: &[u8]) -> Array2<u8> {
    let (c, h, w) = logits.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for k in 1..c {
            if logits[[k, y, x]] > logits[[best, y, x]] {
                best = k;
            }
        }
        class_ids[best]
    })
}

// ----------------------------------------------------------------------------
// incremental units

/// One step's parallel branch and new-class head.
#[derive(Clone, Debug, PartialEq)]
pub struct IncrementalUnit {
    pub config: ModelConfig,
    pub step_index: usize,
    pub novel_class_ids: Vec<u8>,
    pub seed: u64,
    pub params: ParamStore,
}

pub struct UnitTrace {
    branch: BranchCache,
    head: HeadCache,
}

#[derive(Clone, Debug)]
struct UnitArch {
    branch: Branch,
    head: Head,
}

/// Fresh unit for `step_index`; `prior_class_ids` are all ids already owned
/// by the base head or earlier units.
pub fn build_incremental_unit(
    config: &ModelConfig,
    novel_class_ids: &[u8],
    prior_class_ids: &[u8],
    step_index: usize,
    seed: u64,
) -> Result<IncrementalUnit> {
    config.validate()?;
    if novel_class_ids.is_empty() {
        return Err(Error::Schedule(format!("step {step_index} adds no classes")));
    }
    if step_index == 0 {
        return Err(Error::Schedule("incremental steps are numbered from 1".into()));
    }
    let novel: BTreeSet<u8> = novel_class_ids.iter().copied().collect();
    if novel.len() != novel_class_ids.len() {
        return Err(Error::Schedule("duplicate novel class ids".into()));
    }
    if let Some(clash) = prior_class_ids.iter().find(|id| novel.contains(id)) {
        return Err(Error::Schedule(format!(
            "class {clash} of step {step_index} was already learned earlier"
        )));
    }
    let mut unit = IncrementalUnit {
        config: config.clone(),
        step_index,
        novel_class_ids: novel_class_ids.to_vec(),
        seed,
        params: ParamStore::new(),
    };
    let arch = unit.arch();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for conv in arch.branch.convs().into_iter().chain(arch.head.convs()) {
        conv.init(&mut rng, &mut unit.params);
    }
    Ok(unit)
}

/// Probability map of one unit for a full image.
pub fn forward_incremental(
    model: &SegmentationModel,
    unit: &IncrementalUnit,
    image: &Array3<f32>,
) -> Result<ProbabilityMap> {
    if model.config.stem_width != unit.config.stem_width {
        return Err(Error::Dimension("unit was built for a different stem width".into()));
    }
    let stem = model.stem_features(image)?;
    let (_, h, w) = image.dim();
    unit.probabilities_from_stem(&stem, h, w)
}

impl IncrementalUnit {
    pub fn prefix(&self) -> String {
        format!("unit{}", self.step_index)
    }

    pub fn connection_point(&self) -> ConnectionPoint {
        self.config.connection_point
    }

    fn arch(&self) -> UnitArch {
        let point = self.config.connection_point;
        let width = self.config.branch_width(point);
        let prefix = self.prefix();
        UnitArch {
            branch: Branch::new(
                &format!("{prefix}.branch"),
                point,
                self.config.stem_width,
                width,
                self.config.num_blocks_per_branch,
            ),
            head: Head {
                fuse: None,
                conv: Conv2d::new(format!("{prefix}.head.conv"), width, width, 3, 1),
                classifier: Conv2d::new(format!("{prefix}.head.classifier"), width, self.novel_class_ids.len(), 1, 1),
            },
        }
    }

    /// Pre-sigmoid logits at full resolution plus the trace for backward.
    pub fn forward_train(&self, stem: &Array3<f32>, out_h: usize, out_w: usize) -> Result<(Array3<f32>, UnitTrace)> {
        let arch = self.arch();
        let (features, branch) = arch.branch.forward(&self.params, stem)?;
        let (logits, head) = arch.head.forward(&self.params, &features, out_h, out_w)?;
        Ok((logits, UnitTrace { branch, head }))
    }

    /// Backpropagates into this unit's parameters only; the stem input gets
    /// no gradient.
    pub fn backward(&self, trace: &UnitTrace, dlogits: &Array3<f32>, grads: &mut Grads) -> Result<()> {
        let arch = self.arch();
        let dfeat = arch.head.backward(&self.params, &trace.head, dlogits, grads)?;
        arch.branch.backward(&self.params, &trace.branch, &dfeat, grads, false)?;
        Ok(())
    }

    pub fn probabilities_from_stem(&self, stem: &Array3<f32>, out_h: usize, out_w: usize) -> Result<ProbabilityMap> {
        let (logits, _) = self.forward_train(stem, out_h, out_w)?;
        Ok(logits.mapv(sigmoid))
    }

    /// Parameter shapes of the parallel branch (head excluded).
    pub fn branch_shapes(&self) -> Vec<Vec<usize>> {
        let prefix = format!("{}.branch.", self.prefix());
        let mut shapes: Vec<Vec<usize>> = self
            .params
            .iter()
            .filter(|(n, _)| n.starts_with(&prefix))
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        shapes.sort();
        shapes
    }
}

/// Collapse a `(1, H, W)` map to `(H, W)`.
pub fn single_channel(map: &ProbabilityMap) -> Array2<f32> {
    map.index_axis(Axis(0), 0).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_channels: 3,
            stem_width: 4,
            branch_widths: BranchWidths { p: 6, i: 8, d: 3 },
            num_blocks_per_branch: 1,
            num_base_classes: 6,
            connection_point: ConnectionPoint::D,
        }
    }

    fn image(h: usize, w: usize, seed: usize) -> Array3<f32> {
        Array3::from_shape_fn((3, h, w), |(c, y, x)| ((c * 13 + y * 7 + x * 5 + seed) % 17) as f32 / 17.0)
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        let mut c = tiny();
        c.num_base_classes = 1;
        assert!(matches!(build_model(&c, 0), Err(Error::Config(_))));
        let mut c = tiny();
        c.branch_widths.d = 0;
        assert!(matches!(build_model(&c, 0), Err(Error::Config(_))));
        let mut c = tiny();
        c.num_blocks_per_branch = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn connection_point_defaults_to_d() {
        assert_eq!(ConnectionPoint::default(), ConnectionPoint::D);
        let cfg: ModelConfig = serde_json::from_str(
            r#"{"input_channels":3,"stem_width":4,"branch_widths":{"p":6,"i":8,"d":3},
                "num_blocks_per_branch":1,"num_base_classes":6}"#,
        )
        .unwrap();
        assert_eq!(cfg.connection_point, ConnectionPoint::D);
    }

    #[test]
    fn logits_match_input_size() {
        let model = build_model(&tiny(), 7).unwrap();
        for (h, w) in [(64, 64), (32, 48), (8, 8)] {
            let out = model.forward_base(&image(h, w, 0)).unwrap();
            assert_eq!(out.logits.dim(), (6, h, w));
            assert_eq!(out.tapped.dim(), (3, h / 4, w / 4));
        }
    }

    #[test]
    fn tapped_features_follow_connection_point() {
        for (point, width) in [(ConnectionPoint::P, 6), (ConnectionPoint::I, 8), (ConnectionPoint::D, 3)] {
            let mut cfg = tiny();
            cfg.connection_point = point;
            let out = build_model(&cfg, 1).unwrap().forward_base(&image(16, 16, 0)).unwrap();
            assert_eq!(out.tapped.dim(), (width, 4, 4));
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        let model = build_model(&tiny(), 7).unwrap();
        assert!(matches!(model.forward_base(&image(60, 64, 0)), Err(Error::Dimension(_))));
        assert!(matches!(
            model.forward_base(&Array3::zeros((1, 64, 64))),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let a = build_model(&tiny(), 1).unwrap();
        let b = build_model(&tiny(), 2).unwrap();
        assert_eq!(a.params.num_elements(), b.params.num_elements());
        assert_eq!(a.params.num_elements(), tiny().parameter_count());
        assert_ne!(a.params, b.params);
    }

    #[test]
    fn unit_mirrors_tapped_branch() {
        for point in ConnectionPoint::ALL {
            let mut cfg = tiny();
            cfg.connection_point = point;
            let model = build_model(&cfg, 3).unwrap();
            let unit = build_incremental_unit(&cfg, &[6], &[0, 1, 2, 3, 4, 5], 1, 9).unwrap();
            assert_eq!(unit.branch_shapes(), model.branch_shapes(point), "{point}");
            let probs = forward_incremental(&model, &unit, &image(32, 32, 1)).unwrap();
            assert_eq!(probs.dim(), (1, 32, 32));
            assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn unit_guards() {
        let cfg = tiny();
        assert!(matches!(
            build_incremental_unit(&cfg, &[], &[0, 1], 1, 0),
            Err(Error::Schedule(_))
        ));
        assert!(matches!(
            build_incremental_unit(&cfg, &[3], &[0, 1, 2, 3], 1, 0),
            Err(Error::Schedule(_))
        ));
        let a = build_incremental_unit(&cfg, &[6], &[0], 1, 5).unwrap();
        let b = build_incremental_unit(&cfg, &[6], &[0], 1, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn widen_head_keeps_old_rows() {
        let mut model = build_model(&tiny(), 4).unwrap();
        let before = model.params.get("head.classifier.weight").unwrap().clone();
        model.widen_head(&[6, 7], 11).unwrap();
        let after = model.params.get("head.classifier.weight").unwrap();
        assert_eq!(after.shape(), &[8, 6, 1, 1]);
        for o in 0..6 {
            for c in 0..6 {
                assert_eq!(after[[o, c, 0, 0]], before[[o, c, 0, 0]]);
            }
        }
        assert_eq!(model.class_ids, vec![0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(model.forward_base(&image(16, 16, 0)).unwrap().logits.dim().0, 8);
        assert!(model.widen_head(&[7], 1).is_err());
    }

    /// Full-model weight gradients against central differences in f64 loss.
    #[test]
    fn backbone_gradients_match_finite_differences() {
        let model = build_model(&tiny(), 21).unwrap();
        let img = image(16, 16, 3);
        let (logits, trace) = model.forward_train(&img).unwrap();
        let r = Array3::from_shape_fn(logits.dim(), |(c, y, x)| ((c * 3 + y + 2 * x) % 7) as f32 / 7.0 - 0.5);
        let mut grads = Grads::new();
        model.backward(&trace, &r, &mut grads).unwrap();
        assert_eq!(grads.len(), model.params.len());

        let loss = |m: &SegmentationModel| -> f64 {
            let out = m.forward_base(&img).unwrap();
            out.logits.iter().zip(r.iter()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        for name in ["stem.conv1.weight", "i_branch.block0.conv2.weight", "d_branch.entry.bias", "head.fuse.weight"] {
            let g = grads.get(name).unwrap();
            // probe the entry with the largest gradient to keep the check well conditioned
            let (idx, &analytic) = g
                .indexed_iter()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .unwrap();
            let h = 1e-3f32;
            let mut plus = model.clone();
            plus.params.get_mut(name).unwrap()[idx.clone()] += h;
            let mut minus = model.clone();
            minus.params.get_mut(name).unwrap()[idx.clone()] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h as f64);
            let rel = (fd - analytic as f64).abs() / (analytic.abs() as f64).max(1e-3);
            assert!(rel < 2e-2, "{name}: fd {fd} vs analytic {analytic}");
        }
    }

    #[test]
    fn unit_backward_touches_only_unit_parameters() {
        let cfg = tiny();
        let model = build_model(&cfg, 2).unwrap();
        let unit = build_incremental_unit(&cfg, &[6], &[0, 1, 2, 3, 4, 5], 1, 3).unwrap();
        let img = image(16, 16, 0);
        let stem = model.stem_features(&img).unwrap();
        let (logits, trace) = unit.forward_train(&stem, 16, 16).unwrap();
        let mut grads = Grads::new();
        unit.backward(&trace, &Array3::ones(logits.dim()), &mut grads).unwrap();
        assert_eq!(grads.len(), unit.params.len());
        assert!(grads.iter().all(|(n, _)| n.starts_with("unit1.")));
    }
}
