//! Procedural scenes: textured regions laid over a background, with
//! solid-colour geometric objects on top. Region classes are told apart by
//! texture, shape classes by colour and outline.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetTag, Sample, IGNORE_INDEX, NOT_NOVEL};
use crate::error::{Error, Result};

type Rgb = [f32; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "texture", rename_all = "snake_case")]
pub enum Texture {
    Noise { color: Rgb, sigma: f32 },
    Stripes { a: Rgb, b: Rgb, period: usize },
    Checker { a: Rgb, b: Rgb, cell: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassKind {
    Background { texture: Texture },
    Region { texture: Texture },
    Shape { shape: ShapeKind, color: Rgb },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneClass {
    pub id: u8,
    pub name: String,
    pub kind: ClassKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<SceneClass>,
    /// Inclusive range of textured regions per scene.
    pub regions_per_scene: (usize, usize),
    /// Inclusive range of shape objects per scene.
    pub objects_per_scene: (usize, usize),
    /// Inclusive object radius range in pixels.
    pub object_radius: (usize, usize),
    pub background_id: u8,
    pub seed: u64,
}

impl SceneSpec {
    /// Eight-class benchmark: background, three textured regions, then
    /// square, ring, disk and triangle. The lowest six ids are meant as base
    /// classes, so the two solid shapes arrive incrementally.
    pub fn benchmark(height: usize, width: usize, seed: u64) -> Self {
        let class = |id: u8, name: &str, kind: ClassKind| SceneClass {
            id,
            name: name.to_string(),
            kind,
        };
        let classes = vec![
            class(
                0,
                "background",
                ClassKind::Background {
                    texture: Texture::Noise {
                        color: [0.45, 0.45, 0.48],
                        sigma: 0.03,
                    },
                },
            ),
            class(
                1,
                "grass",
                ClassKind::Region {
                    texture: Texture::Noise {
                        color: [0.30, 0.55, 0.25],
                        sigma: 0.10,
                    },
                },
            ),
            class(
                2,
                "water",
                ClassKind::Region {
                    texture: Texture::Stripes {
                        a: [0.30, 0.35, 0.70],
                        b: [0.50, 0.55, 0.85],
                        period: 4,
                    },
                },
            ),
            class(
                3,
                "brick",
                ClassKind::Region {
                    texture: Texture::Checker {
                        a: [0.62, 0.42, 0.30],
                        b: [0.45, 0.28, 0.20],
                        cell: 3,
                    },
                },
            ),
            class(
                4,
                "square",
                ClassKind::Shape {
                    shape: ShapeKind::Square,
                    color: [0.90, 0.80, 0.20],
                },
            ),
            class(
                5,
                "ring",
                ClassKind::Shape {
                    shape: ShapeKind::Ring,
                    color: [0.20, 0.80, 0.85],
                },
            ),
            class(
                6,
                "disk",
                ClassKind::Shape {
                    shape: ShapeKind::Disk,
                    color: [0.88, 0.20, 0.20],
                },
            ),
            class(
                7,
                "triangle",
                ClassKind::Shape {
                    shape: ShapeKind::Triangle,
                    color: [0.80, 0.30, 0.85],
                },
            ),
        ];
        Self {
            height,
            width,
            classes,
            regions_per_scene: (1, 2),
            objects_per_scene: (1, 4),
            object_radius: (6, 12),
            background_id: 0,
            seed,
        }
    }

    pub fn universe(&self) -> Vec<u8> {
        let mut ids: Vec<u8> = self.classes.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene size must be non-zero".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &self.classes {
            if c.id == IGNORE_INDEX || c.id == NOT_NOVEL {
                return Err(Error::Config(format!(
                    "class `{}` uses reserved id {}",
                    c.name, c.id
                )));
            }
            if !seen.insert(c.id) {
                return Err(Error::Config(format!("class id {} defined twice", c.id)));
            }
        }
        match self.classes.iter().find(|c| c.id == self.background_id) {
            Some(SceneClass {
                kind: ClassKind::Background { .. },
                ..
            }) => {}
            _ => {
                return Err(Error::Config(format!(
                    "background id {} must name a background class",
                    self.background_id
                )))
            }
        }
        let (lo, hi) = self.object_radius;
        if lo == 0 || lo > hi {
            return Err(Error::Config("object radius range is empty".into()));
        }
        if self.regions_per_scene.0 > self.regions_per_scene.1 || self.objects_per_scene.0 > self.objects_per_scene.1 {
            return Err(Error::Config("per-scene count ranges must be ordered".into()));
        }
        Ok(())
    }

    fn of_kind(&self, pick: impl Fn(&ClassKind) -> bool) -> Vec<&SceneClass> {
        self.classes.iter().filter(|c| pick(&c.kind)).collect()
    }
}

/// Derive an independent stream per image so scenes can be generated in any order.
fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn texture_at(texture: &Texture, y: usize, x: usize, noise: f32) -> Rgb {
    let base = match texture {
        Texture::Noise { color, sigma } => {
            return color.map(|c| c + noise * sigma);
        }
        Texture::Stripes { a, b, period } => {
            if (y / (*period).max(1)) % 2 == 0 {
                *a
            } else {
                *b
            }
        }
        Texture::Checker { a, b, cell } => {
            let cell = (*cell).max(1);
            if (y / cell + x / cell) % 2 == 0 {
                *a
            } else {
                *b
            }
        }
    };
    base.map(|c| c + noise * 0.03)
}

fn inside(shape: ShapeKind, dy: f32, dx: f32, r: f32) -> bool {
    match shape {
        ShapeKind::Disk => dy * dy + dx * dx <= r * r,
        ShapeKind::Square => dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85,
        ShapeKind::Ring => {
            let d2 = dy * dy + dx * dx;
            let inner = (r - 4.0).max(1.0);
            d2 <= r * r && d2 >= inner * inner
        }
        // apex up, base at dy = r/2
        ShapeKind::Triangle => {
            let top = -r;
            let bottom = r * 0.6;
            if dy < top || dy > bottom {
                return false;
            }
            let half = (dy - top) / (bottom - top) * r;
            dx.abs() <= half
        }
    }
}

fn render_scene(spec: &SceneSpec, index: usize) -> Sample {
    let (h, w) = (spec.height, spec.width);
    let mut rng = scene_rng(spec.seed, index);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");

    let background = spec
        .classes
        .iter()
        .find(|c| c.id == spec.background_id)
        .expect("validated");
    let mut labels = Array2::from_elem((h, w), spec.background_id);
    let mut texture_of = vec![background; h * w];

    let regions = spec.of_kind(|k| matches!(k, ClassKind::Region { .. }));
    if !regions.is_empty() {
        let n = rng.gen_range(spec.regions_per_scene.0..=spec.regions_per_scene.1);
        for _ in 0..n {
            let class = regions[rng.gen_range(0..regions.len())];
            let rh = rng.gen_range(h * 2 / 5..=h * 7 / 10).max(1);
            let rw = rng.gen_range(w * 2 / 5..=w * 7 / 10).max(1);
            let y0 = rng.gen_range(0..=h - rh.min(h));
            let x0 = rng.gen_range(0..=w - rw.min(w));
            for y in y0..(y0 + rh).min(h) {
                for x in x0..(x0 + rw).min(w) {
                    labels[[y, x]] = class.id;
                    texture_of[y * w + x] = class;
                }
            }
        }
    }

    let shapes = spec.of_kind(|k| matches!(k, ClassKind::Shape { .. }));
    if !shapes.is_empty() {
        let n = rng.gen_range(spec.objects_per_scene.0..=spec.objects_per_scene.1);
        for _ in 0..n {
            let class = shapes[rng.gen_range(0..shapes.len())];
            let ClassKind::Shape { shape, .. } = class.kind else {
                unreachable!()
            };
            let r = rng.gen_range(spec.object_radius.0..=spec.object_radius.1) as f32;
            let cy = rng.gen_range(0..h) as f32;
            let cx = rng.gen_range(0..w) as f32;
            for y in 0..h {
                for x in 0..w {
                    if inside(shape, y as f32 - cy, x as f32 - cx, r) {
                        labels[[y, x]] = class.id;
                        texture_of[y * w + x] = class;
                    }
                }
            }
        }
    }

    let mut image = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let noise = normal.sample(&mut rng);
            let rgb = match &texture_of[y * w + x].kind {
                ClassKind::Background { texture } | ClassKind::Region { texture } => texture_at(texture, y, x, noise),
                ClassKind::Shape { color, .. } => color.map(|c| c + noise * 0.05),
            };
            for (c, v) in rgb.iter().enumerate() {
                // quantised to 8 bits so exported PNGs reload bit-identically
                image[[c, y, x]] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }

    Sample {
        id: format!("scene_{index:05}"),
        image,
        labels,
    }
}

/// `count` scenes, numbered from `first_index`; deterministic in
/// `(spec.seed, index)`.
pub fn generate_dataset(spec: &SceneSpec, first_index: usize, count: usize) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Config("dataset count must be at least 1".into()));
    }
    let samples = (first_index..first_index + count)
        .map(|i| render_scene(spec, i))
        .collect();
    Ok(Dataset::new(DatasetTag::Full, samples))
}
