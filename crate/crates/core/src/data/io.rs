//! Directory layout: `images/<stem>.<ext>` paired with `labels/<stem>.png`,
//! labels stored as 8-bit single-channel raw class ids.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use super::{Dataset, DatasetTag, Sample, IGNORE_INDEX};
use crate::error::{Error, Result};

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if out.insert(stem.to_string(), path.clone()).is_some() {
                return Err(Error::Ingestion(format!("stem `{stem}` appears twice in {}", dir.display())));
            }
        }
    }
    Ok(out)
}

/// Load every image/label pair, validating ids against `universe`
/// (the ignore id is always accepted).
pub fn load_labelmap_dataset(dir: &Path, universe: &[u8]) -> Result<Dataset> {
    let images = stems(&dir.join("images"))?;
    let labels = stems(&dir.join("labels"))?;
    let unpaired: Vec<&String> = images
        .keys()
        .filter(|k| !labels.contains_key(*k))
        .chain(labels.keys().filter(|k| !images.contains_key(*k)))
        .collect();
    if !unpaired.is_empty() {
        let names: Vec<&str> = unpaired.iter().map(|s| s.as_str()).collect();
        return Err(Error::Ingestion(format!("unpaired files: {}", names.join(", "))));
    }
    let allowed: BTreeSet<u8> = universe.iter().copied().chain([IGNORE_INDEX]).collect();
    let mut samples = Vec::with_capacity(images.len());
    for (stem, image_path) in &images {
        let label_path = &labels[stem];
        let rgb = image::open(image_path)
            .map_err(|e| Error::Image {
                path: image_path.clone(),
                source: e,
            })?
            .to_rgb8();
        let gray = image::open(label_path)
            .map_err(|e| Error::Image {
                path: label_path.clone(),
                source: e,
            })?
            .to_luma8();
        if rgb.dimensions() != gray.dimensions() {
            return Err(Error::Ingestion(format!(
                "`{stem}`: image is {:?} but labels are {:?}",
                rgb.dimensions(),
                gray.dimensions()
            )));
        }
        let (w, h) = rgb.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut labels = Array2::<u8>::zeros((h, w));
        for (x, y, Luma([id])) in gray.enumerate_pixels() {
            if !allowed.contains(id) {
                return Err(Error::Data(format!(
                    "`{stem}` pixel ({y},{x}) has id {id} outside the class universe"
                )));
            }
            labels[[y as usize, x as usize]] = *id;
        }
        let mut image = Array3::<f32>::zeros((3, h, w));
        for (x, y, Rgb(px)) in rgb.enumerate_pixels() {
            for c in 0..3 {
                image[[c, y as usize, x as usize]] = px[c] as f32 / 255.0;
            }
        }
        samples.push(Sample {
            id: stem.clone(),
            image,
            labels,
        });
    }
    Ok(Dataset::new(DatasetTag::Full, samples))
}

pub fn image_to_rgb8(image: &Array3<f32>) -> RgbImage {
    let (_, h, w) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn labels_to_gray8(labels: &Array2<u8>) -> GrayImage {
    let (h, w) = labels.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([labels[[y as usize, x as usize]]]))
}

/// Write a dataset in the layout [`load_labelmap_dataset`] reads.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    for d in [&images, &labels] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in &dataset.samples {
        let ip = images.join(format!("{}.png", s.id));
        image_to_rgb8(&s.image)
            .save(&ip)
            .map_err(|e| Error::Image { path: ip, source: e })?;
        let lp = labels.join(format!("{}.png", s.id));
        labels_to_gray8(&s.labels)
            .save(&lp)
            .map_err(|e| Error::Image { path: lp, source: e })?;
    }
    Ok(())
}
