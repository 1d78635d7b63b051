//! Labeled image datasets: directory ingestion, synthetic generation,
//! stratified splits, image files and model persistence.

pub mod pnm;
mod synthetic;

pub use synthetic::{generate_synthetic, SyntheticConfig, SHAPE_NAMES};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_builder::Image;
use crate::model::{decode_model, encode_model, ModelParams};
use crate::training::STREAM_SPLIT;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    /// File path or synthetic id.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub counts: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl DatasetManifest {
    pub fn from_samples(class_names: Vec<String>, samples: &[Sample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidInput("dataset is empty".into()))?;
        let mut counts = vec![0; class_names.len()];
        for s in samples {
            *counts.get_mut(s.label).ok_or_else(|| {
                Error::InvalidInput(format!("{} has label {} outside {} classes", s.source, s.label, class_names.len()))
            })? += 1;
        }
        Ok(DatasetManifest {
            class_names,
            counts,
            height: first.image.height(),
            width: first.image.width(),
        })
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "png"))
}

/// Reads an 8-bit grayscale PGM (P5) or PNG; colour PNGs are converted to luma.
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decode_err = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.starts_with(b"P") {
        return pnm::decode_pgm(&bytes).map_err(decode_err);
    }
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| decode_err(e.to_string()))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Image::from_u8(h as usize, w as usize, img.as_raw()).map_err(|e| decode_err(e.to_string()))
}

/// Writes a grayscale image; `.png` gets PNG, anything else binary PGM.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    if has_png_extension(path) {
        let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, img.to_u8())
            .expect("buffer matches dims");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| image_write_error(path, e))
    } else {
        fs::write(path, pnm::encode_pgm(img)).map_err(|e| Error::io(path, e))
    }
}

/// Writes interleaved RGB bytes; `.png` gets PNG, anything else binary PPM.
pub fn write_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if has_png_extension(path) {
        let buf = image::RgbImage::from_raw(width as u32, height as u32, rgb.to_vec())
            .ok_or_else(|| Error::InvalidInput("RGB buffer does not match dims".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| image_write_error(path, e))
    } else {
        fs::write(path, pnm::encode_ppm(width, height, rgb)?).map_err(|e| Error::io(path, e))
    }
}

fn has_png_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn image_write_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    paths.sort();
    Ok(paths)
}

/// Loads `root/<class>/*.{pgm,png}`.
///
/// Classes are the subdirectories in lexicographic order; samples are
/// ordered by class, then path.
pub fn load_dataset(root: &Path) -> Result<(Vec<Sample>, DatasetManifest)> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} contains no class directories",
            root.display()
        )));
    }
    let mut class_names = Vec::with_capacity(class_dirs.len());
    let mut samples = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_image_file(p)).collect();
        if files.is_empty() {
            return Err(Error::InvalidInput(format!("class directory {} has no images", dir.display())));
        }
        for path in files {
            samples.push(Sample {
                image: read_image(&path)?,
                label,
                source: path.display().to_string(),
            });
        }
        class_names.push(name);
    }
    let (h, w) = (samples[0].image.height(), samples[0].image.width());
    let offenders: Vec<String> = samples
        .iter()
        .filter(|s| (s.image.height(), s.image.width()) != (h, w))
        .map(|s| format!("{} ({}x{})", s.source, s.image.height(), s.image.width()))
        .collect();
    if !offenders.is_empty() {
        return Err(Error::Integrity(format!(
            "images must share dims {h}x{w} (from {}); mismatched: {}",
            samples[0].source,
            offenders.join(", ")
        )));
    }
    let manifest = DatasetManifest::from_samples(class_names, &samples)?;
    Ok((samples, manifest))
}

/// Writes samples as `root/<class>/<index>.pgm`.
pub fn export_dataset(root: &Path, samples: &[Sample], class_names: &[String]) -> Result<()> {
    for name in class_names {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut next = vec![0usize; class_names.len()];
    for s in samples {
        let path = root.join(&class_names[s.label]).join(format!("{:05}.pgm", next[s.label]));
        next[s.label] += 1;
        write_image(&path, &s.image)?;
    }
    Ok(())
}

/// Stratified shuffle split: each class sends `round(n · fraction)` samples
/// (clamped to `1..n-1`) to the test side.
pub fn split(samples: &[Sample], test_fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "test fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let num_classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_SPLIT);
    let mut is_test = vec![false; samples.len()];
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Stratification(format!(
                "class {class} has {} sample(s); at least 2 are needed",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n_test = ((members.len() as f64 * test_fraction).round() as usize).clamp(1, members.len() - 1);
        for &i in &members[..n_test] {
            is_test[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, t) in samples.iter().zip(is_test) {
        if t {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((train, test))
}

pub fn save_model(model: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    decode_model(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Accuracy of a nearest-class-mean classifier on raw pixels.
pub fn nearest_centroid_accuracy(train: &[Sample], test: &[Sample]) -> Result<f64> {
    let first = train
        .first()
        .ok_or_else(|| Error::InvalidInput("empty training set".into()))?;
    if test.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let dim = first.image.values().len();
    let k = train.iter().chain(test).map(|s| s.label + 1).max().unwrap();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for s in train {
        counts[s.label] += 1;
        for (a, v) in sums[s.label].iter_mut().zip(s.image.values()) {
            *a += v;
        }
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(sum, &n)| (n > 0).then(|| sum.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let correct = test
        .iter()
        .filter(|s| {
            let mut best = (f64::INFINITY, 0);
            for (c, centroid) in centroids.iter().enumerate() {
                if let Some(centroid) = centroid {
                    let d: f64 = centroid.iter().zip(s.image.values()).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.0 {
                        best = (d, c);
                    }
                }
            }
            best.1 == s.label
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}
