//! Dataset discovery, stratified splitting, batch assembly and synthetic data.
//!
//! On-disk layout is `root/<class>/image/*.png` with masks of the same file name
//! under `root/<class>/label/`.

mod io;
mod prefetch;
mod synth;

pub use io::{load_batch, load_mask, load_rgb, save_mask, save_rgb, DiskSource};
pub use prefetch::prefetch_batches;
pub use synth::{synth_dataset, write_dataset, Ellipse, MemorySource, SynthItem, SynthSet, SYNTH_CLASS};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub class_name: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    /// Paired samples per class, sorted by file name.
    pub classes: BTreeMap<String, Vec<Sample>>,
    /// Images without a matching label file.
    pub dropped: Vec<PathBuf>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keeps only `class`.
    pub fn only(mut self, class: &str) -> Result<Self> {
        let samples = self
            .classes
            .remove(class)
            .ok_or_else(|| Error::Dataset(format!("class '{class}' not found")))?;
        self.classes = BTreeMap::from([(class.to_string(), samples)]);
        Ok(self)
    }
}

fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && is_image {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

fn dimensions(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|e| Error::image(path, e))
}

/// Pairs every image with the label of the same file name.
///
/// Images with no label land in [`DatasetIndex::dropped`]. A class with no images
/// is kept as an empty entry and logged.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();

    let mut index = DatasetIndex::default();
    for dir in class_dirs {
        let class = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let (image_dir, label_dir) = (dir.join("image"), dir.join("label"));
        for d in [&image_dir, &label_dir] {
            if !d.is_dir() {
                return Err(Error::Dataset(format!("missing directory {}", d.display())));
            }
        }
        let images = image_files(&image_dir)?;
        let labels = image_files(&label_dir)?;
        if images.is_empty() {
            warn!("class '{class}' has no images in {}", image_dir.display());
        }
        let mut samples = Vec::new();
        for (name, image_path) in images {
            let Some(mask_path) = labels.get(&name) else {
                warn!("no label for {}; dropping it", image_path.display());
                index.dropped.push(image_path);
                continue;
            };
            let (di, dm) = (dimensions(&image_path)?, dimensions(mask_path)?);
            if di != dm {
                return Err(Error::Dataset(format!(
                    "size mismatch: {} is {}x{} but {} is {}x{}",
                    image_path.display(),
                    di.0,
                    di.1,
                    mask_path.display(),
                    dm.0,
                    dm.1
                )));
            }
            samples.push(Sample {
                image_path,
                mask_path: mask_path.clone(),
                class_name: class.clone(),
            });
        }
        index.classes.insert(class, samples);
    }
    Ok(index)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Stratified split: per class, a seeded shuffle then `floor(f · n)` samples to train.
pub fn split(index: &DatasetIndex, spec: SplitSpec) -> (Vec<Sample>, Vec<Sample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for samples in index.classes.values() {
        let mut order: Vec<&Sample> = samples.iter().collect();
        order.shuffle(&mut rng);
        let k = (spec.train_fraction * samples.len() as f64).floor() as usize;
        train.extend(order[..k].iter().map(|s| (*s).clone()));
        test.extend(order[k..].iter().map(|s| (*s).clone()));
    }
    (train, test)
}

/// Anything that can hand out `(images, masks)` batches in a fixed order.
pub trait BatchSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Class label of sample `i`.
    fn class_of(&self, i: usize) -> &str;

    /// Samples `start..min(start + size, len)`: images `(b, 3, S, S)` in `[0, 1]` and
    /// binary masks `(b, 1, S, S)`.
    fn batch(&self, start: usize, size: usize) -> Result<(Tensor4<f32>, Tensor4<f32>)>;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(class: &str, i: usize) -> Sample {
        Sample {
            image_path: PathBuf::from(format!("{class}/image/{i}.png")),
            mask_path: PathBuf::from(format!("{class}/label/{i}.png")),
            class_name: class.into(),
        }
    }

    fn index(sizes: &[(&str, usize)]) -> DatasetIndex {
        DatasetIndex {
            classes: sizes
                .iter()
                .map(|&(c, n)| (c.to_string(), (0..n).map(|i| sample(c, i)).collect()))
                .collect(),
            dropped: vec![],
        }
    }

    #[test]
    fn class_of_ten_splits_eight_two() {
        let (train, test) = split(&index(&[("polyp", 10)]), SplitSpec::default());
        assert_eq!((train.len(), test.len()), (8, 2));
    }

    #[test]
    fn split_is_seeded() {
        let idx = index(&[("a", 30), ("b", 7)]);
        let s = SplitSpec::default();
        assert_eq!(split(&idx, s), split(&idx, s));
        assert_ne!(split(&idx, s).0, split(&idx, SplitSpec { seed: 1, ..s }).0);
    }

    #[test]
    fn split_is_stratified() {
        let (train, _) = split(&index(&[("a", 5), ("b", 20)]), SplitSpec::default());
        assert_eq!(train.iter().filter(|s| s.class_name == "a").count(), 4);
        assert_eq!(train.iter().filter(|s| s.class_name == "b").count(), 16);
    }
}
