//! On-disk datasets, class splits, and episode sampling.
//!
//! Layout: `root/<class>/images/<name>.png` paired with
//! `root/<class>/masks/<name>.png`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng as _;

use super::io;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    /// `1×H×W`
    pub image: Tensor,
    /// `H×W`
    pub mask: Tensor,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub classes: BTreeMap<String, Vec<Sample>>,
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::Unreadable {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

/// Loads and validates every image/mask pair under `root`.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let entries = fs::read_dir(root).map_err(|e| Error::Unreadable {
        path: root.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut class_dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("images").is_dir())
        .collect();
    class_dirs.sort();
    let mut classes = BTreeMap::new();
    for dir in class_dirs {
        let class = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut samples = Vec::new();
        for name in png_names(&dir.join("images"))? {
            let image_path = dir.join("images").join(&name);
            let mask_path = dir.join("masks").join(&name);
            if !mask_path.is_file() {
                return Err(Error::MissingMask(image_path));
            }
            let image_dims = io::dimensions(&image_path)?;
            let mask_dims = io::dimensions(&mask_path)?;
            if image_dims != mask_dims {
                return Err(Error::DimensionMismatch {
                    image: image_path,
                    mask: mask_path,
                    image_dims,
                    mask_dims,
                });
            }
            let image = io::read_image(&image_path)?;
            let image = image.reshape(&[1, image.rows(), image.cols()])?;
            let mask = io::read_mask(&mask_path)?;
            samples.push(Sample {
                name: name.trim_end_matches(".png").to_string(),
                image_path,
                mask_path,
                image,
                mask,
            });
        }
        if samples.is_empty() {
            return Err(Error::EmptyDataset(dir));
        }
        classes.insert(class, samples);
    }
    if classes.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        classes,
    })
}

impl Dataset {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Side length shared by every image, or an error if sizes differ.
    pub fn image_size(&self) -> Result<usize> {
        let mut sizes = self
            .classes
            .values()
            .flatten()
            .map(|s| (s.mask.rows(), s.mask.cols()));
        let first = sizes.next().ok_or_else(|| Error::EmptyDataset(self.root.clone()))?;
        if first.0 != first.1 || sizes.any(|s| s != first) {
            return Err(Error::InvalidArgument(format!(
                "dataset images must all be the same square size, first is {}x{}",
                first.0, first.1
            )));
        }
        Ok(first.0)
    }
}

/// Disjoint train and test class sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl SplitSpec {
    pub fn new(
        train: impl IntoIterator<Item = String>,
        test: impl IntoIterator<Item = String>,
    ) -> Result<Self> {
        let train: BTreeSet<String> = train.into_iter().collect();
        let test: BTreeSet<String> = test.into_iter().collect();
        if let Some(c) = train.intersection(&test).next() {
            return Err(Error::SplitViolation(format!(
                "class `{c}` is in both train and test"
            )));
        }
        Ok(Self { train, test })
    }

    /// Parses `train:<class>` / `test:<class>` lines; blank lines and `#`
    /// comments are skipped.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| Error::Config {
                path: origin.to_string(),
                line: i + 1,
                reason,
            };
            let (kind, class) = line
                .split_once(':')
                .ok_or_else(|| err(format!("expected `train:<class>` or `test:<class>`, got `{line}`")))?;
            let class = class.trim();
            if class.is_empty() {
                return Err(err("empty class name".into()));
            }
            match kind.trim() {
                "train" => train.push(class.to_string()),
                "test" => test.push(class.to_string()),
                other => return Err(err(format!("unknown split `{other}`"))),
            }
        }
        Self::new(train, test)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Unreadable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.train {
            s.push_str(&format!("train:{c}\n"));
        }
        for c in &self.test {
            s.push_str(&format!("test:{c}\n"));
        }
        s
    }

    /// Every named class must exist in the dataset.
    pub fn check(&self, ds: &Dataset) -> Result<()> {
        for c in self.train.iter().chain(&self.test) {
            if !ds.classes.contains_key(c) {
                return Err(Error::InvalidArgument(format!(
                    "split names class `{c}` not present in {}",
                    ds.root.display()
                )));
            }
        }
        Ok(())
    }
}

/// One support pair and one query from the same class.
#[derive(Clone, Debug)]
pub struct Episode {
    pub class: String,
    pub support_image: Tensor,
    pub support_mask: Tensor,
    pub query_image: Tensor,
    /// Ground truth for scoring; never passed to the model.
    pub query_gt: Tensor,
    pub support_index: usize,
    pub query_index: usize,
}

/// Uniform class from `classes`, then two distinct samples of it.
pub fn sample_episode(ds: &Dataset, classes: &BTreeSet<String>, rng: &mut Rng) -> Result<Episode> {
    if classes.is_empty() {
        return Err(Error::InvalidArgument("no classes to sample from".into()));
    }
    let names: Vec<&String> = classes.iter().collect();
    let class = names[rng.random_range(0..names.len())];
    let samples = ds
        .classes
        .get(class)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown class `{class}`")))?;
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            class: class.clone(),
            count: samples.len(),
        });
    }
    let pick = sample(rng, samples.len(), 2);
    let (si, qi) = (pick.index(0), pick.index(1));
    Ok(Episode {
        class: class.clone(),
        support_image: samples[si].image.clone(),
        support_mask: samples[si].mask.clone(),
        query_image: samples[qi].image.clone(),
        query_gt: samples[qi].mask.clone(),
        support_index: si,
        query_index: qi,
    })
}
