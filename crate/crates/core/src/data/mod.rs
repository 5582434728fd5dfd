//! Multi-domain datasets: synthetic generation, on-disk layout
//! `<root>/<domain>/{images,masks}/*.png`, a TOML manifest declaring domain
//! roles and split parameters, and preprocessing.

mod io;
mod preprocess;
mod synth;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::SegmentationMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use io::{list_pngs, quantize_8bit, read_image_png, read_mask_png, stem, write_image_png, write_mask_png, write_overlay_png};
pub use preprocess::{min_max_normalize, preprocess, resize_image, resize_mask};
pub use synth::{
    apply_style, clean_rendering, gaussian_blur, generate_synthetic_domain, DomainStyle, ShapeFamily,
    CLEAN_BACKGROUND, CLEAN_FOREGROUND,
};

pub const MANIFEST_FILE: &str = "manifest.toml";

/// One image with its ground-truth mask; the image is `(H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample<T: Scalar> {
    pub id: String,
    pub domain: String,
    pub image: Tensor<T>,
    pub mask: SegmentationMask,
}

impl<T: Scalar> DomainSample<T> {
    /// Resize the pair to `size`, optionally min-max normalising the image.
    pub fn preprocessed(&self, size: (usize, usize), normalize: bool) -> Self {
        Self {
            id: self.id.clone(),
            domain: self.domain.clone(),
            image: preprocess(&self.image, size, normalize),
            mask: resize_mask(&self.mask, size),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainRole {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub name: String,
    pub role: DomainRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub domain: String,
}

/// Paths in records are relative to `root`, which is itself relative to the
/// manifest file when not absolute. Without records every domain directory
/// is scanned and images are paired with the mask of the same file name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default = "default_root")]
    pub root: PathBuf,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    pub domains: Vec<DomainEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub records: Vec<RecordEntry>,
}

fn default_root() -> PathBuf {
    PathBuf::from(".")
}

fn default_train_fraction() -> f64 {
    0.9
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut m: Self =
            toml::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        if m.root.is_relative() {
            m.root = path.parent().unwrap_or(Path::new(".")).join(&m.root);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let sources = self.domains.iter().filter(|d| d.role == DomainRole::Source).count();
        if sources != 1 {
            return Err(Error::Config(format!("manifest must declare exactly one source domain, found {sources}")));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Config(format!("train_fraction must lie in [0, 1], got {}", self.train_fraction)));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if self.domains[..i].iter().any(|e| e.name == d.name) {
                return Err(Error::Config(format!("domain `{}` declared twice", d.name)));
            }
        }
        for r in &self.records {
            if !self.domains.iter().any(|d| d.name == r.domain) {
                return Err(Error::Config(format!("record {} names unknown domain `{}`", r.image.display(), r.domain)));
            }
        }
        Ok(())
    }

    pub fn source(&self) -> &str {
        &self.domains.iter().find(|d| d.role == DomainRole::Source).expect("validated manifest").name
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.domains.iter().filter(|d| d.role == DomainRole::Target).map(|d| d.name.as_str())
    }

    fn resolved_records(&self) -> Result<Vec<RecordEntry>> {
        if !self.records.is_empty() {
            return Ok(self
                .records
                .iter()
                .map(|r| RecordEntry {
                    image: self.root.join(&r.image),
                    mask: self.root.join(&r.mask),
                    domain: r.domain.clone(),
                })
                .collect());
        }
        let mut out = Vec::new();
        let mut problems = Vec::new();
        for d in &self.domains {
            let dir = self.root.join(&d.name);
            let images = dir.join("images");
            match list_pngs(&images) {
                Ok(list) => out.extend(list.into_iter().map(|image| RecordEntry {
                    mask: dir.join("masks").join(image.file_name().expect("png file name")),
                    image,
                    domain: d.name.clone(),
                })),
                Err(e) => problems.push(format!("{}: {e}", images.display())),
            }
        }
        if problems.is_empty() {
            Ok(out)
        } else {
            Err(Error::Ingestion(problems))
        }
    }
}

/// Samples of every declared domain, in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset<T: Scalar> {
    pub manifest: DatasetManifest,
    pub samples: Vec<DomainSample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn domain(&self, name: &str) -> Vec<DomainSample<T>> {
        self.samples.iter().filter(|s| s.domain == name).cloned().collect()
    }

    /// Deterministic split of one domain using the manifest's fraction and seed.
    pub fn split(&self, name: &str) -> (Vec<DomainSample<T>>, Vec<DomainSample<T>>) {
        split_source(self.domain(name), self.manifest.train_fraction, self.manifest.split_seed)
    }
}

/// Read every record; all missing or malformed files are reported together.
pub fn load_dataset<T: Scalar>(manifest: &DatasetManifest) -> Result<Dataset<T>> {
    manifest.validate()?;
    let records = manifest.resolved_records()?;
    let mut samples = Vec::with_capacity(records.len());
    let mut problems = Vec::new();
    for r in &records {
        match (read_image_png::<T>(&r.image), read_mask_png(&r.mask)) {
            (Ok(image), Ok(mask)) => {
                if image.shape() != [mask.height(), mask.width()] {
                    problems.push(format!(
                        "{}: image is {:?} but mask is {:?}",
                        r.image.display(),
                        image.shape(),
                        mask.dims()
                    ));
                } else {
                    samples.push(DomainSample { id: stem(&r.image), domain: r.domain.clone(), image, mask });
                }
            }
            (image, mask) => {
                if let Err(e) = image {
                    problems.push(format!("{}: {e}", r.image.display()));
                }
                if let Err(e) = mask {
                    problems.push(format!("{}: {e}", r.mask.display()));
                }
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Ingestion(problems));
    }
    Ok(Dataset { manifest: manifest.clone(), samples })
}

/// Shuffle with a seeded generator and cut at `floor(n * train_fraction)`.
pub fn split_source<S: Clone>(samples: Vec<S>, train_fraction: f64, seed: u64) -> (Vec<S>, Vec<S>) {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((samples.len() as f64 * train_fraction.clamp(0.0, 1.0)) + 1e-9).floor() as usize;
    let n_train = n_train.min(samples.len());
    if n_train == samples.len() {
        log::warn!("train fraction {train_fraction} leaves the test split empty");
    }
    let train = order[..n_train].iter().map(|&i| samples[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| samples[i].clone()).collect();
    (train, test)
}

/// Write samples under `<root>/<domain>/{images,masks}/<id>.png`.
pub fn write_domain<T: Scalar>(root: &Path, samples: &[DomainSample<T>]) -> Result<()> {
    for s in samples {
        let dir = root.join(&s.domain);
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(dir.join("masks"))?;
        write_image_png(&dir.join("images").join(format!("{}.png", s.id)), &s.image)?;
        write_mask_png(&dir.join("masks").join(format!("{}.png", s.id)), &s.mask)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        let (tr, te) = split_source((0..20).collect::<Vec<_>>(), 0.9, 1);
        assert_eq!((tr.len(), te.len()), (18, 2));
        let (tr, te) = split_source((0..10).collect::<Vec<_>>(), 1.0, 1);
        assert_eq!((tr.len(), te.len()), (10, 0));
        let (tr, te) = split_source((0..80).collect::<Vec<_>>(), 0.8, 3);
        assert_eq!((tr.len(), te.len()), (64, 16));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let items: Vec<u32> = (0..37).collect();
        let a = split_source(items.clone(), 0.7, 5);
        assert_eq!(a, split_source(items.clone(), 0.7, 5));
        let mut all: Vec<u32> = a.0.iter().chain(&a.1).copied().collect();
        all.sort();
        assert_eq!(all, items);
    }

    #[test]
    fn manifest_needs_one_source() {
        let m = DatasetManifest {
            root: ".".into(),
            train_fraction: 0.9,
            split_seed: 0,
            domains: vec![DomainEntry { name: "a".into(), role: DomainRole::Target }],
            records: vec![],
        };
        assert!(matches!(m.validate(), Err(Error::Config(_))));
    }
}
