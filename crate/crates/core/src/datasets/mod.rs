//! Images, domain datasets and everything that produces or samples them.

mod augment;
mod episode;
mod folder;
mod synthetic;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use issnet_nn::{Real, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IssError, Result};

pub use augment::{augment, AugmentPolicy, ColorJitter};
pub use episode::{check_feasible, sample_episode, Episode, QuerySet};
pub use folder::{load_image_folder, write_image_folder, FolderOptions};
pub(crate) use folder::{load_one as load_image, write_png};
pub use synthetic::{
    channel_stats, generate_benchmark, generate_synthetic_domain, BenchmarkSpec, ShapeFamily, StyleParams,
    SyntheticBenchmark, SyntheticDomainSpec,
};

/// A `channels x height x width` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(IssError::Shape(format!("empty image {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(IssError::Shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(IssError::Validation(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { channels, height, width, data })
    }

    /// Clamps every value into `[0, 1]` (non-finite values become 0).
    pub fn from_clamped(channels: usize, height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::new(channels, height, width, data)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Stacks images into a `[batch, c, h, w]` network input.
    pub fn batch<T: Real>(images: &[&ImageTensor]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| IssError::Validation("empty image batch".into()))?;
        let shape = first.shape();
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.shape() != shape {
                return Err(IssError::Shape(format!("batch mixes image shapes {:?} and {:?}", shape, img.shape())));
            }
            data.extend(img.data.iter().map(|&v| T::lit(v as f64)));
        }
        Ok(Tensor::new(vec![images.len(), shape[0], shape[1], shape[2]], data)?)
    }

    /// Splits a `[batch, c, h, w]` network output into clamped images.
    pub fn unbatch<T: Real>(t: &Tensor<T>) -> Result<Vec<ImageTensor>> {
        let (b, c, h, w) = t.dims4()?;
        (0..b)
            .map(|i| {
                let data = t.item(i).iter().map(|v| v.to_f64_lossy() as f32).collect();
                ImageTensor::from_clamped(c, h, w, data)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    LabeledSource,
    UnlabeledSource,
    Target,
}

impl DatasetRole {
    pub fn is_labeled(self) -> bool {
        !matches!(self, DatasetRole::UnlabeledSource)
    }
}

/// A named collection of images from one domain.
///
/// Pixel reads go through [`DomainDataset::image`], which counts accesses so
/// callers can prove a phase never touched a dataset.
#[derive(Debug)]
pub struct DomainDataset {
    name: String,
    role: DatasetRole,
    images: Vec<ImageTensor>,
    labels: Option<Vec<usize>>,
    class_index: BTreeMap<usize, Vec<usize>>,
    class_names: BTreeMap<usize, String>,
    reads: AtomicU64,
}

impl Clone for DomainDataset {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            role: self.role,
            images: self.images.clone(),
            labels: self.labels.clone(),
            class_index: self.class_index.clone(),
            class_names: self.class_names.clone(),
            reads: AtomicU64::new(0),
        }
    }
}

impl DomainDataset {
    pub fn new(
        name: impl Into<String>,
        role: DatasetRole,
        images: Vec<ImageTensor>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let name = name.into();
        if images.is_empty() {
            return Err(IssError::Validation(format!("dataset `{name}` has no images")));
        }
        let shape = images[0].shape();
        if images.iter().any(|i| i.shape() != shape) {
            return Err(IssError::Shape(format!("dataset `{name}` mixes image shapes")));
        }
        match (&labels, role.is_labeled()) {
            (Some(l), true) if l.len() != images.len() => {
                return Err(IssError::Validation(format!(
                    "dataset `{name}`: {} labels for {} images",
                    l.len(),
                    images.len()
                )))
            }
            (None, true) => return Err(IssError::Validation(format!("labeled dataset `{name}` has no labels"))),
            (Some(_), false) => {
                return Err(IssError::Validation(format!("unlabeled dataset `{name}` must not carry labels")))
            }
            _ => {}
        }
        let mut class_index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        if let Some(l) = &labels {
            for (i, &y) in l.iter().enumerate() {
                class_index.entry(y).or_default().push(i);
            }
        }
        let class_names = class_index.keys().map(|&k| (k, k.to_string())).collect();
        Ok(Self { name, role, images, labels, class_index, class_names, reads: AtomicU64::new(0) })
    }

    pub fn with_class_names(mut self, names: BTreeMap<usize, String>) -> Self {
        for (k, v) in names {
            if self.class_names.contains_key(&k) {
                self.class_names.insert(k, v);
            }
        }
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn role(&self) -> DatasetRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.images[0].shape()
    }

    /// Reads one image, recording the access.
    pub fn image(&self, i: usize) -> &ImageTensor {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.images[i]
    }

    /// Number of pixel reads since construction.
    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn class_index(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.class_index
    }

    pub fn class_name(&self, label: usize) -> String {
        self.class_names.get(&label).cloned().unwrap_or_else(|| label.to_string())
    }

    /// Sorted distinct labels.
    pub fn label_space(&self) -> Vec<usize> {
        self.class_index.keys().copied().collect()
    }

    /// SHA-256 over role, shape, labels and pixel bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}{:?}", self.role, self.image_shape()).as_bytes());
        if let Some(l) = &self.labels {
            for y in l {
                h.update((*y as u64).to_le_bytes());
            }
        }
        for img in &self.images {
            for v in &img.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            name: self.name.clone(),
            role: self.role,
            images: self.len(),
            image_shape: self.image_shape(),
            classes: self
                .class_index
                .iter()
                .map(|(&label, members)| ClassEntry { label, name: self.class_name(label), count: members.len() })
                .collect(),
            content_hash: self.content_hash(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub label: usize,
    pub name: String,
    pub count: usize,
}

/// JSON-exportable description of a dataset, for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub role: DatasetRole,
    pub images: usize,
    pub image_shape: [usize; 3],
    pub classes: Vec<ClassEntry>,
    pub content_hash: String,
}
