use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::StyleNet;
use crate::datasets::{DatasetRole, DomainDataset, FolderOptions, ImageTensor};
use crate::error::{IssError, Result};
use crate::seed::rng_for;

/// How content images are paired with style images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingPolicy {
    /// Each content image is stylised once per style domain, with a
    /// uniformly drawn image of that domain.
    OnePerDomain,
    /// Each content image is stylised once, with a uniformly drawn domain.
    RandomDomain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub content_index: usize,
    pub style_domain: String,
    pub style_index: usize,
}

/// The stylised, pseudo-labeled set `D^al`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledSet {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

#[derive(Serialize, Deserialize)]
struct ManifestItem {
    file: String,
    label: usize,
    #[serde(flatten)]
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    items: Vec<ManifestItem>,
}

impl PseudoLabeledSet {
    pub fn empty() -> Self {
        Self { images: Vec::new(), labels: Vec::new(), provenance: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn to_dataset(&self, name: &str) -> Result<DomainDataset> {
        DomainDataset::new(name, DatasetRole::LabeledSource, self.images.clone(), Some(self.labels.clone()))
    }

    /// Writes `images/NNNNNN.png` plus `manifest.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| IssError::io(&img_dir, e))?;
        let mut items = Vec::with_capacity(self.len());
        for (i, img) in self.images.iter().enumerate() {
            let file = format!("images/{i:06}.png");
            crate::datasets::write_png(img, &dir.join(&file))?;
            items.push(ManifestItem { file, label: self.labels[i], provenance: self.provenance[i].clone() });
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_vec_pretty(&Manifest { items })?;
        fs::write(&path, json).map_err(|e| IssError::io(&path, e))
    }

    pub fn load(dir: &Path, opts: FolderOptions) -> Result<Self> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(IssError::NotFound(path));
        }
        let bytes = fs::read(&path).map_err(|e| IssError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        let mut set = Self::empty();
        for item in manifest.items {
            set.images.push(crate::datasets::load_image(&dir.join(&item.file), opts.size)?);
            set.labels.push(item.label);
            set.provenance.push(item.provenance);
        }
        Ok(set)
    }
}

/// Stylises one content image with one style image; output clamped to [0, 1].
pub fn stylize(content: &ImageTensor, style: &ImageTensor, net: &StyleNet<f32>, alpha: f64) -> Result<ImageTensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(IssError::Validation(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    net.check_usable()?;
    if content.channels() != style.channels() {
        return Err(IssError::Shape(format!(
            "content has {} channels, style has {}",
            content.channels(),
            style.channels()
        )));
    }
    let out = net.decode_mixed(&ImageTensor::batch(&[content])?, &ImageTensor::batch(&[style])?, alpha)?;
    let img = ImageTensor::unbatch(&out)?.pop().expect("one image");
    if img.shape() != content.shape() {
        return Err(IssError::Shape(format!("stylised {:?} from content {:?}", img.shape(), content.shape())));
    }
    Ok(img)
}

/// Builds `D^al`: every output inherits the label of its content image.
/// Pair `p` draws its style image from a stream derived from `(seed, p)`,
/// so the result does not depend on scheduling.
pub fn generate_pseudo_labeled(
    labeled: &DomainDataset,
    styles: &[DomainDataset],
    net: &StyleNet<f32>,
    alpha: f64,
    policy: PairingPolicy,
    seed: u64,
) -> Result<PseudoLabeledSet> {
    if styles.is_empty() {
        return Err(IssError::Validation("at least one style domain is required".into()));
    }
    let labels = labeled.labels().ok_or_else(|| IssError::Validation("content dataset must be labeled".into()))?;
    net.check_usable()?;
    let pairs: Vec<(usize, Option<usize>)> = match policy {
        PairingPolicy::OnePerDomain => {
            (0..labeled.len()).flat_map(|c| (0..styles.len()).map(move |d| (c, Some(d)))).collect()
        }
        PairingPolicy::RandomDomain => (0..labeled.len()).map(|c| (c, None)).collect(),
    };
    let items: Vec<(ImageTensor, Provenance)> = pairs
        .par_iter()
        .enumerate()
        .map(|(p, &(c, d))| {
            let mut rng = rng_for(seed, "stylize-pair", p as u64);
            let d = d.unwrap_or_else(|| rng.random_range(0..styles.len()));
            let s = rng.random_range(0..styles[d].len());
            let img = stylize(labeled.image(c), styles[d].image(s), net, alpha)?;
            Ok((img, Provenance { content_index: c, style_domain: styles[d].name().to_string(), style_index: s }))
        })
        .collect::<Result<_>>()?;
    let mut set = PseudoLabeledSet::empty();
    for (img, prov) in items {
        set.labels.push(labels[prov.content_index]);
        set.images.push(img);
        set.provenance.push(prov);
    }
    Ok(set)
}
