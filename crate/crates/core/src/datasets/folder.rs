// Image-folder datasets.
//
// Labeled roles use one subdirectory per class; labels are the ranks of the
// sorted subdirectory names. The unlabeled role reads a flat directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};

use super::{DatasetRole, DomainDataset, ImageTensor};
use crate::error::{IssError, Result};

const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, Copy)]
pub struct FolderOptions {
    /// Images are resized to `size x size`.
    pub size: usize,
}

impl Default for FolderOptions {
    fn default() -> Self {
        Self { size: 64 }
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| IssError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| IssError::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

pub(crate) fn load_one(path: &Path, size: usize) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|source| IssError::Image { path: path.to_path_buf(), source })?;
    let rgb = img.resize_exact(size as u32, size as u32, FilterType::Triangle).to_rgb8();
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for (x, y, px) in rgb.enumerate_pixels() {
        let i = y as usize * size + x as usize;
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    ImageTensor::new(3, size, size, data)
}

fn images_in(dir: &Path, size: usize) -> Result<Vec<ImageTensor>> {
    sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_image(p)).map(|p| load_one(&p, size)).collect()
}

pub fn load_image_folder(path: &Path, role: DatasetRole, opts: FolderOptions) -> Result<DomainDataset> {
    if !path.exists() {
        return Err(IssError::NotFound(path.to_path_buf()));
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
    if !role.is_labeled() {
        let images = images_in(path, opts.size)?;
        if images.is_empty() {
            return Err(IssError::Validation(format!("no images in {}", path.display())));
        }
        return DomainDataset::new(name, role, images, None);
    }

    let class_dirs: Vec<PathBuf> = sorted_entries(path)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(IssError::Validation(format!("no class directories in {}", path.display())));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut names = BTreeMap::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let class = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let class_images = images_in(dir, opts.size)?;
        if class_images.is_empty() {
            return Err(IssError::Validation(format!("class `{class}` has no images")));
        }
        labels.extend(std::iter::repeat_n(label, class_images.len()));
        images.extend(class_images);
        names.insert(label, class);
    }
    Ok(DomainDataset::new(name, role, images, Some(labels))?.with_class_names(names))
}

pub(crate) fn write_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let c = c.min(img.channels() - 1);
            (img.get(c, y as usize, x as usize) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|source| IssError::Image { path: path.to_path_buf(), source })
}

/// Writes a dataset in the layout [`load_image_folder`] reads.
///
/// Labeled datasets get one subdirectory per class named after the class
/// (zero-padded labels keep the lexicographic order equal to label order).
pub fn write_image_folder(ds: &DomainDataset, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| IssError::io(dir, e))?;
    let mut written = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let target_dir = match ds.label(i) {
            Some(y) => {
                let d = dir.join(format!("class_{y:05}"));
                fs::create_dir_all(&d).map_err(|e| IssError::io(&d, e))?;
                d
            }
            None => dir.to_path_buf(),
        };
        let path = target_dir.join(format!("img_{i:06}.png"));
        write_png(ds.image(i), &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_solid(path: &Path, v: u8) {
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_pixel(5, 3, Rgb([v, v / 2, 255 - v]));
        buf.save(path).unwrap();
    }

    #[test]
    fn class_folders_get_sorted_labels() {
        let root = tempfile::tempdir().unwrap();
        fs::create_dir_all(root.path().join("b")).unwrap();
        fs::create_dir_all(root.path().join("a")).unwrap();
        for i in 0..3 {
            write_solid(&root.path().join(format!("a/{i}.png")), 10 * i);
        }
        for i in 0..2 {
            write_solid(&root.path().join(format!("b/{i}.png")), 100 + i);
        }
        let ds = load_image_folder(root.path(), DatasetRole::Target, FolderOptions { size: 8 }).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.labels().unwrap(), &[0, 0, 0, 1, 1]);
        assert_eq!(ds.class_name(1), "b");
        assert_eq!(ds.image_shape(), [3, 8, 8]);
    }

    #[test]
    fn flat_folder_is_unlabeled() {
        let root = tempfile::tempdir().unwrap();
        write_solid(&root.path().join("x.png"), 3);
        write_solid(&root.path().join("y.png"), 9);
        let ds = load_image_folder(root.path(), DatasetRole::UnlabeledSource, FolderOptions { size: 4 }).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(ds.labels().is_none());
    }

    #[test]
    fn empty_class_is_a_validation_error_naming_it() {
        let root = tempfile::tempdir().unwrap();
        fs::create_dir_all(root.path().join("a")).unwrap();
        fs::create_dir_all(root.path().join("b")).unwrap();
        write_solid(&root.path().join("b/0.png"), 1);
        let err = load_image_folder(root.path(), DatasetRole::Target, FolderOptions { size: 4 }).unwrap_err();
        assert!(matches!(err, IssError::Validation(ref m) if m.contains("`a`")), "{err}");
    }

    #[test]
    fn missing_path_and_bad_file_are_reported() {
        let root = tempfile::tempdir().unwrap();
        let missing = root.path().join("nope");
        assert!(matches!(
            load_image_folder(&missing, DatasetRole::Target, FolderOptions::default()),
            Err(IssError::NotFound(_))
        ));
        fs::write(root.path().join("broken.png"), b"not a png").unwrap();
        let err = load_image_folder(root.path(), DatasetRole::UnlabeledSource, FolderOptions::default()).unwrap_err();
        assert!(err.to_string().contains("broken.png"), "{err}");
    }

    #[test]
    fn written_folder_reloads_with_same_labels() {
        let images = (0..4).map(|i| ImageTensor::filled(3, 6, 6, i as f32 / 4.0).unwrap()).collect();
        let ds = DomainDataset::new("d", DatasetRole::Target, images, Some(vec![7, 7, 9, 9])).unwrap();
        let root = tempfile::tempdir().unwrap();
        write_image_folder(&ds, root.path()).unwrap();
        let back = load_image_folder(root.path(), DatasetRole::Target, FolderOptions { size: 6 }).unwrap();
        assert_eq!(back.labels().unwrap(), &[0, 0, 1, 1]);
        assert_eq!(back.class_name(0), "class_00007");
        assert!((back.image(2).get(0, 1, 1) - 0.5).abs() < 1e-2);
    }
}
