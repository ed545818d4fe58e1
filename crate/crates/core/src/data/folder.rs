use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OnError {
    /// Log a warning and leave the file out.
    #[default]
    Skip,
    Fail,
}

/// Per-channel `(x − mean) / std`, applied after resizing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FolderOptions {
    pub resize_to: usize,
    #[serde(default)]
    pub on_error: OnError,
    #[serde(default)]
    pub normalization: Option<Normalization>,
}

impl FolderOptions {
    pub fn new(resize_to: usize) -> Self {
        FolderOptions { resize_to, on_error: OnError::Skip, normalization: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the dataset root, `/`-separated.
    pub path: String,
    pub label: usize,
}

/// Record of what was ingested; `checksum` is SHA-256 over each entry's path and file bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub domain: String,
    pub image_size: usize,
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    pub skipped: Vec<String>,
    pub checksum: String,
}

impl Manifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

fn decode(path: &Path, size: usize) -> Result<Vec<f32>> {
    let img = image::open(path)?.to_rgb32f();
    let img = if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    };
    let mut out = vec![0.0f32; 3 * size * size];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c * size + y as usize) * size + x as usize] = p.0[c].clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Class-per-subfolder image ingestion in lexicographic path order, resized
/// bilinearly to `resize_to × resize_to` RGB.
pub fn load_image_folder(root: impl AsRef<Path>, opts: &FolderOptions) -> Result<(Dataset, Manifest)> {
    let root = root.as_ref();
    if opts.resize_to == 0 {
        return Err(Error::Config("resize_to must be positive".into()));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)
        .map_err(|e| Error::Dataset(format!("cannot read `{}`: {e}", root.display())))?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!("`{}` has no class subdirectories", root.display())));
    }
    let classes: Vec<String> =
        class_dirs.iter().map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned()).collect();
    let domain = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "images".into());
    let mut ds = Dataset::new(domain.clone(), 3, opts.resize_to, classes.clone());
    let mut hasher = Sha256::new();
    let (mut entries, mut skipped) = (Vec::new(), Vec::new());
    for (label, dir) in class_dirs.iter().enumerate() {
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            let rel = format!("{}/{}", classes[label], file.file_name().unwrap_or_default().to_string_lossy());
            let mut image = match decode(&file, opts.resize_to) {
                Ok(i) => i,
                Err(e) => match opts.on_error {
                    OnError::Fail => return Err(Error::Dataset(format!("unreadable image `{rel}`: {e}"))),
                    OnError::Skip => {
                        log::warn!("skipping unreadable image `{rel}`: {e}");
                        skipped.push(rel);
                        continue;
                    }
                },
            };
            if let Some(n) = &opts.normalization {
                let plane = opts.resize_to * opts.resize_to;
                for (i, v) in image.iter_mut().enumerate() {
                    let c = i / plane;
                    *v = (*v - n.mean[c]) / n.std[c];
                }
            }
            hasher.update(rel.as_bytes());
            hasher.update(std::fs::read(&file)?);
            ds.push(&image, label)?;
            entries.push(ManifestEntry { path: rel, label });
        }
    }
    let manifest = Manifest {
        domain,
        image_size: opts.resize_to,
        classes,
        entries,
        skipped,
        checksum: hex::encode(hasher.finalize()),
    };
    Ok((ds, manifest))
}
