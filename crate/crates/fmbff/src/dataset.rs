//! Directory datasets: `<root>/images/<id>.ppm`, `<root>/masks/<id>_mask.pgm`
//! and a newline-delimited id manifest `<root>/ids.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use fmbff_core::data::Sample;

use crate::error::{Error, IoContext, Result};
use crate::pnm;

pub const MANIFEST: &str = "ids.txt";

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{}.ppm", id))
}

pub fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("masks").join(format!("{}_mask.pgm", id))
}

/// Writes every sample and the id manifest, creating directories.
pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).at(&dir)?;
    }
    let mut manifest = String::new();
    for s in samples {
        pnm::write_image(&image_path(root, &s.id), &s.image)?;
        pnm::write_mask(&mask_path(root, &s.id), &s.mask)?;
        manifest.push_str(&s.id);
        manifest.push('\n');
    }
    let path = root.join(MANIFEST);
    fs::write(&path, manifest).at(&path)
}

/// Ids from the manifest when present, otherwise the sorted stems of
/// `images/*.ppm`.
pub fn list_ids(root: &Path) -> Result<Vec<String>> {
    let manifest = root.join(MANIFEST);
    if manifest.exists() {
        let text = fs::read_to_string(&manifest).at(&manifest)?;
        return Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect());
    }
    let dir = root.join("images");
    let mut ids = Vec::new();
    for entry in fs::read_dir(&dir).at(&dir)? {
        let path = entry.at(&dir)?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn read_sample(root: &Path, id: &str) -> Result<Sample> {
    let image = pnm::read_image(&image_path(root, id))?;
    let mask = pnm::read_mask(&mask_path(root, id))?;
    if image.shape()[1..] != mask.shape()[1..] {
        return Err(Error::Validation(format!(
            "`{}`: image is {}×{} but mask is {}×{}",
            id,
            image.dim(1),
            image.dim(2),
            mask.dim(1),
            mask.dim(2)
        )));
    }
    Ok(Sample::new(image, mask, id)?)
}

pub fn read_dataset(root: &Path) -> Result<Vec<Sample>> {
    let ids = list_ids(root)?;
    if ids.is_empty() {
        return Err(Error::Validation(format!("no samples under {}", root.display())));
    }
    ids.iter().map(|id| read_sample(root, id)).collect()
}
