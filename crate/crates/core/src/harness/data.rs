//! Folder-of-pairs datasets: `<root>/hazy/<name>` matched with `<root>/clean/<name>`.

use std::path::{Path, PathBuf};

use super::haze::Pair;
use super::image::{read_image, write_image};
use crate::error::{Error, Result};
use crate::real::Real;

fn listing(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ppm" | "png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_pairs<T: Real>(root: &Path) -> Result<Vec<Pair<T>>> {
    let (hazy_dir, clean_dir) = (root.join("hazy"), root.join("clean"));
    let files = listing(&hazy_dir)?;
    if files.is_empty() {
        return Err(Error::config(format!(
            "no images in {}",
            hazy_dir.display()
        )));
    }
    files
        .iter()
        .map(|h| {
            let name = h.file_name().expect("listed file");
            let c = clean_dir.join(name);
            if !c.exists() {
                return Err(Error::config(format!(
                    "{} has no clean counterpart {}",
                    h.display(),
                    c.display()
                )));
            }
            let pair = Pair {
                hazy: read_image(h)?,
                clean: read_image(&c)?,
            };
            if pair.hazy.shape() != pair.clean.shape() {
                return Err(Error::shape(format!(
                    "{}: hazy and clean sizes differ",
                    name.to_string_lossy()
                )));
            }
            Ok(pair)
        })
        .collect()
}

/// Write pairs as `hazy/NNNNN.ppm` and `clean/NNNNN.ppm`.
pub fn write_pairs<T: Real>(root: &Path, pairs: &[Pair<T>]) -> Result<()> {
    let (hazy_dir, clean_dir) = (root.join("hazy"), root.join("clean"));
    for d in [&hazy_dir, &clean_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for (i, p) in pairs.iter().enumerate() {
        let name = format!("{i:05}.ppm");
        write_image(&hazy_dir.join(&name), &p.hazy)?;
        write_image(&clean_dir.join(&name), &p.clean)?;
    }
    Ok(())
}
