//! Manifests: one sample per line, tab-separated `left<TAB>right<TAB>gt`
//! paths, relative to the manifest's directory. Blank lines and lines
//! starting with `#` are ignored.

use std::fs;
use std::path::{Path, PathBuf};

use super::pfm::{read_disparity_pfm, write_disparity_pfm};
use super::pnm::{read_pnm, write_pnm};
use super::StereoSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub left: PathBuf,
    pub right: PathBuf,
    pub gt: PathBuf,
}

fn manifest_lines(path: &Path) -> Result<Vec<Vec<PathBuf>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| l.split('\t').map(|f| base.join(f.trim())).collect())
        .collect())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    manifest_lines(path)?
        .into_iter()
        .enumerate()
        .map(|(i, fields)| match <[PathBuf; 3]>::try_from(fields) {
            Ok([left, right, gt]) => Ok(ManifestEntry { left, right, gt }),
            Err(f) => Err(Error::format(
                path,
                format!("entry {} has {} fields, expected 3", i + 1, f.len()),
            )),
        })
        .collect()
}

/// Last column of every line: the ground truth of a dataset manifest, or the
/// single path of a one-column list.
pub fn read_map_list(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    manifest_lines(path)?
        .into_iter()
        .map(|mut f| f.pop().ok_or_else(|| Error::format(path, "empty entry")))
        .collect()
}

/// Writes entries with paths relative to the manifest's directory.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!("{}\t{}\t{}\n", rel(&e.left), rel(&e.right), rel(&e.gt)));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `left_%05d.pgm`, `right_%05d.pgm` and `gt_%05d.pfm` into `dir`,
/// numbering from `first_index`.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    samples: &[StereoSample],
    first_index: usize,
) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let n = first_index + i;
            let entry = ManifestEntry {
                left: dir.join(format!("left_{n:05}.pgm")),
                right: dir.join(format!("right_{n:05}.pgm")),
                gt: dir.join(format!("gt_{n:05}.pfm")),
            };
            write_pnm(&s.left, &entry.left)?;
            write_pnm(&s.right, &entry.right)?;
            write_disparity_pfm(&s.gt, &entry.gt)?;
            Ok(entry)
        })
        .collect()
}

/// Loads every manifest entry. Ground-truth pixels that are non-finite or
/// `>= max_disparity` are masked invalid.
pub fn load_dataset(manifest: impl AsRef<Path>, max_disparity: usize) -> Result<Vec<StereoSample>> {
    let limit = max_disparity as f32;
    read_manifest(manifest)?
        .iter()
        .map(|e| {
            let left = read_pnm(&e.left)?;
            let right = read_pnm(&e.right)?;
            let mut gt = read_disparity_pfm(&e.gt)?;
            gt.restrict(|v| v.is_finite() && v < limit);
            StereoSample::new(left, right, gt)
                .map_err(|err| Error::format(&e.gt, format!("sample does not match its images: {err}")))
        })
        .collect()
}
