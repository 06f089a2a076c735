//! On-disk datasets: `<dir>/<modality>/<identity>/<name>.<ext>` image files
//! plus a `manifest.json` listing them.

use std::path::{Component, Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::io::{read_image, resize_nearest, write_image, ImageFormat};
use super::{Dataset, Modality, Sample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory, `/`-separated.
    pub path: String,
    pub identity: u32,
    pub modality: Modality,
    pub generated: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(bytes)
            .map_err(|e| Error::parse("manifest", e.column(), format!("line {}: {e}", e.line())))?;
        for entry in &m.samples {
            checked_relative(&entry.path)?;
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Reject absolute paths and `..` so a manifest cannot point outside its directory.
fn checked_relative(path: &str) -> Result<PathBuf> {
    let p = Path::new(path);
    if path.is_empty() || !p.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(Error::Format(format!(
            "manifest path `{path}` must be relative and plain"
        )));
    }
    Ok(p.to_path_buf())
}

/// Relative location of a sample inside a dataset directory.
pub fn sample_path(sample: &Sample, format: ImageFormat) -> String {
    format!(
        "{}/{}/{}.{}",
        sample.modality,
        sample.identity,
        sample.name,
        format.extension()
    )
}

/// Write every image and the manifest. Returns the manifest.
pub fn save_dataset(dir: &Path, dataset: &Dataset, format: ImageFormat) -> Result<Manifest> {
    let mut manifest = Manifest::default();
    for s in &dataset.samples {
        let rel = sample_path(s, format);
        write_image(&dir.join(&rel), &s.image)?;
        manifest.samples.push(ManifestEntry {
            path: rel,
            identity: s.identity,
            modality: s.modality,
            generated: s.generated,
        });
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Read a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = Manifest::parse(&bytes)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in manifest.samples {
        let rel = checked_relative(&entry.path)?;
        let image = read_image(&dir.join(&rel))?;
        let name = rel
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        samples.push(Sample {
            image,
            identity: entry.identity,
            modality: entry.modality,
            generated: entry.generated,
            name,
        });
    }
    Ok(Dataset::new(samples))
}

/// Result of scanning a directory tree.
#[derive(Debug, Clone, Default)]
pub struct DirectoryLoad {
    pub dataset: Dataset,
    pub warnings: Vec<String>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Scan `<root>/<modality>/<identity>/<file>.(png|ppm)`, resizing every
/// image to `size = (height, width)` by nearest neighbour when given.
pub fn load_directory(root: &Path, size: Option<(usize, usize)>) -> Result<DirectoryLoad> {
    if let Some((h, w)) = size {
        if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!(
                "target size {h}x{w} must be even and positive"
            )));
        }
    }
    let mut out = DirectoryLoad::default();
    for mdir in sorted_entries(root)? {
        if !mdir.is_dir() {
            continue;
        }
        let mname = mdir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let modality: Modality = mname.parse()?;
        for idir in sorted_entries(&mdir)? {
            if !idir.is_dir() {
                continue;
            }
            let iname = idir
                .file_name()
                .and_then(|s| s.to_str())
                .unwrap_or_default();
            let identity: u32 = iname.parse().map_err(|_| {
                Error::Format(format!(
                    "{}: identity directory must be an integer",
                    idir.display()
                ))
            })?;
            for file in sorted_entries(&idir)? {
                if ImageFormat::from_path(&file).is_none() {
                    continue;
                }
                let mut image = read_image(&file)?;
                if let Some((h, w)) = size {
                    image = resize_nearest(&image, h, w)?;
                }
                let (h, w) = (image.shape()[1], image.shape()[2]);
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Format(format!(
                        "{}: odd extent {h}x{w}",
                        file.display()
                    )));
                }
                let name = file
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default()
                    .to_string();
                out.dataset.samples.push(Sample {
                    image,
                    identity,
                    modality,
                    generated: false,
                    name,
                });
            }
        }
    }
    if out.dataset.is_empty() {
        let msg = format!("{}: no images found", root.display());
        warn!("{msg}");
        out.warnings.push(msg);
    }
    if let Some(shape) = out.dataset.image_shape() {
        if let Some(bad) = out
            .dataset
            .samples
            .iter()
            .find(|s| s.image.shape() != shape)
        {
            return Err(Error::Format(format!(
                "image `{}` has shape {:?}, expected {shape:?}; pass a target size",
                bad.name,
                bad.image.shape()
            )));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::io::encode_ppm;
    use crate::tensor::Tensor;

    #[test]
    fn manifest_rejects_unknown_fields_and_escapes() {
        assert!(Manifest::parse(br#"{"samples":[],"extra":1}"#).is_err());
        let bad = br#"{"samples":[{"path":"../x.png","identity":1,"modality":"visible","generated":false}]}"#;
        assert!(Manifest::parse(bad).is_err());
        let ok = br#"{"samples":[{"path":"visible/1/a.png","identity":1,"modality":"visible","generated":true}]}"#;
        assert_eq!(Manifest::parse(ok).unwrap().samples[0].identity, 1);
    }

    #[test]
    fn empty_directory_warns() {
        let dir = tempfile::tempdir().unwrap();
        let out = load_directory(dir.path(), None).unwrap();
        assert!(out.dataset.is_empty());
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn single_ppm_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("visible/3");
        std::fs::create_dir_all(&p).unwrap();
        std::fs::write(
            p.join("a.ppm"),
            encode_ppm(&Tensor::full(&[3, 2, 2], 9.0)).unwrap(),
        )
        .unwrap();
        let out = load_directory(dir.path(), None).unwrap();
        assert_eq!(out.dataset.len(), 1);
        let s = &out.dataset.samples[0];
        assert_eq!(
            (s.identity, s.modality, s.name.as_str()),
            (3, Modality::Visible, "a")
        );
        let resized = load_directory(dir.path(), Some((4, 2))).unwrap();
        assert_eq!(resized.dataset.samples[0].image.shape(), &[3, 4, 2]);
    }

    #[test]
    fn bad_layouts_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("thermal/1")).unwrap();
        assert!(matches!(
            load_directory(dir.path(), None),
            Err(Error::Config(_))
        ));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("infrared/1");
        std::fs::create_dir_all(&p).unwrap();
        std::fs::write(p.join("a.ppm"), b"P6\n1 1\n").unwrap();
        assert!(matches!(
            load_directory(dir.path(), None),
            Err(Error::Parse { .. })
        ));

        std::fs::write(
            p.join("a.ppm"),
            encode_ppm(&Tensor::full(&[3, 3, 2], 1.0)).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            load_directory(dir.path(), None),
            Err(Error::Format(_))
        ));
    }
}
