//! Dataset directories: PCSQ clip files listed in a text manifest with one
//! `path class length` line per clip.

use std::fs;
use std::path::{Path, PathBuf};

use super::synth::LabeledClip;
use crate::error::bail;
use crate::pcseq::{load_sequence, save_sequence};
use crate::Result;

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub class: u32,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Blank lines and `#` comments are skipped. Paths may contain spaces;
    /// the last two fields are the class and the length.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.rsplitn(3, char::is_whitespace);
            let (Some(len), Some(class), Some(path)) = (it.next(), it.next(), it.next()) else {
                bail!(Format, "manifest line {}: expected `path class length`", i + 1);
            };
            let path = path.trim_end();
            if path.is_empty() {
                bail!(Format, "manifest line {}: empty path", i + 1);
            }
            let class = class
                .parse()
                .map_err(|_| crate::Error::Format(format!("manifest line {}: bad class {class:?}", i + 1)))?;
            let length: usize = len
                .parse()
                .map_err(|_| crate::Error::Format(format!("manifest line {}: bad length {len:?}", i + 1)))?;
            if length == 0 {
                bail!(Format, "manifest line {}: zero-length clip", i + 1);
            }
            entries.push(ManifestEntry {
                path: PathBuf::from(path),
                class,
                length,
            });
        }
        Ok(Self { entries })
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{} {} {}\n", e.path.display(), e.class, e.length))
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Writes `<dir>/<id>.pcsq` for every clip plus `<dir>/manifest.txt`.
pub fn write_dataset(dir: impl AsRef<Path>, clips: &[LabeledClip]) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest::default();
    for c in clips {
        let name = format!("{}.pcsq", c.id);
        save_sequence(&c.seq, dir.join(&name))?;
        manifest.entries.push(ManifestEntry {
            path: PathBuf::from(name),
            class: c.class,
            length: c.seq.frame_count(),
        });
    }
    fs::write(dir.join(MANIFEST_NAME), manifest.render())?;
    Ok(manifest)
}

/// Loads every clip listed in a manifest (a directory means its
/// `manifest.txt`). Clips without labels get the manifest class on every
/// frame; lengths must match.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<LabeledClip>> {
    let mut path = path.as_ref().to_path_buf();
    if path.is_dir() {
        path = path.join(MANIFEST_NAME);
    }
    let manifest = Manifest::load(&path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest
        .entries
        .iter()
        .map(|e| {
            let file = if e.path.is_absolute() { e.path.clone() } else { base.join(&e.path) };
            let mut seq = load_sequence(&file)?;
            if seq.frame_count() != e.length {
                bail!(
                    Validation,
                    "{}: manifest says {} frames, file has {}",
                    file.display(),
                    e.length,
                    seq.frame_count()
                );
            }
            if seq.labels().is_none() {
                seq = seq.with_labels(vec![e.class; e.length])?;
            }
            let id = e
                .path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(LabeledClip {
                id,
                class: e.class,
                seq,
                limb: Vec::new(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let m = Manifest::parse("# clips\n\na.pcsq 0 16\nsub dir/b c.pcsq 2 8\n").unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[1].path, PathBuf::from("sub dir/b c.pcsq"));
        assert_eq!(m.entries[1].class, 2);
        assert_eq!(Manifest::parse(&m.render()).unwrap(), m);
    }

    #[test]
    fn malformed_lines() {
        for bad in ["a.pcsq 0", "a.pcsq x 4", "a.pcsq 1 -3", "a.pcsq 1 0", "3 4"] {
            assert!(Manifest::parse(bad).is_err(), "{bad}");
        }
    }
}
