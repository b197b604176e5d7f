//! In-memory datasets and the on-disk manifest.
//!
//! A manifest is plain text, one volume per line:
//! `volume_path<TAB>mask_path<TAB>split`, paths relative to the manifest's
//! directory. Blank lines and lines starting with `#` are ignored.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nifti;
use crate::volume::{minmax_normalize, BinaryMask, ScalarVolume};

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Train/validation/test sizes for `n` volumes (floor of 80% and 10%, the
/// rest to test).
pub fn split_counts(n: usize) -> Result<(usize, usize, usize)> {
    if n < 10 {
        return Err(Error::Config(format!(
            "need at least 10 volumes for an 80/10/10 split, got {n}"
        )));
    }
    let train = n * 8 / 10;
    let val = n / 10;
    Ok((train, val, n - train - val))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split tag `{other}`"))),
        }
    }
}

/// A normalized volume and its reference mask. `raw` keeps the original
/// intensities and geometry for writing outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub raw: ScalarVolume,
    pub volume: ScalarVolume,
    pub mask: BinaryMask,
}

impl Sample {
    pub fn new(id: impl Into<String>, raw: ScalarVolume, mask: BinaryMask) -> Result<Self> {
        if raw.dims() != mask.dims() {
            return Err(Error::Shape(format!(
                "volume dims {:?} differ from mask dims {:?}",
                raw.dims(),
                mask.dims()
            )));
        }
        let volume = minmax_normalize(&raw);
        Ok(Sample {
            id: id.into(),
            raw,
            volume,
            mask,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes every sample as `<id>.nii.gz` / `<id>_mask.nii.gz` plus the manifest.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Manifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Manifest::default();
        for split in [Split::Train, Split::Val, Split::Test] {
            for s in self.split(split) {
                let volume = PathBuf::from(format!("{}.nii.gz", s.id));
                let mask = PathBuf::from(format!("{}_mask.nii.gz", s.id));
                nifti::save_volume(&s.raw, dir.join(&volume))?;
                nifti::save_mask(&s.mask, &s.raw, dir.join(&mask))?;
                manifest.entries.push(ManifestEntry { volume, mask, split });
            }
        }
        manifest.write(dir.join(MANIFEST_NAME))?;
        Ok(manifest)
    }

    /// Loads the dataset described by `dir/manifest.tsv`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = Manifest::read(dir.join(MANIFEST_NAME))?;
        let mut out = Dataset::default();
        for entry in &manifest.entries {
            let raw = nifti::load_volume(dir.join(&entry.volume))?;
            let mask = nifti::load_mask(dir.join(&entry.mask))?;
            let id = entry
                .volume
                .file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.trim_end_matches(".gz").trim_end_matches(".nii").to_string())
                .unwrap_or_default();
            let sample = Sample::new(id, raw, mask)?;
            match entry.split {
                Split::Train => out.train.push(sample),
                Split::Val => out.val.push(sample),
                Split::Test => out.test.push(sample),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub volume: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Config(format!(
                    "manifest line {}: expected 3 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            entries.push(ManifestEntry {
                volume: PathBuf::from(fields[0]),
                mask: PathBuf::from(fields[1]),
                split: fields[2].trim().parse()?,
            });
        }
        Ok(Manifest { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.volume.display(), e.mask.display(), e.split));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}
