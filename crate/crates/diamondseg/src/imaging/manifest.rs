//! Line-oriented dataset manifests.
//!
//! One record per line, tab-separated, fixed field order:
//! `id  image_path  mask_path  run_id  timestamp_min  split_tag`
//! with `-` standing for "no mask". Paths are relative to the manifest's
//! directory. Serialization is deterministic: the same entries always produce
//! the same bytes.

use super::{
    decode_image_png, decode_mask_png, encode_image_png, encode_mask_png, ImageF32, ImageU8,
    ImagingError, MaskU8,
};
use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

/// Which partition a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Train,
    Test,
    /// Unlabeled candidates awaiting selection by the labeling loop.
    Pool,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
            SplitTag::Pool => "pool",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitTag::Train),
            "test" => Some(SplitTag::Test),
            "pool" => Some(SplitTag::Pool),
            _ => None,
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub run_id: String,
    pub timestamp_min: u32,
    pub split: SplitTag,
}

/// Ordered collection of manifest entries with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, ImagingError> {
        let manifest = Self { entries };
        manifest.check_unique_ids()?;
        Ok(manifest)
    }

    fn check_unique_ids(&self) -> Result<(), ImagingError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(ImagingError::DuplicateId(e.id.clone()));
            }
        }
        Ok(())
    }

    /// Serializes to the canonical byte representation.
    pub fn to_text(&self) -> Result<String, ImagingError> {
        let mut out = String::new();
        for e in &self.entries {
            let image_path = path_field(&e.image_path)?;
            let mask_path = match &e.mask_path {
                Some(p) => path_field(p)?,
                None => "-".to_string(),
            };
            for field in [e.id.as_str(), e.run_id.as_str()] {
                if field.is_empty() || field.contains('\t') || field.contains('\n') {
                    return Err(ImagingError::MalformedManifest {
                        line: 0,
                        reason: format!("field {field:?} is empty or contains separators"),
                    });
                }
            }
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.id, image_path, mask_path, e.run_id, e.timestamp_min, e.split
            ));
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self, ImagingError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(ImagingError::MalformedManifest {
                    line: i + 1,
                    reason: format!("expected 6 fields, got {}", fields.len()),
                });
            }
            let timestamp_min =
                fields[4]
                    .parse::<u32>()
                    .map_err(|e| ImagingError::MalformedManifest {
                        line: i + 1,
                        reason: format!("bad timestamp: {e}"),
                    })?;
            let split = SplitTag::parse(fields[5]).ok_or_else(|| ImagingError::MalformedManifest {
                line: i + 1,
                reason: format!("unknown split tag {:?}", fields[5]),
            })?;
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                image_path: PathBuf::from(fields[1]),
                mask_path: if fields[2] == "-" {
                    None
                } else {
                    Some(PathBuf::from(fields[2]))
                },
                run_id: fields[3].to_string(),
                timestamp_min,
                split,
            });
        }
        Manifest::new(entries)
    }

    /// Writes the manifest to `path`.
    pub fn save(&self, path: &Path) -> Result<(), ImagingError> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    /// Loads a manifest and verifies every referenced file exists relative to
    /// the manifest's directory.
    pub fn load(path: &Path) -> Result<Self, ImagingError> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| ImagingError::MissingFile(path.display().to_string()))?;
        let manifest = Manifest::parse(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for e in &manifest.entries {
            let img = base.join(&e.image_path);
            if !img.is_file() {
                return Err(ImagingError::MissingFile(img.display().to_string()));
            }
            if let Some(mp) = &e.mask_path {
                let mask = base.join(mp);
                if !mask.is_file() {
                    return Err(ImagingError::MissingFile(mask.display().to_string()));
                }
            }
        }
        Ok(manifest)
    }
}

fn path_field(p: &Path) -> Result<String, ImagingError> {
    let s = p.to_str().ok_or_else(|| ImagingError::MalformedManifest {
        line: 0,
        reason: "non-utf8 path".to_string(),
    })?;
    if s.is_empty() || s.contains('\t') || s.contains('\n') {
        return Err(ImagingError::MalformedManifest {
            line: 0,
            reason: format!("path {s:?} is empty or contains separators"),
        });
    }
    Ok(s.to_string())
}

/// Pixel payload of a sample: u8 before normalization, f32 after.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageData {
    U8(ImageU8),
    F32(ImageF32),
}

impl ImageData {
    pub fn height(&self) -> usize {
        match self {
            ImageData::U8(i) => i.height(),
            ImageData::F32(i) => i.height(),
        }
    }

    pub fn width(&self) -> usize {
        match self {
            ImageData::U8(i) => i.width(),
            ImageData::F32(i) => i.width(),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            ImageData::U8(i) => i.channels(),
            ImageData::F32(i) => i.channels(),
        }
    }

    pub fn as_u8(&self) -> Option<&ImageU8> {
        match self {
            ImageData::U8(i) => Some(i),
            ImageData::F32(_) => None,
        }
    }

    pub fn as_f32(&self) -> Option<&ImageF32> {
        match self {
            ImageData::F32(i) => Some(i),
            ImageData::U8(_) => None,
        }
    }
}

/// One frame of a growth run plus its annotation state.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub run_id: String,
    /// Minutes since the start of the sample's run.
    pub timestamp_min: u32,
    pub image: ImageData,
    pub mask: Option<MaskU8>,
    pub split: SplitTag,
    /// Transform trail for augmented copies, `None` for originals.
    pub provenance: Option<String>,
}

/// Writes samples as `images/<id>.png`, `masks/<id>.png` and `manifest.tsv`
/// under `dir`. Returns the manifest that was written.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<Manifest, ImagingError> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image = s.image.as_u8().ok_or_else(|| {
            ImagingError::MalformedManifest {
                line: 0,
                reason: format!("sample {} holds float pixels; only u8 images are stored", s.id),
            }
        })?;
        let image_rel = PathBuf::from("images").join(format!("{}.png", s.id));
        std::fs::write(dir.join(&image_rel), encode_image_png(image)?)?;
        let mask_rel = match &s.mask {
            Some(mask) => {
                let rel = PathBuf::from("masks").join(format!("{}.png", s.id));
                std::fs::write(dir.join(&rel), encode_mask_png(mask)?)?;
                Some(rel)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image_path: image_rel,
            mask_path: mask_rel,
            run_id: s.run_id.clone(),
            timestamp_min: s.timestamp_min,
            split: s.split,
        });
    }
    let manifest = Manifest::new(entries)?;
    manifest.save(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>, ImagingError> {
    let manifest = Manifest::load(&dir.join("manifest.tsv"))?;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let image_bytes = std::fs::read(dir.join(&e.image_path))?;
        let image = decode_image_png(&image_bytes)?;
        let mask = match &e.mask_path {
            Some(mp) => Some(decode_mask_png(&std::fs::read(dir.join(mp))?)?),
            None => None,
        };
        samples.push(Sample {
            id: e.id.clone(),
            run_id: e.run_id.clone(),
            timestamp_min: e.timestamp_min,
            image: ImageData::U8(image),
            mask,
            split: e.split,
            provenance: None,
        });
    }
    Ok(samples)
}
