//! Dataset manifests: a `manifest.json` next to `images/` and `masks/`,
//! with paths stored relative to the manifest.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, BoundingBox, Image};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Colored,
    Transparent,
    SyntheticTransparent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub image_id: String,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fill_fraction: Option<f64>,
    pub cup_bbox: BoundingBox,
    pub scene_id: u32,
    pub split_tag: SplitTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub domain_tag: DomainTag,
    pub records: Vec<Record>,
    /// Free-form provenance (generator settings, seeds, upstream config).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config_echo: serde_json::Value,
    /// Directory the relative paths resolve against; not serialised.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(domain_tag: DomainTag, root: impl Into<PathBuf>) -> Self {
        Self {
            domain_tag,
            records: Vec::new(),
            config_echo: serde_json::Value::Null,
            root: root.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Unique ids and fill fractions within `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.image_id) {
                return Err(Error::Dataset(format!("duplicate image_id `{}`", r.image_id)));
            }
            if let Some(f) = r.fill_fraction {
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::Dataset(format!(
                        "record `{}` has fill_fraction {f} outside [0, 1]",
                        r.image_id
                    )));
                }
            }
            if r.cup_bbox.x_min > r.cup_bbox.x_max || r.cup_bbox.y_min > r.cup_bbox.y_max {
                return Err(Error::Dataset(format!("record `{}` has an inverted cup_bbox", r.image_id)));
            }
        }
        Ok(())
    }

    pub fn image_path(&self, r: &Record) -> PathBuf {
        self.root.join(&r.image_path)
    }

    pub fn mask_path(&self, r: &Record) -> Option<PathBuf> {
        r.mask_path.as_ref().map(|p| self.root.join(p))
    }

    pub fn load_image(&self, r: &Record) -> Result<Image> {
        Image::load_png(&self.image_path(r))
    }

    /// Load a record's mask and check it matches the image dimensions.
    pub fn load_mask(&self, r: &Record) -> Result<BinaryMask> {
        let path = self
            .mask_path(r)
            .ok_or_else(|| Error::Dataset(format!("record `{}` has no mask", r.image_id)))?;
        let mask = BinaryMask::load_png(&path)?;
        let (w, h) = image::image_dimensions(self.image_path(r)).map_err(|source| Error::Image {
            path: self.image_path(r),
            source,
        })?;
        if (mask.height(), mask.width()) != (h as usize, w as usize) {
            return Err(Error::dims(
                format!("mask {h}x{w} for `{}`", r.image_id),
                format!("{}x{}", mask.height(), mask.width()),
            ));
        }
        Ok(mask)
    }

    /// Load `manifest.json` from `dir`. Unknown fields are ignored.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        m.root = dir.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    /// Write `manifest.json` into `self.root`.
    pub fn save(&self) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str) -> Record {
        Record {
            image_id: id.into(),
            image_path: format!("images/{id}.png").into(),
            mask_path: None,
            fill_fraction: Some(0.5),
            cup_bbox: BoundingBox { x_min: 1, y_min: 2, x_max: 3, y_max: 4 },
            scene_id: 0,
            split_tag: SplitTag::Train,
        }
    }

    #[test]
    fn save_load_round_trip_and_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest::new(DomainTag::Colored, dir.path());
        m.records.push(record("a"));
        m.save().unwrap();
        let back = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(back, m);

        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        v["extra"] = serde_json::json!(42);
        v["records"][0]["whatever"] = serde_json::json!("x");
        fs::write(dir.path().join(MANIFEST_FILE), v.to_string()).unwrap();
        assert_eq!(DatasetManifest::load(dir.path()).unwrap().records, m.records);
    }

    #[test]
    fn duplicate_ids_and_bad_fill_rejected() {
        let mut m = DatasetManifest::new(DomainTag::Transparent, ".");
        m.records.push(record("a"));
        m.records.push(record("a"));
        assert!(m.validate().is_err());
        m.records.pop();
        m.records[0].fill_fraction = Some(1.5);
        assert!(m.validate().is_err());
    }
}
