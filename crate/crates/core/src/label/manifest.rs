//! Dataset manifest schema (JSON on disk).

use crate::error::{Error, Result};
use crate::label::geometry::Geometry;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Route {
    /// Fully annotated source.
    Fod,
    /// Partially annotated source; the reclassification path applies here.
    Fop,
    /// Completely unlabeled source.
    Cod,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_index: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub category: String,
    pub geometry: Geometry,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dataset: String,
    pub route: Route,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub embedding_files: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ambiguous_labels: Vec<String>,
}

impl DatasetManifest {
    /// Every annotation must reference a known image.
    pub fn validate(&self) -> Result<()> {
        for ann in &self.annotations {
            if !self.images.iter().any(|im| im.id == ann.image_id) {
                return Err(Error::Manifest(format!(
                    "annotation references unknown image '{}'",
                    ann.image_id
                )));
            }
            ann.geometry.validate(&ann.image_id)?;
        }
        Ok(())
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|im| im.id == id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::geometry::Geometry;

    fn one_image_manifest() -> DatasetManifest {
        DatasetManifest {
            dataset: "t".into(),
            route: Route::Fop,
            images: vec![ImageRecord {
                id: "img0".into(),
                width: 100,
                height: 100,
                sequence: None,
                seq_index: None,
            }],
            annotations: vec![],
            embedding_files: vec![],
            ambiguous_labels: vec![],
        }
    }

    #[test]
    fn rejects_orphan_annotation() {
        let mut m = one_image_manifest();
        m.annotations.push(AnnotationRecord {
            image_id: "missing".into(),
            category: "car".into(),
            geometry: Geometry::Aabb { x_min: 0.0, y_min: 0.0, x_max: 1.0, y_max: 1.0 },
        });
        assert!(matches!(m.validate(), Err(Error::Manifest(_))));
    }

    #[test]
    fn round_trips_through_json() {
        let m = one_image_manifest();
        let text = m.to_json().unwrap();
        let back: DatasetManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = r#"{"dataset":"d","route":"FOD","images":[],"annotations":[],"bogus":1}"#;
        assert!(serde_json::from_str::<DatasetManifest>(text).is_err());
    }
}
