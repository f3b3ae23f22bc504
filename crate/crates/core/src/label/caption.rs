//! Caption prompt builder: renders each image's annotations as relative
//! positional phrases over a 3x3 grid and wraps them in a fixed instruction
//! block. Output is byte-deterministic for a given manifest and grid.

use crate::error::{Error, Result};
use crate::label::manifest::{AnnotationRecord, DatasetManifest};

/// Region names indexed row-major, top-left first. Boundaries sit at 1/3 and
/// 2/3 of the normalized image; a center coordinate strictly below a
/// boundary belongs to the lower band.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid3x3 {
    pub names: [String; 9],
}

impl Default for Grid3x3 {
    fn default() -> Self {
        Grid3x3 {
            names: [
                "top-left".into(),
                "top-center".into(),
                "top-right".into(),
                "center-left".into(),
                "center".into(),
                "center-right".into(),
                "bottom-left".into(),
                "bottom-center".into(),
                "bottom-right".into(),
            ],
        }
    }
}

impl Grid3x3 {
    fn band(t: f64) -> usize {
        if t < 1.0 / 3.0 {
            0
        } else if t < 2.0 / 3.0 {
            1
        } else {
            2
        }
    }

    /// Region name for a normalized box center (x right, y down).
    pub fn region(&self, cx: f64, cy: f64) -> &str {
        &self.names[3 * Self::band(cy) + Self::band(cx)]
    }
}

const INSTRUCTION_BLOCK: &str = "Describe this aerial image in detail. Cover the \
object types, object actions, precise object locations, and any visible texts. \
Explicitly emphasize the detailed description of small-scale objects, which are \
easy to overlook in aerial views.";

/// One prompt per image: instruction block, then one positional line per
/// annotation in manifest order. Annotations must already be normalized
/// axis-aligned boxes.
pub fn build_caption_prompt(
    manifest: &DatasetManifest,
    image_id: &str,
    grid: &Grid3x3,
) -> Result<String> {
    let image = manifest
        .image(image_id)
        .ok_or_else(|| Error::Manifest(format!("unknown image '{image_id}'")))?;
    let anns: Vec<&AnnotationRecord> =
        manifest.annotations.iter().filter(|a| a.image_id == image_id).collect();
    let mut out = String::new();
    out.push_str(INSTRUCTION_BLOCK);
    out.push_str("\n\nKnown objects:\n");
    if anns.is_empty() {
        out.push_str("(none annotated)\n");
    }
    let (iw, ih) = (image.width as f64, image.height as f64);
    for ann in anns {
        let b = ann.geometry.to_aabb(&ann.image_id)?;
        let (cx, cy) = b.center();
        out.push_str(&format!(
            "- {} at the {}\n",
            ann.category,
            grid.region(cx / iw, cy / ih)
        ));
    }
    Ok(out)
}
