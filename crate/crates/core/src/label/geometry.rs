//! Annotation geometry and normalization to axis-aligned boxes.
//!
//! Pixel origin is top-left with y pointing down. Rotated-box angles are in
//! radians, counter-clockwise from the +x axis, in [-pi, pi).

use crate::error::{Error, Result};
use crate::label::manifest::{AnnotationRecord, DatasetManifest};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Aabb {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
#[serde(deny_unknown_fields)]
pub enum Geometry {
    Aabb { x_min: f64, y_min: f64, x_max: f64, y_max: f64 },
    Rbox { cx: f64, cy: f64, w: f64, h: f64, theta: f64 },
    Poly { vertices: Vec<[f64; 2]> },
}

impl Geometry {
    pub fn validate(&self, source_id: &str) -> Result<()> {
        let bad = |detail: String| Error::DegenerateGeometry {
            source_id: source_id.to_string(),
            detail,
        };
        match self {
            Geometry::Aabb { x_min, y_min, x_max, y_max } => {
                if !(x_min < x_max && y_min < y_max) {
                    return Err(bad(format!(
                        "aabb extents not positive: [{x_min},{y_min},{x_max},{y_max}]"
                    )));
                }
            }
            Geometry::Rbox { w, h, theta, .. } => {
                if !(*w > 0.0 && *h > 0.0) {
                    return Err(bad(format!("rbox sides not positive: w={w} h={h}")));
                }
                if !(-std::f64::consts::PI..std::f64::consts::PI).contains(theta) {
                    return Err(bad(format!("theta {theta} outside [-pi, pi)")));
                }
            }
            Geometry::Poly { vertices } => {
                if vertices.len() < 3 {
                    return Err(bad(format!("polygon has {} vertices", vertices.len())));
                }
            }
        }
        Ok(())
    }

    /// The four corners of a rotated box, CCW angle, y-down pixel frame.
    pub fn rbox_corners(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> [[f64; 2]; 4] {
        let (s, c) = theta.sin_cos();
        let mut out = [[0.0; 2]; 4];
        for (i, (dx, dy)) in [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]
            .into_iter()
            .enumerate()
        {
            let (lx, ly) = (dx * w, dy * h);
            // y-down frame: CCW rotation maps (x, y) -> (x cos + y sin, -x sin + y cos)
            out[i] = [cx + lx * c + ly * s, cy - lx * s + ly * c];
        }
        out
    }

    /// Tight axis-aligned hull of the geometry.
    pub fn to_aabb(&self, source_id: &str) -> Result<Aabb> {
        self.validate(source_id)?;
        let points: Vec<[f64; 2]> = match self {
            Geometry::Aabb { x_min, y_min, x_max, y_max } => {
                return Ok(Aabb { x_min: *x_min, y_min: *y_min, x_max: *x_max, y_max: *y_max });
            }
            Geometry::Rbox { cx, cy, w, h, theta } => {
                Self::rbox_corners(*cx, *cy, *w, *h, *theta).to_vec()
            }
            Geometry::Poly { vertices } => vertices.clone(),
        };
        let mut out = Aabb {
            x_min: f64::INFINITY,
            y_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for p in &points {
            out.x_min = out.x_min.min(p[0]);
            out.y_min = out.y_min.min(p[1]);
            out.x_max = out.x_max.max(p[0]);
            out.y_max = out.y_max.max(p[1]);
        }
        if !out.is_valid() {
            return Err(Error::DegenerateGeometry {
                source_id: source_id.to_string(),
                detail: format!("normalized box has zero extent: {out:?}"),
            });
        }
        Ok(out)
    }
}

/// Replace the annotation geometry with its axis-aligned hull.
pub fn normalize_annotation(ann: &AnnotationRecord) -> Result<AnnotationRecord> {
    let aabb = ann.geometry.to_aabb(&ann.image_id)?;
    Ok(AnnotationRecord {
        image_id: ann.image_id.clone(),
        category: ann.category.clone(),
        geometry: Geometry::Aabb {
            x_min: aabb.x_min,
            y_min: aabb.y_min,
            x_max: aabb.x_max,
            y_max: aabb.y_max,
        },
    })
}

/// Normalize every annotation in a manifest; image records pass through.
pub fn normalize_manifest(manifest: &DatasetManifest) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    out.annotations = manifest
        .annotations
        .iter()
        .map(normalize_annotation)
        .collect::<Result<Vec<_>>>()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(geometry: Geometry) -> AnnotationRecord {
        AnnotationRecord { image_id: "i".into(), category: "c".into(), geometry }
    }

    /// Independent rbox hull: half extents |w/2 cos| + |h/2 sin| and
    /// |w/2 sin| + |h/2 cos| about the center.
    fn rbox_hull_oracle(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Aabb {
        let ex = (w / 2.0 * theta.cos()).abs() + (h / 2.0 * theta.sin()).abs();
        let ey = (w / 2.0 * theta.sin()).abs() + (h / 2.0 * theta.cos()).abs();
        Aabb { x_min: cx - ex, y_min: cy - ey, x_max: cx + ex, y_max: cy + ey }
    }

    #[test]
    fn axis_aligned_rbox() {
        let a = ann(Geometry::Rbox { cx: 5.0, cy: 5.0, w: 4.0, h: 2.0, theta: 0.0 });
        let n = normalize_annotation(&a).unwrap();
        match n.geometry {
            Geometry::Aabb { x_min, y_min, x_max, y_max } => {
                assert!((x_min - 3.0).abs() < 1e-12);
                assert!((y_min - 4.0).abs() < 1e-12);
                assert!((x_max - 7.0).abs() < 1e-12);
                assert!((y_max - 6.0).abs() < 1e-12);
            }
            _ => panic!("not an aabb"),
        }
    }

    #[test]
    fn unit_square_rotated_45_degrees() {
        let g = Geometry::Rbox {
            cx: 0.0,
            cy: 0.0,
            w: 1.0,
            h: 1.0,
            theta: std::f64::consts::FRAC_PI_4,
        };
        let b = g.to_aabb("i").unwrap();
        let side = 2f64.sqrt();
        assert!((b.width() - side).abs() < 1e-12);
        assert!((b.height() - side).abs() < 1e-12);
        let (cx, cy) = b.center();
        assert!(cx.abs() < 1e-12 && cy.abs() < 1e-12);
    }

    #[test]
    fn random_rboxes_match_half_extent_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let cx = rng.gen_range(-50.0..50.0);
            let cy = rng.gen_range(-50.0..50.0);
            let w = rng.gen_range(0.1..20.0);
            let h = rng.gen_range(0.1..20.0);
            let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let g = Geometry::Rbox { cx, cy, w, h, theta };
            let got = g.to_aabb("i").unwrap();
            let want = rbox_hull_oracle(cx, cy, w, h, theta);
            assert!((got.x_min - want.x_min).abs() < 1e-9);
            assert!((got.y_min - want.y_min).abs() < 1e-9);
            assert!((got.x_max - want.x_max).abs() < 1e-9);
            assert!((got.y_max - want.y_max).abs() < 1e-9);
        }
    }

    #[test]
    fn polygon_hull_is_vertex_minmax() {
        let g = Geometry::Poly {
            vertices: vec![[1.0, 2.0], [4.0, -1.0], [0.5, 3.0], [2.0, 2.0]],
        };
        let b = g.to_aabb("i").unwrap();
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (0.5, -1.0, 4.0, 3.0));
    }

    #[test]
    fn aabb_passes_through_idempotently() {
        let a = ann(Geometry::Aabb { x_min: 1.0, y_min: 2.0, x_max: 3.0, y_max: 4.0 });
        let once = normalize_annotation(&a).unwrap();
        let twice = normalize_annotation(&once).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.geometry, a.geometry);
    }

    #[test]
    fn degenerate_polygon_is_rejected_with_source_id() {
        let g = Geometry::Poly { vertices: vec![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]] };
        match g.to_aabb("frame_9") {
            Err(Error::DegenerateGeometry { source_id, .. }) => assert_eq!(source_id, "frame_9"),
            other => panic!("expected degenerate geometry error, got {other:?}"),
        }
    }

    #[test]
    fn rbox_area_never_exceeds_hull_area() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let w = rng.gen_range(0.5..10.0);
            let h = rng.gen_range(0.5..10.0);
            let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let g = Geometry::Rbox { cx: 0.0, cy: 0.0, w, h, theta };
            let hull = g.to_aabb("i").unwrap();
            assert!(w * h <= hull.area() + 1e-9);
        }
    }
}
