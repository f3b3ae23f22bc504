//! Dataset labeling pipeline: frame deduplication by embedding similarity,
//! annotation geometry normalization, reclassification of ambiguous labels
//! through a pluggable classifier, and caption prompt generation.

pub mod caption;
pub mod dedup;
pub mod geometry;
pub mod manifest;
pub mod reclass;

pub use caption::{build_caption_prompt, Grid3x3};
pub use dedup::{cosine_similarity, dedup_frames, DedupResult, DropRecord, FrameRecord};
pub use geometry::{normalize_annotation, normalize_manifest, Aabb, Geometry};
pub use manifest::{AnnotationRecord, DatasetManifest, ImageRecord, Route};
pub use reclass::{
    apply_reclassification, plan_reclassification, ApplyResult, Classifier, HttpClassifier,
    JobStatus, MockClassifier, ReclassJob,
};
