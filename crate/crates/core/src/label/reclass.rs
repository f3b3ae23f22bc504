//! Reclassification of ambiguous labels: plan crop jobs, dispatch them to a
//! pluggable classifier, and merge responses back into the manifest.

use crate::error::{Error, Result};
use crate::label::geometry::Aabb;
use crate::label::manifest::DatasetManifest;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Resolved { new_label: String },
    Rejected,
}

// no deny_unknown_fields: serde cannot combine it with the flattened status
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReclassJob {
    pub job_id: String,
    /// Index into the source manifest's annotation list.
    pub annotation_index: usize,
    pub image_id: String,
    /// Margin-expanded crop rect in normalized [0,1] image coordinates.
    pub crop: Aabb,
    pub original_label: String,
    #[serde(flatten)]
    pub status: JobStatus,
}

/// One job per annotation whose category is in the ambiguous set. The crop
/// rect is the normalized box grown by `margin` (fraction of each side) and
/// clipped to the unit square.
pub fn plan_reclassification(
    manifest: &DatasetManifest,
    ambiguous: &[String],
    margin: f64,
) -> Result<Vec<ReclassJob>> {
    if margin < 0.0 {
        return Err(Error::Config(format!("margin {margin} must be >= 0")));
    }
    let mut jobs = Vec::new();
    for (idx, ann) in manifest.annotations.iter().enumerate() {
        if !ambiguous.contains(&ann.category) {
            continue;
        }
        let image = manifest.image(&ann.image_id).ok_or_else(|| {
            Error::Manifest(format!("annotation references unknown image '{}'", ann.image_id))
        })?;
        if image.width == 0 || image.height == 0 {
            return Err(Error::Manifest(format!("image '{}' has zero dims", image.id)));
        }
        let b = ann.geometry.to_aabb(&ann.image_id)?;
        let (iw, ih) = (image.width as f64, image.height as f64);
        let (mx, my) = (b.width() * margin, b.height() * margin);
        let crop = Aabb {
            x_min: ((b.x_min - mx) / iw).clamp(0.0, 1.0),
            y_min: ((b.y_min - my) / ih).clamp(0.0, 1.0),
            x_max: ((b.x_max + mx) / iw).clamp(0.0, 1.0),
            y_max: ((b.y_max + my) / ih).clamp(0.0, 1.0),
        };
        jobs.push(ReclassJob {
            job_id: format!("job-{idx:06}"),
            annotation_index: idx,
            image_id: ann.image_id.clone(),
            crop,
            original_label: ann.category.clone(),
            status: JobStatus::Pending,
        });
    }
    Ok(jobs)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RejectionRecord {
    pub job_id: String,
    pub response: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ApplyResult {
    pub manifest: DatasetManifest,
    pub jobs: Vec<ReclassJob>,
    pub rejections: Vec<RejectionRecord>,
}

/// Merge classifier responses into the manifest. With a closed vocabulary,
/// out-of-vocabulary responses are rejected and the original label kept.
/// Responses for unknown job ids are protocol errors.
pub fn apply_reclassification(
    manifest: &DatasetManifest,
    jobs: &[ReclassJob],
    responses: &BTreeMap<String, String>,
    allowed: Option<&[String]>,
) -> Result<ApplyResult> {
    for id in responses.keys() {
        if !jobs.iter().any(|j| j.job_id == *id) {
            return Err(Error::Protocol(format!("response for unknown job '{id}'")));
        }
    }
    let mut out = manifest.clone();
    let mut out_jobs = jobs.to_vec();
    let mut rejections = Vec::new();
    for job in &mut out_jobs {
        let Some(label) = responses.get(&job.job_id) else { continue };
        if let Some(vocab) = allowed {
            if !vocab.contains(label) {
                rejections.push(RejectionRecord {
                    job_id: job.job_id.clone(),
                    response: label.clone(),
                    reason: "label outside allowed vocabulary".into(),
                });
                job.status = JobStatus::Rejected;
                continue;
            }
        }
        let ann = out.annotations.get_mut(job.annotation_index).ok_or_else(|| {
            Error::Protocol(format!("job '{}' points past annotation list", job.job_id))
        })?;
        ann.category = label.clone();
        job.status = JobStatus::Resolved { new_label: label.clone() };
    }
    Ok(ApplyResult { manifest: out, jobs: out_jobs, rejections })
}

// ---------------------------------------------------------------------------
// classifier transports

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub image_id: String,
    pub crop: Aabb,
    pub original_label: String,
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyResponse {
    pub label: String,
}

pub trait Classifier {
    fn classify(&self, request: &ClassifyRequest) -> Result<String>;
}

/// Deterministic lookup classifier for tests and offline runs. Falls back to
/// the original label when no mapping exists.
#[derive(Debug, Default, Clone)]
pub struct MockClassifier {
    pub mapping: BTreeMap<String, String>,
}

impl Classifier for MockClassifier {
    fn classify(&self, request: &ClassifyRequest) -> Result<String> {
        Ok(self
            .mapping
            .get(&request.original_label)
            .cloned()
            .unwrap_or_else(|| request.original_label.clone()))
    }
}

/// Generic HTTP-JSON classifier. POSTs a ClassifyRequest body; expects a
/// ClassifyResponse body. Endpoint and bearer token come from the
/// environment so deployments can point it at whatever model serves them.
#[derive(Debug, Clone)]
pub struct HttpClassifier {
    pub endpoint: String,
    pub bearer_token: Option<String>,
}

impl HttpClassifier {
    pub const ENDPOINT_ENV: &'static str = "CAGE_CLASSIFIER_ENDPOINT";
    pub const TOKEN_ENV: &'static str = "CAGE_CLASSIFIER_TOKEN";

    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(Self::ENDPOINT_ENV).map_err(|_| {
            Error::Config(format!("{} is not set", Self::ENDPOINT_ENV))
        })?;
        Ok(HttpClassifier { endpoint, bearer_token: std::env::var(Self::TOKEN_ENV).ok() })
    }
}

impl Classifier for HttpClassifier {
    fn classify(&self, request: &ClassifyRequest) -> Result<String> {
        let client = reqwest::blocking::Client::new();
        let mut builder = client.post(&self.endpoint).json(request);
        if let Some(token) = &self.bearer_token {
            builder = builder.bearer_auth(token);
        }
        let response = builder
            .send()
            .map_err(|e| Error::Protocol(format!("classifier request failed: {e}")))?;
        if !response.status().is_success() {
            return Err(Error::Protocol(format!(
                "classifier returned status {}",
                response.status()
            )));
        }
        let body: ClassifyResponse = response
            .json()
            .map_err(|e| Error::Protocol(format!("classifier response malformed: {e}")))?;
        Ok(body.label)
    }
}

/// Run every pending job through the classifier and collect the response map.
pub fn dispatch_jobs(
    jobs: &[ReclassJob],
    candidates: &[String],
    classifier: &dyn Classifier,
) -> Result<BTreeMap<String, String>> {
    let mut responses = BTreeMap::new();
    for job in jobs {
        if !matches!(job.status, JobStatus::Pending) {
            continue;
        }
        let request = ClassifyRequest {
            image_id: job.image_id.clone(),
            crop: job.crop,
            original_label: job.original_label.clone(),
            candidates: candidates.to_vec(),
        };
        responses.insert(job.job_id.clone(), classifier.classify(&request)?);
    }
    Ok(responses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::geometry::Geometry;
    use crate::label::manifest::{AnnotationRecord, ImageRecord, Route};

    fn manifest_with(categories: &[&str]) -> DatasetManifest {
        DatasetManifest {
            dataset: "t".into(),
            route: Route::Fop,
            images: vec![ImageRecord {
                id: "img".into(),
                width: 100,
                height: 100,
                sequence: None,
                seq_index: None,
            }],
            annotations: categories
                .iter()
                .enumerate()
                .map(|(i, c)| AnnotationRecord {
                    image_id: "img".into(),
                    category: (*c).into(),
                    geometry: Geometry::Aabb {
                        x_min: 10.0 + i as f64,
                        y_min: 10.0,
                        x_max: 30.0 + i as f64,
                        y_max: 30.0,
                    },
                })
                .collect(),
            embedding_files: vec![],
            ambiguous_labels: vec![],
        }
    }

    #[test]
    fn plans_one_job_per_ambiguous_annotation() {
        let m = manifest_with(&["vehicle", "car", "vehicle", "vehicle"]);
        let jobs =
            plan_reclassification(&m, &["vehicle".into(), "obstacle".into()], 0.0).unwrap();
        assert_eq!(jobs.len(), 3);
        assert!(jobs.iter().all(|j| j.original_label == "vehicle"));
    }

    #[test]
    fn zero_margin_crop_is_the_normalized_box() {
        let m = manifest_with(&["vehicle"]);
        let jobs = plan_reclassification(&m, &["vehicle".into()], 0.0).unwrap();
        let c = jobs[0].crop;
        assert_eq!((c.x_min, c.y_min, c.x_max, c.y_max), (0.1, 0.1, 0.3, 0.3));
    }

    #[test]
    fn margin_near_edge_clips_to_unit_square() {
        let mut m = manifest_with(&["vehicle"]);
        m.annotations[0].geometry =
            Geometry::Aabb { x_min: 0.0, y_min: 80.0, x_max: 20.0, y_max: 100.0 };
        let jobs = plan_reclassification(&m, &["vehicle".into()], 0.5).unwrap();
        let c = jobs[0].crop;
        // box 20x20, margin 10px each side, clamped at image bounds
        assert_eq!(c.x_min, 0.0);
        assert!((c.x_max - 0.3).abs() < 1e-12);
        assert!((c.y_min - 0.7).abs() < 1e-12);
        assert_eq!(c.y_max, 1.0);
    }

    #[test]
    fn open_vocabulary_accepts_any_response() {
        let m = manifest_with(&["vehicle"]);
        let jobs = plan_reclassification(&m, &["vehicle".into()], 0.0).unwrap();
        let mut responses = BTreeMap::new();
        responses.insert(jobs[0].job_id.clone(), "sedan".to_string());
        let r = apply_reclassification(&m, &jobs, &responses, None).unwrap();
        assert_eq!(r.manifest.annotations[0].category, "sedan");
        assert!(r.rejections.is_empty());
    }

    #[test]
    fn closed_vocabulary_rejects_and_keeps_original() {
        let m = manifest_with(&["vehicle"]);
        let jobs = plan_reclassification(&m, &["vehicle".into()], 0.0).unwrap();
        let mut responses = BTreeMap::new();
        responses.insert(jobs[0].job_id.clone(), "spaceship".to_string());
        let allowed = vec!["sedan".to_string(), "truck".to_string()];
        let r = apply_reclassification(&m, &jobs, &responses, Some(&allowed)).unwrap();
        assert_eq!(r.manifest.annotations[0].category, "vehicle");
        assert_eq!(r.rejections.len(), 1);
        assert!(matches!(r.jobs[0].status, JobStatus::Rejected));
    }

    #[test]
    fn empty_response_map_leaves_manifest_unchanged() {
        let m = manifest_with(&["vehicle", "car"]);
        let jobs = plan_reclassification(&m, &["vehicle".into()], 0.1).unwrap();
        let r = apply_reclassification(&m, &jobs, &BTreeMap::new(), None).unwrap();
        assert_eq!(r.manifest, m);
    }

    #[test]
    fn unknown_job_id_is_a_protocol_error() {
        let m = manifest_with(&["vehicle"]);
        let jobs = plan_reclassification(&m, &["vehicle".into()], 0.0).unwrap();
        let mut responses = BTreeMap::new();
        responses.insert("job-999999".to_string(), "sedan".to_string());
        assert!(matches!(
            apply_reclassification(&m, &jobs, &responses, None),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn identity_mock_round_trip_is_a_no_op() {
        let m = manifest_with(&["vehicle", "obstacle", "car"]);
        let jobs =
            plan_reclassification(&m, &["vehicle".into(), "obstacle".into()], 0.2).unwrap();
        let classifier = MockClassifier::default();
        let responses = dispatch_jobs(&jobs, &[], &classifier).unwrap();
        let r = apply_reclassification(&m, &jobs, &responses, None).unwrap();
        assert_eq!(r.manifest, m);
    }

    #[test]
    fn mock_lookup_produces_expected_manifest() {
        let m = manifest_with(&[
            "vehicle", "vehicle", "obstacle", "car", "vehicle", "obstacle", "vehicle",
            "vehicle", "obstacle", "vehicle",
        ]);
        let jobs =
            plan_reclassification(&m, &["vehicle".into(), "obstacle".into()], 0.0).unwrap();
        let mut mapping = BTreeMap::new();
        mapping.insert("vehicle".to_string(), "sedan".to_string());
        mapping.insert("obstacle".to_string(), "barrier".to_string());
        let responses = dispatch_jobs(&jobs, &[], &MockClassifier { mapping }).unwrap();
        let r = apply_reclassification(&m, &jobs, &responses, None).unwrap();
        let got: Vec<_> =
            r.manifest.annotations.iter().map(|a| a.category.as_str()).collect();
        assert_eq!(
            got,
            vec![
                "sedan", "sedan", "barrier", "car", "sedan", "barrier", "sedan", "sedan",
                "barrier", "sedan"
            ]
        );
    }
}
