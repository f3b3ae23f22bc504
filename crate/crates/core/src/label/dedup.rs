//! Frame deduplication by embedding cosine similarity.
//!
//! Sweep in sequence order, comparing each candidate against the most
//! recently KEPT frame rather than the raw predecessor; anchoring to the kept
//! frame stops slow drift from sneaking past the threshold one step at a
//! time. A frame is dropped when similarity is strictly greater than tau.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame_id: String,
    #[serde(default)]
    pub sequence_index: u64,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl FrameRecord {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.dim {
            return Err(Error::Manifest(format!(
                "frame '{}': dim {} but {} values",
                self.frame_id,
                self.dim,
                self.values.len()
            )));
        }
        if self.values.iter().map(|v| v * v).sum::<f64>() == 0.0 {
            return Err(Error::DegenerateEmbedding(self.frame_id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DropRecord {
    pub dropped_id: String,
    pub anchor_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct DedupResult {
    pub kept: Vec<String>,
    pub dropped: Vec<DropRecord>,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "cosine_similarity",
            detail: format!("lengths {} vs {}", a.len(), b.len()),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEmbedding("zero-norm vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Frames must already be ordered by sequence_index; tau in (-1, 1].
pub fn dedup_frames(frames: &[FrameRecord], tau: f64) -> Result<DedupResult> {
    if !(tau > -1.0 && tau <= 1.0) {
        return Err(Error::Config(format!("tau {tau} outside (-1, 1]")));
    }
    let mut kept: Vec<String> = Vec::new();
    let mut dropped = Vec::new();
    let mut anchor: Option<&FrameRecord> = None;
    for frame in frames {
        frame.validate()?;
        match anchor {
            None => {
                kept.push(frame.frame_id.clone());
                anchor = Some(frame);
            }
            Some(a) => {
                let sim = cosine_similarity(&a.values, &frame.values)?;
                if sim > tau {
                    dropped.push(DropRecord {
                        dropped_id: frame.frame_id.clone(),
                        anchor_id: a.frame_id.clone(),
                        similarity: sim,
                    });
                } else {
                    kept.push(frame.frame_id.clone());
                    anchor = Some(frame);
                }
            }
        }
    }
    Ok(DedupResult { kept, dropped })
}

/// JSONL embedding reader: one {frame_id, dim, values} object per line.
pub fn read_embeddings(path: &Path) -> Result<Vec<FrameRecord>> {
    let file = std::fs::File::open(path)?;
    let mut frames = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let frame: FrameRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Manifest(format!("embeddings line {}: {e}", i + 1))
        })?;
        frame.validate()?;
        frames.push(frame);
    }
    Ok(frames)
}

pub fn write_drop_log(path: &Path, drops: &[DropRecord]) -> Result<()> {
    let mut out = String::new();
    for d in drops {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn frame(id: &str, values: Vec<f64>) -> FrameRecord {
        FrameRecord { frame_id: id.into(), sequence_index: 0, dim: values.len(), values }
    }

    #[test]
    fn cosine_of_identical_vectors_is_one() {
        let v = vec![1.0, 2.0, 3.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_of_orthogonal_unit_vectors_is_zero() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_matches_naive_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let oracle =
                dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt()
                    * b.iter().map(|x| x * x).sum::<f64>().sqrt());
            assert!((cosine_similarity(&a, &b).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_norm_is_rejected() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateEmbedding(_))
        ));
    }

    #[test]
    fn identical_embeddings_keep_only_first() {
        let frames: Vec<_> = (0..5).map(|i| frame(&format!("f{i}"), vec![1.0, 1.0])).collect();
        let r = dedup_frames(&frames, 0.95).unwrap();
        assert_eq!(r.kept, vec!["f0"]);
        assert_eq!(r.dropped.len(), 4);
        for d in &r.dropped {
            assert_eq!(d.anchor_id, "f0");
        }
    }

    #[test]
    fn orthogonal_embeddings_all_kept() {
        let frames = vec![
            frame("a", vec![1.0, 0.0, 0.0]),
            frame("b", vec![0.0, 1.0, 0.0]),
            frame("c", vec![0.0, 0.0, 1.0]),
        ];
        let r = dedup_frames(&frames, 0.95).unwrap();
        assert_eq!(r.kept, vec!["a", "b", "c"]);
        assert!(r.dropped.is_empty());
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let r = dedup_frames(&[], 0.9).unwrap();
        assert!(r.kept.is_empty() && r.dropped.is_empty());
    }

    #[test]
    fn sweep_matches_resimulation_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.gen_range(1..20);
            let frames: Vec<_> = (0..n)
                .map(|i| {
                    frame(
                        &format!("f{i}"),
                        (0..4).map(|_| rng.gen_range(-1.0..1.0f64)).collect(),
                    )
                })
                .collect();
            let tau = 0.5;
            let got = dedup_frames(&frames, tau).unwrap();
            // independent re-simulation of the anchor-to-kept sweep
            let mut want: Vec<String> = Vec::new();
            let mut anchor: Option<usize> = None;
            for (i, f) in frames.iter().enumerate() {
                let keep = match anchor {
                    None => true,
                    Some(a) => {
                        cosine_similarity(&frames[a].values, &f.values).unwrap() <= tau
                    }
                };
                if keep {
                    want.push(f.frame_id.clone());
                    anchor = Some(i);
                }
            }
            assert_eq!(got.kept, want);
        }
    }

    #[test]
    fn dedup_is_idempotent_and_scale_invariant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let frames: Vec<_> = (0..30)
            .map(|i| {
                frame(&format!("f{i}"), (0..4).map(|_| rng.gen_range(-1.0..1.0f64)).collect())
            })
            .collect();
        let r1 = dedup_frames(&frames, 0.8).unwrap();
        let survivors: Vec<_> =
            frames.iter().filter(|f| r1.kept.contains(&f.frame_id)).cloned().collect();
        let r2 = dedup_frames(&survivors, 0.8).unwrap();
        assert_eq!(r2.kept, r1.kept);
        assert!(r2.dropped.is_empty());
        let scaled: Vec<_> = frames
            .iter()
            .map(|f| {
                let mut g = f.clone();
                g.values.iter_mut().for_each(|v| *v *= 3.5);
                g
            })
            .collect();
        assert_eq!(dedup_frames(&scaled, 0.8).unwrap().kept, r1.kept);
    }
}
