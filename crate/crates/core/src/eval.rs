//! Face-, image- and track-level metrics, and score export.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::model::{predict, ModelParams};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_scored(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Invalid(format!("label {l} is not 0 or 1")));
    }
    Ok(())
}

/// Area under the ROC curve as the Mann–Whitney statistic
/// `P(s_fake > s_real) + ½ P(tie)`, by sorting and mid-ranking.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scored(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid("roc_auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the positive rank sum, kept integral: a tie block covering
    // ranks r..r+k-1 gives every member the mid-rank (2r + k - 1) / 2.
    let mut twice_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let k = (end - start) as u64;
        let twice_mid = 2 * (start as u64 + 1) + k - 1;
        let pos_in_block = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u64;
        twice_rank_sum += twice_mid * pos_in_block;
        start = end;
    }
    // 2U = 2·R_pos − P(P + 1)
    let twice_u = twice_rank_sum - pos * (pos + 1);
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Fraction of items whose thresholded score (`score ≥ threshold`) equals the label.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_scored(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::Invalid("accuracy of an empty set".into()));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| u8::from(s >= threshold) == l)
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackScore {
    pub track_id: String,
    /// Mean of the track's face scores.
    pub score: f64,
    /// A track is fake if any of its faces is.
    pub label: u8,
    pub faces: usize,
}

/// Averages face scores per track; faces without a track id are skipped.
pub fn track_scores(ds: &Dataset) -> Result<Vec<TrackScore>> {
    let mut tracks: BTreeMap<&str, (Vec<f64>, u8)> = BTreeMap::new();
    for face in ds.images.iter().flat_map(|im| &im.faces) {
        let Some(id) = face.track_id.as_deref() else { continue };
        let score = face
            .score
            .ok_or_else(|| Error::Invalid(format!("face {} has no score", face.face_id)))?;
        let e = tracks.entry(id).or_insert((Vec::new(), 0));
        e.0.push(score);
        e.1 = e.1.max(face.label);
    }
    tracks
        .into_iter()
        .map(|(id, (scores, label))| {
            Ok(TrackScore {
                track_id: id.to_string(),
                score: mean_score(&scores)?,
                label,
                faces: scores.len(),
            })
        })
        .collect()
}

/// Arithmetic mean of one track's scores.
pub fn mean_score(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Invalid("empty track".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Copy of `ds` with every face and image score filled in.
pub fn score_dataset(params: &ModelParams, ds: &Dataset) -> Result<Dataset> {
    let pred = predict(params, &ds.images)?;
    let mut out = ds.clone();
    for ((im, faces), img) in out.images.iter_mut().zip(pred.face_scores).zip(pred.image_scores) {
        im.score = Some(img);
        for (f, s) in im.faces.iter_mut().zip(faces) {
            f.score = Some(s);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub face_auc: Option<f64>,
    pub face_acc: f64,
    pub image_auc: Option<f64>,
    pub image_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub track_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub track_acc: Option<f64>,
    pub n_faces: usize,
    pub n_images: usize,
}

fn auc_or_none(scores: &[f64], labels: &[u8], what: &str) -> Result<Option<f64>> {
    match roc_auc(scores, labels) {
        Ok(a) => Ok(Some(a)),
        Err(Error::Invalid(_)) => {
            warn!("{what} AUC undefined: only one class present");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Metrics of an already scored dataset.
pub fn metrics(scored: &Dataset, track_level: bool) -> Result<MetricsReport> {
    let missing = |what: &str, id: &str| Error::Invalid(format!("{what} {id} has no score"));
    let mut face_scores = Vec::new();
    let mut face_labels = Vec::new();
    for f in scored.images.iter().flat_map(|im| &im.faces) {
        face_scores.push(f.score.ok_or_else(|| missing("face", &f.face_id))?);
        face_labels.push(f.label);
    }
    let image_scores: Vec<f64> = scored
        .images
        .iter()
        .map(|im| im.score.ok_or_else(|| missing("image", &im.image_id)))
        .collect::<Result<_>>()?;
    let image_labels: Vec<u8> = scored.images.iter().map(|im| im.label).collect();
    let (mut track_auc, mut track_acc) = (None, None);
    if track_level {
        let tracks = track_scores(scored)?;
        if tracks.is_empty() {
            return Err(Error::Invalid(
                "track-level metrics requested but no face has a track id".into(),
            ));
        }
        let s: Vec<f64> = tracks.iter().map(|t| t.score).collect();
        let l: Vec<u8> = tracks.iter().map(|t| t.label).collect();
        track_auc = auc_or_none(&s, &l, "track")?;
        track_acc = Some(accuracy(&s, &l, DEFAULT_THRESHOLD)?);
    }
    Ok(MetricsReport {
        face_auc: auc_or_none(&face_scores, &face_labels, "face")?,
        face_acc: accuracy(&face_scores, &face_labels, DEFAULT_THRESHOLD)?,
        image_auc: auc_or_none(&image_scores, &image_labels, "image")?,
        image_acc: accuracy(&image_scores, &image_labels, DEFAULT_THRESHOLD)?,
        track_auc,
        track_acc,
        n_faces: face_scores.len(),
        n_images: image_scores.len(),
    })
}

pub fn evaluate(params: &ModelParams, ds: &Dataset, track_level: bool) -> Result<MetricsReport> {
    metrics(&score_dataset(params, ds)?, track_level)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayFace {
    pub face_id: String,
    pub bbox: BBox,
    pub gt_label: u8,
    pub score: f64,
    pub predicted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub image_id: String,
    pub gt_label: u8,
    pub score: Option<f64>,
    pub faces: Vec<OverlayFace>,
}

pub fn overlay(image: &ImageRecord) -> Result<Overlay> {
    let faces = image
        .faces
        .iter()
        .map(|f| {
            let score = f
                .score
                .ok_or_else(|| Error::Invalid(format!("face {} has no score to overlay", f.face_id)))?;
            Ok(OverlayFace {
                face_id: f.face_id.clone(),
                bbox: f.bbox,
                gt_label: f.label,
                score,
                predicted: score >= DEFAULT_THRESHOLD,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Overlay {
        image_id: image.image_id.clone(),
        gt_label: image.label,
        score: image.score,
        faces,
    })
}

/// Writes the per-face annotation JSON for one scored image.
pub fn export_overlay(image: &ImageRecord, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(&overlay(image)?).map_err(|e| Error::Invalid(e.to_string()))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_overlay(path: impl AsRef<Path>) -> Result<Overlay> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FaceRecord;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.3; 5], &[0, 1, 0, 1, 1]).unwrap(), 0.5);
        assert!(roc_auc(&[0.3, 0.4], &[1, 1]).is_err());
        assert!(roc_auc(&[f64::NAN, 0.4], &[0, 1]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0.9, 0.1], &[1, 0], 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.9, 0.9], &[1, 0], 0.5).unwrap(), 0.5);
        assert_eq!(accuracy(&[0.9], &[1], 0.95).unwrap(), 0.0);
        assert_eq!(accuracy(&[0.5], &[1], 0.5).unwrap(), 1.0);
        assert!(accuracy(&[], &[], 0.5).is_err());
    }

    #[test]
    fn track_means() {
        assert!((mean_score(&[0.2, 0.4]).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(mean_score(&[0.7]).unwrap(), 0.7);
        assert!(mean_score(&[]).is_err());
    }

    fn face(id: &str, label: u8, score: f64) -> FaceRecord {
        FaceRecord {
            face_id: id.into(),
            bbox: BBox {
                x: 1.0,
                y: 2.0,
                w: 3.0,
                h: 4.0,
            },
            label,
            feature: vec![1.0, 0.0],
            track_id: None,
            score: Some(score),
        }
    }

    #[test]
    fn overlay_round_trip() {
        let im = ImageRecord {
            image_id: "a".into(),
            label: 1,
            faces: vec![face("a-0", 1, 0.97), face("a-1", 0, 0.03)],
            score: Some(0.8),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.json");
        export_overlay(&im, &path).unwrap();
        let o = read_overlay(&path).unwrap();
        assert!(o.faces[0].predicted);
        assert!(!o.faces[1].predicted);
        assert_eq!(o, overlay(&im).unwrap());
        let mut unscored = im.clone();
        unscored.faces[0].score = None;
        assert!(export_overlay(&unscored, &path).is_err());
    }
}
