//! On-disk dataset format, record validation, IoU label assignment and the
//! image-level label rule.
//!
//! A dataset file is UTF-8 JSONL. The first line is a header
//! `{"format":"filter-ds","version":1,"feature_dim":D}`; every following
//! line holds one image with its faces.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "filter-ds";
pub const FORMAT_VERSION: u32 = 1;

/// Axis-aligned box in pixels: left, top, width, height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite bbox [{x}, {y}, {w}, {h}]")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Invalid(format!("bbox needs w > 0 and h > 0, got w={w} h={h}")));
        }
        Ok(BBox { x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceRecord {
    pub face_id: String,
    pub bbox: BBox,
    pub label: u8,
    pub feature: Vec<f64>,
    pub track_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub label: u8,
    pub faces: Vec<FaceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl ImageRecord {
    pub fn face_labels(&self) -> Vec<u8> {
        self.faces.iter().map(|f| f.label).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub images: Vec<ImageRecord>,
    pub split_tag: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    feature_dim: usize,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    split_tag: String,
}

impl Dataset {
    pub fn num_faces(&self) -> usize {
        self.images.iter().map(|im| im.faces.len()).sum()
    }

    /// Checks every record invariant. `line_of(i)` maps image index to the
    /// line number used in error messages.
    fn validate_with(&self, line_of: impl Fn(usize) -> usize) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Invalid("feature_dim must be positive".into()));
        }
        let mut seen = HashSet::new();
        for (i, image) in self.images.iter().enumerate() {
            let line = line_of(i);
            validate_image(image, self.feature_dim, line)?;
            if !seen.insert(image.image_id.as_str()) {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate image_id {:?}", image.image_id),
                });
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(|i| i + 2)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = Header {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            feature_dim: self.feature_dim,
            split_tag: self.split_tag.clone(),
        };
        let mut out = serde_json::to_string(&header).map_err(|e| Error::Invalid(e.to_string()))?;
        out.push('\n');
        for image in &self.images {
            out.push_str(&serde_json::to_string(image).map_err(|e| Error::Invalid(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Dataset> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, first) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty file, expected header".into(),
        })?;
        let header: Header = serde_json::from_str(first).map_err(|e| Error::Parse {
            line: 1,
            msg: format!("bad header: {e}"),
        })?;
        if header.format != FORMAT_NAME {
            return Err(Error::Parse {
                line: 1,
                msg: format!("format {:?}, expected {FORMAT_NAME:?}", header.format),
            });
        }
        if header.version != FORMAT_VERSION {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unsupported version {}", header.version),
            });
        }
        let mut images = Vec::new();
        let mut line_numbers = Vec::new();
        for (line, text) in lines {
            if text.trim().is_empty() {
                continue;
            }
            let image: ImageRecord = serde_json::from_str(text).map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?;
            images.push(image);
            line_numbers.push(line);
        }
        let ds = Dataset {
            feature_dim: header.feature_dim,
            images,
            split_tag: header.split_tag,
        };
        ds.validate_with(|i| line_numbers[i])?;
        Ok(ds)
    }
}

fn validate_image(image: &ImageRecord, dim: usize, line: usize) -> Result<()> {
    let bad = |msg: String| Error::Parse { line, msg };
    if image.faces.is_empty() {
        return Err(bad(format!("image {} has no faces", image.image_id)));
    }
    if image.label > 1 {
        return Err(bad(format!(
            "image {} label {} not in {{0,1}}",
            image.image_id, image.label
        )));
    }
    check_score(image.score).map_err(|m| bad(format!("image {}: {m}", image.image_id)))?;
    for face in &image.faces {
        if face.label > 1 {
            return Err(bad(format!(
                "face {} label {} not in {{0,1}}",
                face.face_id, face.label
            )));
        }
        if face.feature.len() != dim {
            return Err(Error::DimensionMismatch {
                line,
                face_id: face.face_id.clone(),
                expected: dim,
                got: face.feature.len(),
            });
        }
        if !face.feature.iter().all(|v| v.is_finite()) {
            return Err(bad(format!("face {} has a non-finite feature", face.face_id)));
        }
        if crate::numeric::norm(&face.feature) <= 0.0 {
            return Err(bad(format!("face {} has a zero feature vector", face.face_id)));
        }
        check_score(face.score).map_err(|m| bad(format!("face {}: {m}", face.face_id)))?;
    }
    let expected = image_label(&image.face_labels())?;
    if image.label != expected {
        return Err(Error::LabelRule {
            line,
            image_id: image.image_id.clone(),
            label: image.label,
            expected,
        });
    }
    Ok(())
}

fn check_score(score: Option<f64>) -> std::result::Result<(), String> {
    match score {
        Some(s) if !(0.0..=1.0).contains(&s) => Err(format!("score {s} outside [0,1]")),
        _ => Ok(()),
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_jsonl(&text)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ds.validate()?;
    fs::write(path, ds.to_jsonl()?).map_err(|e| Error::io(path, e))
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let ih = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Assignment {
    Matched { label: u8, gt_index: usize, iou: f64 },
    Unmatched { best_iou: f64 },
}

impl Assignment {
    pub fn label(&self) -> Option<u8> {
        match self {
            Assignment::Matched { label, .. } => Some(*label),
            Assignment::Unmatched { .. } => None,
        }
    }
}

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Gives each detected box the label of its highest-IoU ground-truth box.
/// Equal IoUs go to the lowest ground-truth index; a best IoU below
/// `threshold` leaves the detection unmatched.
pub fn assign_labels(detected: &[BBox], gt: &[(BBox, u8)], threshold: f64) -> Result<Vec<Assignment>> {
    if gt.is_empty() {
        return Err(Error::Invalid(
            "assign_labels needs at least one ground-truth box".into(),
        ));
    }
    Ok(detected
        .iter()
        .map(|d| {
            let (best, best_iou) =
                gt.iter()
                    .enumerate()
                    .map(|(k, (g, _))| (k, iou(d, g)))
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (k, v)| if v > acc.1 { (k, v) } else { acc },
                    );
            if best_iou >= threshold {
                Assignment::Matched {
                    label: gt[best].1,
                    gt_index: best,
                    iou: best_iou,
                }
            } else {
                Assignment::Unmatched { best_iou }
            }
        })
        .collect())
}

/// An image is fake as soon as one of its faces is.
pub fn image_label(face_labels: &[u8]) -> Result<u8> {
    face_labels
        .iter()
        .copied()
        .max()
        .ok_or_else(|| Error::Invalid("image_label of an empty face list".into()))
}
