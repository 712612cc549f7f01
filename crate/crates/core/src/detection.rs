//! Boxes, detections and non-maximum suppression.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::Argument(format!("degenerate box {b:?}")));
        }
        if [x1, y1, x2, y2].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Argument(format!("box {b:?} outside [0,1]")));
        }
        Ok(b)
    }

    /// Builds a box from center/size, clipping to the unit square. Returns
    /// `None` when nothing of it remains inside.
    pub fn from_center_clipped(cx: f64, cy: f64, w: f64, h: f64) -> Option<Self> {
        let x1 = (cx - w / 2.0).clamp(0.0, 1.0);
        let x2 = (cx + w / 2.0).clamp(0.0, 1.0);
        let y1 = (cy - h / 2.0).clamp(0.0, 1.0);
        let y2 = (cy + h / 2.0).clamp(0.0, 1.0);
        (x1 < x2 && y1 < y2).then_some(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection(&self, other: &BoundingBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub objectness: f64,
    pub class_id: usize,
    pub class_score: f64,
}

impl Detection {
    /// Score used for thresholding and ranking final-stage detections.
    pub fn score(&self) -> f64 {
        self.objectness * self.class_score
    }

    /// The confidence an attack minimizes.
    pub fn attack_confidence(&self, kind: ConfidenceKind) -> f64 {
        match kind {
            ConfidenceKind::Objectness => self.objectness,
            ConfidenceKind::ObjectnessTimesClass => self.score(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceKind {
    #[default]
    Objectness,
    ObjectnessTimesClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Raw,
    Final,
}

/// Detections for one image of a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_index: usize,
    pub stage: StageKind,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn of_class(&self, class_id: usize) -> impl Iterator<Item = &Detection> {
        self.detections.iter().filter(move |d| d.class_id == class_id)
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

/// Final-stage filtering parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostProcess {
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

impl Default for PostProcess {
    fn default() -> Self {
        Self {
            conf_threshold: 0.25,
            nms_iou: 0.45,
        }
    }
}

/// Returns the indices kept by greedy class-aware NMS, ordered by descending score.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score()
            .partial_cmp(&dets[a].score())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (i, &a) in order.iter().enumerate() {
        if suppressed[a] {
            continue;
        }
        keep.push(a);
        for &b in &order[i + 1..] {
            if !suppressed[b]
                && dets[a].class_id == dets[b].class_id
                && dets[a].bbox.iou(&dets[b].bbox) > iou_threshold
            {
                suppressed[b] = true;
            }
        }
    }
    keep
}

/// Confidence threshold followed by NMS; the result is a subset of `raw`.
pub fn finalize(raw: &DetectionSet, params: &PostProcess) -> DetectionSet {
    let candidates: Vec<Detection> = raw
        .detections
        .iter()
        .copied()
        .filter(|d| d.score() >= params.conf_threshold)
        .collect();
    let keep = nms(&candidates, params.nms_iou);
    DetectionSet {
        image_index: raw.image_index,
        stage: StageKind::Final,
        detections: keep.into_iter().map(|i| candidates[i]).collect(),
    }
}
