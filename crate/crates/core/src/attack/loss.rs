use serde::{Deserialize, Serialize};

use crate::detection::{ConfidenceKind, DetectionSet};
use crate::detector::ConfidenceGrad;
use crate::error::{Error, Result};
use crate::image::CHANNELS;

/// Added under the square root of the total-variation term.
pub const TV_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceReduction {
    /// Mean over every target candidate of the batch.
    #[default]
    MeanAll,
    /// Mean over images of each image's highest target confidence.
    MaxPerImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionLoss {
    pub value: f64,
    /// Per image, per raw candidate.
    pub grads: Vec<Vec<ConfidenceGrad>>,
    /// Target candidates that entered the loss.
    pub count: usize,
    /// True when nothing of the target class was present.
    pub no_signal: bool,
}

fn conf_grad(kind: ConfidenceKind, objectness: f64, class_score: f64, g: f64) -> ConfidenceGrad {
    match kind {
        ConfidenceKind::Objectness => ConfidenceGrad {
            objectness: g,
            class_score: 0.0,
        },
        ConfidenceKind::ObjectnessTimesClass => ConfidenceGrad {
            objectness: g * class_score,
            class_score: g * objectness,
        },
    }
}

/// Reduces the confidences of raw target-class candidates to a scalar and
/// returns its gradient with respect to every candidate.
pub fn detection_loss(
    sets: &[DetectionSet],
    target_class: usize,
    reduction: ConfidenceReduction,
    kind: ConfidenceKind,
) -> DetectionLoss {
    let mut grads: Vec<Vec<ConfidenceGrad>> = sets
        .iter()
        .map(|s| vec![ConfidenceGrad::default(); s.len()])
        .collect();
    let mut count = 0;
    let mut value = 0.0;
    match reduction {
        ConfidenceReduction::MeanAll => {
            let n: usize = sets.iter().map(|s| s.of_class(target_class).count()).sum();
            if n > 0 {
                let w = 1.0 / n as f64;
                for (s, g) in sets.iter().zip(grads.iter_mut()) {
                    for (d, gd) in s.detections.iter().zip(g.iter_mut()) {
                        if d.class_id == target_class {
                            value += d.attack_confidence(kind);
                            *gd = conf_grad(kind, d.objectness, d.class_score, w);
                        }
                    }
                }
                value *= w;
            }
            count = n;
        }
        ConfidenceReduction::MaxPerImage => {
            let mut best = Vec::new();
            for (i, s) in sets.iter().enumerate() {
                let top = s
                    .detections
                    .iter()
                    .enumerate()
                    .filter(|(_, d)| d.class_id == target_class)
                    .max_by(|a, b| a.1.attack_confidence(kind).total_cmp(&b.1.attack_confidence(kind)));
                count += s.of_class(target_class).count();
                if let Some((j, d)) = top {
                    best.push((i, j, d));
                }
            }
            if !best.is_empty() {
                let w = 1.0 / best.len() as f64;
                for (i, j, d) in best {
                    value += d.attack_confidence(kind) * w;
                    grads[i][j] = conf_grad(kind, d.objectness, d.class_score, w);
                }
            }
        }
    }
    DetectionLoss {
        value,
        grads,
        count,
        no_signal: count == 0,
    }
}

pub fn total_loss(detection: f64, tv: f64, tv_weight: f64) -> f64 {
    detection + tv_weight * tv
}

/// Isotropic total variation of an HWC buffer: the mean over pixels and
/// channels of `sqrt(dx² + dy² + ε)` with forward differences, zero past the
/// last row/column.
pub fn tv_loss(data: &[f64], height: usize, width: usize) -> Result<f64> {
    check_len(data, height, width)?;
    let mut sum = 0.0;
    for y in 0..height {
        for x in 0..width {
            for c in 0..CHANNELS {
                let (dx, dy) = diffs(data, height, width, y, x, c);
                sum += (dx * dx + dy * dy + TV_EPSILON).sqrt();
            }
        }
    }
    Ok(sum / data.len() as f64)
}

pub fn tv_loss_and_grad(data: &[f64], height: usize, width: usize) -> Result<(f64, Vec<f64>)> {
    check_len(data, height, width)?;
    let n = data.len() as f64;
    let mut sum = 0.0;
    let mut grad = vec![0.0; data.len()];
    let at = |y: usize, x: usize, c: usize| (y * width + x) * CHANNELS + c;
    for y in 0..height {
        for x in 0..width {
            for c in 0..CHANNELS {
                let (dx, dy) = diffs(data, height, width, y, x, c);
                let r = (dx * dx + dy * dy + TV_EPSILON).sqrt();
                sum += r;
                let (gx, gy) = (dx / (r * n), dy / (r * n));
                if x + 1 < width {
                    grad[at(y, x + 1, c)] += gx;
                    grad[at(y, x, c)] -= gx;
                }
                if y + 1 < height {
                    grad[at(y + 1, x, c)] += gy;
                    grad[at(y, x, c)] -= gy;
                }
            }
        }
    }
    Ok((sum / n, grad))
}

fn diffs(data: &[f64], height: usize, width: usize, y: usize, x: usize, c: usize) -> (f64, f64) {
    let at = |y: usize, x: usize| data[(y * width + x) * CHANNELS + c];
    let v = at(y, x);
    let dx = if x + 1 < width { at(y, x + 1) - v } else { 0.0 };
    let dy = if y + 1 < height { at(y + 1, x) - v } else { 0.0 };
    (dx, dy)
}

fn check_len(data: &[f64], height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || data.len() != height * width * CHANNELS {
        return Err(Error::shape(
            format!("{height}x{width}x{CHANNELS} (non-empty)"),
            data.len().to_string(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{BoundingBox, Detection, StageKind};

    fn set(confs: &[f64], class_id: usize) -> DetectionSet {
        let bbox = BoundingBox::new(0.1, 0.1, 0.5, 0.5).unwrap();
        DetectionSet {
            image_index: 0,
            stage: StageKind::Raw,
            detections: confs
                .iter()
                .map(|&c| Detection {
                    bbox,
                    objectness: c,
                    class_id,
                    class_score: 0.5,
                })
                .collect(),
        }
    }

    #[test]
    fn mean_all_example() {
        let l = detection_loss(
            &[set(&[0.8, 0.6, 0.4], 0)],
            0,
            ConfidenceReduction::MeanAll,
            ConfidenceKind::Objectness,
        );
        assert!((l.value - 0.6).abs() < 1e-15);
        assert_eq!(l.count, 3);
        assert!(l.grads[0].iter().all(|g| (g.objectness - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn max_per_image_example() {
        let l = detection_loss(
            &[set(&[0.9, 0.1], 0), set(&[0.5], 0)],
            0,
            ConfidenceReduction::MaxPerImage,
            ConfidenceKind::Objectness,
        );
        assert!((l.value - 0.7).abs() < 1e-15);
        assert_eq!(l.grads[0][0].objectness, 0.5);
        assert_eq!(l.grads[0][1].objectness, 0.0);
        assert_eq!(l.grads[1][0].objectness, 0.5);
    }

    #[test]
    fn empty_is_no_signal() {
        for r in [ConfidenceReduction::MeanAll, ConfidenceReduction::MaxPerImage] {
            let l = detection_loss(&[set(&[0.9], 1)], 0, r, ConfidenceKind::Objectness);
            assert_eq!(l.value, 0.0);
            assert!(l.no_signal);
            assert_eq!(l.grads[0][0], ConfidenceGrad::default());
        }
    }

    #[test]
    fn product_confidence_gradient() {
        let l = detection_loss(
            &[set(&[0.8], 0)],
            0,
            ConfidenceReduction::MeanAll,
            ConfidenceKind::ObjectnessTimesClass,
        );
        assert!((l.value - 0.4).abs() < 1e-15);
        assert_eq!(l.grads[0][0].objectness, 0.5);
        assert_eq!(l.grads[0][0].class_score, 0.8);
    }

    #[test]
    fn total_loss_example() {
        assert!((total_loss(0.6, 0.2, 2.5) - 1.1).abs() < 1e-15);
    }

    #[test]
    fn constant_image_has_floor_tv() {
        let data = vec![0.3; 5 * 4 * 3];
        let tv = tv_loss(&data, 5, 4).unwrap();
        assert!(tv <= 1.1e-6 && tv > 0.0);
    }

    #[test]
    fn two_by_two_by_hand() {
        // every channel holds [[0,1],[0,1]]
        let mut data = Vec::new();
        for v in [0.0, 1.0, 0.0, 1.0] {
            data.extend([v; 3]);
        }
        // (0,0): dx=1 dy=0 -> 1; (0,1): dx=0 dy=0 -> 1e-6; (1,0): 1; (1,1): 1e-6
        let expected = (2.0 * (1.0f64 + 1e-12).sqrt() + 2.0 * 1e-6) / 4.0;
        assert!((tv_loss(&data, 2, 2).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn grad_matches_value_and_finite_differences() {
        let mut s = 17u64;
        let data: Vec<f64> = (0..4 * 5 * 3)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                (s >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        let (v, g) = tv_loss_and_grad(&data, 4, 5).unwrap();
        assert_eq!(v, tv_loss(&data, 4, 5).unwrap());
        let h = 1e-6;
        for i in 0..data.len() {
            let mut p = data.clone();
            p[i] += h;
            let mut m = data.clone();
            m[i] -= h;
            let fd = (tv_loss(&p, 4, 5).unwrap() - tv_loss(&m, 4, 5).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert!(matches!(tv_loss(&[0.0; 5], 1, 2), Err(Error::Shape { .. })));
    }
}
