//! Mean average precision and the patch-by-detector transfer matrix.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::applier::{apply_patch, ApplyOptions, SideMode};
use crate::detection::{BoundingBox, DetectionSet, PostProcess};
use crate::detector::{detect, DetectorAdapter, Stage};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::patch::{AdversarialPatch, InitMode};

/// A scored prediction on image `image`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Average precision in [0,1] for one class.
///
/// Predictions are ranked by descending score (ties keep input order) and
/// matched greedily, one-to-one, to the unmatched ground truth box of the same
/// image with the highest IoU, if that IoU reaches `iou_thr`. The precision
/// envelope is integrated over every recall step.
pub fn average_precision(preds: &[ScoredBox], gt: &[Vec<BoundingBox>], iou_thr: f64) -> f64 {
    let n_gt: usize = gt.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return if preds.is_empty() { 1.0 } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(preds.len());
    let mut recall = Vec::with_capacity(preds.len());
    for (rank, &i) in order.iter().enumerate() {
        let p = &preds[i];
        let boxes = gt.get(p.image).map(Vec::as_slice).unwrap_or(&[]);
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in boxes.iter().enumerate() {
            if used[p.image][j] {
                continue;
            }
            let iou = p.bbox.iou(g);
            if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[p.image][j] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// mAP on a 0-100 scale over `classes`, or over every class present in either
/// side when `classes` is `None`. Both sides empty scores 100.
pub fn map_score(
    gt: &[DetectionSet],
    preds: &[DetectionSet],
    classes: Option<&[usize]>,
    iou_thr: f64,
) -> Result<f64> {
    if gt.len() != preds.len() {
        return Err(Error::shape(
            format!("{} prediction sets", gt.len()),
            preds.len().to_string(),
        ));
    }
    let class_list: Vec<usize> = match classes {
        Some(c) => c.to_vec(),
        None => {
            let mut c: Vec<usize> = gt
                .iter()
                .chain(preds)
                .flat_map(|s| s.detections.iter().map(|d| d.class_id))
                .collect();
            c.sort_unstable();
            c.dedup();
            c
        }
    };
    if class_list.is_empty() {
        return Ok(100.0);
    }
    let mut total = 0.0;
    for &cls in &class_list {
        let g: Vec<Vec<BoundingBox>> = gt
            .iter()
            .map(|s| s.of_class(cls).map(|d| d.bbox).collect())
            .collect();
        let p: Vec<ScoredBox> = preds
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                s.of_class(cls).map(move |d| ScoredBox {
                    image: i,
                    bbox: d.bbox,
                    score: d.score(),
                })
            })
            .collect();
        total += average_precision(&p, &g, iou_thr);
    }
    Ok(100.0 * total / class_list.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub patch_scale: f64,
    pub side_mode: SideMode,
    pub target_class: usize,
    pub iou_thr: f64,
    /// Score every class instead of the target class only.
    pub all_classes: bool,
    pub post: PostProcess,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            patch_scale: 0.15,
            side_mode: SideMode::GeometricMean,
            target_class: 0,
            iou_thr: 0.5,
            all_classes: false,
            post: PostProcess::default(),
        }
    }
}

impl EvalOptions {
    fn classes(&self) -> Option<Vec<usize>> {
        (!self.all_classes).then(|| vec![self.target_class])
    }
}

/// Clean final detections, used as ground truth.
pub fn clean_detections(
    adapter: &mut dyn DetectorAdapter,
    images: &[Image],
    opts: &EvalOptions,
) -> Result<Vec<DetectionSet>> {
    detect(adapter, images, Stage::Final(opts.post))
}

/// mAP of detections on patched images against `clean`.
pub fn evaluate_against(
    adapter: &mut dyn DetectorAdapter,
    images: &[Image],
    clean: &[DetectionSet],
    patch: &AdversarialPatch,
    opts: &EvalOptions,
) -> Result<f64> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let apply = ApplyOptions {
        side_mode: opts.side_mode,
        ..ApplyOptions::plain(opts.patch_scale, opts.target_class)
    };
    let patched = apply_patch(images, clean, &patch.to_image(), &apply, &mut unused)?;
    let preds = detect(adapter, &patched.images, Stage::Final(opts.post))?;
    map_score(clean, &preds, opts.classes().as_deref(), opts.iou_thr)
}

/// mAP (0-100) of `adapter` on `images` with `patch` applied, with the clean
/// predictions as ground truth. Images must already be at the adapter's input
/// size.
pub fn evaluate_patch(
    adapter: &mut dyn DetectorAdapter,
    images: &[Image],
    patch: &AdversarialPatch,
    opts: &EvalOptions,
) -> Result<f64> {
    let clean = clean_detections(adapter, images, opts)?;
    evaluate_against(adapter, images, &clean, patch, opts)
}

/// The gray, random and white control patches.
pub fn control_patches(height: usize, width: usize, seed: u64) -> Result<Vec<(String, AdversarialPatch)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [InitMode::Gray, InitMode::Random, InitMode::White]
        .into_iter()
        .map(|m| Ok((m.as_str().to_owned(), AdversarialPatch::init(height, width, m, None, &mut rng)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub patch_id: String,
    pub is_control: bool,
    /// Adapter the patch was trained against.
    pub white_box: Option<String>,
    /// One mAP per column.
    pub cells: Vec<f64>,
    pub black_box_avg: Option<f64>,
}

impl ReportRow {
    pub fn is_white_box(&self, column: &str) -> bool {
        self.white_box.as_deref() == Some(column)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub dataset: String,
    pub iou_thr: f64,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl TransferReport {
    pub fn cell(&self, patch_id: &str, column: &str) -> Option<f64> {
        let r = self.rows.iter().find(|r| r.patch_id == patch_id)?;
        let c = self.columns.iter().position(|c| c == column)?;
        Some(r.cells[c])
    }

    pub fn row(&self, patch_id: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.patch_id == patch_id)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let ser = |e: csv::Error| Error::Serde(e.to_string());
        w.write_record(["patch_id", "adapter", "dataset", "mAP", "is_white_box"])
            .map_err(ser)?;
        for r in &self.rows {
            for (c, v) in self.columns.iter().zip(&r.cells) {
                w.write_record([
                    r.patch_id.as_str(),
                    c,
                    &self.dataset,
                    &format!("{v:.4}"),
                    if r.is_white_box(c) { "true" } else { "false" },
                ])
                .map_err(ser)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fixed-width table; white-box cells carry a `*`.
    pub fn to_text(&self) -> String {
        let mut header = vec!["patch".to_owned()];
        header.extend(self.columns.iter().cloned());
        header.push("Black-Box Avg".into());
        let mut lines: Vec<Vec<String>> = vec![header];
        for r in &self.rows {
            let mut line = vec![r.patch_id.clone()];
            for (c, v) in self.columns.iter().zip(&r.cells) {
                let mark = if r.is_white_box(c) { "*" } else { "" };
                line.push(format!("{v:.2}{mark}"));
            }
            line.push(r.black_box_avg.map_or("-".into(), |v| format!("{v:.2}")));
            lines.push(line);
        }
        let ncol = lines[0].len();
        let widths: Vec<usize> = (0..ncol)
            .map(|i| lines.iter().map(|l| l[i].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    if i == 0 {
                        format!("{s:<w$}", w = widths[i])
                    } else {
                        format!("{s:>w$}", w = widths[i])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }
}

/// One detector column of the matrix. A failed construction drops the column.
pub struct Column {
    pub name: String,
    pub adapter: Result<Box<dyn DetectorAdapter>>,
}

/// Evaluates every patch on every adapter. `images` are letterboxed to each
/// adapter's input size. Columns run in parallel.
pub fn transfer_matrix(
    patches: &[(String, AdversarialPatch)],
    columns: Vec<Column>,
    images: &[Image],
    dataset: &str,
    opts: &EvalOptions,
) -> Result<TransferReport> {
    let mut live = Vec::new();
    for col in columns {
        match col.adapter {
            Ok(a) => live.push((col.name, a)),
            Err(e) => log::warn!("dropping adapter column `{}`: {e}", col.name),
        }
    }
    if live.is_empty() {
        return Err(Error::Argument("no usable adapters to evaluate".into()));
    }
    let results: Vec<Result<Vec<f64>>> = live
        .par_iter_mut()
        .map(|(_, adapter)| {
            let size = adapter.input_size();
            let imgs: Vec<Image> = images.iter().map(|im| im.letterbox(size)).collect();
            let clean = clean_detections(adapter.as_mut(), &imgs, opts)?;
            patches
                .iter()
                .map(|(_, p)| evaluate_against(adapter.as_mut(), &imgs, &clean, p, opts))
                .collect()
        })
        .collect();
    let per_column: Vec<Vec<f64>> = results.into_iter().collect::<Result<_>>()?;
    let names: Vec<String> = live.into_iter().map(|(n, _)| n).collect();
    let rows = patches
        .iter()
        .enumerate()
        .map(|(i, (id, p))| {
            let is_control = InitMode::CONTROLS.iter().any(|m| m.as_str() == p.meta.mode);
            let white_box = if is_control { None } else { p.meta.white_box.clone() };
            let cells: Vec<f64> = per_column.iter().map(|c| c[i]).collect();
            let black_box: Vec<f64> = names
                .iter()
                .zip(&cells)
                .filter(|(n, _)| white_box.as_deref() != Some(n.as_str()))
                .map(|(_, v)| *v)
                .collect();
            let black_box_avg = (!is_control && !black_box.is_empty())
                .then(|| black_box.iter().sum::<f64>() / black_box.len() as f64);
            ReportRow {
                patch_id: id.clone(),
                is_control,
                white_box,
                cells,
                black_box_avg,
            }
        })
        .collect();
    Ok(TransferReport {
        dataset: dataset.to_owned(),
        iou_thr: opts.iou_thr,
        columns: names,
        rows,
    })
}
