//! A small residual CNN emitting a YOLO-style grid of candidates.
//!
//! Layout: stride-2 stem, residual block, stride-2 conv, residual block,
//! stride-2 conv, 1×1 head. Each grid cell predicts one box as an offset from
//! the cell center with exponential size terms, a sigmoid objectness and
//! softmax class scores.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{relu, relu_backward, sigmoid, softmax, Conv2d, ConvCache};
use super::{ConfidenceGrad, DetectorAdapter};
use crate::detection::{BoundingBox, Detection, DetectionSet, StageKind};
use crate::ensemble::shakedrop::draw_gate;
use crate::ensemble::{ShakeDropConfig, ShakeDropGate, ShakeDropSample};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::image::{Image, CHANNELS};

const BOX_TERMS: usize = 5;
const LOG_SIZE_LIMIT: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub input_size: usize,
    /// Channel width of the first stage; later stages use twice this.
    pub width: usize,
    pub class_names: Vec<String>,
    /// Reference box side (normalized) for the exponential size terms.
    pub anchor: f64,
    /// Raw candidates with objectness below this are not emitted.
    pub raw_floor: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            input_size: 64,
            width: 8,
            class_names: vec!["target".into(), "other".into()],
            anchor: 0.35,
            raw_floor: 0.0,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn grid(&self) -> usize {
        self.input_size / 8
    }

    fn head_channels(&self) -> usize {
        BOX_TERMS + self.class_names.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Layer {
    Conv { conv: Conv2d, relu: bool },
    Residual { conv1: Conv2d, conv2: Conv2d },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WeightsFile {
    kind: String,
    name: String,
    spec: ToySpec,
    layers: Vec<Layer>,
}

const WEIGHTS_KIND: &str = "toy-residual-v1";

enum LayerTrace {
    Conv {
        cache: ConvCache,
        out: Vec<f64>,
    },
    Residual {
        c1: ConvCache,
        hidden: Vec<f64>,
        c2: ConvCache,
        gate: Option<ShakeDropGate>,
    },
}

struct ImageTrace {
    layers: Vec<LayerTrace>,
    head_out: Vec<f64>,
    /// Cell index for every emitted candidate, in emission order.
    cells: Vec<usize>,
}

/// Ground-truth object for fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BoundingBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub positive_weight: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 3e-3,
            positive_weight: 5.0,
            seed: 0,
        }
    }
}

pub struct ToyDetector {
    name: String,
    spec: ToySpec,
    layers: Vec<Layer>,
    shakedrop: Option<ShakeDropConfig>,
    traces: Option<Vec<ImageTrace>>,
}

/// Clones drop any recorded forward trace.
impl Clone for ToyDetector {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            shakedrop: self.shakedrop,
            traces: None,
        }
    }
}

impl std::fmt::Debug for ToyDetector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyDetector")
            .field("name", &self.name)
            .field("spec", &self.spec)
            .field("shakedrop", &self.shakedrop)
            .finish()
    }
}

impl ToyDetector {
    /// Random (He-uniform) weights drawn from `spec.seed`.
    pub fn new(name: impl Into<String>, spec: ToySpec) -> Result<Self> {
        if spec.input_size < 8 || spec.input_size % 8 != 0 {
            return Err(Error::Argument(format!(
                "toy input size {} must be a positive multiple of 8",
                spec.input_size
            )));
        }
        if spec.width == 0 || spec.class_names.is_empty() {
            return Err(Error::Argument("toy width and class list must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let c = spec.width;
        let mut layers = vec![
            Layer::Conv {
                conv: Conv2d::new(CHANNELS, c, 3, 2, &mut rng),
                relu: true,
            },
            residual(c, &mut rng),
            Layer::Conv {
                conv: Conv2d::new(c, 2 * c, 3, 2, &mut rng),
                relu: true,
            },
            residual(2 * c, &mut rng),
            Layer::Conv {
                conv: Conv2d::new(2 * c, 2 * c, 3, 2, &mut rng),
                relu: true,
            },
            Layer::Conv {
                conv: Conv2d::new(2 * c, spec.head_channels(), 1, 1, &mut rng),
                relu: false,
            },
        ];
        // Start with low objectness so that an unfitted detector is quiet.
        if let Some(Layer::Conv { conv, .. }) = layers.last_mut() {
            conv.bias[4] = -4.0;
        }
        Ok(Self {
            name: name.into(),
            spec,
            layers,
            shakedrop: None,
            traces: None,
        })
    }

    pub fn spec(&self) -> &ToySpec {
        &self.spec
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn param_count(&self) -> usize {
        self.convs().map(Conv2d::param_count).sum()
    }

    fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.layers.iter().flat_map(|l| match l {
            Layer::Conv { conv, .. } => vec![conv],
            Layer::Residual { conv1, conv2 } => vec![conv1, conv2],
        })
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                Layer::Conv { conv, .. } => vec![conv],
                Layer::Residual { conv1, conv2 } => vec![conv1, conv2],
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = WeightsFile {
            kind: WEIGHTS_KIND.into(),
            name: self.name.clone(),
            spec: self.spec.clone(),
            layers: self.layers.clone(),
        };
        fsutil::write_atomic(path, serde_json::to_string(&file)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
        let file: WeightsFile =
            serde_json::from_str(&text).map_err(|e| Error::load(path, e.to_string()))?;
        if file.kind != WEIGHTS_KIND {
            return Err(Error::load(
                path,
                format!("unsupported weights kind `{}`", file.kind),
            ));
        }
        let mut det = ToyDetector::new(file.name, file.spec)?;
        if det.layers.len() != file.layers.len()
            || det
                .layers
                .iter()
                .zip(&file.layers)
                .any(|(a, b)| layer_shape(a) != layer_shape(b))
        {
            return Err(Error::load(path, "layer shapes do not match the spec"));
        }
        det.layers = file.layers;
        Ok(det)
    }

    fn to_chw(&self, img: &Image) -> Result<Vec<f64>> {
        let s = self.spec.input_size;
        if img.height() != s || img.width() != s {
            return Err(Error::shape(
                format!("{s}x{s}x3"),
                format!("{}x{}x3", img.height(), img.width()),
            ));
        }
        let plane = s * s;
        let mut out = vec![0.0; CHANNELS * plane];
        for (i, px) in img.data().chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                out[c * plane + i] = px[c];
            }
        }
        Ok(out)
    }

    fn forward_one(
        &self,
        img: &Image,
        mut shake: Option<(&ShakeDropConfig, &mut dyn RngCore)>,
    ) -> Result<ImageTrace> {
        let mut x = self.to_chw(img)?;
        let (mut h, mut w) = (img.height(), img.width());
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Conv { conv, relu: act } => {
                    let (mut out, cache) = conv.forward(&x, h, w);
                    if *act {
                        relu(&mut out);
                    }
                    (h, w) = conv.out_size(h, w);
                    x = out.clone();
                    traces.push(LayerTrace::Conv { cache, out });
                }
                Layer::Residual { conv1, conv2 } => {
                    let (mut hidden, c1) = conv1.forward(&x, h, w);
                    relu(&mut hidden);
                    let (f_out, c2) = conv2.forward(&hidden, h, w);
                    let (next, gate) = match shake.as_mut() {
                        Some((cfg, rng)) => {
                            let sample = ShakeDropSample::draw(cfg, conv2.cout, &mut **rng);
                            let mut gate = ShakeDropGate::default();
                            let out = gate.forward(&x, &f_out, sample)?;
                            (out, Some(gate))
                        }
                        None => (x.iter().zip(&f_out).map(|(a, b)| a + b).collect(), None),
                    };
                    x = next;
                    traces.push(LayerTrace::Residual {
                        c1,
                        hidden,
                        c2,
                        gate,
                    });
                }
            }
        }
        Ok(ImageTrace {
            layers: traces,
            head_out: x,
            cells: Vec::new(),
        })
    }

    fn decode_cell(&self, head: &[f64], cell: usize) -> (Detection, Vec<f64>) {
        let g = self.spec.grid();
        let plane = g * g;
        let at = |ch: usize| head[ch * plane + cell];
        let (gy, gx) = (cell / g, cell % g);
        let cx = (gx as f64 + 0.5 + 0.5 * at(0).tanh()) / g as f64;
        let cy = (gy as f64 + 0.5 + 0.5 * at(1).tanh()) / g as f64;
        let bw = self.spec.anchor * at(2).clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT).exp();
        let bh = self.spec.anchor * at(3).clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT).exp();
        let objectness = sigmoid(at(4));
        let logits: Vec<f64> = (0..self.spec.class_names.len())
            .map(|k| at(BOX_TERMS + k))
            .collect();
        let probs = softmax(&logits);
        let (class_id, &class_score) = probs
            .iter()
            .enumerate()
            .fold((0, &probs[0]), |best, cur| if cur.1 > best.1 { cur } else { best });
        let bbox = BoundingBox::from_center_clipped(cx, cy, bw, bh).unwrap_or(BoundingBox {
            x1: (cx - 1e-6).max(0.0),
            y1: (cy - 1e-6).max(0.0),
            x2: (cx + 1e-6).min(1.0),
            y2: (cy + 1e-6).min(1.0),
        });
        (
            Detection {
                bbox,
                objectness,
                class_id,
                class_score,
            },
            probs,
        )
    }

    /// Back-propagates a head-output gradient; optionally accumulates parameter
    /// gradients (flattened in `convs()` order). Returns the CHW input gradient.
    fn backward_one(
        &self,
        trace: ImageTrace,
        d_head: Vec<f64>,
        mut shake_rng: Option<&mut dyn RngCore>,
        mut param_grads: Option<&mut [Vec<f64>]>,
    ) -> Result<Vec<f64>> {
        let mut grad = d_head;
        // conv index of the first conv of each layer, for parameter gradients
        let mut conv_index: Vec<usize> = Vec::with_capacity(self.layers.len());
        let mut k = 0;
        for l in &self.layers {
            conv_index.push(k);
            k += match l {
                Layer::Conv { .. } => 1,
                Layer::Residual { .. } => 2,
            };
        }
        let mut acc = |idx: usize, conv: &Conv2d, cache: &ConvCache, dout: &[f64]| {
            if let Some(pg) = param_grads.as_deref_mut() {
                let (dw, db) = pg[idx].split_at_mut(conv.weight.len());
                conv.accumulate_param_grads(cache, dout, dw, db);
            }
        };
        for ((layer, tr), &ci) in self
            .layers
            .iter()
            .zip(trace.layers)
            .zip(&conv_index)
            .rev()
        {
            match (layer, tr) {
                (Layer::Conv { conv, relu: act }, LayerTrace::Conv { cache, out }) => {
                    if *act {
                        relu_backward(&out, &mut grad);
                    }
                    acc(ci, conv, &cache, &grad);
                    grad = conv.backward_input(&cache, &grad);
                }
                (
                    Layer::Residual { conv1, conv2 },
                    LayerTrace::Residual {
                        c1,
                        hidden,
                        c2,
                        gate,
                    },
                ) => {
                    let mut d_branch = grad.clone();
                    if let Some(mut gate) = gate {
                        let beta = gate.recorded().map(|s| s.beta).unwrap_or(1.0);
                        let gamma = match (shake_rng.as_mut().map(|r| &mut **r as &mut dyn RngCore), self.shakedrop) {
                            (Some(rng), Some(cfg)) => draw_gate(cfg.prob, rng),
                            _ => beta,
                        };
                        let scales = gate.take_backward_scales(gamma, d_branch.len())?;
                        let plane = d_branch.len() / scales.len();
                        for (i, v) in d_branch.iter_mut().enumerate() {
                            *v *= scales[i / plane];
                        }
                    }
                    acc(ci + 1, conv2, &c2, &d_branch);
                    let mut d_hidden = conv2.backward_input(&c2, &d_branch);
                    relu_backward(&hidden, &mut d_hidden);
                    acc(ci, conv1, &c1, &d_hidden);
                    let d_in = conv1.backward_input(&c1, &d_hidden);
                    for (g, d) in grad.iter_mut().zip(d_in) {
                        *g += d;
                    }
                }
                _ => return Err(Error::State("trace does not match layer layout".into())),
            }
        }
        Ok(grad)
    }

    fn chw_to_hwc(&self, chw: &[f64]) -> Vec<f64> {
        let s = self.spec.input_size;
        let plane = s * s;
        let mut out = vec![0.0; chw.len()];
        for i in 0..plane {
            for c in 0..CHANNELS {
                out[i * CHANNELS + c] = chw[c * plane + i];
            }
        }
        out
    }

    /// Briefly fits the detector on labelled images with Adam. Returns the mean
    /// training loss of each epoch.
    pub fn fit(
        &mut self,
        images: &[Image],
        labels: &[Vec<GroundTruth>],
        cfg: &FitConfig,
    ) -> Result<Vec<f64>> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::Argument(
                "fit needs a non-empty image set with one label list per image".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let sizes: Vec<usize> = self.convs().map(Conv2d::param_count).collect();
        let mut m: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        let mut v = m.clone();
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut step = 0i32;
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            shuffle(&mut order, &mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.batch_size.max(1)) {
                let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
                for &i in batch {
                    let trace = self.forward_one(&images[i], None)?;
                    let (loss, d_head) = self.fit_loss(&trace.head_out, &labels[i], cfg);
                    epoch_loss += loss;
                    self.backward_one(trace, d_head, None, Some(&mut grads))?;
                }
                step += 1;
                let scale = 1.0 / batch.len() as f64;
                let lr_t = cfg.lr * (1.0 - b2.powi(step)).sqrt() / (1.0 - b1.powi(step));
                for (((conv, g), m), v) in self
                    .convs_mut()
                    .into_iter()
                    .zip(&grads)
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    let nw = conv.weight.len();
                    for (j, &gj) in g.iter().enumerate() {
                        let gj = gj * scale;
                        m[j] = b1 * m[j] + (1.0 - b1) * gj;
                        v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                        let upd = lr_t * m[j] / (v[j].sqrt() + eps);
                        if j < nw {
                            conv.weight[j] -= upd;
                        } else {
                            conv.bias[j - nw] -= upd;
                        }
                    }
                }
            }
            losses.push(epoch_loss / images.len() as f64);
        }
        Ok(losses)
    }

    fn fit_loss(&self, head: &[f64], labels: &[GroundTruth], cfg: &FitConfig) -> (f64, Vec<f64>) {
        let g = self.spec.grid();
        let plane = g * g;
        let nc = self.spec.class_names.len();
        let mut d = vec![0.0; head.len()];
        let mut loss = 0.0;
        let mut owner: Vec<Option<&GroundTruth>> = vec![None; plane];
        for gt in labels {
            let (cx, cy) = gt.bbox.center();
            let gx = ((cx * g as f64) as usize).min(g - 1);
            let gy = ((cy * g as f64) as usize).min(g - 1);
            owner[gy * g + gx] = Some(gt);
        }
        let norm = 1.0 / plane as f64;
        for cell in 0..plane {
            let at = |ch: usize| head[ch * plane + cell];
            let o = sigmoid(at(4));
            let (t, wgt) = match owner[cell] {
                Some(_) => (1.0, cfg.positive_weight),
                None => (0.0, 1.0),
            };
            let oc = o.clamp(1e-12, 1.0 - 1e-12);
            loss += -wgt * norm * (t * oc.ln() + (1.0 - t) * (1.0 - oc).ln());
            d[4 * plane + cell] = wgt * norm * (o - t);
            let Some(gt) = owner[cell] else { continue };
            let (gy, gx) = (cell / g, cell % g);
            let (cx, cy) = gt.bbox.center();
            let off = [
                cx * g as f64 - gx as f64 - 0.5,
                cy * g as f64 - gy as f64 - 0.5,
            ];
            for a in 0..2 {
                let th = at(a).tanh();
                let diff = 0.5 * th - off[a];
                loss += 5.0 * diff * diff;
                d[a * plane + cell] = 5.0 * 2.0 * diff * 0.5 * (1.0 - th * th);
            }
            let sizes = [gt.bbox.width(), gt.bbox.height()];
            for a in 0..2 {
                let target = (sizes[a] / self.spec.anchor).ln();
                let diff = at(2 + a) - target;
                loss += diff * diff;
                d[(2 + a) * plane + cell] = 2.0 * diff;
            }
            let logits: Vec<f64> = (0..nc).map(|k| at(BOX_TERMS + k)).collect();
            let probs = softmax(&logits);
            loss += -probs[gt.class_id].max(1e-12).ln();
            for k in 0..nc {
                let onehot = if k == gt.class_id { 1.0 } else { 0.0 };
                d[(BOX_TERMS + k) * plane + cell] = probs[k] - onehot;
            }
        }
        (loss, d)
    }
}

fn residual(c: usize, rng: &mut ChaCha8Rng) -> Layer {
    let conv1 = Conv2d::new(c, c, 3, 1, rng);
    let mut conv2 = Conv2d::new(c, c, 3, 1, rng);
    // Residual branches start small so the identity path dominates.
    for w in &mut conv2.weight {
        *w *= 0.5;
    }
    Layer::Residual { conv1, conv2 }
}

fn layer_shape(l: &Layer) -> Vec<(usize, usize, usize, usize, usize, usize)> {
    let s = |c: &Conv2d| (c.cin, c.cout, c.kernel, c.stride, c.weight.len(), c.bias.len());
    match l {
        Layer::Conv { conv, .. } => vec![s(conv)],
        Layer::Residual { conv1, conv2 } => vec![s(conv1), s(conv2)],
    }
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

impl DetectorAdapter for ToyDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_size(&self) -> usize {
        self.spec.input_size
    }

    fn class_names(&self) -> &[String] {
        &self.spec.class_names
    }

    fn residual_block_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Residual { .. }))
            .count()
    }

    fn shakedrop(&self) -> Option<ShakeDropConfig> {
        self.shakedrop
    }

    fn configure_shakedrop(&mut self, cfg: Option<ShakeDropConfig>) {
        self.shakedrop = cfg;
    }

    fn forward_raw(
        &mut self,
        images: &[Image],
        mut shake_rng: Option<&mut dyn RngCore>,
    ) -> Result<Vec<DetectionSet>> {
        self.traces = None;
        let cfg = self.shakedrop;
        let plane = self.spec.grid() * self.spec.grid();
        let mut traces = Vec::with_capacity(images.len());
        let mut sets = Vec::with_capacity(images.len());
        for (idx, img) in images.iter().enumerate() {
            let shake = match (cfg.as_ref(), shake_rng.as_mut().map(|r| &mut **r as &mut dyn RngCore)) {
                (Some(c), Some(r)) => Some((c, r)),
                _ => None,
            };
            let mut trace = self.forward_one(img, shake)?;
            let mut detections = Vec::with_capacity(plane);
            for cell in 0..plane {
                let (det, _) = self.decode_cell(&trace.head_out, cell);
                if det.objectness >= self.spec.raw_floor {
                    detections.push(det);
                    trace.cells.push(cell);
                }
            }
            traces.push(trace);
            sets.push(DetectionSet {
                image_index: idx,
                stage: StageKind::Raw,
                detections,
            });
        }
        self.traces = Some(traces);
        Ok(sets)
    }

    fn backward(
        &mut self,
        grads: &[Vec<ConfidenceGrad>],
        mut shake_rng: Option<&mut dyn RngCore>,
    ) -> Result<Vec<Vec<f64>>> {
        let traces = self
            .traces
            .take()
            .ok_or_else(|| Error::State("backward without a recorded forward".into()))?;
        if traces.len() != grads.len() {
            return Err(Error::shape(
                format!("{} gradient lists", traces.len()),
                grads.len().to_string(),
            ));
        }
        let plane = self.spec.grid() * self.spec.grid();
        let mut out = Vec::with_capacity(traces.len());
        for (trace, g) in traces.into_iter().zip(grads) {
            if g.len() != trace.cells.len() {
                return Err(Error::shape(
                    format!("{} candidate gradients", trace.cells.len()),
                    g.len().to_string(),
                ));
            }
            let mut d_head = vec![0.0; trace.head_out.len()];
            for (cg, &cell) in g.iter().zip(&trace.cells) {
                if cg.objectness == 0.0 && cg.class_score == 0.0 {
                    continue;
                }
                let (det, probs) = self.decode_cell(&trace.head_out, cell);
                let o = det.objectness;
                d_head[4 * plane + cell] += cg.objectness * o * (1.0 - o);
                if cg.class_score != 0.0 {
                    let pc = probs[det.class_id];
                    for (k, &pk) in probs.iter().enumerate() {
                        let delta = if k == det.class_id { 1.0 } else { 0.0 };
                        d_head[(BOX_TERMS + k) * plane + cell] += cg.class_score * pc * (delta - pk);
                    }
                }
            }
            let d_in = self.backward_one(trace, d_head, shake_rng.as_mut().map(|r| &mut **r as &mut dyn RngCore), None)?;
            out.push(self.chw_to_hwc(&d_in));
        }
        Ok(out)
    }

    fn box_clone(&self) -> Box<dyn DetectorAdapter> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{detect, set_shakedrop, Stage};

    fn toy() -> ToyDetector {
        ToyDetector::new("toy", ToySpec::default()).unwrap()
    }

    fn random_image(seed: u64, size: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..size * size * 3).map(|_| rng.gen::<f64>()).collect();
        Image::from_vec(size, size, data).unwrap()
    }

    #[test]
    fn zero_image_objectness_in_open_interval() {
        let mut det = toy();
        let sets = detect(&mut det, &[Image::filled(64, 64, 0.0)], Stage::Raw).unwrap();
        assert_eq!(sets[0].len(), 64);
        assert!(sets[0]
            .detections
            .iter()
            .all(|d| d.objectness > 0.0 && d.objectness < 1.0));
    }

    #[test]
    fn detect_is_deterministic_without_shakedrop() {
        let mut det = toy();
        let imgs = vec![random_image(1, 64), random_image(2, 64)];
        let a = detect(&mut det, &imgs, Stage::Raw).unwrap();
        let b = detect(&mut det, &imgs, Stage::Raw).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let mut det = toy();
        let err = detect(&mut det, &[Image::filled(32, 32, 0.0)], Stage::Raw);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn shakedrop_gate_open_matches_plain() {
        let mut det = toy();
        let imgs = vec![random_image(3, 64)];
        let plain = detect(&mut det, &imgs, Stage::Raw).unwrap();
        assert!(set_shakedrop(&mut det, true, 1.0, 1.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..3 {
            let shaken = det.forward_raw(&imgs, Some(&mut rng)).unwrap();
            assert_eq!(shaken, plain);
        }
        assert!(!set_shakedrop(&mut det, false, 0.5, 1.0).unwrap());
        assert_eq!(det.forward_raw(&imgs, Some(&mut rng)).unwrap(), plain);
    }

    #[test]
    fn shakedrop_changes_outputs() {
        let mut det = toy();
        let imgs = vec![random_image(4, 64)];
        let plain = detect(&mut det, &imgs, Stage::Raw).unwrap();
        set_shakedrop(&mut det, true, 0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shaken = det.forward_raw(&imgs, Some(&mut rng)).unwrap();
        assert_ne!(shaken, plain);
    }

    #[test]
    fn backward_without_forward_fails() {
        let mut det = toy();
        assert!(matches!(det.backward(&[], None), Err(Error::State(_))));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut det = toy();
        let img = random_image(6, 64);
        let weights: Vec<f64> = (0..64).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.4).collect();
        let loss = |det: &mut ToyDetector, img: &Image| -> f64 {
            let sets = det.forward_raw(std::slice::from_ref(img), None).unwrap();
            sets[0]
                .detections
                .iter()
                .zip(&weights)
                .map(|(d, w)| w * d.objectness + 0.5 * w * d.class_score)
                .sum()
        };
        loss(&mut det, &img);
        let grads: Vec<ConfidenceGrad> = weights
            .iter()
            .map(|&w| ConfidenceGrad {
                objectness: w,
                class_score: 0.5 * w,
            })
            .collect();
        let analytic = det.backward(&[grads], None).unwrap().remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let step = 1e-4;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for _ in 0..40 {
            let i = rng.gen_range(0..img.data().len());
            let mut p = img.clone();
            p.data_mut()[i] += step;
            let mut m = img.clone();
            m.data_mut()[i] -= step;
            let fd = (loss(&mut det, &p) - loss(&mut det, &m)) / (2.0 * step);
            num += (fd - analytic[i]).powi(2);
            den += fd.powi(2).max(analytic[i].powi(2));
        }
        assert!((num / den).sqrt() < 1e-3, "relative error {}", (num / den).sqrt());
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.json");
        let det = toy();
        det.save(&path).unwrap();
        let back = ToyDetector::load(&path).unwrap();
        assert_eq!(back.layers, det.layers);
        assert!(ToyDetector::load(&dir.path().join("missing.json")).is_err());
    }
}
