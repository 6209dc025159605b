//! Reconstruction quality, emergent foreground segmentation, classification
//! accuracy and the qualitative reconstruction grid.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{ClipTensor, Dataset, MaskVolume};
use crate::error::{Error, Result};
use crate::losses::{masked_frame, LossReport, Reconstructions};
use crate::model::{argmax, Classifier, DisentangleModel};
use crate::tensor::{Real, Tensor};

/// Default threshold on the channel-max magnitude of the foreground
/// reconstruction above which a pixel counts as foreground.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_items: usize,
    /// Mean loss components, when a reconstruction model was evaluated.
    pub losses: Option<LossReport>,
    /// Mean IoU over clips whose first mask frame is non-empty.
    pub fg_iou: Option<f64>,
    pub iou_frames: usize,
    pub accuracy: Option<f64>,
    /// Mean whole-clip L1 error, when an autoencoder was evaluated.
    pub l1: Option<f64>,
}

/// Foreground prediction: `max_c |x[c, 0, y, x]| > tau` for a `[C, 1, H, W]` frame.
pub fn predicted_foreground<F: Real>(frame: &Tensor<F>, tau: f64) -> Vec<bool> {
    let c = frame.shape()[0];
    let plane = frame.len() / c;
    let d = frame.data();
    (0..plane)
        .map(|p| {
            (0..c)
                .map(|ch| d[ch * plane + p].to_f64().unwrap_or(f64::NAN).abs())
                .fold(0.0, f64::max)
                > tau
        })
        .collect()
}

/// Intersection over union, or `None` when the ground truth is empty.
pub fn iou(pred: &[bool], truth: &[u8]) -> Option<f64> {
    assert_eq!(pred.len(), truth.len(), "iou operands differ in size");
    let (mut inter, mut union) = (0usize, 0usize);
    let mut any_truth = false;
    for (&p, &t) in pred.iter().zip(truth) {
        let t = t != 0;
        any_truth |= t;
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    any_truth.then(|| inter as f64 / union as f64)
}

/// Running sums behind an [`EvalReport`]; partial accumulators merge exactly
/// in the sense that sums are added before any division.
#[derive(Debug, Clone, Default)]
pub struct EvalAccumulator {
    n: usize,
    loss_sums: Option<[f64; 4]>,
    iou_sum: f64,
    iou_n: usize,
    correct: usize,
    classified: usize,
}

impl EvalAccumulator {
    pub fn add_losses(&mut self, r: &LossReport) {
        let s = self.loss_sums.get_or_insert([0.0; 4]);
        for (acc, v) in s.iter_mut().zip([r.fg_first, r.bg_first, r.fg_last, r.feat]) {
            *acc += v;
        }
    }

    pub fn add_iou(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.iou_sum += v;
            self.iou_n += 1;
        }
    }

    pub fn add_prediction(&mut self, correct: bool) {
        self.classified += 1;
        self.correct += correct as usize;
    }

    pub fn add_item(&mut self) {
        self.n += 1;
    }

    pub fn merge(&mut self, other: &EvalAccumulator) {
        self.n += other.n;
        if let Some(o) = other.loss_sums {
            let s = self.loss_sums.get_or_insert([0.0; 4]);
            for (a, b) in s.iter_mut().zip(o) {
                *a += b;
            }
        }
        self.iou_sum += other.iou_sum;
        self.iou_n += other.iou_n;
        self.correct += other.correct;
        self.classified += other.classified;
    }

    pub fn finish(&self) -> Result<EvalReport> {
        if self.n == 0 {
            return Err(Error::Eval("cannot report on an empty dataset".into()));
        }
        let n = self.n as f64;
        Ok(EvalReport {
            n_items: self.n,
            losses: self
                .loss_sums
                .map(|[a, b, c, d]| LossReport::from_components(a / n, b / n, c / n, d / n)),
            fg_iou: (self.iou_n > 0).then(|| self.iou_sum / self.iou_n as f64),
            iou_frames: self.iou_n,
            accuracy: (self.classified > 0).then(|| self.correct as f64 / self.classified as f64),
            l1: None,
        })
    }
}

/// Loss components and IoU of one clip's first-frame foreground reconstruction.
pub fn score_reconstruction<F: Real>(
    recons: &Reconstructions<F>,
    report: &LossReport,
    mask: &MaskVolume,
    tau: f64,
    acc: &mut EvalAccumulator,
) {
    acc.add_item();
    acc.add_losses(report);
    acc.add_iou(iou(&predicted_foreground(&recons.fg_first, tau), mask.frame(0)));
}

/// Mean losses and foreground IoU of a disentangling model over a masked dataset.
pub fn reconstruction_report(model: &DisentangleModel<f32>, ds: &dyn Dataset, tau: f64) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Eval("cannot report on an empty dataset".into()));
    }
    let mut acc = EvalAccumulator::default();
    for i in 0..ds.len() {
        let item = ds.get(i)?;
        let mask = item.require_mask()?;
        let recons = model.forward(&item.clip)?;
        let target = model.encode_reversed_target(&item.clip)?;
        let report = crate::losses::total_loss(&recons, &item.clip, mask, &target)?;
        score_reconstruction(&recons, &report, mask, tau, &mut acc);
    }
    acc.finish()
}

/// Fraction of correct predictions; `None` labels are errors.
pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Eval("cannot compute accuracy of an empty dataset".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Eval("prediction and label counts differ".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Classification accuracy of a classifier on a labeled dataset; ties in the
/// logits resolve to the lowest class index.
pub fn accuracy(model: &Classifier<f32>, ds: &dyn Dataset) -> Result<f64> {
    let mut preds = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let item = ds.get(i)?;
        let label = item
            .label
            .ok_or_else(|| Error::Validation(format!("clip {} has no class label", item.source_id)))?;
        preds.push(argmax(&model.logits(&item.clip)?));
        labels.push(label);
    }
    accuracy_of(&preds, &labels)
}

/// Width of the separator lines between grid cells.
pub const GRID_GAP: usize = 2;

fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Two rows (reconstruction, ground truth) by three columns (first
/// foreground, first background, last foreground) of `[C, 1, H, W]` frames,
/// separated by white 2-pixel lines. Single-channel frames render grey.
pub fn render_grid<F: Real>(top: [&Tensor<F>; 3], bottom: [&Tensor<F>; 3]) -> Result<RgbImage> {
    let shape = top[0].shape().to_vec();
    if top.iter().chain(bottom.iter()).any(|t| t.shape() != shape.as_slice()) || shape.len() != 4 {
        return Err(Error::Shape("grid cells must share one [C, 1, H, W] shape".into()));
    }
    let (c, h, w) = (shape[0], shape[2], shape[3]);
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!("grid cells need 1 or 3 channels, got {c}")));
    }
    let width = 3 * w + 2 * GRID_GAP;
    let height = 2 * h + GRID_GAP;
    let mut img = RgbImage::from_pixel(width as u32, height as u32, Rgb([255, 255, 255]));
    for (row, cells) in [top, bottom].iter().enumerate() {
        for (col, cell) in cells.iter().enumerate() {
            let d = cell.data();
            let (x0, y0) = (col * (w + GRID_GAP), row * (h + GRID_GAP));
            for y in 0..h {
                for x in 0..w {
                    let px = |ch: usize| to_byte(d[ch * h * w + y * w + x].to_f64().unwrap_or(0.0));
                    let rgb = if c == 1 { [px(0); 3] } else { [px(0), px(1), px(2)] };
                    img.put_pixel((x0 + x) as u32, (y0 + y) as u32, Rgb(rgb));
                }
            }
        }
    }
    Ok(img)
}

/// Renders the model's reconstructions of `clip` above the masked inputs and
/// writes the grid as PNG.
pub fn emit_reconstruction_grid(
    model: &DisentangleModel<f32>,
    clip: &ClipTensor,
    mask: &MaskVolume,
    out_path: &Path,
) -> Result<()> {
    let r = model.forward(clip)?;
    let last = clip.frames() - 1;
    let truth: [Tensor<f32>; 3] = [
        masked_frame(clip, mask, 0, true),
        masked_frame(clip, mask, 0, false),
        masked_frame(clip, mask, last, true),
    ];
    let img = render_grid([&r.fg_first, &r.bg_first, &r.fg_last], [&truth[0], &truth[1], &truth[2]])?;
    img.save_with_format(out_path, image::ImageFormat::Png)
        .map_err(|e| Error::io(out_path, std::io::Error::other(e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_edge_cases() {
        let m = [1u8, 1, 0, 0];
        assert_eq!(iou(&[true, true, false, false], &m), Some(1.0));
        assert_eq!(iou(&[false, false, true, true], &m), Some(0.0));
        assert_eq!(iou(&[false; 4], &m), Some(0.0));
        assert_eq!(iou(&[true; 4], &[0; 4]), None);
        assert_eq!(iou(&[true, false, true, false], &m), Some(1.0 / 3.0));
    }

    #[test]
    fn threshold_uses_channel_max_magnitude() {
        let t = Tensor::from_vec(&[2, 1, 1, 3], vec![0.05f32, -0.2, 0.0, 0.0, 0.0, 0.15]).unwrap();
        assert_eq!(predicted_foreground(&t, 0.1), vec![false, true, true]);
    }

    #[test]
    fn accuracy_arithmetic() {
        let labels: Vec<usize> = (0..64).map(|i| i % 8).collect();
        assert_eq!(accuracy_of(&[3; 64], &labels).unwrap(), 0.125);
        assert_eq!(accuracy_of(&labels, &labels).unwrap(), 1.0);
        assert!(accuracy_of(&[], &[]).is_err());
    }

    #[test]
    fn accumulator_merge_equals_whole() {
        let reports = [
            LossReport::from_components(1.0, 2.0, 3.0, 4.0),
            LossReport::from_components(0.5, 0.0, 1.0, 2.0),
            LossReport::from_components(0.25, 1.0, 0.0, 0.0),
        ];
        let mut whole = EvalAccumulator::default();
        let mut a = EvalAccumulator::default();
        let mut b = EvalAccumulator::default();
        for (i, r) in reports.iter().enumerate() {
            for acc in [&mut whole, if i < 2 { &mut a } else { &mut b }] {
                acc.add_item();
                acc.add_losses(r);
                acc.add_iou(Some(i as f64 / 4.0));
            }
        }
        a.merge(&b);
        let (w, m) = (whole.finish().unwrap(), a.finish().unwrap());
        assert_eq!(w, m);
        let l = w.losses.unwrap();
        assert!((l.fg_first - 1.75 / 3.0).abs() < 1e-12);
        assert!((l.total - (1.75 + 3.0 + 4.0 + 6.0) / 3.0).abs() < 1e-12);
        assert!((w.fg_iou.unwrap() - 0.25).abs() < 1e-12);
        assert!(EvalAccumulator::default().finish().is_err());
    }

    #[test]
    fn grid_layout_and_value_mapping() {
        let a = Tensor::from_vec(&[1, 1, 2, 3], vec![-1.0f32, 0.0, 1.0, 0.5, -0.5, 2.0]).unwrap();
        let img = render_grid([&a, &a, &a], [&a, &a, &a]).unwrap();
        assert_eq!((img.width(), img.height()), (3 * 3 + 4, 2 * 2 + 2));
        assert_eq!(img.get_pixel(0, 0).0, [0; 3]);
        assert_eq!(img.get_pixel(1, 0).0, [128; 3]);
        assert_eq!(img.get_pixel(2, 0).0, [255; 3]);
        assert_eq!(img.get_pixel(2, 1).0, [255; 3]);
        assert_eq!(img.get_pixel(3, 0).0, [255; 3], "separator");
        assert_eq!(img.get_pixel(5, 4).0, [0; 3], "second row, second column");
    }
}
