//! Masked decomposition, the area-ratio weighting mask and the reconstruction
//! and feature losses.
//!
//! Frames are channel-first tensors `[C, 1, H, W]` (or any `[C, ...]` whose
//! trailing axes flatten to the `H·W` pixels of the matching mask frame).
//! Per-pixel absolute differences are averaged over channels before weighting.

use serde::{Deserialize, Serialize};

use crate::autograd::{weighted_l1_value, Tape, Var};
use crate::data::{ClipTensor, MaskVolume};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Foreground and background volumes of one clip; `fg + bg == clip`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedClip {
    pub fg: ClipTensor,
    pub bg: ClipTensor,
}

/// `fg = clip · mask`, `bg = clip · (1 - mask)`, the mask broadcast over channels.
pub fn decompose(clip: &ClipTensor, mask: &MaskVolume) -> Result<DecomposedClip> {
    let [t, h, w, c] = clip.dims();
    if mask.dims() != [t, h, w] {
        return Err(Error::Shape(format!(
            "mask {:?} does not match clip {:?}",
            mask.dims(),
            clip.dims()
        )));
    }
    let mut fg = Vec::with_capacity(clip.values().len());
    let mut bg = Vec::with_capacity(clip.values().len());
    for (px, &m) in clip.values().chunks(c).zip(mask.values()) {
        for &v in px {
            if m == 1 {
                fg.push(v);
                bg.push(0.0);
            } else {
                fg.push(0.0);
                bg.push(v);
            }
        }
    }
    Ok(DecomposedClip {
        fg: ClipTensor::new(clip.dims(), fg)?,
        bg: ClipTensor::new(clip.dims(), bg)?,
    })
}

/// Channel-first frame `t` of `clip · mask` (foreground) or `clip · (1 - mask)`.
pub fn masked_frame<F: Real>(clip: &ClipTensor, mask: &MaskVolume, t: usize, foreground: bool) -> Tensor<F> {
    let mut frame = clip.frame_channels_first::<F>(t);
    let m = mask.frame(t);
    let plane = m.len();
    for (i, v) in frame.data_mut().iter_mut().enumerate() {
        let keep = (m[i % plane] == 1) == foreground;
        if !keep {
            *v = F::zero();
        }
    }
    frame
}

/// Per-pixel loss weights for one mask frame: background pixels weigh 1,
/// foreground pixels weigh `max(1, A_bg / A_fg)`. With no foreground every
/// weight is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMask<F> {
    pub weights: Vec<F>,
    pub area: usize,
    pub fg_area: usize,
    pub bg_area: usize,
}

impl<F: Real> WeightMask<F> {
    /// The foreground weight as an exact ratio `(numerator, denominator)`.
    pub fn fg_weight_ratio(&self) -> (u64, u64) {
        if self.fg_area == 0 || self.bg_area <= self.fg_area {
            (1, 1)
        } else {
            (self.bg_area as u64, self.fg_area as u64)
        }
    }
}

pub fn weight_mask<F: Real>(mask_frame: &[u8]) -> Result<WeightMask<F>> {
    if mask_frame.iter().any(|&v| v > 1) {
        return Err(Error::Validation("weight mask input is not binary".into()));
    }
    let area = mask_frame.len();
    let fg_area = mask_frame.iter().filter(|&&v| v == 1).count();
    let bg_area = area - fg_area;
    let fg_weight = if fg_area == 0 {
        F::one()
    } else {
        (F::from_usize(bg_area).unwrap() / F::from_usize(fg_area).unwrap()).max(F::one())
    };
    let weights = mask_frame
        .iter()
        .map(|&v| if v == 1 { fg_weight } else { F::one() })
        .collect();
    Ok(WeightMask {
        weights,
        area,
        fg_area,
        bg_area,
    })
}

fn check_frame_pair<F: Real>(recon: &Tensor<F>, target: &Tensor<F>, pixels: usize) -> Result<usize> {
    if recon.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs target {:?}",
            recon.shape(),
            target.shape()
        )));
    }
    let c = recon.shape().first().copied().unwrap_or(0);
    if c == 0 || c * pixels != recon.len() {
        return Err(Error::Shape(format!(
            "frame {:?} does not cover {pixels} pixels",
            recon.shape()
        )));
    }
    Ok(c)
}

/// Weighted foreground L1 over all pixels of one frame.
pub fn fg_loss<F: Real>(recon: &Tensor<F>, target_fg: &Tensor<F>, mask_frame: &[u8]) -> Result<F> {
    let c = check_frame_pair(recon, target_fg, mask_frame.len())?;
    let wm = weight_mask::<F>(mask_frame)?;
    Ok(weighted_l1_value(recon.data(), target_fg.data(), &wm.weights, c))
}

/// Unweighted background L1 over all pixels of one frame.
pub fn bg_loss<F: Real>(recon: &Tensor<F>, target_bg: &Tensor<F>) -> Result<F> {
    let c = recon.shape().first().copied().unwrap_or(0);
    let pixels = if c == 0 { 0 } else { recon.len() / c };
    check_frame_pair(recon, target_bg, pixels)?;
    Ok(weighted_l1_value(recon.data(), target_bg.data(), &vec![F::one(); pixels], c))
}

/// Mean squared error over all elements.
pub fn feat_loss<F: Real>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<F> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "features {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = F::from_usize(pred.len()).unwrap();
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<F>()
        / n)
}

/// Every component of the training objective for one clip (or a mean over clips).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub fg_first: f64,
    pub bg_first: f64,
    pub fg_last: f64,
    pub feat: f64,
    pub rec: f64,
    pub total: f64,
}

impl LossReport {
    pub fn from_components(fg_first: f64, bg_first: f64, fg_last: f64, feat: f64) -> Self {
        let rec = fg_first + bg_first + fg_last;
        LossReport {
            fg_first,
            bg_first,
            fg_last,
            feat,
            rec,
            total: rec + feat,
        }
    }

    /// Component-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(LossReport::from_components(
            avg(|r| r.fg_first),
            avg(|r| r.bg_first),
            avg(|r| r.fg_last),
            avg(|r| r.feat),
        ))
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("fg_first", self.fg_first),
            ("bg_first", self.bg_first),
            ("fg_last", self.fg_last),
            ("feat", self.feat),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

/// The three decoded frames plus the predicted last-foreground features.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstructions<F> {
    pub fg_first: Tensor<F>,
    pub bg_first: Tensor<F>,
    pub fg_last: Tensor<F>,
    pub pred_fg_feats: Tensor<F>,
}

/// Evaluates the full objective on already-computed reconstructions.
pub fn total_loss<F: Real>(
    recons: &Reconstructions<F>,
    clip: &ClipTensor,
    mask: &MaskVolume,
    target_feats: &Tensor<F>,
) -> Result<LossReport> {
    let last = clip.frames() - 1;
    let fg_first = fg_loss(&recons.fg_first, &masked_frame(clip, mask, 0, true), mask.frame(0))?;
    let bg_first = bg_loss(&recons.bg_first, &masked_frame(clip, mask, 0, false))?;
    let fg_last = fg_loss(&recons.fg_last, &masked_frame(clip, mask, last, true), mask.frame(last))?;
    let feat = feat_loss(&recons.pred_fg_feats, target_feats)?;
    let f = |v: F| v.to_f64().unwrap_or(f64::NAN);
    Ok(LossReport::from_components(f(fg_first), f(bg_first), f(fg_last), f(feat)))
}

/// Tape nodes of the objective for one clip.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub fg_first: Var,
    pub bg_first: Var,
    pub fg_last: Var,
    pub feat: Var,
    pub rec: Var,
    pub total: Var,
}

impl LossVars {
    pub fn report<F: Real>(&self, tape: &Tape<F>) -> LossReport {
        let v = |x: Var| tape.value(x).item().to_f64().unwrap_or(f64::NAN);
        LossReport::from_components(v(self.fg_first), v(self.bg_first), v(self.fg_last), v(self.feat))
    }
}

/// Foreground loss as a tape node.
pub fn fg_loss_var<F: Real>(tape: &mut Tape<F>, recon: Var, target_fg: Tensor<F>, mask_frame: &[u8]) -> Result<Var> {
    let wm = weight_mask::<F>(mask_frame)?;
    tape.weighted_l1(recon, target_fg, wm.weights)
}

/// Background loss as a tape node.
pub fn bg_loss_var<F: Real>(tape: &mut Tape<F>, recon: Var, target_bg: Tensor<F>) -> Result<Var> {
    let c = target_bg.shape()[0];
    let pixels = target_bg.len() / c;
    tape.weighted_l1(recon, target_bg, vec![F::one(); pixels])
}

/// Builds the three reconstruction terms and the feature term on a tape.
/// `target_feats` must already be gradient-blocked.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_var<F: Real>(
    tape: &mut Tape<F>,
    fg_first: Var,
    bg_first: Var,
    fg_last: Var,
    pred_fg_feats: Var,
    target_feats: Var,
    clip: &ClipTensor,
    mask: &MaskVolume,
) -> Result<LossVars> {
    let last = clip.frames() - 1;
    let l_fg_first = fg_loss_var(tape, fg_first, masked_frame(clip, mask, 0, true), mask.frame(0))?;
    let l_bg_first = bg_loss_var(tape, bg_first, masked_frame(clip, mask, 0, false))?;
    let l_fg_last = fg_loss_var(tape, fg_last, masked_frame(clip, mask, last, true), mask.frame(last))?;
    let l_feat = tape.mse(pred_fg_feats, target_feats)?;
    let partial = tape.add(l_fg_first, l_bg_first)?;
    let rec = tape.add(partial, l_fg_last)?;
    let total = tape.add(rec, l_feat)?;
    Ok(LossVars {
        fg_first: l_fg_first,
        bg_first: l_bg_first,
        fg_last: l_fg_last,
        feat: l_feat,
        rec,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(c: usize, h: usize, w: usize, v: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_vec(&[c, 1, h, w], (0..c * h * w).map(v).collect()).unwrap()
    }

    fn corner_mask() -> Vec<u8> {
        let mut m = vec![0u8; 16];
        for i in [0, 1, 4, 5] {
            m[i] = 1;
        }
        m
    }

    #[test]
    fn weight_mask_examples() {
        let wm = weight_mask::<f64>(&corner_mask()).unwrap();
        assert_eq!((wm.fg_area, wm.bg_area, wm.area), (4, 12, 16));
        assert_eq!(wm.weights[0], 3.0);
        assert_eq!(wm.weights[2], 1.0);

        let big: Vec<u8> = (0..16).map(|i| (i >= 4) as u8).collect();
        let wm = weight_mask::<f64>(&big).unwrap();
        assert!(wm.weights.iter().all(|&w| w == 1.0));

        let wm = weight_mask::<f64>(&[0; 16]).unwrap();
        assert!(wm.weights.iter().all(|&w| w == 1.0));
        assert!(weight_mask::<f64>(&[0, 2]).is_err());
    }

    #[test]
    fn fg_loss_hand_value() {
        let target = frame(1, 4, 4, |_| 0.0);
        let recon = frame(1, 4, 4, |_| 0.5);
        let got = fg_loss(&recon, &target, &corner_mask()).unwrap();
        // (1/16) · (12·1·0.5 + 4·3·0.5)
        assert!((got - 0.75).abs() < 1e-12);
        assert_eq!(fg_loss(&target, &target, &corner_mask()).unwrap(), 0.0);
    }

    #[test]
    fn fg_loss_without_foreground_is_mean_l1() {
        let target = frame(3, 4, 4, |_| 0.0);
        let recon = frame(3, 4, 4, |_| -0.3);
        let got = fg_loss(&recon, &target, &[0; 16]).unwrap();
        assert!((got - 0.3).abs() < 1e-12);
    }

    #[test]
    fn bg_loss_examples() {
        let target = frame(2, 5, 3, |i| i as f64 * 0.01);
        let shifted = frame(2, 5, 3, |i| i as f64 * 0.01 + 0.2);
        assert!((bg_loss(&shifted, &target).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(bg_loss(&target, &target).unwrap(), 0.0);

        let target = frame(1, 8, 8, |_| 0.0);
        let single = frame(1, 8, 8, |i| if i == 9 { 0.64 } else { 0.0 });
        assert!((bg_loss(&single, &target).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn feat_loss_examples() {
        let t = Tensor::<f64>::from_vec(&[2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.0, 2.0]).unwrap();
        let p1 = t.map(|v| v + 1.0);
        let p2 = t.map(|v| v + 2.0);
        assert_eq!(feat_loss(&t, &t).unwrap(), 0.0);
        assert!((feat_loss(&p1, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!((feat_loss(&p2, &t).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = frame(1, 4, 4, |_| 0.0);
        let b = frame(1, 4, 3, |_| 0.0);
        assert!(fg_loss(&a, &b, &[0; 16]).is_err());
        assert!(bg_loss(&a, &b).is_err());
        assert!(feat_loss(&a, &b).is_err());
        assert!(fg_loss(&a, &a, &[0; 12]).is_err());
    }

    #[test]
    fn checkerboard_decomposition() {
        let clip = ClipTensor::new([1, 2, 2, 1], vec![0.5; 4]).unwrap();
        let mask = MaskVolume::new([1, 2, 2], vec![1, 0, 0, 1]).unwrap();
        let d = decompose(&clip, &mask).unwrap();
        assert_eq!(d.fg.values(), &[0.5, 0.0, 0.0, 0.5]);
        assert_eq!(d.bg.values(), &[0.0, 0.5, 0.5, 0.0]);
        let ones = MaskVolume::new([1, 2, 2], vec![1; 4]).unwrap();
        let d = decompose(&clip, &ones).unwrap();
        assert_eq!(d.fg, clip);
        assert!(d.bg.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn report_bookkeeping() {
        let r = LossReport::from_components(0.1, 0.2, 0.3, 0.4);
        assert_eq!(r.rec, 0.1 + 0.2 + 0.3);
        assert_eq!(r.total, r.rec + 0.4);
        let m = LossReport::mean(&[r, LossReport::from_components(0.3, 0.0, 0.1, 0.0)]).unwrap();
        assert!((m.fg_first - 0.2).abs() < 1e-15);
        assert!(LossReport::mean(&[]).is_none());
        let bad = LossReport::from_components(0.0, f64::NAN, 0.0, 0.0);
        assert_eq!(bad.non_finite_component(), Some("bg_first"));
    }

    #[test]
    fn fg_gradient_magnitude_is_weight_over_area_and_channels() {
        let mut tape = Tape::<f64>::new();
        let recon = tape.leaf(frame(2, 4, 4, |i| if i % 3 == 0 { 0.3 } else { -0.2 }), true);
        let target = frame(2, 4, 4, |_| 0.0);
        let loss = fg_loss_var(&mut tape, recon, target, &corner_mask()).unwrap();
        let g = tape.backward(loss).wrt(&tape, recon);
        let wm = weight_mask::<f64>(&corner_mask()).unwrap();
        for (i, &gv) in g.data().iter().enumerate() {
            let residual = tape.value(recon).data()[i];
            let want = wm.weights[i % 16] / (16.0 * 2.0) * residual.signum();
            assert!((gv - want).abs() < 1e-15);
        }
    }
}
