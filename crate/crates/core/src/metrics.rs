//! Pixel confusion counts, precision / recall / F1 / IoU and the four-colour
//! confusion rendering (white TP, black TN, red FP, blue FN).
//!
//! Dataset-level numbers sum counts over all tiles first (micro-averaging).
//! A ratio with a zero denominator is reported as 0 and flagged.

use std::fmt;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

/// Counts plus derived percentages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub counts: ConfusionCounts,
    pub pr: f64,
    pub rc: f64,
    pub f1: f64,
    pub iou: f64,
    /// Set when any ratio had a zero denominator.
    pub degenerate: bool,
}

impl MetricReport {
    /// `Pr\tRc\tF1\tIoU`, two decimals.
    pub fn row(&self) -> String {
        format!("{:.2}\t{:.2}\t{:.2}\t{:.2}", self.pr, self.rc, self.f1, self.iou)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Pr={:.2} Rc={:.2} F1={:.2} IoU={:.2}", self.pr, self.rc, self.f1, self.iou)
    }
}

fn check_pair(pred: &[u8], truth: &[u8]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Data(format!("prediction has {} pixels, truth has {}", pred.len(), truth.len())));
    }
    if let Some((i, v)) = pred.iter().chain(truth).enumerate().find(|(_, v)| **v > 1) {
        let (which, at) = if i < pred.len() { ("prediction", i) } else { ("truth", i - pred.len()) };
        return Err(Error::Data(format!("{which} pixel {at} has non-binary value {v}")));
    }
    Ok(())
}

/// Counts over two `{0,1}` maps of equal length.
pub fn confusion_counts(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    check_pair(pred, truth)?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// Pr, Rc, F1 and IoU in percent.
pub fn derive_metrics(c: ConfusionCounts) -> MetricReport {
    let mut degenerate = false;
    let mut ratio = |num: f64, den: f64| {
        if den == 0.0 {
            degenerate = true;
            0.0
        } else {
            num / den
        }
    };
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    let pr = ratio(tp, tp + fp);
    let rc = ratio(tp, tp + fn_);
    let f1 = ratio(2.0 * pr * rc, pr + rc);
    let iou = ratio(tp, tp + fp + fn_);
    MetricReport { counts: c, pr: pr * 100.0, rc: rc * 100.0, f1: f1 * 100.0, iou: iou * 100.0, degenerate }
}

pub const TP_COLOR: [u8; 3] = [255, 255, 255];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 0, 255];

/// Four-colour confusion image of `width x height` row-major maps.
pub fn render_confusion(pred: &[u8], truth: &[u8], width: u32, height: u32) -> Result<RgbImage> {
    check_pair(pred, truth)?;
    if pred.len() != (width * height) as usize {
        return Err(Error::Data(format!("{} pixels do not form a {width}x{height} image", pred.len())));
    }
    Ok(RgbImage::from_fn(width, height, |x, y| {
        let i = (y * width + x) as usize;
        Rgb(match (pred[i], truth[i]) {
            (1, 1) => TP_COLOR,
            (1, 0) => FP_COLOR,
            (0, 1) => FN_COLOR,
            _ => TN_COLOR,
        })
    }))
}

/// Inverse of [`derive_metrics`] for the identity checks: integer counts
/// over `total` pixels whose precision and recall round to the given
/// percentages.
pub fn counts_for(pr_pct: f64, rc_pct: f64, tp: u64, total: u64) -> ConfusionCounts {
    let fp = (tp as f64 * (100.0 / pr_pct - 1.0)).round() as u64;
    let fn_ = (tp as f64 * (100.0 / rc_pct - 1.0)).round() as u64;
    ConfusionCounts { tp, fp, fn_, tn: total - tp - fp - fn_ }
}
