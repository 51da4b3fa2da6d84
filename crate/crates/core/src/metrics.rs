//! Success rate, precision, normalized precision and throughput.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::{BBox, Density};

pub const PRECISION_PX: f64 = 20.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty sequence")]
    Empty,
    #[error("{0} predictions for {1} ground-truth frames")]
    FrameCount(usize, usize),
    #[error("{0} per-frame annotations for {1} frames")]
    Annotations(usize, usize),
    #[error("halting layer {0} outside 7..=12")]
    HaltingLayer(usize),
}

/// Per-frame side information from the tracker.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameInfo {
    pub halting_layers: Vec<usize>,
    /// Density selected at the last routed layer, if any.
    pub selected: Vec<Option<Density>>,
    /// Wall-clock microseconds per frame.
    pub timing_us: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub sr: f64,
    pub pr: f64,
    pub npr: f64,
    pub fps: Option<f64>,
    pub frames: usize,
    pub mean_halting_layer: Option<f64>,
    /// Counts for halting layers 7 through 12.
    pub halting_histogram: [usize; 6],
    pub expert_selection_counts: BTreeMap<String, usize>,
}

/// IoU thresholds `0, 0.05, ..., 1`.
pub fn success_thresholds() -> Vec<f64> {
    (0..=20).map(|k| f64::from(k) / 20.0).collect()
}

/// Normalized-error thresholds `0, 0.005, ..., 0.5`.
pub fn npr_thresholds() -> Vec<f64> {
    (0..=100).map(|k| f64::from(k) / 200.0).collect()
}

/// Mean success over the IoU thresholds. A frame counts at threshold `t` when
/// it overlaps the target at all and its IoU is at least `t`.
pub fn success_rate(ious: &[f64]) -> f64 {
    let th = success_thresholds();
    let hits: usize = th.iter().map(|&t| ious.iter().filter(|&&iou| iou > 0.0 && iou >= t).count()).sum();
    hits as f64 / (th.len() * ious.len()) as f64
}

pub fn precision(center_errors: &[f64]) -> f64 {
    center_errors.iter().filter(|&&e| e <= PRECISION_PX).count() as f64 / center_errors.len() as f64
}

pub fn normalized_precision(normalized_errors: &[f64]) -> f64 {
    let th = npr_thresholds();
    let hits: usize = th.iter().map(|&t| normalized_errors.iter().filter(|&&e| e <= t).count()).sum();
    hits as f64 / (th.len() * normalized_errors.len()) as f64
}

pub fn evaluate(pred: &[BBox], gt: &[BBox], info: &FrameInfo) -> Result<MetricsReport, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::FrameCount(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = pred.len();
    for len in [Some(info.halting_layers.len()), Some(info.selected.len()), info.timing_us.as_ref().map(Vec::len)] {
        if let Some(len) = len.filter(|&l| l != 0 && l != n) {
            return Err(MetricsError::Annotations(len, n));
        }
    }
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    let errs: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.center_distance(g)).collect();
    let nerrs: Vec<f64> = errs.iter().zip(gt).map(|(e, g)| e / g.diagonal()).collect();

    let mut halting_histogram = [0usize; 6];
    for &l in &info.halting_layers {
        if !(7..=12).contains(&l) {
            return Err(MetricsError::HaltingLayer(l));
        }
        halting_histogram[l - 7] += 1;
    }
    let mean_halting_layer = (!info.halting_layers.is_empty())
        .then(|| info.halting_layers.iter().sum::<usize>() as f64 / info.halting_layers.len() as f64);
    let mut expert_selection_counts: BTreeMap<String, usize> =
        Density::ORDER.iter().map(|d| (d.name().to_string(), 0)).collect();
    for d in info.selected.iter().flatten() {
        *expert_selection_counts.get_mut(d.name()).expect("all densities present") += 1;
    }
    let fps = info.timing_us.as_ref().filter(|t| !t.is_empty()).map(|t| n as f64 / (t.iter().sum::<f64>() / 1e6));

    Ok(MetricsReport {
        sr: success_rate(&ious),
        pr: precision(&errs),
        npr: normalized_precision(&nerrs),
        fps,
        frames: n,
        mean_halting_layer,
        halting_histogram,
        expert_selection_counts,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_tracking() {
        let gt = vec![BBox::new(1.0, 2.0, 10.0, 20.0), BBox::new(5.0, 5.0, 3.0, 3.0)];
        let r = evaluate(&gt, &gt, &FrameInfo::default()).unwrap();
        assert_eq!((r.sr, r.pr, r.npr), (1.0, 1.0, 1.0));
        assert_eq!(r.fps, None);
    }

    #[test]
    fn disjoint_tracking() {
        let gt = vec![BBox::new(0.0, 0.0, 1.0, 1.0)];
        let pred = vec![BBox::new(50.0, 50.0, 1.0, 1.0)];
        let r = evaluate(&pred, &gt, &FrameInfo::default()).unwrap();
        assert_eq!(r.sr, 0.0);
        assert_eq!(r.pr, 0.0);
    }

    #[test]
    fn hand_case() {
        let gt = vec![BBox::new(0.0, 0.0, 2.0, 1.0); 3];
        let pred = vec![BBox::new(0.0, 0.0, 2.0, 1.0), BBox::new(0.0, 0.0, 1.0, 1.0), BBox::new(30.0, 0.0, 2.0, 1.0)];
        let info = FrameInfo {
            halting_layers: vec![7, 12, 12],
            selected: vec![Some(Density::Dense), None, Some(Density::Sparse)],
            timing_us: Some(vec![1000.0, 1000.0, 2000.0]),
        };
        let r = evaluate(&pred, &gt, &info).unwrap();
        assert_eq!(r.sr, 32.0 / 63.0);
        assert_eq!(r.pr, 2.0 / 3.0);
        assert_eq!(r.fps, Some(750.0));
        assert_eq!(r.halting_histogram, [1, 0, 0, 0, 0, 2]);
        assert_eq!(r.mean_halting_layer, Some(31.0 / 3.0));
        assert_eq!(r.expert_selection_counts["dense"], 1);
        assert_eq!(r.expert_selection_counts["medium"], 0);
        assert!(r.to_json().contains("\"sr\""));
    }

    #[test]
    fn errors() {
        let b = vec![BBox::new(0.0, 0.0, 1.0, 1.0)];
        assert_eq!(evaluate(&[], &[], &FrameInfo::default()), Err(MetricsError::Empty));
        assert_eq!(evaluate(&b, &[], &FrameInfo::default()), Err(MetricsError::FrameCount(1, 0)));
        let info = FrameInfo { halting_layers: vec![3], ..Default::default() };
        assert_eq!(evaluate(&b, &b, &info), Err(MetricsError::HaltingLayer(3)));
    }
}
