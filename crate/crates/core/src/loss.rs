//! Tracking losses with analytic gradients, and the pondering-loss schedule.

use std::f64::consts::PI;

use thiserror::Error;

use crate::dps::{self, DpsError};
use crate::BBox;

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
pub const MIN_OVERLAP: f64 = 0.7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("length mismatch: {0} predictions, {1} targets")]
    Length(usize, usize),
    #[error("prediction {0} at index {1} outside (0, 1)")]
    Probability(f64, usize),
    #[error("non-finite input")]
    NonFinite,
    #[error("degenerate box {0:?}")]
    DegenerateBox(BBox),
    #[error("bad schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Dps(#[from] DpsError),
}

type Result<T> = std::result::Result<T, LossError>;

/// Penalty-reduced focal loss over a score map against a Gaussian target.
///
/// Cells with target exactly 1 are positives; the loss is normalized by their
/// count (at least 1). Returns the loss and its gradient with respect to `pred`.
pub fn focal_loss(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != gt.len() {
        return Err(LossError::Length(pred.len(), gt.len()));
    }
    if gt.iter().any(|g| !g.is_finite() || !(0.0..=1.0).contains(g)) {
        return Err(LossError::NonFinite);
    }
    if let Some((i, &p)) = pred.iter().enumerate().find(|(_, p)| !(**p > 0.0 && **p < 1.0)) {
        return Err(LossError::Probability(p, i));
    }
    let n_pos = gt.iter().filter(|&&g| g == 1.0).count().max(1) as f64;
    let (a, b) = (FOCAL_ALPHA, FOCAL_BETA);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &g) in pred.iter().zip(gt) {
        if g == 1.0 {
            let q = 1.0 - p;
            loss -= q.powf(a) * p.ln();
            grad.push(a * q.powf(a - 1.0) * p.ln() - q.powf(a) / p);
        } else {
            let wn = (1.0 - g).powf(b);
            let q = 1.0 - p;
            loss -= wn * p.powf(a) * q.ln();
            grad.push(-wn * (a * p.powf(a - 1.0) * q.ln() - p.powf(a) / q));
        }
    }
    grad.iter_mut().for_each(|v| *v /= n_pos);
    Ok((loss / n_pos, grad))
}

/// Mean absolute error and its (sub)gradient `sign(pred - gt) / n`.
pub fn l1_loss(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != gt.len() {
        return Err(LossError::Length(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    if pred.iter().chain(gt).any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite);
    }
    let n = pred.len() as f64;
    let loss = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
    let grad = pred.iter().zip(gt).map(|(p, g)| (p - g).signum() * f64::from(u8::from(p != g)) / n).collect();
    Ok((loss, grad))
}

/// Overlap length along one axis and its derivatives with respect to the
/// predicted interval ends `(lo, hi)`.
fn overlap(plo: f64, phi: f64, glo: f64, ghi: f64) -> (f64, f64, f64) {
    let len = phi.min(ghi) - plo.max(glo);
    if len <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let dlo = if plo > glo { -1.0 } else { 0.0 };
    let dhi = if phi < ghi { 1.0 } else { 0.0 };
    (len, dlo, dhi)
}

fn hull(plo: f64, phi: f64, glo: f64, ghi: f64) -> (f64, f64, f64) {
    let len = phi.max(ghi) - plo.min(glo);
    let dlo = if plo < glo { -1.0 } else { 0.0 };
    let dhi = if phi > ghi { 1.0 } else { 0.0 };
    (len, dlo, dhi)
}

/// `1 - GIoU(pred, gt)` and its gradient with respect to `pred` as `(x, y, w, h)`.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> Result<(f64, [f64; 4])> {
    for b in [pred, gt] {
        if !b.is_valid() {
            return Err(LossError::DegenerateBox(*b));
        }
    }
    let (px1, px2, py1, py2) = (pred.x, pred.x + pred.w, pred.y, pred.y + pred.h);
    let (gx1, gx2, gy1, gy2) = (gt.x, gt.x + gt.w, gt.y, gt.y + gt.h);

    let (iw, diw_lo, diw_hi) = overlap(px1, px2, gx1, gx2);
    let (ih, dih_lo, dih_hi) = overlap(py1, py2, gy1, gy2);
    let (cw, dcw_lo, dcw_hi) = hull(px1, px2, gx1, gx2);
    let (ch, dch_lo, dch_hi) = hull(py1, py2, gy1, gy2);

    let inter = iw * ih;
    let union = pred.w * pred.h + gt.w * gt.h - inter;
    let enclose = cw * ch;
    let loss = 2.0 - inter / union - union / enclose;

    // Derivatives with respect to the ends (x1, x2, y1, y2).
    let d_inter = [diw_lo * ih, diw_hi * ih, dih_lo * iw, dih_hi * iw];
    let d_area = [-pred.h, pred.h, -pred.w, pred.w];
    let d_enc = [dcw_lo * ch, dcw_hi * ch, dch_lo * cw, dch_hi * cw];
    let mut d_end = [0.0; 4];
    for k in 0..4 {
        let du = d_area[k] - d_inter[k];
        let d_iou = (d_inter[k] * union - inter * du) / (union * union);
        let d_ratio = (du * enclose - union * d_enc[k]) / (enclose * enclose);
        d_end[k] = -d_iou - d_ratio;
    }
    // x1 = x, x2 = x + w; y1 = y, y2 = y + h.
    let grad = [d_end[0] + d_end[1], d_end[2] + d_end[3], d_end[1], d_end[3]];
    Ok((loss, grad))
}

/// Gaussian radius (in cells) for a `w x h` box such that a corner shift of
/// that size keeps IoU at least `min_overlap`.
pub fn gaussian_radius(w: f64, h: f64, min_overlap: f64) -> f64 {
    let b1 = h + w;
    let c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;

    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - min_overlap) * w * h;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;

    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (h + w);
    let c3 = (min_overlap - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;

    r1.min(r2).min(r3)
}

/// Target heatmap on a `grid x grid` lattice: a Gaussian with peak exactly 1
/// at `(col, row)` and `sigma = (2r + 1) / 6`.
pub fn gaussian_heatmap(grid: usize, col: usize, row: usize, radius: f64) -> Vec<f64> {
    let r = radius.max(0.0).floor();
    let sigma = (2.0 * r + 1.0) / 6.0;
    let mut map = vec![0.0; grid * grid];
    for y in 0..grid {
        for x in 0..grid {
            let (dx, dy) = (x as f64 - col as f64, y as f64 - row as f64);
            if dx.abs() <= r && dy.abs() <= r {
                let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                if v > f64::EPSILON {
                    map[y * grid + x] = v;
                }
            }
        }
    }
    map[row * grid + col] = 1.0;
    map
}

/// Cosine pondering weight `alpha (1 - cos(pi R))` with `R` the schedule
/// progress past `e_start`.
pub fn lambda4(alpha: f64, e: f64, e_start: f64, e_total: f64) -> Result<f64> {
    if !(alpha > 0.0) || !e.is_finite() || !e_start.is_finite() || !e_total.is_finite() {
        return Err(LossError::Schedule(format!("alpha {alpha}, e {e}, e_start {e_start}, e_total {e_total}")));
    }
    if e_total <= e_start || e_start < 0.0 {
        return Err(LossError::Schedule(format!("need 0 <= e_start < e_total, got {e_start}, {e_total}")));
    }
    if e > e_total {
        return Err(LossError::Schedule(format!("epoch {e} past e_total {e_total}")));
    }
    let r = if e < e_start { 0.0 } else { (e - e_start) / (e_total - e_start) };
    // 1 - cos(pi r) rewritten so r = 0, 1/2, 1 land exactly on 0, 1, 2.
    Ok(alpha * (1.0 + (PI * (r - 0.5)).sin()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: [f64; 3],
    pub alpha: f64,
    pub e: f64,
    pub e_start: f64,
    pub e_total: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, e: f64, e_start: f64, e_total: f64) -> Self {
        Self { lambda: [1.0, 5.0, 2.0], alpha, e, e_start, e_total }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
}

/// `l1 focal + l2 L1 + l3 GIoU + lambda4 (L - 6)`.
pub fn total_loss(c: &LossComponents, w: &LossWeights, halting_layer: usize) -> Result<f64> {
    if ![c.focal, c.l1, c.giou].iter().all(|v| v.is_finite()) {
        return Err(LossError::NonFinite);
    }
    let l4 = lambda4(w.alpha, w.e, w.e_start, w.e_total)?;
    let ponder = dps::ponder_loss(halting_layer)?;
    Ok(w.lambda[0] * c.focal + w.lambda[1] * c.l1 + w.lambda[2] * c.giou + l4 * ponder)
}
