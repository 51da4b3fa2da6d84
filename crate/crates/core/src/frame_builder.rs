//! Multi-density event frames and template/search crops.

use thiserror::Error;

use crate::bbox::BBox;
use crate::event_io::{Event, EventStream, Polarity};
use crate::Density;

/// Count channels saturate here before scaling to `[0, 1]`.
pub const COUNT_CLIP: f32 = 255.0;
pub const TEMPLATE_SIZE: usize = 128;
pub const SEARCH_SIZE: usize = 256;
pub const TEMPLATE_CONTEXT: f64 = 2.0;
pub const SEARCH_CONTEXT: f64 = 4.0;

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("segment length must be positive")]
    NonPositiveDt,
    #[error("segment center {t_k} beyond stream duration {duration}")]
    CenterOutOfRange { t_k: u64, duration: u64 },
    #[error("degenerate box {0:?}")]
    DegenerateBox(BBox),
    #[error("context factor must be positive and finite, got {0}")]
    BadContext(f64),
    #[error("output size must be positive")]
    BadOutputSize,
}

/// Center time of segment `k` for segment length `dt`.
pub fn segment_center(k: usize, dt: u64) -> u64 {
    k as u64 * dt + dt / 2
}

/// Closed integer interval of microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeWindow {
    pub lo: u64,
    pub hi: u64,
}

impl TimeWindow {
    pub fn contains(&self, t: u64) -> bool {
        self.lo <= t && t <= self.hi
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    /// Subset test; the empty interval is a subset of everything.
    pub fn is_subset_of(&self, other: &TimeWindow) -> bool {
        self.is_empty() || (other.lo <= self.lo && self.hi <= other.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentWindows {
    pub center: u64,
    pub sparse: TimeWindow,
    pub medium: TimeWindow,
    pub dense: TimeWindow,
}

impl SegmentWindows {
    pub fn get(&self, d: Density) -> TimeWindow {
        match d {
            Density::Sparse => self.sparse,
            Density::Medium => self.medium,
            Density::Dense => self.dense,
        }
    }
}

/// Sparse/medium/dense windows of widths `dt/2`, `dt`, `3dt/2` centered on `t_k`,
/// clipped to `[0, duration]`.
///
/// Fractional bounds round inward (ceil the low end, floor the high end) so the
/// three windows stay nested in integer time.
pub fn segment_windows(t_k: u64, dt: u64, duration: u64) -> Result<SegmentWindows, FrameError> {
    if dt == 0 {
        return Err(FrameError::NonPositiveDt);
    }
    if t_k > duration {
        return Err(FrameError::CenterOutOfRange { t_k, duration });
    }
    // Half-width is quarters * dt / 4.
    let window = |quarters: i128| {
        let (c, d) = (4 * i128::from(t_k), quarters * i128::from(dt));
        let lo = (c - d).div_euclid(4) + i128::from((c - d).rem_euclid(4) != 0);
        let hi = (c + d).div_euclid(4);
        TimeWindow { lo: lo.max(0) as u64, hi: hi.min(i128::from(duration)) as u64 }
    };
    Ok(SegmentWindows { center: t_k, sparse: window(1), medium: window(2), dense: window(3) })
}

/// Stacked 3-channel event frame: positive counts, negative counts, recency.
///
/// Counts are raw here; saturation and scaling happen when a crop is taken.
#[derive(Debug, Clone, PartialEq)]
pub struct EventFrame {
    pub width: usize,
    pub height: usize,
    /// `3 * height * width`, channel-major.
    pub data: Vec<f32>,
    pub density: usize,
}

impl EventFrame {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; 3 * width * height], density: 0 }
    }

    /// Accumulates `events`, which must all lie inside `window`.
    pub fn accumulate(events: &[Event], window: TimeWindow, width: usize, height: usize) -> Self {
        let mut frame = Self::zeros(width, height);
        let plane = width * height;
        let span = window.hi.saturating_sub(window.lo);
        let mut last = vec![None::<u64>; plane];
        for e in events {
            let idx = usize::from(e.y) * width + usize::from(e.x);
            let ch = match e.p {
                Polarity::Positive => 0,
                Polarity::Negative => 1,
            };
            frame.data[ch * plane + idx] += 1.0;
            last[idx] = Some(last[idx].map_or(e.t, |t| t.max(e.t)));
        }
        for (idx, t) in last.iter().enumerate() {
            if let Some(t) = t {
                frame.data[2 * plane + idx] =
                    if span == 0 { 1.0 } else { (t - window.lo) as f32 / span as f32 };
            }
        }
        frame.density = events.len();
        frame
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.width * self.height;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Network-facing value: counts saturated and scaled, recency as is.
    fn normalized(&self, c: usize, x: usize, y: usize) -> f32 {
        let v = self.data[c * self.width * self.height + y * self.width + x];
        if c < 2 {
            v.min(COUNT_CLIP) / COUNT_CLIP
        } else {
            v
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameTriplet {
    pub sparse: EventFrame,
    pub medium: EventFrame,
    pub dense: EventFrame,
}

impl FrameTriplet {
    pub fn get(&self, d: Density) -> &EventFrame {
        match d {
            Density::Sparse => &self.sparse,
            Density::Medium => &self.medium,
            Density::Dense => &self.dense,
        }
    }
}

pub fn build_triplet(stream: &EventStream, windows: &SegmentWindows) -> FrameTriplet {
    let (w, h) = (usize::from(stream.width()), usize::from(stream.height()));
    let frame = |win: TimeWindow| EventFrame::accumulate(stream.in_window(win.lo, win.hi), win, w, h);
    FrameTriplet { sparse: frame(windows.sparse), medium: frame(windows.medium), dense: frame(windows.dense) }
}

/// Maps continuous crop coordinates to sensor coordinates:
/// `sensor = offset + crop * scale`. Pixel `i` covers `[i, i + 1)` in both frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropMapping {
    pub size: usize,
    /// Sensor pixels per crop pixel.
    pub scale: f64,
    pub offset_x: f64,
    pub offset_y: f64,
}

impl CropMapping {
    /// Square window of side `context * sqrt(w * h)` centered on `center_box`.
    pub fn around(center_box: &BBox, context: f64, out_size: usize) -> Result<Self, FrameError> {
        if !center_box.is_valid() {
            return Err(FrameError::DegenerateBox(*center_box));
        }
        if !(context.is_finite() && context > 0.0) {
            return Err(FrameError::BadContext(context));
        }
        if out_size == 0 {
            return Err(FrameError::BadOutputSize);
        }
        let side = context * (center_box.w * center_box.h).sqrt();
        let (cx, cy) = center_box.center();
        Ok(Self { size: out_size, scale: side / out_size as f64, offset_x: cx - side / 2.0, offset_y: cy - side / 2.0 })
    }

    pub fn to_sensor(&self, u: f64, v: f64) -> (f64, f64) {
        (self.offset_x + u * self.scale, self.offset_y + v * self.scale)
    }

    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.offset_x) / self.scale, (y - self.offset_y) / self.scale)
    }

    pub fn box_to_sensor(&self, b: &BBox) -> BBox {
        let (x, y) = self.to_sensor(b.x, b.y);
        BBox::new(x, y, b.w * self.scale, b.h * self.scale)
    }

    pub fn box_to_crop(&self, b: &BBox) -> BBox {
        let (x, y) = self.to_crop(b.x, b.y);
        BBox::new(x, y, b.w / self.scale, b.h / self.scale)
    }
}

/// Resampled square crop, `3 x size x size`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub pixels: Vec<f32>,
    pub mapping: CropMapping,
}

impl Crop {
    pub fn size(&self) -> usize {
        self.mapping.size
    }
}

/// Bilinear crop of `frame` around `center_box`, zero outside the sensor.
pub fn crop_resize(frame: &EventFrame, center_box: &BBox, context: f64, out_size: usize) -> Result<Crop, FrameError> {
    let mapping = CropMapping::around(center_box, context, out_size)?;
    Ok(crop_with_mapping(frame, &mapping))
}

pub fn crop_with_mapping(frame: &EventFrame, mapping: &CropMapping) -> Crop {
    let s = mapping.size;
    let mut pixels = vec![0.0f32; 3 * s * s];
    let (fw, fh) = (frame.width as i64, frame.height as i64);
    // Separable sample positions: pixel-index coordinates in the sensor frame.
    let taps = |i: usize, offset: f64| {
        let p = offset + (i as f64 + 0.5) * mapping.scale - 0.5;
        let p0 = p.floor();
        (p0 as i64, (p - p0) as f32)
    };
    let xs: Vec<(i64, f32)> = (0..s).map(|u| taps(u, mapping.offset_x)).collect();
    let ys: Vec<(i64, f32)> = (0..s).map(|v| taps(v, mapping.offset_y)).collect();
    for c in 0..3 {
        let at = |x: i64, y: i64| {
            if x < 0 || y < 0 || x >= fw || y >= fh {
                0.0
            } else {
                frame.normalized(c, x as usize, y as usize)
            }
        };
        for (v, &(y0, fy)) in ys.iter().enumerate() {
            if y0 + 1 < 0 || y0 >= fh {
                continue;
            }
            let row = &mut pixels[c * s * s + v * s..c * s * s + (v + 1) * s];
            for (u, &(x0, fx)) in xs.iter().enumerate() {
                if x0 + 1 < 0 || x0 >= fw {
                    continue;
                }
                let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
                let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
                row[u] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Crop { pixels, mapping: *mapping }
}
