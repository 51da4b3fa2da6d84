//! Sequence-level inference: template from segment 0, then one search step per segment.

use std::fmt::Write as _;
use std::time::Instant;

use crate::backbone::{forward_tokens, patch_embed, CropKind, ForwardOptions, Model};
use crate::config::TrackerConfig;
use crate::dps::HaltingRecord;
use crate::error::{Error, Result};
use crate::event_io::{EventStream, GroundTruth};
use crate::frame_builder::{build_triplet, crop_resize, crop_with_mapping, segment_center, segment_windows, CropMapping};
use crate::head::{decode_box, head_forward};
use crate::metrics::FrameInfo;
use crate::nn::{Rng, Tensor};
use crate::sa_moe::RoutingRecord;
use crate::weights::ModelWeights;
use crate::{BBox, Density};

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub template_tokens: Tensor,
    pub last_box: BBox,
    pub config: TrackerConfig,
    /// Segment 0 had no events in its medium window; the template is all zeros.
    pub empty_template: bool,
}

/// Builds and embeds the template from the medium-density frame of segment 0.
pub fn init(stream: &EventStream, gt_box_0: &BBox, weights: &ModelWeights, config: &TrackerConfig) -> Result<TrackerState> {
    config.validate()?;
    let (w, h) = (f64::from(stream.width()), f64::from(stream.height()));
    if !gt_box_0.is_valid() || gt_box_0.right() <= 0.0 || gt_box_0.bottom() <= 0.0 || gt_box_0.x >= w || gt_box_0.y >= h {
        return Err(Error::Tracker(format!("initial box {gt_box_0:?} is not a valid box on the {w}x{h} sensor")));
    }
    let windows = segment_windows(segment_center(0, config.dt_us), config.dt_us, stream.duration_us())?;
    let medium = build_triplet(stream, &windows).medium;
    let crop = crop_resize(&medium, gt_box_0, config.template_context, config.model.template_size)?;
    let template_tokens = patch_embed(&crop, weights, &config.model, CropKind::Template)?;
    Ok(TrackerState { template_tokens, last_box: *gt_box_0, config: config.clone(), empty_template: medium.density == 0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub k: usize,
    pub bbox: BBox,
    pub halting: HaltingRecord,
    pub routing: Vec<RoutingRecord>,
    pub fallback: bool,
}

impl FrameResult {
    /// Density picked by the last routed layer that ran.
    pub fn selected_density(&self) -> Option<Density> {
        self.routing.last().map(|r| r.selected)
    }

    /// `k x y w h L selected_density`
    pub fn box_line(&self) -> String {
        let b = &self.bbox;
        let sel = self.selected_density().map_or("none", Density::name);
        format!("{} {} {} {} {} {} {}", self.k, b.x, b.y, b.w, b.h, self.halting.halting_layer, sel)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    pub frames: Vec<FrameResult>,
    /// Wall-clock microseconds per frame, aligned with `frames`.
    pub timing_us: Vec<f64>,
    pub empty_template: bool,
}

impl TrackResult {
    pub fn boxes(&self) -> Vec<BBox> {
        self.frames.iter().map(|f| f.bbox).collect()
    }

    pub fn frame_info(&self) -> FrameInfo {
        FrameInfo {
            halting_layers: self.frames.iter().map(|f| f.halting.halting_layer).collect(),
            selected: self.frames.iter().map(FrameResult::selected_density).collect(),
            timing_us: Some(self.timing_us.clone()),
        }
    }

    pub fn boxes_text(&self) -> String {
        self.frames.iter().fold(String::new(), |mut s, f| {
            let _ = writeln!(s, "{}", f.box_line());
            s
        })
    }

    pub fn halting_text(&self) -> String {
        self.frames.iter().fold(String::new(), |mut s, f| {
            let _ = writeln!(s, "{}", f.halting.trace_line(f.k));
            s
        })
    }

    pub fn routing_text(&self) -> String {
        let mut s = String::new();
        for f in &self.frames {
            for r in &f.routing {
                let _ = writeln!(s, "{}", r.trace_line(f.k));
            }
        }
        s
    }

    pub fn timing_text(&self) -> String {
        self.frames.iter().zip(&self.timing_us).fold(String::new(), |mut s, (f, t)| {
            let _ = writeln!(s, "{} {t}", f.k);
            s
        })
    }

    pub fn mean_halting_layer(&self) -> f64 {
        self.frames.iter().map(|f| f.halting.halting_layer as f64).sum::<f64>() / self.frames.len().max(1) as f64
    }
}

/// One parsed line of a box file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxRecord {
    pub k: usize,
    pub bbox: BBox,
    pub halting_layer: usize,
    pub selected: Option<Density>,
}

/// Parses `k x y w h L selected_density` lines.
pub fn parse_boxes(text: &str) -> Result<Vec<BoxRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| Error::Tracker(format!("box file line {}: {msg}", i + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(bad("expected `k x y w h L selected_density`"));
        }
        let k = f[0].parse().map_err(|_| bad("bad frame index"))?;
        let v: Vec<f64> = f[1..5].iter().map(|s| s.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad box coordinate"))?;
        let halting_layer = f[5].parse().map_err(|_| bad("bad halting layer"))?;
        let selected = match f[6] {
            "none" => None,
            s => Some(Density::parse(s).ok_or_else(|| bad("unknown density"))?),
        };
        out.push(BoxRecord { k, bbox: BBox::new(v[0], v[1], v[2], v[3]), halting_layer, selected });
    }
    Ok(out)
}

/// Parses `k microseconds` lines.
pub fn parse_timing(text: &str) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::Tracker(format!("timing file line {}: expected `k microseconds`", i + 1));
        let (k, t) = line.split_once(char::is_whitespace).ok_or_else(bad)?;
        out.push((k.parse().map_err(|_| bad())?, t.trim().parse().map_err(|_| bad())?));
    }
    Ok(out)
}

/// Tracks segments `1..gt.segment_count()`, seeding from `gt.boxes[0]`.
pub fn track_sequence(stream: &EventStream, gt: &GroundTruth, weights: &ModelWeights, config: &TrackerConfig) -> Result<TrackResult> {
    let first = gt.boxes.first().ok_or_else(|| Error::Tracker("ground truth is empty".into()))?;
    let n = gt.segment_count();
    let last_center = segment_center(n - 1, config.dt_us);
    if last_center > stream.duration_us() {
        return Err(Error::Tracker(format!(
            "{n} segments of {} us need a stream of at least {last_center} us, got {}",
            config.dt_us,
            stream.duration_us()
        )));
    }
    let mut state = init(stream, first, weights, config)?;
    let model = Model::new(&state.config.model, weights)?;
    let opts = ForwardOptions {
        moe_enabled: config.moe_enabled,
        dps_enabled: config.dps_enabled,
        routing: config.routing,
        tau: config.tau,
    };
    let mut rng = Rng::new(config.seed);
    let (sw, sh) = (f64::from(stream.width()), f64::from(stream.height()));
    let mut frames = Vec::with_capacity(n.saturating_sub(1));
    let mut timing_us = Vec::with_capacity(n.saturating_sub(1));
    for k in 1..n {
        let started = Instant::now();
        let windows = segment_windows(segment_center(k, config.dt_us), config.dt_us, stream.duration_us())?;
        let triplet = build_triplet(stream, &windows);
        let mapping = CropMapping::around(&state.last_box, config.search_context, config.model.search_size)?;
        let mut search = Vec::with_capacity(3);
        for d in Density::ORDER {
            let crop = crop_with_mapping(triplet.get(d), &mapping);
            search.push(patch_embed(&crop, weights, &config.model, CropKind::Search)?);
        }
        let search: [Tensor; 3] = search.try_into().expect("three densities");
        let out = forward_tokens(&model, &state.template_tokens, &search, &opts, &mut rng)?;
        let maps = head_forward(&out.fused, weights, &config.model)?;
        let decoded = decode_box(&maps, &mapping)?;
        let bbox = decoded.bbox.clamp_to(sw, sh);
        state.last_box = bbox;
        timing_us.push(started.elapsed().as_secs_f64() * 1e6);
        frames.push(FrameResult { k, bbox, halting: out.halting, routing: out.routing, fallback: decoded.fallback });
    }
    Ok(TrackResult { frames, timing_us, empty_template: state.empty_template })
}
