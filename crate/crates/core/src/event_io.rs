//! Event streams, ground-truth annotations and their on-disk formats.
//!
//! Text events: `# evt1 <W> <H> <T_us>` header, then `t x y p` per line.
//! Binary events: `EVB1`, u16 W, u16 H, u64 T_us, u64 count, then 16-byte
//! records (u64 t, u16 x, u16 y, i8 p, 3 zero bytes), all little-endian.
//! Ground truth: `k x y w h` per segment.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::bbox::BBox;
use crate::frame_builder::segment_center;

pub const BINARY_MAGIC: &[u8; 4] = b"EVB1";
const BINARY_HEADER_LEN: usize = 4 + 2 + 2 + 8 + 8;
const BINARY_RECORD_LEN: usize = 16;
/// Time step of the synthetic edge-event simulation.
const EDGE_TICK_US: u64 = 100;

#[derive(Debug, Error)]
pub enum EventIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("missing `# evt1 <W> <H> <T_us>` header")]
    MissingHeader,
    #[error("line {line}: polarity {value} not in {{-1, 1}}")]
    BadPolarity { line: usize, value: i64 },
    #[error("event {index}: coordinate ({x}, {y}) outside {width}x{height} sensor")]
    OutOfBounds { index: usize, x: u32, y: u32, width: u16, height: u16 },
    #[error("event {index}: timestamp {t} outside [0, {duration}]")]
    TimeOutOfRange { index: usize, t: u64, duration: u64 },
    #[error("event {index}: timestamps not sorted")]
    Unsorted { index: usize },
    #[error("sensor dimensions must be positive, got {width}x{height}")]
    BadSensor { width: u16, height: u16 },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported binary version {found:?}, expected \"EVB1\"")]
    VersionMismatch { found: [u8; 4] },
    #[error("truncated binary stream: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("binary stream has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("record {0}: non-zero padding")]
    BadPadding(usize),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

type Result<T> = std::result::Result<T, EventIoError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EventIoError + '_ {
    move |source| EventIoError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::Negative => -1,
            Polarity::Positive => 1,
        }
    }

    pub fn from_i64(v: i64) -> Option<Self> {
        match v {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }
}

/// A single camera event `(x, y, t, p)`; `t` is in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: Polarity) -> Self {
        Self { t, x, y, p }
    }
}

/// Time-ordered events from one sensor over `[0, duration_us]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    width: u16,
    height: u16,
    duration_us: u64,
}

impl EventStream {
    /// Builds a stream from already sorted events, validating every invariant.
    pub fn new(events: Vec<Event>, width: u16, height: u16, duration_us: u64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(EventIoError::BadSensor { width, height });
        }
        for (index, e) in events.iter().enumerate() {
            check_event(index, e, width, height, duration_us)?;
            if index > 0 && events[index - 1].t > e.t {
                return Err(EventIoError::Unsorted { index });
            }
        }
        Ok(Self { events, width, height, duration_us })
    }

    /// Like [`EventStream::new`] but stable-sorts by timestamp first.
    pub fn from_unsorted(mut events: Vec<Event>, width: u16, height: u16, duration_us: u64) -> Result<Self> {
        events.sort_by_key(|e| e.t);
        Self::new(events, width, height, duration_us)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn duration_us(&self) -> u64 {
        self.duration_us
    }

    /// Events whose timestamp lies in the closed interval `[lo, hi]`.
    pub fn in_window(&self, lo: u64, hi: u64) -> &[Event] {
        if lo > hi {
            return &[];
        }
        let start = self.events.partition_point(|e| e.t < lo);
        let end = self.events.partition_point(|e| e.t <= hi);
        &self.events[start..end]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(32 + self.events.len() * 16);
        let _ = writeln!(out, "# evt1 {} {} {}", self.width, self.height, self.duration_us);
        for e in &self.events {
            let _ = writeln!(out, "{} {} {} {}", e.t, e.x, e.y, e.p.as_i8());
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut header: Option<(u16, u16, u64)> = None;
        let mut raw = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let fields: Vec<&str> = comment.split_whitespace().collect();
                if fields.first() == Some(&"evt1") {
                    if header.is_some() {
                        return Err(EventIoError::Malformed { line: lineno, msg: "duplicate header".into() });
                    }
                    if fields.len() != 4 {
                        return Err(EventIoError::Malformed { line: lineno, msg: "header needs W H T_us".into() });
                    }
                    let w = parse_field::<u16>(fields[1], lineno, "width")?;
                    let h = parse_field::<u16>(fields[2], lineno, "height")?;
                    let t = parse_field::<u64>(fields[3], lineno, "duration")?;
                    header = Some((w, h, t));
                }
                continue;
            }
            let (width, height, _) = header.ok_or(EventIoError::MissingHeader)?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(EventIoError::Malformed {
                    line: lineno,
                    msg: format!("expected 4 fields `t x y p`, found {}", fields.len()),
                });
            }
            let t = parse_field::<u64>(fields[0], lineno, "t")?;
            let x = parse_field::<u32>(fields[1], lineno, "x")?;
            let y = parse_field::<u32>(fields[2], lineno, "y")?;
            let p = parse_field::<i64>(fields[3], lineno, "p")?;
            let p = Polarity::from_i64(p).ok_or(EventIoError::BadPolarity { line: lineno, value: p })?;
            if x >= u32::from(width) || y >= u32::from(height) {
                return Err(EventIoError::OutOfBounds { index: raw.len(), x, y, width, height });
            }
            raw.push(Event::new(t, x as u16, y as u16, p));
        }
        let (width, height, duration) = header.ok_or(EventIoError::MissingHeader)?;
        Self::from_unsorted(raw, width, height, duration)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BINARY_HEADER_LEN + self.events.len() * BINARY_RECORD_LEN);
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.duration_us.to_le_bytes());
        out.extend_from_slice(&(self.events.len() as u64).to_le_bytes());
        for e in &self.events {
            out.extend_from_slice(&e.t.to_le_bytes());
            out.extend_from_slice(&e.x.to_le_bytes());
            out.extend_from_slice(&e.y.to_le_bytes());
            out.push(e.p.as_i8() as u8);
            out.extend_from_slice(&[0, 0, 0]);
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(EventIoError::Truncated { expected: BINARY_HEADER_LEN, found: bytes.len() });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != BINARY_MAGIC {
            if &magic[..3] == b"EVB" {
                return Err(EventIoError::VersionMismatch { found: magic });
            }
            return Err(EventIoError::BadMagic(magic));
        }
        if bytes.len() < BINARY_HEADER_LEN {
            return Err(EventIoError::Truncated { expected: BINARY_HEADER_LEN, found: bytes.len() });
        }
        let width = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        let height = u16::from_le_bytes(bytes[6..8].try_into().unwrap());
        let duration = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let expected = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(BINARY_RECORD_LEN))
            .and_then(|n| n.checked_add(BINARY_HEADER_LEN))
            .ok_or(EventIoError::Truncated { expected: usize::MAX, found: bytes.len() })?;
        if bytes.len() < expected {
            return Err(EventIoError::Truncated { expected, found: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(EventIoError::TrailingBytes(bytes.len() - expected));
        }
        let mut events = Vec::with_capacity(count as usize);
        for (i, rec) in bytes[BINARY_HEADER_LEN..].chunks_exact(BINARY_RECORD_LEN).enumerate() {
            let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
            let x = u16::from_le_bytes(rec[8..10].try_into().unwrap());
            let y = u16::from_le_bytes(rec[10..12].try_into().unwrap());
            let pv = rec[12] as i8;
            let p = Polarity::from_i64(i64::from(pv)).ok_or(EventIoError::BadPolarity { line: i, value: i64::from(pv) })?;
            if rec[13..16] != [0, 0, 0] {
                return Err(EventIoError::BadPadding(i));
            }
            events.push(Event::new(t, x, y, p));
        }
        Self::new(events, width, height, duration)
    }

    pub fn read_text(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_text(&text)
    }

    pub fn write_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn read_binary(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_binary(&bytes)
    }

    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_binary()).map_err(io_err(path))
    }

    /// Reads either format, sniffing the binary magic.
    pub fn read_any(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        if bytes.starts_with(b"EVB") {
            Self::from_binary(&bytes)
        } else {
            let text = String::from_utf8(bytes)
                .map_err(|e| EventIoError::Malformed { line: 0, msg: format!("not UTF-8: {e}") })?;
            Self::from_text(&text)
        }
    }
}

fn check_event(index: usize, e: &Event, width: u16, height: u16, duration: u64) -> Result<()> {
    if e.x >= width || e.y >= height {
        return Err(EventIoError::OutOfBounds { index, x: e.x.into(), y: e.y.into(), width, height });
    }
    if e.t > duration {
        return Err(EventIoError::TimeOutOfRange { index, t: e.t, duration });
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse().map_err(|_| EventIoError::Malformed { line, msg: format!("invalid {what} `{s}`") })
}

/// One box per temporal segment, indexed by segment number.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<BBox>,
}

impl GroundTruth {
    pub fn new(boxes: Vec<BBox>) -> Result<Self> {
        for (k, b) in boxes.iter().enumerate() {
            if !b.is_valid() {
                return Err(EventIoError::Malformed { line: k + 1, msg: format!("degenerate box {b:?}") });
            }
        }
        Ok(Self { boxes })
    }

    pub fn segment_count(&self) -> usize {
        self.boxes.len()
    }

    pub fn check_bounds(&self, width: u16, height: u16) -> Result<()> {
        for (k, b) in self.boxes.iter().enumerate() {
            if !b.within(f64::from(width), f64::from(height)) {
                return Err(EventIoError::Malformed {
                    line: k + 1,
                    msg: format!("box {b:?} outside {width}x{height} sensor"),
                });
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, b) in self.boxes.iter().enumerate() {
            let _ = writeln!(out, "{k} {} {} {} {}", b.x, b.y, b.w, b.h);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut boxes = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(EventIoError::Malformed { line: lineno, msg: "expected `k x y w h`".into() });
            }
            let k = parse_field::<usize>(f[0], lineno, "segment index")?;
            if k != boxes.len() {
                return Err(EventIoError::Malformed {
                    line: lineno,
                    msg: format!("segment index {k}, expected {}", boxes.len()),
                });
            }
            let v: Vec<f64> = f[1..]
                .iter()
                .map(|s| parse_field::<f64>(s, lineno, "box coordinate"))
                .collect::<Result<_>>()?;
            boxes.push(BBox::new(v[0], v[1], v[2], v[3]));
        }
        Self::new(boxes)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_text(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }
}

/// Target position (box center) at a given time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub t_us: u64,
    pub cx: f64,
    pub cy: f64,
}

/// Description of a synthetic single-target scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: u16,
    pub height: u16,
    pub duration_us: u64,
    /// Segment length used for the ground-truth boxes.
    pub dt_us: u64,
    pub waypoints: Vec<Waypoint>,
    pub target_w: f64,
    pub target_h: f64,
    /// Events per microsecond per perimeter pixel.
    pub edge_rate: f64,
    /// Events per microsecond per sensor pixel.
    pub bg_rate: f64,
}

impl SceneSpec {
    /// A target moving on a straight line between two points over the whole duration.
    pub fn linear(
        width: u16,
        height: u16,
        duration_us: u64,
        dt_us: u64,
        from: (f64, f64),
        to: (f64, f64),
        size: (f64, f64),
    ) -> Self {
        Self {
            width,
            height,
            duration_us,
            dt_us,
            waypoints: vec![
                Waypoint { t_us: 0, cx: from.0, cy: from.1 },
                Waypoint { t_us: duration_us, cx: to.0, cy: to.1 },
            ],
            target_w: size.0,
            target_h: size.1,
            edge_rate: 0.002,
            bg_rate: 1e-6,
        }
    }

    pub fn segment_count(&self) -> usize {
        (self.duration_us / self.dt_us) as usize
    }

    /// A target moving at `speed` px/s on a 30 degree heading, reflecting off
    /// the sensor borders. Waypoints are placed every segment.
    pub fn bouncing(width: u16, height: u16, frames: usize, dt_us: u64, speed: f64, size: (f64, f64)) -> Self {
        let duration_us = frames as u64 * dt_us;
        let (hw, hh) = (size.0 / 2.0, size.1 / 2.0);
        let fold = |start: f64, travel: f64, lo: f64, hi: f64| {
            let span = hi - lo;
            if span <= 0.0 {
                return lo;
            }
            let p = (start - lo + travel).rem_euclid(2.0 * span);
            lo + if p > span { 2.0 * span - p } else { p }
        };
        let (w, h) = (f64::from(width), f64::from(height));
        let (dx, dy) = (30f64.to_radians().cos(), 30f64.to_radians().sin());
        let waypoints = (0..=frames)
            .map(|k| {
                let t_us = k as u64 * dt_us;
                let dist = speed * t_us as f64 / 1e6;
                Waypoint {
                    t_us,
                    cx: fold(w / 2.0, dist * dx, hw, w - hw),
                    cy: fold(h / 2.0, dist * dy, hh, h - hh),
                }
            })
            .collect();
        Self {
            width,
            height,
            duration_us,
            dt_us,
            waypoints,
            target_w: size.0,
            target_h: size.1,
            edge_rate: 0.002,
            bg_rate: 1e-6,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EventIoError::InvalidScene(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!("sensor {}x{}", self.width, self.height));
        }
        if self.duration_us == 0 || self.dt_us == 0 {
            return bad("duration and dt must be positive".into());
        }
        if !(self.edge_rate.is_finite() && self.edge_rate >= 0.0 && self.bg_rate.is_finite() && self.bg_rate >= 0.0) {
            return bad(format!("rates must be finite and non-negative (edge {}, bg {})", self.edge_rate, self.bg_rate));
        }
        if !(self.target_w >= 1.0 && self.target_h >= 1.0) {
            return bad(format!("target size {}x{}", self.target_w, self.target_h));
        }
        if self.waypoints.is_empty() {
            return bad("no waypoints".into());
        }
        if self.waypoints.windows(2).any(|w| w[0].t_us >= w[1].t_us) {
            return bad("waypoint times must be strictly increasing".into());
        }
        // The rectangle is convex and motion is piecewise linear, so checking
        // the vertices of the trajectory covers every intermediate position.
        for wp in &self.waypoints {
            let b = BBox::from_center(wp.cx, wp.cy, self.target_w, self.target_h);
            if !b.within(f64::from(self.width), f64::from(self.height)) {
                return bad(format!("trajectory leaves the sensor at t={} ({b:?})", wp.t_us));
            }
        }
        Ok(())
    }

    /// Target center and velocity (px/µs) at time `t`.
    pub fn kinematics(&self, t: f64) -> ((f64, f64), (f64, f64)) {
        let wps = &self.waypoints;
        let first = wps[0];
        if t <= first.t_us as f64 || wps.len() == 1 {
            return ((first.cx, first.cy), (0.0, 0.0));
        }
        for w in wps.windows(2) {
            let (a, b) = (w[0], w[1]);
            if t <= b.t_us as f64 {
                let span = (b.t_us - a.t_us) as f64;
                let f = (t - a.t_us as f64) / span;
                let vel = ((b.cx - a.cx) / span, (b.cy - a.cy) / span);
                return ((a.cx + f * (b.cx - a.cx), a.cy + f * (b.cy - a.cy)), vel);
            }
        }
        let last = wps[wps.len() - 1];
        ((last.cx, last.cy), (0.0, 0.0))
    }

    pub fn box_at(&self, t: f64) -> BBox {
        let ((cx, cy), _) = self.kinematics(t);
        BBox::from_center(cx, cy, self.target_w, self.target_h)
    }
}

/// Simulates a moving rectangle observed by an event camera.
///
/// Edge events are Poisson along the target perimeter, positive on the
/// leading edge and negative on the trailing edge; background noise is a
/// uniform Poisson process over the whole sensor. The output depends only on
/// `(spec, seed)`.
pub fn generate_synthetic(spec: &SceneSpec, seed: u64) -> Result<(EventStream, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);
    let mut events = Vec::new();

    if spec.edge_rate > 0.0 {
        let mut t0 = 0u64;
        while t0 < spec.duration_us {
            let t1 = (t0 + EDGE_TICK_US).min(spec.duration_us);
            let mid = (t0 + t1) as f64 / 2.0;
            let ((cx, cy), (vx, vy)) = spec.kinematics(mid);
            let perimeter = perimeter_pixels(cx, cy, spec.target_w, spec.target_h, w, h);
            let mean = spec.edge_rate * perimeter.len() as f64 * (t1 - t0) as f64;
            let n = sample_poisson(&mut rng, mean);
            for _ in 0..n {
                let (x, y, nx, ny) = perimeter[rng.random_range(0..perimeter.len())];
                let t = rng.random_range(t0..t1);
                let dot = nx * vx + ny * vy;
                let p = if dot > 0.0 {
                    Polarity::Positive
                } else if dot < 0.0 {
                    Polarity::Negative
                } else if rng.random_bool(0.5) {
                    Polarity::Positive
                } else {
                    Polarity::Negative
                };
                events.push(Event::new(t, x, y, p));
            }
            t0 = t1;
        }
    }

    if spec.bg_rate > 0.0 {
        let mean = spec.bg_rate * f64::from(w) * f64::from(h) * spec.duration_us as f64;
        let n = sample_poisson(&mut rng, mean);
        events.reserve(n as usize);
        for _ in 0..n {
            let t = rng.random_range(0..=spec.duration_us);
            let x = rng.random_range(0..w);
            let y = rng.random_range(0..h);
            let p = if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
            events.push(Event::new(t, x, y, p));
        }
    }

    let stream = EventStream::from_unsorted(events, w, h, spec.duration_us)?;
    let boxes = (0..spec.segment_count())
        .map(|k| spec.box_at(segment_center(k, spec.dt_us) as f64))
        .collect();
    Ok((stream, GroundTruth::new(boxes)?))
}

fn sample_poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let dist = Poisson::new(mean).expect("positive finite mean");
    dist.sample(rng) as u64
}

/// Perimeter pixels of the rasterized target with their outward normals.
fn perimeter_pixels(cx: f64, cy: f64, tw: f64, th: f64, width: u16, height: u16) -> Vec<(u16, u16, f64, f64)> {
    let x0 = (cx - tw / 2.0).floor().max(0.0) as i64;
    let y0 = (cy - th / 2.0).floor().max(0.0) as i64;
    let x1 = ((x0 as f64 + tw.round()) as i64 - 1).min(i64::from(width) - 1).max(x0);
    let y1 = ((y0 as f64 + th.round()) as i64 - 1).min(i64::from(height) - 1).max(y0);
    let mut out = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let mut nx = 0.0;
            let mut ny = 0.0;
            if x == x0 {
                nx -= 1.0;
            }
            if x == x1 {
                nx += 1.0;
            }
            if y == y0 {
                ny -= 1.0;
            }
            if y == y1 {
                ny += 1.0;
            }
            let on_edge = x == x0 || x == x1 || y == y0 || y == y1;
            if on_edge {
                out.push((x as u16, y as u16, nx, ny));
            }
        }
    }
    out
}
