use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use evtrack::config::{ModelConfig, TrackerConfig};
use evtrack::event_io::{generate_synthetic, EventStream, GroundTruth, SceneSpec};
use evtrack::metrics::{evaluate, FrameInfo};
use evtrack::selftest::{self, SelftestOptions};
use evtrack::tracker::{parse_boxes, parse_timing, track_sequence};
use evtrack::weights::{self, selftest_weights, InitOptions, ModelWeights};

#[derive(Parser)]
#[command(name = "evtrack", version, about = "Event-camera single-object tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic event sequence with ground truth.
    Gen(GenArgs),
    /// Track a sequence and write boxes plus halting/routing traces.
    Track(TrackArgs),
    /// Score a box file against ground truth.
    Eval(EvalArgs),
    /// Summarize a trace, weights or events file.
    Inspect(InspectArgs),
    /// Run the invariant checks.
    Selftest(SelftestArgs),
    /// Write seeded test weights and their checksum.
    Weights(WeightsArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    frames: usize,
    /// Sensor size as WxH.
    #[arg(long, default_value = "346x260", value_parser = parse_size::<u16>)]
    sensor: (u16, u16),
    #[arg(long, default_value_t = 20_000)]
    dt_us: u64,
    /// Background noise in events per pixel per second.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Target speed in pixels per second.
    #[arg(long, default_value_t = 100.0)]
    speed: f64,
    /// Target size as WxH.
    #[arg(long, default_value = "40x30", value_parser = parse_size::<f64>)]
    target: (f64, f64),
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    no_dps: bool,
    #[arg(long)]
    no_moe: bool,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    boxes: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Per-frame timing file written by `track`; enables the fps field.
    #[arg(long)]
    timing: Option<PathBuf>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct InspectArgs {
    /// Halting trace (`frame L C_p...`).
    #[arg(long)]
    halting: Option<PathBuf>,
    /// Routing trace (`frame layer K logits... selected`).
    #[arg(long)]
    routing: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    events: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    /// Also audit this weights file and its checksum sidecar.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Config describing the weights file's model shape.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run the end-to-end checks on the small test model instead of D=192.
    #[arg(long)]
    tiny: bool,
    #[arg(long, default_value_t = 50)]
    frames: usize,
}

#[derive(Args)]
struct WeightsArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bias of every halting predictor.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    halt_bias: f32,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn parse_size<T: std::str::FromStr>(s: &str) -> Result<(T, T), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    match (w.parse(), h.parse()) {
        (Ok(w), Ok(h)) => Ok((w, h)),
        _ => Err(format!("expected WxH, got `{s}`")),
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrackerConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            TrackerConfig::parse(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => TrackerConfig::default(),
    };
    for o in overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override `{o}` is not key=value"))?;
        cfg.set(k.trim(), v.trim()).map_err(anyhow::Error::msg)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".sha256");
    PathBuf::from(s)
}

/// Reads a weights file, checks its sidecar checksum when present, and audits shapes.
fn load_weights(path: &Path, model: &ModelConfig) -> Result<ModelWeights> {
    let bytes = fs::read(path).with_context(|| format!("reading weights {}", path.display()))?;
    let side = sidecar(path);
    if side.exists() {
        let expected = fs::read_to_string(&side).with_context(|| format!("reading {}", side.display()))?;
        weights::verify_checksum(&bytes, &expected).with_context(|| format!("checksum of {}", path.display()))?;
    }
    let w = ModelWeights::from_bytes(&bytes).with_context(|| format!("loading weights {}", path.display()))?;
    w.audit(model).with_context(|| format!("shape audit of {}", path.display()))?;
    Ok(w)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    ensure!(a.frames >= 1, "--frames must be at least 1");
    ensure!(a.noise.is_finite() && a.noise >= 0.0, "--noise must be a non-negative rate");
    ensure!(a.speed.is_finite() && a.speed >= 0.0, "--speed must be non-negative");
    let mut spec = SceneSpec::bouncing(a.sensor.0, a.sensor.1, a.frames, a.dt_us, a.speed, a.target);
    spec.bg_rate = a.noise / 1e6;
    let (stream, gt) = generate_synthetic(&spec, a.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    stream.write_text(a.out.join("events.txt"))?;
    stream.write_binary(a.out.join("events.bin"))?;
    gt.write(a.out.join("gt.txt"))?;
    println!("wrote {} events, {} ground-truth boxes to {}", stream.len(), gt.segment_count(), a.out.display());
    Ok(())
}

fn cmd_track(a: &TrackArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), &a.overrides)?;
    if a.no_dps {
        cfg.dps_enabled = false;
    }
    if a.no_moe {
        cfg.moe_enabled = false;
    }
    let w = load_weights(&a.weights, &cfg.model)?;
    let stream = EventStream::read_any(&a.events).with_context(|| format!("reading events {}", a.events.display()))?;
    let gt = GroundTruth::read(&a.gt).with_context(|| format!("reading ground truth {}", a.gt.display()))?;
    let result = track_sequence(&stream, &gt, &w, &cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out.join("boxes.txt"), result.boxes_text())?;
    write(&a.out.join("halting.txt"), result.halting_text())?;
    write(&a.out.join("routing.txt"), result.routing_text())?;
    write(&a.out.join("timing.txt"), result.timing_text())?;
    if result.empty_template {
        eprintln!("warning: segment 0 has no events in its medium window; template is empty");
    }
    println!("tracked {} frames, mean halting layer {:.2}", result.frames.len(), result.mean_halting_layer());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let text = fs::read_to_string(&a.boxes).with_context(|| format!("reading {}", a.boxes.display()))?;
    let records = parse_boxes(&text)?;
    let gt = GroundTruth::read(&a.gt).with_context(|| format!("reading ground truth {}", a.gt.display()))?;
    let n = gt.segment_count();
    ensure!(
        records.len() + 1 == n,
        "frame-count mismatch: {} boxes for {n} ground-truth segments (expected {})",
        records.len(),
        n.saturating_sub(1)
    );
    for (i, r) in records.iter().enumerate() {
        ensure!(r.k == i + 1, "frame-count mismatch: box line {} has frame {}, expected {}", i + 1, r.k, i + 1);
    }
    let pred: Vec<_> = records.iter().map(|r| r.bbox).collect();
    let truth: Vec<_> = gt.boxes[1..].to_vec();
    let timing_us = match &a.timing {
        Some(p) => {
            let t = parse_timing(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?;
            ensure!(
                t.len() == records.len() && t.iter().zip(&records).all(|(t, r)| t.0 == r.k),
                "timing file frames do not match the box file"
            );
            Some(t.into_iter().map(|(_, us)| us).collect())
        }
        None => None,
    };
    let info = FrameInfo {
        halting_layers: records.iter().map(|r| r.halting_layer).collect(),
        selected: records.iter().map(|r| r.selected).collect(),
        timing_us,
    };
    let report = evaluate(&pred, &truth, &info)?;
    write(&a.report, report.to_json() + "\n")?;
    println!("sr {:.4} pr {:.4} npr {:.4} frames {}", report.sr, report.pr, report.npr, report.frames);
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let read = |p: &Path| fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    if let Some(p) = &a.halting {
        let mut hist: BTreeMap<usize, usize> = (7..=12).map(|l| (l, 0)).collect();
        let mut frames = 0;
        for (i, line) in read(p)?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let l: usize = line
                .split_whitespace()
                .nth(1)
                .and_then(|s| s.parse().ok())
                .with_context(|| format!("{}: line {}: expected `frame L C_p...`", p.display(), i + 1))?;
            *hist.entry(l).or_default() += 1;
            frames += 1;
        }
        println!("frames {frames}");
        for (l, c) in &hist {
            println!("L={l:<2} {c:>6} {}", "#".repeat(if frames == 0 { 0 } else { c * 50 / frames }));
        }
    }
    if let Some(p) = &a.routing {
        let mut counts: BTreeMap<(usize, String), usize> = BTreeMap::new();
        for (i, line) in read(p)?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            ensure!(f.len() == 7, "{}: line {}: expected `frame layer K l0 l1 l2 selected`", p.display(), i + 1);
            let layer = f[1].parse().with_context(|| format!("{}: line {}: bad layer", p.display(), i + 1))?;
            *counts.entry((layer, f[6].to_string())).or_default() += 1;
        }
        for ((layer, d), c) in counts {
            println!("layer {layer:>2} {d:<6} {c}");
        }
    }
    if let Some(p) = &a.weights {
        let w = ModelWeights::read(p)?;
        let bytes = fs::read(p)?;
        for name in w.names() {
            println!("{name} {:?}", w.get(name)?.dims());
        }
        println!("tensors {} parameters {} sha256 {}", w.len(), w.parameter_count(), weights::checksum(&bytes));
    }
    if let Some(p) = &a.events {
        let s = EventStream::read_any(p)?;
        let pos = s.events().iter().filter(|e| e.p == evtrack::event_io::Polarity::Positive).count();
        println!(
            "sensor {}x{} duration {} us events {} positive {} negative {}",
            s.width(),
            s.height(),
            s.duration_us(),
            s.len(),
            pos,
            s.len() - pos
        );
    }
    Ok(())
}

fn cmd_selftest(a: &SelftestArgs) -> Result<bool> {
    let mut ok = true;
    if let Some(p) = &a.weights {
        let cfg = load_config(a.config.as_deref(), &[])?;
        match load_weights(p, &cfg.model) {
            Ok(_) if sidecar(p).exists() => println!("[PASS]  0 weights audit: {} matches shapes and checksum", p.display()),
            Ok(_) => {
                ok = false;
                println!("[FAIL]  0 weights audit: no checksum sidecar {}", sidecar(p).display());
            }
            Err(e) => {
                ok = false;
                println!("[FAIL]  0 weights audit: {e:#}");
            }
        }
    }
    let opts = SelftestOptions {
        model: if a.tiny { ModelConfig::tiny() } else { ModelConfig::default() },
        frames: a.frames,
        ..SelftestOptions::default()
    };
    for r in selftest::run_all(&opts) {
        println!("{}", r.line());
        ok &= r.passed;
    }
    println!("{}", if ok { "selftest passed" } else { "selftest FAILED" });
    Ok(ok)
}

fn cmd_weights(a: &WeightsArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), &a.overrides)?;
    ensure!(a.halt_bias.is_finite(), "--halt-bias must be finite");
    let w = selftest_weights(&cfg.model, a.seed, InitOptions { halt_bias: a.halt_bias });
    let bytes = w.to_bytes();
    write(&a.out, &bytes)?;
    write(&sidecar(&a.out), weights::checksum(&bytes) + "\n")?;
    println!("wrote {} tensors ({} parameters) to {}", w.len(), w.parameter_count(), a.out.display());
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("EVTRACK_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("EVTRACK_THREADS=`{v}` is not a thread count"))?;
        if n == 0 {
            bail!("EVTRACK_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    init_threads()?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(a)?,
        Command::Track(a) => cmd_track(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Inspect(a) => cmd_inspect(a)?,
        Command::Selftest(a) => return cmd_selftest(a),
        Command::Weights(a) => cmd_weights(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
