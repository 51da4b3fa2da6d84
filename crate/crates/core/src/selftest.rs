//! Invariant checks run by `evtrack selftest`.
//!
//! Each check is self-contained, seeded and returns a [`CheckReport`]; none of
//! them panics on failure.

use std::time::{Duration, Instant};

use crate::backbone::TokenLayout;
use crate::config::{ModelConfig, RoutingMode, TrackerConfig};
use crate::dps::{self, Decision, HaltingController};
use crate::event_io::{generate_synthetic, Event, EventStream, GroundTruth, Polarity, SceneSpec, Waypoint};
use crate::frame_builder::{build_triplet, segment_windows};
use crate::loss::{focal_loss, gaussian_heatmap, giou_loss, l1_loss, lambda4};
use crate::metrics::{evaluate, FrameInfo};
use crate::nn::{Rng, Tensor};
use crate::sa_moe::{ffn_forward, select, split_ffn, ExpertSlices, Ffn, FfnWeights, MoeError};
use crate::tracker::{track_sequence, TrackResult};
use crate::weights::{selftest_weights, InitOptions, ModelWeights};
use crate::{BBox, Density};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl CheckReport {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {}: {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

fn report(id: usize, name: &'static str, started: Instant, outcome: Result<String, String>) -> CheckReport {
    let (passed, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckReport { id, name, passed, detail, elapsed: started.elapsed() }
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Settings for the end-to-end checks.
#[derive(Debug, Clone)]
pub struct SelftestOptions {
    pub model: ModelConfig,
    pub frames: usize,
    pub seed: u64,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self { model: ModelConfig::default(), frames: 50, seed: 7 }
    }
}

/// The synthetic sequence used by the end-to-end checks: a 40x30 target
/// crossing a 346x260 sensor.
pub fn selftest_sequence(frames: usize, dt_us: u64, seed: u64) -> crate::Result<(EventStream, GroundTruth)> {
    let duration = frames as u64 * dt_us;
    let mut spec = SceneSpec::linear(346, 260, duration, dt_us, (90.0, 100.0), (250.0, 160.0), (40.0, 30.0));
    spec.waypoints.insert(1, Waypoint { t_us: duration / 2, cx: 200.0, cy: 90.0 });
    Ok(generate_synthetic(&spec, seed)?)
}

pub fn run_all(opts: &SelftestOptions) -> Vec<CheckReport> {
    vec![
        check_ffn_partition(split_ffn),
        check_dps_normalization(),
        check_ponder_schedule(),
        check_window_nesting(),
        check_token_accounting(),
        check_routing_validity(),
        check_loss_gradients(),
        check_determinism_and_ablations(opts),
        check_metric_oracle(),
        check_dps_efficiency(opts),
    ]
}

fn random_ffn(h: usize, d: usize, rng: &mut Rng) -> Ffn {
    let mut t = |dims: &[usize]| {
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).expect("sized")
    };
    Ffn { w1: t(&[h, d]), b1: t(&[h]), w2: t(&[d, h]), b2: t(&[d]) }
}

/// 1. The three experts sum back to the FFN they were cut from. `split` is the
/// partition under test, so a mutated split can be checked to fail.
pub fn check_ffn_partition(split: impl Fn(&FfnWeights) -> Result<ExpertSlices, MoeError>) -> CheckReport {
    let started = Instant::now();
    let outcome = (|| {
        let mut rng = Rng::new(101);
        let mut ffns = 0;
        let mut worst = 0.0f64;
        for h in [6, 12, 48] {
            for d in [4, 16] {
                for _ in 0..17 {
                    let f = random_ffn(h, d, &mut rng);
                    let slices = split(&f.view()).map_err(|e| e.to_string())?;
                    let x = Tensor::new([100, d], (0..100 * d).map(|_| rng.uniform(-2.0, 2.0)).collect()).expect("sized");
                    let full = ffn_forward(&x, &f.view()).map_err(|e| e.to_string())?;
                    let mut sum = Tensor::zeros([100, d]);
                    for e in &slices.experts {
                        sum.add_assign(&ffn_forward(&x, &e.view()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
                    }
                    for r in 0..100 {
                        let (a, b) = (sum.row(r), full.row(r));
                        let diff: f64 = a.iter().zip(b).map(|(p, q)| (f64::from(*p) - f64::from(*q)).powi(2)).sum::<f64>().sqrt();
                        let norm: f64 = b.iter().map(|q| f64::from(*q).powi(2)).sum::<f64>().sqrt();
                        worst = worst.max(diff / (norm + 1e-12));
                    }
                    ffns += 1;
                }
            }
        }
        ensure!(worst < 1e-6, "worst relative error {worst:e} over {ffns} FFNs");
        Ok(format!("{ffns} FFNs x 100 inputs, worst relative error {worst:.2e}"))
    })();
    report(1, "ffn partition identity", started, outcome)
}

/// 2. Aggregation weights form a convex combination and the halting layer
/// matches a running sum.
pub fn check_dps_normalization() -> CheckReport {
    let started = Instant::now();
    let outcome = (|| {
        let mut rng = Rng::new(202);
        let mut hist = [0usize; 6];
        for trial in 0..10_000 {
            let scale = rng.uniform(0.0, 1.0);
            let probs: Vec<f32> = (0..6).map(|_| rng.uniform(0.0, 1.0) * scale).collect();
            let mut c = HaltingController::new(7, 12);
            for &p in &probs {
                if let Decision::Halt(_) = c.step(p).map_err(|e| e.to_string())? {
                    break;
                }
            }
            let rec = c.finish().ok_or("controller did not halt")?;
            let mut sum = 0.0f64;
            let mut expect = 12;
            for (i, &p) in probs.iter().enumerate() {
                sum += f64::from(p);
                if sum >= 1.0 {
                    expect = 7 + i;
                    break;
                }
            }
            ensure!(rec.halting_layer == expect, "trial {trial}: halted at {} but running sum says {expect}", rec.halting_layer);
            ensure!(rec.weights.iter().all(|&w| w >= 0.0), "trial {trial}: negative weight {:?}", rec.weights);
            let total: f64 = rec.weights.iter().sum();
            ensure!((total - 1.0).abs() < 1e-6, "trial {trial}: weights sum to {total}");
            hist[expect - 7] += 1;
        }
        Ok(format!("10000 trajectories, halting histogram 7..12 = {hist:?}"))
    })();
    report(2, "dps normalization", started, outcome)
}

/// 3. Ponder loss values and the cosine schedule endpoints.
pub fn check_ponder_schedule() -> CheckReport {
    let started = Instant::now();
    let outcome = (|| {
        for l in 7..=12 {
            let v = dps::ponder_loss(l).map_err(|e| e.to_string())?;
            ensure!(v == (l - 6) as f64, "ponder_loss({l}) = {v}");
        }
        ensure!(dps::ponder_loss(6).is_err() && dps::ponder_loss(13).is_err(), "out-of-range layers accepted");
        let (es, et) = (10.0, 50.0);
        for alpha in [0.04, 0.06, 0.10] {
            let l = |e: f64| lambda4(alpha, e, es, et).map_err(|e| e.to_string());
            ensure!(l(0.0)? == 0.0 && l(9.0)? == 0.0, "lambda4 before e_start is nonzero for alpha {alpha}");
            ensure!(l(et)? == 2.0 * alpha, "lambda4(e_total) = {} for alpha {alpha}", l(et)?);
            let mid = l((es + et) / 2.0)?;
            ensure!(mid == alpha, "lambda4(midpoint) = {mid} for alpha {alpha}");
        }
        Ok("L-6 on 7..=12; lambda4 = 0, alpha, 2 alpha at start, midpoint, end".into())
    })();
    report(3, "ponder loss and schedule", started, outcome)
}

/// 4. Windows nest and their event counts are ordered.
pub fn check_window_nesting() -> CheckReport {
    let started = Instant::now();
    let outcome = (|| {
        let mut rng = Rng::new(404);
        for trial in 0..1000 {
            let duration = 1 + rng.next_u64() % 200_000;
            let dt = 1 + rng.next_u64() % 50_000;
            let t_k = rng.next_u64() % (duration + 1);
            let n = (rng.next_u64() % 400) as usize;
            let events = (0..n)
                .map(|_| {
                    let p = if rng.next_u64().is_multiple_of(2) { Polarity::Positive } else { Polarity::Negative };
                    Event::new(rng.next_u64() % (duration + 1), (rng.next_u64() % 16) as u16, (rng.next_u64() % 12) as u16, p)
                })
                .collect();
            let stream = EventStream::from_unsorted(events, 16, 12, duration).map_err(|e| e.to_string())?;
            let w = segment_windows(t_k, dt, duration).map_err(|e| e.to_string())?;
            ensure!(w.sparse.is_subset_of(&w.medium) && w.medium.is_subset_of(&w.dense), "trial {trial}: {w:?}");
            let f = build_triplet(&stream, &w);
            ensure!(
                f.sparse.density <= f.medium.density && f.medium.density <= f.dense.density,
                "trial {trial}: densities {} {} {}",
                f.sparse.density,
                f.medium.density,
                f.dense.density
            );
        }
        Ok("1000 random windows and streams".into())
    })();
    report(4, "window nesting and density order", started, outcome)
}

/// 5. Sequence lengths per stage and a fixed template range.
pub fn check_token_accounting() -> CheckReport {
    use crate::backbone::{forward_tokens, ForwardOptions, Model};
    let started = Instant::now();
    let outcome = (|| {
        let cfg = ModelConfig::tiny();
        let (nz, nx) = (cfg.template_tokens(), cfg.search_tokens());
        ensure!((nz, nx) == (64, 256), "token counts {nz}, {nx}");
        let mut layout = TokenLayout::new(nz, nx, cfg.embed_dim);
        let mut lens = Vec::new();
        for d in Density::ORDER {
            let r = layout.inject(d).map_err(|e| e.to_string())?;
            ensure!(r.start == layout.len() - nx, "{d} block not appended at the end");
            ensure!(layout.template_range() == (0..nz), "template range moved to {:?}", layout.template_range());
            lens.push(layout.len());
        }
        ensure!(lens == [320, 576, 832], "stage lengths {lens:?}");

        let w = selftest_weights(&cfg, 5, InitOptions::default());
        let model = Model::new(&cfg, &w).map_err(|e| e.to_string())?;
        let mut rng = Rng::new(5);
        let mut t = |n: usize| Tensor::new([n, cfg.embed_dim], (0..n * cfg.embed_dim).map(|_| rng.normal(0.0, 1.0)).collect()).expect("sized");
        let template = t(nz);
        let search = [t(nx), t(nx), t(nx)];
        let opts = ForwardOptions { dps_enabled: false, ..Default::default() };
        let out = forward_tokens(&model, &template, &search, &opts, &mut Rng::new(0)).map_err(|e| e.to_string())?;
        let mut expect = vec![320; 6];
        expect.extend([576; 4]);
        expect.extend([832; 2]);
        ensure!(out.layer_lengths == expect, "per-layer lengths {:?}", out.layer_lengths);
        Ok("320/576/832 at stages 1/2/3; template range 0..64 throughout".into())
    })();
    report(5, "token accounting", started, outcome)
}

/// 6. Masks are simplex points, hard masks one-hot, K=1 picks dense, inactive
/// logits never matter.
pub fn check_routing_validity() -> CheckReport {
    let started = Instant::now();
    let outcome = (|| {
        let mut rng = Rng::new(606);
        for trial in 0..10_000 {
            let logits = [rng.normal(0.0, 3.0), rng.normal(0.0, 3.0), rng.normal(0.0, 3.0)];
            let active = 1 + (rng.next_u64() % 3) as usize;
            let mode = if trial % 2 == 0 { RoutingMode::Hard } else { RoutingMode::Soft };
            let seed = rng.next_u64();
            let rec = select(logits, active, 1, mode, 1.0, &mut Rng::new(seed)).map_err(|e| e.to_string())?;
            ensure!(rec.mask.len() == active, "trial {trial}: mask length {}", rec.mask.len());
            ensure!(rec.mask.iter().all(|&m| m >= 0.0), "trial {trial}: negative mask {:?}", rec.mask);
            let sum: f32 = rec.mask.iter().sum();
            ensure!((sum - 1.0).abs() < 1e-6, "trial {trial}: mask sums to {sum}");
            if mode == RoutingMode::Hard {
                ensure!(rec.mask.iter().filter(|&&m| m == 1.0).count() == 1 && rec.mask.iter().all(|&m| m == 0.0 || m == 1.0), "trial {trial}: hard mask {:?}", rec.mask);
            }
            if active == 1 {
                ensure!(rec.selected == Density::Dense, "trial {trial}: K=1 selected {}", rec.selected);
            }
            let mut perturbed = logits;
            for v in perturbed.iter_mut().skip(active) {
                *v += rng.normal(0.0, 10.0);
            }
            let again = select(perturbed, active, 1, mode, 1.0, &mut Rng::new(seed)).map_err(|e| e.to_string())?;
            ensure!(again.selected == rec.selected && again.mask == rec.mask, "trial {trial}: inactive logits changed the selection");
        }
        Ok("10000 trials over K = 1..3, hard and soft".into())
    })();
    report(6, "routing validity", started, outcome)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

const FD_STEP: f64 = 1e-4;

/// 7. Analytic loss gradients agree with central differences.
pub fn check_loss_gradients() -> CheckReport {
    let started = Instant::now();
    let outcome = (|| {
        let mut rng = Rng::new(707);
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.open01();
        let mut worst = [0.0f64; 3];
        for _ in 0..100 {
            let grid = 8;
            let (col, row) = ((u(0.0, 8.0) as usize).min(7), (u(0.0, 8.0) as usize).min(7));
            let gt = gaussian_heatmap(grid, col, row, u(0.5, 3.0));
            let pred: Vec<f64> = (0..grid * grid).map(|_| u(0.05, 0.95)).collect();
            let (_, g) = focal_loss(&pred, &gt).map_err(|e| e.to_string())?;
            for i in 0..pred.len() {
                let (mut p, mut m) = (pred.clone(), pred.clone());
                p[i] += FD_STEP;
                m[i] -= FD_STEP;
                let n = (focal_loss(&p, &gt).map_err(|e| e.to_string())?.0 - focal_loss(&m, &gt).map_err(|e| e.to_string())?.0) / (2.0 * FD_STEP);
                worst[0] = worst[0].max(rel_err(g[i], n));
            }

            let len = 4;
            let target: Vec<f64> = (0..len).map(|_| u(-1.0, 1.0)).collect();
            let pred: Vec<f64> = target.iter().map(|t| t + if u(0.0, 1.0) < 0.5 { u(0.01, 1.0) } else { -u(0.01, 1.0) }).collect();
            let (_, g) = l1_loss(&pred, &target).map_err(|e| e.to_string())?;
            for i in 0..len {
                let (mut p, mut m) = (pred.clone(), pred.clone());
                p[i] += FD_STEP;
                m[i] -= FD_STEP;
                let n = (l1_loss(&p, &target).map_err(|e| e.to_string())?.0 - l1_loss(&m, &target).map_err(|e| e.to_string())?.0) / (2.0 * FD_STEP);
                worst[1] = worst[1].max(rel_err(g[i], n));
            }

            let gtb = BBox::new(u(0.0, 10.0), u(0.0, 10.0), u(1.0, 6.0), u(1.0, 6.0));
            let pb = BBox::new(u(-2.0, 12.0), u(-2.0, 12.0), u(1.0, 6.0), u(1.0, 6.0));
            let (_, g) = giou_loss(&pb, &gtb).map_err(|e| e.to_string())?;
            for (i, gi) in g.iter().enumerate() {
                let shift = |b: &BBox, s: f64| {
                    let mut v = [b.x, b.y, b.w, b.h];
                    v[i] += s;
                    BBox::new(v[0], v[1], v[2], v[3])
                };
                let lp = giou_loss(&shift(&pb, FD_STEP), &gtb).map_err(|e| e.to_string())?.0;
                let lm = giou_loss(&shift(&pb, -FD_STEP), &gtb).map_err(|e| e.to_string())?.0;
                worst[2] = worst[2].max(rel_err(*gi, (lp - lm) / (2.0 * FD_STEP)));
            }
        }
        ensure!(worst.iter().all(|&w| w <= 1e-4), "worst relative errors focal/l1/giou = {worst:?}");
        let b = BBox::new(1.5, 2.0, 3.0, 4.0);
        let (same, g) = giou_loss(&b, &b).map_err(|e| e.to_string())?;
        ensure!(same == 0.0 && g.iter().all(|v| v.abs() < 1e-12), "giou_loss(b, b) = {same}, grad {g:?}");
        let (disjoint, _) = giou_loss(&BBox::new(0.0, 0.0, 1.0, 1.0), &BBox::new(2.0, 0.0, 1.0, 1.0)).map_err(|e| e.to_string())?;
        ensure!((disjoint - 4.0 / 3.0).abs() < 1e-6, "disjoint giou loss {disjoint}");
        Ok(format!("100 instances each, worst relative errors focal/l1/giou = {:.1e}/{:.1e}/{:.1e}", worst[0], worst[1], worst[2]))
    })();
    report(7, "loss gradients", started, outcome)
}

fn track(stream: &EventStream, gt: &GroundTruth, w: &ModelWeights, cfg: &TrackerConfig) -> Result<TrackResult, String> {
    track_sequence(stream, gt, w, cfg).map_err(|e| e.to_string())
}

fn traces(r: &TrackResult) -> String {
    r.boxes_text() + &r.halting_text() + &r.routing_text()
}

/// Copy of `w` whose density experts add nothing at every MoE layer.
pub fn zero_expert_weights(w: &ModelWeights, cfg: &ModelConfig) -> ModelWeights {
    let mut z = w.clone();
    for l in cfg.stage_first_layers() {
        for e in 1..=3 {
            for part in ["fc2.weight", "fc2.bias"] {
                if let Ok(t) = z.get_mut(&format!("blocks.{l}.moe.expert{e}.{part}")) {
                    t.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }
    z
}

/// 8. Bit-identical reruns, forced full depth without halting, and the MoE
/// switch reproducing shared-FFN-only outputs.
pub fn check_determinism_and_ablations(opts: &SelftestOptions) -> CheckReport {
    let started = Instant::now();
    let outcome = (|| {
        let cfg = TrackerConfig { model: opts.model.clone(), seed: opts.seed, ..TrackerConfig::default() };
        let (stream, gt) = selftest_sequence(opts.frames, cfg.dt_us, opts.seed).map_err(|e| e.to_string())?;
        let w = selftest_weights(&cfg.model, opts.seed, InitOptions::default());

        let a = track(&stream, &gt, &w, &cfg)?;
        let b = track(&stream, &gt, &w, &cfg)?;
        ensure!(a.frames == b.frames && traces(&a) == traces(&b), "two identical runs differ");

        let no_dps = track(&stream, &gt, &w, &TrackerConfig { dps_enabled: false, ..cfg.clone() })?;
        ensure!(no_dps.frames.iter().all(|f| f.halting.halting_layer == 12), "--no-dps run halted before layer 12");

        let no_moe = track(&stream, &gt, &w, &TrackerConfig { moe_enabled: false, ..cfg.clone() })?;
        let zeroed = track(&stream, &gt, &zero_expert_weights(&w, &cfg.model), &cfg)?;
        ensure!(no_moe.boxes() == zeroed.boxes() && no_moe.halting_text() == zeroed.halting_text(), "disabling MoE differs from zero-output experts");
        ensure!(no_moe.frames.iter().all(|f| f.routing.is_empty()), "routing recorded with MoE disabled");

        let elapsed = started.elapsed().as_secs_f64();
        ensure!(elapsed < 60.0, "took {elapsed:.1}s");
        Ok(format!(
            "{} frames at D={}: reruns identical, no-dps L=12, MoE off = zero experts; mean L {:.2}",
            a.frames.len(),
            cfg.model.embed_dim,
            a.mean_halting_layer()
        ))
    })();
    report(8, "determinism and ablation hooks", started, outcome)
}

/// 9. Metrics against explicit enumeration.
pub fn check_metric_oracle() -> CheckReport {
    let started = Instant::now();
    let outcome = (|| {
        let gt = vec![BBox::new(0.0, 0.0, 2.0, 1.0); 3];
        let pred = vec![BBox::new(0.0, 0.0, 2.0, 1.0), BBox::new(0.0, 0.0, 1.0, 1.0), BBox::new(40.0, 0.0, 2.0, 1.0)];
        let r = evaluate(&pred, &gt, &FrameInfo::default()).map_err(|e| e.to_string())?;
        let ious = [1.0, 0.5, 0.0];
        let mut sr_hits = 0;
        for k in 0..=20 {
            let t = f64::from(k) / 20.0;
            sr_hits += ious.iter().filter(|&&i| i > 0.0 && i >= t).count();
        }
        let sr = sr_hits as f64 / 63.0;
        let errs = [0.0, 0.5, 40.0];
        let diag = 5.0f64.sqrt();
        let pr = errs.iter().filter(|&&e| e <= 20.0).count() as f64 / 3.0;
        let mut npr_hits = 0;
        for k in 0..=100 {
            let t = f64::from(k) / 200.0;
            npr_hits += errs.iter().filter(|&&e| e / diag <= t).count();
        }
        let npr = npr_hits as f64 / 303.0;
        ensure!((r.sr, r.pr, r.npr) == (sr, pr, npr), "got sr {} pr {} npr {}, enumeration gives {sr} {pr} {npr}", r.sr, r.pr, r.npr);
        let perfect = evaluate(&gt, &gt, &FrameInfo::default()).map_err(|e| e.to_string())?;
        ensure!((perfect.sr, perfect.pr, perfect.npr) == (1.0, 1.0, 1.0), "perfect tracking scored {perfect:?}");
        Ok(format!("hand case sr {sr:.4} pr {pr:.4} npr {npr:.4}; perfect = 1"))
    })();
    report(9, "metric oracle", started, outcome)
}

/// 10. Early exit lowers mean depth and raises throughput.
pub fn check_dps_efficiency(opts: &SelftestOptions) -> CheckReport {
    let started = Instant::now();
    let outcome = (|| {
        let frames = opts.frames.clamp(2, 20);
        let cfg = TrackerConfig { model: opts.model.clone(), seed: opts.seed, ..TrackerConfig::default() };
        let (stream, gt) = selftest_sequence(frames, cfg.dt_us, opts.seed).map_err(|e| e.to_string())?;
        let w = selftest_weights(&cfg.model, opts.seed, InitOptions { halt_bias: 2.0 });
        let early = track(&stream, &gt, &w, &cfg)?;
        let full = track(&stream, &gt, &w, &TrackerConfig { dps_enabled: false, ..cfg.clone() })?;
        let fps = |r: &TrackResult| r.frames.len() as f64 / (r.timing_us.iter().sum::<f64>() / 1e6);
        let (mean, fe, ff) = (early.mean_halting_layer(), fps(&early), fps(&full));
        ensure!(mean < 12.0, "mean halting layer {mean}");
        ensure!(fe > ff, "fps with halting {fe:.2} not above full-depth {ff:.2}");
        Ok(format!("mean L {mean:.2} vs 12; fps {fe:.2} vs {ff:.2}"))
    })();
    report(10, "dps efficiency direction", started, outcome)
}
