//! Three-stage transformer over template and progressively injected search tokens.
//!
//! Stage 1 runs on `[template | dense]`. Each later stage appends the next
//! density's search tokens after a residual feature transformation. The first
//! layer of every stage carries the mixture-of-experts FFN; from
//! `dps_start_layer` on, a halting controller may stop the pass early.

use std::ops::Range;

use thiserror::Error;

use crate::config::{ModelConfig, RoutingMode};
use crate::dps::{self, Decision, DpsError, HaltingController, HaltingRecord};
use crate::frame_builder::Crop;
use crate::nn::{layer_norm, linear, multi_head_attention, AttentionWeights, NnError, Rng, Tensor};
use crate::sa_moe::{self, ffn_forward, ExpertSet, MoeError, RouterWeights, RoutingRecord};
use crate::weights::{ModelWeights, WeightsError};
use crate::Density;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{kind} crop is {found}x{found}, expected {expected}x{expected}")]
    CropSize { kind: CropKind, expected: usize, found: usize },
    #[error("bad model input: {0}")]
    Input(String),
    #[error("density {0} injected twice")]
    DuplicateInjection(Density),
    #[error("injection order {0:?} is not a permutation of the three densities")]
    BadSchedule([Density; 3]),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Dps(#[from] DpsError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropKind {
    Template,
    Search,
}

impl std::fmt::Display for CropKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CropKind::Template => "template",
            CropKind::Search => "search",
        })
    }
}

/// Token index ranges of the current sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    nz: usize,
    nx: usize,
    embed_dim: usize,
    injected: Vec<Density>,
}

impl TokenLayout {
    pub fn new(nz: usize, nx: usize, embed_dim: usize) -> Self {
        Self { nz, nx, embed_dim, injected: Vec::with_capacity(3) }
    }

    /// Appends a density block and returns its range.
    pub fn inject(&mut self, d: Density) -> Result<Range<usize>> {
        if self.injected.contains(&d) {
            return Err(ModelError::DuplicateInjection(d));
        }
        self.injected.push(d);
        Ok(self.search_range(d).expect("just injected"))
    }

    pub fn len(&self) -> usize {
        self.nz + self.injected.len() * self.nx
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn template_range(&self) -> Range<usize> {
        0..self.nz
    }

    pub fn search_range(&self, d: Density) -> Option<Range<usize>> {
        let slot = self.injected.iter().position(|&x| x == d)?;
        let start = self.nz + slot * self.nx;
        Some(start..start + self.nx)
    }

    /// Densities present, in injection order.
    pub fn injected(&self) -> &[Density] {
        &self.injected
    }
}

/// Layers per stage and the density each stage injects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSchedule {
    pub layers_per_stage: [usize; 3],
    pub injection_order: [Density; 3],
}

impl StageSchedule {
    pub fn new(layers_per_stage: [usize; 3], injection_order: [Density; 3]) -> Result<Self> {
        let mut seen = [false; 3];
        injection_order.iter().for_each(|d| seen[d.index()] = true);
        if seen.contains(&false) {
            return Err(ModelError::BadSchedule(injection_order));
        }
        if layers_per_stage.contains(&0) {
            return Err(ModelError::Config(format!("empty stage in {layers_per_stage:?}")));
        }
        Ok(Self { layers_per_stage, injection_order })
    }

    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self { layers_per_stage: cfg.stage_layers, injection_order: Density::ORDER }
    }

    pub fn num_layers(&self) -> usize {
        self.layers_per_stage.iter().sum()
    }
}

/// Validated configuration plus audited weights.
#[derive(Debug, Clone, Copy)]
pub struct Model<'w> {
    cfg: &'w ModelConfig,
    weights: &'w ModelWeights,
}

impl<'w> Model<'w> {
    /// Checks the config and runs the weights shape audit.
    pub fn new(cfg: &'w ModelConfig, weights: &'w ModelWeights) -> crate::Result<Self> {
        cfg.validate()?;
        weights.audit(cfg)?;
        Ok(Self { cfg, weights })
    }

    pub fn config(&self) -> &'w ModelConfig {
        self.cfg
    }

    pub fn weights(&self) -> &'w ModelWeights {
        self.weights
    }
}

/// Patch tokens plus position embedding for a template or search crop.
pub fn patch_embed(crop: &Crop, weights: &ModelWeights, cfg: &ModelConfig, kind: CropKind) -> Result<Tensor> {
    let expected = match kind {
        CropKind::Template => cfg.template_size,
        CropKind::Search => cfg.search_size,
    };
    let s = crop.size();
    if s != expected || crop.pixels.len() != 3 * s * s {
        return Err(ModelError::CropSize { kind, expected, found: s });
    }
    let p = cfg.patch;
    if p == 0 || !s.is_multiple_of(p) {
        return Err(ModelError::Config(format!("patch {p} does not divide crop {s}")));
    }
    let g = s / p;
    let width = 3 * p * p;
    let mut patches = vec![0.0f32; g * g * width];
    for (idx, dst) in patches.chunks_exact_mut(width).enumerate() {
        let (gy, gx) = (idx / g, idx % g);
        for c in 0..3 {
            for py in 0..p {
                let src = c * s * s + (gy * p + py) * s + gx * p;
                let at = (c * p + py) * p;
                dst[at..at + p].copy_from_slice(&crop.pixels[src..src + p]);
            }
        }
    }
    let patches = Tensor::new([g * g, width], patches)?;
    let mut tokens = linear(&patches, weights.get("patch_embed.weight")?, weights.get("patch_embed.bias")?)?;
    let pos = weights.get(match kind {
        CropKind::Template => "pos_embed.template",
        CropKind::Search => "pos_embed.search",
    })?;
    tokens.add_assign(pos)?;
    Ok(tokens)
}

/// `x + linear(layer_norm(x))` with the parameters of `stage` (2 or 3).
pub fn feature_transform(tokens: &Tensor, stage: usize, weights: &ModelWeights, eps: f32) -> Result<Tensor> {
    if !(2..=3).contains(&stage) {
        return Err(ModelError::Input(format!("feature transform stage {stage} outside 2..=3")));
    }
    let t = format!("transform.stage{stage}");
    let normed = layer_norm(tokens, weights.get(&format!("{t}.norm.weight"))?, weights.get(&format!("{t}.norm.bias"))?, eps)?;
    let branch = linear(&normed, weights.get(&format!("{t}.linear.weight"))?, weights.get(&format!("{t}.linear.bias"))?)?;
    Ok(tokens.add(&branch)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub moe_enabled: bool,
    pub dps_enabled: bool,
    pub routing: RoutingMode,
    pub tau: f32,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { moe_enabled: true, dps_enabled: true, routing: RoutingMode::Hard, tau: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Fused search features `[N_x, D]`.
    pub fused: Tensor,
    pub halting: HaltingRecord,
    pub routing: Vec<RoutingRecord>,
    /// Sequence length at each executed layer.
    pub layer_lengths: Vec<usize>,
    pub layout: TokenLayout,
    /// Template tokens after the last executed layer.
    pub template_out: Tensor,
}

/// Embeds the crops and runs [`forward_tokens`].
pub fn forward_stages(
    model: &Model,
    template_crop: &Crop,
    search_crops: [&Crop; 3],
    opts: &ForwardOptions,
    rng: &mut Rng,
) -> Result<ForwardOutput> {
    let (cfg, w) = (model.cfg, model.weights);
    let template = patch_embed(template_crop, w, cfg, CropKind::Template)?;
    let mut search = Vec::with_capacity(3);
    for crop in search_crops {
        search.push(patch_embed(crop, w, cfg, CropKind::Search)?);
    }
    let search: [Tensor; 3] = search.try_into().expect("three crops");
    forward_tokens(model, &template, &search, opts, rng)
}

/// Backbone pass from embedded template tokens and per-density search tokens
/// (indexed by [`Density::index`]).
pub fn forward_tokens(
    model: &Model,
    template: &Tensor,
    search: &[Tensor; 3],
    opts: &ForwardOptions,
    rng: &mut Rng,
) -> Result<ForwardOutput> {
    let (cfg, w) = (model.cfg, model.weights);
    let d = cfg.embed_dim;
    let (nz, nx) = (cfg.template_tokens(), cfg.search_tokens());
    if template.dims() != [nz, d] {
        return Err(ModelError::Input(format!("template tokens {:?}, expected [{nz}, {d}]", template.dims())));
    }
    if let Some(t) = search.iter().find(|t| t.dims() != [nx, d]) {
        return Err(ModelError::Input(format!("search tokens {:?}, expected [{nx}, {d}]", t.dims())));
    }
    let schedule = StageSchedule::from_config(cfg);
    let last = schedule.num_layers();
    let start = cfg.dps_start_layer;

    let mut layout = TokenLayout::new(nz, nx, d);
    let mut x = template.clone();
    let mut controller = opts.dps_enabled.then(|| HaltingController::new(start, last));
    let mut per_layer = Vec::new();
    let mut routing = Vec::new();
    let mut layer_lengths = Vec::with_capacity(last);
    let mut layer = 0;
    let mut fused = None;

    'stages: for (stage, (&n_layers, &density)) in
        schedule.layers_per_stage.iter().zip(&schedule.injection_order).enumerate()
    {
        let block = &search[density.index()];
        let block = if stage == 0 { block.clone() } else { feature_transform(block, stage + 1, w, cfg.ln_eps)? };
        layout.inject(density)?;
        x = Tensor::concat_rows(&[&x, &block])?;

        for _ in 0..n_layers {
            layer += 1;
            debug_assert_eq!(x.dims()[0], layout.len());
            layer_lengths.push(layout.len());
            let record = (opts.moe_enabled && cfg.is_moe_layer(layer)).then_some(stage + 1);
            x = block_forward(w, cfg, layer, &x, &layout, record, opts, rng, &mut routing)?;

            if layer < start {
                continue;
            }
            match controller.as_mut() {
                Some(c) => {
                    let prob = dps::halting_prob(&x, w.get(&format!("halt.{layer}.weight"))?, w.get(&format!("halt.{layer}.bias"))?)?;
                    per_layer.push(fuse(&x, &layout)?);
                    if let Decision::Halt(_) = c.step(prob)? {
                        break 'stages;
                    }
                }
                None if layer == last => fused = Some(fuse(&x, &layout)?),
                None => {}
            }
        }
    }

    let (fused, halting) = match controller {
        Some(c) => {
            let record = c.finish().ok_or_else(|| ModelError::Input("halting controller never halted".into()))?;
            let fused = dps::aggregate(&per_layer, &record.probs)?;
            (fused, record)
        }
        None => (fused.expect("last layer ran"), HaltingRecord::disabled(start, last)),
    };
    let template_out = x.rows(0, nz);
    Ok(ForwardOutput { fused, halting, routing, layer_lengths, layout, template_out })
}

/// Element-wise sum of the search blocks present, in injection order.
pub fn fuse(tokens: &Tensor, layout: &TokenLayout) -> Result<Tensor> {
    let d = layout.embed_dim();
    let mut out: Option<Tensor> = None;
    for &density in layout.injected() {
        let r = layout.search_range(density).expect("injected");
        let block = tokens.rows(r.start, r.end);
        match out.as_mut() {
            None => out = Some(block),
            Some(acc) => acc.add_assign(&block)?,
        }
    }
    out.ok_or_else(|| ModelError::Input(format!("no search tokens in a layout of width {d}")))
}

/// One pre-norm block. `moe_active` is the number of routed densities when
/// this layer runs its mixture-of-experts FFN.
#[allow(clippy::too_many_arguments)]
fn block_forward(
    w: &ModelWeights,
    cfg: &ModelConfig,
    layer: usize,
    x: &Tensor,
    layout: &TokenLayout,
    moe_active: Option<usize>,
    opts: &ForwardOptions,
    rng: &mut Rng,
    routing: &mut Vec<RoutingRecord>,
) -> Result<Tensor> {
    let b = format!("blocks.{layer}");
    let g = |name: &str| w.get(&format!("{b}.{name}"));
    let h = layer_norm(x, g("norm1.weight")?, g("norm1.bias")?, cfg.ln_eps)?;
    let attn = AttentionWeights {
        qkv_weight: g("attn.qkv.weight")?,
        qkv_bias: g("attn.qkv.bias")?,
        proj_weight: g("attn.proj.weight")?,
        proj_bias: g("attn.proj.bias")?,
    };
    let mut x = x.add(&multi_head_attention(&h, &h, &attn, cfg.heads)?)?;

    let h = layer_norm(&x, g("norm2.weight")?, g("norm2.bias")?, cfg.ln_eps)?;
    let shared = w.ffn(layer)?;
    let f = match moe_active {
        None => ffn_forward(&h, &shared)?,
        Some(active) => {
            let router = RouterWeights {
                fc1_weight: g("moe.router.fc1.weight")?,
                fc1_bias: g("moe.router.fc1.bias")?,
                fc2_weight: g("moe.router.fc2.weight")?,
                fc2_bias: g("moe.router.fc2.bias")?,
            };
            let template = h.rows(0, layout.template_range().end);
            let blocks: Vec<Tensor> = layout.injected()[..active]
                .iter()
                .map(|&dn| {
                    let r = layout.search_range(dn).expect("injected");
                    h.rows(r.start, r.end)
                })
                .collect();
            let refs: Vec<&Tensor> = blocks.iter().collect();
            let record = sa_moe::route(&template, &refs, &router, active, layer, opts.routing, opts.tau, rng)?;
            let experts = ExpertSet {
                shared,
                experts: [
                    w.expert(layer, Density::Dense)?,
                    w.expert(layer, Density::Medium)?,
                    w.expert(layer, Density::Sparse)?,
                ],
            };
            let out = sa_moe::moe_forward(layout, &h, &experts, &record)?;
            routing.push(record);
            out
        }
    };
    x.add_assign(&f)?;
    Ok(x)
}
