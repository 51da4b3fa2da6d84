//! Model and tracker configuration with a plain `key = value` text format.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::frame_builder::{SEARCH_CONTEXT, SEARCH_SIZE, TEMPLATE_CONTEXT, TEMPLATE_SIZE};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub template_size: usize,
    pub search_size: usize,
    /// Layers per stage; stage `s` injects the `s`-th density of the injection order.
    pub stage_layers: [usize; 3],
    /// First layer (1-based) with a halting predictor.
    pub dps_start_layer: usize,
    pub head_channels: usize,
    pub ln_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            embed_dim: 192,
            heads: 3,
            mlp_hidden: 768,
            template_size: TEMPLATE_SIZE,
            search_size: SEARCH_SIZE,
            stage_layers: [6, 4, 2],
            dps_start_layer: 7,
            head_channels: 64,
            ln_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// Small but structurally complete configuration for fast tests.
    pub fn tiny() -> Self {
        Self { embed_dim: 24, heads: 2, mlp_hidden: 48, head_channels: 8, ..Self::default() }
    }

    pub fn num_layers(&self) -> usize {
        self.stage_layers.iter().sum()
    }

    pub fn template_grid(&self) -> usize {
        self.template_size / self.patch
    }

    pub fn search_grid(&self) -> usize {
        self.search_size / self.patch
    }

    pub fn template_tokens(&self) -> usize {
        self.template_grid().pow(2)
    }

    pub fn search_tokens(&self) -> usize {
        self.search_grid().pow(2)
    }

    /// Stage index (0-based) of a 1-based layer.
    pub fn stage_of(&self, layer: usize) -> usize {
        let mut end = 0;
        for (s, n) in self.stage_layers.iter().enumerate() {
            end += n;
            if layer <= end {
                return s;
            }
        }
        2
    }

    /// First layer (1-based) of each stage; these carry the mixture-of-experts FFN.
    pub fn stage_first_layers(&self) -> [usize; 3] {
        let [a, b, _] = self.stage_layers;
        [1, a + 1, a + b + 1]
    }

    pub fn is_moe_layer(&self, layer: usize) -> bool {
        self.stage_first_layers().contains(&layer)
    }

    /// Layers with a halting predictor, inclusive.
    pub fn halting_layers(&self) -> std::ops::RangeInclusive<usize> {
        self.dps_start_layer..=self.num_layers()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || !self.template_size.is_multiple_of(self.patch) || !self.search_size.is_multiple_of(self.patch) {
            return bad(format!("patch {} must divide {} and {}", self.patch, self.template_size, self.search_size));
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!("heads {} must divide embed_dim {}", self.heads, self.embed_dim));
        }
        if self.mlp_hidden == 0 || !self.mlp_hidden.is_multiple_of(3) {
            return bad(format!("mlp_hidden {} must be a positive multiple of 3", self.mlp_hidden));
        }
        if self.stage_layers.contains(&0) {
            return bad(format!("every stage needs at least one layer, got {:?}", self.stage_layers));
        }
        if self.dps_start_layer == 0 || self.dps_start_layer > self.num_layers() {
            return bad(format!("dps_start_layer {} outside 1..={}", self.dps_start_layer, self.num_layers()));
        }
        if self.head_channels < 2 {
            return bad("head_channels must be at least 2".into());
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingMode {
    /// Zero-noise argmax; deterministic.
    Hard,
    /// Gumbel noise from the seeded RNG, then argmax of the soft sample.
    Soft,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub dt_us: u64,
    pub model: ModelConfig,
    pub dps_enabled: bool,
    pub moe_enabled: bool,
    pub routing: RoutingMode,
    pub tau: f32,
    pub seed: u64,
    pub template_context: f64,
    pub search_context: f64,
    /// Ponder-loss schedule; reported only, inference does not use it.
    pub alpha: f64,
    pub e_start: f64,
    pub e_total: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            dt_us: 20_000,
            model: ModelConfig::default(),
            dps_enabled: true,
            moe_enabled: true,
            routing: RoutingMode::Hard,
            tau: 1.0,
            seed: 0,
            template_context: TEMPLATE_CONTEXT,
            search_context: SEARCH_CONTEXT,
            alpha: 0.04,
            e_start: 10.0,
            e_total: 50.0,
        }
    }
}

const KEYS: &[&str] = &[
    "dt_us",
    "patch",
    "embed_dim",
    "heads",
    "mlp_hidden",
    "template_size",
    "search_size",
    "stage_layers",
    "dps_start_layer",
    "head_channels",
    "ln_eps",
    "dps_enabled",
    "moe_enabled",
    "routing",
    "tau",
    "seed",
    "template_context",
    "search_context",
    "alpha",
    "e_start",
    "e_total",
];

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.dt_us == 0 {
            return bad("dt_us must be positive".into());
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.template_context > 0.0 && self.search_context > 0.0) {
            return bad("context factors must be positive".into());
        }
        if !(self.alpha > 0.0 && self.e_start >= 0.0 && self.e_start < self.e_total) {
            return bad("need alpha > 0 and 0 <= e_start < e_total".into());
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}` for `{k}`"))
        }
        fn flag(k: &str, v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(format!("invalid boolean `{v}` for `{k}`")),
            }
        }
        let m = &mut self.model;
        match key {
            "dt_us" => self.dt_us = num(key, value)?,
            "patch" => m.patch = num(key, value)?,
            "embed_dim" => m.embed_dim = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "mlp_hidden" => m.mlp_hidden = num(key, value)?,
            "template_size" => m.template_size = num(key, value)?,
            "search_size" => m.search_size = num(key, value)?,
            "stage_layers" => {
                let parts: Vec<usize> =
                    value.split(',').map(|p| num(key, p.trim())).collect::<std::result::Result<_, _>>()?;
                m.stage_layers =
                    parts.try_into().map_err(|_| format!("`{key}` needs exactly three comma-separated counts"))?;
            }
            "dps_start_layer" => m.dps_start_layer = num(key, value)?,
            "head_channels" => m.head_channels = num(key, value)?,
            "ln_eps" => m.ln_eps = num(key, value)?,
            "dps_enabled" => self.dps_enabled = flag(key, value)?,
            "moe_enabled" => self.moe_enabled = flag(key, value)?,
            "routing" => {
                self.routing = match value {
                    "hard" => RoutingMode::Hard,
                    "soft" => RoutingMode::Soft,
                    _ => return Err(format!("routing must be `hard` or `soft`, got `{value}`")),
                }
            }
            "tau" => self.tau = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "template_context" => self.template_context = num(key, value)?,
            "search_context" => self.search_context = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "e_start" => self.e_start = num(key, value)?,
            "e_total" => self.e_total = num(key, value)?,
            _ => return Err(format!("unknown key `{key}` (known: {})", KEYS.join(", "))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut map = BTreeMap::new();
        map.insert("dt_us", self.dt_us.to_string());
        map.insert("patch", m.patch.to_string());
        map.insert("embed_dim", m.embed_dim.to_string());
        map.insert("heads", m.heads.to_string());
        map.insert("mlp_hidden", m.mlp_hidden.to_string());
        map.insert("template_size", m.template_size.to_string());
        map.insert("search_size", m.search_size.to_string());
        map.insert("stage_layers", format!("{},{},{}", m.stage_layers[0], m.stage_layers[1], m.stage_layers[2]));
        map.insert("dps_start_layer", m.dps_start_layer.to_string());
        map.insert("head_channels", m.head_channels.to_string());
        map.insert("ln_eps", m.ln_eps.to_string());
        map.insert("dps_enabled", self.dps_enabled.to_string());
        map.insert("moe_enabled", self.moe_enabled.to_string());
        map.insert("routing", if self.routing == RoutingMode::Hard { "hard" } else { "soft" }.to_string());
        map.insert("tau", self.tau.to_string());
        map.insert("seed", self.seed.to_string());
        map.insert("template_context", self.template_context.to_string());
        map.insert("search_context", self.search_context.to_string());
        map.insert("alpha", self.alpha.to_string());
        map.insert("e_start", self.e_start.to_string());
        map.insert("e_total", self.e_total.to_string());
        let mut out = String::new();
        for (k, v) in map {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
