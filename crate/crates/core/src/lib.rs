//! Event-camera single-object tracking with multi-density event frames.
//!
//! The pipeline turns an asynchronous event stream into sparse, medium and
//! dense frames per temporal segment, feeds them progressively into a
//! three-stage Transformer whose first block in each stage carries a
//! sparsity-aware mixture-of-experts FFN, and optionally stops the forward
//! pass early once the accumulated halting probability reaches one.
//!
//! Module map:
//!
//! - [`event_io`]: event streams, ground truth, text/binary formats, synthetic scenes
//! - [`frame_builder`]: temporal windows, stacked event frames, crops
//! - [`nn`]: dense f32 kernels and the seeded RNG
//! - [`backbone`]: patch embedding, transformer stages, weights file
//! - [`sa_moe`]: FFN partition into density experts and the router
//! - [`dps`]: halting controller, layer aggregation, ponder loss
//! - [`head`], [`loss`], [`metrics`]: center head, training losses, SR/PR/NPR/FPS
//! - [`tracker`]: end-to-end inference over a sequence
//! - [`selftest`]: invariant checks shared by the CLI and the acceptance suite

pub mod backbone;
pub mod bbox;
pub mod config;
pub mod dps;
pub mod error;
pub mod event_io;
pub mod frame_builder;
pub mod head;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod sa_moe;
pub mod selftest;
pub mod tracker;
pub mod weights;

pub use bbox::BBox;
pub use error::{Error, Result};

/// The three event densities, in backbone injection order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Density {
    Dense,
    Medium,
    Sparse,
}

impl Density {
    /// Injection order: dense first, sparse last.
    pub const ORDER: [Density; 3] = [Density::Dense, Density::Medium, Density::Sparse];

    pub fn index(self) -> usize {
        match self {
            Density::Dense => 0,
            Density::Medium => 1,
            Density::Sparse => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Density> {
        Self::ORDER.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Density::Dense => "dense",
            Density::Medium => "medium",
            Density::Sparse => "sparse",
        }
    }

    pub fn parse(s: &str) -> Option<Density> {
        match s {
            "dense" => Some(Density::Dense),
            "medium" => Some(Density::Medium),
            "sparse" => Some(Density::Sparse),
            _ => None,
        }
    }
}

impl std::fmt::Display for Density {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
