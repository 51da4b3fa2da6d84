//! Dynamic pondering: per-layer halting, early exit and layer aggregation.
//!
//! From the first halting layer on, every block output gets a halting
//! probability `sigmoid(linear(mean over tokens))`. The probabilities are
//! summed; the forward pass stops at the first layer where the sum reaches
//! one, or at the last layer. The output mixes the per-layer features with the
//! probabilities of the earlier layers and gives the halting layer the
//! remaining mass, so the weights always sum to one.

use std::fmt::Write as _;

use thiserror::Error;

use crate::nn::{global_avg_pool, sigmoid_scalar, NnError, Tensor};

pub const DEFAULT_START_LAYER: usize = 7;
pub const DEFAULT_LAST_LAYER: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum DpsError {
    #[error("controller already halted at layer {0}")]
    AlreadyHalted(usize),
    #[error("halting probability {0} outside [0, 1]")]
    BadProbability(f32),
    #[error("halting layer {layer} outside {start}..={last}")]
    LayerOutOfRange { layer: usize, start: usize, last: usize },
    #[error("negative remainder weight {0}")]
    NegativeRemainder(f64),
    #[error("{features} feature maps need at least {needed} probabilities, got {found}")]
    Misaligned { features: usize, needed: usize, found: usize },
    #[error("no features to aggregate")]
    Empty,
    #[error("bad halting predictor: {0}")]
    Predictor(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

type Result<T> = std::result::Result<T, DpsError>;

/// `sigmoid(w . mean(F) + b)` for one layer's full token sequence.
pub fn halting_prob(features: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<f32> {
    let pooled = global_avg_pool(features)?;
    let d = pooled.len();
    if weight.dims() != [1, d] || bias.dims() != [1] {
        return Err(DpsError::Predictor(format!("weight {:?}, bias {:?} for width {d}", weight.dims(), bias.dims())));
    }
    weight.check_finite("halting_prob")?;
    bias.check_finite("halting_prob")?;
    let z: f32 = pooled.data().iter().zip(weight.data()).map(|(a, b)| a * b).sum::<f32>() + bias.data()[0];
    Ok(sigmoid_scalar(z))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Halt(usize),
}

/// Running halting state for one forward pass.
#[derive(Debug, Clone)]
pub struct HaltingController {
    start: usize,
    last: usize,
    probs: Vec<f32>,
    cumulative: Vec<f64>,
    total: f64,
    halted: Option<usize>,
}

impl HaltingController {
    pub fn new(start: usize, last: usize) -> Self {
        assert!(start >= 1 && start <= last, "halting range {start}..={last}");
        Self { start, last, probs: Vec::new(), cumulative: Vec::new(), total: 0.0, halted: None }
    }

    /// The layer the next call to [`step`](Self::step) refers to.
    pub fn current_layer(&self) -> usize {
        self.start + self.probs.len()
    }

    pub fn cumulative(&self) -> f64 {
        self.total
    }

    pub fn step(&mut self, prob: f32) -> Result<Decision> {
        if let Some(l) = self.halted {
            return Err(DpsError::AlreadyHalted(l));
        }
        if !(0.0..=1.0).contains(&prob) {
            return Err(DpsError::BadProbability(prob));
        }
        let layer = self.current_layer();
        self.total += f64::from(prob);
        self.probs.push(prob);
        self.cumulative.push(self.total);
        if self.total >= 1.0 || layer == self.last {
            self.halted = Some(layer);
            Ok(Decision::Halt(layer))
        } else {
            Ok(Decision::Continue)
        }
    }

    pub fn halted_at(&self) -> Option<usize> {
        self.halted
    }

    /// Final record; `None` until the controller has halted.
    pub fn finish(self) -> Option<HaltingRecord> {
        let layer = self.halted?;
        let n = layer - self.start + 1;
        let weights = aggregation_weights(&self.probs, n).expect("remainder is positive before halting");
        Some(HaltingRecord { start_layer: self.start, probs: self.probs, cumulative: self.cumulative, halting_layer: layer, weights })
    }
}

/// Per-frame halting trace.
#[derive(Debug, Clone, PartialEq)]
pub struct HaltingRecord {
    pub start_layer: usize,
    /// Probabilities of layers `start_layer..=halting_layer`; empty when halting is disabled.
    pub probs: Vec<f32>,
    pub cumulative: Vec<f64>,
    pub halting_layer: usize,
    /// Aggregation weights of layers `start_layer..=halting_layer`.
    pub weights: Vec<f64>,
}

impl HaltingRecord {
    /// Record of a pass that ran every layer with halting switched off: all
    /// mass on the final layer.
    pub fn disabled(start: usize, last: usize) -> Self {
        let mut weights = vec![0.0; last - start + 1];
        *weights.last_mut().expect("non-empty range") = 1.0;
        Self { start_layer: start, probs: Vec::new(), cumulative: Vec::new(), halting_layer: last, weights }
    }

    /// `frame L C_p...`
    pub fn trace_line(&self, frame: usize) -> String {
        let mut s = format!("{frame} {}", self.halting_layer);
        for c in &self.cumulative {
            let _ = write!(s, " {c}");
        }
        s
    }
}

/// Weights for `layers` consecutive feature maps: the probabilities of all but
/// the last layer, and the remainder `1 - sum` on the last one.
pub fn aggregation_weights(probs: &[f32], layers: usize) -> Result<Vec<f64>> {
    if layers == 0 {
        return Err(DpsError::Empty);
    }
    if probs.len() < layers - 1 {
        return Err(DpsError::Misaligned { features: layers, needed: layers - 1, found: probs.len() });
    }
    let mut w: Vec<f64> = probs[..layers - 1].iter().map(|&p| f64::from(p)).collect();
    let remainder = 1.0 - w.iter().sum::<f64>();
    if remainder < 0.0 {
        return Err(DpsError::NegativeRemainder(remainder));
    }
    w.push(remainder);
    Ok(w)
}

/// Weighted sum of per-layer features `F_start..F_L` with
/// [`aggregation_weights`].
pub fn aggregate(features: &[Tensor], probs: &[f32]) -> Result<Tensor> {
    let first = features.first().ok_or(DpsError::Empty)?;
    let weights = aggregation_weights(probs, features.len())?;
    let mut acc = vec![0.0f64; first.len()];
    for (f, &w) in features.iter().zip(&weights) {
        if f.dims() != first.dims() {
            return Err(NnError::ShapeMismatch { op: "aggregate", left: first.dims().to_vec(), right: f.dims().to_vec() }.into());
        }
        f.check_finite("aggregate")?;
        acc.iter_mut().zip(f.data()).for_each(|(a, &v)| *a += w * f64::from(v));
    }
    Ok(Tensor::new(first.dims(), acc.into_iter().map(|v| v as f32).collect())?)
}

/// Executed layers past the always-on prefix, for the default 7..=12 range.
pub fn ponder_loss(halting_layer: usize) -> Result<f64> {
    ponder_loss_in(halting_layer, DEFAULT_START_LAYER, DEFAULT_LAST_LAYER)
}

pub fn ponder_loss_in(halting_layer: usize, start: usize, last: usize) -> Result<f64> {
    if halting_layer < start || halting_layer > last {
        return Err(DpsError::LayerOutOfRange { layer: halting_layer, start, last });
    }
    Ok((halting_layer - (start - 1)) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn run(probs: &[f32]) -> HaltingRecord {
        let mut c = HaltingController::new(7, 12);
        for &p in probs {
            if let Decision::Halt(_) = c.step(p).unwrap() {
                break;
            }
        }
        c.finish().unwrap()
    }

    #[test]
    fn halts_when_sum_reaches_one() {
        let r = run(&[0.3, 0.3, 0.5, 0.9]);
        assert_eq!(r.halting_layer, 9);
        assert_eq!(r.cumulative.len(), 3);
        assert!((r.cumulative[2] - 1.1).abs() < 1e-6);
        let expect = [0.3, 0.3, 0.4];
        for (w, e) in r.weights.iter().zip(expect) {
            assert!((w - e).abs() < 1e-6);
        }
    }

    #[test]
    fn small_probs_run_to_last_layer() {
        let r = run(&[0.01; 6]);
        assert_eq!(r.halting_layer, 12);
        assert!((r.weights[5] - 0.95).abs() < 1e-6);
    }

    #[test]
    fn saturated_first_prob_halts_immediately() {
        let r = run(&[1.0]);
        assert_eq!(r.halting_layer, 7);
        assert_eq!(r.weights, vec![1.0]);
    }

    #[test]
    fn final_layer_weight_is_remainder() {
        let w = aggregation_weights(&[0.1; 6], 6).unwrap();
        assert!((w[5] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn step_after_halt_fails() {
        let mut c = HaltingController::new(7, 12);
        assert_eq!(c.step(1.0).unwrap(), Decision::Halt(7));
        assert_eq!(c.step(0.1), Err(DpsError::AlreadyHalted(7)));
        let mut c = HaltingController::new(7, 12);
        assert_eq!(c.step(1.5), Err(DpsError::BadProbability(1.5)));
    }

    #[test]
    fn identical_features_are_a_fixed_point() {
        let f = Tensor::new([2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.25, -0.125]).unwrap();
        let feats = vec![f.clone(); 4];
        let out = aggregate(&feats, &[0.2, 0.3, 0.1]).unwrap();
        assert!(out.max_abs_diff(&f) < 1e-6);
    }

    #[test]
    fn disabled_record_selects_last_layer() {
        let r = HaltingRecord::disabled(7, 12);
        assert_eq!(r.halting_layer, 12);
        assert_eq!(r.weights, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(r.trace_line(3), "3 12");
    }

    #[test]
    fn ponder_loss_values() {
        assert_eq!(ponder_loss(9).unwrap(), 3.0);
        assert_eq!(ponder_loss(7).unwrap(), 1.0);
        assert_eq!(ponder_loss(12).unwrap(), 6.0);
        assert!(ponder_loss(6).is_err());
        assert!(ponder_loss(13).is_err());
    }

    #[test]
    fn halting_prob_values() {
        let f = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let zero = halting_prob(&f, &Tensor::zeros([1, 2]), &Tensor::zeros([1])).unwrap();
        assert_eq!(zero, 0.5);
        let hot = halting_prob(&f, &Tensor::zeros([1, 2]), &Tensor::full([1], 20.0)).unwrap();
        assert!(hot >= 0.999);
        let w = Tensor::new([1, 2], vec![0.5, -0.25]).unwrap();
        let b = Tensor::full([1], 0.1);
        // mean = (2, 3); z = 1 - 0.75 + 0.1 = 0.35
        let expect = 1.0 / (1.0 + (-0.35f64).exp());
        assert!((f64::from(halting_prob(&f, &w, &b).unwrap()) - expect).abs() < 1e-6);
        assert!(halting_prob(&f, &Tensor::zeros([1, 3]), &b).is_err());
    }

    proptest! {
        #[test]
        fn weights_form_a_convex_combination(probs in prop::collection::vec(0.0f32..=1.0, 6)) {
            let r = run(&probs);
            prop_assert!(r.weights.iter().all(|&w| w >= 0.0));
            prop_assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let mut sum = 0.0f64;
            let mut expect = 12;
            for (i, &p) in probs.iter().enumerate() {
                sum += f64::from(p);
                if sum >= 1.0 { expect = 7 + i; break; }
            }
            prop_assert_eq!(r.halting_layer, expect);
        }

        #[test]
        fn larger_probs_never_halt_later(
            probs in prop::collection::vec(0.0f32..=1.0, 6),
            bumps in prop::collection::vec(0.0f32..=0.5, 6),
        ) {
            let raised: Vec<f32> = probs.iter().zip(&bumps).map(|(p, b)| (p + b).min(1.0)).collect();
            prop_assert!(run(&raised).halting_layer <= run(&probs).halting_layer);
        }
    }
}
