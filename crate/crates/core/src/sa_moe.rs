//! Sparsity-aware mixture-of-experts FFN.
//!
//! A dense FFN `W2 gelu(W1 x + b1) + b2` is cut along its hidden dimension into
//! three sub-FFNs (dense, medium, sparse experts) whose outputs sum back to the
//! original FFN, with the output bias split evenly. The full FFN stays on as a
//! shared expert applied to every token; a router picks one density block per
//! forward pass and adds that density's expert output on top of the shared
//! output for the block's tokens only.

use std::fmt::Write as _;

use thiserror::Error;

use crate::backbone::TokenLayout;
use crate::config::RoutingMode;
use crate::nn::{self, gelu, global_avg_pool, gumbel_softmax, linear, NnError, Rng, Tensor};
use crate::Density;

#[derive(Debug, Error, PartialEq)]
pub enum MoeError {
    #[error("hidden dimension {0} is not divisible by 3")]
    HiddenNotDivisible(usize),
    #[error("inconsistent FFN shapes: {0}")]
    Shape(String),
    #[error("active expert count {0} outside 1..=3")]
    BadActiveCount(usize),
    #[error("expected {expected} search blocks, got {found}")]
    BlockCount { expected: usize, found: usize },
    #[error("empty search block")]
    EmptyBlock,
    #[error("selected density {0} is not present in the token layout")]
    NotInLayout(Density),
    #[error(transparent)]
    Nn(#[from] NnError),
}

type Result<T> = std::result::Result<T, MoeError>;

/// Borrowed FFN parameters: `w1: [H, D]`, `b1: [H]`, `w2: [D, H]`, `b2: [D]`.
#[derive(Debug, Clone, Copy)]
pub struct FfnWeights<'a> {
    pub w1: &'a Tensor,
    pub b1: &'a Tensor,
    pub w2: &'a Tensor,
    pub b2: &'a Tensor,
}

impl FfnWeights<'_> {
    /// `(hidden, embed)` after checking the four shapes agree.
    pub fn dims(&self) -> Result<(usize, usize)> {
        let (h, d) = self.w1.matrix_dims("ffn")?;
        let ok = self.b1.dims() == [h] && self.w2.dims() == [d, h] && self.b2.dims() == [d];
        if !ok {
            return Err(MoeError::Shape(format!(
                "w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                self.w1.dims(),
                self.b1.dims(),
                self.w2.dims(),
                self.b2.dims()
            )));
        }
        Ok((h, d))
    }
}

/// Owned FFN parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Ffn {
    pub fn view(&self) -> FfnWeights<'_> {
        FfnWeights { w1: &self.w1, b1: &self.b1, w2: &self.w2, b2: &self.b2 }
    }
}

pub fn ffn_forward(x: &Tensor, ffn: &FfnWeights) -> Result<Tensor> {
    ffn.dims()?;
    let hidden = gelu(&linear(x, ffn.w1, ffn.b1)?)?;
    Ok(linear(&hidden, ffn.w2, ffn.b2)?)
}

/// The three density experts cut out of one FFN, in injection order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSlices {
    pub experts: [Ffn; 3],
}

/// Partitions `ffn` along its hidden dimension into three equal experts.
///
/// Expert `i` owns hidden units `[i H/3, (i+1) H/3)`: the matching rows of `w1`
/// and `b1`, the matching columns of `w2`, and a third of `b2`.
pub fn split_ffn(ffn: &FfnWeights) -> Result<ExpertSlices> {
    let (h, d) = ffn.dims()?;
    if h % 3 != 0 {
        return Err(MoeError::HiddenNotDivisible(h));
    }
    let third = h / 3;
    let b2: Vec<f32> = ffn.b2.data().iter().map(|v| v / 3.0).collect();
    let make = |i: usize| -> Ffn {
        let rows = i * third..(i + 1) * third;
        let w1 = ffn.w1.data()[rows.start * d..rows.end * d].to_vec();
        let b1 = ffn.b1.data()[rows.clone()].to_vec();
        let mut w2 = Vec::with_capacity(d * third);
        for r in 0..d {
            w2.extend_from_slice(&ffn.w2.data()[r * h + rows.start..r * h + rows.end]);
        }
        Ffn {
            w1: Tensor::new([third, d], w1).expect("slice size"),
            b1: Tensor::new([third], b1).expect("slice size"),
            w2: Tensor::new([d, third], w2).expect("slice size"),
            b2: Tensor::new([d], b2.clone()).expect("slice size"),
        }
    };
    Ok(ExpertSlices { experts: [make(0), make(1), make(2)] })
}

/// Shared expert plus the three density experts of one layer.
#[derive(Debug, Clone, Copy)]
pub struct ExpertSet<'a> {
    pub shared: FfnWeights<'a>,
    pub experts: [FfnWeights<'a>; 3],
}

impl<'a> ExpertSet<'a> {
    pub fn from_slices(shared: FfnWeights<'a>, slices: &'a ExpertSlices) -> Self {
        Self { shared, experts: [slices.experts[0].view(), slices.experts[1].view(), slices.experts[2].view()] }
    }

    pub fn expert(&self, d: Density) -> &FfnWeights<'a> {
        &self.experts[d.index()]
    }
}

/// Router MLP: `linear(2D -> D) -> gelu -> linear(D -> 3)`.
#[derive(Debug, Clone, Copy)]
pub struct RouterWeights<'a> {
    pub fc1_weight: &'a Tensor,
    pub fc1_bias: &'a Tensor,
    pub fc2_weight: &'a Tensor,
    pub fc2_bias: &'a Tensor,
}

/// One routing decision.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord {
    /// 1-based layer.
    pub layer: usize,
    /// Full router output; only the first `active` entries compete.
    pub logits: [f32; 3],
    pub active: usize,
    /// Simplex point over the active densities.
    pub mask: Vec<f32>,
    pub selected: Density,
}

impl RoutingRecord {
    /// `frame layer K logit0 logit1 logit2 selected`
    pub fn trace_line(&self, frame: usize) -> String {
        let mut s = format!("{frame} {} {}", self.layer, self.active);
        for l in self.logits {
            let _ = write!(s, " {l}");
        }
        let _ = write!(s, " {}", self.selected);
        s
    }
}

/// Router logits from pooled template and search tokens.
pub fn router_logits(template: &Tensor, search_blocks: &[&Tensor], router: &RouterWeights) -> Result<[f32; 3]> {
    if search_blocks.is_empty() {
        return Err(MoeError::EmptyBlock);
    }
    let d = template.matrix_dims("route")?.1;
    let mut acc = vec![0.0f64; d];
    let mut count = 0usize;
    for block in search_blocks {
        let (n, bd) = block.matrix_dims("route")?;
        if n == 0 {
            return Err(MoeError::EmptyBlock);
        }
        if bd != d {
            return Err(nn::NnError::ShapeMismatch { op: "route", left: template.dims().to_vec(), right: block.dims().to_vec() }.into());
        }
        block.check_finite("route")?;
        for row in block.data().chunks_exact(d) {
            acc.iter_mut().zip(row).for_each(|(a, &v)| *a += f64::from(v));
        }
        count += n;
    }
    let mut r_in = global_avg_pool(template)?.into_data();
    r_in.extend(acc.iter().map(|a| (a / count as f64) as f32));
    let r_in = Tensor::new([1, 2 * d], r_in)?;
    let hidden = gelu(&linear(&r_in, router.fc1_weight, router.fc1_bias)?)?;
    let s = linear(&hidden, router.fc2_weight, router.fc2_bias)?;
    let s = s.data();
    if s.len() != 3 {
        return Err(MoeError::Shape(format!("router emits {} logits, expected 3", s.len())));
    }
    Ok([s[0], s[1], s[2]])
}

/// Picks one of the first `active` densities from the router logits.
pub fn select(logits: [f32; 3], active: usize, layer: usize, mode: RoutingMode, tau: f32, rng: &mut Rng) -> Result<RoutingRecord> {
    if !(1..=3).contains(&active) {
        return Err(MoeError::BadActiveCount(active));
    }
    let s_a = Tensor::from_vec(logits[..active].to_vec());
    let mask = match mode {
        RoutingMode::Hard => gumbel_softmax(&s_a, tau, None, true)?,
        RoutingMode::Soft => gumbel_softmax(&s_a, tau, Some(rng), false)?,
    };
    let selected = Density::from_index(nn::argmax(mask.data())).expect("index below active <= 3");
    Ok(RoutingRecord { layer, logits, active, mask: mask.into_data(), selected })
}

/// Router forward plus expert selection.
#[allow(clippy::too_many_arguments)]
pub fn route(
    template: &Tensor,
    search_blocks: &[&Tensor],
    router: &RouterWeights,
    active: usize,
    layer: usize,
    mode: RoutingMode,
    tau: f32,
    rng: &mut Rng,
) -> Result<RoutingRecord> {
    if search_blocks.len() != active {
        return Err(MoeError::BlockCount { expected: active, found: search_blocks.len() });
    }
    let logits = router_logits(template, search_blocks, router)?;
    select(logits, active, layer, mode, tau, rng)
}

/// Shared FFN on every token, plus the selected expert on its density block.
pub fn moe_forward(layout: &TokenLayout, tokens: &Tensor, experts: &ExpertSet, record: &RoutingRecord) -> Result<Tensor> {
    let (n, d) = tokens.matrix_dims("moe_forward")?;
    if n != layout.len() {
        return Err(MoeError::Shape(format!("{n} tokens but layout holds {}", layout.len())));
    }
    let range = layout.search_range(record.selected).ok_or(MoeError::NotInLayout(record.selected))?;
    let mut out = ffn_forward(tokens, &experts.shared)?;
    let block = tokens.rows(range.start, range.end);
    let sub = ffn_forward(&block, experts.expert(record.selected))?;
    // Expert output width already equals the embedding width under this
    // partition, so no repetition/alignment step is needed.
    debug_assert_eq!(sub.dims(), &[range.len(), d]);
    out.data_mut()[range.start * d..range.end * d].iter_mut().zip(sub.data()).for_each(|(o, s)| *o += s);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_ffn(h: usize, d: usize, rng: &mut Rng) -> Ffn {
        let mut t = |dims: &[usize]| {
            let n = dims.iter().product();
            Tensor::new(dims, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
        };
        Ffn { w1: t(&[h, d]), b1: t(&[h]), w2: t(&[d, h]), b2: t(&[d]) }
    }

    #[test]
    fn split_slices_contiguous_thirds() {
        let mut rng = Rng::new(1);
        let f = random_ffn(6, 2, &mut rng);
        let s = split_ffn(&f.view()).unwrap();
        let e1 = &s.experts[0];
        assert_eq!(e1.w1.data(), &f.w1.data()[0..4]);
        assert_eq!(e1.b1.data(), &f.b1.data()[0..2]);
        assert_eq!(e1.w2.data(), &[f.w2.data()[0], f.w2.data()[1], f.w2.data()[6], f.w2.data()[7]]);
        let e3 = &s.experts[2];
        assert_eq!(e3.w1.data(), &f.w1.data()[8..12]);
        assert_eq!(e3.w2.data(), &[f.w2.data()[4], f.w2.data()[5], f.w2.data()[10], f.w2.data()[11]]);
        for e in &s.experts {
            for (a, b) in e.b2.data().iter().zip(f.b2.data()) {
                assert_eq!(*a, b / 3.0);
            }
        }
    }

    #[test]
    fn zero_output_bias_stays_zero() {
        let mut rng = Rng::new(2);
        let mut f = random_ffn(6, 4, &mut rng);
        f.b2 = Tensor::zeros([4]);
        let s = split_ffn(&f.view()).unwrap();
        assert!(s.experts.iter().all(|e| e.b2.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn split_rejects_indivisible_hidden() {
        let mut rng = Rng::new(3);
        let f = random_ffn(7, 4, &mut rng);
        assert_eq!(split_ffn(&f.view()), Err(MoeError::HiddenNotDivisible(7)));
    }

    #[test]
    fn experts_sum_to_full_ffn() {
        let mut rng = Rng::new(4);
        let f = random_ffn(12, 4, &mut rng);
        let s = split_ffn(&f.view()).unwrap();
        let x = Tensor::new([100, 4], (0..400).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap();
        let full = ffn_forward(&x, &f.view()).unwrap();
        let mut sum = Tensor::zeros([100, 4]);
        for e in &s.experts {
            sum.add_assign(&ffn_forward(&x, &e.view()).unwrap()).unwrap();
        }
        for r in 0..100 {
            let err: f64 = full.row(r).iter().zip(sum.row(r)).map(|(a, b)| f64::from(a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = full.row(r).iter().map(|a| f64::from(*a).powi(2)).sum::<f64>().sqrt();
            assert!(err / (norm + 1e-12) < 1e-6, "row {r}: {}", err / norm);
        }
    }

    fn router(d: usize, rng: &mut Rng) -> (Tensor, Tensor, Tensor, Tensor) {
        let mut t = |dims: &[usize]| {
            let n = dims.iter().product();
            Tensor::new(dims, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
        };
        (t(&[d, 2 * d]), t(&[d]), t(&[3, d]), t(&[3]))
    }

    #[test]
    fn single_active_density_always_dense() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let logits = [rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0)];
            for mode in [RoutingMode::Hard, RoutingMode::Soft] {
                let r = select(logits, 1, 1, mode, 1.0, &mut rng).unwrap();
                assert_eq!(r.mask, vec![1.0]);
                assert_eq!(r.selected, Density::Dense);
            }
        }
    }

    #[test]
    fn hard_selection_follows_argmax() {
        let mut rng = Rng::new(6);
        let r = select([0.5, 2.0, -1.0], 3, 11, RoutingMode::Hard, 1.0, &mut rng).unwrap();
        assert_eq!(r.selected, Density::Medium);
        assert_eq!(r.mask, vec![0.0, 1.0, 0.0]);
        assert!(select([0.0; 3], 0, 1, RoutingMode::Hard, 1.0, &mut rng).is_err());
        assert!(select([0.0; 3], 4, 1, RoutingMode::Hard, 1.0, &mut rng).is_err());
    }

    #[test]
    fn route_end_to_end() {
        let mut rng = Rng::new(7);
        let d = 4;
        let (a, b, c, e) = router(d, &mut rng);
        let rw = RouterWeights { fc1_weight: &a, fc1_bias: &b, fc2_weight: &c, fc2_bias: &e };
        let template = Tensor::full([3, d], 0.5);
        let s1 = Tensor::full([2, d], 1.0);
        let s2 = Tensor::full([2, d], -1.0);
        let r = route(&template, &[&s1, &s2], &rw, 2, 7, RoutingMode::Hard, 1.0, &mut rng).unwrap();
        assert_eq!(r.active, 2);
        assert_eq!(r.mask.len(), 2);
        assert!(r.selected == Density::Dense || r.selected == Density::Medium);
        // Joint pooling: the two blocks cancel, same as a single zero block.
        let z = Tensor::zeros([4, d]);
        let joint = router_logits(&template, &[&s1, &s2], &rw).unwrap();
        assert_eq!(joint, router_logits(&template, &[&z], &rw).unwrap());
        assert!(matches!(route(&template, &[&s1], &rw, 2, 7, RoutingMode::Hard, 1.0, &mut rng), Err(MoeError::BlockCount { .. })));
        let empty = Tensor::zeros([0, d]);
        assert_eq!(router_logits(&template, &[&empty], &rw), Err(MoeError::EmptyBlock));
    }

    fn layout3(nz: usize, nx: usize) -> TokenLayout {
        let mut l = TokenLayout::new(nz, nx, 4);
        l.inject(Density::Dense).unwrap();
        l.inject(Density::Medium).unwrap();
        l.inject(Density::Sparse).unwrap();
        l
    }

    #[test]
    fn moe_forward_locality_and_composition() {
        let mut rng = Rng::new(8);
        let f = random_ffn(12, 4, &mut rng);
        let slices = split_ffn(&f.view()).unwrap();
        let set = ExpertSet::from_slices(f.view(), &slices);
        let layout = layout3(2, 3);
        let x = Tensor::new([11, 4], (0..44).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let record = RoutingRecord { layer: 11, logits: [0.0, 1.0, 0.0], active: 3, mask: vec![0.0, 1.0, 0.0], selected: Density::Medium };
        let out = moe_forward(&layout, &x, &set, &record).unwrap();
        let shared = ffn_forward(&x, &f.view()).unwrap();
        let medium = layout.search_range(Density::Medium).unwrap();
        for r in 0..11 {
            if medium.contains(&r) {
                let block = x.rows(r, r + 1);
                let expect = ffn_forward(&block, &f.view()).unwrap().add(&ffn_forward(&block, &slices.experts[1].view()).unwrap()).unwrap();
                for (a, b) in out.row(r).iter().zip(expect.data()) {
                    assert!((a - b).abs() < 1e-6);
                }
            } else {
                assert_eq!(out.row(r), shared.row(r));
            }
        }
    }

    #[test]
    fn zero_expert_leaves_shared_output() {
        let mut rng = Rng::new(9);
        let f = random_ffn(6, 4, &mut rng);
        let mut slices = split_ffn(&f.view()).unwrap();
        for e in &mut slices.experts {
            e.w2 = Tensor::zeros(e.w2.dims().to_vec());
            e.b2 = Tensor::zeros([4]);
        }
        let set = ExpertSet::from_slices(f.view(), &slices);
        let layout = layout3(1, 2);
        let x = Tensor::new([7, 4], (0..28).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let record = RoutingRecord { layer: 1, logits: [1.0, 0.0, 0.0], active: 1, mask: vec![1.0], selected: Density::Dense };
        assert_eq!(moe_forward(&layout, &x, &set, &record).unwrap(), ffn_forward(&x, &f.view()).unwrap());
    }

    #[test]
    fn moe_forward_rejects_absent_density() {
        let mut rng = Rng::new(10);
        let f = random_ffn(6, 4, &mut rng);
        let slices = split_ffn(&f.view()).unwrap();
        let set = ExpertSet::from_slices(f.view(), &slices);
        let mut layout = TokenLayout::new(1, 2, 4);
        layout.inject(Density::Dense).unwrap();
        let x = Tensor::zeros([3, 4]);
        let record = RoutingRecord { layer: 7, logits: [0.0; 3], active: 2, mask: vec![0.0, 1.0], selected: Density::Medium };
        assert_eq!(moe_forward(&layout, &x, &set, &record), Err(MoeError::NotInLayout(Density::Medium)));
    }
}
