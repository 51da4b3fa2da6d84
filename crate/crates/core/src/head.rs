//! Center-based tracking head and box decoding.

use thiserror::Error;

use crate::config::ModelConfig;
use crate::frame_builder::CropMapping;
use crate::nn::{argmax, conv2d, sigmoid, NnError, Tensor};
use crate::weights::{ModelWeights, WeightsError, HEAD_BRANCHES};
use crate::BBox;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("fused features {found:?} do not form a {grid}x{grid} map of width {dim}")]
    FeatureShape { found: Vec<usize>, grid: usize, dim: usize },
    #[error("inconsistent head output: {0}")]
    Output(String),
    #[error("box {0:?} is not inside a {1}x{1} crop")]
    OutsideCrop(BBox, usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
}

type Result<T> = std::result::Result<T, HeadError>;

/// Score, offset and size maps on a `grid x grid` lattice, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub grid: usize,
    pub score: Vec<f32>,
    /// Channels x then y.
    pub offset: Vec<f32>,
    /// Channels w then h, as fractions of the search crop side.
    pub size: Vec<f32>,
}

impl HeadOutput {
    fn check(&self) -> Result<()> {
        let n = self.grid * self.grid;
        if self.grid == 0 || self.score.len() != n || self.offset.len() != 2 * n || self.size.len() != 2 * n {
            return Err(HeadError::Output(format!(
                "grid {}, score {}, offset {}, size {}",
                self.grid,
                self.score.len(),
                self.offset.len(),
                self.size.len()
            )));
        }
        Ok(())
    }
}

/// Runs the three conv branches over the fused search features `[N_x, D]`.
pub fn head_forward(fused: &Tensor, weights: &ModelWeights, cfg: &ModelConfig) -> Result<HeadOutput> {
    let g = cfg.search_grid();
    let d = cfg.embed_dim;
    if fused.dims() != [g * g, d] {
        return Err(HeadError::FeatureShape { found: fused.dims().to_vec(), grid: g, dim: d });
    }
    // [N, D] -> [D, g, g]
    let mut map = vec![0.0f32; d * g * g];
    for (n, row) in fused.data().chunks_exact(d).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            map[c * g * g + n] = v;
        }
    }
    let map = Tensor::new([d, g, g], map)?;
    let mut outs = Vec::with_capacity(3);
    for (branch, _) in HEAD_BRANCHES {
        outs.push(branch_forward(&map, weights, branch)?);
    }
    let [score, offset, size]: [Vec<f32>; 3] = outs.try_into().expect("three branches");
    let out = HeadOutput { grid: g, score, offset, size };
    out.check()?;
    Ok(out)
}

fn branch_forward(map: &Tensor, w: &ModelWeights, branch: &str) -> Result<Vec<f32>> {
    let p = |n: &str| w.get(&format!("head.{branch}.{n}"));
    let x = conv_bn_relu(map, p("conv1.weight")?, p("conv1.bias")?, p("bn1.scale")?, p("bn1.shift")?)?;
    let x = conv_bn_relu(&x, p("conv2.weight")?, p("conv2.bias")?, p("bn2.scale")?, p("bn2.shift")?)?;
    let x = conv2d(&x, p("out.weight")?, Some(p("out.bias")?), 1, 0)?;
    Ok(sigmoid(&x)?.into_data())
}

fn conv_bn_relu(x: &Tensor, k: &Tensor, b: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let mut y = conv2d(x, k, Some(b), 1, 1)?;
    let plane = y.dims()[1] * y.dims()[2];
    for (c, chunk) in y.data_mut().chunks_exact_mut(plane).enumerate() {
        let (s, t) = (scale.data()[c], shift.data()[c]);
        chunk.iter_mut().for_each(|v| *v = (*v * s + t).max(0.0));
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    /// Box in sensor coordinates.
    pub bbox: BBox,
    /// Box in crop coordinates.
    pub crop_box: BBox,
    /// `(row, col)` of the chosen cell.
    pub peak: (usize, usize),
    /// Set when the score map was all zero and the map center was used.
    pub fallback: bool,
}

/// Box at the score peak (row-major first maximum), mapped back through the crop.
pub fn decode_box(out: &HeadOutput, mapping: &CropMapping) -> Result<Decoded> {
    out.check()?;
    let g = out.grid;
    let s = mapping.size as f64;
    let stride = s / g as f64;
    let fallback = out.score.iter().all(|&v| v == 0.0);
    let (idx, offset) = if fallback {
        ((g / 2) * g + g / 2, (0.0, 0.0))
    } else {
        let i = argmax(&out.score);
        (i, (f64::from(out.offset[i]), f64::from(out.offset[g * g + i])))
    };
    let (row, col) = (idx / g, idx % g);
    let cx = (col as f64 + offset.0) * stride;
    let cy = (row as f64 + offset.1) * stride;
    let w = f64::from(out.size[idx]) * s;
    let h = f64::from(out.size[g * g + idx]) * s;
    let crop_box = BBox::from_center(cx, cy, w, h);
    Ok(Decoded { bbox: mapping.box_to_sensor(&crop_box), crop_box, peak: (row, col), fallback })
}

/// Ideal head maps for a box given in crop coordinates: a one-hot score at the
/// cell holding the center, the sub-cell offset there, and the normalized size.
pub fn encode_box(crop_box: &BBox, grid: usize, crop_size: usize) -> Result<HeadOutput> {
    let s = crop_size as f64;
    let (cx, cy) = crop_box.center();
    let inside = crop_box.is_valid() && cx >= 0.0 && cy >= 0.0 && cx < s && cy < s && crop_box.w < s && crop_box.h < s;
    if grid == 0 || !inside {
        return Err(HeadError::OutsideCrop(*crop_box, crop_size));
    }
    let stride = s / grid as f64;
    let (col, row) = ((cx / stride).floor() as usize, (cy / stride).floor() as usize);
    let n = grid * grid;
    let idx = row * grid + col;
    let mut out = HeadOutput { grid, score: vec![0.0; n], offset: vec![0.0; 2 * n], size: vec![0.0; 2 * n] };
    out.score[idx] = 1.0;
    out.offset[idx] = (cx / stride - col as f64) as f32;
    out.offset[n + idx] = (cy / stride - row as f64) as f32;
    out.size[idx] = (crop_box.w / s) as f32;
    out.size[n + idx] = (crop_box.h / s) as f32;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Rng;
    use crate::weights::{selftest_weights, InitOptions};
    use proptest::prelude::*;

    fn identity_mapping(size: usize) -> CropMapping {
        CropMapping { size, scale: 1.0, offset_x: 0.0, offset_y: 0.0 }
    }

    fn features(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let n = cfg.search_tokens() * cfg.embed_dim;
        Tensor::new([cfg.search_tokens(), cfg.embed_dim], (0..n).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn maps_have_grid_shape_and_range() {
        let cfg = ModelConfig::tiny();
        let w = selftest_weights(&cfg, 1, InitOptions::default());
        let out = head_forward(&features(&cfg, 2), &w, &cfg).unwrap();
        assert_eq!(out.grid, 16);
        assert_eq!(out.score.len(), 256);
        assert!(out.score.iter().chain(&out.offset).chain(&out.size).all(|&v| v > 0.0 && v < 1.0));
        let bad = Tensor::zeros([10, cfg.embed_dim]);
        assert!(matches!(head_forward(&bad, &w, &cfg), Err(HeadError::FeatureShape { .. })));
    }

    #[test]
    fn saturated_score_bias() {
        let cfg = ModelConfig::tiny();
        let mut w = selftest_weights(&cfg, 1, InitOptions::default());
        *w.get_mut("head.score.out.bias").unwrap() = Tensor::full([1], -20.0);
        let c = cfg.head_channels / 2;
        *w.get_mut("head.score.out.weight").unwrap() = Tensor::zeros([1, c, 1, 1]);
        let out = head_forward(&features(&cfg, 2), &w, &cfg).unwrap();
        assert!(out.score.iter().all(|&v| v < 1e-8));
    }

    #[test]
    fn decode_single_peak() {
        let n = 256;
        let mut out = HeadOutput { grid: 16, score: vec![0.0; n], offset: vec![0.0; 2 * n], size: vec![0.0; 2 * n] };
        let i = 8 * 16 + 8;
        out.score[i] = 1.0;
        out.offset[i] = 0.5;
        out.offset[n + i] = 0.5;
        out.size[i] = 0.25;
        out.size[n + i] = 0.25;
        let d = decode_box(&out, &identity_mapping(256)).unwrap();
        assert_eq!(d.crop_box.center(), (136.0, 136.0));
        assert_eq!((d.crop_box.w, d.crop_box.h), (64.0, 64.0));
        assert_eq!(d.peak, (8, 8));
        assert!(!d.fallback);
    }

    #[test]
    fn uniform_map_picks_first_cell() {
        let n = 16;
        let out = HeadOutput { grid: 4, score: vec![0.3; n], offset: vec![0.0; 2 * n], size: vec![0.1; 2 * n] };
        assert_eq!(decode_box(&out, &identity_mapping(64)).unwrap().peak, (0, 0));
    }

    #[test]
    fn zero_map_falls_back_to_center() {
        let n = 16;
        let out = HeadOutput { grid: 4, score: vec![0.0; n], offset: vec![0.0; 2 * n], size: vec![0.25; 2 * n] };
        let d = decode_box(&out, &identity_mapping(64)).unwrap();
        assert!(d.fallback);
        assert_eq!(d.crop_box.center(), (32.0, 32.0));
    }

    #[test]
    fn decode_maps_through_crop() {
        let mapping = CropMapping::around(&BBox::new(100.0, 50.0, 20.0, 30.0), 4.0, 256).unwrap();
        let crop_box = BBox::from_center(128.0, 128.0, 40.0, 60.0);
        let enc = encode_box(&crop_box, 16, 256).unwrap();
        let d = decode_box(&enc, &mapping).unwrap();
        let (cx, cy) = d.bbox.center();
        assert!((cx - 110.0).abs() < 1e-3 && (cy - 65.0).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(cx in 1.0f64..255.0, cy in 1.0f64..255.0, w in 1.0f64..200.0, h in 1.0f64..200.0) {
            let b = BBox::from_center(cx, cy, w, h);
            let enc = encode_box(&b, 16, 256).unwrap();
            let d = decode_box(&enc, &identity_mapping(256)).unwrap();
            prop_assert!((d.crop_box.x - b.x).abs() < 0.5);
            prop_assert!((d.crop_box.y - b.y).abs() < 0.5);
            prop_assert!((d.crop_box.w - b.w).abs() < 0.5);
            prop_assert!((d.crop_box.h - b.h).abs() < 0.5);
        }
    }
}
