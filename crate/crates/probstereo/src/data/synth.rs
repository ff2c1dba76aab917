//! Synthetic random-dot stereograms with exact ground truth.
//!
//! A dot background at a far disparity plus layered rectangles and ellipses
//! at distinct nearer integer disparities; the right image is the left
//! forward-warped by the ground truth. Pixels whose correspondence is
//! occluded (or falls off the left border) are marked invalid; holes in the
//! right image are refilled with fresh dots so no stale texture leaks.

use super::StereoSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainShift {
    None,
    InvertContrast,
    AddNoise,
    TextureSwap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    /// Strict upper bound on generated disparities (pixels).
    pub max_disparity: usize,
    /// Probability of a bright dot per background pixel, in (0, 1].
    pub dot_density: f64,
    /// Number of layered shapes (rectangles and ellipses).
    pub num_shapes: usize,
    pub noise_stddev: f64,
    pub domain_shift: DomainShift,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            width: 64,
            height: 32,
            max_disparity: 14,
            dot_density: 0.35,
            num_shapes: 3,
            noise_stddev: 0.0,
            domain_shift: DomainShift::None,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_disparity >= self.width {
            return Err(Error::Parameter(format!(
                "max_disparity {} must be below image width {}",
                self.max_disparity, self.width
            )));
        }
        if !(self.dot_density > 0.0 && self.dot_density <= 1.0) {
            return Err(Error::Parameter(format!(
                "dot_density {} outside (0, 1]",
                self.dot_density
            )));
        }
        if self.noise_stddev < 0.0 {
            return Err(Error::Parameter("noise_stddev must be >= 0".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Parameter("empty image dimensions".into()));
        }
        Ok(())
    }
}

enum Shape {
    Rect { x0: usize, y0: usize, x1: usize, y1: usize },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        match self {
            Shape::Rect { x0, y0, x1, y1 } => x >= *x0 && x < *x1 && y >= *y0 && y < *y1,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

/// Generate one stereogram. Deterministic for a fixed rng state.
pub fn synth_stereogram(params: &SynthParams, rng: &mut impl Rng) -> Result<StereoSample> {
    params.validate()?;
    let (h, w) = (params.height, params.width);

    // ground-truth disparity: far background plus nearer layered shapes
    let bg_disparity = rng.gen_range(0..=2.min(params.max_disparity.saturating_sub(1)));
    let mut gt = Tensor::filled(&[h, w], bg_disparity as f64);
    let lo = (bg_disparity + 1).min(params.max_disparity);
    let mut levels: Vec<usize> = (lo..params.max_disparity).collect();
    let mut chosen = Vec::new();
    for _ in 0..params.num_shapes {
        if levels.is_empty() {
            break;
        }
        let idx = rng.gen_range(0..levels.len());
        chosen.push(levels.swap_remove(idx));
    }
    chosen.sort_unstable(); // paint far-to-near so nearer shapes win
    for d in chosen {
        let shape = if rng.gen::<bool>() {
            let sw = rng.gen_range(w / 6..=w / 2);
            let sh = rng.gen_range(h / 6..=h / 2);
            let x0 = rng.gen_range(0..w - sw + 1);
            let y0 = rng.gen_range(0..h - sh + 1);
            Shape::Rect { x0, y0, x1: x0 + sw, y1: y0 + sh }
        } else {
            Shape::Ellipse {
                cx: rng.gen_range(0.0..w as f64),
                cy: rng.gen_range(0.0..h as f64),
                rx: rng.gen_range(w as f64 / 10.0..w as f64 / 3.0),
                ry: rng.gen_range(h as f64 / 10.0..h as f64 / 3.0),
            }
        };
        for y in 0..h {
            for x in 0..w {
                if shape.contains(y, x) {
                    gt.set2(y, x, d as f64);
                }
            }
        }
    }

    // left texture
    let swapped = params.domain_shift == DomainShift::TextureSwap;
    let mut left = Tensor::zeros(&[1, h, w]);
    if swapped {
        // smooth oriented stripes instead of dots
        let fx = rng.gen_range(0.05..0.25);
        let fy = rng.gen_range(0.02..0.15);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for y in 0..h {
            for x in 0..w {
                let v = 0.5 + 0.5 * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase).sin();
                left.data_mut()[y * w + x] = v;
            }
        }
    } else {
        for v in left.data_mut().iter_mut() {
            *v = if rng.gen_bool(params.dot_density) { 1.0 } else { 0.0 };
        }
    }

    // forward warp left -> right; nearest surface (largest disparity) wins
    let mut right = Tensor::zeros(&[1, h, w]);
    let mut mask = Tensor::zeros(&[h, w]);
    let mut filled = vec![false; w];
    for y in 0..h {
        let mut winner: Vec<Option<usize>> = vec![None; w]; // per right-x source left-x
        for x in 0..w {
            let d = gt.at2(y, x) as usize;
            if x < d {
                continue; // falls off the left border; stays invalid
            }
            let xr = x - d;
            let better = match winner[xr] {
                None => true,
                Some(prev_x) => gt.at2(y, prev_x) < gt.at2(y, x),
            };
            if better {
                winner[xr] = Some(x);
            }
        }
        filled.iter_mut().for_each(|f| *f = false);
        for xr in 0..w {
            if let Some(xl) = winner[xr] {
                right.data_mut()[y * w + xr] = left.data()[y * w + xl];
                mask.set2(y, xl, 1.0);
                filled[xr] = true;
            }
        }
        // disocclusion holes get fresh texture
        for xr in 0..w {
            if !filled[xr] {
                right.data_mut()[y * w + xr] =
                    if rng.gen_bool(params.dot_density) { 1.0 } else { 0.0 };
            }
        }
    }

    // photometric noise is applied after the warp, independently per image
    if params.noise_stddev > 0.0 {
        add_noise(&mut left, params.noise_stddev, rng);
        add_noise(&mut right, params.noise_stddev, rng);
    }

    match params.domain_shift {
        DomainShift::None | DomainShift::TextureSwap => {}
        DomainShift::InvertContrast => {
            for v in left.data_mut().iter_mut() {
                *v = 1.0 - *v;
            }
            for v in right.data_mut().iter_mut() {
                *v = 1.0 - *v;
            }
        }
        DomainShift::AddNoise => {
            add_noise(&mut left, 0.25, rng);
            add_noise(&mut right, 0.25, rng);
        }
    }

    let sample = StereoSample {
        left,
        right,
        gt_disparity: Some(gt),
        valid_mask: Some(mask),
    };
    sample.validate()?;
    Ok(sample)
}

fn add_noise(image: &mut Tensor, stddev: f64, rng: &mut impl Rng) {
    for v in image.data_mut().iter_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *v = (*v + stddev * n).clamp(0.0, 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn photometric_consistency_at_zero_noise() {
        let params = SynthParams::default();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = synth_stereogram(&params, &mut rng).unwrap();
            let gt = s.gt_disparity.as_ref().unwrap();
            let mask = s.valid_mask.as_ref().unwrap();
            let (h, w) = s.dims();
            for y in 0..h {
                for x in 0..w {
                    if mask.at2(y, x) > 0.0 {
                        let d = gt.at2(y, x) as usize;
                        assert_eq!(
                            s.left.data()[y * w + x],
                            s.right.data()[y * w + x - d],
                            "seed {seed} pixel ({y},{x})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn single_global_disparity_shifts_exactly() {
        let params = SynthParams {
            num_shapes: 0,
            max_disparity: 6,
            ..SynthParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = synth_stereogram(&params, &mut rng).unwrap();
        let gt = s.gt_disparity.as_ref().unwrap();
        let mask = s.valid_mask.as_ref().unwrap();
        let (h, w) = s.dims();
        let k = gt.at2(0, 0) as usize;
        // flat scene: every pixel carries the background disparity
        assert!(gt.data().iter().all(|&d| d == k as f64));
        for y in 0..h {
            for x in 0..w {
                if x < k {
                    // the k-px left border has no correspondence
                    assert_eq!(mask.at2(y, x), 0.0);
                } else {
                    assert_eq!(mask.at2(y, x), 1.0);
                    assert_eq!(s.left.data()[y * w + x], s.right.data()[y * w + x - k]);
                }
            }
        }
    }

    #[test]
    fn occluded_pixels_are_masked_invalid() {
        let params = SynthParams {
            num_shapes: 3,
            ..SynthParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = synth_stereogram(&params, &mut rng).unwrap();
        let gt = s.gt_disparity.as_ref().unwrap();
        let mask = s.valid_mask.as_ref().unwrap();
        let (h, w) = s.dims();
        // every collision between two left pixels must leave the farther one invalid
        for y in 0..h {
            for x0 in 0..w {
                for x1 in (x0 + 1)..w {
                    let d0 = gt.at2(y, x0) as isize;
                    let d1 = gt.at2(y, x1) as isize;
                    if x0 as isize - d0 == x1 as isize - d1 && x0 as isize >= d0 {
                        assert!(
                            mask.at2(y, x0) == 0.0 || mask.at2(y, x1) == 0.0,
                            "colliding pixels both valid at y={y} x0={x0} x1={x1}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn dot_density_statistics_are_stable_across_seeds() {
        let params = SynthParams {
            width: 500,
            height: 200, // 10^5 pixels
            num_shapes: 0,
            ..SynthParams::default()
        };
        let mut patterns = Vec::new();
        for seed in [42u64, 43] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = synth_stereogram(&params, &mut rng).unwrap();
            let density = s.left.data().iter().filter(|&&v| v == 1.0).count() as f64
                / s.left.len() as f64;
            assert!(
                (density - params.dot_density).abs() < 0.01,
                "seed {seed}: density {density}"
            );
            patterns.push(s.left);
        }
        assert_ne!(patterns[0], patterns[1], "different seeds must differ");
    }

    #[test]
    fn domain_shifts_change_appearance_not_geometry() {
        let base = SynthParams::default();
        for shift in [DomainShift::InvertContrast, DomainShift::AddNoise, DomainShift::TextureSwap] {
            let params = SynthParams { domain_shift: shift, ..base };
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let s = synth_stereogram(&params, &mut rng).unwrap();
            assert!(s.gt_disparity.is_some());
            assert!(s.left.min() >= 0.0 && s.left.max() <= 1.0);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let p = SynthParams { max_disparity: 64, width: 64, ..SynthParams::default() };
        assert!(p.validate().is_err());
        let p2 = SynthParams { dot_density: 0.0, ..SynthParams::default() };
        assert!(p2.validate().is_err());
    }
}
