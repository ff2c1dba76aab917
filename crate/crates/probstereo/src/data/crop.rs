//! Training-crop extraction: one window applied identically to both images,
//! ground truth and mask, which preserves disparity semantics.

use super::StereoSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

pub fn random_crop(
    sample: &StereoSample,
    crop_w: usize,
    crop_h: usize,
    rng: &mut impl Rng,
) -> Result<StereoSample> {
    let (h, w) = sample.dims();
    if crop_w > w || crop_h > h {
        return Err(Error::Parameter(format!(
            "crop {crop_w}x{crop_h} exceeds image {w}x{h}; pad the input or choose a smaller crop"
        )));
    }
    if crop_w == w && crop_h == h {
        return Ok(sample.clone());
    }
    let x0 = if crop_w == w { 0 } else { rng.gen_range(0..=w - crop_w) };
    let y0 = if crop_h == h { 0 } else { rng.gen_range(0..=h - crop_h) };

    Ok(StereoSample {
        left: crop_chw(&sample.left, x0, y0, crop_w, crop_h),
        right: crop_chw(&sample.right, x0, y0, crop_w, crop_h),
        gt_disparity: sample.gt_disparity.as_ref().map(|t| crop_hw(t, x0, y0, crop_w, crop_h)),
        valid_mask: sample.valid_mask.as_ref().map(|t| crop_hw(t, x0, y0, crop_w, crop_h)),
    })
}

fn crop_chw(t: &Tensor, x0: usize, y0: usize, cw: usize, ch: usize) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    debug_assert!(y0 + ch <= h && x0 + cw <= w);
    let mut out = Tensor::zeros(&[c, ch, cw]);
    for cc in 0..c {
        for y in 0..ch {
            let src = (cc * h + y0 + y) * w + x0;
            let dst = (cc * ch + y) * cw;
            out.data_mut()[dst..dst + cw].copy_from_slice(&t.data()[src..src + cw]);
        }
    }
    out
}

fn crop_hw(t: &Tensor, x0: usize, y0: usize, cw: usize, ch: usize) -> Tensor {
    let w = t.shape()[1];
    let mut out = Tensor::zeros(&[ch, cw]);
    for y in 0..ch {
        let src = (y0 + y) * w + x0;
        out.data_mut()[y * cw..(y + 1) * cw].copy_from_slice(&t.data()[src..src + cw]);
    }
    out
}
