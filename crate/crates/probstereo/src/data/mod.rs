//! Dataset loading and generation: PFM disparity maps, KITTI 16-bit PNG
//! disparity, training-crop extraction and a synthetic random-dot stereogram
//! generator with exact ground truth.

pub mod crop;
pub mod dataset;
pub mod kitti;
pub mod pfm;
pub mod synth;

pub use crop::random_crop;
pub use dataset::{Dataset, DatasetSpec};
pub use kitti::{load_kitti_disparity, write_kitti_disparity};
pub use pfm::{load_pfm, write_pfm, PfmData};
pub use synth::{synth_stereogram, DomainShift, SynthParams};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An epipolar-rectified stereo pair with optional ground truth.
///
/// Images are `[C, H, W]` raw intensities in `[0, 1]`; normalisation to zero
/// mean / unit variance happens inside the network so that photometric
/// identities between `left` and `right` hold on the stored data.
/// `gt_disparity` is `[H, W]` in pixels, `valid_mask` is `[H, W]` with
/// entries 0.0 or 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample {
    pub left: Tensor,
    pub right: Tensor,
    pub gt_disparity: Option<Tensor>,
    pub valid_mask: Option<Tensor>,
}

impl StereoSample {
    pub fn dims(&self) -> (usize, usize) {
        (self.left.shape()[1], self.left.shape()[2])
    }

    pub fn channels(&self) -> usize {
        self.left.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.left.shape() != self.right.shape() {
            return Err(Error::shape(
                "stereo sample",
                format!("left {:?} vs right {:?}", self.left.shape(), self.right.shape()),
            ));
        }
        let (h, w) = self.dims();
        if let Some(gt) = &self.gt_disparity {
            if gt.shape() != [h, w] {
                return Err(Error::shape(
                    "stereo sample",
                    format!("gt_disparity {:?} vs image {h}x{w}", gt.shape()),
                ));
            }
        }
        if let Some(m) = &self.valid_mask {
            if m.shape() != [h, w] {
                return Err(Error::shape(
                    "stereo sample",
                    format!("valid_mask {:?} vs image {h}x{w}", m.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Convert the images to the requested channel count: grayscale is
    /// replicated, RGB is reduced by the usual luminance weights.
    pub fn with_channels(mut self, channels: usize) -> Self {
        self.left = to_channels(&self.left, channels);
        self.right = to_channels(&self.right, channels);
        self
    }
}

/// Channel conversion used when a dataset's storage format and the network's
/// input width disagree.
pub fn to_channels(image: &Tensor, channels: usize) -> Tensor {
    let c = image.shape()[0];
    if c == channels {
        return image.clone();
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut out = Tensor::zeros(&[channels, h, w]);
    if c == 1 {
        for t in 0..channels {
            out.data_mut()[t * plane..(t + 1) * plane].copy_from_slice(&image.data()[..plane]);
        }
    } else if c == 3 && channels == 1 {
        for p in 0..plane {
            out.data_mut()[p] = 0.299 * image.data()[p]
                + 0.587 * image.data()[plane + p]
                + 0.114 * image.data()[2 * plane + p];
        }
    } else {
        // fall back to the mean over available channels
        for p in 0..plane {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += image.data()[ch * plane + p];
            }
            let v = acc / c as f64;
            for t in 0..channels {
                out.data_mut()[t * plane + p] = v;
            }
        }
    }
    out
}

/// Middlebury-style quarter-resolution preprocessing: bilinear image
/// downsampling by 4, nearest-neighbour disparity downsampling with values
/// divided by 4.
pub fn downsample_quarter(sample: &StereoSample) -> StereoSample {
    let (h, w) = sample.dims();
    let (oh, ow) = (h / 4, w / 4);
    StereoSample {
        left: bilinear_down4(&sample.left, oh, ow),
        right: bilinear_down4(&sample.right, oh, ow),
        gt_disparity: sample
            .gt_disparity
            .as_ref()
            .map(|gt| nearest_down4(gt, oh, ow).map(|v| v / 4.0)),
        valid_mask: sample.valid_mask.as_ref().map(|m| nearest_down4(m, oh, ow)),
    }
}

fn bilinear_down4(image: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        for y in 0..oh {
            let sy = (y as f64 + 0.5) * 4.0 - 0.5;
            let y0 = sy.floor().clamp(0.0, (h - 1) as f64) as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = (sy - y0 as f64).clamp(0.0, 1.0);
            for x in 0..ow {
                let sx = (x as f64 + 0.5) * 4.0 - 0.5;
                let x0 = sx.floor().clamp(0.0, (w - 1) as f64) as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = (sx - x0 as f64).clamp(0.0, 1.0);
                let a = image.data()[(ch * h + y0) * w + x0];
                let b = image.data()[(ch * h + y0) * w + x1];
                let d = image.data()[(ch * h + y1) * w + x0];
                let e = image.data()[(ch * h + y1) * w + x1];
                let v = a * (1.0 - fy) * (1.0 - fx) + b * (1.0 - fy) * fx + d * fy * (1.0 - fx) + e * fy * fx;
                out.data_mut()[(ch * oh + y) * ow + x] = v;
            }
        }
    }
    out
}

fn nearest_down4(map: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = Tensor::zeros(&[oh, ow]);
    for y in 0..oh {
        let sy = ((y as f64 + 0.5) * 4.0 - 0.5).round().clamp(0.0, (h - 1) as f64) as usize;
        for x in 0..ow {
            let sx = ((x as f64 + 0.5) * 4.0 - 0.5).round().clamp(0.0, (w - 1) as f64) as usize;
            out.data_mut()[y * ow + x] = map.data()[sy * w + sx];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_conversion_roundtrips_gray() {
        let g = Tensor::new(vec![1, 2, 2], vec![0.1, 0.4, 0.7, 1.0]);
        let rgb = to_channels(&g, 3);
        assert_eq!(rgb.shape(), &[3, 2, 2]);
        let back = to_channels(&rgb, 1);
        assert!(back.max_abs_diff(&g) < 1e-12);
    }

    #[test]
    fn quarter_downsample_shapes_and_disparity_scale() {
        let mut gt = Tensor::zeros(&[8, 8]);
        for v in gt.data_mut().iter_mut() {
            *v = 8.0;
        }
        let s = StereoSample {
            left: Tensor::filled(&[1, 8, 8], 0.5),
            right: Tensor::filled(&[1, 8, 8], 0.5),
            gt_disparity: Some(gt),
            valid_mask: Some(Tensor::filled(&[8, 8], 1.0)),
        };
        let q = downsample_quarter(&s);
        assert_eq!(q.dims(), (2, 2));
        assert_eq!(q.gt_disparity.as_ref().unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
    }
}
