//! Prediction harness: load a checkpoint and an image pair, run Monte-Carlo
//! inference and persist the disparity map plus the three uncertainty maps
//! as PFM, with a metadata record sufficient to reproduce the run.

use crate::checkpoint::{file_sha256, load_checkpoint};
use crate::data::dataset::load_image;
use crate::data::{pfm::write_pfm, StereoSample};
use crate::error::{Error, Result};
use crate::inference::{mc_predict, uncertainty_stddev_maps, UncertainDisparity};
use crate::network::StereoNet;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Reflection-pad the right/bottom edges of a `[C, H, W]` image so both
/// spatial dims become multiples of `multiple`.
pub fn pad_reflect(image: &Tensor, multiple: usize) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let nh = h.div_ceil(multiple) * multiple;
    let nw = w.div_ceil(multiple) * multiple;
    if nh == h && nw == w {
        return image.clone();
    }
    // symmetric reflection: [a b c | c b a | a b c ...], defined for any pad
    let reflect = |i: usize, n: usize| {
        let m = i % (2 * n);
        if m < n {
            m
        } else {
            2 * n - 1 - m
        }
    };
    let mut out = Tensor::zeros(&[c, nh, nw]);
    for ch in 0..c {
        for y in 0..nh {
            let sy = reflect(y, h);
            for x in 0..nw {
                let sx = reflect(x, w);
                out.data_mut()[(ch * nh + y) * nw + x] = image.data()[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}

fn crop_map(map: &Tensor, h: usize, w: usize) -> Tensor {
    let (mh, mw) = (map.shape()[0], map.shape()[1]);
    if (mh, mw) == (h, w) {
        return map.clone();
    }
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        out.data_mut()[y * w..(y + 1) * w].copy_from_slice(&map.data()[y * mw..y * mw + w]);
    }
    out
}

/// Monte-Carlo prediction with automatic pad-and-crop for image sizes that
/// are not multiples of the network's spatial granularity.
pub fn predict_padded(
    net: &StereoNet,
    sample: &StereoSample,
    t: usize,
    seed: u64,
) -> Result<UncertainDisparity> {
    let (h, w) = sample.dims();
    let multiple = net.config.spatial_multiple();
    if h % multiple == 0 && w % multiple == 0 {
        return mc_predict(net, sample, t, seed);
    }
    let padded = StereoSample {
        left: pad_reflect(&sample.left, multiple),
        right: pad_reflect(&sample.right, multiple),
        gt_disparity: None,
        valid_mask: None,
    };
    let u = mc_predict(net, &padded, t, seed)?;
    Ok(UncertainDisparity {
        mean_disparity: crop_map(&u.mean_disparity, h, w),
        epistemic_var: crop_map(&u.epistemic_var, h, w),
        aleatoric_var: crop_map(&u.aleatoric_var, h, w),
        combined_var: crop_map(&u.combined_var, h, w),
        t: u.t,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictMeta {
    pub t: usize,
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub left: PathBuf,
    pub right: PathBuf,
    pub max_disparity: usize,
    pub padded: bool,
}

#[derive(Debug, Clone)]
pub struct PredictOutcome {
    pub stem: String,
    pub disparity_path: PathBuf,
    pub aleatoric_path: PathBuf,
    pub epistemic_path: PathBuf,
    pub combined_path: PathBuf,
    pub meta_path: PathBuf,
}

/// Persist one prediction in the uniform layout: `<stem>_disp.pfm` (px),
/// `<stem>_{aleatoric,epistemic,combined}.pfm` (stddev, px) and
/// `<stem>_meta.json`.
pub fn write_prediction(
    out_dir: &Path,
    stem: &str,
    u: &UncertainDisparity,
    meta: &PredictMeta,
) -> Result<PredictOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (alea, epi, comb) = uncertainty_stddev_maps(u);
    let disparity_path = out_dir.join(format!("{stem}_disp.pfm"));
    let aleatoric_path = out_dir.join(format!("{stem}_aleatoric.pfm"));
    let epistemic_path = out_dir.join(format!("{stem}_epistemic.pfm"));
    let combined_path = out_dir.join(format!("{stem}_combined.pfm"));
    let meta_path = out_dir.join(format!("{stem}_meta.json"));
    write_pfm(&disparity_path, &u.mean_disparity)?;
    write_pfm(&aleatoric_path, &alea)?;
    write_pfm(&epistemic_path, &epi)?;
    write_pfm(&combined_path, &comb)?;
    let json = serde_json::to_string_pretty(meta).expect("meta serialises");
    std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    Ok(PredictOutcome {
        stem: stem.to_string(),
        disparity_path,
        aleatoric_path,
        epistemic_path,
        combined_path,
        meta_path,
    })
}

/// The `predict` command: checkpoint + image pair in, four maps + metadata
/// out.
pub fn run_predict(
    checkpoint_path: &Path,
    left_path: &Path,
    right_path: &Path,
    t: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<PredictOutcome> {
    let ck = load_checkpoint(checkpoint_path)?;
    let left = load_image(left_path)?;
    let right = load_image(right_path)?;
    let sample = StereoSample {
        left,
        right,
        gt_disparity: None,
        valid_mask: None,
    }
    .with_channels(ck.net.config.in_channels);
    sample.validate()?;

    let (h, w) = sample.dims();
    let multiple = ck.net.config.spatial_multiple();
    let padded = h % multiple != 0 || w % multiple != 0;
    let u = predict_padded(&ck.net, &sample, t, seed)?;

    let stem = left_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "prediction".to_string())
        .trim_end_matches("_left")
        .to_string();
    let meta = PredictMeta {
        t,
        seed,
        checkpoint: checkpoint_path.to_path_buf(),
        checkpoint_sha256: file_sha256(checkpoint_path)?,
        left: left_path.to_path_buf(),
        right: right_path.to_path_buf(),
        max_disparity: ck.net.config.max_disparity,
        padded,
    };
    write_prediction(out_dir, &stem, &u, &meta)
}
