//! KITTI disparity ground truth: 16-bit single-channel PNG where
//! `disparity = raw / 256.0` and raw 0 marks a pixel without ground truth.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

/// Decode a KITTI disparity PNG into a `[H, W]` disparity map (pixels) and a
/// 0/1 validity mask.
pub fn load_kitti_disparity(path: impl AsRef<Path>) -> Result<(Tensor, Tensor)> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let gray16 = match img {
        image::DynamicImage::ImageLuma16(buf) => buf,
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!(
                    "expected 16-bit grayscale PNG, got {:?}",
                    other.color()
                ),
            })
        }
    };
    let (w, h) = (gray16.width() as usize, gray16.height() as usize);
    let mut disp = Tensor::zeros(&[h, w]);
    let mut mask = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let raw = gray16.get_pixel(x as u32, y as u32).0[0];
            if raw != 0 {
                disp.set2(y, x, raw as f64 / 256.0);
                mask.set2(y, x, 1.0);
            }
        }
    }
    Ok((disp, mask))
}

/// Encode raw 16-bit disparity values to a KITTI-convention PNG; mainly a
/// test and dataset-preparation helper.
pub fn write_kitti_disparity(path: impl AsRef<Path>, raw: &[u16], width: usize, height: usize) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(raw.len(), width * height);
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_vec(
        width as u32,
        height as u32,
        raw.to_vec(),
    )
    .expect("buffer size");
    buf.save(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn decode_follows_raw_over_256() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("d.png");
        // raw values covering the invalid marker, extremes and a round value
        let raw = [0u16, 1, 256, 12800, 65535, 128];
        write_kitti_disparity(&p, &raw, 3, 2).unwrap();
        let (disp, mask) = load_kitti_disparity(&p).unwrap();
        assert_eq!(mask.data(), &[0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(disp.at2(0, 0), 0.0);
        assert!((disp.at2(0, 1) - 1.0 / 256.0).abs() < 1e-12);
        assert!((disp.at2(0, 2) - 1.0).abs() < 1e-12);
        assert!((disp.at2(1, 0) - 50.0).abs() < 1e-12);
        assert!((disp.at2(1, 1) - 65535.0 / 256.0).abs() < 1e-12);
    }

    #[test]
    fn decode_is_invertible_for_nonzero_raw() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("rt.png");
        let raw: Vec<u16> = (1..=1024).collect();
        write_kitti_disparity(&p, &raw, 32, 32).unwrap();
        let (disp, _) = load_kitti_disparity(&p).unwrap();
        for (i, &r) in raw.iter().enumerate() {
            let rec = (disp.data()[i] * 256.0).round() as u16;
            assert_eq!(rec, r);
        }
    }

    #[test]
    fn wrong_bit_depth_is_a_format_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("8bit.png");
        let buf = image::ImageBuffer::<image::Luma<u8>, Vec<u8>>::from_vec(2, 2, vec![0, 1, 2, 3]).unwrap();
        buf.save(&p).unwrap();
        assert!(matches!(load_kitti_disparity(&p).unwrap_err(), Error::Format { .. }));
    }
}
