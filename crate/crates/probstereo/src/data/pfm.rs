//! PFM (portable float map) reader and writer.
//!
//! Header: `Pf` (grayscale) or `PF` (color), then `width height`, then a
//! scale whose sign encodes endianness (negative = little-endian). The
//! raster is stored bottom-up as raw f32. Non-finite entries decode to an
//! invalid-mask bit; the corresponding value is zeroed.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug)]
pub struct PfmData {
    /// `[H, W]` values top-down, non-finite entries replaced by 0.
    pub values: Tensor,
    /// Scale factor from the header (absolute value).
    pub scale: f64,
    /// `[H, W]` mask, 1.0 where the stored value was finite.
    pub valid: Tensor,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn skip_whitespace(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn token(&mut self) -> Result<&'a str> {
        self.skip_whitespace();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("unexpected end of header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| self.err("non-ascii header token"))
    }
}

pub fn load_pfm(path: impl AsRef<Path>) -> Result<PfmData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };

    let magic = cur.token()?;
    match magic {
        "Pf" => {}
        "PF" => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "color PFM (PF) is not supported for disparity maps".into(),
            })
        }
        other => return Err(cur.err(format!("bad magic {other:?}, expected \"Pf\""))),
    }

    let width: usize = cur
        .token()?
        .parse()
        .map_err(|_| cur.err("width is not an unsigned integer"))?;
    let height: usize = cur
        .token()?
        .parse()
        .map_err(|_| cur.err("height is not an unsigned integer"))?;
    if width == 0 || height == 0 {
        return Err(cur.err(format!("degenerate dimensions {width}x{height}")));
    }
    let scale: f64 = cur
        .token()?
        .parse()
        .map_err(|_| cur.err("scale is not a float"))?;
    if scale == 0.0 {
        return Err(cur.err("scale must be nonzero"));
    }
    let little_endian = scale < 0.0;

    // exactly one whitespace byte separates the header from the raster
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("missing whitespace after scale"));
    }
    cur.pos += 1;

    let expected = width * height * 4;
    let available = bytes.len() - cur.pos;
    if available < expected {
        return Err(cur.err(format!(
            "truncated payload: expected {expected} bytes of f32 data, found {available}"
        )));
    }

    let mut values = Tensor::zeros(&[height, width]);
    let mut valid = Tensor::filled(&[height, width], 1.0);
    for row in 0..height {
        // PFM rows are stored bottom-up
        let y = height - 1 - row;
        for x in 0..width {
            let off = cur.pos + (row * width + x) * 4;
            let raw: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            if v.is_finite() {
                values.set2(y, x, v as f64);
            } else {
                valid.set2(y, x, 0.0);
            }
        }
    }

    Ok(PfmData {
        values,
        scale: scale.abs(),
        valid,
    })
}

/// Write a `[H, W]` map as little-endian grayscale PFM (header scale -1.0).
/// Values pass through an f32 cast; masks can be encoded by storing
/// `f64::INFINITY` at invalid pixels.
pub fn write_pfm(path: impl AsRef<Path>, values: &Tensor) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(values.rank(), 2, "write_pfm expects [H, W]");
    let (h, w) = (values.shape()[0], values.shape()[1]);
    let mut out = Vec::with_capacity(64 + h * w * 4);
    out.extend_from_slice(format!("Pf\n{w} {h}\n-1.0\n").as_bytes());
    for row in 0..h {
        let y = h - 1 - row;
        for x in 0..w {
            out.extend_from_slice(&(values.at2(y, x) as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn bottom_up_rows_decode_top_down() {
        // 2x2 little-endian with payload values {1,2,3,4} written bottom-up
        // decodes to {{3,4},{1,2}} top-down.
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.pfm");
        let mut bytes = b"Pf\n2 2\n-1.0\n".to_vec();
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&p, bytes).unwrap();
        let pfm = load_pfm(&p).unwrap();
        assert_eq!(pfm.values.data(), &[3.0, 4.0, 1.0, 2.0]);
        assert_eq!(pfm.scale, 1.0);
    }

    #[test]
    fn big_endian_branch() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("be.pfm");
        let mut bytes = b"Pf\n1 1\n2.5\n".to_vec();
        bytes.extend_from_slice(&7.25f32.to_be_bytes());
        fs::write(&p, bytes).unwrap();
        let pfm = load_pfm(&p).unwrap();
        assert_eq!(pfm.values.item(), 7.25);
        assert_eq!(pfm.scale, 2.5);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("trunc.pfm");
        let mut bytes = b"Pf\n2 2\n-1.0\n".to_vec();
        bytes.extend_from_slice(&1.0f32.to_le_bytes()); // 1 of 4 values
        fs::write(&p, bytes).unwrap();
        let err = load_pfm(&p).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn malformed_header_reports_offset() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.pfm");
        fs::write(&p, b"Pf\nxx 2\n-1.0\n").unwrap();
        match load_pfm(&p).unwrap_err() {
            Error::Parse { offset, .. } => assert!(offset >= 3),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn color_pfm_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("color.pfm");
        fs::write(&p, b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(load_pfm(&p).unwrap_err(), Error::Format { .. }));
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("rt.pfm");
        let vals = Tensor::new(
            vec![3, 2],
            vec![0.5, -1.25, 3.75e-3, 1234.5, -0.0, 9.0]
                .into_iter()
                .map(|v: f64| v as f32 as f64)
                .collect(),
        );
        write_pfm(&p, &vals).unwrap();
        let back = load_pfm(&p).unwrap();
        assert_eq!(back.values.data(), vals.data());
        // re-writing produces byte-identical files
        let q = dir.path().join("rt2.pfm");
        write_pfm(&q, &back.values).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    }

    #[test]
    fn nonfinite_values_become_invalid_mask() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("inf.pfm");
        let mut vals = Tensor::filled(&[2, 2], 5.0);
        vals.set2(0, 1, f64::INFINITY);
        write_pfm(&p, &vals).unwrap();
        let back = load_pfm(&p).unwrap();
        assert_eq!(back.valid.at2(0, 1), 0.0);
        assert_eq!(back.values.at2(0, 1), 0.0);
        assert_eq!(back.valid.at2(1, 1), 1.0);
    }
}
