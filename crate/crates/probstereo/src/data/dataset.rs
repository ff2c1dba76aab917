//! Dataset specifications, directory walking and synthetic dataset
//! materialisation.
//!
//! The uniform on-disk layout is one triple per sample plus a manifest:
//!
//! ```text
//! root/
//!   0000_left.png    8-bit grayscale image
//!   0000_right.png
//!   0000_disp.pfm    f32 disparity, +inf at pixels without ground truth
//!   manifest.json    generator parameters and seed (synthetic sets)
//! ```
//!
//! KITTI 2015 trees (`image_2/`, `image_3/`, `disp_occ_0/`) are walked in
//! their native layout.

use super::pfm::{load_pfm, write_pfm};
use super::synth::{synth_stereogram, SynthParams};
use super::StereoSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Directory of `*_left.png` / `*_right.png` / `*_disp.pfm` triples
    /// (materialised synthetic sets, converted Sceneflow-style data).
    PfmDir {
        root: PathBuf,
        #[serde(default)]
        quarter_resolution: bool,
    },
    /// KITTI 2015 layout with 16-bit PNG ground truth.
    KittiPng {
        root: PathBuf,
        #[serde(default)]
        quarter_resolution: bool,
    },
    /// Generated in memory; `seed` makes the set reproducible.
    Synthetic {
        params: SynthParams,
        count: usize,
        seed: u64,
    },
}

enum Entry {
    Memory(Box<StereoSample>),
    PfmTriple {
        left: PathBuf,
        right: PathBuf,
        disp: Option<PathBuf>,
        quarter: bool,
    },
    Kitti {
        left: PathBuf,
        right: PathBuf,
        disp: PathBuf,
        quarter: bool,
    },
}

pub struct Dataset {
    entries: Vec<Entry>,
    stems: Vec<String>,
}

impl Dataset {
    pub fn load(spec: &DatasetSpec) -> Result<Dataset> {
        match spec {
            DatasetSpec::Synthetic { params, count, seed } => {
                params.validate()?;
                let mut entries = Vec::with_capacity(*count);
                let mut stems = Vec::with_capacity(*count);
                for i in 0..*count {
                    // one independent stream per sample
                    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                    rng.set_stream(i as u64);
                    entries.push(Entry::Memory(Box::new(synth_stereogram(params, &mut rng)?)));
                    stems.push(format!("{i:04}"));
                }
                Ok(Dataset { entries, stems })
            }
            DatasetSpec::PfmDir { root, quarter_resolution } => {
                let mut triples: BTreeMap<String, (Option<PathBuf>, Option<PathBuf>, Option<PathBuf>)> =
                    BTreeMap::new();
                for e in walkdir::WalkDir::new(root).sort_by_file_name() {
                    let e = e.map_err(|err| Error::Data(format!("walking {}: {err}", root.display())))?;
                    if !e.file_type().is_file() {
                        continue;
                    }
                    let name = e.file_name().to_string_lossy().to_string();
                    if let Some(stem) = name.strip_suffix("_left.png") {
                        triples.entry(stem.to_string()).or_default().0 = Some(e.path().to_path_buf());
                    } else if let Some(stem) = name.strip_suffix("_right.png") {
                        triples.entry(stem.to_string()).or_default().1 = Some(e.path().to_path_buf());
                    } else if let Some(stem) = name.strip_suffix("_disp.pfm") {
                        triples.entry(stem.to_string()).or_default().2 = Some(e.path().to_path_buf());
                    }
                }
                let mut entries = Vec::new();
                let mut stems = Vec::new();
                for (stem, (l, r, d)) in triples {
                    if let (Some(left), Some(right)) = (l, r) {
                        entries.push(Entry::PfmTriple {
                            left,
                            right,
                            disp: d,
                            quarter: *quarter_resolution,
                        });
                        stems.push(stem);
                    }
                }
                if entries.is_empty() {
                    return Err(Error::Data(format!(
                        "no *_left.png / *_right.png pairs under {}",
                        root.display()
                    )));
                }
                Ok(Dataset { entries, stems })
            }
            DatasetSpec::KittiPng { root, quarter_resolution } => {
                let disp_dir = root.join("disp_occ_0");
                let mut entries = Vec::new();
                let mut stems = Vec::new();
                let rd = std::fs::read_dir(&disp_dir).map_err(|e| Error::io(&disp_dir, e))?;
                let mut names: Vec<String> = rd
                    .filter_map(|e| e.ok())
                    .map(|e| e.file_name().to_string_lossy().to_string())
                    .filter(|n| n.ends_with(".png"))
                    .collect();
                names.sort();
                for name in names {
                    let left = root.join("image_2").join(&name);
                    let right = root.join("image_3").join(&name);
                    if left.exists() && right.exists() {
                        stems.push(name.trim_end_matches(".png").to_string());
                        entries.push(Entry::Kitti {
                            left,
                            right,
                            disp: disp_dir.join(&name),
                            quarter: *quarter_resolution,
                        });
                    }
                }
                if entries.is_empty() {
                    return Err(Error::Data(format!(
                        "no usable KITTI samples under {}",
                        root.display()
                    )));
                }
                Ok(Dataset { entries, stems })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stem(&self, index: usize) -> &str {
        &self.stems[index]
    }

    /// Load sample `index`, converted to `channels` image channels.
    pub fn get(&self, index: usize, channels: usize) -> Result<StereoSample> {
        let sample = match &self.entries[index] {
            Entry::Memory(s) => (**s).clone(),
            Entry::PfmTriple { left, right, disp, quarter } => {
                let mut s = StereoSample {
                    left: load_image(left)?,
                    right: load_image(right)?,
                    gt_disparity: None,
                    valid_mask: None,
                };
                if let Some(d) = disp {
                    let pfm = load_pfm(d)?;
                    s.gt_disparity = Some(pfm.values);
                    s.valid_mask = Some(pfm.valid);
                }
                if *quarter {
                    s = super::downsample_quarter(&s);
                }
                s
            }
            Entry::Kitti { left, right, disp, quarter } => {
                let (gt, mask) = super::kitti::load_kitti_disparity(disp)?;
                let mut s = StereoSample {
                    left: load_image(left)?,
                    right: load_image(right)?,
                    gt_disparity: Some(gt),
                    valid_mask: Some(mask),
                };
                if *quarter {
                    s = super::downsample_quarter(&s);
                }
                s
            }
        };
        sample.validate()?;
        Ok(sample.with_channels(channels))
    }
}

/// Decode an image file into `[C, H, W]` with values in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(match img {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            Tensor::new(
                vec![1, h, w],
                buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
            )
        }
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            Tensor::new(
                vec![1, h, w],
                buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
            )
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let raw = rgb.into_raw();
            let plane = h * w;
            let mut data = vec![0.0; 3 * plane];
            for p in 0..plane {
                for c in 0..3 {
                    data[c * plane + p] = raw[p * 3 + c] as f64 / 255.0;
                }
            }
            Tensor::new(vec![3, h, w], data)
        }
    })
}

/// Write a `[1, H, W]` or `[3, H, W]` intensity tensor as an 8-bit PNG.
pub fn save_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let res = match c {
        1 => {
            let buf: Vec<u8> = image.data().iter().map(|&v| to_u8(v)).collect();
            image::ImageBuffer::<image::Luma<u8>, _>::from_vec(w as u32, h as u32, buf)
                .expect("buffer size")
                .save(path)
        }
        3 => {
            let plane = h * w;
            let mut buf = vec![0u8; 3 * plane];
            for p in 0..plane {
                for ch in 0..3 {
                    buf[p * 3 + ch] = to_u8(image.data()[ch * plane + p]);
                }
            }
            image::ImageBuffer::<image::Rgb<u8>, _>::from_vec(w as u32, h as u32, buf)
                .expect("buffer size")
                .save(path)
        }
        other => {
            return Err(Error::Data(format!("cannot save {other}-channel image")));
        }
    };
    res.map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub params: SynthParams,
    pub count: usize,
    pub seed: u64,
    pub files: Vec<String>,
}

/// Materialise a synthetic dataset to `out_dir` in the uniform PFM + PNG
/// layout, with invalid ground-truth pixels stored as +inf.
pub fn materialize_synth(
    params: &SynthParams,
    count: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<SynthManifest> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let s = synth_stereogram(params, &mut rng)?;
        let stem = format!("{i:04}");
        super::dataset::save_image(out_dir.join(format!("{stem}_left.png")), &s.left)?;
        super::dataset::save_image(out_dir.join(format!("{stem}_right.png")), &s.right)?;
        let gt = s.gt_disparity.as_ref().unwrap();
        let mask = s.valid_mask.as_ref().unwrap();
        let disk_gt = gt.zip_map(mask, |d, m| if m > 0.0 { d } else { f64::INFINITY });
        write_pfm(out_dir.join(format!("{stem}_disp.pfm")), &disk_gt)?;
        files.push(stem);
    }
    let manifest = SynthManifest {
        params: *params,
        count,
        seed,
        files,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    let mpath = out_dir.join("manifest.json");
    std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<SynthManifest> {
    let path = dir.as_ref().join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("manifest parse: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn synthetic_dataset_is_seed_deterministic() {
        let spec = DatasetSpec::Synthetic {
            params: SynthParams::default(),
            count: 3,
            seed: 9,
        };
        let a = Dataset::load(&spec).unwrap();
        let b = Dataset::load(&spec).unwrap();
        assert_eq!(a.len(), 3);
        for i in 0..3 {
            assert_eq!(a.get(i, 1).unwrap(), b.get(i, 1).unwrap());
        }
        // samples differ from each other
        assert_ne!(a.get(0, 1).unwrap(), a.get(1, 1).unwrap());
    }

    #[test]
    fn materialized_set_roundtrips_through_dir_walker() {
        let dir = tempdir().unwrap();
        let params = SynthParams::default();
        let manifest = materialize_synth(&params, 4, 123, dir.path()).unwrap();
        assert_eq!(manifest.files.len(), 4);

        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back, manifest);

        let ds = Dataset::load(&DatasetSpec::PfmDir {
            root: dir.path().to_path_buf(),
            quarter_resolution: false,
        })
        .unwrap();
        assert_eq!(ds.len(), 4);
        let s = ds.get(0, 1).unwrap();
        assert!(s.gt_disparity.is_some());
        let mask = s.valid_mask.as_ref().unwrap();
        assert!(mask.count_positive() > 0);

        // disparities survive the PFM trip exactly; images are 8-bit quantised
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        rng.set_stream(0);
        let orig = synth_stereogram(&params, &mut rng).unwrap();
        let og = orig.gt_disparity.unwrap();
        let sg = s.gt_disparity.as_ref().unwrap();
        let om = orig.valid_mask.unwrap();
        for i in 0..og.len() {
            if om.data()[i] > 0.0 {
                assert_eq!(og.data()[i], sg.data()[i]);
            }
        }
        assert_eq!(&om, mask);
    }

    #[test]
    fn same_seed_materialization_is_bit_identical() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let params = SynthParams::default();
        materialize_synth(&params, 2, 7, d1.path()).unwrap();
        materialize_synth(&params, 2, 7, d2.path()).unwrap();
        for name in ["0000_left.png", "0000_right.png", "0000_disp.pfm", "manifest.json", "0001_disp.pfm"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn missing_dir_is_a_data_error() {
        let spec = DatasetSpec::PfmDir {
            root: PathBuf::from("/nonexistent/nowhere"),
            quarter_resolution: false,
        };
        assert!(Dataset::load(&spec).is_err());
    }
}
