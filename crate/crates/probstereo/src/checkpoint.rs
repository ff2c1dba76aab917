//! Checkpoint container: a JSON header describing the configuration and
//! parameter table, followed by raw little-endian f64 blobs. Reload then
//! re-save is byte-identical, and a parameter-table mismatch at load time
//! fails loudly instead of silently reinterpreting blobs.

use crate::error::{Error, Result};
use crate::loss::ResidualNorm;
use crate::network::{NetworkConfig, StereoNet};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PSCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub has_state: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: NetworkConfig,
    pub params: Vec<ParamEntry>,
    pub epoch: usize,
    pub step: usize,
    pub master_seed: u64,
    pub kl_weight: f64,
    pub residual_norm: ResidualNorm,
    pub optimizer: OptimizerMeta,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub net: StereoNet,
    /// RMSProp second-moment accumulators aligned with the parameter table.
    pub opt_state: Option<Vec<Tensor>>,
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    net: &StereoNet,
    epoch: usize,
    step: usize,
    master_seed: u64,
    kl_weight: f64,
    residual_norm: ResidualNorm,
    optimizer: OptimizerMeta,
    opt_state: Option<&[Tensor]>,
) -> Result<()> {
    let path = path.as_ref();
    let params = net.named_params();
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        config: net.config.clone(),
        params: params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        epoch,
        step,
        master_seed,
        kl_weight,
        residual_norm,
        optimizer: OptimizerMeta {
            has_state: opt_state.is_some(),
            ..optimizer
        },
    };
    if let Some(state) = opt_state {
        assert_eq!(state.len(), params.len(), "optimizer state misaligned");
    }

    let header = serde_json::to_vec(&meta).expect("meta serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &params {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(state) = opt_state {
        for t in state {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;

    let fail = |offset: usize, message: &str| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.to_string(),
    };
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(fail(0, "not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(fail(4, &format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(fail(16, "truncated header"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| fail(16, &format!("header parse: {e}")))?;

    // rebuild the network skeleton, then overwrite every parameter
    let mut init_rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = StereoNet::new(meta.config.clone(), &mut init_rng)?;
    {
        let live: Vec<ParamEntry> = net
            .named_params()
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        if live != meta.params {
            return Err(Error::Config(format!(
                "checkpoint parameter table does not match the configuration in {}",
                path.display()
            )));
        }
    }

    let mut off = 16 + header_len;
    let mut read_blob = |shape: &[usize]| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let need = n * 8;
        if bytes.len() < off + need {
            return Err(fail(off, "truncated parameter blob"));
        }
        let data: Vec<f64> = bytes[off..off + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += need;
        Ok(Tensor::new(shape.to_vec(), data))
    };

    let shapes: Vec<Vec<usize>> = meta.params.iter().map(|p| p.shape.clone()).collect();
    let mut blobs = Vec::with_capacity(shapes.len());
    for shape in &shapes {
        blobs.push(read_blob(shape)?);
    }
    for ((_, slot), blob) in net.named_params_mut().into_iter().zip(blobs) {
        *slot = blob;
    }

    let opt_state = if meta.optimizer.has_state {
        let mut state = Vec::with_capacity(shapes.len());
        for shape in &shapes {
            state.push(read_blob(shape)?);
        }
        Some(state)
    } else {
        None
    };

    Ok(Checkpoint {
        meta,
        net,
        opt_state,
    })
}

/// SHA-256 of a checkpoint file, recorded in prediction metadata so outputs
/// are traceable to exact weights.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn default_opt() -> OptimizerMeta {
        OptimizerMeta {
            learning_rate: 1e-3,
            decay: 0.9,
            epsilon: 1e-8,
            has_state: false,
        }
    }

    #[test]
    fn roundtrip_restores_every_parameter() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("net.psck");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = StereoNet::new(NetworkConfig::tiny(), &mut rng).unwrap();
        save_checkpoint(&p, &net, 3, 150, 42, 1e-4, ResidualNorm::L1, default_opt(), None).unwrap();

        let ck = load_checkpoint(&p).unwrap();
        assert_eq!(ck.meta.epoch, 3);
        assert_eq!(ck.meta.step, 150);
        assert_eq!(ck.meta.master_seed, 42);
        assert_eq!(ck.meta.config, net.config);
        for ((n1, t1), (n2, t2)) in net.named_params().iter().zip(ck.net.named_params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2, "parameter {n1} differs");
        }
    }

    #[test]
    fn reload_then_resave_is_bit_identical() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.psck");
        let p2 = dir.path().join("b.psck");
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = StereoNet::new(NetworkConfig::tiny(), &mut rng).unwrap();
        let state: Vec<Tensor> = net
            .named_params()
            .iter()
            .map(|(_, t)| Tensor::filled(t.shape(), 0.25))
            .collect();
        save_checkpoint(&p1, &net, 1, 10, 5, 0.5, ResidualNorm::L2, default_opt(), Some(&state)).unwrap();

        let ck = load_checkpoint(&p1).unwrap();
        save_checkpoint(
            &p2,
            &ck.net,
            ck.meta.epoch,
            ck.meta.step,
            ck.meta.master_seed,
            ck.meta.kl_weight,
            ck.meta.residual_norm,
            ck.meta.optimizer.clone(),
            ck.opt_state.as_deref(),
        )
        .unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn save_load_predict_is_bit_identical() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("net.psck");
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = StereoNet::new(NetworkConfig::tiny(), &mut rng).unwrap();
        let sample = crate::data::synth_stereogram(
            &crate::data::SynthParams {
                width: 8,
                height: 8,
                max_disparity: 3,
                num_shapes: 1,
                ..Default::default()
            },
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();

        let before = crate::inference::mc_predict(&net, &sample, 5, 99).unwrap();
        save_checkpoint(&p, &net, 0, 0, 11, 0.0, ResidualNorm::L1, default_opt(), None).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        let after = crate::inference::mc_predict(&loaded.net, &sample, 5, 99).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn config_mismatch_fails_loudly() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("net.psck");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = StereoNet::new(NetworkConfig::tiny(), &mut rng).unwrap();
        save_checkpoint(&p, &net, 0, 0, 0, 0.0, ResidualNorm::L1, default_opt(), None).unwrap();

        // corrupt the stored parameter table
        let mut bytes = std::fs::read(&p).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut meta: CheckpointMeta = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        meta.params[0].shape = vec![1, 1, 1, 1];
        let new_header = serde_json::to_vec(&meta).unwrap();
        let mut out = bytes[0..8].to_vec();
        out.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[16 + header_len..]);
        bytes = out;
        std::fs::write(&p, bytes).unwrap();

        assert!(matches!(load_checkpoint(&p).unwrap_err(), Error::Config(_)));
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("net.psck");
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = StereoNet::new(NetworkConfig::tiny(), &mut rng).unwrap();
        save_checkpoint(&p, &net, 0, 0, 0, 0.0, ResidualNorm::L1, default_opt(), None).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&p).unwrap_err(), Error::Parse { .. }));
    }
}
