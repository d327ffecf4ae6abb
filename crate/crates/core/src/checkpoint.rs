//! Network checkpoint serialization.
//!
//! Layout (integers little-endian unless noted):
//!
//! ```text
//! "NTCK"  u16 version=1
//! u32 arch_len  arch_len bytes of canonical architecture string (UTF-8)
//! per parameter tensor, weights before biases in layer order:
//!   u8 rank, rank x u32 dims, f64 values in row-major order
//! ```

use crate::arch::{parse_arch, render_arch, ArchSpec, LayerSpec};
use crate::net::{LayerParams, NetworkParams};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const CKPT_MAGIC: &[u8; 4] = b"NTCK";
const CKPT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad magic (expected \"NTCK\")")]
    BadMagic { path: String },
    #[error("{path}: unsupported version {found}")]
    BadVersion { path: String, found: u16 },
    #[error("{path}: file truncated ({context})")]
    Truncated { path: String, context: String },
    #[error("{path}: architecture string is not valid UTF-8")]
    BadArchText { path: String },
    #[error("{path}: embedded architecture fails to parse: {source}")]
    BadArch {
        path: String,
        source: crate::arch::ArchError,
    },
    #[error("{path}: tensor {index} has shape {found:?}, inconsistent with the architecture")]
    TensorShape {
        path: String,
        index: usize,
        found: Vec<usize>,
    },
}

/// Writes `params` with the canonical form of `spec`.
pub fn write_checkpoint(
    path: &Path,
    spec: &ArchSpec,
    params: &NetworkParams,
) -> Result<(), CheckpointError> {
    let err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(err)?);
    let arch = render_arch(spec);
    (|| -> std::io::Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&(arch.len() as u32).to_le_bytes())?;
        w.write_all(arch.as_bytes())?;
        for t in params.tensors() {
            w.write_all(&[t.shape().len() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    })()
    .map_err(err)
}

/// Reads a checkpoint back into its architecture and parameters.
pub fn read_checkpoint(path: &Path) -> Result<(ArchSpec, NetworkParams), CheckpointError> {
    let p = path.display().to_string();
    let mut r = BufReader::new(File::open(path).map_err(|source| CheckpointError::Io {
        path: p.clone(),
        source,
    })?);
    let trunc = |context: &str| CheckpointError::Truncated {
        path: p.clone(),
        context: context.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| trunc("header"))?;
    if &magic != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic { path: p });
    }
    let mut u16b = [0u8; 2];
    r.read_exact(&mut u16b).map_err(|_| trunc("version"))?;
    let version = u16::from_le_bytes(u16b);
    if version != CKPT_VERSION {
        return Err(CheckpointError::BadVersion {
            path: p,
            found: version,
        });
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(|_| trunc("arch length"))?;
    let arch_len = u32::from_le_bytes(u32b) as usize;
    let mut arch_bytes = vec![0u8; arch_len];
    r.read_exact(&mut arch_bytes)
        .map_err(|_| trunc("arch string"))?;
    let arch_text =
        String::from_utf8(arch_bytes).map_err(|_| CheckpointError::BadArchText { path: p.clone() })?;
    let spec = parse_arch(&arch_text).map_err(|source| CheckpointError::BadArch {
        path: p.clone(),
        source,
    })?;

    let mut read_tensor = |index: usize| -> Result<Tensor, CheckpointError> {
        let ctx = format!("tensor {}", index);
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank).map_err(|_| trunc(&ctx))?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut d = [0u8; 4];
            r.read_exact(&mut d).map_err(|_| trunc(&ctx))?;
            shape.push(u32::from_le_bytes(d) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut f64b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut f64b).map_err(|_| trunc(&ctx))?;
            data.push(f64::from_le_bytes(f64b));
        }
        Ok(Tensor::from_vec(&shape, data).expect("sized by construction"))
    };

    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut index = 0usize;
    for layer in &spec.layers {
        match layer {
            LayerSpec::Conv {
                kernel,
                out_channels,
                ..
            } => {
                let weight = read_tensor(index)?;
                index += 1;
                if weight.shape().len() != 4
                    || weight.shape()[0] != *out_channels
                    || weight.shape()[2] != *kernel
                    || weight.shape()[3] != *kernel
                {
                    return Err(CheckpointError::TensorShape {
                        path: p,
                        index: index - 1,
                        found: weight.shape().to_vec(),
                    });
                }
                let bias = read_tensor(index)?;
                index += 1;
                if bias.shape() != [*out_channels] {
                    return Err(CheckpointError::TensorShape {
                        path: p,
                        index: index - 1,
                        found: bias.shape().to_vec(),
                    });
                }
                layers.push(LayerParams::Conv { weight, bias });
            }
            LayerSpec::FullyConnected { out_units } => {
                let weight = read_tensor(index)?;
                index += 1;
                if weight.shape().len() != 2 || weight.shape()[0] != *out_units {
                    return Err(CheckpointError::TensorShape {
                        path: p,
                        index: index - 1,
                        found: weight.shape().to_vec(),
                    });
                }
                let bias = read_tensor(index)?;
                index += 1;
                if bias.shape() != [*out_units] {
                    return Err(CheckpointError::TensorShape {
                        path: p,
                        index: index - 1,
                        found: bias.shape().to_vec(),
                    });
                }
                layers.push(LayerParams::Fc { weight, bias });
            }
            _ => layers.push(LayerParams::None),
        }
    }
    // a well-formed checkpoint ends exactly after the last tensor
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })? != 0
    {
        return Err(CheckpointError::Truncated {
            path: path.display().to_string(),
            context: "trailing bytes after final tensor".to_string(),
        });
    }
    Ok((spec, NetworkParams { layers }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Network;
    use crate::rng::{stream_rng, Stream};
    use tempfile::TempDir;

    fn make_params() -> (ArchSpec, NetworkParams) {
        let spec = parse_arch("C3(S1P1)@2-MP2(S2)-FC5").unwrap();
        let net = Network::new(spec.clone(), (4, 4, 1)).unwrap();
        let params = net.init_params(&mut stream_rng(1, Stream::Init));
        (spec, params)
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("net.ntck");
        let (spec, params) = make_params();
        write_checkpoint(&path, &spec, &params).unwrap();
        let (spec2, params2) = read_checkpoint(&path).unwrap();
        assert_eq!(spec2.layers, spec.layers);
        assert_eq!(params2, params);
        // second write is byte-identical
        let path2 = dir.path().join("net2.ntck");
        write_checkpoint(&path2, &spec2, &params2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("net.ntck");
        let (spec, params) = make_params();
        write_checkpoint(&path, &spec, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(CheckpointError::BadMagic { .. })
        ));
    }

    #[test]
    fn bad_version_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("net.ntck");
        let (spec, params) = make_params();
        write_checkpoint(&path, &spec, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 2;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(CheckpointError::BadVersion { found: 2, .. })
        ));
    }

    #[test]
    fn truncation_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("net.ntck");
        let (spec, params) = make_params();
        write_checkpoint(&path, &spec, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn loaded_params_drive_identical_forward_passes() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("net.ntck");
        let (spec, params) = make_params();
        write_checkpoint(&path, &spec, &params).unwrap();
        let (spec2, params2) = read_checkpoint(&path).unwrap();
        let net = Network::new(spec, (4, 4, 1)).unwrap();
        let net2 = Network::new(spec2, (4, 4, 1)).unwrap();
        let batch = Tensor::from_vec(&[2, 1, 4, 4], (0..32).map(|i| i as f64 / 32.0).collect())
            .unwrap();
        let a = net.eval_logits(&params, &batch).unwrap();
        let b = net2.eval_logits(&params2, &batch).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
