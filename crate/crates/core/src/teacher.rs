//! Teacher training and the per-sample logit cache.
//!
//! The cache decouples teacher inference from student training: logits are
//! exported once, in eval mode, then read back sample-by-sample during
//! distillation. Cache file layout (all little-endian):
//!
//! ```text
//! "NLGT"  u16 version=1  u32 n_classes  u64 record_count  [u8; 32] teacher_tag
//! records: u64 sample_index, n_classes x f64 logits, u8 hard_label
//! ```

use crate::data::LabeledSet;
use crate::metrics::RunMetrics;
use crate::net::{Mode, Network, NetworkParams};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::{stream_rng, Stream};
use crate::trainer::{run_training, BatchObjective, LoopConfig, TrainError};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const LOGIT_MAGIC: &[u8; 4] = b"NLGT";
const LOGIT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum LogitCacheError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad magic (expected \"NLGT\")")]
    BadMagic { path: String },
    #[error("{path}: unsupported version {found}")]
    BadVersion { path: String, found: u16 },
    #[error("{path}: file truncated ({context})")]
    Truncated { path: String, context: String },
    #[error("{path}: duplicate sample index {index}")]
    DuplicateIndex { path: String, index: u64 },
    #[error("record sets disagree: {0}")]
    Mismatch(String),
}

/// Teacher logits and hard label for one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRecord {
    pub sample_index: u64,
    pub logits: Vec<f64>,
    pub hard_label: u8,
}

/// All exported records of one teacher over one dataset split.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRecordSet {
    pub n_classes: u32,
    pub teacher_tag: [u8; 32],
    pub records: Vec<LogitRecord>,
}

impl LogitRecordSet {
    /// Builds a tag from readable text, truncated or zero-padded to 32 bytes.
    pub fn tag_from_str(s: &str) -> [u8; 32] {
        let mut tag = [0u8; 32];
        let bytes = s.as_bytes();
        let n = bytes.len().min(32);
        tag[..n].copy_from_slice(&bytes[..n]);
        tag
    }

    pub fn write(&self, path: &Path) -> Result<(), LogitCacheError> {
        let err = |source| LogitCacheError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(err)?);
        self.write_to(&mut w).map_err(err)
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(LOGIT_MAGIC)?;
        w.write_all(&LOGIT_VERSION.to_le_bytes())?;
        w.write_all(&self.n_classes.to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        w.write_all(&self.teacher_tag)?;
        for r in &self.records {
            w.write_all(&r.sample_index.to_le_bytes())?;
            for &v in &r.logits {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&[r.hard_label])?;
        }
        w.flush()
    }

    pub fn read(path: &Path) -> Result<Self, LogitCacheError> {
        let p = path.display().to_string();
        let mut r = BufReader::new(File::open(path).map_err(|source| LogitCacheError::Io {
            path: p.clone(),
            source,
        })?);
        let trunc = |context: &str| LogitCacheError::Truncated {
            path: p.clone(),
            context: context.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| trunc("header"))?;
        if &magic != LOGIT_MAGIC {
            return Err(LogitCacheError::BadMagic { path: p });
        }
        let mut u16b = [0u8; 2];
        r.read_exact(&mut u16b).map_err(|_| trunc("version"))?;
        let version = u16::from_le_bytes(u16b);
        if version != LOGIT_VERSION {
            return Err(LogitCacheError::BadVersion {
                path: p,
                found: version,
            });
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(|_| trunc("class count"))?;
        let n_classes = u32::from_le_bytes(u32b);
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b).map_err(|_| trunc("record count"))?;
        let count = u64::from_le_bytes(u64b);
        let mut teacher_tag = [0u8; 32];
        r.read_exact(&mut teacher_tag).map_err(|_| trunc("teacher tag"))?;
        let mut records = Vec::with_capacity(count as usize);
        let mut seen = HashSet::with_capacity(count as usize);
        for i in 0..count {
            let ctx = format!("record {}", i);
            r.read_exact(&mut u64b).map_err(|_| trunc(&ctx))?;
            let sample_index = u64::from_le_bytes(u64b);
            if !seen.insert(sample_index) {
                return Err(LogitCacheError::DuplicateIndex {
                    path: p,
                    index: sample_index,
                });
            }
            let mut logits = Vec::with_capacity(n_classes as usize);
            let mut f64b = [0u8; 8];
            for _ in 0..n_classes {
                r.read_exact(&mut f64b).map_err(|_| trunc(&ctx))?;
                logits.push(f64::from_le_bytes(f64b));
            }
            let mut lb = [0u8; 1];
            r.read_exact(&mut lb).map_err(|_| trunc(&ctx))?;
            records.push(LogitRecord {
                sample_index,
                logits,
                hard_label: lb[0],
            });
        }
        // a well-formed file ends exactly at the last record
        let mut extra = [0u8; 1];
        if r.read(&mut extra).map_err(|source| LogitCacheError::Io {
            path: path.display().to_string(),
            source,
        })? != 0
        {
            return Err(LogitCacheError::Truncated {
                path: path.display().to_string(),
                context: "trailing bytes after final record".to_string(),
            });
        }
        Ok(LogitRecordSet {
            n_classes,
            teacher_tag,
            records,
        })
    }

    /// Logit vectors indexed by position for a set whose sample indices are
    /// exactly `0..n`. Returns an error description when coverage is partial.
    pub fn dense_by_index(&self, n: usize) -> Result<Vec<&[f64]>, u64> {
        let mut dense: Vec<Option<&[f64]>> = vec![None; n];
        for r in &self.records {
            if (r.sample_index as usize) < n {
                dense[r.sample_index as usize] = Some(&r.logits);
            }
        }
        let mut out = Vec::with_capacity(n);
        for (i, slot) in dense.into_iter().enumerate() {
            out.push(slot.ok_or(i as u64)?);
        }
        Ok(out)
    }
}

/// Combines two teachers by averaging their logits per sample. Averaging raw
/// logits corresponds — up to a per-sample constant that softmax ignores —
/// to the normalized elementwise geometric mean of the two softmax
/// distributions, and stays well-defined for negative logits.
pub fn merge_teachers(
    a: &LogitRecordSet,
    b: &LogitRecordSet,
) -> Result<LogitRecordSet, LogitCacheError> {
    if a.n_classes != b.n_classes {
        return Err(LogitCacheError::Mismatch(format!(
            "class counts {} vs {}",
            a.n_classes, b.n_classes
        )));
    }
    if a.records.len() != b.records.len() {
        return Err(LogitCacheError::Mismatch(format!(
            "record counts {} vs {}",
            a.records.len(),
            b.records.len()
        )));
    }
    let mut b_sorted: Vec<&LogitRecord> = b.records.iter().collect();
    b_sorted.sort_by_key(|r| r.sample_index);
    let mut records = Vec::with_capacity(a.records.len());
    for ra in &a.records {
        let rb = b_sorted
            .binary_search_by_key(&ra.sample_index, |r| r.sample_index)
            .map(|i| b_sorted[i])
            .map_err(|_| {
                LogitCacheError::Mismatch(format!(
                    "sample index {} present in only one set",
                    ra.sample_index
                ))
            })?;
        let logits = ra
            .logits
            .iter()
            .zip(&rb.logits)
            .map(|(&x, &y)| 0.5 * (x + y))
            .collect();
        records.push(LogitRecord {
            sample_index: ra.sample_index,
            logits,
            hard_label: ra.hard_label,
        });
    }
    let mut tag_input = Vec::with_capacity(64);
    tag_input.extend_from_slice(&a.teacher_tag);
    tag_input.extend_from_slice(&b.teacher_tag);
    let digest = <sha2::Sha256 as sha2::Digest>::digest(&tag_input);
    let mut teacher_tag = [0u8; 32];
    teacher_tag.copy_from_slice(&digest);
    Ok(LogitRecordSet {
        n_classes: a.n_classes,
        teacher_tag,
        records,
    })
}

struct HardLabelObjective<'a> {
    net: &'a Network,
    set: &'a LabeledSet,
}

impl BatchObjective for HardLabelObjective<'_> {
    fn compute(
        &mut self,
        indices: &[usize],
        params: &NetworkParams,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<(f64, NetworkParams), TrainError> {
        let (batch, labels) = self.set.gather(indices);
        let (logits, cache) = self
            .net
            .forward(params, &batch, Mode::Train, Some(dropout_rng))?;
        let (loss, grad) = crate::net::softmax_cross_entropy(&logits, &labels)?;
        let grads = self.net.backward(params, &cache, &grad)?;
        Ok((loss, grads))
    }
}

/// Trains a teacher on hard labels with softmax cross-entropy, stopping when
/// the validation error has not improved for `cfg.patience` epochs, and
/// returns the best-validation checkpoint.
pub fn train_teacher(
    net: &Network,
    train: &LabeledSet,
    val: Option<&LabeledSet>,
    optimizer_cfg: OptimizerConfig,
    cfg: &LoopConfig,
) -> Result<(NetworkParams, RunMetrics), TrainError> {
    let mut init_rng = stream_rng(cfg.seed, Stream::Init);
    let params = net.init_params(&mut init_rng);
    let mut optimizer = Optimizer::new(optimizer_cfg);
    let metrics = RunMetrics::new(cfg.seed, "");
    let mut objective = HardLabelObjective { net, set: train };
    run_training(
        net,
        params,
        &mut optimizer,
        train.len(),
        val,
        cfg,
        &mut objective,
        metrics,
    )
}

/// Runs the teacher in eval mode over every sample of `set` and writes one
/// logit record per sample, indexed by position in the set.
pub fn export_logits(
    net: &Network,
    params: &NetworkParams,
    set: &LabeledSet,
    teacher_tag: [u8; 32],
) -> Result<LogitRecordSet, TrainError> {
    let classes = net.classes();
    let mut records = Vec::with_capacity(set.len());
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(crate::analysis::EVAL_BATCH) {
        let (batch, labels) = set.gather(chunk);
        let logits = net.eval_logits(params, &batch)?;
        for (row, (&sample_index, &hard_label)) in chunk.iter().zip(&labels).enumerate() {
            records.push(LogitRecord {
                sample_index: sample_index as u64,
                logits: logits.row(row).to_vec(),
                hard_label,
            });
        }
    }
    Ok(LogitRecordSet {
        n_classes: classes as u32,
        teacher_tag,
        records,
    })
}

/// Convenience wrapper: export and persist in one step.
pub fn export_logits_to_file(
    net: &Network,
    params: &NetworkParams,
    set: &LabeledSet,
    teacher_tag: [u8; 32],
    path: &Path,
) -> Result<LogitRecordSet, TeacherExportError> {
    let records = export_logits(net, params, set, teacher_tag)?;
    records.write(path)?;
    Ok(records)
}

#[derive(Debug, Error)]
pub enum TeacherExportError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Cache(#[from] LogitCacheError),
}

/// Reads a logit cache, validating magic, version and record consistency.
pub fn load_logits(path: &Path) -> Result<LogitRecordSet, LogitCacheError> {
    LogitRecordSet::read(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::parse_arch;
    use crate::tensor::Tensor;
    use tempfile::TempDir;

    fn sample_records() -> LogitRecordSet {
        LogitRecordSet {
            n_classes: 3,
            teacher_tag: LogitRecordSet::tag_from_str("unit-test"),
            records: vec![
                LogitRecord {
                    sample_index: 0,
                    logits: vec![0.5, -1.25, 3.0],
                    hard_label: 2,
                },
                LogitRecord {
                    sample_index: 1,
                    logits: vec![-0.125, 0.0, 1.5],
                    hard_label: 2,
                },
                LogitRecord {
                    sample_index: 2,
                    logits: vec![2.0, 0.25, -0.5],
                    hard_label: 0,
                },
            ],
        }
    }

    #[test]
    fn cache_round_trip_is_identity() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("logits.nlgt");
        let set = sample_records();
        set.write(&path).unwrap();
        let loaded = load_logits(&path).unwrap();
        assert_eq!(loaded, set);
        // write -> read -> write is byte-identical
        let path2 = dir.path().join("logits2.nlgt");
        loaded.write(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn handcrafted_fixture_parses() {
        // one record, two classes, built byte-by-byte
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("fixture.nlgt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"NLGT");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&[7u8; 32]);
        bytes.extend_from_slice(&42u64.to_le_bytes());
        bytes.extend_from_slice(&1.5f64.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f64).to_le_bytes());
        bytes.push(1);
        std::fs::write(&path, &bytes).unwrap();
        let set = load_logits(&path).unwrap();
        assert_eq!(set.n_classes, 2);
        assert_eq!(set.teacher_tag, [7u8; 32]);
        assert_eq!(set.records.len(), 1);
        assert_eq!(set.records[0].sample_index, 42);
        assert_eq!(set.records[0].logits, vec![1.5, -2.0]);
        assert_eq!(set.records[0].hard_label, 1);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.nlgt");
        sample_records().write(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_logits(&path),
            Err(LogitCacheError::BadMagic { .. })
        ));
    }

    #[test]
    fn unsupported_version_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.nlgt");
        sample_records().write(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_logits(&path),
            Err(LogitCacheError::BadVersion { found: 9, .. })
        ));
    }

    #[test]
    fn truncated_final_record_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.nlgt");
        sample_records().write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(
            load_logits(&path),
            Err(LogitCacheError::Truncated { .. })
        ));
    }

    #[test]
    fn duplicate_sample_index_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.nlgt");
        let mut set = sample_records();
        set.records[2].sample_index = 0;
        set.write(&path).unwrap();
        assert!(matches!(
            load_logits(&path),
            Err(LogitCacheError::DuplicateIndex { index: 0, .. })
        ));
    }

    #[test]
    fn merge_is_idempotent_and_takes_midpoints() {
        let a = sample_records();
        let merged = merge_teachers(&a, &a).unwrap();
        for (m, r) in merged.records.iter().zip(&a.records) {
            assert_eq!(m.logits, r.logits);
        }
        let mut b = sample_records();
        b.records[0].logits = vec![0.0, 0.0, 0.0];
        let merged = merge_teachers(&a, &b).unwrap();
        assert_eq!(merged.records[0].logits, vec![0.25, -0.625, 1.5]);
    }

    #[test]
    fn merge_rejects_mismatched_indices() {
        let a = sample_records();
        let mut b = sample_records();
        b.records[2].sample_index = 99;
        assert!(matches!(
            merge_teachers(&a, &b),
            Err(LogitCacheError::Mismatch(_))
        ));
    }

    #[test]
    fn merged_softmax_equals_normalized_geometric_mean() {
        fn softmax(v: &[f64]) -> Vec<f64> {
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        }
        let a = sample_records();
        let mut b = sample_records();
        for r in &mut b.records {
            for (j, v) in r.logits.iter_mut().enumerate() {
                *v = *v * 0.3 - 0.7 * j as f64;
            }
        }
        let merged = merge_teachers(&a, &b).unwrap();
        for ((ra, rb), rm) in a.records.iter().zip(&b.records).zip(&merged.records) {
            let pa = softmax(&ra.logits);
            let pb = softmax(&rb.logits);
            let geo: Vec<f64> = pa.iter().zip(&pb).map(|(&x, &y)| (x * y).sqrt()).collect();
            let norm: f64 = geo.iter().sum();
            let expected: Vec<f64> = geo.into_iter().map(|x| x / norm).collect();
            let got = softmax(&rm.logits);
            for (e, g) in expected.iter().zip(&got) {
                assert!((e - g).abs() < 1e-10, "{} vs {}", e, g);
            }
        }
    }

    #[test]
    fn zero_epoch_budget_returns_initialized_params() {
        let net = Network::new(parse_arch("FC4-FC2").unwrap(), (1, 1, 3)).unwrap();
        let train = LabeledSet {
            images: Tensor::from_vec(&[6, 3, 1, 1], (0..18).map(|i| i as f64 / 18.0).collect())
                .unwrap(),
            labels: vec![0, 1, 0, 1, 0, 1],
            name: "toy".into(),
        };
        let cfg = LoopConfig {
            epochs: 0,
            seed: 3,
            ..LoopConfig::default()
        };
        let (params, metrics) =
            train_teacher(&net, &train, None, OptimizerConfig::adam(1e-3), &cfg).unwrap();
        let mut rng = stream_rng(3, Stream::Init);
        let fresh = net.init_params(&mut rng);
        assert_eq!(params, fresh);
        assert!(metrics.epoch_train_loss.is_empty());
    }

    #[test]
    fn teacher_fits_linearly_separable_data() {
        // two clusters on a line, 2 classes
        let n = 40;
        let mut data = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            let x = if class == 0 { 0.1 } else { 0.9 } + (i as f64 * 0.001);
            data.extend_from_slice(&[x, 1.0 - x]);
            labels.push(class as u8);
        }
        let train = LabeledSet {
            images: Tensor::from_vec(&[n, 2, 1, 1], data).unwrap(),
            labels,
            name: "separable".into(),
        };
        let net = Network::new(parse_arch("FC8-FC2").unwrap(), (1, 1, 2)).unwrap();
        let cfg = LoopConfig {
            epochs: 200,
            patience: 200,
            batch_size: 8,
            seed: 1,
        };
        let (params, _) =
            train_teacher(&net, &train, None, OptimizerConfig::adam(0.01), &cfg).unwrap();
        let err = crate::analysis::evaluate(&net, &params, &train).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn exported_logits_match_fresh_single_sample_forward() {
        let net = Network::new(parse_arch("C3(S1P1)@2-MP2(S2)-FC4").unwrap(), (6, 6, 1)).unwrap();
        let params = net.init_params(&mut stream_rng(9, Stream::Init));
        let n = 5;
        let set = LabeledSet {
            images: Tensor::from_vec(
                &[n, 1, 6, 6],
                (0..n * 36).map(|i| ((i * 31 % 17) as f64) / 17.0).collect(),
            )
            .unwrap(),
            labels: vec![0, 1, 2, 3, 0],
            name: "toy".into(),
        };
        let records = export_logits(&net, &params, &set, [0u8; 32]).unwrap();
        assert_eq!(records.records.len(), n);
        for (i, rec) in records.records.iter().enumerate() {
            assert_eq!(rec.sample_index, i as u64);
            let (single, _) = set.gather(&[i]);
            let fresh = net.eval_logits(&params, &single).unwrap();
            assert_eq!(rec.logits.as_slice(), fresh.data());
        }
    }

    #[test]
    fn export_is_deterministic() {
        let net = Network::new(parse_arch("FC4").unwrap(), (1, 1, 3)).unwrap();
        let params = net.init_params(&mut stream_rng(2, Stream::Init));
        let set = LabeledSet {
            images: Tensor::from_vec(&[4, 3, 1, 1], (0..12).map(|i| i as f64).collect()).unwrap(),
            labels: vec![0, 1, 2, 3],
            name: "toy".into(),
        };
        let a = export_logits(&net, &params, &set, [1u8; 32]).unwrap();
        let b = export_logits(&net, &params, &set, [1u8; 32]).unwrap();
        assert_eq!(a, b);
    }
}
