//! Experiment orchestration: teacher training, logit export, per-seed
//! distillation and evaluation, with content-addressed stage reuse.
//!
//! Each stage writes its outputs plus a stamp file holding a digest of the
//! stage's configuration and input contents. A rerun recomputes the digests
//! and skips any stage whose stamp and outputs are intact, so pipelines are
//! idempotent and invalidation follows content, never timestamps. The final
//! manifest lists every file in the artifact directory with its hash.

use crate::analysis::evaluate;
use crate::arch::parse_arch;
use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::config::{hex_digest, DatasetConfig, DatasetName, ExperimentConfig};
use crate::data::{load_cifar10_bin, load_mnist_idx, preprocess_cifar, split_validation, LabeledSet, SplitConfig};
use crate::distill::{distill, DistillConfig};
use crate::net::Network;
use crate::teacher::{export_logits, load_logits, train_teacher, LogitRecordSet};
use crate::trainer::LoopConfig;
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("stage '{stage}' failed: {message}")]
pub struct PipelineError {
    pub stage: String,
    pub message: String,
}

fn stage_err(stage: &str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError {
        stage: stage.to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageReport {
    pub name: String,
    pub reused: bool,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub dir: PathBuf,
    pub fingerprint: String,
    pub stages: Vec<StageReport>,
}

/// Train/validation/test splits plus a digest of the raw input files.
pub struct DatasetBundle {
    pub train: LabeledSet,
    pub val: Option<LabeledSet>,
    pub test: LabeledSet,
    pub data_hash: String,
}

/// Environment variable naming the default parent directory for datasets;
/// `<dir>/mnist` and `<dir>/cifar10` are used when no explicit path is set.
pub const DATA_DIR_ENV: &str = "NOISYKD_DATA_DIR";

fn env_data_dir(sub: &str) -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(|d| PathBuf::from(d).join(sub))
}

fn hash_files(paths: &[PathBuf]) -> Result<String, std::io::Error> {
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    for p in paths {
        let mut f = fs::File::open(p)?;
        loop {
            let n = f.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{:02x}", b))
        .collect())
}

fn hash_file(path: &Path) -> Result<String, std::io::Error> {
    hash_files(&[path.to_path_buf()])
}

/// Loads the configured dataset, splits off the validation set and, for
/// CIFAR-10, applies mean subtraction and mirror augmentation (mean taken
/// over the unaugmented training split, subtracted from every split).
pub fn load_dataset(cfg: &DatasetConfig) -> Result<DatasetBundle, PipelineError> {
    const STAGE: &str = "dataset";
    match cfg.name {
        DatasetName::Mnist => {
            let dir = cfg
                .mnist_dir
                .clone()
                .or_else(|| env_data_dir("mnist"))
                .ok_or_else(|| {
                    stage_err(
                        STAGE,
                        format!("mnist_dir not set and {} is unset", DATA_DIR_ENV),
                    )
                })?;
            let files = [
                dir.join("train-images-idx3-ubyte"),
                dir.join("train-labels-idx1-ubyte"),
                dir.join("t10k-images-idx3-ubyte"),
                dir.join("t10k-labels-idx1-ubyte"),
            ];
            for f in &files {
                if !f.exists() {
                    return Err(stage_err(STAGE, format!("missing file {}", f.display())));
                }
            }
            let data_hash = hash_files(files.as_ref()).map_err(|e| stage_err(STAGE, e))?;
            let full_train =
                load_mnist_idx(&files[0], &files[1]).map_err(|e| stage_err(STAGE, e))?;
            let test = load_mnist_idx(&files[2], &files[3]).map_err(|e| stage_err(STAGE, e))?;
            let (train, val) = split_validation(
                &full_train,
                SplitConfig {
                    validation_count: cfg.validation_count.min(full_train.len().saturating_sub(1)),
                    split_seed: cfg.split_seed,
                },
            )
            .map_err(|e| stage_err(STAGE, e))?;
            Ok(DatasetBundle {
                train,
                val: (!val.is_empty()).then_some(val),
                test,
                data_hash,
            })
        }
        DatasetName::Cifar10 => {
            let dir = cfg
                .cifar_dir
                .clone()
                .or_else(|| env_data_dir("cifar10"))
                .ok_or_else(|| {
                    stage_err(
                        STAGE,
                        format!("cifar_dir not set and {} is unset", DATA_DIR_ENV),
                    )
                })?;
            let mut files: Vec<PathBuf> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{}.bin", i)))
                .collect();
            files.push(dir.join("test_batch.bin"));
            for f in &files {
                if !f.exists() {
                    return Err(stage_err(STAGE, format!("missing file {}", f.display())));
                }
            }
            let data_hash = hash_files(&files).map_err(|e| stage_err(STAGE, e))?;
            let full_train =
                load_cifar10_bin(&files[..5]).map_err(|e| stage_err(STAGE, e))?;
            let test = load_cifar10_bin(&files[5..]).map_err(|e| stage_err(STAGE, e))?;
            let (train_raw, val_raw) = split_validation(
                &full_train,
                SplitConfig {
                    validation_count: cfg.validation_count.min(full_train.len().saturating_sub(1)),
                    split_seed: cfg.split_seed,
                },
            )
            .map_err(|e| stage_err(STAGE, e))?;
            let mut others = vec![&test];
            if !val_raw.is_empty() {
                others.push(&val_raw);
            }
            let (train, mut processed, _mean) =
                preprocess_cifar(&train_raw, &others).map_err(|e| stage_err(STAGE, e))?;
            let test_p = processed.remove(0);
            let val_p = (!val_raw.is_empty()).then(|| processed.remove(0));
            Ok(DatasetBundle {
                train,
                val: val_p,
                test: test_p,
                data_hash,
            })
        }
    }
}

fn stamp_path(dir: &Path, stage: &str) -> PathBuf {
    dir.join(format!("{}.stamp", stage))
}

fn stage_is_current(dir: &Path, stage: &str, key: &str, outputs: &[&Path]) -> bool {
    let stamp_ok = fs::read_to_string(stamp_path(dir, stage))
        .map(|s| s.trim() == key)
        .unwrap_or(false);
    stamp_ok && outputs.iter().all(|p| p.exists())
}

fn write_stamp(dir: &Path, stage: &str, key: &str) -> Result<(), PipelineError> {
    fs::write(stamp_path(dir, stage), format!("{}\n", key)).map_err(|e| stage_err(stage, e))
}

/// Dataset, teacher and logit cache, ready for distillation or sweeps.
pub struct PreparedLogits {
    pub bundle: DatasetBundle,
    pub logit_set: LogitRecordSet,
    pub logits_path: PathBuf,
    pub stages: Vec<StageReport>,
    pub fingerprint: String,
}

/// Runs the dataset, teacher and logit-export stages with content-hash
/// reuse, leaving their artifacts in `cfg.out_dir`.
pub fn prepare_logits(cfg: &ExperimentConfig) -> Result<PreparedLogits, PipelineError> {
    let fingerprint = cfg.fingerprint();
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| stage_err("setup", e))?;
    let mut stages = Vec::new();

    let bundle = load_dataset(&cfg.dataset)?;
    stages.push(StageReport {
        name: "dataset".into(),
        reused: false,
    });
    let (h, w, c) = bundle.train.sample_shape();

    // teacher
    let teacher_spec = parse_arch(&cfg.teacher_arch).map_err(|e| stage_err("teacher", e))?;
    let teacher_net =
        Network::new(teacher_spec.clone(), (h, w, c)).map_err(|e| stage_err("teacher", e))?;
    let teacher_ckpt = dir.join("teacher.ntck");
    let teacher_params = if let Some(external) = &cfg.teacher_checkpoint {
        let (spec, params) = read_checkpoint(external).map_err(|e| stage_err("teacher", e))?;
        if spec.layers != teacher_spec.layers {
            return Err(stage_err(
                "teacher",
                format!(
                    "checkpoint {} holds a different architecture",
                    external.display()
                ),
            ));
        }
        stages.push(StageReport {
            name: "teacher".into(),
            reused: true,
        });
        params
    } else {
        let key = hex_digest(
            format!(
                "teacher\ndata={}\nval={}:{}\narch={}\nepochs={}\npatience={}\nopt={:?}\nseed={}\nbatch={}\n",
                bundle.data_hash,
                cfg.dataset.validation_count,
                cfg.dataset.split_seed,
                cfg.teacher_arch,
                cfg.teacher_train.epochs,
                cfg.teacher_train.patience,
                cfg.teacher_train.optimizer,
                cfg.teacher_seed,
                cfg.batch_size,
            )
            .as_bytes(),
        );
        let metrics_path = dir.join("teacher_metrics.csv");
        if stage_is_current(&dir, "teacher", &key, &[&teacher_ckpt, &metrics_path]) {
            let (_, params) =
                read_checkpoint(&teacher_ckpt).map_err(|e| stage_err("teacher", e))?;
            stages.push(StageReport {
                name: "teacher".into(),
                reused: true,
            });
            params
        } else {
            let loop_cfg = LoopConfig {
                batch_size: cfg.batch_size,
                epochs: cfg.teacher_train.epochs,
                patience: cfg.teacher_train.patience,
                seed: cfg.teacher_seed,
            };
            let (params, mut metrics) = train_teacher(
                &teacher_net,
                &bundle.train,
                bundle.val.as_ref(),
                cfg.teacher_train.optimizer.clone(),
                &loop_cfg,
            )
            .map_err(|e| stage_err("teacher", e))?;
            metrics.config_fingerprint = fingerprint.clone();
            metrics.test_error = Some(
                evaluate(&teacher_net, &params, &bundle.test)
                    .map_err(|e| stage_err("teacher", e))?,
            );
            write_checkpoint(&teacher_ckpt, &teacher_spec, &params)
                .map_err(|e| stage_err("teacher", e))?;
            fs::write(&metrics_path, metrics.to_csv_string())
                .map_err(|e| stage_err("teacher", e))?;
            write_stamp(&dir, "teacher", &key)?;
            stages.push(StageReport {
                name: "teacher".into(),
                reused: false,
            });
            params
        }
    };

    // logit export over the training split
    let logits_path = dir.join("logits.nlgt");
    let teacher_hash = if teacher_ckpt.exists() {
        hash_file(&teacher_ckpt).map_err(|e| stage_err("logits", e))?
    } else {
        // external checkpoint
        hash_file(cfg.teacher_checkpoint.as_ref().expect("checked above"))
            .map_err(|e| stage_err("logits", e))?
    };
    let logits_key = hex_digest(
        format!(
            "logits\nteacher={}\ndata={}\nval={}:{}\n",
            teacher_hash, bundle.data_hash, cfg.dataset.validation_count, cfg.dataset.split_seed
        )
        .as_bytes(),
    );
    let logit_set: LogitRecordSet =
        if stage_is_current(&dir, "logits", &logits_key, &[&logits_path]) {
            stages.push(StageReport {
                name: "logits".into(),
                reused: true,
            });
            load_logits(&logits_path).map_err(|e| stage_err("logits", e))?
        } else {
            let tag = LogitRecordSet::tag_from_str(&fingerprint[..32.min(fingerprint.len())]);
            let set = export_logits(&teacher_net, &teacher_params, &bundle.train, tag)
                .map_err(|e| stage_err("logits", e))?;
            set.write(&logits_path).map_err(|e| stage_err("logits", e))?;
            write_stamp(&dir, "logits", &logits_key)?;
            stages.push(StageReport {
                name: "logits".into(),
                reused: false,
            });
            set
        };
    Ok(PreparedLogits {
        bundle,
        logit_set,
        logits_path,
        stages,
        fingerprint,
    })
}

/// Runs the full pipeline: teacher, logit export, one distillation per seed,
/// evaluation, manifest. Completed stages whose inputs are unchanged are
/// reused, never recomputed.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutcome, PipelineError> {
    let PreparedLogits {
        bundle,
        logit_set,
        logits_path,
        mut stages,
        fingerprint,
    } = prepare_logits(cfg)?;
    let dir = cfg.out_dir.clone();

    // one distillation per seed, sharing the teacher and logit cache
    let student_spec = parse_arch(&cfg.student_arch).map_err(|e| stage_err("distill", e))?;
    let logits_hash = hash_file(&logits_path).map_err(|e| stage_err("distill", e))?;
    for &seed in &cfg.seeds {
        let stage_name = format!("distill_seed{}", seed);
        let ckpt = dir.join(format!("student_seed{}.ntck", seed));
        let metrics_path = dir.join(format!("metrics_seed{}.csv", seed));
        let key = hex_digest(
            format!(
                "distill\nlogits={}\ndata={}\narch={}\nnoise={:?}\nepochs={}\npatience={}\nopt={:?}\nseed={}\nbatch={}\n",
                logits_hash,
                bundle.data_hash,
                cfg.student_arch,
                cfg.noise,
                cfg.distill_train.epochs,
                cfg.distill_train.patience,
                cfg.distill_train.optimizer,
                seed,
                cfg.batch_size,
            )
            .as_bytes(),
        );
        if stage_is_current(&dir, &stage_name, &key, &[&ckpt, &metrics_path]) {
            stages.push(StageReport {
                name: stage_name,
                reused: true,
            });
            continue;
        }
        let dcfg = DistillConfig {
            student: student_spec.clone(),
            noise: cfg.noise,
            optimizer: cfg.distill_train.optimizer.clone(),
            train: LoopConfig {
                batch_size: cfg.batch_size,
                epochs: cfg.distill_train.epochs,
                patience: cfg.distill_train.patience,
                seed,
            },
            fingerprint: fingerprint.clone(),
        };
        let (params, metrics) = distill(
            &dcfg,
            &logit_set,
            &bundle.train,
            bundle.val.as_ref(),
            Some(&bundle.test),
        )
        .map_err(|e| stage_err(&stage_name, e))?;
        write_checkpoint(&ckpt, &student_spec, &params).map_err(|e| stage_err(&stage_name, e))?;
        fs::write(&metrics_path, metrics.to_csv_string())
            .map_err(|e| stage_err(&stage_name, e))?;
        write_stamp(&dir, &stage_name, &key)?;
        stages.push(StageReport {
            name: stage_name,
            reused: false,
        });
    }

    write_manifest(&dir, &fingerprint).map_err(|e| stage_err("manifest", e))?;
    stages.push(StageReport {
        name: "manifest".into(),
        reused: false,
    });
    Ok(PipelineOutcome {
        dir,
        fingerprint,
        stages,
    })
}

/// Writes `manifest.txt`: a header with the config fingerprint and toolkit
/// version, then one `<sha256>  <filename>` line for every file in the
/// directory (the manifest itself excluded), sorted by name.
pub fn write_manifest(dir: &Path, fingerprint: &str) -> Result<(), std::io::Error> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.txt")
        .collect();
    names.sort();
    let mut out = String::new();
    out.push_str(&format!("# fingerprint={}\n", fingerprint));
    out.push_str(&format!(
        "# toolkit_version={}\n",
        env!("CARGO_PKG_VERSION")
    ));
    for name in names {
        let h = hash_file(&dir.join(&name))?;
        out.push_str(&format!("{}  {}\n", h, name));
    }
    fs::write(dir.join("manifest.txt"), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use tempfile::TempDir;

    /// A tiny deterministic IDX dataset so the full pipeline runs in tests.
    pub(crate) fn write_synthetic_mnist(dir: &Path, train_n: usize, test_n: usize) {
        use std::io::Write;
        let write_pair = |prefix: &str, n: usize, offset: u64| {
            let ip = dir.join(format!("{}-images-idx3-ubyte", prefix));
            let lp = dir.join(format!("{}-labels-idx1-ubyte", prefix));
            let mut f = fs::File::create(&ip).unwrap();
            f.write_all(&2051u32.to_be_bytes()).unwrap();
            f.write_all(&(n as u32).to_be_bytes()).unwrap();
            f.write_all(&8u32.to_be_bytes()).unwrap();
            f.write_all(&8u32.to_be_bytes()).unwrap();
            let mut pixels = Vec::with_capacity(n * 64);
            for i in 0..n {
                let label = (i as u64 + offset) % 10;
                for p in 0..64u64 {
                    // class-dependent blob pattern, learnable by a tiny net
                    let v = ((label * 23 + p * 7) % 97) as u8 + ((i as u64 + p) % 5) as u8;
                    pixels.push(v);
                }
            }
            f.write_all(&pixels).unwrap();
            let mut f = fs::File::create(&lp).unwrap();
            f.write_all(&2049u32.to_be_bytes()).unwrap();
            f.write_all(&(n as u32).to_be_bytes()).unwrap();
            let labels: Vec<u8> = (0..n).map(|i| ((i as u64 + offset) % 10) as u8).collect();
            f.write_all(&labels).unwrap();
        };
        write_pair("train", train_n, 0);
        write_pair("t10k", test_n, 3);
    }

    fn tiny_config(data_dir: &Path, out_dir: &Path) -> ExperimentConfig {
        let text = format!(
            "[dataset]\nname = mnist\nmnist_dir = {}\nvalidation_count = 20\nsplit_seed = 7\n\
             [teacher]\narch = FC16-FC10\nepochs = 2\nlearning_rate = 0.01\nseed = 1\n\
             [student]\narch = FC8-FC10\n\
             [distill]\nsigma = 0.5\nalpha = 0.5\nepochs = 2\nlearning_rate = 0.01\n\
             [run]\nbatch_size = 16\nseeds = 1,2\nout_dir = {}\n",
            data_dir.display(),
            out_dir.display()
        );
        crate::config::parse_config_str(&text).unwrap()
    }

    #[test]
    fn pipeline_runs_and_reruns_idempotently() {
        let data = TempDir::new().unwrap();
        let out = TempDir::new().unwrap();
        write_synthetic_mnist(data.path(), 120, 30);
        let cfg = tiny_config(data.path(), &out.path().join("exp"));
        let first = run_pipeline(&cfg).unwrap();
        assert!(first.stages.iter().all(|s| !s.reused || s.name == "dataset"));
        for f in [
            "teacher.ntck",
            "teacher_metrics.csv",
            "logits.nlgt",
            "student_seed1.ntck",
            "student_seed2.ntck",
            "metrics_seed1.csv",
            "metrics_seed2.csv",
            "manifest.txt",
        ] {
            assert!(first.dir.join(f).exists(), "missing {}", f);
        }
        let before = fs::read(first.dir.join("student_seed1.ntck")).unwrap();
        let second = run_pipeline(&cfg).unwrap();
        for s in &second.stages {
            if s.name.starts_with("teacher")
                || s.name.starts_with("logits")
                || s.name.starts_with("distill")
            {
                assert!(s.reused, "stage {} should be reused", s.name);
            }
        }
        let after = fs::read(second.dir.join("student_seed1.ntck")).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn changed_noise_invalidates_distill_but_not_teacher() {
        let data = TempDir::new().unwrap();
        let out = TempDir::new().unwrap();
        write_synthetic_mnist(data.path(), 80, 20);
        let mut cfg = tiny_config(data.path(), &out.path().join("exp"));
        cfg.seeds = vec![1];
        run_pipeline(&cfg).unwrap();
        cfg.noise.sigma = 0.9;
        let rerun = run_pipeline(&cfg).unwrap();
        let by_name: std::collections::HashMap<_, _> = rerun
            .stages
            .iter()
            .map(|s| (s.name.as_str(), s.reused))
            .collect();
        assert!(by_name["teacher"]);
        assert!(by_name["logits"]);
        assert!(!by_name["distill_seed1"]);
    }

    #[test]
    fn external_teacher_checkpoint_skips_training() {
        let data = TempDir::new().unwrap();
        let out = TempDir::new().unwrap();
        write_synthetic_mnist(data.path(), 80, 20);
        let cfg = tiny_config(data.path(), &out.path().join("a"));
        let first = run_pipeline(&cfg).unwrap();
        let mut cfg2 = tiny_config(data.path(), &out.path().join("b"));
        cfg2.teacher_checkpoint = Some(first.dir.join("teacher.ntck"));
        let second = run_pipeline(&cfg2).unwrap();
        let teacher = second
            .stages
            .iter()
            .find(|s| s.name == "teacher")
            .unwrap();
        assert!(teacher.reused);
    }

    #[test]
    fn manifest_lists_every_file() {
        let data = TempDir::new().unwrap();
        let out = TempDir::new().unwrap();
        write_synthetic_mnist(data.path(), 60, 20);
        let mut cfg = tiny_config(data.path(), &out.path().join("exp"));
        cfg.seeds = vec![1];
        let outcome = run_pipeline(&cfg).unwrap();
        let manifest = fs::read_to_string(outcome.dir.join("manifest.txt")).unwrap();
        let listed: HashSet<String> = manifest
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| l.split_whitespace().nth(1).unwrap().to_string())
            .collect();
        for entry in fs::read_dir(&outcome.dir).unwrap() {
            let name = entry.unwrap().file_name().to_string_lossy().into_owned();
            if name != "manifest.txt" {
                assert!(listed.contains(&name), "manifest misses {}", name);
            }
        }
        assert!(manifest.contains(&format!("# fingerprint={}", outcome.fingerprint)));
    }

    #[test]
    fn missing_data_dir_names_the_stage() {
        let out = TempDir::new().unwrap();
        let cfg = tiny_config(Path::new("/nonexistent-noisykd"), &out.path().join("x"));
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.stage, "dataset");
    }
}
