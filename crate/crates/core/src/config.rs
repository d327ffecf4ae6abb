//! Plain-text experiment configuration.
//!
//! The format is line oriented: `[section]` headers, `key = value` pairs and
//! `#` comments. Unknown keys fail fast, duplicate keys within a section are
//! last-wins with a recorded warning, and every field except the dataset
//! paths has a documented default (see the README defaults table or
//! [`ExperimentConfig::default_for`]).

use crate::arch::parse_arch;
use crate::distill::{NoiseConfig, NoiseSharing, NoiseTarget, SigmaSchedule};
use crate::optim::{OptimizerConfig, OptimizerKind};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown key '{key}' in section [{section}]")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("invalid value for '{key}': {message}")]
    InvalidValue { key: String, message: String },
    #[error("missing required key '{key}'")]
    MissingKey { key: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetName {
    Mnist,
    Cifar10,
}

impl DatasetName {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Cifar10 => "cifar10",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub name: DatasetName,
    /// Directory holding the four raw IDX files.
    pub mnist_dir: Option<PathBuf>,
    /// Directory holding `data_batch_1..5.bin` and `test_batch.bin`.
    pub cifar_dir: Option<PathBuf>,
    pub validation_count: usize,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub teacher_arch: String,
    pub teacher_train: StageTrainConfig,
    pub teacher_seed: u64,
    /// Reuse this checkpoint instead of training the teacher.
    pub teacher_checkpoint: Option<PathBuf>,
    pub student_arch: String,
    pub noise: NoiseConfig,
    pub distill_train: StageTrainConfig,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Grid lists for `sweep`; empty lists fall back to the base values.
    pub grid: GridLists,
    /// Non-fatal notes from parsing (duplicate keys).
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridLists {
    pub sigmas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub dropouts: Vec<f64>,
    pub targets: Vec<NoiseTarget>,
}

pub const MNIST_TEACHER_ARCH: &str =
    "[C5(S1P0)@20-MP2(S2)]-[C5(S1P0)@50-MP2(S2)]-FC500-FC10";
pub const MNIST_STUDENT_ARCH: &str = "FC800-FC800-FC10";

impl ExperimentConfig {
    /// The documented defaults; dataset directories stay unset.
    pub fn default_for(name: DatasetName) -> Self {
        ExperimentConfig {
            dataset: DatasetConfig {
                name,
                mnist_dir: None,
                cifar_dir: None,
                validation_count: 10_000,
                split_seed: 1,
            },
            teacher_arch: MNIST_TEACHER_ARCH.to_string(),
            teacher_train: StageTrainConfig {
                epochs: 15,
                patience: 5,
                optimizer: OptimizerConfig::adam(1e-3),
            },
            teacher_seed: 1,
            teacher_checkpoint: None,
            student_arch: MNIST_STUDENT_ARCH.to_string(),
            noise: NoiseConfig::default(),
            distill_train: StageTrainConfig {
                epochs: 15,
                patience: 5,
                optimizer: OptimizerConfig::adam(1e-3),
            },
            batch_size: 64,
            seeds: vec![1],
            out_dir: PathBuf::from("runs"),
            grid: GridLists::default(),
            warnings: Vec::new(),
        }
    }

    /// Stable digest of the resolved configuration. Key order and comments
    /// in the source file cannot affect it; two files that resolve to the
    /// same effective settings share a fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset.name={}", self.dataset.name.as_str());
        let _ = writeln!(s, "dataset.mnist_dir={}",
            self.dataset
                .mnist_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        );
        let _ = writeln!(s, "dataset.cifar_dir={}",
            self.dataset
                .cifar_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        );
        let _ = writeln!(s, "dataset.validation_count={}",
            self.dataset.validation_count
        );
        let _ = writeln!(s, "dataset.split_seed={}", self.dataset.split_seed);
        let _ = writeln!(s, "teacher.arch={}", self.teacher_arch);
        let _ = writeln!(s, "teacher.seed={}", self.teacher_seed);
        let _ = writeln!(s, "teacher.checkpoint={}",
            self.teacher_checkpoint
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        );
        append_stage(&mut s, "teacher", &self.teacher_train);
        let _ = writeln!(s, "student.arch={}", self.student_arch);
        append_noise(&mut s, &self.noise);
        append_stage(&mut s, "distill", &self.distill_train);
        let _ = writeln!(s, "run.batch_size={}", self.batch_size);
        let seeds: Vec<String> = self.seeds.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "run.seeds={}", seeds.join(","));
        let _ = writeln!(s, "run.out_dir={}", self.out_dir.display());
        let _ = writeln!(s, "grid.sigmas={:?}", self.grid.sigmas);
        let _ = writeln!(s, "grid.alphas={:?}", self.grid.alphas);
        let _ = writeln!(s, "grid.dropouts={:?}", self.grid.dropouts);
        let targets: Vec<&str> = self.grid.targets.iter().map(|t| target_str(*t)).collect();
        let _ = writeln!(s, "grid.targets={}", targets.join(","));
        hex_digest(s.as_bytes())
    }
}

fn append_stage(s: &mut String, prefix: &str, t: &StageTrainConfig) {
    let _ = writeln!(s, "{}.epochs={}", prefix, t.epochs);
    let _ = writeln!(s, "{}.patience={}", prefix, t.patience);
    let kind = match t.optimizer.kind {
        OptimizerKind::Adam => "adam",
        OptimizerKind::Sgd => "sgd",
    };
    let _ = writeln!(s, "{}.optimizer={}", prefix, kind);
    let _ = writeln!(s, "{}.learning_rate={}", prefix, t.optimizer.learning_rate);
    let _ = writeln!(s, "{}.beta1={}", prefix, t.optimizer.beta1);
    let _ = writeln!(s, "{}.beta2={}", prefix, t.optimizer.beta2);
    let _ = writeln!(s, "{}.epsilon={}", prefix, t.optimizer.epsilon);
    let _ = writeln!(s, "{}.weight_decay={}", prefix, t.optimizer.weight_decay);
}

fn append_noise(s: &mut String, n: &NoiseConfig) {
    let _ = writeln!(s, "distill.sigma={}", n.sigma);
    let _ = writeln!(s, "distill.alpha={}", n.alpha);
    let _ = writeln!(s, "distill.target={}", target_str(n.target));
    let sharing = match n.sharing {
        NoiseSharing::PerSample => "sample",
        NoiseSharing::PerBatch => "batch",
    };
    let _ = writeln!(s, "distill.sharing={}", sharing);
    match n.sigma_schedule {
        SigmaSchedule::Fixed => {
            let _ = writeln!(s, "distill.sigma_random=");
        }
        SigmaSchedule::UniformRandom { lo, hi } => {
            let _ = writeln!(s, "distill.sigma_random={},{}", lo, hi);
        }
    }
}

fn target_str(t: NoiseTarget) -> &'static str {
    match t {
        NoiseTarget::Teacher => "teacher",
        NoiseTarget::Student => "student",
        NoiseTarget::None => "none",
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}

/// Recognized `(section, key)` pairs.
const KNOWN_KEYS: &[(&str, &str)] = &[
    ("dataset", "name"),
    ("dataset", "mnist_dir"),
    ("dataset", "cifar_dir"),
    ("dataset", "validation_count"),
    ("dataset", "split_seed"),
    ("teacher", "arch"),
    ("teacher", "epochs"),
    ("teacher", "patience"),
    ("teacher", "optimizer"),
    ("teacher", "learning_rate"),
    ("teacher", "beta1"),
    ("teacher", "beta2"),
    ("teacher", "epsilon"),
    ("teacher", "weight_decay"),
    ("teacher", "seed"),
    ("teacher", "checkpoint"),
    ("student", "arch"),
    ("distill", "sigma"),
    ("distill", "alpha"),
    ("distill", "target"),
    ("distill", "sharing"),
    ("distill", "sigma_random"),
    ("distill", "epochs"),
    ("distill", "patience"),
    ("distill", "optimizer"),
    ("distill", "learning_rate"),
    ("distill", "beta1"),
    ("distill", "beta2"),
    ("distill", "epsilon"),
    ("distill", "weight_decay"),
    ("run", "batch_size"),
    ("run", "seeds"),
    ("run", "out_dir"),
    ("grid", "sigmas"),
    ("grid", "alphas"),
    ("grid", "dropouts"),
    ("grid", "targets"),
];

struct RawConfig {
    values: BTreeMap<(String, String), String>,
    warnings: Vec<String>,
}

fn parse_raw(text: &str) -> Result<RawConfig, ConfigError> {
    let mut values = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut section = String::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Parse {
                line: line_no,
                message: "unterminated section header".to_string(),
            })?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
            line: line_no,
            message: format!("expected 'key = value', found '{}'", line),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !KNOWN_KEYS
            .iter()
            .any(|&(s, k)| s == section && k == key)
        {
            return Err(ConfigError::UnknownKey {
                line: line_no,
                section: section.clone(),
                key,
            });
        }
        if values
            .insert((section.clone(), key.clone()), value)
            .is_some()
        {
            warnings.push(format!(
                "line {}: duplicate key '{}' in section [{}]; last value wins",
                line_no, key, section
            ));
        }
    }
    Ok(RawConfig { values, warnings })
}

impl RawConfig {
    fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .map(|s| s.as_str())
    }

    fn parse_with<T, F>(&self, section: &str, key: &str, default: T, f: F) -> Result<T, ConfigError>
    where
        F: FnOnce(&str) -> Result<T, String>,
    {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => f(v).map_err(|message| ConfigError::InvalidValue {
                key: format!("{}.{}", section, key),
                message,
            }),
        }
    }
}

fn parse_f64(v: &str) -> Result<f64, String> {
    v.parse::<f64>().map_err(|_| format!("'{}' is not a number", v))
}

fn parse_usize(v: &str) -> Result<usize, String> {
    v.parse::<usize>()
        .map_err(|_| format!("'{}' is not a non-negative integer", v))
}

fn parse_u64(v: &str) -> Result<u64, String> {
    v.parse::<u64>()
        .map_err(|_| format!("'{}' is not a non-negative integer", v))
}

fn parse_list<T, F: Fn(&str) -> Result<T, String>>(v: &str, f: F) -> Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| f(p.trim())).collect()
}

fn parse_target(v: &str) -> Result<NoiseTarget, String> {
    match v {
        "teacher" => Ok(NoiseTarget::Teacher),
        "student" => Ok(NoiseTarget::Student),
        "none" => Ok(NoiseTarget::None),
        other => Err(format!(
            "'{}' is not a noise target (teacher|student|none)",
            other
        )),
    }
}

fn parse_stage(
    raw: &RawConfig,
    section: &str,
    defaults: &StageTrainConfig,
) -> Result<StageTrainConfig, ConfigError> {
    let epochs = raw.parse_with(section, "epochs", defaults.epochs, parse_usize)?;
    let patience = raw.parse_with(section, "patience", defaults.patience, |v| {
        parse_usize(v).and_then(|p| {
            if p == 0 {
                Err("patience must be at least 1".into())
            } else {
                Ok(p)
            }
        })
    })?;
    let kind = raw.parse_with(section, "optimizer", defaults.optimizer.kind, |v| match v {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" => Ok(OptimizerKind::Sgd),
        other => Err(format!("'{}' is not an optimizer (adam|sgd)", other)),
    })?;
    let learning_rate = raw.parse_with(
        section,
        "learning_rate",
        defaults.optimizer.learning_rate,
        |v| {
            parse_f64(v).and_then(|x| {
                if x > 0.0 {
                    Ok(x)
                } else {
                    Err("learning rate must be positive".into())
                }
            })
        },
    )?;
    let beta1 = raw.parse_with(section, "beta1", defaults.optimizer.beta1, |v| {
        parse_f64(v).and_then(in_open_unit)
    })?;
    let beta2 = raw.parse_with(section, "beta2", defaults.optimizer.beta2, |v| {
        parse_f64(v).and_then(in_open_unit)
    })?;
    let epsilon = raw.parse_with(section, "epsilon", defaults.optimizer.epsilon, |v| {
        parse_f64(v).and_then(|x| {
            if x > 0.0 {
                Ok(x)
            } else {
                Err("epsilon must be positive".into())
            }
        })
    })?;
    let weight_decay = raw.parse_with(
        section,
        "weight_decay",
        defaults.optimizer.weight_decay,
        |v| {
            parse_f64(v).and_then(|x| {
                if x >= 0.0 {
                    Ok(x)
                } else {
                    Err("weight decay must be non-negative".into())
                }
            })
        },
    )?;
    Ok(StageTrainConfig {
        epochs,
        patience,
        optimizer: OptimizerConfig {
            kind,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        },
    })
}

fn in_open_unit(x: f64) -> Result<f64, String> {
    if x > 0.0 && x < 1.0 {
        Ok(x)
    } else {
        Err("value must lie strictly between 0 and 1".into())
    }
}

/// Parses a configuration file, applying defaults for every absent key.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let raw = parse_raw(text)?;
    let name = raw.parse_with("dataset", "name", DatasetName::Mnist, |v| match v {
        "mnist" => Ok(DatasetName::Mnist),
        "cifar10" => Ok(DatasetName::Cifar10),
        other => Err(format!("'{}' is not a dataset (mnist|cifar10)", other)),
    })?;
    let mut cfg = ExperimentConfig::default_for(name);
    cfg.warnings = raw.warnings.clone();
    cfg.dataset.mnist_dir = raw
        .get("dataset", "mnist_dir")
        .filter(|v| !v.is_empty())
        .map(PathBuf::from);
    cfg.dataset.cifar_dir = raw
        .get("dataset", "cifar_dir")
        .filter(|v| !v.is_empty())
        .map(PathBuf::from);
    cfg.dataset.validation_count = raw.parse_with(
        "dataset",
        "validation_count",
        cfg.dataset.validation_count,
        parse_usize,
    )?;
    cfg.dataset.split_seed =
        raw.parse_with("dataset", "split_seed", cfg.dataset.split_seed, parse_u64)?;

    let check_arch = |key: &str, v: &str| -> Result<String, ConfigError> {
        parse_arch(v)
            .map(|_| v.to_string())
            .map_err(|e| ConfigError::InvalidValue {
                key: key.to_string(),
                message: e.to_string(),
            })
    };
    if let Some(v) = raw.get("teacher", "arch") {
        cfg.teacher_arch = check_arch("teacher.arch", v)?;
    }
    if let Some(v) = raw.get("student", "arch") {
        cfg.student_arch = check_arch("student.arch", v)?;
    }
    cfg.teacher_train = parse_stage(&raw, "teacher", &cfg.teacher_train)?;
    cfg.teacher_seed = raw.parse_with("teacher", "seed", cfg.teacher_seed, parse_u64)?;
    cfg.teacher_checkpoint = raw
        .get("teacher", "checkpoint")
        .filter(|v| !v.is_empty())
        .map(PathBuf::from);
    cfg.distill_train = parse_stage(&raw, "distill", &cfg.distill_train)?;

    cfg.noise.sigma = raw.parse_with("distill", "sigma", cfg.noise.sigma, |v| {
        parse_f64(v).and_then(|x| {
            if x >= 0.0 {
                Ok(x)
            } else {
                Err("sigma must be non-negative".into())
            }
        })
    })?;
    cfg.noise.alpha = raw.parse_with("distill", "alpha", cfg.noise.alpha, |v| {
        parse_f64(v).and_then(|x| {
            if (0.0..=1.0).contains(&x) {
                Ok(x)
            } else {
                Err("alpha must lie in [0, 1]".into())
            }
        })
    })?;
    cfg.noise.target = raw.parse_with("distill", "target", cfg.noise.target, parse_target)?;
    cfg.noise.sharing = raw.parse_with("distill", "sharing", cfg.noise.sharing, |v| match v {
        "sample" => Ok(NoiseSharing::PerSample),
        "batch" => Ok(NoiseSharing::PerBatch),
        other => Err(format!("'{}' is not a sharing mode (sample|batch)", other)),
    })?;
    cfg.noise.sigma_schedule = raw.parse_with(
        "distill",
        "sigma_random",
        cfg.noise.sigma_schedule,
        |v| {
            if v.is_empty() {
                return Ok(SigmaSchedule::Fixed);
            }
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return Err(format!("expected 'lo,hi', found '{}'", v));
            }
            let lo = parse_f64(parts[0])?;
            let hi = parse_f64(parts[1])?;
            if !(lo >= 0.0 && hi >= lo) {
                return Err("range must satisfy 0 <= lo <= hi".into());
            }
            Ok(SigmaSchedule::UniformRandom { lo, hi })
        },
    )?;

    cfg.batch_size = raw.parse_with("run", "batch_size", cfg.batch_size, |v| {
        parse_usize(v).and_then(|b| {
            if b >= 1 {
                Ok(b)
            } else {
                Err("batch size must be at least 1".into())
            }
        })
    })?;
    cfg.seeds = raw.parse_with("run", "seeds", cfg.seeds.clone(), |v| {
        parse_list(v, parse_u64).and_then(|s| {
            if s.is_empty() {
                Err("at least one seed is required".into())
            } else {
                Ok(s)
            }
        })
    })?;
    if let Some(v) = raw.get("run", "out_dir") {
        cfg.out_dir = PathBuf::from(v);
    }
    cfg.grid.sigmas = raw.parse_with("grid", "sigmas", Vec::new(), |v| parse_list(v, parse_f64))?;
    cfg.grid.alphas = raw.parse_with("grid", "alphas", Vec::new(), |v| parse_list(v, parse_f64))?;
    cfg.grid.dropouts =
        raw.parse_with("grid", "dropouts", Vec::new(), |v| parse_list(v, parse_f64))?;
    cfg.grid.targets = raw.parse_with("grid", "targets", Vec::new(), |v| {
        parse_list(v, parse_target)
    })?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_applies_documented_defaults() {
        let cfg = parse_config_str("[dataset]\nname = mnist\nmnist_dir = data/mnist\n").unwrap();
        assert_eq!(cfg.noise.sigma, 0.5);
        assert_eq!(cfg.noise.alpha, 0.5);
        assert_eq!(cfg.noise.target, NoiseTarget::Teacher);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.seeds, vec![1]);
        assert_eq!(cfg.teacher_arch, MNIST_TEACHER_ARCH);
        assert_eq!(cfg.student_arch, MNIST_STUDENT_ARCH);
        assert!(cfg.warnings.is_empty());
    }

    #[test]
    fn unknown_key_fails_fast_with_line_number() {
        let err = parse_config_str("[dataset]\nname = mnist\nnmae = typo\n").unwrap_err();
        match err {
            ConfigError::UnknownKey { line, key, .. } => {
                assert_eq!(line, 3);
                assert_eq!(key, "nmae");
            }
            other => panic!("expected UnknownKey, got {}", other),
        }
    }

    #[test]
    fn duplicate_key_is_last_wins_with_warning() {
        let cfg =
            parse_config_str("[distill]\nsigma = 0.1\nsigma = 0.9\n").unwrap();
        assert_eq!(cfg.noise.sigma, 0.9);
        assert_eq!(cfg.warnings.len(), 1);
        assert!(cfg.warnings[0].contains("duplicate key 'sigma'"));
    }

    #[test]
    fn out_of_range_alpha_rejected() {
        let err = parse_config_str("[distill]\nalpha = 1.5\n").unwrap_err();
        assert!(matches!(err, ConfigError::InvalidValue { .. }));
    }

    #[test]
    fn malformed_arch_rejected() {
        let err = parse_config_str("[student]\narch = FC0\n").unwrap_err();
        assert!(matches!(err, ConfigError::InvalidValue { key, .. } if key == "student.arch"));
    }

    #[test]
    fn fingerprint_ignores_ordering_and_comments() {
        let a = parse_config_str(
            "# experiment\n[distill]\nsigma = 0.3\nalpha = 0.2\n[run]\nbatch_size = 32\n",
        )
        .unwrap();
        let b = parse_config_str(
            "[run]\nbatch_size = 32 # trailing comment\n[distill]\nalpha = 0.2\nsigma = 0.3\n",
        )
        .unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = parse_config_str("[distill]\nsigma = 0.31\nalpha = 0.2\n[run]\nbatch_size = 32\n")
            .unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn sigma_random_range_parses() {
        let cfg = parse_config_str("[distill]\nsigma_random = 0.01,1\n").unwrap();
        assert_eq!(
            cfg.noise.sigma_schedule,
            SigmaSchedule::UniformRandom { lo: 0.01, hi: 1.0 }
        );
        assert!(parse_config_str("[distill]\nsigma_random = 1,0.5\n").is_err());
    }

    #[test]
    fn grid_lists_parse() {
        let cfg = parse_config_str(
            "[grid]\nsigmas = 0.1, 0.2, 0.3\nalphas = 0.5\ntargets = teacher,none\n",
        )
        .unwrap();
        assert_eq!(cfg.grid.sigmas, vec![0.1, 0.2, 0.3]);
        assert_eq!(
            cfg.grid.targets,
            vec![NoiseTarget::Teacher, NoiseTarget::None]
        );
    }

    #[test]
    fn section_header_must_close() {
        assert!(matches!(
            parse_config_str("[dataset\nname = mnist\n"),
            Err(ConfigError::Parse { line: 1, .. })
        ));
    }
}
