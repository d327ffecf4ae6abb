//! Model evaluation, the noise-regularizer decomposition, and sweeps.

use crate::arch::{ArchSpec, LayerSpec};
use crate::data::LabeledSet;
use crate::distill::{
    distill, select_mask, DistillConfig, NoiseConfig, NoiseSharing, NoiseTarget,
};
use crate::net::{EngineError, Network, NetworkParams};
use crate::teacher::LogitRecordSet;
use crate::tensor::Tensor;
use crate::trainer::TrainError;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Batch size used for pure evaluation passes. Evaluation is mode-free and
/// sample-independent, so the grouping does not affect results.
pub const EVAL_BATCH: usize = 256;

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_class(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Classification error rate of `params` on `test`: misclassified / total.
pub fn evaluate(
    net: &Network,
    params: &NetworkParams,
    test: &LabeledSet,
) -> Result<f64, EngineError> {
    if test.is_empty() {
        return Err(EngineError::ShapeMismatch("empty test set".into()));
    }
    let mut wrong = 0usize;
    let indices: Vec<usize> = (0..test.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (batch, labels) = test.gather(chunk);
        let logits = net.eval_logits(params, &batch)?;
        for (i, &label) in labels.iter().enumerate() {
            if argmax_class(logits.row(i)) != label as usize {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64 / test.len() as f64)
}

/// The three quantities of the noise-regularizer identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// L2 logit loss against the clean targets.
    pub loss_clean: f64,
    /// The noise-induced regularization term.
    pub reg_term: f64,
    /// L2 logit loss against the perturbed targets; equals
    /// `loss_clean + reg_term` up to floating-point tolerance.
    pub loss_noisy: f64,
}

/// Decomposes the perturbed-target loss into the clean loss plus the exact
/// noise regularizer:
///
/// `E_R = (1/2T) * sum_i sel(i) * ( ||xi_i . z_i||^2 + 2 <z_i - g_i, xi_i . z_i> )`
///
/// where `.` is the elementwise product. The identity
/// `loss_noisy = loss_clean + E_R` holds exactly for every draw, not just in
/// expectation.
pub fn loss_decomposition(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    noise: &[Vec<f64>],
    mask: &[bool],
    batch_size: usize,
) -> Result<LossBreakdown, EngineError> {
    let shape = student_logits.shape();
    if shape != teacher_logits.shape() || shape.len() != 2 {
        return Err(EngineError::ShapeMismatch(format!(
            "logit batches {:?} vs {:?}",
            shape,
            teacher_logits.shape()
        )));
    }
    let (rows, classes) = (shape[0], shape[1]);
    if noise.len() != rows || mask.len() != rows {
        return Err(EngineError::ShapeMismatch(
            "noise/mask length does not match the batch".into(),
        ));
    }
    if batch_size == 0 {
        return Err(EngineError::ShapeMismatch("batch size is zero".into()));
    }
    let scale = 1.0 / (2.0 * batch_size as f64);
    let mut clean = 0.0;
    let mut noisy = 0.0;
    let mut reg = 0.0;
    for i in 0..rows {
        let g = student_logits.row(i);
        let z = teacher_logits.row(i);
        let xi = &noise[i];
        if mask[i] && xi.len() != classes {
            return Err(EngineError::ShapeMismatch(format!(
                "noise vector for sample {} has {} entries, expected {}",
                i,
                xi.len(),
                classes
            )));
        }
        for j in 0..classes {
            let diff = g[j] - z[j];
            clean += diff * diff;
            if mask[i] {
                let xz = xi[j] * z[j];
                let noisy_diff = g[j] - (z[j] + xz);
                noisy += noisy_diff * noisy_diff;
                reg += xz * xz + 2.0 * (z[j] - g[j]) * xz;
            } else {
                noisy += diff * diff;
            }
        }
    }
    Ok(LossBreakdown {
        loss_clean: scale * clean,
        reg_term: scale * reg,
        loss_noisy: scale * noisy,
    })
}

/// Monte Carlo estimate of the expected regularizer over the noise and the
/// selection mask. Converges to `(alpha * sigma^2 / 2T) * sum_i ||z_i||^2`,
/// since the cross term has zero mean; the estimate fixes the student logits
/// at zero, which leaves the limit unchanged.
pub fn expected_regularizer(
    teacher_logits: &Tensor,
    sigma: f64,
    alpha: f64,
    batch_size: usize,
    n_draws: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, EngineError> {
    let shape = teacher_logits.shape();
    if shape.len() != 2 || batch_size == 0 {
        return Err(EngineError::ShapeMismatch(
            "expected a (rows, classes) logit batch and a positive batch size".into(),
        ));
    }
    if n_draws == 0 {
        return Err(EngineError::ShapeMismatch("n_draws must be positive".into()));
    }
    let (rows, classes) = (shape[0], shape[1]);
    let scale = 1.0 / (2.0 * batch_size as f64);
    let mut total = 0.0;
    for _ in 0..n_draws {
        let mask = select_mask(rows, alpha, rng);
        let mut reg = 0.0;
        for (i, &sel) in mask.iter().enumerate() {
            if !sel {
                continue;
            }
            let z = teacher_logits.row(i);
            for &zj in z.iter().take(classes) {
                let xz = sigma * rng.sample::<f64, _>(StandardNormal) * zj;
                reg += xz * xz + 2.0 * zj * xz;
            }
        }
        total += scale * reg;
    }
    Ok(total / n_draws as f64)
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// A grid of noise settings crossed with seeds, run against one fixed base
/// configuration. Every sweep also runs the plain logit-regression baseline
/// over the same seeds; improvements are reported against its seed mean.
#[derive(Debug, Clone)]
pub struct SweepGrid {
    pub sigmas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Dropout ratios for the student; `0` means no dropout layer. Non-zero
    /// ratios insert one dropout layer after the student's first fully
    /// connected layer.
    pub dropouts: Vec<f64>,
    pub targets: Vec<NoiseTarget>,
    pub seeds: Vec<u64>,
    pub base: DistillConfig,
}

/// One line of the sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub sigma: f64,
    pub alpha: f64,
    pub target: NoiseTarget,
    pub sharing: NoiseSharing,
    pub dropout: f64,
    /// Seed for data rows; `"mean"` / `"std"` markers use the aggregate rows.
    pub seed: SweepSeed,
    pub test_error: f64,
    pub improvement_pct: f64,
    pub epochs: usize,
    pub wall_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepSeed {
    Value(u64),
    Mean,
    Std,
}

impl std::fmt::Display for SweepSeed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepSeed::Value(s) => write!(f, "{}", s),
            SweepSeed::Mean => write!(f, "mean"),
            SweepSeed::Std => write!(f, "std"),
        }
    }
}

fn target_name(t: NoiseTarget) -> &'static str {
    match t {
        NoiseTarget::Teacher => "teacher",
        NoiseTarget::Student => "student",
        NoiseTarget::None => "none",
    }
}

fn sharing_name(s: NoiseSharing) -> &'static str {
    match s {
        NoiseSharing::PerSample => "sample",
        NoiseSharing::PerBatch => "batch",
    }
}

pub const SWEEP_CSV_HEADER: &str =
    "sigma,alpha,target,sharing,dropout,seed,test_error,improvement_pct,epochs,wall_s";

/// Renders rows in the stable sweep schema. Numbers use the decimal point
/// and no grouping regardless of locale.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.sigma,
            r.alpha,
            target_name(r.target),
            sharing_name(r.sharing),
            r.dropout,
            r.seed,
            r.test_error,
            r.improvement_pct,
            r.epochs,
            r.wall_s
        ));
    }
    out
}

/// Inserts a dropout layer after the first fully connected layer.
fn with_dropout(student: &ArchSpec, ratio: f64) -> Result<ArchSpec, TrainError> {
    let pos = student
        .layers
        .iter()
        .position(|l| matches!(l, LayerSpec::FullyConnected { .. }))
        .ok_or_else(|| {
            TrainError::Config("dropout sweep requires a fully connected student layer".into())
        })?;
    let mut layers = student.layers.clone();
    layers.insert(pos + 1, LayerSpec::Dropout { drop_prob: ratio });
    Ok(ArchSpec::new(layers))
}

struct SweepPoint {
    sigma: f64,
    alpha: f64,
    target: NoiseTarget,
    dropout: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_point(
    grid: &SweepGrid,
    point: &SweepPoint,
    logit_set: &LogitRecordSet,
    train: &LabeledSet,
    val: Option<&LabeledSet>,
    test: &LabeledSet,
    baseline_mean: Option<f64>,
    rows: &mut Vec<SweepRow>,
) -> Result<Vec<f64>, TrainError> {
    let student = if point.dropout > 0.0 {
        with_dropout(&grid.base.student, point.dropout)?
    } else {
        grid.base.student.clone()
    };
    let mut errors = Vec::with_capacity(grid.seeds.len());
    for &seed in &grid.seeds {
        let mut cfg = grid.base.clone();
        cfg.student = student.clone();
        cfg.noise = NoiseConfig {
            sigma: point.sigma,
            alpha: point.alpha,
            target: point.target,
            ..grid.base.noise
        };
        cfg.train.seed = seed;
        let started = std::time::Instant::now();
        let outcome = distill(&cfg, logit_set, train, val, Some(test));
        let wall_s = started.elapsed().as_secs_f64();
        let row = match outcome {
            Ok((_, metrics)) => {
                let err = metrics.test_error.expect("test set was provided");
                errors.push(err);
                SweepRow {
                    sigma: point.sigma,
                    alpha: point.alpha,
                    target: point.target,
                    sharing: grid.base.noise.sharing,
                    dropout: point.dropout,
                    seed: SweepSeed::Value(seed),
                    test_error: err,
                    improvement_pct: baseline_mean
                        .map(|b| (b - err) / b * 100.0)
                        .unwrap_or(f64::NAN),
                    epochs: metrics.epoch_train_loss.len(),
                    wall_s,
                }
            }
            // a failed run is recorded in-row and does not abort the sweep
            Err(_) => SweepRow {
                sigma: point.sigma,
                alpha: point.alpha,
                target: point.target,
                sharing: grid.base.noise.sharing,
                dropout: point.dropout,
                seed: SweepSeed::Value(seed),
                test_error: f64::NAN,
                improvement_pct: f64::NAN,
                epochs: 0,
                wall_s,
            },
        };
        rows.push(row);
    }
    if grid.seeds.len() > 1 {
        let n = errors.len().max(1) as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let var = if errors.len() > 1 {
            errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1.0)
        } else {
            f64::NAN
        };
        for (marker, value) in [(SweepSeed::Mean, mean), (SweepSeed::Std, var.sqrt())] {
            rows.push(SweepRow {
                sigma: point.sigma,
                alpha: point.alpha,
                target: point.target,
                sharing: grid.base.noise.sharing,
                dropout: point.dropout,
                seed: marker,
                test_error: value,
                improvement_pct: if marker == SweepSeed::Mean {
                    baseline_mean
                        .map(|b| (b - value) / b * 100.0)
                        .unwrap_or(f64::NAN)
                } else {
                    f64::NAN
                },
                epochs: 0,
                wall_s: 0.0,
            });
        }
    }
    Ok(errors)
}

/// Runs the baseline and every grid point, returning the table rows.
///
/// The baseline (noise target `None`, no dropout) runs first over the same
/// seeds, printed with `sigma = 0, alpha = 0`; per-row improvements are
/// computed against its seed-mean test error.
pub fn run_sweep(
    grid: &SweepGrid,
    logit_set: &LogitRecordSet,
    train: &LabeledSet,
    val: Option<&LabeledSet>,
    test: &LabeledSet,
) -> Result<Vec<SweepRow>, TrainError> {
    if grid.seeds.is_empty() {
        return Err(TrainError::Config("sweep needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    let baseline_point = SweepPoint {
        sigma: 0.0,
        alpha: 0.0,
        target: NoiseTarget::None,
        dropout: 0.0,
    };
    let baseline_errors = run_point(
        grid,
        &baseline_point,
        logit_set,
        train,
        val,
        test,
        None,
        &mut rows,
    )?;
    let baseline_mean = if baseline_errors.is_empty() {
        None
    } else {
        Some(baseline_errors.iter().sum::<f64>() / baseline_errors.len() as f64)
    };
    // improvement of the baseline against itself is zero by definition
    for row in rows.iter_mut() {
        if let (SweepSeed::Mean, Some(b)) = (row.seed, baseline_mean) {
            row.improvement_pct = (b - row.test_error) / b * 100.0;
        }
    }
    for &dropout in &grid.dropouts {
        for &target in &grid.targets {
            for &sigma in &grid.sigmas {
                for &alpha in &grid.alphas {
                    let point = SweepPoint {
                        sigma,
                        alpha,
                        target,
                        dropout,
                    };
                    run_point(
                        grid, &point, logit_set, train, val, test, baseline_mean, &mut rows,
                    )?;
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::parse_arch;
    use crate::net::LayerParams;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_class(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax_class(&[1.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn zero_params_on_balanced_set_give_expected_error() {
        // all-zero logits predict class 0 under the tie rule
        let net = Network::new(parse_arch("FC10").unwrap(), (1, 1, 4)).unwrap();
        let params = {
            let mut rng = crate::rng::stream_rng(0, crate::rng::Stream::Init);
            net.init_params(&mut rng).zeros_like()
        };
        let n = 100;
        let set = LabeledSet {
            images: Tensor::zeros(&[n, 4, 1, 1]),
            labels: (0..n).map(|i| (i % 10) as u8).collect(),
            name: "balanced".into(),
        };
        let err = evaluate(&net, &params, &set).unwrap();
        assert_eq!(err, 0.9);
    }

    #[test]
    fn evaluate_matches_hand_counted_error_rate() {
        // identity weights make the prediction equal argmax of the input
        let net = Network::new(parse_arch("FC10").unwrap(), (1, 1, 10)).unwrap();
        let mut params = {
            let mut rng = crate::rng::stream_rng(0, crate::rng::Stream::Init);
            net.init_params(&mut rng)
        };
        if let LayerParams::Fc { weight, bias } = &mut params.layers[0] {
            weight.data_mut().fill(0.0);
            bias.data_mut().fill(0.0);
            for j in 0..10 {
                weight.data_mut()[j * 10 + j] = 1.0;
            }
        }
        let total = 10_000usize;
        let wrong = 97usize;
        let mut data = vec![0.0; total * 10];
        let mut labels = vec![0u8; total];
        for i in 0..total {
            let predicted = i % 10;
            data[i * 10 + predicted] = 1.0;
            labels[i] = if i < wrong {
                ((predicted + 1) % 10) as u8
            } else {
                predicted as u8
            };
        }
        let set = LabeledSet {
            images: Tensor::from_vec(&[total, 10, 1, 1], data).unwrap(),
            labels,
            name: "crafted".into(),
        };
        let err = evaluate(&net, &params, &set).unwrap();
        assert_eq!(err, 0.0097);
    }

    #[test]
    fn evaluate_rejects_empty_set() {
        let net = Network::new(parse_arch("FC10").unwrap(), (1, 1, 4)).unwrap();
        let params = net.init_params(&mut crate::rng::stream_rng(0, crate::rng::Stream::Init));
        let set = LabeledSet {
            images: Tensor::zeros(&[0, 4, 1, 1]),
            labels: vec![],
            name: "empty".into(),
        };
        assert!(evaluate(&net, &params, &set).is_err());
    }

    #[test]
    fn evaluate_is_permutation_invariant() {
        let net = Network::new(parse_arch("FC10").unwrap(), (1, 1, 6)).unwrap();
        let params = net.init_params(&mut crate::rng::stream_rng(5, crate::rng::Stream::Init));
        let n = 50;
        let data: Vec<f64> = (0..n * 6).map(|i| ((i * 13 % 31) as f64) / 31.0).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i * 7 % 10) as u8).collect();
        let set = LabeledSet {
            images: Tensor::from_vec(&[n, 6, 1, 1], data.clone()).unwrap(),
            labels: labels.clone(),
            name: "a".into(),
        };
        let perm: Vec<usize> = (0..n).rev().collect();
        let (images, labels_p) = set.gather(&perm);
        let permuted = LabeledSet {
            images,
            labels: labels_p,
            name: "b".into(),
        };
        let e1 = evaluate(&net, &params, &set).unwrap();
        let e2 = evaluate(&net, &params, &permuted).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn decomposition_with_zero_noise_collapses() {
        let g = Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.0, -2.0]).unwrap();
        let z = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 1.5, -0.5, 2.0, 0.0]).unwrap();
        let noise = vec![vec![0.0; 3]; 2];
        let b = loss_decomposition(&g, &z, &noise, &[true, true], 2).unwrap();
        assert_eq!(b.reg_term, 0.0);
        assert_eq!(b.loss_noisy, b.loss_clean);
    }

    #[test]
    fn decomposition_at_matching_logits_is_pure_noise_energy() {
        let z = Tensor::from_vec(&[1, 2], vec![2.0, -1.0]).unwrap();
        let noise = vec![vec![0.5, 0.5]];
        let b = loss_decomposition(&z, &z, &noise, &[true], 1).unwrap();
        assert_eq!(b.loss_clean, 0.0);
        // (1/2) * ||xi . z||^2 = ((1.0)^2 + (-0.5)^2) / 2 = 0.625
        assert!((b.reg_term - 0.625).abs() < 1e-15);
        assert!((b.loss_noisy - 0.625).abs() < 1e-15);
    }

    #[test]
    fn decomposition_identity_on_random_instances() {
        let mut rng = crate::rng::stream_rng(31, crate::rng::Stream::Noise);
        use rand::Rng;
        for _ in 0..200 {
            let rows = rng.gen_range(1..6);
            let classes = rng.gen_range(1..8);
            let t = rng.gen_range(1..10);
            let gen = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()
            };
            let g = Tensor::from_vec(&[rows, classes], gen(&mut rng, rows * classes)).unwrap();
            let z = Tensor::from_vec(&[rows, classes], gen(&mut rng, rows * classes)).unwrap();
            let mask: Vec<bool> = (0..rows).map(|_| rng.gen::<bool>()).collect();
            let noise: Vec<Vec<f64>> = mask
                .iter()
                .map(|&sel| if sel { gen(&mut rng, classes) } else { vec![] })
                .collect();
            let b = loss_decomposition(&g, &z, &noise, &mask, t).unwrap();
            let residual = (b.loss_noisy - b.loss_clean - b.reg_term).abs();
            assert!(
                residual <= 1e-9 * (1.0 + b.loss_noisy.abs()),
                "residual {}",
                residual
            );
        }
    }

    #[test]
    fn expected_regularizer_zero_sigma_is_exactly_zero() {
        let z = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, -1.0, 0.5, -2.0, 3.0]).unwrap();
        let mut rng = crate::rng::stream_rng(1, crate::rng::Stream::Noise);
        let est = expected_regularizer(&z, 0.0, 1.0, 2, 100, &mut rng).unwrap();
        assert_eq!(est, 0.0);
    }

    #[test]
    fn expected_regularizer_matches_analytic_limit() {
        // alpha 1, T 1, z = [1, 2], sigma 0.5: limit = 0.25 * 5 / 2 = 0.625
        let z = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let mut rng = crate::rng::stream_rng(99, crate::rng::Stream::Noise);
        let est = expected_regularizer(&z, 0.5, 1.0, 1, 1_000_000, &mut rng).unwrap();
        assert!((est - 0.625).abs() <= 0.02 * 0.625, "estimate {}", est);
    }

    #[test]
    fn expected_regularizer_scales_with_sigma_squared_and_alpha() {
        let z = Tensor::from_vec(&[2, 2], vec![1.0, -1.5, 2.0, 0.5]).unwrap();
        let draws = 200_000;
        let est = |sigma: f64, alpha: f64| {
            let mut rng = crate::rng::stream_rng(5, crate::rng::Stream::Noise);
            expected_regularizer(&z, sigma, alpha, 2, draws, &mut rng).unwrap()
        };
        for &(s, a) in &[(0.2, 0.3), (0.4, 0.6), (0.8, 1.0)] {
            let doubled_sigma = est(2.0 * s, a) / est(s, a);
            assert!(
                (doubled_sigma - 4.0).abs() < 0.2,
                "sigma scaling {} at ({}, {})",
                doubled_sigma,
                s,
                a
            );
        }
        for &(s, a) in &[(0.5, 0.2), (0.5, 0.4)] {
            let doubled_alpha = est(s, 2.0 * a) / est(s, a);
            assert!(
                (doubled_alpha - 2.0).abs() < 0.15,
                "alpha scaling {} at ({}, {})",
                doubled_alpha,
                s,
                a
            );
        }
    }

    fn sweep_fixture() -> (SweepGrid, LogitRecordSet, LabeledSet, LabeledSet) {
        use crate::optim::OptimizerConfig;
        use crate::teacher::LogitRecord;
        let n = 24;
        let data: Vec<f64> = (0..n * 4).map(|i| ((i * 11) % 23) as f64 / 23.0).collect();
        let train = LabeledSet {
            images: Tensor::from_vec(&[n, 4, 1, 1], data).unwrap(),
            labels: (0..n).map(|i| (i % 3) as u8).collect(),
            name: "toy".into(),
        };
        let test = train.clone();
        let records = (0..n)
            .map(|i| LogitRecord {
                sample_index: i as u64,
                logits: (0..3)
                    .map(|j| if j == (i % 3) { 2.0 } else { -1.0 })
                    .collect(),
                hard_label: (i % 3) as u8,
            })
            .collect();
        let logits = LogitRecordSet {
            n_classes: 3,
            teacher_tag: [0u8; 32],
            records,
        };
        let base = DistillConfig {
            student: parse_arch("FC6-FC3").unwrap(),
            noise: NoiseConfig::default(),
            optimizer: OptimizerConfig::adam(0.02),
            train: crate::trainer::LoopConfig {
                batch_size: 8,
                epochs: 2,
                patience: 5,
                seed: 0,
            },
            fingerprint: String::new(),
        };
        let grid = SweepGrid {
            sigmas: vec![0.5],
            alphas: vec![0.5],
            dropouts: vec![0.0],
            targets: vec![NoiseTarget::Teacher],
            seeds: vec![1],
            base,
        };
        (grid, logits, train, test)
    }

    #[test]
    fn sweep_single_config_single_seed_gives_one_data_row_per_config() {
        let (grid, logits, train, test) = sweep_fixture();
        let rows = run_sweep(&grid, &logits, &train, None, &test).unwrap();
        // baseline row + one grid row, no aggregates for a single seed
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].target, NoiseTarget::None);
        assert_eq!(rows[1].target, NoiseTarget::Teacher);
        assert_eq!(rows[1].seed, SweepSeed::Value(1));
        let csv = sweep_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), SWEEP_CSV_HEADER);
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn sweep_aggregates_and_zero_baseline_improvement() {
        let (mut grid, logits, train, test) = sweep_fixture();
        grid.seeds = vec![1, 2, 3];
        let rows = run_sweep(&grid, &logits, &train, None, &test).unwrap();
        // 3 baseline + mean/std + 3 grid + mean/std
        assert_eq!(rows.len(), 10);
        let baseline_mean = rows
            .iter()
            .find(|r| r.target == NoiseTarget::None && r.seed == SweepSeed::Mean)
            .unwrap();
        assert!(baseline_mean.improvement_pct.abs() < 1e-12);
        let grid_mean = rows
            .iter()
            .find(|r| r.target == NoiseTarget::Teacher && r.seed == SweepSeed::Mean)
            .unwrap();
        assert!(grid_mean.test_error.is_finite());
    }

    #[test]
    fn sweep_sigma_grid_matches_table_shape() {
        let (mut grid, logits, train, test) = sweep_fixture();
        grid.sigmas = (1..=10).map(|i| i as f64 / 10.0).collect();
        grid.base.train.epochs = 1;
        let rows = run_sweep(&grid, &logits, &train, None, &test).unwrap();
        let sigma_rows: Vec<f64> = rows
            .iter()
            .filter(|r| r.target == NoiseTarget::Teacher)
            .map(|r| r.sigma)
            .collect();
        assert_eq!(
            sigma_rows,
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
        );
    }

    #[test]
    fn dropout_sweep_inserts_layer_after_first_fc() {
        let spec = parse_arch("C3(S1P1)@2-FC6-FC3").unwrap();
        let with = with_dropout(&spec, 0.4).unwrap();
        assert!(matches!(
            with.layers[2],
            LayerSpec::Dropout { drop_prob } if drop_prob == 0.4
        ));
        assert_eq!(with.layers.len(), 4);
    }
}
