//! Per-run training metrics and their CSV form.

use std::io::{self, Write};

/// Everything measured during one training run.
///
/// The CSV written by [`RunMetrics::write_csv`] contains only values that are
/// reproducible bit-for-bit from `(seed, config)`; wall-clock time is kept on
/// the struct (and in sweep tables) but deliberately left out of the per-run
/// file so identical runs produce identical files.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub seed: u64,
    pub config_fingerprint: String,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_val_error: Vec<f64>,
    /// 1-based epoch whose validation error was best; 0 when no epoch ran.
    pub best_epoch: usize,
    pub test_error: Option<f64>,
    pub improvement_pct: Option<f64>,
    pub wall_s: f64,
}

impl RunMetrics {
    pub fn new(seed: u64, config_fingerprint: impl Into<String>) -> Self {
        RunMetrics {
            seed,
            config_fingerprint: config_fingerprint.into(),
            epoch_train_loss: Vec::new(),
            epoch_val_error: Vec::new(),
            best_epoch: 0,
            test_error: None,
            improvement_pct: None,
            wall_s: 0.0,
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# seed={}", self.seed)?;
        writeln!(w, "# fingerprint={}", self.config_fingerprint)?;
        writeln!(w, "# best_epoch={}", self.best_epoch)?;
        if let Some(e) = self.test_error {
            writeln!(w, "# test_error={}", e)?;
        }
        if let Some(p) = self.improvement_pct {
            writeln!(w, "# improvement_pct={}", p)?;
        }
        writeln!(w, "epoch,train_loss,val_error")?;
        for (i, (loss, err)) in self
            .epoch_train_loss
            .iter()
            .zip(&self.epoch_val_error)
            .enumerate()
        {
            writeln!(w, "{},{},{}", i + 1, loss, err)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is UTF-8")
    }
}
