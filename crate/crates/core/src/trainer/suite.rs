use std::fmt::Write as _;
use std::path::Path;

use super::Trainer;
use crate::config::ExperimentConfig;
use crate::dataset::Scene;
use crate::error::Result;
use crate::evaluation::DEFAULT_THRESHOLDS;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub preset: String,
    pub epochs: u64,
    pub sec_per_epoch: f64,
    /// Held-out mAP over the default thresholds.
    pub map: Scalar,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteTable {
    pub rows: Vec<SuiteRow>,
}

impl SuiteTable {
    pub fn row(&self, preset: &str) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.preset == preset)
    }

    /// Fixed-width text table with a header line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<18} {:>6} {:>10} {:>8}\n", "preset", "epochs", "sec/epoch", "mAP");
        for r in &self.rows {
            let _ = writeln!(s, "{:<18} {:>6} {:>10.3} {:>8.4}", r.preset, r.epochs, r.sec_per_epoch, r.map);
        }
        s
    }
}

/// Trains each preset on `train` with the same `overrides` (seed, epochs,
/// ...) applied on top, then evaluates it on `test`. With `out`, each run
/// writes its checkpoints and logs to `out/<preset>` (`:` becomes `-`).
pub fn run_experiment_suite<S: AsRef<str>>(
    presets: &[&str],
    overrides: &[S],
    train: &[Scene],
    test: &[Scene],
    out: Option<&Path>,
    mut progress: impl FnMut(&str, &super::EpochSummary),
) -> Result<SuiteTable> {
    let mut table = SuiteTable::default();
    for &name in presets {
        let mut cfg = ExperimentConfig::preset(name)?;
        cfg.apply_overrides(overrides)?;
        let mut trainer = Trainer::new(&cfg)?;
        if let Some(dir) = out {
            trainer.write_to(&dir.join(name.replace(':', "-")))?;
        }
        trainer.run(train, |e| progress(name, e))?;
        let report = trainer.evaluate(test, &DEFAULT_THRESHOLDS)?;
        table.rows.push(SuiteRow {
            preset: name.to_string(),
            epochs: cfg.epochs,
            sec_per_epoch: trainer.log().mean_seconds_per_epoch(),
            map: report.map,
        });
    }
    Ok(table)
}
