//! Append-only CSV logs.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::boundary::AttackStats;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when no monitoring set was supplied.
    pub eval_accuracy: Option<f64>,
    pub lr: f32,
    pub attack_success_rate: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackRow {
    pub epoch: usize,
    pub batch: usize,
    pub stats: AttackStats,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,eval_accuracy,lr,attack_success_rate";
pub const ATTACK_HEADER: &str = "epoch,batch,attempted,skipped,failed,kept,mean_iters,mean_alpha_final";
pub const TIMING_HEADER: &str = "epoch,wall_seconds";

/// A CSV file that gets its header on creation and rows appended after.
pub struct CsvLog {
    out: BufWriter<File>,
}

impl CsvLog {
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{header}")?;
        out.flush()?;
        Ok(Self { out })
    }

    /// Reopen for appending without repeating the header.
    pub fn append_to(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().append(true).open(path)?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn metrics_line(r: &MetricsRow) -> String {
    let acc = r.eval_accuracy.map_or_else(|| "NA".to_string(), |a| format!("{a:.6}"));
    format!(
        "{},{:.6},{acc},{:.8},{:.6}",
        r.epoch, r.train_loss, r.lr, r.attack_success_rate
    )
}

pub fn timing_line(r: &MetricsRow) -> String {
    format!("{},{:.3}", r.epoch, r.wall_seconds)
}

pub fn attack_line(r: &AttackRow) -> String {
    let c = r.stats.counts;
    format!(
        "{},{},{},{},{},{},{:.4},{:.4}",
        r.epoch, r.batch, c.attempted, c.skipped, c.failed, c.kept, r.stats.mean_iters, r.stats.mean_final_alpha
    )
}

/// The three logs a training run writes.
pub struct RunLogs {
    pub metrics: CsvLog,
    pub timing: CsvLog,
    pub attacks: Option<CsvLog>,
}

impl RunLogs {
    pub fn create(dir: &Path, with_attacks: bool) -> Result<Self> {
        Ok(Self {
            metrics: CsvLog::create(&dir.join("metrics.csv"), METRICS_HEADER)?,
            timing: CsvLog::create(&dir.join("timing.csv"), TIMING_HEADER)?,
            attacks: if with_attacks {
                Some(CsvLog::create(&dir.join("attack_stats.csv"), ATTACK_HEADER)?)
            } else {
                None
            },
        })
    }

    pub fn record(&mut self, m: &MetricsRow, attacks: &[AttackRow]) -> Result<()> {
        self.metrics.row(&metrics_line(m))?;
        self.timing.row(&timing_line(m))?;
        if let Some(a) = self.attacks.as_mut() {
            for r in attacks {
                a.row(&attack_line(r))?;
            }
        }
        Ok(())
    }
}
