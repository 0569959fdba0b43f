use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::fmt_f64;
use crate::error::{Error, Result};
use crate::learning::{AbortRecord, LossReport};

pub const TRAIN_COLUMNS: [&str; 9] = [
    "step",
    "event_kind",
    "ebm_loss",
    "generator_recon_loss",
    "generator_sync_loss",
    "inference_loss",
    "energy_data",
    "energy_revised",
    "detail",
];

struct CsvFile {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvFile {
    fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut f = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        f.line(&header.iter().map(|s| s.to_string()).collect::<Vec<_>>())?;
        Ok(f)
    }

    /// Rewrites `path` keeping rows with `step <= upto`. Missing files start
    /// fresh.
    fn resume(path: &Path, header: &[&str], upto: u64) -> Result<Self> {
        let kept: Vec<Vec<String>> = if path.exists() {
            read_csv(path)?
                .1
                .into_iter()
                .filter(|r| r.first().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= upto))
                .collect()
        } else {
            Vec::new()
        };
        let mut f = Self::create(path, header)?;
        for r in &kept {
            f.line(r)?;
        }
        Ok(f)
    }

    fn line(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.out, "{}", fields.join(",")).map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Training metrics: one `train` row per cadence step, one `abort` row per
/// aborted step. Contains nothing time-dependent.
pub struct MetricsWriter(CsvFile);

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self(CsvFile::create(path, &TRAIN_COLUMNS)?))
    }

    /// Reopens for a run resumed at step `upto`, dropping any later rows.
    pub fn resume(path: &Path, upto: u64) -> Result<Self> {
        Ok(Self(CsvFile::resume(path, &TRAIN_COLUMNS, upto)?))
    }

    pub fn train_row(&mut self, r: &LossReport) -> Result<()> {
        let mut fields = vec![r.step.to_string(), "train".to_string()];
        fields.extend(
            [
                r.ebm_loss,
                r.generator_recon_loss,
                r.generator_sync_loss,
                r.inference_loss,
                r.energy_data,
                r.energy_revised,
            ]
            .map(fmt_f64),
        );
        fields.push(String::new());
        self.0.line(&fields)
    }

    pub fn abort_row(&mut self, a: &AbortRecord) -> Result<()> {
        let mut fields = vec![a.step.to_string(), "abort".to_string()];
        fields.extend(std::iter::repeat_n(String::new(), 6));
        fields.push(a.class.to_string());
        self.0.line(&fields)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.0.flush()
    }
}

/// Per-step wall-clock times, kept apart from the reproducible metrics.
pub struct TimingWriter(CsvFile);

impl TimingWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self(CsvFile::create(path, &["step", "wall_clock_secs"])?))
    }

    pub fn resume(path: &Path, upto: u64) -> Result<Self> {
        Ok(Self(CsvFile::resume(path, &["step", "wall_clock_secs"], upto)?))
    }

    pub fn row(&mut self, step: u64, secs: f64) -> Result<()> {
        self.0.line(&[step.to_string(), fmt_f64(secs)])
    }

    pub fn flush(&mut self) -> Result<()> {
        self.0.flush()
    }
}

/// Writes `step,event_kind,metric,value` rows with `event_kind = metric`.
pub fn write_metric_rows(path: &Path, step: u64, rows: &[(String, f64)]) -> Result<()> {
    let mut f = CsvFile::create(path, &["step", "event_kind", "metric", "value"])?;
    for (name, value) in rows {
        f.line(&[step.to_string(), "metric".into(), name.clone(), fmt_f64(*value)])?;
    }
    f.flush()
}

/// Writes a free-form table. Fields must not contain commas.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut fields = header.iter().copied().chain(rows.iter().flatten().map(String::as_str));
    if let Some(bad) = fields.find(|f| f.contains(',')) {
        return Err(Error::invalid(format!("CSV field {bad:?} contains a comma")));
    }
    let mut f = CsvFile::create(path, header)?;
    for r in rows {
        f.line(r)?;
    }
    f.flush()
}

/// Header and rows of a simple comma-separated file (no quoting).
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let split = |l: String| l.split(',').map(str::to_string).collect::<Vec<_>>();
    let header = match lines.next() {
        Some(l) => split(l.map_err(|e| Error::io(path, e))?),
        None => return Err(Error::invalid(format!("{}: empty CSV", path.display()))),
    };
    let rows = lines
        .map(|l| l.map(split).map_err(|e| Error::io(path, e)))
        .collect::<Result<Vec<_>>>()?;
    Ok((header, rows))
}
