//! File outputs. Finished files are always written to a temporary sibling
//! and renamed into place.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::learner::{EpisodeOutcome, OutcomeSink};

use super::metrics::ModeSummary;

/// Episodes CSV header, in column order.
pub const EPISODE_COLUMNS: [&str; 9] = [
    "step",
    "truth_switched",
    "truth_domain",
    "detected_switch",
    "detected_ood",
    "support_loss",
    "query_loss",
    "query_acc",
    "branch_taken",
];

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn tmp_sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let tmp = tmp_sibling(path, ".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

/// Formats a float for CSV: shortest round-trip form, `NaN` for undefined values.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v}")
    }
}

pub fn episode_row(o: &EpisodeOutcome) -> [String; 9] {
    [
        o.step.to_string(),
        o.truth_switched.to_string(),
        o.truth_domain_id.to_string(),
        o.detected_switch.to_string(),
        o.detected_ood.to_string(),
        fmt_f64(o.support_loss),
        fmt_f64(o.query_loss),
        fmt_f64(o.query_accuracy),
        o.branch.as_str().to_string(),
    ]
}

const FLUSH_EVERY: usize = 256;

/// Streams episode rows to `<path>.partial` and renames it to `path` on
/// [`finish`](EpisodeCsvWriter::finish). An unfinished run leaves the partial
/// file behind.
pub struct EpisodeCsvWriter {
    path: PathBuf,
    partial: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
    rows: usize,
}

impl EpisodeCsvWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            ensure_dir(parent)?;
        }
        let partial = tmp_sibling(path, ".partial");
        let file = File::create(&partial).map_err(|e| Error::io(&partial, e))?;
        let mut writer = csv::Writer::from_writer(BufWriter::new(file));
        writer.write_record(EPISODE_COLUMNS)?;
        Ok(Self {
            path: path.to_path_buf(),
            partial,
            writer,
            rows: 0,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn partial_path(&self) -> &Path {
        &self.partial
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.writer.flush().map_err(|e| Error::io(&self.partial, e))?;
        drop(self.writer);
        fs::rename(&self.partial, &self.path).map_err(|e| Error::io(&self.path, e))?;
        Ok(self.path)
    }
}

impl OutcomeSink for EpisodeCsvWriter {
    fn record(&mut self, outcome: &EpisodeOutcome) -> Result<()> {
        self.writer.write_record(episode_row(outcome))?;
        self.rows += 1;
        if self.rows.is_multiple_of(FLUSH_EVERY) {
            self.writer.flush().map_err(|e| Error::io(&self.partial, e))?;
        }
        Ok(())
    }
}

/// Summary CSV header for the given shift-domain ids.
pub fn summary_header(shift_domains: &[u32]) -> Vec<String> {
    let mut h = vec![
        "mode".to_string(),
        "seed_count".to_string(),
        "overall_acc_mean".to_string(),
        "overall_acc_std".to_string(),
        "pretrain_acc_mean".to_string(),
    ];
    h.extend(shift_domains.iter().map(|d| format!("ood{d}_acc_mean")));
    h.push("precision_mean".to_string());
    h.push("recall_mean".to_string());
    h
}

pub fn summary_row(s: &ModeSummary) -> Vec<String> {
    let mut r = vec![
        s.mode.as_str().to_string(),
        s.seed_count.to_string(),
        fmt_f64(s.overall_acc_mean),
        fmt_f64(s.overall_acc_std),
        fmt_f64(s.pretrain_acc_mean),
    ];
    r.extend(s.ood_acc_mean.iter().map(|(_, a)| fmt_f64(*a)));
    r.push(fmt_f64(s.precision_mean));
    r.push(fmt_f64(s.recall_mean));
    r
}

pub fn summary_csv(summaries: &[ModeSummary], shift_domains: &[u32]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(summary_header(shift_domains))?;
    for s in summaries {
        w.write_record(summary_row(s))?;
    }
    w.into_inner()
        .map_err(|e| Error::Csv(csv::Error::from(e.into_error())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, 2.5e-300, -7.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
        assert_eq!(fmt_f64(f64::NAN), "NaN");
        assert_eq!(fmt_f64(1.0), "1");
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert!(!tmp_sibling(&p, ".tmp").exists());
    }

    #[test]
    fn summary_header_columns() {
        let h = summary_header(&[1, 2]);
        assert_eq!(
            h,
            [
                "mode",
                "seed_count",
                "overall_acc_mean",
                "overall_acc_std",
                "pretrain_acc_mean",
                "ood1_acc_mean",
                "ood2_acc_mean",
                "precision_mean",
                "recall_mean"
            ]
        );
    }
}
