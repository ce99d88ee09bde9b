use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use ftlab_core::metrics::MetricsReport;
use ftlab_core::trainer::Summary;
use ftlab_core::{Error, Result};

pub const TABLE_COLUMNS: [&str; 5] = ["Model", "Precision", "Recall", "Accuracy", "F-Score"];

/// Stable identifier of a run: hash of its canonical config text and seed.
pub fn run_id(config_text: &str, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(config_text.as_bytes());
    h.update(b"\nseed=");
    h.update(seed.to_string().as_bytes());
    hex::encode(&h.finalize()[..6])
}

pub fn unix_time() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// One row of a results table: a model label and metric cells.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub model: String,
    /// Precision, recall, accuracy and F-score as fractions.
    pub values: [f64; 4],
    /// Standard deviations, when the row summarizes several seeds.
    pub stds: Option<[f64; 4]>,
}

impl ResultRow {
    pub fn from_report(model: impl Into<String>, r: &MetricsReport) -> Self {
        Self {
            model: model.into(),
            values: [r.precision, r.recall, r.accuracy, r.f_score],
            stds: None,
        }
    }

    pub fn from_summaries(model: impl Into<String>, s: [Summary; 4]) -> Self {
        Self {
            model: model.into(),
            values: s.map(|x| x.mean),
            stds: Some(s.map(|x| x.std)),
        }
    }

    fn cells(&self) -> Vec<String> {
        let mut cells = vec![self.model.clone()];
        for i in 0..4 {
            cells.push(match self.stds {
                Some(sd) => format!("{:.2} ± {:.2}", 100.0 * self.values[i], 100.0 * sd[i]),
                None => format!("{:.2}", 100.0 * self.values[i]),
            });
        }
        cells
    }
}

/// Aligned text table with metrics as percentages to two decimals.
pub fn render_table(rows: &[ResultRow]) -> String {
    let body: Vec<Vec<String>> = rows.iter().map(ResultRow::cells).collect();
    let mut widths: Vec<usize> = TABLE_COLUMNS.iter().map(|c| c.chars().count()).collect();
    for r in &body {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                let pad = w - c.chars().count();
                if i == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect::<Vec<_>>()
            .join(" | ")
    };
    let header: Vec<String> = TABLE_COLUMNS.iter().map(|s| s.to_string()).collect();
    let mut out = line(&header);
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-"));
    out.push('\n');
    for r in &body {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

const CSV_HEADER: [&str; 9] = [
    "model",
    "precision",
    "recall",
    "accuracy",
    "f_score",
    "precision_std",
    "recall_std",
    "accuracy_std",
    "f_score_std",
];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| csv_err(path, e))?;
    for r in rows {
        let mut rec = vec![r.model.clone()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        match r.stds {
            Some(s) => rec.extend(s.iter().map(|v| v.to_string())),
            None => rec.extend(std::iter::repeat_n(String::new(), 4)),
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        let num = |k: usize| -> Result<Option<f64>> {
            match rec.get(k).map(str::trim) {
                None | Some("") => Ok(None),
                Some(s) => s
                    .parse()
                    .map(Some)
                    .map_err(|_| Error::Data(format!("{}: line {line}: bad number {s:?}", path.display()))),
            }
        };
        let mut values = [0.0; 4];
        for (k, v) in values.iter_mut().enumerate() {
            *v = num(k + 1)?.ok_or_else(|| {
                Error::Data(format!("{}: line {line}: missing {}", path.display(), CSV_HEADER[k + 1]))
            })?;
        }
        let stds: Vec<Option<f64>> = (5..9).map(num).collect::<Result<_>>()?;
        let stds = if stds.iter().all(Option::is_some) {
            Some([0, 1, 2, 3].map(|k| stds[k].unwrap_or(0.0)))
        } else {
            None
        };
        rows.push(ResultRow {
            model: rec.get(0).unwrap_or_default().to_string(),
            values,
            stds,
        });
    }
    Ok(rows)
}

/// Record of one command invocation.
pub struct Manifest {
    pub run_id: String,
    pub command: String,
    pub config: String,
    pub started: u64,
    pub outputs: Vec<PathBuf>,
    pub notes: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: String, seed: u64) -> Self {
        Self {
            run_id: run_id(&config, seed),
            command: command.to_string(),
            config,
            started: unix_time(),
            outputs: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "run_id={}", self.run_id);
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "started={}", self.started);
        let _ = writeln!(s, "finished={}", unix_time());
        for o in &self.outputs {
            let _ = writeln!(s, "output={}", o.display());
        }
        for n in &self.notes {
            let _ = writeln!(s, "{n}");
        }
        s.push_str("[config]\n");
        s.push_str(&self.config);
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }
}
