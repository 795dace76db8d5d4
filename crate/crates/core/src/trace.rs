//! Per-iteration trace rows and their CSV / JSON-lines writers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: u64,
    pub elbo: f64,
    pub grad_norm: f64,
    /// Trace of the gradient covariance, when probed.
    pub grad_variance: Option<f64>,
    /// Trace of the score-component covariance, when probed separately.
    pub score_variance: Option<f64>,
    /// `KL(q || p)` when the true posterior is known.
    pub kl: Option<f64>,
    /// Seconds since the run started; omitted unless requested.
    pub wall_clock: Option<f64>,
}

impl TraceRecord {
    pub fn new(iteration: u64, elbo: f64, grad_norm: f64) -> Self {
        TraceRecord {
            iteration,
            elbo,
            grad_norm,
            grad_variance: None,
            score_variance: None,
            kl: None,
            wall_clock: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceFormat {
    Csv,
    Jsonl,
}

impl TraceFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TraceFormat::Csv => "csv",
            TraceFormat::Jsonl => "jsonl",
        }
    }
}

impl FromStr for TraceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TraceFormat::Csv),
            "jsonl" => Ok(TraceFormat::Jsonl),
            _ => Err(Error::config(format!("unknown trace format '{s}' (csv or jsonl)"))),
        }
    }
}

pub const CSV_HEADER: &str = "iteration,elbo,grad_norm,grad_variance,score_variance,kl,wall_clock";

// Debug formatting of f64 is the shortest string that parses back to the
// same value, and does not depend on locale.
fn cell(v: f64) -> String {
    format!("{v:?}")
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(cell).unwrap_or_default()
}

pub fn csv_row(r: &TraceRecord) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.iteration,
        cell(r.elbo),
        cell(r.grad_norm),
        opt_cell(r.grad_variance),
        opt_cell(r.score_variance),
        opt_cell(r.kl),
        opt_cell(r.wall_clock)
    )
}

/// Incremental writer, so a run that fails midway leaves the rows so far.
pub struct TraceWriter {
    out: BufWriter<File>,
    format: TraceFormat,
    path: std::path::PathBuf,
}

impl TraceWriter {
    pub fn create(path: &Path, format: TraceFormat) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = TraceWriter {
            out: BufWriter::new(file),
            format,
            path: path.to_path_buf(),
        };
        if format == TraceFormat::Csv {
            w.line(CSV_HEADER)?;
        }
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn write(&mut self, r: &TraceRecord) -> Result<()> {
        let row = match self.format {
            TraceFormat::Csv => csv_row(r),
            TraceFormat::Jsonl => serde_json::to_string(r)
                .map_err(|e| Error::numeric(format!("cannot encode trace row: {e}")))?,
        };
        self.line(&row)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for TraceWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Writes all `records` to `path`. CSV files start with a header row.
pub fn emit_trace(records: &[TraceRecord], format: TraceFormat, path: &Path) -> Result<()> {
    let mut w = TraceWriter::create(path, format)?;
    for r in records {
        w.write(r)?;
    }
    w.flush()
}

fn parse_opt(s: &str) -> std::result::Result<Option<f64>, std::num::ParseFloatError> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

/// Reads a trace written by [`emit_trace`].
pub fn read_trace(path: &Path, format: TraceFormat) -> Result<Vec<TraceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let start = offset;
        offset += line.len() + 1;
        let bad = |msg: String| Error::Format {
            offset: start,
            message: format!("{}: {msg}", path.display()),
        };
        match format {
            TraceFormat::Csv if n == 0 => {
                if line != CSV_HEADER {
                    return Err(bad("unexpected header".into()));
                }
            }
            TraceFormat::Csv => {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 7 {
                    return Err(bad(format!("expected 7 fields, got {}", f.len())));
                }
                let parsed = (|| -> std::result::Result<TraceRecord, String> {
                    let e = |x: std::num::ParseFloatError| x.to_string();
                    Ok(TraceRecord {
                        iteration: f[0].parse().map_err(|x: std::num::ParseIntError| x.to_string())?,
                        elbo: f[1].parse().map_err(e)?,
                        grad_norm: f[2].parse().map_err(e)?,
                        grad_variance: parse_opt(f[3]).map_err(e)?,
                        score_variance: parse_opt(f[4]).map_err(e)?,
                        kl: parse_opt(f[5]).map_err(e)?,
                        wall_clock: parse_opt(f[6]).map_err(e)?,
                    })
                })();
                out.push(parsed.map_err(bad)?);
            }
            TraceFormat::Jsonl => {
                out.push(serde_json::from_str(line).map_err(|e| bad(e.to_string()))?);
            }
        }
    }
    Ok(out)
}
