//! CSV and JSON artifacts. Every file carries the resolved configuration:
//! CSVs as a leading `# config <json>` comment line, JSON under `"config"`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cvar_sgd_core::{ParamState, Trace, TraceRecord};
use serde::Serialize;

use crate::error::CliError;

pub const CONFIG_PREFIX: &str = "# config ";

/// Shortest round-trip decimal, switching to exponent form for very small or large magnitudes.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn trace_path(dir: &Path, run: usize) -> PathBuf {
    dir.join(format!("trace_seed{run}.csv"))
}

pub struct CsvFile {
    path: PathBuf,
    inner: csv::Writer<BufWriter<File>>,
}

impl CsvFile {
    pub fn create(path: &Path, config_json: &str, header: &[String]) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut buf = BufWriter::new(file);
        writeln!(buf, "{CONFIG_PREFIX}{config_json}").map_err(|e| CliError::io(path, e))?;
        let mut inner = csv::Writer::from_writer(buf);
        inner
            .write_record(header)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner,
        })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.inner
            .write_record(fields)
            .map_err(|e| CliError::Io(format!("{}: {e}", self.path.display())))
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.inner
            .flush()
            .map_err(|e| CliError::io(&self.path, e))
    }
}

pub fn trace_header(m: usize) -> Vec<String> {
    let mut h = vec!["iter".to_string(), "t".to_string()];
    h.extend((0..m).map(|j| format!("theta_{j}")));
    h.extend(["in_event", "loss_sample", "g_alpha_est"].map(String::from));
    h
}

fn trace_row(r: &TraceRecord) -> Vec<String> {
    let mut row = vec![r.iter.to_string(), fmt_f64(r.state.t)];
    row.extend(r.state.theta.iter().map(|&v| fmt_f64(v)));
    row.push(if r.in_event { "1" } else { "0" }.to_string());
    row.push(opt(r.loss_sample));
    row.push(opt(r.g_alpha_est));
    row
}

pub fn write_trace(path: &Path, config_json: &str, m: usize, trace: &Trace) -> Result<(), CliError> {
    let mut f = CsvFile::create(path, config_json, &trace_header(m))?;
    for r in &trace.records {
        f.row(trace_row(r))?;
    }
    f.finish()
}

/// A trace file read back: the embedded configuration and all records.
pub struct LoadedTrace {
    pub config_json: String,
    pub trace: Trace,
}

pub fn read_trace(path: &Path) -> Result<LoadedTrace, CliError> {
    let bad = |msg: String| CliError::Io(format!("{}: {msg}", path.display()));
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let first = text.lines().next().unwrap_or_default();
    let config_json = first
        .strip_prefix(CONFIG_PREFIX)
        .ok_or_else(|| bad("missing config line".into()))?
        .to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let m = header.len().checked_sub(5).ok_or_else(|| bad("short header".into()))?;
    if header.iter().collect::<Vec<_>>() != trace_header(m) {
        return Err(bad("unexpected trace header".into()));
    }
    let num = |s: &str| -> Result<f64, CliError> {
        s.parse::<f64>().map_err(|e| bad(format!("bad number {s:?}: {e}")))
    };
    let opt_num = |s: &str| -> Result<Option<f64>, CliError> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let iter = rec[0].parse().map_err(|e| bad(format!("bad iter: {e}")))?;
        let t = num(&rec[1])?;
        let theta = (0..m).map(|j| num(&rec[2 + j])).collect::<Result<Vec<_>, _>>()?;
        records.push(TraceRecord {
            iter,
            state: ParamState { theta, t },
            in_event: &rec[2 + m] == "1",
            loss_sample: opt_num(&rec[3 + m])?,
            g_alpha_est: opt_num(&rec[4 + m])?,
        });
    }
    Ok(LoadedTrace {
        config_json,
        trace: Trace { records },
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_roundtrips() {
        for v in [0.0, -0.0, 1.0, 0.1, 1e-7, 123456.789, 1e300, -2.5e-12, 0.000_123] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
        assert_eq!(fmt_f64(1e-7), "1e-7");
        assert_eq!(fmt_f64(0.25), "0.25");
    }

    #[test]
    fn trace_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let trace = Trace {
            records: vec![
                TraceRecord {
                    iter: 0,
                    state: ParamState { theta: vec![0.0, 1.5], t: 0.0 },
                    in_event: false,
                    loss_sample: None,
                    g_alpha_est: Some(3.25),
                },
                TraceRecord {
                    iter: 1,
                    state: ParamState { theta: vec![1e-9, -0.3], t: 0.004 },
                    in_event: true,
                    loss_sample: Some(0.1 + 0.2),
                    g_alpha_est: None,
                },
            ],
        };
        write_trace(&path, "{\"a\":1}", 2, &trace).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# config {\"a\":1}\niter,t,theta_0,theta_1,in_event,loss_sample,g_alpha_est\n"));
        assert!(text.contains("\n0,0,0,1.5,0,,3.25\n"));
        let back = read_trace(&path).unwrap();
        assert_eq!(back.config_json, "{\"a\":1}");
        assert_eq!(back.trace, trace);
    }
}
