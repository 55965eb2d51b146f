//! Append-only structured run log with CSV and JSON-lines backends.
//!
//! Every record goes through one mutex-guarded writer and is flushed before
//! the lock is released, so parallel callers never interleave partial lines.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde_json::{Map, Value};

use crate::config::LogBackend;
use crate::error::{CliError, CliResult};

pub const CSV_HEADER: [&str; 4] = ["seq", "stage", "event", "data"];
pub const CSV_FILE: &str = "log.csv";
pub const JSON_FILE: &str = "log.jsonl";

struct Sinks {
    seq: u64,
    csv: Option<csv::Writer<File>>,
    json: Option<BufWriter<File>>,
}

pub struct Logger {
    sinks: Mutex<Sinks>,
    paths: Vec<PathBuf>,
}

fn open_append(path: &Path) -> CliResult<File> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| CliError::Log {
            path: path.to_path_buf(),
            source,
        })
}

impl Logger {
    /// Opens the backends under `dir`. Fails here, before any work is done,
    /// if a log file cannot be created.
    pub fn open(dir: &Path, backend: LogBackend) -> CliResult<Logger> {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Log {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut paths = Vec::new();
        let csv = match backend {
            LogBackend::Csv | LogBackend::Both => {
                let path = dir.join(CSV_FILE);
                let fresh = std::fs::metadata(&path).map_or(true, |m| m.len() == 0);
                let mut w = csv::WriterBuilder::new()
                    .has_headers(false)
                    .from_writer(open_append(&path)?);
                if fresh {
                    w.write_record(CSV_HEADER)
                        .and_then(|_| w.flush().map_err(Into::into))
                        .map_err(|e| CliError::Log {
                            path: path.clone(),
                            source: std::io::Error::other(e),
                        })?;
                }
                paths.push(path);
                Some(w)
            }
            LogBackend::Json => None,
        };
        let json = match backend {
            LogBackend::Json | LogBackend::Both => {
                let path = dir.join(JSON_FILE);
                let f = open_append(&path)?;
                paths.push(path);
                Some(BufWriter::new(f))
            }
            LogBackend::Csv => None,
        };
        Ok(Logger {
            sinks: Mutex::new(Sinks { seq: 0, csv, json }),
            paths,
        })
    }

    /// A logger that drops every record.
    pub fn disabled() -> Logger {
        Logger {
            sinks: Mutex::new(Sinks {
                seq: 0,
                csv: None,
                json: None,
            }),
            paths: Vec::new(),
        }
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }

    /// Appends one record to every backend.
    pub fn record(&self, stage: &str, event: &str, data: Map<String, Value>) {
        let mut sinks = self.sinks.lock().unwrap_or_else(|e| e.into_inner());
        let seq = sinks.seq;
        sinks.seq += 1;
        let data = Value::Object(data);
        // a failed log write must not abort a run that is otherwise healthy
        if let Some(w) = sinks.csv.as_mut() {
            let _ = w
                .write_record([&seq.to_string(), stage, event, &data.to_string()])
                .and_then(|_| w.flush().map_err(Into::into));
        }
        if let Some(w) = sinks.json.as_mut() {
            let line =
                serde_json::json!({"seq": seq, "stage": stage, "event": event, "data": data});
            let _ = writeln!(w, "{line}").and_then(|_| w.flush());
        }
    }

    pub fn records_written(&self) -> u64 {
        self.sinks.lock().unwrap_or_else(|e| e.into_inner()).seq
    }
}

/// Builds the key-value payload of a record.
#[macro_export]
macro_rules! kv {
    ($($k:literal => $v:expr),* $(,)?) => {{
        #[allow(unused_mut)]
        let mut m = serde_json::Map::new();
        $(m.insert($k.to_string(), serde_json::json!($v));)*
        m
    }};
}
