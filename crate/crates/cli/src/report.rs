//! Machine-readable JSON plus an aligned text table per command.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::settings::Settings;
use crate::CliError;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug)]
pub struct Report {
    command: String,
    header: Map<String, Value>,
    body: Map<String, Value>,
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
    notes: Vec<String>,
}

impl Report {
    pub fn new(command: &str, settings: &Settings) -> Self {
        let mut header = Map::new();
        header.insert("command".into(), json!(command));
        header.insert("version".into(), json!(TOOL_VERSION));
        header.insert("config_hash".into(), json!(settings.hash()));
        header.insert(
            "seeds".into(),
            json!({
                "backbone": settings.backbone.seed,
                "suite": settings.suite.seed,
                "train": settings.train.seed,
                "pretrain_suite": settings.pretrain.suite.seed,
            }),
        );
        header.insert(
            "config".into(),
            Value::Object(settings.pairs().into_iter().map(|(k, v)| (k, Value::String(v))).collect()),
        );
        Self {
            command: command.into(),
            header,
            body: Map::new(),
            columns: Vec::new(),
            rows: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: Value) -> &mut Self {
        self.body.insert(key.into(), value);
        self
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.body.get(key)
    }

    pub fn columns(&mut self, cols: &[&str]) -> &mut Self {
        self.columns = cols.iter().map(|c| c.to_string()).collect();
        self
    }

    pub fn row(&mut self, cells: Vec<String>) -> &mut Self {
        self.rows.push(cells);
        self
    }

    pub fn note(&mut self, line: impl Into<String>) -> &mut Self {
        self.notes.push(line.into());
        self
    }

    pub fn to_json(&self) -> Value {
        let mut all = self.header.clone();
        all.insert("result".into(), Value::Object(self.body.clone()));
        Value::Object(all)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} (hotlora {})", self.command, TOOL_VERSION);
        let _ = writeln!(s, "config hash {}", self.header["config_hash"].as_str().unwrap_or(""));
        let _ = writeln!(s, "seeds {}", self.header["seeds"]);
        if !self.columns.is_empty() {
            s.push('\n');
            let mut width: Vec<usize> = self.columns.iter().map(String::len).collect();
            for r in &self.rows {
                for (i, c) in r.iter().enumerate() {
                    if i < width.len() {
                        width[i] = width[i].max(c.len());
                    }
                }
            }
            let line = |cells: &[String]| {
                cells
                    .iter()
                    .zip(&width)
                    .map(|(c, w)| format!("{c:<w$}"))
                    .collect::<Vec<_>>()
                    .join("  ")
                    .trim_end()
                    .to_string()
            };
            let _ = writeln!(s, "{}", line(&self.columns));
            let _ = writeln!(s, "{}", line(&width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>()));
            for r in &self.rows {
                let _ = writeln!(s, "{}", line(r));
            }
        }
        if !self.notes.is_empty() {
            s.push('\n');
            for n in &self.notes {
                let _ = writeln!(s, "{n}");
            }
        }
        s
    }

    /// Writes `<out>/<command>.json` and `<out>/<command>.txt`.
    pub fn write(&self, out: &Path) -> Result<(PathBuf, PathBuf), CliError> {
        std::fs::create_dir_all(out).map_err(|e| CliError::Io(out.to_path_buf(), e))?;
        let j = out.join(format!("{}.json", self.command));
        let t = out.join(format!("{}.txt", self.command));
        let mut body = serde_json::to_string_pretty(&self.to_json()).expect("report is plain JSON");
        body.push('\n');
        std::fs::write(&j, body).map_err(|e| CliError::Io(j.clone(), e))?;
        std::fs::write(&t, self.to_text()).map_err(|e| CliError::Io(t.clone(), e))?;
        Ok((j, t))
    }
}

/// Fixed-precision cell text.
pub fn f(x: f64) -> String {
    format!("{x:.6}")
}
