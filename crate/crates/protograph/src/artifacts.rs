//! Structured outputs of a run: history as JSON lines, hierarchy, metrics and
//! graph documents as JSON, adjacency matrices as CSV.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use protograph_core::Tensor;
use serde::Serialize;

use crate::error::{AppError, AppResult};

pub const CHECKPOINT_FILE: &str = "checkpoint.pgck";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const HIERARCHY_FILE: &str = "hierarchy.json";
pub const ADJACENCY_FILE: &str = "adjacency.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const RUN_FILE: &str = "run.json";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| AppError::Data(format!("cannot encode JSON: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| AppError::io(path, e))
}

/// `N` header-less rows of `N` comma-separated values, printed so they parse
/// back to the same `f64`.
pub fn adjacency_csv(matrix: &Tensor) -> String {
    let cols = matrix.shape().last().copied().unwrap_or(0);
    let mut out = String::new();
    for row in matrix.data().chunks(cols) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_adjacency_csv(text: &str) -> AppResult<Tensor> {
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            line.split(',')
                .map(|cell| cell.trim().parse::<f64>().map_err(|e| AppError::Data(format!("bad CSV cell {cell:?}: {e}"))))
                .collect::<AppResult<Vec<f64>>>()
        })
        .collect::<AppResult<Vec<_>>>()?;
    Ok(Tensor::from_rows(&rows)?)
}

/// Appends one JSON object per line and flushes after each.
pub struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: &Path, append: bool) -> AppResult<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| AppError::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    pub fn push<T: Serialize>(&mut self, value: &T) -> AppResult<()> {
        let line = serde_json::to_string(value).map_err(|e| AppError::Data(format!("cannot encode JSON: {e}")))?;
        writeln!(self.out, "{line}").and_then(|()| self.out.flush()).map_err(|e| AppError::io(&self.path, e))
    }
}

pub fn read_json_lines<T: serde::de::DeserializeOwned>(path: &Path) -> AppResult<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| AppError::Data(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Record of what a command read and wrote.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

pub fn ensure_dir(dir: &Path) -> AppResult<()> {
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))
}
