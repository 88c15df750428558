use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::enn::{Transition, TransitionDataset};
use crate::error::{Error, Result};

/// `out_dir/{datasets,models,traces,reports}`.
#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn datasets(&self) -> PathBuf {
        self.root.join("datasets")
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn traces(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn dataset_file(&self, task: usize) -> PathBuf {
        self.datasets().join(format!("task{task}.csv"))
    }

    pub fn trace_file(&self, planner: &str, task: usize, seed: u64) -> PathBuf {
        self.traces()
            .join(planner)
            .join(format!("task{task}_seed{seed}.csv"))
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        what: path.display().to_string(),
        reason: e.to_string(),
    })?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn csv_error(path: &Path, e: impl ToString) -> Error {
    Error::Parse {
        what: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Columns `s0.., a0.., n0..` (state, action, next state).
pub fn write_dataset(path: &Path, ds: &TransitionDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let (sd, ad) = (ds.state_dim(), ds.action_dim());
    let header: Vec<String> = (0..sd)
        .map(|i| format!("s{i}"))
        .chain((0..ad).map(|i| format!("a{i}")))
        .chain((0..sd).map(|i| format!("n{i}")))
        .collect();
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for t in ds.transitions() {
        let rec: Vec<String> = t
            .state
            .iter()
            .chain(&t.action)
            .chain(&t.next_state)
            .map(f64::to_string)
            .collect();
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| csv_error(path, e))?;
    write_bytes(path, &bytes)
}

pub fn read_dataset(
    path: &Path,
    state_dim: usize,
    action_dim: usize,
    task_id: Option<usize>,
) -> Result<TransitionDataset> {
    let text = read_text(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let width = 2 * state_dim + action_dim;
    let headers = r.headers().map_err(|e| csv_error(path, e))?;
    if headers.len() != width {
        return Err(csv_error(
            path,
            format!("expected {width} columns, found {}", headers.len()),
        ));
    }
    let mut ds = TransitionDataset::new(state_dim, action_dim, task_id);
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let vals = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| csv_error(path, format!("row {}: {e}", line + 1)))?;
        if vals.len() != width {
            return Err(csv_error(path, format!("row {} has {} fields", line + 1, vals.len())));
        }
        let (s, rest) = vals.split_at(state_dim);
        let (a, n) = rest.split_at(action_dim);
        ds.push(Transition::new(s.to_vec(), a.to_vec(), n.to_vec()))?;
    }
    Ok(ds)
}

/// Named columns of a CSV file, parsed as floats; empty cells are `None`.
pub fn read_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<Option<f64>>>> {
    let text = read_text(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| csv_error(path, e))?.clone();
    let idx = names
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h == *n)
                .ok_or_else(|| csv_error(path, format!("missing column {n}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cols = vec![Vec::new(); names.len()];
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        for (c, &i) in cols.iter_mut().zip(&idx) {
            let field = rec.get(i).unwrap_or("");
            c.push(if field.is_empty() {
                None
            } else {
                Some(field.parse::<f64>().map_err(|e| csv_error(path, e))?)
            });
        }
    }
    Ok(cols)
}
