//! CSV point sets and tables, plus cleanup of partially written outputs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use flowcond::Tensor;

use crate::error::CliError;

fn csv_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Header `x0,x1,...`, one row per point. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_points(path: &Path, points: &Tensor) -> Result<(), CliError> {
    let header: Vec<String> = (0..points.cols()).map(|j| format!("x{j}")).collect();
    let rows = points
        .iter_rows()
        .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>());
    write_table(path, &header, rows)
}

pub fn write_table<I, R>(path: &Path, header: &[impl AsRef<str>], rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file));
    w.write_record(header.iter().map(|h| h.as_ref()))
        .map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_points(path: &Path) -> Result<Tensor, CliError> {
    if !path.exists() {
        return Err(CliError::MissingInput(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let cols = r.headers().map_err(|e| csv_err(path, e))?.len();
    if cols == 0 {
        return Err(csv_err(path, "empty header"));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| csv_err(path, format!("row {}: {field:?} is not a number", i + 1)))?;
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(csv_err(path, "no data rows"));
    }
    Ok(Tensor::matrix(rows, cols, data)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut f = File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

pub fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Tracks files created by a subcommand and deletes them unless
/// [`OutputGuard::commit`] is reached.
#[derive(Debug, Default)]
pub struct OutputGuard {
    paths: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `path` and returns it.
    pub fn track<'p>(&mut self, path: &'p Path) -> &'p Path {
        self.paths.push(path.to_path_buf());
        path
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in &self.paths {
            if p.exists() {
                if let Err(e) = std::fs::remove_file(p) {
                    log::warn!("could not remove partial output {}: {e}", p.display());
                }
            }
        }
    }
}
