//! CSV emission with exact float round-tripping.
//!
//! Floats are printed with 17 significant digits (`{:.16e}`), which is
//! enough to reproduce any `f64` bit pattern on parse, so CSV bodies are a
//! lossless and byte-deterministic record of a run. Files are UTF-8 with LF
//! line endings and are written atomically (temp file + rename) so readers
//! never observe a partial file.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Renders a float cell with 17 significant digits.
pub fn float_cell(v: f64) -> String {
    format!("{v:.16e}")
}

/// Renders the header plus rows as CSV text. Every row must match the
/// schema width. Cells are written verbatim; the schemas used here never
/// contain commas, quotes, or newlines, so no quoting layer is needed.
pub fn render_csv(schema: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut out = String::new();
    out.push_str(&schema.join(","));
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        if row.len() != schema.len() {
            return Err(Error::Invariant(format!(
                "csv row {i} has {} cells for a {}-column schema",
                row.len(),
                schema.len()
            )));
        }
        for (j, cell) in row.iter().enumerate() {
            if cell.contains(',') || cell.contains('\n') || cell.contains('"') {
                return Err(Error::Invariant(format!(
                    "csv cell ({i}, {j}) contains a delimiter: {cell:?}"
                )));
            }
            if j > 0 {
                out.push(',');
            }
            out.push_str(cell);
        }
        out.push('\n');
    }
    Ok(out)
}

/// Writes bytes atomically: to a sibling temp file first, then renamed over
/// the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Invariant(format!("output path {} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Renders and writes a CSV file in one step.
pub fn emit_csv(path: &Path, schema: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let body = render_csv(schema, rows)?;
    write_atomic(path, body.as_bytes())
}
