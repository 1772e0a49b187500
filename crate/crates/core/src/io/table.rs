use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// Writes `rows` under an explicit header so empty tables still carry
/// their column names. `None` fields become empty cells.
pub fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
