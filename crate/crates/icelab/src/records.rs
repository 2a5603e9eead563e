//! Edit-record datasets on disk: a bare JSON array of records.

use std::fs;
use std::path::Path;

use icelab_core::corpus::EditRecord;

use crate::{HarnessError, Result};

pub fn load(path: &Path) -> Result<Vec<EditRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| HarnessError::io(&format!("reading {}", path.display()), e))?;
    let records: Vec<EditRecord> = serde_json::from_str(&text)
        .map_err(|e| HarnessError::io(&format!("parsing {}", path.display()), e))?;
    if records.is_empty() {
        return Err(HarnessError::Usage(format!("{} holds no records", path.display())));
    }
    Ok(records)
}

pub fn save(path: &Path, records: &[EditRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records)
        .map_err(|e| HarnessError::io("encoding records", e))?;
    fs::write(path, text)
        .map_err(|e| HarnessError::io(&format!("writing {}", path.display()), e))
}
