//! Small helpers shared by the CSV writers.

use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::error::{Error, Result};

/// `foo.csv` -> `foo.csv.meta.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Writes `{"kind", "schema_version", ...extra}` next to a CSV file.
pub fn write_sidecar(path: &Path, kind: &str, schema_version: u32, extra: Value) -> Result<()> {
    let mut meta = json!({ "kind": kind, "schema_version": schema_version });
    if let (Some(m), Value::Object(e)) = (meta.as_object_mut(), extra) {
        m.extend(e);
    }
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Reads a sidecar and checks its kind and version.
pub fn read_sidecar(path: &Path, kind: &str, schema_version: u32) -> Result<Value> {
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    if meta["kind"] != kind {
        return Err(Error::Format(format!("{}: expected a {kind} file", path.display())));
    }
    if meta["schema_version"] != schema_version {
        return Err(Error::Format(format!(
            "{}: unsupported schema_version {}",
            path.display(),
            meta["schema_version"]
        )));
    }
    Ok(meta)
}
