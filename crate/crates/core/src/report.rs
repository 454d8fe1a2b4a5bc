//! CSV output with a commented provenance header.

use std::io::Write;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Compact JSON with sorted keys.
pub fn canonical_json<T: Serialize>(config: &T) -> Result<String> {
    // Value's map is ordered, so re-serialising sorts the keys.
    let value = serde_json::to_value(config)?;
    Ok(serde_json::to_string(&value)?)
}

/// Hex SHA-256 of the canonical JSON.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let digest = Sha256::digest(canonical_json(config)?.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes `# config_sha256=..`, `# seed=..`, `# config=..`, then a header row
/// and the data rows.
pub fn write_csv<W: Write, T: Serialize>(
    mut out: W,
    config: &T,
    seed: u64,
    columns: &[String],
    rows: &[Vec<String>],
) -> Result<()> {
    writeln!(out, "# config_sha256={}", config_hash(config)?)?;
    writeln!(out, "# seed={seed}")?;
    writeln!(out, "# config={}", canonical_json(config)?)?;
    writeln!(out, "{}", columns.join(","))?;
    for row in rows {
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
