//! Config resolution: JSON file first, then any flag given on the command line.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Overlays the non-null entries of `flags` on the JSON object in `file` and
/// deserialises the result. Unknown keys are rejected by the target type.
pub fn resolve<F: Serialize, R: DeserializeOwned>(file: Option<&Path>, flags: &F) -> Result<R, CliError> {
    let mut merged = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            match serde_json::from_str::<Value>(&text)
                .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?
            {
                Value::Object(map) => map,
                _ => return Err(CliError::Usage(format!("config {} must be a JSON object", path.display()))),
            }
        }
        None => Map::new(),
    };
    if let Value::Object(over) = serde_json::to_value(flags).map_err(|e| CliError::Usage(e.to_string()))? {
        for (k, v) in over {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}
