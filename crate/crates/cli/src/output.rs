use std::fs::{self, File};
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;

use crate::CliResult;

/// First line of every CSV artifact: `# config: <json>`.
pub fn config_line<C: Serialize>(config: &C) -> CliResult<String> {
    Ok(format!("# config: {}\n", serde_json::to_string(config)?))
}

/// Writes `bytes` to `path`, or to stdout when no path is given.
pub fn emit(path: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let mut f = File::create(p)?;
            f.write_all(bytes)?;
            f.flush()?;
        }
        None => {
            let mut out = io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
        }
    }
    Ok(())
}

pub fn opt_float(v: Option<f64>) -> String {
    v.map(pisa_core::data::format_float).unwrap_or_default()
}
