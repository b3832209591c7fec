//! Network and property file formats.

mod network_json;
mod vnnlib;

use std::path::Path;

use crate::error::{Error, Result};

pub use network_json::{emit_network_json, parse_network_json, FORMAT_VERSION};
pub use vnnlib::{parse_vnnlib, Atom, Clause, PropertySpec};

/// Reads a UTF-8 file, naming the path in any error.
pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}
