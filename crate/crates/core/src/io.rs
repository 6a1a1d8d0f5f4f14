use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{FaeError, Result};

/// Writes through a sibling temp file and renames it into place, so readers
/// never observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| FaeError::io(parent, e))?;
    }
    let tmp = temp_sibling(path);
    let mut file = fs::File::create(&tmp).map_err(|e| FaeError::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| FaeError::io(&tmp, e))?;
    file.sync_all().map_err(|e| FaeError::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| FaeError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| FaeError::io(path, e))
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}
