//! Small filesystem helpers shared by the persistent modules.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

/// Replaces `path` by writing a sibling temp file and renaming it over.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("state");
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Reads an env-style `KEY=VALUE` file. Comments, blank lines, quoting and
/// `export` prefixes follow dotenv conventions. Values are not
/// interpolated into the process environment.
pub fn read_env_file(path: &Path) -> io::Result<BTreeMap<String, String>> {
    let iter = dotenvy::from_path_iter(path).map_err(to_io)?;
    let mut out = BTreeMap::new();
    for pair in iter {
        let (k, v) = pair.map_err(to_io)?;
        out.insert(k, v);
    }
    Ok(out)
}

/// Same as [`read_env_file`] for in-memory text.
pub fn parse_env_str(text: &str) -> io::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for pair in dotenvy::from_read_iter(text.as_bytes()) {
        let (k, v) = pair.map_err(to_io)?;
        out.insert(k, v);
    }
    Ok(out)
}

fn to_io(e: dotenvy::Error) -> io::Error {
    match e {
        dotenvy::Error::Io(e) => e,
        other => io::Error::new(io::ErrorKind::InvalidData, other.to_string()),
    }
}
