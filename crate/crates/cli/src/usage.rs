use std::fmt;
use std::path::Path;

/// Bad flags or inputs detected before any work starts; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn require_dir(path: &Path, what: &str) -> Result<(), UsageError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(UsageError(format!("{what} {} is not a directory", path.display())))
    }
}

pub fn require_file(path: &Path, what: &str) -> Result<(), UsageError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(UsageError(format!("{what} {} does not exist", path.display())))
    }
}

/// The parent directory of an output path must already exist.
pub fn require_parent(path: &Path, what: &str) -> Result<(), UsageError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(UsageError(format!(
            "{what} {}: directory {} does not exist",
            path.display(),
            p.display()
        ))),
        _ => Ok(()),
    }
}
