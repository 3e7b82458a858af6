use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

/// Tracks files written by a subcommand and deletes them unless committed.
#[derive(Default)]
pub struct Outputs {
    written: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn new() -> Self {
        Outputs::default()
    }

    /// Registers a path that is about to be written by other code.
    pub fn claim(&mut self, path: &Path) -> CliResult<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        self.written.push(path.to_path_buf());
        Ok(())
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> CliResult<()> {
        self.claim(path)?;
        fs::write(path, bytes).map_err(|e| CliError::io(path, e))
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.written {
                let _ = fs::remove_file(p);
            }
        }
    }
}

/// Fails with a usage error when an input is missing or an output would overwrite an input.
pub fn check_paths(inputs: &[&Path], outputs: &[&Path]) -> CliResult<()> {
    for p in inputs {
        if !p.exists() {
            return Err(CliError::Usage(format!("input path does not exist: {}", p.display())));
        }
    }
    let canon = |p: &Path| fs::canonicalize(p).ok();
    for o in outputs {
        if let Some(co) = canon(o) {
            if inputs.iter().any(|i| canon(i).as_deref() == Some(co.as_path())) {
                return Err(CliError::Usage(format!("output would overwrite input: {}", o.display())));
            }
        }
    }
    Ok(())
}
