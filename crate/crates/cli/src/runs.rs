//! Indexed, append-only run directories.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use slv_core::Config;

pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates `<parent>/NNNN-<command>` at the next free index and copies
    /// the resolved config into it. Existing runs are never reused.
    pub fn create(parent: &Path, command: &str, cfg: &Config) -> Result<Self> {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        let mut next = next_index(parent)?;
        loop {
            let path = parent.join(format!("{next:04}-{command}"));
            match fs::create_dir(&path) {
                Ok(()) => {
                    fs::write(path.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == ErrorKind::AlreadyExists => next += 1,
                Err(e) => return Err(e).with_context(|| format!("creating {}", path.display())),
            }
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

fn next_index(parent: &Path) -> Result<usize> {
    let mut max = None;
    for entry in fs::read_dir(parent)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(i) = name.split('-').next().and_then(|p| p.parse::<usize>().ok()) {
            max = max.max(Some(i));
        }
    }
    Ok(max.map_or(0, |m| m + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runs_are_indexed_and_never_reused() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = Config::tiny();
        let a = RunDir::create(dir.path(), "train", &cfg).unwrap();
        let b = RunDir::create(dir.path(), "train", &cfg).unwrap();
        assert_eq!(a.path().file_name().unwrap(), "0000-train");
        assert_eq!(b.path().file_name().unwrap(), "0001-train");
        let back: Config = serde_json::from_str(&fs::read_to_string(b.path().join("config.json")).unwrap()).unwrap();
        assert_eq!(back, cfg);
        fs::create_dir(dir.path().join("0002-evaluate")).unwrap();
        let c = RunDir::create(dir.path(), "evaluate", &cfg).unwrap();
        assert_eq!(c.path().file_name().unwrap(), "0003-evaluate");
    }
}
