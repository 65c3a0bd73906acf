use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{Context, Result};
use svf_core::config::RunConfig;

/// Raised for invocation problems that map to the usage exit code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Output directory of one subcommand invocation. Holds the config snapshot,
/// the seed and the source revision next to the artifacts.
pub struct RunDir {
    path: PathBuf,
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

impl RunDir {
    /// Creates `path`; an existing non-empty directory is only reused with
    /// `overwrite`, in which case it is cleared first.
    pub fn create(path: &Path, overwrite: bool, cfg: &RunConfig, seed: u64) -> Result<Self> {
        if path.exists() {
            let occupied = path.is_file()
                || fs::read_dir(path)
                    .with_context(|| format!("reading {}", path.display()))?
                    .next()
                    .is_some();
            if occupied {
                if !overwrite {
                    return Err(UsageError(format!(
                        "{} already exists; pass --overwrite to replace it",
                        path.display()
                    ))
                    .into());
                }
                if path.is_file() {
                    fs::remove_file(path)?;
                } else {
                    fs::remove_dir_all(path)?;
                }
            }
        }
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        let dir = Self {
            path: path.to_path_buf(),
        };
        dir.write("config.toml", cfg.to_toml_string()?.as_bytes())?;
        dir.write("config.hash", format!("{}\n", cfg.hash()).as_bytes())?;
        dir.write("seed", format!("{seed}\n").as_bytes())?;
        dir.write("git-describe", format!("{}\n", git_describe()).as_bytes())?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    }

    pub fn write_json<T: serde::Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}
