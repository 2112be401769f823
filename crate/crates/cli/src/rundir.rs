use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

/// Record of one run directory: what produced it and what it contains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub created: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    /// Artifact name to path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
    pub timings_seconds: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            created: chrono::Local::now().to_rfc3339(),
            seed,
            config,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            timings_seconds: BTreeMap::new(),
        }
    }

    pub fn load(run: &Path) -> Result<Self> {
        let path = run.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Writes through a temporary file so a crash never leaves half a manifest.
    pub fn store(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join(".manifest.json.partial");
        fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, dir.join(MANIFEST)).context("replacing manifest")
    }
}

/// `YYYYmmdd-HHMMSS-seed<N>`.
pub fn run_name(seed: u64) -> String {
    format!("{}-seed{seed}", chrono::Local::now().format("%Y%m%d-%H%M%S"))
}

/// A directory built under a hidden temporary name and renamed into place
/// on [`Staging::commit`]. Dropping it uncommitted deletes everything.
pub struct Staging {
    tmp: PathBuf,
    dest: PathBuf,
    committed: bool,
}

impl Staging {
    pub fn new(dest: &Path, force: bool) -> Result<Self> {
        if dest.exists() && !force {
            bail!("{} already exists; pass --force to replace it", dest.display());
        }
        let parent = match dest.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let name = dest
            .file_name()
            .with_context(|| format!("{} has no directory name", dest.display()))?
            .to_string_lossy();
        let tmp = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        Ok(Self {
            tmp,
            dest: dest.to_path_buf(),
            committed: false,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.tmp
    }

    /// Writes `bytes` to `rel` inside the staging directory and records it.
    pub fn emit(&self, artifacts: &mut BTreeMap<String, String>, key: &str, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.tmp.join(rel);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        artifacts.insert(key.into(), rel.into());
        Ok(())
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        if self.dest.exists() {
            fs::remove_dir_all(&self.dest).with_context(|| format!("removing {}", self.dest.display()))?;
        }
        fs::rename(&self.tmp, &self.dest).with_context(|| format!("moving run into {}", self.dest.display()))?;
        self.committed = true;
        Ok(self.dest.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropped_staging_leaves_nothing() {
        let root = tempfile::tempdir().unwrap();
        let dest = root.path().join("run");
        {
            let s = Staging::new(&dest, false).unwrap();
            fs::write(s.dir().join("x"), "1").unwrap();
        }
        assert_eq!(fs::read_dir(root.path()).unwrap().count(), 0);
    }

    #[test]
    fn existing_destination_needs_force() {
        let root = tempfile::tempdir().unwrap();
        let dest = root.path().join("run");
        fs::create_dir(&dest).unwrap();
        fs::write(dest.join("old"), "1").unwrap();
        assert!(Staging::new(&dest, false).is_err());
        let s = Staging::new(&dest, true).unwrap();
        fs::write(s.dir().join("new"), "2").unwrap();
        s.commit().unwrap();
        assert!(dest.join("new").exists() && !dest.join("old").exists());
    }
}
