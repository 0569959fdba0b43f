use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use super::RunConfig;
use crate::error::{Error, Result};

/// Package version plus the revision the binary was built from.
pub const BUILD_ID: &str = concat!(env!("CARGO_PKG_VERSION"), "-", env!("COOP_EBM_GIT_REV"));

const LOCK_NAME: &str = ".lock";

/// An output directory held exclusively through a lock file, released on
/// drop.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn acquire(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let lock = path.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(Self { path: path.to_path_buf() }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(lock)),
            Err(e) => Err(Error::io(&lock, e)),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.path.join(format!("checkpoint_{step:08}.cmeb"))
    }

    /// `manifest.toml`: command, build, seed, config hash, results, and the
    /// fully resolved config.
    pub fn write_manifest(&self, command: &str, cfg: &RunConfig, results: &[(String, String)]) -> Result<()> {
        let mut doc = toml::Table::new();
        doc.insert("command".into(), command.into());
        doc.insert("build".into(), BUILD_ID.into());
        doc.insert("seed".into(), toml::Value::Integer(cfg.seed as i64));
        doc.insert("config_hash".into(), cfg.hash()?.into());
        let mut res = toml::Table::new();
        for (k, v) in results {
            res.insert(k.clone(), v.clone().into());
        }
        doc.insert("results".into(), res.into());
        let config = toml::Table::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?;
        doc.insert("config".into(), config.into());
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        let path = self.path.join("manifest.toml");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_NAME));
    }
}

/// Reads the `[config]` table back out of a manifest.
pub fn config_from_manifest(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let cfg = doc
        .get("config")
        .cloned()
        .ok_or_else(|| Error::Config(format!("{}: no [config] table", path.display())))?;
    let text = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    RunConfig::from_toml_str(&text)
}
