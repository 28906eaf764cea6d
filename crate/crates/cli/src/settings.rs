//! Layered settings: command-line flags override the config file, which
//! overrides values embedded in a checkpoint, which override built-in
//! defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;

/// A flat TOML key-value file.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    table: toml::Table,
    path: Option<PathBuf>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let table: toml::Table = text
            .parse()
            .with_context(|| format!("parsing config file {}", path.display()))?;
        Ok(Self {
            table,
            path: Some(path.to_path_buf()),
        })
    }

    pub fn from_str(text: &str) -> Result<Self> {
        Ok(Self {
            table: text.parse().context("parsing config text")?,
            path: None,
        })
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(v) => v.clone().try_into().map(Some).with_context(|| {
                format!(
                    "config key {key:?} in {} has the wrong type",
                    self.path
                        .as_deref()
                        .map_or("config".to_string(), |p| p.display().to_string())
                )
            }),
        }
    }

    pub fn contains(&self, key: &str) -> bool {
        self.table.contains_key(key)
    }

    /// Rejects keys this subcommand does not understand.
    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        let unknown: Vec<&String> = self
            .table
            .keys()
            .filter(|k| !known.contains(&k.as_str()))
            .collect();
        if !unknown.is_empty() {
            bail!(
                "unknown config keys {:?}; this subcommand accepts {:?}",
                unknown,
                known
            );
        }
        Ok(())
    }
}

/// Picks the flag value, else the config file's, else `fallback`.
pub fn resolve<T: DeserializeOwned>(
    flag: Option<T>,
    file: &ConfigFile,
    key: &str,
    fallback: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    Ok(file.get(key)?.unwrap_or(fallback))
}

/// Like [`resolve`] for values without a default.
pub fn resolve_opt<T: DeserializeOwned>(
    flag: Option<T>,
    file: &ConfigFile,
    key: &str,
    fallback: Option<T>,
) -> Result<Option<T>> {
    if flag.is_some() {
        return Ok(flag);
    }
    Ok(file.get(key)?.or(fallback))
}
