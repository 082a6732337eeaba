//! Flat `key = value` run-config files mirroring the CLI flag names.
//!
//! Flags win over the config file, which wins over built-in defaults. The
//! file named by `SPOOFLAB_CONFIG` is loaded when `--config` is absent.

use anyhow::{bail, Context, Result};
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    values: HashMap<String, String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let mut values = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("{}:{}: expected `key = value`", path.display(), lineno + 1);
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { values })
    }

    /// Loads `--config` if given, else the file named by `SPOOFLAB_CONFIG`.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        if let Some(path) = explicit {
            return Self::load(path);
        }
        if let Ok(env_path) = std::env::var("SPOOFLAB_CONFIG") {
            if !env_path.is_empty() {
                return Self::load(Path::new(&env_path));
            }
        }
        Ok(Self::default())
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| anyhow::anyhow!("config key {key}: {e}")),
        }
    }
}

/// Flag value if set, else config-file value, else default.
pub fn setting<T: Copy + std::str::FromStr>(
    flag: Option<T>,
    file: &FileConfig,
    key: &str,
    default: T,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    Ok(file.get_parsed::<T>(key)?.unwrap_or(default))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "points = 150\n# comment\nstep = 0.02  # inline\n").unwrap();
        let cfg = FileConfig::load(&path).unwrap();
        assert_eq!(cfg.get_parsed::<usize>("points").unwrap(), Some(150));
        assert_eq!(cfg.get_parsed::<f64>("step").unwrap(), Some(0.02));
        assert_eq!(cfg.get_str("missing"), None);
        assert_eq!(setting(Some(10usize), &cfg, "points", 5).unwrap(), 10);
        assert_eq!(setting(None, &cfg, "points", 5).unwrap(), 150);
        assert_eq!(setting::<usize>(None, &cfg, "other", 5).unwrap(), 5);
    }

    #[test]
    fn rejects_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "no equals sign\n").unwrap();
        assert!(FileConfig::load(&path).is_err());
    }
}
