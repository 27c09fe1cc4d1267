//! Flat key=value run configuration: file parsing, command-line overrides,
//! typed accessors, and the resolved-config emission every run leaves next
//! to its outputs.

use crate::error::{CliError, Result};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// A run configuration. Later `set` calls (command-line overrides) replace
/// file values; the fully resolved state can be written back out in a form
/// the parser accepts again.
#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn empty() -> Self {
        Config::default()
    }

    /// Parses a config file: one `key = value` pair per line, `#` comments,
    /// blank lines ignored. Keys are dotted lowercase words; duplicates are
    /// rejected rather than silently resolved.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config '{}': {e}", path.display())))?;
        let mut cfg = Config::empty();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::config(format!(
                    "{}:{}: expected 'key = value', got '{line}'",
                    path.display(),
                    i + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if key.is_empty()
                || !key
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
            {
                return Err(CliError::config(format!(
                    "{}:{}: invalid key '{key}'",
                    path.display(),
                    i + 1
                )));
            }
            if cfg.values.insert(key.to_string(), value.to_string()).is_some() {
                return Err(CliError::config(format!(
                    "{}:{}: duplicate key '{key}'",
                    path.display(),
                    i + 1
                )));
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.values.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| CliError::config(format!("missing required key '{key}'")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                CliError::config(format!("key '{key}': '{raw}' is not {what}"))
            }),
        }
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.parse(key, "an unsigned integer")
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.parse(key, "an unsigned integer")
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.parse(key, "a number")
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some("true") => Ok(Some(true)),
            Some("false") => Ok(Some(false)),
            Some(raw) => Err(CliError::config(format!(
                "key '{key}': '{raw}' is not 'true' or 'false'"
            ))),
        }
    }

    /// Comma-separated list; an absent key yields `None`, an empty value an
    /// empty list.
    pub fn get_list(&self, key: &str) -> Option<Vec<String>> {
        self.get(key).map(|raw| {
            if raw.is_empty() {
                Vec::new()
            } else {
                raw.split(',').map(|s| s.trim().to_string()).collect()
            }
        })
    }

    pub fn get_f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        let Some(items) = self.get_list(key) else {
            return Ok(None);
        };
        items
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|_| {
                    CliError::config(format!("key '{key}': '{s}' is not a number"))
                })
            })
            .collect::<Result<Vec<f64>>>()
            .map(Some)
    }

    pub fn get_usize_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        let Some(items) = self.get_list(key) else {
            return Ok(None);
        };
        items
            .iter()
            .map(|s| {
                s.parse::<usize>().map_err(|_| {
                    CliError::config(format!("key '{key}': '{s}' is not an unsigned integer"))
                })
            })
            .collect::<Result<Vec<usize>>>()
            .map(Some)
    }

    /// Array shape written as `6x4x2`.
    pub fn get_shape(&self, key: &str) -> Result<Option<Vec<usize>>> {
        let Some(raw) = self.get(key) else {
            return Ok(None);
        };
        let dims: Result<Vec<usize>> = raw
            .split('x')
            .map(|s| {
                s.trim().parse::<usize>().ok().filter(|&m| m > 0).ok_or_else(|| {
                    CliError::config(format!(
                        "key '{key}': '{raw}' is not a shape like 6x4x2"
                    ))
                })
            })
            .collect();
        dims.map(Some)
    }

    pub fn get_path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.require(key).map(PathBuf::from)
    }

    /// Output directory, created on demand.
    pub fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.require_path("out")?;
        fs::create_dir_all(&dir)
            .map_err(|e| CliError::Io(format!("cannot create '{}': {e}", dir.display())))?;
        Ok(dir)
    }

    /// Rejects keys outside the command's vocabulary: `fixed` names plus
    /// `dim<k>.<suffix>` keys with a positive dimension number and a listed
    /// suffix. Globals (`seed`, `out`, `threads`, `format`, `config`) are
    /// always accepted.
    pub fn check_keys(&self, command: &str, fixed: &[&str], dim_suffixes: &[&str]) -> Result<()> {
        const GLOBAL: [&str; 4] = ["seed", "out", "threads", "format"];
        for key in self.values.keys() {
            if GLOBAL.contains(&key.as_str()) || fixed.contains(&key.as_str()) {
                continue;
            }
            if let Some(rest) = key.strip_prefix("dim") {
                if let Some((num, suffix)) = rest.split_once('.') {
                    if num.parse::<usize>().map(|n| n >= 1).unwrap_or(false)
                        && dim_suffixes.contains(&suffix)
                    {
                        continue;
                    }
                }
            }
            return Err(CliError::config(format!(
                "unknown key '{key}' for '{command}'"
            )));
        }
        Ok(())
    }

    /// Writes the fully resolved configuration, sorted by key, in the same
    /// format the parser reads.
    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        let pairs: Vec<(String, String)> = self
            .values
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        write_pairs(path, &pairs)
    }
}

/// Writes `key = value` lines; shared by the resolved-config emission and
/// the fitted-model scalar files.
pub fn write_pairs(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    let mut file = fs::File::create(path)
        .map_err(|e| CliError::Io(format!("cannot create '{}': {e}", path.display())))?;
    file.write_all(out.as_bytes())?;
    Ok(())
}
