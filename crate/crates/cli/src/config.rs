//! Plain-text `key = value` run configuration. Every command-line flag has a
//! key of the same name; values given on the command line win.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::CliError;

pub const KEYS: &[&str] = &[
    "input", "ref", "clean", "style", "out", "epochs", "lr", "lambda", "seed", "precision", "force", "jobs",
];

/// Parsed file: repeated keys (e.g. several `input` lines) accumulate.
#[derive(Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, Vec<String>>,
    path: PathBuf,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Usage(format!("{}:{}: expected `key = value`", path.display(), no + 1)));
            };
            let key = key.trim().trim_start_matches("--");
            if !KEYS.contains(&key) {
                return Err(CliError::Usage(format!("{}:{}: unknown key `{key}`", path.display(), no + 1)));
            }
            values.entry(key.to_string()).or_default().push(value.trim().to_string());
        }
        Ok(ConfigFile {
            values,
            path: path.to_path_buf(),
        })
    }

    pub fn all(&self, key: &str) -> &[String] {
        self.values.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn paths(&self, key: &str) -> Vec<PathBuf> {
        self.all(key).iter().map(PathBuf::from).collect()
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.all(key).last() {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                CliError::Usage(format!("{}: invalid value `{v}` for `{key}`", self.path.display()))
            }),
        }
    }
}
