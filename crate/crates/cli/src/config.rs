//! Config-file support: a flat JSON object whose keys mirror flag names.
//! Precedence is explicit flag > config file > built-in default.

use anyhow::{Context, Result};
use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use std::path::Path;

#[derive(Default)]
pub struct FileConfig {
    values: serde_json::Map<String, serde_json::Value>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let values: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text)
            .with_context(|| format!("parsing config file {}", path.display()))?;
        Ok(FileConfig { values })
    }

    /// The effective value of an argument: the flag when given on the
    /// command line, else the config-file entry, else the flag's default.
    pub fn resolve<T: Clone + DeserializeOwned>(
        &self,
        matches: &ArgMatches,
        id: &str,
        flag_value: T,
    ) -> Result<T> {
        if matches.value_source(id) == Some(ValueSource::CommandLine) {
            return Ok(flag_value);
        }
        if let Some(v) = self.values.get(id) {
            let parsed: T = serde_json::from_value(v.clone())
                .with_context(|| format!("config key '{id}' has the wrong type"))?;
            return Ok(parsed);
        }
        Ok(flag_value)
    }
}
