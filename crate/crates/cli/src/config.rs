//! Flat key=value run configuration: defaults, overridden by a config file,
//! overridden by command-line flags. Every key a command resolves is
//! recorded and echoed into the output directory as run_config.txt so an
//! artifact can be reproduced from its echo alone.

use anyhow::{bail, Context, Result};
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Default)]
pub struct RunConfig {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut file = BTreeMap::new();
        if let Some(path) = path {
            let body = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (i, raw) in body.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .with_context(|| format!("{}:{}: expected key = value", path.display(), i + 1))?;
                file.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(RunConfig { file, resolved: BTreeMap::new() })
    }

    /// Resolves one key: flag beats file beats default. The winner is
    /// recorded for the run_config echo.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        <T as FromStr>::Err: Display,
    {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => match raw.parse::<T>() {
                    Ok(v) => v,
                    Err(e) => bail!("config key {key} = {raw:?}: {e}"),
                },
                None => default,
            },
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Records an output value (fitted parameters, derived settings) so it
    /// lands in the echo.
    pub fn note(&mut self, key: &str, value: impl Display) {
        self.resolved.insert(key.to_string(), value.to_string());
    }

    pub fn write_echo(&self, out_dir: &Path) -> Result<()> {
        let mut body = String::new();
        for (k, v) in &self.resolved {
            body.push_str(&format!("{k} = {v}\n"));
        }
        std::fs::write(out_dir.join("run_config.txt"), body)
            .with_context(|| format!("writing run_config.txt to {}", out_dir.display()))?;
        Ok(())
    }
}
