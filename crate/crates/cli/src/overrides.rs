//! `--set key=value` overrides applied to the TOML form of a configuration.

use anyhow::{anyhow, bail, Context, Result};
use objmem::experiment::ExperimentConfig;
use toml::Value;

/// Parses `raw` as a TOML literal, falling back to a bare string.
fn literal(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn apply(config: &ExperimentConfig, overrides: &[String]) -> Result<ExperimentConfig> {
    if overrides.is_empty() {
        return Ok(config.clone());
    }
    let mut root = Value::try_from(config).context("encoding configuration")?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{item}` is not of the form KEY=VALUE"))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        let (last, parents) = path.split_last().expect("split yields one part");
        let mut node = &mut root;
        for part in parents {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(*part))
                .ok_or_else(|| anyhow!("unknown configuration section `{part}` in `{key}`"))?;
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| anyhow!("`{key}` does not name a configuration key"))?;
        let optional = parents.is_empty() && *last == "budget_cap";
        if !table.contains_key(*last) && !optional {
            bail!("unknown configuration key `{key}`");
        }
        table.insert(last.to_string(), literal(raw.trim()));
    }
    let updated: ExperimentConfig = root.try_into().context("applying overrides")?;
    updated.validate()?;
    Ok(updated)
}
