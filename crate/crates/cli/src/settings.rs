//! Layered configuration: defaults, then the config file, then `--set` overrides.

use anyhow::{anyhow, bail, Result};
use mpdoc_core::RunConfig;
use toml::{Table, Value};

pub fn defaults() -> Result<Table> {
    Ok(toml::from_str(&RunConfig::default().to_toml()?)?)
}

/// Deep-merges `over` into `base`; tables merge key by key, other values replace.
pub fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies one `dotted.key=value` override. The value is read as a TOML
/// literal, falling back to a bare string.
pub fn set(base: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
    let value = match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = base;
    for p in parents {
        table = match table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => bail!("override `{key}`: `{p}` is not a table"),
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_keep_defaults() {
        let mut base = defaults().unwrap();
        merge(&mut base, toml::from_str("[model]\nhidden = 64\n").unwrap());
        set(&mut base, "train.lr=0.5").unwrap();
        set(&mut base, "ablation=image-only").unwrap();
        let cfg: RunConfig = base.try_into().unwrap();
        assert_eq!(cfg.model.hidden, 64);
        assert_eq!(cfg.model.layers, RunConfig::default().model.layers);
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.ablation, "image-only");
    }

    #[test]
    fn malformed_override_is_rejected() {
        let mut base = defaults().unwrap();
        assert!(set(&mut base, "train.lr").is_err());
        assert!(set(&mut base, "seed.x=1").is_err());
    }
}
