//! Layered configuration: built-in default, then the config file, then
//! command-line flags. Each effective key is reported with its origin.

use std::fmt;
use std::path::Path;

use omnifield::error::{Error, Result};
use omnifield::util::read_text;
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "config",
            Source::Flag => "flag",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Resolved<T> {
    pub value: T,
    /// `(key, rendered value, origin)`, keys sorted.
    pub origins: Vec<(String, String, Source)>,
}

impl<T> Resolved<T> {
    pub fn report(&self, title: &str) -> String {
        let width = self.origins.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
        let mut s = format!("{title}:\n");
        for (k, v, src) in &self.origins {
            s.push_str(&format!("  {k:<width$} = {v}  ({src})\n"));
        }
        s
    }
}

/// Reads a TOML table from `path`; a missing file is a not-found error.
pub fn read_table(path: &Path) -> Result<Table> {
    let text = read_text(path)?;
    text.parse::<Table>()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Merges `file` over the defaults of `T`, then `flags` over both. Unknown
/// keys in either layer are configuration errors.
pub fn resolve<T>(file: Option<Table>, flags: Table) -> Result<Resolved<T>>
where
    T: Serialize + DeserializeOwned + Default,
{
    let defaults = match Value::try_from(T::default()) {
        Ok(Value::Table(t)) => t,
        _ => return Err(Error::Config("defaults do not serialize to a table".into())),
    };
    let mut merged = defaults.clone();
    let mut origin: Vec<(String, Source)> = defaults.keys().map(|k| (k.clone(), Source::Default)).collect();
    let mut apply = |layer: Table, src: Source, merged: &mut Table| -> Result<()> {
        for (k, v) in layer {
            if !defaults.contains_key(&k) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
            if let Some(o) = origin.iter_mut().find(|(key, _)| *key == k) {
                o.1 = src;
            }
            merged.insert(k, v);
        }
        Ok(())
    };
    if let Some(f) = file {
        apply(f, Source::File, &mut merged)?;
    }
    apply(flags, Source::Flag, &mut merged)?;
    let value: T = Value::Table(merged.clone())
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut origins: Vec<(String, String, Source)> = origin
        .into_iter()
        .map(|(k, src)| {
            let v = merged.get(&k).map(|v| v.to_string()).unwrap_or_default();
            (k, v, src)
        })
        .collect();
    origins.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(Resolved { value, origins })
}

/// Builds the flag layer from optional values.
#[derive(Default)]
pub struct FlagTable(pub Table);

impl FlagTable {
    pub fn set<V: Into<Value>>(&mut self, key: &str, v: Option<V>) -> &mut Self {
        if let Some(v) = v {
            self.0.insert(key.to_string(), v.into());
        }
        self
    }

    pub fn set_str(&mut self, key: &str, v: Option<&str>) -> &mut Self {
        self.set(key, v.map(|s| Value::String(s.to_string())))
    }
}
