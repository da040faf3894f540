//! Flat `key = value` files, used both for run configuration and for the
//! sidecars written next to checkpoints.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

#[derive(Debug, Clone, Default)]
pub struct Conf {
    values: BTreeMap<String, String>,
    origin: String,
}

impl Conf {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(Invalid(format!("{origin}:{}: expected `key = value`, got {raw:?}", n + 1)));
            };
            let key = k.trim().replace('-', "_");
            if key.is_empty() {
                bail!(Invalid(format!("{origin}:{}: empty key", n + 1)));
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                bail!(Invalid(format!("{origin}:{}: duplicate key {key}", n + 1)));
            }
        }
        Ok(Self {
            values,
            origin: origin.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn load_optional(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Invalid(format!("{}: {key} = {v:?}: {e}", self.origin)).into()),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| Invalid(format!("{}: missing key {key}", self.origin)).into())
    }

    /// Flag value if given, else the file value, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }

    /// Warns about keys this subcommand does not read.
    pub fn warn_unknown(&self, known: &[&str]) {
        for k in self.values.keys() {
            if !known.contains(&k.as_str()) {
                log::warn!("{}: key {k} is not used by this command", self.origin);
            }
        }
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).with_context(|| format!("writing {}", path.display()))
    }
}

/// Input that parsed but failed validation.
#[derive(Debug)]
pub struct Invalid(pub String);

impl Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

/// `a,b,c` into three numbers.
pub fn triple(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|e| Invalid(format!("{s:?}: {e}")))?;
    <[usize; 3]>::try_from(parts).map_err(|_| Invalid(format!("{s:?}: expected three comma-separated values")).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_dashes_and_overrides() {
        let c = Conf::parse("# run\nbatch-size = 8\nlr=0.5 # fast\n\n", "t").unwrap();
        assert_eq!(c.get::<usize>("batch_size").unwrap(), Some(8));
        assert_eq!(c.pick(None, "lr", 1.0).unwrap(), 0.5);
        assert_eq!(c.pick(Some(2.0), "lr", 1.0).unwrap(), 2.0);
        assert_eq!(c.pick(None, "epochs", 5usize).unwrap(), 5);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(Conf::parse("lr 0.5", "t").is_err());
        assert!(Conf::parse("a = 1\na = 2", "t").is_err());
        assert!(Conf::parse("lr = x", "t").unwrap().get::<f64>("lr").is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut c = Conf::default();
        c.set("mode", "fused");
        c.set("widths", "9,9,10");
        let back = Conf::parse(&c.render(), "t").unwrap();
        assert_eq!(back.require::<String>("mode").unwrap(), "fused");
        assert_eq!(triple(&back.require::<String>("widths").unwrap()).unwrap(), [9, 9, 10]);
    }
}
