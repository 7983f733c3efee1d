//! Plain-text `key = value` configuration. Command-line flags win over the file.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

pub const KEYS: &[&str] = &[
    "seed",
    "steps",
    "scenes",
    "task",
    "mode",
    "gt",
    "det",
    "out",
    "csv",
    "sizes",
    "channels",
    "runs",
    "nonlocal",
    "min_score",
    "tol",
    "step",
    "sequential",
    "every",
];

#[derive(Debug, Default, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("config line {}: expected key = value", i + 1))?;
            let key = k.trim().replace('-', "_");
            if !KEYS.contains(&key.as_str()) {
                return Err(format!("config line {}: unknown key '{key}'", i + 1));
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(format!("config line {}: duplicate key '{key}'", i + 1));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        Self::parse(&text)
    }

    /// The flag value if given, else the parsed config value, else `None`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, String>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| format!("config key '{key}': {e}")),
        }
    }

    pub fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, String>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    /// A boolean switch: set by the flag, or by `true`/`false` in the file.
    pub fn switch(&self, flag: bool, key: &str) -> Result<bool, String> {
        Ok(flag || self.pick::<bool>(None, key)?.unwrap_or(false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let c = Config::parse("# run settings\nsteps = 12\nmin-score=0.5  # lower\n\ntask=bev\n")
            .unwrap();
        assert_eq!(c.or(None, "steps", 200usize).unwrap(), 12);
        assert_eq!(c.or(Some(3usize), "steps", 200).unwrap(), 3);
        assert_eq!(c.or(None, "min_score", 0.75).unwrap(), 0.5);
        assert_eq!(c.or(None, "seed", 9u64).unwrap(), 9);
        assert!(!c.switch(false, "sequential").unwrap());
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(Config::parse("steps").is_err());
        assert!(Config::parse("colour = red").is_err());
        assert!(Config::parse("steps = 1\nsteps = 2").is_err());
        let c = Config::parse("steps = many").unwrap();
        assert!(c.or(None, "steps", 1usize).is_err());
    }
}
