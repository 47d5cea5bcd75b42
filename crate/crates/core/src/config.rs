//! Plain-text `key=value` run configuration.
//!
//! One setting per line, `#` starts a comment. Every command declares the keys
//! it understands up front, so a typo is an error rather than a silently
//! ignored setting. The resolved settings echo losslessly into report headers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Starts from defaults; the default keys are the only ones accepted later.
    pub fn with_defaults(defaults: &[(&str, &str)]) -> Self {
        Self {
            values: defaults
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Adds keys that a command accepts on top of a module's defaults.
    pub fn extend(&mut self, extra: &[(&str, &str)]) {
        for (k, v) in extra {
            self.values.entry(k.to_string()).or_insert_with(|| v.to_string());
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    /// Applies `key=value` lines on top of the current values.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_text(&text)
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get_str(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{raw}`")))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.get_str(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::Config(format!("`{key}`: expected a boolean, got `{other}`"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Sorted `key=value` lines.
    pub fn echo(&self) -> String {
        self.iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k}={v}");
            s
        })
    }

    /// First 16 hex digits of SHA-256 over the echo.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.echo().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Comment block opening every CSV: version, hash, then the echo.
    pub fn preamble(&self) -> String {
        let mut s = format!("# xaiseg {VERSION}\n# config_hash={}\n", self.hash());
        for (k, v) in self.iter() {
            let _ = writeln!(s, "# {k}={v}");
        }
        s
    }
}

/// Formats a real with 9 significant digits.
pub fn sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (8 - mag).max(0) as usize;
    if mag < -4 {
        format!("{x:.8e}")
    } else {
        format!("{x:.decimals$}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> RunConfig {
        RunConfig::with_defaults(&[("lr", "0.01"), ("epochs", "3"), ("flag", "false")])
    }

    #[test]
    fn merge_and_get() {
        let mut c = base();
        c.merge_text("# comment\nlr = 0.5  # trailing\n\nflag=true\n").unwrap();
        assert_eq!(c.get::<f64>("lr").unwrap(), 0.5);
        assert_eq!(c.get::<usize>("epochs").unwrap(), 3);
        assert!(c.get_bool("flag").unwrap());
        assert_eq!(c.echo(), "epochs=3\nflag=true\nlr=0.5\n");
    }

    #[test]
    fn unknown_key_is_an_error() {
        let e = base().merge_text("lr=1\nepoch=4\n").unwrap_err();
        assert!(e.to_string().contains("epoch"), "{e}");
        assert!(base().merge_text("novalue").is_err());
    }

    #[test]
    fn hash_tracks_values() {
        let a = base();
        let mut b = base();
        assert_eq!(a.hash(), b.hash());
        b.set("lr", "0.02").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        assert!(a.preamble().starts_with("# xaiseg "));
    }

    #[test]
    fn significant_digits() {
        assert_eq!(sig9(0.215762), "0.215762000");
        assert_eq!(sig9(1.0), "1.00000000");
        assert_eq!(sig9(123.456), "123.456000");
        assert_eq!(sig9(0.0), "0");
        assert_eq!(sig9(-2.5e-7), "-2.50000000e-7");
    }
}
