//! Run configuration: a flat, sectioned `key = value` text file.
//!
//! ```text
//! [run]
//! seed = 123
//! [tokenizer]
//! codes = 64
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown sections and keys are
//! errors. Sections may be omitted; missing keys keep their defaults.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::ConditionSet;
use crate::flow::FlowConfig;
use crate::metrics::NaturalnessConfig;
use crate::tokenizer::TokenizerConfig;

/// A config section settable key by key and listable in a canonical order.
pub trait Section {
    const NAME: &'static str;
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
    fn pairs(&self) -> Vec<(String, String)>;

    /// Rebuilds a section from listed pairs, starting from `base`.
    fn from_pairs<'a>(mut base: Self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self>
    where
        Self: Sized,
    {
        for (k, v) in pairs {
            base.set(k, v)?;
        }
        Ok(base)
    }
}

pub fn field<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse `{value}`")))
}

/// Comma-separated list; an empty value is an empty list.
pub fn list<T: FromStr>(section: &str, key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| field(section, key, s))
        .collect()
}

pub fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn unknown_key(section: &str, key: &str) -> Error {
    Error::Config(format!("unknown key `{key}` in [{section}]"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 123 }
    }
}

impl Section for RunSection {
    const NAME: &'static str = "run";

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = field(Self::NAME, key, value)?,
            _ => return Err(unknown_key(Self::NAME, key)),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(String, String)> {
        vec![("seed".into(), self.seed.to_string())]
    }
}

/// Window extraction and the held-out fraction.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub window: usize,
    pub stride: usize,
    pub val_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            window: 32,
            stride: 4,
            val_fraction: 0.1,
        }
    }
}

impl Section for DataSection {
    const NAME: &'static str = "data";

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let n = Self::NAME;
        match key {
            "window" => self.window = field(n, key, value)?,
            "stride" => self.stride = field(n, key, value)?,
            "val_fraction" => self.val_fraction = field(n, key, value)?,
            _ => return Err(unknown_key(n, key)),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(String, String)> {
        vec![
            ("window".into(), self.window.to_string()),
            ("stride".into(), self.stride.to_string()),
            ("val_fraction".into(), self.val_fraction.to_string()),
        ]
    }
}

/// The condition set the flow is trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionsSection {
    pub set: ConditionSet,
}

impl Default for ConditionsSection {
    fn default() -> Self {
        Self {
            set: ConditionSet::all(),
        }
    }
}

impl Section for ConditionsSection {
    const NAME: &'static str = "conditions";

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "set" => self.set = ConditionSet::parse_list(value)?,
            _ => return Err(unknown_key(Self::NAME, key)),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(String, String)> {
        vec![("set".into(), self.set.to_string())]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub tokenizer: TokenizerConfig,
    pub flow: FlowConfig,
    pub conditions: ConditionsSection,
    pub metrics: NaturalnessConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("config", i + 1, "expected `key = value`"))?;
            let (k, v) = (k.trim(), v.trim());
            let sec = section
                .as_deref()
                .ok_or_else(|| Error::parse("config", i + 1, "key outside of a section"))?;
            let r = match sec {
                RunSection::NAME => cfg.run.set(k, v),
                DataSection::NAME => cfg.data.set(k, v),
                TokenizerConfig::NAME => cfg.tokenizer.set(k, v),
                FlowConfig::NAME => cfg.flow.set(k, v),
                ConditionsSection::NAME => cfg.conditions.set(k, v),
                NaturalnessConfig::NAME => cfg.metrics.set(k, v),
                other => Err(Error::Config(format!("unknown section [{other}]"))),
            };
            r.map_err(|e| Error::parse("config", i + 1, e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&crate::io::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.window == 0 || d.stride == 0 {
            return Err(Error::Config("window and stride must be positive".into()));
        }
        if !(0.0..1.0).contains(&d.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        self.tokenizer.validate(d.window)?;
        self.flow.validate()?;
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |name: &str, pairs: Vec<(String, String)>| {
            out.push_str(&format!("[{name}]\n"));
            for (k, v) in pairs {
                out.push_str(&format!("{k} = {v}\n"));
            }
        };
        push(RunSection::NAME, self.run.pairs());
        push(DataSection::NAME, self.data.pairs());
        push(TokenizerConfig::NAME, self.tokenizer.pairs());
        push(FlowConfig::NAME, self.flow.pairs());
        push(ConditionsSection::NAME, self.conditions.pairs());
        push(NaturalnessConfig::NAME, self.metrics.pairs());
        out
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Metadata embedded in every artifact written under this config.
    pub fn stamp(&self) -> Vec<(String, String)> {
        vec![
            ("fingerprint".into(), self.fingerprint()),
            ("seed".into(), self.run.seed.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.run.seed = 7;
        cfg.tokenizer.codes = 16;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
        assert_ne!(RunConfig::default().fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn rejects_unknown_keys_and_sections() {
        assert!(RunConfig::parse("[run]\nsed = 1\n").is_err());
        assert!(RunConfig::parse("[nope]\na = 1\n").is_err());
        assert!(RunConfig::parse("seed = 1\n").is_err());
        assert!(RunConfig::parse("[run]\nseed\n").is_err());
        assert!(RunConfig::parse("[run]\nseed = x\n").is_err());
    }

    #[test]
    fn comments_and_partial_sections() {
        let cfg = RunConfig::parse("# desk run\n[run]\nseed = 9 # inline\n\n[data]\nstride = 2\n").unwrap();
        assert_eq!(cfg.run.seed, 9);
        assert_eq!(cfg.data.stride, 2);
        assert_eq!(cfg.data.window, 32);
    }
}
