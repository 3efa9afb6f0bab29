//! Run settings. Later layers win: config file, then `--set` pairs, then
//! dedicated flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use powerset_align::harness::InstanceDistribution;
use powerset_align::nla::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Random,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum VariantArg {
    T1,
    T2,
    Sbar,
}

/// Every setting is optional; commands fall back to the library defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: Option<u64>,
    pub batch: Option<PathBuf>,
    pub mask_source: Option<MaskSource>,
    pub mask_file: Option<PathBuf>,

    pub batch_size: Option<usize>,
    pub grid: Option<(usize, usize)>,
    pub tokens: Option<usize>,
    pub dim: Option<usize>,
    pub masks: Option<usize>,

    pub variant: Option<VariantArg>,
    pub act: Option<Activation>,
    pub tau: Option<f64>,
    pub alpha: Option<f64>,
    pub mask_cap: Option<usize>,

    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub clip_temperature: Option<f64>,

    pub trials: Option<usize>,
    pub batches: Option<usize>,
    #[serde(deserialize_with = "one_or_many")]
    pub taus: Option<Vec<f64>>,
    #[serde(deserialize_with = "one_or_many")]
    pub alphas: Option<Vec<f64>>,
    #[serde(deserialize_with = "one_or_many")]
    pub counts: Option<Vec<usize>>,
    pub min_secs: Option<f64>,
    pub step: Option<f64>,
    /// Largest gradient-check error that still passes.
    pub tolerance: Option<f64>,
    /// When set, `sweep` fails on any point whose correlation is below it.
    pub min_pearson: Option<f64>,
    pub distribution: Option<InstanceDistribution>,
}

impl Settings {
    /// Fields set in `top` replace those in `self`.
    pub fn overlay(self, top: &Settings) -> Result<Settings> {
        let mut base = to_object(&self)?;
        for (key, value) in to_object(top)? {
            if !value.is_null() {
                base.insert(key, value);
            }
        }
        Ok(serde_json::from_value(Value::Object(base))?)
    }

    /// Parses `key = value` pairs. Values are read as JSON when possible,
    /// comma-separated values become lists, anything else is a string.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a str>) -> Result<Settings> {
        let mut map = Map::new();
        for (n, pair) in pairs.into_iter().enumerate() {
            let Some((key, value)) = pair.split_once('=') else {
                bail!("setting {}: expected key=value, found {pair:?}", n + 1);
            };
            map.insert(key.trim().replace('-', "_"), scalar_or_list(value.trim()));
        }
        serde_json::from_value(Value::Object(map)).context("invalid setting")
    }

    /// Reads a JSON object, or `key = value` lines with `#` comments.
    pub fn load(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let parsed = if text.trim_start().starts_with('{') {
            serde_json::from_str(&text).map_err(anyhow::Error::from)
        } else {
            let lines = text
                .lines()
                .map(|l| l.split('#').next().unwrap_or("").trim())
                .filter(|l| !l.is_empty());
            Self::from_pairs(lines)
        };
        parsed.with_context(|| format!("config {}", path.display()))
    }
}

/// Accepts a list or a single value, since `taus = 0.01` has no comma.
fn one_or_many<'de, D, T>(d: D) -> std::result::Result<Option<Vec<T>>, D::Error>
where
    D: serde::Deserializer<'de>,
    T: Deserialize<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany<T> {
        Many(Vec<T>),
        One(T),
    }
    Ok(Option::<OneOrMany<T>>::deserialize(d)?.map(|v| match v {
        OneOrMany::Many(v) => v,
        OneOrMany::One(x) => vec![x],
    }))
}

fn to_object(s: &Settings) -> Result<Map<String, Value>> {
    match serde_json::to_value(s)? {
        Value::Object(map) => Ok(map),
        _ => unreachable!("settings serialize to an object"),
    }
}

fn scalar(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_owned()))
}

fn scalar_or_list(text: &str) -> Value {
    if text.contains(',') && !text.starts_with('[') {
        Value::Array(text.split(',').map(|t| scalar(t.trim())).collect())
    } else {
        scalar(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_parse_scalars_lists_and_enums() {
        let s = Settings::from_pairs(["tau = 0.01", "grid=5,6", "act=tanh", "taus=0.1,0.01", "mask-source=file"]).unwrap();
        assert_eq!(s.tau, Some(0.01));
        assert_eq!(s.grid, Some((5, 6)));
        assert_eq!(s.act, Some(Activation::Tanh));
        assert_eq!(s.taus, Some(vec![0.1, 0.01]));
        assert_eq!(s.mask_source, Some(MaskSource::File));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Settings::from_pairs(["tua=0.1"]).is_err());
        assert!(Settings::from_pairs(["tau"]).is_err());
    }

    #[test]
    fn single_value_lists() {
        let s = Settings::from_pairs(["taus=0.01", "counts=[4]"]).unwrap();
        assert_eq!((s.taus, s.counts), (Some(vec![0.01]), Some(vec![4])));
    }

    #[test]
    fn overlay_keeps_unset_fields() {
        let base = Settings::from_pairs(["tau=0.1", "alpha=0.5"]).unwrap();
        let top = Settings::from_pairs(["tau=0.2"]).unwrap();
        let merged = base.overlay(&top).unwrap();
        assert_eq!((merged.tau, merged.alpha), (Some(0.2), Some(0.5)));
    }
}
