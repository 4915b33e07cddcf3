//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, keys may be dotted
//! (`train.epochs`). Values stay strings until a typed getter asks for them,
//! so unknown keys are carried along and echoed back. The echo is sorted, so
//! two runs with the same settings produce identical configuration blocks.

use crate::net::{LayerSpec, NetworkSpec};
use crate::tensor::{ActKind, Aggregation};
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Self {
        Config::default()
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::input(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(Error::input(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::input(format!(
                    "line {}: key {key:?} set twice",
                    lineno + 1
                )));
            }
        }
        Ok(Config { entries })
    }

    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets or replaces a key; used for command-line overrides.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn typed<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::input(format!("key {key:?}: {v:?} is not {what}"))
            }),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self.typed(key, "an unsigned integer")?.unwrap_or(default))
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.typed(key, "an unsigned integer")?.unwrap_or(default))
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.typed(key, "a number")?.unwrap_or(default))
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.entries.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(v) => Err(Error::input(format!("key {key:?}: {v:?} is not a boolean"))),
        }
    }

    pub fn get_str<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }

    /// Sorted `key = value` lines; the canonical settings block written next
    /// to every run's outputs.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Builds a network description from `net.*` keys.
///
/// `net.input_dim` gives the width entering the first layer. `net.layers` is
/// a comma-separated stack; widths chain automatically:
///
/// - `dense:OUT` or `dense:OUT:nobias`
/// - `farkas:OUT` with optional `:sum` / `:mean` (default `net.agg` or sum)
/// - `block:HIDDEN` with optional `:sum` / `:mean` (output width grows by 1)
/// - `bn`
/// - `relu`, `leaky:ALPHA`, `elu:ALPHA`
///
/// `net.cutoff` and `net.epsilon` apply to every guaranteed layer and block.
pub fn net_spec_from_config(cfg: &Config) -> Result<(usize, NetworkSpec)> {
    let input_dim = cfg.get_usize("net.input_dim", 0)?;
    if input_dim == 0 {
        return Err(Error::input("net.input_dim must be set and positive".to_string()));
    }
    let layers_text = cfg
        .get("net.layers")
        .ok_or_else(|| Error::input("net.layers must be set".to_string()))?;
    let default_agg: Aggregation = cfg.get_str("net.agg", "sum").parse()?;
    let cutoff = cfg.get_f64("net.cutoff", 0.0)?;
    let epsilon = cfg.get_f64("net.epsilon", crate::farkas::DEFAULT_EPSILON)?;

    let mut layers = Vec::new();
    let mut width = input_dim;
    for item in layers_text.split(',') {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        let mut parts = item.split(':');
        let head = parts.next().unwrap_or("");
        let rest: Vec<&str> = parts.collect();
        let parse_out = |s: Option<&&str>| -> Result<usize> {
            s.and_then(|v| v.parse().ok())
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::input(format!("layer {item:?}: missing or bad width")))
        };
        let parse_agg = |s: Option<&&str>| -> Result<Aggregation> {
            match s {
                None => Ok(default_agg),
                Some(v) => v.parse(),
            }
        };
        match head {
            "dense" => {
                let out = parse_out(rest.first())?;
                let bias = match rest.get(1) {
                    None => true,
                    Some(&"nobias") => false,
                    Some(v) => {
                        return Err(Error::input(format!("layer {item:?}: unknown option {v:?}")))
                    }
                };
                layers.push(LayerSpec::Dense { input: width, output: out, bias });
                width = out;
            }
            "farkas" => {
                let out = parse_out(rest.first())?;
                let agg = parse_agg(rest.get(1))?;
                layers.push(LayerSpec::FarkasDense {
                    input: width,
                    output: out,
                    agg,
                    activation: ActKind::Relu,
                    cutoff,
                    epsilon,
                });
                width = out;
            }
            "block" => {
                let hidden = parse_out(rest.first())?;
                let agg = parse_agg(rest.get(1))?;
                layers.push(LayerSpec::FarkasResidual {
                    input: width,
                    hidden,
                    agg,
                    activation: ActKind::Relu,
                    cutoff,
                    epsilon,
                });
                width += 1;
            }
            "bn" => layers.push(LayerSpec::BatchNorm { features: width }),
            "relu" => layers.push(LayerSpec::Activation { kind: ActKind::Relu }),
            "leaky" => {
                let alpha = rest
                    .first()
                    .and_then(|v| v.parse().ok())
                    .unwrap_or(0.01);
                layers.push(LayerSpec::Activation {
                    kind: ActKind::LeakyRelu { alpha },
                });
            }
            "elu" => {
                let alpha = rest
                    .first()
                    .and_then(|v| v.parse().ok())
                    .unwrap_or(1.0);
                layers.push(LayerSpec::Activation {
                    kind: ActKind::Elu { alpha },
                });
            }
            other => {
                return Err(Error::input(format!("unknown layer kind {other:?} in net.layers")))
            }
        }
    }
    if layers.is_empty() {
        return Err(Error::input("net.layers is empty".to_string()));
    }
    Ok((input_dim, NetworkSpec::new(layers)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_dotted_keys() {
        let cfg = Config::parse(
            "# a run\nseed = 42\n\ntrain.epochs = 10 # inline\n  net.agg=mean\n",
        )
        .unwrap();
        assert_eq!(cfg.get("seed"), Some("42"));
        assert_eq!(cfg.get_u64("train.epochs", 0).unwrap(), 10);
        assert_eq!(cfg.get("net.agg"), Some("mean"));
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(Config::parse("a = 1\na = 2\n").is_err());
        assert!(Config::parse("just words\n").is_err());
        assert!(Config::parse(" = 3\n").is_err());
    }

    #[test]
    fn typed_getters_report_bad_values() {
        let cfg = Config::parse("lr = fast\n").unwrap();
        assert!(cfg.get_f64("lr", 0.1).is_err());
        assert_eq!(cfg.get_f64("missing", 0.25).unwrap(), 0.25);
        assert!(Config::parse("flag = maybe\n").unwrap().get_bool("flag", false).is_err());
    }

    #[test]
    fn echo_is_sorted_and_reparses() {
        let mut cfg = Config::parse("zebra = 1\nalpha = 2\n").unwrap();
        cfg.set("mid.key", 3);
        let echo = cfg.echo();
        assert_eq!(echo, "alpha = 2\nmid.key = 3\nzebra = 1\n");
        assert_eq!(Config::parse(&echo).unwrap(), cfg);
    }

    #[test]
    fn builds_a_layer_stack() {
        let cfg = Config::parse(
            "net.input_dim = 2\nnet.layers = farkas:8:mean, bn, dense:4, relu, block:3, dense:5:nobias\n",
        )
        .unwrap();
        let (input_dim, spec) = net_spec_from_config(&cfg).unwrap();
        assert_eq!(input_dim, 2);
        assert_eq!(spec.layers.len(), 6);
        assert!(matches!(
            spec.layers[0],
            LayerSpec::FarkasDense { input: 2, output: 8, agg: Aggregation::Mean, .. }
        ));
        // block:3 sees width 4 and emits width 5.
        assert!(matches!(
            spec.layers[4],
            LayerSpec::FarkasResidual { input: 4, hidden: 3, .. }
        ));
        assert!(matches!(
            spec.layers[5],
            LayerSpec::Dense { input: 5, output: 5, bias: false }
        ));
        assert!(spec.build().is_ok());
    }

    #[test]
    fn layer_stack_errors() {
        let missing = Config::parse("net.layers = dense:3\n").unwrap();
        assert!(net_spec_from_config(&missing).is_err());
        let unknown = Config::parse("net.input_dim = 2\nnet.layers = conv:3\n").unwrap();
        assert!(net_spec_from_config(&unknown).is_err());
        let bad_width = Config::parse("net.input_dim = 2\nnet.layers = dense:zero\n").unwrap();
        assert!(net_spec_from_config(&bad_width).is_err());
    }

    #[test]
    fn cutoff_and_epsilon_reach_guaranteed_layers() {
        let cfg = Config::parse(
            "net.input_dim = 3\nnet.layers = farkas:4\nnet.cutoff = 0.5\nnet.epsilon = 1e-4\n",
        )
        .unwrap();
        let (_, spec) = net_spec_from_config(&cfg).unwrap();
        let LayerSpec::FarkasDense { cutoff, epsilon, .. } = spec.layers[0] else {
            panic!("expected a guaranteed layer");
        };
        assert_eq!(cutoff, 0.5);
        assert_eq!(epsilon, 1e-4);
    }
}
