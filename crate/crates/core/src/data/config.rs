//! Flat `key = value` run configuration.
//!
//! Every key has a default and a value kind; values are validated when set,
//! unknown keys are rejected, and [`RunConfig::to_text`] writes the fully
//! resolved document (all keys, sorted) that reproduces a run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("config key `{key}`: cannot parse `{value}` as {expected}")]
    BadValue { key: String, value: String, expected: String },
    #[error("config line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("bad grid `{0}`: {1}")]
    Grid(String, String),
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Usize,
    U64,
    Real,
    Bool,
    Text,
    Choice(&'static [&'static str]),
    UsizeList,
    Grid,
}

/// `(key, default, kind, help)`.
const KEYS: &[(&str, &str, Kind, &str)] = &[
    ("dataset", "blobs", Kind::Choice(&["blobs", "moons", "idx", "cifar"]), "data source"),
    ("train_images", "", Kind::Text, "IDX image file or CIFAR batch for training"),
    ("train_labels", "", Kind::Text, "IDX label file for training"),
    ("test_images", "", Kind::Text, "IDX image file or CIFAR batch for testing"),
    ("test_labels", "", Kind::Text, "IDX label file for testing"),
    ("n_train", "2000", Kind::Usize, "synthetic training-set size"),
    ("n_test", "1000", Kind::Usize, "synthetic test-set size; also the evaluation subset cap"),
    ("classes", "3", Kind::Usize, "blob classes"),
    ("dim", "2", Kind::Usize, "blob dimension"),
    ("separation", "3.0", Kind::Real, "distance between blob centers"),
    ("blob_sigma", "1.0", Kind::Real, "blob cluster standard deviation"),
    ("noise", "0.1", Kind::Real, "two-moons noise"),
    ("arch", "mlp", Kind::Choice(&["mlp", "cnn"]), "network family"),
    ("hidden", "64,64", Kind::UsizeList, "hidden widths (mlp) or channels (cnn, first entry)"),
    ("bias", "false", Kind::Bool, "deterministic biases"),
    ("precision", "f32", Kind::Choice(&["f32", "f64"]), "floating-point width"),
    ("defense", "adv_bnn", Kind::Choice(&["none", "bnn", "adv_train", "adv_bnn"]), "training defense"),
    ("epochs", "20", Kind::Usize, "training epochs"),
    ("batch_size", "64", Kind::Usize, "minibatch size"),
    ("lr", "0.05", Kind::Real, "learning rate"),
    ("momentum", "0.9", Kind::Real, "SGD momentum"),
    ("lr_decay", "1.0", Kind::Real, "step-decay factor"),
    ("lr_decay_every", "0", Kind::Usize, "epochs between decays (0 = constant)"),
    ("k_train", "10", Kind::Usize, "attack steps during training"),
    ("gamma_train", "0.03125", Kind::Real, "attack radius during training"),
    ("alpha", "1.0", Kind::Real, "KL factor in (0,1]"),
    ("sigma0", "0.05", Kind::Real, "prior standard deviation"),
    ("seed", "0", Kind::U64, "master seed"),
    ("gamma", "0.03125", Kind::Real, "evaluation attack radius"),
    ("k", "20", Kind::Usize, "evaluation attack steps"),
    ("step", "0", Kind::Real, "attack step size (0 = 2.5·gamma/k)"),
    ("eot", "true", Kind::Bool, "resample weights each attack step on stochastic nets"),
    ("eot_samples", "1", Kind::Usize, "weight samples averaged per EOT step"),
    ("random_start", "false", Kind::Bool, "uniform start inside the ball"),
    ("clip", "auto", Kind::Text, "valid input range `lo,hi`, `none`, or `auto` (images only)"),
    ("m", "20", Kind::Usize, "ensemble size"),
    ("predict", "mean_prob", Kind::Choice(&["mean_prob", "min_expected_loss"]), "ensemble rule"),
    ("gammas", "0:0.07:0.005", Kind::Grid, "sweep grid"),
    ("m_grid", "1,5,10,20,40", Kind::UsizeList, "ensemble-study sizes"),
    ("k_grid", "0,1,5,10,20,50,100", Kind::UsizeList, "pgd-study step counts"),
    ("model", "", Kind::Text, "checkpoint to evaluate"),
    ("models", "", Kind::Text, "comma-separated checkpoints for affinity"),
    ("out", "out", Kind::Text, "output directory"),
];

fn lookup(key: &str) -> Option<&'static (&'static str, &'static str, Kind, &'static str)> {
    KEYS.iter().find(|k| k.0 == key)
}

fn bad(key: &str, value: &str, expected: &str) -> ConfigError {
    ConfigError::BadValue { key: key.into(), value: value.into(), expected: expected.into() }
}

fn check(key: &str, value: &str, kind: Kind) -> Result<(), ConfigError> {
    let ok = match kind {
        Kind::Usize => value.parse::<usize>().is_ok(),
        Kind::U64 => value.parse::<u64>().is_ok(),
        Kind::Real => value.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Bool => value.parse::<bool>().is_ok(),
        Kind::Text => true,
        Kind::Choice(opts) => {
            if !opts.contains(&value) {
                return Err(bad(key, value, &format!("one of {}", opts.join("|"))));
            }
            true
        }
        Kind::UsizeList => parse_usize_list(value).is_ok(),
        Kind::Grid => {
            parse_grid(value)?;
            true
        }
    };
    if ok {
        Ok(())
    } else {
        Err(bad(key, value, &format!("{kind:?}").to_lowercase()))
    }
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>, std::num::ParseIntError> {
    s.split(',').filter(|t| !t.trim().is_empty()).map(|t| t.trim().parse()).collect()
}

/// `lo:hi:step` (inclusive of `hi` up to rounding) or a comma list; must be
/// non-empty and ascending.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, ConfigError> {
    let err = |why: &str| ConfigError::Grid(s.into(), why.into());
    let num = |t: &str| t.trim().parse::<f64>().ok().filter(|v| v.is_finite());
    let grid: Vec<f64> = if s.contains(':') {
        let parts: Vec<f64> = s.split(':').map(num).collect::<Option<_>>().ok_or_else(|| err("not a number"))?;
        let [lo, hi, step] = parts[..] else {
            return Err(err("expected lo:hi:step"));
        };
        if !(step > 0.0) || hi < lo {
            return Err(err("need step > 0 and hi >= lo"));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        if n > 1_000_000 {
            return Err(err("too many points"));
        }
        (0..=n).map(|i| lo + i as f64 * step).collect()
    } else {
        s.split(',').map(num).collect::<Option<_>>().ok_or_else(|| err("not a number"))?
    };
    if grid.is_empty() {
        return Err(err("empty"));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(err("not ascending"));
    }
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|&(k, d, _, _)| (k, d.to_string())).collect() }
    }
}

impl RunConfig {
    /// `(key, default, help)` for every accepted key.
    pub fn keys() -> impl Iterator<Item = (&'static str, &'static str, &'static str)> {
        KEYS.iter().map(|&(k, d, _, h)| (k, d, h))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let &(name, _, kind, _) = lookup(key).ok_or_else(|| ConfigError::UnknownKey { key: key.into() })?;
        let value = value.trim();
        check(name, value, kind)?;
        self.values.insert(name, value.to_string());
        Ok(())
    }

    /// Applies a `key = value` document on top of `self`. `#` starts a
    /// comment; blank lines are ignored.
    pub fn merge_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.into() })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> crate::error::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?)?)
    }

    /// Every key, sorted, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of the resolved document.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Writes the resolved document as `<dir>/<name>`.
    pub fn write_resolved(&self, dir: &Path, name: &str) -> crate::error::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(name), self.to_text())?;
        Ok(())
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("`{key}` is not a config key"))
    }

    pub fn usize(&self, key: &str) -> usize {
        self.str(key).parse().expect("validated on set")
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.str(key).parse().expect("validated on set")
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.str(key).parse().expect("validated on set")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.str(key).parse().expect("validated on set")
    }

    pub fn usize_list(&self, key: &str) -> Vec<usize> {
        parse_usize_list(self.str(key)).expect("validated on set")
    }

    pub fn grid(&self, key: &str) -> Vec<f64> {
        parse_grid(self.str(key)).expect("validated on set")
    }

    /// Non-empty comma-separated entries of a text key.
    pub fn list(&self, key: &str) -> Vec<String> {
        self.str(key).split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
    }
}
