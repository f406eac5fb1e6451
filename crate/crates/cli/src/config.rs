//! Layered run configuration: defaults, then a `key = value` file, then the
//! environment, then command-line flags. Every effective value remembers
//! which layer set it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use seqlab::data::ColumnSelection;
use seqlab::training::TrainingConfig;
use seqlab::{CellKind, Direction};

use crate::CliError;

pub const DATA_ROOT_ENV: &str = "SEQLAB_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    Default,
    File,
    Env,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Env => "env",
            Source::Flag => "flag",
        })
    }
}

/// Recognized keys with their default values, in logging order.
pub const KEYS: &[(&str, &str)] = &[
    ("cell", "lstm"),
    ("mode", "bidirectional"),
    ("layers", "1"),
    ("hidden", "1024"),
    ("learning_rate", "1"),
    ("epochs", "80"),
    ("halve_after", "40"),
    ("halve_every", "5"),
    ("batch_size", "5"),
    ("dropout", "0.5"),
    ("grad_clip", "none"),
    ("init_scale", "0.1"),
    ("forget_bias", "0"),
    ("seed", "0"),
    ("data_root", "none"),
    ("columns", "auto"),
    ("decimation", "auto"),
    ("standardize", "true"),
];

fn canonical_key(raw: &str) -> Result<&'static str, CliError> {
    let k = raw.trim().replace('-', "_");
    KEYS.iter()
        .map(|(name, _)| *name)
        .find(|name| *name == k)
        .ok_or_else(|| CliError::Config(format!("unknown configuration key `{}`", raw.trim())))
}

/// Raw string values per key, with provenance.
#[derive(Clone, Debug)]
pub struct Layers {
    values: BTreeMap<&'static str, (String, Source)>,
}

impl Default for Layers {
    fn default() -> Self {
        Layers {
            values: KEYS.iter().map(|(k, v)| (*k, (v.to_string(), Source::Default))).collect(),
        }
    }
}

impl Layers {
    pub fn set(&mut self, key: &str, value: impl Into<String>, source: Source) -> Result<(), CliError> {
        let key = canonical_key(key)?;
        self.values.insert(key, (value.into(), source));
        Ok(())
    }

    pub fn apply_file_text(&mut self, path: &Path, text: &str) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| {
                CliError::Config(format!("{}:{}: expected `key = value`", path.display(), i + 1))
            })?;
            self.set(key, value.trim(), Source::File)
                .map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_file_text(path, &text)
    }

    pub fn apply_env(&mut self, data_root: Option<String>) {
        if let Some(root) = data_root.filter(|r| !r.is_empty()) {
            self.values.insert("data_root", (root, Source::Env));
        }
    }

    pub fn get(&self, key: &str) -> (&str, Source) {
        let (v, s) = &self.values[key];
        (v.as_str(), *s)
    }

    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        fn parse<T: std::str::FromStr>(layers: &Layers, key: &str) -> Result<T, CliError>
        where
            T::Err: fmt::Display,
        {
            let (raw, source) = layers.get(key);
            raw.parse::<T>()
                .map_err(|e| CliError::Config(format!("invalid {key} `{raw}` ({source}): {e}")))
        }
        let optional = |key: &str| {
            let (raw, _) = self.get(key);
            (!matches!(raw, "none" | "auto" | "")).then_some(raw)
        };

        let cell: CellKind = parse(self, "cell")?;
        let direction: Direction = parse(self, "mode")?;
        let grad_clip = match optional("grad_clip") {
            None => None,
            Some(_) => Some(parse::<f64>(self, "grad_clip")?),
        };
        let training = TrainingConfig {
            learning_rate: parse(self, "learning_rate")?,
            epochs: parse(self, "epochs")?,
            halve_after: parse(self, "halve_after")?,
            halve_every: parse(self, "halve_every")?,
            batch_size: parse(self, "batch_size")?,
            dropout: parse(self, "dropout")?,
            hidden: parse(self, "hidden")?,
            layers: parse(self, "layers")?,
            cell,
            direction,
            seed: parse(self, "seed")?,
            grad_clip,
            init_scale: parse(self, "init_scale")?,
            forget_bias: parse(self, "forget_bias")?,
        };
        training.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let decimation = match optional("decimation") {
            None => None,
            Some(_) => Some(parse::<usize>(self, "decimation")?),
        };
        if decimation == Some(0) {
            return Err(CliError::Config("decimation must be at least 1".into()));
        }
        Ok(RunConfig {
            training,
            data_root: optional("data_root").map(PathBuf::from),
            columns: parse::<ColumnSelection>(self, "columns")?,
            decimation,
            standardize: parse(self, "standardize")?,
            layers: self.clone(),
        })
    }

    /// One line per key: `config <key> = <value> (<source>)`.
    pub fn provenance(&self) -> Vec<String> {
        KEYS.iter()
            .map(|(k, _)| {
                let (v, s) = self.get(k);
                format!("config {k} = {v} ({s})")
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub training: TrainingConfig,
    pub data_root: Option<PathBuf>,
    pub columns: ColumnSelection,
    /// `None` means 1 for synthetic datasets and the JIGSAWS default otherwise.
    pub decimation: Option<usize>,
    pub standardize: bool,
    pub layers: Layers,
}

impl RunConfig {
    pub fn data_root(&self) -> Result<&Path, CliError> {
        self.data_root
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("no dataset given: pass --data or set {DATA_ROOT_ENV}")))
    }
}
