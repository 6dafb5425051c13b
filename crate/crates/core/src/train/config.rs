//! `key = value` training configuration files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::dataset::DEFAULT_RATIOS;
use super::optim::OptimizerConfig;
use crate::{Error, Result};

const REQUIRED: [&str; 10] = [
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "batch_size",
    "epochs",
    "seed",
    "checkpoint_every",
    "arch_config_path",
    "data_dir",
];
const OPTIONAL: [&str; 4] = ["output_dir", "augment", "group_size", "split"];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// A file path, or `builtin:default` / `builtin:tiny`.
    pub arch_config_path: String,
    pub data_dir: PathBuf,
    pub output_dir: Option<PathBuf>,
    /// Expand the training split into its eight rotations/flips in memory.
    pub augment: bool,
    /// Consecutive manifest entries that form one source (8 for a corpus written
    /// by the augment command) and must share a split.
    pub group_size: usize,
    pub split: [f64; 3],
}

impl TrainConfig {
    /// Default hyperparameters with the given data directory.
    pub fn new(data_dir: impl Into<PathBuf>, arch_config_path: &str) -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            seed: 0,
            checkpoint_every: 10,
            arch_config_path: arch_config_path.to_string(),
            data_dir: data_dir.into(),
            output_dir: None,
            augment: false,
            group_size: 1,
            split: DEFAULT_RATIOS,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    pub fn to_text(&self) -> String {
        let o = &self.optimizer;
        let mut s = format!(
            "learning_rate = {}\nbeta1 = {}\nbeta2 = {}\nepsilon = {}\nbatch_size = {}\nepochs = {}\nseed = {}\n\
             checkpoint_every = {}\narch_config_path = {}\ndata_dir = {}\naugment = {}\ngroup_size = {}\nsplit = {},{},{}\n",
            o.learning_rate,
            o.beta1,
            o.beta2,
            o.epsilon,
            o.batch_size,
            o.epochs,
            self.seed,
            self.checkpoint_every,
            self.arch_config_path,
            self.data_dir.display(),
            self.augment,
            self.group_size,
            self.split[0],
            self.split[1],
            self.split[2],
        );
        if let Some(out) = &self.output_dir {
            s.push_str(&format!("output_dir = {}\n", out.display()));
        }
        s
    }
}

fn value<T: FromStr>(map: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
    let raw = map[key];
    raw.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{raw}'")))
}

impl FromStr for TrainConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !REQUIRED.contains(&k) && !OPTIONAL.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key '{k}'", i + 1)));
            }
            if map.insert(k, v).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{k}'", i + 1)));
            }
        }
        let missing: Vec<&str> = REQUIRED.iter().copied().filter(|k| !map.contains_key(k)).collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("missing keys: {}", missing.join(", "))));
        }
        let optimizer = OptimizerConfig {
            learning_rate: value(&map, "learning_rate")?,
            beta1: value(&map, "beta1")?,
            beta2: value(&map, "beta2")?,
            epsilon: value(&map, "epsilon")?,
            batch_size: value(&map, "batch_size")?,
            epochs: value(&map, "epochs")?,
        };
        optimizer.validate()?;
        let split = match map.get("split") {
            None => DEFAULT_RATIOS,
            Some(s) => {
                let parts: Vec<f64> = s
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Config(format!("split: cannot parse '{s}'")))?;
                parts
                    .try_into()
                    .map_err(|_| Error::Config("split needs three ratios".into()))?
            }
        };
        let group_size = if map.contains_key("group_size") { value(&map, "group_size")? } else { 1 };
        if group_size == 0 {
            return Err(Error::Config("group_size must be >= 1".into()));
        }
        Ok(TrainConfig {
            optimizer,
            seed: value(&map, "seed")?,
            checkpoint_every: value(&map, "checkpoint_every")?,
            arch_config_path: map["arch_config_path"].to_string(),
            data_dir: PathBuf::from(map["data_dir"]),
            output_dir: map.get("output_dir").map(PathBuf::from),
            augment: if map.contains_key("augment") { value(&map, "augment")? } else { false },
            group_size,
            split,
        })
    }
}
