//! Experiment configuration: presets, TOML files, env and `--set` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use srns_core::data::InputFormat;
use srns_core::eval::Protocol;
use srns_core::model::{ScorerKind, TrainHyper};
use srns_core::sampler::SamplerConfig;
use srns_core::trainer::RunConfig;
use srns_core::Error;

pub const ENV_PREFIX: &str = "SRNS_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Random,
    LeaveOneOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub path: PathBuf,
    pub format: InputFormat,
    /// Ratings at or above this count as positives; negative keeps all.
    pub threshold: f64,
    pub min_user_records: usize,
    pub split: SplitKind,
    pub test_fraction: f64,
    pub seed: u64,
    /// Prepared snapshot directory.
    pub snapshot: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub scorer: ScorerKind,
    pub embedding_dim: usize,
    pub mlp_hidden_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    /// 0 disables early stopping.
    pub patience: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub learning_rate: f64,
    pub l2_reg: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub protocol: Protocol,
    /// Number of seeds (`seed`, `seed + 1`, ...) per training command.
    pub repeat: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    /// Share of test items turned into false negatives; 0 disables noise.
    pub flip_fraction: f64,
    /// First entry is used by `train`; `noise-sweep` runs all of them.
    pub sigmas: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub metrics_csv: String,
    pub summary_json: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sampler: SamplerConfig,
    pub noise: NoiseSection,
    pub output: OutputSection,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            path: PathBuf::from("data/ml-100k/u.data"),
            format: InputFormat::Delimited,
            threshold: 4.0,
            min_user_records: 0,
            split: SplitKind::Random,
            test_fraction: 0.2,
            seed: 0,
            snapshot: PathBuf::from("runs/ml-100k/data"),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            scorer: ScorerKind::Gmf,
            embedding_dim: 8,
            mlp_hidden_layers: 3,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let h = TrainHyper::default();
        TrainSection {
            epochs: 400,
            patience: 0,
            seed: 0,
            eval_every: 1,
            learning_rate: h.learning_rate,
            l2_reg: h.l2_reg,
            batch_size: h.batch_size,
            adam_beta1: h.adam_beta1,
            adam_beta2: h.adam_beta2,
            adam_eps: h.adam_eps,
            protocol: Protocol::Full,
            repeat: 1,
        }
    }
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            flip_fraction: 0.5,
            sigmas: vec![1.0],
            seed: 0,
        }
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/ml-100k/train"),
            metrics_csv: "metrics.csv".into(),
            summary_json: "summary.json".into(),
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            sampler: SamplerConfig::default(),
            noise: NoiseSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Named starting points. `ml-100k` is the default configuration.
    pub fn preset(name: &str) -> Result<Self, Error> {
        match name {
            "ml-100k" => Ok(Self::default()),
            "ml-1m" => {
                let mut c = Self::default();
                c.dataset = DatasetSection {
                    path: PathBuf::from("data/ml-1m/ratings.dat"),
                    format: InputFormat::MovielensDoubleColon,
                    threshold: 4.0,
                    min_user_records: 5,
                    split: SplitKind::LeaveOneOut,
                    test_fraction: 0.0,
                    seed: 0,
                    snapshot: PathBuf::from("runs/ml-1m/data"),
                };
                c.model.embedding_dim = 32;
                c.train.patience = 100;
                c.train.l2_reg = 1e-2;
                c.train.protocol = Protocol::Sampled100;
                c.sampler = SamplerConfig {
                    temperature: 10.0,
                    alpha: 5.0,
                    warm_start: 50,
                    memory_size: 8,
                    expansion_size: 64,
                    var_set_size: Some(3000),
                    ..SamplerConfig::default()
                };
                c.noise.flip_fraction = 0.0;
                c.noise.sigmas = vec![0.0];
                c.output.dir = PathBuf::from("runs/ml-1m/train");
                Ok(c)
            }
            other => Err(Error::Config(format!("unknown preset `{other}` (expected ml-100k or ml-1m)"))),
        }
    }

    /// Preset, then file, then `SRNS_<SECTION>_<KEY>` env vars, then
    /// `section.key=value` overrides.
    pub fn resolve(
        preset: Option<&str>,
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        sets: &[String],
    ) -> Result<Self, Error> {
        let base = match preset {
            Some(p) => Self::preset(p)?,
            None => Self::default(),
        };
        let mut value = to_value(&base)?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file_value: toml::Table =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, file_value);
        }
        let mut env: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        env.sort();
        for (k, v) in env {
            let rest = k[ENV_PREFIX.len()..].to_ascii_lowercase();
            let Some((section, key)) = rest.split_once('_') else {
                continue;
            };
            // Only variables naming an existing section are configuration.
            if !value.contains_key(section) {
                continue;
            }
            set_path(&mut value, section, key, &v)?;
        }
        for s in sets {
            let (path, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{s}` is not section.key=value")))?;
            let (section, key) = path
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override key `{path}` is not section.key")))?;
            set_path(&mut value, section.trim(), key.trim(), v.trim())?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !(0.0..1.0).contains(&self.dataset.test_fraction) {
            return Err(Error::Config("dataset.test_fraction must lie in [0, 1)".into()));
        }
        if self.dataset.split == SplitKind::Random && self.dataset.test_fraction == 0.0 {
            return Err(Error::Config("random split needs dataset.test_fraction > 0".into()));
        }
        if self.train.repeat == 0 {
            return Err(Error::Config("train.repeat must be at least 1".into()));
        }
        for &s in &self.noise.sigmas {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Config(format!("noise sigma {s} outside [0, 1]")));
            }
        }
        self.run_config(self.train.seed).validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn threshold(&self) -> Option<f64> {
        (self.dataset.threshold >= 0.0).then_some(self.dataset.threshold)
    }

    pub fn sigma(&self) -> f64 {
        self.noise.sigmas.first().copied().unwrap_or(0.0)
    }

    pub fn run_config(&self, seed: u64) -> RunConfig {
        let t = &self.train;
        RunConfig {
            epochs: t.epochs,
            patience: (t.patience > 0).then_some(t.patience),
            seed,
            eval_every: t.eval_every,
            scorer: self.model.scorer,
            hyper: TrainHyper {
                embedding_dim: self.model.embedding_dim,
                learning_rate: t.learning_rate,
                l2_reg: t.l2_reg,
                batch_size: t.batch_size,
                adam_beta1: t.adam_beta1,
                adam_beta2: t.adam_beta2,
                adam_eps: t.adam_eps,
                mlp_hidden_layers: self.model.mlp_hidden_layers,
            },
            sampler: self.sampler.clone(),
            protocol: t.protocol,
            eval_seed: self.dataset.seed,
        }
    }
}

fn to_value(cfg: &ExperimentConfig) -> Result<toml::Table, Error> {
    toml::Table::try_from(cfg).map_err(|e| Error::Config(e.to_string()))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `raw` as a TOML value, falling back to a plain string.
fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Table, section: &str, key: &str, raw: &str) -> Result<(), Error> {
    let table = root
        .get_mut(section)
        .and_then(toml::Value::as_table_mut)
        .ok_or_else(|| Error::Config(format!("unknown config section `{section}`")))?;
    let mut value = parse_scalar(raw);
    // Integers given to float fields (e.g. `alpha=20`) stay floats.
    if let (Some(toml::Value::Float(_)), toml::Value::Integer(i)) = (table.get(key), &value) {
        value = toml::Value::Float(*i as f64);
    }
    // Comma lists for array fields (e.g. `sigmas=0,0.5,1`).
    if let (Some(toml::Value::Array(_)), false) = (table.get(key), value.is_array()) {
        value = parse_scalar(&format!("[{raw}]"));
    }
    table.insert(key.to_string(), value);
    Ok(())
}
