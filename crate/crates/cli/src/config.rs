use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use vfedmh::baselines::Method;
use vfedmh::data::{load_csv, load_idx, synth_blobs_with, BlobConfig, DataError, Dataset, DEFAULT_SEPARATION};
use vfedmh::nn::{Architecture, LayerDescriptor, NetworkSpec};
use vfedmh::optim::{OptimizerConfig, OptimizerKind};
use vfedmh::protocol::{input_shape, party_specs, PartySetup, SessionConfig};
use vfedmh::secure::{FixedPointCodec, GroupChoice, GroupParams};

use crate::CliError;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    /// Overridden by `VFEDMH_OUTPUT_DIR`.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub secure: SecureConfig,
    #[serde(default)]
    pub transport: TransportConfig,
    /// Party 0 is the active party.
    #[serde(rename = "party")]
    pub parties: Vec<PartyConfig>,
}

fn default_method() -> Method {
    Method::Vfedmh
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        samples: usize,
        classes: usize,
        dims: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        /// Keep only the first rows of each file.
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
    Csv {
        path: PathBuf,
        test_path: Option<PathBuf>,
        classes: Option<usize>,
        /// Used only without `test_path`.
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_spread() -> f64 {
    0.5
}

fn default_separation() -> f64 {
    DEFAULT_SEPARATION
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub embedding_dim: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            seed: 0,
            embedding_dim: 64,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SecureConfig {
    pub group: GroupChoice,
    pub scale_bits: u32,
    /// Allows small test groups.
    pub test_mode: bool,
    pub masking: bool,
    pub key_seed: Option<u64>,
}

impl Default for SecureConfig {
    fn default() -> Self {
        Self {
            group: GroupChoice::SafePrime256,
            scale_bits: 16,
            test_mode: false,
            masking: true,
            key_seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportMode {
    Inmem,
    Tcp,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportConfig {
    pub mode: TransportMode,
    /// Address the active party listens on in tcp mode.
    pub address: String,
    pub timeout_secs: u64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            mode: TransportMode::Inmem,
            address: "127.0.0.1:0".into(),
            timeout_secs: 120,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartyConfig {
    #[serde(default = "default_architecture")]
    pub architecture: Architecture,
    /// Layer descriptors for `custom`, e.g. `["dense:64", "relu", "dense:10"]`.
    #[serde(default)]
    pub layers: Vec<String>,
    /// Number of custom layers in the embedding network.
    pub split: Option<usize>,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub momentum: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
}

fn default_architecture() -> Architecture {
    Architecture::Mlp3
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Sgd
}

fn default_learning_rate() -> f64 {
    0.05
}

/// Parsed config plus the directory relative paths resolve against.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub base: PathBuf,
}

pub fn load(path: &Path) -> Result<Loaded, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let config: ExperimentConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if config.parties.len() < 2 && config.method != Method::Local {
        return Err(CliError::Config(format!(
            "{}: `party` needs at least two entries, got {}",
            path.display(),
            config.parties.len()
        )));
    }
    if config.parties.is_empty() {
        return Err(CliError::Config(format!("{}: no `party` entries", path.display())));
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, base })
}

impl Loaded {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Training and (optional) test sets.
    pub fn datasets(&self) -> Result<(Dataset, Option<Dataset>), CliError> {
        let data = |e: DataError| CliError::Runtime(format!("dataset: {e}"));
        match &self.config.dataset {
            DatasetConfig::Synthetic {
                samples,
                classes,
                dims,
                spread,
                separation,
                seed,
                test_fraction,
            } => {
                let all = synth_blobs_with(&BlobConfig {
                    samples: *samples,
                    classes: *classes,
                    dims: *dims,
                    spread: *spread,
                    separation: *separation,
                    seed: *seed,
                })
                .map_err(|e| CliError::Config(format!("dataset: {e}")))?;
                split_fraction(all, *test_fraction)
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                let limit = |d: Dataset, n: &Option<usize>| match n {
                    Some(n) => d.take(*n),
                    None => d,
                };
                let train = limit(load_idx(&self.resolve(train_images), &self.resolve(train_labels)).map_err(data)?, train_limit);
                let test = match (test_images, test_labels) {
                    (Some(i), Some(l)) => Some(limit(load_idx(&self.resolve(i), &self.resolve(l)).map_err(data)?, test_limit)),
                    (None, None) => None,
                    _ => {
                        return Err(CliError::Config(
                            "dataset: `test_images` and `test_labels` go together".into(),
                        ))
                    }
                };
                Ok((train, test))
            }
            DatasetConfig::Csv {
                path,
                test_path,
                classes,
                test_fraction,
            } => {
                let all = load_csv(&self.resolve(path), *classes).map_err(data)?;
                match test_path {
                    Some(t) => {
                        // Both files must agree on the class count.
                        let test = load_csv(&self.resolve(t), Some(all.classes)).map_err(data)?;
                        Ok((all, Some(test)))
                    }
                    None => split_fraction(all, *test_fraction),
                }
            }
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.config.transport.timeout_secs)
    }

    pub fn session(&self, train: &Dataset) -> Result<SessionConfig, CliError> {
        let cfg = &self.config;
        let bad = |k: usize, e: String| CliError::Config(format!("party[{k}]: {e}"));
        let stock: Vec<Architecture> = cfg
            .parties
            .iter()
            .map(|p| match p.architecture {
                Architecture::Custom => Architecture::Mlp3,
                a => a,
            })
            .collect();
        let specs = party_specs(train, &stock, cfg.training.embedding_dim).map_err(|e| CliError::Config(e.to_string()))?;
        let ranges = vfedmh::data::split_ranges(train.width(), cfg.parties.len()).map_err(|e| CliError::Config(e.to_string()))?;
        let mut setups = Vec::with_capacity(cfg.parties.len());
        for (k, (p, spec)) in cfg.parties.iter().zip(specs).enumerate() {
            let spec = if p.architecture == Architecture::Custom {
                let layers = p
                    .layers
                    .iter()
                    .map(|l| l.parse::<LayerDescriptor>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| bad(k, e.to_string()))?;
                let split = p.split.ok_or_else(|| bad(k, "custom networks need `split`".into()))?;
                let conv = layers.iter().any(|l| matches!(l, LayerDescriptor::Conv { .. } | LayerDescriptor::MaxPool { .. }));
                let cols = &ranges[k];
                let rw = train.row_width.filter(|&rw| cols.start % rw == 0 && cols.len() % rw == 0);
                let input = input_shape(if conv { Architecture::Cnn2 } else { Architecture::Mlp3 }, cols.len(), rw);
                NetworkSpec::from_descriptors(input, &layers, split, cfg.training.embedding_dim, train.classes)
                    .map_err(|e| bad(k, e.to_string()))?
            } else {
                if !p.layers.is_empty() || p.split.is_some() {
                    return Err(bad(k, "`layers` and `split` apply only to architecture = \"custom\"".into()));
                }
                spec
            };
            let mut optimizer = OptimizerConfig::new(p.optimizer, p.learning_rate);
            if let Some(m) = p.momentum {
                optimizer.momentum = m;
            }
            if let Some(b) = p.beta1 {
                optimizer.beta1 = b;
            }
            if let Some(b) = p.beta2 {
                optimizer.beta2 = b;
            }
            setups.push(PartySetup { spec, optimizer });
        }
        let mut session = SessionConfig::new(setups, cfg.training.seed);
        session.epochs = cfg.training.epochs;
        session.batch_size = cfg.training.batch_size;
        session.codec = FixedPointCodec::new(cfg.secure.scale_bits).map_err(|e| CliError::Config(format!("secure: {e}")))?;
        session.group = GroupParams::from_choice(&cfg.secure.group, cfg.secure.test_mode)
            .map_err(|e| CliError::Config(format!("secure: {e}")))?;
        session.masking = cfg.secure.masking;
        session.key_seed = cfg.secure.key_seed;
        session.timeout = self.timeout();
        session
            .validate()
            .or_else(|e| if cfg.method == Method::Local { Ok(()) } else { Err(e) })
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(session)
    }
}

fn split_fraction(all: Dataset, fraction: f64) -> Result<(Dataset, Option<Dataset>), CliError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(CliError::Config(format!("dataset: test_fraction {fraction} is outside [0, 1)")));
    }
    let test = (all.len() as f64 * fraction).round() as usize;
    if test == 0 {
        return Ok((all, None));
    }
    let (train, test) = all.split_at(all.len() - test);
    Ok((train, Some(test)))
}
