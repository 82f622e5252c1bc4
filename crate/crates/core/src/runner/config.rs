//! Experiment configuration: a TOML file with one section per module.
//!
//! A file picks a `profile` whose values fill every key it leaves out.
//! Unknown keys anywhere are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::LossSwitches;
use crate::error::{Error, Result};
use crate::metrics::Forgetting;
use crate::optim::AdamConfig;
use crate::replay::LocalConfig;
use crate::streams::{FederationSpec, StreamKind, SyntheticSpec};

/// Environment variable that relative data paths are resolved against.
pub const DATA_ROOT_ENV: &str = "AFFCL_DATA_ROOT";

/// Tag mixed into every config hash.
pub const CODE_VERSION: &str = concat!("affcl-", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    AfFcl,
    Fedavg,
    Fedprox,
    AfWoGr,
    AfWoKd,
    AfWoAf,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::AfFcl,
        Method::Fedavg,
        Method::Fedprox,
        Method::AfWoGr,
        Method::AfWoKd,
        Method::AfWoAf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::AfFcl => "af_fcl",
            Method::Fedavg => "fedavg",
            Method::Fedprox => "fedprox",
            Method::AfWoGr => "af_wo_gr",
            Method::AfWoKd => "af_wo_kd",
            Method::AfWoAf => "af_wo_af",
        }
    }

    /// Whether the flow is trained and sampled at all.
    pub fn uses_flow(self) -> bool {
        matches!(self, Method::AfFcl | Method::AfWoKd | Method::AfWoAf)
    }

    pub fn switches(self) -> LossSwitches {
        LossSwitches {
            replay: self.uses_flow(),
            distill: matches!(self, Method::AfFcl | Method::AfWoGr | Method::AfWoAf),
        }
    }

    pub fn weighting(self) -> bool {
        matches!(self, Method::AfFcl | Method::AfWoKd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full-size architecture and optimizer settings.
    #[default]
    Paper,
    /// Small models and streams that run on one CPU core in minutes.
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// IDX image archive; relative paths resolve against the data root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub conv_channels: Vec<usize>,
    /// Dimension of the feature space shared by the classifier and the flow.
    pub feature_dim: usize,
    pub mid_dims: Vec<usize>,
    pub flow_depth: usize,
    pub flow_hidden: usize,
    pub flow_blocks: usize,
    pub embed_dim: usize,
    pub scale_clamp: f64,
    /// Defaults to one past the largest label in the pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub local_iters: usize,
    pub rounds_per_task: usize,
    pub prox_mu: f64,
    pub participation: f64,
    pub refit_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub forgetting: Forgetting,
    /// Zero-based tasks scored by the clean-subset accuracy. Defaults to the
    /// steps after the noisy ones for noisy streams.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_tasks: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointPolicy {
    /// Only the final round of each task.
    Task,
    Round,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub checkpoints: CheckpointPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub m_values: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    /// The `seed` key here is replaced by each run seed.
    pub federation: FederationSpec,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub metrics: MetricsConfig,
    pub output: OutputConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn preset(profile: Profile) -> Self {
        let common_optim = OptimConfig {
            lr: 1e-4,
            batch_size: 64,
            local_iters: 100,
            rounds_per_task: 10,
            prox_mu: 0.01,
            participation: 1.0,
            refit_every: 10,
        };
        let output = OutputConfig {
            dir: PathBuf::from("runs"),
            checkpoints: CheckpointPolicy::Task,
        };
        let metrics = MetricsConfig {
            forgetting: Forgetting::Signed,
            clean_tasks: None,
        };
        let sweep = SweepConfig {
            methods: vec![Method::AfFcl, Method::AfWoAf],
            m_values: vec![0, 1, 2],
        };
        match profile {
            Profile::Paper => Self {
                profile,
                method: Method::AfFcl,
                seeds: vec![0, 1, 2],
                data: DataConfig {
                    source: DataSource::Synthetic,
                    images: None,
                    labels: None,
                    synthetic: SyntheticSpec {
                        classes: 26,
                        per_class: 500,
                        height: 28,
                        width: 28,
                        noise_sigma: 0.15,
                        seed: 0,
                    },
                },
                federation: FederationSpec {
                    num_clients: 8,
                    num_steps: 6,
                    classes_per_task: 2,
                    kind: StreamKind::Ltp,
                    ..FederationSpec::default()
                },
                model: ModelConfig {
                    conv_channels: vec![64, 128, 256],
                    feature_dim: 512,
                    mid_dims: vec![512],
                    flow_depth: 4,
                    flow_hidden: 256,
                    flow_blocks: 2,
                    embed_dim: 32,
                    scale_clamp: 3.0,
                    num_classes: None,
                },
                optim: common_optim,
                metrics,
                output,
                sweep,
            },
            Profile::Desk => Self {
                profile,
                method: Method::AfFcl,
                seeds: vec![0, 1, 2],
                data: DataConfig {
                    source: DataSource::Synthetic,
                    images: None,
                    labels: None,
                    synthetic: SyntheticSpec::default(),
                },
                federation: FederationSpec {
                    num_clients: 4,
                    num_steps: 4,
                    classes_per_task: 2,
                    kind: StreamKind::Ltp,
                    ..FederationSpec::default()
                },
                model: ModelConfig {
                    conv_channels: vec![8, 16, 32],
                    feature_dim: 16,
                    mid_dims: vec![64],
                    flow_depth: 4,
                    flow_hidden: 32,
                    flow_blocks: 2,
                    embed_dim: 8,
                    scale_clamp: 3.0,
                    num_classes: None,
                },
                optim: OptimConfig {
                    lr: 1e-3,
                    local_iters: 50,
                    ..common_optim
                },
                metrics,
                output,
                sweep,
            },
        }
    }

    /// Parses a config file's text on top of its profile's preset.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let profile = match user.get("profile") {
            Some(v) => Profile::deserialize(v.clone()).map_err(|e| Error::Config(format!("profile: {e}")))?,
            None => Profile::default(),
        };
        let mut base = toml::Table::try_from(Self::preset(profile)).expect("preset serializes");
        merge(&mut base, user);
        let cfg = Self::deserialize(toml::Value::Table(base)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad("optim.lr must be positive");
        }
        if o.batch_size == 0 || o.local_iters == 0 || o.rounds_per_task == 0 || o.refit_every == 0 {
            return bad("optim.batch_size, local_iters, rounds_per_task and refit_every must be positive");
        }
        if !(o.participation > 0.0 && o.participation <= 1.0) {
            return bad("optim.participation must lie in (0, 1]");
        }
        if !(o.prox_mu >= 0.0 && o.prox_mu.is_finite()) {
            return bad("optim.prox_mu must be nonnegative");
        }
        let m = &self.model;
        if m.feature_dim == 0 || m.embed_dim == 0 || m.flow_hidden == 0 {
            return bad("model.feature_dim, embed_dim and flow_hidden must be positive");
        }
        if self.data.source == DataSource::Idx && (self.data.images.is_none() || self.data.labels.is_none()) {
            return bad("data.source = \"idx\" needs data.images and data.labels");
        }
        if self.sweep.methods.is_empty() || self.sweep.m_values.is_empty() {
            return bad("sweep.methods and sweep.m_values must not be empty");
        }
        if let Some(tasks) = &self.metrics.clean_tasks {
            if tasks.is_empty() {
                return bad("metrics.clean_tasks must not be empty");
            }
            if let Some(&t) = tasks.iter().find(|&&t| t >= self.federation.num_steps) {
                return Err(Error::Config(format!("metrics.clean_tasks entry {t} beyond num_steps")));
            }
        }
        self.federation.validate()
    }

    /// Hex SHA-256 of the code version and the canonical config, leaving
    /// out the output section.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("struct").remove("output");
        let mut h = Sha256::new();
        h.update(CODE_VERSION.as_bytes());
        h.update(b"\n");
        h.update(v.to_string().as_bytes());
        hex::encode(h.finalize())
    }

    pub fn local_config(&self) -> LocalConfig {
        LocalConfig {
            iters: self.optim.local_iters,
            batch_size: self.optim.batch_size,
            adam: AdamConfig {
                lr: self.optim.lr,
                ..AdamConfig::default()
            },
            refit_every: self.optim.refit_every,
            train_flow: self.method.uses_flow(),
            switches: self.method.switches(),
            weighting: self.method.weighting(),
            prox_mu: (self.method == Method::Fedprox).then_some(self.optim.prox_mu),
        }
    }

    /// Tasks scored by the clean-subset accuracy, if any.
    pub fn clean_tasks(&self) -> Option<Vec<usize>> {
        self.metrics.clean_tasks.clone().or_else(|| {
            (self.federation.kind == StreamKind::Noisy && self.federation.noisy_steps < self.federation.num_steps)
                .then(|| (self.federation.noisy_steps..self.federation.num_steps).collect())
        })
    }
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Resolves a data path against the data root when it is relative.
pub fn resolve_data_path(p: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}
