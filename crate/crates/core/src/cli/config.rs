use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, PartitionParams, Scheme};
use crate::error::{Error, Result};
use crate::fedreg::FedRegConfig;
use crate::fl::{Algorithm, DiagnosticsConfig, LocalTrainConfig, RunConfig};
use crate::model::ModelSpec;
use crate::privacy::{AttackConfig, Defense, Distance, DpConfig, LrSchedule};

fn one() -> usize {
    1
}
fn ten() -> usize {
    10
}
fn yes() -> bool {
    true
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub rounds: usize,
    pub clients_per_round: usize,
    /// Accuracy the `R_a` summaries are measured against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_accuracy: Option<f64>,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub attack: AttackSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Gaussian blobs in `[0, 1]^dim`.
    Synthetic {
        n_classes: usize,
        dim: usize,
        per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    /// IDX image/label files; relative paths resolve against the config file.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_train: Option<usize>,
    },
}

fn default_test_per_class() -> usize {
    50
}
fn default_spread() -> f64 {
    0.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub scheme: Scheme,
    pub n_clients: usize,
    pub power_law_exponent: f64,
    pub min_client_size: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        let params = PartitionParams::default();
        PartitionConfig {
            scheme: Scheme::OneClass,
            n_clients: 10,
            power_law_exponent: params.power_law_exponent,
            min_client_size: params.min_client_size,
        }
    }
}

impl PartitionConfig {
    pub fn params(&self) -> PartitionParams {
        PartitionParams {
            power_law_exponent: self.power_law_exponent,
            min_client_size: self.min_client_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layer_dims: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmName {
    Sgd,
    Fedavg,
    Fedprox,
    Fedcurv,
    Scaffold,
    Fedreg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: AlgorithmName,
    #[serde(default = "one")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_eta_s")]
    pub eta_s: f64,
    /// Defaults to `0.01 * eta_s`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_p: Option<f64>,
    #[serde(default = "ten")]
    pub fgsm_steps: usize,
    #[serde(default)]
    pub use_mg: bool,
    #[serde(default)]
    pub clip_inputs: bool,
    #[serde(default)]
    pub weighted_average: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp: Option<DpConfig>,
}

fn default_batch() -> usize {
    32
}
fn default_gamma() -> f64 {
    0.5
}
fn default_eta_s() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub forgetting: bool,
    pub fisher: bool,
    pub fisher_window: usize,
    /// Also measure this algorithm's forgetting each round, trained from the
    /// same global parameters with the same `[train]` hyperparameters.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compare_with: Option<AlgorithmName>,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection {
            forgetting: false,
            fisher: false,
            fisher_window: 10,
            compare_with: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseName {
    Plain,
    Dpsgd,
    FedregMg,
}

impl DefenseName {
    pub fn as_str(&self) -> &'static str {
        match self {
            DefenseName::Plain => "plain",
            DefenseName::Dpsgd => "dpsgd",
            DefenseName::FedregMg => "fedreg_mg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    /// Number of test examples attacked.
    pub targets: usize,
    pub iterations: usize,
    pub distance: Distance,
    pub tv_weight: f64,
    pub step_size: f64,
    pub schedule: LrSchedule,
    pub defenses: Vec<DefenseName>,
    /// DPSGD settings used by the `dpsgd` defense.
    pub dp_clip_bound: f64,
    pub dp_noise_scale: f64,
    /// Pseudo-data step used by the `fedreg_mg` defense.
    pub mg_eta_s: f64,
    /// Image shape for TV and PGM output; zero means a square inferred from
    /// the input dimension.
    pub image_h: usize,
    pub image_w: usize,
    /// Clamp candidates into `[0, 1]`.
    #[serde(default = "yes")]
    pub clamp: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            targets: 4,
            iterations: 2000,
            distance: Distance::Cosine,
            tv_weight: 1e-8,
            step_size: 1.0,
            schedule: LrSchedule::MultiStep,
            defenses: vec![DefenseName::Plain, DefenseName::Dpsgd, DefenseName::FedregMg],
            dp_clip_bound: 1.0,
            dp_noise_scale: 0.002,
            mg_eta_s: 0.2,
            image_h: 0,
            image_w: 0,
            clamp: true,
        }
    }
}

impl AttackSection {
    pub fn defense(&self, name: DefenseName, fgsm_steps: usize) -> Defense {
        match name {
            DefenseName::Plain => Defense::Plain,
            DefenseName::Dpsgd => Defense::Dpsgd(DpConfig {
                clip_bound: self.dp_clip_bound,
                noise_scale: self.dp_noise_scale,
            }),
            DefenseName::FedregMg => Defense::FedRegMg {
                eta_s: self.mg_eta_s,
                fgsm_steps,
            },
        }
    }

    pub fn attack_config(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            iterations: self.iterations,
            distance: self.distance,
            tv_weight: self.tv_weight,
            step_size: self.step_size,
            schedule: self.schedule,
            seed,
            clamp: self.clamp,
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML, fills derived defaults and validates every key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Parse(format!("config parse error: {e}")))?;
        cfg.fill_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative dataset paths are rebased onto its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = &mut cfg.dataset
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved configuration as `config.toml` under `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml_string()?)?;
        Ok(path)
    }

    fn fill_defaults(&mut self) {
        if self.train.eta_p.is_none() {
            self.train.eta_p = Some(0.01 * self.train.eta_s);
        }
        if self.attack.image_h == 0 && self.attack.image_w == 0 {
            let dim = self.model.layer_dims.first().copied().unwrap_or(0);
            let side = (dim as f64).sqrt().round() as usize;
            if side * side == dim {
                self.attack.image_h = side;
                self.attack.image_w = side;
            } else {
                self.attack.image_h = 1;
                self.attack.image_w = dim;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("rounds", "must be >= 1"));
        }
        if self.clients_per_round == 0 {
            return Err(Error::invalid("clients_per_round", "must be >= 1"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers", "must be >= 1"));
        }
        if self.partition.n_clients == 0 {
            return Err(Error::invalid("partition.n_clients", "must be >= 1"));
        }
        if self.clients_per_round > self.partition.n_clients {
            return Err(Error::invalid(
                "clients_per_round",
                format!("exceeds partition.n_clients = {}", self.partition.n_clients),
            ));
        }
        if let Some(r) = self.reference_accuracy {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::invalid("reference_accuracy", "must be in (0, 1]"));
            }
        }
        if !(self.partition.power_law_exponent > 1.0) {
            return Err(Error::invalid("partition.power_law_exponent", "must be > 1"));
        }
        if self.partition.min_client_size == 0 {
            return Err(Error::invalid("partition.min_client_size", "must be >= 1"));
        }
        let spec = self.model_spec()?;
        match &self.dataset {
            DatasetConfig::Synthetic {
                n_classes,
                dim,
                per_class,
                test_per_class,
                spread,
            } => {
                if *n_classes < 2 || *dim == 0 || *per_class == 0 || *test_per_class == 0 {
                    return Err(Error::invalid(
                        "dataset",
                        "n_classes >= 2, dim, per_class and test_per_class >= 1",
                    ));
                }
                if !(*spread > 0.0) {
                    return Err(Error::invalid("dataset.spread", "must be positive"));
                }
                if spec.input_dim() != *dim || spec.n_classes() != *n_classes {
                    return Err(Error::invalid(
                        "model.layer_dims",
                        format!("must start with dim {dim} and end with n_classes {n_classes}"),
                    ));
                }
            }
            DatasetConfig::Idx { max_train, .. } => {
                if *max_train == Some(0) {
                    return Err(Error::invalid("dataset.max_train", "must be >= 1"));
                }
            }
        }
        self.local_train()?.validate()?;
        if self.diagnostics.fisher_window == 0 {
            return Err(Error::invalid("diagnostics.fisher_window", "must be >= 1"));
        }
        self.validate_attack(&spec)
    }

    fn validate_attack(&self, spec: &ModelSpec) -> Result<()> {
        let a = &self.attack;
        if a.iterations == 0 {
            return Err(Error::invalid("attack.iterations", "must be >= 1"));
        }
        if a.targets == 0 {
            return Err(Error::invalid("attack.targets", "must be >= 1"));
        }
        if !(a.step_size > 0.0) {
            return Err(Error::invalid("attack.step_size", "must be positive"));
        }
        if !(a.tv_weight >= 0.0) {
            return Err(Error::invalid("attack.tv_weight", "must be >= 0"));
        }
        if a.defenses.is_empty() {
            return Err(Error::invalid("attack.defenses", "list at least one defense"));
        }
        if a.image_h * a.image_w != spec.input_dim() {
            return Err(Error::invalid(
                "attack.image_h",
                format!("image_h * image_w must equal the input dimension {}", spec.input_dim()),
            ));
        }
        if !(a.mg_eta_s > 0.0) {
            return Err(Error::invalid("attack.mg_eta_s", "must be positive"));
        }
        DpConfig {
            clip_bound: a.dp_clip_bound,
            noise_scale: a.dp_noise_scale,
        }
        .validate()
        .map_err(|e| match e {
            Error::Validation { key, reason } => Error::invalid(format!("attack.dp_{key}"), reason),
            other => other,
        })
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(self.model.layer_dims.clone()).map_err(|e| match e {
            Error::Validation { reason, .. } => Error::invalid("model.layer_dims", reason),
            other => other,
        })
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm_named(self.train.algorithm)
    }

    fn algorithm_named(&self, name: AlgorithmName) -> Algorithm {
        let t = &self.train;
        match name {
            AlgorithmName::Sgd => Algorithm::Sgd,
            AlgorithmName::Fedavg => Algorithm::FedAvg,
            AlgorithmName::Fedprox => Algorithm::FedProx { mu: t.mu },
            AlgorithmName::Fedcurv => Algorithm::FedCurv { lambda: t.lambda },
            AlgorithmName::Scaffold => Algorithm::Scaffold,
            AlgorithmName::Fedreg => Algorithm::FedReg(FedRegConfig {
                eta_p: t.eta_p.unwrap_or(0.01 * t.eta_s),
                fgsm_steps: t.fgsm_steps,
                use_mg: t.use_mg,
                clip_inputs: t.clip_inputs,
                ..FedRegConfig::new(t.gamma, t.eta_s)
            }),
        }
    }

    pub fn local_train(&self) -> Result<LocalTrainConfig> {
        let t = &self.train;
        let mut local = LocalTrainConfig::new(self.algorithm(), t.epochs, t.batch_size, t.learning_rate);
        local.dp = t.dp;
        Ok(local)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        Ok(RunConfig {
            rounds: self.rounds,
            clients_per_round: self.clients_per_round,
            seed: self.seed,
            local: self.local_train()?,
            weighted_average: self.train.weighted_average,
            diagnostics: DiagnosticsConfig {
                forgetting: self.diagnostics.forgetting,
                fisher: self.diagnostics.fisher,
                fisher_window: self.diagnostics.fisher_window,
                shadow: match self.diagnostics.compare_with {
                    Some(name) => Some(LocalTrainConfig {
                        algorithm: self.algorithm_named(name),
                        ..self.local_train()?
                    }),
                    None => None,
                },
            },
            workers: self.workers,
        })
    }

    /// Train and test sets described by `[dataset]`.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetConfig::Synthetic {
                n_classes,
                dim,
                per_class,
                test_per_class,
                spread,
            } => {
                let all = data::synth_blobs(*n_classes, *dim, per_class + test_per_class, *spread, self.seed)?;
                let block = per_class + test_per_class;
                let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
                for c in 0..*n_classes {
                    train_idx.extend(c * block..c * block + per_class);
                    test_idx.extend(c * block + per_class..(c + 1) * block);
                }
                Ok((subset(&all, &train_idx)?, subset(&all, &test_idx)?))
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                max_train,
            } => {
                let mut train = data::load_idx(train_images, train_labels)?;
                let test = data::load_idx(test_images, test_labels)?;
                if let Some(n) = max_train {
                    train = train.truncated(*n);
                }
                let spec = self.model_spec()?;
                for (what, d) in [("train", &train), ("test", &test)] {
                    if d.dim() != spec.input_dim() {
                        return Err(Error::invalid(
                            "model.layer_dims",
                            format!("{what} images have {} pixels, model expects {}", d.dim(), spec.input_dim()),
                        ));
                    }
                }
                let n_classes = spec.n_classes();
                let relabel = |d: Dataset| Dataset::new(d.features, d.labels, n_classes);
                Ok((relabel(train)?, relabel(test)?))
            }
        }
    }
}

fn subset(d: &Dataset, indices: &[usize]) -> Result<Dataset> {
    Dataset::new(d.features.select(ndarray::Axis(0), indices), d.labels_at(indices), d.n_classes)
}
