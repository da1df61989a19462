//! Experiment configuration: one TOML document whose sections mirror the
//! library's config types. Every hyperparameter has a default, so a config
//! only needs a `[dataset]` section.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, make_synthetic_split, pad_to_32, LabeledDataset, PartitionSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::federation::{FedConfig, Weighting};
use crate::models::{Architecture, ModelSpec};
use crate::numerics::SgdConfig;
use crate::personalization::{Algorithm, LocalConfig, PersonalizationConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Worker threads; 0 lets the pool decide.
    #[serde(default)]
    pub workers: usize,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub fedavg: FedavgConfig,
    #[serde(default)]
    pub local: LocalSection,
    #[serde(default)]
    pub personalization: PersonalizationSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        #[serde(default = "one")]
        channels: usize,
        #[serde(default = "thirty_two")]
        side: usize,
        noise: f64,
        #[serde(default = "three")]
        blobs: usize,
        /// Defaults to the experiment seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

fn one() -> usize {
    1
}

fn thirty_two() -> usize {
    32
}

fn three() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_arch")]
    pub arch: String,
    /// Hidden widths of the MLP.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

fn default_arch() -> String {
    "lenet5".into()
}

fn default_hidden() -> Vec<usize> {
    vec![200, 200]
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: default_arch(),
            hidden: default_hidden(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients: usize,
    pub concentration: f64,
    /// Defaults to the experiment seed.
    pub seed: Option<u64>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            clients: 100,
            concentration: 0.5,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedavgConfig {
    pub rounds: usize,
    pub participation: f64,
    pub local_epochs: usize,
    pub local_batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub weighting: Weighting,
    pub eval_every: usize,
}

impl Default for FedavgConfig {
    fn default() -> Self {
        Self {
            rounds: 1000,
            participation: 0.1,
            local_epochs: 5,
            local_batch: 10,
            learning_rate: 0.01,
            momentum: 0.5,
            weight_decay: 0.0,
            weighting: Weighting::SampleCount,
            eval_every: 1,
        }
    }
}

/// The from-scratch Local baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
}

impl Default for LocalSection {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 100,
        }
    }
}

/// Optional per-algorithm overrides of the shared personalization keys.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonalizationOverride {
    pub epochs: Option<usize>,
    pub adapt_lr: Option<f64>,
    pub gate_lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub split_ratio: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonalizationSection {
    pub epochs: usize,
    pub adapt_lr: f64,
    pub gate_lr: f64,
    pub batch_size: usize,
    pub split_ratio: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub pfl_ft: PersonalizationOverride,
    pub pfl_fb: PersonalizationOverride,
    pub pfl_mf: PersonalizationOverride,
    pub pfl_mfe: PersonalizationOverride,
}

impl Default for PersonalizationSection {
    fn default() -> Self {
        Self {
            epochs: 200,
            adapt_lr: 0.001,
            gate_lr: 0.001,
            batch_size: 64,
            split_ratio: 0.8,
            momentum: 0.9,
            weight_decay: 5e-4,
            pfl_ft: PersonalizationOverride::default(),
            pfl_fb: PersonalizationOverride::default(),
            pfl_mf: PersonalizationOverride::default(),
            pfl_mfe: PersonalizationOverride::default(),
        }
    }
}

impl PersonalizationSection {
    pub fn resolve(&self, algorithm: Algorithm) -> PersonalizationConfig {
        let none = PersonalizationOverride::default();
        let o = match algorithm {
            Algorithm::Local => &none,
            Algorithm::PflFt => &self.pfl_ft,
            Algorithm::PflFb => &self.pfl_fb,
            Algorithm::PflMf => &self.pfl_mf,
            Algorithm::PflMfe => &self.pfl_mfe,
        };
        self.resolve_with(algorithm, o)
    }

    fn resolve_with(&self, algorithm: Algorithm, o: &PersonalizationOverride) -> PersonalizationConfig {
        PersonalizationConfig {
            algorithm,
            epochs: o.epochs.unwrap_or(self.epochs),
            adapt_lr: o.adapt_lr.unwrap_or(self.adapt_lr),
            gate_lr: o.gate_lr.unwrap_or(self.gate_lr),
            batch_size: o.batch_size.unwrap_or(self.batch_size),
            split_ratio: o.split_ratio.unwrap_or(self.split_ratio),
            momentum: o.momentum.unwrap_or(self.momentum),
            weight_decay: o.weight_decay.unwrap_or(self.weight_decay),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn architecture(&self) -> Result<Architecture> {
        self.model
            .arch
            .parse()
            .map_err(|e: Error| Error::config(format!("model.arch: {e}")))
    }

    /// Model spec for data of the given shape.
    pub fn model_spec(&self, channels: usize, classes: usize) -> Result<ModelSpec> {
        let spec = match self.architecture()? {
            Architecture::Lenet5 => ModelSpec::lenet5(channels, classes),
            Architecture::Mlp => ModelSpec::mlp(channels, self.model.hidden.clone(), classes),
        };
        spec.validate()
            .map_err(|e| Error::config(format!("model: {e}")))?;
        Ok(spec)
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            clients: self.partition.clients,
            concentration: self.partition.concentration,
            seed: self.partition.seed.unwrap_or(self.seed),
        }
    }

    pub fn fed_config(&self) -> FedConfig {
        let f = &self.fedavg;
        FedConfig {
            rounds: f.rounds,
            participation: f.participation,
            local_epochs: f.local_epochs,
            local_batch: f.local_batch,
            sgd: SgdConfig {
                learning_rate: f.learning_rate,
                momentum: f.momentum,
                weight_decay: f.weight_decay,
                lr_decay_factor: 1.0,
                lr_decay_every: 0,
            },
            weighting: f.weighting,
            eval_every: f.eval_every,
            seed: self.seed,
            workers: self.workers,
        }
    }

    pub fn local_config(&self) -> LocalConfig {
        let l = &self.local;
        LocalConfig {
            epochs: l.epochs,
            batch_size: l.batch_size,
            sgd: SgdConfig {
                learning_rate: l.learning_rate,
                momentum: l.momentum,
                weight_decay: l.weight_decay,
                lr_decay_factor: l.lr_decay_factor,
                lr_decay_every: l.lr_decay_every,
            },
        }
    }

    pub fn synthetic_spec(&self) -> Option<(SyntheticSpec, usize)> {
        match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                per_class,
                test_per_class,
                channels,
                side,
                noise,
                blobs,
                seed,
            } => Some((
                SyntheticSpec {
                    classes: *classes,
                    per_class: *per_class,
                    channels: *channels,
                    side: *side,
                    noise: *noise,
                    blobs: *blobs,
                    seed: seed.unwrap_or(self.seed),
                },
                *test_per_class,
            )),
            DatasetConfig::Idx { .. } => None,
        }
    }

    /// Checks every nested invariant, reporting the first violation with its
    /// field path. Does not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetConfig::Synthetic { test_per_class, side, .. } => {
                let (spec, _) = self.synthetic_spec().expect("synthetic");
                spec.validate()
                    .map_err(|e| Error::config(format!("dataset: {e}")))?;
                if *test_per_class == 0 {
                    return Err(Error::config("dataset.test_per_class must be >= 1"));
                }
                if *side != 32 {
                    return Err(Error::config(format!("dataset.side must be 32, got {side}")));
                }
            }
            DatasetConfig::Idx { .. } => {}
        }
        let arch = self.architecture()?;
        if arch == Architecture::Mlp && self.model.hidden.contains(&0) {
            return Err(Error::config("model.hidden widths must be >= 1"));
        }
        self.partition_spec().validate()?;
        let clients = self.partition.clients;
        if self.fedavg.local_epochs == 0 {
            return Err(Error::config("fedavg.local_epochs must be >= 1"));
        }
        self.fed_config().validate(clients)?;
        let local = self.local_config();
        if local.batch_size == 0 {
            return Err(Error::config("local.batch_size must be >= 1"));
        }
        local.sgd.validate("local")?;
        let p = &self.personalization;
        p.resolve_with(Algorithm::PflFt, &PersonalizationOverride::default())
            .validate("personalization")?;
        for algorithm in Algorithm::ALL.into_iter().filter(|a| *a != Algorithm::Local) {
            p.resolve(algorithm)
                .validate(&format!("personalization.{algorithm}"))?;
        }
        Ok(())
    }

    /// Loads train and test sets, padding 28×28 IDX images to 32×32.
    pub fn load_data(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match &self.dataset {
            DatasetConfig::Synthetic { .. } => {
                let (spec, test_per_class) = self.synthetic_spec().expect("synthetic");
                make_synthetic_split(&spec, test_per_class)
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = pad_to_32(&load_idx(train_images, train_labels)?)?;
                let test = pad_to_32(&load_idx(test_images, test_labels)?)?;
                let classes = train.classes().max(test.classes());
                let relabel = |d: LabeledDataset| {
                    LabeledDataset::new(d.features().clone(), d.labels().to_vec(), classes)
                };
                let (train, test) = (relabel(train)?, relabel(test)?);
                Ok((train, test))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [dataset]
        source = "synthetic"
        classes = 10
        per_class = 20
        test_per_class = 5
        noise = 0.3
    "#;

    #[test]
    fn defaults_are_reference_hyperparameters() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.partition.clients, 100);
        assert_eq!(cfg.fedavg.rounds, 1000);
        assert_eq!(cfg.fedavg.participation, 0.1);
        assert_eq!(cfg.fedavg.local_batch, 10);
        assert_eq!(cfg.fedavg.local_epochs, 5);
        assert_eq!(cfg.fedavg.learning_rate, 0.01);
        assert_eq!(cfg.fedavg.momentum, 0.5);
        assert_eq!(cfg.personalization.epochs, 200);
        assert_eq!(cfg.personalization.adapt_lr, 0.001);
        assert_eq!(cfg.personalization.gate_lr, 0.001);
        assert_eq!(cfg.local.epochs, 300);
    }

    #[test]
    fn overrides_apply_per_algorithm() {
        let text = format!("{MINIMAL}\n[personalization.pfl_mf]\ngate_lr = 0.5\n");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.personalization.resolve(Algorithm::PflMf).gate_lr, 0.5);
        assert_eq!(cfg.personalization.resolve(Algorithm::PflMfe).gate_lr, 0.001);
    }

    #[test]
    fn violations_name_the_field() {
        let text = format!("{MINIMAL}\n[fedavg]\nparticipation = 1.5\n");
        let err = ExperimentConfig::from_toml(&text).unwrap().validate().unwrap_err();
        assert!(err.to_string().contains("fedavg.participation"), "{err}");

        let text = format!("{MINIMAL}\n[personalization.pfl_mfe]\nsplit_ratio = 1.0\n");
        let err = ExperimentConfig::from_toml(&text).unwrap().validate().unwrap_err();
        assert!(err.to_string().contains("personalization.pfl_mfe.split_ratio"), "{err}");

        let text = format!("{MINIMAL}\n[model]\narch = \"vgg16\"\n");
        let err = ExperimentConfig::from_toml(&text).unwrap().validate().unwrap_err();
        assert!(err.to_string().contains("model.arch"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{MINIMAL}\n[fedavg]\nround = 3\n");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }
}
