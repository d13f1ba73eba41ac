//! TOML experiment configuration.
//!
//! One file carries every section; subcommands read the parts they need.
//! Command-line flags override file values, and the digest is taken over
//! the fully resolved configuration, so any effective change shows up in
//! every downstream manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use easycore::attack::{AttackConfig, AttackObjective};
use easycore::data::{generate_clusters, load_csv_dataset, ClusterConfig, CsvOptions, Dataset};
use easycore::error::{Error, Result};
use easycore::model::ModelConfig;
use easycore::rng::derive_seed;
use easycore::train::{SchedulerSpec, TradesConfig, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub trades: TradesSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub select: SelectSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Clusters,
    Csv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// CSV: training file.
    pub path: Option<PathBuf>,
    /// CSV: optional held-out file.
    pub test_path: Option<PathBuf>,
    #[serde(default)]
    pub has_header: bool,
    #[serde(default)]
    pub minmax_scale: bool,
    /// Clusters: either every field below is given or none (the built-in
    /// six-cluster layout is used).
    pub centers: Option<Vec<(f64, f64)>>,
    pub train_counts: Option<Vec<usize>>,
    pub test_counts: Option<Vec<usize>>,
    pub stds: Option<Vec<f64>>,
    pub class_of_cluster: Option<Vec<usize>>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: DatasetKind::Clusters,
            path: None,
            test_path: None,
            has_header: false,
            minmax_scale: false,
            centers: None,
            train_counts: None,
            test_counts: None,
            stds: None,
            class_of_cluster: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            input_dim: 2,
            hidden_dim: 64,
            num_blocks: 6,
            num_classes: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Standard,
    Trades,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSplit {
    /// Score only the training split.
    Train,
    /// Score the training and test splits.
    Both,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerSection {
    pub kind: SchedulerKind,
    pub milestones: Option<Vec<usize>>,
    pub gamma: Option<f64>,
    pub step_size: Option<usize>,
    pub t_max: Option<usize>,
    pub eta_min: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    Multistep,
    Step,
    Cosine,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        SchedulerSection {
            kind: SchedulerKind::Multistep,
            milestones: Some(vec![75, 90]),
            gamma: Some(0.1),
            step_size: None,
            t_max: None,
            eta_min: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_true")]
    pub record_aign: bool,
    #[serde(default)]
    pub aign_trajectory: bool,
    #[serde(default = "default_score_split")]
    pub score_split: ScoreSplit,
}

fn default_true() -> bool {
    true
}

fn default_score_split() -> ScoreSplit {
    ScoreSplit::Train
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            mode: TrainMode::Standard,
            epochs: 100,
            batch_size: 128,
            initial_lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            scheduler: SchedulerSection::default(),
            checkpoint_every: 0,
            record_aign: true,
            aign_trajectory: false,
            score_split: ScoreSplit::Train,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TradesSection {
    pub beta: f64,
    /// Inner-adversary radius; raw input units.
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to epsilon / 4.
    pub step_size: Option<f64>,
    #[serde(default = "default_true")]
    pub random_start: bool,
}

impl Default for TradesSection {
    fn default() -> Self {
        TradesSection {
            beta: 6.0,
            epsilon: 0.0,
            steps: 10,
            step_size: None,
            random_start: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackObjectiveSection {
    #[serde(rename = "cross-entropy")]
    CrossEntropy,
    #[serde(rename = "kl-to-clean")]
    KlToClean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    /// No default: pixel-scale radii are meaningless on raw coordinates,
    /// so the radius must be explicit.
    pub epsilon: Option<f64>,
    pub steps: usize,
    /// Defaults to epsilon / 4.
    pub step_size: Option<f64>,
    #[serde(default)]
    pub random_start: bool,
    pub clip_min: Option<f64>,
    pub clip_max: Option<f64>,
    pub objective: AttackObjectiveSection,
    /// Which split the attack command evaluates.
    pub split: Split,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            epsilon: None,
            steps: 20,
            step_size: None,
            random_start: false,
            clip_min: None,
            clip_max: None,
            objective: AttackObjectiveSection::CrossEntropy,
            split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMethod {
    Easycore,
    EasycoreBalanced,
    Uniform,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectSection {
    pub method: SelectMethod,
    pub fraction: f64,
}

impl Default for SelectSection {
    fn default() -> Self {
        SelectSection {
            method: SelectMethod::Easycore,
            fraction: 0.6,
        }
    }
}

impl Config {
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Config> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let config: Config = toml::from_str(&text).map_err(|e| Error::InvalidConfig {
            issues: vec![format!("{}: {e}", path.as_ref().display())],
        })?;
        Ok(config)
    }

    /// Validate everything validatable up front, listing every violation.
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        match self.dataset.kind {
            DatasetKind::Csv => {
                if self.dataset.path.is_none() {
                    issues.push("dataset.path is required when dataset.kind = \"csv\"".into());
                }
            }
            DatasetKind::Clusters => {
                let fields = [
                    self.dataset.centers.is_some(),
                    self.dataset.train_counts.is_some(),
                    self.dataset.test_counts.is_some(),
                    self.dataset.stds.is_some(),
                    self.dataset.class_of_cluster.is_some(),
                ];
                let given = fields.iter().filter(|&&f| f).count();
                if given != 0 && given != fields.len() {
                    issues.push(
                        "dataset: cluster fields (centers, train_counts, test_counts, stds, \
                         class_of_cluster) must be given together or not at all"
                            .into(),
                    );
                }
            }
        }
        if let Err(Error::InvalidConfig { issues: more }) = self.model_config().validate() {
            issues.extend(more);
        }
        if let Err(Error::InvalidConfig { issues: more }) = self.train_config().validate() {
            issues.extend(more);
        }
        if !(self.select.fraction > 0.0 && self.select.fraction <= 1.0) {
            issues.push(format!(
                "select.fraction must be in (0, 1], got {}",
                self.select.fraction
            ));
        }
        if let Some(eps) = self.attack.epsilon {
            if !(eps >= 0.0) {
                issues.push(format!("attack.epsilon must be >= 0, got {eps}"));
            }
        }
        if self.train.mode == TrainMode::Trades {
            if let Err(Error::InvalidConfig { issues: more }) = self.trades_config().validate() {
                issues.extend(more);
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig { issues })
        }
    }

    /// Canonical serialized form; what the digest covers.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical form, hex-encoded.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical().as_bytes());
        hex_string(&hasher.finalize())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(
            self.model.input_dim,
            self.model.hidden_dim,
            self.model.num_blocks,
            self.model.num_classes,
        )
    }

    pub fn cluster_config(&self) -> ClusterConfig {
        match (
            &self.dataset.centers,
            &self.dataset.train_counts,
            &self.dataset.test_counts,
            &self.dataset.stds,
            &self.dataset.class_of_cluster,
        ) {
            (Some(centers), Some(train), Some(test), Some(stds), Some(classes)) => ClusterConfig {
                centers: centers.clone(),
                train_counts: train.clone(),
                test_counts: test.clone(),
                stds: stds.clone(),
                class_of_cluster: classes.clone(),
            },
            _ => ClusterConfig::six_gaussians(),
        }
    }

    /// Load or generate the (train, test) splits. The test split for CSV
    /// data is empty unless dataset.test_path is given.
    pub fn datasets(&self) -> Result<(Dataset, Option<Dataset>)> {
        match self.dataset.kind {
            DatasetKind::Clusters => {
                let (train, test) =
                    generate_clusters(&self.cluster_config(), self.data_seed())?;
                Ok((train, Some(test)))
            }
            DatasetKind::Csv => {
                let path = self.dataset.path.as_ref().ok_or_else(|| {
                    Error::config("dataset.path is required when dataset.kind = \"csv\"")
                })?;
                let options = CsvOptions {
                    has_header: self.dataset.has_header,
                    minmax_scale: self.dataset.minmax_scale,
                };
                let train = load_csv_dataset(path, options)?;
                let test = self
                    .dataset
                    .test_path
                    .as_ref()
                    .map(|p| load_csv_dataset(p, options))
                    .transpose()?;
                Ok((train, test))
            }
        }
    }

    pub fn split(&self, split: Split) -> Result<Dataset> {
        let (train, test) = self.datasets()?;
        match split {
            Split::Train => Ok(train),
            Split::Test => test.ok_or_else(|| {
                Error::config("this configuration has no test split (set dataset.test_path)")
            }),
        }
    }

    // Purpose-split seeds: changing one subsystem's knob never shifts
    // another subsystem's stream.
    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, "data", 0)
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init", 0)
    }

    pub fn train_seed(&self) -> u64 {
        derive_seed(self.seed, "train", 0)
    }

    pub fn attack_seed(&self) -> u64 {
        derive_seed(self.seed, "attack", 0)
    }

    pub fn select_seed(&self) -> u64 {
        derive_seed(self.seed, "select", 0)
    }

    pub fn scheduler_spec(&self) -> SchedulerSpec {
        let s = &self.train.scheduler;
        match s.kind {
            SchedulerKind::Multistep => SchedulerSpec::MultiStep {
                milestones: s.milestones.clone().unwrap_or_else(|| vec![75, 90]),
                gamma: s.gamma.unwrap_or(0.1),
            },
            SchedulerKind::Step => SchedulerSpec::Step {
                step_size: s.step_size.unwrap_or(30),
                gamma: s.gamma.unwrap_or(0.1),
            },
            SchedulerKind::Cosine => SchedulerSpec::Cosine {
                t_max: s.t_max.unwrap_or(self.train.epochs.max(1)),
                eta_min: s.eta_min.unwrap_or(0.0),
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            initial_lr: self.train.initial_lr,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            scheduler: self.scheduler_spec(),
            seed: self.train_seed(),
            checkpoint_every: self.train.checkpoint_every,
            checkpoint_dir: if self.train.checkpoint_every > 0 {
                Some(self.out_dir.join("checkpoints"))
            } else {
                None
            },
            record_aign: self.train.record_aign,
            aign_trajectory: self.train.aign_trajectory,
        }
    }

    pub fn trades_config(&self) -> TradesConfig {
        let t = &self.trades;
        let inner_attack = AttackConfig {
            epsilon: t.epsilon,
            steps: t.steps,
            step_size: t.step_size.unwrap_or(t.epsilon / 4.0),
            random_start: t.random_start,
            start_seed: 0, // the trainer derives per-batch seeds
            clip_min: self.attack.clip_min,
            clip_max: self.attack.clip_max,
            objective: AttackObjective::KlToClean,
        };
        TradesConfig {
            beta: t.beta,
            inner_attack,
        }
    }

    /// Evaluation attack; errors if the radius was never specified.
    pub fn attack_config(&self) -> Result<AttackConfig> {
        let a = &self.attack;
        let epsilon = a.epsilon.ok_or_else(|| {
            Error::config("attack.epsilon is required (raw-coordinate data has no implied scale)")
        })?;
        let cfg = AttackConfig {
            epsilon,
            steps: a.steps,
            step_size: a.step_size.unwrap_or(epsilon / 4.0),
            random_start: a.random_start,
            start_seed: self.attack_seed(),
            clip_min: a.clip_min,
            clip_max: a.clip_max,
            objective: match a.objective {
                AttackObjectiveSection::CrossEntropy => AttackObjective::CrossEntropy,
                AttackObjectiveSection::KlToClean => AttackObjective::KlToClean,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// SHA-256 of a file's contents, hex-encoded.
pub fn file_digest<P: AsRef<Path>>(path: P) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> &'static str {
        "seed = 7\n"
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let config: Config = toml::from_str(minimal_toml()).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.model.hidden_dim, 64);
        assert_eq!(config.train.epochs, 100);
        assert_eq!(config.select.fraction, 0.6);
        config.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = toml::from_str::<Config>("seed = 1\nnot_a_field = 2\n");
        assert!(err.is_err());
    }

    #[test]
    fn digest_changes_with_any_field() {
        let a: Config = toml::from_str(minimal_toml()).unwrap();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.train.epochs += 1;
        assert_ne!(a.digest(), b.digest());
        let mut c = a.clone();
        c.seed = 8;
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn validation_lists_every_issue() {
        let mut config: Config = toml::from_str(minimal_toml()).unwrap();
        config.model.hidden_dim = 0;
        config.train.batch_size = 0;
        config.select.fraction = 2.0;
        let err = config.validate().unwrap_err();
        match err {
            Error::InvalidConfig { issues } => {
                assert!(issues.len() >= 3, "{issues:?}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn subsystem_seeds_are_distinct() {
        let config: Config = toml::from_str(minimal_toml()).unwrap();
        let seeds = [
            config.data_seed(),
            config.init_seed(),
            config.train_seed(),
            config.attack_seed(),
            config.select_seed(),
        ];
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }

    #[test]
    fn attack_epsilon_is_required() {
        let config: Config = toml::from_str(minimal_toml()).unwrap();
        assert!(config.attack_config().is_err());
        let config: Config =
            toml::from_str("seed = 1\n[attack]\nepsilon = 0.5\n").unwrap();
        let attack = config.attack_config().unwrap();
        assert_eq!(attack.epsilon, 0.5);
        assert_eq!(attack.step_size, 0.125);
    }

    #[test]
    fn cluster_dataset_matches_library_defaults() {
        let config: Config = toml::from_str(minimal_toml()).unwrap();
        let (train, test) = config.datasets().unwrap();
        assert_eq!(train.n(), 1200);
        assert_eq!(test.unwrap().n(), 3000);
    }
}
