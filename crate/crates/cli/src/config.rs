use std::path::{Path, PathBuf};

use czsl::baselines::BaselineConfig;
use czsl::compgraph::GcnConfig;
use czsl::dataset::BenchmarkConfig;
use czsl::encoder::{ModelConfig, DEFAULT_CHANNELS};
use czsl::metalearn::{OptimizerKind, PretrainConfig, TrainConfig};
use czsl::sampler::EpisodeConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ours,
    Visprod,
    Le,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Visprod => "visprod",
            Method::Le => "le",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Manifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub source: DataSource,
    /// Where `generate` writes the split manifests and where `run` reads them.
    pub dir: PathBuf,
    /// Manifest files to merge when `source = "manifest"`.
    pub manifests: Vec<PathBuf>,
    pub n_type1_per_split: usize,
    pub n_type2_per_split: usize,
    pub samples_per_composition: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub min_samples_per_composition: usize,
    pub embedding_dim: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let b = BenchmarkConfig::default();
        Self {
            source: DataSource::Synthetic,
            dir: PathBuf::from("data/synthetic"),
            manifests: Vec::new(),
            n_type1_per_split: b.n_type1_per_split,
            n_type2_per_split: b.n_type2_per_split,
            samples_per_composition: b.samples_per_composition,
            image_size: b.image_size,
            noise_sigma: b.noise_sigma,
            min_samples_per_composition: 10,
            embedding_dim: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSection {
    pub n_p: usize,
    pub k_s: usize,
    pub k_q: usize,
    pub max_attempts: usize,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        let e = EpisodeConfig::default();
        Self { n_p: e.n_p, k_s: e.k_s, k_q: e.k_q, max_attempts: e.max_attempts }
    }
}

impl EpisodeSection {
    pub fn config(&self) -> EpisodeConfig {
        EpisodeConfig { n_p: self.n_p, k_s: self.k_s, k_q: self.k_q, max_attempts: self.max_attempts }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub gcn_layers: usize,
    pub gcn_hidden: usize,
    pub embed_dim: usize,
    pub corr_hidden: usize,
    pub embed_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            gcn_layers: m.gcn.layers,
            gcn_hidden: m.gcn.hidden,
            embed_dim: m.gcn.out,
            corr_hidden: m.corr_hidden,
            embed_hidden: m.embed_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self { channels: DEFAULT_CHANNELS.to_vec(), epochs: 30, batch_size: p.batch_size, lr: p.lr, weight_decay: p.weight_decay }
    }
}

impl PretrainSection {
    pub fn config(&self) -> PretrainConfig {
        PretrainConfig { epochs: self.epochs, batch_size: self.batch_size, lr: self.lr, weight_decay: self.weight_decay }
    }
}

/// Training hyperparameters; the training seed comes from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epsilon: f64,
    pub gamma: f64,
    pub inner_steps: usize,
    pub max_episodes: usize,
    pub weight_decay: f64,
    pub second_order: bool,
    pub optimizer: OptimizerKind,
    pub bilevel: bool,
    pub mixup: bool,
    pub mixup_alpha: f64,
    pub val_every: usize,
    pub val_episodes: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epsilon: t.epsilon,
            gamma: t.gamma,
            inner_steps: t.inner_steps,
            max_episodes: t.max_episodes,
            weight_decay: t.weight_decay,
            second_order: t.second_order,
            optimizer: t.optimizer,
            bilevel: t.bilevel,
            mixup: t.mixup,
            mixup_alpha: t.mixup_alpha,
            val_every: t.val_every,
            val_episodes: t.val_episodes,
        }
    }
}

impl TrainingSection {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epsilon: self.epsilon,
            gamma: self.gamma,
            inner_steps: self.inner_steps,
            max_episodes: self.max_episodes,
            weight_decay: self.weight_decay,
            second_order: self.second_order,
            optimizer: self.optimizer,
            bilevel: self.bilevel,
            mixup: self.mixup,
            mixup_alpha: self.mixup_alpha,
            val_every: self.val_every,
            val_episodes: self.val_episodes,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub n_test_episodes: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { n_test_episodes: 200, seeds: vec![0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root seed for data generation.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub method: Method,
    pub dataset: DatasetSection,
    pub episode: EpisodeSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub training: TrainingSection,
    pub baseline: BaselineConfig,
    pub evaluation: EvaluationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            method: Method::Ours,
            dataset: DatasetSection::default(),
            episode: EpisodeSection::default(),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            training: TrainingSection::default(),
            baseline: BaselineConfig::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_w: self.dataset.embedding_dim,
            gcn: GcnConfig { layers: self.model.gcn_layers, hidden: self.model.gcn_hidden, out: self.model.embed_dim },
            channels: *self.pretrain.channels.last().unwrap_or(&0),
            corr_hidden: self.model.corr_hidden,
            embed_hidden: self.model.embed_hidden,
        }
    }

    pub fn benchmark(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            n_type1_per_split: self.dataset.n_type1_per_split,
            n_type2_per_split: self.dataset.n_type2_per_split,
            samples_per_composition: self.dataset.samples_per_composition,
            image_size: self.dataset.image_size,
            noise_sigma: self.dataset.noise_sigma,
            seed: czsl::seeds::derive_seed(self.seed, "data"),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.episode.config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.training.config(0).validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.pretrain.channels.is_empty() {
            return Err(CliError::Config("pretrain.channels must not be empty".into()));
        }
        if self.evaluation.seeds.is_empty() {
            return Err(CliError::Config("evaluation.seeds must not be empty".into()));
        }
        if self.evaluation.n_test_episodes < 2 {
            return Err(CliError::Config("evaluation.n_test_episodes must be at least 2".into()));
        }
        if self.dataset.source == DataSource::Manifest && self.dataset.manifests.is_empty() {
            return Err(CliError::Config("dataset.manifests is required when dataset.source = \"manifest\"".into()));
        }
        Ok(())
    }

    /// Defaults, overlaid by `path` (if any), overlaid by `key=value` pairs.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, or as a bare string
/// when it does not parse as one.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| CliError::Config(format!("override {key}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[training]\nepsilonn = 0.3\n").unwrap();
        assert!(matches!(ExperimentConfig::load(Some(&p), &[]), Err(CliError::Config(_))));
        std::fs::write(&p, "colour = 1\n").unwrap();
        assert!(matches!(ExperimentConfig::load(Some(&p), &[]), Err(CliError::Config(_))));
    }

    #[test]
    fn cli_overrides_file_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "method = \"le\"\n[training]\ngamma = 0.01\nmax_episodes = 7\n").unwrap();
        let cfg = ExperimentConfig::load(Some(&p), &["training.max_episodes=3".into(), "output_dir=out/x".into()]).unwrap();
        assert_eq!(cfg.method, Method::Le);
        assert_eq!(cfg.training.gamma, 0.01);
        assert_eq!(cfg.training.max_episodes, 3);
        assert_eq!(cfg.training.epsilon, 0.4);
        assert_eq!(cfg.output_dir, PathBuf::from("out/x"));
        assert!(ExperimentConfig::load(None, &["training.inner_steps=0".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["nonsense".into()]).is_err());
    }
}
