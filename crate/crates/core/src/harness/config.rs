use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, FieldError, Result};
use crate::features::{generate_synthetic, load_dataset, load_saliency, SaliencyAnnotation, SyntheticSpec, VideoQAInstance};
use crate::intervention::InterventionConfig;
use crate::mnse::MnseConfig;
use crate::pcma::PcmaConfig;
use crate::samplers::{MarSpec, Pcma80Config, RlAgentConfig, S3StudentConfig};

/// Environment variable that replaces `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "CAUSALVQA_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    File { manifest: PathBuf },
}

/// Instances plus whatever annotations the source carries.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub instances: Vec<VideoQAInstance>,
    pub saliency: Option<Vec<SaliencyAnnotation>>,
    /// Planted causal clips, known only for synthetic data.
    pub causal_masks: Option<Vec<Vec<bool>>>,
}

impl DatasetSource {
    pub fn load(&self) -> Result<LoadedDataset> {
        match self {
            DatasetSource::Synthetic(spec) => {
                let d = generate_synthetic(spec)?;
                Ok(LoadedDataset {
                    instances: d.instances,
                    saliency: Some(d.saliency),
                    causal_masks: Some(d.causal_masks),
                })
            }
            DatasetSource::File { manifest } => Ok(LoadedDataset {
                instances: load_dataset(manifest)?,
                saliency: load_saliency(manifest)?,
                causal_masks: None,
            }),
        }
    }

    fn field_errors(&self, prefix: &str) -> Vec<FieldError> {
        match self {
            DatasetSource::Synthetic(spec) => spec.field_errors(&format!("{prefix}.synthetic")),
            DatasetSource::File { .. } => Vec::new(),
        }
    }

    fn resolve(&mut self, base: &Path) {
        if let DatasetSource::File { manifest } = self {
            *manifest = resolve_path(base, manifest);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Required: every run derives its randomness from it.
    pub seed: u64,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_steps() -> usize {
    300
}

fn default_batch_size() -> usize {
    8
}

impl OptimizerConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            lr: default_lr(),
            steps: default_steps(),
            batch_size: default_batch_size(),
            seed,
        }
    }

    fn field_errors(&self, prefix: &str) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            errs.push(FieldError::new(format!("{prefix}.lr"), "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            errs.push(FieldError::new(format!("{prefix}.batch_size"), "must be positive"));
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum S3Mode {
    Student,
    Rl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct S3Config {
    pub mode: S3Mode,
    #[serde(default)]
    pub student: S3StudentConfig,
    #[serde(default)]
    pub rl: RlAgentConfig,
    /// Distillation weight of the student objective.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Student optimizer steps or RL episodes.
    #[serde(default = "default_s3_steps")]
    pub steps: usize,
}

fn default_lambda() -> f64 {
    1.0
}

fn default_s3_steps() -> usize {
    200
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub mar: Option<MarSpec>,
    pub pcma80: Option<Pcma80Config>,
    pub s3: Option<S3Config>,
}

impl SamplerConfig {
    fn field_errors(&self, prefix: &str) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if let Some(p) = &self.pcma80 {
            errs.extend(p.field_errors(&format!("{prefix}.pcma80")));
        }
        if let Some(s3) = &self.s3 {
            match s3.mode {
                S3Mode::Student => errs.extend(s3.student.field_errors(&format!("{prefix}.s3.student"))),
                S3Mode::Rl => errs.extend(s3.rl.field_errors(&format!("{prefix}.s3.rl"))),
            }
            if !(s3.lambda >= 0.0 && s3.lambda.is_finite()) {
                errs.push(FieldError::new(format!("{prefix}.s3.lambda"), "must be finite and non-negative"));
            }
            if s3.steps == 0 {
                errs.push(FieldError::new(format!("{prefix}.s3.steps"), "must be positive"));
            }
        }
        errs
    }
}

/// One run: data, model, intervention and bank settings, optimizer and
/// artifact locations. Relative paths are taken from the config file's
/// directory by [`ExperimentConfig::from_file`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Evaluation data; the training data is used when absent.
    #[serde(default)]
    pub eval_dataset: Option<DatasetSource>,
    #[serde(default)]
    pub model: PcmaConfig,
    #[serde(default)]
    pub intervention: InterventionConfig,
    #[serde(default)]
    pub mnse: MnseConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Model to evaluate, or the frozen backbone of a learned sampler.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Intervention-trained model of the seen/unseen protocol.
    #[serde(default)]
    pub model_a: Option<PathBuf>,
    /// Baseline model of the seen/unseen protocol.
    #[serde(default)]
    pub model_b: Option<PathBuf>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    /// A config with defaults everywhere except the dataset and seed.
    pub fn new(dataset: DatasetSource, seed: u64) -> Self {
        Self {
            dataset,
            eval_dataset: None,
            model: PcmaConfig::default(),
            intervention: InterventionConfig::default(),
            mnse: MnseConfig::default(),
            sampler: SamplerConfig::default(),
            optimizer: OptimizerConfig::with_seed(seed),
            output_dir: default_output_dir(),
            checkpoint: None,
            model_a: None,
            model_b: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))
    }

    /// Parses, resolves relative paths, applies the output-dir override and
    /// validates.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        self.dataset.resolve(base);
        if let Some(d) = &mut self.eval_dataset {
            d.resolve(base);
        }
        self.output_dir = resolve_path(base, &self.output_dir);
        for p in [&mut self.checkpoint, &mut self.model_a, &mut self.model_b].into_iter().flatten() {
            *p = resolve_path(base, p);
        }
    }

    /// Every invalid field, in declaration order.
    pub fn field_errors(&self) -> Vec<FieldError> {
        let mut errs = self.dataset.field_errors("dataset");
        if let Some(d) = &self.eval_dataset {
            errs.extend(d.field_errors("eval_dataset"));
        }
        errs.extend(self.model.field_errors("model"));
        errs.extend(self.intervention.field_errors("intervention"));
        errs.extend(self.mnse.field_errors("mnse"));
        errs.extend(self.sampler.field_errors("sampler"));
        errs.extend(self.optimizer.field_errors("optimizer"));
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.field_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn load_train(&self) -> Result<LoadedDataset> {
        self.dataset.load()
    }

    pub fn load_eval(&self) -> Result<LoadedDataset> {
        self.eval_dataset.as_ref().unwrap_or(&self.dataset).load()
    }
}
