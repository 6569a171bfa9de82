//! Run configuration: a TOML file with one section per stage.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kgeu::kge::TrainConfig;
use kgeu::metaeu::{MetaTrainConfig, UnlearnConfig};
use kgeu::{Ablation, ModelKind, NormKind, RankMode, Scorer, TaskParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::errors::Tagged;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub tasks: TaskSection,
    #[serde(default)]
    pub meta: MetaSection,
    #[serde(default)]
    pub unlearn: UnlearnSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// TSV triple file; relative paths are taken from the config file's directory.
    pub path: PathBuf,
    /// Share of triples held out for testing.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: String,
    pub norm: String,
    pub dim: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub negatives: usize,
    pub init_bound: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TrainConfig::<f64>::default();
        Self {
            kind: ModelKind::TransE.name().to_owned(),
            norm: NormKind::L1.to_string(),
            dim: t.dim,
            margin: t.margin,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            negatives: t.negatives_per_positive,
            init_bound: t.init_bound,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub train: usize,
    pub valid: usize,
    pub n_entities: usize,
    pub max_triples: usize,
    pub support_fraction: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        let p = TaskParams::default();
        Self {
            train: 500,
            valid: 50,
            n_entities: p.n_entities,
            max_triples: p.max_triples,
            support_fraction: p.support_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaSection {
    pub learners: usize,
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for MetaSection {
    fn default() -> Self {
        let m = MetaTrainConfig::<f64>::default();
        Self {
            learners: 4,
            layers: 3,
            epochs: m.epochs,
            batch_size: m.batch_size,
            learning_rate: m.learning_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnSection {
    /// Share of training triples to forget; ignored when `forget_path` is set.
    pub forget_fraction: f64,
    /// TSV file listing the triples to forget.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forget_path: Option<PathBuf>,
    pub w_a: f64,
    pub lambda4: f64,
    pub steps: usize,
    pub steps5: usize,
    pub inner_lr: f64,
    pub forget_cap: f64,
    pub forget_negatives: usize,
    pub support_fraction: f64,
}

impl Default for UnlearnSection {
    fn default() -> Self {
        let u = UnlearnConfig::<f64>::default();
        Self {
            forget_fraction: 0.05,
            forget_path: None,
            w_a: u.w_a,
            lambda4: u.lambda4,
            steps: u.steps,
            steps5: u.steps5,
            inner_lr: u.inner_lr,
            forget_cap: u.forget_cap,
            forget_negatives: u.forget_negatives,
            support_fraction: u.support_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub mode: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            mode: "filtered".to_owned(),
        }
    }
}

impl RunConfig {
    /// Reads, resolves relative paths and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).tag("io")?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| anyhow::anyhow!("{}: {}", path.display(), e.message()))
            .tag("config")?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.data.path = absolute(base, &config.data.path);
        if let Some(p) = &config.unlearn.forget_path {
            config.unlearn.forget_path = Some(absolute(base, p));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let check = || -> Result<()> {
            let scorer = self.scorer()?;
            if scorer.kind.is_complex() && self.model.dim % 2 != 0 {
                bail!("{} needs an even model.dim, got {}", scorer.kind, self.model.dim);
            }
            self.train_config().validate()?;
            self.task_params().validate()?;
            self.meta_config(Ablation::none()).validate()?;
            self.unlearn_config().validate()?;
            self.rank_mode()?;
            if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
                bail!("data.test_fraction {} not in (0, 1)", self.data.test_fraction);
            }
            if self.unlearn.forget_path.is_none() && !(self.unlearn.forget_fraction > 0.0 && self.unlearn.forget_fraction < 1.0) {
                bail!("unlearn.forget_fraction {} not in (0, 1)", self.unlearn.forget_fraction);
            }
            if self.meta.learners == 0 || self.tasks.train == 0 {
                bail!("meta.learners and tasks.train must be positive");
            }
            Ok(())
        };
        check().tag("config")
    }

    /// Canonical serialization; its digest identifies the run.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn scorer(&self) -> Result<Scorer> {
        Ok(Scorer::new(self.model.kind.parse()?, self.model.norm.parse()?))
    }

    pub fn rank_mode(&self) -> Result<RankMode> {
        Ok(self.eval.mode.parse()?)
    }

    pub fn train_config(&self) -> TrainConfig<f64> {
        let m = &self.model;
        TrainConfig {
            dim: m.dim,
            learning_rate: m.learning_rate,
            margin: m.margin,
            epochs: m.epochs,
            batch_size: m.batch_size,
            negatives_per_positive: m.negatives,
            seed: self.seed,
            init_bound: m.init_bound,
        }
    }

    pub fn task_params(&self) -> TaskParams {
        TaskParams {
            n_entities: self.tasks.n_entities,
            max_triples: self.tasks.max_triples,
            support_fraction: self.tasks.support_fraction,
        }
    }

    pub fn meta_config(&self, ablation: Ablation) -> MetaTrainConfig<f64> {
        MetaTrainConfig {
            epochs: self.meta.epochs,
            batch_size: self.meta.batch_size,
            learning_rate: self.meta.learning_rate,
            margin: self.model.margin,
            seed: self.seed,
            ablation,
        }
    }

    pub fn unlearn_config(&self) -> UnlearnConfig<f64> {
        let u = &self.unlearn;
        UnlearnConfig {
            w_a: u.w_a,
            w_b: 1.0 - u.w_a,
            lambda4: u.lambda4,
            forget_cap: u.forget_cap,
            forget_negatives: u.forget_negatives,
            steps: u.steps,
            steps5: u.steps5,
            inner_lr: u.inner_lr,
            margin: self.model.margin,
            support_fraction: u.support_fraction,
            seed: self.seed,
        }
    }
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    let joined = if p.is_absolute() { p.to_owned() } else { base.join(p) };
    joined.canonicalize().unwrap_or(joined)
}
