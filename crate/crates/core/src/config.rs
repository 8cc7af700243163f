//! Experiment configuration: a TOML document with one section per stage.
//! Unknown keys are rejected, and `section.key=value` overrides are applied
//! before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::ProxyAggregation;
use crate::attribution::mask::MaskSpec;
use crate::data::{gen_blobs, load_idx, make_schedule, Dataset};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::optim::{AdamWConfig, LrSchedule, OptimizerConfig, OptimizerKind};
use crate::oracle::RemovalMode;
use crate::selection::{Scorer, SelectionConfig};
use crate::trajectory::RunConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Blobs,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DataSource,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Blobs only.
    pub dim: usize,
    pub classes: usize,
    pub spread: f64,
    /// IDX only: image and label files, read as one pool and split in order.
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Fraction of training labels reassigned to another class.
    pub label_noise: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: DataSource::Blobs,
            train: 6000,
            val: 100,
            test: 1000,
            dim: 16,
            classes: 10,
            spread: 1.5,
            images: None,
            labels: None,
            label_noise: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Logistic,
    #[default]
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelChoice,
    pub hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelChoice::Mlp,
            hidden: vec![16],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warmup then linear decay when positive; constant otherwise.
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let a = AdamWConfig::default();
        OptimizerSection {
            kind: OptimizerKind::AdamW,
            lr: 1e-3,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            warmup_steps: 0,
            batch_size: 64,
            epochs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSection {
    pub keep_ratio: f64,
    /// Members of the mask ensemble used by `attribute --estimator ensemble`.
    pub ensemble: usize,
    pub ensemble_ratio: f64,
}

impl Default for MaskSection {
    fn default() -> Self {
        MaskSection {
            keep_ratio: 1.0,
            ensemble: 4,
            ensemble_ratio: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureChoice {
    #[default]
    Ggn,
    Exact,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionSection {
    pub curvature: CurvatureChoice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    /// TSLOO (sample, step) pairs drawn uniformly over the trajectory.
    pub samples: usize,
    /// Validation points scored, taken from the start of the validation split.
    pub val_points: usize,
    pub mode: RemovalMode,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            samples: 100,
            val_points: 100,
            mode: RemovalMode::Subtract,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    /// Learning rates for `sweep-factors`.
    pub sweep_lrs: Vec<f64>,
    pub proxy_aggregation: ProxyAggregation,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            sweep_lrs: vec![1e-3, 1e-4, 1e-5],
            proxy_aggregation: ProxyAggregation::Total,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub candidates: usize,
    pub retained: usize,
    pub horizon: usize,
    pub scorer: Scorer,
    pub probe_size: usize,
    pub epochs: usize,
    /// Offline selection keeps this fraction of the pool.
    pub keep_ratio: f64,
    pub k_values: Vec<usize>,
    pub k_lrs: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SelectionSection {
    fn default() -> Self {
        SelectionSection {
            candidates: 64,
            retained: 32,
            horizon: 10,
            scorer: Scorer::AdamW,
            probe_size: 16,
            epochs: 20,
            keep_ratio: 0.5,
            k_values: vec![2, 5, 10, 25],
            k_lrs: vec![1e-2, 1e-3, 1e-4],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Relative paths resolve against the output root.
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    pub mask: MaskSection,
    pub attribution: AttributionSection,
    pub oracle: OracleSection,
    pub analysis: AnalysisSection,
    pub selection: SelectionSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            optimizer: OptimizerSection::default(),
            mask: MaskSection::default(),
            attribution: AttributionSection::default(),
            oracle: OracleSection::default(),
            analysis: AnalysisSection::default(),
            selection: SelectionSection::default(),
        }
    }
}

/// Parse a `section.key=value` override. The value is read as a TOML value
/// and falls back to a bare string.
fn parse_override(text: &str) -> Result<(Vec<String>, toml::Value)> {
    let (path, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(vec![format!("override `{text}` is not of the form section.key=value")]))?;
    let path: Vec<String> = path.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(vec![format!("override `{text}` has an empty key")]));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    Ok((path, value))
}

fn apply_override(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut table = root;
    for (i, key) in parents.iter().enumerate() {
        let entry = table
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(vec![format!("{} is not a section", path[..=i].join("."))]))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parse `text`, apply overrides in order, then validate.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            apply_override(&mut table, &path, value)?;
        }
        let config: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(vec![format!("{path}: {}", e.into_inner().message())])
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, overrides)
    }

    /// Every constraint violation, each prefixed by its key path.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, path: &str, msg: &str| {
            if !ok {
                errs.push(format!("{path}: {msg}"));
            }
        };
        let d = &self.dataset;
        check(d.train > 0, "dataset.train", "must be positive");
        check(d.val > 0, "dataset.val", "must be positive");
        check(d.test > 0, "dataset.test", "must be positive");
        if d.source == DataSource::Blobs {
            check(d.dim > 0, "dataset.dim", "must be positive");
            check(d.classes >= 2, "dataset.classes", "must be at least 2");
            check(
                d.spread >= 0.0 && d.spread.is_finite(),
                "dataset.spread",
                "must be finite and >= 0",
            );
        } else {
            check(d.images.is_some(), "dataset.images", "required for idx data");
            check(d.labels.is_some(), "dataset.labels", "required for idx data");
        }
        check(
            (0.0..=1.0).contains(&d.label_noise),
            "dataset.label_noise",
            "must lie in [0, 1]",
        );
        let o = &self.optimizer;
        check(o.lr > 0.0 && o.lr.is_finite(), "optimizer.lr", "must be positive");
        check((0.0..1.0).contains(&o.beta1), "optimizer.beta1", "must lie in [0, 1)");
        check((0.0..1.0).contains(&o.beta2), "optimizer.beta2", "must lie in [0, 1)");
        check(o.eps > 0.0, "optimizer.eps", "must be positive");
        check(o.weight_decay >= 0.0, "optimizer.weight_decay", "must be >= 0");
        check(
            o.batch_size > 0 && o.batch_size <= d.train,
            "optimizer.batch_size",
            "must be in [1, dataset.train]",
        );
        check(o.epochs > 0, "optimizer.epochs", "must be positive");
        let m = &self.mask;
        check(
            m.keep_ratio > 0.0 && m.keep_ratio <= 1.0,
            "mask.keep_ratio",
            "must lie in (0, 1]",
        );
        check(m.ensemble > 0, "mask.ensemble", "must be positive");
        check(
            m.ensemble_ratio > 0.0 && m.ensemble_ratio <= 1.0,
            "mask.ensemble_ratio",
            "must lie in (0, 1]",
        );
        check(self.oracle.samples > 0, "oracle.samples", "must be positive");
        check(
            self.oracle.val_points > 0 && self.oracle.val_points <= d.val,
            "oracle.val_points",
            "must be in [1, dataset.val]",
        );
        check(
            self.analysis.sweep_lrs.len() >= 2 && self.analysis.sweep_lrs.iter().all(|&x| x > 0.0),
            "analysis.sweep_lrs",
            "needs at least two positive learning rates",
        );
        let s = &self.selection;
        check(
            s.retained > 0 && s.retained <= s.candidates,
            "selection.retained",
            "must be in [1, selection.candidates]",
        );
        check(s.probe_size > 0, "selection.probe_size", "must be positive");
        check(s.epochs > 0, "selection.epochs", "must be positive");
        check(
            s.keep_ratio > 0.0 && s.keep_ratio <= 1.0,
            "selection.keep_ratio",
            "must lie in (0, 1]",
        );
        check(!s.k_values.is_empty(), "selection.k_values", "must not be empty");
        check(
            !s.k_lrs.is_empty() && s.k_lrs.iter().all(|&x| x > 0.0),
            "selection.k_lrs",
            "needs positive learning rates",
        );
        check(!s.seeds.is_empty(), "selection.seeds", "must not be empty");
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// The resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(e.to_string()))
    }

    /// First 16 hex digits of the SHA-256 of the resolved TOML.
    pub fn digest(&self) -> Result<String> {
        let text = self.to_toml()?;
        Ok(hex::encode(&Sha256::digest(text.as_bytes())[..8]))
    }

    pub fn model_spec(&self) -> ModelSpec {
        let d = self.dataset.dim;
        let c = self.dataset.classes;
        match self.model.kind {
            ModelChoice::Logistic => ModelSpec::logistic(d, c, self.seed),
            ModelChoice::Mlp => ModelSpec::mlp(d, &self.model.hidden, c, self.seed),
        }
    }

    pub fn optimizer_config(&self, lr: f64) -> OptimizerConfig {
        let o = &self.optimizer;
        let schedule = if o.warmup_steps > 0 {
            LrSchedule::WarmupLinear {
                base_lr: lr,
                warmup_steps: o.warmup_steps,
                total_steps: (self.dataset.train / o.batch_size) * o.epochs,
            }
        } else {
            LrSchedule::Constant { lr }
        };
        OptimizerConfig {
            kind: o.kind,
            adamw: AdamWConfig {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                plain_sgd: false,
            },
            schedule,
        }
    }

    pub fn mask_spec(&self) -> MaskSpec {
        MaskSpec {
            keep_ratio: self.mask.keep_ratio,
            seed: self.seed,
            stream: 0,
        }
    }

    /// Training run at learning rate `lr` with the configured mask.
    pub fn run_config(&self, lr: f64) -> Result<RunConfig> {
        Ok(RunConfig {
            model: self.model_spec(),
            optimizer: self.optimizer_config(lr),
            schedule: make_schedule(
                self.dataset.train,
                self.optimizer.batch_size,
                self.optimizer.epochs,
                self.seed,
            )?,
            mask: self.mask_spec(),
        })
    }

    pub fn selection_config(&self) -> SelectionConfig {
        let s = &self.selection;
        SelectionConfig {
            candidates: s.candidates,
            retained: s.retained,
            horizon: s.horizon,
            scorer: s.scorer,
            probe_size: s.probe_size,
            epochs: s.epochs,
            seed: self.seed,
        }
    }

    /// Build the train, validation and test splits. Label noise, if any, is
    /// applied to the training split only. Returns the flipped ids as well.
    pub fn build_splits(&self) -> Result<(Dataset, Dataset, Dataset, Vec<usize>)> {
        let d = &self.dataset;
        let total = d.train + d.val + d.test;
        let pool = match d.source {
            DataSource::Blobs => gen_blobs(total, d.dim, d.classes, d.spread, self.seed)?,
            DataSource::Idx => {
                let images = d.images.as_ref().expect("validated");
                let labels = d.labels.as_ref().expect("validated");
                let pool = load_idx(images, labels)?;
                if pool.len() < total {
                    return Err(Error::Config(vec![format!(
                        "dataset: idx files hold {} samples, {total} requested",
                        pool.len()
                    )]));
                }
                if pool.dim() != d.dim || pool.num_classes() > d.classes {
                    return Err(Error::Config(vec![format!(
                        "dataset.dim/classes: idx data has {} features and {} classes",
                        pool.dim(),
                        pool.num_classes()
                    )]));
                }
                pool
            }
        };
        let split = |a: usize, b: usize| pool.subset(&(a..b).collect::<Vec<_>>());
        let train = split(0, d.train)?;
        let val = split(d.train, d.train + d.val)?;
        let test = split(d.train + d.val, total)?;
        let (train, flipped) = if d.label_noise > 0.0 {
            train.with_label_noise(d.label_noise, self.seed)?
        } else {
            (train, Vec::new())
        };
        Ok((train, val, test, flipped))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(
            ExperimentConfig::from_toml("", &[]).unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("[optimizer]\nlearning_rate = 0.1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = ExperimentConfig::from_toml("[nonsense]\n", &[]).unwrap_err();
        assert!(err.to_string().contains("nonsense"), "{err}");
    }

    #[test]
    fn overrides_apply_in_order() {
        let text = "[optimizer]\nlr = 0.1\n";
        let sets = vec![
            "optimizer.lr=0.5".to_string(),
            "model.hidden=[3, 4]".to_string(),
            "selection.scorer=sgd".to_string(),
            "optimizer.lr = 0.25".to_string(),
        ];
        let c = ExperimentConfig::from_toml(text, &sets).unwrap();
        assert_eq!(c.optimizer.lr, 0.25);
        assert_eq!(c.model.hidden, vec![3, 4]);
        assert_eq!(c.selection.scorer, Scorer::Sgd);
        assert!(ExperimentConfig::from_toml("", &["nokey".into()]).is_err());
        assert!(ExperimentConfig::from_toml("", &["seed.x=1".into()]).is_err());
    }

    #[test]
    fn validation_lists_every_path() {
        let sets = vec!["optimizer.lr=0".to_string(), "mask.keep_ratio=2.0".to_string()];
        match ExperimentConfig::from_toml("", &sets).unwrap_err() {
            Error::Config(list) => {
                assert!(list.iter().any(|e| e.starts_with("optimizer.lr")));
                assert!(list.iter().any(|e| e.starts_with("mask.keep_ratio")));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn digest_tracks_resolved_values() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::from_toml("seed = 0\n", &[]).unwrap();
        let c = ExperimentConfig::from_toml("seed = 1\n", &[]).unwrap();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
        let round = ExperimentConfig::from_toml(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(round, c);
    }

    #[test]
    fn splits_are_disjoint_and_noise_hits_train_only() {
        let c = ExperimentConfig::from_toml(
            "[dataset]\ntrain = 50\nval = 10\ntest = 10\ndim = 3\nclasses = 3\nlabel_noise = 0.2\n\
             [optimizer]\nbatch_size = 10\n[oracle]\nval_points = 10\n",
            &[],
        )
        .unwrap();
        let (train, val, test, flipped) = c.build_splits().unwrap();
        assert_eq!((train.len(), val.len(), test.len(), flipped.len()), (50, 10, 10, 10));
        let clean = gen_blobs(70, 3, 3, 1.5, 0).unwrap();
        assert_eq!(val.labels(), &clean.labels()[50..60]);
        assert_eq!(test.features(), &clean.features()[60 * 3..]);
    }
}
