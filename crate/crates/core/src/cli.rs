//! Subcommands behind the `trajattr` binary.
//!
//! Every command reads the resolved [`ExperimentConfig`], checks that its
//! upstream artifacts exist, writes its outputs under the run directory and
//! records a manifest with the SHA-256 of every input and output file. CSV
//! outputs start with a `# config_digest=<digest>` line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{self, SweepInput};
use crate::attribution::score::mean_gradient;
use crate::attribution::{
    backward_adamw, backward_sgd, ensemble_attribute, validation_gradients, AdamWDynamics, AttributionSet, Curvature,
    Estimator, ExactHessian, Ggn, Mask, ScoreTable, Targets,
};
use crate::config::{CurvatureChoice, ExperimentConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::{Matrix, RngStream};
use crate::model::Model;
use crate::oracle::{tsloo_retrain, RetrainContext, TslooRecord};
use crate::selection::{
    k_sweep, offline_removed, offline_scores, select_offline, select_online, SelectionData, SelectionTrace,
};
use crate::trajectory::{
    dataset_digest, record_in_memory, record_training, Precision, RecordedRun, RunConfig, StepSource, TrajectoryReader,
};

/// Environment variable naming the directory that relative output
/// directories resolve against.
pub const OUTPUT_ROOT_ENV: &str = "TRAJATTR_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttributeEstimator {
    Sgd,
    AdamW,
    Ensemble,
}

impl AttributeEstimator {
    pub fn name(self) -> &'static str {
        match self {
            AttributeEstimator::Sgd => "sgd",
            AttributeEstimator::AdamW => "adamw",
            AttributeEstimator::Ensemble => "ensemble",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMode {
    Online,
    Offline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Attribute(AttributeEstimator),
    Tsloo,
    Fidelity,
    Decompose,
    SweepFactors,
    Proxy,
    Select(SelectMode),
    KSweep,
    Report,
}

impl Command {
    /// The command line that produces this command's outputs.
    pub fn invocation(self) -> String {
        match self {
            Command::GenData => "gen-data".into(),
            Command::Train => "train".into(),
            Command::Attribute(e) => format!("attribute --estimator {}", e.name()),
            Command::Tsloo => "tsloo".into(),
            Command::Fidelity => "fidelity".into(),
            Command::Decompose => "decompose".into(),
            Command::SweepFactors => "sweep-factors".into(),
            Command::Proxy => "proxy".into(),
            Command::Select(SelectMode::Online) => "select --mode online".into(),
            Command::Select(SelectMode::Offline) => "select --mode offline".into(),
            Command::KSweep => "k-sweep".into(),
            Command::Report => "report".into(),
        }
    }

    fn manifest_name(self) -> String {
        self.invocation().replace(" --estimator ", "-").replace(" --mode ", "-")
    }
}

/// Per-command record of what was read and written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

const DATA_FILES: [&str; 3] = ["data/train.csv", "data/val.csv", "data/test.csv"];
const TRAJECTORY: &str = "trajectory";
const TSLOO_JSON: &str = "oracle/tsloo.json";

/// A resolved config bound to its run directory.
pub struct Workspace {
    pub config: ExperimentConfig,
    pub digest: String,
    pub dir: PathBuf,
}

struct Io<'a> {
    ws: &'a Workspace,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl<'a> Io<'a> {
    fn path(&self, rel: &str) -> PathBuf {
        self.ws.dir.join(rel)
    }

    /// Check that `rel` exists and record its digest (every file, for a
    /// directory).
    fn input(&mut self, rel: &str, producer: Command) -> Result<PathBuf> {
        let path = self.path(rel);
        if !path.exists() {
            return Err(Error::dependency(rel, producer.invocation()));
        }
        if path.is_dir() {
            let mut names: Vec<_> = fs::read_dir(&path)?
                .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
                .collect::<std::io::Result<_>>()?;
            names.sort();
            for name in names {
                let child = format!("{rel}/{name}");
                self.inputs.insert(child.clone(), sha256_file(&self.path(&child))?);
            }
        } else {
            self.inputs.insert(rel.to_string(), sha256_file(&path)?);
        }
        Ok(path)
    }

    fn create(&mut self, rel: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.outputs.push(rel.to_string());
        Ok(path)
    }

    fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.create(rel)?;
        fs::write(path, bytes)?;
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
        text.push('\n');
        self.write_bytes(rel, text.as_bytes())
    }

    fn write_csv(&mut self, rel: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut buf = format!("# config_digest={}\n", self.ws.digest).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            let csv_err = |e: csv::Error| Error::invalid(e.to_string());
            w.write_record(header).map_err(csv_err)?;
            for row in rows {
                w.write_record(row).map_err(csv_err)?;
            }
            w.flush()?;
        }
        self.write_bytes(rel, &buf)
    }

    fn finish(self, command: Command) -> Result<Vec<PathBuf>> {
        let mut outputs = BTreeMap::new();
        for rel in &self.outputs {
            outputs.insert(rel.clone(), sha256_file(&self.path(rel))?);
        }
        let manifest = RunManifest {
            command: command.invocation(),
            config_digest: self.ws.digest.clone(),
            inputs: self.inputs,
            outputs,
        };
        let rel = format!("manifests/{}.json", command.manifest_name());
        let path = self.ws.dir.join(&rel);
        fs::create_dir_all(path.parent().expect("manifest dir"))?;
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text)?;
        let mut written: Vec<PathBuf> = self.outputs.iter().map(|r| self.ws.dir.join(r)).collect();
        written.push(path);
        Ok(written)
    }
}

fn read_csv(path: &Path) -> Result<(String, Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)?;
    let name = path.display().to_string();
    let digest = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# config_digest="))
        .ok_or_else(|| Error::format(&name, "missing config digest header"))?
        .to_string();
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = r
        .headers()
        .map_err(|e| Error::format(&name, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(&name, e.to_string()))?;
    Ok((digest, header, rows))
}

fn parse_f64(field: &str, s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::format(field, format!("not a number: {s:?}")))
}

fn parse_usize(field: &str, s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::format(field, format!("not an index: {s:?}")))
}

fn dataset_rows(data: &Dataset) -> Vec<Vec<String>> {
    (0..data.len())
        .map(|i| {
            let s = data.sample(i);
            std::iter::once(s.y.to_string())
                .chain(s.x.iter().map(|x| x.to_string()))
                .collect()
        })
        .collect()
}

impl Workspace {
    /// Resolve the run directory: absolute `output_dir` as is, relative
    /// against `output_root` (or the working directory).
    pub fn new(config: ExperimentConfig, output_root: Option<&Path>) -> Result<Self> {
        let digest = config.digest()?;
        let dir = match output_root {
            Some(root) if config.output_dir.is_relative() => root.join(&config.output_dir),
            _ => config.output_dir.clone(),
        };
        Ok(Workspace { config, digest, dir })
    }

    pub fn run(&self, command: Command) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(&self.dir)?;
        fs::write(self.dir.join("config.resolved.toml"), self.config.to_toml()?)?;
        let mut io = Io {
            ws: self,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        };
        match command {
            Command::GenData => self.gen_data(&mut io)?,
            Command::Train => self.train(&mut io)?,
            Command::Attribute(e) => self.attribute(&mut io, e)?,
            Command::Tsloo => self.tsloo(&mut io)?,
            Command::Fidelity => self.fidelity(&mut io)?,
            Command::Decompose => self.decompose(&mut io)?,
            Command::SweepFactors => self.sweep_factors(&mut io)?,
            Command::Proxy => self.proxy(&mut io)?,
            Command::Select(mode) => self.select(&mut io, mode)?,
            Command::KSweep => self.k_sweep(&mut io)?,
            Command::Report => self.report(&mut io)?,
        }
        io.finish(command)
    }

    fn load_split(&self, io: &mut Io<'_>, rel: &str) -> Result<Dataset> {
        let path = io.input(rel, Command::GenData)?;
        let (_, header, rows) = read_csv(&path)?;
        let d = header.len().saturating_sub(1);
        let mut features = Vec::with_capacity(rows.len() * d);
        let mut labels = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let field = format!("{rel} row {i}");
            if row.len() != d + 1 {
                return Err(Error::format(field, "wrong number of columns"));
            }
            labels.push(parse_usize(&field, &row[0])?);
            for x in &row[1..] {
                features.push(parse_f64(&field, x)?);
            }
        }
        Dataset::new(features, labels, d, self.config.dataset.classes)
    }

    fn load_data(&self, io: &mut Io<'_>) -> Result<(Dataset, Dataset, Dataset)> {
        Ok((
            self.load_split(io, DATA_FILES[0])?,
            self.load_split(io, DATA_FILES[1])?,
            self.load_split(io, DATA_FILES[2])?,
        ))
    }

    fn val_ids(&self) -> Vec<usize> {
        (0..self.config.oracle.val_points).collect()
    }

    fn gen_data(&self, io: &mut Io<'_>) -> Result<()> {
        let (train, val, test, flipped) = self.config.build_splits()?;
        let d = train.dim();
        let header: Vec<String> = std::iter::once("label".to_string())
            .chain((0..d).map(|j| format!("x{j}")))
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        for (rel, data) in DATA_FILES.iter().zip([&train, &val, &test]) {
            io.write_csv(rel, &header, &dataset_rows(data))?;
        }
        let rows: Vec<Vec<String>> = flipped.iter().map(|i| vec![i.to_string()]).collect();
        io.write_csv("data/flipped.csv", &["sample"], &rows)
    }

    /// Open the recorded trajectory and check it belongs to `train`.
    fn open_trajectory(&self, io: &mut Io<'_>, train: Option<&Dataset>) -> Result<TrajectoryReader> {
        let dir = io.input(TRAJECTORY, Command::Train)?;
        let reader = TrajectoryReader::open(&dir)?;
        if let Some(train) = train {
            if reader.manifest().dataset_digest != dataset_digest(train) {
                return Err(Error::dependency(
                    "a trajectory recorded on the current training split",
                    Command::Train.invocation(),
                ));
            }
        }
        Ok(reader)
    }

    /// Retrain in memory with checkpoints; the result must match the cache.
    fn rerun(&self, reader: &TrajectoryReader, train: &Dataset) -> Result<(RunConfig, RecordedRun)> {
        let config = reader.manifest().run_config();
        let run = record_in_memory(train, &config, true)?;
        if run.theta_final != reader.theta_final()? {
            return Err(Error::Determinism(
                "retraining from the manifest does not reproduce the cached final parameters".into(),
            ));
        }
        Ok((config, run))
    }

    fn train(&self, io: &mut Io<'_>) -> Result<()> {
        let (train, val, test) = self.load_data(io)?;
        let config = self.config.run_config(self.config.optimizer.lr)?;
        let dir = self.io_dir(io, TRAJECTORY)?;
        let theta = record_training(&train, &config, Precision::F64, &dir)?;
        for name in ["manifest.json", "steps.bin", "theta0.bin", "theta_final.bin"] {
            io.outputs.push(format!("{TRAJECTORY}/{name}"));
        }
        let model = Model::new(config.model.clone())?;
        let all: Vec<usize> = (0..val.len()).collect();
        let rows = vec![vec![
            config.num_steps().to_string(),
            model.error_rate(&theta, &train).to_string(),
            model.error_rate(&theta, &val).to_string(),
            model.mean_loss(&theta, &val, &all)?.to_string(),
            model.error_rate(&theta, &test).to_string(),
        ]];
        io.write_csv(
            "train/metrics.csv",
            &["num_steps", "train_error", "val_error", "val_loss", "test_error"],
            &rows,
        )
    }

    fn io_dir(&self, io: &Io<'_>, rel: &str) -> Result<PathBuf> {
        let dir = io.path(rel);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn curvature<'m>(
        &self,
        model: &'m Model,
        train: &'m Dataset,
        thetas: Option<&'m [Vec<f64>]>,
        mask: &Mask,
    ) -> Result<Box<dyn Curvature + 'm>> {
        Ok(match (self.config.attribution.curvature, thetas) {
            (CurvatureChoice::Ggn, _) => Box::new(Ggn),
            (CurvatureChoice::Exact, Some(thetas)) => Box::new(ExactHessian::new(model, train, thetas, mask.clone())?),
            (CurvatureChoice::Exact, None) => return Err(Error::invalid("exact curvature needs checkpoints")),
        })
    }

    /// Attribution sets restricted to `targets`, with the configured curvature.
    fn attribution_sets(
        &self,
        reader: &TrajectoryReader,
        train: &Dataset,
        targets: Option<&Targets>,
        which: &[Estimator],
    ) -> Result<Vec<AttributionSet>> {
        let manifest = reader.manifest();
        let model = Model::new(manifest.model.clone())?;
        let mask = manifest.build_mask()?;
        let run = match self.config.attribution.curvature {
            CurvatureChoice::Exact => Some(self.rerun(reader, train)?.1),
            CurvatureChoice::Ggn => None,
        };
        let thetas = run
            .as_ref()
            .and_then(|r| r.checkpoints.as_ref())
            .map(|c| c.thetas.as_slice());
        let curvature = self.curvature(&model, train, thetas, &mask)?;
        let dynamics = AdamWDynamics::from_config(&manifest.optimizer.adamw);
        which
            .iter()
            .map(|e| {
                Ok(match e {
                    Estimator::Sgd => backward_sgd(reader, curvature.as_ref(), targets)?.0,
                    Estimator::AdamW => backward_adamw(reader, &dynamics, curvature.as_ref(), targets)?.0,
                })
            })
            .collect()
    }

    fn val_gradients(&self, reader: &TrajectoryReader, val: &Dataset, mask: &Mask) -> Result<Matrix> {
        let model = Model::new(reader.manifest().model.clone())?;
        validation_gradients(&model, &reader.theta_final()?, val, &self.val_ids(), mask)
    }

    fn attribute(&self, io: &mut Io<'_>, estimator: AttributeEstimator) -> Result<()> {
        let reader = self.open_trajectory(io, None)?;
        let (train, val, _) = self.load_data(io)?;
        if reader.manifest().dataset_digest != dataset_digest(&train) {
            return Err(Error::dependency(
                "a trajectory recorded on the current training split",
                Command::Train.invocation(),
            ));
        }
        let mask = reader.manifest().build_mask()?;
        let table = match estimator {
            AttributeEstimator::Sgd | AttributeEstimator::AdamW => {
                let e = if estimator == AttributeEstimator::Sgd {
                    Estimator::Sgd
                } else {
                    Estimator::AdamW
                };
                let set = self.attribution_sets(&reader, &train, None, &[e])?.remove(0);
                ScoreTable::from_set(&set, &self.val_gradients(&reader, &val, &mask)?)?
            }
            AttributeEstimator::Ensemble => {
                let m = &self.config.mask;
                let masks = Mask::ensemble(mask.p(), m.ensemble_ratio, self.config.seed, m.ensemble)?;
                let vg = self.val_gradients(&reader, &val, &Mask::full(mask.p()))?;
                let dynamics = AdamWDynamics::from_config(&reader.manifest().optimizer.adamw);
                ensemble_attribute(&reader, &masks, &vg, &dynamics, None)?
            }
        };
        write_scores(io, &format!("attribution/scores_{}.csv", estimator.name()), &table)
    }

    /// `(sample, step)` pairs drawn uniformly without replacement over every
    /// batch slot, sorted by step then sample.
    fn tsloo_pairs(&self, run: &RunConfig) -> Vec<(usize, usize)> {
        let mut all: Vec<(usize, usize)> = (0..run.num_steps())
            .flat_map(|t| run.schedule.batch(t).iter().map(move |&z| (z, t)))
            .collect();
        all.shuffle(&mut RngStream::named(self.config.seed, "tsloo-pairs").rng());
        all.truncate(self.config.oracle.samples);
        all.sort_by_key(|&(z, t)| (t, z));
        all
    }

    fn tsloo(&self, io: &mut Io<'_>) -> Result<()> {
        let reader = self.open_trajectory(io, None)?;
        let (train, val, _) = self.load_data(io)?;
        let (config, run) = self.rerun(&reader, &train)?;
        let ctx = RetrainContext::new(&train, &config, &run)?;
        let pairs = self.tsloo_pairs(&config);
        let val_ids = self.val_ids();
        let mode = self.config.oracle.mode;
        let task_dir = io.path("oracle/tasks");
        fs::create_dir_all(&task_dir)?;
        #[derive(Serialize, Deserialize)]
        struct Task {
            config_digest: String,
            record: TslooRecord,
        }
        // One file per retraining job; finished jobs from an earlier,
        // interrupted run with the same config are reused.
        let records: Vec<TslooRecord> = pairs
            .par_iter()
            .map(|&(z, t)| {
                let path = task_dir.join(format!("step{t:06}_sample{z:06}.json"));
                if let Ok(text) = fs::read_to_string(&path) {
                    if let Ok(task) = serde_json::from_str::<Task>(&text) {
                        if task.config_digest == self.digest && task.record.mode == mode {
                            return Ok(task.record);
                        }
                    }
                }
                let record = tsloo_retrain(&ctx, z, t, mode, &val, &val_ids)?;
                let task = Task {
                    config_digest: self.digest.clone(),
                    record,
                };
                fs::write(
                    &path,
                    serde_json::to_string(&task).map_err(|e| Error::invalid(e.to_string()))?,
                )?;
                Ok(task.record)
            })
            .collect::<Result<_>>()?;
        io.write_json(TSLOO_JSON, &records)?;
        let header: Vec<String> = ["sample", "t_star", "mean_loss_delta", "delta_theta_norm"]
            .iter()
            .map(|s| s.to_string())
            .chain(val_ids.iter().map(|v| format!("val{v}")))
            .collect();
        let rows: Vec<Vec<String>> = records
            .iter()
            .map(|r| {
                let mean = r.loss_deltas.iter().sum::<f64>() / r.loss_deltas.len() as f64;
                let norm = crate::math::norm2(&r.delta_theta(&run.theta_final));
                [
                    r.sample.to_string(),
                    r.t_star.to_string(),
                    mean.to_string(),
                    norm.to_string(),
                ]
                .into_iter()
                .chain(r.loss_deltas.iter().map(|x| x.to_string()))
                .collect()
            })
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        io.write_csv("oracle/tsloo.csv", &header, &rows)
    }

    fn load_tsloo(&self, io: &mut Io<'_>) -> Result<Vec<TslooRecord>> {
        let path = io.input(TSLOO_JSON, Command::Tsloo)?;
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(TSLOO_JSON, e.to_string()))
    }

    fn fidelity(&self, io: &mut Io<'_>) -> Result<()> {
        let reader = self.open_trajectory(io, None)?;
        let tsloo = self.load_tsloo(io)?;
        let (train, val, _) = self.load_data(io)?;
        let targets: Targets = tsloo.iter().map(|r| (r.t_star, r.sample)).collect();
        let mut tables: Vec<(&str, ScoreTable)> = Vec::new();
        let mut missing = Vec::new();
        for e in [
            AttributeEstimator::Sgd,
            AttributeEstimator::AdamW,
            AttributeEstimator::Ensemble,
        ] {
            let rel = format!("attribution/scores_{}.csv", e.name());
            if io.path(&rel).exists() {
                let path = io.input(&rel, Command::Attribute(e))?;
                tables.push((e.name(), read_scores(&path)?));
            } else if e != AttributeEstimator::Ensemble {
                missing.push(e);
            }
        }
        // SGD and AdamW are always reported; any not yet attributed are
        // computed here for the TSLOO pairs only.
        if !missing.is_empty() {
            let which: Vec<Estimator> = missing
                .iter()
                .map(|e| {
                    if *e == AttributeEstimator::Sgd {
                        Estimator::Sgd
                    } else {
                        Estimator::AdamW
                    }
                })
                .collect();
            let sets = self.attribution_sets(&reader, &train, Some(&targets), &which)?;
            let vg = self.val_gradients(&reader, &val, &reader.manifest().build_mask()?)?;
            for (e, set) in missing.iter().zip(sets) {
                tables.push((e.name(), ScoreTable::from_set(&set, &vg)?));
            }
        }
        let order = |n: &str| ["sgd", "adamw", "ensemble"].iter().position(|&x| x == n);
        tables.sort_by_key(|(n, _)| order(n));
        let reports: Vec<_> = tables
            .iter()
            .map(|(name, t)| analysis::fidelity(name, t, &tsloo))
            .collect::<Result<_>>()?;
        let mut header = vec!["statistic"];
        header.extend(reports.iter().map(|r| r.estimator.as_str()));
        let stat = |label: &str, f: &dyn Fn(&analysis::FidelityReport) -> String| {
            std::iter::once(label.to_string())
                .chain(reports.iter().map(f))
                .collect::<Vec<_>>()
        };
        let rows = vec![
            stat("mean_rho", &|r| r.mean.to_string()),
            stat("std_rho", &|r| r.std.to_string()),
            stat("num_samples", &|r| r.num_samples.to_string()),
            stat("scored_val", &|r| r.per_val.len().to_string()),
            stat("skipped_val", &|r| r.skipped_val.to_string()),
        ];
        io.write_csv("analysis/fidelity.csv", &header, &rows)?;
        let rows: Vec<Vec<String>> = reports
            .iter()
            .flat_map(|r| {
                r.per_val
                    .iter()
                    .enumerate()
                    .map(move |(i, rho)| vec![r.estimator.clone(), i.to_string(), rho.to_string()])
            })
            .collect();
        io.write_csv("analysis/fidelity_per_val.csv", &["estimator", "index", "rho"], &rows)
    }

    fn decompose(&self, io: &mut Io<'_>) -> Result<()> {
        let reader = self.open_trajectory(io, None)?;
        let tsloo = self.load_tsloo(io)?;
        let (train, val, _) = self.load_data(io)?;
        let mask = reader.manifest().build_mask()?;
        if !mask.is_full() {
            return Err(Error::invalid(
                "decomposition needs a trajectory recorded with mask.keep_ratio = 1",
            ));
        }
        let targets: Targets = tsloo.iter().map(|r| (r.t_star, r.sample)).collect();
        let mut sets = self.attribution_sets(&reader, &train, Some(&targets), &[Estimator::Sgd, Estimator::AdamW])?;
        let adamw = sets.pop().expect("two sets");
        let sgd = sets.pop().expect("two sets");
        let val_grad = mean_gradient(&self.val_gradients(&reader, &val, &mask)?);
        let theta_final = reader.theta_final()?;
        let samples = analysis::decompose_samples(&tsloo, &theta_final, &sgd, &adamw, &val_grad)?;
        let rows: Vec<Vec<String>> = analysis::bin_decomposition(&samples)
            .iter()
            .map(|b| {
                vec![
                    b.start.to_string(),
                    b.end.to_string(),
                    b.count.to_string(),
                    b.abs_err_sgd.to_string(),
                    b.green.to_string(),
                    b.blue.to_string(),
                    b.grey.to_string(),
                    b.largest().to_string(),
                ]
            })
            .collect();
        io.write_csv(
            "analysis/decomposition.csv",
            &[
                "bin_start",
                "bin_end",
                "count",
                "abs_err_sgd",
                "green",
                "blue",
                "grey",
                "largest",
            ],
            &rows,
        )?;
        let rows: Vec<Vec<String>> = samples
            .iter()
            .map(|s| {
                vec![
                    s.sample.to_string(),
                    s.t_star.to_string(),
                    s.abs_err_sgd.to_string(),
                    s.green.to_string(),
                    s.blue.to_string(),
                    s.grey.to_string(),
                ]
            })
            .collect();
        io.write_csv(
            "analysis/decomposition_samples.csv",
            &["sample", "t_star", "abs_err_sgd", "green", "blue", "grey"],
            &rows,
        )
    }

    fn sweep_factors(&self, io: &mut Io<'_>) -> Result<()> {
        let (train, val, _) = self.load_data(io)?;
        let val_ids = self.val_ids();
        let mode = self.config.oracle.mode;
        struct LrRun {
            lr: f64,
            tsloo: Vec<TslooRecord>,
            theta_final: Vec<f64>,
            adamw: AttributionSet,
            val_grad: Vec<f64>,
        }
        let runs: Vec<LrRun> = self
            .config
            .analysis
            .sweep_lrs
            .iter()
            .map(|&lr| {
                let mut config = self.config.run_config(lr)?;
                config.mask = crate::attribution::MaskSpec::full();
                let run = record_in_memory(&train, &config, true)?;
                let ctx = RetrainContext::new(&train, &config, &run)?;
                let pairs = self.tsloo_pairs(&config);
                let tsloo: Vec<TslooRecord> = pairs
                    .par_iter()
                    .map(|&(z, t)| tsloo_retrain(&ctx, z, t, mode, &val, &val_ids))
                    .collect::<Result<_>>()?;
                let targets: Targets = pairs.iter().map(|&(z, t)| (t, z)).collect();
                let dynamics = AdamWDynamics::from_config(&config.optimizer.adamw);
                let (adamw, _) = backward_adamw(&run.trajectory, &dynamics, &Ggn, Some(&targets))?;
                let model = Model::new(config.model.clone())?;
                let vg = validation_gradients(
                    &model,
                    &run.theta_final,
                    &val,
                    &val_ids,
                    &Mask::full(model.param_count()),
                )?;
                Ok(LrRun {
                    lr,
                    tsloo,
                    theta_final: run.theta_final,
                    adamw,
                    val_grad: mean_gradient(&vg),
                })
            })
            .collect::<Result<_>>()?;
        let inputs: Vec<SweepInput<'_>> = runs
            .iter()
            .map(|r| SweepInput {
                lr: r.lr,
                tsloo: &r.tsloo,
                theta_final: &r.theta_final,
                adamw: &r.adamw,
                val_grad: &r.val_grad,
            })
            .collect();
        let curves = analysis::factor_sweep(&inputs)?;
        let rows: Vec<Vec<String>> = curves
            .iter()
            .flat_map(|c| {
                c.points.iter().map(move |p| {
                    vec![
                        c.lr.to_string(),
                        p.t.to_string(),
                        p.count.to_string(),
                        p.error_norm.to_string(),
                        fmt_opt(p.intra_rho),
                        fmt_opt(p.intra_rho_smoothed),
                    ]
                })
            })
            .collect();
        io.write_csv(
            "analysis/sweep.csv",
            &["lr", "t", "count", "error_norm", "intra_rho", "intra_rho_smoothed"],
            &rows,
        )?;
        let rows: Vec<Vec<String>> = curves
            .iter()
            .flat_map(|c| c.notices.iter().map(move |n| vec![c.lr.to_string(), n.clone()]))
            .collect();
        io.write_csv("analysis/sweep_notices.csv", &["lr", "notice"], &rows)
    }

    fn proxy(&self, io: &mut Io<'_>) -> Result<()> {
        let reader = self.open_trajectory(io, None)?;
        let tsloo = self.load_tsloo(io)?;
        let (train, _, _) = self.load_data(io)?;
        let manifest = reader.manifest();
        if !manifest.build_mask()?.is_full() {
            return Err(Error::invalid(
                "the error proxy needs a trajectory recorded with mask.keep_ratio = 1",
            ));
        }
        let targets: Targets = tsloo.iter().map(|r| (r.t_star, r.sample)).collect();
        let adamw = self
            .attribution_sets(&reader, &train, Some(&targets), &[Estimator::AdamW])?
            .remove(0);
        let model = Model::new(manifest.model.clone())?;
        let run = match self.config.attribution.curvature {
            CurvatureChoice::Exact => Some(self.rerun(&reader, &train)?.1),
            CurvatureChoice::Ggn => None,
        };
        let thetas = run
            .as_ref()
            .and_then(|r| r.checkpoints.as_ref())
            .map(|c| c.thetas.as_slice());
        let curvature = self.curvature(&model, &train, thetas, &manifest.build_mask()?)?;
        let dynamics = AdamWDynamics::from_config(&manifest.optimizer.adamw);
        let records = analysis::proxy_records(
            &reader,
            &tsloo,
            &reader.theta_final()?,
            &adamw,
            &dynamics,
            curvature.as_ref(),
            self.config.analysis.proxy_aggregation,
        )?;
        let rows: Vec<Vec<String>> = records
            .iter()
            .map(|r| {
                vec![
                    r.sample.to_string(),
                    r.t_star.to_string(),
                    r.proxy.to_string(),
                    r.error_norm.to_string(),
                ]
            })
            .collect();
        io.write_csv(
            "analysis/proxy.csv",
            &["sample", "t_star", "proxy", "error_norm"],
            &rows,
        )?;
        let fit = analysis::proxy_fit(&records)?;
        let rows = vec![vec![
            fit.slope.to_string(),
            fit.intercept.to_string(),
            fit.r2.to_string(),
            fit.rho.to_string(),
            fit.used.to_string(),
            fit.dropped.to_string(),
        ]];
        io.write_csv(
            "analysis/proxy_fit.csv",
            &["slope", "intercept", "r2", "rho", "used", "dropped"],
            &rows,
        )
    }

    fn write_trace(&self, io: &mut Io<'_>, tag: &str, trace: &SelectionTrace) -> Result<()> {
        let rows: Vec<Vec<String>> = trace
            .epochs
            .iter()
            .map(|e| {
                vec![
                    e.epoch.to_string(),
                    e.val_error.to_string(),
                    e.val_loss.to_string(),
                    e.test_error.to_string(),
                ]
            })
            .collect();
        io.write_csv(
            &format!("selection/{tag}_epochs.csv"),
            &["epoch", "val_error", "val_loss", "test_error"],
            &rows,
        )?;
        let join = |xs: Vec<String>| xs.join(" ");
        let rows: Vec<Vec<String>> = trace
            .steps
            .iter()
            .map(|s| {
                vec![
                    s.t.to_string(),
                    join(s.ids.iter().map(|i| i.to_string()).collect()),
                    join(s.scores.iter().map(|x| x.to_string()).collect()),
                ]
            })
            .collect();
        io.write_csv(&format!("selection/{tag}_steps.csv"), &["t", "ids", "scores"], &rows)?;
        let rows = vec![vec![
            trace.best_epoch.to_string(),
            trace.test_error.to_string(),
            trace.simulated_steps.to_string(),
            trace.curvature_products.to_string(),
            trace.notices.join("; "),
        ]];
        io.write_csv(
            &format!("selection/{tag}_summary.csv"),
            &[
                "best_epoch",
                "test_error",
                "simulated_steps",
                "curvature_products",
                "notices",
            ],
            &rows,
        )
    }

    fn select(&self, io: &mut Io<'_>, mode: SelectMode) -> Result<()> {
        let (train, val, test) = self.load_data(io)?;
        let data = SelectionData {
            train: &train,
            val: &val,
            test: &test,
        };
        let spec = self.config.model_spec();
        let opt = self.config.optimizer_config(self.config.optimizer.lr);
        let sel = self.config.selection_config();
        match mode {
            SelectMode::Online => {
                let trace = select_online(data, &spec, &opt, &sel)?;
                self.write_trace(io, &format!("online_{}", sel.scorer.name()), &trace)
            }
            SelectMode::Offline => {
                let s = &self.config.selection;
                let totals = offline_scores(
                    data,
                    &spec,
                    &opt,
                    s.retained,
                    s.epochs,
                    self.config.seed,
                    self.config.mask_spec(),
                )?;
                let removed = offline_removed(&totals, s.keep_ratio)?;
                let rows: Vec<Vec<String>> = totals
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        vec![
                            i.to_string(),
                            x.to_string(),
                            removed.binary_search(&i).is_ok().to_string(),
                        ]
                    })
                    .collect();
                io.write_csv(
                    "selection/offline_scores.csv",
                    &["sample", "total_score", "removed"],
                    &rows,
                )?;
                let trace = select_offline(
                    data,
                    &spec,
                    &opt,
                    &totals,
                    s.keep_ratio,
                    s.retained,
                    s.epochs,
                    self.config.seed,
                )?;
                self.write_trace(io, "offline", &trace)
            }
        }
    }

    fn k_sweep(&self, io: &mut Io<'_>) -> Result<()> {
        let (train, val, test) = self.load_data(io)?;
        let data = SelectionData {
            train: &train,
            val: &val,
            test: &test,
        };
        let s = &self.config.selection;
        let table = k_sweep(
            data,
            &self.config.model_spec(),
            &self.config.optimizer_config(self.config.optimizer.lr),
            &self.config.selection_config(),
            &s.k_values,
            &s.k_lrs,
            &s.seeds,
        )?;
        let mut header = vec![
            "horizon".to_string(),
            "lr".to_string(),
            "mean".to_string(),
            "std".to_string(),
        ];
        header.extend(table.seeds.iter().map(|s| format!("seed{s}")));
        let rows: Vec<Vec<String>> = table
            .cells
            .iter()
            .map(|c| {
                [
                    c.horizon.to_string(),
                    c.lr.to_string(),
                    c.mean.to_string(),
                    c.std.to_string(),
                ]
                .into_iter()
                .chain(c.errors.iter().map(|e| e.to_string()))
                .collect()
            })
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        io.write_csv("selection/k_sweep.csv", &header, &rows)?;
        let mut header = vec!["lr".to_string(), "argmin_k".to_string()];
        header.extend(table.seeds.iter().map(|s| format!("argmin_k_seed{s}")));
        let rows: Vec<Vec<String>> = table
            .argmin
            .iter()
            .enumerate()
            .map(|(li, &(lr, k))| {
                [lr.to_string(), k.to_string()]
                    .into_iter()
                    .chain(table.argmin_per_seed.iter().map(|per| per[li].to_string()))
                    .collect()
            })
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        io.write_csv("selection/k_sweep_argmin.csv", &header, &rows)
    }

    /// Merge every summary CSV into one long table after checking that all
    /// manifests and CSV headers carry the current config digest.
    fn report(&self, io: &mut Io<'_>) -> Result<()> {
        let manifest_dir = io.path("manifests");
        let mut manifests = Vec::new();
        if manifest_dir.exists() {
            let mut names: Vec<_> = fs::read_dir(&manifest_dir)?
                .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
                .collect::<std::io::Result<_>>()?;
            names.sort();
            for name in names.into_iter().filter(|n| n.ends_with(".json") && n != "report.json") {
                let rel = format!("manifests/{name}");
                let text = fs::read_to_string(io.path(&rel))?;
                let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::format(&rel, e.to_string()))?;
                io.inputs.insert(rel, sha256_file(&manifest_dir.join(&name))?);
                manifests.push(m);
            }
        }
        let stale: Vec<String> = manifests
            .iter()
            .filter(|m| m.config_digest != self.digest)
            .map(|m| format!("`{}` (digest {})", m.command, m.config_digest))
            .collect();
        if !stale.is_empty() {
            return Err(Error::invalid(format!(
                "refusing to merge outputs from a different config (current digest {}): {}",
                self.digest,
                stale.join(", ")
            )));
        }
        let summaries = [
            "train/metrics.csv",
            "analysis/fidelity.csv",
            "analysis/decomposition.csv",
            "analysis/proxy_fit.csv",
            "analysis/sweep.csv",
            "selection/online_adamw_summary.csv",
            "selection/online_sgd_summary.csv",
            "selection/online_random_summary.csv",
            "selection/offline_summary.csv",
            "selection/k_sweep.csv",
            "selection/k_sweep_argmin.csv",
        ];
        let mut rows = Vec::new();
        for rel in summaries {
            let path = io.path(rel);
            if !path.exists() {
                continue;
            }
            let (digest, header, body) = read_csv(&path)?;
            if digest != self.digest {
                return Err(Error::invalid(format!(
                    "refusing to merge {rel}: config digest {digest} differs from the current {}",
                    self.digest
                )));
            }
            io.inputs.insert(rel.to_string(), sha256_file(&path)?);
            for (i, row) in body.iter().enumerate() {
                for (col, value) in header.iter().zip(row) {
                    rows.push(vec![rel.to_string(), i.to_string(), col.clone(), value.clone()]);
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::dependency("summary outputs to merge", "train"));
        }
        io.write_csv("report/report.csv", &["source", "row", "column", "value"], &rows)
    }
}

fn write_scores(io: &mut Io<'_>, rel: &str, table: &ScoreTable) -> Result<()> {
    let nv = table.num_val();
    let header: Vec<String> = ["step", "sample"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..nv).map(|v| format!("val{v}")))
        .collect();
    let rows: Vec<Vec<String>> = table
        .keys
        .iter()
        .enumerate()
        .map(|(i, &(t, z))| {
            [t.to_string(), z.to_string()]
                .into_iter()
                .chain(table.scores.row(i).iter().map(|x| x.to_string()))
                .collect()
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    io.write_csv(rel, &header, &rows)
}

fn read_scores(path: &Path) -> Result<ScoreTable> {
    let (_, header, rows) = read_csv(path)?;
    let name = path.display().to_string();
    if header.len() < 3 {
        return Err(Error::format(&name, "no validation columns"));
    }
    let mut keys = Vec::with_capacity(rows.len());
    let mut scores = Vec::with_capacity(rows.len());
    for row in &rows {
        if row.len() != header.len() {
            return Err(Error::format(&name, "ragged row"));
        }
        keys.push((parse_usize(&name, &row[0])?, parse_usize(&name, &row[1])?));
        scores.push(
            row[2..]
                .iter()
                .map(|x| parse_f64(&name, x))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let scores = if scores.is_empty() {
        Matrix::zeros(0, header.len() - 2)
    } else {
        Matrix::from_rows(&scores)?
    };
    Ok(ScoreTable { keys, scores })
}

/// Write a machine-readable error record as one JSON line.
pub fn write_error_record(out: &mut impl Write, err: &Error) -> std::io::Result<()> {
    let mut record = serde_json::json!({
        "status": "error",
        "kind": err.kind(),
        "message": err.to_string(),
    });
    match err {
        Error::Config(paths) => record["paths"] = serde_json::json!(paths),
        Error::Dependency { artifact, producer } => {
            record["artifact"] = serde_json::json!(artifact);
            record["producer"] = serde_json::json!(producer);
        }
        _ => {}
    }
    writeln!(out, "{record}")
}
