//! Training loop, trajectory records and the on-disk trajectory cache.
//!
//! A cache directory holds `manifest.json`, `steps.bin`, `theta0.bin` and
//! `theta_final.bin`. Each step in `steps.bin` is one frame:
//!
//! ```text
//! t: u64 | b: u64 | s: u64 | sample ids: b × u64
//! per-sample grads: b × s | g: s | m: s | v: s     (f64 or f32, row-major)
//! lr: f64 | crc32 of the preceding frame bytes: u32
//! ```
//!
//! All integers and floats are little-endian. Frame start offsets are kept in
//! the manifest so any step can be read in O(1).

use std::borrow::Cow;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::mask::{Mask, MaskSpec};
use crate::data::{BatchSchedule, Dataset};
use crate::error::{Error, Result};
use crate::math::{self, Matrix};
use crate::model::{mean_rows, Model, ModelSpec, ReductionOrder};
use crate::optim::{OptimState, OptimizerConfig};

pub const FORMAT_VERSION: &str = "trajattr-v1";

/// Everything the backward recurrences consume from one training step,
/// restricted to the mask coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub sample_ids: Vec<usize>,
    /// `b × |S|`, raw (not divided by `b`).
    pub per_sample_grads: Matrix,
    /// Batch gradient actually used by the optimizer.
    pub g: Vec<f64>,
    /// Moments after this step's moment update.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
}

impl StepRecord {
    pub fn batch_size(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn position(&self, sample: usize) -> Option<usize> {
        self.sample_ids.iter().position(|&i| i == sample)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    fn width(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

/// What defines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    pub schedule: BatchSchedule,
    pub mask: MaskSpec,
}

impl RunConfig {
    pub fn num_steps(&self) -> usize {
        self.schedule.num_steps()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    pub format_version: String,
    pub run_id: String,
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    pub schedule: BatchSchedule,
    pub p: usize,
    pub mask: MaskSpec,
    pub mask_size: usize,
    pub num_steps: usize,
    pub precision: Precision,
    pub dataset_digest: String,
    #[serde(default)]
    pub step_offsets: Vec<u64>,
}

impl TrajectoryManifest {
    pub fn new(config: &RunConfig, data: &Dataset, precision: Precision) -> Result<Self> {
        let model = Model::new(config.model.clone())?;
        let p = model.param_count();
        let mask = Mask::build(p, config.mask)?;
        let mut manifest = TrajectoryManifest {
            format_version: FORMAT_VERSION.to_string(),
            run_id: String::new(),
            model: config.model.clone(),
            optimizer: config.optimizer.clone(),
            schedule: config.schedule.clone(),
            p,
            mask: config.mask,
            mask_size: mask.len(),
            num_steps: config.num_steps(),
            precision,
            dataset_digest: dataset_digest(data),
            step_offsets: Vec::new(),
        };
        let digest = Sha256::digest(serde_json::to_vec(&manifest).map_err(|e| Error::invalid(e.to_string()))?);
        manifest.run_id = hex::encode(&digest[..8]);
        Ok(manifest)
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            schedule: self.schedule.clone(),
            mask: self.mask,
        }
    }

    pub fn build_mask(&self) -> Result<Mask> {
        let mask = Mask::build(self.p, self.mask)?;
        if mask.len() != self.mask_size {
            return Err(Error::format(
                "manifest.mask_size",
                "does not match the regenerated mask",
            ));
        }
        Ok(mask)
    }
}

/// SHA-256 over the feature bytes, labels, dimension and class count.
pub fn dataset_digest(data: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update((data.dim() as u64).to_le_bytes());
    h.update((data.num_classes() as u64).to_le_bytes());
    for x in data.features() {
        h.update(x.to_le_bytes());
    }
    for &y in data.labels() {
        h.update((y as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Random access to the steps of a recorded trajectory.
pub trait StepSource: Sync {
    fn manifest(&self) -> &TrajectoryManifest;

    fn step(&self, t: usize) -> Result<Cow<'_, StepRecord>>;

    fn num_steps(&self) -> usize {
        self.manifest().num_steps
    }
}

/// Steps `0..T` in order.
pub fn steps_forward<S: StepSource + ?Sized>(src: &S) -> impl Iterator<Item = Result<Cow<'_, StepRecord>>> {
    (0..src.num_steps()).map(move |t| src.step(t))
}

/// Steps `T−1, …, 0`; one step resident at a time for disk sources.
pub fn steps_reverse<S: StepSource + ?Sized>(src: &S) -> impl Iterator<Item = Result<Cow<'_, StepRecord>>> {
    (0..src.num_steps()).rev().map(move |t| src.step(t))
}

/// A trajectory held in memory.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub manifest: TrajectoryManifest,
    pub steps: Vec<StepRecord>,
}

impl StepSource for Trajectory {
    fn manifest(&self) -> &TrajectoryManifest {
        &self.manifest
    }

    fn step(&self, t: usize) -> Result<Cow<'_, StepRecord>> {
        self.steps
            .get(t)
            .map(Cow::Borrowed)
            .ok_or_else(|| Error::format(format!("steps[{t}]"), "missing step"))
    }
}

/// Parameters and optimizer state before every step, plus the final pair.
#[derive(Clone, Debug, Default)]
pub struct Checkpoints {
    pub thetas: Vec<Vec<f64>>,
    pub states: Vec<OptimState>,
}

#[derive(Clone, Debug)]
pub struct RecordedRun {
    pub trajectory: Trajectory,
    pub theta0: Vec<f64>,
    pub theta_final: Vec<f64>,
    pub checkpoints: Option<Checkpoints>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalMode {
    /// `g − ε·g_z/b`: keep the divisor.
    #[default]
    Subtract,
    /// Mean over the batch without `z`.
    Renormalize,
}

/// A gradient-level change to one step of an otherwise identical run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perturbation {
    pub step: usize,
    pub sample: usize,
    pub epsilon: f64,
    pub mode: RemovalMode,
}

/// Read-only view handed to observers after each step.
pub struct StepView<'a> {
    pub t: usize,
    pub ids: &'a [usize],
    pub theta_before: &'a [f64],
    /// Full per-sample gradients, `b × p`.
    pub grads: &'a Matrix,
    pub g: &'a [f64],
    pub state_after: &'a OptimState,
    pub lr: f64,
}

/// Options for the step loop.
#[derive(Clone, Copy, Debug, Default)]
pub struct LoopOptions {
    pub reduction: ReductionOrder,
}

/// Callback invoked after every step of [`train_segment`].
pub type StepObserver<'o> = dyn FnMut(&StepView<'_>) -> Result<()> + 'o;

/// Run steps `range` from `(theta, state)`. `state.t` must equal
/// `range.start`.
#[allow(clippy::too_many_arguments)]
pub fn train_segment(
    model: &Model,
    data: &Dataset,
    optimizer: &OptimizerConfig,
    schedule: &BatchSchedule,
    theta: &mut [f64],
    state: &mut OptimState,
    range: std::ops::Range<usize>,
    perturbation: Option<&Perturbation>,
    options: LoopOptions,
    mut observer: Option<&mut StepObserver<'_>>,
) -> Result<()> {
    if state.t != range.start {
        return Err(Error::invalid(format!(
            "optimizer state is at step {}, segment starts at {}",
            state.t, range.start
        )));
    }
    if range.end > schedule.num_steps() {
        return Err(Error::invalid("segment runs past the schedule"));
    }
    for t in range {
        let ids = schedule.batch(t);
        let grads = model.per_sample_grads(theta, data, ids)?;
        let mut g = mean_rows(&grads, options.reduction);
        if let Some(pert) = perturbation.filter(|p| p.step == t) {
            apply_perturbation(pert, ids, &grads, &mut g)?;
        }
        let lr = optimizer.schedule.lr(t);
        let before = observer.as_ref().map(|_| theta.to_vec());
        optimizer.step(theta, &g, state)?;
        if let (Some(obs), Some(before)) = (observer.as_mut(), before) {
            obs(&StepView {
                t,
                ids,
                theta_before: &before,
                grads: &grads,
                g: &g,
                state_after: state,
                lr,
            })?;
        }
    }
    Ok(())
}

fn apply_perturbation(pert: &Perturbation, ids: &[usize], grads: &Matrix, g: &mut [f64]) -> Result<()> {
    let pos = ids.iter().position(|&i| i == pert.sample).ok_or_else(|| {
        Error::invalid(format!(
            "sample {} is not in the batch of step {}",
            pert.sample, pert.step
        ))
    })?;
    let b = ids.len() as f64;
    match pert.mode {
        RemovalMode::Subtract => {
            for (gi, zi) in g.iter_mut().zip(grads.row(pos)) {
                *gi -= pert.epsilon * (zi / b);
            }
        }
        RemovalMode::Renormalize => {
            if pert.epsilon != 1.0 {
                return Err(Error::invalid("renormalize removal is only defined at epsilon = 1"));
            }
            g.iter_mut().for_each(|x| *x = 0.0);
            if ids.len() > 1 {
                for (r, row) in grads.row_iter().enumerate() {
                    if r != pos {
                        math::axpy(1.0, row, g);
                    }
                }
                math::scale(1.0 / (b - 1.0), g);
            }
        }
    }
    Ok(())
}

fn restrict_record(mask: &Mask, view: &StepView<'_>) -> StepRecord {
    let mut psg = Matrix::zeros(view.ids.len(), mask.len());
    for (r, row) in view.grads.row_iter().enumerate() {
        let out = psg.row_mut(r);
        for (o, &i) in out.iter_mut().zip(mask.indices()) {
            *o = row[i];
        }
    }
    StepRecord {
        t: view.t,
        sample_ids: view.ids.to_vec(),
        per_sample_grads: psg,
        g: mask.restrict(view.g),
        m: mask.restrict(&view.state_after.m),
        v: mask.restrict(&view.state_after.v),
        lr: view.lr,
    }
}

/// Train from the run's initialization and keep every step in memory.
pub fn record_in_memory(data: &Dataset, config: &RunConfig, keep_checkpoints: bool) -> Result<RecordedRun> {
    config.optimizer.validate()?;
    let model = Model::new(config.model.clone())?;
    let manifest = TrajectoryManifest::new(config, data, Precision::F64)?;
    let mask = manifest.build_mask()?;
    let theta0 = model.init_params();
    let mut theta = theta0.clone();
    let mut state = OptimState::new(model.param_count());
    let mut steps = Vec::with_capacity(manifest.num_steps);
    let mut checkpoints = keep_checkpoints.then(|| Checkpoints {
        thetas: Vec::new(),
        states: vec![state.clone()],
    });
    let mut observer = |view: &StepView<'_>| -> Result<()> {
        steps.push(restrict_record(&mask, view));
        if let Some(cp) = checkpoints.as_mut() {
            cp.thetas.push(view.theta_before.to_vec());
            cp.states.push(view.state_after.clone());
        }
        Ok(())
    };
    train_segment(
        &model,
        data,
        &config.optimizer,
        &config.schedule,
        &mut theta,
        &mut state,
        0..config.num_steps(),
        None,
        LoopOptions::default(),
        Some(&mut observer),
    )?;
    if let Some(cp) = checkpoints.as_mut() {
        cp.thetas.push(theta.clone());
    }
    Ok(RecordedRun {
        trajectory: Trajectory { manifest, steps },
        theta0,
        theta_final: theta,
        checkpoints,
    })
}

/// Train from the run's initialization, streaming steps to `dir`.
pub fn record_training(data: &Dataset, config: &RunConfig, precision: Precision, dir: &Path) -> Result<Vec<f64>> {
    config.optimizer.validate()?;
    let model = Model::new(config.model.clone())?;
    let manifest = TrajectoryManifest::new(config, data, precision)?;
    let mask = manifest.build_mask()?;
    let theta0 = model.init_params();
    let mut writer = TrajectoryWriter::create(dir, precision)?;
    let mut theta = theta0.clone();
    let mut state = OptimState::new(model.param_count());
    let mut obs = |view: &StepView<'_>| writer.write_step(&restrict_record(&mask, view));
    train_segment(
        &model,
        data,
        &config.optimizer,
        &config.schedule,
        &mut theta,
        &mut state,
        0..config.num_steps(),
        None,
        LoopOptions::default(),
        Some(&mut obs),
    )?;
    writer.finish(manifest, &theta0, &theta)?;
    Ok(theta)
}

/// Re-apply the optimizer to the cached batch gradients from `theta0`.
/// Only meaningful for full-mask caches.
pub fn replay<S: StepSource + ?Sized>(src: &S, theta0: &[f64]) -> Result<Vec<f64>> {
    let manifest = src.manifest();
    if manifest.mask_size != manifest.p {
        return Err(Error::invalid("replay needs a full-mask trajectory"));
    }
    let mut theta = theta0.to_vec();
    let mut state = OptimState::new(manifest.p);
    for step in steps_forward(src) {
        let step = step?;
        manifest.optimizer.step(&mut theta, &step.g, &mut state)?;
    }
    Ok(theta)
}

pub struct TrajectoryWriter {
    dir: PathBuf,
    out: BufWriter<File>,
    offsets: Vec<u64>,
    position: u64,
    precision: Precision,
}

impl TrajectoryWriter {
    pub fn create(dir: &Path, precision: Precision) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let out = BufWriter::new(File::create(dir.join("steps.bin"))?);
        Ok(TrajectoryWriter {
            dir: dir.to_path_buf(),
            out,
            offsets: Vec::new(),
            position: 0,
            precision,
        })
    }

    pub fn write_step(&mut self, step: &StepRecord) -> Result<()> {
        if step.t != self.offsets.len() {
            return Err(Error::invalid(format!(
                "expected step {}, got {}",
                self.offsets.len(),
                step.t
            )));
        }
        let frame = encode_frame(step, self.precision);
        self.out.write_all(&frame)?;
        self.offsets.push(self.position);
        self.position += frame.len() as u64;
        Ok(())
    }

    pub fn finish(mut self, mut manifest: TrajectoryManifest, theta0: &[f64], theta_final: &[f64]) -> Result<()> {
        if self.offsets.len() != manifest.num_steps {
            return Err(Error::invalid(format!(
                "wrote {} steps, manifest declares {}",
                self.offsets.len(),
                manifest.num_steps
            )));
        }
        self.out.flush()?;
        manifest.step_offsets = self.offsets;
        manifest.precision = self.precision;
        write_f64s(&self.dir.join("theta0.bin"), theta0)?;
        write_f64s(&self.dir.join("theta_final.bin"), theta_final)?;
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
        fs::write(self.dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

fn frame_len(b: usize, s: usize, precision: Precision) -> usize {
    24 + 8 * b + precision.width() * (b * s + 3 * s) + 8 + 4
}

fn encode_frame(step: &StepRecord, precision: Precision) -> Vec<u8> {
    let b = step.sample_ids.len();
    let s = step.g.len();
    let mut buf = Vec::with_capacity(frame_len(b, s, precision));
    for x in [step.t, b, s] {
        buf.extend_from_slice(&(x as u64).to_le_bytes());
    }
    for &id in &step.sample_ids {
        buf.extend_from_slice(&(id as u64).to_le_bytes());
    }
    let arrays: [&[f64]; 4] = [step.per_sample_grads.as_slice(), &step.g, &step.m, &step.v];
    for arr in arrays {
        for &x in arr {
            match precision {
                Precision::F64 => buf.extend_from_slice(&x.to_le_bytes()),
                Precision::F32 => buf.extend_from_slice(&(x as f32).to_le_bytes()),
            }
        }
    }
    buf.extend_from_slice(&step.lr.to_le_bytes());
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u64(&mut self) -> u64 {
        let v = u64::from_le_bytes(self.buf[self.pos..self.pos + 8].try_into().expect("8 bytes"));
        self.pos += 8;
        v
    }

    fn f64s(&mut self, n: usize, precision: Precision) -> Vec<f64> {
        let w = precision.width();
        let out = self.buf[self.pos..self.pos + n * w]
            .chunks_exact(w)
            .map(|c| match precision {
                Precision::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                Precision::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
            })
            .collect();
        self.pos += n * w;
        out
    }
}

/// Reads a cache directory. Steps are loaded on demand.
pub struct TrajectoryReader {
    manifest: TrajectoryManifest,
    file: Mutex<File>,
    dir: PathBuf,
}

impl TrajectoryReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::format("manifest.json", e.to_string()))?;
        let manifest: TrajectoryManifest =
            serde_json::from_str(&text).map_err(|e| Error::format("manifest.json", e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(
                "manifest.format_version",
                format!(
                    "unsupported version {:?}, expected {FORMAT_VERSION:?}",
                    manifest.format_version
                ),
            ));
        }
        if manifest.step_offsets.len() != manifest.num_steps {
            return Err(Error::format("manifest.step_offsets", "length differs from num_steps"));
        }
        let mut manifest = manifest;
        manifest.schedule = manifest.schedule.regenerate()?;
        if manifest.schedule.num_steps() != manifest.num_steps {
            return Err(Error::format(
                "manifest.schedule",
                "regenerated schedule has a different length",
            ));
        }
        let file = File::open(dir.join("steps.bin"))?;
        let len = file.metadata()?.len();
        let s = manifest.mask_size;
        for t in 0..manifest.num_steps {
            let b = manifest.schedule.batch(t).len();
            let end = manifest.step_offsets[t] + frame_len(b, s, manifest.precision) as u64;
            if end > len {
                return Err(Error::format(format!("steps[{t}]"), "truncated frame"));
            }
        }
        for name in ["theta0.bin", "theta_final.bin"] {
            let got = fs::metadata(dir.join(name))
                .map_err(|e| Error::format(name, e.to_string()))?
                .len();
            if got != 8 * manifest.p as u64 {
                return Err(Error::format(
                    name,
                    format!("expected {} bytes, found {got}", 8 * manifest.p),
                ));
            }
        }
        Ok(TrajectoryReader {
            manifest,
            file: Mutex::new(file),
            dir: dir.to_path_buf(),
        })
    }

    pub fn theta0(&self) -> Result<Vec<f64>> {
        read_f64s(&self.dir.join("theta0.bin"))
    }

    pub fn theta_final(&self) -> Result<Vec<f64>> {
        read_f64s(&self.dir.join("theta_final.bin"))
    }

    pub fn read_step(&self, t: usize) -> Result<StepRecord> {
        let field = format!("steps[{t}]");
        if t >= self.manifest.num_steps {
            return Err(Error::format(field, "step index beyond the trajectory"));
        }
        let b = self.manifest.schedule.batch(t).len();
        let s = self.manifest.mask_size;
        let precision = self.manifest.precision;
        let n = frame_len(b, s, precision);
        let mut buf = vec![0u8; n];
        {
            let mut f = self
                .file
                .lock()
                .map_err(|_| Error::format(&field, "reader lock poisoned"))?;
            f.seek(SeekFrom::Start(self.manifest.step_offsets[t]))?;
            f.read_exact(&mut buf)
                .map_err(|_| Error::format(&field, "truncated frame"))?;
        }
        let stored = u32::from_le_bytes(buf[n - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(&buf[..n - 4]) != stored {
            return Err(Error::format(field, "checksum mismatch"));
        }
        let mut c = Cursor { buf: &buf, pos: 0 };
        let (ft, fb, fs_) = (c.u64() as usize, c.u64() as usize, c.u64() as usize);
        if ft != t || fb != b || fs_ != s {
            return Err(Error::format(
                field,
                format!("header ({ft}, {fb}, {fs_}) disagrees with the manifest"),
            ));
        }
        let sample_ids: Vec<usize> = (0..b).map(|_| c.u64() as usize).collect();
        let psg = c.f64s(b * s, precision);
        let g = c.f64s(s, precision);
        let m = c.f64s(s, precision);
        let v = c.f64s(s, precision);
        let lr = f64::from_le_bytes(buf[c.pos..c.pos + 8].try_into().expect("8 bytes"));
        Ok(StepRecord {
            t,
            sample_ids,
            per_sample_grads: Matrix::from_vec(b, s, psg)?,
            g,
            m,
            v,
            lr,
        })
    }

    /// Load every step into memory.
    pub fn load(&self) -> Result<Trajectory> {
        let steps = (0..self.manifest.num_steps)
            .map(|t| self.read_step(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trajectory {
            manifest: self.manifest.clone(),
            steps,
        })
    }
}

impl StepSource for TrajectoryReader {
    fn manifest(&self) -> &TrajectoryManifest {
        &self.manifest
    }

    fn step(&self, t: usize) -> Result<Cow<'_, StepRecord>> {
        self.read_step(t).map(Cow::Owned)
    }
}

/// Write a raw little-endian f64 vector.
pub fn write_f64s(path: &Path, xs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let bytes = fs::read(path).map_err(|e| Error::format(&name, e.to_string()))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(name, "length is not a multiple of 8"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}
