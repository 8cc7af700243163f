//! Random-mask ensembles.

use std::borrow::Cow;

use rayon::prelude::*;

use crate::attribution::backward::{backward_adamw, Targets};
use crate::attribution::curvature::Ggn;
use crate::attribution::factors::AdamWDynamics;
use crate::attribution::mask::Mask;
use crate::attribution::score::{score_matrix, ScoreTable};
use crate::error::{Error, Result};
use crate::math::{self, Matrix};
use crate::trajectory::{StepRecord, StepSource, TrajectoryManifest};

/// Presents a full-mask trajectory restricted to a sub-mask.
pub struct MaskedSource<'a, S: StepSource + ?Sized> {
    inner: &'a S,
    mask: Mask,
    manifest: TrajectoryManifest,
}

impl<'a, S: StepSource + ?Sized> MaskedSource<'a, S> {
    pub fn new(inner: &'a S, mask: Mask) -> Result<Self> {
        let base = inner.manifest();
        if base.mask_size != base.p {
            return Err(Error::invalid("masking needs a full-mask trajectory"));
        }
        if mask.p() != base.p {
            return Err(Error::invalid("mask does not match the trajectory"));
        }
        let mut manifest = base.clone();
        manifest.mask = mask.spec();
        manifest.mask_size = mask.len();
        Ok(MaskedSource { inner, mask, manifest })
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }
}

impl<S: StepSource + ?Sized> StepSource for MaskedSource<'_, S> {
    fn manifest(&self) -> &TrajectoryManifest {
        &self.manifest
    }

    fn step(&self, t: usize) -> Result<Cow<'_, StepRecord>> {
        let full = self.inner.step(t)?;
        let rows: Vec<Vec<f64>> = full
            .per_sample_grads
            .row_iter()
            .map(|r| self.mask.restrict(r))
            .collect();
        Ok(Cow::Owned(StepRecord {
            t: full.t,
            sample_ids: full.sample_ids.clone(),
            per_sample_grads: Matrix::from_rows(&rows)?,
            g: self.mask.restrict(&full.g),
            m: self.mask.restrict(&full.m),
            v: self.mask.restrict(&full.v),
            lr: full.lr,
        }))
    }
}

/// Run AdamW-influence once per mask over a full-mask trajectory and average
/// the scores. `val_grads` are full-dimensional.
pub fn ensemble_attribute<S: StepSource + ?Sized>(
    src: &S,
    masks: &[Mask],
    val_grads: &Matrix,
    dynamics: &AdamWDynamics,
    targets: Option<&Targets>,
) -> Result<ScoreTable> {
    if masks.is_empty() {
        return Err(Error::invalid("ensemble needs at least one mask"));
    }
    let members: Vec<ScoreTable> = masks
        .par_iter()
        .map(|mask| {
            let masked = MaskedSource::new(src, mask.clone())?;
            let (set, _) = backward_adamw(&masked, dynamics, &Ggn, targets)?;
            let rows: Vec<Vec<f64>> = val_grads.row_iter().map(|r| mask.restrict(r)).collect();
            let vg = Matrix::from_rows(&rows)?;
            let scores = score_matrix(&set, &vg)?;
            Ok(ScoreTable {
                keys: set.records.iter().map(|r| (r.step, r.sample)).collect(),
                scores,
            })
        })
        .collect::<Result<_>>()?;
    let mut iter = members.into_iter();
    let mut acc = iter.next().expect("nonempty");
    for m in iter {
        if m.keys != acc.keys {
            return Err(Error::invalid("ensemble members emitted different records"));
        }
        math::axpy(1.0, m.scores.as_slice(), acc.scores.as_mut_slice());
    }
    math::scale(1.0 / masks.len() as f64, acc.scores.as_mut_slice());
    Ok(acc)
}
