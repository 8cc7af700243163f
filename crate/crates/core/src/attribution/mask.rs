//! Fixed random coordinate masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::RngStream;

/// Enough to regenerate a mask: keep ratio, base seed and member stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub keep_ratio: f64,
    pub seed: u64,
    #[serde(default)]
    pub stream: u64,
}

impl MaskSpec {
    pub fn full() -> Self {
        MaskSpec {
            keep_ratio: 1.0,
            seed: 0,
            stream: 0,
        }
    }
}

/// Sorted, unique kept coordinates `S ⊆ {0..p}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    indices: Vec<usize>,
    p: usize,
    spec: MaskSpec,
}

impl Mask {
    pub fn full(p: usize) -> Self {
        Mask {
            indices: (0..p).collect(),
            p,
            spec: MaskSpec::full(),
        }
    }

    pub fn build(p: usize, spec: MaskSpec) -> Result<Self> {
        if !(spec.keep_ratio > 0.0 && spec.keep_ratio <= 1.0) {
            return Err(Error::invalid(format!("keep ratio {} outside (0, 1]", spec.keep_ratio)));
        }
        if p == 0 {
            return Err(Error::invalid("cannot mask an empty parameter vector"));
        }
        if spec.keep_ratio == 1.0 {
            return Ok(Mask { spec, ..Mask::full(p) });
        }
        let k = ((spec.keep_ratio * p as f64).round() as usize).clamp(1, p);
        let mut rng = RngStream::named(spec.seed, "mask").child(spec.stream).rng();
        let mut indices = rand::seq::index::sample(&mut rng, p, k).into_vec();
        indices.sort_unstable();
        Ok(Mask { indices, p, spec })
    }

    /// `M` masks from one base seed, one stream per member.
    pub fn ensemble(p: usize, keep_ratio: f64, seed: u64, members: usize) -> Result<Vec<Mask>> {
        if members == 0 {
            return Err(Error::invalid("ensemble needs at least one member"));
        }
        (0..members as u64)
            .map(|stream| {
                Mask::build(
                    p,
                    MaskSpec {
                        keep_ratio,
                        seed,
                        stream,
                    },
                )
            })
            .collect()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn spec(&self) -> MaskSpec {
        self.spec
    }

    pub fn is_full(&self) -> bool {
        self.indices.len() == self.p
    }

    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&i| full[i]).collect()
    }

    /// Scatter into a length-`p` vector, zero off the mask.
    pub fn embed(&self, masked: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.p];
        for (&i, &x) in self.indices.iter().zip(masked) {
            out[i] = x;
        }
        out
    }
}

pub fn build_mask(p: usize, keep_ratio: f64, seed: u64) -> Result<Mask> {
    Mask::build(
        p,
        MaskSpec {
            keep_ratio,
            seed,
            stream: 0,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_ratio_keeps_everything() {
        let m = build_mask(7, 1.0, 3).unwrap();
        assert_eq!(m.indices(), &[0, 1, 2, 3, 4, 5, 6]);
        assert!(m.is_full());
    }

    #[test]
    fn deterministic_in_seed() {
        let a = build_mask(10, 0.5, 3).unwrap();
        let b = build_mask(10, 0.5, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.indices().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn bad_ratio_rejected() {
        assert!(build_mask(10, 0.0, 1).is_err());
        assert!(build_mask(10, 1.5, 1).is_err());
        assert!(Mask::ensemble(10, 0.5, 1, 0).is_err());
    }

    #[test]
    fn inclusion_frequency_within_binomial_band() {
        let (p, ratio, seeds) = (1000, 0.1, 400u64);
        let mut counts = vec![0usize; p];
        for seed in 0..seeds {
            for &i in build_mask(p, ratio, seed).unwrap().indices() {
                counts[i] += 1;
            }
        }
        // Per-coordinate inclusion is Binomial(seeds, 0.1). A 3σ band applied
        // to 1000 coordinates admits a few outliers; require 99% inside and
        // the total to be exact.
        let mean = seeds as f64 * ratio;
        let sd = (seeds as f64 * ratio * (1.0 - ratio)).sqrt();
        let inside = counts.iter().filter(|&&c| (c as f64 - mean).abs() <= 3.0 * sd).count();
        assert!(inside >= 990, "{inside} coordinates inside the band");
        assert_eq!(counts.iter().sum::<usize>(), seeds as usize * 100);
    }

    #[test]
    fn restrict_embed_round_trip() {
        let m = build_mask(6, 0.5, 9).unwrap();
        let full = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let r = m.restrict(&full);
        let e = m.embed(&r);
        for (i, x) in e.iter().enumerate() {
            if m.indices().contains(&i) {
                assert_eq!(*x, full[i]);
            } else {
                assert_eq!(*x, 0.0);
            }
        }
    }

    #[test]
    fn ensemble_members_differ() {
        let ms = Mask::ensemble(200, 0.2, 5, 3).unwrap();
        assert_ne!(ms[0], ms[1]);
        assert_ne!(ms[1], ms[2]);
    }
}
