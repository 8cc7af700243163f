//! Dense kernels, seeded random streams and rank statistics.
//!
//! Everything here is double precision and single-threaded unless a function
//! says otherwise. Parallel helpers split work by output row, so their results
//! do not depend on the thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators let the compiler vectorise; the order is
    // fixed, so the result is reproducible.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(alpha: f64, x: &mut [f64]) {
    x.iter_mut().for_each(|xi| *xi *= alpha);
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `‖a − b‖ / max(‖b‖, tiny)`
pub fn rel_l2_error(a: &[f64], reference: &[f64]) -> f64 {
    let diff = norm2(&sub(a, reference));
    let base = norm2(reference);
    if base == 0.0 {
        diff
    } else {
        diff / base
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::invalid(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-column matrix has no data anyway.
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.row_iter().map(|r| dot(r, x)).collect()
    }

    /// `self · otherᵀ`, computed row-parallel. Both operands are read row-wise,
    /// which keeps every inner product contiguous.
    pub fn mul_transposed(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "inner dimensions differ");
        let mut out = Matrix::zeros(self.rows, other.rows);
        if other.rows == 0 {
            return out;
        }
        out.data
            .par_chunks_mut(other.rows)
            .zip(self.data.par_chunks(self.cols.max(1)))
            .for_each(|(out_row, a_row)| {
                for (o, b_row) in out_row.iter_mut().zip(other.row_iter()) {
                    *o = dot(a_row, b_row);
                }
            });
        out
    }

    /// Matrix product, row-parallel; each output row is accumulated in a
    /// fixed order.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let mut out = Matrix::zeros(self.rows, other.cols);
        if other.cols == 0 {
            return out;
        }
        out.data
            .par_chunks_mut(other.cols)
            .zip(self.data.par_chunks(self.cols.max(1)))
            .for_each(|(orow, a_row)| {
                for (&a, b_row) in a_row.iter().zip(other.row_iter()) {
                    axpy(a, b_row, orow);
                }
            });
        out
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }
}

/// Immutable descriptor of a reproducible random stream.
///
/// `(seed, stream_id)` fully determines the sequence; ChaCha is specified
/// bit-for-bit, so the sequence is identical across platforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    /// Stream identified by a name, e.g. `"mask"` or `"schedule"`.
    pub fn named(seed: u64, name: &str) -> Self {
        RngStream::new(seed, fnv1a(name.as_bytes()))
    }

    /// Derive an independent sub-stream, e.g. one per epoch or per step.
    pub fn child(&self, index: u64) -> Self {
        RngStream::new(
            self.seed,
            splitmix64(self.stream_id ^ splitmix64(index.wrapping_add(1))),
        )
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Ranks starting at 1; tied values share the mean of their rank range.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("need at least two observations"));
    }
    if !all_finite(xs) || !all_finite(ys) {
        return Err(Error::invalid("non-finite observation"));
    }
    Ok(())
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    // sqrt(sxx * syy) rather than sqrt(sxx) * sqrt(syy): identical inputs then
    // give exactly 1.
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
        .map_err(|_| Error::UndefinedCorrelation("zero rank variance".into()))
}

/// Trailing-window mean, truncated at the left boundary.
pub fn rolling_mean(xs: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::invalid("rolling window must be at least 1"));
    }
    Ok((0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let w = &xs[lo..=i];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect())
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    }

    #[test]
    fn spearman_with_tie_matches_hand_ranks() {
        // xs = [1,1,2,3] ranks to [1.5,1.5,3,4]; ys ranks to [1,2,3,4].
        // Centred: a = [-1,-1,0.5,1.5], b = [-1.5,-0.5,0.5,1.5].
        // Σab = 1.5+0.5+0.25+2.25 = 4.5, Σa² = 4.5, Σb² = 5.
        let expected = 4.5 / (4.5f64 * 5.0).sqrt();
        let rho = spearman_rho(&[1.0, 1.0, 2.0, 3.0], &[4.0, 5.0, 6.0, 7.0]).unwrap();
        assert!((rho - expected).abs() < 1e-15, "{rho} vs {expected}");
    }

    #[test]
    fn spearman_errors() {
        assert!(matches!(spearman_rho(&[1.0], &[1.0]), Err(Error::InvalidInput(_))));
        assert!(matches!(spearman_rho(&[1.0, 2.0], &[1.0]), Err(Error::InvalidInput(_))));
        assert!(matches!(
            spearman_rho(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn rolling_mean_examples() {
        assert_eq!(
            rolling_mean(&[1.0, 2.0, 3.0, 4.0], 1).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
        assert_eq!(rolling_mean(&[2.0, 2.0, 2.0], 5).unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(
            rolling_mean(&[1.0, 3.0, 5.0, 7.0], 2).unwrap(),
            vec![1.0, 2.0, 4.0, 6.0]
        );
        assert!(rolling_mean(&[1.0], 0).is_err());
    }

    #[test]
    fn rng_stream_is_reproducible_and_streams_differ() {
        let a: Vec<u64> = {
            let mut r = RngStream::new(42, 7).rng();
            (0..8).map(|_| r.random()).collect()
        };
        let b: Vec<u64> = {
            let mut r = RngStream::new(42, 7).rng();
            (0..8).map(|_| r.random()).collect()
        };
        let c: Vec<u64> = {
            let mut r = RngStream::new(42, 8).rng();
            (0..8).map(|_| r.random()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(RngStream::named(1, "mask"), RngStream::named(1, "init"));
        assert_ne!(RngStream::new(1, 0).child(0), RngStream::new(1, 0).child(1));
    }

    #[test]
    fn mul_transposed_matches_matmul() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 0.0, -1.0], vec![2.0, 1.0, 0.5]]).unwrap();
        assert_eq!(a.mul_transposed(&b), a.matmul(&b.transpose()));
    }

    proptest! {
        #[test]
        fn spearman_invariant_under_increasing_maps(seed in any::<u64>(), n in 2usize..40) {
            let mut rng = RngStream::new(seed, 0).rng();
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let fx: Vec<f64> = xs.iter().map(|x| x.exp() + 3.0 * x).collect();
            if let Ok(r) = spearman_rho(&xs, &fx) {
                prop_assert!((r - 1.0).abs() < 1e-12);
            }
            match (spearman_rho(&xs, &ys), spearman_rho(&ys, &xs), spearman_rho(&fx, &ys)) {
                (Ok(a), Ok(b), Ok(c)) => {
                    prop_assert!((a - b).abs() < 1e-12);
                    prop_assert!((a - c).abs() < 1e-12);
                    prop_assert!((-1.0..=1.0).contains(&a));
                }
                (a, b, _) => prop_assert_eq!(a.is_ok(), b.is_ok()),
            }
        }
    }
}
