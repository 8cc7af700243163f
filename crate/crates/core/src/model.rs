//! Small differentiable models with hand-written backpropagation.
//!
//! Parameters are a flat vector laid out layer by layer; inside a layer the
//! weight matrix (`out × in`, row-major) comes first, then the bias. The
//! trajectory format depends on this order.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::math::{self, Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Multinomial logistic regression (a single linear layer).
    Logistic,
    /// ReLU multilayer perceptron.
    Mlp,
    /// Toy per-sample loss `½‖θ − x‖²`; labels are ignored.
    Quadratic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Input, hidden..., classes. For `Quadratic`, a single entry: the dimension.
    pub layer_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn logistic(input: usize, classes: usize, init_seed: u64) -> Self {
        ModelSpec {
            kind: ModelKind::Logistic,
            layer_dims: vec![input, classes],
            activation: Activation::Relu,
            init_seed,
        }
    }

    pub fn mlp(input: usize, hidden: &[usize], classes: usize, init_seed: u64) -> Self {
        let mut layer_dims = vec![input];
        layer_dims.extend_from_slice(hidden);
        layer_dims.push(classes);
        ModelSpec {
            kind: ModelKind::Mlp,
            layer_dims,
            activation: Activation::Relu,
            init_seed,
        }
    }

    pub fn quadratic(dim: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Quadratic,
            layer_dims: vec![dim],
            activation: Activation::Relu,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.contains(&0) {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
        match self.kind {
            ModelKind::Logistic if self.layer_dims.len() != 2 => {
                Err(Error::invalid("logistic model takes [input, classes]"))
            }
            ModelKind::Mlp if self.layer_dims.len() < 3 => Err(Error::invalid("mlp needs at least one hidden layer")),
            ModelKind::Quadratic if self.layer_dims.len() != 1 => Err(Error::invalid("quadratic model takes [dim]")),
            _ => Ok(()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        match self.kind {
            ModelKind::Quadratic => 1,
            _ => *self.layer_dims.last().expect("validated"),
        }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::Quadratic => self.layer_dims[0],
            _ => self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    w_offset: usize,
    b_offset: usize,
}

/// Order in which per-sample gradients are summed into a batch gradient.
/// `Reversed` exists to measure floating-point reduction-order effects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReductionOrder {
    #[default]
    Forward,
    Reversed,
}

/// A validated model with its parameter layout.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
    p: usize,
}

struct Tape {
    /// Layer inputs: `inputs[l]` feeds layer `l`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every layer; the last one holds the logits.
    pre: Vec<Vec<f64>>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut offset = 0;
        if spec.kind != ModelKind::Quadratic {
            for w in spec.layer_dims.windows(2) {
                let (fan_in, fan_out) = (w[0], w[1]);
                layers.push(Layer {
                    fan_in,
                    fan_out,
                    w_offset: offset,
                    b_offset: offset + fan_in * fan_out,
                });
                offset += fan_in * fan_out + fan_out;
            }
        }
        let p = spec.param_count();
        Ok(Model { spec, layers, p })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.p
    }

    /// Uniform in `[−1/√fan_in, 1/√fan_in]` for every weight and bias of a
    /// layer; zeros for the quadratic toy.
    pub fn init_params(&self) -> Vec<f64> {
        let mut theta = vec![0.0; self.p];
        let mut rng = RngStream::named(self.spec.init_seed, "init").rng();
        for layer in &self.layers {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            let end = layer.b_offset + layer.fan_out;
            for v in &mut theta[layer.w_offset..end] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        theta
    }

    fn check(&self, theta: &[f64], sample: &Sample<'_>) -> Result<()> {
        if theta.len() != self.p {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, model has {}",
                theta.len(),
                self.p
            )));
        }
        if sample.x.len() != self.spec.input_dim() {
            return Err(Error::invalid(format!(
                "sample has {} features, model expects {}",
                sample.x.len(),
                self.spec.input_dim()
            )));
        }
        if self.spec.kind != ModelKind::Quadratic && sample.y >= self.spec.num_classes() {
            return Err(Error::invalid(format!("label {} outside model classes", sample.y)));
        }
        Ok(())
    }

    fn forward(&self, theta: &[f64], x: &[f64]) -> Tape {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let w = &theta[layer.w_offset..layer.b_offset];
            let b = &theta[layer.b_offset..layer.b_offset + layer.fan_out];
            let z: Vec<f64> = (0..layer.fan_out)
                .map(|o| math::dot(&w[o * layer.fan_in..(o + 1) * layer.fan_in], &a) + b[o])
                .collect();
            let next = if l + 1 < self.layers.len() {
                z.iter().map(|&v| v.max(0.0)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(z);
        }
        Tape { inputs, pre }
    }

    pub fn logits(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        self.forward(theta, x).pre.pop().unwrap_or_default()
    }

    /// Softmax cross-entropy (or the quadratic toy loss).
    pub fn loss(&self, theta: &[f64], sample: Sample<'_>) -> Result<f64> {
        self.check(theta, &sample)?;
        Ok(match self.spec.kind {
            ModelKind::Quadratic => 0.5 * sample.x.iter().zip(theta).map(|(a, t)| (t - a).powi(2)).sum::<f64>(),
            _ => {
                let logits = self.logits(theta, sample.x);
                log_sum_exp(&logits) - logits[sample.y]
            }
        })
    }

    pub fn grad(&self, theta: &[f64], sample: Sample<'_>) -> Result<Vec<f64>> {
        self.check(theta, &sample)?;
        let mut out = vec![0.0; self.p];
        self.grad_into(theta, sample, &mut out);
        Ok(out)
    }

    /// Gradient of one sample into `out` (overwritten). Inputs are trusted.
    fn grad_into(&self, theta: &[f64], sample: Sample<'_>, out: &mut [f64]) {
        if self.spec.kind == ModelKind::Quadratic {
            for ((o, t), a) in out.iter_mut().zip(theta).zip(sample.x) {
                *o = t - a;
            }
            return;
        }
        let tape = self.forward(theta, sample.x);
        let mut delta = softmax(tape.pre.last().expect("at least one layer"));
        delta[sample.y] -= 1.0;
        for l in (0..self.layers.len()).rev() {
            let layer = self.layers[l];
            let a = &tape.inputs[l];
            for o in 0..layer.fan_out {
                let row = &mut out[layer.w_offset + o * layer.fan_in..layer.w_offset + (o + 1) * layer.fan_in];
                for (r, &ai) in row.iter_mut().zip(a) {
                    *r = delta[o] * ai;
                }
            }
            out[layer.b_offset..layer.b_offset + layer.fan_out].copy_from_slice(&delta);
            if l > 0 {
                let w = &theta[layer.w_offset..layer.b_offset];
                let prev_pre = &tape.pre[l - 1];
                let mut next = vec![0.0; layer.fan_in];
                for o in 0..layer.fan_out {
                    math::axpy(delta[o], &w[o * layer.fan_in..(o + 1) * layer.fan_in], &mut next);
                }
                for (n, &z) in next.iter_mut().zip(prev_pre) {
                    if z <= 0.0 {
                        *n = 0.0;
                    }
                }
                delta = next;
            }
        }
    }

    fn check_batch(&self, theta: &[f64], data: &Dataset, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= data.len()) {
            return Err(Error::invalid(format!("sample id {bad} out of range")));
        }
        self.check(theta, &data.sample(ids[0]))
    }

    /// One gradient row per id (`b × p`), computed in parallel.
    pub fn per_sample_grads(&self, theta: &[f64], data: &Dataset, ids: &[usize]) -> Result<Matrix> {
        self.check_batch(theta, data, ids)?;
        let mut g = Matrix::zeros(ids.len(), self.p);
        g.as_mut_slice()
            .par_chunks_mut(self.p)
            .zip(ids.par_iter())
            .for_each(|(row, &i)| self.grad_into(theta, data.sample(i), row));
        Ok(g)
    }

    pub fn batch_grad(&self, theta: &[f64], data: &Dataset, ids: &[usize]) -> Result<Vec<f64>> {
        let g = self.per_sample_grads(theta, data, ids)?;
        Ok(mean_rows(&g, ReductionOrder::Forward))
    }

    /// `(1/b) Σ_z g_z (g_z · v)`: the outer-product Gauss–Newton curvature.
    pub fn ggn_vec(&self, theta: &[f64], data: &Dataset, ids: &[usize], v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.p {
            return Err(Error::invalid("direction has the wrong dimension"));
        }
        let g = self.per_sample_grads(theta, data, ids)?;
        Ok(ggn_from_grads(&g, v))
    }

    /// Exact Hessian-vector product of the batch-mean loss (forward-over-
    /// reverse R-operator). ReLU is treated as having zero curvature.
    pub fn hvp(&self, theta: &[f64], data: &Dataset, ids: &[usize], v: &[f64]) -> Result<Vec<f64>> {
        self.check_batch(theta, data, ids)?;
        if v.len() != self.p {
            return Err(Error::invalid("direction has the wrong dimension"));
        }
        if self.spec.kind == ModelKind::Quadratic {
            return Ok(v.to_vec());
        }
        let parts: Vec<Vec<f64>> = ids
            .par_iter()
            .map(|&i| self.hvp_one(theta, data.sample(i), v))
            .collect();
        let mut out = vec![0.0; self.p];
        for part in &parts {
            math::axpy(1.0, part, &mut out);
        }
        math::scale(1.0 / ids.len() as f64, &mut out);
        Ok(out)
    }

    fn hvp_one(&self, theta: &[f64], sample: Sample<'_>, v: &[f64]) -> Vec<f64> {
        let tape = self.forward(theta, sample.x);
        let n_layers = self.layers.len();
        // R-forward: directional derivatives of layer inputs and pre-activations.
        let mut r_inputs: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut r_pre: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut r_a = vec![0.0; sample.x.len()];
        for (l, layer) in self.layers.iter().enumerate() {
            let w = &theta[layer.w_offset..layer.b_offset];
            let vw = &v[layer.w_offset..layer.b_offset];
            let vb = &v[layer.b_offset..layer.b_offset + layer.fan_out];
            let a = &tape.inputs[l];
            let rz: Vec<f64> = (0..layer.fan_out)
                .map(|o| {
                    let span = o * layer.fan_in..(o + 1) * layer.fan_in;
                    math::dot(&vw[span.clone()], a) + math::dot(&w[span], &r_a) + vb[o]
                })
                .collect();
            let next = if l + 1 < n_layers {
                rz.iter()
                    .zip(&tape.pre[l])
                    .map(|(&r, &z)| if z > 0.0 { r } else { 0.0 })
                    .collect()
            } else {
                Vec::new()
            };
            r_inputs.push(std::mem::replace(&mut r_a, next));
            r_pre.push(rz);
        }

        let s = softmax(tape.pre.last().expect("at least one layer"));
        let r_logits = r_pre.last().expect("at least one layer");
        let s_dot = math::dot(&s, r_logits);
        let mut delta = s.clone();
        delta[sample.y] -= 1.0;
        let mut r_delta: Vec<f64> = s.iter().zip(r_logits).map(|(si, ri)| si * (ri - s_dot)).collect();

        let mut out = vec![0.0; self.p];
        for l in (0..n_layers).rev() {
            let layer = self.layers[l];
            let a = &tape.inputs[l];
            let ra = &r_inputs[l];
            for o in 0..layer.fan_out {
                let row = &mut out[layer.w_offset + o * layer.fan_in..layer.w_offset + (o + 1) * layer.fan_in];
                for ((r, &ai), &rai) in row.iter_mut().zip(a).zip(ra) {
                    *r = r_delta[o] * ai + delta[o] * rai;
                }
            }
            out[layer.b_offset..layer.b_offset + layer.fan_out].copy_from_slice(&r_delta);
            if l > 0 {
                let w = &theta[layer.w_offset..layer.b_offset];
                let vw = &v[layer.w_offset..layer.b_offset];
                let mut next = vec![0.0; layer.fan_in];
                let mut r_next = vec![0.0; layer.fan_in];
                for o in 0..layer.fan_out {
                    let span = o * layer.fan_in..(o + 1) * layer.fan_in;
                    math::axpy(delta[o], &w[span.clone()], &mut next);
                    math::axpy(delta[o], &vw[span.clone()], &mut r_next);
                    math::axpy(r_delta[o], &w[span], &mut r_next);
                }
                for ((n, rn), &z) in next.iter_mut().zip(r_next.iter_mut()).zip(&tape.pre[l - 1]) {
                    if z <= 0.0 {
                        *n = 0.0;
                        *rn = 0.0;
                    }
                }
                delta = next;
                r_delta = r_next;
            }
        }
        out
    }

    /// Central-difference Hessian-vector product of the batch-mean loss.
    pub fn hvp_fd(&self, theta: &[f64], data: &Dataset, ids: &[usize], v: &[f64], h: f64) -> Result<Vec<f64>> {
        if !(h > 0.0) {
            return Err(Error::invalid("finite-difference step must be positive"));
        }
        if v.len() != self.p || theta.len() != self.p {
            return Err(Error::invalid("direction has the wrong dimension"));
        }
        let plus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + h * d).collect();
        let minus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t - h * d).collect();
        let gp = self.batch_grad(&plus, data, ids)?;
        let gm = self.batch_grad(&minus, data, ids)?;
        let out: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        if !math::all_finite(&out) {
            return Err(Error::numeric(
                None,
                "non-finite finite-difference Hessian-vector product",
            ));
        }
        Ok(out)
    }

    pub fn predict(&self, theta: &[f64], x: &[f64]) -> usize {
        let logits = self.logits(theta, x);
        logits
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |best, (i, &z)| if z > best.1 { (i, z) } else { best },
            )
            .0
    }

    pub fn error_rate(&self, theta: &[f64], data: &Dataset) -> f64 {
        let wrong = (0..data.len())
            .into_par_iter()
            .filter(|&i| {
                let s = data.sample(i);
                self.predict(theta, s.x) != s.y
            })
            .count();
        wrong as f64 / data.len() as f64
    }

    pub fn mean_loss(&self, theta: &[f64], data: &Dataset, ids: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for &i in ids {
            total += self.loss(theta, data.sample(i))?;
        }
        Ok(total / ids.len() as f64)
    }
}

/// Mean of the rows, summed in the requested order then divided by `b`.
pub fn mean_rows(g: &Matrix, order: ReductionOrder) -> Vec<f64> {
    let mut acc = vec![0.0; g.cols()];
    let b = g.rows();
    let idx: Box<dyn Iterator<Item = usize>> = match order {
        ReductionOrder::Forward => Box::new(0..b),
        ReductionOrder::Reversed => Box::new((0..b).rev()),
    };
    for i in idx {
        for (a, x) in acc.iter_mut().zip(g.row(i)) {
            *a += x;
        }
    }
    let bf = b as f64;
    acc.iter_mut().for_each(|a| *a /= bf);
    acc
}

/// `(1/b) Σ_z g_z (g_z · v)` from precomputed rows.
pub fn ggn_from_grads(g: &Matrix, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.cols()];
    for row in g.row_iter() {
        math::axpy(math::dot(row, v), row, &mut out);
    }
    math::scale(1.0 / g.rows() as f64, &mut out);
    out
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|&v| (v - lse).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use rand::Rng;

    fn random_theta(model: &Model, seed: u64) -> Vec<f64> {
        let mut rng = RngStream::new(seed, 99).rng();
        (0..model.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn param_counts_and_layout() {
        assert_eq!(ModelSpec::logistic(4, 3, 0).param_count(), 15);
        assert_eq!(
            ModelSpec::mlp(784, &[16, 16], 10, 0).param_count(),
            784 * 16 + 16 + 16 * 16 + 16 + 16 * 10 + 10
        );
        assert!(ModelSpec::mlp(4, &[], 3, 0).validate().is_err());
        let m = Model::new(ModelSpec::mlp(3, &[2], 2, 0)).unwrap();
        assert_eq!(m.layers[0].b_offset, 6);
        assert_eq!(m.layers[1].w_offset, 8);
    }

    #[test]
    fn zero_parameters_give_uniform_softmax() {
        let ds = gen_blobs(6, 3, 2, 1.0, 1).unwrap();
        let logistic = Model::new(ModelSpec::logistic(3, 2, 0)).unwrap();
        let theta = vec![0.0; logistic.param_count()];
        for i in 0..ds.len() {
            let l = logistic.loss(&theta, ds.sample(i)).unwrap();
            assert!((l - 2f64.ln()).abs() < 1e-15);
        }
        let ds5 = gen_blobs(10, 3, 5, 1.0, 1).unwrap();
        let mlp = Model::new(ModelSpec::mlp(3, &[4, 4], 5, 0)).unwrap();
        let theta = vec![0.0; mlp.param_count()];
        assert!((mlp.loss(&theta, ds5.sample(2)).unwrap() - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_compensated_softmax_oracle() {
        let ds = gen_blobs(20, 4, 3, 1.0, 8).unwrap();
        let model = Model::new(ModelSpec::mlp(4, &[5], 3, 0)).unwrap();
        for seed in 0..10 {
            let theta = random_theta(&model, seed);
            let s = ds.sample(seed as usize);
            let logits = model.logits(&theta, s.x);
            // Oracle: -log(e^{z_y} / Σ e^{z_k}) with Neumaier-compensated sums.
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            for &z in &logits {
                let e = z.exp();
                let t = sum + e;
                comp += if sum.abs() >= e.abs() {
                    (sum - t) + e
                } else {
                    (e - t) + sum
                };
                sum = t;
            }
            let expected = (sum + comp).ln() - logits[s.y];
            let got = model.loss(&theta, s).unwrap();
            assert!((got - expected).abs() < 1e-13 * expected.abs().max(1.0));
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let model = Model::new(ModelSpec::logistic(3, 2, 0)).unwrap();
        let x = [1.0, 2.0];
        assert!(model.loss(&[0.0; 8], Sample { x: &x, y: 0 }).is_err());
        let ds = gen_blobs(4, 3, 2, 1.0, 0).unwrap();
        assert!(model.batch_grad(&[0.0; 8], &ds, &[]).is_err());
    }

    fn check_gradient(model: &Model, ds: &Dataset, seed: u64) {
        let theta = random_theta(model, seed);
        let s = ds.sample(seed as usize % ds.len());
        let g = model.grad(&theta, s).unwrap();
        let h = 1e-5;
        for j in 0..model.param_count() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += h;
            tm[j] -= h;
            let fd = (model.loss(&tp, s).unwrap() - model.loss(&tm, s).unwrap()) / (2.0 * h);
            let err = (fd - g[j]).abs();
            // Relative error < 1e-6, with an absolute floor for near-zero entries
            // where central differences are limited by round-off.
            assert!(
                err <= 1e-6 * g[j].abs().max(fd.abs()) || err < 1e-9,
                "seed {seed} coord {j}: fd {fd} vs analytic {}",
                g[j]
            );
        }
    }

    #[test]
    fn gradient_check_over_many_draws() {
        let ds = gen_blobs(30, 3, 3, 1.0, 2).unwrap();
        let logistic = Model::new(ModelSpec::logistic(3, 3, 0)).unwrap();
        let mlp = Model::new(ModelSpec::mlp(3, &[4, 3], 3, 0)).unwrap();
        let quad = Model::new(ModelSpec::quadratic(3)).unwrap();
        for seed in 0..100 {
            check_gradient(&logistic, &ds, seed);
            check_gradient(&mlp, &ds, seed);
            check_gradient(&quad, &ds, seed);
        }
    }

    #[test]
    fn batch_grad_is_mean_and_singleton_is_grad() {
        let ds = gen_blobs(12, 3, 3, 1.0, 4).unwrap();
        let model = Model::new(ModelSpec::mlp(3, &[4], 3, 0)).unwrap();
        let theta = random_theta(&model, 1);
        let ids = [0, 3, 7, 9];
        let bg = model.batch_grad(&theta, &ds, &ids).unwrap();
        let mut mean = vec![0.0; model.param_count()];
        for &i in &ids {
            math::axpy(0.25, &model.grad(&theta, ds.sample(i)).unwrap(), &mut mean);
        }
        assert!(math::max_abs_diff(&bg, &mean) < 1e-14);
        assert_eq!(
            model.batch_grad(&theta, &ds, &[5]).unwrap(),
            model.grad(&theta, ds.sample(5)).unwrap()
        );
    }

    #[test]
    fn symmetric_dataset_has_zero_weight_gradient_at_zero() {
        // Balanced classes, each closed under x -> -x: weight gradients cancel.
        let ds = Dataset::new(vec![1.0, 2.0, -1.0, -2.0, 0.5, -3.0, -0.5, 3.0], vec![0, 0, 1, 1], 2, 2).unwrap();
        let model = Model::new(ModelSpec::logistic(2, 2, 0)).unwrap();
        let g = model.batch_grad(&[0.0; 6], &ds, &[0, 1, 2, 3]).unwrap();
        assert!(g[..4].iter().all(|&x| x.abs() < 1e-15), "{g:?}");
    }

    #[test]
    fn ggn_examples() {
        let ds = gen_blobs(10, 3, 2, 1.0, 5).unwrap();
        let model = Model::new(ModelSpec::mlp(3, &[3], 2, 0)).unwrap();
        let p = model.param_count();
        let theta = random_theta(&model, 3);
        assert!(model
            .ggn_vec(&theta, &ds, &[1, 2], &vec![0.0; p])
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));

        let g = model.grad(&theta, ds.sample(4)).unwrap();
        let out = model.ggn_vec(&theta, &ds, &[4], &g).unwrap();
        let n2 = math::dot(&g, &g);
        for (o, gi) in out.iter().zip(&g) {
            assert!((o - gi * n2).abs() < 1e-12 * (gi * n2).abs().max(1.0));
        }
    }

    #[test]
    fn ggn_matches_explicit_matrix() {
        let ds = gen_blobs(10, 2, 2, 1.0, 6).unwrap();
        let model = Model::new(ModelSpec::mlp(2, &[3], 2, 0)).unwrap();
        let p = model.param_count();
        assert!(p <= 20);
        let theta = random_theta(&model, 4);
        let ids = [0, 1, 5, 8];
        let mut explicit = Matrix::zeros(p, p);
        for &i in &ids {
            let g = model.grad(&theta, ds.sample(i)).unwrap();
            for r in 0..p {
                for c in 0..p {
                    explicit.set(r, c, explicit.get(r, c) + g[r] * g[c] / ids.len() as f64);
                }
            }
        }
        for j in 0..p {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            let col = model.ggn_vec(&theta, &ds, &ids, &e).unwrap();
            for (r, x) in col.iter().enumerate() {
                assert!((x - explicit.get(r, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ggn_is_linear() {
        let ds = gen_blobs(10, 2, 2, 1.0, 6).unwrap();
        let model = Model::new(ModelSpec::mlp(2, &[3], 2, 0)).unwrap();
        let theta = random_theta(&model, 7);
        let u = random_theta(&model, 8);
        let v = random_theta(&model, 9);
        let (alpha, beta) = (0.7, -1.3);
        let combo: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = model.ggn_vec(&theta, &ds, &[0, 2, 3], &combo).unwrap();
        let gu = model.ggn_vec(&theta, &ds, &[0, 2, 3], &u).unwrap();
        let gv = model.ggn_vec(&theta, &ds, &[0, 2, 3], &v).unwrap();
        for i in 0..lhs.len() {
            assert!((lhs[i] - (alpha * gu[i] + beta * gv[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn hvp_fd_examples() {
        let quad = Model::new(ModelSpec::quadratic(4)).unwrap();
        let zeros = Dataset::new(vec![0.0; 4], vec![0], 4, 1).unwrap();
        let theta = [0.3, -0.2, 1.0, 2.0];
        let v = [1.0, -2.0, 0.5, 0.0];
        let hv = quad.hvp_fd(&theta, &zeros, &[0], &v, 1e-4).unwrap();
        assert!(math::max_abs_diff(&hv, &v) < 1e-8);
        let z = quad.hvp_fd(&theta, &zeros, &[0], &[0.0; 4], 1e-4).unwrap();
        assert!(z.iter().all(|&x| x == 0.0));
        assert!(quad.hvp_fd(&theta, &zeros, &[0], &v, 0.0).is_err());
    }

    #[test]
    fn hvp_fd_is_symmetric_and_matches_exact_hvp() {
        let ds = gen_blobs(16, 3, 3, 1.0, 9).unwrap();
        let model = Model::new(ModelSpec::mlp(3, &[5, 4], 3, 0)).unwrap();
        let ids: Vec<usize> = (0..8).collect();
        for seed in 0..5 {
            let theta = random_theta(&model, 10 + seed);
            let v1 = random_theta(&model, 20 + seed);
            let v2 = random_theta(&model, 30 + seed);
            let h1 = model.hvp_fd(&theta, &ds, &ids, &v1, 1e-5).unwrap();
            let h2 = model.hvp_fd(&theta, &ds, &ids, &v2, 1e-5).unwrap();
            assert!((math::dot(&v2, &h1) - math::dot(&v1, &h2)).abs() < 1e-6);
            let exact = model.hvp(&theta, &ds, &ids, &v1).unwrap();
            assert!(math::rel_l2_error(&h1, &exact) < 1e-6, "seed {seed}");
        }
    }
}
