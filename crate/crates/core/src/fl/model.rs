//! Classifiers trained by the clients: multinomial logistic regression and a
//! one-hidden-layer ReLU MLP, both with softmax cross-entropy loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::fl::data::Dataset;
use crate::rng::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelKind {
    #[default]
    Logistic,
    Mlp {
        hidden: usize,
    },
}

/// Architecture of a classifier; parameters live in flat `Vec<f64>`s.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Model {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub classes: usize,
}

/// A differentiable training loss over an indexable set of samples.
pub trait Objective {
    fn num_samples(&self) -> usize;

    fn param_count(&self) -> usize;

    /// Mean loss over `batch`; writes the mean gradient into `grad`.
    fn loss_and_grad(&self, params: &[f64], batch: &[usize], grad: &mut [f64]) -> f64;

    fn full_loss(&self, params: &[f64]) -> f64 {
        let all: Vec<usize> = (0..self.num_samples()).collect();
        let mut scratch = vec![0.0; self.param_count()];
        self.loss_and_grad(params, &all, &mut scratch)
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

impl Model {
    pub fn new(kind: ModelKind, input_dim: usize, classes: usize) -> Self {
        Self {
            kind,
            input_dim,
            classes,
        }
    }

    pub fn param_count(&self) -> usize {
        let (d, c) = (self.input_dim, self.classes);
        match self.kind {
            ModelKind::Logistic => c * d + c,
            ModelKind::Mlp { hidden: h } => h * d + h + c * h + c,
        }
    }

    /// Logistic regression starts at zero; the MLP gets a seeded uniform
    /// fan-in initialisation of its weights.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut params = vec![0.0; self.param_count()];
        if let ModelKind::Mlp { hidden: h } = self.kind {
            let (d, c) = (self.input_dim, self.classes);
            let mut r = rng::stream(seed, &[domain::MODEL_INIT]);
            let lim1 = (1.0 / d as f64).sqrt();
            for w in &mut params[..h * d] {
                *w = r.random_range(-lim1..lim1);
            }
            let lim2 = (1.0 / h as f64).sqrt();
            let w2 = h * d + h;
            for w in &mut params[w2..w2 + c * h] {
                *w = r.random_range(-lim2..lim2);
            }
        }
        params
    }

    /// Class probabilities for one input; `hidden` is scratch for the MLP.
    fn forward(&self, params: &[f64], x: &[f64], hidden: &mut Vec<f64>, probs: &mut [f64]) {
        let (d, c) = (self.input_dim, self.classes);
        match self.kind {
            ModelKind::Logistic => {
                let (w, b) = params.split_at(c * d);
                for k in 0..c {
                    probs[k] = b[k] + dot(&w[k * d..(k + 1) * d], x);
                }
            }
            ModelKind::Mlp { hidden: h } => {
                let (w1, rest) = params.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                hidden.clear();
                hidden.extend((0..h).map(|j| (b1[j] + dot(&w1[j * d..(j + 1) * d], x)).max(0.0)));
                for k in 0..c {
                    probs[k] = b2[k] + dot(&w2[k * h..(k + 1) * h], hidden);
                }
            }
        }
        softmax_in_place(probs);
    }

    /// Adds the gradient of `-log p_label` for one sample into `grad`.
    fn accumulate_grad(
        &self,
        params: &[f64],
        x: &[f64],
        label: usize,
        hidden: &mut Vec<f64>,
        probs: &mut [f64],
        grad: &mut [f64],
    ) -> f64 {
        let (d, c) = (self.input_dim, self.classes);
        self.forward(params, x, hidden, probs);
        let loss = -probs[label].max(1e-300).ln();
        probs[label] -= 1.0;
        match self.kind {
            ModelKind::Logistic => {
                let (gw, gb) = grad.split_at_mut(c * d);
                for k in 0..c {
                    axpy(probs[k], x, &mut gw[k * d..(k + 1) * d]);
                    gb[k] += probs[k];
                }
            }
            ModelKind::Mlp { hidden: h } => {
                let w2 = &params[h * d + h..h * d + h + c * h];
                let (gw1, rest) = grad.split_at_mut(h * d);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(c * h);
                let mut back = vec![0.0; h];
                for k in 0..c {
                    axpy(probs[k], hidden, &mut gw2[k * h..(k + 1) * h]);
                    gb2[k] += probs[k];
                    axpy(probs[k], &w2[k * h..(k + 1) * h], &mut back);
                }
                for j in 0..h {
                    if hidden[j] > 0.0 {
                        axpy(back[j], x, &mut gw1[j * d..(j + 1) * d]);
                        gb1[j] += back[j];
                    }
                }
            }
        }
        loss
    }

    pub fn predict(&self, params: &[f64], x: &[f64]) -> usize {
        let mut hidden = Vec::new();
        let mut probs = vec![0.0; self.classes];
        self.forward(params, x, &mut hidden, &mut probs);
        argmax(&probs)
    }

    pub fn objective<'a>(&'a self, data: &'a Dataset) -> ShardObjective<'a> {
        ShardObjective { model: self, data }
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Cross-entropy of a model over one client's shard.
pub struct ShardObjective<'a> {
    model: &'a Model,
    data: &'a Dataset,
}

impl Objective for ShardObjective<'_> {
    fn num_samples(&self) -> usize {
        self.data.len()
    }

    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    fn loss_and_grad(&self, params: &[f64], batch: &[usize], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut hidden = Vec::new();
        let mut probs = vec![0.0; self.model.classes];
        let mut loss = 0.0;
        for &i in batch {
            loss += self.model.accumulate_grad(
                params,
                self.data.sample(i),
                self.data.labels[i],
                &mut hidden,
                &mut probs,
                grad,
            );
        }
        let scale = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        loss * scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy and mean cross-entropy on a held-out set.
pub fn evaluate(model: &Model, params: &[f64], test: &Dataset) -> Evaluation {
    let mut hidden = Vec::new();
    let mut probs = vec![0.0; model.classes];
    let (mut correct, mut loss) = (0usize, 0.0);
    for i in 0..test.len() {
        model.forward(params, test.sample(i), &mut hidden, &mut probs);
        let label = test.labels[i];
        loss -= probs[label].max(1e-300).ln();
        correct += (argmax(&probs) == label) as usize;
    }
    let n = test.len().max(1) as f64;
    Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::data::synthetic_blobs;

    fn finite_difference_check(model: Model) {
        let data = synthetic_blobs(12, model.input_dim, model.classes, 2.0, 1.0, 4);
        let obj = model.objective(&data);
        let mut params = model.init(3);
        let mut r = rng::stream(8, &[]);
        for p in params.iter_mut() {
            *p += r.random_range(-0.3..0.3);
        }
        let batch: Vec<usize> = (0..12).collect();
        let mut grad = vec![0.0; model.param_count()];
        obj.loss_and_grad(&params, &batch, &mut grad);
        let mut scratch = grad.clone();
        let h = 1e-6;
        for j in 0..params.len() {
            let orig = params[j];
            params[j] = orig + h;
            let up = obj.loss_and_grad(&params, &batch, &mut scratch);
            params[j] = orig - h;
            let down = obj.loss_and_grad(&params, &batch, &mut scratch);
            params[j] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - grad[j]).abs() < 1e-6 * (1.0 + fd.abs()),
                "param {j}: {fd} vs {}",
                grad[j]
            );
        }
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        finite_difference_check(Model::new(ModelKind::Logistic, 5, 4));
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        finite_difference_check(Model::new(ModelKind::Mlp { hidden: 6 }, 5, 3));
    }

    #[test]
    fn oracle_weights_classify_separable_data() {
        // two classes on opposite sides of x0 = 0
        let features = vec![1.0, 0.2, 2.0, -0.5, -1.5, 0.3, -0.7, 1.0];
        let data = Dataset::new(2, 2, features, vec![0, 0, 1, 1]);
        let model = Model::new(ModelKind::Logistic, 2, 2);
        let params = vec![5.0, 0.0, -5.0, 0.0, 0.0, 0.0];
        let e = evaluate(&model, &params, &data);
        assert_eq!(e.accuracy, 1.0);
    }

    #[test]
    fn random_labels_give_chance_accuracy() {
        let n = 5000;
        let mut data = synthetic_blobs(n, 8, 10, 2.0, 1.0, 1);
        let mut r = rng::stream(2, &[]);
        for l in data.labels.iter_mut() {
            *l = r.random_range(0..10);
        }
        let model = Model::new(ModelKind::Mlp { hidden: 16 }, 8, 10);
        let e = evaluate(&model, &model.init(5), &data);
        let sd = (0.1 * 0.9 / n as f64).sqrt();
        assert!((e.accuracy - 0.1).abs() < 3.0 * sd, "{}", e.accuracy);
    }
}
