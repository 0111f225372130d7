//! Client-side state and local SGD.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl::data::Shard;
use crate::fl::model::{Model, Objective};
use crate::quantize::GradientEnvelope;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    /// Local iterations `I` per round.
    pub steps: usize,
    pub eta: f64,
    /// Mini-batch size, sampled with replacement. Larger batches shrink the
    /// stochastic-gradient variance to `sigma^2 / batch`.
    pub batch: usize,
}

/// What happened during one call to [`local_sgd`].
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrace {
    /// Mini-batch loss before each step.
    pub batch_losses: Vec<f64>,
    /// Coordinate bounds on the accumulated gradient of these steps.
    pub envelope: GradientEnvelope,
}

/// Runs `cfg.steps` mini-batch SGD steps `theta <- theta - eta * grad`.
pub fn local_sgd<O: Objective + ?Sized, R: Rng + ?Sized>(
    objective: &O,
    params: &mut [f64],
    cfg: &SgdConfig,
    rng: &mut R,
) -> Result<LocalTrace> {
    let n = objective.num_samples();
    if n == 0 {
        return Err(Error::EmptyShard);
    }
    if cfg.steps == 0 || cfg.batch == 0 || !(cfg.eta > 0.0) {
        return Err(Error::InvalidParams(format!(
            "need steps >= 1, batch >= 1, eta > 0 (got {cfg:?})"
        )));
    }
    let d = params.len();
    let mut grad = vec![0.0; d];
    let mut batch = vec![0usize; cfg.batch];
    let mut hi = vec![f64::NEG_INFINITY; d];
    let mut lo = vec![f64::INFINITY; d];
    let mut batch_losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        for b in batch.iter_mut() {
            *b = rng.random_range(0..n);
        }
        batch_losses.push(objective.loss_and_grad(params, &batch, &mut grad));
        for j in 0..d {
            hi[j] = hi[j].max(grad[j]);
            lo[j] = lo[j].min(grad[j]);
            params[j] -= cfg.eta * grad[j];
        }
    }
    let steps = cfg.steps as f64;
    Ok(LocalTrace {
        batch_losses,
        envelope: GradientEnvelope::new(
            hi.into_iter().map(|v| v * steps).collect(),
            lo.into_iter().map(|v| v * steps).collect(),
        ),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub shard: Shard,
    /// Current local model.
    pub model: Vec<f64>,
    /// Last global model successfully received from the server.
    pub last_sync: Vec<f64>,
}

impl ClientState {
    pub fn new(id: usize, shard: Shard, global: &[f64]) -> Self {
        Self {
            id,
            shard,
            model: global.to_vec(),
            last_sync: global.to_vec(),
        }
    }

    pub fn weight(&self) -> f64 {
        self.shard.weight
    }

    /// Adopts a broadcast global model.
    pub fn sync(&mut self, global: &[f64]) {
        self.model.copy_from_slice(global);
        self.last_sync.copy_from_slice(global);
    }

    pub fn train<R: Rng + ?Sized>(
        &mut self,
        model: &Model,
        cfg: &SgdConfig,
        rng: &mut R,
    ) -> Result<LocalTrace> {
        let objective = model.objective(&self.shard.data);
        local_sgd(&objective, &mut self.model, cfg, rng)
    }

    /// Current model minus the last synced global model; spans every local
    /// step taken since the last successful broadcast.
    pub fn update_delta(&self) -> Vec<f64> {
        self.model
            .iter()
            .zip(&self.last_sync)
            .map(|(m, s)| m - s)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::data::{synthetic_blobs, Dataset};
    use crate::fl::model::ModelKind;
    use crate::rng;

    /// `F(theta) = 0.5 theta^2` on one dummy sample.
    struct Quadratic;

    impl Objective for Quadratic {
        fn num_samples(&self) -> usize {
            1
        }
        fn param_count(&self) -> usize {
            1
        }
        fn loss_and_grad(&self, p: &[f64], _: &[usize], g: &mut [f64]) -> f64 {
            g[0] = p[0];
            0.5 * p[0] * p[0]
        }
    }

    struct Flat;

    impl Objective for Flat {
        fn num_samples(&self) -> usize {
            3
        }
        fn param_count(&self) -> usize {
            2
        }
        fn loss_and_grad(&self, _: &[f64], _: &[usize], g: &mut [f64]) -> f64 {
            g.iter_mut().for_each(|v| *v = 0.0);
            1.0
        }
    }

    fn cfg(steps: usize, eta: f64) -> SgdConfig {
        SgdConfig {
            steps,
            eta,
            batch: 1,
        }
    }

    #[test]
    fn quadratic_step() {
        let mut theta = vec![1.0];
        local_sgd(
            &Quadratic,
            &mut theta,
            &cfg(1, 0.1),
            &mut rng::stream(0, &[]),
        )
        .unwrap();
        assert!((theta[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn flat_loss_leaves_model_alone() {
        let mut theta = vec![0.3, -2.0];
        local_sgd(&Flat, &mut theta, &cfg(17, 0.5), &mut rng::stream(0, &[])).unwrap();
        assert_eq!(theta, vec![0.3, -2.0]);
    }

    #[test]
    fn empty_shard_is_an_error() {
        let model = Model::new(ModelKind::Logistic, 2, 2);
        let empty = Dataset::new(2, 2, vec![], vec![]);
        let obj = model.objective(&empty);
        let mut p = model.init(0);
        assert!(matches!(
            local_sgd(&obj, &mut p, &cfg(1, 0.1), &mut rng::stream(0, &[])),
            Err(Error::EmptyShard)
        ));
    }

    #[test]
    fn logistic_full_batch_loss_decreases() {
        let data = synthetic_blobs(200, 4, 2, 3.0, 1.0, 6);
        let model = Model::new(ModelKind::Logistic, 4, 2);
        let obj = model.objective(&data);
        let mut p = model.init(0);
        let mut prev = obj.full_loss(&p);
        let step = SgdConfig {
            steps: 1,
            eta: 0.05,
            batch: 200,
        };
        let mut r = rng::stream(1, &[]);
        for _ in 0..5 {
            local_sgd(&obj, &mut p, &step, &mut r).unwrap();
            let now = obj.full_loss(&p);
            assert!(now < prev, "{now} >= {prev}");
            prev = now;
        }
    }

    #[test]
    fn delta_tracks_last_sync() {
        let shard = Shard {
            data: Dataset::new(1, 1, vec![0.0], vec![0]),
            weight: 1.0,
        };
        let mut c = ClientState::new(0, shard, &[1.0]);
        assert_eq!(c.update_delta(), vec![0.0]);
        local_sgd(
            &Quadratic,
            &mut c.model,
            &cfg(1, 0.1),
            &mut rng::stream(0, &[]),
        )
        .unwrap();
        assert!((c.update_delta()[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn delta_telescopes_across_unsynced_rounds() {
        let data = synthetic_blobs(50, 3, 3, 2.0, 1.0, 2);
        let model = Model::new(ModelKind::Logistic, 3, 3);
        let shard = Shard { data, weight: 1.0 };
        let start = model.init(0);
        let mut c = ClientState::new(0, shard, &start);
        let step = SgdConfig {
            steps: 5,
            eta: 0.1,
            batch: 8,
        };
        let mut per_round = vec![0.0; start.len()];
        for round in 0..3 {
            let before = c.model.clone();
            c.train(&model, &step, &mut rng::stream(4, &[round]))
                .unwrap();
            for j in 0..start.len() {
                per_round[j] += c.model[j] - before[j];
            }
        }
        for (a, b) in c.update_delta().iter().zip(&per_round) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
