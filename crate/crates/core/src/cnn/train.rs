//! Losses, the ADAM optimizer and the early-stopping training loop.

use super::tensor::Tensor;
use super::{snap_f32, Network, ParamTensor};
use crate::error::{Error, Result};

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Mae,
    /// Sum of MSE and MAE.
    Mix,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "mae" => Ok(LossKind::Mae),
            "mix" => Ok(LossKind::Mix),
            other => Err(Error::InvalidArgument(format!("unknown loss '{other}'"))),
        }
    }
}

/// Mean squared error, mean absolute error, or their sum.
pub fn loss(pred: &Tensor, target: &Tensor, kind: LossKind) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {} x {:?} vs target {} x {:?}",
            pred.channels, pred.dims, target.channels, target.dims
        )));
    }
    let n = pred.data.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (&p, &t) in pred.data.iter().zip(&target.data) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
    }
    Ok(match kind {
        LossKind::Mse => se / n,
        LossKind::Mae => ae / n,
        LossKind::Mix => se / n + ae / n,
    })
}

/// Gradient of [`loss`] with respect to the prediction, scaled by
/// `sample_scale` (1 / batch size when averaging over a batch).
pub(crate) fn loss_gradient(
    pred: &Tensor,
    target: &Tensor,
    kind: LossKind,
    sample_scale: f64,
) -> Result<Tensor> {
    if !pred.same_shape(target) {
        return Err(Error::ShapeMismatch("loss gradient shape mismatch".into()));
    }
    let n = pred.data.len() as f64;
    let data = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &t)| {
            let d = p - t;
            let g = match kind {
                LossKind::Mse => 2.0 * d / n,
                LossKind::Mae => d.signum() * if d == 0.0 { 0.0 } else { 1.0 } / n,
                LossKind::Mix => 2.0 * d / n + d.signum() * if d == 0.0 { 0.0 } else { 1.0 } / n,
            };
            g * sample_scale
        })
        .collect();
    Ok(Tensor {
        channels: pred.channels,
        dims: pred.dims,
        data,
    })
}

/// ADAM hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(net: &Network) -> AdamState {
        AdamState {
            m: net.params().iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: net.params().iter().map(|p| vec![0.0; p.data.len()]).collect(),
            t: 0,
        }
    }

    /// One bias-corrected update; parameters are snapped back onto the f32
    /// grid afterwards.
    pub fn step(
        &mut self,
        params: &mut [ParamTensor],
        grads: &[Vec<f64>],
        cfg: &AdamConfig,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::ShapeMismatch(
                "gradient count does not match parameter tensors".into(),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.data.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] = snap_f32(p.data[i] - cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps));
            }
        }
        Ok(())
    }
}

/// Knobs of the training loop.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub adam: AdamConfig,
    pub loss: LossKind,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub seed: u64,
    /// Target number of training pairs a sampler should produce per epoch.
    pub patches_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            max_epochs: 300,
            adam: AdamConfig::default(),
            loss: LossKind::Mix,
            patience: 10,
            seed: 0,
            patches_per_epoch: 1024,
        }
    }
}

/// One line of the training history.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Result of [`train`]: the best-validation network and the loss history.
#[derive(Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub history: Vec<EpochStats>,
}

fn mean_loss(net: &Network, pairs: &[(Tensor, Tensor)], kind: LossKind, chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    for group in pairs.chunks(chunk.max(1)) {
        let inputs: Vec<Tensor> = group.iter().map(|(i, _)| i.clone()).collect();
        let outs = net.forward_batch(&inputs)?;
        for (out, (_, target)) in outs.iter().zip(group) {
            total += loss(out, target, kind)?;
        }
    }
    Ok(total / pairs.len() as f64)
}

/// Trains until `max_epochs` or until validation loss has not improved for
/// `patience` consecutive epochs; returns the weights of the best epoch.
///
/// `generator` is called once per epoch (1-based) and must yield that epoch's
/// training pairs in a deterministic order.
pub fn train<G>(
    net: Network,
    mut generator: G,
    validation: &[(Tensor, Tensor)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome>
where
    G: FnMut(usize) -> Vec<(Tensor, Tensor)>,
{
    if validation.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.patience == 0 {
        return Err(Error::InvalidArgument(
            "batch_size and patience must be >= 1".into(),
        ));
    }
    let mut net = net;
    let mut adam = AdamState::new(&net);
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_params: Option<Vec<ParamTensor>> = None;
    let mut stale = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let pairs = generator(epoch);
        if pairs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "training generator produced no pairs at epoch {epoch}"
            )));
        }
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in pairs.chunks(cfg.batch_size) {
            let batch_loss = net
                .backward_and_step(batch, &mut adam, &cfg.adam, cfg.loss)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { epoch },
                    other => other,
                })?;
            loss_sum += batch_loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = loss_sum / seen as f64;
        let val_loss = mean_loss(&net, validation, cfg.loss, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_params = Some(net.params().to_vec());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let spec = net.spec().to_vec();
    let network = match best_params {
        Some(params) => Network::from_parts(spec, params)?,
        None => net,
    };
    Ok(TrainOutcome { network, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::{architecture, NormKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor_of(data: Vec<f64>) -> Tensor {
        Tensor::from_patch(data, 2).unwrap()
    }

    #[test]
    fn loss_zero_when_equal() {
        let a = tensor_of(vec![1.0; 8]);
        for kind in [LossKind::Mse, LossKind::Mae, LossKind::Mix] {
            assert_eq!(loss(&a, &a, kind).unwrap(), 0.0);
        }
    }

    #[test]
    fn loss_constant_residual() {
        let pred = tensor_of(vec![3.0; 8]);
        let target = tensor_of(vec![1.0; 8]);
        assert_eq!(loss(&pred, &target, LossKind::Mse).unwrap(), 4.0);
        assert_eq!(loss(&pred, &target, LossKind::Mae).unwrap(), 2.0);
        assert_eq!(loss(&pred, &target, LossKind::Mix).unwrap(), 6.0);
    }

    #[test]
    fn mix_dominates_both() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let pred = tensor_of((0..8).map(|_| rng.random_range(-2.0..2.0)).collect());
            let target = tensor_of((0..8).map(|_| rng.random_range(-2.0..2.0)).collect());
            let mse = loss(&pred, &target, LossKind::Mse).unwrap();
            let mae = loss(&pred, &target, LossKind::Mae).unwrap();
            let mix = loss(&pred, &target, LossKind::Mix).unwrap();
            assert!(mix >= mse.max(mae));
        }
    }

    #[test]
    fn loss_shape_mismatch_errors() {
        let a = tensor_of(vec![0.0; 8]);
        let b = Tensor::from_patch(vec![0.0; 27], 3).unwrap();
        assert!(loss(&a, &b, LossKind::Mse).is_err());
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // minimize (w - 3)^2 for a single parameter
        let mut params = vec![ParamTensor {
            dims: vec![1],
            data: vec![0.0],
        }];
        let mut adam = AdamState {
            m: vec![vec![0.0]],
            v: vec![vec![0.0]],
            t: 0,
        };
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        for _ in 0..2000 {
            let w = params[0].data[0];
            let grad = vec![vec![2.0 * (w - 3.0)]];
            adam.step(&mut params, &grad, &cfg).unwrap();
        }
        assert!(
            (params[0].data[0] - 3.0).abs() < 1e-3,
            "ended at {}",
            params[0].data[0]
        );
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let mut net = Network::init(architecture(3, 1, NormKind::Instance), 2).unwrap();
        let before: Vec<ParamTensor> = net.params().to_vec();
        let mut adam = AdamState::new(&net);
        let cfg = AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        };
        let input = Tensor::from_patch(vec![0.3; 216], 6).unwrap();
        let target = Tensor::from_patch(vec![0.1; 216], 6).unwrap();
        net.backward_and_step(&[(input, target)], &mut adam, &cfg, LossKind::Mix)
            .unwrap();
        for (a, b) in net.params().iter().zip(&before) {
            assert_eq!(a.data, b.data);
        }
    }

    fn toy_pairs(seed: u64, count: usize) -> Vec<(Tensor, Tensor)> {
        // learnable toy task: target is the input low-pass residual
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let smooth: Vec<f64> = {
                    let a = rng.random_range(-1.0..1.0);
                    let b = rng.random_range(-0.2..0.2);
                    (0..216)
                        .map(|i| a + b * ((i % 6) as f64 / 6.0))
                        .collect()
                };
                let noise: Vec<f64> = (0..216).map(|_| rng.random_range(-0.5..0.5)).collect();
                let noisy: Vec<f64> = smooth.iter().zip(&noise).map(|(s, n)| s + n).collect();
                (
                    Tensor::from_patch(noisy, 6).unwrap(),
                    Tensor::from_patch(noise, 6).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn early_stop_returns_first_epoch_weights() {
        // a generator whose pairs get worse makes validation loss climb; a
        // frozen seeded network trained with lr 0 would not, so instead use a
        // validation set that epoch-1 weights fit best by construction: train
        // normally but with patience 1 and an adversarial schedule.
        let net = Network::init(architecture(2, 0, NormKind::Instance), 4).unwrap();
        let val = toy_pairs(99, 8);
        let cfg = TrainConfig {
            batch_size: 4,
            max_epochs: 50,
            patience: 1,
            adam: AdamConfig {
                // huge steps make the loss diverge immediately after epoch 1
                learning_rate: 10.0,
                ..AdamConfig::default()
            },
            loss: LossKind::Mse,
            seed: 0,
            patches_per_epoch: 8,
        };
        let outcome = train(net, |e| toy_pairs(e as u64, 8), &val, &cfg).unwrap();
        // must have stopped early and returned the best (first) epoch
        let best = outcome
            .history
            .iter()
            .cloned()
            .fold(f64::INFINITY, |acc, s| acc.min(s.val_loss));
        assert!(outcome.history.len() < 50);
        assert_eq!(best, outcome.history[0].val_loss);
        // returned network reproduces the recorded best validation loss
        let reproduced = mean_loss(&outcome.network, &val, LossKind::Mse, 4).unwrap();
        assert!((reproduced - best).abs() < 1e-12);
    }

    #[test]
    fn zero_targets_approach_zero_predictor() {
        let net = Network::init(architecture(2, 1, NormKind::Instance), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mk = |rng: &mut ChaCha8Rng| {
            let input: Vec<f64> = (0..216).map(|_| rng.random_range(-1.0..1.0)).collect();
            (
                Tensor::from_patch(input, 6).unwrap(),
                Tensor::from_patch(vec![0.0; 216], 6).unwrap(),
            )
        };
        let val: Vec<_> = (0..8).map(|_| mk(&mut rng)).collect();
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 60,
            patience: 60,
            loss: LossKind::Mse,
            adam: AdamConfig {
                learning_rate: 1e-2,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let outcome = train(
            net,
            |e| {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + e as u64);
                (0..32).map(|_| mk(&mut rng)).collect()
            },
            &val,
            &cfg,
        )
        .unwrap();
        // the zero predictor achieves 0 on zero targets; training must get close
        let last = outcome.history.last().unwrap();
        let first = &outcome.history[0];
        assert!(last.val_loss < first.val_loss);
        assert!(last.val_loss < 0.05, "val loss {}", last.val_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let net = Network::init(architecture(2, 1, NormKind::Instance), 11).unwrap();
            let val = toy_pairs(500, 8);
            let cfg = TrainConfig {
                batch_size: 8,
                max_epochs: 5,
                patience: 5,
                loss: LossKind::Mix,
                ..TrainConfig::default()
            };
            train(net, |e| toy_pairs(e as u64, 16), &val, &cfg)
                .unwrap()
                .history
                .iter()
                .map(|s| (s.train_loss, s.val_loss))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_generator_errors() {
        let net = Network::init(architecture(2, 0, NormKind::Instance), 0).unwrap();
        let val = toy_pairs(1, 4);
        let cfg = TrainConfig::default();
        assert!(train(net, |_| Vec::new(), &val, &cfg).is_err());
    }

    #[test]
    fn toy_training_beats_zero_predictor() {
        // residual-learning toy: predict the noise inside a noisy patch
        let net = Network::init(architecture(4, 1, NormKind::Instance), 21).unwrap();
        let val = toy_pairs(900, 16);
        let cfg = TrainConfig {
            batch_size: 16,
            max_epochs: 80,
            patience: 80,
            loss: LossKind::Mix,
            adam: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let zero_loss: f64 = val
            .iter()
            .map(|(_, t)| {
                let z = Tensor::zeros(t.channels, t.dims);
                loss(&z, t, LossKind::Mix).unwrap()
            })
            .sum::<f64>()
            / val.len() as f64;
        let outcome = train(net, |e| toy_pairs(e as u64 * 31 + 7, 32), &val, &cfg).unwrap();
        let best = outcome
            .history
            .iter()
            .map(|s| s.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert!(
            best < 0.8 * zero_loss,
            "best val {best} vs zero predictor {zero_loss}"
        );
    }
}
