//! Mini-batch training: MSE loss on the standardized target, Adam updates,
//! a seeded epoch loop, and checkpoint persistence.
//!
//! The loss always lives in standardized space (windows are cut from the
//! standardized frame); original-unit metrics belong to the evaluation
//! module and are never mixed in here.

pub mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::WindowSample;
use crate::model::{ModelError, PvClient};
use crate::tensor::{Tape, Tensor, TensorError, TensorId};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training windows provided")]
    NoWindows,
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("loss length mismatch: prediction has {pred} values, target has {target}")]
    LossLength { pred: usize, target: usize },
    #[error("optimizer state holds {state} buffers but {params} parameters were given")]
    StateMismatch { state: usize, params: usize },
    #[error("gradient for {name} has {grad} values, parameter has {param}")]
    GradShape {
        name: String,
        grad: usize,
        param: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Optimization hyperparameters. Defaults: lr 1e-3, batch 128, 10 epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global-L2 gradient clip threshold; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 10,
            seed: 42,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(TrainError::BadConfig(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(TrainError::BadConfig(format!(
                    "grad_clip must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Mean squared error between a tape value and a plain target, as a
/// differentiable scalar on the tape.
pub fn mse_loss(tape: &mut Tape, pred: TensorId, target: &[f64]) -> Result<TensorId> {
    let shape = tape.shape(pred).to_vec();
    let n: usize = shape.iter().product();
    if n != target.len() {
        return Err(TrainError::LossLength {
            pred: n,
            target: target.len(),
        });
    }
    let t = Tensor::new(shape, target.to_vec()).map_err(TrainError::Tensor)?;
    let t_id = tape.constant(&t);
    let diff = tape.sub(pred, t_id)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// First/second-moment buffers and the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(param_sizes: &[usize]) -> Self {
        AdamState {
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_model(model: &PvClient) -> Self {
        Self::new(
            &model
                .named_params()
                .iter()
                .map(|(_, t)| t.numel())
                .collect::<Vec<_>>(),
        )
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over a parameter table. `params` and `grads` are
/// parallel; the bias-correction step counter is shared across the table.
pub fn adam_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != state.m.len() || params.len() != grads.len() {
        return Err(TrainError::StateMismatch {
            state: state.m.len(),
            params: params.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (name, p)) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.len() != p.numel() || state.m[i].len() != p.numel() {
            return Err(TrainError::GradShape {
                name: name.clone(),
                grad: g.len(),
                param: p.numel(),
            });
        }
        let data = p.data_mut();
        for k in 0..g.len() {
            let m = &mut state.m[i][k];
            let v = &mut state.v[i][k];
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g[k];
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g[k] * g[k];
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            data[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Scales the whole gradient set so its global L2 norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Window-weighted mean of the batch losses (standardized units).
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

/// Runs the epoch loop in place: seeded shuffle, batches of
/// `cfg.batch_size` (last partial batch kept), one Adam step per batch.
/// All parameters — including the combination weights — update jointly.
pub fn train(model: &mut PvClient, windows: &[WindowSample], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(TrainError::NoWindows);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::for_model(model);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch_loss = train_batch(model, windows, chunk, &mut adam, cfg)?;
            loss_sum += batch_loss * chunk.len() as f64;
        }
        log.epochs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / windows.len() as f64,
        });
    }
    Ok(log)
}

/// Forward + backward over one batch on a fresh tape, then a single Adam
/// step. Returns the batch mean loss.
fn train_batch(
    model: &mut PvClient,
    windows: &[WindowSample],
    idx: &[usize],
    adam: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let hs: Vec<Tensor> = idx.iter().map(|&i| windows[i].h.clone()).collect();
    let (passes, named) = model.forward_batch_on_tape(&mut tape, &hs)?;
    let mut acc: Option<TensorId> = None;
    for (fp, &i) in passes.iter().zip(idx) {
        let l = mse_loss(&mut tape, fp.output, &windows[i].g)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    let mean = tape.scale(acc.expect("nonempty batch"), 1.0 / idx.len() as f64);
    tape.backward(mean)?;

    // Parameters untouched by this variant's graph (no grad node) get an
    // explicit zero gradient so the optimizer state stays aligned.
    let mut grads: Vec<Vec<f64>> = named
        .iter()
        .map(|(_, id)| match tape.grad(*id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(*id).len()],
        })
        .collect();
    if let Some(max_norm) = cfg.grad_clip {
        clip_global_norm(&mut grads, max_norm);
    }

    let mut params = model.named_params_mut();
    debug_assert!(
        params.len() == named.len()
            && params.iter().zip(&named).all(|((a, _), (b, _))| a == b),
        "bound leaf table must match the canonical parameter table"
    );
    adam_step(&mut params, &grads, adam, cfg.learning_rate)?;
    Ok(tape.value(mean)[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, VariantFlags};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            l: 8,
            t: 2,
            c: 3,
            num_blocks: 1,
            d_model: 8,
            heads: 2,
            embed_dim: 8,
            target_channel: 0,
            radiation_channel: 1,
        }
    }

    /// Smooth deterministic windows matching `tiny_config`.
    fn tiny_windows(count: usize) -> Vec<WindowSample> {
        let cfg = tiny_config();
        (0..count)
            .map(|w| {
                let h = Tensor::matrix(
                    cfg.l,
                    cfg.c,
                    (0..cfg.l * cfg.c)
                        .map(|i| ((i + 7 * w) as f64 * 0.37).sin())
                        .collect(),
                )
                .unwrap();
                let g = (0..cfg.t).map(|j| ((w + j) as f64 * 0.53).cos()).collect();
                WindowSample {
                    h,
                    g,
                    start_index: w,
                }
            })
            .collect()
    }

    #[test]
    fn mse_of_identical_series_is_zero() {
        let mut tape = Tape::new();
        let p = tape.constant(&Tensor::vector(vec![1.0, -2.0, 3.5]));
        let l = mse_loss(&mut tape, p, &[1.0, -2.0, 3.5]).unwrap();
        assert_eq!(tape.value(l), &[0.0]);
    }

    #[test]
    fn mse_hand_case() {
        // Differences [3, −3] over two points → (9+9)/2 = 9.
        let mut tape = Tape::new();
        let p = tape.constant(&Tensor::vector(vec![4.0, -1.0]));
        let l = mse_loss(&mut tape, p, &[1.0, 2.0]).unwrap();
        assert_eq!(tape.value(l), &[9.0]);
    }

    #[test]
    fn mse_length_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.constant(&Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            mse_loss(&mut tape, p, &[1.0, 2.0, 3.0]),
            Err(TrainError::LossLength { pred: 2, target: 3 })
        ));
    }

    #[test]
    fn mse_gradient_matches_closed_form() {
        let pred = vec![0.3, -1.1, 2.4, 0.0];
        let target = vec![1.0, -1.0, 2.0, 0.5];
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::vector(pred.clone()).with_grad());
        let l = mse_loss(&mut tape, p, &target).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(p).unwrap();
        for k in 0..pred.len() {
            let expect = 2.0 * (pred[k] - target[k]) / pred.len() as f64;
            assert!((g[k] - expect).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn adam_with_zero_gradient_leaves_parameters_alone() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 0.5]).with_grad();
        let before = p.data().to_vec();
        let mut state = AdamState::new(&[3]);
        let mut table = vec![("p".to_string(), &mut p)];
        adam_step(&mut table, &[vec![0.0; 3]], &mut state, 1e-3).unwrap();
        assert_eq!(p.data(), &before[..]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_is_minus_lr_for_unit_gradient() {
        // Bias correction makes m̂ = v̂ = 1, so Δp = −lr/(1+eps) ≈ −lr.
        let mut p = Tensor::scalar(0.7).with_grad();
        let mut state = AdamState::new(&[1]);
        let mut table = vec![("p".to_string(), &mut p)];
        adam_step(&mut table, &[vec![1.0]], &mut state, 1e-3).unwrap();
        let delta = p.data()[0] - 0.7;
        assert!((delta + 1e-3).abs() < 1e-9, "delta {delta}");
    }

    #[test]
    fn adam_descends_a_quadratic_strictly() {
        // f(p) = p² from p=1: the analytic gradient 2p keeps |p| shrinking
        // every step at the default rate.
        let mut p = Tensor::scalar(1.0).with_grad();
        let mut state = AdamState::new(&[1]);
        let mut prev = 1.0f64;
        for _ in 0..50 {
            let g = 2.0 * p.data()[0];
            let mut table = vec![("p".to_string(), &mut p)];
            adam_step(&mut table, &[vec![g]], &mut state, 1e-3).unwrap();
            let now: f64 = p.data()[0];
            assert!(now.abs() < prev.abs(), "step did not shrink |p|");
            prev = now;
        }
        assert!(prev > 0.9 && prev < 0.96, "final p {prev}");
    }

    #[test]
    fn adam_shape_mismatch_names_the_parameter() {
        let mut p = Tensor::vector(vec![1.0, 2.0]).with_grad();
        let mut state = AdamState::new(&[2]);
        let mut table = vec![("proj.weight".to_string(), &mut p)];
        match adam_step(&mut table, &[vec![1.0]], &mut state, 1e-3) {
            Err(TrainError::GradShape { name, grad, param }) => {
                assert_eq!(name, "proj.weight");
                assert_eq!((grad, param), (1, 2));
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn clip_rescales_only_above_the_threshold() {
        let mut grads = vec![vec![3.0, 0.0], vec![4.0]];
        let norm = clip_global_norm(&mut grads, 10.0);
        assert_eq!(norm, 5.0);
        assert_eq!(grads, vec![vec![3.0, 0.0], vec![4.0]]);
        let norm = clip_global_norm(&mut grads, 1.0);
        assert_eq!(norm, 5.0);
        let new_norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| x * x)
            .sum::<f64>()
            .sqrt();
        assert!((new_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut model = PvClient::new(tiny_config(), VariantFlags::default(), 9).unwrap();
        let before: Vec<Vec<f64>> = model
            .named_params()
            .iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 4,
            epochs: 2,
            seed: 1,
            grad_clip: None,
        };
        train(&mut model, &tiny_windows(6), &cfg).unwrap();
        for ((_, t), b) in model.named_params().iter().zip(&before) {
            assert_eq!(t.data(), &b[..]);
        }
    }

    #[test]
    fn same_seed_gives_identical_trajectories() {
        let windows = tiny_windows(10);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 3,
            epochs: 3,
            seed: 5,
            grad_clip: None,
        };
        let mut a = PvClient::new(tiny_config(), VariantFlags::default(), 2).unwrap();
        let mut b = a.clone();
        let log_a = train(&mut a, &windows, &cfg).unwrap();
        let log_b = train(&mut b, &windows, &cfg).unwrap();
        assert_eq!(log_a, log_b);
        for ((_, ta), (_, tb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn training_refuses_an_empty_window_set() {
        let mut model = PvClient::new(tiny_config(), VariantFlags::default(), 0).unwrap();
        assert!(matches!(
            train(&mut model, &[], &TrainConfig::default()),
            Err(TrainError::NoWindows)
        ));
    }

    #[test]
    fn loss_drops_on_a_tiny_overfit_task() {
        let mut model = PvClient::new(tiny_config(), VariantFlags::default(), 3).unwrap();
        let windows = tiny_windows(4);
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            batch_size: 4,
            epochs: 60,
            seed: 0,
            grad_clip: None,
        };
        let log = train(&mut model, &windows, &cfg).unwrap();
        let first = log.epochs.first().unwrap().mean_loss;
        let last = log.final_loss().unwrap();
        assert!(
            last < 0.05 * first,
            "loss {first:.6} → {last:.6} did not collapse"
        );
    }

    #[test]
    fn combination_weights_move_with_everything_else() {
        let mut model = PvClient::new(tiny_config(), VariantFlags::default(), 6).unwrap();
        let read = |m: &PvClient, name: &str| {
            m.named_params()
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data()[0])
                .unwrap()
        };
        let (wt0, wl0) = (read(&model, "combine.w_trans"), read(&model, "combine.w_lin"));
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 1,
            seed: 4,
            grad_clip: None,
        };
        train(&mut model, &tiny_windows(4), &cfg).unwrap();
        assert_ne!(read(&model, "combine.w_trans"), wt0);
        assert_ne!(read(&model, "combine.w_lin"), wl0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_lr = TrainConfig {
            learning_rate: f64::NAN,
            ..TrainConfig::default()
        };
        assert!(bad_lr.validate().is_err());
        let bad_batch = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad_batch.validate().is_err());
        let bad_clip = TrainConfig {
            grad_clip: Some(0.0),
            ..TrainConfig::default()
        };
        assert!(bad_clip.validate().is_err());
    }
}
