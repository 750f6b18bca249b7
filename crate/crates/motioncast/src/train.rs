//! The optimization recipe: RMSE loss over forecast points, Adam with
//! bias correction, a linear-warmup-then-cosine learning-rate schedule,
//! and the teacher-forced training loop.
//!
//! Training is bit-reproducible per `(seed, data, config)`: epoch
//! shuffles, parameter init, and every dropout mask derive from the run
//! seed, and the per-batch gradient is the ordered mean of per-sample
//! gradients, each computed on its own tape.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{gradcheck, Element, Tape, Tensor};
use crate::dataset::{mix_seed, DrrSample, SessionDataset};
use crate::error::{Error, Result};
use crate::model::{
    forecast_graph, save_checkpoint, Bound, Dropout, ForecastModel, ModelConfig, ParamSet,
};

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            lr_min: 5e-7,
            lr_max: 5e-5,
            warmup_epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("epochs and batch size must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Parameter(format!(
                "warmup ({}) must be shorter than the run ({} epochs)",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Parameter(format!(
                "need 0 < lr_min ≤ lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Parameter(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Parameter(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Learning rate at real-valued epoch progress `e`: linear from `lr_min`
/// to `lr_max` over the warmup, then cosine annealing back to `lr_min`
/// at the final epoch, continuous at the boundary.
pub fn lr_at(cfg: &TrainConfig, e: f64) -> Result<f64> {
    if !(0.0..=cfg.epochs as f64).contains(&e) {
        return Err(Error::Parameter(format!(
            "epoch progress {e} outside [0, {}]",
            cfg.epochs
        )));
    }
    // Both pieces are a lerp lr_min·(1−c) + lr_max·c, so the endpoints
    // (c = 0 and c = 1) are attained exactly and the warmup boundary
    // (c = 1 from both sides) is exactly continuous.
    let w = cfg.warmup_epochs as f64;
    let c = if e <= w {
        e / w
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * (e - w) / (cfg.epochs as f64 - w)).cos())
    };
    Ok(cfg.lr_min * (1.0 - c) + cfg.lr_max * c)
}

/// RMSE averaged over forecast points: per sample and time-point, the
/// square root of the mean squared coordinate error, then the mean over
/// time-points, then over the batch.
pub fn rmse_loss(pred: &[Vec<[f64; 3]>], target: &[Vec<[f64; 3]>]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "batch sizes {} and {} (need equal, nonempty)",
            pred.len(),
            target.len()
        )));
    }
    let mut batch_sum = 0.0;
    for (p, t) in pred.iter().zip(target) {
        if p.len() != t.len() || p.is_empty() {
            return Err(Error::Shape(format!(
                "forecast lengths {} and {} (need equal, nonempty)",
                p.len(),
                t.len()
            )));
        }
        let mut sample_sum = 0.0;
        for (a, b) in p.iter().zip(t) {
            let sq: f64 = (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum();
            sample_sum += (sq / 3.0).sqrt();
        }
        batch_sum += sample_sum / p.len() as f64;
    }
    Ok(batch_sum / pred.len() as f64)
}

/// The same loss as a differentiable graph over one sample's `[T, 3]`
/// prediction tensor.
pub fn rmse_graph<'t, E: Element>(
    tape: &'t Tape<E>,
    pred: &Tensor<'t, E>,
    target: &[[f64; 3]],
) -> Result<Tensor<'t, E>> {
    let shape = pred.shape().to_vec();
    if shape.len() != 2 || shape[1] != 3 || shape[0] != target.len() {
        return Err(Error::Shape(format!(
            "predictions {shape:?} against {} targets of width 3",
            target.len()
        )));
    }
    let flat: Vec<E> = target
        .iter()
        .flat_map(|p| p.iter().map(|&x| E::from_f64(x)))
        .collect();
    let t = tape.constant(&shape, &flat)?;
    pred.sub(&t)?.square()?.mean_axis1()?.sqrt_elem()?.mean_all()
}

/// Adam first/second moment accumulators, one pair per parameter, plus
/// the shared step counter. Moments are kept in f64; parameters stay f32.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> AdamState {
        AdamState {
            m: params.entries().iter().map(|e| vec![0.0; e.values.len()]).collect(),
            v: params.entries().iter().map(|e| vec![0.0; e.values.len()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update. `grads` is aligned with the parameter
/// entries; a non-finite gradient fails naming the parameter.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.entries().len() {
        return Err(Error::Shape(format!(
            "{} gradient arrays for {} parameters",
            grads.len(),
            params.entries().len()
        )));
    }
    for (e, g) in params.entries().iter().zip(grads) {
        if g.len() != e.values.len() {
            return Err(Error::Shape(format!(
                "gradient for {} has {} values, parameter has {}",
                e.name,
                g.len(),
                e.values.len()
            )));
        }
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {bad} for parameter {}",
                e.name
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let mc = 1.0 - cfg.beta1.powi(t);
    let vc = 1.0 - cfg.beta2.powi(t);
    for ((e, g), (m, v)) in params
        .entries_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / mc;
            let v_hat = v[i] / vc;
            let w = e.values[i] as f64 - lr * m_hat / (v_hat.sqrt() + cfg.eps);
            e.values[i] = w as f32;
        }
    }
    Ok(())
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// A finished run: the trained model and its per-epoch history.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ForecastModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_loss: f64,
}

/// Serialize the history as CSV (`epoch,mean_loss,lr`).
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,mean_loss,lr\n");
    for h in history {
        out.push_str(&format!("{},{},{}\n", h.epoch, h.mean_loss, h.lr));
    }
    out
}

/// Forward/backward for one sample; returns the loss and accumulates the
/// parameter gradients (catalog order) into `acc`.
fn accumulate_sample_grads(
    model_cfg: &ModelConfig,
    params: &ParamSet,
    sample: &DrrSample<'_>,
    dropout_seed: u64,
    dropout_p: f64,
    acc: &mut [Vec<f64>],
) -> Result<f64> {
    let t_pred = model_cfg.t_pred;
    let tape: Tape<f32> = Tape::new();
    let bound = params.bind(&tape, true)?;
    let mut dropout = Dropout::training(dropout_p, dropout_seed);
    let pred = forecast_graph(
        &tape,
        model_cfg,
        &bound,
        &sample.frames,
        &sample.observed_positions,
        &sample.targets[..t_pred - 1],
        &mut dropout,
    )?;
    let loss = rmse_graph(&tape, &pred, &sample.targets)?;
    loss.backward()?;
    for (slot, (_, tensor)) in acc.iter_mut().zip(bound.iter()) {
        if let Some(g) = tensor.grad() {
            for (a, gv) in slot.iter_mut().zip(g) {
                *a += gv as f64;
            }
        }
    }
    loss.item().map(|v| v as f64)
}

/// Train a fresh Glorot-initialized model on a sample pool with teacher
/// forcing. When `out_dir` is given, writes `best.tmck` (lowest epoch
/// loss), `last.tmck`, and `history.csv` there.
pub fn train_on_samples(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    samples: &[DrrSample<'_>],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Parameter("training needs at least one sample".into()));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.frames.len() != model_cfg.t_obs || s.targets.len() != model_cfg.t_pred {
            return Err(Error::Contract(format!(
                "sample {i} has window {}+{}, model expects {}+{}",
                s.frames.len(),
                s.targets.len(),
                model_cfg.t_obs,
                model_cfg.t_pred
            )));
        }
    }

    let mut params = ParamSet::init_glorot(model_cfg, mix_seed(train_cfg.seed, "init", 0))?;
    let mut adam = AdamState::new(&params);
    let mut history = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    let n = samples.len();
    let steps_per_epoch = n.div_ceil(train_cfg.batch_size);
    let mut grad_sum: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.values.len()]).collect();

    for epoch in 0..train_cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(train_cfg.seed, "shuffle", epoch as u64));
        order.shuffle(&mut rng);
        let epoch_lr = lr_at(train_cfg, epoch as f64)?;
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let lr = lr_at(train_cfg, epoch as f64 + step as f64 / steps_per_epoch as f64)?;
            for g in grad_sum.iter_mut() {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
            let step_seed = mix_seed(mix_seed(train_cfg.seed, "epoch", epoch as u64), "step", step as u64);
            for (slot, &idx) in chunk.iter().enumerate() {
                let dropout_seed = mix_seed(step_seed, "sample", slot as u64);
                loss_sum += accumulate_sample_grads(
                    model_cfg,
                    &params,
                    &samples[idx],
                    dropout_seed,
                    model_cfg.dropout,
                    &mut grad_sum,
                )?;
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in grad_sum.iter_mut() {
                g.iter_mut().for_each(|v| *v *= inv);
            }
            adam_step(&mut params, &grad_sum, &mut adam, lr, train_cfg)?;
        }
        let mean_loss = loss_sum / n as f64;
        history.push(EpochStats {
            epoch,
            mean_loss,
            lr: epoch_lr,
        });
        let improved = best.map_or(true, |(_, b)| mean_loss < b);
        if improved {
            best = Some((epoch, mean_loss));
            if let Some(dir) = out_dir {
                let model = ForecastModel {
                    config: model_cfg.clone(),
                    params: params.clone(),
                };
                save_checkpoint(&model, &dir.join("best.tmck"))?;
            }
        }
    }

    let model = ForecastModel {
        config: model_cfg.clone(),
        params,
    };
    if let Some(dir) = out_dir {
        save_checkpoint(&model, &dir.join("last.tmck"))?;
        std::fs::write(dir.join("history.csv"), history_csv(&history))?;
    }
    let (best_epoch, best_loss) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_loss,
    })
}

/// Train on every sample of one dataset.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &SessionDataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if dataset.n_samples() == 0 {
        return Err(Error::Parameter("dataset holds no training windows".into()));
    }
    let samples: Vec<DrrSample<'_>> = dataset.samples().collect();
    train_on_samples(model_cfg, train_cfg, &samples, out_dir)
}

/// End-to-end gradient audit: every parameter of a forecaster under the
/// training loss, analytic gradients against central finite differences
/// in 64-bit, dropout off. Returns the maximum relative error.
pub fn gradcheck_forecaster(cfg: &ModelConfig, seed: u64, eps: f64) -> Result<f64> {
    cfg.validate()?;
    let params = ParamSet::init_glorot(cfg, mix_seed(seed, "gradcheck-init", 0))?;
    let names: Vec<String> = params.entries().iter().map(|e| e.name.clone()).collect();
    let points: Vec<(Vec<usize>, Vec<f64>)> = params
        .entries()
        .iter()
        .map(|e| (e.shape.clone(), e.values.iter().map(|&v| v as f64).collect()))
        .collect();

    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "gradcheck-data", 0));
    let frames: Vec<Vec<f32>> = (0..cfg.t_obs)
        .map(|_| (0..cfg.image_size * cfg.image_size).map(|_| rng.gen::<f32>()).collect())
        .collect();
    let mut draw3 = |scale: f64| -> Vec<[f64; 3]> {
        (0..cfg.t_obs.max(cfg.t_pred))
            .map(|_| [0.0; 3].map(|_| (2.0 * rng.gen::<f64>() - 1.0) * scale))
            .collect()
    };
    let observed: Vec<[f64; 3]> = draw3(1.0)[..cfg.t_obs].to_vec();
    let all_targets: Vec<[f64; 3]> = draw3(1.0)[..cfg.t_pred].to_vec();
    let frame_refs: Vec<&[f32]> = frames.iter().map(|f| f.as_slice()).collect();

    gradcheck(
        |tape, tensors| {
            let bound = Bound::from_parts(names.clone(), tensors.to_vec())?;
            let mut dropout = Dropout::inference();
            let pred = forecast_graph(
                tape,
                cfg,
                &bound,
                &frame_refs,
                &observed,
                &all_targets[..cfg.t_pred - 1],
                &mut dropout,
            )?;
            rmse_graph(tape, &pred, &all_targets)
        },
        &points,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{NormalizationParams, Sequence, Session, SessionDataset};
    use rand::Rng;
    use tempfile::tempdir;

    #[test]
    fn schedule_hits_documented_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 0.0).unwrap(), 5e-7);
        assert_eq!(lr_at(&cfg, 10.0).unwrap(), 5e-5);
        assert_eq!(lr_at(&cfg, 100.0).unwrap(), 5e-7);
        let mid_linear = lr_at(&cfg, 5.0).unwrap();
        assert!(((mid_linear - 2.525e-5) / 2.525e-5).abs() < 1e-12);
        let mid_cosine = lr_at(&cfg, 55.0).unwrap();
        assert!(((mid_cosine - 2.525e-5) / 2.525e-5).abs() < 1e-12);
        assert!(matches!(lr_at(&cfg, -0.1), Err(Error::Parameter(_))));
        assert!(matches!(lr_at(&cfg, 100.1), Err(Error::Parameter(_))));
    }

    #[test]
    fn schedule_is_continuous_and_peaks_once() {
        let cfg = TrainConfig::default();
        // The cosine branch is flat at the boundary, so a small step past
        // it must stay within 1e-15 of the warmup peak.
        let before = lr_at(&cfg, 10.0).unwrap();
        let after = lr_at(&cfg, 10.0 + 1e-4).unwrap();
        assert!((before - after).abs() < 1e-15);
        let mut peaks = 0;
        let mut last = 0.0;
        for i in 0..=10_000 {
            let lr = lr_at(&cfg, i as f64 * 0.01).unwrap();
            assert!(lr <= 5e-5 + 1e-20);
            if lr == 5e-5 {
                peaks += 1;
            }
            if i > 0 {
                // Monotone up through warmup, monotone down after.
                if i as f64 * 0.01 <= 10.0 {
                    assert!(lr >= last);
                } else {
                    assert!(lr <= last);
                }
            }
            last = lr;
        }
        assert_eq!(peaks, 1, "lr_max attained exactly once");
    }

    #[test]
    fn config_invariants_are_enforced() {
        let mut cfg = TrainConfig::default();
        cfg.warmup_epochs = 100;
        assert!(matches!(cfg.validate(), Err(Error::Parameter(_))));
        let mut cfg = TrainConfig::default();
        cfg.lr_min = 1e-4;
        assert!(matches!(cfg.validate(), Err(Error::Parameter(_))));
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn rmse_examples() {
        let zero = vec![vec![[1.0, 2.0, 3.0]; 5]];
        assert_eq!(rmse_loss(&zero, &zero).unwrap(), 0.0);

        let pred = vec![vec![[1.0, 1.0, 1.0]; 4]; 3];
        let target = vec![vec![[0.0, 0.0, 0.0]; 4]; 3];
        assert!((rmse_loss(&pred, &target).unwrap() - 1.0).abs() < 1e-15);

        let pred = vec![vec![[3.0, 4.0, 0.0]]];
        let target = vec![vec![[0.0, 0.0, 0.0]]];
        let want = (25.0_f64 / 3.0).sqrt();
        assert!((rmse_loss(&pred, &target).unwrap() - want).abs() < 1e-12);
        assert!((want - 2.8868).abs() < 1e-4);

        assert!(matches!(
            rmse_loss(&pred, &vec![vec![[0.0; 3]; 2]]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(rmse_loss(&pred, &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn rmse_batch_mean_is_invariant_to_grouping() {
        // A batch of identical samples scores the same as one sample.
        let one = vec![vec![[1.0, 2.0, 2.0]; 5]];
        let many = vec![vec![[1.0, 2.0, 2.0]; 5]; 7];
        let t1 = vec![vec![[0.0; 3]; 5]];
        let t7 = vec![vec![[0.0; 3]; 5]; 7];
        assert!((rmse_loss(&one, &t1).unwrap() - rmse_loss(&many, &t7).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn rmse_graph_matches_plain_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred: Vec<[f64; 3]> = (0..5).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let target: Vec<[f64; 3]> = (0..5).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let tape: Tape<f64> = Tape::new();
        let flat: Vec<f64> = pred.iter().flatten().copied().collect();
        let p = tape.leaf(&[5, 3], &flat, false).unwrap();
        let graph = rmse_graph(&tape, &p, &target).unwrap().item().unwrap();
        let plain = rmse_loss(&[pred.clone()], &[target.clone()]).unwrap();
        assert!((graph - plain).abs() < 1e-12);
    }

    #[test]
    fn rmse_graph_gradient_is_correct() {
        let target: Vec<[f64; 3]> = vec![[0.1, -0.2, 0.3], [0.5, 0.0, -0.4]];
        let points = vec![(vec![2, 3], vec![0.9, 0.4, -0.3, 0.2, 0.8, -0.1])];
        let max_err = gradcheck(
            |tape, tensors| rmse_graph(tape, &tensors[0], &target),
            &points,
            1e-6,
        )
        .unwrap();
        assert!(max_err < 1e-8, "max rel err {max_err}");
    }

    fn micro_params() -> (ParamSet, ModelConfig) {
        let cfg = ModelConfig {
            d_model: 4,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            patch_size: 2,
            image_size: 4,
            t_obs: 2,
            t_pred: 2,
            dropout: 0.0,
        };
        (ParamSet::init_glorot(&cfg, 1).unwrap(), cfg)
    }

    #[test]
    fn adam_single_step_closed_form() {
        let (mut params, _) = micro_params();
        for e in params.entries_mut() {
            e.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let cfg = TrainConfig::default();
        let mut state = AdamState::new(&params);
        let grads: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![1.0; e.values.len()]).collect();
        adam_step(&mut params, &grads, &mut state, 1e-3, &cfg).unwrap();
        for e in params.entries() {
            for &v in &e.values {
                assert!(
                    ((v as f64) + 1e-3).abs() < 1e-9,
                    "bias-corrected first step moves by −lr, got {v}"
                );
            }
        }
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let (mut params, _) = micro_params();
        let before = params.clone();
        let cfg = TrainConfig::default();
        let mut state = AdamState::new(&params);
        let grads: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.values.len()]).collect();
        adam_step(&mut params, &grads, &mut state, 1e-3, &cfg).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_scales_linearly_with_lr() {
        let cfg = TrainConfig::default();
        // From zero parameters and zero state, the first update is
        // −lr·m̂/(√v̂+ε); doubling lr doubles every displacement exactly.
        let run = |lr: f64| {
            let (mut params, _) = micro_params();
            for e in params.entries_mut() {
                e.values.iter_mut().for_each(|v| *v = 0.0);
            }
            let mut state = AdamState::new(&params);
            let grads: Vec<Vec<f64>> = params
                .entries()
                .iter()
                .enumerate()
                .map(|(k, e)| vec![0.3 + 0.1 * k as f64; e.values.len()])
                .collect();
            adam_step(&mut params, &grads, &mut state, lr, &cfg).unwrap();
            params
        };
        let a = run(1e-3);
        let b = run(2e-3);
        for (e1, e2) in a.entries().iter().zip(b.entries()) {
            for i in 0..e1.values.len() {
                assert!(e1.values[i] != 0.0);
                assert_eq!(e2.values[i], 2.0 * e1.values[i], "doubled lr doubles the first step exactly");
            }
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let (mut params, _) = micro_params();
        let cfg = TrainConfig::default();
        let mut state = AdamState::new(&params);
        let mut grads: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.values.len()]).collect();
        grads[3][0] = f64::NAN;
        let err = adam_step(&mut params, &grads, &mut state, 1e-3, &cfg).unwrap_err();
        assert_eq!(err.category(), "numeric");
        let name = &params.entries()[3].name;
        assert!(err.to_string().contains(name.as_str()), "{err}");
    }

    /// Hand-built dataset: small frames, positions on a noisy circle.
    fn synthetic_dataset(cfg: &ModelConfig, n_frames: usize, seed: u64) -> SessionDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let edge = cfg.image_size;
        let frames: Vec<Vec<f32>> = (0..n_frames)
            .map(|i| {
                (0..edge * edge)
                    .map(|j| {
                        let phase = (i as f32) * 0.37 + (j as f32) * 0.11;
                        0.5 + 0.4 * phase.sin() + 0.05 * rng.gen::<f32>()
                    })
                    .collect()
            })
            .collect();
        let positions_mm: Vec<[f64; 3]> = (0..n_frames)
            .map(|i| {
                let t = i as f64 * 0.2;
                [3.0 * (1.5 * t).sin(), 1.0 * (1.5 * t).cos(), 8.0 * (1.5 * t).sin()]
            })
            .collect();
        SessionDataset {
            patient_id: "synthetic".into(),
            session: Session::T1,
            spec_hash: 0,
            seed,
            t_obs: cfg.t_obs,
            t_pred: cfg.t_pred,
            frame_width: edge,
            frame_height: edge,
            norm: NormalizationParams::new([0.0; 3], [3.0, 1.0, 8.0]).unwrap(),
            sequences: vec![Sequence { frames, positions_mm }],
        }
    }

    fn fast_train_cfg(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            warmup_epochs: 2,
            lr_max: 1e-3,
            lr_min: 1e-5,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_history_is_complete() {
        let (_, cfg) = micro_params();
        let ds = synthetic_dataset(&cfg, 12, 5);
        let tc = fast_train_cfg(3, 7);
        let a = train(&cfg, &tc, &ds, None).unwrap();
        let b = train(&cfg, &tc, &ds, None).unwrap();
        assert_eq!(a.history, b.history, "identical seeds give identical loss curves");
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.history.len(), 3);
        for (i, h) in a.history.iter().enumerate() {
            assert_eq!(h.epoch, i);
            assert!(h.mean_loss.is_finite());
        }
        let c = train(&cfg, &fast_train_cfg(3, 8), &ds, None).unwrap();
        assert_ne!(a.model.params, c.model.params, "different seed, different model");
    }

    #[test]
    fn training_reduces_loss_on_learnable_data() {
        let (_, cfg) = micro_params();
        let ds = synthetic_dataset(&cfg, 30, 5);
        let out = train(&cfg, &fast_train_cfg(25, 7), &ds, None).unwrap();
        let first = out.history.first().unwrap().mean_loss;
        let last = out.history.last().unwrap().mean_loss;
        assert!(
            last < 0.5 * first,
            "loss should drop on a smooth trajectory: {first} → {last}"
        );
        assert!(out.best_loss <= last);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let (_, cfg) = micro_params();
        let mut ds = synthetic_dataset(&cfg, 12, 5);
        ds.sequences.clear();
        assert!(matches!(
            train(&cfg, &fast_train_cfg(2, 7), &ds, None),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn checkpoints_and_history_are_written() {
        let (_, cfg) = micro_params();
        let ds = synthetic_dataset(&cfg, 12, 5);
        let dir = tempdir().unwrap();
        let out = train(&cfg, &fast_train_cfg(3, 7), &ds, Some(dir.path())).unwrap();
        let best = crate::model::load_checkpoint(&dir.path().join("best.tmck")).unwrap();
        let last = crate::model::load_checkpoint(&dir.path().join("last.tmck")).unwrap();
        assert_eq!(last.params, out.model.params);
        assert_eq!(best.config, cfg);
        let text = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,mean_loss,lr"));
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn forecaster_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            d_model: 4,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            patch_size: 4,
            image_size: 8,
            t_obs: 2,
            t_pred: 2,
            dropout: 0.1,
        };
        let max_err = gradcheck_forecaster(&cfg, 3, 1e-5).unwrap();
        assert!(max_err < 1e-6, "max relative error {max_err}");
    }
}
