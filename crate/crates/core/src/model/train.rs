use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{MlpModel, NormStats, Task};
use crate::error::{Error, Result};
use crate::rainfall::Confusion;

/// Upper bound on the positive-class weight for the detector loss.
pub const MAX_POS_WEIGHT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRow {
    pub features: Vec<f64>,
    /// 0/1 for the detector, mm per minute for the estimator.
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Independent initializations tried; the one with the best validation
    /// metric is kept. Seeds are `seed, seed + 1, ...`.
    pub restarts: usize,
    /// Detector positive-class weight; `None` uses the inverse prevalence
    /// capped at [`MAX_POS_WEIGHT`].
    pub pos_weight: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 64,
            seed: 0,
            patience: 40,
            restarts: 1,
            pos_weight: None,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.epochs > 0
            && self.batch_size > 0
            && self.patience > 0
            && self.restarts > 0
            && self.pos_weight.is_none_or(|w| w > 0.0)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("training configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// F1 for the detector, MSE for the estimator.
    pub val_metric: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub pos_weight: f64,
    /// Initialization seed of the kept restart.
    pub seed: u64,
}

/// Inverse positive prevalence, capped.
pub fn pos_weight_for(rows: &[LabeledRow]) -> f64 {
    let positives = rows.iter().filter(|r| r.label > 0.5).count();
    if positives == 0 {
        return 1.0;
    }
    (rows.len() as f64 / positives as f64).min(MAX_POS_WEIGHT)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + cfg.epsilon);
        }
    }
}

fn f1_at(model: &MlpModel, xs: &[Vec<f64>], ys: &[f64], threshold: f64) -> f64 {
    let mut c = Confusion::default();
    for (x, &y) in xs.iter().zip(ys) {
        c.record(model.forward_standardized(x) >= threshold, y > 0.5);
    }
    c.f1()
}

/// Whether `candidate` beats `best` on (metric, loss).
fn improves(task: Task, candidate: (f64, f64), best: (f64, f64)) -> bool {
    match task {
        Task::Detector => candidate.0 > best.0 || (candidate.0 == best.0 && candidate.1 < best.1),
        Task::Estimator => candidate.0 < best.0,
    }
}

/// Mini-batch Adam training that keeps the epoch with the best validation
/// metric. With an empty validation split the training split is used.
pub fn train(
    task: Task,
    train_rows: &[LabeledRow],
    val_rows: &[LabeledRow],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = train_rows.first().ok_or(Error::Training("empty training set".into()))?;
    let dim = first.features.len();
    if train_rows.iter().chain(val_rows).any(|r| r.features.len() != dim) {
        return Err(Error::DimensionMismatch("rows of unequal width".into()));
    }
    if train_rows
        .iter()
        .chain(val_rows)
        .any(|r| !r.label.is_finite() || r.features.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Training("non-finite feature or label".into()));
    }
    let pos_weight = match task {
        Task::Detector => {
            if train_rows.iter().any(|r| r.label != 0.0 && r.label != 1.0) {
                return Err(Error::Training("detector labels must be 0 or 1".into()));
            }
            let positives = train_rows.iter().filter(|r| r.label == 1.0).count();
            if positives == 0 || positives == train_rows.len() {
                return Err(Error::Training(
                    "detector training labels contain a single class".into(),
                ));
            }
            cfg.pos_weight.unwrap_or_else(|| pos_weight_for(train_rows))
        }
        Task::Estimator => 1.0,
    };

    let norm = NormStats::fit(train_rows.iter().map(|r| r.features.as_slice()), dim)?;
    let standardize = |rows: &[LabeledRow]| -> (Vec<Vec<f64>>, Vec<f64>) {
        rows.iter().map(|r| (norm.apply(&r.features), r.label)).unzip()
    };
    let (train_x, train_y) = standardize(train_rows);
    let (val_x, val_y) = if val_rows.is_empty() {
        log::warn!("empty validation split; selecting on the training split");
        (train_x.clone(), train_y.clone())
    } else {
        standardize(val_rows)
    };
    let val_refs: Vec<&[f64]> = val_x.iter().map(Vec::as_slice).collect();

    let evaluate = |m: &MlpModel| -> (f64, f64) {
        let loss = m.loss(&val_refs, &val_y, pos_weight);
        let metric = match task {
            Task::Detector => f1_at(m, &val_x, &val_y, m.threshold),
            Task::Estimator => m.loss(&val_refs, &val_y, 1.0),
        };
        (metric, loss)
    };
    let data = Split {
        train_x: &train_x,
        train_y: &train_y,
    };

    let mut kept: Option<((f64, f64), TrainOutcome)> = None;
    for r in 0..cfg.restarts {
        let seed = cfg.seed.wrapping_add(r as u64);
        let mut model = MlpModel::init(dim, task, seed)?;
        model.norm_stats = norm.clone();
        let (score, outcome) = fit(model, &data, pos_weight, seed, cfg, &evaluate)?;
        log::debug!("restart {r} (seed {seed}): validation {score:?}");
        if kept.as_ref().is_none_or(|(best, _)| improves(task, score, *best)) {
            kept = Some((score, outcome));
        }
    }
    Ok(kept.expect("at least one restart").1)
}

struct Split<'a> {
    train_x: &'a [Vec<f64>],
    train_y: &'a [f64],
}

fn fit(
    mut model: MlpModel,
    data: &Split,
    pos_weight: f64,
    seed: u64,
    cfg: &TrainConfig,
    evaluate: &dyn Fn(&MlpModel) -> (f64, f64),
) -> Result<((f64, f64), TrainOutcome)> {
    let Split { train_x, train_y } = *data;
    let mut params = model.params();
    let mut adam = Adam::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let task = model.task;

    let mut best_model = model.clone();
    let mut best = evaluate(&model);
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| train_x[i].as_slice()).collect();
            let ys: Vec<f64> = batch.iter().map(|&i| train_y[i]).collect();
            let (loss, grad) = model.loss_and_gradient(&xs, &ys, pos_weight);
            epoch_loss += loss * batch.len() as f64;
            adam.update(&mut params, &grad, cfg);
            model.set_params(&params)?;
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Training(format!("weights diverged at epoch {epoch}")));
        }
        let (metric, val_loss) = evaluate(&model);
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train_x.len() as f64,
            val_loss,
            val_metric: metric,
        });
        if improves(task, (metric, val_loss), best) {
            best = (metric, val_loss);
            best_model = model.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::debug!("early stop at epoch {epoch}, best epoch {best_epoch}");
                break;
            }
        }
    }

    let outcome = TrainOutcome {
        model: best_model,
        history,
        best_epoch,
        pos_weight,
        seed,
    };
    Ok((best, outcome))
}

/// Detection threshold maximizing F1 on `rows` over a 0.05 grid; ties go
/// to the candidate nearest 0.5.
pub fn detector_threshold_sweep(model: &MlpModel, rows: &[LabeledRow]) -> Result<f64> {
    if model.task != Task::Detector {
        return Err(Error::InvalidModel("threshold sweep needs a detector".into()));
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("threshold sweep over zero rows"));
    }
    let xs: Vec<Vec<f64>> = rows.iter().map(|r| model.norm_stats.apply(&r.features)).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.label).collect();
    let mut best: (f64, f64) = (f64::NEG_INFINITY, 0.5);
    for step in 1..20 {
        let threshold = f64::from(step) * 0.05;
        let f1 = f1_at(model, &xs, &ys, threshold);
        let closer = (threshold - 0.5).abs() < (best.1 - 0.5).abs();
        if f1 > best.0 || (f1 == best.0 && closer) {
            best = (f1, threshold);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn separable(n: usize, seed: u64) -> Vec<LabeledRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a: f64 = rng.gen_range(-1.0..1.0);
                let b: f64 = rng.gen_range(-1.0..1.0);
                let margin = a + 0.5 * b;
                let a = if margin >= 0.0 { a + 0.2 } else { a - 0.2 };
                LabeledRow {
                    features: vec![a, b],
                    label: if margin >= 0.0 { 1.0 } else { 0.0 },
                }
            })
            .collect()
    }

    fn train_f1(model: &MlpModel, rows: &[LabeledRow]) -> f64 {
        let mut c = Confusion::default();
        for r in rows {
            c.record(model.forward(&r.features).unwrap() >= 0.5, r.label > 0.5);
        }
        c.f1()
    }

    #[test]
    fn separable_data_is_learned_perfectly() {
        let rows = separable(400, 1);
        let out = train(
            Task::Detector,
            &rows,
            &[],
            &TrainConfig {
                seed: 7,
                patience: 200,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(train_f1(&out.model, &rows), 1.0);
        assert!(out.history.len() <= 200);
    }

    #[test]
    fn constant_label_is_fitted() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = 0.3;
        let rows: Vec<_> = (0..256)
            .map(|_| LabeledRow {
                features: vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..5.0)],
                label: c,
            })
            .collect();
        let out = train(
            Task::Estimator,
            &rows,
            &rows[..64],
            &TrainConfig {
                seed: 3,
                learning_rate: 1e-2,
                epochs: 400,
                ..Default::default()
            },
        )
        .unwrap();
        for r in &rows {
            let p = out.model.forward(&r.features).unwrap();
            assert!((p - c).abs() < 0.05 * c, "prediction {p}");
        }
    }

    #[test]
    fn restarts_keep_the_best_validation_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<_> = (0..120)
            .map(|_| {
                let x: f64 = rng.gen_range(-1.0..1.0);
                LabeledRow {
                    features: vec![x, rng.gen_range(-1.0..1.0)],
                    label: x.abs(),
                }
            })
            .collect();
        let (tr, val) = rows.split_at(80);
        let mse = |m: &MlpModel| -> f64 {
            val.iter()
                .map(|r| (m.forward(&r.features).unwrap() - r.label).powi(2))
                .sum::<f64>()
        };
        let base = TrainConfig {
            epochs: 30,
            seed: 5,
            ..Default::default()
        };
        let singles: Vec<f64> = (5..8)
            .map(|seed| {
                mse(&train(Task::Estimator, tr, val, &TrainConfig { seed, ..base.clone() })
                    .unwrap()
                    .model)
            })
            .collect();
        let best = train(Task::Estimator, tr, val, &TrainConfig { restarts: 3, ..base }).unwrap();
        let lowest = singles.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(mse(&best.model), lowest);
        assert_eq!(best.seed, 5 + singles.iter().position(|&v| v == lowest).unwrap() as u64);
    }

    #[test]
    fn training_is_deterministic() {
        let rows = separable(100, 4);
        let cfg = TrainConfig {
            epochs: 20,
            seed: 11,
            ..Default::default()
        };
        let a = train(Task::Detector, &rows, &rows[..30], &cfg).unwrap();
        let b = train(Task::Detector, &rows, &rows[..30], &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn empty_and_single_class_sets_rejected() {
        let cfg = TrainConfig::default();
        assert!(matches!(train(Task::Detector, &[], &[], &cfg), Err(Error::Training(_))));
        let ones: Vec<_> = (0..5)
            .map(|i| LabeledRow {
                features: vec![i as f64],
                label: 1.0,
            })
            .collect();
        assert!(matches!(
            train(Task::Detector, &ones, &[], &cfg),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn positive_weight_is_inverse_prevalence_capped() {
        let mk = |labels: &[f64]| -> Vec<LabeledRow> {
            labels
                .iter()
                .map(|&l| LabeledRow {
                    features: vec![0.0],
                    label: l,
                })
                .collect()
        };
        assert_eq!(pos_weight_for(&mk(&[1.0, 0.0, 0.0, 0.0])), 4.0);
        let mut rare = vec![0.0; 99];
        rare.push(1.0);
        assert_eq!(pos_weight_for(&mk(&rare)), MAX_POS_WEIGHT);
    }

    #[test]
    fn threshold_sweep_stays_in_range() {
        let rows = separable(200, 9);
        let out = train(
            Task::Detector,
            &rows,
            &[],
            &TrainConfig {
                epochs: 50,
                ..Default::default()
            },
        )
        .unwrap();
        let t = detector_threshold_sweep(&out.model, &rows).unwrap();
        assert!((0.05..=0.95).contains(&t));
    }
}
