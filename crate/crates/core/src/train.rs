//! Multi-task loss, Adam optimization, the epoch loop with early stopping on
//! validation MRR@5, and hyperparameter sweeps.
//!
//! One batch covers up to `batch_size` prediction days; each day contributes
//! its full cross-section to the pairwise ranking loss and the movement
//! loss. Loss sums are not averaged, matching the published Σ form, and the
//! L2 penalty is an explicit loss term so reported components reconcile
//! exactly: `total = w_rank·rank + w_aux·aux + λ·l2`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, InstanceWindow, PriceBar, SectorCatalog};
use crate::eval::{evaluate, KMetrics};
use crate::layers::{Param, ParamKind};
use crate::model::{forward_graph, ModelConfig, ModelState, Variant};
use crate::tensor::{Tape, Var};
use crate::{Error, Result};

// ── Losses ───────────────────────────────────────────────────────────────

/// Pairwise ranking loss over ordered pairs:
/// `Σ_{q≠k} max(0, −(ŷ_q − ŷ_k)(y_q − y_k))`. Each unordered pair is counted
/// twice, following the double sum literally.
pub fn rank_loss(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    if tape.shape_of(pred) != tape.shape_of(truth) || tape.shape_of(pred).len() != 1 {
        return Err(Error::Shape {
            op: "rank_loss",
            details: format!("{:?} vs {:?}", tape.shape_of(pred), tape.shape_of(truth)),
        });
    }
    tape.pairwise_rank_hinge(pred, truth)
}

/// Summed binary cross-entropy `−Σ [y log p + (1−y) log(1−p)]`. Probabilities
/// must lie strictly inside (0, 1).
pub fn move_loss(tape: &mut Tape, probs: Var, labels: &[bool]) -> Result<Var> {
    let shape = tape.shape_of(probs).to_vec();
    if shape.len() != 1 || shape[0] != labels.len() {
        return Err(Error::Shape {
            op: "move_loss",
            details: format!("{shape:?} probabilities vs {} labels", labels.len()),
        });
    }
    if let Some(bad) = tape.value(probs).iter().find(|p| **p <= 0.0 || **p >= 1.0) {
        return Err(Error::Domain {
            op: "move_loss",
            details: format!("probability {bad} outside the open interval (0, 1)"),
        });
    }
    let n = labels.len();
    let y: Vec<f64> = labels.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect();
    let y = tape.const_vector(&y)?;
    let ones = tape.ones(&[n]);

    let log_p = tape.log(probs)?;
    let one_minus_p = tape.sub(ones, probs)?;
    let log_q = tape.log(one_minus_p)?;
    let pos = tape.mul(y, log_p)?;
    let one_minus_y = tape.sub(ones, y)?;
    let neg = tape.mul(one_minus_y, log_q)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both)?;
    tape.scale(total, -1.0)
}

/// Summed squared error `Σ (ŷ − y)²`; substitutes for the movement loss
/// under the regression variant.
pub fn mse_loss(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    if tape.shape_of(pred) != tape.shape_of(truth) {
        return Err(Error::Shape {
            op: "mse_loss",
            details: format!("{:?} vs {:?}", tape.shape_of(pred), tape.shape_of(truth)),
        });
    }
    let diff = tape.sub(pred, truth)?;
    let sq = tape.mul(diff, diff)?;
    tape.sum(sq)
}

/// `(1−δ)·rank + δ·aux + λ·l2`; the aux slot holds the movement or MSE term.
pub fn total_loss(rank: f64, aux: f64, l2_sum_of_squares: f64, delta: f64, lambda: f64) -> f64 {
    (1.0 - delta) * rank + delta * aux + lambda * l2_sum_of_squares
}

// ── Adam ─────────────────────────────────────────────────────────────────

/// Bias-corrected Adam over a fixed parameter list.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, param_sizes: &[usize]) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// One update over all parameters in their fixed order. A missing or
    /// mis-sized gradient is a training error naming the parameter.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &[Option<Vec<f64>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Train(format!(
                "optimizer tracks {} parameters, got {} params / {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (i, param) in params.iter_mut().enumerate() {
            let grad = grads[i]
                .as_ref()
                .ok_or_else(|| Error::Train(format!("missing gradient for {}", param.path)))?;
            if grad.len() != param.numel() {
                return Err(Error::Train(format!(
                    "gradient for {} has {} entries, parameter has {}",
                    param.path,
                    grad.len(),
                    param.numel()
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = param.value.data_mut();
            for j in 0..grad.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad[j] * grad[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

// ── Training loop ────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Batch size in prediction days (each day carries its cross-section).
    pub batch_size: usize,
    /// Balance between ranking and movement tasks.
    pub delta: f64,
    /// L2 regularization weight.
    pub lambda: f64,
    pub max_epochs: usize,
    /// Early stop after this many epochs without validation improvement.
    pub patience: usize,
    /// Run seed; drives parameter initialization for the run.
    pub seed: u64,
    /// K values reported on the validation set each epoch.
    pub k_list: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 128,
            delta: 0.01,
            lambda: 1e-4,
            max_epochs: 500,
            patience: 20,
            seed: 7,
            k_list: vec![5, 10],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!("delta {} outside [0, 1]", self.delta)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda {} must be ≥ 0", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("max_epochs and patience must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Effective loss-term weights for a variant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_rank: f64,
    pub w_aux: f64,
    pub lambda: f64,
}

impl LossWeights {
    pub fn for_variant(variant: Variant, delta: f64, lambda: f64) -> LossWeights {
        match variant {
            // Rank-only objective: the aux term is absent, not just unweighted.
            Variant::NoMtl => LossWeights { w_rank: 1.0, w_aux: 0.0, lambda },
            _ => LossWeights { w_rank: 1.0 - delta, w_aux: delta, lambda },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub rank_loss: f64,
    /// Movement cross-entropy, or summed squared error under the regression
    /// variant; always logged even when its weight is zero.
    pub aux_loss: f64,
    pub l2_penalty: f64,
    pub total_loss: f64,
    pub val_mrr5: f64,
    pub val_metrics: BTreeMap<usize, KMetrics>,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: String,
    pub seed: u64,
    pub weights: LossWeights,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_mrr5: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
    pub early_stopped: bool,
    /// Not serialized: report files must be byte-identical across reruns.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

fn l2_sum_of_squares(params: &[&Param]) -> f64 {
    params
        .iter()
        .filter(|p| p.kind == ParamKind::Weight)
        .map(|p| p.value.data().iter().map(|v| v * v).sum::<f64>())
        .sum()
}

/// Forward + losses for one prediction day on a fresh tape. Returns the
/// scalar component values and accumulates parameter gradients.
fn train_day(
    state: &ModelState,
    day: &InstanceWindow,
    catalog: &SectorCatalog,
    weights: &LossWeights,
    grads: &mut [Option<Vec<f64>>],
) -> Result<(f64, f64)> {
    let variant = state.config.variant;
    let mut tape = Tape::new();
    let bound = state.bind(&mut tape, true);
    let with_move = variant.trains_move_head();
    let out = forward_graph(&mut tape, &bound, day, catalog, false, with_move)?;

    let truth = tape.const_vector(&out.true_returns)?;
    let rank = rank_loss(&mut tape, out.pred_return, truth)?;
    let rank_value = tape.scalar_value(rank)?;

    let (aux, aux_value) = match (variant, out.pred_move) {
        (Variant::NoMtl, _) => (None, 0.0),
        (Variant::Mse, Some(raw)) => {
            let l = mse_loss(&mut tape, raw, truth)?;
            let v = tape.scalar_value(l)?;
            (Some(l), v)
        }
        (_, Some(probs)) => {
            let l = move_loss(&mut tape, probs, &out.true_moves)?;
            let v = tape.scalar_value(l)?;
            (Some(l), v)
        }
        (_, None) => {
            return Err(Error::Train("movement head missing from training graph".into()))
        }
    };

    let weighted_rank = tape.scale(rank, weights.w_rank)?;
    let day_loss = match aux {
        Some(aux) => {
            let weighted_aux = tape.scale(aux, weights.w_aux)?;
            tape.add(weighted_rank, weighted_aux)?
        }
        None => weighted_rank,
    };
    if !tape.scalar_value(day_loss)?.is_finite() {
        return Err(Error::Train("loss diverged to a non-finite value".into()));
    }
    tape.backward(day_loss)?;

    let leaves = bound.trainable_leaves();
    for (i, leaf) in leaves.iter().enumerate() {
        let grad = tape
            .grad(*leaf)
            .ok_or_else(|| Error::Train(format!("parameter {i} received no gradient")))?;
        match &mut grads[i] {
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grad) {
                    *a += g;
                }
            }
            None => grads[i] = Some(grad.to_vec()),
        }
    }
    Ok((rank_value, aux_value))
}

/// Full training run: seeded init, batched epochs, per-epoch validation,
/// best-checkpoint selection by validation MRR@5, early stopping. Returns
/// the best state alongside the report. With a run directory, writes
/// `best.ckpt` and `epoch_<n>.ckpt` for the final epoch.
pub fn train(
    split: &DatasetSplit,
    catalog: &SectorCatalog,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<(ModelState, TrainReport)> {
    train_cfg.validate()?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::Config("train and validation splits must be nonempty".into()));
    }
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
    }

    let started = Instant::now();
    // The run seed drives initialization; the model config's own seed is
    // replaced so one knob controls the run.
    let model_cfg = ModelConfig { seed: train_cfg.seed, ..*model_cfg };
    let mut state = ModelState::init(&model_cfg)?;
    let weights =
        LossWeights::for_variant(model_cfg.variant, train_cfg.delta, train_cfg.lambda);

    let sizes: Vec<usize> = state.trainable_params().iter().map(|p| p.numel()).collect();
    let mut adam = Adam::new(train_cfg.learning_rate, &sizes);

    let mut report = TrainReport {
        variant: model_cfg.variant.to_string(),
        seed: train_cfg.seed,
        weights,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_mrr5: f64::NEG_INFINITY,
        best_checkpoint: None,
        final_checkpoint: None,
        early_stopped: false,
        wall_clock_secs: 0.0,
    };
    let mut best_state = state.clone();
    let mut last_epoch = 0;

    for epoch in 1..=train_cfg.max_epochs {
        last_epoch = epoch;
        let mut rank_sum = 0.0;
        let mut aux_sum = 0.0;
        let mut l2_sum = 0.0;

        for (batch_idx, batch) in split.train.chunks(train_cfg.batch_size).enumerate() {
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; sizes.len()];
            for day in batch {
                let (rank_v, aux_v) =
                    train_day(&state, day, catalog, &weights, &mut grads).map_err(|e| {
                        Error::Train(format!(
                            "epoch {epoch} batch {batch_idx} day {}: {e}",
                            day.prediction_date
                        ))
                    })?;
                rank_sum += rank_v;
                aux_sum += aux_v;
            }

            // Explicit L2 term: value recorded, gradient 2λw added by hand.
            {
                let trainable = state.trainable_params();
                let l2 = l2_sum_of_squares(&trainable);
                l2_sum += l2;
                for (i, p) in trainable.iter().enumerate() {
                    if p.kind != ParamKind::Weight {
                        continue;
                    }
                    let g = grads[i].get_or_insert_with(|| vec![0.0; p.numel()]);
                    for (gj, wj) in g.iter_mut().zip(p.value.data()) {
                        *gj += 2.0 * weights.lambda * wj;
                    }
                }
            }

            let mut params = state.trainable_params_mut();
            adam.step(&mut params, &grads)?;
        }

        let total = weights.w_rank * rank_sum + weights.w_aux * aux_sum + weights.lambda * l2_sum;
        if !total.is_finite() {
            return Err(Error::Train(format!("epoch {epoch}: total loss diverged")));
        }

        let val = evaluate(&state, &split.validation, catalog, &train_cfg.k_list, false)?;
        let val_mrr5 = val.k.get(&5).map(|m| m.mrr).unwrap_or(f64::NAN);
        report.epochs.push(EpochStats {
            epoch,
            rank_loss: rank_sum,
            aux_loss: aux_sum,
            l2_penalty: l2_sum,
            total_loss: total,
            val_mrr5,
            val_metrics: val.k,
            val_acc: val.acc,
        });
        log::info!(
            "epoch {epoch}: total {total:.6} (rank {rank_sum:.6}, aux {aux_sum:.6}, l2 {l2_sum:.6}), val MRR@5 {val_mrr5:.4}"
        );

        if val_mrr5 > report.best_val_mrr5 {
            report.best_val_mrr5 = val_mrr5;
            report.best_epoch = epoch;
            best_state = state.clone();
            if let Some(dir) = run_dir {
                let path = dir.join("best.ckpt");
                best_state.save(&path)?;
                report.best_checkpoint = Some(path);
            }
        } else if epoch - report.best_epoch >= train_cfg.patience {
            report.early_stopped = true;
            break;
        }
    }

    if let Some(dir) = run_dir {
        let path = dir.join(format!("epoch_{last_epoch}.ckpt"));
        state.save(&path)?;
        report.final_checkpoint = Some(path);
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((best_state, report))
}

// ── Sweeps ───────────────────────────────────────────────────────────────

/// Grid over training weeks, embedding size, and the balance weight δ.
/// Empty axes fall back to the base configuration's value.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SweepGrid {
    pub weeks: Vec<usize>,
    pub hidden_dims: Vec<usize>,
    pub deltas: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub weeks: usize,
    pub hidden_dim: usize,
    pub delta: f64,
    pub best_epoch: usize,
    pub val_mrr5: f64,
    pub val_metrics: BTreeMap<usize, KMetrics>,
    pub val_acc: f64,
}

/// One train/evaluate run per grid cell. Instances are rebuilt per weeks
/// value since the window length changes.
pub fn sweep(
    bars: &std::collections::BTreeMap<String, Vec<PriceBar>>,
    catalog: &SectorCatalog,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    grid: &SweepGrid,
    data_opts: &crate::data::DataOptions,
    ratios: (f64, f64, f64),
) -> Result<Vec<SweepRow>> {
    let weeks_axis = if grid.weeks.is_empty() { vec![base_model.weeks] } else { grid.weeks.clone() };
    let hidden_axis = if grid.hidden_dims.is_empty() {
        vec![base_model.hidden_dim]
    } else {
        grid.hidden_dims.clone()
    };
    let delta_axis = if grid.deltas.is_empty() { vec![base_train.delta] } else { grid.deltas.clone() };

    let mut rows = Vec::new();
    for &weeks in &weeks_axis {
        let instances = crate::data::build_instances(
            bars,
            catalog,
            weeks,
            base_model.days_per_week,
            data_opts,
        )?;
        let split = crate::data::split_chronological(instances, ratios)?;
        for &hidden_dim in &hidden_axis {
            for &delta in &delta_axis {
                let model_cfg = ModelConfig { weeks, hidden_dim, ..*base_model };
                let train_cfg = TrainConfig { delta, ..base_train.clone() };
                let (_, report) = train(&split, catalog, &model_cfg, &train_cfg, None)?;
                let best = report
                    .epochs
                    .iter()
                    .find(|e| e.epoch == report.best_epoch)
                    .ok_or_else(|| Error::Train("sweep produced no epochs".into()))?;
                rows.push(SweepRow {
                    weeks,
                    hidden_dim,
                    delta,
                    best_epoch: report.best_epoch,
                    val_mrr5: report.best_val_mrr5,
                    val_metrics: best.val_metrics.clone(),
                    val_acc: best.val_acc,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split_chronological;
    use crate::synth;
    use crate::tensor::Tensor;

    #[test]
    fn rank_loss_hand_example() {
        let mut tape = Tape::new();
        let p = tape.const_vector(&[0.2, 0.1]).unwrap();
        let t = tape.const_vector(&[0.1, 0.3]).unwrap();
        let l = rank_loss(&mut tape, p, t).unwrap();
        assert!((tape.scalar_value(l).unwrap() - 0.04).abs() < 1e-15);
    }

    #[test]
    fn rank_loss_zero_iff_concordant() {
        let mut tape = Tape::new();
        let p = tape.const_vector(&[0.3, 0.2, 0.1]).unwrap();
        let t = tape.const_vector(&[0.09, 0.05, 0.01]).unwrap();
        let l = rank_loss(&mut tape, p, t).unwrap();
        assert_eq!(tape.scalar_value(l).unwrap(), 0.0);
    }

    #[test]
    fn rank_loss_matches_pair_enumeration_oracle() {
        let mut rng = crate::layers::seeded_rng(31);
        for _ in 0..200 {
            use rand::Rng;
            let n = rng.gen_range(1..=8usize);
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();

            // Brute-force ordered-pair oracle.
            let mut expected = 0.0;
            for q in 0..n {
                for k in 0..n {
                    if q != k {
                        let term = -(p[q] - p[k]) * (t[q] - t[k]);
                        if term > 0.0 {
                            expected += term;
                        }
                    }
                }
            }

            let mut tape = Tape::new();
            let pv = tape.const_vector(&p).unwrap();
            let tv = tape.const_vector(&t).unwrap();
            let l = rank_loss(&mut tape, pv, tv).unwrap();
            assert!((tape.scalar_value(l).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_loss_is_translation_invariant() {
        let mut rng = crate::layers::seeded_rng(37);
        use rand::Rng;
        let p: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let t: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let shifted: Vec<f64> = p.iter().map(|v| v + 3.7).collect();

        let mut tape = Tape::new();
        let (pv, tv) = (tape.const_vector(&p).unwrap(), tape.const_vector(&t).unwrap());
        let a = rank_loss(&mut tape, pv, tv).unwrap();
        let (sv, tv2) = (tape.const_vector(&shifted).unwrap(), tape.const_vector(&t).unwrap());
        let b = rank_loss(&mut tape, sv, tv2).unwrap();
        assert!(
            (tape.scalar_value(a).unwrap() - tape.scalar_value(b).unwrap()).abs() < 1e-12
        );
    }

    #[test]
    fn move_loss_examples() {
        let mut tape = Tape::new();
        let p = tape.const_vector(&[0.5]).unwrap();
        let l = move_loss(&mut tape, p, &[true]).unwrap();
        assert!((tape.scalar_value(l).unwrap() - 2.0f64.ln()).abs() < 1e-12);

        let p = tape.const_vector(&[0.999999]).unwrap();
        let l = move_loss(&mut tape, p, &[true]).unwrap();
        let v = tape.scalar_value(l).unwrap();
        assert!(v > 0.0 && v < 1.1e-6, "{v}");

        let p = tape.const_vector(&[1.0]).unwrap();
        assert!(matches!(
            move_loss(&mut tape, p, &[true]),
            Err(Error::Domain { op: "move_loss", .. })
        ));
    }

    #[test]
    fn move_loss_matches_scalar_oracle() {
        let mut rng = crate::layers::seeded_rng(41);
        use rand::Rng;
        let probs: Vec<f64> = (0..10).map(|_| rng.gen_range(0.01..0.99)).collect();
        let labels: Vec<bool> = (0..10).map(|_| rng.gen_bool(0.5)).collect();
        let mut expected = 0.0;
        for (p, y) in probs.iter().zip(&labels) {
            expected -= if *y { p.ln() } else { (1.0 - p).ln() };
        }
        let mut tape = Tape::new();
        let pv = tape.const_vector(&probs).unwrap();
        let l = move_loss(&mut tape, pv, &labels).unwrap();
        assert!((tape.scalar_value(l).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn mse_examples_and_oracle() {
        let mut tape = Tape::new();
        let p = tape.const_vector(&[0.3, -0.1]).unwrap();
        let l = mse_loss(&mut tape, p, p).unwrap();
        assert_eq!(tape.scalar_value(l).unwrap(), 0.0);

        let a = tape.const_vector(&[1.0, 0.0]).unwrap();
        let b = tape.const_vector(&[0.0, 0.0]).unwrap();
        let l = mse_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.scalar_value(l).unwrap(), 1.0);

        let mut rng = crate::layers::seeded_rng(43);
        use rand::Rng;
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expected: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
        let xv = tape.const_vector(&x).unwrap();
        let yv = tape.const_vector(&y).unwrap();
        let l = mse_loss(&mut tape, xv, yv).unwrap();
        assert!((tape.scalar_value(l).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.5, 9.9, 3.0, 0.0, 1e-4), 0.5 + 3.0e-4);
        assert_eq!(total_loss(9.9, 0.25, 3.0, 1.0, 1e-4), 0.25 + 3.0e-4);
        let v = total_loss(0.04, 0.6931, 2.0, 0.01, 1e-4);
        assert!((v - 0.046731).abs() < 1e-9, "{v}");
    }

    #[test]
    fn adam_first_step_magnitude_and_zero_grad() {
        // f(x) = x², x = 1, lr = 0.1: the first bias-corrected step moves by
        // almost exactly lr.
        let mut p = Param {
            path: "x".into(),
            kind: ParamKind::Weight,
            value: Tensor::scalar(1.0),
        };
        let mut adam = Adam::new(0.1, &[1]);
        adam.step(&mut [&mut p], &[Some(vec![2.0])]).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-6);

        let before = p.value.data()[0];
        adam.step(&mut [&mut p], &[Some(vec![0.0])]).unwrap();
        // Zero gradient: only the decayed first moment moves the value; with
        // a fresh optimizer it would not move at all.
        let mut q = Param {
            path: "y".into(),
            kind: ParamKind::Weight,
            value: Tensor::scalar(before),
        };
        let mut fresh = Adam::new(0.1, &[1]);
        fresh.step(&mut [&mut q], &[Some(vec![0.0])]).unwrap();
        assert_eq!(q.value.data()[0], before);

        assert!(matches!(
            fresh.step(&mut [&mut q], &[None]),
            Err(Error::Train(_))
        ));
    }

    #[test]
    fn adam_matches_independent_scalar_recurrence_on_quadratic() {
        // Minimize f(x) = x² from x = 1 for 100 steps and compare against an
        // independently coded recurrence of the same update rule.
        let mut p = Param {
            path: "x".into(),
            kind: ParamKind::Weight,
            value: Tensor::scalar(1.0),
        };
        let mut adam = Adam::new(0.05, &[1]);

        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.05);
        let mut losses = Vec::new();
        for step in 1..=100 {
            let g = 2.0 * p.value.data()[0];
            adam.step(&mut [&mut p], &[Some(vec![g])]).unwrap();

            let g_ref = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g_ref;
            v = b2 * v + (1.0 - b2) * g_ref * g_ref;
            let m_hat = m / (1.0 - b1.powi(step));
            let v_hat = v / (1.0 - b2.powi(step));
            x -= lr * m_hat / (v_hat.sqrt() + eps);

            assert!(
                (p.value.data()[0] - x).abs() < 1e-12,
                "step {step}: {} vs {x}",
                p.value.data()[0]
            );
            losses.push(x * x);
        }
        assert!(x.abs() < 0.05, "final x = {x}");
        // Loss decreases strictly through the approach phase; once the
        // iterate crosses the optimum, momentum makes it chatter in a small
        // neighborhood instead.
        let crossing = losses.iter().position(|l| *l < 0.05 * 0.05).unwrap_or(losses.len());
        assert!(crossing > 10, "approach phase too short ({crossing} steps)");
        for w in losses[..crossing].windows(2) {
            assert!(w[1] < w[0], "loss rose during approach: {} -> {}", w[0], w[1]);
        }
    }

    fn tiny_synth_split() -> (DatasetSplit, SectorCatalog) {
        let (bars, catalog) =
            synth::generate(&synth::SynthConfig { weeks: 16, ..Default::default() }).unwrap();
        let instances =
            crate::data::build_instances(&bars, &catalog, 3, 5, &Default::default()).unwrap();
        let split = split_chronological(instances, (0.6, 0.2, 0.2)).unwrap();
        (split, catalog)
    }

    #[test]
    fn same_seed_gives_bit_identical_first_epoch() {
        let (split, catalog) = tiny_synth_split();
        let model_cfg = ModelConfig { hidden_dim: 8, ..Default::default() };
        let train_cfg = TrainConfig {
            max_epochs: 1,
            seed: 5,
            k_list: vec![5],
            ..Default::default()
        };
        let (_, a) = train(&split, &catalog, &model_cfg, &train_cfg, None).unwrap();
        let (_, b) = train(&split, &catalog, &model_cfg, &train_cfg, None).unwrap();
        assert_eq!(a.epochs[0].total_loss.to_bits(), b.epochs[0].total_loss.to_bits());
        assert_eq!(a.epochs[0].rank_loss.to_bits(), b.epochs[0].rank_loss.to_bits());
        assert_eq!(a.epochs[0].aux_loss.to_bits(), b.epochs[0].aux_loss.to_bits());
    }

    #[test]
    fn delta_zero_still_logs_unweighted_move_component() {
        let (split, catalog) = tiny_synth_split();
        let model_cfg = ModelConfig { hidden_dim: 8, ..Default::default() };
        let train_cfg = TrainConfig {
            max_epochs: 1,
            delta: 0.0,
            seed: 3,
            k_list: vec![5],
            ..Default::default()
        };
        let (_, report) = train(&split, &catalog, &model_cfg, &train_cfg, None).unwrap();
        let e = &report.epochs[0];
        assert!(e.aux_loss > 0.0, "move component still logged");
        let recomposed = 1.0 * e.rank_loss + 0.0 * e.aux_loss + 1e-4 * e.l2_penalty;
        assert!((e.total_loss - recomposed).abs() < 1e-9);
    }

    #[test]
    fn sweep_single_cell_and_config_echo() {
        let (bars, catalog) =
            synth::generate(&synth::SynthConfig { weeks: 16, ..Default::default() }).unwrap();
        let model_cfg = ModelConfig { hidden_dim: 4, ..Default::default() };
        let train_cfg = TrainConfig {
            max_epochs: 1,
            seed: 2,
            k_list: vec![5],
            ..Default::default()
        };
        let rows = sweep(
            &bars,
            &catalog,
            &model_cfg,
            &train_cfg,
            &SweepGrid::default(),
            &Default::default(),
            (0.6, 0.2, 0.2),
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].weeks, 3);
        assert_eq!(rows[0].hidden_dim, 4);

        let rows = sweep(
            &bars,
            &catalog,
            &model_cfg,
            &train_cfg,
            &SweepGrid { weeks: vec![1, 3], hidden_dims: vec![], deltas: vec![] },
            &Default::default(),
            (0.6, 0.2, 0.2),
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].weeks, 1);
        assert_eq!(rows[1].weeks, 3);
        assert!(rows.iter().all(|r| r.val_mrr5.is_finite()));
    }
}
