//! Ranking construction, top-K metrics, per-day evaluation, and the
//! random-ranking Monte-Carlo baseline.
//!
//! MRR@K follows the published definition — the mean of reciprocal *true*
//! ranks of the predicted top-K — which differs from the conventional
//! first-relevant-item MRR.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{InstanceWindow, SectorCatalog};
use crate::layers::seeded_rng;
use crate::model::{forward, ModelState, PredictionBatch};
use crate::{Error, Result};

/// One stock in a ranked cross-section. Entries are stored in predicted
/// order: index `i` holds predicted rank `i + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub stock_id: String,
    pub pred_return: f64,
    pub true_return: f64,
    pub pred_move: f64,
    pub true_move: bool,
    /// Ground-truth rank of this stock, a permutation of 1..=n.
    pub true_rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub prediction_date: NaiveDate,
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    /// Order stocks by descending predicted return, ties broken by ascending
    /// stock id; true ranks use the same rule on true returns.
    pub fn from_batch(batch: &PredictionBatch) -> RankedList {
        let n = batch.predictions.len();
        let mut pred_order: Vec<usize> = (0..n).collect();
        pred_order.sort_by(|&a, &b| {
            let (pa, pb) = (&batch.predictions[a], &batch.predictions[b]);
            pb.pred_return
                .total_cmp(&pa.pred_return)
                .then_with(|| pa.stock_id.cmp(&pb.stock_id))
        });
        let mut true_order: Vec<usize> = (0..n).collect();
        true_order.sort_by(|&a, &b| {
            let (pa, pb) = (&batch.predictions[a], &batch.predictions[b]);
            pb.true_return
                .total_cmp(&pa.true_return)
                .then_with(|| pa.stock_id.cmp(&pb.stock_id))
        });
        let mut true_rank = vec![0usize; n];
        for (rank0, &idx) in true_order.iter().enumerate() {
            true_rank[idx] = rank0 + 1;
        }
        let entries = pred_order
            .into_iter()
            .map(|idx| {
                let p = &batch.predictions[idx];
                RankedEntry {
                    stock_id: p.stock_id.clone(),
                    pred_return: p.pred_return,
                    true_return: p.true_return,
                    pred_move: p.pred_move,
                    true_move: p.true_move,
                    true_rank: true_rank[idx],
                }
            })
            .collect();
        RankedList { prediction_date: batch.prediction_date, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn check_k(op: &'static str, k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::Domain {
            op,
            details: format!("K = {k} outside 1..={n}"),
        });
    }
    Ok(())
}

/// `(1/K) Σ 1/true_rank` over the predicted top-K.
pub fn mrr_at_k(ranked: &RankedList, k: usize) -> Result<f64> {
    check_k("mrr_at_k", k, ranked.len())?;
    let mut total = 0.0;
    for entry in &ranked.entries[..k] {
        total += 1.0 / entry.true_rank as f64;
    }
    Ok(total / k as f64)
}

/// `|predicted top-K ∩ true top-K| / K`.
pub fn precision_at_k(ranked: &RankedList, k: usize) -> Result<f64> {
    check_k("precision_at_k", k, ranked.len())?;
    let hits = ranked.entries[..k]
        .iter()
        .filter(|e| e.true_rank <= k)
        .count();
    Ok(hits as f64 / k as f64)
}

/// Fraction of correct binary movement calls; probabilities are binarized
/// at 0.5 (values ≥ 0.5 count as "up").
pub fn accuracy(pred_probs: &[f64], true_moves: &[bool]) -> Result<f64> {
    if pred_probs.is_empty() || pred_probs.len() != true_moves.len() {
        return Err(Error::Domain {
            op: "accuracy",
            details: format!(
                "need equal nonempty inputs, got {} and {}",
                pred_probs.len(),
                true_moves.len()
            ),
        });
    }
    let correct = pred_probs
        .iter()
        .zip(true_moves)
        .filter(|(p, m)| (**p >= 0.5) == **m)
        .count();
    Ok(correct as f64 / pred_probs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub mrr: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayDetailRow {
    pub date: NaiveDate,
    pub stock_id: String,
    pub pred_return: f64,
    pub true_return: f64,
    pub pred_move: f64,
    pub true_move: bool,
    pub pred_rank: usize,
    pub true_rank: usize,
}

/// Evaluation report: per-K metrics averaged over days, movement accuracy
/// over all stock-days, and (optionally) the per-day detail rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: BTreeMap<usize, KMetrics>,
    pub acc: f64,
    pub n_days: usize,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub detail: Vec<DayDetailRow>,
}

/// Metrics for a pre-built set of ranked lists.
pub fn metrics_over_days(
    days: &[RankedList],
    k_list: &[usize],
) -> Result<(BTreeMap<usize, KMetrics>, f64)> {
    if days.is_empty() {
        return Err(Error::Domain { op: "evaluate", details: "no days to evaluate".into() });
    }
    let mut per_k = BTreeMap::new();
    for &k in k_list {
        let mut mrr_sum = 0.0;
        let mut prec_sum = 0.0;
        for day in days {
            mrr_sum += mrr_at_k(day, k)?;
            prec_sum += precision_at_k(day, k)?;
        }
        per_k.insert(
            k,
            KMetrics { mrr: mrr_sum / days.len() as f64, precision: prec_sum / days.len() as f64 },
        );
    }
    let mut probs = Vec::new();
    let mut moves = Vec::new();
    for day in days {
        for e in &day.entries {
            probs.push(e.pred_move);
            moves.push(e.true_move);
        }
    }
    let acc = accuracy(&probs, &moves)?;
    Ok((per_k, acc))
}

/// Run the model over every instance and aggregate the three metrics;
/// MRR@5 is always included since checkpoint selection uses it.
pub fn evaluate(
    state: &ModelState,
    instances: &[InstanceWindow],
    catalog: &SectorCatalog,
    k_list: &[usize],
    with_detail: bool,
) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(Error::Domain { op: "evaluate", details: "empty instance set".into() });
    }
    let mut ks: Vec<usize> = k_list.to_vec();
    if !ks.contains(&5) {
        ks.push(5);
    }
    ks.sort_unstable();
    ks.dedup();

    let mut days = Vec::with_capacity(instances.len());
    let mut detail = Vec::new();
    for inst in instances {
        let batch = forward(state, inst, catalog)?;
        let ranked = RankedList::from_batch(&batch);
        if with_detail {
            for (i, e) in ranked.entries.iter().enumerate() {
                detail.push(DayDetailRow {
                    date: ranked.prediction_date,
                    stock_id: e.stock_id.clone(),
                    pred_return: e.pred_return,
                    true_return: e.true_return,
                    pred_move: e.pred_move,
                    true_move: e.true_move,
                    pred_rank: i + 1,
                    true_rank: e.true_rank,
                });
            }
        }
        days.push(ranked);
    }
    let (per_k, acc) = metrics_over_days(&days, &ks)?;
    Ok(EvalReport {
        k: per_k,
        acc,
        n_days: days.len(),
        seeds: vec![state.config.seed],
        detail,
    })
}

/// Monte-Carlo estimate of MRR@K and Precision@K under a uniformly random
/// ranking of `n` stocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineEstimate {
    pub n: usize,
    pub k: usize,
    pub trials: usize,
    pub mrr_mean: f64,
    pub mrr_std_err: f64,
    pub precision_mean: f64,
    pub precision_std_err: f64,
}

pub fn random_baseline(n: usize, k: usize, trials: usize, seed: u64) -> Result<BaselineEstimate> {
    check_k("random_baseline", k, n)?;
    if trials == 0 {
        return Err(Error::Domain { op: "random_baseline", details: "trials must be ≥ 1".into() });
    }
    let mut rng = seeded_rng(seed);
    let mut ranks: Vec<usize> = (1..=n).collect();
    let mut mrr_sum = 0.0;
    let mut mrr_sq = 0.0;
    let mut prec_sum = 0.0;
    let mut prec_sq = 0.0;
    for _ in 0..trials {
        // Fisher-Yates; the first K entries are the predicted top-K's
        // true ranks.
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            ranks.swap(i, j);
        }
        let mut mrr = 0.0;
        let mut hits = 0usize;
        for &r in &ranks[..k] {
            mrr += 1.0 / r as f64;
            if r <= k {
                hits += 1;
            }
        }
        let mrr = mrr / k as f64;
        let prec = hits as f64 / k as f64;
        mrr_sum += mrr;
        mrr_sq += mrr * mrr;
        prec_sum += prec;
        prec_sq += prec * prec;
    }
    let t = trials as f64;
    let mrr_mean = mrr_sum / t;
    let prec_mean = prec_sum / t;
    let mrr_var = (mrr_sq / t - mrr_mean * mrr_mean).max(0.0);
    let prec_var = (prec_sq / t - prec_mean * prec_mean).max(0.0);
    Ok(BaselineEstimate {
        n,
        k,
        trials,
        mrr_mean,
        mrr_std_err: (mrr_var / t).sqrt(),
        precision_mean: prec_mean,
        precision_std_err: (prec_var / t).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StockPrediction;

    fn batch_from(preds: &[(&str, f64, f64)]) -> PredictionBatch {
        // (id, predicted return, true return)
        PredictionBatch {
            prediction_date: NaiveDate::from_ymd_opt(2021, 3, 4).unwrap(),
            predictions: preds
                .iter()
                .map(|(id, p, t)| StockPrediction {
                    stock_id: id.to_string(),
                    pred_return: *p,
                    pred_move: if *p > 0.0 { 0.8 } else { 0.2 },
                    true_return: *t,
                    true_move: *t > 0.0,
                })
                .collect(),
            attention: Vec::new(),
        }
    }

    fn ranked_from_perm(true_ranks_in_pred_order: &[usize]) -> RankedList {
        let n = true_ranks_in_pred_order.len();
        RankedList {
            prediction_date: NaiveDate::from_ymd_opt(2021, 3, 4).unwrap(),
            entries: true_ranks_in_pred_order
                .iter()
                .enumerate()
                .map(|(i, &r)| RankedEntry {
                    stock_id: format!("S{i:02}"),
                    pred_return: (n - i) as f64,
                    true_return: (n - r) as f64,
                    pred_move: 0.5,
                    true_move: true,
                    true_rank: r,
                })
                .collect(),
        }
    }

    #[test]
    fn perfect_ranking_mrr5_is_exactly_137_over_300() {
        let ranked = ranked_from_perm(&[1, 2, 3, 4, 5, 6, 7]);
        let mrr = mrr_at_k(&ranked, 5).unwrap();
        assert_eq!(mrr.to_bits(), (137.0f64 / 300.0).to_bits());
    }

    #[test]
    fn mrr_at_one_with_true_rank_four() {
        let ranked = ranked_from_perm(&[4, 1, 2, 3]);
        assert_eq!(mrr_at_k(&ranked, 1).unwrap(), 0.25);
        assert!(matches!(mrr_at_k(&ranked, 5), Err(Error::Domain { .. })));
    }

    #[test]
    fn precision_examples() {
        let perfect = ranked_from_perm(&[1, 2, 3, 4, 5, 6]);
        assert_eq!(precision_at_k(&perfect, 5).unwrap(), 1.0);

        // Predicted top-2 hold true ranks 5 and 6: disjoint from true top-2.
        let disjoint = ranked_from_perm(&[5, 6, 1, 2, 3, 4]);
        assert_eq!(precision_at_k(&disjoint, 2).unwrap(), 0.0);

        // Overlap 3 at K = 10.
        let ranked =
            ranked_from_perm(&[1, 2, 3, 11, 12, 13, 14, 15, 16, 17, 4, 5, 6, 7, 8, 9, 10]);
        assert!((precision_at_k(&ranked, 10).unwrap() - 0.3).abs() < 1e-15);

        // Full-universe precision is always 1.
        let any = ranked_from_perm(&[3, 1, 4, 2]);
        assert_eq!(precision_at_k(&any, 4).unwrap(), 1.0);
    }

    #[test]
    fn metrics_match_brute_force_loop_oracle_on_random_permutations() {
        let mut rng = seeded_rng(1234);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=50usize);
            let mut perm: Vec<usize> = (1..=n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let ranked = ranked_from_perm(&perm);
            for k in [1usize, 5, 10, 20] {
                if k > n {
                    continue;
                }
                // Literal reading of the formulas as a plain loop.
                let mut mrr_oracle = 0.0;
                for i in 0..k {
                    mrr_oracle += 1.0 / perm[i] as f64;
                }
                let mrr_oracle = mrr_oracle / k as f64;
                let mut hits = 0;
                for i in 0..k {
                    if perm[i] <= k {
                        hits += 1;
                    }
                }
                let prec_oracle = hits as f64 / k as f64;

                assert_eq!(mrr_at_k(&ranked, k).unwrap().to_bits(), mrr_oracle.to_bits());
                assert_eq!(
                    precision_at_k(&ranked, k).unwrap().to_bits(),
                    prec_oracle.to_bits()
                );
            }
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(
            accuracy(&[0.9, 0.9, 0.1, 0.1], &[true, false, true, false]).unwrap(),
            0.5
        );
        assert!(accuracy(&[], &[]).is_err());

        // Counting oracle on pseudo-random labels.
        let mut rng = seeded_rng(9);
        let probs: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..1.0)).collect();
        let moves: Vec<bool> = (0..200).map(|_| rng.gen_bool(0.5)).collect();
        let mut correct = 0;
        for (p, m) in probs.iter().zip(&moves) {
            if (*p >= 0.5) == *m {
                correct += 1;
            }
        }
        assert_eq!(accuracy(&probs, &moves).unwrap(), correct as f64 / 200.0);
    }

    #[test]
    fn ties_break_by_ascending_stock_id() {
        let batch = batch_from(&[("B", 0.5, 0.1), ("A", 0.5, 0.1), ("C", 0.9, -0.2)]);
        let ranked = RankedList::from_batch(&batch);
        let ids: Vec<&str> = ranked.entries.iter().map(|e| e.stock_id.as_str()).collect();
        assert_eq!(ids, ["C", "A", "B"]);
        // True returns tie between A and B as well: A ranks ahead.
        let rank_of =
            |id: &str| ranked.entries.iter().find(|e| e.stock_id == id).unwrap().true_rank;
        assert_eq!(rank_of("A"), 1);
        assert_eq!(rank_of("B"), 2);
        assert_eq!(rank_of("C"), 3);
    }

    #[test]
    fn true_ranks_are_a_permutation() {
        let batch =
            batch_from(&[("A", 0.1, 0.3), ("B", -0.4, 0.3), ("C", 0.2, -0.1), ("D", 0.0, 0.0)]);
        let ranked = RankedList::from_batch(&batch);
        let mut ranks: Vec<usize> = ranked.entries.iter().map(|e| e.true_rank).collect();
        ranks.sort_unstable();
        assert_eq!(ranks, vec![1, 2, 3, 4]);
    }

    #[test]
    fn metrics_are_argsort_invariant() {
        let mut rng = seeded_rng(77);
        for _ in 0..50 {
            let preds: Vec<(String, f64, f64)> = (0..12)
                .map(|i| {
                    (
                        format!("S{i:02}"),
                        rng.gen_range(-0.1..0.1),
                        rng.gen_range(-0.1..0.1),
                    )
                })
                .collect();
            let base = batch_from(
                &preds
                    .iter()
                    .map(|(id, p, t)| (id.as_str(), *p, *t))
                    .collect::<Vec<_>>(),
            );
            // Strictly monotone transform of predictions.
            let mut transformed = base.clone();
            for p in &mut transformed.predictions {
                p.pred_return = (p.pred_return * 3.0 + 0.7).exp();
            }
            let a = RankedList::from_batch(&base);
            let b = RankedList::from_batch(&transformed);
            for k in [1, 5, 10] {
                assert_eq!(
                    mrr_at_k(&a, k).unwrap().to_bits(),
                    mrr_at_k(&b, k).unwrap().to_bits()
                );
                assert_eq!(
                    precision_at_k(&a, k).unwrap().to_bits(),
                    precision_at_k(&b, k).unwrap().to_bits()
                );
            }
        }
    }

    #[test]
    fn serialized_batch_reproduces_identical_metrics() {
        let batch = batch_from(&[("A", 0.1, 0.3), ("B", -0.4, 0.2), ("C", 0.2, -0.1)]);
        let json = serde_json::to_string(&batch).unwrap();
        let restored: PredictionBatch = serde_json::from_str(&json).unwrap();
        let a = RankedList::from_batch(&batch);
        let b = RankedList::from_batch(&restored);
        for k in 1..=3 {
            assert_eq!(
                mrr_at_k(&a, k).unwrap().to_bits(),
                mrr_at_k(&b, k).unwrap().to_bits()
            );
            assert_eq!(
                precision_at_k(&a, k).unwrap().to_bits(),
                precision_at_k(&b, k).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn baseline_degenerate_cases() {
        // n = K: precision is exactly 1 in every trial.
        let est = random_baseline(5, 5, 500, 3).unwrap();
        assert_eq!(est.precision_mean, 1.0);
        assert_eq!(est.precision_std_err, 0.0);

        // n = 2, K = 1: E[MRR@1] = (1 + 1/2)/2 = 0.75.
        let est = random_baseline(2, 1, 200_000, 4).unwrap();
        assert!((est.mrr_mean - 0.75).abs() < 4.0 * est.mrr_std_err.max(1e-6));
    }

    #[test]
    fn baseline_seeds_agree_within_combined_error() {
        let a = random_baseline(100, 5, 100_000, 11).unwrap();
        let b = random_baseline(100, 5, 100_000, 12).unwrap();
        let combined = (a.mrr_std_err.powi(2) + b.mrr_std_err.powi(2)).sqrt();
        assert!((a.mrr_mean - b.mrr_mean).abs() < 3.0 * combined);
    }

    #[test]
    fn random_predictor_matches_monte_carlo_expectation() {
        // 300 random 100-stock days vs a 1e5-trial Monte-Carlo oracle.
        let mut rng = seeded_rng(2024);
        let mut days = Vec::new();
        for _ in 0..300 {
            let mut perm: Vec<usize> = (1..=100).collect();
            for i in (1..100).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            days.push(ranked_from_perm(&perm));
        }
        let mut total = 0.0;
        for d in &days {
            total += mrr_at_k(d, 5).unwrap();
        }
        let observed = total / days.len() as f64;
        let oracle = random_baseline(100, 5, 100_000, 5).unwrap();
        // Spread across 300 days plus Monte-Carlo error.
        let day_sigma = oracle.mrr_std_err * (oracle.trials as f64).sqrt();
        let combined =
            (day_sigma * day_sigma / 300.0 + oracle.mrr_std_err * oracle.mrr_std_err).sqrt();
        assert!(
            (observed - oracle.mrr_mean).abs() < 3.0 * combined,
            "observed {observed}, expected {} ± {combined}",
            oracle.mrr_mean
        );
    }
}
