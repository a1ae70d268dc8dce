//! Full-dataset evaluation (ε = 0, no augmentation), per-class AUC with
//! bootstrap confidence intervals, and attention-map export.

pub mod auc;
pub mod export;

pub use auc::{bootstrap_ci, roc_auc};
pub use export::export_attention;

use crate::autodiff::Scalar;
use crate::data::{assemble_batch, Dataset, DatasetStats};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::util::rng_for;

#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsReport {
    /// Per-class AUC; `None` marks classes whose AUC is undefined on this
    /// split (single-class labels). Undefined classes are excluded from the
    /// mean, never imputed.
    pub per_class_auc: Vec<Option<f64>>,
    pub mean_auc: Option<f64>,
    pub per_class_ci: Vec<Option<(f64, f64)>>,
    pub mean_ci: Option<(f64, f64)>,
    pub skipped_resamples: usize,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// 0 disables the bootstrap.
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            batch_size: 32,
            bootstrap_resamples: 1000,
            seed: 0,
        }
    }
}

/// Per-sample sigmoid scores for a whole dataset, eval-mode preprocessing.
pub fn score_dataset<S: Scalar>(
    model: &Model<S>,
    ds: &Dataset,
    stats: DatasetStats,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng_for(0, "eval-noaug");
    let mut scores = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = assemble_batch::<S>(ds, chunk, stats, false, &mut rng)?;
        let pass = model.extract_state(&x)?;
        let diag = model.diagnose(&pass.state)?;
        let probs = diag.probs.to_f64_vec();
        for row in probs.chunks(ds.classes) {
            scores.push(row.to_vec());
        }
    }
    Ok(scores)
}

/// Evaluate with ε = 0 and no augmentation: per-class AUC over sigmoid
/// probabilities, mean over classes with defined AUC, percentile-bootstrap
/// confidence intervals.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    ds: &Dataset,
    stats: DatasetStats,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(Error::Contract("evaluate: empty dataset".to_string()));
    }
    let scores = score_dataset(model, ds, stats, opts.batch_size)?;
    let labels: Vec<&[u8]> = ds.samples.iter().map(|s| s.labels.as_slice()).collect();
    Ok(metrics_from_scores(
        &scores,
        &labels,
        opts.bootstrap_resamples,
        opts.seed,
    ))
}

/// Metric computation over precomputed scores; shared by `evaluate` and the
/// trainer's per-epoch loop.
pub fn metrics_from_scores(
    scores: &[Vec<f64>],
    labels: &[&[u8]],
    resamples: usize,
    seed: u64,
) -> MetricsReport {
    let n = scores.len();
    let classes = scores.first().map_or(0, |s| s.len());
    let mut per_class_auc = Vec::with_capacity(classes);
    let mut per_class_ci = Vec::with_capacity(classes);
    let mut skipped = 0usize;
    for c in 0..classes {
        let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        let l: Vec<u8> = labels.iter().map(|row| row[c]).collect();
        per_class_auc.push(roc_auc(&s, &l));
        if resamples > 0 && per_class_auc[c].is_some() {
            let mut rng = rng_for(seed, &format!("bootstrap.class{c}"));
            match bootstrap_ci(&s, &l, resamples, 0.95, &mut rng) {
                Some((ci, sk)) => {
                    per_class_ci.push(Some(ci));
                    skipped += sk;
                }
                None => per_class_ci.push(None),
            }
        } else {
            per_class_ci.push(None);
        }
    }
    let defined: Vec<f64> = per_class_auc.iter().flatten().copied().collect();
    let mean_auc = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };

    // Bootstrap the mean over classes by resampling sample indices.
    let mean_ci = if resamples > 0 && mean_auc.is_some() {
        let mut rng = rng_for(seed, "bootstrap.mean");
        let mut stats_vec = Vec::with_capacity(resamples);
        let mut sk = 0usize;
        for _ in 0..resamples {
            let mut value = None;
            for _retry in 0..10 {
                let idx: Vec<usize> = (0..n)
                    .map(|_| rand::Rng::gen_range(&mut rng, 0..n))
                    .collect();
                let mut class_aucs = Vec::new();
                for c in 0..classes {
                    if per_class_auc[c].is_none() {
                        continue;
                    }
                    let s: Vec<f64> = idx.iter().map(|&i| scores[i][c]).collect();
                    let l: Vec<u8> = idx.iter().map(|&i| labels[i][c]).collect();
                    if let Some(a) = roc_auc(&s, &l) {
                        class_aucs.push(a);
                    }
                }
                if !class_aucs.is_empty() {
                    value = Some(class_aucs.iter().sum::<f64>() / class_aucs.len() as f64);
                    break;
                }
            }
            match value {
                Some(v) => stats_vec.push(v),
                None => sk += 1,
            }
        }
        skipped += sk;
        if stats_vec.is_empty() {
            None
        } else {
            stats_vec.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let m = stats_vec.len();
            let lo = ((0.025 * m as f64).floor() as usize).min(m - 1);
            let hi = (((0.975) * m as f64).ceil() as usize).saturating_sub(1).min(m - 1);
            Some((stats_vec[lo], stats_vec[hi]))
        }
    } else {
        None
    };

    MetricsReport {
        per_class_auc,
        mean_auc,
        per_class_ci,
        mean_ci,
        skipped_resamples: skipped,
        samples: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{generate_in_memory, SyntheticConfig};
    use crate::model::{ComponentToggles, Model};

    fn small_set(seed: u64) -> (Dataset, DatasetStats) {
        let mut cfg = SyntheticConfig::default_benchmark(60, seed);
        cfg.image_size = 16;
        let ds = generate_in_memory(&cfg);
        let stats = DatasetStats::compute(&ds).unwrap();
        (ds, stats)
    }

    fn tiny_model(seed: u64) -> Model<f32> {
        let mut mc = ModelConfig::tiny_for_checks(5);
        mc.image_size = 16;
        mc.backbone.strides = vec![2, 2];
        Model::new(&mc, ComponentToggles::default(), seed).unwrap()
    }

    #[test]
    fn untrained_model_scores_near_chance() {
        let (ds, stats) = small_set(3);
        let mut sum = 0.0;
        let mut count = 0;
        for seed in 0..5 {
            let model = tiny_model(seed);
            let rep = evaluate(
                &model,
                &ds,
                stats,
                &EvalOptions {
                    bootstrap_resamples: 0,
                    ..EvalOptions::default()
                },
            )
            .unwrap();
            if let Some(m) = rep.mean_auc {
                sum += m;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        assert!((0.4..=0.6).contains(&mean), "chance-level check: {mean}");
    }

    #[test]
    fn duplication_and_monotone_transforms_leave_auc_unchanged() {
        let (ds, stats) = small_set(5);
        let model = tiny_model(0);
        let scores = score_dataset(&model, &ds, stats, 16).unwrap();
        let labels: Vec<&[u8]> = ds.samples.iter().map(|s| s.labels.as_slice()).collect();
        let base = metrics_from_scores(&scores, &labels, 0, 0);

        // duplicate every sample
        let mut dup_scores = scores.clone();
        dup_scores.extend(scores.iter().cloned());
        let mut dup_labels = labels.clone();
        dup_labels.extend(labels.iter().copied());
        let dup = metrics_from_scores(&dup_scores, &dup_labels, 0, 0);
        assert_eq!(base.per_class_auc, dup.per_class_auc);

        // logit transform of all scores
        let logit_scores: Vec<Vec<f64>> = scores
            .iter()
            .map(|row| row.iter().map(|&p| (p / (1.0 - p)).ln()).collect())
            .collect();
        let tr = metrics_from_scores(&logit_scores, &labels, 0, 0);
        for (a, b) in base.per_class_auc.iter().zip(&tr.per_class_auc) {
            match (a, b) {
                (Some(x), Some(y)) => assert!((x - y).abs() < 1e-12),
                (None, None) => {}
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn evaluation_is_order_independent() {
        let (ds, stats) = small_set(7);
        let model = tiny_model(1);
        let rep = evaluate(
            &model,
            &ds,
            stats,
            &EvalOptions {
                bootstrap_resamples: 0,
                ..EvalOptions::default()
            },
        )
        .unwrap();

        let mut rev = ds.clone();
        rev.samples.reverse();
        let rep_rev = evaluate(
            &model,
            &rev,
            stats,
            &EvalOptions {
                bootstrap_resamples: 0,
                ..EvalOptions::default()
            },
        )
        .unwrap();
        for (a, b) in rep.per_class_auc.iter().zip(&rep_rev.per_class_auc) {
            match (a, b) {
                (Some(x), Some(y)) => assert!((x - y).abs() < 1e-12),
                (None, None) => {}
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn empty_dataset_is_a_contract_error() {
        let (ds, stats) = small_set(9);
        let empty = Dataset {
            samples: Vec::new(),
            ..ds
        };
        let model = tiny_model(2);
        assert!(evaluate(&model, &empty, stats, &EvalOptions::default()).is_err());
    }

    #[test]
    fn ci_brackets_the_point_estimate() {
        let (ds, stats) = small_set(11);
        let model = tiny_model(3);
        let rep = evaluate(
            &model,
            &ds,
            stats,
            &EvalOptions {
                bootstrap_resamples: 200,
                ..EvalOptions::default()
            },
        )
        .unwrap();
        if let (Some(m), Some((lo, hi))) = (rep.mean_auc, rep.mean_ci) {
            assert!(lo <= m && m <= hi, "{lo} <= {m} <= {hi}");
        }
    }
}
