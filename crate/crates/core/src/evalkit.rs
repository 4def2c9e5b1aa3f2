//! Evaluation metrics and the k-fold cross-validation protocol.
//!
//! Conventions, also noted in the formatted report: Pearson coefficients
//! are reported in percent as mean +/- sd across indices and folds;
//! Bland-Altman limits of agreement use the sample standard deviation
//! (mean difference +/- 1.96 sd); spreads over folds are sample sd.

use crate::config::{AblationConfig, EvalConfig, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{train_model, DmqcaModel, INDEX_COUNT, INDEX_NAMES};
use crate::phantom::Sample;
use crate::tensor::Tensor;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

fn check_pred_shapes(preds: &Tensor, labels: &Tensor) -> Result<usize> {
    if preds.shape() != labels.shape() {
        return Err(Error::Dimension(format!(
            "prediction shape {:?} != label shape {:?}",
            preds.shape(),
            labels.shape()
        )));
    }
    match preds.shape() {
        [n, c] if *c == INDEX_COUNT && *n > 0 => Ok(*n),
        other => Err(Error::Dimension(format!(
            "expected [N, {INDEX_COUNT}] predictions, got {other:?}"
        ))),
    }
}

/// Per-index and overall mean absolute error for [N, 6] predictions.
pub fn mae(preds: &Tensor, labels: &Tensor) -> Result<([f64; INDEX_COUNT], f64)> {
    let n = check_pred_shapes(preds, labels)?;
    let mut per = [0.0; INDEX_COUNT];
    for i in 0..n {
        for j in 0..INDEX_COUNT {
            per[j] += (preds.data()[i * INDEX_COUNT + j] - labels.data()[i * INDEX_COUNT + j]).abs();
        }
    }
    for v in per.iter_mut() {
        *v /= n as f64;
    }
    let overall = per.iter().sum::<f64>() / INDEX_COUNT as f64;
    Ok((per, overall))
}

/// Sample Pearson correlation coefficient. Zero variance in either input
/// leaves the coefficient undefined and is reported as an error rather
/// than silently returning 0 or NaN.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Argument(format!(
            "pearson needs two equal-length series of at least 2 points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BlandAltman {
    pub mean_diff: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

/// Bland-Altman agreement: differences pred - label against pair means,
/// with limits of agreement mean_diff +/- 1.96 * sample sd.
/// Returns the stats and the (mean, diff) pairs for plotting/CSV export.
pub fn bland_altman(preds: &[f64], labels: &[f64]) -> Result<(BlandAltman, Vec<(f64, f64)>)> {
    if preds.len() != labels.len() || preds.len() < 2 {
        return Err(Error::Argument(
            "bland_altman needs two equal-length series of at least 2 points".into(),
        ));
    }
    let pairs: Vec<(f64, f64)> = preds
        .iter()
        .zip(labels)
        .map(|(&p, &l)| ((p + l) / 2.0, p - l))
        .collect();
    let n = pairs.len() as f64;
    let mean_diff = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let var = pairs.iter().map(|p| (p.1 - mean_diff).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    Ok((
        BlandAltman {
            mean_diff,
            loa_low: mean_diff - 1.96 * sd,
            loa_high: mean_diff + 1.96 * sd,
        },
        pairs,
    ))
}

pub fn bland_altman_csv(pairs: &[(f64, f64)]) -> String {
    let mut s = String::from("mean,diff\n");
    for (m, d) in pairs {
        s.push_str(&format!("{m},{d}\n"));
    }
    s
}

/// Seeded k-fold partition of 0..n. Fold sizes differ by at most one and
/// every index appears in exactly one test fold.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 || k > n {
        return Err(Error::Argument(format!(
            "need 2 <= k <= n, got k={k}, n={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = Vec::with_capacity(k);
    let base = n / k;
    let extra = n % k;
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let test: Vec<usize> = order[start..start + size].to_vec();
        let train: Vec<usize> = order[..start]
            .iter()
            .chain(&order[start + size..])
            .copied()
            .collect();
        folds.push((train, test));
        start += size;
    }
    Ok(folds)
}

/// Held-out predictions from one fold.
#[derive(Clone, Debug)]
pub struct FoldPredictions {
    pub fold: usize,
    /// (sample id, prediction [6], label [6])
    pub test: Vec<(usize, Tensor, Tensor)>,
    /// Mean of the training labels; the constant baseline predictor.
    pub train_label_mean: Tensor,
    /// True when training diverged; excluded from aggregates.
    pub failed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_ids: Vec<usize>,
    pub per_index_mae: Vec<f64>,
    pub overall_mae: f64,
    pub baseline_mae: f64,
    pub failed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_name: String,
    pub n_samples: usize,
    pub k_folds: usize,
    pub per_index_mae: Vec<f64>,
    /// Overall MAE aggregated over all held-out samples.
    pub overall_mae: f64,
    /// Spread of per-sample mean absolute errors (sample sd).
    pub overall_mae_sd_over_samples: f64,
    pub overall_mae_mean_over_folds: f64,
    pub overall_mae_sd_over_folds: f64,
    /// Percent, aggregated across indices and folds; None when every
    /// (index, fold) correlation was undefined.
    pub pearson_mean_pct: Option<f64>,
    pub pearson_sd_pct: Option<f64>,
    /// Count of (index, fold) pairs where the correlation was undefined
    /// (e.g. a constant predictor).
    pub pearson_undefined: usize,
    pub bland_altman: Vec<BlandAltman>,
    /// Constant-mean baseline MAE averaged over folds.
    pub baseline_mae: f64,
    pub folds: Vec<FoldReport>,
    #[serde(skip)]
    pub bland_altman_pairs: Vec<Vec<(f64, f64)>>,
}

fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn stack_rows(rows: &[&Tensor]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * INDEX_COUNT);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::new(vec![rows.len(), INDEX_COUNT], data)
}

/// Aggregate per-fold held-out predictions into a report. Public so that
/// oracle predictors can be pushed through the exact same aggregation the
/// training protocol uses.
pub fn aggregate_report(
    config_name: &str,
    n_samples: usize,
    folds: Vec<FoldPredictions>,
) -> Result<EvalReport> {
    let k = folds.len();
    let live: Vec<&FoldPredictions> = folds.iter().filter(|f| !f.failed).collect();
    if live.is_empty() {
        return Err(Error::Numeric("all folds failed to train".into()));
    }

    // audit: no sample id may appear in more than one test fold
    let mut seen = std::collections::HashSet::new();
    for f in &folds {
        for (id, _, _) in &f.test {
            if !seen.insert(*id) {
                return Err(Error::Contract(format!(
                    "sample {id} appears in more than one test fold"
                )));
            }
        }
    }

    let mut fold_reports = Vec::with_capacity(k);
    let mut fold_overall = Vec::new();
    let mut pearsons: Vec<f64> = Vec::new();
    let mut undefined = 0usize;
    let mut all_preds: Vec<&Tensor> = Vec::new();
    let mut all_labels: Vec<&Tensor> = Vec::new();
    let mut baseline_maes = Vec::new();

    for f in &folds {
        if f.failed {
            fold_reports.push(FoldReport {
                fold: f.fold,
                test_ids: f.test.iter().map(|t| t.0).collect(),
                per_index_mae: vec![f64::NAN; INDEX_COUNT],
                overall_mae: f64::NAN,
                baseline_mae: f64::NAN,
                failed: true,
            });
            continue;
        }
        let preds = stack_rows(&f.test.iter().map(|t| &t.1).collect::<Vec<_>>())?;
        let labels = stack_rows(&f.test.iter().map(|t| &t.2).collect::<Vec<_>>())?;
        let (per, overall) = mae(&preds, &labels)?;
        let base_rows: Vec<Tensor> = f.test.iter().map(|_| f.train_label_mean.clone()).collect();
        let base = stack_rows(&base_rows.iter().collect::<Vec<_>>())?;
        let (_, base_overall) = mae(&base, &labels)?;
        baseline_maes.push(base_overall);
        for j in 0..INDEX_COUNT {
            let xs: Vec<f64> = f.test.iter().map(|t| t.1.data()[j]).collect();
            let ys: Vec<f64> = f.test.iter().map(|t| t.2.data()[j]).collect();
            match pearson(&xs, &ys) {
                Ok(r) => pearsons.push(100.0 * r),
                Err(Error::UndefinedCorrelation) => undefined += 1,
                Err(e) => return Err(e),
            }
        }
        fold_overall.push(overall);
        for (_, p, l) in &f.test {
            all_preds.push(p);
            all_labels.push(l);
        }
        fold_reports.push(FoldReport {
            fold: f.fold,
            test_ids: f.test.iter().map(|t| t.0).collect(),
            per_index_mae: per.to_vec(),
            overall_mae: overall,
            baseline_mae: base_overall,
            failed: false,
        });
    }

    let preds = stack_rows(&all_preds)?;
    let labels = stack_rows(&all_labels)?;
    let (per_index, overall) = mae(&preds, &labels)?;
    let per_sample: Vec<f64> = all_preds
        .iter()
        .zip(&all_labels)
        .map(|(p, l)| {
            p.data()
                .iter()
                .zip(l.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / INDEX_COUNT as f64
        })
        .collect();

    let mut ba_stats = Vec::with_capacity(INDEX_COUNT);
    let mut ba_pairs = Vec::with_capacity(INDEX_COUNT);
    for j in 0..INDEX_COUNT {
        let xs: Vec<f64> = all_preds.iter().map(|p| p.data()[j]).collect();
        let ys: Vec<f64> = all_labels.iter().map(|l| l.data()[j]).collect();
        let (stats, pairs) = bland_altman(&xs, &ys)?;
        ba_stats.push(stats);
        ba_pairs.push(pairs);
    }

    Ok(EvalReport {
        config_name: config_name.to_string(),
        n_samples,
        k_folds: k,
        per_index_mae: per_index.to_vec(),
        overall_mae: overall,
        overall_mae_sd_over_samples: sample_sd(&per_sample),
        overall_mae_mean_over_folds: fold_overall.iter().sum::<f64>() / fold_overall.len() as f64,
        overall_mae_sd_over_folds: sample_sd(&fold_overall),
        pearson_mean_pct: if pearsons.is_empty() {
            None
        } else {
            Some(pearsons.iter().sum::<f64>() / pearsons.len() as f64)
        },
        pearson_sd_pct: if pearsons.is_empty() {
            None
        } else {
            Some(sample_sd(&pearsons))
        },
        pearson_undefined: undefined,
        bland_altman: ba_stats,
        baseline_mae: baseline_maes.iter().sum::<f64>() / baseline_maes.len() as f64,
        folds: fold_reports,
        bland_altman_pairs: ba_pairs,
    })
}

fn label_mean(samples: &[&Sample]) -> Tensor {
    let mut m = vec![0.0; INDEX_COUNT];
    for s in samples {
        for j in 0..INDEX_COUNT {
            m[j] += s.label.data()[j];
        }
    }
    for v in m.iter_mut() {
        *v /= samples.len() as f64;
    }
    Tensor::from_vec(m)
}

/// Run seeded k-fold cross-validation: for each fold, train a fresh model
/// on the training split and predict the held-out split. Folds run in
/// parallel; determinism comes from per-fold seeds, not scheduling.
pub fn run_protocol(
    samples: &[Sample],
    model_cfg: &ModelConfig,
    ablation: &AblationConfig,
    config_name: &str,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
) -> Result<EvalReport> {
    let folds = kfold(samples.len(), eval_cfg.k_folds, eval_cfg.seed)?;
    let results: Vec<FoldPredictions> = folds
        .into_par_iter()
        .enumerate()
        .map(|(fi, (train_ids, test_ids))| -> Result<FoldPredictions> {
            let train: Vec<Sample> = train_ids.iter().map(|&i| samples[i].clone()).collect();
            let mut fold_train_cfg = train_cfg.clone();
            fold_train_cfg.seed = train_cfg.seed.wrapping_add(1 + fi as u64);
            let mut model = DmqcaModel::new(model_cfg, ablation, fold_train_cfg.seed)?;
            let failed = match train_model(&mut model, &train, &fold_train_cfg) {
                Ok(_) => false,
                Err(Error::Numeric(_)) => true,
                Err(e) => return Err(e),
            };
            let mut test = Vec::with_capacity(test_ids.len());
            if !failed {
                for &i in &test_ids {
                    let pred = model.predict(&samples[i])?;
                    test.push((i, pred, samples[i].label.clone()));
                }
            } else {
                for &i in &test_ids {
                    test.push((i, Tensor::zeros(&[INDEX_COUNT]), samples[i].label.clone()));
                }
            }
            Ok(FoldPredictions {
                fold: fi,
                test,
                train_label_mean: label_mean(&train.iter().collect::<Vec<_>>()),
                failed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate_report(config_name, samples.len(), results)
}

/// Plain-text results table, one row per report.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    s.push_str("Results (MAE in mm; Pearson in percent, mean +/- sd across indices and folds;\n");
    s.push_str("Bland-Altman limits use mean diff +/- 1.96 * sample sd; fold spreads are sample sd)\n\n");
    s.push_str(&format!(
        "{:<14} {:>16} {:>16} {:>10}",
        "Method", "Overall MAE", "Pearson (%)", "Baseline"
    ));
    for name in INDEX_NAMES {
        s.push_str(&format!(" {:>8}", name));
    }
    s.push('\n');
    for r in reports {
        let pearson = match (r.pearson_mean_pct, r.pearson_sd_pct) {
            (Some(m), Some(sd)) => format!("{m:.2} ± {sd:.2}"),
            _ => "undefined".to_string(),
        };
        s.push_str(&format!(
            "{:<14} {:>16} {:>16} {:>10.4}",
            r.config_name,
            format!(
                "{:.4} ± {:.4}",
                r.overall_mae_mean_over_folds, r.overall_mae_sd_over_folds
            ),
            pearson,
            r.baseline_mae,
        ));
        for j in 0..INDEX_COUNT {
            s.push_str(&format!(" {:>8.4}", r.per_index_mae[j]));
        }
        s.push('\n');
        if r.pearson_undefined > 0 {
            s.push_str(&format!(
                "  note: {} (index, fold) correlations undefined (constant series)\n",
                r.pearson_undefined
            ));
        }
    }
    s
}
