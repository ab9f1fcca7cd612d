//! Class-wise diagnostics: per-class accuracy, CV, MCD, CVC, confusion
//! matrices, misclassified/homing matrices and report assembly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attacks::{attack_subset, AdversarialBatch, AttackSpec};
use crate::autodiff::softmax_rows;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{init_model, ArchitectureSpec, Classifier};
use crate::tensor::{Real, Tensor};
use crate::training::{train, TrainSpec};

/// Per-class accuracy `correct_c / count_c`; `None` for classes without
/// examples.
pub fn classwise_accuracy(
    predictions: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<Vec<Option<f64>>> {
    check_aligned(predictions, labels, classes)?;
    let mut correct = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        count[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    Ok(correct
        .iter()
        .zip(&count)
        .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
        .collect())
}

fn check_aligned(predictions: &[usize], labels: &[usize], classes: usize) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().chain(predictions).find(|&&v| v >= classes) {
        return Err(Error::invalid(format!(
            "class {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Fraction of predictions equal to their labels.
pub fn total_accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let ok = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    ok as f64 / labels.len() as f64
}

/// The accuracies of classes that have examples.
pub fn defined(accuracies: &[Option<f64>]) -> Vec<f64> {
    accuracies.iter().flatten().copied().collect()
}

/// Population variance of the per-class accuracies.
pub fn cv(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::invalid("cv of an empty accuracy vector"));
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    Ok(accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n)
}

/// Largest minus smallest per-class accuracy.
pub fn mcd(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::invalid("mcd of an empty accuracy vector"));
    }
    let max = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = accuracies.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

/// Mean over rows of the per-row population variance of an `(N, C)`
/// confidence matrix. `None` when there are no rows.
pub fn cvc<T: Real>(confidences: &Tensor<T>) -> Option<f64> {
    if confidences.is_empty() || confidences.batch() == 0 {
        return None;
    }
    let c = confidences.row_len() as f64;
    let total: f64 = (0..confidences.batch())
        .map(|i| {
            let row = confidences.row(i);
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / c;
            row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / c
        })
        .sum();
    Some(total / confidences.batch() as f64)
}

/// Per-class CVC of the natural softmax confidences of `ds`.
pub fn classwise_cvc(model: &Classifier<f32>, ds: &LabeledDataset) -> Result<Vec<Option<f64>>> {
    let mut probs = Vec::with_capacity(ds.len() * model.classes());
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(512) {
        let logits = model.evaluate(&ds.images.select_rows(chunk))?;
        probs.extend_from_slice(softmax_rows(&logits, 1.0)?.data());
    }
    let probs = Tensor::new(vec![ds.len(), model.classes()], probs)?;
    Ok(ds
        .class_indices()
        .iter()
        .map(|idx| cvc(&probs.select_rows(idx)))
        .collect())
}

/// Row-normalised prediction counts: entry `(i, j)` is the fraction of
/// class-`i` examples predicted as `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<usize>>,
    pub rates: Vec<Vec<f64>>,
    /// Classes without examples; their rows are all zero.
    pub empty_rows: Vec<usize>,
}

pub fn confusion(
    predictions: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix> {
    check_aligned(predictions, labels, classes)?;
    let mut counts = vec![vec![0usize; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        counts[y][p] += 1;
    }
    let mut empty_rows = Vec::new();
    let rates = counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                empty_rows.push(i);
                vec![0.0; classes]
            } else {
                row.iter().map(|&c| c as f64 / n as f64).collect()
            }
        })
        .collect();
    Ok(ConfusionMatrix {
        classes,
        counts,
        rates,
        empty_rows,
    })
}

impl ConfusionMatrix {
    pub fn diagonal(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|i| (!self.empty_rows.contains(&i)).then(|| self.rates[i][i]))
            .collect()
    }

    /// Header row of class ids, then one row of fractions per class.
    pub fn to_csv(&self) -> String {
        let mut out = join((0..self.classes).map(|c| c.to_string()));
        out.push('\n');
        for row in &self.rates {
            out.push_str(&join(row.iter().map(|v| v.to_string())));
            out.push('\n');
        }
        out
    }
}

fn join(items: impl Iterator<Item = String>) -> String {
    items.collect::<Vec<_>>().join(",")
}

/// Misclassified counts `M`, homing counts `H` and the example ids behind
/// every cell of `M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomingMatrices {
    pub classes: usize,
    pub misclassified: Vec<Vec<usize>>,
    pub homing: Vec<Vec<usize>>,
    pub ids: Vec<Vec<Vec<usize>>>,
}

/// `M[i][j]` counts class-`i` examples whose confound class is `j`. `ids[k]`
/// names example `k` in the id lists (its dataset index, typically).
pub fn misclassified_matrix(
    predictions: &[usize],
    labels: &[usize],
    ids: &[usize],
    classes: usize,
) -> Result<HomingMatrices> {
    check_aligned(predictions, labels, classes)?;
    if ids.len() != labels.len() {
        return Err(Error::invalid("one id per example required"));
    }
    let mut m = HomingMatrices {
        classes,
        misclassified: vec![vec![0; classes]; classes],
        homing: vec![vec![0; classes]; classes],
        ids: vec![vec![Vec::new(); classes]; classes],
    };
    for ((&p, &y), &id) in predictions.iter().zip(labels).zip(ids) {
        if p != y {
            m.misclassified[y][p] += 1;
            m.ids[y][p].push(id);
        }
    }
    Ok(m)
}

/// [`misclassified_matrix`] of an attack on a whole dataset, keyed by
/// dataset index.
pub fn misclassified_from_batch<T: Real>(
    batch: &AdversarialBatch<T>,
    classes: usize,
) -> Result<HomingMatrices> {
    let ids: Vec<usize> = (0..batch.len()).collect();
    misclassified_matrix(&batch.predictions, &batch.labels, &ids, classes)
}

impl HomingMatrices {
    /// Confound classes with a nonzero column in `M`.
    pub fn confound_columns(&self) -> Vec<usize> {
        (0..self.classes)
            .filter(|&j| (0..self.classes).any(|i| self.misclassified[i][j] > 0))
            .collect()
    }

    /// Largest off-diagonal cell `(i, j)` of `M`; ties go to the first in
    /// row-major order.
    pub fn top_cell(&self) -> Option<(usize, usize)> {
        let mut best: Option<(usize, usize, usize)> = None;
        for i in 0..self.classes {
            for j in 0..self.classes {
                let v = self.misclassified[i][j];
                if v > 0 && best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((i, j, v));
                }
            }
        }
        best.map(|(i, j, _)| (i, j))
    }

    /// Records per-cell homing counts. Each count must not exceed `M`.
    pub fn set_homing(&mut self, counts: &BTreeMap<(usize, usize), usize>) -> Result<()> {
        for (&(i, j), &h) in counts {
            if i >= self.classes || j >= self.classes || i == j {
                return Err(Error::invalid(format!(
                    "homing cell ({i}, {j}) is not off-diagonal"
                )));
            }
            if h > self.misclassified[i][j] {
                return Err(Error::invalid(format!(
                    "homing count {h} exceeds M[{i}][{j}] = {}",
                    self.misclassified[i][j]
                )));
            }
            self.homing[i][j] = h;
        }
        Ok(())
    }

    pub fn homing_bounded(&self) -> bool {
        (0..self.classes).all(|i| {
            self.homing[i][i] == 0
                && self.misclassified[i][i] == 0
                && (0..self.classes).all(|j| self.homing[i][j] <= self.misclassified[i][j])
        })
    }
}

/// Retrains without each confound class `j` and re-attacks column `j`.
///
/// `matrices` must come from attacking the baseline model on `test`. For
/// every nonzero column `j`, a model with the baseline architecture and seed
/// is trained on `train.remove_class(j)` with `spec`, the examples listed in
/// column `j` are attacked again, and `H[i][j]` counts those now predicted as
/// their true class `i`. `on_retrain` is called with each removed class
/// before its run.
pub fn homing_experiment(
    arch: &ArchitectureSpec,
    seed: u64,
    train_ds: &LabeledDataset,
    test: &LabeledDataset,
    attack: &AttackSpec,
    spec: &TrainSpec,
    matrices: &mut HomingMatrices,
    on_retrain: &mut dyn FnMut(usize),
) -> Result<Vec<Classifier<f32>>> {
    let mut retrained = Vec::new();
    for j in matrices.confound_columns() {
        on_retrain(j);
        retrained.push(homing_column(
            arch, seed, train_ds, test, attack, spec, matrices, j,
        )?);
    }
    Ok(retrained)
}

/// One column of [`homing_experiment`]: retrains without class `j`, fills
/// `H[.][j]` and returns the retrained model.
#[allow(clippy::too_many_arguments)]
pub fn homing_column(
    arch: &ArchitectureSpec,
    seed: u64,
    train_ds: &LabeledDataset,
    test: &LabeledDataset,
    attack: &AttackSpec,
    spec: &TrainSpec,
    matrices: &mut HomingMatrices,
    j: usize,
) -> Result<Classifier<f32>> {
    if j >= matrices.classes {
        return Err(Error::invalid(format!("class {j} out of range")));
    }
    let reduced = train_ds.remove_class(j)?;
    let init = init_model::<f32>(arch, seed)?;
    let (model, _) = train(init, &reduced, spec, None)?;
    let mut counts = BTreeMap::new();
    for i in 0..matrices.classes {
        let ids = &matrices.ids[i][j];
        if ids.is_empty() {
            continue;
        }
        let out = attack_subset(&model, test, ids, attack, None)?;
        let robust = out.predictions.iter().filter(|&&p| p == i).count();
        counts.insert((i, j), robust);
    }
    matrices.set_homing(&counts)?;
    Ok(model)
}

/// Bookkeeping that travels with a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub defense: String,
    pub attack_name: String,
    pub attack: AttackSpec,
    pub architecture: String,
    pub model_id: String,
    /// Confidences used for CVC; always natural test examples.
    pub cvc_mode: String,
    pub examples: usize,
    pub generated_at: u64,
}

/// Per-class natural and robust accuracies (fractions) with their spread
/// statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClasswiseReport {
    pub classes: usize,
    pub natural_accuracy: Vec<Option<f64>>,
    pub robust_accuracy: Vec<Option<f64>>,
    pub natural_total: f64,
    pub robust_total: f64,
    pub natural_cv: f64,
    pub natural_mcd: f64,
    pub robust_cv: f64,
    pub robust_mcd: f64,
    pub cvc: Vec<Option<f64>>,
    pub metadata: ReportMetadata,
}

impl ClasswiseReport {
    /// Builds a report from an attack on the whole of `test`.
    pub fn from_attack(
        model: &Classifier<f32>,
        test: &LabeledDataset,
        batch: &AdversarialBatch<f32>,
        defense: &str,
        attack_name: &str,
        attack: &AttackSpec,
    ) -> Result<Self> {
        if batch.labels != test.labels {
            return Err(Error::invalid(
                "attack batch is not aligned with the test set",
            ));
        }
        let c = test.classes;
        let natural_accuracy = classwise_accuracy(&batch.natural_predictions, &batch.labels, c)?;
        let robust_accuracy = classwise_accuracy(&batch.predictions, &batch.labels, c)?;
        let nat = defined(&natural_accuracy);
        let rob = defined(&robust_accuracy);
        Ok(Self {
            classes: c,
            natural_total: total_accuracy(&batch.natural_predictions, &batch.labels),
            robust_total: batch.robust_accuracy(),
            natural_cv: cv(&nat)?,
            natural_mcd: mcd(&nat)?,
            robust_cv: cv(&rob)?,
            robust_mcd: mcd(&rob)?,
            natural_accuracy,
            robust_accuracy,
            cvc: classwise_cvc(model, test)?,
            metadata: ReportMetadata {
                defense: defense.to_string(),
                attack_name: attack_name.to_string(),
                attack: attack.clone(),
                architecture: model.arch.id(),
                model_id: model.to_checkpoint().fingerprint(),
                cvc_mode: "natural".into(),
                examples: test.len(),
                generated_at: unix_now(),
            },
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Decode {
            what: "classwise report",
            offset: 0,
            reason: e.to_string(),
        })
    }
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Percent with one decimal, as used in summary tables.
pub fn percent(fraction: f64) -> String {
    format!("{:.1}", fraction * 100.0)
}

/// Table of `(defense, attack)` rows with total, per-class robust accuracy,
/// CV and MCD, all in percent units.
pub fn summary_csv(reports: &[ClasswiseReport]) -> Result<String> {
    let classes = reports
        .iter()
        .map(|r| r.classes)
        .max()
        .ok_or_else(|| Error::invalid("no reports to summarise"))?;
    let mut header = vec![
        "defense".to_string(),
        "attack".into(),
        "model_id".into(),
        "tot".into(),
    ];
    header.extend((0..classes).map(|c| format!("class_{c}")));
    header.extend(["cv".to_string(), "mcd".into()]);
    let mut out = header.join(",");
    out.push('\n');
    for r in reports {
        let pct: Vec<f64> = defined(&r.robust_accuracy)
            .iter()
            .map(|a| a * 100.0)
            .collect();
        let mut row = vec![
            r.metadata.defense.clone(),
            r.metadata.attack_name.clone(),
            r.metadata.model_id.clone(),
            percent(r.robust_total),
        ];
        for c in 0..classes {
            row.push(match r.robust_accuracy.get(c).copied().flatten() {
                Some(a) => percent(a),
                None => String::new(),
            });
        }
        row.push(format!("{:.1}", cv(&pct)?));
        row.push(format!("{:.1}", mcd(&pct)?));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}
