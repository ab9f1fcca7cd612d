//! Background experiments: training on per-class coloured backgrounds and
//! replacing backgrounds at inference time.

use serde::{Deserialize, Serialize};

use crate::analysis::{confusion, ConfusionMatrix};
use crate::attacks::{attack_dataset, attack_subset, AttackSpec};
use crate::data::background::replace_background;
use crate::data::{colorize_background, BackgroundPlan, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{init_model, ArchitectureSpec, Classifier};
use crate::training::{train, TrainLog, TrainSpec};

/// Share of off-diagonal confusion mass that stays inside a background
/// group. `None` when there is no off-diagonal mass.
pub fn within_group_flip_mass(counts: &[Vec<usize>], groups: &[usize]) -> Option<f64> {
    let (mut same, mut total) = (0usize, 0usize);
    for (i, row) in counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if i != j {
                total += c;
                if groups[i] == groups[j] {
                    same += c;
                }
            }
        }
    }
    (total > 0).then(|| same as f64 / total as f64)
}

/// Expected within-group mass if every off-diagonal cell were equally
/// likely: `sum_i (|G_i| - 1) / (C (C - 1))`.
pub fn random_flip_baseline(groups: &[usize]) -> f64 {
    let c = groups.len();
    if c < 2 {
        return 0.0;
    }
    let same: usize = groups
        .iter()
        .map(|g| groups.iter().filter(|h| *h == g).count() - 1)
        .sum();
    same as f64 / (c * (c - 1)) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundStudyResult {
    pub plan: BackgroundPlan,
    pub natural: ConfusionMatrix,
    pub adversarial: ConfusionMatrix,
    pub natural_within_group: Option<f64>,
    pub adversarial_within_group: Option<f64>,
    pub random_baseline: f64,
}

/// Attacks an already colourised test set and summarises both confusions.
pub fn study_from_model(
    model: &Classifier<f32>,
    colored_test: &LabeledDataset,
    plan: &BackgroundPlan,
    attack: &AttackSpec,
) -> Result<BackgroundStudyResult> {
    let c = colored_test.classes;
    plan.validate(c)?;
    let out = attack_dataset(model, colored_test, attack, None)?;
    let natural = confusion(&out.natural_predictions, &out.labels, c)?;
    let adversarial = confusion(&out.predictions, &out.labels, c)?;
    let groups = plan.groups();
    Ok(BackgroundStudyResult {
        plan: plan.clone(),
        natural_within_group: within_group_flip_mass(&natural.counts, &groups),
        adversarial_within_group: within_group_flip_mass(&adversarial.counts, &groups),
        random_baseline: random_flip_baseline(&groups[..c]),
        natural,
        adversarial,
    })
}

/// Colourises both splits, trains a fresh model and runs [`study_from_model`].
/// `test_plan` defaults to `plan`.
#[allow(clippy::too_many_arguments)]
pub fn run_background_study(
    train_gray: &LabeledDataset,
    test_gray: &LabeledDataset,
    plan: &BackgroundPlan,
    test_plan: Option<&BackgroundPlan>,
    arch: &ArchitectureSpec,
    model_seed: u64,
    spec: &TrainSpec,
    attack: &AttackSpec,
) -> Result<(BackgroundStudyResult, Classifier<f32>, TrainLog)> {
    let test_plan = test_plan.unwrap_or(plan);
    let train_rgb = colorize_background(train_gray, plan)?;
    let test_rgb = colorize_background(test_gray, test_plan)?;
    if arch.input_shape()[0] != 3 {
        return Err(Error::invalid(
            "background study needs a three-channel architecture",
        ));
    }
    let (model, log) = train(init_model(arch, model_seed)?, &train_rgb, spec, None)?;
    let result = study_from_model(&model, &test_rgb, test_plan, attack)?;
    Ok((result, model, log))
}

/// Prediction counts for one class, before and after background
/// replacement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseCounts {
    pub before: Vec<usize>,
    pub after: Vec<usize>,
}

impl PhaseCounts {
    /// `predicted_class,count_before,count_after,delta` with a signed delta.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("predicted_class,count_before,count_after,delta\n");
        for (c, (&b, &a)) in self.before.iter().zip(&self.after).enumerate() {
            out.push_str(&format!("{c},{b},{a},{}\n", format_delta(b, a)));
        }
        out
    }
}

/// `after - before` with an explicit sign, e.g. `+141`, `-25`, `+0`.
pub fn format_delta(before: usize, after: usize) -> String {
    format!("{:+}", after as i64 - before as i64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceAdjustResult {
    pub target_class: usize,
    pub examples: usize,
    pub color: [f32; 3],
    pub threshold: f32,
    pub natural: PhaseCounts,
    pub adversarial: PhaseCounts,
}

impl InferenceAdjustResult {
    pub fn natural_correct_delta(&self) -> i64 {
        let c = self.target_class;
        self.natural.after[c] as i64 - self.natural.before[c] as i64
    }

    pub fn adversarial_correct_delta(&self) -> i64 {
        let c = self.target_class;
        self.adversarial.after[c] as i64 - self.adversarial.before[c] as i64
    }
}

fn tally(predictions: &[usize], classes: usize) -> Vec<usize> {
    let mut out = vec![0; classes];
    for &p in predictions {
        out[p] += 1;
    }
    out
}

/// Natural and adversarial prediction counts for every test image of
/// `target_class`, on the originals and after replacing pixels outside the
/// threshold foreground mask with `color`.
pub fn run_inference_adjust(
    model: &Classifier<f32>,
    ds: &LabeledDataset,
    target_class: usize,
    attack: &AttackSpec,
    threshold: f32,
    color: [f32; 3],
) -> Result<InferenceAdjustResult> {
    let c = ds.classes;
    if target_class >= c {
        return Err(Error::invalid(format!("class {target_class} out of range")));
    }
    let idx = ds.class_indices().swap_remove(target_class);
    if idx.is_empty() {
        return Err(Error::invalid(format!(
            "no test images of class {target_class}"
        )));
    }
    let originals = ds.subset(&idx);
    let replaced = replace_background(&originals, color, threshold)?;
    let run = |d: &LabeledDataset| -> Result<(Vec<usize>, Vec<usize>)> {
        let all: Vec<usize> = (0..d.len()).collect();
        let out = attack_subset(model, d, &all, attack, None)?;
        Ok((out.natural_predictions, out.predictions))
    };
    let (nat_before, adv_before) = run(&originals)?;
    let (nat_after, adv_after) = run(&replaced)?;
    Ok(InferenceAdjustResult {
        target_class,
        examples: idx.len(),
        color,
        threshold,
        natural: PhaseCounts {
            before: tally(&nat_before, c),
            after: tally(&nat_after, c),
        },
        adversarial: PhaseCounts {
            before: tally(&adv_before, c),
            after: tally(&adv_after, c),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_group_mass_is_one() {
        let counts = vec![vec![5, 2, 1], vec![0, 4, 3], vec![1, 0, 9]];
        assert_eq!(within_group_flip_mass(&counts, &[0, 0, 0]), Some(1.0));
        assert_eq!(within_group_flip_mass(&counts, &[0, 1, 2]), Some(0.0));
        assert_eq!(within_group_flip_mass(&counts, &[0, 0, 1]), Some(2.0 / 7.0));
        let diag = vec![vec![3, 0], vec![0, 3]];
        assert_eq!(within_group_flip_mass(&diag, &[0, 1]), None);
    }

    #[test]
    fn pair_baseline_is_one_ninth() {
        let groups = BackgroundPlan::paired(10).groups();
        assert!((random_flip_baseline(&groups) - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(random_flip_baseline(&[0, 0, 0]), 1.0);
    }

    #[test]
    fn delta_annotations() {
        assert_eq!(format_delta(262, 403), "+141");
        assert_eq!(format_delta(38, 13), "-25");
        let p = PhaseCounts {
            before: vec![1, 262],
            after: vec![0, 403],
        };
        assert_eq!(
            p.to_csv(),
            "predicted_class,count_before,count_after,delta\n0,1,0,-1\n1,262,403,+141\n"
        );
    }
}
