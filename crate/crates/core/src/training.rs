//! Standard, Madry and TRADES (scalar or per-class beta) training with SGD,
//! momentum, weight decay and a step learning-rate schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{classwise_accuracy, total_accuracy};
use crate::attacks::{
    attack_subset, iteration, perturb, AttackFamily, AttackLoss, AttackSpec, Start,
};
use crate::autodiff::{
    cross_entropy_logits, kl_logits, softmax_rows, ComputeGraph, GradientSet, LossSpec, Need,
};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::seed::derive_seed;
use crate::tensor::{Real, Tensor};

/// Standard deviation of the TRADES inner-attack starting noise.
pub const TRADES_START_SIGMA: f64 = 0.001;

const SHUFFLE_STREAM: u64 = 1;
const INNER_ATTACK_STREAM: u64 = 2;

/// `param -= lr * v` with `v = momentum * v + grad + weight_decay * param`.
pub fn sgd_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "sgd step over {} parameters, {} gradients, {} velocities",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

fn ten() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    /// Epochs (0-based) from which one more division applies.
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "ten")]
    pub decay: f64,
}

/// The initial rate divided by `decay` once for every milestone `<= epoch`.
pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> f64 {
    let passed = schedule.milestones.iter().filter(|&&m| epoch >= m).count();
    let mut lr = schedule.initial;
    for _ in 0..passed {
        lr /= schedule.decay;
    }
    lr
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Standard,
    Madry,
    Trades,
    TradesClasswise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Inner maximisation for `madry` and the TRADES objectives.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub betas: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    /// Epochs over which the inner attack's ε and α ramp linearly up to
    /// their configured values: epoch `e < k` uses the fraction `(e+1)/(k+1)`.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub epsilon_warmup: usize,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

/// Fraction of the inner attack budget used at `epoch`.
pub fn warmup_fraction(warmup: usize, epoch: usize) -> f64 {
    if epoch >= warmup {
        1.0
    } else {
        (epoch + 1) as f64 / (warmup + 1) as f64
    }
}

impl TrainSpec {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(self.lr.initial > 0.0) || !(self.lr.decay > 0.0) {
            return Err(Error::invalid(
                "learning rate and decay factor must be positive",
            ));
        }
        if self.lr.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "milestone epochs must be strictly increasing",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "momentum must be in [0, 1) and weight decay >= 0",
            ));
        }
        if self.objective != Objective::Standard {
            let inner = self
                .attack
                .as_ref()
                .ok_or_else(|| Error::invalid("adversarial objectives need an inner attack"))?;
            inner.validate()?;
            if !matches!(inner.family, AttackFamily::Pgd | AttackFamily::Fgsm) {
                return Err(Error::invalid("inner attack must be pgd or fgsm"));
            }
        }
        self.betas(classes).map(|_| ())
    }

    /// Per-class TRADES coefficients; empty for the other objectives.
    pub fn betas(&self, classes: usize) -> Result<Vec<f64>> {
        let betas = match self.objective {
            Objective::Standard | Objective::Madry => return Ok(Vec::new()),
            Objective::Trades => {
                let b = self
                    .beta
                    .ok_or_else(|| Error::invalid("trades needs `beta`"))?;
                vec![b; classes]
            }
            Objective::TradesClasswise => {
                let b = self
                    .betas
                    .clone()
                    .ok_or_else(|| Error::invalid("trades_classwise needs `betas`"))?;
                if b.len() != classes {
                    return Err(Error::invalid(format!(
                        "{} betas for {classes} classes",
                        b.len()
                    )));
                }
                b
            }
        };
        if betas.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
            return Err(Error::invalid("beta entries must be finite and >= 0"));
        }
        Ok(betas)
    }
}

/// Batch-mean cross-entropy and its parameter gradients.
pub fn standard_loss_grad<T: Real>(
    graph: &ComputeGraph<T>,
    x: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, GradientSet<T>)> {
    graph.backward(
        x,
        LossSpec::CrossEntropy {
            labels,
            inv_temperature: T::one(),
        },
    )
}

/// Batch mean of `CE(f(x), y) + beta_y * KL(softmax f(x) || softmax f(x_adv))`
/// with parameter gradients through both branches; `x_adv` is treated as
/// data.
pub fn trades_loss_grad<T: Real>(
    graph: &ComputeGraph<T>,
    x: &Tensor<T>,
    x_adv: &Tensor<T>,
    labels: &[usize],
    betas: &[f64],
) -> Result<(T, GradientSet<T>)> {
    let (nat, nat_tape) = graph.forward(x)?;
    let (adv, adv_tape) = graph.forward(x_adv)?;
    let classes = nat.row_len();
    if betas.len() != classes {
        return Err(Error::invalid(format!(
            "{} betas for {classes} classes",
            betas.len()
        )));
    }
    let (ce, mut d_nat) = cross_entropy_logits(&nat, labels, T::one())?;
    let (kl, d_kl_nat, mut d_adv) = kl_logits(&nat, &adv)?;
    let n = T::from_f64(labels.len() as f64);
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let beta = T::from_f64(betas[y]);
        total += ce[i] + beta * kl[i];
        for (d, &k) in d_nat.row_mut(i).iter_mut().zip(d_kl_nat.row(i)) {
            *d = (*d + beta * k) / n;
        }
        for d in d_adv.row_mut(i) {
            *d = beta * *d / n;
        }
    }
    let mut grads = graph.zero_grads();
    graph.accumulate_backward(&nat_tape, &d_nat, Need::PARAMS, &mut grads)?;
    graph.accumulate_backward(&adv_tape, &d_adv, Need::PARAMS, &mut grads)?;
    Ok((total / n, grads))
}

/// Inner maximisation of the Madry objective: PGD on the cross-entropy,
/// keeping each example's highest-loss iterate.
pub fn madry_adversarial<T: Real>(
    graph: &ComputeGraph<T>,
    x: &Tensor<T>,
    labels: &[usize],
    inner: &AttackSpec,
    ids: &[usize],
) -> Result<Tensor<T>> {
    let mut it = iteration(inner);
    it.keep_best = true;
    perturb(
        graph,
        x,
        labels,
        AttackLoss::CrossEntropy {
            inv_temperature: T::one(),
        },
        it,
        ids,
    )
}

/// Inner maximisation of TRADES: sign steps ascending
/// `KL(softmax f(x) || softmax f(x'))` from `x + N(0, 0.001^2)`.
pub fn trades_adversarial<T: Real>(
    graph: &ComputeGraph<T>,
    x: &Tensor<T>,
    inner: &AttackSpec,
    ids: &[usize],
) -> Result<Tensor<T>> {
    let reference = softmax_rows(&graph.evaluate(x)?, T::one())?;
    let mut it = iteration(inner);
    it.start = Start::Gaussian(TRADES_START_SIGMA);
    perturb(
        graph,
        x,
        &[],
        AttackLoss::KlFrom {
            reference: &reference,
        },
        it,
        ids,
    )
}

fn ids_for<T: Real>(x: &Tensor<T>) -> Vec<usize> {
    (0..x.batch()).collect()
}

/// Madry loss: batch-mean cross-entropy at the inner attack's output.
pub fn loss_madry<T: Real>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    inner: &AttackSpec,
) -> Result<T> {
    inner.validate()?;
    let adv = madry_adversarial(&model.graph, x, labels, inner, &ids_for(x))?;
    Ok(standard_loss_grad(&model.graph, &adv, labels)?.0)
}

/// TRADES loss with per-class coefficients `betas`.
pub fn loss_trades_classwise<T: Real>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    betas: &[f64],
    inner: &AttackSpec,
) -> Result<T> {
    inner.validate()?;
    if betas.len() != model.classes() {
        return Err(Error::invalid(format!(
            "{} betas for {} classes",
            betas.len(),
            model.classes()
        )));
    }
    let adv = trades_adversarial(&model.graph, x, inner, &ids_for(x))?;
    Ok(trades_loss_grad(&model.graph, x, &adv, labels, betas)?.0)
}

/// Held-out evaluation run after every epoch.
#[derive(Clone, Copy, Debug)]
pub struct EpochProbe<'a> {
    pub test: &'a LabeledDataset,
    pub attack: &'a AttackSpec,
    /// Number of leading test examples evaluated; the whole set if larger.
    pub examples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub nat_acc: Option<f64>,
    pub rob_acc_total: Option<f64>,
    pub rob_acc_class: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub classes: usize,
    pub records: Vec<EpochRecord>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut header = vec![
            "epoch".to_string(),
            "lr".into(),
            "train_loss".into(),
            "nat_acc".into(),
            "rob_acc_total".into(),
        ];
        header.extend((0..self.classes).map(|c| format!("rob_acc_class_{c}")));
        let mut out = header.join(",");
        out.push('\n');
        for r in &self.records {
            let mut row = vec![
                r.epoch.to_string(),
                r.lr.to_string(),
                r.train_loss.to_string(),
                cell(r.nat_acc),
                cell(r.rob_acc_total),
            ];
            for c in 0..self.classes {
                row.push(cell(r.rob_acc_class.get(c).copied().flatten()));
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Trains `model` on `ds`; see [`train_with`].
pub fn train(
    model: Classifier<f32>,
    ds: &LabeledDataset,
    spec: &TrainSpec,
    probe: Option<EpochProbe<'_>>,
) -> Result<(Classifier<f32>, TrainLog)> {
    train_with(model, ds, spec, probe, &mut |_| {})
}

/// Runs `spec.epochs` epochs of shuffled minibatch SGD. The permutation of
/// epoch `e` and the inner-attack seeds of its batches derive from
/// `(spec.seed, e)`. `on_epoch` sees every record as it is produced.
pub fn train_with(
    mut model: Classifier<f32>,
    ds: &LabeledDataset,
    spec: &TrainSpec,
    probe: Option<EpochProbe<'_>>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(Classifier<f32>, TrainLog)> {
    let classes = model.classes();
    spec.validate(classes)?;
    if ds.classes != classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, model {}",
            ds.classes, classes
        )));
    }
    if ds.image_shape().as_slice() != model.graph.input_shape() {
        return Err(Error::Shape(format!(
            "dataset images {:?} do not fit model input {:?}",
            ds.image_shape(),
            model.graph.input_shape()
        )));
    }
    if ds.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let betas = spec.betas(classes)?;
    let mut velocity: Vec<Vec<f32>> = model
        .graph
        .params()
        .iter()
        .map(|p| vec![0.0; p.value.len()])
        .collect();
    let mut log = TrainLog {
        classes,
        records: Vec::with_capacity(spec.epochs),
    };
    for epoch in 0..spec.epochs {
        let lr = lr_at(&spec.lr, epoch);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[SHUFFLE_STREAM, epoch as u64]));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for (b, idx) in order.chunks(spec.batch_size).enumerate() {
            let x = ds.images.select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
            let inner = spec.attack.as_ref().map(|a| {
                let mut a = a.clone();
                let f = warmup_fraction(spec.epsilon_warmup, epoch);
                if f < 1.0 {
                    a.epsilon *= f;
                    a.alpha *= f;
                }
                a.seed = derive_seed(
                    spec.seed ^ a.seed,
                    &[INNER_ATTACK_STREAM, epoch as u64, b as u64],
                );
                a
            });
            let ids = ids_for(&x);
            let (loss, grads) = match spec.objective {
                Objective::Standard => standard_loss_grad(&model.graph, &x, &labels)?,
                Objective::Madry => {
                    let inner = inner.as_ref().expect("validated");
                    let adv = madry_adversarial(&model.graph, &x, &labels, inner, &ids)?;
                    standard_loss_grad(&model.graph, &adv, &labels)?
                }
                Objective::Trades | Objective::TradesClasswise => {
                    let inner = inner.as_ref().expect("validated");
                    let adv = trades_adversarial(&model.graph, &x, inner, &ids)?;
                    trades_loss_grad(&model.graph, &x, &adv, &labels, &betas)?
                }
            };
            if !loss.is_finite() {
                return Err(Error::Runtime {
                    module: "training",
                    reason: format!("non-finite loss at epoch {epoch}, batch {b}"),
                });
            }
            loss_sum += loss as f64 * idx.len() as f64;
            for ((p, g), v) in model
                .graph
                .params_mut()
                .iter_mut()
                .zip(&grads.params)
                .zip(velocity.iter_mut())
            {
                sgd_step(
                    p.value.data_mut(),
                    g.value.data(),
                    v,
                    lr as f32,
                    spec.momentum as f32,
                    spec.weight_decay as f32,
                )?;
            }
        }
        model.epochs += 1;
        let mut record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / ds.len() as f64,
            nat_acc: None,
            rob_acc_total: None,
            rob_acc_class: vec![None; classes],
        };
        if let Some(p) = probe {
            let n = p.examples.min(p.test.len());
            let idx: Vec<usize> = (0..n).collect();
            let out = attack_subset(&model, p.test, &idx, p.attack, None)?;
            record.nat_acc = Some(total_accuracy(&out.natural_predictions, &out.labels));
            record.rob_acc_total = Some(out.robust_accuracy());
            record.rob_acc_class = classwise_accuracy(&out.predictions, &out.labels, classes)?;
        }
        on_epoch(&record);
        log.records.push(record);
    }
    Ok((model, log))
}
