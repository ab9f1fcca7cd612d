//! L-infinity attacks: FGSM, PGD, Temperature-PGD and transfer.
//!
//! Every attack runs the same iteration
//!
//! ```text
//! x' <- clamp(min(max(x' + alpha * sign(grad), x - eps), x + eps), 0, 1)
//! ```
//!
//! where `grad` is the input gradient of the attack loss and `sign(0) = 0`.
//! FGSM is the single step with `alpha = eps` from `x' = x`; Temperature-PGD
//! differentiates the cross-entropy of `softmax(logits / T)`.
//!
//! Random starts draw `uniform(-eps, eps)` per pixel from a ChaCha stream
//! seeded with `seed ^ example_index`, so results do not depend on how a
//! dataset is split into batches.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cross_entropy_logits, kl_to_reference_logits, ComputeGraph, Need};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::tensor::{argmax, Real, Tensor};

/// Examples processed per forward/backward call.
pub const ATTACK_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    Fgsm,
    Pgd,
    Tpgd,
    Transfer,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub family: AttackFamily,
    pub epsilon: f64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "one_step")]
    pub steps: usize,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default = "one")]
    pub inv_temperature: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one_step() -> usize {
    1
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            family: AttackFamily::Fgsm,
            epsilon,
            alpha: epsilon,
            steps: 1,
            random_start: false,
            inv_temperature: 1.0,
            seed: 0,
        }
    }

    pub fn pgd(epsilon: f64, alpha: f64, steps: usize, random_start: bool, seed: u64) -> Self {
        Self {
            family: AttackFamily::Pgd,
            epsilon,
            alpha,
            steps,
            random_start,
            inv_temperature: 1.0,
            seed,
        }
    }

    pub fn with_inv_temperature(mut self, inv_temperature: f64) -> Self {
        self.family = AttackFamily::Tpgd;
        self.inv_temperature = inv_temperature;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!(
                "epsilon {} must be >= 0",
                self.epsilon
            )));
        }
        if !(self.inv_temperature > 0.0) || !self.inv_temperature.is_finite() {
            return Err(Error::invalid(format!(
                "inverse temperature {} must be > 0",
                self.inv_temperature
            )));
        }
        if self.family != AttackFamily::Fgsm {
            if !(self.alpha > 0.0) || !self.alpha.is_finite() {
                return Err(Error::invalid(format!(
                    "step size {} must be > 0",
                    self.alpha
                )));
            }
            if self.steps == 0 {
                return Err(Error::invalid("attack needs at least one step"));
            }
        }
        if self.family != AttackFamily::Tpgd && self.inv_temperature != 1.0 {
            return Err(Error::invalid(
                "inverse temperature other than 1 is only meaningful for tpgd",
            ));
        }
        Ok(())
    }
}

/// Loss whose input gradient drives an attack.
#[derive(Clone, Copy, Debug)]
pub(crate) enum AttackLoss<'a, T> {
    CrossEntropy {
        inv_temperature: T,
    },
    /// `KL(reference || softmax(f(x')))`, rows aligned with the batch.
    KlFrom {
        reference: &'a Tensor<T>,
    },
}

/// Starting point of the iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Start {
    Clean,
    /// `uniform(-eps, eps)` per pixel.
    Uniform,
    /// `N(0, sigma^2)` per pixel.
    Gaussian(f64),
}

/// Low-level iteration parameters.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Iteration {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub start: Start,
    pub seed: u64,
    /// Keep, per example, the iterate with the largest loss (starting point
    /// included) instead of the last one.
    pub keep_best: bool,
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn attack_loss<T: Real>(
    graph: &ComputeGraph<T>,
    x: &Tensor<T>,
    labels: &[usize],
    loss: AttackLoss<'_, T>,
    want_grad: bool,
) -> Result<(Vec<T>, Option<Tensor<T>>)> {
    let (logits, tape) = graph.forward(x)?;
    let (values, dlogits) = match loss {
        AttackLoss::CrossEntropy { inv_temperature } => {
            cross_entropy_logits(&logits, labels, inv_temperature)?
        }
        AttackLoss::KlFrom { reference } => kl_to_reference_logits(reference, &logits)?,
    };
    if !want_grad {
        return Ok((values, None));
    }
    let grads = graph.backward_from(&tape, &dlogits, Need::INPUT)?;
    Ok((values, grads.input))
}

/// Runs the projected sign-gradient iteration on one batch. `ids` holds one
/// example id per row, used for per-example seeds.
pub(crate) fn perturb<T: Real>(
    graph: &ComputeGraph<T>,
    x: &Tensor<T>,
    labels: &[usize],
    loss: AttackLoss<'_, T>,
    it: Iteration,
    ids: &[usize],
) -> Result<Tensor<T>> {
    let eps = T::from_f64(it.epsilon);
    let alpha = T::from_f64(it.alpha);
    let lower: Vec<T> = x.data().iter().map(|&v| v - eps).collect();
    let upper: Vec<T> = x.data().iter().map(|&v| v + eps).collect();
    let mut adv = x.clone();
    match it.start {
        Start::Uniform if it.epsilon > 0.0 => {
            let dist = Uniform::new_inclusive(-it.epsilon, it.epsilon);
            add_noise(&mut adv, it.seed, ids, |rng| dist.sample(rng));
        }
        Start::Gaussian(sigma) if it.epsilon > 0.0 => {
            let dist = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
            add_noise(&mut adv, it.seed, ids, |rng| {
                dist.sample(rng).clamp(-it.epsilon, it.epsilon)
            });
        }
        _ => {}
    }
    let row = x.row_len();
    let mut best: Option<(Tensor<T>, Vec<T>)> = None;
    for _ in 0..it.steps {
        let (values, grad) = attack_loss(graph, &adv, labels, loss, true)?;
        let grad = grad.expect("input gradient requested");
        if it.keep_best {
            track_best(&mut best, &adv, &values, row);
        }
        for (k, v) in adv.data_mut().iter_mut().enumerate() {
            let stepped = *v + alpha * sign(grad.data()[k]);
            *v = stepped
                .max(lower[k])
                .min(upper[k])
                .max(T::zero())
                .min(T::one());
        }
    }
    if it.keep_best {
        let (values, _) = attack_loss(graph, &adv, labels, loss, false)?;
        track_best(&mut best, &adv, &values, row);
        if let Some((b, _)) = best {
            return Ok(b);
        }
    }
    Ok(adv)
}

fn add_noise<T: Real>(
    adv: &mut Tensor<T>,
    seed: u64,
    ids: &[usize],
    mut draw: impl FnMut(&mut ChaCha8Rng) -> f64,
) {
    for i in 0..adv.batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ids[i] as u64);
        for v in adv.row_mut(i) {
            *v = (*v + T::from_f64(draw(&mut rng)))
                .max(T::zero())
                .min(T::one());
        }
    }
}

fn track_best<T: Real>(
    best: &mut Option<(Tensor<T>, Vec<T>)>,
    cur: &Tensor<T>,
    values: &[T],
    row: usize,
) {
    match best {
        None => *best = Some((cur.clone(), values.to_vec())),
        Some((b, bv)) => {
            for (i, &v) in values.iter().enumerate() {
                if v > bv[i] {
                    bv[i] = v;
                    b.data_mut()[i * row..(i + 1) * row].copy_from_slice(cur.row(i));
                }
            }
        }
    }
}

/// Attack output for a batch of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialBatch<T> {
    pub adversarial: Tensor<T>,
    pub labels: Vec<usize>,
    /// Prediction on the adversarial input.
    pub predictions: Vec<usize>,
    /// Natural prediction on the clean input.
    pub natural_predictions: Vec<usize>,
    /// `predictions[i] != labels[i]`.
    pub success: Vec<bool>,
}

impl<T: Real> AdversarialBatch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The wrong class an example ends up predicted as, if any.
    pub fn confound_class(&self, i: usize) -> Option<usize> {
        self.success[i].then_some(self.predictions[i])
    }

    pub fn robust_accuracy(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let robust = self.success.iter().filter(|&&s| !s).count();
        robust as f64 / self.len() as f64
    }

    pub fn natural_accuracy(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let ok = self
            .natural_predictions
            .iter()
            .zip(&self.labels)
            .filter(|(p, l)| p == l)
            .count();
        ok as f64 / self.len() as f64
    }

    fn append(&mut self, other: AdversarialBatch<T>) -> Result<()> {
        let mut data = std::mem::replace(&mut self.adversarial, Tensor::zeros(vec![1])).into_data();
        let mut shape = other.adversarial.shape().to_vec();
        shape[0] += self.labels.len();
        data.extend_from_slice(other.adversarial.data());
        self.adversarial = Tensor::new(shape, data)?;
        self.labels.extend(other.labels);
        self.predictions.extend(other.predictions);
        self.natural_predictions.extend(other.natural_predictions);
        self.success.extend(other.success);
        Ok(())
    }
}

fn predict_rows<T: Real>(graph: &ComputeGraph<T>, x: &Tensor<T>) -> Result<Vec<usize>> {
    let logits = graph.evaluate(x)?;
    Ok((0..logits.batch()).map(|i| argmax(logits.row(i))).collect())
}

fn check_batch<T: Real>(model: &Classifier<T>, x: &Tensor<T>, labels: &[usize]) -> Result<()> {
    if x.batch() != labels.len() {
        return Err(Error::invalid(format!(
            "{} inputs but {} labels",
            x.batch(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.classes()) {
        return Err(Error::invalid(format!(
            "label {bad} not covered by a {}-class model",
            model.classes()
        )));
    }
    Ok(())
}

/// Crafts perturbations on `source` and evaluates them on `target`.
/// Naturally misclassified examples (on `target`) are reported with their
/// clean input and count as attack successes.
fn attack_batch<T: Real>(
    source: &Classifier<T>,
    target: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    it: Iteration,
    inv_temperature: T,
    ids: &[usize],
) -> Result<AdversarialBatch<T>> {
    check_batch(target, x, labels)?;
    let natural = predict_rows(&target.graph, x)?;
    let mut adv = if it.epsilon == 0.0 {
        x.clone()
    } else {
        perturb(
            &source.graph,
            x,
            labels,
            AttackLoss::CrossEntropy { inv_temperature },
            it,
            ids,
        )?
    };
    for (i, (&p, &y)) in natural.iter().zip(labels).enumerate() {
        if p != y {
            adv.row_mut(i).copy_from_slice(x.row(i));
        }
    }
    let predictions = predict_rows(&target.graph, &adv)?;
    let success = predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| p != y)
        .collect();
    Ok(AdversarialBatch {
        adversarial: adv,
        labels: labels.to_vec(),
        predictions,
        natural_predictions: natural,
        success,
    })
}

pub(crate) fn iteration(spec: &AttackSpec) -> Iteration {
    match spec.family {
        AttackFamily::Fgsm => Iteration {
            epsilon: spec.epsilon,
            alpha: spec.epsilon,
            steps: 1,
            start: Start::Clean,
            seed: spec.seed,
            keep_best: false,
        },
        _ => Iteration {
            epsilon: spec.epsilon,
            alpha: spec.alpha,
            steps: spec.steps,
            start: if spec.random_start {
                Start::Uniform
            } else {
                Start::Clean
            },
            seed: spec.seed,
            keep_best: false,
        },
    }
}

/// Single sign-gradient step of size `epsilon`.
pub fn fgsm<T: Real>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    epsilon: f64,
) -> Result<AdversarialBatch<T>> {
    let spec = AttackSpec::fgsm(epsilon);
    spec.validate()?;
    attack_batch(
        model,
        model,
        x,
        labels,
        iteration(&spec),
        T::one(),
        &row_ids(x),
    )
}

/// Projected gradient descent on the cross-entropy. `tpgd` specs are accepted
/// and use their temperature.
pub fn pgd<T: Real>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<AdversarialBatch<T>> {
    if !matches!(spec.family, AttackFamily::Pgd | AttackFamily::Tpgd) {
        return Err(Error::invalid("pgd needs a pgd or tpgd spec"));
    }
    spec.validate()?;
    attack_batch(
        model,
        model,
        x,
        labels,
        iteration(spec),
        T::from_f64(spec.inv_temperature),
        &row_ids(x),
    )
}

/// PGD whose loss gradient flows through `softmax(logits * inv_temperature)`.
pub fn temperature_pgd<T: Real>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<AdversarialBatch<T>> {
    pgd(model, x, labels, spec)
}

/// PGD crafted against `substitute`, judged on `target`.
pub fn transfer_attack<T: Real>(
    substitute: &Classifier<T>,
    target: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<AdversarialBatch<T>> {
    check_shapes(substitute, target)?;
    let mut inner = spec.clone();
    inner.family = AttackFamily::Pgd;
    inner.validate()?;
    attack_batch(
        substitute,
        target,
        x,
        labels,
        iteration(&inner),
        T::one(),
        &row_ids(x),
    )
}

fn row_ids<T: Real>(x: &Tensor<T>) -> Vec<usize> {
    (0..x.batch()).collect()
}

fn check_shapes<T: Real>(a: &Classifier<T>, b: &Classifier<T>) -> Result<()> {
    if a.graph.input_shape() != b.graph.input_shape() || a.classes() != b.classes() {
        return Err(Error::Shape(format!(
            "substitute {} and target {} disagree on input/output shape",
            a.arch, b.arch
        )));
    }
    Ok(())
}

/// Attacks every example of `ds` in chunks, dispatching on `spec.family`.
/// `substitute` is required for transfer attacks.
pub fn attack_dataset(
    model: &Classifier<f32>,
    ds: &LabeledDataset,
    spec: &AttackSpec,
    substitute: Option<&Classifier<f32>>,
) -> Result<AdversarialBatch<f32>> {
    let all: Vec<usize> = (0..ds.len()).collect();
    attack_subset(model, ds, &all, spec, substitute)
}

/// Attacks the examples of `ds` at `indices`, in that order. Random starts
/// are keyed on the dataset index, so an example receives the same start
/// whether it is attacked alone or with the whole dataset.
pub fn attack_subset(
    model: &Classifier<f32>,
    ds: &LabeledDataset,
    indices: &[usize],
    spec: &AttackSpec,
    substitute: Option<&Classifier<f32>>,
) -> Result<AdversarialBatch<f32>> {
    spec.validate()?;
    let source = match spec.family {
        AttackFamily::Transfer => {
            let s = substitute
                .ok_or_else(|| Error::invalid("transfer attack needs a substitute model"))?;
            check_shapes(s, model)?;
            s
        }
        _ => model,
    };
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::invalid(format!(
            "example index {bad} out of range for {} examples",
            ds.len()
        )));
    }
    let it = iteration(spec);
    let inv_t = spec.inv_temperature as f32;
    let mut out: Option<AdversarialBatch<f32>> = None;
    for ids in indices.chunks(ATTACK_CHUNK) {
        let x = ds.images.select_rows(ids);
        let labels: Vec<usize> = ids.iter().map(|&i| ds.labels[i]).collect();
        let part = attack_batch(source, model, &x, &labels, it, inv_t, ids)?;
        match &mut out {
            None => out = Some(part),
            Some(acc) => acc.append(part)?,
        }
    }
    out.ok_or_else(|| Error::invalid("cannot attack an empty set of examples"))
}
