//! Checks shared by the property tests and the acceptance runner.
#![allow(dead_code)]

use classwise::attacks::{fgsm, pgd, temperature_pgd, transfer_attack, AttackSpec};
use classwise::autodiff::{
    cross_entropy_logits, kl_to_reference_logits, softmax_rows, ComputeGraph, GradientSet,
    LossSpec, Node, NodeKind,
};
use classwise::models::{init_model, ArchitectureSpec, Classifier};
use classwise::tensor::Tensor;
use classwise::training::{madry_adversarial, trades_loss_grad};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCase {
    Affine,
    Conv,
    Relu,
    MaxPool,
    Flatten,
    TemperatureCrossEntropy,
    Madry,
    Trades,
    KlToReference,
}

pub const GRAD_CASES: [GradCase; 9] = [
    GradCase::Affine,
    GradCase::Conv,
    GradCase::Relu,
    GradCase::MaxPool,
    GradCase::Flatten,
    GradCase::TemperatureCrossEntropy,
    GradCase::Madry,
    GradCase::Trades,
    GradCase::KlToReference,
];

#[derive(Debug)]
pub struct GradOutcome {
    pub case: GradCase,
    pub config: usize,
    /// Largest per-tensor relative error `|a - n| / max(|a|, |n|)` (norms).
    pub worst: f64,
    pub tensor: String,
}

fn affine(name: &str, i: usize, o: usize) -> Node {
    Node::new(
        name,
        NodeKind::Affine {
            in_features: i,
            out_features: o,
        },
    )
}

fn conv(name: &str, i: usize, o: usize, k: usize) -> Node {
    Node::new(
        name,
        NodeKind::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: k,
        },
    )
}

fn flat() -> Node {
    Node::new("flatten", NodeKind::Flatten)
}

fn randomize(graph: &mut ComputeGraph<f64>, rng: &mut ChaCha8Rng) {
    for p in graph.params().to_vec() {
        let vals: Vec<f64> = (0..p.value.len())
            .map(|_| rng.gen_range(-0.8..0.8))
            .collect();
        graph
            .set_param(
                &p.name,
                Tensor::new(p.value.shape().to_vec(), vals).unwrap(),
            )
            .unwrap();
    }
}

fn random_input(shape: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut s = vec![batch];
    s.extend_from_slice(shape);
    let n: usize = s.iter().product();
    Tensor::new(s, (0..n).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap()
}

/// Smallest distance of any relu input from 0 and of any pooling window's
/// maximum from its runner-up, over the graph's forward pass on `x`.
fn kink_margin(graph: &ComputeGraph<f64>, x: &Tensor<f64>) -> f64 {
    let nodes = graph.nodes();
    let mut margin = f64::INFINITY;
    for (k, node) in nodes.iter().enumerate() {
        if !matches!(node.kind, NodeKind::Relu | NodeKind::MaxPool2) {
            continue;
        }
        let mut prefix =
            ComputeGraph::<f64>::new(graph.input_shape().to_vec(), nodes[..k].to_vec()).unwrap();
        for p in prefix.params().to_vec() {
            prefix
                .set_param(&p.name, graph.param(&p.name).unwrap().clone())
                .unwrap();
        }
        let z = prefix.evaluate(x).unwrap();
        match node.kind {
            NodeKind::Relu => {
                for v in z.data() {
                    margin = margin.min(v.abs());
                }
            }
            _ => {
                let s = z.shape();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                for b in 0..n * c {
                    let plane = &z.data()[b * h * w..(b + 1) * h * w];
                    for i in 0..h / 2 {
                        for j in 0..w / 2 {
                            let mut win = [
                                plane[2 * i * w + 2 * j],
                                plane[2 * i * w + 2 * j + 1],
                                plane[(2 * i + 1) * w + 2 * j],
                                plane[(2 * i + 1) * w + 2 * j + 1],
                            ];
                            win.sort_by(|a, b| b.partial_cmp(a).unwrap());
                            margin = margin.min(win[0] - win[1]);
                        }
                    }
                }
            }
        }
    }
    margin
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct Problem {
    graph: ComputeGraph<f64>,
    x: Tensor<f64>,
    labels: Vec<usize>,
    loss: Loss,
    check_input: bool,
}

enum Loss {
    CrossEntropy(f64),
    Trades { x_adv: Tensor<f64>, betas: Vec<f64> },
    Kl(Tensor<f64>),
}

impl Problem {
    fn value(&self, graph: &ComputeGraph<f64>, x: &Tensor<f64>) -> f64 {
        match &self.loss {
            Loss::CrossEntropy(inv_t) => {
                let logits = graph.evaluate(x).unwrap();
                mean(
                    &cross_entropy_logits(&logits, &self.labels, *inv_t)
                        .unwrap()
                        .0,
                )
            }
            Loss::Trades { x_adv, betas } => {
                let nat = graph.evaluate(x).unwrap();
                let adv = graph.evaluate(x_adv).unwrap();
                let ce = cross_entropy_logits(&nat, &self.labels, 1.0).unwrap().0;
                let p = softmax_rows(&nat, 1.0).unwrap();
                let kl = kl_to_reference_logits(&p, &adv).unwrap().0;
                let per: Vec<f64> = self
                    .labels
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| ce[i] + betas[y] * kl[i])
                    .collect();
                mean(&per)
            }
            Loss::Kl(reference) => {
                let logits = graph.evaluate(x).unwrap();
                mean(&kl_to_reference_logits(reference, &logits).unwrap().0)
            }
        }
    }

    fn analytic(&self) -> GradientSet<f64> {
        match &self.loss {
            Loss::CrossEntropy(inv_t) => {
                self.graph
                    .backward(
                        &self.x,
                        LossSpec::CrossEntropy {
                            labels: &self.labels,
                            inv_temperature: *inv_t,
                        },
                    )
                    .unwrap()
                    .1
            }
            Loss::Trades { x_adv, betas } => {
                trades_loss_grad(&self.graph, &self.x, x_adv, &self.labels, betas)
                    .unwrap()
                    .1
            }
            Loss::Kl(reference) => {
                self.graph
                    .backward(&self.x, LossSpec::KlToReference { reference })
                    .unwrap()
                    .1
            }
        }
    }
}

fn build(case: GradCase, rng: &mut ChaCha8Rng) -> Problem {
    let classes = rng.gen_range(2..5);
    let batch = rng.gen_range(1..4);
    let (input, nodes): (Vec<usize>, Vec<Node>) = match case {
        GradCase::Affine => {
            let d = rng.gen_range(2..6);
            let h = rng.gen_range(2..6);
            (
                vec![d],
                vec![affine("fc1", d, h), affine("fc2", h, classes)],
            )
        }
        GradCase::Conv => {
            let c = rng.gen_range(1..3);
            let s = rng.gen_range(4..7);
            let k = rng.gen_range(1..4);
            let o = rng.gen_range(1..4);
            let out = o * (s - k + 1) * (s - k + 1);
            (
                vec![c, s, s],
                vec![conv("conv", c, o, k), flat(), affine("fc", out, classes)],
            )
        }
        GradCase::Relu => {
            let d = rng.gen_range(2..6);
            let h = rng.gen_range(2..8);
            (
                vec![d],
                vec![
                    affine("fc1", d, h),
                    Node::new("relu", NodeKind::Relu),
                    affine("fc2", h, classes),
                ],
            )
        }
        GradCase::MaxPool => {
            let c = rng.gen_range(1..3);
            let s = rng.gen_range(2..7);
            let out = c * (s / 2) * (s / 2);
            (
                vec![c, s, s],
                vec![
                    Node::new("pool", NodeKind::MaxPool2),
                    flat(),
                    affine("fc", out, classes),
                ],
            )
        }
        GradCase::Flatten => {
            let c = rng.gen_range(1..3);
            let h = rng.gen_range(1..4);
            let w = rng.gen_range(1..4);
            (
                vec![c, h, w],
                vec![flat(), affine("fc", c * h * w, classes)],
            )
        }
        GradCase::TemperatureCrossEntropy
        | GradCase::Madry
        | GradCase::Trades
        | GradCase::KlToReference => (
            vec![1, 6, 6],
            vec![
                conv("conv", 1, 2, 3),
                Node::new("relu1", NodeKind::Relu),
                Node::new("pool", NodeKind::MaxPool2),
                flat(),
                affine("fc1", 8, 5),
                Node::new("relu2", NodeKind::Relu),
                affine("fc2", 5, classes),
            ],
        ),
    };
    let mut graph = ComputeGraph::<f64>::new(input.clone(), nodes).unwrap();
    randomize(&mut graph, rng);
    let x = random_input(&input, batch, rng);
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
    let (loss, x_eval, check_input) = match case {
        GradCase::TemperatureCrossEntropy => (Loss::CrossEntropy(rng.gen_range(0.5..5.0)), x, true),
        GradCase::Madry => {
            let inner = AttackSpec::pgd(0.1, 0.03, 3, true, rng.gen());
            let ids: Vec<usize> = (0..batch).collect();
            let adv = madry_adversarial(&graph, &x, &labels, &inner, &ids).unwrap();
            (Loss::CrossEntropy(1.0), adv, true)
        }
        GradCase::Trades => {
            let noise = Uniform::new(-0.1, 0.1);
            let shifted = x
                .data()
                .iter()
                .map(|v| (v + noise.sample(rng)).clamp(0.0, 1.0))
                .collect();
            let adv = Tensor::new(x.shape().to_vec(), shifted).unwrap();
            let betas = (0..classes).map(|_| rng.gen_range(0.0..6.0)).collect();
            (Loss::Trades { x_adv: adv, betas }, x, false)
        }
        GradCase::KlToReference => {
            let raw = random_input(&[classes], batch, rng);
            let reference = softmax_rows(&raw.map(|v| 4.0 * v), 1.0).unwrap();
            (Loss::Kl(reference), x, true)
        }
        _ => (Loss::CrossEntropy(1.0), x, true),
    };
    Problem {
        graph,
        x: x_eval,
        labels,
        loss,
        check_input,
    }
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(n)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = n.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn margin_of(p: &Problem) -> f64 {
    let mut m = kink_margin(&p.graph, &p.x);
    if let Loss::Trades { x_adv, .. } = &p.loss {
        m = m.min(kink_margin(&p.graph, x_adv));
    }
    m
}

/// Central differences over every parameter (and the input where the loss
/// depends on it directly) of one random configuration. Configurations with
/// a relu input or pooling tie within 0.02 of a kink are redrawn.
pub fn check_gradients(case: GradCase, config: usize, seed: u64) -> GradOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((config as u64) << 8) ^ case as u64);
    let problem = loop {
        let p = build(case, &mut rng);
        if margin_of(&p) > 0.02 {
            break p;
        }
    };
    let grads = problem.analytic();
    let h = FD_STEP;
    let mut worst = (0.0, String::new());
    for p in problem.graph.params() {
        let mut numeric = Vec::with_capacity(p.value.len());
        for k in 0..p.value.len() {
            let mut g = problem.graph.clone();
            let mut v = p.value.clone();
            v.data_mut()[k] += h;
            g.set_param(&p.name, v.clone()).unwrap();
            let plus = problem.value(&g, &problem.x);
            v.data_mut()[k] -= 2.0 * h;
            g.set_param(&p.name, v).unwrap();
            let minus = problem.value(&g, &problem.x);
            numeric.push((plus - minus) / (2.0 * h));
        }
        let e = rel_error(grads.get(&p.name).unwrap().data(), &numeric);
        if e > worst.0 {
            worst = (e, p.name.clone());
        }
    }
    if problem.check_input {
        let mut numeric = Vec::with_capacity(problem.x.len());
        for k in 0..problem.x.len() {
            let mut x = problem.x.clone();
            x.data_mut()[k] += h;
            let plus = problem.value(&problem.graph, &x);
            x.data_mut()[k] -= 2.0 * h;
            let minus = problem.value(&problem.graph, &x);
            numeric.push((plus - minus) / (2.0 * h));
        }
        let e = rel_error(grads.input.as_ref().unwrap().data(), &numeric);
        if e > worst.0 {
            worst = (e, "input".into());
        }
    }
    GradOutcome {
        case,
        config,
        worst: worst.0,
        tensor: worst.1,
    }
}

/// Runs `per_case` configurations of every case.
pub fn gradient_suite(per_case: usize, seed: u64) -> Vec<GradOutcome> {
    let mut out = Vec::new();
    for case in GRAD_CASES {
        for config in 0..per_case {
            out.push(check_gradients(case, config, seed));
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct AttackCase {
    pub arch: ArchitectureSpec,
    pub model_seed: u64,
    pub substitute_seed: u64,
    pub input_seed: u64,
    pub batch: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
    pub inv_temperature: f64,
    pub attack_seed: u64,
}

fn arch_strategy() -> impl Strategy<Value = ArchitectureSpec> {
    prop_oneof![
        (1usize..4, 2usize..5).prop_map(|(d, c)| ArchitectureSpec::Linear {
            input: [1, d, 2],
            classes: c
        }),
        (1usize..6, 2usize..6, 2usize..5).prop_map(|(d, h, c)| ArchitectureSpec::Mlp {
            input: [1, 1, d],
            hidden: h,
            classes: c
        }),
        (1usize..3, 2usize..4).prop_map(|(ch, c)| ArchitectureSpec::Cnn4 {
            channels: ch,
            classes: c,
            image_size: 16,
            conv1: 2,
            conv2: 2,
            hidden: 3,
        }),
    ]
}

pub fn attack_case_strategy() -> impl Strategy<Value = AttackCase> {
    (
        arch_strategy(),
        any::<u64>(),
        any::<u64>(),
        any::<u64>(),
        1usize..4,
        prop_oneof![Just(0.0), 0.0f64..0.6],
        0.001f64..0.7,
        1usize..4,
        any::<bool>(),
        prop_oneof![Just(2.0), Just(5.0), Just(10.0), Just(50.0), 0.1f64..20.0],
        any::<u64>(),
    )
        .prop_map(
            |(
                arch,
                model_seed,
                substitute_seed,
                input_seed,
                batch,
                epsilon,
                alpha,
                steps,
                random_start,
                inv_temperature,
                attack_seed,
            )| AttackCase {
                arch,
                model_seed,
                substitute_seed,
                input_seed,
                batch,
                epsilon,
                alpha,
                steps,
                random_start,
                inv_temperature,
                attack_seed,
            },
        )
}

fn case_input(case: &AttackCase) -> (Tensor<f32>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(case.input_seed);
    let [c, h, w] = case.arch.input_shape();
    let n = case.batch * c * h * w;
    // Saturated pixels exercise the box constraint.
    let data = (0..n)
        .map(|_| match rng.gen_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen_range(0.0f32..=1.0),
        })
        .collect();
    let x = Tensor::new(vec![case.batch, c, h, w], data).unwrap();
    let labels = (0..case.batch)
        .map(|_| rng.gen_range(0..case.arch.classes()))
        .collect();
    (x, labels)
}

fn within_ball(x: &Tensor<f32>, adv: &Tensor<f32>, eps: f64) -> Result<(), String> {
    for (&a, &b) in x.data().iter().zip(adv.data()) {
        if (b as f64 - a as f64).abs() > eps + 1e-6 {
            return Err(format!("|{b} - {a}| exceeds eps {eps}"));
        }
        if !(0.0..=1.0).contains(&b) {
            return Err(format!("{b} outside [0, 1]"));
        }
    }
    Ok(())
}

/// Ball/box containment for every attack plus the two bit-exact collapses.
pub fn check_attack_case(case: &AttackCase) -> Result<(), String> {
    let model: Classifier<f32> = init_model(&case.arch, case.model_seed).unwrap();
    let substitute: Classifier<f32> = init_model(&case.arch, case.substitute_seed).unwrap();
    let (x, y) = case_input(case);
    let eps = case.epsilon;
    let spec = AttackSpec::pgd(
        eps,
        case.alpha,
        case.steps,
        case.random_start,
        case.attack_seed,
    );
    let tspec = spec.clone().with_inv_temperature(case.inv_temperature);

    let f = fgsm(&model, &x, &y, eps).map_err(|e| e.to_string())?;
    let p = pgd(&model, &x, &y, &spec).map_err(|e| e.to_string())?;
    let t = temperature_pgd(&model, &x, &y, &tspec).map_err(|e| e.to_string())?;
    let tr = transfer_attack(&substitute, &model, &x, &y, &spec).map_err(|e| e.to_string())?;
    for (name, out) in [("fgsm", &f), ("pgd", &p), ("tpgd", &t), ("transfer", &tr)] {
        within_ball(&x, &out.adversarial, eps).map_err(|e| format!("{name}: {e}"))?;
        for i in 0..out.len() {
            if out.success[i] != (out.confound_class(i).is_some()) {
                return Err(format!("{name}: success/confound mismatch"));
            }
        }
    }

    let one_step = AttackSpec::pgd(eps, eps.max(case.alpha), 1, false, case.attack_seed);
    if eps > 0.0 {
        let p1 = pgd(&model, &x, &y, &one_step).map_err(|e| e.to_string())?;
        if p1 != f {
            return Err("pgd(k=1, alpha >= eps, no random start) differs from fgsm".into());
        }
    }
    let t1 = temperature_pgd(&model, &x, &y, &spec.clone().with_inv_temperature(1.0))
        .map_err(|e| e.to_string())?;
    if t1 != p {
        return Err("tpgd with 1/T = 1 differs from pgd".into());
    }
    Ok(())
}

/// Runs [`check_attack_case`] over `cases` generated cases.
pub fn attack_algebra(cases: u32) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&attack_case_strategy(), |case| {
            check_attack_case(&case).map_err(TestCaseError::fail)
        })
        .map_err(|e| e.to_string())
}
