//! Sequential compute graphs over a fixed primitive set with reverse-mode
//! gradients for both parameters and inputs.
//!
//! A graph is an ordered list of nodes; node `i` consumes the output of node
//! `i - 1` (the graph input for `i = 0`), so evaluation order is the list
//! order. Batched tensors carry the batch as the leading extent.

use serde::{Deserialize, Serialize};

use super::loss::{cross_entropy_logits, kl_to_reference_logits};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum NodeKind {
    /// `y = x W^T + b` with `W: (out, in)`.
    Affine {
        in_features: usize,
        out_features: usize,
    },
    /// Stride 1, no padding, square kernel. `W: (out, in, k, k)`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    /// 2x2 window, stride 2; ties go to the first element in row-major order.
    MaxPool2,
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
}

impl Node {
    pub fn new(name: impl Into<String>, kind: NodeKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

/// Named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Gradients keyed like the graph's parameter registry, plus the optional
/// gradient with respect to the input batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T> {
    pub params: Vec<Param<T>>,
    pub input: Option<Tensor<T>>,
}

impl<T: Real> GradientSet<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn scale(&mut self, s: T) {
        for p in &mut self.params {
            p.value.scale(s);
        }
        if let Some(g) = &mut self.input {
            g.scale(s);
        }
    }
}

/// Which gradients a backward pass must produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Need {
    pub params: bool,
    pub input: bool,
}

impl Need {
    pub const PARAMS: Need = Need {
        params: true,
        input: false,
    };
    pub const INPUT: Need = Need {
        params: false,
        input: true,
    };
    pub const BOTH: Need = Need {
        params: true,
        input: true,
    };
}

/// Scalar loss placed on top of the graph output for [`ComputeGraph::backward`].
#[derive(Clone, Copy, Debug)]
pub enum LossSpec<'a, T> {
    /// The graph output itself; only valid when it holds a single element.
    Output,
    /// Batch-mean cross-entropy of the temperature softmax.
    CrossEntropy {
        labels: &'a [usize],
        inv_temperature: T,
    },
    /// Batch-mean `KL(reference || softmax(output))`.
    KlToReference { reference: &'a Tensor<T> },
}

enum Cache<T> {
    Affine {
        input: Tensor<T>,
    },
    Conv {
        cols: Vec<T>,
        in_shape: Vec<usize>,
    },
    Relu {
        mask: Vec<bool>,
    },
    Pool {
        argmax: Vec<u32>,
        in_shape: Vec<usize>,
    },
    Flatten,
}

/// Intermediate values recorded by [`ComputeGraph::forward`].
pub struct Tape<T> {
    batch: usize,
    caches: Vec<Cache<T>>,
}

impl<T> Tape<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComputeGraph<T> {
    input_shape: Vec<usize>,
    nodes: Vec<Node>,
    /// Per-example output shape of every node.
    shapes: Vec<Vec<usize>>,
    /// Indices of (weight, bias) in `params` for parameterised nodes.
    slots: Vec<Option<(usize, usize)>>,
    params: Vec<Param<T>>,
}

impl<T: Real> ComputeGraph<T> {
    /// Builds a graph with zero-valued parameters, validating that every
    /// node accepts the shape produced by its predecessor.
    pub fn new(input_shape: Vec<usize>, nodes: Vec<Node>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("invalid input shape {input_shape:?}")));
        }
        let mut shapes = Vec::with_capacity(nodes.len());
        let mut slots = Vec::with_capacity(nodes.len());
        let mut params: Vec<Param<T>> = Vec::new();
        let mut cur = input_shape.clone();
        for (i, node) in nodes.iter().enumerate() {
            if nodes[..i].iter().any(|n| n.name == node.name) {
                return Err(Error::invalid(format!(
                    "duplicate node name `{}`",
                    node.name
                )));
            }
            let mismatch = |expected: Vec<usize>, actual: &[usize]| Error::NodeShape {
                node: node.name.clone(),
                expected,
                actual: actual.to_vec(),
            };
            let (out, weight_shape, bias_len) = match node.kind {
                NodeKind::Affine {
                    in_features,
                    out_features,
                } => {
                    if cur != [in_features] {
                        return Err(mismatch(vec![in_features], &cur));
                    }
                    (
                        vec![out_features],
                        Some(vec![out_features, in_features]),
                        out_features,
                    )
                }
                NodeKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    if cur.len() != 3 || cur[0] != in_channels || cur[1] < kernel || cur[2] < kernel
                    {
                        return Err(mismatch(vec![in_channels, kernel, kernel], &cur));
                    }
                    (
                        vec![out_channels, cur[1] - kernel + 1, cur[2] - kernel + 1],
                        Some(vec![out_channels, in_channels, kernel, kernel]),
                        out_channels,
                    )
                }
                NodeKind::Relu => (cur.clone(), None, 0),
                NodeKind::MaxPool2 => {
                    if cur.len() != 3 || cur[1] < 2 || cur[2] < 2 {
                        return Err(mismatch(
                            vec![cur.first().copied().unwrap_or(1), 2, 2],
                            &cur,
                        ));
                    }
                    (vec![cur[0], cur[1] / 2, cur[2] / 2], None, 0)
                }
                NodeKind::Flatten => (vec![cur.iter().product()], None, 0),
            };
            if let Some(ws) = weight_shape {
                params.push(Param {
                    name: format!("{}.weight", node.name),
                    value: Tensor::zeros(ws),
                });
                params.push(Param {
                    name: format!("{}.bias", node.name),
                    value: Tensor::zeros(vec![bias_len]),
                });
                slots.push(Some((params.len() - 2, params.len() - 1)));
            } else {
                slots.push(None);
            }
            shapes.push(out.clone());
            cur = out;
        }
        Ok(Self {
            input_shape,
            nodes,
            shapes,
            slots,
            params,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-example output shape.
    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map_or(&self.input_shape, |s| s)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    /// Replaces the value of a named parameter; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::NodeShape {
                node: name.to_string(),
                expected: p.value.shape().to_vec(),
                actual: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Zero-valued gradient set shaped like the registry.
    pub fn zero_grads(&self) -> GradientSet<T> {
        GradientSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Tensor::zeros(p.value.shape().to_vec()),
                })
                .collect(),
            input: None,
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let shape = input.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            let node = self
                .nodes
                .first()
                .map_or_else(|| "input".to_string(), |n| n.name.clone());
            let mut expected = vec![shape.first().copied().unwrap_or(1)];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::NodeShape {
                node,
                expected,
                actual: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Logits for a batch.
    pub fn evaluate(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        Ok(self.run(input, None))
    }

    /// Logits together with the tape needed for a backward pass.
    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(input)?;
        let mut caches = Vec::with_capacity(self.nodes.len());
        let out = self.run(input, Some(&mut caches));
        Ok((
            out,
            Tape {
                batch: input.batch(),
                caches,
            },
        ))
    }

    fn run(&self, input: &Tensor<T>, mut caches: Option<&mut Vec<Cache<T>>>) -> Tensor<T> {
        let n = input.batch();
        let mut x = input.clone();
        for (i, node) in self.nodes.iter().enumerate() {
            let mut out_shape = vec![n];
            out_shape.extend_from_slice(&self.shapes[i]);
            let (y, cache) = match node.kind {
                NodeKind::Affine {
                    in_features,
                    out_features,
                } => {
                    let (wi, bi) = self.slots[i].expect("affine has parameters");
                    let w = self.params[wi].value.data();
                    let b = self.params[bi].value.data();
                    let mut y = vec![T::zero(); n * out_features];
                    for row in y.chunks_exact_mut(out_features) {
                        row.copy_from_slice(b);
                    }
                    T::gemm(
                        n,
                        in_features,
                        out_features,
                        T::one(),
                        x.data(),
                        in_features as isize,
                        1,
                        w,
                        1,
                        in_features as isize,
                        T::one(),
                        &mut y,
                        out_features as isize,
                        1,
                    );
                    (y, Cache::Affine { input: x })
                }
                NodeKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    let (wi, bi) = self.slots[i].expect("conv has parameters");
                    let in_shape = x.shape().to_vec();
                    let (h, w) = (in_shape[2], in_shape[3]);
                    let (ho, wo) = (h - kernel + 1, w - kernel + 1);
                    let p = ho * wo;
                    let np = n * p;
                    let k = in_channels * kernel * kernel;
                    let cols = im2col(x.data(), n, in_channels, h, w, kernel);
                    let mut mat = vec![T::zero(); out_channels * np];
                    T::gemm(
                        out_channels,
                        k,
                        np,
                        T::one(),
                        self.params[wi].value.data(),
                        k as isize,
                        1,
                        &cols,
                        np as isize,
                        1,
                        T::zero(),
                        &mut mat,
                        np as isize,
                        1,
                    );
                    let bias = self.params[bi].value.data();
                    let mut y = vec![T::zero(); n * out_channels * p];
                    for s in 0..n {
                        for co in 0..out_channels {
                            let src = &mat[co * np + s * p..co * np + (s + 1) * p];
                            let dst = &mut y[(s * out_channels + co) * p..][..p];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d = v + bias[co];
                            }
                        }
                    }
                    (y, Cache::Conv { cols, in_shape })
                }
                NodeKind::Relu => {
                    let mask: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
                    let y = x
                        .data()
                        .iter()
                        .map(|&v| if v > T::zero() { v } else { T::zero() })
                        .collect();
                    (y, Cache::Relu { mask })
                }
                NodeKind::MaxPool2 => {
                    let in_shape = x.shape().to_vec();
                    let (y, argmax) = max_pool2(x.data(), &in_shape);
                    (y, Cache::Pool { argmax, in_shape })
                }
                NodeKind::Flatten => (x.into_data(), Cache::Flatten),
            };
            x = Tensor::new(out_shape, y).expect("node output matches inferred shape");
            if let Some(c) = caches.as_deref_mut() {
                c.push(cache);
            }
        }
        x
    }

    /// Adds the gradients of `sum_ij dlogits_ij * logits_ij` into `grads`.
    pub fn accumulate_backward(
        &self,
        tape: &Tape<T>,
        dlogits: &Tensor<T>,
        need: Need,
        grads: &mut GradientSet<T>,
    ) -> Result<()> {
        let n = tape.batch;
        let mut expected = vec![n];
        expected.extend_from_slice(self.output_shape());
        if dlogits.shape() != expected.as_slice() {
            return Err(Error::NodeShape {
                node: self
                    .nodes
                    .last()
                    .map_or_else(|| "output".into(), |n| n.name.clone()),
                expected,
                actual: dlogits.shape().to_vec(),
            });
        }
        if need.params && grads.params.len() != self.params.len() {
            return Err(Error::invalid("gradient set does not match the registry"));
        }
        let mut g = dlogits.data().to_vec();
        for (i, node) in self.nodes.iter().enumerate().rev() {
            let want_dx = i > 0 || need.input;
            match (&node.kind, &tape.caches[i]) {
                (
                    NodeKind::Affine {
                        in_features,
                        out_features,
                    },
                    Cache::Affine { input },
                ) => {
                    let (fi, fo) = (*in_features, *out_features);
                    let (wi, bi) = self.slots[i].expect("affine has parameters");
                    if need.params {
                        T::gemm(
                            fo,
                            n,
                            fi,
                            T::one(),
                            &g,
                            1,
                            fo as isize,
                            input.data(),
                            fi as isize,
                            1,
                            T::one(),
                            grads.params[wi].value.data_mut(),
                            fi as isize,
                            1,
                        );
                        let db = grads.params[bi].value.data_mut();
                        for row in g.chunks_exact(fo) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                    if want_dx {
                        let mut dx = vec![T::zero(); n * fi];
                        T::gemm(
                            n,
                            fo,
                            fi,
                            T::one(),
                            &g,
                            fo as isize,
                            1,
                            self.params[wi].value.data(),
                            fi as isize,
                            1,
                            T::zero(),
                            &mut dx,
                            fi as isize,
                            1,
                        );
                        g = dx;
                    }
                }
                (
                    NodeKind::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                    },
                    Cache::Conv { cols, in_shape },
                ) => {
                    let (ci, co, kk) = (*in_channels, *out_channels, *kernel);
                    let (wi, bi) = self.slots[i].expect("conv has parameters");
                    let (h, w) = (in_shape[2], in_shape[3]);
                    let p = (h - kk + 1) * (w - kk + 1);
                    let np = n * p;
                    let k = ci * kk * kk;
                    let mut mat = vec![T::zero(); co * np];
                    for s in 0..n {
                        for c in 0..co {
                            mat[c * np + s * p..c * np + (s + 1) * p]
                                .copy_from_slice(&g[(s * co + c) * p..][..p]);
                        }
                    }
                    if need.params {
                        T::gemm(
                            co,
                            np,
                            k,
                            T::one(),
                            &mat,
                            np as isize,
                            1,
                            cols,
                            1,
                            np as isize,
                            T::one(),
                            grads.params[wi].value.data_mut(),
                            k as isize,
                            1,
                        );
                        let db = grads.params[bi].value.data_mut();
                        for (c, d) in db.iter_mut().enumerate() {
                            let mut acc = T::zero();
                            for &v in &mat[c * np..(c + 1) * np] {
                                acc += v;
                            }
                            *d += acc;
                        }
                    }
                    if want_dx {
                        let mut dcols = vec![T::zero(); k * np];
                        T::gemm(
                            k,
                            co,
                            np,
                            T::one(),
                            self.params[wi].value.data(),
                            1,
                            k as isize,
                            &mat,
                            np as isize,
                            1,
                            T::zero(),
                            &mut dcols,
                            np as isize,
                            1,
                        );
                        g = col2im(&dcols, n, ci, h, w, kk);
                    }
                }
                (NodeKind::Relu, Cache::Relu { mask }) => {
                    for (v, &m) in g.iter_mut().zip(mask) {
                        if !m {
                            *v = T::zero();
                        }
                    }
                }
                (NodeKind::MaxPool2, Cache::Pool { argmax, in_shape }) => {
                    let mut dx = vec![T::zero(); in_shape.iter().product()];
                    for (&src, &v) in argmax.iter().zip(&g) {
                        dx[src as usize] += v;
                    }
                    g = dx;
                }
                (NodeKind::Flatten, Cache::Flatten) => {}
                _ => unreachable!("tape does not belong to this graph"),
            }
        }
        if need.input {
            let mut shape = vec![n];
            shape.extend_from_slice(&self.input_shape);
            let dx = Tensor::new(shape, g)?;
            match &mut grads.input {
                Some(acc) => acc.add_assign(&dx),
                None => grads.input = Some(dx),
            }
        }
        Ok(())
    }

    /// Gradients of `sum_ij dlogits_ij * logits_ij`.
    pub fn backward_from(
        &self,
        tape: &Tape<T>,
        dlogits: &Tensor<T>,
        need: Need,
    ) -> Result<GradientSet<T>> {
        let mut grads = if need.params {
            self.zero_grads()
        } else {
            GradientSet {
                params: Vec::new(),
                input: None,
            }
        };
        self.accumulate_backward(tape, dlogits, need, &mut grads)?;
        Ok(grads)
    }

    /// Scalar loss value and its gradients for every parameter and the input.
    pub fn backward(
        &self,
        input: &Tensor<T>,
        loss: LossSpec<'_, T>,
    ) -> Result<(T, GradientSet<T>)> {
        let (out, tape) = self.forward(input)?;
        let n = T::from_f64(input.batch() as f64);
        let (value, dout) = match loss {
            LossSpec::Output => {
                if out.len() != 1 {
                    return Err(Error::invalid(format!(
                        "loss node `{}` is not scalar: shape {:?}",
                        self.nodes.last().map_or("input", |n| n.name.as_str()),
                        out.shape()
                    )));
                }
                (out.data()[0], Tensor::full(out.shape().to_vec(), T::one()))
            }
            LossSpec::CrossEntropy {
                labels,
                inv_temperature,
            } => {
                if self.output_shape().len() != 1 {
                    return Err(Error::invalid("cross-entropy needs a logit vector output"));
                }
                let (losses, mut d) = cross_entropy_logits(&out, labels, inv_temperature)?;
                d.scale(T::one() / n);
                (losses.into_iter().sum::<T>() / n, d)
            }
            LossSpec::KlToReference { reference } => {
                let (vals, mut d) = kl_to_reference_logits(reference, &out)?;
                d.scale(T::one() / n);
                (vals.into_iter().sum::<T>() / n, d)
            }
        };
        let grads = self.backward_from(&tape, &dout, Need::BOTH)?;
        Ok((value, grads))
    }

    /// Converts parameters to another precision.
    pub fn cast<U: Real>(&self) -> ComputeGraph<U> {
        ComputeGraph {
            input_shape: self.input_shape.clone(),
            nodes: self.nodes.clone(),
            shapes: self.shapes.clone(),
            slots: self.slots.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// Unfolds `(N, C, H, W)` into a `(C*k*k, N*Ho*Wo)` row-major matrix.
fn im2col<T: Real>(x: &[T], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let p = ho * wo;
    let np = n * p;
    let mut cols = vec![T::zero(); c * k * k * np];
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let r = (ci * k + kh) * k + kw;
                let row = &mut cols[r * np..(r + 1) * np];
                for s in 0..n {
                    let plane = &x[(s * c + ci) * h * w..][..h * w];
                    for oh in 0..ho {
                        let src = &plane[(oh + kh) * w + kw..][..wo];
                        row[s * p + oh * wo..][..wo].copy_from_slice(src);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let p = ho * wo;
    let np = n * p;
    let mut x = vec![T::zero(); n * c * h * w];
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let r = (ci * k + kh) * k + kw;
                let row = &cols[r * np..(r + 1) * np];
                for s in 0..n {
                    let plane = &mut x[(s * c + ci) * h * w..][..h * w];
                    for oh in 0..ho {
                        let dst = &mut plane[(oh + kh) * w + kw..][..wo];
                        for (d, &v) in dst.iter_mut().zip(&row[s * p + oh * wo..][..wo]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    x
}

fn max_pool2<T: Real>(x: &[T], shape: &[usize]) -> (Vec<T>, Vec<u32>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let top = base + 2 * oh * w + 2 * ow;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                y.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (y, idx)
}
