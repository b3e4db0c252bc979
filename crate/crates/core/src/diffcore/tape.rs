//! Reverse-mode differentiation over a linear op record.
//!
//! A [`Tape`] is created with the set of parameter names that should receive
//! gradients. Every op appends one node holding its output; `backward` walks
//! the nodes in exact reverse order and only propagates through nodes that
//! depend on a trainable parameter.

use std::collections::{BTreeMap, BTreeSet};

use super::kernel::{self, NormMode, NormStats};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Input,
    Param(String),
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Norm { x: Var, scale: Var, shift: Var, mean: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    Affine { x: Var, gamma: Var, beta: Var },
    Relu { x: Var },
    AvgPool { x: Var, k: usize },
    Flatten { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Add { a: Var, b: Var },
    Sum { x: Var },
    Entropy { logits: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, mask: Option<Vec<bool>>, count: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
    /// Softmax saved by loss nodes.
    probs: Option<Tensor<T>>,
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.map
    }

    /// Total number of gradient entries across all parameters.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    trainable: BTreeSet<String>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Tape<T> {
    pub fn new<I, S>(trainable: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            nodes: Vec::new(),
            trainable: trainable.into_iter().map(Into::into).collect(),
            params: BTreeMap::new(),
        }
    }

    pub fn trainable(&self) -> &BTreeSet<String> {
        &self.trainable
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_raw(value, op, needs_grad, None)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op, needs_grad: bool, probs: Option<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            probs,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        match vars.iter().find(|v| v.0 >= self.nodes.len()) {
            Some(v) => Err(Error::Tape(format!("variable {} is not on this tape", v.0))),
            None => Ok(()),
        }
    }

    /// Records a non-trainable input.
    pub fn input(&mut self, x: Tensor<T>) -> Var {
        self.push_raw(x, Op::Input, false, None)
    }

    /// Registers a named parameter. Registering the same name twice returns
    /// the original handle, so shared parameters accumulate one gradient.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let needs = self.trainable.contains(name);
        let v = self.push_raw(value.clone(), Op::Param(name.to_string()), needs, None);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.check(&[x, w])?;
        let bias = match b {
            Some(b) => {
                self.check(&[b])?;
                Some(self.value(b))
            }
            None => None,
        };
        let out = kernel::conv2d(self.value(x), self.value(w), bias, stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv { x, w, b, stride, pad }, &inputs))
    }

    /// Normalization; in `UseBatch` mode the batch statistics are returned
    /// alongside the output.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mode: NormMode,
        stored: &NormStats<T>,
        eps: f64,
    ) -> Result<(Var, Option<NormStats<T>>)> {
        self.check(&[x, scale, shift])?;
        let (xs, sc, sh) = (self.value(x), self.value(scale), self.value(shift));
        let (out, batch_stats, mean, inv_std) = match mode {
            NormMode::UseBatch => {
                let (out, stats, inv_std) = kernel::bn_forward_batch(xs, sc.data(), sh.data(), eps)?;
                let mean = stats.mean.iter().map(|v| v.as_f64()).collect();
                (out, Some(stats), mean, inv_std)
            }
            NormMode::UseStored => {
                let out = kernel::bn_forward_stored(xs, sc.data(), sh.data(), stored, eps)?;
                let mean = stored.mean.iter().map(|v| v.as_f64()).collect();
                let inv_std = stored.var.iter().map(|v| 1.0 / (v.as_f64() + eps).sqrt()).collect();
                (out, None, mean, inv_std)
            }
        };
        let op = Op::Norm {
            x,
            scale,
            shift,
            mean,
            inv_std,
            batch: mode == NormMode::UseBatch,
        };
        Ok((self.push(out, op, &[x, scale, shift]), batch_stats))
    }

    pub fn affine_modulate(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check(&[x, gamma, beta])?;
        let out = kernel::affine_modulate(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(out, Op::Affine { x, gamma, beta }, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let out = kernel::relu(self.value(x))?;
        Ok(self.push(out, Op::Relu { x }, &[x]))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        self.check(&[x])?;
        let out = kernel::avg_pool(self.value(x), k)?;
        Ok(self.push(out, Op::AvgPool { x, k }, &[x]))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let out = kernel::flatten(self.value(x))?;
        Ok(self.push(out, Op::Flatten { x }, &[x]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(&[x, w, b])?;
        let out = kernel::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let out = kernel::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    /// Sum of all elements as a scalar node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let total = self.value(x).sum_f64();
        let value = Tensor::scalar(T::from_f64_lossy(total)).ensure_finite("sum")?;
        Ok(self.push(value, Op::Sum { x }, &[x]))
    }

    /// Mean prediction entropy of `logits` as a scalar node.
    pub fn entropy_loss(&mut self, logits: Var) -> Result<Var> {
        self.check(&[logits])?;
        let (loss, probs) = kernel::entropy_loss_with_probs(self.value(logits))?;
        let needs = self.nodes[logits.0].needs_grad;
        let value = Tensor::scalar(T::from_f64_lossy(loss)).ensure_finite("entropy_loss")?;
        Ok(self.push_raw(value, Op::Entropy { logits }, needs, Some(probs)))
    }

    /// Mean cross-entropy over rows selected by `mask`. Returns the loss node
    /// and the number of selected rows.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], mask: Option<&[bool]>) -> Result<(Var, usize)> {
        self.check(&[logits])?;
        let (loss, probs, count) = kernel::cross_entropy_masked(self.value(logits), labels, mask)?;
        let needs = self.nodes[logits.0].needs_grad;
        let value = Tensor::scalar(T::from_f64_lossy(loss)).ensure_finite("cross_entropy")?;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            mask: mask.map(<[bool]>::to_vec),
            count,
        };
        Ok((self.push_raw(value, op, needs, Some(probs)), count))
    }

    /// Exact gradients of the scalar `loss` with respect to every trainable
    /// parameter registered on this tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape(format!("loss variable {} is not on this tape", loss.0)));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if let Some(missing) = self.trainable.iter().find(|n| !self.params.contains_key(*n)) {
            return Err(Error::Tape(format!("trainable parameter `{missing}` was never used in the forward pass")));
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape().to_vec()));
        let mut out = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let wants = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Input => {}
                Op::Param(name) => {
                    out.insert(name.clone(), dy);
                }
                Op::Conv { x, w, b, stride, pad } => {
                    let g = kernel::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &dy,
                        *stride,
                        *pad,
                        (wants(*x), wants(*w), b.is_some_and(wants)),
                    )?;
                    accumulate(&mut grads, *x, g.dx)?;
                    accumulate(&mut grads, *w, g.dw)?;
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, g.db)?;
                    }
                }
                Op::Norm { x, scale, shift, mean, inv_std, batch } => {
                    let need_affine = wants(*scale) || wants(*shift);
                    let (dx, affine) = kernel::bn_backward(
                        self.value(*x),
                        self.value(*scale).data(),
                        mean,
                        inv_std,
                        &dy,
                        *batch,
                        wants(*x),
                        need_affine,
                    )?;
                    accumulate(&mut grads, *x, dx)?;
                    if let Some((ds, dsh)) = affine {
                        let c = ds.len();
                        if wants(*scale) {
                            accumulate(&mut grads, *scale, Some(Tensor::new(vec![c], ds)?))?;
                        }
                        if wants(*shift) {
                            accumulate(&mut grads, *shift, Some(Tensor::new(vec![c], dsh)?))?;
                        }
                    }
                }
                Op::Affine { x, gamma, beta } => {
                    let need_params = wants(*gamma) || wants(*beta);
                    let (dx, params) =
                        kernel::affine_backward(self.value(*x), self.value(*gamma), &dy, wants(*x), need_params)?;
                    accumulate(&mut grads, *x, dx)?;
                    if let Some((dg, db)) = params {
                        if wants(*gamma) {
                            accumulate(&mut grads, *gamma, Some(dg))?;
                        }
                        if wants(*beta) {
                            accumulate(&mut grads, *beta, Some(db))?;
                        }
                    }
                }
                Op::Relu { x } => {
                    let dx = kernel::relu_backward(self.value(*x), &dy);
                    accumulate(&mut grads, *x, Some(dx))?;
                }
                Op::AvgPool { x, k } => {
                    let dx = kernel::avg_pool_backward(self.value(*x).shape(), *k, &dy)?;
                    accumulate(&mut grads, *x, Some(dx))?;
                }
                Op::Flatten { x } => {
                    let dx = dy.reshape(self.value(*x).shape().to_vec())?;
                    accumulate(&mut grads, *x, Some(dx))?;
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) =
                        kernel::linear_backward(self.value(*x), self.value(*w), &dy, (wants(*x), wants(*w), wants(*b)))?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add { a, b } => {
                    if wants(*a) {
                        accumulate(&mut grads, *a, Some(dy.clone()))?;
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, Some(dy))?;
                    }
                }
                Op::Sum { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, Some(Tensor::full(shape, dy.data()[0])))?;
                }
                Op::Entropy { logits } => {
                    let probs = node.probs.as_ref().expect("loss nodes keep their softmax");
                    let dl = kernel::entropy_backward(probs, dy.data()[0].as_f64());
                    accumulate(&mut grads, *logits, Some(dl))?;
                }
                Op::CrossEntropy { logits, labels, mask, count } => {
                    let probs = node.probs.as_ref().expect("loss nodes keep their softmax");
                    let dl = kernel::cross_entropy_backward(probs, labels, mask.as_deref(), *count, dy.data()[0].as_f64());
                    accumulate(&mut grads, *logits, Some(dl))?;
                }
            }
        }

        // Trainable parameters the loss does not depend on get explicit zeros.
        for name in &self.trainable {
            if !out.contains_key(name) {
                let v = self.params[name];
                out.insert(name.clone(), Tensor::zeros(self.value(v).shape().to_vec()));
            }
        }
        Ok(Gradients { map: out })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Option<Tensor<T>>) -> Result<()> {
    let Some(g) = g else { return Ok(()) };
    match &mut grads[v.0] {
        slot @ None => *slot = Some(g),
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::Tape(format!("gradient shape {:?} vs {:?}", acc.shape(), g.shape())));
            }
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_entropy_is_stationary() {
        let mut tape = Tape::<f64>::new(["z"]);
        let z = tape.param("z", &Tensor::full(vec![3, 10], 0.4));
        let loss = tape.entropy_loss(z).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get("z").unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn beta_gradient_counts_positions() {
        let mut tape = Tape::<f32>::new(["gamma", "beta"]);
        let x = tape.input(Tensor::from_f32(vec![2, 3, 2, 5], &[0.5; 60]).unwrap());
        let gamma = tape.param("gamma", &Tensor::ones(vec![3]));
        let beta = tape.param("beta", &Tensor::zeros(vec![3]));
        let y = tape.affine_modulate(x, gamma, beta).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        // N * H * W = 2 * 2 * 5 positions per channel
        assert_eq!(g.get("beta").unwrap().data(), &[20.0, 20.0, 20.0]);
        assert_eq!(g.get("gamma").unwrap().data(), &[10.0, 10.0, 10.0]);
    }

    #[test]
    fn gradient_keys_equal_trainable_set() {
        let mut tape = Tape::<f64>::new(["a", "c"]);
        let x = tape.input(Tensor::full(vec![2, 2], 0.3));
        let a = tape.param("a", &Tensor::new(vec![2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap());
        let b = tape.param("b", &Tensor::zeros(vec![2]));
        let c = tape.param("c", &Tensor::zeros(vec![2, 2]));
        let y = tape.linear(x, a, b).unwrap();
        let loss = tape.entropy_loss(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.keys().collect::<Vec<_>>(), vec!["a", "c"]);
        assert!(g.get("c").unwrap().data().iter().all(|&v| v == 0.0));
        let _ = c;
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f64>::new(["missing"]);
        let z = tape.param("z", &Tensor::zeros(vec![1, 2]));
        let loss = tape.entropy_loss(z).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Tape(_))));
        let tape2 = Tape::<f64>::new(Vec::<String>::new());
        assert!(tape2.backward(loss).is_err());
        let mut tape3 = Tape::<f64>::new(Vec::<String>::new());
        let v = tape3.input(Tensor::zeros(vec![2, 2]));
        assert!(tape3.backward(v).is_err());
    }

    #[test]
    fn shared_parameter_accumulates() {
        // loss = CE(x W^T + x W^T): W used twice
        let mut tape = Tape::<f64>::new(["w"]);
        let x = tape.input(Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap());
        let w = tape.param("w", &Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let w_again = tape.param("w", &Tensor::zeros(vec![2, 2]));
        assert_eq!(w, w_again);
        let b = tape.param("b", &Tensor::zeros(vec![2]));
        let y1 = tape.linear(x, w, b).unwrap();
        let y2 = tape.linear(x, w, b).unwrap();
        let y = tape.add(y1, y2).unwrap();
        let (loss, n) = tape.cross_entropy(y, &[0], None).unwrap();
        assert_eq!(n, 1);
        let g = tape.backward(loss).unwrap();
        // y = 2 x W^T, dL/dy = p - e0, dL/dW = 2 (p - e0) x^T
        let logits = [2.0 * (0.1 - 0.4), 2.0 * (0.3 - 0.8)];
        let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        let p: Vec<f64> = logits.iter().map(|v| v.exp() / z).collect();
        let expected = [2.0 * (p[0] - 1.0), 2.0 * (p[0] - 1.0) * -2.0, 2.0 * p[1], 2.0 * p[1] * -2.0];
        for (got, want) in g.get("w").unwrap().data().iter().zip(expected) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }
}
