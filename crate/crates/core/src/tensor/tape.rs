use std::collections::HashMap;

use super::conv::{conv2d, conv2d_backward, ConvSpec};
use super::norm::{batch_stats, bn_backward, normalize, update_running, BnMode, BN_EPSILON, BN_MOMENTUM};
use super::ops::{global_avg_pool, linear_head, softmax_cross_entropy};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Registry key of a learnable tensor. Every use site of a shared operator refers to the same id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Conv(ConvSpec),
    BnScale,
    BnShift,
    HeadWeight,
    HeadBias,
}

impl ParamKind {
    pub fn is_batch_norm(&self) -> bool {
        matches!(self, ParamKind::BnScale | ParamKind::BnShift)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// A batch normalization instance: its two learnable vectors and its running-statistics buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnSlot {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub buffer: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Ordered parameter registry plus batch-norm running statistics (which are not parameters).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    running: Vec<RunningStats<T>>,
    frozen: bool,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            running: Vec::new(),
            frozen: false,
        }
    }

    /// Marks the weights as fixed; optimizers refuse to step a frozen store.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_conv(&mut self, name: impl Into<String>, spec: ConvSpec, weights: Tensor<T>) -> Result<ParamId> {
        if weights.shape() != spec.weight_shape() {
            return Err(Error::config(format!(
                "weights {:?} do not fit operator {:?}",
                weights.shape(),
                spec.weight_shape()
            )));
        }
        Ok(self.add(name, ParamKind::Conv(spec), weights))
    }

    /// Registers `gamma = 1`, `beta = 0` and fresh running statistics.
    pub fn add_bn(&mut self, name: &str, channels: usize) -> BnSlot {
        let gamma = self.add(format!("{name}.gamma"), ParamKind::BnScale, Tensor::full([channels], T::one()));
        let beta = self.add(format!("{name}.beta"), ParamKind::BnShift, Tensor::zeros([channels]));
        self.running.push(RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        });
        BnSlot {
            gamma,
            beta,
            buffer: self.running.len() - 1,
            channels,
        }
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn conv_spec(&self, id: ParamId) -> Result<ConvSpec> {
        match self.params[id.0].kind {
            ParamKind::Conv(spec) => Ok(spec),
            other => Err(Error::usage(format!(
                "parameter {} is {other:?}, not a convolution",
                self.params[id.0].name
            ))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of registered tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over unique registered tensors.
    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn running(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn running_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect();
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: conv(&r.mean),
                    var: conv(&r.var),
                })
                .collect(),
            frozen: self.frozen,
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        spec: ConvSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
        slot: BnSlot,
        var_unbiased: Vec<T>,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    AvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Record of one forward pass. Backward visits each node once, in reverse order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
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

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf for a registered parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv(&mut self, store: &ParamStore<T>, x: Var, id: ParamId) -> Result<Var> {
        let spec = store.conv_spec(id)?;
        let w = self.param(store, id);
        let y = conv2d(self.value(x), &spec, self.value(w))?;
        Ok(self.push(y, Op::Conv { x, w, spec }))
    }

    pub fn batch_norm(&mut self, store: &ParamStore<T>, x: Var, slot: BnSlot, mode: BnMode) -> Result<Var> {
        let input = self.value(x);
        let c = *input.shape().last().unwrap_or(&0);
        if c != slot.channels {
            return Err(Error::config(format!(
                "batch norm {} has {} channels, input has {c}",
                store.get(slot.gamma).name,
                slot.channels
            )));
        }
        let (mean, inv_std, var_unbiased, batch) = match mode {
            BnMode::Train => {
                let s = batch_stats(input, BN_EPSILON)?;
                (s.mean, s.inv_std, s.var_unbiased, true)
            }
            BnMode::Eval => {
                let rs = &store.running()[slot.buffer];
                let inv = rs.var.iter().map(|&v| T::of(1.0 / (v.as_f64() + BN_EPSILON).sqrt())).collect();
                (rs.mean.clone(), inv, Vec::new(), false)
            }
        };
        let gamma = self.param(store, slot.gamma);
        let beta = self.param(store, slot.beta);
        let y = normalize(
            self.value(x),
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats: batch,
                slot,
                var_unbiased,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = super::ops::relu(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = super::ops::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = super::ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: Var, alpha: T) -> Var {
        let y = self.value(x).scale(alpha);
        self.push(y, Op::Scale(x, alpha))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::AvgPool(x)))
    }

    pub fn linear(&mut self, store: &ParamStore<T>, x: Var, weight: ParamId, bias: ParamId) -> Result<Var> {
        let w = self.param(store, weight);
        let b = self.param(store, bias);
        let y = linear_head(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Folds the batch statistics of every training-mode normalization into the running estimates.
    pub fn commit_bn_stats(&self, store: &mut ParamStore<T>) {
        for node in &self.nodes {
            if let Op::BatchNorm {
                batch_stats: true,
                slot,
                mean,
                var_unbiased,
                inv_std,
                ..
            } = &node.op
            {
                let saved = super::norm::BnSaved {
                    mean: mean.clone(),
                    inv_std: inv_std.clone(),
                    var_unbiased: var_unbiased.clone(),
                };
                let rs = &mut store.running_mut()[slot.buffer];
                update_running(&mut rs.mean, &mut rs.var, &saved, BN_MOMENTUM);
            }
        }
    }

    /// Reverse-mode sweep from a scalar `loss`. Shared parameters receive the sum over all use sites.
    pub fn backward(&self, loss: Var, num_params: usize) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::usage("backward called without a recorded forward pass"));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::usage("loss variable does not belong to this tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        let mut out = Gradients {
            grads: (0..num_params).map(|_| None).collect(),
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if id.0 >= num_params {
                        return Err(Error::usage(format!("parameter {} outside registry of {num_params}", id.0)));
                    }
                    accumulate(&mut out.grads[id.0], g);
                }
                Op::Conv { x, w, spec } => {
                    let need_x = self.needs_grad(*x);
                    let (dx, dw) = conv2d_backward(self.value(*x), spec, self.value(*w), &g, need_x)?;
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], dx);
                    }
                    accumulate(&mut grads[w.0], dw);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    batch_stats,
                    ..
                } => {
                    let (dx, dg, db) = bn_backward(
                        self.value(*x),
                        &g,
                        mean,
                        inv_std,
                        self.value(*gamma).data(),
                        *batch_stats,
                    );
                    accumulate(&mut grads[x.0], dx);
                    let c = dg.len();
                    accumulate(&mut grads[gamma.0], Tensor::new([c], dg)?);
                    accumulate(&mut grads[beta.0], Tensor::new([c], db)?);
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], g.scale(-T::one()));
                    accumulate(&mut grads[a.0], g);
                }
                Op::Scale(x, alpha) => accumulate(&mut grads[x.0], g.scale(*alpha)),
                Op::AvgPool(x) => {
                    let xs = self.value(*x);
                    let [b, m, n, c] = xs.dims4()?;
                    let inv = T::of(1.0 / (m * n) as f64);
                    let mut dx = Tensor::zeros(xs.shape().to_vec());
                    for bi in 0..b {
                        let src = &g.data()[bi * c..(bi + 1) * c];
                        for px in dx.data_mut()[bi * m * n * c..(bi + 1) * m * n * c].chunks_exact_mut(c) {
                            for (d, &s) in px.iter_mut().zip(src) {
                                *d = s * inv;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = linear_backward(self.value(*x), self.value(*w), &g);
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[w.0], dw);
                    accumulate(&mut grads[b.0], db);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let k = probs.shape()[1];
                    let scale = g.data()[0] / T::of(labels.len() as f64);
                    let mut dl = probs.clone();
                    for (row, &label) in dl.data_mut().chunks_exact_mut(k).zip(labels) {
                        row[label] = row[label] - T::one();
                        row.iter_mut().for_each(|v| *v = *v * scale);
                    }
                    accumulate(&mut grads[logits.0], dl);
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads[x.0], Tensor::full(shape, g.data()[0]));
                }
            }
        }
        Ok(out)
    }

    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Leaf)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.axpy(T::one(), &g),
        None => *slot = Some(g),
    }
}

fn linear_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[0];
    let mut dx = Tensor::zeros([b, c]);
    let mut dw = Tensor::zeros([k, c]);
    let mut db = Tensor::zeros([k]);
    // SAFETY: dx = g (b x k) * w (k x c); dw = g^T (k x b) * x (b x c).
    unsafe {
        T::gemm(
            b,
            k,
            c,
            T::one(),
            g.data().as_ptr(),
            k as isize,
            1,
            w.data().as_ptr(),
            c as isize,
            1,
            T::zero(),
            dx.data_mut().as_mut_ptr(),
            c as isize,
            1,
        );
        T::gemm(
            k,
            b,
            c,
            T::one(),
            g.data().as_ptr(),
            1,
            k as isize,
            x.data().as_ptr(),
            c as isize,
            1,
            T::zero(),
            dw.data_mut().as_mut_ptr(),
            c as isize,
            1,
        );
    }
    for row in g.data().chunks_exact(k) {
        for (d, &v) in db.data_mut().iter_mut().zip(row) {
            *d = *d + v;
        }
    }
    (dx, dw, db)
}

/// Gradient per registered parameter; `None` means the parameter was not reached.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradients indexed by parameter id; `None` marks a parameter the loss does not reach.
    pub fn from_parts(grads: Vec<Option<Tensor<T>>>) -> Self {
        Gradients { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient or zeros of the parameter's shape.
    pub fn get_or_zero(&self, store: &ParamStore<T>, id: ParamId) -> Tensor<T> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape().to_vec()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_conv(spec: ConvSpec, w: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store
            .add_conv("w", spec, Tensor::full(spec.weight_shape(), w))
            .unwrap();
        (store, id)
    }

    #[test]
    fn backward_without_forward_is_usage_error() {
        let tape = Tape::<f64>::new();
        let err = tape.backward(Var(0), 0).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn sum_of_pointwise_conv_gradient() {
        let spec = ConvSpec::new((1, 1), 2, 3, 1, 1, (0, 0)).unwrap();
        let (store, id) = store_with_conv(spec, 0.1);
        let x = Tensor::from_fn([2, 2, 3, 2], |i| (i as f64).sin());
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = tape.conv(&store, xv, id).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss, store.len()).unwrap();
        let dw = grads.get(id).unwrap();
        for o in 0..3 {
            for ci in 0..2 {
                let expect: f64 = x.data().iter().skip(ci).step_by(2).sum();
                assert!((dw.data()[o * 2 + ci] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_parameter_sums_use_sites() {
        let spec = ConvSpec::square(3, 2, 2, 1, 1).unwrap();
        let mut store = ParamStore::new();
        let w = Tensor::from_fn(spec.weight_shape(), |i| ((i * 7 % 11) as f64 - 5.0) / 7.0);
        let shared = store.add_conv("shared", spec, w.clone()).unwrap();
        let first = store.add_conv("first", spec, w.clone()).unwrap();
        let second = store.add_conv("second", spec, w).unwrap();
        let x = Tensor::from_fn([1, 4, 4, 2], |i| (i as f64 * 0.3).cos());

        let run = |a: ParamId, b: ParamId| {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let h = tape.conv(&store, xv, a).unwrap();
            let h = tape.relu(h);
            let y = tape.conv(&store, h, b).unwrap();
            let loss = tape.sum(y);
            (tape.value(loss).data()[0], tape.backward(loss, store.len()).unwrap())
        };
        let (l_shared, g_shared) = run(shared, shared);
        let (l_split, g_split) = run(first, second);
        assert!((l_shared - l_split).abs() < 1e-12);
        let mut summed = g_split.get(first).unwrap().clone();
        summed.axpy(1.0, g_split.get(second).unwrap());
        assert!(g_shared.get(shared).unwrap().max_abs_diff(&summed) < 1e-12);
    }

    #[test]
    fn unused_parameter_has_no_gradient() {
        let spec = ConvSpec::new((1, 1), 1, 1, 1, 1, (0, 0)).unwrap();
        let (mut store, id) = store_with_conv(spec, 1.0);
        let unused = store.add("unused", ParamKind::HeadBias, Tensor::zeros([3]));
        let mut tape = Tape::new();
        let xv = tape.input(Tensor::full([1, 1, 1, 1], 2.0));
        let y = tape.conv(&store, xv, id).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss, store.len()).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zero(&store, unused).sum(), 0.0);
    }

    #[test]
    fn batch_norm_statistics_commit() {
        let mut store = ParamStore::<f64>::new();
        let slot = store.add_bn("bn", 1);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new([4, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        tape.batch_norm(&store, x, slot, BnMode::Train).unwrap();
        tape.commit_bn_stats(&mut store);
        let rs = &store.running()[slot.buffer];
        assert!((rs.mean[0] - 0.25).abs() < 1e-12);
        // unbiased variance 5/3, blended with the initial 1.0
        assert!((rs.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }
}
