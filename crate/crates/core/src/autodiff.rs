//! Computation graphs over [`Tensor`]s.
//!
//! Model code is written once against the [`Graph`] trait and runs on either
//! backend:
//!
//! * [`Tape`] records every operation with the activations its backward pass
//!   needs, and replays them in reverse to produce exact gradients.
//! * [`Eager`] evaluates immediately and keeps nothing; intermediate tensors
//!   are freed as soon as the caller drops them.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ops::{self, Axis, BatchNormConfig, ConvGeometry, PoolWindow};
use crate::tensor::{Scalar, Shape, Tensor};

/// Updated running statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

pub trait Graph<S: Scalar> {
    type Value: Clone;

    /// Input that never receives a gradient.
    fn constant(&mut self, t: Tensor<S>) -> Self::Value;
    /// Leaf whose gradient is tracked.
    fn leaf(&mut self, t: Tensor<S>) -> Self::Value;
    fn tensor<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<S>;
    /// Number of executed operations of the given kind (e.g. `"conv2d"`).
    fn op_count(&self, op: &str) -> usize;

    fn conv2d(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: Option<&Self::Value>,
        g: ConvGeometry,
    ) -> Result<Self::Value>;
    fn batch_norm(
        &mut self,
        x: &Self::Value,
        gamma: &Self::Value,
        beta: &Self::Value,
        running_mean: &Tensor<S>,
        running_var: &Tensor<S>,
        cfg: BatchNormConfig,
    ) -> Result<(Self::Value, Option<RunningStats<S>>)>;
    fn relu(&mut self, x: &Self::Value) -> Self::Value;
    fn avg_pool(&mut self, x: &Self::Value, win: PoolWindow) -> Result<Self::Value>;
    fn bilinear_resize(&mut self, x: &Self::Value, h: usize, w: usize) -> Result<Self::Value>;
    fn softmax(&mut self, x: &Self::Value, axis: Axis) -> Result<Self::Value>;
    fn log_softmax(&mut self, x: &Self::Value, axis: Axis) -> Result<Self::Value>;
    fn concat(&mut self, xs: &[Self::Value], axis: Axis) -> Result<Self::Value>;
    fn reshape(&mut self, x: &Self::Value, shape: Shape) -> Result<Self::Value>;
    fn shift_width(&mut self, x: &Self::Value, shift: usize) -> Result<Self::Value>;
    fn permute_channels(&mut self, x: &Self::Value, perm: &[usize]) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, x: &Self::Value, factor: S) -> Self::Value;
    fn sum_channels(&mut self, x: &Self::Value) -> Self::Value;
    /// Sum of every element, as a 1x1x1x1 tensor.
    fn sum_all(&mut self, x: &Self::Value) -> Self::Value;
    fn smooth_l1(&mut self, x: &Self::Value) -> Self::Value;

    fn concat_channels(&mut self, xs: &[Self::Value]) -> Result<Self::Value> {
        self.concat(xs, Axis::Channel)
    }
}

fn check_same(a: Shape, b: Shape, op: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: {a} vs {b}")));
    }
    Ok(())
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

struct BackwardArgs<'a, S> {
    gout: &'a Tensor<S>,
    inputs: Vec<&'a Tensor<S>>,
    output: &'a Tensor<S>,
    needs: Vec<bool>,
}

type BackwardFn<S> = Box<dyn Fn(&BackwardArgs<'_, S>) -> Vec<Option<Tensor<S>>>>;

struct Node<S> {
    op: &'static str,
    value: Tensor<S>,
    parents: Vec<usize>,
    requires_grad: bool,
    is_leaf: bool,
    backward: Option<BackwardFn<S>>,
}

/// Recording graph. Owned by exactly one forward/backward pass.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    counts: BTreeMap<&'static str, usize>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            counts: BTreeMap::new(),
        }
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation names in execution order.
    pub fn ops(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.nodes.iter().map(|n| n.op)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last [`Tape::backward`] loss w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn push(&mut self, op: &'static str, value: Tensor<S>, parents: Vec<usize>, backward: BackwardFn<S>) -> Var {
        *self.counts.entry(op).or_default() += 1;
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            parents,
            requires_grad,
            is_leaf: false,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    fn push_input(&mut self, t: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: if requires_grad { "leaf" } else { "constant" },
            value: t,
            parents: Vec::new(),
            requires_grad,
            is_leaf: true,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a user-defined operation. `backward` receives the upstream
    /// gradient and the input values and returns one gradient per input.
    pub fn custom(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        value: Tensor<S>,
        backward: impl Fn(&Tensor<S>, &[&Tensor<S>]) -> Vec<Option<Tensor<S>>> + 'static,
    ) -> Var {
        self.push(
            op,
            value,
            inputs.iter().map(|v| v.0).collect(),
            Box::new(move |a| backward(a.gout, &a.inputs)),
        )
    }

    /// Reverse-mode sweep from a scalar loss. Afterwards every leaf reachable
    /// from `loss` that requires a gradient holds `d loss / d leaf`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape();
        if shape.0 != [1, 1, 1, 1] {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {shape}"
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::ONE));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if node.is_leaf {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let args = BackwardArgs {
                gout: &gout,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
            };
            let parent_grads = backward(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p].value.shape(), "grad shape for {}", node.op);
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !(node.is_leaf && node.requires_grad) {
                grads[id] = None;
            } else if grads[id].is_none() && id <= loss.0 {
                // Leaves that do not influence the loss get an explicit zero.
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = grads;
        Ok(())
    }
}

impl<S: Scalar> Graph<S> for Tape<S> {
    type Value = Var;

    fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push_input(t, false)
    }

    fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push_input(t, true)
    }

    fn tensor<'a>(&'a self, v: &'a Var) -> &'a Tensor<S> {
        self.value(*v)
    }

    fn op_count(&self, op: &str) -> usize {
        self.counts.get(op).copied().unwrap_or(0)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, g: ConvGeometry) -> Result<Var> {
        let out = ops::conv2d(self.value(*x), self.value(*w), b.map(|b| self.value(*b)), g)?;
        let mut parents = vec![x.0, w.0];
        parents.extend(b.map(|b| b.0));
        let with_bias = b.is_some();
        Ok(self.push(
            "conv2d",
            out,
            parents,
            Box::new(move |a| {
                let grads = ops::conv2d_backward(a.inputs[0], a.inputs[1], with_bias, g, a.gout, a.needs[0]);
                let mut v = vec![grads.input, Some(grads.weight)];
                if with_bias {
                    let bias_shape = a.inputs[2].shape();
                    v.push(grads.bias.map(|t| t.reshape(bias_shape).expect("bias grad")));
                }
                v
            }),
        ))
    }

    fn batch_norm(
        &mut self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        running_mean: &Tensor<S>,
        running_var: &Tensor<S>,
        cfg: BatchNormConfig,
    ) -> Result<(Var, Option<RunningStats<S>>)> {
        let (out, cache) = ops::batch_norm(
            self.value(*x),
            self.value(*gamma),
            self.value(*beta),
            running_mean,
            running_var,
            cfg,
        )?;
        let stats = match (&cache.running_mean, &cache.running_var) {
            (Some(m), Some(v)) => Some(RunningStats {
                mean: m.clone(),
                var: v.clone(),
            }),
            _ => None,
        };
        let v = self.push(
            "batch_norm",
            out,
            vec![x.0, gamma.0, beta.0],
            Box::new(move |a| {
                let (dx, dg, db) = ops::batch_norm_backward(&cache, a.inputs[1], a.gout);
                vec![
                    Some(dx),
                    Some(dg.reshape(a.inputs[1].shape()).expect("gamma grad")),
                    Some(db.reshape(a.inputs[2].shape()).expect("beta grad")),
                ]
            }),
        );
        Ok((v, stats))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let out = ops::relu(self.value(*x));
        self.push(
            "relu",
            out,
            vec![x.0],
            Box::new(|a| vec![Some(ops::relu_backward(a.inputs[0], a.gout))]),
        )
    }

    fn avg_pool(&mut self, x: &Var, win: PoolWindow) -> Result<Var> {
        let out = ops::avg_pool(self.value(*x), win)?;
        Ok(self.push(
            "avg_pool",
            out,
            vec![x.0],
            Box::new(move |a| vec![Some(ops::avg_pool_backward(a.inputs[0].shape(), win, a.gout))]),
        ))
    }

    fn bilinear_resize(&mut self, x: &Var, h: usize, w: usize) -> Result<Var> {
        let out = ops::bilinear_resize(self.value(*x), h, w)?;
        Ok(self.push(
            "bilinear_resize",
            out,
            vec![x.0],
            Box::new(|a| vec![Some(ops::bilinear_resize_backward(a.inputs[0].shape(), a.gout))]),
        ))
    }

    fn softmax(&mut self, x: &Var, axis: Axis) -> Result<Var> {
        let out = ops::softmax(self.value(*x), axis)?;
        Ok(self.push(
            "softmax",
            out,
            vec![x.0],
            Box::new(move |a| vec![Some(ops::softmax_backward(a.output, a.gout, axis))]),
        ))
    }

    fn log_softmax(&mut self, x: &Var, axis: Axis) -> Result<Var> {
        let out = ops::log_softmax(self.value(*x), axis)?;
        Ok(self.push(
            "log_softmax",
            out,
            vec![x.0],
            Box::new(move |a| vec![Some(ops::log_softmax_backward(a.output, a.gout, axis))]),
        ))
    }

    fn concat(&mut self, xs: &[Var], axis: Axis) -> Result<Var> {
        let inputs: Vec<&Tensor<S>> = xs.iter().map(|v| self.value(*v)).collect();
        let out = ops::concat(&inputs, axis)?;
        let shapes: Vec<Shape> = inputs.iter().map(|t| t.shape()).collect();
        Ok(self.push(
            "concat",
            out,
            xs.iter().map(|v| v.0).collect(),
            Box::new(move |a| {
                ops::concat_backward(a.gout, &shapes, axis)
                    .into_iter()
                    .map(Some)
                    .collect()
            }),
        ))
    }

    fn reshape(&mut self, x: &Var, shape: Shape) -> Result<Var> {
        let out = self.value(*x).clone().reshape(shape)?;
        Ok(self.push(
            "reshape",
            out,
            vec![x.0],
            Box::new(|a| vec![Some(a.gout.clone().reshape(a.inputs[0].shape()).expect("reshape"))]),
        ))
    }

    fn shift_width(&mut self, x: &Var, shift: usize) -> Result<Var> {
        let out = ops::shift_width(self.value(*x), shift)?;
        Ok(self.push(
            "shift_width",
            out,
            vec![x.0],
            Box::new(move |a| vec![Some(ops::shift_width_backward(a.gout, shift))]),
        ))
    }

    fn permute_channels(&mut self, x: &Var, perm: &[usize]) -> Result<Var> {
        let out = ops::permute_channels(self.value(*x), perm)?;
        let perm = perm.to_vec();
        Ok(self.push(
            "permute_channels",
            out,
            vec![x.0],
            Box::new(move |a| vec![Some(ops::permute_channels_backward(a.gout, &perm))]),
        ))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.value(*a).zip_map(self.value(*b), |x, y| x + y)?;
        Ok(self.push(
            "add",
            out,
            vec![a.0, b.0],
            Box::new(|a| vec![Some(a.gout.clone()), Some(a.gout.clone())]),
        ))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.value(*a).zip_map(self.value(*b), |x, y| x - y)?;
        Ok(self.push(
            "sub",
            out,
            vec![a.0, b.0],
            Box::new(|a| vec![Some(a.gout.clone()), Some(a.gout.map(|g| -g))]),
        ))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.value(*a).zip_map(self.value(*b), |x, y| x * y)?;
        Ok(self.push(
            "mul",
            out,
            vec![a.0, b.0],
            Box::new(|a| {
                let mul = |x: &Tensor<S>| a.gout.zip_map(x, |g, v| g * v).expect("mul grad");
                vec![
                    a.needs[0].then(|| mul(a.inputs[1])),
                    a.needs[1].then(|| mul(a.inputs[0])),
                ]
            }),
        ))
    }

    fn scale(&mut self, x: &Var, factor: S) -> Var {
        let out = self.value(*x).map(|v| v * factor);
        self.push(
            "scale",
            out,
            vec![x.0],
            Box::new(move |a| vec![Some(a.gout.map(|g| g * factor))]),
        )
    }

    fn sum_channels(&mut self, x: &Var) -> Var {
        let out = ops::sum_channels(self.value(*x));
        self.push(
            "sum_channels",
            out,
            vec![x.0],
            Box::new(|a| {
                let [n, c, _, _] = a.inputs[0].shape().0;
                let mut dx = Tensor::zeros(a.inputs[0].shape());
                for i in 0..n {
                    for ch in 0..c {
                        dx.plane_mut(i, ch).copy_from_slice(a.gout.plane(i, 0));
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    fn sum_all(&mut self, x: &Var) -> Var {
        let out = Tensor::scalar(self.value(*x).sum());
        self.push(
            "sum_all",
            out,
            vec![x.0],
            Box::new(|a| vec![Some(Tensor::full(a.inputs[0].shape(), a.gout.data()[0]))]),
        )
    }

    fn smooth_l1(&mut self, x: &Var) -> Var {
        let out = ops::smooth_l1(self.value(*x));
        self.push(
            "smooth_l1",
            out,
            vec![x.0],
            Box::new(|a| vec![Some(ops::smooth_l1_backward(a.inputs[0], a.gout))]),
        )
    }
}

/// Non-recording evaluator.
#[derive(Default)]
pub struct Eager {
    counts: BTreeMap<&'static str, usize>,
}

impl Eager {
    pub fn new() -> Self {
        Self::default()
    }

    fn count(&mut self, op: &'static str) {
        *self.counts.entry(op).or_default() += 1;
    }
}

impl<S: Scalar> Graph<S> for Eager {
    type Value = Rc<Tensor<S>>;

    fn constant(&mut self, t: Tensor<S>) -> Self::Value {
        Rc::new(t)
    }

    fn leaf(&mut self, t: Tensor<S>) -> Self::Value {
        Rc::new(t)
    }

    fn tensor<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<S> {
        v
    }

    fn op_count(&self, op: &str) -> usize {
        self.counts.get(op).copied().unwrap_or(0)
    }

    fn conv2d(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: Option<&Self::Value>,
        g: ConvGeometry,
    ) -> Result<Self::Value> {
        self.count("conv2d");
        Ok(Rc::new(ops::conv2d(x, w, b.map(|b| &**b), g)?))
    }

    fn batch_norm(
        &mut self,
        x: &Self::Value,
        gamma: &Self::Value,
        beta: &Self::Value,
        running_mean: &Tensor<S>,
        running_var: &Tensor<S>,
        cfg: BatchNormConfig,
    ) -> Result<(Self::Value, Option<RunningStats<S>>)> {
        self.count("batch_norm");
        let (out, cache) = ops::batch_norm(x, gamma, beta, running_mean, running_var, cfg)?;
        let stats = match (cache.running_mean, cache.running_var) {
            (Some(mean), Some(var)) => Some(RunningStats { mean, var }),
            _ => None,
        };
        Ok((Rc::new(out), stats))
    }

    fn relu(&mut self, x: &Self::Value) -> Self::Value {
        self.count("relu");
        Rc::new(ops::relu(x))
    }

    fn avg_pool(&mut self, x: &Self::Value, win: PoolWindow) -> Result<Self::Value> {
        self.count("avg_pool");
        Ok(Rc::new(ops::avg_pool(x, win)?))
    }

    fn bilinear_resize(&mut self, x: &Self::Value, h: usize, w: usize) -> Result<Self::Value> {
        self.count("bilinear_resize");
        Ok(Rc::new(ops::bilinear_resize(x, h, w)?))
    }

    fn softmax(&mut self, x: &Self::Value, axis: Axis) -> Result<Self::Value> {
        self.count("softmax");
        Ok(Rc::new(ops::softmax(x, axis)?))
    }

    fn log_softmax(&mut self, x: &Self::Value, axis: Axis) -> Result<Self::Value> {
        self.count("log_softmax");
        Ok(Rc::new(ops::log_softmax(x, axis)?))
    }

    fn concat(&mut self, xs: &[Self::Value], axis: Axis) -> Result<Self::Value> {
        self.count("concat");
        let inputs: Vec<&Tensor<S>> = xs.iter().map(|v| &**v).collect();
        Ok(Rc::new(ops::concat(&inputs, axis)?))
    }

    fn reshape(&mut self, x: &Self::Value, shape: Shape) -> Result<Self::Value> {
        self.count("reshape");
        Ok(Rc::new((**x).clone().reshape(shape)?))
    }

    fn shift_width(&mut self, x: &Self::Value, shift: usize) -> Result<Self::Value> {
        self.count("shift_width");
        Ok(Rc::new(ops::shift_width(x, shift)?))
    }

    fn permute_channels(&mut self, x: &Self::Value, perm: &[usize]) -> Result<Self::Value> {
        self.count("permute_channels");
        Ok(Rc::new(ops::permute_channels(x, perm)?))
    }

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.count("add");
        check_same(a.shape(), b.shape(), "add")?;
        Ok(Rc::new(a.zip_map(b, |x, y| x + y)?))
    }

    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.count("sub");
        Ok(Rc::new(a.zip_map(b, |x, y| x - y)?))
    }

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.count("mul");
        Ok(Rc::new(a.zip_map(b, |x, y| x * y)?))
    }

    fn scale(&mut self, x: &Self::Value, factor: S) -> Self::Value {
        self.count("scale");
        Rc::new(x.map(|v| v * factor))
    }

    fn sum_channels(&mut self, x: &Self::Value) -> Self::Value {
        self.count("sum_channels");
        Rc::new(ops::sum_channels(x))
    }

    fn sum_all(&mut self, x: &Self::Value) -> Self::Value {
        self.count("sum_all");
        Rc::new(Tensor::scalar(x.sum()))
    }

    fn smooth_l1(&mut self, x: &Self::Value) -> Self::Value {
        self.count("smooth_l1");
        Rc::new(ops::smooth_l1(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, 1, data.len()), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1.0, -2.0, 3.0]));
        let loss = tape.sum_all(&x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gives_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1.5, -2.0, 0.25]));
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1.0, 2.0]));
        let b = tape.leaf(t(&[5.0, -7.0]));
        let p = tape.mul(&a, &b).unwrap();
        let loss = tape.sum_all(&p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[5.0, -7.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[-1.0, 0.0, 2.0]));
        let y = tape.relu(&x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = tape.sum_all(&y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn elementwise_identities() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[0.3, -1.2]));
        let zero = tape.constant(t(&[0.0, 0.0]));
        let one = tape.constant(t(&[1.0, 1.0]));
        let s = tape.add(&a, &zero).unwrap();
        let m = tape.mul(&a, &one).unwrap();
        assert_eq!(tape.value(s), tape.value(a));
        assert_eq!(tape.value(m), tape.value(a));
        let bad = tape.constant(t(&[1.0]));
        assert!(matches!(tape.add(&a, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1.0]));
        let c = tape.constant(t(&[2.0]));
        let p = tape.mul(&a, &c).unwrap();
        let loss = tape.sum_all(&p);
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(a).unwrap().data(), &[2.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = sum(x + x) => grad 2
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4.0]));
        let y = tape.add(&x, &x).unwrap();
        let loss = tape.sum_all(&y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn tape_records_execution_order() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1.0]));
        let y = tape.relu(&x);
        let _ = tape.sum_all(&y);
        assert_eq!(tape.ops().collect::<Vec<_>>(), ["leaf", "relu", "sum_all"]);
        assert_eq!(tape.op_count("relu"), 1);
    }
}
