//! Reverse-mode tape over the kernels in [`super::ops`].

use super::ops::{self, BnCache, ConvGeometry};
use super::{Real, Shape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Conv {
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeometry,
    },
    BnTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: BnCache<T>,
    },
    BnInference {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        var: Vec<T>,
        epsilon: f64,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Resize(NodeId),
    Concat(Vec<NodeId>),
    Add(NodeId, NodeId),
    GlobalAvgPool(NodeId),
}

#[derive(Debug)]
struct Node<T: Real> {
    op: Op<T>,
    shape: Shape,
    value: Option<Tensor<T>>,
}

/// Records forward computations so gradients can be propagated back to leaves.
///
/// A graph built with [`Graph::inference`] does not support `backward`; its
/// intermediate values may be dropped early with [`Graph::release`].
#[derive(Debug)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op,
            shape: value.shape(),
            value: Some(value),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.nodes[id.0]
            .value
            .as_ref()
            .ok_or_else(|| Error::Shape(format!("value of node {} was released", id.0)))
    }

    /// Drops a stored value in inference graphs; a no-op when gradients are enabled.
    pub fn release(&mut self, id: NodeId) {
        if !self.grad_enabled && !matches!(self.nodes[id.0].op, Op::Leaf) {
            self.nodes[id.0].value = None;
        }
    }

    /// Drops every stored intermediate value except those in `keep`; a no-op when
    /// gradients are enabled.
    pub fn release_all_except(&mut self, keep: &[NodeId]) {
        if self.grad_enabled {
            return;
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !matches!(node.op, Op::Leaf) && !keep.contains(&NodeId(i)) {
                node.value = None;
            }
        }
    }

    /// Mean and biased variance of a train-mode batchnorm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<&BnCache<T>> {
        match &self.nodes[id.0].op {
            Op::BnTrain { cache, .. } => Some(cache),
            _ => None,
        }
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: Option<NodeId>, geom: ConvGeometry) -> Result<NodeId> {
        let b = match bias {
            Some(b) => Some(self.value(b)?.data()),
            None => None,
        };
        let y = ops::conv2d_forward(self.value(x)?, self.value(kernel)?, b, &geom)?;
        Ok(self.push(Op::Conv { x, kernel, bias, geom }, y))
    }

    pub fn batchnorm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, epsilon: f64) -> Result<NodeId> {
        let (y, cache) = ops::batchnorm_train_forward(
            self.value(x)?,
            self.value(gamma)?.data(),
            self.value(beta)?.data(),
            epsilon,
        )?;
        Ok(self.push(Op::BnTrain { x, gamma, beta, cache }, y))
    }

    pub fn batchnorm_inference(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[T],
        var: &[T],
        epsilon: f64,
    ) -> Result<NodeId> {
        let y = ops::batchnorm_inference_forward(
            self.value(x)?,
            self.value(gamma)?.data(),
            self.value(beta)?.data(),
            mean,
            var,
            epsilon,
        )?;
        let op = Op::BnInference {
            x,
            gamma,
            beta,
            mean: mean.to_vec(),
            var: var.to_vec(),
            epsilon,
        };
        Ok(self.push(op, y))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::relu(self.value(x)?);
        Ok(self.push(Op::Relu(x), y))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::sigmoid(self.value(x)?);
        Ok(self.push(Op::Sigmoid(x), y))
    }

    pub fn resize(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let y = ops::bilinear_resize(self.value(x)?, out_h, out_w)?;
        Ok(self.push(Op::Resize(x), y))
    }

    pub fn upsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if factor == 0 {
            return Err(Error::Shape("upsample factor must be >= 1".into()));
        }
        self.resize(x, s.h * factor, s.w * factor)
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let values = xs.iter().map(|&id| self.value(id)).collect::<Result<Vec<_>>>()?;
        let y = ops::concat_channels(&values)?;
        Ok(self.push(Op::Concat(xs.to_vec()), y))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::add(self.value(a)?, self.value(b)?)?;
        Ok(self.push(Op::Add(a, b), y))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::global_avg_pool(self.value(x)?);
        Ok(self.push(Op::GlobalAvgPool(x), y))
    }

    /// Propagates `seed` (the gradient of some scalar with respect to `output`)
    /// back through every node that `output` depends on.
    pub fn backward(&self, output: NodeId, seed: Tensor<T>) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::Shape("backward called on an inference graph".into()));
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::Shape(format!(
                "seed gradient {} does not match output {}",
                seed.shape(),
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { x, kernel, bias, geom } => {
                    let (gx, gk, gb) = ops::conv2d_backward(self.value(*x)?, self.value(*kernel)?, geom, &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *kernel, gk)?;
                    if let Some(b) = bias {
                        let shape = self.shape(*b);
                        accumulate(&mut grads, *b, Tensor::from_vec(shape, gb)?)?;
                    }
                }
                Op::BnTrain { x, gamma, beta, cache } => {
                    let gam = self.value(*gamma)?.data();
                    let (gx, gg, gb) = ops::batchnorm_train_backward(self.value(*x)?, gam, cache, &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *gamma, Tensor::from_vec(self.shape(*gamma), gg)?)?;
                    accumulate(&mut grads, *beta, Tensor::from_vec(self.shape(*beta), gb)?)?;
                }
                Op::BnInference {
                    x,
                    gamma,
                    beta,
                    mean,
                    var,
                    epsilon,
                } => {
                    let gam = self.value(*gamma)?.data();
                    let (gx, gg, gb) =
                        ops::batchnorm_inference_backward(self.value(*x)?, gam, mean, var, *epsilon, &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *gamma, Tensor::from_vec(self.shape(*gamma), gg)?)?;
                    accumulate(&mut grads, *beta, Tensor::from_vec(self.shape(*beta), gb)?)?;
                }
                Op::Relu(x) => {
                    let gx = ops::relu_backward(self.value(*x)?, &g);
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Sigmoid(x) => {
                    let y = node.value.as_ref().expect("grad graphs keep values");
                    accumulate(&mut grads, *x, ops::sigmoid_backward(y, &g))?;
                }
                Op::Resize(x) => {
                    let gx = ops::bilinear_resize_backward(self.shape(*x), &g);
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Concat(xs) => {
                    let sizes: Vec<usize> = xs.iter().map(|&id| self.shape(id).c).collect();
                    for (&id, part) in xs.iter().zip(ops::split_channels(&g, &sizes)?) {
                        accumulate(&mut grads, id, part)?;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::GlobalAvgPool(x) => {
                    let gx = ops::global_avg_pool_backward(self.shape(*x), &g);
                    accumulate(&mut grads, *x, gx)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Gradients of the leaves reached by a backward pass.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}
