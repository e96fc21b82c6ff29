//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`GradTape`] records each primitive as it is evaluated; [`GradTape::backward`]
//! replays the record in exact reverse order, accumulating vector-Jacobian
//! products. Forward values are produced by the same [`Tensor`] kernels used
//! for plain evaluation, so recording never changes a result.
//!
//! Subgradient and projection choices:
//! - `relu` adjoint at exactly 0 is 0,
//! - `l1_norm` adjoint uses sign with sign(0) = 0,
//! - `clamp01` uses a straight-through adjoint: the gradient passes unchanged
//!   where the input lies in [0, 1] and is zeroed outside.

use crate::error::{Result, SimError};

use super::tensor::{Tensor, DENOM_FLOOR, LOG_FLOOR};

/// Index of a node on a [`GradTape`].
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    L1Norm(NodeId),
    L2Norm(NodeId),
    Dot(NodeId, NodeId),
    BroadcastMask { mask: NodeId, channels: usize },
    Clamp01(NodeId),
    Scale { x: NodeId, factor: f64 },
    AddScalar { x: NodeId },
    Reshape { x: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded operation sequence with designated differentiable leaves.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Per-leaf gradients produced by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `id`, zero-filled when no path reached it.
    pub fn wrt(&self, id: NodeId, tape: &GradTape) -> Tensor {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape().to_vec()),
        }
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor (differentiable leaf or constant).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Forward value at a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).div(self.value(b))?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).relu();
        self.push(v, Op::Relu(x))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).softmax()?;
        Ok(self.push(v, Op::Softmax(x)))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).log()?;
        Ok(self.push(v, Op::Log(x)))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).sum();
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).mean()?;
        Ok(self.push(v, Op::Mean(x)))
    }

    pub fn l1_norm(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).l1_norm();
        self.push(v, Op::L1Norm(x))
    }

    pub fn l2_norm(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).l2_norm();
        self.push(v, Op::L2Norm(x))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).dot(self.value(b))?;
        Ok(self.push(v, Op::Dot(a, b)))
    }

    pub fn broadcast_mask(&mut self, mask: NodeId, channels: usize) -> Result<NodeId> {
        let v = self.value(mask).broadcast_mask(channels)?;
        Ok(self.push(v, Op::BroadcastMask { mask, channels }))
    }

    pub fn clamp01(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clamp01();
        self.push(v, Op::Clamp01(x))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(x).scale(factor)?;
        Ok(self.push(v, Op::Scale { x, factor }))
    }

    pub fn add_scalar(&mut self, x: NodeId, offset: f64) -> Result<NodeId> {
        let v = self.value(x).add_scalar(offset)?;
        Ok(self.push(v, Op::AddScalar { x }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape { x }))
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len();
        self.reshape(x, vec![n])
    }

    /// Mean of several scalar nodes (batch-loss reduction).
    pub fn mean_of(&mut self, items: &[NodeId]) -> Result<NodeId> {
        if items.is_empty() {
            return Err(SimError::EmptyInput("mean_of"));
        }
        let mut acc = items[0];
        for &id in &items[1..] {
            acc = self.add(acc, id)?;
        }
        self.scale(acc, 1.0 / items.len() as f64)
    }

    /// Run the backward pass from a scalar output node.
    ///
    /// Operations are visited in exact reverse recording order; leaves with no
    /// path to `output` end up with zero gradient (see [`Gradients::wrt`]).
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(SimError::InvalidArgument {
                op: "backward",
                detail: format!("output must be scalar, shape is {:?}", self.value(output).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(Tensor::new(self.value(output).shape().to_vec(), vec![1.0])?);

        for id in (0..=output).rev() {
            let g = match grads[id].clone() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone())?;
                    self.accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone())?;
                    self.accumulate(&mut grads, *b, g.scale(-1.0)?)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(*b))?;
                    let gb = g.mul(self.value(*a))?;
                    self.accumulate(&mut grads, *a, ga)?;
                    self.accumulate(&mut grads, *b, gb)?;
                }
                Op::Div(a, b) => {
                    // d(a/b) = g/b for a, -g*a/b^2 for b
                    let ga = g.div(self.value(*b))?;
                    let gb = g
                        .mul(self.value(*a))?
                        .div(&self.value(*b).mul(self.value(*b))?)?
                        .scale(-1.0)?;
                    self.accumulate(&mut grads, *a, ga)?;
                    self.accumulate(&mut grads, *b, gb)?;
                }
                Op::MatMul(a, b) => {
                    let (ga, gb) = matmul_adjoint(self.value(*a), self.value(*b), &g)?;
                    self.accumulate(&mut grads, *a, ga)?;
                    self.accumulate(&mut grads, *b, gb)?;
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
                }
                Op::Softmax(x) => {
                    // dz = s .* (g - <g, s>)
                    let s = &self.nodes[id].value;
                    let inner: f64 = g.data().iter().zip(s.data()).map(|(&g, &s)| g * s).sum();
                    let data = s
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&s, &g)| s * (g - inner))
                        .collect();
                    self.accumulate(&mut grads, *x, Tensor::new(s.shape().to_vec(), data)?)?;
                }
                Op::Log(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &g)| if x >= LOG_FLOOR { g / x } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
                }
                Op::Sum(x) => {
                    let s = g.scalar_value()?;
                    let xv = self.value(*x);
                    self.accumulate(&mut grads, *x, Tensor::full(xv.shape().to_vec(), s))?;
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let s = g.scalar_value()? / xv.len() as f64;
                    self.accumulate(&mut grads, *x, Tensor::full(xv.shape().to_vec(), s))?;
                }
                Op::L1Norm(x) => {
                    let s = g.scalar_value()?;
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .map(|&x| {
                            if x > 0.0 {
                                s
                            } else if x < 0.0 {
                                -s
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
                }
                Op::L2Norm(x) => {
                    let s = g.scalar_value()?;
                    let norm = self.nodes[id].value.scalar_value()?.max(DENOM_FLOOR);
                    let xv = self.value(*x);
                    let data = xv.data().iter().map(|&x| s * x / norm).collect();
                    self.accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
                }
                Op::Dot(a, b) => {
                    let s = g.scalar_value()?;
                    let ga = self.value(*b).scale(s)?;
                    let gb = self.value(*a).scale(s)?;
                    self.accumulate(&mut grads, *a, ga)?;
                    self.accumulate(&mut grads, *b, gb)?;
                }
                Op::BroadcastMask { mask, channels } => {
                    // Sum the upstream gradient over the channel axis.
                    let mv = self.value(*mask);
                    let mut data = vec![0.0; mv.len()];
                    for (cell, chunk) in data.iter_mut().zip(g.data().chunks(*channels)) {
                        *cell = chunk.iter().sum();
                    }
                    self.accumulate(&mut grads, *mask, Tensor::new(mv.shape().to_vec(), data)?)?;
                }
                Op::Clamp01(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &g)| if (0.0..=1.0).contains(&x) { g } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
                }
                Op::Scale { x, factor } => {
                    self.accumulate(&mut grads, *x, g.scale(*factor)?)?;
                }
                Op::AddScalar { x } => {
                    self.accumulate(&mut grads, *x, g)?;
                }
                Op::Reshape { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(&mut grads, *x, g.reshaped(shape)?)?;
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
        match &mut grads[id] {
            Some(existing) => {
                *existing = existing.add(&g)?;
            }
            slot @ None => {
                *slot = Some(g);
            }
        }
        Ok(())
    }
}

fn matmul_adjoint(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    match (a.shape(), b.shape()) {
        // [m,k] x [k] -> [m]: dA = g (x) b, dB = A^T g
        ([m, k], [_]) => {
            let (m, k) = (*m, *k);
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for l in 0..k {
                    da[i * k + l] = g.data()[i] * b.data()[l];
                }
            }
            let mut db = vec![0.0; k];
            for i in 0..m {
                let gi = g.data()[i];
                for l in 0..k {
                    db[l] += a.data()[i * k + l] * gi;
                }
            }
            Ok((Tensor::new(vec![m, k], da)?, Tensor::new(vec![k], db)?))
        }
        // [m,k] x [k,n] -> [m,n]: dA = g B^T, dB = A^T g
        ([m, k], [_, n]) => {
            let (m, k, n) = (*m, *k, *n);
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for l in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += g.data()[i * n + j] * b.data()[l * n + j];
                    }
                    da[i * k + l] = acc;
                }
            }
            let mut db = vec![0.0; k * n];
            for l in 0..k {
                for j in 0..n {
                    let mut acc = 0.0;
                    for i in 0..m {
                        acc += a.data()[i * k + l] * g.data()[i * n + j];
                    }
                    db[l * n + j] = acc;
                }
            }
            Ok((Tensor::new(vec![m, k], da)?, Tensor::new(vec![k, n], db)?))
        }
        _ => Err(SimError::ShapeMismatch {
            op: "matmul_adjoint",
            detail: format!("{:?} x {:?}", a.shape(), b.shape()),
        }),
    }
}

/// Evaluate a scalar expression and differentiate it with respect to `leaves`.
///
/// The closure receives the tape and the leaf node ids (in the order of
/// `leaves`) and returns the output node. The result pairs the scalar output
/// value with one gradient per leaf, zero-filled for leaves the output does
/// not depend on.
pub fn evaluate_with_gradients<F>(leaves: &[Tensor], build: F) -> Result<(Tensor, Vec<Tensor>)>
where
    F: FnOnce(&mut GradTape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = GradTape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &ids)?;
    let grads = tape.backward(out)?;
    let per_leaf = ids.iter().map(|&id| grads.wrt(id, &tape)).collect();
    Ok((tape.value(out).clone(), per_leaf))
}

/// Central-difference gradient estimate, one coordinate at a time.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(SimError::InvalidArgument {
            op: "finite_difference_gradient",
            detail: format!("eps must be positive, got {}", eps),
        });
    }
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), grad)
}
