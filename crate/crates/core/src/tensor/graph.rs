//! Reverse-mode differentiation over a per-step computation graph.
//!
//! Nodes are appended in creation order, so reverse index order is a valid
//! reverse topological order. `backward` propagates through scratch buffers
//! and only then adds into the stored gradients, which makes repeated
//! backward calls accumulate exactly.

use super::kernels::{self, ConvGeometry};
use super::Array;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

type Vjp = Box<dyn Fn(&Array) -> Array>;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        geometry: ConvGeometry,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    Relu(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Upsample(NodeId),
    Custom { input: NodeId, vjp: Vjp },
}

struct Node {
    value: Array,
    grad: Option<Array>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.node(id).value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Array> {
        self.node(id).grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.node(id).requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// Cross-correlation of a C_in×H×W input with C_out×C_in×k×k kernels plus bias.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let geometry =
            ConvGeometry::new(self.value(input).shape(), self.value(kernels).shape(), stride, padding)?;
        if self.value(bias).len() != geometry.c_out {
            return Err(Error::Shape(format!(
                "conv2d bias has {} entries for {} output channels",
                self.value(bias).len(),
                geometry.c_out
            )));
        }
        let out = kernels::conv2d_forward(
            &geometry,
            self.value(input).data(),
            self.value(kernels).data(),
            self.value(bias).data(),
        );
        let v = Array::new(geometry.output_shape(), out)?;
        let rg = self.needs(&[input, kernels, bias]);
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernels,
                bias,
                geometry,
            },
            rg,
        ))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Array> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Array::new(va.shape().to_vec(), data)
        } else if vb.is_scalar() {
            let s = vb.item();
            Ok(va.map(|x| f(x, s)))
        } else if va.is_scalar() {
            let s = va.item();
            Ok(vb.map(|y| f(s, y)))
        } else {
            Err(Error::Shape(format!(
                "{name}: incompatible shapes {:?} and {:?}",
                va.shape(),
                vb.shape()
            )))
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Division; a zero anywhere in the divisor is a domain error.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Div(a, b), rg))
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scaled(c);
        let rg = self.needs(&[a]);
        self.push(v, Op::ScalarMul(a, c), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.needs(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let v = self.value(a).map(f64::ln);
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::Log(a), rg))
    }

    /// Square root. The backward rule uses a zero subgradient at 0.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x < 0.0 || x.is_nan()) {
            return Err(Error::Domain(format!("sqrt of negative value {bad}")));
        }
        let v = self.value(a).map(f64::sqrt);
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::Sqrt(a), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Array::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = Array::scalar(x.sum() / x.len() as f64);
        let rg = self.needs(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Bilinear resize of a C×H×W map (half-pixel centers, edge clamped).
    pub fn bilinear_upsample(&mut self, a: NodeId, height: usize, width: usize) -> Result<NodeId> {
        let x = self.value(a);
        if x.shape().len() != 3 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "bilinear_upsample expects C×H×W input, got {:?}",
                x.shape()
            )));
        }
        let v = kernels::upsample_forward(x, height, width);
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::Upsample(a), rg))
    }

    /// Node with a caller-supplied value and vector-Jacobian product.
    ///
    /// `vjp` maps the gradient w.r.t. this node's value to the gradient
    /// w.r.t. `input`'s value.
    pub fn custom(
        &mut self,
        input: NodeId,
        value: Array,
        vjp: impl Fn(&Array) -> Array + 'static,
    ) -> NodeId {
        let rg = self.needs(&[input]);
        self.push(
            value,
            Op::Custom {
                input,
                vjp: Box::new(vjp),
            },
            rg,
        )
    }

    /// Populate gradients of every `requires_grad` ancestor of the scalar `root`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let n = root.0 + 1;
        let mut scratch: Vec<Option<Array>> = (0..n).map(|_| None).collect();
        scratch[root.0] = Some(Array::filled(self.value(root).shape(), 1.0));

        for i in (0..n).rev() {
            let Some(g) = scratch[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut scratch)?;
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Array, scratch: &mut [Option<Array>]) -> Result<()> {
        let mut send = |id: NodeId, contrib: Array| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut scratch[id.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |id: NodeId| &self.nodes[id.0].value;

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    send(*a, g.matmul(&val(*b).transpose()?)?);
                }
                if self.nodes[b.0].requires_grad {
                    send(*b, val(*a).transpose()?.matmul(g)?);
                }
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                geometry,
            } => {
                let (gi, gk, gb) = kernels::conv2d_backward(
                    geometry,
                    val(*input).data(),
                    val(*kernels).data(),
                    g.data(),
                );
                send(*input, Array::new(val(*input).shape().to_vec(), gi)?);
                send(*kernels, Array::new(val(*kernels).shape().to_vec(), gk)?);
                send(*bias, Array::new(val(*bias).shape().to_vec(), gb)?);
            }
            Op::Add(a, b) => {
                send(*a, reduce_to(g.clone(), val(*a)));
                send(*b, reduce_to(g.clone(), val(*b)));
            }
            Op::Sub(a, b) => {
                send(*a, reduce_to(g.clone(), val(*a)));
                send(*b, reduce_to(g.scaled(-1.0), val(*b)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, reduce_to(zip_broadcast(g, vb, |gv, y| gv * y), va));
                send(*b, reduce_to(zip_broadcast(g, va, |gv, x| gv * x), vb));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, reduce_to(zip_broadcast(g, vb, |gv, y| gv / y), va));
                // d(a/b)/db = -a/b² = -out/b
                let out = &self.nodes[i].value;
                let t = zip_broadcast(g, out, |gv, o| gv * o);
                send(*b, reduce_to(zip_broadcast(&t, vb, |tv, y| -tv / y), vb));
            }
            Op::ScalarMul(a, c) => send(*a, g.scaled(*c)),
            Op::Relu(a) => {
                let x = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                send(*a, Array::new(x.shape().to_vec(), data)?);
            }
            Op::Log(a) => {
                let x = val(*a);
                let data = g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv / xv).collect();
                send(*a, Array::new(x.shape().to_vec(), data)?);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| if yv > 0.0 { 0.5 * gv / yv } else { 0.0 })
                    .collect();
                send(*a, Array::new(y.shape().to_vec(), data)?);
            }
            Op::Sum(a) => send(*a, Array::filled(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let x = val(*a);
                send(*a, Array::filled(x.shape(), g.item() / x.len() as f64));
            }
            Op::Reshape(a) => send(*a, g.clone().reshape(val(*a).shape())?),
            Op::Upsample(a) => send(*a, kernels::upsample_backward(val(*a).shape(), g)),
            Op::Custom { input, vjp } => {
                let gi = vjp(g);
                if gi.len() != val(*input).len() {
                    return Err(Error::Shape(format!(
                        "custom vjp returned {} values for an input of {}",
                        gi.len(),
                        val(*input).len()
                    )));
                }
                send(*input, gi.reshape(val(*input).shape())?);
            }
        }
        Ok(())
    }
}

/// Elementwise `f(g, x)` where `x` may be a scalar broadcast over `g`.
fn zip_broadcast(g: &Array, x: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    if x.len() == g.len() {
        let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
        Array::new(g.shape().to_vec(), data).expect("same length")
    } else if x.is_scalar() {
        let s = x.item();
        g.map(|a| f(a, s))
    } else {
        // g is the scalar side: broadcast it over x's shape
        let s = g.item();
        x.map(|b| f(s, b))
    }
}

/// Sum a broadcast gradient back down to `target`'s shape.
fn reduce_to(g: Array, target: &Array) -> Array {
    if g.len() == target.len() {
        g.reshape(target.shape()).expect("same length")
    } else {
        Array::new(target.shape().to_vec(), vec![g.sum()]).expect("scalar target")
    }
}
