//! Recorded forward computations and their exact reverse-mode gradients.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::grid::RealChannelStack;
use crate::scalar::Real;

use super::layer::{conv2d_same, conv2d_same_input_grad, conv2d_same_weight_grad, relu, ConvLayer};

/// Trainable parameters: convolution layers plus free scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub layers: Vec<ConvLayer<T>>,
    pub scalars: Vec<T>,
}

impl<T: Real> ParamSet<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer::zeros(l.in_channels(), l.out_channels(), l.support().clone()))
                .collect(),
            scalars: vec![T::zero(); self.scalars.len()],
        }
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.layers.iter().map(ConvLayer::num_weights).sum::<usize>() + self.scalars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All parameters in a fixed order: each layer's packed weights, then
    /// the scalars.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.len());
        for l in &self.layers {
            out.extend_from_slice(l.raw());
        }
        out.extend_from_slice(&self.scalars);
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Dimension(format!(
                "parameter vector has {} entries, expected {}",
                flat.len(),
                self.len()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.num_weights();
            l.raw_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        self.scalars.copy_from_slice(&flat[at..]);
        Ok(())
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.scalars.len() == other.scalars.len()
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_layout(b))
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.raw().iter().all(|v| v.is_finite()))
            && self.scalars.iter().all(|v| v.is_finite())
    }

    /// `self += other` (same layout).
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.raw_mut().iter_mut().zip(b.raw()) {
                *x += y;
            }
        }
        for (x, &y) in self.scalars.iter_mut().zip(&other.scalars) {
            *x += y;
        }
    }

    pub fn scale(&mut self, factor: T) {
        for l in &mut self.layers {
            for x in l.raw_mut() {
                *x *= factor;
            }
        }
        for x in &mut self.scalars {
            *x *= factor;
        }
    }
}

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Input,
    Conv { x: NodeId, layer: usize },
    Relu { x: NodeId },
    /// `a - s * b` with `s` a parameter scalar.
    SubScaled { a: NodeId, b: NodeId, scalar: usize },
    Add { a: NodeId, b: NodeId },
    /// `reference` where `mask` is set, `x` elsewhere.
    DataConsistency { x: NodeId, reference: NodeId, mask: Rc<[bool]> },
    /// One output channel: channel `labels[k]` of `x` at pixel `k`, zero
    /// where the label is negative.
    Select { x: NodeId, labels: Rc<[i32]> },
}

struct Node<T> {
    op: Op,
    value: RealChannelStack<T>,
}

/// Eagerly evaluated computation whose trace is kept for [`Graph::backward`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients returned by [`Graph::backward`].
pub struct Gradients<T> {
    pub params: ParamSet<T>,
    nodes: Vec<Option<RealChannelStack<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a node (zero-shaped `None` if unreachable).
    pub fn node(&self, id: NodeId) -> Option<&RealChannelStack<T>> {
        self.nodes[id].as_ref()
    }
}

fn check_same<T: Real>(a: &RealChannelStack<T>, b: &RealChannelStack<T>, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: RealChannelStack<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &RealChannelStack<T> {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: RealChannelStack<T>) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn conv(&mut self, params: &ParamSet<T>, x: NodeId, layer: usize) -> Result<NodeId> {
        let l = params
            .layers
            .get(layer)
            .ok_or_else(|| Error::InvalidParameter(format!("no layer {layer}")))?;
        let value = conv2d_same(self.value(x), l)?;
        Ok(self.push(Op::Conv { x, layer }, value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = relu(self.value(x));
        self.push(Op::Relu { x }, value)
    }

    pub fn sub_scaled(&mut self, params: &ParamSet<T>, a: NodeId, b: NodeId, scalar: usize) -> Result<NodeId> {
        check_same(self.value(a), self.value(b), "scaled difference")?;
        let s = *params
            .scalars
            .get(scalar)
            .ok_or_else(|| Error::InvalidParameter(format!("no scalar {scalar}")))?;
        let mut value = self.value(a).clone();
        for (v, &w) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *v -= s * w;
        }
        Ok(self.push(Op::SubScaled { a, b, scalar }, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same(self.value(a), self.value(b), "sum")?;
        let mut value = self.value(a).clone();
        for (v, &w) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *v += w;
        }
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn data_consistency(&mut self, x: NodeId, reference: NodeId, mask: Rc<[bool]>) -> Result<NodeId> {
        check_same(self.value(x), self.value(reference), "data consistency")?;
        if mask.len() != self.value(x).data().len() {
            return Err(Error::Dimension("consistency mask size".into()));
        }
        let mut value = self.value(x).clone();
        for ((v, &r), &m) in value.data_mut().iter_mut().zip(self.value(reference).data()).zip(mask.iter()) {
            if m {
                *v = r;
            }
        }
        Ok(self.push(Op::DataConsistency { x, reference, mask }, value))
    }

    pub fn select(&mut self, x: NodeId, labels: Rc<[i32]>) -> Result<NodeId> {
        let (n1, n2, nc) = self.value(x).dims();
        if labels.len() != n1 * n2 || labels.iter().any(|&l| l >= nc as i32) {
            return Err(Error::Dimension("selection labels do not match the input".into()));
        }
        let src = self.value(x);
        let data = labels
            .iter()
            .enumerate()
            .map(|(k, &l)| if l >= 0 { src.data()[k * nc + l as usize] } else { T::zero() })
            .collect();
        let value = RealChannelStack::from_vec(n1, n2, 1, data)?;
        Ok(self.push(Op::Select { x, labels }, value))
    }

    /// Reverse-mode sweep from `output` seeded with `upstream`.
    pub fn backward(&self, params: &ParamSet<T>, output: NodeId, upstream: &RealChannelStack<T>) -> Result<Gradients<T>> {
        if output >= self.nodes.len() {
            return Err(Error::InvalidParameter(format!("no node {output}")));
        }
        check_same(self.value(output), upstream, "upstream gradient")?;
        let mut pg = params.zeros_like();
        let mut grads: Vec<Option<RealChannelStack<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(upstream.clone());

        fn acc<T: Real>(grads: &mut [Option<RealChannelStack<T>>], id: NodeId, g: RealChannelStack<T>) {
            match &mut grads[id] {
                Some(existing) => {
                    for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=output).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Input) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            match &node.op {
                Op::Input => unreachable!(),
                Op::Conv { x, layer } => {
                    let l = &params.layers[*layer];
                    conv2d_same_weight_grad(self.value(*x), &g, l, pg.layers[*layer].raw_mut());
                    acc(&mut grads, *x, conv2d_same_input_grad(&g, l));
                }
                Op::Relu { x } => {
                    let mut gx = g.clone();
                    for (v, &xv) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if xv <= T::zero() {
                            *v = T::zero();
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SubScaled { a, b, scalar } => {
                    let s = params.scalars[*scalar];
                    let bv = self.value(*b);
                    let mut ds = T::zero();
                    for (&gv, &b) in g.data().iter().zip(bv.data()) {
                        ds += gv * b;
                    }
                    pg.scalars[*scalar] -= ds;
                    let gb = g.map(|v| -s * v);
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *b, gb);
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::DataConsistency { x, reference, mask } => {
                    let mut gx = g.clone();
                    let mut gr = g;
                    for ((u, v), &m) in gx.data_mut().iter_mut().zip(gr.data_mut().iter_mut()).zip(mask.iter()) {
                        if m {
                            *u = T::zero();
                        } else {
                            *v = T::zero();
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *reference, gr);
                }
                Op::Select { x, labels } => {
                    let (n1, n2, nc) = self.value(*x).dims();
                    let mut gx = RealChannelStack::zeros(n1, n2, nc);
                    for (k, (&l, &gv)) in labels.iter().zip(g.data()).enumerate() {
                        if l >= 0 {
                            gx.data_mut()[k * nc + l as usize] = gv;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
            }
            // keep gradients of inputs only
            grads[id] = None;
        }
        Ok(Gradients { params: pg, nodes: grads })
    }
}

/// Mean squared error over the selected entries (all when `select` is
/// `None`) and its gradient with respect to `pred`.
pub fn mse_loss<T: Real>(
    pred: &RealChannelStack<T>,
    target: &RealChannelStack<T>,
    select: Option<&[bool]>,
) -> Result<(T, RealChannelStack<T>)> {
    check_same(pred, target, "loss")?;
    if let Some(s) = select {
        if s.len() != pred.data().len() {
            return Err(Error::Dimension("loss selection size".into()));
        }
    }
    let chosen = |i: usize| select.map_or(true, |s| s[i]);
    let count = (0..pred.data().len()).filter(|&i| chosen(i)).count();
    if count == 0 {
        return Err(Error::InvalidParameter("loss over an empty selection".into()));
    }
    let inv = T::one() / T::from_count(count);
    let mut loss = T::zero();
    let mut grad = RealChannelStack::zeros(pred.n1(), pred.n2(), pred.channels());
    for (i, ((&p, &t), g)) in pred.data().iter().zip(target.data()).zip(grad.data_mut()).enumerate() {
        if chosen(i) {
            let r = p - t;
            loss += r * r;
            *g = T::lit(2.0) * r * inv;
        }
    }
    Ok((loss * inv, grad))
}
