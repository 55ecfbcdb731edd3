//! Reverse-mode differentiation over a small static graph.
//!
//! A [`Graph`] is built once per loss evaluation: leaves are constant inputs
//! or trainable parameters, interior nodes are the handful of operations a
//! softmax classifier needs. Node ids are handed out in creation order, which
//! is also a valid topological order, so forward and backward are single
//! sweeps over the node list.
//!
//! The loss head is a per-example softmax cross-entropy followed by a scaled
//! sum. The caller picks the scale: dividing by the whole dataset size gives
//! the per-class losses that sum to the full loss, dividing by the batch size
//! gives the usual batch mean.

use crate::error::{dim, domain, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    BiasAdd(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Mul(NodeId, NodeId),
    SoftmaxCe { logits: NodeId, labels: Vec<usize> },
    SumScaled { input: NodeId, scale: f64 },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
    /// Softmax probabilities cached by the cross-entropy head.
    probs: Vec<Option<Tensor>>,
    params: Vec<NodeId>,
    evaluated: bool,
    empty_subset: bool,
}

/// Gradients of the graph output, one tensor per parameter in creation order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientRecord {
    pub grads: Vec<Tensor>,
}

impl GradientRecord {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grads.iter().map(Tensor::len).sum());
        for g in &self.grads {
            out.extend_from_slice(g.data());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub coordinates_checked: usize,
    /// Flat coordinate with the largest error.
    pub worst_coordinate: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, requires_grad: bool, value: Option<Tensor>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape,
            requires_grad,
        });
        self.values.push(value);
        self.probs.push(None);
        self.evaluated = false;
        id
    }

    fn shape(&self, id: NodeId) -> Result<&[usize]> {
        self.nodes
            .get(id.0)
            .map(|n| n.shape.as_slice())
            .ok_or_else(|| Error::State(format!("unknown node {}", id.0)))
    }

    fn grad_flag(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Input, shape, false, Some(value))
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        let id = self.push(Op::Param, shape, true, Some(value));
        self.params.push(id);
        id
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a)?.to_vec(), self.shape(b)?.to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim(format!("matmul {sa:?} by {sb:?}"));
        }
        let rg = self.grad_flag(a) || self.grad_flag(b);
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]], rg, None))
    }

    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x)?.to_vec(), self.shape(b)?.to_vec());
        if sx.len() != 2 || sb != [sx[1]] {
            return dim(format!("bias {sb:?} does not fit {sx:?}"));
        }
        let rg = self.grad_flag(x) || self.grad_flag(b);
        Ok(self.push(Op::BiasAdd(x, b), sx, rg, None))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x)?.to_vec();
        let rg = self.grad_flag(x);
        Ok(self.push(Op::Relu(x), s, rg, None))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x)?.to_vec();
        let rg = self.grad_flag(x);
        Ok(self.push(Op::Tanh(x), s, rg, None))
    }

    /// Elementwise product of two same-shape nodes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a)?.to_vec(), self.shape(b)?.to_vec());
        if sa != sb {
            return dim(format!("elementwise product of {sa:?} and {sb:?}"));
        }
        let rg = self.grad_flag(a) || self.grad_flag(b);
        Ok(self.push(Op::Mul(a, b), sa, rg, None))
    }

    /// Per-example cross-entropy of softmax(logits) against `labels`.
    pub fn softmax_ce(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let s = self.shape(logits)?.to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return dim(format!("{} labels for logits {s:?}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
            return domain(format!("label {bad} out of range for {} classes", s[1]));
        }
        let rg = self.grad_flag(logits);
        Ok(self.push(Op::SoftmaxCe { logits, labels }, vec![s[0]], rg, None))
    }

    /// `scale * sum(input)` as a scalar.
    pub fn sum_scaled(&mut self, input: NodeId, scale: f64) -> Result<NodeId> {
        if !scale.is_finite() {
            return domain("sum scale must be finite");
        }
        self.shape(input)?;
        let rg = self.grad_flag(input);
        Ok(self.push(Op::SumScaled { input, scale }, vec![], rg, None))
    }

    /// Sum over the examples present divided by `normalizer`.
    ///
    /// The normalizer is supplied by the caller and is not the number of rows:
    /// a class subset divided by the full dataset size is the class's share of
    /// the full loss.
    pub fn mean_over_subset(&mut self, per_example: NodeId, normalizer: f64) -> Result<NodeId> {
        if !(normalizer > 0.0) || !normalizer.is_finite() {
            return domain(format!("normalizer must be positive, got {normalizer}"));
        }
        self.sum_scaled(per_example, 1.0 / normalizer)
    }

    pub fn set_param(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = self
            .nodes
            .get(id.0)
            .ok_or_else(|| Error::State(format!("unknown node {}", id.0)))?;
        if !matches!(node.op, Op::Param) {
            return Err(Error::State(format!("node {} is not a parameter", id.0)));
        }
        if node.shape != value.shape() {
            return dim(format!("parameter {:?} replaced by {:?}", node.shape, value.shape()));
        }
        self.values[id.0] = Some(value);
        self.evaluated = false;
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    /// True when the last forward pass summed over zero examples.
    pub fn empty_subset(&self) -> bool {
        self.empty_subset
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_ref().expect("operand evaluated before use")
    }

    /// Evaluates every node; the last node must be a scalar.
    pub fn forward(&mut self) -> Result<f64> {
        let Some(last) = self.nodes.len().checked_sub(1) else {
            return Err(Error::State("forward on an empty graph".into()));
        };
        if !self.nodes[last].shape.is_empty() {
            return Err(Error::State("graph output is not a scalar".into()));
        }
        self.empty_subset = false;
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            let v = match op {
                Op::Input | Op::Param => continue,
                Op::MatMul(a, b) => self.val(a).matmul(self.val(b))?,
                Op::BiasAdd(x, b) => {
                    let mut out = self.val(x).clone();
                    let bias = self.val(b).data().to_vec();
                    let k = bias.len();
                    for row in out.data_mut().chunks_mut(k) {
                        for (o, bj) in row.iter_mut().zip(&bias) {
                            *o += bj;
                        }
                    }
                    out
                }
                Op::Relu(x) => {
                    let src = self.val(x);
                    let d = src.data().iter().map(|v| v.max(0.0)).collect();
                    Tensor::from_raw(src.shape().to_vec(), d)
                }
                Op::Tanh(x) => {
                    let src = self.val(x);
                    let d = src.data().iter().map(|v| v.tanh()).collect();
                    Tensor::from_raw(src.shape().to_vec(), d)
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.val(a), self.val(b));
                    let d = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    Tensor::from_raw(ta.shape().to_vec(), d)
                }
                Op::SoftmaxCe { logits, ref labels } => {
                    let (losses, probs) = softmax_ce_forward(self.val(logits), labels);
                    if labels.is_empty() {
                        self.empty_subset = true;
                    }
                    self.probs[i] = Some(probs);
                    losses
                }
                Op::SumScaled { input, scale } => {
                    let s: f64 = self.val(input).data().iter().sum();
                    Tensor::from_raw(vec![], vec![scale * s])
                }
            };
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("forward value of node {i}")));
            }
            self.values[i] = Some(v);
        }
        self.evaluated = true;
        Ok(self.val(NodeId(last)).data()[0])
    }

    /// Gradients of the scalar output with respect to every parameter.
    pub fn backward(&self) -> Result<GradientRecord> {
        if !self.evaluated {
            return Err(Error::State("backward called before forward".into()));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Tensor>> = vec![None; n];
        adj[n - 1] = Some(Tensor::from_raw(vec![], vec![1.0]));

        fn acc(slot: &mut Option<Tensor>, g: Tensor) {
            match slot {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => *slot = Some(g),
            }
        }

        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param => {
                    adj[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.grad_flag(*a) {
                        acc(&mut adj[a.0], g.matmul_nt(self.val(*b))?);
                    }
                    if self.grad_flag(*b) {
                        acc(&mut adj[b.0], self.val(*a).matmul_tn(&g)?);
                    }
                }
                Op::BiasAdd(x, b) => {
                    if self.grad_flag(*b) {
                        let k = self.nodes[b.0].shape[0];
                        let mut gb = vec![0.0; k];
                        for row in g.data().chunks(k) {
                            for (s, v) in gb.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                        acc(&mut adj[b.0], Tensor::from_raw(vec![k], gb));
                    }
                    if self.grad_flag(*x) {
                        acc(&mut adj[x.0], g);
                    }
                }
                Op::Relu(x) => {
                    let src = self.val(*x);
                    let d = g
                        .data()
                        .iter()
                        .zip(src.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    acc(&mut adj[x.0], Tensor::from_raw(g.shape().to_vec(), d));
                }
                Op::Tanh(x) => {
                    let out = self.values[i].as_ref().expect("evaluated");
                    let d = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect();
                    acc(&mut adj[x.0], Tensor::from_raw(g.shape().to_vec(), d));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.val(*a), self.val(*b));
                    if self.grad_flag(*a) {
                        let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                        acc(&mut adj[a.0], Tensor::from_raw(g.shape().to_vec(), d));
                    }
                    if self.grad_flag(*b) {
                        let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                        acc(&mut adj[b.0], Tensor::from_raw(g.shape().to_vec(), d));
                    }
                }
                Op::SoftmaxCe { logits, labels } => {
                    let p = self.probs[i].as_ref().expect("evaluated");
                    let k = p.cols();
                    let mut d = p.data().to_vec();
                    for (r, &y) in labels.iter().enumerate() {
                        let gi = g.data()[r];
                        let row = &mut d[r * k..(r + 1) * k];
                        row[y] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= gi;
                        }
                    }
                    acc(&mut adj[logits.0], Tensor::from_raw(vec![labels.len(), k], d));
                }
                Op::SumScaled { input, scale } => {
                    let s = self.nodes[input.0].shape.clone();
                    let len = s.iter().product();
                    let gv = g.data()[0] * scale;
                    acc(&mut adj[input.0], Tensor::from_raw(s, vec![gv; len]));
                }
            }
        }

        let grads = self
            .params
            .iter()
            .map(|p| {
                adj[p.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[p.0].shape.clone()))
            })
            .collect();
        Ok(GradientRecord { grads })
    }

    /// Compares backward gradients with central differences.
    ///
    /// Checks at least 50 parameter coordinates (all of them when there are
    /// fewer), chosen without replacement from `rng`. The error per coordinate
    /// is `|fd - g| / (|g| + 1e-8)`.
    pub fn finite_difference_check(&mut self, h: f64, samples: usize, rng: &mut SeededRng) -> Result<FdReport> {
        if !(1e-8..=1e-3).contains(&h) {
            return domain(format!("finite-difference step {h} outside [1e-8, 1e-3]"));
        }
        self.forward()?;
        let analytic = self.backward()?.flatten();
        let total = analytic.len();
        let picks = rng.sample_indices(total, samples.max(50));

        // Map a flat coordinate back to (parameter, offset).
        let sizes: Vec<usize> = self.params.iter().map(|p| self.val(*p).len()).collect();
        let locate = |mut c: usize| {
            for (pi, &s) in sizes.iter().enumerate() {
                if c < s {
                    return (pi, c);
                }
                c -= s;
            }
            unreachable!("coordinate in range")
        };

        let mut report = FdReport {
            max_rel_error: 0.0,
            coordinates_checked: picks.len(),
            worst_coordinate: 0,
        };
        for &c in &picks {
            let (pi, off) = locate(c);
            let id = self.params[pi];
            let base = self.val(id).clone();
            let eval_at = |delta: f64, g: &mut Graph| -> Result<f64> {
                let mut t = base.clone();
                t.data_mut()[off] += delta;
                g.set_param(id, t)?;
                g.forward()
            };
            let fp = eval_at(h, self)?;
            let fm = eval_at(-h, self)?;
            self.set_param(id, base)?;
            let fd = (fp - fm) / (2.0 * h);
            let g = analytic[c];
            let err = (fd - g).abs() / (g.abs() + 1e-8);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_coordinate = c;
            }
        }
        self.forward()?;
        Ok(report)
    }
}

/// Per-example losses and softmax probabilities, via a stable log-sum-exp.
fn softmax_ce_forward(z: &Tensor, labels: &[usize]) -> (Tensor, Tensor) {
    let k = z.cols();
    let n = labels.len();
    let mut losses = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n * k);
    for (i, &y) in labels.iter().enumerate() {
        let row = z.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + s.ln();
        losses.push(lse - row[y]);
        probs.extend(row.iter().map(|v| (v - lse).exp()));
    }
    (Tensor::from_raw(vec![n], losses), Tensor::from_raw(vec![n, k], probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        g.sum_scaled(sq, 1.0).unwrap();
        assert_eq!(g.forward().unwrap(), 9.0);
        let rec = g.backward().unwrap();
        assert_eq!(rec.flatten(), vec![6.0]);
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0]).unwrap());
        g.sum_scaled(x, 1.0).unwrap();
        assert!(matches!(g.backward(), Err(Error::State(_))));
    }

    #[test]
    fn set_param_invalidates_forward() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0]).unwrap());
        g.sum_scaled(x, 2.0).unwrap();
        g.forward().unwrap();
        g.set_param(x, Tensor::vector(vec![2.0]).unwrap()).unwrap();
        assert!(g.backward().is_err());
        assert_eq!(g.forward().unwrap(), 4.0);
    }

    #[test]
    fn relu_subgradient_is_zero_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0, 1.0, -1.0]).unwrap());
        let r = g.relu(x).unwrap();
        g.sum_scaled(r, 1.0).unwrap();
        g.forward().unwrap();
        assert_eq!(g.backward().unwrap().flatten(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn empty_subset_gives_zero_and_flag() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(0, 3, vec![]).unwrap());
        let w = g.param(Tensor::matrix(3, 2, vec![0.1; 6]).unwrap());
        let z = g.matmul(x, w).unwrap();
        let ce = g.softmax_ce(z, vec![]).unwrap();
        g.mean_over_subset(ce, 10.0).unwrap();
        assert_eq!(g.forward().unwrap(), 0.0);
        assert!(g.empty_subset());
        assert!(g.backward().unwrap().flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn softmax_ce_two_class_value() {
        // logits (0, ln 3) for label 1: p = 3/4, loss = ln(4/3).
        let mut g = Graph::new();
        let z = g.param(Tensor::matrix(1, 2, vec![0.0, 3f64.ln()]).unwrap());
        let ce = g.softmax_ce(z, vec![1]).unwrap();
        g.sum_scaled(ce, 1.0).unwrap();
        let v = g.forward().unwrap();
        assert!((v - (4.0f64 / 3.0).ln()).abs() < 1e-15);
        let gr = g.backward().unwrap().flatten();
        assert!((gr[0] - 0.25).abs() < 1e-15 && (gr[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_at_construction() {
        let mut g = Graph::new();
        let a = g.input(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.param(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
        let bias = g.param(Tensor::vector(vec![0.0; 2]).unwrap());
        assert!(g.bias_add(a, bias).is_err());
        assert!(g.softmax_ce(a, vec![0]).is_err());
        assert!(g.softmax_ce(a, vec![0, 3]).is_err());
        assert!(g.mean_over_subset(a, 0.0).is_err());
    }

    #[test]
    fn fd_step_domain() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0]).unwrap());
        g.sum_scaled(x, 1.0).unwrap();
        let mut r = SeededRng::new(0, Stream::Other(1));
        assert!(g.finite_difference_check(1e-2, 50, &mut r).is_err());
        assert!(g.finite_difference_check(1e-9, 50, &mut r).is_err());
        let rep = g.finite_difference_check(1e-5, 50, &mut r).unwrap();
        assert_eq!(rep.coordinates_checked, 1);
        assert!(rep.max_rel_error < 1e-9);
    }

    #[test]
    fn tanh_chain_matches_finite_differences() {
        let mut r = SeededRng::new(4, Stream::Other(2));
        let mut g = Graph::new();
        let xs: Vec<f64> = (0..5 * 4).map(|_| r.standard_normal()).collect();
        let x = g.input(Tensor::matrix(5, 4, xs).unwrap());
        let w1 = g.param(Tensor::matrix(4, 6, (0..24).map(|_| r.normal(0.0, 0.5)).collect()).unwrap());
        let b1 = g.param(Tensor::vector((0..6).map(|_| r.normal(0.0, 0.1)).collect()).unwrap());
        let w2 = g.param(Tensor::matrix(6, 3, (0..18).map(|_| r.normal(0.0, 0.4)).collect()).unwrap());
        let h = g.matmul(x, w1).unwrap();
        let h = g.bias_add(h, b1).unwrap();
        let h = g.tanh(h).unwrap();
        let z = g.matmul(h, w2).unwrap();
        let ce = g.softmax_ce(z, vec![0, 1, 2, 1, 0]).unwrap();
        g.mean_over_subset(ce, 5.0).unwrap();
        let rep = g.finite_difference_check(1e-5, 60, &mut r).unwrap();
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }
}
