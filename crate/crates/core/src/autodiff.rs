//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! Parameters live in a [`ParamStore`] that outlives any tape. A tape copies
//! parameter values in as leaves, records each primitive with its parents, and
//! on [`Tape::backward`] adds the resulting gradients into the store.

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_rows, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub id: String,
    pub tensor: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, id: impl Into<String>, tensor: Tensor) -> ParamId {
        let grad = Tensor::zeros(tensor.rows(), tensor.cols());
        self.params.push(Parameter { id: id.into(), tensor, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, p: ParamId) -> &Parameter {
        &self.params[p.0]
    }

    pub fn get_mut(&mut self, p: ParamId) -> &mut Parameter {
        &mut self.params[p.0]
    }

    pub fn value(&self, p: ParamId) -> &Tensor {
        &self.params[p.0].tensor
    }

    pub fn value_mut(&mut self, p: ParamId) -> &mut Tensor {
        &mut self.params[p.0].tensor
    }

    pub fn grad(&self, p: ParamId) -> &Tensor {
        &self.params[p.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.id == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Euclidean norm of the gradients of `ids` taken together.
    pub fn grad_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter().map(|&p| self.grad(p).norm_sq()).sum::<f64>().sqrt()
    }

    /// Rescale the gradients of `ids` so their joint norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, ids: &[ParamId], max_norm: f64) -> f64 {
        let norm = self.grad_norm(ids);
        if norm > max_norm {
            let c = max_norm / norm;
            for &p in ids {
                for g in self.params[p.0].grad.data_mut() {
                    *g *= c;
                }
            }
        }
        norm
    }
}

/// Plain gradient descent on `ids`, then zero their gradients.
pub fn sgd_step(store: &mut ParamStore, ids: &[ParamId], lr: f64) -> Result<()> {
    for &p in ids {
        if !store.grad(p).all_finite() {
            return Err(Error::NonFiniteGradient { id: store.get(p).id.clone() });
        }
    }
    for &p in ids {
        let param = &mut store.params[p.0];
        for (w, g) in param.tensor.data_mut().iter_mut().zip(param.grad.data_mut()) {
            *w -= lr * *g;
            *g = 0.0;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Constant,
    Param(ParamId),
    Affine,
    Relu,
    Tanh,
    Add,
    Scale(f64),
    Concat,
    Mse,
    SoftmaxCrossEntropy(Vec<usize>),
    BatchDotSoftmax(Vec<usize>),
    GradReverse,
    GradScale(f64),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Affine => "affine",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Add => "add",
            Op::Scale(_) => "scale",
            Op::Concat => "concat",
            Op::Mse => "mse",
            Op::SoftmaxCrossEntropy(_) => "softmax_cross_entropy",
            Op::BatchDotSoftmax(_) => "batch_dot_softmax",
            Op::GradReverse => "grad_reverse",
            Op::GradScale(_) => "grad_scale",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub value: Tensor,
    pub grad: Tensor,
    pub op: Op,
    pub parents: Vec<NodeId>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, shapes: &[(usize, usize)]) -> Error {
    let shapes = shapes.iter().map(|(r, c)| format!("{r}x{c}")).collect::<Vec<_>>().join(", ");
    Error::Shape { op, shapes }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: Vec<NodeId>) -> NodeId {
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.nodes.push(Node { value, grad, op, parents });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, vec![])
    }

    /// Leaf that routes its gradient back to `p` in the store.
    pub fn param(&mut self, store: &ParamStore, p: ParamId) -> NodeId {
        self.push(store.value(p).clone(), Op::Param(p), vec![])
    }

    /// Leaf holding the current value of `p` with no gradient route.
    pub fn frozen(&mut self, store: &ParamStore, p: ParamId) -> NodeId {
        self.constant(store.value(p).clone())
    }

    /// Constant copy of a node's current value.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        self.constant(self.value(x).clone())
    }

    /// `x · w + b` with `b` a `1 x out` row broadcast over the batch.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.1 != ws.0 || bs != (1, ws.1) {
            return Err(shape_err("affine", &[xs, ws, bs]));
        }
        let mut out = self.value(x).matmul(self.value(w));
        let bias = self.value(b).data().to_vec();
        for r in 0..out.rows() {
            for (c, bv) in bias.iter().enumerate() {
                let v = out.get(r, c) + bv;
                out.set(r, c, v);
            }
        }
        Ok(self.push(out, Op::Affine, vec![x, w, b]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { 0.0 });
        self.push(v, Op::Relu, vec![x])
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh, vec![x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err("add", &[sa, sb]));
        }
        let v = self.value(a).zip_map(self.value(b), |p, q| p + q);
        Ok(self.push(v, Op::Add, vec![a, b]))
    }

    /// Left-to-right sum of equally shaped nodes.
    pub fn sum(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = terms.split_first().ok_or(Error::EmptyBatch("sum"))?;
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).scaled(c);
        self.push(v, Op::Scale(c), vec![x])
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(shape_err("concat", &[va.shape(), vb.shape()]));
        }
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for r in 0..va.rows() {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let v = Tensor::from_vec(va.rows(), va.cols() + vb.cols(), data);
        Ok(self.push(v, Op::Concat, vec![a, b]))
    }

    /// Summed squared error `Σ (pred − target)²`.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (sp, st) = (self.value(pred).shape(), self.value(target).shape());
        if sp != st {
            return Err(shape_err("mse", &[sp, st]));
        }
        let s: f64 = self.value(pred).data().iter().zip(self.value(target).data()).map(|(p, t)| (p - t) * (p - t)).sum();
        Ok(self.push(Tensor::scalar(s), Op::Mse, vec![pred, target]))
    }

    /// Summed cross-entropy `−Σ_i log softmax(logits_i)[labels_i]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        if v.rows() != labels.len() || labels.iter().any(|&y| y >= v.cols()) {
            return Err(shape_err("softmax_cross_entropy", &[v.shape(), (labels.len(), 1)]));
        }
        let ls = log_softmax_rows(v);
        let s: f64 = labels.iter().enumerate().map(|(i, &y)| -ls.get(i, y)).sum();
        Ok(self.push(Tensor::scalar(s), Op::SoftmaxCrossEntropy(labels.to_vec()), vec![logits]))
    }

    /// Summed cross-entropy of the similarity softmax `softmax(q · keysᵀ)` with
    /// row `i` targeting key `targets[i]`.
    pub fn batch_dot_softmax(&mut self, q: NodeId, keys: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (vq, vk) = (self.value(q), self.value(keys));
        if vq.cols() != vk.cols() || vq.rows() != targets.len() || targets.iter().any(|&t| t >= vk.rows()) {
            return Err(shape_err("batch_dot_softmax", &[vq.shape(), vk.shape(), (targets.len(), 1)]));
        }
        let ls = log_softmax_rows(&vq.matmul_t(vk));
        let s: f64 = targets.iter().enumerate().map(|(i, &t)| -ls.get(i, t)).sum();
        Ok(self.push(Tensor::scalar(s), Op::BatchDotSoftmax(targets.to_vec()), vec![q, keys]))
    }

    /// Identity forward, negated gradient backward.
    pub fn grad_reverse(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push(v, Op::GradReverse, vec![x])
    }

    /// Identity forward, gradient multiplied by `c` backward.
    pub fn grad_scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).clone();
        self.push(v, Op::GradScale(c), vec![x])
    }

    /// Backpropagate from a scalar `loss` and add parameter gradients into `store`.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        let (rows, cols) = self.value(loss).shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        for n in &mut self.nodes {
            n.grad.data_mut().fill(0.0);
        }
        let mut live = vec![false; self.nodes.len()];
        live[loss.0] = true;
        self.nodes[loss.0].grad = Tensor::scalar(1.0);
        for i in (0..=loss.0).rev() {
            if !live[i] {
                continue;
            }
            let contribs = self.local_grads(i);
            let parents = self.nodes[i].parents.clone();
            for (p, g) in parents.into_iter().zip(contribs) {
                if let Some(g) = g {
                    self.nodes[p.0].grad.add_assign(&g);
                    live[p.0] = true;
                }
            }
            if let Op::Param(pid) = self.nodes[i].op {
                store.get_mut(pid).grad.add_assign(&self.nodes[i].grad);
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize) -> Vec<Option<Tensor>> {
        let node = &self.nodes[i];
        let g = &node.grad;
        let pv = |k: usize| &self.nodes[node.parents[k].0].value;
        match &node.op {
            Op::Constant | Op::Param(_) => vec![],
            Op::Affine => {
                let (x, w) = (pv(0), pv(1));
                vec![Some(g.matmul_t(w)), Some(x.t_matmul(g)), Some(g.col_sums())]
            }
            Op::Relu => vec![Some(pv(0).zip_map(g, |a, gi| if a > 0.0 { gi } else { 0.0 }))],
            Op::Tanh => vec![Some(node.value.zip_map(g, |y, gi| gi * (1.0 - y * y)))],
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Scale(c) => vec![Some(g.scaled(*c))],
            Op::Concat => {
                let ca = pv(0).cols();
                let cb = pv(1).cols();
                let mut ga = Tensor::zeros(g.rows(), ca);
                let mut gb = Tensor::zeros(g.rows(), cb);
                for r in 0..g.rows() {
                    ga.data_mut()[r * ca..(r + 1) * ca].copy_from_slice(&g.row(r)[..ca]);
                    gb.data_mut()[r * cb..(r + 1) * cb].copy_from_slice(&g.row(r)[ca..]);
                }
                vec![Some(ga), Some(gb)]
            }
            Op::Mse => {
                let up = g.item();
                let d = pv(0).zip_map(pv(1), |p, t| 2.0 * up * (p - t));
                let neg = d.scaled(-1.0);
                vec![Some(d), Some(neg)]
            }
            Op::SoftmaxCrossEntropy(labels) => {
                let up = g.item();
                let mut d = log_softmax_rows(pv(0)).map(f64::exp);
                for (r, &y) in labels.iter().enumerate() {
                    let v = d.get(r, y) - 1.0;
                    d.set(r, y, v);
                }
                vec![Some(d.scaled(up))]
            }
            Op::BatchDotSoftmax(targets) => {
                let up = g.item();
                let (q, k) = (pv(0), pv(1));
                let mut ds = log_softmax_rows(&q.matmul_t(k)).map(f64::exp);
                for (r, &t) in targets.iter().enumerate() {
                    let v = ds.get(r, t) - 1.0;
                    ds.set(r, t, v);
                }
                let ds = ds.scaled(up);
                vec![Some(ds.matmul(k)), Some(ds.t_matmul(q))]
            }
            Op::GradReverse => vec![Some(g.scaled(-1.0))],
            Op::GradScale(c) => vec![Some(g.scaled(*c))],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FdEntry {
    pub id: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-8)` over the tensor.
    pub rel_error: f64,
    /// Coordinates whose one-sided differences disagree, i.e. a kink sits within `h`.
    pub kinks: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub max_rel_error: f64,
    pub non_finite: bool,
    pub tolerance: f64,
}

impl FdReport {
    pub fn flagged(&self) -> bool {
        self.entries.iter().any(|e| e.kinks > 0)
    }

    pub fn passed(&self) -> bool {
        !self.non_finite && self.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub h: f64,
    pub tolerance: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions { h: 1e-6, tolerance: 1e-5 }
    }
}

/// Compare `analytic[k]` against central differences of `loss` in parameter
/// `ids[k]`. Coordinates sitting on a kink are excluded from the error and
/// counted in [`FdEntry::kinks`].
pub fn finite_diff_check<F>(store: &ParamStore, ids: &[ParamId], analytic: &[Tensor], mut loss: F, opts: FdOptions) -> FdReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut work = store.clone();
    let base = loss(&work);
    let mut report = FdReport { tolerance: opts.tolerance, non_finite: !base.is_finite(), ..Default::default() };
    for (&pid, a) in ids.iter().zip(analytic) {
        let n = work.value(pid).len();
        let mut num = vec![0.0; n];
        let mut mask = vec![true; n];
        let mut kinks = 0;
        for j in 0..n {
            let orig = work.value(pid).data()[j];
            work.value_mut(pid).data_mut()[j] = orig + opts.h;
            let up = loss(&work);
            work.value_mut(pid).data_mut()[j] = orig - opts.h;
            let down = loss(&work);
            work.value_mut(pid).data_mut()[j] = orig;
            if !up.is_finite() || !down.is_finite() {
                report.non_finite = true;
                continue;
            }
            num[j] = (up - down) / (2.0 * opts.h);
            let fwd = (up - base) / opts.h;
            let bwd = (base - down) / opts.h;
            if (fwd - bwd).abs() > 1e-3 * (1.0 + num[j].abs()) {
                mask[j] = false;
                kinks += 1;
            }
        }
        if !a.all_finite() {
            report.non_finite = true;
        }
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for j in 0..n {
            if mask[j] {
                let av = a.data()[j];
                diff += (av - num[j]).powi(2);
                na += av * av;
                nn += num[j] * num[j];
            }
        }
        let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-8);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.entries.push(FdEntry { id: store.get(pid).id.clone(), rel_error: rel, kinks });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn relu_of_negative_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(-1.0));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).item(), 0.0);
    }

    #[test]
    fn mse_of_identical_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[vec![1.0, -2.0], vec![0.5, 3.0]]));
        let b = tape.constant(t(&[vec![1.0, -2.0], vec![0.5, 3.0]]));
        let l = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn uniform_logits_give_log_c() {
        for c in 2..7 {
            let mut tape = Tape::new();
            let z = tape.constant(Tensor::filled(1, c, 0.7));
            let l = tape.softmax_cross_entropy(z, &[c - 1]).unwrap();
            assert!((tape.value(l).item() - (c as f64).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 3));
        let w = tape.constant(Tensor::zeros(4, 2));
        let b = tape.constant(Tensor::zeros(1, 2));
        let err = tape.affine(x, w, b).unwrap_err();
        assert!(err.to_string().contains("affine"));
        assert!(err.to_string().contains("2x3"));
    }

    #[test]
    fn grad_reverse_is_identity_forward_and_negates_backward() {
        let mut store = ParamStore::new();
        let p = store.add("x", t(&[vec![1.5, -2.0]]));
        let mut tape = Tape::new();
        let x = tape.param(&store, p);
        let r = tape.grad_reverse(x);
        assert_eq!(tape.value(r), tape.value(x));
        let target = tape.constant(Tensor::zeros(1, 2));
        let l = tape.mse(r, target).unwrap();
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.grad(p).data(), &[-3.0, 4.0]);

        let mut store2 = ParamStore::new();
        let p2 = store2.add("x", t(&[vec![1.5, -2.0]]));
        let mut tape = Tape::new();
        let x = tape.param(&store2, p2);
        let r = tape.grad_reverse(x);
        let rr = tape.grad_reverse(r);
        let target = tape.constant(Tensor::zeros(1, 2));
        let l = tape.mse(rr, target).unwrap();
        tape.backward(l, &mut store2).unwrap();
        assert_eq!(store2.grad(p2).data(), &[3.0, -4.0]);
    }

    #[test]
    fn constant_loss_leaves_grads_zero() {
        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::filled(2, 2, 1.0));
        let mut tape = Tape::new();
        let _ = tape.param(&store, p);
        let c = tape.constant(Tensor::scalar(3.0));
        tape.backward(c, &mut store).unwrap();
        assert!(store.grad(p).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[vec![0.3], vec![-0.1], vec![2.0]]));
        let zero = store.add("b", Tensor::zeros(1, 1));
        let x = t(&[vec![1.0, 2.0, -4.0]]);
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let wn = tape.param(&store, w);
        let bn = tape.frozen(&store, zero);
        let y = tape.affine(xn, wn, bn).unwrap();
        tape.backward(y, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), x.data());
        assert_eq!(store.grad(zero).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 1));
        assert!(matches!(tape.backward(x, &mut store), Err(Error::NonScalarLoss { rows: 2, cols: 1 })));
    }

    #[test]
    fn sgd_arithmetic_and_zeroing() {
        let mut store = ParamStore::new();
        let p = store.add("theta", Tensor::scalar(1.0));
        store.get_mut(p).grad = Tensor::scalar(2.0);
        sgd_step(&mut store, &[p], 0.1).unwrap();
        assert!((store.value(p).item() - 0.8).abs() < 1e-15);
        assert_eq!(store.grad(p).item(), 0.0);
        store.get_mut(p).grad = Tensor::scalar(5.0);
        sgd_step(&mut store, &[p], 0.0).unwrap();
        assert!((store.value(p).item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("phi.w0", Tensor::scalar(1.0));
        store.get_mut(p).grad = Tensor::scalar(f64::NAN);
        match sgd_step(&mut store, &[p], 0.1) {
            Err(Error::NonFiniteGradient { id }) => assert_eq!(id, "phi.w0"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut store = ParamStore::new();
        let p = store.add("a", Tensor::zeros(1, 2));
        store.get_mut(p).grad = t(&[vec![30.0, 40.0]]);
        let n = store.clip_grad_norm(&[p], 10.0);
        assert_eq!(n, 50.0);
        assert!((store.grad(p).norm() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_gradient_matches_differences() {
        let mut store = ParamStore::new();
        let p = store.add("w", t(&[vec![0.4, -1.3, 2.2]]));
        let loss = |s: &ParamStore| s.value(p).data().iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum::<f64>();
        let analytic = store.value(p).data().iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect();
        let a = Tensor::from_vec(1, 3, analytic);
        let rep = finite_diff_check(&store, &[p], &[a], loss, FdOptions::default());
        assert!(rep.max_rel_error < 1e-8, "{rep:?}");
        assert!(!rep.flagged());
    }

    #[test]
    fn relu_kink_is_flagged() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[vec![1.0], vec![-1.0]]));
        let build = |s: &ParamStore| {
            let mut tape = Tape::new();
            let x = tape.constant(t(&[vec![2.0, 2.0]]));
            let wn = tape.param(s, w);
            let b = tape.constant(Tensor::zeros(1, 1));
            let h = tape.affine(x, wn, b).unwrap();
            let r = tape.relu(h);
            (tape, r)
        };
        let (mut tape, r) = build(&store);
        assert_eq!(tape.value(r).item(), 0.0);
        let mut s2 = store.clone();
        tape.backward(r, &mut s2).unwrap();
        let rep = finite_diff_check(&store, &[w], &[s2.grad(w).clone()], |s| build(s).0.value(r).item(), FdOptions::default());
        assert!(rep.flagged());
    }
}
