use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations recordable on the tape.
///
/// Shape rules: `MatMul` accepts matrix and vector operands (a vector on the
/// left acts as a row, on the right as a column). `Add` accepts equal shapes
/// or a matrix plus a per-row bias vector. Everything else is elementwise on
/// equal shapes or documented per variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Transpose,
    /// Axis 0 concatenates vectors or stacks matrix rows; axis 1 joins matrix columns.
    Concat { axis: usize },
    /// Stacks equal-length vectors as the rows of a matrix.
    Stack,
    Slice { axis: usize, start: usize, end: usize },
    Row(usize),
    /// Softmax along the last axis. Masked-out entries (`false`) are exactly 0.
    Softmax { mask: Option<Vec<bool>> },
    Tanh,
    Sigmoid,
    Relu,
    Log,
    /// `None` reduces to a scalar; `Some(0)` averages matrix rows.
    Mean { axis: Option<usize> },
    Sum,
    L2Norm,
    Embedding { ids: Vec<usize> },
    /// Flat index into the operand, yielding a scalar.
    Index(usize),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Transpose => "transpose",
            Op::Concat { .. } => "concat",
            Op::Stack => "stack",
            Op::Slice { .. } => "split",
            Op::Row(_) => "row",
            Op::Softmax { .. } => "softmax",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Log => "log",
            Op::Mean { .. } => "mean",
            Op::Sum => "sum",
            Op::L2Norm => "l2_norm",
            Op::Embedding { .. } => "embedding_lookup",
            Op::Index(_) => "index",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TapeNode {
    pub id: NodeId,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub retain_grad: bool,
    requires_grad: bool,
}

/// Append-only record of a computation. Node values are never mutated after
/// creation, so a tape can always be re-read after `backward`.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

fn shape_err(op: &'static str, inputs: &[&Tensor]) -> TensorError {
    TensorError::Shape { op, shapes: inputs.iter().map(|t| t.shape().to_vec()).collect() }
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

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value, false)
    }

    pub fn retain_grad(&mut self, id: NodeId) {
        self.nodes[id.0].retain_grad = true;
    }

    pub fn node(&self, id: NodeId) -> &TapeNode {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(TapeNode { id, op, inputs, value, grad: None, retain_grad: false, requires_grad });
        id
    }

    /// Records `op` applied to `inputs` and returns the new node.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
        let value = forward(&op, &vals)?;
        if !value.is_finite() {
            return Err(TensorError::NonFinite(op.name()));
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push(op, inputs.to_vec(), value, requires_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Transpose, &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(Op::Concat { axis }, parts)
    }
    pub fn stack(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::Stack, rows)
    }
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Op::Slice { axis, start, end }, &[a])
    }
    pub fn row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        self.apply(Op::Row(i), &[a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Softmax { mask: None }, &[a])
    }
    pub fn masked_softmax(&mut self, a: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        self.apply(Op::Softmax { mask: Some(mask) }, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean { axis: None }, &[a])
    }
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean { axis: Some(0) }, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[a])
    }
    pub fn l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::L2Norm, &[a])
    }
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.apply(Op::Embedding { ids: ids.to_vec() }, &[table])
    }
    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        self.apply(Op::Index(i), &[a])
    }

    /// Populates `grad` on every differentiable leaf and every retained node
    /// with the derivative of the scalar `root`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        if self.nodes[root.0].value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(&root_shape, 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if !node.inputs.is_empty() {
                let vals: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
                let in_grads = vjp(&node.op, &vals, &node.value, &g, &needs);
                for (inp, ig) in node.inputs.iter().zip(in_grads) {
                    let Some(ig) = ig else { continue };
                    match &mut grads[inp.0] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                                *a += b;
                            }
                        }
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            let node = &mut self.nodes[idx];
            if node.retain_grad || node.op == Op::Leaf {
                node.grad = Some(g);
            }
        }
        Ok(())
    }
}

/// Evaluates one primitive on plain tensors without recording anything.
pub fn eval(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    forward(op, inputs)
}

/// Views an operand as a matrix: vectors become a row (`left`) or a column.
fn as_matrix(t: &Tensor, left: bool) -> (usize, usize) {
    match t.rank() {
        2 => (t.shape()[0], t.shape()[1]),
        1 if left => (1, t.shape()[0]),
        1 => (t.shape()[0], 1),
        _ => (1, 1),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn softmax_row(x: &[f64], mask: Option<&[bool]>) -> Option<Vec<f64>> {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let max = (0..x.len()).filter(|&j| keep(j)).map(|j| x[j]).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut out: Vec<f64> = (0..x.len()).map(|j| if keep(j) { (x[j] - max).exp() } else { 0.0 }).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    Some(out)
}

fn forward(op: &Op, x: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    let unary = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
        if x.len() != 1 {
            return Err(shape_err(name, x));
        }
        Ok(x[0].map(f))
    };
    match op {
        Op::Leaf => Err(shape_err(name, x)),
        Op::MatMul => {
            if x.len() != 2 || x[0].rank() == 0 || x[1].rank() == 0 {
                return Err(shape_err(name, x));
            }
            let (m, k) = as_matrix(x[0], true);
            let (k2, n) = as_matrix(x[1], false);
            if k != k2 {
                return Err(shape_err(name, x));
            }
            let data = matmul_raw(x[0].data(), x[1].data(), m, k, n);
            let shape = match (x[0].rank(), x[1].rank()) {
                (2, 2) => vec![m, n],
                (2, 1) => vec![m],
                (1, 2) => vec![n],
                _ => vec![],
            };
            Tensor::new(shape, data)
        }
        Op::Add | Op::Sub | Op::Mul => {
            if x.len() != 2 {
                return Err(shape_err(name, x));
            }
            let f = |a: f64, b: f64| match op {
                Op::Add => a + b,
                Op::Sub => a - b,
                _ => a * b,
            };
            if x[0].same_shape(x[1]) {
                Ok(x[0].zip_map(x[1], f))
            } else if *op == Op::Add && x[0].rank() == 2 && x[1].rank() == 1 && x[0].cols() == x[1].numel() {
                let c = x[0].cols();
                let data = x[0].data().iter().enumerate().map(|(i, &a)| a + x[1].data()[i % c]).collect();
                Tensor::new(x[0].shape().to_vec(), data)
            } else {
                Err(shape_err(name, x))
            }
        }
        Op::Scale(c) => unary(&|v| v * c),
        Op::Transpose => {
            if x.len() != 1 || x[0].rank() != 2 {
                return Err(shape_err(name, x));
            }
            let (r, c) = (x[0].rows(), x[0].cols());
            Tensor::matrix(c, r, transpose_raw(x[0].data(), r, c))
        }
        Op::Concat { axis } => {
            if x.is_empty() {
                return Err(shape_err(name, x));
            }
            let rank = x[0].rank();
            match (axis, rank) {
                (0, 1) if x.iter().all(|t| t.rank() == 1) => {
                    Ok(Tensor::vector(x.iter().flat_map(|t| t.data().iter().copied()).collect()))
                }
                (0, 2) if x.iter().all(|t| t.rank() == 2 && t.cols() == x[0].cols()) => {
                    let rows = x.iter().map(|t| t.rows()).sum();
                    Tensor::matrix(rows, x[0].cols(), x.iter().flat_map(|t| t.data().iter().copied()).collect())
                }
                (1, 2) if x.iter().all(|t| t.rank() == 2 && t.rows() == x[0].rows()) => {
                    let rows = x[0].rows();
                    let cols: usize = x.iter().map(|t| t.cols()).sum();
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        for t in x {
                            data.extend_from_slice(t.row(r));
                        }
                    }
                    Tensor::matrix(rows, cols, data)
                }
                _ => Err(shape_err(name, x)),
            }
        }
        Op::Stack => {
            if x.is_empty() || x.iter().any(|t| t.rank() != 1 || t.numel() != x[0].numel()) {
                return Err(shape_err(name, x));
            }
            Tensor::matrix(x.len(), x[0].numel(), x.iter().flat_map(|t| t.data().iter().copied()).collect())
        }
        Op::Slice { axis, start, end } => {
            if x.len() != 1 {
                return Err(shape_err(name, x));
            }
            let t = x[0];
            let extent = match (axis, t.rank()) {
                (0, 1) | (1, 2) => t.cols(),
                (0, 2) => t.rows(),
                _ => return Err(shape_err(name, x)),
            };
            if start > end || *end > extent {
                return Err(TensorError::Index { op: name, index: *end, extent });
            }
            match (axis, t.rank()) {
                (0, 1) => Ok(Tensor::vector(t.data()[*start..*end].to_vec())),
                (0, 2) => {
                    let c = t.cols();
                    Tensor::matrix(end - start, c, t.data()[start * c..end * c].to_vec())
                }
                _ => {
                    let mut data = Vec::with_capacity(t.rows() * (end - start));
                    for r in 0..t.rows() {
                        data.extend_from_slice(&t.row(r)[*start..*end]);
                    }
                    Tensor::matrix(t.rows(), end - start, data)
                }
            }
        }
        Op::Row(i) => {
            if x.len() != 1 || x[0].rank() != 2 {
                return Err(shape_err(name, x));
            }
            if *i >= x[0].rows() {
                return Err(TensorError::Index { op: name, index: *i, extent: x[0].rows() });
            }
            Ok(Tensor::vector(x[0].row(*i).to_vec()))
        }
        Op::Softmax { mask } => {
            if x.len() != 1 || x[0].rank() == 0 {
                return Err(shape_err(name, x));
            }
            let t = x[0];
            if let Some(m) = mask {
                if m.len() != t.cols() {
                    return Err(TensorError::Shape { op: name, shapes: vec![t.shape().to_vec(), vec![m.len()]] });
                }
            }
            let mut data = Vec::with_capacity(t.numel());
            for r in 0..t.rows() {
                let row = softmax_row(t.row(r), mask.as_deref()).ok_or(TensorError::FullyMasked(r))?;
                data.extend(row);
            }
            Tensor::new(t.shape().to_vec(), data)
        }
        Op::Tanh => unary(&f64::tanh),
        Op::Sigmoid => unary(&|v| 1.0 / (1.0 + (-v).exp())),
        Op::Relu => unary(&|v| v.max(0.0)),
        Op::Log => unary(&f64::ln),
        Op::Mean { axis } => {
            if x.len() != 1 {
                return Err(shape_err(name, x));
            }
            let t = x[0];
            match axis {
                None => Ok(Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64)),
                Some(0) if t.rank() == 2 && t.rows() > 0 => {
                    let (r, c) = (t.rows(), t.cols());
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        for (o, v) in out.iter_mut().zip(t.row(i)) {
                            *o += v;
                        }
                    }
                    Ok(Tensor::vector(out.into_iter().map(|v| v / r as f64).collect()))
                }
                _ => Err(shape_err(name, x)),
            }
        }
        Op::Sum => {
            if x.len() != 1 {
                return Err(shape_err(name, x));
            }
            Ok(Tensor::scalar(x[0].data().iter().sum()))
        }
        Op::L2Norm => {
            if x.len() != 1 {
                return Err(shape_err(name, x));
            }
            Ok(Tensor::scalar(x[0].l2_norm()))
        }
        Op::Embedding { ids } => {
            if x.len() != 1 || x[0].rank() != 2 {
                return Err(shape_err(name, x));
            }
            let table = x[0];
            let mut data = Vec::with_capacity(ids.len() * table.cols());
            for &id in ids {
                if id >= table.rows() {
                    return Err(TensorError::Index { op: name, index: id, extent: table.rows() });
                }
                data.extend_from_slice(table.row(id));
            }
            Tensor::matrix(ids.len(), table.cols(), data)
        }
        Op::Index(i) => {
            if x.len() != 1 {
                return Err(shape_err(name, x));
            }
            if *i >= x[0].numel() {
                return Err(TensorError::Index { op: name, index: *i, extent: x[0].numel() });
            }
            Ok(Tensor::scalar(x[0].data()[*i]))
        }
    }
}

/// Vector-Jacobian products: gradient of each input given the output gradient.
fn vjp(op: &Op, x: &[&Tensor], out: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
    let reshape = |data: Vec<f64>, like: &Tensor| Tensor::new(like.shape().to_vec(), data).expect("grad shape");
    match op {
        Op::Leaf => vec![],
        Op::MatMul => {
            let (m, k) = as_matrix(x[0], true);
            let (_, n) = as_matrix(x[1], false);
            let ga = needs[0].then(|| {
                let bt = transpose_raw(x[1].data(), k, n);
                reshape(matmul_raw(g.data(), &bt, m, n, k), x[0])
            });
            let gb = needs[1].then(|| {
                let at = transpose_raw(x[0].data(), m, k);
                reshape(matmul_raw(&at, g.data(), k, m, n), x[1])
            });
            vec![ga, gb]
        }
        Op::Add => {
            let gb = needs[1].then(|| {
                if x[1].same_shape(g) {
                    g.clone()
                } else {
                    let c = x[1].numel();
                    let mut acc = vec![0.0; c];
                    for (i, v) in g.data().iter().enumerate() {
                        acc[i % c] += v;
                    }
                    Tensor::vector(acc)
                }
            });
            vec![needs[0].then(|| g.clone()), gb]
        }
        Op::Sub => vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))],
        Op::Mul => vec![
            needs[0].then(|| g.zip_map(x[1], |a, b| a * b)),
            needs[1].then(|| g.zip_map(x[0], |a, b| a * b)),
        ],
        Op::Scale(c) => vec![Some(g.map(|v| v * c))],
        Op::Transpose => {
            let (r, c) = (x[0].rows(), x[0].cols());
            vec![Some(reshape(transpose_raw(g.data(), c, r), x[0]))]
        }
        Op::Concat { axis } => {
            let mut outs = Vec::with_capacity(x.len());
            if *axis == 1 {
                let rows = g.rows();
                let mut col = 0;
                for (t, &need) in x.iter().zip(needs) {
                    let c = t.cols();
                    outs.push(need.then(|| {
                        let mut data = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row(r)[col..col + c]);
                        }
                        reshape(data, t)
                    }));
                    col += c;
                }
            } else {
                let mut off = 0;
                for (t, &need) in x.iter().zip(needs) {
                    let n = t.numel();
                    outs.push(need.then(|| reshape(g.data()[off..off + n].to_vec(), t)));
                    off += n;
                }
            }
            outs
        }
        Op::Stack => {
            let n = x[0].numel();
            x.iter()
                .enumerate()
                .map(|(i, t)| needs[i].then(|| reshape(g.data()[i * n..(i + 1) * n].to_vec(), t)))
                .collect()
        }
        Op::Slice { axis, start, end } => {
            let t = x[0];
            let mut data = vec![0.0; t.numel()];
            match (axis, t.rank()) {
                (0, 1) => data[*start..*end].copy_from_slice(g.data()),
                (0, 2) => {
                    let c = t.cols();
                    data[start * c..end * c].copy_from_slice(g.data());
                }
                _ => {
                    let (c, w) = (t.cols(), end - start);
                    for r in 0..t.rows() {
                        data[r * c + start..r * c + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                }
            }
            vec![Some(reshape(data, t))]
        }
        Op::Row(i) => {
            let t = x[0];
            let c = t.cols();
            let mut data = vec![0.0; t.numel()];
            data[i * c..(i + 1) * c].copy_from_slice(g.data());
            vec![Some(reshape(data, t))]
        }
        Op::Softmax { .. } => {
            // dx_j = y_j (g_j - sum_k g_k y_k), row by row; masked entries have y = 0.
            let c = out.cols();
            let mut data = Vec::with_capacity(out.numel());
            for r in 0..out.rows() {
                let y = out.row(r);
                let gr = &g.data()[r * c..(r + 1) * c];
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                data.extend(y.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
            }
            vec![Some(reshape(data, x[0]))]
        }
        Op::Tanh => vec![Some(g.zip_map(out, |gv, y| gv * (1.0 - y * y)))],
        Op::Sigmoid => vec![Some(g.zip_map(out, |gv, y| gv * y * (1.0 - y)))],
        Op::Relu => vec![Some(g.zip_map(x[0], |gv, v| if v > 0.0 { gv } else { 0.0 }))],
        Op::Log => vec![Some(g.zip_map(x[0], |gv, v| gv / v))],
        Op::Mean { axis } => {
            let t = x[0];
            match axis {
                None => {
                    let v = g.item() / t.numel() as f64;
                    vec![Some(Tensor::filled(t.shape(), v))]
                }
                _ => {
                    let r = t.rows() as f64;
                    let data = (0..t.rows()).flat_map(|_| g.data().iter().map(move |v| v / r)).collect();
                    vec![Some(reshape(data, t))]
                }
            }
        }
        Op::Sum => vec![Some(Tensor::filled(x[0].shape(), g.item()))],
        Op::L2Norm => {
            let n = out.item();
            let gv = g.item();
            vec![Some(if n > 0.0 { x[0].map(|v| gv * v / n) } else { Tensor::zeros(x[0].shape()) })]
        }
        Op::Embedding { ids } => {
            let table = x[0];
            let c = table.cols();
            let mut data = vec![0.0; table.numel()];
            for (row, &id) in ids.iter().enumerate() {
                for (d, v) in data[id * c..(id + 1) * c].iter_mut().zip(&g.data()[row * c..(row + 1) * c]) {
                    *d += v;
                }
            }
            vec![Some(reshape(data, table))]
        }
        Op::Index(i) => {
            let mut data = vec![0.0; x[0].numel()];
            data[*i] = g.item();
            vec![Some(reshape(data, x[0]))]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0; 3]));
        let y = t.softmax(x).unwrap();
        assert!(close(t.value(y).data(), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn identity_matmul_returns_vector() {
        let mut t = Tape::new();
        let eye = t.constant(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let v = t.leaf(Tensor::vector(vec![0.3, -2.0, 7.5]));
        let y = t.matmul(eye, v).unwrap();
        assert_eq!(t.value(y).data(), &[0.3, -2.0, 7.5]);
    }

    #[test]
    fn l2_norm_of_three_four() {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::vector(vec![3.0, 4.0]));
        let n = t.l2_norm(v).unwrap();
        assert_eq!(t.value(n).item(), 5.0);
    }

    #[test]
    fn dot_self_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let f = t.matmul(w, w).unwrap();
        t.backward(f).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn softmax_first_entry_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, 0.0]));
        let s = t.softmax(x).unwrap();
        let f = t.index(s, 0).unwrap();
        t.backward(f).unwrap();
        assert!(close(t.grad(x).unwrap().data(), &[0.25, -0.25], 1e-15));
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        match err {
            TensorError::Shape { op, shapes } => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(a), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![5.0, 1.0, 2.0]));
        let y = t.masked_softmax(x, vec![false, true, true]).unwrap();
        assert_eq!(t.value(y).data()[0], 0.0);
        let s: f64 = t.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        let all_masked = t.masked_softmax(x, vec![false; 3]);
        assert!(matches!(all_masked, Err(TensorError::FullyMasked(0))));
    }

    #[test]
    fn embedding_gradient_accumulates_repeats() {
        let mut t = Tape::new();
        let table = t.leaf(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let e = t.embedding(table, &[1, 1, 2]).unwrap();
        let s = t.sum(e).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(table).unwrap().data(), &[0., 0., 2., 2., 1., 1.]);
    }

    #[test]
    fn retained_intermediate_gets_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, -1.0]));
        let h = t.tanh(x).unwrap();
        t.retain_grad(h);
        let h2 = t.scale(h, 3.0).unwrap();
        let s = t.sum(h2).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(h).unwrap().data(), &[3.0, 3.0]);
        assert!(t.grad(h2).is_none());
    }

    #[test]
    fn log_of_zero_is_reported() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0]));
        assert!(matches!(t.log(x), Err(TensorError::NonFinite("log"))));
    }
}
