//! A reverse-mode gradient tape over a closed set of operations.
//!
//! A [`Graph`] is an immutable description of a computation; a [`Tape`] runs
//! it forward on named inputs, caches every intermediate value, and then
//! propagates adjoints back to the trainable leaves.
//!
//! Batched operands are rank-2 `[batch, features]` tensors; `sparse_matmul`
//! and `dct` act on the last axis, and `add` broadcasts a rank-1 right-hand
//! side over the rows of a rank-2 left-hand side (bias addition).

use std::collections::{BTreeMap, HashMap};

use crate::dct::DctPlan;
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Support pattern of a sparse-matmul node. Values come from another node.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsePattern {
    pub rows: usize,
    pub cols: usize,
    pub support: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input { name: String, trainable: bool },
    Add(NodeId, NodeId),
    /// Multiplies `input` by the one-element tensor `factor`.
    Scale { input: NodeId, factor: NodeId },
    Mul(NodeId, NodeId),
    Relu(NodeId),
    MatMul(NodeId, NodeId),
    SparseMatMul { pattern: SparsePattern, values: NodeId, input: NodeId },
    Dct { input: NodeId, out_len: usize },
    /// Mean softmax cross-entropy over the batch, log-sum-exp stabilised.
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize> },
    Abs(NodeId),
    Sum(NodeId),
    Reshape { input: NodeId, shape: Vec<usize> },
    /// Zero-pads the last axis to `len`.
    Pad { input: NodeId, len: usize },
    /// Keeps the first `len` entries of the last axis.
    Truncate { input: NodeId, len: usize },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { trainable: true, .. } => "param",
            Op::Input { .. } => "input",
            Op::Add(..) => "add",
            Op::Scale { .. } => "scale",
            Op::Mul(..) => "mul",
            Op::Relu(_) => "relu",
            Op::MatMul(..) => "matmul",
            Op::SparseMatMul { .. } => "sparse_matmul",
            Op::Dct { .. } => "dct",
            Op::SoftmaxCrossEntropy { .. } => "softmax_ce",
            Op::Abs(_) => "abs",
            Op::Sum(_) => "sum",
            Op::Reshape { .. } => "reshape",
            Op::Pad { .. } => "pad",
            Op::Truncate { .. } => "truncate",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale { input, factor } => vec![*input, *factor],
            Op::SparseMatMul { values, input, .. } => vec![*values, *input],
            Op::Relu(a) | Op::Abs(a) | Op::Sum(a) => vec![*a],
            Op::Dct { input, .. }
            | Op::Reshape { input, .. }
            | Op::Pad { input, .. }
            | Op::Truncate { input, .. } => vec![*input],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// A computation graph. Nodes only reference earlier nodes, so insertion
/// order is a topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Op>,
    names: HashMap<String, NodeId>,
    output: Option<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Op] {
        &self.nodes
    }

    /// Adds a node. Operands must already exist and input names must be unique.
    pub fn push(&mut self, op: Op) -> Result<NodeId> {
        let id = self.nodes.len();
        if let Some(bad) = op.operands().into_iter().find(|&o| o >= id) {
            return Err(Error::Graph(format!("{} references unknown node {bad}", op.kind())));
        }
        if let Op::Input { name, .. } = &op {
            if self.names.insert(name.clone(), id).is_some() {
                return Err(Error::Graph(format!("duplicate input name `{name}`")));
            }
        }
        self.nodes.push(op);
        self.output = Some(id);
        Ok(id)
    }

    fn add_node(&mut self, op: Op) -> NodeId {
        self.push(op).expect("builder operands are valid node ids")
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.try_input(name, false)
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        self.try_input(name, true)
    }

    fn try_input(&mut self, name: &str, trainable: bool) -> NodeId {
        self.push(Op::Input {
            name: name.to_string(),
            trainable,
        })
        .unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add_node(Op::Add(a, b))
    }
    pub fn scale(&mut self, input: NodeId, factor: NodeId) -> NodeId {
        self.add_node(Op::Scale { input, factor })
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add_node(Op::Mul(a, b))
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.add_node(Op::Relu(a))
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add_node(Op::MatMul(a, b))
    }
    pub fn sparse_matmul(&mut self, pattern: SparsePattern, values: NodeId, input: NodeId) -> NodeId {
        self.add_node(Op::SparseMatMul { pattern, values, input })
    }
    pub fn dct(&mut self, input: NodeId, out_len: usize) -> NodeId {
        self.add_node(Op::Dct { input, out_len })
    }
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> NodeId {
        self.add_node(Op::SoftmaxCrossEntropy { logits, labels })
    }
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.add_node(Op::Abs(a))
    }
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.add_node(Op::Sum(a))
    }
    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> NodeId {
        self.add_node(Op::Reshape { input, shape })
    }
    pub fn pad(&mut self, input: NodeId, len: usize) -> NodeId {
        self.add_node(Op::Pad { input, len })
    }
    pub fn truncate(&mut self, input: NodeId, len: usize) -> NodeId {
        self.add_node(Op::Truncate { input, len })
    }

    /// Marks the node whose value `Tape::forward` returns. Defaults to the
    /// most recently added node.
    pub fn set_output(&mut self, node: NodeId) -> Result<()> {
        if node >= self.nodes.len() {
            return Err(Error::Graph(format!("output node {node} does not exist")));
        }
        self.output = Some(node);
        Ok(())
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    /// Parses a line-oriented description:
    ///
    /// ```text
    /// x = input
    /// w = param
    /// h = matmul w x
    /// y = relu h
    /// s = sparse_matmul v x rows=3 cols=4 support=0:1,2:0
    /// z = dct y out=5
    /// loss = softmax_ce z labels=1
    /// output loss
    /// ```
    ///
    /// Other op names: `add`, `scale`, `mul`, `abs`, `sum`,
    /// `reshape a shape=2,3`, `pad a len=5`, `truncate a len=2`.
    pub fn parse(text: &str) -> Result<Graph> {
        let mut g = Graph::new();
        let mut ids: HashMap<String, NodeId> = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Graph(format!("line {}: {msg}", lineno + 1));
            if let Some(rest) = line.strip_prefix("output ") {
                let id = *ids
                    .get(rest.trim())
                    .ok_or_else(|| err(format!("unknown node `{}`", rest.trim())))?;
                g.set_output(id)?;
                continue;
            }
            let (lhs, rhs) = line
                .split_once('=')
                .ok_or_else(|| err("expected `name = op args`".into()))?;
            let name = lhs.trim().to_string();
            let mut words = rhs.split_whitespace();
            let kind = words.next().ok_or_else(|| err("missing op".into()))?;
            let mut args = Vec::new();
            let mut kv = HashMap::new();
            for w in words {
                match w.split_once('=') {
                    Some((k, v)) => {
                        kv.insert(k.to_string(), v.to_string());
                    }
                    None => args.push(
                        *ids.get(w)
                            .ok_or_else(|| err(format!("unknown node `{w}`")))?,
                    ),
                }
            }
            let arity = |n: usize| -> Result<()> {
                if args.len() == n {
                    Ok(())
                } else {
                    Err(err(format!("`{kind}` takes {n} operands, got {}", args.len())))
                }
            };
            let usize_key = |key: &str| -> Result<usize> {
                kv.get(key)
                    .ok_or_else(|| err(format!("`{kind}` needs `{key}=`")))?
                    .parse()
                    .map_err(|_| err(format!("bad value for `{key}`")))
            };
            let list_key = |key: &str| -> Result<Vec<usize>> {
                kv.get(key)
                    .ok_or_else(|| err(format!("`{kind}` needs `{key}=`")))?
                    .split(',')
                    .map(|s| s.parse().map_err(|_| err(format!("bad value for `{key}`"))))
                    .collect()
            };
            let op = match kind {
                "input" | "param" => {
                    arity(0)?;
                    Op::Input {
                        name: name.clone(),
                        trainable: kind == "param",
                    }
                }
                "add" => {
                    arity(2)?;
                    Op::Add(args[0], args[1])
                }
                "scale" => {
                    arity(2)?;
                    Op::Scale {
                        input: args[0],
                        factor: args[1],
                    }
                }
                "mul" => {
                    arity(2)?;
                    Op::Mul(args[0], args[1])
                }
                "matmul" => {
                    arity(2)?;
                    Op::MatMul(args[0], args[1])
                }
                "relu" => {
                    arity(1)?;
                    Op::Relu(args[0])
                }
                "abs" => {
                    arity(1)?;
                    Op::Abs(args[0])
                }
                "sum" => {
                    arity(1)?;
                    Op::Sum(args[0])
                }
                "dct" => {
                    arity(1)?;
                    Op::Dct {
                        input: args[0],
                        out_len: usize_key("out")?,
                    }
                }
                "softmax_ce" => {
                    arity(1)?;
                    Op::SoftmaxCrossEntropy {
                        logits: args[0],
                        labels: list_key("labels")?,
                    }
                }
                "reshape" => {
                    arity(1)?;
                    Op::Reshape {
                        input: args[0],
                        shape: list_key("shape")?,
                    }
                }
                "pad" => {
                    arity(1)?;
                    Op::Pad {
                        input: args[0],
                        len: usize_key("len")?,
                    }
                }
                "truncate" => {
                    arity(1)?;
                    Op::Truncate {
                        input: args[0],
                        len: usize_key("len")?,
                    }
                }
                "sparse_matmul" => {
                    arity(2)?;
                    let support = kv
                        .get("support")
                        .map(|s| {
                            s.split(',')
                                .filter(|p| !p.is_empty())
                                .map(|p| {
                                    let (r, c) = p
                                        .split_once(':')
                                        .ok_or_else(|| err(format!("bad coordinate `{p}`")))?;
                                    Ok((
                                        r.parse().map_err(|_| err(format!("bad coordinate `{p}`")))?,
                                        c.parse().map_err(|_| err(format!("bad coordinate `{p}`")))?,
                                    ))
                                })
                                .collect::<Result<Vec<_>>>()
                        })
                        .transpose()?
                        .unwrap_or_default();
                    Op::SparseMatMul {
                        pattern: SparsePattern {
                            rows: usize_key("rows")?,
                            cols: usize_key("cols")?,
                            support,
                        },
                        values: args[0],
                        input: args[1],
                    }
                }
                other => return Err(Error::UnknownOp(other.to_string())),
            };
            let id = g.push(op)?;
            if ids.insert(name.clone(), id).is_some() {
                return Err(err(format!("`{name}` defined twice")));
            }
        }
        Ok(g)
    }
}

/// One forward/backward evaluation of a [`Graph`].
pub struct Tape<'g> {
    graph: &'g Graph,
    values: Vec<Tensor>,
    adjoints: Vec<Tensor>,
    plans: HashMap<usize, DctPlan>,
}

impl<'g> Tape<'g> {
    pub fn new(graph: &'g Graph) -> Self {
        Tape {
            graph,
            values: Vec::new(),
            adjoints: Vec::new(),
            plans: HashMap::new(),
        }
    }

    /// Evaluates the graph and returns the output value (which must be a
    /// one-element tensor).
    pub fn forward(&mut self, inputs: &HashMap<String, Tensor>) -> Result<Tensor> {
        let out_id = self
            .graph
            .output
            .ok_or_else(|| Error::Graph("graph has no nodes".into()))?;
        self.values.clear();
        self.adjoints.clear();
        for op in &self.graph.nodes {
            let v = self.eval(op, inputs)?;
            self.values.push(v);
        }
        let out = self.values[out_id].clone();
        if out.len() != 1 {
            return Err(Error::shape(
                "output",
                format!("loss must be scalar, got shape {:?}", out.shape()),
            ));
        }
        Ok(out)
    }

    /// Cached forward value of a node.
    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.values.get(node)
    }

    /// Accumulated adjoint of a node after `backward`.
    pub fn adjoint(&self, node: NodeId) -> Option<&Tensor> {
        self.adjoints.get(node)
    }

    /// Propagates adjoints from the output and returns the gradient of every
    /// trainable input, keyed by name.
    pub fn backward(&mut self) -> Result<BTreeMap<String, Tensor>> {
        if self.values.len() != self.graph.nodes.len() || self.values.is_empty() {
            return Err(Error::NoForward);
        }
        let out_id = self.graph.output.ok_or(Error::NoForward)?;
        self.adjoints = self.values.iter().map(|v| Tensor::zeros(v.shape())).collect();
        self.adjoints[out_id].data_mut()[0] = 1.0;
        for id in (0..=out_id).rev() {
            let op = &self.graph.nodes[id];
            if matches!(op, Op::Input { .. }) {
                continue;
            }
            let g = std::mem::replace(&mut self.adjoints[id], Tensor::zeros(&[]));
            if g.data().iter().any(|&v| v != 0.0) {
                self.propagate(op, &g)?;
            }
            self.adjoints[id] = g;
        }
        let mut grads = BTreeMap::new();
        for (id, op) in self.graph.nodes.iter().enumerate() {
            if let Op::Input {
                name,
                trainable: true,
            } = op
            {
                grads.insert(name.clone(), self.adjoints[id].clone());
            }
        }
        Ok(grads)
    }

    fn plan(&mut self, q: usize) -> Result<&DctPlan> {
        if !self.plans.contains_key(&q) {
            self.plans.insert(q, DctPlan::new(q)?);
        }
        Ok(&self.plans[&q])
    }

    fn eval(&mut self, op: &Op, inputs: &HashMap<String, Tensor>) -> Result<Tensor> {
        let kind = op.kind();
        let v = |id: NodeId| &self.values[id];
        Ok(match op {
            Op::Input { name, .. } => inputs
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Graph(format!("missing input `{name}`")))?,
            Op::Add(a, b) => {
                let (a, b) = (v(*a), v(*b));
                if a.shape() == b.shape() {
                    zip_map(a, b, |x, y| x + y)
                } else if let Some((rows, cols)) = bias_broadcast(a, b) {
                    let mut out = a.clone();
                    for r in 0..rows {
                        for (o, bv) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(b.data()) {
                            *o += bv;
                        }
                    }
                    out
                } else {
                    return Err(shape_err(kind, a, b));
                }
            }
            Op::Scale { input, factor } => {
                let f = v(*factor);
                if f.len() != 1 {
                    return Err(Error::shape(kind, format!("factor must be scalar, got {:?}", f.shape())));
                }
                let f = f.data()[0];
                v(*input).map(|x| x * f)
            }
            Op::Mul(a, b) => {
                let (a, b) = (v(*a), v(*b));
                if a.shape() != b.shape() {
                    return Err(shape_err(kind, a, b));
                }
                zip_map(a, b, |x, y| x * y)
            }
            Op::Relu(a) => v(*a).map(|x| x.max(0.0)),
            Op::Abs(a) => v(*a).map(f64::abs),
            Op::Sum(a) => Tensor::scalar(v(*a).sum()),
            Op::MatMul(a, b) => {
                let (a, b) = (v(*a), v(*b));
                match (a.rank(), b.rank()) {
                    (2, 2) => a.matmul(b).map_err(|_| shape_err(kind, a, b))?,
                    (2, 1) => {
                        let col = b.reshape(&[b.len(), 1])?;
                        let out = a.matmul(&col).map_err(|_| shape_err(kind, a, b))?;
                        Tensor::vector(out.into_data())
                    }
                    _ => return Err(shape_err(kind, a, b)),
                }
            }
            Op::SparseMatMul {
                pattern,
                values,
                input,
            } => {
                let s = sparse_from(pattern, v(*values))?;
                let x = v(*input);
                let (batch, n) = last_axis(x);
                if n != pattern.cols {
                    return Err(Error::shape(
                        kind,
                        format!("matrix {}x{}, input shape {:?}", pattern.rows, pattern.cols, x.shape()),
                    ));
                }
                let mut out = Vec::with_capacity(batch * pattern.rows);
                for row in x.data().chunks(n) {
                    out.extend(s.spmv(row)?);
                }
                Tensor::new(with_last(x.shape(), pattern.rows), out)?
            }
            Op::Dct { input, out_len } => {
                let x = self.values[*input].clone();
                let (_, n) = last_axis(&x);
                if *out_len == 0 || n == 0 {
                    return Err(Error::shape(kind, format!("input {:?}, out {out_len}", x.shape())));
                }
                let plan = self.plan(n.max(*out_len))?;
                let mut out = Vec::new();
                for row in x.data().chunks(n) {
                    out.extend(plan.rect_apply(row, *out_len)?);
                }
                Tensor::new(with_last(x.shape(), *out_len), out)?
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let z = v(*logits);
                let (batch, classes) = last_axis(z);
                if labels.len() != batch || labels.iter().any(|&l| l >= classes) {
                    return Err(Error::shape(
                        kind,
                        format!("logits {:?}, labels {labels:?}", z.shape()),
                    ));
                }
                let loss: f64 = z
                    .data()
                    .chunks(classes)
                    .zip(labels)
                    .map(|(row, &l)| log_sum_exp(row) - row[l])
                    .sum::<f64>()
                    / batch as f64;
                Tensor::scalar(loss)
            }
            Op::Reshape { input, shape } => v(*input)
                .reshape(shape)
                .map_err(|_| Error::shape(kind, format!("{:?} -> {shape:?}", v(*input).shape())))?,
            Op::Pad { input, len } => {
                let x = v(*input);
                let (_, n) = last_axis(x);
                if *len < n {
                    return Err(Error::shape(kind, format!("{:?} padded to {len}", x.shape())));
                }
                resize_last(x, *len)?
            }
            Op::Truncate { input, len } => {
                let x = v(*input);
                let (_, n) = last_axis(x);
                if *len > n || *len == 0 {
                    return Err(Error::shape(kind, format!("{:?} truncated to {len}", x.shape())));
                }
                resize_last(x, *len)?
            }
        })
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f64]) {
        for (a, d) in self.adjoints[id].data_mut().iter_mut().zip(delta) {
            *a += d;
        }
    }

    fn propagate(&mut self, op: &Op, g: &Tensor) -> Result<()> {
        match op {
            Op::Input { .. } => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g.data());
                if self.values[*b].shape() == g.shape() {
                    self.accumulate(*b, g.data());
                } else {
                    let cols = self.values[*b].len();
                    let mut col_sum = vec![0.0; cols];
                    for row in g.data().chunks(cols) {
                        for (c, x) in col_sum.iter_mut().zip(row) {
                            *c += x;
                        }
                    }
                    self.accumulate(*b, &col_sum);
                }
            }
            Op::Scale { input, factor } => {
                let f = self.values[*factor].data()[0];
                let d_input: Vec<f64> = g.data().iter().map(|x| x * f).collect();
                let d_factor = crate::tensor::dot(self.values[*input].data(), g.data());
                self.accumulate(*input, &d_input);
                self.accumulate(*factor, &[d_factor]);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.data().iter().zip(self.values[*b].data()).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.data().iter().zip(self.values[*a].data()).map(|(x, y)| x * y).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Relu(a) => {
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.values[*a].data())
                    .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                    .collect();
                self.accumulate(*a, &d);
            }
            Op::Abs(a) => {
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.values[*a].data())
                    .map(|(x, &v)| if v > 0.0 { *x } else if v < 0.0 { -*x } else { 0.0 })
                    .collect();
                self.accumulate(*a, &d);
            }
            Op::Sum(a) => {
                let d = vec![g.data()[0]; self.values[*a].len()];
                self.accumulate(*a, &d);
            }
            Op::MatMul(a, b) => {
                let av = self.values[*a].clone();
                let bv = self.values[*b].clone();
                let b2 = if bv.rank() == 1 { bv.reshape(&[bv.len(), 1])? } else { bv };
                let g2 = if g.rank() == 1 { g.reshape(&[g.len(), 1])? } else { g.clone() };
                let da = g2.matmul(&b2.transpose()?)?;
                let db = av.transpose()?.matmul(&g2)?;
                self.accumulate(*a, da.data());
                self.accumulate(*b, db.data());
            }
            Op::SparseMatMul {
                pattern,
                values,
                input,
            } => {
                let s = sparse_from(pattern, &self.values[*values])?;
                let x = self.values[*input].clone();
                let mut dvals = vec![0.0; s.nnz()];
                let mut dx = Vec::with_capacity(x.len());
                let mut ops = 0;
                for (row, up) in x.data().chunks(pattern.cols).zip(g.data().chunks(pattern.rows)) {
                    s.grad_values_add_into(row, up, &mut dvals, &mut ops);
                    dx.extend(s.spmv_t(up)?);
                }
                self.accumulate(*values, &dvals);
                self.accumulate(*input, &dx);
            }
            Op::Dct { input, out_len } => {
                let (_, n) = last_axis(&self.values[*input]);
                let plan = self.plan(n.max(*out_len))?.clone();
                let mut dx = Vec::with_capacity(self.values[*input].len());
                for up in g.data().chunks(*out_len) {
                    dx.extend(plan.rect_apply_t(up, n)?);
                }
                self.accumulate(*input, &dx);
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let z = &self.values[*logits];
                let (batch, classes) = last_axis(z);
                let scale = g.data()[0] / batch as f64;
                let mut d = Vec::with_capacity(z.len());
                for (row, &l) in z.data().chunks(classes).zip(labels) {
                    let p = softmax(row);
                    d.extend(p.iter().enumerate().map(|(c, &pc)| {
                        scale * (pc - if c == l { 1.0 } else { 0.0 })
                    }));
                }
                self.accumulate(*logits, &d);
            }
            Op::Reshape { input, .. } => self.accumulate(*input, g.data()),
            Op::Pad { input, .. } | Op::Truncate { input, .. } => {
                let (_, n) = last_axis(&self.values[*input]);
                let back = resize_last(g, n)?;
                self.accumulate(*input, back.data());
            }
        }
        Ok(())
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape()))
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

fn bias_broadcast(a: &Tensor, b: &Tensor) -> Option<(usize, usize)> {
    match (a.shape(), b.shape()) {
        ([rows, cols], [len]) if cols == len => Some((*rows, *cols)),
        _ => None,
    }
}

/// `(number of rows, length of the last axis)`.
fn last_axis(t: &Tensor) -> (usize, usize) {
    let n = t.shape().last().copied().unwrap_or(1);
    (if n == 0 { 0 } else { t.len() / n }, n)
}

fn with_last(shape: &[usize], len: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(last) => *last = len,
        None => s.push(len),
    }
    s
}

fn resize_last(x: &Tensor, len: usize) -> Result<Tensor> {
    let (_, n) = last_axis(x);
    let mut out = Vec::new();
    for row in x.data().chunks(n) {
        let keep = n.min(len);
        out.extend_from_slice(&row[..keep]);
        out.extend(std::iter::repeat_n(0.0, len - keep));
    }
    Tensor::new(with_last(x.shape(), len), out)
}

fn sparse_from(pattern: &SparsePattern, values: &Tensor) -> Result<SparseMatrix> {
    SparseMatrix::new(
        pattern.rows,
        pattern.cols,
        pattern.support.clone(),
        values.data().to_vec(),
    )
    .map_err(|e| Error::shape("sparse_matmul", e.to_string()))
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| (v - lse).exp()).collect()
}

/// Central-difference gradient `(L(w + eps e_i) - L(w - eps e_i)) / 2 eps`.
pub fn finite_diff_grad<F>(mut loss: F, params: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut w = params.clone();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = w.data()[i];
        w.data_mut()[i] = orig + eps;
        let plus = loss(&w)?;
        w.data_mut()[i] = orig - eps;
        let minus = loss(&w)?;
        w.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss at perturbed coordinate {i}")));
        }
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Tensor::new(params.shape().to_vec(), grad)
}
