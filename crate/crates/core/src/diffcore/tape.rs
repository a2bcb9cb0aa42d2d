use std::collections::BTreeMap;

use super::array::{matmul_at_raw, matmul_bt_raw, matmul_raw};
use super::{ParamSet, RealArray};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_test(id: usize) -> Self {
        Var(id)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param(String),
    Constant,
    Add(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Gather { table: Var, ids: Vec<usize> },
    Tanh(Var),
    Softmax(Var),
    Log { input: Var, floor: f64 },
    Sum(Var),
    Scale(Var, f64),
    Sqrt { input: Var, floor: f64 },
    L2Norm(Var),
    Concat(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Gather { .. } => "gather",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::Log { .. } => "log",
            Op::Sum(_) => "sum",
            Op::Scale(..) => "scale",
            Op::Sqrt { .. } => "sqrt",
            Op::L2Norm(_) => "l2norm",
            Op::Concat(_) => "concat",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: RealArray,
    /// Whether any parameter leaf feeds this node.
    needs_grad: bool,
}

/// Define-by-run reverse-mode tape.
///
/// Nodes are appended in evaluation order, so every input id is smaller than
/// the id of the node that consumes it.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<RealArray>>>,
    log_floor_hits: usize,
}

/// Parameter handles bound onto a tape, by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))
    }
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

    pub fn value(&self, v: Var) -> &RealArray {
        &self.nodes[v.0].value
    }

    /// Number of `log` evaluations whose input fell below the floor.
    pub fn log_floor_hits(&self) -> usize {
        self.log_floor_hits
    }

    fn push(&mut self, op: Op, value: RealArray) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite { node: id, op: op.name() });
        }
        self.grads = None;
        let needs_grad = match &op {
            Op::Param(_) => true,
            Op::Constant => false,
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => self.needs(*a) || self.needs(*b),
            Op::Gather { table: a, .. }
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::Log { input: a, .. }
            | Op::Sum(a)
            | Op::Scale(a, _)
            | Op::Sqrt { input: a, .. }
            | Op::L2Norm(a) => self.needs(*a),
            Op::Concat(parts) => parts.iter().any(|p| self.needs(*p)),
        };
        self.nodes.push(Node { op, value, needs_grad });
        Ok(Var(id))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::State(format!("node {} is not on this tape", v.0)))
        }
    }

    pub fn param(&mut self, name: impl Into<String>, value: RealArray) -> Result<Var> {
        self.push(Op::Param(name.into()), value)
    }

    /// Records every parameter of `params` as a leaf.
    pub fn bind(&mut self, params: &ParamSet) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, value) in params.iter() {
            let v = self.param(name, value.clone())?;
            vars.insert(name.to_string(), v);
        }
        Ok(Bound { vars })
    }

    pub fn constant(&mut self, value: RealArray) -> Result<Var> {
        self.push(Op::Constant, value)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<f64> = va.values().iter().zip(vb.values()).map(|(x, y)| x + y).collect();
        let shape = va.shape().to_vec();
        self.push(Op::Add(a, b), RealArray::from_parts(shape, out))
    }

    /// `a - b`, recorded as `add(a, scale(b, -1))`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<f64> = va.values().iter().zip(vb.values()).map(|(x, y)| x * y).collect();
        let shape = va.shape().to_vec();
        self.push(Op::Mul(a, b), RealArray::from_parts(shape, out))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let out = matmul_raw(va.values(), vb.values(), n, k, m);
        self.push(Op::MatMul(a, b), RealArray::from_parts(vec![n, m], out))
    }

    /// Selects rows `ids` of a 2-D `table`, giving `ids.len() x cols`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(table)?;
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!("gather: table must be 2-D, got {:?}", t.shape())));
        }
        if ids.is_empty() {
            return Err(Error::Shape("gather: empty id list".into()));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Shape(format!("gather: id {id} out of range {rows}")));
            }
            out.extend_from_slice(t.row_slice(id));
        }
        let value = RealArray::from_parts(vec![ids.len(), cols], out);
        self.push(Op::Gather { table, ids: ids.to_vec() }, value)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    /// Softmax over the last axis, independently per row.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        let mut out = vec![0.0; va.len()];
        for r in 0..rows {
            let x = va.row_slice(r);
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for (oi, &xi) in o.iter_mut().zip(x) {
                *oi = (xi - max).exp();
                z += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= z;
            }
        }
        let shape = va.shape().to_vec();
        self.push(Op::Softmax(a), RealArray::from_parts(shape, out))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.log_floored(a, 0.0)
    }

    /// `log(max(x, floor))`; inputs below the floor get zero gradient and
    /// are counted in [`Tape::log_floor_hits`].
    pub fn log_floored(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        let hits = va.values().iter().filter(|&&x| x < floor).count();
        let value = va.map(|x| x.max(floor).ln());
        self.log_floor_hits += hits;
        self.push(Op::Log { input: a, floor }, value)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s: f64 = self.value(a).values().iter().sum();
        self.push(Op::Sum(a), RealArray::from_parts(vec![1], vec![s]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        if !c.is_finite() {
            return Err(Error::Invalid("scale factor must be finite".into()));
        }
        let value = self.value(a).map(|x| c * x);
        self.push(Op::Scale(a, c), value)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.sqrt_floored(a, 0.0)
    }

    /// `sqrt(max(x, floor))`. The derivative factor `1 / (2 sqrt(x))` is
    /// applied only where `x >= floor`, which caps it at `1 / (2 sqrt(floor))`.
    pub fn sqrt_floored(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(|x| x.max(floor).sqrt());
        self.push(Op::Sqrt { input: a, floor }, value)
    }

    /// Euclidean norm of all entries, as a scalar.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let n = self.value(a).values().iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push(Op::L2Norm(a), RealArray::from_parts(vec![1], vec![n]))
    }

    /// Concatenates along the first axis. All parts must agree on the
    /// trailing extents (for 1-D parts, plain concatenation).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat: no inputs".into()))?;
        for &p in parts {
            self.check(p)?;
        }
        let tail = self.value(first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] {
                return Err(Error::Shape(format!(
                    "concat: trailing extents {:?} vs {:?}",
                    &v.shape()[1..],
                    tail
                )));
            }
            lead += v.shape()[0];
            out.extend_from_slice(v.values());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push(Op::Concat(parts.to_vec()), RealArray::from_parts(shape, out))
    }

    /// Accumulates gradients of the scalar node `output` into every node
    /// reachable from it. Nodes are visited in reverse insertion order, so the
    /// accumulation order is fixed.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called on an empty tape".into()));
        }
        self.check(output)?;
        if self.value(output).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<RealArray>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(RealArray::filled(self.value(output).shape(), 1.0));

        for id in (0..=output.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Param(_) | Op::Constant => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, &self.nodes, *a, g.values());
                    accumulate(&mut grads, &self.nodes, *b, g.values());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga: Vec<f64> = g.values().iter().zip(vb.values()).map(|(d, y)| d * y).collect();
                    let gb: Vec<f64> = g.values().iter().zip(va.values()).map(|(d, x)| d * x).collect();
                    accumulate(&mut grads, &self.nodes, *a, &ga);
                    accumulate(&mut grads, &self.nodes, *b, &gb);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    if self.needs(*a) {
                        let ga = matmul_bt_raw(g.values(), vb.values(), n, m, k);
                        accumulate(&mut grads, &self.nodes, *a, &ga);
                    }
                    if self.needs(*b) {
                        let gb = matmul_at_raw(va.values(), g.values(), n, k, m);
                        accumulate(&mut grads, &self.nodes, *b, &gb);
                    }
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let cols = tv.cols();
                    let mut gt = vec![0.0; tv.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g.values()[r * cols..(r + 1) * cols];
                        for (d, s) in gt[id * cols..(id + 1) * cols].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *table, &gt);
                }
                Op::Tanh(a) => {
                    let ga: Vec<f64> = g
                        .values()
                        .iter()
                        .zip(node.value.values())
                        .map(|(d, y)| d * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads, &self.nodes, *a, &ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let (rows, cols) = (y.rows(), y.cols());
                    let mut ga = vec![0.0; y.len()];
                    for r in 0..rows {
                        let yr = y.row_slice(r);
                        let dr = &g.values()[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                        for c in 0..cols {
                            ga[r * cols + c] = yr[c] * (dr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *a, &ga);
                }
                Op::Log { input, floor } => {
                    let x = self.value(*input);
                    let ga: Vec<f64> = g
                        .values()
                        .iter()
                        .zip(x.values())
                        .map(|(d, &xi)| if xi >= *floor && xi > 0.0 { d / xi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, &self.nodes, *input, &ga);
                }
                Op::Sum(a) => {
                    let d = g.values()[0];
                    let n = self.value(*a).len();
                    accumulate(&mut grads, &self.nodes, *a, &vec![d; n]);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.values().iter().map(|d| c * d).collect();
                    accumulate(&mut grads, &self.nodes, *a, &ga);
                }
                Op::Sqrt { input, floor } => {
                    let x = self.value(*input);
                    let ga: Vec<f64> = g
                        .values()
                        .iter()
                        .zip(x.values())
                        .zip(node.value.values())
                        .map(|((d, &xi), &yi)| {
                            if xi >= *floor && yi > 0.0 {
                                d * 0.5 / yi
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads, &self.nodes, *input, &ga);
                }
                Op::L2Norm(a) => {
                    let norm = node.value.values()[0];
                    let d = g.values()[0];
                    let x = self.value(*a);
                    let ga: Vec<f64> = if norm > 0.0 {
                        x.values().iter().map(|xi| d * xi / norm).collect()
                    } else {
                        vec![0.0; x.len()]
                    };
                    accumulate(&mut grads, &self.nodes, *a, &ga);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        accumulate(&mut grads, &self.nodes, *p, &g.values()[offset..offset + n]);
                        offset += n;
                    }
                }
            }
            grads[id] = Some(g);
        }

        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite { node: id, op: self.nodes[id].op.name() });
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the last `backward` output with respect to node `v`.
    pub fn grad(&self, v: Var) -> Result<Option<&RealArray>> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::State("gradients requested before backward".into()))?;
        Ok(grads.get(v.0).and_then(Option::as_ref))
    }

    /// Gradients for every parameter leaf, summed over repeated bindings of
    /// the same name. Parameters not reached by the output get zeros.
    pub fn param_gradients(&self) -> Result<ParamSet> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::State("gradients requested before backward".into()))?;
        let mut out: BTreeMap<String, RealArray> = BTreeMap::new();
        for (node, g) in self.nodes.iter().zip(grads) {
            if let Op::Param(name) = &node.op {
                let entry = out
                    .entry(name.clone())
                    .or_insert_with(|| RealArray::zeros(node.value.shape()));
                if let Some(g) = g {
                    for (d, s) in entry.values_mut().iter_mut().zip(g.values()) {
                        *d += s;
                    }
                }
            }
        }
        Ok(out.into_iter().collect())
    }
}

fn accumulate(grads: &mut [Option<RealArray>], nodes: &[Node], target: Var, delta: &[f64]) {
    if !nodes[target.0].needs_grad {
        return;
    }
    match &mut grads[target.0] {
        Some(g) => {
            for (d, s) in g.values_mut().iter_mut().zip(delta) {
                *d += s;
            }
        }
        slot @ None => {
            let shape = nodes[target.0].value.shape().to_vec();
            *slot = Some(RealArray::from_parts(shape, delta.to_vec()));
        }
    }
}
