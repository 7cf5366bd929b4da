use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{dims2, GradientMap, ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul,
    Add(Broadcast),
    Mul(Broadcast),
    ConcatCols,
    StackRows,
    Tanh,
    Sigmoid,
    RowSoftmax,
    Embedding(Vec<usize>),
    MaxPoolRows(Vec<usize>),
    Dropout(Vec<f64>),
    Scale(f64),
    SliceRows(usize),
    Sum,
    Log,
    Transpose,
    ScatterCols(Vec<usize>),
    GatherCols(Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    requires_grad: bool,
}

/// Ordered record of primitive applications. Entries only ever reference
/// earlier entries, so the node order is a topological order.
#[derive(Debug, Clone)]
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape without parameters; only constants can be leaves.
    pub fn new() -> Self {
        Self {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("parameter leaf without store").get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.value(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).values[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value: Some(value),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------------
    // Leaves
    // ---------------------------------------------------------------------

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Constant, Vec::new(), t.with_requires_grad(false), "constant")
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Result<Var> {
        self.constant(Tensor::zeros(vec![rows, cols]))
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return Ok(v);
        }
        let store = self.params.ok_or(TensorError::Invalid {
            op: "param",
            msg: "tape has no parameter store".into(),
        })?;
        if !store.get(id).is_finite() {
            return Err(TensorError::NonFinite { op: "param" });
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            inputs: Vec::new(),
            value: None,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    // ---------------------------------------------------------------------
    // Primitives
    // ---------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_kernel(&ta.values, &tb.values, m, k, n, &mut out);
        let t = Tensor::matrix(m, n, out)?;
        self.push(Op::MatMul, vec![a, b], t, "matmul")
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, c) = ta.dims2()?;
        let (rb, cb) = tb.dims2()?;
        if ta.shape == tb.shape || (rb, cb) == (r, c) {
            Ok(Broadcast::Same)
        } else if rb == 1 && cb == c {
            Ok(Broadcast::Row)
        } else if tb.len() == 1 {
            Ok(Broadcast::Scalar)
        } else {
            Err(shape_err(op, ta, tb))
        }
    }

    /// Elementwise `a + b`; `b` may be a single row or a single value
    /// broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = self.broadcast_kind("add", a, b)?;
        let t = binary(self.value(a), self.value(b), kind, |x, y| x + y);
        self.push(Op::Add(kind), vec![a, b], t, "add")
    }

    /// Elementwise `a * b` with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = self.broadcast_kind("mul", a, b)?;
        let t = binary(self.value(a), self.value(b), kind, |x, y| x * y);
        self.push(Op::Mul(kind), vec![a, b], t, "mul")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let rows = self.value(*first).dims2()?.0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(shape_err("concat", self.value(*first), self.value(p)));
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let t = Tensor::matrix(rows, cols, out)?;
        self.push(Op::ConcatCols, parts.to_vec(), t, "concat")
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "stack_rows",
            msg: "no inputs".into(),
        })?;
        let cols = self.value(*first).dims2()?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(shape_err("stack_rows", self.value(*first), self.value(p)));
            }
            rows += r;
            out.extend_from_slice(&self.value(p).values);
        }
        let t = Tensor::matrix(rows, cols, out)?;
        self.push(Op::StackRows, parts.to_vec(), t, "stack_rows")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = unary(self.value(a), f64::tanh);
        self.push(Op::Tanh, vec![a], t, "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = unary(self.value(a), sigmoid);
        self.push(Op::Sigmoid, vec![a], t, "sigmoid")
    }

    /// Softmax over each row; the row max is subtracted first.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        let mut out = ta.values.clone();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(if ta.shape.len() == 1 { vec![c] } else { vec![r, c] }, out)?;
        self.push(Op::RowSoftmax, vec![a], t, "row_softmax")
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (n, d) = tt.dims2()?;
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: "empty id list".into(),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(TensorError::Invalid {
                    op: "embedding",
                    msg: format!("id {id} out of range for table of {n} rows"),
                });
            }
            out.extend_from_slice(tt.row_slice(id));
        }
        let t = Tensor::matrix(ids.len(), d, out)?;
        self.push(Op::Embedding(ids.to_vec()), vec![table], t, "embedding")
    }

    /// Column-wise max over each segment `(start, len)` of rows, producing one
    /// output row per segment. An empty segment yields a zero row. Ties go to
    /// the first maximal row.
    pub fn max_pool_rows(&mut self, a: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        let mut out = vec![0.0; segments.len() * c];
        let mut argmax = vec![usize::MAX; segments.len() * c];
        for (s, &(start, len)) in segments.iter().enumerate() {
            if start + len > r {
                return Err(TensorError::Invalid {
                    op: "max_pool_rows",
                    msg: format!("segment {start}+{len} exceeds {r} rows"),
                });
            }
            if len == 0 {
                continue;
            }
            for j in 0..c {
                let mut best = start;
                for i in start + 1..start + len {
                    if ta.values[i * c + j] > ta.values[best * c + j] {
                        best = i;
                    }
                }
                out[s * c + j] = ta.values[best * c + j];
                argmax[s * c + j] = best * c + j;
            }
        }
        let t = Tensor::matrix(segments.len(), c, out)?;
        self.push(Op::MaxPoolRows(argmax), vec![a], t, "max_pool_rows")
    }

    /// Max over all rows of `a`.
    pub fn max_pool(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).dims2()?.0;
        self.max_pool_rows(a, &[(0, r)])
    }

    /// Inverted dropout: each entry is kept with probability `keep` and scaled
    /// by `1/keep`. The mask is drawn from a generator seeded with `seed`.
    pub fn dropout(&mut self, a: Var, keep: f64, seed: u64) -> Result<Var> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("keep probability {keep} outside (0, 1]"),
            });
        }
        let ta = self.value(a);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<f64> = (0..ta.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let values = ta.values.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(ta.shape.clone(), values)?;
        self.push(Op::Dropout(mask), vec![a], t, "dropout")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = unary(self.value(a), |x| x * s);
        self.push(Op::Scale(s), vec![a], t, "scale")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        if len == 0 || start + len > r {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of range for {:?}", start + len, ta.shape),
            });
        }
        let t = Tensor::matrix(len, c, ta.values[start * c..(start + len) * c].to_vec())?;
        self.push(Op::SliceRows(start), vec![a], t, "slice_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).values.iter().sum();
        self.push(Op::Sum, vec![a], Tensor::scalar(s), "sum")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.values.iter().any(|&x| x <= 0.0) {
            return Err(TensorError::Invalid {
                op: "log",
                msg: "non-positive input".into(),
            });
        }
        let t = unary(ta, f64::ln);
        self.push(Op::Log, vec![a], t, "log")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ta.values[i * c + j];
            }
        }
        let t = Tensor::matrix(c, r, out)?;
        self.push(Op::Transpose, vec![a], t, "transpose")
    }

    /// `out[r, index[j]] += a[r, j]` into a `rows x width` result.
    pub fn scatter_cols(&mut self, a: Var, index: &[usize], width: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        if index.len() != c || index.iter().any(|&i| i >= width) {
            return Err(TensorError::Invalid {
                op: "scatter_cols",
                msg: format!(
                    "index of length {} (max {:?}) does not fit {c} columns into width {width}",
                    index.len(),
                    index.iter().max()
                ),
            });
        }
        let mut out = vec![0.0; r * width];
        for i in 0..r {
            for (j, &dst) in index.iter().enumerate() {
                out[i * width + dst] += ta.values[i * c + j];
            }
        }
        let t = Tensor::matrix(r, width, out)?;
        self.push(Op::ScatterCols(index.to_vec()), vec![a], t, "scatter_cols")
    }

    /// `out[r, j] = a[r, index[j]]`.
    pub fn gather_cols(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        if index.is_empty() || index.iter().any(|&i| i >= c) {
            return Err(TensorError::Invalid {
                op: "gather_cols",
                msg: format!("index out of range for {c} columns"),
            });
        }
        let mut out = Vec::with_capacity(r * index.len());
        for i in 0..r {
            out.extend(index.iter().map(|&j| ta.values[i * c + j]));
        }
        let t = Tensor::matrix(r, index.len(), out)?;
        self.push(Op::GatherCols(index.to_vec()), vec![a], t, "gather_cols")
    }

    // ---------------------------------------------------------------------
    // Reverse pass
    // ---------------------------------------------------------------------

    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        let mut map = GradientMap::new();
        self.backward_into(loss, 1.0, &mut map)?;
        Ok(map)
    }

    /// Accumulates `scale * d(loss)/d(param)` into `out`.
    pub fn backward_into(&self, loss: Var, scale: f64, out: &mut GradientMap) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.add_dense(*id, &g, scale),
                op => self.vjp(op, &node.inputs, idx, &g, &mut grads, scale, out),
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn vjp(
        &self,
        op: &Op,
        inputs: &[Var],
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        scale: f64,
        out: &mut GradientMap,
    ) {
        let y = self.nodes[idx].value.as_ref().unwrap();
        match op {
            Op::Constant | Op::Param(_) => unreachable!(),
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = ta.dims2().unwrap();
                let n = tb.cols();
                if self.requires_grad(a) {
                    let ga = self.acc(grads, a);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let bp = &tb.values[p * n..(p + 1) * n];
                            ga[i * k + p] += dot(gi, bp);
                        }
                    }
                }
                if self.requires_grad(b) {
                    let gb = self.acc(grads, b);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ta.values[i * k + p];
                            if aip != 0.0 {
                                axpy(aip, gi, &mut gb[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
            }
            Op::Add(kind) => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.requires_grad(a) {
                    axpy(1.0, g, self.acc(grads, a));
                }
                if self.requires_grad(b) {
                    let c = y.cols();
                    let gb = self.acc(grads, b);
                    reduce_broadcast(*kind, g, c, gb, |gi, _| gi);
                }
            }
            Op::Mul(kind) => {
                let (a, b) = (inputs[0], inputs[1]);
                let (ta, tb) = (self.value(a), self.value(b));
                let c = y.cols();
                if self.requires_grad(a) {
                    let ga = self.acc(grads, a);
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += gi * tb.values[broadcast_index(*kind, i, c)];
                    }
                }
                if self.requires_grad(b) {
                    let gb = self.acc(grads, b);
                    reduce_broadcast(*kind, g, c, gb, |gi, i| gi * ta.values[i]);
                }
            }
            Op::ConcatCols => {
                let rows = y.rows();
                let total = y.cols();
                let mut offset = 0;
                for &p in inputs {
                    let c = self.value(p).cols();
                    if self.requires_grad(p) {
                        let gp = self.acc(grads, p);
                        for r in 0..rows {
                            axpy(
                                1.0,
                                &g[r * total + offset..r * total + offset + c],
                                &mut gp[r * c..(r + 1) * c],
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::StackRows => {
                let mut offset = 0;
                for &p in inputs {
                    let n = self.value(p).len();
                    if self.requires_grad(p) {
                        axpy(1.0, &g[offset..offset + n], self.acc(grads, p));
                    }
                    offset += n;
                }
            }
            Op::Tanh => {
                let ga = self.acc(grads, inputs[0]);
                for ((a, gi), yi) in ga.iter_mut().zip(g).zip(&y.values) {
                    *a += gi * (1.0 - yi * yi);
                }
            }
            Op::Sigmoid => {
                let ga = self.acc(grads, inputs[0]);
                for ((a, gi), yi) in ga.iter_mut().zip(g).zip(&y.values) {
                    *a += gi * yi * (1.0 - yi);
                }
            }
            Op::RowSoftmax => {
                let c = y.cols();
                let ga = self.acc(grads, inputs[0]);
                for ((gr, yr), ar) in g.chunks(c).zip(y.values.chunks(c)).zip(ga.chunks_mut(c)) {
                    let inner = dot(gr, yr);
                    for j in 0..c {
                        ar[j] += yr[j] * (gr[j] - inner);
                    }
                }
            }
            Op::Embedding(ids) => {
                let table = inputs[0];
                let d = y.cols();
                if let Op::Param(pid) = self.nodes[table.0].op {
                    // sparse row gradient straight into the map
                    for (r, &id) in ids.iter().enumerate() {
                        out.add_row(pid, id, d, &g[r * d..(r + 1) * d], scale);
                    }
                } else {
                    let gt = self.acc(grads, table);
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::MaxPoolRows(argmax) => {
                let ga = self.acc(grads, inputs[0]);
                for (gi, &src) in g.iter().zip(argmax) {
                    if src != usize::MAX {
                        ga[src] += gi;
                    }
                }
            }
            Op::Dropout(mask) => {
                let ga = self.acc(grads, inputs[0]);
                for ((a, gi), m) in ga.iter_mut().zip(g).zip(mask) {
                    *a += gi * m;
                }
            }
            Op::Scale(s) => axpy(*s, g, self.acc(grads, inputs[0])),
            Op::SliceRows(start) => {
                let c = y.cols();
                let ga = self.acc(grads, inputs[0]);
                axpy(1.0, g, &mut ga[start * c..start * c + g.len()]);
            }
            Op::Sum => {
                let ga = self.acc(grads, inputs[0]);
                ga.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::Log => {
                let x = &self.value(inputs[0]).values;
                let ga = self.acc(grads, inputs[0]);
                for ((a, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                    *a += gi / xi;
                }
            }
            Op::Transpose => {
                let (r, c) = self.value(inputs[0]).dims2().unwrap();
                let ga = self.acc(grads, inputs[0]);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::ScatterCols(index) => {
                let (r, c) = self.value(inputs[0]).dims2().unwrap();
                let width = y.cols();
                let ga = self.acc(grads, inputs[0]);
                for i in 0..r {
                    for (j, &dst) in index.iter().enumerate() {
                        ga[i * c + j] += g[i * width + dst];
                    }
                }
            }
            Op::GatherCols(index) => {
                let (r, c) = self.value(inputs[0]).dims2().unwrap();
                let n = index.len();
                let ga = self.acc(grads, inputs[0]);
                for i in 0..r {
                    for (j, &src) in index.iter().enumerate() {
                        ga[i * c + src] += g[i * n + j];
                    }
                }
            }
        }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        values: a.values.iter().map(|&x| f(x)).collect(),
        requires_grad: false,
        grad: None,
    }
}

fn broadcast_index(kind: Broadcast, i: usize, cols: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Row => i % cols,
        Broadcast::Scalar => 0,
    }
}

fn binary(a: &Tensor, b: &Tensor, kind: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let c = dims2(&a.shape).map(|d| d.1).unwrap_or(1);
    Tensor {
        shape: a.shape.clone(),
        values: a
            .values
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.values[broadcast_index(kind, i, c)]))
            .collect(),
        requires_grad: false,
        grad: None,
    }
}

/// Sums `term(g[i], i)` into the (possibly broadcast) gradient of the rhs.
fn reduce_broadcast(kind: Broadcast, g: &[f64], cols: usize, gb: &mut [f64], term: impl Fn(f64, usize) -> f64) {
    for (i, &gi) in g.iter().enumerate() {
        gb[broadcast_index(kind, i, cols)] += term(gi, i);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let oi = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], oi);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[0.0, 0.0]])).unwrap();
        let y = t.row_softmax(x).unwrap();
        assert_eq!(t.value(y).values, vec![0.5, 0.5]);
    }

    #[test]
    fn activations_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[0.0]])).unwrap();
        let a = t.tanh(x).unwrap();
        let s = t.sigmoid(x).unwrap();
        assert_eq!(t.value(a).values, vec![0.0]);
        assert_eq!(t.value(s).values, vec![0.5]);
    }

    #[test]
    fn matmul_by_identity() {
        let mut t = Tape::new();
        let a = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let i = t.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let y = t.matmul(a, i).unwrap();
        assert_eq!(t.value(y), t.value(a));
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let err = t.matmul(a, a).unwrap_err();
        assert_eq!(err.to_string(), "matmul: shape mismatch [2, 3] vs [2, 3]");
        let b = t.constant(Tensor::zeros(vec![3, 2])).unwrap();
        assert!(matches!(t.add(a, b), Err(TensorError::Shape { op: "add", .. })));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut t = Tape::new();
        let err = t.constant(Tensor::row(vec![1.0, f64::NAN]).unwrap()).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "constant" });
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let mut t = Tape::with_params(&store);
        let x = t.param(id).unwrap();
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.dense(id, 3).unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![1], vec![2.0]).unwrap());
        let mut t = Tape::with_params(&store);
        let x = t.param(id).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        assert_eq!(t.backward(s).unwrap().dense(id, 1).unwrap(), vec![4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(t.backward(x).unwrap_err(), TensorError::NonScalarLoss(vec![1, 2]));
    }

    #[test]
    fn unused_params_are_absent() {
        let mut store = ParamStore::new();
        let used = store.add("a", Tensor::scalar(1.0));
        let unused = store.add("b", Tensor::scalar(1.0));
        let mut t = Tape::with_params(&store);
        let a = t.param(used).unwrap();
        let _ = t.param(unused).unwrap();
        let s = t.sum(a).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.contains(used));
        assert!(!g.contains(unused));
    }

    #[test]
    fn max_pool_ties_route_to_first_row() {
        let mut store = ParamStore::new();
        let id = store.add("x", m(&[&[1.0, 3.0], &[1.0, 2.0]]));
        let mut t = Tape::with_params(&store);
        let x = t.param(id).unwrap();
        let p = t.max_pool(x).unwrap();
        assert_eq!(t.value(p).values, vec![1.0, 3.0]);
        let s = t.sum(p).unwrap();
        assert_eq!(t.backward(s).unwrap().dense(id, 4).unwrap(), vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_pool_segment_is_zero_row() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0, 3.0]])).unwrap();
        let p = t.max_pool_rows(x, &[(0, 1), (1, 0)]).unwrap();
        assert_eq!(t.value(p).values, vec![1.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_is_inverted_and_seeded() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![1.0; 1000]).unwrap()).unwrap();
        let a = t.dropout(x, 0.8, 7).unwrap();
        let b = t.dropout(x, 0.8, 7).unwrap();
        assert_eq!(t.value(a), t.value(b));
        for &v in &t.value(a).values {
            assert!(v == 0.0 || (v - 1.25).abs() < 1e-15);
        }
        let kept = t.value(a).values.iter().filter(|&&v| v > 0.0).count();
        assert!((700..900).contains(&kept));
        assert!(t.dropout(x, 0.0, 1).is_err());
    }

    #[test]
    fn embedding_out_of_range_rejected() {
        let mut t = Tape::new();
        let table = t.constant(Tensor::zeros(vec![3, 2])).unwrap();
        assert!(t.embedding(table, &[0, 3]).is_err());
    }

    #[test]
    fn embedding_grad_is_sparse_rows() {
        let mut store = ParamStore::new();
        let id = store.add("emb", Tensor::zeros(vec![4, 2]));
        let mut t = Tape::with_params(&store);
        let e = t.param(id).unwrap();
        let rows = t.embedding(e, &[2, 2, 0]).unwrap();
        let s = t.sum(rows).unwrap();
        let g = t.backward(s).unwrap();
        assert!(matches!(g.get(id), Some(super::super::Gradient::Rows { .. })));
        assert_eq!(g.dense(id, 8).unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn scatter_and_gather() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![0.2, 0.5, 0.3]).unwrap()).unwrap();
        let s = t.scatter_cols(x, &[0, 1, 0], 3).unwrap();
        assert_eq!(t.value(s).values, vec![0.5, 0.5, 0.0]);
        let g = t.gather_cols(s, &[1]).unwrap();
        assert_eq!(t.value(g).values, vec![0.5]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![0.0]).unwrap()).unwrap();
        assert!(t.log(x).is_err());
    }
}
