use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Vec<f64>),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    Gather(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm(Var, f64),
    Sum(Var),
    Mean(Var),
    WeightedPick(Var, Vec<(usize, usize, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations as they are evaluated.
///
/// Every operation computes its value eagerly and appends a record; the
/// record order is a topological order, so [`Tape::backward`] is one reverse
/// sweep. A tape is meant to be built, differentiated once and dropped.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`. Values that did not influence the
    /// loss, or that were recorded without `requires_grad`, get zeros.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    pub(crate) fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads[var.0].take()
    }
}

fn expect_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("output of {op}")))
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    /// Records a trainable input.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_grad(), Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    /// Copy of `var` cut off from gradient flow.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        let value = Tensor::from_parts(value.shape().to_vec(), value.into_values());
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (kb, n)) = (ta.dims2(), tb.dims2());
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(ta.values(), m, k),
            MatRef::new(tb.values(), k, n),
            &mut out,
            0.0,
        );
        check_finite("matmul", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (n, kb)) = (ta.dims2(), tb.dims2());
        if k != kb {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} x {:?}ᵀ", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(ta.values(), m, k),
            MatRef::new(tb.values(), n, k).t(),
            &mut out,
            0.0,
        );
        check_finite("matmul_t", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_same(name, ta, tb)?;
        let out: Vec<f64> = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        check_finite(name, &out)?;
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the single row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, n) = ta.dims2();
        if tb.len() != n {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = ta.values().to_vec();
        if n > 0 {
            for row in out.chunks_exact_mut(n) {
                row.iter_mut().zip(tb.values()).for_each(|(o, b)| *o += b);
            }
        }
        check_finite("add_row", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::AddRow(a, b), rg))
    }

    /// Multiplies every row of `a` elementwise by the single row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, n) = ta.dims2();
        if tb.len() != n {
            return Err(Error::shape(
                "mul_row",
                format!("{:?} * row {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = ta.values().to_vec();
        if n > 0 {
            for row in out.chunks_exact_mut(n) {
                row.iter_mut().zip(tb.values()).for_each(|(o, b)| *o *= b);
            }
        }
        check_finite("mul_row", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MulRow(a, b), rg))
    }

    /// Multiplies row `i` of `a` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        if factors.len() != m {
            return Err(Error::shape(
                "scale_rows",
                format!("{} factors for {:?}", factors.len(), ta.shape()),
            ));
        }
        let mut out = ta.values().to_vec();
        if n > 0 {
            for (row, f) in out.chunks_exact_mut(n).zip(&factors) {
                row.iter_mut().for_each(|v| *v *= f);
            }
        }
        check_finite("scale_rows", &out)?;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::ScaleRows(a, factors), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * factor, Op::Scale(a, factor))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ta = self.value(a);
        let out: Vec<f64> = ta.values().iter().map(|&x| f(x)).collect();
        check_finite(name, &out)?;
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    /// Natural log; non-positive inputs are a [`Error::NonFinite`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    /// `max(a, floor)`; clamped entries pass no gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary("clamp_min", a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let m = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if r != m {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts {m} vs {r}"),
                ));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).values()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        if start > end || end > n {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {:?}", ta.shape()),
            ));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&ta.values()[i * n + start..i * n + end]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![m, w], out),
            Op::SliceCols(a, start, end),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let n = self.value(first).cols();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if c != n {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column counts {n} vs {c}"),
                ));
            }
            m += r;
        }
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).values());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        if start > end || end > m {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{end} of {:?}", ta.shape()),
            ));
        }
        let out = ta.values()[start * n..end * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![end - start, n], out),
            Op::SliceRows(a, start, end),
            rg,
        ))
    }

    /// Row lookup: output row `i` is row `ids[i]` of `table`.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = tt.dims2();
        if let Some((pos, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= v) {
            return Err(Error::shape(
                "gather",
                format!("id {id} at position {pos} out of range for {v} rows"),
            ));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in &ids {
            out.extend_from_slice(tt.row_slice(id));
        }
        let rg = self.rg(table);
        let m = ids.len();
        Ok(self.push(
            Tensor::from_parts(vec![m, d], out),
            Op::Gather(table, ids),
            rg,
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Row-wise softmax restricted to columns where `keep[j]` is true; the
    /// other columns get exactly zero weight.
    pub fn masked_softmax(&mut self, a: Var, keep: Vec<bool>) -> Result<Var> {
        let n = self.value(a).cols();
        if keep.len() != n {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask of length {} for {n} columns", keep.len()),
            ));
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::shape("masked_softmax", "every column is masked"));
        }
        self.softmax_impl(a, Some(keep))
    }

    fn softmax_impl(&mut self, a: Var, keep: Option<Vec<bool>>) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        let mut out = vec![0.0; m * n];
        let kept = |j: usize| keep.as_ref().is_none_or(|k| k[j]);
        for i in 0..m {
            let row = &ta.values()[i * n..(i + 1) * n];
            let o = &mut out[i * n..(i + 1) * n];
            let mx = (0..n)
                .filter(|&j| kept(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in (0..n).filter(|&j| kept(j)) {
                o[j] = (row[j] - mx).exp();
                total += o[j];
            }
            o.iter_mut().for_each(|v| *v /= total);
        }
        check_finite("softmax", &out)?;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Softmax(a), rg))
    }

    /// Row-wise standardisation `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        if n == 0 {
            return Err(Error::shape("layer_norm", "zero-width rows"));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &ta.values()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (x - mean) * inv;
            }
        }
        check_finite("layer_norm", &out)?;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::LayerNorm(a, eps), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).values().iter().sum();
        check_finite("sum", &[s])?;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![], vec![s]), Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let s = ta.values().iter().sum::<f64>() / ta.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![], vec![s]), Op::Mean(a), rg))
    }

    /// Scalar `Σ w · a[row, col]` over the given `(row, col, w)` triples.
    pub fn weighted_pick(&mut self, a: Var, picks: Vec<(usize, usize, f64)>) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        let mut s = 0.0;
        for &(r, c, w) in &picks {
            if r >= m || c >= n {
                return Err(Error::shape(
                    "weighted_pick",
                    format!("index ({r}, {c}) outside {:?}", ta.shape()),
                ));
            }
            s += w * ta.get(r, c);
        }
        check_finite("weighted_pick", &[s])?;
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![], vec![s]),
            Op::WeightedPick(a, picks),
            rg,
        ))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lt.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only leaves are meaningful to callers but intermediate gradients are
        // kept; they are cheap relative to the forward values.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.values();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ((m, k), (_, n)) = (ta.dims2(), tb.dims2());
                let gm = MatRef::new(g, m, n);
                acc(*a, &mut |buf| {
                    gemm(gm, MatRef::new(tb.values(), k, n).t(), buf, 1.0)
                });
                acc(*b, &mut |buf| {
                    gemm(MatRef::new(ta.values(), m, k).t(), gm, buf, 1.0)
                });
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ((m, k), (n, _)) = (ta.dims2(), tb.dims2());
                let gm = MatRef::new(g, m, n);
                acc(*a, &mut |buf| gemm(gm, MatRef::new(tb.values(), n, k), buf, 1.0));
                acc(*b, &mut |buf| {
                    gemm(gm.t(), MatRef::new(ta.values(), m, k), buf, 1.0)
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, g)| *o -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).values(), self.value(*b).values());
                acc(*a, &mut |buf| {
                    for ((o, g), y) in buf.iter_mut().zip(g).zip(vb) {
                        *o += g * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, g), x) in buf.iter_mut().zip(g).zip(va) {
                        *o += g * x;
                    }
                });
            }
            Op::AddRow(a, b) => {
                let n = self.value(*b).len();
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| {
                    if n > 0 {
                        for row in g.chunks_exact(n) {
                            add_into(buf, row);
                        }
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (va, vb) = (self.value(*a).values(), self.value(*b).values());
                let n = vb.len();
                if n > 0 {
                    acc(*a, &mut |buf| {
                        for (o, gr) in buf.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                            for ((o, g), w) in o.iter_mut().zip(gr).zip(vb) {
                                *o += g * w;
                            }
                        }
                    });
                    acc(*b, &mut |buf| {
                        for (gr, xr) in g.chunks_exact(n).zip(va.chunks_exact(n)) {
                            for ((o, g), x) in buf.iter_mut().zip(gr).zip(xr) {
                                *o += g * x;
                            }
                        }
                    });
                }
            }
            Op::ScaleRows(a, factors) => {
                let n = self.value(*a).cols();
                acc(*a, &mut |buf| {
                    if n > 0 {
                        for ((o, g), f) in buf.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(factors) {
                            o.iter_mut().zip(g).for_each(|(o, g)| *o += g * f);
                        }
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |buf| {
                buf.iter_mut().zip(g).for_each(|(o, g)| *o += g * f)
            }),
            Op::Sigmoid(a) => acc(*a, &mut |buf| {
                for ((o, g), y) in buf.iter_mut().zip(g).zip(y) {
                    *o += g * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |buf| {
                for ((o, g), y) in buf.iter_mut().zip(g).zip(y) {
                    *o += g * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => {
                let x = self.value(*a).values();
                acc(*a, &mut |buf| {
                    for ((o, g), x) in buf.iter_mut().zip(g).zip(x) {
                        if *x > 0.0 {
                            *o += g;
                        }
                    }
                })
            }
            Op::Exp(a) => acc(*a, &mut |buf| {
                for ((o, g), y) in buf.iter_mut().zip(g).zip(y) {
                    *o += g * y;
                }
            }),
            Op::Log(a) => {
                let x = self.value(*a).values();
                acc(*a, &mut |buf| {
                    for ((o, g), x) in buf.iter_mut().zip(g).zip(x) {
                        *o += g / x;
                    }
                })
            }
            Op::ClampMin(a, floor) => {
                let x = self.value(*a).values();
                acc(*a, &mut |buf| {
                    for ((o, g), x) in buf.iter_mut().zip(g).zip(x) {
                        if *x > *floor {
                            *o += g;
                        }
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |buf| {
                        for i in 0..m {
                            add_into(
                                &mut buf[i * w..(i + 1) * w],
                                &g[i * n + offset..i * n + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let n = self.value(*a).cols();
                let w = end - start;
                acc(*a, &mut |buf| {
                    if w > 0 {
                        for (i, gr) in g.chunks_exact(w).enumerate() {
                            add_into(&mut buf[i * n + start..i * n + end], gr);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |buf| add_into(buf, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows(a, start, end) => {
                let n = self.value(*a).cols();
                acc(*a, &mut |buf| add_into(&mut buf[start * n..end * n], g));
            }
            Op::Gather(table, ids) => {
                let d = self.value(*table).cols();
                acc(*table, &mut |buf| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                acc(*a, &mut |buf| {
                    if n == 0 {
                        return;
                    }
                    for ((o, gr), yr) in buf.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((o, g), y) in o.iter_mut().zip(gr).zip(yr) {
                            *o += y * (g - dot);
                        }
                    }
                });
            }
            Op::LayerNorm(a, eps) => {
                let x = self.value(*a).values();
                let n = node.value.cols();
                acc(*a, &mut |buf| {
                    for (((o, gr), yr), xr) in buf
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                        .zip(x.chunks_exact(n))
                    {
                        let nf = n as f64;
                        let mean = xr.iter().sum::<f64>() / nf;
                        let var = xr.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_mean = gr.iter().sum::<f64>() / nf;
                        let gy_mean = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / nf;
                        for ((o, g), y) in o.iter_mut().zip(gr).zip(yr) {
                            *o += inv * (g - g_mean - y * gy_mean);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g0));
            }
            Op::Mean(a) => {
                let len = self.value(*a).len() as f64;
                let g0 = g[0] / len;
                acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g0));
            }
            Op::WeightedPick(a, picks) => {
                let n = self.value(*a).cols();
                let g0 = g[0];
                acc(*a, &mut |buf| {
                    for &(r, c, w) in picks {
                        buf[r * n + c] += g0 * w;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
