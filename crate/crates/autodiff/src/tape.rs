//! Wengert tape: every op appends a node holding its forward value, and
//! [`Tape::backward`] replays the nodes in reverse to accumulate gradients.
//!
//! Nodes are appended after their inputs, so arena order is already a
//! topological order and the reverse sweep visits each node exactly once.
//! Subgraphs that do not depend on a `requires_grad` leaf are skipped.

use crate::kernels;
use crate::tensor::check_finite;
use crate::{Element, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulT { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: F },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    Gelu { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    ScatterRows { base: Var, src: Var, positions: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<F> },
    Sum { x: Var },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<F: Element = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor<F>, kind: Op<F>, inputs: &[Var]) -> Result<Var> {
        check_finite(op, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::Usage(format!("{op} expects a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        kernels::gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b }, &[a, b])
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_t", a)?;
        let (n, k2) = self.dims2("matmul_t", b)?;
        if k != k2 {
            return Err(shape_err("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        kernels::gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul_t", Tensor::from_parts(vec![m, n], out), Op::MatMulT { a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add", Tensor::from_parts(shape, out), Op::Add { a, b }, &[a, b])
    }

    /// Adds a length-`n` row to every row of an `m×n` matrix (bias add).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = self.dims2("add_row", x)?;
        if self.value(row).numel() != n {
            return Err(shape_err("add_row", self.shape(x), self.shape(row)));
        }
        let mut out = self.value(x).data().to_vec();
        let r = self.value(row).data();
        for chunk in out.chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("add_row", Tensor::from_parts(shape, out), Op::AddRow { x, row }, &[x, row])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", Tensor::from_parts(shape, out), Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = F::lit(c);
        let out: Vec<F> = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", Tensor::from_parts(shape, out), Op::Scale { x, c }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Usage("concat_cols of zero tensors".into()));
        };
        let (m, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != m {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![m, n], out),
            Op::ConcatCols { parts: parts.to_vec() },
            parts,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Usage("concat_rows of zero tensors".into()));
        };
        let (_, n) = self.dims2("concat_rows", first)?;
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != n {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            m += r;
        }
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        self.push(
            "concat_rows",
            Tensor::from_parts(vec![m, n], out),
            Op::ConcatRows { parts: parts.to_vec() },
            parts,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_rows", x)?;
        if len == 0 || start + len > m {
            return Err(TensorError::Usage(format!(
                "slice_rows [{start}, {}) out of range for {m} rows",
                start + len
            )));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        self.push("slice_rows", Tensor::from_parts(vec![len, n], out), Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > n {
            return Err(TensorError::Usage(format!(
                "slice_cols [{start}, {}) out of range for {n} cols",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        self.push("slice_cols", Tensor::from_parts(vec![m, len], out), Op::SliceCols { x, start }, &[x])
    }

    /// Row-wise softmax, stabilised by subtracting each row's max.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Softmax where row `i` only sees columns `0..=i`; later columns get
    /// exactly zero probability.
    pub fn causal_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (m, n) = self.dims2("softmax_rows", x)?;
        if causal && m > n {
            return Err(shape_err("causal_softmax_rows", self.shape(x), &[n, n]));
        }
        check_finite("softmax_rows", self.value(x).data())?;
        let mut out = self.value(x).data().to_vec();
        let offset = n - m;
        for (i, row) in out.chunks_mut(n).enumerate() {
            let valid = if causal { i + offset + 1 } else { n };
            kernels::softmax_in_place(row, valid);
        }
        self.push("softmax_rows", Tensor::from_parts(vec![m, n], out), Op::Softmax { x }, &[x])
    }

    /// Per-row layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2("layer_norm", x)?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = F::lit(eps);
        let inv_n = F::lit(1.0 / n as f64);
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![F::zero(); m * n];
        let mut xhat = vec![F::zero(); m * n];
        let mut rstd = vec![F::zero(); m];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<F>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_n;
            let r = (var + eps).sqrt().recip();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<F> = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("gelu", Tensor::from_parts(shape, out), Op::Gelu { x }, &[x])
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("embedding", table)?;
        if ids.is_empty() {
            return Err(TensorError::Usage("embedding lookup of zero ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(TensorError::Usage(format!("embedding id {bad} out of range for {v} rows")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        self.push(
            "embedding",
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding { table, ids: ids.to_vec() },
            &[table],
        )
    }

    /// Copy of `base` with row `positions[j]` replaced by row `j` of `src`.
    pub fn scatter_rows(&mut self, base: Var, src: Var, positions: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("scatter_rows", base)?;
        let (k, n2) = self.dims2("scatter_rows", src)?;
        if n != n2 || k != positions.len() {
            return Err(shape_err("scatter_rows", self.shape(base), self.shape(src)));
        }
        let mut seen = vec![false; m];
        for &p in positions {
            if p >= m || std::mem::replace(&mut seen[p], true) {
                return Err(TensorError::Usage(format!(
                    "scatter_rows position {p} is out of range or repeated"
                )));
            }
        }
        let mut out = self.value(base).data().to_vec();
        let s = self.value(src).data();
        for (j, &p) in positions.iter().enumerate() {
            out[p * n..(p + 1) * n].copy_from_slice(&s[j * n..(j + 1) * n]);
        }
        self.push(
            "scatter_rows",
            Tensor::from_parts(vec![m, n], out),
            Op::ScatterRows { base, src, positions: positions.to_vec() },
            &[base, src],
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, v) = self.dims2("cross_entropy", logits)?;
        if targets.len() != m {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::Usage(format!("target {bad} out of range for {v} classes")));
        }
        check_finite("cross_entropy", self.value(logits).data())?;
        let mut probs = self.value(logits).data().to_vec();
        let mut total = F::zero();
        for (i, row) in probs.chunks_mut(v).enumerate() {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<F>().ln() + max;
            total += lse - row[targets[i]];
            kernels::softmax_in_place(row, v);
        }
        let loss = total / F::lit(m as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from a scalar output. Gradients accumulate additively
    /// when a node feeds several consumers.
    pub fn backward(&self, output: Var) -> Result<Gradients<F>> {
        if !self.value(output).is_scalar() {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![F::one()]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            self.backprop_node(node, g, before);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if self.wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    kernels::gemm_nt(g, self.value(*b).data(), ga, m, n, k);
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, k * n);
                    kernels::gemm_tn(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulT { a, b } => {
                // c = a · bᵀ with a: m×k, b: n×k
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                if self.wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    kernels::gemm(g, self.value(*b).data(), ga, m, n, k);
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, n * k);
                    kernels::gemm_tn(g, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::AddRow { x, row } => {
                if self.wants(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if self.wants(*row) {
                    let n = self.value(*row).numel();
                    let gr = slot(grads, *row, n);
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let other = self.value(*b).data();
                    let ga = slot(grads, *a, g.len());
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(other) {
                        *o += gi * y;
                    }
                }
                if self.wants(*b) {
                    let other = self.value(*a).data();
                    let gb = slot(grads, *b, g.len());
                    for ((o, &gi), &y) in gb.iter_mut().zip(g).zip(other) {
                        *o += gi * y;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.wants(*x) {
                    let gx = slot(grads, *x, g.len());
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o += gi * *c;
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let m = node.value.rows();
                let n = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let gp = slot(grads, p, m * w);
                        for i in 0..m {
                            add_into(&mut gp[i * w..(i + 1) * w], &g[i * n + offset..i * n + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.wants(p) {
                        add_into(slot(grads, p, len), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let n = node.value.cols();
                    let total = self.value(*x).numel();
                    let gx = slot(grads, *x, total);
                    add_into(&mut gx[start * n..start * n + g.len()], g);
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let len = node.value.cols();
                    let src_cols = self.value(*x).cols();
                    let total = self.value(*x).numel();
                    let gx = slot(grads, *x, total);
                    for (i, chunk) in g.chunks(len).enumerate() {
                        let base = i * src_cols + start;
                        add_into(&mut gx[base..base + len], chunk);
                    }
                }
            }
            Op::Softmax { x } => {
                if self.wants(*x) {
                    let n = node.value.cols();
                    let y = node.value.data();
                    let gx = slot(grads, *x, y.len());
                    for ((yr, gr), out) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yi), &gi) in out.iter_mut().zip(yr).zip(gr) {
                            *o += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = node.value.cols();
                let inv_n = F::lit(1.0 / n as f64);
                if self.wants(*gamma) {
                    let gg = slot(grads, *gamma, n);
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = slot(grads, *beta, n);
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                }
                if self.wants(*x) {
                    let gamma_v = self.value(*gamma).data();
                    let gx = slot(grads, *x, g.len());
                    let mut dxhat = vec![F::zero(); n];
                    for (i, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_d = F::zero();
                        let mut mean_dh = F::zero();
                        for j in 0..n {
                            dxhat[j] = gr[j] * gamma_v[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hr[j];
                        }
                        mean_d *= inv_n;
                        mean_dh *= inv_n;
                        let out = &mut gx[i * n..(i + 1) * n];
                        for j in 0..n {
                            out[j] += rstd[i] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if self.wants(*x) {
                    let xs = self.value(*x).data();
                    let gx = slot(grads, *x, g.len());
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xs) {
                        *o += gi * kernels::gelu_grad(xi);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let d = node.value.cols();
                    let total = self.value(*table).numel();
                    let gt = slot(grads, *table, total);
                    for (j, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[j * d..(j + 1) * d]);
                    }
                }
            }
            Op::ScatterRows { base, src, positions } => {
                let n = node.value.cols();
                if self.wants(*base) {
                    let gb = slot(grads, *base, g.len());
                    add_into(gb, g);
                    for &p in positions {
                        // overwritten rows: undo the pass-through above
                        for j in 0..n {
                            gb[p * n + j] -= g[p * n + j];
                        }
                    }
                }
                if self.wants(*src) {
                    let gs = slot(grads, *src, positions.len() * n);
                    for (j, &p) in positions.iter().enumerate() {
                        add_into(&mut gs[j * n..(j + 1) * n], &g[p * n..(p + 1) * n]);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.wants(*logits) {
                    let v = self.value(*logits).cols();
                    let scale = g[0] / F::lit(targets.len() as f64);
                    let gl = slot(grads, *logits, probs.len());
                    for (i, (pr, out)) in probs.chunks(v).zip(gl.chunks_mut(v)).enumerate() {
                        for (j, (o, &p)) in out.iter_mut().zip(pr).enumerate() {
                            let onehot = if j == targets[i] { F::one() } else { F::zero() };
                            *o += scale * (p - onehot);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    let gx = slot(grads, *x, self.value(*x).numel());
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
        }
    }
}

fn slot<F: Element>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut [F] {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Element>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Element> Gradients<F> {
    /// Gradient buffer of `v`, or `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but materialises zeros for untouched vars.
    pub fn get_or_zeros(&self, tape: &Tape<F>, v: Var) -> Tensor<F> {
        let shape = tape.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, -3.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let y = tape.sum(sq).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, -6.0]);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let c = tape.constant(Tensor::scalar(4.0));
        let grads = tape.backward(c).unwrap();
        let g = grads.get_or_zeros(&tape, x);
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        assert!(matches!(tape.backward(x), Err(TensorError::Usage(_))));
    }

    #[test]
    fn reused_tensor_accumulates_both_paths() {
        // y = sum(x) + sum(3x) -> dy/dx = 4
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap(), true);
        let a = tape.sum(x).unwrap();
        let x3 = tape.scale(x, 3.0).unwrap();
        let b = tape.sum(x3).unwrap();
        let y = tape.add(a, b).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn causal_softmax_masks_future_columns() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::matrix(3, 3, vec![1.0; 9]).unwrap());
        let y = tape.causal_softmax_rows(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&v[3..6], &[0.5, 0.5, 0.0]);
        assert_eq!(v[8] + v[7] + v[6], 1.0);
    }

    #[test]
    fn scatter_rejects_duplicate_positions() {
        let mut tape = Tape::<f32>::new();
        let base = tape.constant(Tensor::zeros(&[3, 2]));
        let src = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(tape.scatter_rows(base, src, &[1, 1]).is_err());
        assert!(tape.scatter_rows(base, src, &[0, 2]).is_ok());
    }

    #[test]
    fn nan_is_rejected_at_op_boundary() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::scalar(f32::MAX));
        let err = tape.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { op: "scale" }));
    }
}
