//! Minimal dense-tensor arithmetic with tape-based reverse-mode differentiation.
//!
//! The op set is exactly what the model needs: matmul (plain and transposed),
//! elementwise add/sub/mul, scalar ops, softmax over the last axis, layer
//! normalization, GELU, concatenate, slice, row gather, reductions,
//! patch-grid reshuffles and the complex-pair rotation used by RoPE.
//! Everything is 64-bit; the tape is rebuilt per forward pass.

use crate::error::{Error, Result};

/// A plain dense value: row-major f64 data plus a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows/cols view of a 2D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::invalid(format!("expected 2D tensor, got {:?}", other))),
        }
    }

    fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    /// C = A · Bᵀ where B is stored row-major [n, k].
    MatmulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// Broadcast a row vector over every row of a 2D tensor.
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    AddScalar { a: Var },
    MulScalar { a: Var, c: f64 },
    /// Broadcast-multiply by a one-element tensor (differentiable scalar).
    MulScalarVar { a: Var, s: Var },
    Recip { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Sqrt { a: Var },
    Gelu { a: Var },
    Softmax { a: Var },
    LayerNorm { a: Var, floor: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    Slice2d { a: Var, r0: usize, c0: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    SumAll { a: Var },
    MeanAll { a: Var },
    SumLast { a: Var },
    /// Rotate consecutive channel pairs by fixed per-pair angles.
    RotatePairs { a: Var, angles: Vec<f64> },
    /// [T, p²·ch] token grid -> [H·W, ch] pixel grid.
    Unpatchify { a: Var, grid_h: usize, grid_w: usize, patch: usize, ch: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A single-use computation tape. Build a forward pass, call
/// [`Tape::backward`] on a scalar, then read gradients per leaf.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// A[m,k] · B[n,k]ᵀ -> [m,n]
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// A[m,k]ᵀ · G[m,n] -> [k,n]
fn matmul_tn_raw(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in c_row.iter_mut().zip(g_row) {
                *cv += av * gv;
            }
        }
    }
    c
}

fn softmax_rows(data: &[f64], last: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, out_row) in data.chunks(last).zip(out.chunks_mut(last)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &x) in out_row.iter_mut().zip(row) {
            *o = (x - max).exp();
            sum += *o;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: None,
        }
    }

    /// Insert a leaf value. Every leaf receives a gradient on backward.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward target with respect to `v`.
    ///
    /// Panics if called before [`Tape::backward`].
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.grads.as_ref().expect("backward() not run")[v.0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.grads = None;
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::Matmul { a, b }))
    }

    /// `a · bᵀ` with `b` stored row-major `[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let data = matmul_nt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::MatmulNT { a, b }))
    }

    fn zip_elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op_name, a, b));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn row_broadcast(
        &mut self,
        op_name: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (_, d) = self.value(a).dims2().map_err(|_| self.mismatch(op_name, a, row))?;
        if self.value(row).numel() != d {
            return Err(self.mismatch(op_name, a, row));
        }
        let rowv = self.value(row).data().to_vec();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(d)
            .flat_map(|r| r.iter().zip(&rowv).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>())
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, op))
    }

    /// `[n,d] + [d]` (bias add over rows).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, |x, y| x + y, Op::AddRow { a, row })
    }

    /// `[n,d] ∘ [d]` (per-channel scale over rows).
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, |x, y| x * y, Op::MulRow { a, row })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::AddScalar { a })
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::MulScalar { a, c })
    }

    /// Broadcast-multiply by a one-element tensor; gradients flow to both.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(self.mismatch("mul_scalar_var", a, s));
        }
        let sv = self.value(s).data()[0];
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x * sv).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::MulScalarVar { a, s }))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| 1.0 / x).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::Recip { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::Log { a })
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x.sqrt()).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::Sqrt { a })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::Gelu { a })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let last = self.value(a).last_dim();
        let data = softmax_rows(self.value(a).data(), last);
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::Softmax { a })
    }

    /// Layer normalization over the last axis, no affine part.
    ///
    /// The variance floor defines the constant-input case: a constant row
    /// normalizes to exactly zero.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        const FLOOR: f64 = 1e-6;
        let last = self.value(a).last_dim();
        let mut data = vec![0.0; self.value(a).numel()];
        for (row, out) in self.value(a).data().chunks(last).zip(data.chunks_mut(last)) {
            let n = last as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let denom = var.max(FLOOR).sqrt();
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - mean) / denom;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::LayerNorm { a, floor: FLOOR })
    }

    /// Concatenate 2D tensors along `axis` (0 = rows, 1 = cols); 1D along 0.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let first_shape = self.shape(parts[0]).to_vec();
        if first_shape.len() == 1 {
            if axis != 0 {
                return Err(Error::invalid("1D concat supports axis 0 only"));
            }
            let mut data = Vec::new();
            for &p in parts {
                if self.shape(p).len() != 1 {
                    return Err(self.mismatch("concat", parts[0], p));
                }
                data.extend_from_slice(self.value(p).data());
            }
            let n = data.len();
            return Ok(self.push(
                Tensor { shape: vec![n], data },
                Op::Concat { parts: parts.to_vec(), axis },
            ));
        }
        match axis {
            0 => {
                let cols = first_shape[1];
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let (r, c) = self.value(p).dims2()?;
                    if c != cols {
                        return Err(self.mismatch("concat", parts[0], p));
                    }
                    rows += r;
                    data.extend_from_slice(self.value(p).data());
                }
                Ok(self.push(
                    Tensor { shape: vec![rows, cols], data },
                    Op::Concat { parts: parts.to_vec(), axis },
                ))
            }
            1 => {
                let rows = first_shape[0];
                let mut cols = 0;
                for &p in parts {
                    let (r, c) = self.value(p).dims2()?;
                    if r != rows {
                        return Err(self.mismatch("concat", parts[0], p));
                    }
                    cols += c;
                }
                let mut data = vec![0.0; rows * cols];
                let mut col0 = 0;
                for &p in parts {
                    let (_, c) = self.value(p).dims2()?;
                    for i in 0..rows {
                        let src = &self.value(p).data()[i * c..(i + 1) * c];
                        data[i * cols + col0..i * cols + col0 + c].copy_from_slice(src);
                    }
                    col0 += c;
                }
                Ok(self.push(
                    Tensor { shape: vec![rows, cols], data },
                    Op::Concat { parts: parts.to_vec(), axis },
                ))
            }
            _ => Err(Error::invalid(format!("concat axis {axis} out of range"))),
        }
    }

    /// Rectangular slice of a 2D tensor.
    pub fn slice2d(&mut self, a: Var, r0: usize, nr: usize, c0: usize, nc: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        if r0 + nr > rows || c0 + nc > cols {
            return Err(Error::invalid(format!(
                "slice [{r0}..{}, {c0}..{}] out of bounds for [{rows}, {cols}]",
                r0 + nr,
                c0 + nc
            )));
        }
        let mut data = Vec::with_capacity(nr * nc);
        for i in r0..r0 + nr {
            data.extend_from_slice(&self.value(a).data()[i * cols + c0..i * cols + c0 + nc]);
        }
        Ok(self.push(Tensor { shape: vec![nr, nc], data }, Op::Slice2d { a, r0, c0 }))
    }

    /// Select rows of a 2D tensor (or elements of a 1D tensor) by index.
    /// Duplicate indices accumulate gradient.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = match shape.as_slice() {
            [n] => (*n, 1),
            [n, d] => (*n, *d),
            other => return Err(Error::invalid(format!("gather_rows on shape {other:?}"))),
        };
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("gather index {bad} >= {rows}")));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&self.value(a).data()[i * cols..(i + 1) * cols]);
        }
        let out_shape = if shape.len() == 1 {
            vec![idx.len()]
        } else {
            vec![idx.len(), cols]
        };
        Ok(self.push(
            Tensor { shape: out_shape, data },
            Op::GatherRows { a, idx: idx.to_vec() },
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.value(a).data().iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::MeanAll { a })
    }

    /// Sum over the last axis: `[n,d] -> [n]`, `[d] -> [1]`.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let last = self.value(a).last_dim();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(last)
            .map(|row| row.iter().sum())
            .collect();
        let n = data.len();
        self.push(Tensor { shape: vec![n], data }, Op::SumLast { a })
    }

    /// Rotate channel pairs `(2j, 2j+1)` of each row by fixed angles.
    ///
    /// `angles` holds one angle per pair, row-major: `numel(a) / 2` values.
    /// Angles are constants; gradients flow through the vector input only.
    pub fn rotate_pairs(&mut self, a: Var, angles: &[f64]) -> Result<Var> {
        let numel = self.value(a).numel();
        if numel % 2 != 0 || angles.len() != numel / 2 {
            return Err(Error::invalid(format!(
                "rotate_pairs: {} elements vs {} angles",
                numel,
                angles.len()
            )));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; numel];
        for (j, &theta) in angles.iter().enumerate() {
            let (re, im) = (src[2 * j], src[2 * j + 1]);
            let (s, c) = theta.sin_cos();
            data[2 * j] = re * c - im * s;
            data[2 * j + 1] = re * s + im * c;
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            Tensor { shape, data },
            Op::RotatePairs { a, angles: angles.to_vec() },
        ))
    }

    /// Rearrange per-token patch payloads into a pixel grid:
    /// `[grid_h·grid_w, patch²·ch] -> [grid_h·patch·grid_w·patch, ch]`.
    pub fn unpatchify(
        &mut self,
        a: Var,
        grid_h: usize,
        grid_w: usize,
        patch: usize,
        ch: usize,
    ) -> Result<Var> {
        let (t, payload) = self.value(a).dims2()?;
        if t != grid_h * grid_w || payload != patch * patch * ch {
            return Err(Error::invalid(format!(
                "unpatchify: [{t}, {payload}] incompatible with grid {grid_h}x{grid_w}, patch {patch}, ch {ch}"
            )));
        }
        let width = grid_w * patch;
        let mut data = vec![0.0; t * payload];
        let src = self.value(a).data();
        for gu in 0..grid_h {
            for gv in 0..grid_w {
                let tok = gu * grid_w + gv;
                for di in 0..patch {
                    for dj in 0..patch {
                        let pixel = (gu * patch + di) * width + (gv * patch + dj);
                        let inner = (di * patch + dj) * ch;
                        for c in 0..ch {
                            data[pixel * ch + c] = src[tok * payload + inner + c];
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor { shape: vec![grid_h * patch * width, ch], data },
            Op::Unpatchify { a, grid_h, grid_w, patch, ch },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar. Populates gradients for every node;
    /// leaves not reachable from `loss` keep zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward target must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.numel()])
            .collect();
        grads[loss.0][0] = 1.0;

        for id in (0..=loss.0).rev() {
            let g = std::mem::take(&mut grads[id]);
            if g.iter().all(|&x| x == 0.0) {
                grads[id] = g;
                continue;
            }
            self.accumulate(id, &g, &mut grads);
            grads[id] = g;
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn accumulate(&self, id: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let (_, n) = self.nodes[b.0].value.dims2().unwrap();
                let da = matmul_nt_raw(g, val(*b), m, n, k);
                let db = matmul_tn_raw(val(*a), g, m, k, n);
                axpy(&mut grads[a.0], &da);
                axpy(&mut grads[b.0], &db);
            }
            Op::MatmulNT { a, b } => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let (n, _) = self.nodes[b.0].value.dims2().unwrap();
                let da = matmul_raw(g, val(*b), m, n, k);
                let db = matmul_tn_raw(g, val(*a), m, n, k);
                axpy(&mut grads[a.0], &da);
                axpy(&mut grads[b.0], &db);
            }
            Op::Add { a, b } => {
                axpy(&mut grads[a.0], g);
                axpy(&mut grads[b.0], g);
            }
            Op::Sub { a, b } => {
                axpy(&mut grads[a.0], g);
                for (dst, &x) in grads[b.0].iter_mut().zip(g) {
                    *dst -= x;
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
                for ((dst, &x), &y) in grads[a.0].iter_mut().zip(g).zip(&bv) {
                    *dst += x * y;
                }
                for ((dst, &x), &y) in grads[b.0].iter_mut().zip(g).zip(&av) {
                    *dst += x * y;
                }
            }
            Op::AddRow { a, row } => {
                axpy(&mut grads[a.0], g);
                let d = self.nodes[row.0].value.numel();
                for chunk in g.chunks(d) {
                    for (dst, &x) in grads[row.0].iter_mut().zip(chunk) {
                        *dst += x;
                    }
                }
            }
            Op::MulRow { a, row } => {
                let d = self.nodes[row.0].value.numel();
                let rowv = val(*row).to_vec();
                let av = val(*a).to_vec();
                for (gi, chunk) in g.chunks(d).enumerate() {
                    let ga = &mut grads[a.0][gi * d..(gi + 1) * d];
                    for ((dst, &x), &r) in ga.iter_mut().zip(chunk).zip(&rowv) {
                        *dst += x * r;
                    }
                }
                for (gi, chunk) in g.chunks(d).enumerate() {
                    let arow = &av[gi * d..(gi + 1) * d];
                    for ((dst, &x), &xa) in grads[row.0].iter_mut().zip(chunk).zip(arow) {
                        *dst += x * xa;
                    }
                }
            }
            Op::AddScalar { a } => axpy(&mut grads[a.0], g),
            Op::MulScalar { a, c } => {
                for (dst, &x) in grads[a.0].iter_mut().zip(g) {
                    *dst += x * c;
                }
            }
            Op::MulScalarVar { a, s } => {
                let sv = val(*s)[0];
                let av = val(*a).to_vec();
                for (dst, &x) in grads[a.0].iter_mut().zip(g) {
                    *dst += x * sv;
                }
                grads[s.0][0] += g.iter().zip(&av).map(|(&x, &y)| x * y).sum::<f64>();
            }
            Op::Recip { a } => {
                let av = val(*a).to_vec();
                for ((dst, &x), &y) in grads[a.0].iter_mut().zip(g).zip(&av) {
                    *dst -= x / (y * y);
                }
            }
            Op::Exp { a } => {
                let yv = node.value.data().to_vec();
                for ((dst, &x), &y) in grads[a.0].iter_mut().zip(g).zip(&yv) {
                    *dst += x * y;
                }
            }
            Op::Log { a } => {
                let av = val(*a).to_vec();
                for ((dst, &x), &y) in grads[a.0].iter_mut().zip(g).zip(&av) {
                    *dst += x / y;
                }
            }
            Op::Sqrt { a } => {
                let yv = node.value.data().to_vec();
                for ((dst, &x), &y) in grads[a.0].iter_mut().zip(g).zip(&yv) {
                    *dst += 0.5 * x / y;
                }
            }
            Op::Gelu { a } => {
                let av = val(*a).to_vec();
                for ((dst, &x), &y) in grads[a.0].iter_mut().zip(g).zip(&av) {
                    *dst += x * gelu_grad_scalar(y);
                }
            }
            Op::Softmax { a } => {
                let last = node.value.last_dim();
                let yv = node.value.data();
                for (r, (y_row, g_row)) in yv.chunks(last).zip(g.chunks(last)).enumerate() {
                    let dot: f64 = y_row.iter().zip(g_row).map(|(&y, &gg)| y * gg).sum();
                    let dst = &mut grads[a.0][r * last..(r + 1) * last];
                    for ((d, &y), &gg) in dst.iter_mut().zip(y_row).zip(g_row) {
                        *d += y * (gg - dot);
                    }
                }
            }
            Op::LayerNorm { a, floor } => {
                let last = node.value.last_dim();
                let n = last as f64;
                let av = val(*a);
                let yv = node.value.data();
                for (r, ((x_row, y_row), g_row)) in av
                    .chunks(last)
                    .zip(yv.chunks(last))
                    .zip(g.chunks(last))
                    .enumerate()
                {
                    let mean = x_row.iter().sum::<f64>() / n;
                    let var = x_row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
                    let denom = var.max(*floor).sqrt();
                    let g_mean = g_row.iter().sum::<f64>() / n;
                    let gy_mean: f64 =
                        g_row.iter().zip(y_row).map(|(&gg, &y)| gg * y).sum::<f64>() / n;
                    let dst = &mut grads[a.0][r * last..(r + 1) * last];
                    if var > *floor {
                        for ((d, &gg), &y) in dst.iter_mut().zip(g_row).zip(y_row) {
                            *d += (gg - g_mean - y * gy_mean) / denom;
                        }
                    } else {
                        // variance clamped: denominator is constant
                        for (d, &gg) in dst.iter_mut().zip(g_row) {
                            *d += (gg - g_mean) / denom;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                if node.value.shape().len() == 1 || *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].value.numel();
                        axpy(&mut grads[p.0], &g[off..off + n]);
                        off += n;
                    }
                } else {
                    let (rows, cols) = node.value.dims2().unwrap();
                    let mut col0 = 0;
                    for &p in parts {
                        let (_, c) = self.nodes[p.0].value.dims2().unwrap();
                        for i in 0..rows {
                            let src = &g[i * cols + col0..i * cols + col0 + c];
                            for (dst, &x) in grads[p.0][i * c..(i + 1) * c].iter_mut().zip(src) {
                                *dst += x;
                            }
                        }
                        col0 += c;
                    }
                }
            }
            Op::Slice2d { a, r0, c0 } => {
                let (nr, nc) = node.value.dims2().unwrap();
                let (_, cols) = self.nodes[a.0].value.dims2().unwrap();
                for i in 0..nr {
                    let src = &g[i * nc..(i + 1) * nc];
                    let dst =
                        &mut grads[a.0][(r0 + i) * cols + c0..(r0 + i) * cols + c0 + nc];
                    for (d, &x) in dst.iter_mut().zip(src) {
                        *d += x;
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                let cols = node.value.numel() / idx.len().max(1);
                for (out_row, &src_row) in idx.iter().enumerate() {
                    let src = &g[out_row * cols..(out_row + 1) * cols];
                    let dst = &mut grads[a.0][src_row * cols..(src_row + 1) * cols];
                    for (d, &x) in dst.iter_mut().zip(src) {
                        *d += x;
                    }
                }
            }
            Op::SumAll { a } => {
                let gg = g[0];
                for dst in grads[a.0].iter_mut() {
                    *dst += gg;
                }
            }
            Op::MeanAll { a } => {
                let gg = g[0] / self.nodes[a.0].value.numel() as f64;
                for dst in grads[a.0].iter_mut() {
                    *dst += gg;
                }
            }
            Op::SumLast { a } => {
                let last = self.nodes[a.0].value.last_dim();
                for (r, &gg) in g.iter().enumerate() {
                    for dst in grads[a.0][r * last..(r + 1) * last].iter_mut() {
                        *dst += gg;
                    }
                }
            }
            Op::RotatePairs { a, angles } => {
                // inverse rotation on the incoming gradient
                for (j, &theta) in angles.iter().enumerate() {
                    let (s, c) = theta.sin_cos();
                    let (gre, gim) = (g[2 * j], g[2 * j + 1]);
                    grads[a.0][2 * j] += gre * c + gim * s;
                    grads[a.0][2 * j + 1] += -gre * s + gim * c;
                }
            }
            Op::Unpatchify { a, grid_h, grid_w, patch, ch } => {
                let payload = patch * patch * ch;
                let width = grid_w * patch;
                for gu in 0..*grid_h {
                    for gv in 0..*grid_w {
                        let tok = gu * grid_w + gv;
                        for di in 0..*patch {
                            for dj in 0..*patch {
                                let pixel = (gu * patch + di) * width + (gv * patch + dj);
                                let inner = (di * patch + dj) * ch;
                                for c in 0..*ch {
                                    grads[a.0][tok * payload + inner + c] += g[pixel * ch + c];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Inverse of [`Tape::unpatchify`] on plain data: cut an `[H·W, ch]` pixel
/// grid into per-token patch payloads `[T, patch²·ch]`.
pub fn patchify(pixels: &[f64], height: usize, width: usize, ch: usize, patch: usize) -> Tensor {
    assert_eq!(pixels.len(), height * width * ch);
    assert!(height % patch == 0 && width % patch == 0);
    let (gh, gw) = (height / patch, width / patch);
    let payload = patch * patch * ch;
    let mut data = vec![0.0; pixels.len()];
    for gu in 0..gh {
        for gv in 0..gw {
            let tok = gu * gw + gv;
            for di in 0..patch {
                for dj in 0..patch {
                    let pixel = (gu * patch + di) * width + (gv * patch + dj);
                    let inner = (di * patch + dj) * ch;
                    data[tok * payload + inner..tok * payload + inner + ch]
                        .copy_from_slice(&pixels[pixel * ch..pixel * ch + ch]);
                }
            }
        }
    }
    Tensor { shape: vec![gh * gw, payload], data }
}

/// Max relative error between analytic and central-difference gradients,
/// `|analytic − numeric| / max(1, |numeric|)`, over all coordinates.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::invalid("grad_check target must be scalar"));
    }
    tape.backward(y)?;
    let analytic = tape.grad(x).to_vec();

    let eval = |data: &[f64]| -> Result<f64> {
        let t = Tensor::new(point.shape().to_vec(), data.to_vec())?;
        let mut tape = Tape::new();
        let v = tape.leaf(t);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).data()[0])
    };

    let mut max_err: f64 = 0.0;
    let mut data = point.data().to_vec();
    for i in 0..data.len() {
        let x0 = data[i];
        data[i] = x0 + eps;
        let hi = eval(&data)?;
        data[i] = x0 - eps;
        let lo = eval(&data)?;
        data[i] = x0;
        let numeric = (hi - lo) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
