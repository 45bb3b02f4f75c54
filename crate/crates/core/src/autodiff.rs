//! Reverse-mode tape over 2-D value matrices. Exactly the operations
//! the model needs, including a stop-gradient marker. Generic over the
//! scalar so training runs in f32 and gradient checks in f64.

use num_traits::Float;

use crate::error::{CoreError, Result};

pub trait Scalar: Float + std::fmt::Debug + Default + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64s(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64s(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64s(self) -> f64 {
        self
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Id(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

enum Op<F> {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    /// broadcast a (1, C) row over every row of a
    AddRow(Id, Id),
    MulRow(Id, Id),
    Scale(Id, F),
    AddScalar(Id, F),
    /// elementwise add of a constant matrix (causal mask)
    AddConst(Id),
    Matmul(Id, Id),
    Transpose(Id),
    SliceRows(Id, usize),
    SliceCols(Id, usize),
    ConcatRows(Vec<Id>),
    ConcatCols(Vec<Id>),
    /// tile a (1, C) row to (rows, C)
    BroadcastRow(Id),
    SoftmaxRows(Id),
    LayerNormRows(Id, F),
    Gelu(Id),
    /// columnwise max over rows -> (1, C); aux holds argmax rows
    MaxRows(Id, Vec<usize>),
    L2NormalizeRows(Id, F),
    Mean(Id),
    Sum(Id),
    StopGrad,
    /// per-row pair rotation; aux holds cos/sin, (rows, cols/2) each
    Rope(Id, Vec<F>, Vec<F>),
}

struct Node<F> {
    shape: Shape,
    values: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Append-only recording tape. Node ids are already in topological
/// order, so the backward pass is a single reverse sweep.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: Id) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn values(&self, id: Id) -> &[F] {
        &self.nodes[id.0].values
    }

    /// Scalar value of a (1,1) node.
    pub fn scalar(&self, id: Id) -> F {
        debug_assert_eq!(self.nodes[id.0].shape.len(), 1);
        self.nodes[id.0].values[0]
    }

    fn push(&mut self, shape: Shape, values: Vec<F>, op: Op<F>, needs_grad: bool) -> Id {
        debug_assert_eq!(values.len(), shape.len());
        self.nodes.push(Node {
            shape,
            values,
            op,
            needs_grad,
        });
        Id(self.nodes.len() - 1)
    }

    fn needs(&self, id: Id) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Leaf that participates in gradients (a parameter).
    pub fn param(&mut self, rows: usize, cols: usize, values: Vec<F>) -> Result<Id> {
        let shape = Shape::new(rows, cols);
        if values.len() != shape.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "param expects {} values, got {}",
                shape.len(),
                values.len()
            )));
        }
        Ok(self.push(shape, values, Op::Leaf, true))
    }

    /// Leaf held constant (an input).
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<F>) -> Result<Id> {
        let shape = Shape::new(rows, cols);
        if values.len() != shape.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "constant expects {} values, got {}",
                shape.len(),
                values.len()
            )));
        }
        Ok(self.push(shape, values, Op::Leaf, false))
    }

    fn same_shape(&self, a: Id, b: Id, what: &str) -> Result<Shape> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(CoreError::ShapeMismatch(format!(
                "{what}: ({}, {}) vs ({}, {})",
                sa.rows, sa.cols, sb.rows, sb.cols
            )));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Result<Id> {
        let s = self.same_shape(a, b, "add")?;
        let v: Vec<F> = self.values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(s, v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Result<Id> {
        let s = self.same_shape(a, b, "sub")?;
        let v: Vec<F> = self.values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(s, v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Result<Id> {
        let s = self.same_shape(a, b, "mul")?;
        let v: Vec<F> = self.values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(s, v, Op::Mul(a, b), ng))
    }

    fn check_row(&self, a: Id, row: Id, what: &str) -> Result<Shape> {
        let sa = self.shape(a);
        let sr = self.shape(row);
        if sr.rows != 1 || sr.cols != sa.cols {
            return Err(CoreError::ShapeMismatch(format!(
                "{what}: row must be (1, {}), got ({}, {})",
                sa.cols, sr.rows, sr.cols
            )));
        }
        Ok(sa)
    }

    /// a + row broadcast over rows (bias add).
    pub fn add_row(&mut self, a: Id, row: Id) -> Result<Id> {
        let s = self.check_row(a, row, "add_row")?;
        let rv = self.values(row).to_vec();
        let v: Vec<F> = self.values(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rv[i % s.cols])
            .collect();
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(s, v, Op::AddRow(a, row), ng))
    }

    /// a * row broadcast over rows (per-channel gain).
    pub fn mul_row(&mut self, a: Id, row: Id) -> Result<Id> {
        let s = self.check_row(a, row, "mul_row")?;
        let rv = self.values(row).to_vec();
        let v: Vec<F> = self.values(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * rv[i % s.cols])
            .collect();
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(s, v, Op::MulRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Id, k: F) -> Id {
        let s = self.shape(a);
        let v: Vec<F> = self.values(a).iter().map(|&x| x * k).collect();
        let ng = self.needs(a);
        self.push(s, v, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Id, k: F) -> Id {
        let s = self.shape(a);
        let v: Vec<F> = self.values(a).iter().map(|&x| x + k).collect();
        let ng = self.needs(a);
        self.push(s, v, Op::AddScalar(a, k), ng)
    }

    /// a + fixed constant matrix (the additive attention mask).
    pub fn add_const(&mut self, a: Id, c: &[F]) -> Result<Id> {
        let s = self.shape(a);
        if c.len() != s.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "add_const expects {} values, got {}",
                s.len(),
                c.len()
            )));
        }
        let v: Vec<F> = self.values(a).iter().zip(c).map(|(&x, &y)| x + y).collect();
        let ng = self.needs(a);
        Ok(self.push(s, v, Op::AddConst(a), ng))
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Result<Id> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.cols != sb.rows {
            return Err(CoreError::ShapeMismatch(format!(
                "matmul: ({}, {}) x ({}, {})",
                sa.rows, sa.cols, sb.rows, sb.cols
            )));
        }
        let (m, k, n) = (sa.rows, sa.cols, sb.cols);
        let mut v = vec![F::zero(); m * n];
        {
            let av = self.values(a);
            let bv = self.values(b);
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == F::zero() {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let out = &mut v[i * n..(i + 1) * n];
                    for (o, &bb) in out.iter_mut().zip(brow) {
                        *o = *o + aip * bb;
                    }
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Shape::new(m, n), v, Op::Matmul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Id) -> Id {
        let s = self.shape(a);
        let mut v = vec![F::zero(); s.len()];
        let av = self.values(a);
        for i in 0..s.rows {
            for j in 0..s.cols {
                v[j * s.rows + i] = av[i * s.cols + j];
            }
        }
        let ng = self.needs(a);
        self.push(Shape::new(s.cols, s.rows), v, Op::Transpose(a), ng)
    }

    pub fn slice_rows(&mut self, a: Id, start: usize, len: usize) -> Result<Id> {
        let s = self.shape(a);
        if start + len > s.rows || len == 0 {
            return Err(CoreError::InvalidArgument(format!(
                "slice_rows [{start}, {}) out of {} rows",
                start + len,
                s.rows
            )));
        }
        let v = self.values(a)[start * s.cols..(start + len) * s.cols].to_vec();
        let ng = self.needs(a);
        Ok(self.push(Shape::new(len, s.cols), v, Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: Id, start: usize, len: usize) -> Result<Id> {
        let s = self.shape(a);
        if start + len > s.cols || len == 0 {
            return Err(CoreError::InvalidArgument(format!(
                "slice_cols [{start}, {}) out of {} cols",
                start + len,
                s.cols
            )));
        }
        let mut v = Vec::with_capacity(s.rows * len);
        let av = self.values(a);
        for i in 0..s.rows {
            v.extend_from_slice(&av[i * s.cols + start..i * s.cols + start + len]);
        }
        let ng = self.needs(a);
        Ok(self.push(Shape::new(s.rows, len), v, Op::SliceCols(a, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Id]) -> Result<Id> {
        if parts.is_empty() {
            return Err(CoreError::InvalidArgument("concat_rows of nothing".into()));
        }
        let cols = self.shape(parts[0]).cols;
        let mut rows = 0;
        let mut v = Vec::new();
        for &p in parts {
            let sp = self.shape(p);
            if sp.cols != cols {
                return Err(CoreError::ShapeMismatch(format!(
                    "concat_rows: expected {cols} cols, got {}",
                    sp.cols
                )));
            }
            rows += sp.rows;
            v.extend_from_slice(self.values(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Shape::new(rows, cols), v, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Id]) -> Result<Id> {
        if parts.is_empty() {
            return Err(CoreError::InvalidArgument("concat_cols of nothing".into()));
        }
        let rows = self.shape(parts[0]).rows;
        let mut cols = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.rows != rows {
                return Err(CoreError::ShapeMismatch(format!(
                    "concat_cols: expected {rows} rows, got {}",
                    sp.rows
                )));
            }
            cols += sp.cols;
        }
        let mut v = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let sp = self.shape(p);
                v.extend_from_slice(&self.values(p)[i * sp.cols..(i + 1) * sp.cols]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Shape::new(rows, cols), v, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Tile a (1, C) row to (rows, C).
    pub fn broadcast_row(&mut self, a: Id, rows: usize) -> Result<Id> {
        let s = self.shape(a);
        if s.rows != 1 {
            return Err(CoreError::ShapeMismatch(format!(
                "broadcast_row expects a single row, got {} rows",
                s.rows
            )));
        }
        let mut v = Vec::with_capacity(rows * s.cols);
        for _ in 0..rows {
            v.extend_from_slice(self.values(a));
        }
        let ng = self.needs(a);
        Ok(self.push(Shape::new(rows, s.cols), v, Op::BroadcastRow(a), ng))
    }

    /// Rowwise softmax.
    pub fn softmax_rows(&mut self, a: Id) -> Id {
        let s = self.shape(a);
        let mut v = vec![F::zero(); s.len()];
        let av = self.values(a);
        for i in 0..s.rows {
            let row = &av[i * s.cols..(i + 1) * s.cols];
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                v[i * s.cols + j] = e;
                z = z + e;
            }
            for j in 0..s.cols {
                v[i * s.cols + j] = v[i * s.cols + j] / z;
            }
        }
        let ng = self.needs(a);
        self.push(s, v, Op::SoftmaxRows(a), ng)
    }

    /// Rowwise layer normalization without affine (pair with
    /// `mul_row`/`add_row` for the learnable gain and shift).
    pub fn layer_norm_rows(&mut self, a: Id, eps: F) -> Id {
        let s = self.shape(a);
        let mut v = vec![F::zero(); s.len()];
        let av = self.values(a);
        let n = F::from_f64(s.cols as f64);
        for i in 0..s.rows {
            let row = &av[i * s.cols..(i + 1) * s.cols];
            let mut mean = F::zero();
            for &x in row {
                mean = mean + x;
            }
            mean = mean / n;
            let mut var = F::zero();
            for &x in row {
                var = var + (x - mean) * (x - mean);
            }
            var = var / n;
            let inv = (var + eps).sqrt().recip();
            for j in 0..s.cols {
                v[i * s.cols + j] = (row[j] - mean) * inv;
            }
        }
        let ng = self.needs(a);
        self.push(s, v, Op::LayerNormRows(a, eps), ng)
    }

    /// tanh-approximation GELU.
    pub fn gelu(&mut self, a: Id) -> Id {
        let s = self.shape(a);
        let v: Vec<F> = self.values(a).iter().map(|&x| gelu_fwd(x)).collect();
        let ng = self.needs(a);
        self.push(s, v, Op::Gelu(a), ng)
    }

    /// Columnwise max over rows -> (1, C). Ties route the gradient to
    /// the lowest row index.
    pub fn max_rows(&mut self, a: Id) -> Id {
        let s = self.shape(a);
        let av = self.values(a);
        let mut v = av[..s.cols].to_vec();
        let mut arg = vec![0usize; s.cols];
        for i in 1..s.rows {
            for j in 0..s.cols {
                let x = av[i * s.cols + j];
                if x > v[j] {
                    v[j] = x;
                    arg[j] = i;
                }
            }
        }
        let ng = self.needs(a);
        self.push(Shape::new(1, s.cols), v, Op::MaxRows(a, arg), ng)
    }

    /// Rowwise x / max(||x||, eps).
    pub fn l2_normalize_rows(&mut self, a: Id, eps: F) -> Id {
        let s = self.shape(a);
        let mut v = vec![F::zero(); s.len()];
        let av = self.values(a);
        for i in 0..s.rows {
            let row = &av[i * s.cols..(i + 1) * s.cols];
            let norm = row.iter().map(|&x| x * x).fold(F::zero(), |a, b| a + b).sqrt();
            let denom = norm.max(eps);
            for j in 0..s.cols {
                v[i * s.cols + j] = row[j] / denom;
            }
        }
        let ng = self.needs(a);
        self.push(s, v, Op::L2NormalizeRows(a, eps), ng)
    }

    pub fn mean(&mut self, a: Id) -> Id {
        let s = self.shape(a);
        let n = F::from_f64(s.len() as f64);
        let total = self.values(a).iter().fold(F::zero(), |acc, &x| acc + x);
        let ng = self.needs(a);
        self.push(Shape::new(1, 1), vec![total / n], Op::Mean(a), ng)
    }

    pub fn sum(&mut self, a: Id) -> Id {
        let total = self.values(a).iter().fold(F::zero(), |acc, &x| acc + x);
        let ng = self.needs(a);
        self.push(Shape::new(1, 1), vec![total], Op::Sum(a), ng)
    }

    /// Forward identity; contributes zero gradient to all ancestors.
    pub fn stop_gradient(&mut self, a: Id) -> Id {
        let s = self.shape(a);
        let v = self.values(a).to_vec();
        self.push(s, v, Op::StopGrad, false)
    }

    /// Per-row rotation of even/odd pairs by the given angles:
    /// pair (2i, 2i+1) of row t rotates by angles[t][i].
    pub fn rope(&mut self, a: Id, angles: &[f64]) -> Result<Id> {
        let s = self.shape(a);
        if !s.cols.is_multiple_of(2) {
            return Err(CoreError::Config(format!(
                "rope requires an even dimension, got {}",
                s.cols
            )));
        }
        let half = s.cols / 2;
        if angles.len() != s.rows * half {
            return Err(CoreError::ShapeMismatch(format!(
                "rope expects {} angles, got {}",
                s.rows * half,
                angles.len()
            )));
        }
        let cos: Vec<F> = angles.iter().map(|&t| F::from_f64(t.cos())).collect();
        let sin: Vec<F> = angles.iter().map(|&t| F::from_f64(t.sin())).collect();
        let mut v = vec![F::zero(); s.len()];
        let av = self.values(a);
        for t in 0..s.rows {
            for i in 0..half {
                let c = cos[t * half + i];
                let sn = sin[t * half + i];
                let x0 = av[t * s.cols + 2 * i];
                let x1 = av[t * s.cols + 2 * i + 1];
                v[t * s.cols + 2 * i] = x0 * c - x1 * sn;
                v[t * s.cols + 2 * i + 1] = x0 * sn + x1 * c;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(s, v, Op::Rope(a, cos, sin), ng))
    }

    /// Reverse accumulation from a scalar loss. Returns per-node
    /// gradients (None for nodes outside the differentiable cone).
    pub fn backward(&mut self, loss: Id) -> Result<Gradients<F>> {
        if self.shape(loss).len() != 1 {
            return Err(CoreError::InvalidArgument(
                "backward requires a scalar loss".into(),
            ));
        }
        if !self.scalar(loss).is_finite() {
            return Err(CoreError::NumericFailure("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].needs_grad && !matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            self.accumulate_parents(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<F>>], id: Id, delta: &[F]) {
        if !self.needs(id) {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![F::zero(); self.shape(id).len()]);
        for (a, &d) in slot.iter_mut().zip(delta) {
            *a = *a + d;
        }
    }

    fn accumulate_parents(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let shape = self.nodes[idx].shape;
        match &self.nodes[idx].op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g);
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g);
                let neg: Vec<F> = g.iter().map(|&x| -x).collect();
                self.acc(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let bv = self.values(*b);
                let da: Vec<F> = g.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                self.acc(grads, *a, &da);
                let av = self.values(*a);
                let db: Vec<F> = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                self.acc(grads, *b, &db);
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g);
                let cols = shape.cols;
                let mut dr = vec![F::zero(); cols];
                for (i, &x) in g.iter().enumerate() {
                    dr[i % cols] = dr[i % cols] + x;
                }
                self.acc(grads, *row, &dr);
            }
            Op::MulRow(a, row) => {
                let cols = shape.cols;
                let rv = self.values(*row);
                let da: Vec<F> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x * rv[i % cols])
                    .collect();
                self.acc(grads, *a, &da);
                let av = self.values(*a);
                let mut dr = vec![F::zero(); cols];
                for (i, &x) in g.iter().enumerate() {
                    dr[i % cols] = dr[i % cols] + x * av[i];
                }
                self.acc(grads, *row, &dr);
            }
            Op::Scale(a, k) => {
                let da: Vec<F> = g.iter().map(|&x| x * *k).collect();
                self.acc(grads, *a, &da);
            }
            Op::AddScalar(a, _) | Op::AddConst(a) => {
                self.acc(grads, *a, g);
            }
            Op::Matmul(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (m, k, n) = (sa.rows, sa.cols, sb.cols);
                // dA = dC B^T
                if self.needs(*a) {
                    let bv = self.values(*b);
                    let mut da = vec![F::zero(); m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == F::zero() {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] = da[i * k + p] + gij * bv[p * n + j];
                            }
                        }
                    }
                    self.acc(grads, *a, &da);
                }
                // dB = A^T dC
                if self.needs(*b) {
                    let av = self.values(*a);
                    let mut db = vec![F::zero(); k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == F::zero() {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] = db[p * n + j] + aip * g[i * n + j];
                            }
                        }
                    }
                    self.acc(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let sa = self.shape(*a);
                let mut da = vec![F::zero(); sa.len()];
                for i in 0..shape.rows {
                    for j in 0..shape.cols {
                        da[j * sa.cols + i] = g[i * shape.cols + j];
                    }
                }
                self.acc(grads, *a, &da);
            }
            Op::SliceRows(a, start) => {
                let sa = self.shape(*a);
                let mut da = vec![F::zero(); sa.len()];
                da[start * sa.cols..start * sa.cols + g.len()].copy_from_slice(g);
                self.acc(grads, *a, &da);
            }
            Op::SliceCols(a, start) => {
                let sa = self.shape(*a);
                let mut da = vec![F::zero(); sa.len()];
                for i in 0..shape.rows {
                    for j in 0..shape.cols {
                        da[i * sa.cols + start + j] = g[i * shape.cols + j];
                    }
                }
                self.acc(grads, *a, &da);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let sp = self.shape(p);
                    self.acc(grads, p, &g[off..off + sp.len()]);
                    off += sp.len();
                }
            }
            Op::ConcatCols(parts) => {
                let mut col_off = 0;
                for &p in parts {
                    let sp = self.shape(p);
                    let mut dp = Vec::with_capacity(sp.len());
                    for i in 0..sp.rows {
                        dp.extend_from_slice(
                            &g[i * shape.cols + col_off..i * shape.cols + col_off + sp.cols],
                        );
                    }
                    self.acc(grads, p, &dp);
                    col_off += sp.cols;
                }
            }
            Op::BroadcastRow(a) => {
                let cols = shape.cols;
                let mut da = vec![F::zero(); cols];
                for (i, &x) in g.iter().enumerate() {
                    da[i % cols] = da[i % cols] + x;
                }
                self.acc(grads, *a, &da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].values;
                let cols = shape.cols;
                let mut da = vec![F::zero(); shape.len()];
                for i in 0..shape.rows {
                    let mut dot = F::zero();
                    for j in 0..cols {
                        dot = dot + g[i * cols + j] * y[i * cols + j];
                    }
                    for j in 0..cols {
                        da[i * cols + j] = y[i * cols + j] * (g[i * cols + j] - dot);
                    }
                }
                self.acc(grads, *a, &da);
            }
            Op::LayerNormRows(a, eps) => {
                let av = self.values(*a);
                let cols = shape.cols;
                let n = F::from_f64(cols as f64);
                let mut da = vec![F::zero(); shape.len()];
                for i in 0..shape.rows {
                    let row = &av[i * cols..(i + 1) * cols];
                    let mut mean = F::zero();
                    for &x in row {
                        mean = mean + x;
                    }
                    mean = mean / n;
                    let mut var = F::zero();
                    for &x in row {
                        var = var + (x - mean) * (x - mean);
                    }
                    var = var / n;
                    let inv = (var + *eps).sqrt().recip();
                    let grow = &g[i * cols..(i + 1) * cols];
                    let mut gmean = F::zero();
                    let mut gxhat = F::zero();
                    for j in 0..cols {
                        let xhat = (row[j] - mean) * inv;
                        gmean = gmean + grow[j];
                        gxhat = gxhat + grow[j] * xhat;
                    }
                    gmean = gmean / n;
                    gxhat = gxhat / n;
                    for j in 0..cols {
                        let xhat = (row[j] - mean) * inv;
                        da[i * cols + j] = inv * (grow[j] - gmean - xhat * gxhat);
                    }
                }
                self.acc(grads, *a, &da);
            }
            Op::Gelu(a) => {
                let av = self.values(*a);
                let da: Vec<F> = g
                    .iter()
                    .zip(av)
                    .map(|(&gx, &x)| gx * gelu_bwd(x))
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::MaxRows(a, arg) => {
                let sa = self.shape(*a);
                let mut da = vec![F::zero(); sa.len()];
                for (j, &row) in arg.iter().enumerate() {
                    da[row * sa.cols + j] = g[j];
                }
                self.acc(grads, *a, &da);
            }
            Op::L2NormalizeRows(a, eps) => {
                let av = self.values(*a);
                let cols = shape.cols;
                let mut da = vec![F::zero(); shape.len()];
                for i in 0..shape.rows {
                    let row = &av[i * cols..(i + 1) * cols];
                    let norm = row
                        .iter()
                        .map(|&x| x * x)
                        .fold(F::zero(), |acc, x| acc + x)
                        .sqrt();
                    let grow = &g[i * cols..(i + 1) * cols];
                    if norm > *eps {
                        let inv = norm.recip();
                        let mut dot = F::zero();
                        for j in 0..cols {
                            dot = dot + grow[j] * row[j];
                        }
                        let k = dot * inv * inv * inv;
                        for j in 0..cols {
                            da[i * cols + j] = grow[j] * inv - row[j] * k;
                        }
                    } else {
                        // clamped branch: y = x / eps
                        let inv = eps.recip();
                        for j in 0..cols {
                            da[i * cols + j] = grow[j] * inv;
                        }
                    }
                }
                self.acc(grads, *a, &da);
            }
            Op::Mean(a) => {
                let sa = self.shape(*a);
                let k = g[0] / F::from_f64(sa.len() as f64);
                let da = vec![k; sa.len()];
                self.acc(grads, *a, &da);
            }
            Op::Sum(a) => {
                let sa = self.shape(*a);
                let da = vec![g[0]; sa.len()];
                self.acc(grads, *a, &da);
            }
            Op::Rope(a, cos, sin) => {
                let cols = shape.cols;
                let half = cols / 2;
                let mut da = vec![F::zero(); shape.len()];
                for t in 0..shape.rows {
                    for i in 0..half {
                        let c = cos[t * half + i];
                        let sn = sin[t * half + i];
                        let g0 = g[t * cols + 2 * i];
                        let g1 = g[t * cols + 2 * i + 1];
                        // inverse rotation of the cotangent
                        da[t * cols + 2 * i] = g0 * c + g1 * sn;
                        da[t * cols + 2 * i + 1] = -g0 * sn + g1 * c;
                    }
                }
                self.acc(grads, *a, &da);
            }
        }
    }
}

pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: Id) -> Option<&[F]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient of a node, zeros if it never received one.
    pub fn get_or_zero(&self, id: Id, len: usize) -> Vec<F> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![F::zero(); len],
        }
    }
}

fn gelu_fwd<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_bwd<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654);
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad<G>(f: G, x: &[f64], step: f64) -> Vec<f64>
    where
        G: Fn(&[f64]) -> f64,
    {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + step;
            let hi = f(&xp);
            xp[i] = x[i] - step;
            let lo = f(&xp);
            xp[i] = x[i];
            g[i] = (hi - lo) / (2.0 * step);
        }
        g
    }

    fn assert_close(a: &[f64], b: &[f64], rel: f64, abs: f64) {
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            let err = (x - y).abs();
            let scale = x.abs().max(y.abs());
            assert!(
                err <= abs + rel * scale,
                "grad mismatch at {i}: {x} vs {y} (err {err})"
            );
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.param(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn repeated_use_accumulates() {
        // loss = x*x summed: d/dx = 2x
        let mut t: Tape<f64> = Tape::new();
        let x = t.param(1, 3, vec![1.0, -2.0, 3.0]).unwrap();
        let y = t.mul(x, x).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn stop_gradient_kills_branch() {
        // loss = sg(x) * x at x=3 -> grad 3
        let mut t: Tape<f64> = Tape::new();
        let x = t.param(1, 1, vec![3.0]).unwrap();
        let sg = t.stop_gradient(x);
        let y = t.mul(sg, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0]);
        assert_eq!(t.values(sg), &[3.0]); // forward identity
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(1, 4, vec![0.7; 4]).unwrap();
        let y = t.softmax_rows(x);
        for &v in t.values(y) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_mean_is_zero() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(1, 5, vec![3.0, -1.0, 4.0, 1.0, 5.0]).unwrap();
        let y = t.layer_norm_rows(x, 1e-5);
        let m = t.mean(y);
        assert!(t.scalar(m).abs() < 1e-6);
    }

    #[test]
    fn l2_normalize_zero_vector() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(1, 3, vec![0.0; 3]).unwrap();
        let y = t.l2_normalize_rows(x, 1e-8);
        assert_eq!(t.values(y), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn cosine_gradient_matches_fd() {
        // loss = <a/||a||, b/||b||> wrt a
        let a0 = [0.3, -0.7, 1.2, 0.4];
        let b0 = [1.0, 0.2, -0.5, 0.8];
        let eval = |av: &[f64]| {
            let mut t: Tape<f64> = Tape::new();
            let a = t.param(1, 4, av.to_vec()).unwrap();
            let b = t.constant(1, 4, b0.to_vec()).unwrap();
            let an = t.l2_normalize_rows(a, 1e-8);
            let bn = t.l2_normalize_rows(b, 1e-8);
            let p = t.mul(an, bn).unwrap();
            let s = t.sum(p);
            (t, a, s)
        };
        let (mut t, a, s) = eval(&a0);
        let g = t.backward(s).unwrap();
        let fd = fd_grad(
            |x| {
                let (t, _, s) = eval(x);
                t.scalar(s)
            },
            &a0,
            1e-4,
        );
        assert_close(g.get(a).unwrap(), &fd, 1e-5, 1e-9);
    }

    #[test]
    fn composite_ops_match_fd() {
        // a small net exercising matmul, gelu, layer_norm, softmax,
        // slices, concat, max_rows, rope and mean together
        let n_in = 12;
        let x0: Vec<f64> = (0..n_in).map(|i| 0.1 * (i as f64) - 0.5).collect();
        let angles = vec![0.3, -0.8, 0.5, 1.1, -0.2, 0.9];
        let eval = |xv: &[f64]| {
            let mut t: Tape<f64> = Tape::new();
            let x = t.param(3, 4, xv.to_vec()).unwrap();
            let r = t.rope(x, &angles).unwrap();
            let w = t.constant(4, 4, (0..16).map(|i| 0.05 * i as f64 - 0.3).collect()).unwrap();
            let h = t.matmul(r, w).unwrap();
            let h = t.gelu(h);
            let h = t.layer_norm_rows(h, 1e-5);
            let sm = t.softmax_rows(h);
            let left = t.slice_cols(sm, 0, 2).unwrap();
            let right = t.slice_cols(sm, 2, 2).unwrap();
            let cat = t.concat_cols(&[right, left]).unwrap();
            let mx = t.max_rows(cat);
            let top = t.slice_rows(cat, 0, 2).unwrap();
            let pooled = t.concat_rows(&[top, mx]).unwrap();
            let m = t.mean(pooled);
            (t, x, m)
        };
        let (mut t, x, m) = eval(&x0);
        let g = t.backward(m).unwrap();
        let fd = fd_grad(
            |v| {
                let (t, _, m) = eval(v);
                t.scalar(m)
            },
            &x0,
            1e-5,
        );
        assert_close(g.get(x).unwrap(), &fd, 1e-5, 1e-8);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.param(2, 3, vec![0.0; 6]).unwrap();
        let b = t.param(3, 3, vec![0.0; 9]).unwrap();
        assert!(t.add(a, b).is_err());
        assert!(t.matmul(b, b).is_ok());
        assert!(t.matmul(a, a).is_err());
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.param(2, 2, vec![1.0; 4]).unwrap();
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn rope_preserves_norm() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(1, 6, vec![0.3, -1.2, 0.8, 0.1, -0.4, 2.0]).unwrap();
        let r = t.rope(x, &[0.7, -1.9, 2.4]).unwrap();
        let n0: f64 = t.values(x).iter().map(|v| v * v).sum();
        let n1: f64 = t.values(r).iter().map(|v| v * v).sum();
        assert!((n0 - n1).abs() < 1e-10);
    }

    #[test]
    fn determinism_bit_identical() {
        let run = || {
            let mut t: Tape<f32> = Tape::new();
            let x = t
                .param(4, 4, (0..16).map(|i| (i as f32) * 0.17 - 1.0).collect())
                .unwrap();
            let w = t
                .constant(4, 4, (0..16).map(|i| (i as f32) * 0.03 - 0.2).collect())
                .unwrap();
            let h = t.matmul(x, w).unwrap();
            let h = t.gelu(h);
            let h = t.softmax_rows(h);
            let m = t.mean(h);
            let g = t.backward(m).unwrap();
            (
                t.values(h).to_vec(),
                g.get(x).unwrap().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }
}
