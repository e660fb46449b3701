use crate::{GradError, Real, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Transpose(Var),
    Softmax { x: Var, axis: usize },
    CausalSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    Gelu(Var),
    Relu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MeanRows { x: Var, rows: Vec<usize> },
    L2Normalize { x: Var, norm: F },
    L2Distance(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<F> },
    Sum(Var),
    Reshape(Var),
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Transpose(..) => "transpose",
            Op::Softmax { .. } => "softmax",
            Op::CausalSoftmax(..) => "causal_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu_hinge",
            Op::Embedding { .. } => "embedding",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::MeanRows { .. } => "mean_rows",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::L2Distance(..) => "l2_distance",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
        }
    }
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Append-only computation tape. Nodes are topologically ordered by insertion.
///
/// A graph supports exactly one [`backward`](Graph::backward) call; build a new
/// graph for every forward pass.
#[derive(Debug)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    backward_done: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> GradError {
    GradError::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {}", op.name());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; its gradient is available after `backward`.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
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

    /// Gradient of the last backward pass w.r.t. `v`, if it received one.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn mat_dims(&self, v: Var, op: &str) -> Result<(usize, usize), GradError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(GradError::Shape(format!("{op}: expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var, GradError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op.name(), self.shape(a), self.shape(b)));
        }
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `[d]` bias to every row of a `[.. x d]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, GradError> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let vx = self.value(x);
        let data = vx
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&p, &q)| p + q))
            .collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&p| p * c).collect();
        let t = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&p| p + c).collect();
        let t = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::AddScalar(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, GradError> {
        let (r, c) = self.mat_dims(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(src[i * c + j]);
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    /// Softmax along `axis` of a vector (axis 0) or matrix (axis 0 or 1).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() > 2 {
            return Err(GradError::Shape(format!("softmax: axis {axis} invalid for shape {shape:?}")));
        }
        let mut out = self.value(x).data().to_vec();
        for lane in lanes(&shape, axis) {
            softmax_lane(&mut out, &lane, lane.len());
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    /// Row softmax over a square score matrix where row `i` only sees columns `<= i`.
    /// Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var, GradError> {
        let (r, c) = self.mat_dims(x, "causal_softmax")?;
        if r != c {
            return Err(GradError::Shape(format!("causal_softmax: expected square, got {r}x{c}")));
        }
        let mut out = self.value(x).data().to_vec();
        for i in 0..r {
            let lane: Vec<usize> = (i * c..i * c + c).collect();
            softmax_lane(&mut out, &lane, i + 1);
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::CausalSoftmax(x), &[x]))
    }

    /// Row-wise layer normalization with affine `gain` and `bias` (eps = 1e-5).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, GradError> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = F::lit(LN_EPS);
        let inv_d = F::one() / F::lit(d as f64);
        let vx = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(vx.rows());
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(d) {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu(v).0).collect();
        let t = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu(x), &[x])
    }

    /// `max(x, 0)`; the derivative at 0 is taken to be 0.
    pub fn relu_hinge(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v.max(F::zero())).collect();
        let t = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Relu(x), &[x])
    }

    /// Gathers rows of a `[V x d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, GradError> {
        let (v, d) = self.mat_dims(table, "embedding")?;
        if ids.is_empty() {
            return Err(GradError::Shape("embedding: empty id list".into()));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(GradError::Index { index: id, bound: v });
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, GradError> {
        let (r, c) = self.mat_dims(x, "slice_cols")?;
        if start >= end || end > c {
            return Err(GradError::Shape(format!("slice_cols: {start}..{end} out of 0..{c}")));
        }
        let vx = self.value(x);
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&vx.row(i)[start..end]);
        }
        let t = Tensor::new(vec![r, end - start], out)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let first = *parts.first().ok_or_else(|| GradError::Shape("concat_cols: no inputs".into()))?;
        let (r, _) = self.mat_dims(first, "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.mat_dims(p, "concat_cols")?;
            if pr != r {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![r, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Mean of the selected rows of a matrix, giving a `[d]` vector.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, GradError> {
        let (r, d) = self.mat_dims(x, "mean_rows")?;
        if rows.is_empty() {
            return Err(GradError::Shape("mean_rows: no rows selected".into()));
        }
        let vx = self.value(x);
        let mut out = vec![F::zero(); d];
        for &i in rows {
            if i >= r {
                return Err(GradError::Index { index: i, bound: r });
            }
            for (o, &v) in out.iter_mut().zip(vx.row(i)) {
                *o = *o + v;
            }
        }
        let inv = F::one() / F::lit(rows.len() as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        let t = Tensor::vector(out);
        Ok(self.push(t, Op::MeanRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Scales a vector to unit L2 norm. A zero vector maps to zero.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var, GradError> {
        let vx = self.value(x);
        if vx.rank() != 1 {
            return Err(GradError::Shape(format!("l2_normalize: expected vector, got {:?}", vx.shape())));
        }
        let norm = vx.data().iter().map(|&v| v * v).sum::<F>().sqrt();
        let data = if norm > F::zero() {
            vx.data().iter().map(|&v| v / norm).collect()
        } else {
            vec![F::zero(); vx.len()]
        };
        let t = Tensor::vector(data);
        Ok(self.push(t, Op::L2Normalize { x, norm }, &[x]))
    }

    /// Euclidean distance between two vectors. The gradient at `a == b` is 0.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        if self.shape(a) != self.shape(b) || self.value(a).rank() != 1 {
            return Err(shape_err("l2_distance", self.shape(a), self.shape(b)));
        }
        let d = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<F>()
            .sqrt();
        Ok(self.push(Tensor::scalar(d), Op::L2Distance(a, b), &[a, b]))
    }

    /// Mean token cross-entropy over the positions where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var, GradError> {
        let (t, v) = self.mat_dims(logits, "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(GradError::Shape(format!(
                "cross_entropy: {t} positions but {} targets / {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(GradError::EmptyMean);
        }
        let lv = self.value(logits);
        let mut probs = lv.data().to_vec();
        let mut loss = F::zero();
        for i in 0..t {
            let lane: Vec<usize> = (i * v..(i + 1) * v).collect();
            softmax_lane(&mut probs, &lane, v);
            if mask[i] {
                let y = targets[i];
                if y >= v {
                    return Err(GradError::Index { index: y, bound: v });
                }
                // -log p_y = (max - z_y) + log1p(sum of the non-max exponentials),
                // which stays accurate when p_y saturates near 1
                let row = lv.row(i);
                let (arg, max) = row
                    .iter()
                    .enumerate()
                    .fold((0, F::neg_infinity()), |(ai, am), (j, &z)| if z > am { (j, z) } else { (ai, am) });
                let rest = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != arg)
                    .map(|(_, &z)| (z - max).exp())
                    .sum::<F>();
                loss = loss + (max - row[y]) + rest.ln_1p();
            }
        }
        loss = loss / F::lit(count as f64);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Same data under a new shape with an equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, GradError> {
        let t = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse pass from a scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<(), GradError> {
        if self.backward_done {
            return Err(GradError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(GradError::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        if !nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![F::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(nodes, grads, node, &g);
            grads[id] = Some(g);
        }
        Ok(())
    }
}

/// Flat index lists of every 1-D lane along `axis`.
fn lanes(shape: &[usize], axis: usize) -> Vec<Vec<usize>> {
    match (shape.len(), axis) {
        (1, _) => vec![(0..shape[0]).collect()],
        (_, 1) => (0..shape[0]).map(|i| (i * shape[1]..(i + 1) * shape[1]).collect()).collect(),
        _ => (0..shape[1]).map(|j| (0..shape[0]).map(|i| i * shape[1] + j).collect()).collect(),
    }
}

/// In-place softmax over the first `live` entries of `lane`; the rest become 0.
fn softmax_lane<F: Real>(buf: &mut [F], lane: &[usize], live: usize) {
    let max = lane[..live].iter().map(|&i| buf[i]).fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for &i in &lane[..live] {
        let e = (buf[i] - max).exp();
        buf[i] = e;
        total = total + e;
    }
    for &i in &lane[..live] {
        buf[i] = buf[i] / total;
    }
    for &i in &lane[live..] {
        buf[i] = F::zero();
    }
}

/// Returns (gelu(x), gelu'(x)).
fn gelu<F: Real>(x: F) -> (F, F) {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = F::lit(0.044715);
    let half = F::lit(0.5);
    let three = F::lit(3.0);
    let u = c * (x + k * x * x * x);
    // exp-based tanh; libm tanh dominates small forward passes otherwise
    let two = F::lit(2.0);
    let th = F::one() - two / ((two * u).exp() + F::one());
    let y = half * x * (F::one() + th);
    let du = c * (F::one() + three * k * x * x);
    let dy = half * (F::one() + th) + half * x * (F::one() - th * th) * du;
    (y, dy)
}

fn acc<F: Real>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    v: Var,
    f: impl FnOnce(&mut [F]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let n = nodes[v.0].value.len();
    let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
    f(slot);
}

fn backprop<F: Real>(nodes: &[Node<F>], grads: &mut [Option<Vec<F>>], node: &Node<F>, g: &[F]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            acc(nodes, grads, *a, |ga| F::gemm(m, n, k, g, false, val(*b).data(), true, ga, true));
            acc(nodes, grads, *b, |gb| F::gemm(k, m, n, val(*a).data(), true, g, false, gb, true));
        }
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |ga| add_into(ga, g));
            acc(nodes, grads, *b, |gb| add_into(gb, g));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |ga| add_into(ga, g));
            acc(nodes, grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(o, &d)| *o = *o - d));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            acc(nodes, grads, *a, |ga| {
                for ((o, &d), &y) in ga.iter_mut().zip(g).zip(vb) {
                    *o = *o + d * y;
                }
            });
            acc(nodes, grads, *b, |gb| {
                for ((o, &d), &x) in gb.iter_mut().zip(g).zip(va) {
                    *o = *o + d * x;
                }
            });
        }
        Op::AddBias(x, bias) => {
            acc(nodes, grads, *x, |gx| add_into(gx, g));
            let d = val(*bias).len();
            acc(nodes, grads, *bias, |gb| {
                for row in g.chunks(d) {
                    add_into(gb, row);
                }
            });
        }
        Op::Scale(x, c) => {
            acc(nodes, grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d * *c));
        }
        Op::AddScalar(x) => acc(nodes, grads, *x, |gx| add_into(gx, g)),
        Op::Transpose(x) => {
            let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
            acc(nodes, grads, *x, |gx| {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = gx[i * c + j] + g[j * r + i];
                    }
                }
            });
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let shape = node.value.shape();
            acc(nodes, grads, *x, |gx| {
                for lane in lanes(shape, *axis) {
                    softmax_lane_grad(gx, g, y, &lane);
                }
            });
        }
        Op::CausalSoftmax(x) => {
            let y = node.value.data();
            let c = node.value.shape()[1];
            acc(nodes, grads, *x, |gx| {
                for i in 0..node.value.shape()[0] {
                    let lane: Vec<usize> = (i * c..i * c + i + 1).collect();
                    softmax_lane_grad(gx, g, y, &lane);
                }
            });
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let d = val(*gain).len();
            let gv = val(*gain).data();
            acc(nodes, grads, *x, |gx| {
                let inv_d = F::one() / F::lit(d as f64);
                for (r, ((gx_row, g_row), h_row)) in
                    gx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate()
                {
                    let dh: Vec<F> = g_row.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                    let mean_dh = dh.iter().copied().sum::<F>() * inv_d;
                    let mean_dh_h = dh.iter().zip(h_row).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
                    for j in 0..d {
                        gx_row[j] = gx_row[j] + rstd[r] * (dh[j] - mean_dh - h_row[j] * mean_dh_h);
                    }
                }
            });
            acc(nodes, grads, *gain, |gg| {
                for (g_row, h_row) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] = gg[j] + g_row[j] * h_row[j];
                    }
                }
            });
            acc(nodes, grads, *bias, |gb| {
                for row in g.chunks(d) {
                    add_into(gb, row);
                }
            });
        }
        Op::Gelu(x) => {
            let xv = val(*x).data();
            acc(nodes, grads, *x, |gx| {
                for ((o, &d), &v) in gx.iter_mut().zip(g).zip(xv) {
                    *o = *o + d * gelu(v).1;
                }
            });
        }
        Op::Relu(x) => {
            let xv = val(*x).data();
            acc(nodes, grads, *x, |gx| {
                for ((o, &d), &v) in gx.iter_mut().zip(g).zip(xv) {
                    if v > F::zero() {
                        *o = *o + d;
                    }
                }
            });
        }
        Op::Embedding { table, ids } => {
            let d = val(*table).shape()[1];
            acc(nodes, grads, *table, |gt| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            });
        }
        Op::SliceCols { x, start } => {
            let c = val(*x).shape()[1];
            let w = node.value.shape()[1];
            acc(nodes, grads, *x, |gx| {
                for (i, g_row) in g.chunks(w).enumerate() {
                    add_into(&mut gx[i * c + start..i * c + start + w], g_row);
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = node.value.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let w = val(p).shape()[1];
                acc(nodes, grads, p, |gp| {
                    for (i, gp_row) in gp.chunks_mut(w).enumerate() {
                        add_into(gp_row, &g[i * total + offset..i * total + offset + w]);
                    }
                });
                offset += w;
            }
        }
        Op::MeanRows { x, rows } => {
            let d = node.value.len();
            let inv = F::one() / F::lit(rows.len() as f64);
            acc(nodes, grads, *x, |gx| {
                for &r in rows {
                    for j in 0..d {
                        gx[r * d + j] = gx[r * d + j] + g[j] * inv;
                    }
                }
            });
        }
        Op::L2Normalize { x, norm } => {
            if *norm == F::zero() {
                acc(nodes, grads, *x, |_| {});
            } else {
                let y = node.value.data();
                let dot = y.iter().zip(g).map(|(&a, &b)| a * b).sum::<F>();
                acc(nodes, grads, *x, |gx| {
                    for ((o, &d), &yi) in gx.iter_mut().zip(g).zip(y) {
                        *o = *o + (d - yi * dot) / *norm;
                    }
                });
            }
        }
        Op::L2Distance(a, b) => {
            let dist = node.value.item();
            if dist == F::zero() {
                acc(nodes, grads, *a, |_| {});
                acc(nodes, grads, *b, |_| {});
            } else {
                let s = g[0] / dist;
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(nodes, grads, *a, |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(va).zip(vb) {
                        *o = *o + (x - y) * s;
                    }
                });
                acc(nodes, grads, *b, |gb| {
                    for ((o, &x), &y) in gb.iter_mut().zip(va).zip(vb) {
                        *o = *o - (x - y) * s;
                    }
                });
            }
        }
        Op::CrossEntropy { logits, targets, mask, probs } => {
            let v = val(*logits).shape()[1];
            let count = mask.iter().filter(|&&m| m).count();
            let s = g[0] / F::lit(count as f64);
            acc(nodes, grads, *logits, |gl| {
                for (i, (&y, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..v {
                        let onehot = if j == y { F::one() } else { F::zero() };
                        gl[i * v + j] = gl[i * v + j] + (probs[i * v + j] - onehot) * s;
                    }
                }
            });
        }
        Op::Sum(x) => acc(nodes, grads, *x, |gx| gx.iter_mut().for_each(|o| *o = *o + g[0])),
        Op::Reshape(x) => acc(nodes, grads, *x, |gx| add_into(gx, g)),
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o = *o + s;
    }
}

fn softmax_lane_grad<F: Real>(gx: &mut [F], g: &[F], y: &[F], lane: &[usize]) {
    let dot = lane.iter().map(|&i| g[i] * y[i]).sum::<F>();
    for &i in lane {
        gx[i] = gx[i] + y[i] * (g[i] - dot);
    }
}
