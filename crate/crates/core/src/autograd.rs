//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! Every forward computation that needs gradients is recorded on a [`Tape`].
//! Nodes are addressed by [`Var`] handles; [`Tape::backward`] accepts several
//! seeded outputs at once so a per-sample graph can receive upstream
//! gradients from a batch-level loss.
//!
//! Vectors are represented as `1 × d` matrices throughout.

use ndarray::{Array2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `a` is `n × d`, `b` is `1 × d`, broadcast over rows.
    AddRow(Var, Var),
    Mul(Var, Var),
    /// Elementwise product with a constant matrix.
    MulConst(Var, Array2<f64>),
    Scale(Var, f64),
    Tanh(Var),
    Transpose(Var),
    /// Row-wise `x / (‖x‖ + eps)`; stores the row norms.
    NormalizeRows(Var, f64, Vec<f64>),
    /// Row softmax restricted to `mask`; masked entries are exactly 0.
    MaskedSoftmaxRows(Var, Array2<bool>),
    /// Unmasked row log-softmax.
    LogSoftmaxRows(Var),
    /// `ln(x + eps)`.
    Log(Var, f64),
    /// Sum of all entries into a `1 × 1` node.
    Sum(Var),
    /// Sum of `1 × 1` nodes.
    AddScalars(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the seeded objective with respect to `v`. Nodes that the
    /// objective does not depend on get an all-zero matrix.
    pub fn wrt(&self, v: Var) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.0]),
        }
    }

    /// True when no gradient reached `v` at all.
    pub fn is_disconnected(&self, v: Var) -> bool {
        self.grads[v.0].is_none()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant). Gradients stop here.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// New leaf holding a copy of `v`'s value; blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let value = self.value(a) * &c;
        self.push(value, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().as_standard_layout().into_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut value = x.clone();
        for (mut row, n) in value.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|v| v / (n + eps));
        }
        self.push(value, Op::NormalizeRows(a, eps, norms))
    }

    pub fn masked_softmax_rows(&mut self, a: Var, mask: Array2<bool>) -> Var {
        let value = masked_softmax_rows(self.value(a), &mask);
        self.push(value, Op::MaskedSoftmaxRows(a, mask))
    }

    /// Column softmax, expressed as transpose → row softmax → transpose.
    pub fn masked_softmax_cols(&mut self, a: Var, mask: Array2<bool>) -> Var {
        let t = self.transpose(a);
        let s = self.masked_softmax_rows(t, mask.reversed_axes());
        self.transpose(s)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push(value, Op::LogSoftmaxRows(a))
    }

    pub fn log(&mut self, a: Var, eps: f64) -> Var {
        let value = self.value(a).mapv(|v| (v + eps).ln());
        self.push(value, Op::Log(a, eps))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// `Σ a ∘ c` for a constant `c`.
    pub fn weighted_sum(&mut self, a: Var, c: Array2<f64>) -> Var {
        let m = self.mul_const(a, c);
        self.sum(m)
    }

    pub fn add_scalars(&mut self, xs: &[Var]) -> Var {
        let total: f64 = xs.iter().map(|&v| self.scalar_value(v)).sum();
        self.push(Array2::from_elem((1, 1), total), Op::AddScalars(xs.to_vec()))
    }

    /// Reverse pass from several seeded outputs. Each seed pairs a node with
    /// the gradient of the objective with respect to that node.
    pub fn backward(&self, seeds: &[(Var, Array2<f64>)]) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.dim(), self.shape(*v), "seed gradient shape mismatch");
            accumulate(&mut grads, *v, g.clone());
        }
        let top = seeds.iter().map(|(v, _)| v.0 + 1).max().unwrap_or(0);
        for idx in (0..top).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulConst(a, c) => accumulate(&mut grads, *a, &g * c),
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::Tanh(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(&node.value).for_each(|gv, &y| *gv *= 1.0 - y * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().as_standard_layout().into_owned()),
                Op::NormalizeRows(a, eps, norms) => {
                    let x = self.value(*a);
                    let mut ga = Array2::zeros(x.dim());
                    for (i, mut out) in ga.rows_mut().into_iter().enumerate() {
                        let xr = x.row(i);
                        let gr = g.row(i);
                        let n = norms[i];
                        let d = n + eps;
                        // d/dx [x / (|x| + eps)] = I/d - x xᵀ / (d² |x|)
                        let coef = if n > 0.0 { xr.dot(&gr) / (d * d * n) } else { 0.0 };
                        Zip::from(&mut out)
                            .and(&xr)
                            .and(&gr)
                            .for_each(|o, &xv, &gv| *o = gv / d - xv * coef);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::MaskedSoftmaxRows(a, mask) => {
                    let y = &node.value;
                    let mut ga = Array2::zeros(y.dim());
                    for (i, mut out) in ga.rows_mut().into_iter().enumerate() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let inner = yr.dot(&gr);
                        for j in 0..yr.len() {
                            if mask[[i, j]] {
                                out[j] = yr[j] * (gr[j] - inner);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for (i, mut out) in ga.rows_mut().into_iter().enumerate() {
                        let total: f64 = g.row(i).sum();
                        for j in 0..out.len() {
                            out[j] -= y[[i, j]].exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a, eps) => {
                    let x = self.value(*a);
                    let ga = Zip::from(&g).and(x).map_collect(|&gv, &xv| gv / (xv + eps));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::AddScalars(xs) => {
                    for x in xs {
                        accumulate(&mut grads, *x, g.clone());
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
        }
    }

    /// Convenience for a single scalar objective.
    pub fn backward_scalar(&self, loss: Var) -> Gradients {
        self.backward(&[(loss, Array2::from_elem((1, 1), 1.0))])
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Row softmax over the entries where `mask` is true, with max subtraction.
/// Rows without any valid entry come out as all zeros.
pub fn masked_softmax_rows(x: &Array2<f64>, mask: &Array2<bool>) -> Array2<f64> {
    assert_eq!(x.dim(), mask.dim(), "softmax mask shape mismatch");
    let mut out = Array2::zeros(x.dim());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let m = (0..x.ncols())
            .filter(|&j| mask[[i, j]])
            .map(|j| x[[i, j]])
            .fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for j in 0..x.ncols() {
            if mask[[i, j]] {
                let e = (x[[i, j]] - m).exp();
                row[j] = e;
                total += e;
            }
        }
        row.mapv_inplace(|v| v / total);
    }
    out
}
