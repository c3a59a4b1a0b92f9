//! Minimal reverse-mode automatic differentiation on dense `f64` matrices.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] then
//! walks the record in reverse and accumulates adjoints. Rows are samples
//! and columns features throughout, so one graph evaluates a minibatch.

use ndarray::{s, Array2, Axis};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// Adds a `1 x m` row to every row.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Elementwise map with its derivative stored at forward time.
    Unary(Var, Array2<f64>),
    Sum(Var),
    RowMean(Var),
    /// Repeats a `B x 1` column `m` times.
    BroadcastCol(Var),
    Columns(Var, usize),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Record of one forward evaluation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    branches: Vec<bool>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Input node: a parameter or a constant. Gradients are available for
    /// every leaf.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let v = self.value(x) + self.value(row);
        self.push(v, Op::AddRow(x, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) * c;
        self.push(v, Op::Scale(x, c))
    }

    /// Elementwise `f` where `f(row, value)` returns the value and derivative.
    pub fn unary(&mut self, x: Var, f: impl Fn(usize, f64) -> (f64, f64)) -> Var {
        let input = self.value(x);
        let mut value = Array2::zeros(input.raw_dim());
        let mut deriv = Array2::zeros(input.raw_dim());
        for ((idx, &xi), (v, d)) in input.indexed_iter().zip(value.iter_mut().zip(deriv.iter_mut())) {
            (*v, *d) = f(idx.0, xi);
        }
        self.push(value, Op::Unary(x, deriv))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let active: Vec<bool> = self.value(x).iter().map(|&v| v >= 0.0).collect();
        self.branches.extend(active);
        self.unary(x, |_, v| if v >= 0.0 { (v, 1.0) } else { (0.0, 0.0) })
    }

    /// Records which side of a kink an evaluation took. Finite-difference
    /// checks compare these patterns to skip perturbations that cross one.
    pub fn note_branch(&mut self, taken: bool) {
        self.branches.push(taken);
    }

    pub fn branch_pattern(&self) -> &[bool] {
        &self.branches
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |_, v| {
            let e = v.exp();
            (e, e)
        })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |_, v| (v.ln(), 1.0 / v))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, |_, v| {
            let value = if v > 0.0 { v + (-v).exp().ln_1p() } else { v.exp().ln_1p() };
            (value, 1.0 / (1.0 + (-v).exp()))
        })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |_, v| (v * v, 2.0 * v))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |_, v| (1.0 / v, -1.0 / (v * v)))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |_, v| (v + c, 1.0))
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    /// Mean of each row as a `B x 1` node.
    pub fn row_mean(&mut self, x: Var) -> Var {
        let v = self.value(x).mean_axis(Axis(1)).expect("nonempty rows").insert_axis(Axis(1));
        self.push(v, Op::RowMean(x))
    }

    /// Repeats a `B x 1` column into `B x m`.
    pub fn broadcast_col(&mut self, x: Var, m: usize) -> Var {
        let col = self.value(x);
        assert_eq!(col.ncols(), 1, "broadcast_col expects a single column");
        let v = Array2::from_shape_fn((col.nrows(), m), |(i, _)| col[(i, 0)]);
        self.push(v, Op::BroadcastCol(x))
    }

    /// Columns `start..start + len`.
    pub fn columns(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::Columns(x, start))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(x).iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("reshape preserves the element count");
        self.push(v, Op::Reshape(x))
    }

    /// Gradients of the `1 x 1` node `output` with respect to every leaf.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones((1, 1)));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let mut acc = |v: Var, d: Array2<f64>| match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot => *slot = Some(d),
            };
            match &self.nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&self.value(*b).t()));
                    acc(*b, self.value(*a).t().dot(&g));
                }
                Op::AddRow(x, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*x, g);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, -&g);
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * self.value(*b));
                    acc(*b, g * self.value(*a));
                }
                Op::Scale(x, c) => acc(*x, g * *c),
                Op::Unary(x, deriv) => acc(*x, g * deriv),
                Op::Sum(x) => acc(*x, Array2::from_elem(self.value(*x).raw_dim(), g[(0, 0)])),
                Op::RowMean(x) => {
                    let m = self.value(*x).ncols() as f64;
                    acc(*x, Array2::from_shape_fn(self.value(*x).raw_dim(), |(r, _)| g[(r, 0)] / m));
                }
                Op::BroadcastCol(x) => acc(*x, g.sum_axis(Axis(1)).insert_axis(Axis(1))),
                Op::Columns(x, start) => {
                    let mut full = Array2::zeros(self.value(*x).raw_dim());
                    full.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*x, full);
                }
                Op::Reshape(x) => {
                    let flat: Vec<f64> = g.iter().copied().collect();
                    acc(*x, Array2::from_shape_vec(self.value(*x).raw_dim(), flat).expect("same size"));
                }
            }
        }
        Gradients(grads)
    }
}

/// Adjoints of the leaves of a graph.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Array2<f64>>>);

impl Gradients {
    /// Gradient of the output with respect to the leaf `v` (zero if
    /// unrelated).
    pub fn get(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.0[v.0].clone().unwrap_or_else(|| Array2::zeros(shape))
    }
}
