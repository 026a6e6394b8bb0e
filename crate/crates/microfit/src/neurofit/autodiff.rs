//! Reverse-mode automatic differentiation over a tape of 2-D tensors.
//!
//! The tape is rebuilt per forward pass; `backward` walks it in reverse and
//! accumulates gradients into dense arrays. Primitives cover exactly what
//! the MLP encoders and the physics decoders need: elementwise arithmetic,
//! matmul, exp/log/erf/sqrt/power, sigmoid/softplus/prelu, column
//! select/stack, clamp and max-with-scalar, sum and mean.

use ndarray::{Array2, Axis};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tid(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// x + row-vector broadcast over rows (bias add).
    AddRow(usize, usize),
    MatMul(usize, usize),
    Neg(usize),
    Exp(usize),
    Ln(usize),
    Erf(usize),
    Sqrt(usize),
    /// x^n for integer n.
    Powi(usize, i32),
    /// a·x + b with scalar constants; b never enters the backward pass.
    Affine(usize, f64),
    Sigmoid(usize),
    Softplus(usize),
    /// PReLU with a 1×1 learnable slope node.
    Prelu { x: usize, slope: usize },
    /// Hard clamp to a constant interval; gradient is zero where clamped.
    ClampConst(usize, f64, f64),
    /// max(x, c) elementwise with constant c.
    MaxScalar(usize, f64),
    /// Column `j` of a matrix as an n×1 tensor.
    Col(usize, usize),
    /// Horizontal concatenation of n×1 columns.
    StackCols(Vec<usize>),
    Sum(usize),
    Mean(usize),
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Gradients of a scalar output w.r.t. every tape node.
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, id: Tid) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a node, zero-filled if the node does not influence the
    /// output.
    pub fn get_or_zero(&self, id: Tid, shape: (usize, usize)) -> Array2<f64> {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    pub fn value(&self, id: Tid) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, id: Tid) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.dim(), (1, 1));
        self.nodes[id.0].value[(0, 0)]
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Tid {
        self.nodes.push(Node { op, value });
        Tid(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Tid {
        self.push(Op::Leaf, value)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> Tid {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Tid {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Tid, b: Tid) -> Tid {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Tid {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn div(&mut self, a: Tid, b: Tid) -> Tid {
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(Op::Div(a.0, b.0), v)
    }

    /// `x + bias` where bias is 1×w and x is n×w.
    pub fn add_row(&mut self, x: Tid, bias: Tid) -> Tid {
        let v = &self.nodes[x.0].value + &self.nodes[bias.0].value;
        self.push(Op::AddRow(x.0, bias.0), v)
    }

    pub fn matmul(&mut self, a: Tid, b: Tid) -> Tid {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(Op::MatMul(a.0, b.0), v)
    }

    pub fn neg(&mut self, x: Tid) -> Tid {
        let v = -&self.nodes[x.0].value;
        self.push(Op::Neg(x.0), v)
    }

    pub fn exp(&mut self, x: Tid) -> Tid {
        let v = self.nodes[x.0].value.mapv(f64::exp);
        self.push(Op::Exp(x.0), v)
    }

    pub fn ln(&mut self, x: Tid) -> Tid {
        let v = self.nodes[x.0].value.mapv(f64::ln);
        self.push(Op::Ln(x.0), v)
    }

    pub fn erf(&mut self, x: Tid) -> Tid {
        let v = self.nodes[x.0].value.mapv(libm::erf);
        self.push(Op::Erf(x.0), v)
    }

    pub fn sqrt(&mut self, x: Tid) -> Tid {
        let v = self.nodes[x.0].value.mapv(f64::sqrt);
        self.push(Op::Sqrt(x.0), v)
    }

    pub fn powi(&mut self, x: Tid, n: i32) -> Tid {
        let v = self.nodes[x.0].value.mapv(|t| t.powi(n));
        self.push(Op::Powi(x.0, n), v)
    }

    /// a·x + b elementwise with constants.
    pub fn affine(&mut self, x: Tid, a: f64, b: f64) -> Tid {
        let v = self.nodes[x.0].value.mapv(|t| a * t + b);
        self.push(Op::Affine(x.0, a), v)
    }

    pub fn scale(&mut self, x: Tid, a: f64) -> Tid {
        self.affine(x, a, 0.0)
    }

    pub fn sigmoid(&mut self, x: Tid) -> Tid {
        let v = self.nodes[x.0].value.mapv(sigmoid);
        self.push(Op::Sigmoid(x.0), v)
    }

    pub fn softplus(&mut self, x: Tid) -> Tid {
        let v = self.nodes[x.0].value.mapv(softplus);
        self.push(Op::Softplus(x.0), v)
    }

    /// PReLU with slope given by a 1×1 node. The non-differentiable point
    /// x = 0 uses the positive-branch slope of 1.
    pub fn prelu(&mut self, x: Tid, slope: Tid) -> Tid {
        let s = self.scalar(slope);
        let v = self.nodes[x.0].value.mapv(|t| if t >= 0.0 { t } else { s * t });
        self.push(Op::Prelu { x: x.0, slope: slope.0 }, v)
    }

    pub fn clamp_const(&mut self, x: Tid, lo: f64, hi: f64) -> Tid {
        let v = self.nodes[x.0].value.mapv(|t| t.clamp(lo, hi));
        self.push(Op::ClampConst(x.0, lo, hi), v)
    }

    pub fn max_scalar(&mut self, x: Tid, c: f64) -> Tid {
        let v = self.nodes[x.0].value.mapv(|t| t.max(c));
        self.push(Op::MaxScalar(x.0, c), v)
    }

    pub fn col(&mut self, x: Tid, j: usize) -> Tid {
        let v = self.nodes[x.0]
            .value
            .column(j)
            .to_owned()
            .insert_axis(Axis(1));
        self.push(Op::Col(x.0, j), v)
    }

    pub fn stack_cols(&mut self, cols: &[Tid]) -> Tid {
        let n = self.nodes[cols[0].0].value.nrows();
        let mut v = Array2::zeros((n, cols.len()));
        for (j, c) in cols.iter().enumerate() {
            v.column_mut(j).assign(&self.nodes[c.0].value.column(0));
        }
        self.push(Op::StackCols(cols.iter().map(|c| c.0).collect()), v)
    }

    pub fn sum(&mut self, x: Tid) -> Tid {
        let s = self.nodes[x.0].value.sum();
        self.push(Op::Sum(x.0), Array2::from_elem((1, 1), s))
    }

    pub fn mean(&mut self, x: Tid) -> Tid {
        let v = &self.nodes[x.0].value;
        let m = v.sum() / v.len() as f64;
        self.push(Op::Mean(x.0), Array2::from_elem((1, 1), m))
    }

    /// Reverse sweep from a scalar (1×1) output node.
    pub fn backward(&self, output: Tid) -> Grads {
        assert_eq!(
            self.nodes[output.0].value.dim(),
            (1, 1),
            "backward requires a scalar output"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=output.0).rev() {
            let go = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let acc = |grads: &mut Vec<Option<Array2<f64>>>, j: usize, g: Array2<f64>| {
                match &mut grads[j] {
                    Some(existing) => *existing += &g,
                    slot @ None => *slot = Some(g),
                }
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *a, go.clone());
                    acc(&mut grads, *b, go.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, go.clone());
                    acc(&mut grads, *b, -&go);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &go * &self.nodes[*b].value);
                    acc(&mut grads, *b, &go * &self.nodes[*a].value);
                }
                Op::Div(a, b) => {
                    let vb = &self.nodes[*b].value;
                    acc(&mut grads, *a, &go / vb);
                    let va = &self.nodes[*a].value;
                    acc(&mut grads, *b, -&(&go * va) / &(vb * vb));
                }
                Op::AddRow(x, bias) => {
                    acc(&mut grads, *x, go.clone());
                    let gb = go.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *bias, gb);
                }
                Op::MatMul(a, b) => {
                    let ga = go.dot(&self.nodes[*b].value.t());
                    let gb = self.nodes[*a].value.t().dot(&go);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Neg(x) => acc(&mut grads, *x, -&go),
                Op::Exp(x) => acc(&mut grads, *x, &go * &self.nodes[i].value),
                Op::Ln(x) => acc(&mut grads, *x, &go / &self.nodes[*x].value),
                Op::Erf(x) => {
                    let c = 2.0 / std::f64::consts::PI.sqrt();
                    let d = self.nodes[*x].value.mapv(|t| c * (-t * t).exp());
                    acc(&mut grads, *x, &go * &d);
                }
                Op::Sqrt(x) => {
                    let d = self.nodes[i].value.mapv(|y| 0.5 / y);
                    acc(&mut grads, *x, &go * &d);
                }
                Op::Powi(x, n) => {
                    let nf = *n as f64;
                    let d = self.nodes[*x].value.mapv(|t| nf * t.powi(n - 1));
                    acc(&mut grads, *x, &go * &d);
                }
                Op::Affine(x, a) => acc(&mut grads, *x, go.mapv(|g| g * a)),
                Op::Sigmoid(x) => {
                    let d = self.nodes[i].value.mapv(|s| s * (1.0 - s));
                    acc(&mut grads, *x, &go * &d);
                }
                Op::Softplus(x) => {
                    let d = self.nodes[*x].value.mapv(sigmoid);
                    acc(&mut grads, *x, &go * &d);
                }
                Op::Prelu { x, slope } => {
                    let s = self.nodes[*slope].value[(0, 0)];
                    let vx = &self.nodes[*x].value;
                    let dx = ndarray::Zip::from(&go)
                        .and(vx)
                        .map_collect(|&g, &t| if t >= 0.0 { g } else { g * s });
                    acc(&mut grads, *x, dx);
                    let gs: f64 = ndarray::Zip::from(&go)
                        .and(vx)
                        .fold(0.0, |a, &g, &t| if t < 0.0 { a + g * t } else { a });
                    acc(&mut grads, *slope, Array2::from_elem((1, 1), gs));
                }
                Op::ClampConst(x, lo, hi) => {
                    let vx = &self.nodes[*x].value;
                    let dx = ndarray::Zip::from(&go)
                        .and(vx)
                        .map_collect(|&g, &t| if t > *lo && t < *hi { g } else { 0.0 });
                    acc(&mut grads, *x, dx);
                }
                Op::MaxScalar(x, c) => {
                    let vx = &self.nodes[*x].value;
                    let dx = ndarray::Zip::from(&go)
                        .and(vx)
                        .map_collect(|&g, &t| if t > *c { g } else { 0.0 });
                    acc(&mut grads, *x, dx);
                }
                Op::Col(x, j) => {
                    let vx = &self.nodes[*x].value;
                    let mut g = Array2::zeros(vx.dim());
                    g.column_mut(*j).assign(&go.column(0));
                    acc(&mut grads, *x, g);
                }
                Op::StackCols(cols) => {
                    for (j, c) in cols.clone().into_iter().enumerate() {
                        let gc = go.column(j).to_owned().insert_axis(Axis(1));
                        acc(&mut grads, c, gc);
                    }
                }
                Op::Sum(x) => {
                    let vx = &self.nodes[*x].value;
                    acc(&mut grads, *x, Array2::from_elem(vx.dim(), go[(0, 0)]));
                }
                Op::Mean(x) => {
                    let vx = &self.nodes[*x].value;
                    let g = go[(0, 0)] / vx.len() as f64;
                    acc(&mut grads, *x, Array2::from_elem(vx.dim(), g));
                }
            }
        }
        Grads { grads }
    }
}
