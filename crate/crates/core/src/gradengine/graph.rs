//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order, so [`Graph::backward`] is a single reverse
//! sweep that visits each node once and sums gradient contributions from all
//! consumers of a node.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::gradengine::params::ParamStore;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Array2<f64>),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SquaredL2(Var),
    RowSum(Var),
    GroupScores(Var, Var, usize),
    GroupMix(Var, Var, usize),
    MaskedPrefix(Var, Var, bool),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// A computation record.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
    bindings: Vec<(String, Var)>,
    finite_check: bool,
}

fn dims(a: &Array2<f64>) -> (usize, usize) {
    a.dim()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Debug mode: every op fails with [`Error::NonFinite`] as soon as it
    /// produces a NaN or infinity.
    pub fn with_finite_check(mut self) -> Self {
        self.finite_check = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter bindings created by [`Graph::param`], in creation order.
    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        if self.finite_check && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{op:?}")));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf; backward never computes its gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        let v = self.leaf(value);
        self.bindings.push((name.to_string(), v));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::Shape {
                op: "matmul",
                lhs: dims(av),
                rhs: dims(bv),
            });
        }
        let out = av.dot(bv);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    /// Elementwise sum. `b` may also be a `1×C` row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ng = self.needs(&[a, b]);
        if sa == sb {
            let out = self.value(a) + self.value(b);
            self.push(out, Op::Add(a, b), ng)
        } else if sb.0 == 1 && sb.1 == sa.1 {
            let out = self.value(a) + self.value(b);
            self.push(out, Op::AddRow(a, b), ng)
        } else {
            Err(Error::Shape {
                op: "add",
                lhs: sa,
                rhs: sb,
            })
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Elementwise product with a constant array (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Result<Var> {
        let sa = self.shape(a);
        if sa != c.dim() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: sa,
                rhs: c.dim(),
            });
        }
        let out = self.value(a) * &c;
        let ng = self.needs(&[a]);
        self.push(out, Op::MulConst(a, c), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a) * s;
        let ng = self.needs(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).mapv(f);
        let ng = self.needs(&[a]);
        self.push(out, op, ng)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log; any non-positive input is a domain error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                message: format!("non-positive input {bad}"),
            });
        }
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, |v| v.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Row-wise softmax (over the last axis).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row /= total;
        }
        let ng = self.needs(&[a]);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: (0, 0),
                rhs: (0, 0),
            });
        };
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first),
                    rhs: self.shape(p),
                });
            }
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        let ng = self.needs(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a);
        if start > end || end > sa.1 {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: sa,
                rhs: (start, end),
            });
        }
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.needs(&[a]);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let sa = self.shape(a);
        if sa.0 * sa.1 != rows * cols {
            return Err(Error::Shape {
                op: "reshape",
                lhs: sa,
                rhs: (rows, cols),
            });
        }
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).expect("size checked");
        let ng = self.needs(&[a]);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.needs(&[a]);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Shape {
                op: "mean",
                lhs: v.dim(),
                rhs: (1, 1),
            });
        }
        let out = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        let ng = self.needs(&[a]);
        self.push(out, Op::Mean(a), ng)
    }

    /// Sum of squares of all entries.
    pub fn squared_l2(&mut self, a: Var) -> Result<Var> {
        let out = Array2::from_elem((1, 1), self.value(a).iter().map(|v| v * v).sum());
        let ng = self.needs(&[a]);
        self.push(out, Op::SquaredL2(a), ng)
    }

    /// Sum over columns: `R×C -> R×1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.needs(&[a]);
        self.push(out, Op::RowSum(a), ng)
    }

    /// Grouped `A·Bᵀ`: both inputs stack `G` blocks of `n` rows; block `g` of
    /// the `G·n × n` output is `a_g · b_gᵀ`.
    pub fn group_scores(&mut self, a: Var, b: Var, n: usize) -> Result<Var> {
        self.same_shape("group_scores", a, b)?;
        let (rows, _) = self.shape(a);
        if n == 0 || rows % n != 0 {
            return Err(Error::Shape {
                op: "group_scores",
                lhs: (rows, n),
                rhs: (n, n),
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Array2::zeros((rows, n));
        for g in 0..rows / n {
            let r = g * n..(g + 1) * n;
            let block = av.slice(s![r.clone(), ..]).dot(&bv.slice(s![r.clone(), ..]).t());
            out.slice_mut(s![r, ..]).assign(&block);
        }
        let ng = self.needs(&[a, b]);
        self.push(out, Op::GroupScores(a, b, n), ng)
    }

    /// Grouped `A·H`: `a` is `G·n × n`, `h` is `G·n × w`; block `g` of the
    /// output is `a_g · h_g`.
    pub fn group_mix(&mut self, a: Var, h: Var, n: usize) -> Result<Var> {
        let (sa, sh) = (self.shape(a), self.shape(h));
        if sa.1 != n || sa.0 != sh.0 || n == 0 || sa.0 % n != 0 {
            return Err(Error::Shape {
                op: "group_mix",
                lhs: sa,
                rhs: sh,
            });
        }
        let (av, hv) = (self.value(a), self.value(h));
        let mut out = Array2::zeros(sh);
        for g in 0..sa.0 / n {
            let r = g * n..(g + 1) * n;
            let block = av.slice(s![r.clone(), ..]).dot(&hv.slice(s![r.clone(), ..]));
            out.slice_mut(s![r, ..]).assign(&block);
        }
        let ng = self.needs(&[a, h]);
        self.push(out, Op::GroupMix(a, h, n), ng)
    }

    /// Autoregressive masked linear map. For `x: R×M` and `w: M×D`, output row
    /// `r·M + i` is `Σ_j x[r,j]·w[j,:]` over the positions `j` that precede `i`
    /// (`j < i`, or `j > i` when `reverse`). The output is `R·M × D`.
    pub fn masked_prefix(&mut self, x: Var, w: Var, reverse: bool) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.1 != sw.0 {
            return Err(Error::Shape {
                op: "masked_prefix",
                lhs: sx,
                rhs: sw,
            });
        }
        let (rows, m) = sx;
        let d = sw.1;
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = Array2::zeros((rows * m, d));
        let mut acc = vec![0.0; d];
        for r in 0..rows {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for step in 0..m {
                let i = if reverse { m - 1 - step } else { step };
                out.row_mut(r * m + i)
                    .as_slice_mut()
                    .expect("contiguous")
                    .copy_from_slice(&acc);
                let xi = xv[[r, i]];
                for (a, &wv) in acc.iter_mut().zip(wv.row(i)) {
                    *a += xi * wv;
                }
            }
        }
        let ng = self.needs(&[x, w]);
        self.push(out, Op::MaskedPrefix(x, w, reverse), ng)
    }

    /// Reverse pass from a `1×1` root. Gradients of every node reachable from
    /// the root become available through [`Graph::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                lhs: shape,
                rhs: (1, 1),
            });
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &gout, &mut grads);
            }
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, gout: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        let mut acc = |v: Var, delta: Array2<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => *g += &delta,
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, gout.dot(&val(*b).t()));
                acc(*b, val(*a).t().dot(gout));
            }
            Op::Add(a, b) => {
                acc(*a, gout.clone());
                acc(*b, gout.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, gout.clone());
                acc(*b, gout.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Sub(a, b) => {
                acc(*a, gout.clone());
                acc(*b, -gout);
            }
            Op::Mul(a, b) => {
                acc(*a, gout * val(*b));
                acc(*b, gout * val(*a));
            }
            Op::MulConst(a, c) => acc(*a, gout * c),
            Op::Scale(a, s) => acc(*a, gout * *s),
            Op::Exp(a) => acc(*a, gout * out),
            Op::Log(a) => acc(*a, gout / val(*a)),
            Op::Tanh(a) => {
                let mut d = gout.clone();
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= 1.0 - y * y);
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = gout.clone();
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= y * (1.0 - y));
                acc(*a, d);
            }
            Op::Relu(a) => {
                let mut d = gout.clone();
                Zip::from(&mut d)
                    .and(val(*a))
                    .for_each(|d, &x| *d = if x > 0.0 { *d } else { 0.0 });
                acc(*a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let mut d = gout.clone();
                Zip::from(&mut d)
                    .and(val(*a))
                    .for_each(|d, &x| *d = if x >= *lo && x <= *hi { *d } else { 0.0 });
                acc(*a, d);
            }
            Op::Softmax(a) => {
                let mut d = gout * out;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let dot = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d -= y * dot);
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    acc(p, gout.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(val(*a).dim());
                let w = gout.ncols();
                d.slice_mut(s![.., *start..*start + w]).assign(gout);
                acc(*a, d);
            }
            Op::Reshape(a) => {
                let flat: Vec<f64> = gout.iter().copied().collect();
                acc(*a, Array2::from_shape_vec(val(*a).dim(), flat).expect("same size"));
            }
            Op::Sum(a) => acc(*a, Array2::from_elem(val(*a).dim(), gout[[0, 0]])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, Array2::from_elem(val(*a).dim(), gout[[0, 0]] / n));
            }
            Op::SquaredL2(a) => acc(*a, val(*a) * (2.0 * gout[[0, 0]])),
            Op::RowSum(a) => {
                let d = Array2::from_shape_fn(val(*a).dim(), |(r, _)| gout[[r, 0]]);
                acc(*a, d);
            }
            Op::GroupScores(a, b, n) => {
                let (av, bv) = (val(*a), val(*b));
                let mut da = Array2::zeros(av.dim());
                let mut db = Array2::zeros(bv.dim());
                for g in 0..av.nrows() / n {
                    let r = g * n..(g + 1) * n;
                    let gb = gout.slice(s![r.clone(), ..]);
                    da.slice_mut(s![r.clone(), ..])
                        .assign(&gb.dot(&bv.slice(s![r.clone(), ..])));
                    db.slice_mut(s![r.clone(), ..])
                        .assign(&gb.t().dot(&av.slice(s![r, ..])));
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::GroupMix(a, h, n) => {
                let (av, hv) = (val(*a), val(*h));
                let mut da = Array2::zeros(av.dim());
                let mut dh = Array2::zeros(hv.dim());
                for g in 0..av.nrows() / n {
                    let r = g * n..(g + 1) * n;
                    let gb = gout.slice(s![r.clone(), ..]);
                    da.slice_mut(s![r.clone(), ..])
                        .assign(&gb.dot(&hv.slice(s![r.clone(), ..]).t()));
                    dh.slice_mut(s![r.clone(), ..])
                        .assign(&av.slice(s![r, ..]).t().dot(&gb));
                }
                acc(*a, da);
                acc(*h, dh);
            }
            Op::MaskedPrefix(x, w, reverse) => {
                let (xv, wv) = (val(*x), val(*w));
                let (rows, m) = xv.dim();
                let d = wv.ncols();
                let mut dx = Array2::zeros(xv.dim());
                let mut dw = Array2::zeros(wv.dim());
                let mut suffix = vec![0.0; d];
                for r in 0..rows {
                    suffix.iter_mut().for_each(|s| *s = 0.0);
                    // Walk positions from last to first in autoregressive order;
                    // `suffix` then holds the summed output gradient of every
                    // position that reads the current one.
                    for step in 0..m {
                        let i = if *reverse { step } else { m - 1 - step };
                        let xi = xv[[r, i]];
                        let mut dot = 0.0;
                        for ((dwv, &wv), &sv) in
                            dw.row_mut(i).iter_mut().zip(wv.row(i)).zip(suffix.iter())
                        {
                            dot += wv * sv;
                            *dwv += xi * sv;
                        }
                        dx[[r, i]] = dot;
                        for (sv, &g) in suffix.iter_mut().zip(gout.row(r * m + i)) {
                            *sv += g;
                        }
                    }
                }
                acc(*x, dx);
                acc(*w, dw);
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
