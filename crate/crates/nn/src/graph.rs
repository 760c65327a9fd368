//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass as a node on a
//! tape. Parameters are borrowed from a [`ParamStore`] and enter the tape as
//! leaves; [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of a scalar root with respect to every node.
//!
//! One graph is single-threaded. Data-parallel training builds one graph per
//! sample and sums the parameter gradients afterwards.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{NnError, Result};
use crate::params::{Mat, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How an attention mask is applied to the score matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Masked logits are set to -inf before the softmax; rows renormalise
    /// over the visible entries.
    #[default]
    Renormalize,
    /// Softmax over all entries, then element-wise product with the mask.
    /// Rows no longer sum to one.
    Hadamard,
}

enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Gelu(Var),
    Sum(Var),
    SoftmaxRows {
        x: Var,
        keep: Option<Rc<Array2<bool>>>,
        mode: MaskMode,
        // unmasked softmax, kept for the Hadamard backward rule
        full: Option<Mat>,
    },
    LayerNormRows {
        x: Var,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn check_same(op: &'static str, a: &Mat, b: &Mat) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(NnError::Shape {
            op,
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// Constant leaf. It receives a gradient but is not a parameter.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input)
    }

    pub fn scalar_input(&mut self, x: f64) -> Var {
        self.input(Array2::from_elem((1, 1), x))
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        // parameter values are read from the store, not copied
        let v = self.push(Array2::zeros((0, 0)), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    /// Copies the value of `v` into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let value = self.value(a) + self.value(b);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let value = self.value(a) - self.value(b);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let value = self.value(a) * self.value(b);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// `a (n×m) + row (1×m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != ac {
            return Err(NnError::Shape {
                op: "add_row",
                left: (ar, ac),
                right: (rr, rc),
            });
        }
        let value = self.value(a) + self.value(row);
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    /// `a (n×m) * row (1×m)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != ac {
            return Err(NnError::Shape {
                op: "mul_row",
                left: (ar, ac),
                right: (rr, rc),
            });
        }
        let value = self.value(a) * self.value(row);
        Ok(self.push(value, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        self.push(value, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(NnError::Shape {
                op: "matmul",
                left: (ar, ac),
                right: (br, bc),
            });
        }
        let value = self.value(a).dot(self.value(b));
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc {
            return Err(NnError::Shape {
                op: "matmul_t",
                left: (ar, ac),
                right: (br, bc),
            });
        }
        let value = self.value(a).dot(&self.value(b).t());
        Ok(self.push(value, Op::MatMulT(a, b)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise softmax. With `keep`, entries where `keep` is false get zero
    /// weight according to `mode`. Under [`MaskMode::Renormalize`] every row
    /// must keep at least one entry.
    pub fn softmax_rows(
        &mut self,
        x: Var,
        keep: Option<Rc<Array2<bool>>>,
        mode: MaskMode,
    ) -> Result<Var> {
        let xv = self.value(x);
        if let Some(k) = &keep {
            if k.dim() != xv.dim() {
                return Err(NnError::Shape {
                    op: "softmax_rows",
                    left: xv.dim(),
                    right: k.dim(),
                });
            }
            if mode == MaskMode::Renormalize {
                if let Some(row) = k.rows().into_iter().position(|r| !r.iter().any(|&b| b)) {
                    return Err(NnError::DegenerateMask { row });
                }
            }
        }
        let mut out = xv.clone();
        let masked_softmax = mode == MaskMode::Renormalize;
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let visible = |j: usize| match (&keep, masked_softmax) {
                (Some(k), true) => k[[i, j]],
                _ => true,
            };
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if visible(j) && v > max {
                    max = v;
                }
            }
            let mut total = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if visible(j) {
                    *v = (*v - max).exp();
                    total += *v;
                } else {
                    *v = 0.0;
                }
            }
            row.mapv_inplace(|v| v / total);
        }
        let (value, full) = match (&keep, mode) {
            (Some(k), MaskMode::Hadamard) => {
                let mut masked = out.clone();
                Zip::from(&mut masked).and(&**k).for_each(|v, &b| {
                    if !b {
                        *v = 0.0
                    }
                });
                (masked, Some(out))
            }
            _ => (out, None),
        };
        Ok(self.push(
            value,
            Op::SoftmaxRows {
                x,
                keep,
                mode,
                full,
            },
        ))
    }

    /// Normalises each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNormRows { x, inv_std })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(NnError::Shape {
                op: "slice_cols",
                left: (r, c),
                right: (r, start + len),
            });
        }
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|p| self.shape(*p).0).unwrap_or(0);
        for p in parts {
            if self.shape(*p).0 != rows {
                return Err(NnError::Shape {
                    op: "concat_cols",
                    left: self.shape(parts[0]),
                    right: self.shape(*p),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = if views.is_empty() {
            Array2::zeros((0, 0))
        } else {
            ndarray::concatenate(Axis(1), &views).expect("checked row counts")
        };
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|p| self.shape(*p).1).unwrap_or(0);
        for p in parts {
            if self.shape(*p).1 != cols {
                return Err(NnError::Shape {
                    op: "concat_rows",
                    left: self.shape(parts[0]),
                    right: self.shape(*p),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = if views.is_empty() {
            Array2::zeros((0, 0))
        } else {
            ndarray::concatenate(Axis(0), &views).expect("checked column counts")
        };
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Gathers rows by index (indices may repeat).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(NnError::Shape {
                op: "select_rows",
                left: (r, c),
                right: (bad + 1, c),
            });
        }
        let value = self.value(a).select(Axis(0), rows);
        Ok(self.push(value, Op::SelectRows(a, rows.to_vec())))
    }

    /// Reverse pass from a scalar root. The graph is left untouched and can
    /// be differentiated again.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(NnError::NonScalarRoot(shape));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, row) => {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, &g * self.value(*row));
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &g * *k),
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    acc(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    acc(&mut grads, *a, g.dot(self.value(*b)));
                    acc(&mut grads, *b, g.t().dot(self.value(*a)));
                }
                Op::Exp(a) => acc(&mut grads, *a, &g * &node.value),
                Op::Log(a) => acc(&mut grads, *a, &g / self.value(*a)),
                Op::Square(a) => acc(&mut grads, *a, &g * &(self.value(*a) * 2.0)),
                Op::Gelu(a) => acc(&mut grads, *a, &g * &self.value(*a).mapv(gelu_grad)),
                Op::Sum(a) => {
                    let gs = g[[0, 0]];
                    acc(
                        &mut grads,
                        *a,
                        Array2::from_elem(self.value(*a).raw_dim(), gs),
                    );
                }
                Op::SoftmaxRows {
                    x,
                    keep,
                    mode,
                    full,
                } => {
                    let (y, gy) = match (mode, keep, full) {
                        (MaskMode::Hadamard, Some(k), Some(full)) => {
                            let mut gm = g.clone();
                            Zip::from(&mut gm).and(&**k).for_each(|v, &b| {
                                if !b {
                                    *v = 0.0
                                }
                            });
                            (full, gm)
                        }
                        _ => (&node.value, g.clone()),
                    };
                    let mut dx = Array2::zeros(y.raw_dim());
                    Zip::from(dx.rows_mut())
                        .and(y.rows())
                        .and(gy.rows())
                        .for_each(|mut d, yr, gr| {
                            let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                            Zip::from(&mut d)
                                .and(&yr)
                                .and(&gr)
                                .for_each(|d, &yv, &gv| *d = yv * (gv - dot));
                        });
                    acc(&mut grads, *x, dx);
                }
                Op::LayerNormRows { x, inv_std } => {
                    let y = &node.value;
                    let cols = y.ncols() as f64;
                    let mut dx = Array2::zeros(y.raw_dim());
                    for (i, ((mut d, yr), gr)) in dx
                        .rows_mut()
                        .into_iter()
                        .zip(y.rows())
                        .zip(g.rows())
                        .enumerate()
                    {
                        let mean_g = gr.sum() / cols;
                        let mean_gy: f64 =
                            gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / cols;
                        let is = inv_std[i];
                        Zip::from(&mut d)
                            .and(&yr)
                            .and(&gr)
                            .for_each(|d, &yv, &gv| *d = is * (gv - mean_g - yv * mean_gy));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SliceCols(a, start) => {
                    let mut full = Array2::zeros(self.value(*a).raw_dim());
                    full.slice_mut(s![.., *start..*start + g.ncols()])
                        .assign(&g);
                    acc(&mut grads, *a, full);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        acc(&mut grads, *p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::SelectRows(a, rows) => {
                    let mut full = Array2::zeros(self.value(*a).raw_dim());
                    for (gi, &src) in rows.iter().enumerate() {
                        let mut dst = full.row_mut(src);
                        dst += &g.row(gi);
                    }
                    acc(&mut grads, *a, full);
                }
            }
            grads[idx] = Some(g);
        }

        let params = self
            .param_vars
            .iter()
            .map(|(id, v)| (*id, *v))
            .collect::<Vec<_>>();
        Ok(Gradients { grads, params })
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, delta: Mat) {
    match &mut grads[v.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the root with respect to any node; `None` when the node
    /// does not influence the root.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Adds parameter gradients into `out`, which is aligned with the store's
    /// registration order.
    pub fn accumulate_into(&self, out: &mut [Mat]) {
        for (id, v) in &self.params {
            if let Some(g) = self.wrt(*v) {
                out[id.index()] += g;
            }
        }
    }
}
