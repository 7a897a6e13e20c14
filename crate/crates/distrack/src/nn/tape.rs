//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Every forward pass builds a fresh tape; [`Tape::backward`] walks it once
//! in reverse and returns gradients indexed by parameter id. Values are
//! plain `Array2<f64>` (scalars are `1x1`), which keeps the op set small:
//! matmul, elementwise arithmetic, row softmax, slicing/concatenation,
//! im2col for convolutions, row layer-norm and a fused logistic loss.

use std::collections::HashMap;

use ndarray::{Array2, Axis};

use super::params::ParamStore;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Convolution geometry for [`Tape::im2col`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }
}

enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    /// `(n, m) + (1, m)`, broadcast over rows.
    AddRowVec(Var, Var),
    /// `(n, m) + (n, 1)`, broadcast over columns.
    AddColVec(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    SoftmaxRows(Var),
    SumAll(Var),
    MeanAll(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Im2Col(Var, ConvGeom),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    /// Mean binary cross-entropy with logits against constant targets.
    BceWithLogits { logits: Var, targets: Array2<f64> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, Var>,
}

/// Gradients indexed by parameter id; entries stay `None` for parameters
/// the loss does not reach.
pub struct Gradients {
    pub by_param: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn zeros(n_params: usize) -> Self {
        Gradients {
            by_param: (0..n_params).map(|_| None).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        assert_eq!(self.by_param.len(), other.by_param.len());
        for (slot, theirs) in self.by_param.iter_mut().zip(&other.by_param) {
            if let Some(g) = theirs {
                match slot {
                    Some(mine) => *mine += g,
                    None => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for slot in self.by_param.iter_mut().flatten() {
            slot.mapv_inplace(|v| v * factor);
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "expected a scalar node");
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Bind a parameter from the store; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, index: usize) -> Var {
        if let Some(&v) = self.param_nodes.get(&index) {
            return v;
        }
        let v = self.push(store.value(index).clone(), Op::Param(index));
        self.param_nodes.insert(index, v);
        v
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

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) / self.value(b);
        self.push(value, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.push(value, Op::AddScalar(a, c))
    }

    pub fn add_row_vec(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        debug_assert_eq!(self.shape(a).1, self.shape(row).1);
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRowVec(a, row))
    }

    pub fn add_col_vec(&mut self, a: Var, col: Var) -> Var {
        debug_assert_eq!(self.shape(col).1, 1);
        debug_assert_eq!(self.shape(a).0, self.shape(col).0);
        let value = self.value(a) + self.value(col);
        self.push(value, Op::AddColVec(a, col))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        self.push(value, Op::Abs(a))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| x.max(y));
        self.push(value, Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| x.min(y));
        self.push(value, Op::Minimum(a, b))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        self.push(value, Op::MeanAll(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut value = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            let n = v.dim().0;
            value.slice_mut(ndarray::s![at..at + n, ..]).assign(v);
            at += n;
        }
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self
            .value(a)
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        self.push(value, Op::SliceRows(a, start, len))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            let n = v.dim().1;
            value.slice_mut(ndarray::s![.., at..at + n]).assign(v);
            at += n;
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self
            .value(a)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(value, Op::SliceCols(a, start, len))
    }

    /// Select rows by index; duplicates are allowed.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let src = self.value(a);
        let cols = src.dim().1;
        let mut value = Array2::zeros((indices.len(), cols));
        for (k, &i) in indices.iter().enumerate() {
            value.row_mut(k).assign(&src.row(i));
        }
        self.push(value, Op::GatherRows(a, indices.to_vec()))
    }

    /// Unfold a `(c_in, h*w)` image into a `(c_in*k*k, out_h*out_w)` patch
    /// matrix; a convolution is then a plain matmul with the weight matrix.
    pub fn im2col(&mut self, a: Var, geom: ConvGeom) -> Var {
        let src = self.value(a);
        debug_assert_eq!(src.dim(), (geom.c_in, geom.h * geom.w));
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut value = Array2::zeros((geom.c_in * geom.k * geom.k, oh * ow));
        for c in 0..geom.c_in {
            for ky in 0..geom.k {
                for kx in 0..geom.k {
                    let out_row = (c * geom.k + ky) * geom.k + kx;
                    for oy in 0..oh {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if iy < 0 || iy >= geom.h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if ix < 0 || ix >= geom.w as isize {
                                continue;
                            }
                            value[[out_row, oy * ow + ox]] =
                                src[[c, iy as usize * geom.w + ix as usize]];
                        }
                    }
                }
            }
        }
        self.push(value, Op::Im2Col(a, geom))
    }

    /// Row-wise layer normalization with learned per-column gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (n, m) = xv.dim();
        debug_assert_eq!(self.shape(gain), (1, m));
        debug_assert_eq!(self.shape(bias), (1, m));
        let mut mean = Vec::with_capacity(n);
        let mut rstd = Vec::with_capacity(n);
        let mut value = Array2::zeros((n, m));
        for r in 0..n {
            let row = xv.row(r);
            let mu = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            mean.push(mu);
            rstd.push(rs);
            for c in 0..m {
                value[[r, c]] = (xv[[r, c]] - mu) * rs;
            }
        }
        let gv = self.value(gain);
        let bv = self.value(bias);
        for r in 0..n {
            for c in 0..m {
                value[[r, c]] = value[[r, c]] * gv[[0, c]] + bv[[0, c]];
            }
        }
        self.push(
            value,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
        )
    }

    /// Mean binary cross-entropy with logits against constant targets,
    /// computed in the numerically stable form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Array2<f64>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.dim(), targets.dim());
        let mut acc = 0.0;
        for (&zi, &ti) in z.iter().zip(targets.iter()) {
            acc += zi.max(0.0) - zi * ti + (-zi.abs()).exp().ln_1p();
        }
        let value = Array2::from_elem((1, 1), acc / z.len() as f64);
        self.push(value, Op::BceWithLogits { logits, targets })
    }

    /// Reverse pass from a scalar output; returns gradients per parameter.
    pub fn backward(&self, output: Var, n_params: usize) -> Gradients {
        assert_eq!(
            self.value(output).len(),
            1,
            "backward requires a scalar output"
        );
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::from_elem((1, 1), 1.0));
        let mut result = Gradients::zeros(n_params);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Param(idx) => match &mut result.by_param[*idx] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    acc_owned(&mut grads[a.0], ga);
                    acc_owned(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    acc_ref(&mut grads[a.0], &g);
                    acc_owned(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    acc_ref(&mut grads[a.0], &g);
                    acc_owned(&mut grads[b.0], -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    acc_owned(&mut grads[a.0], ga);
                    acc_owned(&mut grads[b.0], gb);
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[b.0].value;
                    let ga = &g / bv;
                    let gb = -&g * &self.nodes[a.0].value / (bv * bv);
                    acc_owned(&mut grads[a.0], ga);
                    acc_owned(&mut grads[b.0], gb);
                }
                Op::Scale(a, f) => acc_owned(&mut grads[a.0], g * *f),
                Op::AddScalar(a, _) => acc_owned(&mut grads[a.0], g),
                Op::AddRowVec(a, row) => {
                    let grow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc_ref(&mut grads[a.0], &g);
                    acc_owned(&mut grads[row.0], grow);
                }
                Op::AddColVec(a, col) => {
                    let gcol = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc_ref(&mut grads[a.0], &g);
                    acc_owned(&mut grads[col.0], gcol);
                }
                Op::Relu(a) => {
                    let mask = self.nodes[a.0].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    acc_owned(&mut grads[a.0], g * mask);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    acc_owned(&mut grads[a.0], g * y * (1.0 - y));
                }
                Op::Abs(a) => {
                    let sign = self.nodes[a.0].value.mapv(|v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc_owned(&mut grads[a.0], g * sign);
                }
                Op::Maximum(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let mask = ndarray::Zip::from(av)
                        .and(bv)
                        .map_collect(|&x, &y| if x >= y { 1.0 } else { 0.0 });
                    acc_owned(&mut grads[a.0], &g * &mask);
                    acc_owned(&mut grads[b.0], g * (1.0 - mask));
                }
                Op::Minimum(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let mask = ndarray::Zip::from(av)
                        .and(bv)
                        .map_collect(|&x, &y| if x <= y { 1.0 } else { 0.0 });
                    acc_owned(&mut grads[a.0], &g * &mask);
                    acc_owned(&mut grads[b.0], g * (1.0 - mask));
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut gx = Array2::zeros(y.dim());
                    for r in 0..y.dim().0 {
                        let dot: f64 = y
                            .row(r)
                            .iter()
                            .zip(g.row(r).iter())
                            .map(|(&yy, &gg)| yy * gg)
                            .sum();
                        for c in 0..y.dim().1 {
                            gx[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    acc_owned(&mut grads[a.0], gx);
                }
                Op::SumAll(a) => {
                    let delta = Array2::from_elem(self.nodes[a.0].value.dim(), g[[0, 0]]);
                    acc_owned(&mut grads[a.0], delta);
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[a.0].value.len() as f64;
                    let delta = Array2::from_elem(self.nodes[a.0].value.dim(), g[[0, 0]] / n);
                    acc_owned(&mut grads[a.0], delta);
                }
                Op::Transpose(a) => acc_owned(&mut grads[a.0], g.t().to_owned()),
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].value.dim().0;
                        let block = g.slice(ndarray::s![at..at + n, ..]).to_owned();
                        acc_owned(&mut grads[p.0], block);
                        at += n;
                    }
                }
                Op::SliceRows(a, start, len) => {
                    let mut delta = Array2::zeros(self.nodes[a.0].value.dim());
                    delta
                        .slice_mut(ndarray::s![*start..start + len, ..])
                        .assign(&g);
                    acc_owned(&mut grads[a.0], delta);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].value.dim().1;
                        let block = g.slice(ndarray::s![.., at..at + n]).to_owned();
                        acc_owned(&mut grads[p.0], block);
                        at += n;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let mut delta = Array2::zeros(self.nodes[a.0].value.dim());
                    delta
                        .slice_mut(ndarray::s![.., *start..start + len])
                        .assign(&g);
                    acc_owned(&mut grads[a.0], delta);
                }
                Op::GatherRows(a, indices) => {
                    let mut delta = Array2::zeros(self.nodes[a.0].value.dim());
                    for (k, &src_row) in indices.iter().enumerate() {
                        let mut row = delta.row_mut(src_row);
                        row += &g.row(k);
                    }
                    acc_owned(&mut grads[a.0], delta);
                }
                Op::Im2Col(a, geom) => {
                    let mut delta = Array2::zeros(self.nodes[a.0].value.dim());
                    let (oh, ow) = (geom.out_h(), geom.out_w());
                    for c in 0..geom.c_in {
                        for ky in 0..geom.k {
                            for kx in 0..geom.k {
                                let out_row = (c * geom.k + ky) * geom.k + kx;
                                for oy in 0..oh {
                                    let iy =
                                        (oy * geom.stride + ky) as isize - geom.pad as isize;
                                    if iy < 0 || iy >= geom.h as isize {
                                        continue;
                                    }
                                    for ox in 0..ow {
                                        let ix = (ox * geom.stride + kx) as isize
                                            - geom.pad as isize;
                                        if ix < 0 || ix >= geom.w as isize {
                                            continue;
                                        }
                                        delta[[c, iy as usize * geom.w + ix as usize]] +=
                                            g[[out_row, oy * ow + ox]];
                                    }
                                }
                            }
                        }
                    }
                    acc_owned(&mut grads[a.0], delta);
                }
                Op::LayerNormRows {
                    x,
                    gain,
                    bias,
                    mean,
                    rstd,
                } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gain.0].value;
                    let (n, m) = xv.dim();
                    let mut gx = Array2::zeros((n, m));
                    let mut ggain = Array2::zeros((1, m));
                    let mut gbias = Array2::zeros((1, m));
                    for r in 0..n {
                        let mu = mean[r];
                        let rs = rstd[r];
                        // dy through the affine part.
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        let mut dxhat = vec![0.0; m];
                        for c in 0..m {
                            let xhat = (xv[[r, c]] - mu) * rs;
                            let dy = g[[r, c]];
                            ggain[[0, c]] += dy * xhat;
                            gbias[[0, c]] += dy;
                            let d = dy * gv[[0, c]];
                            dxhat[c] = d;
                            sum_dxhat += d;
                            sum_dxhat_xhat += d * xhat;
                        }
                        for c in 0..m {
                            let xhat = (xv[[r, c]] - mu) * rs;
                            gx[[r, c]] = rs
                                * (dxhat[c]
                                    - sum_dxhat / m as f64
                                    - xhat * sum_dxhat_xhat / m as f64);
                        }
                    }
                    acc_owned(&mut grads[x.0], gx);
                    acc_owned(&mut grads[gain.0], ggain);
                    acc_owned(&mut grads[bias.0], gbias);
                }
                Op::BceWithLogits { logits, targets } => {
                    let z = &self.nodes[logits.0].value;
                    let scale = g[[0, 0]] / z.len() as f64;
                    let delta = ndarray::Zip::from(z)
                        .and(targets)
                        .map_collect(|&zi, &ti| (sigmoid(zi) - ti) * scale);
                    acc_owned(&mut grads[logits.0], delta);
                }
            }
        }
        result
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn acc_owned(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

fn acc_ref(slot: &mut Option<Array2<f64>>, delta: &Array2<f64>) {
    match slot {
        Some(g) => *g += delta,
        None => *slot = Some(delta.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::max_relative_error;
    use crate::nn::params::ParamStore;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(shapes: &[(usize, usize)]) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        for (i, &(r, c)) in shapes.iter().enumerate() {
            store
                .add_init(&format!("p.{i}"), r, c, 0.5, &mut rng)
                .unwrap();
        }
        store
    }

    #[test]
    fn matmul_forward_and_grad() {
        let mut tape = Tape::new();
        let a = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = tape.constant(array![[5.0], [6.0]]);
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c), &array![[17.0], [39.0]]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = tape.constant(array![[1.0, 2.0, 3.0], [-1.0, 0.0, 5.0]]);
        let s = tape.softmax_rows(a);
        for row in tape.value(s).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_zero_logits_is_ln2() {
        let mut tape = Tape::new();
        let z = tape.constant(Array2::zeros((5, 1)));
        let t = Array2::from_elem((5, 1), 1.0);
        let loss = tape.bce_with_logits(z, t);
        assert!((tape.scalar_value(loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn grad_check_arithmetic_chain() {
        let mut store = store_with(&[(3, 4), (4, 2), (1, 2)]);
        let err = max_relative_error(
            &mut store,
            |tape, store| {
                let a = tape.param(store, 0);
                let b = tape.param(store, 1);
                let bias = tape.param(store, 2);
                let y = tape.matmul(a, b);
                let y = tape.add_row_vec(y, bias);
                let y = tape.relu(y);
                let y = tape.mul(y, y);
                tape.mean_all(y)
            },
            &[(0, 0), (0, 5), (1, 3), (2, 1)],
            1e-5,
        );
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn grad_check_softmax_layernorm_attention_like() {
        let mut store = store_with(&[(4, 4), (4, 4), (1, 4), (1, 4)]);
        let err = max_relative_error(
            &mut store,
            |tape, store| {
                let q = tape.param(store, 0);
                let k = tape.param(store, 1);
                let gain = tape.param(store, 2);
                let bias = tape.param(store, 3);
                let kt = tape.transpose(k);
                let scores = tape.matmul(q, kt);
                let scores = tape.scale(scores, 0.5);
                let probs = tape.softmax_rows(scores);
                let ctx = tape.matmul(probs, k);
                let normed = tape.layer_norm_rows(ctx, gain, bias);
                let sq = tape.mul(normed, normed);
                tape.mean_all(sq)
            },
            &[(0, 0), (0, 7), (1, 2), (2, 1), (3, 2)],
            1e-5,
        );
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn grad_check_conv_via_im2col() {
        let geom = ConvGeom {
            c_in: 2,
            h: 5,
            w: 4,
            k: 3,
            stride: 2,
            pad: 1,
        };
        let mut store = store_with(&[(2, 20), (3, 18), (3, 1)]);
        let err = max_relative_error(
            &mut store,
            |tape, store| {
                let x = tape.param(store, 0);
                let w = tape.param(store, 1);
                let b = tape.param(store, 2);
                let cols = tape.im2col(x, geom);
                let y = tape.matmul(w, cols);
                let y = tape.add_col_vec(y, b);
                let y = tape.relu(y);
                tape.mean_all(y)
            },
            &[(0, 3), (0, 17), (1, 0), (1, 11), (2, 2)],
            1e-5,
        );
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn grad_check_gather_slice_concat() {
        let mut store = store_with(&[(5, 3), (2, 3)]);
        let err = max_relative_error(
            &mut store,
            |tape, store| {
                let a = tape.param(store, 0);
                let b = tape.param(store, 1);
                let picked = tape.gather_rows(a, &[0, 2, 2, 4]);
                let joined = tape.concat_rows(&[picked, b]);
                let left = tape.slice_cols(joined, 0, 2);
                let sq = tape.mul(left, left);
                tape.sum_all(sq)
            },
            &[(0, 0), (0, 8), (1, 4)],
            1e-5,
        );
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn grad_check_min_max_abs_div() {
        let mut store = store_with(&[(3, 3), (3, 3)]);
        let err = max_relative_error(
            &mut store,
            |tape, store| {
                let a = tape.param(store, 0);
                let b = tape.param(store, 1);
                let hi = tape.maximum(a, b);
                let lo = tape.minimum(a, b);
                let d = tape.sub(hi, lo);
                let d = tape.abs(d);
                let shifted = tape.add_scalar(b, 10.0); // keep denominator away from 0
                let q = tape.div(d, shifted);
                let s = tape.sigmoid(q);
                tape.mean_all(s)
            },
            &[(0, 0), (0, 4), (1, 8)],
            1e-5,
        );
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn grad_check_bce_with_logits() {
        let mut store = store_with(&[(6, 1)]);
        let mut targets = Array2::zeros((6, 1));
        for i in 0..3 {
            targets[[i, 0]] = 1.0;
        }
        let err = max_relative_error(
            &mut store,
            move |tape, store| {
                let z = tape.param(store, 0);
                let z = tape.scale(z, 3.0);
                tape.bce_with_logits(z, targets.clone())
            },
            &[(0, 0), (0, 3), (0, 5)],
            1e-5,
        );
        assert!(err < 1e-6, "relative error {err}");
    }
}
