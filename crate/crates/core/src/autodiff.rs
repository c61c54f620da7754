//! A small reverse-mode tape over row-major `f64` matrices.
//!
//! Every tensor in the model is handled as a 2-D matrix whose rows are tokens
//! and whose columns are features. The op set is the minimum needed by the
//! transformer backbone, the flow-matching losses and the hand reward.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};

use crate::error::{shape_err, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Silu(Var),
    Exp(Var),
    LayerNorm { x: Var, xhat: Array2<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Recording of one computation. Build it, read values, and optionally call
/// [`Graph::backward`] on a scalar node.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn check_same(ctx: &'static str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(shape_err(ctx, format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
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

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a named parameter. Repeated calls with the same name return the
    /// same leaf so gradients from every use accumulate in one place.
    pub fn param(&mut self, name: &str, value: &Array2<f64>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(shape_err("matmul", format!("{:?} x {:?}", va.dim(), vb.dim())));
        }
        let out = va.dot(vb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(shape_err("matmul_t", format!("{:?} x {:?}ᵀ", va.dim(), vb.dim())));
        }
        let out = va.dot(&vb.t());
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(shape_err("add_row", format!("{:?} + {:?}", va.dim(), vr.dim())));
        }
        let out = va + vr;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(shape_err("mul_row", format!("{:?} * {:?}", va.dim(), vr.dim())));
        }
        let out = va * vr;
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    /// `scale · a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).mapv(|x| scale * x + shift);
        self.push(out, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x / (1.0 + (-x).exp()));
        self.push(out, Op::Silu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(out, Op::Mul(a, a))
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let (n, d) = vx.dim();
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in vx.axis_iter(Axis(0)).enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * is;
            }
        }
        let out = xhat.clone();
        self.push(out, Op::LayerNorm { x, xhat, inv_std })
    }

    /// Row-wise softmax. Entries where `mask` is `false` get probability zero;
    /// every row must keep at least one entry.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Array2<bool>>) -> Result<Var> {
        let va = self.value(a);
        if let Some(m) = mask {
            if m.dim() != va.dim() {
                return Err(shape_err("softmax mask", format!("{:?} vs {:?}", m.dim(), va.dim())));
            }
        }
        let mut out = va.clone();
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let keep = |j: usize| mask.is_none_or(|m| m[[i, j]]);
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| keep(*j))
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(shape_err("softmax", format!("row {i} is fully masked")));
            }
            let mut sum = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                *v = if keep(j) { (*v - max).exp() } else { 0.0 };
                sum += *v;
            }
            row.mapv_inplace(|v| v / sum);
        }
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.ncols() {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {}", va.ncols())));
        }
        let out = va.slice(s![.., start..start + len]).to_owned();
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.nrows() {
            return Err(shape_err("slice_rows", format!("{start}+{len} > {}", va.nrows())));
        }
        let out = va.slice(s![start..start + len, ..]).to_owned();
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| shape_err("concat_cols", e.to_string()))?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| shape_err("concat_rows", e.to_string()))?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Builds a `rows×cols` matrix whose k-th element (row-major) is the
    /// `index[k]`-th element (row-major) of `a`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, rows: usize, cols: usize) -> Result<Var> {
        let va = self.value(a);
        if index.len() != rows * cols {
            return Err(shape_err("gather", format!("{} indices for {rows}x{cols}", index.len())));
        }
        let flat = va.as_slice().expect("graph values are standard layout");
        if let Some(bad) = index.iter().find(|&&i| i >= flat.len()) {
            return Err(shape_err("gather", format!("index {bad} out of {}", flat.len())));
        }
        let data: Vec<f64> = index.iter().map(|&i| flat[i]).collect();
        let out = Array2::from_shape_vec((rows, cols), data).expect("length checked");
        Ok(self.push(out, Op::Gather(a, index)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).dim() != (1, 1) {
            return Err(shape_err("backward", format!("loss is {:?}", self.value(loss).dim())));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
            match &mut grads[v.0] {
                Some(g) => *g += &delta,
                slot => *slot = Some(delta),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&val(*b).t()));
                    acc(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(&mut grads, *a, g.dot(val(*b)));
                    acc(&mut grads, *b, g.t().dot(val(*a)));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * val(*b));
                    acc(&mut grads, *b, &g * val(*a));
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, r) => {
                    let gr = (&g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *r, gr);
                    acc(&mut grads, *a, &g * val(*r));
                }
                Op::Affine(a, scale) => acc(&mut grads, *a, g * *scale),
                Op::Silu(a) => {
                    let d = val(*a).mapv(|x| {
                        let sg = 1.0 / (1.0 + (-x).exp());
                        sg * (1.0 + x * (1.0 - sg))
                    });
                    acc(&mut grads, *a, g * d);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::LayerNorm { x, xhat, inv_std } => {
                    let (n, d) = g.dim();
                    let mut gx = Array2::zeros((n, d));
                    for r in 0..n {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mg = gr.sum() / d as f64;
                        let mgx = gr.dot(&xr) / d as f64;
                        for c in 0..d {
                            gx[[r, c]] = inv_std[r] * (gr[c] - mg - xr[c] * mgx);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy = &g * y;
                    let row_sum = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, gy - &(y * &row_sum));
                }
                Op::SliceCols(a, start) => {
                    let mut full = Array2::zeros(val(*a).dim());
                    full.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, full);
                }
                Op::SliceRows(a, start) => {
                    let mut full = Array2::zeros(val(*a).dim());
                    full.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, full);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = val(*p).nrows();
                        acc(&mut grads, *p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::Gather(a, index) => {
                    let mut full = Array2::<f64>::zeros(val(*a).dim());
                    {
                        let flat = full.as_slice_mut().expect("fresh array");
                        for (k, &src) in index.iter().enumerate() {
                            flat[src] += g.as_slice().expect("standard layout")[k];
                        }
                    }
                    acc(&mut grads, *a, full);
                }
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    acc(&mut grads, *a, Array2::from_elem(val(*a).dim(), s));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a leaf; `None` when the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients for every named parameter bound in `graph`. Parameters the
    /// loss does not reach get explicit zeros.
    pub fn params(&self, graph: &Graph) -> BTreeMap<String, Array2<f64>> {
        graph
            .param_vars()
            .iter()
            .map(|(name, v)| {
                let g = self
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(graph.value(*v).dim()));
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of d(sum(f(x)))/dx for a unary graph builder.
    fn check_unary(x0: Array2<f64>, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let y = build(&mut g, x);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let h = 1e-6;
        for idx in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.as_slice_mut().unwrap()[idx] += delta;
                let mut g = Graph::new();
                let x = g.constant(xp);
                let y = build(&mut g, x);
                let l = g.sum(y);
                g.scalar(l)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "idx {idx}: fd {fd} vs {an}");
        }
    }

    fn weights() -> Array2<f64> {
        array![[0.3, -1.2, 0.5], [0.7, 0.1, -0.4], [-0.9, 0.6, 0.2]]
    }

    #[test]
    fn matmul_and_rows() {
        let x0 = array![[0.1, 0.2, -0.3], [1.0, -0.5, 0.25]];
        check_unary(x0.clone(), |g, x| {
            let w = g.constant(weights());
            let y = g.matmul(x, w).unwrap();
            let r = g.constant(array![[0.5, -1.0, 2.0]]);
            let y = g.mul_row(y, r).unwrap();
            g.add_row(y, r).unwrap()
        });
        check_unary(x0, |g, x| {
            let w = g.constant(weights());
            g.matmul_t(x, w).unwrap()
        });
    }

    #[test]
    fn nonlinearities() {
        let x0 = array![[0.1, 2.0, -0.3, 0.7], [1.0, -0.5, 0.25, -2.0]];
        check_unary(x0.clone(), |g, x| {
            let y = g.silu(x);
            let y = g.exp(y);
            g.square(y)
        });
        check_unary(x0.clone(), |g, x| {
            let y = g.layer_norm(x, 1e-5);
            let w = g.constant(array![[1.0, 2.0, 3.0, 4.0]]);
            g.mul_row(y, w).unwrap()
        });
        let mask = array![[true, false, true, true], [true, true, true, false]];
        check_unary(x0, |g, x| {
            let p = g.softmax_rows(x, Some(&mask)).unwrap();
            let w = g.constant(array![[1.0, -2.0, 3.0, 0.5], [0.2, 0.4, -1.0, 2.0]]);
            g.mul(p, w).unwrap()
        });
    }

    #[test]
    fn structural_ops() {
        let x0 = array![[0.1, 2.0, -0.3, 0.7], [1.0, -0.5, 0.25, -2.0]];
        check_unary(x0, |g, x| {
            let a = g.slice_cols(x, 1, 2).unwrap();
            let b = g.slice_rows(x, 1, 1).unwrap();
            let b = g.slice_cols(b, 0, 2).unwrap();
            let c = g.concat_rows(&[a, b]).unwrap();
            let d = g.concat_cols(&[c, c]).unwrap();
            let e = g.gather(d, vec![0, 0, 5, 11], 2, 2).unwrap();
            let e = g.square(e);
            g.affine(e, 3.0, 1.0)
        });
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 5.0, 2.0]]);
        let mask = array![[true, false, true]];
        let p = g.softmax_rows(x, Some(&mask)).unwrap();
        let v = g.value(p);
        assert_eq!(v[[0, 1]], 0.0);
        assert!((v.sum() - 1.0).abs() < 1e-15);
        let x = g.constant(array![[1.0]]);
        assert!(g.softmax_rows(x, Some(&array![[false]])).is_err());
    }

    #[test]
    fn params_are_shared_by_name() {
        let mut g = Graph::new();
        let w = array![[2.0]];
        let a = g.param("w", &w);
        let b = g.param("w", &w);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.params(&g)["w"][[0, 0]], 4.0);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(Array2::zeros((2, 3)));
        let b = g.constant(Array2::zeros((2, 3)));
        assert!(g.matmul(a, b).is_err());
        assert!(g.add_row(a, b).is_err());
        assert!(g.backward(a).is_err());
    }
}
