//! Reverse-mode autodiff over dense f32 matrices.
//!
//! A `Graph` is a tape: every operation appends a node holding its value and
//! the ids of its parents. `backward` walks the tape in reverse and
//! accumulates gradients. One graph per training step; evaluation order is
//! fixed, so results are bit-stable for a given seed.
//!
//! Vectors are 1xN or Nx1 matrices; scalars are 1x1.

use ndarray::{Array2, Axis};

/// Handle into a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    /// Parameter or input; receives a gradient slot.
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    /// a: SxN plus a 1xN row broadcast over every row of a.
    AddRow(usize, usize),
    /// a: SxN times a 1xN row, elementwise per row.
    MulRow(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    Sigmoid(usize),
    Silu(usize),
    RmsNormRows(usize, f32),
    SliceCols(usize, usize, usize),
    SliceRows(usize, usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    MeanRows(usize),
    MeanAll(usize),
    Abs(usize),
    Log(usize),
    Clamp(usize, f32, f32),
    Reshape(usize),
    /// Row lookup into a table; duplicated indices accumulate.
    GatherRows(usize, Vec<usize>),
}

struct Node {
    value: Array2<f32>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients for every node of a graph, indexed by `Var`.
pub struct Gradients {
    grads: Vec<Option<Array2<f32>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`. Zero matrix if `v`
    /// did not influence the root.
    pub fn get(&self, v: Var, like: &Array2<f32>) -> Array2<f32> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(like.dim()),
        }
    }

    pub fn try_get(&self, v: Var) -> Option<&Array2<f32>> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f32>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f32> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f32>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf that is also tracked; constants share the Leaf op (their gradient
    /// slot just goes unused).
    pub fn constant(&mut self, value: Array2<f32>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f32) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(v, Op::AddRow(a.0, row.0))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let v = &self.nodes[a.0].value * &self.nodes[row.0].value;
        self.push(v, Op::MulRow(a.0, row.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(&self.nodes[a.0].value);
        self.push(v, Op::SoftmaxRows(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a.0))
    }

    pub fn rms_norm_rows(&mut self, a: Var, eps: f32) -> Var {
        let v = rms_norm_rows(&self.nodes[a.0].value, eps);
        self.push(v, Op::RmsNormRows(a.0, eps))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(v, Op::SliceCols(a.0, start, len))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        self.push(v, Op::SliceRows(a.0, start, len))
    }

    /// Single row as a 1xN matrix.
    pub fn slice_rows_one(&mut self, a: Var, row: usize) -> Var {
        self.slice_rows(a, row, 1)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape");
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape");
        self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let v = src
            .mean_axis(Axis(0))
            .expect("mean_rows on empty")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let m = src.sum() / src.len() as f32;
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f32::abs);
        self.push(v, Op::Abs(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f32::ln);
        self.push(v, Op::Log(a.0))
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a.0, lo, hi))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order((rows, cols))
            .expect("reshape size");
        self.push(v, Op::Reshape(a.0))
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = &self.nodes[table.0].value;
        let mut v = Array2::zeros((indices.len(), t.ncols()));
        for (r, &idx) in indices.iter().enumerate() {
            v.row_mut(r).assign(&t.row(idx));
        }
        self.push(v, Op::GatherRows(table.0, indices.to_vec()))
    }

    /// x^2 as x*x.
    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Mean squared error between two same-shape values.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let d = self.sub(pred, target);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    /// Mean absolute error between two same-shape values.
    pub fn mae(&mut self, pred: Var, target: Var) -> Var {
        let d = self.sub(pred, target);
        let a = self.abs(d);
        self.mean_all(a)
    }

    /// Accumulate gradients of `root` (a 1x1 scalar) w.r.t. every node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        debug_assert_eq!(self.nodes[root.0].value.dim(), (1, 1));
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=root.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[*b].value.t());
                    let db = self.nodes[*a].value.t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[*b].value;
                    let db = &g * &self.nodes[*a].value;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.mapv(|x| x * c));
                }
                Op::AddRow(a, row) => {
                    let drow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, drow);
                }
                Op::MulRow(a, row) => {
                    let da = &g * &self.nodes[*row].value;
                    let drow = (&g * &self.nodes[*a].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *row, drow);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.t().to_owned());
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[id].value;
                    let mut da = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f32 = yr.iter().zip(gr.iter()).map(|(yi, gi)| yi * gi).sum();
                        for c in 0..y.ncols() {
                            da[[r, c]] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[id].value;
                    let da = &g * &(y * &y.mapv(|v| 1.0 - v));
                    accumulate(&mut grads, *a, da);
                }
                Op::Silu(a) => {
                    let x = &self.nodes[*a].value;
                    let da = &g * &x.mapv(|v| {
                        let s = sigmoid(v);
                        s * (1.0 + v * (1.0 - s))
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::RmsNormRows(a, eps) => {
                    let x = &self.nodes[*a].value;
                    let n = x.ncols() as f32;
                    let mut da = Array2::zeros(x.dim());
                    for r in 0..x.nrows() {
                        let xr = x.row(r);
                        let gr = g.row(r);
                        let ms = xr.iter().map(|v| v * v).sum::<f32>() / n + eps;
                        let s = ms.sqrt().recip();
                        let dot: f32 = gr.iter().zip(xr.iter()).map(|(gi, xi)| gi * xi).sum();
                        let s3 = s * s * s;
                        for c in 0..x.ncols() {
                            da[[r, c]] = s * gr[c] - s3 * xr[c] * dot / n;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SliceCols(a, start, len) => {
                    let src = &self.nodes[*a].value;
                    let mut da = Array2::zeros(src.dim());
                    da.slice_mut(ndarray::s![.., *start..*start + *len])
                        .assign(&g);
                    accumulate(&mut grads, *a, da);
                }
                Op::SliceRows(a, start, len) => {
                    let src = &self.nodes[*a].value;
                    let mut da = Array2::zeros(src.dim());
                    da.slice_mut(ndarray::s![*start..*start + *len, ..])
                        .assign(&g);
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.ncols();
                        let dp = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads, p, dp);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.nodes[p].value.nrows();
                        let dp = g.slice(ndarray::s![offset..offset + h, ..]).to_owned();
                        accumulate(&mut grads, p, dp);
                        offset += h;
                    }
                }
                Op::MeanRows(a) => {
                    let rows = self.nodes[*a].value.nrows();
                    let scale = 1.0 / rows as f32;
                    let mut da = Array2::zeros(self.nodes[*a].value.dim());
                    for r in 0..rows {
                        da.row_mut(r).assign(&g.row(0).mapv(|v| v * scale));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::MeanAll(a) => {
                    let src = &self.nodes[*a].value;
                    let scale = g[[0, 0]] / src.len() as f32;
                    accumulate(&mut grads, *a, Array2::from_elem(src.dim(), scale));
                }
                Op::Abs(a) => {
                    let x = &self.nodes[*a].value;
                    let da = &g * &x.mapv(|v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::Log(a) => {
                    let x = &self.nodes[*a].value;
                    let da = &g / x;
                    accumulate(&mut grads, *a, da);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &self.nodes[*a].value;
                    let mut da = g.clone();
                    ndarray::Zip::from(&mut da).and(x).for_each(|d, &v| {
                        if v <= *lo || v >= *hi {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::Reshape(a) => {
                    let dim = self.nodes[*a].value.dim();
                    let da = g.clone().into_shape_with_order(dim).expect("reshape grad");
                    accumulate(&mut grads, *a, da);
                }
                Op::GatherRows(table, indices) => {
                    let t = &self.nodes[*table].value;
                    let mut dt = Array2::zeros(t.dim());
                    for (r, &idx) in indices.iter().enumerate() {
                        let mut row = dt.row_mut(idx);
                        row += &g.row(r);
                    }
                    accumulate(&mut grads, *table, dt);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f32>>], id: usize, g: Array2<f32>) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable row softmax (plain, non-taped version).
pub fn softmax_rows(m: &Array2<f32>) -> Array2<f32> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Plain row RMS-norm matching the taped op.
pub fn rms_norm_rows(m: &Array2<f32>, eps: f32) -> Array2<f32> {
    let n = m.ncols() as f32;
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / n + eps;
        let s = ms.sqrt().recip();
        for v in row.iter_mut() {
            *v *= s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences on an arbitrary scalar-valued graph builder.
    /// The builder runs the whole graph from scratch on perturbed leaf values,
    /// so it is independent of the backward pass it checks.
    fn finite_diff_check<F>(leaves: Vec<Array2<f32>>, build: F, tol: f32)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|l| g.leaf(l.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);

        let h = 1e-3f32;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li], leaf);
            for idx in 0..leaf.len() {
                let (r, c) = (idx / leaf.ncols(), idx % leaf.ncols());
                let eval = |delta: f32| -> f32 {
                    let mut g2 = Graph::new();
                    let vars2: Vec<Var> = leaves
                        .iter()
                        .enumerate()
                        .map(|(j, l)| {
                            let mut l = l.clone();
                            if j == li {
                                l[[r, c]] += delta;
                            }
                            g2.leaf(l)
                        })
                        .collect();
                    let loss2 = build(&mut g2, &vars2);
                    g2.scalar_value(loss2)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[[r, c]];
                assert!(
                    (a - fd).abs() <= tol * a.abs().max(fd.abs()).max(1.0),
                    "leaf {li} entry ({r},{c}): analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_chain_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        let t = random_matrix(&mut rng, 3, 2);
        finite_diff_check(
            vec![a, b, t],
            |g, v| {
                let y = g.matmul(v[0], v[1]);
                g.mse(y, v[2])
            },
            1e-2,
        );
    }

    #[test]
    fn attention_style_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_matrix(&mut rng, 3, 4);
        let wq = random_matrix(&mut rng, 4, 4);
        let wk = random_matrix(&mut rng, 4, 4);
        let wv = random_matrix(&mut rng, 4, 4);
        let t = random_matrix(&mut rng, 3, 4);
        finite_diff_check(
            vec![x, wq, wk, wv, t],
            |g, v| {
                let q = g.matmul(v[0], v[1]);
                let k = g.matmul(v[0], v[2]);
                let val = g.matmul(v[0], v[3]);
                let kt = g.transpose(k);
                let scores = g.matmul(q, kt);
                let scaled = g.scale(scores, 0.5);
                let attn = g.softmax_rows(scaled);
                let ctx = g.matmul(attn, val);
                g.mse(ctx, v[4])
            },
            1e-2,
        );
    }

    #[test]
    fn pointwise_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 2, 5);
        let gain = random_matrix(&mut rng, 1, 5);
        let bias = random_matrix(&mut rng, 1, 5);
        finite_diff_check(
            vec![x, gain, bias],
            |g, v| {
                let n = g.rms_norm_rows(v[0], 1e-6);
                let gn = g.mul_row(n, v[1]);
                let b = g.add_row(gn, v[2]);
                let s = g.silu(b);
                let sg = g.sigmoid(s);
                let c = g.clamp(sg, 1e-6, 1.0 - 1e-6);
                let l = g.log(c);
                let neg = g.scale(l, -1.0);
                g.mean_all(neg)
            },
            1e-2,
        );
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let table = random_matrix(&mut rng, 5, 4);
        let x = random_matrix(&mut rng, 3, 8);
        let t = random_matrix(&mut rng, 3, 8);
        finite_diff_check(
            vec![table, x, t],
            |g, v| {
                let rows = g.gather_rows(v[0], &[1, 3, 1]);
                let left = g.slice_cols(v[1], 0, 4);
                let right = g.slice_cols(v[1], 4, 4);
                let sum = g.add(rows, left);
                let cat = g.concat_cols(&[sum, right]);
                let top = g.slice_rows(cat, 0, 2);
                let bottom = g.slice_rows_one(cat, 2);
                let rebuilt = g.concat_rows(&[top, bottom]);
                let pooled = g.mean_rows(rebuilt);
                let back = g.concat_rows(&[pooled, pooled, pooled]);
                let resh = g.reshape(back, 3, 8);
                g.mae(resh, v[2])
            },
            1e-2,
        );
    }

    #[test]
    fn reuse_accumulates() {
        // y = x*x + x => dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.leaf(array![[3.0f32]]);
        let sq = g.mul(x, x);
        let y = g.add(sq, x);
        let grads = g.backward(y);
        let dx = grads.try_get(x).unwrap();
        assert!((dx[[0, 0]] - 7.0).abs() < 1e-6);
    }

    #[test]
    fn detached_leaf_has_no_grad() {
        let mut g = Graph::new();
        let x = g.leaf(array![[1.0f32]]);
        let unused = g.leaf(array![[5.0f32]]);
        let y = g.mul(x, x);
        let grads = g.backward(y);
        assert!(grads.try_get(unused).is_none());
        assert_eq!(grads.get(unused, &array![[0.0f32]]), array![[0.0f32]]);
    }
}
