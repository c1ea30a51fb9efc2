//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Tape`] records one forward computation. Parameters are read in place
//! from a borrowed [`ParamStore`]; [`Tape::backward`] accumulates parameter
//! gradients into a [`Gradients`] buffer. Operations are coarse (fused
//! multi-head attention, layer norm, cross entropy) so a transformer forward
//! pass is a few dozen nodes.

use ndarray::{s, Array2, Axis};

use super::params::{Gradients, Mat, ParamId, ParamStore};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Param(ParamId),
    Input,
    Embed {
        table: ParamId,
        ids: Vec<usize>,
    },
    Rows {
        src: Var,
        idx: Vec<usize>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Softplus(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Mat>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Mat,
    },
    Pick {
        src: Var,
        row: usize,
        col: usize,
    },
    Sum(Var),
    LinComb(Vec<(Var, f64)>),
}

struct Node {
    /// Empty for `Param` nodes, whose value lives in the store.
    value: Mat,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax in place; entries equal to `-inf` get probability 0.
pub fn softmax_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row.mapv_inplace(|x| x / sum);
    }
}

fn attention_forward(q: &Mat, k: &Mat, v: &Mat, heads: usize, causal: bool) -> (Mat, Vec<Mat>) {
    let (m, d) = q.dim();
    let n = k.nrows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((m, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= scale;
        if causal {
            for i in 0..m {
                for j in (i + 1)..n {
                    scores[[i, j]] = f64::NEG_INFINITY;
                }
            }
        }
        softmax_rows(&mut scores);
        out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    (out, probs)
}

/// Scaled dot-product multi-head attention core (no projections).
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, causal: bool) -> Mat {
    attention_forward(q, k, v, heads, causal).0
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(128),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Mat {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Array2::zeros((0, 0)), Op::Param(id))
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input)
    }

    /// Gather rows `ids` of parameter `table`.
    pub fn embed(&mut self, table: ParamId, ids: &[usize]) -> Var {
        let t = self.params.get(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(i));
        }
        self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Gather rows `idx` of `src` (indices may repeat).
    pub fn rows(&mut self, src: Var, idx: &[usize]) -> Var {
        let x = self.value(src);
        let mut out = Array2::zeros((idx.len(), x.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&x.row(i));
        }
        self.push(
            out,
            Op::Rows {
                src,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    /// Add a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    /// `x · W + b` with `W`, `b` parameters.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn layer_norm(&mut self, x: Var, gain: ParamId, bias: ParamId) -> Var {
        let gain = self.param(gain);
        let bias = self.param(bias);
        let xv = self.value(x);
        let (m, d) = xv.dim();
        let mut xhat = Array2::zeros((m, d));
        let mut inv_std = Vec::with_capacity(m);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            xhat.row_mut(r).assign(&row.mapv(|v| (v - mean) * is));
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(softplus);
        self.push(out, Op::Softplus(x))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (out, probs) =
            attention_forward(self.value(q), self.value(k), self.value(v), heads, causal);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Mean negative log-likelihood of `targets` (row, class) under row-wise
    /// softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Var {
        let z = self.value(logits);
        let mut probs = z.clone();
        softmax_rows(&mut probs);
        let n = targets.len().max(1) as f64;
        let loss: f64 = targets
            .iter()
            .map(|&(r, t)| {
                let row = z.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                lse - z[[r, t]]
            })
            .sum::<f64>()
            / n;
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn pick(&mut self, src: Var, row: usize, col: usize) -> Var {
        let v = self.value(src)[[row, col]];
        self.push(Array2::from_elem((1, 1), v), Op::Pick { src, row, col })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        self.push(Array2::from_elem((1, 1), v), Op::Sum(x))
    }

    /// `Σ c_i · x_i` over same-shaped nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "empty linear combination");
        let mut out = Array2::zeros(self.value(terms[0].0).dim());
        for &(v, c) in terms {
            out.scaled_add(c, self.value(v));
        }
        self.push(out, Op::LinComb(terms.to_vec()))
    }

    /// Backpropagate from `root` (seeded with `seed` in every entry) and add
    /// parameter gradients into `grads`.
    pub fn backward(&self, root: Var, seed: f64, grads: &mut Gradients) {
        let mut adj: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Array2::from_elem(self.value(root).dim(), seed));

        fn acc(adj: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut adj[v.0] {
                Some(a) => *a += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::Input => {}
                Op::Embed { table, ids } => grads.scatter_rows(*table, ids, &g),
                Op::Rows { src, idx } => {
                    let mut d = Array2::zeros(self.value(*src).dim());
                    for (r, &j) in idx.iter().enumerate() {
                        let mut row = d.row_mut(j);
                        row += &g.row(r);
                    }
                    acc(&mut adj, *src, d);
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, -&g);
                    acc(&mut adj, *a, g);
                }
                Op::AddRow(a, row) => {
                    acc(&mut adj, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut adj, *a, g);
                }
                Op::Scale(a, c) => acc(&mut adj, *a, g * *c),
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    acc(&mut adj, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(
                        &mut adj,
                        *gain,
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let dxhat = &g * gv;
                    let d = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_dh = dh.sum() / d;
                        let mean_dhx = dh.dot(&xh) / d;
                        let is = inv_std[r];
                        dx.row_mut(r)
                            .assign(&((&dh - mean_dh - &(&xh * mean_dhx)) * is));
                    }
                    acc(&mut adj, *x, dx);
                }
                Op::Gelu(x) => {
                    let d = &g * &self.value(*x).mapv(gelu_grad);
                    acc(&mut adj, *x, d);
                }
                Op::Softplus(x) => {
                    let d = &g * &self.value(*x).mapv(sigmoid);
                    acc(&mut adj, *x, d);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Array2::zeros(qv.dim());
                    let mut dk = Array2::zeros(kv.dim());
                    let mut dv = Array2::zeros(vv.dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let go = g.slice(cols);
                        dv.slice_mut(cols).assign(&p.t().dot(&go));
                        let dp = go.dot(&vv.slice(cols).t());
                        let mut ds = &dp * p;
                        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot: f64 = row.sum();
                            row.zip_mut_with(&prow, |x, &pp| *x -= pp * dot);
                        }
                        ds *= scale;
                        dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    acc(&mut adj, *q, dq);
                    acc(&mut adj, *k, dk);
                    acc(&mut adj, *v, dv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let gs = g[[0, 0]] / targets.len().max(1) as f64;
                    let mut d = Array2::zeros(probs.dim());
                    for &(r, t) in targets {
                        let mut row = d.row_mut(r);
                        row.scaled_add(gs, &probs.row(r));
                        row[t] -= gs;
                    }
                    acc(&mut adj, *logits, d);
                }
                Op::Pick { src, row, col } => {
                    let mut d = Array2::zeros(self.value(*src).dim());
                    d[[*row, *col]] = g[[0, 0]];
                    acc(&mut adj, *src, d);
                }
                Op::Sum(x) => {
                    let d = Array2::from_elem(self.value(*x).dim(), g[[0, 0]]);
                    acc(&mut adj, *x, d);
                }
                Op::LinComb(terms) => {
                    for &(v, c) in terms {
                        acc(&mut adj, v, &g * c);
                    }
                }
            }
        }
    }
}
