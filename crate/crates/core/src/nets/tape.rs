//! Reverse-mode differentiation over the fixed set of matrix operations the
//! model needs.
//!
//! Values are computed eagerly as nodes are recorded. Every node holds a dense
//! matrix; scalars are `1 x 1`. Adjoints are only propagated into nodes that
//! depend on a leaf, so constant inputs such as video frames cost nothing in
//! the backward pass.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gp::{cholesky_adjoint, SAMPLE_JITTER};
use crate::numerics::{symmetrize, Cholesky};

/// Bernoulli probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
struct GpCache {
    /// `(K + Σ*)⁻¹`
    a_inv: DMatrix<f64>,
    /// `(K + Σ*)⁻¹ K`
    a_inv_k: DMatrix<f64>,
    alpha: DMatrix<f64>,
    s: DMatrix<f64>,
    l: DMatrix<f64>,
    eps: DMatrix<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Columns { x: NodeId, start: usize },
    StackDimMajor(NodeId),
    UnstackFrames { x: NodeId, n_times: usize },
    BernoulliLogLik { probs: NodeId, target: DMatrix<f64> },
    GaussianNegLogDensity { y: NodeId, mu: NodeId, log_sigma: NodeId },
    GpSample { mu: NodeId, log_sigma: NodeId, k: NodeId, cache: Box<GpCache> },
    GpLogMarginal { mu: NodeId, log_sigma: NodeId, k: NodeId, cache: Box<GpCache> },
}

#[derive(Debug)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(ctx: &'static str, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dims(ctx, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

fn column(len: usize) -> (usize, usize) {
    (len, 1)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: DMatrix<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::Usage(format!("node {} is not on this tape", id.0)))
    }

    fn grad_of(&self, ids: &[NodeId]) -> Result<bool> {
        let mut any = false;
        for &id in ids {
            any |= self.node(id)?.needs_grad;
        }
        Ok(any)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: DMatrix<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: DMatrix<f64>) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, id: NodeId) -> Result<&DMatrix<f64>> {
        Ok(&self.node(id)?.value)
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id)?;
        if v.shape() != (1, 1) {
            return Err(Error::Usage(format!("node {} is not a scalar", id.0)));
        }
        Ok(v[(0, 0)])
    }

    /// `x Wᵀ + 1 b` with `x: n x in`, `W: out x in`, `b: 1 x out`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x)?, self.value(w)?, self.value(b)?);
        if xv.ncols() != wv.ncols() || bv.shape() != (1, wv.nrows()) {
            return Err(Error::dims(
                "affine",
                format!("x: n x {}, b: 1 x {}", wv.ncols(), wv.nrows()),
                format!("x: {:?}, b: {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv * wv.transpose();
        for mut row in out.row_iter_mut() {
            row += bv;
        }
        let g = self.grad_of(&[x, w, b])?;
        Ok(self.push(out, Op::Affine { x, w, b }, g))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let out = self.value(x)?.map(f);
        let g = self.grad_of(&[x])?;
        Ok(self.push(out, op, g))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64>,
        op: Op,
    ) -> Result<NodeId> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        same_shape("elementwise op", av, bv)?;
        let out = f(av, bv);
        let g = self.grad_of(&[a, b])?;
        Ok(self.push(out, op, g))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x.component_mul(y), Op::Mul(a, b))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x)?.sum();
        let g = self.grad_of(&[x])?;
        Ok(self.push(DMatrix::from_element(1, 1, s), Op::Sum(x), g))
    }

    /// Columns `start..start + len` of `x`.
    pub fn columns(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x)?;
        if start + len > xv.ncols() {
            return Err(Error::dims("columns", format!("<= {}", xv.ncols()), start + len));
        }
        let out = xv.columns(start, len).into_owned();
        let g = self.grad_of(&[x])?;
        Ok(self.push(out, Op::Columns { x, start }, g))
    }

    /// `n x p` (row per time) to the dimension-major `np x 1` column.
    pub fn stack_dim_major(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x)?;
        let out = DMatrix::from_column_slice(xv.len(), 1, xv.as_slice());
        let g = self.grad_of(&[x])?;
        Ok(self.push(out, Op::StackDimMajor(x), g))
    }

    /// `pn x S` dimension-major samples to `Sn x p`, one row per (sample, time).
    pub fn unstack_frames(&mut self, x: NodeId, n_times: usize) -> Result<NodeId> {
        let xv = self.value(x)?;
        if n_times == 0 || xv.nrows() % n_times != 0 {
            return Err(Error::dims("unstack_frames", format!("multiple of {n_times}"), xv.nrows()));
        }
        let p = xv.nrows() / n_times;
        let s = xv.ncols();
        let out = DMatrix::from_fn(s * n_times, p, |row, d| {
            xv[(d * n_times + row % n_times, row / n_times)]
        });
        let g = self.grad_of(&[x])?;
        Ok(self.push(out, Op::UnstackFrames { x, n_times }, g))
    }

    /// `Σ v ln p + (1 - v) ln(1 - p)` with clamped probabilities.
    pub fn bernoulli_loglik(&mut self, probs: NodeId, target: DMatrix<f64>) -> Result<NodeId> {
        let pv = self.value(probs)?;
        same_shape("bernoulli_loglik", pv, &target)?;
        let total: f64 = pv
            .iter()
            .zip(target.iter())
            .map(|(&p, &v)| {
                let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                v * p.ln() + (1.0 - v) * (1.0 - p).ln()
            })
            .sum();
        let g = self.grad_of(&[probs])?;
        Ok(self.push(
            DMatrix::from_element(1, 1, total),
            Op::BernoulliLogLik { probs, target },
            g,
        ))
    }

    /// `-(1/S) Σ_s log N(y_s | μ, diag(e^{2 log σ}))` for the `S` columns of `y`.
    pub fn gaussian_neg_log_density(
        &mut self,
        y: NodeId,
        mu: NodeId,
        log_sigma: NodeId,
    ) -> Result<NodeId> {
        let (yv, mv, lv) = (self.value(y)?, self.value(mu)?, self.value(log_sigma)?);
        if mv.shape() != column(yv.nrows()) || lv.shape() != column(yv.nrows()) {
            return Err(Error::dims(
                "gaussian_neg_log_density",
                yv.nrows(),
                format!("{:?} / {:?}", mv.shape(), lv.shape()),
            ));
        }
        let samples = yv.ncols() as f64;
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        let mut total = 0.0;
        for k in 0..yv.nrows() {
            let inv_var = (-2.0 * lv[(k, 0)]).exp();
            let sq: f64 = yv.row(k).iter().map(|&v| (v - mv[(k, 0)]).powi(2)).sum();
            total += half_log_2pi + lv[(k, 0)] + 0.5 * inv_var * sq / samples;
        }
        let g = self.grad_of(&[y, mu, log_sigma])?;
        Ok(self.push(
            DMatrix::from_element(1, 1, total),
            Op::GaussianNegLogDensity { y, mu, log_sigma },
            g,
        ))
    }

    fn gp_cache(
        &self,
        mu: NodeId,
        log_sigma: NodeId,
        k: NodeId,
        eps: Option<DMatrix<f64>>,
    ) -> Result<(Box<GpCache>, Cholesky)> {
        let (mv, lv, kv) = (self.value(mu)?, self.value(log_sigma)?, self.value(k)?);
        let n = kv.nrows();
        if !kv.is_square() || mv.shape() != column(n) || lv.shape() != column(n) {
            return Err(Error::dims(
                "gp node",
                format!("K {n}x{n} with {n}x1 μ* and log σ*"),
                format!("K {:?}, μ* {:?}, log σ* {:?}", kv.shape(), mv.shape(), lv.shape()),
            ));
        }
        let s = lv.map(|l| (2.0 * l).exp());
        let mut a = kv.clone();
        for d in 0..n {
            a[(d, d)] += s[(d, 0)];
        }
        let chol = Cholesky::new(&a)?;
        let a_inv = chol.inverse();
        // A⁻¹K = I - A⁻¹Σ keeps its accuracy when Σ* is small.
        let mut a_inv_k = -DMatrix::from_fn(n, n, |r, c| a_inv[(r, c)] * s[(c, 0)]);
        for d in 0..n {
            a_inv_k[(d, d)] += 1.0;
        }
        let alpha = &a_inv * mv;
        Ok((
            Box::new(GpCache {
                a_inv,
                a_inv_k,
                alpha,
                s,
                l: DMatrix::zeros(0, 0),
                eps: eps.unwrap_or_else(|| DMatrix::zeros(0, 0)),
            }),
            chol,
        ))
    }

    /// Reparameterized draws from the GP posterior given pseudo-observations.
    ///
    /// `mu` and `log_sigma` are `N x 1`, `k` is the `N x N` prior Gram and each
    /// column of `eps` yields one sample `m + L ε` of the `N x S` output.
    pub fn gp_sample(
        &mut self,
        mu: NodeId,
        log_sigma: NodeId,
        k: NodeId,
        eps: DMatrix<f64>,
    ) -> Result<NodeId> {
        let n = self.value(k)?.nrows();
        if eps.nrows() != n {
            return Err(Error::dims("gp_sample eps rows", n, eps.nrows()));
        }
        let (mut cache, chol) = self.gp_cache(mu, log_sigma, k, Some(eps))?;
        let mv = self.value(mu)?;
        // m = μ - Σα and S = D(I - WᵀW)D with D = Σ^½, W = L⁻¹D. Both equal the
        // textbook K-forms but do not cancel catastrophically for small σ*.
        let mean = DMatrix::from_fn(n, 1, |r, _| mv[(r, 0)] - cache.s[(r, 0)] * cache.alpha[(r, 0)]);
        let sd: Vec<f64> = cache.s.iter().map(|v| v.sqrt()).collect();
        let mut w = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(sd.clone()));
        chol.solve_lower_mut(&mut w);
        let mut cov = -w.tr_mul(&w);
        for d in 0..n {
            cov[(d, d)] += 1.0;
        }
        let mut cov = symmetrize(&DMatrix::from_fn(n, n, |r, c| sd[r] * cov[(r, c)] * sd[c]));
        for d in 0..n {
            cov[(d, d)] += SAMPLE_JITTER;
        }
        cache.l = Cholesky::new(&cov)?.into_factor();
        let mut out = &cache.l * &cache.eps;
        for mut col in out.column_iter_mut() {
            col += &mean;
        }
        let g = self.grad_of(&[mu, log_sigma, k])?;
        Ok(self.push(
            out,
            Op::GpSample {
                mu,
                log_sigma,
                k,
                cache,
            },
            g,
        ))
    }

    /// `log N(μ* | 0, K + diag(e^{2 log σ*}))`.
    pub fn gp_log_marginal(&mut self, mu: NodeId, log_sigma: NodeId, k: NodeId) -> Result<NodeId> {
        let (cache, chol) = self.gp_cache(mu, log_sigma, k, None)?;
        let mv = self.value(mu)?;
        let n = mv.nrows() as f64;
        let quad = mv.dot(&cache.alpha);
        let value = -0.5 * (quad + chol.log_det() + n * (2.0 * PI).ln());
        let g = self.grad_of(&[mu, log_sigma, k])?;
        Ok(self.push(
            DMatrix::from_element(1, 1, value),
            Op::GpLogMarginal {
                mu,
                log_sigma,
                k,
                cache,
            },
            g,
        ))
    }

    /// Adjoints of the scalar `root` with respect to every node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called before any forward pass".into()));
        }
        let root_value = self.value(root)?;
        if root_value.shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, node {} is {:?}",
                root.0,
                root_value.shape()
            )));
        }
        let mut adj: Vec<Option<DMatrix<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(DMatrix::from_element(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj);
            adj[idx] = Some(g);
        }
        Ok(Gradients {
            adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &DMatrix<f64>, adj: &mut [Option<DMatrix<f64>>]) {
        let mut send = |id: NodeId, contrib: DMatrix<f64>| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut adj[id.0] {
                Some(existing) => *existing += contrib,
                slot => *slot = Some(contrib),
            }
        };
        let val = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        let out = &node.value;

        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Affine { x, w, b } => {
                if needs(*x) {
                    send(*x, g * val(*w));
                }
                if needs(*w) {
                    send(*w, g.tr_mul(val(*x)));
                }
                if needs(*b) {
                    send(*b, DMatrix::from_fn(1, g.ncols(), |_, c| g.column(c).sum()));
                }
            }
            Op::Tanh(x) => send(*x, g.zip_map(out, |gi, y| gi * (1.0 - y * y))),
            Op::Sigmoid(x) => send(*x, g.zip_map(out, |gi, y| gi * y * (1.0 - y))),
            Op::Exp(x) => send(*x, g.component_mul(out)),
            Op::Log(x) => send(*x, g.zip_map(val(*x), |gi, v| gi / v)),
            Op::Square(x) => send(*x, g.zip_map(val(*x), |gi, v| 2.0 * gi * v)),
            Op::Scale(x, c) => send(*x, g * *c),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, -g);
            }
            Op::Mul(a, b) => {
                send(*a, g.component_mul(val(*b)));
                send(*b, g.component_mul(val(*a)));
            }
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                send(*x, DMatrix::from_element(r, c, g[(0, 0)]));
            }
            Op::Columns { x, start } => {
                let (r, c) = val(*x).shape();
                let mut full = DMatrix::zeros(r, c);
                full.columns_mut(*start, g.ncols()).copy_from(g);
                send(*x, full);
            }
            Op::StackDimMajor(x) => {
                let (r, c) = val(*x).shape();
                send(*x, DMatrix::from_column_slice(r, c, g.as_slice()));
            }
            Op::UnstackFrames { x, n_times } => {
                let (rows, s) = val(*x).shape();
                let n = *n_times;
                send(
                    *x,
                    DMatrix::from_fn(rows, s, |k, col| g[(col * n + k % n, k / n)]),
                );
            }
            Op::BernoulliLogLik { probs, target } => {
                let g0 = g[(0, 0)];
                let d = val(*probs).zip_map(target, |p, v| {
                    if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                        0.0
                    } else {
                        g0 * (v / p - (1.0 - v) / (1.0 - p))
                    }
                });
                send(*probs, d);
            }
            Op::GaussianNegLogDensity { y, mu, log_sigma } => {
                let g0 = g[(0, 0)];
                let (yv, mv, lv) = (val(*y), val(*mu), val(*log_sigma));
                let samples = yv.ncols() as f64;
                let mut y_bar = DMatrix::zeros(yv.nrows(), yv.ncols());
                let mut mu_bar = DMatrix::zeros(mv.nrows(), 1);
                let mut ls_bar = DMatrix::zeros(lv.nrows(), 1);
                for k in 0..yv.nrows() {
                    let inv_var = (-2.0 * lv[(k, 0)]).exp();
                    let mut sq = 0.0;
                    for s in 0..yv.ncols() {
                        let r = yv[(k, s)] - mv[(k, 0)];
                        y_bar[(k, s)] = g0 * r * inv_var / samples;
                        mu_bar[(k, 0)] -= y_bar[(k, s)];
                        sq += r * r;
                    }
                    ls_bar[(k, 0)] = g0 * (1.0 - inv_var * sq / samples);
                }
                send(*y, y_bar);
                send(*mu, mu_bar);
                send(*log_sigma, ls_bar);
            }
            Op::GpSample {
                mu,
                log_sigma,
                k,
                cache,
            } => {
                let n = cache.s.nrows();
                let m_bar = DMatrix::from_fn(n, 1, |r, _| g.row(r).sum());
                let l_bar = g * cache.eps.transpose();
                let s_bar = cholesky_adjoint(&cache.l, &l_bar);
                let b = &cache.a_inv_k;

                // m = K A⁻¹ μ
                let b_m = b * &m_bar;
                send(*mu, b_m.clone());
                // S = K - K A⁻¹ K, so dS = Bᵀ diag(ds) B with B = A⁻¹ K.
                let bsb = b * &s_bar * b.transpose();
                let s_grad = DMatrix::from_fn(n, 1, |r, _| {
                    -b_m[(r, 0)] * cache.alpha[(r, 0)] + bsb[(r, r)]
                });
                send(*log_sigma, s_grad.zip_map(&cache.s, |gs, s| 2.0 * s * gs));
                if needs(*k) {
                    // dm = Σ A⁻¹ dK α and dS = Σ A⁻¹ dK A⁻¹ Σ; (Σ A⁻¹)ᵀ = I - B.
                    let c = DMatrix::identity(n, n) - b;
                    let k_bar = (&c * &m_bar) * cache.alpha.transpose() + &c * &s_bar * c.transpose();
                    send(*k, symmetrize(&k_bar));
                }
            }
            Op::GpLogMarginal {
                mu,
                log_sigma,
                k,
                cache,
            } => {
                let g0 = g[(0, 0)];
                let n = cache.s.nrows();
                send(*mu, &cache.alpha * -g0);
                let s_grad = DMatrix::from_fn(n, 1, |r, _| {
                    0.5 * g0 * (cache.alpha[(r, 0)].powi(2) - cache.a_inv[(r, r)])
                });
                send(*log_sigma, s_grad.zip_map(&cache.s, |gs, s| 2.0 * s * gs));
                if needs(*k) {
                    let k_bar = (&cache.alpha * cache.alpha.transpose() - &cache.a_inv) * (0.5 * g0);
                    send(*k, k_bar);
                }
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<DMatrix<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`; zero if the root does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Result<DMatrix<f64>> {
        let &(r, c) = self
            .shapes
            .get(id.0)
            .ok_or_else(|| Error::Usage(format!("node {} is not on the differentiated tape", id.0)))?;
        Ok(self
            .adj
            .get(id.0)
            .and_then(|a| a.clone())
            .unwrap_or_else(|| DMatrix::zeros(r, c)))
    }
}

/// Runs `tape.backward(root)` on a fresh tape: a convenience for tests and one-off use.
pub fn backward(tape: &Tape, root: NodeId) -> Result<Gradients> {
    tape.backward(root)
}
