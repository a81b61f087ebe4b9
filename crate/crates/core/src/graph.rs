//! Tape-based reverse-mode automatic differentiation.
//!
//! Values are computed eagerly when a node is pushed. Node inputs always have
//! smaller indices than the node itself, so the tape is acyclic and reverse
//! index order is a valid topological order for the backward sweep.

use crate::error::{Error, Result};
use crate::loss::PROB_FLOOR;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    Softmax(Var),
    SumRows(Var),
    SumAll(Var),
    MeanAll(Var),
    KlRows(Var, Var),
    /// KL against `softmax(logits)`; holds the softmax values.
    KlLogitsRows(Var, Var, Tensor),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Accumulated adjoints, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Broadcast-adds a `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::AddRow(a, b), rg))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let v = self.value(a).mul(&c)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::MulConst(a, c), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Square(a), rg)
    }

    /// Elementwise square root. The derivative at exactly zero is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::Invalid("sqrt of negative value".into()));
        }
        let v = self.value(a).map(f64::sqrt);
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Sqrt(a), rg))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax_rows();
        let rg = self.rg(&[a]);
        self.push(v, Op::Softmax(a), rg)
    }

    /// Per-row sums, `rows x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_rows();
        let rg = self.rg(&[a]);
        self.push(v, Op::SumRows(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(v, Op::MeanAll(a), rg)
    }

    /// Per-row clamped KL divergence `KL(p_r || q_r)`, `rows x 1`.
    pub fn kl_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        let (pv, qv) = (self.value(p), self.value(q));
        if pv.shape() != qv.shape() {
            return Err(Error::Shape {
                context: "kl_rows".into(),
                expected: pv.shape().to_vec(),
                got: qv.shape().to_vec(),
            });
        }
        let v = crate::loss::kl_rows(pv, qv);
        let rg = self.rg(&[p, q]);
        Ok(self.push(v, Op::KlRows(p, q), rg))
    }

    /// Per-row `KL(p_r || softmax(z)_r)`, `rows x 1`. The value is clamped
    /// exactly like [`Graph::kl_rows`]; the gradient with respect to the
    /// logits is the unclamped log-softmax derivative `softmax(z) - p`, which
    /// stays informative when the model is confidently wrong.
    pub fn kl_logits_rows(&mut self, p: Var, logits: Var) -> Result<Var> {
        let (pv, zv) = (self.value(p), self.value(logits));
        if pv.shape() != zv.shape() {
            return Err(Error::Shape {
                context: "kl_logits_rows".into(),
                expected: pv.shape().to_vec(),
                got: zv.shape().to_vec(),
            });
        }
        let q = zv.softmax_rows();
        let v = crate::loss::kl_rows(pv, &q);
        let rg = self.rg(&[p, logits]);
        Ok(self.push(v, Op::KlLogitsRows(p, logits, q), rg))
    }

    /// Batch normalisation over rows. With `batch_stats` the statistics come
    /// from the batch itself; otherwise `stats` supplies `(mean, var)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: Option<(&[f64], &[f64])>,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (b, c) = (xv.rows(), xv.cols());
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape {
                context: "batch_norm affine".into(),
                expected: vec![1, c],
                got: self.value(gamma).shape().to_vec(),
            });
        }
        let batch_stats = stats.is_none();
        let (mean, var) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => batch_moments(xv),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        for r in 0..b {
            for (j, h) in xhat.row_mut(r).iter_mut().enumerate() {
                *h = (*h - mean[j]) * inv_std[j];
            }
        }
        let g = self.value(gamma).data().to_vec();
        let be = self.value(beta).data().to_vec();
        let mut out = xhat.clone();
        for r in 0..b {
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = *o * g[j] + be[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// Backpropagates from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.value(root).shape().to_vec();
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot(shape));
        }
        self.backward_with_seed(root, Tensor::full(&shape, 1.0))
    }

    /// Backpropagates an arbitrary adjoint `seed` placed at `node`.
    pub fn backward_with_seed(&self, node: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(node).shape() {
            return Err(Error::Shape {
                context: "backward seed".into(),
                expected: self.value(node).shape().to_vec(),
                got: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[node.0] = Some(seed);
        for i in (0..=node.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let n = &self.nodes[i];
            if !n.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(n, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, n: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &n.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = g.matmul(&self.value(*b).transpose())?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let gb = self.value(*a).transpose().matmul(g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose())?,
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.requires_grad(*b) {
                    let gb = g.sum_cols().reshape(self.value(*b).shape().to_vec())?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::MulConst(a, c) => self.accumulate(grads, *a, g.mul(c)?)?,
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone())?,
            Op::Tanh(a) => {
                let ga = g.zip_map(&n.value, |g, y| g * (1.0 - y * y))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 })?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(*a), |g, x| 2.0 * x * g)?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Sqrt(a) => {
                let ga = g.zip_map(&n.value, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 })?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Softmax(a) => {
                let y = &n.value;
                let c = y.cols();
                let mut ga = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let out = ga.row_mut(r);
                    for j in 0..c {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::SumRows(a) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    let gv = g.data()[r];
                    ga.row_mut(r).iter_mut().for_each(|v| *v = gv);
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::SumAll(a) => {
                let ga = Tensor::full(self.value(*a).shape(), g.item());
                self.accumulate(grads, *a, ga)?;
            }
            Op::MeanAll(a) => {
                let av = self.value(*a);
                let ga = Tensor::full(av.shape(), g.item() / av.numel() as f64);
                self.accumulate(grads, *a, ga)?;
            }
            Op::KlLogitsRows(p, z, qv) => {
                let pv = self.value(*p);
                let c = pv.cols();
                if self.requires_grad(*p) {
                    let mut gp = Tensor::zeros(pv.shape());
                    for r in 0..pv.rows() {
                        let gr = g.data()[r];
                        let (pr, qr) = (pv.row(r), qv.row(r));
                        let out = gp.row_mut(r);
                        for j in 0..c {
                            let active = if pr[j] > PROB_FLOOR { 1.0 } else { 0.0 };
                            out[j] = gr
                                * (pr[j].max(PROB_FLOOR).ln() + active
                                    - qr[j].max(PROB_FLOOR).ln());
                        }
                    }
                    self.accumulate(grads, *p, gp)?;
                }
                if self.requires_grad(*z) {
                    let mut gz = Tensor::zeros(pv.shape());
                    for r in 0..pv.rows() {
                        let gr = g.data()[r];
                        let (pr, qr) = (pv.row(r), qv.row(r));
                        let mass: f64 = pr.iter().sum();
                        for ((o, &pj), &qj) in gz.row_mut(r).iter_mut().zip(pr).zip(qr) {
                            *o = gr * (qj * mass - pj);
                        }
                    }
                    self.accumulate(grads, *z, gz)?;
                }
            }
            Op::KlRows(p, q) => {
                let (pv, qv) = (self.value(*p), self.value(*q));
                let c = pv.cols();
                if self.requires_grad(*p) {
                    let mut gp = Tensor::zeros(pv.shape());
                    for r in 0..pv.rows() {
                        let gr = g.data()[r];
                        let (pr, qr) = (pv.row(r), qv.row(r));
                        let out = gp.row_mut(r);
                        for j in 0..c {
                            let active = if pr[j] > PROB_FLOOR { 1.0 } else { 0.0 };
                            out[j] = gr
                                * (pr[j].max(PROB_FLOOR).ln() + active
                                    - qr[j].max(PROB_FLOOR).ln());
                        }
                    }
                    self.accumulate(grads, *p, gp)?;
                }
                if self.requires_grad(*q) {
                    let mut gq = Tensor::zeros(qv.shape());
                    for r in 0..qv.rows() {
                        let gr = g.data()[r];
                        let (pr, qr) = (pv.row(r), qv.row(r));
                        let out = gq.row_mut(r);
                        for j in 0..c {
                            out[j] = if qr[j] > PROB_FLOOR {
                                -gr * pr[j] / qr[j]
                            } else {
                                0.0
                            };
                        }
                    }
                    self.accumulate(grads, *q, gq)?;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (b, c) = (xhat.rows(), xhat.cols());
                let gam = self.value(*gamma).data();
                if self.requires_grad(*gamma) {
                    let gg = g
                        .mul(xhat)?
                        .sum_cols()
                        .reshape(self.value(*gamma).shape().to_vec())?;
                    self.accumulate(grads, *gamma, gg)?;
                }
                if self.requires_grad(*beta) {
                    let gb = g.sum_cols().reshape(self.value(*beta).shape().to_vec())?;
                    self.accumulate(grads, *beta, gb)?;
                }
                if self.requires_grad(*x) {
                    let mut dxhat = g.clone();
                    for r in 0..b {
                        for (j, v) in dxhat.row_mut(r).iter_mut().enumerate() {
                            *v *= gam[j];
                        }
                    }
                    let mut gx = Tensor::zeros(&[b, c]);
                    if *batch_stats {
                        let s1 = dxhat.sum_cols();
                        let s2 = dxhat.mul(xhat)?.sum_cols();
                        let bf = b as f64;
                        for r in 0..b {
                            let (dh, xh) = (dxhat.row(r).to_vec(), xhat.row(r).to_vec());
                            for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                                *o = inv_std[j] / bf
                                    * (bf * dh[j] - s1.data()[j] - xh[j] * s2.data()[j]);
                            }
                        }
                    } else {
                        for r in 0..b {
                            let dh = dxhat.row(r).to_vec();
                            for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                                *o = dh[j] * inv_std[j];
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
            }
        }
        Ok(())
    }
}

/// Per-column mean and biased variance.
pub(crate) fn batch_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (b, c) = (x.rows(), x.cols());
    let bf = b as f64;
    let mean: Vec<f64> = x.sum_cols().data().iter().map(|s| s / bf).collect();
    let mut var = vec![0.0; c];
    for r in 0..b {
        for (j, v) in x.row(r).iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= bf);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar function of one tensor.
    fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let diff = a.sub(b).unwrap().norm();
        diff / (a.norm().max(b.norm()).max(1e-8))
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(3.0));
        let y = g.square(w);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_root_has_zero_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(3.0));
        let zero = g.scale(w, 0.0);
        let c = g.add_scalar(zero, 5.0);
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(w).unwrap().item(), 0.0);
    }

    #[test]
    fn kl_logits_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Tensor::standard_normal(4, 5, &mut rng).softmax_rows();
        let z = Tensor::standard_normal(4, 5, &mut rng);
        let f = |z: &Tensor| crate::loss::kl_rows(&p, &z.softmax_rows()).sum();
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let zv = g.param(z.clone());
        let kl = g.kl_logits_rows(pv, zv).unwrap();
        let total = g.sum_all(kl);
        assert!((g.value(total).item() - f(&z)).abs() < 1e-12);
        let grads = g.backward(total).unwrap();
        let num = numeric_grad(&f, &z, 1e-6);
        assert!(rel_err(grads.get(zv).unwrap(), &num) < 1e-6);
    }

    #[test]
    fn kl_logits_gradient_survives_saturation() {
        // Softmax puts ~e^-60 on the true class; the clamped path gives no signal.
        let p = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let z = Tensor::from_rows(&[vec![-30.0, 30.0]]).unwrap();
        let mut g = Graph::new();
        let pv = g.constant(p);
        let zv = g.param(z);
        let kl = g.kl_logits_rows(pv, zv).unwrap();
        let total = g.sum_all(kl);
        let grads = g.backward(total).unwrap();
        let gz = grads.get(zv).unwrap();
        assert!((gz.data()[0] + 1.0).abs() < 1e-12);
        assert!((gz.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(w), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn tanh_dot_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::standard_normal(1, 5, &mut rng);
        let w0 = Tensor::standard_normal(1, 5, &mut rng).scale(0.5);
        let f = |w: &Tensor| -> f64 { w.mul(&x).unwrap().map(f64::tanh).sum() };
        let mut g = Graph::new();
        let w = g.param(w0.clone());
        let xc = g.constant(x.clone());
        let p = g.mul(w, xc).unwrap();
        let t = g.tanh(p);
        let s = g.sum_all(t);
        let grads = g.backward(s).unwrap();
        let num = numeric_grad(&f, &w0, 1e-5);
        assert!(rel_err(grads.get(w).unwrap(), &num) < 1e-6);
    }

    #[test]
    fn batch_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Tensor::standard_normal(6, 3, &mut rng);
        let gamma = Tensor::standard_normal(1, 3, &mut rng);
        let beta = Tensor::standard_normal(1, 3, &mut rng);
        let weights = Tensor::standard_normal(6, 3, &mut rng);
        let f = |x: &Tensor| -> f64 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let gv = g.constant(gamma.clone());
            let bv = g.constant(beta.clone());
            let y = g.batch_norm(xv, gv, bv, 1e-5, None).unwrap();
            g.value(y).mul(&weights).unwrap().sum()
        };
        let mut g = Graph::new();
        let xv = g.param(x0.clone());
        let gv = g.constant(gamma.clone());
        let bv = g.constant(beta.clone());
        let y = g.batch_norm(xv, gv, bv, 1e-5, None).unwrap();
        let m = g.mul_const(y, weights.clone()).unwrap();
        let s = g.sum_all(m);
        let grads = g.backward(s).unwrap();
        let num = numeric_grad(&f, &x0, 1e-5);
        assert!(rel_err(grads.get(xv).unwrap(), &num) < 1e-6);
    }

    #[test]
    fn sqrt_at_zero_has_zero_derivative() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(0.0));
        let r = g.sqrt(w).unwrap();
        let grads = g.backward(r).unwrap();
        assert_eq!(grads.get(w).unwrap().item(), 0.0);
    }

    #[test]
    fn seeded_backward_checks_shape() {
        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(&[2, 2]));
        let t = g.tanh(w);
        assert!(g.backward_with_seed(t, Tensor::zeros(&[1, 2])).is_err());
        let grads = g.backward_with_seed(t, Tensor::full(&[2, 2], 2.0)).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0; 4]);
    }
}
