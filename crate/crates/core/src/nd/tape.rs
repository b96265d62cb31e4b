//! Reverse-mode gradient tape for sequential feedforward graphs.
//!
//! Operations are appended in forward order; [`GradTape::backward`] walks the
//! record from the loss node down to the first node, so the reverse sweep
//! visits operations in exactly the reverse of their recording order.

use super::tensor::{check_labels, conv2d, conv2d_backward, softmax_rows, ConvGeometry, Real, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// `mu + exp(s) * eps`; `scale` caches `exp(s) * eps`.
    Reparam {
        mu: Var,
        s: Var,
        scale: Tensor<T>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    /// `x · wᵀ`.
    LinearT {
        x: Var,
        w: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// Bias over the last axis of a `[B×n]` input.
    AddRowBias {
        x: Var,
        b: Var,
    },
    /// Bias over axis 1 of a `[B×C×H×W]` input.
    AddChannelBias {
        x: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    Reshape {
        x: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
        reduction: Reduction,
    },
    PriorKl {
        mu: Var,
        s: Var,
        sigma0: T,
    },
    Sum {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct GradTape<T> {
    nodes: Vec<Node<T>>,
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: Vec<usize>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Node indices in the order the reverse sweep processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.axpy(T::one(), &g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl<T: Real> GradTape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn reparam(&mut self, mu: Var, s: Var, eps: &Tensor<T>) -> Result<Var> {
        let mu_t = self.value(mu);
        let s_t = self.value(s);
        mu_t.expect_same_shape(s_t, "reparam")?;
        mu_t.expect_same_shape(eps, "reparam eps")?;
        let scale = s_t.zip_map(eps, |s, e| s.exp() * e)?;
        let w = mu_t.add(&scale)?.check_finite("reparameterized weights")?;
        let rg = self.needs(mu) || self.needs(s);
        Ok(self.push(w, Op::Reparam { mu, s, scale }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul { a, b }, rg))
    }

    /// `x · wᵀ` for `x: [B×in]`, `w: [out×in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = self.value(x).matmul_bt(self.value(w))?;
        let rg = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::LinearT { x, w }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xt = self.value(x);
        let bt = self.value(b);
        let (rows, cols) = xt.rows_cols();
        if xt.rank() != 2 || bt.shape() != [cols] {
            return dim_err(format!("row bias {:?} does not match input {:?}", bt.shape(), xt.shape()));
        }
        let mut out = xt.clone();
        for r in 0..rows {
            for (o, &bv) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(bt.data()) {
                *o += bv;
            }
        }
        let rg = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddRowBias { x, b }, rg))
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xt = self.value(x);
        let bt = self.value(b);
        let &[n, c, h, w] = xt.shape() else {
            return dim_err(format!("channel bias needs a 4-D input, got {:?}", xt.shape()));
        };
        if bt.shape() != [c] {
            return dim_err(format!("channel bias {:?} for {c} channels", bt.shape()));
        }
        let mut out = xt.clone();
        let plane = h * w;
        for i in 0..n {
            for (ch, &bv) in bt.data().iter().enumerate() {
                let base = (i * c + ch) * plane;
                for o in &mut out.data_mut()[base..base + plane] {
                    *o += bv;
                }
            }
        }
        let rg = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddChannelBias { x, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).relu();
        let rg = self.needs(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = conv2d(self.value(x), self.value(w), stride, padding)?;
        let rg = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::Conv2d { x, w, stride, padding }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).scale(c);
        let rg = self.needs(x);
        self.push(out, Op::Scale { x, c }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(x);
        self.push(out, Op::Sum { x }, rg)
    }

    /// Softmax cross-entropy of `[B×C]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let lt = self.value(logits);
        let &[b, c] = lt.shape() else {
            return dim_err(format!("cross-entropy needs [B×C] logits, got {:?}", lt.shape()));
        };
        check_labels(labels, b, c)?;
        let probs = softmax_rows(lt)?;
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            // log-sum-exp form keeps the loss finite for saturated logits
            let row = lt.row(i);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[y];
        }
        if reduction == Reduction::Mean {
            total /= T::of(b as f64);
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("softmax_cross_entropy".into()));
        }
        let rg = self.needs(logits);
        Ok(self.push(Tensor::scalar(total), Op::SoftmaxCe { logits, labels: labels.to_vec(), probs, reduction }, rg))
    }

    /// `Σ [ln σ₀ − s + (exp(2s) + μ²)/(2σ₀²) − ½]`, the KL divergence of the
    /// factorized posterior from an isotropic `N(0, σ₀²)` prior.
    pub fn prior_kl(&mut self, mu: Var, s: Var, sigma0: T) -> Result<Var> {
        let mu_t = self.value(mu);
        let s_t = self.value(s);
        mu_t.expect_same_shape(s_t, "prior_kl")?;
        let half = T::of(0.5);
        let inv = T::one() / (T::of(2.0) * sigma0 * sigma0);
        let ln0 = sigma0.ln();
        let kl: T =
            mu_t.data().iter().zip(s_t.data()).map(|(&m, &s)| ln0 - s + ((s + s).exp() + m * m) * inv - half).sum();
        if !kl.is_finite() {
            return Err(Error::NonFinite("prior_kl".into()));
        }
        let rg = self.needs(mu) || self.needs(s);
        Ok(self.push(Tensor::scalar(kl), Op::PriorKl { mu, s, sigma0 }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return dim_err(format!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut visited = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            match &node.op {
                Op::Leaf => {
                    // leaves keep their gradient for the caller
                    grads[i] = Some(g);
                }
                Op::Reparam { mu, s, scale } => {
                    if self.needs(*s) {
                        accumulate(&mut grads[s.0], g.mul(scale)?)?;
                    }
                    if self.needs(*mu) {
                        accumulate(&mut grads[mu.0], g.clone())?;
                    }
                }
                Op::MatMul { a, b } => {
                    if self.needs(*a) {
                        let ga = g.matmul_bt(self.value(*b))?;
                        accumulate(&mut grads[a.0], ga)?;
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).matmul_at(&g)?;
                        accumulate(&mut grads[b.0], gb)?;
                    }
                }
                Op::LinearT { x, w } => {
                    if self.needs(*x) {
                        let gx = g.matmul(self.value(*w))?;
                        accumulate(&mut grads[x.0], gx)?;
                    }
                    if self.needs(*w) {
                        let gw = g.matmul_at(self.value(*x))?;
                        accumulate(&mut grads[w.0], gw)?;
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g.clone())?;
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g)?;
                    }
                }
                Op::AddRowBias { x, b } => {
                    if self.needs(*b) {
                        let (rows, cols) = g.rows_cols();
                        let mut gb = vec![T::zero(); cols];
                        for r in 0..rows {
                            for (acc, &v) in gb.iter_mut().zip(g.row(r)) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads[b.0], Tensor::new(vec![cols], gb)?)?;
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], g)?;
                    }
                }
                Op::AddChannelBias { x, b } => {
                    if self.needs(*b) {
                        let &[n, c, h, w] = g.shape() else { unreachable!() };
                        let plane = h * w;
                        let mut gb = vec![T::zero(); c];
                        for i in 0..n {
                            for (ch, acc) in gb.iter_mut().enumerate() {
                                let base = (i * c + ch) * plane;
                                *acc += g.data()[base..base + plane].iter().copied().sum::<T>();
                            }
                        }
                        accumulate(&mut grads[b.0], Tensor::new(vec![c], gb)?)?;
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], g)?;
                    }
                }
                Op::Relu { x } => {
                    let gx = g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                    accumulate(&mut grads[x.0], gx)?;
                }
                Op::Conv2d { x, w, stride, padding } => {
                    // geometry was validated on the forward pass
                    debug_assert!(
                        ConvGeometry::new(self.value(*x).shape(), self.value(*w).shape(), *stride, *padding).is_ok()
                    );
                    let (gx, gw) = conv2d_backward(self.value(*x), self.value(*w), &g, *stride, *padding)?;
                    if self.needs(*w) {
                        accumulate(&mut grads[w.0], gw)?;
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], gx)?;
                    }
                }
                Op::Reshape { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads[x.0], g.reshape(&shape)?)?;
                }
                Op::Scale { x, c } => {
                    accumulate(&mut grads[x.0], g.scale(*c))?;
                }
                Op::Sum { x } => {
                    let gx = Tensor::full(self.value(*x).shape(), g.item());
                    accumulate(&mut grads[x.0], gx)?;
                }
                Op::SoftmaxCe { logits, labels, probs, reduction } => {
                    let (_, c) = probs.rows_cols();
                    let mut factor = g.item();
                    if *reduction == Reduction::Mean {
                        factor /= T::of(labels.len() as f64);
                    }
                    let mut gl = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        gl.data_mut()[i * c + y] -= T::one();
                    }
                    accumulate(&mut grads[logits.0], gl.scale(factor))?;
                }
                Op::PriorKl { mu, s, sigma0 } => {
                    let gv = g.item();
                    let inv = T::one() / (*sigma0 * *sigma0);
                    if self.needs(*mu) {
                        let gm = self.value(*mu).map(|m| gv * m * inv);
                        accumulate(&mut grads[mu.0], gm)?;
                    }
                    if self.needs(*s) {
                        let gs = self.value(*s).map(|s| gv * ((s + s).exp() * inv - T::one()));
                        accumulate(&mut grads[s.0], gs)?;
                    }
                }
            }
        }
        Ok(Gradients { grads, visited })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reverse_sweep_order() {
        let mut t = GradTape::<f64>::new();
        let x = t.param(Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap());
        let w = t.param(Tensor::from_rows(&[vec![0.5, 0.25], vec![-1.0, 2.0]]).unwrap());
        let h = t.linear(x, w).unwrap();
        let r = t.relu(h);
        let l = t.softmax_cross_entropy(r, &[1], Reduction::Mean).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.visit_order(), &[l.index(), r.index(), h.index(), w.index(), x.index()]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = GradTape::<f64>::new();
        let x = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let w = t.param(Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap());
        let y = t.linear(x, w).unwrap();
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn kl_zero_at_prior_and_zero_gradient() {
        let sigma0 = 0.05f64;
        let mut t = GradTape::new();
        let mu = t.param(Tensor::zeros(&[3]));
        let s = t.param(Tensor::full(&[3], sigma0.ln()));
        let kl = t.prior_kl(mu, s, sigma0).unwrap();
        assert!(t.value(kl).item().abs() < 1e-15);
        let g = t.backward(kl).unwrap();
        assert!(g.get(mu).unwrap().max_abs() < 1e-15);
        assert!(g.get(s).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = GradTape::<f32>::new();
        let x = t.param(Tensor::zeros(&[2]));
        assert!(t.backward(x).is_err());
    }
}
