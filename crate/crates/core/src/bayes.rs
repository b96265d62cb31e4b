//! Mean-field Gaussian layers and the sequential network built from them.
//!
//! A variational weight tensor is stored as `(μ, s)` with posterior
//! `N(μ, exp(2s))` per entry, and realized as `w = μ + exp(s) ⊙ ε` for a
//! standard-normal `ε`. Deterministic layers hold a plain weight tensor and
//! ignore `ε`.

use std::borrow::Cow;

use crate::error::{dim_err, Error, Result};
use crate::nd::{rng_normal, rng_uniform, GradTape, Real, StreamKey, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct VariationalParams<T> {
    pub mu: Tensor<T>,
    /// Log standard deviation.
    pub s: Tensor<T>,
}

impl<T: Real> VariationalParams<T> {
    pub fn new(mu: Tensor<T>, s: Tensor<T>) -> Result<Self> {
        mu.expect_same_shape(&s, "variational params")?;
        Ok(Self { mu, s })
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    pub fn std(&self) -> Tensor<T> {
        self.s.map(T::exp)
    }
}

/// `μ ~ U(−1/√fan_in, 1/√fan_in)` and `s = ln σ₀`, so the initial posterior
/// variance equals the prior's.
pub fn init_variational<T: Real>(
    shape: &[usize],
    sigma0: f64,
    fan_in: usize,
    key: StreamKey,
) -> Result<VariationalParams<T>> {
    if !(sigma0 > 0.0 && sigma0.is_finite()) {
        return Err(Error::Domain(format!("prior std must be positive, got {sigma0}")));
    }
    if fan_in == 0 {
        return Err(Error::Domain("fan_in must be at least 1".into()));
    }
    let mu = init_fixed(shape, fan_in, key);
    let s = Tensor::full(shape, T::of(sigma0.ln()));
    VariationalParams::new(mu, s)
}

/// Uniform fan-in initialization for deterministic weights.
pub fn init_fixed<T: Real>(shape: &[usize], fan_in: usize, key: StreamKey) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    rng_uniform(key, shape, -bound, bound)
}

/// `μ + exp(s) ⊙ ε`.
pub fn sample_weights<T: Real>(p: &VariationalParams<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    p.mu.expect_same_shape(eps, "sample_weights")?;
    let mut w = p.mu.clone();
    for ((o, &s), &e) in w.data_mut().iter_mut().zip(p.s.data()).zip(eps.data()) {
        *o += s.exp() * e;
    }
    w.check_finite("sample_weights")
}

/// Backward rule of a reparameterized weight with the per-example KL
/// regularizer `g(μ, s)/N` folded in:
///
/// ```text
/// ∂/∂μ = grad_out + μ / (σ₀² N)
/// ∂/∂s = grad_out ⊙ exp(s) ⊙ ε − 1/N + exp(2s) / (σ₀² N)
/// ```
pub fn rand_layer_backward<T: Real>(
    grad_out: &Tensor<T>,
    p: &VariationalParams<T>,
    eps: &Tensor<T>,
    sigma0: T,
    n: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    grad_out.expect_same_shape(&p.mu, "rand_layer_backward")?;
    eps.expect_same_shape(&p.mu, "rand_layer_backward eps")?;
    if n == 0 {
        return Err(Error::Domain("training-set size must be at least 1".into()));
    }
    let n = T::of(n as f64);
    let denom = sigma0 * sigma0 * n;
    let grad_mu = grad_out.zip_map(&p.mu, |g, m| g + m / denom)?;
    let mut grad_s = grad_out.clone();
    for ((gs, &s), &e) in grad_s.data_mut().iter_mut().zip(p.s.data()).zip(eps.data()) {
        let std = s.exp();
        *gs = *gs * std * e - T::one() / n + std * std / denom;
    }
    Ok((grad_mu, grad_s))
}

/// Isotropic Gaussian prior `N(0, σ₀² I)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prior {
    sigma0: f64,
}

impl Prior {
    pub fn new(sigma0: f64) -> Result<Self> {
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::Domain(format!("prior std must be positive, got {sigma0}")));
        }
        Ok(Self { sigma0 })
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Weights<T> {
    Fixed(Tensor<T>),
    Variational(VariationalParams<T>),
}

impl<T: Real> Weights<T> {
    pub fn shape(&self) -> &[usize] {
        match self {
            Weights::Fixed(w) => w.shape(),
            Weights::Variational(p) => p.shape(),
        }
    }

    pub fn mean(&self) -> &Tensor<T> {
        match self {
            Weights::Fixed(w) => w,
            Weights::Variational(p) => &p.mu,
        }
    }

    fn realize(&self, eps: Option<&Tensor<T>>) -> Result<Cow<'_, Tensor<T>>> {
        match (self, eps) {
            (Weights::Variational(p), Some(e)) => Ok(Cow::Owned(sample_weights(p, e)?)),
            _ => Ok(Cow::Borrowed(self.mean())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Linear { weight: Weights<T>, bias: Option<Tensor<T>> },
    Conv2d { weight: Weights<T>, bias: Option<Tensor<T>>, stride: usize, padding: usize },
    Relu,
    Flatten,
}

impl<T: Real> Layer<T> {
    pub fn weights(&self) -> Option<&Weights<T>> {
        match self {
            Layer::Linear { weight, .. } | Layer::Conv2d { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor<T>> {
        match self {
            Layer::Linear { bias, .. } | Layer::Conv2d { bias, .. } => bias.as_ref(),
            _ => None,
        }
    }

    pub fn is_variational(&self) -> bool {
        matches!(self.weights(), Some(Weights::Variational(_)))
    }

    /// Per-example output shape for a per-example input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Relu => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Linear { weight, bias } => {
                let &[out, d_in] = weight.shape() else {
                    return dim_err(format!("linear weight must be 2-D, got {:?}", weight.shape()));
                };
                if input != [d_in] {
                    return dim_err(format!("linear layer expects input [{d_in}], got {input:?}"));
                }
                if let Some(b) = bias {
                    if b.shape() != [out] {
                        return dim_err(format!("linear bias {:?}, expected [{out}]", b.shape()));
                    }
                }
                Ok(vec![out])
            }
            Layer::Conv2d { weight, bias, stride, padding } => {
                let &[c, h, w] = input else {
                    return dim_err(format!("conv2d expects [C,H,W] input, got {input:?}"));
                };
                let g = crate::nd::ConvGeometry::new(&[1, c, h, w], weight.shape(), *stride, *padding)?;
                if let Some(b) = bias {
                    if b.shape() != [g.c_out] {
                        return dim_err(format!("conv bias {:?}, expected [{}]", b.shape(), g.c_out));
                    }
                }
                Ok(vec![g.c_out, g.h_out, g.w_out])
            }
        }
    }
}

/// Per-layer noise for one realization of the network's weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsBundle<T> {
    eps: Vec<Option<Tensor<T>>>,
}

impl<T: Real> EpsBundle<T> {
    /// Fresh standard-normal noise for each variational layer; layer `i`
    /// reads the sub-stream `key.child(i)`.
    pub fn draw(net: &Network<T>, key: StreamKey) -> Self {
        let eps = net
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| match l.weights() {
                Some(Weights::Variational(p)) => Some(rng_normal(key.child(i as u64), p.shape())),
                _ => None,
            })
            .collect();
        Self { eps }
    }

    pub fn zeros(net: &Network<T>) -> Self {
        let eps = net
            .layers
            .iter()
            .map(|l| match l.weights() {
                Some(Weights::Variational(p)) => Some(Tensor::zeros(p.shape())),
                _ => None,
            })
            .collect();
        Self { eps }
    }

    pub fn from_layers(eps: Vec<Option<Tensor<T>>>) -> Self {
        Self { eps }
    }

    pub fn get(&self, layer: usize) -> Option<&Tensor<T>> {
        self.eps.get(layer).and_then(Option::as_ref)
    }
}

/// Which weights a forward pass uses.
#[derive(Clone, Copy, Debug)]
pub enum Realization<'a, T> {
    /// `ε = 0` everywhere: the posterior means.
    Mean,
    Sampled(&'a EpsBundle<T>),
}

impl<'a, T: Real> Realization<'a, T> {
    fn eps(&self, layer: usize) -> Option<&'a Tensor<T>> {
        match self {
            Realization::Mean => None,
            Realization::Sampled(b) => b.get(layer),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    layers: Vec<Layer<T>>,
    input_shape: Vec<usize>,
    output_dim: usize,
    prior: Prior,
    alpha: f64,
}

impl<T: Real> Network<T> {
    /// Validates that layer shapes compose and the output is a class vector.
    pub fn new(layers: Vec<Layer<T>>, input_shape: Vec<usize>, prior: Prior, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Domain(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        let mut shape = input_shape.clone();
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
        }
        let output_dim = match shape[..] {
            [c] if c >= 2 => c,
            _ => return dim_err(format!("network output must be [C] with C >= 2, got {shape:?}")),
        };
        Ok(Self { layers, input_shape, output_dim, prior, alpha })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.output_dim
    }

    pub fn prior(&self) -> Prior {
        self.prior
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Domain(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        self.alpha = alpha;
        Ok(())
    }

    pub fn is_stochastic(&self) -> bool {
        self.layers.iter().any(Layer::is_variational)
    }

    /// Number of weights `d` (bias entries excluded).
    pub fn n_weights(&self) -> usize {
        self.layers.iter().filter_map(Layer::weights).map(|w| w.mean().len()).sum()
    }

    /// Trainable tensors in canonical order: per layer `μ, s` (variational)
    /// or `w` (deterministic), then the bias.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer.weights() {
                Some(Weights::Fixed(w)) => out.push(w),
                Some(Weights::Variational(p)) => {
                    out.push(&p.mu);
                    out.push(&p.s);
                }
                None => {}
            }
            if let Some(b) = layer.bias() {
                out.push(b);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            let (weight, bias) = match layer {
                Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => (weight, bias),
                _ => continue,
            };
            match weight {
                Weights::Fixed(w) => out.push(w),
                Weights::Variational(p) => {
                    out.push(&mut p.mu);
                    out.push(&mut p.s);
                }
            }
            if let Some(b) = bias {
                out.push(b);
            }
        }
        out
    }

    /// Variational parameter blocks in layer order.
    pub fn variational_params(&self) -> impl Iterator<Item = &VariationalParams<T>> {
        self.layers.iter().filter_map(|l| match l.weights() {
            Some(Weights::Variational(p)) => Some(p),
            _ => None,
        })
    }

    pub fn variational_params_mut(&mut self) -> impl Iterator<Item = &mut VariationalParams<T>> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Linear { weight: Weights::Variational(p), .. }
            | Layer::Conv2d { weight: Weights::Variational(p), .. } => Some(p),
            _ => None,
        })
    }

    pub fn sample_eps(&self, key: StreamKey) -> EpsBundle<T> {
        EpsBundle::draw(self, key)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return dim_err(format!("network expects [B, {:?}] input, got {:?}", self.input_shape, x.shape()));
        }
        Ok(())
    }

    /// Concrete weights for one realization.
    pub fn realize(&self, mode: Realization<'_, T>) -> Result<RealizedNet<'_, T>> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                Ok(match l {
                    Layer::Linear { weight, bias } => {
                        RealizedLayer::Linear { w: weight.realize(mode.eps(i))?, b: bias.as_ref() }
                    }
                    Layer::Conv2d { weight, bias, stride, padding } => RealizedLayer::Conv2d {
                        w: weight.realize(mode.eps(i))?,
                        b: bias.as_ref(),
                        stride: *stride,
                        padding: *padding,
                    },
                    Layer::Relu => RealizedLayer::Relu,
                    Layer::Flatten => RealizedLayer::Flatten,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RealizedNet { net: self, layers })
    }

    /// Records the forward pass with every trainable tensor as a tape
    /// parameter. In mean mode `s` is still recorded (it feeds the KL term)
    /// but does not enter the logits.
    pub fn record_trainable(&self, tape: &mut GradTape<T>, x: Var, mode: Realization<'_, T>) -> Result<TrainableGraph> {
        self.check_input(tape.value(x))?;
        let mut params = Vec::new();
        let mut variational = Vec::new();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Relu => tape.relu(h),
                Layer::Flatten => flatten_on_tape(tape, h)?,
                Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                    let w = match weight {
                        Weights::Fixed(w) => {
                            let v = tape.param(w.clone());
                            params.push(v);
                            v
                        }
                        Weights::Variational(p) => {
                            let mu = tape.param(p.mu.clone());
                            let s = tape.param(p.s.clone());
                            params.extend([mu, s]);
                            variational.push((mu, s));
                            match mode.eps(i) {
                                Some(e) => tape.reparam(mu, s, e)?,
                                None => mu,
                            }
                        }
                    };
                    let b = bias.as_ref().map(|b| tape.param(b.clone()));
                    params.extend(b);
                    apply_weighted(tape, layer, h, w, b)?
                }
            };
        }
        Ok(TrainableGraph { logits: h, params, variational })
    }
}

/// Tape handles produced by [`Network::record_trainable`].
#[derive(Clone, Debug)]
pub struct TrainableGraph {
    pub logits: Var,
    /// Aligned with [`Network::params`].
    pub params: Vec<Var>,
    /// `(μ, s)` handles per variational layer.
    pub variational: Vec<(Var, Var)>,
}

fn flatten_on_tape<T: Real>(tape: &mut GradTape<T>, h: Var) -> Result<Var> {
    let (rows, cols) = tape.value(h).rows_cols();
    tape.reshape(h, &[rows, cols])
}

fn apply_weighted<T: Real>(tape: &mut GradTape<T>, layer: &Layer<T>, h: Var, w: Var, b: Option<Var>) -> Result<Var> {
    match layer {
        Layer::Linear { .. } => {
            let y = tape.linear(h, w)?;
            match b {
                Some(b) => tape.add_row_bias(y, b),
                None => Ok(y),
            }
        }
        Layer::Conv2d { stride, padding, .. } => {
            let y = tape.conv2d(h, w, *stride, *padding)?;
            match b {
                Some(b) => tape.add_channel_bias(y, b),
                None => Ok(y),
            }
        }
        _ => unreachable!("only weighted layers carry weights"),
    }
}

#[derive(Debug)]
enum RealizedLayer<'a, T: Real> {
    Linear { w: Cow<'a, Tensor<T>>, b: Option<&'a Tensor<T>> },
    Conv2d { w: Cow<'a, Tensor<T>>, b: Option<&'a Tensor<T>>, stride: usize, padding: usize },
    Relu,
    Flatten,
}

/// A network with one fixed draw of its weights.
#[derive(Debug)]
pub struct RealizedNet<'a, T: Real> {
    net: &'a Network<T>,
    layers: Vec<RealizedLayer<'a, T>>,
}

impl<T: Real> RealizedNet<'_, T> {
    /// Records the forward pass with all weights as constants.
    pub fn record(&self, tape: &mut GradTape<T>, x: Var) -> Result<Var> {
        self.net.check_input(tape.value(x))?;
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                RealizedLayer::Relu => tape.relu(h),
                RealizedLayer::Flatten => flatten_on_tape(tape, h)?,
                RealizedLayer::Linear { w, b } => {
                    let wv = tape.constant(w.as_ref().clone());
                    let y = tape.linear(h, wv)?;
                    match b {
                        Some(b) => {
                            let bv = tape.constant((*b).clone());
                            tape.add_row_bias(y, bv)?
                        }
                        None => y,
                    }
                }
                RealizedLayer::Conv2d { w, b, stride, padding } => {
                    let wv = tape.constant(w.as_ref().clone());
                    let y = tape.conv2d(h, wv, *stride, *padding)?;
                    match b {
                        Some(b) => {
                            let bv = tape.constant((*b).clone());
                            tape.add_channel_bias(y, bv)?
                        }
                        None => y,
                    }
                }
            };
        }
        Ok(h)
    }

    /// Plain forward pass, no tape.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                RealizedLayer::Relu => h.relu(),
                RealizedLayer::Flatten => {
                    let (r, c) = h.rows_cols();
                    h.reshape(&[r, c])?
                }
                RealizedLayer::Linear { w, b } => {
                    let mut y = h.matmul_bt(w)?;
                    if let Some(b) = b {
                        let (rows, cols) = y.rows_cols();
                        for r in 0..rows {
                            for (o, &bv) in y.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(b.data()) {
                                *o += bv;
                            }
                        }
                    }
                    y
                }
                RealizedLayer::Conv2d { w, b, stride, padding } => {
                    let mut y = crate::nd::conv2d(&h, w, *stride, *padding)?;
                    if let Some(b) = b {
                        let &[n, c, hh, ww] = y.shape() else { unreachable!() };
                        let plane = hh * ww;
                        for i in 0..n {
                            for (ch, &bv) in b.data().iter().enumerate() {
                                let base = (i * c + ch) * plane;
                                for o in &mut y.data_mut()[base..base + plane] {
                                    *o += bv;
                                }
                            }
                        }
                    }
                    y
                }
            };
        }
        h.check_finite("network_forward")
    }
}

/// Sequential forward pass producing `[B×C]` logits.
pub fn network_forward<T: Real>(net: &Network<T>, x: &Tensor<T>, mode: Realization<'_, T>) -> Result<Tensor<T>> {
    net.realize(mode)?.forward(x)
}

/// Layer recipe used by [`NetworkSpec`].
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Linear { out: usize },
    Conv2d { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Relu,
    Flatten,
}

/// Architecture plus initialization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub bias: bool,
    pub stochastic: bool,
    pub sigma0: f64,
    pub alpha: f64,
}

impl NetworkSpec {
    /// Fully connected ReLU network; inputs of rank > 1 are flattened first.
    pub fn mlp(input_shape: &[usize], hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        if input_shape.len() > 1 {
            layers.push(LayerSpec::Flatten);
        }
        for &h in hidden {
            layers.push(LayerSpec::Linear { out: h });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Linear { out: classes });
        Self { input_shape: input_shape.to_vec(), layers, bias: false, stochastic: true, sigma0: 0.05, alpha: 1.0 }
    }

    /// Two small convolutions followed by a fully connected head.
    pub fn small_cnn(input_shape: &[usize], hidden: usize, classes: usize) -> Self {
        let layers = vec![
            LayerSpec::Conv2d { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::Conv2d { out_channels: 16, kernel: 3, stride: 2, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Linear { out: hidden },
            LayerSpec::Relu,
            LayerSpec::Linear { out: classes },
        ];
        Self { input_shape: input_shape.to_vec(), layers, bias: false, stochastic: true, sigma0: 0.05, alpha: 1.0 }
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn stochastic(mut self, stochastic: bool) -> Self {
        self.stochastic = stochastic;
        self
    }

    pub fn with_prior(mut self, sigma0: f64, alpha: f64) -> Self {
        self.sigma0 = sigma0;
        self.alpha = alpha;
        self
    }

    /// Initializes weights from `key`; layer `i` draws from `key.child(i)`.
    pub fn build<T: Real>(&self, key: StreamKey) -> Result<Network<T>> {
        let mut shape = self.input_shape.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let k = key.child(i as u64);
            let layer = match *spec {
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Linear { out } => {
                    let &[d_in] = &shape[..] else {
                        return dim_err(format!("linear layer {i} needs a flat input, got {shape:?}"));
                    };
                    Layer::Linear {
                        weight: self.init_weights(&[out, d_in], d_in, k)?,
                        bias: self.bias.then(|| Tensor::zeros(&[out])),
                    }
                }
                LayerSpec::Conv2d { out_channels, kernel, stride, padding } => {
                    let &[c, _, _] = &shape[..] else {
                        return dim_err(format!("conv layer {i} needs [C,H,W] input, got {shape:?}"));
                    };
                    Layer::Conv2d {
                        weight: self.init_weights(&[out_channels, c, kernel, kernel], c * kernel * kernel, k)?,
                        bias: self.bias.then(|| Tensor::zeros(&[out_channels])),
                        stride,
                        padding,
                    }
                }
            };
            shape = layer.output_shape(&shape)?;
            layers.push(layer);
        }
        Network::new(layers, self.input_shape.clone(), Prior::new(self.sigma0)?, self.alpha)
    }

    fn init_weights<T: Real>(&self, shape: &[usize], fan_in: usize, key: StreamKey) -> Result<Weights<T>> {
        Ok(if self.stochastic {
            Weights::Variational(init_variational(shape, self.sigma0, fan_in, key)?)
        } else {
            Weights::Fixed(init_fixed(shape, fan_in, key))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vp(mu: Vec<f64>, s: Vec<f64>) -> VariationalParams<f64> {
        let n = mu.len();
        VariationalParams::new(Tensor::new(vec![n], mu).unwrap(), Tensor::new(vec![n], s).unwrap()).unwrap()
    }

    #[test]
    fn init_sets_log_sigma() {
        let p = init_variational::<f64>(&[3, 4], 1.0, 4, StreamKey::new(1)).unwrap();
        assert!(p.s.data().iter().all(|&s| s == 0.0));
        let p = init_variational::<f64>(&[3, 4], 0.05, 4, StreamKey::new(1)).unwrap();
        assert!(p.s.data().iter().all(|&s| (s - (-2.995_732_273_553_991)).abs() < 1e-12));
        assert!(p.mu.data().iter().all(|&m| m.abs() <= 0.5));
        assert!(init_variational::<f64>(&[2], 0.0, 1, StreamKey::new(1)).is_err());
    }

    #[test]
    fn sample_weights_cases() {
        let p = vp(vec![0.5, -1.0], vec![0.0, 0.0]);
        assert_eq!(sample_weights(&p, &Tensor::zeros(&[2])).unwrap(), p.mu);
        let p0 = vp(vec![0.0, 0.0], vec![0.0, 0.0]);
        let v = Tensor::new(vec![2], vec![0.7, -0.2]).unwrap();
        assert_eq!(sample_weights(&p0, &v).unwrap(), v);
        let p = vp(vec![0.5], vec![2f64.ln()]);
        let w = sample_weights(&p, &Tensor::new(vec![1], vec![0.3]).unwrap()).unwrap();
        assert!((w.data()[0] - 1.1).abs() < 1e-15);
        assert!(sample_weights(&p, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn rand_layer_backward_cases() {
        let sigma0: f64 = 0.15;
        let p = vp(vec![0.0, 0.0], vec![sigma0.ln(); 2]);
        let (gm, gs) =
            rand_layer_backward(&Tensor::zeros(&[2]), &p, &Tensor::new(vec![2], vec![0.4, -1.0]).unwrap(), sigma0, 50)
                .unwrap();
        assert!(gm.max_abs() < 1e-15);
        assert!(gs.max_abs() < 1e-15);

        let p = vp(vec![0.5], vec![0.0]);
        let (gm, gs) = rand_layer_backward(&Tensor::full(&[1], 1.0), &p, &Tensor::full(&[1], 0.3), 1.0, 10).unwrap();
        assert!((gm.data()[0] - 1.05).abs() < 1e-12);
        assert!((gs.data()[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn linear_forward_hand_case() {
        let w = VariationalParams::new(Tensor::eye(2), Tensor::zeros(&[2, 2])).unwrap();
        let net = Network::new(
            vec![Layer::Linear { weight: Weights::Variational(w), bias: None }],
            vec![2],
            Prior::new(1.0).unwrap(),
            1.0,
        )
        .unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(network_forward(&net, &x, Realization::Mean).unwrap(), x);
        let eps = EpsBundle::from_layers(vec![Some(Tensor::from_rows(&[vec![0.5, 0.0], vec![0.0, -0.5]]).unwrap())]);
        let y = network_forward(&net, &x, Realization::Sampled(&eps)).unwrap();
        assert!(y.sub(&Tensor::from_rows(&[vec![1.5, 0.5]]).unwrap()).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn distinct_draws_differ_pinned_draws_repeat() {
        let net = NetworkSpec::mlp(&[3], &[5], 2).build::<f32>(StreamKey::new(2)).unwrap();
        let x = Tensor::full(&[4, 3], 0.5f32);
        let k = StreamKey::new(9);
        let a = net.sample_eps(k.child(0));
        let b = net.sample_eps(k.child(1));
        let ya = network_forward(&net, &x, Realization::Sampled(&a)).unwrap();
        let yb = network_forward(&net, &x, Realization::Sampled(&b)).unwrap();
        assert_ne!(ya, yb);
        assert_eq!(ya, network_forward(&net, &x, Realization::Sampled(&a)).unwrap());
    }

    #[test]
    fn shapes_must_compose() {
        let prior = Prior::new(1.0).unwrap();
        let bad = vec![
            Layer::Linear { weight: Weights::Fixed(Tensor::<f64>::zeros(&[3, 2])), bias: None },
            Layer::Linear { weight: Weights::Fixed(Tensor::zeros(&[2, 4])), bias: None },
        ];
        assert!(Network::new(bad, vec![2], prior, 1.0).is_err());
        let single_output = vec![Layer::Linear { weight: Weights::Fixed(Tensor::<f64>::zeros(&[1, 2])), bias: None }];
        assert!(Network::new(single_output, vec![2], prior, 1.0).is_err());
        assert!(Prior::new(-1.0).is_err());
    }

    #[test]
    fn cnn_builds_and_runs() {
        let net = NetworkSpec::small_cnn(&[1, 6, 6], 10, 3).with_bias(true).build::<f64>(StreamKey::new(4)).unwrap();
        let x = Tensor::full(&[2, 1, 6, 6], 0.5);
        let y = network_forward(&net, &x, Realization::Mean).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(network_forward(&net, &Tensor::full(&[2, 1, 5, 6], 0.5), Realization::Mean).is_err());
    }

    #[test]
    fn params_order_matches_mut() {
        let mut net = NetworkSpec::mlp(&[3], &[4], 2).with_bias(true).build::<f64>(StreamKey::new(1)).unwrap();
        let shapes: Vec<Vec<usize>> = net.params().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![4, 3], vec![4, 3], vec![4], vec![2, 4], vec![2, 4], vec![2]]);
        let shapes_mut: Vec<Vec<usize>> = net.params_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, shapes_mut);
        assert_eq!(net.n_weights(), 20);
    }
}
