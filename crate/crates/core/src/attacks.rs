//! ℓ∞ projected-gradient attacks: fixed-weight PGD, EOT-PGD for stochastic
//! networks, and FGSM.

use crate::bayes::{EpsBundle, Network, Realization, RealizedNet};
use crate::error::{Error, Result};
use crate::nd::{rng_uniform, slots, GradTape, Real, Reduction, StreamKey, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    /// ℓ∞ radius.
    pub gamma: f64,
    /// Per-iteration step size.
    pub step: f64,
    /// Iteration count.
    pub k: usize,
    /// Resample weights every iteration on stochastic networks.
    pub eot: bool,
    /// Weight samples averaged per EOT iteration.
    pub samples: usize,
    pub random_start: bool,
    /// Valid input interval.
    pub clip: Option<(f64, f64)>,
}

impl AttackConfig {
    /// `k`-step PGD with step `2.5γ/k`, EOT on, no random start, no clipping.
    pub fn pgd(gamma: f64, k: usize) -> Self {
        Self {
            gamma,
            step: if k == 0 { 0.0 } else { 2.5 * gamma / k as f64 },
            k,
            eot: true,
            samples: 1,
            random_start: false,
            clip: None,
        }
    }

    /// A single full-radius sign step.
    pub fn fgsm(gamma: f64) -> Self {
        Self { step: gamma, ..Self::pgd(gamma, 1) }
    }

    /// The identity attack.
    pub fn none() -> Self {
        Self::pgd(0.0, 0)
    }

    pub fn with_step(self, step: f64) -> Self {
        Self { step, ..self }
    }

    pub fn with_eot(self, eot: bool) -> Self {
        Self { eot, ..self }
    }

    pub fn with_samples(self, samples: usize) -> Self {
        Self { samples, ..self }
    }

    pub fn with_random_start(self, random_start: bool) -> Self {
        Self { random_start, ..self }
    }

    pub fn with_clip(self, clip: Option<(f64, f64)>) -> Self {
        Self { clip, ..self }
    }

    /// Same schedule with a different radius; the step keeps its ratio to γ.
    pub fn at_gamma(self, gamma: f64) -> Self {
        let step = if self.gamma > 0.0 {
            self.step * gamma / self.gamma
        } else if self.k > 0 {
            2.5 * gamma / self.k as f64
        } else {
            0.0
        };
        Self { gamma, step, ..self }
    }

    /// Same radius with `k` steps and the default step size.
    pub fn with_k(self, k: usize) -> Self {
        Self { k, step: Self::pgd(self.gamma, k).step, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.k > 0 && self.gamma > 0.0 && !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidConfig(format!("step must be > 0 when k > 0, got {}", self.step)));
        }
        if self.samples == 0 {
            return Err(Error::InvalidConfig("EOT samples must be >= 1".into()));
        }
        if let Some((lo, hi)) = self.clip {
            if !(lo <= hi) {
                return Err(Error::InvalidConfig(format!("clip interval [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }
}

/// Clamps `x` into `[x0 − γ, x0 + γ]`, then into `clip`.
pub fn project_linf<T: Real>(x: &Tensor<T>, x0: &Tensor<T>, gamma: f64, clip: Option<(f64, f64)>) -> Result<Tensor<T>> {
    x.zip_map(x0, |v, c| {
        let c = c.as_f64();
        let mut p = v.as_f64().clamp(c - gamma, c + gamma);
        if let Some((lo, hi)) = clip {
            p = p.clamp(lo, hi);
        }
        T::of(p)
    })
}

/// `∇ₓ Σᵢ CE(f(xᵢ; w), yᵢ)` for one weight realization.
pub fn input_gradient<T: Real>(net: &RealizedNet<'_, T>, x: &Tensor<T>, y: &[usize]) -> Result<Tensor<T>> {
    let mut tape = GradTape::new();
    let xv = tape.param(x.clone());
    let logits = net.record(&mut tape, xv)?;
    let loss = tape.softmax_cross_entropy(logits, y, Reduction::Sum)?;
    let mut grads = tape.backward(loss)?;
    let g = grads.take(xv).expect("input is a tape parameter");
    g.check_finite("attack gradient")
}

fn start<T: Real>(x0: &Tensor<T>, cfg: &AttackConfig, key: StreamKey) -> Result<Tensor<T>> {
    if !cfg.random_start {
        return Ok(x0.clone());
    }
    let noise: Tensor<T> =
        rng_uniform(key.with_slot(slots::RANDOM_START).child(key.slot), x0.shape(), -cfg.gamma, cfg.gamma);
    project_linf(&x0.add(&noise)?, x0, cfg.gamma, cfg.clip)
}

fn sign_step<T: Real>(x: &Tensor<T>, g: &Tensor<T>, step: f64) -> Result<Tensor<T>> {
    x.zip_map(g, |v, d| {
        let s = if d > T::zero() {
            1.0
        } else if d < T::zero() {
            -1.0
        } else {
            0.0
        };
        T::of(v.as_f64() + step * s)
    })
}

/// Iterative sign-gradient ascent with the weights fixed by `mode`. `key`
/// only feeds the random start.
pub fn pgd_attack<T: Real>(
    net: &Network<T>,
    x0: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
    mode: Realization<'_, T>,
    key: StreamKey,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if cfg.gamma == 0.0 {
        return Ok(x0.clone());
    }
    let realized = net.realize(mode)?;
    let mut x = start(x0, cfg, key)?;
    for _ in 0..cfg.k {
        let g = input_gradient(&realized, &x, y)?;
        x = project_linf(&sign_step(&x, &g, cfg.step)?, x0, cfg.gamma, cfg.clip)?;
    }
    Ok(x)
}

/// PGD against the expected loss: iteration `t` draws fresh weights from
/// `key.child(t).child(j)` for each of the `cfg.samples` samples.
pub fn eot_pgd_attack<T: Real>(
    net: &Network<T>,
    x0: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
    key: StreamKey,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if cfg.gamma == 0.0 {
        return Ok(x0.clone());
    }
    let mut x = start(x0, cfg, key)?;
    for t in 0..cfg.k {
        let mut g: Option<Tensor<T>> = None;
        for j in 0..cfg.samples {
            let eps = EpsBundle::draw(net, key.child(t as u64).child(j as u64));
            let gj = input_gradient(&net.realize(Realization::Sampled(&eps))?, &x, y)?;
            g = Some(match g {
                Some(acc) => acc.add(&gj)?,
                None => gj,
            });
        }
        let g = g.expect("samples >= 1");
        x = project_linf(&sign_step(&x, &g, cfg.step)?, x0, cfg.gamma, cfg.clip)?;
    }
    Ok(x)
}

/// `x0 + γ·sign(∇ₓℓ)`, then clipped.
pub fn fgsm<T: Real>(
    net: &Network<T>,
    x0: &Tensor<T>,
    y: &[usize],
    gamma: f64,
    clip: Option<(f64, f64)>,
    mode: Realization<'_, T>,
) -> Result<Tensor<T>> {
    let cfg = AttackConfig::fgsm(gamma).with_clip(clip);
    pgd_attack(net, x0, y, &cfg, mode, StreamKey::default())
}

/// The white-box attack appropriate for `net`: EOT-PGD on stochastic
/// networks when `cfg.eot` is set, PGD on one fixed draw when it is not, and
/// PGD on the weights of a deterministic network.
pub fn attack<T: Real>(
    net: &Network<T>,
    x0: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
    key: StreamKey,
) -> Result<Tensor<T>> {
    if !net.is_stochastic() {
        pgd_attack(net, x0, y, cfg, Realization::Mean, key)
    } else if cfg.eot {
        eot_pgd_attack(net, x0, y, cfg, key)
    } else {
        let eps = EpsBundle::draw(net, key.child(0));
        pgd_attack(net, x0, y, cfg, Realization::Sampled(&eps), key)
    }
}
