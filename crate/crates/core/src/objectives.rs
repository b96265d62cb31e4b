//! KL divergence to the prior, the scaled robust-ELBO loss, and the clean
//! ELBO estimate.
//!
//! The minibatch objective is
//!
//! ```text
//! total = mean_i CE(f(x_i^adv; w), y_i) + (α / N_tr) · KL(q_{μ,s} ‖ N(0, σ₀²))
//! ```
//!
//! with the full KL added to every minibatch, so the minibatch gradient is an
//! unbiased estimate of the full-dataset gradient.

use crate::bayes::{EpsBundle, Network, Realization};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nd::{cross_entropy_per_example, slots, GradTape, Real, Reduction, StreamKey, Tensor};

/// `KL(N(μ_s, σ_s²) ‖ N(μ_t, σ_t²))`.
pub fn kl_gaussian(mu_s: f64, sigma_s: f64, mu_t: f64, sigma_t: f64) -> Result<f64> {
    if !(sigma_s > 0.0 && sigma_t > 0.0) {
        return Err(Error::Domain(format!("standard deviations must be positive, got {sigma_s} and {sigma_t}")));
    }
    let d = mu_s - mu_t;
    Ok((sigma_t / sigma_s).ln() + (sigma_s * sigma_s + d * d) / (2.0 * sigma_t * sigma_t) - 0.5)
}

/// `g(μ, s)`: KL of the factorized posterior from the network's prior, summed
/// over every variational weight. Deterministic networks contribute zero.
pub fn prior_kl<T: Real>(net: &Network<T>) -> f64 {
    let sigma0 = net.prior().sigma0();
    let ln0 = sigma0.ln();
    let inv = 1.0 / (2.0 * sigma0 * sigma0);
    net.variational_params()
        .flat_map(|p| p.mu.data().iter().zip(p.s.data()))
        .map(|(&m, &s)| {
            let (m, s) = (m.as_f64(), s.as_f64());
            ln0 - s + ((2.0 * s).exp() + m * m) * inv - 0.5
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    /// Mean cross-entropy over the batch.
    pub ce: f64,
    /// `g(μ, s)`, zero for deterministic networks.
    pub kl: f64,
    pub total: f64,
    pub alpha: f64,
    pub n_tr: usize,
}

impl LossBreakdown {
    fn new(ce: f64, kl: f64, alpha: f64, n_tr: usize) -> Self {
        Self { ce, kl, total: ce + alpha * kl / n_tr as f64, alpha, n_tr }
    }
}

fn check_n_tr(n_tr: usize) -> Result<()> {
    if n_tr == 0 {
        return Err(Error::Domain("training-set size must be at least 1".into()));
    }
    Ok(())
}

/// Loss value via a plain forward pass (no tape).
pub fn total_loss<T: Real>(
    net: &Network<T>,
    x_adv: &Tensor<T>,
    y: &[usize],
    mode: Realization<'_, T>,
    n_tr: usize,
) -> Result<LossBreakdown> {
    check_n_tr(n_tr)?;
    let logits = crate::bayes::network_forward(net, x_adv, mode)?;
    let per = cross_entropy_per_example(&logits, y)?;
    let ce = per.iter().map(|v| v.as_f64()).sum::<f64>() / per.len() as f64;
    Ok(LossBreakdown::new(ce, prior_kl(net), net.alpha(), n_tr))
}

/// Loss and its gradient with respect to every trainable tensor, aligned
/// with [`Network::params`].
pub fn total_loss_grad<T: Real>(
    net: &Network<T>,
    x_adv: &Tensor<T>,
    y: &[usize],
    mode: Realization<'_, T>,
    n_tr: usize,
) -> Result<(LossBreakdown, Vec<Tensor<T>>)> {
    check_n_tr(n_tr)?;
    let mut tape = GradTape::new();
    let x = tape.constant(x_adv.clone());
    let graph = net.record_trainable(&mut tape, x, mode)?;
    let ce = tape.softmax_cross_entropy(graph.logits, y, Reduction::Mean)?;
    let ce_value = tape.value(ce).item().as_f64();

    let sigma0 = T::of(net.prior().sigma0());
    let mut kl = None;
    for &(mu, s) in &graph.variational {
        let term = tape.prior_kl(mu, s, sigma0)?;
        kl = Some(match kl {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let (loss, kl_value) = match kl {
        Some(kl) => {
            let kl_value = tape.value(kl).item().as_f64();
            let scaled = tape.scale(kl, T::of(net.alpha() / n_tr as f64));
            (tape.add(ce, scaled)?, kl_value)
        }
        None => (ce, 0.0),
    };
    let breakdown = LossBreakdown::new(ce_value, kl_value, net.alpha(), n_tr);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("total_loss".into()));
    }

    let mut grads = tape.backward(loss)?;
    let out =
        graph.params.iter().map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))).collect();
    Ok((breakdown, out))
}

/// `−g(μ, s) + Σᵢ (1/m) Σₖ log p(yᵢ | xᵢ, wₖ)` for the given weight draws.
pub fn elbo_clean_with<T: Real>(net: &Network<T>, x: &Tensor<T>, y: &[usize], draws: &[EpsBundle<T>]) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::Domain("ELBO needs at least one weight sample".into()));
    }
    let mut loglik = 0.0;
    for eps in draws {
        let logits = crate::bayes::network_forward(net, x, Realization::Sampled(eps))?;
        let per = cross_entropy_per_example(&logits, y)?;
        loglik -= per.iter().map(|v| v.as_f64()).sum::<f64>();
    }
    Ok(loglik / draws.len() as f64 - prior_kl(net))
}

/// Monte-Carlo ELBO on unperturbed data with `m` weight samples.
pub fn elbo_clean<T: Real>(net: &Network<T>, data: &Dataset<T>, m: usize, key: StreamKey) -> Result<f64> {
    if m == 0 {
        return Err(Error::Domain("ELBO needs at least one weight sample".into()));
    }
    let key = key.with_slot(slots::DIAGNOSTIC);
    let draws: Vec<EpsBundle<T>> = (0..m).map(|k| net.sample_eps(key.child(k as u64))).collect();
    elbo_clean_with(net, data.inputs(), data.labels(), &draws)
}
