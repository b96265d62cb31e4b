//! Ensemble prediction over weight samples.

use crate::bayes::{network_forward, EpsBundle, Network, Realization};
use crate::error::{Error, Result};
use crate::nd::{argmax_rows, log_softmax_rows, softmax_rows, Real, StreamKey, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PredictRule {
    /// `argmax_y (1/m) Σₖ softmax(f(x; wₖ))[y]`.
    #[default]
    MeanProb,
    /// `argmin_y (1/m) Σₖ CE(f(x; wₖ), y)`, i.e. argmax of the mean log-softmax.
    MinExpectedLoss,
}

impl std::str::FromStr for PredictRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_prob" => Ok(Self::MeanProb),
            "min_expected_loss" => Ok(Self::MinExpectedLoss),
            _ => Err(Error::InvalidConfig(format!("unknown prediction rule `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub labels: Vec<usize>,
    /// Mean class probabilities `[B×C]`.
    pub probs: Tensor<T>,
}

/// Sample `j` uses weights drawn from `key.child(j)`. Deterministic networks
/// need a single forward pass whatever `m` is.
pub fn predict_ensemble<T: Real>(
    net: &Network<T>,
    x: &Tensor<T>,
    m: usize,
    rule: PredictRule,
    key: StreamKey,
) -> Result<Prediction<T>> {
    if m == 0 {
        return Err(Error::Domain("ensemble size must be at least 1".into()));
    }
    let draws = if net.is_stochastic() { m } else { 1 };
    let mut probs: Option<Tensor<T>> = None;
    let mut logp: Option<Tensor<T>> = None;
    for j in 0..draws {
        let logits = if net.is_stochastic() {
            let eps = EpsBundle::draw(net, key.child(j as u64));
            network_forward(net, x, Realization::Sampled(&eps))?
        } else {
            network_forward(net, x, Realization::Mean)?
        };
        let p = softmax_rows(&logits)?;
        probs = Some(match probs {
            Some(acc) => acc.add(&p)?,
            None => p,
        });
        if rule == PredictRule::MinExpectedLoss {
            let l = log_softmax_rows(&logits)?;
            logp = Some(match logp {
                Some(acc) => acc.add(&l)?,
                None => l,
            });
        }
    }
    let probs = probs.expect("at least one draw").scale(T::of(1.0 / draws as f64));
    let labels = match rule {
        PredictRule::MeanProb => argmax_rows(&probs),
        PredictRule::MinExpectedLoss => argmax_rows(&logp.expect("computed for this rule")),
    };
    Ok(Prediction { labels, probs })
}
