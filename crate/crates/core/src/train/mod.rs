//! The robust training loop and its baselines, ensemble inference, and
//! checkpoints.
//!
//! Per minibatch: craft `x_adv` (adversarial modes only), draw one weight
//! sample (stochastic networks only), one forward, one backward, one update.

mod checkpoint;
mod predict;
mod sgd;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, peek_dtype, save_checkpoint, CheckpointError,
    CheckpointMeta, MAGIC, VERSION,
};
pub use predict::{predict_ensemble, PredictRule, Prediction};
pub use sgd::Sgd;

use rand::seq::SliceRandom;

use crate::attacks::{attack, AttackConfig};
use crate::bayes::{network_forward, EpsBundle, Network, NetworkSpec, Realization};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nd::{argmax_rows, slots, Real, StreamKey};
use crate::objectives::total_loss_grad;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DefenseMode {
    /// Deterministic weights, clean data.
    None,
    /// Variational weights, clean data.
    Bnn,
    /// Deterministic weights, PGD examples.
    AdvTrain,
    /// Variational weights, EOT-PGD examples.
    AdvBnn,
}

impl DefenseMode {
    pub const ALL: [DefenseMode; 4] = [Self::None, Self::Bnn, Self::AdvTrain, Self::AdvBnn];

    pub fn is_stochastic(self) -> bool {
        matches!(self, Self::Bnn | Self::AdvBnn)
    }

    pub fn is_adversarial(self) -> bool {
        matches!(self, Self::AdvTrain | Self::AdvBnn)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Bnn => "bnn",
            Self::AdvTrain => "adv_train",
            Self::AdvBnn => "adv_bnn",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Self::None => 0,
            Self::Bnn => 1,
            Self::AdvTrain => 2,
            Self::AdvBnn => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }
}

impl std::fmt::Display for DefenseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.name())
    }
}

impl std::str::FromStr for DefenseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown defense `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Multiply `lr` by this every `lr_decay_every` epochs (0 = constant).
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub k_train: usize,
    pub gamma_train: f64,
    /// Training-attack step; `None` means `2.5·γ/k′`.
    pub step_train: Option<f64>,
    pub random_start: bool,
    pub clip: Option<(f64, f64)>,
    pub alpha: f64,
    pub sigma0: f64,
    pub seed: u64,
    pub defense: DefenseMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            lr_decay: 1.0,
            lr_decay_every: 0,
            k_train: 10,
            gamma_train: 8.0 / 256.0,
            step_train: None,
            random_start: false,
            clip: None,
            alpha: 1.0,
            sigma0: 0.05,
            seed: 0,
            defense: DefenseMode::AdvBnn,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return bad(format!("sigma0 must be > 0, got {}", self.sigma0));
        }
        self.attack_config().validate()
    }

    /// The training-time attack; EOT is always on for stochastic networks.
    pub fn attack_config(&self) -> AttackConfig {
        let base = AttackConfig::pgd(self.gamma_train, self.k_train)
            .with_eot(true)
            .with_random_start(self.random_start)
            .with_clip(self.clip);
        match self.step_train {
            Some(step) => base.with_step(step),
            None => base,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_every {
            0 => self.lr,
            every => self.lr * self.lr_decay.powi((epoch / every) as i32),
        }
    }

    /// `base` with stochasticity and prior matching this configuration.
    pub fn network_spec(&self, base: NetworkSpec) -> NetworkSpec {
        base.stochastic(self.defense.is_stochastic()).with_prior(self.sigma0, self.alpha)
    }

    /// Builds and initializes the network for this configuration.
    pub fn build<T: Real>(&self, base: NetworkSpec) -> Result<Network<T>> {
        self.network_spec(base).build(StreamKey::new(self.seed).with_slot(slots::INIT))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean-weight accuracy on the clean training set after the epoch.
    pub clean_acc: f64,
    /// Minibatch means over the epoch.
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
}

/// Work done by the loop, for fidelity checks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainCounters {
    pub minibatches: usize,
    pub attacks: usize,
    pub weight_samples: usize,
    pub forwards: usize,
    pub backwards: usize,
    pub updates: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub counters: TrainCounters,
}

/// Accuracy of the mean weights on clean inputs.
pub fn mean_accuracy<T: Real>(net: &Network<T>, data: &Dataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = argmax_rows(&network_forward(net, data.inputs(), Realization::Mean)?);
    let hits = pred.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Trains `net` in place. The network's stochasticity must match
/// `cfg.defense`; `cfg.alpha` replaces the network's KL factor.
pub fn train<T: Real>(net: &mut Network<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(net, data, cfg, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with<T: Real>(
    net: &mut Network<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    if net.is_stochastic() != cfg.defense.is_stochastic() {
        return Err(Error::InvalidConfig(format!(
            "defense `{}` needs a {} network",
            cfg.defense,
            if cfg.defense.is_stochastic() { "stochastic" } else { "deterministic" }
        )));
    }
    net.set_alpha(cfg.alpha)?;
    let n = data.len();
    let attack_cfg = cfg.attack_config();
    let mut opt = Sgd::new(cfg.momentum);
    let mut report = TrainReport::default();
    let root = StreamKey::new(cfg.seed);

    for epoch in 0..cfg.epochs {
        let ekey = root.with_epoch(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ekey.with_slot(slots::SHUFFLE).rng());
        let lr = cfg.lr_at(epoch);
        let (mut ce, mut kl, mut total, mut batches) = (0.0, 0.0, 0.0, 0usize);

        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let bkey = ekey.with_batch(b as u64);
            let batch = data.select(rows)?;
            let (x, y) = (batch.inputs(), batch.labels());
            let c = &mut report.counters;
            c.minibatches += 1;

            let x_adv = if cfg.defense.is_adversarial() {
                c.attacks += 1;
                attack(net, x, y, &attack_cfg, bkey.with_slot(slots::TRAIN_ATTACK))?
            } else {
                x.clone()
            };
            let eps = net.is_stochastic().then(|| {
                c.weight_samples += 1;
                EpsBundle::draw(net, bkey.with_slot(slots::TRAIN_FORWARD))
            });
            let mode = eps.as_ref().map_or(Realization::Mean, Realization::Sampled);
            let (loss, grads) = total_loss_grad(net, &x_adv, y, mode, n).map_err(|e| match e {
                Error::NonFinite(what) => Error::Diverged { epoch, batch: b, detail: what },
                other => other,
            })?;
            c.forwards += 1;
            c.backwards += 1;
            if let Some(bad) = grads.iter().position(|g| !g.all_finite()) {
                return Err(Error::Diverged { epoch, batch: b, detail: format!("gradient of parameter {bad}") });
            }
            opt.step(net.params_mut(), &grads, lr)?;
            c.updates += 1;

            ce += loss.ce;
            kl += loss.kl;
            total += loss.total;
            batches += 1;
        }
        let k = batches as f64;
        let m = EpochMetrics { epoch, clean_acc: mean_accuracy(net, data)?, ce: ce / k, kl: kl / k, total: total / k };
        log::info!("epoch {epoch}: clean_acc {:.4} ce {:.4} kl {:.3} total {:.4}", m.clean_acc, m.ce, m.kl, m.total);
        on_epoch(&m);
        report.metrics.push(m);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;

    fn blobs() -> Dataset<f64> {
        synth_blobs(200, 2, 2, 6.0, 0.5, StreamKey::new(3)).unwrap()
    }

    fn cfg(defense: DefenseMode) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 32,
            lr: 0.05,
            k_train: 3,
            gamma_train: 0.05,
            sigma0: 0.1,
            alpha: 1.0,
            defense,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_of_each_per_minibatch() {
        let data = blobs();
        for defense in DefenseMode::ALL {
            let c = cfg(defense);
            let mut net = c.build::<f64>(NetworkSpec::mlp(&[2], &[8], 2)).unwrap();
            let r = train(&mut net, &data, &c).unwrap();
            let k = r.counters;
            assert_eq!(k.minibatches, 3 * 7);
            assert_eq!(k.forwards, k.minibatches);
            assert_eq!(k.backwards, k.minibatches);
            assert_eq!(k.updates, k.minibatches);
            assert_eq!(k.attacks, if defense.is_adversarial() { k.minibatches } else { 0 });
            assert_eq!(k.weight_samples, if defense.is_stochastic() { k.minibatches } else { 0 });
            assert_eq!(r.metrics.len(), 3);
        }
    }

    #[test]
    fn mismatched_network_rejected() {
        let c = cfg(DefenseMode::Bnn);
        let mut net = cfg(DefenseMode::None).build::<f64>(NetworkSpec::mlp(&[2], &[4], 2)).unwrap();
        assert!(matches!(train(&mut net, &blobs(), &c), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn zero_radius_adv_bnn_is_bnn() {
        let data = blobs();
        let a = TrainConfig { gamma_train: 0.0, ..cfg(DefenseMode::AdvBnn) };
        let b = TrainConfig { gamma_train: 0.0, ..cfg(DefenseMode::Bnn) };
        let spec = NetworkSpec::mlp(&[2], &[8], 2);
        let mut na = a.build::<f64>(spec.clone()).unwrap();
        let mut nb = b.build::<f64>(spec).unwrap();
        train(&mut na, &data, &a).unwrap();
        train(&mut nb, &data, &b).unwrap();
        for (p, q) in na.params().iter().zip(nb.params()) {
            assert!(p.max_abs_diff(q).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn defense_names_round_trip() {
        for m in DefenseMode::ALL {
            assert_eq!(m.name().parse::<DefenseMode>().unwrap(), m);
            assert_eq!(DefenseMode::from_code(m.code()), Some(m));
        }
        assert!("rse".parse::<DefenseMode>().is_err());
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig { lr: 1.0, lr_decay: 0.5, lr_decay_every: 2, ..TrainConfig::default() };
        assert_eq!([0, 1, 2, 3, 4].map(|e| c.lr_at(e)), [1.0, 1.0, 0.5, 0.5, 0.25]);
    }
}
