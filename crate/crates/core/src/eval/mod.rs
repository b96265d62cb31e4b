//! Evaluation protocols: robust accuracy, γ sweeps, transfer affinity,
//! ensemble-size and attack-steps studies, and input-gradient norms.
//!
//! Every protocol evaluates in fixed batches of [`EVAL_BATCH`]. Batch `b`
//! attacks with `key.with_batch(b).with_slot(ATTACK)` and predicts with
//! `key.with_batch(b).with_slot(ENSEMBLE)`, so runs that differ only in γ, m
//! or k share their random numbers.

mod report;

pub use report::{
    affinity_plot_script, study_plot_script, sweep_plot_script, write_affinity_csv, write_metrics_csv, write_study_csv,
    write_sweep_csv,
};

use sha2::{Digest, Sha256};

use crate::attacks::{attack, input_gradient, AttackConfig};
use crate::bayes::{Network, Realization};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nd::{slots, Real, StreamKey, Tensor};
use crate::train::{predict_ensemble, PredictRule};

pub const EVAL_BATCH: usize = 100;

/// `sqrt(p(1−p)/n)`.
pub fn binomial_sigma(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (p * (1.0 - p) / n as f64).sqrt()
}

fn batches(n: usize) -> impl Iterator<Item = (u64, Vec<usize>)> {
    (0..n.div_ceil(EVAL_BATCH)).map(move |b| (b as u64, (b * EVAL_BATCH..((b + 1) * EVAL_BATCH).min(n)).collect()))
}

/// Adversarial copies of every input, crafted against `net`.
pub fn craft_adversarial<T: Real>(
    net: &Network<T>,
    data: &Dataset<T>,
    cfg: &AttackConfig,
    key: StreamKey,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(data.inputs().len());
    for (b, rows) in batches(data.len()) {
        let batch = data.select(&rows)?;
        let x = attack(net, batch.inputs(), batch.labels(), cfg, key.with_batch(b).with_slot(slots::ATTACK))?;
        out.extend_from_slice(x.data());
    }
    Tensor::new(data.inputs().shape().to_vec(), out)
}

/// Fraction of `inputs` the `m`-sample ensemble labels correctly.
pub fn ensemble_accuracy<T: Real>(
    net: &Network<T>,
    inputs: &Tensor<T>,
    labels: &[usize],
    m: usize,
    rule: PredictRule,
    key: StreamKey,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Domain("accuracy of an empty set".into()));
    }
    let mut hits = 0;
    for (b, rows) in batches(labels.len()) {
        let x = inputs.select_rows(&rows);
        let pred = predict_ensemble(net, &x, m, rule, key.with_batch(b).with_slot(slots::ENSEMBLE))?;
        hits += pred.labels.iter().zip(&rows).filter(|(p, &r)| **p == labels[r]).count();
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Attack every point (EOT-PGD on stochastic nets when `cfg.eot`, PGD
/// otherwise), then predict with an `m`-sample ensemble.
pub fn accuracy_under_attack<T: Real>(
    net: &Network<T>,
    data: &Dataset<T>,
    cfg: &AttackConfig,
    m: usize,
    key: StreamKey,
) -> Result<f64> {
    accuracy_under_attack_with(net, data, cfg, m, PredictRule::MeanProb, key)
}

pub fn accuracy_under_attack_with<T: Real>(
    net: &Network<T>,
    data: &Dataset<T>,
    cfg: &AttackConfig,
    m: usize,
    rule: PredictRule,
    key: StreamKey,
) -> Result<f64> {
    if m == 0 {
        return Err(Error::Domain("ensemble size must be at least 1".into()));
    }
    let x = craft_adversarial(net, data, cfg, key)?;
    ensemble_accuracy(net, &x, data.labels(), m, rule, key)
}

/// First 16 hex digits of the SHA-256 of an attack configuration.
pub fn attack_hash(cfg: &AttackConfig) -> String {
    let digest = Sha256::digest(format!("{cfg:?}").as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub gamma_grid: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub model_id: String,
    pub attack_hash: String,
    pub m: usize,
    pub seed: u64,
    /// Points evaluated per γ.
    pub n: usize,
}

/// One [`accuracy_under_attack`] per γ; `base` supplies everything except
/// the radius, and the step keeps its ratio to γ.
pub fn sweep_gamma<T: Real>(
    net: &Network<T>,
    data: &Dataset<T>,
    gamma_grid: &[f64],
    base: &AttackConfig,
    m: usize,
    key: StreamKey,
    model_id: &str,
) -> Result<SweepResult> {
    if gamma_grid.first() != Some(&0.0) || gamma_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidConfig("γ grid must be ascending and start at 0".into()));
    }
    let accuracy = gamma_grid
        .iter()
        .map(|&g| accuracy_under_attack(net, data, &base.at_gamma(g), m, key))
        .collect::<Result<_>>()?;
    Ok(SweepResult {
        gamma_grid: gamma_grid.to_vec(),
        accuracy,
        model_id: model_id.into(),
        attack_hash: attack_hash(base),
        m,
        seed: key.seed,
        n: data.len(),
    })
}

/// `(Acc[B] − Acc[B|A]) / (Acc[B] − Acc[B|B])`.
pub fn affinity(acc_b: f64, acc_b_given_a: f64, acc_b_given_b: f64) -> Result<f64> {
    let denom = acc_b - acc_b_given_b;
    if !(denom > 0.0) {
        return Err(Error::UndefinedAffinity { acc_b, acc_b_given_a, acc_b_given_b });
    }
    Ok((acc_b - acc_b_given_a) / denom)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    pub model_ids: Vec<String>,
    /// Clean accuracy `Acc[B]` per target.
    pub acc: Vec<f64>,
    /// `acc_given[a][b] = Acc[B|A]`: target `b` on examples crafted against `a`.
    pub acc_given: Vec<Vec<f64>>,
    /// `rho[a][b] = ρ_{A↦B}`; `None` where the denominator vanishes.
    pub rho: Vec<Vec<Option<f64>>>,
}

impl AffinityMatrix {
    /// `|ρ_{A↦B} − ρ_{B↦A}|` when both are defined.
    pub fn asymmetry(&self, a: usize, b: usize) -> Option<f64> {
        Some((self.rho[a][b]? - self.rho[b][a]?).abs())
    }
}

/// Crafts adversarial examples once per source `a` (key `key.child(a)`),
/// evaluates every target on them, and assembles `ρ`. The diagonal uses the
/// same table as the denominators, so defined diagonal entries are exactly 1.
pub fn affinity_matrix<T: Real>(
    models: &[(String, Network<T>)],
    data: &Dataset<T>,
    cfg: &AttackConfig,
    m: usize,
    key: StreamKey,
) -> Result<AffinityMatrix> {
    if models.len() < 2 {
        return Err(Error::InvalidConfig("affinity needs at least two models".into()));
    }
    let (shape, classes) = (models[0].1.input_shape(), models[0].1.num_classes());
    if let Some((id, _)) = models.iter().find(|(_, n)| n.input_shape() != shape || n.num_classes() != classes) {
        return Err(Error::Dimension(format!("model `{id}` does not share input/output shapes")));
    }
    let eval_key = |b: usize| key.child(u64::MAX).child(b as u64);
    let acc = models
        .iter()
        .enumerate()
        .map(|(b, (_, net))| {
            ensemble_accuracy(net, data.inputs(), data.labels(), m, PredictRule::MeanProb, eval_key(b))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc_given = Vec::with_capacity(models.len());
    for (a, (_, source)) in models.iter().enumerate() {
        let x = craft_adversarial(source, data, cfg, key.child(a as u64))?;
        let row = models
            .iter()
            .enumerate()
            .map(|(b, (_, target))| ensemble_accuracy(target, &x, data.labels(), m, PredictRule::MeanProb, eval_key(b)))
            .collect::<Result<Vec<_>>>()?;
        acc_given.push(row);
    }
    let rho = (0..models.len())
        .map(|a| {
            (0..models.len())
                .map(|b| match affinity(acc[b], acc_given[a][b], acc_given[b][b]) {
                    Ok(r) => Some(r),
                    Err(e) => {
                        log::warn!("{} -> {}: {e}", models[a].0, models[b].0);
                        None
                    }
                })
                .collect()
        })
        .collect();
    Ok(AffinityMatrix { model_ids: models.iter().map(|(id, _)| id.clone()).collect(), acc, acc_given, rho })
}

/// One row of a study table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StudyRow {
    /// The varied parameter (`m` or `k`).
    pub param: usize,
    pub gamma: f64,
    pub accuracy: f64,
}

/// Accuracy for every `(m, γ)`; examples are crafted once per γ.
pub fn ensemble_size_study<T: Real>(
    net: &Network<T>,
    data: &Dataset<T>,
    m_grid: &[usize],
    gammas: &[f64],
    base: &AttackConfig,
    key: StreamKey,
) -> Result<Vec<StudyRow>> {
    if m_grid.is_empty() || m_grid.contains(&0) || m_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidConfig("m grid must be ascending and positive".into()));
    }
    let mut rows = Vec::new();
    for &gamma in gammas {
        let x = craft_adversarial(net, data, &base.at_gamma(gamma), key)?;
        for &m in m_grid {
            let accuracy = ensemble_accuracy(net, &x, data.labels(), m, PredictRule::MeanProb, key)?;
            rows.push(StudyRow { param: m, gamma, accuracy });
        }
    }
    Ok(rows)
}

/// Accuracy under `k`-step attacks (step `2.5γ/k`) for every `k`.
pub fn pgd_steps_study<T: Real>(
    net: &Network<T>,
    data: &Dataset<T>,
    k_grid: &[usize],
    gamma: f64,
    base: &AttackConfig,
    m: usize,
    key: StreamKey,
) -> Result<Vec<StudyRow>> {
    if k_grid.is_empty() || k_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidConfig("k grid must be ascending".into()));
    }
    k_grid
        .iter()
        .map(|&k| {
            let cfg = AttackConfig { gamma, ..*base }.with_k(k);
            let accuracy = accuracy_under_attack(net, data, &cfg, m, key)?;
            Ok(StudyRow { param: k, gamma, accuracy })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzStats {
    pub mean_l2: f64,
    pub mean_l1: f64,
    pub max_l2: f64,
    pub n: usize,
}

/// Per-example `‖∇ₓ CE(f(x; μ), y)‖` over the split, using mean weights.
pub fn local_lipschitz_estimate<T: Real>(net: &Network<T>, data: &Dataset<T>) -> Result<LipschitzStats> {
    if data.is_empty() {
        return Err(Error::Domain("gradient norms of an empty set".into()));
    }
    let realized = net.realize(Realization::Mean)?;
    let (mut l2, mut l1, mut max_l2) = (0.0, 0.0, 0.0f64);
    for (_, rows) in batches(data.len()) {
        let batch = data.select(&rows)?;
        // summed loss: row i of the gradient is example i's own gradient
        let g = input_gradient(&realized, batch.inputs(), batch.labels())?;
        let (r, c) = g.rows_cols();
        for i in 0..r {
            let row = &g.data()[i * c..(i + 1) * c];
            let n2 = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            l2 += n2;
            l1 += row.iter().map(|v| v.as_f64().abs()).sum::<f64>();
            max_l2 = max_l2.max(n2);
        }
    }
    let n = data.len();
    Ok(LipschitzStats { mean_l2: l2 / n as f64, mean_l1: l1 / n as f64, max_l2, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::{Layer, NetworkSpec, Prior, Weights};
    use crate::data::synth_blobs;

    #[test]
    fn affinity_cases() {
        assert_eq!(affinity(0.9, 0.5, 0.1).unwrap(), 0.5);
        assert_eq!(affinity(0.9, 0.9, 0.1).unwrap(), 0.0);
        assert_eq!(affinity(0.8, 0.3, 0.3).unwrap(), 1.0);
        assert!(matches!(affinity(0.5, 0.4, 0.5), Err(Error::UndefinedAffinity { .. })));
        assert!(affinity(0.5, 0.4, 0.7).is_err());
        // scale-free in the deviations
        let a = 0.9;
        for s in [0.25, 0.5, 1.5] {
            let r = affinity(a, a - s * 0.3, a - s * 0.6).unwrap();
            assert!((r - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn binomial() {
        assert_eq!(binomial_sigma(0.5, 100), 0.05);
        assert_eq!(binomial_sigma(1.0, 10), 0.0);
    }

    #[test]
    fn constant_net_has_zero_gradient() {
        let zero = Layer::Linear { weight: Weights::Fixed(Tensor::<f64>::zeros(&[3, 2])), bias: None };
        let net = Network::new(vec![zero], vec![2], Prior::new(1.0).unwrap(), 1.0).unwrap();
        let data = synth_blobs(30, 3, 2, 2.0, 0.5, StreamKey::new(1)).unwrap();
        let s = local_lipschitz_estimate(&net, &data).unwrap();
        assert_eq!((s.mean_l2, s.mean_l1, s.max_l2), (0.0, 0.0, 0.0));
    }

    #[test]
    fn logistic_gradient_norm() {
        let w = [0.7, -1.3, 0.4];
        let mut data = vec![0.0; 3];
        data.extend_from_slice(&w);
        let layer = Layer::Linear { weight: Weights::Fixed(Tensor::new(vec![2, 3], data).unwrap()), bias: None };
        let net = Network::new(vec![layer], vec![3], Prior::new(1.0).unwrap(), 1.0).unwrap();
        let ds = synth_blobs::<f64>(40, 2, 3, 2.0, 0.5, StreamKey::new(2)).unwrap();
        let s = local_lipschitz_estimate(&net, &ds).unwrap();
        let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let expect = (0..ds.len())
            .map(|i| {
                let z: f64 = w.iter().zip(ds.inputs().row(i)).map(|(a, b)| a * b).sum();
                let p = 1.0 / (1.0 + (-z).exp());
                (p - ds.labels()[i] as f64).abs() * wn
            })
            .sum::<f64>()
            / ds.len() as f64;
        assert!((s.mean_l2 - expect).abs() <= 1e-6 * expect);
    }

    #[test]
    fn gamma_zero_equals_clean_accuracy() {
        let net = NetworkSpec::mlp(&[2], &[6], 3).with_prior(0.2, 1.0).build::<f64>(StreamKey::new(5)).unwrap();
        let data = synth_blobs(150, 3, 2, 3.0, 0.5, StreamKey::new(6)).unwrap();
        let key = StreamKey::new(7);
        let clean = ensemble_accuracy(&net, data.inputs(), data.labels(), 5, PredictRule::MeanProb, key).unwrap();
        let r = sweep_gamma(&net, &data, &[0.0, 0.05, 0.05], &AttackConfig::pgd(0.05, 3), 5, key, "m").unwrap();
        assert_eq!(r.accuracy[0], clean);
        assert_eq!(r.accuracy[1], r.accuracy[2]);
        assert!(sweep_gamma(&net, &data, &[0.01], &AttackConfig::pgd(0.05, 3), 5, key, "m").is_err());
    }

    #[test]
    fn deterministic_duplicate_affinity_is_one() {
        let net = NetworkSpec::mlp(&[2], &[6], 3).stochastic(false).build::<f64>(StreamKey::new(1)).unwrap();
        let data = synth_blobs(100, 3, 2, 3.0, 0.5, StreamKey::new(2)).unwrap();
        let models = vec![("a".to_string(), net.clone()), ("b".to_string(), net)];
        let mat = affinity_matrix(&models, &data, &AttackConfig::pgd(0.3, 5), 1, StreamKey::new(3)).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                if let Some(r) = mat.rho[a][b] {
                    assert_eq!(r, 1.0);
                }
            }
        }
    }
}
