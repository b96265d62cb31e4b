//! Finite-difference gradient checks and a quick property self-test.

use crate::attacks::{eot_pgd_attack, fgsm, input_gradient, pgd_attack, project_linf, AttackConfig};
use crate::bayes::{
    rand_layer_backward, EpsBundle, Layer, LayerSpec, Network, NetworkSpec, Prior, Realization, VariationalParams,
    Weights,
};
use crate::data::{parse_grid, parse_idx_images, synth_blobs, Dataset, RunConfig, IDX_IMAGES_MAGIC};
use crate::error::Result;
use crate::eval::affinity;
use crate::nd::{finite_diff_grad, relative_error, rng_normal, rng_uniform, GradTape, Reduction, StreamKey, Tensor};
use crate::objectives::{kl_gaussian, prior_kl, total_loss, total_loss_grad};
use crate::train::{decode_checkpoint, encode_checkpoint, CheckpointMeta};

/// Finite-difference step and tolerance for 64-bit checks.
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// All trainable values of `net`, concatenated in [`Network::params`] order.
pub fn flatten_params(net: &Network<f64>) -> Tensor<f64> {
    let data: Vec<f64> = net.params().iter().flat_map(|p| p.data().iter().copied()).collect();
    let n = data.len();
    Tensor::new(vec![n], data).expect("flat")
}

/// Inverse of [`flatten_params`].
pub fn unflatten_params(net: &mut Network<f64>, theta: &Tensor<f64>) {
    let mut offset = 0;
    for p in net.params_mut() {
        let n = p.len();
        p.data_mut().copy_from_slice(&theta.data()[offset..offset + n]);
        offset += n;
    }
}

/// Relative error between the taped gradient of the total loss and central
/// differences, over every trainable value, with `eps` held fixed.
pub fn param_gradient_error(
    net: &Network<f64>,
    x: &Tensor<f64>,
    y: &[usize],
    eps: Option<&EpsBundle<f64>>,
    n_tr: usize,
) -> Result<f64> {
    let mode = eps.map_or(Realization::Mean, Realization::Sampled);
    let (_, grads) = total_loss_grad(net, x, y, mode, n_tr)?;
    let flat: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
    let analytic = Tensor::new(vec![flat.len()], flat)?;
    let mut probe = net.clone();
    let numeric = finite_diff_grad(
        |theta| {
            unflatten_params(&mut probe, theta);
            Ok(total_loss(&probe, x, y, mode, n_tr)?.total)
        },
        &flatten_params(net),
        FD_STEP,
    )?;
    relative_error(&analytic, &numeric)
}

/// Relative error of the input gradient used by the attacks.
pub fn input_gradient_error(
    net: &Network<f64>,
    x: &Tensor<f64>,
    y: &[usize],
    mode: Realization<'_, f64>,
) -> Result<f64> {
    let realized = net.realize(mode)?;
    let analytic = input_gradient(&realized, x, y)?;
    let numeric = finite_diff_grad(
        |xp| {
            let logits = realized.forward(xp)?;
            Ok(crate::nd::cross_entropy_per_example(&logits, y)?.iter().sum())
        },
        x,
        FD_STEP,
    )?;
    relative_error(&analytic, &numeric)
}

/// Compares [`rand_layer_backward`] against full autodiff of
/// `CE + g(μ, s)/N` on a one-layer variational network with random
/// parameters, inputs, noise, σ₀ and N drawn from `key`. Returns the larger
/// of the μ and s relative errors.
pub fn rand_layer_backward_error(key: StreamKey) -> Result<f64> {
    let mut rng_key = key.child(0);
    let mut next = || {
        rng_key = rng_key.child(1);
        rng_key
    };
    let u = |k: StreamKey, lo: f64, hi: f64| rng_uniform::<f64>(k, &[1], lo, hi).data()[0];
    let d_in = 2 + (u(next(), 0.0, 4.0) as usize);
    let d_out = 2 + (u(next(), 0.0, 3.0) as usize);
    let batch = 1 + (u(next(), 0.0, 4.0) as usize);
    let sigma0 = u(next(), 0.05, 1.0);
    let n_tr = 1 + (u(next(), 0.0, 200.0) as usize);
    let shape = [d_out, d_in];
    let p = VariationalParams::new(rng_uniform(next(), &shape, -1.0, 1.0), rng_uniform(next(), &shape, -3.0, 0.5))?;
    let eps = rng_normal::<f64>(next(), &shape);
    let x = rng_uniform::<f64>(next(), &[batch, d_in], 0.0, 1.0);
    let y: Vec<usize> = (0..batch).map(|i| (i * 7 + d_in) % d_out).collect();

    // reference: everything on the tape
    let net = Network::new(
        vec![Layer::Linear { weight: Weights::Variational(p.clone()), bias: None }],
        vec![d_in],
        Prior::new(sigma0)?,
        1.0,
    )?;
    let bundle = EpsBundle::from_layers(vec![Some(eps.clone())]);
    let (_, reference) = total_loss_grad(&net, &x, &y, Realization::Sampled(&bundle), n_tr)?;

    // custom rule: ∂CE/∂w from the tape, then the reparameterized backward
    let mut tape = GradTape::new();
    let xv = tape.constant(x);
    let wv = tape.param(crate::bayes::sample_weights(&p, &eps)?);
    let logits = tape.linear(xv, wv)?;
    let ce = tape.softmax_cross_entropy(logits, &y, Reduction::Mean)?;
    let grad_w = tape.backward(ce)?.take(wv).expect("weight is a parameter");
    let (gm, gs) = rand_layer_backward(&grad_w, &p, &eps, sigma0, n_tr)?;
    Ok(relative_error(&gm, &reference[0])?.max(relative_error(&gs, &reference[1])?))
}

/// Two-layer variational MLP with biases, 123 trainable values.
pub fn gradcheck_mlp(stochastic: bool, key: StreamKey) -> Result<Network<f64>> {
    NetworkSpec::mlp(&[4], &[8], 3).with_bias(true).stochastic(stochastic).with_prior(0.3, 0.7).build(key)
}

fn gradcheck_cnn(key: StreamKey) -> Result<Network<f64>> {
    NetworkSpec {
        input_shape: vec![1, 5, 5],
        layers: vec![
            LayerSpec::Conv2d { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::Conv2d { out_channels: 2, kernel: 3, stride: 2, padding: 0 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Linear { out: 3 },
        ],
        bias: true,
        stochastic: true,
        sigma0: 0.2,
        alpha: 1.0,
    }
    .build(key)
}

/// The full finite-difference suite (64-bit, `h = 1e-5`, tolerance `1e-6`).
pub fn gradcheck_suite(seed: u64) -> Vec<Check> {
    let key = StreamKey::new(seed).with_slot(crate::nd::slots::DIAGNOSTIC);
    let y = [0, 2, 1, 2, 0];
    let judge = |e: f64| (e <= FD_TOL, format!("relative error {e:.3e} (tolerance {FD_TOL:e})"));
    let mut out = Vec::new();

    out.push(Check::from_result(
        "variational MLP parameters",
        (|| {
            let net = gradcheck_mlp(true, key.child(0))?;
            let x = rng_uniform(key.child(1), &[5, 4], 0.0, 1.0);
            let eps = net.sample_eps(key.child(2));
            Ok(judge(param_gradient_error(&net, &x, &y, Some(&eps), 50)?))
        })(),
    ));
    out.push(Check::from_result(
        "variational MLP parameters, mean weights",
        (|| {
            let net = gradcheck_mlp(true, key.child(3))?;
            let x = rng_uniform(key.child(4), &[5, 4], 0.0, 1.0);
            Ok(judge(param_gradient_error(&net, &x, &y, None, 50)?))
        })(),
    ));
    out.push(Check::from_result(
        "deterministic MLP parameters",
        (|| {
            let net = gradcheck_mlp(false, key.child(5))?;
            let x = rng_uniform(key.child(6), &[5, 4], 0.0, 1.0);
            Ok(judge(param_gradient_error(&net, &x, &y, None, 50)?))
        })(),
    ));
    out.push(Check::from_result(
        "variational CNN parameters",
        (|| {
            let net = gradcheck_cnn(key.child(7))?;
            let x = rng_uniform(key.child(8), &[2, 1, 5, 5], 0.0, 1.0);
            let eps = net.sample_eps(key.child(9));
            Ok(judge(param_gradient_error(&net, &x, &[1, 2], Some(&eps), 10)?))
        })(),
    ));
    out.push(Check::from_result(
        "input gradient",
        (|| {
            let net = gradcheck_cnn(key.child(10))?;
            let x = rng_uniform(key.child(11), &[2, 1, 5, 5], 0.0, 1.0);
            let eps = net.sample_eps(key.child(12));
            Ok(judge(input_gradient_error(&net, &x, &[0, 2], Realization::Sampled(&eps))?))
        })(),
    ));
    out.push(Check::from_result(
        "reparameterized backward vs autodiff (20 cases)",
        (|| {
            let mut worst = 0.0f64;
            for i in 0..20 {
                worst = worst.max(rand_layer_backward_error(key.child(100 + i))?);
            }
            Ok(judge(worst))
        })(),
    ));
    out
}

fn blobs(n: usize, seed: u64) -> Result<Dataset<f64>> {
    synth_blobs(n, 3, 2, 3.0, 0.5, StreamKey::new(seed))
}

/// Quick property checks over every module.
pub fn selftest_suite(seed: u64) -> Vec<Check> {
    let key = StreamKey::new(seed);
    let mut out = gradcheck_suite(seed);

    out.push(Check::from_result(
        "kl_gaussian non-negative, zero on the diagonal",
        (|| {
            let mut worst = f64::INFINITY;
            for &ms in &[-1.0, 0.0, 0.7] {
                for &ss in &[0.1, 1.0, 3.0] {
                    for &mt in &[-1.0, 0.0, 0.7] {
                        for &st in &[0.1, 1.0, 3.0] {
                            worst = worst.min(kl_gaussian(ms, ss, mt, st)?);
                        }
                    }
                    if kl_gaussian(ms, ss, ms, ss)?.abs() > 1e-12 {
                        return Ok((false, format!("KL({ms},{ss}) with itself is nonzero")));
                    }
                }
            }
            Ok((worst >= 0.0, format!("minimum {worst:.3e}")))
        })(),
    ));
    out.push(Check::from_result(
        "prior_kl equals the sum of per-weight KLs",
        (|| {
            let net = gradcheck_mlp(true, key.child(20))?;
            let direct: f64 = net
                .variational_params()
                .flat_map(|p| p.mu.data().iter().zip(p.s.data()))
                .map(|(&m, &s)| kl_gaussian(m, s.exp(), 0.0, net.prior().sigma0()))
                .sum::<Result<f64>>()?;
            let rel = (prior_kl(&net) - direct).abs() / direct.abs();
            Ok((rel <= 1e-7, format!("relative error {rel:.3e}")))
        })(),
    ));
    out.push(Check::from_result(
        "attacks stay in the ball and the clip range",
        (|| {
            let net = gradcheck_mlp(true, key.child(21))?;
            for i in 0..50u64 {
                let k = key.child(1000 + i);
                let gamma = rng_uniform::<f64>(k.child(0), &[1], 0.0, 0.3).data()[0];
                let x0 = rng_uniform(k.child(1), &[3, 4], 0.0, 1.0);
                let cfg = AttackConfig::pgd(gamma, 3).with_random_start(i % 2 == 0).with_clip(Some((0.0, 1.0)));
                let x = eot_pgd_attack(&net, &x0, &[0, 1, 2], &cfg, k)?;
                let dev = x.max_abs_diff(&x0)?;
                if dev > gamma + 1e-7 || x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Ok((false, format!("run {i}: deviation {dev} for gamma {gamma}")));
                }
            }
            Ok((true, "50 runs".into()))
        })(),
    ));
    out.push(Check::from_result(
        "FGSM equals one-step PGD; gamma 0 is the identity",
        (|| {
            let net = gradcheck_mlp(false, key.child(22))?;
            let x0 = rng_uniform(key.child(23), &[4, 4], 0.0, 1.0);
            let y = [0, 1, 2, 0];
            let a = fgsm(&net, &x0, &y, 0.05, None, Realization::Mean)?;
            let b = pgd_attack(&net, &x0, &y, &AttackConfig::pgd(0.05, 1).with_step(0.05), Realization::Mean, key)?;
            let c = pgd_attack(&net, &x0, &y, &AttackConfig::pgd(0.0, 10), Realization::Mean, key)?;
            Ok((a == b && c == x0, String::new()))
        })(),
    ));
    out.push(Check::from_result(
        "projection is the nearest point of the ball",
        (|| {
            let x0 = Tensor::<f64>::new(vec![1], vec![0.5])?;
            let x = Tensor::new(vec![1], vec![0.75])?;
            let p = project_linf(&x, &x0, 0.1, None)?;
            Ok(((p.data()[0] - 0.6).abs() < 1e-15, format!("{}", p.data()[0])))
        })(),
    ));
    out.push(Check::from_result(
        "checkpoint round trip",
        (|| {
            let net = gradcheck_mlp(true, key.child(24))?;
            let (back, _) = decode_checkpoint::<f64>(&encode_checkpoint(&net, &CheckpointMeta::default()))?;
            Ok((back == net, String::new()))
        })(),
    ));
    out.push(Check::from_result(
        "IDX fixture and grid parsing",
        (|| {
            let mut bytes = Vec::new();
            for w in [IDX_IMAGES_MAGIC, 1, 1, 2] {
                bytes.extend_from_slice(&w.to_be_bytes());
            }
            bytes.extend_from_slice(&[0, 255]);
            let t = parse_idx_images::<f64>(&bytes, "fixture")?;
            let grid = parse_grid("0:0.07:0.005")?;
            Ok((t.data() == [0.0, 1.0] && grid.len() == 15, format!("{} grid points", grid.len())))
        })(),
    ));
    out.push(Check::from_result(
        "config rejects unknown keys",
        Ok((RunConfig::parse("no_such_key = 1").is_err(), String::new())),
    ));
    out.push(Check::from_result(
        "affinity (0.9, 0.5, 0.1) = 0.5",
        affinity(0.9, 0.5, 0.1).map(|r| (r == 0.5, format!("{r}"))),
    ));
    out.push(Check::from_result("blobs reproducible", (|| Ok((blobs(60, 3)? == blobs(60, 3)?, String::new())))()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradcheck_suite_passes() {
        for c in gradcheck_suite(1) {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn selftest_passes() {
        let checks = selftest_suite(2);
        assert!(checks.len() > 10);
        for c in checks {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn mlp_size_fits_gradcheck_budget() {
        let net = gradcheck_mlp(true, StreamKey::new(0)).unwrap();
        assert!(flatten_params(&net).len() <= 500);
    }
}
