//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! `cargo test -p advbnn-core --test acceptance`

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use advbnn::attacks::{eot_pgd_attack, fgsm, pgd_attack, AttackConfig};
use advbnn::data::{
    parse_cifar_bin, parse_idx_images, parse_idx_labels, synth_two_moons, Dataset, RunConfig, CIFAR_RECORD,
};
use advbnn::diagnostics::{gradcheck_mlp, param_gradient_error, rand_layer_backward_error};
use advbnn::eval::{accuracy_under_attack, affinity_matrix, binomial_sigma, ensemble_size_study, pgd_steps_study};
use advbnn::nd::{rng_normal, rng_uniform, slots};
use advbnn::objectives::{kl_gaussian, prior_kl};
use advbnn::train::{decode_checkpoint, encode_checkpoint, train, CheckpointMeta, DefenseMode, TrainConfig};
use advbnn::{Network, NetworkSpec, Realization, StreamKey, Tensor};

// criterion 1–2
const FD_TOL: f64 = 1e-6;
const RAND_LAYER_CASES: u64 = 100;
// criterion 3
const KL_PAIRS: u64 = 20;
const KL_SAMPLES: usize = 1_000_000;
const KL_SE: f64 = 3.0;
const KL_DECOMP_TOL: f64 = 1e-7;
// criterion 4
const FEAS_RUNS: u64 = 10_000;
const FEAS_SLACK: f64 = 1e-7;
const EOT_TOL: f64 = 1e-5;
// criterion 5–8: two moons, 2×64 MLP
const N_TRAIN: usize = 2000;
const N_TEST: usize = 1000;
const MOONS_NOISE: f64 = 0.1;
const DATA_SEED: u64 = 0;
const GAMMA_TRAIN: f64 = 0.06;
const K_TRAIN: usize = 10;
const K_EVAL: usize = 20;
const M_EVAL: usize = 20;
const EPOCHS: usize = 150;
const SIGMA0: f64 = 0.1;
const ALPHA: f64 = 0.0005;
const CLEAN_GAP: f64 = 0.10;
const MAX_RUNTIME_S: f64 = 30.0 * 60.0;
// criterion 8
const STOCHASTIC_DIAG_TOL: f64 = 0.05;
const DUPLICATE_RHO: f64 = 0.8;
// criterion 10
const FUZZ_CASES: u64 = 10_000;

struct Gate {
    failed: Vec<String>,
}

impl Gate {
    fn report(&mut self, id: u32, name: &str, passed: bool, detail: String) {
        // written to the handle directly so the line shows without --nocapture
        let line = format!("{} {id:>2} {name}: {detail}\n", if passed { "PASS" } else { "FAIL" });
        std::io::stdout().write_all(line.as_bytes()).unwrap();
        if !passed {
            self.failed.push(format!("{id} {name}"));
        }
    }
}

fn moons() -> (Dataset<f64>, Dataset<f64>) {
    let key = StreamKey::new(DATA_SEED);
    (
        synth_two_moons(N_TRAIN, MOONS_NOISE, key.with_batch(0)).unwrap(),
        synth_two_moons(N_TEST, MOONS_NOISE, key.with_batch(1)).unwrap(),
    )
}

fn train_cfg(defense: DefenseMode) -> TrainConfig {
    TrainConfig {
        epochs: EPOCHS,
        k_train: K_TRAIN,
        gamma_train: GAMMA_TRAIN,
        sigma0: SIGMA0,
        alpha: ALPHA,
        seed: DATA_SEED,
        defense,
        ..TrainConfig::default()
    }
}

fn spec(data: &Dataset<f64>) -> NetworkSpec {
    NetworkSpec::mlp(data.example_shape(), &[64, 64], data.classes()).with_bias(true)
}

fn train_mode(defense: DefenseMode, data: &Dataset<f64>) -> Network<f64> {
    let cfg = train_cfg(defense);
    let mut net = cfg.build::<f64>(spec(data)).unwrap();
    train(&mut net, data, &cfg).unwrap();
    net
}

fn pgd(gamma: f64) -> AttackConfig {
    AttackConfig::pgd(gamma, K_EVAL)
}

fn criterion_1(gate: &mut Gate) {
    let key = StreamKey::new(1).with_slot(slots::DIAGNOSTIC);
    let net = gradcheck_mlp(true, key.child(0)).unwrap();
    let n_params: usize = net.params().iter().map(|p| p.len()).sum();
    let x = rng_uniform(key.child(1), &[6, 4], 0.0, 1.0);
    let eps = net.sample_eps(key.child(2));
    let err = param_gradient_error(&net, &x, &[0, 1, 2, 2, 1, 0], Some(&eps), 60).unwrap();
    gate.report(
        1,
        "gradient check, variational 2-layer net",
        err <= FD_TOL && n_params <= 500,
        format!("{n_params} params, relative error {err:.2e} (tol {FD_TOL:e})"),
    );
}

fn criterion_2(gate: &mut Gate) {
    let key = StreamKey::new(2).with_slot(slots::DIAGNOSTIC);
    let worst = (0..RAND_LAYER_CASES).map(|i| rand_layer_backward_error(key.child(i)).unwrap()).fold(0.0, f64::max);
    gate.report(
        2,
        "reparameterized backward vs autodiff",
        worst <= FD_TOL,
        format!("{RAND_LAYER_CASES} cases, worst relative error {worst:.2e}"),
    );
}

fn criterion_3(gate: &mut Gate) {
    let key = StreamKey::new(3).with_slot(slots::DIAGNOSTIC);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut nonneg, mut zero_iff, mut worst_z) = (true, true, 0.0f64);
    for i in 0..KL_PAIRS {
        let (ms, ss) = (rng.random_range(-1.0..1.0), rng.random_range(0.2..2.0));
        let (mt, st) = (rng.random_range(-1.0..1.0), rng.random_range(0.2..2.0));
        let kl = kl_gaussian(ms, ss, mt, st).unwrap();
        nonneg &= kl >= 0.0;
        zero_iff &= kl > 0.0 && kl_gaussian(ms, ss, ms, ss).unwrap() == 0.0;
        // log q(z) − log p(z) for z ~ q
        let z = rng_normal::<f64>(key.child(i), &[KL_SAMPLES]);
        let terms: Vec<f64> = z
            .data()
            .iter()
            .map(|&e| {
                let w = ms + ss * e;
                let u = (w - mt) / st;
                (st / ss).ln() - 0.5 * e * e + 0.5 * u * u
            })
            .collect();
        let n = KL_SAMPLES as f64;
        let mean = terms.iter().sum::<f64>() / n;
        let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
        worst_z = worst_z.max((mean - kl).abs() / (var / n).sqrt());
    }
    let net = gradcheck_mlp(true, key.child(100)).unwrap();
    let direct: f64 = net
        .variational_params()
        .flat_map(|p| p.mu.data().iter().zip(p.s.data()))
        .map(|(&m, &s)| kl_gaussian(m, s.exp(), 0.0, net.prior().sigma0()).unwrap())
        .sum();
    let rel = (prior_kl(&net) - direct).abs() / direct;
    gate.report(
        3,
        "KL suite",
        nonneg && zero_iff && worst_z <= KL_SE && rel <= KL_DECOMP_TOL,
        format!(
            "non-negative {nonneg}, zero iff equal {zero_iff}, worst MC deviation {worst_z:.2} SE over {KL_PAIRS} pairs, \
             decomposition error {rel:.1e}"
        ),
    );
}

fn criterion_4(gate: &mut Gate) {
    let key = StreamKey::new(4).with_slot(slots::DIAGNOSTIC);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let nets = [gradcheck_mlp(true, key.child(0)).unwrap(), gradcheck_mlp(false, key.child(1)).unwrap()];
    let mut worst = f64::NEG_INFINITY;
    for i in 0..FEAS_RUNS {
        let k = key.child(10 + i);
        let gamma = if i % 10 == 0 { 0.0 } else { rng.random_range(0.0..0.5) };
        let rows = rng.random_range(1..4);
        let x0 = rng_uniform(k.child(0), &[rows, 4], 0.0, 1.0);
        let y: Vec<usize> = (0..rows).map(|_| rng.random_range(0..3)).collect();
        let mut cfg = AttackConfig::pgd(gamma, rng.random_range(1..6))
            .with_random_start(rng.random_bool(0.5))
            .with_samples(rng.random_range(1..3));
        if rng.random_bool(0.5) {
            cfg = cfg.with_clip(Some((0.0, 1.0)));
        }
        if rng.random_bool(0.3) {
            cfg = cfg.with_step(rng.random_range(0.0..1.0));
        }
        let x = eot_pgd_attack(&nets[(i % 2) as usize], &x0, &y, &cfg, k).unwrap();
        worst = worst.max(x.max_abs_diff(&x0).unwrap() - gamma);
    }
    let net = &nets[1];
    let x0 = rng_uniform::<f64>(key.child(2), &[8, 4], 0.0, 1.0);
    let y = [0, 1, 2, 0, 1, 2, 0, 1];
    let identity = pgd_attack(net, &x0, &y, &pgd(0.0), Realization::Mean, key).unwrap() == x0
        && eot_pgd_attack(&nets[0], &x0, &y, &pgd(0.0), key).unwrap() == x0;
    let fgsm_eq = fgsm(net, &x0, &y, 0.07, None, Realization::Mean).unwrap()
        == pgd_attack(net, &x0, &y, &AttackConfig::pgd(0.07, 1).with_step(0.07), Realization::Mean, key).unwrap();
    let mut flat = nets[0].clone();
    for p in flat.variational_params_mut() {
        p.s = Tensor::full(p.s.shape(), 1e-7f64.ln());
    }
    let cfg = pgd(0.1);
    let eot = eot_pgd_attack(&flat, &x0, &y, &cfg, key.child(3)).unwrap();
    let det = pgd_attack(&flat, &x0, &y, &cfg, Realization::Mean, key.child(3)).unwrap();
    let eot_gap = eot.max_abs_diff(&det).unwrap();
    gate.report(
        4,
        "attack feasibility and identities",
        worst <= FEAS_SLACK && identity && fgsm_eq && eot_gap <= EOT_TOL,
        format!(
            "{FEAS_RUNS} runs, worst excess {worst:.1e}; gamma 0 identity {identity}; FGSM = 1-step PGD {fgsm_eq}; \
             zero-variance EOT vs PGD {eot_gap:.1e}"
        ),
    );
}

struct Trained {
    test: Dataset<f64>,
    nets: Vec<(DefenseMode, Network<f64>)>,
}

fn criterion_5(gate: &mut Gate) -> Trained {
    let start = Instant::now();
    let (train_set, test) = moons();
    let key = StreamKey::new(500);
    let nets: Vec<_> = DefenseMode::ALL.iter().map(|&d| (d, train_mode(d, &train_set))).collect();
    let acc = |g: f64| -> Vec<f64> {
        nets.iter().map(|(_, n)| accuracy_under_attack(n, &test, &pgd(g), M_EVAL, key).unwrap()).collect()
    };
    // order: none, bnn, adv_train, adv_bnn
    let (clean, robust) = (acc(0.0), acc(GAMMA_TRAIN));
    let sigma = |a: f64, b: f64| binomial_sigma(a, N_TEST).max(binomial_sigma(b, N_TEST));
    let vs_adv_train = robust[3] >= robust[2] - sigma(robust[2], robust[3]);
    let vs_none = robust[3] >= robust[0] + 5.0 * sigma(robust[0], robust[3]);
    let clean_ok = clean.iter().all(|a| (a - clean[0]).abs() <= CLEAN_GAP);
    let secs = start.elapsed().as_secs_f64();
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join("/");
    gate.report(
        5,
        "desk experiment, two moons",
        vs_adv_train && vs_none && clean_ok && secs <= MAX_RUNTIME_S,
        format!(
            "none/bnn/adv_train/adv_bnn clean {} robust@{GAMMA_TRAIN} {}; adv_bnn >= adv_train-1σ {vs_adv_train}, \
             >= none+5σ {vs_none}, clean within {CLEAN_GAP} {clean_ok}; {secs:.0}s",
            fmt(&clean),
            fmt(&robust)
        ),
    );
    Trained { test, nets }
}

fn criterion_6(gate: &mut Gate, t: &Trained) {
    let net = &t.nets[3].1;
    let gammas = [0.0, GAMMA_TRAIN / 2.0, GAMMA_TRAIN];
    let rows = ensemble_size_study(net, &t.test, &[20, 40], &gammas, &pgd(GAMMA_TRAIN), StreamKey::new(600)).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for pair in rows.chunks(2) {
        let (a, b) = (pair[0].accuracy, pair[1].accuracy);
        let s = binomial_sigma(a, N_TEST).max(binomial_sigma(b, N_TEST));
        ok &= (a - b).abs() <= 2.0 * s;
        detail.push(format!("γ={:.3}: {a:.3} vs {b:.3}", pair[0].gamma));
    }
    gate.report(6, "ensemble size m=20 vs m=40", ok, detail.join(", "));
}

fn criterion_7(gate: &mut Gate, t: &Trained) {
    let net = &t.nets[3].1;
    let rows = pgd_steps_study(net, &t.test, &[100, 500], GAMMA_TRAIN, &pgd(GAMMA_TRAIN), M_EVAL, StreamKey::new(700))
        .unwrap();
    let (a, b) = (rows[0].accuracy, rows[1].accuracy);
    let s = binomial_sigma(a, N_TEST).max(binomial_sigma(b, N_TEST));
    gate.report(
        7,
        "attack strength k=100 vs k=500",
        (a - b).abs() <= 2.0 * s,
        format!("{a:.3} vs {b:.3} (2σ = {:.3})", 2.0 * s),
    );
}

fn criterion_8(gate: &mut Gate, t: &Trained) {
    let pick = |i: usize, id: &str| (id.to_string(), t.nets[i].1.clone());
    // duplicates are attacked and evaluated with independent draws
    let models = vec![
        pick(0, "none"),
        pick(0, "none-dup"),
        pick(2, "adv_train"),
        pick(1, "bnn"),
        pick(1, "bnn-dup"),
        pick(3, "adv_bnn"),
        pick(3, "adv_bnn-dup"),
    ];
    let mat = affinity_matrix(&models, &t.test, &pgd(GAMMA_TRAIN), M_EVAL, StreamKey::new(800)).unwrap();
    let rho = |a: usize, b: usize| mat.rho[a][b].unwrap_or(f64::NAN);
    let det_diag = [0, 1, 2].iter().all(|&i| rho(i, i) == 1.0);
    let stoch_diag = [(3, 4), (4, 3), (5, 6), (6, 5)]
        .iter()
        .map(|&(a, b)| (rho(a, b) - 1.0).abs())
        .fold(0.0f64, |m, d| if d.is_nan() { f64::INFINITY } else { m.max(d) });
    let dup = [(0, 1), (1, 0), (3, 4), (5, 6)].iter().map(|&(a, b)| rho(a, b)).fold(f64::INFINITY, f64::min);
    gate.report(
        8,
        "affinity diagonal and duplicates",
        det_diag && stoch_diag <= STOCHASTIC_DIAG_TOL && dup >= DUPLICATE_RHO,
        format!(
            "deterministic diagonal exactly 1 {det_diag}; stochastic self-affinity within {stoch_diag:.3} of 1; \
             duplicate ρ >= {dup:.3}"
        ),
    );
}

fn criterion_9(gate: &mut Gate) {
    let (train_set, _) = moons();
    let data = train_set.take(400).unwrap();
    let run = || {
        let cfg = TrainConfig { epochs: 3, ..train_cfg(DefenseMode::AdvBnn) };
        let mut net = cfg.build::<f64>(spec(&data)).unwrap();
        train(&mut net, &data, &cfg).unwrap();
        encode_checkpoint(&net, &CheckpointMeta { defense: cfg.defense, epoch: 3, seed: cfg.seed, config_hash: 0 })
    };
    let (a, b) = (run(), run());
    gate.report(9, "same-seed runs are bit-identical", a == b, format!("{} bytes each", a.len()));
}

fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [0x803, n, rows, cols] {
        out.extend_from_slice(&u32::to_be_bytes(v));
    }
    out.extend_from_slice(pixels);
    out
}

fn criterion_10(gate: &mut Gate) {
    let key = StreamKey::new(10);
    // checkpoint round trip, both precisions
    let net64 = gradcheck_mlp(true, key.child(0)).unwrap();
    let net32 = NetworkSpec::mlp(&[4], &[8], 3).with_bias(true).build::<f32>(key.child(0)).unwrap();
    let x64 = rng_uniform::<f64>(key.child(1), &[5, 4], 0.0, 1.0);
    let eps64 = net64.sample_eps(key.child(2));
    let eps32 = net32.sample_eps(key.child(2));
    let meta = CheckpointMeta::default();
    let (back64, _) = decode_checkpoint::<f64>(&encode_checkpoint(&net64, &meta)).unwrap();
    let (back32, _) = decode_checkpoint::<f32>(&encode_checkpoint(&net32, &meta)).unwrap();
    let fwd64 = |n: &Network<f64>| {
        n.realize(Realization::Sampled(&eps64))
            .unwrap()
            .forward(&x64)
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    let x32 = x64.cast::<f32>();
    let fwd32 = |n: &Network<f32>| {
        n.realize(Realization::Sampled(&eps32))
            .unwrap()
            .forward(&x32)
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    let round_trip = fwd64(&back64) == fwd64(&net64) && fwd32(&back32) == fwd32(&net32);

    // fixtures
    let images = parse_idx_images::<f64>(&idx_images(2, 2, 2, &[0, 51, 102, 255, 255, 0, 3, 204]), "f").unwrap();
    let labels = parse_idx_labels(&[0, 0, 8, 1, 0, 0, 0, 2, 7, 1], "f").unwrap();
    let idx_ok = images.shape() == [2, 1, 2, 2]
        && images.data() == [0.0, 0.2, 0.4, 1.0, 1.0, 0.0, 3.0 / 255.0, 0.8]
        && labels == [7, 1];
    let mut cifar = vec![0u8; 2 * CIFAR_RECORD];
    cifar[0] = 3;
    cifar[1] = 255;
    cifar[CIFAR_RECORD] = 9;
    cifar[2 * CIFAR_RECORD - 1] = 51;
    let c = parse_cifar_bin::<f32>(&cifar, "f").unwrap();
    let cifar_ok = c.labels() == [3, 9]
        && c.inputs().shape() == [2, 3, 32, 32]
        && c.inputs().data()[0] == 1.0
        && c.inputs().data()[2 * 3072 - 1] == 0.2
        && c.inputs().data().iter().filter(|&&v| v != 0.0).count() == 2
        && parse_cifar_bin::<f32>(&[], "f").unwrap().is_empty();

    // fuzzing: random and mutated inputs must give Ok or Err, never panic
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let seeds = [
        idx_images(2, 2, 2, &[1; 8]),
        vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 1],
        cifar.clone(),
        encode_checkpoint(&net64, &meta),
        b"defense = adv_bnn\nepochs = 3\n".to_vec(),
    ];
    let mut panics = 0;
    for i in 0..FUZZ_CASES {
        let mut bytes = seeds[(i % seeds.len() as u64) as usize].clone();
        if rng.random_bool(0.2) {
            bytes = (0..rng.random_range(0..64)).map(|_| rng.random()).collect();
        } else {
            for _ in 0..rng.random_range(1..6) {
                if bytes.is_empty() {
                    break;
                }
                let at = rng.random_range(0..bytes.len());
                match rng.random_range(0..3) {
                    0 => bytes[at] = rng.random(),
                    1 => bytes.truncate(at),
                    _ => bytes.insert(at, rng.random()),
                }
            }
        }
        let outcome = catch_unwind(AssertUnwindSafe(|| {
            let _ = parse_idx_images::<f32>(&bytes, "fuzz");
            let _ = parse_idx_labels(&bytes, "fuzz");
            let _ = parse_cifar_bin::<f32>(&bytes, "fuzz");
            let _ = decode_checkpoint::<f64>(&bytes);
            let _ = decode_checkpoint::<f32>(&bytes);
            let _ = RunConfig::parse(&String::from_utf8_lossy(&bytes));
        }));
        panics += outcome.is_err() as usize;
    }
    gate.report(
        10,
        "I/O round trips, fixtures, fuzzing",
        round_trip && idx_ok && cifar_ok && panics == 0,
        format!("checkpoint bit-exact {round_trip}; IDX {idx_ok}; CIFAR {cifar_ok}; {panics} panics in {FUZZ_CASES} fuzz cases"),
    );
}

#[test]
fn acceptance() {
    let mut gate = Gate { failed: Vec::new() };
    criterion_1(&mut gate);
    criterion_2(&mut gate);
    criterion_3(&mut gate);
    criterion_4(&mut gate);
    let trained = criterion_5(&mut gate);
    criterion_6(&mut gate, &trained);
    criterion_7(&mut gate, &trained);
    criterion_8(&mut gate, &trained);
    criterion_9(&mut gate);
    criterion_10(&mut gate);
    assert!(gate.failed.is_empty(), "failed: {:?}", gate.failed);
}
