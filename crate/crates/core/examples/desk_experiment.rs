//! Trains the four defenses on a synthetic set and prints robust accuracy.
//!
//! `cargo run --release --example desk_experiment -- key=value ...`
//! Keys: dataset (moons|blobs), dim, sep, sigma, noise, gamma, sigma0, alpha,
//! epochs, lr, batch, seed.

use std::collections::HashMap;
use std::time::Instant;

use advbnn::attacks::AttackConfig;
use advbnn::data::{synth_blobs, synth_two_moons, Dataset};
use advbnn::eval::{accuracy_under_attack, binomial_sigma};
use advbnn::train::{train, DefenseMode, TrainConfig};
use advbnn::{NetworkSpec, StreamKey};

fn main() -> advbnn::Result<()> {
    let args: HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: f64| args.get(k).map_or(d, |v| v.parse().expect("number"));
    let seed = get("seed", 0.0) as u64;
    let gamma = get("gamma", 0.06);
    let (train_set, test_set): (Dataset<f64>, Dataset<f64>) = match args.get("dataset").map(String::as_str) {
        Some("blobs") => {
            let (dim, sep, sigma) = (get("dim", 2.0) as usize, get("sep", 3.0), get("sigma", 1.0));
            (
                synth_blobs(2000, 3, dim, sep, sigma, StreamKey::new(seed).with_batch(0))?,
                synth_blobs(1000, 3, dim, sep, sigma, StreamKey::new(seed).with_batch(1))?,
            )
        }
        _ => {
            let noise = get("noise", 0.1);
            (
                synth_two_moons(2000, noise, StreamKey::new(seed).with_batch(0))?,
                synth_two_moons(1000, noise, StreamKey::new(seed).with_batch(1))?,
            )
        }
    };
    let spec = NetworkSpec::mlp(train_set.example_shape(), &[64, 64], train_set.classes()).with_bias(true);
    let key = StreamKey::new(seed + 100);
    for defense in DefenseMode::ALL {
        let start = Instant::now();
        let cfg = TrainConfig {
            epochs: get("epochs", 150.0) as usize,
            batch_size: get("batch", 64.0) as usize,
            lr: get("lr", 0.05),
            k_train: 10,
            gamma_train: gamma,
            sigma0: get("sigma0", 0.1),
            alpha: get("alpha", 0.0005),
            seed,
            defense,
            ..TrainConfig::default()
        };
        let mut net = cfg.build::<f64>(spec.clone())?;
        let report = train(&mut net, &train_set, &cfg)?;
        let last = report.metrics.last().expect("epochs > 0");
        let mut line = format!("{defense:>9} train {:.3} kl {:>8.1}", last.clean_acc, last.kl);
        for g in [0.0, gamma / 2.0, gamma, 2.0 * gamma] {
            let acc = accuracy_under_attack(&net, &test_set, &AttackConfig::pgd(g, 20), 20, key)?;
            line += &format!("  γ={g:.3}: {acc:.3}±{:.3}", binomial_sigma(acc, test_set.len()));
        }
        println!("{line}  ({:.1}s)", start.elapsed().as_secs_f64());
    }
    Ok(())
}
