//! The `advbnn` command line.
//!
//! Every subcommand accepts every config key as a `--key value` flag (with
//! `-` or `_`), on top of an optional `--config <file>`; `--seed` is one of
//! the keys. Each run writes its resolved configuration into `out`.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use advbnn::attacks::AttackConfig;
use advbnn::bayes::NetworkSpec;
use advbnn::data::{load_cifar_bin, load_idx, synth_blobs, synth_two_moons, Dataset, RunConfig};
use advbnn::diagnostics::{gradcheck_suite, selftest_suite, Check};
use advbnn::eval::{
    accuracy_under_attack, affinity_matrix, affinity_plot_script, binomial_sigma, ensemble_size_study,
    local_lipschitz_estimate, pgd_steps_study, study_plot_script, sweep_gamma, sweep_plot_script, write_affinity_csv,
    write_metrics_csv, write_study_csv, write_sweep_csv,
};
use advbnn::train::{load_checkpoint, save_checkpoint, train_with, CheckpointMeta, EpochMetrics, TrainConfig};
use advbnn::{Error, Network, Real, Result, StreamKey};
use clap::{Arg, ArgAction, ArgMatches, Command};

const SUBCOMMANDS: &[(&str, &str)] = &[
    ("train", "train a model with the chosen defense"),
    ("attack", "accuracy of one model under one attack"),
    ("sweep", "accuracy over a grid of attack radii"),
    ("affinity", "transfer-attack affinity between models"),
    ("ensemble-study", "accuracy against ensemble size"),
    ("pgd-study", "accuracy against attack steps"),
    ("lipschitz", "input-gradient norms on the train and test splits"),
    ("gradcheck", "finite-difference gradient checks"),
    ("selftest", "quick property checks"),
];

fn command() -> Command {
    let mut sub_args: Vec<Arg> =
        vec![Arg::new("config").long("config").value_name("FILE").help("key = value config file")];
    for (key, default, help) in RunConfig::keys() {
        let mut arg = Arg::new(key)
            .long(key.replace('_', "-"))
            .value_name("VALUE")
            .help(format!("{help} [default: {default}]"))
            .action(ArgAction::Set);
        if key.contains('_') {
            arg = arg.alias(key);
        }
        sub_args.push(arg);
    }
    Command::new("advbnn")
        .about("Adversarially trained Bayesian neural networks")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands(SUBCOMMANDS.iter().map(|&(name, about)| Command::new(name).about(about).args(sub_args.clone())))
}

fn resolve(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => RunConfig::load(Path::new(path))?,
        None => RunConfig::default(),
    };
    for (key, _, _) in RunConfig::keys() {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

/// Runs the command line; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = resolve(sub).and_then(|cfg| match cfg.str("precision") {
        "f64" => dispatch::<f64>(name, &cfg),
        _ => dispatch::<f32>(name, &cfg),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("advbnn {name}: error: {e}");
            1
        }
    }
}

fn dispatch<T: Real>(name: &str, cfg: &RunConfig) -> Result<i32> {
    let out = PathBuf::from(cfg.str("out"));
    cfg.write_resolved(&out, &format!("{name}.cfg"))?;
    match name {
        "train" => cmd_train::<T>(cfg, &out),
        "attack" => cmd_attack::<T>(cfg, &out),
        "sweep" => cmd_sweep::<T>(cfg, &out),
        "affinity" => cmd_affinity::<T>(cfg, &out),
        "ensemble-study" => cmd_ensemble_study::<T>(cfg, &out),
        "pgd-study" => cmd_pgd_study::<T>(cfg, &out),
        "lipschitz" => cmd_lipschitz::<T>(cfg, &out),
        "gradcheck" => Ok(report(&gradcheck_suite(cfg.u64("seed")))),
        "selftest" => Ok(report(&selftest_suite(cfg.u64("seed")))),
        other => unreachable!("unregistered subcommand {other}"),
    }
}

fn report(checks: &[Check]) -> i32 {
    for c in checks {
        println!("{c}");
    }
    let passed = checks.iter().filter(|c| c.passed).count();
    println!("{passed}/{} passed", checks.len());
    i32::from(passed != checks.len())
}

fn required<'a>(cfg: &'a RunConfig, key: &str) -> Result<&'a str> {
    match cfg.str(key) {
        "" => Err(Error::InvalidConfig(format!("`{key}` must be set"))),
        v => Ok(v),
    }
}

/// Training and test splits; the test split is capped at `n_test`.
fn load_data<T: Real>(cfg: &RunConfig) -> Result<(Dataset<T>, Dataset<T>)> {
    let root = StreamKey::new(cfg.u64("seed"));
    let (train, test) = match cfg.str("dataset") {
        "blobs" => {
            let gen = |n, b| {
                synth_blobs(
                    n,
                    cfg.usize("classes"),
                    cfg.usize("dim"),
                    cfg.f64("separation"),
                    cfg.f64("blob_sigma"),
                    root.with_batch(b),
                )
            };
            (gen(cfg.usize("n_train"), 0)?, gen(cfg.usize("n_test"), 1)?)
        }
        "moons" => (
            synth_two_moons(cfg.usize("n_train"), cfg.f64("noise"), root.with_batch(0))?,
            synth_two_moons(cfg.usize("n_test"), cfg.f64("noise"), root.with_batch(1))?,
        ),
        "idx" => {
            let train: Dataset<T> =
                load_idx(Path::new(required(cfg, "train_images")?), Path::new(required(cfg, "train_labels")?))?;
            let test = load_idx(Path::new(required(cfg, "test_images")?), Path::new(required(cfg, "test_labels")?))?;
            let classes = train.classes().max(test.classes());
            (train.with_classes(classes)?, test.with_classes(classes)?)
        }
        _ => (
            load_cifar_bin(Path::new(required(cfg, "train_images")?))?,
            load_cifar_bin(Path::new(required(cfg, "test_images")?))?,
        ),
    };
    let n = cfg.usize("n_test");
    Ok((train, test.take(n)?))
}

fn clip(cfg: &RunConfig) -> Result<Option<(f64, f64)>> {
    match cfg.str("clip") {
        "auto" => Ok(matches!(cfg.str("dataset"), "idx" | "cifar").then_some((0.0, 1.0))),
        "none" => Ok(None),
        s => {
            let parse = |t: &str| t.trim().parse::<f64>().ok();
            match s.split_once(',').and_then(|(a, b)| Some((parse(a)?, parse(b)?))) {
                Some(c) => Ok(Some(c)),
                None => Err(Error::InvalidConfig(format!("clip must be `auto`, `none` or `lo,hi`, got `{s}`"))),
            }
        }
    }
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let tc = TrainConfig {
        epochs: cfg.usize("epochs"),
        batch_size: cfg.usize("batch_size"),
        lr: cfg.f64("lr"),
        momentum: cfg.f64("momentum"),
        lr_decay: cfg.f64("lr_decay"),
        lr_decay_every: cfg.usize("lr_decay_every"),
        k_train: cfg.usize("k_train"),
        gamma_train: cfg.f64("gamma_train"),
        step_train: None,
        random_start: cfg.bool("random_start"),
        clip: clip(cfg)?,
        alpha: cfg.f64("alpha"),
        sigma0: cfg.f64("sigma0"),
        seed: cfg.u64("seed"),
        defense: cfg.str("defense").parse()?,
    };
    tc.validate()?;
    Ok(tc)
}

fn attack_config(cfg: &RunConfig) -> Result<AttackConfig> {
    let mut a = AttackConfig::pgd(cfg.f64("gamma"), cfg.usize("k"))
        .with_eot(cfg.bool("eot"))
        .with_samples(cfg.usize("eot_samples"))
        .with_random_start(cfg.bool("random_start"))
        .with_clip(clip(cfg)?);
    if cfg.f64("step") > 0.0 {
        a = a.with_step(cfg.f64("step"));
    }
    a.validate()?;
    Ok(a)
}

fn network_spec(cfg: &RunConfig, data: &Dataset<impl Real>) -> Result<NetworkSpec> {
    let hidden = cfg.usize_list("hidden");
    let spec = match cfg.str("arch") {
        "cnn" => {
            let width = *hidden.first().ok_or_else(|| Error::InvalidConfig("cnn needs one hidden width".into()))?;
            NetworkSpec::small_cnn(data.example_shape(), width, data.classes())
        }
        _ => NetworkSpec::mlp(data.example_shape(), &hidden, data.classes()),
    };
    Ok(spec.with_bias(cfg.bool("bias")))
}

fn config_hash(cfg: &RunConfig) -> u64 {
    u64::from_str_radix(&cfg.hash(), 16).expect("hex digest")
}

fn model_id(meta: &CheckpointMeta) -> String {
    format!("{}-{:08x}", meta.defense, meta.config_hash >> 32)
}

fn load_model<T: Real>(path: &str) -> Result<(Network<T>, CheckpointMeta)> {
    load_checkpoint(Path::new(path))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn cmd_train<T: Real>(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let tc = train_config(cfg)?;
    let (train, test) = load_data::<T>(cfg)?;
    let mut net = tc.build::<T>(network_spec(cfg, &train)?)?;
    let mut metrics: Vec<EpochMetrics> = Vec::new();
    let metrics_path = out.join("metrics.csv");
    let report = train_with(&mut net, &train, &tc, |m| {
        println!(
            "epoch {:>3}  clean_acc {:.4}  ce {:.4}  kl {:.2}  total {:.4}",
            m.epoch, m.clean_acc, m.ce, m.kl, m.total
        );
        metrics.push(*m);
        // rewritten each epoch so an interrupted run keeps its history
        if let Ok(f) = create(&metrics_path) {
            let _ = write_metrics_csv(f, &metrics);
        }
    })?;
    write_metrics_csv(create(&metrics_path)?, &report.metrics)?;
    let meta =
        CheckpointMeta { defense: tc.defense, epoch: tc.epochs as u32, seed: tc.seed, config_hash: config_hash(cfg) };
    let ckpt = out.join("model.abnn");
    save_checkpoint(&net, &meta, &ckpt)?;
    let acc = advbnn::train::mean_accuracy(&net, &test)?;
    println!("test accuracy (mean weights) {acc:.4} on {} points", test.len());
    println!("wrote {} and {}", ckpt.display(), metrics_path.display());
    Ok(0)
}

fn cmd_attack<T: Real>(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let (net, meta) = load_model::<T>(required(cfg, "model")?)?;
    let (_, test) = load_data::<T>(cfg)?;
    let a = attack_config(cfg)?;
    let m = cfg.usize("m");
    let acc = accuracy_under_attack(&net, &test, &a, m, StreamKey::new(cfg.u64("seed")))?;
    let sigma = binomial_sigma(acc, test.len());
    println!("{} gamma {} k {} m {m}: accuracy {acc:.4} ± {sigma:.4}", model_id(&meta), a.gamma, a.k);
    let result = advbnn::eval::SweepResult {
        gamma_grid: vec![a.gamma],
        accuracy: vec![acc],
        model_id: model_id(&meta),
        attack_hash: advbnn::eval::attack_hash(&a),
        m,
        seed: cfg.u64("seed"),
        n: test.len(),
    };
    write_sweep_csv(create(&out.join("attack.csv"))?, &[result])?;
    Ok(0)
}

fn cmd_sweep<T: Real>(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let (_, test) = load_data::<T>(cfg)?;
    let a = attack_config(cfg)?;
    let grid = cfg.grid("gammas");
    let mut paths = cfg.list("models");
    if paths.is_empty() {
        paths.push(required(cfg, "model")?.to_string());
    }
    let mut results = Vec::new();
    for path in &paths {
        let (net, meta) = load_model::<T>(path)?;
        let r = sweep_gamma(&net, &test, &grid, &a, cfg.usize("m"), StreamKey::new(cfg.u64("seed")), &model_id(&meta))?;
        for (g, acc) in r.gamma_grid.iter().zip(&r.accuracy) {
            println!("{}  gamma {g:.4}  accuracy {acc:.4}", r.model_id);
        }
        results.push(r);
    }
    write_sweep_csv(create(&out.join("sweep.csv"))?, &results)?;
    std::fs::write(out.join("sweep.gp"), sweep_plot_script("sweep.csv", "sweep.png"))?;
    Ok(0)
}

fn cmd_affinity<T: Real>(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let paths = cfg.list("models");
    if paths.len() < 2 {
        return Err(Error::InvalidConfig("`models` needs at least two checkpoints".into()));
    }
    let models = paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (net, meta) = load_model::<T>(p)?;
            Ok((format!("{}#{i}", model_id(&meta)), net))
        })
        .collect::<Result<Vec<_>>>()?;
    let (_, test) = load_data::<T>(cfg)?;
    let mat = affinity_matrix(&models, &test, &attack_config(cfg)?, cfg.usize("m"), StreamKey::new(cfg.u64("seed")))?;
    for (a, row) in mat.rho.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|r| r.map_or("   -  ".into(), |v| format!("{v:6.3}"))).collect();
        println!("{:>24} {}", mat.model_ids[a], cells.join(" "));
    }
    write_affinity_csv(create(&out.join("affinity.csv"))?, &mat)?;
    std::fs::write(out.join("affinity.gp"), affinity_plot_script("affinity.csv", "affinity.png", &mat.model_ids))?;
    Ok(0)
}

fn cmd_ensemble_study<T: Real>(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let (net, _) = load_model::<T>(required(cfg, "model")?)?;
    let (_, test) = load_data::<T>(cfg)?;
    let rows = ensemble_size_study(
        &net,
        &test,
        &cfg.usize_list("m_grid"),
        &cfg.grid("gammas"),
        &attack_config(cfg)?,
        StreamKey::new(cfg.u64("seed")),
    )?;
    for r in &rows {
        println!("m {:>4}  gamma {:.4}  accuracy {:.4}", r.param, r.gamma, r.accuracy);
    }
    write_study_csv(create(&out.join("ensemble_study.csv"))?, &rows)?;
    std::fs::write(out.join("ensemble_study.gp"), study_plot_script("ensemble_study.csv", "ensemble_study.png", "m"))?;
    Ok(0)
}

fn cmd_pgd_study<T: Real>(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let (net, _) = load_model::<T>(required(cfg, "model")?)?;
    let (_, test) = load_data::<T>(cfg)?;
    let rows = pgd_steps_study(
        &net,
        &test,
        &cfg.usize_list("k_grid"),
        cfg.f64("gamma"),
        &attack_config(cfg)?,
        cfg.usize("m"),
        StreamKey::new(cfg.u64("seed")),
    )?;
    for r in &rows {
        println!("k {:>4}  gamma {:.4}  accuracy {:.4}", r.param, r.gamma, r.accuracy);
    }
    write_study_csv(create(&out.join("pgd_study.csv"))?, &rows)?;
    std::fs::write(out.join("pgd_study.gp"), study_plot_script("pgd_study.csv", "pgd_study.png", "PGD steps"))?;
    Ok(0)
}

fn cmd_lipschitz<T: Real>(cfg: &RunConfig, out: &Path) -> Result<i32> {
    use std::io::Write;
    let (net, _) = load_model::<T>(required(cfg, "model")?)?;
    let (train, test) = load_data::<T>(cfg)?;
    let mut w = create(&out.join("lipschitz.csv"))?;
    writeln!(w, "split,mean_l2,mean_l1,max_l2,n")?;
    for (split, data) in [("train", &train), ("test", &test)] {
        let s = local_lipschitz_estimate(&net, data)?;
        println!(
            "{split:>5}: mean ‖∇x‖₂ {:.4}  mean ‖∇x‖₁ {:.4}  max ‖∇x‖₂ {:.4}  (n = {})",
            s.mean_l2, s.mean_l1, s.max_l2, s.n
        );
        writeln!(w, "{split},{},{},{},{}", s.mean_l2, s.mean_l1, s.max_l2, s.n)?;
    }
    Ok(0)
}
