//! Command-line front end: experiment drivers, config-driven training, and
//! checkpoint verification.

use clap::{Args, Parser, Subcommand};
use farkasnet::config::{net_spec_from_config, Config};
use farkasnet::net::InitScheme;
use farkasnet::report;
use farkasnet::train::experiments;
use farkasnet::train::{self, data, SgdConfig};
use farkasnet::verify::{self, Status};
use farkasnet::{rng, weights, Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Environment variable consulted for the output root when neither the flag
/// nor the config sets one.
const OUT_DIR_ENV: &str = "FARKASNET_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "farkasnet",
    version,
    about = "Dense layers that provably cannot die, with an LP-backed auditor"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-cluster revival demonstration with an adversarial start
    Toy2d(Toy2dArgs),
    /// Census of layers that are dead at initialization
    BornDead(BornDeadArgs),
    /// Row-norm stability of the tied aggregation row
    NormCheck(NormCheckArgs),
    /// Depth-stress comparison on the two-ring task
    Compare(CompareArgs),
    /// Train a network described by a config file
    Train(TrainArgs),
    /// Audit a saved weights file
    Verify(VerifyArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Config file providing defaults for any flag
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; runs land in a per-command subdirectory
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl CommonArgs {
    fn load(&self) -> Result<Config> {
        match &self.config {
            Some(path) => Config::from_file(path),
            None => Ok(Config::new()),
        }
    }

    /// Flag > config > environment > `runs`.
    fn resolve_out_dir(&self, cfg: &Config, command: &str) -> PathBuf {
        let root = self
            .out_dir
            .clone()
            .or_else(|| cfg.get("out_dir").map(PathBuf::from))
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(command)
    }
}

#[derive(Args)]
struct Toy2dArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of seeds to run
    #[arg(long)]
    num_seeds: Option<usize>,
    /// First seed
    #[arg(long)]
    seed_base: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Run seeds on worker threads
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct BornDeadArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated depths to census
    #[arg(long)]
    depths: Option<String>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    /// Weight standard deviation at initialization
    #[arg(long)]
    sigma: Option<f64>,
    /// Probe inputs per trial
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct NormCheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    num_seeds: Option<usize>,
    #[arg(long)]
    seed_base: Option<u64>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Rows per SGD step; 0 means full batch
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seed for the shared dataset
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Weights file to audit
    weights: PathBuf,
    /// Print the report as JSON instead of text
    #[arg(long)]
    json: bool,
    /// Check stored certificates only; skip the margin programs
    #[arg(long)]
    skip_lp: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Toy2d(args) => cmd_toy2d(args),
        Command::BornDead(args) => cmd_born_dead(args),
        Command::NormCheck(args) => cmd_norm_check(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Train(args) => cmd_train(args),
        Command::Verify(args) => cmd_verify(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn pick_usize(flag: Option<usize>, cfg: &Config, key: &str, default: usize) -> Result<usize> {
    match flag {
        Some(v) => Ok(v),
        None => cfg.get_usize(key, default),
    }
}

fn pick_u64(flag: Option<u64>, cfg: &Config, key: &str, default: u64) -> Result<u64> {
    match flag {
        Some(v) => Ok(v),
        None => cfg.get_u64(key, default),
    }
}

fn pick_f64(flag: Option<f64>, cfg: &Config, key: &str, default: f64) -> Result<f64> {
    match flag {
        Some(v) => Ok(v),
        None => cfg.get_f64(key, default),
    }
}

fn echo_and_store(cfg: &Config, dir: &Path) -> Result<()> {
    print!("{}", cfg.echo());
    report::write_config_echo(&dir.join("config.txt"), &cfg.echo())
}

fn seed_range(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base + i).collect()
}

fn cmd_toy2d(args: Toy2dArgs) -> Result<ExitCode> {
    let mut cfg = args.common.load()?;
    let num_seeds = pick_usize(args.num_seeds, &cfg, "toy2d.num_seeds", 10)?;
    let seed_base = pick_u64(args.seed_base, &cfg, "toy2d.seed_base", 0)?;
    let epochs = pick_usize(args.epochs, &cfg, "toy2d.epochs", 200)?;
    let lr = pick_f64(args.lr, &cfg, "toy2d.lr", 0.01)?;
    let train_per = pick_usize(args.train_per_class, &cfg, "toy2d.train_per_class", 100)?;
    let test_per = pick_usize(args.test_per_class, &cfg, "toy2d.test_per_class", 100)?;
    let parallel = args.parallel || cfg.get_bool("toy2d.parallel", false)?;

    let dir = args.common.resolve_out_dir(&cfg, "toy2d");
    cfg.set("command", "toy2d");
    cfg.set("toy2d.num_seeds", num_seeds);
    cfg.set("toy2d.seed_base", seed_base);
    cfg.set("toy2d.epochs", epochs);
    cfg.set("toy2d.lr", lr);
    cfg.set("toy2d.train_per_class", train_per);
    cfg.set("toy2d.test_per_class", test_per);
    cfg.set("toy2d.parallel", parallel);
    echo_and_store(&cfg, &dir)?;

    let seeds = seed_range(seed_base, num_seeds);
    let summary = experiments::run_toy2d(&seeds, epochs, lr, train_per, test_per, parallel)?;
    for run in &summary.runs {
        println!(
            "seed {}: plain train acc {:.3}, guaranteed train acc {:.3}{}",
            run.seed,
            run.plain_final_acc,
            run.farkas_final_acc,
            match run.farkas_epochs_to_perfect {
                Some(e) => format!(" (perfect at epoch {e})"),
                None => String::new(),
            }
        );
        report::write_epoch_csv(&dir.join(format!("plain_seed{}.csv", run.seed)), &run.plain_curve)?;
        report::write_epoch_csv(
            &dir.join(format!("farkas_seed{}.csv", run.seed)),
            &run.farkas_curve,
        )?;
    }
    println!(
        "plain max train acc {:.3}; guaranteed min train acc {:.3}",
        summary.plain_acc_max, summary.farkas_acc_min
    );
    report::write_json(&dir.join("summary.json"), &summary)?;
    Ok(ExitCode::SUCCESS)
}

fn parse_depths(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse()
                .map_err(|_| Error::input(format!("bad depth {part:?}")))?,
        );
    }
    if out.is_empty() {
        return Err(Error::input("no depths given".to_string()));
    }
    Ok(out)
}

fn cmd_born_dead(args: BornDeadArgs) -> Result<ExitCode> {
    let mut cfg = args.common.load()?;
    let depths_text = args
        .depths
        .clone()
        .unwrap_or_else(|| cfg.get_str("born_dead.depths", "30").to_string());
    let depths = parse_depths(&depths_text)?;
    let width = pick_usize(args.width, &cfg, "born_dead.width", 2)?;
    let trials = pick_usize(args.trials, &cfg, "born_dead.trials", 200)?;
    let sigma = pick_f64(args.sigma, &cfg, "born_dead.sigma", 1.0)?;
    let probes = pick_usize(args.probes, &cfg, "born_dead.probes", 64)?;
    let seed = pick_u64(args.seed, &cfg, "born_dead.seed", 0)?;
    let parallel = args.parallel || cfg.get_bool("born_dead.parallel", false)?;

    let dir = args.common.resolve_out_dir(&cfg, "born-dead");
    cfg.set("command", "born-dead");
    cfg.set("born_dead.depths", &depths_text);
    cfg.set("born_dead.width", width);
    cfg.set("born_dead.trials", trials);
    cfg.set("born_dead.sigma", sigma);
    cfg.set("born_dead.probes", probes);
    cfg.set("born_dead.seed", seed);
    cfg.set("born_dead.parallel", parallel);
    echo_and_store(&cfg, &dir)?;

    let mut outcomes = Vec::new();
    for depth in depths {
        let out = experiments::run_born_dead(depth, width, trials, sigma, probes, seed, parallel)?;
        println!(
            "depth {:>3}: plain dead {:.3}, guaranteed dead {:.3}{}",
            out.depth,
            out.plain_dead_fraction,
            out.farkas_dead_fraction,
            match out.plain_mean_first_dead {
                Some(f) => format!(" (first dead layer avg {f:.1})"),
                None => String::new(),
            }
        );
        outcomes.push(out);
    }
    report::write_json(&dir.join("born_dead.json"), &outcomes)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_norm_check(args: NormCheckArgs) -> Result<ExitCode> {
    let mut cfg = args.common.load()?;
    let trials = pick_usize(args.trials, &cfg, "norm_check.trials", 1000)?;
    let seed = pick_u64(args.seed, &cfg, "norm_check.seed", 0)?;

    let dir = args.common.resolve_out_dir(&cfg, "norm-check");
    cfg.set("command", "norm-check");
    cfg.set("norm_check.trials", trials);
    cfg.set("norm_check.seed", seed);
    echo_and_store(&cfg, &dir)?;

    let out = experiments::run_norm_check(trials, seed)?;
    println!(
        "mean mode: {} weight violations, {} bias violations over {} trials (max ratio {:.12})",
        out.weight_violations, out.bias_violations, out.trials, out.max_weight_ratio
    );
    println!(
        "sum-mode identity counterexample grows the row norm by {:.1}x",
        out.sum_counterexample_ratio
    );
    report::write_json(&dir.join("norm_check.json"), &out)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(args: CompareArgs) -> Result<ExitCode> {
    let mut cfg = args.common.load()?;
    let num_seeds = pick_usize(args.num_seeds, &cfg, "compare.num_seeds", 10)?;
    let seed_base = pick_u64(args.seed_base, &cfg, "compare.seed_base", 0)?;
    let depth = pick_usize(args.depth, &cfg, "compare.depth", 8)?;
    let width = pick_usize(args.width, &cfg, "compare.width", 3)?;
    let epochs = pick_usize(args.epochs, &cfg, "compare.epochs", 120)?;
    let lr = pick_f64(args.lr, &cfg, "compare.lr", 0.02)?;
    let batch_size = pick_usize(args.batch_size, &cfg, "compare.batch_size", 16)?;
    let data_seed = pick_u64(args.data_seed, &cfg, "compare.data_seed", 1234)?;
    let parallel = args.parallel || cfg.get_bool("compare.parallel", false)?;

    let dir = args.common.resolve_out_dir(&cfg, "compare");
    cfg.set("command", "compare");
    cfg.set("compare.num_seeds", num_seeds);
    cfg.set("compare.seed_base", seed_base);
    cfg.set("compare.depth", depth);
    cfg.set("compare.width", width);
    cfg.set("compare.epochs", epochs);
    cfg.set("compare.lr", lr);
    cfg.set("compare.batch_size", batch_size);
    cfg.set("compare.data_seed", data_seed);
    cfg.set("compare.parallel", parallel);
    echo_and_store(&cfg, &dir)?;

    let seeds = seed_range(seed_base, num_seeds);
    let out = experiments::run_compare(
        &seeds, depth, width, epochs, lr, batch_size, data_seed, parallel,
    )?;
    for arm in &out.arms {
        println!(
            "{:<10} mean test err {:.4} ({})",
            arm.name,
            arm.mean_test_err,
            arm.final_test_errs
                .iter()
                .map(|e| format!("{e:.3}"))
                .collect::<Vec<_>>()
                .join(", ")
        );
    }
    println!(
        "guaranteed beats plain (no batchnorm) on {}/{} seeds",
        out.farkas_wins,
        seeds.len()
    );
    report::write_json(&dir.join("compare.json"), &out)?;
    Ok(ExitCode::SUCCESS)
}

fn load_train_data(cfg: &Config, seed: u64) -> Result<(data::Dataset, data::Dataset)> {
    let kind = cfg.get_str("data.kind", "rings");
    match kind {
        "rings" => {
            let train_per = cfg.get_usize("data.train_per_class", 150)?;
            let test_per = cfg.get_usize("data.test_per_class", 100)?;
            let r_inner = cfg.get_f64("data.r_inner", 1.0)?;
            let r_outer = cfg.get_f64("data.r_outer", 2.0)?;
            let noise = cfg.get_f64("data.noise", 0.1)?;
            let mut r = rng::stream_rng(seed, rng::streams::DATA_TRAIN);
            let train = data::two_rings(train_per, r_inner, r_outer, noise, &mut r);
            let mut r = rng::stream_rng(seed, rng::streams::DATA_TEST);
            let test = data::two_rings(test_per, r_inner, r_outer, noise, &mut r);
            Ok((train, test))
        }
        "clusters" => {
            let train_per = cfg.get_usize("data.train_per_class", 150)?;
            let test_per = cfg.get_usize("data.test_per_class", 100)?;
            let std = cfg.get_f64("data.std", 0.5)?;
            let centers = ([2.0, 2.0], [-2.0, -2.0]);
            let mut r = rng::stream_rng(seed, rng::streams::DATA_TRAIN);
            let train = data::two_clusters(train_per, centers, std, &mut r);
            let mut r = rng::stream_rng(seed, rng::streams::DATA_TEST);
            let test = data::two_clusters(test_per, centers, std, &mut r);
            Ok((train, test))
        }
        "csv" => {
            let train_path = cfg
                .get("data.train")
                .ok_or_else(|| Error::input("data.train must point at a csv file".to_string()))?;
            let test_path = cfg
                .get("data.test")
                .ok_or_else(|| Error::input("data.test must point at a csv file".to_string()))?;
            let mut train = data::load_csv(Path::new(train_path))?;
            let mut test = data::load_csv(Path::new(test_path))?;
            if cfg.get_bool("data.standardize", false)? {
                let (mean, std) = train.feature_stats();
                train.standardize(&mean, &std)?;
                test.standardize(&mean, &std)?;
            }
            Ok((train, test))
        }
        "idx" => {
            let get = |key: &str| -> Result<&str> {
                cfg.get(key)
                    .ok_or_else(|| Error::input(format!("{key} must be set for idx data")))
            };
            let limit = cfg.get_usize("data.limit", 0)?;
            let load = |imgs: &str, lbls: &str| -> Result<data::Dataset> {
                let inputs = data::load_idx_images(Path::new(imgs))?;
                let labels = data::load_idx_labels(Path::new(lbls))?;
                let classes = labels.iter().copied().max().unwrap_or(1) + 1;
                let mut ds = data::Dataset::new(inputs, labels, classes.max(2))?;
                if limit > 0 && limit < ds.len() {
                    let idxs: Vec<usize> = (0..limit).collect();
                    let (inputs, labels) = ds.batch(&idxs);
                    ds = data::Dataset::new(inputs, labels, ds.classes)?;
                }
                Ok(ds)
            };
            let train = load(get("data.train_images")?, get("data.train_labels")?)?;
            let test = load(get("data.test_images")?, get("data.test_labels")?)?;
            Ok((train, test))
        }
        other => Err(Error::input(format!("unknown data.kind {other:?}"))),
    }
}

fn parse_schedule(text: &str) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (epoch, factor) = part
            .split_once(':')
            .ok_or_else(|| Error::input(format!("schedule entry {part:?} wants EPOCH:FACTOR")))?;
        let epoch = epoch
            .trim()
            .parse()
            .map_err(|_| Error::input(format!("bad schedule epoch {epoch:?}")))?;
        let factor = factor
            .trim()
            .parse()
            .map_err(|_| Error::input(format!("bad schedule factor {factor:?}")))?;
        out.push((epoch, factor));
    }
    Ok(out)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = args.common.load()?;
    if args.common.config.is_none() {
        return Err(Error::usage("train needs --config".to_string()));
    }
    let seed = pick_u64(args.seed, &cfg, "seed", 0)?;
    let epochs = cfg.get_usize("train.epochs", 100)?;
    let lr = cfg.get_f64("train.lr", 0.05)?;
    let momentum = cfg.get_f64("train.momentum", 0.9)?;
    let weight_decay = cfg.get_f64("train.weight_decay", 5e-4)?;
    let batch_size = cfg.get_usize("train.batch_size", 0)?;
    let schedule = parse_schedule(cfg.get_str("train.schedule", ""))?;

    let dir = args.common.resolve_out_dir(&cfg, "train");
    cfg.set("command", "train");
    cfg.set("seed", seed);
    cfg.set("train.epochs", epochs);
    cfg.set("train.lr", lr);
    cfg.set("train.momentum", momentum);
    cfg.set("train.weight_decay", weight_decay);
    cfg.set("train.batch_size", batch_size);
    echo_and_store(&cfg, &dir)?;

    let (train_set, test_set) = load_train_data(&cfg, seed)?;
    let (input_dim, spec) = net_spec_from_config(&cfg)?;
    if input_dim != train_set.features() {
        return Err(Error::input(format!(
            "net.input_dim is {input_dim} but the data has {} features",
            train_set.features()
        )));
    }
    let mut net = spec.build()?;
    net.init(InitScheme::FanInUniform, seed);
    println!(
        "training {} parameters on {} rows ({} classes)",
        net.param_count(),
        train_set.len(),
        train_set.classes
    );

    let sgd = SgdConfig {
        learning_rate: lr,
        momentum,
        weight_decay,
        epochs,
        batch_size,
        schedule,
    };
    let log = train::train_classifier(&mut net, &train_set, &test_set, &sgd, seed)?;
    report::write_epoch_csv(&dir.join("curve.csv"), &log.rows)?;
    let weights_path = dir.join("weights.fnw");
    weights::save_network(&net, &weights_path)?;

    #[derive(serde::Serialize)]
    struct TrainSummary {
        seed: u64,
        params: usize,
        final_train_err: f64,
        final_test_err: f64,
        guaranteed_margins: Vec<f64>,
    }
    let summary = TrainSummary {
        seed,
        params: net.param_count(),
        final_train_err: log.final_train_err(),
        final_test_err: log.final_test_err(),
        guaranteed_margins: experiments::guaranteed_margins(&net),
    };
    report::write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "final train err {:.4}, test err {:.4}; weights at {}",
        summary.final_train_err,
        summary.final_test_err,
        weights_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode> {
    let net = weights::load_network(&args.weights)?;
    let audit = verify::verify_network(&net, !args.skip_lp)?;
    if args.json {
        print!("{}", report::to_json_string(&audit)?);
    } else {
        for layer in &audit.layers {
            let status = match layer.status {
                Status::Certified => "certified",
                Status::Flagged => "FLAGGED",
                Status::Conditional => "conditional",
                Status::Skipped => "skipped",
            };
            let mut extras = Vec::new();
            if let Some(p) = layer.p_star {
                extras.push(format!("p* {p:.6}"));
            }
            if let Some(m) = layer.margin {
                extras.push(format!("margin {m:.3e}"));
            }
            if let Some(r) = layer.lambda_residual {
                extras.push(format!("residual {r:.3e}"));
            }
            let extras = if extras.is_empty() {
                String::new()
            } else {
                format!(" [{}]", extras.join(", "))
            };
            println!(
                "layer {:>2} {:<14} {:<11}{} {}",
                layer.index, layer.kind, status, extras, layer.detail
            );
        }
        if audit.ok {
            println!("ok: no layer can silently die");
        } else {
            println!("FAILED: at least one layer can die");
        }
    }
    if audit.ok {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}
