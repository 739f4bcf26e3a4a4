mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pnnh_core::checkpoint::{save_coder, save_network, CheckpointMeta};
use pnnh_core::coder::{heldout_loss, prepare_coder, CoderKind, CoderSpec, CoderTraining, PretextTask};
use pnnh_core::config::{config_hash, RunConfig};
use pnnh_core::net::{train_pnnh, BnPolicy};
use pnnh_core::probe::{build_random_stack, probe_forward, probe_input, Activation, StackKind, StackSpec};
use pnnh_core::stats::{evaluate as evaluate_bound, BoundQuery, InputStats, LayerKind};
use pnnh_core::{Error, Result, Rng};

use report::{num, CsvReport};

/// Environment variable naming the dataset directory.
const DATA_ENV: &str = "PNNH_DATA";

#[derive(Parser)]
#[command(name = "pnnh", version, about = "Information-dissipation experiments for plain CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Survival bounds and collapse depths over a parameter grid.
    Bounds(BoundsArgs),
    /// Layer-wise statistics of random plain, residual and PNNH stacks.
    Probe(ProbeArgs),
    /// Train one coder on a pretext task.
    TrainCoder(TrainCoderArgs),
    /// Two-phase training of a network described by a config file.
    Train(TrainArgs),
    /// Held-out reconstruction loss of coders prepared with each pretext task.
    AblatePretext(AblatePretextArgs),
    /// Compare batch-norm placements in PNNH blocks over several seeds.
    AblateBn(AblateBnArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck,
    /// Configuration utilities.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print the default run configuration with every field spelled out.
    Dump,
}

#[derive(Args)]
struct OutArgs {
    /// Directory for reports; created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl OutArgs {
    fn file(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out)?;
        Ok(self.out.join(name))
    }
}

#[derive(Args)]
struct BoundsArgs {
    /// plain, residual or both.
    #[arg(long, default_value = "both")]
    kind: String,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    mu: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    sigma: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    delta: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.01")]
    eps: Vec<f64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct ProbeArgs {
    /// Comma-separated stack kinds.
    #[arg(long, value_delimiter = ',', default_value = "plain,residual,pnnh")]
    kind: Vec<StackKind>,
    #[arg(long, default_value_t = 20)]
    depth: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 16)]
    spatial: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    /// Negative slope; 0 is the plain rectifier.
    #[arg(long, default_value_t = 0.0)]
    slope: f64,
    #[arg(long, default_value_t = 16)]
    noise_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct CoderArgs {
    #[arg(long, default_value = "vanilla")]
    coder: CoderKind,
    #[arg(long, default_value_t = 16)]
    c_in: usize,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    /// Held-out rectified-normal patches used for the final loss.
    #[arg(long, default_value_t = 10_000)]
    heldout: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl CoderArgs {
    fn training(&self) -> CoderTraining {
        CoderTraining { lr: self.lr, steps: self.steps, batch_size: self.batch, patch: self.patch }
    }

    fn spec(&self) -> CoderSpec {
        CoderSpec::for_block(self.coder, self.c_in)
    }

    fn hash(&self, extra: &str) -> String {
        config_hash(&format!(
            "{}|{}|{}|{}|{}|{}|{}|{}|{extra}",
            self.coder.name(),
            self.c_in,
            self.steps,
            self.lr,
            self.batch,
            self.patch,
            self.heldout,
            self.seed
        ))
    }
}

#[derive(Args)]
struct TrainCoderArgs {
    #[arg(long, default_value = "rectified_normal")]
    task: PretextTask,
    #[command(flatten)]
    coder: CoderArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the data root.
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct AblatePretextArgs {
    #[arg(long, value_delimiter = ',', default_value = "rectified_normal,identity,uniform,normal,untrained")]
    tasks: Vec<PretextTask>,
    #[command(flatten)]
    coder: CoderArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct AblateBnArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

fn bounds(args: &BoundsArgs) -> Result<()> {
    let kinds = match args.kind.as_str() {
        "both" => vec![LayerKind::Plain, LayerKind::Residual],
        other => vec![other.parse()?],
    };
    let hash = config_hash(&format!("{}|{:?}|{:?}|{:?}|{:?}", args.kind, args.mu, args.sigma, args.delta, args.eps));
    let path = args.out.file("bounds.csv")?;
    let mut csv = CsvReport::create(
        &path,
        &hash,
        &["kind", "mu", "sigma", "delta", "epsilon", "survival_lower_bound", "collapse_depth"],
    )?;
    for &kind in &kinds {
        for &mu in &args.mu {
            for &sigma in &args.sigma {
                for &delta in &args.delta {
                    for &eps in &args.eps {
                        let q = BoundQuery::new(kind, InputStats::new(mu, sigma)?, delta, eps)?;
                        let r = evaluate_bound(&q)?;
                        let row = [
                            kind.name().to_string(),
                            num(mu),
                            num(sigma),
                            num(delta),
                            num(eps),
                            num(r.survival_lower_bound),
                            r.collapse_depth.to_string(),
                        ];
                        println!("{}", row.join(","));
                        csv.row(row)?;
                    }
                }
            }
        }
    }
    eprintln!("wrote {}", csv.finish()?.display());
    Ok(())
}

fn probe(args: &ProbeArgs) -> Result<()> {
    let activation = if args.slope == 0.0 { Activation::Relu } else { Activation::Leaky(args.slope) };
    let hash = config_hash(&format!(
        "{:?}|{}|{}|{}|{}|{}|{}|{}",
        args.kind, args.depth, args.channels, args.spatial, args.batch, args.slope, args.noise_samples, args.seed
    ));
    let path = args.out.file("probe.csv")?;
    let mut csv = CsvReport::create(
        &path,
        &hash,
        &[
            "kind",
            "activation",
            "layer",
            "surviving_fraction",
            "r2",
            "r2_retained",
            "mean",
            "var",
            "input_mean",
            "input_std",
            "noise_floor",
        ],
    )?;
    let mut reports = Vec::new();
    for &kind in &args.kind {
        let spec = StackSpec {
            kind,
            depth: args.depth,
            channels: args.channels,
            spatial: args.spatial,
            k: 3,
            activation,
            seed: args.seed,
        };
        let stack = build_random_stack::<f32>(spec)?;
        let root = Rng::new(args.seed);
        let input = probe_input(&spec, args.batch, &mut root.fork(1))?;
        let report = probe_forward(&stack, &input, args.noise_samples, &mut root.fork(2))?;
        for r in &report.records {
            csv.row([
                kind.name().to_string(),
                activation.name(),
                r.layer.to_string(),
                num(r.surviving_fraction),
                num(r.r2),
                num(r.r2_retained),
                num(r.mean),
                num(r.variance),
                num(r.input_mean),
                num(r.input_std),
                num(report.noise_floor),
            ])?;
        }
        let last = report.final_record();
        println!(
            "{:<9} depth {:>3}  r2 {:.4}  kept-channel r2 {:.4}  noise floor {:.4}  surviving {:.3}",
            kind.name(),
            last.layer,
            last.r2,
            last.r2_retained,
            report.noise_floor,
            last.surviving_fraction
        );
        reports.push(report);
    }
    let json = serde_json::json!({ "config_hash": hash, "reports": reports });
    std::fs::write(args.out.file("probe.json")?, serde_json::to_string_pretty(&json).expect("serializable"))?;
    eprintln!("wrote {}", csv.finish()?.display());
    Ok(())
}

fn train_coder(args: &TrainCoderArgs) -> Result<()> {
    let c = &args.coder;
    let hash = c.hash(args.task.name());
    let root = Rng::new(c.seed);
    let (coder, curve) = prepare_coder::<f32>(c.spec(), args.task, &c.training(), &mut root.fork(1))?;
    let heldout = heldout_loss(&coder, c.heldout, c.patch, &mut root.fork(2))?;
    let mut csv = CsvReport::create(&args.out.file("coder_loss.csv")?, &hash, &["step", "loss"])?;
    for (i, l) in curve.iter().enumerate() {
        csv.row([(i + 1).to_string(), num(*l)])?;
    }
    csv.finish()?;
    let meta = CheckpointMeta {
        config_hash: hash,
        seed: c.seed,
        epoch: c.steps,
        metrics: [("heldout_loss".to_string(), heldout)].into(),
    };
    let ckpt = args.out.file("coder.ckpt")?;
    save_coder(&ckpt, &coder, &meta)?;
    println!("{} coder, task {}: held-out loss {heldout:.4}", c.coder.name(), args.task.name());
    eprintln!("wrote {}", ckpt.display());
    Ok(())
}

fn data_root(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.data.root.clone())
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
        .ok_or_else(|| Error::Config(format!("no data root: pass --data-root, set data.root or {DATA_ENV}")))
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Trains one run and writes `metrics.csv`, `config.toml` and `network.ckpt`
/// under `out`. Returns the final validation accuracy, or `None` when
/// training diverged.
fn run_training(cfg: &RunConfig, root: &Path, out: &Path) -> Result<Option<f64>> {
    std::fs::create_dir_all(out)?;
    let hash = cfg.hash();
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    let (train, val) = cfg.data.load(root, cfg.train.seed)?;
    let mut csv = CsvReport::create(
        &out.join("metrics.csv"),
        &hash,
        &["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc"],
    )?;
    let mut rows = Vec::new();
    let result = train_pnnh(&cfg.network, &train, &val, &cfg.train, |m| {
        eprintln!(
            "epoch {:>3}  lr {:.4}  train {:.4}/{:.4}  val {:.4}/{:.4}",
            m.epoch, m.lr, m.train_loss, m.train_acc, m.val_loss, m.val_acc
        );
        rows.push(*m);
    });
    for m in &rows {
        csv.row([
            m.epoch.to_string(),
            num(m.lr),
            num(m.train_loss),
            num(m.train_acc),
            num(m.val_loss),
            num(m.val_acc),
        ])?;
    }
    csv.finish()?;
    match result {
        Ok((net, report)) => {
            let last = report.epochs.last().expect("at least one epoch");
            let meta = CheckpointMeta {
                config_hash: hash,
                seed: cfg.train.seed,
                epoch: last.epoch,
                metrics: [("val_acc".to_string(), last.val_acc), ("val_loss".to_string(), last.val_loss)].into(),
            };
            save_network(&out.join("network.ckpt"), &net, &meta)?;
            Ok(Some(last.val_acc))
        }
        Err(Error::Diverged { stage, index, detail }) => {
            eprintln!("diverged at {stage} {index}: {detail}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    let root = data_root(&args.data_root, &cfg)?;
    match run_training(&cfg, &root, &args.out.out)? {
        Some(acc) => println!("final val accuracy {acc:.4}"),
        None => println!("training diverged"),
    }
    Ok(())
}

fn ablate_pretext(args: &AblatePretextArgs) -> Result<()> {
    let c = &args.coder;
    let names: Vec<&str> = args.tasks.iter().map(|t| t.name()).collect();
    let hash = c.hash(&names.join(","));
    let mut csv = CsvReport::create(&args.out.file("pretext.csv")?, &hash, &["task", "heldout_loss"])?;
    for &task in &args.tasks {
        let root = Rng::new(c.seed);
        let (coder, _) = prepare_coder::<f32>(c.spec(), task, &c.training(), &mut root.fork(1))?;
        // Every task is scored on the same held-out draw.
        let loss = heldout_loss(&coder, c.heldout, c.patch, &mut root.fork(2))?;
        println!("{:<17} {loss:.4}", task.name());
        csv.row([task.name().to_string(), num(loss)])?;
    }
    eprintln!("wrote {}", csv.finish()?.display());
    Ok(())
}

fn ablate_bn(args: &AblateBnArgs) -> Result<()> {
    let base = load_config(&args.config)?;
    let root = data_root(&args.data_root, &base)?;
    let hash = config_hash(&format!("{}|{:?}", base.to_toml(), args.seeds));
    let mut csv = CsvReport::create(&args.out.file("bn_ablation.csv")?, &hash, &["bn_policy", "seed", "val_acc"])?;
    for (policy, name) in [(BnPolicy::FirstOnly, "first_only"), (BnPolicy::Both, "both")] {
        let mut accs = Vec::new();
        for &seed in &args.seeds {
            let mut cfg = base.clone();
            cfg.network.bn_policy = policy;
            cfg.train.seed = seed;
            let dir = args.out.out.join(format!("{name}_seed{seed}"));
            let acc = run_training(&cfg, &root, &dir)?;
            let acc_text = acc.map_or("diverged".to_string(), num);
            csv.row([name.to_string(), seed.to_string(), acc_text])?;
            accs.push(acc.unwrap_or(0.0));
        }
        println!("{name:<10} mean val accuracy {:.4}", accs.iter().sum::<f64>() / accs.len() as f64);
    }
    eprintln!("wrote {}", csv.finish()?.display());
    Ok(())
}

fn gradcheck() -> Result<bool> {
    let checks = pnnh_core::gradsuite::run_gradient_suite()?;
    for c in &checks {
        println!(
            "{:<4} {:<36} {:>6} entries  max rel err {:.3e}",
            if c.passed() { "ok" } else { "FAIL" },
            c.name,
            c.entries,
            c.max_rel_error
        );
    }
    Ok(checks.iter().all(|c| c.passed()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Bounds(a) => bounds(&a)?,
        Command::Probe(a) => probe(&a)?,
        Command::TrainCoder(a) => train_coder(&a)?,
        Command::Train(a) => train(&a)?,
        Command::AblatePretext(a) => ablate_pretext(&a)?,
        Command::AblateBn(a) => ablate_bn(&a)?,
        Command::Gradcheck => return gradcheck(),
        Command::Config { action: ConfigAction::Dump } => print!("{}", RunConfig::default().to_toml()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
