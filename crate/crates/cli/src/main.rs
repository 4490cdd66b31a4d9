use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fpta::adapter::{adapt_step, AdapterConfig};
use fpta::align::LossScope;
use fpta::bank::MemoryBank;
use fpta::harness::{
    pretrain_for_seed, run_ablation, run_benchmark, run_sweep, write_ablation_csv, write_benchmark,
    write_sweep_csv, BenchmarkConfig, ModelSource, SweepParam,
};
use fpta::nn::{Model, NormStats};
use fpta::png::{load_png, save_png, save_png_normalized};
use fpta::prompt::PromptKind;
use fpta::train::TrainConfig;
use fpta::Tensor;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Frequency-prompt test-time adaptation on a synthetic segmentation benchmark.
#[derive(Parser)]
#[command(name = "fpta", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy network on synthetic source data.
    Pretrain(PretrainArgs),
    /// Source-only and adapted Dice over the four target domains.
    Benchmark(BenchArgs),
    /// The five component-ablation rows.
    Ablate(BenchArgs),
    /// One benchmark run per grid value of a hyperparameter.
    Sweep(SweepArgs),
    /// Adapt a single image with a fresh bank and write its mask.
    AdaptOne(AdaptOneArgs),
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    samples: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum StatsArg {
    Warmup,
    Source,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Lowfreq,
    Lowrank,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    All,
    EncoderOnly,
}

#[derive(Args)]
struct Common {
    /// JSON with adapter keys and an optional "benchmark" object.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long, value_enum)]
    inference_stats: Option<StatsArg>,
    #[arg(long, value_enum)]
    prompt_kind: Option<KindArg>,
    #[arg(long, value_enum)]
    loss_scope: Option<ScopeArg>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Use this pretrained model for every seed instead of pretraining.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "fpta-out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Write per-step adapted-image and prompt PNGs here.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// alpha, S, K, tau or iterations.
    #[arg(long)]
    param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<f64>,
}

#[derive(Args)]
struct AdaptOneArgs {
    #[arg(long)]
    model: PathBuf,
    /// PNG or `.vpt` image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value = "mask.png")]
    out: PathBuf,
    /// Also write the adapted prompt to `<stem>.vpt` and `<stem>.json`.
    #[arg(long)]
    prompt_out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    prompt_kind: Option<KindArg>,
    #[arg(long)]
    iterations: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<(BenchmarkConfig, ModelSource)> {
        let mut cfg = match &self.config {
            Some(p) => BenchmarkConfig::load(p)?,
            None => BenchmarkConfig::default(),
        };
        apply_overrides(&mut cfg.adapter, self.prompt_kind, self.iterations);
        if let Some(s) = self.seed {
            cfg.benchmark.seeds = vec![s];
        }
        if let Some(r) = self.rounds {
            cfg.benchmark.rounds = r;
        }
        if let Some(s) = self.inference_stats {
            cfg.adapter.inference_stats = match s {
                StatsArg::Warmup => NormStats::Warmup,
                StatsArg::Source => NormStats::Source,
            };
        }
        if let Some(s) = self.loss_scope {
            cfg.adapter.loss_scope = match s {
                ScopeArg::All => LossScope::All,
                ScopeArg::EncoderOnly => LossScope::EncoderOnly,
            };
        }
        if let Some(lr) = self.learning_rate {
            cfg.adapter.learning_rate = lr;
        }
        cfg.validate()?;
        let models = ModelSource::from_path(self.model.as_deref())?;
        Ok((cfg, models))
    }
}

fn apply_overrides(cfg: &mut AdapterConfig, kind: Option<KindArg>, iterations: Option<usize>) {
    if let Some(k) = kind {
        cfg.prompt_kind = match k {
            KindArg::Lowfreq => PromptKind::Lowfreq,
            KindArg::Lowrank => PromptKind::Lowrank,
        };
    }
    if let Some(i) = iterations {
        cfg.iterations = i;
    }
}

fn create_file(path: &Path) -> Result<std::fs::File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn pretrain(args: PretrainArgs) -> Result<()> {
    let settings = fpta::harness::HarnessSettings {
        source_samples: args.samples,
        pretrain: TrainConfig {
            epochs: args.epochs,
            learning_rate: args.lr,
            ..TrainConfig::default()
        },
        ..Default::default()
    };
    let sm = pretrain_for_seed(args.seed, &settings)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    sm.model.save(&args.out)?;
    println!(
        "{}",
        serde_json::json!({
            "model": args.out,
            "seed": args.seed,
            "train_dice": sm.train_dice,
            "heldout_dice": sm.heldout_dice,
            "checksum": sm.model.checksum(),
        })
    );
    Ok(())
}

fn benchmark(args: BenchArgs) -> Result<()> {
    let (cfg, models) = args.common.resolve()?;
    let run = run_benchmark(&cfg, &models, args.dump_dir.as_deref())?;
    let files = write_benchmark(&run, &args.common.out_dir)?;
    let s = &run.summary;
    for seed in &s.seeds {
        println!(
            "seed {}: source-only {:.4}  adapted {}  degradation {}  aborted {}",
            seed.seed,
            seed.source_only,
            fmt_opt(seed.vptta.dice_post),
            fmt_opt(seed.vptta.degradation),
            seed.vptta.aborted_steps
        );
        if seed.vptta.aborted_steps > 0 {
            eprintln!("warning: {} steps hit a non-finite loss and kept their initial prompt", seed.vptta.aborted_steps);
        }
        if s.config.benchmark.rounds > 1 {
            for r in &seed.vptta.per_round {
                let cells: Vec<String> = r
                    .domains
                    .iter()
                    .map(|d| format!("{} {}", d.domain, fmt_opt(d.dice_post)))
                    .collect();
                println!("  round {}: {}  mean {}", r.round, cells.join("  "), fmt_opt(r.dice_post));
            }
        }
    }
    println!(
        "mean over seeds: source-only {:.4}  adapted {:.4}  gap {:+.4}",
        s.source_only_mean, s.vptta_mean, s.gap
    );
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn ablate(args: BenchArgs) -> Result<()> {
    let (cfg, models) = args.common.resolve()?;
    let rows = run_ablation(&cfg, &models)?;
    let path = args.common.out_dir.join("ablation.csv");
    write_ablation_csv(&rows, create_file(&path)?)?;
    println!("{:<22} {:>6} {:>7} {:>10}", "configuration", "bank", "warmup", "mean_dice");
    for r in &rows {
        let (b, w) = r.row.switches().unwrap_or((false, false));
        println!("{:<22} {:>6} {:>7} {:>10.4}", r.label, b, w, r.mean_dice);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let (cfg, models) = args.common.resolve()?;
    let param = SweepParam::parse(&args.param)?;
    let rows = run_sweep(&cfg, &models, param, &args.grid)?;
    let path = args.common.out_dir.join(format!("sweep_{}.csv", param.name()));
    write_sweep_csv(&rows, create_file(&path)?)?;
    for r in &rows {
        println!("{}={}: {:.4} (source-only {:.4})", r.param, r.value, r.mean_dice, r.source_only);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn adapt_one(args: AdaptOneArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let image = match args.image.extension().and_then(|e| e.to_str()) {
        Some("vpt") => Tensor::load(&args.image)?,
        Some("png") => load_png(&args.image, model.in_channels)?,
        _ => bail!("--image must be a .png or .vpt file"),
    };
    let image = if image.dims().len() == 3 {
        let d = image.dims().to_vec();
        image.reshape(&[1, d[0], d[1], d[2]])?
    } else {
        image
    };
    let mut cfg = match &args.config {
        Some(p) => BenchmarkConfig::load(p)?.adapter,
        None => BenchmarkConfig::default().adapter,
    };
    apply_overrides(&mut cfg, args.prompt_kind, args.iterations);
    let mut bank = MemoryBank::new(cfg.bank_capacity);
    let out = adapt_step(&image, None, &model, &mut bank, &cfg, 1, "input")?;
    let mask = out.prediction.map(|p| if p > 0.5 { 1.0 } else { 0.0 });
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    save_png(&mask, &args.out, 1)?;
    if let Some(stem) = &args.prompt_out {
        out.prompt.save(stem, cfg.alpha)?;
        let mut adapted = stem.clone().into_os_string();
        adapted.push("_adapted.png");
        save_png_normalized(&out.adapted_image, PathBuf::from(adapted))?;
    }
    println!("{}", serde_json::to_string(&out.record)?);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Pretrain(a) => pretrain(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Ablate(a) => ablate(a),
        Command::Sweep(a) => sweep(a),
        Command::AdaptOne(a) => adapt_one(a),
    }
}
