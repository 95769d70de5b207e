//! `attrseg` command-line tool.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

mod plot;

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attrseg::ablation::{run_ablation, AblationKind, AblationSetup, ModelCache};
use attrseg::aggregator::{Aggregator, Strategy};
use attrseg::catalog::parse_llm_answer;
use attrseg::config::RunConfig;
use attrseg::encoders::ToyEncoder;
use attrseg::eval::{
    evaluate_fold, AlignmentProbe, AttributeFilter, FoldSplit, MaskPredictor, ModelPredictor, OraclePredictor,
};
use attrseg::mask::{mask_to_image, write_prob_map};
use attrseg::pipeline::Segmenter;
use attrseg::synth::{generate_dataset, SyntheticDataset};
use attrseg::train::{train, TrainSetup};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "attrseg", version, about = "Open-vocabulary segmentation from attribute descriptions")]
struct Cli {
    /// JSON run configuration (flat keys, or a run.json from an earlier
    /// command). Flags override values from the file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, training and attribute sampling.
    #[arg(long, global = true, env = "ATTRSEG_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset.
    GenData(GenDataArgs),
    /// Train an aggregator on the base classes of one fold.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the novel classes of one fold.
    Eval(EvalArgs),
    /// Segment one image from a list of attribute descriptions.
    Segment(SegmentArgs),
    /// Run an ablation sweep and write CSV, JSON and a plot.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long)]
    per_category: Option<usize>,
    /// Canvas as WIDTHxHEIGHT, e.g. 64x64.
    #[arg(long)]
    canvas: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Randomly flip training images horizontally.
    #[arg(long)]
    hflip: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory, or `oracle` for the ground-truth predictor.
    #[arg(long)]
    ckpt: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Attributes sampled per class and image.
    #[arg(long)]
    attrs_per_class: Option<usize>,
    /// Fraction of attributes replaced by ones from other categories.
    #[arg(long)]
    noise_rate: Option<f64>,
    /// Filter attributes by image similarity before aggregation.
    #[arg(long)]
    filter: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Semicolon-separated attribute descriptions.
    #[arg(long)]
    attributes: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    kind: AblationKind,
    /// Comma-separated sweep values (defaults depend on the kind).
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated fold ids.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    folds: Vec<usize>,
    /// Comma-separated training seeds (defaults to the run seed).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<attrseg::Error> for Failure {
    fn from(e: attrseg::Error) -> Self {
        use attrseg::Error as E;
        match &e {
            E::Config(_) | E::Template { .. } | E::Catalog { .. } | E::UnknownCategory(_) | E::EmptyPool(_) => {
                Failure::Usage(e.to_string())
            }
            E::Io(io) if io.kind() == ErrorKind::NotFound => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        attrseg::Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_run_json(dir: &Path, command: &str, cfg: &RunConfig, args: serde_json::Value) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let run = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "args": args,
    });
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&run).expect("serializable"))?;
    Ok(())
}

fn parse_canvas(s: &str) -> CliResult<(u32, u32)> {
    let bad = || Failure::Usage(format!("invalid canvas `{s}` (expected WIDTHxHEIGHT)"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((w.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?))
}

fn fold_of(ds: &SyntheticDataset, id: usize) -> CliResult<&FoldSplit> {
    ds.folds
        .iter()
        .find(|f| f.fold_id == id)
        .ok_or_else(|| Failure::Usage(format!("fold {id} not found (dataset has {} folds)", ds.folds.len())))
}

fn load_dataset(dir: &Path) -> CliResult<SyntheticDataset> {
    if !dir.join("catalog.json").exists() {
        return Err(Failure::Usage(format!("no catalog.json in {}", dir.display())));
    }
    Ok(SyntheticDataset::load(dir)?)
}

/// Loads a checkpoint written by `train`, taking the run configuration
/// stored alongside it unless `--config` was given.
fn load_checkpoint(dir: &Path, cli: &Cli) -> CliResult<(Aggregator, RunConfig)> {
    if !dir.join("manifest.json").exists() {
        return Err(Failure::Usage(format!("no checkpoint manifest in {}", dir.display())));
    }
    let (model, extra) = Aggregator::load(dir)?;
    let mut cfg = match (&cli.config, extra.get("config")) {
        (None, Some(run)) => serde_json::from_value(run.clone())
            .map_err(|e| Failure::Runtime(format!("checkpoint run config: {e}")))?,
        _ => resolve_config(cli)?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok((model, cfg))
}

fn gen_data(cli: &Cli, args: &GenDataArgs) -> CliResult<()> {
    let mut cfg = resolve_config(cli)?;
    if let Some(c) = args.categories {
        cfg.categories = c;
    }
    if let Some(n) = args.per_category {
        cfg.per_category = n;
    }
    if let Some(c) = &args.canvas {
        cfg.canvas = parse_canvas(c)?;
    }
    cfg.validate()?;
    let encoder = ToyEncoder::new(cfg.encoder())?;
    let ds = generate_dataset(&cfg.generation(), &encoder)?;
    ds.write(&args.out)?;
    write_run_json(&args.out, "gen-data", &cfg, json!({ "out": args.out }))?;
    println!(
        "wrote {} samples of {} categories to {}",
        ds.samples.len(),
        ds.catalog.categories.len(),
        args.out.display()
    );
    Ok(())
}

fn train_cmd(cli: &Cli, args: &TrainArgs) -> CliResult<()> {
    let mut cfg = resolve_config(cli)?;
    if let Some(s) = args.strategy {
        cfg.strategy = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
        cfg.warmup_epochs = cfg.warmup_epochs.min(e);
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    cfg.hflip |= args.hflip;
    cfg.validate()?;
    let ds = load_dataset(&args.data)?;
    let fold = fold_of(&ds, args.fold)?;
    let encoder = ToyEncoder::new(cfg.encoder())?;
    let run_args = json!({ "data": args.data, "fold": args.fold, "out": args.out });
    let echo = json!({
        "command": "train",
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "args": run_args,
    });
    let setup = TrainSetup {
        samples: &ds.samples,
        catalog: &ds.catalog,
        fold,
        encoder: &encoder,
        strategy: cfg.strategy,
        aggregator: cfg.aggregator(),
        head: cfg.head(),
        out_dir: Some(&args.out),
        extra_echo: Some(echo),
    };
    let outcome = train(&setup, &cfg.train())?;
    let model_dir = args.out.join("model");
    outcome.model.save(
        &model_dir,
        json!({ "command": "train", "config": cfg, "args": run_args }),
    )?;
    for r in &outcome.log {
        println!("epoch {:>3}  lr {:.3e}  loss {:.5}", r.epoch + 1, r.lr, r.loss);
    }
    plot::loss_curve(&args.out.join("loss.svg"), &outcome.log)
        .map_err(|e| Failure::Runtime(format!("plot: {e}")))?;
    println!("checkpoint written to {}", model_dir.display());
    Ok(())
}

fn eval_cmd(cli: &Cli, args: &EvalArgs) -> CliResult<()> {
    let oracle = args.ckpt == "oracle";
    let (model, mut cfg) = if oracle {
        (None, resolve_config(cli)?)
    } else {
        let (m, c) = load_checkpoint(Path::new(&args.ckpt), cli)?;
        (Some(m), c)
    };
    if let Some(k) = args.attrs_per_class {
        cfg.attributes_per_class = k;
    }
    if let Some(r) = args.noise_rate {
        cfg.noise_rate = r;
    }
    cfg.validate()?;
    let ds = load_dataset(&args.data)?;
    let fold = fold_of(&ds, args.fold)?;
    let encoder = ToyEncoder::new(cfg.encoder())?;
    let head = cfg.head();
    let predictor: Box<dyn MaskPredictor + '_> = match &model {
        Some(m) => Box::new(ModelPredictor {
            segmenter: Segmenter::new(&encoder, m, &head)?,
        }),
        None => Box::new(OraclePredictor),
    };
    let probe = if args.filter {
        Some(AlignmentProbe::fit(
            &encoder,
            &ds.samples,
            &ds.catalog,
            &fold.base_classes,
            attrseg::ablation::PROBE_RIDGE,
        )?)
    } else {
        None
    };
    let filter = probe.as_ref().map(|probe| AttributeFilter {
        encoder: &encoder,
        probe,
    });
    let report = evaluate_fold(
        predictor.as_ref(),
        &ds.samples,
        &ds.catalog,
        fold,
        &cfg.eval(),
        filter.as_ref(),
    )?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("metrics.json"), report.to_json()?)?;
    fs::write(args.out.join("metrics.txt"), report.table())?;
    write_run_json(
        &args.out,
        "eval",
        &cfg,
        json!({ "ckpt": args.ckpt, "data": args.data, "fold": args.fold, "filter": args.filter, "out": args.out }),
    )?;
    print!("{}", report.table());
    Ok(())
}

fn segment_cmd(cli: &Cli, args: &SegmentArgs) -> CliResult<()> {
    let attributes = parse_llm_answer(&args.attributes);
    if attributes.is_empty() {
        return Err(Failure::Usage(
            "--attributes must contain at least one non-empty description (separate with `;`)".into(),
        ));
    }
    let (model, cfg) = load_checkpoint(&args.ckpt, cli)?;
    cfg.validate()?;
    let image = image::open(&args.image)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", args.image.display())))?
        .to_rgb8();
    let encoder = ToyEncoder::new(cfg.encoder())?;
    let head = cfg.head();
    let segmenter = Segmenter::new(&encoder, &model, &head)?;
    let (logits, mask) = segmenter.segment(&image, &attributes)?;
    fs::create_dir_all(&args.out)?;
    mask_to_image(&mask)
        .save(args.out.join("mask.png"))
        .map_err(attrseg::Error::from)?;
    write_prob_map(
        &args.out.join("probs.bin"),
        logits.upsampled_probs.as_ref().expect("segment fills probabilities"),
    )?;
    write_run_json(
        &args.out,
        "segment",
        &cfg,
        json!({ "ckpt": args.ckpt, "image": args.image, "attributes": attributes, "out": args.out }),
    )?;
    let fg = mask.iter().filter(|&&v| v > 0.5).count();
    println!(
        "{} foreground pixels of {}; mask and probabilities in {}",
        fg,
        mask.len(),
        args.out.display()
    );
    Ok(())
}

fn ablate_cmd(cli: &Cli, args: &AblateArgs) -> CliResult<()> {
    let mut cfg = resolve_config(cli)?;
    if let Some(s) = args.strategy {
        cfg.strategy = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
        cfg.warmup_epochs = cfg.warmup_epochs.min(e);
    }
    cfg.validate()?;
    let ds = load_dataset(&args.data)?;
    let folds = args
        .folds
        .iter()
        .map(|&id| fold_of(&ds, id).cloned())
        .collect::<CliResult<Vec<_>>>()?;
    let seeds = if args.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        args.seeds.clone()
    };
    let encoder = ToyEncoder::new(cfg.encoder())?;
    let progress = |msg: &str| eprintln!("{msg}");
    let setup = AblationSetup {
        samples: &ds.samples,
        catalog: &ds.catalog,
        folds: &folds,
        encoder: &encoder,
        attribute_types: Some(&ds.space.attribute_types),
        strategy: cfg.strategy,
        aggregator: cfg.aggregator(),
        head: cfg.head(),
        train: cfg.train(),
        eval: cfg.eval(),
        seeds: seeds.clone(),
        progress: Some(&progress),
    };
    let table = run_ablation(args.kind, &args.values, &setup, &mut ModelCache::new())?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("ablation.csv"), table.to_csv())?;
    fs::write(
        args.out.join("ablation.json"),
        serde_json::to_string_pretty(&table).expect("serializable"),
    )?;
    plot::ablation_bars(&args.out.join("ablation.svg"), &table)
        .map_err(|e| Failure::Runtime(format!("plot: {e}")))?;
    write_run_json(
        &args.out,
        "ablate",
        &cfg,
        json!({
            "kind": args.kind,
            "values": args.values,
            "data": args.data,
            "folds": args.folds,
            "seeds": seeds,
            "out": args.out,
        }),
    )?;
    print!("{}", table.to_csv());
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Segment(a) => segment_cmd(cli, a),
        Command::Ablate(a) => ablate_cmd(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
