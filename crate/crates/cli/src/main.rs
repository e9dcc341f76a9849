use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ckge_core::dataset::{self, GrowthMode, GrowthSpec};
use ckge_core::eval::{write_rank_dump, EvalContext, Protocol};
use ckge_core::telemetry::{self, CountingAllocator};
use ckge_core::trainer::gradcheck::{measure_grad_error, GradComponent, GRAD_TOLERANCE};
use ckge_core::trainer::{run_continual_with, Mode, Stage1Source, TrainConfig};
use ckge_core::{Error, Real, Split};

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(
    name = "ckge",
    version,
    about = "Continual knowledge graph embedding with task-driven token masks"
)]
struct Cli {
    /// JSON config file; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Deterministic reduction order; results are bit-identical across runs.
    #[arg(long, global = true)]
    reproducible: bool,
    /// Train in 64-bit floats.
    #[arg(long, global = true)]
    float64: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train over every snapshot of a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one snapshot.
    Eval(EvalArgs),
    /// Write a synthetic growing dataset.
    GenSynthetic(GenArgs),
    /// Compare analytic gradients against finite differences.
    GradCheck(GradArgs),
    /// Summarize a finished run directory.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ett,
    FineTune,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Previous,
    CurrentOverlap,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    no_distill: bool,
    #[arg(long)]
    no_stage1: bool,
    #[arg(long)]
    no_div: bool,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    max_epochs_first: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    filter_negatives: bool,
    #[arg(long)]
    renormalize: bool,
    #[arg(long)]
    shared_tokens: bool,
    #[arg(long)]
    stop_mask_gradient: bool,
    #[arg(long, value_enum)]
    stage1_source: Option<SourceArg>,
    /// Report raw instead of filtered ranking metrics.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Snapshot whose split is evaluated.
    #[arg(long)]
    snapshot: usize,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    raw: bool,
    /// Write per-query ranks to this CSV file.
    #[arg(long)]
    rank_dump: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "entity")]
    growth_mode: String,
    #[arg(long)]
    base_entities: Option<usize>,
    #[arg(long)]
    base_relations: Option<usize>,
    #[arg(long)]
    base_facts: Option<usize>,
    #[arg(long)]
    snapshots: Option<usize>,
    /// Growth rate applied to the growing quantity (0.2 = 20% per snapshot).
    #[arg(long)]
    growth: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    fanout: Option<usize>,
    #[arg(long)]
    translation_scale: Option<f64>,
}

#[derive(Args)]
struct GradArgs {
    /// margin, diversity, distill, token-objective, total, or all.
    #[arg(long, default_value = "all")]
    component: String,
    #[arg(long, default_value_t = 20)]
    trials: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CKGE_LOG", "info")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Numeric(_)) => EXIT_NUMERIC,
        Some(Error::Config(_)) => EXIT_USAGE,
        Some(err) if err.is_data_error() => EXIT_DATA,
        Some(Error::Io { .. } | Error::Json(_) | Error::Csv(_)) => EXIT_DATA,
        _ => 1,
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(a),
        Command::GenSynthetic(a) => gen_synthetic(cli, a),
        Command::GradCheck(a) => grad_check(cli, a),
        Command::Report(a) => report(a),
    }
}

fn build_config(cli: &Cli, a: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut c = match &cli.config {
        Some(p) => TrainConfig::from_json_file(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident <- $val:expr),* $(,)?) => {
            $(if let Some(v) = $val { c.$field = v; })*
        };
    }
    set!(
        seed <- cli.seed,
        dim <- a.dim,
        margin <- a.margin,
        negatives <- a.negatives,
        tokens <- a.tokens,
        lambda <- a.lambda,
        alpha <- a.alpha,
        batch_size <- a.batch_size,
        learning_rate <- a.lr,
        stage1_epochs <- a.stage1_epochs,
        max_epochs_first <- a.max_epochs_first,
        max_epochs <- a.max_epochs,
        patience <- a.patience,
    );
    if let Some(m) = a.mode {
        c.mode = match m {
            ModeArg::Ett => Mode::Ett,
            ModeArg::FineTune => Mode::FineTune,
        };
    }
    if let Some(s) = a.stage1_source {
        c.stage1_source = match s {
            SourceArg::Previous => Stage1Source::Previous,
            SourceArg::CurrentOverlap => Stage1Source::CurrentOverlap,
        };
    }
    c.no_distill |= a.no_distill;
    c.no_stage1 |= a.no_stage1;
    c.no_div |= a.no_div;
    c.float64 |= cli.float64;
    c.reproducible |= cli.reproducible;
    c.filter_negatives |= a.filter_negatives;
    c.renormalize |= a.renormalize;
    c.shared_tokens |= a.shared_tokens;
    c.stop_mask_gradient |= a.stop_mask_gradient;
    if a.raw {
        c.eval_protocol = Protocol::Raw;
    }
    c.validate()?;
    Ok(c)
}

fn checkpoint_path(out: &Path, snapshot: usize) -> PathBuf {
    out.join("checkpoints")
        .join(format!("snapshot-{snapshot}.ckpt"))
}

fn train(cli: &Cli, a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = build_config(cli, a)?;
    let seq =
        dataset::load_sequence(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    fs::create_dir_all(a.out.join("checkpoints"))
        .with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.json"), serde_json::to_vec_pretty(&cfg)?)?;
    log::info!(
        "training {} snapshots, mode {:?}, config {}",
        seq.len(),
        cfg.mode,
        &cfg.hash()[..12]
    );
    if cfg.float64 {
        train_with::<f64>(&seq, &cfg, &a.out)
    } else {
        train_with::<f32>(&seq, &cfg, &a.out)
    }
}

fn train_with<F: Real>(
    seq: &ckge_core::SnapshotSequence,
    cfg: &TrainConfig,
    out: &Path,
) -> anyhow::Result<()> {
    let mut last_good: Option<PathBuf> = None;
    let result = run_continual_with::<F, _>(seq, cfg, |state, _| {
        let p = checkpoint_path(out, state.snapshot);
        dataset::save_checkpoint(&p, state, cfg)?;
        last_good = Some(p);
        Ok(())
    });
    let run = match result {
        Ok(r) => r,
        Err(e) => {
            if let Some(p) = &last_good {
                eprintln!("last good checkpoint: {}", p.display());
            }
            return Err(e.into());
        }
    };
    telemetry::emit_report(&run.report, out)?;
    print_summary(&run.report);
    Ok(())
}

fn print_summary(r: &telemetry::RunReport) {
    println!("snapshot  mrr     hits@1  hits@10  epochs  time_s");
    for s in &r.snapshots {
        println!(
            "{:>8}  {:.4}  {:.4}  {:.4}   {:>6}  {:.2}",
            s.index, s.test.mrr, s.test.hits1, s.test.hits10, s.epochs_run, s.metrics.wall_time_s
        );
    }
    println!(
        "final-model average mrr {:.4}, total training time {:.2}s",
        r.average_mrr(),
        r.total_training_time()
    );
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let header = dataset::peek_header(&a.checkpoint)?;
    let seq =
        dataset::load_sequence(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    dataset::check_dimensions(&header, &seq, a.snapshot)?;
    let split = match a.split.as_str() {
        "train" => Split::Train,
        "valid" => Split::Valid,
        "test" => Split::Test,
        s => return Err(Error::Config(format!("unknown split {s:?}")).into()),
    };
    if header.width == 8 {
        eval_with::<f64>(a, &seq, split)
    } else {
        eval_with::<f32>(a, &seq, split)
    }
}

fn eval_with<F: Real>(
    a: &EvalArgs,
    seq: &ckge_core::SnapshotSequence,
    split: Split,
) -> anyhow::Result<()> {
    let (state, meta) = dataset::load_checkpoint::<F>(&a.checkpoint)?;
    let protocol = if a.raw {
        Protocol::Raw
    } else {
        meta.config.eval_protocol
    };
    let ctx = EvalContext::new(seq, a.snapshot, split, protocol);
    if ctx.triples.is_empty() {
        bail!(Error::Contract(format!(
            "snapshot {} has no {split:?} queries",
            a.snapshot
        )));
    }
    let res = ctx.evaluate(&state.entities, &state.relations, a.rank_dump.is_some())?;
    if let (Some(path), Some(ranks)) = (&a.rank_dump, &res.ranks) {
        write_rank_dump(path, ranks)?;
    }
    let out = serde_json::json!({
        "checkpoint_snapshot": meta.snapshot,
        "snapshot": a.snapshot,
        "split": format!("{split:?}").to_lowercase(),
        "protocol": protocol,
        "mrr": res.mrr,
        "hits1": res.hits1,
        "hits10": res.hits10,
        "queries": res.queries,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn gen_synthetic(cli: &Cli, a: &GenArgs) -> anyhow::Result<()> {
    let mut spec = GrowthSpec {
        mode: a.growth_mode.parse::<GrowthMode>()?,
        seed: cli.seed.unwrap_or(0),
        ..GrowthSpec::default()
    };
    if let Some(v) = a.base_entities {
        spec.base_entities = v;
    }
    if let Some(v) = a.base_relations {
        spec.base_relations = v;
    }
    if let Some(v) = a.base_facts {
        spec.base_facts = v;
    }
    if let Some(v) = a.snapshots {
        spec.snapshots = v;
    }
    if let Some(v) = a.latent_dim {
        spec.latent_dim = v;
    }
    if let Some(v) = a.fanout {
        spec.fanout = v;
    }
    if let Some(v) = a.translation_scale {
        spec.translation_scale = v;
    }
    if let Some(g) = a.growth {
        spec.entity_growth = g;
        spec.relation_growth = g;
        spec.fact_growth = g;
    }
    let layout = dataset::generate_synthetic(&spec, &a.out)?;
    let seq = dataset::load_layout(&layout)?;
    for s in dataset::snapshot_stats(&seq) {
        println!(
            "snapshot {}: {} entities, {} relations, {}/{}/{} train/valid/test",
            s.index, s.entities, s.relations, s.train, s.valid, s.test
        );
    }
    Ok(())
}

fn grad_check(cli: &Cli, a: &GradArgs) -> anyhow::Result<()> {
    let comps: Vec<GradComponent> = if a.component == "all" {
        GradComponent::ALL.to_vec()
    } else {
        vec![a.component.parse()?]
    };
    let seed = cli.seed.unwrap_or(0);
    let mut failed = Vec::new();
    for c in comps {
        let r = measure_grad_error(c, a.trials, seed)?;
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        println!(
            "{verdict} {:<16} max rel error {:.3e} over {} coordinates",
            c.name(),
            r.max_rel_error,
            r.coordinates
        );
        if !r.passed() {
            println!("     worst: {}", r.worst.as_deref().unwrap_or("?"));
            failed.push(c.name());
        }
    }
    if !failed.is_empty() {
        bail!(Error::Numeric(format!(
            "gradient error >= {GRAD_TOLERANCE:e} in {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

fn report(a: &ReportArgs) -> anyhow::Result<()> {
    let r = telemetry::read_report(&a.run)?;
    println!(
        "run {} (version {}, config {})",
        a.run.display(),
        r.version,
        &r.config_hash[..12.min(r.config_hash.len())]
    );
    print_summary(&r);
    println!("forgetting matrix (mrr, row = model, column = test snapshot):");
    for row in &r.forgetting.cells {
        let cells: Vec<String> = row.iter().map(|c| format!("{:.4}", c.mrr)).collect();
        println!("  {}", cells.join("  "));
    }
    Ok(())
}
