use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use picpq::container::{read_dataset, read_state, write_dataset, write_state};
use picpq::cost::model_cost;
use picpq::data::{synthetic, Dataset, SyntheticConfig};
use picpq::error::{read_text, write_file};
use picpq::evosearch::{history_to_jsonl, search, ScoreContext};
use picpq::model::ModelState;
use picpq::picplan::{default_floors, derive_masks, importance, AbVector, CompressionPlan};
use picpq::pipeline::{
    artifacts, filter_properties, run_pipeline, split_validation, three_step_finetune, DirLock, PipelineConfig,
};
use picpq::rankfp::FilterPropertyTable;
use picpq::spec::NetworkSpec;
use picpq::{Error, Result};

#[derive(Parser)]
#[command(name = "picpq", version, about = "Joint filter pruning and mixed-precision quantization")]
struct Cli {
    /// Worker threads for batch-parallel compute (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter properties (average feature-map rank) of a trained model.
    Rank(RankArgs),
    /// Evolutionary search for the per-layer a-b vector.
    Search(SearchArgs),
    /// Pruning and bitwidth plan for an a-b vector at a budget.
    Plan(PlanArgs),
    /// Three-step fine-tuning of a planned model.
    Finetune(FinetuneArgs),
    /// FLOPs and BOPs of a plan.
    Report(ReportArgs),
    /// Every stage from a config file.
    Pipeline(PipelineArgs),
    /// Write a synthetic train/test dataset pair.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Common {
    /// Pipeline config JSON; supplies every setting not given as a flag.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (overrides the config's `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Network spec JSON (default: the desk network).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Class count of the desk network when no spec or dataset is given.
    #[arg(long, default_value_t = 3)]
    classes: usize,
}

#[derive(Args)]
struct ModelInputs {
    /// Weight container (.picw).
    #[arg(long)]
    weights: PathBuf,
    /// Training dataset container (.picd).
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct RankArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    inputs: ModelInputs,
    /// Filter property table JSON to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    inputs: ModelInputs,
    /// Filter property table JSON (computed when absent).
    #[arg(long)]
    fp: Option<PathBuf>,
    /// Required baseline-to-compressed BOPs ratio (default 30).
    #[arg(long)]
    budget_ratio: Option<f64>,
    /// Prune without quantizing; the ratio is then a FLOPs ratio.
    #[arg(long)]
    prune_only: bool,
    /// Output directory for ab.json and history.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    common: Common,
    /// Filter property table JSON.
    #[arg(long)]
    fp: PathBuf,
    /// a-b vector JSON.
    #[arg(long)]
    ab: PathBuf,
    /// Required baseline-to-compressed BOPs ratio (default 30).
    #[arg(long)]
    budget_ratio: Option<f64>,
    /// Prune without quantizing; the ratio is then a FLOPs ratio.
    #[arg(long)]
    prune_only: bool,
    /// Plan JSON to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    inputs: ModelInputs,
    /// Plan JSON.
    #[arg(long)]
    plan: PathBuf,
    /// Evaluation dataset (default: the held-out validation split).
    #[arg(long)]
    test: Option<PathBuf>,
    /// Output directory for the staged weights and report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Plan JSON.
    #[arg(long)]
    plan: PathBuf,
    /// Report JSON to write (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: Common,
    /// Required baseline-to-compressed BOPs ratio (default 30).
    #[arg(long)]
    budget_ratio: Option<f64>,
    /// Prune without quantizing; the ratio is then a FLOPs ratio.
    #[arg(long)]
    prune_only: bool,
    /// Reuse a saved a-b vector instead of searching.
    #[arg(long)]
    ab: Option<PathBuf>,
    /// Output directory for every artifact.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic generator settings as JSON (default settings when absent).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generator seed (overrides the settings file).
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving train.picd and test.picd.
    #[arg(long)]
    out: PathBuf,
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let base = path.parent().unwrap_or(Path::new("."));
            PipelineConfig::from_json(&read_text(path)?, base)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(spec) = &common.spec {
        cfg.spec = Some(spec.clone());
    }
    Ok(cfg)
}

fn apply_budget(cfg: &mut PipelineConfig, budget: Option<f64>, prune_only: bool) {
    if let Some(b) = budget {
        cfg.budget_ratio = b;
    }
    cfg.prune_only |= prune_only;
}

fn classes_of(data: &Dataset) -> usize {
    data.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1)
}

fn load_model(cfg: &PipelineConfig, inputs: &ModelInputs) -> Result<(NetworkSpec, ModelState, Dataset)> {
    let data = read_dataset(&inputs.data)?;
    let spec = cfg.load_spec(classes_of(&data))?;
    let state = read_state(&inputs.weights)?;
    state.check_against(&spec)?;
    Ok((spec, state, data))
}

fn write_json(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::File { path: dir.to_path_buf(), source: e })?;
    }
    write_file(path, text)
}

fn rank(args: RankArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let (spec, state, data) = load_model(&cfg, &args.inputs)?;
    let fp = filter_properties(&cfg, &spec, &state, &data)?;
    write_json(&args.out, &fp.to_json())?;
    for (id, v) in &fp.values {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        println!("layer {id}: {} filters, mean rank {mean:.3}", v.len());
    }
    Ok(())
}

fn run_search(args: SearchArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_budget(&mut cfg, args.budget_ratio, args.prune_only);
    let (spec, state, data) = load_model(&cfg, &args.inputs)?;
    let fp = match &args.fp {
        Some(path) => FilterPropertyTable::from_json(&read_text(path)?)?,
        None => filter_properties(&cfg, &spec, &state, &data)?,
    };
    fp.check(&spec)?;
    let (train, validation) = split_validation(&cfg, &data)?;
    let schedule = cfg.schedule.build(&spec)?;
    let floors = default_floors(&spec);
    let ctx = ScoreContext {
        spec: &spec,
        state: &state,
        fp: &fp,
        schedule: &schedule,
        floors: &floors,
        train: &train,
        validation: &validation,
    };
    std::fs::create_dir_all(&args.out).map_err(|e| Error::File { path: args.out.clone(), source: e })?;
    let _lock = DirLock::acquire(&args.out)?;
    let result = search(&ctx, &cfg.effective_search())?;
    write_file(&args.out.join(artifacts::AB), result.best.ab.to_json())?;
    write_file(&args.out.join(artifacts::HISTORY), history_to_jsonl(&result.history))?;
    println!(
        "best score {:.4} (birth {}), ratio {:.2}x over {} candidates",
        result.best.score.score,
        result.best.birth_index,
        result.best.score.achieved_ratio,
        result.history.len()
    );
    Ok(())
}

fn plan(args: PlanArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_budget(&mut cfg, args.budget_ratio, args.prune_only);
    let fp = FilterPropertyTable::from_json(&read_text(&args.fp)?)?;
    let ab = AbVector::from_json(&read_text(&args.ab)?)?;
    let spec = cfg.load_spec(args.common.classes)?;
    fp.check(&spec)?;
    ab.check(&spec)?;
    let schedule = cfg.schedule.build(&spec)?;
    let plan = derive_masks(
        &importance(&fp, &ab)?,
        &spec,
        &schedule,
        cfg.budget_ratio,
        &default_floors(&spec),
        cfg.currency(),
    )?;
    write_json(&args.out, &plan.to_json())?;
    println!("requested {:.2}x, achieved {:.2}x", plan.requested_ratio, plan.achieved_ratio);
    Ok(())
}

fn finetune(args: FinetuneArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let (spec, state, data) = load_model(&cfg, &args.inputs)?;
    let plan = CompressionPlan::from_json(&read_text(&args.plan)?, &spec)?;
    let (train, eval) = match &args.test {
        Some(path) => (data, read_dataset(path)?),
        None => split_validation(&cfg, &data)?,
    };
    std::fs::create_dir_all(&args.out).map_err(|e| Error::File { path: args.out.clone(), source: e })?;
    let _lock = DirLock::acquire(&args.out)?;
    let staged = three_step_finetune(&spec, &state, &plan, &train, &eval, &cfg.stages)?;
    write_state(&args.out.join(artifacts::PRUNED), &staged.pruned)?;
    if let Some(s) = &staged.act_quantized {
        write_state(&args.out.join(artifacts::ACT_QUANTIZED), s)?;
    }
    write_state(&args.out.join(artifacts::FINAL), staged.fully_quantized.as_ref().unwrap_or(&staged.pruned))?;
    write_file(&args.out.join(artifacts::REPORT), staged.report.to_json())?;
    print_accuracy(&staged.report);
    Ok(())
}

fn print_accuracy(report: &picpq::cost::CostReport) {
    let a = &report.accuracy;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!(
        "bops ratio {:.2}x, flops ratio {:.2}x; accuracy baseline {} pruned {} act-quantized {} fully-quantized {}",
        report.bops_ratio,
        report.flops_ratio,
        fmt(a.baseline),
        fmt(a.pruned),
        fmt(a.act_quantized),
        fmt(a.fully_quantized)
    );
}

fn report(args: ReportArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let spec = cfg.load_spec(args.common.classes)?;
    let plan = CompressionPlan::from_json(&read_text(&args.plan)?, &spec)?;
    let text = model_cost(&spec, &plan)?.to_json();
    match &args.out {
        Some(path) => write_json(path, &text),
        None => match writeln!(std::io::stdout().lock(), "{text}") {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
            _ => Ok(()),
        },
    }
}

fn pipeline(args: PipelineArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_budget(&mut cfg, args.budget_ratio, args.prune_only);
    if let Some(ab) = args.ab {
        cfg.ab = Some(ab);
    }
    let out = run_pipeline(&cfg, &args.out)?;
    println!(
        "plan: requested {:.2}x, achieved {:.2}x ({} candidates scored)",
        out.plan.requested_ratio, out.plan.achieved_ratio, out.evaluated
    );
    print_accuracy(&out.staged.report);
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut cfg: SyntheticConfig = match &args.config {
        Some(path) => serde_json::from_str(&read_text(path)?)?,
        None => SyntheticConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let (train, test) = synthetic(&cfg)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::File { path: args.out.clone(), source: e })?;
    write_dataset(&args.out.join("train.picd"), &train)?;
    write_dataset(&args.out.join("test.picd"), &test)?;
    println!("{} train / {} test images of {} classes", train.len(), test.len(), cfg.classes);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Validation(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Rank(a) => rank(a),
        Command::Search(a) => run_search(a),
        Command::Plan(a) => plan(a),
        Command::Finetune(a) => finetune(a),
        Command::Report(a) => report(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Synth(a) => synth(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
