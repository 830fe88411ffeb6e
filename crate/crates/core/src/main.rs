use std::collections::BTreeMap;
use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use dsmco_core::gateway::{mock_heuristic_backend, ChatBackend, HttpBackend, HttpBackendConfig, MockMode};
use dsmco_core::harness::{
    case_hash, emit_report, run_ablation, run_experiment, sa_config_hash, summarize_traces, AblationPlan,
    ConditionSummary, ExperimentPlan, ReferenceEntry, ReferenceStore,
};
use dsmco_core::optimizer::{run, OptimizerConfig};
use dsmco_core::prompting::{render_prompt, InputFormat, PromptSpec};
use dsmco_core::reference::{brute_force_optimum, SaConfig, DEFAULT_MAX_N};
use dsmco_core::seeds::{derive_seed, tag};
use dsmco_core::{
    canonicalize, clustering_efficiency, gap_percent, generate_random_case, load_case, singleton_partition,
    total_cost, CostParams, DsmCase, NodeId, Partition, SolutionRecord,
};

#[derive(Parser)]
#[command(name = "dsmco", version, about = "DSM modularization: LLM optimization loop, SA reference and reports")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the optimization loop on one case.
    Solve(SolveArgs),
    /// Simulated annealing reference cost.
    SaRef(SaRefArgs),
    /// Exhaustive optimum for small cases.
    Brute {
        case: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_N)]
        max_n: usize,
        #[arg(long, default_value_t = 1.0)]
        rho: f64,
    },
    /// Score a partition file (JSON object of node id to module label).
    Eval {
        case: PathBuf,
        partition: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        rho: f64,
        /// Reference cost for Gap%.
        #[arg(long)]
        reference: Option<f64>,
    },
    /// Run an experiment plan and write traces and reports.
    Experiment {
        plan: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run an ablation plan.
    Ablate {
        plan: PathBuf,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print the prompt of one iteration with the singleton solution base.
    PromptPreview(PreviewArgs),
    /// Rebuild summary.csv and convergence files from a trace directory.
    Report {
        traces: PathBuf,
        /// Output directory; defaults to the parent of the trace directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a random synthetic case.
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.3)]
        density: f64,
        #[arg(long, default_value_t = 1)]
        min_weight: u32,
        #[arg(long, default_value_t = 9)]
        max_weight: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    MockRandom,
    MockOracle,
    Http,
}

#[derive(Args)]
struct PromptArgs {
    /// Knowledge condition: 1 includes names and descriptions.
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=1))]
    k: u8,
    #[arg(long, default_value = "directed_edge_list")]
    format: InputFormat,
    #[arg(long)]
    no_formula: bool,
    #[arg(long, default_value_t = 5)]
    p: usize,
    #[arg(long, default_value_t = 5)]
    q: usize,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
}

impl PromptArgs {
    fn spec(&self) -> PromptSpec {
        PromptSpec {
            input_format: self.format,
            knowledge: self.k == 1,
            include_formula: !self.no_formula,
            pool_best_p: self.p,
            pool_random_q: self.q,
            rho: self.rho,
            ..PromptSpec::default()
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    case: PathBuf,
    #[command(flatten)]
    prompt: PromptArgs,
    #[arg(long, default_value_t = 30)]
    iters: usize,
    #[arg(long, value_enum, default_value = "mock-random")]
    backend: BackendArg,
    /// Answer from a replay script (JSON array of strings) instead.
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Re-query once when a response is unusable.
    #[arg(long)]
    retry_invalid: bool,
    /// Write the full run trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct SaRefArgs {
    case: PathBuf,
    #[arg(long)]
    restarts: Option<usize>,
    /// Use 10,000 restarts.
    #[arg(long, conflicts_with = "restarts")]
    full_scale: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    /// Add the result to a reference file usable by experiment plans.
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(Args)]
struct PreviewArgs {
    case: PathBuf,
    #[command(flatten)]
    prompt: PromptArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    iteration: usize,
}

enum CliError {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn cfg<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Config(e.into())
}

fn harness(e: dsmco_core::harness::HarnessError) -> CliError {
    if e.is_config() {
        CliError::Config(e.into())
    } else {
        CliError::Runtime(e.into())
    }
}

fn load(path: &Path) -> Result<DsmCase, CliError> {
    load_case(path)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(CliError::Config)
}

/// Prints to stdout, ignoring a closed pipe.
fn emit(text: impl Display) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn print_json(v: &Value) {
    emit(serde_json::to_string_pretty(v).expect("JSON values serialize"));
}

/// The error and its causes, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let part = cause.to_string();
        if !text.contains(&part) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&part);
        }
    }
    text
}

fn partition_json(case: &DsmCase, p: &Partition) -> Value {
    p.to_json_map(case)
}

fn solve(args: SolveArgs) -> Result<(), CliError> {
    let case = load(&args.case)?;
    let config = OptimizerConfig {
        iterations: args.iters,
        prompt_spec: args.prompt.spec(),
        cost_params: CostParams { rho: args.prompt.rho },
        master_seed: args.seed,
        invalid_retry_in_place: args.retry_invalid,
        temperature: args.temperature,
        ..OptimizerConfig::default()
    };
    config.validate().map_err(config_err)?;
    let backend_seed = derive_seed(&[args.seed, tag::BACKEND]);
    let backend: Box<dyn ChatBackend> = match (&args.replay, args.backend) {
        (Some(path), _) => Box::new(
            mock_heuristic_backend(&case, MockMode::replay_file(path).map_err(cfg)?, backend_seed).map_err(cfg)?,
        ),
        (None, BackendArg::MockRandom) => {
            Box::new(mock_heuristic_backend(&case, MockMode::RandomMove, backend_seed).map_err(cfg)?)
        }
        (None, BackendArg::MockOracle) => {
            Box::new(mock_heuristic_backend(&case, MockMode::OracleOnceThenRandom, backend_seed).map_err(cfg)?)
        }
        (None, BackendArg::Http) => Box::new(
            HttpBackend::from_config(&HttpBackendConfig {
                base_url: args.base_url.clone(),
                model: args.model.clone(),
                ..HttpBackendConfig::default()
            })
            .map_err(cfg)?,
        ),
    };
    let trace = run(&case, &config, backend.as_ref()).map_err(config_err)?;
    if let Some(path) = &args.trace {
        let text = serde_json::to_string_pretty(&trace).context("serializing trace")?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    let ce = clustering_efficiency(&case, &trace.best.partition).context("computing CE")?;
    print_json(&json!({
        "case": case.name(),
        "backend": trace.backend,
        "initial_cost": trace.initial_cost,
        "best_cost": trace.best.total_cost,
        "best_ce": ce,
        "best_iteration": trace.best.iteration_found,
        "invalid_count": trace.invalid_count,
        "best_so_far": trace.best_curve(),
        "best_partition": partition_json(&case, &trace.best.partition),
    }));
    Ok(())
}

fn config_err(e: dsmco_core::optimizer::OptimizerError) -> CliError {
    CliError::Config(e.into())
}

fn sa_ref(args: SaRefArgs) -> Result<(), CliError> {
    let case = load(&args.case)?;
    let base = if args.full_scale {
        SaConfig::default()
    } else {
        SaConfig::desk_scale()
    };
    let sa = SaConfig {
        restarts: args.restarts.unwrap_or(base.restarts),
        rng_seed: args.seed,
        cost_params: CostParams { rho: args.rho },
        ..base
    };
    sa.validate().map_err(cfg)?;
    let started = std::time::Instant::now();
    let result = dsmco_core::reference::sa_reference(&case, &sa).context("running SA")?;
    let mut histogram: BTreeMap<String, usize> = BTreeMap::new();
    for c in &result.restart_costs {
        *histogram.entry(format!("{c:.6}")).or_default() += 1;
    }
    let mut hist: Vec<(f64, usize)> = histogram
        .into_iter()
        .map(|(k, v)| (k.parse().expect("formatted float"), v))
        .collect();
    hist.sort_by(|a, b| a.0.total_cmp(&b.0));
    if let Some(path) = &args.save {
        let mut store = ReferenceStore::load_or_default(path).map_err(harness)?;
        store.upsert(ReferenceEntry {
            case_name: case.name().to_owned(),
            case_hash: case_hash(&case),
            sa_config_hash: Some(sa_config_hash(&sa)),
            best_cost: result.best.total_cost,
            best_partition: Some(result.best.partition.clone()),
            restarts: Some(result.restarts_run),
        });
        store.save(path).map_err(harness)?;
    }
    print_json(&json!({
        "case": case.name(),
        "best_cost": result.best.total_cost,
        "best_partition": partition_json(&case, &result.best.partition),
        "restarts": result.restarts_run,
        "seconds": started.elapsed().as_secs_f64(),
        "histogram": hist.iter().map(|(c, n)| json!({"cost": c, "count": n})).collect::<Vec<_>>(),
    }));
    Ok(())
}

fn brute(case: &Path, max_n: usize, rho: f64) -> Result<(), CliError> {
    let case = load(case)?;
    let result = brute_force_optimum(&case, CostParams { rho }, max_n).map_err(cfg)?;
    print_json(&json!({
        "case": case.name(),
        "best_cost": result.best.total_cost,
        "best_partition": partition_json(&case, &result.best.partition),
        "visited": result.visited,
    }));
    Ok(())
}

fn eval(case: &Path, partition: &Path, rho: f64, reference: Option<f64>) -> Result<(), CliError> {
    let case = load(case)?;
    let text = std::fs::read_to_string(partition)
        .with_context(|| format!("reading {}", partition.display()))
        .map_err(CliError::Config)?;
    let raw: BTreeMap<String, Value> = serde_json::from_str(&text)
        .context("partition file must be a JSON object of node id to module label")
        .map_err(CliError::Config)?;
    let ids: Vec<(NodeId, String)> = raw
        .into_iter()
        .map(|(k, v)| (NodeId::new(k), v.as_str().map_or_else(|| v.to_string(), str::to_owned)))
        .collect();
    let p = canonicalize(ids.iter().map(|(id, l)| (id, l.as_str())), &case).map_err(cfg)?;
    let cost = total_cost(&case, &p, CostParams { rho }).map_err(cfg)?;
    let ce = clustering_efficiency(&case, &p).map_err(cfg)?;
    let gap = reference.map(|r| gap_percent(cost, r)).transpose().map_err(cfg)?;
    print_json(&json!({
        "case": case.name(),
        "total_cost": cost,
        "clustering_efficiency": ce,
        "modules": p.module_count(),
        "gap_percent": gap,
        "partition": partition_json(&case, &p),
    }));
    Ok(())
}

fn print_summaries(summaries: &[ConditionSummary]) {
    for s in summaries {
        let fmt = |a: &Option<dsmco_core::Aggregate>| {
            a.as_ref()
                .map_or_else(|| "n/a".to_owned(), |a| format!("{:.2} ± {:.2}", a.mean, a.std))
        };
        emit(format_args!(
            "{}  cost {}  CE {}  gap% {}  ref {:.2}  runs {}",
            s.cell,
            fmt(&s.total_cost),
            fmt(&s.ce),
            fmt(&s.final_gap),
            s.reference_cost,
            s.runs_completed
        ));
    }
}

fn experiment(plan: &Path, out: &Path, workers: Option<usize>) -> Result<(), CliError> {
    let mut plan = ExperimentPlan::from_file(plan).map_err(harness)?;
    plan.workers = workers.or(plan.workers);
    let output = run_experiment(&plan, out).map_err(harness)?;
    emit_report(&output.summaries, &output.tables, out).map_err(harness)?;
    print_summaries(&output.summaries);
    emit(format_args!("wrote {}", out.join("summary.csv").display()));
    Ok(())
}

fn ablate(plan: &Path, out: &Path, workers: Option<usize>) -> Result<(), CliError> {
    let mut plan = AblationPlan::from_file(plan).map_err(harness)?;
    plan.base.workers = workers.or(plan.base.workers);
    let output = run_ablation(&plan, out).map_err(harness)?;
    let summaries: Vec<ConditionSummary> = output.arms.iter().map(|(_, s)| s.clone()).collect();
    emit_report(&summaries, &output.tables, out).map_err(harness)?;
    print_summaries(&summaries);
    emit(format_args!("wrote {}", out.join("summary.csv").display()));
    Ok(())
}

fn preview(args: PreviewArgs) -> Result<(), CliError> {
    let case = load(&args.case)?;
    let init = singleton_partition(&case);
    let record = SolutionRecord {
        total_cost: total_cost(&case, &init, CostParams { rho: args.prompt.rho }).map_err(cfg)?,
        partition: init,
        iteration_found: 0,
    };
    let spec = PromptSpec {
        shuffle_seed: args.seed,
        ..args.prompt.spec()
    };
    let prompt = render_prompt(&case, &spec, &[], &[record], args.iteration).map_err(cfg)?;
    emit(format_args!("=== system ===\n{}\n=== user ===\n{}", prompt.system_message, prompt.user_message));
    Ok(())
}

fn report(traces: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = out.unwrap_or_else(|| traces.parent().unwrap_or(Path::new(".")).to_owned());
    let output = summarize_traces(traces).map_err(harness)?;
    emit_report(&output.summaries, &output.tables, &out).map_err(harness)?;
    print_summaries(&output.summaries);
    emit(format_args!("wrote {}", out.join("summary.csv").display()));
    Ok(())
}

fn generate(n: usize, density: f64, weights: (u32, u32), seed: u64, out: Option<PathBuf>) -> Result<(), CliError> {
    let case = generate_random_case(n, density, weights, seed).map_err(cfg)?;
    let text = case.to_json_pretty();
    match out {
        Some(path) => std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?,
        None => emit(text),
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve(a) => solve(a),
        Command::SaRef(a) => sa_ref(a),
        Command::Brute { case, max_n, rho } => brute(&case, max_n, rho),
        Command::Eval {
            case,
            partition,
            rho,
            reference,
        } => eval(&case, &partition, rho, reference),
        Command::Experiment { plan, out, workers } => experiment(&plan, &out, workers),
        Command::Ablate { plan, out, workers } => ablate(&plan, &out, workers),
        Command::PromptPreview(a) => preview(a),
        Command::Report { traces, out } => report(&traces, out),
        Command::Generate {
            n,
            density,
            min_weight,
            max_weight,
            seed,
            out,
        } => generate(n, density, (min_weight, max_weight), seed, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}
