//! Experiment grids, ablations and reports.
//!
//! An [`ExperimentPlan`] expands into cells of (case, backend, knowledge);
//! each cell runs several independently seeded optimizer runs, writes one
//! trace file per run and is summarized against the case's SA reference.

mod references;
mod report;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use references::{
    cached_reference, case_hash, compute_reference, sa_config_hash, ReferenceEntry, ReferenceStore,
};
pub use report::{
    convergence_svg, convergence_table, emit_report, file_stem, write_convergence_csv, write_summary_csv,
    ConvergenceRow, ConvergenceTable,
};

use crate::gateway::{mock_heuristic_backend, ChatBackend, GatewayError, HttpBackend, HttpBackendConfig, MockMode};
use crate::metrics::{aggregate, clustering_efficiency, gap_percent, Aggregate, MetricError};
use crate::model::{load_case, CaseError, DsmCase};
use crate::optimizer::{run, OptimizerConfig, OptimizerError, RunTrace};
use crate::prompting::{InputFormat, PromptSpec};
use crate::reference::{SaConfig, SaConfigError};
use crate::seeds::{derive_seed, tag};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot load case {}: {err}", path.display())]
    Case {
        path: PathBuf,
        #[source]
        err: CaseError,
    },
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("no SA reference for case {0}")]
    MissingReference(String),
    #[error(transparent)]
    Sa(#[from] SaConfigError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{}: {err}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        err: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("report: {0}")]
    Report(String),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, err: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_owned(),
            err,
        }
    }

    /// True for problems with the inputs rather than failures while running.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            HarnessError::Case { .. }
                | HarnessError::Plan(_)
                | HarnessError::MissingReference(_)
                | HarnessError::Sa(_)
                | HarnessError::Optimizer(_)
                | HarnessError::Json(_)
                | HarnessError::Gateway(GatewayError::Config(_))
        )
    }
}

/// Behaviour of an offline backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MockSpec {
    Echo {
        text: String,
    },
    RandomMove,
    OracleOnceThenRandom,
    Replay {
        #[serde(default)]
        script: Vec<String>,
        #[serde(default)]
        script_file: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Mock {
        #[serde(default)]
        name: Option<String>,
        #[serde(flatten)]
        mock: MockSpec,
    },
    Http(HttpBackendConfig),
}

impl BackendSpec {
    pub fn mock(mock: MockSpec) -> Self {
        BackendSpec::Mock { name: None, mock }
    }

    pub fn label(&self) -> String {
        match self {
            BackendSpec::Mock { name: Some(n), .. } => n.clone(),
            BackendSpec::Mock { mock, .. } => format!("mock-{}", self::mock_mode_label(mock)),
            BackendSpec::Http(c) => c.name.clone(),
        }
    }

    fn mock_mode(mock: &MockSpec) -> Result<MockMode, GatewayError> {
        Ok(match mock {
            MockSpec::Echo { text } => MockMode::Echo(text.clone()),
            MockSpec::RandomMove => MockMode::RandomMove,
            MockSpec::OracleOnceThenRandom => MockMode::OracleOnceThenRandom,
            MockSpec::Replay {
                script_file: Some(path), ..
            } => MockMode::replay_file(path)?,
            MockSpec::Replay { script, .. } => MockMode::Replay(script.clone()),
        })
    }

    /// Instantiates the backend for one run.
    pub fn build(&self, case: &DsmCase, seed: u64) -> Result<Box<dyn ChatBackend>, GatewayError> {
        match self {
            BackendSpec::Mock { mock, .. } => {
                let backend = mock_heuristic_backend(case, Self::mock_mode(mock)?, seed)?;
                Ok(Box::new(backend.with_name(self.label())))
            }
            BackendSpec::Http(config) => Ok(Box::new(HttpBackend::from_config(config)?)),
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let BackendSpec::Mock {
            mock: MockSpec::Replay {
                script_file: Some(p), ..
            },
            ..
        } = self
        {
            *p = base.join(&*p);
        }
    }
}

fn mock_mode_label(mock: &MockSpec) -> &'static str {
    match mock {
        MockSpec::Echo { .. } => "echo",
        MockSpec::RandomMove => "random_move",
        MockSpec::OracleOnceThenRandom => "oracle_once_then_random",
        MockSpec::Replay { .. } => "replay",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Knowledge {
    #[serde(rename = "k0")]
    K0,
    #[serde(rename = "k1")]
    K1,
}

impl Knowledge {
    pub fn enabled(self) -> bool {
        self == Knowledge::K1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaReferenceSource {
    ComputeNow(SaConfig),
    LoadFile(PathBuf),
}

impl Default for SaReferenceSource {
    fn default() -> Self {
        SaReferenceSource::ComputeNow(SaConfig::desk_scale())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub cases: Vec<PathBuf>,
    pub backends: Vec<BackendSpec>,
    pub knowledge_conditions: Vec<Knowledge>,
    pub runs_per_condition: usize,
    pub optimizer_defaults: OptimizerConfig,
    pub sa_reference_source: SaReferenceSource,
    pub master_seed: u64,
    /// Parallel runs; all available cores when unset.
    pub workers: Option<usize>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            cases: Vec::new(),
            backends: Vec::new(),
            knowledge_conditions: vec![Knowledge::K0, Knowledge::K1],
            runs_per_condition: 10,
            optimizer_defaults: OptimizerConfig::default(),
            sa_reference_source: SaReferenceSource::default(),
            master_seed: 0,
            workers: None,
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|err| HarnessError::io(path, err))?;
    Ok(serde_json::from_str(&text)?)
}

impl ExperimentPlan {
    /// Reads a plan file. Relative paths inside it are taken relative to the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let mut plan: ExperimentPlan = read_json(path)?;
        plan.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(plan)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for c in &mut self.cases {
            *c = base.join(&*c);
        }
        if let SaReferenceSource::LoadFile(p) = &mut self.sa_reference_source {
            *p = base.join(&*p);
        }
        for b in &mut self.backends {
            b.resolve_paths(base);
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: &str| Err(HarnessError::Plan(m.to_owned()));
        if self.runs_per_condition == 0 {
            return fail("runs_per_condition must be at least 1");
        }
        if self.cases.is_empty() || self.backends.is_empty() || self.knowledge_conditions.is_empty() {
            return fail("cases, backends and knowledge_conditions must be non-empty");
        }
        if self.workers == Some(0) {
            return fail("workers must be at least 1");
        }
        let labels: BTreeSet<String> = self.backends.iter().map(BackendSpec::label).collect();
        if labels.len() != self.backends.len() {
            return fail("backend names must be unique");
        }
        let ks: BTreeSet<Knowledge> = self.knowledge_conditions.iter().copied().collect();
        if ks.len() != self.knowledge_conditions.len() {
            return fail("knowledge conditions must be unique");
        }
        if let SaReferenceSource::ComputeNow(c) = &self.sa_reference_source {
            c.validate()?;
        }
        self.optimizer_defaults.validate()?;
        Ok(())
    }

    fn load_cases(&self) -> Result<Vec<DsmCase>, HarnessError> {
        let cases = self
            .cases
            .iter()
            .map(|p| load_case(p).map_err(|err| HarnessError::Case { path: p.clone(), err }))
            .collect::<Result<Vec<_>, _>>()?;
        let names: BTreeSet<&str> = cases.iter().map(DsmCase::name).collect();
        if names.len() != cases.len() {
            return Err(HarnessError::Plan("case names must be unique".into()));
        }
        Ok(cases)
    }

    /// Seed of one run; distinct for every (case, backend, knowledge, run).
    pub fn run_seed(&self, case: usize, backend: usize, knowledge: Knowledge, run: usize) -> u64 {
        derive_seed(&[
            self.master_seed,
            case as u64,
            backend as u64,
            knowledge as u64,
            run as u64,
            tag::RUN,
        ])
    }
}

/// Everything needed to re-summarize a run without the case file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub cell: String,
    pub case: String,
    pub backend: String,
    pub knowledge: bool,
    pub run: usize,
    pub seed: u64,
    pub reference_cost: f64,
    /// Clustering efficiency of the best partition.
    pub best_ce: f64,
    pub trace: RunTrace,
}

impl TraceFile {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        read_json(path)
    }

    /// Runs that never heard back from the backend are not counted.
    pub fn completed(&self) -> bool {
        !self.trace.transport_only()
    }

    pub fn final_gap(&self) -> Result<f64, MetricError> {
        gap_percent(self.trace.best.total_cost, self.reference_cost)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub cell: String,
    pub case: String,
    pub backend: String,
    pub knowledge: bool,
    /// Aggregates are absent when no run completed.
    pub total_cost: Option<Aggregate>,
    pub ce: Option<Aggregate>,
    pub final_gap: Option<Aggregate>,
    pub reference_cost: f64,
    pub traces: Vec<PathBuf>,
    pub runs_completed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub summaries: Vec<ConditionSummary>,
    pub tables: Vec<ConvergenceTable>,
}

fn cell_id(case: &str, backend: &str, knowledge: bool) -> String {
    format!("{case}__{backend}__k{}", u8::from(knowledge))
}

/// Summary and convergence table of one cell's trace files.
pub fn summarize_cell(
    files: &[(PathBuf, TraceFile)],
) -> Result<(ConditionSummary, Option<ConvergenceTable>), HarnessError> {
    let first = &files
        .first()
        .ok_or_else(|| HarnessError::Report("cell without traces".into()))?
        .1;
    let done: Vec<&TraceFile> = files.iter().map(|(_, f)| f).filter(|f| f.completed()).collect();
    let agg = |values: Vec<f64>| -> Result<Option<Aggregate>, HarnessError> {
        if values.is_empty() {
            Ok(None)
        } else {
            Ok(Some(aggregate(&values)?))
        }
    };
    let gaps = done.iter().map(|f| f.final_gap()).collect::<Result<Vec<_>, _>>()?;
    let summary = ConditionSummary {
        cell: first.cell.clone(),
        case: first.case.clone(),
        backend: first.backend.clone(),
        knowledge: first.knowledge,
        total_cost: agg(done.iter().map(|f| f.trace.best.total_cost).collect())?,
        ce: agg(done.iter().map(|f| f.best_ce).collect())?,
        final_gap: agg(gaps)?,
        reference_cost: first.reference_cost,
        traces: files.iter().map(|(p, _)| p.clone()).collect(),
        runs_completed: done.len(),
    };
    let table = if done.is_empty() {
        None
    } else {
        let traces: Vec<&RunTrace> = done.iter().map(|f| &f.trace).collect();
        Some(convergence_table(&first.cell, &traces, first.reference_cost)?)
    };
    Ok((summary, table))
}

/// Reference cost per case, from the configured source. Computed references
/// are cached in `cache`.
pub fn resolve_references(
    plan: &ExperimentPlan,
    cases: &[DsmCase],
    cache: &Path,
) -> Result<Vec<f64>, HarnessError> {
    match &plan.sa_reference_source {
        SaReferenceSource::LoadFile(path) => {
            let store = ReferenceStore::load(path)?;
            cases
                .iter()
                .map(|c| {
                    store
                        .find(c)
                        .map(|e| e.best_cost)
                        .ok_or_else(|| HarnessError::MissingReference(c.name().to_owned()))
                })
                .collect()
        }
        SaReferenceSource::ComputeNow(config) => {
            let mut store = ReferenceStore::load_or_default(cache)?;
            let costs = cases
                .iter()
                .map(|c| Ok(cached_reference(&mut store, c, config)?.best_cost))
                .collect::<Result<Vec<_>, HarnessError>>()?;
            store.save(cache)?;
            Ok(costs)
        }
    }
}

struct Job {
    cell: usize,
    case: usize,
    backend: usize,
    knowledge: Knowledge,
    run: usize,
}

fn run_job(
    plan: &ExperimentPlan,
    job: &Job,
    case: &DsmCase,
    reference_cost: f64,
    cell: &str,
    trace_dir: &Path,
) -> Result<(PathBuf, TraceFile), HarnessError> {
    let spec = &plan.backends[job.backend];
    let seed = plan.run_seed(job.case, job.backend, job.knowledge, job.run);
    let backend = spec.build(case, derive_seed(&[seed, tag::BACKEND]))?;
    let mut config = plan.optimizer_defaults.clone();
    config.master_seed = seed;
    config.prompt_spec.knowledge = job.knowledge.enabled();
    let trace = run(case, &config, backend.as_ref())?;
    let file = TraceFile {
        cell: cell.to_owned(),
        case: case.name().to_owned(),
        backend: spec.label(),
        knowledge: job.knowledge.enabled(),
        run: job.run,
        seed,
        reference_cost,
        best_ce: clustering_efficiency(case, &trace.best.partition)?,
        trace,
    };
    let path = trace_dir.join(format!("{}__run{:02}.json", file_stem(cell), job.run));
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(&path, text + "\n").map_err(|err| HarnessError::io(&path, err))?;
    Ok((path, file))
}

fn thread_pool(workers: Option<usize>) -> Result<rayon::ThreadPool, HarnessError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        builder = builder.num_threads(w);
    }
    builder
        .build()
        .map_err(|e| HarnessError::Plan(format!("cannot start worker pool: {e}")))
}

fn execute(
    plan: &ExperimentPlan,
    cases: &[DsmCase],
    references: &[f64],
    out_dir: &Path,
) -> Result<ExperimentOutput, HarnessError> {
    let trace_dir = out_dir.join("traces");
    std::fs::create_dir_all(&trace_dir).map_err(|err| HarnessError::io(&trace_dir, err))?;

    let mut cells = Vec::new();
    let mut jobs = Vec::new();
    for (ci, case) in cases.iter().enumerate() {
        for (bi, backend) in plan.backends.iter().enumerate() {
            for &k in &plan.knowledge_conditions {
                let cell = cells.len();
                cells.push(cell_id(case.name(), &backend.label(), k.enabled()));
                jobs.extend((0..plan.runs_per_condition).map(|run| Job {
                    cell,
                    case: ci,
                    backend: bi,
                    knowledge: k,
                    run,
                }));
            }
        }
    }

    let results: Vec<Result<(PathBuf, TraceFile), HarnessError>> = thread_pool(plan.workers)?.install(|| {
        jobs.par_iter()
            .map(|job| {
                run_job(
                    plan,
                    job,
                    &cases[job.case],
                    references[job.case],
                    &cells[job.cell],
                    &trace_dir,
                )
            })
            .collect()
    });

    let mut per_cell: Vec<Vec<(PathBuf, TraceFile)>> = vec![Vec::new(); cells.len()];
    for (job, result) in jobs.iter().zip(results) {
        match result {
            Ok(r) => per_cell[job.cell].push(r),
            Err(e) => log::error!("{} run {} failed: {e}", cells[job.cell], job.run),
        }
    }

    let mut summaries = Vec::new();
    let mut tables = Vec::new();
    for (i, files) in per_cell.iter().enumerate() {
        if files.is_empty() {
            let job = jobs.iter().find(|j| j.cell == i).expect("every cell has jobs");
            summaries.push(ConditionSummary {
                cell: cells[i].clone(),
                case: cases[job.case].name().to_owned(),
                backend: plan.backends[job.backend].label(),
                knowledge: job.knowledge.enabled(),
                total_cost: None,
                ce: None,
                final_gap: None,
                reference_cost: references[job.case],
                traces: Vec::new(),
                runs_completed: 0,
            });
            continue;
        }
        let (summary, table) = summarize_cell(files)?;
        summaries.push(summary);
        tables.extend(table);
    }
    Ok(ExperimentOutput { summaries, tables })
}

/// Runs every cell of `plan`, writing traces under `out_dir/traces` and
/// caching computed SA references in `out_dir/sa_references.json`.
///
/// A failing run is logged and left out of its cell; plan, case and
/// reference problems abort before any run starts.
pub fn run_experiment(plan: &ExperimentPlan, out_dir: &Path) -> Result<ExperimentOutput, HarnessError> {
    plan.validate()?;
    let cases = plan.load_cases()?;
    std::fs::create_dir_all(out_dir).map_err(|err| HarnessError::io(out_dir, err))?;
    let references = resolve_references(plan, &cases, &out_dir.join("sa_references.json"))?;
    execute(plan, &cases, &references, out_dir)
}

/// Re-summarizes a directory of trace files.
pub fn summarize_traces(dir: &Path) -> Result<ExperimentOutput, HarnessError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|err| HarnessError::io(dir, err))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut groups: Vec<Vec<(PathBuf, TraceFile)>> = Vec::new();
    for path in paths {
        let file = TraceFile::load(&path)?;
        match groups.iter_mut().find(|g| g[0].1.cell == file.cell) {
            Some(g) => g.push((path, file)),
            None => groups.push(vec![(path, file)]),
        }
    }
    if groups.is_empty() {
        return Err(HarnessError::Report(format!("no trace files in {}", dir.display())));
    }
    groups.sort_by(|a, b| a[0].1.cell.cmp(&b[0].1.cell));
    let mut summaries = Vec::new();
    let mut tables = Vec::new();
    for g in &mut groups {
        g.sort_by_key(|(_, f)| f.run);
        let (s, t) = summarize_cell(g)?;
        summaries.push(s);
        tables.extend(t);
    }
    Ok(ExperimentOutput { summaries, tables })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationDimension {
    PoolDesign,
    ObjectiveFormula,
    InputFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub prompt_spec: PromptSpec,
}

/// The prompt variants compared along `dimension`, derived from `base`.
pub fn ablation_arms(dimension: AblationDimension, base: &PromptSpec) -> Vec<AblationArm> {
    let arm = |name: String, f: &dyn Fn(&mut PromptSpec)| {
        let mut spec = base.clone();
        f(&mut spec);
        AblationArm { name, prompt_spec: spec }
    };
    match dimension {
        AblationDimension::PoolDesign => [(5, 5), (5, 0), (0, 5)]
            .into_iter()
            .map(|(p, q)| {
                arm(format!("p{p}_q{q}"), &|s| {
                    s.pool_best_p = p;
                    s.pool_random_q = q;
                })
            })
            .collect(),
        AblationDimension::ObjectiveFormula => [true, false]
            .into_iter()
            .map(|on| {
                let name = if on { "formula_on" } else { "formula_off" };
                arm(name.to_owned(), &|s| s.include_formula = on)
            })
            .collect(),
        AblationDimension::InputFormat => InputFormat::ALL
            .into_iter()
            .map(|f| arm(f.as_str().to_owned(), &|s| s.input_format = f))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub dimension: AblationDimension,
    #[serde(flatten)]
    pub base: ExperimentPlan,
}

impl AblationPlan {
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let mut plan: AblationPlan = read_json(path)?;
        plan.base.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.base.validate()?;
        if self.base.cases.len() != 1 || self.base.backends.len() != 1 || self.base.knowledge_conditions.len() != 1 {
            return Err(HarnessError::Plan(
                "an ablation uses exactly one case, one backend and one knowledge condition".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutput {
    pub arms: Vec<(AblationArm, ConditionSummary)>,
    pub tables: Vec<ConvergenceTable>,
}

/// Runs the base plan once per arm, each arm under `out_dir/<arm>`. Arms
/// share seeds, so they differ only in the prompt.
pub fn run_ablation(plan: &AblationPlan, out_dir: &Path) -> Result<AblationOutput, HarnessError> {
    plan.validate()?;
    let cases = plan.base.load_cases()?;
    std::fs::create_dir_all(out_dir).map_err(|err| HarnessError::io(out_dir, err))?;
    let references = resolve_references(&plan.base, &cases, &out_dir.join("sa_references.json"))?;
    let mut arms = Vec::new();
    let mut tables = Vec::new();
    for arm in ablation_arms(plan.dimension, &plan.base.optimizer_defaults.prompt_spec) {
        let mut base = plan.base.clone();
        base.optimizer_defaults.prompt_spec = arm.prompt_spec.clone();
        let out = execute(&base, &cases, &references, &out_dir.join(&arm.name))?;
        let mut summary = out.summaries.into_iter().next().expect("one cell");
        summary.cell = format!("{}__{}", summary.cell, arm.name);
        for mut t in out.tables {
            t.cell = format!("{}__{}", t.cell, arm.name);
            tables.push(t);
        }
        arms.push((arm, summary));
    }
    Ok(AblationOutput { arms, tables })
}
