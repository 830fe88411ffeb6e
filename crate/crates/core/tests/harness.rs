use std::fs;
use std::path::{Path, PathBuf};

use dsmco_core::harness::{
    emit_report, run_experiment, summarize_traces, BackendSpec, ExperimentPlan, HarnessError, Knowledge, MockSpec,
    ReferenceEntry, ReferenceStore, SaReferenceSource, TraceFile,
};
use dsmco_core::optimizer::OptimizerConfig;
use dsmco_core::reference::{brute_force_optimum, SaConfig};
use dsmco_core::{generate_random_case, CostParams, DsmCase};

fn write_case(dir: &Path, case: &DsmCase) -> PathBuf {
    let path = dir.join(format!("{}.json", case.name()));
    fs::write(&path, case.to_json_pretty()).unwrap();
    path
}

fn small_sa() -> SaReferenceSource {
    SaReferenceSource::ComputeNow(SaConfig {
        restarts: 16,
        ..SaConfig::default()
    })
}

fn plan(dir: &Path, case: &DsmCase, backends: Vec<BackendSpec>) -> ExperimentPlan {
    ExperimentPlan {
        cases: vec![write_case(dir, case)],
        backends,
        runs_per_condition: 10,
        optimizer_defaults: OptimizerConfig {
            iterations: 30,
            ..OptimizerConfig::default()
        },
        sa_reference_source: small_sa(),
        master_seed: 5,
        ..ExperimentPlan::default()
    }
}

fn trace_files(out: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(out.join("traces"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    v.sort();
    v
}

#[test]
fn cell_arithmetic_and_report_files() {
    let work = tempfile::tempdir().unwrap();
    let case = generate_random_case(7, 0.35, (1, 9), 11).unwrap();
    let plan = plan(work.path(), &case, vec![BackendSpec::mock(MockSpec::RandomMove)]);
    let out_dir = work.path().join("out");
    let out = run_experiment(&plan, &out_dir).unwrap();
    assert_eq!(trace_files(&out_dir).len(), 20);
    assert_eq!(out.summaries.len(), 2);
    assert_eq!(out.tables.len(), 2);
    assert!(out.summaries.iter().all(|s| s.runs_completed == 10 && s.traces.len() == 10));
    assert_eq!(
        out.summaries.iter().map(|s| s.knowledge).collect::<Vec<_>>(),
        [false, true]
    );

    let written = emit_report(&out.summaries, &out.tables, &out_dir).unwrap();
    assert_eq!(written.len(), 5);
    for t in &out.tables {
        let stem = dsmco_core::harness::file_stem(&t.cell);
        let csv = fs::read_to_string(out_dir.join(format!("convergence_{stem}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 1 + 31);
        let svg = fs::read_to_string(out_dir.join(format!("convergence_{stem}.svg"))).unwrap();
        roxmltree::Document::parse(&svg).unwrap();
    }
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.starts_with(
        "case,backend,k,cost_mean,cost_std,ce_mean,ce_std,gap_mean,gap_std,reference,runs_completed\n"
    ));

    // every run's final gap, recomputed from its trace, agrees with the table and summary
    for (s, t) in out.summaries.iter().zip(&out.tables) {
        let gaps: Vec<f64> = s
            .traces
            .iter()
            .map(|p| {
                let f = TraceFile::load(p).unwrap();
                (f.trace.best.total_cost - f.reference_cost) / f.reference_cost * 100.0
            })
            .collect();
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        let g = s.final_gap.as_ref().unwrap();
        assert!((g.mean - mean).abs() < 1e-9);
        assert!((t.rows.last().unwrap().gap.mean - g.mean).abs() < 1e-9);
    }

    let again = summarize_traces(&out_dir.join("traces")).unwrap();
    let report_dir = work.path().join("report");
    emit_report(&again.summaries, &again.tables, &report_dir).unwrap();
    assert_eq!(
        fs::read(report_dir.join("summary.csv")).unwrap(),
        fs::read(out_dir.join("summary.csv")).unwrap()
    );
}

#[test]
fn identical_plans_give_identical_summaries() {
    let work = tempfile::tempdir().unwrap();
    let case = generate_random_case(6, 0.4, (1, 9), 3).unwrap();
    let mut p = plan(work.path(), &case, vec![BackendSpec::mock(MockSpec::RandomMove)]);
    p.runs_per_condition = 4;
    let a = run_experiment(&p, &work.path().join("a")).unwrap();
    let b = run_experiment(&p, &work.path().join("b")).unwrap();
    for (x, y) in a.summaries.iter().zip(&b.summaries) {
        assert_eq!(x.total_cost, y.total_cost);
        assert_eq!(x.ce, y.ce);
        assert_eq!(x.final_gap, y.final_gap);
    }
    assert_eq!(a.tables, b.tables);
    p.master_seed += 1;
    let c = run_experiment(&p, &work.path().join("c")).unwrap();
    assert_ne!(a.tables, c.tables);
}

#[test]
fn constant_cells_have_zero_spread() {
    let work = tempfile::tempdir().unwrap();
    let case = generate_random_case(6, 0.4, (1, 9), 21).unwrap();
    let optimum = brute_force_optimum(&case, CostParams::default(), 12).unwrap().best.total_cost;
    let refs = work.path().join("refs.json");
    ReferenceStore {
        entries: vec![ReferenceEntry {
            case_name: case.name().to_owned(),
            case_hash: String::new(),
            sa_config_hash: None,
            best_cost: optimum,
            best_partition: None,
            restarts: None,
        }],
    }
    .save(&refs)
    .unwrap();
    let mut p = plan(
        work.path(),
        &case,
        vec![
            BackendSpec::mock(MockSpec::OracleOnceThenRandom),
            BackendSpec::mock(MockSpec::Echo { text: "no idea".into() }),
        ],
    );
    p.knowledge_conditions = vec![Knowledge::K0];
    p.sa_reference_source = SaReferenceSource::LoadFile(refs);
    let out = run_experiment(&p, &work.path().join("out")).unwrap();

    let oracle = &out.summaries[0];
    let gap = oracle.final_gap.as_ref().unwrap();
    assert_eq!(oracle.runs_completed, 10);
    assert!(gap.mean.abs() < 1e-9 && gap.std < 1e-9, "{gap:?}");
    let matching = oracle
        .traces
        .iter()
        .filter(|p| TraceFile::load(p).unwrap().final_gap().unwrap().abs() < 1e-9)
        .count();
    assert_eq!(matching, 10);

    let echo = &out.summaries[1];
    let cost = echo.total_cost.as_ref().unwrap();
    assert_eq!(cost.std, 0.0);
    assert_eq!(cost.mean, case.n() as f64 * case.total_weight());
    emit_report(&out.summaries, &out.tables, &work.path().join("out")).unwrap();
    let summary = fs::read_to_string(work.path().join("out/summary.csv")).unwrap();
    let echo_row: Vec<&str> = summary.lines().nth(2).unwrap().split(',').collect();
    assert_eq!(echo_row[1], "mock-echo");
    assert_eq!(echo_row[4], "0.0");
    assert_eq!(echo_row[8], "0.0");
}

#[test]
fn failing_backend_does_not_abort_siblings() {
    let work = tempfile::tempdir().unwrap();
    let case = generate_random_case(6, 0.4, (1, 9), 8).unwrap();
    let mut p = plan(
        work.path(),
        &case,
        vec![
            BackendSpec::mock(MockSpec::Replay {
                script: Vec::new(),
                script_file: None,
            }),
            BackendSpec::Mock {
                name: Some("missing-script".into()),
                mock: MockSpec::Replay {
                    script: Vec::new(),
                    script_file: Some(work.path().join("nope.json")),
                },
            },
            BackendSpec::mock(MockSpec::RandomMove),
        ],
    );
    p.knowledge_conditions = vec![Knowledge::K0];
    p.runs_per_condition = 3;
    let out_dir = work.path().join("out");
    let out = run_experiment(&p, &out_dir).unwrap();
    let completed: Vec<usize> = out.summaries.iter().map(|s| s.runs_completed).collect();
    assert_eq!(completed, [0, 0, 3]);
    assert!(out.summaries[0].total_cost.is_none());
    assert_eq!(out.summaries[0].traces.len(), 3);
    assert!(out.summaries[1].traces.is_empty());
    assert_eq!(out.tables.len(), 1);
    emit_report(&out.summaries, &out.tables, &out_dir).unwrap();
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let row: Vec<&str> = summary.lines().nth(1).unwrap().split(',').collect();
    assert!(row[3..9].iter().all(|f| f.is_empty()));
    assert_eq!(row[10], "0");
    assert!(summary.lines().nth(3).unwrap().ends_with(",3"));
}

#[test]
fn input_problems_abort_before_any_run() {
    let work = tempfile::tempdir().unwrap();
    let case = generate_random_case(6, 0.4, (1, 9), 8).unwrap();
    let mut p = plan(work.path(), &case, vec![BackendSpec::mock(MockSpec::RandomMove)]);
    p.cases.push(work.path().join("missing.json"));
    let out_dir = work.path().join("out1");
    let err = run_experiment(&p, &out_dir).unwrap_err();
    assert!(matches!(err, HarnessError::Case { .. }));
    assert!(err.is_config());
    assert!(!out_dir.exists());

    let refs = work.path().join("refs.json");
    ReferenceStore::default().save(&refs).unwrap();
    p.cases.pop();
    p.sa_reference_source = SaReferenceSource::LoadFile(refs);
    let out_dir = work.path().join("out2");
    let err = run_experiment(&p, &out_dir).unwrap_err();
    assert!(matches!(err, HarnessError::MissingReference(ref name) if name == case.name()));
    assert!(!out_dir.join("traces").exists());
}

#[test]
fn sa_references_are_cached_per_case_and_config() {
    let work = tempfile::tempdir().unwrap();
    let case = generate_random_case(6, 0.4, (1, 9), 8).unwrap();
    let mut p = plan(work.path(), &case, vec![BackendSpec::mock(MockSpec::RandomMove)]);
    p.runs_per_condition = 1;
    p.optimizer_defaults.iterations = 2;
    let out_dir = work.path().join("out");
    let first = run_experiment(&p, &out_dir).unwrap();
    let cache = out_dir.join("sa_references.json");
    let mut store = ReferenceStore::load(&cache).unwrap();
    assert_eq!(store.entries.len(), 1);
    store.entries[0].best_cost = 1234.5;
    store.save(&cache).unwrap();
    let second = run_experiment(&p, &out_dir).unwrap();
    assert_ne!(first.summaries[0].reference_cost, 1234.5);
    assert_eq!(second.summaries[0].reference_cost, 1234.5);
}

#[test]
fn plan_files_resolve_relative_paths() {
    let work = tempfile::tempdir().unwrap();
    let case = generate_random_case(5, 0.4, (1, 9), 1).unwrap();
    fs::create_dir(work.path().join("cases")).unwrap();
    write_case(&work.path().join("cases"), &case);
    let plan_path = work.path().join("plan.json");
    fs::write(
        &plan_path,
        format!(
            r#"{{"cases": ["cases/{}.json"], "backends": [{{"kind": "mock", "mode": "random_move"}}],
               "knowledge_conditions": ["k0"], "runs_per_condition": 2,
               "optimizer_defaults": {{"iterations": 3}},
               "sa_reference_source": {{"compute_now": {{"restarts": 4}}}}}}"#,
            case.name()
        ),
    )
    .unwrap();
    let p = ExperimentPlan::from_file(&plan_path).unwrap();
    assert_eq!(p.cases[0], work.path().join("cases").join(format!("{}.json", case.name())));
    let out = run_experiment(&p, &work.path().join("out")).unwrap();
    assert_eq!(out.tables[0].rows.len(), 4);
}
