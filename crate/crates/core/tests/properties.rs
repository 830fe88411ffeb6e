use proptest::prelude::*;

use dsmco_core::gateway::{MockBackend, MockMode};
use dsmco_core::optimizer::{parse_response, run, update_pool, OptimizerConfig};
use dsmco_core::prompting::{render_prompt, InputFormat, LabelMap, PromptSpec};
use dsmco_core::reference::{bell_number, brute_force_optimum, sa_reference, sa_single_run_traced, SaConfig};
use dsmco_core::{
    aggregate, clustering_efficiency, gap_percent, generate_random_case, random_partition, total_cost,
    CostParams, DsmCase, Partition, SolutionRecord,
};

fn case_strategy(n_lo: usize, n_hi: usize) -> impl Strategy<Value = DsmCase> {
    (n_lo..=n_hi, 0.35f64..0.7, any::<u64>()).prop_map(|(n, d, s)| generate_random_case(n, d, (1, 9), s).unwrap())
}

fn case_and_labels(n_lo: usize, n_hi: usize) -> impl Strategy<Value = (DsmCase, Vec<usize>)> {
    case_strategy(n_lo, n_hi).prop_flat_map(|case| {
        let n = case.n();
        (Just(case), prop::collection::vec(0..n, n))
    })
}

fn is_canonical(p: &Partition) -> bool {
    let mut next = 1;
    for &m in p.assignment() {
        if m > next {
            return false;
        }
        if m == next {
            next += 1;
        }
    }
    next - 1 == p.module_count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn canonical_form_is_stable((_case, labels) in case_and_labels(3, 12)) {
        let p = Partition::from_labels(&labels);
        prop_assert!(is_canonical(&p));
        prop_assert_eq!(Partition::from_labels(p.assignment()), p.clone());
        let shifted: Vec<usize> = labels.iter().map(|l| l * 7 + 3).collect();
        prop_assert_eq!(Partition::from_labels(&shifted), p);
    }

    #[test]
    fn random_partitions_are_feasible(case in case_strategy(3, 15), seed in any::<u64>()) {
        let p = random_partition(&case, seed);
        prop_assert_eq!(p.len(), case.n());
        prop_assert!(p.module_count() >= 2);
        prop_assert!(is_canonical(&p));
    }

    #[test]
    fn cost_respects_bounds((case, labels) in case_and_labels(3, 12)) {
        let p = Partition::from_labels(&labels);
        let c = total_cost(&case, &p, CostParams::default()).unwrap();
        let w = case.total_weight();
        let n = case.n() as f64;
        // each unit of weight costs between 1/n (intra, singleton-sized) and n (cross)
        prop_assert!(c >= w / n - 1e-9);
        prop_assert!(c <= n * w + 1e-9);
        let ce = clustering_efficiency(&case, &p).unwrap();
        prop_assert!((0.0..=1.0).contains(&ce));
    }

    #[test]
    fn gap_is_zero_at_reference_and_signed(r in 0.1f64..1e6, c in 0.0f64..1e6) {
        prop_assert_eq!(gap_percent(r, r).unwrap(), 0.0);
        let g = gap_percent(c, r).unwrap();
        prop_assert_eq!(g > 0.0, c > r);
    }

    #[test]
    fn aggregate_is_ordered(values in prop::collection::vec(-1e6f64..1e6, 1..30)) {
        let a = aggregate(&values).unwrap();
        prop_assert!(a.min <= a.mean && a.mean <= a.max);
        prop_assert!(a.std >= 0.0);
        prop_assert_eq!(a.count, values.len());
        let constant = aggregate(&vec![values[0]; values.len()]).unwrap();
        prop_assert_eq!(constant.std, 0.0);
        prop_assert_eq!(constant.mean, values[0]);
    }

    #[test]
    fn labels_roundtrip_through_parser((case, labels) in case_and_labels(3, 12), seed in any::<u64>()) {
        let p = Partition::from_labels(&labels);
        prop_assume!(p.module_count() >= 2);
        let map = LabelMap::shuffled(case.n(), seed);
        let body: Vec<String> = (0..case.n())
            .rev()
            .map(|pos| format!("\"{}\": \"Module {}\"", map.label(pos), p.module_of(pos)))
            .collect();
        let text = format!("Proposed grouping:\n{{{}}}\nDone.", body.join(", "));
        prop_assert_eq!(parse_response(&text, &map, &case).unwrap(), p);
    }

    #[test]
    fn prompts_list_every_element_once(case in case_strategy(3, 12), seed in any::<u64>(), f in 0usize..4) {
        let format = InputFormat::ALL[f];
        let init = SolutionRecord {
            partition: Partition::singleton(case.n()),
            total_cost: total_cost(&case, &Partition::singleton(case.n()), CostParams::default()).unwrap(),
            iteration_found: 0,
        };
        let spec = PromptSpec { input_format: format, shuffle_seed: seed, ..PromptSpec::default() };
        let prompt = render_prompt(&case, &spec, &[], &[init], 1).unwrap();
        let listing = prompt
            .user_message
            .lines()
            .find_map(|l| l.strip_prefix("Elements: "))
            .unwrap();
        let mut shown: Vec<&str> = listing.split(", ").collect();
        prop_assert_eq!(shown.len(), case.n());
        shown.sort_unstable();
        shown.dedup();
        prop_assert_eq!(shown.len(), case.n());
        for l in &shown {
            prop_assert!(prompt.label_map.position(l).is_some());
        }
        if format == InputFormat::DirectedEdgeList {
            let edges = prompt.user_message.lines().filter(|l| l.starts_with('N') && l.contains(" --> ")).count();
            prop_assert_eq!(edges, case.edge_count());
        }
    }

    #[test]
    fn pool_is_bounded_and_keeps_best(
        costs in prop::collection::vec((0u32..40, 0usize..6), 1..40),
        p in 0usize..7,
        q in 0usize..7,
        seed in any::<u64>(),
    ) {
        let history: Vec<SolutionRecord> = costs
            .iter()
            .enumerate()
            .map(|(i, &(c, k))| SolutionRecord {
                partition: Partition::from_labels(&[0, 1, k % 3, k / 3]),
                total_cost: f64::from(c),
                iteration_found: i,
            })
            .collect();
        let pool = update_pool(&history, p, q, seed);
        prop_assert!(pool.len() <= p + q);
        prop_assert!(pool.windows(2).all(|w| w[0].total_cost <= w[1].total_cost));
        if p >= 1 {
            let best = history.iter().map(|r| r.total_cost).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(pool[0].total_cost, best);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sa_never_beats_exhaustive_search(case in case_strategy(3, 7), seed in any::<u64>()) {
        let optimum = brute_force_optimum(&case, CostParams::default(), 12).unwrap();
        prop_assert_eq!(optimum.visited, bell_number(case.n()) - 1);
        let config = SaConfig { restarts: 8, rng_seed: seed, ..SaConfig::default() };
        let sa = sa_reference(&case, &config).unwrap();
        prop_assert!(sa.best.total_cost >= optimum.best.total_cost - 1e-9);
        prop_assert!(sa.best.partition.module_count() >= 2);
        let (_, trace) = sa_single_run_traced(&case, &config, seed).unwrap();
        prop_assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn optimizer_budget_and_monotonicity(case in case_strategy(3, 9), seed in any::<u64>(), iters in 1usize..15) {
        let config = OptimizerConfig { iterations: iters, master_seed: seed, ..OptimizerConfig::default() };
        let trace = run(&case, &config, &MockBackend::new(MockMode::RandomMove, seed)).unwrap();
        prop_assert_eq!(trace.records.len(), iters);
        prop_assert!(trace.best_curve().windows(2).all(|w| w[1] <= w[0]));
        let best_valid = trace
            .records
            .iter()
            .filter_map(|r| r.total_cost)
            .fold(trace.initial_cost, f64::min);
        prop_assert_eq!(trace.best.total_cost, best_valid);
        for r in &trace.records {
            prop_assert_eq!(r.outcome.is_valid(), r.partition.is_some() && r.total_cost.is_some());
        }
    }
}
