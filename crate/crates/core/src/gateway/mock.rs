//! Deterministic offline backends.
//!
//! The heuristic mocks read the prompt the way a model would: `RandomMove`
//! takes the best solution listed in the solution base and reassigns one
//! node; `OracleOnceThenRandom` rebuilds the DSM from the prompt's first block,
//! solves it exhaustively on the first call, then behaves like `RandomMove`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use regex::Regex;
use serde_json::{Map, Value};

use super::{ChatBackend, ChatRequest, ChatResponse, GatewayError};
use crate::metrics::CostParams;
use crate::model::{CaseDocument, DsmCase, DsmEdge, DsmNode, DsmType, NodeId};
use crate::reference::{brute_force_optimum, DEFAULT_MAX_N};
use crate::seeds::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub enum MockMode {
    /// Always answers with the same text.
    Echo(String),
    RandomMove,
    OracleOnceThenRandom,
    /// Scripted answers, in order.
    Replay(Vec<String>),
}

impl MockMode {
    /// Loads a replay script: a JSON array of strings.
    pub fn replay_file(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| GatewayError::Config(format!("cannot read replay file: {e}")))?;
        let script: Vec<String> = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Config(format!("replay file must be a JSON array of strings: {e}")))?;
        Ok(MockMode::Replay(script))
    }

    pub fn label(&self) -> &'static str {
        match self {
            MockMode::Echo(_) => "echo",
            MockMode::RandomMove => "random_move",
            MockMode::OracleOnceThenRandom => "oracle_once_then_random",
            MockMode::Replay(_) => "replay",
        }
    }
}

#[derive(Debug)]
pub struct MockBackend {
    name: String,
    mode: MockMode,
    seed: u64,
    calls: AtomicUsize,
}

/// Builds a mock for `case`. The oracle mode needs a case small enough for
/// exhaustive search.
pub fn mock_heuristic_backend(case: &DsmCase, mode: MockMode, rng_seed: u64) -> Result<MockBackend, GatewayError> {
    if mode == MockMode::OracleOnceThenRandom && case.n() > DEFAULT_MAX_N {
        return Err(GatewayError::Config(format!(
            "oracle mock needs n <= {DEFAULT_MAX_N}, case has {}",
            case.n()
        )));
    }
    Ok(MockBackend::new(mode, rng_seed))
}

impl MockBackend {
    pub fn new(mode: MockMode, seed: u64) -> Self {
        MockBackend {
            name: format!("mock-{}", mode.label()),
            mode,
            seed,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn answer(&self, prompt: &str, call: usize) -> Result<String, GatewayError> {
        let mut rng = rng_for(&[self.seed, call as u64]);
        match &self.mode {
            MockMode::Echo(text) => Ok(text.clone()),
            MockMode::Replay(script) => script
                .get(call)
                .cloned()
                .ok_or(GatewayError::ReplayExhausted { calls: call }),
            MockMode::OracleOnceThenRandom if call == 0 => {
                Ok(oracle_answer(prompt).unwrap_or_else(|| random_move_answer(prompt, &mut rng)))
            }
            MockMode::RandomMove | MockMode::OracleOnceThenRandom => Ok(random_move_answer(prompt, &mut rng)),
        }
    }
}

impl ChatBackend for MockBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn model_name(&self) -> &str {
        self.mode.label()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let started = Instant::now();
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        let text = self.answer(&request.user_message, call)?;
        Ok(ChatResponse {
            text,
            latency: started.elapsed().max(Duration::from_nanos(1)),
            token_usage: None,
            attempts: 1,
        })
    }
}

/// `(label, module)` pairs of the first listed solution.
fn best_solution(prompt: &str) -> Option<Vec<(String, String)>> {
    let line = prompt.lines().find_map(|l| l.strip_prefix("Solution 1: "))?;
    let body = line.split(" | TotalCost").next()?;
    body.split(", ")
        .map(|item| {
            let (label, module) = item.split_once(": ")?;
            Some((label.trim().to_owned(), module.trim().to_owned()))
        })
        .collect()
}

fn to_json(assignment: &[(String, String)]) -> String {
    let map: Map<String, Value> = assignment
        .iter()
        .map(|(l, m)| (l.clone(), Value::String(m.clone())))
        .collect();
    Value::Object(map).to_string()
}

/// Reassigns one node of the best listed solution to another existing module
/// or a fresh one, choosing uniformly among moves that change the grouping
/// and keep at least two modules.
fn random_move_answer<R: Rng>(prompt: &str, rng: &mut R) -> String {
    let Some(mut solution) = best_solution(prompt) else {
        return "I could not find a solution to improve.".to_owned();
    };
    let mut modules: BTreeMap<String, usize> = BTreeMap::new();
    for (_, m) in &solution {
        *modules.entry(m.clone()).or_default() += 1;
    }
    let fresh = (1..)
        .map(|i| format!("M{i}"))
        .find(|m| !modules.contains_key(m))
        .expect("unbounded");
    let k = modules.len();
    let mut moves = Vec::new();
    for (i, (_, from)) in solution.iter().enumerate() {
        let size = modules[from];
        for to in modules.keys().filter(|m| *m != from) {
            if !(size == 1 && k == 2) {
                moves.push((i, to.clone()));
            }
        }
        if size > 1 {
            moves.push((i, fresh.clone()));
        }
    }
    if let Some((i, to)) = (!moves.is_empty()).then(|| moves[rng.gen_range(0..moves.len())].clone()) {
        solution[i].1 = to;
    }
    to_json(&solution)
}

fn edge_patterns() -> &'static [Regex; 3] {
    static PATTERNS: OnceLock<[Regex; 3]> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        [
            Regex::new(r"^(\S+) --> (\S+) \(weight: ([^)]+)\)$").unwrap(),
            Regex::new(r"^(\S+) -- (\S+) \(weight: ([^)]+)\)$").unwrap(),
            Regex::new(r"^(\S+)(?: \(.*\))? receives input from (\S+)(?: \(.*\))? with strength (\S+)\.$").unwrap(),
        ]
    })
}

/// Rebuilds the DSM in display-label space from the prompt's first block.
/// Undirected pairs are kept once; TotalCost only depends on pair weights.
fn prompt_graph(prompt: &str) -> Option<DsmCase> {
    let labels: Vec<String> = best_solution(prompt)?.into_iter().map(|(l, _)| l).collect();
    let block1 = prompt.split("### Block 2").next()?;
    let mut edges: BTreeMap<(String, String), f64> = BTreeMap::new();
    let lines: Vec<&str> = block1.lines().collect();
    if let Some(at) = lines.iter().position(|l| l.starts_with("Dependencies as an adjacency matrix")) {
        let header: Vec<&str> = lines.get(at + 1)?.split_whitespace().collect();
        for row in lines.iter().skip(at + 2).take(header.len()) {
            let mut cells = row.split_whitespace();
            let target = cells.next()?;
            for (source, cell) in header.iter().zip(cells) {
                let w: f64 = cell.parse().ok()?;
                if w > 0.0 {
                    edges.insert((target.to_owned(), (*source).to_owned()), w);
                }
            }
        }
    } else {
        for line in &lines {
            for re in edge_patterns() {
                if let Some(c) = re.captures(line) {
                    let w: f64 = c[3].parse().ok()?;
                    *edges.entry((c[1].to_owned(), c[2].to_owned())).or_default() += w;
                    break;
                }
            }
        }
    }
    let doc = CaseDocument {
        name: "prompt".into(),
        dsm_type: DsmType::Component,
        domain: String::new(),
        nodes: labels
            .iter()
            .map(|l| DsmNode {
                id: NodeId::new(l.clone()),
                name: String::new(),
                description: String::new(),
            })
            .collect(),
        edges: edges
            .into_iter()
            .map(|((t, s), weight)| DsmEdge {
                target: NodeId::new(t),
                source: NodeId::new(s),
                weight,
            })
            .collect(),
    };
    DsmCase::from_document(doc).ok()
}

fn oracle_answer(prompt: &str) -> Option<String> {
    let graph = prompt_graph(prompt)?;
    let best = brute_force_optimum(&graph, CostParams::default(), DEFAULT_MAX_N).ok()?;
    let assignment: Vec<(String, String)> = best
        .best
        .partition
        .named(&graph)
        .map(|(id, m)| (id.to_string(), format!("M{m}")))
        .collect();
    Some(to_json(&assignment))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_random_case, singleton_partition, SolutionRecord};
    use crate::prompting::{render_prompt, InputFormat, PromptSpec};
    use crate::metrics::total_cost;

    fn prompt_for(case: &DsmCase, format: InputFormat) -> String {
        let init = SolutionRecord {
            partition: singleton_partition(case),
            total_cost: total_cost(case, &singleton_partition(case), CostParams::default()).unwrap(),
            iteration_found: 0,
        };
        let spec = PromptSpec {
            input_format: format,
            ..PromptSpec::default()
        };
        render_prompt(case, &spec, &[init.clone()], &[init], 1).unwrap().user_message
    }

    #[test]
    fn random_move_changes_exactly_one_node() {
        let case = generate_random_case(6, 0.4, (1, 9), 3).unwrap();
        let prompt = prompt_for(&case, InputFormat::DirectedEdgeList);
        let before: BTreeMap<String, String> = best_solution(&prompt).unwrap().into_iter().collect();
        let mock = MockBackend::new(MockMode::RandomMove, 9);
        let reply = mock.complete(&ChatRequest::new("s", prompt)).unwrap().text;
        let after: BTreeMap<String, String> = serde_json::from_str(&reply).unwrap();
        assert_eq!(before.len(), after.len());
        let changed = before.iter().filter(|(k, v)| after[*k] != **v).count();
        assert_eq!(changed, 1);
    }

    #[test]
    fn prompt_graph_recovers_every_format() {
        let case = generate_random_case(6, 0.4, (1, 9), 5).unwrap();
        for format in InputFormat::ALL {
            let graph = prompt_graph(&prompt_for(&case, format)).unwrap();
            assert_eq!(graph.n(), case.n());
            assert_eq!(graph.total_weight(), case.total_weight(), "{format}");
            let a = brute_force_optimum(&graph, CostParams::default(), 12).unwrap();
            let b = brute_force_optimum(&case, CostParams::default(), 12).unwrap();
            assert!((a.best.total_cost - b.best.total_cost).abs() < 1e-9, "{format}");
        }
    }

    #[test]
    fn replay_runs_out() {
        let mock = MockBackend::new(MockMode::Replay(vec!["a".into(), "b".into(), "c".into()]), 0);
        let req = ChatRequest::new("s", "u");
        for want in ["a", "b", "c"] {
            assert_eq!(mock.complete(&req).unwrap().text, want);
        }
        assert_eq!(mock.complete(&req), Err(GatewayError::ReplayExhausted { calls: 3 }));
    }

    #[test]
    fn echo_and_determinism() {
        let echo = MockBackend::new(MockMode::Echo("{}".into()), 0);
        assert_eq!(echo.complete(&ChatRequest::new("s", "u")).unwrap().text, "{}");
        let case = generate_random_case(7, 0.4, (1, 9), 1).unwrap();
        let prompt = prompt_for(&case, InputFormat::DirectedEdgeList);
        let run = || {
            let m = MockBackend::new(MockMode::RandomMove, 4);
            (0..5)
                .map(|_| m.complete(&ChatRequest::new("s", prompt.clone())).unwrap().text)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn oracle_mode_size_guard() {
        let big = generate_random_case(13, 0.2, (1, 3), 0).unwrap();
        assert!(mock_heuristic_backend(&big, MockMode::OracleOnceThenRandom, 0).is_err());
        assert!(mock_heuristic_backend(&big, MockMode::RandomMove, 0).is_ok());
    }
}
