//! Prompt rendering for the LLM optimization loop.
//!
//! A prompt is a fixed system message plus a user message made of three
//! blocks: the DSM description, the solution base (ranked prior partitions,
//! optionally preceded by the TotalCost formula), and the generation
//! instruction. Node display labels (`N01`, `N02`, ...) and line order are
//! reshuffled every iteration from `(shuffle_seed, iteration)`.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::{index::sample, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{id_width, DsmCase, NodeId, SolutionRecord};
use crate::seeds::{derive_seed, rng_for, tag};

pub const SYSTEM_MESSAGE: &str = "You are a Design Structure Matrix (DSM) modularization expert. \
Your goal is to find a partition of the system elements into modules that minimizes the \
structural cost objective TotalCost: dependencies inside a module are cheap, especially in \
small modules, while dependencies that cross module boundaries are heavily penalized.";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("knowledge-on prompts need a name and description for node {0:?}")]
    MissingKnowledge(String),
    #[error("no solutions available for the solution base")]
    EmptySolutionBase,
    #[error("solution pool needs p + q >= 1")]
    EmptyPoolSpec,
    #[error("solution covers {got} nodes but the case has {expected}")]
    SolutionSize { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    #[default]
    DirectedEdgeList,
    AdjacencyMatrix,
    UndirectedEdgeList,
    NaturalLanguage,
}

impl InputFormat {
    pub const ALL: [InputFormat; 4] = [
        InputFormat::DirectedEdgeList,
        InputFormat::AdjacencyMatrix,
        InputFormat::UndirectedEdgeList,
        InputFormat::NaturalLanguage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InputFormat::DirectedEdgeList => "directed_edge_list",
            InputFormat::AdjacencyMatrix => "adjacency_matrix",
            InputFormat::UndirectedEdgeList => "undirected_edge_list",
            InputFormat::NaturalLanguage => "natural_language",
        }
    }
}

impl fmt::Display for InputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "directed_edge_list" | "directed" | "edges" => Ok(InputFormat::DirectedEdgeList),
            "adjacency_matrix" | "matrix" => Ok(InputFormat::AdjacencyMatrix),
            "undirected_edge_list" | "undirected" => Ok(InputFormat::UndirectedEdgeList),
            "natural_language" | "natural" | "text" => Ok(InputFormat::NaturalLanguage),
            other => Err(format!("unknown input format {other:?}")),
        }
    }
}

/// Every knob that changes the rendered prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSpec {
    pub input_format: InputFormat,
    /// Include engineering names and descriptions (`k = 1`).
    pub knowledge: bool,
    pub include_formula: bool,
    pub pool_best_p: usize,
    pub pool_random_q: usize,
    pub shuffle_seed: u64,
    /// Exponent stated in the formula block.
    pub rho: f64,
}

impl Default for PromptSpec {
    fn default() -> Self {
        PromptSpec {
            input_format: InputFormat::DirectedEdgeList,
            knowledge: false,
            include_formula: true,
            pool_best_p: 5,
            pool_random_q: 5,
            shuffle_seed: 0,
            rho: 1.0,
        }
    }
}

impl PromptSpec {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.pool_best_p + self.pool_random_q == 0 {
            return Err(PromptError::EmptyPoolSpec);
        }
        Ok(())
    }
}

/// Bijection between case nodes and the display labels of one prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    labels: Vec<String>,
    positions: HashMap<String, usize>,
}

impl LabelMap {
    /// Display labels are a seeded permutation of `N01..Nnn`.
    pub fn shuffled(n: usize, seed: u64) -> Self {
        let mut perm: Vec<usize> = (1..=n).collect();
        perm.shuffle(&mut rng_for(&[seed]));
        let width = id_width(n);
        Self::from_labels(perm.into_iter().map(|i| format!("N{i:0width$}")).collect())
            .expect("a permutation has no duplicates")
    }

    /// Label of node position `i` is `labels[i]`. Returns `None` on duplicates.
    pub fn from_labels(labels: Vec<String>) -> Option<Self> {
        let positions: HashMap<String, usize> =
            labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        (positions.len() == labels.len()).then_some(LabelMap { labels, positions })
    }

    pub fn label(&self, position: usize) -> &str {
        &self.labels[position]
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.positions.get(label).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Node positions sorted by display label.
    pub fn display_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.labels.len()).collect();
        order.sort_by(|&a, &b| self.labels[a].cmp(&self.labels[b]));
        order
    }

    /// `(node id, display label)` pairs in case node order.
    pub fn pairs<'a>(&'a self, case: &'a DsmCase) -> impl Iterator<Item = (&'a NodeId, &'a str)> {
        case.node_ids().zip(self.labels.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub system_message: String,
    pub user_message: String,
    pub label_map: LabelMap,
}

/// Weights print as integers when integral.
pub fn format_weight(w: f64) -> String {
    if w.fract() == 0.0 && w.abs() < 1e15 {
        format!("{}", w as i64)
    } else {
        format!("{w}")
    }
}

fn display_name(case: &DsmCase, labels: &LabelMap, knowledge: bool, pos: usize) -> String {
    if knowledge {
        format!("{} ({})", labels.label(pos), case.nodes()[pos].name)
    } else {
        labels.label(pos).to_owned()
    }
}

fn shuffled_lines(mut lines: Vec<String>, order_seed: u64) -> String {
    lines.shuffle(&mut rng_for(&[order_seed]));
    let mut out = String::new();
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    out
}

/// `"X --> Y (weight: w)"`: X receives input from Y. Lines shuffled.
pub fn render_directed_edge_list(case: &DsmCase, labels: &LabelMap, order_seed: u64) -> String {
    let lines = case
        .links()
        .iter()
        .map(|l| {
            format!(
                "{} --> {} (weight: {})",
                labels.label(l.target),
                labels.label(l.source),
                format_weight(l.weight)
            )
        })
        .collect();
    shuffled_lines(lines, order_seed)
}

/// Rows are receiving elements, columns providing elements, in label order.
pub fn render_adjacency_matrix(case: &DsmCase, labels: &LabelMap) -> String {
    let n = case.n();
    let mut grid = vec![vec![0.0; n]; n];
    for l in case.links() {
        grid[l.target][l.source] += l.weight;
    }
    let order = labels.display_order();
    let cells: Vec<Vec<String>> = order
        .iter()
        .map(|&r| order.iter().map(|&c| format_weight(grid[r][c])).collect())
        .collect();
    let width = order
        .iter()
        .map(|&p| labels.label(p).len())
        .chain(cells.iter().flatten().map(String::len))
        .max()
        .unwrap_or(1);
    let row_head = order.iter().map(|&p| labels.label(p).len()).max().unwrap_or(1);
    let mut out = format!("{:row_head$}", "");
    for &c in &order {
        let _ = write!(out, " {:>width$}", labels.label(c));
    }
    out.push('\n');
    for (i, &r) in order.iter().enumerate() {
        let _ = write!(out, "{:<row_head$}", labels.label(r));
        for cell in &cells[i] {
            let _ = write!(out, " {cell:>width$}");
        }
        out.push('\n');
    }
    out
}

/// One line per connected unordered pair, weights of both directions summed.
pub fn render_undirected_edge_list(case: &DsmCase, labels: &LabelMap, order_seed: u64) -> String {
    let mut pairs: HashMap<(usize, usize), f64> = HashMap::new();
    for l in case.links() {
        let (a, b) = if labels.label(l.target) < labels.label(l.source) {
            (l.target, l.source)
        } else {
            (l.source, l.target)
        };
        *pairs.entry((a, b)).or_default() += l.weight;
    }
    let mut keyed: Vec<_> = pairs.into_iter().collect();
    keyed.sort_by_key(|x| x.0);
    let lines = keyed
        .into_iter()
        .map(|((a, b), w)| {
            format!("{} -- {} (weight: {})", labels.label(a), labels.label(b), format_weight(w))
        })
        .collect();
    shuffled_lines(lines, order_seed)
}

/// One sentence per directed edge. With knowledge on, names follow labels.
pub fn render_natural_language(
    case: &DsmCase,
    labels: &LabelMap,
    knowledge: bool,
    order_seed: u64,
) -> String {
    let lines = case
        .links()
        .iter()
        .map(|l| {
            format!(
                "{} receives input from {} with strength {}.",
                display_name(case, labels, knowledge, l.target),
                display_name(case, labels, knowledge, l.source),
                format_weight(l.weight)
            )
        })
        .collect();
    shuffled_lines(lines, order_seed)
}

fn sort_records(records: &mut [SolutionRecord]) {
    records.sort_by(|a, b| {
        a.total_cost
            .total_cmp(&b.total_cost)
            .then(a.iteration_found.cmp(&b.iteration_found))
    });
}

/// The first `p` records of `pool_best` plus up to `q` records sampled
/// uniformly without replacement from the rest of `history`, re-sorted by
/// cost (ties by discovery iteration).
pub fn sample_solution_base(
    pool_best: &[SolutionRecord],
    history: &[SolutionRecord],
    p: usize,
    q: usize,
    rng_seed: u64,
) -> Vec<SolutionRecord> {
    let mut base: Vec<SolutionRecord> = pool_best.iter().take(p).cloned().collect();
    let candidates: Vec<&SolutionRecord> = history.iter().filter(|r| !base.contains(r)).collect();
    let amount = q.min(candidates.len());
    if amount > 0 {
        let mut rng = rng_for(&[rng_seed]);
        let mut picked = sample(&mut rng, candidates.len(), amount).into_vec();
        picked.sort_unstable();
        base.extend(picked.into_iter().map(|i| candidates[i].clone()));
    }
    sort_records(&mut base);
    base
}

/// Formula block text, exactly as inserted ahead of the solution list.
pub fn formula_block(n: usize, rho: f64) -> String {
    format!(
        "Objective (lower is better):\n\
TotalCost = sum over modules M_k of [ (sum of w_ij for i, j in M_k) * |M_k|^rho / n^rho ] \
+ n * (sum of w_ij for i in M_a, j in M_b, a != b)\n\
where w_ij is the strength with which element i receives input from element j, |M_k| is the \
number of elements in module M_k, n = {n} and rho = {}.\n\n",
        format_weight(rho)
    )
}

fn render_solution(record: &SolutionRecord, labels: &LabelMap, order: &[usize]) -> String {
    let parts: Vec<String> = order
        .iter()
        .map(|&pos| format!("{}: M{}", labels.label(pos), record.partition.module_of(pos)))
        .collect();
    format!("{} | TotalCost: {:.1}", parts.join(", "), record.total_cost)
}

/// Renders the full prompt for one iteration.
///
/// `pool` is the solution base to show. When it is empty, a base is sampled
/// from `history` with the spec's `p` and `q`.
pub fn render_prompt(
    case: &DsmCase,
    spec: &PromptSpec,
    pool: &[SolutionRecord],
    history: &[SolutionRecord],
    iteration: usize,
) -> Result<RenderedPrompt, PromptError> {
    spec.validate()?;
    if spec.knowledge {
        if let Some(node) = case
            .nodes()
            .iter()
            .find(|n| n.name.trim().is_empty() || n.description.trim().is_empty())
        {
            return Err(PromptError::MissingKnowledge(node.id.to_string()));
        }
    }
    let it = iteration as u64;
    let mut base: Vec<SolutionRecord> = if pool.is_empty() {
        let mut best = history.to_vec();
        sort_records(&mut best);
        sample_solution_base(
            &best,
            history,
            spec.pool_best_p,
            spec.pool_random_q,
            derive_seed(&[spec.shuffle_seed, it, tag::POOL]),
        )
    } else {
        pool.to_vec()
    };
    if base.is_empty() {
        return Err(PromptError::EmptySolutionBase);
    }
    if let Some(r) = base.iter().find(|r| r.partition.len() != case.n()) {
        return Err(PromptError::SolutionSize {
            expected: case.n(),
            got: r.partition.len(),
        });
    }
    sort_records(&mut base);

    let labels = LabelMap::shuffled(case.n(), derive_seed(&[spec.shuffle_seed, it, tag::LABELS]));
    let order_seed = derive_seed(&[spec.shuffle_seed, it, tag::EDGE_ORDER]);
    let order = labels.display_order();
    let n = case.n();

    let mut user = String::from("### Block 1: DSM description\n");
    if spec.knowledge {
        let _ = writeln!(
            user,
            "System: {} ({} DSM, domain: {})",
            case.name(),
            case.dsm_type(),
            case.domain()
        );
    }
    let _ = writeln!(
        user,
        "The system has {n} elements and {} directed dependencies.",
        case.edge_count()
    );
    if spec.knowledge {
        user.push_str("Elements:\n");
        for &pos in &order {
            let node = &case.nodes()[pos];
            let _ = writeln!(user, "{} ({}): {}", labels.label(pos), node.name, node.description);
        }
    } else {
        let all: Vec<&str> = order.iter().map(|&p| labels.label(p)).collect();
        let _ = writeln!(user, "Elements: {}", all.join(", "));
    }
    match spec.input_format {
        InputFormat::DirectedEdgeList => {
            user.push_str(
                "Dependencies as a directed edge list, one per line. \
\"X --> Y (weight: w)\" means X receives input from Y with strength w.\n",
            );
            user.push_str(&render_directed_edge_list(case, &labels, order_seed));
        }
        InputFormat::AdjacencyMatrix => {
            user.push_str(
                "Dependencies as an adjacency matrix. Rows are receiving elements, columns are \
providing elements, entries are dependency strengths (0 = no dependency).\n",
            );
            user.push_str(&render_adjacency_matrix(case, &labels));
        }
        InputFormat::UndirectedEdgeList => {
            user.push_str(
                "Dependencies as an undirected edge list, one per line. \"X -- Y (weight: w)\" \
means X and Y interact with total strength w.\n",
            );
            user.push_str(&render_undirected_edge_list(case, &labels, order_seed));
        }
        InputFormat::NaturalLanguage => {
            user.push_str("Dependencies:\n");
            user.push_str(&render_natural_language(case, &labels, spec.knowledge, order_seed));
        }
    }

    user.push_str("\n### Block 2: Solution base\n");
    if spec.include_formula {
        user.push_str(&formula_block(n, spec.rho));
    }
    user.push_str("Previously evaluated solutions, sorted in ascending order of TotalCost (best first):\n");
    for (i, r) in base.iter().enumerate() {
        let _ = writeln!(user, "Solution {}: {}", i + 1, render_solution(r, &labels, &order));
    }

    let first = labels.label(order[0]);
    let second = labels.label(order[1]);
    let _ = write!(
        user,
        "\n### Block 3: Generation instruction\n\
Generate a new partition of all {n} elements into at least 2 modules that achieves a lower \
TotalCost than the best solution shown above.\n\
Do not copy any of the provided solutions verbatim.\n\
Use string module labels such as \"M1\", \"M2\", not numbers.\n\
Output the result as a JSON dictionary mapping every element label to a module label, for \
example {{\"{first}\": \"M1\", \"{second}\": \"M2\", ...}}.\n"
    );

    Ok(RenderedPrompt {
        system_message: SYSTEM_MESSAGE.to_owned(),
        user_message: user,
        label_map: labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{singleton_partition, Partition};

    fn two_node() -> DsmCase {
        DsmCase::from_json(
            r#"{"name":"t","dsm_type":"activity","domain":"d",
            "nodes":[{"id":"A"},{"id":"B"}],
            "edges":[{"target":"B","source":"A","weight":3}]}"#,
        )
        .unwrap()
    }

    fn record(assignment: Vec<usize>, cost: f64, it: usize) -> SolutionRecord {
        SolutionRecord {
            partition: Partition::from_canonical(assignment).unwrap(),
            total_cost: cost,
            iteration_found: it,
        }
    }

    #[test]
    fn label_map_is_a_permutation() {
        let m = LabelMap::shuffled(12, 5);
        let mut seen: Vec<&str> = (0..12).map(|i| m.label(i)).collect();
        seen.sort();
        let expected: Vec<String> = (1..=12).map(|i| format!("N{i:02}")).collect();
        assert_eq!(seen, expected.iter().map(String::as_str).collect::<Vec<_>>());
        for i in 0..12 {
            assert_eq!(m.position(m.label(i)), Some(i));
        }
        assert_eq!(LabelMap::shuffled(12, 5), m);
        assert_eq!(LabelMap::shuffled(150, 1).label(0).len(), 4);
    }

    #[test]
    fn adjacency_matrix_single_entry() {
        let case = two_node();
        let labels = LabelMap::from_labels(vec!["N01".into(), "N02".into()]).unwrap();
        let text = render_adjacency_matrix(&case, &labels);
        assert_eq!(text, "    N01 N02\nN01   0   0\nN02   3   0\n");
    }

    #[test]
    fn undirected_sums_both_directions() {
        let case = DsmCase::from_json(
            r#"{"name":"t","dsm_type":"activity","domain":"d",
            "nodes":[{"id":"A"},{"id":"B"},{"id":"C"}],
            "edges":[{"target":"B","source":"A","weight":2},{"target":"A","source":"B","weight":3},
                     {"target":"C","source":"A","weight":4}]}"#,
        )
        .unwrap();
        let labels = LabelMap::from_labels(vec!["N01".into(), "N02".into(), "N03".into()]).unwrap();
        let text = render_undirected_edge_list(&case, &labels, 1);
        let mut lines: Vec<&str> = text.lines().collect();
        lines.sort();
        assert_eq!(lines, vec!["N01 -- N02 (weight: 5)", "N01 -- N03 (weight: 4)"]);
    }

    #[test]
    fn natural_language_sentences() {
        let case = two_node();
        let labels = LabelMap::from_labels(vec!["N01".into(), "N02".into()]).unwrap();
        assert_eq!(
            render_natural_language(&case, &labels, false, 0),
            "N02 receives input from N01 with strength 3.\n"
        );
    }

    #[test]
    fn solution_line_format() {
        // Node positions 0, 1, 2 carry display labels N02, N01, N03.
        let labels = LabelMap::from_labels(vec!["N02".into(), "N01".into(), "N03".into()]).unwrap();
        let r = record(vec![1, 2, 2], 12.0, 0);
        assert_eq!(
            render_solution(&r, &labels, &labels.display_order()),
            "N01: M2, N02: M1, N03: M2 | TotalCost: 12.0"
        );
    }

    #[test]
    fn solution_base_sampling() {
        let history: Vec<SolutionRecord> = (0..30)
            .map(|i| record(vec![1, 2, if i % 2 == 0 { 1 } else { 2 }], 100.0 - i as f64, i))
            .collect();
        let mut best = history.clone();
        sort_records(&mut best);

        let only_best = sample_solution_base(&best[..3], &history, 5, 0, 1);
        assert_eq!(only_best, best[..3].to_vec());

        let explore = sample_solution_base(&best, &history, 0, 5, 1);
        assert_eq!(explore.len(), 5);
        assert!(explore.windows(2).all(|w| w[0].total_cost <= w[1].total_cost));

        let mixed = sample_solution_base(&best, &history, 5, 5, 2);
        assert_eq!(mixed.len(), 10);
        for i in 0..10 {
            for j in i + 1..10 {
                assert_ne!(mixed[i], mixed[j]);
            }
        }
        assert!(mixed.windows(2).all(|w| w[0].total_cost <= w[1].total_cost));
        assert_eq!(mixed[..5], best[..5]);
        assert_eq!(sample_solution_base(&best, &history, 5, 5, 2), mixed);

        let tiny = sample_solution_base(&best[..2], &history[28..], 5, 5, 0);
        assert_eq!(tiny.len(), 2);
    }

    #[test]
    fn ties_order_by_iteration() {
        let mut v = vec![record(vec![1, 2], 5.0, 3), record(vec![1, 2], 5.0, 1), record(vec![1, 1], 4.0, 9)];
        sort_records(&mut v);
        assert_eq!(v.iter().map(|r| r.iteration_found).collect::<Vec<_>>(), vec![9, 1, 3]);
    }

    #[test]
    fn render_errors() {
        let case = two_node();
        let spec = PromptSpec {
            knowledge: true,
            ..PromptSpec::default()
        };
        let init = record(singleton_partition(&case).assignment().to_vec(), 6.0, 0);
        assert_eq!(
            render_prompt(&case, &spec, &[init.clone()], &[init.clone()], 1),
            Err(PromptError::MissingKnowledge("A".into()))
        );
        assert_eq!(
            render_prompt(&case, &PromptSpec::default(), &[], &[], 1),
            Err(PromptError::EmptySolutionBase)
        );
        let empty = PromptSpec {
            pool_best_p: 0,
            pool_random_q: 0,
            ..PromptSpec::default()
        };
        assert_eq!(render_prompt(&case, &empty, &[init.clone()], &[init], 1), Err(PromptError::EmptyPoolSpec));
    }

    #[test]
    fn falls_back_to_history_when_pool_empty() {
        let case = two_node();
        let init = record(vec![1, 2], 6.0, 0);
        let a = render_prompt(&case, &PromptSpec::default(), &[], &[init.clone()], 1).unwrap();
        let b = render_prompt(&case, &PromptSpec::default(), &[init.clone()], &[init], 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn input_format_parsing() {
        for f in InputFormat::ALL {
            assert_eq!(f.as_str().parse::<InputFormat>().unwrap(), f);
        }
        assert!("bogus".parse::<InputFormat>().is_err());
    }
}
