//! DSM instances, partitions and case-file I/O.
//!
//! A case document is JSON:
//!
//! ```json
//! {"name": "demo", "dsm_type": "component", "domain": "aerospace",
//!  "nodes": [{"id": "N1", "name": "Fuel System", "description": "..."}],
//!  "edges": [{"target": "N2", "source": "N1", "weight": 4}]}
//! ```
//!
//! An edge `(target, source)` means the target element receives input from the
//! source element. Node order in the document is the canonical node order used
//! for label canonicalization and prompt rendering.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::hash::Hash;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("cannot read case file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed case document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("empty node id at position {0}")]
    EmptyNodeId(usize),
    #[error("duplicate node id {0:?}")]
    DuplicateNode(String),
    #[error("edge {target:?} <- {source_node:?} references unknown node {missing:?}")]
    UnknownEndpoint {
        target: String,
        source_node: String,
        missing: String,
    },
    #[error("self-loop edge on node {0:?}")]
    SelfLoop(String),
    #[error("edge {target:?} <- {source_node:?} has non-positive weight {weight}")]
    NonPositiveWeight {
        target: String,
        source_node: String,
        weight: f64,
    },
    #[error("duplicate edge {target:?} <- {source_node:?}")]
    DuplicateEdge { target: String, source_node: String },
    #[error("a case needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("a case needs at least one edge")]
    NoEdges,
    #[error("density {density} on {n} nodes yields fewer than one edge")]
    DensityTooLow { n: usize, density: f64 },
    #[error("invalid weight range [{lo}, {hi}]")]
    InvalidWeightRange { lo: u32, hi: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DsmType {
    Activity,
    Parameter,
    Component,
}

impl fmt::Display for DsmType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DsmType::Activity => "activity",
            DsmType::Parameter => "parameter",
            DsmType::Component => "component",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsmNode {
    pub id: NodeId,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
}

/// `target` receives input from `source` with strength `weight`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsmEdge {
    pub target: NodeId,
    pub source: NodeId,
    pub weight: f64,
}

/// Serialized form of a case; validated into a [`DsmCase`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseDocument {
    pub name: String,
    pub dsm_type: DsmType,
    #[serde(default)]
    pub domain: String,
    pub nodes: Vec<DsmNode>,
    pub edges: Vec<DsmEdge>,
}

/// An edge resolved to node positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub target: usize,
    pub source: usize,
    pub weight: f64,
}

/// A validated DSM instance. Immutable after construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "CaseDocument", into = "CaseDocument")]
pub struct DsmCase {
    name: String,
    dsm_type: DsmType,
    domain: String,
    nodes: Vec<DsmNode>,
    edges: Vec<DsmEdge>,
    index: HashMap<NodeId, usize>,
    links: Vec<Link>,
    total_weight: f64,
}

impl DsmCase {
    pub fn from_document(doc: CaseDocument) -> Result<Self, CaseError> {
        let CaseDocument {
            name,
            dsm_type,
            domain,
            nodes,
            edges,
        } = doc;
        if nodes.len() < 2 {
            return Err(CaseError::TooFewNodes(nodes.len()));
        }
        let mut index = HashMap::with_capacity(nodes.len());
        for (pos, node) in nodes.iter().enumerate() {
            if node.id.as_str().is_empty() {
                return Err(CaseError::EmptyNodeId(pos));
            }
            if index.insert(node.id.clone(), pos).is_some() {
                return Err(CaseError::DuplicateNode(node.id.to_string()));
            }
        }
        if edges.is_empty() {
            return Err(CaseError::NoEdges);
        }
        let mut seen = HashSet::with_capacity(edges.len());
        let mut links = Vec::with_capacity(edges.len());
        for e in &edges {
            let lookup = |id: &NodeId| {
                index
                    .get(id)
                    .copied()
                    .ok_or_else(|| CaseError::UnknownEndpoint {
                        target: e.target.to_string(),
                        source_node: e.source.to_string(),
                        missing: id.to_string(),
                    })
            };
            let target = lookup(&e.target)?;
            let source = lookup(&e.source)?;
            if target == source {
                return Err(CaseError::SelfLoop(e.target.to_string()));
            }
            if !(e.weight > 0.0 && e.weight.is_finite()) {
                return Err(CaseError::NonPositiveWeight {
                    target: e.target.to_string(),
                    source_node: e.source.to_string(),
                    weight: e.weight,
                });
            }
            if !seen.insert((target, source)) {
                return Err(CaseError::DuplicateEdge {
                    target: e.target.to_string(),
                    source_node: e.source.to_string(),
                });
            }
            links.push(Link {
                target,
                source,
                weight: e.weight,
            });
        }
        let total_weight = links.iter().map(|l| l.weight).sum();
        Ok(DsmCase {
            name,
            dsm_type,
            domain,
            nodes,
            edges,
            index,
            links,
            total_weight,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, CaseError> {
        let doc: CaseDocument = serde_json::from_str(text)?;
        Self::from_document(doc)
    }

    pub fn to_document(&self) -> CaseDocument {
        CaseDocument {
            name: self.name.clone(),
            dsm_type: self.dsm_type,
            domain: self.domain.clone(),
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("case documents always serialize")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dsm_type(&self) -> DsmType {
        self.dsm_type
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn nodes(&self) -> &[DsmNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[DsmEdge] {
        &self.edges
    }

    /// Edges resolved to node positions, in document order.
    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// `E / (N (N - 1))`.
    pub fn density(&self) -> f64 {
        let n = self.n() as f64;
        self.edge_count() as f64 / (n * (n - 1.0))
    }

    /// Sum of all edge weights.
    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    pub fn position(&self, id: &NodeId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.iter().map(|n| &n.id)
    }

    /// True when every node carries a name and a description.
    pub fn has_knowledge(&self) -> bool {
        self.nodes
            .iter()
            .all(|n| !n.name.trim().is_empty() && !n.description.trim().is_empty())
    }

    /// Symmetric neighbor lists: for each node, `(other, w(v,u) + w(u,v))`.
    pub fn undirected_neighbors(&self) -> Vec<Vec<(usize, f64)>> {
        let mut acc: Vec<HashMap<usize, f64>> = vec![HashMap::new(); self.n()];
        for l in &self.links {
            *acc[l.target].entry(l.source).or_default() += l.weight;
            *acc[l.source].entry(l.target).or_default() += l.weight;
        }
        acc.into_iter()
            .map(|m| {
                let mut v: Vec<_> = m.into_iter().collect();
                v.sort_by_key(|&(u, _)| u);
                v
            })
            .collect()
    }
}

impl TryFrom<CaseDocument> for DsmCase {
    type Error = CaseError;

    fn try_from(doc: CaseDocument) -> Result<Self, Self::Error> {
        DsmCase::from_document(doc)
    }
}

impl From<DsmCase> for CaseDocument {
    fn from(case: DsmCase) -> Self {
        case.to_document()
    }
}

/// Loads and validates a case document from a file.
pub fn load_case(path: impl AsRef<Path>) -> Result<DsmCase, CaseError> {
    let text = std::fs::read_to_string(path)?;
    DsmCase::from_json(&text)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PartitionError {
    #[error("partition is empty")]
    Empty,
    #[error("module labels are not canonical at position {0}")]
    NotCanonical(usize),
    #[error("node {0:?} has no module assignment")]
    MissingNode(String),
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("node {0:?} is assigned more than once")]
    DuplicateNode(String),
    #[error("partition covers {got} nodes but the case has {expected}")]
    SizeMismatch { expected: usize, got: usize },
}

/// A total assignment of nodes (by case position) to modules `1..=K`.
///
/// Module indices are canonical: numbered by order of first appearance when
/// scanning nodes in case order, so grouping-equivalent assignments compare
/// equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Partition {
    assignment: Vec<usize>,
    modules: usize,
}

impl Partition {
    /// Canonicalizes arbitrary per-node labels by order of first appearance.
    pub fn from_labels<L: Eq + Hash>(labels: &[L]) -> Self {
        let mut seen: HashMap<&L, usize> = HashMap::new();
        let assignment = labels
            .iter()
            .map(|l| {
                let next = seen.len() + 1;
                *seen.entry(l).or_insert(next)
            })
            .collect();
        Partition {
            assignment,
            modules: seen.len(),
        }
    }

    /// Wraps an assignment that is already canonical (1-based, first appearance).
    pub fn from_canonical(assignment: Vec<usize>) -> Result<Self, PartitionError> {
        if assignment.is_empty() {
            return Err(PartitionError::Empty);
        }
        let mut max = 0;
        for (pos, &m) in assignment.iter().enumerate() {
            if m == 0 || m > max + 1 {
                return Err(PartitionError::NotCanonical(pos));
            }
            max = max.max(m);
        }
        Ok(Partition {
            assignment,
            modules: max,
        })
    }

    pub fn singleton(n: usize) -> Self {
        Partition {
            assignment: (1..=n).collect(),
            modules: n,
        }
    }

    /// Module index (1-based) of the node at `position`.
    pub fn module_of(&self, position: usize) -> usize {
        self.assignment[position]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Number of modules `K`.
    pub fn module_count(&self) -> usize {
        self.modules
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn module_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.modules];
        for &m in &self.assignment {
            sizes[m - 1] += 1;
        }
        sizes
    }

    /// Node positions grouped by module, modules in index order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.modules];
        for (pos, &m) in self.assignment.iter().enumerate() {
            groups[m - 1].push(pos);
        }
        groups
    }

    pub fn check_covers(&self, case: &DsmCase) -> Result<(), PartitionError> {
        if self.len() != case.n() {
            return Err(PartitionError::SizeMismatch {
                expected: case.n(),
                got: self.len(),
            });
        }
        Ok(())
    }

    /// `(node id, module index)` pairs in case node order.
    pub fn named<'a>(&'a self, case: &'a DsmCase) -> impl Iterator<Item = (&'a NodeId, usize)> {
        case.node_ids().zip(self.assignment.iter().copied())
    }

    /// JSON object `{node_id: module_index}` in case node order.
    pub fn to_json_map(&self, case: &DsmCase) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .named(case)
            .map(|(id, m)| (id.to_string(), serde_json::Value::from(m)))
            .collect();
        serde_json::Value::Object(map)
    }
}

impl TryFrom<Vec<usize>> for Partition {
    type Error = PartitionError;

    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        Partition::from_canonical(v)
    }
}

impl From<Partition> for Vec<usize> {
    fn from(p: Partition) -> Self {
        p.assignment
    }
}

/// A partition with its TotalCost and the iteration at which it was found.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub partition: Partition,
    pub total_cost: f64,
    pub iteration_found: usize,
}

/// Every node in its own module: `K = n`, node `t` in module `t`.
pub fn singleton_partition(case: &DsmCase) -> Partition {
    Partition::singleton(case.n())
}

/// Canonicalizes a raw `node id -> label` map against the case node order.
pub fn canonicalize<'a, I, L>(raw: I, case: &DsmCase) -> Result<Partition, PartitionError>
where
    I: IntoIterator<Item = (&'a NodeId, L)>,
    L: Eq + Hash,
{
    let mut labels: Vec<Option<L>> = (0..case.n()).map(|_| None).collect();
    for (id, label) in raw {
        let pos = case
            .position(id)
            .ok_or_else(|| PartitionError::UnknownNode(id.to_string()))?;
        if labels[pos].replace(label).is_some() {
            return Err(PartitionError::DuplicateNode(id.to_string()));
        }
    }
    let labels = labels
        .into_iter()
        .enumerate()
        .map(|(pos, l)| l.ok_or_else(|| PartitionError::MissingNode(case.nodes()[pos].id.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Partition::from_labels(&labels))
}

/// Uniform labels over `n` tentative groups, canonicalized, with `K = 1`
/// repaired by moving one uniformly chosen node into a new module.
pub fn random_partition(case: &DsmCase, rng_seed: u64) -> Partition {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    random_partition_with(case.n(), &mut rng)
}

pub(crate) fn random_partition_with<R: Rng>(n: usize, rng: &mut R) -> Partition {
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
    let mut p = Partition::from_labels(&labels);
    if p.modules == 1 && n >= 2 {
        let moved = rng.gen_range(0..n);
        let mut labels = vec![0usize; n];
        labels[moved] = 1;
        p = Partition::from_labels(&labels);
    }
    p
}

/// A synthetic case with `round(density * n (n - 1))` distinct directed edges
/// and integer weights drawn uniformly from `[lo, hi]`.
pub fn generate_random_case(
    n: usize,
    density: f64,
    weight_range: (u32, u32),
    rng_seed: u64,
) -> Result<DsmCase, CaseError> {
    if n < 2 {
        return Err(CaseError::TooFewNodes(n));
    }
    let (lo, hi) = weight_range;
    if lo == 0 || lo > hi {
        return Err(CaseError::InvalidWeightRange { lo, hi });
    }
    let pairs = n * (n - 1);
    let wanted = (density * pairs as f64).round();
    if !(density > 0.0 && density <= 1.0) || wanted < 1.0 {
        return Err(CaseError::DensityTooLow { n, density });
    }
    let wanted = (wanted as usize).min(pairs);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let width = id_width(n);
    let ids: Vec<NodeId> = (1..=n).map(|i| NodeId(format!("N{i:0width$}"))).collect();
    let nodes = ids
        .iter()
        .enumerate()
        .map(|(i, id)| DsmNode {
            id: id.clone(),
            name: format!("Element {}", i + 1),
            description: format!("Synthetic element number {} of the random case.", i + 1),
        })
        .collect();
    let mut chosen = sample(&mut rng, pairs, wanted).into_vec();
    chosen.sort_unstable();
    let edges = chosen
        .into_iter()
        .map(|k| {
            let target = k / (n - 1);
            let mut source = k % (n - 1);
            if source >= target {
                source += 1;
            }
            DsmEdge {
                target: ids[target].clone(),
                source: ids[source].clone(),
                weight: f64::from(rng.gen_range(lo..=hi)),
            }
        })
        .collect();
    DsmCase::from_document(CaseDocument {
        name: format!("random-n{n}-s{rng_seed}"),
        dsm_type: DsmType::Component,
        domain: "synthetic".to_owned(),
        nodes,
        edges,
    })
}

/// Zero-padding width for `N01`-style identifiers.
pub(crate) fn id_width(n: usize) -> usize {
    n.to_string().len().max(2)
}
