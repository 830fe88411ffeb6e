//! The iterative prompt, query, evaluate, pool-update loop.

mod parse;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use parse::{parse_response, Criterion, ResponseError};

use crate::gateway::{ChatBackend, ChatRequest};
use crate::metrics::{total_cost, CostParams, MetricError};
use crate::model::{singleton_partition, DsmCase, NodeId, Partition, SolutionRecord};
use crate::prompting::{render_prompt, sample_solution_base, PromptError, PromptSpec, RenderedPrompt};
use crate::seeds::{derive_seed, tag};

#[derive(Debug, Error, PartialEq)]
pub enum OptimizerError {
    #[error("iterations must be at least 1")]
    NoIterations,
    #[error("cost exponent must be finite, got {0}")]
    InvalidRho(f64),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub iterations: usize,
    pub prompt_spec: PromptSpec,
    pub cost_params: CostParams,
    pub master_seed: u64,
    /// Re-query once with the same prompt when a response is unusable.
    pub invalid_retry_in_place: bool,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            iterations: 30,
            prompt_spec: PromptSpec::default(),
            cost_params: CostParams::default(),
            master_seed: 0,
            invalid_retry_in_place: false,
            temperature: 1.0,
            max_output_tokens: 4096,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        if self.iterations == 0 {
            return Err(OptimizerError::NoIterations);
        }
        if !self.cost_params.rho.is_finite() {
            return Err(OptimizerError::InvalidRho(self.cost_params.rho));
        }
        self.prompt_spec.validate()?;
        Ok(())
    }

    /// The prompt spec actually rendered: rho follows the cost parameters and
    /// the shuffle seed is folded with the master seed.
    pub fn effective_prompt_spec(&self) -> PromptSpec {
        PromptSpec {
            rho: self.cost_params.rho,
            shuffle_seed: derive_seed(&[self.master_seed, self.prompt_spec.shuffle_seed, tag::PROMPT]),
            ..self.prompt_spec.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Valid,
    ParseFailure { reason: String },
    ValidationFailure { criterion: Criterion, reason: String },
    TransportFailure { reason: String },
}

impl Outcome {
    pub fn is_valid(&self) -> bool {
        matches!(self, Outcome::Valid)
    }

    fn from_response_error(e: &ResponseError) -> Self {
        match e.criterion() {
            Some(criterion) => Outcome::ValidationFailure {
                criterion,
                reason: e.to_string(),
            },
            None => Outcome::ParseFailure { reason: e.to_string() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// SHA-256 of the system and user messages, hex encoded.
    pub prompt_hash: String,
    pub raw_response: String,
    pub outcome: Outcome,
    pub partition: Option<Partition>,
    pub total_cost: Option<f64>,
    pub best_so_far: f64,
    #[serde(default)]
    pub retried: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub case_name: String,
    pub node_ids: Vec<NodeId>,
    pub backend: String,
    pub config: OptimizerConfig,
    /// Cost of the singleton initialization.
    pub initial_cost: f64,
    pub records: Vec<IterationRecord>,
    pub best: SolutionRecord,
    pub invalid_count: usize,
}

impl RunTrace {
    /// Best-so-far cost after each iteration, starting with the initialization.
    pub fn best_curve(&self) -> Vec<f64> {
        std::iter::once(self.initial_cost)
            .chain(self.records.iter().map(|r| r.best_so_far))
            .collect()
    }

    /// True when the backend never delivered a reply.
    pub fn transport_only(&self) -> bool {
        self.records
            .iter()
            .all(|r| matches!(r.outcome, Outcome::TransportFailure { .. }))
    }
}

fn sort_key(a: &SolutionRecord, b: &SolutionRecord) -> std::cmp::Ordering {
    a.total_cost
        .total_cmp(&b.total_cost)
        .then(a.iteration_found.cmp(&b.iteration_found))
}

/// The solution base for the next prompt: the `p` best distinct partitions of
/// `history` plus `q` random other history records.
pub fn update_pool(history: &[SolutionRecord], p: usize, q: usize, rng_seed: u64) -> Vec<SolutionRecord> {
    let mut sorted: Vec<&SolutionRecord> = history.iter().collect();
    sorted.sort_by(|a, b| sort_key(a, b));
    let mut best: Vec<SolutionRecord> = Vec::with_capacity(p);
    for r in sorted {
        if best.len() == p {
            break;
        }
        if !best.iter().any(|b| b.partition == r.partition) {
            best.push(r.clone());
        }
    }
    sample_solution_base(&best, history, p, q, rng_seed)
}

pub fn prompt_hash(prompt: &RenderedPrompt) -> String {
    let mut h = Sha256::new();
    h.update(prompt.system_message.as_bytes());
    h.update([0u8]);
    h.update(prompt.user_message.as_bytes());
    hex::encode(h.finalize())
}

struct Attempt {
    raw: String,
    outcome: Outcome,
    partition: Option<Partition>,
}

fn query(
    case: &DsmCase,
    prompt: &RenderedPrompt,
    request: &ChatRequest,
    backend: &dyn ChatBackend,
) -> Attempt {
    match backend.complete(request) {
        Err(e) => Attempt {
            raw: String::new(),
            outcome: Outcome::TransportFailure { reason: e.to_string() },
            partition: None,
        },
        Ok(reply) => match parse_response(&reply.text, &prompt.label_map, case) {
            Ok(p) => Attempt {
                raw: reply.text,
                outcome: Outcome::Valid,
                partition: Some(p),
            },
            Err(e) => Attempt {
                raw: reply.text,
                outcome: Outcome::from_response_error(&e),
                partition: None,
            },
        },
    }
}

/// Runs the optimization loop for `config.iterations` iterations.
///
/// Backend and response failures are recorded in the trace; only
/// configuration problems are returned as errors, before any query is sent.
pub fn run(case: &DsmCase, config: &OptimizerConfig, backend: &dyn ChatBackend) -> Result<RunTrace, OptimizerError> {
    config.validate()?;
    let spec = config.effective_prompt_spec();
    let (p, q) = (spec.pool_best_p, spec.pool_random_q);
    let master = config.master_seed;

    let init_partition = singleton_partition(case);
    let initial_cost = total_cost(case, &init_partition, config.cost_params)?;
    let mut best = SolutionRecord {
        partition: init_partition,
        total_cost: initial_cost,
        iteration_found: 0,
    };
    let mut history = vec![best.clone()];
    let mut pool = update_pool(&history, p, q, derive_seed(&[master, 0, tag::POOL]));
    let mut records = Vec::with_capacity(config.iterations);
    let mut invalid_count = 0;

    for t in 1..=config.iterations {
        let prompt = render_prompt(case, &spec, &pool, &history, t)?;
        let request = ChatRequest {
            temperature: config.temperature,
            max_output_tokens: config.max_output_tokens,
            ..ChatRequest::new(prompt.system_message.clone(), prompt.user_message.clone())
        };
        let mut attempt = query(case, &prompt, &request, backend);
        let mut retried = false;
        if config.invalid_retry_in_place
            && matches!(
                attempt.outcome,
                Outcome::ParseFailure { .. } | Outcome::ValidationFailure { .. }
            )
        {
            log::debug!("iteration {t}: unusable response, re-querying once");
            attempt = query(case, &prompt, &request, backend);
            retried = true;
        }

        let mut cost = None;
        if let Some(partition) = &attempt.partition {
            let c = total_cost(case, partition, config.cost_params)?;
            let record = SolutionRecord {
                partition: partition.clone(),
                total_cost: c,
                iteration_found: t,
            };
            if c < best.total_cost {
                best = record.clone();
            }
            history.push(record);
            cost = Some(c);
        } else {
            invalid_count += 1;
            log::debug!("iteration {t}: {:?}", attempt.outcome);
        }
        records.push(IterationRecord {
            iteration: t,
            prompt_hash: prompt_hash(&prompt),
            raw_response: attempt.raw,
            outcome: attempt.outcome,
            partition: attempt.partition,
            total_cost: cost,
            best_so_far: best.total_cost,
            retried,
        });
        pool = update_pool(&history, p, q, derive_seed(&[master, t as u64, tag::POOL]));
    }

    Ok(RunTrace {
        case_name: case.name().to_owned(),
        node_ids: case.node_ids().cloned().collect(),
        backend: backend.name().to_owned(),
        config: config.clone(),
        initial_cost,
        records,
        best,
        invalid_count,
    })
}
