use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::metrics::{size_factor, total_cost, CostParams};
use crate::model::{random_partition_with, DsmCase, Partition, SolutionRecord};
use crate::seeds::{derive_seed, tag};

#[derive(Debug, Error, PartialEq)]
pub enum SaConfigError {
    #[error("cooling factor must lie in (0, 1), got {0}")]
    Alpha(f64),
    #[error("temperature_steps must be at least 1")]
    NoSteps,
    #[error("restarts must be at least 1")]
    NoRestarts,
    #[error("moves_per_step must be at least 1")]
    NoMoves,
    #[error("initial temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("target acceptance must lie in (0, 1), got {0}")]
    TargetAccept(f64),
    #[error("calibration needs at least 10 sample moves, got {0}")]
    TooFewSamples(usize),
}

/// Starting temperature: fixed, or calibrated from sampled uphill moves.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum InitialTemperature {
    #[default]
    Auto,
    Fixed(f64),
}

impl Serialize for InitialTemperature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            InitialTemperature::Auto => s.serialize_str("auto"),
            InitialTemperature::Fixed(t) => s.serialize_f64(*t),
        }
    }
}

impl<'de> Deserialize<'de> for InitialTemperature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(t) => Ok(InitialTemperature::Fixed(t)),
            Repr::Str(s) if s == "auto" => Ok(InitialTemperature::Auto),
            Repr::Str(s) => Err(serde::de::Error::custom(format!(
                "expected \"auto\" or a number, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaConfig {
    /// Geometric cooling factor.
    pub alpha: f64,
    pub temperature_steps: usize,
    /// Proposals per temperature step; `None` means `2 n`.
    pub moves_per_step: Option<usize>,
    pub restarts: usize,
    pub initial_temperature: InitialTemperature,
    /// Uphill acceptance probability targeted by the `auto` calibration.
    pub target_accept: f64,
    pub rng_seed: u64,
    pub cost_params: CostParams,
}

impl Default for SaConfig {
    fn default() -> Self {
        SaConfig {
            alpha: 0.9,
            temperature_steps: 150,
            moves_per_step: None,
            restarts: 10_000,
            initial_temperature: InitialTemperature::Auto,
            target_accept: 0.8,
            rng_seed: 0,
            cost_params: CostParams::default(),
        }
    }
}

impl SaConfig {
    /// Default schedule with the restart count scaled down for desk-scale runs.
    pub fn desk_scale() -> Self {
        SaConfig {
            restarts: 200,
            ..SaConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), SaConfigError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(SaConfigError::Alpha(self.alpha));
        }
        if self.temperature_steps == 0 {
            return Err(SaConfigError::NoSteps);
        }
        if self.restarts == 0 {
            return Err(SaConfigError::NoRestarts);
        }
        if self.moves_per_step == Some(0) {
            return Err(SaConfigError::NoMoves);
        }
        if let InitialTemperature::Fixed(t) = self.initial_temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(SaConfigError::Temperature(t));
            }
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(SaConfigError::TargetAccept(self.target_accept));
        }
        Ok(())
    }

    /// Seed of restart `index`, independent of scheduling.
    pub fn restart_seed(&self, index: usize) -> u64 {
        derive_seed(&[self.rng_seed, tag::RESTART, index as u64])
    }

    fn moves_for(&self, n: usize) -> usize {
        self.moves_per_step.unwrap_or(2 * n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaReferenceResult {
    pub best: SolutionRecord,
    pub restarts_run: usize,
    /// Best cost of each restart, in restart order.
    pub restart_costs: Vec<f64>,
}

/// Metropolis rule: non-worsening moves always pass, uphill moves pass when
/// `u < exp(-delta / T)`.
pub fn metropolis_accept(delta: f64, temperature: f64, u: f64) -> bool {
    delta <= 0.0 || u < (-delta / temperature).exp()
}

enum Proposal {
    /// Moving a lone node into a fresh module leaves the grouping unchanged.
    NoOp,
    /// Would leave a single module.
    Infeasible,
    Move(Move),
}

struct Move {
    node: usize,
    from: usize,
    to: Option<usize>,
    w_from: f64,
    w_to: f64,
    delta: f64,
}

/// Incremental TotalCost state over module slots.
struct Annealer<'a> {
    n: usize,
    rho: f64,
    neighbors: &'a [Vec<(usize, f64)>],
    slot_of: Vec<usize>,
    size: Vec<usize>,
    intra: Vec<f64>,
    live: Vec<usize>,
    live_pos: Vec<usize>,
    free: Vec<usize>,
    cost: f64,
}

impl<'a> Annealer<'a> {
    fn new(case: &DsmCase, neighbors: &'a [Vec<(usize, f64)>], start: &Partition, rho: f64) -> Self {
        let n = case.n();
        let k = start.module_count();
        let slot_of: Vec<usize> = start.assignment().iter().map(|m| m - 1).collect();
        let mut size = vec![0; n];
        let mut intra = vec![0.0; n];
        let mut cross = 0.0;
        for &s in &slot_of {
            size[s] += 1;
        }
        for l in case.links() {
            let a = slot_of[l.target];
            if a == slot_of[l.source] {
                intra[a] += l.weight;
            } else {
                cross += l.weight;
            }
        }
        let cost = (0..k).map(|s| intra[s] * size_factor(size[s], n, rho)).sum::<f64>()
            + n as f64 * cross;
        let mut live_pos = vec![usize::MAX; n];
        for (i, p) in live_pos.iter_mut().enumerate().take(k) {
            *p = i;
        }
        Annealer {
            n,
            rho,
            neighbors,
            slot_of,
            size,
            intra,
            live: (0..k).collect(),
            live_pos,
            free: (k..n).rev().collect(),
            cost,
        }
    }

    fn factor(&self, s: usize) -> f64 {
        size_factor(s, self.n, self.rho)
    }

    /// One uniformly random node to a uniformly random target among its other
    /// existing modules plus one fresh module.
    fn propose<R: Rng>(&self, rng: &mut R) -> Proposal {
        let v = rng.gen_range(0..self.n);
        let a = self.slot_of[v];
        let k = self.live.len();
        let r = rng.gen_range(0..k);
        let to = if r == self.live_pos[a] {
            None
        } else {
            Some(self.live[r])
        };
        let sa = self.size[a];
        match to {
            None if sa == 1 => return Proposal::NoOp,
            Some(_) if sa == 1 && k == 2 => return Proposal::Infeasible,
            _ => {}
        }
        let (mut w_from, mut w_to) = (0.0, 0.0);
        for &(u, w) in &self.neighbors[v] {
            let s = self.slot_of[u];
            if s == a {
                w_from += w;
            } else if Some(s) == to {
                w_to += w;
            }
        }
        let (sb, ib) = to.map_or((0, 0.0), |b| (self.size[b], self.intra[b]));
        let ia = self.intra[a];
        let delta = (ia - w_from) * self.factor(sa - 1) - ia * self.factor(sa)
            + (ib + w_to) * self.factor(sb + 1)
            - ib * self.factor(sb)
            + self.n as f64 * (w_from - w_to);
        Proposal::Move(Move {
            node: v,
            from: a,
            to,
            w_from,
            w_to,
            delta,
        })
    }

    fn apply(&mut self, m: &Move) {
        let b = match m.to {
            Some(b) => b,
            None => {
                let b = self.free.pop().expect("a non-singleton module implies a free slot");
                self.live_pos[b] = self.live.len();
                self.live.push(b);
                b
            }
        };
        self.slot_of[m.node] = b;
        self.size[m.from] -= 1;
        self.size[b] += 1;
        self.intra[m.from] -= m.w_from;
        self.intra[b] += m.w_to;
        self.cost += m.delta;
        if self.size[m.from] == 0 {
            let pos = self.live_pos[m.from];
            self.live.swap_remove(pos);
            if pos < self.live.len() {
                self.live_pos[self.live[pos]] = pos;
            }
            self.live_pos[m.from] = usize::MAX;
            self.intra[m.from] = 0.0;
            self.free.push(m.from);
        }
    }

    fn partition(&self) -> Partition {
        Partition::from_labels(&self.slot_of)
    }
}

/// Samples a random walk and returns `mean(uphill delta) / -ln(target_accept)`.
///
/// Falls back to the case's total weight when no uphill move is seen.
pub fn calibrate_initial_temperature(
    case: &DsmCase,
    sample_moves: usize,
    target_accept: f64,
    rng_seed: u64,
) -> Result<f64, SaConfigError> {
    if sample_moves < 10 {
        return Err(SaConfigError::TooFewSamples(sample_moves));
    }
    if !(target_accept > 0.0 && target_accept < 1.0) {
        return Err(SaConfigError::TargetAccept(target_accept));
    }
    let neighbors = case.undirected_neighbors();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let start = random_partition_with(case.n(), &mut rng);
    let mut walk = Annealer::new(case, &neighbors, &start, 1.0);
    let (mut sum, mut count) = (0.0, 0usize);
    for _ in 0..sample_moves {
        if let Proposal::Move(m) = walk.propose(&mut rng) {
            if m.delta > 0.0 {
                sum += m.delta;
                count += 1;
            }
            walk.apply(&m);
        }
    }
    if count == 0 {
        return Ok(case.total_weight());
    }
    Ok((sum / count as f64) / -target_accept.ln())
}

pub fn resolve_initial_temperature(case: &DsmCase, config: &SaConfig) -> Result<f64, SaConfigError> {
    match config.initial_temperature {
        InitialTemperature::Fixed(t) => Ok(t),
        InitialTemperature::Auto => calibrate_initial_temperature(
            case,
            (20 * case.n()).max(200),
            config.target_accept,
            derive_seed(&[config.rng_seed, tag::CALIBRATE]),
        ),
    }
}

fn anneal(
    case: &DsmCase,
    neighbors: &[Vec<(usize, f64)>],
    config: &SaConfig,
    t0: f64,
    restart_seed: u64,
    mut trace: Option<&mut Vec<f64>>,
) -> SolutionRecord {
    let n = case.n();
    let rho = config.cost_params.rho;
    let mut rng = ChaCha8Rng::seed_from_u64(restart_seed);
    let start = random_partition_with(n, &mut rng);
    let mut state = Annealer::new(case, neighbors, &start, rho);
    let mut best_cost = state.cost;
    let mut best = state.partition();
    let mut best_at = 0;
    let moves = config.moves_for(n);
    let mut counter = 0usize;
    let mut temperature = t0;
    for _ in 0..config.temperature_steps {
        for _ in 0..moves {
            counter += 1;
            if let Proposal::Move(m) = state.propose(&mut rng) {
                let u = if m.delta > 0.0 { rng.gen::<f64>() } else { 0.0 };
                if metropolis_accept(m.delta, temperature, u) {
                    state.apply(&m);
                    if state.cost < best_cost - 1e-9 * best_cost.abs().max(1.0) {
                        best_cost = state.cost;
                        best = state.partition();
                        best_at = counter;
                    }
                }
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(best_cost);
            }
        }
        temperature *= config.alpha;
    }
    let total_cost = total_cost(case, &best, config.cost_params)
        .expect("annealer partitions cover the case");
    SolutionRecord {
        partition: best,
        total_cost,
        iteration_found: best_at,
    }
}

/// One annealing run from a random start; returns the best partition visited.
pub fn sa_single_run(
    case: &DsmCase,
    config: &SaConfig,
    restart_seed: u64,
) -> Result<SolutionRecord, SaConfigError> {
    config.validate()?;
    let t0 = resolve_initial_temperature(case, config)?;
    Ok(anneal(case, &case.undirected_neighbors(), config, t0, restart_seed, None))
}

/// Like [`sa_single_run`], also returning the running best cost after every
/// proposal.
pub fn sa_single_run_traced(
    case: &DsmCase,
    config: &SaConfig,
    restart_seed: u64,
) -> Result<(SolutionRecord, Vec<f64>), SaConfigError> {
    config.validate()?;
    let t0 = resolve_initial_temperature(case, config)?;
    let mut trace = Vec::new();
    let rec = anneal(case, &case.undirected_neighbors(), config, t0, restart_seed, Some(&mut trace));
    Ok((rec, trace))
}

/// Best of `config.restarts` independent runs, executed in parallel.
///
/// Restart `i` uses [`SaConfig::restart_seed`], so results do not depend on
/// worker scheduling.
pub fn sa_reference(case: &DsmCase, config: &SaConfig) -> Result<SaReferenceResult, SaConfigError> {
    config.validate()?;
    let t0 = resolve_initial_temperature(case, config)?;
    let neighbors = case.undirected_neighbors();
    let runs: Vec<SolutionRecord> = (0..config.restarts)
        .into_par_iter()
        .map(|i| anneal(case, &neighbors, config, t0, config.restart_seed(i), None))
        .collect();
    let restart_costs: Vec<f64> = runs.iter().map(|r| r.total_cost).collect();
    let best = runs
        .into_iter()
        .reduce(|best, r| if r.total_cost < best.total_cost { r } else { best })
        .expect("restarts >= 1");
    Ok(SaReferenceResult {
        best,
        restarts_run: config.restarts,
        restart_costs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate_random_case;
    use crate::reference::{brute_force_optimum, DEFAULT_MAX_N};

    fn small_config(restarts: usize, seed: u64) -> SaConfig {
        SaConfig {
            restarts,
            rng_seed: seed,
            ..SaConfig::default()
        }
    }

    #[test]
    fn incremental_delta_matches_full_recomputation() {
        let case = generate_random_case(9, 0.35, (1, 9), 4).unwrap();
        let neighbors = case.undirected_neighbors();
        for rho in [1.0, 1.5] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let start = random_partition_with(case.n(), &mut rng);
            let mut st = Annealer::new(&case, &neighbors, &start, rho);
            for _ in 0..2000 {
                if let Proposal::Move(m) = st.propose(&mut rng) {
                    let before = st.cost;
                    st.apply(&m);
                    let exact = total_cost(&case, &st.partition(), CostParams { rho }).unwrap();
                    assert!((st.cost - exact).abs() < 1e-6, "{} vs {}", st.cost, exact);
                    assert!((st.cost - before - m.delta).abs() < 1e-9);
                    assert!(st.live.len() >= 2 && st.live.len() <= case.n());
                }
            }
        }
    }

    #[test]
    fn two_node_case_has_one_answer() {
        let case = generate_random_case(2, 1.0, (2, 2), 0).unwrap();
        let r = sa_single_run(&case, &small_config(1, 0), 5).unwrap();
        assert_eq!(r.partition.assignment(), &[1, 2]);
    }

    #[test]
    fn four_node_reference_hits_oracle() {
        let case = generate_random_case(4, 0.6, (1, 9), 12).unwrap();
        let oracle = brute_force_optimum(&case, CostParams::default(), DEFAULT_MAX_N).unwrap();
        let r = sa_reference(&case, &small_config(50, 1)).unwrap();
        assert!((r.best.total_cost - oracle.best.total_cost).abs() < 1e-9);
    }

    #[test]
    fn deterministic_under_seed() {
        let case = generate_random_case(7, 0.4, (1, 9), 2).unwrap();
        let cfg = small_config(20, 9);
        assert_eq!(sa_single_run(&case, &cfg, 77).unwrap(), sa_single_run(&case, &cfg, 77).unwrap());
        assert_eq!(sa_reference(&case, &cfg).unwrap(), sa_reference(&case, &cfg).unwrap());
    }

    #[test]
    fn one_restart_equals_single_run() {
        let case = generate_random_case(6, 0.5, (1, 9), 8).unwrap();
        let cfg = small_config(1, 42);
        let r = sa_reference(&case, &cfg).unwrap();
        let single = sa_single_run(&case, &cfg, cfg.restart_seed(0)).unwrap();
        assert_eq!(r.best, single);
        assert_eq!(r.restart_costs, vec![single.total_cost]);
        assert_eq!(r.restarts_run, 1);
    }

    #[test]
    fn best_is_min_of_restart_costs() {
        let case = generate_random_case(8, 0.3, (1, 9), 5).unwrap();
        let r = sa_reference(&case, &small_config(30, 3)).unwrap();
        assert_eq!(r.restart_costs.len(), 30);
        let min = r.restart_costs.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(r.best.total_cost, min);
    }

    #[test]
    fn running_best_never_increases_and_k_stays_feasible() {
        let case = generate_random_case(8, 0.4, (1, 9), 6).unwrap();
        for seed in 0..10 {
            let (rec, trace) = sa_single_run_traced(&case, &small_config(1, seed), seed).unwrap();
            assert!(trace.windows(2).all(|w| w[1] <= w[0]));
            let k = rec.partition.module_count();
            assert!((2..=case.n()).contains(&k));
        }
    }

    #[test]
    fn metropolis_at_near_zero_temperature() {
        assert!(metropolis_accept(0.0, 1e-12, 0.999));
        assert!(metropolis_accept(-3.0, 1e-12, 0.999));
        assert!(!metropolis_accept(1e-6, 1e-12, 0.0));
        assert!(!metropolis_accept(5.0, 1e-12, 1e-300));
        assert!(metropolis_accept(1.0, 1.0, 0.3));
        assert!(!metropolis_accept(1.0, 1.0, 0.4));
    }

    #[test]
    fn calibration() {
        let case = generate_random_case(6, 0.5, (1, 9), 1).unwrap();
        let t_e = calibrate_initial_temperature(&case, 500, (-1f64).exp(), 4).unwrap();
        let t_08 = calibrate_initial_temperature(&case, 500, 0.8, 4).unwrap();
        // Same sample, different target: T0 scales by 1 / -ln(target).
        assert!((t_08 - t_e / -(0.8f64).ln()).abs() < 1e-9 * t_08);
        assert_eq!(t_08, calibrate_initial_temperature(&case, 500, 0.8, 4).unwrap());
        let complete = generate_random_case(5, 1.0, (3, 3), 0).unwrap();
        assert!(calibrate_initial_temperature(&complete, 100, 0.8, 0).unwrap() > 0.0);
        assert_eq!(
            calibrate_initial_temperature(&case, 5, 0.8, 0),
            Err(SaConfigError::TooFewSamples(5))
        );
        assert!(calibrate_initial_temperature(&case, 50, 1.0, 0).is_err());
    }

    #[test]
    fn config_validation_and_serde() {
        assert!(SaConfig { alpha: 1.0, ..SaConfig::default() }.validate().is_err());
        assert!(SaConfig { restarts: 0, ..SaConfig::default() }.validate().is_err());
        assert!(SaConfig { temperature_steps: 0, ..SaConfig::default() }.validate().is_err());
        let cfg: SaConfig = serde_json::from_str(r#"{"restarts": 5, "initial_temperature": 12.5}"#).unwrap();
        assert_eq!(cfg.initial_temperature, InitialTemperature::Fixed(12.5));
        assert_eq!(cfg.alpha, 0.9);
        assert_eq!(cfg.temperature_steps, 150);
        let auto: SaConfig = serde_json::from_str(r#"{"initial_temperature": "auto"}"#).unwrap();
        assert_eq!(auto.initial_temperature, InitialTemperature::Auto);
        assert_eq!(auto.restarts, 10_000);
        assert!(serde_json::to_string(&auto).unwrap().contains("\"auto\""));
    }
}
