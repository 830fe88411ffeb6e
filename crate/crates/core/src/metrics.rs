//! TotalCost, clustering efficiency, Gap% and run aggregation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DsmCase, Partition, PartitionError};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error("case has zero total interaction weight")]
    ZeroWeight,
    #[error("reference cost must be positive, got {0}")]
    NonPositiveReference(f64),
    #[error("cannot aggregate an empty list")]
    Empty,
}

/// Parameters of the TotalCost objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    /// Size-penalty exponent applied to `|M_k| / n`.
    pub rho: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams { rho: 1.0 }
    }
}

/// The two terms of TotalCost plus the raw weight split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    /// Weight of edges whose endpoints share a module.
    pub intra_weight: f64,
    /// `sum_k intra_k * |M_k|^rho / n^rho`.
    pub intra_term: f64,
    /// Weight of edges crossing modules.
    pub cross_weight: f64,
    pub total: f64,
}

#[inline]
pub(crate) fn size_factor(size: usize, n: usize, rho: f64) -> f64 {
    if rho == 1.0 {
        size as f64 / n as f64
    } else {
        (size as f64).powf(rho) / (n as f64).powf(rho)
    }
}

pub fn cost_breakdown(
    case: &DsmCase,
    partition: &Partition,
    params: CostParams,
) -> Result<CostBreakdown, MetricError> {
    partition.check_covers(case)?;
    let n = case.n();
    let mut intra = vec![0.0; partition.module_count()];
    let mut cross = 0.0;
    for l in case.links() {
        let a = partition.module_of(l.target);
        if a == partition.module_of(l.source) {
            intra[a - 1] += l.weight;
        } else {
            cross += l.weight;
        }
    }
    let sizes = partition.module_sizes();
    let intra_term: f64 = intra
        .iter()
        .zip(&sizes)
        .map(|(&w, &s)| w * size_factor(s, n, params.rho))
        .sum();
    Ok(CostBreakdown {
        intra_weight: intra.iter().sum(),
        intra_term,
        cross_weight: cross,
        total: intra_term + n as f64 * cross,
    })
}

/// Thebeau's TotalCost. Defined for any total partition, including `K = 1`.
pub fn total_cost(
    case: &DsmCase,
    partition: &Partition,
    params: CostParams,
) -> Result<f64, MetricError> {
    cost_breakdown(case, partition, params).map(|b| b.total)
}

/// Fraction of total interaction weight that stays within modules.
pub fn clustering_efficiency(case: &DsmCase, partition: &Partition) -> Result<f64, MetricError> {
    let b = cost_breakdown(case, partition, CostParams::default())?;
    let total = case.total_weight();
    if total <= 0.0 {
        return Err(MetricError::ZeroWeight);
    }
    Ok((b.intra_weight / total).clamp(0.0, 1.0))
}

/// Relative excess over the reference, in percent.
pub fn gap_percent(total_cost: f64, sa_reference: f64) -> Result<f64, MetricError> {
    if !(sa_reference > 0.0) {
        return Err(MetricError::NonPositiveReference(sa_reference));
    }
    Ok((total_cost - sa_reference) / sa_reference * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdKind {
    #[default]
    Population,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub min: f64,
    pub max: f64,
}

/// Mean and population standard deviation.
pub fn aggregate(values: &[f64]) -> Result<Aggregate, MetricError> {
    aggregate_with(values, StdKind::Population)
}

pub fn aggregate_with(values: &[f64], kind: StdKind) -> Result<Aggregate, MetricError> {
    if values.is_empty() {
        return Err(MetricError::Empty);
    }
    let count = values.len();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = (values.iter().sum::<f64>() / count as f64).clamp(min, max);
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let denom = match kind {
        StdKind::Population => count as f64,
        StdKind::Sample if count > 1 => (count - 1) as f64,
        StdKind::Sample => 1.0,
    };
    Ok(Aggregate {
        mean,
        std: (ss / denom).sqrt(),
        count,
        min,
        max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_random_case, singleton_partition, DsmCase};

    fn chain() -> DsmCase {
        DsmCase::from_json(
            r#"{"name":"t","dsm_type":"activity","domain":"d",
            "nodes":[{"id":"N1"},{"id":"N2"},{"id":"N3"}],
            "edges":[{"target":"N2","source":"N1","weight":1},{"target":"N3","source":"N2","weight":3}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn trivial_partitions() {
        let case = generate_random_case(7, 0.4, (1, 9), 3).unwrap();
        let w = case.total_weight();
        let one = Partition::from_canonical(vec![1; 7]).unwrap();
        let single = singleton_partition(&case);
        let p = CostParams::default();
        assert_eq!(total_cost(&case, &one, p).unwrap(), w);
        assert_eq!(total_cost(&case, &single, p).unwrap(), 7.0 * w);
        assert_eq!(clustering_efficiency(&case, &one).unwrap(), 1.0);
        assert_eq!(clustering_efficiency(&case, &single).unwrap(), 0.0);
    }

    #[test]
    fn chain_efficiency_and_cost() {
        let case = chain();
        let p = Partition::from_canonical(vec![1, 1, 2]).unwrap();
        assert_eq!(clustering_efficiency(&case, &p).unwrap(), 0.25);
        // Intra: 1 * 2/3, cross: 3 * n.
        let cost = total_cost(&case, &p, CostParams::default()).unwrap();
        assert!((cost - (2.0 / 3.0 + 9.0)).abs() < 1e-12);
    }

    #[test]
    fn rho_exponent_is_applied() {
        let case = chain();
        let p = Partition::from_canonical(vec![1, 1, 2]).unwrap();
        let cost = total_cost(&case, &p, CostParams { rho: 2.0 }).unwrap();
        assert!((cost - (4.0 / 9.0 + 9.0)).abs() < 1e-12);
    }

    #[test]
    fn partition_size_mismatch_is_an_error() {
        let case = chain();
        let p = Partition::from_canonical(vec![1, 2]).unwrap();
        assert!(matches!(
            total_cost(&case, &p, CostParams::default()),
            Err(MetricError::Partition(PartitionError::SizeMismatch { .. }))
        ));
    }

    #[test]
    fn gap_values() {
        assert_eq!(gap_percent(1371.0, 1371.0).unwrap(), 0.0);
        assert_eq!(gap_percent(2742.0, 1371.0).unwrap(), 100.0);
        let g = gap_percent(1420.8, 1371.0).unwrap();
        assert!((g - 3.632385120350109).abs() < 1e-9);
        assert!(gap_percent(1.0, 0.0).is_err());
        assert!(gap_percent(1.0, -3.0).is_err());
    }

    #[test]
    fn aggregates() {
        let a = aggregate(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!((a.mean, a.std, a.count), (5.0, 0.0, 3));
        let b = aggregate(&[1.0, 3.0]).unwrap();
        assert_eq!((b.mean, b.std, b.min, b.max), (2.0, 1.0, 1.0, 3.0));
        let c = aggregate(&[450.0; 10]).unwrap();
        assert_eq!(format!("{:.1}±{:.1}", c.mean, c.std), "450.0±0.0");
        let s = aggregate_with(&[1.0, 3.0], StdKind::Sample).unwrap();
        assert!((s.std - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(aggregate(&[]), Err(MetricError::Empty));
        let tenth = aggregate(&[0.1; 10]).unwrap();
        assert!(tenth.min <= tenth.mean && tenth.mean <= tenth.max);
    }
}
