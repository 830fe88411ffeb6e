//! Reference solvers: simulated annealing with restarts and an exhaustive
//! oracle for small instances.

mod brute;
mod sa;

pub use brute::{bell_number, brute_force_optimum, BruteForceError, BruteForceResult, SetPartitions, DEFAULT_MAX_N};
pub use sa::{
    calibrate_initial_temperature, metropolis_accept, resolve_initial_temperature, sa_reference,
    sa_single_run, sa_single_run_traced, InitialTemperature, SaConfig, SaConfigError,
    SaReferenceResult,
};
