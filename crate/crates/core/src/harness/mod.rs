//! Datasets, run configuration, the training driver, sweeps, curvature
//! probes and the verification suite.

mod config;
mod dataset;
mod idx;
mod probe;
mod sweep;
mod train;
mod verify;

pub use config::{DataConfig, RunConfig};
pub use dataset::{accuracy, make_synthetic, Dataset, Split, SyntheticKind, SyntheticSpec};
pub use idx::{concat, dataset_from_idx, load_idx, read_idx, write_idx, IdxArray};
pub use probe::{default_scan, probe, ProbeKind, ProbeOptions, NTK_CSV_SCHEMA, SPECTRA_CSV_SCHEMA};
pub use sweep::{sweep, SweepCell, SweepConfig, SweepRow, SWEEP_CSV_SCHEMA, SWEEP_FILE};
pub use train::{
    step_seed, train, train_on, Divergence, RunOutcome, RunStatus, RunSummary, SplitMetrics, CHECKPOINT_FILE,
    DIVERGED_FILE, EPOCHS_CSV_SCHEMA, EPOCHS_FILE, STEPS_CSV_SCHEMA, STEPS_FILE, SUMMARY_FILE, SUMMARY_VERSION,
};
pub use verify::{
    all_passed, census_by_beta, check_info, fit_to_interpolation, penalty_term_variance, run_check, verify, CheckInfo,
    CheckOutcome, CENSUS_THRESHOLD, CHECKS,
};

#[cfg(test)]
mod tests;
