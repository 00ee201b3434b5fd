//! Hessian structure: Gauss-Newton and NME products, dense extraction,
//! trace estimators, the Fisher check, the empirical NTK, the closed-form
//! second-derivative oracle and NME landscape scans.

mod analytic;
mod dense;
mod fisher;
mod ntk;
mod operator;
mod report;
mod scan;
mod trace;

pub use analytic::analytic_second_derivative;
pub use dense::{
    asymmetry, full_matrix, general_real_eigenvalues, nonzero, symmetric_eigenvalues, DEFAULT_DENSE_CAP,
};
pub use fisher::{fisher_check, output_second_derivatives, sampled_regression_labels, FisherReport};
pub use ntk::{ntk, ntk_from_operator, ntk_gn_spectra, NtkMatrix, SpectralLink};
pub use operator::{
    gnvp, nmevp, CurvatureKind, CurvatureOperator, DenseOperator, LinearOperator, LossHessian, NmeMethod,
};
pub use report::{model_hash, CurvatureReport, ReportRow, REPORT_CSV_SCHEMA, REPORT_JSON_VERSION};
pub use scan::{check_same_matrix, nme_block, nme_scan, ScanGrid, ScanSpec, SCAN_CSV_SCHEMA};
pub use trace::{
    gn_trace_sampled, gn_trace_samples, hutchinson_samples, hutchinson_trace, sample_labels, TraceEstimate,
};
pub(crate) use trace::grad_at_labels;

#[cfg(test)]
mod tests;
