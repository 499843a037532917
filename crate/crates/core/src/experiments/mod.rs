//! Experiment orchestration behind the command line: run configuration,
//! gap scans over `N`, the property suite, bound tables, simulations and
//! report emission. Every stochastic step draws from streams derived from
//! the configured seed, so reruns reproduce their CSV output byte for byte.

mod config;
mod gap_scan;
mod properties;
mod report;
mod runs;

pub use config::{ProbeCounts, RunConfig};
pub use gap_scan::{gap_slope, scan_n, scan_records, seed_for, GapRecord, GapSource, MAX_GRID_DIMS};
pub use properties::{
    run_property_suite, run_property_suite_with, AuditRecord, CheckStatus, PropertyCheck, PropertySummary,
    SpecBuilder, write_properties,
};
pub use report::{
    emit_plot_data, run_gap_scan, write_gap_csv, write_json, write_report, RunMeta, RunReport, GAP_SCAN_HEADER,
};
pub use runs::{
    run_audit, run_bounds, run_simulate, write_audit, write_bounds, write_simulation, write_trajectory, BoundRow,
    BoundsOutput, SimPolicy, SimRecord,
};
