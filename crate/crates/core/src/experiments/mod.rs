//! Sweeps over techniques, pruning factors, weighting factors and seeds, and
//! the curve files derived from them.

mod config;
mod curves;
mod sweep;

pub use config::{grid, parse_dataset, ExperimentConfig, Overrides, IDX_FILES};
pub use curves::{
    accuracy_vs_delta, accuracy_vs_rho, emit_curves, time_vs_target, CurveKind, DeltaPoint, RhoPoint, SeedStats, TimePoint,
};
pub use sweep::{
    cell_row, enumerate_cells, run_sweep, CellKey, CellStatus, ResultRow, ResultTable, TargetResult, CELLS_DIR, RESULTS_FILE,
    TARGETS_FILE,
};
