//! Closed-form weight counting, scaling fits and weight tables.

mod count;
mod probe;
mod table;

pub use count::{count_weights, WeightBreakdown, WeightRecord};
pub use probe::{block_weights, scaling_probe, ProbeFamily, ScalingFit};
pub use table::{emit_table, model_label, parse_table, sweep_rows, TableRow};
