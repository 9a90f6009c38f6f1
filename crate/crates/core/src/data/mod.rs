//! Schema-typed tabular data with explicit missing cells.

mod dataset;
pub mod iv;
mod schema;
pub mod split;
mod stats;
pub mod synth;

pub use dataset::{load_csv, read_csv, write_csv, write_csv_to, Cell, Dataset, DATE_FORMAT};
pub use iv::{feature_groups, information_value, rank_features, FeatureRanking};
pub use schema::{FeatureKind, FeatureSchema, FeatureSpec, LabelKind, LabelSpec};
pub use split::{parse_date, temporal_split, Month, TemporalSplit};
pub use stats::{instance_missing_ratio, instance_ratio_histogram, missing_rates, MissingnessStats};
pub use synth::{synth_generate, SynthConfig};
