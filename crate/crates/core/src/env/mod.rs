//! The simulated device fleet: data, dynamics, budgets and local training.

pub mod csv_ingest;
pub mod local;
pub mod partition;
pub mod resources;
pub mod synthetic;

pub use csv_ingest::{ingest_csv, ColumnRef, CsvData, CsvSchema, Standardizer};
pub use local::{local_train, LocalConfig, LocalReport};
pub use partition::{partition_noniid, shift_data, DeviceData, KeyedPool, ShiftEvent, SkewKind};
pub use resources::{fluctuate, forced_minimum, sample_resources, sample_tiers, tier_budget, validate_tiers, DEFAULT_TIERS};
pub use synthetic::{SyntheticConfig, SyntheticTask};
