//! End-to-end pipeline: offline cloud training, then online rounds over a
//! simulated device fleet.

pub mod artifacts;
pub mod config;
pub mod data;
pub mod environment;
pub mod inspect;
pub mod offline;
pub mod online;

pub use config::{CsvDataset, DatasetConfig, DynamicsConfig, EnhanceConfig, FleetConfig, ScenarioConfig, Strategy};
pub use data::{prepare_data, PreparedData};
pub use environment::{Environment, RoundEnv};
pub use offline::{load_checkpoint, run_offline, Enhancement, OfflineBundle, OfflineSummary};
pub use inspect::{inspect, routing_histograms, ArtifactKind};
pub use online::{account_communication, run_online, Event, OnlineResult, RoundMetrics, RoundTiming};
