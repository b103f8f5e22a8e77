//! Federated learning simulator with NFL (negative federated learning)
//! monitoring and LINDT dual-model recovery.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod fed;
pub mod harness;
pub mod lindt;
pub mod monitor;
pub mod nn;
pub mod rng;

pub use data::{
    allocate, generate_task, AllocationScheme, ClientDataset, Dataset, MixedGroup, Partition, SizeDistribution,
    SyntheticTask, SyntheticTaskSpec,
};
pub use error::{Error, Result};
pub use eval::{gain, nfl_verdict, ClientGain, GainReport, WeightScheme};
pub use fed::{AttackConfig, ClientState, ClientUpload, DpConfig, FederationConfig, LabelFlip, LocalSchedule, NoiseDraw};
pub use harness::{
    compare_runs, export, replay, run_scenario, ExportFormat, Metric, RoundRecord, RunEvent, RunLog, ScenarioConfig,
    Simulation,
};
pub use lindt::{LindtConfig, RecoveryState, RunningMode, Serving, StoppingStrategy};
pub use monitor::{DetectorConfig, DetectorState};
pub use nn::{Activation, Batch, LayerStack, WeightVector};
