//! Fully-distributed training of graph convolutional networks.
//!
//! A data graph is split across agents that only exchange explicit messages:
//! partial sums of neighbour features during inference and backpropagation,
//! and parameter vectors during the consensus step. The crate contains the
//! centralized reference model ([`gcn`]), the message-passing engine
//! ([`distributed`]), mixing-matrix construction ([`topology`]), graph and
//! partition tooling ([`graph`]), diagnostics ([`metrics`]), synthetic
//! benchmarks ([`synthetic`]), dataset I/O ([`dataset`]) and the experiment
//! pipeline ([`experiment`]).

pub mod comm;
pub mod dataset;
pub mod distributed;
pub mod error;
pub mod experiment;
pub mod gcn;
pub mod graph;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod rng;
pub mod sparse;
pub mod synthetic;
pub mod topology;

pub use comm::CommGraph;
pub use distributed::{train_distributed, DistConfig, DistRun, ExecMode, Network};
pub use error::{Error, Result};
pub use gcn::{Activation, Basis, LayerSpec, ModelSpec, ParamBank, TrainConfig};
pub use graph::{normalize_shift, partition_bfs, prune_to_comm, DataGraph, Labels, Partition, ShiftKind};
pub use metrics::TrainRecord;
pub use optim::{OptimizerKind, ScheduleKind, ScheduleSpec};
pub use topology::{design_mixing_admm, metropolis_weights, AdmmOptions, MixingMatrix};
pub use dataset::{load_dataset, write_dataset, DatasetSummary};
pub use experiment::{run_experiment, ExperimentConfig, ModelKind, Period};
pub use report::{report, Summary};
pub use synthetic::{generate_synthetic, SbmSpec, SensorGridSpec, SyntheticSpec};
