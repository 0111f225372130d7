//! Federated-learning substrate: data, models, client-side SGD.

pub mod client;
pub mod data;
pub mod idx;
pub mod model;

pub use client::{local_sgd, ClientState, LocalTrace, SgdConfig};
pub use data::{partition_dataset, DataSource, Dataset, DatasetSpec, Partition, Shard};
pub use model::{evaluate, Evaluation, Model, ModelKind, Objective};
