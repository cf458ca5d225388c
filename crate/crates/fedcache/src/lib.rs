//! A desk-scale cache and execution plane for federated-learning
//! non-training workloads.
//!
//! Client model updates and metadata stream in from training; a cache
//! engine splits hot data from cold using workload-tailored caching
//! policies, places hot blobs in the memory of emulated serverless function
//! instances, and a request tracker routes non-training requests to the
//! instances already holding their data so they execute in place. A
//! persistent store keeps everything cold as the fallback, replica groups
//! and keep-alive pinging cover function reclamations, and an analytic
//! latency/cost model compares the unified plane against
//! aggregator-plus-object-store and aggregator-plus-cloud-cache baselines.

pub mod cache;
pub mod engine;
pub mod kernels;
pub mod model;
pub mod policy;
pub mod store;
pub mod tracker;

pub use cache::{FunctionPool, SimClock};
pub use engine::CacheEngine;
pub use model::{
    BlobKind, BlobRecord, CacheKey, ClientId, CostParams, FunctionId, MetadataRecord,
    NonTrainingRequest, RoundId, Workload, WorkloadClass,
};
pub use policy::{CachePolicy, HitStats, PolicyDecision, PolicyRegistry, PolicySettings};
pub use store::PersistentStore;
