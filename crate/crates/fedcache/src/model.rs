//! Shared domain types: cache keys, blob records, typed non-training
//! requests, and the cost/bandwidth constants used by the latency and cost
//! models.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved client id under which aggregated models are keyed so that they
/// share the (client, round) keyspace with per-client updates.
pub const AGG_CLIENT: &str = "AGG";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ValidationError {
    #[error("client id must be non-empty")]
    EmptyClientId,
    #[error("request {0}: class {1} requires scope_client")]
    MissingScopeClient(String, WorkloadClass),
    #[error("request {0}: workload {1} maps to {2}, got {3}")]
    ClassMismatch(String, Workload, WorkloadClass, WorkloadClass),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("size_bytes must be > 0")]
    ZeroSize,
    #[error("blob key does not match record key")]
    KeyMismatch,
    #[error("unknown workload {0:?}")]
    UnknownWorkload(String),
    #[error("unknown workload class {0:?}")]
    UnknownClass(String),
    #[error("invalid cost parameter: {0}")]
    BadCostParam(&'static str),
}

/// Identifier of one training client within a job's pool.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(String);

impl ClientId {
    pub fn new(id: impl Into<String>) -> Result<Self, ValidationError> {
        let id = id.into();
        if id.is_empty() {
            return Err(ValidationError::EmptyClientId);
        }
        Ok(Self(id))
    }

    /// The reserved id for aggregated models.
    pub fn aggregate() -> Self {
        Self(AGG_CLIENT.to_string())
    }

    pub fn is_aggregate(&self) -> bool {
        self.0 == AGG_CLIENT
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Training round index. Rounds within a job are contiguous, starting at the
/// job's configured origin (0 or 1).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct RoundId(pub u64);

impl RoundId {
    pub fn new(round: u64) -> Self {
        Self(round)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn next(self) -> Self {
        Self(self.0 + 1)
    }

    /// Previous round, or `None` at the origin of the keyspace.
    pub fn prev(self) -> Option<Self> {
        self.0.checked_sub(1).map(Self)
    }
}

impl fmt::Display for RoundId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// What a cached blob is: a per-client model update, an aggregated model, or
/// a configuration/performance metadata record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlobKind {
    #[serde(rename = "update")]
    ModelUpdate,
    #[serde(rename = "agg")]
    AggregatedModel,
    #[serde(rename = "meta")]
    Metadata,
}

impl BlobKind {
    /// Stable token used in trace files and on-disk file extensions.
    pub fn token(self) -> &'static str {
        match self {
            BlobKind::ModelUpdate => "update",
            BlobKind::AggregatedModel => "agg",
            BlobKind::Metadata => "meta",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        match s {
            "update" => Some(BlobKind::ModelUpdate),
            "agg" => Some(BlobKind::AggregatedModel),
            "meta" => Some(BlobKind::Metadata),
            _ => None,
        }
    }
}

/// Addresses one cached blob; the unit of placement.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey {
    pub client: ClientId,
    pub round: RoundId,
    pub kind: BlobKind,
}

impl CacheKey {
    pub fn update(client: ClientId, round: RoundId) -> Self {
        Self { client, round, kind: BlobKind::ModelUpdate }
    }

    pub fn aggregated(round: RoundId) -> Self {
        Self { client: ClientId::aggregate(), round, kind: BlobKind::AggregatedModel }
    }

    pub fn metadata(client: ClientId, round: RoundId) -> Self {
        Self { client, round, kind: BlobKind::Metadata }
    }

    /// Approximate heap + inline footprint, used by bookkeeping overhead
    /// estimates.
    pub fn approx_bytes(&self) -> usize {
        std::mem::size_of::<Self>() + self.client.as_str().len()
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.client, self.round, self.kind.token())
    }
}

/// Configuration and performance metadata attached to a client round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetadataRecord {
    pub hyperparameters: BTreeMap<String, f64>,
    pub perf: BTreeMap<String, f64>,
    pub round: RoundId,
    pub client: Option<ClientId>,
}

impl MetadataRecord {
    pub fn validate(&self) -> Result<(), ValidationError> {
        for (k, v) in self.hyperparameters.iter().chain(self.perf.iter()) {
            if !v.is_finite() {
                return Err(ValidationError::NonFinite(k.clone()));
            }
        }
        Ok(())
    }
}

/// A model update or aggregated model as an opaque weight vector plus its
/// accounted byte size. `size_bytes` is authoritative for capacity and
/// transfer-latency purposes; the weight vector may be much shorter than
/// `size_bytes / 8` so large simulated models stay cheap to handle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobRecord {
    pub key: CacheKey,
    pub weights: Vec<f64>,
    pub size_bytes: u64,
    pub meta: MetadataRecord,
}

impl BlobRecord {
    pub fn new(
        key: CacheKey,
        weights: Vec<f64>,
        size_bytes: u64,
        meta: MetadataRecord,
    ) -> Result<Self, ValidationError> {
        if size_bytes == 0 {
            return Err(ValidationError::ZeroSize);
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
            return Err(ValidationError::NonFinite(format!("weight {w}")));
        }
        meta.validate()?;
        Ok(Self { key, weights, size_bytes, meta })
    }
}

/// The four data-access classes non-training workloads fall into, which
/// double as the names of the tailored caching policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadClass {
    /// Single client update or the aggregated model.
    P1,
    /// All client updates of one round (and the next).
    P2,
    /// One client's updates across consecutive rounds.
    P3,
    /// Configuration and performance metadata over a recent-round window.
    P4,
}

impl WorkloadClass {
    pub const ALL: [WorkloadClass; 4] =
        [WorkloadClass::P1, WorkloadClass::P2, WorkloadClass::P3, WorkloadClass::P4];

    pub fn as_str(self) -> &'static str {
        match self {
            WorkloadClass::P1 => "p1",
            WorkloadClass::P2 => "p2",
            WorkloadClass::P3 => "p3",
            WorkloadClass::P4 => "p4",
        }
    }
}

impl fmt::Display for WorkloadClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WorkloadClass {
    type Err = ValidationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "p1" => Ok(WorkloadClass::P1),
            "p2" => Ok(WorkloadClass::P2),
            "p3" => Ok(WorkloadClass::P3),
            "p4" => Ok(WorkloadClass::P4),
            _ => Err(ValidationError::UnknownClass(s.to_string())),
        }
    }
}

/// The thirteen non-training workload types routed through the system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Workload {
    Inference,
    Eval,
    MaliciousFilter,
    Contribution,
    Clustering,
    CosineSimilarity,
    Personalization,
    SchedulingPerf,
    SchedulingClustered,
    Debugging,
    Provenance,
    IncentiveTracking,
    HyperparamTuning,
}

impl Workload {
    pub const ALL: [Workload; 13] = [
        Workload::Inference,
        Workload::Eval,
        Workload::MaliciousFilter,
        Workload::Contribution,
        Workload::Clustering,
        Workload::CosineSimilarity,
        Workload::Personalization,
        Workload::SchedulingPerf,
        Workload::SchedulingClustered,
        Workload::Debugging,
        Workload::Provenance,
        Workload::IncentiveTracking,
        Workload::HyperparamTuning,
    ];

    /// The data-access class this workload needs. Serving/evaluation touch a
    /// single model; round-scoped analyses touch every update of a round;
    /// debugging and provenance follow one client across rounds; the rest
    /// read only metadata.
    pub fn class(self) -> WorkloadClass {
        match self {
            Workload::Inference | Workload::Eval => WorkloadClass::P1,
            Workload::MaliciousFilter
            | Workload::Contribution
            | Workload::Clustering
            | Workload::CosineSimilarity
            | Workload::Personalization
            | Workload::SchedulingClustered => WorkloadClass::P2,
            Workload::Debugging | Workload::Provenance => WorkloadClass::P3,
            Workload::SchedulingPerf
            | Workload::IncentiveTracking
            | Workload::HyperparamTuning => WorkloadClass::P4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Workload::Inference => "inference",
            Workload::Eval => "eval",
            Workload::MaliciousFilter => "malicious_filter",
            Workload::Contribution => "contribution",
            Workload::Clustering => "clustering",
            Workload::CosineSimilarity => "cosine_similarity",
            Workload::Personalization => "personalization",
            Workload::SchedulingPerf => "scheduling_perf",
            Workload::SchedulingClustered => "scheduling_clustered",
            Workload::Debugging => "debugging",
            Workload::Provenance => "provenance",
            Workload::IncentiveTracking => "incentive_tracking",
            Workload::HyperparamTuning => "hyperparam_tuning",
        }
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Workload {
    type Err = ValidationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Workload::ALL
            .iter()
            .copied()
            .find(|w| w.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| ValidationError::UnknownWorkload(s.to_string()))
    }
}

/// A typed non-training request flowing through the request tracker.
///
/// `scope_client`/`scope_round` narrow the request to a concrete key range;
/// round-scoped workloads may leave `scope_client` empty to address every
/// update of the round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonTrainingRequest {
    pub request_id: String,
    pub workload: Workload,
    pub class: WorkloadClass,
    pub scope_client: Option<ClientId>,
    pub scope_round: RoundId,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl NonTrainingRequest {
    pub fn new(
        request_id: impl Into<String>,
        workload: Workload,
        scope_client: Option<ClientId>,
        scope_round: RoundId,
    ) -> Self {
        Self {
            request_id: request_id.into(),
            workload,
            class: workload.class(),
            scope_client,
            scope_round,
            params: BTreeMap::new(),
        }
    }
}

/// Checks a request's internal consistency: the declared class must match
/// the workload's class and cross-round workloads must name a client.
pub fn validate_request(req: &NonTrainingRequest) -> Result<&NonTrainingRequest, ValidationError> {
    let expected = req.workload.class();
    if req.class != expected {
        return Err(ValidationError::ClassMismatch(
            req.request_id.clone(),
            req.workload,
            expected,
            req.class,
        ));
    }
    if req.class == WorkloadClass::P3 && req.scope_client.is_none() {
        return Err(ValidationError::MissingScopeClient(req.request_id.clone(), req.class));
    }
    for (k, v) in &req.params {
        if !v.is_finite() {
            return Err(ValidationError::NonFinite(k.clone()));
        }
    }
    Ok(req)
}

/// Identifier of one emulated serverless function instance. Ids are
/// zero-padded so lexicographic order equals spawn order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FunctionId(String);

impl FunctionId {
    pub fn indexed(n: u64) -> Self {
        Self(format!("fn-{n:06}"))
    }

    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Price and link constants for the latency/cost model. Dollar outputs
/// derived from these are modelled estimates under configurable rates, not
/// reproductions of any provider's bill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Egress price per GB moved out of the data plane.
    pub egress_per_gb: f64,
    /// Serverless compute price per GB-second.
    pub fn_compute_per_gb_s: f64,
    /// In-memory cloud cache node price per hour (Cache-Agg baseline).
    pub cache_instance_per_hr: f64,
    /// Dedicated aggregator instance price per hour (both baselines).
    pub agg_instance_per_hr: f64,
    /// Object store per-GET request charge.
    pub objstore_get_per_req: f64,
    /// Object store per-PUT request charge.
    pub objstore_put_per_req: f64,
    /// Object-store link bandwidth, Gbit/s. Also used for cold fetches into
    /// the function cache.
    pub bandwidth_gbps: f64,
    /// Control-message round trip, seconds. The hit path pays exactly this.
    pub rtt_s: f64,
    /// In-memory cache tier bandwidth, Gbit/s (Cache-Agg baseline).
    pub cache_bandwidth_gbps: f64,
    /// In-memory cache tier round trip, seconds.
    pub cache_rtt_s: f64,
    /// Monthly cost of keep-alive pinging one cached function.
    pub ping_cost_per_fn_month: f64,
    /// Bytes written back to the data plane per completed request.
    pub result_bytes: u64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            egress_per_gb: 0.09,
            fn_compute_per_gb_s: 0.0000166667,
            cache_instance_per_hr: 0.068,
            agg_instance_per_hr: 0.922,
            objstore_get_per_req: 0.0000004,
            objstore_put_per_req: 0.000005,
            bandwidth_gbps: 0.08,
            rtt_s: 0.05,
            cache_bandwidth_gbps: 0.8,
            cache_rtt_s: 0.04,
            ping_cost_per_fn_month: 0.0087,
            result_bytes: 1 << 20,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<(), ValidationError> {
        let nonneg = [
            ("egress_per_gb", self.egress_per_gb),
            ("fn_compute_per_gb_s", self.fn_compute_per_gb_s),
            ("cache_instance_per_hr", self.cache_instance_per_hr),
            ("agg_instance_per_hr", self.agg_instance_per_hr),
            ("objstore_get_per_req", self.objstore_get_per_req),
            ("objstore_put_per_req", self.objstore_put_per_req),
            ("rtt_s", self.rtt_s),
            ("cache_rtt_s", self.cache_rtt_s),
            ("ping_cost_per_fn_month", self.ping_cost_per_fn_month),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ValidationError::BadCostParam(name));
            }
        }
        if !(self.bandwidth_gbps.is_finite() && self.bandwidth_gbps > 0.0) {
            return Err(ValidationError::BadCostParam("bandwidth_gbps"));
        }
        if !(self.cache_bandwidth_gbps.is_finite() && self.cache_bandwidth_gbps > 0.0) {
            return Err(ValidationError::BadCostParam("cache_bandwidth_gbps"));
        }
        Ok(())
    }
}
