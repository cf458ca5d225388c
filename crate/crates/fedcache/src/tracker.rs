//! The request tracker: receives non-training requests, resolves data
//! locations through the cache engine, routes execution to the owning
//! function instances (and their replicas on failure), tracks progress, and
//! merges per-instance results.
//!
//! Failure handling has two shapes. An instance that is already dead at
//! dispatch errors out immediately and the next replica is tried. An
//! instance that accepted a request and went silent is covered by
//! [`RequestTracker::reroute_on_timeout`], which reissues after the
//! configured wait. When every replica is gone the data is re-fetched from
//! the persistent store into a fresh instance and the request still
//! completes, just slower.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::cache::CacheError;
use crate::engine::{CacheEngine, EngineError, RequestOutcome};
use crate::kernels::KernelOutput;
use crate::model::{
    validate_request, BlobKind, CacheKey, FunctionId, NonTrainingRequest, ValidationError,
    Workload, WorkloadClass,
};

/// Default simulated wait before an unacknowledged request is reissued.
pub const DEFAULT_REROUTE_TIMEOUT_S: f64 = 2.0;

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("unknown request id {0:?}")]
    UnknownRequest(String),
    #[error("request {0} already completed")]
    AlreadyComplete(String),
    #[error("execution failed on {1}: {2}")]
    ExecFailed(String, FunctionId, CacheError),
}

/// Progress record for one request.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerEntry {
    pub request_id: String,
    pub routed_to: Vec<FunctionId>,
    pub status: bool,
    pub issued_at: f64,
    /// Dispatch rounds against the current placement. Re-fetching from the
    /// persistent store installs a fresh placement and starts counting anew,
    /// so this never exceeds 1 + k.
    pub attempts: u32,
}

/// Cross-instance merge of kernel outputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MergedResult {
    pub output: KernelOutput,
    pub bytes_touched: u64,
    pub wall_compute_s: f64,
    pub shards: usize,
}

/// Everything the caller (and the latency model) needs to know about how a
/// request was served.
#[derive(Debug, Clone)]
pub struct Submission {
    pub request_id: String,
    pub hit: bool,
    pub fetched_bytes: u64,
    pub cold_spawn: bool,
    pub dead_probes: usize,
    pub timeouts: usize,
    pub instances: Vec<FunctionId>,
    pub result: MergedResult,
}

struct PendingRequest {
    req: NonTrainingRequest,
    locations: BTreeMap<FunctionId, Vec<CacheKey>>,
    hit: bool,
    fetched_bytes: u64,
    cold_spawn: bool,
    dead_probes: usize,
    timeouts: usize,
}

/// See module docs. Thread-safe; per-request state is mutated by one routing
/// task at a time.
pub struct RequestTracker {
    engine: Arc<CacheEngine>,
    entries: Mutex<HashMap<String, TrackerEntry>>,
    pending: Mutex<HashMap<String, PendingRequest>>,
    results: Mutex<HashMap<String, MergedResult>>,
    reroute_timeout_s: f64,
    seq: AtomicU64,
}

impl RequestTracker {
    pub fn new(engine: Arc<CacheEngine>) -> Self {
        Self::with_timeout(engine, DEFAULT_REROUTE_TIMEOUT_S)
    }

    pub fn with_timeout(engine: Arc<CacheEngine>, reroute_timeout_s: f64) -> Self {
        Self {
            engine,
            entries: Mutex::new(HashMap::new()),
            pending: Mutex::new(HashMap::new()),
            results: Mutex::new(HashMap::new()),
            reroute_timeout_s,
            seq: AtomicU64::new(0),
        }
    }

    pub fn engine(&self) -> &Arc<CacheEngine> {
        &self.engine
    }

    pub fn reroute_timeout_s(&self) -> f64 {
        self.reroute_timeout_s
    }

    /// Full request lifecycle: resolve, dispatch, retry around dead
    /// instances, merge, record. Returns once the result is in.
    pub fn submit(&self, req: &NonTrainingRequest) -> Result<Submission, TrackerError> {
        let request_id = self.route(req)?;
        self.finish(&request_id)
    }

    /// Resolves data locations and records a pending entry.
    pub fn route(&self, req: &NonTrainingRequest) -> Result<String, TrackerError> {
        validate_request(req)?;
        let outcome = self.engine.handle_request(req)?;
        let request_id = if req.request_id.is_empty() {
            format!("req-{:08}", self.seq.fetch_add(1, Ordering::Relaxed))
        } else {
            req.request_id.clone()
        };
        let mut req = req.clone();
        req.request_id = request_id.clone();
        self.record_routing(&request_id, &req, outcome, 0, 0);
        Ok(request_id)
    }

    fn record_routing(
        &self,
        request_id: &str,
        req: &NonTrainingRequest,
        outcome: RequestOutcome,
        prior_timeouts: usize,
        prior_probes: usize,
    ) {
        let RequestOutcome { hit, fetched_bytes, cold_spawn, dead_probes, locations, .. } =
            outcome;
        let routed_to: Vec<FunctionId> = locations.keys().cloned().collect();
        let now = self.engine.pool().clock().now();
        {
            let mut entries = self.entries.lock().unwrap();
            let entry = entries.entry(request_id.to_string()).or_insert(TrackerEntry {
                request_id: request_id.to_string(),
                routed_to: Vec::new(),
                status: false,
                issued_at: now,
                attempts: 0,
            });
            entry.routed_to = routed_to;
            entry.status = false;
        }
        self.pending.lock().unwrap().insert(
            request_id.to_string(),
            PendingRequest {
                req: req.clone(),
                locations,
                hit,
                fetched_bytes,
                cold_spawn,
                dead_probes: dead_probes + prior_probes,
                timeouts: prior_timeouts,
            },
        );
    }

    /// Executes a routed request. Dead instances found at dispatch are
    /// retried transparently against replicas (or the re-fetch path).
    pub fn finish(&self, request_id: &str) -> Result<Submission, TrackerError> {
        for _ in 0..16 {
            match self.try_execute(request_id)? {
                Attempt::Done(sub) => return Ok(sub),
                Attempt::Failed(dead) => {
                    self.reresolve(request_id, dead, 0)?;
                }
            }
        }
        // placement churn outran us; surface the last failure honestly
        Err(TrackerError::UnknownRequest(request_id.to_string()))
    }

    /// Reissues an unacknowledged request after the reroute timeout: next
    /// replica first, re-fetch from the persistent store once none are left.
    /// The caller observes the timeout in the returned accounting.
    pub fn reroute_on_timeout(&self, request_id: &str) -> Result<(), TrackerError> {
        let dead = {
            let pending = self.pending.lock().unwrap();
            let p = pending
                .get(request_id)
                .ok_or_else(|| TrackerError::UnknownRequest(request_id.to_string()))?;
            p.locations.keys().next().cloned()
        };
        self.reresolve(request_id, dead, 1)
    }

    fn reresolve(
        &self,
        request_id: &str,
        _failed: Option<FunctionId>,
        timeouts: usize,
    ) -> Result<(), TrackerError> {
        let (req, prior_timeouts, prior_probes, prior_hit, prior_bytes, prior_cold) = {
            let pending = self.pending.lock().unwrap();
            let p = pending
                .get(request_id)
                .ok_or_else(|| TrackerError::UnknownRequest(request_id.to_string()))?;
            (
                p.req.clone(),
                p.timeouts + timeouts,
                p.dead_probes,
                p.hit,
                p.fetched_bytes,
                p.cold_spawn,
            )
        };
        let before_gets = self.engine.store().stats().gets;
        let outcome = self.engine.relocate(&req)?;
        let refetched = self.engine.store().stats().gets > before_gets;
        self.record_routing(request_id, &req, outcome, prior_timeouts, prior_probes);
        {
            let mut pending = self.pending.lock().unwrap();
            if let Some(p) = pending.get_mut(request_id) {
                // resolution-level accounting carries across reroutes
                p.hit = prior_hit;
                p.fetched_bytes += prior_bytes;
                p.cold_spawn |= prior_cold;
            }
        }
        let mut entries = self.entries.lock().unwrap();
        if let Some(entry) = entries.get_mut(request_id) {
            if refetched {
                // fresh placement generation: dispatch counting restarts
                entry.attempts = 0;
            }
        }
        Ok(())
    }

    fn try_execute(&self, request_id: &str) -> Result<Attempt, TrackerError> {
        {
            let mut entries = self.entries.lock().unwrap();
            let entry = entries
                .get_mut(request_id)
                .ok_or_else(|| TrackerError::UnknownRequest(request_id.to_string()))?;
            if entry.status {
                return Err(TrackerError::AlreadyComplete(request_id.to_string()));
            }
            entry.attempts += 1;
        }
        let (req, locations, accounting) = {
            let pending = self.pending.lock().unwrap();
            let p = pending
                .get(request_id)
                .ok_or_else(|| TrackerError::UnknownRequest(request_id.to_string()))?;
            (
                p.req.clone(),
                p.locations.clone(),
                (p.hit, p.fetched_bytes, p.cold_spawn, p.dead_probes, p.timeouts),
            )
        };

        let pool = self.engine.pool();
        let mut results = Vec::new();
        for (instance, keys) in &locations {
            let exec_keys = self.exec_key_set(&req, instance, keys);
            match pool.execute(instance, &req, &exec_keys) {
                Ok(res) => results.push(res),
                Err(CacheError::DeadInstance(id)) | Err(CacheError::UnknownInstance(id)) => {
                    let mut pending = self.pending.lock().unwrap();
                    if let Some(p) = pending.get_mut(request_id) {
                        p.dead_probes += 1;
                    }
                    return Ok(Attempt::Failed(Some(id)));
                }
                Err(CacheError::MissingData(_)) => {
                    // resident set changed under us; resolve again
                    return Ok(Attempt::Failed(Some(instance.clone())));
                }
                Err(e) => {
                    return Err(TrackerError::ExecFailed(
                        request_id.to_string(),
                        instance.clone(),
                        e,
                    ))
                }
            }
        }

        let merged = merge_results(req.workload, &results);
        // exactly-once: the first completed execution wins, duplicates from
        // late reroutes are discarded
        let result = {
            let mut all = self.results.lock().unwrap();
            all.entry(request_id.to_string()).or_insert(merged).clone()
        };
        {
            let mut entries = self.entries.lock().unwrap();
            if let Some(entry) = entries.get_mut(request_id) {
                entry.status = true;
            }
        }
        self.pending.lock().unwrap().remove(request_id);

        let (hit, fetched_bytes, cold_spawn, dead_probes, timeouts) = accounting;
        // replica upkeep: restore the configured redundancy after faults
        let k = self.engine.replicas_k();
        if k > 0 {
            for key in locations.values().flatten() {
                let _ = self.engine.ensure_replicas(key, k);
            }
        }
        Ok(Attempt::Done(Submission {
            request_id: request_id.to_string(),
            hit,
            fetched_bytes,
            cold_spawn,
            dead_probes,
            timeouts,
            instances: locations.keys().cloned().collect(),
            result,
        }))
    }

    /// The keys an instance should compute over: the request's own keys plus
    /// co-resident context the workload naturally consumes (the rest of the
    /// round for round-scoped analyses, the metadata window for p4, the
    /// neighbouring rounds for cross-round tracking).
    fn exec_key_set(
        &self,
        req: &NonTrainingRequest,
        instance: &FunctionId,
        keys: &[CacheKey],
    ) -> Vec<CacheKey> {
        let mut set: BTreeSet<CacheKey> = keys.iter().cloned().collect();
        let resident = self.engine.pool().resident_keys(instance);
        match req.class {
            WorkloadClass::P1 => {}
            WorkloadClass::P2 => {
                set.extend(
                    resident
                        .iter()
                        .filter(|k| {
                            k.kind == BlobKind::ModelUpdate && k.round == req.scope_round
                        })
                        .cloned(),
                );
            }
            WorkloadClass::P3 => {
                if let Some(client) = &req.scope_client {
                    set.extend(
                        resident
                            .iter()
                            .filter(|k| {
                                k.kind == BlobKind::ModelUpdate
                                    && k.client == *client
                                    && k.round <= req.scope_round
                                    && k.round.value() + 1 >= req.scope_round.value()
                            })
                            .cloned(),
                    );
                }
            }
            WorkloadClass::P4 => {
                set.extend(resident.iter().filter(|k| k.kind == BlobKind::Metadata).cloned());
            }
        }
        set.into_iter().collect()
    }

    pub fn poll(&self, request_id: &str) -> Result<TrackerEntry, TrackerError> {
        self.entries
            .lock()
            .unwrap()
            .get(request_id)
            .cloned()
            .ok_or_else(|| TrackerError::UnknownRequest(request_id.to_string()))
    }

    pub fn result(&self, request_id: &str) -> Option<MergedResult> {
        self.results.lock().unwrap().get(request_id).cloned()
    }

    /// Ensures `k` secondary copies of a key's placement.
    pub fn replicate(&self, key: &CacheKey, k: usize) -> Result<usize, TrackerError> {
        Ok(self.engine.ensure_replicas(key, k)?)
    }

    pub fn entry_count(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    /// Estimated bookkeeping bytes for the entry table.
    pub fn memory_overhead(&self) -> usize {
        const SLOT: usize = 48;
        let entries = self.entries.lock().unwrap();
        entries
            .values()
            .map(|e| {
                e.request_id.len() * 2
                    + e.routed_to.iter().map(|f| f.as_str().len() + 8).sum::<usize>()
                    + SLOT
                    + std::mem::size_of::<TrackerEntry>()
            })
            .sum()
    }
}

impl std::fmt::Debug for RequestTracker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RequestTracker")
            .field("entries", &self.entry_count())
            .field("reroute_timeout_s", &self.reroute_timeout_s)
            .finish()
    }
}

enum Attempt {
    Done(Submission),
    Failed(Option<FunctionId>),
}

/// Combines per-instance kernel outputs into one result. Per-client scalar
/// namespaces and flag sets union; unnamespaced scalars average across
/// shards; vectors keep a shard suffix when more than one instance ran.
fn merge_results(workload: Workload, results: &[crate::cache::ExecResult]) -> MergedResult {
    let mut merged = MergedResult {
        shards: results.len(),
        bytes_touched: results.iter().map(|r| r.bytes_touched).sum(),
        wall_compute_s: results.iter().map(|r| r.compute_s).sum(),
        ..Default::default()
    };
    let mut scalar_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (shard, res) in results.iter().enumerate() {
        merged.output.flagged.extend(res.output.flagged.iter().cloned());
        for (name, value) in &res.output.scalars {
            if name.contains('.') {
                merged.output.scalars.insert(name.clone(), *value);
            } else {
                let slot = scalar_sums.entry(name.clone()).or_insert((0.0, 0));
                slot.0 += value;
                slot.1 += 1;
            }
        }
        for (name, vec) in &res.output.vectors {
            let key = if results.len() == 1 {
                name.clone()
            } else {
                format!("{name}.{shard}")
            };
            merged.output.vectors.insert(key, vec.clone());
        }
    }
    for (name, (sum, n)) in scalar_sums {
        let value = match (workload, name.as_str()) {
            // counts add up across shards, everything else averages
            (_, "flagged_count" | "selected_count" | "rounds_tracked" | "changed_coords") => sum,
            _ => sum / n as f64,
        };
        merged.output.scalars.insert(name, value);
    }
    merged
}
