//! The cache engine: receives incoming blobs, consults the active caching
//! policy to split hot from cold, places hot blobs on function instances,
//! and tracks every placement in a hash map keyed by cache key.
//!
//! Everything is persisted to the cold store regardless of classification;
//! the engine only decides what is additionally worth keeping in function
//! memory.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::cache::{CacheError, FunctionPool};
use crate::model::{BlobRecord, CacheKey, FunctionId, NonTrainingRequest};
use crate::policy::{
    required_keys, CachePolicy, HitStats, PolicyDecision, RoundLedger,
};
use crate::store::{PersistentStore, StoreError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("data unavailable for keys: {}", .0.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" "))]
    DataUnavailable(Vec<CacheKey>),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// Primary location plus secondary copies for every hot key.
#[derive(Debug, Default)]
pub struct PlacementMap {
    entries: HashMap<CacheKey, FunctionId>,
    replicas: HashMap<CacheKey, Vec<FunctionId>>,
}

impl PlacementMap {
    pub fn primary(&self, key: &CacheKey) -> Option<&FunctionId> {
        self.entries.get(key)
    }

    pub fn replicas(&self, key: &CacheKey) -> &[FunctionId] {
        self.replicas.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &CacheKey> {
        self.entries.keys()
    }

    fn insert(&mut self, key: CacheKey, primary: FunctionId, secondaries: Vec<FunctionId>) {
        self.entries.insert(key.clone(), primary);
        if secondaries.is_empty() {
            self.replicas.remove(&key);
        } else {
            self.replicas.insert(key, secondaries);
        }
    }

    fn remove(&mut self, key: &CacheKey) -> Option<FunctionId> {
        self.replicas.remove(key);
        self.entries.remove(key)
    }

    /// Rough bookkeeping footprint in bytes.
    fn approx_bytes(&self) -> usize {
        const SLOT: usize = 48; // hash-map slot plus id storage
        let entry_bytes: usize =
            self.entries.keys().map(|k| k.approx_bytes() + SLOT + 16).sum();
        let replica_bytes: usize = self
            .replicas
            .iter()
            .map(|(k, v)| k.approx_bytes() + SLOT + v.len() * 24)
            .sum();
        entry_bytes + replica_bytes
    }
}

/// How an ingested blob was classified and where it went.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestOutcome {
    pub hot: bool,
    pub instance: Option<FunctionId>,
    pub evicted: usize,
    /// Set when the policy wanted the blob hot but no instance could host
    /// it; the blob stayed cold in the persistent store.
    pub capacity_warning: bool,
}

/// Resolution of one request against the cache.
#[derive(Debug, Clone)]
pub struct RequestOutcome {
    /// True when every addressed key was already resident (one hit event);
    /// false means one miss event with a synchronous store fetch.
    pub hit: bool,
    /// Bytes fetched from the persistent store on the miss path, charged to
    /// this request's communication latency.
    pub fetched_bytes: u64,
    /// Whether the miss path had to spawn a fresh instance (cold start).
    pub cold_spawn: bool,
    /// Dead instances probed before finding live copies.
    pub dead_probes: usize,
    /// The addressed keys grouped by the instance that will serve them.
    pub locations: BTreeMap<FunctionId, Vec<CacheKey>>,
    pub keys: Vec<CacheKey>,
}

struct EngineState {
    placement: PlacementMap,
    ledger: RoundLedger,
    policy: Box<dyn CachePolicy>,
    stats: HitStats,
}

/// See module docs. Thread-safe; decisions are applied atomically with
/// respect to lookups.
pub struct CacheEngine {
    pool: Arc<FunctionPool>,
    store: Arc<PersistentStore>,
    state: Mutex<EngineState>,
    max_instances: Option<usize>,
    replicas_k: usize,
}

impl CacheEngine {
    pub fn new(
        pool: Arc<FunctionPool>,
        store: Arc<PersistentStore>,
        policy: Box<dyn CachePolicy>,
    ) -> Self {
        Self {
            pool,
            store,
            state: Mutex::new(EngineState {
                placement: PlacementMap::default(),
                ledger: RoundLedger::default(),
                policy,
                stats: HitStats::default(),
            }),
            max_instances: None,
            replicas_k: 0,
        }
    }

    /// Caps how many instances the engine may spawn (used to model
    /// capacity-limited deployments). `None` is unlimited.
    pub fn with_max_instances(mut self, max: Option<usize>) -> Self {
        self.max_instances = max;
        self
    }

    /// Keeps `k` secondary copies of every hot placement.
    pub fn with_replicas(mut self, k: usize) -> Self {
        self.replicas_k = k;
        self
    }

    pub fn pool(&self) -> &Arc<FunctionPool> {
        &self.pool
    }

    pub fn store(&self) -> &Arc<PersistentStore> {
        &self.store
    }

    pub fn replicas_k(&self) -> usize {
        self.replicas_k
    }

    pub fn set_policy(&self, policy: Box<dyn CachePolicy>) {
        let mut state = self.state.lock().unwrap();
        state.policy = policy;
        state.stats = HitStats::default();
    }

    pub fn policy_name(&self) -> String {
        self.state.lock().unwrap().policy.name()
    }

    pub fn hit_stats(&self) -> HitStats {
        self.state.lock().unwrap().stats
    }

    pub fn ledger_snapshot(&self) -> RoundLedger {
        self.state.lock().unwrap().ledger.clone()
    }

    pub fn tracked_keys(&self) -> usize {
        self.state.lock().unwrap().placement.len()
    }

    /// Primary location of a key, if any was recorded. The instance may have
    /// been reclaimed since; callers needing live data use the resolution in
    /// [`Self::handle_request`].
    pub fn lookup(&self, key: &CacheKey) -> Option<FunctionId> {
        self.state.lock().unwrap().placement.primary(key).cloned()
    }

    pub fn replica_set(&self, key: &CacheKey) -> Vec<FunctionId> {
        self.state.lock().unwrap().placement.replicas(key).to_vec()
    }

    /// Ingest from training: always persisted cold; additionally cached hot
    /// when the active policy (or an in-flight request) claims it.
    pub fn ingest(
        &self,
        blob: BlobRecord,
        current_requests: &[NonTrainingRequest],
    ) -> Result<IngestOutcome, EngineError> {
        let key = blob.key.clone();
        self.store.put(&key, blob.clone())?;

        let mut state = self.state.lock().unwrap();
        state.ledger.record(&key);
        let mut decision = {
            let EngineState { policy, ledger, .. } = &mut *state;
            policy.on_ingest(&key, ledger)
        };
        // a blob that an in-flight request is waiting on is hot by demand,
        // whatever the policy's window says
        if !decision.cache_now.contains(&key) {
            let wanted = current_requests
                .iter()
                .any(|r| required_keys(r, &state.ledger).contains(&key));
            if wanted {
                decision.cache_now.insert(key.clone());
                decision.evict.remove(&key);
            }
        }
        let hot = decision.cache_now.contains(&key);
        let applied = self.apply_locked(&mut state, decision, Some(&blob), None)?;
        let instance = state.placement.primary(&key).cloned();
        Ok(IngestOutcome {
            hot: hot && instance.is_some(),
            instance,
            evicted: applied.evicted,
            capacity_warning: applied.capacity_warning,
        })
    }

    /// Best-fit among alive instances with room; spawns when nothing fits
    /// and the instance budget allows.
    pub fn choose_instance(&self, size_bytes: u64) -> Option<FunctionId> {
        self.choose_instance_inner(size_bytes).0
    }

    fn choose_instance_inner(&self, size_bytes: u64) -> (Option<FunctionId>, bool) {
        let mut best: Option<(u64, FunctionId)> = None;
        for id in self.pool.alive_ids() {
            if let Some(free) = self.pool.free_bytes(&id) {
                if free >= size_bytes {
                    let slack = free - size_bytes;
                    match &best {
                        Some((s, bid)) if (slack, id.clone()) >= (*s, bid.clone()) => {}
                        _ => best = Some((slack, id)),
                    }
                }
            }
        }
        if let Some((_, id)) = best {
            return (Some(id), false);
        }
        if let Some(max) = self.max_instances {
            if self.pool.all_ids().len() >= max {
                return (None, false);
            }
        }
        let capacity = self.pool.default_capacity().max(size_bytes);
        (Some(self.pool.spawn(capacity)), true)
    }

    /// Applies a policy decision: prefetches into function memory, evicts
    /// what the policy retired. Atomic with respect to `lookup`.
    pub fn apply_decision(&self, decision: PolicyDecision) -> Result<ApplyReport, EngineError> {
        let mut state = self.state.lock().unwrap();
        self.apply_locked(&mut state, decision, None, None)
    }

    fn apply_locked(
        &self,
        state: &mut EngineState,
        decision: PolicyDecision,
        ingest_payload: Option<&BlobRecord>,
        charge_keys: Option<&[CacheKey]>,
    ) -> Result<ApplyReport, EngineError> {
        let mut report = ApplyReport::default();

        for key in decision.evict.iter() {
            let members: Vec<FunctionId> = state
                .placement
                .primary(key)
                .cloned()
                .into_iter()
                .chain(state.placement.replicas(key).iter().cloned())
                .collect();
            for id in members {
                let _ = self.pool.evict(&id, key);
            }
            if state.placement.remove(key).is_some() {
                report.evicted += 1;
            }
        }

        for key in decision.cache_now.iter().chain(decision.prefetch.iter()) {
            if self.resident_anywhere(state, key) {
                continue;
            }
            let blob = match ingest_payload {
                Some(b) if b.key == *key => Some(b.clone()),
                _ => self.store.get(key).ok(),
            };
            let Some(blob) = blob else {
                continue; // not produced yet: stays a standing claim
            };
            let size = blob.size_bytes;
            match self.place_locked(state, blob) {
                Ok((_, spawned)) => {
                    report.fetched += 1;
                    report.fetched_bytes += size;
                    if charge_keys.is_some_and(|c| c.contains(key)) {
                        // part of what the request is waiting on: its
                        // transfer is on the request's critical path
                        report.charged_bytes += size;
                        report.cold_spawn |= spawned;
                    }
                }
                Err(EngineError::Cache(CacheError::CapacityExceeded(..))) => {
                    report.capacity_warning = true; // stays cold
                }
                Err(e) => return Err(e),
            }
        }
        Ok(report)
    }

    fn resident_anywhere(&self, state: &EngineState, key: &CacheKey) -> bool {
        let candidates: Vec<FunctionId> = state
            .placement
            .primary(key)
            .cloned()
            .into_iter()
            .chain(state.placement.replicas(key).iter().cloned())
            .collect();
        candidates
            .iter()
            .any(|id| self.pool.is_alive(id) && self.pool.contains(id, key))
    }

    /// Stores a blob hot: picks an instance, writes through to its replica
    /// group, and records the placement.
    fn place_locked(
        &self,
        state: &mut EngineState,
        blob: BlobRecord,
    ) -> Result<(FunctionId, bool), EngineError> {
        let size = blob.size_bytes;
        let (primary, spawned) = self.choose_instance_inner(size);
        let Some(primary) = primary else {
            return Err(EngineError::Cache(CacheError::CapacityExceeded(
                FunctionId::new("<none>"),
                size,
                0,
            )));
        };
        self.pool.store(&primary, blob.clone())?;
        let mut secondaries = Vec::new();
        for member in self.pool.replica_group(&primary) {
            if member == primary || !self.pool.is_alive(&member) {
                continue;
            }
            if self.pool.store(&member, blob.clone()).is_ok() {
                secondaries.push(member);
            }
        }
        state.placement.insert(blob.key.clone(), primary.clone(), secondaries);
        if self.replicas_k > 0 {
            self.ensure_replicas_locked(state, &blob.key, self.replicas_k)?;
        }
        Ok((primary, spawned))
    }

    /// Guarantees `k` live secondary copies of `key`, cloning instances as
    /// needed. Returns how many clones were created.
    pub fn ensure_replicas(&self, key: &CacheKey, k: usize) -> Result<usize, EngineError> {
        let mut state = self.state.lock().unwrap();
        self.ensure_replicas_locked(&mut state, key, k)
    }

    fn ensure_replicas_locked(
        &self,
        state: &mut EngineState,
        key: &CacheKey,
        k: usize,
    ) -> Result<usize, EngineError> {
        let Some(primary) = state.placement.primary(key).cloned() else {
            return Ok(0);
        };
        let source = if self.pool.is_alive(&primary) && self.pool.contains(&primary, key) {
            primary.clone()
        } else {
            match state
                .placement
                .replicas(key)
                .iter()
                .find(|id| self.pool.is_alive(id) && self.pool.contains(id, key))
            {
                Some(live) => live.clone(),
                None => return Ok(0), // nothing live to clone from
            }
        };
        let mut live_secondaries: Vec<FunctionId> = self
            .pool
            .replica_group(&source)
            .into_iter()
            .filter(|id| *id != source && self.pool.is_alive(id) && self.pool.contains(id, key))
            .collect();
        let mut created = 0;
        while live_secondaries.len() < k {
            let clone = self.pool.clone_instance(&source)?;
            live_secondaries.push(clone);
            created += 1;
        }
        // the source serves as primary from here on
        let resident = self.pool.resident_keys(&source);
        for res_key in &resident {
            let secondaries: Vec<FunctionId> = live_secondaries
                .iter()
                .filter(|id| self.pool.contains(id, res_key))
                .cloned()
                .collect();
            state.placement.insert(res_key.clone(), source.clone(), secondaries);
        }
        Ok(created)
    }

    /// Serves one request: records the hit/miss event, lets the policy
    /// react, fetches whatever the request still needs from the cold store,
    /// and reports where each key can be executed.
    pub fn handle_request(
        &self,
        req: &NonTrainingRequest,
    ) -> Result<RequestOutcome, EngineError> {
        self.resolve(req, true)
    }

    /// Re-resolution after a failure: same placement repair and re-fetch
    /// behaviour as [`Self::handle_request`], but the request was already
    /// counted once, so neither hit accounting nor the policy see it again.
    pub fn relocate(&self, req: &NonTrainingRequest) -> Result<RequestOutcome, EngineError> {
        self.resolve(req, false)
    }

    fn resolve(
        &self,
        req: &NonTrainingRequest,
        first_attempt: bool,
    ) -> Result<RequestOutcome, EngineError> {
        let mut state = self.state.lock().unwrap();
        let keys = required_keys(req, &state.ledger);
        if keys.is_empty() {
            return Err(EngineError::DataUnavailable(vec![CacheKey::update(
                req.scope_client
                    .clone()
                    .unwrap_or_else(crate::model::ClientId::aggregate),
                req.scope_round,
            )]));
        }

        let mut dead_probes = 0usize;
        let mut locations: BTreeMap<FunctionId, Vec<CacheKey>> = BTreeMap::new();
        let mut missing = Vec::new();
        for key in &keys {
            match self.locate_live(&mut state, key, &mut dead_probes) {
                Some(id) => locations.entry(id).or_default().push(key.clone()),
                None => missing.push(key.clone()),
            }
        }
        let hit = missing.is_empty();

        // every absent key must exist cold, or the request cannot be served
        let unavailable: Vec<CacheKey> = missing
            .iter()
            .filter(|k| !self.store.contains(k))
            .cloned()
            .collect();
        if !unavailable.is_empty() {
            return Err(EngineError::DataUnavailable(unavailable));
        }

        let mut fetched_bytes = 0u64;
        let mut cold_spawn = false;
        if first_attempt {
            state.stats.record(hit);
            let decision = {
                let EngineState { policy, ledger, .. } = &mut *state;
                policy.on_request(req, ledger)
            };
            let applied = self.apply_locked(&mut state, decision, None, Some(&missing))?;
            fetched_bytes = applied.charged_bytes;
            cold_spawn = applied.cold_spawn;
        }
        for key in &missing {
            if self.resident_anywhere(&state, key) {
                continue; // the policy's decision already pulled it in
            }
            let blob = self.store.get(key)?;
            fetched_bytes += blob.size_bytes;
            let (_, spawned) = self.place_locked(&mut state, blob)?;
            cold_spawn |= spawned;
        }
        for key in &missing {
            match self.locate_live(&mut state, key, &mut dead_probes) {
                Some(id) => locations.entry(id).or_default().push(key.clone()),
                None => return Err(EngineError::DataUnavailable(vec![key.clone()])),
            }
        }

        Ok(RequestOutcome { hit, fetched_bytes, cold_spawn, dead_probes, locations, keys })
    }

    /// Finds a live instance holding `key`, promoting a secondary when the
    /// primary died. Counts dead candidates probed along the way.
    fn locate_live(
        &self,
        state: &mut EngineState,
        key: &CacheKey,
        dead_probes: &mut usize,
    ) -> Option<FunctionId> {
        let primary = state.placement.primary(key).cloned()?;
        if self.pool.is_alive(&primary) && self.pool.contains(&primary, key) {
            return Some(primary);
        }
        *dead_probes += 1;
        let replicas = state.placement.replicas(key).to_vec();
        for candidate in replicas {
            if self.pool.is_alive(&candidate) && self.pool.contains(&candidate, key) {
                // promote: subsequent lookups route straight to the survivor
                let remaining: Vec<FunctionId> = state
                    .placement
                    .replicas(key)
                    .iter()
                    .filter(|id| {
                        **id != candidate && self.pool.is_alive(id) && self.pool.contains(id, key)
                    })
                    .cloned()
                    .collect();
                state.placement.insert(key.clone(), candidate.clone(), remaining);
                return Some(candidate);
            }
            *dead_probes += 1;
        }
        None
    }

    /// Estimated bookkeeping bytes: placement entries, replica lists and the
    /// ingest ledger.
    pub fn memory_overhead(&self) -> usize {
        let state = self.state.lock().unwrap();
        state.placement.approx_bytes() + state.ledger.tracked_keys() * 72
    }

    /// Placement/instance consistency: every mapped key is resident on its
    /// primary unless that instance was reclaimed. Used by fault-injection
    /// checks.
    pub fn placement_consistent(&self) -> bool {
        let state = self.state.lock().unwrap();
        let consistent = state.placement.keys().all(|key| {
            let primary = state.placement.primary(key).unwrap();
            !self.pool.is_alive(primary) || self.pool.contains(primary, key)
        });
        consistent
    }

    /// All hot keys with a live copy, for resident-set invariant checks.
    pub fn resident_hot_keys(&self) -> Vec<CacheKey> {
        let state = self.state.lock().unwrap();
        state
            .placement
            .keys()
            .filter(|k| self.resident_anywhere(&state, k))
            .cloned()
            .collect()
    }
}

impl std::fmt::Debug for CacheEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let state = self.state.lock().unwrap();
        f.debug_struct("CacheEngine")
            .field("policy", &state.policy.name())
            .field("tracked_keys", &state.placement.len())
            .field("stats", &state.stats)
            .finish()
    }
}

/// What applying a decision did. Byte counts are simulated blob sizes, the
/// unit the transfer-latency model works in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ApplyReport {
    pub fetched: usize,
    pub fetched_bytes: u64,
    /// Portion of `fetched_bytes` on a request's critical path.
    pub charged_bytes: u64,
    pub evicted: usize,
    pub cold_spawn: bool,
    pub capacity_warning: bool,
}
