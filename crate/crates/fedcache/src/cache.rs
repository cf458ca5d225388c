//! Pool of emulated serverless function instances: bounded in-memory blob
//! storage co-located with a kernel executor, plus keep-alive pinging,
//! provider reclamation, and replica cloning.
//!
//! Instances are in-process workers, not OS processes. Each instance
//! serializes its own operations behind a lock (one request at a time, as a
//! real function would), while distinct instances proceed in parallel.
//! Simulated time drives keep-alive and reclamation; wall-clock is only
//! measured for overhead reporting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use thiserror::Error;

use crate::kernels::{self, KernelOutput};
use crate::model::{BlobKind, BlobRecord, CacheKey, FunctionId, NonTrainingRequest, Workload};

/// Default per-function memory cap: 10 GiB.
pub const DEFAULT_CAPACITY_BYTES: u64 = 10 * (1 << 30);

/// Default window after which a simulated provider reclaims an unpinged
/// instance (functions are pinged every minute to stay warm).
pub const DEFAULT_KEEPALIVE_WINDOW_S: f64 = 60.0;

#[derive(Debug, Error, PartialEq)]
pub enum CacheError {
    #[error("instance {0} has insufficient free capacity ({1} bytes needed, {2} free)")]
    CapacityExceeded(FunctionId, u64, u64),
    #[error("instance {0} is not alive")]
    DeadInstance(FunctionId),
    #[error("unknown instance {0}")]
    UnknownInstance(FunctionId),
    #[error("key {0} is not resident on instance {1}")]
    NotResident(CacheKey, FunctionId),
    #[error("missing data for keys: {}", format_keys(.0))]
    MissingData(Vec<CacheKey>),
    #[error("kernel failed: {0}")]
    KernelFailed(String),
}

fn format_keys(keys: &[CacheKey]) -> String {
    keys.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" ")
}

/// Shared simulated clock, in seconds. Monotonic; advanced by the replay
/// driver as it consumes timestamped events.
#[derive(Debug, Clone, Default)]
pub struct SimClock(Arc<AtomicU64>);

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        f64::from_bits(self.0.load(Ordering::SeqCst))
    }

    /// Moves time forward; never backwards.
    pub fn advance_to(&self, t: f64) {
        let mut cur = self.0.load(Ordering::SeqCst);
        while f64::from_bits(cur) < t {
            match self.0.compare_exchange(cur, t.to_bits(), Ordering::SeqCst, Ordering::SeqCst) {
                Ok(_) => break,
                Err(actual) => cur = actual,
            }
        }
    }
}

/// One emulated serverless function.
#[derive(Debug)]
pub struct FunctionInstance {
    pub id: FunctionId,
    pub capacity_bytes: u64,
    pub used_bytes: u64,
    pub resident: HashMap<CacheKey, BlobRecord>,
    /// Every member of this instance's replica group, itself included.
    pub replica_group: Vec<FunctionId>,
    pub alive: bool,
    pub last_ping: f64,
    /// Simulated time until which this instance is busy executing.
    pub busy_until: f64,
}

impl FunctionInstance {
    fn new(id: FunctionId, capacity_bytes: u64, now: f64) -> Self {
        Self {
            id: id.clone(),
            capacity_bytes,
            used_bytes: 0,
            resident: HashMap::new(),
            replica_group: vec![id],
            alive: true,
            last_ping: now,
            busy_until: 0.0,
        }
    }

    pub fn free_bytes(&self) -> u64 {
        self.capacity_bytes - self.used_bytes
    }

    /// Claims this instance for `service_s` seconds of simulated execution
    /// starting no earlier than `arrival`. Returns (start, completion).
    pub fn occupy(&mut self, arrival: f64, service_s: f64) -> (f64, f64) {
        let start = self.busy_until.max(arrival);
        self.busy_until = start + service_s;
        (start, self.busy_until)
    }
}

/// Result of executing one request (or sub-request) on an instance.
#[derive(Debug, Clone)]
pub struct ExecResult {
    pub request_id: String,
    pub output: KernelOutput,
    /// Wall-clock seconds the kernel actually took on this machine. The
    /// analytic latency model reports configured per-workload compute times
    /// instead; this is kept for overhead measurements.
    pub compute_s: f64,
    pub bytes_touched: u64,
}

type SharedInstance = Arc<Mutex<FunctionInstance>>;

/// Thread-safe pool of function instances.
pub struct FunctionPool {
    instances: RwLock<BTreeMap<FunctionId, SharedInstance>>,
    next_id: AtomicU64,
    clock: SimClock,
    keepalive_window_s: f64,
    default_capacity: u64,
}

impl FunctionPool {
    pub fn new(clock: SimClock) -> Self {
        Self::with_settings(clock, DEFAULT_CAPACITY_BYTES, DEFAULT_KEEPALIVE_WINDOW_S)
    }

    pub fn with_settings(clock: SimClock, default_capacity: u64, keepalive_window_s: f64) -> Self {
        Self {
            instances: RwLock::new(BTreeMap::new()),
            next_id: AtomicU64::new(0),
            clock,
            keepalive_window_s,
            default_capacity,
        }
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn default_capacity(&self) -> u64 {
        self.default_capacity
    }

    fn shared(&self, id: &FunctionId) -> Result<SharedInstance, CacheError> {
        self.instances
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| CacheError::UnknownInstance(id.clone()))
    }

    pub fn spawn(&self, capacity_bytes: u64) -> FunctionId {
        let id = FunctionId::indexed(self.next_id.fetch_add(1, Ordering::SeqCst));
        let inst = FunctionInstance::new(id.clone(), capacity_bytes, self.clock.now());
        self.instances.write().unwrap().insert(id.clone(), Arc::new(Mutex::new(inst)));
        id
    }

    pub fn spawn_default(&self) -> FunctionId {
        self.spawn(self.default_capacity)
    }

    /// New instance whose resident set is a copy of `source` at clone time.
    /// The clone joins `source`'s replica group.
    pub fn clone_instance(&self, source: &FunctionId) -> Result<FunctionId, CacheError> {
        let src = self.shared(source)?;
        let (capacity, resident, used, group) = {
            let s = src.lock().unwrap();
            if !s.alive {
                return Err(CacheError::DeadInstance(source.clone()));
            }
            (s.capacity_bytes, s.resident.clone(), s.used_bytes, s.replica_group.clone())
        };
        let id = FunctionId::indexed(self.next_id.fetch_add(1, Ordering::SeqCst));
        let mut inst = FunctionInstance::new(id.clone(), capacity, self.clock.now());
        inst.resident = resident;
        inst.used_bytes = used;
        let mut new_group = group;
        if !new_group.contains(&id) {
            new_group.push(id.clone());
        }
        inst.replica_group = new_group.clone();
        self.instances.write().unwrap().insert(id.clone(), Arc::new(Mutex::new(inst)));
        // propagate the updated group to all members
        for member in &new_group {
            if let Ok(m) = self.shared(member) {
                m.lock().unwrap().replica_group = new_group.clone();
            }
        }
        Ok(id)
    }

    pub fn store(&self, id: &FunctionId, blob: BlobRecord) -> Result<(), CacheError> {
        let inst = self.shared(id)?;
        let mut inst = inst.lock().unwrap();
        if !inst.alive {
            return Err(CacheError::DeadInstance(id.clone()));
        }
        let extra = if inst.resident.contains_key(&blob.key) {
            // overwrite: account the size delta only
            blob.size_bytes.saturating_sub(inst.resident[&blob.key].size_bytes)
        } else {
            blob.size_bytes
        };
        if inst.used_bytes + extra > inst.capacity_bytes {
            return Err(CacheError::CapacityExceeded(id.clone(), extra, inst.free_bytes()));
        }
        let size = blob.size_bytes;
        if let Some(old) = inst.resident.insert(blob.key.clone(), blob) {
            inst.used_bytes -= old.size_bytes;
        }
        inst.used_bytes += size;
        Ok(())
    }

    pub fn evict(&self, id: &FunctionId, key: &CacheKey) -> Result<BlobRecord, CacheError> {
        let inst = self.shared(id)?;
        let mut inst = inst.lock().unwrap();
        match inst.resident.remove(key) {
            Some(blob) => {
                inst.used_bytes -= blob.size_bytes;
                Ok(blob)
            }
            None => Err(CacheError::NotResident(key.clone(), id.clone())),
        }
    }

    /// Runs the workload kernel matching `req` over the named resident
    /// blobs. Fails with `MissingData` listing every absent key so the
    /// request tracker can arrange a fallback.
    pub fn execute(
        &self,
        id: &FunctionId,
        req: &NonTrainingRequest,
        keys: &[CacheKey],
    ) -> Result<ExecResult, CacheError> {
        let inst = self.shared(id)?;
        let inst = inst.lock().unwrap();
        if !inst.alive {
            return Err(CacheError::DeadInstance(id.clone()));
        }
        let missing: Vec<CacheKey> =
            keys.iter().filter(|k| !inst.resident.contains_key(k)).cloned().collect();
        if !missing.is_empty() {
            return Err(CacheError::MissingData(missing));
        }
        let blobs: Vec<&BlobRecord> = keys.iter().map(|k| &inst.resident[k]).collect();
        let started = Instant::now();
        let output = run_kernel(req, &blobs).map_err(|e| CacheError::KernelFailed(e.to_string()))?;
        Ok(ExecResult {
            request_id: req.request_id.clone(),
            output,
            compute_s: started.elapsed().as_secs_f64(),
            bytes_touched: blobs.iter().map(|b| b.size_bytes).sum(),
        })
    }

    /// Keep-alive ping. Refreshes the liveness deadline and reports whether
    /// the instance is still alive.
    pub fn ping(&self, id: &FunctionId) -> bool {
        match self.shared(id) {
            Ok(inst) => {
                let mut inst = inst.lock().unwrap();
                if inst.alive {
                    inst.last_ping = self.clock.now();
                }
                inst.alive
            }
            Err(_) => false,
        }
    }

    pub fn ping_all(&self) -> usize {
        let ids: Vec<FunctionId> = self.alive_ids();
        ids.iter().filter(|id| self.ping(id)).count()
    }

    /// Provider-initiated reclamation: the instance dies and its memory is
    /// lost. Other instances are untouched.
    pub fn reclaim(&self, id: &FunctionId) -> Result<(), CacheError> {
        let inst = self.shared(id)?;
        let mut inst = inst.lock().unwrap();
        inst.alive = false;
        inst.resident.clear();
        inst.used_bytes = 0;
        Ok(())
    }

    /// Simulated provider sweep: reclaims every instance whose last ping is
    /// older than the keep-alive window.
    pub fn sweep_expired(&self) -> Vec<FunctionId> {
        let now = self.clock.now();
        let ids = self.alive_ids();
        let mut reclaimed = Vec::new();
        for id in ids {
            if let Ok(inst) = self.shared(&id) {
                let mut inst = inst.lock().unwrap();
                if inst.alive && now - inst.last_ping > self.keepalive_window_s {
                    inst.alive = false;
                    inst.resident.clear();
                    inst.used_bytes = 0;
                    reclaimed.push(id);
                }
            }
        }
        reclaimed
    }

    pub fn is_alive(&self, id: &FunctionId) -> bool {
        self.shared(id).map(|i| i.lock().unwrap().alive).unwrap_or(false)
    }

    pub fn contains(&self, id: &FunctionId, key: &CacheKey) -> bool {
        self.shared(id)
            .map(|i| i.lock().unwrap().resident.contains_key(key))
            .unwrap_or(false)
    }

    pub fn resident_keys(&self, id: &FunctionId) -> BTreeSet<CacheKey> {
        self.shared(id)
            .map(|i| i.lock().unwrap().resident.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn resident_blob(&self, id: &FunctionId, key: &CacheKey) -> Option<BlobRecord> {
        self.shared(id).ok().and_then(|i| i.lock().unwrap().resident.get(key).cloned())
    }

    pub fn used_bytes(&self, id: &FunctionId) -> u64 {
        self.shared(id).map(|i| i.lock().unwrap().used_bytes).unwrap_or(0)
    }

    pub fn free_bytes(&self, id: &FunctionId) -> Option<u64> {
        let inst = self.shared(id).ok()?;
        let inst = inst.lock().unwrap();
        inst.alive.then(|| inst.free_bytes())
    }

    pub fn replica_group(&self, id: &FunctionId) -> Vec<FunctionId> {
        self.shared(id).map(|i| i.lock().unwrap().replica_group.clone()).unwrap_or_default()
    }

    /// All known instance ids in spawn order, alive or not.
    pub fn all_ids(&self) -> Vec<FunctionId> {
        self.instances.read().unwrap().keys().cloned().collect()
    }

    /// Alive instance ids in spawn order.
    pub fn alive_ids(&self) -> Vec<FunctionId> {
        self.instances
            .read()
            .unwrap()
            .iter()
            .filter(|(_, inst)| inst.lock().unwrap().alive)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn alive_count(&self) -> usize {
        self.alive_ids().len()
    }

    /// Bytes resident across all alive instances.
    pub fn total_used_bytes(&self) -> u64 {
        self.instances
            .read()
            .unwrap()
            .values()
            .map(|inst| {
                let inst = inst.lock().unwrap();
                if inst.alive {
                    inst.used_bytes
                } else {
                    0
                }
            })
            .sum()
    }

    /// Books simulated execution time on an instance; returns (wait, start,
    /// completion) for the request.
    pub fn occupy(
        &self,
        id: &FunctionId,
        arrival: f64,
        service_s: f64,
    ) -> Result<(f64, f64, f64), CacheError> {
        let inst = self.shared(id)?;
        let mut inst = inst.lock().unwrap();
        if !inst.alive {
            return Err(CacheError::DeadInstance(id.clone()));
        }
        let (start, end) = inst.occupy(arrival, service_s);
        Ok((start - arrival, start, end))
    }

    /// Among `candidates`, the alive instance that frees up first (ties by
    /// id), for load-aware replica routing.
    pub fn least_busy(&self, candidates: &[FunctionId]) -> Option<FunctionId> {
        let mut best: Option<(f64, FunctionId)> = None;
        for id in candidates {
            if let Ok(inst) = self.shared(id) {
                let inst = inst.lock().unwrap();
                if !inst.alive {
                    continue;
                }
                let key = inst.busy_until;
                match &best {
                    Some((b, bid)) if (key, id) >= (*b, bid) => {}
                    _ => best = Some((key, id.clone())),
                }
            }
        }
        best.map(|(_, id)| id)
    }
}

impl std::fmt::Debug for FunctionPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FunctionPool")
            .field("instances", &self.instances.read().unwrap().len())
            .field("alive", &self.alive_count())
            .finish()
    }
}

/// Dispatches the workload kernel over the resident blobs backing a request.
pub fn run_kernel(
    req: &NonTrainingRequest,
    blobs: &[&BlobRecord],
) -> Result<KernelOutput, kernels::KernelError> {
    let param = |name: &str, default: f64| req.params.get(name).copied().unwrap_or(default);
    let updates = || -> Vec<(crate::model::ClientId, Vec<f64>)> {
        blobs
            .iter()
            .filter(|b| b.key.kind != BlobKind::Metadata)
            .map(|b| (b.key.client.clone(), b.weights.clone()))
            .collect()
    };
    let metadata = || -> Vec<crate::model::MetadataRecord> {
        blobs
            .iter()
            .filter(|b| b.key.kind == BlobKind::Metadata)
            .map(|b| b.meta.clone())
            .collect()
    };

    let mut out = KernelOutput::default();
    match req.workload {
        Workload::Inference | Workload::Eval => {
            let first = blobs.first().ok_or(kernels::KernelError::Empty)?;
            let acc = kernels::eval_stub(&first.weights, param("probe_seed", 42.0) as u64);
            out.scalars.insert("accuracy".into(), acc);
        }
        Workload::CosineSimilarity => {
            let ups = updates();
            let cos = match ups.len() {
                0 | 1 => return Err(kernels::KernelError::Empty),
                2 => kernels::cosine_similarity(&ups[0].1, &ups[1].1)?,
                _ => {
                    let weighted: Vec<(Vec<f64>, f64)> =
                        ups.iter().map(|(_, v)| (v.clone(), 1.0)).collect();
                    let mean = kernels::fedavg(&weighted)?;
                    let mut acc = 0.0;
                    for (_, v) in &ups {
                        acc += kernels::contribution_score(v, &mean)?;
                    }
                    acc / ups.len() as f64
                }
            };
            out.scalars.insert("cosine".into(), cos);
        }
        Workload::MaliciousFilter => {
            let flagged =
                kernels::malicious_filter(&updates(), param("tau", kernels::DEFAULT_FILTER_TAU))?;
            out.scalars.insert("flagged_count".into(), flagged.len() as f64);
            out.flagged = flagged;
        }
        Workload::Contribution => {
            let ups = updates();
            let weighted: Vec<(Vec<f64>, f64)> =
                ups.iter().map(|(_, v)| (v.clone(), 1.0)).collect();
            let aggregate = kernels::fedavg(&weighted)?;
            for (client, v) in &ups {
                let score = kernels::contribution_score(v, &aggregate)?;
                out.scalars.insert(format!("contribution.{client}"), score);
            }
        }
        Workload::Clustering | Workload::Personalization | Workload::SchedulingClustered => {
            let ups = updates();
            if ups.is_empty() {
                return Err(kernels::KernelError::Empty);
            }
            let points: Vec<Vec<f64>> = ups.iter().map(|(_, v)| v.clone()).collect();
            let k = (param("k", 2.0) as usize).clamp(1, points.len());
            let (assign, objectives) =
                kernels::kmeans_cluster(&points, k, 50, param("seed", 0.0) as u64)?;
            out.vectors
                .insert("assignments".into(), assign.iter().map(|a| *a as f64).collect());
            out.scalars
                .insert("objective".into(), objectives.last().copied().unwrap_or(0.0));
        }
        Workload::SchedulingPerf => {
            let meta = metadata();
            let k = param("k", 3.0) as usize;
            let selected = kernels::schedule_topk(&meta, "availability", k);
            out.scalars.insert("selected_count".into(), selected.len() as f64);
            out.flagged = selected.into_iter().collect();
        }
        Workload::HyperparamTuning => {
            let meta = metadata();
            let best = kernels::schedule_topk(&meta, "accuracy", 1);
            if let Some(best) = best.first() {
                let acc = meta
                    .iter()
                    .filter(|m| m.client.as_ref() == Some(best))
                    .filter_map(|m| m.perf.get("accuracy"))
                    .fold(f64::MIN, |a, b| a.max(*b));
                out.scalars.insert("best_accuracy".into(), acc);
                out.flagged.insert(best.clone());
            }
        }
        Workload::IncentiveTracking => {
            for (client, total) in kernels::incentive_tally(&metadata()) {
                out.scalars.insert(format!("incentive.{client}"), total);
            }
        }
        Workload::Debugging | Workload::Provenance => {
            // track one client's drift across the resident rounds
            let mut mine: Vec<&&BlobRecord> = blobs
                .iter()
                .filter(|b| {
                    b.key.kind == BlobKind::ModelUpdate
                        && req.scope_client.as_ref().is_none_or(|c| b.key.client == *c)
                })
                .collect();
            mine.sort_by_key(|b| b.key.round);
            let current = mine.last().ok_or(kernels::KernelError::Empty)?;
            let previous = (mine.len() >= 2).then(|| &mine[mine.len() - 2].weights);
            let eps = param("epsilon", 1e-9);
            let changed =
                kernels::debug_diff(&current.weights, previous.map(|v| v.as_slice()), eps);
            out.scalars.insert("changed_coords".into(), changed as f64);
            out.scalars.insert("rounds_tracked".into(), mine.len() as f64);
        }
    }
    debug_assert!(out.is_finite());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClientId, MetadataRecord, RoundId};

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const MIB: u64 = 1 << 20;
    const GIB: u64 = 1 << 30;

    fn ukey(c: &str, r: u64) -> CacheKey {
        CacheKey::update(ClientId::new(c).unwrap(), RoundId::new(r))
    }

    fn ublob(c: &str, r: u64, size: u64, weights: Vec<f64>) -> BlobRecord {
        BlobRecord {
            key: ukey(c, r),
            weights,
            size_bytes: size,
            meta: MetadataRecord::default(),
        }
    }

    fn pool() -> FunctionPool {
        FunctionPool::new(SimClock::new())
    }

    #[test]
    fn store_fits_model_in_default_instance() {
        let p = pool();
        let id = p.spawn(10 * GIB);
        let size = (84.5 * MIB as f64) as u64;
        p.store(&id, ublob("c1", 0, size, vec![1.0])).unwrap();
        assert_eq!(p.used_bytes(&id), size);
    }

    #[test]
    fn store_larger_than_capacity_fails() {
        let p = pool();
        let id = p.spawn(1024);
        let err = p.store(&id, ublob("c1", 0, 2048, vec![])).unwrap_err();
        assert!(matches!(err, CacheError::CapacityExceeded(..)));
    }

    #[test]
    fn capacity_boundary_at_10_gib() {
        // 121 blobs of 84.5 MiB fit a 10 GiB instance; the 122nd must not.
        // oracle: floor(10 * 1024 / 84.5) = 121
        let size = (84.5 * MIB as f64) as u64;
        assert_eq!((10 * GIB) / size, 121);
        let p = pool();
        let id = p.spawn(10 * GIB);
        for i in 0..121 {
            p.store(&id, ublob(&format!("c{i}"), 0, size, vec![])).unwrap();
        }
        let err = p.store(&id, ublob("c121", 0, size, vec![])).unwrap_err();
        assert!(matches!(err, CacheError::CapacityExceeded(..)));
        assert!(p.used_bytes(&id) <= 10 * GIB);
    }

    #[test]
    fn evict_and_not_resident() {
        let p = pool();
        let id = p.spawn(GIB);
        p.store(&id, ublob("c1", 0, 100, vec![])).unwrap();
        assert!(p.evict(&id, &ukey("c1", 0)).is_ok());
        assert_eq!(p.used_bytes(&id), 0);
        assert!(matches!(
            p.evict(&id, &ukey("c1", 0)),
            Err(CacheError::NotResident(..))
        ));
    }

    #[test]
    fn execute_cosine_on_identical_updates() {
        let p = pool();
        let id = p.spawn(GIB);
        p.store(&id, ublob("a", 0, 100, vec![1.0, 2.0])).unwrap();
        p.store(&id, ublob("b", 0, 100, vec![1.0, 2.0])).unwrap();
        let req = NonTrainingRequest::new("r1", Workload::CosineSimilarity, None, RoundId::new(0));
        let res = p.execute(&id, &req, &[ukey("a", 0), ukey("b", 0)]).unwrap();
        assert_eq!(res.output.scalars["cosine"], 1.0);
        assert_eq!(res.bytes_touched, 200);
    }

    #[test]
    fn execute_with_evicted_key_reports_missing() {
        let p = pool();
        let id = p.spawn(GIB);
        p.store(&id, ublob("a", 0, 100, vec![1.0])).unwrap();
        let req = NonTrainingRequest::new("r2", Workload::CosineSimilarity, None, RoundId::new(0));
        let err = p.execute(&id, &req, &[ukey("a", 0), ukey("b", 0)]).unwrap_err();
        assert_eq!(err, CacheError::MissingData(vec![ukey("b", 0)]));
    }

    #[test]
    fn execute_malicious_filter_flags_outlier() {
        let p = pool();
        let id = p.spawn(GIB);
        let mut keys = Vec::new();
        for i in 0..9 {
            let c = format!("c{i}");
            p.store(&id, ublob(&c, 0, 100, vec![1.0, 1.0 + 0.01 * i as f64])).unwrap();
            keys.push(ukey(&c, 0));
        }
        p.store(&id, ublob("outlier", 0, 100, vec![90.0, -80.0])).unwrap();
        keys.push(ukey("outlier", 0));
        let req = NonTrainingRequest::new("r3", Workload::MaliciousFilter, None, RoundId::new(0));
        let res = p.execute(&id, &req, &keys).unwrap();
        let flagged: Vec<String> =
            res.output.flagged.iter().map(|c| c.as_str().to_string()).collect();
        assert_eq!(flagged, vec!["outlier"]);
    }

    #[test]
    fn dead_instance_rejects_operations() {
        let p = pool();
        let id = p.spawn(GIB);
        p.reclaim(&id).unwrap();
        assert!(!p.is_alive(&id));
        assert!(matches!(
            p.store(&id, ublob("c", 0, 10, vec![])),
            Err(CacheError::DeadInstance(_))
        ));
        let req = NonTrainingRequest::new("r", Workload::Inference, None, RoundId::new(0));
        assert!(matches!(p.execute(&id, &req, &[]), Err(CacheError::DeadInstance(_))));
        assert!(!p.ping(&id));
    }

    #[test]
    fn reclamation_is_isolated() {
        let p = pool();
        let a = p.spawn(GIB);
        let b = p.spawn(GIB);
        p.store(&a, ublob("c1", 0, 10, vec![])).unwrap();
        p.store(&b, ublob("c2", 0, 10, vec![])).unwrap();
        p.reclaim(&a).unwrap();
        assert!(p.resident_keys(&a).is_empty());
        assert_eq!(p.resident_keys(&b).len(), 1, "other instances untouched");
    }

    #[test]
    fn clone_copies_resident_set_and_joins_group() {
        let p = pool();
        let a = p.spawn(GIB);
        p.store(&a, ublob("c1", 0, 10, vec![1.0])).unwrap();
        p.store(&a, ublob("c2", 0, 20, vec![2.0])).unwrap();
        let b = p.clone_instance(&a).unwrap();
        assert_eq!(p.resident_keys(&b), p.resident_keys(&a));
        assert_eq!(p.used_bytes(&b), 30);
        assert!(p.replica_group(&a).contains(&b));
        assert!(p.replica_group(&b).contains(&a));
        // later writes to the source do not retroactively appear in the clone
        p.store(&a, ublob("c3", 0, 5, vec![])).unwrap();
        assert_eq!(p.resident_keys(&b).len(), 2);
    }

    #[test]
    fn unpinged_instances_are_swept_after_window() {
        let clock = SimClock::new();
        let p = FunctionPool::with_settings(clock.clone(), GIB, 60.0);
        let a = p.spawn(GIB);
        let b = p.spawn(GIB);
        clock.advance_to(45.0);
        assert!(p.ping(&a));
        clock.advance_to(70.0);
        let reclaimed = p.sweep_expired();
        assert_eq!(reclaimed, vec![b.clone()]);
        assert!(p.is_alive(&a) && !p.is_alive(&b));
    }

    #[test]
    fn occupy_serializes_executions_per_instance() {
        let p = pool();
        let id = p.spawn(GIB);
        let (w1, s1, e1) = p.occupy(&id, 0.0, 2.0).unwrap();
        let (w2, s2, e2) = p.occupy(&id, 0.5, 2.0).unwrap();
        assert_eq!((w1, s1, e1), (0.0, 0.0, 2.0));
        assert_eq!((w2, s2, e2), (1.5, 2.0, 4.0));
    }

    #[test]
    fn least_busy_prefers_idle_then_lowest_id() {
        let p = pool();
        let a = p.spawn(GIB);
        let b = p.spawn(GIB);
        let c = p.spawn(GIB);
        p.occupy(&a, 0.0, 5.0).unwrap();
        p.occupy(&b, 0.0, 1.0).unwrap();
        assert_eq!(p.least_busy(&[a.clone(), b.clone(), c.clone()]), Some(c.clone()));
        p.reclaim(&c).unwrap();
        assert_eq!(p.least_busy(&[a.clone(), b.clone(), c]), Some(b));
    }

    #[test]
    fn capacity_never_exceeded_under_random_ops() {
        let clock = SimClock::new();
        let p = FunctionPool::with_settings(clock, 4096, 60.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut ids = vec![p.spawn(4096)];
        for step in 0..100_000u32 {
            let id = ids[rng.random_range(0..ids.len())].clone();
            match rng.random_range(0..6) {
                0..=2 => {
                    let size = rng.random_range(1..2048);
                    let _ = p.store(
                        &id,
                        ublob(&format!("c{}", rng.random_range(0..64u32)), 0, size, vec![]),
                    );
                }
                3 => {
                    let key = ukey(&format!("c{}", rng.random_range(0..64u32)), 0);
                    let _ = p.evict(&id, &key);
                }
                4 => {
                    if rng.random_range(0..20) == 0 {
                        let _ = p.reclaim(&id);
                    }
                }
                _ => {
                    if ids.len() < 8 {
                        if let Ok(new) = p.clone_instance(&id) {
                            ids.push(new);
                        } else {
                            ids.push(p.spawn(4096));
                        }
                    }
                }
            }
            // the mutated instance stays within bounds; full scan periodically
            let used = p.used_bytes(&id);
            let resident_total: u64 = p
                .resident_keys(&id)
                .iter()
                .map(|k| p.resident_blob(&id, k).map(|b| b.size_bytes).unwrap_or(0))
                .sum();
            assert_eq!(used, resident_total);
            assert!(used <= 4096);
            if step % 10_000 == 0 {
                for id in &ids {
                    assert!(p.used_bytes(id) <= 4096);
                }
            }
        }
    }
}
