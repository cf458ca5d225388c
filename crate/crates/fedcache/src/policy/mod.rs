//! Caching policies: the tailored workload-aware policies (p1-p4, plus the
//! auto dispatcher) and the reactive baselines (lru, lfu, fifo) and ablation
//! variants (random, static). Every policy implements [`CachePolicy`] and is
//! constructed by name through [`PolicyRegistry`], so the engine, CLI and
//! tests select them interchangeably at runtime.

mod ablation;
mod baseline;
mod tailored;

pub use ablation::{RandomPolicy, StaticPolicy};
pub use baseline::{ReactiveKind, ReactivePolicy};
pub use tailored::{AutoPolicy, P1Policy, P2Policy, P3Policy, P4Policy};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::model::{
    BlobKind, CacheKey, ClientId, NonTrainingRequest, RoundId, WorkloadClass,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("unknown policy {0:?} (known: {1})")]
    Unknown(String, String),
    #[error("policy {0:?} requires an argument, e.g. {0}:p2")]
    MissingArg(String),
    #[error("bad policy argument {1:?} for {0}")]
    BadArg(String, String),
}

/// Table 1 of the workload taxonomy as an operation: the caching-policy
/// class for each workload.
pub fn classify_workload(w: crate::model::Workload) -> WorkloadClass {
    w.class()
}

/// Per-event output of a caching policy.
///
/// `cache_now` is data the serving path needs resident immediately,
/// `prefetch` is data to stage for imminent requests, `evict` is data whose
/// usefulness has passed. The sets never overlap.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PolicyDecision {
    pub cache_now: BTreeSet<CacheKey>,
    pub prefetch: BTreeSet<CacheKey>,
    pub evict: BTreeSet<CacheKey>,
}

impl PolicyDecision {
    /// Builds a decision with the disjointness invariant enforced: keys being
    /// cached or prefetched are never simultaneously evicted.
    pub fn normalized(
        cache_now: BTreeSet<CacheKey>,
        prefetch: BTreeSet<CacheKey>,
        mut evict: BTreeSet<CacheKey>,
    ) -> Self {
        evict.retain(|k| !cache_now.contains(k) && !prefetch.contains(k));
        Self { cache_now, prefetch, evict }
    }

    pub fn is_empty(&self) -> bool {
        self.cache_now.is_empty() && self.prefetch.is_empty() && self.evict.is_empty()
    }

    /// Combines another decision into this one; caching intent wins over
    /// eviction when policies disagree.
    pub fn merge(&mut self, other: PolicyDecision) {
        self.cache_now.extend(other.cache_now);
        self.prefetch.extend(other.prefetch);
        self.evict.extend(other.evict);
        let keep: BTreeSet<CacheKey> =
            self.cache_now.union(&self.prefetch).cloned().collect();
        self.evict.retain(|k| !keep.contains(k));
    }

    pub fn is_disjoint(&self) -> bool {
        self.cache_now.is_disjoint(&self.evict) && self.prefetch.is_disjoint(&self.evict)
    }
}

/// Hit/miss accounting in miss-event terms: a request counts one hit when
/// every key it addresses is resident, otherwise one miss (however many keys
/// the resulting fetch loads).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HitStats {
    pub hits: u64,
    pub misses: u64,
}

impl HitStats {
    pub fn record(&mut self, resident: bool) {
        if resident {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.hits + self.misses
    }

    pub fn hit_rate(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.hits as f64 / self.total() as f64
        }
    }

    /// Hit fraction truncated to two decimals, the way the hit-% column is
    /// conventionally reported (19999/20000 prints as 0.99, not 1.00).
    pub fn hit_pct_truncated(&self) -> f64 {
        (self.hit_rate() * 100.0).floor() / 100.0
    }

    /// Compact rendering of [`Self::hit_pct_truncated`]: "0.99", "0.98", "1", "0".
    pub fn hit_pct_display(&self) -> String {
        let s = format!("{:.2}", self.hit_pct_truncated());
        let s = s.trim_end_matches('0').trim_end_matches('.');
        if s.is_empty() {
            "0".to_string()
        } else {
            s.to_string()
        }
    }
}

/// What has been ingested so far: the client roster per round and the latest
/// rounds per blob kind. Policies consult it to expand round-scoped key sets
/// and to recognise freshly arriving rounds.
#[derive(Debug, Default, Clone)]
pub struct RoundLedger {
    update_clients: BTreeMap<RoundId, BTreeSet<ClientId>>,
    meta_clients: BTreeMap<RoundId, BTreeSet<ClientId>>,
    agg_rounds: BTreeSet<RoundId>,
}

impl RoundLedger {
    pub fn record(&mut self, key: &CacheKey) {
        match key.kind {
            BlobKind::ModelUpdate => {
                self.update_clients.entry(key.round).or_default().insert(key.client.clone());
            }
            BlobKind::Metadata => {
                self.meta_clients.entry(key.round).or_default().insert(key.client.clone());
            }
            BlobKind::AggregatedModel => {
                self.agg_rounds.insert(key.round);
            }
        }
    }

    pub fn exists(&self, key: &CacheKey) -> bool {
        match key.kind {
            BlobKind::ModelUpdate => self
                .update_clients
                .get(&key.round)
                .is_some_and(|c| c.contains(&key.client)),
            BlobKind::Metadata => {
                self.meta_clients.get(&key.round).is_some_and(|c| c.contains(&key.client))
            }
            BlobKind::AggregatedModel => self.agg_rounds.contains(&key.round),
        }
    }

    pub fn update_keys(&self, round: RoundId) -> Vec<CacheKey> {
        self.update_clients
            .get(&round)
            .map(|clients| {
                clients.iter().map(|c| CacheKey::update(c.clone(), round)).collect()
            })
            .unwrap_or_default()
    }

    pub fn meta_keys(&self, round: RoundId) -> Vec<CacheKey> {
        self.meta_clients
            .get(&round)
            .map(|clients| {
                clients.iter().map(|c| CacheKey::metadata(c.clone(), round)).collect()
            })
            .unwrap_or_default()
    }

    pub fn latest_update_round(&self) -> Option<RoundId> {
        self.update_clients.keys().next_back().copied()
    }

    pub fn latest_meta_round(&self) -> Option<RoundId> {
        self.meta_clients.keys().next_back().copied()
    }

    pub fn latest_agg_round(&self) -> Option<RoundId> {
        self.agg_rounds.iter().next_back().copied()
    }

    pub fn client_update_rounds(&self, client: &ClientId) -> Vec<RoundId> {
        self.update_clients
            .iter()
            .filter(|(_, clients)| clients.contains(client))
            .map(|(r, _)| *r)
            .collect()
    }

    pub fn tracked_keys(&self) -> usize {
        self.update_clients.values().map(BTreeSet::len).sum::<usize>()
            + self.meta_clients.values().map(BTreeSet::len).sum::<usize>()
            + self.agg_rounds.len()
    }
}

/// The keys a request addresses, expanded against the ledger's roster.
/// A request with an explicit client scope touches that client's blob; a
/// round-scoped request without one touches the whole round.
pub fn required_keys(req: &NonTrainingRequest, ledger: &RoundLedger) -> Vec<CacheKey> {
    let r = req.scope_round;
    match req.class {
        WorkloadClass::P1 => match &req.scope_client {
            Some(c) => vec![CacheKey::update(c.clone(), r)],
            None => vec![CacheKey::aggregated(r)],
        },
        WorkloadClass::P2 => match &req.scope_client {
            Some(c) => vec![CacheKey::update(c.clone(), r)],
            None => ledger.update_keys(r),
        },
        WorkloadClass::P3 => match &req.scope_client {
            Some(c) => vec![CacheKey::update(c.clone(), r)],
            None => vec![],
        },
        WorkloadClass::P4 => match &req.scope_client {
            Some(c) => vec![CacheKey::metadata(c.clone(), r)],
            None => ledger.meta_keys(r),
        },
    }
}

/// A caching policy: a single-threaded state machine owned by the cache
/// engine. Decisions are pure given (state, event).
pub trait CachePolicy: Send {
    /// Registry name plus any argument, e.g. "p2", "lru", "static:p1".
    fn name(&self) -> String;

    /// Called when a request is about to be served.
    fn on_request(&mut self, req: &NonTrainingRequest, ledger: &RoundLedger) -> PolicyDecision;

    /// Called when a blob arrives from training. An empty decision leaves
    /// the blob cold (persistent store only).
    fn on_ingest(&mut self, key: &CacheKey, ledger: &RoundLedger) -> PolicyDecision;
}

impl fmt::Debug for dyn CachePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CachePolicy({})", self.name())
    }
}

/// Tunables shared by policy constructors.
#[derive(Debug, Clone)]
pub struct PolicySettings {
    /// Reactive-baseline capacity in entries (byte capacity / mean blob
    /// size, for a fair comparison with the tailored policies).
    pub baseline_capacity_entries: usize,
    /// Metadata window length R for p4.
    pub p4_window_rounds: u64,
    /// How many recent aggregated models p1 retains.
    pub p1_keep_latest: usize,
    /// Seed for the random ablation policy.
    pub random_seed: u64,
}

impl Default for PolicySettings {
    fn default() -> Self {
        Self {
            baseline_capacity_entries: 121,
            p4_window_rounds: 10,
            p1_keep_latest: 2,
            random_seed: 0,
        }
    }
}

type PolicyFactory =
    fn(&PolicySettings, Option<&str>) -> Result<Box<dyn CachePolicy>, PolicyError>;

/// Name-indexed policy constructors. `create("static:p2", ..)` parses the
/// argument after the colon.
pub struct PolicyRegistry {
    entries: Vec<(&'static str, PolicyFactory)>,
}

impl Default for PolicyRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PolicyRegistry {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    /// Registry with every built-in policy.
    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register("p1", |s, _| Ok(Box::new(P1Policy::new(s.p1_keep_latest))));
        reg.register("p2", |_, _| Ok(Box::new(P2Policy::new())));
        reg.register("p3", |_, _| Ok(Box::new(P3Policy::new())));
        reg.register("p4", |s, _| Ok(Box::new(P4Policy::new(s.p4_window_rounds))));
        reg.register("auto", |s, _| Ok(Box::new(AutoPolicy::new(s))));
        reg.register("lru", |s, _| {
            Ok(Box::new(ReactivePolicy::new(ReactiveKind::Lru, s.baseline_capacity_entries)))
        });
        reg.register("lfu", |s, _| {
            Ok(Box::new(ReactivePolicy::new(ReactiveKind::Lfu, s.baseline_capacity_entries)))
        });
        reg.register("fifo", |s, _| {
            Ok(Box::new(ReactivePolicy::new(ReactiveKind::Fifo, s.baseline_capacity_entries)))
        });
        reg.register("random", |s, _| Ok(Box::new(RandomPolicy::new(s))));
        reg.register("static", |s, arg| {
            let arg = arg.ok_or_else(|| PolicyError::MissingArg("static".into()))?;
            let class: WorkloadClass = arg
                .parse()
                .map_err(|_| PolicyError::BadArg("static".into(), arg.to_string()))?;
            Ok(Box::new(StaticPolicy::new(class, s)))
        });
        reg
    }

    pub fn register(&mut self, name: &'static str, factory: PolicyFactory) {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, factory));
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn create(
        &self,
        spec: &str,
        settings: &PolicySettings,
    ) -> Result<Box<dyn CachePolicy>, PolicyError> {
        let (name, arg) = match spec.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (spec, None),
        };
        let name = name.to_ascii_lowercase();
        match self.entries.iter().find(|(n, _)| *n == name) {
            Some((_, factory)) => factory(settings, arg),
            None => Err(PolicyError::Unknown(spec.to_string(), self.names().join(", "))),
        }
    }
}

impl fmt::Debug for PolicyRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PolicyRegistry").field("names", &self.names()).finish()
    }
}
