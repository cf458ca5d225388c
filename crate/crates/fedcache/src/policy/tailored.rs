//! The workload-tailored caching policies.
//!
//! Each policy is a small state machine over (request, ingest) events. The
//! p1-p3 policies stay dormant until the first request arrives — nothing is
//! known about demand before that, so the first request of a trace is the
//! one cold miss that activates prefetching. p4 maintains its metadata
//! window proactively from ingest, which is why metadata reads never miss.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::{
    BlobKind, CacheKey, ClientId, NonTrainingRequest, RoundId, WorkloadClass,
};

use super::{CachePolicy, PolicyDecision, PolicySettings, RoundLedger};

/// p1: single client update or aggregated model. Keeps the most recent
/// aggregated models (default two: current and previous) for serving and
/// comparative analysis, and mirrors that retention for explicitly
/// requested per-client updates.
#[derive(Debug)]
pub struct P1Policy {
    keep_latest: usize,
    active: bool,
    hot_agg: BTreeSet<RoundId>,
    hot_updates: BTreeMap<ClientId, BTreeSet<RoundId>>,
}

impl P1Policy {
    pub fn new(keep_latest: usize) -> Self {
        Self {
            keep_latest: keep_latest.max(1),
            active: false,
            hot_agg: BTreeSet::new(),
            hot_updates: BTreeMap::new(),
        }
    }

    fn trim_agg(&mut self, evict: &mut BTreeSet<CacheKey>) {
        while self.hot_agg.len() > self.keep_latest {
            let stale = *self.hot_agg.iter().next().unwrap();
            self.hot_agg.remove(&stale);
            evict.insert(CacheKey::aggregated(stale));
        }
    }
}

impl CachePolicy for P1Policy {
    fn name(&self) -> String {
        "p1".into()
    }

    fn on_request(&mut self, req: &NonTrainingRequest, ledger: &RoundLedger) -> PolicyDecision {
        self.active = true;
        let mut cache_now = BTreeSet::new();
        let mut prefetch = BTreeSet::new();
        let mut evict = BTreeSet::new();

        match &req.scope_client {
            Some(client) => {
                let key = CacheKey::update(client.clone(), req.scope_round);
                if ledger.exists(&key) {
                    cache_now.insert(key);
                    let rounds = self.hot_updates.entry(client.clone()).or_default();
                    rounds.insert(req.scope_round);
                    while rounds.len() > self.keep_latest {
                        let stale = *rounds.iter().next().unwrap();
                        rounds.remove(&stale);
                        evict.insert(CacheKey::update(client.clone(), stale));
                    }
                }
            }
            None => {
                let key = CacheKey::aggregated(req.scope_round);
                if ledger.exists(&key) {
                    cache_now.insert(key);
                    self.hot_agg.insert(req.scope_round);
                }
                if let Some(latest) = ledger.latest_agg_round() {
                    prefetch.insert(CacheKey::aggregated(latest));
                    self.hot_agg.insert(latest);
                }
                self.trim_agg(&mut evict);
            }
        }
        PolicyDecision::normalized(cache_now, prefetch, evict)
    }

    fn on_ingest(&mut self, key: &CacheKey, _ledger: &RoundLedger) -> PolicyDecision {
        if !self.active || key.kind != BlobKind::AggregatedModel {
            return PolicyDecision::default();
        }
        self.hot_agg.insert(key.round);
        let mut evict = BTreeSet::new();
        self.trim_agg(&mut evict);
        PolicyDecision::normalized([key.clone()].into(), BTreeSet::new(), evict)
    }
}

/// p2: all client updates of a round. A request for round r keeps rounds
/// {r, r+1, latest} resident: the next round is claimed ahead of time and
/// satisfied as its updates arrive, the latest round stays cached for the
/// per-round workloads that always run against it, and everything older is
/// evicted.
#[derive(Debug, Default)]
pub struct P2Policy {
    active: bool,
    last_req_round: Option<RoundId>,
    hot_rounds: BTreeSet<RoundId>,
}

impl P2Policy {
    pub fn new() -> Self {
        Self::default()
    }

    fn window(&self, latest: Option<RoundId>) -> BTreeSet<RoundId> {
        let mut w = BTreeSet::new();
        if let Some(r) = self.last_req_round {
            w.insert(r);
            w.insert(r.next());
        }
        if let Some(l) = latest {
            w.insert(l);
        }
        w
    }

    fn evict_outside_window(
        &mut self,
        window: &BTreeSet<RoundId>,
        ledger: &RoundLedger,
    ) -> BTreeSet<CacheKey> {
        let stale: Vec<RoundId> =
            self.hot_rounds.iter().filter(|r| !window.contains(r)).copied().collect();
        let mut evict = BTreeSet::new();
        for r in stale {
            self.hot_rounds.remove(&r);
            evict.extend(ledger.update_keys(r));
        }
        evict
    }
}

impl CachePolicy for P2Policy {
    fn name(&self) -> String {
        "p2".into()
    }

    fn on_request(&mut self, req: &NonTrainingRequest, ledger: &RoundLedger) -> PolicyDecision {
        self.active = true;
        let r = req.scope_round;
        self.last_req_round = Some(r);
        let latest = ledger.latest_update_round();
        let window = self.window(latest);

        let mut cache_now: BTreeSet<CacheKey> = ledger.update_keys(r).into_iter().collect();
        let mut prefetch: BTreeSet<CacheKey> =
            ledger.update_keys(r.next()).into_iter().collect();
        if let Some(latest) = latest {
            if latest != r {
                prefetch.extend(ledger.update_keys(latest));
            }
        }
        if !cache_now.is_empty() {
            self.hot_rounds.insert(r);
        }
        if !ledger.update_keys(r.next()).is_empty() {
            self.hot_rounds.insert(r.next());
        }
        if let Some(latest) = latest {
            self.hot_rounds.insert(latest);
        }
        let evict = self.evict_outside_window(&window, ledger);

        // narrowly scoped requests still pull their own key even when the
        // roster for that round is unknown
        if let Some(client) = &req.scope_client {
            cache_now.insert(CacheKey::update(client.clone(), r));
        }
        PolicyDecision::normalized(cache_now, prefetch, evict)
    }

    fn on_ingest(&mut self, key: &CacheKey, ledger: &RoundLedger) -> PolicyDecision {
        if !self.active || key.kind != BlobKind::ModelUpdate {
            return PolicyDecision::default();
        }
        let latest = ledger.latest_update_round();
        let window = self.window(latest);
        if !window.contains(&key.round) {
            return PolicyDecision::default();
        }
        self.hot_rounds.insert(key.round);
        let evict = self.evict_outside_window(&window, ledger);
        PolicyDecision::normalized([key.clone()].into(), BTreeSet::new(), evict)
    }
}

/// p3: one client's updates across consecutive rounds. Keeps a sliding
/// {r-1, r, r+1} window around the requested round for the tracked client;
/// the r+1 claim is satisfied when that round's update arrives.
#[derive(Debug, Default)]
pub struct P3Policy {
    active: bool,
    tracked: Option<ClientId>,
    last_req_round: Option<RoundId>,
    hot_rounds: BTreeSet<RoundId>,
}

impl P3Policy {
    pub fn new() -> Self {
        Self::default()
    }

    fn window(&self) -> BTreeSet<RoundId> {
        let mut w = BTreeSet::new();
        if let Some(r) = self.last_req_round {
            if let Some(prev) = r.prev() {
                w.insert(prev);
            }
            w.insert(r);
            w.insert(r.next());
        }
        w
    }

    fn evict_outside_window(&mut self) -> BTreeSet<CacheKey> {
        let window = self.window();
        let (Some(tracked), stale) = (
            self.tracked.clone(),
            self.hot_rounds.iter().filter(|r| !window.contains(r)).copied().collect::<Vec<_>>(),
        ) else {
            return BTreeSet::new();
        };
        let mut evict = BTreeSet::new();
        for r in stale {
            self.hot_rounds.remove(&r);
            evict.insert(CacheKey::update(tracked.clone(), r));
        }
        evict
    }
}

impl CachePolicy for P3Policy {
    fn name(&self) -> String {
        "p3".into()
    }

    fn on_request(&mut self, req: &NonTrainingRequest, ledger: &RoundLedger) -> PolicyDecision {
        let Some(client) = req.scope_client.clone() else {
            return PolicyDecision::default();
        };
        if self.tracked.as_ref() != Some(&client) {
            // switching clients: drop the old window
            let old = std::mem::take(&mut self.hot_rounds);
            let mut evict = BTreeSet::new();
            if let Some(prev_client) = self.tracked.take() {
                evict.extend(old.into_iter().map(|r| CacheKey::update(prev_client.clone(), r)));
            }
            self.tracked = Some(client.clone());
            self.last_req_round = None;
            let mut d = self.on_request(req, ledger);
            d.evict.extend(evict);
            return PolicyDecision::normalized(d.cache_now, d.prefetch, d.evict);
        }

        self.active = true;
        self.tracked = Some(client.clone());
        let r = req.scope_round;
        self.last_req_round = Some(r);

        let mut cache_now = BTreeSet::new();
        let mut prefetch = BTreeSet::new();
        let current = CacheKey::update(client.clone(), r);
        if ledger.exists(&current) {
            self.hot_rounds.insert(r);
        }
        cache_now.insert(current);
        if let Some(prev) = r.prev() {
            let key = CacheKey::update(client.clone(), prev);
            if ledger.exists(&key) {
                prefetch.insert(key);
                self.hot_rounds.insert(prev);
            }
        }
        let next = CacheKey::update(client.clone(), r.next());
        if ledger.exists(&next) {
            prefetch.insert(next);
            self.hot_rounds.insert(r.next());
        }
        let evict = self.evict_outside_window();
        PolicyDecision::normalized(cache_now, prefetch, evict)
    }

    fn on_ingest(&mut self, key: &CacheKey, _ledger: &RoundLedger) -> PolicyDecision {
        if !self.active || key.kind != BlobKind::ModelUpdate {
            return PolicyDecision::default();
        }
        if self.tracked.as_ref() != Some(&key.client) || !self.window().contains(&key.round) {
            return PolicyDecision::default();
        }
        self.hot_rounds.insert(key.round);
        PolicyDecision::normalized([key.clone()].into(), BTreeSet::new(), BTreeSet::new())
    }
}

/// p4: configuration and performance metadata for the most recent R rounds
/// (R tunable, default 10). The window is maintained at ingest time, so
/// requests against it never trigger fetches.
#[derive(Debug)]
pub struct P4Policy {
    window_rounds: u64,
    hot_rounds: BTreeSet<RoundId>,
}

impl P4Policy {
    pub fn new(window_rounds: u64) -> Self {
        Self { window_rounds: window_rounds.max(1), hot_rounds: BTreeSet::new() }
    }
}

impl CachePolicy for P4Policy {
    fn name(&self) -> String {
        "p4".into()
    }

    fn on_request(&mut self, _req: &NonTrainingRequest, _ledger: &RoundLedger) -> PolicyDecision {
        // proactive window; requests fetch nothing extra
        PolicyDecision::default()
    }

    fn on_ingest(&mut self, key: &CacheKey, ledger: &RoundLedger) -> PolicyDecision {
        if key.kind != BlobKind::Metadata {
            return PolicyDecision::default();
        }
        let anchor = ledger.latest_meta_round().unwrap_or(key.round).max(key.round);
        let cutoff = anchor.value().saturating_sub(self.window_rounds - 1);
        if key.round.value() < cutoff {
            return PolicyDecision::default(); // too old to enter the window
        }
        self.hot_rounds.insert(key.round);
        let stale: Vec<RoundId> = self
            .hot_rounds
            .iter()
            .filter(|r| r.value() < cutoff)
            .copied()
            .collect();
        let mut evict = BTreeSet::new();
        for r in stale {
            self.hot_rounds.remove(&r);
            evict.extend(ledger.meta_keys(r));
        }
        PolicyDecision::normalized([key.clone()].into(), BTreeSet::new(), evict)
    }
}

/// Dispatches each request to the tailored policy matching its class, the
/// way the engine behaves with the full taxonomy switched on.
#[derive(Debug)]
pub struct AutoPolicy {
    p1: P1Policy,
    p2: P2Policy,
    p3: P3Policy,
    p4: P4Policy,
}

impl AutoPolicy {
    pub fn new(settings: &PolicySettings) -> Self {
        Self {
            p1: P1Policy::new(settings.p1_keep_latest),
            p2: P2Policy::new(),
            p3: P3Policy::new(),
            p4: P4Policy::new(settings.p4_window_rounds),
        }
    }
}

impl CachePolicy for AutoPolicy {
    fn name(&self) -> String {
        "auto".into()
    }

    fn on_request(&mut self, req: &NonTrainingRequest, ledger: &RoundLedger) -> PolicyDecision {
        match req.class {
            WorkloadClass::P1 => self.p1.on_request(req, ledger),
            WorkloadClass::P2 => self.p2.on_request(req, ledger),
            WorkloadClass::P3 => self.p3.on_request(req, ledger),
            WorkloadClass::P4 => self.p4.on_request(req, ledger),
        }
    }

    fn on_ingest(&mut self, key: &CacheKey, ledger: &RoundLedger) -> PolicyDecision {
        let mut decision = self.p1.on_ingest(key, ledger);
        decision.merge(self.p2.on_ingest(key, ledger));
        decision.merge(self.p3.on_ingest(key, ledger));
        decision.merge(self.p4.on_ingest(key, ledger));
        decision
    }
}
