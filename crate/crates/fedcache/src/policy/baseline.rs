//! Traditional reactive caching policies (LRU, LFU, FIFO), used as
//! comparison baselines. They insert on access and never prefetch, which is
//! exactly why they score zero hits on single-touch access patterns.

use std::collections::{BTreeSet, HashMap};

use crate::model::{CacheKey, NonTrainingRequest};

use super::{required_keys, CachePolicy, PolicyDecision, RoundLedger};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReactiveKind {
    Lru,
    Lfu,
    Fifo,
}

impl ReactiveKind {
    fn name(self) -> &'static str {
        match self {
            ReactiveKind::Lru => "lru",
            ReactiveKind::Lfu => "lfu",
            ReactiveKind::Fifo => "fifo",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct EntryMeta {
    inserted: u64,
    last_touch: u64,
    freq: u64,
}

/// Insert-on-miss cache with a fixed entry capacity and an eviction order
/// given by [`ReactiveKind`].
#[derive(Debug)]
pub struct ReactivePolicy {
    kind: ReactiveKind,
    capacity: usize,
    tick: u64,
    entries: HashMap<CacheKey, EntryMeta>,
}

impl ReactivePolicy {
    pub fn new(kind: ReactiveKind, capacity_entries: usize) -> Self {
        Self {
            kind,
            capacity: capacity_entries.max(1),
            tick: 0,
            entries: HashMap::new(),
        }
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn victim(&self) -> Option<CacheKey> {
        let metric = |m: &EntryMeta| match self.kind {
            ReactiveKind::Lru => (m.last_touch, 0),
            ReactiveKind::Lfu => (m.freq, m.last_touch),
            ReactiveKind::Fifo => (m.inserted, 0),
        };
        self.entries
            .iter()
            .min_by(|(ka, ma), (kb, mb)| metric(ma).cmp(&metric(mb)).then_with(|| ka.cmp(kb)))
            .map(|(k, _)| k.clone())
    }
}

impl CachePolicy for ReactivePolicy {
    fn name(&self) -> String {
        self.kind.name().into()
    }

    fn on_request(&mut self, req: &NonTrainingRequest, ledger: &RoundLedger) -> PolicyDecision {
        let mut cache_now = BTreeSet::new();
        let mut evict = BTreeSet::new();
        for key in required_keys(req, ledger) {
            self.tick += 1;
            if let Some(meta) = self.entries.get_mut(&key) {
                meta.last_touch = self.tick;
                meta.freq += 1;
                continue;
            }
            self.entries.insert(
                key.clone(),
                EntryMeta { inserted: self.tick, last_touch: self.tick, freq: 1 },
            );
            cache_now.insert(key);
            while self.entries.len() > self.capacity {
                let Some(victim) = self.victim() else { break };
                self.entries.remove(&victim);
                // a key displaced in the same breath is simply not cached
                if !cache_now.remove(&victim) {
                    evict.insert(victim);
                }
            }
        }
        PolicyDecision::normalized(cache_now, BTreeSet::new(), evict)
    }

    fn on_ingest(&mut self, _key: &CacheKey, _ledger: &RoundLedger) -> PolicyDecision {
        // reactive: nothing is cached until it is asked for
        PolicyDecision::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClientId, NonTrainingRequest, RoundId, Workload};

    fn touch(policy: &mut ReactivePolicy, client: &str, round: u64) -> PolicyDecision {
        let mut ledger = RoundLedger::default();
        let key = CacheKey::update(ClientId::new(client).unwrap(), RoundId::new(round));
        ledger.record(&key);
        let req = NonTrainingRequest::new(
            format!("{client}-{round}"),
            Workload::Clustering,
            Some(ClientId::new(client).unwrap()),
            RoundId::new(round),
        );
        policy.on_request(&req, &ledger)
    }

    #[test]
    fn lru_evicts_least_recently_touched() {
        let mut lru = ReactivePolicy::new(ReactiveKind::Lru, 2);
        touch(&mut lru, "a", 0);
        touch(&mut lru, "b", 0);
        touch(&mut lru, "a", 0); // refresh a
        let d = touch(&mut lru, "c", 0);
        let evicted: Vec<String> = d.evict.iter().map(|k| k.client.to_string()).collect();
        assert_eq!(evicted, vec!["b"]);
        assert!(lru.contains(&CacheKey::update(ClientId::new("a").unwrap(), RoundId::new(0))));
    }

    #[test]
    fn lfu_evicts_least_frequent() {
        let mut lfu = ReactivePolicy::new(ReactiveKind::Lfu, 2);
        touch(&mut lfu, "a", 0);
        touch(&mut lfu, "a", 0);
        touch(&mut lfu, "b", 0);
        let d = touch(&mut lfu, "c", 0);
        let evicted: Vec<String> = d.evict.iter().map(|k| k.client.to_string()).collect();
        assert_eq!(evicted, vec!["b"]);
    }

    #[test]
    fn fifo_evicts_in_insertion_order_regardless_of_touches() {
        let mut fifo = ReactivePolicy::new(ReactiveKind::Fifo, 2);
        touch(&mut fifo, "a", 0);
        touch(&mut fifo, "b", 0);
        touch(&mut fifo, "a", 0); // does not save "a" under FIFO
        let d = touch(&mut fifo, "c", 0);
        let evicted: Vec<String> = d.evict.iter().map(|k| k.client.to_string()).collect();
        assert_eq!(evicted, vec!["a"]);
    }

    #[test]
    fn ingest_never_caches() {
        let mut lru = ReactivePolicy::new(ReactiveKind::Lru, 4);
        let ledger = RoundLedger::default();
        let key = CacheKey::update(ClientId::new("a").unwrap(), RoundId::new(0));
        assert!(lru.on_ingest(&key, &ledger).is_empty());
        assert!(lru.is_empty());
    }

    #[test]
    fn single_touch_stream_never_repeats_a_resident_key() {
        // the mechanism behind the zero-hit baseline rows: when every key is
        // accessed at most once, each access inserts and nothing is ever
        // found resident beforehand
        let mut lru = ReactivePolicy::new(ReactiveKind::Lru, 100);
        for i in 0..500 {
            let client = format!("c{i}");
            let key = CacheKey::update(ClientId::new(&client).unwrap(), RoundId::new(0));
            assert!(!lru.contains(&key), "key seen before its first access");
            let d = touch(&mut lru, &client, 0);
            assert!(d.cache_now.contains(&key));
        }
    }
}
