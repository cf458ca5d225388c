//! Ablation policies: random per-request policy selection and a static
//! policy pinned to one class regardless of the actual workload.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{CacheKey, NonTrainingRequest, WorkloadClass};

use super::tailored::{P1Policy, P2Policy, P3Policy, P4Policy};
use super::{CachePolicy, PolicyDecision, PolicySettings, RoundLedger};

/// Picks one of the four tailored policies uniformly at random for every
/// request, regardless of the workload's real class. Seeded, so runs are
/// reproducible.
pub struct RandomPolicy {
    rng: ChaCha8Rng,
    p1: P1Policy,
    p2: P2Policy,
    p3: P3Policy,
    p4: P4Policy,
}

impl RandomPolicy {
    pub fn new(settings: &PolicySettings) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(settings.random_seed),
            p1: P1Policy::new(settings.p1_keep_latest),
            p2: P2Policy::new(),
            p3: P3Policy::new(),
            p4: P4Policy::new(settings.p4_window_rounds),
        }
    }
}

impl CachePolicy for RandomPolicy {
    fn name(&self) -> String {
        "random".into()
    }

    fn on_request(&mut self, req: &NonTrainingRequest, ledger: &RoundLedger) -> PolicyDecision {
        match self.rng.random_range(0..4u8) {
            0 => self.p1.on_request(req, ledger),
            1 => self.p2.on_request(req, ledger),
            2 => self.p3.on_request(req, ledger),
            _ => self.p4.on_request(req, ledger),
        }
    }

    fn on_ingest(&mut self, key: &CacheKey, ledger: &RoundLedger) -> PolicyDecision {
        let mut d = self.p1.on_ingest(key, ledger);
        d.merge(self.p2.on_ingest(key, ledger));
        d.merge(self.p3.on_ingest(key, ledger));
        d.merge(self.p4.on_ingest(key, ledger));
        d
    }
}

impl std::fmt::Debug for RandomPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RandomPolicy").finish_non_exhaustive()
    }
}

/// Applies one fixed tailored policy to every request, modelling a
/// deployment whose caching strategy was configured once and never adapted
/// when the workload changed.
#[derive(Debug)]
pub struct StaticPolicy {
    class: WorkloadClass,
    inner: Inner,
}

#[derive(Debug)]
enum Inner {
    P1(P1Policy),
    P2(P2Policy),
    P3(P3Policy),
    P4(P4Policy),
}

impl StaticPolicy {
    pub fn new(class: WorkloadClass, settings: &PolicySettings) -> Self {
        let inner = match class {
            WorkloadClass::P1 => Inner::P1(P1Policy::new(settings.p1_keep_latest)),
            WorkloadClass::P2 => Inner::P2(P2Policy::new()),
            WorkloadClass::P3 => Inner::P3(P3Policy::new()),
            WorkloadClass::P4 => Inner::P4(P4Policy::new(settings.p4_window_rounds)),
        };
        Self { class, inner }
    }
}

impl CachePolicy for StaticPolicy {
    fn name(&self) -> String {
        format!("static:{}", self.class)
    }

    fn on_request(&mut self, req: &NonTrainingRequest, ledger: &RoundLedger) -> PolicyDecision {
        match &mut self.inner {
            Inner::P1(p) => p.on_request(req, ledger),
            Inner::P2(p) => p.on_request(req, ledger),
            Inner::P3(p) => p.on_request(req, ledger),
            Inner::P4(p) => p.on_request(req, ledger),
        }
    }

    fn on_ingest(&mut self, key: &CacheKey, ledger: &RoundLedger) -> PolicyDecision {
        match &mut self.inner {
            Inner::P1(p) => p.on_ingest(key, ledger),
            Inner::P2(p) => p.on_ingest(key, ledger),
            Inner::P3(p) => p.on_ingest(key, ledger),
            Inner::P4(p) => p.on_ingest(key, ledger),
        }
    }
}
