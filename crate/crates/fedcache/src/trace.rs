//! Trace generation: synthetic FL job ingest streams (client updates,
//! metadata, optional aggregated models per round) and the matching
//! non-training request streams, plus Zipf-ranked fault schedules.
//!
//! Everything is deterministic given the job seed; ingest of a round is
//! always ordered before the requests that analyse it.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BlobKind, ClientId, RoundId, Workload, WorkloadClass};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed trace line {0}: {1}")]
    Malformed(usize, String),
    #[error("invalid job spec: {0}")]
    BadSpec(String),
}

/// Shape of one synthetic FL job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    /// Client pool the per-round selection draws from.
    pub pool_size: u64,
    /// Clients selected (and ingested) per round.
    pub per_round: u64,
    pub rounds: u64,
    pub model_size_bytes: u64,
    pub meta_size_bytes: u64,
    /// First round index (0 or 1).
    pub round_origin: u64,
    /// Simulated seconds per training round.
    pub round_interval_s: f64,
    /// Whether the aggregator publishes an aggregated model every round.
    pub agg_every_round: bool,
    /// A client guaranteed to participate in every round (cross-round
    /// tracking workloads follow this one).
    pub track_client: Option<ClientId>,
    pub seed: u64,
}

pub const DEFAULT_MODEL_SIZE_BYTES: u64 = (84.5 * (1u64 << 20) as f64) as u64;

impl Default for JobSpec {
    fn default() -> Self {
        Self {
            pool_size: 250,
            per_round: 10,
            rounds: 1000,
            model_size_bytes: DEFAULT_MODEL_SIZE_BYTES,
            meta_size_bytes: 2048,
            round_origin: 0,
            round_interval_s: 60.0,
            agg_every_round: false,
            track_client: None,
            seed: 0,
        }
    }
}

impl JobSpec {
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.per_round == 0 || self.per_round > self.pool_size {
            return Err(TraceError::BadSpec(format!(
                "per_round must be in 1..=pool_size ({} vs {})",
                self.per_round, self.pool_size
            )));
        }
        if self.model_size_bytes == 0 || self.meta_size_bytes == 0 {
            return Err(TraceError::BadSpec("blob sizes must be positive".into()));
        }
        if !(self.round_interval_s.is_finite() && self.round_interval_s > 0.0) {
            return Err(TraceError::BadSpec("round_interval_s must be positive".into()));
        }
        Ok(())
    }

    pub fn client(&self, index: u64) -> ClientId {
        ClientId::new(format!("c{index:04}")).expect("generated ids are non-empty")
    }

    pub fn rounds_iter(&self) -> impl Iterator<Item = RoundId> + '_ {
        (self.round_origin..self.round_origin + self.rounds).map(RoundId::new)
    }

    fn round_start_s(&self, round: RoundId) -> f64 {
        (round.value() - self.round_origin) as f64 * self.round_interval_s
    }

    pub fn horizon_s(&self) -> f64 {
        self.rounds as f64 * self.round_interval_s
    }

    /// The clients participating in `round`: a seeded draw from the pool,
    /// with the tracked client (if any) always included. Deterministic per
    /// (seed, round).
    pub fn roster(&self, round: RoundId) -> Vec<ClientId> {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ round.value().wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let mut indices: Vec<u64> = (0..self.pool_size).collect();
        indices.shuffle(&mut rng);
        let mut selected: Vec<u64> = indices.into_iter().take(self.per_round as usize).collect();
        if let Some(tracked) = &self.track_client {
            let tracked_idx = tracked
                .as_str()
                .trim_start_matches('c')
                .parse::<u64>()
                .unwrap_or(0);
            if !selected.contains(&tracked_idx) {
                *selected.last_mut().expect("per_round >= 1") = tracked_idx;
            }
        }
        selected.sort_unstable();
        selected.into_iter().map(|i| self.client(i)).collect()
    }
}

/// One trace line. Ingest events carry (client, round, kind, size); request
/// events carry (workload, round, optional client scope).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t: f64,
    pub ev: EventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub client: Option<String>,
    pub round: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<BlobKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workload: Option<Workload>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Ingest,
    Request,
}

/// What the request side of a generated trace exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    /// Aggregated-model serving (one request per round).
    P1(Workload),
    /// One request per (round, selected client) against that client's
    /// update: 10 x rounds accesses under the default spec.
    P2(Workload),
    /// One request per round following the tracked client.
    P3(Workload),
    /// One metadata read per (round, selected client) after ingest.
    P4(Workload),
    /// One request per workload per round, whole-round scopes.
    Mixed,
}

impl TraceKind {
    pub fn for_class(class: WorkloadClass) -> Self {
        match class {
            WorkloadClass::P1 => TraceKind::P1(Workload::Inference),
            WorkloadClass::P2 => TraceKind::P2(Workload::Clustering),
            WorkloadClass::P3 => TraceKind::P3(Workload::Provenance),
            WorkloadClass::P4 => TraceKind::P4(Workload::SchedulingPerf),
        }
    }
}

/// Ingest stream for a job: per round, every selected client's update and
/// metadata record (and the aggregated model when configured). Rounds are
/// strictly ordered.
pub fn gen_ingest_trace(spec: &JobSpec) -> Result<Vec<TraceEvent>, TraceError> {
    spec.validate()?;
    let mut events = Vec::new();
    for round in spec.rounds_iter() {
        let base = spec.round_start_s(round);
        let step = spec.round_interval_s * 0.4 / (spec.per_round.max(1) * 2) as f64;
        let mut t = base;
        for client in spec.roster(round) {
            events.push(TraceEvent {
                t,
                ev: EventKind::Ingest,
                client: Some(client.as_str().to_string()),
                round: round.value(),
                kind: Some(BlobKind::ModelUpdate),
                workload: None,
                size: Some(spec.model_size_bytes),
            });
            t += step;
            events.push(TraceEvent {
                t,
                ev: EventKind::Ingest,
                client: Some(client.as_str().to_string()),
                round: round.value(),
                kind: Some(BlobKind::Metadata),
                workload: None,
                size: Some(spec.meta_size_bytes),
            });
            t += step;
        }
        if spec.agg_every_round {
            events.push(TraceEvent {
                t,
                ev: EventKind::Ingest,
                client: Some(crate::model::AGG_CLIENT.to_string()),
                round: round.value(),
                kind: Some(BlobKind::AggregatedModel),
                workload: None,
                size: Some(spec.model_size_bytes),
            });
        }
    }
    Ok(events)
}

/// Request stream matching [`gen_ingest_trace`]'s rounds. Requests for a
/// round land in its second half, after the round's data has arrived.
pub fn gen_request_trace(spec: &JobSpec, kind: TraceKind) -> Result<Vec<TraceEvent>, TraceError> {
    spec.validate()?;
    let mut events = Vec::new();
    let mut push = |t: f64, workload: Workload, client: Option<&ClientId>, round: RoundId| {
        events.push(TraceEvent {
            t,
            ev: EventKind::Request,
            client: client.map(|c| c.as_str().to_string()),
            round: round.value(),
            kind: None,
            workload: Some(workload),
            size: None,
        });
    };
    for round in spec.rounds_iter() {
        let base = spec.round_start_s(round) + spec.round_interval_s * 0.5;
        match kind {
            TraceKind::P1(w) => push(base, w, None, round),
            TraceKind::P2(w) | TraceKind::P4(w) => {
                let step = spec.round_interval_s * 0.4 / spec.per_round.max(1) as f64;
                for (j, client) in spec.roster(round).iter().enumerate() {
                    push(base + j as f64 * step, w, Some(client), round);
                }
            }
            TraceKind::P3(w) => {
                let tracked = spec.track_client.clone().unwrap_or_else(|| spec.client(0));
                push(base, w, Some(&tracked), round);
            }
            TraceKind::Mixed => {
                let step = spec.round_interval_s * 0.4 / Workload::ALL.len() as f64;
                let tracked = spec.track_client.clone().unwrap_or_else(|| spec.client(0));
                for (j, w) in Workload::ALL.into_iter().enumerate() {
                    let client = match w.class() {
                        WorkloadClass::P3 => Some(&tracked),
                        _ => None,
                    };
                    push(base + j as f64 * step, w, client, round);
                }
            }
        }
    }
    Ok(events)
}

/// Ingest and request streams merged into one time-ordered trace.
pub fn gen_trace(spec: &JobSpec, kind: TraceKind) -> Result<Vec<TraceEvent>, TraceError> {
    let mut events = gen_ingest_trace(spec)?;
    events.extend(gen_request_trace(spec, kind)?);
    sort_events(&mut events);
    Ok(events)
}

/// Stable time ordering with ingest ahead of requests at equal timestamps.
pub fn sort_events(events: &mut [TraceEvent]) {
    events.sort_by(|a, b| {
        a.t.total_cmp(&b.t).then_with(|| {
            let rank = |e: &TraceEvent| match e.ev {
                EventKind::Ingest => 0,
                EventKind::Request => 1,
            };
            rank(a).cmp(&rank(b))
        })
    });
}

/// One provider reclamation. The target is a selector: either a concrete
/// function id or `rank:<k>`, resolved against the instances alive at fault
/// time (rank 1 = oldest alive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub t: f64,
    #[serde(rename = "fn")]
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FaultSchedule {
    pub events: Vec<FaultEvent>,
    pub zipf_s: f64,
}

/// Zipf-ranked fault schedule: `n_events` reclamations over `[0, horizon)`,
/// ranks drawn over `n_functions` with exponent `zipf_s` (low ranks, i.e.
/// older instances, fail most often).
pub fn gen_fault_schedule(
    n_functions: u64,
    horizon_s: f64,
    zipf_s: f64,
    seed: u64,
    n_events: usize,
) -> FaultSchedule {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zipf = Zipf::new(n_functions.max(1) as f64, zipf_s.max(0.01))
        .expect("valid zipf parameters");
    let mut events: Vec<FaultEvent> = (0..n_events)
        .map(|_| {
            let rank = zipf.sample(&mut rng).round() as u64;
            FaultEvent {
                t: rng.random_range(0.0..horizon_s.max(f64::MIN_POSITIVE)),
                target: format!("rank:{rank}"),
            }
        })
        .collect();
    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    FaultSchedule { events, zipf_s }
}

pub fn write_trace(path: &Path, events: &[TraceEvent]) -> Result<(), TraceError> {
    let mut out = fs::File::create(path)?;
    for ev in events {
        serde_json::to_writer(&mut out, ev).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceEvent>, TraceError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(
            serde_json::from_str(&line).map_err(|e| TraceError::Malformed(i + 1, e.to_string()))?,
        );
    }
    Ok(events)
}

pub fn write_faults(path: &Path, schedule: &FaultSchedule) -> Result<(), TraceError> {
    let mut out = fs::File::create(path)?;
    for ev in &schedule.events {
        serde_json::to_writer(&mut out, ev).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_faults(path: &Path) -> Result<FaultSchedule, TraceError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(
            serde_json::from_str(&line).map_err(|e| TraceError::Malformed(i + 1, e.to_string()))?,
        );
    }
    Ok(FaultSchedule { events, zipf_s: 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small_spec() -> JobSpec {
        JobSpec { pool_size: 20, per_round: 4, rounds: 5, seed: 11, ..Default::default() }
    }

    #[test]
    fn p2_trace_has_one_access_per_round_and_client() {
        let spec = JobSpec { rounds: 2000, ..Default::default() };
        let reqs = gen_request_trace(&spec, TraceKind::P2(Workload::Clustering)).unwrap();
        assert_eq!(reqs.len(), 20_000, "10 clients x 2000 rounds");
    }

    #[test]
    fn p3_trace_is_one_request_per_round() {
        let spec = JobSpec {
            rounds: 64,
            track_client: Some(ClientId::new("c0003").unwrap()),
            ..Default::default()
        };
        let reqs = gen_request_trace(&spec, TraceKind::P3(Workload::Provenance)).unwrap();
        assert_eq!(reqs.len(), 64);
        assert!(reqs.iter().all(|r| r.client.as_deref() == Some("c0003")));
    }

    #[test]
    fn zero_rounds_gives_empty_trace() {
        let spec = JobSpec { rounds: 0, ..Default::default() };
        assert!(gen_ingest_trace(&spec).unwrap().is_empty());
        assert!(gen_request_trace(&spec, TraceKind::P2(Workload::Clustering))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn generated_request_traces_are_single_touch() {
        // every addressed key appears at most once: the precondition for the
        // reactive baselines' zero hit rates
        let spec = JobSpec { rounds: 50, ..small_spec() };
        for kind in [
            TraceKind::P2(Workload::Clustering),
            TraceKind::P3(Workload::Provenance),
            TraceKind::P4(Workload::SchedulingPerf),
        ] {
            let reqs = gen_request_trace(&spec, kind).unwrap();
            let mut seen = HashSet::new();
            for r in &reqs {
                let key = (r.client.clone(), r.round, format!("{kind:?}").chars().take(2).collect::<String>());
                assert!(seen.insert(key), "key accessed twice in {kind:?}");
            }
        }
    }

    #[test]
    fn ingest_precedes_requests_for_each_round() {
        let spec = small_spec();
        let events = gen_trace(&spec, TraceKind::P2(Workload::Clustering)).unwrap();
        let mut last_ingested_round = None;
        for ev in &events {
            match ev.ev {
                EventKind::Ingest => last_ingested_round = Some(ev.round),
                EventKind::Request => {
                    assert!(Some(ev.round) <= last_ingested_round, "request before its round's data");
                }
            }
        }
    }

    #[test]
    fn roster_is_deterministic_and_includes_tracked_client() {
        let mut spec = small_spec();
        spec.track_client = Some(spec.client(7));
        for r in spec.rounds_iter() {
            let a = spec.roster(r);
            let b = spec.roster(r);
            assert_eq!(a, b);
            assert_eq!(a.len(), spec.per_round as usize);
            assert!(a.contains(&spec.client(7)));
        }
        // different seeds give different selections somewhere
        let other = JobSpec { seed: 999, ..small_spec() };
        let differs = spec
            .rounds_iter()
            .any(|r| spec.roster(r) != other.roster(r));
        assert!(differs);
    }

    #[test]
    fn traces_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let events = gen_trace(&spec, TraceKind::Mixed).unwrap();
        let path = dir.path().join("trace.jsonl");
        write_trace(&path, &events).unwrap();
        assert_eq!(read_trace(&path).unwrap(), events);

        // identical seeds produce byte-identical files
        let path2 = dir.path().join("trace2.jsonl");
        write_trace(&path2, &gen_trace(&spec, TraceKind::Mixed).unwrap()).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn fault_schedule_is_sorted_seeded_and_zipf_ranked() {
        let s1 = gen_fault_schedule(16, 1000.0, 1.0, 42, 500);
        let s2 = gen_fault_schedule(16, 1000.0, 1.0, 42, 500);
        assert_eq!(s1, s2);
        assert_eq!(s1.events.len(), 500);
        assert!(s1.events.windows(2).all(|w| w[0].t <= w[1].t), "times non-decreasing");

        // rank 1 must dominate under zipf(1.0)
        let rank1 = s1.events.iter().filter(|e| e.target == "rank:1").count();
        let rank8 = s1.events.iter().filter(|e| e.target == "rank:8").count();
        assert!(rank1 > rank8 * 2, "rank1={rank1} rank8={rank8}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("faults.jsonl");
        write_faults(&path, &s1).unwrap();
        assert_eq!(read_faults(&path).unwrap().events, s1.events);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let spec = JobSpec { per_round: 0, ..Default::default() };
        assert!(spec.validate().is_err());
        let spec = JobSpec { per_round: 300, pool_size: 250, ..Default::default() };
        assert!(spec.validate().is_err());
    }
}
