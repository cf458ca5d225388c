//! Analytic latency and cost model for the unified cache plane and the two
//! separated-plane baselines (ObjStore-Agg: aggregator + cloud object store,
//! Cache-Agg: aggregator + in-memory cloud cache), plus run reports.
//!
//! Transfer time is bytes * 8 / (bandwidth_gbps * 1e9). Compute time comes
//! from a configurable per-workload table, not from the toy kernels' wall
//! clock. Dollar outputs are modelled estimates under the configured rates.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CostParams, Workload, WorkloadClass};
use crate::policy::HitStats;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Seconds of communication and computation for one request.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub comm_s: f64,
    pub compute_s: f64,
}

impl LatencyBreakdown {
    pub fn new(comm_s: f64, compute_s: f64) -> Self {
        debug_assert!(comm_s >= 0.0 && compute_s >= 0.0);
        Self { comm_s, compute_s }
    }

    pub fn total_s(&self) -> f64 {
        self.comm_s + self.compute_s
    }

    pub fn comm_fraction(&self) -> f64 {
        if self.total_s() == 0.0 {
            0.0
        } else {
            self.comm_s / self.total_s()
        }
    }
}

/// Per-workload compute seconds. Defaults average ~2.8 s across the
/// thirteen workloads, with clustering the heaviest and cosine similarity
/// almost free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeTable(BTreeMap<Workload, f64>);

impl Default for ComputeTable {
    fn default() -> Self {
        let table = [
            (Workload::Inference, 0.6),
            (Workload::Eval, 1.2),
            (Workload::MaliciousFilter, 1.05),
            (Workload::Contribution, 2.2),
            (Workload::Clustering, 6.067),
            (Workload::CosineSimilarity, 0.031),
            (Workload::Personalization, 5.0),
            (Workload::SchedulingPerf, 1.0),
            (Workload::SchedulingClustered, 1.039),
            (Workload::Debugging, 12.0),
            (Workload::Provenance, 3.6),
            (Workload::IncentiveTracking, 0.9),
            (Workload::HyperparamTuning, 1.7),
        ];
        Self(table.into_iter().collect())
    }
}

impl ComputeTable {
    pub fn get(&self, w: Workload) -> f64 {
        self.0.get(&w).copied().unwrap_or(1.0)
    }

    pub fn set(&mut self, w: Workload, seconds: f64) {
        self.0.insert(w, seconds);
    }

    pub fn mean(&self) -> f64 {
        self.0.values().sum::<f64>() / self.0.len() as f64
    }
}

fn transfer_s(bytes: u64, gbps: f64) -> f64 {
    bytes as f64 * 8.0 / (gbps * 1e9)
}

/// Unified-plane latency. A hit pays only the control round trip to the
/// owning function; a miss additionally pays the store fetch of the missing
/// bytes over the store link.
pub fn latency_flstore(
    hit: bool,
    missing_bytes: u64,
    cost: &CostParams,
    compute_s: f64,
) -> LatencyBreakdown {
    let comm = if hit {
        cost.rtt_s
    } else {
        cost.rtt_s + transfer_s(missing_bytes, cost.bandwidth_gbps)
    };
    LatencyBreakdown::new(comm, compute_s)
}

/// Separated planes over a cloud object store: every request fetches its
/// working set to the aggregator and writes results back, paying the store
/// link both ways plus two round trips.
pub fn latency_baseline_objstore(
    fetch_bytes: u64,
    cost: &CostParams,
    compute_s: f64,
) -> LatencyBreakdown {
    let comm = 2.0 * cost.rtt_s
        + transfer_s(fetch_bytes, cost.bandwidth_gbps)
        + transfer_s(cost.result_bytes, cost.bandwidth_gbps);
    LatencyBreakdown::new(comm, compute_s)
}

/// Separated planes over an in-memory cloud cache: same shape as the object
/// store baseline, on the faster cache tier. The data still crosses the
/// network to the aggregator's compute.
pub fn latency_baseline_cache(
    fetch_bytes: u64,
    cost: &CostParams,
    compute_s: f64,
) -> LatencyBreakdown {
    let comm = 2.0 * cost.cache_rtt_s
        + transfer_s(fetch_bytes, cost.cache_bandwidth_gbps)
        + transfer_s(cost.result_bytes, cost.cache_bandwidth_gbps);
    LatencyBreakdown::new(comm, compute_s)
}

/// Bytes a separated-plane baseline must move for one request of the given
/// class: its whole working set.
pub fn baseline_fetch_bytes(
    class: WorkloadClass,
    model_size_bytes: u64,
    meta_size_bytes: u64,
    per_round: u64,
    p4_window: u64,
) -> u64 {
    match class {
        WorkloadClass::P1 => model_size_bytes,
        WorkloadClass::P2 => per_round * model_size_bytes,
        WorkloadClass::P3 => 3 * model_size_bytes,
        WorkloadClass::P4 => p4_window * per_round * meta_size_bytes,
    }
}

/// Modelled dollar cost of one request on the unified plane: serverless
/// compute (GB-seconds over the whole invocation).
pub fn cost_flstore_request(lat: &LatencyBreakdown, fn_mem_gb: f64, cost: &CostParams) -> f64 {
    cost.fn_compute_per_gb_s * fn_mem_gb * lat.total_s()
}

/// Keep-alive cost of holding `n_functions` warm for `duration_s`.
pub fn cost_keepalive(n_functions: u64, duration_s: f64, cost: &CostParams) -> f64 {
    const MONTH_S: f64 = 30.0 * 24.0 * 3600.0;
    cost.ping_cost_per_fn_month * n_functions as f64 * (duration_s / MONTH_S)
}

/// Modelled cost of one ObjStore-Agg request: aggregator instance time,
/// egress for the moved bytes, and per-request store charges.
pub fn cost_objstore_request(
    lat: &LatencyBreakdown,
    moved_bytes: u64,
    n_objects: u64,
    cost: &CostParams,
) -> f64 {
    cost.agg_instance_per_hr * lat.total_s() / 3600.0
        + cost.egress_per_gb * moved_bytes as f64 / 1e9
        + cost.objstore_get_per_req * n_objects as f64
        + cost.objstore_put_per_req
}

/// Modelled cost of one Cache-Agg request: aggregator instance time, the
/// cache node's hourly rate over the request, and egress.
pub fn cost_cache_request(lat: &LatencyBreakdown, moved_bytes: u64, cost: &CostParams) -> f64 {
    (cost.agg_instance_per_hr + cost.cache_instance_per_hr) * lat.total_s() / 3600.0
        + cost.egress_per_gb * moved_bytes as f64 / 1e9
}

/// Memory an untailored cache-everything deployment would need, plus how
/// many functions of `effective_capacity_bytes` that takes.
pub fn footprint_untailored(
    per_round: u64,
    rounds: u64,
    model_size_bytes: u64,
    effective_capacity_bytes: u64,
) -> (u64, u64) {
    let bytes = per_round * rounds * model_size_bytes;
    let functions = bytes.div_ceil(effective_capacity_bytes.max(1));
    (bytes, functions)
}

/// Upper bound on resident bytes under a tailored policy: the policy's
/// round window times the per-round volume.
pub fn footprint_tailored(
    class: WorkloadClass,
    per_round: u64,
    model_size_bytes: u64,
    meta_size_bytes: u64,
    p4_window: u64,
    p1_keep_latest: u64,
) -> u64 {
    match class {
        WorkloadClass::P1 => p1_keep_latest * model_size_bytes,
        // requested round, the pre-cached next round, and the latest round
        WorkloadClass::P2 => 3 * per_round * model_size_bytes,
        WorkloadClass::P3 => 3 * model_size_bytes,
        WorkloadClass::P4 => p4_window * per_round * meta_size_bytes,
    }
}

/// One per-request accounting row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRow {
    pub request_id: String,
    pub workload: Workload,
    pub policy: String,
    pub hit: bool,
    pub comm_s: f64,
    pub compute_s: f64,
    pub cost: f64,
}

impl RequestRow {
    pub fn total_s(&self) -> f64 {
        self.comm_s + self.compute_s
    }
}

/// Aggregates over a run, all recomputable from the rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub policy: String,
    pub requests: u64,
    pub hits: u64,
    pub misses: u64,
    pub hit_rate: f64,
    pub mean_latency_s: f64,
    pub p50_latency_s: f64,
    pub p99_latency_s: f64,
    pub total_comm_s: f64,
    pub total_compute_s: f64,
    pub total_cost: f64,
    pub footprint_bytes: u64,
    pub function_count: u64,
}

/// Collected rows plus derived aggregates for one replay.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub rows: Vec<RequestRow>,
    pub summary: RunSummary,
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

impl RunReport {
    pub fn from_rows(
        policy: impl Into<String>,
        rows: Vec<RequestRow>,
        hit_stats: HitStats,
        footprint_bytes: u64,
        function_count: u64,
    ) -> Self {
        let totals: Vec<f64> = rows.iter().map(RequestRow::total_s).collect();
        let n = rows.len() as u64;
        let summary = RunSummary {
            policy: policy.into(),
            requests: n,
            hits: hit_stats.hits,
            misses: hit_stats.misses,
            hit_rate: hit_stats.hit_rate(),
            mean_latency_s: if n == 0 {
                0.0
            } else {
                totals.iter().sum::<f64>() / n as f64
            },
            p50_latency_s: percentile(&totals, 0.50),
            p99_latency_s: percentile(&totals, 0.99),
            total_comm_s: rows.iter().map(|r| r.comm_s).sum(),
            total_compute_s: rows.iter().map(|r| r.compute_s).sum(),
            total_cost: rows.iter().map(|r| r.cost).sum(),
            footprint_bytes,
            function_count,
        };
        Self { rows, summary }
    }

    /// Writes `report.csv` (per-request rows) and `summary.json` under
    /// `dir`. Output is byte-stable for identical runs.
    pub fn emit(&self, dir: &Path) -> Result<(), ReportError> {
        fs::create_dir_all(dir)?;
        let mut writer = csv::Writer::from_path(dir.join("report.csv"))?;
        writer.write_record(["request_id", "workload", "policy", "hit", "comm_s", "compute_s", "cost"])?;
        for row in &self.rows {
            writer.write_record([
                row.request_id.as_str(),
                row.workload.as_str(),
                row.policy.as_str(),
                if row.hit { "1" } else { "0" },
                &format!("{}", row.comm_s),
                &format!("{}", row.compute_s),
                &format!("{}", row.cost),
            ])?;
        }
        writer.flush()?;

        let mut file = fs::File::create(dir.join("summary.json"))?;
        let json = serde_json::to_string_pretty(&self.summary)?;
        file.write_all(json.as_bytes())?;
        file.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_summary(dir: &Path) -> Result<RunSummary, ReportError> {
        let bytes = fs::read(dir.join("summary.json"))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn read_rows(dir: &Path) -> Result<Vec<RequestRow>, ReportError> {
        let mut reader = csv::Reader::from_path(dir.join("report.csv"))?;
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            rows.push(RequestRow {
                request_id: record[0].to_string(),
                workload: record[1].parse().unwrap_or(Workload::Inference),
                policy: record[2].to_string(),
                hit: &record[3] == "1",
                comm_s: record[4].parse().unwrap_or(0.0),
                compute_s: record[5].parse().unwrap_or(0.0),
                cost: record[6].parse().unwrap_or(0.0),
            });
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIB: u64 = 1 << 20;

    #[test]
    fn flstore_hit_pays_only_the_round_trip() {
        let cost = CostParams { rtt_s: 0.05, ..Default::default() };
        for size in [0u64, 1000, 500 * MIB] {
            let lat = latency_flstore(true, size, &cost, 2.8);
            assert_eq!(lat.comm_s, 0.05);
        }
    }

    #[test]
    fn flstore_miss_matches_arithmetic_oracle() {
        // 84.5e6 bytes at 1 Gbit/s with 0.05 s rtt:
        // 0.05 + 84.5e6 * 8 / 1e9 = 0.726
        let cost = CostParams { rtt_s: 0.05, bandwidth_gbps: 1.0, ..Default::default() };
        let lat = latency_flstore(false, 84_500_000, &cost, 2.8);
        assert!((lat.comm_s - 0.726).abs() < 1e-9, "got {}", lat.comm_s);
    }

    #[test]
    fn baseline_latencies_are_monotone_in_size_and_blob_count() {
        let cost = CostParams::default();
        let mut last_obj = 0.0;
        let mut last_cache = 0.0;
        for n_blobs in 1..10u64 {
            let bytes = n_blobs * 10 * MIB;
            let obj = latency_baseline_objstore(bytes, &cost, 1.0).total_s();
            let cache = latency_baseline_cache(bytes, &cost, 1.0).total_s();
            assert!(obj > last_obj);
            assert!(cache > last_cache);
            last_obj = obj;
            last_cache = cache;
        }
        // and in model size for a fixed count
        let a = latency_baseline_objstore(10 * MIB, &cost, 1.0).total_s();
        let b = latency_baseline_objstore(20 * MIB, &cost, 1.0).total_s();
        assert!(b > a);
    }

    #[test]
    fn costs_are_monotone_in_moved_bytes() {
        let cost = CostParams::default();
        let lat = LatencyBreakdown::new(1.0, 1.0);
        let mut last = 0.0;
        for mb in [1u64, 10, 100, 1000] {
            let c = cost_objstore_request(&lat, mb * MIB, 1, &cost);
            assert!(c > last);
            last = c;
        }
    }

    #[test]
    fn communication_bound_under_defaults() {
        // the separated-plane inference request is communication-dominated;
        // the unified-plane hit path is compute-dominated
        let cost = CostParams::default();
        let table = ComputeTable::default();
        let compute = table.get(Workload::Inference);
        let model = (84.5 * MIB as f64) as u64;
        let obj = latency_baseline_objstore(model, &cost, compute);
        assert!(obj.comm_fraction() >= 0.90, "objstore {}", obj.comm_fraction());
        let fl = latency_flstore(true, 0, &cost, compute);
        assert!(fl.comm_fraction() <= 0.10, "flstore {}", fl.comm_fraction());
    }

    #[test]
    fn compute_table_mean_is_near_reported_average()
    {
        let mean = ComputeTable::default().mean();
        assert!((mean - 2.8).abs() < 0.05, "mean compute {mean}");
    }

    #[test]
    fn footprint_untailored_matches_direct_multiplication() {
        let model = (84.5 * MIB as f64) as u64;
        let (bytes, functions) = footprint_untailored(1000, 1000, model, 8 * (1u64 << 30));
        assert_eq!(bytes, 1000 * 1000 * model, "oracle: direct multiplication");
        let tb = bytes as f64 / (1u64 << 40) as f64;
        assert!((75.0..=83.0).contains(&tb), "{tb} TB");
        assert_eq!(functions, bytes.div_ceil(8 * (1 << 30)));

        let (zero, zero_fns) = footprint_untailored(1000, 0, model, 8 * (1 << 30));
        assert_eq!((zero, zero_fns), (0, 0));
    }

    #[test]
    fn tailored_footprint_is_a_tiny_fraction() {
        let model = (84.5 * MIB as f64) as u64;
        let tailored = footprint_tailored(WorkloadClass::P2, 10, model, 2048, 10, 2);
        let (untailored, _) = footprint_untailored(1000, 1000, model, 8 * (1 << 30));
        assert!(tailored * 1000 < untailored);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert_eq!(percentile(&v, 0.99), 5.0);
        assert_eq!(percentile(&[], 0.5), 0.0);
    }

    #[test]
    fn report_round_trips_exactly() {
        let rows: Vec<RequestRow> = (0..50)
            .map(|i| RequestRow {
                request_id: format!("q{i}"),
                workload: Workload::ALL[i % 13],
                policy: "p2".into(),
                hit: i % 7 != 0,
                comm_s: 0.05 + i as f64 * 0.001,
                compute_s: 1.0 / (i + 1) as f64,
                cost: 1e-5 * i as f64,
            })
            .collect();
        let stats = HitStats { hits: 43, misses: 7 };
        let report = RunReport::from_rows("p2", rows, stats, 123456, 2);

        let dir = tempfile::tempdir().unwrap();
        report.emit(dir.path()).unwrap();
        let summary = RunReport::read_summary(dir.path()).unwrap();
        assert_eq!(summary, report.summary);

        let rows = RunReport::read_rows(dir.path()).unwrap();
        let rebuilt = RunReport::from_rows("p2", rows, stats, 123456, 2);
        assert_eq!(rebuilt.summary, report.summary, "aggregates recomputable from rows");

        // byte-identical re-emission
        let dir2 = tempfile::tempdir().unwrap();
        report.emit(dir2.path()).unwrap();
        assert_eq!(
            fs::read(dir.path().join("report.csv")).unwrap(),
            fs::read(dir2.path().join("report.csv")).unwrap()
        );
        assert_eq!(
            fs::read(dir.path().join("summary.json")).unwrap(),
            fs::read(dir2.path().join("summary.json")).unwrap()
        );
    }
}
