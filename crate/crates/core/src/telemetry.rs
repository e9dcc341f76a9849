//! Efficiency telemetry and run reports.
//!
//! Wall-clock time comes from the monotonic clock. Peak memory is reported
//! two ways: the process resident-set size sampled from the OS, and the
//! live-bytes high-water mark of [`CountingAllocator`] when a binary
//! installs it as the global allocator.

use std::alloc::{GlobalAlloc, Layout, System};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EvalResult, ForgettingMatrix};
use crate::tokens::TokenSet;
use crate::trainer::TrainConfig;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const REPORT_JSON: &str = "report.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const FORGETTING_CSV: &str = "forgetting.csv";

static LIVE_BYTES: AtomicUsize = AtomicUsize::new(0);
static PEAK_BYTES: AtomicUsize = AtomicUsize::new(0);
static ALLOCATOR_ACTIVE: AtomicBool = AtomicBool::new(false);

/// System allocator wrapper that tracks live and peak heap bytes.
///
/// ```ignore
/// #[global_allocator]
/// static ALLOC: ckge_core::telemetry::CountingAllocator = ckge_core::telemetry::CountingAllocator;
/// ```
pub struct CountingAllocator;

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            track_alloc(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        LIVE_BYTES.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            track_alloc(layout.size());
        }
        p
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            LIVE_BYTES.fetch_sub(layout.size(), Ordering::Relaxed);
            track_alloc(new_size);
        }
        p
    }
}

#[inline]
fn track_alloc(size: usize) {
    ALLOCATOR_ACTIVE.store(true, Ordering::Relaxed);
    let live = LIVE_BYTES.fetch_add(size, Ordering::Relaxed) + size;
    PEAK_BYTES.fetch_max(live, Ordering::Relaxed);
}

/// Peak live heap bytes since the last reset, if the counting allocator
/// is installed.
pub fn allocator_peak() -> Option<u64> {
    ALLOCATOR_ACTIVE
        .load(Ordering::Relaxed)
        .then(|| PEAK_BYTES.load(Ordering::Relaxed) as u64)
}

pub fn reset_allocator_peak() {
    PEAK_BYTES.store(LIVE_BYTES.load(Ordering::Relaxed), Ordering::Relaxed);
}

/// `(current RSS, RSS high-water mark)` in bytes from `/proc/self/status`.
pub fn process_rss() -> Option<(u64, u64)> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let field = |name: &str| {
        status
            .lines()
            .find(|l| l.starts_with(name))
            .and_then(|l| l.split_whitespace().nth(1))
            .and_then(|kb| kb.parse::<u64>().ok())
            .map(|kb| kb * 1024)
    };
    Some((field("VmRSS:")?, field("VmHWM:")?))
}

/// Background RSS sampler. Keeps the maximum observed resident size until
/// [`MemorySampler::take_peak`] starts a new window.
pub struct MemorySampler {
    peak: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MemorySampler {
    pub fn start(interval: Duration) -> Self {
        let peak = Arc::new(AtomicU64::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let handle = {
            let (peak, stop) = (peak.clone(), stop.clone());
            std::thread::Builder::new()
                .name("rss-sampler".into())
                .spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        if let Some((rss, _)) = process_rss() {
                            peak.fetch_max(rss, Ordering::Relaxed);
                        }
                        std::thread::sleep(interval);
                    }
                })
                .ok()
        };
        MemorySampler { peak, stop, handle }
    }

    /// Takes one synchronous sample (called at least once per epoch).
    pub fn sample(&self) {
        if let Some((rss, _)) = process_rss() {
            self.peak.fetch_max(rss, Ordering::Relaxed);
        }
    }

    /// Peak of the current window; the next window starts at the current RSS.
    pub fn take_peak(&self) -> Option<u64> {
        self.sample();
        let p = self.peak.load(Ordering::Relaxed);
        let now = process_rss().map_or(0, |(rss, _)| rss);
        self.peak.store(now, Ordering::Relaxed);
        (p > 0).then_some(p)
    }
}

impl Drop for MemorySampler {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Monotonic stopwatch accumulating named phases.
#[derive(Debug, Clone, Copy)]
pub struct Stopwatch(Instant);

impl Stopwatch {
    pub fn start() -> Self {
        Stopwatch(Instant::now())
    }

    pub fn secs(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Coordinates of a table that received a nonzero gradient at least once.
#[derive(Debug, Clone, Default)]
pub struct TouchBits {
    bits: Vec<bool>,
    count: usize,
}

impl TouchBits {
    pub fn new(len: usize) -> Self {
        TouchBits {
            bits: vec![false; len],
            count: 0,
        }
    }

    pub fn record<F: num_traits::Zero + Copy + PartialEq>(&mut self, grads: &[F]) {
        for (b, g) in self.bits.iter_mut().zip(grads) {
            if !*b && *g != F::zero() {
                *b = true;
                self.count += 1;
            }
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TokenLearning,
    Distillation,
}

/// Parameters updated in a stage. Token learning updates both token sets
/// (one set when shared); the embedding stage updates whatever the touch
/// bits recorded.
pub fn count_updated_parameters<F>(
    stage: Stage,
    entity_tokens: &TokenSet<F>,
    relation_tokens: &TokenSet<F>,
    shared_tokens: bool,
    touched: &[&TouchBits],
) -> usize
where
    F: crate::real::Real,
{
    match stage {
        Stage::TokenLearning => {
            if shared_tokens {
                entity_tokens.parameter_count()
            } else {
                entity_tokens.parameter_count() + relation_tokens.parameter_count()
            }
        }
        Stage::Distillation => touched.iter().map(|t| t.count()).sum(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMetrics {
    pub snapshot: usize,
    /// Training time of this snapshot (Stage I + Stage II), excluding
    /// evaluation and data loading.
    pub wall_time_s: f64,
    pub cumulative_time_s: f64,
    pub stage1_s: f64,
    pub stage2_s: f64,
    pub eval_s: f64,
    pub peak_rss_bytes: Option<u64>,
    pub peak_alloc_bytes: Option<u64>,
    /// Parameters updated by token learning: 0 when it did not run.
    pub stage1_updated_parameters: usize,
    /// Embedding coordinates that received a nonzero gradient.
    pub stage2_touched_parameters: usize,
    /// Size of the token sets, updated or not.
    pub token_parameters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub epochs: usize,
    pub diversity_before: f64,
    pub diversity_after: f64,
    pub objective_last_epoch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotReport {
    pub index: usize,
    /// Test split of this snapshot, evaluated by the model after it.
    pub test: EvalResult,
    pub best_valid_mrr: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Mean objective per positive for every completed epoch.
    pub epoch_losses: Vec<f64>,
    /// Objective of each batch of the first epoch, before its update.
    pub first_epoch_batch_losses: Vec<f64>,
    pub stage1: Option<Stage1Summary>,
    pub metrics: SnapshotMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub version: String,
    pub generated_at_unix: u64,
    pub config: TrainConfig,
    pub config_hash: String,
    pub snapshots: Vec<SnapshotReport>,
    pub forgetting: ForgettingMatrix,
}

impl RunReport {
    pub fn new(config: TrainConfig) -> Self {
        RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            version: version_stamp(),
            generated_at_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            config_hash: config.hash(),
            config,
            snapshots: Vec::new(),
            forgetting: ForgettingMatrix::new(),
        }
    }

    /// Mean MRR of the final model over the test splits of every snapshot.
    pub fn average_mrr(&self) -> f64 {
        match self.forgetting.cells.last() {
            Some(row) if !row.is_empty() => {
                row.iter().map(|r| r.mrr).sum::<f64>() / row.len() as f64
            }
            _ => 0.0,
        }
    }

    /// Mean of each snapshot's MRR measured right after training on it.
    pub fn mean_diagonal_mrr(&self) -> f64 {
        if self.snapshots.is_empty() {
            return 0.0;
        }
        self.snapshots.iter().map(|s| s.test.mrr).sum::<f64>() / self.snapshots.len() as f64
    }

    pub fn total_training_time(&self) -> f64 {
        self.snapshots
            .last()
            .map_or(0.0, |s| s.metrics.cumulative_time_s)
    }
}

pub fn version_stamp() -> String {
    match option_env!("CKGE_GIT_REV") {
        Some(rev) => format!("{}+{rev}", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_owned(),
    }
}

/// Writes `report.json`, `metrics.csv` and `forgetting.csv` into `dir`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join(REPORT_JSON);
    fs::write(&json, serde_json::to_vec_pretty(report)?).map_err(|e| Error::io(&json, e))?;

    let path = dir.join(METRICS_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "snapshot",
        "mrr",
        "hits1",
        "hits10",
        "queries",
        "best_valid_mrr",
        "best_epoch",
        "epochs_run",
        "wall_time_s",
        "cumulative_time_s",
        "stage1_s",
        "stage2_s",
        "eval_s",
        "peak_rss_bytes",
        "peak_alloc_bytes",
        "stage1_updated_parameters",
        "stage2_touched_parameters",
        "token_parameters",
    ])?;
    let opt = |v: Option<u64>| v.map_or_else(String::new, |x| x.to_string());
    for s in &report.snapshots {
        let m = &s.metrics;
        w.write_record([
            s.index.to_string(),
            s.test.mrr.to_string(),
            s.test.hits1.to_string(),
            s.test.hits10.to_string(),
            s.test.queries.to_string(),
            s.best_valid_mrr.to_string(),
            s.best_epoch.to_string(),
            s.epochs_run.to_string(),
            m.wall_time_s.to_string(),
            m.cumulative_time_s.to_string(),
            m.stage1_s.to_string(),
            m.stage2_s.to_string(),
            m.eval_s.to_string(),
            opt(m.peak_rss_bytes),
            opt(m.peak_alloc_bytes),
            m.stage1_updated_parameters.to_string(),
            m.stage2_touched_parameters.to_string(),
            m.token_parameters.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(FORGETTING_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["model", "snapshot", "mrr", "hits1", "hits10"])?;
    for (i, row) in report.forgetting.cells.iter().enumerate() {
        for (j, r) in row.iter().enumerate() {
            w.write_record([
                i.to_string(),
                j.to_string(),
                r.mrr.to_string(),
                r.hits1.to_string(),
                r.hits10.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<RunReport> {
    let path = dir.join(REPORT_JSON);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let report: RunReport = serde_json::from_slice(&bytes)?;
    if report.schema_version != REPORT_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "report schema {} (expected {REPORT_SCHEMA_VERSION})",
            report.schema_version
        )));
    }
    Ok(report)
}

/// One row of `metrics.csv`, as read back.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct MetricsRow {
    pub snapshot: usize,
    pub mrr: f64,
    pub hits1: f64,
    pub hits10: f64,
    pub queries: usize,
    pub best_valid_mrr: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub wall_time_s: f64,
    pub cumulative_time_s: f64,
    pub stage1_s: f64,
    pub stage2_s: f64,
    pub eval_s: f64,
    pub peak_rss_bytes: Option<u64>,
    pub peak_alloc_bytes: Option<u64>,
    pub stage1_updated_parameters: usize,
    pub stage2_touched_parameters: usize,
    pub token_parameters: usize,
}

pub fn read_metrics_csv(dir: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(dir.join(METRICS_CSV))?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ForgettingRow {
    pub model: usize,
    pub snapshot: usize,
    pub mrr: f64,
    pub hits1: f64,
    pub hits10: f64,
}

pub fn read_forgetting_csv(dir: &Path) -> Result<Vec<ForgettingRow>> {
    let mut r = csv::Reader::from_path(dir.join(FORGETTING_CSV))?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tokens::Scope;

    #[test]
    fn token_learning_counts_both_sets() {
        let mut r = rng::stream(0, &[]);
        let e = TokenSet::<f32>::init(5, 200, Scope::Entity, &mut r).unwrap();
        let rl = TokenSet::<f32>::init(5, 200, Scope::Relation, &mut r).unwrap();
        assert_eq!(
            count_updated_parameters(Stage::TokenLearning, &e, &rl, false, &[]),
            2000
        );
        assert_eq!(
            count_updated_parameters(Stage::TokenLearning, &e, &rl, true, &[]),
            1000
        );
        let untouched = TouchBits::new(10);
        assert_eq!(
            count_updated_parameters(Stage::Distillation, &e, &rl, false, &[&untouched]),
            0
        );
    }

    #[test]
    fn touch_bits_count_once() {
        let mut t = TouchBits::new(4);
        t.record(&[0.0f64, 1.0, 0.0, -2.0]);
        t.record(&[0.0f64, 3.0, 0.0, 0.0]);
        assert_eq!(t.count(), 2);
    }

    #[test]
    fn rss_is_readable_on_linux() {
        if cfg!(target_os = "linux") {
            let (rss, hwm) = process_rss().unwrap();
            assert!(rss > 0 && hwm >= rss);
        }
    }
}
