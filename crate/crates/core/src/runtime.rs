//! Frame-parallel inference runtime and benchmark harness.
//!
//! The front part (embedding plus dislocation layers) of every frame is an
//! independent task: it reads its own frame and the shared parameter
//! snapshot, and writes its boundary vector into a slot owned by its
//! `(sequence, frame)` index. Workers race over the task list but never over
//! results, so logits are bit-identical for any worker count. The back part
//! (pooling and head) runs serially afterwards.

use crate::geom::{Point3, PointCloudSequence};
use crate::model::{self, ModelConfig, ModelError};
use crate::tensor::{Graph, ParamSnapshot, Tensor};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("frame {frame} of sequence {sequence} failed: {source}")]
    Frame {
        sequence: usize,
        frame: usize,
        source: ModelError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(
        "determinism violation: checksum {got:016x} at {workers} workers, expected {expected:016x}"
    )]
    ChecksumMismatch {
        workers: usize,
        expected: u64,
        got: u64,
    },
    #[error("benchmark needs a nonempty worker list and batch")]
    EmptyBench,
}

/// Arithmetic carried end to end in 64-bit; `F32` rounds the parameter
/// snapshot, every boundary vector, and the logits through 32-bit storage
/// precision (the kernels themselves stay shared).
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(format!("unknown precision {other:?} (use f64 or f32)")),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        })
    }
}

/// How a batch is executed: worker count and numeric mode. Results are
/// independent of `workers` by construction.
#[derive(Clone, Debug)]
pub struct ExecutionPlan {
    pub workers: usize,
    pub precision: Precision,
}

impl ExecutionPlan {
    pub fn new(workers: usize) -> Self {
        ExecutionPlan {
            workers: workers.max(1),
            precision: Precision::F64,
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }
}

/// Run `count` independent tasks on `workers` threads. Task `i` writes only
/// slot `i`; the output order is therefore the task order no matter how the
/// scheduler interleaves. On failure the error with the lowest slot index is
/// reported, which keeps error surfaces deterministic too.
pub(crate) fn run_slotted<T, E, F>(count: usize, workers: usize, task: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync,
{
    let workers = workers.max(1).min(count.max(1));
    if workers <= 1 {
        return (0..count).map(&task).collect();
    }
    let cursor = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<T, E>)>();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let cursor = &cursor;
            let task = &task;
            scope.spawn(move || loop {
                let i = cursor.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                if tx.send((i, task(i))).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut slots: Vec<Option<T>> = (0..count).map(|_| None).collect();
        let mut first_err: Option<(usize, E)> = None;
        for (slot, result) in rx {
            match result {
                Ok(v) => slots[slot] = Some(v),
                Err(e) => {
                    if first_err.as_ref().is_none_or(|(s, _)| slot < *s) {
                        first_err = Some((slot, e));
                    }
                }
            }
        }
        if let Some((_, e)) = first_err {
            return Err(e);
        }
        Ok(slots
            .into_iter()
            .map(|s| s.expect("every task sent exactly one result"))
            .collect())
    })
}

fn maybe_quantize(t: Tensor, precision: Precision) -> Tensor {
    match precision {
        Precision::F64 => t,
        Precision::F32 => t.quantize_f32(),
    }
}

/// Compute one frame's boundary vector on a throwaway graph.
fn frame_unit(
    points: &[Point3],
    params: &ParamSnapshot,
    cfg: &ModelConfig,
    dv: Option<&Tensor>,
    frame_index: usize,
    precision: Precision,
) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let node = model::build_frame_front(&mut g, params, cfg, points, dv, frame_index)?;
    Ok(maybe_quantize(g.value(node).clone(), precision))
}

fn back_part(
    boundary: &[Tensor],
    params: &ParamSnapshot,
    cfg: &ModelConfig,
    precision: Precision,
) -> Result<Vec<f64>, ModelError> {
    let mut g = Graph::new();
    let nodes: Vec<_> = boundary.iter().map(|b| g.constant(b.clone())).collect();
    let logits = model::build_back(&mut g, params, cfg, &nodes)?;
    Ok(maybe_quantize(g.value(logits).clone(), precision)
        .data()
        .to_vec())
}

fn effective_snapshot(snapshot: &ParamSnapshot, precision: Precision) -> ParamSnapshot {
    match precision {
        Precision::F64 => snapshot.clone(),
        Precision::F32 => snapshot.quantize_f32().snapshot(),
    }
}

/// Classify one sequence. The per-frame front parts go to the worker pool;
/// a failing frame fails the whole sequence and names the frame.
pub fn infer_sequence(
    seq: &PointCloudSequence,
    snapshot: &ParamSnapshot,
    cfg: &ModelConfig,
    plan: &ExecutionPlan,
) -> Result<Vec<f64>, RuntimeError> {
    let mut out = infer_batch(std::slice::from_ref(seq), snapshot, cfg, plan)?;
    Ok(out
        .logits
        .pop()
        .expect("one sequence in, one logits row out"))
}

/// Batch output with per-phase wall clock, for the benchmark harness.
pub struct BatchOutput {
    pub logits: Vec<Vec<f64>>,
    pub front_time: Duration,
    pub back_time: Duration,
}

/// Classify a batch. Tasks are `(sequence, frame)` pairs, so a batch fans
/// out to `batch * T` units; the serial back part runs per sequence after
/// all units complete.
pub fn infer_batch(
    batch: &[PointCloudSequence],
    snapshot: &ParamSnapshot,
    cfg: &ModelConfig,
    plan: &ExecutionPlan,
) -> Result<BatchOutput, RuntimeError> {
    let params = effective_snapshot(snapshot, plan.precision);
    let dv = cfg.displacement_table()?;
    let frames = cfg.frames;
    for (s, seq) in batch.iter().enumerate() {
        if seq.len() != frames {
            return Err(RuntimeError::Frame {
                sequence: s,
                frame: seq.len().min(frames),
                source: ModelError::WrongFrameCount {
                    expected: frames,
                    got: seq.len(),
                },
            });
        }
    }

    let front_start = Instant::now();
    let boundary = run_slotted(batch.len() * frames, plan.workers, |i| {
        let (s, t) = (i / frames, i % frames);
        frame_unit(
            &batch[s].frames[t].points,
            &params,
            cfg,
            dv.as_ref(),
            t,
            plan.precision,
        )
        .map_err(|source| RuntimeError::Frame {
            sequence: s,
            frame: t,
            source,
        })
    })?;
    let front_time = front_start.elapsed();

    let back_start = Instant::now();
    let mut logits = Vec::with_capacity(batch.len());
    for s in 0..batch.len() {
        let rows = &boundary[s * frames..(s + 1) * frames];
        logits.push(back_part(rows, &params, cfg, plan.precision).map_err(RuntimeError::Model)?);
    }
    let back_time = back_start.elapsed();

    Ok(BatchOutput {
        logits,
        front_time,
        back_time,
    })
}

/// FNV-1a over the logits' IEEE-754 bit patterns; equal checksums mean
/// bit-identical outputs.
pub fn logits_checksum(logits: &[Vec<f64>]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for row in logits {
        for v in row {
            for byte in v.to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
    }
    hash
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub worker_counts: Vec<usize>,
    /// Measured repetitions per worker count (median reported).
    pub repetitions: usize,
    /// Unmeasured passes before the first repetition of each worker count.
    pub warmup: usize,
    pub precision: Precision,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            worker_counts: vec![1, 2, 4, 8],
            repetitions: 5,
            warmup: 3,
            precision: Precision::F64,
        }
    }
}

/// One measured configuration.
#[derive(Clone, Debug)]
pub struct BenchRecord {
    pub workers: usize,
    pub median_front_ms: f64,
    pub median_back_ms: f64,
    pub median_total_ms: f64,
    /// Front-part speedup relative to the 1-worker record (1.0 when the
    /// 1-worker configuration was not measured).
    pub speedup: f64,
    pub checksum: u64,
}

#[derive(Clone, Debug, Default)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
}

impl BenchReport {
    /// Bit-identical logits across all measured worker counts.
    pub fn checksums_agree(&self) -> bool {
        self.records
            .windows(2)
            .all(|w| w[0].checksum == w[1].checksum)
    }

    pub fn record_for(&self, workers: usize) -> Option<&BenchRecord> {
        self.records.iter().find(|r| r.workers == workers)
    }
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "workers\tmedian_front_ms\tmedian_back_ms\tspeedup\tchecksum"
        )?;
        for r in &self.records {
            writeln!(
                f,
                "{}\t{:.3}\t{:.3}\t{:.3}\t{:016x}",
                r.workers, r.median_front_ms, r.median_back_ms, r.speedup, r.checksum
            )?;
        }
        Ok(())
    }
}

fn median_ms(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Measure the batch at every worker count: median per-phase wall clock over
/// the repetitions after warm-up, front-part speedup versus one worker, and
/// the logits checksum. A checksum change across worker counts is an error,
/// not a statistic.
pub fn bench(
    batch: &[PointCloudSequence],
    snapshot: &ParamSnapshot,
    cfg: &ModelConfig,
    bench_cfg: &BenchConfig,
) -> Result<BenchReport, RuntimeError> {
    if batch.is_empty() || bench_cfg.worker_counts.is_empty() {
        return Err(RuntimeError::EmptyBench);
    }
    let mut report = BenchReport::default();
    let mut reference: Option<u64> = None;
    let mut base_front: Option<f64> = None;
    for &workers in &bench_cfg.worker_counts {
        let plan = ExecutionPlan::new(workers).with_precision(bench_cfg.precision);
        let mut fronts = Vec::with_capacity(bench_cfg.repetitions);
        let mut backs = Vec::with_capacity(bench_cfg.repetitions);
        let mut totals = Vec::with_capacity(bench_cfg.repetitions);
        let mut checksum = 0u64;
        for rep in 0..bench_cfg.warmup + bench_cfg.repetitions {
            let out = infer_batch(batch, snapshot, cfg, &plan)?;
            checksum = logits_checksum(&out.logits);
            if let Some(expected) = reference {
                if checksum != expected {
                    return Err(RuntimeError::ChecksumMismatch {
                        workers,
                        expected,
                        got: checksum,
                    });
                }
            } else {
                reference = Some(checksum);
            }
            if rep >= bench_cfg.warmup {
                fronts.push(out.front_time.as_secs_f64() * 1e3);
                backs.push(out.back_time.as_secs_f64() * 1e3);
                totals.push((out.front_time + out.back_time).as_secs_f64() * 1e3);
            }
        }
        let median_front_ms = median_ms(fronts);
        let speedup = match base_front {
            Some(base) => base / median_front_ms,
            None => {
                base_front = Some(median_front_ms);
                1.0
            }
        };
        report.records.push(BenchRecord {
            workers,
            median_front_ms,
            median_back_ms: median_ms(backs),
            median_total_ms: median_ms(totals),
            speedup,
            checksum,
        });
    }
    Ok(report)
}
