//! Latency harness: per-count repetitions, medians, and a fitted
//! ms-per-pedestrian slope with a bootstrap interval.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::association::{pipeline_sequential, pipeline_single_shot, StageTimings, Thresholds};
use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::nn::ParamStore;
use crate::scenario::{pedestrian_size, simulate, spawn_agents, AgentState, Intent, ObjectClass, SceneSequence, WorldConfig};

pub const LATENCY_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_COUNTS: [usize; 5] = [1, 2, 4, 8, 16];
pub const MIN_REPS: usize = 30;
pub const MIN_WARMUP: usize = 5;
/// A timed run must span at least this many clock ticks.
pub const MIN_TICKS: f64 = 100.0;
const BOOTSTRAP_RESAMPLES: usize = 200;

pub trait Clock {
    fn now_ns(&self) -> u64;
    fn resolution_ns(&self) -> u64;
}

/// `Instant`-based clock.
pub struct MonotonicClock {
    origin: Instant,
    resolution: u64,
}

impl MonotonicClock {
    pub fn new() -> Self {
        let origin = Instant::now();
        // smallest observable step over a few probes
        let mut res = u64::MAX;
        for _ in 0..16 {
            let a = origin.elapsed().as_nanos();
            let mut b = origin.elapsed().as_nanos();
            while b == a {
                b = origin.elapsed().as_nanos();
            }
            res = res.min((b - a) as u64);
        }
        MonotonicClock {
            origin,
            resolution: res.max(1),
        }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now_ns(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }

    fn resolution_ns(&self) -> u64 {
        self.resolution
    }
}

/// Manually advanced clock for testing the harness.
#[derive(Clone, Default)]
pub struct FakeClock {
    t: Arc<AtomicU64>,
    resolution: u64,
}

impl FakeClock {
    pub fn new(resolution_ns: u64) -> Self {
        FakeClock {
            t: Arc::new(AtomicU64::new(0)),
            resolution: resolution_ns,
        }
    }

    pub fn advance(&self, ns: u64) {
        self.t.fetch_add(ns, Ordering::SeqCst);
    }
}

impl Clock for FakeClock {
    fn now_ns(&self) -> u64 {
        self.t.load(Ordering::SeqCst)
    }

    fn resolution_ns(&self) -> u64 {
        self.resolution
    }
}

/// What one timed run reports besides its duration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunInfo {
    pub stages: StageTimings,
    pub invocations: usize,
    pub detections: usize,
}

pub trait BenchTarget {
    fn name(&self) -> &str;
    /// One inference on the scene with `count` pedestrians.
    fn run(&mut self, count: usize) -> Result<RunInfo>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub count: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
    /// Median per-stage times; stages that never ran are omitted.
    pub stage_median_ms: BTreeMap<String, f64>,
    /// Intention-network runs per inference (constant across reps).
    pub invocations: usize,
    /// Pedestrian detections per inference.
    pub pedestrian_detections: usize,
    pub samples_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineLatency {
    pub name: String,
    pub buckets: Vec<Bucket>,
    pub slope_ms_per_ped: f64,
    pub intercept_ms: f64,
    /// 95% bootstrap interval of the slope.
    pub slope_ci: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub schema_version: u32,
    pub counts: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub clock_resolution_ns: u64,
    pub pipelines: Vec<PipelineLatency>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            reps: MIN_REPS,
            warmup: MIN_WARMUP,
            seed: 0,
        }
    }
}

/// Linear interpolation between closest ranks.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    quantile(&s, 0.5)
}

/// Least-squares `(slope, intercept)`.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    (slope, my - slope * mx)
}

/// Slope through the per-count medians, with a 95% interval from
/// resampling the repetitions inside each count.
pub fn fit_slope(counts: &[usize], samples: &[Vec<f64>], seed: u64) -> (f64, f64, (f64, f64)) {
    let x: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let med: Vec<f64> = samples.iter().map(|s| median(s)).collect();
    let (slope, intercept) = ols(&x, &med);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boot = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let m: Vec<f64> = samples
            .iter()
            .map(|s| {
                let r: Vec<f64> = (0..s.len()).map(|_| s[rng.random_range(0..s.len())]).collect();
                median(&r)
            })
            .collect();
        boot.push(ols(&x, &m).0);
    }
    boot.sort_by(f64::total_cmp);
    (slope, intercept, (quantile(&boot, 0.025), quantile(&boot, 0.975)))
}

fn stage_map(stages: &[StageTimings]) -> BTreeMap<String, f64> {
    let fields: [(&str, fn(&StageTimings) -> u64); 6] = [
        ("detector", |s| s.detector_ns),
        ("decode", |s| s.decode_ns),
        ("auxiliary", |s| s.auxiliary_ns),
        ("associate", |s| s.associate_ns),
        ("crop", |s| s.crop_ns),
        ("classifier", |s| s.classifier_ns),
    ];
    let mut out = BTreeMap::new();
    for (name, f) in fields {
        let v: Vec<f64> = stages.iter().map(|s| f(s) as f64 / 1e6).collect();
        if v.iter().any(|&x| x > 0.0) {
            out.insert(name.to_string(), median(&v));
        }
    }
    out
}

/// Times every target at every count: `warmup` untimed runs, then `reps`
/// timed ones, all on the calling thread.
pub fn latency_bench(
    targets: &mut [&mut dyn BenchTarget],
    counts: &[usize],
    clock: &dyn Clock,
    opts: &BenchOptions,
) -> Result<LatencyReport> {
    if opts.reps < MIN_REPS || opts.warmup < MIN_WARMUP {
        return Err(Error::config(
            "reps",
            format!("need at least {MIN_REPS} reps after {MIN_WARMUP} warmups"),
        ));
    }
    if counts.len() < 2 {
        return Err(Error::config("counts", "need at least two pedestrian counts"));
    }
    let resolution = clock.resolution_ns().max(1);
    let mut pipelines = Vec::new();
    for target in targets.iter_mut() {
        let mut buckets = Vec::new();
        let mut all = Vec::new();
        for &count in counts {
            for _ in 0..opts.warmup {
                target.run(count)?;
            }
            let mut samples = Vec::with_capacity(opts.reps);
            let mut stages = Vec::with_capacity(opts.reps);
            let mut info = RunInfo::default();
            for _ in 0..opts.reps {
                let t0 = clock.now_ns();
                info = target.run(count)?;
                let dt = clock.now_ns() - t0;
                samples.push(dt as f64 / 1e6);
                stages.push(info.stages);
            }
            let mut sorted = samples.clone();
            sorted.sort_by(f64::total_cmp);
            let med = quantile(&sorted, 0.5);
            if med * 1e6 / (resolution as f64) < MIN_TICKS {
                return Err(Error::Benchmark(format!(
                    "{} at count {count}: median run spans fewer than {MIN_TICKS} clock ticks; use a larger preset",
                    target.name()
                )));
            }
            buckets.push(Bucket {
                count,
                median_ms: med,
                p95_ms: quantile(&sorted, 0.95),
                mean_ms: samples.iter().sum::<f64>() / samples.len() as f64,
                stage_median_ms: stage_map(&stages),
                invocations: info.invocations,
                pedestrian_detections: info.detections,
                samples_ms: samples.clone(),
            });
            all.push(samples);
        }
        let (slope, intercept, ci) = fit_slope(counts, &all, opts.seed);
        pipelines.push(PipelineLatency {
            name: target.name().to_string(),
            buckets,
            slope_ms_per_ped: slope,
            intercept_ms: intercept,
            slope_ci: ci,
        });
    }
    Ok(LatencyReport {
        schema_version: LATENCY_SCHEMA_VERSION,
        counts: counts.to_vec(),
        reps: opts.reps,
        warmup: opts.warmup,
        clock_resolution_ns: resolution,
        pipelines,
    })
}

/// Positions on a fixed lattice: eight along each sidewalk, in distinct
/// grid columns, upper sidewalk first.
fn lattice(world: &WorldConfig) -> Vec<(f64, f64)> {
    let s = world.scale();
    let (top, bottom) = world.road_band;
    let ys = [0.5 * (24.0 * s + top - 18.0 * s), 0.5 * (bottom + 24.0 * s + world.image_height as f64 - 22.0 * s)];
    let step = world.image_width as f64 / 8.0;
    ys.iter()
        .flat_map(|&y| (0..8).map(move |i| (step * (i as f64 + 0.5), y)))
        .collect()
}

/// Scenes identical apart from how many standing pedestrians occupy the
/// first `count` lattice positions. Counts above 16 are rejected.
pub fn bench_scene(world: &WorldConfig, count: usize, seed: u64) -> Result<SceneSequence> {
    let spots = lattice(world);
    if count > spots.len() {
        return Err(Error::config("counts", format!("bench scenes hold at most {} pedestrians", spots.len())));
    }
    let bg = WorldConfig {
        n_pedestrians: 0,
        ..world.clone()
    };
    let (mut agents, light) = spawn_agents(&bg, 0, &mut ChaCha8Rng::seed_from_u64(seed));
    let base = agents.len() as u32;
    for (n, &(x, y)) in spots.iter().take(count).enumerate() {
        agents.push(AgentState {
            track_id: base + 1 + n as u32,
            class: ObjectClass::Pedestrian,
            center: (x, y),
            size: pedestrian_size(world, y),
            velocity: (0.0, 0.0),
            intent: Intent::NotCross,
            heading: (1.0, 0.0),
        });
    }
    Ok(simulate(world, &agents, light, seed))
}

pub struct SingleShotTarget<'a> {
    pub params: &'a ParamStore<f32>,
    pub model: &'a ModelConfig,
    pub scenes: BTreeMap<usize, SceneSequence>,
    pub thresholds: Thresholds,
}

pub struct SequentialTarget<'a> {
    pub params: &'a ParamStore<f32>,
    pub model: &'a ModelConfig,
    pub scenes: BTreeMap<usize, SceneSequence>,
    pub thresholds: Thresholds,
}

pub fn bench_scenes(world: &WorldConfig, counts: &[usize], seed: u64) -> Result<BTreeMap<usize, SceneSequence>> {
    counts.iter().map(|&c| Ok((c, bench_scene(world, c, seed)?))).collect()
}

fn scene(scenes: &BTreeMap<usize, SceneSequence>, count: usize) -> Result<&SceneSequence> {
    scenes
        .get(&count)
        .ok_or_else(|| Error::config("counts", format!("no bench scene for {count}")))
}

impl BenchTarget for SingleShotTarget<'_> {
    fn name(&self) -> &str {
        "single_shot"
    }

    fn run(&mut self, count: usize) -> Result<RunInfo> {
        let s = scene(&self.scenes, count)?;
        let out = pipeline_single_shot(&s.frames, self.params, self.model, self.thresholds)?;
        Ok(RunInfo {
            stages: out.timings,
            invocations: out.intent_invocations,
            detections: out.assignments.len(),
        })
    }
}

impl BenchTarget for SequentialTarget<'_> {
    fn name(&self) -> &str {
        "sequential"
    }

    fn run(&mut self, count: usize) -> Result<RunInfo> {
        let s = scene(&self.scenes, count)?;
        let mut calls = 0usize;
        let mut hook = || calls += 1;
        let out = pipeline_sequential(&s.frames, &s.annotations, self.params, self.model, self.thresholds, Some(&mut hook))?;
        Ok(RunInfo {
            stages: out.timings,
            invocations: calls,
            detections: out.assignments.len(),
        })
    }
}
