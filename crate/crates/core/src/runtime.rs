//! Producer/consumer execution of action chunks.
//!
//! The consumer pops one action per control tick from an [`ExecutionBuffer`]
//! indexed by absolute step numbers; the producer runs inference cycles and
//! writes their output back. Under async chunking a cycle started when the
//! read cursor is at `base` locks the `d` buffered rows `[base, base + d)` as
//! its prefix and writes only rows `[base + d, base + T)` when it finishes.
//!
//! Two clocks drive the pair: a deterministic simulated clock, where a cycle
//! started after tick `n` with sampled latency `l` is released before tick
//! `n + max(1, ceil(l / dt))`, and the wall clock with one thread per actor.

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::flow_policy::{euler_denoise, ideal_field, noise_chunk, DenoiseOptions};
use crate::mpg::GateDiagnostics;
use crate::rng::{self, stream};
use crate::sim::{LatencyModel, SimEmbodiment};
use crate::uac::{latency_steps, lock_prefix};
use crate::unified_space::UnifiedVector;

pub const DEFAULT_STARVATION_LIMIT: usize = 200;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    #[default]
    HoldLast,
    SafePose,
}

#[derive(Clone, Debug)]
struct Slot {
    action: Vec<f64>,
    cycle: u64,
}

/// Ring of pending actions keyed by absolute step index.
#[derive(Clone, Debug)]
pub struct ExecutionBuffer {
    chunk_len: usize,
    capacity: usize,
    slots: Vec<Option<Slot>>,
    read: u64,
    write: u64,
    pushed: BTreeSet<u64>,
    last: Option<Vec<f64>>,
    safe_pose: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushReport {
    /// Slots overwritten with postfix rows.
    pub written: usize,
    /// Empty slots filled from the (padded) prefix.
    pub padded: usize,
    /// Postfix rows whose step had already been executed.
    pub violations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Popped {
    pub step: u64,
    pub action: Vec<f64>,
    /// `None` for fallback actions.
    pub cycle: Option<u64>,
    pub underflow: bool,
}

impl ExecutionBuffer {
    /// `capacity` must be at least twice the chunk length.
    pub fn new(chunk_len: usize, capacity: usize, safe_pose: Vec<f64>) -> Result<Self> {
        if chunk_len == 0 {
            return Err(Error::invalid("chunk length", "must be >= 1"));
        }
        if capacity < 2 * chunk_len {
            return Err(Error::invalid(
                "buffer capacity",
                format!("{capacity} < 2 x chunk length {chunk_len}"),
            ));
        }
        if safe_pose.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("safe pose"));
        }
        Ok(Self {
            chunk_len,
            capacity,
            slots: vec![None; capacity],
            read: 0,
            write: 0,
            pushed: BTreeSet::new(),
            last: None,
            safe_pose,
        })
    }

    pub fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn read_cursor(&self) -> u64 {
        self.read
    }

    pub fn write_cursor(&self) -> u64 {
        self.write
    }

    pub fn occupancy(&self) -> usize {
        (self.write - self.read) as usize
    }

    fn idx(&self, step: u64) -> usize {
        (step % self.capacity as u64) as usize
    }

    /// Pending action for `step`, if buffered.
    pub fn get(&self, step: u64) -> Option<&[f64]> {
        if step < self.read || step >= self.write {
            return None;
        }
        self.slots[self.idx(step)].as_ref().map(|s| s.action.as_slice())
    }

    /// Rows `[base, base + d)` as they will be executed. Rows not yet buffered
    /// repeat the last buffered (or last executed, or safe) action. Returns the
    /// rows and how many came from the buffer.
    pub fn committed_prefix(&self, base: u64, d: usize, dim: usize) -> (Array2<f64>, usize) {
        let mut out = Array2::zeros((d, dim));
        let mut fill: Vec<f64> = match base.checked_sub(1).and_then(|s| self.get(s)) {
            Some(a) => a.to_vec(),
            None => self.last.clone().unwrap_or_else(|| self.safe_pose.clone()),
        };
        let mut available = 0;
        for i in 0..d {
            if let Some(a) = self.get(base + i as u64) {
                fill = a.to_vec();
                available += 1;
            }
            for (o, v) in out.row_mut(i).iter_mut().zip(&fill) {
                *o = *v;
            }
        }
        (out, available)
    }

    fn check_push(&mut self, chunk: ArrayView2<f64>, base: u64, cycle: u64) -> Result<()> {
        check_len("chunk rows", self.chunk_len, chunk.nrows())?;
        if chunk.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pushed chunk"));
        }
        if self.pushed.contains(&cycle) {
            return Err(Error::DuplicateCycle(cycle));
        }
        let end = base + self.chunk_len as u64;
        if end > self.read + self.capacity as u64 {
            return Err(Error::Backpressure {
                requested: end,
                read: self.read,
                capacity: self.capacity,
            });
        }
        if base > self.write {
            return Err(Error::Protocol(format!(
                "chunk base {base} leaves a gap after write cursor {}",
                self.write
            )));
        }
        Ok(())
    }

    /// Writes postfix rows `d..T` at steps `base + d..`; prefix rows only fill
    /// slots that were never buffered. Executed steps are left alone.
    pub fn push_postfix(&mut self, chunk: ArrayView2<f64>, base: u64, d: usize, cycle: u64) -> Result<PushReport> {
        if d > self.chunk_len {
            return Err(Error::invalid("delay", format!("{d} exceeds chunk length {}", self.chunk_len)));
        }
        self.check_push(chunk, base, cycle)?;
        let mut rep = PushReport::default();
        for (i, row) in chunk.rows().into_iter().enumerate() {
            let step = base + i as u64;
            if step < self.read {
                if i >= d {
                    rep.violations += 1;
                }
                continue;
            }
            if i < d && step < self.write {
                continue;
            }
            let k = self.idx(step);
            self.slots[k] = Some(Slot {
                action: row.to_vec(),
                cycle,
            });
            if i < d {
                rep.padded += 1;
            } else {
                rep.written += 1;
            }
        }
        self.write = self.write.max(base + self.chunk_len as u64);
        self.pushed.insert(cycle);
        Ok(rep)
    }

    /// Replaces everything pending with the chunk, starting at the read
    /// cursor. This is the synchronous-chunking baseline.
    pub fn push_at_read(&mut self, chunk: ArrayView2<f64>, cycle: u64) -> Result<PushReport> {
        let base = self.read;
        self.check_push(chunk, base, cycle)?;
        for (i, row) in chunk.rows().into_iter().enumerate() {
            let k = self.idx(base + i as u64);
            self.slots[k] = Some(Slot {
                action: row.to_vec(),
                cycle,
            });
        }
        self.write = base + self.chunk_len as u64;
        self.pushed.insert(cycle);
        Ok(PushReport {
            written: self.chunk_len,
            ..PushReport::default()
        })
    }

    /// Next action, or the fallback when nothing is buffered.
    pub fn pop_or_fallback(&mut self, fallback: Fallback) -> Popped {
        let step = self.read;
        if self.read < self.write {
            let k = self.idx(step);
            let slot = self.slots[k].take().expect("slots between cursors are filled");
            self.read += 1;
            self.last = Some(slot.action.clone());
            return Popped {
                step,
                action: slot.action,
                cycle: Some(slot.cycle),
                underflow: false,
            };
        }
        let action = match fallback {
            Fallback::HoldLast => self.last.clone().unwrap_or_else(|| self.safe_pose.clone()),
            Fallback::SafePose => self.safe_pose.clone(),
        };
        self.read += 1;
        self.write = self.read;
        self.last = Some(action.clone());
        log::debug!("underflow at step {step}");
        Popped {
            step,
            action,
            cycle: None,
            underflow: true,
        }
    }
}

// ---------------------------------------------------------------------------
// Policies

pub struct PlanRequest<'a> {
    pub cycle: u64,
    /// Absolute step of chunk row 0.
    pub base: u64,
    /// Simulator state before step `base` executes.
    pub state: &'a [f64],
    /// Locked prefix rows (`d x dim`); empty when chunking synchronously.
    pub committed: ArrayView2<'a, f64>,
    pub uac: bool,
}

#[derive(Clone, Debug)]
pub struct PlanOutput {
    pub chunk: Array2<f64>,
    pub gate: Vec<GateDiagnostics>,
}

/// Produces a `T x dim` chunk per inference cycle.
pub trait ChunkPolicy {
    fn chunk_len(&self) -> usize;
    fn plan(&mut self, req: &PlanRequest<'_>) -> Result<PlanOutput>;
}

/// Tracks a reference with geometric error decay. The planned actions are the
/// target of an ideal rectified field, integrated from noise with the prefix
/// locked, so the produced chunk goes through the regular sampler.
pub struct AnalyticTrackingPolicy {
    model: SimEmbodiment,
    reference: Vec<UnifiedVector>,
    chunk_len: usize,
    /// Fraction of the tracking error removed per step.
    pub gain: f64,
    pub steps: usize,
    noise: rng::SplitMix64,
}

impl AnalyticTrackingPolicy {
    pub fn new(model: SimEmbodiment, reference: Vec<UnifiedVector>, chunk_len: usize, seed: u64) -> Result<Self> {
        if reference.is_empty() {
            return Err(Error::invalid("reference trajectory", "empty"));
        }
        if chunk_len == 0 {
            return Err(Error::invalid("chunk length", "must be >= 1"));
        }
        Ok(Self {
            model,
            reference,
            chunk_len,
            gain: 0.5,
            steps: crate::flow_policy::DEFAULT_STEPS,
            noise: rng::stream_rng(seed, stream::NOISE),
        })
    }

    fn reference_at(&self, step: u64) -> &[f64] {
        let i = (step as usize).min(self.reference.len() - 1);
        self.reference[i].as_slice()
    }

    /// Rows `start..T` planned from `state` at step `base + start`.
    fn target_chunk(&self, base: u64, state: &[f64], committed: ArrayView2<f64>) -> Result<Array2<f64>> {
        let dim = state.len();
        let mut out = Array2::zeros((self.chunk_len, dim));
        let mut q = state.to_vec();
        for (i, row) in committed.rows().into_iter().enumerate() {
            out.row_mut(i).assign(&row);
            q = self.model.next_state(&q, row.as_slice().expect("standard layout"))?;
        }
        for i in committed.nrows()..self.chunk_len {
            let k = base + i as u64;
            let (r0, r1) = (self.reference_at(k), self.reference_at(k + 1));
            let desired: Vec<f64> = (0..dim)
                .map(|j| r1[j] + (1.0 - self.gain) * (q[j] - r0[j]))
                .collect();
            let a = self.model.action_towards(&q, &desired)?;
            q = self.model.next_state(&q, &a)?;
            for (o, v) in out.row_mut(i).iter_mut().zip(&a) {
                *o = *v;
            }
        }
        Ok(out)
    }
}

impl ChunkPolicy for AnalyticTrackingPolicy {
    fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    fn plan(&mut self, req: &PlanRequest<'_>) -> Result<PlanOutput> {
        let target = self.target_chunk(req.base, req.state, req.committed)?;
        let x0 = noise_chunk(&mut self.noise, target.nrows(), target.ncols());
        let field = ideal_field(&target, &x0);
        let d = req.committed.nrows();
        let committed = req.committed.to_owned();
        let hook = move |x: &mut Array2<f64>| lock_prefix(x, &committed, d);
        let opts = DenoiseOptions {
            clean_prefix: d,
            ..DenoiseOptions::with_steps(self.steps)
        };
        let out = euler_denoise(&field, &x0, &ndarray_ctx(target.ncols()), &opts, Some(&hook))?;
        Ok(PlanOutput {
            chunk: out.actions,
            gate: Vec::new(),
        })
    }
}

/// A one-token context for fields that ignore conditioning.
fn ndarray_ctx(width: usize) -> crate::flow_policy::ContextFeatures {
    let z = Array2::zeros((1, width.max(1)));
    crate::flow_policy::ContextFeatures::from_parts(z.view(), z.view(), z.view()).expect("valid spans")
}

// ---------------------------------------------------------------------------
// Sessions

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    #[default]
    Sim,
    Wall,
}

#[derive(Clone, Debug)]
pub struct SessionConfig {
    pub steps: u64,
    /// Committed prefix length `d`.
    pub delay: usize,
    /// Defaults to twice the chunk length.
    pub capacity: Option<usize>,
    pub fallback: Fallback,
    pub uac: bool,
    pub starvation_limit: usize,
    pub clock: Clock,
}

impl SessionConfig {
    pub fn new(steps: u64, delay: usize) -> Self {
        Self {
            steps,
            delay,
            capacity: None,
            fallback: Fallback::HoldLast,
            uac: true,
            starvation_limit: DEFAULT_STARVATION_LIMIT,
            clock: Clock::Sim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub action: Vec<f64>,
    pub cycle: Option<u64>,
    pub underflow: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: u64,
    /// Absolute step of chunk row 0 as written.
    pub base: u64,
    pub delay: usize,
    pub start_step: u64,
    pub ready_step: u64,
    pub latency_s: f64,
    pub inference_wall_s: f64,
    /// Prefix rows that were buffered when the cycle started.
    pub committed_available: usize,
    pub push: PushReport,
    pub gate: Vec<GateDiagnostics>,
    #[serde(skip)]
    pub chunk: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SessionLog {
    pub embodiment: String,
    pub steps: Vec<StepRecord>,
    pub cycles: Vec<CycleRecord>,
}

impl SessionLog {
    pub fn underflows(&self) -> usize {
        self.steps.iter().filter(|s| s.underflow).count()
    }

    /// One JSON object per control step.
    pub fn write_steps_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n").map_err(|e| Error::io("<session log>", e))?;
        }
        Ok(())
    }

    pub fn write_cycles_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for c in &self.cycles {
            serde_json::to_writer(&mut w, c)?;
            w.write_all(b"\n").map_err(|e| Error::io("<cycle log>", e))?;
        }
        Ok(())
    }

    /// Inference latency percentiles `(p50, p95, p99)` in seconds: measured
    /// compute time plus injected latency.
    pub fn latency_percentiles(&self) -> (f64, f64, f64) {
        let mut v: Vec<f64> = self
            .cycles
            .iter()
            .map(|c| c.inference_wall_s.max(c.latency_s))
            .collect();
        percentiles(&mut v)
    }
}

pub fn percentiles(v: &mut [f64]) -> (f64, f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    v.sort_by(f64::total_cmp);
    let at = |q: f64| v[((q * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)];
    (at(0.5), at(0.95), at(0.99))
}

/// Outcome of [`verify_continuity`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub steps: usize,
    pub gaps: usize,
    pub underflows: usize,
    /// Executed actions that differ from their source cycle's row.
    pub source_mismatches: usize,
    /// Locked prefix rows that differ from what was actually executed.
    pub prefix_mismatches: usize,
    /// Prefix rows compared bit for bit.
    pub boundaries_checked: usize,
    pub violations: usize,
}

impl ContinuityReport {
    pub fn is_clean(&self) -> bool {
        self.gaps == 0
            && self.underflows == 0
            && self.source_mismatches == 0
            && self.prefix_mismatches == 0
            && self.violations == 0
    }
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Replays a session log: consecutive steps, every executed action equal to
/// its producing row, and every locked prefix equal to what ran.
pub fn verify_continuity(log: &SessionLog) -> ContinuityReport {
    let mut rep = ContinuityReport {
        steps: log.steps.len(),
        ..Default::default()
    };
    for (i, s) in log.steps.iter().enumerate() {
        if s.step != i as u64 {
            rep.gaps += 1;
        }
    }
    rep.underflows = log.underflows();
    let by_id: std::collections::HashMap<u64, &CycleRecord> = log.cycles.iter().map(|c| (c.cycle, c)).collect();
    for s in &log.steps {
        if let Some(c) = s.cycle.and_then(|id| by_id.get(&id)) {
            let row = s.step.checked_sub(c.base).map(|r| r as usize);
            match row.and_then(|r| c.chunk.get(r)) {
                Some(expected) if same_bits(expected, &s.action) => {}
                _ => rep.source_mismatches += 1,
            }
        }
    }
    for c in &log.cycles {
        rep.violations += c.push.violations;
        for i in 0..c.delay.min(c.chunk.len()) {
            let step = c.base + i as u64;
            let Some(rec) = log.steps.get(step as usize) else { continue };
            if rec.underflow {
                continue;
            }
            rep.boundaries_checked += 1;
            if !same_bits(&rec.action, &c.chunk[i]) {
                rep.prefix_mismatches += 1;
            }
        }
    }
    rep
}

struct Pending {
    cycle: u64,
    base: u64,
    delay: usize,
    start_step: u64,
    ready_step: u64,
    latency_s: f64,
    wall_s: f64,
    available: usize,
    out: PlanOutput,
}

fn run_cycle(
    policy: &mut dyn ChunkPolicy,
    buf: &Mutex<ExecutionBuffer>,
    state: &[f64],
    cycle: u64,
    delay: usize,
    uac: bool,
) -> Result<(u64, usize, PlanOutput, f64)> {
    let (base, committed, available) = {
        let b = buf.lock().expect("buffer lock");
        let base = b.read_cursor();
        let d = if uac { delay } else { 0 };
        let (rows, avail) = b.committed_prefix(base, d, state.len());
        (base, rows, avail)
    };
    let t0 = Instant::now();
    let out = policy.plan(&PlanRequest {
        cycle,
        base,
        state,
        committed: committed.view(),
        uac,
    })?;
    let wall = t0.elapsed().as_secs_f64();
    check_len("planned chunk rows", policy.chunk_len(), out.chunk.nrows())?;
    check_len("planned chunk width", state.len(), out.chunk.ncols())?;
    Ok((base, available, out, wall))
}

fn push_pending(buf: &Mutex<ExecutionBuffer>, p: &Pending, uac: bool) -> Result<(u64, PushReport)> {
    let mut b = buf.lock().expect("buffer lock");
    if uac {
        Ok((p.base, b.push_postfix(p.out.chunk.view(), p.base, p.delay, p.cycle)?))
    } else {
        let base = b.read_cursor();
        Ok((base, b.push_at_read(p.out.chunk.view(), p.cycle)?))
    }
}

fn record(p: Pending, base: u64, push: PushReport) -> CycleRecord {
    CycleRecord {
        cycle: p.cycle,
        base,
        delay: p.delay,
        start_step: p.start_step,
        ready_step: p.ready_step,
        latency_s: p.latency_s,
        inference_wall_s: p.wall_s,
        committed_available: p.available,
        push,
        gate: p.out.gate,
        chunk: p.out.chunk.rows().into_iter().map(|r| r.to_vec()).collect(),
    }
}

/// Runs the consumer for `cfg.steps` ticks against a producer driving
/// `policy`. Cycle 0 runs synchronously before the first tick.
pub fn run_session(
    policy: &mut (dyn ChunkPolicy + Send),
    sim: &mut SimEmbodiment,
    latency: &mut LatencyModel,
    cfg: &SessionConfig,
    safe_pose: Vec<f64>,
) -> Result<SessionLog> {
    let t = policy.chunk_len();
    if cfg.delay >= t && cfg.uac {
        return Err(Error::invalid("delay", format!("{} leaves no postfix in a chunk of {t}", cfg.delay)));
    }
    check_len("safe pose", sim.layout().dim(), safe_pose.len())?;
    let capacity = cfg.capacity.unwrap_or(2 * t);
    let buf = Mutex::new(ExecutionBuffer::new(t, capacity, safe_pose)?);
    let mut log = SessionLog {
        embodiment: sim.spec.id.clone(),
        ..Default::default()
    };
    if cfg.steps == 0 {
        return Ok(log);
    }
    // bootstrap: the first chunk is computed before the robot moves
    let state0 = sim.state().as_slice().to_vec();
    let (base, available, out, wall) = run_cycle(policy, &buf, &state0, 0, 0, true)?;
    let boot = Pending {
        cycle: 0,
        base,
        delay: 0,
        start_step: 0,
        ready_step: 0,
        latency_s: 0.0,
        wall_s: wall,
        available,
        out,
    };
    let (b0, rep) = push_pending(&buf, &boot, true)?;
    log.cycles.push(record(boot, b0, rep));
    match cfg.clock {
        // compute time never advances the simulated clock; dropping it keeps
        // sim-clock logs byte-identical across runs
        Clock::Sim => run_sim_clock(policy, sim, latency, cfg, &buf, log).map(|mut log| {
            for c in &mut log.cycles {
                c.inference_wall_s = 0.0;
            }
            log
        }),
        Clock::Wall => run_wall_clock(policy, sim, latency, cfg, &buf, log),
    }
}

fn run_sim_clock(
    policy: &mut (dyn ChunkPolicy + Send),
    sim: &mut SimEmbodiment,
    latency: &mut LatencyModel,
    cfg: &SessionConfig,
    buf: &Mutex<ExecutionBuffer>,
    mut log: SessionLog,
) -> Result<SessionLog> {
    let t = policy.chunk_len();
    let dt = sim.dt();
    let mut pending: Option<Pending> = None;
    let mut next_cycle = 1u64;
    let mut starved = 0usize;
    for n in 0..cfg.steps {
        if pending.as_ref().is_some_and(|p| p.ready_step <= n) {
            let p = pending.take().unwrap();
            let (base, rep) = push_pending(buf, &p, cfg.uac)?;
            log.cycles.push(record(p, base, rep));
        }
        let popped = buf.lock().expect("buffer lock").pop_or_fallback(cfg.fallback);
        sim.step(&UnifiedVector::from_vec(popped.action.clone())?)?;
        starved = if popped.underflow { starved + 1 } else { 0 };
        log.steps.push(StepRecord {
            step: popped.step,
            action: popped.action,
            cycle: popped.cycle,
            underflow: popped.underflow,
        });
        if starved > cfg.starvation_limit {
            log::error!("producer starved for {starved} ticks at step {n}");
            return Err(Error::Starvation {
                step: n,
                consecutive: starved,
            });
        }
        let occupancy = buf.lock().expect("buffer lock").occupancy();
        if pending.is_none() && occupancy <= t && n + 1 < cfg.steps {
            let cycle = next_cycle;
            next_cycle += 1;
            let state = sim.state().as_slice().to_vec();
            let (base, available, out, wall) = run_cycle(policy, buf, &state, cycle, cfg.delay, cfg.uac)?;
            let l = latency.sample();
            pending = Some(Pending {
                cycle,
                base,
                delay: if cfg.uac { cfg.delay } else { 0 },
                start_step: n,
                ready_step: n + latency_steps(l, dt).max(1) as u64,
                latency_s: l,
                wall_s: wall,
                available,
                out,
            });
        }
    }
    Ok(log)
}

fn run_wall_clock(
    policy: &mut (dyn ChunkPolicy + Send),
    sim: &mut SimEmbodiment,
    latency: &mut LatencyModel,
    cfg: &SessionConfig,
    buf: &Mutex<ExecutionBuffer>,
    mut log: SessionLog,
) -> Result<SessionLog> {
    let t = policy.chunk_len();
    let dt = Duration::from_secs_f64(sim.dt());
    let done = AtomicBool::new(false);
    let snapshot = Mutex::new((0u64, sim.state().as_slice().to_vec()));
    let cycles = Mutex::new(Vec::new());
    let result = std::thread::scope(|scope| -> Result<Vec<StepRecord>> {
        let producer = scope.spawn(|| -> Result<()> {
            let mut cycle = 1u64;
            while !done.load(Ordering::Acquire) {
                let occupancy = buf.lock().expect("buffer lock").occupancy();
                if occupancy > t {
                    std::thread::sleep(dt / 10);
                    continue;
                }
                let (start_step, state) = snapshot.lock().expect("snapshot lock").clone();
                let t0 = Instant::now();
                let (base, available, out, wall) = run_cycle(policy, buf, &state, cycle, cfg.delay, cfg.uac)?;
                let l = latency.sample();
                if let Some(rest) = Duration::from_secs_f64(l).checked_sub(t0.elapsed()) {
                    std::thread::sleep(rest);
                }
                if done.load(Ordering::Acquire) {
                    break;
                }
                let p = Pending {
                    cycle,
                    base,
                    delay: if cfg.uac { cfg.delay } else { 0 },
                    start_step,
                    ready_step: buf.lock().expect("buffer lock").read_cursor(),
                    latency_s: l,
                    wall_s: wall,
                    available,
                    out,
                };
                let (b, rep) = push_pending(buf, &p, cfg.uac)?;
                cycles.lock().expect("cycle lock").push(record(p, b, rep));
                cycle += 1;
            }
            Ok(())
        });
        let mut steps = Vec::with_capacity(cfg.steps as usize);
        let start = Instant::now();
        let mut starved = 0usize;
        let mut outcome = Ok(());
        for n in 0..cfg.steps {
            let deadline = start + dt * n as u32;
            if let Some(wait) = deadline.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
            let popped = buf.lock().expect("buffer lock").pop_or_fallback(cfg.fallback);
            if let Err(e) = UnifiedVector::from_vec(popped.action.clone()).and_then(|a| sim.step(&a).map(|_| ())) {
                outcome = Err(e);
                break;
            }
            *snapshot.lock().expect("snapshot lock") = (n + 1, sim.state().as_slice().to_vec());
            starved = if popped.underflow { starved + 1 } else { 0 };
            steps.push(StepRecord {
                step: popped.step,
                action: popped.action,
                cycle: popped.cycle,
                underflow: popped.underflow,
            });
            if starved > cfg.starvation_limit {
                outcome = Err(Error::Starvation {
                    step: n,
                    consecutive: starved,
                });
                break;
            }
        }
        done.store(true, Ordering::Release);
        producer.join().expect("producer thread panicked")?;
        outcome.map(|_| steps)
    });
    log.steps = result?;
    log.cycles.extend(cycles.into_inner().expect("cycle lock"));
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{reference_trajectory, Dynamics, LatencyKind, Task};
    use crate::uac::commit_delay;
    use crate::unified_space::{EmbodimentSpec, SlotLayout};
    use ndarray::Array2;

    fn chunk(t: usize, dim: usize, base: f64) -> Array2<f64> {
        Array2::from_shape_fn((t, dim), |(i, j)| base + i as f64 + 0.01 * j as f64)
    }

    #[test]
    fn capacity_rule() {
        assert!(ExecutionBuffer::new(8, 15, vec![0.0]).is_err());
        assert!(ExecutionBuffer::new(8, 16, vec![0.0]).is_ok());
        assert!(ExecutionBuffer::new(0, 16, vec![0.0]).is_err());
    }

    #[test]
    fn push_into_empty_buffer() {
        let mut b = ExecutionBuffer::new(8, 16, vec![0.0; 2]).unwrap();
        let rep = b.push_postfix(chunk(8, 2, 0.0).view(), 0, 0, 1).unwrap();
        assert_eq!(b.occupancy(), 8);
        assert_eq!(rep.written, 8);
        assert!(matches!(
            b.push_postfix(chunk(8, 2, 0.0).view(), 0, 0, 1),
            Err(Error::DuplicateCycle(1))
        ));
    }

    #[test]
    fn postfix_over_half_consumed_chunk() {
        let mut b = ExecutionBuffer::new(8, 16, vec![0.0; 2]).unwrap();
        b.push_postfix(chunk(8, 2, 0.0).view(), 0, 0, 1).unwrap();
        for _ in 0..4 {
            b.pop_or_fallback(Fallback::HoldLast);
        }
        let before: Vec<Option<Vec<f64>>> = (0..16).map(|s| b.get(s).map(<[f64]>::to_vec)).collect();
        let rep = b.push_postfix(chunk(8, 2, 100.0).view(), 4, 3, 2).unwrap();
        assert_eq!(rep.written, 5);
        assert_eq!(rep.violations, 0);
        let mut changed = 0;
        for s in 0..16u64 {
            let now = b.get(s).map(<[f64]>::to_vec);
            if now != before[s as usize] {
                changed += 1;
                assert!((7..12).contains(&s));
            }
        }
        assert_eq!(changed, 5);
        assert_eq!(b.get(4).unwrap(), chunk(8, 2, 0.0).row(4).as_slice().unwrap());
        assert_eq!(b.write_cursor(), 12);
    }

    #[test]
    fn backpressure_and_gaps() {
        let mut b = ExecutionBuffer::new(4, 8, vec![0.0]).unwrap();
        b.push_postfix(chunk(4, 1, 0.0).view(), 0, 0, 1).unwrap();
        b.push_postfix(chunk(4, 1, 0.0).view(), 4, 0, 2).unwrap();
        assert!(matches!(
            b.push_postfix(chunk(4, 1, 0.0).view(), 5, 0, 3),
            Err(Error::Backpressure { .. })
        ));
        let mut b = ExecutionBuffer::new(4, 8, vec![0.0]).unwrap();
        assert!(matches!(b.push_postfix(chunk(4, 1, 0.0).view(), 2, 0, 1), Err(Error::Protocol(_))));
    }

    #[test]
    fn pop_and_fallbacks() {
        let mut b = ExecutionBuffer::new(2, 4, vec![9.0]).unwrap();
        let p = b.pop_or_fallback(Fallback::SafePose);
        assert_eq!((p.action, p.underflow), (vec![9.0], true));
        let p = b.pop_or_fallback(Fallback::HoldLast);
        assert_eq!((p.action, p.underflow, p.step), (vec![9.0], true, 1));
        b.push_postfix(Array2::from_elem((2, 1), 3.0).view(), 2, 0, 1).unwrap();
        b.pop_or_fallback(Fallback::HoldLast);
        let p = b.pop_or_fallback(Fallback::HoldLast);
        assert_eq!((p.action.clone(), p.underflow, p.cycle), (vec![3.0], false, Some(1)));
        let p = b.pop_or_fallback(Fallback::HoldLast);
        assert_eq!((p.action, p.underflow, p.cycle), (vec![3.0], true, None));
    }

    #[test]
    fn committed_prefix_pads_missing_rows() {
        let mut b = ExecutionBuffer::new(4, 8, vec![0.0]).unwrap();
        b.push_postfix(chunk(4, 1, 0.0).view(), 0, 0, 1).unwrap();
        b.pop_or_fallback(Fallback::HoldLast);
        let (rows, avail) = b.committed_prefix(1, 4, 1);
        assert_eq!(avail, 3);
        assert_eq!(rows.column(0).to_vec(), vec![1.0, 2.0, 3.0, 3.0]);
    }

    fn arm_session(latency: LatencyKind, steps: u64, uac: bool, seed: u64) -> Result<SessionLog> {
        let layout = SlotLayout::default_layout();
        let spec = EmbodimentSpec::new("arm", (0..7).chain([38]), 0.05, 0.12, &layout).unwrap();
        let mut sim = SimEmbodiment::new(spec.clone(), Dynamics::Integrator, layout.clone()).unwrap();
        let task = Task::FigureEight {
            period_steps: 120,
            amplitude: 0.8,
        };
        let reference = reference_trajectory(&task, &spec, &layout, steps as usize + 16, seed).unwrap();
        let mut policy = AnalyticTrackingPolicy::new(sim.clone(), reference, 8, seed).unwrap();
        let mut lat = LatencyModel::new(latency, seed).unwrap();
        let d = commit_delay(0.12, 0.05, 1).unwrap();
        let mut cfg = SessionConfig::new(steps, d);
        cfg.uac = uac;
        run_session(&mut policy, &mut sim, &mut lat, &cfg, vec![0.0; 48])
    }

    #[test]
    fn empty_session() {
        let log = arm_session(LatencyKind::Constant { s: 0.0 }, 0, true, 1).unwrap();
        assert!(log.steps.is_empty());
    }

    #[test]
    fn zero_latency_soak_is_clean() {
        let log = arm_session(LatencyKind::Constant { s: 0.0 }, 2000, true, 3).unwrap();
        let rep = verify_continuity(&log);
        assert!(rep.is_clean(), "{rep:?}");
        assert!(rep.boundaries_checked > 1000);
    }

    #[test]
    fn latency_within_budget_is_clean() {
        let log = arm_session(LatencyKind::UniformJitter { lo: 0.0, hi: 0.2 }, 2000, true, 4).unwrap();
        let rep = verify_continuity(&log);
        assert!(rep.is_clean(), "{rep:?}");
    }

    #[test]
    fn overload_degrades_gracefully() {
        let log = arm_session(LatencyKind::Constant { s: 0.4 }, 500, true, 5).unwrap();
        let rep = verify_continuity(&log);
        assert!(rep.underflows > 0);
        assert_eq!(rep.gaps, 0);
        assert_eq!(rep.source_mismatches, 0);
        for w in log.steps.windows(2) {
            if w[1].underflow {
                assert_eq!(w[1].action, w[0].action);
            }
        }
    }

    #[test]
    fn starvation_aborts() {
        let layout = SlotLayout::default_layout();
        let spec = EmbodimentSpec::new("arm", 0..7, 0.05, 0.12, &layout).unwrap();
        let mut sim = SimEmbodiment::new(spec.clone(), Dynamics::Integrator, layout.clone()).unwrap();
        let reference = vec![UnifiedVector::zeros(48)];
        let mut policy = AnalyticTrackingPolicy::new(sim.clone(), reference, 8, 0).unwrap();
        let mut lat = LatencyModel::new(LatencyKind::Constant { s: 100.0 }, 0).unwrap();
        let mut cfg = SessionConfig::new(1000, 4);
        cfg.starvation_limit = 20;
        let err = run_session(&mut policy, &mut sim, &mut lat, &cfg, vec![0.0; 48]).unwrap_err();
        assert!(matches!(err, Error::Starvation { consecutive: 21, .. }));
    }

    #[test]
    fn sessions_are_deterministic() {
        let kind = LatencyKind::UniformJitter { lo: 0.0, hi: 0.3 };
        let a = arm_session(kind, 300, true, 7).unwrap();
        let b = arm_session(kind, 300, true, 7).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.write_steps_jsonl(&mut x).unwrap();
        b.write_steps_jsonl(&mut y).unwrap();
        assert_eq!(x, y);
        let first = String::from_utf8(x).unwrap().lines().next().unwrap().to_string();
        assert!(first.starts_with("{\"step\":0,\"action\":["));
        assert!(first.ends_with("\"cycle\":0,\"underflow\":false}"));
    }

    #[test]
    fn sync_baseline_runs() {
        let log = arm_session(LatencyKind::UniformJitter { lo: 0.0, hi: 0.12 }, 400, false, 8).unwrap();
        assert_eq!(verify_continuity(&log).gaps, 0);
    }

    #[test]
    fn wall_clock_smoke() {
        let layout = SlotLayout::default_layout();
        let spec = EmbodimentSpec::new("fast", 0..7, 0.002, 0.004, &layout).unwrap();
        let mut sim = SimEmbodiment::new(spec.clone(), Dynamics::Integrator, layout.clone()).unwrap();
        let reference = vec![UnifiedVector::zeros(48); 200];
        let mut policy = AnalyticTrackingPolicy::new(sim.clone(), reference, 8, 0).unwrap();
        let mut lat = LatencyModel::new(LatencyKind::Constant { s: 0.001 }, 0).unwrap();
        let mut cfg = SessionConfig::new(100, 3);
        cfg.clock = Clock::Wall;
        let log = run_session(&mut policy, &mut sim, &mut lat, &cfg, vec![0.0; 48]).unwrap();
        assert_eq!(log.steps.len(), 100);
        assert_eq!(verify_continuity(&log).gaps, 0);
    }
}
