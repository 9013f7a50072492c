//! Seeded desk-scale experiments behind the CLI and the acceptance suite.

use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::MofField;
use crate::flow_policy::{
    draw_noised, euler_denoise, noise_chunk, train_toy_field, ActionEncoder, Batcher, ContextFeatures,
    DenoiseOptions, FieldShape, MlpArch, MlpField, ToySample, TrainConfig, TrainReport, VelocityField,
    DIVERGENCE_LOSS,
};
use crate::mpg::{
    action_anchor, calibrate_temperature, discrepancy, refine, train_with_mpg, MpgConfig, MpgParams, RefineOptions,
};
use crate::rng::{self, stream};
use crate::runtime::{run_session, AnalyticTrackingPolicy, Clock, Fallback, SessionConfig, SessionLog};
use crate::sim::{
    continuity_metrics, reference_trajectory, ContinuityMetrics, FleetMember, LatencyKind, LatencyModel,
    SimEmbodiment, Task,
};
use crate::uac::commit_delay;
use crate::unified_space::SlotLayout;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldArch {
    #[default]
    Mlp,
    Mof,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MofConfig {
    pub hidden: usize,
    pub experts: usize,
    pub top_k: usize,
}

impl Default for MofConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            experts: 4,
            top_k: 2,
        }
    }
}

/// Sampler and conditioning settings shared by every experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Chunk length `T`.
    pub chunk_len: usize,
    /// Euler steps `K`.
    pub denoise_steps: usize,
    /// Gated refinement rounds `N_ref`; 0 disables gating.
    pub refine_rounds: usize,
    pub mpg: MpgConfig,
    pub arch: FieldArch,
    pub mof: MofConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            chunk_len: 8,
            denoise_steps: crate::flow_policy::DEFAULT_STEPS,
            refine_rounds: 2,
            mpg: MpgConfig::default(),
            arch: FieldArch::Mlp,
            mof: MofConfig::default(),
        }
    }
}

// ---------------------------------------------------------------------------
// Two-mode toy

/// Two-mode 2-D target distribution and the training recipe for it.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BimodalConfig {
    pub modes: [[f64; 2]; 2],
    /// Per-coordinate Gaussian spread around each mode.
    pub spread: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub radius: f64,
    pub train: TrainConfig,
}

impl Default for BimodalConfig {
    fn default() -> Self {
        Self {
            modes: [[-1.0, -1.0], [1.0, 1.0]],
            spread: 0.05,
            train_samples: 2000,
            eval_samples: 1000,
            radius: 0.3,
            train: TrainConfig {
                lr: 0.05,
                steps: 20_000,
                batch: 128,
                seed: 0,
            },
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BimodalReport {
    /// Fraction of generated samples within `radius` of a mode.
    pub within: f64,
    /// Fraction of samples whose nearest mode is mode 0 / 1.
    pub freq: [f64; 2],
    pub train_seconds: f64,
    #[serde(skip)]
    pub training: TrainReport,
}

/// A trained toy field of either architecture.
pub enum ToyField {
    Mlp(MlpField),
    Mof(MofField),
}

impl ToyField {
    pub fn as_field(&self) -> &dyn VelocityField {
        match self {
            ToyField::Mlp(f) => f,
            ToyField::Mof(f) => f,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            ToyField::Mlp(f) => f.params(),
            ToyField::Mof(f) => f.stack.params(),
        }
    }
}

fn unit_ctx() -> ContextFeatures {
    let z = Array2::zeros((1, 1));
    ContextFeatures::from_parts(z.view(), z.view(), z.view()).expect("valid spans")
}

pub fn bimodal_shape() -> FieldShape {
    FieldShape {
        chunk_len: 1,
        action_dim: 2,
        d_model: 1,
        num_embodiments: 0,
    }
}

fn train_mof(mut field: MofField, data: &[ToySample], cfg: &TrainConfig) -> Result<(MofField, TrainReport)> {
    if data.is_empty() || cfg.batch == 0 {
        return Err(Error::invalid("training config", "needs data and batch >= 1"));
    }
    let mut batcher = Batcher::new(data.len(), cfg.seed);
    let mut noise = rng::stream_rng(cfg.seed, stream::NOISE);
    let mut times = rng::stream_rng(cfg.seed, stream::TIMESTEP);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch)
            .map(|_| {
                let s = &data[batcher.next()];
                let (x0, t, x_t, ctx) = draw_noised(s, None, &mut noise, &mut times)?;
                let v = &s.target - &x0;
                field.sample(x_t.view(), &vec![t; x_t.nrows()], v.view(), ctx.pooled().view(), s.embodiment)
            })
            .collect::<Result<Vec<_>>>()?;
        let out = field.stack.train_step(&batch, cfg.lr)?;
        let mean = out.loss / cfg.batch as f64;
        if !mean.is_finite() || mean > DIVERGENCE_LOSS {
            return Err(Error::TrainingDiverged { step, loss: mean });
        }
        report.loss_curve.push(mean);
    }
    Ok((field, report))
}

/// Trains the toy field on the two-mode target and scores generated samples.
pub fn bimodal_toy(cfg: &BimodalConfig, policy: &PolicyConfig, seed: u64) -> Result<(ToyField, BimodalReport)> {
    let mut r = rng::stream_rng(seed, stream::TASK);
    let ctx = unit_ctx();
    let data: Vec<ToySample> = (0..cfg.train_samples)
        .map(|i| {
            let m = cfg.modes[i % 2];
            let target = Array2::from_shape_fn((1, 2), |(_, j)| m[j] + cfg.spread * rng::normal(&mut r));
            ToySample {
                ctx: ctx.clone(),
                target,
                embodiment: None,
            }
        })
        .collect();
    let t0 = Instant::now();
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let (field, training) = match policy.arch {
        FieldArch::Mlp => {
            let (f, rep) = train_toy_field(MlpField::new(MlpArch::toy(bimodal_shape()), seed), &data, &train, None)?;
            (ToyField::Mlp(f), rep)
        }
        FieldArch::Mof => {
            let m = &policy.mof;
            let f = MofField::new(bimodal_shape(), m.hidden, m.experts, m.top_k, seed)?;
            let (f, rep) = train_mof(f, &data, &train)?;
            (ToyField::Mof(f), rep)
        }
    };
    let train_seconds = t0.elapsed().as_secs_f64();
    let mut noise = rng::stream_rng(seed, stream::NOISE);
    let opts = DenoiseOptions::with_steps(policy.denoise_steps);
    let (mut within, mut counts) = (0usize, [0usize; 2]);
    for _ in 0..cfg.eval_samples {
        let x0 = noise_chunk(&mut noise, 1, 2);
        let a = euler_denoise(field.as_field(), &x0, &ctx, &opts, None)?.actions;
        let dist = |m: &[f64; 2]| ((a[[0, 0]] - m[0]).powi(2) + (a[[0, 1]] - m[1]).powi(2)).sqrt();
        let (d0, d1) = (dist(&cfg.modes[0]), dist(&cfg.modes[1]));
        counts[usize::from(d1 < d0)] += 1;
        if d0.min(d1) <= cfg.radius {
            within += 1;
        }
    }
    let n = cfg.eval_samples.max(1) as f64;
    Ok((
        field,
        BimodalReport {
            within: within as f64 / n,
            freq: [counts[0] as f64 / n, counts[1] as f64 / n],
            train_seconds,
            training,
        },
    ))
}

// ---------------------------------------------------------------------------
// Closed-loop tracking sessions

/// One closed-loop session of the analytic tracking policy.
#[derive(Clone, Debug)]
pub struct TrackingSession {
    pub task: Task,
    pub latency: LatencyKind,
    pub steps: u64,
    pub chunk_len: usize,
    pub denoise_steps: usize,
    pub safety_steps: usize,
    pub uac: bool,
    pub clock: Clock,
    pub capacity: Option<usize>,
    pub fallback: Fallback,
    pub starvation_limit: usize,
}

impl TrackingSession {
    pub fn new(task: Task, latency: LatencyKind, steps: u64) -> Self {
        Self {
            task,
            latency,
            steps,
            chunk_len: 8,
            denoise_steps: crate::flow_policy::DEFAULT_STEPS,
            safety_steps: 1,
            uac: true,
            clock: Clock::Sim,
            capacity: None,
            fallback: Fallback::HoldLast,
            starvation_limit: crate::runtime::DEFAULT_STARVATION_LIMIT,
        }
    }
}

/// Committed prefix for an embodiment: its latency budget plus safety steps.
pub fn committed_delay(member: &FleetMember, safety_steps: usize) -> Result<usize> {
    commit_delay(member.spec.latency_budget_s, member.spec.control_period_s, safety_steps)
}

/// Runs `cfg` on `member`. Reference, latency draws and sampler noise all
/// derive from `seed`, so the UAC on/off arms of a pair see the same inputs.
pub fn tracking_session(
    cfg: &TrackingSession,
    member: &FleetMember,
    layout: &SlotLayout,
    seed: u64,
) -> Result<SessionLog> {
    let d = committed_delay(member, cfg.safety_steps)?;
    if d >= cfg.chunk_len {
        return Err(Error::invalid(
            "chunk length",
            format!("{} leaves no postfix after a committed prefix of {d}", cfg.chunk_len),
        ));
    }
    let mut sim = SimEmbodiment::new(member.spec.clone(), member.dynamics, layout.clone())?;
    let horizon = cfg.steps as usize + 2 * cfg.chunk_len + 1;
    let reference = reference_trajectory(&cfg.task, &member.spec, layout, horizon, seed)?;
    let mut policy = AnalyticTrackingPolicy::new(sim.clone(), reference, cfg.chunk_len, seed)?;
    policy.steps = cfg.denoise_steps;
    let mut latency = LatencyModel::new(cfg.latency, seed)?;
    let sc = SessionConfig {
        steps: cfg.steps,
        delay: d,
        capacity: cfg.capacity,
        fallback: cfg.fallback,
        uac: cfg.uac,
        starvation_limit: cfg.starvation_limit,
        clock: cfg.clock,
    };
    run_session(&mut policy, &mut sim, &mut latency, &sc, member.safe_pose.clone())
}

#[derive(Clone, Debug, Serialize)]
pub struct UacPair {
    pub seed: u64,
    pub with_uac: ContinuityMetrics,
    pub without_uac: ContinuityMetrics,
}

/// Paired sessions with and without async chunking.
pub fn ablate_uac(
    cfg: &TrackingSession,
    member: &FleetMember,
    layout: &SlotLayout,
    seeds: &[u64],
) -> Result<Vec<UacPair>> {
    seeds
        .iter()
        .map(|&seed| {
            let on = tracking_session(&TrackingSession { uac: true, ..cfg.clone() }, member, layout, seed)?;
            let off = tracking_session(&TrackingSession { uac: false, ..cfg.clone() }, member, layout, seed)?;
            Ok(UacPair {
                seed,
                with_uac: continuity_metrics(&on)?,
                without_uac: continuity_metrics(&off)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Gated refinement under context corruption

/// Toy conditional reach: the chunk ramps linearly from 0 to a goal that is
/// only visible through the state tokens.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpgAblationConfig {
    pub d_model: usize,
    pub train_samples: usize,
    pub train: TrainConfig,
    /// Clean-data gate the temperature is calibrated to.
    pub g_target: f64,
    /// Std of the additive noise on the state tokens at test time.
    pub corruption: f64,
    /// Fraction of training examples whose state tokens carry the same noise.
    pub train_corruption_rate: f64,
    pub trials: usize,
}

impl Default for MpgAblationConfig {
    fn default() -> Self {
        Self {
            d_model: 8,
            train_samples: 512,
            train: TrainConfig {
                lr: 0.05,
                steps: 6000,
                batch: 64,
                seed: 0,
            },
            g_target: 0.8,
            corruption: 1.0,
            train_corruption_rate: 0.0,
            trials: 50,
        }
    }
}

const REACH_DIM: usize = 2;
const STATE_ROWS: usize = 2;

struct ReachWorld {
    task_token: Array2<f64>,
    encoder: ActionEncoder,
    chunk_len: usize,
}

impl ReachWorld {
    fn new(d_model: usize, chunk_len: usize, seed: u64) -> Self {
        let mut r = rng::stream_rng(seed, stream::TASK);
        let task_token = Array2::from_shape_fn((1, d_model), |_| rng::normal(&mut r));
        let encoder = ActionEncoder::random(REACH_DIM, d_model, &mut r);
        Self {
            task_token,
            encoder,
            chunk_len,
        }
    }

    fn target(&self, goal: &[f64; 2]) -> Array2<f64> {
        let t = self.chunk_len as f64;
        Array2::from_shape_fn((self.chunk_len, REACH_DIM), |(i, j)| goal[j] * (i + 1) as f64 / t)
    }

    /// The goal, and the halfway point, as noise-free action embeddings.
    fn state_rows(&self, goal: &[f64; 2]) -> Array2<f64> {
        let g = Array2::from_shape_fn((STATE_ROWS, REACH_DIM), |(k, j)| goal[j] / (k + 1) as f64);
        self.encoder.encode(g.view(), 0.0)
    }

    fn context(&self, state: &Array2<f64>, actions: &Array2<f64>) -> Result<ContextFeatures> {
        let act = self.encoder.encode(actions.view(), 0.0);
        ContextFeatures::from_parts(self.task_token.view(), state.view(), act.view())
    }

    fn sample_goal<R: Rng + ?Sized>(r: &mut R) -> [f64; 2] {
        [r.random_range(-1.0..=1.0), r.random_range(-1.0..=1.0)]
    }
}

fn mean_row_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let d = a - b;
    d.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / d.nrows() as f64
}

#[derive(Clone, Debug, Serialize)]
pub struct MpgTrial {
    pub seed: u64,
    /// Mean per-row L2 distance to the clean target chunk.
    pub err_refined: f64,
    pub err_baseline: f64,
    pub gate: f64,
    pub discrepancy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MpgAblationReport {
    pub tau: f64,
    /// Mean gate of the first refinement round on clean contexts.
    pub clean_gate: f64,
    pub clean_err_refined: f64,
    pub clean_err_baseline: f64,
    pub trials: Vec<MpgTrial>,
    pub train_seconds: f64,
}

impl MpgAblationReport {
    /// Fraction of corrupted trials where refinement did not hurt.
    pub fn win_rate(&self) -> f64 {
        let wins = self.trials.iter().filter(|t| t.err_refined <= t.err_baseline).count();
        wins as f64 / self.trials.len().max(1) as f64
    }
}

/// Trains a field jointly with the gating parameters on the toy reach task,
/// then compares `policy.refine_rounds` of refinement against the plain
/// sampler on paired trials with corrupted state tokens.
pub fn ablate_mpg(cfg: &MpgAblationConfig, policy: &PolicyConfig, seed: u64) -> Result<MpgAblationReport> {
    let t_len = policy.chunk_len;
    let world = ReachWorld::new(cfg.d_model, t_len, seed);
    let mut r = rng::stream_rng(seed, stream::TASK ^ 0x5eed);
    let goals: Vec<[f64; 2]> = (0..cfg.train_samples).map(|_| ReachWorld::sample_goal(&mut r)).collect();
    let mut cr = rng::stream_rng(seed, stream::CORRUPTION);
    let data: Vec<ToySample> = goals
        .iter()
        .map(|g| {
            let target = world.target(g);
            let mut state = world.state_rows(g);
            if cr.random::<f64>() < cfg.train_corruption_rate {
                state.mapv_inplace(|v| v + cfg.corruption * rng::normal(&mut cr));
            }
            Ok(ToySample {
                ctx: world.context(&state, &target)?,
                target,
                embodiment: None,
            })
        })
        .collect::<Result<_>>()?;

    let mut params = MpgParams::new(cfg.d_model, &policy.mpg, seed)?;
    // calibrate on the same noised contexts training sees
    let mut noise = rng::stream_rng(seed ^ 0xca11, stream::NOISE);
    let mut times = rng::stream_rng(seed ^ 0xca11, stream::TIMESTEP);
    let clean_d: Vec<f64> = data
        .iter()
        .map(|s| {
            let anchor = action_anchor(world.encoder.encode(s.target.view(), 0.0).view())?;
            let (_, _, _, ctx) = draw_noised(s, Some(&world.encoder), &mut noise, &mut times)?;
            discrepancy(&ctx, anchor.view(), &params)
        })
        .collect::<Result<_>>()?;
    params.tau = calibrate_temperature(&clean_d, cfg.g_target)?;

    let shape = FieldShape {
        chunk_len: t_len,
        action_dim: REACH_DIM,
        d_model: cfg.d_model,
        num_embodiments: 0,
    };
    let field = MlpField::new(MlpArch::toy(shape), seed);
    let t0 = Instant::now();
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let (field, params, _) = train_with_mpg(field, params, &data, &train, &world.encoder)?;
    let train_seconds = t0.elapsed().as_secs_f64();

    let opts = DenoiseOptions {
        encoder: Some(&world.encoder),
        ..DenoiseOptions::with_steps(policy.denoise_steps)
    };
    let refined = RefineOptions {
        rounds: policy.refine_rounds,
        force_gate: None,
    };
    let zero_actions = Array2::zeros((t_len, REACH_DIM));
    let run = |state: &Array2<f64>, x0: &Array2<f64>| -> Result<(Array2<f64>, Array2<f64>, f64, f64)> {
        let ctx = world.context(state, &zero_actions)?;
        let out = refine(&field, x0, &ctx, &params, &world.encoder, &opts, None, &refined)?;
        let base = out.stages[0].actions.clone();
        let (d, g) = out.rounds.first().map_or((0.0, 1.0), |r| (r.d, r.g));
        Ok((out.chunk.actions, base, d, g))
    };

    let mut clean = (0.0, 0.0, 0.0);
    let mut trials = Vec::with_capacity(cfg.trials);
    for k in 0..cfg.trials {
        let trial_seed = rng::derive_seed(seed, 1000 + k as u64);
        let goal = ReachWorld::sample_goal(&mut rng::stream_rng(trial_seed, stream::TASK));
        let target = world.target(&goal);
        let x0 = noise_chunk(&mut rng::stream_rng(trial_seed, stream::NOISE), t_len, REACH_DIM);
        let state = world.state_rows(&goal);
        let (a, b, _, g) = run(&state, &x0)?;
        clean.0 += g;
        clean.1 += mean_row_error(&a, &target);
        clean.2 += mean_row_error(&b, &target);
        let mut cr = rng::stream_rng(trial_seed, stream::CORRUPTION);
        let corrupted = &state + &Array2::from_shape_fn(state.raw_dim(), |_| cfg.corruption * rng::normal(&mut cr));
        let (a, b, d, g) = run(&corrupted, &x0)?;
        trials.push(MpgTrial {
            seed: trial_seed,
            err_refined: mean_row_error(&a, &target),
            err_baseline: mean_row_error(&b, &target),
            gate: g,
            discrepancy: d,
        });
    }
    let n = cfg.trials.max(1) as f64;
    Ok(MpgAblationReport {
        tau: params.tau,
        clean_gate: clean.0 / n,
        clean_err_refined: clean.1 / n,
        clean_err_baseline: clean.2 / n,
        trials,
        train_seconds,
    })
}
