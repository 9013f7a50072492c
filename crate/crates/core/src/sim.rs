//! Kinematic stand-ins for real embodiments, latency injection, reference
//! tasks and trajectory metrics.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::{self, stream};
use crate::runtime::SessionLog;
use crate::unified_space::{
    quaternion_to_axis_angle, EmbodimentSpec, SlotKind, SlotLayout, UnifiedVector,
};

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Dynamics {
    /// Actions are velocities: `q <- q + a dt`; rotation slots compose
    /// `exp(a dt) R`.
    Integrator,
    /// Actions are position targets: `q <- q + alpha (a - q)`.
    FirstOrderLag { alpha: f64 },
}

impl Dynamics {
    fn validate(&self) -> Result<()> {
        if let Dynamics::FirstOrderLag { alpha } = *self {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(Error::invalid("lag coefficient", format!("{alpha} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Simulated robot. State lives in the unified space; only active slots move.
#[derive(Clone, Debug)]
pub struct SimEmbodiment {
    pub spec: EmbodimentSpec,
    pub dynamics: Dynamics,
    layout: SlotLayout,
    state: UnifiedVector,
}

impl SimEmbodiment {
    pub fn new(spec: EmbodimentSpec, dynamics: Dynamics, layout: SlotLayout) -> Result<Self> {
        dynamics.validate()?;
        let state = UnifiedVector::zeros(layout.dim());
        Ok(Self {
            spec,
            dynamics,
            layout,
            state,
        })
    }

    pub fn layout(&self) -> &SlotLayout {
        &self.layout
    }

    pub fn state(&self) -> &UnifiedVector {
        &self.state
    }

    pub fn set_state(&mut self, state: UnifiedVector) -> Result<()> {
        check_len("state", self.layout.dim(), state.dim())?;
        self.state = state;
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.spec.control_period_s
    }

    /// Active rotation groups (three slots each).
    fn rotation_groups(&self) -> Vec<Range<usize>> {
        (0..self.layout.num_groups())
            .filter(|&g| self.layout.groups()[g].kind == SlotKind::EefRotAxisAngle)
            .map(|g| self.layout.group_range(g))
            .filter(|r| r.clone().all(|s| self.spec.is_active(s)))
            .collect()
    }

    /// State after applying `action` to `state`; does not touch `self`.
    pub fn next_state(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        check_len("state", self.layout.dim(), state.len())?;
        check_len("action", self.layout.dim(), action.len())?;
        if let Some(&s) = self.spec.active_slots().iter().find(|&&s| !action[s].is_finite()) {
            return Err(Error::invalid("action", format!("non-finite value in slot {s}")));
        }
        let dt = self.dt();
        let mut next = state.to_vec();
        let rot = self.rotation_groups();
        for &s in self.spec.active_slots() {
            if rot.iter().any(|r| r.contains(&s)) {
                continue;
            }
            next[s] = match self.dynamics {
                Dynamics::Integrator => state[s] + action[s] * dt,
                Dynamics::FirstOrderLag { alpha } => state[s] + alpha * (action[s] - state[s]),
            };
            if self.layout.kind_of_slot(s).is_some_and(SlotKind::is_angle) {
                next[s] = wrap_angle(next[s]);
            }
        }
        for r in rot {
            let cur = aa_quat(&state[r.clone()]);
            let a = &action[r.clone()];
            let q = match self.dynamics {
                Dynamics::Integrator => aa_quat(&[a[0] * dt, a[1] * dt, a[2] * dt]) * cur,
                Dynamics::FirstOrderLag { alpha } => cur.slerp(&aa_quat(a), alpha),
            };
            next[r].copy_from_slice(&quaternion_to_axis_angle(&q));
        }
        Ok(next)
    }

    /// Action that moves `state` exactly to `target` in one step.
    pub fn action_towards(&self, state: &[f64], target: &[f64]) -> Result<Vec<f64>> {
        check_len("state", self.layout.dim(), state.len())?;
        check_len("target", self.layout.dim(), target.len())?;
        let dt = self.dt();
        let mut a = vec![0.0; self.layout.dim()];
        let rot = self.rotation_groups();
        for &s in self.spec.active_slots() {
            if rot.iter().any(|r| r.contains(&s)) {
                continue;
            }
            let mut diff = target[s] - state[s];
            if self.layout.kind_of_slot(s).is_some_and(SlotKind::is_angle) {
                diff = wrap_angle(diff);
            }
            a[s] = match self.dynamics {
                Dynamics::Integrator => diff / dt,
                Dynamics::FirstOrderLag { alpha } => state[s] + diff / alpha,
            };
        }
        for r in rot {
            let cur = aa_quat(&state[r.clone()]);
            let tgt = aa_quat(&target[r.clone()]);
            let v = match self.dynamics {
                Dynamics::Integrator => quaternion_to_axis_angle(&(tgt * cur.inverse())).map(|c| c / dt),
                // slerp with alpha towards q reaches tgt when q = cur * (cur^-1 tgt)^(1/alpha)
                Dynamics::FirstOrderLag { alpha } => {
                    let rel = quaternion_to_axis_angle(&(cur.inverse() * tgt)).map(|c| c / alpha);
                    quaternion_to_axis_angle(&(cur * aa_quat(&rel)))
                }
            };
            a[r].copy_from_slice(&v);
        }
        Ok(a)
    }

    /// Advances the simulator by one control period.
    pub fn step(&mut self, action: &UnifiedVector) -> Result<&UnifiedVector> {
        let next = self.next_state(self.state.as_slice(), action.as_slice())?;
        self.state = UnifiedVector::from_vec(next)?;
        Ok(&self.state)
    }
}

fn aa_quat(w: &[f64]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(Vector3::new(w[0], w[1], w[2]))
}

/// `step_embodiment(sim, action)`.
pub fn step_embodiment(sim: &mut SimEmbodiment, action: &UnifiedVector) -> Result<UnifiedVector> {
    sim.step(action).cloned()
}

// ---------------------------------------------------------------------------
// Latency

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LatencyKind {
    Constant { s: f64 },
    UniformJitter { lo: f64, hi: f64 },
    /// `base`, plus `magnitude` with probability `p`.
    Spike { base: f64, p: f64, magnitude: f64 },
}

impl LatencyKind {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LatencyKind::Constant { s } => s.is_finite() && s >= 0.0,
            LatencyKind::UniformJitter { lo, hi } => lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi,
            LatencyKind::Spike { base, p, magnitude } => {
                base.is_finite() && base >= 0.0 && (0.0..=1.0).contains(&p) && magnitude.is_finite() && magnitude >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("latency model", format!("{self:?}")))
        }
    }

    /// Largest latency the model can produce.
    pub fn max(&self) -> f64 {
        match *self {
            LatencyKind::Constant { s } => s,
            LatencyKind::UniformJitter { hi, .. } => hi,
            LatencyKind::Spike { base, magnitude, .. } => base + magnitude,
        }
    }

    /// Every latency multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        match *self {
            LatencyKind::Constant { s } => LatencyKind::Constant { s: s * k },
            LatencyKind::UniformJitter { lo, hi } => LatencyKind::UniformJitter { lo: lo * k, hi: hi * k },
            LatencyKind::Spike { base, p, magnitude } => LatencyKind::Spike {
                base: base * k,
                p,
                magnitude: magnitude * k,
            },
        }
    }
}

/// Seeded latency sampler (seconds).
#[derive(Clone, Debug)]
pub struct LatencyModel {
    pub kind: LatencyKind,
    rng: rng::SplitMix64,
}

impl LatencyModel {
    pub fn new(kind: LatencyKind, seed: u64) -> Result<Self> {
        kind.validate()?;
        Ok(Self {
            kind,
            rng: rng::stream_rng(seed, stream::LATENCY),
        })
    }

    pub fn sample(&mut self) -> f64 {
        match self.kind {
            LatencyKind::Constant { s } => s,
            LatencyKind::UniformJitter { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    self.rng.random_range(lo..=hi)
                }
            }
            LatencyKind::Spike { base, p, magnitude } => {
                if self.rng.random_bool(p) {
                    base + magnitude
                } else {
                    base
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tasks

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Task {
    /// Minimum-jerk move from the zero state to `goal` (per active slot;
    /// seeded uniform in `[-amplitude, amplitude]` when absent), then hold.
    Reach {
        #[serde(default)]
        goal: Option<Vec<f64>>,
        move_steps: usize,
        amplitude: f64,
    },
    /// Per active slot pair `(A sin th, A/2 sin 2 th)` with `th = 2 pi (k mod P) / P`;
    /// amplitudes are seeded in `[A/2, A]`.
    FigureEight { period_steps: usize, amplitude: f64 },
    /// Reach towards one of two mirrored goals `+-amplitude`; the mode is a
    /// fair coin from the seed.
    BimodalPick { move_steps: usize, amplitude: f64 },
}

/// Bounds of the simulated workspace (metres or radians).
pub const WORKSPACE: f64 = 1.0;

fn min_jerk(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

/// Which of the two goal modes a seed selects.
pub fn bimodal_mode(seed: u64) -> usize {
    usize::from(rng::stream_rng(seed, stream::TASK).random_bool(0.5))
}

/// Target sequence of `steps` unified vectors.
pub fn reference_trajectory(
    task: &Task,
    emb: &EmbodimentSpec,
    layout: &SlotLayout,
    steps: usize,
    seed: u64,
) -> Result<Vec<UnifiedVector>> {
    let active = emb.active_slots();
    let dim = layout.dim();
    let mut r = rng::stream_rng(seed, stream::TASK);
    let check_amp = |a: f64| {
        if a.is_finite() && a > 0.0 && a <= WORKSPACE {
            Ok(())
        } else {
            Err(Error::invalid("task amplitude", format!("{a} outside (0, {WORKSPACE}]")))
        }
    };
    let reach = |goal: &[f64], move_steps: usize| -> Vec<UnifiedVector> {
        (0..steps)
            .map(|k| {
                let s = if move_steps == 0 { 1.0 } else { min_jerk(k as f64 / move_steps as f64) };
                let mut v = vec![0.0; dim];
                for (&slot, g) in active.iter().zip(goal) {
                    v[slot] = g * s;
                }
                UnifiedVector::from_vec(v).expect("finite")
            })
            .collect()
    };
    match task {
        Task::Reach {
            goal,
            move_steps,
            amplitude,
        } => {
            check_amp(*amplitude)?;
            let goal = match goal {
                Some(g) => {
                    check_len("reach goal", active.len(), g.len())?;
                    if g.iter().any(|v| !v.is_finite() || v.abs() > WORKSPACE) {
                        return Err(Error::invalid("reach goal", "outside the workspace"));
                    }
                    g.clone()
                }
                None => (0..active.len())
                    .map(|_| r.random_range(-*amplitude..=*amplitude))
                    .collect(),
            };
            Ok(reach(&goal, *move_steps))
        }
        Task::BimodalPick {
            move_steps,
            amplitude,
        } => {
            check_amp(*amplitude)?;
            let sign = if bimodal_mode(seed) == 1 { 1.0 } else { -1.0 };
            let goal = vec![sign * amplitude; active.len()];
            Ok(reach(&goal, *move_steps))
        }
        Task::FigureEight {
            period_steps,
            amplitude,
        } => {
            check_amp(*amplitude)?;
            if *period_steps == 0 {
                return Err(Error::invalid("figure-eight period", "must be >= 1"));
            }
            let amps: Vec<f64> = (0..active.len())
                .map(|_| r.random_range(0.5 * amplitude..=*amplitude))
                .collect();
            let p = *period_steps;
            Ok((0..steps)
                .map(|k| {
                    let th = 2.0 * PI * (k % p) as f64 / p as f64;
                    let mut v = vec![0.0; dim];
                    for (j, &slot) in active.iter().enumerate() {
                        v[slot] = if j % 2 == 0 {
                            amps[j] * th.sin()
                        } else {
                            0.5 * amps[j] * (2.0 * th).sin()
                        };
                    }
                    UnifiedVector::from_vec(v).expect("finite")
                })
                .collect())
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContinuityMetrics {
    pub max_step_jump: f64,
    pub mean_jerk: f64,
    pub underflow_rate: f64,
}

/// Metrics over a sequence of executed actions.
pub fn continuity_metrics_raw(actions: &[&[f64]], underflow: &[bool]) -> ContinuityMetrics {
    let n = actions.len();
    if n == 0 {
        return ContinuityMetrics::default();
    }
    let max_step_jump = actions
        .windows(2)
        .map(|w| w[0].iter().zip(w[1]).map(|(a, b)| (b - a).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    let jerks: Vec<f64> = actions
        .windows(3)
        .map(|w| {
            w[0].iter()
                .zip(w[1])
                .zip(w[2])
                .map(|((a, b), c)| (c - 2.0 * b + a).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mean_jerk = if jerks.is_empty() {
        0.0
    } else {
        jerks.iter().sum::<f64>() / jerks.len() as f64
    };
    let underflow_rate = underflow.iter().filter(|u| **u).count() as f64 / n as f64;
    ContinuityMetrics {
        max_step_jump,
        mean_jerk,
        underflow_rate,
    }
}

/// Jumps, jerk and underflow rate of a session's executed actions.
pub fn continuity_metrics(log: &SessionLog) -> Result<ContinuityMetrics> {
    if log.steps.is_empty() {
        return Err(Error::invalid("session log", "empty"));
    }
    let actions: Vec<&[f64]> = log.steps.iter().map(|s| s.action.as_slice()).collect();
    let flags: Vec<bool> = log.steps.iter().map(|s| s.underflow).collect();
    Ok(continuity_metrics_raw(&actions, &flags))
}

/// Mean over hands of the cosine between predicted and true net wrist
/// displacement (first to last state). A zero displacement on either side
/// contributes 0.
pub fn mwds(pred: &[Vec<f64>], gt: &[Vec<f64>], wrists: &[Range<usize>]) -> Result<f64> {
    if pred.len() < 2 || gt.len() < 2 {
        return Err(Error::invalid("trajectory", "needs at least two states"));
    }
    if wrists.is_empty() {
        return Err(Error::invalid("wrist slots", "no hands given"));
    }
    let disp = |traj: &[Vec<f64>], r: &Range<usize>| -> Result<Vec<f64>> {
        let (a, b) = (&traj[0], &traj[traj.len() - 1]);
        if r.end > a.len() || r.end > b.len() {
            return Err(Error::invalid("wrist slots", format!("{r:?} outside state")));
        }
        Ok(r.clone().map(|i| b[i] - a[i]).collect())
    };
    let mut total = 0.0;
    for r in wrists {
        let (p, g) = (disp(pred, r)?, disp(gt, r)?);
        let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if np > 0.0 && ng > 0.0 {
            let dot: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
            total += (dot / (np * ng)).clamp(-1.0, 1.0);
        }
    }
    Ok(total / wrists.len() as f64)
}

/// `step,s0,s1,...` rows.
pub fn trajectory_csv(traj: &[UnifiedVector]) -> String {
    let dim = traj.first().map_or(0, UnifiedVector::dim);
    let mut s = String::from("step");
    for j in 0..dim {
        let _ = write!(s, ",s{j}");
    }
    s.push('\n');
    for (k, v) in traj.iter().enumerate() {
        let _ = write!(s, "{k}");
        for x in v.as_slice() {
            let _ = write!(s, ",{x}");
        }
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------------------
// Fleet

#[derive(Clone, Debug)]
pub struct FleetMember {
    pub spec: EmbodimentSpec,
    pub dynamics: Dynamics,
    pub safe_pose: Vec<f64>,
}

/// Single-arm gripper at 20 Hz, bimanual dexterous at 50 Hz, low-cost arm at
/// 10 Hz, on the default layout.
pub fn default_fleet(layout: &SlotLayout) -> Result<Vec<FleetMember>> {
    let range = |name: &str| {
        layout
            .range_of(name)
            .ok_or_else(|| Error::invalid("slot layout", format!("no group `{name}`")))
    };
    let gripper_arm: Vec<usize> = range("left_arm_joints")?.chain(range("left_gripper")?).collect();
    let bimanual: Vec<usize> = range("left_arm_joints")?
        .chain(range("right_arm_joints")?)
        .chain(range("left_hand_fingers")?)
        .chain(range("right_hand_fingers")?)
        .collect();
    let lowcost: Vec<usize> = range("left_arm_joints")?.take(6).collect();
    let zeros = vec![0.0; layout.dim()];
    Ok(vec![
        FleetMember {
            spec: EmbodimentSpec::new("gripper_arm_20hz", gripper_arm, 0.05, 0.12, layout)?,
            dynamics: Dynamics::Integrator,
            safe_pose: zeros.clone(),
        },
        FleetMember {
            spec: EmbodimentSpec::new("bimanual_dex_50hz", bimanual, 0.02, 0.06, layout)?,
            dynamics: Dynamics::Integrator,
            safe_pose: zeros.clone(),
        },
        FleetMember {
            spec: EmbodimentSpec::new("lowcost_arm_10hz", lowcost, 0.1, 0.15, layout)?,
            dynamics: Dynamics::FirstOrderLag { alpha: 0.5 },
            safe_pose: zeros,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arm(dynamics: Dynamics) -> SimEmbodiment {
        let layout = SlotLayout::default_layout();
        let spec = EmbodimentSpec::new("arm", 0..7, 0.05, 0.1, &layout).unwrap();
        SimEmbodiment::new(spec, dynamics, layout).unwrap()
    }

    fn vec_with(dim: usize, slot: usize, v: f64) -> UnifiedVector {
        let mut x = vec![0.0; dim];
        x[slot] = v;
        UnifiedVector::from_vec(x).unwrap()
    }

    #[test]
    fn integrator_examples() {
        let mut s = arm(Dynamics::Integrator);
        let before = s.state().clone();
        s.step(&UnifiedVector::zeros(48)).unwrap();
        assert_eq!(s.state(), &before);
        s.step(&vec_with(48, 2, 0.1)).unwrap();
        assert_eq!(s.state()[2], 0.1 * 0.05);
        // inactive slots ignored, even when non-finite
        s.step(&vec_with(48, 30, 5.0)).unwrap();
        assert_eq!(s.state()[30], 0.0);
        let mut bad = vec![0.0; 48];
        bad[0] = f64::NAN;
        assert!(s.next_state(s.state().as_slice(), &bad).is_err());
    }

    #[test]
    fn lag_matches_closed_form() {
        let mut s = arm(Dynamics::FirstOrderLag { alpha: 0.5 });
        let target = vec_with(48, 1, 0.8);
        for k in 1..=100 {
            s.step(&target).unwrap();
            let expect = 0.8 * (1.0 - 0.5f64.powi(k));
            assert!((s.state()[1] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn joints_wrap() {
        let mut s = arm(Dynamics::Integrator);
        let mut st = vec![0.0; 48];
        st[0] = 3.1;
        s.set_state(UnifiedVector::from_vec(st).unwrap()).unwrap();
        s.step(&vec_with(48, 0, 2.0)).unwrap();
        assert!((s.state()[0] - (3.2 - 2.0 * PI)).abs() < 1e-12);
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn action_towards_reaches_target(
            cur in proptest::collection::vec(-1.0f64..1.0, 7),
            tgt in proptest::collection::vec(-1.0f64..1.0, 7),
            lag in proptest::bool::ANY,
        ) {
            let dynamics = if lag { Dynamics::FirstOrderLag { alpha: 0.4 } } else { Dynamics::Integrator };
            let s = arm(dynamics);
            let mut c = vec![0.0; 48];
            let mut t = vec![0.0; 48];
            c[..7].copy_from_slice(&cur);
            t[..7].copy_from_slice(&tgt);
            let a = s.action_towards(&c, &t).unwrap();
            let n = s.next_state(&c, &a).unwrap();
            for i in 0..7 {
                prop_assert!((n[i] - t[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn wrap_range(a in -100.0f64..100.0) {
            let w = wrap_angle(a);
            prop_assert!(w > -PI && w <= PI);
            prop_assert!(((a - w) / (2.0 * PI) - ((a - w) / (2.0 * PI)).round()).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_slots_compose() {
        let layout = SlotLayout::default_layout();
        let r = layout.range_of("left_eef_rot").unwrap();
        let spec = EmbodimentSpec::new("eef", r.clone(), 0.1, 0.1, &layout).unwrap();
        let s = SimEmbodiment::new(spec, Dynamics::Integrator, layout).unwrap();
        let mut a = vec![0.0; 48];
        a[r.start + 2] = 1.0; // 1 rad/s about z
        let mut st = vec![0.0; 48];
        for _ in 0..5 {
            st = s.next_state(&st, &a).unwrap();
        }
        assert!((st[r.start + 2] - 0.5).abs() < 1e-12);
        let mut tgt = vec![0.0; 48];
        tgt[r.start] = 0.3;
        tgt[r.start + 1] = -0.2;
        let a = s.action_towards(&st, &tgt).unwrap();
        let n = s.next_state(&st, &a).unwrap();
        for i in r {
            assert!((n[i] - tgt[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn latency_models() {
        let mut c = LatencyModel::new(LatencyKind::Constant { s: 0.03 }, 1).unwrap();
        assert_eq!(c.sample(), 0.03);
        let mut u = LatencyModel::new(LatencyKind::UniformJitter { lo: 0.01, hi: 0.02 }, 1).unwrap();
        assert!((0..1000).map(|_| u.sample()).all(|v| (0.01..=0.02).contains(&v)));
        let mut sp = LatencyModel::new(
            LatencyKind::Spike {
                base: 0.01,
                p: 0.25,
                magnitude: 0.1,
            },
            2,
        )
        .unwrap();
        let spikes = (0..10_000).filter(|_| sp.sample() > 0.05).count();
        assert!((spikes as f64 / 1e4 - 0.25).abs() < 0.02);
        assert!(LatencyModel::new(LatencyKind::Constant { s: -1.0 }, 0).is_err());
        assert!(LatencyModel::new(LatencyKind::UniformJitter { lo: 0.2, hi: 0.1 }, 0).is_err());
        let a: Vec<f64> = {
            let mut m = LatencyModel::new(LatencyKind::UniformJitter { lo: 0.0, hi: 1.0 }, 9).unwrap();
            (0..5).map(|_| m.sample()).collect()
        };
        let b: Vec<f64> = {
            let mut m = LatencyModel::new(LatencyKind::UniformJitter { lo: 0.0, hi: 1.0 }, 9).unwrap();
            (0..5).map(|_| m.sample()).collect()
        };
        assert_eq!(a, b);
    }

    fn spec() -> (SlotLayout, EmbodimentSpec) {
        let layout = SlotLayout::default_layout();
        let spec = EmbodimentSpec::new("arm", 0..7, 0.05, 0.1, &layout).unwrap();
        (layout, spec)
    }

    #[test]
    fn reach_to_start_is_constant() {
        let (layout, emb) = spec();
        let task = Task::Reach {
            goal: Some(vec![0.0; 7]),
            move_steps: 20,
            amplitude: 0.5,
        };
        let traj = reference_trajectory(&task, &emb, &layout, 50, 3).unwrap();
        assert!(traj.iter().all(|v| v == &traj[0]));
        let task = Task::Reach {
            goal: None,
            move_steps: 20,
            amplitude: 0.5,
        };
        let traj = reference_trajectory(&task, &emb, &layout, 50, 3).unwrap();
        assert_eq!(traj[20], traj[49]);
        assert!(traj[49].as_slice()[..7].iter().all(|v| v.abs() <= 0.5));
        assert_eq!(traj, reference_trajectory(&task, &emb, &layout, 50, 3).unwrap());
    }

    #[test]
    fn figure_eight_is_exactly_periodic() {
        let (layout, emb) = spec();
        let task = Task::FigureEight {
            period_steps: 37,
            amplitude: 0.8,
        };
        let traj = reference_trajectory(&task, &emb, &layout, 200, 5).unwrap();
        for k in 0..200 - 37 {
            assert_eq!(traj[k], traj[k + 37]);
        }
    }

    #[test]
    fn bimodal_mode_frequency() {
        let ones = (0..10_000u64).filter(|&s| bimodal_mode(s) == 1).count();
        assert!((ones as f64 / 1e4 - 0.5).abs() <= 0.02);
        let (layout, emb) = spec();
        let task = Task::BimodalPick {
            move_steps: 10,
            amplitude: 0.6,
        };
        for seed in 0..20 {
            let t = reference_trajectory(&task, &emb, &layout, 12, seed).unwrap();
            let sign = if bimodal_mode(seed) == 1 { 0.6 } else { -0.6 };
            assert!((t[11][0] - sign).abs() < 1e-12);
        }
    }

    #[test]
    fn continuity_metric_cases() {
        let c = vec![vec![0.3, -0.1]; 5];
        let refs: Vec<&[f64]> = c.iter().map(Vec::as_slice).collect();
        assert_eq!(continuity_metrics_raw(&refs, &[false; 5]), ContinuityMetrics::default());
        let mut j = c.clone();
        j[3][1] += 0.5;
        j[4][1] += 0.5;
        let refs: Vec<&[f64]> = j.iter().map(Vec::as_slice).collect();
        let m = continuity_metrics_raw(&refs, &[false, true, false, false, false]);
        assert!((m.max_step_jump - 0.5).abs() < 1e-15);
        assert!((m.underflow_rate - 0.2).abs() < 1e-15);
    }

    #[test]
    fn continuity_metrics_match_scan_oracle() {
        let mut r = rng::rng_from_seed(3);
        let acts: Vec<Vec<f64>> = (0..40).map(|_| rng::normal_vec(&mut r, 3)).collect();
        let flags: Vec<bool> = (0..40).map(|i| i % 7 == 0).collect();
        let refs: Vec<&[f64]> = acts.iter().map(Vec::as_slice).collect();
        let m = continuity_metrics_raw(&refs, &flags);
        let mut jump: f64 = 0.0;
        for i in 1..40 {
            for c in 0..3 {
                jump = jump.max((acts[i][c] - acts[i - 1][c]).abs());
            }
        }
        let mut jerk = 0.0;
        for i in 2..40 {
            let mut s = 0.0;
            for c in 0..3 {
                let v = acts[i][c] - 2.0 * acts[i - 1][c] + acts[i - 2][c];
                s += v * v;
            }
            jerk += s.sqrt();
        }
        assert_eq!(m.max_step_jump, jump);
        assert!((m.mean_jerk - jerk / 38.0).abs() < 1e-14);
        assert_eq!(m.underflow_rate, 6.0 / 40.0);
    }

    #[test]
    fn mwds_cases() {
        let w = [0..2, 2..4];
        let a = vec![vec![0.0, 0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0, 2.0]];
        assert!((mwds(&a, &a, &w).unwrap() - 1.0).abs() < 1e-15);
        let opp = vec![vec![0.0, 0.0, 1.0, 1.0], vec![-1.0, 0.0, 1.0, 0.0]];
        assert!((mwds(&a, &opp, &w).unwrap() + 1.0).abs() < 1e-15);
        let orth = vec![vec![0.0, 0.0, 1.0, 1.0], vec![0.0, 1.0, 2.0, 1.0]];
        assert!(mwds(&a, &orth, &w).unwrap().abs() < 1e-15);
        let still = vec![vec![0.0; 4], vec![0.0; 4]];
        assert_eq!(mwds(&a, &still, &w).unwrap(), 0.0);
        assert!(mwds(&a[..1], &a, &w).is_err());
    }

    #[test]
    fn fleet_spread() {
        let layout = SlotLayout::default_layout();
        let fleet = default_fleet(&layout).unwrap();
        let dims: Vec<usize> = fleet.iter().map(|m| m.spec.num_active()).collect();
        assert_eq!(dims, vec![8, 26, 6]);
        let d: Vec<usize> = fleet
            .iter()
            .map(|m| crate::uac::commit_delay(m.spec.latency_budget_s, m.spec.control_period_s, 1).unwrap())
            .collect();
        assert_eq!(d, vec![4, 4, 3]);
    }

    #[test]
    fn csv_layout() {
        let t = vec![UnifiedVector::from_vec(vec![1.0, 2.0]).unwrap()];
        assert_eq!(trajectory_csv(&t), "step,s0,s1\n0,1,2\n");
    }
}
