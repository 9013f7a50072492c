//! The acceptance suite behind `uniflow verify`. Every check is seeded and
//! self-contained; tolerances are fixed here.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use ndarray::{array, Array1, Array2};
use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::experts::{esa_train_step, AdapterBank, MofField};
use crate::flow_policy::{
    euler_denoise, finite_diff_check, fm_loss, ideal_field, interpolate, noise_chunk, ActionEncoder, ContextFeatures,
    DenoiseOptions, FieldShape, LossSample, MlpArch, MlpField,
};
use crate::harness::experiments::{
    ablate_mpg, ablate_uac, bimodal_toy, committed_delay, tracking_session, BimodalConfig, MpgAblationConfig,
    PolicyConfig, TrackingSession,
};
use crate::mpg::{self, enhance, gate, mpg_batch_loss, swd, swd_with_directions, MpgConfig, MpgParams, MpgSample};
use crate::rng;
use crate::runtime::{verify_continuity, ExecutionBuffer};
use crate::seqmodel::{
    assign_positions, gate_matrix, masked_ce_loss, serialize_qa, AttentionLayer, GateSpans, Modality, Role, Segment,
};
use crate::sim::{default_fleet, LatencyKind, Task};
use crate::uac::{commit_delay, masked_fm_loss};
use crate::unified_space::{SlotGroup, SlotKind, SlotLayout};

pub const FD_TOL: f64 = 1e-4;
pub const SWD_TOL: f64 = 1e-12;
pub const GATE_TOL: f64 = 1e-12;
pub const IDENTITY_TOL: f64 = 1e-13;
pub const UAC_WIN: f64 = 0.9;
pub const MPG_WIN: f64 = 0.8;
pub const TOY_WITHIN: f64 = 0.9;
pub const TOY_FREQ_TOL: f64 = 0.1;

#[derive(Clone, Debug, Serialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn(u64) -> Result<(bool, String)>;

const CRITERIA: [(u8, &str, Check); 13] = [
    (1, "rectified-flow exactness", flow_exactness),
    (2, "gradient fidelity", gradient_fidelity),
    (3, "swd oracle equivalence", swd_oracle),
    (4, "gate law", gate_law),
    (5, "gating identity and stop-gradient", gating_identity),
    (6, "delayed loss locality", loss_locality),
    (7, "protocol continuity", protocol_continuity),
    (8, "graceful degradation", graceful_degradation),
    (9, "toy flow training", toy_training),
    (10, "closed-loop ablation trend", ablation_trend),
    (11, "serialization guarantees", serialization),
    (12, "isolation guarantees", isolation),
    (13, "ring-buffer sizing", buffer_sizing),
];

pub fn criterion_ids() -> impl Iterator<Item = (u8, &'static str)> {
    CRITERIA.iter().map(|(id, name, _)| (*id, *name))
}

/// Runs one criterion; errors count as failures.
pub fn run_criterion(id: u8, seed: u64) -> Option<CriterionResult> {
    let (id, name, check) = *CRITERIA.iter().find(|c| c.0 == id)?;
    let t0 = Instant::now();
    let (passed, detail) = match check(seed) {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Some(CriterionResult {
        id,
        name,
        passed,
        detail,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

pub fn run_suite(seed: u64, mut on_result: impl FnMut(&CriterionResult)) -> Vec<CriterionResult> {
    CRITERIA
        .iter()
        .map(|c| {
            let r = run_criterion(c.0, seed).expect("known id");
            on_result(&r);
            r
        })
        .collect()
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn unit_ctx() -> Result<ContextFeatures> {
    let z = Array2::zeros((1, 1));
    ContextFeatures::from_parts(z.view(), z.view(), z.view())
}

/// Values on a 2^-16 grid so that Euler sums with step 1/K, K a power of two,
/// are exact.
fn dyadic(r: &mut rng::SplitMix64, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| f64::from(r.random_range(-(1 << 17)..=(1 << 17))) / 65536.0)
}

fn flow_exactness(seed: u64) -> Result<(bool, String)> {
    let t0 = Instant::now();
    let mut r = rng::stream_rng(seed, rng::stream::NOISE);
    let ctx = unit_ctx()?;
    let mut ok = true;
    for k in [1, 4, 8] {
        for _ in 0..20 {
            let a = dyadic(&mut r, 8, 48);
            let x0 = dyadic(&mut r, 8, 48);
            let out = euler_denoise(&ideal_field(&a, &x0), &x0, &ctx, &DenoiseOptions::with_steps(k), None)?;
            ok &= bits_equal(out.actions.as_slice().unwrap(), a.as_slice().unwrap());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok((ok && secs < 1.0, format!("bit-exact={ok} in {secs:.3}s")))
}

fn gradient_fidelity(seed: u64) -> Result<(bool, String)> {
    let t0 = Instant::now();
    let shape = FieldShape {
        chunk_len: 8,
        action_dim: 2,
        d_model: 4,
        num_embodiments: 2,
    };
    let field = MlpField::new(MlpArch::toy(shape), seed);
    let mut r = rng::stream_rng(seed, rng::stream::NOISE);
    let target = noise_chunk(&mut r, 8, 2);
    let x0 = noise_chunk(&mut r, 8, 2);
    let t: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 + 0.05).collect();
    let sample = LossSample {
        x_t: interpolate(&target, &x0, &t),
        t,
        v_target: &target - &x0,
        rows: (0..8).map(|i| i >= 2).collect(),
        pooled: Array1::from_vec(rng::normal_vec(&mut r, 4)),
        embodiment: Some(1),
    };
    let net = finite_diff_check(&field, &sample, 1e-5)?;

    let logits = Array2::from_shape_fn((6, 10), |_| rng::normal(&mut r));
    let targets: Vec<usize> = (0..6).map(|_| r.random_range(0..10)).collect();
    let omega = [0, 2, 3];
    let (_, grad) = masked_ce_loss(logits.view(), &targets, &omega)?;
    let eps = 1e-6;
    let mut ce: f64 = 0.0;
    for i in 0..6 {
        for j in 0..10 {
            let mut up = logits.clone();
            up[[i, j]] += eps;
            let mut down = logits.clone();
            down[[i, j]] -= eps;
            let num = (masked_ce_loss(up.view(), &targets, &omega)?.0 - masked_ce_loss(down.view(), &targets, &omega)?.0)
                / (2.0 * eps);
            let g = grad[[i, j]];
            ce = ce.max((g - num).abs() / g.abs().max(num.abs()).max(1e-6));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        net < FD_TOL && ce < FD_TOL && secs < 10.0,
        format!("velocity net {net:.2e}, masked ce {ce:.2e}, {secs:.2}s"),
    ))
}

fn swd_oracle(seed: u64) -> Result<(bool, String)> {
    let mut r = rng::stream_rng(seed, rng::stream::SLICES);
    let p = MpgParams::new(
        3,
        &MpgConfig {
            d_emb: 1,
            slices: 5,
            ..MpgConfig::default()
        },
        seed,
    )?;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = r.random_range(1..40);
        let h = Array2::from_shape_fn((n, 1), |_| rng::normal(&mut r));
        let z = Array2::from_shape_fn((n, 1), |_| 3.0 * rng::normal(&mut r) - 1.0);
        let mut a: Vec<f64> = h.iter().copied().collect();
        let mut b: Vec<f64> = z.iter().copied().collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let w2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        worst = worst.max((swd(h.view(), z.view(), &p)? - w2).abs() / w2.max(1.0));
    }
    let hand = swd_with_directions(array![[0.0], [2.0]].view(), array![[1.0], [3.0]].view(), array![[1.0]].view())?;
    Ok((worst <= SWD_TOL && hand == 2.0, format!("max rel err {worst:.2e}, hand case D={hand}")))
}

fn gate_law(seed: u64) -> Result<(bool, String)> {
    let mut ok = true;
    for tau in [1e-3, 0.5, 1.0, 7.0, 1e3] {
        ok &= gate(0.0, tau)? == 1.0;
        for d in [0.1, 1.0, 2.0, 10.0] {
            ok &= (gate(d, tau)? - (-d / tau).exp().max(mpg::GATE_FLOOR)).abs() <= GATE_TOL;
        }
    }
    let e = gate(2.0, 2.0)?;
    ok &= (e - (-1.0f64).exp()).abs() <= GATE_TOL;
    let mut r = rng::stream_rng(seed, rng::stream::NOISE);
    let mut mono = 0;
    for _ in 0..1000 {
        let tau = r.random_range(0.01..10.0);
        let (a, b): (f64, f64) = (r.random_range(0.0..20.0), r.random_range(0.0..20.0));
        let (lo, hi) = (a.min(b), a.max(b));
        if gate(lo, tau)? >= gate(hi, tau)? {
            mono += 1;
        }
    }
    Ok((ok && mono == 1000, format!("grid ok={ok}, g(2,2)={e:.15}, monotone {mono}/1000")))
}

fn random_params(d_model: usize, seed: u64) -> Result<MpgParams> {
    let mut p = MpgParams::new(d_model, &MpgConfig { d_emb: 4, ..MpgConfig::default() }, seed)?;
    let mut r = rng::stream_rng(seed, rng::stream::INIT ^ 0xff);
    p.w.mapv_inplace(|_| rng::normal(&mut r) * 0.5);
    p.b.mapv_inplace(|_| rng::normal(&mut r));
    Ok(p)
}

fn random_ctx(r: &mut rng::SplitMix64, d_model: usize, chunk: usize) -> Result<ContextFeatures> {
    let mut m = |n| Array2::from_shape_fn((n, d_model), |_| rng::normal(r));
    let (a, b, c) = (m(3), m(2), m(chunk));
    ContextFeatures::from_parts(a.view(), b.view(), c.view())
}

fn gating_identity(seed: u64) -> Result<(bool, String)> {
    let d_model = 6;
    let p = random_params(d_model, seed)?;
    let mut r = rng::stream_rng(seed, rng::stream::NOISE);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let c = random_ctx(&mut r, d_model, 4)?;
        let (g1, g2) = (r.random_range(1e-3..=1.0), r.random_range(1e-3..=1.0));
        let diff = enhance(&c, g1, &p)?.tokens() - enhance(&c, g2, &p)?.tokens();
        let proj = c.suffix_rows().dot(&p.e_obs.t()).dot(&p.w.t());
        let s = c.spans().suffix();
        for ((i, j), v) in diff.indexed_iter() {
            let expect = if s.contains(&i) {
                p.lambda * (g1 - g2) * proj[[i - s.start, j]]
            } else {
                0.0
            };
            worst = worst.max((v - expect).abs());
        }
    }

    // tau only enters through the stopped gate
    let shape = FieldShape {
        chunk_len: 4,
        action_dim: 2,
        d_model,
        num_embodiments: 0,
    };
    let field = MlpField::new(MlpArch::toy(shape), seed);
    let enc = ActionEncoder::random(2, d_model, &mut r);
    let batch: Vec<MpgSample> = (0..4)
        .map(|_| {
            let target = noise_chunk(&mut r, 4, 2);
            let x0 = noise_chunk(&mut r, 4, 2);
            let x_t = interpolate(&target, &x0, &[0.4; 4]);
            let ctx = random_ctx(&mut r, d_model, 4)?.with_action_tokens(enc.encode(x_t.view(), 0.6).view())?;
            Ok(MpgSample {
                ctx,
                anchor: mpg::action_anchor(enc.encode(target.view(), 0.0).view())?,
                x_t,
                t: vec![0.4; 4],
                v_target: &target - &x0,
                embodiment: None,
            })
        })
        .collect::<Result<_>>()?;
    let (loss, _, grad, gates) = mpg_batch_loss(&field, &p, &batch, None)?;
    let mut q = p.clone();
    q.tau = p.tau * 3.0 + 1.0;
    let (loss_q, _, _, _) = mpg_batch_loss(&field, &q, &batch, Some(&gates))?;
    let probe = (loss_q - loss) / (q.tau - p.tau);
    let ok = worst <= IDENTITY_TOL && grad.tau == 0.0 && probe == 0.0;
    Ok((ok, format!("identity max err {worst:.2e}, dL/dtau analytic {} probe {probe}", grad.tau)))
}

fn loss_locality(seed: u64) -> Result<(bool, String)> {
    let shape = FieldShape {
        chunk_len: 8,
        action_dim: 2,
        d_model: 3,
        num_embodiments: 1,
    };
    let field = MlpField::new(MlpArch::toy(shape), seed);
    let mut r = rng::stream_rng(seed, rng::stream::NOISE);
    let ctx = random_ctx(&mut r, 3, 8)?;
    let target = noise_chunk(&mut r, 8, 2);
    let x0 = noise_chunk(&mut r, 8, 2);
    let committed = noise_chunk(&mut r, 8, 2);
    let mut local = true;
    for d in 1..8 {
        let (l, g) = masked_fm_loss(&field, &target, &x0, &committed, d, 0.3, &ctx, Some(0))?;
        for row in 0..d {
            let mut t2 = target.clone();
            t2.row_mut(row).mapv_inplace(|v| v + 10.0 * rng::normal(&mut r));
            let (l2, g2) = masked_fm_loss(&field, &t2, &x0, &committed, d, 0.3, &ctx, Some(0))?;
            local &= l.to_bits() == l2.to_bits() && bits_equal(&g, &g2);
        }
    }
    let (lt, gt) = masked_fm_loss(&field, &target, &x0, &committed, 8, 0.3, &ctx, Some(0))?;
    let full = lt == 0.0 && gt.iter().all(|v| *v == 0.0);
    let (l0, g0) = masked_fm_loss(&field, &target, &x0, &committed, 0, 0.3, &ctx, Some(0))?;
    let (lf, gf) = fm_loss(&field, &target, &x0, 0.3, &ctx, Some(0))?;
    let plain = l0.to_bits() == lf.to_bits() && bits_equal(&g0, &gf);
    Ok((
        local && full && plain,
        format!("prefix-invariant={local}, d=T zero={full}, d=0 equals plain loss={plain}"),
    ))
}

fn figure_eight() -> Task {
    Task::FigureEight {
        period_steps: 160,
        amplitude: 0.8,
    }
}

fn protocol_continuity(seed: u64) -> Result<(bool, String)> {
    let t0 = Instant::now();
    let d_case = commit_delay(0.12, 0.05, 1)?;
    let layout = SlotLayout::default_layout();
    let mut ok = d_case == 4;
    let mut parts = vec![format!("d(120ms,50ms,1)={d_case}")];
    for m in default_fleet(&layout)? {
        let mut cfg = TrackingSession::new(
            figure_eight(),
            LatencyKind::UniformJitter {
                lo: 0.0,
                hi: m.spec.latency_budget_s,
            },
            10_000,
        );
        cfg.safety_steps = 1;
        let log = tracking_session(&cfg, &m, &layout, seed)?;
        let rep = verify_continuity(&log);
        ok &= rep.is_clean() && rep.boundaries_checked > 0 && log.steps.len() == 10_000;
        parts.push(format!(
            "{}: d={} underflows={} boundaries={} clean={}",
            m.spec.id,
            committed_delay(&m, 1)?,
            rep.underflows,
            rep.boundaries_checked,
            rep.is_clean()
        ));
    }
    let secs = t0.elapsed().as_secs_f64();
    parts.push(format!("{secs:.1}s"));
    Ok((ok && secs < 60.0, parts.join("; ")))
}

fn graceful_degradation(seed: u64) -> Result<(bool, String)> {
    let layout = SlotLayout::default_layout();
    let mut ok = true;
    let mut parts = Vec::new();
    for m in default_fleet(&layout)? {
        let d = committed_delay(&m, 1)?;
        let budget = d as f64 * m.spec.control_period_s;
        let cfg = TrackingSession::new(figure_eight(), LatencyKind::Constant { s: 2.0 * budget }, 2000);
        let log = tracking_session(&cfg, &m, &layout, seed)?;
        let gaps = log.steps.iter().enumerate().filter(|(i, s)| s.step != *i as u64).count();
        let held = log
            .steps
            .windows(2)
            .filter(|w| w[1].underflow)
            .all(|w| bits_equal(&w[0].action, &w[1].action));
        let under = log.underflows();
        ok &= under > 0 && held && gaps == 0 && log.steps.len() == 2000;
        parts.push(format!("{}: underflows={under} hold_last={held} gaps={gaps}", m.spec.id));
    }
    Ok((ok, parts.join("; ")))
}

fn toy_training(seed: u64) -> Result<(bool, String)> {
    let (_, rep) = bimodal_toy(&BimodalConfig::default(), &PolicyConfig::default(), seed)?;
    let ok = rep.within >= TOY_WITHIN
        && rep.freq.iter().all(|f| (f - 0.5).abs() <= TOY_FREQ_TOL)
        && rep.train_seconds <= 300.0;
    Ok((
        ok,
        format!(
            "within={:.3} freq=[{:.3}, {:.3}] train {:.1}s",
            rep.within, rep.freq[0], rep.freq[1], rep.train_seconds
        ),
    ))
}

fn ablation_trend(seed: u64) -> Result<(bool, String)> {
    let layout = SlotLayout::default_layout();
    let seeds: Vec<u64> = (0..50).map(|k| rng::derive_seed(seed, 1000 + k)).collect();
    let mut uac_ok = true;
    let mut parts = Vec::new();
    for m in default_fleet(&layout)? {
        let l = m.spec.latency_budget_s;
        let cfg = TrackingSession::new(figure_eight(), LatencyKind::UniformJitter { lo: 0.5 * l, hi: l }, 400);
        let pairs = ablate_uac(&cfg, &m, &layout, &seeds)?;
        let wins = pairs
            .iter()
            .filter(|p| p.with_uac.max_step_jump <= p.without_uac.max_step_jump)
            .count();
        uac_ok &= wins as f64 >= UAC_WIN * pairs.len() as f64;
        parts.push(format!("uac {}: {wins}/{}", m.spec.id, pairs.len()));
    }
    let rep = ablate_mpg(&MpgAblationConfig::default(), &PolicyConfig::default(), seed)?;
    let win = rep.win_rate();
    parts.push(format!(
        "mpg: {:.2} of {} (clean gate {:.3})",
        win,
        rep.trials.len(),
        rep.clean_gate
    ));
    Ok((uac_ok && win >= MPG_WIN, parts.join("; ")))
}

fn serialization(seed: u64) -> Result<(bool, String)> {
    let mut r = rng::stream_rng(seed, rng::stream::MASK);
    let mut leak: f64 = 0.0;
    let mut pe_ok = true;
    let mut part_ok = true;
    for k in 0..100 {
        let spans = GateSpans::new(r.random_range(1..8), r.random_range(1..8), r.random_range(0..8));
        let pos = assign_positions(spans);
        pe_ok &= pos[spans.query] == spans.query;
        if spans.mask > 0 {
            pe_ok &= pos[spans.query + spans.fm] == spans.query;
        }
        if k < 20 {
            let n = spans.total();
            let layer = AttentionLayer::random(4, seed + k);
            let x = Array2::from_shape_fn((n, 4), |_| rng::normal(&mut r));
            let w = layer.weights(x.view(), &gate_matrix(spans))?;
            let (q, f) = (0..spans.query, spans.query..spans.query + spans.fm);
            let m = spans.query + spans.fm..n;
            leak += crate::seqmodel::attention_mass(&w, f.clone(), m.clone())
                + crate::seqmodel::attention_mass(&w, m, f.clone())
                + crate::seqmodel::attention_mass(&w, q, f.start..n);
        }
        let mut segs = vec![Segment::new(Modality::Vision, r.random_range(1..4), Role::Query)];
        segs.push(Segment::new(Modality::Text, r.random_range(1..4), Role::Query));
        if r.random_bool(0.5) {
            segs.push(Segment::new(Modality::Text, r.random_range(1..4), Role::AnswerText));
        }
        segs.push(Segment::new(Modality::Action, r.random_range(1..6), Role::AnswerFm));
        if r.random_bool(0.5) {
            segs.push(Segment::new(Modality::Action, r.random_range(1..6), Role::AnswerMask));
        }
        let s = serialize_qa(&segs)?;
        let mut all: Vec<usize> = s.omega_text.iter().chain(&s.omega_fm).chain(&s.omega_mask).copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        let answers: BTreeSet<usize> = s
            .segments
            .iter()
            .filter(|p| p.segment.role != Role::Query)
            .flat_map(|p| p.content.clone())
            .collect();
        part_ok &= all.len() == n && all.iter().copied().collect::<BTreeSet<_>>() == answers;
    }
    Ok((
        leak == 0.0 && pe_ok && part_ok,
        format!("cross-segment mass {leak}, p0 alignment {pe_ok}, omega partition {part_ok}"),
    ))
}

fn isolation(seed: u64) -> Result<(bool, String)> {
    // mixture: routing from the embodiment one-hot only
    let shape = FieldShape {
        chunk_len: 2,
        action_dim: 2,
        d_model: 1,
        num_embodiments: 2,
    };
    let mut mof = MofField::new(shape, 16, 6, 2, seed)?;
    let mut r = rng::stream_rng(seed, rng::stream::NOISE);
    let before = mof.stack.clone();
    let mut touched = BTreeSet::new();
    for _ in 0..20 {
        let batch: Vec<_> = (0..4)
            .map(|_| {
                let x = noise_chunk(&mut r, 2, 2);
                let v = noise_chunk(&mut r, 2, 2);
                mof.sample(x.view(), &[0.5, 0.5], v.view(), Array1::zeros(1).view(), Some(0))
            })
            .collect::<Result<_>>()?;
        touched.extend(mof.stack.train_step(&batch, 0.05)?.updated);
    }
    let mut mof_ok = touched.len() == 2;
    for e in 0..6 {
        let same = mof.stack.specialists[e] == before.specialists[e];
        mof_ok &= same != touched.contains(&e);
    }

    // adapters: three width-1 groups, A = {0, 1}, B = {1, 2}
    let layout = SlotLayout::new(
        (0..3)
            .map(|i| SlotGroup::new(format!("g{i}"), 1, SlotKind::ArmJointRad))
            .collect(),
    )?;
    let mut bank = AdapterBank::for_layout(&layout, 3, seed);
    let burst = |bank: &mut AdapterBank, active: &BTreeSet<usize>, r: &mut rng::SplitMix64| -> Result<()> {
        for _ in 0..10 {
            let f: BTreeMap<usize, Array1<f64>> =
                active.iter().map(|&k| (k, Array1::from_vec(rng::normal_vec(r, 1)))).collect();
            let t: BTreeMap<usize, Array1<f64>> =
                active.iter().map(|&k| (k, Array1::from_vec(rng::normal_vec(r, 3)))).collect();
            esa_train_step(bank, active, &f, &t, 0.05)?;
        }
        Ok(())
    };
    let a = BTreeSet::from([0, 1]);
    let b = BTreeSet::from([1, 2]);
    let p0 = bank.clone();
    burst(&mut bank, &a, &mut r)?;
    let p1 = bank.clone();
    burst(&mut bank, &b, &mut r)?;
    let p2 = bank.clone();
    let esa_ok = p1.adapters[2] == p0.adapters[2]
        && p2.adapters[0] == p1.adapters[0]
        && p1.adapters[1] != p0.adapters[1]
        && p2.adapters[1] != p1.adapters[1];
    Ok((
        mof_ok && esa_ok,
        format!("routed experts {touched:?}, others bit-identical={mof_ok}; adapters isolated, shared slot updated by both={esa_ok}"),
    ))
}

fn buffer_sizing(_: u64) -> Result<(bool, String)> {
    let small = ExecutionBuffer::new(8, 15, vec![0.0; 4]).is_err();
    let min = ExecutionBuffer::new(8, 16, vec![0.0; 4]).is_ok();
    Ok((small && min, format!("capacity 15 rejected={small}, 16 accepted={min}")))
}
