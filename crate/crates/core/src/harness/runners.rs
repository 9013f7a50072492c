//! Subcommand bodies. Every artifact carries the config hash and seed:
//! JSONL files open with a `{"header": ...}` line, CSV files with a
//! `# config_hash=..., seed=...` comment.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::harness::acceptance::{self, CriterionResult};
use crate::harness::experiments::{ablate_mpg, ablate_uac, bimodal_toy, committed_delay, tracking_session, FieldArch};
use crate::harness::ExperimentConfig;
use crate::params::{save_params, ParamHeader};
use crate::rng;
use crate::runtime::SessionLog;
use crate::sim::continuity_metrics;

pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub out: PathBuf,
}

impl RunContext {
    pub fn new(cfg: ExperimentConfig) -> Self {
        let hash = cfg.hash();
        let out = cfg.output.dir.clone();
        Self { cfg, hash, out }
    }

    fn path(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        Ok(self.out.join(name))
    }

    fn header(&self, extra: Value) -> Value {
        let mut h = json!({ "config_hash": self.hash, "seed": self.cfg.seed });
        if let (Some(h), Value::Object(e)) = (h.as_object_mut(), extra) {
            h.extend(e);
        }
        h
    }

    fn create(&self, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
        let path = self.path(name)?;
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok((path, BufWriter::new(f)))
    }

    /// Writes `rows` under a provenance comment line.
    fn write_csv<R: Serialize>(&self, name: &str, rows: &[R]) -> Result<PathBuf> {
        let (path, mut w) = self.create(name)?;
        writeln!(w, "# config_hash={}, seed={}", self.hash, self.cfg.seed).map_err(|e| Error::io(&path, e))?;
        let mut csv = csv::Writer::from_writer(w);
        for r in rows {
            csv.serialize(r).map_err(|e| Error::invalid("csv row", e.to_string()))?;
        }
        csv.flush().map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn write_report(&self, name: &str, command: &str, body: Value) -> Result<PathBuf> {
        let (path, mut w) = self.create(name)?;
        let mut report = json!({ "command": command, "config_hash": self.hash, "seed": self.cfg.seed });
        if let (Some(r), Value::Object(b)) = (report.as_object_mut(), body) {
            r.extend(b);
        }
        serde_json::to_writer_pretty(&mut w, &report)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Step log and cycle log of one session, each behind a header line.
    pub fn write_session(&self, log: &SessionLog) -> Result<(PathBuf, PathBuf)> {
        let header = json!({ "header": self.header(json!({ "embodiment": log.embodiment })) });
        let write = |name: String, body: &dyn Fn(&mut BufWriter<File>) -> Result<()>| -> Result<PathBuf> {
            let (path, mut w) = self.create(&name)?;
            serde_json::to_writer(&mut w, &header)?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
            body(&mut w)?;
            w.flush().map_err(|e| Error::io(&path, e))?;
            Ok(path)
        };
        let steps = write(format!("session_{}.jsonl", log.embodiment), &|w| log.write_steps_jsonl(w))?;
        let cycles = write(format!("cycles_{}.jsonl", log.embodiment), &|w| log.write_cycles_jsonl(w))?;
        Ok((steps, cycles))
    }
}

#[derive(Serialize)]
struct SessionRow {
    embodiment: String,
    uac: bool,
    delay: usize,
    steps: usize,
    cycles: usize,
    underflows: usize,
    underflow_rate: f64,
    max_step_jump: f64,
    mean_jerk: f64,
    latency_p50_s: f64,
    latency_p95_s: f64,
    latency_p99_s: f64,
}

fn session_row(ctx: &RunContext, log: &SessionLog, delay: usize) -> Result<SessionRow> {
    let m = continuity_metrics(log)?;
    let (p50, p95, p99) = log.latency_percentiles();
    Ok(SessionRow {
        embodiment: log.embodiment.clone(),
        uac: ctx.cfg.uac.enabled,
        delay,
        steps: log.steps.len(),
        cycles: log.cycles.len(),
        underflows: log.underflows(),
        underflow_rate: m.underflow_rate,
        max_step_jump: m.max_step_jump,
        mean_jerk: m.mean_jerk,
        latency_p50_s: p50,
        latency_p95_s: p95,
        latency_p99_s: p99,
    })
}

/// `session`: one closed-loop run per selected embodiment.
pub fn session(ctx: &RunContext) -> Result<Value> {
    let (layout, fleet) = ctx.cfg.fleet()?;
    let mut rows = Vec::new();
    let mut files = Vec::new();
    for m in &fleet {
        let t = ctx.cfg.tracking(m);
        let log = tracking_session(&t, m, &layout, ctx.cfg.seed)?;
        let (a, b) = ctx.write_session(&log)?;
        files.extend([a, b]);
        rows.push(session_row(ctx, &log, committed_delay(m, t.safety_steps)?)?);
    }
    files.push(ctx.write_csv("session_metrics.csv", &rows)?);
    let report = json!({ "sessions": rows, "artifacts": files });
    ctx.write_report("session_report.json", "session", report.clone())?;
    Ok(report)
}

#[derive(Serialize)]
struct BenchRow {
    embodiment: String,
    latency_scale: f64,
    control_period_s: f64,
    latency_budget_s: f64,
    delay: usize,
    cycles: usize,
    latency_p50_s: f64,
    latency_p95_s: f64,
    latency_p99_s: f64,
    underflows: usize,
    underflow_rate: f64,
}

/// `bench`: latency percentiles and underflow rates for every selected
/// embodiment, at the configured latency and at twice it.
pub fn bench(ctx: &RunContext) -> Result<Value> {
    let (layout, fleet) = ctx.cfg.fleet()?;
    let mut rows = Vec::new();
    for m in &fleet {
        for scale in [1.0, 2.0] {
            let mut t = ctx.cfg.tracking(m);
            t.latency = t.latency.scaled(scale);
            let log = tracking_session(&t, m, &layout, ctx.cfg.seed)?;
            let (p50, p95, p99) = log.latency_percentiles();
            let under = log.underflows();
            rows.push(BenchRow {
                embodiment: m.spec.id.clone(),
                latency_scale: scale,
                control_period_s: m.spec.control_period_s,
                latency_budget_s: m.spec.latency_budget_s,
                delay: committed_delay(m, t.safety_steps)?,
                cycles: log.cycles.len(),
                latency_p50_s: p50,
                latency_p95_s: p95,
                latency_p99_s: p99,
                underflows: under,
                underflow_rate: under as f64 / log.steps.len().max(1) as f64,
            });
        }
    }
    let csv = ctx.write_csv("bench.csv", &rows)?;
    let report = json!({ "bench": rows, "artifacts": [csv] });
    ctx.write_report("bench_report.json", "bench", report.clone())?;
    Ok(report)
}

/// `train-toy`: fits the velocity field on the two-mode target.
pub fn train_toy(ctx: &RunContext) -> Result<Value> {
    let cfg = &ctx.cfg;
    let (field, rep) = bimodal_toy(&cfg.toy, &cfg.policy, cfg.seed)?;
    let params = field.params();
    let arch = match cfg.policy.arch {
        FieldArch::Mlp => "mlp",
        FieldArch::Mof => "mof",
    };
    let header = ParamHeader {
        arch: arch.into(),
        d_model: 1,
        chunk_len: 1,
        d: 2,
        seed: cfg.seed,
        n_params: params.len(),
        config_hash: Some(ctx.hash.clone()),
        extra: serde_json::to_value(&cfg.policy)?,
    };
    let pfile = ctx.path("toy_field.params")?;
    save_params(&pfile, &header, &params)?;
    #[derive(Serialize)]
    struct LossRow {
        step: usize,
        loss: f64,
    }
    let rows: Vec<LossRow> = rep
        .training
        .loss_curve
        .iter()
        .enumerate()
        .map(|(step, &loss)| LossRow { step, loss })
        .collect();
    let csv = ctx.write_csv("toy_loss.csv", &rows)?;
    let report = json!({ "toy": rep, "artifacts": [pfile, csv] });
    ctx.write_report("toy_report.json", "train-toy", report.clone())?;
    Ok(report)
}

#[derive(Serialize)]
struct UacRow {
    embodiment: String,
    seed: u64,
    max_step_jump_uac: f64,
    max_step_jump_no_uac: f64,
    mean_jerk_uac: f64,
    mean_jerk_no_uac: f64,
    underflow_rate_uac: f64,
    underflow_rate_no_uac: f64,
}

/// `ablate-uac`: paired sessions with and without async chunking.
pub fn ablate_uac_cmd(ctx: &RunContext) -> Result<Value> {
    let cfg = &ctx.cfg;
    let (layout, fleet) = cfg.fleet()?;
    let members: Vec<_> = match &cfg.ablation.embodiment {
        Some(id) => fleet.iter().filter(|m| &m.spec.id == id).collect(),
        None => fleet.iter().collect(),
    };
    let seeds: Vec<u64> = (0..cfg.ablation.seeds as u64)
        .map(|k| rng::derive_seed(cfg.seed, 1000 + k))
        .collect();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for m in members {
        let pairs = ablate_uac(&cfg.tracking(m), m, &layout, &seeds)?;
        let wins = pairs
            .iter()
            .filter(|p| p.with_uac.max_step_jump <= p.without_uac.max_step_jump)
            .count();
        summary.push(json!({
            "embodiment": m.spec.id,
            "pairs": pairs.len(),
            "uac_not_worse": wins,
            "fraction": wins as f64 / pairs.len().max(1) as f64,
        }));
        rows.extend(pairs.into_iter().map(|p| UacRow {
            embodiment: m.spec.id.clone(),
            seed: p.seed,
            max_step_jump_uac: p.with_uac.max_step_jump,
            max_step_jump_no_uac: p.without_uac.max_step_jump,
            mean_jerk_uac: p.with_uac.mean_jerk,
            mean_jerk_no_uac: p.without_uac.mean_jerk,
            underflow_rate_uac: p.with_uac.underflow_rate,
            underflow_rate_no_uac: p.without_uac.underflow_rate,
        }));
    }
    let csv = ctx.write_csv("ablate_uac.csv", &rows)?;
    let report = json!({ "summary": summary, "artifacts": [csv] });
    ctx.write_report("ablate_uac_report.json", "ablate-uac", report.clone())?;
    Ok(report)
}

#[derive(Serialize)]
struct MpgRow {
    seed: u64,
    err_mpg: f64,
    err_no_mpg: f64,
    gate: f64,
    discrepancy: f64,
}

/// `ablate-mpg`: gated refinement against the plain sampler on corrupted
/// state tokens.
pub fn ablate_mpg_cmd(ctx: &RunContext) -> Result<Value> {
    let cfg = &ctx.cfg;
    let rep = ablate_mpg(&cfg.ablation.mpg, &cfg.policy, cfg.seed)?;
    let rows: Vec<MpgRow> = rep
        .trials
        .iter()
        .map(|t| MpgRow {
            seed: t.seed,
            err_mpg: t.err_refined,
            err_no_mpg: t.err_baseline,
            gate: t.gate,
            discrepancy: t.discrepancy,
        })
        .collect();
    let csv = ctx.write_csv("ablate_mpg.csv", &rows)?;
    let report = json!({
        "tau": rep.tau,
        "clean_gate": rep.clean_gate,
        "clean_err_mpg": rep.clean_err_refined,
        "clean_err_no_mpg": rep.clean_err_baseline,
        "win_rate": rep.win_rate(),
        "refine_rounds": cfg.policy.refine_rounds,
        "train_seconds": rep.train_seconds,
        "artifacts": [csv],
    });
    ctx.write_report("ablate_mpg_report.json", "ablate-mpg", report.clone())?;
    Ok(report)
}

/// `verify`: the acceptance suite, optionally restricted to some criteria.
pub fn verify(ctx: &RunContext, only: &[u8], mut on_result: impl FnMut(&CriterionResult)) -> Result<Vec<CriterionResult>> {
    let results: Vec<CriterionResult> = if only.is_empty() {
        acceptance::run_suite(ctx.cfg.seed, &mut on_result)
    } else {
        only.iter()
            .map(|&id| {
                let r = acceptance::run_criterion(id, ctx.cfg.seed)
                    .ok_or_else(|| Error::Config {
                        pointer: String::new(),
                        reason: format!("no criterion {id}"),
                    })?;
                on_result(&r);
                Ok(r)
            })
            .collect::<Result<_>>()?
    };
    let passed = results.iter().all(|r| r.passed);
    ctx.write_report(
        "verify_report.json",
        "verify",
        json!({ "passed": passed, "criteria": results }),
    )?;
    Ok(results)
}

/// Reads a JSONL artifact back, skipping the header line.
pub fn read_jsonl_body(path: &Path) -> Result<Vec<Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
