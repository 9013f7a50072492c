//! Asynchronous chunking: delay-aware training and the commit / lock / stitch
//! deployment protocol.
//!
//! While a new chunk is being computed the robot keeps executing the previous
//! one. Training simulates this by presenting the first `d` rows of a chunk
//! clean (`t = 1`) and computing the loss only on the remaining rows.
//! Deployment commits `d >= ceil(latency / period) + margin` rows up front,
//! pins them to the already-committed actions at every Euler step and splices
//! only the freshly generated rows into execution.

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::flow_policy::{interpolate, ContextFeatures, LossSample, MlpField};

/// Distribution over training delays `{0, ..., d_max - 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct DelayModel {
    pmf: Vec<f64>,
    cdf: Vec<f64>,
}

impl DelayModel {
    pub fn from_pmf(pmf: Vec<f64>) -> Result<Self> {
        if pmf.is_empty() {
            return Err(Error::invalid("delay model", "empty support"));
        }
        check_finite("delay pmf", &pmf)?;
        if pmf.iter().any(|p| *p < 0.0) {
            return Err(Error::invalid("delay model", "negative probability"));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(
                "delay model",
                format!("probabilities sum to {total}, not 1"),
            ));
        }
        let mut acc = 0.0;
        let cdf = pmf
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self { pmf, cdf })
    }

    pub fn uniform(d_max: usize) -> Result<Self> {
        if d_max == 0 {
            return Err(Error::invalid("delay model", "d_max must be >= 1"));
        }
        Self::from_pmf(vec![1.0 / d_max as f64; d_max])
    }

    pub fn point_mass(d: usize) -> Self {
        let mut pmf = vec![0.0; d + 1];
        pmf[d] = 1.0;
        Self::from_pmf(pmf).expect("point mass is a valid pmf")
    }

    pub fn d_max(&self) -> usize {
        self.pmf.len()
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    /// Inverse-CDF draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        // first index whose cumulative mass exceeds u, skipping zero-mass bins
        for (d, (&c, &p)) in self.cdf.iter().zip(&self.pmf).enumerate() {
            if p > 0.0 && u < c {
                return d;
            }
        }
        self.pmf.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }
}

/// Delay model as declared in the embodiment config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum DelayModelConfig {
    Uniform { d_max: usize },
    Pmf { p: Vec<f64> },
}

impl DelayModelConfig {
    pub fn build(&self) -> Result<DelayModel> {
        match self {
            DelayModelConfig::Uniform { d_max } => DelayModel::uniform(*d_max),
            DelayModelConfig::Pmf { p } => DelayModel::from_pmf(p.clone()),
        }
    }
}

pub fn sample_delay<R: Rng + ?Sized>(model: &DelayModel, rng: &mut R) -> usize {
    model.sample(rng)
}

/// `t_i = 1` for `i < d`, `t_base` otherwise.
pub fn assign_timesteps(chunk_len: usize, delay: usize, t_base: f64) -> Result<Vec<f64>> {
    if delay > chunk_len {
        return Err(Error::invalid(
            "delay",
            format!("{delay} exceeds chunk length {chunk_len}"),
        ));
    }
    if !(0.0..1.0).contains(&t_base) {
        return Err(Error::invalid("base flow time", format!("{t_base} outside [0, 1)")));
    }
    Ok((0..chunk_len)
        .map(|i| if i < delay { 1.0 } else { t_base })
        .collect())
}

/// Builds the regression sample for a delayed chunk.
///
/// Rows `< d` of the network input are the committed actions (clean, `t = 1`);
/// rows `>= d` are noised targets at `t_base`. Only rows `>= d` enter the loss,
/// so prefix rows of `target` are never read.
pub fn delayed_sample(
    target: &Array2<f64>,
    x0: &Array2<f64>,
    committed: &Array2<f64>,
    delay: usize,
    t_base: f64,
    ctx: &ContextFeatures,
    embodiment: Option<usize>,
) -> Result<LossSample> {
    let rows = target.nrows();
    check_len("x0 rows", rows, x0.nrows())?;
    check_len("x0 columns", target.ncols(), x0.ncols())?;
    if committed.nrows() < delay {
        return Err(Error::Protocol(format!(
            "{} committed rows for delay {delay}",
            committed.nrows()
        )));
    }
    check_len("committed columns", target.ncols(), committed.ncols())?;
    let t = if delay == rows {
        vec![1.0; rows]
    } else {
        assign_timesteps(rows, delay, t_base)?
    };
    let mut x_t = interpolate(target, x0, &t);
    let mut v_target = target - x0;
    if delay > 0 {
        x_t.slice_mut(s![..delay, ..])
            .assign(&committed.slice(s![..delay, ..]));
        // excluded from the loss; keep them free of prefix targets
        v_target.slice_mut(s![..delay, ..]).fill(0.0);
    }
    Ok(LossSample {
        x_t,
        t,
        v_target,
        rows: (0..rows).map(|i| i >= delay).collect(),
        pooled: ctx.pooled(),
        embodiment,
    })
}

/// Postfix-only flow-matching loss `sum_{i >= d} ||v_i - (a_i - x0_i)||^2`
/// and its parameter gradient. `committed` supplies the clean prefix the
/// field conditions on.
#[allow(clippy::too_many_arguments)]
pub fn masked_fm_loss(
    field: &MlpField,
    target: &Array2<f64>,
    x0: &Array2<f64>,
    committed: &Array2<f64>,
    delay: usize,
    t_base: f64,
    ctx: &ContextFeatures,
    embodiment: Option<usize>,
) -> Result<(f64, Vec<f64>)> {
    let sample = delayed_sample(target, x0, committed, delay, t_base, ctx, embodiment)?;
    let out = field.batch_loss(std::slice::from_ref(&sample))?;
    Ok((out.loss, out.grad))
}

/// Number of control steps to commit: `ceil(t_inference / t_control) + margin`.
pub fn commit_delay(t_inference_s: f64, t_control_s: f64, safety_steps: usize) -> Result<usize> {
    if !(t_control_s.is_finite() && t_control_s > 0.0) {
        return Err(Error::invalid(
            "control period",
            format!("{t_control_s} must be > 0"),
        ));
    }
    if !(t_inference_s.is_finite() && t_inference_s >= 0.0) {
        return Err(Error::invalid(
            "inference time",
            format!("{t_inference_s} must be >= 0"),
        ));
    }
    Ok(latency_steps(t_inference_s, t_control_s) + safety_steps)
}

/// Control ticks that elapse during `latency_s`: `ceil(latency / period)`.
pub fn latency_steps(latency_s: f64, period_s: f64) -> usize {
    (latency_s / period_s).ceil() as usize
}

/// Overwrites rows `< d` of the iterate with the committed buffer rows.
pub fn lock_prefix(iterate: &mut Array2<f64>, committed: &Array2<f64>, delay: usize) -> Result<()> {
    if delay > iterate.nrows() {
        return Err(Error::invalid(
            "delay",
            format!("{delay} exceeds chunk length {}", iterate.nrows()),
        ));
    }
    if committed.nrows() < delay {
        return Err(Error::Protocol(format!(
            "only {} committed rows buffered for a locked prefix of {delay}",
            committed.nrows()
        )));
    }
    check_len("committed columns", iterate.ncols(), committed.ncols())?;
    iterate
        .slice_mut(s![..delay, ..])
        .assign(&committed.slice(s![..delay, ..]));
    Ok(())
}

/// `prev[..d] ++ new[d..]`.
pub fn stitch(prev_exec: &Array2<f64>, new_chunk: &Array2<f64>, delay: usize) -> Result<Array2<f64>> {
    check_len("chunk rows", prev_exec.nrows(), new_chunk.nrows())?;
    check_len("chunk columns", prev_exec.ncols(), new_chunk.ncols())?;
    if delay > new_chunk.nrows() {
        return Err(Error::invalid(
            "delay",
            format!("{delay} exceeds chunk length {}", new_chunk.nrows()),
        ));
    }
    let mut out = new_chunk.clone();
    out.slice_mut(s![..delay, ..])
        .assign(&prev_exec.slice(s![..delay, ..]));
    Ok(out)
}
