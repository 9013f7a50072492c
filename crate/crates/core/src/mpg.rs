//! Manifold-preserving gating.
//!
//! The suffix context rows `H` and a noise-free action anchor `Z` are both
//! projected into a small embedding space and layer-normalised; their sliced
//! Wasserstein distance `D` gives a reliability gate `g = exp(-D / tau)`. The
//! enhancement
//!
//! ```text
//! H~ = H + lambda * g * W E_obs(H) + lambda * b
//! ```
//!
//! scales only the feature-conditioned residual; the bias is applied whatever
//! the gate. The gate is a constant for differentiation, so `tau` and `E_act`
//! receive no training gradient.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::flow_policy::{
    self, euler_denoise, euler_denoise_mapped, ActionChunk, ActionEncoder, ContextFeatures,
    DenoiseOptions, LossSample, MlpField, StepHook, ToySample, TrainConfig, TrainReport,
    VelocityField,
};
use crate::rng::{self, stream};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Smallest gate value; `exp(-D / tau)` below this is clamped up.
pub const GATE_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpgConfig {
    pub lambda: f64,
    pub tau: f64,
    pub slices: usize,
    pub d_emb: usize,
    pub slice_seed: u64,
}

impl Default for MpgConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            tau: 1.0,
            slices: 32,
            d_emb: 32,
            slice_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpgParams {
    /// d_emb x d_model
    pub e_obs: Array2<f64>,
    /// d_emb x d_model; reads noise-free action embeddings.
    pub e_act: Array2<f64>,
    /// d_model x d_emb
    pub w: Array2<f64>,
    /// d_model
    pub b: Array1<f64>,
    pub lambda: f64,
    pub tau: f64,
    pub slices: usize,
    pub slice_seed: u64,
}

/// Per-round gate summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDiagnostics {
    /// Mean discrepancy over the round's Euler steps.
    #[serde(rename = "D")]
    pub d: f64,
    /// Mean gate over the round's Euler steps.
    pub g: f64,
    pub anchor: Vec<f64>,
}

impl MpgParams {
    /// Random projections (N(0, 1/fan_in)), zero residual weights and bias.
    /// `E_act` starts equal to `E_obs` so both views share one embedding.
    pub fn new(d_model: usize, cfg: &MpgConfig, seed: u64) -> Result<Self> {
        if !(cfg.tau > 0.0) || !cfg.tau.is_finite() {
            return Err(Error::invalid("tau", format!("{} must be > 0", cfg.tau)));
        }
        if !(cfg.lambda >= 0.0) || !cfg.lambda.is_finite() {
            return Err(Error::invalid("lambda", format!("{} must be >= 0", cfg.lambda)));
        }
        if cfg.slices == 0 || cfg.d_emb == 0 {
            return Err(Error::invalid("mpg config", "slices and d_emb must be >= 1"));
        }
        let mut r = rng::stream_rng(seed, stream::INIT);
        let scale = 1.0 / (d_model as f64).sqrt();
        let e_obs = Array2::from_shape_fn((cfg.d_emb, d_model), |_| rng::normal(&mut r) * scale);
        Ok(Self {
            e_act: e_obs.clone(),
            e_obs,
            w: Array2::zeros((d_model, cfg.d_emb)),
            b: Array1::zeros(d_model),
            lambda: cfg.lambda,
            tau: cfg.tau,
            slices: cfg.slices,
            slice_seed: cfg.slice_seed,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w.nrows()
    }

    pub fn d_emb(&self) -> usize {
        self.e_obs.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.e_obs.len() + self.e_act.len() + self.w.len() + self.b.len()
    }

    /// Flat order: `E_obs, E_act, W, b`, row-major.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        p.extend(self.e_obs.iter());
        p.extend(self.e_act.iter());
        p.extend(self.w.iter());
        p.extend(self.b.iter());
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_len("mpg parameters", self.num_params(), p.len())?;
        let mut it = p.iter();
        for v in self
            .e_obs
            .iter_mut()
            .chain(self.e_act.iter_mut())
            .chain(self.w.iter_mut())
            .chain(self.b.iter_mut())
        {
            *v = *it.next().unwrap();
        }
        Ok(())
    }

    /// Slice directions for this parameter set.
    pub fn directions(&self) -> Array2<f64> {
        slice_directions(self.d_emb(), self.slices, self.slice_seed)
    }
}

/// Per-row zero mean, unit variance (population), no affine.
pub fn layer_norm(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

/// Column mean of noise-free action embeddings.
pub fn action_anchor(embeds: ArrayView2<f64>) -> Result<Array1<f64>> {
    if embeds.nrows() == 0 {
        return Err(Error::invalid("action anchor", "no rows"));
    }
    check_finite("action embeddings", embeds.iter())?;
    Ok(embeds.mean_axis(Axis(0)).expect("non-empty"))
}

/// `M` Gaussian directions in `R^dim`, each normalised. Replayable from `seed`.
pub fn slice_directions(dim: usize, m: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::stream_rng(seed, stream::SLICES);
    let mut out = Array2::zeros((m, dim));
    for mut row in out.axis_iter_mut(Axis(0)) {
        loop {
            for v in row.iter_mut() {
                *v = rng::normal(&mut r);
            }
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row.mapv_inplace(|v| v / norm);
                break;
            }
        }
    }
    out
}

/// `(1/M) sum_m ||sort(H theta_m) - sort(Z theta_m)||^2`.
pub fn swd_with_directions(h: ArrayView2<f64>, z: ArrayView2<f64>, dirs: ArrayView2<f64>) -> Result<f64> {
    check_len("discrepancy rows", h.nrows(), z.nrows())?;
    check_len("discrepancy width", h.ncols(), z.ncols())?;
    check_len("slice width", h.ncols(), dirs.ncols())?;
    if dirs.nrows() == 0 {
        return Err(Error::invalid("slices", "M must be >= 1"));
    }
    check_finite("observation embedding", h.iter())?;
    check_finite("anchor embedding", z.iter())?;
    let mut total = 0.0;
    for theta in dirs.axis_iter(Axis(0)) {
        let mut ph = h.dot(&theta).to_vec();
        let mut pz = z.dot(&theta).to_vec();
        ph.sort_by(f64::total_cmp);
        pz.sort_by(f64::total_cmp);
        total += ph.iter().zip(&pz).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / dirs.nrows() as f64)
}

/// [`swd_with_directions`] with the parameters' seeded slices.
pub fn swd(h: ArrayView2<f64>, z: ArrayView2<f64>, params: &MpgParams) -> Result<f64> {
    check_len("discrepancy width", params.d_emb(), h.ncols())?;
    swd_with_directions(h, z, params.directions().view())
}

/// `g = exp(-D / tau)`, clamped below at [`GATE_FLOOR`].
pub fn gate(d: f64, tau: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::invalid("discrepancy", format!("{d} must be >= 0")));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("tau", format!("{tau} must be > 0")));
    }
    Ok((-d / tau).exp().max(GATE_FLOOR))
}

/// `LN(E_obs h)` for every suffix row.
pub fn observation_embedding(ctx: &ContextFeatures, params: &MpgParams) -> Result<Array2<f64>> {
    check_len("context width", params.d_model(), ctx.d_model())?;
    Ok(layer_norm(ctx.suffix_rows().dot(&params.e_obs.t()).view()))
}

/// `LN(E_act z)` repeated over `n` rows.
pub fn anchor_embedding(anchor: ArrayView1<f64>, n: usize, params: &MpgParams) -> Result<Array2<f64>> {
    check_len("anchor width", params.e_act.ncols(), anchor.len())?;
    let z = params.e_act.dot(&anchor).insert_axis(Axis(0));
    let z = layer_norm(z.view());
    Ok(z.broadcast((n, params.d_emb())).expect("one row broadcasts").to_owned())
}

/// `D` between the context's suffix rows and the anchor.
pub fn discrepancy(ctx: &ContextFeatures, anchor: ArrayView1<f64>, params: &MpgParams) -> Result<f64> {
    let h = observation_embedding(ctx, params)?;
    let z = anchor_embedding(anchor, h.nrows(), params)?;
    swd(h.view(), z.view(), params)
}

/// Applies the gated residual and the ungated bias to the suffix rows.
pub fn enhance(ctx: &ContextFeatures, g: f64, params: &MpgParams) -> Result<ContextFeatures> {
    if !(g > 0.0 && g <= 1.0) {
        return Err(Error::invalid("gate", format!("{g} outside (0, 1]")));
    }
    check_len("context width", params.d_model(), ctx.d_model())?;
    let mut out = ctx.clone();
    let suffix = ctx.spans().suffix();
    let proj = ctx.suffix_rows().dot(&params.e_obs.t()).dot(&params.w.t());
    let scale = params.lambda * g;
    let mut rows = out.tokens_mut().slice_mut(s![suffix, ..]);
    rows.scaled_add(scale, &proj);
    rows += &(&params.b * params.lambda);
    Ok(out)
}

/// Temperature that maps the mean clean discrepancy to gate `g_target`.
pub fn calibrate_temperature(clean_d: &[f64], g_target: f64) -> Result<f64> {
    if clean_d.is_empty() {
        return Err(Error::invalid("calibration set", "empty"));
    }
    if !(g_target > 0.0 && g_target < 1.0) {
        return Err(Error::invalid("target gate", format!("{g_target} outside (0, 1)")));
    }
    let mean = clean_d.iter().sum::<f64>() / clean_d.len() as f64;
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::invalid("calibration set", "mean discrepancy must be positive"));
    }
    Ok(mean / -g_target.ln())
}

#[derive(Clone, Copy, Debug)]
pub struct RefineOptions {
    pub rounds: usize,
    /// Replaces the computed gate in every step (diagnostics still report
    /// the computed `D`).
    pub force_gate: Option<f64>,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            rounds: 2,
            force_gate: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RefineOutput {
    pub chunk: ActionChunk,
    /// Chunk of every stage; `stages[0]` is the unenhanced baseline.
    pub stages: Vec<ActionChunk>,
    pub rounds: Vec<GateDiagnostics>,
    /// A round diverged; `chunk` is the last finite stage.
    pub diverged: bool,
}

/// Baseline denoising pass followed by `rounds` gated passes, each anchored on
/// the previous stage's noise-free action embedding. Every pass starts from
/// the same `x0`.
pub fn refine(
    field: &dyn VelocityField,
    x0: &Array2<f64>,
    ctx: &ContextFeatures,
    params: &MpgParams,
    encoder: &ActionEncoder,
    opts: &DenoiseOptions<'_>,
    hook: Option<StepHook<'_>>,
    ropts: &RefineOptions,
) -> Result<RefineOutput> {
    check_len("encoder width", params.d_model(), encoder.d_model())?;
    let base = euler_denoise(field, x0, ctx, opts, hook)?;
    let mut stages = vec![base];
    let mut rounds = Vec::with_capacity(ropts.rounds);
    let mut diverged = false;
    for n in 0..ropts.rounds {
        let prev = stages.last().unwrap();
        let anchor = action_anchor(encoder.encode(prev.actions.view(), 0.0).view())?;
        let mut d_sum = 0.0;
        let mut g_sum = 0.0;
        let mut map = |c: &ContextFeatures, _x: ArrayView2<f64>, _k: usize, _t: f64| -> Result<ContextFeatures> {
            let d = discrepancy(c, anchor.view(), params)?;
            let g = match ropts.force_gate {
                Some(g) => g,
                None => gate(d, params.tau)?,
            };
            d_sum += d;
            g_sum += g;
            enhance(c, g, params)
        };
        match euler_denoise_mapped(field, x0, ctx, opts, hook, Some(&mut map)) {
            Ok(chunk) => {
                let k = opts.steps as f64;
                rounds.push(GateDiagnostics {
                    d: d_sum / k,
                    g: g_sum / k,
                    anchor: anchor.to_vec(),
                });
                stages.push(chunk);
            }
            Err(Error::Divergence { step }) => {
                log::warn!("refinement round {} diverged at Euler step {step}", n + 1);
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(RefineOutput {
        chunk: stages.last().unwrap().clone(),
        stages,
        rounds,
        diverged,
    })
}

// ---------------------------------------------------------------------------
// Joint training

/// Gradients of the flow-matching loss w.r.t. the gating parameters. `e_act`
/// and `tau` only reach the loss through the gate and so are always zero.
#[derive(Clone, Debug)]
pub struct MpgGrad {
    pub e_obs: Array2<f64>,
    pub e_act: Array2<f64>,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub tau: f64,
}

impl MpgGrad {
    fn zeros(p: &MpgParams) -> Self {
        Self {
            e_obs: Array2::zeros(p.e_obs.raw_dim()),
            e_act: Array2::zeros(p.e_act.raw_dim()),
            w: Array2::zeros(p.w.raw_dim()),
            b: Array1::zeros(p.b.len()),
            tau: 0.0,
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend(self.e_obs.iter());
        v.extend(self.e_act.iter());
        v.extend(self.w.iter());
        v.extend(self.b.iter());
        v
    }
}

/// A noised training example with its enhanced context already computed.
#[derive(Clone, Debug)]
pub struct MpgSample {
    pub ctx: ContextFeatures,
    pub anchor: Array1<f64>,
    pub x_t: Array2<f64>,
    pub t: Vec<f64>,
    pub v_target: Array2<f64>,
    pub embodiment: Option<usize>,
}

/// Loss, field gradient and gating gradient over a batch. `gates` holds the
/// (stopped) gate per sample; `None` recomputes it from `params`.
pub fn mpg_batch_loss(
    field: &MlpField,
    params: &MpgParams,
    batch: &[MpgSample],
    gates: Option<&[f64]>,
) -> Result<(f64, Vec<f64>, MpgGrad, Vec<f64>)> {
    let mut used = Vec::with_capacity(batch.len());
    let mut samples = Vec::with_capacity(batch.len());
    for (i, s) in batch.iter().enumerate() {
        let g = match gates {
            Some(gs) => gs[i],
            None => gate(discrepancy(&s.ctx, s.anchor.view(), params)?, params.tau)?,
        };
        used.push(g);
        let enhanced = enhance(&s.ctx, g, params)?;
        samples.push(LossSample {
            x_t: s.x_t.clone(),
            t: s.t.clone(),
            v_target: s.v_target.clone(),
            rows: vec![true; s.x_t.nrows()],
            pooled: enhanced.pooled(),
            embodiment: s.embodiment,
        });
    }
    let out = field.batch_loss(&samples)?;
    let mut grad = MpgGrad::zeros(params);
    for (i, s) in batch.iter().enumerate() {
        // pooled(H~) = pooled(H) + c * lambda * (g W E_obs m + b), with m the
        // suffix mean and c the suffix share of the rows
        let n = s.ctx.num_tokens() as f64;
        let suffix = s.ctx.suffix_rows();
        let c = suffix.nrows() as f64 / n;
        let m = suffix.mean_axis(Axis(0)).expect("suffix has rows");
        let e = params.e_obs.dot(&m);
        let dp = &out.d_pooled[i];
        let k = c * params.lambda;
        grad.b.scaled_add(k, dp);
        grad.w.scaled_add(k * used[i], &outer(dp.view(), e.view()));
        let back = params.w.t().dot(dp);
        grad.e_obs.scaled_add(k * used[i], &outer(back.view(), m.view()));
    }
    Ok((out.loss, out.grad, grad, used))
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    a.insert_axis(Axis(1)).dot(&b.insert_axis(Axis(0)))
}

/// Minibatch SGD of the field and the gating parameters on enhanced
/// contexts. The anchor of every example is its clean target encoded at
/// `sigma = 0`; action-token rows follow the noised iterate.
pub fn train_with_mpg(
    mut field: MlpField,
    mut params: MpgParams,
    data: &[ToySample],
    cfg: &TrainConfig,
    encoder: &ActionEncoder,
) -> Result<(MlpField, MpgParams, TrainReport)> {
    if data.is_empty() {
        return Err(Error::invalid("training set", "empty"));
    }
    if cfg.batch == 0 {
        return Err(Error::invalid("training config", "batch must be >= 1"));
    }
    let anchors: Vec<Array1<f64>> = data
        .iter()
        .map(|s| action_anchor(encoder.encode(s.target.view(), 0.0).view()))
        .collect::<Result<_>>()?;
    let mut batcher = flow_policy::Batcher::new(data.len(), cfg.seed);
    let mut noise = rng::stream_rng(cfg.seed, stream::NOISE);
    let mut times = rng::stream_rng(cfg.seed, stream::TIMESTEP);
    let mut report = TrainReport::default();
    let mut batch = Vec::with_capacity(cfg.batch);
    for step in 0..cfg.steps {
        batch.clear();
        for _ in 0..cfg.batch {
            let i = batcher.next();
            let sample = &data[i];
            let (x0, t, x_t, ctx) = flow_policy::draw_noised(sample, Some(encoder), &mut noise, &mut times)?;
            let rows = sample.target.nrows();
            batch.push(MpgSample {
                ctx,
                anchor: anchors[i].clone(),
                x_t,
                t: vec![t; rows],
                v_target: &sample.target - &x0,
                embodiment: sample.embodiment,
            });
        }
        let (loss, fgrad, mgrad, _) = mpg_batch_loss(&field, &params, &batch, None)?;
        let scale = 1.0 / cfg.batch as f64;
        let mean_loss = loss * scale;
        if !mean_loss.is_finite() || mean_loss > flow_policy::DIVERGENCE_LOSS {
            return Err(Error::TrainingDiverged {
                step,
                loss: mean_loss,
            });
        }
        report.loss_curve.push(mean_loss);
        let lr = cfg.lr * scale;
        field.sgd_step(&fgrad, lr);
        params.e_obs.scaled_add(-lr, &mgrad.e_obs);
        params.w.scaled_add(-lr, &mgrad.w);
        params.b.scaled_add(-lr, &mgrad.b);
    }
    Ok((field, params, report))
}
