//! Rectified-flow action chunks.
//!
//! A [`VelocityField`] maps a noisy chunk `x` (T x d), per-row flow times `t`
//! and context features to a velocity. Sampling integrates the field from
//! Gaussian noise with `K` explicit Euler steps; training regresses the field
//! onto the straight-line velocity `a - x0` of the linear probability path
//! `x_t = (1 - t) x0 + t a`.
//!
//! The trainable field is a small tanh MLP ([`MlpField`]) whose input is
//! `[flatten(x_t), t (one per row), mean-pooled context rows, embodiment
//! one-hot]`; its gradients are computed by hand and checked against central
//! finite differences.

use std::borrow::Cow;
use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::nn::Mlp;
use crate::rng::{self, stream};

/// Default number of Euler steps.
pub const DEFAULT_STEPS: usize = 8;

// ---------------------------------------------------------------------------
// Context

/// Row spans of a context matrix: `[prefix ; state ; action tokens]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSpans {
    pub prefix: Range<usize>,
    pub state: Range<usize>,
    pub action: Range<usize>,
}

impl ContextSpans {
    /// State and action rows: the part of the context that changes per step.
    pub fn suffix(&self) -> Range<usize> {
        self.state.start..self.action.end
    }
}

/// Token-level conditioning features `H` (n_tokens x d_model).
#[derive(Clone, Debug, PartialEq)]
pub struct ContextFeatures {
    tokens: Array2<f64>,
    spans: ContextSpans,
}

impl ContextFeatures {
    pub fn new(tokens: Array2<f64>, spans: ContextSpans) -> Result<Self> {
        let n = tokens.nrows();
        let ContextSpans {
            prefix,
            state,
            action,
        } = &spans;
        if prefix.start != 0 || prefix.end != state.start || state.end != action.start || action.end != n
        {
            return Err(Error::invalid(
                "context spans",
                format!("spans {spans:?} must tile rows 0..{n} in order"),
            ));
        }
        if action.is_empty() {
            return Err(Error::invalid("context spans", "no action-token rows"));
        }
        check_finite("context features", tokens.iter())?;
        Ok(Self { tokens, spans })
    }

    /// Stacks prefix, state and action-token rows.
    pub fn from_parts(
        prefix: ArrayView2<f64>,
        state: ArrayView2<f64>,
        action: ArrayView2<f64>,
    ) -> Result<Self> {
        let tokens = ndarray::concatenate(Axis(0), &[prefix, state, action])
            .map_err(|e| Error::invalid("context features", e.to_string()))?;
        let p = prefix.nrows();
        let st = p + state.nrows();
        let spans = ContextSpans {
            prefix: 0..p,
            state: p..st,
            action: st..tokens.nrows(),
        };
        Self::new(tokens, spans)
    }

    pub fn tokens(&self) -> &Array2<f64> {
        &self.tokens
    }

    pub fn spans(&self) -> &ContextSpans {
        &self.spans
    }

    pub fn d_model(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn chunk_len(&self) -> usize {
        self.spans.action.len()
    }

    pub fn suffix_rows(&self) -> ArrayView2<'_, f64> {
        self.tokens.slice(s![self.spans.suffix(), ..])
    }

    /// Mutable access to the raw token rows. Span layout is fixed.
    pub fn tokens_mut(&mut self) -> &mut Array2<f64> {
        &mut self.tokens
    }

    /// Column-wise mean over every row.
    pub fn pooled(&self) -> Array1<f64> {
        self.tokens.mean_axis(Axis(0)).expect("at least one row")
    }

    /// Copy with the action-token rows replaced.
    pub fn with_action_tokens(&self, rows: ArrayView2<f64>) -> Result<Self> {
        check_len("action-token rows", self.chunk_len(), rows.nrows())?;
        check_len("action-token width", self.d_model(), rows.ncols())?;
        let mut out = self.clone();
        out.tokens
            .slice_mut(s![self.spans.action.clone(), ..])
            .assign(&rows);
        Ok(out)
    }
}

/// Embeds action rows as context tokens: `Enc(a, sigma) = W a + sigma u`.
/// `sigma = 0` is the noise-free encoding used for action anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionEncoder {
    /// d_model x d
    pub w: Array2<f64>,
    /// noise-level direction, length d_model
    pub noise_dir: Array1<f64>,
}

impl ActionEncoder {
    pub fn random<R: Rng + ?Sized>(action_dim: usize, d_model: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (action_dim as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((d_model, action_dim), |_| rng::normal(rng) * scale),
            noise_dir: Array1::from_shape_fn(d_model, |_| rng::normal(rng) * 0.1),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w.nrows()
    }

    pub fn encode(&self, actions: ArrayView2<f64>, sigma: f64) -> Array2<f64> {
        let mut out = actions.dot(&self.w.t());
        if sigma != 0.0 {
            out += &(&self.noise_dir * sigma);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Chunks and fields

/// A T x d chunk in the unified space with per-row flow times.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub actions: Array2<f64>,
    pub timesteps: Vec<f64>,
    /// Rows `< committed_prefix` are locked.
    pub committed_prefix: usize,
}

impl ActionChunk {
    pub fn new(actions: Array2<f64>, timesteps: Vec<f64>, committed_prefix: usize) -> Result<Self> {
        if actions.nrows() == 0 {
            return Err(Error::invalid("action chunk", "T must be >= 1"));
        }
        check_len("chunk timesteps", actions.nrows(), timesteps.len())?;
        check_finite("action chunk", actions.iter())?;
        if timesteps.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid("action chunk", "timesteps outside [0, 1]"));
        }
        if committed_prefix > actions.nrows() {
            return Err(Error::invalid("action chunk", "committed prefix exceeds T"));
        }
        Ok(Self {
            actions,
            timesteps,
            committed_prefix,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.nrows() == 0
    }
}

/// `v(x, t | H, e)`.
pub trait VelocityField {
    fn chunk_len(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// `t` holds one flow time per chunk row.
    fn velocity(
        &self,
        x: ArrayView2<f64>,
        t: &[f64],
        ctx: &ContextFeatures,
        embodiment: Option<usize>,
    ) -> Array2<f64>;
}

/// The same velocity everywhere.
#[derive(Clone, Debug)]
pub struct ConstantField(pub Array2<f64>);

impl VelocityField for ConstantField {
    fn chunk_len(&self) -> usize {
        self.0.nrows()
    }
    fn action_dim(&self) -> usize {
        self.0.ncols()
    }
    fn velocity(&self, _: ArrayView2<f64>, _: &[f64], _: &ContextFeatures, _: Option<usize>) -> Array2<f64> {
        self.0.clone()
    }
}

/// The ideal rectified field for a known target and start: `a - x0`.
pub fn ideal_field(target: &Array2<f64>, x0: &Array2<f64>) -> ConstantField {
    ConstantField(target - x0)
}

/// Adapts a closure `(x, t) -> v` into a field that ignores the context.
pub struct FnField<F> {
    pub chunk_len: usize,
    pub action_dim: usize,
    pub f: F,
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(ArrayView2<f64>, &[f64]) -> Array2<f64>,
{
    fn chunk_len(&self) -> usize {
        self.chunk_len
    }
    fn action_dim(&self) -> usize {
        self.action_dim
    }
    fn velocity(&self, x: ArrayView2<f64>, t: &[f64], _: &ContextFeatures, _: Option<usize>) -> Array2<f64> {
        (self.f)(x, t)
    }
}

// ---------------------------------------------------------------------------
// Euler sampling

#[derive(Clone, Copy, Debug)]
pub struct DenoiseOptions<'a> {
    pub steps: usize,
    pub embodiment: Option<usize>,
    /// When set, the context's action-token rows are re-encoded from the
    /// current iterate (`sigma = 1 - t`) before every velocity evaluation.
    pub encoder: Option<&'a ActionEncoder>,
    /// Rows `< clean_prefix` are presented to the field at `t = 1`.
    pub clean_prefix: usize,
}

impl Default for DenoiseOptions<'_> {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            embodiment: None,
            encoder: None,
            clean_prefix: 0,
        }
    }
}

impl<'a> DenoiseOptions<'a> {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }
}

/// Projection applied to the initial state and after every Euler update.
pub type StepHook<'a> = &'a dyn Fn(&mut Array2<f64>) -> Result<()>;

/// Per-step context rewrite: `(context, iterate, step, t) -> context`.
pub(crate) type ContextMap<'a> =
    dyn FnMut(&ContextFeatures, ArrayView2<f64>, usize, f64) -> Result<ContextFeatures> + 'a;

/// Integrates `a(k+1) = a(k) + (1/K) v(a(k), k/K | ctx)` for `k = 0..K`.
pub fn euler_denoise(
    field: &dyn VelocityField,
    x0: &Array2<f64>,
    ctx: &ContextFeatures,
    opts: &DenoiseOptions<'_>,
    hook: Option<StepHook<'_>>,
) -> Result<ActionChunk> {
    euler_denoise_mapped(field, x0, ctx, opts, hook, None)
}

pub(crate) fn euler_denoise_mapped(
    field: &dyn VelocityField,
    x0: &Array2<f64>,
    ctx: &ContextFeatures,
    opts: &DenoiseOptions<'_>,
    hook: Option<StepHook<'_>>,
    mut map: Option<&mut ContextMap<'_>>,
) -> Result<ActionChunk> {
    if opts.steps == 0 {
        return Err(Error::invalid("denoise", "K must be >= 1"));
    }
    check_len("noise rows", field.chunk_len(), x0.nrows())?;
    check_len("noise columns", field.action_dim(), x0.ncols())?;
    check_finite("initial noise", x0.iter())?;
    let rows = x0.nrows();
    let clean = opts.clean_prefix.min(rows);
    let k_total = opts.steps;
    let dt = 1.0 / k_total as f64;

    let mut x = x0.clone();
    if let Some(h) = hook {
        h(&mut x)?;
    }
    let mut t_rows = vec![0.0; rows];
    for k in 0..k_total {
        let t = k as f64 / k_total as f64;
        for (i, tr) in t_rows.iter_mut().enumerate() {
            *tr = if i < clean { 1.0 } else { t };
        }
        let mut step_ctx = Cow::Borrowed(ctx);
        if let Some(enc) = opts.encoder {
            step_ctx = Cow::Owned(step_ctx.with_action_tokens(enc.encode(x.view(), 1.0 - t).view())?);
        }
        if let Some(m) = map.as_deref_mut() {
            step_ctx = Cow::Owned(m(&step_ctx, x.view(), k, t)?);
        }
        let v = field.velocity(x.view(), &t_rows, &step_ctx, opts.embodiment);
        x.scaled_add(dt, &v);
        if let Some(h) = hook {
            h(&mut x)?;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: k });
        }
    }
    ActionChunk::new(x, vec![1.0; rows], clean)
}

// ---------------------------------------------------------------------------
// Trainable MLP field

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldShape {
    pub chunk_len: usize,
    pub action_dim: usize,
    pub d_model: usize,
    pub num_embodiments: usize,
}

impl FieldShape {
    pub fn input_dim(&self) -> usize {
        self.chunk_len * self.action_dim + self.chunk_len + self.d_model + self.num_embodiments
    }

    pub fn output_dim(&self) -> usize {
        self.chunk_len * self.action_dim
    }

    /// Offset of the pooled-context block inside the input vector.
    pub fn pooled_offset(&self) -> usize {
        self.chunk_len * self.action_dim + self.chunk_len
    }

    /// Fills `[flatten(x), t, pooled, one-hot(embodiment)]`.
    pub fn write_input(
        &self,
        mut row: ndarray::ArrayViewMut1<f64>,
        x: ArrayView2<f64>,
        t: &[f64],
        pooled: ArrayView1<f64>,
        embodiment: Option<usize>,
    ) {
        let n_x = self.chunk_len * self.action_dim;
        for (dst, src) in row.iter_mut().zip(x.iter()) {
            *dst = *src;
        }
        for (i, tv) in t.iter().enumerate() {
            row[n_x + i] = *tv;
        }
        let off = self.pooled_offset();
        for (j, p) in pooled.iter().enumerate() {
            row[off + j] = *p;
        }
        let off = off + self.d_model;
        for j in 0..self.num_embodiments {
            row[off + j] = if embodiment == Some(j) { 1.0 } else { 0.0 };
        }
    }

    pub fn check_sample(&self, x: ArrayView2<f64>, t: &[f64], pooled_len: usize) -> Result<()> {
        check_len("chunk rows", self.chunk_len, x.nrows())?;
        check_len("chunk columns", self.action_dim, x.ncols())?;
        check_len("row timesteps", self.chunk_len, t.len())?;
        check_len("context width", self.d_model, pooled_len)
    }
}

/// Architecture descriptor; serialized in parameter-file headers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub shape: FieldShape,
    /// Hidden widths; empty means a linear field.
    pub hidden: Vec<usize>,
    pub activation: String,
}

impl MlpArch {
    /// Two tanh hidden layers of width 64.
    pub fn toy(shape: FieldShape) -> Self {
        Self {
            shape,
            hidden: vec![64, 64],
            activation: "tanh".into(),
        }
    }

    pub fn linear(shape: FieldShape) -> Self {
        Self {
            shape,
            hidden: vec![],
            activation: "tanh".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpField {
    arch: MlpArch,
    mlp: Mlp,
    seed: u64,
}

/// One regression row-set for [`MlpField::batch_loss`].
#[derive(Clone, Debug)]
pub struct LossSample {
    pub x_t: Array2<f64>,
    pub t: Vec<f64>,
    pub v_target: Array2<f64>,
    /// Rows that contribute to the loss (Omega).
    pub rows: Vec<bool>,
    pub pooled: Array1<f64>,
    pub embodiment: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct BatchLoss {
    /// Sum over samples of the per-sample row-summed squared error.
    pub loss: f64,
    /// Gradient of `loss` w.r.t. the flat parameters.
    pub grad: Vec<f64>,
    /// Gradient of `loss` w.r.t. each sample's pooled context.
    pub d_pooled: Vec<Array1<f64>>,
}

impl MlpField {
    pub fn new(arch: MlpArch, seed: u64) -> Self {
        let mut dims = vec![arch.shape.input_dim()];
        dims.extend(&arch.hidden);
        dims.push(arch.shape.output_dim());
        let mut r = rng::stream_rng(seed, stream::INIT);
        Self {
            mlp: Mlp::new(&dims, &mut r),
            arch,
            seed,
        }
    }

    pub fn from_params(arch: MlpArch, seed: u64, params: &[f64]) -> Result<Self> {
        let mut f = Self::new(arch, seed);
        f.mlp.set_params(params)?;
        Ok(f)
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn shape(&self) -> &FieldShape {
        &self.arch.shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_params(&self) -> usize {
        self.mlp.num_params()
    }

    pub fn params(&self) -> Vec<f64> {
        self.mlp.params()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        self.mlp.set_params(p)
    }

    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) {
        self.mlp.sgd_step(grad, lr)
    }

    fn check_sample(&self, x: ArrayView2<f64>, t: &[f64], pooled_len: usize) -> Result<()> {
        self.arch.shape.check_sample(x, t, pooled_len)
    }

    /// Velocity from an already pooled context vector.
    pub fn velocity_pooled(
        &self,
        x: ArrayView2<f64>,
        t: &[f64],
        pooled: ArrayView1<f64>,
        embodiment: Option<usize>,
    ) -> Result<Array2<f64>> {
        self.check_sample(x, t, pooled.len())?;
        let mut input = Array2::zeros((1, self.arch.shape.input_dim()));
        self.arch.shape.write_input(input.row_mut(0), x, t, pooled, embodiment);
        let out = self.mlp.forward(input.view());
        let sh = &self.arch.shape;
        Ok(out
            .output()
            .row(0)
            .to_owned()
            .into_shape_with_order((sh.chunk_len, sh.action_dim))
            .expect("output width is T*d"))
    }

    /// Summed squared velocity error over `rows` of every sample, with exact
    /// gradients.
    pub fn batch_loss(&self, samples: &[LossSample]) -> Result<BatchLoss> {
        let sh = &self.arch.shape;
        let b = samples.len();
        let mut input = Array2::zeros((b, sh.input_dim()));
        for (i, s) in samples.iter().enumerate() {
            self.check_sample(s.x_t.view(), &s.t, s.pooled.len())?;
            check_len("target rows", sh.chunk_len, s.v_target.nrows())?;
            check_len("loss row mask", sh.chunk_len, s.rows.len())?;
            sh.write_input(input.row_mut(i), s.x_t.view(), &s.t, s.pooled.view(), s.embodiment);
        }
        let cache = self.mlp.forward(input.view());
        let out = cache.output();
        let mut d_out = Array2::zeros(out.raw_dim());
        let mut loss = 0.0;
        for (i, s) in samples.iter().enumerate() {
            for r in 0..sh.chunk_len {
                if !s.rows[r] {
                    continue;
                }
                for c in 0..sh.action_dim {
                    let j = r * sh.action_dim + c;
                    let e = out[[i, j]] - s.v_target[[r, c]];
                    loss += e * e;
                    d_out[[i, j]] = 2.0 * e;
                }
            }
        }
        let (grad, d_in) = self.mlp.backward(&cache, d_out.view());
        let off = sh.pooled_offset();
        let d_pooled = (0..b)
            .map(|i| d_in.slice(s![i, off..off + sh.d_model]).to_owned())
            .collect();
        Ok(BatchLoss {
            loss,
            grad,
            d_pooled,
        })
    }
}

impl VelocityField for MlpField {
    fn chunk_len(&self) -> usize {
        self.arch.shape.chunk_len
    }
    fn action_dim(&self) -> usize {
        self.arch.shape.action_dim
    }
    fn velocity(
        &self,
        x: ArrayView2<f64>,
        t: &[f64],
        ctx: &ContextFeatures,
        embodiment: Option<usize>,
    ) -> Array2<f64> {
        self.velocity_pooled(x, t, ctx.pooled().view(), embodiment)
            .expect("velocity input matches the field's shape")
    }
}

// ---------------------------------------------------------------------------
// Flow-matching loss

/// `x_t = (1 - t) x0 + t a`, row-wise.
pub fn interpolate(a: &Array2<f64>, x0: &Array2<f64>, t: &[f64]) -> Array2<f64> {
    let mut out = x0.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let ti = t[i];
        for (o, &ai) in row.iter_mut().zip(a.row(i)) {
            *o = (1.0 - ti) * *o + ti * ai;
        }
    }
    out
}

/// Flow-matching loss over the rows flagged in `rows` (Omega_FM):
/// `sum_i ||v(x_t, t, ctx) - (a_i - x0_i)||^2`, plus its parameter gradient.
pub fn fm_loss_rows(
    field: &MlpField,
    target: &Array2<f64>,
    x0: &Array2<f64>,
    t: f64,
    ctx: &ContextFeatures,
    embodiment: Option<usize>,
    rows: &[bool],
) -> Result<(f64, Vec<f64>)> {
    check_len("x0 rows", target.nrows(), x0.nrows())?;
    check_len("x0 columns", target.ncols(), x0.ncols())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid("flow time", format!("{t} outside [0, 1]")));
    }
    let t_rows = vec![t; target.nrows()];
    let sample = LossSample {
        x_t: interpolate(target, x0, &t_rows),
        t: t_rows,
        v_target: target - x0,
        rows: rows.to_vec(),
        pooled: ctx.pooled(),
        embodiment,
    };
    let out = field.batch_loss(std::slice::from_ref(&sample))?;
    Ok((out.loss, out.grad))
}

/// [`fm_loss_rows`] over every row.
pub fn fm_loss(
    field: &MlpField,
    target: &Array2<f64>,
    x0: &Array2<f64>,
    t: f64,
    ctx: &ContextFeatures,
    embodiment: Option<usize>,
) -> Result<(f64, Vec<f64>)> {
    fm_loss_rows(field, target, x0, t, ctx, embodiment, &vec![true; target.nrows()])
}

/// Worst relative error between the analytic gradient of a sample's loss and
/// central differences over every parameter. Relative error is
/// `|g - g_fd| / max(|g|, |g_fd|, 1e-6)`.
pub fn finite_diff_check(field: &MlpField, sample: &LossSample, eps: f64) -> Result<f64> {
    let analytic = field.batch_loss(std::slice::from_ref(sample))?.grad;
    finite_diff_against(field, sample, eps, &analytic)
}

/// [`finite_diff_check`] against a caller-supplied gradient.
pub fn finite_diff_against(
    field: &MlpField,
    sample: &LossSample,
    eps: f64,
    analytic: &[f64],
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid("finite-difference step", format!("{eps} outside [1e-7, 1e-3]")));
    }
    check_len("analytic gradient", field.num_params(), analytic.len())?;
    let base = field.params();
    let mut probe = field.clone();
    let mut params = base.clone();
    let mut worst: f64 = 0.0;
    let one = std::slice::from_ref(sample);
    for i in 0..base.len() {
        params[i] = base[i] + eps;
        probe.set_params(&params)?;
        let up = probe.batch_loss(one)?.loss;
        params[i] = base[i] - eps;
        probe.set_params(&params)?;
        let down = probe.batch_loss(one)?.loss;
        params[i] = base[i];
        let numeric = (up - down) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Training

/// One supervised example: context and clean target chunk.
#[derive(Clone, Debug)]
pub struct ToySample {
    pub ctx: ContextFeatures,
    pub target: Array2<f64>,
    pub embodiment: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            steps: 2000,
            batch: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Mean per-sample loss at every step.
    pub loss_curve: Vec<f64>,
}

impl TrainReport {
    /// `step,loss` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.loss_curve.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    }
}

/// Loss above which training aborts.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Epoch-shuffled minibatch sampler over a dataset.
pub(crate) struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: rng::SplitMix64,
}

impl Batcher {
    pub(crate) fn new(len: usize, seed: u64) -> Self {
        let mut b = Self {
            order: (0..len).collect(),
            pos: 0,
            rng: rng::stream_rng(seed, stream::SHUFFLE),
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    pub(crate) fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Draws `(x0, t, x_t, ctx_t)` for one training example. `x0 ~ N(0, I)` per
/// row, `t ~ U[0, 1]`; action-token rows are re-encoded from `x_t` when an
/// encoder is given.
pub(crate) fn draw_noised(
    sample: &ToySample,
    encoder: Option<&ActionEncoder>,
    noise: &mut rng::SplitMix64,
    times: &mut rng::SplitMix64,
) -> Result<(Array2<f64>, f64, Array2<f64>, ContextFeatures)> {
    let (rows, cols) = sample.target.dim();
    let x0 = Array2::from_shape_fn((rows, cols), |_| rng::normal(noise));
    let t: f64 = times.random::<f64>();
    let x_t = interpolate(&sample.target, &x0, &vec![t; rows]);
    let ctx = match encoder {
        Some(enc) => sample.ctx.with_action_tokens(enc.encode(x_t.view(), 1.0 - t).view())?,
        None => sample.ctx.clone(),
    };
    Ok((x0, t, x_t, ctx))
}

/// Plain minibatch SGD on the flow-matching loss.
pub fn train_toy_field(
    mut field: MlpField,
    data: &[ToySample],
    cfg: &TrainConfig,
    encoder: Option<&ActionEncoder>,
) -> Result<(MlpField, TrainReport)> {
    if data.is_empty() {
        return Err(Error::invalid("training set", "empty"));
    }
    if cfg.batch == 0 {
        return Err(Error::invalid("training config", "batch must be >= 1"));
    }
    let mut batcher = Batcher::new(data.len(), cfg.seed);
    let mut noise = rng::stream_rng(cfg.seed, stream::NOISE);
    let mut times = rng::stream_rng(cfg.seed, stream::TIMESTEP);
    let mut report = TrainReport::default();
    let mut batch = Vec::with_capacity(cfg.batch);
    for step in 0..cfg.steps {
        batch.clear();
        for _ in 0..cfg.batch {
            let sample = &data[batcher.next()];
            let (x0, t, x_t, ctx) = draw_noised(sample, encoder, &mut noise, &mut times)?;
            let rows = sample.target.nrows();
            batch.push(LossSample {
                x_t,
                t: vec![t; rows],
                v_target: &sample.target - &x0,
                rows: vec![true; rows],
                pooled: ctx.pooled(),
                embodiment: sample.embodiment,
            });
        }
        let out = field.batch_loss(&batch)?;
        let scale = 1.0 / cfg.batch as f64;
        let mean_loss = out.loss * scale;
        if !mean_loss.is_finite() || mean_loss > DIVERGENCE_LOSS {
            log::error!("training diverged at step {step}: loss {mean_loss:e}");
            return Err(Error::TrainingDiverged {
                step,
                loss: mean_loss,
            });
        }
        report.loss_curve.push(mean_loss);
        field.sgd_step(&out.grad, cfg.lr * scale);
        if step % 500 == 0 {
            log::debug!("step {step}: loss {mean_loss:.5}");
        }
    }
    Ok((field, report))
}

/// `n` independent standard-normal chunks.
pub fn noise_chunk(rng: &mut rng::SplitMix64, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng::normal(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn trivial_ctx(d_model: usize, chunk_len: usize) -> ContextFeatures {
        ContextFeatures::from_parts(
            Array2::zeros((1, d_model)).view(),
            Array2::zeros((1, d_model)).view(),
            Array2::zeros((chunk_len, d_model)).view(),
        )
        .unwrap()
    }

    #[test]
    fn context_spans_validated() {
        let tokens = Array2::zeros((4, 2));
        assert!(ContextFeatures::new(
            tokens.clone(),
            ContextSpans {
                prefix: 0..1,
                state: 1..2,
                action: 2..4
            }
        )
        .is_ok());
        assert!(ContextFeatures::new(
            tokens.clone(),
            ContextSpans {
                prefix: 0..1,
                state: 2..3,
                action: 3..4
            }
        )
        .is_err());
        assert!(ContextFeatures::new(
            tokens,
            ContextSpans {
                prefix: 0..2,
                state: 2..4,
                action: 4..4
            }
        )
        .is_err());
    }

    #[test]
    fn constant_field_telescopes() {
        let ctx = trivial_ctx(1, 1);
        let field = ConstantField(array![[1.0]]);
        let out = euler_denoise(&field, &array![[0.0]], &ctx, &DenoiseOptions::with_steps(4), None).unwrap();
        assert_eq!(out.actions[[0, 0]], 1.0);
        assert_eq!(out.timesteps, vec![1.0]);
    }

    #[test]
    fn ideal_field_reaches_target_for_any_k() {
        let ctx = trivial_ctx(1, 2);
        let a = array![[0.5, -1.25], [2.0, 0.75]];
        let x0 = array![[1.5, 0.25], [-0.5, 1.0]];
        for k in [1, 2, 3, 4, 8, 16] {
            let out = euler_denoise(&ideal_field(&a, &x0), &x0, &ctx, &DenoiseOptions::with_steps(k), None)
                .unwrap();
            assert!(out.actions.iter().zip(a.iter()).all(|(p, q)| (p - q).abs() < 1e-14), "K={k}");
        }
    }

    #[test]
    fn nonlinear_field_matches_fine_reference() {
        let ctx = trivial_ctx(1, 1);
        let field = FnField {
            chunk_len: 1,
            action_dim: 1,
            f: |x: ArrayView2<f64>, _: &[f64]| x.mapv(|v| -v),
        };
        let coarse = euler_denoise(&field, &array![[1.0]], &ctx, &DenoiseOptions::with_steps(8), None).unwrap();
        let fine = euler_denoise(&field, &array![[1.0]], &ctx, &DenoiseOptions::with_steps(10_000), None)
            .unwrap();
        assert!((coarse.actions[[0, 0]] - fine.actions[[0, 0]]).abs() < 0.05);
    }

    #[test]
    fn divergence_names_the_step() {
        let ctx = trivial_ctx(1, 1);
        let field = FnField {
            chunk_len: 1,
            action_dim: 1,
            f: |x: ArrayView2<f64>, _: &[f64]| x.mapv(|v| v * 1e300),
        };
        let err = euler_denoise(&field, &array![[1.0]], &ctx, &DenoiseOptions::with_steps(4), None).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 1 }), "{err:?}");
        assert!(euler_denoise(&field, &array![[1.0]], &ctx, &DenoiseOptions::with_steps(0), None).is_err());
    }

    #[test]
    fn hook_runs_before_and_after_each_step() {
        let ctx = trivial_ctx(1, 2);
        let calls = std::cell::Cell::new(0);
        let hook = |x: &mut Array2<f64>| {
            calls.set(calls.get() + 1);
            x[[0, 0]] = 7.0;
            Ok(())
        };
        let field = ConstantField(array![[1.0], [1.0]]);
        let out = euler_denoise(&field, &array![[0.0], [0.0]], &ctx, &DenoiseOptions::with_steps(5), Some(&hook))
            .unwrap();
        assert_eq!(calls.get(), 6);
        assert_eq!(out.actions[[0, 0]], 7.0);
        assert_eq!(out.actions[[1, 0]], 1.0);
    }

    fn shape(t: usize, d: usize) -> FieldShape {
        FieldShape {
            chunk_len: t,
            action_dim: d,
            d_model: 3,
            num_embodiments: 2,
        }
    }

    #[test]
    fn zero_output_field_loss() {
        let mut f = MlpField::new(MlpArch::linear(shape(1, 2)), 0);
        f.set_params(&vec![0.0; f.num_params()]).unwrap();
        let ctx = trivial_ctx(3, 1);
        for t in [0.0, 0.3, 1.0] {
            let (l, _) = fm_loss(&f, &array![[1.0, 0.0]], &array![[0.0, 0.0]], t, &ctx, None).unwrap();
            assert_eq!(l, 1.0);
        }
    }

    #[test]
    fn perfect_field_has_zero_loss() {
        // linear field whose bias alone outputs a - x0 (all weights zero)
        let mut f = MlpField::new(MlpArch::linear(shape(1, 2)), 0);
        let mut p = vec![0.0; f.num_params()];
        let n = p.len();
        p[n - 2] = 1.0;
        p[n - 1] = -0.5;
        f.set_params(&p).unwrap();
        let ctx = trivial_ctx(3, 1);
        let (l, g) = fm_loss(&f, &array![[1.0, 0.5]], &array![[0.0, 1.0]], 0.4, &ctx, Some(1)).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    fn random_sample(f: &MlpField, seed: u64) -> LossSample {
        let sh = f.shape().clone();
        let mut r = rng::rng_from_seed(seed);
        let x_t = noise_chunk(&mut r, sh.chunk_len, sh.action_dim);
        LossSample {
            t: (0..sh.chunk_len).map(|_| r.random::<f64>()).collect(),
            v_target: noise_chunk(&mut r, sh.chunk_len, sh.action_dim),
            rows: (0..sh.chunk_len).map(|i| i != 1).collect(),
            pooled: Array1::from(rng::normal_vec(&mut r, sh.d_model)),
            embodiment: Some(1),
            x_t,
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let lin = MlpField::new(MlpArch::linear(shape(3, 2)), 4);
        let s = random_sample(&lin, 1);
        assert!(finite_diff_check(&lin, &s, 1e-5).unwrap() < 1e-8);

        let deep = MlpField::new(MlpArch::toy(shape(3, 2)), 5);
        let s = random_sample(&deep, 2);
        assert!(finite_diff_check(&deep, &s, 1e-5).unwrap() < 1e-4);

        let mut bad = deep.batch_loss(std::slice::from_ref(&s)).unwrap().grad;
        bad[17] += 0.1;
        assert!(finite_diff_against(&deep, &s, 1e-5, &bad).unwrap() > 1e-2);
        assert!(finite_diff_check(&deep, &s, 1e-2).is_err());
    }

    #[test]
    fn pooled_gradient_matches_finite_differences() {
        let f = MlpField::new(MlpArch::toy(shape(2, 2)), 8);
        let s = random_sample(&f, 3);
        let out = f.batch_loss(std::slice::from_ref(&s)).unwrap();
        let eps = 1e-6;
        for j in 0..s.pooled.len() {
            let mut up = s.clone();
            up.pooled[j] += eps;
            let mut dn = s.clone();
            dn.pooled[j] -= eps;
            let num = (f.batch_loss(&[up]).unwrap().loss - f.batch_loss(&[dn]).unwrap().loss) / (2.0 * eps);
            assert!((num - out.d_pooled[0][j]).abs() < 1e-6 * (1.0 + num.abs()));
        }
    }

    #[test]
    fn zero_steps_leaves_parameters_untouched() {
        let f = MlpField::new(MlpArch::toy(shape(1, 2)), 3);
        let data = vec![ToySample {
            ctx: trivial_ctx(3, 1),
            target: array![[1.0, 1.0]],
            embodiment: None,
        }];
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let (trained, report) = train_toy_field(f.clone(), &data, &cfg, None).unwrap();
        assert!(trained.params().iter().zip(f.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(report.loss_curve.is_empty());
        assert!(train_toy_field(f, &[], &cfg, None).is_err());
    }

    #[test]
    fn diverging_training_aborts() {
        let f = MlpField::new(MlpArch::linear(shape(1, 2)), 3);
        let data = vec![ToySample {
            ctx: trivial_ctx(3, 1),
            target: array![[1.0, 1.0]],
            embodiment: None,
        }];
        let cfg = TrainConfig {
            lr: 50.0,
            steps: 200,
            batch: 4,
            seed: 1,
        };
        assert!(matches!(
            train_toy_field(f, &data, &cfg, None),
            Err(Error::TrainingDiverged { .. })
        ));
    }

    #[test]
    fn fixed_target_converges() {
        let f = MlpField::new(MlpArch::toy(shape(1, 2)), 3);
        let target = array![[0.7, -0.4]];
        let data = vec![ToySample {
            ctx: trivial_ctx(3, 1),
            target: target.clone(),
            embodiment: None,
        }];
        let cfg = TrainConfig {
            lr: 1e-1,
            steps: 2000,
            batch: 256,
            seed: 2,
        };
        let (f, report) = train_toy_field(f, &data, &cfg, None).unwrap();
        assert!(report.loss_curve.last().unwrap() < &report.loss_curve[0]);
        let mut r = rng::rng_from_seed(99);
        for _ in 0..20 {
            let x0 = noise_chunk(&mut r, 1, 2);
            let out = euler_denoise(&f, &x0, &data[0].ctx, &DenoiseOptions::default(), None).unwrap();
            let err = (&out.actions - &target).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
            assert!(err < 0.05, "L_inf error {err}");
        }
    }

    #[test]
    fn denoise_is_deterministic() {
        let f = MlpField::new(MlpArch::toy(shape(2, 2)), 3);
        let ctx = trivial_ctx(3, 2);
        let x0 = noise_chunk(&mut rng::rng_from_seed(1), 2, 2);
        let a = euler_denoise(&f, &x0, &ctx, &DenoiseOptions::default(), None).unwrap();
        let b = euler_denoise(&f, &x0, &ctx, &DenoiseOptions::default(), None).unwrap();
        assert!(a.actions.iter().zip(b.actions.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
