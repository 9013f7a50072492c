//! Mixture of flow: shared foundation layers, top-K routed specialists, and
//! slot-wise adapter banks.
//!
//! The foundation is a stack of tanh dense layers shared by every input. Each
//! specialist is a single linear layer on the foundation output. A linear
//! router scores the specialists from a context summary (pooled context rows
//! concatenated with the embodiment one-hot); only the `top_k` best scores get
//! nonzero weight, renormalised with a softmax over that subset.
//!
//! Training touches a specialist (and its router row) only when it was routed
//! to, so experts never selected keep their exact bit patterns.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::flow_policy::{ContextFeatures, FieldShape, VelocityField};
use crate::nn::Dense;
use crate::rng::{self, stream};

/// Sparse routing decision.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    /// One weight per expert; zero outside `active`.
    pub weights: Vec<f64>,
    pub active: BTreeSet<usize>,
}

/// Softmax over the `top_k` largest logits. Ties go to the lower index.
pub fn route_topk(logits: &[f64], top_k: usize) -> Result<Routing> {
    if top_k == 0 || top_k > logits.len() {
        return Err(Error::invalid(
            "top_k",
            format!("{top_k} not in 1..={}", logits.len()),
        ));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("router logits"));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // stable sort keeps lower indices first among equal logits
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    let chosen = &order[..top_k];
    let max = logits[chosen[0]];
    let mut weights = vec![0.0; logits.len()];
    let mut z = 0.0;
    for &e in chosen {
        let w = (logits[e] - max).exp();
        weights[e] = w;
        z += w;
    }
    for &e in chosen {
        weights[e] /= z;
    }
    Ok(Routing {
        weights,
        active: chosen.iter().copied().collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MofShape {
    pub input_dim: usize,
    /// Widths of the foundation layers; every one is followed by tanh.
    pub foundation: Vec<usize>,
    pub output_dim: usize,
    pub experts: usize,
    pub top_k: usize,
    pub router_dim: usize,
}

impl MofShape {
    /// Two foundation layers of `hidden`, four experts, top-2.
    pub fn with_defaults(input_dim: usize, hidden: usize, output_dim: usize, router_dim: usize) -> Self {
        Self {
            input_dim,
            foundation: vec![hidden, hidden],
            output_dim,
            experts: 4,
            top_k: 2,
            router_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MofStack {
    shape: MofShape,
    pub foundation: Vec<Dense>,
    pub specialists: Vec<Dense>,
    pub router: Dense,
}

struct MofCache {
    /// `acts[0]` is the input, `acts[i + 1]` the output of foundation layer `i`.
    acts: Vec<Array1<f64>>,
    spec_out: Vec<Option<Array1<f64>>>,
    routing: Routing,
    output: Array1<f64>,
}

/// One regression pair for [`MofStack::train_step`].
#[derive(Clone, Debug)]
pub struct MofSample {
    pub input: Array1<f64>,
    pub summary: Array1<f64>,
    pub target: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct MofStepReport {
    /// Summed squared error over the batch.
    pub loss: f64,
    /// Experts that received an update.
    pub updated: BTreeSet<usize>,
}

impl MofStack {
    pub fn new(shape: MofShape, seed: u64) -> Result<Self> {
        if shape.experts == 0 || shape.top_k == 0 || shape.top_k > shape.experts {
            return Err(Error::invalid(
                "mixture shape",
                format!("need 1 <= top_k ({}) <= experts ({})", shape.top_k, shape.experts),
            ));
        }
        let mut r = rng::stream_rng(seed, stream::INIT);
        let mut foundation = Vec::with_capacity(shape.foundation.len());
        let mut prev = shape.input_dim;
        for &w in &shape.foundation {
            foundation.push(Dense::random(prev, w, &mut r));
            prev = w;
        }
        let specialists = (0..shape.experts)
            .map(|_| Dense::random(prev, shape.output_dim, &mut r))
            .collect();
        let router = Dense::random(shape.router_dim, shape.experts, &mut r);
        Ok(Self {
            shape,
            foundation,
            specialists,
            router,
        })
    }

    pub fn shape(&self) -> &MofShape {
        &self.shape
    }

    pub fn top_k(&self) -> usize {
        self.shape.top_k
    }

    pub fn route(&self, summary: ArrayView1<f64>) -> Result<Routing> {
        check_len("router input", self.shape.router_dim, summary.len())?;
        if summary.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("router input"));
        }
        let logits = self.router.w.dot(&summary) + &self.router.b;
        route_topk(logits.as_slice().unwrap(), self.shape.top_k)
    }

    /// Foundation output for one input vector.
    pub fn foundation_forward(&self, input: ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(self.foundation_acts(input)?.pop().unwrap())
    }

    fn foundation_acts(&self, input: ArrayView1<f64>) -> Result<Vec<Array1<f64>>> {
        check_len("mixture input", self.shape.input_dim, input.len())?;
        let mut acts = vec![input.to_owned()];
        for l in &self.foundation {
            let z = l.w.dot(acts.last().unwrap()) + &l.b;
            acts.push(z.mapv(f64::tanh));
        }
        if acts.iter().any(|a| a.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("foundation activations"));
        }
        Ok(acts)
    }

    fn forward_cached(&self, input: ArrayView1<f64>, summary: ArrayView1<f64>) -> Result<MofCache> {
        let acts = self.foundation_acts(input)?;
        let routing = self.route(summary)?;
        let h = acts.last().unwrap();
        let mut output = Array1::zeros(self.shape.output_dim);
        let mut spec_out = vec![None; self.shape.experts];
        for &e in &routing.active {
            let s = self.specialists[e].w.dot(h) + &self.specialists[e].b;
            output.scaled_add(routing.weights[e], &s);
            spec_out[e] = Some(s);
        }
        if output.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixture output"));
        }
        Ok(MofCache {
            acts,
            spec_out,
            routing,
            output,
        })
    }

    /// `sum_{e in active} w_e * specialist_e(foundation(input))`.
    pub fn forward(&self, input: ArrayView1<f64>, summary: ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(self.forward_cached(input, summary)?.output)
    }

    /// Forward pass that also reports the routing decision.
    pub fn forward_routed(
        &self,
        input: ArrayView1<f64>,
        summary: ArrayView1<f64>,
    ) -> Result<(Array1<f64>, Routing)> {
        let c = self.forward_cached(input, summary)?;
        Ok((c.output, c.routing))
    }

    fn foundation_params(&self) -> usize {
        self.foundation.iter().map(Dense::num_params).sum()
    }

    fn specialist_params(&self) -> usize {
        self.specialists[0].num_params()
    }

    pub fn num_params(&self) -> usize {
        self.foundation_params()
            + self.specialists.len() * self.specialist_params()
            + self.router.num_params()
    }

    /// Parameters touched by one forward pass: foundation plus `top_k`
    /// specialists.
    pub fn active_params(&self) -> usize {
        self.foundation_params() + self.shape.top_k * self.specialist_params()
    }

    /// Flat order: foundation layers, specialists, router; each as weights
    /// (row-major) then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_len("mixture parameters", self.num_params(), p.len())?;
        let mut off = 0;
        for l in self.layers_mut() {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = p[off];
                off += 1;
            }
        }
        Ok(())
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.foundation
            .iter()
            .chain(self.specialists.iter())
            .chain(std::iter::once(&self.router))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.foundation
            .iter_mut()
            .chain(self.specialists.iter_mut())
            .chain(std::iter::once(&mut self.router))
    }

    /// One SGD step on the summed squared error `sum ||out - target||^2`,
    /// scaled by `lr / batch`. Only routed specialists and their router rows
    /// are written.
    pub fn train_step(&mut self, batch: &[MofSample], lr: f64) -> Result<MofStepReport> {
        if batch.is_empty() {
            return Err(Error::invalid("mixture batch", "empty"));
        }
        let nf = self.foundation.len();
        let mut g_found: Vec<Dense> = self
            .foundation
            .iter()
            .map(|l| Dense::zeros(l.in_dim(), l.out_dim()))
            .collect();
        let mut g_spec: BTreeMap<usize, Dense> = BTreeMap::new();
        let mut g_router: BTreeMap<usize, (Array1<f64>, f64)> = BTreeMap::new();
        let mut loss = 0.0;
        for s in batch {
            check_len("mixture target", self.shape.output_dim, s.target.len())?;
            let c = self.forward_cached(s.input.view(), s.summary.view())?;
            let err = &c.output - &s.target;
            loss += err.dot(&err);
            let d_out = err * 2.0;
            let h = c.acts.last().unwrap();
            let mut d_h = Array1::zeros(h.len());
            // routing-weight gradients: dL/dw_e = d_out . s_e
            let mut dw = BTreeMap::new();
            for &e in &c.routing.active {
                let se = c.spec_out[e].as_ref().unwrap();
                let w = c.routing.weights[e];
                dw.insert(e, d_out.dot(se));
                let spec = &self.specialists[e];
                let g = g_spec
                    .entry(e)
                    .or_insert_with(|| Dense::zeros(spec.in_dim(), spec.out_dim()));
                let dse = &d_out * w;
                g.w += &outer(dse.view(), h.view());
                g.b += &dse;
                d_h += &spec.w.t().dot(&dse);
            }
            // softmax over the active subset
            let mean: f64 = c.routing.active.iter().map(|&e| c.routing.weights[e] * dw[&e]).sum();
            for &e in &c.routing.active {
                let dl = c.routing.weights[e] * (dw[&e] - mean);
                let entry = g_router
                    .entry(e)
                    .or_insert_with(|| (Array1::zeros(self.shape.router_dim), 0.0));
                entry.0.scaled_add(dl, &s.summary);
                entry.1 += dl;
            }
            let mut delta = d_h;
            for i in (0..nf).rev() {
                let a = &c.acts[i + 1];
                delta.zip_mut_with(a, |d, &a| *d *= 1.0 - a * a);
                g_found[i].w += &outer(delta.view(), c.acts[i].view());
                g_found[i].b += &delta;
                delta = self.foundation[i].w.t().dot(&delta);
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("mixture loss"));
        }
        let step = lr / batch.len() as f64;
        for (l, g) in self.foundation.iter_mut().zip(&g_found) {
            l.w.scaled_add(-step, &g.w);
            l.b.scaled_add(-step, &g.b);
        }
        for (&e, g) in &g_spec {
            self.specialists[e].w.scaled_add(-step, &g.w);
            self.specialists[e].b.scaled_add(-step, &g.b);
        }
        for (&e, (gw, gb)) in &g_router {
            self.router.w.row_mut(e).scaled_add(-step, gw);
            self.router.b[e] -= step * gb;
        }
        Ok(MofStepReport {
            loss,
            updated: g_spec.keys().copied().collect(),
        })
    }
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.insert_axis(ndarray::Axis(1));
    let b2 = b.insert_axis(ndarray::Axis(0));
    a2.dot(&b2)
}

/// `mof_forward(stack, input, summary)`.
pub fn mof_forward(stack: &MofStack, input: ArrayView1<f64>, summary: ArrayView1<f64>) -> Result<Array1<f64>> {
    stack.forward(input, summary)
}

/// Velocity field backed by a [`MofStack`]. The stack input is the same
/// `[flatten(x), t, pooled, one-hot]` vector as the dense field; the router
/// sees `[pooled, one-hot]`.
#[derive(Clone, Debug)]
pub struct MofField {
    pub field: FieldShape,
    pub stack: MofStack,
}

impl MofField {
    pub fn new(field: FieldShape, hidden: usize, experts: usize, top_k: usize, seed: u64) -> Result<Self> {
        let shape = MofShape {
            input_dim: field.input_dim(),
            foundation: vec![hidden, hidden],
            output_dim: field.output_dim(),
            experts,
            top_k,
            router_dim: field.d_model + field.num_embodiments,
        };
        Ok(Self {
            stack: MofStack::new(shape, seed)?,
            field,
        })
    }

    pub fn router_summary(&self, pooled: ArrayView1<f64>, embodiment: Option<usize>) -> Array1<f64> {
        let mut s = Array1::zeros(self.field.d_model + self.field.num_embodiments);
        for (o, p) in s.iter_mut().zip(pooled.iter()) {
            *o = *p;
        }
        if let Some(e) = embodiment.filter(|&e| e < self.field.num_embodiments) {
            s[self.field.d_model + e] = 1.0;
        }
        s
    }

    /// Flow-matching regression pair for one noised chunk.
    pub fn sample(
        &self,
        x_t: ArrayView2<f64>,
        t: &[f64],
        v_target: ArrayView2<f64>,
        pooled: ArrayView1<f64>,
        embodiment: Option<usize>,
    ) -> Result<MofSample> {
        self.field.check_sample(x_t, t, pooled.len())?;
        let mut input = Array1::zeros(self.field.input_dim());
        self.field.write_input(input.view_mut(), x_t, t, pooled, embodiment);
        Ok(MofSample {
            input,
            summary: self.router_summary(pooled, embodiment),
            target: v_target.iter().copied().collect(),
        })
    }
}

impl VelocityField for MofField {
    fn chunk_len(&self) -> usize {
        self.field.chunk_len
    }
    fn action_dim(&self) -> usize {
        self.field.action_dim
    }
    fn velocity(
        &self,
        x: ArrayView2<f64>,
        t: &[f64],
        ctx: &ContextFeatures,
        embodiment: Option<usize>,
    ) -> Array2<f64> {
        let pooled = ctx.pooled();
        let mut input = Array1::zeros(self.field.input_dim());
        self.field.write_input(input.view_mut(), x, t, pooled.view(), embodiment);
        let summary = self.router_summary(pooled.view(), embodiment);
        match self.stack.forward(input.view(), summary.view()) {
            Ok(out) => out
                .into_shape_with_order((self.field.chunk_len, self.field.action_dim))
                .expect("output width is T*d"),
            // a NaN iterate is reported by the Euler loop as divergence
            Err(_) => Array2::from_elem((self.field.chunk_len, self.field.action_dim), f64::NAN),
        }
    }
}

// ---------------------------------------------------------------------------
// Slot-wise adapters

/// One `d_out x d_in[k]` adapter per slot group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBank {
    pub adapters: Vec<Dense>,
}

impl AdapterBank {
    pub fn new(in_dims: &[usize], d_out: usize, seed: u64) -> Self {
        let mut r = rng::stream_rng(seed, stream::INIT);
        Self {
            adapters: in_dims.iter().map(|&d| Dense::random(d, d_out, &mut r)).collect(),
        }
    }

    pub fn zeros(in_dims: &[usize], d_out: usize) -> Self {
        Self {
            adapters: in_dims.iter().map(|&d| Dense::zeros(d, d_out)).collect(),
        }
    }

    /// One adapter per group of `layout`, each reading that group's slots.
    pub fn for_layout(layout: &crate::unified_space::SlotLayout, d_out: usize, seed: u64) -> Self {
        let dims: Vec<usize> = layout.groups().iter().map(|g| g.width).collect();
        Self::new(&dims, d_out, seed)
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.adapters.iter().map(Dense::num_params).sum()
    }

    pub fn active_params(&self, active: &BTreeSet<usize>) -> usize {
        active
            .iter()
            .filter_map(|&k| self.adapters.get(k))
            .map(Dense::num_params)
            .sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.adapters {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_len("adapter parameters", self.num_params(), p.len())?;
        let mut off = 0;
        for l in &mut self.adapters {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = p[off];
                off += 1;
            }
        }
        Ok(())
    }

    fn check_features(
        &self,
        active: &BTreeSet<usize>,
        features: &BTreeMap<usize, Array1<f64>>,
    ) -> Result<()> {
        if let Some(&k) = active.iter().find(|&&k| k >= self.adapters.len()) {
            return Err(Error::invalid("active slot group", format!("{k} has no adapter")));
        }
        if let Some(k) = features.keys().find(|k| !active.contains(k)) {
            return Err(Error::invalid(
                "adapter features",
                format!("feature supplied for inactive slot group {k}"),
            ));
        }
        for &k in active {
            let f = features.get(&k).ok_or_else(|| {
                Error::invalid("adapter features", format!("missing feature for active slot group {k}"))
            })?;
            check_len("adapter feature width", self.adapters[k].in_dim(), f.len())?;
        }
        Ok(())
    }
}

/// `out[k] = W[k] f[k] + b[k]` for every active group `k`.
pub fn esa_apply(
    bank: &AdapterBank,
    active: &BTreeSet<usize>,
    features: &BTreeMap<usize, Array1<f64>>,
) -> Result<BTreeMap<usize, Array1<f64>>> {
    bank.check_features(active, features)?;
    Ok(active
        .iter()
        .map(|&k| {
            let a = &bank.adapters[k];
            (k, a.w.dot(&features[&k]) + &a.b)
        })
        .collect())
}

/// One SGD step on `sum_k ||out[k] - target[k]||^2`. Adapters outside
/// `active` are never written. Returns the loss before the step.
pub fn esa_train_step(
    bank: &mut AdapterBank,
    active: &BTreeSet<usize>,
    features: &BTreeMap<usize, Array1<f64>>,
    targets: &BTreeMap<usize, Array1<f64>>,
    lr: f64,
) -> Result<f64> {
    let out = esa_apply(bank, active, features)?;
    let mut loss = 0.0;
    for (&k, o) in &out {
        let t = targets.get(&k).ok_or_else(|| {
            Error::invalid("adapter targets", format!("missing target for slot group {k}"))
        })?;
        check_len("adapter target width", o.len(), t.len())?;
        let err = o - t;
        loss += err.dot(&err);
        let d = err * 2.0;
        let a = &mut bank.adapters[k];
        a.w.scaled_add(-lr, &outer(d.view(), features[&k].view()));
        a.b.scaled_add(-lr, &d);
    }
    Ok(loss)
}

/// Active parameter count for one forward pass of the stack plus the
/// adapters of `active` groups.
pub fn active_param_count(stack: &MofStack, bank: &AdapterBank, active: &BTreeSet<usize>) -> usize {
    stack.active_params() + bank.active_params(active)
}
