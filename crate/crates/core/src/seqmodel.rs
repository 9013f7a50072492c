//! Query/answer token streams, segment attention gating and loss routing.
//!
//! A stream is a list of query segments followed by answer segments. Non-text
//! segments are bracketed by begin/end sentinel positions. Answer segments are
//! ordered text, then flow-matched actions (FM), then masked motion tokens
//! (MASK); their content positions form the loss index sets.
//!
//! Index conventions: stream positions and motion-token indices are 0-based,
//! codebook ids are `0..|C|`.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng;

pub const CODEBOOK_SIZE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Vision,
    Text,
    State,
    Action,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Query,
    AnswerText,
    AnswerFm,
    AnswerMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub modality: Modality,
    pub len: usize,
    pub role: Role,
}

impl Segment {
    pub fn new(modality: Modality, len: usize, role: Role) -> Self {
        Self { modality, len, role }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Token {
    Begin { modality: Modality },
    End { modality: Modality },
    Content { segment: usize, offset: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedSegment {
    pub segment: Segment,
    /// Positions including sentinels.
    pub span: Range<usize>,
    /// Content positions only.
    pub content: Range<usize>,
}

/// Lengths of the query, FM and MASK blocks for gating and positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateSpans {
    pub query: usize,
    pub fm: usize,
    pub mask: usize,
}

impl GateSpans {
    pub fn new(query: usize, fm: usize, mask: usize) -> Self {
        Self { query, fm, mask }
    }

    pub fn total(&self) -> usize {
        self.query + self.fm + self.mask
    }

    /// 0 = query, 1 = FM, 2 = MASK.
    pub fn block_of(&self, pos: usize) -> usize {
        if pos < self.query {
            0
        } else if pos < self.query + self.fm {
            1
        } else {
            2
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    pub tokens: Vec<Token>,
    pub segments: Vec<PlacedSegment>,
    pub omega_text: Vec<usize>,
    pub omega_fm: Vec<usize>,
    pub omega_mask: Vec<usize>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Text answers are decoded causally and share the query block.
    pub fn gate_spans(&self) -> GateSpans {
        let mut s = GateSpans::default();
        for p in &self.segments {
            let n = p.span.len();
            match p.segment.role {
                Role::Query | Role::AnswerText => s.query += n,
                Role::AnswerFm => s.fm += n,
                Role::AnswerMask => s.mask += n,
            }
        }
        s
    }

    /// Positions of the first answer token onward.
    pub fn answer_positions(&self) -> Range<usize> {
        let start = self
            .segments
            .iter()
            .find(|p| p.segment.role != Role::Query)
            .map_or(self.len(), |p| p.span.start);
        start..self.len()
    }
}

fn rank(role: Role) -> u8 {
    match role {
        Role::Query => 0,
        Role::AnswerText => 1,
        Role::AnswerFm => 2,
        Role::AnswerMask => 3,
    }
}

/// Lays out segments, bracketing non-text ones with sentinels and collecting
/// the loss index sets.
pub fn serialize_qa(segments: &[Segment]) -> Result<TokenStream> {
    if !segments.iter().any(|s| s.role == Role::Query) {
        return Err(Error::invalid("qa sample", "no query segment"));
    }
    let mut seen_answer = false;
    for (i, s) in segments.iter().enumerate() {
        if s.len == 0 {
            return Err(Error::invalid("qa sample", format!("segment {i} is empty")));
        }
        match (s.role, s.modality) {
            (Role::Query, _) if seen_answer => {
                return Err(Error::invalid("qa sample", format!("query segment {i} follows an answer")));
            }
            (Role::Query, _) => {}
            (Role::AnswerText, Modality::Text) | (Role::AnswerFm | Role::AnswerMask, Modality::Action) => {
                seen_answer = true;
            }
            (role, m) => {
                return Err(Error::invalid("qa sample", format!("{m:?} cannot carry role {role:?}")));
            }
        }
    }
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by_key(|&i| rank(segments[i].role));

    let mut stream = TokenStream {
        tokens: Vec::new(),
        segments: Vec::new(),
        omega_text: Vec::new(),
        omega_fm: Vec::new(),
        omega_mask: Vec::new(),
    };
    for (k, &i) in order.iter().enumerate() {
        let seg = segments[i];
        let start = stream.tokens.len();
        let bracket = seg.modality != Modality::Text;
        if bracket {
            stream.tokens.push(Token::Begin { modality: seg.modality });
        }
        let c0 = stream.tokens.len();
        for offset in 0..seg.len {
            stream.tokens.push(Token::Content { segment: k, offset });
        }
        let content = c0..stream.tokens.len();
        if bracket {
            stream.tokens.push(Token::End { modality: seg.modality });
        }
        match seg.role {
            Role::Query => {}
            Role::AnswerText => stream.omega_text.extend(content.clone()),
            Role::AnswerFm => stream.omega_fm.extend(content.clone()),
            Role::AnswerMask => stream.omega_mask.extend(content.clone()),
        }
        stream.segments.push(PlacedSegment {
            segment: seg,
            span: start..stream.tokens.len(),
            content,
        });
    }
    Ok(stream)
}

/// Block-level visibility: rows are queries, columns keys.
pub const BLOCK_GATE: [[bool; 3]; 3] = [[true, false, false], [true, true, false], [true, false, true]];

pub fn causal_mask(n: usize) -> Array2<bool> {
    Array2::from_shape_fn((n, n), |(i, j)| j <= i)
}

/// Token-level gate AND a causal base mask.
pub fn gate_matrix(spans: GateSpans) -> Array2<bool> {
    let n = spans.total();
    gate_matrix_with_base(spans, &causal_mask(n)).expect("square base of matching size")
}

pub fn gate_matrix_with_base(spans: GateSpans, base: &Array2<bool>) -> Result<Array2<bool>> {
    let n = spans.total();
    check_len("base mask rows", n, base.nrows())?;
    check_len("base mask columns", n, base.ncols())?;
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        BLOCK_GATE[spans.block_of(i)][spans.block_of(j)] && base[[i, j]]
    }))
}

/// `j` on the query; both answer blocks restart at `p0 = |S_Q|`.
pub fn assign_positions(spans: GateSpans) -> Vec<usize> {
    let p0 = spans.query;
    (0..spans.query)
        .chain((0..spans.fm).map(|r| p0 + r))
        .chain((0..spans.mask).map(|r| p0 + r))
        .collect()
}

/// `round(rho * t_z)` with ties rounded down, at least 1.
pub fn mask_count(t_z: usize, rho: f64) -> usize {
    let x = rho * t_z as f64;
    ((x - 0.5).ceil() as usize).clamp(1, t_z)
}

/// Sorted positions drawn uniformly without replacement.
pub fn sample_mask<R: Rng + ?Sized>(t_z: usize, rho: f64, rng: &mut R) -> Result<Vec<usize>> {
    if t_z == 0 {
        return Err(Error::invalid("mask", "T_z must be >= 1"));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid("mask", format!("ratio must lie in (0, 1), got {rho}")));
    }
    let mut idx = rand::seq::index::sample(rng, t_z, mask_count(t_z, rho)).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Motion-token sequence with masked positions replaced by `mask_id`.
pub fn apply_mask(tokens: &[usize], omega: &[usize], mask_id: usize) -> Result<Vec<usize>> {
    let mut out = tokens.to_vec();
    for &i in omega {
        let slot = out
            .get_mut(i)
            .ok_or_else(|| Error::invalid("mask", format!("index {i} outside {} tokens", tokens.len())))?;
        *slot = mask_id;
    }
    Ok(out)
}

/// `-sum_{i in omega} log softmax(logits_i)[targets_i]` and its gradient with
/// respect to every logit (zero on unmasked rows).
pub fn masked_ce_loss(logits: ArrayView2<f64>, targets: &[usize], omega: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_len("targets", logits.nrows(), targets.len())?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let c = logits.ncols();
    if let Some(z) = targets.iter().find(|&&z| z >= c) {
        return Err(Error::invalid("targets", format!("code {z} outside codebook of {c}")));
    }
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for &i in omega {
        if i >= logits.nrows() {
            return Err(Error::invalid("mask", format!("index {i} outside {} rows", logits.nrows())));
        }
        let row = logits.row(i);
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - row[targets[i]];
        let mut g = grad.row_mut(i);
        for (k, v) in row.iter().enumerate() {
            g[k] += (v - lse).exp();
        }
        g[targets[i]] -= 1.0;
    }
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub text: Option<f64>,
    pub fm: Option<f64>,
    pub mask: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub text: f64,
    pub act: f64,
    pub fm: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            text: 1.0,
            act: 1.0,
            fm: 1.0,
            mask: 0.1,
        }
    }
}

/// `w_text L_text + w_act (w_fm L_fm + w_mask L_mask)`; absent parts count 0.
pub fn joint_loss(parts: LossParts, w: LossWeights) -> Result<f64> {
    for (name, v) in [("text", w.text), ("act", w.act), ("fm", w.fm), ("mask", w.mask)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::invalid("loss weights", format!("{name} weight {v} must be >= 0")));
        }
    }
    if parts.text.is_none() && parts.fm.is_none() && parts.mask.is_none() {
        return Err(Error::invalid("joint loss", "no loss part present"));
    }
    let text = parts.text.unwrap_or(0.0);
    let fm = parts.fm.unwrap_or(0.0);
    let mask = parts.mask.unwrap_or(0.0);
    Ok(w.text * text + w.act * (w.fm * fm + w.mask * mask))
}

/// One single-head attention layer, used to probe the gate matrix.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

impl AttentionLayer {
    pub fn random(d: usize, seed: u64) -> Self {
        let mut r = rng::stream_rng(seed, rng::stream::INIT);
        let scale = 1.0 / (d.max(1) as f64).sqrt();
        let mut m = || Array2::from_shape_fn((d, d), |_| rng::normal(&mut r) * scale);
        Self {
            wq: m(),
            wk: m(),
            wv: m(),
        }
    }

    /// Post-softmax weights; masked entries are exactly 0 and a row with no
    /// visible key is all zeros.
    pub fn weights(&self, x: ArrayView2<f64>, mask: &Array2<bool>) -> Result<Array2<f64>> {
        check_len("mask rows", x.nrows(), mask.nrows())?;
        check_len("mask columns", x.nrows(), mask.ncols())?;
        let q = x.dot(&self.wq);
        let k = x.dot(&self.wk);
        let scale = 1.0 / (x.ncols().max(1) as f64).sqrt();
        let scores = q.dot(&k.t()) * scale;
        let mut w = Array2::zeros(scores.raw_dim());
        for (i, row) in scores.axis_iter(Axis(0)).enumerate() {
            let visible: Vec<usize> = (0..row.len()).filter(|&j| mask[[i, j]]).collect();
            let Some(m) = visible.iter().map(|&j| row[j]).reduce(f64::max) else { continue };
            let sum: f64 = visible.iter().map(|&j| (row[j] - m).exp()).sum();
            for &j in &visible {
                w[[i, j]] = (row[j] - m).exp() / sum;
            }
        }
        Ok(w)
    }

    pub fn forward(&self, x: ArrayView2<f64>, mask: &Array2<bool>) -> Result<Array2<f64>> {
        Ok(self.weights(x, mask)?.dot(&x.dot(&self.wv)))
    }
}

/// Total attention weight from query rows in `from` to key columns in `to`.
pub fn attention_mass(weights: &Array2<f64>, from: Range<usize>, to: Range<usize>) -> f64 {
    from.flat_map(|i| to.clone().map(move |j| (i, j)))
        .map(|(i, j)| weights[[i, j]])
        .sum()
}

/// Fixed vector-quantization codebook fit by Lloyd iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub centroids: Array2<f64>,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    /// k-means++ seeding, then `iters` Lloyd steps. Empty clusters keep their
    /// previous centroid.
    pub fn fit(data: ArrayView2<f64>, k: usize, iters: usize, seed: u64) -> Result<Self> {
        let n = data.nrows();
        if n == 0 || k == 0 {
            return Err(Error::invalid("codebook", "needs data and k >= 1"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook data"));
        }
        let mut r = rng::stream_rng(seed, rng::stream::INIT);
        let mut centroids = Array2::zeros((k, data.ncols()));
        centroids.row_mut(0).assign(&data.row(r.random_range(0..n)));
        let mut nearest: Vec<f64> = data.rows().into_iter().map(|x| sq_dist(x, centroids.row(0))).collect();
        for c in 1..k {
            let total: f64 = nearest.iter().sum();
            let pick = if total > 0.0 {
                let mut u = r.random::<f64>() * total;
                nearest
                    .iter()
                    .position(|&w| {
                        u -= w;
                        u < 0.0
                    })
                    .unwrap_or(n - 1)
            } else {
                r.random_range(0..n)
            };
            centroids.row_mut(c).assign(&data.row(pick));
            for (i, x) in data.rows().into_iter().enumerate() {
                nearest[i] = nearest[i].min(sq_dist(x, centroids.row(c)));
            }
        }
        let mut book = Self { centroids };
        for _ in 0..iters {
            let mut sums = Array2::<f64>::zeros(book.centroids.raw_dim());
            let mut counts = vec![0usize; k];
            for x in data.rows() {
                let c = book.encode_row(x);
                sums.row_mut(c).scaled_add(1.0, &x);
                counts[c] += 1;
            }
            let mut moved = false;
            for c in 0..k {
                if counts[c] > 0 {
                    let mean = sums.row(c).mapv(|v| v / counts[c] as f64);
                    moved |= mean != book.centroids.row(c);
                    book.centroids.row_mut(c).assign(&mean);
                }
            }
            if !moved {
                break;
            }
        }
        Ok(book)
    }

    pub fn size(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Index of the nearest centroid; ties go to the lower index.
    pub fn encode_row(&self, x: ndarray::ArrayView1<f64>) -> usize {
        let mut best = (0, f64::INFINITY);
        for (c, m) in self.centroids.rows().into_iter().enumerate() {
            let d = sq_dist(x, m);
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    }

    /// One code per row.
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        check_len("codebook input width", self.dim(), x.ncols())?;
        Ok(x.rows().into_iter().map(|r| self.encode_row(r)).collect())
    }

    pub fn decode(&self, codes: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((codes.len(), self.dim()));
        for (i, &c) in codes.iter().enumerate() {
            if c >= self.size() {
                return Err(Error::invalid("code", format!("{c} outside codebook of {}", self.size())));
            }
            out.row_mut(i).assign(&self.centroids.row(c));
        }
        Ok(out)
    }

    pub fn params(&self) -> Array1<f64> {
        self.centroids.iter().copied().collect()
    }

    pub fn from_params(k: usize, dim: usize, flat: &[f64]) -> Result<Self> {
        check_len("codebook params", k * dim, flat.len())?;
        let centroids = Array2::from_shape_vec((k, dim), flat.to_vec()).expect("length checked");
        Ok(Self { centroids })
    }
}
