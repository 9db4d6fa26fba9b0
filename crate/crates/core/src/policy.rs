//! Trainable token policy.
//!
//! The next-token distribution is a one-hidden-layer network over a fixed
//! set of context features, each an embedding-sized block:
//!
//! * the mean embedding of the last `window` tokens,
//! * the embeddings of the last `recent` tokens, one block per offset,
//! * the embeddings of the first `query_slots` query tokens,
//! * the embeddings of the first `memory_slots` tokens of the most recent
//!   closed `<mem>` segment after the query,
//! * the embeddings of the first `info_slots` tokens of the most recent
//!   closed `<information>` segment after the query.
//!
//! Tokens with id at or above `open_class_from` share a single embedding row,
//! so the summary layer sees dataset words by position only and an entity
//! never seen in training looks like any other. Their identity reaches the
//! output through the per-token output rows and the copy head.
//!
//! Missing positions contribute zero blocks. `h = tanh(W f + b)`, logits are
//! `U h + c` plus a copy score: every non-window slot `s` holding token `v`
//! adds `g_s . h + e_s` to the logit of `v`, so the policy can emit entity
//! words it only ever saw in context. Gradients of log-probabilities are computed by hand and checked
//! against finite differences in the tests.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, PolicyError};
use crate::rng::seeded;
use crate::trajectory::{Context, SegmentKind, TagTokens};
use crate::vocab::{Token, VocabHash, RESERVED_TOKENS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub vocab: usize,
    pub dim: usize,
    pub hidden: usize,
    pub window: usize,
    pub recent: usize,
    pub query_slots: usize,
    pub memory_slots: usize,
    #[serde(default)]
    pub info_slots: usize,
    /// First token id of the shared open-class embedding row (`None`: every
    /// token has its own row).
    #[serde(default)]
    pub open_class_from: Option<usize>,
}

impl PolicyShape {
    pub fn desk(vocab: usize) -> Self {
        PolicyShape {
            vocab,
            dim: 16,
            hidden: 64,
            window: 16,
            recent: 12,
            query_slots: 40,
            memory_slots: 8,
            info_slots: 16,
            open_class_from: Some(RESERVED_TOKENS),
        }
    }

    pub fn blocks(&self) -> usize {
        1 + self.copy_slots()
    }

    /// Rows of the embedding table.
    pub fn embedding_rows(&self) -> usize {
        match self.open_class_from {
            Some(k) if k < self.vocab => k + 1,
            _ => self.vocab,
        }
    }

    #[inline]
    fn embedding_row(&self, t: Token) -> usize {
        match self.open_class_from {
            Some(k) => t.index().min(k),
            None => t.index(),
        }
    }

    /// Slots that carry a single token and feed the copy head.
    pub fn copy_slots(&self) -> usize {
        self.recent + self.query_slots + self.memory_slots + self.info_slots
    }

    pub fn features(&self) -> usize {
        self.blocks() * self.dim
    }

    fn validate(&self) -> Result<(), PolicyError> {
        if self.vocab == 0 || self.dim == 0 || self.hidden == 0 || self.window == 0 {
            return Err(PolicyError::InvalidShape(format!("{self:?}")));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let emb = 0;
        let w_hidden = emb + self.embedding_rows() * self.dim;
        let b_hidden = w_hidden + self.hidden * self.features();
        let w_out = b_hidden + self.hidden;
        let b_out = w_out + self.vocab * self.hidden;
        let copy_w = b_out + self.vocab;
        let copy_b = copy_w + self.copy_slots() * self.hidden;
        Layout {
            emb,
            w_hidden,
            b_hidden,
            w_out,
            b_out,
            copy_w,
            copy_b,
            len: copy_b + self.copy_slots(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    emb: usize,
    w_hidden: usize,
    b_hidden: usize,
    w_out: usize,
    b_out: usize,
    copy_w: usize,
    copy_b: usize,
    len: usize,
}

/// Flat parameter vector plus its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    shape: PolicyShape,
    data: Vec<f64>,
}

/// Gradient (or any parameter-shaped vector).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub data: Vec<f64>,
}

impl Gradient {
    pub fn zeros(shape: &PolicyShape) -> Self {
        Gradient {
            data: vec![0.0; shape.param_count()],
        }
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Gradient) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl PolicyParams {
    /// All-zero parameters: every next-token distribution is uniform.
    pub fn zeros(shape: PolicyShape) -> Result<Self, PolicyError> {
        shape.validate()?;
        Ok(PolicyParams {
            data: vec![0.0; shape.param_count()],
            shape,
        })
    }

    /// Gaussian initialization, fan-in scaled. Output biases and the copy
    /// head start at zero.
    pub fn init(shape: PolicyShape, seed: u64) -> Result<Self, PolicyError> {
        shape.validate()?;
        let l = shape.layout();
        let mut rng = seeded(seed, 0x706f);
        let mut data = vec![0.0; l.len];
        let mut fill = |range: std::ops::Range<usize>, std: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            for x in &mut data[range] {
                let z: f64 = StandardNormal.sample(rng);
                *x = z * std;
            }
        };
        fill(l.emb..l.w_hidden, 1.0, &mut rng);
        // Each feature block is roughly unit-variance per coordinate.
        fill(l.w_hidden..l.b_hidden, 1.0 / (shape.features() as f64).sqrt(), &mut rng);
        fill(l.w_out..l.b_out, 1.0 / (shape.hidden as f64).sqrt(), &mut rng);
        Ok(PolicyParams { shape, data })
    }

    /// Wraps an existing flat vector.
    pub fn from_vec(shape: PolicyShape, data: Vec<f64>) -> Result<Self, PolicyError> {
        shape.validate()?;
        if data.len() != shape.param_count() {
            return Err(PolicyError::InvalidShape(format!(
                "expected {} parameters, got {}",
                shape.param_count(),
                data.len()
            )));
        }
        Ok(PolicyParams { shape, data })
    }

    pub fn shape(&self) -> &PolicyShape {
        &self.shape
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Deep copy, unaffected by later updates to `self`.
    pub fn snapshot(&self) -> PolicyParams {
        self.clone()
    }

    /// `self += step * direction`.
    pub fn add_scaled(&mut self, direction: &Gradient, step: f64) {
        for (p, g) in self.data.iter_mut().zip(&direction.data) {
            *p += step * g;
        }
    }

    pub fn distance(&self, other: &PolicyParams) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<(), PolicyError> {
        match tokens.iter().find(|t| t.index() >= self.shape.vocab) {
            Some(t) => Err(PolicyError::OutOfVocabulary(t.0)),
            None => Ok(()),
        }
    }

    /// Per-token log-probabilities of `continuation` following `ctx`.
    pub fn log_prob(&self, ctx: &Context, continuation: &[Token]) -> Result<Vec<f64>, PolicyError> {
        if continuation.is_empty() {
            return Err(PolicyError::EmptyContinuation);
        }
        self.check_tokens(&ctx.query)?;
        self.check_tokens(&ctx.body)?;
        self.check_tokens(continuation)?;
        let mut cursor = Cursor::new(self, ctx);
        let mut scratch = Scratch::new(&self.shape);
        let mut out = Vec::with_capacity(continuation.len());
        for &t in continuation {
            self.forward(&cursor, &mut scratch);
            out.push(scratch.log_probs[t.index()]);
            cursor.push(self, t);
        }
        Ok(out)
    }

    /// Next-token probabilities after `ctx`.
    pub fn next_distribution(&self, ctx: &Context) -> Result<Vec<f64>, PolicyError> {
        self.check_tokens(&ctx.query)?;
        self.check_tokens(&ctx.body)?;
        let cursor = Cursor::new(self, ctx);
        let mut scratch = Scratch::new(&self.shape);
        self.forward(&cursor, &mut scratch);
        Ok(scratch.log_probs.iter().map(|l| l.exp()).collect())
    }

    /// Gradient of `sum_l log p(c_l | ctx, c_<l)`.
    pub fn grad_log_prob(&self, ctx: &Context, continuation: &[Token]) -> Result<Gradient, PolicyError> {
        let mut g = Gradient::zeros(&self.shape);
        let w = vec![1.0; continuation.len()];
        self.accumulate_grad(ctx, continuation, &w, &mut g)?;
        Ok(g)
    }

    /// Adds `sum_l weights[l] * grad log p(c_l | ..)` into `grad` and returns
    /// the per-token log-probabilities.
    pub fn accumulate_grad(
        &self,
        ctx: &Context,
        continuation: &[Token],
        weights: &[f64],
        grad: &mut Gradient,
    ) -> Result<Vec<f64>, PolicyError> {
        assert_eq!(weights.len(), continuation.len(), "one weight per token");
        self.accumulate_grad_with(ctx, continuation, grad, |l, _| weights[l])
    }

    /// Like [`accumulate_grad`](Self::accumulate_grad), with the weight of
    /// token `l` computed from `(l, log p(c_l | ..))`.
    pub fn accumulate_grad_with(
        &self,
        ctx: &Context,
        continuation: &[Token],
        grad: &mut Gradient,
        mut weight: impl FnMut(usize, f64) -> f64,
    ) -> Result<Vec<f64>, PolicyError> {
        if continuation.is_empty() {
            return Err(PolicyError::EmptyContinuation);
        }
        self.check_tokens(&ctx.query)?;
        self.check_tokens(&ctx.body)?;
        self.check_tokens(continuation)?;
        let mut cursor = Cursor::new(self, ctx);
        let mut scratch = Scratch::new(&self.shape);
        let mut out = Vec::with_capacity(continuation.len());
        for (l, &t) in continuation.iter().enumerate() {
            self.forward(&cursor, &mut scratch);
            let lp = scratch.log_probs[t.index()];
            out.push(lp);
            let w = weight(l, lp);
            if w != 0.0 {
                self.backward(&cursor, &mut scratch, t, w, grad);
            }
            cursor.push(self, t);
        }
        Ok(out)
    }

    /// Samples one segment run. Stops after the first stop token or at
    /// `max_new_tokens`.
    pub fn sample(&self, ctx: &Context, cfg: &SampleConfig) -> Result<Vec<Token>, PolicyError> {
        cfg.validate()?;
        self.check_tokens(&ctx.query)?;
        self.check_tokens(&ctx.body)?;
        let mut rng = seeded(cfg.seed, 0x7361);
        let mut cursor = Cursor::new(self, ctx);
        let mut scratch = Scratch::new(&self.shape);
        let mut out = Vec::new();
        while out.len() < cfg.max_new_tokens {
            self.forward(&cursor, &mut scratch);
            let next = if cfg.greedy {
                argmax(&scratch.log_probs)
            } else {
                sample_tempered(&scratch.logits, cfg.temperature, &mut rng)
            };
            let tok = Token(next as u32);
            out.push(tok);
            if cfg.stop_tokens.contains(&tok) {
                break;
            }
            cursor.push(self, tok);
        }
        Ok(out)
    }

    fn forward(&self, cursor: &Cursor, s: &mut Scratch) {
        let sh = &self.shape;
        let l = sh.layout();
        cursor.features(self, &mut s.features);
        let w = &self.data[l.w_hidden..l.b_hidden];
        let b = &self.data[l.b_hidden..l.w_out];
        let nf = sh.features();
        for j in 0..sh.hidden {
            let row = &w[j * nf..(j + 1) * nf];
            let z: f64 = row.iter().zip(&s.features).map(|(a, x)| a * x).sum::<f64>() + b[j];
            s.hidden[j] = z.tanh();
        }
        let u = &self.data[l.w_out..l.b_out];
        let c = &self.data[l.b_out..l.copy_w];
        for v in 0..sh.vocab {
            let row = &u[v * sh.hidden..(v + 1) * sh.hidden];
            s.logits[v] = row.iter().zip(&s.hidden).map(|(a, x)| a * x).sum::<f64>() + c[v];
        }
        s.slots.clear();
        cursor.for_each_block(self, |block, t, _| {
            if block > 0 {
                s.slots.push((block - 1, t));
            }
        });
        for &(slot, t) in &s.slots {
            let g = &self.data[l.copy_w + slot * sh.hidden..l.copy_w + (slot + 1) * sh.hidden];
            let score = g.iter().zip(&s.hidden).map(|(a, x)| a * x).sum::<f64>() + self.data[l.copy_b + slot];
            s.logits[t.index()] += score;
        }
        let max = s.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + s.logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        for (lp, z) in s.log_probs.iter_mut().zip(&s.logits) {
            *lp = z - lse;
        }
    }

    /// Accumulates `weight * grad log p(target)` for the position last run
    /// through `forward`.
    fn backward(&self, cursor: &Cursor, s: &mut Scratch, target: Token, weight: f64, g: &mut Gradient) {
        let sh = &self.shape;
        let l = sh.layout();
        let (h, nf) = (sh.hidden, sh.features());
        // d logits
        for v in 0..sh.vocab {
            s.dlogits[v] = -weight * s.log_probs[v].exp();
        }
        s.dlogits[target.index()] += weight;
        let u = &self.data[l.w_out..l.b_out];
        s.dhidden.iter_mut().for_each(|x| *x = 0.0);
        {
            let (gu, gc) = g.data[l.w_out..l.copy_w].split_at_mut(sh.vocab * h);
            for v in 0..sh.vocab {
                let d = s.dlogits[v];
                gc[v] += d;
                let urow = &u[v * h..(v + 1) * h];
                let grow = &mut gu[v * h..(v + 1) * h];
                for j in 0..h {
                    grow[j] += d * s.hidden[j];
                    s.dhidden[j] += d * urow[j];
                }
            }
        }
        for &(slot, t) in &s.slots {
            let d = s.dlogits[t.index()];
            g.data[l.copy_b + slot] += d;
            let off = l.copy_w + slot * h;
            for j in 0..h {
                g.data[off + j] += d * s.hidden[j];
                s.dhidden[j] += d * self.data[off + j];
            }
        }
        for j in 0..h {
            s.dhidden[j] *= 1.0 - s.hidden[j] * s.hidden[j];
        }
        let w = &self.data[l.w_hidden..l.b_hidden];
        s.dfeatures.iter_mut().for_each(|x| *x = 0.0);
        {
            let (gw, gb) = g.data[l.w_hidden..l.w_out].split_at_mut(h * nf);
            for j in 0..h {
                let dz = s.dhidden[j];
                gb[j] += dz;
                if dz == 0.0 {
                    continue;
                }
                let row = &w[j * nf..(j + 1) * nf];
                let grow = &mut gw[j * nf..(j + 1) * nf];
                for ((gx, &fx), (dfx, &wx)) in grow
                    .iter_mut()
                    .zip(&s.features)
                    .zip(s.dfeatures.iter_mut().zip(row))
                {
                    *gx += dz * fx;
                    *dfx += dz * wx;
                }
            }
        }
        cursor.scatter(self, &s.dfeatures, &mut g.data[l.emb..l.w_hidden]);
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_tempered(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // Rounding fell off the end: last token with nonzero weight.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

struct Scratch {
    features: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    log_probs: Vec<f64>,
    dlogits: Vec<f64>,
    dhidden: Vec<f64>,
    dfeatures: Vec<f64>,
    /// `(copy slot, token)` pairs of the position last run through `forward`.
    slots: Vec<(usize, Token)>,
}

impl Scratch {
    fn new(sh: &PolicyShape) -> Self {
        Scratch {
            features: vec![0.0; sh.features()],
            hidden: vec![0.0; sh.hidden],
            logits: vec![0.0; sh.vocab],
            log_probs: vec![0.0; sh.vocab],
            dlogits: vec![0.0; sh.vocab],
            dhidden: vec![0.0; sh.hidden],
            dfeatures: vec![0.0; sh.features()],
            slots: Vec::with_capacity(sh.copy_slots()),
        }
    }
}

/// Token sequence being extended one token at a time, with the bookkeeping
/// needed to build features in O(features).
struct Cursor {
    seq: Vec<Token>,
    query_len: usize,
    window_sum: Vec<f64>,
    /// Content range of the latest closed memory segment after the query.
    memory: Option<(usize, usize)>,
    open_memory: Option<usize>,
    /// Content range of the latest closed information segment after the query.
    info: Option<(usize, usize)>,
    open_info: Option<usize>,
}

impl Cursor {
    fn new(p: &PolicyParams, ctx: &Context) -> Self {
        let mut c = Cursor {
            seq: Vec::with_capacity(ctx.len() + 64),
            query_len: ctx.query.len(),
            window_sum: vec![0.0; p.shape.dim],
            memory: None,
            open_memory: None,
            info: None,
            open_info: None,
        };
        for &t in ctx.query.iter().chain(&ctx.body) {
            c.push(p, t);
        }
        c
    }

    fn push(&mut self, p: &PolicyParams, t: Token) {
        let d = p.shape.dim;
        let pos = self.seq.len();
        self.seq.push(t);
        for (s, e) in self.window_sum.iter_mut().zip(p.embedding(t)) {
            *s += e;
        }
        if pos >= p.shape.window {
            let old = self.seq[pos - p.shape.window];
            for (s, e) in self.window_sum.iter_mut().zip(p.embedding(old)) {
                *s -= e;
            }
        }
        debug_assert_eq!(self.window_sum.len(), d);
        if pos >= self.query_len {
            match TagTokens.classify(t) {
                Some((SegmentKind::Mem, false)) => self.open_memory = Some(pos + 1),
                Some((SegmentKind::Mem, true)) => {
                    if let Some(start) = self.open_memory.take() {
                        self.memory = Some((start, pos));
                    }
                }
                Some((SegmentKind::Information, false)) => self.open_info = Some(pos + 1),
                Some((SegmentKind::Information, true)) => {
                    if let Some(start) = self.open_info.take() {
                        self.info = Some((start, pos));
                    }
                }
                _ => {}
            }
        }
    }

    /// Calls `f(block, token, scale)` for every nonzero feature block.
    fn for_each_block(&self, p: &PolicyParams, mut f: impl FnMut(usize, Token, f64)) {
        let sh = &p.shape;
        let n = self.seq.len();
        let in_window = n.min(sh.window);
        if in_window > 0 {
            let scale = 1.0 / in_window as f64;
            for &t in &self.seq[n - in_window..] {
                f(0, t, scale);
            }
        }
        let mut block = 1;
        for j in 1..=sh.recent {
            if j <= n {
                f(block, self.seq[n - j], 1.0);
            }
            block += 1;
        }
        for i in 0..sh.query_slots.min(self.query_len) {
            f(block + i, self.seq[i], 1.0);
        }
        block += sh.query_slots;
        if let Some((start, end)) = self.memory {
            for i in 0..sh.memory_slots.min(end - start) {
                f(block + i, self.seq[start + i], 1.0);
            }
        }
        block += sh.memory_slots;
        if let Some((start, end)) = self.info {
            for i in 0..sh.info_slots.min(end - start) {
                f(block + i, self.seq[start + i], 1.0);
            }
        }
    }

    fn features(&self, p: &PolicyParams, out: &mut [f64]) {
        let d = p.shape.dim;
        out.iter_mut().for_each(|x| *x = 0.0);
        let n = self.seq.len();
        let in_window = n.min(p.shape.window);
        if in_window > 0 {
            let scale = 1.0 / in_window as f64;
            for (o, s) in out[..d].iter_mut().zip(&self.window_sum) {
                *o = s * scale;
            }
        }
        self.for_each_block(p, |block, t, scale| {
            if block > 0 {
                for (o, e) in out[block * d..(block + 1) * d].iter_mut().zip(p.embedding(t)) {
                    *o += scale * e;
                }
            }
        });
    }

    fn scatter(&self, p: &PolicyParams, dfeatures: &[f64], gemb: &mut [f64]) {
        let d = p.shape.dim;
        self.for_each_block(p, |block, t, scale| {
            let r = p.shape.embedding_row(t);
            let row = &mut gemb[r * d..(r + 1) * d];
            for (g, df) in row.iter_mut().zip(&dfeatures[block * d..(block + 1) * d]) {
                *g += scale * df;
            }
        });
    }
}

impl PolicyParams {
    #[inline]
    fn embedding(&self, t: Token) -> &[f64] {
        let d = self.shape.dim;
        let r = self.shape.embedding_row(t);
        &self.data[r * d..(r + 1) * d]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub greedy: bool,
    pub stop_tokens: Vec<Token>,
}

impl SampleConfig {
    /// Stops at the end of a tool call or an answer.
    pub fn step_defaults(seed: u64) -> Self {
        SampleConfig {
            temperature: 1.0,
            max_new_tokens: 48,
            seed,
            greedy: false,
            stop_tokens: vec![
                TagTokens.close(SegmentKind::ToolCall),
                TagTokens.close(SegmentKind::Answer),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(PolicyError::InvalidSampleConfig("temperature must be > 0".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(PolicyError::InvalidSampleConfig("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_FORMAT: &str = "mempo-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Block {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    vocab_hash: String,
    shape: PolicyShape,
    blocks: Vec<Block>,
}

impl PolicyParams {
    pub fn to_checkpoint(&self, vocab: &VocabHash) -> serde_json::Result<String> {
        let sh = &self.shape;
        let l = sh.layout();
        let block = |name: &str, shape: Vec<usize>, r: std::ops::Range<usize>| Block {
            name: name.to_string(),
            shape,
            data: self.data[r].to_vec(),
        };
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            vocab_hash: vocab.0.clone(),
            shape: *sh,
            blocks: vec![
                block("embedding", vec![sh.embedding_rows(), sh.dim], l.emb..l.w_hidden),
                block("summary_weight", vec![sh.hidden, sh.features()], l.w_hidden..l.b_hidden),
                block("summary_bias", vec![sh.hidden], l.b_hidden..l.w_out),
                block("output_weight", vec![sh.vocab, sh.hidden], l.w_out..l.b_out),
                block("output_bias", vec![sh.vocab], l.b_out..l.copy_w),
                block("copy_weight", vec![sh.copy_slots(), sh.hidden], l.copy_w..l.copy_b),
                block("copy_bias", vec![sh.copy_slots()], l.copy_b..l.len),
            ],
        };
        serde_json::to_string(&file)
    }

    /// Loads a checkpoint, refusing one trained against another vocabulary.
    pub fn from_checkpoint(text: &str, expected: &VocabHash) -> Result<Self, CheckpointError> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Malformed(format!("format `{}`", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(file.version));
        }
        if file.vocab_hash != expected.0 {
            return Err(CheckpointError::VocabMismatch {
                expected: expected.0.clone(),
                found: file.vocab_hash,
            });
        }
        let mut data = Vec::with_capacity(file.shape.param_count());
        for b in &file.blocks {
            if b.shape.iter().product::<usize>() != b.data.len() {
                return Err(CheckpointError::Malformed(format!("block `{}` size", b.name)));
            }
            data.extend_from_slice(&b.data);
        }
        let params = PolicyParams::from_vec(file.shape, data)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if !params.is_finite() {
            return Err(CheckpointError::Malformed("non-finite parameter".into()));
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_shape(vocab: usize) -> PolicyShape {
        PolicyShape {
            vocab,
            dim: 3,
            hidden: 4,
            window: 3,
            recent: 2,
            query_slots: 2,
            memory_slots: 2,
            info_slots: 2,
            open_class_from: None,
        }
    }

    fn ctx(q: &[u32], b: &[u32]) -> Context {
        Context::new(q.iter().map(|&t| Token(t)).collect(), b.iter().map(|&t| Token(t)).collect())
    }

    #[test]
    fn zero_params_are_uniform() {
        let p = PolicyParams::zeros(small_shape(13)).unwrap();
        let lp = p.log_prob(&ctx(&[10, 11], &[12]), &[Token(11), Token(3)]).unwrap();
        for x in lp {
            assert!((x + (13f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn distribution_normalizes() {
        let p = PolicyParams::init(small_shape(17), 3).unwrap();
        let c = ctx(&[10, 12, 14], &[0, 11, 1, 2, 15]);
        let total: f64 = (0..17)
            .map(|v| p.log_prob(&c, &[Token(v)]).unwrap()[0].exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chain_rule_consistency() {
        let p = PolicyParams::init(small_shape(17), 4).unwrap();
        let c = ctx(&[10, 12], &[0, 11]);
        let both = p.log_prob(&c, &[Token(13), Token(1)]).unwrap();
        let first = p.log_prob(&c, &[Token(13)]).unwrap();
        let second = p.log_prob(&ctx(&[10, 12], &[0, 11, 13]), &[Token(1)]).unwrap();
        assert!((both[0] - first[0]).abs() < 1e-15);
        assert!((both[1] - second[0]).abs() < 1e-15);
    }

    #[test]
    fn memory_slots_track_latest_closed_segment() {
        // Memory tokens only count after the query, and only once closed.
        let p = PolicyParams::init(small_shape(17), 5).unwrap();
        let with_mem = ctx(&[10, 11], &[0, 14, 15, 1, 12, 13, 14]);
        let c = Cursor::new(&p, &with_mem);
        assert_eq!(c.memory, Some((3, 5)));
        let open = ctx(&[10, 11], &[0, 14, 15]);
        assert_eq!(Cursor::new(&p, &open).memory, None);
        let in_query = ctx(&[0, 14, 1], &[12]);
        assert_eq!(Cursor::new(&p, &in_query).memory, None);
    }

    #[test]
    fn info_slots_track_latest_closed_segment() {
        let p = PolicyParams::init(small_shape(17), 5).unwrap();
        let c = ctx(&[10], &[4, 14, 5, 6, 15, 16, 7]);
        assert_eq!(Cursor::new(&p, &c).info, Some((5, 7)));
        let c = ctx(&[10], &[6, 15, 16, 7, 6, 12]);
        assert_eq!(Cursor::new(&p, &c).info, Some((2, 4)));
    }

    #[test]
    fn copy_bias_raises_slot_token() {
        let mut p = PolicyParams::zeros(small_shape(17)).unwrap();
        let l = p.shape.layout();
        // First query slot comes after the window and two recent slots.
        p.data[l.copy_b + 2] = 5.0;
        let probs = p.next_distribution(&ctx(&[16, 11], &[12, 13])).unwrap();
        assert_eq!(argmax(&probs), 16);
        let expected = 5f64.exp() / (5f64.exp() + 16.0);
        assert!((probs[16] - expected).abs() < 1e-12);
    }

    #[test]
    fn out_of_vocabulary_is_rejected() {
        let p = PolicyParams::zeros(small_shape(13)).unwrap();
        assert_eq!(
            p.log_prob(&ctx(&[1], &[]), &[Token(13)]),
            Err(PolicyError::OutOfVocabulary(13))
        );
        assert_eq!(p.log_prob(&ctx(&[1], &[]), &[]), Err(PolicyError::EmptyContinuation));
    }

    #[test]
    fn sampling_is_seeded_and_stops() {
        let p = PolicyParams::init(small_shape(17), 6).unwrap();
        let c = ctx(&[10, 11], &[]);
        let mut cfg = SampleConfig::step_defaults(9);
        cfg.max_new_tokens = 30;
        let a = p.sample(&c, &cfg).unwrap();
        assert_eq!(a, p.sample(&c, &cfg).unwrap());
        assert!(a.len() <= 30);
        if a.len() < 30 {
            assert!(cfg.stop_tokens.contains(a.last().unwrap()));
        }
        for (i, t) in a.iter().enumerate() {
            let mut body = c.body.clone();
            body.extend_from_slice(&a[..i]);
            let lp = p.log_prob(&Context::new(c.query.clone(), body), &[*t]).unwrap();
            assert!(lp[0].is_finite());
        }
    }

    #[test]
    fn greedy_breaks_ties_by_lowest_id() {
        let p = PolicyParams::zeros(small_shape(13)).unwrap();
        let mut cfg = SampleConfig::step_defaults(0);
        cfg.greedy = true;
        cfg.max_new_tokens = 3;
        cfg.stop_tokens.clear();
        assert_eq!(p.sample(&ctx(&[5], &[]), &cfg).unwrap(), vec![Token(0); 3]);
    }

    #[test]
    fn stop_token_first() {
        let mut p = PolicyParams::zeros(small_shape(13)).unwrap();
        let l = p.shape.layout();
        let stop = TagTokens.close(SegmentKind::ToolCall);
        p.data[l.b_out + stop.index()] = 50.0;
        let cfg = SampleConfig::step_defaults(1);
        assert_eq!(p.sample(&ctx(&[5], &[]), &cfg).unwrap(), vec![stop]);
    }

    #[test]
    fn snapshot_is_independent() {
        let mut p = PolicyParams::init(small_shape(13), 7).unwrap();
        let snap = p.snapshot();
        let c = ctx(&[10], &[11]);
        let before = snap.log_prob(&c, &[Token(3)]).unwrap();
        assert_eq!(before, p.log_prob(&c, &[Token(3)]).unwrap());
        let g = p.grad_log_prob(&c, &[Token(3)]).unwrap();
        p.add_scaled(&g, 0.5);
        assert_eq!(snap.log_prob(&c, &[Token(3)]).unwrap(), before);
        assert_ne!(p.log_prob(&c, &[Token(3)]).unwrap(), before);
    }

    fn tiny_shape() -> PolicyShape {
        PolicyShape {
            vocab: 6,
            dim: 2,
            hidden: 2,
            window: 2,
            recent: 1,
            query_slots: 0,
            memory_slots: 1,
            info_slots: 0,
            open_class_from: Some(4),
        }
    }

    fn random_tokens(rng: &mut impl Rng, n: usize, vocab: u32) -> Vec<Token> {
        (0..n).map(|_| Token(rng.gen_range(0..vocab))).collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        assert!(tiny_shape().param_count() <= 50);
        let mut rng = seeded(11, 0);
        for trial in 0..20 {
            let n = tiny_shape().param_count();
            let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let p = PolicyParams::from_vec(tiny_shape(), data).unwrap();
            let c = Context::new(random_tokens(&mut rng, 2, 6), random_tokens(&mut rng, 3, 6));
            let cont = random_tokens(&mut rng, 3, 6);
            let g = p.grad_log_prob(&c, &cont).unwrap();
            let h = 1e-5;
            for i in 0..p.param_count() {
                let f = |delta: f64| {
                    let mut q = p.clone();
                    q.data[i] += delta;
                    q.log_prob(&c, &cont).unwrap().iter().sum::<f64>()
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                let err = (fd - g.data[i]).abs() / fd.abs().max(g.data[i].abs()).max(1e-6);
                assert!(err < 1e-4, "trial {trial} param {i}: fd {fd} analytic {}", g.data[i]);
            }
        }
    }

    #[test]
    fn gradient_is_additive_over_tokens() {
        let p = PolicyParams::init(small_shape(17), 12).unwrap();
        let c = ctx(&[10, 12], &[0, 11]);
        let both = p.grad_log_prob(&c, &[Token(13), Token(1)]).unwrap();
        let mut parts = p.grad_log_prob(&c, &[Token(13)]).unwrap();
        parts.add_assign(&p.grad_log_prob(&ctx(&[10, 12], &[0, 11, 13]), &[Token(1)]).unwrap());
        assert!(both.max_abs_diff(&parts) < 1e-12);
    }

    #[test]
    fn saturated_token_has_tiny_gradient() {
        let mut p = PolicyParams::zeros(small_shape(13)).unwrap();
        let l = p.shape.layout();
        p.data[l.b_out + 7] = 60.0;
        let g = p.grad_log_prob(&ctx(&[5], &[]), &[Token(7)]).unwrap();
        assert!(g.norm() < 1e-20);
    }

    #[test]
    fn checkpoint_round_trip_and_vocab_guard() {
        let p = PolicyParams::init(small_shape(13), 8).unwrap();
        let h = VocabHash("abc".into());
        let text = p.to_checkpoint(&h).unwrap();
        assert_eq!(PolicyParams::from_checkpoint(&text, &h).unwrap(), p);
        assert!(matches!(
            PolicyParams::from_checkpoint(&text, &VocabHash("xyz".into())),
            Err(CheckpointError::VocabMismatch { .. })
        ));
    }
}
