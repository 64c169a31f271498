// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    CapturePosition, CaptureSet, Generation, InjectionSpec, LanguageModel, ModelConfig,
    PlantedEffects, PositionScope, TokenId, Tokenizer, EOS, MAX_NEW_TOKENS, NEWLINE,
};
use crate::error::{Error, Result};
use crate::game::{
    self, Factor, Gender, Instruction, Meeting, PromptTemplate, TrialConfig, DICTATOR_KEY,
    RECIPIENT_KEY, TRANSFER_KEY,
};
use crate::vecspace::Vector;

const HEAD_DIM: usize = 16;
const MAX_POSITIONS: usize = 256;
const NORM_EPS: f64 = 1e-6;
/// Rough norm of each random sublayer's output at initialization.
const SUBLAYER_SCALE: f64 = 0.5;
const POSITION_SCALE: f64 = 0.3;
/// Attention logit gap between salient and non-salient tokens in the
/// persona reader head.
const SALIENCE_SHARPNESS: f64 = 30.0;

// Slots of the reserved orthonormal frame.
const SLOT_DECISION: usize = 4;
const SLOT_SALIENCE: usize = 5;
const SLOT_BIAS: usize = 6;
const RESERVED: usize = 7;

/// Row-major dense matrix.
#[derive(Debug, Clone)]
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn gaussian(rows: usize, cols: usize, sd: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (r, o) in out.iter_mut().enumerate().take(self.rows) {
            *o = dot(self.row(r), x);
        }
    }

    /// `out += self * x`.
    fn matvec_add(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate().take(self.rows) {
            *o += dot(self.row(r), x);
        }
    }

    /// Removes the unit direction `w` from every column (the output space).
    fn remove_output_direction(&mut self, w: &[f64]) {
        debug_assert_eq!(w.len(), self.rows);
        for _ in 0..2 {
            for c in 0..self.cols {
                let s: f64 = (0..self.rows).map(|r| w[r] * self.data[r * self.cols + c]).sum();
                for (r, wr) in w.iter().enumerate() {
                    self.data[r * self.cols + c] -= s * wr;
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn rms_norm(x: &[f64], out: &mut [f64]) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    for (o, v) in out.iter_mut().zip(x) {
        *o = v * inv;
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Removes the span of an orthonormal frame from `v`.
fn remove_frame(v: &mut [f64], frame: &[Vec<f64>]) {
    for _ in 0..2 {
        for e in frame {
            let c = dot(v, e);
            for (x, ei) in v.iter_mut().zip(e) {
                *x -= c * ei;
            }
        }
    }
}

/// Orthonormal frame of `n` random directions (modified Gram-Schmidt).
fn random_frame(dim: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(n);
    while frame.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        remove_frame(&mut v, &frame);
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        frame.push(v);
    }
    frame
}

/// Fixed head of block 1 that reads the persona and context tokens.
#[derive(Debug, Clone)]
struct PersonaReader {
    query: Vec<f64>,
    key: Vec<f64>,
    value: Mat,
    output: Mat,
}

#[derive(Debug, Clone)]
struct Block {
    n_heads: usize,
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
    w1: Mat,
    b1: Vec<f64>,
    w2: Mat,
    reader: Option<PersonaReader>,
}

#[derive(Debug, Default, Clone)]
struct BlockCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    reader_keys: Vec<f64>,
    reader_values: Vec<f64>,
    len: usize,
}

struct Scratch {
    normed: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    ctx: Vec<f64>,
    scores: Vec<f64>,
    hidden: Vec<f64>,
    attn_out: Vec<f64>,
    reader_v: Vec<f64>,
    reader_ctx: Vec<f64>,
}

impl Scratch {
    fn new(d: usize, inner: usize, ffn: usize) -> Self {
        Self {
            normed: vec![0.0; d],
            q: vec![0.0; inner],
            k: vec![0.0; inner],
            v: vec![0.0; inner],
            ctx: vec![0.0; inner],
            scores: Vec::with_capacity(MAX_POSITIONS),
            hidden: vec![0.0; ffn],
            attn_out: vec![0.0; d],
            reader_v: vec![0.0; 4],
            reader_ctx: vec![0.0; 4],
        }
    }
}

impl Block {
    fn inner(&self) -> usize {
        self.n_heads * HEAD_DIM
    }

    /// Runs one position through the block, updating `x` in place.
    fn forward(&self, x: &mut [f64], cache: &mut BlockCache, s: &mut Scratch) {
        let inner = self.inner();
        let t = cache.len;

        rms_norm(x, &mut s.normed);
        self.wq.matvec(&s.normed, &mut s.q);
        self.wk.matvec(&s.normed, &mut s.k);
        self.wv.matvec(&s.normed, &mut s.v);
        cache.keys.extend_from_slice(&s.k);
        cache.values.extend_from_slice(&s.v);

        let scale = 1.0 / (HEAD_DIM as f64).sqrt();
        for h in 0..self.n_heads {
            let hs = h * HEAD_DIM..(h + 1) * HEAD_DIM;
            s.scores.clear();
            for j in 0..=t {
                let kj = &cache.keys[j * inner..(j + 1) * inner];
                s.scores.push(dot(&s.q[hs.clone()], &kj[hs.clone()]) * scale);
            }
            softmax_in_place(&mut s.scores);
            let ctx = &mut s.ctx[hs.clone()];
            ctx.iter_mut().for_each(|c| *c = 0.0);
            for (j, a) in s.scores.iter().enumerate() {
                let vj = &cache.values[j * inner + hs.start..j * inner + hs.end];
                for (c, v) in ctx.iter_mut().zip(vj) {
                    *c += a * v;
                }
            }
        }
        self.wo.matvec(&s.ctx, &mut s.attn_out);

        if let Some(reader) = &self.reader {
            let q = dot(&reader.query, x);
            cache.reader_keys.push(dot(&reader.key, x));
            reader.value.matvec(x, &mut s.reader_v);
            cache.reader_values.extend_from_slice(&s.reader_v);
            s.scores.clear();
            s.scores.extend(cache.reader_keys.iter().map(|k| q * k));
            softmax_in_place(&mut s.scores);
            s.reader_ctx.iter_mut().for_each(|c| *c = 0.0);
            for (j, a) in s.scores.iter().enumerate() {
                for (c, v) in s.reader_ctx.iter_mut().zip(&cache.reader_values[j * 4..j * 4 + 4]) {
                    *c += a * v;
                }
            }
            reader.output.matvec_add(&s.reader_ctx, &mut s.attn_out);
        }

        for (xi, a) in x.iter_mut().zip(&s.attn_out) {
            *xi += a;
        }

        rms_norm(x, &mut s.normed);
        self.w1.matvec(&s.normed, &mut s.hidden);
        for (h, b) in s.hidden.iter_mut().zip(&self.b1) {
            *h = gelu(*h + b);
        }
        self.w2.matvec_add(&s.hidden, x);
        cache.len += 1;
    }
}

/// Structured response slots emitted by the decoding head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    TransferKey,
    Decision,
    Newline,
    DictatorKey,
    DictatorValue,
    RecipientKey,
    RecipientValue,
    End,
}

#[derive(Debug, Clone)]
struct SpecialTokens {
    transfer: TokenId,
    dictator: TokenId,
    recipient: TokenId,
    newline: TokenId,
    eos: TokenId,
}

/// The planted toy transformer.
#[derive(Debug, Clone)]
pub struct ToyTransformer {
    config: ModelConfig,
    tokenizer: Tokenizer,
    embeddings: Mat,
    positions: Mat,
    blocks: Vec<Block>,
    frame: Vec<Vec<f64>>,
    planted: PlantedEffects,
    decision_bias: f64,
    special: SpecialTokens,
    salient_per_prompt: usize,
}

/// Planted component of a token along its factor's direction, if salient.
fn salient_component(word: &str, gains: &[f64; 4]) -> Option<(Factor, f64)> {
    let half = |f: Factor| gains[f.index()] / 2.0;
    match word {
        "female" => Some((Factor::Female, half(Factor::Female))),
        "male" => Some((Factor::Female, -half(Factor::Female))),
        "give" => Some((Factor::GiveTake, half(Factor::GiveTake))),
        "take" => Some((Factor::GiveTake, -half(Factor::GiveTake))),
        "meet" => Some((Factor::Meet, half(Factor::Meet))),
        "stranger" => Some((Factor::Meet, -half(Factor::Meet))),
        _ => match word.parse::<i64>() {
            Ok(n) if (i64::from(game::MIN_AGE)..=i64::from(game::MAX_AGE)).contains(&n) => Some((
                Factor::Age,
                gains[Factor::Age.index()] * (n as f64 - 40.0) / 10.0,
            )),
            _ => None,
        },
    }
}

/// Contrast along `u_X` per unit of the regression coding.
fn coding_step(f: Factor, gains: &[f64; 4]) -> f64 {
    match f {
        Factor::Age => gains[f.index()] / 10.0,
        _ => gains[f.index()],
    }
}

impl ToyTransformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let big_l = config.num_layers;
        let pc = &config.planted;
        let tokenizer = Tokenizer::for_template(PromptTemplate::builtin());

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let frame = random_frame(d, RESERVED, &mut rng);
        let decision = frame[SLOT_DECISION].clone();

        // Token and position embeddings.
        rng.set_stream(2);
        let mut embeddings = Mat::zeros(tokenizer.len(), d);
        for id in 0..tokenizer.len() {
            let mut e: Vec<f64> = (0..d)
                .map(|_| rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt())
                .collect();
            remove_frame(&mut e, &frame);
            for (x, b) in e.iter_mut().zip(&frame[SLOT_BIAS]) {
                *x += b;
            }
            if let Some((f, c)) = salient_component(tokenizer.word(id as TokenId), &pc.gains) {
                for ((x, s), u) in e.iter_mut().zip(&frame[SLOT_SALIENCE]).zip(&frame[f.index()]) {
                    *x += s + c * u;
                }
            }
            embeddings.data[id * d..(id + 1) * d].copy_from_slice(&e);
        }
        rng.set_stream(3);
        let mut positions = Mat::zeros(MAX_POSITIONS, d);
        for p in 0..MAX_POSITIONS {
            let mut e: Vec<f64> = (0..d)
                .map(|_| POSITION_SCALE * rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt())
                .collect();
            remove_frame(&mut e, &frame);
            positions.data[p * d..(p + 1) * d].copy_from_slice(&e);
        }

        // The reader head's attention is flat over salient tokens, so its
        // output gain must undo the averaging; the count is a template
        // constant, checked across every framing/meeting combination.
        let salient_per_prompt = {
            let mut counts = Vec::new();
            for instruction in [Instruction::Give, Instruction::Take] {
                for meeting in [Meeting::Meet, Meeting::Stranger] {
                    let cfg = TrialConfig {
                        gender: Gender::Male,
                        age: 33,
                        instruction,
                        meeting,
                        trial_seed: 0,
                    };
                    let n = game::build_prompt(&cfg)
                        .split_whitespace()
                        .filter(|w| salient_component(w, &[1.0; 4]).is_some())
                        .count();
                    counts.push(n);
                }
            }
            if counts.iter().any(|&c| c != counts[0]) || counts[0] == 0 {
                return Err(Error::Config(format!(
                    "prompt template has a variable number of persona tokens: {counts:?}"
                )));
            }
            counts[0]
        };
        let gain = salient_per_prompt as f64;

        let n_heads = (d / HEAD_DIM).max(1);
        let inner = n_heads * HEAD_DIM;
        let ffn = 2 * d;
        let mut blocks = Vec::with_capacity(big_l);
        for b in 0..big_l {
            rng.set_stream(100 + b as u64);
            let in_sd = 1.0 / (d as f64).sqrt();
            let wq = Mat::gaussian(inner, d, in_sd, &mut rng);
            let wk = Mat::gaussian(inner, d, in_sd, &mut rng);
            let wv = Mat::gaussian(inner, d, in_sd, &mut rng);
            let mut wo = Mat::gaussian(d, inner, SUBLAYER_SCALE / ((d * inner) as f64).sqrt(), &mut rng);
            let w1 = Mat::gaussian(ffn, d, in_sd, &mut rng);
            let b1 = vec![0.0; ffn];
            let mut w2 = Mat::gaussian(d, ffn, SUBLAYER_SCALE / ((d * ffn) as f64).sqrt(), &mut rng);
            wo.remove_output_direction(&decision);
            w2.remove_output_direction(&decision);

            let reader = (b == 0).then(|| {
                let sharp = SALIENCE_SHARPNESS.sqrt();
                let query = frame[SLOT_BIAS].iter().map(|x| sharp * x).collect();
                let key = frame[SLOT_SALIENCE].iter().map(|x| sharp * x).collect();
                let mut value = Mat::zeros(4, d);
                let mut output = Mat::zeros(d, 4);
                for f in Factor::ALL {
                    let i = f.index();
                    value.data[i * d..(i + 1) * d].copy_from_slice(&frame[i]);
                    let step = coding_step(f, &pc.gains);
                    let write = if step == 0.0 { 0.0 } else { gain * pc.weights[i] / step };
                    for r in 0..d {
                        output.data[r * 4 + i] = gain * frame[i][r] + write * decision[r];
                    }
                }
                PersonaReader {
                    query,
                    key,
                    value,
                    output,
                }
            });

            blocks.push(Block {
                n_heads,
                wq,
                wk,
                wv,
                wo,
                w1,
                b1,
                w2,
                reader,
            });
        }

        let special = SpecialTokens {
            transfer: tokenizer.id(TRANSFER_KEY)?,
            dictator: tokenizer.id(DICTATOR_KEY)?,
            recipient: tokenizer.id(RECIPIENT_KEY)?,
            newline: tokenizer.id(NEWLINE)?,
            eos: tokenizer.id(EOS)?,
        };

        let to_vector = |v: &Vec<f64>| Vector::new(v.clone());
        let planted = PlantedEffects {
            factor_directions: [
                to_vector(&frame[0])?,
                to_vector(&frame[1])?,
                to_vector(&frame[2])?,
                to_vector(&frame[3])?,
            ],
            decision_direction: to_vector(&decision)?,
            weights: pc.weights,
            intercept: pc.intercept,
            gains: pc.gains,
            noise_sd: pc.noise_sd,
            logic_fail_rate: pc.logic_fail_rate,
            planting_layer: 1,
        };

        let mut model = Self {
            config,
            tokenizer,
            embeddings,
            positions,
            blocks,
            frame,
            planted,
            decision_bias: 0.0,
            special,
            salient_per_prompt,
        };

        // Calibrate the decision bias on a reference persona so the
        // log-odds match the planted intercept exactly.
        let reference = TrialConfig {
            gender: Gender::Male,
            age: 40,
            instruction: Instruction::Take,
            meeting: Meeting::Stranger,
            trial_seed: 0,
        };
        let ids = model.tokenizer.encode(&game::build_prompt(&reference))?;
        let raw = model.decision_readout(&ids)?;
        let target = model.planted.log_odds(false, false, false, 40.0);
        model.decision_bias = target - raw;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn planted(&self) -> &PlantedEffects {
        &self.planted
    }

    /// Number of salient tokens in every rendered prompt.
    pub fn salient_tokens_per_prompt(&self) -> usize {
        self.salient_per_prompt
    }

    /// Un-biased `w_D . r^(L)` at the decision slot, without noise or injection.
    fn decision_readout(&self, prompt: &[TokenId]) -> Result<f64> {
        let mut run = Run::new(self, None, 0, false);
        for (pos, &tok) in prompt.iter().enumerate() {
            run.step(tok, pos, false);
        }
        run.step(self.special.transfer, prompt.len(), true);
        Ok(dot(&run.x, &self.frame[SLOT_DECISION]))
    }

    fn check_inputs(&self, prompt: &[TokenId], injection: Option<&InjectionSpec>) -> Result<()> {
        if prompt.is_empty() {
            return Err(Error::Contract("empty prompt".into()));
        }
        if let Some(&bad) = prompt.iter().find(|&&t| t as usize >= self.tokenizer.len()) {
            return Err(Error::Tokenization(format!("token id {bad}")));
        }
        if prompt.len() + MAX_NEW_TOKENS > MAX_POSITIONS {
            return Err(Error::Contract(format!(
                "prompt of {} tokens leaves no room for {MAX_NEW_TOKENS} new tokens",
                prompt.len()
            )));
        }
        if let Some(inj) = injection {
            if inj.layer == 0 || inj.layer >= self.config.num_layers {
                return Err(Error::Contract(format!(
                    "injection layer {} outside 1..={}",
                    inj.layer,
                    self.config.num_layers - 1
                )));
            }
            if inj.vector.dim() != self.config.hidden_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.config.hidden_dim,
                    actual: inj.vector.dim(),
                });
            }
        }
        Ok(())
    }
}

/// Per-generation state: KV caches, RNG and the live residual.
struct Run<'m> {
    model: &'m ToyTransformer,
    caches: Vec<BlockCache>,
    scratch: Scratch,
    rng: ChaCha8Rng,
    injection: Option<(usize, Vec<f64>, PositionScope)>,
    noise: bool,
    x: Vec<f64>,
    noise_buf: Vec<f64>,
}

impl<'m> Run<'m> {
    fn new(model: &'m ToyTransformer, injection: Option<&InjectionSpec>, seed: u64, noise: bool) -> Self {
        let d = model.config.hidden_dim;
        let inner = model.blocks[0].inner();
        let injection = injection.map(|inj| {
            let delta = inj.vector.as_slice().iter().map(|v| inj.alpha * v).collect();
            (inj.layer, delta, inj.scope)
        });
        Self {
            model,
            caches: vec![BlockCache::default(); model.blocks.len()],
            scratch: Scratch::new(d, inner, 2 * d),
            rng: ChaCha8Rng::seed_from_u64(seed),
            injection,
            noise: noise && model.config.planted.noise_sd > 0.0,
            x: vec![0.0; d],
            noise_buf: vec![0.0; d],
        }
    }

    /// Feeds one token; afterwards `self.x` holds `r^(L)` at `pos`.
    /// `observe(layer, stream)` sees every post-hook stream.
    fn step_observed(
        &mut self,
        token: TokenId,
        pos: usize,
        generated: bool,
        mut observe: impl FnMut(usize, &[f64]),
    ) {
        let d = self.model.config.hidden_dim;
        let emb = &self.model.embeddings.data[token as usize * d..(token as usize + 1) * d];
        let pe = self.model.positions.row(pos);
        for ((x, e), p) in self.x.iter_mut().zip(emb).zip(pe) {
            *x = e + p;
        }
        if self.noise {
            let sd = self.model.config.planted.noise_sd;
            for n in self.noise_buf.iter_mut() {
                *n = sd * self.rng.sample::<f64, _>(StandardNormal);
            }
            remove_frame(&mut self.noise_buf, &self.model.frame);
            for (x, n) in self.x.iter_mut().zip(&self.noise_buf) {
                *x += n;
            }
        }
        for (b, block) in self.model.blocks.iter().enumerate() {
            block.forward(&mut self.x, &mut self.caches[b], &mut self.scratch);
            let layer = b + 1;
            if let Some((l, delta, scope)) = &self.injection {
                if *l == layer && (generated || *scope == PositionScope::AllPositions) {
                    for (x, dlt) in self.x.iter_mut().zip(delta) {
                        *x += dlt;
                    }
                }
            }
            observe(layer, &self.x);
        }
    }

    fn step(&mut self, token: TokenId, pos: usize, generated: bool) {
        self.step_observed(token, pos, generated, |_, _| {});
    }

    /// Gumbel-max choice over finite-logit candidates.
    fn choose(&mut self, candidates: &[(TokenId, f64)]) -> TokenId {
        let live: Vec<_> = candidates.iter().filter(|(_, l)| l.is_finite()).collect();
        if live.len() == 1 {
            return live[0].0;
        }
        let mut best = (live[0].0, f64::NEG_INFINITY);
        for &&(tok, logit) in &live {
            let u: f64 = self.rng.sample(Open01);
            let g = logit - (-u.ln()).ln();
            if g > best.1 {
                best = (tok, g);
            }
        }
        best.0
    }
}

impl LanguageModel for ToyTransformer {
    fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn config_hash(&self) -> String {
        self.config.hash()
    }

    fn generate_with_capture(
        &self,
        prompt: &[TokenId],
        injection: Option<&InjectionSpec>,
        capture: CapturePosition,
        seed: u64,
    ) -> Result<Generation> {
        self.check_inputs(prompt, injection)?;
        let d = self.config.hidden_dim;
        let big_l = self.config.num_layers;
        let mut run = Run::new(self, injection, seed, true);
        let mut captured = vec![vec![0.0; d]; big_l];

        let last = prompt.len() - 1;
        for (pos, &tok) in prompt.iter().enumerate() {
            let keep = match capture {
                CapturePosition::LastPromptToken => pos == last,
                CapturePosition::MeanPrompt => true,
                CapturePosition::FirstGenerated => false,
            };
            run.step_observed(tok, pos, false, |layer, x| {
                if keep {
                    for (c, v) in captured[layer - 1].iter_mut().zip(x) {
                        *c += v;
                    }
                }
            });
        }
        if capture == CapturePosition::MeanPrompt {
            let inv = 1.0 / prompt.len() as f64;
            captured.iter_mut().flatten().for_each(|c| *c *= inv);
        }

        let words = |n: i32| self.tokenizer.id(&n.to_string());
        let fail = self.config.planted.logic_fail_rate;
        let mut generated: Vec<TokenId> = Vec::new();
        let mut slot = Slot::TransferKey;
        let mut decision: Option<i32> = None;
        let mut decision_log_odds = None;
        while generated.len() < MAX_NEW_TOKENS {
            let cands: Vec<(TokenId, f64)> = match slot {
                Slot::TransferKey => vec![(self.special.transfer, 0.0)],
                Slot::Decision => {
                    let lo = dot(&run.x, &self.frame[SLOT_DECISION]) + self.decision_bias;
                    decision_log_odds = Some(lo);
                    vec![(words(0)?, 0.0), (words(10)?, lo)]
                }
                Slot::Newline => vec![(self.special.newline, 0.0)],
                Slot::DictatorKey => vec![(self.special.dictator, 0.0)],
                Slot::DictatorValue => {
                    let dd = decision.unwrap_or(0);
                    let (right, _) = game::payoffs(dd);
                    // Slip: the transferable pool is forgotten.
                    let wrong = game::ENDOWMENT - dd;
                    vec![(words(right)?, (1.0 - fail).ln()), (words(wrong)?, fail.ln())]
                }
                Slot::RecipientKey => vec![(self.special.recipient, 0.0)],
                Slot::RecipientValue => {
                    vec![(words(game::payoffs(decision.unwrap_or(0)).1)?, 0.0)]
                }
                Slot::End => vec![(self.special.eos, 0.0)],
            };
            let tok = run.choose(&cands);
            generated.push(tok);
            if slot == Slot::Decision {
                decision = self.tokenizer.word(tok).parse().ok();
            }
            if tok == self.special.eos {
                break;
            }
            let pos = prompt.len() + generated.len() - 1;
            let first = generated.len() == 1;
            run.step_observed(tok, pos, true, |layer, x| {
                if first && capture == CapturePosition::FirstGenerated {
                    captured[layer - 1].copy_from_slice(x);
                }
            });
            slot = match slot {
                Slot::TransferKey => Slot::Decision,
                Slot::Decision => Slot::Newline,
                Slot::Newline => Slot::DictatorKey,
                Slot::DictatorKey => Slot::DictatorValue,
                Slot::DictatorValue => Slot::RecipientKey,
                Slot::RecipientKey => Slot::RecipientValue,
                Slot::RecipientValue | Slot::End => Slot::End,
            };
        }
        let captures = CaptureSet {
            position: capture,
            layers: captured
                .into_iter()
                .map(Vector::new)
                .collect::<Result<_>>()?,
        };
        Ok(Generation {
            text: self.tokenizer.decode(&generated),
            tokens: generated,
            captures,
            decision_log_odds,
        })
    }
}
