//! Autoregressive motion-token generator conditioned on text.
//!
//! The sequence fed to the network is `w` text-prompt tokens (byte-level,
//! with a learned embedding standing in for a large text encoder) followed
//! by `n` motion tokens. Attention is mixed: text positions attend all
//! text positions bidirectionally, motion positions attend all text plus
//! motion positions up to and including themselves, and text never attends
//! motion. Each block is two RMS-norms around masked multi-head attention
//! and a feedforward network, with residual connections; a classification
//! head over the motion vocabulary reads the motion positions.
//!
//! Motion token ids reserve PAD=0, BOS=1, EOS=2; tokenizer codes are
//! offset by 3.

use crate::diffcore::{
    adam_step, checkpoint, normal_init, AdamConfig, AdamState, DiffError, ParamSet, Real, Tape,
    Tensor, TensorRef,
};
use crate::fsq::{FsqError, TokenSequence, TokenizerModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Number of reserved special ids before tokenizer codes.
pub const SPECIALS: usize = 3;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("motion length {got} exceeds configured max {max}")]
    MotionTooLong { got: usize, max: usize },
    #[error("text length {got} exceeds configured max {max}")]
    TextTooLong { got: usize, max: usize },
    #[error("motion sequence must be nonempty")]
    EmptyMotion,
    #[error("token id {id} exceeds vocabulary {vocab}")]
    VocabOverflow { id: usize, vocab: usize },
    #[error("width {width} not divisible by {heads} heads")]
    BadHeads { width: usize, heads: usize },
    #[error("tokenizer config hash mismatch: generator was trained against {expected}, got {got}")]
    TokenizerMismatch { expected: String, got: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("generation produced no tokens before EOS")]
    EmptyGeneration,
    #[error("checkpoint error: {0}")]
    File(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Fsq(#[from] FsqError),
}

/// Generator geometry. The motion vocabulary excludes the specials; the
/// embedding and head cover `motion_vocab + SPECIALS` ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub motion_vocab: usize,
    pub text_vocab: usize,
    pub max_text_len: usize,
    pub max_motion_len: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 256,
            heads: 4,
            ffn_expansion: 4,
            motion_vocab: 64000,
            text_vocab: 256,
            max_text_len: 64,
            max_motion_len: 64,
        }
    }
}

impl GenConfig {
    /// Full motion-side vocabulary including the specials.
    pub fn full_vocab(&self) -> usize {
        self.motion_vocab + SPECIALS
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.width % self.heads != 0 {
            return Err(GenError::BadHeads {
                width: self.width,
                heads: self.heads,
            });
        }
        Ok(())
    }
}

/// Text prompt: raw string plus its byte-level token ids, truncated to the
/// configured maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub ids: Vec<usize>,
}

/// Byte-level tokenization; deterministic, truncates to `max_len`.
pub fn tokenize_text(text: &str, max_len: usize) -> Prompt {
    let ids = text.bytes().take(max_len).map(|b| b as usize).collect();
    Prompt {
        text: text.to_string(),
        ids,
    }
}

/// Boolean attend/block matrix over `w` text plus `n` motion positions.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridMask {
    pub w: usize,
    pub n: usize,
    /// Row-major `(w+n) x (w+n)`; true means "may attend".
    pub allow: Vec<bool>,
}

/// Text rows attend all text columns and no motion; motion row `i` attends
/// all text plus motion columns `0..=i`.
pub fn build_hybrid_mask(w: usize, n: usize) -> Result<HybridMask, GenError> {
    if n == 0 {
        return Err(GenError::EmptyMotion);
    }
    let t = w + n;
    let mut allow = vec![false; t * t];
    for row in 0..t {
        for col in 0..t {
            let ok = if row < w {
                col < w
            } else {
                col < w || col <= row
            };
            allow[row * t + col] = ok;
        }
    }
    Ok(HybridMask { w, n, allow })
}

/// Shapes of every parameter, in canonical order.
fn param_layout(config: &GenConfig) -> Vec<(String, Vec<usize>)> {
    let w = config.width;
    let mut out = vec![
        ("text.embed".to_string(), vec![config.text_vocab, w]),
        ("text.pos".to_string(), vec![config.max_text_len, w]),
        ("motion.embed".to_string(), vec![config.full_vocab(), w]),
        ("motion.pos".to_string(), vec![config.max_motion_len + 1, w]),
    ];
    for l in 0..config.layers {
        out.push((format!("layer{l}.norm1.gain"), vec![w]));
        out.push((format!("layer{l}.attn.wq"), vec![w, w]));
        out.push((format!("layer{l}.attn.wk"), vec![w, w]));
        out.push((format!("layer{l}.attn.wv"), vec![w, w]));
        out.push((format!("layer{l}.attn.wo"), vec![w, w]));
        out.push((format!("layer{l}.norm2.gain"), vec![w]));
        out.push((format!("layer{l}.ffn.w1"), vec![w, w * config.ffn_expansion]));
        out.push((format!("layer{l}.ffn.w2"), vec![w * config.ffn_expansion, w]));
    }
    out.push(("final.gain".to_string(), vec![w]));
    out.push(("head.w".to_string(), vec![w, config.full_vocab()]));
    out
}

/// Position lookup for the canonical parameter order.
struct ParamIndex {
    map: HashMap<String, usize>,
}

impl ParamIndex {
    fn new(config: &GenConfig) -> Self {
        let map = param_layout(config)
            .into_iter()
            .enumerate()
            .map(|(i, (name, _))| (name, i))
            .collect();
        Self { map }
    }

    fn get(&self, name: &str) -> usize {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }
}

/// Generic forward pass through the hybrid-attention stack. `refs` must
/// hold tape handles for every parameter in canonical order. Returns
/// logits of shape `n x full_vocab` for the motion positions.
fn hybrid_forward<T: Real>(
    tape: &mut Tape<T>,
    config: &GenConfig,
    index: &ParamIndex,
    refs: &[TensorRef],
    prompt_ids: &[usize],
    motion_ids: &[usize],
) -> Result<TensorRef, GenError> {
    let w = prompt_ids.len();
    let n = motion_ids.len();
    if n == 0 {
        return Err(GenError::EmptyMotion);
    }
    if w > config.max_text_len {
        return Err(GenError::TextTooLong {
            got: w,
            max: config.max_text_len,
        });
    }
    if n > config.max_motion_len + 1 {
        return Err(GenError::MotionTooLong {
            got: n,
            max: config.max_motion_len + 1,
        });
    }
    for &id in prompt_ids {
        if id >= config.text_vocab {
            return Err(GenError::VocabOverflow {
                id,
                vocab: config.text_vocab,
            });
        }
    }
    for &id in motion_ids {
        if id >= config.full_vocab() {
            return Err(GenError::VocabOverflow {
                id,
                vocab: config.full_vocab(),
            });
        }
    }

    let p = |name: &str| refs[index.get(name)];

    // Embeddings plus learned positions.
    let motion_emb = tape.embedding(p("motion.embed"), motion_ids)?;
    let motion_pos = tape.slice_rows(p("motion.pos"), 0, n)?;
    let motion_x = tape.add(motion_emb, motion_pos)?;
    let mut x = if w > 0 {
        let text_emb = tape.embedding(p("text.embed"), prompt_ids)?;
        let text_pos = tape.slice_rows(p("text.pos"), 0, w)?;
        let text_x = tape.add(text_emb, text_pos)?;
        tape.concat_rows(text_x, motion_x)?
    } else {
        motion_x
    };

    let mask = build_hybrid_mask(w, n)?;
    let heads = config.heads;
    let dh = config.width / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    for l in 0..config.layers {
        let h1 = tape.rms_norm(x, p(&format!("layer{l}.norm1.gain")))?;
        let q = tape.matmul(h1, p(&format!("layer{l}.attn.wq")))?;
        let k = tape.matmul(h1, p(&format!("layer{l}.attn.wk")))?;
        let v = tape.matmul(h1, p(&format!("layer{l}.attn.wv")))?;
        let wo = p(&format!("layer{l}.attn.wo"));
        let mut attn_out: Option<TensorRef> = None;
        for head in 0..heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, scale);
            let masked = tape.add_mask(scaled, &mask.allow)?;
            let probs = tape.softmax(masked)?;
            let oh = tape.matmul(probs, vh)?;
            // Project each head through its slice of the output matrix and
            // accumulate: equivalent to concatenating heads then one matmul.
            let wo_h = tape.slice_rows(wo, head * dh, dh)?;
            let projected = tape.matmul(oh, wo_h)?;
            attn_out = Some(match attn_out {
                None => projected,
                Some(acc) => tape.add(acc, projected)?,
            });
        }
        x = tape.add(x, attn_out.expect("at least one head"))?;

        let h2 = tape.rms_norm(x, p(&format!("layer{l}.norm2.gain")))?;
        let f1 = tape.matmul(h2, p(&format!("layer{l}.ffn.w1")))?;
        let a = tape.gelu(f1);
        let f2 = tape.matmul(a, p(&format!("layer{l}.ffn.w2")))?;
        x = tape.add(x, f2)?;
    }

    let normed = tape.rms_norm(x, p("final.gain"))?;
    let motion_rows = tape.slice_rows(normed, w, n)?;
    Ok(tape.matmul(motion_rows, p("head.w"))?)
}

fn init_params<T: Real>(config: &GenConfig, seed: u64) -> ParamSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape) in param_layout(config) {
        let tensor = if name.ends_with(".gain") {
            Tensor::from_f64s(shape.clone(), &vec![1.0; shape.iter().product()]).unwrap()
        } else {
            normal_init(&mut rng, shape, 0.02)
        };
        params.insert(&name, tensor);
    }
    params
}

/// Trainable generator bound to one tokenizer config by hash.
#[derive(Debug, Clone)]
pub struct GeneratorModel {
    pub config: GenConfig,
    pub tokenizer_hash: String,
    pub params: ParamSet<f32>,
    pub seed: u64,
    pub step: usize,
}

impl GeneratorModel {
    pub fn new(config: GenConfig, tokenizer_hash: &str, seed: u64) -> Result<Self, GenError> {
        config.validate()?;
        let params = init_params::<f32>(&config, seed);
        Ok(Self {
            config,
            tokenizer_hash: tokenizer_hash.to_string(),
            params,
            seed,
            step: 0,
        })
    }

    /// Logits over the motion vocabulary at every motion position.
    /// `motion_ids` is the shifted input stream (BOS followed by codes).
    pub fn forward_logits(
        &self,
        prompt_ids: &[usize],
        motion_ids: &[usize],
    ) -> Result<Tensor<f32>, GenError> {
        let mut tape = Tape::new();
        let index = ParamIndex::new(&self.config);
        let refs: Vec<TensorRef> = (0..self.params.len())
            .map(|i| tape.leaf(self.params.at(i).clone()))
            .collect();
        let logits = hybrid_forward(
            &mut tape,
            &self.config,
            &index,
            &refs,
            prompt_ids,
            motion_ids,
        )?;
        Ok(tape.value(logits).clone())
    }
}

/// Shifted next-token view of a code sequence: the network reads
/// `[BOS, c1.., ck]` and is trained to emit `[c1.., ck, EOS]`.
pub fn teacher_forcing_ids(codes: &[u64]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(codes.len() + 1);
    let mut target = Vec::with_capacity(codes.len() + 1);
    input.push(BOS);
    for &c in codes {
        input.push(c as usize + SPECIALS);
        target.push(c as usize + SPECIALS);
    }
    target.push(EOS);
    (input, target)
}

/// Mean cross-entropy of logits against target ids, PAD rows excluded.
pub fn ce_loss(logits: &Tensor<f32>, targets: &[usize]) -> Result<f64, GenError> {
    let mut tape = Tape::<f32>::new();
    let l = tape.leaf(logits.clone());
    let loss = tape.cross_entropy(l, targets, Some(PAD))?;
    Ok(tape.value(loss).data[0] as f64)
}

/// One text-motion training pair.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub prompt: Prompt,
    pub tokens: TokenSequence,
}

/// Minimizes next-token cross-entropy over the paired corpus, cycling
/// round-robin. Aborts on a non-finite loss with the failing step index.
pub fn train_generator(
    model: &mut GeneratorModel,
    corpus: &[TrainPair],
    optimizer: &AdamConfig,
    steps: usize,
) -> Result<Vec<f64>, GenError> {
    if corpus.is_empty() {
        return Err(GenError::EmptyCorpus);
    }
    // Validate lengths up front so failures carry the clip context.
    for pair in corpus {
        if pair.tokens.indices.is_empty() {
            return Err(GenError::EmptyMotion);
        }
        if pair.tokens.indices.len() > model.config.max_motion_len {
            return Err(GenError::MotionTooLong {
                got: pair.tokens.indices.len(),
                max: model.config.max_motion_len,
            });
        }
        if pair.prompt.ids.len() > model.config.max_text_len {
            return Err(GenError::TextTooLong {
                got: pair.prompt.ids.len(),
                max: model.config.max_text_len,
            });
        }
    }
    let index = ParamIndex::new(&model.config);
    let mut adam = AdamState::new(&model.params);
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let pair = &corpus[step % corpus.len()];
        let (input, target) = teacher_forcing_ids(&pair.tokens.indices);
        let mut tape = Tape::new();
        let refs: Vec<TensorRef> = (0..model.params.len())
            .map(|i| tape.leaf(model.params.at(i).clone()))
            .collect();
        let logits = hybrid_forward(
            &mut tape,
            &model.config,
            &index,
            &refs,
            &pair.prompt.ids,
            &input,
        )?;
        let loss = tape.cross_entropy(logits, &target, Some(PAD))?;
        let loss_val = tape.value(loss).data[0] as f64;
        if !loss_val.is_finite() {
            return Err(GenError::Diff(DiffError::NonFiniteLoss { step }));
        }
        curve.push(loss_val);
        tape.backward(loss)?;
        let grads: Vec<Vec<f32>> = refs.iter().map(|&r| tape.grad(r)).collect();
        adam_step(&mut model.params, &grads, &mut adam, optimizer)?;
        model.step += 1;
    }
    Ok(curve)
}

/// Decoding strategy for autoregressive sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SamplingStrategy {
    Greedy,
    Temperature { tau: f64 },
    TopK { k: usize, tau: f64 },
}

/// Sampled motion codes (raw tokenizer indices, specials stripped).
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub codes: Vec<u64>,
    /// Set when the maximum length was hit before EOS.
    pub truncated: bool,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Appends tokens one at a time until EOS or `max_len` codes. PAD and BOS
/// are barred from being emitted. Deterministic for a fixed seed.
pub fn sample_autoregressive(
    model: &GeneratorModel,
    prompt: &Prompt,
    strategy: SamplingStrategy,
    seed: u64,
    max_len: usize,
) -> Result<Sampled, GenError> {
    let max_len = max_len.min(model.config.max_motion_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stream = vec![BOS];
    let mut codes = Vec::new();
    loop {
        let logits = model.forward_logits(&prompt.ids, &stream)?;
        let vocab = model.config.full_vocab();
        let last = &logits.data[(stream.len() - 1) * vocab..stream.len() * vocab];
        let mut row: Vec<f32> = last.to_vec();
        row[PAD] = f32::NEG_INFINITY;
        row[BOS] = f32::NEG_INFINITY;
        let next = match strategy {
            SamplingStrategy::Greedy => argmax(&row),
            SamplingStrategy::Temperature { tau } => sample_softmax(&row, tau, &mut rng),
            SamplingStrategy::TopK { k, tau } => {
                let mut order: Vec<usize> = (0..row.len()).collect();
                order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
                let keep = &order[..k.max(1).min(order.len())];
                let sub: Vec<f32> = keep.iter().map(|&i| row[i]).collect();
                keep[sample_softmax(&sub, tau, &mut rng)]
            }
        };
        if next == EOS {
            return Ok(Sampled {
                codes,
                truncated: false,
            });
        }
        codes.push((next - SPECIALS) as u64);
        stream.push(next);
        if codes.len() >= max_len {
            return Ok(Sampled {
                codes,
                truncated: true,
            });
        }
    }
}

fn sample_softmax(row: &[f32], tau: f64, rng: &mut ChaCha8Rng) -> usize {
    let tau = tau.max(1e-12);
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let weights: Vec<f64> = row
        .iter()
        .map(|&v| {
            if v.is_finite() {
                ((v as f64 - max) / tau).exp()
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen_range(0.0..1.0) * total;
    for (i, &w) in weights.iter().enumerate() {
        draw -= w;
        if draw <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Text to motion, end to end: tokenize the prompt, sample motion codes,
/// decode them through the tokenizer, and integrate pose features into a
/// motion sequence at the tokenizer's native frame rate.
pub fn generate(
    model: &GeneratorModel,
    tokenizer: &TokenizerModel,
    text: &str,
    strategy: SamplingStrategy,
    seed: u64,
    skeleton: &crate::geom::Skeleton,
) -> Result<crate::repr::MotionSequence, GenError> {
    let tok_hash = tokenizer.config.hash();
    if tok_hash != model.tokenizer_hash {
        return Err(GenError::TokenizerMismatch {
            expected: model.tokenizer_hash.clone(),
            got: tok_hash,
        });
    }
    let prompt = tokenize_text(text, model.config.max_text_len);
    let sampled = sample_autoregressive(model, &prompt, strategy, seed, model.config.max_motion_len)?;
    if sampled.codes.is_empty() {
        return Err(GenError::EmptyGeneration);
    }
    let tokens = TokenSequence {
        clip_id: "generated".into(),
        frames: sampled.codes.len() * tokenizer.config.fsq.downsample,
        fps: 30.0,
        indices: sampled.codes,
    };
    let features = tokenizer.decode_tokens(&tokens)?;
    let initial_height = features.frames[0].joint_positions[0][1];
    let motion = crate::repr::decode_features(
        &features,
        [0.0, initial_height, 0.0],
        &crate::geom::RotationMatrix::IDENTITY,
        skeleton,
    )
    .map_err(|e| GenError::File(e.to_string()))?;
    Ok(motion)
}

// ---------------------------------------------------------------------------
// Paired-corpus manifest and checkpoints
// ---------------------------------------------------------------------------

/// One line of the paired-corpus manifest (newline-delimited JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairManifestEntry {
    pub clip_id: String,
    pub text: String,
    pub token_file: String,
}

pub fn write_pair_manifest(path: &Path, entries: &[PairManifestEntry]) -> Result<(), GenError> {
    let mut buf = Vec::new();
    for e in entries {
        let line = serde_json::to_vec(e).map_err(|err| GenError::File(err.to_string()))?;
        buf.extend_from_slice(&line);
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| GenError::File(e.to_string()))
}

pub fn read_pair_manifest(path: &Path) -> Result<Vec<PairManifestEntry>, GenError> {
    let text = std::fs::read_to_string(path).map_err(|e| GenError::File(e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| GenError::File(format!("manifest line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn save_generator(path: &Path, model: &GeneratorModel) -> Result<(), GenError> {
    let meta = serde_json::json!({
        "kind": "generator",
        "config": model.config,
        "tokenizer_hash": model.tokenizer_hash,
    });
    checkpoint::save(
        path,
        &model.params,
        &checkpoint::CheckpointInfo {
            seed: model.seed,
            step: model.step,
            meta,
        },
    )?;
    Ok(())
}

pub fn load_generator(path: &Path) -> Result<GeneratorModel, GenError> {
    let (params, info) = checkpoint::load(path)?;
    let config: GenConfig = serde_json::from_value(
        info.meta
            .get("config")
            .cloned()
            .ok_or_else(|| GenError::File("checkpoint missing generator config".into()))?,
    )
    .map_err(|e| GenError::File(format!("bad generator config: {e}")))?;
    let tokenizer_hash = info
        .meta
        .get("tokenizer_hash")
        .and_then(|v| v.as_str())
        .ok_or_else(|| GenError::File("checkpoint missing tokenizer hash".into()))?
        .to_string();
    Ok(GeneratorModel {
        config,
        tokenizer_hash,
        params,
        seed: info.seed,
        step: info.step,
    })
}
