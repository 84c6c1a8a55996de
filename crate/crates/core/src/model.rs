//! The toy masked denoiser.
//!
//! A one-layer attention + embedding network over a small vocabulary. Given a
//! partially masked sequence it produces, for every position, a normalized
//! log-distribution over the non-mask tokens. The mask token occupies the
//! last vocabulary id and is never a prediction target.
//!
//! The same forward builder serves full-attention evaluation, the dual-stream
//! staircase evaluation for block diffusion, and semi-autoregressive
//! confidence decoding.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::autodiff::{AttentionMask, Tape, Tensor, VarId};
use crate::diffusion::CorruptedSequence;
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::staircase;

/// Desk-scale parameter budget: the toy lab trades capacity for cheap steps.
pub const MAX_PARAM_COUNT: usize = 100_000;

/// A clean token sequence with its conditioning prefix length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, prompt_len: usize) -> Self {
        TokenSequence { tokens, prompt_len }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn response(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }

    pub fn response_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }
}

/// How the denoiser attends during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Full bidirectional attention over the corrupted sequence.
    Full,
    /// Dual-stream staircase evaluation (block diffusion).
    Staircase,
}

/// Per-position log-probabilities over non-mask tokens.
#[derive(Clone, Debug)]
pub struct LogProbTable {
    table: Tensor,
}

impl LogProbTable {
    pub fn from_tensor(table: Tensor) -> Self {
        LogProbTable { table }
    }

    pub fn positions(&self) -> usize {
        self.table.rows()
    }

    pub fn vocab(&self) -> usize {
        self.table.cols()
    }

    pub fn log_prob(&self, position: usize, token: usize) -> f64 {
        self.table.at(position, token)
    }

    pub fn row(&self, position: usize) -> &[f64] {
        let c = self.table.cols();
        &self.table.values()[position * c..(position + 1) * c]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.table
    }
}

/// Tape node ids of the registered parameters, in flatten order.
#[derive(Clone, Copy, Debug)]
pub struct ParamVarIds {
    pub embedding: VarId,
    pub pos_embed: VarId,
    pub w_query: VarId,
    pub w_key: VarId,
    pub w_value: VarId,
    pub w_out: VarId,
}

impl ParamVarIds {
    pub fn in_order(&self) -> [VarId; 6] {
        [
            self.embedding,
            self.pos_embed,
            self.w_query,
            self.w_key,
            self.w_value,
            self.w_out,
        ]
    }
}

/// Nodes of one forward pass that downstream code needs to reach.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub params: ParamVarIds,
    /// Token-embedding lookup output (per input position), before the
    /// positional term. Gradients here localize information flow per slot.
    pub token_embed: VarId,
    /// Residual stream entering the output head.
    pub hidden: VarId,
    /// Log-softmax output, one row per input position.
    pub log_probs: VarId,
}

#[derive(Clone, Debug)]
pub struct DenoiserParams {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub max_seq_len: usize,
    pub block_size: usize,
    pub seed: u64,
    pub embedding: Tensor,
    pub pos_embed: Tensor,
    pub w_query: Tensor,
    pub w_key: Tensor,
    pub w_value: Tensor,
    pub w_out: Tensor,
}

impl DenoiserParams {
    /// Fresh parameters: random embeddings and attention projections, all-zero
    /// output head (the initial policy is uniform over non-mask tokens).
    pub fn init(
        vocab_size: usize,
        embed_dim: usize,
        max_seq_len: usize,
        block_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if vocab_size < 3 {
            return Err(Error::validation("vocab_size must be at least 3"));
        }
        if block_size == 0 || embed_dim == 0 || max_seq_len == 0 {
            return Err(Error::validation("model dims must be positive"));
        }
        let mut rng = derive_rng(seed, "model-init");
        let d = embed_dim;
        let params = DenoiserParams {
            vocab_size,
            embed_dim,
            max_seq_len,
            block_size,
            seed,
            embedding: Tensor::randn(vec![vocab_size, d], 0.25, &mut rng),
            pos_embed: Tensor::randn(vec![max_seq_len, d], 0.25, &mut rng),
            w_query: Tensor::randn(vec![d, d], 1.0 / (d as f64).sqrt(), &mut rng),
            w_key: Tensor::randn(vec![d, d], 1.0 / (d as f64).sqrt(), &mut rng),
            w_value: Tensor::randn(vec![d, d], 1.0 / (d as f64).sqrt(), &mut rng),
            w_out: Tensor::zeros(vec![d, vocab_size - 1]),
        };
        if params.param_count() >= MAX_PARAM_COUNT {
            return Err(Error::validation(format!(
                "parameter count {} exceeds desk-scale budget {MAX_PARAM_COUNT}",
                params.param_count()
            )));
        }
        Ok(params)
    }

    /// Reserved mask token id (last id; never a prediction target).
    pub fn mask_token(&self) -> usize {
        self.vocab_size - 1
    }

    /// Number of predictable tokens (vocabulary minus the mask token).
    pub fn out_vocab(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("embedding", &self.embedding),
            ("pos_embed", &self.pos_embed),
            ("w_query", &self.w_query),
            ("w_key", &self.w_key),
            ("w_value", &self.w_value),
            ("w_out", &self.w_out),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.tensors() {
            out.extend_from_slice(t.values());
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dimension("flat parameter vector length mismatch"));
        }
        let mut offset = 0;
        for t in [
            &mut self.embedding,
            &mut self.pos_embed,
            &mut self.w_query,
            &mut self.w_key,
            &mut self.w_value,
            &mut self.w_out,
        ] {
            let n = t.len();
            t.values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Register all parameters on a tape, returning their node ids.
    pub fn register_on(&self, tape: &mut Tape) -> ParamVarIds {
        ParamVarIds {
            embedding: tape.param(self.embedding.clone()),
            pos_embed: tape.param(self.pos_embed.clone()),
            w_query: tape.param(self.w_query.clone()),
            w_key: tape.param(self.w_key.clone()),
            w_value: tape.param(self.w_value.clone()),
            w_out: tape.param(self.w_out.clone()),
        }
    }

    /// Collect parameter gradients from a tape into flatten order. Parameters
    /// untouched by the loss contribute zeros.
    pub fn gradient_flat(&self, tape: &Tape, ids: &ParamVarIds) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (id, (_, t)) in ids.in_order().iter().zip(self.tensors()) {
            match tape.grad(*id) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat(0.0).take(t.len())),
            }
        }
        out
    }

    /// One attention layer with residual connection, then the output head.
    /// Rows of the returned `log_probs` node are normalized log-distributions
    /// over non-mask tokens.
    pub fn build_forward(
        &self,
        tape: &mut Tape,
        params: &ParamVarIds,
        tokens: &[usize],
        positions: &[usize],
        mask: &AttentionMask,
    ) -> Result<ForwardNodes> {
        if tokens.len() != positions.len() {
            return Err(Error::dimension("tokens/positions length mismatch"));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.max_seq_len) {
            return Err(Error::validation(format!(
                "position {p} exceeds max_seq_len {}",
                self.max_seq_len
            )));
        }
        let token_embed = tape.embedding(params.embedding, tokens)?;
        let pos = tape.embedding(params.pos_embed, positions)?;
        let h = tape.add(token_embed, pos)?;
        let q = tape.matmul(h, params.w_query)?;
        let k = tape.matmul(h, params.w_key)?;
        let v = tape.matmul(h, params.w_value)?;
        let attn = tape.masked_attention(q, k, v, mask)?;
        let hidden = tape.add(h, attn)?;
        let logits = tape.matmul(hidden, params.w_out)?;
        let log_probs = tape.log_softmax_rows(logits)?;
        Ok(ForwardNodes {
            params: *params,
            token_embed,
            hidden,
            log_probs,
        })
    }

    /// Per-position token log-probabilities for a corrupted sequence.
    ///
    /// Rows for unmasked positions are computed too; downstream likelihood
    /// sums simply ignore them.
    pub fn token_log_probs(
        &self,
        corrupted: &CorruptedSequence,
        mode: MaskMode,
    ) -> Result<LogProbTable> {
        if corrupted.len() > self.max_seq_len {
            return Err(Error::validation(format!(
                "sequence length {} exceeds max_seq_len {}",
                corrupted.len(),
                self.max_seq_len
            )));
        }
        if !corrupted.tokens.contains(&self.mask_token()) {
            return Err(Error::validation(
                "corrupted sequence has no masked position",
            ));
        }
        match mode {
            MaskMode::Full => {
                let n = corrupted.len();
                let mut tape = Tape::new();
                let ids = self.register_on(&mut tape);
                let positions: Vec<usize> = (0..n).collect();
                let nodes = self.build_forward(
                    &mut tape,
                    &ids,
                    &corrupted.tokens,
                    &positions,
                    &AttentionMask::full(n),
                )?;
                Ok(LogProbTable::from_tensor(tape.value(nodes.log_probs).clone()))
            }
            MaskMode::Staircase => {
                let clean = corrupted.clean_sequence();
                staircase::staircase_block_logprobs(self, &clean, corrupted)
            }
        }
    }

    /// Confidence-based semi-autoregressive decoding.
    ///
    /// Blocks are completed left to right. Within a block, each step unmasks
    /// the `ceil(block_size / steps_per_block)` masked positions with the
    /// highest confidence (max tempered token probability) and samples their
    /// tokens from the tempered distribution.
    pub fn sample_rollout(
        &self,
        prompt: &TokenSequence,
        gen_len: usize,
        block_size: usize,
        steps_per_block: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<TokenSequence> {
        if temperature <= 0.0 {
            return Err(Error::validation("temperature must be positive"));
        }
        if block_size == 0 || steps_per_block == 0 {
            return Err(Error::validation("block_size and steps_per_block must be positive"));
        }
        if gen_len % block_size != 0 {
            return Err(Error::validation("gen_len must be divisible by block_size"));
        }
        if prompt.tokens.contains(&self.mask_token()) {
            return Err(Error::validation("prompt contains the mask token"));
        }
        let total = prompt.len() + gen_len;
        if total > self.max_seq_len {
            return Err(Error::validation("prompt + gen_len exceeds max_seq_len"));
        }

        let mask_id = self.mask_token();
        let mut seq = prompt.tokens.clone();
        seq.extend(std::iter::repeat(mask_id).take(gen_len));
        let mut rng = derive_rng(seed, "rollout");
        let unmask_per_step = block_size.div_ceil(steps_per_block);

        for block_idx in 0..gen_len / block_size {
            let block_start = prompt.len() + block_idx * block_size;
            let visible = block_start + block_size;
            loop {
                let masked: Vec<usize> = (block_start..visible)
                    .filter(|&p| seq[p] == mask_id)
                    .collect();
                if masked.is_empty() {
                    break;
                }
                let mut tape = Tape::new();
                let ids = self.register_on(&mut tape);
                let positions: Vec<usize> = (0..visible).collect();
                let nodes = self.build_forward(
                    &mut tape,
                    &ids,
                    &seq[..visible],
                    &positions,
                    &AttentionMask::full(visible),
                )?;
                let logp = tape.value(nodes.log_probs);

                // Tempered distribution per masked position, plus confidence.
                let mut scored: Vec<(usize, f64, Vec<f64>)> = masked
                    .iter()
                    .map(|&p| {
                        let row: Vec<f64> =
                            (0..self.out_vocab()).map(|t| logp.at(p, t)).collect();
                        let dist = tempered_probs(&row, temperature);
                        let conf = dist.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        (p, conf, dist)
                    })
                    .collect();
                // Highest confidence first; ties broken toward lower index.
                scored.sort_by(|a, b| {
                    b.1.partial_cmp(&a.1)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.0.cmp(&b.0))
                });
                let take = unmask_per_step.min(scored.len());
                let mut chosen: Vec<(usize, Vec<f64>)> = scored
                    .into_iter()
                    .take(take)
                    .map(|(p, _, dist)| (p, dist))
                    .collect();
                // Draw in position order so the RNG stream is layout-stable.
                chosen.sort_by_key(|(p, _)| *p);
                for (p, dist) in chosen {
                    let token = sample_categorical(&dist, &mut rng);
                    seq[p] = token;
                }
            }
        }
        debug_assert!(!seq.contains(&mask_id));
        Ok(TokenSequence::new(seq, prompt.len()))
    }

    /// Versioned binary checkpoint: plain-text metadata header followed by
    /// shape-prefixed f64 arrays.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(b"DLABCKPT")?;
        f.write_all(&1u32.to_le_bytes())?;
        let header = format!(
            "vocab_size={}\nembed_dim={}\nmax_seq_len={}\nblock_size={}\nseed={}\n",
            self.vocab_size, self.embed_dim, self.max_seq_len, self.block_size, self.seed
        );
        f.write_all(&(header.len() as u32).to_le_bytes())?;
        f.write_all(header.as_bytes())?;
        let tensors = self.tensors();
        f.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, t) in tensors {
            f.write_all(&(name.len() as u32).to_le_bytes())?;
            f.write_all(name.as_bytes())?;
            f.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                f.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.values() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != b"DLABCKPT" {
            return Err(Error::validation("not a checkpoint file"));
        }
        let version = read_u32(&mut f)?;
        if version != 1 {
            return Err(Error::validation(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let header_len = read_u32(&mut f)? as usize;
        let mut header = vec![0u8; header_len];
        f.read_exact(&mut header)?;
        let header = String::from_utf8(header)
            .map_err(|_| Error::validation("checkpoint header is not UTF-8"))?;
        let mut meta = std::collections::BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::validation("malformed checkpoint header line"))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<u64> {
            meta.get(k)
                .ok_or_else(|| Error::validation(format!("checkpoint header missing {k}")))?
                .parse()
                .map_err(|_| Error::validation(format!("bad value for {k}")))
        };
        let vocab_size = get("vocab_size")? as usize;
        let embed_dim = get("embed_dim")? as usize;
        let max_seq_len = get("max_seq_len")? as usize;
        let block_size = get("block_size")? as usize;
        let seed = get("seed")?;

        let count = read_u32(&mut f)? as usize;
        let mut tensors = std::collections::BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut f)? as usize;
            let mut name = vec![0u8; name_len];
            f.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::validation("tensor name is not UTF-8"))?;
            let ndim = read_u32(&mut f)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut f)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                f.read_exact(&mut buf)?;
                values.push(f64::from_le_bytes(buf));
            }
            tensors.insert(name, Tensor::new(shape, values)?);
        }
        let mut take = |name: &str| -> Result<Tensor> {
            tensors
                .remove(name)
                .ok_or_else(|| Error::validation(format!("checkpoint missing tensor {name}")))
        };
        Ok(DenoiserParams {
            vocab_size,
            embed_dim,
            max_seq_len,
            block_size,
            seed,
            embedding: take("embedding")?,
            pos_embed: take("pos_embed")?,
            w_query: take("w_query")?,
            w_key: take("w_key")?,
            w_value: take("w_value")?,
            w_out: take("w_out")?,
        })
    }
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    f.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(f: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    f.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Probabilities proportional to `exp(log_prob / temperature)`.
fn tempered_probs(log_probs: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = log_probs.iter().map(|lp| lp / temperature).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scaled.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = out.iter().sum();
    if z > 0.0 && z.is_finite() {
        for p in out.iter_mut() {
            *p /= z;
        }
    } else {
        // Degenerate row (non-finite logits from a broken policy): fall back
        // to uniform so stress runs can keep recording their own collapse.
        let u = 1.0 / out.len() as f64;
        for p in out.iter_mut() {
            *p = u;
        }
    }
    out
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
