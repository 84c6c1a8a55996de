//! Forward corruption process and Monte Carlo likelihood-bound estimators.
//!
//! A clean sequence is corrupted by replacing response tokens with the mask
//! token; the estimator averages, over `m` independent mask patterns, the
//! weighted sum of masked-token log-probabilities under the denoiser. The
//! per-pattern weight is `1/t` for noise level `t`. Structured policies
//! (blockwise, head- or tail-biased) support block-diffusion training and the
//! adversarial stress protocol.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttentionMask, Tape, VarId};
use crate::error::{Error, Result};
use crate::model::{DenoiserParams, LogProbTable, TokenSequence};
use crate::rng::derive_rng_indexed;
use crate::staircase;

/// After this many all-clear draws the sampler forces a single masked
/// position; only reachable at vanishing noise levels.
const MAX_REJECTION_ROUNDS: usize = 1024;

/// How masked positions are chosen within the response region.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskPolicy {
    /// Each response token masked independently with probability `t`.
    Uniform,
    /// Whole blocks (aligned to the decoding grid) masked with probability `t`.
    Blockwise { block_size: usize },
    /// Fixed `count` positions, weighted toward the response head by
    /// `exp(-beta * k / len)`.
    HeadBiased { beta: f64, count: usize },
    /// Fixed `count` positions, weighted toward the response tail by
    /// `exp(+beta * k / len)`.
    TailBiased { beta: f64, count: usize },
}

impl MaskPolicy {
    fn label(&self) -> &'static str {
        match self {
            MaskPolicy::Uniform => "uniform",
            MaskPolicy::Blockwise { .. } => "blockwise",
            MaskPolicy::HeadBiased { .. } => "head_biased",
            MaskPolicy::TailBiased { .. } => "tail_biased",
        }
    }
}

/// One realized mask draw over the response region.
#[derive(Clone, Debug)]
pub struct MaskPattern {
    /// Noise level in (0, 1]; for fixed-count policies this is the masked
    /// fraction of the response.
    pub t: f64,
    /// Per-position indicator over the response region.
    pub masked: Vec<bool>,
    pub policy: MaskPolicy,
    /// The `1/t` factor applied to the masked log-likelihood sum.
    pub mc_weight: f64,
}

impl MaskPattern {
    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// Compact text encoding for run-log replay.
    pub fn encode(&self) -> String {
        let bits: String = self
            .masked
            .iter()
            .map(|&m| if m { '1' } else { '0' })
            .collect();
        format!("t={};policy={};masked={}", self.t, self.policy.label(), bits)
    }
}

/// A partially masked sequence, carrying its clean source so block-diffusion
/// evaluation can assemble the dual-stream input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorruptedSequence {
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
    clean: Vec<usize>,
}

impl CorruptedSequence {
    /// Mask the given absolute positions of `clean` with `mask_token`.
    pub fn with_masked(clean: &TokenSequence, positions: &[usize], mask_token: usize) -> Self {
        let mut tokens = clean.tokens.clone();
        for &p in positions {
            debug_assert!(p >= clean.prompt_len, "prompt positions are never masked");
            tokens[p] = mask_token;
        }
        CorruptedSequence {
            tokens,
            prompt_len: clean.prompt_len,
            clean: clean.tokens.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn clean_tokens(&self) -> &[usize] {
        &self.clean
    }

    pub fn clean_sequence(&self) -> TokenSequence {
        TokenSequence::new(self.clean.clone(), self.prompt_len)
    }

    /// Absolute positions currently masked.
    pub fn masked_positions(&self, mask_token: usize) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == mask_token)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Which architecture evaluates the masked log-probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElboArch {
    /// Full bidirectional attention (Eq.-style single pass).
    Full,
    /// Block diffusion through the staircase dual-stream pass.
    Block,
}

/// Monte Carlo estimator settings.
#[derive(Clone, Debug)]
pub struct ElboOptions {
    pub m: usize,
    pub policy: MaskPolicy,
    pub arch: ElboArch,
    /// Lower bound of the uniform noise-level draw.
    pub t_floor: f64,
    /// Pattern-stream offset; estimates with offsets `0..a` and `a..a+b`
    /// compose into the estimate with `m = a + b`.
    pub sample_offset: usize,
}

impl Default for ElboOptions {
    fn default() -> Self {
        ElboOptions {
            m: 2,
            policy: MaskPolicy::Uniform,
            arch: ElboArch::Full,
            t_floor: 0.15,
            sample_offset: 0,
        }
    }
}

/// A Monte Carlo estimate of the sequence log-likelihood bound.
#[derive(Clone, Debug)]
pub struct ElboEstimate {
    /// Mean of `per_sample_values`. Not clamped: single-sample values may
    /// exceed zero even though the estimand is a lower bound in expectation.
    pub value: f64,
    pub per_sample_values: Vec<f64>,
    pub patterns: Vec<MaskPattern>,
}

impl ElboEstimate {
    pub fn num_samples(&self) -> usize {
        self.per_sample_values.len()
    }
}

/// Corrupt the response region of `clean` at noise level `t`.
///
/// Uniform and blockwise policies mask independently with probability `t`,
/// resampling an all-clear draw so at least one position is masked.
/// Biased policies mask exactly their configured count, sampled without
/// replacement by position weight; `t` is then the masked fraction.
pub fn corrupt(
    clean: &TokenSequence,
    t: f64,
    policy: &MaskPolicy,
    mask_token: usize,
    seed: u64,
) -> Result<(CorruptedSequence, MaskPattern)> {
    let mut rng = derive_rng_indexed(seed, "corrupt", 0);
    corrupt_with_rng(clean, t, policy, mask_token, &mut rng)
}

pub fn corrupt_with_rng(
    clean: &TokenSequence,
    t: f64,
    policy: &MaskPolicy,
    mask_token: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(CorruptedSequence, MaskPattern)> {
    let resp_len = clean.response_len();
    if resp_len == 0 {
        return Err(Error::validation("sequence has an empty response region"));
    }
    if clean.tokens.contains(&mask_token) {
        return Err(Error::validation("clean sequence already contains mask tokens"));
    }
    let (masked, eff_t) = match policy {
        MaskPolicy::Uniform => {
            require_unit_interval(t)?;
            let mut masked = vec![false; resp_len];
            let mut rounds = 0;
            loop {
                let mut any = false;
                for m in masked.iter_mut() {
                    *m = rng.random::<f64>() < t;
                    any |= *m;
                }
                if any {
                    break;
                }
                rounds += 1;
                if rounds >= MAX_REJECTION_ROUNDS {
                    let pick = rng.random_range(0..resp_len);
                    masked[pick] = true;
                    break;
                }
            }
            (masked, t)
        }
        MaskPolicy::Blockwise { block_size } => {
            require_unit_interval(t)?;
            if *block_size == 0 {
                return Err(Error::validation("blockwise policy needs block_size > 0"));
            }
            let num_blocks = resp_len.div_ceil(*block_size);
            let mut masked = vec![false; resp_len];
            let mut rounds = 0;
            loop {
                let mut any = false;
                for b in 0..num_blocks {
                    let hit = rng.random::<f64>() < t;
                    if hit {
                        any = true;
                        let lo = b * block_size;
                        let hi = ((b + 1) * block_size).min(resp_len);
                        for m in masked[lo..hi].iter_mut() {
                            *m = true;
                        }
                    }
                }
                if any {
                    break;
                }
                rounds += 1;
                if rounds >= MAX_REJECTION_ROUNDS {
                    let b = rng.random_range(0..num_blocks);
                    let lo = b * block_size;
                    let hi = ((b + 1) * block_size).min(resp_len);
                    for m in masked[lo..hi].iter_mut() {
                        *m = true;
                    }
                    break;
                }
            }
            (masked, t)
        }
        MaskPolicy::HeadBiased { beta, count } | MaskPolicy::TailBiased { beta, count } => {
            if *count == 0 || *count > resp_len {
                return Err(Error::validation(format!(
                    "biased mask count {count} outside 1..={resp_len}"
                )));
            }
            if *beta < 0.0 {
                return Err(Error::validation("bias strength must be nonnegative"));
            }
            let sign = match policy {
                MaskPolicy::HeadBiased { .. } => -1.0,
                _ => 1.0,
            };
            let weights: Vec<f64> = (0..resp_len)
                .map(|k| (sign * beta * k as f64 / resp_len as f64).exp())
                .collect();
            let picks = weighted_sample_without_replacement(&weights, *count, rng);
            let mut masked = vec![false; resp_len];
            for p in picks {
                masked[p] = true;
            }
            (masked, *count as f64 / resp_len as f64)
        }
    };

    let positions: Vec<usize> = masked
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| clean.prompt_len + i)
        .collect();
    let corrupted = CorruptedSequence::with_masked(clean, &positions, mask_token);
    let pattern = MaskPattern {
        t: eff_t,
        masked,
        policy: policy.clone(),
        mc_weight: 1.0 / eff_t,
    };
    Ok((corrupted, pattern))
}

fn require_unit_interval(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::validation(format!("noise level t={t} outside (0, 1]")));
    }
    Ok(())
}

fn weighted_sample_without_replacement(
    weights: &[f64],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let mut u = rng.random::<f64>() * total;
        let mut chosen = remaining.len() - 1;
        for (slot, &i) in remaining.iter().enumerate() {
            u -= weights[i];
            if u < 0.0 {
                chosen = slot;
                break;
            }
        }
        out.push(remaining.remove(chosen));
    }
    out
}

/// Sample `m` mask patterns for `x` using the stream `(seed, stream)`.
pub fn sample_patterns(
    x: &TokenSequence,
    params: &DenoiserParams,
    opts: &ElboOptions,
    seed: u64,
    stream: &str,
) -> Result<Vec<(CorruptedSequence, MaskPattern)>> {
    if opts.m == 0 {
        return Err(Error::validation("m must be at least 1"));
    }
    if !(0.0 < opts.t_floor && opts.t_floor <= 1.0) {
        return Err(Error::validation("t_floor must lie in (0, 1]"));
    }
    let mut out = Vec::with_capacity(opts.m);
    for tau in 0..opts.m {
        let mut rng =
            derive_rng_indexed(seed, stream, (opts.sample_offset + tau) as u64);
        let t = match opts.policy {
            MaskPolicy::Uniform | MaskPolicy::Blockwise { .. } => {
                opts.t_floor + rng.random::<f64>() * (1.0 - opts.t_floor)
            }
            // Fixed-count policies determine t themselves.
            _ => 1.0,
        };
        out.push(corrupt_with_rng(x, t, &opts.policy, params.mask_token(), &mut rng)?);
    }
    Ok(out)
}

/// Evaluate the weighted masked log-likelihood sum for given patterns,
/// optionally with the parameter gradient of the mean.
pub fn evaluate_patterns(
    params: &DenoiserParams,
    patterns: &[(CorruptedSequence, MaskPattern)],
    arch: ElboArch,
    want_grad: bool,
) -> Result<(ElboEstimate, Option<Vec<f64>>)> {
    if patterns.is_empty() {
        return Err(Error::validation("no patterns to evaluate"));
    }
    let mut tape = Tape::new();
    let ids = params.register_on(&mut tape);
    let mut per_sample_nodes: Vec<VarId> = Vec::with_capacity(patterns.len());
    let mut per_sample_values = Vec::with_capacity(patterns.len());

    for (corrupted, pattern) in patterns {
        let node = pattern_value_node(params, &mut tape, &ids, corrupted, pattern, arch)?;
        per_sample_values.push(tape.value(node).scalar_value());
        per_sample_nodes.push(node);
    }

    let mut acc = per_sample_nodes[0];
    for &n in &per_sample_nodes[1..] {
        acc = tape.add(acc, n)?;
    }
    let mean = tape.scale(acc, 1.0 / patterns.len() as f64)?;
    let value = tape.value(mean).scalar_value();

    let grad = if want_grad {
        tape.backward_scalar(mean)?;
        Some(params.gradient_flat(&tape, &ids))
    } else {
        None
    };

    let estimate = ElboEstimate {
        value,
        per_sample_values,
        patterns: patterns.iter().map(|(_, p)| p.clone()).collect(),
    };
    Ok((estimate, grad))
}

fn pattern_value_node(
    params: &DenoiserParams,
    tape: &mut Tape,
    ids: &crate::model::ParamVarIds,
    corrupted: &CorruptedSequence,
    pattern: &MaskPattern,
    arch: ElboArch,
) -> Result<VarId> {
    let n = corrupted.len();
    let (log_probs, row_offset) = match arch {
        ElboArch::Full => {
            let positions: Vec<usize> = (0..n).collect();
            let nodes = params.build_forward(
                tape,
                ids,
                &corrupted.tokens,
                &positions,
                &AttentionMask::full(n),
            )?;
            (nodes.log_probs, 0)
        }
        ElboArch::Block => {
            let nodes = staircase::staircase_forward(
                params,
                tape,
                ids,
                corrupted.clean_tokens(),
                &corrupted.tokens,
            )?;
            (nodes.log_probs, n)
        }
    };
    let picks: Vec<(usize, usize)> = pattern
        .masked
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(k, _)| {
            let pos = corrupted.prompt_len + k;
            (row_offset + pos, corrupted.clean_tokens()[pos])
        })
        .collect();
    tape.gather_weighted_sum(log_probs, &picks, pattern.mc_weight)
}

/// Pattern value recomputed from a detached log-probability table; the
/// table-free tape path must agree with this.
pub fn pattern_value_from_table(
    table: &LogProbTable,
    pattern: &MaskPattern,
    clean: &TokenSequence,
) -> f64 {
    let mut s = 0.0;
    for (k, &m) in pattern.masked.iter().enumerate() {
        if m {
            let pos = clean.prompt_len + k;
            s += table.log_prob(pos, clean.tokens[pos]);
        }
    }
    pattern.mc_weight * s
}

fn check_elbo_input(params: &DenoiserParams, x: &TokenSequence, opts: &ElboOptions) -> Result<()> {
    if x.tokens.contains(&params.mask_token()) {
        return Err(Error::validation("input to the estimator contains mask tokens"));
    }
    if x.len() > params.max_seq_len {
        return Err(Error::validation("sequence exceeds max_seq_len"));
    }
    if opts.arch == ElboArch::Block && x.len() % params.block_size != 0 {
        return Err(Error::validation(
            "block-arch estimation needs length divisible by block_size",
        ));
    }
    Ok(())
}

fn estimate_stream(
    params: &DenoiserParams,
    x: &TokenSequence,
    opts: &ElboOptions,
    seed: u64,
    stream: &str,
    want_grad: bool,
) -> Result<(ElboEstimate, Option<Vec<f64>>)> {
    check_elbo_input(params, x, opts)?;
    let patterns = sample_patterns(x, params, opts, seed, stream)?;
    evaluate_patterns(params, &patterns, opts.arch, want_grad)
}

/// Monte Carlo likelihood-bound estimate with `m` fresh mask patterns.
pub fn estimate_elbo(
    params: &DenoiserParams,
    x: &TokenSequence,
    opts: &ElboOptions,
    seed: u64,
) -> Result<ElboEstimate> {
    estimate_stream(params, x, opts, seed, "elbo", false).map(|(e, _)| e)
}

/// Same estimate plus the flattened parameter gradient of its value.
pub fn estimate_elbo_grad(
    params: &DenoiserParams,
    x: &TokenSequence,
    opts: &ElboOptions,
    seed: u64,
) -> Result<(ElboEstimate, Vec<f64>)> {
    estimate_stream(params, x, opts, seed, "elbo", true).map(|(e, g)| (e, g.expect("grad")))
}

/// Mask coupling across the two policies of a ratio estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coupling {
    /// Both policies see identical mask draws (antithetic control condition).
    SharedMasks,
    /// Fresh draws per policy; the default for instability experiments, where
    /// the estimation-noise difference is the object of study.
    Independent,
}

/// Estimate the likelihood bound under two parameter sets.
pub fn estimate_elbo_pairwise(
    params_new: &DenoiserParams,
    params_old: &DenoiserParams,
    x: &TokenSequence,
    opts: &ElboOptions,
    coupling: Coupling,
    seed: u64,
) -> Result<(ElboEstimate, ElboEstimate)> {
    match coupling {
        Coupling::SharedMasks => {
            check_elbo_input(params_new, x, opts)?;
            let patterns = sample_patterns(x, params_new, opts, seed, "elbo")?;
            let (new, _) = evaluate_patterns(params_new, &patterns, opts.arch, false)?;
            let (old, _) = evaluate_patterns(params_old, &patterns, opts.arch, false)?;
            Ok((new, old))
        }
        Coupling::Independent => {
            let (new, _) = estimate_stream(params_new, x, opts, seed, "elbo-new", false)?;
            let (old, _) = estimate_stream(params_old, x, opts, seed, "elbo-old", false)?;
            Ok((new, old))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::model::MaskMode;
    use crate::rng::derive_rng;

    fn params_v9() -> DenoiserParams {
        DenoiserParams::init(9, 6, 32, 2, 0).unwrap()
    }

    fn clean_seq(n: usize, prompt_len: usize) -> TokenSequence {
        TokenSequence::new((0..n).map(|i| i % 8).collect(), prompt_len)
    }

    #[test]
    fn t_one_masks_entire_response() {
        let params = params_v9();
        let clean = clean_seq(10, 3);
        let (corrupted, pattern) =
            corrupt(&clean, 1.0, &MaskPolicy::Uniform, params.mask_token(), 5).unwrap();
        assert!(pattern.masked.iter().all(|&m| m));
        for p in 3..10 {
            assert_eq!(corrupted.tokens[p], params.mask_token());
        }
        for p in 0..3 {
            assert_eq!(corrupted.tokens[p], clean.tokens[p]);
        }
    }

    #[test]
    fn vanishing_t_masks_exactly_one_position() {
        let params = params_v9();
        let clean = clean_seq(12, 4);
        for seed in 0..10 {
            let (_, pattern) =
                corrupt(&clean, 1e-12, &MaskPolicy::Uniform, params.mask_token(), seed).unwrap();
            assert_eq!(pattern.masked_count(), 1, "seed {seed}");
        }
    }

    #[test]
    fn uniform_frequency_matches_rate() {
        let params = params_v9();
        let clean = clean_seq(20, 4); // 16-token response
        let trials = 100_000u64;
        let mut counts = vec![0u64; 16];
        for seed in 0..trials {
            let (_, pattern) =
                corrupt(&clean, 0.5, &MaskPolicy::Uniform, params.mask_token(), seed).unwrap();
            for (k, &m) in pattern.masked.iter().enumerate() {
                if m {
                    counts[k] += 1;
                }
            }
        }
        for (k, &c) in counts.iter().enumerate() {
            let rate = c as f64 / trials as f64;
            assert!(
                (rate - 0.5).abs() < 0.01,
                "position {k}: empirical rate {rate}"
            );
        }
    }

    #[test]
    fn prompt_positions_never_masked() {
        let params = params_v9();
        let clean = clean_seq(12, 5);
        for seed in 0..10_000u64 {
            let t = 0.05 + 0.95 * ((seed % 97) as f64 / 97.0);
            let (corrupted, _) =
                corrupt(&clean, t, &MaskPolicy::Uniform, params.mask_token(), seed).unwrap();
            for p in 0..5 {
                assert_eq!(corrupted.tokens[p], clean.tokens[p]);
            }
        }
    }

    #[test]
    fn blockwise_masks_whole_aligned_blocks() {
        let params = params_v9();
        let clean = clean_seq(14, 2); // 12-token response, 4 blocks of 3
        for seed in 0..200 {
            let (_, pattern) = corrupt(
                &clean,
                0.5,
                &MaskPolicy::Blockwise { block_size: 3 },
                params.mask_token(),
                seed,
            )
            .unwrap();
            for b in 0..4 {
                let slice = &pattern.masked[b * 3..(b + 1) * 3];
                assert!(
                    slice.iter().all(|&m| m) || slice.iter().all(|&m| !m),
                    "block {b} split: {slice:?}"
                );
            }
            assert!(pattern.masked_count() > 0);
        }
    }

    #[test]
    fn biased_policies_pull_mass_to_their_end() {
        let params = params_v9();
        let clean = clean_seq(18, 2);
        let mut head_mean = 0.0;
        let mut tail_mean = 0.0;
        let n = 2000;
        for seed in 0..n {
            let (_, hp) = corrupt(
                &clean,
                1.0,
                &MaskPolicy::HeadBiased { beta: 6.0, count: 4 },
                params.mask_token(),
                seed,
            )
            .unwrap();
            let (_, tp) = corrupt(
                &clean,
                1.0,
                &MaskPolicy::TailBiased { beta: 6.0, count: 4 },
                params.mask_token(),
                seed + n,
            )
            .unwrap();
            assert_eq!(hp.masked_count(), 4);
            assert_eq!(tp.masked_count(), 4);
            head_mean += mean_masked_index(&hp);
            tail_mean += mean_masked_index(&tp);
        }
        head_mean /= n as f64;
        tail_mean /= n as f64;
        assert!(
            tail_mean - head_mean > 4.0,
            "head {head_mean:.2} vs tail {tail_mean:.2}"
        );
    }

    fn mean_masked_index(p: &MaskPattern) -> f64 {
        let idx: Vec<f64> = p
            .masked
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i as f64)
            .collect();
        idx.iter().sum::<f64>() / idx.len() as f64
    }

    #[test]
    fn perfect_denoiser_scores_exactly_zero() {
        // A model that assigns probability 1 to every true token has log-prob
        // 0 everywhere; the weighted masked sum is exactly 0 for any t.
        let clean = clean_seq(8, 2);
        let perfect = LogProbTable::from_tensor(Tensor::zeros(vec![8, 8]));
        let pattern = MaskPattern {
            t: 0.37,
            masked: vec![true, false, true, true, false, true],
            policy: MaskPolicy::Uniform,
            mc_weight: 1.0 / 0.37,
        };
        assert_eq!(pattern_value_from_table(&perfect, &pattern, &clean), 0.0);
    }

    #[test]
    fn uniform_model_closed_form() {
        let params = params_v9(); // zero output head at init
        let clean = clean_seq(10, 2);
        let t = 0.4;
        let (corrupted, pattern) =
            corrupt(&clean, t, &MaskPolicy::Uniform, params.mask_token(), 11).unwrap();
        let k = pattern.masked_count() as f64;
        let (estimate, _) =
            evaluate_patterns(&params, &[(corrupted, pattern)], ElboArch::Full, false).unwrap();
        let expect = (1.0 / t) * k * (1.0 / (params.vocab_size as f64 - 1.0)).ln();
        let rel = (estimate.value - expect).abs() / expect.abs();
        assert!(rel < 1e-12, "estimate {} expect {expect}", estimate.value);
    }

    #[test]
    fn tape_value_agrees_with_table_recompute() {
        let mut params = params_v9();
        let mut rng = derive_rng(3, "head");
        params.w_out = Tensor::randn(vec![6, 8], 0.7, &mut rng);
        let clean = clean_seq(10, 2);
        let (corrupted, pattern) =
            corrupt(&clean, 0.6, &MaskPolicy::Uniform, params.mask_token(), 4).unwrap();
        let table = params.token_log_probs(&corrupted, MaskMode::Full).unwrap();
        let via_table = pattern_value_from_table(&table, &pattern, &clean);
        let (estimate, _) =
            evaluate_patterns(&params, &[(corrupted, pattern)], ElboArch::Full, false).unwrap();
        assert!((estimate.value - via_table).abs() < 1e-12);
    }

    #[test]
    fn single_sample_estimate_is_deterministic() {
        let params = params_v9();
        let clean = clean_seq(10, 2);
        let opts = ElboOptions {
            m: 1,
            ..ElboOptions::default()
        };
        let a = estimate_elbo(&params, &clean, &opts, 42).unwrap();
        let b = estimate_elbo(&params, &clean, &opts, 42).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }

    #[test]
    fn estimates_compose_across_sub_seeds() {
        let mut params = params_v9();
        let mut rng = derive_rng(8, "head2");
        params.w_out = Tensor::randn(vec![6, 8], 0.4, &mut rng);
        let clean = clean_seq(12, 3);
        let (a, b) = (3usize, 5usize);
        let full = estimate_elbo(
            &params,
            &clean,
            &ElboOptions {
                m: a + b,
                ..ElboOptions::default()
            },
            7,
        )
        .unwrap();
        let first = estimate_elbo(
            &params,
            &clean,
            &ElboOptions {
                m: a,
                ..ElboOptions::default()
            },
            7,
        )
        .unwrap();
        let second = estimate_elbo(
            &params,
            &clean,
            &ElboOptions {
                m: b,
                sample_offset: a,
                ..ElboOptions::default()
            },
            7,
        )
        .unwrap();
        let combined =
            (a as f64 * first.value + b as f64 * second.value) / (a + b) as f64;
        assert!((full.value - combined).abs() < 1e-12);
    }

    #[test]
    fn mask_tokens_in_input_rejected() {
        let params = params_v9();
        let mut clean = clean_seq(8, 2);
        clean.tokens[5] = params.mask_token();
        assert!(estimate_elbo(&params, &clean, &ElboOptions::default(), 0).is_err());
    }

    #[test]
    fn shared_masks_on_identical_params_give_zero_log_ratio() {
        let params = params_v9();
        let clean = clean_seq(10, 2);
        let (new, old) = estimate_elbo_pairwise(
            &params,
            &params,
            &clean,
            &ElboOptions::default(),
            Coupling::SharedMasks,
            9,
        )
        .unwrap();
        assert_eq!(new.value.to_bits(), old.value.to_bits());
        assert_eq!(new.value - old.value, 0.0);
    }

    #[test]
    fn independent_masks_on_identical_params_have_noise() {
        let mut params = params_v9();
        let mut rng = derive_rng(12, "head3");
        params.w_out = Tensor::randn(vec![6, 8], 0.6, &mut rng);
        let clean = clean_seq(10, 2);
        let opts = ElboOptions {
            m: 1,
            ..ElboOptions::default()
        };
        let mut nonzero = 0;
        let mut abs_sum = 0.0;
        for seed in 0..1000 {
            let (new, old) = estimate_elbo_pairwise(
                &params, &params, &clean, &opts, Coupling::Independent, seed,
            )
            .unwrap();
            let d = new.value - old.value;
            if d != 0.0 {
                nonzero += 1;
            }
            abs_sum += d.abs();
        }
        assert!(nonzero > 900, "only {nonzero} draws had nonzero noise");
        assert!(abs_sum / 1000.0 > 0.0);
    }

    #[test]
    fn shared_masks_cut_log_ratio_variance() {
        // On a drifted pair, coupling the mask draws should remove most of
        // the pattern-sampling variance from the log-ratio.
        let params_old = params_v9();
        let mut params_new = params_old.clone();
        let mut rng = derive_rng(14, "drift");
        let mut flat = params_new.flatten();
        for v in flat.iter_mut() {
            *v += 0.05 * rng.random::<f64>();
        }
        params_new.set_from_flat(&flat).unwrap();

        let clean = clean_seq(12, 3);
        let opts = ElboOptions {
            m: 4,
            ..ElboOptions::default()
        };
        let reps = 300;
        let collect = |coupling: Coupling| -> Vec<f64> {
            (0..reps)
                .map(|seed| {
                    let (new, old) = estimate_elbo_pairwise(
                        &params_new,
                        &params_old,
                        &clean,
                        &opts,
                        coupling,
                        seed,
                    )
                    .unwrap();
                    new.value - old.value
                })
                .collect()
        };
        let var = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
        };
        let v_shared = var(&collect(Coupling::SharedMasks));
        let v_indep = var(&collect(Coupling::Independent));
        assert!(
            v_indep >= 2.0 * v_shared,
            "independent {v_indep:.4e} vs shared {v_shared:.4e}"
        );
    }

    #[test]
    fn standard_error_shrinks_with_sample_count() {
        let mut params = params_v9();
        let mut rng = derive_rng(15, "head4");
        params.w_out = Tensor::randn(vec![6, 8], 0.5, &mut rng);
        let clean = clean_seq(12, 3);
        let est = estimate_elbo(
            &params,
            &clean,
            &ElboOptions {
                m: 6400,
                ..ElboOptions::default()
            },
            21,
        )
        .unwrap();
        let v = &est.per_sample_values;
        // Means of disjoint batches: SE ratio across a 4x batch-size step
        // should be ~2, within a factor of 1.5.
        let batch_sd = |size: usize| {
            let means: Vec<f64> = v
                .chunks(size)
                .map(|c| c.iter().sum::<f64>() / c.len() as f64)
                .collect();
            let m = means.iter().sum::<f64>() / means.len() as f64;
            (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / means.len() as f64).sqrt()
        };
        let ratio = batch_sd(16) / batch_sd(64);
        assert!(
            (2.0 / 1.5..=2.0 * 1.5).contains(&ratio),
            "SE ratio {ratio:.3}"
        );
        // Running mean settles: the full mean and the half-sample mean agree
        // within a few standard errors.
        let half = v[..3200].iter().sum::<f64>() / 3200.0;
        let se_all = batch_sd(6400).max(batch_sd(64) / 10.0);
        assert!((half - est.value).abs() < 6.0 * se_all.max(1e-3) + 0.5);
    }

    #[test]
    fn pattern_encoding_is_stable() {
        let pattern = MaskPattern {
            t: 0.5,
            masked: vec![true, false, true],
            policy: MaskPolicy::Uniform,
            mc_weight: 2.0,
        };
        assert_eq!(pattern.encode(), "t=0.5;policy=uniform;masked=101");
    }
}
