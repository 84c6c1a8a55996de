//! Dual-stream staircase attention for block diffusion.
//!
//! Block-diffusion likelihood evaluation must condition each block strictly on
//! the clean history of earlier blocks, without letting a block attend to its
//! own ground truth. Running one forward pass per block costs O(K) passes;
//! instead we concatenate a frozen clean stream with the corrupted target
//! stream and apply a composite 2n x 2n mask:
//!
//! ```text
//!   [ causal      0          ]   clean rows attend causally to clean rows
//!   [ staircase   block-diag ]   target rows attend to strictly earlier
//!                                clean blocks plus their own target block
//! ```
//!
//! All K blocks' conditional log-probabilities then come out of a single
//! pass. The naive per-block loop is kept as the semantic reference oracle.

use crate::autodiff::{AttentionMask, Tape, Tensor};
use crate::diffusion::CorruptedSequence;
use crate::error::{Error, Result};
use crate::model::{DenoiserParams, ForwardNodes, LogProbTable, ParamVarIds, TokenSequence};

/// Block geometry of a staircase mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StaircaseLayout {
    /// Sequence length of one stream; the mask is `2n x 2n`.
    pub n: usize,
    pub block_size: usize,
    pub num_blocks: usize,
}

impl StaircaseLayout {
    /// Clean-stream rows occupy `[0, n)`.
    pub fn clean_rows(&self) -> std::ops::Range<usize> {
        0..self.n
    }

    /// Target-stream rows occupy `[n, 2n)`.
    pub fn target_rows(&self) -> std::ops::Range<usize> {
        self.n..2 * self.n
    }

    pub fn block_of(&self, pos: usize) -> usize {
        pos / self.block_size
    }
}

/// The composite dual-stream mask plus its layout.
#[derive(Clone, Debug)]
pub struct StaircaseMask {
    pub mask: AttentionMask,
    pub layout: StaircaseLayout,
}

/// Build the composite mask for sequence length `n` and the given block size.
pub fn build_staircase_mask(n: usize, block_size: usize) -> Result<StaircaseMask> {
    if n == 0 || block_size == 0 {
        return Err(Error::validation("n and block_size must be positive"));
    }
    if n % block_size != 0 {
        return Err(Error::validation(format!(
            "block_size {block_size} does not divide sequence length {n}"
        )));
    }
    let num_blocks = n / block_size;
    let mask = AttentionMask::from_fn(2 * n, 2 * n, |i, j| {
        let (qi_target, qi) = if i < n { (false, i) } else { (true, i - n) };
        let (kj_target, kj) = if j < n { (false, j) } else { (true, j - n) };
        let qb = qi / block_size;
        let kb = kj / block_size;
        match (qi_target, kj_target) {
            // Top-left: standard causal mask over the clean stream.
            (false, false) => kj <= qi,
            // Top-right: the clean stream never sees the noisy target.
            (false, true) => false,
            // Bottom-left: target block k attends to clean blocks l < k.
            (true, false) => kb < qb,
            // Bottom-right: block-diagonal intra-block attention.
            (true, true) => qb == kb,
        }
    });
    Ok(StaircaseMask {
        mask,
        layout: StaircaseLayout {
            n,
            block_size,
            num_blocks,
        },
    })
}

/// One dual-stream forward pass. Row `n + i` of the returned `log_probs`
/// node holds the prediction for target position `i`; target positions reuse
/// the positional indices of their clean counterparts.
pub fn staircase_forward(
    params: &DenoiserParams,
    tape: &mut Tape,
    ids: &ParamVarIds,
    clean_tokens: &[usize],
    target_tokens: &[usize],
) -> Result<ForwardNodes> {
    if clean_tokens.len() != target_tokens.len() {
        return Err(Error::validation(
            "clean and target streams must have identical length",
        ));
    }
    let n = clean_tokens.len();
    let stair = build_staircase_mask(n, params.block_size)?;
    let mut tokens = Vec::with_capacity(2 * n);
    tokens.extend_from_slice(clean_tokens);
    tokens.extend_from_slice(target_tokens);
    let mut positions: Vec<usize> = (0..n).collect();
    positions.extend(0..n);
    params.build_forward(tape, ids, &tokens, &positions, &stair.mask)
}

fn check_pair(clean: &TokenSequence, corrupted: &CorruptedSequence) -> Result<()> {
    if clean.len() != corrupted.len() {
        return Err(Error::validation("clean/corrupted length mismatch"));
    }
    if clean.prompt_len != corrupted.prompt_len {
        return Err(Error::validation("clean/corrupted prompt length mismatch"));
    }
    Ok(())
}

/// Single-pass conditional log-probabilities for every target position.
///
/// Output row `i` is the prediction for position `i`, conditioned on the
/// clean content of strictly earlier blocks and the corrupted content of its
/// own block.
pub fn staircase_block_logprobs(
    params: &DenoiserParams,
    clean: &TokenSequence,
    corrupted: &CorruptedSequence,
) -> Result<LogProbTable> {
    check_pair(clean, corrupted)?;
    let n = clean.len();
    let mut tape = Tape::new();
    let ids = params.register_on(&mut tape);
    let nodes = staircase_forward(params, &mut tape, &ids, &clean.tokens, &corrupted.tokens)?;
    let full = tape.value(nodes.log_probs);
    let cols = full.cols();
    let values = full.values()[n * cols..2 * n * cols].to_vec();
    Ok(LogProbTable::from_tensor(Tensor::new(vec![n, cols], values)?))
}

/// Reference oracle: K separate forward passes, block `k` evaluated with full
/// attention over the clean prefix of blocks `0..k` plus its own corrupted
/// block. Semantically the ground truth for `staircase_block_logprobs`.
pub fn iterative_reference(
    params: &DenoiserParams,
    clean: &TokenSequence,
    corrupted: &CorruptedSequence,
) -> Result<LogProbTable> {
    check_pair(clean, corrupted)?;
    let n = clean.len();
    let b = params.block_size;
    if n % b != 0 {
        return Err(Error::validation("block_size does not divide length"));
    }
    let num_blocks = n / b;
    let cols = params.out_vocab();
    let mut out = vec![0.0; n * cols];
    for k in 0..num_blocks {
        let prefix = k * b;
        let window = prefix + b;
        let mut tokens = Vec::with_capacity(window);
        tokens.extend_from_slice(&clean.tokens[..prefix]);
        tokens.extend_from_slice(&corrupted.tokens[prefix..window]);
        let positions: Vec<usize> = (0..window).collect();
        let mut tape = Tape::new();
        let ids = params.register_on(&mut tape);
        let nodes = params.build_forward(
            &mut tape,
            &ids,
            &tokens,
            &positions,
            &AttentionMask::full(window),
        )?;
        let table = tape.value(nodes.log_probs);
        for i in 0..b {
            let pos = prefix + i;
            for c in 0..cols {
                out[pos * cols + c] = table.at(pos, c);
            }
        }
    }
    Ok(LogProbTable::from_tensor(Tensor::new(vec![n, cols], out)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::CorruptedSequence;
    use crate::model::MaskMode;
    use crate::rng::derive_rng;
    use rand::Rng;

    #[test]
    fn mask_structure_matches_quadrant_rules() {
        // n=4, B=2: the staircase quadrant has exactly its (block 1, block 0)
        // 2x2 sub-block set, and the intra quadrant two 2x2 diagonal blocks.
        let sm = build_staircase_mask(4, 2).unwrap();
        let n = 4;
        for i in 0..n {
            for j in 0..n {
                assert_eq!(sm.mask.allows(i, j), j <= i, "causal ({i},{j})");
                assert!(!sm.mask.allows(i, n + j), "top-right must be zero");
                let stair = sm.mask.allows(n + i, j);
                assert_eq!(stair, (j / 2) < (i / 2), "staircase ({i},{j})");
                let intra = sm.mask.allows(n + i, n + j);
                assert_eq!(intra, i / 2 == j / 2, "intra ({i},{j})");
            }
        }
    }

    #[test]
    fn single_block_staircase_is_all_zero() {
        let sm = build_staircase_mask(2, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!(!sm.mask.allows(2 + i, j), "K=1 has no staircase entries");
                assert!(sm.mask.allows(2 + i, 2 + j), "target sees its own block");
            }
        }
    }

    #[test]
    fn staircase_row_sums_count_earlier_blocks() {
        let sm = build_staircase_mask(64, 4).unwrap();
        for i in 0..64 {
            let k = i / 4;
            let stair_sum: usize = (0..64).filter(|&j| sm.mask.allows(64 + i, j)).count();
            assert_eq!(stair_sum, k * 4, "target row {i}");
        }
    }

    #[test]
    fn structural_invariants_hold_across_sweep() {
        for n in 4..=64 {
            for b in 1..=n {
                if n % b != 0 {
                    assert!(build_staircase_mask(n, b).is_err());
                    continue;
                }
                let sm = build_staircase_mask(n, b).unwrap();
                assert_eq!(sm.layout.num_blocks, n / b);
                for i in 0..n {
                    for j in 0..n {
                        assert_eq!(sm.mask.allows(i, j), j <= i);
                        assert!(!sm.mask.allows(i, n + j));
                        assert_eq!(sm.mask.allows(n + i, j), (j / b) < (i / b));
                        assert_eq!(sm.mask.allows(n + i, n + j), i / b == j / b);
                    }
                }
            }
        }
    }

    fn seeded_case(seed: u64, n: usize, block: usize) -> (DenoiserParams, TokenSequence, CorruptedSequence) {
        let mut params = DenoiserParams::init(11, 6, 2 * n.max(8), block, seed).unwrap();
        let mut rng = derive_rng(seed, "staircase-case");
        params.w_out = Tensor::randn(vec![6, 10], 0.6, &mut rng);
        let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
        let prompt_len = 0;
        let clean = TokenSequence::new(tokens, prompt_len);
        let level = 0.2 + 0.6 * rng.random::<f64>();
        let masked: Vec<usize> = (0..n)
            .filter(|_| rng.random::<f64>() < level)
            .collect();
        let masked = if masked.is_empty() { vec![n / 2] } else { masked };
        let corrupted = CorruptedSequence::with_masked(&clean, &masked, params.mask_token());
        (params, clean, corrupted)
    }

    #[test]
    fn staircase_equals_iterative_reference() {
        for case in 0..20u64 {
            let block = [1, 2, 4][case as usize % 3];
            let n = block * (2 + (case as usize % 3) * 2);
            let (params, clean, corrupted) = seeded_case(case, n, block);
            let fast = staircase_block_logprobs(&params, &clean, &corrupted).unwrap();
            let slow = iterative_reference(&params, &clean, &corrupted).unwrap();
            for p in 0..n {
                for c in 0..params.out_vocab() {
                    let d = (fast.log_prob(p, c) - slow.log_prob(p, c)).abs();
                    assert!(d < 1e-10, "case {case} pos {p} tok {c} diff {d}");
                }
            }
        }
    }

    #[test]
    fn k1_reference_is_plain_full_attention() {
        let (params, clean, corrupted) = seeded_case(42, 4, 4);
        let reference = iterative_reference(&params, &clean, &corrupted).unwrap();
        let full = params
            .token_log_probs(&corrupted, MaskMode::Full)
            .unwrap();
        for p in 0..4 {
            for c in 0..params.out_vocab() {
                assert!((reference.log_prob(p, c) - full.log_prob(p, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perturbing_later_clean_blocks_leaves_earlier_outputs_bit_identical() {
        let (params, clean, corrupted) = seeded_case(7, 8, 2);
        let base = staircase_block_logprobs(&params, &clean, &corrupted).unwrap();

        // Perturb tokens in blocks >= 2; blocks 0 and 1 see none of them.
        let mut other = clean.clone();
        for p in 4..8 {
            other.tokens[p] = (other.tokens[p] + 3) % 10;
        }
        let moved = CorruptedSequence::with_masked(
            &other,
            &corrupted.masked_positions(params.mask_token()),
            params.mask_token(),
        );
        let out = staircase_block_logprobs(&params, &other, &moved).unwrap();
        for p in 0..4 {
            for c in 0..params.out_vocab() {
                assert_eq!(
                    base.log_prob(p, c).to_bits(),
                    out.log_prob(p, c).to_bits(),
                    "pos {p} tok {c}"
                );
            }
        }
    }

    #[test]
    fn own_block_clean_tokens_are_occluded() {
        // Changing the clean-stream content of block k itself must not move
        // block k's outputs: the staircase grants access only to l < k.
        let (params, clean, corrupted) = seeded_case(9, 8, 2);
        let base = staircase_block_logprobs(&params, &clean, &corrupted).unwrap();
        for k in 0..4usize {
            let mut other = clean.clone();
            for p in k * 2..(k + 1) * 2 {
                other.tokens[p] = (other.tokens[p] + 5) % 10;
            }
            let out = staircase_block_logprobs(&params, &other, &corrupted).unwrap();
            for p in k * 2..(k + 1) * 2 {
                for c in 0..params.out_vocab() {
                    assert_eq!(
                        base.log_prob(p, c).to_bits(),
                        out.log_prob(p, c).to_bits(),
                        "block {k} pos {p}"
                    );
                }
            }
        }
    }

    #[test]
    fn gradient_leakage_is_exactly_zero() {
        // Gradient of block-k target log-probabilities with respect to the
        // clean-stream embedding slots of blocks >= k must be exactly zero.
        let (params, clean, corrupted) = seeded_case(13, 8, 2);
        let n = 8;
        let b = 2;
        let d = params.embed_dim;
        for k in 0..4usize {
            let mut tape = Tape::new();
            let ids = params.register_on(&mut tape);
            let nodes =
                staircase_forward(&params, &mut tape, &ids, &clean.tokens, &corrupted.tokens)
                    .unwrap();
            let picks: Vec<(usize, usize)> = (k * b..(k + 1) * b)
                .flat_map(|p| (0..params.out_vocab()).map(move |c| (n + p, c)))
                .collect();
            let probe = tape.gather_weighted_sum(nodes.log_probs, &picks, 1.0).unwrap();
            tape.backward_scalar(probe).unwrap();
            let g = tape.grad(nodes.token_embed).unwrap();
            for pos in k * b..n {
                for c in 0..d {
                    assert_eq!(
                        g[pos * d + c], 0.0,
                        "leak into clean slot {pos} (block {k})"
                    );
                }
            }
            // Earlier clean blocks must carry signal (k > 0).
            if k > 0 {
                let any: f64 = (0..k * b)
                    .flat_map(|p| (0..d).map(move |c| (p, c)))
                    .map(|(p, c)| g[p * d + c].abs())
                    .sum();
                assert!(any > 0.0, "no signal reached earlier clean blocks");
            }
        }
    }

    #[test]
    fn degenerate_single_block_matches_full_attention() {
        // In staircase mode with one block the target stream sees exactly the
        // corrupted sequence, i.e. plain full attention.
        for seed in 0..5u64 {
            let (params, clean, corrupted) = seeded_case(100 + seed, 6, 6);
            let stair = staircase_block_logprobs(&params, &clean, &corrupted).unwrap();
            let full = params.token_log_probs(&corrupted, MaskMode::Full).unwrap();
            for p in 0..6 {
                for c in 0..params.out_vocab() {
                    let diff = (stair.log_prob(p, c) - full.log_prob(p, c)).abs();
                    assert!(diff < 1e-10);
                }
            }
        }
    }

    #[test]
    fn corrupt_draws_feed_block_evaluation() {
        // End-to-end shape check through the MaskMode::Staircase path.
        let (params, clean, _) = seeded_case(55, 8, 2);
        let (corrupted, _) = crate::diffusion::corrupt(
            &clean,
            0.5,
            &crate::diffusion::MaskPolicy::Uniform,
            params.mask_token(),
            3,
        )
        .unwrap();
        let table = params
            .token_log_probs(&corrupted, MaskMode::Staircase)
            .unwrap();
        assert_eq!(table.positions(), 8);
        assert_eq!(table.vocab(), params.out_vocab());
    }

    #[test]
    fn non_divisible_length_is_rejected() {
        assert!(build_staircase_mask(6, 4).is_err());
    }
}
