//! Estimated importance ratios and their clipping regimes.
//!
//! Ratios come in as log-ratios of likelihood-bound estimates and stay in log
//! space until after clipping; no exp of an unclipped log-ratio is ever
//! evaluated, so inputs at ±10^6 flow through without overflow. Three regimes
//! are implemented: the GRPO conditional multiplier (no upper cap on
//! negative-advantage samples), unconditional two-sided clipping, and
//! clip-then-softmax normalized coefficients.

use crate::error::{Error, Result};

/// Interpretation of the clip threshold `epsilon`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipSpace {
    /// Ratios clamped to `[1-eps, 1+eps]`; requires `eps < 1`.
    Linear,
    /// Log-ratios clamped to `[-eps, +eps]` nats.
    LogSymmetric,
    /// Log-ratios clamped from above at `+eps` nats only.
    LogAsymmetric,
}

impl ClipSpace {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ClipSpace::Linear),
            "log_symmetric" => Ok(ClipSpace::LogSymmetric),
            "log_asymmetric" => Ok(ClipSpace::LogAsymmetric),
            other => Err(Error::config(format!("unknown clip_space '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ClipSpace::Linear => "linear",
            ClipSpace::LogSymmetric => "log_symmetric",
            ClipSpace::LogAsymmetric => "log_asymmetric",
        }
    }
}

/// Clip interval in log space: `(lo, hi)` such that a clipped weight is
/// `exp(clamp(log_ratio, lo, hi))`.
pub fn log_clip_bounds(epsilon: f64, space: ClipSpace) -> Result<(f64, f64)> {
    if epsilon <= 0.0 {
        return Err(Error::config("epsilon must be positive"));
    }
    match space {
        ClipSpace::Linear => {
            if epsilon >= 1.0 {
                return Err(Error::config(
                    "linear clipping needs epsilon < 1 for a positive lower bound; \
                     use log_symmetric for larger thresholds",
                ));
            }
            Ok(((1.0 - epsilon).ln(), (1.0 + epsilon).ln()))
        }
        ClipSpace::LogSymmetric => Ok((-epsilon, epsilon)),
        ClipSpace::LogAsymmetric => Ok((f64::NEG_INFINITY, epsilon)),
    }
}

/// The linear-space upper clip value `exp(hi)`; the `1 + eps_lin` of the
/// saturation ceiling.
pub fn upper_clip_linear(epsilon: f64, space: ClipSpace) -> Result<f64> {
    let (_, hi) = log_clip_bounds(epsilon, space)?;
    Ok(hi.exp())
}

/// GRPO's effective multiplier: positive-advantage samples are capped above,
/// negative-advantage samples are only floored — their weight is unbounded.
pub fn effective_multiplier_grpo(rho: f64, advantage: f64, epsilon: f64) -> Result<f64> {
    if rho <= 0.0 {
        return Err(Error::validation("importance ratio must be positive"));
    }
    Ok(if advantage >= 0.0 {
        rho.min(1.0 + epsilon)
    } else {
        rho.max(1.0 - epsilon)
    })
}

/// Log-space variant of the GRPO multiplier; exp only after the conditional
/// clamp.
pub fn effective_log_multiplier_grpo(
    log_ratio: f64,
    advantage: f64,
    bounds: (f64, f64),
) -> f64 {
    let (lo, hi) = bounds;
    if advantage >= 0.0 {
        log_ratio.min(hi).exp()
    } else {
        log_ratio.max(lo).exp()
    }
}

/// Two-sided unconditional clip, regardless of the advantage sign. In-range
/// ratios pass through unchanged; the clamp happens on the ratio itself, with
/// the interval endpoints taken from the configured clip space.
pub fn clip_unconditional(rho: f64, epsilon: f64, space: ClipSpace) -> Result<f64> {
    if rho <= 0.0 {
        return Err(Error::validation("importance ratio must be positive"));
    }
    let (lo, hi) = log_clip_bounds(epsilon, space)?;
    let lo_lin = if lo.is_finite() { lo.exp() } else { 0.0 };
    Ok(rho.clamp(lo_lin, hi.exp()))
}

/// Per-sample log-ratios for one rollout group.
#[derive(Clone, Debug)]
pub struct LogRatioSet {
    log_ratios: Vec<f64>,
    epsilon: f64,
    clip_space: ClipSpace,
}

impl LogRatioSet {
    pub fn new(log_ratios: Vec<f64>, epsilon: f64, clip_space: ClipSpace) -> Result<Self> {
        if log_ratios.len() < 2 {
            return Err(Error::validation("a ratio set needs at least two samples"));
        }
        if log_ratios.iter().any(|l| !l.is_finite()) {
            return Err(Error::validation("log-ratios must all be finite"));
        }
        // Validate the (epsilon, space) pair eagerly.
        log_clip_bounds(epsilon, clip_space)?;
        Ok(LogRatioSet {
            log_ratios,
            epsilon,
            clip_space,
        })
    }

    pub fn group_size(&self) -> usize {
        self.log_ratios.len()
    }

    pub fn log_ratios(&self) -> &[f64] {
        &self.log_ratios
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn clip_space(&self) -> ClipSpace {
        self.clip_space
    }

    /// Log-ratios after the unconditional clamp.
    pub fn clipped_logs(&self) -> Vec<f64> {
        let (lo, hi) = log_clip_bounds(self.epsilon, self.clip_space).expect("validated");
        self.log_ratios.iter().map(|l| l.clamp(lo, hi)).collect()
    }
}

/// Which weighting produced a `ClippedWeightSet`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    GrpoConditional,
    Unconditional,
    StableDrl,
}

/// Clipped per-sample weights together with the normalized coefficients the
/// group update actually applies (including the `1/G` for unnormalized
/// modes).
#[derive(Clone, Debug)]
pub struct ClippedWeightSet {
    pub weights: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub mode: WeightMode,
}

impl ClippedWeightSet {
    pub fn max_weight(&self) -> f64 {
        self.weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean_weight(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len() as f64
    }

    pub fn max_coefficient(&self) -> f64 {
        self.coefficients
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Stable softmax over already-clipped values: subtract the max, exponentiate,
/// normalize by the sum. The max-shift realizes the shift invariance of the
/// softmax without ever exponentiating an unshifted value.
pub fn normalized_softmax(values: &[f64]) -> Vec<f64> {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Clip each log-ratio, then form normalized coefficients by stable softmax.
///
/// The returned `weights` are the clipped ratios `exp(clipped log)`; the
/// `coefficients` are nonnegative and sum to 1 (within 1e-12) and equal
/// `w_j / sum_k w_k` up to rounding.
pub fn clip_then_softmax(logs: &LogRatioSet) -> ClippedWeightSet {
    let clipped = logs.clipped_logs();
    let coefficients = normalized_softmax(&clipped);
    let weights: Vec<f64> = clipped.iter().map(|l| l.exp()).collect();
    ClippedWeightSet {
        weights,
        coefficients,
        mode: WeightMode::StableDrl,
    }
}

/// Unconditionally clipped weights with the plain `1/G` coefficients.
pub fn unconditional_weights(logs: &LogRatioSet) -> ClippedWeightSet {
    let weights: Vec<f64> = logs.clipped_logs().iter().map(|l| l.exp()).collect();
    let g = weights.len() as f64;
    let coefficients = weights.iter().map(|w| w / g).collect();
    ClippedWeightSet {
        weights,
        coefficients,
        mode: WeightMode::Unconditional,
    }
}

/// GRPO conditional multipliers with the plain `1/G` coefficients.
pub fn grpo_conditional_weights(logs: &LogRatioSet, advantages: &[f64]) -> Result<ClippedWeightSet> {
    if advantages.len() != logs.group_size() {
        return Err(Error::dimension("advantages/ratios length mismatch"));
    }
    let bounds = log_clip_bounds(logs.epsilon(), logs.clip_space())?;
    let weights: Vec<f64> = logs
        .log_ratios()
        .iter()
        .zip(advantages)
        .map(|(&l, &a)| effective_log_multiplier_grpo(l, a, bounds))
        .collect();
    let g = weights.len() as f64;
    let coefficients = weights.iter().map(|w| w / g).collect();
    Ok(ClippedWeightSet {
        weights,
        coefficients,
        mode: WeightMode::GrpoConditional,
    })
}

/// Empirical ratio distribution from a drift level plus log-ratio noise
/// samples: `rho_i = exp(drift + eta_i)`.
#[derive(Clone, Debug)]
pub struct RatioDecomposition {
    pub log_ratios: Vec<f64>,
    pub ratios: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

pub fn decompose_ratio_statistics(drift: f64, noise_samples: &[f64]) -> RatioDecomposition {
    let log_ratios: Vec<f64> = noise_samples.iter().map(|eta| drift + eta).collect();
    let ratios: Vec<f64> = log_ratios.iter().map(|l| l.exp()).collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
    let variance = if ratios.is_empty() {
        0.0
    } else {
        ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / ratios.len() as f64
    };
    RatioDecomposition {
        log_ratios,
        ratios,
        mean,
        variance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grpo_multiplier_branches() {
        // On-policy identity.
        assert_eq!(effective_multiplier_grpo(1.0, 1.0, 0.2).unwrap(), 1.0);
        assert_eq!(effective_multiplier_grpo(1.0, -1.0, 0.2).unwrap(), 1.0);
        // Positive advantage is capped; negative advantage is not.
        assert_eq!(effective_multiplier_grpo(2.0, 1.0, 0.2).unwrap(), 1.2);
        assert_eq!(effective_multiplier_grpo(2.0, -1.0, 0.2).unwrap(), 2.0);
        // The unbounded branch passes extreme ratios straight through.
        assert_eq!(effective_multiplier_grpo(1e5, -1.0, 0.2).unwrap(), 1e5);
        // Below-range ratios: floored only when the advantage is negative.
        assert_eq!(effective_multiplier_grpo(0.1, -1.0, 0.2).unwrap(), 0.8);
        assert_eq!(effective_multiplier_grpo(0.1, 1.0, 0.2).unwrap(), 0.1);
    }

    #[test]
    fn unconditional_clip_examples() {
        assert_eq!(clip_unconditional(1.1, 0.2, ClipSpace::Linear).unwrap(), 1.1);
        assert_eq!(clip_unconditional(0.5, 0.2, ClipSpace::Linear).unwrap(), 0.8);
        let big = clip_unconditional(1e5, 5.0, ClipSpace::LogSymmetric).unwrap();
        assert_eq!(big, 5.0f64.exp());
        assert!((big - 148.4131591025766).abs() < 1e-10);
        // Linear space with eps >= 1 is a configuration error pointing at
        // log-space clipping.
        let err = clip_unconditional(2.0, 5.0, ClipSpace::Linear).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("log_symmetric"));
    }

    #[test]
    fn asymmetric_space_clips_only_above() {
        let (lo, hi) = log_clip_bounds(5.0, ClipSpace::LogAsymmetric).unwrap();
        assert_eq!(hi, 5.0);
        assert_eq!(lo, f64::NEG_INFINITY);
        assert_eq!(
            clip_unconditional(1e-9, 5.0, ClipSpace::LogAsymmetric).unwrap(),
            1e-9
        );
    }

    #[test]
    fn equal_log_ratios_give_exactly_uniform_coefficients() {
        for g in 2..=8usize {
            let logs = LogRatioSet::new(vec![0.7; g], 5.0, ClipSpace::LogSymmetric).unwrap();
            let set = clip_then_softmax(&logs);
            for &a in &set.coefficients {
                assert_eq!(a, 1.0 / g as f64);
            }
        }
    }

    #[test]
    fn hand_softmax_of_clipped_values() {
        // Raw ratios (e^2, 1, 1) clipped at eps=0.5 linear -> (1.5, 1, 1),
        // so the coefficients are (3/7, 2/7, 2/7).
        let logs =
            LogRatioSet::new(vec![2.0, 0.0, 0.0], 0.5, ClipSpace::Linear).unwrap();
        let set = clip_then_softmax(&logs);
        assert!((set.weights[0] - 1.5).abs() < 1e-12);
        let expect = [3.0 / 7.0, 2.0 / 7.0, 2.0 / 7.0];
        for (a, e) in set.coefficients.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn extreme_log_ratios_survive() {
        let logs =
            LogRatioSet::new(vec![1e4, -1e4, 0.0], 5.0, ClipSpace::LogSymmetric).unwrap();
        let set = clip_then_softmax(&logs);
        assert!(set.coefficients.iter().all(|a| a.is_finite()));
        let sum: f64 = set.coefficients.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let expect = normalized_softmax(&[5.0, -5.0, 0.0]);
        for (a, e) in set.coefficients.iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn coefficients_match_weight_normalization() {
        let logs = LogRatioSet::new(
            vec![0.3, -1.2, 2.4, 0.0],
            5.0,
            ClipSpace::LogSymmetric,
        )
        .unwrap();
        let set = clip_then_softmax(&logs);
        let wsum: f64 = set.weights.iter().sum();
        for (a, w) in set.coefficients.iter().zip(&set.weights) {
            assert!((a - w / wsum).abs() < 1e-12);
        }
    }

    #[test]
    fn decompose_degenerate_and_shift() {
        let d = decompose_ratio_statistics(0.0, &[0.0; 16]);
        assert!(d.ratios.iter().all(|&r| r == 1.0));

        let noise = [0.3, -0.5, 1.1, 0.0];
        let base = decompose_ratio_statistics(0.0, &noise);
        let shifted = decompose_ratio_statistics(0.7, &noise);
        for (a, b) in base.log_ratios.iter().zip(&shifted.log_ratios) {
            assert_eq!(a + 0.7, *b);
        }
    }

    #[test]
    fn lognormal_mean_matches_closed_form() {
        use rand::Rng;
        let sigma = 0.8f64;
        let mut rng = crate::rng::derive_rng(77, "lognormal");
        let dist = rand_distr::Normal::new(0.0, sigma).unwrap();
        let noise: Vec<f64> = (0..100_000).map(|_| rng.sample(dist)).collect();
        let d = decompose_ratio_statistics(0.0, &noise);
        let expect = (sigma * sigma / 2.0).exp();
        let se = (d.variance / noise.len() as f64).sqrt();
        assert!(
            (d.mean - expect).abs() < 3.0 * se,
            "mean {} expect {expect} se {se}",
            d.mean
        );
    }

    #[test]
    fn ratio_set_rejects_bad_input() {
        assert!(LogRatioSet::new(vec![0.0], 5.0, ClipSpace::LogSymmetric).is_err());
        assert!(
            LogRatioSet::new(vec![0.0, f64::NAN], 5.0, ClipSpace::LogSymmetric).is_err()
        );
        assert!(LogRatioSet::new(vec![0.0, 1.0], 5.0, ClipSpace::Linear).is_err());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(
            values in proptest::collection::vec(-5.0f64..5.0, 2..12),
            shift in -50.0f64..50.0,
        ) {
            let base = normalized_softmax(&values);
            let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
            let moved = normalized_softmax(&shifted);
            for (a, b) in base.iter().zip(&moved) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn raising_one_log_ratio_never_lowers_its_coefficient(
            mut values in proptest::collection::vec(-8.0f64..8.0, 2..10),
            idx in 0usize..10,
            bump in 0.0f64..4.0,
        ) {
            let idx = idx % values.len();
            let logs = LogRatioSet::new(values.clone(), 5.0, ClipSpace::LogSymmetric).unwrap();
            let before = clip_then_softmax(&logs).coefficients[idx];
            values[idx] += bump;
            let logs = LogRatioSet::new(values, 5.0, ClipSpace::LogSymmetric).unwrap();
            let after = clip_then_softmax(&logs).coefficients[idx];
            prop_assert!(after >= before - 1e-12);
        }

        #[test]
        fn extreme_inputs_always_finite(
            values in proptest::collection::vec(-1e6f64..1e6, 2..16),
        ) {
            let logs = LogRatioSet::new(values, 5.0, ClipSpace::LogSymmetric).unwrap();
            let set = clip_then_softmax(&logs);
            prop_assert!(set.weights.iter().all(|w| w.is_finite()));
            prop_assert!(set.coefficients.iter().all(|a| a.is_finite()));
            let sum: f64 = set.coefficients.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
