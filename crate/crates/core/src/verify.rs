//! Runnable property checks behind the `verify` CLI subcommand and the
//! acceptance suite.
//!
//! Deterministic fuzz checks of the update-geometry bounds (convex hull,
//! saturation ceiling, scale decomposition, conditional unboundedness),
//! numerical-stability fuzz of clip-then-softmax, the Monte Carlo exceedance
//! grid, the staircase equivalence / leakage / timing bundle, and
//! finite-difference gradient checks of the likelihood-bound surrogate.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::diffusion::{corrupt, evaluate_patterns, ElboArch, MaskPolicy};
use crate::error::Result;
use crate::estimators::{combine_group_update, Estimator};
use crate::instability::{
    verify_dominance_lemma, verify_exceedance_identity, verify_spike_bound, GroupConfig,
    NoiseFamily, TailEnvelope,
};
use crate::model::{DenoiserParams, TokenSequence};
use crate::ratios::{clip_then_softmax, ClipSpace, LogRatioSet};
use crate::rng::{derive_rng, derive_rng_indexed};
use crate::staircase::{iterative_reference, staircase_block_logprobs, staircase_forward};

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub pass: bool,
    pub details: String,
    pub elapsed_secs: f64,
}

impl CheckReport {
    fn new(name: &str, pass: bool, details: String, started: Instant) -> Self {
        CheckReport {
            name: name.to_string(),
            pass,
            details,
            elapsed_secs: started.elapsed().as_secs_f64(),
        }
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} ({:.2}s) {}",
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.elapsed_secs,
            self.details
        )
    }
}

/// One fuzzed group: advantages, log-ratios spanning ratio magnitudes
/// `1e-6..1e6`, random gradient directions, and an alternating clip space.
struct FuzzGroup {
    advantages: Vec<f64>,
    log_ratios: Vec<f64>,
    gradients: Vec<Vec<f64>>,
    epsilon: f64,
    clip_space: ClipSpace,
}

fn fuzz_group(seed: u64, index: u64) -> FuzzGroup {
    let mut rng = derive_rng_indexed(seed, "fuzz-group", index);
    let g = rng.random_range(2..=32usize);
    let dim = rng.random_range(2..=16usize);
    let dist = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
    let advantages: Vec<f64> = (0..g).map(|_| rng.sample(dist)).collect();
    let span = 1e6f64.ln();
    let log_ratios: Vec<f64> = (0..g)
        .map(|_| rng.random::<f64>() * 2.0 * span - span)
        .collect();
    let gradients: Vec<Vec<f64>> = (0..g)
        .map(|_| (0..dim).map(|_| rng.sample(dist)).collect())
        .collect();
    let (epsilon, clip_space) = if index % 2 == 0 {
        (5.0, ClipSpace::LogSymmetric)
    } else {
        (0.5, ClipSpace::Linear)
    };
    FuzzGroup {
        advantages,
        log_ratios,
        gradients,
        epsilon,
        clip_space,
    }
}

/// Convex-hull bound: the self-normalized update never exceeds the largest
/// advantage-weighted per-sample gradient norm.
pub fn check_convex_hull(groups: usize, seed: u64) -> CheckReport {
    let started = Instant::now();
    let violations: usize = (0..groups as u64)
        .into_par_iter()
        .map(|i| {
            let fz = fuzz_group(seed, i);
            let u = combine_group_update(
                &fz.advantages,
                &fz.log_ratios,
                &fz.gradients,
                Estimator::StableDrl,
                fz.epsilon,
                fz.clip_space,
            )
            .expect("fuzz group is valid");
            usize::from(u.norm > (1.0 + 1e-9) * u.max_sample_norm())
        })
        .sum();
    CheckReport::new(
        "convex-hull",
        violations == 0,
        format!("{groups} fuzzed groups, {violations} violations"),
        started,
    )
}

/// Saturation ceiling: the unconditionally clipped update never exceeds the
/// linear-space upper clip times the largest per-sample norm.
pub fn check_saturation(groups: usize, seed: u64) -> CheckReport {
    let started = Instant::now();
    let violations: usize = (0..groups as u64)
        .into_par_iter()
        .map(|i| {
            let fz = fuzz_group(seed, i);
            let u = combine_group_update(
                &fz.advantages,
                &fz.log_ratios,
                &fz.gradients,
                Estimator::UcGrpo,
                fz.epsilon,
                fz.clip_space,
            )
            .expect("fuzz group is valid");
            let ceiling = crate::ratios::upper_clip_linear(fz.epsilon, fz.clip_space)
                .expect("valid clip config");
            usize::from(u.norm > ceiling * u.max_sample_norm() * (1.0 + 1e-9))
        })
        .sum();
    CheckReport::new(
        "saturation",
        violations == 0,
        format!("{groups} fuzzed groups, {violations} violations"),
        started,
    )
}

/// Scale decomposition: the clipped-only update equals the mean clipped
/// weight times the self-normalized update.
pub fn check_scale_decomposition(groups: usize, seed: u64) -> CheckReport {
    let started = Instant::now();
    let worst: f64 = (0..groups as u64)
        .into_par_iter()
        .map(|i| {
            let fz = fuzz_group(seed, i);
            let uc = combine_group_update(
                &fz.advantages,
                &fz.log_ratios,
                &fz.gradients,
                Estimator::UcGrpo,
                fz.epsilon,
                fz.clip_space,
            )
            .expect("valid");
            let sn = combine_group_update(
                &fz.advantages,
                &fz.log_ratios,
                &fz.gradients,
                Estimator::StableDrl,
                fz.epsilon,
                fz.clip_space,
            )
            .expect("valid");
            let mean_w: f64 =
                uc.effective_weights.iter().sum::<f64>() / fz.advantages.len() as f64;
            let err: f64 = uc
                .direction
                .iter()
                .zip(&sn.direction)
                .map(|(u, s)| (u - mean_w * s).abs())
                .fold(0.0, f64::max);
            err / uc.norm.max(1e-300)
        })
        .reduce(|| 0.0, f64::max);
    CheckReport::new(
        "scale-decomposition",
        worst < 1e-12,
        format!("{groups} fuzzed groups, worst relative error {worst:.3e}"),
        started,
    )
}

/// Conditional unboundedness: one negative-advantage outlier pushes the
/// conditional-clip update past any bound while the clipped variants hold.
pub fn check_grpo_unbounded() -> CheckReport {
    let started = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for c in [10.0, 1e3, 1e6] {
        let g = 2.0;
        let (a0, b0) = (1.0, 1.0);
        let ratio: f64 = 10.0 * c * g / (a0 * b0);
        let advantages = [1.0, -a0];
        let log_ratios = [0.0, ratio.ln()];
        let grads = vec![vec![1.0, 0.0], vec![0.0, b0]];
        let grpo = combine_group_update(
            &advantages,
            &log_ratios,
            &grads,
            Estimator::Grpo,
            0.5,
            ClipSpace::Linear,
        )
        .expect("valid");
        let uc = combine_group_update(
            &advantages,
            &log_ratios,
            &grads,
            Estimator::UcGrpo,
            0.5,
            ClipSpace::Linear,
        )
        .expect("valid");
        let sn = combine_group_update(
            &advantages,
            &log_ratios,
            &grads,
            Estimator::StableDrl,
            0.5,
            ClipSpace::Linear,
        )
        .expect("valid");
        let max_sample = grpo.max_sample_norm();
        let ok = grpo.norm > c
            && uc.norm <= 1.5 * max_sample * (1.0 + 1e-9)
            && sn.norm <= max_sample * (1.0 + 1e-9);
        pass &= ok;
        lines.push(format!(
            "C={c:.0e}: grpo {:.3e}, uc {:.3e}, sn {:.3e}",
            grpo.norm, uc.norm, sn.norm
        ));
    }
    CheckReport::new("grpo-unbounded", pass, lines.join("; "), started)
}

/// Clip-then-softmax survives log-ratios of magnitude up to 1e6: finite
/// coefficients summing to 1.
pub fn check_clip_softmax(groups: usize, seed: u64) -> CheckReport {
    let started = Instant::now();
    let violations: usize = (0..groups as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = derive_rng_indexed(seed, "clip-softmax", i);
            let g = rng.random_range(2..=32usize);
            let logs: Vec<f64> = (0..g)
                .map(|_| rng.random::<f64>() * 2e6 - 1e6)
                .collect();
            let set = clip_then_softmax(
                &LogRatioSet::new(logs, 5.0, ClipSpace::LogSymmetric).expect("finite"),
            );
            let sum: f64 = set.coefficients.iter().sum();
            let bad = set.coefficients.iter().any(|a| !a.is_finite())
                || set.weights.iter().any(|w| !w.is_finite())
                || (sum - 1.0).abs() > 1e-12;
            usize::from(bad)
        })
        .sum();
    CheckReport::new(
        "clip-softmax",
        violations == 0,
        format!("{groups} fuzzed groups at |log-ratio| <= 1e6, {violations} violations"),
        started,
    )
}

/// Exceedance identity across noise families, drifts, and thresholds.
pub fn check_exceedance_grid(trials: usize, seed: u64) -> CheckReport {
    let started = Instant::now();
    let envelopes = [
        ("gaussian", TailEnvelope::new(NoiseFamily::Gaussian, 1.0).expect("valid")),
        ("laplace", TailEnvelope::new(NoiseFamily::Laplace, 1.0).expect("valid")),
        (
            "student_t4",
            TailEnvelope::new(NoiseFamily::StudentT(4.0), 1.0).expect("valid"),
        ),
    ];
    let drifts = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let us = [0.25, 0.5, 1.0, std::f64::consts::E, 10.0, 40.0, 100.0];
    let mut cells: Vec<(usize, f64, f64)> = Vec::new();
    for ei in 0..envelopes.len() {
        for &d in &drifts {
            for &u in &us {
                cells.push((ei, d, u));
            }
        }
    }
    let failures: Vec<String> = cells
        .par_iter()
        .enumerate()
        .filter_map(|(ci, &(ei, drift, u))| {
            let report = verify_exceedance_identity(
                &envelopes[ei].1,
                drift,
                u,
                trials,
                seed.wrapping_add(ci as u64),
            )
            .expect("valid cell");
            if report.z_score.abs() > 3.0 {
                Some(format!(
                    "{} drift={drift} u={u}: z={:.2}",
                    envelopes[ei].0, report.z_score
                ))
            } else {
                None
            }
        })
        .collect();
    let budget = (cells.len() as f64 * 0.01).floor() as usize;
    let pass = failures.len() <= budget;
    CheckReport::new(
        "exceedance",
        pass,
        format!(
            "{} cells x {trials} trials, {} over 3 sigma (budget {budget}){}",
            cells.len(),
            failures.len(),
            if failures.is_empty() {
                String::new()
            } else {
                format!(": {}", failures.join(", "))
            }
        ),
        started,
    )
}

fn staircase_case(
    seed: u64,
    k: usize,
    block: usize,
    embed_dim: usize,
) -> (DenoiserParams, TokenSequence, crate::diffusion::CorruptedSequence) {
    let n = k * block;
    let mut params =
        DenoiserParams::init(11, embed_dim, (2 * n).max(8), block, seed).expect("valid dims");
    let mut rng = derive_rng(seed, "verify-staircase");
    params.w_out = Tensor::randn(vec![embed_dim, 10], 0.6, &mut rng);
    let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..10usize)).collect();
    let clean = TokenSequence::new(tokens, 0);
    let level = 0.2 + 0.6 * rng.random::<f64>();
    let (corrupted, _) = corrupt(
        &clean,
        level,
        &MaskPolicy::Uniform,
        params.mask_token(),
        seed,
    )
    .expect("valid corruption");
    (params, clean, corrupted)
}

/// Staircase correctness: single-pass equals the iterative oracle, gradient
/// leakage into same-or-later clean blocks is exactly zero, and the single
/// pass beats the iterative loop by the required factor at K=16.
pub fn check_staircase(cases: usize, seed: u64, speedup_required: f64) -> CheckReport {
    let started = Instant::now();
    let ks = [1usize, 2, 4, 8];
    let mut worst_diff = 0.0f64;
    let mut leak_violations = 0usize;
    for case in 0..cases as u64 {
        let k = ks[case as usize % ks.len()];
        let block = [2usize, 3, 4][case as usize % 3];
        let (params, clean, corrupted) = staircase_case(seed.wrapping_add(case), k, block, 6);
        let fast = staircase_block_logprobs(&params, &clean, &corrupted).expect("staircase");
        let slow = iterative_reference(&params, &clean, &corrupted).expect("reference");
        let n = clean.len();
        for p in 0..n {
            for c in 0..params.out_vocab() {
                worst_diff = worst_diff.max((fast.log_prob(p, c) - slow.log_prob(p, c)).abs());
            }
        }
        // Gradient leakage for every block.
        let d = params.embed_dim;
        for kb in 0..k {
            let mut tape = crate::autodiff::Tape::new();
            let ids = params.register_on(&mut tape);
            let nodes = staircase_forward(&params, &mut tape, &ids, &clean.tokens, &corrupted.tokens)
                .expect("forward");
            let picks: Vec<(usize, usize)> = (kb * block..(kb + 1) * block)
                .flat_map(|p| (0..params.out_vocab()).map(move |c| (n + p, c)))
                .collect();
            let probe = tape
                .gather_weighted_sum(nodes.log_probs, &picks, 1.0)
                .expect("probe");
            tape.backward_scalar(probe).expect("backward");
            let g = tape.grad(nodes.token_embed).expect("grad");
            for pos in kb * block..n {
                for c in 0..d {
                    if g[pos * d + c] != 0.0 {
                        leak_violations += 1;
                    }
                }
            }
        }
    }

    // Timing at K=16 on the toy model, sized so arithmetic dominates
    // per-pass bookkeeping. Passes are interleaved and the minimum over
    // repetitions taken, so transient load hits both sides alike; a few
    // retries guard against sustained contention from parallel test threads.
    let (params, clean, corrupted) = staircase_case(seed.wrapping_add(9999), 16, 4, 24);
    let measure = || {
        let mut fast_best = f64::INFINITY;
        let mut slow_best = f64::INFINITY;
        for _ in 0..11 {
            let t = Instant::now();
            std::hint::black_box(
                staircase_block_logprobs(&params, &clean, &corrupted).expect("staircase"),
            );
            fast_best = fast_best.min(t.elapsed().as_secs_f64());
            let t = Instant::now();
            std::hint::black_box(
                iterative_reference(&params, &clean, &corrupted).expect("reference"),
            );
            slow_best = slow_best.min(t.elapsed().as_secs_f64());
        }
        slow_best / fast_best
    };
    let mut speedup = measure();
    for _ in 0..3 {
        if speedup >= speedup_required {
            break;
        }
        speedup = speedup.max(measure());
    }

    let pass = worst_diff < 1e-10 && leak_violations == 0 && speedup >= speedup_required;
    CheckReport::new(
        "staircase",
        pass,
        format!(
            "{cases} cases: worst |diff| {worst_diff:.3e}, leaked coords {leak_violations}, \
             K=16 speedup {speedup:.1}x (need {speedup_required}x)"
        ),
        started,
    )
}

/// Finite-difference gradient check of the likelihood-bound surrogate.
pub fn check_gradcheck(configs: usize, seed: u64) -> CheckReport {
    let started = Instant::now();
    let worst: f64 = (0..configs as u64)
        .into_par_iter()
        .map(|case| {
            gradcheck_single(seed, case).expect("gradcheck case")
        })
        .reduce(|| 0.0, f64::max);
    CheckReport::new(
        "gradcheck",
        worst < 1e-4,
        format!("{configs} seeded configurations, worst relative error {worst:.3e}"),
        started,
    )
}

fn gradcheck_single(seed: u64, case: u64) -> Result<f64> {
    let mut rng = derive_rng_indexed(seed, "gradcheck-cfg", case);
    let mut params = DenoiserParams::init(9, 4, 12, 2, seed ^ case)?;
    params.w_out = Tensor::randn(vec![4, 8], 0.5, &mut rng);
    let n = 8;
    let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..8usize)).collect();
    let clean = TokenSequence::new(tokens, 2);
    let arch = if case % 2 == 0 {
        ElboArch::Full
    } else {
        ElboArch::Block
    };
    let mut patterns = Vec::new();
    for tau in 0..2u64 {
        let t = 0.3 + 0.5 * rng.random::<f64>();
        patterns.push(corrupt(
            &clean,
            t,
            &MaskPolicy::Uniform,
            params.mask_token(),
            seed ^ (case * 31 + tau),
        )?);
    }
    let (_, grad) = evaluate_patterns(&params, &patterns, arch, true)?;
    let grad = grad.expect("requested");

    let h = 1e-5;
    let flat = params.flatten();
    let mut worst = 0.0f64;
    for coord in 0..flat.len() {
        let mut plus = params.clone();
        let mut fp = flat.clone();
        fp[coord] += h;
        plus.set_from_flat(&fp)?;
        let mut minus = params.clone();
        let mut fm = flat.clone();
        fm[coord] -= h;
        minus.set_from_flat(&fm)?;
        let vp = evaluate_patterns(&plus, &patterns, arch, false)?.0.value;
        let vm = evaluate_patterns(&minus, &patterns, arch, false)?.0.value;
        let fd = (vp - vm) / (2.0 * h);
        let a = grad[coord];
        // Tiny analytic coordinates are held to an absolute 1e-8 budget,
        // mapped onto the shared metric so a boundary hit lands exactly at
        // the 1e-4 pass threshold.
        let err = if a.abs() < 1e-8 {
            (fd - a).abs() * 1e4
        } else {
            (fd - a).abs() / a.abs()
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Dominance lemma at the configured regime boundary.
pub fn check_dominance(seed: u64) -> CheckReport {
    let started = Instant::now();
    let cfg = GroupConfig {
        group_size: 9,
        a0: 0.5,
        b0: 1.0,
        b_bound: 2.0,
        w_resid: 4.0,
    };
    let lambda = 0.5;
    let u0 = cfg.u_zero(lambda).expect("valid lambda");
    let rows = verify_dominance_lemma(&cfg, lambda, &[u0, 2.0 * u0, 10.0 * u0], 100_000, seed)
        .expect("valid grid");
    let pass = rows.iter().all(|r| r.bound_holds);
    let details = rows
        .iter()
        .map(|r| format!("u={:.1}: p={:.4}", r.u, r.conditional_probability))
        .collect::<Vec<_>>()
        .join(", ");
    CheckReport::new("dominance", pass, details, started)
}

/// Spike-probability lower bound in pure simulation.
pub fn check_spike_bound(seed: u64) -> CheckReport {
    let started = Instant::now();
    let env = TailEnvelope::new(NoiseFamily::Gaussian, 2.0).expect("valid");
    let cfg = GroupConfig {
        group_size: 9,
        a0: 0.5,
        b0: 1.0,
        b_bound: 2.0,
        w_resid: 4.0,
    };
    let mut pass = true;
    let mut lines = Vec::new();
    for drift in [0.0, 1.0, 2.0] {
        let r = verify_spike_bound(&env, &cfg, drift, 5.0, 0.5, 1.5, 200_000, seed)
            .expect("valid sim");
        pass &= r.holds;
        lines.push(format!(
            "drift={drift}: empirical {:.4} >= bound {:.4}",
            r.empirical, r.analytic_lower_bound
        ));
    }
    CheckReport::new("spike-bound", pass, lines.join("; "), started)
}

/// The full named-check registry used by the CLI.
pub fn all_check_names() -> Vec<&'static str> {
    vec![
        "convex-hull",
        "saturation",
        "scale-decomposition",
        "grpo-unbounded",
        "clip-softmax",
        "exceedance",
        "staircase",
        "gradcheck",
        "dominance",
        "spike-bound",
    ]
}

/// Run a named check with its default budget.
pub fn run_check(name: &str) -> Result<CheckReport> {
    let report = match name {
        "convex-hull" => check_convex_hull(100_000, 1),
        "saturation" => check_saturation(100_000, 1),
        "scale-decomposition" => check_scale_decomposition(100_000, 1),
        "grpo-unbounded" => check_grpo_unbounded(),
        "clip-softmax" => check_clip_softmax(10_000, 2),
        "exceedance" => check_exceedance_grid(100_000, 3),
        "staircase" => check_staircase(100, 4, 4.0),
        "gradcheck" => check_gradcheck(100, 5),
        "dominance" => check_dominance(6),
        "spike-bound" => check_spike_bound(7),
        other => {
            return Err(crate::error::Error::usage(format!(
                "unknown verification target '{other}' (expected one of {}, or 'all')",
                all_check_names().join(", ")
            )))
        }
    };
    Ok(report)
}
