//! Run orchestration: rollout, advantage, inner updates, logging.
//!
//! One outer step snapshots the behavior policy, samples a rollout group per
//! prompt, freezes the behavior-policy likelihood estimates, then performs the
//! configured inner updates with fresh numerator masks, logging one CSV row
//! per inner step. Collapse (a run whose updates are rejected for
//! `reject_quota` consecutive steps, or whose parameters go non-finite) is a
//! recorded terminal status, not an error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::diffusion::{
    estimate_elbo, evaluate_patterns, sample_patterns, Coupling, ElboEstimate, ElboOptions,
};
use crate::error::Result;
use crate::estimators::{
    apply_update_flat, compute_advantages, inner_update_loop, InnerLoopConfig, LrSchedule,
    OptimizerConfig, OptimizerKind, OptimizerState, RolloutGroup, SampleEval,
};
use crate::instability::{fixed_block_pattern, measure_drift_state, StressPolicy};
use crate::model::{DenoiserParams, TokenSequence};
use crate::rng::derive_rng;
use crate::runner::config::{RunConfig, StressCondition};
use crate::runner::tasks::ToyTask;

/// Fixed-order prefix of the metrics schema; later versions may append
/// columns but never reorder or remove these.
pub const METRICS_HEADER: &str = "step,inner_step,estimator,reward_mean,update_norm,spike,\
spike_threshold,D_i,S_i,ratio_min,ratio_max,alpha_max,rejected_step,max_sample_norm,\
mean_clip_weight,group_index,log10_ratio_min,log10_ratio_max";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Collapsed,
}

impl RunStatus {
    pub fn name(&self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::Collapsed => "collapsed",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub status: RunStatus,
    pub outer_steps_completed: usize,
    pub final_mean_reward: Option<f64>,
    pub out_dir: PathBuf,
}

fn seed_from(master: u64, label: &str) -> u64 {
    derive_rng(master, label).random()
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Execute a configured run and write its self-describing directory:
/// config copy, initial/final checkpoints, metrics CSV, and status file.
pub fn run_experiment(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let out_dir = resolve_out_dir(&config.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.txt"), config.to_text())?;

    let mut params = DenoiserParams::init(
        config.vocab_size,
        config.embed_dim,
        config.max_seq_len,
        config.block_size,
        config.seed,
    )?;
    let task = ToyTask::new(config.task, config.task_alphabet)?;
    if config.warmup_steps > 0 {
        supervised_warmup(config, &task, &mut params)?;
    }
    params.save(&out_dir.join("initial.ckpt"))?;

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    writeln!(metrics, "{METRICS_HEADER}")?;

    let mut opt_state = OptimizerState::new(config.optimizer_config(), params.param_count());
    let mut norm_history: Vec<f64> = Vec::new();
    let mut consecutive_rejects = 0usize;
    let mut status = RunStatus::Completed;
    let mut steps_done = 0usize;
    let mut last_reward = None;
    let mut reward_series: Vec<f64> = Vec::new();

    'outer: for step in 0..config.total_steps {
        let params_old = params.clone();
        for group_index in 0..config.groups_per_step {
            let mut group =
                build_group(config, &task, &params_old, step, group_index)?;
            last_reward = Some(group.mean_reward());
            if group_index == 0 {
                reward_series.push(group.mean_reward());
            }

            let trace = run_group_inner(
                config,
                &mut params,
                &params_old,
                &mut opt_state,
                &mut group,
                &mut norm_history,
                step,
                group_index,
            )?;

            for rec in &trace.records {
                let (log10_min, log10_max) = (
                    rec.log_ratio_min * std::f64::consts::LOG10_E,
                    rec.log_ratio_max * std::f64::consts::LOG10_E,
                );
                writeln!(
                    metrics,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    step,
                    rec.inner_step,
                    config.estimator.name(),
                    fmt_f64(group.mean_reward()),
                    fmt_f64(rec.update_norm),
                    u8::from(rec.spike),
                    fmt_opt(rec.spike_threshold),
                    fmt_opt(rec.drift.map(|d| d.d)),
                    fmt_opt(rec.drift.map(|d| d.s)),
                    fmt_f64(rec.log_ratio_min.exp()),
                    fmt_f64(rec.log_ratio_max.exp()),
                    fmt_f64(rec.alpha_max),
                    u8::from(rec.rejected),
                    fmt_f64(rec.max_sample_norm),
                    fmt_f64(rec.mean_clip_weight),
                    group_index,
                    fmt_f64(log10_min),
                    fmt_f64(log10_max),
                )?;
                if rec.rejected {
                    consecutive_rejects += 1;
                } else {
                    consecutive_rejects = 0;
                }
            }
            metrics.flush()?;

            if consecutive_rejects >= config.reject_quota || !params.all_finite() {
                status = RunStatus::Collapsed;
                steps_done = step + 1;
                break 'outer;
            }
        }
        steps_done = step + 1;
    }

    // A sustained, irreversible reward drop also counts as collapse, even
    // when parameters stay finite: the run's trailing mean ends far below its
    // running peak.
    if status == RunStatus::Completed && reward_collapsed(&reward_series) {
        status = RunStatus::Collapsed;
    }

    params.save(&out_dir.join("final.ckpt"))?;
    std::fs::write(
        out_dir.join("status.txt"),
        format!("status={}\nsteps={}\n", status.name(), steps_done),
    )?;
    Ok(RunSummary {
        status,
        outer_steps_completed: steps_done,
        final_mean_reward: last_reward,
        out_dir,
    })
}

/// Supervised likelihood ascent on prompt plus ideal response, the RL
/// starting point standing in for an instruction-tuned model.
fn supervised_warmup(
    config: &RunConfig,
    task: &ToyTask,
    params: &mut DenoiserParams,
) -> Result<()> {
    let mut opt = OptimizerState::new(
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: config.warmup_lr,
            schedule: LrSchedule::Constant,
            total_steps: 0,
            grad_clip: Some(1.0),
            ..OptimizerConfig::default()
        },
        params.param_count(),
    );
    for step in 0..config.warmup_steps {
        let label = if config.fixed_prompt {
            "prompt/fixed".to_string()
        } else {
            format!("warmup-prompt/{step}")
        };
        let mut rng = derive_rng(config.seed, &label);
        let prompt = task.generate_prompt(config.prompt_len, &mut rng);
        let response = task.ideal_response(&prompt, config.gen_len);
        let mut tokens = prompt;
        tokens.extend(response);
        let clean = TokenSequence::new(tokens, config.prompt_len);
        let seed = seed_from(config.seed, &format!("warmup/{step}"));
        let (_, grad) = crate::diffusion::estimate_elbo_grad(
            params,
            &clean,
            &standard_opts(config),
            seed,
        )?;
        let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut flat = params.flatten();
        apply_update_flat(&mut flat, &mut opt, &descent)?;
        params.set_from_flat(&flat)?;
    }
    Ok(())
}

/// Trailing-window reward means: collapsed iff the final window sits both
/// half below the running peak and a sizable margin under it in absolute
/// terms, so flat no-learning runs are not misclassified.
fn reward_collapsed(rewards: &[f64]) -> bool {
    const WINDOW: usize = 10;
    if rewards.len() < 2 * WINDOW {
        return false;
    }
    let window_mean = |end: usize| -> f64 {
        rewards[end - WINDOW..end].iter().sum::<f64>() / WINDOW as f64
    };
    let peak = (WINDOW..=rewards.len())
        .map(window_mean)
        .fold(f64::NEG_INFINITY, f64::max);
    let last = window_mean(rewards.len());
    (peak - last) >= (0.5 * peak).max(0.15)
}

/// The output-directory override is the only environment knob besides thread
/// count: `DRIFTLAB_OUT_DIR` replaces the configured parent directory.
fn resolve_out_dir(configured: &Path) -> PathBuf {
    match std::env::var_os("DRIFTLAB_OUT_DIR") {
        Some(base) if !base.is_empty() => {
            let name = configured
                .file_name()
                .map(|n| n.to_os_string())
                .unwrap_or_else(|| "run".into());
            PathBuf::from(base).join(name)
        }
        _ => configured.to_path_buf(),
    }
}

fn build_group(
    config: &RunConfig,
    task: &ToyTask,
    params_old: &DenoiserParams,
    step: usize,
    group_index: usize,
) -> Result<RolloutGroup> {
    let prompt_label = if config.fixed_prompt {
        "prompt/fixed".to_string()
    } else {
        format!("prompt/{step}/{group_index}")
    };
    let mut prompt_rng = derive_rng(config.seed, &prompt_label);
    let prompt_tokens = task.generate_prompt(config.prompt_len, &mut prompt_rng);
    let prompt = TokenSequence::new(prompt_tokens, config.prompt_len);

    let g = config.group_size;
    let mut rollouts = Vec::with_capacity(g);
    for j in 0..g {
        let seed = seed_from(config.seed, &format!("rollout/{step}/{group_index}/{j}"));
        rollouts.push(params_old.sample_rollout(
            &prompt,
            config.gen_len,
            config.block_size,
            config.steps_per_block,
            config.temperature,
            seed,
        )?);
    }
    let rewards: Vec<f64> = rollouts.iter().map(|x| task.reward(x)).collect();
    let advantages = compute_advantages(&rewards, config.advantage_mode)?;

    let stressed = stressed_members(config, step, group_index, g);
    let mut elbo_old = Vec::with_capacity(g);
    for (j, x) in rollouts.iter().enumerate() {
        let seed = seed_from(config.seed, &format!("den/{step}/{group_index}/{j}"));
        let estimate = if stressed.contains(&j) {
            // Hard denominator: many masked tokens, minimal context.
            hard_denominator(config, params_old, x, seed)?
        } else {
            estimate_elbo(params_old, x, &standard_opts(config), seed)?
        };
        elbo_old.push(estimate);
    }

    Ok(RolloutGroup {
        prompt,
        rollouts,
        rewards,
        advantages,
        elbo_new: vec![None; g],
        elbo_old,
        inner_step: 0,
    })
}

fn standard_opts(config: &RunConfig) -> ElboOptions {
    ElboOptions {
        m: config.mc_samples,
        policy: config.mask_policy(),
        arch: config.arch,
        t_floor: config.t_floor,
        sample_offset: 0,
    }
}

fn stressed_members(
    config: &RunConfig,
    step: usize,
    group_index: usize,
    g: usize,
) -> Vec<usize> {
    if config.stress != StressCondition::Exploding {
        return Vec::new();
    }
    let count = config.stress_config().stressed_count(g).min(g);
    let mut order: Vec<usize> = (0..g).collect();
    let mut rng = derive_rng(
        config.seed,
        &format!("stress-select/{step}/{group_index}"),
    );
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order.into_iter().take(count).collect()
}

fn hard_denominator(
    config: &RunConfig,
    params_old: &DenoiserParams,
    x: &TokenSequence,
    seed: u64,
) -> Result<ElboEstimate> {
    let resp = x.response_len();
    match config.stress_policy {
        StressPolicy::Random => {
            let opts = ElboOptions {
                m: config.mc_samples,
                policy: crate::diffusion::MaskPolicy::HeadBiased {
                    beta: config.stress_bias,
                    count: config.stress_t_max.min(resp),
                },
                arch: config.arch,
                t_floor: config.t_floor,
                sample_offset: 0,
            };
            let patterns = sample_patterns(x, params_old, &opts, seed, "stress-den")?;
            Ok(evaluate_patterns(params_old, &patterns, config.arch, false)?.0)
        }
        StressPolicy::Block => {
            let b = params_old.block_size.min(resp);
            let pattern = fixed_block_pattern(x, params_old, 0, b);
            Ok(evaluate_patterns(params_old, &[pattern], config.arch, false)?.0)
        }
    }
}

fn easy_numerator_patterns(
    config: &RunConfig,
    params: &DenoiserParams,
    x: &TokenSequence,
    seed: u64,
) -> Result<Vec<(crate::diffusion::CorruptedSequence, crate::diffusion::MaskPattern)>> {
    let resp = x.response_len();
    match config.stress_policy {
        StressPolicy::Random => {
            let opts = ElboOptions {
                m: config.mc_samples,
                policy: crate::diffusion::MaskPolicy::TailBiased {
                    beta: config.stress_bias,
                    count: config.stress_t_min.min(resp),
                },
                arch: config.arch,
                t_floor: config.t_floor,
                sample_offset: 0,
            };
            sample_patterns(x, params, &opts, seed, "stress-num")
        }
        StressPolicy::Block => {
            let b = params.block_size.min(resp);
            Ok(vec![fixed_block_pattern(x, params, resp - b, b)])
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_group_inner(
    config: &RunConfig,
    params: &mut DenoiserParams,
    params_old: &DenoiserParams,
    opt_state: &mut OptimizerState,
    group: &mut RolloutGroup,
    norm_history: &mut Vec<f64>,
    step: usize,
    group_index: usize,
) -> Result<crate::instability::DriftTrace> {
    let stressed = stressed_members(config, step, group_index, group.group_size());
    let rollouts = group.rollouts.clone();
    let old_values: Vec<f64> = group.elbo_old.iter().map(|e| e.value).collect();
    let cfg_clone = config.clone();
    let params_old_eval = params_old.clone();

    let mut evaluate = move |p: &DenoiserParams, j: usize, inner: usize| -> Result<SampleEval> {
        let x = &rollouts[j];
        let seed = seed_from(
            cfg_clone.seed,
            &format!("num/{step}/{group_index}/{inner}/{j}"),
        );
        if stressed.contains(&j) {
            // Easy numerator: few masked tokens, maximal context.
            let patterns = easy_numerator_patterns(&cfg_clone, p, x, seed)?;
            let (estimate, grad) = evaluate_patterns(p, &patterns, cfg_clone.arch, true)?;
            Ok(SampleEval {
                log_ratio: estimate.value - old_values[j],
                estimate,
                gradient: grad.expect("grad requested"),
            })
        } else {
            let opts = standard_opts(&cfg_clone);
            let patterns = sample_patterns(x, p, &opts, seed, "elbo")?;
            let (estimate, grad) = evaluate_patterns(p, &patterns, cfg_clone.arch, true)?;
            let old_value = match cfg_clone.coupling {
                Coupling::Independent => old_values[j],
                Coupling::SharedMasks => {
                    // Control condition: the behavior value is re-estimated on
                    // the numerator's own mask draws.
                    evaluate_patterns(&params_old_eval, &patterns, cfg_clone.arch, false)?
                        .0
                        .value
                }
            };
            Ok(SampleEval {
                log_ratio: estimate.value - old_value,
                estimate,
                gradient: grad.expect("grad requested"),
            })
        }
    };

    let drift_cfg = config.clone();
    let drift_old = params_old.clone();
    let mut drift_probe = move |p: &DenoiserParams,
                                g: &RolloutGroup,
                                inner: usize|
          -> Result<Option<crate::instability::DriftState>> {
        if drift_cfg.drift_every == 0 || step % drift_cfg.drift_every != 0 {
            return Ok(None);
        }
        let seed = seed_from(
            drift_cfg.seed,
            &format!("drift/{step}/{group_index}/{inner}"),
        );
        measure_drift_state(
            g,
            p,
            &drift_old,
            drift_cfg.a0,
            drift_cfg.drift_mc,
            drift_cfg.arch,
            seed,
        )
    };

    let loop_cfg = InnerLoopConfig {
        num_inner: config.num_inner,
        estimator: config.estimator,
        epsilon: config.epsilon,
        clip_space: config.clip_space,
        spike_window: config.spike_window,
        spike_delta: config.spike_delta,
        sample_grad_clip: if config.sample_grad_clip > 0.0 {
            Some(config.sample_grad_clip)
        } else {
            None
        },
    };
    inner_update_loop(
        params,
        opt_state,
        group,
        &mut evaluate,
        &mut drift_probe,
        &loop_cfg,
        norm_history,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_keeps_the_fixed_column_prefix() {
        assert!(METRICS_HEADER.starts_with(
            "step,inner_step,estimator,reward_mean,update_norm,spike,spike_threshold,\
             D_i,S_i,ratio_min,ratio_max,alpha_max,rejected_step"
        ));
    }
}
