//! The four group-update estimators and the optimizer.
//!
//! Given a rollout group with standardized advantages, per-sample score
//! gradients `g_j`, and estimated log-ratios, the update direction is
//!
//! - `pg`:        (1/G) sum_j A_j g_j                       (ratio fixed at 1)
//! - `grpo`:      (1/G) sum_j m_j A_j g_j                   (conditional clip)
//! - `uc_grpo`:   (1/G) sum_j clip(rho_j) A_j g_j           (two-sided clip)
//! - `stabledrl`: sum_j alpha_j A_j g_j                     (clip-then-softmax)
//!
//! Weights are constants in the backward sense: gradients flow only through
//! the score surrogate, never through the ratio path.

use crate::diffusion::ElboEstimate;
use crate::error::{Error, Result};
use crate::instability::{spike_indicator, DriftState, DriftTrace, InnerStepRecord};
use crate::model::{DenoiserParams, TokenSequence};
use crate::ratios::{
    clip_then_softmax, grpo_conditional_weights, unconditional_weights, ClipSpace, LogRatioSet,
};

/// Which group-update rule combines the per-sample gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    PolicyGradient,
    Grpo,
    UcGrpo,
    StableDrl,
}

impl Estimator {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pg" => Ok(Estimator::PolicyGradient),
            "grpo" => Ok(Estimator::Grpo),
            "uc_grpo" => Ok(Estimator::UcGrpo),
            "stabledrl" => Ok(Estimator::StableDrl),
            other => Err(Error::config(format!("unknown estimator '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::PolicyGradient => "pg",
            Estimator::Grpo => "grpo",
            Estimator::UcGrpo => "uc_grpo",
            Estimator::StableDrl => "stabledrl",
        }
    }
}

/// How rewards become advantages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvantageMode {
    Standardized,
    RawCentered,
}

impl AdvantageMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standardized" => Ok(AdvantageMode::Standardized),
            "raw_centered" => Ok(AdvantageMode::RawCentered),
            other => Err(Error::config(format!("unknown advantage mode '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AdvantageMode::Standardized => "standardized",
            AdvantageMode::RawCentered => "raw_centered",
        }
    }
}

/// Group-relative advantages. `Standardized` divides the centered rewards by
/// the population standard deviation floored at 1e-8, so zero-variance groups
/// produce all-zero advantages.
pub fn compute_advantages(rewards: &[f64], mode: AdvantageMode) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::validation("advantage needs a group of at least 2"));
    }
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    match mode {
        AdvantageMode::RawCentered => Ok(rewards.iter().map(|r| r - mean).collect()),
        AdvantageMode::Standardized => {
            let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g;
            let std = var.sqrt().max(1e-8);
            Ok(rewards.iter().map(|r| (r - mean) / std).collect())
        }
    }
}

/// G completed trajectories for one prompt, with rewards, advantages, and the
/// likelihood-bound estimates under both policies.
#[derive(Clone, Debug)]
pub struct RolloutGroup {
    pub prompt: TokenSequence,
    pub rollouts: Vec<TokenSequence>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Refreshed each inner step under the current policy.
    pub elbo_new: Vec<Option<ElboEstimate>>,
    /// Frozen behavior-policy estimates from group creation.
    pub elbo_old: Vec<ElboEstimate>,
    pub inner_step: usize,
}

impl RolloutGroup {
    pub fn group_size(&self) -> usize {
        self.rollouts.len()
    }

    /// Per-sample log-ratios against the frozen behavior estimates.
    pub fn log_ratios(&self) -> Result<Vec<f64>> {
        self.elbo_new
            .iter()
            .zip(&self.elbo_old)
            .map(|(new, old)| {
                let new = new
                    .as_ref()
                    .ok_or_else(|| Error::state("log_ratios before the first inner evaluation"))?;
                Ok(new.value - old.value)
            })
            .collect()
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len().max(1) as f64
    }
}

/// A combined group update: flattened ascent direction on the expected
/// reward, plus the diagnostics the run log records.
#[derive(Clone, Debug)]
pub struct UpdateVector {
    pub direction: Vec<f64>,
    pub norm: f64,
    pub estimator: Estimator,
    /// Norms of the advantage-weighted per-sample gradients `|A_j g_j|`.
    pub per_sample_norms: Vec<f64>,
    /// The weights actually applied: 1 for pg, the conditional multiplier for
    /// grpo, the clipped ratio for uc_grpo, the normalized coefficient for
    /// stabledrl.
    pub effective_weights: Vec<f64>,
}

impl UpdateVector {
    pub fn max_sample_norm(&self) -> f64 {
        self.per_sample_norms
            .iter()
            .cloned()
            .fold(0.0, f64::max)
    }
}

fn norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Combine per-sample score gradients into one group update.
///
/// `gradients[j]` is the raw score-surrogate gradient of sample `j`; the
/// advantage is applied here. All four estimators share the same accumulation
/// loop, so equal coefficient vectors give bit-identical directions.
pub fn combine_group_update(
    advantages: &[f64],
    log_ratios: &[f64],
    gradients: &[Vec<f64>],
    estimator: Estimator,
    epsilon: f64,
    clip_space: ClipSpace,
) -> Result<UpdateVector> {
    let g = advantages.len();
    if g < 2 {
        return Err(Error::validation("group update needs at least 2 samples"));
    }
    if log_ratios.len() != g || gradients.len() != g {
        return Err(Error::dimension("group component lengths differ"));
    }
    let dim = gradients[0].len();
    if gradients.iter().any(|gr| gr.len() != dim) {
        return Err(Error::dimension("per-sample gradient dims differ"));
    }

    let (coefficients, effective_weights): (Vec<f64>, Vec<f64>) = match estimator {
        Estimator::PolicyGradient => {
            let c = vec![1.0 / g as f64; g];
            (c, vec![1.0; g])
        }
        Estimator::Grpo => {
            let logs = LogRatioSet::new(log_ratios.to_vec(), epsilon, clip_space)?;
            let set = grpo_conditional_weights(&logs, advantages)?;
            (set.coefficients, set.weights)
        }
        Estimator::UcGrpo => {
            let logs = LogRatioSet::new(log_ratios.to_vec(), epsilon, clip_space)?;
            let set = unconditional_weights(&logs);
            (set.coefficients, set.weights)
        }
        Estimator::StableDrl => {
            let logs = LogRatioSet::new(log_ratios.to_vec(), epsilon, clip_space)?;
            let set = clip_then_softmax(&logs);
            let w = set.coefficients.clone();
            (set.coefficients, w)
        }
    };

    let mut direction = vec![0.0; dim];
    let mut per_sample_norms = Vec::with_capacity(g);
    for j in 0..g {
        let scale = coefficients[j] * advantages[j];
        for (d, gj) in direction.iter_mut().zip(&gradients[j]) {
            *d += scale * gj;
        }
        per_sample_norms.push(advantages[j].abs() * norm(&gradients[j]));
    }

    Ok(UpdateVector {
        norm: norm(&direction),
        direction,
        estimator,
        per_sample_norms,
        effective_weights,
    })
}

/// Optimizer selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(Error::config(format!("unknown optimizer '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::AdamW => "adamw",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    LinearDecay,
}

impl LrSchedule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "linear" => Ok(LrSchedule::LinearDecay),
            other => Err(Error::config(format!("unknown lr schedule '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::LinearDecay => "linear",
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Horizon for the linear decay; 0 disables decay.
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip on the applied step direction; `None` disables.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.05,
            schedule: LrSchedule::Constant,
            total_steps: 0,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: None,
        }
    }
}

/// Optimizer state: step count plus first/second-moment accumulators sized to
/// the flattened parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, param_count: usize) -> Self {
        OptimizerState {
            config,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    fn current_lr(&self) -> f64 {
        match self.config.schedule {
            LrSchedule::Constant => self.config.lr,
            LrSchedule::LinearDecay => {
                if self.config.total_steps == 0 {
                    self.config.lr
                } else {
                    let frac = 1.0 - self.step as f64 / self.config.total_steps as f64;
                    self.config.lr * frac.max(0.0)
                }
            }
        }
    }
}

/// What happened when a step was applied.
#[derive(Clone, Copy, Debug)]
pub struct StepOutcome {
    pub applied: bool,
    /// True when the update direction was non-finite and the step was
    /// skipped; the run continues and the rejection is logged.
    pub rejected: bool,
    pub clipped: bool,
    pub lr_used: f64,
}

/// Descent step on flattened parameters: optional global-norm clip, then SGD
/// or AdamW with the scheduled learning rate. The parameter delta for plain
/// SGD is exactly `-lr * update`.
pub fn apply_update_flat(
    params: &mut [f64],
    state: &mut OptimizerState,
    update: &[f64],
) -> Result<StepOutcome> {
    if params.len() != update.len() {
        return Err(Error::dimension("update length differs from parameters"));
    }
    if state.m.len() != params.len() {
        return Err(Error::dimension("optimizer state sized for a different parameter count"));
    }
    if update.iter().any(|u| !u.is_finite()) {
        return Ok(StepOutcome {
            applied: false,
            rejected: true,
            clipped: false,
            lr_used: 0.0,
        });
    }
    let mut step_dir: Vec<f64> = update.to_vec();
    let mut clipped = false;
    if let Some(limit) = state.config.grad_clip {
        let n = norm(&step_dir);
        if n > limit && n > 0.0 {
            let s = limit / n;
            for d in step_dir.iter_mut() {
                *d *= s;
            }
            clipped = true;
        }
    }
    let lr = state.current_lr();
    match state.config.kind {
        OptimizerKind::Sgd => {
            for (p, d) in params.iter_mut().zip(&step_dir) {
                *p -= lr * d;
            }
        }
        OptimizerKind::AdamW => {
            let (b1, b2) = (state.config.beta1, state.config.beta2);
            let t = (state.step + 1) as i32;
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            for i in 0..params.len() {
                state.m[i] = b1 * state.m[i] + (1.0 - b1) * step_dir[i];
                state.v[i] = b2 * state.v[i] + (1.0 - b2) * step_dir[i] * step_dir[i];
                let mhat = state.m[i] / bc1;
                let vhat = state.v[i] / bc2;
                params[i] -=
                    lr * (mhat / (vhat.sqrt() + state.config.eps) + state.config.weight_decay * params[i]);
            }
        }
    }
    state.step += 1;
    Ok(StepOutcome {
        applied: true,
        rejected: false,
        clipped,
        lr_used: lr,
    })
}

/// Descent step on the denoiser parameters from an ascent-direction update:
/// the direction is negated, clipped, and fed to the optimizer.
pub fn apply_ascent_update(
    params: &mut DenoiserParams,
    state: &mut OptimizerState,
    update: &UpdateVector,
) -> Result<StepOutcome> {
    let descent: Vec<f64> = update.direction.iter().map(|d| -d).collect();
    let mut flat = params.flatten();
    let outcome = apply_update_flat(&mut flat, state, &descent)?;
    if outcome.applied {
        params.set_from_flat(&flat)?;
    }
    Ok(outcome)
}

/// Inner-loop configuration shared by the runner and the test harnesses.
#[derive(Clone, Debug)]
pub struct InnerLoopConfig {
    pub num_inner: usize,
    pub estimator: Estimator,
    pub epsilon: f64,
    pub clip_space: ClipSpace,
    pub spike_window: usize,
    pub spike_delta: f64,
    /// Norm bound applied to each per-sample score gradient before the group
    /// combine (the bounded-direction condition of the stability analysis);
    /// `None` disables.
    pub sample_grad_clip: Option<f64>,
}

/// One sample's per-inner-step evaluation: the fresh-mask estimate under the
/// current policy, the log-ratio against the behavior policy, and the
/// flattened score gradient.
pub struct SampleEval {
    pub estimate: ElboEstimate,
    pub log_ratio: f64,
    pub gradient: Vec<f64>,
}

/// Evaluate one rollout under the current policy. Arguments are
/// `(params, rollout_index, inner_step)`.
pub type SampleEvaluator<'a> = dyn FnMut(&DenoiserParams, usize, usize) -> Result<SampleEval> + 'a;

/// Optional drift-state measurement hook, `(params, group, inner_step)`.
pub type DriftProbe<'a> =
    dyn FnMut(&DenoiserParams, &RolloutGroup, usize) -> Result<Option<DriftState>> + 'a;

/// Run `num_inner` updates on one fixed rollout group.
///
/// Each inner step re-estimates the current-policy likelihood bounds with
/// fresh masks, forms log-ratios against the frozen behavior estimates,
/// combines the group update, and applies it. Non-finite updates are rejected
/// and logged rather than crashing: instability experiments must survive
/// spikes to record them.
pub fn inner_update_loop(
    params: &mut DenoiserParams,
    opt_state: &mut OptimizerState,
    group: &mut RolloutGroup,
    evaluate: &mut SampleEvaluator<'_>,
    drift_probe: &mut DriftProbe<'_>,
    cfg: &InnerLoopConfig,
    norm_history: &mut Vec<f64>,
) -> Result<DriftTrace> {
    if cfg.num_inner == 0 {
        return Err(Error::validation("num_inner must be at least 1"));
    }
    let g = group.group_size();
    let mut trace = DriftTrace::default();

    for inner in 1..=cfg.num_inner {
        group.inner_step = inner;
        let mut log_ratios = Vec::with_capacity(g);
        let mut gradients = Vec::with_capacity(g);
        for j in 0..g {
            let eval = evaluate(params, j, inner)?;
            group.elbo_new[j] = Some(eval.estimate);
            log_ratios.push(eval.log_ratio);
            let mut gradient = eval.gradient;
            if let Some(bound) = cfg.sample_grad_clip {
                let n = norm(&gradient);
                if n > bound && n.is_finite() && n > 0.0 {
                    let s = bound / n;
                    for gi in gradient.iter_mut() {
                        *gi *= s;
                    }
                }
            }
            gradients.push(gradient);
        }

        let finite_ratios = log_ratios.iter().all(|l| l.is_finite());
        let (update, outcome) = if finite_ratios {
            let update = combine_group_update(
                &group.advantages,
                &log_ratios,
                &gradients,
                cfg.estimator,
                cfg.epsilon,
                cfg.clip_space,
            )?;
            let outcome = apply_ascent_update(params, opt_state, &update)?;
            (Some(update), outcome)
        } else {
            // Broken estimates (non-finite bounds) cannot form weights; the
            // step is rejected outright.
            (
                None,
                StepOutcome {
                    applied: false,
                    rejected: true,
                    clipped: false,
                    lr_used: 0.0,
                },
            )
        };

        let norm_value = update.as_ref().map(|u| u.norm).unwrap_or(f64::NAN);
        let check = spike_indicator(norm_history, norm_value, cfg.spike_window, cfg.spike_delta);
        if norm_value.is_finite() {
            norm_history.push(norm_value);
        }

        let drift = drift_probe(params, group, inner)?;

        let (ratio_min, ratio_max) = log_ratios.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY),
            |(lo, hi), &l| (lo.min(l), hi.max(l)),
        );
        let alpha_max = if finite_ratios {
            LogRatioSet::new(log_ratios.clone(), cfg.epsilon, cfg.clip_space)
                .map(|logs| clip_then_softmax(&logs).max_coefficient())
                .unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };
        let mean_clip_weight = if finite_ratios {
            LogRatioSet::new(log_ratios.clone(), cfg.epsilon, cfg.clip_space)
                .map(|logs| unconditional_weights(&logs).mean_weight())
                .unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };

        trace.records.push(InnerStepRecord {
            inner_step: inner,
            update_norm: norm_value,
            spike: check.spike,
            spike_threshold: check.threshold,
            warmed_up: check.warmed_up,
            drift,
            log_ratio_min: ratio_min,
            log_ratio_max: ratio_max,
            alpha_max,
            mean_clip_weight,
            max_sample_norm: update.as_ref().map(|u| u.max_sample_norm()).unwrap_or(f64::NAN),
            rejected: outcome.rejected,
            effective_weights: update.map(|u| u.effective_weights).unwrap_or_default(),
        });
    }
    Ok(trace)
}
