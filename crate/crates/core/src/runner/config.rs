//! Run configuration: a flat, human-readable key=value text file.
//!
//! Unknown keys are errors so a config can never silently drift from what
//! the code understands. The copy written into a run directory carries every
//! key, so a run is reproducible from its config and seed alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::diffusion::{Coupling, ElboArch, MaskPolicy};
use crate::error::{Error, Result};
use crate::estimators::{AdvantageMode, Estimator, LrSchedule, OptimizerConfig, OptimizerKind};
use crate::instability::{StressConfig, StressPolicy};
use crate::ratios::ClipSpace;
use crate::runner::tasks::TaskKind;

pub const CONFIG_VERSION: u64 = 1;

/// Stress condition of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StressCondition {
    Normal,
    Exploding,
}

impl StressCondition {
    pub fn name(&self) -> &'static str {
        match self {
            StressCondition::Normal => "normal",
            StressCondition::Exploding => "exploding",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub task: TaskKind,
    pub task_alphabet: usize,
    /// Use one prompt for the whole run (per-seed), instead of a fresh prompt
    /// per outer step. The single-prompt regime is the easy end of the
    /// difficulty scale.
    pub fixed_prompt: bool,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub max_seq_len: usize,
    pub block_size: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub steps_per_block: usize,
    pub temperature: f64,
    pub group_size: usize,
    pub groups_per_step: usize,
    pub num_inner: usize,
    pub estimator: Estimator,
    pub epsilon: f64,
    pub clip_space: ClipSpace,
    pub advantage_mode: AdvantageMode,
    pub mc_samples: usize,
    pub mask_policy_kind: MaskPolicyKind,
    pub t_floor: f64,
    pub arch: ElboArch,
    pub coupling: Coupling,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// 0 disables the global-norm clip.
    pub grad_clip: f64,
    /// Per-sample score-gradient norm bound; 0 disables.
    pub sample_grad_clip: f64,
    pub total_steps: usize,
    pub stress: StressCondition,
    pub stress_coverage: f64,
    pub stress_bias: f64,
    pub stress_t_min: usize,
    pub stress_t_max: usize,
    pub stress_policy: StressPolicy,
    /// Shared-mask sample count for drift measurement.
    pub drift_mc: usize,
    /// Measure drift every k-th outer step; 0 disables.
    pub drift_every: usize,
    pub a0: f64,
    pub spike_window: usize,
    pub spike_delta: f64,
    /// Consecutive rejected updates before the run halts as collapsed.
    pub reject_quota: usize,
    /// Supervised likelihood-ascent steps on task targets before RL begins
    /// (the trained-model starting point); 0 disables.
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Mask policy selector as written in config files; the blockwise variant
/// picks up the model block size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskPolicyKind {
    Uniform,
    Blockwise,
}

impl MaskPolicyKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(MaskPolicyKind::Uniform),
            "blockwise" => Ok(MaskPolicyKind::Blockwise),
            other => Err(Error::config(format!("unknown mask_policy '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MaskPolicyKind::Uniform => "uniform",
            MaskPolicyKind::Blockwise => "blockwise",
        }
    }

    pub fn to_policy(self, block_size: usize) -> MaskPolicy {
        match self {
            MaskPolicyKind::Uniform => MaskPolicy::Uniform,
            MaskPolicyKind::Blockwise => MaskPolicy::Blockwise { block_size },
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskKind::Copy,
            task_alphabet: 8,
            fixed_prompt: false,
            vocab_size: 17,
            embed_dim: 12,
            max_seq_len: 64,
            block_size: 4,
            prompt_len: 8,
            gen_len: 8,
            steps_per_block: 2,
            temperature: 0.9,
            group_size: 8,
            groups_per_step: 1,
            num_inner: 2,
            estimator: Estimator::StableDrl,
            epsilon: 5.0,
            clip_space: ClipSpace::LogSymmetric,
            advantage_mode: AdvantageMode::Standardized,
            mc_samples: 2,
            mask_policy_kind: MaskPolicyKind::Blockwise,
            t_floor: 0.15,
            arch: ElboArch::Full,
            coupling: Coupling::Independent,
            optimizer: OptimizerKind::AdamW,
            lr: 0.05,
            lr_schedule: LrSchedule::LinearDecay,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.1,
            grad_clip: 0.2,
            sample_grad_clip: 0.0,
            total_steps: 200,
            stress: StressCondition::Normal,
            stress_coverage: 0.7,
            stress_bias: 6.0,
            stress_t_min: 1,
            stress_t_max: 8,
            stress_policy: StressPolicy::Random,
            drift_mc: 16,
            drift_every: 1,
            a0: 0.5,
            spike_window: 50,
            spike_delta: 0.3,
            reject_quota: 50,
            warmup_steps: 0,
            warmup_lr: 0.3,
            seed: 0,
            out_dir: PathBuf::from("runs/run"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::config("vocab_size must be at least 3"));
        }
        if self.task_alphabet + 1 > self.vocab_size {
            return Err(Error::config("task_alphabet must fit below the mask token"));
        }
        if self.gen_len == 0 || self.gen_len % self.block_size != 0 {
            return Err(Error::config("gen_len must be a positive multiple of block_size"));
        }
        if self.prompt_len + self.gen_len > self.max_seq_len {
            return Err(Error::config("prompt_len + gen_len exceeds max_seq_len"));
        }
        if self.arch == ElboArch::Block && (self.prompt_len + self.gen_len) % self.block_size != 0
        {
            return Err(Error::config(
                "block arch needs prompt_len + gen_len divisible by block_size",
            ));
        }
        if self.group_size < 2 {
            return Err(Error::config("group_size must be at least 2"));
        }
        if self.groups_per_step == 0 || self.num_inner == 0 || self.mc_samples == 0 {
            return Err(Error::config("counts must be positive"));
        }
        if !(self.t_floor > 0.0 && self.t_floor <= 1.0) {
            return Err(Error::config("t_floor must lie in (0, 1]"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }
        if self.stress == StressCondition::Exploding {
            self.stress_config().validate()?;
            if self.coupling == Coupling::SharedMasks {
                return Err(Error::config(
                    "the exploding condition requires independent coupling",
                ));
            }
            if self.stress_t_max > self.gen_len {
                return Err(Error::config("stress_t_max exceeds gen_len"));
            }
        }
        if self.task == TaskKind::Copy && self.prompt_len < self.gen_len {
            return Err(Error::config("copy task needs prompt_len >= gen_len"));
        }
        crate::ratios::log_clip_bounds(self.epsilon, self.clip_space)?;
        if self.spike_window == 0 {
            return Err(Error::config("spike_window must be positive"));
        }
        Ok(())
    }

    pub fn stress_config(&self) -> StressConfig {
        StressConfig {
            coverage: self.stress_coverage,
            bias: self.stress_bias,
            t_min: self.stress_t_min,
            t_max: self.stress_t_max,
            policy: self.stress_policy,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr: self.lr,
            schedule: self.lr_schedule,
            total_steps: (self.total_steps * self.num_inner * self.groups_per_step) as u64,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            grad_clip: if self.grad_clip > 0.0 {
                Some(self.grad_clip)
            } else {
                None
            },
        }
    }

    pub fn mask_policy(&self) -> MaskPolicy {
        self.mask_policy_kind.to_policy(self.block_size)
    }

    /// Canonical serialization: every key, fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("version", CONFIG_VERSION.to_string());
        kv("task", self.task.name().to_string());
        kv("task_alphabet", self.task_alphabet.to_string());
        kv("fixed_prompt", self.fixed_prompt.to_string());
        kv("vocab_size", self.vocab_size.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("max_seq_len", self.max_seq_len.to_string());
        kv("block_size", self.block_size.to_string());
        kv("prompt_len", self.prompt_len.to_string());
        kv("gen_len", self.gen_len.to_string());
        kv("steps_per_block", self.steps_per_block.to_string());
        kv("temperature", self.temperature.to_string());
        kv("group_size", self.group_size.to_string());
        kv("groups_per_step", self.groups_per_step.to_string());
        kv("num_inner", self.num_inner.to_string());
        kv("estimator", self.estimator.name().to_string());
        kv("epsilon", self.epsilon.to_string());
        kv("clip_space", self.clip_space.name().to_string());
        kv("advantage_mode", self.advantage_mode.name().to_string());
        kv("mc_samples", self.mc_samples.to_string());
        kv("mask_policy", self.mask_policy_kind.name().to_string());
        kv("t_floor", self.t_floor.to_string());
        kv(
            "arch",
            match self.arch {
                ElboArch::Full => "full".to_string(),
                ElboArch::Block => "block".to_string(),
            },
        );
        kv(
            "coupling",
            match self.coupling {
                Coupling::SharedMasks => "shared_masks".to_string(),
                Coupling::Independent => "independent".to_string(),
            },
        );
        kv("optimizer", self.optimizer.name().to_string());
        kv("lr", self.lr.to_string());
        kv("lr_schedule", self.lr_schedule.name().to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("sample_grad_clip", self.sample_grad_clip.to_string());
        kv("total_steps", self.total_steps.to_string());
        kv("stress", self.stress.name().to_string());
        kv("stress_coverage", self.stress_coverage.to_string());
        kv("stress_bias", self.stress_bias.to_string());
        kv("stress_t_min", self.stress_t_min.to_string());
        kv("stress_t_max", self.stress_t_max.to_string());
        kv("stress_policy", self.stress_policy.name().to_string());
        kv("drift_mc", self.drift_mc.to_string());
        kv("drift_every", self.drift_every.to_string());
        kv("a0", self.a0.to_string());
        kv("spike_window", self.spike_window.to_string());
        kv("spike_delta", self.spike_delta.to_string());
        kv("reject_quota", self.reject_quota.to_string());
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("warmup_lr", self.warmup_lr.to_string());
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = k.trim().to_string();
            if map.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::config(format!("duplicate key '{key}'")));
            }
        }
        let mut cfg = RunConfig::default();
        let mut known = std::collections::BTreeSet::new();
        macro_rules! take {
            ($key:literal, $setter:expr) => {
                known.insert($key.to_string());
                if let Some(v) = map.get($key) {
                    #[allow(clippy::redundant_closure_call)]
                    ($setter)(v.as_str())?;
                }
            };
        }
        let version = map
            .get("version")
            .ok_or_else(|| Error::config("config is missing the version key"))?;
        if version.parse::<u64>().map_err(|_| Error::config("bad version"))? != CONFIG_VERSION {
            return Err(Error::config(format!(
                "unsupported config version {version} (expected {CONFIG_VERSION})"
            )));
        }
        known.insert("version".to_string());

        take!("task", |v: &str| -> Result<()> {
            cfg.task = TaskKind::parse(v)?;
            Ok(())
        });
        take!("task_alphabet", |v: &str| -> Result<()> {
            cfg.task_alphabet = parse_num(v, "task_alphabet")?;
            Ok(())
        });
        take!("fixed_prompt", |v: &str| -> Result<()> {
            cfg.fixed_prompt = match v {
                "true" => true,
                "false" => false,
                other => return Err(Error::config(format!("bad fixed_prompt '{other}'"))),
            };
            Ok(())
        });
        take!("vocab_size", |v: &str| -> Result<()> {
            cfg.vocab_size = parse_num(v, "vocab_size")?;
            Ok(())
        });
        take!("embed_dim", |v: &str| -> Result<()> {
            cfg.embed_dim = parse_num(v, "embed_dim")?;
            Ok(())
        });
        take!("max_seq_len", |v: &str| -> Result<()> {
            cfg.max_seq_len = parse_num(v, "max_seq_len")?;
            Ok(())
        });
        take!("block_size", |v: &str| -> Result<()> {
            cfg.block_size = parse_num(v, "block_size")?;
            Ok(())
        });
        take!("prompt_len", |v: &str| -> Result<()> {
            cfg.prompt_len = parse_num(v, "prompt_len")?;
            Ok(())
        });
        take!("gen_len", |v: &str| -> Result<()> {
            cfg.gen_len = parse_num(v, "gen_len")?;
            Ok(())
        });
        take!("steps_per_block", |v: &str| -> Result<()> {
            cfg.steps_per_block = parse_num(v, "steps_per_block")?;
            Ok(())
        });
        take!("temperature", |v: &str| -> Result<()> {
            cfg.temperature = parse_f64(v, "temperature")?;
            Ok(())
        });
        take!("group_size", |v: &str| -> Result<()> {
            cfg.group_size = parse_num(v, "group_size")?;
            Ok(())
        });
        take!("groups_per_step", |v: &str| -> Result<()> {
            cfg.groups_per_step = parse_num(v, "groups_per_step")?;
            Ok(())
        });
        take!("num_inner", |v: &str| -> Result<()> {
            cfg.num_inner = parse_num(v, "num_inner")?;
            Ok(())
        });
        take!("estimator", |v: &str| -> Result<()> {
            cfg.estimator = Estimator::parse(v)?;
            Ok(())
        });
        take!("epsilon", |v: &str| -> Result<()> {
            cfg.epsilon = parse_f64(v, "epsilon")?;
            Ok(())
        });
        take!("clip_space", |v: &str| -> Result<()> {
            cfg.clip_space = ClipSpace::parse(v)?;
            Ok(())
        });
        take!("advantage_mode", |v: &str| -> Result<()> {
            cfg.advantage_mode = AdvantageMode::parse(v)?;
            Ok(())
        });
        take!("mc_samples", |v: &str| -> Result<()> {
            cfg.mc_samples = parse_num(v, "mc_samples")?;
            Ok(())
        });
        take!("mask_policy", |v: &str| -> Result<()> {
            cfg.mask_policy_kind = MaskPolicyKind::parse(v)?;
            Ok(())
        });
        take!("t_floor", |v: &str| -> Result<()> {
            cfg.t_floor = parse_f64(v, "t_floor")?;
            Ok(())
        });
        take!("arch", |v: &str| -> Result<()> {
            cfg.arch = match v {
                "full" => ElboArch::Full,
                "block" => ElboArch::Block,
                other => return Err(Error::config(format!("unknown arch '{other}'"))),
            };
            Ok(())
        });
        take!("coupling", |v: &str| -> Result<()> {
            cfg.coupling = match v {
                "shared_masks" => Coupling::SharedMasks,
                "independent" => Coupling::Independent,
                other => return Err(Error::config(format!("unknown coupling '{other}'"))),
            };
            Ok(())
        });
        take!("optimizer", |v: &str| -> Result<()> {
            cfg.optimizer = OptimizerKind::parse(v)?;
            Ok(())
        });
        take!("lr", |v: &str| -> Result<()> {
            cfg.lr = parse_f64(v, "lr")?;
            Ok(())
        });
        take!("lr_schedule", |v: &str| -> Result<()> {
            cfg.lr_schedule = LrSchedule::parse(v)?;
            Ok(())
        });
        take!("beta1", |v: &str| -> Result<()> {
            cfg.beta1 = parse_f64(v, "beta1")?;
            Ok(())
        });
        take!("beta2", |v: &str| -> Result<()> {
            cfg.beta2 = parse_f64(v, "beta2")?;
            Ok(())
        });
        take!("weight_decay", |v: &str| -> Result<()> {
            cfg.weight_decay = parse_f64(v, "weight_decay")?;
            Ok(())
        });
        take!("grad_clip", |v: &str| -> Result<()> {
            cfg.grad_clip = parse_f64(v, "grad_clip")?;
            Ok(())
        });
        take!("sample_grad_clip", |v: &str| -> Result<()> {
            cfg.sample_grad_clip = parse_f64(v, "sample_grad_clip")?;
            Ok(())
        });
        take!("total_steps", |v: &str| -> Result<()> {
            cfg.total_steps = parse_num(v, "total_steps")?;
            Ok(())
        });
        take!("stress", |v: &str| -> Result<()> {
            cfg.stress = match v {
                "normal" => StressCondition::Normal,
                "exploding" => StressCondition::Exploding,
                other => return Err(Error::config(format!("unknown stress '{other}'"))),
            };
            Ok(())
        });
        take!("stress_coverage", |v: &str| -> Result<()> {
            cfg.stress_coverage = parse_f64(v, "stress_coverage")?;
            Ok(())
        });
        take!("stress_bias", |v: &str| -> Result<()> {
            cfg.stress_bias = parse_f64(v, "stress_bias")?;
            Ok(())
        });
        take!("stress_t_min", |v: &str| -> Result<()> {
            cfg.stress_t_min = parse_num(v, "stress_t_min")?;
            Ok(())
        });
        take!("stress_t_max", |v: &str| -> Result<()> {
            cfg.stress_t_max = parse_num(v, "stress_t_max")?;
            Ok(())
        });
        take!("stress_policy", |v: &str| -> Result<()> {
            cfg.stress_policy = StressPolicy::parse(v)?;
            Ok(())
        });
        take!("drift_mc", |v: &str| -> Result<()> {
            cfg.drift_mc = parse_num(v, "drift_mc")?;
            Ok(())
        });
        take!("drift_every", |v: &str| -> Result<()> {
            cfg.drift_every = parse_num(v, "drift_every")?;
            Ok(())
        });
        take!("a0", |v: &str| -> Result<()> {
            cfg.a0 = parse_f64(v, "a0")?;
            Ok(())
        });
        take!("spike_window", |v: &str| -> Result<()> {
            cfg.spike_window = parse_num(v, "spike_window")?;
            Ok(())
        });
        take!("spike_delta", |v: &str| -> Result<()> {
            cfg.spike_delta = parse_f64(v, "spike_delta")?;
            Ok(())
        });
        take!("reject_quota", |v: &str| -> Result<()> {
            cfg.reject_quota = parse_num(v, "reject_quota")?;
            Ok(())
        });
        take!("warmup_steps", |v: &str| -> Result<()> {
            cfg.warmup_steps = parse_num(v, "warmup_steps")?;
            Ok(())
        });
        take!("warmup_lr", |v: &str| -> Result<()> {
            cfg.warmup_lr = parse_f64(v, "warmup_lr")?;
            Ok(())
        });
        take!("seed", |v: &str| -> Result<()> {
            cfg.seed = v
                .parse::<u64>()
                .map_err(|_| Error::config("bad seed"))?;
            Ok(())
        });
        take!("out_dir", |v: &str| -> Result<()> {
            cfg.out_dir = PathBuf::from(v);
            Ok(())
        });

        for key in map.keys() {
            if !known.contains(key) {
                return Err(Error::config(format!("unknown config key '{key}'")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}

fn parse_num(v: &str, key: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| Error::config(format!("bad integer for {key}: '{v}'")))
}

fn parse_f64(v: &str, key: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| Error::config(format!("bad number for {key}: '{v}'")))
}
