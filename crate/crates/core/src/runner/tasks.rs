//! Toy tasks with rewards computable exactly from the token sequence.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// Reward is the fraction of response positions matching the trailing
    /// prompt substring; 1 iff the response repeats it exactly.
    Copy,
    /// Reward 1 iff the first response token encodes the parity of the
    /// prompt bits.
    Parity,
    /// Reward is the fraction of adjacent response pairs in nondecreasing
    /// order.
    Sorted,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "parity" => Ok(TaskKind::Parity),
            "sorted" => Ok(TaskKind::Sorted),
            other => Err(Error::config(format!("unknown task '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Parity => "parity",
            TaskKind::Sorted => "sorted",
        }
    }
}

/// A task instance: prompt generator plus verifiable reward.
#[derive(Clone, Copy, Debug)]
pub struct ToyTask {
    pub kind: TaskKind,
    /// Number of distinct symbols prompts draw from (the difficulty knob).
    pub alphabet: usize,
}

impl ToyTask {
    pub fn new(kind: TaskKind, alphabet: usize) -> Result<Self> {
        if alphabet < 2 {
            return Err(Error::config("task alphabet needs at least 2 symbols"));
        }
        Ok(ToyTask { kind, alphabet })
    }

    pub fn generate_prompt(&self, prompt_len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        match self.kind {
            TaskKind::Parity => (0..prompt_len).map(|_| rng.random_range(0..2usize)).collect(),
            _ => (0..prompt_len)
                .map(|_| rng.random_range(0..self.alphabet))
                .collect(),
        }
    }

    /// A response achieving reward 1 for the given prompt, used by the
    /// supervised warmup phase.
    pub fn ideal_response(&self, prompt: &[usize], gen_len: usize) -> Vec<usize> {
        match self.kind {
            TaskKind::Copy => {
                let start = prompt.len().saturating_sub(gen_len);
                prompt[start..].to_vec()
            }
            TaskKind::Parity => {
                let parity = prompt.iter().filter(|&&t| t == 1).count() % 2;
                let mut resp = vec![0; gen_len];
                resp[0] = parity;
                resp
            }
            TaskKind::Sorted => vec![0; gen_len],
        }
    }

    /// Reward in [0, 1], a pure function of the token sequence.
    pub fn reward(&self, x: &TokenSequence) -> f64 {
        let response = x.response();
        if response.is_empty() {
            return 0.0;
        }
        match self.kind {
            TaskKind::Copy => {
                let gen_len = response.len();
                let prompt = &x.tokens[..x.prompt_len];
                if prompt.len() < gen_len {
                    return 0.0;
                }
                let target = &prompt[prompt.len() - gen_len..];
                let matches = response
                    .iter()
                    .zip(target)
                    .filter(|(a, b)| a == b)
                    .count();
                matches as f64 / gen_len as f64
            }
            TaskKind::Parity => {
                let ones = x.tokens[..x.prompt_len].iter().filter(|&&t| t == 1).count();
                let parity = ones % 2;
                if response[0] == parity {
                    1.0
                } else {
                    0.0
                }
            }
            TaskKind::Sorted => {
                if response.len() < 2 {
                    return 1.0;
                }
                let ordered = response
                    .windows(2)
                    .filter(|w| w[0] <= w[1])
                    .count();
                ordered as f64 / (response.len() - 1) as f64
            }
        }
    }
}

/// The built-in task set at a given alphabet size.
pub fn builtin_tasks(alphabet: usize) -> Vec<ToyTask> {
    vec![
        ToyTask::new(TaskKind::Copy, alphabet).expect("valid"),
        ToyTask::new(TaskKind::Parity, alphabet).expect("valid"),
        ToyTask::new(TaskKind::Sorted, alphabet).expect("valid"),
    ]
}
