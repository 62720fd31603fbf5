//! Task datasets: the example type, task streams, JSONL ingestion, and the
//! synthetic code-like generators.

mod jsonl;
mod synth;
mod vocab;

pub use jsonl::{load_jsonl, load_task_dir, load_task_stream};
pub use synth::{rewrite_dialect, synth4, synth_task, SyntheticKind, SyntheticTaskSpec, DEFAULT_IDENTIFIERS};
pub use vocab::{Vocabulary, BOS, EOS, FIRST_CHAR, FIRST_DESCRIPTOR, MAX_TASKS, PAD, UNK};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// One (input, target) pair tagged with its task.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub input: String,
    pub target: String,
    pub task: usize,
}

impl Example {
    pub fn new(input: impl Into<String>, target: impl Into<String>, task: usize) -> Result<Self> {
        let (input, target) = (input.into(), target.into());
        if input.trim().is_empty() || target.trim().is_empty() {
            return contract("example input and target must be non-empty");
        }
        Ok(Self { input, target, task })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub id: usize,
    pub name: String,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskData {
    pub fn split(&self, s: Split) -> &[Example] {
        match s {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn descriptor(&self) -> u32 {
        Vocabulary::descriptor(self.id)
    }

    pub fn all(&self) -> impl Iterator<Item = &Example> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }
}

/// Ordered tasks for one continual-learning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<TaskData>,
}

impl TaskStream {
    pub fn new(tasks: Vec<TaskData>) -> Result<Self> {
        let s = Self { tasks };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return contract("task stream is empty");
        }
        if self.tasks.len() > MAX_TASKS {
            return contract(format!("at most {MAX_TASKS} tasks are supported"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|o| o.id == t.id) {
                return contract(format!("duplicate task id {}", t.id));
            }
            if t.id >= MAX_TASKS {
                return contract(format!("task id {} exceeds {}", t.id, MAX_TASKS - 1));
            }
            for (split, name) in [(&t.train, "train"), (&t.validation, "validation"), (&t.test, "test")] {
                if split.is_empty() {
                    return contract(format!("task '{}' has an empty {name} split", t.name));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::build(self.tasks.iter().flat_map(TaskData::all))
    }

    /// Reorders tasks; task ids (and descriptors) travel with their data.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.tasks.len()];
        if order.len() != self.tasks.len() {
            return contract("permutation length differs from task count");
        }
        for &i in order {
            if i >= seen.len() || seen[i] {
                return contract(format!("invalid permutation {order:?}"));
            }
            seen[i] = true;
        }
        Ok(Self {
            tasks: order.iter().map(|&i| self.tasks[i].clone()).collect(),
        })
    }

    pub fn max_target_chars(&self) -> usize {
        self.tasks
            .iter()
            .flat_map(|t| &t.train)
            .map(|e| e.target.chars().count())
            .max()
            .unwrap_or(1)
    }
}
