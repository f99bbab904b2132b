use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The three prediction tasks, one expert each. Declaration order is the
/// fixed expert order used wherever experts are stacked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Seg,
    Sdf,
    Bnd,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Seg, Task::Sdf, Task::Bnd];

    pub fn name(self) -> &'static str {
        match self {
            Task::Seg => "seg",
            Task::Sdf => "sdf",
            Task::Bnd => "bnd",
        }
    }

    /// Two-class logits for the classification tasks, one raw channel for SDF regression.
    pub fn out_channels(self) -> usize {
        match self {
            Task::Seg | Task::Bnd => 2,
            Task::Sdf => 1,
        }
    }

    pub fn is_classification(self) -> bool {
        self != Task::Sdf
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "seg" => Ok(Task::Seg),
            "sdf" => Ok(Task::Sdf),
            "bnd" => Ok(Task::Bnd),
            other => Err(Error::Config(format!("unknown task `{other}` (expected seg, sdf or bnd)"))),
        }
    }
}

/// Sorts tasks into the canonical expert order and removes duplicates.
pub fn canonical(tasks: &[Task]) -> Vec<Task> {
    let mut v = tasks.to_vec();
    v.sort();
    v.dedup();
    v
}
