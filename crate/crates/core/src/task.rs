use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Social-reasoning task a dataset, benchmark item or direction belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ForwardBelief,
    ForwardAction,
    BackwardBelief,
    Tomi,
    Custom,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::ForwardBelief,
        Task::ForwardAction,
        Task::BackwardBelief,
        Task::Tomi,
        Task::Custom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::ForwardBelief => "forward_belief",
            Task::ForwardAction => "forward_action",
            Task::BackwardBelief => "backward_belief",
            Task::Tomi => "tomi",
            Task::Custom => "custom",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s.replace('-', "_"))
            .ok_or_else(|| Error::invalid(format!("unknown task `{s}`")))
    }
}
