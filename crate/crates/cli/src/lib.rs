//! Command-line orchestration: whole-pipeline and per-stage runs, chat,
//! analytic perf estimates and a toy throughput bench.

pub mod bench;
pub mod chat;
pub mod config;
pub mod perf_cmd;
pub mod run;

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Data,
    Sft,
    Rm,
    Ppo,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Sft => "sft",
            Stage::Rm => "rm",
            Stage::Ppo => "ppo",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("[{}] {source}", stage.name())]
    Stage {
        stage: Stage,
        #[source]
        source: deskrlhf_core::Error,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] deskrlhf_core::Error),
    #[error(transparent)]
    Perf(#[from] deskrlhf_perf::PerfError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
