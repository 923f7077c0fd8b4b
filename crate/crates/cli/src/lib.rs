//! Workbench commands for training, evaluating and dissecting the
//! recurrent-attention intrusion detectors in `bigat-core`.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod loao;
pub mod pipeline;
pub mod report;

pub use ablate::{cmd_ablate, AblationReport, AblationRow};
pub use commands::{
    cmd_bench, cmd_evaluate, cmd_explain, cmd_inspect, cmd_synth, cmd_train, EvalSplit, InspectTarget,
};
pub use config::RunConfig;
pub use loao::{cmd_loao, LoaoFold, LoaoReport};
pub use report::{ResultsRow, RunReport, Status};
