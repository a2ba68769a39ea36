//! Progressive training: a population adapter merged into the backbone, a
//! routed bank of group experts merged on top, then one adapter per user.

mod config;
mod run;
mod state;
mod train;

pub use config::{Ablation, DataSource, RunConfig, StageConfig};
pub use run::{
    base_weights, config_checksum, diagnose, load_corpus, open_run, prepare, refresh_manifest, run_ablation,
    run_in_dir, run_pipeline, run_stage, AblationReport, AblationRow, Prepared, RunManifest, StageSelect,
};
pub use state::{
    GroupReceipt, GroupState, Layout, PipelineState, PopulationReceipt, PopulationState, UserReceipt, UserState,
    MERGE_RULE,
};
pub use train::{
    encode_entry, example_ce, final_epoch_mean, group_graph, init_bank, merge_bank, population_adapters,
    population_graph, train_group, train_joint, train_population, train_users, user_adapters, user_graph,
    write_loss_csv, Example, GroupOptions, GroupOutput, LossRow, PopulationOutput, StepGraph, StepOutput, UserArtifact,
    UserOptions, UserStageOutput,
};
