//! Datasets, persistence, experiment orchestration, and the CLI.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod evaluate;
mod io;

pub use bench::{desk_benchmark, desk_benchmark_experiment, DeskBenchmark};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_as, save_checkpoint, Checkpoint, CheckpointMeta, ModelKind,
};
pub use config::{
    AttackKind, AttackSection, DatasetSource, ExperimentConfig, PurifySection, SigmaSpec,
    SyntheticSpec,
};
pub use dataset::{gen_manifold_blobs, gen_synthetic, load_idx, Dataset};
pub use evaluate::{run_evaluation, EvaluationReport, SampleRecord};
