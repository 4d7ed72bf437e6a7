//! End-to-end pipeline: data files, training, checkpoints, evaluation
//! reports and the per-layer probe.

mod checkpoint;
mod config;
mod data;
mod evaluate;
mod model;
mod report;
pub mod synthetic;
mod train;

pub use checkpoint::{Checkpoint, Header, ManifestEntry, FORMAT_VERSION, MAGIC};
pub use config::{DatasetSpec, Objective, RunConfig};
pub use data::{load_dataset, read_records, standard_layout, write_records, Dataset, OodSet, Record, Split};
pub use evaluate::{
    evaluate, export_combination, probe_layers, Average, Cell, CosineOrientation, EvalReport, MetricTriple, ProbeRow,
    Timing,
};
pub use model::{AnyModel, Head, Inference, Model};
pub use report::{
    combination_csv, compare_objectives, probe_table, report_table, write_report, write_training_log, Comparison,
};
pub use train::{inference_noise, refit_banks, rng_stream, train, train_with, untrained, EpochLog, TrainLog};
