//! Synthetic tasks, the training loop, checkpoints, evaluation and the
//! sweep/ablation harness.

mod checkpoint;
mod config;
mod eval;
mod optim;
mod sweep;
mod tasks;
mod train;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::RunConfig;
pub use eval::{corpus_bleu, evaluate, evaluate_checkpoint, next_token_accuracy, EvalReport, SentenceResult};
pub use optim::{clip_grad_norm, grad_norm, Adam, InverseSqrt};
pub use sweep::{
    ablation, ablation_cells, filter_dal, run_cell, run_cells, sweep, sweep_cells, to_csv, Cell, SweepRow, CSV_HEADER,
};
pub use tasks::{generate_batch, Batch, Pair, TaskKind, TaskSpec};
pub use train::{
    batch_gradients, example_loss_on, stream_rng, streams, train, train_with, LogEntry, LossParts, TrainOutcome,
};
