//! Training harness, sweeps and the command-line front end.

pub mod cli;
pub mod config;
pub mod data;
pub mod grid;
pub mod sweep;
pub mod train;

pub use cli::run_cli;
pub use config::{ConfigFile, TrainConfig};
pub use data::{synth_data, MarkovChain, SynthBatch};
pub use grid::{quant_direction, run_grid, Cell, CellResult, GridOutcome, GridSettings};
pub use sweep::{quant_sweep, sweep_data, temperature_ablation, SweepPoint, SweepReport};
pub use train::{evaluate, train, train_model, Checkpoint, TrainLog};
