//! Configuration, data, the discrete network and the search and training
//! pipelines built on top of the lower layers.

pub mod augment;
pub mod config;
pub mod data;
pub mod energy;
pub mod manifest;
pub mod network;
pub mod pipeline;

pub use augment::{cutout, cutout_batch, drop_path, drop_path_mask};
pub use config::{
    AdamSettings, DataConfig, DataSource, EvalConfig, RunConfig, SearchConfig, SgdSettings, PRESETS,
};
pub use data::{load_dataset, resolve_data_path, synthetic, DataSplits, Dataset};
pub use energy::{energy_report, EnergyReport, DEFAULT_FP32_FACTOR};
pub use manifest::{unix_now, RunManifest};
pub use network::{
    build_network, summarize_counts, DropState, Network, NetworkConfig, NetworkLayers,
};
pub use pipeline::{
    eval_loss_and_grads, eval_network_config, exec_mode, resolve_multiplier, run_eval,
    run_eval_with, run_search, run_search_with, write_log_csv, EpochLog, EvalOutcome,
    SearchOutcome, TrainReport, FP32,
};
