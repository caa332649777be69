//! Configs, model bundles and the prepare / train / generate / evaluate /
//! report commands.
pub mod bundle;
pub mod commands;
pub mod config;

pub use bundle::{AeBlock, ModelBundle, Provenance};
pub use commands::{cmd_evaluate, cmd_generate, cmd_prepare, cmd_report, cmd_train, train_with_halt, Manifest, Prepared, Progress, SplitStats};
pub use config::{seed_offset, RunConfig};
