//! Dataset representation, schema-driven encoding and the mask / time-lag
//! machinery shared by the models and the metrics.

pub mod dataset;
pub mod instance;
pub mod io;
pub mod raw;
pub mod schema;
pub mod windows;

pub use dataset::{Dataset, Split};
pub use instance::{carry_last_observations, compute_time_lags, inverse_transform, transform, uniform_times, Instance};
pub use raw::{RawRecord, RawValue};
pub use schema::{
    decode_length, fit_schema, FeatureKind, FeatureSchema, FeatureSlot, FeatureSpec, Layout, Mode, Role, Scaler,
    Schema, SchemaSpec, UnseenPolicy,
};
pub use windows::{extract_windows, window_records};
