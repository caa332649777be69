//! Fidelity, utility and missing-pattern metrics for pairs of datasets.
pub mod downstream;
pub mod fidelity;
pub mod figures;
pub mod patterns;
pub mod report;
pub mod seqnet;
pub use downstream::{run_downstream, Classifier, DownstreamSpec, Scaling};
pub use fidelity::{discriminative_score, predictive_score, DiscriminativeConfig, PredictiveConfig, PredictTarget};
pub use patterns::{matrix_similarity, missing_rate_vectors, pca_project, pearson_missing_heatmap, Pca};
pub use report::{evaluate, EvalGrid, EvalReport, Summary};
pub use seqnet::{auc, Cell, NetConfig};
