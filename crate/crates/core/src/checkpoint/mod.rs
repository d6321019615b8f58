//! Offline checkpoint library: one representative template per annotated slot.

mod database;
mod kde;
mod pca;

pub use database::{
    build_database, feature_matrix, load_database, pool_features, save_database, CheckpointDatabase,
    CheckpointTemplate,
};
pub use kde::{kde_log_density, select_template, silverman_bandwidth};
pub use pca::{fit_pca, PcaModel};
