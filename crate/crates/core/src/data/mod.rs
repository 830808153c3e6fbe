//! Weather/solar time-series ingestion and labeled dataset construction.

mod binning;
mod dataset;
mod frame;
mod split;
mod standardize;

pub use binning::{assign_label, fit_bins, Assignment, BinningScheme};
pub use dataset::{
    prepare_frame, LabeledDataset, PrepareOptions, PrepareReport, PreparedDomain,
    DATASET_FORMAT_VERSION,
};
pub use frame::{
    align_join, drop_missing, ingest_csv, resample_mean, CsvSchema, JoinReport, TimeSeriesFrame,
    CANONICAL_CHANNELS, POWER_CHANNEL,
};
pub use split::{split_chronological, SplitRatios, SplitTag};
pub use standardize::{Standardizer, STD_FLOOR};
