//! Building information modeling (BIM) for regional seismic risk studies.
//!
//! The pipeline assembles a per-building attribute inventory from tabular
//! metadata and vision-model predictions ([`ingest`], [`bim`]), resolves
//! addresses to coordinates ([`geocode`]), fills missing attributes by
//! spatial imputation ([`surf`]), grows a labeled soft-story dataset by
//! self-training ([`selftrain`]) and renders classifier output as a
//! probability surface ([`raster`]). [`synth`] generates a reproducible
//! synthetic city for tests and demos.

pub mod bim;
pub mod geocode;
pub mod ingest;
pub mod pipeline;
pub mod raster;
pub mod selftrain;
pub mod surf;
pub mod synth;

pub use bim::{
    merge_inventories, missing_report, Attribute, AttributeKind, AttributeValue, BimError, BuildingRecord, Geocode,
    ImputeMethod, Inventory, MergePolicy, MissingReport, Provenance, Schema,
};

/// Maps `f` over `items`, in parallel when the `parallel` feature is on.
/// Output order always matches input order.
#[cfg(feature = "parallel")]
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}
