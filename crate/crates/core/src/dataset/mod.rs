//! Slide bags, their on-disk format, fold planning and synthetic cohorts.

mod bag;
mod folds;
mod io;
mod synthetic;

pub use bag::{
    CellRecord, CellType, EventTime, Label, PatchSet, SectionKind, SlideMeta, Subtype, WsiBag,
    FEATURE_DIM, LARGE_TILE, SMALL_TILE,
};
pub use folds::{make_folds, make_folds_k, FoldPlan, NUM_FOLDS};
pub use io::{
    load_bag, load_cohort, write_bag, write_cohort, FORMAT_VERSION, LARGE_BLOB, MANIFEST_FILE,
    SMALL_BLOB,
};
pub use synthetic::{
    generate_synthetic, generate_synthetic_cohort, PlantedRegion, SyntheticCohort,
    SyntheticConfig,
};
