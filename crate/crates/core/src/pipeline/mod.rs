//! End-to-end orchestration: configuration, case loading, the staged run
//! with persisted intermediates, manifests, ablation sweeps and the
//! canonical case layout.

mod ablate;
mod config;
mod dataset;
mod run;

pub use ablate::{
    ablate, run_dir_name, AblationRow, AblationSummary, Sweep, SweepAxes, SweepPoint,
};
pub use config::{
    default_output_dir, CasePaths, Mode, RunConfig, DEFAULT_BACKEND, OUTPUT_ROOT_ENV, PLUGINS_ENV,
};
pub use dataset::{
    make_dataset_case, synthetic_case, write_synthetic_case, SyntheticCase, SYNTHETIC_CASE_ID,
    SYNTHETIC_FRAMES, SYNTHETIC_SIZE,
};
pub use run::{
    load_case, load_partitions, load_registry, new_manifest, prepare, record_output, run_case,
    run_prepared, save_partitions, Composed, LoadedCase, OutputRecord, Prepared, RunManifest,
    ALIGN_DIR, COARSE_DIR, COPY_DIR, LATENTS_DIR, MANIFEST_FILE, MASKS_DIR, REPORT_FILE,
    TOOL_VERSION,
};
