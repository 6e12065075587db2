//! Sequential knowledge editing on a synthetic linear associative memory.
//!
//! A single editable layer maps keys to output vectors that a fixed
//! embedding reads out as token distributions. Three editors are provided:
//! a covariance-regularized least-squares update, a null-space-projected
//! update, and a variant that adds a dynamic orthogonal constraint against
//! the accumulated edit history. The [`noise`] module measures how earlier
//! edits interfere with later ones.

pub mod editor;
pub mod error;
pub mod eval;
pub mod harness;
pub mod linalg;
pub mod noise;
pub mod world;

pub use editor::{apply_edit, EditConfig, EditOutcome, EditorState, Method};
pub use error::{EditError, Result};
pub use eval::{evaluate, MetricReport, UnrelatedProbes};
pub use harness::{
    compare_modes, export_report, run_experiment, sweep_eta, MethodSpec, RunConfig, RunReport, Session,
};
pub use noise::{EditLedger, LedgerEntry};
pub use world::{generate_universe, Fact, FactUniverse, UniverseConfig};
