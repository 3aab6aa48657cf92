//! Tracking-by-detection for dense 3D colonies of rod-shaped cells.
//!
//! The pipeline covers the full loop: a seeded agent-based colony simulator
//! (`sim`), per-instance geometric features with short temporal context
//! (`features`), a learned association scorer (`scorer`), constrained
//! one-to-one frame linking (`matcher`), covariance-based division detection
//! (`division`), trajectory assembly (`tracker`), and lineage-graph edit
//! metrics (`metrics`). Text file formats shared with the CLI live in `io`.

pub mod division;
pub mod features;
pub mod io;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod scorer;
pub mod sim;
pub mod tracker;

pub use model::Vec3;
