//! CPU-only probabilistic signed-distance fusion.
//!
//! The crate turns posed depth frames into an uncertainty-annotated surface:
//! a coarse truncated signed-distance volume bootstraps a sparse narrow-band
//! voxel domain, depth pixels become linearized signed-distance observations,
//! and the field is refined as the mean of a Gaussian posterior with a sparse
//! precision matrix solved by preconditioned conjugate gradients. Marginal
//! variances are estimated with randomized probe vectors and drive both
//! per-vertex mesh uncertainty and next-view selection by expected variance
//! reduction.
//!
//! Modules follow the pipeline order: [`tsdf`] → [`grid`] → [`obs`] →
//! [`prior`] → [`sparse`] / [`posterior`] → [`mesh`] → [`nbv`], with
//! [`scene`] providing analytic test scenes, [`metrics`] the geometry
//! metrics, and [`pipeline`] the end-to-end orchestration used by the CLI.

pub mod camera;
pub mod grid;
pub mod io;
pub mod mc_tables;
pub mod mesh;
pub mod metrics;
pub mod nbv;
pub mod obs;
pub mod pipeline;
pub mod posterior;
pub mod prior;
pub mod scene;
pub mod sparse;
pub mod tsdf;

pub use camera::{DepthFrame, Intrinsics, RigidTransform};
pub use grid::{EdgeList, GridConfig, Stencil, VoxelGrid, WeightScheme};
pub use mesh::TriangleMesh;
pub use metrics::MetricsReport;
pub use nbv::{NbvReport, ViewCandidate};
pub use obs::{NoiseModel, Observation, ObservationSet};
pub use pipeline::PipelineConfig;
pub use posterior::Posterior;
pub use prior::{Prior, PriorSpec};
pub use scene::AnalyticScene;
pub use sparse::{PrecisionOperator, SolveStats, SparseMatrix};
pub use tsdf::TsdfVolume;
