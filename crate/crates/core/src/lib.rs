//! Globally optimal rigid registration of isotropic Gaussian mixtures.
//!
//! The objective is the L2 distance between the two mixture densities. A
//! best-first branch-and-bound search over angle-axis rotations and
//! translations certifies the returned transform is within `ε` of the global
//! minimum, with an L-BFGS local refiner tightening the incumbent.

pub mod bounds;
pub mod error;
pub mod harness;
pub mod io;
pub mod mixture;
pub mod objective;
pub mod se3;
pub mod search;

pub use bounds::{batch_node_bounds, node_bounds, BoundEvaluator, NodeBounds, PairGeometry};
pub use error::{Error, Result};
pub use harness::{alignment_errors, run_benchmark, run_registration, sample_rotations, AlignmentErrors, RunRecord};
pub use io::{load_point_cloud, write_xyz, CloudFormat};
pub use mixture::{FrameNormalization, GaussianMixture, PointCloud};
pub use objective::{l2_objective, l2_objective_gradient, local_refine, LocalRefineResult};
pub use se3::{AngleAxis, RigidTransform, TransformCube};
pub use search::{register, RegistrationResult, SearchConfig, SearchStatus};
