//! Factor-graph SLAM with fiducial markers.
//!
//! The crate estimates time-varying rigid-body poses from tag detections,
//! optional odometry, and pose priors. Everything revolves around two graphs:
//! a *full* graph that archives every measurement ever received, and an
//! *optimized* graph that only ever contains measurements which survived
//! subgraph validation. New measurements are grouped into small subgraphs,
//! initialized from homography poses and propagated priors, optimized in
//! isolation, and merged only if their error is plausible — a cheap guard
//! against ambiguous tag poses and mis-configured priors.
//!
//! Modules are layered bottom-up:
//!
//! * [`se3`] — rotations, poses, twists, and the boxed ⊖ / retract pair.
//! * [`camera`] — pinhole projection with radial-tangential distortion.
//! * [`scene`] — static description of bodies, tags, and cameras.
//! * [`factor`] / [`graph`] — measurement factors and their residuals.
//! * [`optimizer`] — batch Levenberg-Marquardt on the pose manifold.
//! * [`planar`] — homography decomposition and tag pose ambiguity checks.
//! * [`init`] — two-graph bookkeeping: discovery, initialization, validation.
//! * [`pipeline`] — frame ingestion, exports, and end-to-end runs.
//! * [`formats`] — on-disk log and map formats.
//! * [`sim`] — synthetic scene rendering for tests and benchmarks.

pub mod camera;
pub mod factor;
pub mod formats;
pub mod graph;
pub mod init;
pub mod optimizer;
pub mod pipeline;
pub mod planar;
pub mod scene;
pub mod se3;
pub mod sim;
