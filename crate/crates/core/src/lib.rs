//! Mesh-anchored differentiable Gaussian splatting.
//!
//! The crate fits splat appearance models of hands and objects from posed
//! multi-view images, deforms them with skeletal (LBS) and rigid (SE(3))
//! poses, synthesizes novel bimanual grasp poses by gradient-based
//! contact/penetration optimization, and renders augmented image datasets
//! under novel poses and viewpoints.
//!
//! Module map:
//! - [`mesh`]: triangle meshes, OBJ I/O, closest-point and signed-distance queries
//! - [`gauss`]: Gaussian kernels anchored on mesh faces (centers, frames, covariances)
//! - [`deform`]: forward kinematics, linear blend skinning, rigid and articulated motion
//! - [`camera`]: pinhole cameras and their JSON format
//! - [`raster`]: the differentiable tile-based CPU rasterizer (forward + backward)
//! - [`scene`]: scene assembly (left hand, right hand, object) and parameter gradients
//! - [`metrics`]: PSNR / SSIM image metrics
//! - [`losses`]: photometric and geometric training losses
//! - [`trainer`]: adaptive-moment fitting loop, checkpoints, evaluation
//! - [`pose_opt`]: contact-driven bimanual grasp pose optimization
//! - [`pipeline`]: dataset synthesis pipeline (cameras, compositing, crops, manifests)
//! - [`fixtures`]: procedurally generated test assets (spheres, paddle hands, rigs)

pub mod camera;
pub mod deform;
pub mod error;
pub mod fixtures;
pub mod gauss;
pub mod losses;
pub mod math;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod pose_opt;
pub mod raster;
pub mod scene;
pub mod sh;
pub mod trainer;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Pin the global worker-thread count (0 keeps one thread per core).
/// Outputs never depend on this; it only bounds parallelism.
pub fn configure_workers(workers: usize) {
    if workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .ok();
    }
}
