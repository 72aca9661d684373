//! End-to-end dataset pipeline: train a scene model per sequence, expand
//! poses, render novel pose x view images, composite over backgrounds, crop
//! around the interaction, and emit an annotated manifest.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::pose_opt::{
    final_breakdown, optimize_pose, sample_perturbation, PerturbationConfig, PomConfig,
    ReferenceGraspPrior,
};
use crate::raster::RenderedImage;
use crate::scene::{load_pose, save_pose, InteractionPose, SceneModel, Side};
use crate::trainer::{
    evaluate, load_checkpoint, write_metrics_csv, CheckpointBindings, TrainConfig, TrainFrame,
    Trainer,
};
use crate::{Error, Result};

/// A sample is accepted only if its final penetration loss stays below this.
pub const PENETRATION_ACCEPT_EPS: f64 = 1e-4;
/// The augmentation job succeeds if at least this fraction of samples does.
pub const MIN_SUCCESS_FRACTION: f64 = 0.9;

// ---------------------------------------------------------------------------
// Sequence specs and training manifests
// ---------------------------------------------------------------------------

/// One (subject, object) sequence: deformation assets, training data and
/// reference interactions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub subject: String,
    pub object_id: String,
    /// Rig JSON used for the left hand (and the right, unless overridden).
    pub rig: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rig_right: Option<String>,
    pub object_model: String,
    pub manifest: String,
    pub reference_poses: Vec<String>,
}

/// A sequence spec with its relative paths resolved.
#[derive(Debug, Clone)]
pub struct ResolvedSequence {
    pub spec: SequenceSpec,
    pub rig: PathBuf,
    pub rig_right: PathBuf,
    pub object_model: PathBuf,
    pub manifest: PathBuf,
    pub reference_poses: Vec<PathBuf>,
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<ResolvedSequence> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?;
    let spec: SequenceSpec =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| -> PathBuf {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            base.join(pb)
        }
    };
    let resolved = ResolvedSequence {
        rig: resolve(&spec.rig),
        rig_right: resolve(spec.rig_right.as_deref().unwrap_or(&spec.rig)),
        object_model: resolve(&spec.object_model),
        manifest: resolve(&spec.manifest),
        reference_poses: spec.reference_poses.iter().map(|p| resolve(p)).collect(),
        spec,
    };
    for p in [
        &resolved.rig,
        &resolved.rig_right,
        &resolved.object_model,
        &resolved.manifest,
    ]
    .into_iter()
    .chain(resolved.reference_poses.iter())
    {
        if !p.exists() {
            return Err(Error::MissingFile(p.display().to_string()));
        }
    }
    Ok(resolved)
}

/// Training manifest: image / camera / pose triples, split into train and
/// held-out lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub train: Vec<FrameRecord>,
    #[serde(default)]
    pub heldout: Vec<FrameRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub image: String,
    pub camera: Camera,
    pub pose: String,
}

/// Load a PNG as unit-range interleaved RGB.
pub fn load_image_rgb(path: impl AsRef<Path>) -> Result<(Vec<f64>, usize, usize)> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .map(|b| b as f64 / 255.0)
        .collect();
    Ok((data, w, h))
}

fn load_frames(base: &Path, records: &[FrameRecord]) -> Result<Vec<TrainFrame>> {
    records
        .iter()
        .map(|r| {
            let image_path = base.join(&r.image);
            let (image, w, h) = load_image_rgb(&image_path)?;
            if w != r.camera.width || h != r.camera.height {
                return Err(Error::ShapeMismatch(format!(
                    "{}: image {w}x{h} vs camera {}x{}",
                    r.image, r.camera.width, r.camera.height
                )));
            }
            let pose = load_pose(base.join(&r.pose))?;
            Ok(TrainFrame {
                id: r.image.clone(),
                image,
                camera: r.camera.clone(),
                pose,
            })
        })
        .collect()
}

/// Load and decode both splits of a training manifest.
pub fn load_manifest_frames(path: impl AsRef<Path>) -> Result<(Vec<TrainFrame>, Vec<TrainFrame>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok((
        load_frames(base, &manifest.train)?,
        load_frames(base, &manifest.heldout)?,
    ))
}

/// Assemble an untrained scene model for a sequence.
pub fn build_scene_model(seq: &ResolvedSequence, config: &TrainConfig) -> Result<SceneModel> {
    let left_rig = crate::deform::load_rig(&seq.rig)?;
    let right_rig = crate::deform::load_rig(&seq.rig_right)?;
    let object = crate::deform::load_object(&seq.object_model)?;
    Ok(SceneModel {
        left: Some(crate::scene::HandEntity {
            cloud: crate::gauss::anchor_gaussians(
                &left_rig.canonical_mesh,
                config.kernels_per_face,
                config.sh_degree,
                config.seed,
            )?,
            rig: left_rig,
        }),
        right: Some(crate::scene::HandEntity {
            cloud: crate::gauss::anchor_gaussians(
                &right_rig.canonical_mesh,
                config.kernels_per_face,
                config.sh_degree,
                config.seed.wrapping_add(1),
            )?,
            rig: right_rig,
        }),
        object: Some(crate::scene::ObjectEntity {
            cloud: crate::gauss::anchor_gaussians(
                &object.mesh,
                config.kernels_per_face,
                config.sh_degree,
                config.seed.wrapping_add(2),
            )?,
            model: object,
        }),
    })
}

/// Train a sequence model; writes `checkpoint/` and `metrics.csv` under
/// `out_dir` and returns the checkpoint path.
pub fn cmd_train(
    sequence_path: &Path,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<PathBuf> {
    config.validate()?;
    let seq = load_sequence(sequence_path)?;
    let (frames, heldout) = load_manifest_frames(&seq.manifest)?;
    let mut trainer = Trainer::new(build_scene_model(&seq, config)?, config.clone())?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let bindings = CheckpointBindings {
        left_rig: Some(seq.rig.display().to_string()),
        right_rig: Some(seq.rig_right.display().to_string()),
        object: Some(seq.object_model.display().to_string()),
    };
    let ckpt_dir = out_dir.join("checkpoint");
    let rows = trainer.train_loop(&frames, &heldout, Some((&ckpt_dir, &bindings)))?;
    write_metrics_csv(&rows, out_dir.join("metrics.csv"))?;
    log::info!(
        "trained {} iterations; final loss {:.6}",
        rows.len(),
        rows.last().map(|r| r.total).unwrap_or(f64::NAN)
    );
    Ok(ckpt_dir)
}

// ---------------------------------------------------------------------------
// Pose expansion
// ---------------------------------------------------------------------------

/// A batch of pose-synthesis jobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PomBatchSpec {
    pub reference_poses: Vec<String>,
    pub samples_per_reference: usize,
    #[serde(default)]
    pub perturbation: PerturbationConfig,
    #[serde(default)]
    pub pom: PomConfig,
    #[serde(default)]
    pub seed: u64,
}

pub fn load_pom_batch(path: impl AsRef<Path>) -> Result<(PomBatchSpec, Vec<PathBuf>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?;
    let spec: PomBatchSpec =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let poses = spec
        .reference_poses
        .iter()
        .map(|p| {
            let pb = base.join(p);
            if pb.exists() {
                Ok(pb)
            } else {
                Err(Error::MissingFile(pb.display().to_string()))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((spec, poses))
}

#[derive(Debug, Clone, Serialize)]
pub struct PomOutcome {
    pub requested: usize,
    pub accepted: usize,
    pub rejected: usize,
}

fn derive_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03)
}

/// Expand reference poses into optimized novel grasps. Accepted samples are
/// written as `pose_NNNN.json` with `trace_NNNN.csv`; rejection is logged.
pub fn cmd_pom(checkpoint: &Path, batch_path: &Path, out_dir: &Path) -> Result<PomOutcome> {
    let model = load_checkpoint(checkpoint)?;
    let (spec, pose_paths) = load_pom_batch(batch_path)?;
    spec.pom.validate()?;
    spec.perturbation.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let object = model
        .object
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("checkpoint has no object".into()))?;
    let articulated = object.model.articulation.is_some();

    struct Job {
        index: usize,
        reference: InteractionPose,
    }
    let mut jobs = Vec::new();
    for path in &pose_paths {
        let reference = load_pose(path)?;
        for _ in 0..spec.samples_per_reference {
            jobs.push(Job {
                index: jobs.len(),
                reference: reference.clone(),
            });
        }
    }

    let results: Vec<Result<(usize, Option<(InteractionPose, Vec<crate::pose_opt::PomTraceRow>, f64)>)>> = jobs
        .par_iter()
        .map(|job| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, job.index));
            let object_center = job
                .reference
                .object
                .apply(&object.model.mesh.centroid());
            let prior = ReferenceGraspPrior::from_scene(&model, &job.reference, &spec.pom)?;
            let perturbed = sample_perturbation(
                &job.reference,
                &spec.perturbation,
                &object_center,
                articulated,
                &mut rng,
            )?;
            let (optimized, trace) = optimize_pose(&model, &perturbed, &prior, &spec.pom)?;
            let breakdown = final_breakdown(&model, &optimized, &prior, &spec.pom)?;
            let penetration = breakdown.left[2] + breakdown.right[2];
            if penetration <= PENETRATION_ACCEPT_EPS {
                Ok((job.index, Some((optimized, trace, penetration))))
            } else {
                Ok((job.index, None))
            }
        })
        .collect();

    let mut accepted = 0;
    let mut rejected = 0;
    for result in results {
        let (index, outcome) = result?;
        match outcome {
            Some((pose, trace, _)) => {
                save_pose(&pose, out_dir.join(format!("pose_{index:04}.json")))?;
                crate::pose_opt::write_pom_trace(
                    &trace,
                    out_dir.join(format!("trace_{index:04}.csv")),
                )?;
                accepted += 1;
            }
            None => {
                log::warn!("sample {index} rejected: penetration above {PENETRATION_ACCEPT_EPS}");
                rejected += 1;
            }
        }
    }
    let outcome = PomOutcome {
        requested: jobs.len(),
        accepted,
        rejected,
    };
    let summary = serde_json::to_string_pretty(&outcome).expect("serializable");
    std::fs::write(out_dir.join("summary.json"), summary)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    if accepted == 0 {
        return Err(Error::AllSamplesRejected);
    }
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Camera sampling, compositing, cropping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraSamplerConfig {
    pub count: usize,
    /// Orbit radius range in meters.
    pub radius: [f64; 2],
    /// Elevation range in degrees.
    pub elevation_deg: [f64; 2],
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
}

fn default_near() -> f64 {
    0.01
}

fn default_far() -> f64 {
    100.0
}

impl CameraSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidConfig("camera count must be > 0".into()));
        }
        if self.radius[0] <= 0.0 || self.radius[1] < self.radius[0] {
            return Err(Error::InvalidConfig(format!(
                "bad radius range {:?}",
                self.radius
            )));
        }
        Ok(())
    }
}

/// Look-at camera on a random orbit around the interaction centroid:
/// azimuth uniform on [0, 360), elevation and radius uniform in range.
pub fn sample_camera(
    cfg: &CameraSamplerConfig,
    centroid: &Vector3<f64>,
    rng: &mut impl Rng,
) -> Result<Camera> {
    let azimuth = rng.gen_range(0.0..(2.0 * std::f64::consts::PI));
    let elevation = if cfg.elevation_deg[1] > cfg.elevation_deg[0] {
        rng.gen_range(cfg.elevation_deg[0]..cfg.elevation_deg[1])
    } else {
        cfg.elevation_deg[0]
    }
    .to_radians();
    let radius = if cfg.radius[1] > cfg.radius[0] {
        rng.gen_range(cfg.radius[0]..cfg.radius[1])
    } else {
        cfg.radius[0]
    };
    let eye = centroid
        + Vector3::new(
            radius * elevation.cos() * azimuth.cos(),
            radius * elevation.cos() * azimuth.sin(),
            radius * elevation.sin(),
        );
    Camera::look_at(
        &eye,
        centroid,
        cfg.focal,
        cfg.width,
        cfg.height,
        cfg.near,
        cfg.far,
    )
}

/// Composite a premultiplied rendering over an opaque background:
/// out = fg.rgb + (1 - fg.alpha) * bg.
pub fn composite_background(rendered: &RenderedImage, background: &[f64]) -> Result<Vec<f64>> {
    if background.len() != rendered.rgb.len() {
        return Err(Error::ShapeMismatch(format!(
            "background {} vs render {}",
            background.len(),
            rendered.rgb.len()
        )));
    }
    let mut out = vec![0.0; rendered.rgb.len()];
    for i in 0..rendered.alpha.len() {
        let t = 1.0 - rendered.alpha[i];
        for ch in 0..3 {
            out[i * 3 + ch] = rendered.rgb[i * 3 + ch] + t * background[i * 3 + ch];
        }
    }
    Ok(out)
}

/// Load a background image, cover-scale and center-crop it to the target
/// size.
pub fn load_background(path: &Path, width: usize, height: usize) -> Result<Vec<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?
        .into_rgb8();
    let (bw, bh) = (img.width() as usize, img.height() as usize);
    if bw < width || bh < height {
        return Err(Error::Image {
            path: path.display().to_string(),
            msg: format!("background {bw}x{bh} smaller than target {width}x{height}"),
        });
    }
    let scale = (width as f64 / bw as f64).max(height as f64 / bh as f64);
    let (sw, sh) = (
        (bw as f64 * scale).ceil() as u32,
        (bh as f64 * scale).ceil() as u32,
    );
    let resized = image::imageops::resize(&img, sw, sh, image::imageops::FilterType::Triangle);
    let x0 = (sw as usize - width) / 2;
    let y0 = (sh as usize - height) / 2;
    let mut out = vec![0.0; width * height * 3];
    for y in 0..height {
        for x in 0..width {
            let p = resized.get_pixel((x0 + x) as u32, (y0 + y) as u32);
            for ch in 0..3 {
                out[(y * width + x) * 3 + ch] = p.0[ch] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Crop window placement: centered on the projected interaction centroid
/// plus jitter, clamped inside the frame. Errors when the centroid is
/// outside the frame.
pub fn crop_window(
    centroid_px: (f64, f64),
    jitter: (f64, f64),
    size: usize,
    width: usize,
    height: usize,
) -> Result<(usize, usize)> {
    if size > width || size > height {
        return Err(Error::InvalidConfig(format!(
            "crop {size} larger than image {width}x{height}"
        )));
    }
    let (cx, cy) = centroid_px;
    if cx < 0.0 || cy < 0.0 || cx >= width as f64 || cy >= height as f64 {
        return Err(Error::Pipeline(format!(
            "interaction centroid ({cx:.1}, {cy:.1}) outside the frame"
        )));
    }
    let half = size as f64 / 2.0;
    let x0 = (cx + jitter.0 - half)
        .round()
        .clamp(0.0, (width - size) as f64) as usize;
    let y0 = (cy + jitter.1 - half)
        .round()
        .clamp(0.0, (height - size) as f64) as usize;
    Ok((x0, y0))
}

/// Crop an interleaved RGB image.
pub fn crop_image(src: &[f64], width: usize, x0: usize, y0: usize, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let si = ((y0 + y) * width + (x0 + x)) * 3;
            let di = (y * size + x) * 3;
            out[di..di + 3].copy_from_slice(&src[si..si + 3]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Augmentation job
// ---------------------------------------------------------------------------

/// A pluggable image refinement stage applied between rendering and
/// compositing; the default passes the rendering through unchanged.
pub trait RefineStage: Sync {
    fn refine(&self, image: &RenderedImage) -> RenderedImage;
    fn name(&self) -> &str {
        "identity"
    }
}

pub struct IdentityRefine;

impl RefineStage for IdentityRefine {
    fn refine(&self, image: &RenderedImage) -> RenderedImage {
        image.clone()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentJob {
    pub checkpoint: String,
    /// Directory of pose JSONs (the output of the pose expansion).
    pub poses: String,
    pub cameras: CameraSamplerConfig,
    pub background_dir: String,
    #[serde(default = "default_crop")]
    pub crop_size: usize,
    /// Uniform crop-center jitter in pixels.
    #[serde(default = "default_crop_jitter")]
    pub crop_jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_crop() -> usize {
    224
}

fn default_crop_jitter() -> f64 {
    16.0
}

pub fn load_augment_job(path: impl AsRef<Path>) -> Result<AugmentJob> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?;
    let job: AugmentJob =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    job.cameras.validate()?;
    if job.crop_size > job.cameras.width || job.crop_size > job.cameras.height {
        return Err(Error::InvalidConfig(format!(
            "crop {} exceeds render size {}x{}",
            job.crop_size, job.cameras.width, job.cameras.height
        )));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb.display().to_string()
        } else {
            base.join(pb).display().to_string()
        }
    };
    Ok(AugmentJob {
        checkpoint: resolve(&job.checkpoint),
        poses: resolve(&job.poses),
        background_dir: resolve(&job.background_dir),
        ..job
    })
}

/// Per-hand 3D joints plus the object center.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Joints3d {
    pub left: Vec<[f64; 3]>,
    pub right: Vec<[f64; 3]>,
    pub object_center: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Joints2d {
    pub left: Vec<[f64; 2]>,
    pub right: Vec<[f64; 2]>,
    pub object_center: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContactSummary {
    pub max: f64,
    pub mean: f64,
    pub frac_over_half: f64,
}

/// One emitted dataset sample (one JSON line in the manifest).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: String,
    pub camera: Camera,
    pub pose: InteractionPose,
    pub joints3d: Joints3d,
    pub joints2d: Joints2d,
    pub contact: ContactSummary,
}

/// Tolerance of the 2D/3D projection consistency check (pixels).
pub const JOINT_CONSISTENCY_TOL: f64 = 1e-4;

fn project_joints(camera: &Camera, joints: &Joints3d) -> Joints2d {
    let project = |p: &[f64; 3]| {
        let (u, v, _) = camera.project(&Vector3::from(*p));
        [u, v]
    };
    Joints2d {
        left: joints.left.iter().map(project).collect(),
        right: joints.right.iter().map(project).collect(),
        object_center: project(&joints.object_center),
    }
}

fn check_joint_consistency(record: &SampleRecord) -> Result<()> {
    let reprojected = project_joints(&record.camera, &record.joints3d);
    let pairs = record
        .joints2d
        .left
        .iter()
        .zip(&reprojected.left)
        .chain(record.joints2d.right.iter().zip(&reprojected.right))
        .chain(std::iter::once((
            &record.joints2d.object_center,
            &reprojected.object_center,
        )));
    for (a, b) in pairs {
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        if d > JOINT_CONSISTENCY_TOL {
            return Err(Error::Pipeline(format!(
                "2D/3D joint inconsistency: {d:.2e} px"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct AugmentOutcome {
    pub requested: usize,
    pub generated: usize,
    pub failed: usize,
}

impl AugmentOutcome {
    pub fn success(&self) -> bool {
        self.generated as f64 >= MIN_SUCCESS_FRACTION * self.requested as f64
    }
}

fn scene_contact_summary(
    model: &SceneModel,
    pose: &InteractionPose,
    seed: u64,
) -> Result<ContactSummary> {
    let object = model.object.as_ref().expect("object present");
    let samples = crate::pose_opt::sample_object_points(&object.model.mesh, 512, seed);
    let posed = crate::pose_opt::pose_object(&object.model, &pose.object, &samples)?;
    let mut hand_points = Vec::new();
    for (side, hp) in [(Side::Left, &pose.left), (Side::Right, &pose.right)] {
        if let Some(hand) = model.hand(side) {
            let base: Vec<Vector3<f64>> = (0..hand.rig.canonical_mesh.vertices.len())
                .map(|i| hand.rig.canonical_mesh.vertex(i))
                .collect();
            let (pts, _) = crate::scene::pose_hand_vertices(&hand.rig, &base, hp)?;
            hand_points.extend(pts);
        }
    }
    let map = crate::pose_opt::compute_contact_map(&hand_points, &posed.points)?;
    let n = map.values.len() as f64;
    Ok(ContactSummary {
        max: map.values.iter().cloned().fold(0.0, f64::max),
        mean: map.values.iter().sum::<f64>() / n,
        frac_over_half: map.values.iter().filter(|&&v| v > 0.5).count() as f64 / n,
    })
}

/// Render an augmented dataset: for every (pose, camera) pair, render,
/// refine, composite, crop, annotate. Samples are processed in parallel but
/// written in deterministic order.
pub fn cmd_augment(
    job: &AugmentJob,
    out_dir: &Path,
    refine: &dyn RefineStage,
) -> Result<AugmentOutcome> {
    let model = load_checkpoint(Path::new(&job.checkpoint))?;
    let pose_dir = Path::new(&job.poses);
    let mut pose_files: Vec<PathBuf> = std::fs::read_dir(pose_dir)
        .map_err(|_| Error::EmptyPoseDir(pose_dir.display().to_string()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension().map_or(false, |e| e == "json")
                && p.file_name()
                    .map_or(false, |n| n.to_string_lossy().starts_with("pose_"))
        })
        .collect();
    pose_files.sort();
    if pose_files.is_empty() {
        return Err(Error::EmptyPoseDir(pose_dir.display().to_string()));
    }

    let bg_dir = Path::new(&job.background_dir);
    let mut backgrounds: Vec<PathBuf> = std::fs::read_dir(bg_dir)
        .map_err(|_| Error::MissingFile(bg_dir.display().to_string()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map_or(false, |e| e == "png" || e == "jpg"))
        .collect();
    backgrounds.sort();
    if backgrounds.is_empty() {
        return Err(Error::MissingFile(format!(
            "no background images in {}",
            bg_dir.display()
        )));
    }

    std::fs::create_dir_all(out_dir.join("images"))
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let poses: Vec<InteractionPose> = pose_files
        .iter()
        .map(|p| load_pose(p))
        .collect::<Result<_>>()?;
    let requested = poses.len() * job.cameras.count;

    let results: Vec<std::result::Result<(String, Vec<u8>, SampleRecord), String>> = (0..requested)
        .into_par_iter()
        .map(|index| {
            render_sample(&model, job, &poses, &backgrounds, index, refine)
                .map_err(|e| format!("sample {index}: {e}"))
        })
        .collect();

    let mut manifest = String::new();
    let mut generated = 0;
    let mut failed = 0;
    for result in results {
        match result {
            Ok((name, png_bytes, record)) => {
                let path = out_dir.join("images").join(&name);
                std::fs::write(&path, png_bytes)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                manifest.push_str(&serde_json::to_string(&record).expect("serializable"));
                manifest.push('\n');
                generated += 1;
            }
            Err(msg) => {
                log::warn!("{msg}");
                failed += 1;
            }
        }
    }
    std::fs::write(out_dir.join("manifest.jsonl"), manifest)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let outcome = AugmentOutcome {
        requested,
        generated,
        failed,
    };
    let summary = serde_json::to_string_pretty(&outcome).expect("serializable");
    std::fs::write(out_dir.join("summary.json"), summary)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    Ok(outcome)
}

/// Render one augmented sample; returns (file name, PNG bytes, record).
fn render_sample(
    model: &SceneModel,
    job: &AugmentJob,
    poses: &[InteractionPose],
    backgrounds: &[PathBuf],
    index: usize,
    refine: &dyn RefineStage,
) -> Result<(String, Vec<u8>, SampleRecord)> {
    let pose = &poses[index / job.cameras.count];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(job.seed, index));

    // Interaction centroid: hand joints plus the object center.
    let joints3d = scene_joints(model, pose)?;
    let mut centroid = Vector3::from(joints3d.object_center);
    let mut count = 1.0;
    for j in joints3d.left.iter().chain(&joints3d.right) {
        centroid += Vector3::from(*j);
        count += 1.0;
    }
    centroid /= count;

    let camera = sample_camera(&job.cameras, &centroid, &mut rng)?;
    let rendered = model.render(pose, &camera)?;
    let refined = refine.refine(&rendered);

    // Pick a readable background; skip unreadable ones with a warning.
    let mut background = None;
    let start = rng.gen_range(0..backgrounds.len());
    for k in 0..backgrounds.len() {
        let path = &backgrounds[(start + k) % backgrounds.len()];
        match load_background(path, camera.width, camera.height) {
            Ok(bg) => {
                background = Some(bg);
                break;
            }
            Err(e) => log::warn!("skipping background {}: {e}", path.display()),
        }
    }
    let background =
        background.ok_or_else(|| Error::Pipeline("no readable background".into()))?;
    let composited = composite_background(&refined, &background)?;

    // Crop around the projected centroid.
    let (cu, cv, depth) = camera.project(&centroid);
    if depth <= 0.0 {
        return Err(Error::Pipeline("centroid behind the camera".into()));
    }
    let jitter = (
        rng.gen_range(-job.crop_jitter..=job.crop_jitter),
        rng.gen_range(-job.crop_jitter..=job.crop_jitter),
    );
    let (x0, y0) = crop_window((cu, cv), jitter, job.crop_size, camera.width, camera.height)?;
    let cropped = crop_image(&composited, camera.width, x0, y0, job.crop_size);

    // Shift the principal point; joints remap with the same offset.
    let mut crop_camera = camera.clone();
    crop_camera.cx -= x0 as f64;
    crop_camera.cy -= y0 as f64;
    crop_camera.width = job.crop_size;
    crop_camera.height = job.crop_size;
    let joints2d = project_joints(&crop_camera, &joints3d);

    let record = SampleRecord {
        image: format!("images/sample_{index:05}.png"),
        camera: crop_camera,
        pose: pose.clone(),
        joints3d,
        joints2d,
        contact: scene_contact_summary(model, pose, job.seed)?,
    };
    check_joint_consistency(&record)?;

    // Encode the crop to PNG in-memory.
    let mut img = image::RgbImage::new(job.crop_size as u32, job.crop_size as u32);
    for y in 0..job.crop_size {
        for x in 0..job.crop_size {
            let i = (y * job.crop_size + x) * 3;
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (cropped[i].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (cropped[i + 1].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (cropped[i + 2].clamp(0.0, 1.0) * 255.0).round() as u8,
                ]),
            );
        }
    }
    let mut png_bytes = Vec::new();
    img.write_to(
        &mut std::io::Cursor::new(&mut png_bytes),
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Image {
        path: record.image.clone(),
        msg: e.to_string(),
    })?;
    Ok((format!("sample_{index:05}.png"), png_bytes, record))
}

fn scene_joints(model: &SceneModel, pose: &InteractionPose) -> Result<Joints3d> {
    let to_arr = |v: Vector3<f64>| [v.x, v.y, v.z];
    let left = match &model.left {
        Some(_) => model
            .hand_joints(Side::Left, pose)?
            .into_iter()
            .map(to_arr)
            .collect(),
        None => Vec::new(),
    };
    let right = match &model.right {
        Some(_) => model
            .hand_joints(Side::Right, pose)?
            .into_iter()
            .map(to_arr)
            .collect(),
        None => Vec::new(),
    };
    let object_center = model
        .object
        .as_ref()
        .map(|o| to_arr(pose.object.apply(&o.model.mesh.centroid())))
        .unwrap_or([0.0; 3]);
    Ok(Joints3d {
        left,
        right,
        object_center,
    })
}

// ---------------------------------------------------------------------------
// Validation and rendering commands
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub records: usize,
    pub passed: usize,
    pub failures: Vec<String>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.failures.is_empty() && self.records == self.passed
    }
}

/// Re-verify every record of an emitted dataset: file presence, image size,
/// 2D/3D joint consistency, contact ranges.
pub fn cmd_validate(dataset_dir: &Path) -> Result<ValidationReport> {
    let manifest_path = dataset_dir.join("manifest.jsonl");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|_| Error::MissingFile(manifest_path.display().to_string()))?;
    let mut report = ValidationReport {
        records: 0,
        passed: 0,
        failures: Vec::new(),
    };
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        report.records += 1;
        let fail = |report: &mut ValidationReport, msg: String| {
            report.failures.push(format!("line {}: {msg}", line_no + 1));
        };
        let record: SampleRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                fail(&mut report, format!("unparseable record: {e}"));
                continue;
            }
        };
        let image_path = dataset_dir.join(&record.image);
        let (w, h) = match image::image_dimensions(&image_path) {
            Ok(d) => (d.0 as usize, d.1 as usize),
            Err(e) => {
                fail(&mut report, format!("missing image {}: {e}", record.image));
                continue;
            }
        };
        if w != record.camera.width || h != record.camera.height {
            fail(
                &mut report,
                format!(
                    "image {w}x{h} does not match camera {}x{}",
                    record.camera.width, record.camera.height
                ),
            );
            continue;
        }
        if let Err(e) = check_joint_consistency(&record) {
            fail(&mut report, e.to_string());
            continue;
        }
        let c = &record.contact;
        if !(0.0..=1.0).contains(&c.max)
            || !(0.0..=1.0).contains(&c.mean)
            || !(0.0..=1.0).contains(&c.frac_over_half)
        {
            fail(&mut report, "contact summary outside [0,1]".into());
            continue;
        }
        report.passed += 1;
    }
    Ok(report)
}

/// Render a single pose/camera pair from a checkpoint to a PNG.
pub fn cmd_render(
    checkpoint: &Path,
    pose_path: &Path,
    camera_path: &Path,
    out_path: &Path,
    sixteen_bit: bool,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let pose = load_pose(pose_path)?;
    let camera = crate::camera::load_camera(camera_path)?;
    let image = model.render(&pose, &camera)?;
    if sixteen_bit {
        image.save_png16(out_path)
    } else {
        image.save_png8(out_path)
    }
}

/// Held-out evaluation of a checkpoint against a manifest (used by tests and
/// the metrics log).
pub fn evaluate_checkpoint(checkpoint: &Path, manifest: &Path) -> Result<crate::trainer::EvalMetrics> {
    let model = load_checkpoint(checkpoint)?;
    let (_, heldout) = load_manifest_frames(manifest)?;
    evaluate(&model, &heldout)
}
