//! Bimanual grasp pose synthesis: perturb a reference interaction, then
//! minimize contact-consistency, hand-centric and penetration losses over
//! each hand's pose with the object fixed.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deform::{HandPose, ObjectPose, RigidObject, SkinnedRig};
use crate::mesh::distance::{closest_point_mesh, SignedDistanceMesh};
use crate::mesh::TriangleMesh;
use crate::scene::{pose_hand_vertices, pose_hand_vertices_vjp, InteractionPose, SceneModel};
use crate::trainer::AdamState;
use crate::{Error, Result};

/// Logistic sharpness of the distance-to-contact map (1/m).
pub const CONTACT_SHARPNESS: f64 = 100.0;
/// Hand-centric clamp distance (m).
pub const HAND_CENTRIC_CLAMP: f64 = 0.02;

/// Per-object-point contact values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ContactMap {
    pub values: Vec<f64>,
}

/// Perturbation ranges for novel-pose synthesis.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationConfig {
    /// Per-axis rotation range in degrees.
    pub rot_range_deg: [f64; 2],
    /// Fraction of the hand-object distance to retreat.
    pub retreat_fraction: f64,
    /// Positional jitter magnitude range in meters.
    pub jitter_range: [f64; 2],
    /// Articulation delta range in radians (articulated objects only).
    pub articulation_range: [f64; 2],
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            rot_range_deg: [0.0, 20.0],
            retreat_fraction: 0.05,
            jitter_range: [0.0, 0.06],
            articulation_range: [0.01 * std::f64::consts::PI, 0.2 * std::f64::consts::PI],
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            self.rot_range_deg,
            self.jitter_range,
            self.articulation_range,
        ];
        for r in ranges {
            if r[0] < 0.0 || r[1] < r[0] {
                return Err(Error::InvalidConfig(format!("bad range {r:?}")));
            }
        }
        if self.retreat_fraction < 0.0 {
            return Err(Error::InvalidConfig("negative retreat".into()));
        }
        Ok(())
    }

    /// Zeroed config: `sample_perturbation` becomes the identity.
    pub fn zeroed() -> Self {
        PerturbationConfig {
            rot_range_deg: [0.0, 0.0],
            retreat_fraction: 0.0,
            jitter_range: [0.0, 0.0],
            articulation_range: [0.0, 0.0],
        }
    }
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PomConfig {
    pub weight_contact: f64,
    pub weight_hand: f64,
    pub weight_penetration: f64,
    pub iterations: usize,
    /// Target learning rate for rotations, joints and shape offsets.
    pub lr_pose: f64,
    /// Target learning rate for the root translation.
    pub lr_translation: f64,
    /// Warmup start learning rate.
    pub lr_initial: f64,
    /// Linear-ramp length in steps.
    pub warmup_steps: usize,
    /// Object surface sample count for the contact map.
    pub contact_points: usize,
    /// Hand surface sample count for the contact map.
    pub hand_points: usize,
    /// Also optimize the per-vertex shape offset field.
    pub include_shape: bool,
    /// Seed for the object surface sampler.
    pub seed: u64,
}

impl Default for PomConfig {
    fn default() -> Self {
        PomConfig {
            weight_contact: 1.0,
            weight_hand: 1.0,
            weight_penetration: 17.0,
            iterations: 200,
            lr_pose: 5e-4,
            lr_translation: 3e-5,
            lr_initial: 6.25e-6,
            warmup_steps: 20,
            contact_points: 2048,
            hand_points: 1024,
            include_shape: true,
            seed: 0,
        }
    }
}

impl PomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be > 0".into()));
        }
        if self.weight_contact < 0.0 || self.weight_hand < 0.0 || self.weight_penetration < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Distance-to-contact map: Omega = 2 (1 - sigma(k d)), 1 at contact,
/// 0 far away. `d` is the distance to the nearest hand point.
pub fn compute_contact_map(
    hand_points: &[Vector3<f64>],
    object_points: &[Vector3<f64>],
) -> Result<ContactMap> {
    if hand_points.is_empty() || object_points.is_empty() {
        return Err(Error::InvalidParameter("empty point cloud".into()));
    }
    let values = object_points
        .iter()
        .map(|o| {
            let d = nearest_distance(o, hand_points).0;
            contact_value(d)
        })
        .collect();
    Ok(ContactMap { values })
}

fn contact_value(d: f64) -> f64 {
    2.0 * (1.0 - sigmoid(CONTACT_SHARPNESS * d))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn nearest_distance(p: &Vector3<f64>, points: &[Vector3<f64>]) -> (f64, usize) {
    let mut best = f64::INFINITY;
    let mut idx = 0;
    for (i, q) in points.iter().enumerate() {
        let d = (p - q).norm_squared();
        if d < best {
            best = d;
            idx = i;
        }
    }
    (best.sqrt(), idx)
}

/// Self-supervised consistency: squared L2 between the map and the prior
/// (summed over points).
pub fn loss_contact_consistency(omega: &ContactMap, prior: &ContactMap) -> Result<f64> {
    if omega.values.len() != prior.values.len() {
        return Err(Error::ShapeMismatch(format!(
            "contact maps {} vs {}",
            omega.values.len(),
            prior.values.len()
        )));
    }
    Ok(omega
        .values
        .iter()
        .zip(&prior.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Mean clamped distance from designated contact-candidate hand vertices to
/// the object surface.
pub fn loss_hand_centric(
    candidate_vertices: &[Vector3<f64>],
    object_mesh: &TriangleMesh,
) -> Result<f64> {
    if candidate_vertices.is_empty() {
        return Err(Error::InvalidParameter(
            "no contact-candidate vertices designated".into(),
        ));
    }
    Ok(candidate_vertices
        .iter()
        .map(|v| {
            closest_point_mesh(object_mesh, v)
                .distance
                .clamp(0.0, HAND_CENTRIC_CLAMP)
        })
        .sum::<f64>()
        / candidate_vertices.len() as f64)
}

/// Sum of penetration depths of hand vertices strictly inside the object.
pub fn loss_penetration(
    hand_vertices: &[Vector3<f64>],
    sdf: &SignedDistanceMesh<'_>,
) -> Result<f64> {
    let mut total = 0.0;
    for v in hand_vertices {
        let (d, _) = sdf.signed_distance(v);
        if d < 0.0 {
            total += -d;
        }
    }
    Ok(total)
}

/// Loss weights of the pose objective.
#[derive(Debug, Clone, Copy)]
pub struct PomWeights {
    pub contact: f64,
    pub hand: f64,
    pub penetration: f64,
}

impl From<&PomConfig> for PomWeights {
    fn from(cfg: &PomConfig) -> Self {
        PomWeights {
            contact: cfg.weight_contact,
            hand: cfg.weight_hand,
            penetration: cfg.weight_penetration,
        }
    }
}

/// Per-hand loss terms (contact, hand-centric, penetration) and the total.
#[derive(Debug, Clone, Copy)]
pub struct PomBreakdown {
    pub left: [f64; 3],
    pub right: [f64; 3],
    pub total: f64,
}

impl PomBreakdown {
    pub fn hand_total(terms: &[f64; 3], w: &PomWeights) -> f64 {
        w.contact * terms[0] + w.hand * terms[1] + w.penetration * terms[2]
    }
}

/// The object side of the problem, posed once (the object stays fixed).
pub struct PosedObject {
    /// Object mesh under articulation + rigid pose.
    pub mesh: TriangleMesh,
    /// Posed surface sample points for the contact map.
    pub points: Vec<Vector3<f64>>,
}

/// Evaluate (face, barycentric) samples against a deformed vertex set.
pub fn eval_surface_samples(
    samples: &[(usize, [f64; 3])],
    faces: &[[u32; 3]],
    vertices: &[Vector3<f64>],
) -> Vec<Vector3<f64>> {
    samples
        .iter()
        .map(|(face, bary)| {
            let f = faces[*face];
            vertices[f[0] as usize] * bary[0]
                + vertices[f[1] as usize] * bary[1]
                + vertices[f[2] as usize] * bary[2]
        })
        .collect()
}

/// Sample (face, barycentric) pairs on a canonical surface so the same
/// material points can be re-posed under any deformation.
pub fn sample_surface_points(
    mesh: &TriangleMesh,
    count: usize,
    seed: u64,
) -> Vec<(usize, [f64; 3])> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let areas: Vec<f64> = (0..mesh.faces.len()).map(|f| mesh.face_area(f)).collect();
    let total: f64 = areas.iter().sum();
    let mut cdf = Vec::with_capacity(areas.len());
    let mut acc = 0.0;
    for a in &areas {
        acc += a / total;
        cdf.push(acc);
    }
    (0..count)
        .map(|_| {
            let u: f64 = rng.gen();
            let face = cdf.partition_point(|&c| c < u).min(mesh.faces.len() - 1);
            let mut r1: f64 = rng.gen();
            let mut r2: f64 = rng.gen();
            if r1 + r2 > 1.0 {
                r1 = 1.0 - r1;
                r2 = 1.0 - r2;
            }
            (face, [1.0 - r1 - r2, r1, r2])
        })
        .collect()
}

/// Sample material points on the canonical object surface.
pub fn sample_object_points(
    mesh: &TriangleMesh,
    count: usize,
    seed: u64,
) -> Vec<(usize, [f64; 3])> {
    sample_surface_points(mesh, count, seed)
}

/// Pose the object mesh and its sampled material points.
pub fn pose_object(
    object: &RigidObject,
    pose: &ObjectPose,
    samples: &[(usize, [f64; 3])],
) -> Result<PosedObject> {
    let articulated = object.articulated_mesh(pose)?;
    let r = pose.rotation_matrix();
    let t = pose.translation_vec();
    let vertices: Vec<[f32; 3]> = (0..articulated.vertices.len())
        .map(|i| {
            let p = r * articulated.vertex(i) + t;
            [p.x as f32, p.y as f32, p.z as f32]
        })
        .collect();
    let mesh = TriangleMesh {
        vertices,
        faces: articulated.faces.clone(),
        is_watertight: articulated.is_watertight,
    };
    let points = samples
        .iter()
        .map(|(face, bary)| {
            let v = mesh.face_vertices(*face);
            crate::gauss::gaussian_center(bary, &v)
        })
        .collect();
    Ok(PosedObject { mesh, points })
}

/// Everything fixed during one pose optimization.
pub struct PomProblem<'a> {
    pub left_rig: &'a SkinnedRig,
    pub right_rig: &'a SkinnedRig,
    /// Hand surface samples for the contact point clouds.
    pub left_samples: Vec<(usize, [f64; 3])>,
    pub right_samples: Vec<(usize, [f64; 3])>,
    pub object: PosedObject,
    pub prior_left: ContactMap,
    pub prior_right: ContactMap,
    pub weights: PomWeights,
}

impl<'a> PomProblem<'a> {
    fn sdf(&self) -> Result<SignedDistanceMesh<'_>> {
        SignedDistanceMesh::new(&self.object.mesh)
    }
}

fn hand_terms(
    rig: &SkinnedRig,
    pose: &HandPose,
    samples: &[(usize, [f64; 3])],
    problem: &PomProblem<'_>,
    sdf: &SignedDistanceMesh<'_>,
    prior: &ContactMap,
) -> Result<([f64; 3], Vec<Vector3<f64>>, crate::deform::FkForward)> {
    let base: Vec<Vector3<f64>> = (0..rig.canonical_mesh.vertices.len())
        .map(|i| rig.canonical_mesh.vertex(i))
        .collect();
    let (posed, fk) = pose_hand_vertices(rig, &base, pose)?;
    let cloud = eval_surface_samples(samples, &rig.canonical_mesh.faces, &posed);
    let omega = compute_contact_map(&cloud, &problem.object.points)?;
    let lc = loss_contact_consistency(&omega, prior)?;
    let candidates: Vec<Vector3<f64>> = rig.contact_vertices.iter().map(|&i| posed[i]).collect();
    let lh = loss_hand_centric(&candidates, &problem.object.mesh)?;
    let lp = loss_penetration(&posed, sdf)?;
    Ok(([lc, lh, lp], posed, fk))
}

/// Weighted objective over both hands, with the per-term breakdown.
pub fn pom_loss(
    problem: &PomProblem<'_>,
    left: &HandPose,
    right: &HandPose,
) -> Result<PomBreakdown> {
    let sdf = problem.sdf()?;
    let (lt, _, _) = hand_terms(
        problem.left_rig,
        left,
        &problem.left_samples,
        problem,
        &sdf,
        &problem.prior_left,
    )?;
    let (rt, _, _) = hand_terms(
        problem.right_rig,
        right,
        &problem.right_samples,
        problem,
        &sdf,
        &problem.prior_right,
    )?;
    let total = PomBreakdown::hand_total(&lt, &problem.weights)
        + PomBreakdown::hand_total(&rt, &problem.weights);
    Ok(PomBreakdown {
        left: lt,
        right: rt,
        total,
    })
}

/// One hand's loss terms and pose gradients, computed in a single pass over
/// the point clouds (the nearest-neighbor scan is by far the dominant cost).
fn hand_backward(
    rig: &SkinnedRig,
    pose: &HandPose,
    samples: &[(usize, [f64; 3])],
    problem: &PomProblem<'_>,
    sdf: &SignedDistanceMesh<'_>,
    prior: &ContactMap,
) -> Result<([f64; 3], crate::deform::PoseGrads, Vec<Vector3<f64>>)> {
    let base: Vec<Vector3<f64>> = (0..rig.canonical_mesh.vertices.len())
        .map(|i| rig.canonical_mesh.vertex(i))
        .collect();
    let (posed, fk) = pose_hand_vertices(rig, &base, pose)?;
    let cloud = eval_surface_samples(samples, &rig.canonical_mesh.faces, &posed);
    let w = &problem.weights;
    let mut grad_pts = vec![Vector3::zeros(); posed.len()];
    let mut terms = [0.0; 3];

    // Contact consistency: value and gradient share one nearest scan.
    // Nearest assignments are treated locally constant; sample-point
    // gradients distribute to the face corners barycentrically.
    for (oi, o) in problem.object.points.iter().enumerate() {
        let (d, hi) = nearest_distance(o, &cloud);
        let s = sigmoid(CONTACT_SHARPNESS * d);
        let omega = 2.0 * (1.0 - s);
        let diff = omega - prior.values[oi];
        terms[0] += diff * diff;
        if w.contact > 0.0 && d > 1e-12 {
            let d_d = 2.0 * diff * (-2.0 * CONTACT_SHARPNESS * s * (1.0 - s));
            let g = (cloud[hi] - o) / d * (w.contact * d_d);
            let (face, bary) = samples[hi];
            let f = rig.canonical_mesh.faces[face];
            for c in 0..3 {
                grad_pts[f[c] as usize] += g * bary[c];
            }
        }
    }

    // Hand-centric: clamped point-to-surface distance on candidates.
    if rig.contact_vertices.is_empty() {
        return Err(Error::InvalidParameter(
            "no contact-candidate vertices designated".into(),
        ));
    }
    let n = rig.contact_vertices.len() as f64;
    for &vi in &rig.contact_vertices {
        let cp = closest_point_mesh(&problem.object.mesh, &posed[vi]);
        terms[1] += cp.distance.clamp(0.0, HAND_CENTRIC_CLAMP) / n;
        if w.hand > 0.0 && cp.distance > 1e-12 && cp.distance < HAND_CENTRIC_CLAMP {
            grad_pts[vi] += (posed[vi] - cp.point) / cp.distance * (w.hand / n);
        }
    }

    // Penetration: depth decreases toward the closest surface point.
    for (vi, v) in posed.iter().enumerate() {
        let (d, cp) = sdf.signed_distance(v);
        if d < -1e-12 {
            terms[2] += -d;
            if w.penetration > 0.0 {
                grad_pts[vi] += (v - cp.point) / cp.distance * w.penetration;
            }
        }
    }

    let (pose_grads, offset_grads) = pose_hand_vertices_vjp(rig, &base, pose, &fk, &grad_pts);
    Ok((terms, pose_grads, offset_grads))
}

/// One per-iteration trace row of the optimization.
#[derive(Debug, Clone, Copy)]
pub struct PomTraceRow {
    pub iteration: usize,
    pub left: [f64; 3],
    pub right: [f64; 3],
    pub total: f64,
}

pub fn write_pom_trace(rows: &[PomTraceRow], path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out =
        String::from("iteration,left_contact,left_hand,left_pen,right_contact,right_hand,right_pen,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iteration,
            r.left[0],
            r.left[1],
            r.left[2],
            r.right[0],
            r.right[1],
            r.right[2],
            r.total
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// A provider of target contact maps. Implementations must be shareable
/// read-only across parallel jobs.
pub trait ContactPrior: Sync {
    /// Predict target maps for (left, right) given the initial point clouds.
    fn predict(
        &self,
        left_points: &[Vector3<f64>],
        right_points: &[Vector3<f64>],
        object_points: &[Vector3<f64>],
    ) -> (ContactMap, ContactMap);
}

/// Default prior: the frozen contact maps of the unperturbed reference pose.
pub struct ReferenceGraspPrior {
    left: ContactMap,
    right: ContactMap,
}

impl ReferenceGraspPrior {
    /// Compute and freeze the reference maps.
    pub fn new(
        model: &SceneModel,
        reference: &InteractionPose,
        object_samples: &[(usize, [f64; 3])],
        left_samples: &[(usize, [f64; 3])],
        right_samples: &[(usize, [f64; 3])],
    ) -> Result<Self> {
        let (left_rig, right_rig, object) = scene_geometry(model)?;
        let posed = pose_object(object, &reference.object, object_samples)?;
        let base_l: Vec<Vector3<f64>> = (0..left_rig.canonical_mesh.vertices.len())
            .map(|i| left_rig.canonical_mesh.vertex(i))
            .collect();
        let base_r: Vec<Vector3<f64>> = (0..right_rig.canonical_mesh.vertices.len())
            .map(|i| right_rig.canonical_mesh.vertex(i))
            .collect();
        let (left_pts, _) = pose_hand_vertices(left_rig, &base_l, &reference.left)?;
        let (right_pts, _) = pose_hand_vertices(right_rig, &base_r, &reference.right)?;
        let left_cloud =
            eval_surface_samples(left_samples, &left_rig.canonical_mesh.faces, &left_pts);
        let right_cloud =
            eval_surface_samples(right_samples, &right_rig.canonical_mesh.faces, &right_pts);
        Ok(ReferenceGraspPrior {
            left: compute_contact_map(&left_cloud, &posed.points)?,
            right: compute_contact_map(&right_cloud, &posed.points)?,
        })
    }

    /// Build from a scene with all samplers derived from one seed.
    pub fn from_scene(
        model: &SceneModel,
        reference: &InteractionPose,
        cfg: &PomConfig,
    ) -> Result<Self> {
        let (left_rig, right_rig, object) = scene_geometry(model)?;
        let object_samples = sample_surface_points(&object.mesh, cfg.contact_points, cfg.seed);
        let left_samples =
            sample_surface_points(&left_rig.canonical_mesh, cfg.hand_points, cfg.seed ^ 1);
        let right_samples =
            sample_surface_points(&right_rig.canonical_mesh, cfg.hand_points, cfg.seed ^ 2);
        Self::new(model, reference, &object_samples, &left_samples, &right_samples)
    }
}

impl ContactPrior for ReferenceGraspPrior {
    fn predict(
        &self,
        _left: &[Vector3<f64>],
        _right: &[Vector3<f64>],
        _object: &[Vector3<f64>],
    ) -> (ContactMap, ContactMap) {
        (self.left.clone(), self.right.clone())
    }
}

fn scene_geometry(model: &SceneModel) -> Result<(&SkinnedRig, &SkinnedRig, &RigidObject)> {
    let left = model
        .left
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("scene has no left hand".into()))?;
    let right = model
        .right
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("scene has no right hand".into()))?;
    let object = model
        .object
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("scene has no object".into()))?;
    Ok((&left.rig, &right.rig, &object.model))
}

// ---------------------------------------------------------------------------
// Perturbation sampling
// ---------------------------------------------------------------------------

/// The raw random draws of one perturbation (exposed for statistical tests).
#[derive(Debug, Clone)]
pub struct PerturbationDraw {
    pub left_rot_deg: [f64; 3],
    pub right_rot_deg: [f64; 3],
    pub left_jitter: Vector3<f64>,
    pub right_jitter: Vector3<f64>,
    pub object_jitter: Vector3<f64>,
    pub articulation_delta: Option<f64>,
}

fn random_direction(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0f64),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn jitter_vector(rng: &mut impl Rng, range: [f64; 2]) -> Vector3<f64> {
    if range[1] <= 0.0 {
        return Vector3::zeros();
    }
    let dir = random_direction(rng);
    let mag = if range[1] > range[0] {
        rng.gen_range(range[0]..range[1])
    } else {
        range[0]
    };
    dir * mag
}

/// Draw the raw perturbation randomness.
pub fn draw_perturbation(
    cfg: &PerturbationConfig,
    articulated: bool,
    rng: &mut impl Rng,
) -> PerturbationDraw {
    let mut angles = || -> [f64; 3] {
        let mut a = [0.0; 3];
        for v in &mut a {
            *v = if cfg.rot_range_deg[1] > cfg.rot_range_deg[0] {
                rng.gen_range(cfg.rot_range_deg[0]..cfg.rot_range_deg[1])
            } else {
                cfg.rot_range_deg[0]
            };
        }
        a
    };
    let left_rot_deg = angles();
    let right_rot_deg = angles();
    let left_jitter = jitter_vector(rng, cfg.jitter_range);
    let right_jitter = jitter_vector(rng, cfg.jitter_range);
    let object_jitter = jitter_vector(rng, cfg.jitter_range);
    let articulation_delta = if articulated {
        Some(
            if cfg.articulation_range[1] > cfg.articulation_range[0] {
                rng.gen_range(cfg.articulation_range[0]..cfg.articulation_range[1])
            } else {
                cfg.articulation_range[0]
            },
        )
    } else {
        None
    };
    PerturbationDraw {
        left_rot_deg,
        right_rot_deg,
        left_jitter,
        right_jitter,
        object_jitter,
        articulation_delta,
    }
}

fn perturb_hand(
    pose: &HandPose,
    rot_deg: &[f64; 3],
    jitter: &Vector3<f64>,
    retreat_fraction: f64,
    object_center: &Vector3<f64>,
) -> Result<HandPose> {
    let mut out = pose.clone();
    // Compose per-axis rotations onto the root orientation; an all-zero
    // draw is an exact no-op.
    if rot_deg.iter().any(|a| *a != 0.0) {
        let rx = crate::math::rodrigues(&Vector3::new(rot_deg[0].to_radians(), 0.0, 0.0));
        let ry = crate::math::rodrigues(&Vector3::new(0.0, rot_deg[1].to_radians(), 0.0));
        let rz = crate::math::rodrigues(&Vector3::new(0.0, 0.0, rot_deg[2].to_radians()));
        let r_old = crate::math::rodrigues(&pose.root_rotation_vec());
        let r_new = rz * ry * rx * r_old;
        let aa = crate::math::rotation_to_axis_angle(&r_new);
        out.root_rotation = [aa.x, aa.y, aa.z];
    }

    // Retreat away from the object, then jitter.
    if retreat_fraction > 0.0 {
        let root = pose.root_translation_vec();
        let away = root - object_center;
        let dist = away.norm();
        if dist < 1e-9 {
            return Err(Error::InvalidParameter(
                "hand root coincides with the object center".into(),
            ));
        }
        let retreated = root + away / dist * (retreat_fraction * dist);
        out.root_translation = [retreated.x, retreated.y, retreated.z];
    }
    if jitter.norm() > 0.0 {
        let new_root = out.root_translation_vec() + jitter;
        out.root_translation = [new_root.x, new_root.y, new_root.z];
    }
    Ok(out.wrapped())
}

/// Apply a drawn perturbation to a reference interaction.
pub fn apply_perturbation(
    reference: &InteractionPose,
    draw: &PerturbationDraw,
    cfg: &PerturbationConfig,
    object_center: &Vector3<f64>,
) -> Result<InteractionPose> {
    let left = perturb_hand(
        &reference.left,
        &draw.left_rot_deg,
        &draw.left_jitter,
        cfg.retreat_fraction,
        object_center,
    )?;
    let right = perturb_hand(
        &reference.right,
        &draw.right_rot_deg,
        &draw.right_jitter,
        cfg.retreat_fraction,
        object_center,
    )?;
    let mut object = reference.object.clone();
    if draw.object_jitter.norm() > 0.0 {
        let t = object.translation_vec() + draw.object_jitter;
        object.translation = [t.x, t.y, t.z];
    }
    if let Some(delta) = draw.articulation_delta {
        object.articulation_angle = Some(object.articulation_angle.unwrap_or(0.0) + delta);
    }
    Ok(InteractionPose {
        left,
        right,
        object,
    })
}

/// Draw and apply a perturbation in one call.
pub fn sample_perturbation(
    reference: &InteractionPose,
    cfg: &PerturbationConfig,
    object_center: &Vector3<f64>,
    articulated: bool,
    rng: &mut impl Rng,
) -> Result<InteractionPose> {
    cfg.validate()?;
    let draw = draw_perturbation(cfg, articulated, rng);
    apply_perturbation(reference, &draw, cfg, object_center)
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct HandOptimizer {
    rot: AdamState,
    trans: AdamState,
    joints: AdamState,
    offsets: Option<AdamState>,
}

impl HandOptimizer {
    fn new(rig: &SkinnedRig, include_shape: bool) -> Self {
        HandOptimizer {
            rot: AdamState::new(3),
            trans: AdamState::new(3),
            joints: AdamState::new(rig.joint_count() * 3),
            offsets: include_shape.then(|| AdamState::new(rig.canonical_mesh.vertices.len() * 3)),
        }
    }

    fn step(
        &mut self,
        pose: &mut HandPose,
        grads: &crate::deform::PoseGrads,
        offset_grads: &[Vector3<f64>],
        lr_pose: f64,
        lr_trans: f64,
    ) {
        let g_rot = [grads.root_rotation.x, grads.root_rotation.y, grads.root_rotation.z];
        let s = self.rot.step(lr_pose, &g_rot);
        for d in 0..3 {
            pose.root_rotation[d] -= s[d];
        }
        let g_t = [
            grads.root_translation.x,
            grads.root_translation.y,
            grads.root_translation.z,
        ];
        let s = self.trans.step(lr_trans, &g_t);
        for d in 0..3 {
            pose.root_translation[d] -= s[d];
        }
        let mut g_j = vec![0.0; pose.joint_rotations.len() * 3];
        for (j, g) in grads.joint_rotations.iter().enumerate() {
            g_j[j * 3] = g.x;
            g_j[j * 3 + 1] = g.y;
            g_j[j * 3 + 2] = g.z;
        }
        let s = self.joints.step(lr_pose, &g_j);
        for (j, r) in pose.joint_rotations.iter_mut().enumerate() {
            for d in 0..3 {
                r[d] -= s[j * 3 + d];
            }
        }
        if let Some(opt) = &mut self.offsets {
            let offsets = pose
                .shape_offsets
                .get_or_insert_with(|| vec![[0.0; 3]; offset_grads.len()]);
            let mut g_o = vec![0.0; offset_grads.len() * 3];
            for (i, g) in offset_grads.iter().enumerate() {
                g_o[i * 3] = g.x;
                g_o[i * 3 + 1] = g.y;
                g_o[i * 3 + 2] = g.z;
            }
            let s = opt.step(lr_pose, &g_o);
            for (i, o) in offsets.iter_mut().enumerate() {
                for d in 0..3 {
                    o[d] -= s[i * 3 + d];
                }
            }
        }
        let wrapped = std::mem::replace(pose, HandPose::identity(0)).wrapped();
        *pose = wrapped;
    }
}

/// Linear warmup from `lr_initial` to `target` over `warmup_steps`.
fn ramp(cfg: &PomConfig, target: f64, step: usize) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        return target;
    }
    let f = step as f64 / cfg.warmup_steps as f64;
    cfg.lr_initial + (target - cfg.lr_initial) * f
}

/// Optimize both hand poses against the fixed object. Returns the final pose
/// (object pose bit-identical to the input) and the per-iteration trace.
pub fn optimize_pose(
    model: &SceneModel,
    initial: &InteractionPose,
    prior: &dyn ContactPrior,
    cfg: &PomConfig,
) -> Result<(InteractionPose, Vec<PomTraceRow>)> {
    cfg.validate()?;
    let (left_rig, right_rig, object) = scene_geometry(model)?;
    let object_samples = sample_surface_points(&object.mesh, cfg.contact_points, cfg.seed);
    let left_samples =
        sample_surface_points(&left_rig.canonical_mesh, cfg.hand_points, cfg.seed ^ 1);
    let right_samples =
        sample_surface_points(&right_rig.canonical_mesh, cfg.hand_points, cfg.seed ^ 2);
    let posed_object = pose_object(object, &initial.object, &object_samples)?;

    // Freeze the prior from the initial state.
    let base_l: Vec<Vector3<f64>> = (0..left_rig.canonical_mesh.vertices.len())
        .map(|i| left_rig.canonical_mesh.vertex(i))
        .collect();
    let base_r: Vec<Vector3<f64>> = (0..right_rig.canonical_mesh.vertices.len())
        .map(|i| right_rig.canonical_mesh.vertex(i))
        .collect();
    let (left_pts, _) = pose_hand_vertices(left_rig, &base_l, &initial.left)?;
    let (right_pts, _) = pose_hand_vertices(right_rig, &base_r, &initial.right)?;
    let left_cloud = eval_surface_samples(&left_samples, &left_rig.canonical_mesh.faces, &left_pts);
    let right_cloud =
        eval_surface_samples(&right_samples, &right_rig.canonical_mesh.faces, &right_pts);
    let (prior_left, prior_right) = prior.predict(&left_cloud, &right_cloud, &posed_object.points);

    let problem = PomProblem {
        left_rig,
        right_rig,
        left_samples,
        right_samples,
        object: posed_object,
        prior_left,
        prior_right,
        weights: PomWeights::from(cfg),
    };
    let sdf = problem.sdf()?;

    let mut left = initial.left.clone();
    let mut right = initial.right.clone();
    let mut opt_l = HandOptimizer::new(left_rig, cfg.include_shape);
    let mut opt_r = HandOptimizer::new(right_rig, cfg.include_shape);
    let mut trace = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let (lt, lg, log) = hand_backward(
            left_rig,
            &left,
            &problem.left_samples,
            &problem,
            &sdf,
            &problem.prior_left,
        )?;
        let (rt, rg, rog) = hand_backward(
            right_rig,
            &right,
            &problem.right_samples,
            &problem,
            &sdf,
            &problem.prior_right,
        )?;
        let total = PomBreakdown::hand_total(&lt, &problem.weights)
            + PomBreakdown::hand_total(&rt, &problem.weights);
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                frame: "pose optimization".into(),
                term: format!("left {lt:?}, right {rt:?}"),
            });
        }
        trace.push(PomTraceRow {
            iteration: it,
            left: lt,
            right: rt,
            total,
        });
        let lr_p = ramp(cfg, cfg.lr_pose, it);
        let lr_t = ramp(cfg, cfg.lr_translation, it);
        opt_l.step(&mut left, &lg, &log, lr_p, lr_t);
        opt_r.step(&mut right, &rg, &rog, lr_p, lr_t);
    }

    Ok((
        InteractionPose {
            left,
            right,
            object: initial.object.clone(),
        },
        trace,
    ))
}

/// Final loss breakdown of an optimized pose (for acceptance thresholds).
pub fn final_breakdown(
    model: &SceneModel,
    pose: &InteractionPose,
    prior: &dyn ContactPrior,
    cfg: &PomConfig,
) -> Result<PomBreakdown> {
    let (left_rig, right_rig, object) = scene_geometry(model)?;
    let object_samples = sample_surface_points(&object.mesh, cfg.contact_points, cfg.seed);
    let left_samples =
        sample_surface_points(&left_rig.canonical_mesh, cfg.hand_points, cfg.seed ^ 1);
    let right_samples =
        sample_surface_points(&right_rig.canonical_mesh, cfg.hand_points, cfg.seed ^ 2);
    let posed_object = pose_object(object, &pose.object, &object_samples)?;
    let base_l: Vec<Vector3<f64>> = (0..left_rig.canonical_mesh.vertices.len())
        .map(|i| left_rig.canonical_mesh.vertex(i))
        .collect();
    let base_r: Vec<Vector3<f64>> = (0..right_rig.canonical_mesh.vertices.len())
        .map(|i| right_rig.canonical_mesh.vertex(i))
        .collect();
    let (left_pts, _) = pose_hand_vertices(left_rig, &base_l, &pose.left)?;
    let (right_pts, _) = pose_hand_vertices(right_rig, &base_r, &pose.right)?;
    let left_cloud = eval_surface_samples(&left_samples, &left_rig.canonical_mesh.faces, &left_pts);
    let right_cloud =
        eval_surface_samples(&right_samples, &right_rig.canonical_mesh.faces, &right_pts);
    let (prior_left, prior_right) = prior.predict(&left_cloud, &right_cloud, &posed_object.points);
    let problem = PomProblem {
        left_rig,
        right_rig,
        left_samples,
        right_samples,
        object: posed_object,
        prior_left,
        prior_right,
        weights: PomWeights::from(cfg),
    };
    pom_loss(&problem, &pose.left, &pose.right)
}
