//! Canonical-to-target deformation: forward kinematics and linear blend
//! skinning for hands, SE(3) motion for objects, and a single hinge
//! articulation for articulated objects.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::gauss::GaussianFrame;
use crate::math::{polar_rotation, rodrigues, rodrigues_vjp, wrap_axis_angle};
use crate::mesh::TriangleMesh;
use crate::{Error, Result};

/// One skeleton joint: parent index (topologically sorted) and its rest-pose
/// local transform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Row-major 4x4 rest transform relative to the parent.
    pub rest: [f64; 16],
}

impl Joint {
    pub fn rest_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_row_slice(&self.rest)
    }
}

/// Skeleton, per-vertex blending weights and the canonical template mesh.
#[derive(Debug, Clone)]
pub struct SkinnedRig {
    pub joints: Vec<Joint>,
    /// Per canonical vertex: one weight per joint, non-negative, summing to 1.
    pub weights: Vec<Vec<f64>>,
    pub canonical_mesh: TriangleMesh,
    /// Vertex indices eligible as contact candidates (fingertip region).
    pub contact_vertices: Vec<usize>,
}

impl SkinnedRig {
    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, j) in self.joints.iter().enumerate() {
            if let Some(p) = j.parent {
                if p >= i {
                    return Err(Error::InvalidParameter(format!(
                        "joint {i} parent {p} is not topologically sorted"
                    )));
                }
            }
        }
        if self.weights.len() != self.canonical_mesh.vertices.len() {
            return Err(Error::InvalidParameter(format!(
                "weight rows {} != vertices {}",
                self.weights.len(),
                self.canonical_mesh.vertices.len()
            )));
        }
        for (vi, row) in self.weights.iter().enumerate() {
            if row.len() != self.joints.len() {
                return Err(Error::InvalidParameter(format!(
                    "weight row {vi} has {} entries for {} joints",
                    row.len(),
                    self.joints.len()
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-5 || row.iter().any(|&w| w < 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "weight row {vi} is not a convex combination (sum {sum})"
                )));
            }
        }
        for &ci in &self.contact_vertices {
            if ci >= self.canonical_mesh.vertices.len() {
                return Err(Error::InvalidParameter(format!(
                    "contact vertex {ci} out of range"
                )));
            }
        }
        Ok(())
    }

    /// Rest-pose world transform of every joint.
    pub fn rest_world(&self) -> Vec<Matrix4<f64>> {
        let mut out: Vec<Matrix4<f64>> = Vec::with_capacity(self.joints.len());
        for j in &self.joints {
            let local = j.rest_matrix();
            let world = match j.parent {
                Some(p) => out[p] * local,
                None => local,
            };
            out.push(world);
        }
        out
    }

    /// Joint origins in rest pose (for annotations and look-at targets).
    pub fn rest_joint_positions(&self) -> Vec<Vector3<f64>> {
        self.rest_world()
            .iter()
            .map(|w| w.fixed_view::<3, 1>(0, 3).into_owned())
            .collect()
    }
}

/// Hand pose: global root motion plus per-joint axis-angle rotations and an
/// optional canonical-space displacement field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandPose {
    pub root_rotation: [f64; 3],
    pub root_translation: [f64; 3],
    pub joint_rotations: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape_offsets: Option<Vec<[f64; 3]>>,
}

impl HandPose {
    pub fn identity(n_joints: usize) -> Self {
        HandPose {
            root_rotation: [0.0; 3],
            root_translation: [0.0; 3],
            joint_rotations: vec![[0.0; 3]; n_joints],
            shape_offsets: None,
        }
    }

    pub fn root_rotation_vec(&self) -> Vector3<f64> {
        Vector3::from(self.root_rotation)
    }

    pub fn root_translation_vec(&self) -> Vector3<f64> {
        Vector3::from(self.root_translation)
    }

    /// Wrap every axis-angle so magnitudes stay below pi.
    pub fn wrapped(mut self) -> Self {
        let w = wrap_axis_angle(&Vector3::from(self.root_rotation));
        self.root_rotation = [w.x, w.y, w.z];
        for r in &mut self.joint_rotations {
            let w = wrap_axis_angle(&Vector3::from(*r));
            *r = [w.x, w.y, w.z];
        }
        self
    }
}

/// SE(3) object pose (axis-angle + translation) with an optional hinge angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPose {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub articulation_angle: Option<f64>,
}

impl ObjectPose {
    pub fn identity() -> Self {
        ObjectPose {
            rotation: [0.0; 3],
            translation: [0.0; 3],
            articulation_angle: None,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rodrigues(&Vector3::from(self.rotation))
    }

    pub fn translation_vec(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation_vec()
    }

    pub fn inverse(&self) -> ObjectPose {
        let r = self.rotation_matrix().transpose();
        let t = -(r * self.translation_vec());
        ObjectPose {
            rotation: (-Vector3::from(self.rotation)).into(),
            translation: [t.x, t.y, t.z],
            articulation_angle: self.articulation_angle,
        }
    }
}

/// An affine bone transform (linear part + translation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoneTransform {
    pub linear: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl BoneTransform {
    pub fn identity() -> Self {
        BoneTransform {
            linear: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Self {
        BoneTransform {
            linear: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.linear * p + self.translation
    }
}

fn homogeneous_rotation(aa: &Vector3<f64>) -> Matrix4<f64> {
    let r = rodrigues(aa);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m
}

fn root_transform(pose: &HandPose) -> Matrix4<f64> {
    let mut m = homogeneous_rotation(&pose.root_rotation_vec());
    m.fixed_view_mut::<3, 1>(0, 3)
        .copy_from(&pose.root_translation_vec());
    m
}

/// Cached forward-kinematics state (worlds are needed by the backward pass).
#[derive(Debug, Clone)]
pub struct FkForward {
    pub bones: Vec<BoneTransform>,
    worlds: Vec<Matrix4<f64>>,
    posed_locals: Vec<Matrix4<f64>>,
    inv_rest_world: Vec<Matrix4<f64>>,
}

/// Bone transforms mapping canonical space to target space:
/// B_i = world_i * rest_world_i^{-1}, with the posed world built by
/// composing parent worlds with each joint's rest transform and its
/// axis-angle rotation; the root additionally carries the global
/// rotation + translation.
pub fn forward_kinematics(rig: &SkinnedRig, pose: &HandPose) -> Result<FkForward> {
    if pose.joint_rotations.len() != rig.joints.len() {
        return Err(Error::JointCountMismatch {
            rig: rig.joints.len(),
            pose: pose.joint_rotations.len(),
        });
    }
    let rest_world = rig.rest_world();
    let inv_rest_world: Vec<Matrix4<f64>> = rest_world
        .iter()
        .map(|m| m.try_inverse().expect("rest transforms are invertible"))
        .collect();

    let root = root_transform(pose);
    let mut worlds: Vec<Matrix4<f64>> = Vec::with_capacity(rig.joints.len());
    let mut posed_locals = Vec::with_capacity(rig.joints.len());
    for (i, joint) in rig.joints.iter().enumerate() {
        let local =
            joint.rest_matrix() * homogeneous_rotation(&Vector3::from(pose.joint_rotations[i]));
        let world = match joint.parent {
            Some(p) => worlds[p] * local,
            None => root * local,
        };
        posed_locals.push(local);
        worlds.push(world);
    }
    let bones = worlds
        .iter()
        .zip(&inv_rest_world)
        .map(|(w, ir)| BoneTransform::from_matrix4(&(w * ir)))
        .collect();
    Ok(FkForward {
        bones,
        worlds,
        posed_locals,
        inv_rest_world,
    })
}

/// Gradients with respect to a hand pose.
#[derive(Debug, Clone)]
pub struct PoseGrads {
    pub root_rotation: Vector3<f64>,
    pub root_translation: Vector3<f64>,
    pub joint_rotations: Vec<Vector3<f64>>,
}

impl PoseGrads {
    pub fn zeros(n_joints: usize) -> Self {
        PoseGrads {
            root_rotation: Vector3::zeros(),
            root_translation: Vector3::zeros(),
            joint_rotations: vec![Vector3::zeros(); n_joints],
        }
    }
}

/// Reverse-mode pass through the kinematic tree.
///
/// `grad_bones` carries dL/d(linear) and dL/d(translation) per bone.
pub fn forward_kinematics_vjp(
    rig: &SkinnedRig,
    pose: &HandPose,
    fwd: &FkForward,
    grad_bones: &[(Matrix3<f64>, Vector3<f64>)],
) -> PoseGrads {
    let n = rig.joints.len();
    let mut grad_world = vec![Matrix4::<f64>::zeros(); n];
    for i in 0..n {
        // B_i = W_i * invRest_i  =>  dL/dW_i = dL/dB_i * invRest_i^T.
        let mut gb = Matrix4::zeros();
        gb.fixed_view_mut::<3, 3>(0, 0).copy_from(&grad_bones[i].0);
        gb.fixed_view_mut::<3, 1>(0, 3).copy_from(&grad_bones[i].1);
        grad_world[i] += gb * fwd.inv_rest_world[i].transpose();
    }

    let mut grad_root = Matrix4::<f64>::zeros();
    let mut out = PoseGrads::zeros(n);
    let root = root_transform(pose);
    for i in (0..n).rev() {
        let gw = grad_world[i];
        let parent_world = match rig.joints[i].parent {
            Some(p) => fwd.worlds[p],
            None => root,
        };
        // W_i = P * L_i: propagate to the parent and to the posed local.
        let gl = parent_world.transpose() * gw;
        match rig.joints[i].parent {
            Some(p) => grad_world[p] += gw * fwd.posed_locals[i].transpose(),
            None => grad_root += gw * fwd.posed_locals[i].transpose(),
        }
        // L_i = rest_i * R4(theta_i).
        let g_rot4 = rig.joints[i].rest_matrix().transpose() * gl;
        let g_rot3 = g_rot4.fixed_view::<3, 3>(0, 0).into_owned();
        out.joint_rotations[i] = rodrigues_vjp(&Vector3::from(pose.joint_rotations[i]), &g_rot3);
    }
    // Root transform: [R | t].
    let g_r = grad_root.fixed_view::<3, 3>(0, 0).into_owned();
    out.root_rotation = rodrigues_vjp(&pose.root_rotation_vec(), &g_r);
    out.root_translation = grad_root.fixed_view::<3, 1>(0, 3).into_owned();
    out
}

/// Blend bone transforms with a weight row: A = sum_i w_i B_i.
pub fn blend_bones(w_row: &[f64], bones: &[BoneTransform]) -> BoneTransform {
    let mut linear = Matrix3::zeros();
    let mut translation = Vector3::zeros();
    for (w, b) in w_row.iter().zip(bones) {
        linear += b.linear * *w;
        translation += b.translation * *w;
    }
    BoneTransform {
        linear,
        translation,
    }
}

/// Linear blend skinning of a single point.
pub fn lbs_deform(point: &Vector3<f64>, w_row: &[f64], bones: &[BoneTransform]) -> Vector3<f64> {
    blend_bones(w_row, bones).apply(point)
}

/// Deform a full Gaussian frame by LBS: the center through the blended
/// affine map, the orientation and covariance through the polar-decomposition
/// rotation of the blended linear part. Axis scales are unchanged.
pub fn deform_gaussian_hand(
    frame: &GaussianFrame,
    w_row: &[f64],
    bones: &[BoneTransform],
) -> Result<GaussianFrame> {
    let blended = blend_bones(w_row, bones);
    if blended.linear.determinant().abs() < 1e-9 {
        return Err(Error::DegenerateBlend);
    }
    let rp = polar_rotation(&blended.linear)?;
    Ok(GaussianFrame {
        center: blended.apply(&frame.center),
        rotation: rp * frame.rotation,
        axis_scales: frame.axis_scales,
        covariance: rp * frame.covariance * rp.transpose(),
    })
}

/// Rigid SE(3) deformation of a Gaussian frame.
pub fn rigid_deform(frame: &GaussianFrame, pose: &ObjectPose) -> GaussianFrame {
    let r = pose.rotation_matrix();
    let t = pose.translation_vec();
    GaussianFrame {
        center: r * frame.center + t,
        rotation: r * frame.rotation,
        axis_scales: frame.axis_scales,
        covariance: r * frame.covariance * r.transpose(),
    }
}

/// Rotate the moving part of a mesh about a hinge axis. Base vertices are
/// copied bit-exactly.
pub fn articulate(
    mesh: &TriangleMesh,
    moving: &[bool],
    axis_point: &Vector3<f64>,
    axis_dir: &Vector3<f64>,
    angle: f64,
) -> Result<TriangleMesh> {
    if moving.len() != mesh.vertices.len() {
        return Err(Error::InvalidParameter(
            "part labels must cover all vertices".into(),
        ));
    }
    if axis_dir.norm() < 1e-12 {
        return Err(Error::InvalidParameter(
            "zero-length articulation axis".into(),
        ));
    }
    let dir = axis_dir.normalize();
    let r = rodrigues(&(dir * angle));
    let mut vertices = mesh.vertices.clone();
    for (i, is_moving) in moving.iter().enumerate() {
        if *is_moving {
            let p = mesh.vertex(i);
            let q = r * (p - axis_point) + axis_point;
            vertices[i] = [q.x as f32, q.y as f32, q.z as f32];
        }
    }
    Ok(TriangleMesh {
        vertices,
        faces: mesh.faces.clone(),
        is_watertight: mesh.is_watertight,
    })
}

/// A rigid (optionally one-hinge) object model.
#[derive(Debug, Clone)]
pub struct RigidObject {
    pub mesh: TriangleMesh,
    pub articulation: Option<Articulation>,
}

#[derive(Debug, Clone)]
pub struct Articulation {
    pub axis_point: Vector3<f64>,
    pub axis_dir: Vector3<f64>,
    pub moving: Vec<bool>,
}

impl RigidObject {
    /// Canonical mesh after applying the pose's hinge angle (if any).
    pub fn articulated_mesh(&self, pose: &ObjectPose) -> Result<TriangleMesh> {
        match (&self.articulation, pose.articulation_angle) {
            (Some(art), Some(angle)) => articulate(
                &self.mesh,
                &art.moving,
                &art.axis_point,
                &art.axis_dir,
                angle,
            ),
            _ => Ok(self.mesh.clone()),
        }
    }
}

// ---------------------------------------------------------------------------
// JSON formats
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RigFile {
    joints: Vec<Joint>,
    weights: Vec<Vec<f64>>,
    mesh: String,
    #[serde(default)]
    contact_vertices: Vec<usize>,
}

/// Load a rig JSON: `{joints:[{name,parent,rest:[16]}], weights:[[..]],
/// mesh:"path.obj", contact_vertices:[..]}`. The mesh path resolves relative
/// to the rig file.
pub fn load_rig(path: impl AsRef<Path>) -> Result<SkinnedRig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?;
    let file: RigFile =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let mesh_path = path.parent().unwrap_or(Path::new(".")).join(&file.mesh);
    let canonical_mesh = crate::mesh::load_mesh(&mesh_path)?;
    let rig = SkinnedRig {
        joints: file.joints,
        weights: file.weights,
        canonical_mesh,
        contact_vertices: file.contact_vertices,
    };
    rig.validate()?;
    Ok(rig)
}

/// Serialize a rig next to its mesh file.
pub fn save_rig(rig: &SkinnedRig, path: impl AsRef<Path>, mesh_file: &str) -> Result<()> {
    let path = path.as_ref();
    let file = RigFile {
        joints: rig.joints.clone(),
        weights: rig.weights.clone(),
        mesh: mesh_file.to_string(),
        contact_vertices: rig.contact_vertices.clone(),
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ObjectFile {
    mesh: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    articulation: Option<ArticulationFile>,
}

#[derive(Serialize, Deserialize)]
struct ArticulationFile {
    axis_point: [f64; 3],
    axis_dir: [f64; 3],
    part_labels: String,
}

/// Load an object JSON: `{mesh, articulation?:{axis_point, axis_dir,
/// part_labels}}`. The labels file holds one `0` (base) or `1` (moving)
/// token per vertex.
pub fn load_object(path: impl AsRef<Path>) -> Result<RigidObject> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?;
    let file: ObjectFile =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mesh = crate::mesh::load_mesh(base.join(&file.mesh))?;
    let articulation = match file.articulation {
        Some(a) => {
            let labels_path = base.join(&a.part_labels);
            let labels_text = std::fs::read_to_string(&labels_path)
                .map_err(|_| Error::MissingFile(labels_path.display().to_string()))?;
            let moving: Vec<bool> = labels_text
                .split_whitespace()
                .map(|t| matches!(t, "1" | "moving"))
                .collect();
            if moving.len() != mesh.vertices.len() {
                return Err(Error::InvalidParameter(format!(
                    "{} labels for {} vertices",
                    moving.len(),
                    mesh.vertices.len()
                )));
            }
            let dir = Vector3::from(a.axis_dir);
            if dir.norm() < 1e-12 {
                return Err(Error::InvalidParameter(
                    "zero-length articulation axis".into(),
                ));
            }
            Some(Articulation {
                axis_point: Vector3::from(a.axis_point),
                axis_dir: dir.normalize(),
                moving,
            })
        }
        None => None,
    };
    Ok(RigidObject { mesh, articulation })
}

/// Serialize an object model (and its labels file when articulated).
pub fn save_object(
    object: &RigidObject,
    path: impl AsRef<Path>,
    mesh_file: &str,
    labels_file: &str,
) -> Result<()> {
    let path = path.as_ref();
    let articulation = object.articulation.as_ref().map(|a| ArticulationFile {
        axis_point: [a.axis_point.x, a.axis_point.y, a.axis_point.z],
        axis_dir: [a.axis_dir.x, a.axis_dir.y, a.axis_dir.z],
        part_labels: labels_file.to_string(),
    });
    if let Some(a) = &object.articulation {
        let labels: Vec<&str> = a.moving.iter().map(|m| if *m { "1" } else { "0" }).collect();
        let labels_path = path.parent().unwrap_or(Path::new(".")).join(labels_file);
        std::fs::write(&labels_path, labels.join("\n"))
            .map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    }
    let file = ObjectFile {
        mesh: mesh_file.to_string(),
        articulation,
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}
