//! Scene assembly: a left hand, a right hand and an object, each a Gaussian
//! cloud bound to its deformation model, posed into one world frame and
//! rendered with a single global depth order. The backward pass routes
//! rasterizer gradients to every trainable parameter class.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::deform::{
    blend_bones, forward_kinematics, forward_kinematics_vjp, BoneTransform, FkForward, HandPose,
    ObjectPose, PoseGrads, RigidObject, SkinnedRig,
};
use crate::gauss::{build_frame, FrameBuild, GaussianCloud};
use crate::math::{polar_rotation, polar_rotation_grad_m, rodrigues, rodrigues_vjp};
use crate::raster::backward::{render_backward, GaussianGrads};
use crate::raster::{render, RenderedImage, WorldGaussian};
use crate::{Error, Result};

/// Full frame state: both hand poses and the object pose; the camera is
/// supplied at render time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionPose {
    pub left: HandPose,
    pub right: HandPose,
    pub object: ObjectPose,
}

pub fn load_pose(path: impl AsRef<std::path::Path>) -> Result<InteractionPose> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

pub fn save_pose(pose: &InteractionPose, path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(pose)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// A skinned hand: rig plus its appearance cloud. The cloud's mesh holds the
/// trainable canonical vertices; the rig's mesh stays as the template.
#[derive(Debug, Clone)]
pub struct HandEntity {
    pub rig: SkinnedRig,
    pub cloud: GaussianCloud,
}

/// A rigid object: template model plus its appearance cloud.
#[derive(Debug, Clone)]
pub struct ObjectEntity {
    pub model: RigidObject,
    pub cloud: GaussianCloud,
}

#[derive(Debug, Clone, Default)]
pub struct SceneModel {
    pub left: Option<HandEntity>,
    pub right: Option<HandEntity>,
    pub object: Option<ObjectEntity>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl SceneModel {
    pub fn hand(&self, side: Side) -> Option<&HandEntity> {
        match side {
            Side::Left => self.left.as_ref(),
            Side::Right => self.right.as_ref(),
        }
    }

    pub fn total_gaussians(&self) -> usize {
        self.left.as_ref().map_or(0, |e| e.cloud.len())
            + self.right.as_ref().map_or(0, |e| e.cloud.len())
            + self.object.as_ref().map_or(0, |e| e.cloud.len())
    }

    /// Pose all clouds into world space, merged left / right / object.
    pub fn pose_splats(&self, pose: &InteractionPose) -> Result<Vec<WorldGaussian>> {
        let mut out = Vec::with_capacity(self.total_gaussians());
        if let Some(hand) = &self.left {
            pose_hand_cloud(hand, &pose.left, &mut out, None)?;
        }
        if let Some(hand) = &self.right {
            pose_hand_cloud(hand, &pose.right, &mut out, None)?;
        }
        if let Some(object) = &self.object {
            pose_object_cloud(object, &pose.object, &mut out, None)?;
        }
        Ok(out)
    }

    pub fn render(&self, pose: &InteractionPose, cam: &Camera) -> Result<RenderedImage> {
        render(&self.pose_splats(pose)?, cam)
    }

    /// Gradients of a pixel-space loss with respect to every parameter class.
    pub fn render_backward(
        &self,
        pose: &InteractionPose,
        cam: &Camera,
        grad_rgb: &[f64],
        grad_alpha: Option<&[f64]>,
    ) -> Result<SceneGrads> {
        let mut splats = Vec::with_capacity(self.total_gaussians());
        let mut left_fwd = None;
        let mut right_fwd = None;
        let mut object_fwd = None;
        let mut offset = 0usize;
        if let Some(hand) = &self.left {
            let mut cache = HandForward::default();
            pose_hand_cloud(hand, &pose.left, &mut splats, Some(&mut cache))?;
            cache.offset = offset;
            offset += hand.cloud.len();
            left_fwd = Some(cache);
        }
        if let Some(hand) = &self.right {
            let mut cache = HandForward::default();
            pose_hand_cloud(hand, &pose.right, &mut splats, Some(&mut cache))?;
            cache.offset = offset;
            offset += hand.cloud.len();
            right_fwd = Some(cache);
        }
        if let Some(object) = &self.object {
            let mut cache = ObjectForward::default();
            pose_object_cloud(object, &pose.object, &mut splats, Some(&mut cache))?;
            cache.offset = offset;
            object_fwd = Some(cache);
        }

        let world = render_backward(&splats, cam, grad_rgb, grad_alpha)?;

        let left = match (&self.left, left_fwd) {
            (Some(hand), Some(fwd)) => Some(hand_backward(hand, &pose.left, &fwd, &world)?),
            _ => None,
        };
        let right = match (&self.right, right_fwd) {
            (Some(hand), Some(fwd)) => Some(hand_backward(hand, &pose.right, &fwd, &world)?),
            _ => None,
        };
        let object = match (&self.object, object_fwd) {
            (Some(obj), Some(fwd)) => Some(object_backward(obj, &pose.object, &fwd, &world)?),
            _ => None,
        };
        Ok(SceneGrads {
            left,
            right,
            object,
        })
    }

    /// World positions of annotation joints for one hand.
    pub fn hand_joints(&self, side: Side, pose: &InteractionPose) -> Result<Vec<Vector3<f64>>> {
        let hand = self
            .hand(side)
            .ok_or_else(|| Error::InvalidParameter("missing hand".into()))?;
        let hp = match side {
            Side::Left => &pose.left,
            Side::Right => &pose.right,
        };
        let fk = forward_kinematics(&hand.rig, hp)?;
        Ok(fk
            .bones
            .iter()
            .zip(hand.rig.rest_joint_positions())
            .map(|(b, rest)| b.apply(&rest))
            .collect())
    }
}

/// Per-kernel gradients for one cloud plus its canonical vertices.
#[derive(Debug, Clone)]
pub struct CloudGrads {
    pub beta: Vec<[f64; 3]>,
    pub scale_factor: Vec<f64>,
    pub opacity: Vec<f64>,
    pub sh: Vec<Vec<[f64; 3]>>,
    pub vertices: Vec<Vector3<f64>>,
}

impl CloudGrads {
    fn zeros(cloud: &GaussianCloud) -> Self {
        CloudGrads {
            beta: vec![[0.0; 3]; cloud.len()],
            scale_factor: vec![0.0; cloud.len()],
            opacity: vec![0.0; cloud.len()],
            sh: cloud
                .gaussians
                .iter()
                .map(|g| vec![[0.0; 3]; g.sh_coeffs.len()])
                .collect(),
            vertices: vec![Vector3::zeros(); cloud.mesh.vertices.len()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct HandGrads {
    pub cloud: CloudGrads,
    pub pose: PoseGrads,
}

#[derive(Debug, Clone)]
pub struct ObjectGrads {
    pub cloud: CloudGrads,
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
    pub articulation: f64,
}

#[derive(Debug, Clone)]
pub struct SceneGrads {
    pub left: Option<HandGrads>,
    pub right: Option<HandGrads>,
    pub object: Option<ObjectGrads>,
}

/// Effective canonical vertices: trainable cloud vertices plus the pose's
/// free shape-offset field.
fn effective_vertices(cloud: &GaussianCloud, pose: &HandPose) -> Result<Vec<Vector3<f64>>> {
    let mut verts: Vec<Vector3<f64>> = (0..cloud.mesh.vertices.len())
        .map(|i| cloud.mesh.vertex(i))
        .collect();
    if let Some(offsets) = &pose.shape_offsets {
        if offsets.len() != verts.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} shape offsets for {} vertices",
                offsets.len(),
                verts.len()
            )));
        }
        for (v, o) in verts.iter_mut().zip(offsets) {
            *v += Vector3::from(*o);
        }
    }
    Ok(verts)
}

/// Kernel weight row: barycentric blend of the face corners' skinning rows.
fn kernel_weight_row(rig: &SkinnedRig, face: &[u32; 3], beta: &[f64; 3]) -> Vec<f64> {
    let n = rig.joint_count();
    let mut row = vec![0.0; n];
    for (corner, b) in face.iter().zip(beta) {
        for (j, w) in rig.weights[*corner as usize].iter().enumerate() {
            row[j] += b * w;
        }
    }
    row
}

#[derive(Default)]
struct HandForward {
    offset: usize,
    fk: Option<FkForward>,
    verts: Vec<Vector3<f64>>,
    kernels: Vec<HandKernelForward>,
}

struct HandKernelForward {
    frame: FrameBuild,
    w_row: Vec<f64>,
    blended: BoneTransform,
    polar: Matrix3<f64>,
}

fn pose_hand_cloud(
    hand: &HandEntity,
    pose: &HandPose,
    out: &mut Vec<WorldGaussian>,
    mut cache: Option<&mut HandForward>,
) -> Result<()> {
    let fk = forward_kinematics(&hand.rig, pose)?;
    let verts = effective_vertices(&hand.cloud, pose)?;
    for g in &hand.cloud.gaussians {
        let face = hand.cloud.mesh.faces[g.face_id as usize];
        let v = [
            verts[face[0] as usize],
            verts[face[1] as usize],
            verts[face[2] as usize],
        ];
        let beta = g.beta_f64();
        let fwd = build_frame(&v, &beta, g.scale_factor as f64);
        let w_row = kernel_weight_row(&hand.rig, &face, &beta);
        let blended = blend_bones(&w_row, &fk.bones);
        if blended.linear.determinant().abs() < 1e-9 {
            return Err(Error::DegenerateBlend);
        }
        let rp = polar_rotation(&blended.linear)?;
        out.push(WorldGaussian {
            center: blended.apply(&fwd.frame.center),
            covariance: rp * fwd.frame.covariance * rp.transpose(),
            sh_degree: hand.cloud.sh_degree,
            sh_coeffs: g.sh_coeffs.clone(),
            opacity: g.opacity as f64,
        });
        if let Some(cache) = cache.as_deref_mut() {
            cache.kernels.push(HandKernelForward {
                frame: fwd,
                w_row,
                blended,
                polar: rp,
            });
        }
    }
    if let Some(cache) = cache {
        cache.fk = Some(fk);
        cache.verts = verts;
    }
    Ok(())
}

fn hand_backward(
    hand: &HandEntity,
    pose: &HandPose,
    fwd: &HandForward,
    world: &[GaussianGrads],
) -> Result<HandGrads> {
    let fk = fwd.fk.as_ref().expect("cached fk");
    let mut cloud_grads = CloudGrads::zeros(&hand.cloud);
    let n_joints = hand.rig.joint_count();
    let mut bone_grads: Vec<(Matrix3<f64>, Vector3<f64>)> =
        vec![(Matrix3::zeros(), Vector3::zeros()); n_joints];

    for (ki, g) in hand.cloud.gaussians.iter().enumerate() {
        let wg = &world[fwd.offset + ki];
        let kf = &fwd.kernels[ki];
        let face = hand.cloud.mesh.faces[g.face_id as usize];
        let beta = g.beta_f64();
        let v = [
            fwd.verts[face[0] as usize],
            fwd.verts[face[1] as usize],
            fwd.verts[face[2] as usize],
        ];

        cloud_grads.opacity[ki] = wg.opacity;
        cloud_grads.sh[ki].clone_from(&wg.sh);

        let m = kf.blended.linear;
        let gc = wg.center;
        let gcov_sym = (wg.covariance + wg.covariance.transpose()) * 0.5;

        // center_w = M x_c + t.
        let d_xc = m.transpose() * gc;
        let mut d_m = gc * kf.frame.frame.center.transpose();
        let d_t = gc;

        // Sigma_w = Rp Sigma_c Rp^T.
        let rp = kf.polar;
        let d_sigma_c = rp.transpose() * gcov_sym * rp;
        let d_rp = 2.0 * gcov_sym * rp * kf.frame.frame.covariance;
        d_m += polar_rotation_grad_m(&m, &rp, &d_rp)?;

        // Blend: A = sum_i w_i B_i.
        for (j, w) in kf.w_row.iter().enumerate() {
            bone_grads[j].0 += d_m * *w;
            bone_grads[j].1 += d_t * *w;
        }
        // w_row depends on beta through the corner rows.
        let mut d_wrow = vec![0.0; n_joints];
        for (j, dw) in d_wrow.iter_mut().enumerate() {
            *dw = d_m.component_mul(&fk.bones[j].linear).sum() + d_t.dot(&fk.bones[j].translation);
        }
        for (ci, corner) in face.iter().enumerate() {
            let mut acc = 0.0;
            for (j, dw) in d_wrow.iter().enumerate() {
                acc += dw * hand.rig.weights[*corner as usize][j];
            }
            cloud_grads.beta[ki][ci] += acc;
        }

        // Canonical frame chain.
        let fg = crate::gauss::frame_vjp(
            &v,
            &beta,
            g.scale_factor as f64,
            &kf.frame,
            &d_xc,
            &d_sigma_c,
        );
        for (ci, corner) in face.iter().enumerate() {
            cloud_grads.vertices[*corner as usize] += fg.vertices[ci];
            cloud_grads.beta[ki][ci] += fg.beta[ci];
        }
        cloud_grads.scale_factor[ki] = fg.scale_factor;
    }

    let pose_grads = forward_kinematics_vjp(&hand.rig, pose, fk, &bone_grads);
    Ok(HandGrads {
        cloud: cloud_grads,
        pose: pose_grads,
    })
}

#[derive(Default)]
struct ObjectForward {
    offset: usize,
    /// Vertices after articulation, before the rigid transform.
    artic_verts: Vec<Vector3<f64>>,
    kernels: Vec<FrameBuild>,
}

fn pose_object_cloud(
    object: &ObjectEntity,
    pose: &ObjectPose,
    out: &mut Vec<WorldGaussian>,
    mut cache: Option<&mut ObjectForward>,
) -> Result<()> {
    // Articulate the trainable canonical vertices.
    let artic_verts: Vec<Vector3<f64>> = match (&object.model.articulation, pose.articulation_angle)
    {
        (Some(art), Some(angle)) => {
            let rotated = crate::deform::articulate(
                &object.cloud.mesh,
                &art.moving,
                &art.axis_point,
                &art.axis_dir,
                angle,
            )?;
            (0..rotated.vertices.len())
                .map(|i| rotated.vertex(i))
                .collect()
        }
        _ => (0..object.cloud.mesh.vertices.len())
            .map(|i| object.cloud.mesh.vertex(i))
            .collect(),
    };
    let r = pose.rotation_matrix();
    let t = pose.translation_vec();
    for g in &object.cloud.gaussians {
        let face = object.cloud.mesh.faces[g.face_id as usize];
        let v = [
            artic_verts[face[0] as usize],
            artic_verts[face[1] as usize],
            artic_verts[face[2] as usize],
        ];
        let beta = g.beta_f64();
        let fwd = build_frame(&v, &beta, g.scale_factor as f64);
        out.push(WorldGaussian {
            center: r * fwd.frame.center + t,
            covariance: r * fwd.frame.covariance * r.transpose(),
            sh_degree: object.cloud.sh_degree,
            sh_coeffs: g.sh_coeffs.clone(),
            opacity: g.opacity as f64,
        });
        if let Some(cache) = cache.as_deref_mut() {
            cache.kernels.push(fwd);
        }
    }
    if let Some(cache) = cache {
        cache.artic_verts = artic_verts;
    }
    Ok(())
}

fn object_backward(
    object: &ObjectEntity,
    pose: &ObjectPose,
    fwd: &ObjectForward,
    world: &[GaussianGrads],
) -> Result<ObjectGrads> {
    let mut cloud_grads = CloudGrads::zeros(&object.cloud);
    let r = pose.rotation_matrix();
    let mut d_r = Matrix3::zeros();
    let mut d_t = Vector3::zeros();
    // Gradients with respect to articulated (pre-rigid) vertices.
    let mut d_artic = vec![Vector3::zeros(); object.cloud.mesh.vertices.len()];

    for (ki, g) in object.cloud.gaussians.iter().enumerate() {
        let wg = &world[fwd.offset + ki];
        let kf = &fwd.kernels[ki];
        let face = object.cloud.mesh.faces[g.face_id as usize];
        let beta = g.beta_f64();
        let v = [
            fwd.artic_verts[face[0] as usize],
            fwd.artic_verts[face[1] as usize],
            fwd.artic_verts[face[2] as usize],
        ];

        cloud_grads.opacity[ki] = wg.opacity;
        cloud_grads.sh[ki].clone_from(&wg.sh);

        let gc = wg.center;
        let gcov_sym = (wg.covariance + wg.covariance.transpose()) * 0.5;

        // center_w = R x_c + t ; Sigma_w = R Sigma_c R^T.
        let d_xc = r.transpose() * gc;
        let d_sigma_c = r.transpose() * gcov_sym * r;
        d_r += gc * kf.frame.center.transpose() + 2.0 * gcov_sym * r * kf.frame.covariance;
        d_t += gc;

        let fg = crate::gauss::frame_vjp(&v, &beta, g.scale_factor as f64, kf, &d_xc, &d_sigma_c);
        for (ci, corner) in face.iter().enumerate() {
            d_artic[*corner as usize] += fg.vertices[ci];
            cloud_grads.beta[ki][ci] += fg.beta[ci];
        }
        cloud_grads.scale_factor[ki] = fg.scale_factor;
    }

    // Articulation chain: moving vertices were rotated about the hinge.
    let mut d_articulation = 0.0;
    match (&object.model.articulation, pose.articulation_angle) {
        (Some(art), Some(angle)) => {
            let ra = rodrigues(&(art.axis_dir * angle));
            for (i, grad) in d_artic.iter().enumerate() {
                if art.moving[i] {
                    cloud_grads.vertices[i] += ra.transpose() * grad;
                    let v_rot = fwd.artic_verts[i];
                    d_articulation += grad.dot(&art.axis_dir.cross(&(v_rot - art.axis_point)));
                } else {
                    cloud_grads.vertices[i] += grad;
                }
            }
        }
        _ => {
            for (i, grad) in d_artic.iter().enumerate() {
                cloud_grads.vertices[i] += grad;
            }
        }
    }

    let rotation = rodrigues_vjp(&Vector3::from(pose.rotation), &d_r);
    Ok(ObjectGrads {
        cloud: cloud_grads,
        rotation,
        translation: d_t,
        articulation: d_articulation,
    })
}

/// Posed hand mesh vertices (for contact losses and annotations).
pub fn pose_hand_vertices(
    rig: &SkinnedRig,
    base: &[Vector3<f64>],
    pose: &HandPose,
) -> Result<(Vec<Vector3<f64>>, FkForward)> {
    let fk = forward_kinematics(rig, pose)?;
    let mut verts = Vec::with_capacity(base.len());
    for (i, v) in base.iter().enumerate() {
        let mut p = *v;
        if let Some(offsets) = &pose.shape_offsets {
            p += Vector3::from(offsets[i]);
        }
        verts.push(blend_bones(&rig.weights[i], &fk.bones).apply(&p));
    }
    Ok((verts, fk))
}

/// VJP for `pose_hand_vertices`: routes dL/d(posed vertex) to the pose
/// parameters and the canonical shape offsets.
pub fn pose_hand_vertices_vjp(
    rig: &SkinnedRig,
    base: &[Vector3<f64>],
    pose: &HandPose,
    fk: &FkForward,
    grad_pts: &[Vector3<f64>],
) -> (PoseGrads, Vec<Vector3<f64>>) {
    let n_joints = rig.joint_count();
    let mut bone_grads: Vec<(Matrix3<f64>, Vector3<f64>)> =
        vec![(Matrix3::zeros(), Vector3::zeros()); n_joints];
    let mut d_offsets = vec![Vector3::zeros(); base.len()];
    for (i, grad) in grad_pts.iter().enumerate() {
        if grad.norm() == 0.0 {
            continue;
        }
        let mut p = base[i];
        if let Some(offsets) = &pose.shape_offsets {
            p += Vector3::from(offsets[i]);
        }
        let blended = blend_bones(&rig.weights[i], &fk.bones);
        d_offsets[i] = blended.linear.transpose() * grad;
        for (j, w) in rig.weights[i].iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            bone_grads[j].0 += (grad * p.transpose()) * *w;
            bone_grads[j].1 += grad * *w;
        }
    }
    let pose_grads = forward_kinematics_vjp(rig, pose, fk, &bone_grads);
    (pose_grads, d_offsets)
}
