//! Procedurally generated test assets: primitive meshes, a two-joint paddle
//! "hand" with a skinning rig, and complete synthetic interaction scenes.
//! Both the test suites and the `fixture` CLI subcommand build from here.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::camera::Camera;
use crate::deform::{HandPose, Joint, ObjectPose, RigidObject, SkinnedRig};
use crate::gauss::anchor_gaussians;
use crate::mesh::TriangleMesh;
use crate::scene::{HandEntity, InteractionPose, ObjectEntity, SceneModel};
use crate::trainer::TrainFrame;
use crate::Result;

/// Paddle length in meters (along +x, root at the origin).
pub const PADDLE_LENGTH: f64 = 0.14;
/// Paddle width (y) and thickness (z).
pub const PADDLE_WIDTH: f64 = 0.05;
pub const PADDLE_THICKNESS: f64 = 0.02;
/// Radius of the grasped sphere.
pub const SPHERE_RADIUS: f64 = 0.08;

/// Axis-aligned unit cube spanning [0,1]^3, 12 outward-oriented triangles.
pub fn unit_cube() -> TriangleMesh {
    let vertices = vec![
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [1.0, 1.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 0.0, 1.0],
        [1.0, 1.0, 1.0],
        [0.0, 1.0, 1.0],
    ];
    let faces = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [2, 3, 7],
        [2, 7, 6],
        [0, 4, 7],
        [0, 7, 3],
        [1, 2, 6],
        [1, 6, 5],
    ];
    TriangleMesh::new(vertices, faces).expect("unit cube is valid")
}

/// Regular tetrahedron fixture.
pub fn tetrahedron() -> TriangleMesh {
    let vertices = vec![
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
    ];
    let faces = vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]];
    TriangleMesh::new(vertices, faces).expect("tetrahedron is valid")
}

/// Watertight UV sphere centered at the origin.
///
/// `n_lon` meridians, `n_lat` latitude bands (so `n_lat - 1` vertex rings).
pub fn uv_sphere(radius: f64, n_lon: usize, n_lat: usize) -> TriangleMesh {
    assert!(n_lon >= 3 && n_lat >= 2);
    let mut vertices: Vec<[f32; 3]> = Vec::new();
    vertices.push([0.0, 0.0, radius as f32]); // top pole
    for i in 1..n_lat {
        let theta = std::f64::consts::PI * i as f64 / n_lat as f64;
        for j in 0..n_lon {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / n_lon as f64;
            vertices.push([
                (radius * theta.sin() * phi.cos()) as f32,
                (radius * theta.sin() * phi.sin()) as f32,
                (radius * theta.cos()) as f32,
            ]);
        }
    }
    vertices.push([0.0, 0.0, -radius as f32]); // bottom pole
    let bottom = vertices.len() as u32 - 1;
    let ring = |i: usize, j: usize| -> u32 { (1 + (i - 1) * n_lon + (j % n_lon)) as u32 };

    let mut faces: Vec<[u32; 3]> = Vec::new();
    for j in 0..n_lon {
        faces.push([0, ring(1, j), ring(1, j + 1)]);
    }
    for i in 1..(n_lat - 1) {
        for j in 0..n_lon {
            let a = ring(i, j);
            let b = ring(i, j + 1);
            let c = ring(i + 1, j + 1);
            let d = ring(i + 1, j);
            faces.push([a, d, c]);
            faces.push([a, c, b]);
        }
    }
    for j in 0..n_lon {
        faces.push([bottom, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)]);
    }
    TriangleMesh::new(vertices, faces).expect("uv sphere is valid")
}

/// A watertight box paddle along +x with a two-joint rig: a root joint at
/// the origin and a hinge at mid-length. Skinning weights ramp smoothly
/// across the hinge; the far quarter of the paddle is the contact-candidate
/// region.
pub fn paddle(segments: usize) -> (TriangleMesh, SkinnedRig) {
    assert!(segments >= 1);
    let (l, w, t) = (PADDLE_LENGTH, PADDLE_WIDTH, PADDLE_THICKNESS);
    let hw = (w / 2.0) as f32;
    let ht = (t / 2.0) as f32;
    let mut vertices: Vec<[f32; 3]> = Vec::new();
    for i in 0..=segments {
        let x = (l * i as f64 / segments as f64) as f32;
        vertices.push([x, -hw, -ht]);
        vertices.push([x, hw, -ht]);
        vertices.push([x, hw, ht]);
        vertices.push([x, -hw, ht]);
    }
    let ring = |i: usize, k: usize| (i * 4 + (k % 4)) as u32;
    let mut faces: Vec<[u32; 3]> = Vec::new();
    for i in 0..segments {
        for k in 0..4 {
            let a = ring(i, k);
            let a1 = ring(i, k + 1);
            let b1 = ring(i + 1, k + 1);
            let b = ring(i + 1, k);
            faces.push([a, a1, b1]);
            faces.push([a, b1, b]);
        }
    }
    // End caps (outward: -x at the root, +x at the tip).
    faces.push([ring(0, 0), ring(0, 2), ring(0, 1)]);
    faces.push([ring(0, 0), ring(0, 3), ring(0, 2)]);
    faces.push([ring(segments, 0), ring(segments, 1), ring(segments, 2)]);
    faces.push([ring(segments, 0), ring(segments, 2), ring(segments, 3)]);
    let mesh = TriangleMesh::new(vertices, faces).expect("paddle mesh is valid");
    debug_assert!(mesh.is_watertight);

    let identity = {
        let mut m = [0.0; 16];
        m[0] = 1.0;
        m[5] = 1.0;
        m[10] = 1.0;
        m[15] = 1.0;
        m
    };
    let mut hinge_rest = identity;
    hinge_rest[3] = l / 2.0; // translation x in row-major [0][3]
    let joints = vec![
        Joint {
            name: "root".into(),
            parent: None,
            rest: identity,
        },
        Joint {
            name: "hinge".into(),
            parent: Some(0),
            rest: hinge_rest,
        },
    ];
    // Smooth weight ramp across the hinge.
    let blend = l / 8.0;
    let weights: Vec<Vec<f64>> = mesh
        .vertices
        .iter()
        .map(|v| {
            let x = v[0] as f64;
            let s = ((x - (l / 2.0 - blend)) / (2.0 * blend)).clamp(0.0, 1.0);
            let w1 = s * s * (3.0 - 2.0 * s); // smoothstep
            vec![1.0 - w1, w1]
        })
        .collect();
    let contact_vertices: Vec<usize> = mesh
        .vertices
        .iter()
        .enumerate()
        .filter(|(_, v)| v[0] as f64 >= 0.75 * l)
        .map(|(i, _)| i)
        .collect();
    let rig = SkinnedRig {
        joints,
        weights,
        canonical_mesh: mesh.clone(),
        contact_vertices,
    };
    rig.validate().expect("paddle rig is valid");
    (mesh, rig)
}

/// Reference hand pose whose paddle points along the direction given by a
/// z-axis angle, with the tip touching the sphere surface.
pub fn paddle_pose_toward_sphere(angle_z: f64, n_joints: usize) -> HandPose {
    let dir = Vector3::new(angle_z.cos(), angle_z.sin(), 0.0);
    let root = -dir * (SPHERE_RADIUS + PADDLE_LENGTH);
    HandPose {
        root_rotation: [0.0, 0.0, angle_z],
        root_translation: [root.x, root.y, root.z],
        joint_rotations: vec![[0.0; 3]; n_joints],
        shape_offsets: None,
    }
}

/// The reference two-paddle sphere grasp: trainee-initialized model (gray,
/// half-transparent) plus the touching reference pose.
pub fn grasp_scene(k: usize, sh_degree: usize) -> (SceneModel, InteractionPose, f64) {
    let sphere = uv_sphere(SPHERE_RADIUS, 16, 12);
    let (paddle_mesh, rig) = paddle(8);
    let model = SceneModel {
        left: Some(HandEntity {
            rig: rig.clone(),
            cloud: anchor_gaussians(&paddle_mesh, k, sh_degree, 1).unwrap(),
        }),
        right: Some(HandEntity {
            rig,
            cloud: anchor_gaussians(&paddle_mesh, k, sh_degree, 2).unwrap(),
        }),
        object: Some(ObjectEntity {
            model: RigidObject {
                mesh: sphere.clone(),
                articulation: None,
            },
            cloud: anchor_gaussians(&sphere, k, sh_degree, 3).unwrap(),
        }),
    };
    let pose = InteractionPose {
        left: paddle_pose_toward_sphere(0.0, 2),
        right: paddle_pose_toward_sphere(2.9, 2),
        object: ObjectPose::identity(),
    };
    (model, pose, SPHERE_RADIUS)
}

/// Paint a trainee-initialized model into a colorful, mostly opaque
/// reference whose appearance the trainee can represent exactly.
pub fn painted_reference(model: &SceneModel, seed: u64) -> SceneModel {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = model.clone();
    let c0 = crate::sh::SH_C0;
    let mut paint = |cloud: &mut crate::gauss::GaussianCloud, base: [f64; 3], bands: bool| {
        let mesh = cloud.mesh.clone();
        for g in &mut cloud.gaussians {
            let v = mesh.face_vertices(g.face_id as usize);
            let c = crate::gauss::gaussian_center(&g.beta_f64(), &v);
            let mut rgb = base;
            if bands {
                rgb[0] = 0.5 + 0.22 * (40.0 * c.x).sin();
                rgb[1] = 0.5 + 0.22 * (40.0 * c.y + 1.0).sin();
                rgb[2] = 0.5 + 0.22 * (40.0 * (c.x + c.z)).cos();
            }
            for (l, coeff) in g.sh_coeffs.iter_mut().enumerate() {
                if l == 0 {
                    for ch in 0..3 {
                        coeff[ch] = ((rgb[ch] - 0.5) / c0) as f32;
                    }
                } else {
                    // Mild view dependence.
                    for ch in coeff.iter_mut() {
                        *ch = rng.gen_range(-0.04..0.04);
                    }
                }
            }
            g.opacity = rng.gen_range(0.88..0.95);
        }
    };
    if let Some(e) = out.left.as_mut() {
        paint(&mut e.cloud, [0.78, 0.55, 0.45], false);
    }
    if let Some(e) = out.right.as_mut() {
        paint(&mut e.cloud, [0.45, 0.55, 0.78], false);
    }
    if let Some(e) = out.object.as_mut() {
        paint(&mut e.cloud, [0.5, 0.5, 0.5], true);
    }
    out
}

/// Deterministic orbit cameras around the scene origin.
pub fn orbit_cameras(count: usize, width: usize, height: usize) -> Vec<Camera> {
    (0..count)
        .map(|i| {
            let azimuth = 0.4 + 2.0 * std::f64::consts::PI * i as f64 / count.max(1) as f64;
            let elevation = (15.0 + 20.0 * (i % 3) as f64 / 2.0).to_radians();
            let radius = 0.6;
            let eye = Vector3::new(
                radius * elevation.cos() * azimuth.cos(),
                radius * elevation.cos() * azimuth.sin(),
                radius * elevation.sin(),
            );
            Camera::look_at(
                &eye,
                &Vector3::zeros(),
                1.2 * width as f64,
                width,
                height,
                0.01,
                10.0,
            )
            .unwrap()
        })
        .collect()
}

/// Ground-truth frames rendered from a reference model.
pub fn reference_frames(
    reference: &SceneModel,
    pose: &InteractionPose,
    count: usize,
    width: usize,
    height: usize,
) -> Vec<TrainFrame> {
    orbit_cameras(count, width, height)
        .into_iter()
        .enumerate()
        .map(|(i, camera)| {
            let image = reference.render(pose, &camera).unwrap();
            TrainFrame {
                id: format!("view{i:03}"),
                image: image.rgb,
                camera,
                pose: pose.clone(),
            }
        })
        .collect()
}

/// On-disk grasp fixture assets.
pub struct GraspAssets {
    pub root: PathBuf,
    pub checkpoint: PathBuf,
    pub rig: PathBuf,
    pub object: PathBuf,
    pub reference_pose: PathBuf,
}

/// Write the full grasp fixture to disk: meshes, rig and object JSONs, the
/// painted reference model as a checkpoint, and the reference pose.
pub fn write_grasp_assets(
    dir: &Path,
    k: usize,
    sh_degree: usize,
    seed: u64,
) -> Result<GraspAssets> {
    std::fs::create_dir_all(dir)
        .map_err(|e| crate::Error::io(dir.display().to_string(), e))?;
    let (model, pose, _) = grasp_scene(k, sh_degree);
    let reference = painted_reference(&model, seed);

    let (paddle_mesh, rig) = paddle(8);
    paddle_mesh.write_obj(dir.join("paddle.obj"))?;
    crate::deform::save_rig(&rig, dir.join("paddle_rig.json"), "paddle.obj")?;
    let sphere = uv_sphere(SPHERE_RADIUS, 16, 12);
    sphere.write_obj(dir.join("sphere.obj"))?;
    let object = RigidObject {
        mesh: sphere,
        articulation: None,
    };
    crate::deform::save_object(&object, dir.join("object.json"), "sphere.obj", "labels.txt")?;

    let checkpoint = dir.join("checkpoint");
    let bindings = crate::trainer::CheckpointBindings {
        left_rig: Some("../paddle_rig.json".into()),
        right_rig: Some("../paddle_rig.json".into()),
        object: Some("../object.json".into()),
    };
    crate::trainer::save_checkpoint(&reference, &checkpoint, &bindings)?;
    let reference_pose = dir.join("reference_pose.json");
    crate::scene::save_pose(&pose, &reference_pose)?;
    Ok(GraspAssets {
        root: dir.to_path_buf(),
        checkpoint,
        rig: dir.join("paddle_rig.json"),
        object: dir.join("object.json"),
        reference_pose,
    })
}

/// Render and write a training dataset (PNG targets + manifest) from a
/// reference model. Returns the manifest path.
pub fn write_training_dataset(
    dir: &Path,
    reference: &SceneModel,
    pose: &InteractionPose,
    n_train: usize,
    n_heldout: usize,
    width: usize,
    height: usize,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images"))
        .map_err(|e| crate::Error::io(dir.display().to_string(), e))?;
    crate::scene::save_pose(pose, dir.join("pose_000.json"))?;
    let cameras = orbit_cameras(n_train + n_heldout, width, height);
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for (i, camera) in cameras.into_iter().enumerate() {
        let image = reference.render(pose, &camera)?;
        let name = format!("images/view_{i:03}.png");
        image.save_png8(dir.join(&name))?;
        let record = crate::pipeline::FrameRecord {
            image: name,
            camera,
            pose: "pose_000.json".into(),
        };
        if i < n_train {
            train.push(record);
        } else {
            heldout.push(record);
        }
    }
    let manifest = crate::pipeline::DatasetManifest { train, heldout };
    let path = dir.join("train_manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| crate::Error::json(path.display().to_string(), e))?;
    std::fs::write(&path, text).map_err(|e| crate::Error::io(path.display().to_string(), e))?;
    Ok(path)
}

/// Write the complete synthetic sequence: assets, training images, manifest
/// and the sequence spec. Returns the sequence spec path.
pub fn write_sequence(
    dir: &Path,
    k: usize,
    sh_degree: usize,
    seed: u64,
    n_train: usize,
    n_heldout: usize,
    width: usize,
    height: usize,
) -> Result<PathBuf> {
    let assets = write_grasp_assets(dir, k, sh_degree, seed)?;
    let reference = crate::trainer::load_checkpoint(&assets.checkpoint)?;
    let pose = crate::scene::load_pose(&assets.reference_pose)?;
    write_training_dataset(dir, &reference, &pose, n_train, n_heldout, width, height)?;
    let spec = crate::pipeline::SequenceSpec {
        subject: "s01".into(),
        object_id: "sphere".into(),
        rig: "paddle_rig.json".into(),
        rig_right: None,
        object_model: "object.json".into(),
        manifest: "train_manifest.json".into(),
        reference_poses: vec!["reference_pose.json".into()],
    };
    let path = dir.join("sequence.json");
    let text = serde_json::to_string_pretty(&spec)
        .map_err(|e| crate::Error::json(path.display().to_string(), e))?;
    std::fs::write(&path, text).map_err(|e| crate::Error::io(path.display().to_string(), e))?;
    Ok(path)
}

/// Procedural background images (smooth gradients with seeded phase).
pub fn write_backgrounds(
    dir: &Path,
    count: usize,
    width: usize,
    height: usize,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir.display().to_string(), e))?;
    for i in 0..count {
        let phase = i as f64 * 1.7;
        let mut img = image::RgbImage::new(width as u32, height as u32);
        for y in 0..height {
            for x in 0..width {
                let fx = x as f64 / width as f64;
                let fy = y as f64 / height as f64;
                let r = 0.5 + 0.4 * (6.0 * fx + phase).sin();
                let g = 0.5 + 0.4 * (5.0 * fy + phase * 0.7).cos();
                let b = 0.5 + 0.4 * (4.0 * (fx + fy) + phase * 1.3).sin();
                img.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([
                        (r.clamp(0.0, 1.0) * 255.0) as u8,
                        (g.clamp(0.0, 1.0) * 255.0) as u8,
                        (b.clamp(0.0, 1.0) * 255.0) as u8,
                    ]),
                );
            }
        }
        let path = dir.join(format!("bg_{i:02}.png"));
        img.save(&path).map_err(|e| crate::Error::Image {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
    }
    Ok(())
}

/// A watertight box with a vertical hinge through its center: the top half
/// rotates. Used for articulated-object tests.
pub fn hinged_box() -> RigidObject {
    let mut mesh = unit_cube();
    for v in &mut mesh.vertices {
        for d in 0..3 {
            v[d] = (v[d] - 0.5) * 0.1;
        }
    }
    let mesh = TriangleMesh::new(mesh.vertices, mesh.faces).unwrap();
    let moving: Vec<bool> = (0..8).map(|i| i >= 4).collect();
    RigidObject {
        mesh,
        articulation: Some(crate::deform::Articulation {
            axis_point: Vector3::zeros(),
            axis_dir: Vector3::new(0.0, 0.0, 1.0),
            moving,
        }),
    }
}
