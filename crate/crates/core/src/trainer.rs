//! Fits scene models from posed multi-view images: photometric + SSIM loss
//! with a template-distance regularizer, minimized by an adaptive-moment
//! optimizer. Beta stays on the simplex through projection, opacity updates
//! in logit space, scale factors in log space.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::losses::{loss_distreg_backward, loss_l1_backward};
use crate::math::project_simplex;
use crate::metrics::{loss_ssim_backward, psnr, ssim};
use crate::scene::{CloudGrads, InteractionPose, SceneModel};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// SSIM mixing weight in the photometric term.
    pub weight_ssim: f64,
    /// Weight of the template-distance regularizer.
    pub weight_reg: f64,
    pub lr_vertices: f64,
    pub lr_beta: f64,
    pub lr_scale: f64,
    pub lr_sh: f64,
    pub lr_opacity: f64,
    pub kernels_per_face: usize,
    pub sh_degree: usize,
    pub seed: u64,
    /// Evaluate held-out frames every this many iterations (0 = never).
    pub eval_every: usize,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            weight_ssim: 0.2,
            weight_reg: 0.5,
            lr_vertices: 1.6e-4,
            lr_beta: 2e-3,
            lr_scale: 5e-3,
            lr_sh: 2.5e-3,
            lr_opacity: 5e-2,
            kernels_per_face: 2,
            sh_degree: 2,
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be > 0".into()));
        }
        if self.weight_ssim < 0.0 || self.weight_reg < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Load a training config JSON (missing fields take defaults).
pub fn load_train_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?;
    let cfg: TrainConfig =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    cfg.validate()?;
    Ok(cfg)
}

/// One training observation: target image, camera and scene pose.
#[derive(Debug, Clone)]
pub struct TrainFrame {
    pub id: String,
    /// Row-major H x W x 3 target in [0, 1] (composited on black).
    pub image: Vec<f64>,
    pub camera: Camera,
    pub pose: InteractionPose,
}

impl TrainFrame {
    pub fn validate(&self) -> Result<()> {
        if self.image.len() != self.camera.width * self.camera.height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "frame {}: image {} vs camera {}x{}",
                self.id,
                self.image.len(),
                self.camera.width,
                self.camera.height
            )));
        }
        Ok(())
    }
}

/// Plain adaptive-moment state over a flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One update; returns the step to subtract from each parameter.
    pub fn step(&mut self, lr: f64, grads: &[f64]) -> Vec<f64> {
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        grads
            .iter()
            .enumerate()
            .map(|(i, g)| {
                self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
                self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
                let mhat = self.m[i] / bc1;
                let vhat = self.v[i] / bc2;
                lr * mhat / (vhat.sqrt() + ADAM_EPS)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntityOpt {
    vertices: AdamState,
    beta: AdamState,
    scale: AdamState,
    opacity: AdamState,
    sh: AdamState,
}

impl EntityOpt {
    fn new(n_vertices: usize, n_kernels: usize, n_coeffs: usize) -> Self {
        EntityOpt {
            vertices: AdamState::new(n_vertices * 3),
            beta: AdamState::new(n_kernels * 3),
            scale: AdamState::new(n_kernels),
            opacity: AdamState::new(n_kernels),
            sh: AdamState::new(n_kernels * n_coeffs * 3),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: usize,
    left: Option<EntityOpt>,
    right: Option<EntityOpt>,
    object: Option<EntityOpt>,
}

/// Per-step loss breakdown.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub total: f64,
    pub l1: f64,
    pub ssim_loss: f64,
    pub reg: f64,
}

/// One metrics-log row; becomes a CSV line.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub iteration: usize,
    pub l1: f64,
    pub ssim_loss: f64,
    pub reg: f64,
    pub total: f64,
    pub heldout_psnr: Option<f64>,
    pub heldout_ssim: Option<f64>,
}

pub fn write_metrics_csv(rows: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("iteration,l1,ssim_loss,reg,total,heldout_psnr,heldout_ssim\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iteration,
            r.l1,
            r.ssim_loss,
            r.reg,
            r.total,
            r.heldout_psnr.map(|v| v.to_string()).unwrap_or_default(),
            r.heldout_ssim.map(|v| v.to_string()).unwrap_or_default(),
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub struct Trainer {
    pub model: SceneModel,
    pub config: TrainConfig,
    pub state: TrainState,
}

fn entity_counts(model: &SceneModel) -> [Option<(usize, usize, usize)>; 3] {
    let count = |cloud: &crate::gauss::GaussianCloud| {
        (
            cloud.mesh.vertices.len(),
            cloud.len(),
            (cloud.sh_degree + 1) * (cloud.sh_degree + 1),
        )
    };
    [
        model.left.as_ref().map(|e| count(&e.cloud)),
        model.right.as_ref().map(|e| count(&e.cloud)),
        model.object.as_ref().map(|e| count(&e.cloud)),
    ]
}

impl Trainer {
    pub fn new(model: SceneModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let [l, r, o] = entity_counts(&model);
        let state = TrainState {
            iteration: 0,
            left: l.map(|(nv, nk, nc)| EntityOpt::new(nv, nk, nc)),
            right: r.map(|(nv, nk, nc)| EntityOpt::new(nv, nk, nc)),
            object: o.map(|(nv, nk, nc)| EntityOpt::new(nv, nk, nc)),
        };
        Ok(Trainer {
            model,
            config,
            state,
        })
    }

    /// One optimization step on a single frame.
    pub fn train_step(&mut self, frame: &TrainFrame) -> Result<StepStats> {
        frame.validate()?;
        let count_before = self.model.total_gaussians();
        let rendered = self.model.render(&frame.pose, &frame.camera)?;
        let (w, h) = (frame.camera.width, frame.camera.height);
        let (l1, g_l1) = loss_l1_backward(&rendered.rgb, &frame.image)?;
        let (ls, g_ls) = loss_ssim_backward(&rendered.rgb, &frame.image, w, h)?;
        let ws = self.config.weight_ssim;
        let g_img: Vec<f64> = g_l1
            .iter()
            .zip(&g_ls)
            .map(|(a, b)| (1.0 - ws) * a + ws * b)
            .collect();

        let grads = self
            .model
            .render_backward(&frame.pose, &frame.camera, &g_img, None)?;

        // Template-distance regularizer over all entities (global vertex mean).
        let mut reg_terms: Vec<(f64, usize)> = Vec::new();
        let mut reg_grads: [Option<Vec<Vector3<f64>>>; 3] = [None, None, None];
        let total_vertices = {
            let mut n = 0;
            let mut slot = 0;
            let entities: [Option<(&crate::gauss::GaussianCloud, &crate::mesh::TriangleMesh)>; 3] = [
                self.model
                    .left
                    .as_ref()
                    .map(|e| (&e.cloud, &e.rig.canonical_mesh)),
                self.model
                    .right
                    .as_ref()
                    .map(|e| (&e.cloud, &e.rig.canonical_mesh)),
                self.model.object.as_ref().map(|e| (&e.cloud, &e.model.mesh)),
            ];
            for ent in entities {
                if let Some((cloud, template)) = ent {
                    let verts: Vec<Vector3<f64>> = (0..cloud.mesh.vertices.len())
                        .map(|i| cloud.mesh.vertex(i))
                        .collect();
                    let (lr, gr) = loss_distreg_backward(&verts, template)?;
                    reg_terms.push((lr, verts.len()));
                    reg_grads[slot] = Some(gr);
                    n += verts.len();
                }
                slot += 1;
            }
            n
        };
        let reg = reg_terms
            .iter()
            .map(|(l, nv)| l * *nv as f64)
            .sum::<f64>()
            / total_vertices.max(1) as f64;

        let wr = self.config.weight_reg;
        let total = (1.0 - ws) * l1 + ws * ls + wr * reg;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.state.iteration,
                frame: frame.id.clone(),
                term: format!("l1 {l1}, ssim {ls}, reg {reg}"),
            });
        }

        // Apply per-entity updates.
        let iteration = self.state.iteration;
        let cfg = self.config.clone();
        let scale_reg = |gr: Option<Vec<Vector3<f64>>>, nv: usize| -> Option<Vec<Vector3<f64>>> {
            // Per-entity mean -> global mean reweighting.
            gr.map(|g| {
                let f = nv as f64 / total_vertices.max(1) as f64;
                g.into_iter().map(|v| v * f * wr).collect()
            })
        };
        if let (Some(entity), Some(opt), Some(cg)) = (
            self.model.left.as_mut(),
            self.state.left.as_mut(),
            grads.left,
        ) {
            let nv = entity.cloud.mesh.vertices.len();
            apply_updates(
                &mut entity.cloud,
                opt,
                &cfg,
                &cg.cloud,
                scale_reg(reg_grads[0].take(), nv),
            )?;
        }
        if let (Some(entity), Some(opt), Some(cg)) = (
            self.model.right.as_mut(),
            self.state.right.as_mut(),
            grads.right,
        ) {
            let nv = entity.cloud.mesh.vertices.len();
            apply_updates(
                &mut entity.cloud,
                opt,
                &cfg,
                &cg.cloud,
                scale_reg(reg_grads[1].take(), nv),
            )?;
        }
        if let (Some(entity), Some(opt), Some(cg)) = (
            self.model.object.as_mut(),
            self.state.object.as_mut(),
            grads.object,
        ) {
            let nv = entity.cloud.mesh.vertices.len();
            apply_updates(
                &mut entity.cloud,
                opt,
                &cfg,
                &cg.cloud,
                scale_reg(reg_grads[2].take(), nv),
            )?;
        }

        self.state.iteration = iteration + 1;
        debug_assert_eq!(self.model.total_gaussians(), count_before);
        Ok(StepStats {
            total,
            l1,
            ssim_loss: ls,
            reg,
        })
    }

    /// Seeded-shuffle training over the frames, with periodic held-out
    /// evaluation and checkpointing.
    pub fn train_loop(
        &mut self,
        frames: &[TrainFrame],
        heldout: &[TrainFrame],
        checkpoint: Option<(&Path, &CheckpointBindings)>,
    ) -> Result<Vec<LogRow>> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        if frames.is_empty() {
            return Err(Error::InvalidConfig("no training frames".into()));
        }
        let mut rows = Vec::new();
        let count_before = self.model.total_gaussians();
        while self.state.iteration < self.config.iterations {
            let epoch = self.state.iteration / frames.len();
            let mut order: Vec<usize> = (0..frames.len()).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                self.config.seed.wrapping_add(epoch as u64),
            );
            order.shuffle(&mut rng);
            // Resume mid-epoch deterministically.
            let start_in_epoch = self.state.iteration - epoch * frames.len();
            for &fi in order.iter().skip(start_in_epoch) {
                if self.state.iteration >= self.config.iterations {
                    break;
                }
                let stats = self.train_step(&frames[fi])?;
                let iter = self.state.iteration;
                let evaluate_now = (self.config.eval_every > 0
                    && iter % self.config.eval_every == 0)
                    || iter == self.config.iterations;
                let mut row = LogRow {
                    iteration: iter,
                    l1: stats.l1,
                    ssim_loss: stats.ssim_loss,
                    reg: stats.reg,
                    total: stats.total,
                    heldout_psnr: None,
                    heldout_ssim: None,
                };
                if evaluate_now && !heldout.is_empty() {
                    let m = evaluate(&self.model, heldout)?;
                    row.heldout_psnr = Some(m.psnr);
                    row.heldout_ssim = Some(m.ssim);
                }
                rows.push(row);
                if let Some((dir, bindings)) = checkpoint {
                    if self.config.checkpoint_every > 0
                        && iter % self.config.checkpoint_every == 0
                    {
                        save_checkpoint(&self.model, dir, bindings)?;
                        self.save_state(dir)?;
                    }
                }
            }
            assert_eq!(self.model.total_gaussians(), count_before);
        }
        if let Some((dir, bindings)) = checkpoint {
            save_checkpoint(&self.model, dir, bindings)?;
            self.save_state(dir)?;
        }
        Ok(rows)
    }

    /// Persist the optimizer state next to a checkpoint for exact resume.
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        let path = dir.join("train_state.json");
        let text = serde_json::to_string(&self.state)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load_state(&mut self, dir: &Path) -> Result<()> {
        let path = dir.join("train_state.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        self.state =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Apply one optimizer step to every parameter class of a cloud.
fn apply_updates(
    cloud: &mut crate::gauss::GaussianCloud,
    opt: &mut EntityOpt,
    cfg: &TrainConfig,
    grads: &CloudGrads,
    reg_vertex_grads: Option<Vec<Vector3<f64>>>,
) -> Result<()> {
    let nk = cloud.len();

    // Vertices (render path + regularizer path).
    let mut vg = vec![0.0; cloud.mesh.vertices.len() * 3];
    for (i, g) in grads.vertices.iter().enumerate() {
        vg[i * 3] = g.x;
        vg[i * 3 + 1] = g.y;
        vg[i * 3 + 2] = g.z;
    }
    if let Some(rg) = reg_vertex_grads {
        for (i, g) in rg.iter().enumerate() {
            vg[i * 3] += g.x;
            vg[i * 3 + 1] += g.y;
            vg[i * 3 + 2] += g.z;
        }
    }
    let steps = opt.vertices.step(cfg.lr_vertices, &vg);
    for (i, v) in cloud.mesh.vertices.iter_mut().enumerate() {
        for d in 0..3 {
            v[d] = (v[d] as f64 - steps[i * 3 + d]) as f32;
        }
    }

    // Beta: plain step, then simplex projection.
    let mut bg = vec![0.0; nk * 3];
    for (i, g) in grads.beta.iter().enumerate() {
        bg[i * 3..i * 3 + 3].copy_from_slice(g);
    }
    let steps = opt.beta.step(cfg.lr_beta, &bg);
    for (i, g) in cloud.gaussians.iter_mut().enumerate() {
        let raw = [
            g.beta[0] as f64 - steps[i * 3],
            g.beta[1] as f64 - steps[i * 3 + 1],
            g.beta[2] as f64 - steps[i * 3 + 2],
        ];
        let p = project_simplex(raw)?;
        g.beta = [p[0] as f32, p[1] as f32, p[2] as f32];
    }

    // Scale factor: log-space step keeps it positive.
    let sg: Vec<f64> = grads
        .scale_factor
        .iter()
        .enumerate()
        .map(|(i, g)| g * cloud.gaussians[i].scale_factor as f64)
        .collect();
    let steps = opt.scale.step(cfg.lr_scale, &sg);
    for (i, g) in cloud.gaussians.iter_mut().enumerate() {
        let log_s = (g.scale_factor as f64).ln() - steps[i];
        g.scale_factor = log_s.exp().clamp(1e-6, 1e6) as f32;
    }

    // Opacity: logit-space step keeps it in (0, 1).
    let og: Vec<f64> = grads
        .opacity
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let o = cloud.gaussians[i].opacity as f64;
            g * o * (1.0 - o)
        })
        .collect();
    let steps = opt.opacity.step(cfg.lr_opacity, &og);
    for (i, g) in cloud.gaussians.iter_mut().enumerate() {
        let l = logit((g.opacity as f64).clamp(1e-6, 1.0 - 1e-6)) - steps[i];
        g.opacity = sigmoid(l).clamp(1e-6, 1.0 - 1e-6) as f32;
    }

    // SH coefficients.
    let n_coeffs = (cloud.sh_degree + 1) * (cloud.sh_degree + 1);
    let mut shg = vec![0.0; nk * n_coeffs * 3];
    for (i, per_kernel) in grads.sh.iter().enumerate() {
        for (l, c) in per_kernel.iter().enumerate() {
            let base = (i * n_coeffs + l) * 3;
            shg[base..base + 3].copy_from_slice(c);
        }
    }
    let steps = opt.sh.step(cfg.lr_sh, &shg);
    for (i, g) in cloud.gaussians.iter_mut().enumerate() {
        for l in 0..n_coeffs {
            let base = (i * n_coeffs + l) * 3;
            for ch in 0..3 {
                g.sh_coeffs[l][ch] = (g.sh_coeffs[l][ch] as f64 - steps[base + ch]) as f32;
            }
        }
    }
    Ok(())
}

/// Held-out metrics.
#[derive(Debug, Clone, Copy)]
pub struct EvalMetrics {
    pub psnr: f64,
    pub ssim: f64,
    /// Slot for a learned perceptual metric; none is bundled.
    pub perceptual: Option<f64>,
}

/// A pluggable perceptual metric (the bundled evaluation has none).
pub trait PerceptualMetric: Sync {
    fn eval(&self, rendered: &[f64], target: &[f64], width: usize, height: usize) -> f64;
}

pub fn evaluate(model: &SceneModel, frames: &[TrainFrame]) -> Result<EvalMetrics> {
    evaluate_with(model, frames, None)
}

pub fn evaluate_with(
    model: &SceneModel,
    frames: &[TrainFrame],
    perceptual: Option<&dyn PerceptualMetric>,
) -> Result<EvalMetrics> {
    let mut p_acc = 0.0;
    let mut s_acc = 0.0;
    let mut perc_acc = 0.0;
    for frame in frames {
        frame.validate()?;
        let rendered = model.render(&frame.pose, &frame.camera)?;
        p_acc += psnr(&rendered.rgb, &frame.image)?;
        s_acc += ssim(
            &rendered.rgb,
            &frame.image,
            frame.camera.width,
            frame.camera.height,
        )?;
        if let Some(m) = perceptual {
            perc_acc += m.eval(
                &rendered.rgb,
                &frame.image,
                frame.camera.width,
                frame.camera.height,
            );
        }
    }
    let n = frames.len().max(1) as f64;
    Ok(EvalMetrics {
        psnr: p_acc / n,
        ssim: s_acc / n,
        perceptual: perceptual.map(|_| perc_acc / n),
    })
}

// ---------------------------------------------------------------------------
// Scene checkpoints: one cloud container per entity plus a bindings file.
// ---------------------------------------------------------------------------

/// Paths of the deformation assets a checkpoint rebinds to at load time.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CheckpointBindings {
    pub left_rig: Option<String>,
    pub right_rig: Option<String>,
    pub object: Option<String>,
}

pub fn save_checkpoint(
    model: &SceneModel,
    dir: &Path,
    bindings: &CheckpointBindings,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    if let Some(e) = &model.left {
        crate::gauss::checkpoint::save_cloud(&e.cloud, dir.join("left.bin"))?;
    }
    if let Some(e) = &model.right {
        crate::gauss::checkpoint::save_cloud(&e.cloud, dir.join("right.bin"))?;
    }
    if let Some(e) = &model.object {
        crate::gauss::checkpoint::save_cloud(&e.cloud, dir.join("object.bin"))?;
    }
    let path = dir.join("bindings.json");
    let text = serde_json::to_string_pretty(bindings)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Rebuild a scene model from a checkpoint directory. Asset paths in the
/// bindings resolve relative to the bindings file when not absolute.
pub fn load_checkpoint(dir: &Path) -> Result<SceneModel> {
    let bindings_path = dir.join("bindings.json");
    let text = std::fs::read_to_string(&bindings_path)
        .map_err(|_| Error::MissingFile(bindings_path.display().to_string()))?;
    let bindings: CheckpointBindings = serde_json::from_str(&text)
        .map_err(|e| Error::json(bindings_path.display().to_string(), e))?;
    let resolve = |p: &str| {
        let path = std::path::PathBuf::from(p);
        if path.is_absolute() {
            path
        } else {
            dir.join(path)
        }
    };
    let mut model = SceneModel::default();
    if let Some(rig_path) = &bindings.left_rig {
        let rig = crate::deform::load_rig(resolve(rig_path))?;
        let cloud = crate::gauss::checkpoint::load_cloud(
            dir.join("left.bin"),
            &rig.canonical_mesh.faces,
        )?;
        model.left = Some(crate::scene::HandEntity { rig, cloud });
    }
    if let Some(rig_path) = &bindings.right_rig {
        let rig = crate::deform::load_rig(resolve(rig_path))?;
        let cloud = crate::gauss::checkpoint::load_cloud(
            dir.join("right.bin"),
            &rig.canonical_mesh.faces,
        )?;
        model.right = Some(crate::scene::HandEntity { rig, cloud });
    }
    if let Some(object_path) = &bindings.object {
        let object = crate::deform::load_object(resolve(object_path))?;
        let cloud =
            crate::gauss::checkpoint::load_cloud(dir.join("object.bin"), &object.mesh.faces)?;
        model.object = Some(crate::scene::ObjectEntity {
            model: object,
            cloud,
        });
    }
    Ok(model)
}
