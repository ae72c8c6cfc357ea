//! Analysis-by-synthesis fitting.
//!
//! A teacher fit estimates coefficients and SH lighting from a reference
//! image. A student fit then re-estimates the coefficients from a bare-skin
//! image with lighting frozen to the teacher's, pulled toward the teacher's
//! coefficients by a consistency term.
//!
//! Adam runs on a preconditioned parameter vector: identity, expression and
//! appearance coefficients are divided by their per-mode deviations, pose
//! and lighting are used as is.

use nalgebra::DVector;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::{Grid, Image};
use crate::morphable_model::{CoefficientVector, MorphableModel};
use crate::rasterizer::{
    evaluate_scene, geometry_backward, project, render, render_backward, render_with_assignment, Camera, RenderOutput, Scene, SceneGradient,
};
use crate::shading::{LightingCoefficients, GAMMA_LEN};
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Pixels covered by the render.
    #[default]
    Foreground,
    /// Every pixel.
    Full,
}

/// Per-term switches for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossToggles {
    pub coeff: bool,
    pub land: bool,
    pub diff: bool,
    pub light: bool,
    pub reg: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            coeff: true,
            land: true,
            diff: true,
            light: true,
            reg: true,
        }
    }
}

impl LossToggles {
    /// Sets a toggle by term name (`coeff`, `land`, `diff`, `light`, `reg`).
    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        let slot = match name {
            "coeff" => &mut self.coeff,
            "land" => &mut self.land,
            "diff" => &mut self.diff,
            "light" => &mut self.light,
            "reg" => &mut self.reg,
            other => return Err(Error::Invalid(format!("unknown loss term {other:?}"))),
        };
        *slot = on;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub w_coeff: f64,
    pub w_land: f64,
    pub w_diff: f64,
    pub w_light: f64,
    pub w_reg: f64,
    /// Weight of the generator's L1 pixel term; kept for configuration
    /// completeness, unused by the per-image fits.
    pub w_photo: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Leading teacher iterations that fit only rotation and translation to
    /// the landmarks; counted within `iterations`.
    pub warmup_iterations: usize,
    /// Standardization scale of the pose entries after warm-up; Adam moves
    /// them by about `learning_rate * pose_scale` per step.
    pub pose_scale: f64,
    /// Final fraction of the learning rate under the cosine schedule that
    /// runs after warm-up.
    pub lr_floor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub toggles: LossToggles,
    pub mask_mode: MaskMode,
    /// Divide landmark error by the squared image diagonal.
    pub normalize_landmarks: bool,
    pub render_size: usize,
    pub clamp_negative_irradiance: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            w_coeff: 1e-1,
            w_land: 8e-2,
            w_diff: 100.0,
            w_light: 100.0,
            w_reg: 1e-3,
            w_photo: 100.0,
            learning_rate: 1e-2,
            iterations: 1000,
            warmup_iterations: 200,
            pose_scale: 0.1,
            lr_floor: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            toggles: LossToggles::default(),
            mask_mode: MaskMode::Foreground,
            normalize_landmarks: false,
            render_size: 256,
            clamp_negative_irradiance: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_coeff, self.w_land, self.w_diff, self.w_light, self.w_reg, self.w_photo];
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::Invalid("loss weights must be finite and nonnegative".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Invalid("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Invalid("Adam betas must lie in [0,1) and epsilon be positive".into()));
        }
        if !(self.pose_scale > 0.0) || !self.pose_scale.is_finite() {
            return Err(Error::Invalid("pose_scale must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::Invalid("lr_floor must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Unweighted loss components at one iteration; `total` is their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub total: f64,
    pub land: f64,
    pub light: f64,
    pub diff: f64,
    pub coeff: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub coefficients: CoefficientVector,
    pub gamma: LightingCoefficients,
    pub loss_trace: Vec<LossRecord>,
    pub converged: bool,
}

#[derive(Serialize, Deserialize)]
struct FitResultJson {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    delta: Vec<f64>,
    rotation: Vec<f64>,
    translation: Vec<f64>,
    gamma: Vec<f64>,
    trace: Vec<LossRecord>,
    #[serde(default)]
    converged: bool,
}

impl FitResult {
    pub fn to_json(&self) -> Result<String> {
        let c = &self.coefficients;
        let j = FitResultJson {
            alpha: c.alpha.iter().copied().collect(),
            beta: c.beta.iter().copied().collect(),
            delta: c.delta.iter().copied().collect(),
            rotation: c.rotation.iter().copied().collect(),
            translation: c.translation.iter().copied().collect(),
            gamma: self.gamma.gamma.to_vec(),
            trace: self.loss_trace.clone(),
            converged: self.converged,
        };
        Ok(serde_json::to_string_pretty(&j)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: FitResultJson = serde_json::from_str(s)?;
        let v3 = |v: &[f64], what: &'static str| -> Result<Vec3> {
            if v.len() != 3 {
                return Err(Error::dim(what, 3, v.len()));
            }
            Ok(Vec3::new(v[0], v[1], v[2]))
        };
        Ok(FitResult {
            coefficients: CoefficientVector {
                alpha: DVector::from_vec(j.alpha),
                beta: DVector::from_vec(j.beta),
                delta: DVector::from_vec(j.delta),
                rotation: v3(&j.rotation, "rotation")?,
                translation: v3(&j.translation, "translation")?,
            },
            gamma: LightingCoefficients::from_slice(&j.gamma)?,
            loss_trace: j.trace,
            converged: j.converged,
        })
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
        }
    }
}

/// Value of a landmark term and its gradient on camera-space vertices.
struct LandmarkEval {
    value: f64,
    rmse_px: f64,
    d_world: Vec<(usize, Vec3)>,
}

fn landmark_eval(world: &[Vec3], model: &MorphableModel, camera: &Camera, targets: &[[f64; 2]], normalize: bool) -> Result<LandmarkEval> {
    let lm = model.topology.landmark_indices();
    if targets.len() != lm.len() {
        return Err(Error::dim("landmark targets", lm.len(), targets.len()));
    }
    let norm = if normalize { camera.diagonal_sq() } else { 1.0 };
    let mut valid = Vec::new();
    for (&vi, t) in lm.iter().zip(targets) {
        let p = &world[vi as usize];
        if let Some(q) = camera.project_point(p) {
            valid.push((vi as usize, q, *t));
        }
    }
    if valid.is_empty() {
        return Err(Error::Invalid("every landmark projects behind the camera".into()));
    }
    let n = valid.len() as f64;
    let mut sq = 0.0;
    let mut d_world = Vec::with_capacity(valid.len());
    for (vi, q, t) in valid {
        let r = nalgebra::Vector2::new(q.x - t[0], q.y - t[1]);
        sq += r.norm_squared();
        let j = camera.project_jacobian(&world[vi]);
        d_world.push((vi, j.transpose() * r * (2.0 / (n * norm))));
    }
    Ok(LandmarkEval {
        value: sq / (n * norm),
        rmse_px: (sq / n).sqrt(),
        d_world,
    })
}

/// Mean squared pixel distance between projected landmark vertices and
/// targets, optionally divided by the squared image diagonal. Landmarks at
/// or behind the near plane are skipped.
pub fn loss_landmark(c: &CoefficientVector, model: &MorphableModel, camera: &Camera, targets: &[[f64; 2]], normalize: bool) -> Result<f64> {
    let world = model.evaluate_shape(c)?;
    Ok(landmark_eval(&world, model, camera, targets, normalize)?.value)
}

/// Gradient of [`loss_landmark`] in [`SceneGradient`] form (gamma and delta stay zero).
pub fn loss_landmark_gradient(
    c: &CoefficientVector,
    model: &MorphableModel,
    camera: &Camera,
    targets: &[[f64; 2]],
    normalize: bool,
) -> Result<SceneGradient> {
    let morphed = crate::morphable_model::unflatten(&model.morph(c)?);
    let world = model.evaluate_shape(c)?;
    let e = landmark_eval(&world, model, camera, targets, normalize)?;
    let mut grad = SceneGradient::zeros(model);
    add_landmark_gradient(model, c, &morphed, &e, &mut grad, 1.0);
    Ok(grad)
}

fn add_landmark_gradient(
    model: &MorphableModel,
    c: &CoefficientVector,
    morphed: &[Vec3],
    e: &LandmarkEval,
    grad: &mut SceneGradient,
    weight: f64,
) {
    let mut d_world = vec![Vec3::zeros(); model.vertex_count()];
    for (vi, g) in &e.d_world {
        d_world[*vi] += g * weight;
    }
    geometry_backward(model, c, morphed, &d_world, grad);
}

/// Root-mean-square pixel distance between projected landmarks and targets.
pub fn landmark_rmse(c: &CoefficientVector, model: &MorphableModel, camera: &Camera, targets: &[[f64; 2]]) -> Result<f64> {
    let world = model.evaluate_shape(c)?;
    Ok(landmark_eval(&world, model, camera, targets, false)?.rmse_px)
}

/// Landmark pixel positions of a coefficient vector, e.g. to build targets.
pub fn project_landmarks(c: &CoefficientVector, model: &MorphableModel, camera: &Camera) -> Result<Vec<[f64; 2]>> {
    project_landmarks_world(&model.evaluate_shape(c)?, model, camera)
}

/// Pixel positions of the model's landmark vertices taken from camera-space `world`.
pub fn project_landmarks_world(world: &[Vec3], model: &MorphableModel, camera: &Camera) -> Result<Vec<[f64; 2]>> {
    if world.len() != model.vertex_count() {
        return Err(Error::Invalid(format!(
            "{} positions for {} vertices",
            world.len(),
            model.vertex_count()
        )));
    }
    let pts: Vec<Vec3> = model.topology.landmark_indices().iter().map(|&i| world[i as usize]).collect();
    Ok(project(camera, &pts).pixels.iter().map(|p| [p.x, p.y]).collect())
}

/// Mean absolute per-channel difference and its cotangent image.
pub fn loss_photometric_with_grad(rendered: &RenderOutput, target: &Image, mask_mode: MaskMode) -> Result<(f64, Image)> {
    rendered.color.check_shape(target, "photometric target")?;
    let count = match mask_mode {
        MaskMode::Foreground => rendered.coverage.count(),
        MaskMode::Full => rendered.color.len(),
    };
    if count == 0 {
        return Err(Error::Invalid("photometric loss over an empty mask".into()));
    }
    let n = 3.0 * count as f64;
    let mut sum = 0.0;
    let mut grad = Grid::filled(target.height, target.width, Vec3::zeros());
    for i in 0..target.len() {
        if mask_mode == MaskMode::Foreground && !rendered.coverage.data[i] {
            continue;
        }
        let r = rendered.color.data[i] - target.data[i];
        sum += r.abs().sum();
        grad.data[i] = r.map(|v| {
            if v > 0.0 {
                1.0 / n
            } else if v < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        });
    }
    Ok((sum / n, grad))
}

pub fn loss_photometric(rendered: &RenderOutput, target: &Image, mask_mode: MaskMode) -> Result<f64> {
    Ok(loss_photometric_with_grad(rendered, target, mask_mode)?.0)
}

/// Mean squared difference over the whole coefficient vector, pose included.
pub fn loss_coeff(student: &CoefficientVector, teacher: &CoefficientVector) -> Result<f64> {
    let a = student.to_flat();
    let b = teacher.to_flat();
    if a.len() != b.len() {
        return Err(Error::dim("coefficient vector", b.len(), a.len()));
    }
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// Zero shape and appearance, zero rotation, and a translation along the
/// optical axis at which the mean shape spans about 60% of the shorter
/// image side.
pub fn initial_coefficients(model: &MorphableModel, camera: &Camera) -> CoefficientVector {
    let mut c = CoefficientVector::zeros_for(model);
    let radius = crate::morphable_model::unflatten(&model.mean_shape)
        .iter()
        .map(|p| (p.x * p.x + p.y * p.y).sqrt())
        .fold(0.0, f64::max)
        .max(1e-6);
    let span = 0.6 * camera.height.min(camera.width) as f64;
    c.translation = Vec3::new(0.0, 0.0, 2.0 * camera.focal * radius / span);
    c
}

/// Per-entry scale of the optimizer's parameter vector.
fn parameter_scales(model: &MorphableModel, with_gamma: bool) -> Vec<f64> {
    let s = |x: &f64| if *x > 0.0 { *x } else { 1.0 };
    let mut v: Vec<f64> = model
        .sigma_id
        .iter()
        .chain(model.sigma_exp.iter())
        .chain(model.sigma_app.iter())
        .map(s)
        .collect();
    v.extend([1.0; 6]);
    if with_gamma {
        v.extend([1.0; GAMMA_LEN]);
    }
    v
}

struct Objective<'a> {
    model: &'a MorphableModel,
    camera: Camera,
    config: &'a FitConfig,
    landmarks: Option<&'a [[f64; 2]]>,
    /// Lit-render target and, when lighting is frozen, the lighting.
    light_target: Option<&'a Image>,
    frozen_gamma: Option<LightingCoefficients>,
    diff_target: Option<&'a Image>,
    teacher: Option<&'a CoefficientVector>,
}

impl<'a> Objective<'a> {
    /// Loss record and gradient at `c`. With `rigid_landmarks` only the
    /// landmark term is evaluated.
    fn evaluate(
        &self,
        c: &CoefficientVector,
        gamma: &LightingCoefficients,
        iter: usize,
        rigid_landmarks: bool,
    ) -> Result<(LossRecord, SceneGradient)> {
        let cfg = self.config;
        let all_off = LossToggles {
            coeff: false,
            land: true,
            diff: false,
            light: false,
            reg: false,
        };
        let t = if rigid_landmarks { &all_off } else { &cfg.toggles };
        let mut rec = LossRecord {
            iter,
            ..Default::default()
        };
        let mut grad = SceneGradient::zeros(self.model);
        let mut scene = Scene::new(self.model, c.clone(), Some(*gamma), self.camera);
        scene.clamp_negative_irradiance = cfg.clamp_negative_irradiance;

        if t.light {
            if let Some(target) = self.light_target {
                let out = render(&scene)?;
                let (l, up) = loss_photometric_with_grad(&out, target, cfg.mask_mode)?;
                rec.light = l;
                let g = render_backward(&out, &up, &scene)?;
                grad.add_scaled(&g, cfg.w_light);
            }
        }
        if t.diff {
            if let Some(target) = self.diff_target {
                let unlit = scene.with_lighting(None);
                let out = render(&unlit)?;
                let (l, up) = loss_photometric_with_grad(&out, target, cfg.mask_mode)?;
                rec.diff = l;
                let g = render_backward(&out, &up, &unlit)?;
                grad.add_scaled(&g, cfg.w_diff);
            }
        }
        if t.land {
            if let Some(targets) = self.landmarks {
                let eval = evaluate_scene(&scene.with_lighting(None))?;
                let e = landmark_eval(&eval.world, self.model, &self.camera, targets, cfg.normalize_landmarks)?;
                rec.land = e.value;
                add_landmark_gradient(self.model, c, &eval.morphed, &e, &mut grad, cfg.w_land);
            }
        }
        if t.coeff {
            if let Some(teacher) = self.teacher {
                rec.coeff = loss_coeff(c, teacher)?;
                let a = c.to_flat();
                let b = teacher.to_flat();
                let n = a.len() as f64;
                let g: Vec<f64> = a.iter().zip(&b).map(|(x, y)| cfg.w_coeff * 2.0 * (x - y) / n).collect();
                let gc = CoefficientVector::from_flat(&g, self.model.k_id(), self.model.k_exp(), self.model.k_app())?;
                grad.alpha += gc.alpha;
                grad.beta += gc.beta;
                grad.delta += gc.delta;
                grad.rotation += gc.rotation;
                grad.translation += gc.translation;
            }
        }
        if t.reg {
            rec.reg = self.model.regularization_energy(c)?;
            let (ga, gb, gd) = self.model.regularization_gradient(c);
            grad.alpha += ga * cfg.w_reg;
            grad.beta += gb * cfg.w_reg;
            grad.delta += gd * cfg.w_reg;
        }
        rec.total = weighted_total(&rec, cfg);
        Ok((rec, grad))
    }
}

/// Weighted sum of the components of a record under a config.
pub fn weighted_total(rec: &LossRecord, cfg: &FitConfig) -> f64 {
    cfg.w_land * rec.land + cfg.w_light * rec.light + cfg.w_diff * rec.diff + cfg.w_coeff * rec.coeff + cfg.w_reg * rec.reg
}

fn converged(trace: &[LossRecord]) -> bool {
    let n = trace.len();
    if n < 20 {
        return false;
    }
    let k = (n / 10).max(1);
    let last = trace[n - 1].total;
    (trace[n - 1 - k].total - last).abs() <= 1e-3 * last.abs().max(1e-12)
}

fn run(
    objective: &Objective,
    init: CoefficientVector,
    init_gamma: LightingCoefficients,
    optimize_gamma: bool,
    warmup: usize,
) -> Result<FitResult> {
    let cfg = objective.config;
    cfg.validate()?;
    let model = objective.model;
    let mut scales = parameter_scales(model, optimize_gamma);
    let (k_id, k_exp, k_app) = (model.k_id(), model.k_exp(), model.k_app());
    let n_coeff = k_id + k_exp + k_app + 6;
    let pose = k_id + k_exp + k_app..n_coeff;
    let warmup = if objective.landmarks.is_some() && cfg.toggles.land {
        warmup.min(cfg.iterations)
    } else {
        0
    };
    let joint_pose_scale = cfg.pose_scale;
    if warmup == 0 {
        scales[pose.clone()].iter_mut().for_each(|s| *s = joint_pose_scale);
    }
    let mut params: Vec<f64> = init.to_flat();
    if optimize_gamma {
        params.extend_from_slice(&init_gamma.gamma);
    }
    for (p, s) in params.iter_mut().zip(&scales) {
        *p /= s;
    }
    let unpack = |p: &[f64], scales: &[f64]| -> Result<(CoefficientVector, LightingCoefficients)> {
        let nat: Vec<f64> = p.iter().zip(scales).map(|(x, s)| x * s).collect();
        let c = CoefficientVector::from_flat(&nat[..n_coeff], k_id, k_exp, k_app)?;
        let g = if optimize_gamma {
            LightingCoefficients::from_slice(&nat[n_coeff..]).map_err(|_| Error::Numerical("lighting became non-finite".into()))?
        } else {
            init_gamma
        };
        Ok((c, g))
    };

    let mut adam = Adam::new(params.len(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let rigid = iter < warmup;
        if iter == warmup && warmup > 0 {
            for i in pose.clone() {
                params[i] *= scales[i] / joint_pose_scale;
                scales[i] = joint_pose_scale;
            }
            adam = Adam::new(params.len(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
        }
        let (c, g) = unpack(&params, &scales).map_err(|_| Error::NonFinite {
            iteration: iter,
            trace: trace.clone(),
        })?;
        let (rec, grad) = objective.evaluate(&c, &g, iter, rigid)?;
        if !rec.total.is_finite() {
            trace.push(rec);
            return Err(Error::NonFinite { iteration: iter, trace });
        }
        trace.push(rec);
        let mut flat = grad.coefficient_flat();
        if optimize_gamma {
            flat.extend_from_slice(&grad.gamma);
        }
        for (i, (g, s)) in flat.iter_mut().zip(&scales).enumerate() {
            *g = if rigid && !pose.contains(&i) { 0.0 } else { *g * s };
        }
        if flat.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { iteration: iter, trace });
        }
        if !rigid {
            let t = (iter - warmup) as f64 / (cfg.iterations - warmup).max(1) as f64;
            let fl = cfg.lr_floor;
            adam.learning_rate = cfg.learning_rate * (fl + (1.0 - fl) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()));
        }
        adam.step(&mut params, &flat);
    }
    let (coefficients, gamma) = unpack(&params, &scales)?;
    Ok(FitResult {
        coefficients,
        gamma,
        converged: converged(&trace),
        loss_trace: trace,
    })
}

/// Fits coefficients and lighting to a reference image from the mean-face
/// initialization, minimizing landmark, lit photometric and prior terms.
/// Lighting starts as unit ambient. The first `warmup_iterations` align
/// only the pose to the landmarks (their trace entries hold the landmark
/// term alone); the optimizer state is reset before the joint stage.
pub fn fit_teacher(
    image: &Image,
    landmarks: &[[f64; 2]],
    model: &MorphableModel,
    camera: &Camera,
    config: &FitConfig,
) -> Result<FitResult> {
    let init = initial_coefficients(model, camera);
    fit_teacher_from(image, landmarks, model, camera, config, init, LightingCoefficients::identity())
}

pub fn fit_teacher_from(
    image: &Image,
    landmarks: &[[f64; 2]],
    model: &MorphableModel,
    camera: &Camera,
    config: &FitConfig,
    init: CoefficientVector,
    init_gamma: LightingCoefficients,
) -> Result<FitResult> {
    init.check(model)?;
    let objective = Objective {
        model,
        camera: *camera,
        config,
        landmarks: Some(landmarks),
        light_target: Some(image),
        frozen_gamma: None,
        diff_target: None,
        teacher: None,
    };
    run(&objective, init, init_gamma, true, config.warmup_iterations)
}

/// Inputs of a student fit besides the bare-skin image.
#[derive(Debug, Clone, Copy)]
pub struct StudentInputs<'a> {
    /// The reference (pre-normalization) image the teacher was fitted on.
    pub reference: &'a Image,
    pub landmarks: &'a [[f64; 2]],
}

/// Re-fits coefficients on a bare-skin image with lighting frozen to the
/// teacher's, starting from the teacher's coefficients.
pub fn fit_student(
    bare_image: &Image,
    inputs: StudentInputs,
    teacher: &FitResult,
    model: &MorphableModel,
    camera: &Camera,
    config: &FitConfig,
) -> Result<FitResult> {
    teacher.coefficients.check(model)?;
    let objective = Objective {
        model,
        camera: *camera,
        config,
        landmarks: Some(inputs.landmarks),
        light_target: Some(inputs.reference),
        frozen_gamma: Some(teacher.gamma),
        diff_target: Some(bare_image),
        teacher: Some(&teacher.coefficients),
    };
    let gamma = objective.frozen_gamma.unwrap();
    run(&objective, teacher.coefficients.clone(), gamma, false, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamBlock {
    Alpha,
    Beta,
    Delta,
    Rotation,
    Translation,
    Gamma,
}

impl ParamBlock {
    pub const ALL: [ParamBlock; 6] = [
        ParamBlock::Alpha,
        ParamBlock::Beta,
        ParamBlock::Delta,
        ParamBlock::Rotation,
        ParamBlock::Translation,
        ParamBlock::Gamma,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "alpha" => ParamBlock::Alpha,
            "beta" => ParamBlock::Beta,
            "delta" => ParamBlock::Delta,
            "rotation" => ParamBlock::Rotation,
            "translation" => ParamBlock::Translation,
            "gamma" => ParamBlock::Gamma,
            other => return Err(Error::Invalid(format!("unknown parameter block {other:?}"))),
        })
    }

    fn len(self, model: &MorphableModel) -> usize {
        match self {
            ParamBlock::Alpha => model.k_id(),
            ParamBlock::Beta => model.k_exp(),
            ParamBlock::Delta => model.k_app(),
            ParamBlock::Rotation | ParamBlock::Translation => 3,
            ParamBlock::Gamma => GAMMA_LEN,
        }
    }

    fn scale(self, model: &MorphableModel, i: usize) -> f64 {
        let s = match self {
            ParamBlock::Alpha => model.sigma_id[i],
            ParamBlock::Beta => model.sigma_exp[i],
            ParamBlock::Delta => model.sigma_app[i],
            _ => 1.0,
        };
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    /// Finite-difference step (relative to the entry's scale) that balances
    /// truncation and rounding error for this block. Pose moves every
    /// vertex, including near-edge-on silhouette faces whose barycentrics
    /// are strongly curved, so it needs a much smaller step.
    pub fn default_epsilon(self) -> f64 {
        match self {
            ParamBlock::Gamma | ParamBlock::Delta => 1e-3,
            ParamBlock::Alpha | ParamBlock::Beta => 1e-4,
            ParamBlock::Rotation | ParamBlock::Translation => 1e-6,
        }
    }

    fn geometric(self) -> bool {
        matches!(
            self,
            ParamBlock::Alpha | ParamBlock::Beta | ParamBlock::Rotation | ParamBlock::Translation
        )
    }
}

fn with_param<'m>(scene: &Scene<'m>, block: ParamBlock, i: usize, value_delta: f64) -> Scene<'m> {
    let mut s = scene.clone();
    match block {
        ParamBlock::Alpha => s.coeffs.alpha[i] += value_delta,
        ParamBlock::Beta => s.coeffs.beta[i] += value_delta,
        ParamBlock::Delta => s.coeffs.delta[i] += value_delta,
        ParamBlock::Rotation => s.coeffs.rotation[i] += value_delta,
        ParamBlock::Translation => s.coeffs.translation[i] += value_delta,
        ParamBlock::Gamma => {
            if let Some(g) = s.lighting.as_mut() {
                g.gamma[i] += value_delta;
            }
        }
    }
    s
}

fn block_entry(grad: &SceneGradient, block: ParamBlock, i: usize) -> f64 {
    match block {
        ParamBlock::Alpha => grad.alpha[i],
        ParamBlock::Beta => grad.beta[i],
        ParamBlock::Delta => grad.delta[i],
        ParamBlock::Rotation => grad.rotation[i],
        ParamBlock::Translation => grad.translation[i],
        ParamBlock::Gamma => grad.gamma[i],
    }
}

/// Scalar loss whose gradient is being checked.
#[derive(Debug, Clone)]
pub enum LossSelector {
    /// L1 between the scene's render and a target image.
    Photometric { target: Image, mask_mode: MaskMode },
    /// Diagonal-normalized landmark reprojection error.
    Landmark { targets: Vec<[f64; 2]> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub block: ParamBlock,
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Perturbations that changed pixel ownership; those were re-evaluated
    /// with the base render's ownership.
    pub coverage_changes: usize,
}

fn photometric_render(scene: &Scene, assignment: Option<&Grid<i32>>) -> Result<RenderOutput> {
    match assignment {
        Some(a) => render_with_assignment(scene, a),
        None => render(scene),
    }
}

/// `L(plus) - L(minus)` for the L1 photometric loss, accumulated pixel by
/// pixel when both renders share a mask so the large totals never cancel.
fn photometric_difference(plus: &RenderOutput, minus: &RenderOutput, target: &Image, mask_mode: MaskMode) -> Result<f64> {
    if mask_mode == MaskMode::Foreground && plus.coverage != minus.coverage {
        return Ok(loss_photometric(plus, target, mask_mode)? - loss_photometric(minus, target, mask_mode)?);
    }
    let count = match mask_mode {
        MaskMode::Foreground => plus.coverage.count(),
        MaskMode::Full => plus.color.len(),
    };
    if count == 0 {
        return Err(Error::Invalid("photometric loss over an empty mask".into()));
    }
    let mut sum = 0.0;
    for i in 0..target.len() {
        if mask_mode == MaskMode::Foreground && !plus.coverage.data[i] {
            continue;
        }
        let t = &target.data[i];
        for c in 0..3 {
            sum += (plus.color.data[i][c] - t[c]).abs() - (minus.color.data[i][c] - t[c]).abs();
        }
    }
    Ok(sum / (3 * count) as f64)
}

/// Compares the analytic gradient of a loss with central finite
/// differences on a seeded random subset of at least 20 entries of a block
/// (all entries when the block is smaller).
///
/// The step for entry `i` is `epsilon` times the entry's natural scale (its
/// model deviation for shape and appearance modes, 1 otherwise); see
/// [`ParamBlock::default_epsilon`]. The relative error is
/// `|a - n| / max(|a|, |n|, 1e-3 * max_i |a_i|)`, so entries far smaller
/// than the block's largest are compared on an absolute scale.
pub fn gradient_check(scene: &Scene, selector: &LossSelector, block: ParamBlock, epsilon: f64, seed: u64) -> Result<GradCheckReport> {
    let model = scene.model;
    if block == ParamBlock::Gamma && scene.lighting.is_none() {
        return Err(Error::Invalid("gamma gradient check needs a lit scene".into()));
    }
    let analytic = match selector {
        LossSelector::Photometric { target, mask_mode } => {
            let out = render(scene)?;
            let (_, up) = loss_photometric_with_grad(&out, target, *mask_mode)?;
            render_backward(&out, &up, scene)?
        }
        LossSelector::Landmark { targets } => loss_landmark_gradient(&scene.coeffs, model, &scene.camera, targets, true)?,
    };
    let n = block.len(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = if n <= 20 {
        (0..n).collect()
    } else {
        sample(&mut rng, n, 20).into_vec()
    };
    indices.sort_unstable();

    let base = match selector {
        LossSelector::Photometric { .. } => Some(render(scene)?),
        LossSelector::Landmark { .. } => None,
    };
    let mut coverage_changes = 0;
    let mut raw = Vec::with_capacity(indices.len());
    for &i in &indices {
        let h = epsilon * block.scale(model, i);
        let plus = with_param(scene, block, i, h);
        let minus = with_param(scene, block, i, -h);
        let diff = match selector {
            LossSelector::Photometric { target, mask_mode } => {
                let base = base.as_ref().expect("photometric base render");
                let mut op = photometric_render(&plus, None)?;
                let mut om = photometric_render(&minus, None)?;
                if block.geometric() && (op.tri_id != base.tri_id || om.tri_id != base.tri_id) {
                    coverage_changes += 1;
                    op = photometric_render(&plus, Some(&base.tri_id))?;
                    om = photometric_render(&minus, Some(&base.tri_id))?;
                }
                photometric_difference(&op, &om, target, *mask_mode)?
            }
            LossSelector::Landmark { targets } => {
                loss_landmark(&plus.coeffs, model, &plus.camera, targets, true)?
                    - loss_landmark(&minus.coeffs, model, &minus.camera, targets, true)?
            }
        };
        raw.push((i, block_entry(&analytic, block, i), diff / (2.0 * h)));
    }
    let amax = raw.iter().map(|r| r.1.abs()).fold(0.0, f64::max);
    let floor = (1e-3 * amax).max(f64::MIN_POSITIVE);
    let entries: Vec<GradCheckEntry> = raw
        .into_iter()
        .map(|(index, a, num)| GradCheckEntry {
            index,
            analytic: a,
            numeric: num,
            rel_error: (a - num).abs() / a.abs().max(num.abs()).max(floor),
        })
        .collect();
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    let mean_rel_error = entries.iter().map(|e| e.rel_error).sum::<f64>() / entries.len().max(1) as f64;
    Ok(GradCheckReport {
        block,
        entries,
        max_rel_error,
        mean_rel_error,
        coverage_changes,
    })
}
