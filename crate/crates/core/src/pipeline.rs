//! End-to-end bare-skin texture recovery on synthetic subjects with makeup.
//!
//! A held-out corpus subject gets makeup patches, a seeded pose and seeded
//! colored lighting, and is rendered as the input photograph. The pipeline
//! then fits the teacher, de-lights, matches skin tone, fits the student
//! on the bare image, unwarps it and projects the texture onto the
//! appearance subspace. Both the raw unwarp of the input and the final
//! texture are scored against the subject's true bare texture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bare_skin::{delight, demakeup_subspace, match_skin_tone, BareSkinResult, DemakeupResult, DEFAULT_EPSILON, DEFAULT_LAMBDA};
use crate::fitting::{fit_student, fit_teacher, initial_coefficients, project_landmarks_world, FitConfig, FitResult, StudentInputs};
use crate::image::Image;
use crate::metrics::{uv_metrics, Metrics};
use crate::morphable_model::{axis_angle_rotation, CoefficientVector, MorphableModel};
use crate::rasterizer::{render_mesh, Camera};
use crate::shading::LightingCoefficients;
use crate::synth::{apply_makeup, random_lighting, Corpus, CorpusSpec, MakeupPatch};
use crate::uv::{unwarp, UvLayout, UvTexture};
use crate::{Result, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub corpus: CorpusSpec,
    pub k_id: usize,
    pub k_exp: usize,
    pub k_app: usize,
    pub image_size: usize,
    pub uv_size: usize,
    pub teacher: FitConfig,
    pub student: FitConfig,
    pub epsilon: f64,
    pub lambda: f64,
    pub scale255: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            corpus: CorpusSpec {
                template_subdivision: 3,
                ..CorpusSpec::default()
            },
            k_id: 12,
            k_exp: 4,
            k_app: 10,
            image_size: 64,
            uv_size: 128,
            teacher: FitConfig {
                iterations: 1000,
                ..FitConfig::default()
            },
            student: FitConfig {
                iterations: 200,
                ..FitConfig::default()
            },
            epsilon: DEFAULT_EPSILON,
            lambda: DEFAULT_LAMBDA,
            scale255: false,
        }
    }
}

impl PipelineConfig {
    pub fn camera(&self) -> Camera {
        Camera::default_for(self.image_size, self.image_size)
    }
}

/// Ground truth of one synthetic subject.
#[derive(Debug, Clone)]
pub struct Subject {
    pub seed: u64,
    pub rotation: Vec3,
    pub translation: Vec3,
    pub lighting: LightingCoefficients,
    pub patches: Vec<MakeupPatch>,
    /// Camera-space vertex positions.
    pub world: Vec<Vec3>,
    pub bare_appearance: Vec<Vec3>,
    pub makeup_appearance: Vec<Vec3>,
    pub image: Image,
    pub landmarks: Vec<[f64; 2]>,
}

/// Held-out subject `seed` with makeup, a near-frontal pose and random lighting.
pub fn make_subject(corpus: &Corpus, model: &MorphableModel, camera: &Camera, seed: u64) -> Result<Subject> {
    let sample = corpus.held_out(seed as usize)?;
    let made_up = apply_makeup(&sample, &model.topology, &corpus.spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let rotation = Vec3::new(rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15), rng.gen_range(-0.1..0.1));
    let base = initial_coefficients(model, camera).translation;
    let translation = base + Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.2..0.2));
    let rot = axis_angle_rotation(&rotation).matrix;
    let world: Vec<Vec3> = sample.shape.iter().map(|p| rot * p + translation).collect();
    let lighting = random_lighting(seed);
    let image = render_mesh(camera, &world, &made_up.sample.appearance, &model.topology, Some(&lighting))?.color;
    let landmarks = project_landmarks_world(&world, model, camera)?;
    Ok(Subject {
        seed,
        rotation,
        translation,
        lighting,
        patches: made_up.patches,
        world,
        bare_appearance: sample.appearance,
        makeup_appearance: made_up.sample.appearance,
        image,
        landmarks,
    })
}

/// True bare texture on the model's UV layout, visible wherever the layout is covered.
pub fn truth_texture(model: &MorphableModel, appearance: &[Vec3], size: usize) -> Result<UvTexture> {
    let layout = UvLayout::new(&model.topology, size)?;
    Ok(UvTexture {
        size,
        color: layout.splat(&model.topology, appearance),
        visibility: layout.coverage(),
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub teacher: FitResult,
    pub delit: BareSkinResult,
    pub toned: BareSkinResult,
    pub student: FitResult,
    /// Unwarp of the input image with the teacher's geometry.
    pub raw_uv: UvTexture,
    /// Unwarp of the tone-matched bare image with the student's geometry.
    pub bare_uv: UvTexture,
    pub demakeup: DemakeupResult,
    pub truth_uv: UvTexture,
    pub raw_metrics: Metrics,
    pub final_metrics: Metrics,
}

pub fn run_subject(subject: &Subject, model: &MorphableModel, camera: &Camera, config: &PipelineConfig) -> Result<PipelineOutput> {
    let teacher = fit_teacher(&subject.image, &subject.landmarks, model, camera, &config.teacher)?;
    let delit = delight(&subject.image, &teacher, model, camera, config.epsilon)?;
    let toned = match_skin_tone(&delit.bare_image, &teacher, model, camera)?;
    let inputs = StudentInputs {
        reference: &subject.image,
        landmarks: &subject.landmarks,
    };
    let student = fit_student(&toned.bare_image, inputs, &teacher, model, camera, &config.student)?;
    let raw_uv = unwarp(&subject.image, &teacher.coefficients, model, camera, config.uv_size)?;
    let bare_uv = unwarp(&toned.bare_image, &student.coefficients, model, camera, config.uv_size)?;
    let demakeup = demakeup_subspace(&bare_uv, model, config.lambda)?;
    let truth_uv = truth_texture(model, &subject.bare_appearance, config.uv_size)?;
    let raw_metrics = uv_metrics(&raw_uv, &truth_uv, config.scale255)?;
    let final_metrics = uv_metrics(&demakeup.texture, &truth_uv, config.scale255)?;
    Ok(PipelineOutput {
        teacher,
        delit,
        toned,
        student,
        raw_uv,
        bare_uv,
        demakeup,
        truth_uv,
        raw_metrics,
        final_metrics,
    })
}

/// Seeded in-span coefficients a moderate distance from the mean face:
/// shape and appearance at half their deviations (expression at 0.3),
/// small rotations and translation offsets around the framing distance.
pub fn random_coefficients(model: &MorphableModel, camera: &Camera, seed: u64) -> CoefficientVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = initial_coefficients(model, camera);
    for (a, s) in c.alpha.iter_mut().zip(model.sigma_id.iter()) {
        *a = 0.5 * s * rng.sample::<f64, _>(StandardNormal);
    }
    for (b, s) in c.beta.iter_mut().zip(model.sigma_exp.iter()) {
        *b = 0.3 * s * rng.sample::<f64, _>(StandardNormal);
    }
    for (d, s) in c.delta.iter_mut().zip(model.sigma_app.iter()) {
        *d = 0.5 * s * rng.sample::<f64, _>(StandardNormal);
    }
    c.rotation = Vec3::new(rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15), rng.gen_range(-0.1..0.1));
    c.translation += Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.2..0.2));
    c
}
