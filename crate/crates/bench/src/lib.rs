//! Shared fixtures for the benchmarks.

use facefit_core::fitting::project_landmarks;
use facefit_core::pipeline::{random_coefficients, PipelineConfig};
use facefit_core::synth::{generate_corpus, random_lighting};
use facefit_core::{Camera, CoefficientVector, Grid, Image, LightingCoefficients, MorphableModel, Vec3};

pub struct Fixture {
    pub model: MorphableModel,
    pub camera: Camera,
    pub coeffs: CoefficientVector,
    pub lighting: LightingCoefficients,
    pub landmarks: Vec<[f64; 2]>,
}

/// Default pipeline model at `size` pixels with a seeded, lit pose.
pub fn fixture(size: usize) -> Fixture {
    let cfg = PipelineConfig {
        image_size: size,
        ..PipelineConfig::default()
    };
    let corpus = generate_corpus(&cfg.corpus, cfg.k_exp).expect("corpus");
    let model = corpus.build_model(cfg.k_id, cfg.k_app).expect("model");
    let camera = cfg.camera();
    let coeffs = random_coefficients(&model, &camera, 1);
    let landmarks = project_landmarks(&random_coefficients(&model, &camera, 2), &model, &camera).expect("landmarks");
    Fixture {
        model,
        camera,
        coeffs,
        lighting: random_lighting(1),
        landmarks,
    }
}

pub fn checkerboard(h: usize, w: usize) -> Image {
    Grid::from_fn(h, w, |y, x| Vec3::repeat(((x + y) % 2) as f64))
}
