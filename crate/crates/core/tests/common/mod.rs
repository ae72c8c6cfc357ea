#![allow(dead_code)]

use facefit_core::fitting::initial_coefficients;
use facefit_core::synth::{generate_corpus, Corpus, CorpusSpec};
use facefit_core::{Camera, CoefficientVector, Grid, Image, MorphableModel, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Fixture {
    pub corpus: Corpus,
    pub model: MorphableModel,
    pub camera: Camera,
}

pub fn fixture(subdivision: u32, size: usize, k_id: usize, k_exp: usize, k_app: usize) -> Fixture {
    let spec = CorpusSpec {
        template_subdivision: subdivision,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec, k_exp).unwrap();
    let model = corpus.build_model(k_id, k_app).unwrap();
    Fixture {
        corpus,
        model,
        camera: Camera::default_for(size, size),
    }
}

/// Coefficients a moderate distance from the mean face, seen from near the front.
pub fn random_coeffs(model: &MorphableModel, camera: &Camera, seed: u64) -> CoefficientVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = initial_coefficients(model, camera);
    let mut draw = |sigma: f64, scale: f64| -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        scale * sigma * z
    };
    for (a, s) in c.alpha.iter_mut().zip(model.sigma_id.iter()) {
        *a = draw(*s, 0.5);
    }
    for (b, s) in c.beta.iter_mut().zip(model.sigma_exp.iter()) {
        *b = draw(*s, 0.3);
    }
    for (d, s) in c.delta.iter_mut().zip(model.sigma_app.iter()) {
        *d = draw(*s, 0.5);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    c.rotation = Vec3::new(rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15), rng.gen_range(-0.1..0.1));
    c.translation += Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.2..0.2));
    c
}

/// Alternating black and white pixels; keeps L1 residuals away from zero.
pub fn checkerboard(h: usize, w: usize) -> Image {
    Grid::from_fn(h, w, |y, x| Vec3::repeat(((x + y) % 2) as f64))
}
