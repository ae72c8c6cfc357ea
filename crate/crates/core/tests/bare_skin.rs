mod common;

use common::{fixture, random_coeffs, Fixture};
use facefit_core::bare_skin::{delight, demakeup_subspace, match_skin_tone, DEFAULT_EPSILON};
use facefit_core::pipeline::truth_texture;
use facefit_core::rasterizer::render;
use facefit_core::synth::{apply_makeup, random_lighting};
use facefit_core::uv::{UvLayout, UvTexture};
use facefit_core::{CoefficientVector, Error, FitResult, Grid, LightingCoefficients, Scene, Vec3};
use nalgebra::DVector;

fn fit_of(c: &CoefficientVector, gamma: LightingCoefficients) -> FitResult {
    FitResult {
        coefficients: c.clone(),
        gamma,
        loss_trace: Vec::new(),
        converged: true,
    }
}

/// Mean abs error between the bare image and the unlit render over covered
/// pixels whose lit value is unsaturated and whose shading is above the floor.
fn recovery_error(fx: &Fixture, seed: u64, gamma: LightingCoefficients) -> (f64, usize) {
    let c = random_coeffs(&fx.model, &fx.camera, seed);
    let scene = Scene::new(&fx.model, c.clone(), Some(gamma), fx.camera);
    let lit = render(&scene).unwrap();
    let unlit = render(&scene.with_lighting(None)).unwrap();
    let out = delight(&lit.color, &fit_of(&c, gamma), &fx.model, &fx.camera, DEFAULT_EPSILON).unwrap();
    let mut err = 0.0;
    let mut n = 0;
    for i in 0..lit.color.len() {
        let p = lit.color.data[i];
        if !lit.coverage.data[i] || out.floor_mask.data[i] || p.iter().any(|&v| v >= 1.0 || v <= 0.0) {
            continue;
        }
        err += (out.bare_image.data[i] - unlit.color.data[i]).abs().sum();
        n += 3;
    }
    (err / n as f64, n)
}

#[test]
fn delight_inverts_shading_of_own_renders() {
    let fx = fixture(3, 48, 10, 3, 8);
    for seed in 0..3 {
        let (err, n) = recovery_error(&fx, seed, random_lighting(seed + 100));
        assert!(n > 300);
        assert!(err <= 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn delight_with_identity_lighting_is_identity_on_coverage() {
    let fx = fixture(3, 40, 10, 3, 8);
    let c = random_coeffs(&fx.model, &fx.camera, 4);
    let img = render(&Scene::new(&fx.model, c.clone(), None, fx.camera)).unwrap();
    let out = delight(
        &img.color,
        &fit_of(&c, LightingCoefficients::identity()),
        &fx.model,
        &fx.camera,
        DEFAULT_EPSILON,
    )
    .unwrap();
    assert_eq!(out.bare_image, img.color);
    assert!(out.floor_mask.data.iter().all(|f| !f));
    for i in 0..img.color.len() {
        if out.coverage.data[i] {
            assert!((out.shading_map.data[i] - Vec3::repeat(1.0)).amax() < 1e-12);
        }
    }
}

#[test]
fn delight_recovers_albedo_under_random_lighting() {
    let fx = fixture(3, 48, 10, 3, 8);
    for k in 0..20 {
        let (err, _) = recovery_error(&fx, k % 4, random_lighting(1000 + k));
        assert!(err <= 0.02, "gamma {k}: {err}");
    }
}

#[test]
fn delight_flags_shading_below_epsilon_and_passes_background() {
    let fx = fixture(3, 32, 10, 3, 8);
    let c = random_coeffs(&fx.model, &fx.camera, 5);
    let img = Grid::from_fn(32, 32, |y, x| Vec3::new(0.2, (x as f64) / 40.0, (y as f64) / 40.0));
    let dark = LightingCoefficients::ambient(Vec3::repeat(1e-4));
    let out = delight(&img, &fit_of(&c, dark), &fx.model, &fx.camera, 1e-3).unwrap();
    assert_eq!(out.floor_mask, out.coverage);
    for i in 0..img.len() {
        if out.coverage.data[i] {
            // Divided by the floor, not by the tiny shading.
            let want = (img.data[i] / 1e-3).map(|v| v.clamp(0.0, 1.0));
            assert_eq!(out.bare_image.data[i], want);
        } else {
            assert_eq!(out.bare_image.data[i], img.data[i]);
        }
    }
}

#[test]
fn delight_errors_without_coverage_or_matching_frame() {
    let fx = fixture(2, 24, 5, 2, 4);
    let mut c = CoefficientVector::zeros_for(&fx.model);
    c.translation = Vec3::new(0.0, 0.0, -5.0);
    let img = Grid::filled(24, 24, Vec3::repeat(0.5));
    assert!(delight(&img, &fit_of(&c, LightingCoefficients::identity()), &fx.model, &fx.camera, 1e-3).is_err());
    let small = Grid::filled(20, 24, Vec3::repeat(0.5));
    let c = random_coeffs(&fx.model, &fx.camera, 0);
    assert!(delight(&small, &fit_of(&c, LightingCoefficients::identity()), &fx.model, &fx.camera, 1e-3).is_err());
}

#[test]
fn skin_tone_gain_is_a_ratio_of_means() {
    let fx = fixture(3, 40, 10, 3, 8);
    let c = random_coeffs(&fx.model, &fx.camera, 6);
    let fit = fit_of(&c, LightingCoefficients::identity());
    let unlit = render(&Scene::new(&fx.model, c, None, fx.camera)).unwrap();
    let same = match_skin_tone(&unlit.color, &fit, &fx.model, &fx.camera).unwrap();
    assert!((same.gain - Vec3::repeat(1.0)).amax() < 1e-12);

    let half = unlit.color.map(|p| p * 0.5);
    let out = match_skin_tone(&half, &fit, &fx.model, &fx.camera).unwrap();
    assert!((out.gain - Vec3::repeat(2.0)).amax() < 1e-12);
}

#[test]
fn skin_tone_matches_render_means_and_keeps_ratios() {
    let fx = fixture(3, 40, 10, 3, 8);
    let c = random_coeffs(&fx.model, &fx.camera, 7);
    let fit = fit_of(&c, LightingCoefficients::identity());
    let unlit = render(&Scene::new(&fx.model, c, None, fx.camera)).unwrap();
    // A darker, tinted version so no channel clamps after scaling.
    let bare = Grid::from_fn(40, 40, |y, x| {
        let p = unlit.color.get(y, x);
        Vec3::new(0.6 * p.x, 0.7 * p.y + 0.01 * ((x + y) % 3) as f64, 0.5 * p.z)
    });
    let out = match_skin_tone(&bare, &fit, &fx.model, &fx.camera).unwrap();
    let n = out.coverage.count() as f64;
    let mut m_out = Vec3::zeros();
    let mut m_ref = Vec3::zeros();
    for i in 0..bare.len() {
        if out.coverage.data[i] {
            m_out += out.bare_image.data[i] / n;
            m_ref += unlit.color.data[i] / n;
            let ratio = out.bare_image.data[i].component_div(&bare.data[i]);
            assert!((ratio - out.gain).amax() < 1e-9);
        }
    }
    assert!((m_out - m_ref).amax() < 1e-6, "{m_out:?} vs {m_ref:?}");
    assert!(out.gain.iter().all(|&g| g > 0.0));
}

#[test]
fn skin_tone_rejects_zero_channel() {
    let fx = fixture(2, 24, 5, 2, 4);
    let c = random_coeffs(&fx.model, &fx.camera, 8);
    let black = Grid::filled(24, 24, Vec3::new(0.3, 0.0, 0.3));
    assert!(match_skin_tone(&black, &fit_of(&c, LightingCoefficients::identity()), &fx.model, &fx.camera).is_err());
}

fn full_visibility(fx: &Fixture, size: usize, colors: &[Vec3]) -> UvTexture {
    truth_texture(&fx.model, colors, size).unwrap()
}

#[test]
fn demakeup_fixed_point_inside_subspace() {
    let fx = fixture(3, 32, 10, 3, 8);
    let c = random_coeffs(&fx.model, &fx.camera, 9);
    let colors = fx.model.evaluate_appearance(&c.delta).unwrap().colors;
    let tex = full_visibility(&fx, 96, &colors);
    let out = demakeup_subspace(&tex, &fx.model, 0.0).unwrap();
    for i in 0..tex.color.len() {
        if tex.visibility.data[i] {
            assert!((out.texture.color.data[i] - tex.color.data[i]).amax() <= 1e-3);
        }
    }
    assert!((&out.delta - &c.delta).amax() < 1e-6 * c.delta.amax().max(1.0));
}

#[test]
fn demakeup_projection_is_idempotent_on_low_frequency() {
    let fx = fixture(3, 32, 10, 3, 8);
    let sample = fx.corpus.held_out(0).unwrap();
    let tex = full_visibility(&fx, 96, &sample.appearance);
    let first = demakeup_subspace(&tex, &fx.model, 1.0).unwrap();
    let low = UvTexture {
        size: 96,
        color: first.low_frequency.clone(),
        visibility: tex.visibility.clone(),
    };
    let second = demakeup_subspace(&low, &fx.model, 0.0).unwrap();
    let change = first
        .low_frequency
        .data
        .iter()
        .zip(&second.low_frequency.data)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max);
    assert!(change <= 1e-9, "{change}");
}

#[test]
fn infinite_shrinkage_gives_mean_appearance() {
    let fx = fixture(3, 32, 10, 3, 8);
    let sample = fx.corpus.held_out(1).unwrap();
    let tex = full_visibility(&fx, 64, &sample.appearance);
    let out = demakeup_subspace(&tex, &fx.model, 1e12).unwrap();
    assert!(out.delta.amax() < 1e-6);
    let mean = fx.model.evaluate_appearance(&DVector::zeros(fx.model.k_app())).unwrap().colors;
    let layout = UvLayout::new(&fx.model.topology, 64).unwrap();
    let splat = layout.splat(&fx.model.topology, &mean);
    for i in 0..splat.len() {
        if tex.visibility.data[i] {
            assert!((out.low_frequency.data[i] - splat.data[i]).amax() < 1e-6);
        }
    }
}

#[test]
fn demakeup_moves_patches_toward_bare_color() {
    let fx = fixture(3, 32, 12, 3, 10);
    let layout = UvLayout::new(&fx.model.topology, 128).unwrap();
    for seed in 0..5 {
        let sample = fx.corpus.held_out(seed as usize).unwrap();
        let made_up = apply_makeup(&sample, &fx.model.topology, &fx.corpus.spec, seed);
        let truth = full_visibility(&fx, 128, &sample.appearance);
        let input = full_visibility(&fx, 128, &made_up.sample.appearance);
        let out = demakeup_subspace(&input, &fx.model, 1.0).unwrap();
        let patch_mask = layout.splat(
            &fx.model.topology,
            &made_up.mask.iter().map(|&m| Vec3::repeat(m as u8 as f64)).collect::<Vec<_>>(),
        );
        let (mut before, mut after, mut n) = (Vec3::zeros(), Vec3::zeros(), 0.0);
        for i in 0..truth.color.len() {
            if truth.visibility.data[i] && patch_mask.data[i].x > 0.99 {
                before += input.color.data[i] - truth.color.data[i];
                after += out.texture.color.data[i] - truth.color.data[i];
                n += 1.0;
            }
        }
        assert!(n > 50.0);
        let (b, a) = ((before / n).norm(), (after / n).norm());
        assert!(a < b, "seed {seed}: mean color error {a} not below {b}");
    }
}

#[test]
fn demakeup_with_too_few_visible_vertices_is_underdetermined() {
    let fx = fixture(3, 32, 10, 3, 8);
    let sample = fx.corpus.held_out(0).unwrap();
    let mut tex = full_visibility(&fx, 64, &sample.appearance);
    tex.visibility = Grid::filled(64, 64, false);
    *tex.visibility.get_mut(32, 32) = true;
    assert!(matches!(demakeup_subspace(&tex, &fx.model, 1.0), Err(Error::Underdetermined(_))));
}
