use std::path::Path;

use facefit_core::bare_skin::{delight, demakeup_subspace, match_skin_tone};
use facefit_core::fitting::{
    fit_student, fit_teacher, gradient_check, initial_coefficients, project_landmarks, LossSelector, ParamBlock, StudentInputs,
};
use facefit_core::image::{read_mask_png, read_png, write_scalar_png};
use facefit_core::metrics::{image_metrics, uv_metrics};
use facefit_core::morphable_model::build_pca_model;
use facefit_core::pipeline::{make_subject, random_coefficients, run_subject, PipelineConfig};
use facefit_core::rasterizer::render;
use facefit_core::synth::{
    blendshapes, generate_corpus, generate_template, random_lighting, read_colors, read_obj_positions, write_colors, write_obj, CorpusSpec,
};
use facefit_core::uv::{apply_occlusion, unwarp};
use facefit_core::{model_io, Camera, FitResult, Grid, Image, LightingCoefficients, MaskMode, MorphableModel, Scene, UvTexture, Vec3};
use serde::{Deserialize, Serialize};

use crate::manifest::Recorder;
use crate::{resolve_config, CliError, CliResult, Command, GlobalArgs, LightingChoice, LossChoice};

pub fn run(cmd: &Command, g: &GlobalArgs) -> CliResult<()> {
    let cfg = resolve_config(g)?;
    let seed = g.seed.unwrap_or(0);
    let mut rec = Recorder::new(&g.out)?;
    if let Some(p) = &g.config {
        rec.input(p)?;
    }
    match cmd {
        Command::SynthCorpus => synth_corpus(&cfg, g.seed, &mut rec)?,
        Command::BuildModel { corpus } => build_model(&cfg, corpus.as_deref(), &mut rec)?,
        Command::Render {
            model,
            coeffs,
            lighting,
            subject,
        } => render_cmd(&cfg, seed, model.as_deref(), coeffs.as_deref(), *lighting, *subject, &mut rec)?,
        Command::Fit { model, image, landmarks } => {
            let model = load_model(&cfg, model.as_deref(), &mut rec)?;
            let img = read_image(image, &mut rec)?;
            let lms = read_landmarks(landmarks, &mut rec)?;
            let camera = camera_for(&img);
            let fit = fit_teacher(&img, &lms, &model, &camera, &cfg.teacher)?;
            write_fit(&mut rec, "fit", &fit, &model, &camera)?;
        }
        Command::FitStudent {
            model,
            image,
            reference,
            landmarks,
            teacher,
        } => {
            let model = load_model(&cfg, model.as_deref(), &mut rec)?;
            let bare = read_image(image, &mut rec)?;
            let reference = read_image(reference, &mut rec)?;
            let lms = read_landmarks(landmarks, &mut rec)?;
            let teacher = read_fit(teacher, &mut rec)?;
            let camera = camera_for(&bare);
            let inputs = StudentInputs {
                reference: &reference,
                landmarks: &lms,
            };
            let fit = fit_student(&bare, inputs, &teacher, &model, &camera, &cfg.student)?;
            write_fit(&mut rec, "student", &fit, &model, &camera)?;
        }
        Command::Delight {
            model,
            image,
            fit,
            epsilon,
            no_tone,
        } => {
            let model = load_model(&cfg, model.as_deref(), &mut rec)?;
            let img = read_image(image, &mut rec)?;
            let fit = read_fit(fit, &mut rec)?;
            let camera = camera_for(&img);
            let delit = delight(&img, &fit, &model, &camera, epsilon.unwrap_or(cfg.epsilon))?;
            let out = if *no_tone {
                delit.clone()
            } else {
                match_skin_tone(&delit.bare_image, &fit, &model, &camera)?
            };
            rec.image("bare.png", &out.bare_image)?;
            rec.image("shading.png", &delit.shading_map.clamp01())?;
            rec.mask("floor_mask.png", &delit.floor_mask)?;
            let hi = out.detail_residual.data.iter().map(|v| v.amax()).fold(1e-12, f64::max);
            let detail = out.detail_residual.map(|v| v.amax());
            write_scalar_png(&detail, 0.0, hi, &rec.path("detail.png"))?;
            rec.json(
                "delight.json",
                &DelightSummary {
                    gain: out.gain.into(),
                    covered_pixels: delit.coverage.count(),
                    floored_pixels: delit.floor_mask.count(),
                },
            )?;
        }
        Command::Demakeup {
            model,
            texture,
            visibility,
            lambda,
        } => {
            let model = load_model(&cfg, model.as_deref(), &mut rec)?;
            let color = read_image(texture, &mut rec)?;
            rec.input(visibility)?;
            let vis = read_mask_png(visibility)?;
            if color.height != color.width || !color.same_shape(&vis) {
                return Err(CliError::Data("texture and visibility must be the same square size".into()));
            }
            let tex = UvTexture {
                size: color.width,
                color,
                visibility: vis,
            };
            let out = demakeup_subspace(&tex, &model, lambda.unwrap_or(cfg.lambda))?;
            rec.texture("demakeup", &out.texture)?;
            rec.image("low_frequency.png", &out.low_frequency.clamp01())?;
            rec.json("demakeup.json", &out.delta.iter().copied().collect::<Vec<f64>>())?;
        }
        Command::Unwarp {
            model,
            image,
            fit,
            mask,
            uv_size,
        } => {
            let model = load_model(&cfg, model.as_deref(), &mut rec)?;
            let img = read_image(image, &mut rec)?;
            let fit = read_fit(fit, &mut rec)?;
            let camera = camera_for(&img);
            let mut tex = unwarp(&img, &fit.coefficients, &model, &camera, uv_size.unwrap_or(cfg.uv_size))?;
            if let Some(m) = mask {
                rec.input(m)?;
                let mask = read_mask_png(m)?;
                tex = apply_occlusion(&tex, &mask, &fit.coefficients, &model, &camera)?;
            }
            rec.texture("uv", &tex)?;
        }
        Command::Metrics {
            a,
            b,
            a_visibility,
            b_visibility,
        } => {
            let ia = read_image(a, &mut rec)?;
            let ib = read_image(b, &mut rec)?;
            let m = match (a_visibility, b_visibility) {
                (Some(va), Some(vb)) => {
                    rec.input(va)?;
                    rec.input(vb)?;
                    let ta = texture_from(ia, read_mask_png(va)?)?;
                    let tb = texture_from(ib, read_mask_png(vb)?)?;
                    uv_metrics(&ta, &tb, cfg.scale255)?
                }
                _ => image_metrics(&ia, &ib, None, cfg.scale255)?,
            };
            let text = m.to_json()?;
            println!("{text}");
            rec.text("metrics.json", &format!("{text}\n"))?;
        }
        Command::Gradcheck {
            model,
            block,
            loss,
            epsilon,
            tol,
        } => gradcheck(&cfg, seed, model.as_deref(), block.0, *loss, *epsilon, *tol, &mut rec)?,
        Command::Pipeline { model } => pipeline(&cfg, seed, model.as_deref(), &mut rec)?,
    }
    rec.finish(cmd, seed, &cfg)
}

#[derive(Serialize)]
struct DelightSummary {
    gain: [f64; 3],
    covered_pixels: usize,
    floored_pixels: usize,
}

#[derive(Serialize, Deserialize)]
struct CorpusIndex {
    spec: CorpusSpec,
    k_exp: usize,
    samples: usize,
}

fn sample_stem(i: usize) -> String {
    format!("sample_{i:03}")
}

fn synth_corpus(cfg: &PipelineConfig, seed: Option<u64>, rec: &mut Recorder) -> CliResult<()> {
    let mut spec = cfg.corpus.clone();
    if let Some(s) = seed {
        spec.seed = s;
    }
    let corpus = generate_corpus(&spec, cfg.k_exp)?;
    let topo = &corpus.template.topology;
    write_obj(&rec.path("template.obj"), &corpus.template.positions, topo)?;
    rec.bytes("template.obj", &std::fs::read(rec.path("template.obj"))?)?;
    for (i, s) in corpus.samples.iter().enumerate() {
        let stem = sample_stem(i);
        write_obj(&rec.path(&format!("{stem}.obj")), &s.shape, topo)?;
        write_colors(&rec.path(&format!("{stem}_colors.txt")), &s.appearance)?;
        rec.bytes(&format!("{stem}.obj"), &std::fs::read(rec.path(&format!("{stem}.obj")))?)?;
        rec.bytes(
            &format!("{stem}_colors.txt"),
            &std::fs::read(rec.path(&format!("{stem}_colors.txt")))?,
        )?;
    }
    let params: Vec<_> = corpus.samples.iter().map(|s| &s.params).collect();
    rec.json("params.json", &params)?;
    rec.json(
        "corpus.json",
        &CorpusIndex {
            spec,
            k_exp: cfg.k_exp,
            samples: corpus.samples.len(),
        },
    )
}

fn model_from_config(cfg: &PipelineConfig) -> CliResult<MorphableModel> {
    let corpus = generate_corpus(&cfg.corpus, cfg.k_exp)?;
    Ok(corpus.build_model(cfg.k_id, cfg.k_app)?)
}

fn build_model(cfg: &PipelineConfig, dir: Option<&Path>, rec: &mut Recorder) -> CliResult<()> {
    let model = match dir {
        None => model_from_config(cfg)?,
        Some(dir) => {
            let index_path = dir.join("corpus.json");
            rec.input(&index_path)?;
            let index: CorpusIndex = serde_json::from_str(&std::fs::read_to_string(&index_path)?)?;
            let template = generate_template(index.spec.template_subdivision)?;
            let mut shapes = Vec::with_capacity(index.samples);
            let mut colors = Vec::with_capacity(index.samples);
            for i in 0..index.samples {
                let stem = sample_stem(i);
                let obj = dir.join(format!("{stem}.obj"));
                let col = dir.join(format!("{stem}_colors.txt"));
                rec.input(&obj)?;
                rec.input(&col)?;
                shapes.push(read_obj_positions(&obj)?);
                colors.push(read_colors(&col)?);
            }
            let bs = blendshapes(&template, index.k_exp);
            build_pca_model(template.topology, &shapes, &colors, cfg.k_id, cfg.k_app, &bs)?
        }
    };
    model_io::save(&model, &rec.path("model.bin"))?;
    rec.bytes("model.bin", &std::fs::read(rec.path("model.bin"))?)?;
    rec.json(
        "model.json",
        &ModelSummary {
            vertices: model.vertex_count(),
            faces: model.topology.face_count(),
            k_id: model.k_id(),
            k_exp: model.k_exp(),
            k_app: model.k_app(),
            sigma_id: model.sigma_id.iter().copied().collect(),
            sigma_app: model.sigma_app.iter().copied().collect(),
        },
    )
}

#[derive(Serialize)]
struct ModelSummary {
    vertices: usize,
    faces: usize,
    k_id: usize,
    k_exp: usize,
    k_app: usize,
    sigma_id: Vec<f64>,
    sigma_app: Vec<f64>,
}

fn load_model(cfg: &PipelineConfig, path: Option<&Path>, rec: &mut Recorder) -> CliResult<MorphableModel> {
    match path {
        Some(p) => {
            rec.input(p)?;
            Ok(model_io::load(p)?)
        }
        None => model_from_config(cfg),
    }
}

fn read_image(path: &Path, rec: &mut Recorder) -> CliResult<Image> {
    rec.input(path)?;
    Ok(read_png(path)?)
}

fn read_landmarks(path: &Path, rec: &mut Recorder) -> CliResult<Vec<[f64; 2]>> {
    rec.input(path)?;
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn read_fit(path: &Path, rec: &mut Recorder) -> CliResult<FitResult> {
    rec.input(path)?;
    Ok(FitResult::from_json(&std::fs::read_to_string(path)?)?)
}

fn camera_for(img: &Image) -> Camera {
    Camera::default_for(img.height, img.width)
}

fn texture_from(color: Image, visibility: facefit_core::Mask) -> CliResult<UvTexture> {
    if color.height != color.width || !color.same_shape(&visibility) {
        return Err(CliError::Data("texture and visibility must be the same square size".into()));
    }
    Ok(UvTexture {
        size: color.width,
        color,
        visibility,
    })
}

/// `stem.json` with the fit and `stem_render.png` with its lit render.
fn write_fit(rec: &mut Recorder, stem: &str, fit: &FitResult, model: &MorphableModel, camera: &Camera) -> CliResult<()> {
    rec.text(&format!("{stem}.json"), &format!("{}\n", fit.to_json()?))?;
    let out = render(&Scene::new(model, fit.coefficients.clone(), Some(fit.gamma), *camera))?;
    rec.image(&format!("{stem}_render.png"), &out.color)
}

fn render_cmd(
    cfg: &PipelineConfig,
    seed: u64,
    model_path: Option<&Path>,
    coeffs: Option<&Path>,
    lighting: LightingChoice,
    subject: bool,
    rec: &mut Recorder,
) -> CliResult<()> {
    let camera = cfg.camera();
    if subject {
        if coeffs.is_some() || model_path.is_some() {
            return Err(CliError::Usage(
                "--subject renders from the config corpus and takes no --model or --coeffs".into(),
            ));
        }
        let corpus = generate_corpus(&cfg.corpus, cfg.k_exp)?;
        let model = corpus.build_model(cfg.k_id, cfg.k_app)?;
        let s = make_subject(&corpus, &model, &camera, seed)?;
        rec.image("image.png", &s.image)?;
        rec.json("landmarks.json", &s.landmarks)?;
        rec.json("lighting.json", &s.lighting.gamma.to_vec())?;
        return Ok(());
    }
    let model = load_model(cfg, model_path, rec)?;
    let fit = match coeffs {
        Some(p) => Some(read_fit(p, rec)?),
        None => None,
    };
    let c = fit
        .as_ref()
        .map_or_else(|| initial_coefficients(&model, &camera), |f| f.coefficients.clone());
    let gamma = match lighting {
        LightingChoice::None => None,
        LightingChoice::Identity => Some(LightingCoefficients::identity()),
        LightingChoice::Random => Some(random_lighting(seed)),
        LightingChoice::Fit => match &fit {
            Some(f) => Some(f.gamma),
            None => return Err(CliError::Usage("--lighting fit needs --coeffs".into())),
        },
    };
    let out = render(&Scene::new(&model, c.clone(), gamma, camera))?;
    rec.image("render.png", &out.color)?;
    rec.mask("coverage.png", &out.coverage)?;
    rec.json("landmarks.json", &project_landmarks(&c, &model, &camera)?)?;
    let scene = FitResult {
        coefficients: c,
        gamma: gamma.unwrap_or_else(LightingCoefficients::identity),
        loss_trace: Vec::new(),
        converged: false,
    };
    rec.text("scene.json", &format!("{}\n", scene.to_json()?))
}

#[allow(clippy::too_many_arguments)]
fn gradcheck(
    cfg: &PipelineConfig,
    seed: u64,
    model_path: Option<&Path>,
    block: ParamBlock,
    loss: LossChoice,
    epsilon: Option<f64>,
    tol: Option<f64>,
    rec: &mut Recorder,
) -> CliResult<()> {
    let model = load_model(cfg, model_path, rec)?;
    let camera = cfg.camera();
    let c = random_coefficients(&model, &camera, seed);
    let scene = Scene::new(&model, c, Some(random_lighting(seed)), camera);
    let selector = match loss {
        // Alternating black and white keeps L1 residuals away from their kink.
        LossChoice::Photometric => LossSelector::Photometric {
            target: Grid::from_fn(camera.height, camera.width, |y, x| Vec3::repeat(((x + y) % 2) as f64)),
            mask_mode: MaskMode::Foreground,
        },
        LossChoice::Landmark => {
            if block == ParamBlock::Gamma {
                return Err(CliError::Usage("the landmark loss does not depend on gamma".into()));
            }
            let target = random_coefficients(&model, &camera, seed.wrapping_add(1));
            LossSelector::Landmark {
                targets: project_landmarks(&target, &model, &camera)?,
            }
        }
    };
    let eps = epsilon.unwrap_or_else(|| block.default_epsilon());
    let report = gradient_check(&scene, &selector, block, eps, seed)?;
    let tol = tol.unwrap_or(if block == ParamBlock::Gamma || loss == LossChoice::Landmark {
        1e-5
    } else {
        1e-4
    });
    rec.json("gradcheck.json", &report)?;
    println!("{block:?}: max relative error {:.3e} (tolerance {tol:.0e})", report.max_rel_error);
    if report.max_rel_error.is_nan() || report.max_rel_error > tol {
        return Err(CliError::Numerical(format!(
            "max relative error {:.3e} exceeds {tol:.0e}",
            report.max_rel_error
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct PipelineMetrics {
    raw: facefit_core::metrics::Metrics,
    #[serde(rename = "final")]
    final_: facefit_core::metrics::Metrics,
    scale255: bool,
}

fn pipeline(cfg: &PipelineConfig, seed: u64, model_path: Option<&Path>, rec: &mut Recorder) -> CliResult<()> {
    let corpus = generate_corpus(&cfg.corpus, cfg.k_exp)?;
    let model = match model_path {
        Some(p) => load_model(cfg, Some(p), rec)?,
        None => corpus.build_model(cfg.k_id, cfg.k_app)?,
    };
    let camera = cfg.camera();
    let subject = make_subject(&corpus, &model, &camera, seed)?;
    let out = run_subject(&subject, &model, &camera, cfg)?;
    rec.image("input.png", &subject.image)?;
    rec.json("landmarks.json", &subject.landmarks)?;
    write_fit(rec, "teacher", &out.teacher, &model, &camera)?;
    rec.image("delit.png", &out.delit.bare_image)?;
    rec.image("bare.png", &out.toned.bare_image)?;
    write_fit(rec, "student", &out.student, &model, &camera)?;
    rec.texture("raw_uv", &out.raw_uv)?;
    rec.texture("bare_uv", &out.bare_uv)?;
    rec.texture("final_uv", &out.demakeup.texture)?;
    rec.texture("truth_uv", &out.truth_uv)?;
    rec.json(
        "metrics.json",
        &PipelineMetrics {
            raw: out.raw_metrics,
            final_: out.final_metrics,
            scale255: cfg.scale255,
        },
    )
}
