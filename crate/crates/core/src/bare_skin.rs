//! Bare-skin normalization: quotient de-lighting, skin-tone matching to the
//! model diffuse, and de-makeup by projecting a UV texture onto the
//! appearance subspace while keeping the input's fine detail.

use nalgebra::{DMatrix, DVector};

use crate::fitting::FitResult;
use crate::image::{Grid, Image, Mask};
use crate::morphable_model::MorphableModel;
use crate::rasterizer::{evaluate_scene, rasterize, render, Camera, Scene};
use crate::shading::{irradiance_from_basis, sh_basis_unchecked};
use crate::uv::{UvLayout, UvTexture};
use crate::{Error, Result, Vec3};

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_LAMBDA: f64 = 1.0;
/// Detail-split blur width as a fraction of the texture side.
pub const DETAIL_SIGMA_FRACTION: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct BareSkinResult {
    pub bare_image: Image,
    /// Irradiance per covered pixel, zero on background.
    pub shading_map: Image,
    /// Bare image minus the unlit model render, zero on background.
    pub detail_residual: Image,
    pub gain: Vec3,
    pub coverage: Mask,
    /// Covered pixels where some channel's shading fell below epsilon.
    pub floor_mask: Mask,
}

fn check_frame(image: &Image, camera: &Camera) -> Result<()> {
    if image.height != camera.height || image.width != camera.width {
        return Err(Error::Invalid(format!(
            "image is {}x{} but camera is {}x{}",
            image.height, image.width, camera.height, camera.width
        )));
    }
    Ok(())
}

fn residual(bare: &Image, unlit: &Image, coverage: &Mask) -> Image {
    Grid::from_fn(bare.height, bare.width, |y, x| {
        if *coverage.get(y, x) {
            bare.get(y, x) - unlit.get(y, x)
        } else {
            Vec3::zeros()
        }
    })
}

/// Divides the image by the fitted shading. Covered pixels become
/// `clamp(image / max(S, epsilon))` per channel; background passes through.
pub fn delight(image: &Image, fit: &FitResult, model: &MorphableModel, camera: &Camera, epsilon: f64) -> Result<BareSkinResult> {
    check_frame(image, camera)?;
    if !(epsilon > 0.0) {
        return Err(Error::Invalid("epsilon must be positive".into()));
    }
    let scene = Scene::new(model, fit.coefficients.clone(), Some(fit.gamma), *camera);
    let eval = evaluate_scene(&scene)?;
    let out = rasterize(camera, &eval.world, &model.topology);
    if out.coverage.count() == 0 {
        return Err(Error::Invalid("fitted head covers no pixel".into()));
    }
    let faces = model.topology.faces();
    let (h, w) = (image.height, image.width);
    let mut bare = image.clone();
    let mut shading = Grid::filled(h, w, Vec3::zeros());
    let mut floor_mask = Grid::filled(h, w, false);
    for i in 0..image.len() {
        let t = out.tri_id.data[i];
        if t < 0 {
            continue;
        }
        let f = &faces[t as usize];
        let b = &out.bary.data[i];
        let n = eval.normals[f[0] as usize] * b[0] + eval.normals[f[1] as usize] * b[1] + eval.normals[f[2] as usize] * b[2];
        let len = n.norm();
        let s = if len > 0.0 {
            irradiance_from_basis(&fit.gamma, &sh_basis_unchecked(&(n / len)))
        } else {
            Vec3::zeros()
        };
        shading.data[i] = s;
        floor_mask.data[i] = s.iter().any(|&v| v < epsilon);
        bare.data[i] = image.data[i].zip_map(&s, |p, s| (p / s.max(epsilon)).clamp(0.0, 1.0));
    }
    let unlit = render(&scene.with_lighting(None))?;
    Ok(BareSkinResult {
        detail_residual: residual(&bare, &unlit.color, &out.coverage),
        bare_image: bare,
        shading_map: shading,
        gain: Vec3::repeat(1.0),
        coverage: out.coverage,
        floor_mask,
    })
}

/// Scales each channel on coverage so its mean matches the unlit model render.
pub fn match_skin_tone(bare_image: &Image, fit: &FitResult, model: &MorphableModel, camera: &Camera) -> Result<BareSkinResult> {
    check_frame(bare_image, camera)?;
    let unlit = render(&Scene::new(model, fit.coefficients.clone(), None, *camera))?;
    let coverage = unlit.coverage.clone();
    let n = coverage.count();
    if n == 0 {
        return Err(Error::Invalid("fitted head covers no pixel".into()));
    }
    let mut sum_render = Vec3::zeros();
    let mut sum_bare = Vec3::zeros();
    for i in 0..bare_image.len() {
        if coverage.data[i] {
            sum_render += unlit.color.data[i];
            sum_bare += bare_image.data[i];
        }
    }
    if sum_bare.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Invalid("bare image has a zero channel mean over the face".into()));
    }
    let gain = sum_render.component_div(&sum_bare);
    if gain.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
        return Err(Error::Invalid("skin-tone gain is not positive".into()));
    }
    let mut out = bare_image.clone();
    for i in 0..out.len() {
        if coverage.data[i] {
            out.data[i] = bare_image.data[i].component_mul(&gain).map(|v| v.clamp(0.0, 1.0));
        }
    }
    let (h, w) = (out.height, out.width);
    Ok(BareSkinResult {
        detail_residual: residual(&out, &unlit.color, &coverage),
        bare_image: out,
        shading_map: Grid::filled(h, w, Vec3::zeros()),
        gain,
        floor_mask: Grid::filled(h, w, false),
        coverage,
    })
}

/// Normalized Gaussian blur restricted to `mask`: masked texels are averaged
/// with Gaussian weights over masked neighbors only. Unmasked texels are zero.
pub fn masked_blur(image: &Image, mask: &Mask, sigma: f64) -> Image {
    let (h, w) = (image.height, image.width);
    if !(sigma > 0.0) {
        return Grid::from_fn(h, w, |y, x| if *mask.get(y, x) { *image.get(y, x) } else { Vec3::zeros() });
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    // Separable pass over (value * mask, mask) pairs.
    let src: Vec<(Vec3, f64)> = image
        .data
        .iter()
        .zip(&mask.data)
        .map(|(v, &m)| if m { (*v, 1.0) } else { (Vec3::zeros(), 0.0) })
        .collect();
    let pass = |src: &[(Vec3, f64)], horizontal: bool| -> Vec<(Vec3, f64)> {
        let mut dst = vec![(Vec3::zeros(), 0.0); h * w];
        for y in 0..h {
            for x in 0..w {
                let (pos, len) = if horizontal { (x, w) } else { (y, h) };
                let lo = pos.saturating_sub(radius);
                let hi = (pos + radius).min(len - 1);
                let mut acc = (Vec3::zeros(), 0.0);
                for k in lo..=hi {
                    let wt = kernel[k + radius - pos];
                    let s = if horizontal { &src[y * w + k] } else { &src[k * w + x] };
                    acc.0 += s.0 * wt;
                    acc.1 += s.1 * wt;
                }
                dst[y * w + x] = acc;
            }
        }
        dst
    };
    let blurred = pass(&pass(&src, true), false);
    Grid {
        height: h,
        width: w,
        data: blurred
            .iter()
            .zip(&mask.data)
            .map(|((v, m), &inside)| if inside && *m > 0.0 { v / *m } else { Vec3::zeros() })
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct DemakeupResult {
    pub texture: UvTexture,
    /// Appearance coefficients of the low-frequency layer.
    pub delta: DVector<f64>,
    /// Model appearance at `delta`, splatted to UV.
    pub low_frequency: Image,
    /// Input minus its masked blur on visible texels.
    pub detail: Image,
}

/// Projects a UV texture onto the appearance subspace.
///
/// `delta` minimizes the squared difference between the splatted linear
/// appearance and the input over visible texels plus
/// `lambda * sum (delta_k / sigma_k)^2`. The output keeps the input's
/// high-pass detail on visible texels and replaces its low-pass part with
/// that of the model layer, `out = input + blur(model - input)`, blurred
/// with sigma equal to 2% of the texture side. Invisible texels take the
/// model layer.
pub fn demakeup_subspace(uv_albedo: &UvTexture, model: &MorphableModel, lambda: f64) -> Result<DemakeupResult> {
    if !(lambda >= 0.0) {
        return Err(Error::Invalid("lambda must be nonnegative".into()));
    }
    let topo = &model.topology;
    let layout = UvLayout::new(topo, uv_albedo.size)?;
    let visible: Mask = uv_albedo.visibility.and(&layout.coverage());
    let k = model.k_app();

    let faces = topo.faces();
    let mut touched = vec![false; topo.vertex_count()];
    let mut ata = DMatrix::<f64>::zeros(k, k);
    let mut atb = DVector::<f64>::zeros(k);
    let mut row = DMatrix::<f64>::zeros(3, k);
    for i in 0..visible.len() {
        if !visible.data[i] {
            continue;
        }
        let f = &faces[layout.face.data[i] as usize];
        let b = &layout.bary.data[i];
        row.fill(0.0);
        let mut target = uv_albedo.color.data[i];
        for m in 0..3 {
            let v = f[m] as usize;
            if b[m] > 0.0 {
                touched[v] = true;
            }
            row += model.basis_app.rows(3 * v, 3) * b[m];
            target -= Vec3::new(
                model.mean_appearance[3 * v],
                model.mean_appearance[3 * v + 1],
                model.mean_appearance[3 * v + 2],
            ) * b[m];
        }
        ata += row.transpose() * &row;
        atb += row.transpose() * target;
    }
    let n_visible = touched.iter().filter(|t| **t).count();
    if n_visible < k {
        return Err(Error::Underdetermined(format!(
            "{n_visible} visible vertices for {k} appearance modes"
        )));
    }
    for j in 0..k {
        let s = model.sigma_app[j];
        if s > 0.0 {
            ata[(j, j)] += lambda / (s * s);
        } else {
            ata.row_mut(j).fill(0.0);
            ata.column_mut(j).fill(0.0);
            ata[(j, j)] = 1.0;
            atb[j] = 0.0;
        }
    }
    let delta = match ata.clone().cholesky() {
        Some(ch) => ch.solve(&atb),
        None => ata
            .svd(true, true)
            .solve(&atb, 1e-12)
            .map_err(|e| Error::Numerical(format!("appearance projection failed: {e}")))?,
    };
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("appearance projection produced non-finite coefficients".into()));
    }

    let colors = model.evaluate_appearance(&delta)?.colors;
    let low = layout.splat(topo, &colors);
    let sigma = DETAIL_SIGMA_FRACTION * uv_albedo.size as f64;
    let diff = Grid {
        height: low.height,
        width: low.width,
        data: low.data.iter().zip(&uv_albedo.color.data).map(|(m, x)| m - x).collect(),
    };
    let blurred_diff = masked_blur(&diff, &visible, sigma);
    let blurred_input = masked_blur(&uv_albedo.color, &visible, sigma);
    let mut color = low.clone();
    let mut detail = Grid::filled(low.height, low.width, Vec3::zeros());
    for i in 0..color.len() {
        if visible.data[i] {
            color.data[i] = (uv_albedo.color.data[i] + blurred_diff.data[i]).map(|v| v.clamp(0.0, 1.0));
            detail.data[i] = uv_albedo.color.data[i] - blurred_input.data[i];
        }
    }
    Ok(DemakeupResult {
        texture: UvTexture {
            size: uv_albedo.size,
            color,
            visibility: uv_albedo.visibility.clone(),
        },
        delta,
        low_frequency: low,
        detail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_of_constant_under_mask_is_constant() {
        let img = Grid::filled(20, 20, Vec3::new(0.2, 0.4, 0.6));
        let mask = Grid::from_fn(20, 20, |y, x| (x + y) % 3 != 0);
        let out = masked_blur(&img, &mask, 2.0);
        for i in 0..out.len() {
            if mask.data[i] {
                assert!((out.data[i] - img.data[i]).norm() < 1e-12);
            } else {
                assert_eq!(out.data[i], Vec3::zeros());
            }
        }
    }

    #[test]
    fn blur_matches_direct_normalized_convolution() {
        let img = Grid::from_fn(9, 7, |y, x| Vec3::new((y * 7 + x) as f64, (x * x) as f64, y as f64));
        let mask = Grid::from_fn(9, 7, |y, x| !(y == 4 && x > 1));
        let sigma = 1.3;
        let out = masked_blur(&img, &mask, sigma);
        let r = (3.0 * sigma).ceil() as i64;
        for y in 0..9i64 {
            for x in 0..7i64 {
                if !*mask.get(y as usize, x as usize) {
                    continue;
                }
                let (mut acc, mut ws) = (Vec3::zeros(), 0.0);
                for yy in (y - r).max(0)..=(y + r).min(8) {
                    for xx in (x - r).max(0)..=(x + r).min(6) {
                        if *mask.get(yy as usize, xx as usize) {
                            let d2 = ((yy - y).pow(2) + (xx - x).pow(2)) as f64;
                            let wt = (-d2 / (2.0 * sigma * sigma)).exp();
                            acc += img.get(yy as usize, xx as usize) * wt;
                            ws += wt;
                        }
                    }
                }
                assert!((out.get(y as usize, x as usize) - acc / ws).norm() < 1e-9);
            }
        }
    }
}
