//! UV texture space: rasterizing the mesh's UV layout, unwarping images
//! into textures with depth-tested visibility, and rendering textures back.
//!
//! Texel `(row, col)` of a `T×T` texture sits at `uv = ((col + 0.5) / T,
//! (row + 0.5) / T)`.

use std::path::Path;

use crate::image::{write_mask_png, write_png, Grid, Image, Mask};
use crate::morphable_model::{CoefficientVector, MeshTopology, MorphableModel};
use crate::rasterizer::{rasterize, Camera, RenderOutput};
use crate::{Error, Result, Vec3};

/// A square texture on the model's UV layout with per-texel visibility.
/// Invisible texels hold the fill value (the mean appearance splatted to UV).
#[derive(Debug, Clone, PartialEq)]
pub struct UvTexture {
    pub size: usize,
    pub color: Image,
    pub visibility: Mask,
}

impl UvTexture {
    /// Fully visible texture wrapping `color`.
    pub fn from_image(color: Image) -> Result<Self> {
        if color.height != color.width {
            return Err(Error::Invalid(format!(
                "texture must be square, got {}x{}",
                color.height, color.width
            )));
        }
        Ok(UvTexture {
            size: color.height,
            visibility: Grid::filled(color.height, color.width, true),
            color,
        })
    }

    /// Writes `<stem>.png` and the `<stem>_visibility.png` sidecar into `dir`.
    pub fn write_png(&self, dir: &Path, stem: &str) -> Result<()> {
        write_png(&self.color, &dir.join(format!("{stem}.png")))?;
        write_mask_png(&self.visibility, &dir.join(format!("{stem}_visibility.png")))
    }
}

/// Per-texel owning face and barycentric weights of the UV layout.
///
/// Faces whose UV triangle is degenerate or wound against the majority
/// (the wrap-around band at the back of the head) are left out.
#[derive(Debug, Clone)]
pub struct UvLayout {
    pub size: usize,
    pub face: Grid<i32>,
    pub bary: Grid<[f64; 3]>,
}

fn signed_area(a: &[f64; 2], b: &[f64; 2], c: &[f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
}

impl UvLayout {
    pub fn new(topo: &MeshTopology, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::Invalid("texture size must be positive".into()));
        }
        let uv = topo.uv_coords();
        let areas: Vec<f64> = topo
            .faces()
            .iter()
            .map(|f| signed_area(&uv[f[0] as usize], &uv[f[1] as usize], &uv[f[2] as usize]))
            .collect();
        let positive = areas.iter().filter(|a| **a > 0.0).count();
        let orientation = if 2 * positive >= areas.len() { 1.0 } else { -1.0 };
        let min_area = 1e-14;

        let mut face = Grid::filled(size, size, -1i32);
        let mut bary = Grid::filled(size, size, [0.0; 3]);
        let t = size as f64;
        for (fi, f) in topo.faces().iter().enumerate() {
            let area = areas[fi] * orientation;
            if !(area > min_area) {
                continue;
            }
            let p = f.map(|i| [uv[i as usize][0] * t, uv[i as usize][1] * t]);
            let lo_x = p.iter().map(|q| q[0]).fold(f64::MAX, f64::min);
            let hi_x = p.iter().map(|q| q[0]).fold(f64::MIN, f64::max);
            let lo_y = p.iter().map(|q| q[1]).fold(f64::MAX, f64::min);
            let hi_y = p.iter().map(|q| q[1]).fold(f64::MIN, f64::max);
            let c0 = ((lo_x - 0.5).floor().max(0.0)) as usize;
            let c1 = ((hi_x - 0.5).ceil().max(0.0) as usize).min(size - 1);
            let r0 = ((lo_y - 0.5).floor().max(0.0)) as usize;
            let r1 = ((hi_y - 0.5).ceil().max(0.0) as usize).min(size - 1);
            let total = signed_area(&p[0], &p[1], &p[2]);
            for row in r0..=r1 {
                for col in c0..=c1 {
                    let q = [col as f64 + 0.5, row as f64 + 0.5];
                    let b = [
                        signed_area(&q, &p[1], &p[2]) / total,
                        signed_area(&p[0], &q, &p[2]) / total,
                        signed_area(&p[0], &p[1], &q) / total,
                    ];
                    if b.iter().any(|&v| !(v >= 0.0)) {
                        continue;
                    }
                    let i = face.index(row, col);
                    if face.data[i] < 0 {
                        face.data[i] = fi as i32;
                        bary.data[i] = b;
                    }
                }
            }
        }
        Ok(UvLayout { size, face, bary })
    }

    /// Texels covered by some UV triangle.
    pub fn coverage(&self) -> Mask {
        self.face.map(|&f| f >= 0)
    }

    /// Interpolates per-vertex values into the layout; uncovered texels are zero.
    pub fn splat(&self, topo: &MeshTopology, values: &[Vec3]) -> Image {
        let faces = topo.faces();
        let mut out = Grid::filled(self.size, self.size, Vec3::zeros());
        for i in 0..out.len() {
            let f = self.face.data[i];
            if f >= 0 {
                let f = &faces[f as usize];
                let b = &self.bary.data[i];
                out.data[i] = values[f[0] as usize] * b[0] + values[f[1] as usize] * b[1] + values[f[2] as usize] * b[2];
            }
        }
        out
    }
}

/// Mean appearance splatted to a `size×size` layout.
pub fn fill_texture(model: &MorphableModel, layout: &UvLayout) -> Result<Image> {
    let mean = model.evaluate_appearance(&nalgebra::DVector::zeros(model.k_app()))?.colors;
    Ok(layout.splat(&model.topology, &mean))
}

/// Image position of every visible texel under a fitted pose.
#[derive(Debug, Clone)]
pub struct UvCorrespondence {
    pub layout: UvLayout,
    /// Pixel coordinates for visible texels, `None` otherwise.
    pub pixel: Grid<Option<[f64; 2]>>,
    pub render: RenderOutput,
}

impl UvCorrespondence {
    pub fn visibility(&self) -> Mask {
        self.pixel.map(|p| p.is_some())
    }
}

/// Visibility tolerance on depth: `1e-3 (far - near)`.
pub fn depth_tolerance(camera: &Camera) -> f64 {
    1e-3 * (camera.far - camera.near)
}

/// Maps texels to image pixels. A texel is visible when its surface point
/// projects inside the frame, its face points toward the camera, and its
/// depth agrees within `tolerance` with the visible surface at that pixel.
/// The visible surface depth is taken along the texel's own ray on the
/// plane of the face the renderer assigned to that pixel.
pub fn correspondence(
    coeffs: &CoefficientVector,
    model: &MorphableModel,
    camera: &Camera,
    size: usize,
    tolerance: f64,
) -> Result<UvCorrespondence> {
    camera.validate()?;
    let topo = &model.topology;
    let world = model.evaluate_shape(coeffs)?;
    let render = rasterize(camera, &world, topo);
    let layout = UvLayout::new(topo, size)?;
    let faces = topo.faces();
    let mut pixel = Grid::filled(size, size, None);
    for i in 0..pixel.len() {
        let fi = layout.face.data[i];
        if fi < 0 {
            continue;
        }
        let f = &faces[fi as usize];
        let x = f.map(|k| world[k as usize]);
        let n = (x[1] - x[0]).cross(&(x[2] - x[0]));
        if !(n.dot(&x[0]) < 0.0) {
            continue;
        }
        let b = &layout.bary.data[i];
        let p = x[0] * b[0] + x[1] * b[1] + x[2] * b[2];
        let Some(q) = camera.project_point(&p) else { continue };
        if !(q.x >= 0.0 && q.y >= 0.0 && q.x < camera.width as f64 && q.y < camera.height as f64) {
            continue;
        }
        let (row, col) = (q.y as usize, q.x as usize);
        let owner = *render.tri_id.get(row, col);
        if owner < 0 {
            continue;
        }
        let o = faces[owner as usize].map(|k| world[k as usize]);
        let on = (o[1] - o[0]).cross(&(o[2] - o[0]));
        let d = Vec3::new(
            (q.x - camera.principal_point[0]) / camera.focal,
            (q.y - camera.principal_point[1]) / camera.focal,
            1.0,
        );
        let denom = on.dot(&d);
        if denom == 0.0 {
            continue;
        }
        let surface_depth = on.dot(&o[0]) / denom;
        if (surface_depth - p.z).abs() <= tolerance {
            pixel.data[i] = Some([q.x, q.y]);
        }
    }
    Ok(UvCorrespondence { layout, pixel, render })
}

/// Unwarps `image` into a `size×size` texture under the fitted coefficients.
pub fn unwarp(image: &Image, coeffs: &CoefficientVector, model: &MorphableModel, camera: &Camera, size: usize) -> Result<UvTexture> {
    if image.height != camera.height || image.width != camera.width {
        return Err(Error::Invalid(format!(
            "image is {}x{} but camera is {}x{}",
            image.height, image.width, camera.height, camera.width
        )));
    }
    let corr = correspondence(coeffs, model, camera, size, depth_tolerance(camera))?;
    Ok(unwarp_with(image, &corr, &fill_texture(model, &corr.layout)?))
}

pub fn unwarp_with(image: &Image, corr: &UvCorrespondence, fill: &Image) -> UvTexture {
    let size = corr.layout.size;
    let mut color = fill.clone();
    for i in 0..color.len() {
        if let Some([u, v]) = corr.pixel.data[i] {
            color.data[i] = image.sample_bilinear(u, v);
        }
    }
    UvTexture {
        size,
        color,
        visibility: corr.visibility(),
    }
}

/// Samples a texture at `uv`, weighting the four bilinear neighbors by
/// visibility. Returns `None` when no neighbor is visible.
pub fn sample_visible(texture: &UvTexture, uv: [f64; 2]) -> Option<Vec3> {
    let t = texture.size;
    let x = (uv[0] * t as f64 - 0.5).clamp(0.0, (t - 1) as f64);
    let y = (uv[1] * t as f64 - 0.5).clamp(0.0, (t - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(t - 1), (y0 + 1).min(t - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut acc = Vec3::zeros();
    let mut wsum = 0.0;
    for (r, c, w) in [
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x1, fx * (1.0 - fy)),
        (y1, x0, (1.0 - fx) * fy),
        (y1, x1, fx * fy),
    ] {
        if w > 0.0 && *texture.visibility.get(r, c) {
            acc += texture.color.get(r, c) * w;
            wsum += w;
        }
    }
    (wsum > 0.0).then(|| acc / wsum)
}

/// Texture rendered back into the image plane.
#[derive(Debug, Clone)]
pub struct Rewarp {
    pub color: Image,
    pub coverage: Mask,
    /// Covered pixels whose texture lookup touched a visible texel.
    pub valid: Mask,
}

/// Renders the mesh with the texture looked up at perspective-correct UVs.
/// Invisible texels only contribute where no visible neighbor exists; such
/// pixels get the fill color and are left out of `valid`. Background is
/// mid-gray.
pub fn rewarp(texture: &UvTexture, coeffs: &CoefficientVector, model: &MorphableModel, camera: &Camera) -> Result<Rewarp> {
    camera.validate()?;
    let topo = &model.topology;
    let world = model.evaluate_shape(coeffs)?;
    let out = rasterize(camera, &world, topo);
    let uv = topo.uv_coords();
    let faces = topo.faces();
    let mut color = Grid::filled(camera.height, camera.width, Vec3::repeat(0.5));
    let mut valid = Grid::filled(camera.height, camera.width, false);
    for i in 0..color.len() {
        let fi = out.tri_id.data[i];
        if fi < 0 {
            continue;
        }
        let f = &faces[fi as usize];
        let b = &out.bary.data[i];
        let mut p = [0.0; 2];
        for k in 0..3 {
            p[0] += b[k] * uv[f[k] as usize][0];
            p[1] += b[k] * uv[f[k] as usize][1];
        }
        match sample_visible(texture, p) {
            Some(c) => {
                color.data[i] = c;
                valid.data[i] = true;
            }
            None => {
                let t = texture.size as f64;
                color.data[i] = texture.color.sample_bilinear(p[0] * t, p[1] * t);
            }
        }
    }
    Ok(Rewarp {
        color,
        coverage: out.coverage,
        valid,
    })
}

/// Intersects texture visibility with an image-space mask carried through
/// the unwarp correspondence; newly hidden texels take the fill value.
pub fn apply_occlusion(
    texture: &UvTexture,
    mask: &Mask,
    coeffs: &CoefficientVector,
    model: &MorphableModel,
    camera: &Camera,
) -> Result<UvTexture> {
    if mask.height != camera.height || mask.width != camera.width {
        return Err(Error::Invalid(format!(
            "mask is {}x{} but camera is {}x{}",
            mask.height, mask.width, camera.height, camera.width
        )));
    }
    let corr = correspondence(coeffs, model, camera, texture.size, depth_tolerance(camera))?;
    let fill = fill_texture(model, &corr.layout)?;
    Ok(occlude_with(texture, mask, &corr, &fill))
}

pub fn occlude_with(texture: &UvTexture, mask: &Mask, corr: &UvCorrespondence, fill: &Image) -> UvTexture {
    let mut out = texture.clone();
    for i in 0..out.color.len() {
        if !out.visibility.data[i] {
            continue;
        }
        let keep = match corr.pixel.data[i] {
            Some([u, v]) => *mask.get(v as usize, u as usize),
            None => false,
        };
        if !keep {
            out.visibility.data[i] = false;
            out.color.data[i] = fill.data[i];
        }
    }
    out
}
