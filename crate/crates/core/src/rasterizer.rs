//! Z-buffered pinhole rasterizer with analytic gradients under frozen coverage.
//!
//! Camera space has the camera at the origin looking down `+z`; a point
//! projects to `u = f x / z + cx`, `v = f y / z + cy` with pixel `(row, col)`
//! centered at `(col + 0.5, row + 0.5)`.
//!
//! Perspective-correct barycentrics come from the pixel ray `d`: for a
//! triangle `X0 X1 X2` the weights are proportional to the triple products
//! `d . (X1 x X2)`, `d . (X2 x X0)`, `d . (X0 x X1)`, which is the barycentric
//! coordinate of the ray/plane intersection.
//!
//! Shading is deferred: albedo and vertex normals are interpolated per
//! pixel and the SH irradiance is evaluated at the interpolated normal.
//! Gradients flow through shading, interpolation and the barycentrics back
//! to vertex positions, normals and coefficients, with the pixel-to-triangle
//! assignment held fixed. Silhouette motion contributes nothing.

use std::hash::{Hash, Hasher};

use nalgebra::{DVector, Matrix2x3, Vector2};
use serde::{Deserialize, Serialize};

use crate::image::{Grid, Image, Mask};
use crate::morphable_model::{axis_angle_rotation, flatten, unflatten, CoefficientVector, MeshTopology, MorphableModel};
use crate::shading::{
    irradiance_from_basis, sh_basis_gradient, sh_basis_unchecked, shade_with_irradiance, vertex_normals_backward, LightingCoefficients,
    GAMMA_LEN, SH_COUNT,
};
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub principal_point: [f64; 2],
    pub height: usize,
    pub width: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Focal length `1.2 * max(H, W)`, principal point at the image center.
    pub fn default_for(height: usize, width: usize) -> Self {
        Camera {
            focal: 1.2 * height.max(width) as f64,
            principal_point: [width as f64 / 2.0, height as f64 / 2.0],
            height,
            width,
            near: 0.1,
            far: 20.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::Invalid("camera focal must be positive".into()));
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(Error::Invalid("camera needs 0 < near < far".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Invalid("camera image size must be nonzero".into()));
        }
        Ok(())
    }

    /// Pixel coordinates of a camera-space point, or `None` at or behind the near plane.
    pub fn project_point(&self, p: &Vec3) -> Option<Vector2<f64>> {
        if p.z <= self.near {
            return None;
        }
        Some(Vector2::new(
            self.focal * p.x / p.z + self.principal_point[0],
            self.focal * p.y / p.z + self.principal_point[1],
        ))
    }

    /// Jacobian of [`Self::project_point`] with respect to the point.
    pub fn project_jacobian(&self, p: &Vec3) -> Matrix2x3<f64> {
        let f = self.focal;
        let iz = 1.0 / p.z;
        Matrix2x3::new(f * iz, 0.0, -f * p.x * iz * iz, 0.0, f * iz, -f * p.y * iz * iz)
    }

    /// Direction through the center of pixel `(row, col)`, scaled to unit depth.
    #[inline]
    pub fn ray(&self, row: usize, col: usize) -> Vec3 {
        Vec3::new(
            (col as f64 + 0.5 - self.principal_point[0]) / self.focal,
            (row as f64 + 0.5 - self.principal_point[1]) / self.focal,
            1.0,
        )
    }

    pub fn diagonal_sq(&self) -> f64 {
        (self.height * self.height + self.width * self.width) as f64
    }

    fn hash_into<H: Hasher>(&self, h: &mut H) {
        for v in [self.focal, self.principal_point[0], self.principal_point[1], self.near, self.far] {
            v.to_bits().hash(h);
        }
        self.height.hash(h);
        self.width.hash(h);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub pixels: Vec<Vector2<f64>>,
    pub depths: Vec<f64>,
    /// False for points at or behind the near plane.
    pub valid: Vec<bool>,
}

pub fn project(camera: &Camera, points: &[Vec3]) -> Projection {
    let mut out = Projection {
        pixels: Vec::with_capacity(points.len()),
        depths: Vec::with_capacity(points.len()),
        valid: Vec::with_capacity(points.len()),
    };
    for p in points {
        let q = camera.project_point(p);
        out.valid.push(q.is_some());
        out.pixels.push(q.unwrap_or_else(Vector2::zeros));
        out.depths.push(p.z);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: Image,
    pub depth: Grid<f64>,
    pub coverage: Mask,
    /// Owning face per pixel, `-1` for background.
    pub tri_id: Grid<i32>,
    pub bary: Grid<[f64; 3]>,
    pub(crate) fingerprint: u64,
}

impl RenderOutput {
    fn empty(camera: &Camera, background: Vec3) -> Self {
        let (h, w) = (camera.height, camera.width);
        RenderOutput {
            color: Grid::filled(h, w, background),
            depth: Grid::filled(h, w, camera.far),
            coverage: Grid::filled(h, w, false),
            tri_id: Grid::filled(h, w, -1),
            bary: Grid::filled(h, w, [0.0; 3]),
            fingerprint: 0,
        }
    }

    pub fn covered_count(&self) -> usize {
        self.coverage.count()
    }
}

/// Barycentric weights `(b, S)` of the ray `d` against a triangle, where `S`
/// is the normalizer `d . n` (negative for front-facing triangles).
#[inline]
fn ray_weights(d: &Vec3, x: &[Vec3; 3]) -> ([f64; 3], f64) {
    let t = [d.dot(&x[1].cross(&x[2])), d.dot(&x[2].cross(&x[0])), d.dot(&x[0].cross(&x[1]))];
    let s = t[0] + t[1] + t[2];
    ([t[0] / s, t[1] / s, t[2] / s], s)
}

#[inline]
fn face_vertices(positions: &[Vec3], f: &[u32; 3]) -> [Vec3; 3] {
    [positions[f[0] as usize], positions[f[1] as usize], positions[f[2] as usize]]
}

/// Front-facing with all three vertices beyond the near plane.
#[inline]
fn rasterizable(camera: &Camera, x: &[Vec3; 3]) -> bool {
    if x.iter().any(|p| p.z <= camera.near) {
        return false;
    }
    let n = (x[1] - x[0]).cross(&(x[2] - x[0]));
    n.dot(&x[0]) < 0.0
}

/// Geometry buffers of a mesh given in camera space. Background color is
/// mid-gray. Back faces are culled; depth ties go to the lower face index.
pub fn rasterize(camera: &Camera, positions: &[Vec3], topo: &MeshTopology) -> RenderOutput {
    let mut out = RenderOutput::empty(camera, Vec3::repeat(0.5));
    let (h, w) = (camera.height as i64, camera.width as i64);
    for (fi, f) in topo.faces().iter().enumerate() {
        let x = face_vertices(positions, f);
        if !rasterizable(camera, &x) {
            continue;
        }
        let q: Vec<Vector2<f64>> = x.iter().map(|p| camera.project_point(p).unwrap()).collect();
        let (mut lo_u, mut hi_u, mut lo_v, mut hi_v) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &q {
            lo_u = lo_u.min(p.x);
            hi_u = hi_u.max(p.x);
            lo_v = lo_v.min(p.y);
            hi_v = hi_v.max(p.y);
        }
        let c0 = ((lo_u - 0.5).floor() as i64 - 1).max(0);
        let c1 = ((hi_u - 0.5).ceil() as i64 + 1).min(w - 1);
        let r0 = ((lo_v - 0.5).floor() as i64 - 1).max(0);
        let r1 = ((hi_v - 0.5).ceil() as i64 + 1).min(h - 1);
        for row in r0..=r1 {
            for col in c0..=c1 {
                let (row, col) = (row as usize, col as usize);
                let d = camera.ray(row, col);
                let (b, s) = ray_weights(&d, &x);
                if !(s < 0.0) || b.iter().any(|&v| !(v >= 0.0)) {
                    continue;
                }
                let depth = b[0] * x[0].z + b[1] * x[1].z + b[2] * x[2].z;
                if depth < camera.near || depth > camera.far {
                    continue;
                }
                let i = out.depth.index(row, col);
                if depth < out.depth.data[i] || out.tri_id.data[i] < 0 {
                    out.depth.data[i] = depth;
                    out.tri_id.data[i] = fi as i32;
                    out.bary.data[i] = b;
                    out.coverage.data[i] = true;
                }
            }
        }
    }
    out
}

/// Everything needed to render: model, coefficients, optional lighting and camera.
#[derive(Debug, Clone)]
pub struct Scene<'a> {
    pub model: &'a MorphableModel,
    pub coeffs: CoefficientVector,
    /// `None` renders the unlit albedo.
    pub lighting: Option<LightingCoefficients>,
    pub camera: Camera,
    pub background: Vec3,
    pub clamp_negative_irradiance: bool,
}

impl<'a> Scene<'a> {
    pub fn new(model: &'a MorphableModel, coeffs: CoefficientVector, lighting: Option<LightingCoefficients>, camera: Camera) -> Self {
        Scene {
            model,
            coeffs,
            lighting,
            camera,
            background: Vec3::repeat(0.5),
            clamp_negative_irradiance: true,
        }
    }

    pub fn with_lighting(&self, lighting: Option<LightingCoefficients>) -> Self {
        Scene { lighting, ..self.clone() }
    }

    fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for v in self.coeffs.to_flat() {
            v.to_bits().hash(&mut h);
        }
        match &self.lighting {
            Some(g) => g.gamma.iter().for_each(|v| v.to_bits().hash(&mut h)),
            None => u64::MAX.hash(&mut h),
        }
        self.camera.hash_into(&mut h);
        self.background.iter().for_each(|v| v.to_bits().hash(&mut h));
        self.clamp_negative_irradiance.hash(&mut h);
        (self.model as *const MorphableModel as usize).hash(&mut h);
        self.model.vertex_count().hash(&mut h);
        h.finish().max(1)
    }
}

/// Per-vertex quantities of an evaluated scene.
#[derive(Debug, Clone)]
pub struct SceneEval {
    /// Morphed shape before the rigid transform.
    pub morphed: Vec<Vec3>,
    /// Camera-space vertex positions.
    pub world: Vec<Vec3>,
    /// Clamped per-vertex albedo.
    pub albedo: Vec<Vec3>,
    /// Unit vertex normals in camera space (empty for unlit scenes).
    pub normals: Vec<Vec3>,
}

pub fn evaluate_scene(scene: &Scene) -> Result<SceneEval> {
    scene.camera.validate()?;
    let model = scene.model;
    let morphed = unflatten(&model.morph(&scene.coeffs)?);
    let rot = axis_angle_rotation(&scene.coeffs.rotation).matrix;
    let world: Vec<Vec3> = morphed.iter().map(|p| rot * p + scene.coeffs.translation).collect();
    let albedo = model.evaluate_appearance(&scene.coeffs.delta)?.colors;
    let normals = if scene.lighting.is_some() {
        crate::shading::vertex_normals(&world, &model.topology)?
    } else {
        Vec::new()
    };
    Ok(SceneEval {
        morphed,
        world,
        albedo,
        normals,
    })
}

#[inline]
fn interpolate(values: &[Vec3], f: &[u32; 3], b: &[f64; 3]) -> Vec3 {
    values[f[0] as usize] * b[0] + values[f[1] as usize] * b[1] + values[f[2] as usize] * b[2]
}

fn shade_pixel(scene: &Scene, eval: &SceneEval, f: &[u32; 3], b: &[f64; 3]) -> Vec3 {
    let a = interpolate(&eval.albedo, f, b);
    match &scene.lighting {
        None => a,
        Some(g) => {
            let n = interpolate(&eval.normals, f, b);
            let len = n.norm();
            if !(len > 0.0) {
                return Vec3::zeros();
            }
            let irr = irradiance_from_basis(g, &sh_basis_unchecked(&(n / len)));
            shade_with_irradiance(&a, &irr, scene.clamp_negative_irradiance)
        }
    }
}

/// Renders the scene: evaluates the model, rasterizes and shades each covered pixel.
pub fn render(scene: &Scene) -> Result<RenderOutput> {
    let eval = evaluate_scene(scene)?;
    Ok(render_evaluated(scene, &eval))
}

pub fn render_evaluated(scene: &Scene, eval: &SceneEval) -> RenderOutput {
    let mut out = rasterize(&scene.camera, &eval.world, &scene.model.topology);
    let faces = scene.model.topology.faces();
    for i in 0..out.color.len() {
        let t = out.tri_id.data[i];
        out.color.data[i] = if t >= 0 {
            shade_pixel(scene, eval, &faces[t as usize], &out.bary.data[i])
        } else {
            scene.background
        };
    }
    out.fingerprint = scene.fingerprint();
    out
}

/// Renders an explicit camera-space mesh with per-vertex albedo, shaded the
/// same way as [`render`]. Used for subjects that lie outside the model span.
pub fn render_mesh(
    camera: &Camera,
    positions: &[Vec3],
    albedo: &[Vec3],
    topo: &MeshTopology,
    lighting: Option<&LightingCoefficients>,
) -> Result<RenderOutput> {
    camera.validate()?;
    let n = topo.vertex_count();
    if positions.len() != n || albedo.len() != n {
        return Err(Error::Invalid(format!(
            "mesh has {} positions and {} colors for {n} vertices",
            positions.len(),
            albedo.len()
        )));
    }
    let normals = match lighting {
        Some(_) => crate::shading::vertex_normals(positions, topo)?,
        None => Vec::new(),
    };
    let mut out = rasterize(camera, positions, topo);
    let faces = topo.faces();
    for i in 0..out.color.len() {
        let t = out.tri_id.data[i];
        if t < 0 {
            continue;
        }
        let f = &faces[t as usize];
        let b = &out.bary.data[i];
        let a = interpolate(albedo, f, b).map(|v| v.clamp(0.0, 1.0));
        out.color.data[i] = match lighting {
            None => a,
            Some(g) => {
                let nrm = interpolate(&normals, f, b);
                let len = nrm.norm();
                if len > 0.0 {
                    shade_with_irradiance(&a, &irradiance_from_basis(g, &sh_basis_unchecked(&(nrm / len))), true)
                } else {
                    Vec3::zeros()
                }
            }
        };
    }
    Ok(out)
}

/// Renders with a fixed pixel-to-face assignment: barycentrics are
/// recomputed from the current geometry for every pixel that `assignment`
/// marks as covered, even if the face would no longer own it.
pub fn render_with_assignment(scene: &Scene, assignment: &Grid<i32>) -> Result<RenderOutput> {
    let eval = evaluate_scene(scene)?;
    let cam = &scene.camera;
    let mut out = RenderOutput::empty(cam, scene.background);
    let faces = scene.model.topology.faces();
    for row in 0..cam.height {
        for col in 0..cam.width {
            let i = out.color.index(row, col);
            let t = assignment.data[i];
            if t < 0 {
                continue;
            }
            let f = &faces[t as usize];
            let x = face_vertices(&eval.world, f);
            let (b, _) = ray_weights(&cam.ray(row, col), &x);
            out.tri_id.data[i] = t;
            out.bary.data[i] = b;
            out.coverage.data[i] = true;
            out.depth.data[i] = b[0] * x[0].z + b[1] * x[1].z + b[2] * x[2].z;
            out.color.data[i] = shade_pixel(scene, &eval, f, &b);
        }
    }
    out.fingerprint = scene.fingerprint();
    Ok(out)
}

/// Gradient of a scalar with respect to every scene parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGradient {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub delta: DVector<f64>,
    pub rotation: Vec3,
    pub translation: Vec3,
    pub gamma: [f64; GAMMA_LEN],
}

impl SceneGradient {
    pub fn zeros(model: &MorphableModel) -> Self {
        SceneGradient {
            alpha: DVector::zeros(model.k_id()),
            beta: DVector::zeros(model.k_exp()),
            delta: DVector::zeros(model.k_app()),
            rotation: Vec3::zeros(),
            translation: Vec3::zeros(),
            gamma: [0.0; GAMMA_LEN],
        }
    }

    /// Coefficient part in [`CoefficientVector::to_flat`] order.
    pub fn coefficient_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend(self.alpha.iter());
        v.extend(self.beta.iter());
        v.extend(self.delta.iter());
        v.extend(self.rotation.iter());
        v.extend(self.translation.iter());
        v
    }

    pub fn add_scaled(&mut self, other: &SceneGradient, s: f64) {
        self.alpha += &other.alpha * s;
        self.beta += &other.beta * s;
        self.delta += &other.delta * s;
        self.rotation += other.rotation * s;
        self.translation += other.translation * s;
        for (a, b) in self.gamma.iter_mut().zip(&other.gamma) {
            *a += b * s;
        }
    }
}

/// Pulls per-vertex camera-space position cotangents back to identity,
/// expression and pose coefficients.
pub fn geometry_backward(model: &MorphableModel, coeffs: &CoefficientVector, morphed: &[Vec3], d_world: &[Vec3], grad: &mut SceneGradient) {
    let jet = axis_angle_rotation(&coeffs.rotation);
    let rt = jet.matrix.transpose();
    let mut d_morph = Vec::with_capacity(d_world.len());
    for (s, g) in morphed.iter().zip(d_world) {
        grad.translation += g;
        for j in 0..3 {
            grad.rotation[j] += g.dot(&(jet.partials[j] * s));
        }
        d_morph.push(rt * g);
    }
    let flat = flatten(&d_morph);
    grad.alpha += model.basis_id.tr_mul(&flat);
    grad.beta += model.basis_exp.tr_mul(&flat);
}

/// Gradient of `sum(upstream . color)` over covered pixels with respect to
/// all scene parameters, holding coverage and face ownership fixed.
///
/// Albedo clamping is straight-through; shading clamps (negative
/// irradiance and the `[0, 1]` output range) block the gradient.
pub fn render_backward(output: &RenderOutput, upstream: &Image, scene: &Scene) -> Result<SceneGradient> {
    if output.fingerprint != scene.fingerprint() {
        return Err(Error::Invalid("render output was produced by a different scene".into()));
    }
    output.color.check_shape(upstream, "upstream cotangent")?;
    let eval = evaluate_scene(scene)?;
    let model = scene.model;
    let topo = &model.topology;
    let faces = topo.faces();
    let v = model.vertex_count();
    let mut grad = SceneGradient::zeros(model);
    let mut d_albedo = vec![Vec3::zeros(); v];
    let mut d_normals = vec![Vec3::zeros(); v];
    let mut d_world = vec![Vec3::zeros(); v];
    let cam = &scene.camera;

    for row in 0..cam.height {
        for col in 0..cam.width {
            let i = output.tri_id.index(row, col);
            let t = output.tri_id.data[i];
            let u = upstream.data[i];
            if t < 0 || u.iter().all(|&x| x == 0.0) {
                continue;
            }
            let f = &faces[t as usize];
            let idx = f.map(|k| k as usize);
            let x = face_vertices(&eval.world, f);
            let d = cam.ray(row, col);
            let (b, s) = ray_weights(&d, &x);
            let a = interpolate(&eval.albedo, f, &b);
            let mut db = [0.0; 3];
            let da = match &scene.lighting {
                None => u,
                Some(g) => {
                    let n = interpolate(&eval.normals, f, &b);
                    let len = n.norm();
                    if !(len > 0.0) {
                        continue;
                    }
                    let nh = n / len;
                    let basis = sh_basis_unchecked(&nh);
                    let irr = irradiance_from_basis(g, &basis);
                    let mut da = Vec3::zeros();
                    let mut dy = [0.0; SH_COUNT];
                    for c in 0..3 {
                        let e = if scene.clamp_negative_irradiance { irr[c].max(0.0) } else { irr[c] };
                        let val = a[c] * e;
                        let active = (irr[c] > 0.0 || !scene.clamp_negative_irradiance) && val > 0.0 && val < 1.0;
                        if !active {
                            continue;
                        }
                        let gc = u[c];
                        da[c] = gc * e;
                        let gch = g.channel(c);
                        for j in 0..SH_COUNT {
                            grad.gamma[c * SH_COUNT + j] += gc * a[c] * basis[j];
                            dy[j] += gc * a[c] * gch[j];
                        }
                    }
                    let grads = sh_basis_gradient(&nh);
                    let mut dnh = Vec3::zeros();
                    for j in 0..SH_COUNT {
                        dnh += grads[j] * dy[j];
                    }
                    let dn = (dnh - nh * nh.dot(&dnh)) / len;
                    for k in 0..3 {
                        d_normals[idx[k]] += dn * b[k];
                        db[k] += eval.normals[idx[k]].dot(&dn);
                    }
                    da
                }
            };
            for k in 0..3 {
                d_albedo[idx[k]] += da * b[k];
                db[k] += eval.albedo[idx[k]].dot(&da);
            }
            // b = T / S  =>  dT_m = (db_m - sum_k db_k b_k) / S
            let mean = db[0] * b[0] + db[1] * b[1] + db[2] * b[2];
            let dt = [(db[0] - mean) / s, (db[1] - mean) / s, (db[2] - mean) / s];
            // T0 = d.(X1 x X2), T1 = d.(X2 x X0), T2 = d.(X0 x X1)
            d_world[idx[1]] += x[2].cross(&d) * dt[0] + d.cross(&x[0]) * dt[2];
            d_world[idx[2]] += d.cross(&x[1]) * dt[0] + x[0].cross(&d) * dt[1];
            d_world[idx[0]] += d.cross(&x[2]) * dt[1] + x[1].cross(&d) * dt[2];
        }
    }

    if scene.lighting.is_some() {
        vertex_normals_backward(&eval.world, topo, &d_normals, &mut d_world);
    }
    geometry_backward(model, &scene.coeffs, &eval.morphed, &d_world, &mut grad);
    grad.delta += model.basis_app.tr_mul(&flatten(&d_albedo));
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tri_topology(faces: Vec<[u32; 3]>, v: usize) -> MeshTopology {
        MeshTopology::new(v, faces, vec![[0.0, 0.0]; v], vec![]).unwrap()
    }

    #[test]
    fn projection_basics() {
        let cam = Camera::default_for(48, 64);
        let p = cam.project_point(&Vec3::new(0.0, 0.0, 3.7)).unwrap();
        assert_eq!(p, Vector2::new(32.0, 24.0));
        let a = cam.project_point(&Vec3::new(0.4, -0.3, 2.0)).unwrap();
        let b = cam.project_point(&Vec3::new(0.4, -0.3, 4.0)).unwrap();
        let c = Vector2::new(32.0, 24.0);
        assert_relative_eq!((b - c) * 2.0, a - c, epsilon = 1e-12);
        assert!(cam.project_point(&Vec3::new(0.0, 0.0, 0.1)).is_none());
        let pr = project(&cam, &[Vec3::new(0.0, 0.0, -1.0), Vec3::new(0.0, 0.0, 1.0)]);
        assert_eq!(pr.valid, vec![false, true]);
    }

    #[test]
    fn projection_jacobian_matches_finite_differences() {
        let cam = Camera::default_for(64, 64);
        let p = Vec3::new(0.3, -0.7, 3.1);
        let j = cam.project_jacobian(&p);
        let h = 1e-6;
        for k in 0..3 {
            let fd = (cam.project_point(&(p + Vec3::ith(k, h))).unwrap() - cam.project_point(&(p - Vec3::ith(k, h))).unwrap()) / (2.0 * h);
            for r in 0..2 {
                let an = j[(r, k)];
                assert!((an - fd[r]).abs() <= 1e-6 * an.abs().max(1e-9), "{an} vs {}", fd[r]);
            }
        }
    }

    #[test]
    fn empty_mesh_is_background() {
        let cam = Camera::default_for(8, 8);
        let topo = tri_topology(vec![], 1);
        let out = rasterize(&cam, &[Vec3::zeros()], &topo);
        assert!(out.coverage.data.iter().all(|&c| !c));
        assert!(out.color.data.iter().all(|&c| c == Vec3::repeat(0.5)));
    }

    /// Camera-space triangle whose projection hits the given pixel coordinates at depth z.
    fn unproject(cam: &Camera, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new(
            (u - cam.principal_point[0]) * z / cam.focal,
            (v - cam.principal_point[1]) * z / cam.focal,
            z,
        )
    }

    #[test]
    fn coverage_matches_point_in_triangle_oracle() {
        let cam = Camera::default_for(8, 8);
        // counter-clockwise in (u, v) means clockwise on screen with v down,
        // so pick the winding that faces the camera.
        let q = [(1.3, 1.1), (6.7, 2.2), (2.4, 6.9)];
        for order in [[0usize, 1, 2], [0, 2, 1]] {
            let pos: Vec<Vec3> = order.iter().map(|&k| unproject(&cam, q[k].0, q[k].1, 3.0)).collect();
            let out = rasterize(&cam, &pos, &tri_topology(vec![[0, 1, 2]], 3));
            let n = (pos[1] - pos[0]).cross(&(pos[2] - pos[0]));
            let front = n.dot(&pos[0]) < 0.0;
            for row in 0..8 {
                for col in 0..8 {
                    let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
                    let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0);
                    let e = [edge(q[0], q[1]), edge(q[1], q[2]), edge(q[2], q[0])];
                    let inside = e.iter().all(|&v| v >= 0.0) || e.iter().all(|&v| v <= 0.0);
                    assert_eq!(*out.coverage.get(row, col), inside && front, "pixel ({row},{col})");
                    if inside && front {
                        assert_relative_eq!(*out.depth.get(row, col), 3.0, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn nearer_triangle_wins() {
        let cam = Camera::default_for(16, 16);
        let q = [(1.0, 1.0), (15.0, 1.0), (1.0, 15.0)];
        let mut pos = Vec::new();
        for z in [5.0, 3.0] {
            for &(u, v) in &q {
                pos.push(unproject(&cam, u, v, z));
            }
        }
        let n = (pos[1] - pos[0]).cross(&(pos[2] - pos[0]));
        let faces = if n.dot(&pos[0]) < 0.0 {
            vec![[0, 1, 2], [3, 4, 5]]
        } else {
            vec![[0, 2, 1], [3, 5, 4]]
        };
        let out = rasterize(&cam, &pos, &tri_topology(faces, 6));
        assert!(out.covered_count() > 50);
        for i in 0..out.len_pixels() {
            if out.coverage.data[i] {
                assert_eq!(out.tri_id.data[i], 1);
                assert_relative_eq!(out.depth.data[i], 3.0, epsilon = 1e-12);
            }
        }
    }

    impl RenderOutput {
        fn len_pixels(&self) -> usize {
            self.coverage.len()
        }
    }

    #[test]
    fn depth_ties_go_to_lower_index() {
        let cam = Camera::default_for(16, 16);
        let q = [(1.0, 1.0), (15.0, 1.0), (1.0, 15.0)];
        let pos: Vec<Vec3> = q.iter().map(|&(u, v)| unproject(&cam, u, v, 4.0)).collect();
        let n = (pos[1] - pos[0]).cross(&(pos[2] - pos[0]));
        let f = if n.dot(&pos[0]) < 0.0 { [0, 1, 2] } else { [0, 2, 1] };
        let out = rasterize(&cam, &pos, &tri_topology(vec![f, f], 3));
        assert!(out.covered_count() > 50);
        assert!(out.tri_id.data.iter().all(|&t| t <= 0));
    }

    #[test]
    fn back_faces_and_near_plane_are_culled() {
        let cam = Camera::default_for(16, 16);
        let q = [(1.0, 1.0), (15.0, 1.0), (1.0, 15.0)];
        let pos: Vec<Vec3> = q.iter().map(|&(u, v)| unproject(&cam, u, v, 4.0)).collect();
        let n = (pos[1] - pos[0]).cross(&(pos[2] - pos[0]));
        let back = if n.dot(&pos[0]) < 0.0 { [0, 2, 1] } else { [0, 1, 2] };
        assert_eq!(rasterize(&cam, &pos, &tri_topology(vec![back], 3)).covered_count(), 0);
        let mut near = pos.clone();
        near[0].z = 0.05;
        let front = [back[0], back[2], back[1]];
        assert_eq!(rasterize(&cam, &near, &tri_topology(vec![front], 3)).covered_count(), 0);
    }
}
