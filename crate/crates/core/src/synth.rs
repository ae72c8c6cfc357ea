//! Seeded procedural face corpus: an egg-shaped icosphere template, bumpy
//! identity variations, low-frequency skin color fields, analytic
//! expression blendshapes, makeup overlays and 2D occluder masks.
//!
//! Every output is a pure function of its spec and seed. Identity shapes
//! share one bank of bump sites (drawn from the corpus seed) and differ in
//! per-sample amplitudes; appearances share a small bank of color fields.
//! Both therefore live in low-dimensional linear families, so a held-out
//! sample from the same generator lies in the span of a large enough PCA
//! model built from the corpus.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::image::Mask;
use crate::morphable_model::{build_pca_model, MeshTopology, MorphableModel};
use crate::shading::{LightingCoefficients, SH_COUNT, Y00};
use crate::{Error, Grid, Result, Vec3};

pub const LANDMARK_COUNT: usize = 27;
pub const Z_STRETCH: f64 = 1.3;
const COLOR_FIELDS: usize = 4;

/// Direction the template's face points in, in model coordinates. The
/// pinhole camera looks down `+z`, so a face at zero rotation looks at it.
pub fn face_direction() -> Vec3 {
    -Vec3::z()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_samples: usize,
    pub template_subdivision: u32,
    pub bump_count: usize,
    pub bump_amplitude_range: [f64; 2],
    /// Lower and upper RGB corners of the base skin tone box.
    pub skin_tone_range: [[f64; 3]; 2],
    pub makeup_patch_count: usize,
    pub makeup_anchor_uvs: Vec<[f64; 2]>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 0,
            n_samples: 40,
            template_subdivision: 4,
            bump_count: 12,
            bump_amplitude_range: [0.02, 0.08],
            skin_tone_range: [[0.55, 0.38, 0.30], [0.85, 0.65, 0.55]],
            makeup_patch_count: 3,
            makeup_anchor_uvs: vec![[0.5, 0.66], [0.36, 0.56], [0.64, 0.56], [0.40, 0.40], [0.60, 0.40]],
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.bump_amplitude_range;
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && hi >= lo) {
            return Err(Error::Invalid(format!(
                "bump_amplitude_range [{lo}, {hi}] must be finite, nonnegative and ordered"
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::Invalid("n_samples must be positive".into()));
        }
        if self.template_subdivision > 6 {
            return Err(Error::Invalid("template_subdivision must be at most 6".into()));
        }
        let [tlo, thi] = self.skin_tone_range;
        for c in 0..3 {
            if !(0.0 <= tlo[c] && tlo[c] <= thi[c] && thi[c] <= 1.0) {
                return Err(Error::Invalid("skin_tone_range must be ordered within [0,1]".into()));
            }
        }
        if self.makeup_anchor_uvs.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("makeup anchors must lie in [0,1]^2".into()));
        }
        if self.makeup_patch_count > 0 && self.makeup_anchor_uvs.is_empty() {
            return Err(Error::Invalid("makeup patches need at least one anchor".into()));
        }
        Ok(())
    }
}

/// Unit icosphere: 12 icosahedron vertices, then `level` rounds of
/// 4-to-1 midpoint subdivision. Faces wind counter-clockwise seen from outside.
pub fn icosphere(level: u32) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut pos: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, pos: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                pos.push(((pos[a as usize] + pos[b as usize]) * 0.5).normalize());
                (pos.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut pos);
            let bc = midpoint(b, c, &mut pos);
            let ca = midpoint(c, a, &mut pos);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (pos, faces)
}

/// Azimuthal equal-area map of a unit direction into `[0,1]^2`, centered on
/// [`face_direction`]. The opposite pole maps onto the unit-disk boundary.
pub fn direction_to_uv(d: &Vec3) -> [f64; 2] {
    let r = ((1.0 + d.z.clamp(-1.0, 1.0)) / 2.0).sqrt();
    let rho = (d.x * d.x + d.y * d.y).sqrt();
    let (c, s) = if rho > 1e-12 { (d.x / rho, d.y / rho) } else { (1.0, 0.0) };
    [(0.5 + 0.5 * r * c).clamp(0.0, 1.0), (0.5 + 0.5 * r * s).clamp(0.0, 1.0)]
}

/// Template head: stretched icosphere plus its unit directions.
#[derive(Debug, Clone)]
pub struct Template {
    pub topology: MeshTopology,
    pub positions: Vec<Vec3>,
    /// Unit sphere direction of each vertex before stretching.
    pub directions: Vec<Vec3>,
}

fn landmark_directions() -> Vec<Vec3> {
    let mut dirs = vec![face_direction()];
    for (count, polar_deg, phase) in [(8usize, 30.0f64, 0.0f64), (10, 55.0, 0.5), (8, 75.0, 0.25)] {
        let polar = polar_deg.to_radians();
        for k in 0..count {
            let az = 2.0 * std::f64::consts::PI * (k as f64 + phase) / count as f64;
            dirs.push(Vec3::new(polar.sin() * az.cos(), polar.sin() * az.sin(), -polar.cos()));
        }
    }
    dirs
}

/// Egg-shaped head template at the given icosphere level (0 to 6).
///
/// Landmarks are the vertices closest to 27 fixed directions spread over
/// the front of the head, the first being the front-most vertex (nose tip
/// analog). Meshes with fewer than 27 vertices get one landmark per vertex.
pub fn generate_template(subdivision: u32) -> Result<Template> {
    if subdivision > 6 {
        return Err(Error::Invalid(format!("subdivision {subdivision} exceeds 6")));
    }
    let (directions, faces) = icosphere(subdivision);
    let positions: Vec<Vec3> = directions.iter().map(|d| Vec3::new(d.x, d.y, d.z * Z_STRETCH)).collect();
    let uv = directions.iter().map(direction_to_uv).collect();
    let mut taken = vec![false; directions.len()];
    let mut landmarks = Vec::new();
    for target in landmark_directions().into_iter().take(LANDMARK_COUNT.min(directions.len())) {
        let best = directions
            .iter()
            .enumerate()
            .filter(|(i, _)| !taken[*i])
            .max_by(|a, b| a.1.dot(&target).total_cmp(&b.1.dot(&target)).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("fewer landmarks than vertices");
        taken[best] = true;
        landmarks.push(best as u32);
    }
    let topology = MeshTopology::new(directions.len(), faces, uv, landmarks)?;
    Ok(Template {
        topology,
        positions,
        directions,
    })
}

/// Ground-truth generator parameters of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleParams {
    pub index: usize,
    pub bump_amplitudes: Vec<f64>,
    pub skin_tone: [f64; 3],
    pub color_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub shape: Vec<Vec3>,
    pub appearance: Vec<Vec3>,
    pub params: SampleParams,
}

#[derive(Debug, Clone)]
struct Bank {
    bump_centers: Vec<Vec3>,
    bump_widths: Vec<f64>,
    color_centers: Vec<Vec3>,
    color_dirs: Vec<Vec3>,
}

impl Bank {
    fn new(spec: &CorpusSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut bump_centers = Vec::with_capacity(spec.bump_count);
        let mut bump_widths = Vec::with_capacity(spec.bump_count);
        for _ in 0..spec.bump_count {
            bump_centers.push(Vec3::from(UnitSphere.sample(&mut rng)));
            bump_widths.push(rng.gen_range(0.25..0.5));
        }
        let mut color_centers = Vec::new();
        let mut color_dirs = Vec::new();
        for _ in 0..COLOR_FIELDS {
            color_centers.push(Vec3::from(UnitSphere.sample(&mut rng)));
            let d = Vec3::new(rng.gen_range(0.2..1.0), rng.gen_range(-0.3..0.6), rng.gen_range(-0.3..0.6));
            color_dirs.push(d.normalize());
        }
        Bank {
            bump_centers,
            bump_widths,
            color_centers,
            color_dirs,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub template: Template,
    pub samples: Vec<SyntheticSample>,
    pub blendshapes: Vec<Vec<Vec3>>,
}

impl Corpus {
    pub fn build_model(&self, k_id: usize, k_app: usize) -> Result<MorphableModel> {
        let shapes: Vec<Vec<Vec3>> = self.samples.iter().map(|s| s.shape.clone()).collect();
        let apps: Vec<Vec<Vec3>> = self.samples.iter().map(|s| s.appearance.clone()).collect();
        build_pca_model(self.template.topology.clone(), &shapes, &apps, k_id, k_app, &self.blendshapes)
    }

    /// A sample from the same generator that is not part of the corpus.
    pub fn held_out(&self, k: usize) -> Result<SyntheticSample> {
        generate_sample(&self.spec, &self.template, &Bank::new(&self.spec), self.spec.n_samples + k)
    }
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn min_triangle_area(pos: &[Vec3], topo: &MeshTopology) -> f64 {
    topo.faces()
        .iter()
        .map(|f| {
            let [a, b, c] = f.map(|i| pos[i as usize]);
            0.5 * (b - a).cross(&(c - a)).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

fn generate_sample(spec: &CorpusSpec, template: &Template, bank: &Bank, index: usize) -> Result<SyntheticSample> {
    let mut rng = sample_rng(spec.seed, 1 + index as u64);
    let [lo, hi] = spec.bump_amplitude_range;
    let mut amps: Vec<f64> = (0..spec.bump_count)
        .map(|_| {
            let mag = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let [tlo, thi] = spec.skin_tone_range;
    let tone: [f64; 3] = std::array::from_fn(|c| if thi[c] > tlo[c] { rng.gen_range(tlo[c]..thi[c]) } else { tlo[c] });
    let color_weights: Vec<f64> = (0..COLOR_FIELDS).map(|_| rng.gen_range(-0.08..0.08)).collect();

    let template_min = min_triangle_area(&template.positions, &template.topology);
    let shape = loop {
        let shape: Vec<Vec3> = template
            .positions
            .iter()
            .zip(&template.directions)
            .map(|(p, u)| {
                let mut d = 0.0;
                for ((c, w), a) in bank.bump_centers.iter().zip(&bank.bump_widths).zip(&amps) {
                    d += a * (-(u - c).norm_squared() / (2.0 * w * w)).exp();
                }
                p + u * d
            })
            .collect();
        if min_triangle_area(&shape, &template.topology) > 0.05 * template_min {
            break shape;
        }
        for a in amps.iter_mut() {
            *a *= 0.5;
        }
    };

    let appearance = template
        .directions
        .iter()
        .map(|u| {
            let mut col = Vec3::new(tone[0], tone[1], tone[2]);
            for ((c, dir), w) in bank.color_centers.iter().zip(&bank.color_dirs).zip(&color_weights) {
                col += dir * (w * (-(u - c).norm_squared() / (2.0 * 0.6 * 0.6)).exp());
            }
            col.map(|v| v.clamp(0.0, 1.0))
        })
        .collect();
    Ok(SyntheticSample {
        shape,
        appearance,
        params: SampleParams {
            index,
            bump_amplitudes: amps,
            skin_tone: tone,
            color_weights,
        },
    })
}

/// Analytic expression fields. The first is a vertical stretch of the lower
/// half of the head; the rest are smooth localized pushes along cycling axes
/// centered on a spiral of sites over the face.
pub fn blendshapes(template: &Template, count: usize) -> Vec<Vec<Vec3>> {
    (0..count)
        .map(|k| {
            if k == 0 {
                return template
                    .directions
                    .iter()
                    .map(|u| Vec3::new(0.0, 0.15 * u.y.max(0.0), 0.0))
                    .collect();
            }
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            let polar = (0.15 + 0.6 * ((k as f64 * 0.618_034) % 1.0)) * std::f64::consts::FRAC_PI_2;
            let az = golden * k as f64;
            let center = Vec3::new(polar.sin() * az.cos(), polar.sin() * az.sin(), -polar.cos());
            let axis = Vec3::ith(k % 3, 1.0);
            template
                .directions
                .iter()
                .map(|u| axis * (0.1 * (-(u - center).norm_squared() / (2.0 * 0.35 * 0.35)).exp()))
                .collect()
        })
        .collect()
}

pub fn generate_corpus(spec: &CorpusSpec, k_exp: usize) -> Result<Corpus> {
    spec.validate()?;
    let template = generate_template(spec.template_subdivision)?;
    let bank = Bank::new(spec);
    let samples = (0..spec.n_samples)
        .map(|i| generate_sample(spec, &template, &bank, i))
        .collect::<Result<Vec<_>>>()?;
    let blendshapes = blendshapes(&template, k_exp);
    Ok(Corpus {
        spec: spec.clone(),
        template,
        samples,
        blendshapes,
    })
}

/// Elliptical color patch in UV space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MakeupPatch {
    pub center_uv: [f64; 2],
    pub radii: [f64; 2],
    pub angle: f64,
    pub color: [f64; 3],
    pub opacity: f64,
}

impl MakeupPatch {
    pub fn contains(&self, uv: &[f64; 2]) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = uv[0] - self.center_uv[0];
        let dy = uv[1] - self.center_uv[1];
        let a = (c * dx + s * dy) / self.radii[0];
        let b = (-s * dx + c * dy) / self.radii[1];
        a * a + b * b <= 1.0
    }
}

#[derive(Debug, Clone)]
pub struct MakeupResult {
    pub sample: SyntheticSample,
    pub patches: Vec<MakeupPatch>,
    /// Per-vertex flag: inside at least one patch.
    pub mask: Vec<bool>,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Draws `spec.makeup_patch_count` saturated patches at the spec's anchors.
pub fn sample_makeup_patches(spec: &CorpusSpec, seed: u64) -> Vec<MakeupPatch> {
    let mut rng = sample_rng(seed, u64::MAX - 1);
    (0..spec.makeup_patch_count)
        .map(|k| {
            let anchor = spec.makeup_anchor_uvs[k % spec.makeup_anchor_uvs.len()];
            let color = hsv_to_rgb(rng.gen(), rng.gen_range(0.75..1.0), rng.gen_range(0.45..0.9));
            MakeupPatch {
                center_uv: anchor,
                radii: [rng.gen_range(0.05..0.09), rng.gen_range(0.03..0.06)],
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                color,
                opacity: rng.gen_range(0.5..0.9),
            }
        })
        .collect()
}

/// Alpha-blends patches over the sample appearance in order. Geometry is untouched.
pub fn apply_patches(sample: &SyntheticSample, topo: &MeshTopology, patches: &[MakeupPatch]) -> MakeupResult {
    let mut out = sample.clone();
    let mut mask = vec![false; topo.vertex_count()];
    for p in patches {
        let color = Vec3::new(p.color[0], p.color[1], p.color[2]);
        for (v, uv) in topo.uv_coords().iter().enumerate() {
            if p.contains(uv) {
                let c = &mut out.appearance[v];
                *c = *c * (1.0 - p.opacity) + color * p.opacity;
                mask[v] = true;
            }
        }
    }
    MakeupResult {
        sample: out,
        patches: patches.to_vec(),
        mask,
    }
}

pub fn apply_makeup(sample: &SyntheticSample, topo: &MeshTopology, spec: &CorpusSpec, seed: u64) -> MakeupResult {
    apply_patches(sample, topo, &sample_makeup_patches(spec, seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSpec {
    pub blob_count: usize,
    pub half_plane: bool,
    /// Allowed visible-area fraction; draws outside it are rejected.
    pub area_band: [f64; 2],
}

impl Default for OcclusionSpec {
    fn default() -> Self {
        OcclusionSpec {
            blob_count: 2,
            half_plane: true,
            area_band: [0.5, 0.95],
        }
    }
}

/// Boolean skin mask (true = unoccluded) made of smooth blobs and an
/// optional half-plane band cut out of an all-true image.
pub fn synth_occlusion_mask(seed: u64, height: usize, width: usize, spec: &OcclusionSpec) -> Result<Mask> {
    if height < 16 || width < 16 {
        return Err(Error::Invalid(format!("mask size {height}x{width} below 16x16")));
    }
    let mut rng = sample_rng(seed, u64::MAX);
    let scale = height.min(width) as f64;
    let mut last = None;
    for _ in 0..64 {
        let blobs: Vec<(f64, f64, f64)> = (0..spec.blob_count)
            .map(|_| {
                (
                    rng.gen_range(0.0..width as f64),
                    rng.gen_range(0.0..height as f64),
                    rng.gen_range(0.06..0.16) * scale,
                )
            })
            .collect();
        let plane = spec.half_plane.then(|| {
            let a: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            (a.cos(), a.sin(), rng.gen_range(0.45..0.9))
        });
        let mask = Grid::from_fn(height, width, |y, x| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let field: f64 = blobs
                .iter()
                .map(|&(cx, cy, r)| (-((px - cx).powi(2) + (py - cy).powi(2)) / (2.0 * r * r)).exp())
                .sum();
            let in_blob = field > 0.5;
            let in_plane = plane.is_some_and(|(nx, ny, off)| {
                let u = 2.0 * px / width as f64 - 1.0;
                let v = 2.0 * py / height as f64 - 1.0;
                nx * u + ny * v > off
            });
            !(in_blob || in_plane)
        });
        let f = mask.fraction();
        if f >= spec.area_band[0] && f <= spec.area_band[1] {
            return Ok(mask);
        }
        last = Some(mask);
    }
    // Degenerate bands (e.g. [1, 1] with occluders enabled) fall back to the last draw.
    Ok(last.expect("at least one draw"))
}

/// Seeded colored lighting with a directional component: per channel an
/// ambient irradiance in `[0.7, 1]`, first-order coefficients in
/// `[-0.4, 0.4]` and second-order coefficients in `[-0.1, 0.1]`, so
/// irradiance stays positive over the sphere.
pub fn random_lighting(seed: u64) -> LightingCoefficients {
    let mut rng = sample_rng(seed, u64::MAX - 2);
    let mut l = LightingCoefficients::zeros();
    for c in 0..3 {
        let g = &mut l.gamma[c * SH_COUNT..(c + 1) * SH_COUNT];
        g[0] = rng.gen_range(0.7..1.0) / Y00;
        for v in &mut g[1..4] {
            *v = rng.gen_range(-0.4..0.4);
        }
        for v in &mut g[4..9] {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    l
}

/// Writes a mesh as OBJ with one `vt` per vertex and `f v/vt` faces.
pub fn write_obj(path: &Path, shape: &[Vec3], topo: &MeshTopology) -> Result<()> {
    let mut s = String::new();
    for p in shape {
        writeln!(s, "v {} {} {}", p.x, p.y, p.z).unwrap();
    }
    for uv in topo.uv_coords() {
        writeln!(s, "vt {} {}", uv[0], uv[1]).unwrap();
    }
    for f in topo.faces() {
        let [a, b, c] = f.map(|i| i + 1);
        writeln!(s, "f {a}/{a} {b}/{b} {c}/{c}").unwrap();
    }
    crate::image::write_all(path, s.as_bytes())
}

/// Reads vertex positions back from an OBJ written by [`write_obj`].
pub fn read_obj_positions(path: &Path) -> Result<Vec<Vec3>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| l.starts_with("v "))
        .map(|l| parse_triple(&l[2..]))
        .collect()
}

/// Per-vertex color sidecar: one `r g b` line per vertex, linear values.
pub fn write_colors(path: &Path, colors: &[Vec3]) -> Result<()> {
    let mut s = String::new();
    for c in colors {
        writeln!(s, "{} {} {}", c.x, c.y, c.z).unwrap();
    }
    crate::image::write_all(path, s.as_bytes())
}

pub fn read_colors(path: &Path) -> Result<Vec<Vec3>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(parse_triple).collect()
}

fn parse_triple(s: &str) -> Result<Vec3> {
    let v: Vec<f64> = s
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Format(format!("bad number {t:?}: {e}"))))
        .collect::<Result<_>>()?;
    if v.len() != 3 {
        return Err(Error::Format(format!("expected 3 numbers, got {}", v.len())));
    }
    Ok(Vec3::new(v[0], v[1], v[2]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            n_samples: 5,
            template_subdivision: 2,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn icosahedron_counts() {
        let t = generate_template(0).unwrap();
        assert_eq!(t.topology.vertex_count(), 12);
        assert_eq!(t.topology.face_count(), 20);
        assert_eq!(t.topology.landmark_indices().len(), 12);
    }

    #[test]
    fn subdivision_counts_follow_recurrence() {
        for n in 1..=4u32 {
            let t = generate_template(n).unwrap();
            assert_eq!(t.topology.vertex_count(), 10 * 4usize.pow(n) + 2);
            assert_eq!(t.topology.face_count(), 20 * 4usize.pow(n));
        }
        let t = generate_template(4).unwrap();
        assert_eq!(t.topology.vertex_count(), 2562);
        assert_eq!(t.topology.face_count(), 5120);
        assert!(generate_template(7).is_err());
    }

    #[test]
    fn template_invariants() {
        let t = generate_template(3).unwrap();
        let lm = t.topology.landmark_indices();
        assert_eq!(lm.len(), LANDMARK_COUNT);
        let mut sorted = lm.to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), LANDMARK_COUNT);
        assert!(t
            .topology
            .uv_coords()
            .iter()
            .all(|uv| (0.0..=1.0).contains(&uv[0]) && (0.0..=1.0).contains(&uv[1])));
        // first landmark is the front-most vertex
        let front = t.positions[lm[0] as usize].z;
        assert!(t.positions.iter().all(|p| p.z >= front));
        // egg stretch
        let zmax = t.positions.iter().map(|p| p.z).fold(f64::MIN, f64::max);
        assert!((zmax - Z_STRETCH).abs() < 1e-12);
        // deterministic
        let t2 = generate_template(3).unwrap();
        assert_eq!(t.topology, t2.topology);
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_corpus(&small_spec(), 3).unwrap();
        let b = generate_corpus(&small_spec(), 3).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x, y);
        }
        assert_eq!(a.blendshapes, b.blendshapes);
        let mut other = small_spec();
        other.seed = 1;
        let c = generate_corpus(&other, 3).unwrap();
        assert_ne!(a.samples[0].shape, c.samples[0].shape);
    }

    #[test]
    fn zero_amplitude_gives_template() {
        let spec = CorpusSpec {
            bump_amplitude_range: [0.0, 0.0],
            ..small_spec()
        };
        let c = generate_corpus(&spec, 0).unwrap();
        for s in &c.samples {
            assert_eq!(s.shape, c.template.positions);
        }
    }

    #[test]
    fn sample_mean_converges_to_template() {
        let spec = CorpusSpec {
            n_samples: 1000,
            template_subdivision: 1,
            ..CorpusSpec::default()
        };
        let c = generate_corpus(&spec, 0).unwrap();
        let n = c.samples.len() as f64;
        // Each vertex moves by sum_b s_b a_b k_b(u) with independent signs s_b,
        // so the mean displacement has standard deviation at most
        // amp_max * sqrt(sum_b k_b^2) / sqrt(N) <= amp_max * sqrt(B / N).
        let bound = 5.0 * spec.bump_amplitude_range[1] * (spec.bump_count as f64 / n).sqrt();
        let mut worst: f64 = 0.0;
        for v in 0..c.template.positions.len() {
            let mean: Vec3 = c.samples.iter().map(|s| s.shape[v]).sum::<Vec3>() / n;
            worst = worst.max((mean - c.template.positions[v]).norm());
        }
        assert!(worst < bound, "{worst} >= {bound}");
    }

    #[test]
    fn appearance_and_shape_ranges() {
        let c = generate_corpus(&small_spec(), 2).unwrap();
        let tmin = min_triangle_area(&c.template.positions, &c.template.topology);
        for s in &c.samples {
            assert!(s.appearance.iter().flat_map(|c| c.iter()).all(|v| (0.0..=1.0).contains(v)));
            assert!(s.shape.iter().flat_map(|c| c.iter()).all(|v| v.is_finite()));
            assert!(min_triangle_area(&s.shape, &c.template.topology) > 0.05 * tmin);
        }
    }

    #[test]
    fn held_out_sample_lies_in_full_model_span() {
        let spec = CorpusSpec {
            n_samples: 24,
            template_subdivision: 2,
            ..CorpusSpec::default()
        };
        let c = generate_corpus(&spec, 0).unwrap();
        let m = c.build_model(spec.bump_count, 1 + 3 + COLOR_FIELDS).unwrap();
        let h = c.held_out(0).unwrap();
        let flat = crate::morphable_model::flatten(&h.shape);
        let e = crate::morphable_model::truncation_error(&m.mean_shape, &m.basis_id, m.k_id(), &flat);
        assert!(e < 1e-9, "{e}");
    }

    #[test]
    fn makeup_zero_patches_identity() {
        let spec = small_spec();
        let c = generate_corpus(&spec, 0).unwrap();
        let none = CorpusSpec {
            makeup_patch_count: 0,
            ..spec
        };
        let r = apply_makeup(&c.samples[0], &c.template.topology, &none, 3);
        assert_eq!(r.sample, c.samples[0]);
        assert!(r.mask.iter().all(|&m| !m));
    }

    #[test]
    fn full_opacity_patch_sets_color() {
        let c = generate_corpus(&small_spec(), 0).unwrap();
        let patch = MakeupPatch {
            center_uv: [0.5, 0.5],
            radii: [0.1, 0.07],
            angle: 0.3,
            color: [0.9, 0.1, 0.2],
            opacity: 1.0,
        };
        let r = apply_patches(&c.samples[1], &c.template.topology, &[patch]);
        assert!(r.mask.iter().any(|&m| m));
        for (v, &m) in r.mask.iter().enumerate() {
            if m {
                assert_eq!(r.sample.appearance[v], Vec3::new(0.9, 0.1, 0.2));
            } else {
                assert_eq!(r.sample.appearance[v], c.samples[1].appearance[v]);
            }
        }
        assert_eq!(r.sample.shape, c.samples[1].shape);
    }

    #[test]
    fn makeup_change_matches_blend_oracle() {
        let spec = small_spec();
        let c = generate_corpus(&spec, 0).unwrap();
        let topo = &c.template.topology;
        let patches = sample_makeup_patches(&spec, 11);
        let r = apply_patches(&c.samples[0], topo, &patches);
        let v = topo.vertex_count() as f64;
        let measured: f64 = r
            .sample
            .appearance
            .iter()
            .zip(&c.samples[0].appearance)
            .map(|(a, b)| (a - b).abs().sum())
            .sum::<f64>()
            / (3.0 * v);
        // independent loop: per vertex, fold each covering patch's blend
        let mut expected = 0.0;
        for (i, uv) in topo.uv_coords().iter().enumerate() {
            let orig = c.samples[0].appearance[i];
            let mut col = orig;
            for p in &patches {
                let (s, co) = p.angle.sin_cos();
                let (dx, dy) = (uv[0] - p.center_uv[0], uv[1] - p.center_uv[1]);
                let a = (co * dx + s * dy) / p.radii[0];
                let b = (-s * dx + co * dy) / p.radii[1];
                if a * a + b * b <= 1.0 {
                    for ch in 0..3 {
                        col[ch] += p.opacity * (p.color[ch] - col[ch]);
                    }
                }
            }
            expected += (0..3).map(|ch| (col[ch] - orig[ch]).abs()).sum::<f64>();
        }
        expected /= 3.0 * v;
        assert!((measured - expected).abs() < 1e-12);
        assert!(measured > 0.0);
    }

    #[test]
    fn occlusion_mask_properties() {
        let spec = OcclusionSpec::default();
        let a = synth_occlusion_mask(5, 64, 48, &spec).unwrap();
        assert_eq!(a, synth_occlusion_mask(5, 64, 48, &spec).unwrap());
        let none = OcclusionSpec {
            blob_count: 0,
            half_plane: false,
            area_band: [0.0, 1.0],
        };
        assert!(synth_occlusion_mask(9, 32, 32, &none).unwrap().data.iter().all(|&b| b));
        assert!(synth_occlusion_mask(9, 8, 32, &spec).is_err());
    }

    #[test]
    fn occlusion_area_band_over_seeds() {
        let spec = OcclusionSpec::default();
        for seed in 0..100 {
            let f = synth_occlusion_mask(seed, 64, 64, &spec).unwrap().fraction();
            assert!((0.5..=0.95).contains(&f), "seed {seed}: {f}");
        }
    }

    #[test]
    fn obj_and_colors_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_corpus(&small_spec(), 0).unwrap();
        let s = &c.samples[0];
        write_obj(&dir.path().join("a.obj"), &s.shape, &c.template.topology).unwrap();
        write_colors(&dir.path().join("a.colors"), &s.appearance).unwrap();
        assert_eq!(read_obj_positions(&dir.path().join("a.obj")).unwrap(), s.shape);
        assert_eq!(read_colors(&dir.path().join("a.colors")).unwrap(), s.appearance);
        let text = std::fs::read_to_string(dir.path().join("a.obj")).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("vt ")).count(), s.shape.len());
    }

    #[test]
    fn spec_json_uses_field_names() {
        let json = serde_json::to_value(CorpusSpec::default()).unwrap();
        let keys: Vec<&str> = json.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        for k in [
            "seed",
            "n_samples",
            "template_subdivision",
            "bump_count",
            "bump_amplitude_range",
            "skin_tone_range",
            "makeup_patch_count",
            "makeup_anchor_uvs",
        ] {
            assert!(keys.contains(&k), "{k}");
        }
        assert_eq!(keys.len(), 8);
        let bad = CorpusSpec {
            bump_amplitude_range: [0.1, 0.0],
            ..CorpusSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn random_lighting_is_positive_and_directional() {
        let (dirs, _) = icosphere(3);
        for seed in 0..50 {
            let l = random_lighting(seed);
            assert_eq!(l, random_lighting(seed));
            assert!(l.gamma[1..4].iter().any(|v| v.abs() > 1e-3));
            for d in &dirs {
                let e = crate::shading::irradiance(&l, d).unwrap();
                assert!(e.min() > 0.0, "seed {seed}");
            }
        }
    }
}
