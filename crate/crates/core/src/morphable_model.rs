//! Linear morphable model: shape and appearance as mean plus basis times
//! coefficients, PCA construction from a mesh corpus, and coefficient priors.
//!
//! Per-vertex data is stored flattened as `[x0, y0, z0, x1, y1, z1, ...]`
//! (or `[r0, g0, b0, ...]` for colors), so a basis is a `3V x K` matrix.

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct MeshTopology {
    vertex_count: usize,
    faces: Vec<[u32; 3]>,
    uv_coords: Vec<[f64; 2]>,
    landmark_indices: Vec<u32>,
}

impl MeshTopology {
    pub fn new(vertex_count: usize, faces: Vec<[u32; 3]>, uv_coords: Vec<[f64; 2]>, landmark_indices: Vec<u32>) -> Result<Self> {
        if vertex_count == 0 {
            return Err(Error::Invalid("topology needs at least one vertex".into()));
        }
        for (i, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v as usize >= vertex_count) {
                return Err(Error::Invalid(format!("face {i} references a missing vertex")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Invalid(format!("face {i} is degenerate")));
            }
        }
        if uv_coords.len() != vertex_count {
            return Err(Error::dim("uv_coords", vertex_count, uv_coords.len()));
        }
        if let Some(i) = uv_coords
            .iter()
            .position(|uv| !(0.0..=1.0).contains(&uv[0]) || !(0.0..=1.0).contains(&uv[1]))
        {
            return Err(Error::Invalid(format!("uv of vertex {i} outside [0,1]^2")));
        }
        let mut seen = vec![false; vertex_count];
        for &l in &landmark_indices {
            let l = l as usize;
            if l >= vertex_count {
                return Err(Error::Invalid(format!("landmark {l} out of range")));
            }
            if seen[l] {
                return Err(Error::Invalid(format!("landmark {l} listed twice")));
            }
            seen[l] = true;
        }
        Ok(MeshTopology {
            vertex_count,
            faces,
            uv_coords,
            landmark_indices,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn uv_coords(&self) -> &[[f64; 2]] {
        &self.uv_coords
    }

    pub fn landmark_indices(&self) -> &[u32] {
        &self.landmark_indices
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }
}

/// Coefficients of one face instance: identity, expression, appearance and
/// a rigid pose (axis-angle rotation in radians, translation in model units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub delta: DVector<f64>,
    pub rotation: Vec3,
    pub translation: Vec3,
}

impl CoefficientVector {
    pub fn zeros(k_id: usize, k_exp: usize, k_app: usize) -> Self {
        CoefficientVector {
            alpha: DVector::zeros(k_id),
            beta: DVector::zeros(k_exp),
            delta: DVector::zeros(k_app),
            rotation: Vec3::zeros(),
            translation: Vec3::zeros(),
        }
    }

    pub fn zeros_for(model: &MorphableModel) -> Self {
        Self::zeros(model.k_id(), model.k_exp(), model.k_app())
    }

    pub fn len(&self) -> usize {
        self.alpha.len() + self.beta.len() + self.delta.len() + 6
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Concatenation `[alpha, beta, delta, rotation, translation]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(self.alpha.iter());
        out.extend(self.beta.iter());
        out.extend(self.delta.iter());
        out.extend(self.rotation.iter());
        out.extend(self.translation.iter());
        out
    }

    pub fn from_flat(flat: &[f64], k_id: usize, k_exp: usize, k_app: usize) -> Result<Self> {
        let n = k_id + k_exp + k_app + 6;
        if flat.len() != n {
            return Err(Error::dim("coefficient vector", n, flat.len()));
        }
        let (a, rest) = flat.split_at(k_id);
        let (b, rest) = rest.split_at(k_exp);
        let (d, rest) = rest.split_at(k_app);
        Ok(CoefficientVector {
            alpha: DVector::from_column_slice(a),
            beta: DVector::from_column_slice(b),
            delta: DVector::from_column_slice(d),
            rotation: Vec3::new(rest[0], rest[1], rest[2]),
            translation: Vec3::new(rest[3], rest[4], rest[5]),
        })
    }

    pub fn check(&self, model: &MorphableModel) -> Result<()> {
        if self.alpha.len() != model.k_id() {
            return Err(Error::dim("alpha", model.k_id(), self.alpha.len()));
        }
        if self.beta.len() != model.k_exp() {
            return Err(Error::dim("beta", model.k_exp(), self.beta.len()));
        }
        if self.delta.len() != model.k_app() {
            return Err(Error::dim("delta", model.k_app(), self.delta.len()));
        }
        Ok(())
    }
}

/// Per-vertex colors after appearance evaluation.
#[derive(Debug, Clone)]
pub struct AppearanceEval {
    /// Colors clamped to `[0, 1]`.
    pub colors: Vec<Vec3>,
    /// Per-vertex flag: true when any channel was clamped.
    pub clamped: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    pub topology: MeshTopology,
    pub mean_shape: DVector<f64>,
    pub mean_appearance: DVector<f64>,
    pub basis_id: DMatrix<f64>,
    pub basis_exp: DMatrix<f64>,
    pub basis_app: DMatrix<f64>,
    pub sigma_id: DVector<f64>,
    pub sigma_exp: DVector<f64>,
    pub sigma_app: DVector<f64>,
}

impl MorphableModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        topology: MeshTopology,
        mean_shape: DVector<f64>,
        mean_appearance: DVector<f64>,
        basis_id: DMatrix<f64>,
        basis_exp: DMatrix<f64>,
        basis_app: DMatrix<f64>,
        sigma_id: DVector<f64>,
        sigma_exp: DVector<f64>,
        sigma_app: DVector<f64>,
    ) -> Result<Self> {
        let n = 3 * topology.vertex_count();
        for (name, len) in [
            ("mean_shape", mean_shape.len()),
            ("mean_appearance", mean_appearance.len()),
            ("basis_id rows", basis_id.nrows()),
            ("basis_exp rows", basis_exp.nrows()),
            ("basis_app rows", basis_app.nrows()),
        ] {
            if len != n {
                return Err(Error::dim(name, n, len));
            }
        }
        for (name, basis, sigma) in [
            ("sigma_id", &basis_id, &sigma_id),
            ("sigma_exp", &basis_exp, &sigma_exp),
            ("sigma_app", &basis_app, &sigma_app),
        ] {
            if sigma.len() != basis.ncols() {
                return Err(Error::dim(name, basis.ncols(), sigma.len()));
            }
            if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
                return Err(Error::Invalid(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(MorphableModel {
            topology,
            mean_shape,
            mean_appearance,
            basis_id,
            basis_exp,
            basis_app,
            sigma_id,
            sigma_exp,
            sigma_app,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.topology.vertex_count()
    }
    pub fn k_id(&self) -> usize {
        self.basis_id.ncols()
    }
    pub fn k_exp(&self) -> usize {
        self.basis_exp.ncols()
    }
    pub fn k_app(&self) -> usize {
        self.basis_app.ncols()
    }

    /// Morphed shape before the rigid transform, flattened `3V`.
    pub fn morph(&self, c: &CoefficientVector) -> Result<DVector<f64>> {
        c.check(self)?;
        Ok(&self.mean_shape + &self.basis_id * &c.alpha + &self.basis_exp * &c.beta)
    }

    /// Vertex positions: morphed shape, then rotated and translated.
    pub fn evaluate_shape(&self, c: &CoefficientVector) -> Result<Vec<Vec3>> {
        let morphed = self.morph(c)?;
        let rot = axis_angle_rotation(&c.rotation).matrix;
        Ok(unflatten(&morphed).into_iter().map(|p| rot * p + c.translation).collect())
    }

    /// Unclamped per-vertex appearance, flattened `3V`.
    pub fn appearance_raw(&self, delta: &DVector<f64>) -> Result<DVector<f64>> {
        if delta.len() != self.k_app() {
            return Err(Error::dim("delta", self.k_app(), delta.len()));
        }
        Ok(&self.mean_appearance + &self.basis_app * delta)
    }

    pub fn evaluate_appearance(&self, delta: &DVector<f64>) -> Result<AppearanceEval> {
        let raw = self.appearance_raw(delta)?;
        let mut colors = Vec::with_capacity(self.vertex_count());
        let mut clamped = Vec::with_capacity(self.vertex_count());
        for c in unflatten(&raw) {
            let cl = c.map(|v| v.clamp(0.0, 1.0));
            clamped.push(cl != c);
            colors.push(cl);
        }
        Ok(AppearanceEval { colors, clamped })
    }

    /// Sum of squared standardized coefficients over identity, expression
    /// and appearance. Pose is excluded, as are modes with zero deviation.
    pub fn regularization_energy(&self, c: &CoefficientVector) -> Result<f64> {
        c.check(self)?;
        Ok(standardized_sq(&c.alpha, &self.sigma_id)
            + standardized_sq(&c.beta, &self.sigma_exp)
            + standardized_sq(&c.delta, &self.sigma_app))
    }

    /// Gradient of [`Self::regularization_energy`] with respect to
    /// `(alpha, beta, delta)`.
    pub fn regularization_gradient(&self, c: &CoefficientVector) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let g = |x: &DVector<f64>, s: &DVector<f64>| {
            DVector::from_iterator(
                x.len(),
                x.iter().zip(s.iter()).map(|(&x, &s)| if s > 0.0 { 2.0 * x / (s * s) } else { 0.0 }),
            )
        };
        (
            g(&c.alpha, &self.sigma_id),
            g(&c.beta, &self.sigma_exp),
            g(&c.delta, &self.sigma_app),
        )
    }
}

fn standardized_sq(x: &DVector<f64>, sigma: &DVector<f64>) -> f64 {
    x.iter()
        .zip(sigma.iter())
        .filter(|(_, &s)| s > 0.0)
        .map(|(&x, &s)| (x / s).powi(2))
        .sum()
}

pub fn flatten(points: &[Vec3]) -> DVector<f64> {
    DVector::from_iterator(points.len() * 3, points.iter().flat_map(|p| [p.x, p.y, p.z]))
}

pub fn unflatten(v: &DVector<f64>) -> Vec<Vec3> {
    v.as_slice().chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

/// Rotation matrix of an axis-angle vector and its partial derivatives
/// with respect to each vector component.
#[derive(Debug, Clone, Copy)]
pub struct RotationJet {
    pub matrix: Matrix3<f64>,
    pub partials: [Matrix3<f64>; 3],
}

fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map `R = I + a K + b K^2` with `K = [r]x`,
/// `a = sin(t)/t`, `b = (1 - cos t)/t^2`. Small angles use Taylor series
/// for the coefficients so the derivatives stay accurate near zero.
pub fn axis_angle_rotation(r: &Vec3) -> RotationJet {
    let t2 = r.norm_squared();
    let t = t2.sqrt();
    let (a, b, da, db) = if t < 1e-3 {
        // da, db are (1/t) d/dt of a and b.
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
        )
    } else {
        let (s, c) = t.sin_cos();
        (s / t, (1.0 - c) / t2, (t * c - s) / (t2 * t), (t * s - 2.0 * (1.0 - c)) / (t2 * t2))
    };
    let k = skew(r);
    let k2 = k * k;
    let matrix = Matrix3::identity() + k * a + k2 * b;
    let mut partials = [Matrix3::zeros(); 3];
    for (i, p) in partials.iter_mut().enumerate() {
        let e = skew(&Vec3::ith(i, 1.0));
        *p = e * a + (e * k + k * e) * b + k * (da * r[i]) + k2 * (db * r[i]);
    }
    RotationJet { matrix, partials }
}

/// Builds a morphable model from a corpus on shared topology.
///
/// Identity and appearance bases are the leading left singular vectors of
/// the centered data, with `sigma = singular value / sqrt(N - 1)`. When the
/// data has lower rank than requested the basis is truncated with a
/// warning; rank zero is an error. Blendshapes are normalized to unit
/// length and their original norms become the expression deviations.
pub fn build_pca_model(
    topology: MeshTopology,
    shapes: &[Vec<Vec3>],
    appearances: &[Vec<Vec3>],
    k_id: usize,
    k_app: usize,
    blendshapes: &[Vec<Vec3>],
) -> Result<MorphableModel> {
    let n = shapes.len();
    if n < 2 {
        return Err(Error::Invalid(format!("PCA needs at least 2 samples, got {n}")));
    }
    if appearances.len() != n {
        return Err(Error::dim("appearance samples", n, appearances.len()));
    }
    if k_id > n - 1 || k_app > n - 1 {
        return Err(Error::Invalid(format!(
            "requested K (id {k_id}, app {k_app}) exceeds N-1 = {}",
            n - 1
        )));
    }
    let v = topology.vertex_count();
    for s in shapes.iter().chain(appearances).chain(blendshapes) {
        if s.len() != v {
            return Err(Error::dim("per-vertex sample", v, s.len()));
        }
    }
    let (mean_shape, basis_id, sigma_id) = pca(shapes, k_id, "identity")?;
    let (mean_app, basis_app, sigma_app) = pca(appearances, k_app, "appearance")?;

    let mut basis_exp = DMatrix::zeros(3 * v, blendshapes.len());
    let mut sigma_exp = DVector::zeros(blendshapes.len());
    for (j, b) in blendshapes.iter().enumerate() {
        let col = flatten(b);
        let norm = col.norm();
        if norm == 0.0 {
            return Err(Error::Invalid(format!("blendshape {j} is identically zero")));
        }
        basis_exp.set_column(j, &(col / norm));
        sigma_exp[j] = norm;
    }
    MorphableModel::new(
        topology, mean_shape, mean_app, basis_id, basis_exp, basis_app, sigma_id, sigma_exp, sigma_app,
    )
}

fn pca(samples: &[Vec<Vec3>], k: usize, what: &str) -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>)> {
    let n = samples.len();
    let cols: Vec<DVector<f64>> = samples.iter().map(|s| flatten(s)).collect();
    let mean = cols.iter().fold(DVector::zeros(cols[0].len()), |acc, c| acc + c) / n as f64;
    let mut centered = DMatrix::zeros(mean.len(), n);
    for (j, c) in cols.iter().enumerate() {
        centered.set_column(j, &(c - &mean));
    }
    if k == 0 {
        return Ok((mean, DMatrix::zeros(centered.nrows(), 0), DVector::zeros(0)));
    }
    let svd = centered.svd(true, false);
    let u = svd.u.ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let scale = mean.amax().max(1.0) * (mean.len() as f64).sqrt();
    let tol = 1e-10 * scale;
    let rank = order.iter().take_while(|&&i| svd.singular_values[i] > tol).count();
    if rank == 0 {
        return Err(Error::RankDeficient(format!(
            "{what} data has zero variance; all samples are identical"
        )));
    }
    let k_eff = if rank < k {
        log::warn!("{what} data rank {rank} is below requested K={k}; truncating");
        rank
    } else {
        k
    };
    let mut basis = DMatrix::zeros(mean.len(), k_eff);
    let mut sigma = DVector::zeros(k_eff);
    for (j, &i) in order.iter().take(k_eff).enumerate() {
        let mut col = u.column(i).into_owned();
        // Sign convention: largest-magnitude entry positive.
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col = -col;
        }
        basis.set_column(j, &col);
        sigma[j] = svd.singular_values[i] / ((n - 1) as f64).sqrt();
    }
    Ok((mean, basis, sigma))
}

/// Relative reconstruction error of `sample` after projecting its centered
/// version onto the first `k` columns of `basis`.
pub fn truncation_error(mean: &DVector<f64>, basis: &DMatrix<f64>, k: usize, sample: &DVector<f64>) -> f64 {
    let centered = sample - mean;
    let b = basis.columns(0, k);
    let coeffs = b.transpose() * &centered;
    let recon = mean + b * coeffs;
    (recon - sample).norm() / sample.norm().max(f64::MIN_POSITIVE)
}
