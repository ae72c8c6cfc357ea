//! Second-order real spherical-harmonics irradiance and vertex normals.

use serde::{Deserialize, Serialize};

use crate::morphable_model::MeshTopology;
use crate::{Error, Result, Vec3};

pub const SH_COUNT: usize = 9;
pub const GAMMA_LEN: usize = 27;

const C0: f64 = 0.282_094_791_773_878_14; // 1 / (2 sqrt(pi))
const C1: f64 = 0.488_602_511_902_919_9; // sqrt(3 / (4 pi))
const C2: f64 = 1.092_548_430_592_079_2; // sqrt(15 / (4 pi))
const C2_0: f64 = 0.315_391_565_252_520_05; // sqrt(5 / (16 pi))
const C2_2: f64 = 0.546_274_215_296_039_6; // sqrt(15 / (16 pi))

pub const Y00: f64 = C0;

/// Lighting as 9 SH coefficients per channel, laid out `[R0..R8, G0..G8, B0..B8]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightingCoefficients {
    pub gamma: [f64; GAMMA_LEN],
}

impl Default for LightingCoefficients {
    fn default() -> Self {
        Self::identity()
    }
}

impl LightingCoefficients {
    pub fn zeros() -> Self {
        LightingCoefficients { gamma: [0.0; GAMMA_LEN] }
    }

    /// Ambient coefficient for which `g * Y00 == 1.0` holds exactly in `f64`.
    pub fn unit_ambient_coefficient() -> f64 {
        let mut g = 1.0 / C0;
        for _ in 0..8 {
            let p = g * C0;
            if p == 1.0 {
                break;
            }
            g = if p > 1.0 { g.next_down() } else { g.next_up() };
        }
        g
    }

    /// Pure ambient light with irradiance exactly one in every channel.
    pub fn identity() -> Self {
        Self::ambient(Vec3::repeat(1.0))
    }

    /// Pure ambient light with the given per-channel irradiance.
    pub fn ambient(level: Vec3) -> Self {
        let mut l = Self::zeros();
        let g = Self::unit_ambient_coefficient();
        for c in 0..3 {
            l.gamma[c * SH_COUNT] = if level[c] == 1.0 { g } else { level[c] / C0 };
        }
        l
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let gamma: [f64; GAMMA_LEN] = values.try_into().map_err(|_| Error::dim("gamma", GAMMA_LEN, values.len()))?;
        if gamma.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("gamma must be finite".into()));
        }
        Ok(LightingCoefficients { gamma })
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.gamma[c * SH_COUNT..(c + 1) * SH_COUNT]
    }
}

/// Real SH basis, bands 0 to 2, ordered
/// `[Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22]`.
pub fn sh_basis(n: &Vec3) -> Result<[f64; SH_COUNT]> {
    let len = n.norm();
    if (len - 1.0).abs() > 1e-6 || !len.is_finite() {
        return Err(Error::Invalid(format!("SH direction must be unit length, |n| = {len}")));
    }
    Ok(sh_basis_unchecked(n))
}

#[inline]
pub(crate) fn sh_basis_unchecked(n: &Vec3) -> [f64; SH_COUNT] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        C0,
        C1 * y,
        C1 * z,
        C1 * x,
        C2 * x * y,
        C2 * y * z,
        C2_0 * (3.0 * z * z - 1.0),
        C2 * x * z,
        C2_2 * (x * x - y * y),
    ]
}

/// Gradients of the basis polynomials with respect to the direction components.
#[inline]
pub(crate) fn sh_basis_gradient(n: &Vec3) -> [Vec3; SH_COUNT] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        Vec3::zeros(),
        Vec3::new(0.0, C1, 0.0),
        Vec3::new(0.0, 0.0, C1),
        Vec3::new(C1, 0.0, 0.0),
        Vec3::new(C2 * y, C2 * x, 0.0),
        Vec3::new(0.0, C2 * z, C2 * y),
        Vec3::new(0.0, 0.0, 6.0 * C2_0 * z),
        Vec3::new(C2 * z, 0.0, C2 * x),
        Vec3::new(2.0 * C2_2 * x, -2.0 * C2_2 * y, 0.0),
    ]
}

#[inline]
pub(crate) fn irradiance_from_basis(gamma: &LightingCoefficients, basis: &[f64; SH_COUNT]) -> Vec3 {
    let mut out = Vec3::zeros();
    for c in 0..3 {
        let g = gamma.channel(c);
        let mut acc = 0.0;
        for j in 0..SH_COUNT {
            acc += g[j] * basis[j];
        }
        out[c] = acc;
    }
    out
}

/// Per-channel irradiance `gamma_c . Y(n)`. Not clamped; may be negative.
pub fn irradiance(gamma: &LightingCoefficients, n: &Vec3) -> Result<Vec3> {
    Ok(irradiance_from_basis(gamma, &sh_basis(n)?))
}

/// Shaded color. With `lighting == None` the albedo is returned unchanged;
/// otherwise `clamp(albedo * max(irradiance, 0), 0, 1)`, where the zero floor
/// on irradiance applies only when `clamp_negative` is set.
pub fn shade(albedo: &Vec3, lighting: Option<&LightingCoefficients>, n: &Vec3, clamp_negative: bool) -> Result<Vec3> {
    match lighting {
        None => Ok(*albedo),
        Some(g) => {
            let irr = irradiance(g, n)?;
            Ok(shade_with_irradiance(albedo, &irr, clamp_negative))
        }
    }
}

#[inline]
pub(crate) fn shade_with_irradiance(albedo: &Vec3, irr: &Vec3, clamp_negative: bool) -> Vec3 {
    Vec3::from_fn(|c, _| {
        let e = if clamp_negative { irr[c].max(0.0) } else { irr[c] };
        (albedo[c] * e).clamp(0.0, 1.0)
    })
}

/// Derivative of [`shade`] with respect to gamma, in gamma layout.
/// Zero for channels sitting on either clamp.
pub fn shade_gamma_gradient(albedo: &Vec3, gamma: &LightingCoefficients, n: &Vec3, clamp_negative: bool) -> Result<[[f64; GAMMA_LEN]; 3]> {
    let basis = sh_basis(n)?;
    let irr = irradiance_from_basis(gamma, &basis);
    let mut out = [[0.0; GAMMA_LEN]; 3];
    for c in 0..3 {
        let v = albedo[c] * irr[c];
        let active = (!clamp_negative || irr[c] > 0.0) && v > 0.0 && v < 1.0;
        if active {
            for j in 0..SH_COUNT {
                out[c][c * SH_COUNT + j] = albedo[c] * basis[j];
            }
        }
    }
    Ok(out)
}

/// Unnormalized area-weighted normal accumulators, one per vertex.
pub(crate) fn accumulate_face_normals(positions: &[Vec3], topo: &MeshTopology) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); positions.len()];
    for f in topo.faces() {
        let [a, b, c] = f.map(|i| i as usize);
        let n = (positions[b] - positions[a]).cross(&(positions[c] - positions[a]));
        acc[a] += n;
        acc[b] += n;
        acc[c] += n;
    }
    acc
}

/// Area-weighted vertex normals. Orientation follows face winding
/// (counter-clockwise seen from outside gives outward normals).
pub fn vertex_normals(positions: &[Vec3], topo: &MeshTopology) -> Result<Vec<Vec3>> {
    if positions.len() != topo.vertex_count() {
        return Err(Error::dim("positions", topo.vertex_count(), positions.len()));
    }
    accumulate_face_normals(positions, topo)
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let len = m.norm();
            if len > 0.0 && len.is_finite() {
                Ok(m / len)
            } else {
                Err(Error::Numerical(format!("zero-length normal at vertex {i}")))
            }
        })
        .collect()
}

/// Pulls cotangents on unit vertex normals back to vertex positions.
pub(crate) fn vertex_normals_backward(positions: &[Vec3], topo: &MeshTopology, d_normals: &[Vec3], grad_positions: &mut [Vec3]) {
    let acc = accumulate_face_normals(positions, topo);
    let d_acc: Vec<Vec3> = acc
        .iter()
        .zip(d_normals)
        .map(|(m, g)| {
            if g.iter().all(|&v| v == 0.0) {
                return Vec3::zeros();
            }
            let len = m.norm();
            let n = m / len;
            (g - n * n.dot(g)) / len
        })
        .collect();
    for f in topo.faces() {
        let [a, b, c] = f.map(|i| i as usize);
        let g = d_acc[a] + d_acc[b] + d_acc[c];
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let e1 = positions[b] - positions[a];
        let e2 = positions[c] - positions[a];
        let ge1 = e2.cross(&g);
        let ge2 = g.cross(&e1);
        grad_positions[b] += ge1;
        grad_positions[c] += ge2;
        grad_positions[a] -= ge1 + ge2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::icosphere;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, UnitSphere};

    fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
        Vec3::from(UnitSphere.sample(rng))
    }

    fn random_gamma(rng: &mut ChaCha8Rng) -> LightingCoefficients {
        let mut g = LightingCoefficients::zeros();
        for v in g.gamma.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        g
    }

    #[test]
    fn constant_band_and_axis_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let b = sh_basis(&random_unit(&mut rng)).unwrap();
            assert_relative_eq!(b[0], 0.2820948, epsilon = 1e-7);
        }
        let b = sh_basis(&Vec3::z()).unwrap();
        assert_relative_eq!(b[2], (3.0 / (4.0 * std::f64::consts::PI)).sqrt(), epsilon = 1e-15);
        assert_eq!(b[1], 0.0);
        assert_eq!(b[3], 0.0);
    }

    #[test]
    fn constants_match_closed_forms() {
        let pi = std::f64::consts::PI;
        assert_relative_eq!(C0, 0.5 / pi.sqrt(), epsilon = 1e-16);
        assert_relative_eq!(C1, (3.0 / (4.0 * pi)).sqrt(), epsilon = 1e-16);
        assert_relative_eq!(C2, (15.0 / (4.0 * pi)).sqrt(), epsilon = 1e-15);
        assert_relative_eq!(C2_0, (5.0 / (16.0 * pi)).sqrt(), epsilon = 1e-16);
        assert_relative_eq!(C2_2, (15.0 / (16.0 * pi)).sqrt(), epsilon = 1e-16);
    }

    #[test]
    fn non_unit_direction_rejected() {
        assert!(sh_basis(&Vec3::new(0.0, 0.0, 2.0)).is_err());
        assert!(sh_basis(&Vec3::new(0.0, 0.0, 1.0 + 5e-7)).is_ok());
    }

    #[test]
    fn ambient_and_black() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = LightingCoefficients::zeros();
        for c in 0..3 {
            g.gamma[c * 9] = 0.7 * (c + 1) as f64;
        }
        for _ in 0..10 {
            let n = random_unit(&mut rng);
            let irr = irradiance(&g, &n).unwrap();
            for c in 0..3 {
                assert_relative_eq!(irr[c], 0.7 * (c + 1) as f64 * C0, epsilon = 1e-15);
            }
            assert_eq!(irradiance(&LightingCoefficients::zeros(), &n).unwrap(), Vec3::zeros());
        }
    }

    #[test]
    fn identity_lighting_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let id = LightingCoefficients::identity();
        for _ in 0..100 {
            let n = random_unit(&mut rng);
            assert_eq!(irradiance(&id, &n).unwrap(), Vec3::repeat(1.0));
            let a = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            assert_eq!(shade(&a, Some(&id), &n, true).unwrap(), a);
        }
    }

    #[test]
    fn irradiance_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pi = std::f64::consts::PI;
        for _ in 0..50 {
            let g = random_gamma(&mut rng);
            let n = random_unit(&mut rng);
            let (x, y, z) = (n.x, n.y, n.z);
            // closed forms written out independently of the basis table
            let y_vals = [
                1.0 / (2.0 * pi.sqrt()),
                (3.0 / (4.0 * pi)).sqrt() * y,
                (3.0 / (4.0 * pi)).sqrt() * z,
                (3.0 / (4.0 * pi)).sqrt() * x,
                0.5 * (15.0 / pi).sqrt() * x * y,
                0.5 * (15.0 / pi).sqrt() * y * z,
                0.25 * (5.0 / pi).sqrt() * (3.0 * z * z - 1.0),
                0.5 * (15.0 / pi).sqrt() * x * z,
                0.25 * (15.0 / pi).sqrt() * (x * x - y * y),
            ];
            let irr = irradiance(&g, &n).unwrap();
            for c in 0..3 {
                let mut acc = 0.0;
                for j in 0..9 {
                    acc += g.gamma[9 * c + j] * y_vals[j];
                }
                assert_relative_eq!(irr[c], acc, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn monte_carlo_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200_000;
        let mut gram = [[0.0; 9]; 9];
        for _ in 0..n {
            let b = sh_basis_unchecked(&random_unit(&mut rng));
            for i in 0..9 {
                for j in 0..9 {
                    gram[i][j] += b[i] * b[j];
                }
            }
        }
        let scale = 4.0 * std::f64::consts::PI / n as f64;
        for i in 0..9 {
            for j in 0..9 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((gram[i][j] * scale - expected).abs() < 2e-2);
            }
        }
    }

    #[test]
    fn band_structure_under_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rot = crate::morphable_model::axis_angle_rotation(&Vec3::new(0.3, -0.8, 0.5)).matrix;
        for _ in 0..20 {
            let n = random_unit(&mut rng);
            let a = sh_basis(&n).unwrap();
            let b = sh_basis(&(rot * n)).unwrap();
            assert_eq!(a[0], b[0]);
            // band-1 coefficients are (y, z, x) scaled, so they rotate with n
            let v = Vec3::new(a[3], a[1], a[2]);
            let w = Vec3::new(b[3], b[1], b[2]);
            assert_relative_eq!(rot * v, w, epsilon = 1e-14);
            // band-2 energy is rotation invariant
            let e2 = |x: &[f64; 9]| x[4..].iter().map(|v| v * v).sum::<f64>();
            assert_relative_eq!(e2(&a), e2(&b), epsilon = 1e-13);
        }
    }

    #[test]
    fn basis_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = random_unit(&mut rng);
        let g = sh_basis_gradient(&n);
        let h = 1e-6;
        for k in 0..3 {
            let p = sh_basis_unchecked(&(n + Vec3::ith(k, h)));
            let m = sh_basis_unchecked(&(n - Vec3::ith(k, h)));
            for j in 0..9 {
                assert_relative_eq!((p[j] - m[j]) / (2.0 * h), g[j][k], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn shade_clamps_and_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = LightingCoefficients::identity();
        g.gamma[9 + 2] = -10.0; // green channel strongly negative along +z
        let s = shade(&Vec3::repeat(0.5), Some(&g), &Vec3::z(), true).unwrap();
        assert_eq!(s[1], 0.0);
        assert_eq!(s[0], 0.5);
        let a = Vec3::new(0.2, 0.3, 0.4);
        assert_eq!(shade(&a, None, &Vec3::z(), true).unwrap(), a);
        for _ in 0..50 {
            let g = random_gamma(&mut rng);
            let n = random_unit(&mut rng);
            let a = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            let irr = irradiance(&g, &n).unwrap();
            let s = shade(&a, Some(&g), &n, true).unwrap();
            for c in 0..3 {
                assert_eq!(s[c], (a[c] * irr[c].max(0.0)).min(1.0));
            }
        }
    }

    #[test]
    fn shade_gamma_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        for _ in 0..30 {
            let mut g = random_gamma(&mut rng);
            for c in 0..3 {
                g.gamma[9 * c] = 2.0;
            }
            let n = random_unit(&mut rng);
            let a = Vec3::new(rng.gen_range(0.1..0.6), rng.gen_range(0.1..0.6), rng.gen_range(0.1..0.6));
            let grad = shade_gamma_gradient(&a, &g, &n, true).unwrap();
            let h = 1e-6;
            for k in 0..GAMMA_LEN {
                let mut gp = g;
                gp.gamma[k] += h;
                let mut gm = g;
                gm.gamma[k] -= h;
                let fd = (shade(&a, Some(&gp), &n, true).unwrap() - shade(&a, Some(&gm), &n, true).unwrap()) / (2.0 * h);
                for c in 0..3 {
                    let an = grad[c][k];
                    if an != 0.0 {
                        assert!((an - fd[c]).abs() <= 1e-6 * an.abs().max(1e-3));
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn icosahedron_normals_are_radial() {
        let (pos, faces) = icosphere(0);
        let topo = MeshTopology::new(pos.len(), faces, vec![[0.0, 0.0]; pos.len()], vec![]).unwrap();
        let n = vertex_normals(&pos, &topo).unwrap();
        for (p, n) in pos.iter().zip(&n) {
            assert_relative_eq!(*n, p.normalize(), epsilon = 1e-6);
        }
    }

    #[test]
    fn flat_fan_normals() {
        let pos = vec![
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(1.0, 0.0, 1.0),
            Vec3::new(0.3, 1.0, 1.0),
            Vec3::new(-1.0, 0.4, 1.0),
            Vec3::new(-0.2, -1.0, 1.0),
        ];
        let faces = vec![[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 1]];
        let topo = MeshTopology::new(5, faces, vec![[0.0, 0.0]; 5], vec![]).unwrap();
        for n in vertex_normals(&pos, &topo).unwrap() {
            assert_relative_eq!(n, Vec3::z(), epsilon = 1e-15);
        }
    }

    #[test]
    fn isolated_vertex_is_an_error() {
        let pos = vec![Vec3::x(), Vec3::y(), Vec3::z(), Vec3::zeros()];
        let topo = MeshTopology::new(4, vec![[0, 1, 2]], vec![[0.0, 0.0]; 4], vec![]).unwrap();
        let err = vertex_normals(&pos, &topo).unwrap_err();
        assert!(err.to_string().contains("vertex 3"));
    }

    #[test]
    fn normals_match_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (mut pos, faces) = icosphere(2);
        for p in pos.iter_mut() {
            *p *= rng.gen_range(0.8..1.2);
        }
        let topo = MeshTopology::new(pos.len(), faces.clone(), vec![[0.0, 0.0]; pos.len()], vec![]).unwrap();
        let n = vertex_normals(&pos, &topo).unwrap();
        for (v, nv) in n.iter().enumerate() {
            // per vertex, scan every face and sum area * unit normal
            let mut acc = Vec3::zeros();
            for f in &faces {
                if f.contains(&(v as u32)) {
                    let [a, b, c] = f.map(|i| pos[i as usize]);
                    let cr = (b - a).cross(&(c - a));
                    let area = 0.5 * cr.norm();
                    acc += cr.normalize() * area;
                }
            }
            assert_relative_eq!(*nv, acc.normalize(), epsilon = 1e-12);
        }
    }

    #[test]
    fn normals_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut pos, faces) = icosphere(1);
        for p in pos.iter_mut() {
            *p *= rng.gen_range(0.8..1.2);
        }
        let topo = MeshTopology::new(pos.len(), faces, vec![[0.0, 0.0]; pos.len()], vec![]).unwrap();
        let w: Vec<Vec3> = (0..pos.len()).map(|_| random_unit(&mut rng)).collect();
        let f = |p: &[Vec3]| -> f64 { vertex_normals(p, &topo).unwrap().iter().zip(&w).map(|(n, w)| n.dot(w)).sum() };
        let mut grad = vec![Vec3::zeros(); pos.len()];
        vertex_normals_backward(&pos, &topo, &w, &mut grad);
        let h = 1e-6;
        for v in [0, 5, 17, 30] {
            for k in 0..3 {
                let mut p = pos.clone();
                p[v][k] += h;
                let fp = f(&p);
                p[v][k] -= 2.0 * h;
                let fm = f(&p);
                assert_relative_eq!(grad[v][k], (fp - fm) / (2.0 * h), epsilon = 1e-7);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn irradiance_linear_in_gamma(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let g1 = random_gamma(&mut rng);
                let g2 = random_gamma(&mut rng);
                let n = random_unit(&mut rng);
                let mut mix = LightingCoefficients::zeros();
                for k in 0..GAMMA_LEN {
                    mix.gamma[k] = a * g1.gamma[k] + b * g2.gamma[k];
                }
                let lhs = irradiance(&mix, &n).unwrap();
                let rhs = irradiance(&g1, &n).unwrap() * a + irradiance(&g2, &n).unwrap() * b;
                prop_assert!((lhs - rhs).amax() < 1e-12);
            }
        }
    }
}
