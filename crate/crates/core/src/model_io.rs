//! Binary model container.
//!
//! Layout, all little-endian: magic `MFM1`; header of seven `u32`
//! (version, V, F, K_id, K_exp, K_app, L); then `f64` arrays mean_shape,
//! mean_appearance, basis_id, basis_exp, basis_app (each basis column-major),
//! sigma_id, sigma_exp, sigma_app, uv_coords; then faces as `u32` triples
//! and landmark indices as `u32`.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};

use crate::morphable_model::{MeshTopology, MorphableModel};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MFM1";
pub const VERSION: u32 = 1;

pub fn write_model<W: Write>(model: &MorphableModel, mut w: W) -> Result<()> {
    let topo = &model.topology;
    w.write_all(MAGIC)?;
    for x in [
        VERSION,
        topo.vertex_count() as u32,
        topo.face_count() as u32,
        model.k_id() as u32,
        model.k_exp() as u32,
        model.k_app() as u32,
        topo.landmark_indices().len() as u32,
    ] {
        w.write_u32::<LittleEndian>(x)?;
    }
    let arrays: [&[f64]; 8] = [
        model.mean_shape.as_slice(),
        model.mean_appearance.as_slice(),
        model.basis_id.as_slice(),
        model.basis_exp.as_slice(),
        model.basis_app.as_slice(),
        model.sigma_id.as_slice(),
        model.sigma_exp.as_slice(),
        model.sigma_app.as_slice(),
    ];
    for a in arrays {
        for &x in a {
            w.write_f64::<LittleEndian>(x)?;
        }
    }
    for uv in topo.uv_coords() {
        w.write_f64::<LittleEndian>(uv[0])?;
        w.write_f64::<LittleEndian>(uv[1])?;
    }
    for f in topo.faces() {
        for &i in f {
            w.write_u32::<LittleEndian>(i)?;
        }
    }
    for &l in topo.landmark_indices() {
        w.write_u32::<LittleEndian>(l)?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut v)?;
    Ok(v)
}

pub fn read_model<R: Read>(mut r: R) -> Result<MorphableModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic, expected MFM1".into()));
    }
    let mut header = [0u32; 7];
    r.read_u32_into::<LittleEndian>(&mut header)?;
    let [version, v, f, k_id, k_exp, k_app, l] = header.map(|x| x as usize);
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = 3 * v;
    let mean_shape = DVector::from_vec(read_f64s(&mut r, n)?);
    let mean_app = DVector::from_vec(read_f64s(&mut r, n)?);
    let basis_id = DMatrix::from_vec(n, k_id, read_f64s(&mut r, n * k_id)?);
    let basis_exp = DMatrix::from_vec(n, k_exp, read_f64s(&mut r, n * k_exp)?);
    let basis_app = DMatrix::from_vec(n, k_app, read_f64s(&mut r, n * k_app)?);
    let sigma_id = DVector::from_vec(read_f64s(&mut r, k_id)?);
    let sigma_exp = DVector::from_vec(read_f64s(&mut r, k_exp)?);
    let sigma_app = DVector::from_vec(read_f64s(&mut r, k_app)?);
    let uv_flat = read_f64s(&mut r, 2 * v)?;
    let uv = uv_flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    let mut faces_flat = vec![0u32; 3 * f];
    r.read_u32_into::<LittleEndian>(&mut faces_flat)?;
    let faces = faces_flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let mut landmarks = vec![0u32; l];
    r.read_u32_into::<LittleEndian>(&mut landmarks)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after landmark block".into()));
    }
    let topo = MeshTopology::new(v, faces, uv, landmarks)?;
    MorphableModel::new(
        topo, mean_shape, mean_app, basis_id, basis_exp, basis_app, sigma_id, sigma_exp, sigma_app,
    )
}

pub fn save(model: &MorphableModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_model(model, &mut buf)?;
    crate::image::write_all(path, &buf)
}

pub fn load(path: &Path) -> Result<MorphableModel> {
    let bytes = std::fs::read(path)?;
    read_model(bytes.as_slice())
}
