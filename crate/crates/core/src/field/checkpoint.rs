//! Field checkpoint files.
//!
//! ```text
//! magic "OFFD" | version u32 | backend tag u32 (1 = surface, 2 = volume)
//! surface: N u32 | D u32 | k u32 | bounds 6×f32 (min xyz, max xyz)
//!          points N×3 f32 | features N×D f32 | colors N×3 f32
//! volume:  R u32 | D u32 | bounds 6×f32
//!          density R³ f32 | features R³×D f32 | colors R³×3 f32
//! crc32 u32 of everything above
//! ```
//! All values little-endian. Adjacency is rebuilt from positions on load.

use std::path::Path;

use super::{FieldModel, SurfaceField, Vec3, VoxelField};
use crate::error::{Error, Result};
use crate::util::{read_bytes, write_atomic, ByteReader};

pub const FIELD_MAGIC: &[u8; 4] = b"OFFD";
pub const FIELD_VERSION: u32 = 1;
const TAG_SURFACE: u32 = 1;
const TAG_VOLUME: u32 = 2;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s<'a>(out: &mut Vec<u8>, vals: impl IntoIterator<Item = &'a f64>) {
    for &v in vals {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn write_field(model: &FieldModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FIELD_MAGIC);
    put_u32(&mut out, FIELD_VERSION);
    match model {
        FieldModel::Surface(f) => {
            put_u32(&mut out, TAG_SURFACE);
            put_u32(&mut out, f.len() as u32);
            put_u32(&mut out, f.dim as u32);
            put_u32(&mut out, f.knn as u32);
            let (lo, hi) = f.bounds();
            put_f32s(&mut out, lo.iter().chain(hi.iter()));
            put_f32s(&mut out, f.points.iter().flat_map(|p| p.iter()));
            put_f32s(&mut out, &f.features);
            put_f32s(&mut out, f.colors.iter().flatten());
        }
        FieldModel::Volume(f) => {
            put_u32(&mut out, TAG_VOLUME);
            put_u32(&mut out, f.resolution as u32);
            put_u32(&mut out, f.dim as u32);
            put_f32s(&mut out, f.bounds_min.iter().chain(f.bounds_max.iter()));
            put_f32s(&mut out, &f.density_raw);
            put_f32s(&mut out, &f.features);
            put_f32s(&mut out, &f.colors);
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

fn floats(r: &mut ByteReader<'_>, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| r.f32().map(f64::from)).collect()
}

pub fn read_field(bytes: &[u8]) -> Result<FieldModel> {
    if bytes.len() < 16 {
        return Err(Error::format("field checkpoint", "file too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let mut r = ByteReader::new(body, "field checkpoint");
    if r.take(4)? != FIELD_MAGIC {
        return Err(Error::format("field checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != FIELD_VERSION {
        return Err(Error::format("field checkpoint", format!("unsupported version {version}")));
    }
    if crc32fast::hash(body).to_le_bytes() != tail {
        return Err(Error::format("field checkpoint", "checksum mismatch"));
    }
    let model = match r.u32()? {
        TAG_SURFACE => {
            let n = r.u32()? as usize;
            let dim = r.u32()? as usize;
            let knn = r.u32()? as usize;
            floats(&mut r, 6)?;
            let pts = floats(&mut r, n * 3)?;
            let features = floats(&mut r, n * dim)?;
            let cols = floats(&mut r, n * 3)?;
            let points = pts.chunks_exact(3).map(|p| Vec3::new(p[0], p[1], p[2])).collect();
            let colors = cols.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            FieldModel::Surface(SurfaceField::new(points, colors, features, dim, knn)?)
        }
        TAG_VOLUME => {
            let res = r.u32()? as usize;
            let dim = r.u32()? as usize;
            let b = floats(&mut r, 6)?;
            let mut f = VoxelField::new(res, Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]), dim)?;
            let nodes = f.num_nodes();
            f.density_raw = floats(&mut r, nodes)?;
            f.features = floats(&mut r, nodes * dim)?;
            f.colors = floats(&mut r, nodes * 3)?;
            FieldModel::Volume(f)
        }
        tag => return Err(Error::format("field checkpoint", format!("unknown backend tag {tag}"))),
    };
    if !r.finished() {
        return Err(Error::format("field checkpoint", "trailing bytes"));
    }
    Ok(model)
}

pub fn save_field(model: &FieldModel, path: &Path) -> Result<()> {
    write_atomic(path, &write_field(model))
}

pub fn load_field(path: &Path) -> Result<FieldModel> {
    read_field(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surface_round_trip_at_f32_precision() {
        let pts: Vec<Vec3> = (0..12).map(|i| Vec3::new(i as f64 * 0.1, (i % 3) as f64, 0.25)).collect();
        let feats: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
        let f = SurfaceField::new(pts, vec![[0.1, 0.2, 0.3]; 12], feats, 2, 3).unwrap();
        let back = read_field(&write_field(&FieldModel::Surface(f.clone()))).unwrap();
        let FieldModel::Surface(b) = back else { panic!("wrong backend") };
        assert_eq!(b.adjacency, f.adjacency);
        assert!(b.features.iter().zip(&f.features).all(|(x, y)| (x - y).abs() < 1e-6));
    }

    #[test]
    fn volume_round_trip_and_checksum() {
        let mut f = VoxelField::new(3, Vec3::zeros(), Vec3::repeat(2.0), 2).unwrap();
        f.density_raw[5] = 1.5;
        f.features[7] = -0.25;
        let mut bytes = write_field(&FieldModel::Volume(f.clone()));
        assert_eq!(read_field(&bytes).unwrap(), FieldModel::Volume(f));
        let n = bytes.len();
        bytes[n - 10] ^= 0x40;
        assert!(read_field(&bytes).unwrap_err().to_string().contains("checksum"));
    }
}
