//! Minimal NIfTI-1 single-file (`n+1`) reader and writer for 3D scalar images.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, ShapeBuilder};

use super::{Contrast, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

// descrip field: "mp:contrast=T2;subject=IXI002;normalized=1"
const DESCRIP_PREFIX: &str = "mp:";

pub(super) fn read(path: &Path, gzip: bool) -> Result<Volume> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    let res = if gzip {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes)
    } else {
        BufReader::new(file).read_to_end(&mut bytes)
    };
    res.map_err(|e| Error::Unreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if bytes.len() < HEADER_SIZE {
        return Err(unreadable(path, "file shorter than a NIfTI-1 header"));
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse::<LittleEndian>(path, &bytes)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse::<BigEndian>(path, &bytes)
    } else {
        Err(unreadable(path, "bad sizeof_hdr"))
    }
}

fn unreadable(path: &Path, reason: &str) -> Error {
    Error::Unreadable {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn parse<B: ByteOrder>(path: &Path, bytes: &[u8]) -> Result<Volume> {
    if &bytes[344..347] != b"n+1" {
        return Err(unreadable(path, "not a single-file NIfTI-1 image (magic)"));
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = B::read_i16(&bytes[40 + 2 * i..]);
    }
    let ndim = dim[0].max(0) as usize;
    // trailing singleton dimensions are tolerated
    let extra_ok = (4..=ndim.min(7)).all(|i| dim[i] == 1);
    if ndim < 3 || !extra_ok {
        return Err(Error::NotThreeDimensional(ndim));
    }
    if dim[1..=3].iter().any(|&d| d < 1) {
        return Err(unreadable(path, "non-positive dimension"));
    }
    let shape = [dim[1] as usize, dim[2] as usize, dim[3] as usize];
    let datatype = B::read_i16(&bytes[70..]);
    let mut spacing = [1.0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let p = B::read_f32(&bytes[76 + 4 * (i + 1)..]).abs();
        *s = if p.is_finite() && p > 0.0 { p } else { 1.0 };
    }
    let vox_offset = B::read_f32(&bytes[108..]).max(HEADER_SIZE as f32) as usize;
    let slope = B::read_f32(&bytes[112..]);
    let inter = B::read_f32(&bytes[116..]);

    let n = shape[0] * shape[1] * shape[2];
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::UnknownDatatype(other)),
    };
    let payload = bytes
        .get(vox_offset..vox_offset + n * width)
        .ok_or_else(|| unreadable(path, "truncated voxel data"))?;
    let mut cur = Cursor::new(payload);
    let mut values = Vec::with_capacity(n);
    let io_err = |e: std::io::Error| unreadable(path, &e.to_string());
    for _ in 0..n {
        let v = match datatype {
            DT_UINT8 => f32::from(cur.read_u8().map_err(io_err)?),
            DT_INT8 => f32::from(cur.read_i8().map_err(io_err)?),
            DT_INT16 => f32::from(cur.read_i16::<B>().map_err(io_err)?),
            DT_UINT16 => f32::from(cur.read_u16::<B>().map_err(io_err)?),
            DT_INT32 => cur.read_i32::<B>().map_err(io_err)? as f32,
            DT_FLOAT32 => cur.read_f32::<B>().map_err(io_err)?,
            _ => cur.read_f64::<B>().map_err(io_err)? as f32,
        };
        values.push(v);
    }
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }
    // NIfTI stores x fastest
    let data = Array3::from_shape_vec((shape[0], shape[1], shape[2]).f(), values)
        .map_err(|e| unreadable(path, &e.to_string()))?;

    let descrip = read_cstr(&bytes[148..228]);
    let meta = DescripMeta::parse(&descrip);
    let contrast = meta
        .contrast
        .or_else(|| super::manifest::parse_ixi_name(path).map(|(_, c)| c))
        .ok_or_else(|| unreadable(path, "cannot determine contrast from header or file name"))?;
    let subject = meta
        .subject
        .or_else(|| super::manifest::parse_ixi_name(path).map(|(s, _)| s))
        .unwrap_or_else(|| {
            path.file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("unknown")
                .split('.')
                .next()
                .unwrap_or("unknown")
                .to_string()
        });
    let vol = Volume::new(data, spacing, contrast, subject)?;
    if meta.normalized {
        vol.into_normalized()
    } else {
        Ok(vol)
    }
}

fn read_cstr(bytes: &[u8]) -> String {
    let end = bytes.iter().position(|&b| b == 0).unwrap_or(bytes.len());
    String::from_utf8_lossy(&bytes[..end]).into_owned()
}

#[derive(Default)]
struct DescripMeta {
    contrast: Option<Contrast>,
    subject: Option<String>,
    normalized: bool,
}

impl DescripMeta {
    fn parse(s: &str) -> Self {
        let mut meta = DescripMeta::default();
        let Some(body) = s.strip_prefix(DESCRIP_PREFIX) else {
            return meta;
        };
        for kv in body.split(';') {
            match kv.split_once('=') {
                Some(("contrast", c)) => meta.contrast = c.parse().ok(),
                Some(("subject", s)) if !s.is_empty() => meta.subject = Some(s.to_string()),
                Some(("normalized", n)) => meta.normalized = n == "1",
                _ => {}
            }
        }
        meta
    }
}

pub(super) fn write(v: &Volume, path: &Path, gzip: bool) -> Result<()> {
    let [nx, ny, nz] = v.shape();
    if [nx, ny, nz].iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::Shape("dimension exceeds NIfTI-1 limit".into()));
    }
    let mut hdr = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut hdr[0..], HEADER_SIZE as i32);
    hdr[38] = b'r';
    let dims = [3i16, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut hdr[40 + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut hdr[70..], DT_FLOAT32);
    LittleEndian::write_i16(&mut hdr[72..], 32);
    let sp = v.spacing();
    let pixdim = [1.0f32, sp[0], sp[1], sp[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut hdr[76 + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut hdr[108..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut hdr[112..], 1.0);
    hdr[123] = 2; // mm

    let descrip = format!(
        "{DESCRIP_PREFIX}contrast={};subject={};normalized={}",
        v.contrast,
        v.subject_id,
        u8::from(v.is_normalized())
    );
    // subject ids too long for the field fall back to file-name parsing
    if descrip.len() < 80 {
        hdr[148..148 + descrip.len()].copy_from_slice(descrip.as_bytes());
    }

    // scanner-aligned sform with the voxel spacing on the diagonal
    LittleEndian::write_i16(&mut hdr[254..], 1);
    for row in 0..3 {
        LittleEndian::write_f32(&mut hdr[280 + 16 * row + 4 * row..], sp[row]);
    }
    hdr[344..348].copy_from_slice(b"n+1\0");

    let mut body = Vec::with_capacity(nx * ny * nz * 4);
    let data = v.data();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                body.write_f32::<LittleEndian>(data[[x, y, z]])
                    .expect("writing to a Vec cannot fail");
            }
        }
    }

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = if gzip {
        let mut enc = GzEncoder::new(w, Compression::default());
        enc.write_all(&hdr)
            .and_then(|_| enc.write_all(&body))
            .and_then(|_| enc.finish().and_then(|mut inner| inner.flush()))
    } else {
        w.write_all(&hdr)
            .and_then(|_| w.write_all(&body))
            .and_then(|_| w.flush())
    };
    res.map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{read_volume, write_volume};

    fn sample() -> Volume {
        let data = Array3::from_shape_fn((5, 4, 3), |(x, y, z)| (x as f32) * 0.5 - (y * z) as f32);
        Volume::new(data, [0.9, 0.9, 1.2], Contrast::PD, "IXI012").unwrap()
    }

    #[test]
    fn nifti_round_trip_plain_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.nii", "a.nii.gz"] {
            let p = dir.path().join(name);
            let v = sample();
            write_volume(&v, &p).unwrap();
            let back = read_volume(&p).unwrap();
            assert_eq!(back, v, "{name}");
        }
    }

    #[test]
    fn rejects_2d_image() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("flat.nii");
        write_volume(&sample(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        LittleEndian::write_i16(&mut bytes[40..], 2);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::NotThreeDimensional(2))));
    }

    #[test]
    fn rejects_unknown_datatype() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("odd.nii");
        write_volume(&sample(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        LittleEndian::write_i16(&mut bytes[70..], 1792); // complex128
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::UnknownDatatype(1792))));
    }

    #[test]
    fn reads_scaled_int16() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("IXI100-Guys-0001-T1.nii");
        let mut bytes = vec![0u8; VOX_OFFSET];
        LittleEndian::write_i32(&mut bytes[0..], 348);
        for (i, d) in [3i16, 2, 1, 1, 1, 1, 1, 1].iter().enumerate() {
            LittleEndian::write_i16(&mut bytes[40 + 2 * i..], *d);
        }
        LittleEndian::write_i16(&mut bytes[70..], DT_INT16);
        LittleEndian::write_f32(&mut bytes[108..], 352.0);
        LittleEndian::write_f32(&mut bytes[112..], 2.0);
        LittleEndian::write_f32(&mut bytes[116..], 1.0);
        bytes[344..348].copy_from_slice(b"n+1\0");
        bytes.write_i16::<LittleEndian>(3).unwrap();
        bytes.write_i16::<LittleEndian>(-4).unwrap();
        std::fs::write(&p, bytes).unwrap();
        let v = read_volume(&p).unwrap();
        assert_eq!(v.contrast, Contrast::T1);
        assert_eq!(v.subject_id, "IXI100");
        assert_eq!(v.data().iter().copied().collect::<Vec<_>>(), vec![7.0, -7.0]);
    }
}
