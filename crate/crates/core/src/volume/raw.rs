//! Raw little-endian float32 arrays (C order) with a JSON sidecar header.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{Contrast, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 3],
    spacing: [f32; 3],
    contrast: Contrast,
    subject_id: String,
    #[serde(default)]
    normalized: bool,
}

pub(super) fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub(super) fn read(path: &Path) -> Result<Volume> {
    let header_path = sidecar_path(path);
    let text = fs::read_to_string(&header_path).map_err(|e| Error::Unreadable {
        path: header_path.clone(),
        reason: e.to_string(),
    })?;
    let header: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Unreadable {
        path: header_path.clone(),
        reason: e.to_string(),
    })?;
    let bytes = fs::read(path).map_err(|e| Error::Unreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let n: usize = header.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Unreadable {
            path: path.to_path_buf(),
            reason: format!(
                "expected {} bytes for shape {:?}, found {}",
                n * 4,
                header.shape,
                bytes.len()
            ),
        });
    }
    let mut values = vec![0f32; n];
    LittleEndian::read_f32_into(&bytes, &mut values);
    let data = Array3::from_shape_vec(header.shape, values).map_err(|e| Error::Shape(e.to_string()))?;
    let v = Volume::new(data, header.spacing, header.contrast, header.subject_id)?;
    if header.normalized {
        v.into_normalized()
    } else {
        Ok(v)
    }
}

pub(super) fn write(v: &Volume, path: &Path) -> Result<()> {
    let values: Vec<f32> = v.data().iter().copied().collect();
    let mut bytes = vec![0u8; values.len() * 4];
    LittleEndian::write_f32_into(&values, &mut bytes);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let header = Sidecar {
        shape: v.shape(),
        spacing: v.spacing(),
        contrast: v.contrast,
        subject_id: v.subject_id.clone(),
        normalized: v.is_normalized(),
    };
    let header_path = sidecar_path(path);
    fs::write(&header_path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(header_path, e))
}

/// Writes a 2D array as raw float32 (C order); used for persisted sample sets.
pub fn write_array2(a: &ndarray::Array2<f32>, path: &Path) -> Result<()> {
    let values: Vec<f32> = a.iter().copied().collect();
    let mut bytes = vec![0u8; values.len() * 4];
    LittleEndian::write_f32_into(&values, &mut bytes);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_array2(path: &Path, shape: (usize, usize)) -> Result<ndarray::Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != shape.0 * shape.1 * 4 {
        return Err(Error::Unreadable {
            path: path.to_path_buf(),
            reason: format!("expected {} bytes, found {}", shape.0 * shape.1 * 4, bytes.len()),
        });
    }
    let mut values = vec![0f32; shape.0 * shape.1];
    LittleEndian::read_f32_into(&bytes, &mut values);
    ndarray::Array2::from_shape_vec(shape, values).map_err(|e| Error::Shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{read_volume, write_volume};
    use proptest::prelude::*;

    #[test]
    fn zeros_file_reads_as_zero_volume() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.raw");
        fs::write(&p, vec![0u8; 4 * 4 * 2 * 4]).unwrap();
        fs::write(
            sidecar_path(&p),
            r#"{"shape":[4,4,2],"spacing":[1,1,1],"contrast":"T2","subject_id":"a"}"#,
        )
        .unwrap();
        let v = read_volume(&p).unwrap();
        assert_eq!(v.shape(), [4, 4, 2]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn missing_directory_is_io_error() {
        let v = Volume::new(Array3::zeros((2, 2, 2)), [1.0; 3], Contrast::T1, "a").unwrap();
        let err = write_volume(&v, "/nonexistent-dir-xyz/v.raw").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn raw_and_nifti_round_trip_bit_exact(
            nx in 1usize..6, ny in 1usize..6, nz in 1usize..5,
            seed in any::<u64>(), sp in 0.1f32..4.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = Array3::from_shape_fn((nx, ny, nz), |_| rng.gen_range(-1e3f32..1e3));
            let v = Volume::new(data, [sp, sp * 2.0, 1.0], Contrast::T2, "subj").unwrap();
            let dir = tempfile::tempdir().unwrap();
            for name in ["v.raw", "v.nii"] {
                let p = dir.path().join(name);
                write_volume(&v, &p).unwrap();
                let back = read_volume(&p).unwrap();
                prop_assert_eq!(back.shape(), v.shape());
                prop_assert_eq!(back.spacing(), v.spacing());
                let same = back.data().iter().zip(v.data().iter()).all(|(a, b)| a.to_bits() == b.to_bits());
                prop_assert!(same);
            }
        }
    }
}
