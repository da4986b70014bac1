//! Multi-contrast MRI volumes: file I/O, intensity normalization, slicing,
//! dataset manifests and synthetic phantoms.

mod manifest;
mod nifti;
mod phantom;
mod raw;

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{split_subjects, DatasetManifest, ManifestEntry, Split, SplitCounts};
pub use phantom::{generate_phantom, PhantomSet};
pub use raw::{read_array2, write_array2};

/// Voxels above this (normalized) intensity count as foreground.
pub const FOREGROUND_LEVEL: f32 = 0.05;

/// Slices with less foreground than this fraction are dropped from datasets.
pub const MIN_FOREGROUND_FRACTION: f32 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Contrast {
    T1,
    T2,
    PD,
}

impl Contrast {
    pub const ALL: [Contrast; 3] = [Contrast::T1, Contrast::T2, Contrast::PD];

    pub fn as_str(self) -> &'static str {
        match self {
            Contrast::T1 => "T1",
            Contrast::T2 => "T2",
            Contrast::PD => "PD",
        }
    }
}

impl fmt::Display for Contrast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Contrast {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T1" => Ok(Contrast::T1),
            "T2" => Ok(Contrast::T2),
            "PD" => Ok(Contrast::PD),
            other => Err(Error::Config(format!("unknown contrast {other:?}"))),
        }
    }
}

/// A 3D scalar image of one contrast for one subject.
///
/// Values are always finite; `normalized` volumes additionally lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    spacing: [f32; 3],
    pub contrast: Contrast,
    pub subject_id: String,
    normalized: bool,
}

impl Volume {
    pub fn new(
        data: Array3<f32>,
        spacing: [f32; 3],
        contrast: Contrast,
        subject_id: impl Into<String>,
    ) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        if data.is_empty() {
            return Err(Error::Shape("volume has a zero-length axis".into()));
        }
        Ok(Volume {
            data: data.as_standard_layout().into_owned(),
            spacing,
            contrast,
            subject_id: subject_id.into(),
            normalized: false,
        })
    }

    /// Marks the volume as normalized. Fails if any value lies outside `[0, 1]`.
    pub fn into_normalized(mut self) -> Result<Self> {
        if self.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("normalized volume has values outside [0, 1]".into()));
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Replaces the voxel data, keeping metadata. The normalized flag is
    /// cleared unless the new data still lies in `[0, 1]`.
    pub fn with_data(&self, data: Array3<f32>) -> Result<Self> {
        if data.shape() != self.data.shape() {
            return Err(Error::Shape(format!(
                "expected {:?}, got {:?}",
                self.data.shape(),
                data.shape()
            )));
        }
        let mut out = Volume::new(data, self.spacing, self.contrast, self.subject_id.clone())?;
        if self.normalized && out.data.iter().all(|v| (0.0..=1.0).contains(v)) {
            out.normalized = true;
        }
        Ok(out)
    }
}

/// Reads a NIfTI-1 (`.nii`, `.nii.gz`) or raw float32 (`.raw` + `.json` sidecar) volume.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Nifti { gzip } => nifti::read(path, gzip),
        VolumeFormat::Raw => raw::read(path),
    }
}

/// Writes a volume; the format follows the file extension.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if v.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Nifti { gzip } => nifti::write(v, path, gzip),
        VolumeFormat::Raw => raw::write(v, path),
    }
}

enum VolumeFormat {
    Nifti { gzip: bool },
    Raw,
}

impl VolumeFormat {
    fn from_path(path: &Path) -> Result<Self> {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_ascii_lowercase();
        if name.ends_with(".nii.gz") {
            Ok(VolumeFormat::Nifti { gzip: true })
        } else if name.ends_with(".nii") {
            Ok(VolumeFormat::Nifti { gzip: false })
        } else if name.ends_with(".raw") {
            Ok(VolumeFormat::Raw)
        } else {
            Err(Error::Unreadable {
                path: path.to_path_buf(),
                reason: "unrecognized extension (expected .nii, .nii.gz or .raw)".into(),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NormalizeMode {
    MinMax,
    /// Clip at the given percentiles (0–100) and rescale.
    Percentile {
        lo: f32,
        hi: f32,
    },
}

impl Default for NormalizeMode {
    fn default() -> Self {
        NormalizeMode::Percentile { lo: 0.0, hi: 99.5 }
    }
}

/// Rescales intensities to `[0, 1]`.
///
/// Percentile bounds are taken at actual voxel values, rounded outward
/// (floor for the low bound, ceil for the high one), so at most
/// `lo% + (100 - hi)%` of voxels are clipped. A constant image maps to zeros.
pub fn normalize(v: &Volume, mode: NormalizeMode) -> Result<Volume> {
    let (lo, hi) = match mode {
        NormalizeMode::MinMax => {
            let lo = v.data.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = v.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            (lo, hi)
        }
        NormalizeMode::Percentile { lo, hi } => {
            if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo > hi {
                return Err(Error::Config(format!("bad percentile range ({lo}, {hi})")));
            }
            let mut sorted: Vec<f32> = v.data.iter().copied().collect();
            sorted.sort_by(f32::total_cmp);
            (
                percentile_outward(&sorted, lo, false),
                percentile_outward(&sorted, hi, true),
            )
        }
    };
    let range = hi - lo;
    let data = if range > 0.0 {
        v.data.mapv(|x| ((x.clamp(lo, hi) - lo) / range).clamp(0.0, 1.0))
    } else {
        Array3::zeros(v.data.raw_dim())
    };
    let mut out = v.with_data(data)?;
    out.normalized = true;
    Ok(out)
}

fn percentile_outward(sorted: &[f32], p: f32, upper: bool) -> f32 {
    let pos = f64::from(p) / 100.0 * (sorted.len() - 1) as f64;
    let idx = if upper { pos.ceil() } else { pos.floor() } as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Returns the 2D cross-sections `keep` along `axis`, in order.
pub fn extract_slices(v: &Volume, axis: usize, keep: Range<usize>) -> Result<Vec<Array2<f32>>> {
    if axis > 2 {
        return Err(Error::Config(format!("slice axis must be 0, 1 or 2, got {axis}")));
    }
    let len = v.data.len_of(Axis(axis));
    if keep.start > keep.end || keep.end > len {
        return Err(Error::OutOfRange {
            index: keep.end.max(keep.start),
            len,
        });
    }
    Ok(keep.map(|i| v.data.index_axis(Axis(axis), i).to_owned()).collect())
}

/// Centered index range covering `fraction` of `len` slices (at least one).
pub fn central_range(len: usize, fraction: f32) -> Range<usize> {
    let keep = ((len as f32 * fraction.clamp(0.0, 1.0)).round() as usize).clamp(1, len.max(1));
    let start = (len - keep) / 2;
    start..start + keep
}

/// Fraction of pixels above [`FOREGROUND_LEVEL`].
pub fn foreground_fraction(slice: &Array2<f32>) -> f32 {
    if slice.is_empty() {
        return 0.0;
    }
    slice.iter().filter(|&&v| v > FOREGROUND_LEVEL).count() as f32 / slice.len() as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol(data: Array3<f32>) -> Volume {
        Volume::new(data, [1.0, 1.0, 1.0], Contrast::T2, "s0").unwrap()
    }

    #[test]
    fn minmax_is_affine() {
        let v = vol(Array::from_shape_vec((3, 1, 1), vec![2.0, 4.0, 6.0]).unwrap());
        let n = normalize(&v, NormalizeMode::MinMax).unwrap();
        assert_eq!(n.data().iter().copied().collect::<Vec<_>>(), vec![0.0, 0.5, 1.0]);
        assert!(n.is_normalized());
    }

    #[test]
    fn constant_image_maps_to_zeros() {
        let v = vol(Array3::from_elem((4, 4, 2), 3.5));
        for mode in [NormalizeMode::MinMax, NormalizeMode::default()] {
            let n = normalize(&v, mode).unwrap();
            assert!(n.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn minmax_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = vol(Array3::from_shape_fn((5, 6, 7), |_| rng.gen_range(-3.0..9.0)));
        let once = normalize(&v, NormalizeMode::MinMax).unwrap();
        let twice = normalize(&once, NormalizeMode::MinMax).unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn percentile_clips_at_most_requested_tails() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = vol(Array3::from_shape_fn((8, 8, 8), |_| rng.gen::<f32>() * 100.0));
        let n = normalize(&v, NormalizeMode::Percentile { lo: 1.0, hi: 99.0 }).unwrap();
        assert!(n.data().iter().all(|x| (0.0..=1.0).contains(x)));

        // independent check: bounds from a direct sort and rank computation
        let mut sorted: Vec<f32> = v.data().iter().copied().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = sorted[(0.01f64 * 511.0).floor() as usize];
        let hi = sorted[(0.99f64 * 511.0).ceil() as usize];
        let clipped = v.data().iter().filter(|&&x| x < lo || x > hi).count();
        assert!(clipped as f32 <= 0.02 * 512.0, "clipped {clipped}");
        let saturated = n.data().iter().filter(|&&x| x == 0.0 || x == 1.0).count();
        assert!(saturated >= clipped);
    }

    #[test]
    fn slicing() {
        let v = vol(Array3::from_shape_fn((4, 4, 3), |(x, y, z)| {
            (x * 100 + y * 10 + z) as f32
        }));
        let all = extract_slices(&v, 2, 0..3).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[0].shape(), &[4, 4]);
        let one = extract_slices(&v, 2, 1..2).unwrap();
        assert_eq!(one[0], v.data().slice(s![.., .., 1]));
        assert!(matches!(extract_slices(&v, 2, 0..5), Err(Error::OutOfRange { .. })));
        assert!(extract_slices(&v, 3, 0..1).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let mut d = Array3::zeros((2, 2, 2));
        d[[1, 1, 1]] = f32::NAN;
        assert!(matches!(
            Volume::new(d, [1.0; 3], Contrast::T1, "x"),
            Err(Error::NonFinite)
        ));
    }

    #[test]
    fn central_range_keeps_middle() {
        assert_eq!(central_range(10, 0.6), 2..8);
        assert_eq!(central_range(16, 0.5), 4..12);
        assert_eq!(central_range(3, 0.0), 1..2);
    }
}
