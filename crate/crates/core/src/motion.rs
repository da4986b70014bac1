//! Bulk rigid-motion artefact simulation.
//!
//! A slice is "acquired" line by line along the phase-encode axis. Motion is
//! modelled as a sequence of in-plane rotations: k-space lines between two
//! cut points come from the Fourier transform of the slice in that pose. The
//! composite k-space is inverse transformed and its magnitude returned.

use ndarray::{Array2, Axis as NdAxis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Phase-encode direction: the axis along which k-space lines are indexed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseAxis {
    /// Lines are columns of k-space (indexed by kx).
    X,
    /// Lines are rows of k-space (indexed by ky).
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisChoice {
    RandomXy,
    X,
    Y,
}

/// Rotation-only motion settings. Translation is always zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    pub n_movements: usize,
    pub rot_range_deg: (f64, f64),
    pub axis_choice: AxisChoice,
    pub seed: u64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            n_movements: 10,
            rot_range_deg: (-1.75, 1.75),
            axis_choice: AxisChoice::RandomXy,
            seed: 0,
        }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.rot_range_deg;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!(
                "rotation range ({lo}, {hi}) must satisfy lo <= hi"
            )));
        }
        if self.n_movements == 0 {
            return Err(Error::Config("n_movements must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_motion_free(&self) -> bool {
        self.rot_range_deg == (0.0, 0.0)
    }
}

fn default_true() -> bool {
    true
}

/// Ground-truth record of the motion applied to one slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionTrace {
    pub angles_deg: Vec<f64>,
    pub axis: PhaseAxis,
    /// Strictly increasing line indices (in centred k-space order). Segment
    /// `k` spans `cuts[k-1]..cuts[k]`; segment 0 is the unmoved pose.
    pub cuts: Vec<usize>,
    pub seed: u64,
    /// When set, the segment containing the k-space centre line is taken from
    /// the unmoved pose so overall contrast matches the clean image.
    #[serde(default = "default_true")]
    pub center_anchored: bool,
}

impl MotionTrace {
    pub fn n_lines(&self, shape: (usize, usize)) -> usize {
        match self.axis {
            PhaseAxis::X => shape.1,
            PhaseAxis::Y => shape.0,
        }
    }

    fn check(&self, n_lines: usize) -> Result<()> {
        if self.angles_deg.len() != self.cuts.len() {
            return Err(Error::Trace(format!(
                "{} angles but {} cuts",
                self.angles_deg.len(),
                self.cuts.len()
            )));
        }
        if self.cuts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Trace("cuts must be strictly increasing".into()));
        }
        if let Some(&last) = self.cuts.last() {
            if last >= n_lines {
                return Err(Error::Trace(format!("cut {last} outside {n_lines} lines")));
            }
        }
        if self.angles_deg.iter().any(|a| !a.is_finite()) {
            return Err(Error::Trace("non-finite angle".into()));
        }
        Ok(())
    }

    /// Index of the pose (0 = unmoved, k = movement k) owning each line.
    pub fn line_owners(&self, n_lines: usize) -> Vec<usize> {
        let segment = |l: usize| self.cuts.partition_point(|&c| c <= l);
        let center = segment(n_lines / 2);
        (0..n_lines)
            .map(|l| {
                let s = segment(l);
                if self.center_anchored && s == center {
                    0
                } else {
                    s
                }
            })
            .collect()
    }
}

/// Draws angles, phase-encode axis and cut points for one slice.
///
/// Draw order is axis, then angles, then cuts, so the number of values taken
/// from `rng` depends only on the configuration and slice shape.
pub fn draw_motion_params<R: Rng + ?Sized>(
    cfg: &MotionConfig,
    slice_shape: (usize, usize),
    rng: &mut R,
) -> Result<MotionTrace> {
    cfg.validate()?;
    let axis = match cfg.axis_choice {
        AxisChoice::X => PhaseAxis::X,
        AxisChoice::Y => PhaseAxis::Y,
        AxisChoice::RandomXy => {
            if rng.gen_bool(0.5) {
                PhaseAxis::X
            } else {
                PhaseAxis::Y
            }
        }
    };
    let n_lines = match axis {
        PhaseAxis::X => slice_shape.1,
        PhaseAxis::Y => slice_shape.0,
    };
    if n_lines < cfg.n_movements + 2 {
        return Err(Error::Config(format!(
            "{n_lines} k-space lines cannot hold {} movements",
            cfg.n_movements
        )));
    }
    let (lo, hi) = cfg.rot_range_deg;
    let angles_deg = (0..cfg.n_movements)
        .map(|_| if lo == hi { lo } else { rng.gen_range(lo..=hi) })
        .collect();
    let mut cuts: Vec<usize> = index::sample(rng, n_lines - 1, cfg.n_movements)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    cuts.sort_unstable();
    Ok(MotionTrace {
        angles_deg,
        axis,
        cuts,
        seed: cfg.seed,
        center_anchored: true,
    })
}

/// Rotates about the image centre with bilinear interpolation and zero fill.
pub fn rotate_2d(img: &Array2<f32>, angle_deg: f64) -> Array2<f32> {
    if angle_deg == 0.0 {
        return img.clone();
    }
    let (h, w) = img.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            f64::from(img[[r as usize, c as usize]])
        }
    };
    Array2::from_shape_fn((h, w), |(r, c)| {
        let x = c as f64 - cx;
        let y = r as f64 - cy;
        // inverse mapping: sample the source at R(-angle) * (x, y)
        let sx = cos * x + sin * y + cx;
        let sy = -sin * x + cos * y + cy;
        let x0 = sx.floor();
        let y0 = sy.floor();
        let fx = sx - x0;
        let fy = sy - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let v = at(y0, x0) * (1.0 - fx) * (1.0 - fy)
            + at(y0, x0 + 1) * fx * (1.0 - fy)
            + at(y0 + 1, x0) * (1.0 - fx) * fy
            + at(y0 + 1, x0 + 1) * fx * fy;
        v as f32
    })
}

/// Planned 2D FFTs for one image shape. Forward is unnormalized, inverse
/// scales by 1/N.
pub struct Fft2 {
    shape: (usize, usize),
    row_fwd: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(shape: (usize, usize)) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            shape,
            row_fwd: planner.plan_fft_forward(shape.1),
            col_fwd: planner.plan_fft_forward(shape.0),
            row_inv: planner.plan_fft_inverse(shape.1),
            col_inv: planner.plan_fft_inverse(shape.0),
        }
    }

    fn transform(&self, data: &mut Array2<Complex64>, inverse: bool) {
        let (rows, cols) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        let mut buf: Vec<Complex64> = Vec::with_capacity(self.shape.0.max(self.shape.1));
        for mut row in data.axis_iter_mut(NdAxis(0)) {
            buf.clear();
            buf.extend(row.iter());
            rows.process(&mut buf);
            row.iter_mut().zip(&buf).for_each(|(d, s)| *d = *s);
        }
        for mut col in data.axis_iter_mut(NdAxis(1)) {
            buf.clear();
            buf.extend(col.iter());
            cols.process(&mut buf);
            col.iter_mut().zip(&buf).for_each(|(d, s)| *d = *s);
        }
        if inverse {
            let scale = 1.0 / (self.shape.0 * self.shape.1) as f64;
            data.mapv_inplace(|v| v * scale);
        }
    }

    /// k-space of `img` with the DC component at `(h/2, w/2)`.
    pub fn centered_kspace(&self, img: &Array2<f32>) -> Array2<Complex64> {
        assert_eq!(img.dim(), self.shape, "image shape does not match FFT plan");
        let mut k = img.mapv(|v| Complex64::new(f64::from(v), 0.0));
        self.transform(&mut k, false);
        fftshift(&k)
    }

    /// Inverse of [`Fft2::centered_kspace`], returning the complex image.
    pub fn image_from_centered(&self, k: &Array2<Complex64>) -> Array2<Complex64> {
        let mut x = ifftshift(k);
        self.transform(&mut x, true);
        x
    }
}

fn fftshift(k: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = k.dim();
    Array2::from_shape_fn((h, w), |(r, c)| k[[(r + h - h / 2) % h, (c + w - w / 2) % w]])
}

fn ifftshift(k: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = k.dim();
    Array2::from_shape_fn((h, w), |(r, c)| k[[(r + h / 2) % h, (c + w / 2) % w]])
}

fn copy_line(dst: &mut Array2<Complex64>, src: &Array2<Complex64>, axis: PhaseAxis, line: usize) {
    let ax = match axis {
        PhaseAxis::X => NdAxis(1),
        PhaseAxis::Y => NdAxis(0),
    };
    dst.index_axis_mut(ax, line).assign(&src.index_axis(ax, line));
}

/// Centred composite k-space of a moving acquisition described by `trace`.
pub fn composite_kspace(img: &Array2<f32>, trace: &MotionTrace) -> Result<Array2<Complex64>> {
    composite_with(&Fft2::new(img.dim()), img, trace)
}

fn composite_with(fft: &Fft2, img: &Array2<f32>, trace: &MotionTrace) -> Result<Array2<Complex64>> {
    let n_lines = trace.n_lines(img.dim());
    trace.check(n_lines)?;
    let owners = trace.line_owners(n_lines);
    let mut used = vec![false; trace.angles_deg.len() + 1];
    owners.iter().for_each(|&o| used[o] = true);

    let poses: Vec<Option<Array2<Complex64>>> = used
        .iter()
        .enumerate()
        .map(|(k, &u)| {
            u.then(|| {
                if k == 0 {
                    fft.centered_kspace(img)
                } else {
                    fft.centered_kspace(&rotate_2d(img, trace.angles_deg[k - 1]))
                }
            })
        })
        .collect();

    let mut composite = Array2::zeros(img.dim());
    for (line, &owner) in owners.iter().enumerate() {
        let src = poses[owner].as_ref().expect("owning pose was transformed");
        copy_line(&mut composite, src, trace.axis, line);
    }
    Ok(composite)
}

/// Applies the motion in `trace` to a clean slice and returns the magnitude image.
pub fn corrupt_slice(img: &Array2<f32>, trace: &MotionTrace) -> Result<Array2<f32>> {
    if img.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let fft = Fft2::new(img.dim());
    let k = composite_with(&fft, img, trace)?;
    Ok(fft.image_from_centered(&k).mapv(|c| c.norm() as f32))
}

/// Seed of the per-slice generator used by [`corrupt_volume`].
pub fn slice_seed(seed: u64, slice_index: usize) -> u64 {
    seed ^ slice_index as u64
}

/// Corrupts every slice along `slice_axis` with its own independently drawn trace.
pub fn corrupt_volume(v: &Volume, cfg: &MotionConfig, slice_axis: usize) -> Result<(Volume, Vec<MotionTrace>)> {
    cfg.validate()?;
    if !v.is_normalized() {
        return Err(Error::Config("corrupt_volume expects a normalized volume".into()));
    }
    if slice_axis > 2 {
        return Err(Error::Config(format!("slice axis must be 0, 1 or 2, got {slice_axis}")));
    }
    let mut out = v.data().clone();
    let mut traces = Vec::with_capacity(out.len_of(NdAxis(slice_axis)));
    for (i, mut lane) in out.axis_iter_mut(NdAxis(slice_axis)).enumerate() {
        let clean = lane.to_owned();
        let seed = slice_seed(cfg.seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trace = draw_motion_params(cfg, clean.dim(), &mut rng)?;
        trace.seed = seed;
        lane.assign(&corrupt_slice(&clean, &trace)?);
        traces.push(trace);
    }
    Ok((v.with_data(out)?, traces))
}
